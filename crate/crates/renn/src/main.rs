use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use renn::config::{TrainConfig, Variant};
use renn::data::{
    apply_bod, gen_synthetic, read_bod_indices, read_dataset_csv, select_bod, write_bod_indices,
    write_dataset_csv, Metric,
};
use renn::error::Error;
use renn::eval::{
    cdf_svg, dataset_entropies, empirical_cdf, grid_svg, uncertainty_grid, write_cdf_csv,
    write_grid_csv, write_svg, Channel,
};
use renn::net::{load_checkpoint, save_checkpoint, train};

#[derive(Parser)]
#[command(name = "renn", version, about = "Evidential classifiers with uncertainty regularizers")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic three-class mixture with OOD blobs
    GenData {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output dataset CSV
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n_per_class: usize,
        #[arg(long, default_value_t = 100)]
        n_per_ood: usize,
    },
    /// Select boundary (BOD) samples by neighbor-label dissonance
    SelectBod {
        /// Input dataset CSV
        #[arg(long)]
        data: PathBuf,
        /// Neighborhood size
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Number of samples to select
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, value_enum, default_value_t = Metric::Euclidean)]
        metric: Metric,
        /// Output index file, one id per line
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model variant on a dataset
    Train {
        /// Training config JSON
        #[arg(long)]
        config: PathBuf,
        /// Input dataset CSV
        #[arg(long)]
        data: PathBuf,
        /// BOD index file; tags those samples before training
        #[arg(long)]
        bod: Option<PathBuf>,
        /// Output checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch loss CSV; defaults to the checkpoint path with a
        /// loss.csv extension
        #[arg(long)]
        loss_log: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
    },
    /// Evaluate a trained checkpoint
    Eval {
        #[command(subcommand)]
        what: EvalCmd,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Uncertainty measures over a dense input grid
    Grid {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = -10.0)]
        min: f64,
        #[arg(long, default_value_t = 10.0)]
        max: f64,
        #[arg(long, default_value_t = 200)]
        res: usize,
        /// Channel rendered in the SVG
        #[arg(long, value_enum, default_value_t = Channel::Vacuity)]
        channel: Channel,
        /// Grid CSV output
        #[arg(long)]
        out: Option<PathBuf>,
        /// Heatmap SVG output
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Empirical CDF of predictive entropy over a dataset
    Cdf {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// CDF CSV output
        #[arg(long)]
        out: Option<PathBuf>,
        /// Curve SVG output
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Accuracy over the labeled samples of a dataset
    Accuracy {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

fn run(cmd: Cmd) -> renn::Result<()> {
    match cmd {
        Cmd::GenData {
            seed,
            out,
            n_per_class,
            n_per_ood,
        } => {
            let data = gen_synthetic(seed, n_per_class, n_per_ood)?;
            write_dataset_csv(&data, &out)?;
            println!("wrote {} samples to {}", data.len(), out.display());
        }
        Cmd::SelectBod {
            data,
            k,
            n,
            metric,
            out,
        } => {
            let dataset = read_dataset_csv(&data)?;
            let indices = select_bod(&dataset, k, n, metric)?;
            write_bod_indices(&indices, &out)?;
            println!("wrote {} boundary indices to {}", indices.len(), out.display());
        }
        Cmd::Train {
            config,
            data,
            bod,
            out,
            loss_log,
            epochs,
            seed,
            variant,
            lambda1,
            lambda2,
        } => {
            let mut cfg = TrainConfig::from_json_file(&config)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = lambda1 {
                cfg.lambda1 = l;
            }
            if let Some(l) = lambda2 {
                cfg.lambda2 = l;
            }
            cfg.validate()?;
            let mut dataset = read_dataset_csv(&data)?;
            if let Some(bod_path) = &bod {
                let indices = read_bod_indices(bod_path)?;
                apply_bod(&mut dataset, &indices)?;
            }
            let outcome = train(&dataset, &cfg)?;
            save_checkpoint(&outcome.params, &cfg, &out)?;
            let log_path = loss_log.unwrap_or_else(|| out.with_extension("loss.csv"));
            let file = std::fs::File::create(&log_path)?;
            let mut w = BufWriter::new(file);
            writeln!(w, "# {}", cfg.echo())?;
            writeln!(
                w,
                "epoch,ssl,misleading_kl,vacuity_term,dissonance_term,knn_kl_term,total"
            )?;
            for (epoch, b) in outcome.history.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    epoch, b.ssl, b.misleading_kl, b.vacuity_term, b.dissonance_term,
                    b.knn_kl_term, b.total
                )?;
            }
            w.flush()?;
            let last = outcome.history.last().expect("at least one epoch");
            println!(
                "trained {} for {} epochs, final loss {:.6}; checkpoint {}",
                cfg.variant,
                cfg.epochs,
                last.total,
                out.display()
            );
        }
        Cmd::Eval { what } => match what {
            EvalCmd::Grid {
                model,
                min,
                max,
                res,
                channel,
                out,
                svg,
            } => {
                let (params, cfg) = load_checkpoint(&model)?;
                let records = uncertainty_grid(&params, (min, max), res)?;
                let echo = cfg.echo();
                if let Some(path) = &out {
                    write_grid_csv(&records, path, Some(&echo))?;
                }
                if let Some(path) = &svg {
                    let text = grid_svg(&records, res, channel, params.output_dim(), Some(&echo))?;
                    write_svg(&text, path)?;
                }
                let mean_vac =
                    records.iter().map(|r| r.vacuity).sum::<f64>() / records.len() as f64;
                println!("evaluated {} grid points, mean vacuity {mean_vac:.4}", records.len());
            }
            EvalCmd::Cdf { model, data, out, svg } => {
                let (params, cfg) = load_checkpoint(&model)?;
                let dataset = read_dataset_csv(&data)?;
                let all: Vec<usize> = (0..dataset.len()).collect();
                let entropies = dataset_entropies(&params, &dataset, &all)?;
                let max_entropy = (dataset.num_classes as f64).ln();
                let curve = empirical_cdf(&entropies, 200, max_entropy)?;
                let echo = cfg.echo();
                if let Some(path) = &out {
                    write_cdf_csv(&curve, path, Some(&echo))?;
                }
                if let Some(path) = &svg {
                    write_svg(&cdf_svg(&curve, Some(&echo))?, path)?;
                }
                let mean = entropies.iter().sum::<f64>() / entropies.len() as f64;
                println!("mean predictive entropy {mean:.4} over {} samples", entropies.len());
            }
            EvalCmd::Accuracy { model, data } => {
                let (params, _) = load_checkpoint(&model)?;
                let dataset = read_dataset_csv(&data)?;
                let acc = renn::eval::accuracy(&params, &dataset)?;
                println!("accuracy {acc:.4}");
            }
        },
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Domain(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
