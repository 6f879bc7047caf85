//! Evaluation: predictive entropy, empirical CDFs, dense uncertainty grids
//! over the input plane, accuracy, and CSV/SVG export. All output is
//! byte-deterministic for a given model and arguments.

use std::fmt::Write as FmtWrite;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{forward, Head, ModelParams};
use crate::sl::DirichletParams;

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRecord {
    pub x: f64,
    pub y: f64,
    pub vacuity: f64,
    pub dissonance: f64,
    pub entropy: f64,
    pub predicted_class: usize,
}

/// Empirical CDF sampled at evenly spaced thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfCurve {
    pub thresholds: Vec<f64>,
    pub cumulative: Vec<f64>,
}

/// Shannon entropy of a probability vector in nats, with `0 ln 0 = 0`.
pub fn predictive_entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Domain("empty probability vector".into()));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|&p| !(0.0..=1.0 + 1e-6).contains(&p)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Domain(format!(
            "not a probability vector (sum {sum})"
        )));
    }
    Ok(probs
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum())
}

/// Fraction of `values` at or below each of `num_thresholds` evenly spaced
/// thresholds over `[0, max_value]`.
pub fn empirical_cdf(values: &[f64], num_thresholds: usize, max_value: f64) -> Result<CdfCurve> {
    if values.is_empty() {
        return Err(Error::Domain("empty value set for CDF".into()));
    }
    if num_thresholds < 2 || !(max_value > 0.0) {
        return Err(Error::Domain("need >= 2 thresholds and a positive max".into()));
    }
    let n = values.len() as f64;
    let mut thresholds = Vec::with_capacity(num_thresholds);
    let mut cumulative = Vec::with_capacity(num_thresholds);
    for i in 0..num_thresholds {
        let t = max_value * i as f64 / (num_thresholds - 1) as f64;
        let count = values.iter().filter(|&&v| v <= t).count();
        thresholds.push(t);
        cumulative.push(count as f64 / n);
    }
    Ok(CdfCurve { thresholds, cumulative })
}

/// Index of the largest entry, ties resolved to the lowest index.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Class probabilities at `x`: the Dirichlet mean for the evidence head, the
/// softmax output otherwise.
pub fn class_probabilities(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    let (out, _) = forward(params, x)?;
    match params.head {
        Head::Evidence(_) => {
            Ok(DirichletParams::from_network_evidence(&out)?.expected_probability())
        }
        Head::Softmax => Ok(out),
    }
}

pub fn predict_class(params: &ModelParams, x: &[f64]) -> Result<usize> {
    Ok(argmax_lowest(&class_probabilities(params, x)?))
}

/// Evaluates vacuity, dissonance, predictive entropy and the predicted class
/// on a `resolution x resolution` grid over `[min, max]^2`. Row-major: y is
/// the outer loop, x the inner one, both ascending. Evidence head only.
pub fn uncertainty_grid(
    params: &ModelParams,
    bounds: (f64, f64),
    resolution: usize,
) -> Result<Vec<GridRecord>> {
    if params.head == Head::Softmax {
        return Err(Error::Config(
            "uncertainty grid needs an evidence-head model".into(),
        ));
    }
    if params.input_dim() != 2 {
        return Err(Error::Config(format!(
            "grid evaluation needs 2 input features, model has {}",
            params.input_dim()
        )));
    }
    let (min, max) = bounds;
    if !(min < max) || resolution < 2 {
        return Err(Error::Domain("need min < max and resolution >= 2".into()));
    }
    let step = (max - min) / (resolution - 1) as f64;
    let mut records = Vec::with_capacity(resolution * resolution);
    for iy in 0..resolution {
        let y = min + iy as f64 * step;
        for ix in 0..resolution {
            let x = min + ix as f64 * step;
            let (evidence, _) = forward(params, &[x, y])?;
            let alpha = DirichletParams::from_network_evidence(&evidence)?;
            let probs = alpha.expected_probability();
            records.push(GridRecord {
                x,
                y,
                vacuity: alpha.vacuity(),
                dissonance: alpha.dissonance(),
                entropy: predictive_entropy(&probs)?,
                predicted_class: argmax_lowest(&probs),
            });
        }
    }
    Ok(records)
}

/// Fraction of labeled samples whose predicted class matches the label.
pub fn accuracy(params: &ModelParams, dataset: &Dataset) -> Result<f64> {
    let labeled = dataset.labeled_indices();
    if labeled.is_empty() {
        return Err(Error::Domain("no labeled samples to score".into()));
    }
    let mut correct = 0usize;
    for &idx in &labeled {
        let sample = &dataset.samples[idx];
        let label = sample.label.expect("labeled index");
        if predict_class(params, &sample.features)? == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labeled.len() as f64)
}

/// Predictive entropies of the listed samples.
pub fn dataset_entropies(params: &ModelParams, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    indices
        .iter()
        .map(|&i| {
            let s = dataset
                .samples
                .get(i)
                .ok_or_else(|| Error::Domain(format!("sample index {i} out of range")))?;
            predictive_entropy(&class_probabilities(params, &s.features)?)
        })
        .collect()
}

/// Which grid quantity a rendering shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Channel {
    Vacuity,
    Dissonance,
    Entropy,
    Class,
}

impl std::fmt::Display for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Channel::Vacuity => write!(f, "vacuity"),
            Channel::Dissonance => write!(f, "dissonance"),
            Channel::Entropy => write!(f, "entropy"),
            Channel::Class => write!(f, "class"),
        }
    }
}

pub fn write_grid_csv(records: &[GridRecord], path: &Path, comment: Option<&str>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "x,y,vacuity,dissonance,entropy,predicted_class")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.x, r.y, r.vacuity, r.dissonance, r.entropy, r.predicted_class
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cdf_csv(curve: &CdfCurve, path: &Path, comment: Option<&str>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    if let Some(c) = comment {
        writeln!(w, "# {c}")?;
    }
    writeln!(w, "entropy_threshold,cdf")?;
    for (t, c) in curve.thresholds.iter().zip(&curve.cumulative) {
        writeln!(w, "{t},{c}")?;
    }
    w.flush()?;
    Ok(())
}

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 600.0;
const MARGIN: f64 = 50.0;
const RAMP_LO: [f64; 3] = [68.0, 1.0, 84.0];
const RAMP_HI: [f64; 3] = [109.0, 205.0, 89.0];

fn ramp_color(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let ch = |i: usize| (RAMP_LO[i] + t * (RAMP_HI[i] - RAMP_LO[i])).round() as u8;
    format!("#{:02x}{:02x}{:02x}", ch(0), ch(1), ch(2))
}

fn channel_value(r: &GridRecord, channel: Channel, num_classes: usize) -> f64 {
    match channel {
        Channel::Vacuity => r.vacuity,
        Channel::Dissonance => r.dissonance,
        Channel::Entropy => r.entropy / (num_classes as f64).ln(),
        Channel::Class => {
            if num_classes > 1 {
                r.predicted_class as f64 / (num_classes - 1) as f64
            } else {
                0.0
            }
        }
    }
}

/// Renders one grid channel as a fixed-size heatmap. Output is a pure
/// function of the inputs.
pub fn grid_svg(
    records: &[GridRecord],
    resolution: usize,
    channel: Channel,
    num_classes: usize,
    comment: Option<&str>,
) -> Result<String> {
    if resolution < 2 || records.len() != resolution * resolution {
        return Err(Error::Domain(format!(
            "expected {0} x {0} grid records, got {1}",
            resolution,
            records.len()
        )));
    }
    let plot_w = SVG_W - 2.0 * MARGIN;
    let plot_h = SVG_H - 2.0 * MARGIN;
    let cell_w = plot_w / resolution as f64;
    let cell_h = plot_h / resolution as f64;
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">"
    )
    .unwrap();
    if let Some(c) = comment {
        writeln!(s, "<!-- {c} -->").unwrap();
    }
    writeln!(s, "<rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"#ffffff\"/>").unwrap();
    for iy in 0..resolution {
        for ix in 0..resolution {
            let r = &records[iy * resolution + ix];
            let px = MARGIN + ix as f64 * cell_w;
            // larger y drawn nearer the top
            let py = MARGIN + (resolution - 1 - iy) as f64 * cell_h;
            let color = ramp_color(channel_value(r, channel, num_classes));
            writeln!(
                s,
                "<rect x=\"{px:.2}\" y=\"{py:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\"/>",
                cell_w + 0.01,
                cell_h + 0.01
            )
            .unwrap();
        }
    }
    writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"16\">{channel}</text>",
        MARGIN,
        MARGIN - 12.0
    )
    .unwrap();
    writeln!(s, "</svg>").unwrap();
    Ok(s)
}

/// Renders a CDF curve as a fixed-size polyline plot.
pub fn cdf_svg(curve: &CdfCurve, comment: Option<&str>) -> Result<String> {
    if curve.thresholds.len() != curve.cumulative.len() || curve.thresholds.len() < 2 {
        return Err(Error::Domain("malformed CDF curve".into()));
    }
    let max_t = *curve.thresholds.last().unwrap();
    if !(max_t > 0.0) {
        return Err(Error::Domain("CDF thresholds must end above zero".into()));
    }
    let plot_w = SVG_W - 2.0 * MARGIN;
    let plot_h = SVG_H - 2.0 * MARGIN;
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" viewBox=\"0 0 {SVG_W} {SVG_H}\">"
    )
    .unwrap();
    if let Some(c) = comment {
        writeln!(s, "<!-- {c} -->").unwrap();
    }
    writeln!(s, "<rect width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"#ffffff\"/>").unwrap();
    writeln!(
        s,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"#000000\"/>"
    )
    .unwrap();
    let mut points = String::new();
    for (t, c) in curve.thresholds.iter().zip(&curve.cumulative) {
        let px = MARGIN + t / max_t * plot_w;
        let py = MARGIN + (1.0 - c) * plot_h;
        write!(points, "{px:.2},{py:.2} ").unwrap();
    }
    writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
        points.trim_end(),
        ramp_color(0.0)
    )
    .unwrap();
    writeln!(
        s,
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"monospace\" font-size=\"16\">entropy CDF</text>",
        MARGIN,
        MARGIN - 12.0
    )
    .unwrap();
    writeln!(s, "</svg>").unwrap();
    Ok(s)
}

pub fn write_svg(text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}
