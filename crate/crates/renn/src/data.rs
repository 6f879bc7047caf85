//! Dataset generation, partitioning and file formats.
//!
//! The synthetic task is the three-Gaussian mixture at (-2,-2), (0,1.464),
//! (2,-2) with unit covariance plus two OOD blobs at (+-8,-8). Boundary
//! (BOD) samples are picked by the four-step procedure: pairwise similarity,
//! top-k neighbors, dissonance of the neighbor-label Dirichlet estimate, top-n
//! by dissonance.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sl::DirichletParams;

/// Which loss partition a sample belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Partition {
    In,
    Ood,
    Bod,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::In => write!(f, "IN"),
            Partition::Ood => write!(f, "OOD"),
            Partition::Bod => write!(f, "BOD"),
        }
    }
}

impl std::str::FromStr for Partition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "IN" => Ok(Partition::In),
            "OOD" => Ok(Partition::Ood),
            "BOD" => Ok(Partition::Bod),
            other => Err(Error::Format(format!("unknown partition tag {other:?}"))),
        }
    }
}

/// Neighbor ranking key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Cosine similarity, descending. The image convention.
    Cosine,
    /// Euclidean distance, ascending. Default for low-dimensional features
    /// where cosine is degenerate around the origin.
    Euclidean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: Option<usize>,
    pub partition: Partition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub seed: u64,
    /// Original class names when loaded from a named-class source (CIFAR10);
    /// records the dense label remapping.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of labeled (IN or BOD) samples, in dataset order.
    pub fn labeled_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Indices of OOD samples, in dataset order.
    pub fn ood_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.partition == Partition::Ood)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn bod_indices(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.partition == Partition::Bod)
            .map(|(i, _)| i)
            .collect()
    }
}

// Counter-based uniform generator: every draw is keyed by (seed, index,
// stream), so per-sample draws are order-independent.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn keyed_uniform(seed: u64, index: u64, stream: u64) -> f64 {
    let z = splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_mul(2).wrapping_add(stream)));
    // (0, 1): offset by half an ulp so ln() is safe
    ((z >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal pair from the Box-Muller transform, keyed by (seed, index).
fn normal_pair(seed: u64, index: u64) -> (f64, f64) {
    let u1 = keyed_uniform(seed, index, 0);
    let u2 = keyed_uniform(seed, index, 1);
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

pub const SYNTHETIC_CLASS_MEANS: [[f64; 2]; 3] = [[-2.0, -2.0], [0.0, 1.464], [2.0, -2.0]];
pub const SYNTHETIC_OOD_MEANS: [[f64; 2]; 2] = [[-8.0, -8.0], [8.0, -8.0]];

/// Synthetic three-class mixture: `n_per_class` unit-covariance draws per
/// class plus `n_per_ood` unlabeled OOD draws per OOD center.
pub fn gen_synthetic(seed: u64, n_per_class: usize, n_per_ood: usize) -> Result<Dataset> {
    if n_per_class == 0 || n_per_ood == 0 {
        return Err(Error::Domain("sample counts must be positive".into()));
    }
    let mut samples = Vec::with_capacity(3 * n_per_class + 2 * n_per_ood);
    let mut index = 0u64;
    for (class, mean) in SYNTHETIC_CLASS_MEANS.iter().enumerate() {
        for _ in 0..n_per_class {
            let (dx, dy) = normal_pair(seed, index);
            index += 1;
            samples.push(Sample {
                features: vec![mean[0] + dx, mean[1] + dy],
                label: Some(class),
                partition: Partition::In,
            });
        }
    }
    for mean in &SYNTHETIC_OOD_MEANS {
        for _ in 0..n_per_ood {
            let (dx, dy) = normal_pair(seed, index);
            index += 1;
            samples.push(Sample {
                features: vec![mean[0] + dx, mean[1] + dy],
                label: None,
                partition: Partition::Ood,
            });
        }
    }
    Ok(Dataset {
        samples,
        num_classes: 3,
        feature_dim: 2,
        seed,
        class_names: Vec::new(),
    })
}

/// Cosine similarity `a.b / (|a| |b|)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Domain("vector length mismatch".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Domain("cosine similarity undefined for a zero vector".into()));
    }
    Ok(dot / (na * nb))
}

fn euclidean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Ranking key where smaller is better, so ties fall to the lower index.
fn neighbor_key(metric: Metric, query: &[f64], other: &[f64]) -> Result<f64> {
    match metric {
        Metric::Cosine => Ok(-cosine_similarity(query, other)?),
        Metric::Euclidean => Ok(euclidean_sq(query, other)),
    }
}

/// Indices of the `k` labeled samples most similar to `query_index`, the
/// query itself excluded, ties broken by lower index.
pub fn knn_indices(
    dataset: &Dataset,
    query_index: usize,
    k: usize,
    metric: Metric,
) -> Result<Vec<usize>> {
    if query_index >= dataset.len() {
        return Err(Error::Domain(format!("query index {query_index} out of range")));
    }
    let query = &dataset.samples[query_index].features;
    let mut ranked: Vec<(f64, usize)> = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        if i == query_index || s.label.is_none() {
            continue;
        }
        ranked.push((neighbor_key(metric, query, &s.features)?, i));
    }
    if k >= ranked.len() + 1 {
        return Err(Error::Domain(format!(
            "k = {k} but only {} labeled candidates",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(ranked.into_iter().take(k).map(|(_, i)| i).collect())
}

/// Dirichlet estimate from the k nearest neighbors' labels:
/// counts as evidence under the uniform `W = K` prior, so `alpha_hat = counts + 1`.
pub fn estimate_knn_alpha(
    dataset: &Dataset,
    query_index: usize,
    k: usize,
    metric: Metric,
) -> Result<DirichletParams> {
    let neighbors = knn_indices(dataset, query_index, k, metric)?;
    let mut counts = vec![0.0; dataset.num_classes];
    for idx in neighbors {
        let label = dataset.samples[idx]
            .label
            .ok_or_else(|| Error::Internal("unlabeled neighbor in k-NN estimate".into()))?;
        counts[label] += 1.0;
    }
    DirichletParams::from_network_evidence(&counts)
}

/// The four-step boundary-sample selection: neighbor dissonance per labeled
/// sample, then the `n` highest, returned sorted ascending.
pub fn select_bod(dataset: &Dataset, k: usize, n: usize, metric: Metric) -> Result<Vec<usize>> {
    let labeled = dataset.labeled_indices();
    if n > labeled.len() {
        return Err(Error::Domain(format!(
            "requested {n} boundary samples but only {} labeled samples",
            labeled.len()
        )));
    }
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(labeled.len());
    for &idx in &labeled {
        let alpha_hat = estimate_knn_alpha(dataset, idx, k, metric)?;
        scored.push((alpha_hat.dissonance(), idx));
    }
    // highest dissonance first, ties broken by lower index
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = scored.into_iter().take(n).map(|(_, i)| i).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Applies OOD/BOD tags; everything else becomes IN. OOD samples lose their
/// labels.
pub fn partition(dataset: &Dataset, ood: &[usize], bod: &[usize]) -> Result<Dataset> {
    for i in ood {
        if bod.contains(i) {
            return Err(Error::Domain(format!("index {i} tagged both OOD and BOD")));
        }
    }
    let mut out = dataset.clone();
    for s in &mut out.samples {
        s.partition = Partition::In;
    }
    for &i in ood {
        let s = out
            .samples
            .get_mut(i)
            .ok_or_else(|| Error::Domain(format!("OOD index {i} out of range")))?;
        s.partition = Partition::Ood;
        s.label = None;
    }
    for &i in bod {
        let s = out
            .samples
            .get_mut(i)
            .ok_or_else(|| Error::Domain(format!("BOD index {i} out of range")))?;
        if s.label.is_none() {
            return Err(Error::Domain(format!("BOD index {i} has no label")));
        }
        s.partition = Partition::Bod;
    }
    Ok(out)
}

/// Retags the listed labeled samples as BOD, leaving other tags alone.
pub fn apply_bod(dataset: &mut Dataset, bod: &[usize]) -> Result<()> {
    for &i in bod {
        let s = dataset
            .samples
            .get_mut(i)
            .ok_or_else(|| Error::Domain(format!("BOD index {i} out of range")))?;
        if s.partition == Partition::Ood || s.label.is_none() {
            return Err(Error::Domain(format!("BOD index {i} is not a labeled sample")));
        }
        s.partition = Partition::Bod;
    }
    Ok(())
}

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

const CIFAR_RECORD: usize = 3073;

/// Loads CIFAR10 binary batches (1 label byte + 3072 pixel bytes per record)
/// filtered to the named classes, pixels scaled to [0,1], labels remapped to
/// a dense range in the order given.
pub fn load_cifar10(path: &Path, classes: &[String], max_per_class: usize) -> Result<Dataset> {
    let mut class_ids = Vec::with_capacity(classes.len());
    for name in classes {
        let id = CIFAR10_CLASSES
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("unknown CIFAR10 class name {name:?}")))?;
        class_ids.push(id as u8);
    }
    let mut files: Vec<std::path::PathBuf> = if path.is_dir() {
        let mut v: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Format(format!("no .bin batch files under {}", path.display())));
    }
    files.sort();

    let mut samples = Vec::new();
    let mut per_class = vec![0usize; classes.len()];
    for file in &files {
        let bytes = fs::read(file)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: size {} is not a multiple of {CIFAR_RECORD} (trailing {} bytes at offset {})",
                file.display(),
                bytes.len(),
                bytes.len() % CIFAR_RECORD,
                bytes.len() - bytes.len() % CIFAR_RECORD,
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let raw_label = record[0];
            let Some(dense) = class_ids.iter().position(|&c| c == raw_label) else {
                continue;
            };
            if per_class[dense] >= max_per_class {
                continue;
            }
            per_class[dense] += 1;
            let features = record[1..].iter().map(|&b| b as f64 / 255.0).collect();
            samples.push(Sample {
                features,
                label: Some(dense),
                partition: Partition::In,
            });
        }
    }
    Ok(Dataset {
        samples,
        num_classes: classes.len(),
        feature_dim: CIFAR_RECORD - 1,
        seed: 0,
        class_names: classes.to_vec(),
    })
}

/// Writes the dataset CSV: `id,partition,label,f0,f1,...`, label empty for
/// OOD, floats at full round-trip precision.
pub fn write_dataset_csv(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    write!(w, "id,partition,label")?;
    for j in 0..dataset.feature_dim {
        write!(w, ",f{j}")?;
    }
    writeln!(w)?;
    for (i, s) in dataset.samples.iter().enumerate() {
        write!(w, "{i},{}", s.partition)?;
        match s.label {
            Some(l) => write!(w, ",{l}")?,
            None => write!(w, ",")?,
        }
        for f in &s.features {
            write!(w, ",{f}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV written by `write_dataset_csv`. Lines starting with
/// `#` are skipped.
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "id" || cols[1] != "partition" || cols[2] != "label" {
        return Err(Error::Format(format!(
            "{}: expected header id,partition,label,f0,...",
            path.display()
        )));
    }
    let feature_dim = cols.len() - 3;
    let mut samples = Vec::new();
    let mut max_label = None::<usize>;
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Format(format!(
                "{}:{}: expected {} fields, found {}",
                path.display(),
                lineno + 2,
                cols.len(),
                fields.len()
            )));
        }
        let partition: Partition = fields[1].parse()?;
        let label = if fields[2].is_empty() {
            None
        } else {
            let l: usize = fields[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad label {:?}", fields[2])))?;
            max_label = Some(max_label.map_or(l, |m: usize| m.max(l)));
            Some(l)
        };
        if partition == Partition::Ood && label.is_some() {
            return Err(Error::Format(format!(
                "{}:{}: OOD sample carries a label",
                path.display(),
                lineno + 2
            )));
        }
        let features = fields[3..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad feature value {f:?}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample { features, label, partition });
    }
    let num_classes = max_label
        .map(|m| m + 1)
        .ok_or_else(|| Error::Format(format!("{}: no labeled samples", path.display())))?;
    if num_classes < 2 {
        return Err(Error::Format(format!(
            "{}: need at least 2 classes, found {num_classes}",
            path.display()
        )));
    }
    Ok(Dataset {
        samples,
        num_classes,
        feature_dim,
        seed: 0,
        class_names: Vec::new(),
    })
}

/// One integer id per line, sorted ascending.
pub fn write_bod_indices(indices: &[usize], path: &Path) -> Result<()> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    let mut out = String::new();
    for i in sorted {
        out.push_str(&i.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_bod_indices(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| Error::Format(format!("{}: bad index {l:?}", path.display())))
        })
        .collect()
}
