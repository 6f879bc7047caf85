//! Run configuration: the comparison-scheme variant plus training and
//! regularization hyperparameters. Loaded from JSON; unknown fields are an
//! error so typos in coefficient names cannot pass silently.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Metric;
use crate::error::{Error, Result};

/// The five comparison schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    L2,
    Enn,
    EnnVac,
    EnnDiss,
    EnnVacDiss,
}

impl Variant {
    pub fn needs_ood(self) -> bool {
        matches!(self, Variant::EnnVac | Variant::EnnVacDiss)
    }

    pub fn needs_bod(self) -> bool {
        matches!(self, Variant::EnnDiss | Variant::EnnVacDiss)
    }

    pub fn is_evidential(self) -> bool {
        self != Variant::L2
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::L2 => "l2",
            Variant::Enn => "enn",
            Variant::EnnVac => "enn-vac",
            Variant::EnnDiss => "enn-diss",
            Variant::EnnVacDiss => "enn-vac-diss",
        };
        write!(f, "{s}")
    }
}

/// Output nonlinearity of the evidence head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvidenceActivation {
    Relu,
    Softplus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_learning_rate")]
    pub learning_rate: f64,
    /// Keep-probability for hidden-unit dropout; absent means dropout off.
    #[serde(default)]
    pub dropout_keep: Option<f64>,
    /// L2-baseline weight decay; ignored by the evidential variants.
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_lambda")]
    pub lambda1: f64,
    #[serde(default = "d_lambda")]
    pub lambda2: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_seed")]
    pub seed: u64,
    /// Hidden layer widths; input and output sizes come from the data.
    #[serde(default = "d_architecture")]
    pub architecture: Vec<usize>,
    #[serde(default = "d_knn_k")]
    pub knn_k: usize,
    #[serde(default = "d_bod_n")]
    pub bod_n: usize,
    #[serde(default)]
    pub use_knn_kl: bool,
    #[serde(default = "d_kl_anneal_epochs")]
    pub kl_anneal_epochs: usize,
    #[serde(default = "d_knn_metric")]
    pub knn_metric: Metric,
    #[serde(default = "d_evidence_activation")]
    pub evidence_activation: EvidenceActivation,
}

fn d_batch_size() -> usize {
    1000
}
fn d_learning_rate() -> f64 {
    0.01
}
fn d_weight_decay() -> f64 {
    0.005
}
fn d_lambda() -> f64 {
    0.01
}
fn d_epochs() -> usize {
    100
}
fn d_seed() -> u64 {
    42
}
fn d_architecture() -> Vec<usize> {
    vec![64, 64]
}
fn d_knn_k() -> usize {
    10
}
fn d_bod_n() -> usize {
    500
}
fn d_kl_anneal_epochs() -> usize {
    10
}
fn d_knn_metric() -> Metric {
    Metric::Euclidean
}
fn d_evidence_activation() -> EvidenceActivation {
    EvidenceActivation::Relu
}

impl TrainConfig {
    pub fn new(variant: Variant) -> Self {
        TrainConfig {
            variant,
            batch_size: d_batch_size(),
            learning_rate: d_learning_rate(),
            dropout_keep: None,
            weight_decay: d_weight_decay(),
            lambda1: d_lambda(),
            lambda2: d_lambda(),
            epochs: d_epochs(),
            seed: d_seed(),
            architecture: d_architecture(),
            knn_k: d_knn_k(),
            bod_n: d_bod_n(),
            use_knn_kl: false,
            kl_anneal_epochs: d_kl_anneal_epochs(),
            knn_metric: d_knn_metric(),
            evidence_activation: d_evidence_activation(),
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite())
            || !(self.lambda2 >= 0.0 && self.lambda2.is_finite())
        {
            return Err(Error::Config("lambda1/lambda2 must be finite and >= 0".into()));
        }
        if let Some(keep) = self.dropout_keep {
            if !(0.0 < keep && keep <= 1.0) {
                return Err(Error::Config(format!("dropout_keep {keep} outside (0, 1]")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.architecture.is_empty() || self.architecture.contains(&0) {
            return Err(Error::Config("architecture needs positive hidden widths".into()));
        }
        if self.knn_k == 0 || self.bod_n == 0 {
            return Err(Error::Config("knn_k and bod_n must be positive".into()));
        }
        Ok(())
    }

    /// Compact single-line echo for artifact header comments.
    pub fn echo(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}
