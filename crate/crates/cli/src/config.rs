//! On-disk experiment configuration schemas. Unknown keys are rejected so a
//! typo fails fast instead of silently running the default.

use serde::{Deserialize, Serialize};

use srvae::datasets::{BarConfig, GpfaSynthConfig, PinwheelConfig};
use srvae::gmm::GmmSrvaeConfig;
use srvae::gpfa::GpfaConfig;
use srvae::io::TrainConfig;
use srvae::tree_vae::TreeSrvaeConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Pinwheel {
        #[serde(flatten)]
        config: PinwheelConfig,
        seed: u64,
    },
    Bar {
        #[serde(flatten)]
        config: BarConfig,
    },
    Gpfa {
        #[serde(flatten)]
        config: GpfaSynthConfig,
        seed: u64,
    },
}

/// Data source for training and evaluation: a directory written by
/// `gen-data`, or an inline generator spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Path(String),
    Generate(DatasetSpec),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    pub dataset: DatasetSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    SrNlgpfa {
        #[serde(flatten)]
        config: GpfaConfig,
    },
    SgpVae {
        #[serde(flatten)]
        config: GpfaConfig,
    },
    GpfaVanillaVae {
        #[serde(flatten)]
        config: GpfaConfig,
    },
    TreeSrvae {
        #[serde(flatten)]
        config: TreeSrvaeConfig,
    },
    GmmSrvae {
        #[serde(flatten)]
        config: GmmSrvaeConfig,
    },
    PinwheelVae {
        #[serde(flatten)]
        config: GmmSrvaeConfig,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCommandConfig {
    pub model: ModelSpec,
    pub data: DataSource,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalCommandConfig {
    pub checkpoint: String,
    pub data: DataSource,
    /// Window length for sequence reconstruction.
    #[serde(default = "default_window")]
    pub window: usize,
    /// Inducing points per window during evaluation.
    #[serde(default = "default_eval_inducing")]
    pub inducing: usize,
    /// Leading fraction of the sequence to skip (training region).
    #[serde(default)]
    pub holdout_from: f64,
}

fn default_window() -> usize {
    128
}

fn default_eval_inducing() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReinferCommandConfig {
    pub checkpoint: String,
    pub data: DataSource,
    pub inducing: usize,
    #[serde(default)]
    pub optimize_z: bool,
    #[serde(default = "default_mc")]
    pub mc_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_mc() -> usize {
    32
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCommandConfig {
    pub latents: Vec<usize>,
    pub inducing: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}
