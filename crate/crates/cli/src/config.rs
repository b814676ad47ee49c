//! The TOML experiment file that drives every subcommand.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use tokenmixer_core::ablation::Variant;
use tokenmixer_core::data::SyntheticSpec;
use tokenmixer_core::init::InitScales;
use tokenmixer_core::model::ModelConfig;
use tokenmixer_core::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Worker threads for independent runs; 0 uses the available cores.
    pub threads: usize,
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub ablation: AblationSection,
    pub parallel: ParallelSection,
    pub quantize: QuantizeSection,
    pub gradcheck: GradcheckSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "tokenmixer-large".into(),
            threads: 1,
            model: ModelConfig::default(),
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            ablation: AblationSection::default(),
            parallel: ParallelSection::default(),
            quantize: QuantizeSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    /// Shipped tables to run; empty runs all of them unless `variants` is set.
    pub tables: Vec<String>,
    /// A custom matrix compared against the bare experiment model.
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            tables: Vec::new(),
            variants: Vec::new(),
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParallelSection {
    pub devices: Vec<usize>,
    pub layers: Vec<usize>,
    /// Examples per simulated batch; must be divisible by every device count.
    pub rows: usize,
    pub tolerance: f64,
}

impl Default for ParallelSection {
    fn default() -> Self {
        ParallelSection {
            devices: vec![1, 2, 4],
            layers: vec![1, 2, 3],
            rows: 8,
            tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizeSection {
    /// Largest tolerated `AUC(full) - AUC(fp8)`.
    pub max_auc_drop: f64,
    /// Rows of the held-out set; 0 uses the checkpoint's eval set.
    pub rows: usize,
}

impl Default for QuantizeSection {
    fn default() -> Self {
        QuantizeSection {
            max_auc_drop: 0.002,
            rows: 0,
        }
    }
}

/// A small model and batch on which every parameter is checked by finite
/// differences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub rows: usize,
    pub step: f64,
    pub model_tolerance: f64,
    pub primitive_tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        GradcheckSection {
            model: ModelConfig {
                dim: 4,
                heads: 2,
                layers: 3,
                init: InitScales::BASE,
                ..ModelConfig::default()
            },
            data: SyntheticSpec {
                groups: 3,
                cardinality: 4,
                emb_dim: 3,
                pairs: 2,
                train_examples: 64,
                eval_examples: 64,
                ..SyntheticSpec::default()
            },
            rows: 4,
            step: tokenmixer_core::gradcheck::DEFAULT_STEP,
            model_tolerance: 1e-4,
            primitive_tolerance: 1e-6,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing experiment config")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        self.gradcheck.model.validate()?;
        self.gradcheck.data.validate()?;
        anyhow::ensure!(
            self.parallel.devices.iter().all(|&n| n > 0 && self.parallel.rows.is_multiple_of(n)),
            "parallel.rows ({}) must be divisible by every device count {:?}",
            self.parallel.rows,
            self.parallel.devices
        );
        anyhow::ensure!(!self.ablation.seeds.is_empty(), "ablation.seeds must not be empty");
        Ok(())
    }

    /// Worker count with 0 resolved to the available cores.
    pub fn worker_threads(&self) -> usize {
        match self.threads {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }
}
