//! Run configuration shared by all subcommands.

use std::path::Path;

use anyhow::{Context, Result};
use blurry_edges::aggregate::BlockConfig;
use blurry_edges::fit::FitConfig;
use blurry_edges::optics::OpticsConfig;
use blurry_edges::synth::DatasetSpec;
use serde::{Deserialize, Serialize};

/// Scene distribution of `synth`; optics and seed come from the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub shapes: [usize; 2],
    pub alpha_range: [f64; 2],
    pub sigma_read: f64,
    pub min_contrast: f64,
    pub size_range: [f64; 2],
}

impl Default for DatasetParams {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            count: d.count,
            width: d.width,
            height: d.height,
            shapes: d.shapes,
            alpha_range: d.alpha_range,
            sigma_read: d.sigma_read,
            min_contrast: d.min_contrast,
            size_range: d.size_range,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMask {
    /// Finite prediction and ground truth.
    Valid,
    /// Also confidence at or above the threshold.
    Confident,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub mask: EvalMask,
    pub confidence_threshold: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            mask: EvalMask::Confident,
            confidence_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub optics: OpticsConfig,
    pub dataset: DatasetParams,
    pub fit: FitConfig,
    pub blocks: BlockConfig,
    pub eval: EvalParams,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("invalid config {}", p.display()))
            }
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec {
            count: d.count,
            seed: self.seed,
            width: d.width,
            height: d.height,
            shapes: d.shapes,
            alpha_range: d.alpha_range,
            sigma_read: d.sigma_read,
            min_contrast: d.min_contrast,
            size_range: d.size_range,
            optics: self.optics.clone(),
        }
    }

    /// Writes the effective configuration as `config.json` and logs it.
    pub fn echo(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        log::info!("effective config:\n{text}");
        std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
        let path = out.join("config.json");
        std::fs::write(&path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
    }
}
