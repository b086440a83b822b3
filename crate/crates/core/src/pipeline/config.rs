use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, FgcmError, Result};
use crate::frontend::FeatureConfig;
use crate::genuinizer::GenuinizerArch;
use crate::lcnn::{LcnnArch, Mode};
use crate::metrics::TdcfParams;
use crate::nn::TrainRunConfig;

/// A named preset or a fully spelled-out architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchChoice<A> {
    Preset { preset: String },
    Explicit(A),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormConfig {
    /// Lower bound on every per-bin standard deviation.
    pub eps: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { eps: 1e-3 }
    }
}

/// Everything a run depends on. Serialized canonically for the config hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub seed: u64,
    pub features: FeatureConfig,
    pub normalization: NormConfig,
    pub genuinizer: ArchChoice<GenuinizerArch>,
    pub lcnn: ArchChoice<LcnnArch>,
    pub genuinizer_training: TrainRunConfig,
    pub lcnn_training: TrainRunConfig,
    /// Keep the LCNN epoch with the lowest dev loss (dev rows required).
    pub select_on_dev: bool,
    pub tdcf: TdcfParams,
    /// Optional ASV score file; when set the ASV operating point in `tdcf`
    /// is replaced by the one measured at its EER threshold.
    pub asv_scores: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            mode: Mode::Fg,
            seed: 0,
            features: FeatureConfig::default(),
            normalization: NormConfig::default(),
            genuinizer: ArchChoice::Preset {
                preset: "standard".into(),
            },
            lcnn: ArchChoice::Preset { preset: "desk".into() },
            genuinizer_training: TrainRunConfig {
                epochs: 20,
                batch_size: 4,
                adam: fgcm_engine::AdamConfig {
                    lr: 1e-3,
                    ..Default::default()
                },
                ..TrainRunConfig::default()
            },
            lcnn_training: TrainRunConfig {
                epochs: 30,
                batch_size: 8,
                ..TrainRunConfig::default()
            },
            select_on_dev: true,
            tdcf: TdcfParams::default(),
            asv_scores: None,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| FgcmError::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        crate::frontend::Cqt::new(&self.features.cqt)?;
        if !(self.normalization.eps > 0.0) {
            return Err(FgcmError::Config("normalization.eps must be positive".into()));
        }
        self.genuinizer_training.validate()?;
        self.lcnn_training.validate()?;
        self.tdcf.validate()?;
        self.lcnn_arch()?.check()?;
        if self.mode != Mode::Baseline {
            self.genuinizer_arch()?.check()?;
        }
        Ok(())
    }

    fn geometry(&self) -> (usize, usize) {
        (self.features.rows(), self.features.frames)
    }

    pub fn genuinizer_arch(&self) -> Result<GenuinizerArch> {
        let (rows, cols) = self.geometry();
        let arch = match &self.genuinizer {
            ArchChoice::Preset { preset } if preset == "standard" => GenuinizerArch::standard(rows, cols),
            ArchChoice::Preset { preset } => {
                return Err(FgcmError::Config(format!("unknown genuinizer preset {preset:?} (standard)")))
            }
            ArchChoice::Explicit(a) => a.clone(),
        };
        if arch.input != [rows, cols] {
            return Err(FgcmError::Config(format!(
                "genuinizer input {:?} does not match feature geometry [{rows}, {cols}]",
                arch.input
            )));
        }
        Ok(arch)
    }

    pub fn lcnn_arch(&self) -> Result<LcnnArch> {
        let (rows, cols) = self.geometry();
        let arch = match &self.lcnn {
            ArchChoice::Preset { preset } => LcnnArch::preset(preset, rows, cols)?,
            ArchChoice::Explicit(a) => a.clone(),
        };
        if arch.input != [rows, cols] {
            return Err(FgcmError::Config(format!(
                "LCNN input {:?} does not match feature geometry [{rows}, {cols}]",
                arch.input
            )));
        }
        Ok(arch)
    }

    /// Canonical JSON: object keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }

    /// Hex SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
