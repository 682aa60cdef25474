use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::QualityConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_IOU_THRESHOLDS;
use crate::events::DecodeConfig;
use crate::net::NetConfig;
use crate::synth::{GeneratorConfig, OracleConfig, ASSOC_WINDOW_S};
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Threshold of the headline event F1.
    pub report_iou: f64,
    pub assoc_window_s: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            report_iou: 0.2,
            assoc_window_s: ASSOC_WINDOW_S,
        }
    }
}

/// Every tunable of a run. The top-level `seed` replaces the generator and
/// training seeds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub preprocessing: QualityConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub oracle: OracleConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.generator.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.decode.validate()?;
        if self.eval.iou_thresholds.is_empty()
            || self.eval.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0))
        {
            return Err(Error::Config(format!(
                "eval.iou_thresholds must be nonempty values in (0, 1], got {:?}",
                self.eval.iou_thresholds
            )));
        }
        if !(self.eval.report_iou > 0.0 && self.eval.report_iou <= 1.0) {
            return Err(Error::Config(format!("eval.report_iou must lie in (0, 1], got {}", self.eval.report_iou)));
        }
        Ok(())
    }
}
