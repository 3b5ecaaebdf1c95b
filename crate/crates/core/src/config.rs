//! Run configuration covering every stage, read from TOML.
//!
//! Every section and key is optional and defaults as below; unknown keys are
//! rejected.
//!
//! ```toml
//! [scene]          # synthetic scene spec, see `SceneSpec`
//! num_views = 7
//! [model.features]
//! groups = 4
//! [model.regularizer]
//! block_size = 8
//! nonlocal = true
//! [train]
//! epochs = 10
//! lr = 0.001
//! [infer]
//! planes = 192
//! [fusion]
//! mode = "dynamic"
//! [eval]
//! cap = 0.5        # default: 20 plane spacings at the median depth
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MvsError, Result};
use crate::fusion::FusionConfig;
use crate::inference::ModelConfig;
use crate::scene::SceneSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Depth planes sampled uniformly in inverse depth.
    pub planes: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { planes: 192 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub cap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: SceneSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MvsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| MvsError::io(&path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            MvsError::Config(m) => MvsError::Config(format!("{}: {m}", path.as_ref().display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.fusion.validate()?;
        if self.infer.planes < 2 {
            return Err(MvsError::Config(format!("need at least 2 planes, got {}", self.infer.planes)));
        }
        if let Some(cap) = self.eval.cap {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(MvsError::Config(format!("distance cap must be positive, got {cap}")));
            }
        }
        Ok(())
    }
}
