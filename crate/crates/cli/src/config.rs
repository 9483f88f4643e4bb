use std::path::Path;

use serde::{Deserialize, Serialize};
use slca_core::data::PhantomSpec;
use slca_core::train::TrainConfig;
use slca_core::NetworkConfig;

use crate::failure::{io_failure, CmdResult, Failure};

/// Case split used by `train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratios: [0.6, 0.2, 0.2],
            seed: 0,
        }
    }
}

/// The JSON document every command accepts through `--config`. Each section
/// is optional and falls back to its defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub phantom: PhantomSpec,
    pub split: SplitConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CmdResult<Self> {
        let cfg = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
                serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> CmdResult {
        self.network.validate()?;
        self.train.validate()?;
        self.phantom.validate()?;
        let r = self.split.ratios;
        if r.iter().any(|v| !(0.0..=1.0).contains(v)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Failure::Config(format!("split ratios {r:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}
