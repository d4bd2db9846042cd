use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{validate_model, MarketModel, ModelParams};
use crate::simkit::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { steps: 2000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontierConfig {
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

/// One JSON document describing a run. Matrices are row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelParams,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub frontier: FrontierConfig,
    /// Target mean used by `simulate`; defaults to the first frontier target.
    #[serde(default)]
    pub target: Option<f64>,
    #[serde(default)]
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Validates the model and every target against its bond growth.
    pub fn validate(&self) -> Result<MarketModel> {
        let model = validate_model(&self.model)?;
        let bond_growth = model.bond_growth();
        let tol = 1e-12 * bond_growth.abs().max(1.0);
        for &x_bar in self.frontier.targets.iter().chain(&self.target) {
            if !(x_bar >= bond_growth - tol) {
                return Err(Error::TargetBelowBondGrowth { x_bar, bond_growth });
            }
        }
        Ok(model)
    }

    pub fn sim_target(&self) -> Option<f64> {
        self.target.or_else(|| self.frontier.targets.first().copied())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "model": {
            "r": 0.05, "a": [0.1], "A": [[0.0]], "d": [0.0], "D": [[-0.5]],
            "Lambda": [[0.3, 0.4]], "sigma": [[1.0, 0.0]], "x0": 1.0, "y0": [0.0], "T": 1.0
        }
    }"#;

    #[test]
    fn defaults_fill_missing_blocks() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.grid.steps, 2000);
        assert_eq!(cfg.sim, SimConfig::default());
        assert_eq!(cfg.sim_target(), None);
        let model = cfg.validate().unwrap();
        assert_eq!((model.m, model.n), (1, 1));
    }

    #[test]
    fn unknown_fields_and_low_targets_are_rejected() {
        let bad = MINIMAL.replacen("\"model\"", "\"modle\": 1, \"model\"", 1);
        assert!(matches!(RunConfig::parse(&bad), Err(Error::Config(_))));
        let mut cfg = RunConfig::parse(MINIMAL).unwrap();
        cfg.frontier.targets = vec![1.2, 1.0];
        assert!(matches!(cfg.validate(), Err(Error::TargetBelowBondGrowth { .. })));
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig::parse(MINIMAL).unwrap();
        cfg.target = Some(1.2);
        cfg.sim.checkpoints = vec![0.5];
        let back = RunConfig::parse(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
