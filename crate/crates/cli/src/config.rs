//! The optional JSON config file.

use std::fs;
use std::path::Path;

use mia_core::orchestrator::RunConfig;
use mia_core::simulate::DEFAULT_TARGET_AUC;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub n_member: usize,
    pub n_nonmember: usize,
    pub vocab: usize,
    pub seq_len: usize,
    /// Fixed boost; when absent the boost is calibrated.
    pub delta: Option<f64>,
    pub target_auc: f64,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            n_member: 500,
            n_nonmember: 500,
            vocab: 1000,
            seq_len: 64,
            delta: None,
            target_auc: DEFAULT_TARGET_AUC,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoldoutSection {
    pub fraction: f64,
    pub top: usize,
}

impl Default for HoldoutSection {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            top: 5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub run: RunConfig,
    pub simulation: SimulationSection,
    pub holdout: HoldoutSection,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_are_optional() {
        let c: CliConfig = serde_json::from_str(r#"{"run": {"rounds": 3}}"#).unwrap();
        assert_eq!(c.run.rounds, 3);
        assert_eq!(c.run.candidates, 5);
        assert_eq!(c.holdout, HoldoutSection::default());
        assert!(serde_json::from_str::<CliConfig>(r#"{"runs": {}}"#).is_err());
    }
}
