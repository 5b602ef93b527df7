use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stnet_core::harness::SeConfig;
use stnet_core::{CompressionRatio, ModelConfig, SynthConfig, TrainConfig};

use crate::CliError;

/// Everything a run can be configured with. Each section falls back to its
/// defaults field by field, so a config file only needs the overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub se: SeConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// `--seed` reaches every seeded stage.
    pub fn reseed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
        self.se.seed = seed;
    }
}

/// Resolve the codeword length from `--gamma` and/or `--codeword` for an
/// `n_c × n_t` grid. Giving both is fine as long as they agree.
pub fn resolve_codeword(
    gamma: Option<&str>,
    codeword: Option<usize>,
    n_c: usize,
    n_t: usize,
) -> Result<Option<usize>, CliError> {
    let from_gamma = match gamma {
        Some(s) => {
            let r: CompressionRatio = s.parse().map_err(|e: stnet_core::Error| CliError::Usage(e.to_string()))?;
            Some(
                CompressionRatio::codeword_for(r.num, r.den, n_c, n_t)
                    .map_err(|e| CliError::Usage(e.to_string()))?,
            )
        }
        None => None,
    };
    match (from_gamma, codeword) {
        (Some(a), Some(b)) if a != b => Err(CliError::Usage(format!(
            "--gamma {} gives M = {a} on a {n_c}×{n_t} grid but --codeword is {b}",
            gamma.unwrap_or_default()
        ))),
        (Some(a), _) => Ok(Some(a)),
        (None, b) => Ok(b),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"lr": 0.005}, "model": {"n_c": 16, "n_t": 16}}"#).unwrap();
        assert_eq!(c.train.lr, 0.005);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.model.n_c, 16);
        assert_eq!(c.model.window, ModelConfig::default().window);
    }

    #[test]
    fn unknown_section_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"optimizer": {}}"#).is_err());
    }

    #[test]
    fn gamma_and_codeword() {
        assert_eq!(resolve_codeword(Some("1/4"), None, 32, 32).unwrap(), Some(512));
        assert_eq!(resolve_codeword(Some("1/64"), Some(32), 32, 32).unwrap(), Some(32));
        assert_eq!(resolve_codeword(None, Some(100), 32, 32).unwrap(), Some(100));
        assert_eq!(resolve_codeword(None, None, 32, 32).unwrap(), None);
        assert!(matches!(resolve_codeword(Some("1/4"), Some(128), 32, 32), Err(CliError::Usage(_))));
        assert!(matches!(resolve_codeword(Some("quarter"), None, 32, 32), Err(CliError::Usage(_))));
        assert!(matches!(resolve_codeword(Some("1/3"), None, 32, 32), Err(CliError::Usage(_))));
    }
}
