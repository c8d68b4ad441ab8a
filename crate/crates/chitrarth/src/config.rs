//! Run configuration: a TOML file deep-merged over built-in defaults, with
//! `--set key=value` overrides on top. Every command echoes its resolved
//! config into the output directory so a run is reproducible from the echo
//! alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ablation::AblationPreset;
use crate::model::ModelConfig;
use crate::trainer::StageConfig;

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_default()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    /// Number of synthetic cipher languages (l1..lN).
    pub languages: usize,
    pub stage1_total: usize,
    pub stage2_total: usize,
    pub english_fraction: f64,
    /// Eval records per (task, language).
    pub eval_per_language: usize,
    /// Write PPM files and reference them by path instead of inline specs.
    pub ppm_images: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            languages: 10,
            stage1_total: 240,
            stage2_total: 240,
            english_fraction: 0.5,
            eval_per_language: 6,
            ppm_images: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_new: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_new: 48 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub ablation: AblationPreset,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            model: ModelConfig::desk_default(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            ablation: AblationPreset::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.stage1.stage != 1 || self.stage2.stage != 2 {
            return Err(Error::Config("stage tables must keep stage = 1 and stage = 2".into()));
        }
        if self.data.languages > 10 {
            return Err(Error::Config(format!(
                "at most 10 cipher languages are registered, got {}",
                self.data.languages
            )));
        }
        if !(self.data.english_fraction > 0.0 && self.data.english_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "english_fraction must be in (0, 1], got {}",
                self.data.english_fraction
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }
}

fn deep_merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(base_table), toml::Value::Table(overlay_table)) => {
            for (key, value) in overlay_table {
                match base_table.get_mut(&key) {
                    Some(slot) => deep_merge(slot, value),
                    None => {
                        base_table.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Loads the config file (if any) over the defaults, then applies
/// `--set key=value` overrides (dotted keys).
pub fn resolve_config(file: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
    let defaults = RunConfig::default();
    let mut merged: toml::Value = toml::Value::try_from(&defaults)
        .map_err(|e| Error::Config(format!("default config serialize: {e}")))?;

    if let Some(path) = file {
        let body = std::fs::read_to_string(path)?;
        let overlay: toml::Table = body
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        deep_merge(&mut merged, toml::Value::Table(overlay));
    }

    for set in sets {
        let Some((key, value)) = set.split_once('=') else {
            return Err(Error::Config(format!("--set expects key=value, got {set:?}")));
        };
        let parsed: toml::Table = format!("{key} = {value}")
            .parse()
            .or_else(|_| format!("{key} = {value:?}").parse())
            .map_err(|e| Error::Config(format!("--set {set:?}: {e}")))?;
        deep_merge(&mut merged, toml::Value::Table(parsed));
    }

    let config: RunConfig = merged
        .try_into()
        .map_err(|e| Error::Config(format!("config: {e}")))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        cfg.validate().unwrap();
    }

    #[test]
    fn paper_stage_defaults_are_preserved() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.stage1.batch_size, 256);
        assert_eq!(cfg.stage2.batch_size, 128);
        assert_eq!(cfg.stage1.peak_lr, 2e-3);
        assert_eq!(cfg.stage2.peak_lr, 2e-5);
        assert_eq!(cfg.stage1.epochs, 1);
        assert_eq!(cfg.stage2.epochs, 1);
        assert_eq!(cfg.model.lm.context_length, 512);
    }

    #[test]
    fn partial_file_merges_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 7\n[stage1]\nepochs = 3\n").unwrap();
        let cfg = resolve_config(Some(&path), &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.stage1.epochs, 3);
        assert_eq!(cfg.stage1.batch_size, 256);
    }

    #[test]
    fn set_overrides_apply_dotted_keys() {
        let cfg = resolve_config(
            None,
            &[
                "stage1.peak_lr=0.001".to_string(),
                "model.encoder.variant_name=siglip-like".to_string(),
                "seed=9".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.stage1.peak_lr, 1e-3);
        assert_eq!(cfg.model.encoder.variant_name, "siglip-like");
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn bad_overrides_are_config_errors() {
        assert!(matches!(
            resolve_config(None, &["no_equals".to_string()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            resolve_config(None, &["data.english_fraction=0.0".to_string()]),
            Err(Error::Config(_))
        ));
    }
}
