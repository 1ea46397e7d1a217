//! Declarative run configuration: a single TOML file, with environment
//! variables (LNMET_*) and CLI flags layered on top. The fully resolved
//! config is written next to every output for reproducibility.

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::instance::IdentifierConfig;
use crate::learn::{TrainConfig, TverskyForm};
use crate::phantom::PhantomConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Instance detection threshold on IoU.
    pub iou_thresh: f64,
    pub bootstrap_iters: usize,
    /// Pool voxels/instances across cases instead of averaging per case.
    pub pooled: bool,
    /// Operating point on probability scores.
    pub threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { iou_thresh: 0.30, bootstrap_iters: 1000, pooled: false, threshold: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub k: usize,
    pub stratified: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { k: 5, stratified: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferSettings {
    pub patch_shape: (usize, usize, usize),
}

impl Default for InferSettings {
    fn default() -> Self {
        InferSettings { patch_shape: (24, 24, 24) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 keeps the library default.
    pub threads: usize,
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub identifier: IdentifierConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
    pub split: SplitConfig,
    pub infer: InferSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            phantom: PhantomConfig::default(),
            train: TrainConfig::default(),
            identifier: IdentifierConfig::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
            split: SplitConfig::default(),
            infer: InferSettings::default(),
        }
    }
}

/// CLI-level overrides applied on top of the file and environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub attention: Option<bool>,
    pub loss_form: Option<TverskyForm>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))
    }

    /// Propagate the top-level seed into every component seed.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.phantom.seed = seed;
        self.train.seed = seed;
        self.identifier.seed = seed;
        self.fusion.seed = seed;
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("LNMET_SEED") {
            let seed = v.parse().map_err(|_| Error::Config(format!("LNMET_SEED: bad value '{v}'")))?;
            self.reseed(seed);
        }
        if let Ok(v) = std::env::var("LNMET_THREADS") {
            self.threads =
                v.parse().map_err(|_| Error::Config(format!("LNMET_THREADS: bad value '{v}'")))?;
        }
        if let Ok(v) = std::env::var("LNMET_ATTENTION") {
            self.train.use_attention = parse_on_off(&v)?;
        }
        if let Ok(v) = std::env::var("LNMET_LOSS_FORM") {
            self.train.form = parse_loss_form(&v)?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.reseed(seed);
        }
        if let Some(t) = ov.threads {
            self.threads = t;
        }
        if let Some(a) = ov.attention {
            self.train.use_attention = a;
        }
        if let Some(f) = ov.loss_form {
            self.train.form = f;
        }
    }

    /// Write the fully resolved configuration into a run directory.
    pub fn save_resolved(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::create_dir_all(&dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        std::fs::write(dir.as_ref().join("resolved.toml"), text)?;
        Ok(())
    }
}

pub fn parse_on_off(v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Config(format!("expected on/off, got '{other}'"))),
    }
}

pub fn parse_loss_form(v: &str) -> Result<TverskyForm> {
    match v.to_ascii_lowercase().as_str() {
        "paper" => Ok(TverskyForm::Paper),
        "standard" => Ok(TverskyForm::Standard),
        other => Err(Error::Config(format!("expected paper/standard, got '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "seed = 9\n[phantom]\ncohort_size = 3\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.phantom.cohort_size, 3);
        assert_eq!(cfg.eval.iou_thresh, 0.30);
    }

    #[test]
    fn overrides_propagate_seed() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&Overrides { seed: Some(42), ..Default::default() });
        assert_eq!(cfg.phantom.seed, 42);
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.fusion.seed, 42);
    }

    #[test]
    fn resolved_file_is_written() {
        let cfg = RunConfig::default();
        let dir = tempfile::tempdir().unwrap();
        cfg.save_resolved(dir.path()).unwrap();
        let back = RunConfig::load(dir.path().join("resolved.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(parse_on_off("maybe").is_err());
        assert!(parse_loss_form("dice").is_err());
    }
}
