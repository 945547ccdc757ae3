//! Run configuration: one TOML file with top-level audit settings and the
//! `[dataset]`, `[train]` and `[probe]` sections.

use std::path::{Path, PathBuf};

use biasprobe::data::DatasetSpec;
use biasprobe::model::TrainConfig;
use biasprobe::pipeline::AuditConfig;
use biasprobe::probe::ProbeConfig;
use biasprobe::stats::DirectionEstimator;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; the dataset, training and audit seeds all follow it.
    pub seed: u64,
    // Where and how a run executes does not change its results, so these
    // stay out of echoed configs.
    #[serde(skip_serializing)]
    pub n_seeds: usize,
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
    #[serde(skip_serializing)]
    pub parallel_seeds: bool,
    pub r: usize,
    pub s: usize,
    pub stride: Option<usize>,
    pub patch_cap: usize,
    pub top_patches: usize,
    /// Patches per concept written to the gallery.
    pub gallery_size: usize,
    pub merge_threshold: f64,
    pub ablation_runs: usize,
    pub alpha: f64,
    pub direction: DirectionEstimator,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let audit = AuditConfig::default();
        Self {
            seed: 0,
            n_seeds: 10,
            output_dir: PathBuf::from("run"),
            threads: None,
            parallel_seeds: false,
            r: audit.r,
            s: audit.s,
            stride: audit.stride,
            patch_cap: audit.patch_cap,
            top_patches: audit.top_patches,
            gallery_size: 10,
            merge_threshold: audit.merge_threshold,
            ablation_runs: audit.ablation_runs,
            alpha: audit.alpha,
            direction: audit.direction,
            dataset: DatasetSpec::default(),
            train: TrainConfig::default(),
            probe: audit.probe,
        }
    }
}

/// The settings that determine artifact contents; hashed into every output.
#[derive(Serialize)]
struct Hashed<'a> {
    seed: u64,
    dataset: &'a DatasetSpec,
    train: &'a TrainConfig,
    audit: AuditConfig,
    gallery_size: usize,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        for section in ["dataset", "train"] {
            if raw.get(section).and_then(|v| v.get("seed")).is_some() {
                return Err(CliError::Config(format!(
                    "[{section}] seed is derived from the top-level seed; set that instead"
                )));
            }
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg.with_seed(cfg.seed))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// This config with `seed` pushed into the dataset and training sections.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
        cfg
    }

    pub fn audit(&self) -> AuditConfig {
        AuditConfig {
            r: self.r,
            s: self.s,
            stride: self.stride,
            patch_cap: self.patch_cap,
            top_patches: self.top_patches,
            merge_threshold: self.merge_threshold,
            ablation_runs: self.ablation_runs,
            alpha: self.alpha,
            direction: self.direction,
            probe: self.probe,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.dataset.validate()?;
        self.train.validate()?;
        self.audit().validate()?;
        if self.n_seeds == 0 {
            return Err(CliError::Config("n_seeds must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        if self.s > self.dataset.height.min(self.dataset.width) {
            return Err(CliError::Config(format!(
                "patch size {} exceeds the {}x{} images",
                self.s, self.dataset.height, self.dataset.width
            )));
        }
        Ok(())
    }

    /// SHA-256 over everything that shapes the artifacts. Output location,
    /// thread count and seed count do not enter.
    pub fn hash(&self) -> String {
        let view = Hashed {
            seed: self.seed,
            dataset: &self.dataset,
            train: &self.train,
            audit: self.audit(),
            gallery_size: self.gallery_size,
        };
        let json = serde_json::to_string(&view).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!((cfg.r, cfg.s, cfg.n_seeds), (8, 6, 10));

        let cfg = RunConfig::from_toml("seed = 4\nr = 5\n[dataset]\nrho = 0.9\n[probe]\ntau = 0.6\n").unwrap();
        assert_eq!((cfg.seed, cfg.dataset.seed, cfg.train.seed), (4, 4, 4));
        assert_eq!(cfg.r, 5);
        assert_eq!(cfg.dataset.rho, 0.9);
        assert_eq!(cfg.probe.tau, 0.6);
    }

    #[test]
    fn bad_configs_are_config_errors() {
        for text in ["r = \"x\"", "bogus = 1", "[dataset]\nseed = 3", "[train]\nlearning_rate = 1", "[probe]\nd = ["] {
            let err = RunConfig::from_toml(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
        let mut cfg = RunConfig::default();
        cfg.s = 40;
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn hash_tracks_content_not_location() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.threads = Some(3);
        b.n_seeds = 2;
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), a.with_seed(1).hash());
        b.probe.tau = 0.6;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
