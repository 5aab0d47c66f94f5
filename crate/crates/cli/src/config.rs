//! One declarative run configuration.
//!
//! Precedence, lowest first: built-in defaults, the `--config` JSON file
//! (any subset of keys), then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use canopy_fewshot::classify::Method;
use canopy_fewshot::dataset::{TARGET_GSD_CM, TILE_SIZE};
use canopy_fewshot::experiment::SyntheticRunConfig;
use canopy_fewshot::fewshot::{DEFAULT_FOLDS, DEFAULT_MAX_SHOTS, DEFAULT_POOL_CAP};
use canopy_fewshot::nn::{TowerKind, TowerSpec};
use canopy_fewshot::pairs::PAIRS_PER_SIDE;
use canopy_fewshot::seed::derive_seed;
use canopy_fewshot::siamese::TrainingConfig;
use canopy_fewshot::augment::VARIANTS_PER_TILE;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Raw tile manifest consumed by `prepare`.
    pub raw_manifest: PathBuf,
    /// Root of every stage output directory.
    pub out: PathBuf,
    /// Optional safetensors file with `backbone.*` weights.
    pub pretrained_backbone: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { raw_manifest: "data/manifest.json".into(), out: "runs".into(), pretrained_backbone: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Normalization {
    pub target_gsd_cm: f64,
    pub tile_size: u32,
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { target_gsd_cm: TARGET_GSD_CM, tile_size: TILE_SIZE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Pairing {
    pub cap: usize,
    pub variants: usize,
    pub n_per_side: usize,
}

impl Default for Pairing {
    fn default() -> Self {
        Pairing { cap: 13, variants: VARIANTS_PER_TILE, n_per_side: PAIRS_PER_SIDE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FewShot {
    /// Shot counts swept by `sweep`.
    pub shots: Vec<usize>,
    /// Shot count used by `refine`, `classify` and `explain`.
    pub k: usize,
    pub max_k: usize,
    pub n_folds: usize,
    pub pool_cap: usize,
}

impl Default for FewShot {
    fn default() -> Self {
        FewShot { shots: vec![1, 2, 3], k: 3, max_k: DEFAULT_MAX_SHOTS, n_folds: DEFAULT_FOLDS, pool_cap: DEFAULT_POOL_CAP }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Classification {
    pub method: Method,
    /// Defaults to the shot count.
    pub knn_k: Option<usize>,
}

impl Default for Classification {
    fn default() -> Self {
        Classification { method: Method::Avg, knn_k: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Explanation {
    /// Defaults to the shot count.
    pub k: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub tower: TowerKind,
    /// Replaces the preset for `tower` when given.
    pub tower_spec: Option<TowerSpec>,
    pub normalization: Normalization,
    pub pairing: Pairing,
    pub training: TrainingConfig,
    pub refinement: TrainingConfig,
    pub fewshot: FewShot,
    pub classification: Classification,
    pub explanation: Explanation,
    /// Overrides for the synthetic run; the desk preset when absent.
    pub synthetic: Option<SyntheticRunConfig>,
    pub quick: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            paths: Paths::default(),
            tower: TowerKind::ShallowCnn,
            tower_spec: None,
            normalization: Normalization::default(),
            pairing: Pairing::default(),
            training: TrainingConfig::base(),
            refinement: TrainingConfig::refinement(),
            fewshot: FewShot::default(),
            classification: Classification::default(),
            explanation: Explanation::default(),
            synthetic: None,
            quick: false,
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub quick: bool,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Validation(format!("invalid config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(out) = &overrides.out {
            config.paths.out = out.clone();
        }
        config.quick |= overrides.quick;
        Ok(config)
    }

    /// Sub-seed of a named stage, derived from the global seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn tower_spec(&self) -> TowerSpec {
        let mut spec = self.tower_spec.clone().unwrap_or_else(|| TowerSpec::default_for(self.tower));
        spec.input_size = self.normalization.tile_size;
        spec
    }

    pub fn base_training(&self) -> TrainingConfig {
        let mut t = TrainingConfig { seed: self.stage_seed("train"), ..self.training.clone() };
        if self.quick {
            t.epochs = t.epochs.min(2);
        }
        t
    }

    pub fn refinement_training(&self) -> TrainingConfig {
        let mut t = TrainingConfig { seed: self.stage_seed("refine"), ..self.refinement.clone() };
        if self.quick {
            t.epochs = t.epochs.min(2);
        }
        t
    }

    pub fn synthetic_config(&self) -> SyntheticRunConfig {
        match (&self.synthetic, self.quick) {
            (Some(c), false) => c.clone(),
            (Some(c), true) => SyntheticRunConfig { quick: true, ..c.clone() },
            (None, false) => SyntheticRunConfig::desk(self.seed),
            (None, true) => SyntheticRunConfig::quick(self.seed),
        }
    }

    pub fn out(&self) -> &Path {
        &self.paths.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"seed": 9, "fewshot": {"k": 2}}"#).unwrap();
        let c = RunConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.fewshot.k, 2);
        assert_eq!(c.fewshot.n_folds, DEFAULT_FOLDS);
        assert_eq!(c.pairing.n_per_side, 10_000);
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"seed": 9, "paths": {"out": "a"}}"#).unwrap();
        let o = Overrides { seed: Some(3), out: Some("b".into()), quick: true };
        let c = RunConfig::load(Some(&path), &o).unwrap();
        assert_eq!((c.seed, c.out(), c.quick), (3, Path::new("b"), true));
        assert_eq!(c.base_training().epochs, 2);
    }

    #[test]
    fn stage_seeds_differ_and_are_stable() {
        let c = RunConfig::default();
        assert_ne!(c.stage_seed("pairs"), c.stage_seed("train"));
        assert_eq!(c.stage_seed("pairs"), RunConfig::default().stage_seed("pairs"));
    }
}
