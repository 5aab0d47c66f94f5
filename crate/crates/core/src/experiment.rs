//! End-to-end synthetic run: generate, pair, train, sweep, explain.
//!
//! This is the desk-scale regression suite. Every stage seed is derived from
//! one global seed with [`seed::derive_seed`], so two runs with the same
//! configuration produce identical numbers.

use serde::{Deserialize, Serialize};

use crate::augment::{expand_candidates, VARIANTS_PER_TILE};
use crate::classify::{classify, evaluate, ClassificationReport, Method, Prediction, SupportGallery};
use crate::dataset::{cap_candidates, DatasetManifest, Role};
use crate::error::Result;
use crate::explain::{ExplanationRecord, XaiMetricsReport};
use crate::fewshot::{self, FoldPlan, SupportSet, SweepConfig, SweepResult};
use crate::nn::TowerSpec;
use crate::pairs::{build_pair_dataset, PairCounts};
use crate::seed;
use crate::siamese::{train_base, ModelCheckpoint, TrainingConfig};
use crate::synthetic::{generate, SyntheticSpec};

/// Held-out weighted accuracy the base model must reach.
pub const MIN_HELDOUT_ACCURACY: f64 = 0.85;
/// Required F1 gain of refined over zero-shot at the largest shot count.
pub const MIN_REFINEMENT_GAIN: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRunConfig {
    pub seed: u64,
    pub data: SyntheticSpec,
    pub tower: TowerSpec,
    pub base_cap: usize,
    pub variants_per_tile: usize,
    pub pairs_per_side: usize,
    pub base_training: TrainingConfig,
    pub shots: Vec<usize>,
    pub n_folds: usize,
    pub pool_cap: usize,
    pub sweep: SweepConfig,
    /// Reduced epochs; results are not acceptance grade.
    pub quick: bool,
}

impl SyntheticRunConfig {
    /// The pinned desk-scale configuration.
    pub fn desk(seed: u64) -> Self {
        let tile_size = 32;
        SyntheticRunConfig {
            seed,
            data: SyntheticSpec { tile_size, seed, ..SyntheticSpec::default() },
            tower: TowerSpec { input_size: tile_size, ..TowerSpec::shallow_cnn_compact() },
            base_cap: 13,
            variants_per_tile: VARIANTS_PER_TILE,
            pairs_per_side: 2_000,
            base_training: TrainingConfig { epochs: 8, seed, ..TrainingConfig::base() },
            shots: vec![1, 2, 3],
            n_folds: fewshot::DEFAULT_FOLDS,
            pool_cap: 12,
            sweep: SweepConfig {
                refinement: TrainingConfig { epochs: 15, learning_rate: 5e-4, seed, ..TrainingConfig::refinement() },
                ..SweepConfig::default()
            },
            quick: false,
        }
    }

    /// A fast smoke configuration.
    pub fn quick(seed: u64) -> Self {
        let mut c = SyntheticRunConfig::desk(seed);
        c.quick = true;
        c.pairs_per_side = 400;
        c.base_training.epochs = 2;
        c.sweep.refinement.epochs = 2;
        c.n_folds = 2;
        c
    }

    fn sub_seed(&self, stage: &str) -> u64 {
        seed::derive_seed(self.seed, stage)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticReport {
    pub seed: u64,
    /// False for quick runs.
    pub acceptance_grade: bool,
    pub dataset_fingerprint: String,
    pub enumerated: PairCounts,
    pub sampled: PairCounts,
    pub base_epoch_losses: Vec<f64>,
    pub weights_fingerprint: String,
    pub heldout: ClassificationReport,
    pub sweeps: Vec<SweepResult>,
    pub checks: Vec<Check>,
}

impl SyntheticReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Artifacts of a run, besides the report.
#[derive(Debug, Clone)]
pub struct SyntheticRun {
    pub manifest: DatasetManifest,
    /// The capped few-shot pool the sweeps ran on.
    pub pool: DatasetManifest,
    pub base: ModelCheckpoint,
    pub heldout_predictions: Vec<Prediction>,
    pub plans: Vec<FoldPlan>,
    /// Refined-arm explanations of the first fold at the largest shot count.
    pub explanations: Vec<ExplanationRecord>,
    pub xai: Option<XaiMetricsReport>,
    pub report: SyntheticReport,
}

/// Scores held-out base-class tiles against every training original.
pub fn heldout_predictions(model: &ModelCheckpoint, manifest: &DatasetManifest) -> Result<Vec<Prediction>> {
    let roster = manifest.class_roster(Role::BaseTrain);
    let per_class = roster.values().map(Vec::len).min().unwrap_or(0);
    let members = roster.into_iter().map(|(c, ids)| (c, ids[..per_class].to_vec())).collect();
    let support = SupportSet::new(per_class, members)?;
    let gallery = SupportGallery::build(&support, manifest, model)?;
    manifest
        .usable(Role::Query)
        .map(|q| Ok(classify(&gallery.score_tile(q, model)?, Method::Avg, 1)?.with_truth(q.label.clone())))
        .collect()
}

fn shape_checks(config: &SyntheticRunConfig, heldout: &ClassificationReport, sweeps: &[SweepResult]) -> Vec<Check> {
    let mut checks = vec![Check {
        name: "heldout_accuracy".into(),
        passed: heldout.weighted_accuracy >= MIN_HELDOUT_ACCURACY,
        detail: format!("{:.4} >= {MIN_HELDOUT_ACCURACY}", heldout.weighted_accuracy),
    }];
    if let Some(top) = sweeps.last() {
        let gain = top.arms.refined.mean.f1 - top.arms.zero_shot.mean.f1;
        checks.push(Check {
            name: format!("refinement_gain_k{}", top.k),
            passed: gain >= MIN_REFINEMENT_GAIN,
            detail: format!(
                "refined {:.4} - zero-shot {:.4} = {gain:.4} >= {MIN_REFINEMENT_GAIN}",
                top.arms.refined.mean.f1, top.arms.zero_shot.mean.f1
            ),
        });
    }
    for w in sweeps.windows(2) {
        let (lo, hi) = (&w[0].arms.refined, &w[1].arms.refined);
        let slack = lo.std.f1.max(hi.std.f1);
        checks.push(Check {
            name: format!("f1_monotone_k{}_k{}", w[0].k, w[1].k),
            passed: hi.mean.f1 + slack >= lo.mean.f1,
            detail: format!("{:.4} + {slack:.4} >= {:.4}", hi.mean.f1, lo.mean.f1),
        });
    }
    if config.quick {
        checks.push(Check {
            name: "acceptance_grade".into(),
            passed: false,
            detail: "quick mode: reduced epochs and folds".into(),
        });
    }
    checks
}

pub fn run_synthetic(config: &SyntheticRunConfig) -> Result<SyntheticRun> {
    let manifest = generate(&config.data)?;
    log::info!("generated {} synthetic tiles", manifest.len());

    let capped = cap_candidates(&manifest, config.base_cap, config.sub_seed("cap"))?;
    let candidates = expand_candidates(&capped, config.variants_per_tile, config.sub_seed("augment"))?;
    let pairs = build_pair_dataset(&candidates, config.pairs_per_side, config.sub_seed("pairs"))?;
    log::info!(
        "pairs: {}/{} enumerated, {}/{} sampled",
        pairs.enumerated.similar,
        pairs.enumerated.dissimilar,
        pairs.counts.similar,
        pairs.counts.dissimilar
    );

    let base = train_base(&pairs, &candidates, &config.tower, &config.base_training)?;
    let heldout_predictions = heldout_predictions(&base, &capped)?;
    let heldout = evaluate(&heldout_predictions)?;
    log::info!("held-out accuracy {:.4}", heldout.weighted_accuracy);

    let pool = fewshot::fewshot_pool(&manifest, config.pool_cap, config.sub_seed("pool"))?;
    let sweep_config = SweepConfig { perturb_seed: config.sub_seed("perturb"), ..config.sweep.clone() };
    let mut sweeps = Vec::new();
    let mut plans = Vec::new();
    let mut explanations = Vec::new();
    let mut xai = None;
    let top_k = config.shots.iter().copied().max();
    for &k in &config.shots {
        let plan = fewshot::build_fold_plan(&pool, k, config.n_folds, config.sub_seed("folds"))?;
        let result = fewshot::run_sweep_with(&base, &plan, &pool, &sweep_config, |f, detail| {
            if Some(k) == top_k && f == 0 {
                explanations = detail.refined.explanations;
                xai = Some(detail.refined.xai);
            }
        })?;
        sweeps.push(result);
        plans.push(plan);
    }

    let checks = shape_checks(config, &heldout, &sweeps);
    let report = SyntheticReport {
        seed: config.seed,
        acceptance_grade: !config.quick,
        dataset_fingerprint: manifest.fingerprint(),
        enumerated: pairs.enumerated,
        sampled: pairs.counts,
        base_epoch_losses: base.lineage[0].epoch_losses.clone(),
        weights_fingerprint: base.weights_fingerprint()?,
        heldout,
        sweeps,
        checks,
    };
    Ok(SyntheticRun { manifest, pool, base, heldout_predictions, plans, explanations, xai, report })
}
