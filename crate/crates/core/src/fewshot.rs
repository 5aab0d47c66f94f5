//! k-shot support sets, n-fold alternation, and refinement sweeps.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{expand_tiles, VARIANTS_PER_TILE};
use crate::classify::{classify, evaluate, ClassificationReport, Headline, Method, Prediction, SupportGallery};
use crate::dataset::{cap_role, DatasetManifest, Role, Tile};
use crate::error::{Error, Result};
use crate::explain::{continuity_terms, select_explanation, xai_metrics, ExplanationRecord, Perturbation, XaiMetricsReport};
use crate::pairs::{dissimilar_from_groups, sample_balanced, similar_from_groups, PairDataset};
use crate::seed;
use crate::siamese::{refine, ModelCheckpoint, TrainingConfig};
use crate::stats;

pub const DEFAULT_FOLDS: usize = 4;
/// Few-shot tiles kept per class before fold planning.
pub const DEFAULT_POOL_CAP: usize = 6;
pub const DEFAULT_MAX_SHOTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    pub shots_k: usize,
    /// Class label → exactly `shots_k` tile ids.
    pub members: BTreeMap<String, Vec<String>>,
}

impl SupportSet {
    pub fn new(shots_k: usize, members: BTreeMap<String, Vec<String>>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Validation("support set has no classes".into()));
        }
        if let Some((class, ids)) = members.iter().find(|(_, ids)| ids.len() != shots_k) {
            return Err(Error::Validation(format!(
                "class `{class}` has {} support tiles, expected {shots_k}",
                ids.len()
            )));
        }
        Ok(SupportSet { shots_k, members })
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.members.values().flatten().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.members.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub support: SupportSet,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub n_folds: usize,
    pub seed: u64,
    pub folds: Vec<Fold>,
}

/// Caps the few-shot pool at `cap` tiles per class.
pub fn fewshot_pool(manifest: &DatasetManifest, cap: usize, seed: u64) -> Result<DatasetManifest> {
    cap_role(manifest, Role::Fewshot, cap, seed)
}

pub fn build_fold_plan(manifest: &DatasetManifest, k: usize, n_folds: usize, seed: u64) -> Result<FoldPlan> {
    build_fold_plan_with_max(manifest, k, n_folds, seed, DEFAULT_MAX_SHOTS)
}

/// Splits every usable few-shot class into `k` support and the remaining
/// test tiles, `n_folds` times.
///
/// Each class's tiles are shuffled once. Fold `f` takes as support the
/// cyclic window of length `k` starting at `floor(f * m / n_folds)` in that
/// order, where `m` is the class size, so supports rotate through the pool.
pub fn build_fold_plan_with_max(
    manifest: &DatasetManifest,
    k: usize,
    n_folds: usize,
    seed: u64,
    max_k: usize,
) -> Result<FoldPlan> {
    if k == 0 || k > max_k {
        return Err(Error::Range { what: "shots k", value: k as i64, range: format!("[1, {max_k}]") });
    }
    if n_folds == 0 {
        return Err(Error::Range { what: "n_folds", value: 0, range: "[1, ∞)".into() });
    }
    let roster = manifest.class_roster(Role::Fewshot);
    if roster.is_empty() {
        return Err(Error::Validation("no usable few-shot tiles".into()));
    }
    if let Some((class, ids)) = roster.iter().find(|(_, ids)| ids.len() < k + 1) {
        return Err(Error::ClassTooSmall { class: class.clone(), available: ids.len(), needed: k + 1 });
    }
    let mut rng = seed::rng(seed);
    let orders: BTreeMap<&String, Vec<&String>> = roster
        .iter()
        .map(|(class, ids)| {
            let mut order: Vec<&String> = ids.iter().collect();
            order.shuffle(&mut rng);
            (class, order)
        })
        .collect();

    let mut folds = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let mut members = BTreeMap::new();
        let mut support_ids = BTreeSet::new();
        for (class, order) in &orders {
            let m = order.len();
            let start = f * m / n_folds;
            let chosen: Vec<String> = (0..k).map(|j| order[(start + j) % m].clone()).collect();
            support_ids.extend(chosen.iter().cloned());
            members.insert((*class).clone(), chosen);
        }
        // Test tiles keep manifest order.
        let test = manifest
            .usable(Role::Fewshot)
            .filter(|t| t.label.is_some() && !support_ids.contains(&t.id))
            .map(|t| t.id.clone())
            .collect();
        folds.push(Fold { support: SupportSet::new(k, members)?, test });
    }
    for (i, a) in folds.iter().enumerate() {
        if let Some(j) = folds[i + 1..].iter().position(|b| b.support == a.support) {
            return Err(Error::Protocol(format!(
                "folds {} and {} would share the same support; use fewer folds or larger classes",
                i,
                i + 1 + j
            )));
        }
    }
    Ok(FoldPlan { k, n_folds, seed, folds })
}

/// Refinement pairs together with the expanded tiles they refer to.
#[derive(Debug, Clone)]
pub struct SupportPairs {
    pub pairs: PairDataset,
    pub tiles: DatasetManifest,
}

/// Expands each support tile with its augmented variants, enumerates
/// similar and dissimilar pairs, and keeps as many of each as the smaller
/// side has.
pub fn support_refinement_pairs(support: &SupportSet, tiles: &DatasetManifest, aug_seed: u64) -> Result<SupportPairs> {
    support_refinement_pairs_with(support, tiles, VARIANTS_PER_TILE, aug_seed)
}

pub fn support_refinement_pairs_with(
    support: &SupportSet,
    tiles: &DatasetManifest,
    variants_per_tile: usize,
    aug_seed: u64,
) -> Result<SupportPairs> {
    if support.is_empty() {
        return Err(Error::Validation("support set is empty".into()));
    }
    if support.members.len() < 2 {
        return Err(Error::Protocol(
            "a single-class support set yields no dissimilar pairs, so it cannot be refined on".into(),
        ));
    }
    let originals = support.ids().map(|id| tiles.require(id)).collect::<Result<Vec<&Tile>>>()?;
    let expanded = expand_tiles(&originals, variants_per_tile, aug_seed)?;
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for t in &expanded {
        let label = t.label.clone().ok_or_else(|| Error::Validation(format!("support tile `{}` is unlabeled", t.id)))?;
        groups.entry(label).or_default().push(t.id.clone());
    }
    let similar = similar_from_groups(&groups);
    let dissimilar = dissimilar_from_groups(&groups)?;
    if similar.is_empty() {
        return Err(Error::Protocol("support set yields no similar pairs".into()));
    }
    let per_side = similar.len().min(dissimilar.len());
    let pairs = sample_balanced(&similar, &dissimilar, per_side, aug_seed)?;
    let tiles = DatasetManifest::new(expanded.into_iter().map(|t| (t, Role::Fewshot)))?;
    Ok(SupportPairs { pairs, tiles })
}

/// Options for scoring and explaining one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub refinement: TrainingConfig,
    pub method: Method,
    /// K for the K-NN rule; defaults to the shot count.
    pub knn_k: Option<usize>,
    /// Explanation size; defaults to the shot count.
    pub explain_k: Option<usize>,
    pub variants_per_tile: usize,
    pub perturb_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            refinement: TrainingConfig::refinement(),
            method: Method::Avg,
            knn_k: None,
            explain_k: None,
            variants_per_tile: VARIANTS_PER_TILE,
            perturb_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub c_cor: f64,
    pub c_cty: f64,
    pub c_cst: Option<f64>,
}

impl FoldMetrics {
    fn from_parts(h: Headline, c_cor: f64, c_cty: f64, c_cst: Option<f64>) -> Self {
        FoldMetrics { precision: h.precision, recall: h.recall, f1: h.f1, accuracy: h.accuracy, c_cor, c_cty, c_cst }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub n_test: usize,
    pub metrics: FoldMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub folds: Vec<FoldOutcome>,
    pub mean: FoldMetrics,
    /// Population standard deviation across folds.
    pub std: FoldMetrics,
}

impl ArmResult {
    pub fn from_folds(folds: Vec<FoldOutcome>) -> Self {
        let column = |get: fn(&FoldMetrics) -> f64| -> Vec<f64> { folds.iter().map(|f| get(&f.metrics)).collect() };
        let cst: Option<Vec<f64>> = folds.iter().map(|f| f.metrics.c_cst).collect();
        let agg = |reduce: fn(&[f64]) -> f64| FoldMetrics {
            precision: reduce(&column(|m| m.precision)),
            recall: reduce(&column(|m| m.recall)),
            f1: reduce(&column(|m| m.f1)),
            accuracy: reduce(&column(|m| m.accuracy)),
            c_cor: reduce(&column(|m| m.c_cor)),
            c_cty: reduce(&column(|m| m.c_cty)),
            c_cst: cst.as_deref().filter(|v| !v.is_empty()).map(reduce),
        };
        ArmResult { mean: agg(stats::mean), std: agg(stats::std_dev), folds }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arms {
    pub zero_shot: ArmResult,
    pub refined: ArmResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub k: usize,
    pub n_folds: usize,
    pub arms: Arms,
}

/// Everything produced by scoring one fold's test tiles with one model.
#[derive(Debug, Clone)]
pub struct FoldEvaluation {
    pub predictions: Vec<Prediction>,
    pub explanations: Vec<ExplanationRecord>,
    pub report: ClassificationReport,
    pub xai: XaiMetricsReport,
    pub metrics: FoldMetrics,
}

/// Classifies and explains every test tile of `fold` with `model`.
pub fn evaluate_fold(
    model: &ModelCheckpoint,
    fold: &Fold,
    tiles: &DatasetManifest,
    config: &SweepConfig,
    perturbation: Perturbation,
) -> Result<FoldEvaluation> {
    let k = fold.support.shots_k;
    let knn_k = config.knn_k.unwrap_or(k);
    let explain_k = config.explain_k.unwrap_or(k);
    let gallery = SupportGallery::build(&fold.support, tiles, model)?;
    let queries = fold.test.iter().map(|id| tiles.require(id)).collect::<Result<Vec<&Tile>>>()?;
    if queries.is_empty() {
        return Err(Error::Validation("fold has no test tiles".into()));
    }
    let mut predictions = Vec::with_capacity(queries.len());
    let mut explanations = Vec::with_capacity(queries.len());
    for q in &queries {
        let records = gallery.score_tile(q, model)?;
        let prediction = classify(&records, config.method, knn_k)?.with_truth(q.label.clone());
        explanations.push(select_explanation(&records, explain_k, &prediction)?);
        predictions.push(prediction);
    }
    let report = evaluate(&predictions)?;
    let cty = continuity_terms(&queries, &gallery, model, explain_k, perturbation)?;
    let xai = xai_metrics(&explanations, Some(&cty), gallery.len())?;
    let metrics = FoldMetrics::from_parts(report.headline(), xai.c_cor, xai.c_cty.unwrap_or(1.0), xai.c_cst);
    Ok(FoldEvaluation { predictions, explanations, report, xai, metrics })
}

/// Seed used to augment fold `f`'s support tiles.
pub fn fold_aug_seed(plan_seed: u64, fold: usize) -> u64 {
    seed::derive_seed(plan_seed, &format!("fold{fold}/augment"))
}

/// Both arms' evaluations of one fold.
#[derive(Debug, Clone)]
pub struct FoldDetail {
    pub zero_shot: FoldEvaluation,
    pub refined: FoldEvaluation,
    pub refined_model: ModelCheckpoint,
}

/// Runs both arms on every fold: the base model as-is (zero-shot) and a
/// copy refined on that fold's support pairs. Every refinement starts from
/// `base`.
pub fn run_sweep(
    base: &ModelCheckpoint,
    plan: &FoldPlan,
    tiles: &DatasetManifest,
    config: &SweepConfig,
) -> Result<SweepResult> {
    run_sweep_with(base, plan, tiles, config, |_, _| {})
}

/// [`run_sweep`], handing each fold's full evaluations to `inspect` as
/// they are produced.
pub fn run_sweep_with(
    base: &ModelCheckpoint,
    plan: &FoldPlan,
    tiles: &DatasetManifest,
    config: &SweepConfig,
    mut inspect: impl FnMut(usize, FoldDetail),
) -> Result<SweepResult> {
    let mut zero_shot = Vec::with_capacity(plan.folds.len());
    let mut refined = Vec::with_capacity(plan.folds.len());
    for (f, fold) in plan.folds.iter().enumerate() {
        let perturbation = Perturbation::Random { seed: seed::derive_seed(config.perturb_seed, &format!("fold{f}")) };
        let zs = evaluate_fold(base, fold, tiles, config, perturbation)?;
        zero_shot.push(FoldOutcome { fold: f, n_test: fold.test.len(), metrics: zs.metrics });

        let aug_seed = fold_aug_seed(plan.seed, f);
        let support = support_refinement_pairs_with(&fold.support, tiles, config.variants_per_tile, aug_seed)?;
        let model = refine(base, &support.pairs, &support.tiles, &config.refinement)?;
        let rf = evaluate_fold(&model, fold, tiles, config, perturbation)?;
        log::info!(
            "k={} fold {f}: zero-shot f1 {:.3}, refined f1 {:.3}",
            plan.k,
            zs.metrics.f1,
            rf.metrics.f1
        );
        refined.push(FoldOutcome { fold: f, n_test: fold.test.len(), metrics: rf.metrics });
        inspect(f, FoldDetail { zero_shot: zs, refined: rf, refined_model: model });
    }
    Ok(SweepResult {
        k: plan.k,
        n_folds: plan.n_folds,
        arms: Arms { zero_shot: ArmResult::from_folds(zero_shot), refined: ArmResult::from_folds(refined) },
    })
}
