//! One function per CLI verb. Each reads its upstream stage directories,
//! writes its own directory atomically, and records a sidecar.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use canopy_fewshot::augment::expand_candidates;
use canopy_fewshot::classify::{
    classify, evaluate, read_predictions, write_predictions, Method, SimilarityRecord,
    SupportGallery,
};
use canopy_fewshot::dataset::{
    cap_candidates, ingest_manifest, normalize_manifest, plan_normalization, write_manifest, DatasetManifest,
};
use canopy_fewshot::experiment::run_synthetic;
use canopy_fewshot::explain::{
    continuity_terms, render_report, select_explanation, write_explanations, xai_metrics, ExplanationRecord,
    Perturbation,
};
use canopy_fewshot::fewshot::{
    build_fold_plan_with_max, fewshot_pool, fold_aug_seed, run_sweep, support_refinement_pairs_with, Fold, FoldPlan,
    SweepConfig, SweepResult,
};
use canopy_fewshot::pairs::{build_pair_dataset, read_pairs, write_pairs};
use canopy_fewshot::seed::{derive_seed, fingerprint};
use canopy_fewshot::siamese::{refine, train_base_from, ModelCheckpoint};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{io, CliError};
use crate::stage::{StageSidecar, StageWriter, Workspace};

/// Which model scores a fold: the base model or the fold's refined copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    ZeroShot,
    Refined,
}

impl Arm {
    fn as_str(self) -> &'static str {
        match self {
            Arm::ZeroShot => "zero-shot",
            Arm::Refined => "refined",
        }
    }
}

/// Selects one fold of the few-shot plan at shot count `k`.
#[derive(Debug, Clone, Copy)]
pub struct FoldSelector {
    pub k: usize,
    pub fold: usize,
}

pub struct Context {
    pub config: RunConfig,
    pub force: bool,
    pub ws: Workspace,
}

impl Context {
    pub fn open(config: RunConfig, force: bool) -> Result<Self, CliError> {
        let ws = Workspace::open(config.out())?;
        Ok(Context { config, force, ws })
    }

    fn upstream_fingerprint(&self, dir: &str, command: &'static str) -> Result<String, CliError> {
        Ok(self.ws.sidecar(dir, command)?.fingerprint)
    }

    fn prepared(&self) -> Result<DatasetManifest, CliError> {
        Ok(ingest_manifest(&self.ws.upstream(PREPARE, "manifest.json", PREPARE)?)?)
    }

    fn load_model(&self, dir: &str, command: &'static str) -> Result<ModelCheckpoint, CliError> {
        Ok(ModelCheckpoint::load(&self.ws.upstream(dir, "model", command)?)?)
    }

    /// The capped few-shot pool and the fold plan at `k`, both rebuilt
    /// deterministically from the prepared manifest.
    fn fold_plan(&self, k: usize) -> Result<(DatasetManifest, FoldPlan), CliError> {
        let c = &self.config;
        let pool = fewshot_pool(&self.prepared()?, c.fewshot.pool_cap, c.stage_seed("pool"))?;
        let plan = build_fold_plan_with_max(&pool, k, c.fewshot.n_folds, c.stage_seed("folds"), c.fewshot.max_k)?;
        Ok((pool, plan))
    }

    fn fold<'a>(&self, plan: &'a FoldPlan, sel: FoldSelector) -> Result<&'a Fold, CliError> {
        plan.folds.get(sel.fold).ok_or_else(|| {
            CliError::Validation(format!("fold {} does not exist (plan has {} folds)", sel.fold, plan.folds.len()))
        })
    }

    fn sweep_config(&self) -> SweepConfig {
        let c = &self.config;
        SweepConfig {
            refinement: c.refinement_training(),
            method: c.classification.method,
            knn_k: c.classification.knn_k,
            explain_k: c.explanation.k,
            variants_per_tile: c.pairing.variants,
            perturb_seed: c.stage_seed("perturb"),
        }
    }

    fn begin(&self, dir: &str) -> Result<StageWriter, CliError> {
        self.ws.begin(dir, self.force)
    }
}

const PREPARE: &str = "prepare";
const PAIRS: &str = "pairs";
const TRAIN: &str = "train";
const REFINE: &str = "refine";
const CLASSIFY: &str = "classify";
const SWEEP: &str = "sweep";
const SYNTHETIC: &str = "synthetic";

pub fn refine_dir(sel: FoldSelector) -> String {
    format!("refine_k{}_f{}", sel.k, sel.fold)
}

pub fn classify_dir(sel: FoldSelector, arm: Arm) -> String {
    format!("classify_k{}_f{}_{}", sel.k, sel.fold, arm.as_str())
}

pub fn explain_dir(sel: FoldSelector, arm: Arm) -> String {
    format!("explain_k{}_f{}_{}", sel.k, sel.fold, arm.as_str())
}

fn inputs<const N: usize>(entries: [(&str, String); N]) -> BTreeMap<String, String> {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).map_err(|e| CliError::Internal(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct NormalizationAction {
    id: String,
    input: (u32, u32),
    gsd_cm: f64,
    resampled: Option<(u32, u32)>,
    /// Pixels added (positive) or cropped (negative) per side.
    left: i64,
    top: i64,
    right: i64,
    bottom: i64,
}

pub fn prepare(ctx: &Context) -> Result<PathBuf, CliError> {
    let c = &ctx.config;
    let w = ctx.begin(PREPARE)?;
    let raw = ingest_manifest(&c.paths.raw_manifest)?;
    let (gsd, size) = (c.normalization.target_gsd_cm, c.normalization.tile_size);
    let mut actions = Vec::with_capacity(raw.len());
    for tile in raw.tiles() {
        let dims = tile.pixels.dimensions();
        let plan = plan_normalization(dims, tile.gsd_cm, gsd, size)?;
        actions.push(NormalizationAction {
            id: tile.id.clone(),
            input: dims,
            gsd_cm: tile.gsd_cm,
            resampled: plan.resamples(dims).then_some(plan.resampled),
            left: plan.left,
            top: plan.top,
            right: plan.right,
            bottom: plan.bottom,
        });
    }
    let normalized = normalize_manifest(&raw, gsd, size)?;
    let resampled = actions.iter().filter(|a| a.resampled.is_some()).count();
    log::info!("normalized {} tiles ({resampled} resampled) to {size}px at {gsd} cm", normalized.len());

    write_manifest(&normalized, w.path())?;
    write_jsonl(&w.file("actions.jsonl"), &actions)?;
    let sidecar = StageSidecar::new(PREPARE, &c.normalization, inputs([("raw", raw.fingerprint())]))
        .output("manifest", normalized.fingerprint());
    w.commit(&sidecar)
}

pub fn pairs(ctx: &Context) -> Result<PathBuf, CliError> {
    let c = &ctx.config;
    let w = ctx.begin(PAIRS)?;
    let prepared = ctx.prepared()?;
    let capped = cap_candidates(&prepared, c.pairing.cap, c.stage_seed("cap"))?;
    let candidates = expand_candidates(&capped, c.pairing.variants, c.stage_seed("augment"))?;
    let dataset = build_pair_dataset(&candidates, c.pairing.n_per_side, c.stage_seed("pairs"))?;
    log::info!(
        "enumerated {}/{} similar/dissimilar pairs, sampled {}/{}",
        dataset.enumerated.similar,
        dataset.enumerated.dissimilar,
        dataset.counts.similar,
        dataset.counts.dissimilar
    );

    write_manifest(&candidates, &w.file("candidates"))?;
    write_pairs(&dataset, &w.file("pairs.jsonl"), &w.file("header.json"))?;
    let sidecar = StageSidecar::new(
        PAIRS,
        &(&c.pairing, c.seed),
        inputs([(PREPARE, ctx.upstream_fingerprint(PREPARE, PREPARE)?)]),
    )
    .output("candidates", candidates.fingerprint())
    .output("pairs", dataset.fingerprint());
    w.commit(&sidecar)
}

pub fn train(ctx: &Context) -> Result<PathBuf, CliError> {
    let c = &ctx.config;
    let w = ctx.begin(TRAIN)?;
    let dir = ctx.ws.stage_dir(PAIRS);
    let dataset = read_pairs(
        &ctx.ws.upstream(PAIRS, "pairs.jsonl", PAIRS)?,
        &ctx.ws.upstream(PAIRS, "header.json", PAIRS)?,
    )?;
    let candidates = ingest_manifest(&dir.join("candidates").join("manifest.json"))?;
    let training = c.base_training();
    let mut init = ModelCheckpoint::initialize(c.tower_spec(), derive_seed(training.seed, "init"));
    init.seed = training.seed;
    if let Some(path) = &c.paths.pretrained_backbone {
        let n = init.load_backbone(path)?;
        log::info!("loaded {n} backbone tensors from {}", path.display());
    }
    let model = train_base_from(init, &dataset, &candidates, &training)?;
    if let Some(loss) = model.lineage.last().and_then(|l| l.epoch_losses.last()) {
        log::info!("base training finished, final epoch loss {loss:.5}");
    }

    model.save(&w.file("model"))?;
    let sidecar = StageSidecar::new(
        TRAIN,
        &json!({ "tower": c.tower_spec(), "training": training, "backbone": c.paths.pretrained_backbone }),
        inputs([(PAIRS, ctx.upstream_fingerprint(PAIRS, PAIRS)?)]),
    )
    .output("weights", model.weights_fingerprint()?);
    w.commit(&sidecar)
}

pub fn refine_fold(ctx: &Context, sel: FoldSelector) -> Result<PathBuf, CliError> {
    let c = &ctx.config;
    let w = ctx.begin(&refine_dir(sel))?;
    let base = ctx.load_model(TRAIN, TRAIN)?;
    let (pool, plan) = ctx.fold_plan(sel.k)?;
    let fold = ctx.fold(&plan, sel)?;
    let support = support_refinement_pairs_with(&fold.support, &pool, c.pairing.variants, fold_aug_seed(plan.seed, sel.fold))?;
    let training = c.refinement_training();
    let model = refine(&base, &support.pairs, &support.tiles, &training)?;
    log::info!("refined on {} support pairs (k={}, fold {})", support.pairs.pairs.len(), sel.k, sel.fold);

    model.save(&w.file("model"))?;
    w.write_json("plan.json", &plan)?;
    let sidecar = StageSidecar::new(
        REFINE,
        &json!({ "k": sel.k, "fold": sel.fold, "fewshot": c.fewshot, "training": training }),
        inputs([
            (TRAIN, ctx.upstream_fingerprint(TRAIN, TRAIN)?),
            (PREPARE, ctx.upstream_fingerprint(PREPARE, PREPARE)?),
        ]),
    )
    .output("weights", model.weights_fingerprint()?);
    w.commit(&sidecar)
}

/// Written by `classify`, read back by `explain`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ClassifyContext {
    k: usize,
    fold: usize,
    arm: Arm,
    method: Method,
    knn_k: usize,
    /// Stage directory holding the scoring model.
    model_dir: String,
}

pub fn classify_fold(
    ctx: &Context,
    sel: FoldSelector,
    arm: Arm,
    method: Option<Method>,
    knn_k: Option<usize>,
) -> Result<PathBuf, CliError> {
    let c = &ctx.config;
    let w = ctx.begin(&classify_dir(sel, arm))?;
    let method = method.unwrap_or(c.classification.method);
    let knn_k = knn_k.or(c.classification.knn_k).unwrap_or(sel.k);
    let (model_dir, producer) = match arm {
        Arm::ZeroShot => (TRAIN.to_string(), TRAIN),
        Arm::Refined => (refine_dir(sel), REFINE),
    };
    let model = ctx.load_model(&model_dir, producer)?;
    let (pool, plan) = ctx.fold_plan(sel.k)?;
    let fold = ctx.fold(&plan, sel)?;
    let gallery = SupportGallery::build(&fold.support, &pool, &model)?;

    let mut records = Vec::new();
    let mut predictions = Vec::new();
    for id in &fold.test {
        let query = pool.require(id)?;
        let scored = gallery.score_tile(query, &model)?;
        predictions.push(classify(&scored, method, knn_k)?.with_truth(query.label.clone()));
        records.extend(scored);
    }
    let report = evaluate(&predictions)?;
    let h = report.headline();
    log::info!(
        "{} k={} fold {}: precision {:.3}, recall {:.3}, f1 {:.3}, accuracy {:.3}",
        arm.as_str(),
        sel.k,
        sel.fold,
        h.precision,
        h.recall,
        h.f1,
        h.accuracy
    );

    write_predictions(&predictions, &w.file("predictions.jsonl"))?;
    write_jsonl(&w.file("records.jsonl"), &records)?;
    w.write_json("report.json", &report)?;
    let context = ClassifyContext { k: sel.k, fold: sel.fold, arm, method, knn_k, model_dir: model_dir.clone() };
    w.write_json("context.json", &context)?;
    let sidecar = StageSidecar::new(
        CLASSIFY,
        &context,
        inputs([
            ("model", ctx.upstream_fingerprint(&model_dir, producer)?),
            (PREPARE, ctx.upstream_fingerprint(PREPARE, PREPARE)?),
        ]),
    )
    .output("predictions", fingerprint([serde_json::to_string(&predictions).unwrap_or_default().as_bytes()]));
    w.commit(&sidecar)
}

pub fn explain_fold(ctx: &Context, sel: FoldSelector, arm: Arm) -> Result<PathBuf, CliError> {
    let c = &ctx.config;
    let w = ctx.begin(&explain_dir(sel, arm))?;
    let upstream = classify_dir(sel, arm);
    let context: ClassifyContext = read_json(&ctx.ws.upstream(&upstream, "context.json", CLASSIFY)?)?;
    let predictions = read_predictions(&ctx.ws.upstream(&upstream, "predictions.jsonl", CLASSIFY)?)?;
    let records_path = ctx.ws.upstream(&upstream, "records.jsonl", CLASSIFY)?;
    let text = fs::read_to_string(&records_path).map_err(|e| io(&records_path, e))?;
    let mut by_query: BTreeMap<String, Vec<SimilarityRecord>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let r: SimilarityRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Validation(format!("{}: {e}", records_path.display())))?;
        by_query.entry(r.query_id.clone()).or_default().push(r);
    }

    let k = c.explanation.k.unwrap_or(context.k);
    let explanations = predictions
        .iter()
        .map(|p| {
            let records = by_query
                .get(&p.query_id)
                .ok_or_else(|| CliError::Validation(format!("no similarity records for `{}`", p.query_id)))?;
            Ok(select_explanation(records, k, p)?)
        })
        .collect::<Result<Vec<ExplanationRecord>, CliError>>()?;

    let producer = if context.arm == Arm::Refined { REFINE } else { TRAIN };
    let model = ctx.load_model(&context.model_dir, producer)?;
    let (pool, plan) = ctx.fold_plan(context.k)?;
    let fold = ctx.fold(&plan, sel)?;
    let gallery = SupportGallery::build(&fold.support, &pool, &model)?;
    let queries = predictions.iter().map(|p| pool.require(&p.query_id)).collect::<Result<Vec<_>, _>>()?;
    let perturbation = Perturbation::Random { seed: derive_seed(c.stage_seed("perturb"), &format!("fold{}", sel.fold)) };
    let cty = continuity_terms(&queries, &gallery, &model, k, perturbation)?;
    let metrics = xai_metrics(&explanations, Some(&cty), gallery.len())?;
    log::info!(
        "explanations (K={k}): correctness {:.3}, continuity {:.3}, contrastivity {}",
        metrics.c_cor,
        metrics.c_cty.unwrap_or(f64::NAN),
        metrics.c_cst.map_or("-".to_string(), |v| format!("{v:.3}"))
    );

    write_explanations(&explanations, &w.file("explanations.jsonl"))?;
    w.write_json("metrics.json", &metrics)?;
    render_report(&explanations, &metrics, &pool, &w.file("report"))?;
    let sidecar = StageSidecar::new(
        "explain",
        &json!({ "k": k, "perturbation": perturbation }),
        inputs([(CLASSIFY, ctx.upstream_fingerprint(&upstream, CLASSIFY)?)]),
    );
    w.commit(&sidecar)
}

/// Mean and population standard deviation of one metric across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub k: usize,
    pub arm: Arm,
    pub precision: Cell,
    pub recall: Cell,
    pub f1: Cell,
    pub accuracy: Cell,
}

pub fn sweep_table(results: &[SweepResult]) -> Vec<TableRow> {
    let mut rows = Vec::new();
    for r in results {
        for (arm, res) in [(Arm::ZeroShot, &r.arms.zero_shot), (Arm::Refined, &r.arms.refined)] {
            let cell = |get: fn(&canopy_fewshot::fewshot::FoldMetrics) -> f64| Cell { mean: get(&res.mean), std: get(&res.std) };
            rows.push(TableRow {
                k: r.k,
                arm,
                precision: cell(|m| m.precision),
                recall: cell(|m| m.recall),
                f1: cell(|m| m.f1),
                accuracy: cell(|m| m.accuracy),
            });
        }
    }
    rows
}

pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = String::from("| k | arm | precision | recall | f1 | accuracy |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let f = |c: Cell| format!("{:.3} ± {:.3}", c.mean, c.std);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} |",
            r.k,
            r.arm.as_str(),
            f(r.precision),
            f(r.recall),
            f(r.f1),
            f(r.accuracy)
        );
    }
    out
}

pub fn sweep(ctx: &Context) -> Result<PathBuf, CliError> {
    let c = &ctx.config;
    let w = ctx.begin(SWEEP)?;
    let base = ctx.load_model(TRAIN, TRAIN)?;
    let config = ctx.sweep_config();
    let mut results = Vec::new();
    let mut plans = Vec::new();
    for &k in &c.fewshot.shots {
        let (pool, plan) = ctx.fold_plan(k)?;
        results.push(run_sweep(&base, &plan, &pool, &config)?);
        plans.push(plan);
    }
    let table = sweep_table(&results);
    let rendered = render_table(&table);
    log::info!("sweep finished\n{rendered}");

    for (result, plan) in results.iter().zip(&plans) {
        w.write_json(&format!("sweep_k{}.json", result.k), result)?;
        w.write_json(&format!("plan_k{}.json", plan.k), plan)?;
    }
    w.write_json("table.json", &table)?;
    fs::write(w.file("table.md"), &rendered).map_err(|e| io(&w.file("table.md"), e))?;
    let sidecar = StageSidecar::new(
        SWEEP,
        &json!({ "fewshot": c.fewshot, "sweep": config }),
        inputs([
            (TRAIN, ctx.upstream_fingerprint(TRAIN, TRAIN)?),
            (PREPARE, ctx.upstream_fingerprint(PREPARE, PREPARE)?),
        ]),
    );
    w.commit(&sidecar)
}

/// Runs the synthetic suite; returns the stage directory and whether every
/// check passed.
pub fn synthetic(ctx: &Context) -> Result<(PathBuf, bool), CliError> {
    let w = ctx.begin(SYNTHETIC)?;
    let config = ctx.config.synthetic_config();
    let run = run_synthetic(&config)?;
    let report = &run.report;
    write_manifest(&run.manifest, &w.file("dataset"))?;
    run.base.save(&w.file("model"))?;
    write_predictions(&run.heldout_predictions, &w.file("heldout_predictions.jsonl"))?;
    w.write_json("plans.json", &run.plans)?;
    w.write_json("report.json", report)?;
    fs::write(w.file("acceptance.txt"), summarize_checks(report)).map_err(|e| io(&w.file("acceptance.txt"), e))?;
    let table = render_table(&sweep_table(&report.sweeps));
    fs::write(w.file("table.md"), &table).map_err(|e| io(&w.file("table.md"), e))?;
    if let Some(xai) = &run.xai {
        write_explanations(&run.explanations, &w.file("explanations.jsonl"))?;
        w.write_json("xai.json", xai)?;
        render_report(&run.explanations, xai, &run.pool, &w.file("report"))?;
    }
    let sidecar = StageSidecar::new(SYNTHETIC, &config, BTreeMap::new())
        .output("dataset", report.dataset_fingerprint.clone())
        .output("weights", report.weights_fingerprint.clone());
    let dir = w.commit(&sidecar)?;
    Ok((dir, report.passed()))
}

/// Human-readable acceptance summary of a synthetic report.
pub fn summarize_checks(report: &canopy_fewshot::experiment::SyntheticReport) -> String {
    let mut out = String::new();
    for check in &report.checks {
        let mark = if check.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{mark}  {:<24} {}", check.name, check.detail);
    }
    out
}
