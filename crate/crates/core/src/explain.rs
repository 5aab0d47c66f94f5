//! Case-based explanations and their quality metrics.
//!
//! An explanation for a query is the `K` support tiles it scored highest
//! against, drawn from the whole support set (not per class), so a
//! low-scoring support of another class can appear in it.
//!
//! Three metrics grade a batch of explanations:
//!
//! * correctness: how many selected supports share the class of a correct
//!   prediction;
//! * continuity: how many selected supports survive a small perturbation of
//!   the query;
//! * contrastivity: an entropy of how often each support is selected,
//!   normalized by `log2 K` and undefined for `K = 1`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentOp, AugmentationSpec};
use crate::classify::{ranked, Prediction, SimilarityRecord, SupportGallery};
use crate::dataset::{DatasetManifest, Tile};
use crate::error::{Error, Result};
use crate::fewshot::SupportSet;
use crate::seed;
use crate::siamese::ModelCheckpoint;
use crate::stats::{mean, pairwise_sum};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedSupport {
    pub support_id: String,
    pub support_class: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub query_id: String,
    /// Descending by score; ties by support id.
    pub selected: Vec<SelectedSupport>,
    pub predicted_class: String,
    pub true_class: Option<String>,
}

impl ExplanationRecord {
    pub fn k(&self) -> usize {
        self.selected.len()
    }

    fn support_ids(&self) -> BTreeSet<&str> {
        self.selected.iter().map(|s| s.support_id.as_str()).collect()
    }
}

/// The `k` best-scoring supports over the whole support set.
pub fn top_k(records: &[SimilarityRecord], k: usize) -> Result<Vec<SelectedSupport>> {
    if k == 0 || k > records.len() {
        return Err(Error::Range {
            what: "explanation size K",
            value: k as i64,
            range: format!("[1, {}]", records.len()),
        });
    }
    Ok(ranked(records)
        .into_iter()
        .take(k)
        .map(|r| SelectedSupport { support_id: r.support_id.clone(), support_class: r.support_class.clone(), score: r.score })
        .collect())
}

pub fn select_explanation(records: &[SimilarityRecord], k: usize, prediction: &Prediction) -> Result<ExplanationRecord> {
    Ok(ExplanationRecord {
        query_id: prediction.query_id.clone(),
        selected: top_k(records, k)?,
        predicted_class: prediction.predicted_class.clone(),
        true_class: prediction.true_class.clone(),
    })
}

fn require_nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Validation(format!("{what}: no explanations")));
    }
    Ok(())
}

/// Correctness of one explanation: the fraction of selected supports whose
/// class equals the prediction, counted only when the prediction is right.
pub fn correctness_term(explanation: &ExplanationRecord) -> Result<f64> {
    let truth = explanation
        .true_class
        .as_deref()
        .ok_or_else(|| Error::Validation(format!("explanation for `{}` has no true class", explanation.query_id)))?;
    if truth != explanation.predicted_class || explanation.selected.is_empty() {
        return Ok(0.0);
    }
    let hits = explanation.selected.iter().filter(|s| s.support_class == truth).count();
    Ok(hits as f64 / explanation.k() as f64)
}

pub fn correctness(explanations: &[ExplanationRecord]) -> Result<f64> {
    require_nonempty(explanations, "correctness")?;
    let terms = explanations.iter().map(correctness_term).collect::<Result<Vec<_>>>()?;
    Ok(mean(&terms))
}

/// Fraction of `original`'s selected supports that also appear in `perturbed`.
pub fn continuity_term(original: &ExplanationRecord, perturbed: &ExplanationRecord) -> Result<f64> {
    if original.k() != perturbed.k() || original.k() == 0 {
        return Err(Error::Validation(format!(
            "explanations for `{}` have sizes {} and {}",
            original.query_id,
            original.k(),
            perturbed.k()
        )));
    }
    let kept = original.support_ids().intersection(&perturbed.support_ids()).count();
    Ok(kept as f64 / original.k() as f64)
}

/// Continuity from explanations already computed for the original and the
/// perturbed queries, matched by position.
pub fn continuity_from_selections(original: &[ExplanationRecord], perturbed: &[ExplanationRecord]) -> Result<f64> {
    require_nonempty(original, "continuity")?;
    if original.len() != perturbed.len() {
        return Err(Error::Validation(format!(
            "{} original explanations but {} perturbed",
            original.len(),
            perturbed.len()
        )));
    }
    let terms = original
        .iter()
        .zip(perturbed)
        .map(|(o, p)| continuity_term(o, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&terms))
}

/// How each query is perturbed for continuity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum Perturbation {
    /// One operator drawn uniformly per query, parameters from its default
    /// ranges, all from one stream seeded by `seed`.
    Random { seed: u64 },
    /// The same augmentation for every query.
    Fixed { spec: AugmentationSpec },
}

impl Perturbation {
    pub fn identity() -> Self {
        Perturbation::Fixed { spec: AugmentationSpec::identity() }
    }
}

/// Per-query continuity terms, in query order.
pub fn continuity_terms(
    queries: &[&Tile],
    gallery: &SupportGallery,
    checkpoint: &ModelCheckpoint,
    k: usize,
    perturbation: Perturbation,
) -> Result<Vec<f64>> {
    let mut rng = match perturbation {
        Perturbation::Random { seed } => Some(seed::rng(seed)),
        Perturbation::Fixed { .. } => None,
    };
    let mut terms = Vec::with_capacity(queries.len());
    for query in queries {
        let spec = match (&mut rng, perturbation) {
            (Some(rng), _) => {
                let op = AugmentOp::ALL[rng.random_range(0..AugmentOp::ALL.len())];
                AugmentationSpec::draw(op, rng)
            }
            (None, Perturbation::Fixed { spec }) => spec,
            (None, Perturbation::Random { .. }) => unreachable!("random policy always has a stream"),
        };
        let original = top_k(&gallery.score_tile(query, checkpoint)?, k)?;
        let moved = augment(query, &spec)?;
        let perturbed = top_k(&gallery.score_tile(&moved, checkpoint)?, k)?;
        let kept: BTreeSet<&str> = original.iter().map(|s| s.support_id.as_str()).collect();
        let hits = perturbed.iter().filter(|s| kept.contains(s.support_id.as_str())).count();
        terms.push(hits as f64 / k as f64);
    }
    Ok(terms)
}

/// Mean fraction of each query's explanation that persists under one random
/// augmentation of the query.
pub fn continuity(
    queries: &[&Tile],
    support: &SupportSet,
    tiles: &DatasetManifest,
    checkpoint: &ModelCheckpoint,
    k: usize,
    perturb_seed: u64,
) -> Result<f64> {
    require_nonempty(queries, "continuity")?;
    let gallery = SupportGallery::build(support, tiles, checkpoint)?;
    let terms = continuity_terms(queries, &gallery, checkpoint, k, Perturbation::Random { seed: perturb_seed })?;
    Ok(mean(&terms))
}

fn shared_k(explanations: &[ExplanationRecord]) -> Result<usize> {
    let k = explanations[0].k();
    if let Some(other) = explanations.iter().find(|e| e.k() != k) {
        return Err(Error::Validation(format!(
            "explanations mix sizes {k} and {} (query `{}`)",
            other.k(),
            other.query_id
        )));
    }
    Ok(k)
}

/// Selection frequency of every support across all explanations:
/// appearances divided by `N * K`.
pub fn selection_frequencies(explanations: &[ExplanationRecord]) -> BTreeMap<&str, f64> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total = 0usize;
    for e in explanations {
        for s in &e.selected {
            *counts.entry(s.support_id.as_str()).or_default() += 1;
            total += 1;
        }
    }
    counts.into_iter().map(|(id, c)| (id, c as f64 / total as f64)).collect()
}

/// Per-explanation contrastivity terms, or `None` when `K = 1`.
pub fn contrastivity_terms(explanations: &[ExplanationRecord]) -> Result<Option<Vec<f64>>> {
    require_nonempty(explanations, "contrastivity")?;
    let k = shared_k(explanations)?;
    if k < 2 {
        return Ok(None);
    }
    let p = selection_frequencies(explanations);
    let norm = (k as f64).log2();
    let terms = explanations
        .iter()
        .map(|e| {
            let parts: Vec<f64> = e
                .selected
                .iter()
                .map(|s| {
                    let ps = p[s.support_id.as_str()];
                    -ps * ps.log2()
                })
                .collect();
            pairwise_sum(&parts) / norm
        })
        .collect();
    Ok(Some(terms))
}

/// Mean over explanations of the entropy terms of their own selections,
/// where each support's probability is its global selection frequency.
/// `None` when `K = 1`.
pub fn contrastivity(explanations: &[ExplanationRecord]) -> Result<Option<f64>> {
    Ok(contrastivity_terms(explanations)?.map(|t| mean(&t)))
}

/// Diagnostic only: entropy of the global selection frequencies over a pool
/// of `pool_size` supports, normalized to `[0, 1]` by `log2(pool_size)`.
pub fn pool_selection_entropy(explanations: &[ExplanationRecord], pool_size: usize) -> Option<f64> {
    if pool_size < 2 || explanations.is_empty() {
        return None;
    }
    let parts: Vec<f64> = selection_frequencies(explanations).values().map(|p| -p * p.log2()).collect();
    Some(pairwise_sum(&parts) / (pool_size as f64).log2())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub query: String,
    pub correctness: f64,
    pub continuity: Option<f64>,
    pub contrastivity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XaiMetricsReport {
    pub c_cor: f64,
    /// Absent when no continuity terms were computed.
    pub c_cty: Option<f64>,
    /// Absent for `K = 1`.
    pub c_cst: Option<f64>,
    pub k: usize,
    pub n: usize,
    pub per_sample: Vec<SampleMetrics>,
    /// Diagnostic selection entropy over the whole support pool; not one of
    /// the three headline metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_pool_entropy: Option<f64>,
}

/// Assembles the metrics report. `continuity` holds per-explanation terms in
/// the same order, if computed.
pub fn xai_metrics(
    explanations: &[ExplanationRecord],
    continuity: Option<&[f64]>,
    pool_size: usize,
) -> Result<XaiMetricsReport> {
    require_nonempty(explanations, "metrics")?;
    let k = shared_k(explanations)?;
    if let Some(c) = continuity {
        if c.len() != explanations.len() {
            return Err(Error::Validation(format!(
                "{} continuity terms for {} explanations",
                c.len(),
                explanations.len()
            )));
        }
    }
    let cor = explanations.iter().map(correctness_term).collect::<Result<Vec<_>>>()?;
    let cst = contrastivity_terms(explanations)?;
    let per_sample = explanations
        .iter()
        .enumerate()
        .map(|(i, e)| SampleMetrics {
            query: e.query_id.clone(),
            correctness: cor[i],
            continuity: continuity.map(|c| c[i]),
            contrastivity: cst.as_ref().map(|t| t[i]),
        })
        .collect();
    Ok(XaiMetricsReport {
        c_cor: mean(&cor),
        c_cty: continuity.map(mean),
        c_cst: cst.as_deref().map(mean),
        k,
        n: explanations.len(),
        per_sample,
        aux_pool_entropy: pool_selection_entropy(explanations, pool_size),
    })
}

pub fn write_explanations(explanations: &[ExplanationRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for e in explanations {
        text.push_str(&serde_json::to_string(e).map_err(|err| Error::json("explanation", err))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_explanations(path: &Path) -> Result<Vec<ExplanationRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e)))
        .collect()
}

// ---------------------------------------------------------------------------
// Report

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.2}"))
}

const STYLE: &str = "body{font-family:sans-serif}table{border-collapse:collapse}td{padding:4px;vertical-align:top}\
figure{position:relative;margin:0}figcaption{position:absolute;left:2px;bottom:2px;background:rgba(0,0,0,.6);\
color:#fff;font-size:12px;padding:1px 3px}img{display:block;width:128px;height:128px;image-rendering:pixelated}";

/// Writes `out_dir/index.html` and one PNG per shown tile under
/// `out_dir/panels/`. Each row is the query followed by its selected
/// supports, each captioned with its score.
pub fn render_report(
    explanations: &[ExplanationRecord],
    metrics: &XaiMetricsReport,
    tiles: &DatasetManifest,
    out_dir: &Path,
) -> Result<PathBuf> {
    let panels = out_dir.join("panels");
    fs::create_dir_all(&panels).map_err(|e| Error::io(&panels, e))?;
    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Explanations</title><style>{STYLE}</style></head><body>\n\
         <h1>Explanations</h1>\n<p>C_cor {} &middot; C_cty {} &middot; C_cst {} &middot; K {} &middot; N {}</p>\n<table>\n",
        fmt_opt(Some(metrics.c_cor)),
        fmt_opt(metrics.c_cty),
        fmt_opt(metrics.c_cst),
        metrics.k,
        metrics.n
    );
    let save = |tile: &Tile, name: &str| -> Result<()> {
        let path = panels.join(name);
        tile.pixels.save(&path).map_err(|e| Error::Image { path: path.clone(), source: e })
    };
    for (row, e) in explanations.iter().enumerate() {
        let query = tiles.require(&e.query_id)?;
        let name = format!("{row:04}_q.png");
        save(query, &name)?;
        let truth = e.true_class.as_deref().unwrap_or("?");
        let _ = write!(
            html,
            "<tr><td><figure><img src=\"panels/{name}\" alt=\"query\"><figcaption>query</figcaption></figure>\
             {}<br>pred {} / true {}</td>",
            escape(&e.query_id),
            escape(&e.predicted_class),
            escape(truth)
        );
        for (j, s) in e.selected.iter().enumerate() {
            let name = format!("{row:04}_s{j}.png");
            save(tiles.require(&s.support_id)?, &name)?;
            let _ = write!(
                html,
                "<td><figure><img src=\"panels/{name}\" alt=\"support\"><figcaption>sim {:.2}</figcaption></figure>{}<br>{}</td>",
                s.score,
                escape(&s.support_id),
                escape(&s.support_class)
            );
        }
        let sample = metrics.per_sample.iter().find(|m| m.query == e.query_id);
        let _ = write!(
            html,
            "<td>cor {}<br>cty {}<br>cst {}</td></tr>\n",
            fmt_opt(sample.map(|m| m.correctness)),
            fmt_opt(sample.and_then(|m| m.continuity)),
            fmt_opt(sample.and_then(|m| m.contrastivity))
        );
    }
    html.push_str("</table>\n</body></html>\n");
    let index = out_dir.join("index.html");
    fs::write(&index, html).map_err(|e| Error::io(&index, e))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sel(id: &str, class: &str, score: f64) -> SelectedSupport {
        SelectedSupport { support_id: id.into(), support_class: class.into(), score }
    }

    fn expl(query: &str, pred: &str, truth: &str, selected: Vec<SelectedSupport>) -> ExplanationRecord {
        ExplanationRecord { query_id: query.into(), selected, predicted_class: pred.into(), true_class: Some(truth.into()) }
    }

    fn rec(id: &str, class: &str, score: f64) -> SimilarityRecord {
        SimilarityRecord { query_id: "q".into(), support_id: id.into(), support_class: class.into(), score }
    }

    #[test]
    fn selection_crosses_classes() {
        let records = [rec("s3", "B", 0.07), rec("s1", "A", 0.9), rec("s2", "A", 0.5)];
        let top = top_k(&records, 3).unwrap();
        let ids: Vec<&str> = top.iter().map(|s| s.support_id.as_str()).collect();
        assert_eq!(ids, ["s1", "s2", "s3"]);
        assert!(top_k(&records, 4).is_err());
    }

    #[test]
    fn ties_break_by_support_id() {
        let records = [rec("b", "X", 0.5), rec("a", "Y", 0.5), rec("c", "X", 0.5)];
        let ids: Vec<String> = top_k(&records, 2).unwrap().into_iter().map(|s| s.support_id).collect();
        assert_eq!(ids, ["a", "b"]);
    }

    #[test]
    fn correctness_anchor_two_of_three() {
        let e = expl("q", "A", "A", vec![sel("s1", "A", 0.9), sel("s2", "A", 0.5), sel("s3", "B", 0.07)]);
        assert!((correctness(&[e]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let wrong = expl("q", "A", "B", vec![sel("s1", "A", 0.9)]);
        assert_eq!(correctness(&[wrong]).unwrap(), 0.0);
        assert!(correctness(&[]).is_err());
    }

    #[test]
    fn contrastivity_hand_example() {
        let es = [
            expl("q1", "A", "A", vec![sel("s1", "A", 0.9), sel("s2", "A", 0.8)]),
            expl("q2", "A", "A", vec![sel("s1", "A", 0.9), sel("s3", "A", 0.8)]),
        ];
        assert!((contrastivity(&es).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let single = [expl("q", "A", "A", vec![sel("s1", "A", 0.9)])];
        assert_eq!(contrastivity(&single).unwrap(), None);
        let mixed = [es[0].clone(), single[0].clone()];
        assert!(matches!(contrastivity(&mixed), Err(Error::Validation(_))));
    }

    #[test]
    fn continuity_set_arithmetic() {
        let a = expl("q", "A", "A", vec![sel("s1", "A", 0.9), sel("s2", "A", 0.8), sel("s3", "B", 0.1)]);
        let b = expl("q", "A", "A", vec![sel("s2", "A", 0.9), sel("s1", "A", 0.8), sel("s4", "B", 0.1)]);
        assert!((continuity_from_selections(&[a.clone()], &[b]).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(continuity_from_selections(&[a.clone()], &[a]).unwrap(), 1.0);
    }

    #[test]
    fn report_layout() {
        use crate::dataset::Role;
        use image::RgbImage;
        let ids = ["q1", "q2", "q3", "s1", "s2", "s3"];
        let tiles = DatasetManifest::new(
            ids.iter().map(|id| (Tile::new(*id, RgbImage::new(8, 8), Some("A".into()), 6.0), Role::Fewshot)),
        )
        .unwrap();
        let es: Vec<ExplanationRecord> = ["q1", "q2", "q3"]
            .iter()
            .map(|q| expl(q, "A", "A", vec![sel("s1", "A", 0.987), sel("s2", "A", 0.5), sel("s3", "A", 0.07)]))
            .collect();
        let metrics = xai_metrics(&es, None, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let index = render_report(&es, &metrics, &tiles, dir.path()).unwrap();
        let html = fs::read_to_string(index).unwrap();
        assert_eq!(html.matches("<tr>").count(), 3);
        assert_eq!(html.matches("<img").count(), 12);
        assert_eq!(html.matches("sim 0.99").count(), 3);
        assert_eq!(fs::read_dir(dir.path().join("panels")).unwrap().count(), 12);

        let empty = tempfile::tempdir().unwrap();
        let html = fs::read_to_string(render_report(&[], &metrics, &tiles, empty.path()).unwrap()).unwrap();
        assert!(html.contains("C_cor 1.00") && html.ends_with("</html>\n"));
    }
}
