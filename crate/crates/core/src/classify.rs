//! Turning query-vs-support similarity scores into class predictions, and
//! scoring those predictions.
//!
//! Two decision rules are provided:
//!
//! * **average**: the class whose supports have the highest mean score;
//! * **K-NN**: the majority class among the `K` highest-scoring supports.
//!
//! Both break ties the same way: the tied class holding the single highest
//! score wins, and if that is tied too, the lexicographically smallest label.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Tile};
use crate::error::{Error, Result};
use crate::fewshot::SupportSet;
use crate::siamese::{similarity, EmbeddingVector, ModelCheckpoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub query_id: String,
    pub support_id: String,
    pub support_class: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Avg,
    Knn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "query")]
    pub query_id: String,
    #[serde(rename = "pred")]
    pub predicted_class: String,
    #[serde(rename = "true")]
    pub true_class: Option<String>,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn_k: Option<usize>,
    /// Mean score per class (average rule) or vote count (K-NN).
    #[serde(rename = "aggregates")]
    pub class_aggregates: BTreeMap<String, f64>,
}

impl Prediction {
    pub fn with_truth(mut self, truth: Option<String>) -> Self {
        self.true_class = truth;
        self
    }

    pub fn is_correct(&self) -> bool {
        self.true_class.as_deref() == Some(self.predicted_class.as_str())
    }
}

/// Support tiles embedded once by one checkpoint.
#[derive(Debug, Clone)]
pub struct SupportGallery {
    entries: Vec<(String, String, EmbeddingVector)>,
}

impl SupportGallery {
    pub fn build(support: &SupportSet, tiles: &DatasetManifest, checkpoint: &ModelCheckpoint) -> Result<Self> {
        let mut entries = Vec::new();
        for (class, ids) in &support.members {
            for id in ids {
                let tile = tiles.require(id)?;
                entries.push((id.clone(), class.clone(), checkpoint.embed(tile)?));
            }
        }
        if entries.is_empty() {
            return Err(Error::Validation("support set is empty".into()));
        }
        Ok(SupportGallery { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn score(&self, query_id: &str, query: &EmbeddingVector) -> Result<Vec<SimilarityRecord>> {
        self.entries
            .iter()
            .map(|(id, class, emb)| {
                Ok(SimilarityRecord {
                    query_id: query_id.to_string(),
                    support_id: id.clone(),
                    support_class: class.clone(),
                    score: similarity(query, emb)?,
                })
            })
            .collect()
    }

    pub fn score_tile(&self, query: &Tile, checkpoint: &ModelCheckpoint) -> Result<Vec<SimilarityRecord>> {
        self.score(&query.id, &checkpoint.embed(query)?)
    }
}

/// One record per support tile, scored through the checkpoint's tower.
pub fn score_query(
    query: &Tile,
    support: &SupportSet,
    tiles: &DatasetManifest,
    checkpoint: &ModelCheckpoint,
) -> Result<Vec<SimilarityRecord>> {
    SupportGallery::build(support, tiles, checkpoint)?.score_tile(query, checkpoint)
}

fn require_nonempty(records: &[SimilarityRecord]) -> Result<&str> {
    records
        .first()
        .map(|r| r.query_id.as_str())
        .ok_or_else(|| Error::Validation("no similarity records to classify".into()))
}

/// Picks the class with the largest statistic, breaking exact ties by the
/// largest individual score, then by label.
fn decide(stat: &BTreeMap<String, f64>, best_score: &BTreeMap<String, f64>) -> String {
    let mut winner: Option<&String> = None;
    for class in stat.keys() {
        let better = match winner {
            None => true,
            Some(w) => {
                let (s, ws) = (stat[class], stat[w]);
                s > ws || (s == ws && best_score[class] > best_score[w])
            }
        };
        // Iteration is in label order, so equal candidates keep the first label.
        if better {
            winner = Some(class);
        }
    }
    winner.expect("at least one class").clone()
}

fn best_scores<'a>(records: impl Iterator<Item = &'a SimilarityRecord>) -> BTreeMap<String, f64> {
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for r in records {
        let e = best.entry(r.support_class.clone()).or_insert(f64::NEG_INFINITY);
        if r.score > *e {
            *e = r.score;
        }
    }
    best
}

/// Average rule: the class with the highest mean support score.
pub fn classify_avg(records: &[SimilarityRecord]) -> Result<Prediction> {
    let query = require_nonempty(records)?;
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = sums.entry(r.support_class.clone()).or_default();
        e.0 += r.score;
        e.1 += 1;
    }
    let means: BTreeMap<String, f64> = sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let predicted_class = decide(&means, &best_scores(records.iter()));
    Ok(Prediction {
        query_id: query.to_string(),
        predicted_class,
        true_class: None,
        method: Method::Avg,
        knn_k: None,
        class_aggregates: means,
    })
}

/// Records ordered by descending score, ties by support id.
pub fn ranked(records: &[SimilarityRecord]) -> Vec<&SimilarityRecord> {
    let mut sorted: Vec<&SimilarityRecord> = records.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.support_id.cmp(&b.support_id)));
    sorted
}

/// K-NN rule: majority class among the `k` best-scoring supports.
pub fn classify_knn(records: &[SimilarityRecord], k: usize) -> Result<Prediction> {
    let query = require_nonempty(records)?;
    if k == 0 || k > records.len() {
        return Err(Error::Range {
            what: "K",
            value: k as i64,
            range: format!("[1, {}]", records.len()),
        });
    }
    let top: Vec<&SimilarityRecord> = ranked(records).into_iter().take(k).collect();
    let mut votes: BTreeMap<String, f64> = BTreeMap::new();
    for r in &top {
        *votes.entry(r.support_class.clone()).or_default() += 1.0;
    }
    let predicted_class = decide(&votes, &best_scores(top.iter().copied()));
    Ok(Prediction {
        query_id: query.to_string(),
        predicted_class,
        true_class: None,
        method: Method::Knn,
        knn_k: Some(k),
        class_aggregates: votes,
    })
}

pub fn classify(records: &[SimilarityRecord], method: Method, k: usize) -> Result<Prediction> {
    match method {
        Method::Avg => classify_avg(records),
        Method::Knn => classify_knn(records, k),
    }
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of samples whose true class is this one.
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// The four metrics reported per run: macro precision/recall/F1 and accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Headline {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub classes: Vec<String>,
    pub per_class: BTreeMap<String, ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: Averages,
    /// Averages weighted by each class's true-sample count.
    #[serde(rename = "weighted")]
    pub weighted_avg: Averages,
    /// Fraction of correct predictions (support-weighted recall).
    pub weighted_accuracy: f64,
    /// `confusion[i][j]`: true class `i` predicted as class `j`.
    pub confusion: Vec<Vec<usize>>,
    pub n: usize,
}

impl ClassificationReport {
    pub fn headline(&self) -> Headline {
        Headline {
            precision: self.macro_avg.precision,
            recall: self.macro_avg.recall,
            f1: self.macro_avg.f1,
            accuracy: self.weighted_accuracy,
        }
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// One-vs-rest precision/recall/F1 over the union of true and predicted
/// classes. A class that is never predicted gets precision 0.
pub fn evaluate(predictions: &[Prediction]) -> Result<ClassificationReport> {
    let mut classes: Vec<String> = Vec::new();
    for p in predictions {
        let truth = p
            .true_class
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("prediction for `{}` has no true class", p.query_id)))?;
        classes.push(truth.clone());
        classes.push(p.predicted_class.clone());
    }
    classes.sort();
    classes.dedup();
    let at: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut confusion = vec![vec![0usize; classes.len()]; classes.len()];
    for p in predictions {
        let t = at[p.true_class.as_deref().expect("checked above")];
        confusion[t][at[p.predicted_class.as_str()]] += 1;
    }

    let n = predictions.len();
    let mut per_class = BTreeMap::new();
    let (mut macro_avg, mut weighted_avg) = (Averages::default(), Averages::default());
    for (i, class) in classes.iter().enumerate() {
        let tp = confusion[i][i];
        let predicted: usize = confusion.iter().map(|row| row[i]).sum();
        let support: usize = confusion[i].iter().sum();
        if predicted == 0 && support > 0 {
            log::warn!("class `{class}` is never predicted; its precision is set to 0");
        }
        let precision = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        let m = ClassMetrics { precision, recall, f1: f1(precision, recall), support };
        let k = classes.len() as f64;
        macro_avg.precision += precision / k;
        macro_avg.recall += recall / k;
        macro_avg.f1 += m.f1 / k;
        if n > 0 {
            let w = support as f64 / n as f64;
            weighted_avg.precision += precision * w;
            weighted_avg.recall += recall * w;
            weighted_avg.f1 += m.f1 * w;
        }
        per_class.insert(class.clone(), m);
    }
    let correct: usize = (0..classes.len()).map(|i| confusion[i][i]).sum();
    Ok(ClassificationReport {
        classes,
        per_class,
        macro_avg,
        weighted_avg,
        weighted_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        confusion,
        n,
    })
}

pub fn write_predictions(predictions: &[Prediction], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for p in predictions {
        let line = serde_json::to_string(p).map_err(|e| Error::json("prediction", e))?;
        writeln!(out, "{line}").expect("writing to a Vec cannot fail");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path.display().to_string(), e)))
        .collect()
}
