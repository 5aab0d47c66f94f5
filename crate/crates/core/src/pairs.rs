//! Similar/dissimilar pair enumeration and balanced sampling.
//!
//! Only usable `base_train` tiles take part; few-shot and query tiles are
//! never paired here.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Role};
use crate::error::{Error, Result};
use crate::seed;

/// Pairs sampled per side for base training.
pub const PAIRS_PER_SIDE: usize = 10_000;

/// An unordered pair of tiles. `target` is 1 when both share a class.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PairSample {
    #[serde(rename = "a")]
    pub tile_a_id: String,
    #[serde(rename = "b")]
    pub tile_b_id: String,
    pub target: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairCounts {
    pub similar: usize,
    pub dissimilar: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub pairs: Vec<PairSample>,
    pub counts: PairCounts,
    pub seed: u64,
    /// Sizes of the pools the sample was drawn from.
    pub enumerated: PairCounts,
}

/// Every unordered within-class pair; `m(m-1)/2` per class of size `m`.
pub fn enumerate_similar_pairs(candidates: &DatasetManifest) -> Vec<PairSample> {
    similar_from_groups(&candidates.class_roster(Role::BaseTrain))
}

/// Every unordered cross-class pair; `Σ_{i<j} m_i m_j`.
pub fn enumerate_dissimilar_pairs(candidates: &DatasetManifest) -> Result<Vec<PairSample>> {
    dissimilar_from_groups(&candidates.class_roster(Role::BaseTrain))
}

pub(crate) fn similar_from_groups(groups: &BTreeMap<String, Vec<String>>) -> Vec<PairSample> {
    let total = groups.values().map(|g| g.len() * g.len().saturating_sub(1) / 2).sum();
    let mut pairs = Vec::with_capacity(total);
    for ids in groups.values() {
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                pairs.push(PairSample { tile_a_id: a.clone(), tile_b_id: b.clone(), target: 1 });
            }
        }
    }
    pairs
}

pub(crate) fn dissimilar_from_groups(groups: &BTreeMap<String, Vec<String>>) -> Result<Vec<PairSample>> {
    if groups.len() < 2 {
        return Err(Error::Validation(format!(
            "dissimilar pairs need at least two classes, found {}",
            groups.len()
        )));
    }
    let classes: Vec<&Vec<String>> = groups.values().collect();
    let mut pairs = Vec::new();
    for (i, left) in classes.iter().enumerate() {
        for right in &classes[i + 1..] {
            for a in left.iter() {
                for b in right.iter() {
                    pairs.push(PairSample { tile_a_id: a.clone(), tile_b_id: b.clone(), target: 0 });
                }
            }
        }
    }
    Ok(pairs)
}

/// Draws `n_per_side` pairs uniformly without replacement from each pool.
/// When a pool is smaller, both sides are truncated to the smaller pool so
/// the result stays balanced.
pub fn sample_balanced(
    similar: &[PairSample],
    dissimilar: &[PairSample],
    n_per_side: usize,
    seed: u64,
) -> Result<PairDataset> {
    if similar.is_empty() || dissimilar.is_empty() {
        return Err(Error::Validation(format!(
            "cannot balance pairs: {} similar, {} dissimilar",
            similar.len(),
            dissimilar.len()
        )));
    }
    let take = n_per_side.min(similar.len()).min(dissimilar.len());
    if take < n_per_side {
        log::warn!(
            "requested {n_per_side} pairs per side, only {take} available ({} similar, {} dissimilar)",
            similar.len(),
            dissimilar.len()
        );
    }
    let mut rng = seed::rng(seed);
    let mut pick = |pool: &[PairSample]| -> Vec<PairSample> {
        let mut idx = index::sample(&mut rng, pool.len(), take).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i].clone()).collect()
    };
    let mut pairs = pick(similar);
    pairs.extend(pick(dissimilar));
    Ok(PairDataset {
        pairs,
        counts: PairCounts { similar: take, dissimilar: take },
        seed,
        enumerated: PairCounts { similar: similar.len(), dissimilar: dissimilar.len() },
    })
}

/// Enumerates both pools from `candidates` and samples a balanced dataset.
pub fn build_pair_dataset(candidates: &DatasetManifest, n_per_side: usize, seed: u64) -> Result<PairDataset> {
    let groups = candidates.class_roster(Role::BaseTrain);
    let similar = similar_from_groups(&groups);
    let dissimilar = dissimilar_from_groups(&groups)?;
    sample_balanced(&similar, &dissimilar, n_per_side, seed)
}

impl PairDataset {
    /// Checks that every pair refers to a usable tile of `tiles` and that
    /// the targets agree with the labels.
    pub fn validate_against(&self, tiles: &DatasetManifest) -> Result<()> {
        for pair in &self.pairs {
            if pair.tile_a_id == pair.tile_b_id {
                return Err(Error::Validation(format!("self-pair on `{}`", pair.tile_a_id)));
            }
            let a = tiles.require(&pair.tile_a_id)?;
            let b = tiles.require(&pair.tile_b_id)?;
            for t in [a, b] {
                if t.excluded {
                    return Err(Error::Validation(format!("pair uses excluded tile `{}`", t.id)));
                }
            }
            let same = a.label.is_some() && a.label == b.label;
            if same != (pair.target == 1) {
                return Err(Error::Validation(format!(
                    "pair ({}, {}) has target {} but labels {:?} / {:?}",
                    a.id, b.id, pair.target, a.label, b.label
                )));
            }
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let lines: Vec<String> = self
            .pairs
            .iter()
            .map(|p| format!("{}\t{}\t{}", p.tile_a_id, p.tile_b_id, p.target))
            .collect();
        seed::fingerprint(lines.iter().map(|l| l.as_bytes()))
    }
}

// ---------------------------------------------------------------------------
// Persistence: JSON lines plus a JSON header.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairHeader {
    pub similar: usize,
    pub dissimilar: usize,
    pub seed: u64,
    pub enumerated_similar: usize,
    pub enumerated_dissimilar: usize,
}

/// Writes `stem.jsonl` and `stem.header.json`.
pub fn write_pairs(dataset: &PairDataset, jsonl: &Path, header: &Path) -> Result<()> {
    let file = fs::File::create(jsonl).map_err(|e| Error::io(jsonl, e))?;
    let mut out = BufWriter::new(file);
    for pair in &dataset.pairs {
        let line = serde_json::to_string(pair).map_err(|e| Error::json("pair", e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(jsonl, e))?;
    }
    out.flush().map_err(|e| Error::io(jsonl, e))?;
    let head = PairHeader {
        similar: dataset.counts.similar,
        dissimilar: dataset.counts.dissimilar,
        seed: dataset.seed,
        enumerated_similar: dataset.enumerated.similar,
        enumerated_dissimilar: dataset.enumerated.dissimilar,
    };
    let text = serde_json::to_string_pretty(&head).map_err(|e| Error::json("pair header", e))?;
    fs::write(header, text).map_err(|e| Error::io(header, e))
}

pub fn read_pairs(jsonl: &Path, header: &Path) -> Result<PairDataset> {
    let text = fs::read_to_string(header).map_err(|e| Error::io(header, e))?;
    let head: PairHeader = serde_json::from_str(&text).map_err(|e| Error::json(header.display().to_string(), e))?;
    let file = fs::File::open(jsonl).map_err(|e| Error::io(jsonl, e))?;
    let mut pairs = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(jsonl, e))?;
        if line.trim().is_empty() {
            continue;
        }
        pairs.push(serde_json::from_str(&line).map_err(|e| Error::json(jsonl.display().to_string(), e))?);
    }
    let dataset = PairDataset {
        pairs,
        counts: PairCounts { similar: head.similar, dissimilar: head.dissimilar },
        seed: head.seed,
        enumerated: PairCounts { similar: head.enumerated_similar, dissimilar: head.enumerated_dissimilar },
    };
    let similar = dataset.pairs.iter().filter(|p| p.target == 1).count();
    if similar != dataset.counts.similar || dataset.pairs.len() - similar != dataset.counts.dissimilar {
        return Err(Error::Validation(format!("{} disagrees with its header", jsonl.display())));
    }
    Ok(dataset)
}
