use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{LineageEntry, ModelCheckpoint, TrainingStage};
use super::pair_loss_and_grad;
use crate::dataset::DatasetManifest;
use crate::error::{Error, Result};
use crate::nn::image_to_input;
use crate::nn::layers::FeatureMap;
use crate::nn::optim::Adam;
use crate::nn::{TowerKind, TowerSpec};
use crate::pairs::PairDataset;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    BinaryCrossEntropy,
    Contrastive { margin: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Train only the projection head of the lightweight tower.
    #[serde(default)]
    pub freeze_backbone: bool,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
}

fn default_loss() -> LossKind {
    LossKind::BinaryCrossEntropy
}

impl TrainingConfig {
    pub fn base() -> Self {
        TrainingConfig {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 42,
            freeze_backbone: false,
            loss: LossKind::BinaryCrossEntropy,
        }
    }

    pub fn refinement() -> Self {
        TrainingConfig { epochs: 50, learning_rate: 1e-4, ..TrainingConfig::base() }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter(format!(
                "epochs ({}) and batch_size ({}) must be at least 1",
                self.epochs, self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Parameter(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        seed::fingerprint([text.as_bytes()])
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig::base()
    }
}

/// Trains a fresh tower on balanced pairs. Weights are initialized from
/// `config.seed`; the run is bit-reproducible on a given machine.
pub fn train_base(
    pairs: &PairDataset,
    tiles: &DatasetManifest,
    spec: &TowerSpec,
    config: &TrainingConfig,
) -> Result<ModelCheckpoint> {
    let mut ckpt = ModelCheckpoint::initialize(spec.clone(), seed::derive_seed(config.seed, "init"));
    ckpt.seed = config.seed;
    train_base_from(ckpt, pairs, tiles, config)
}

/// Base training starting from given weights, e.g. after
/// [`ModelCheckpoint::load_backbone`].
pub fn train_base_from(
    mut init: ModelCheckpoint,
    pairs: &PairDataset,
    tiles: &DatasetManifest,
    config: &TrainingConfig,
) -> Result<ModelCheckpoint> {
    config.validate()?;
    pairs.validate_against(tiles)?;
    fit(&mut init, pairs, tiles, config, TrainingStage::Base)?;
    Ok(init)
}

/// Continues training a copy of `base` on few-shot support pairs. `base`
/// itself is left untouched.
pub fn refine(
    base: &ModelCheckpoint,
    support_pairs: &PairDataset,
    tiles: &DatasetManifest,
    config: &TrainingConfig,
) -> Result<ModelCheckpoint> {
    if support_pairs.pairs.is_empty() {
        return Err(Error::Validation("refinement needs at least one support pair".into()));
    }
    config.validate()?;
    support_pairs.validate_against(tiles)?;
    let mut ckpt = base.clone();
    fit(&mut ckpt, support_pairs, tiles, config, TrainingStage::Refine)?;
    Ok(ckpt)
}

fn fit(
    ckpt: &mut ModelCheckpoint,
    pairs: &PairDataset,
    tiles: &DatasetManifest,
    config: &TrainingConfig,
    stage: TrainingStage,
) -> Result<()> {
    if pairs.pairs.is_empty() {
        return Err(Error::Validation("no training pairs".into()));
    }
    // Convert each referenced tile once.
    let mut inputs: HashMap<&str, FeatureMap> = HashMap::new();
    for pair in &pairs.pairs {
        for id in [&pair.tile_a_id, &pair.tile_b_id] {
            if !inputs.contains_key(id.as_str()) {
                let tile = tiles.require(id)?;
                let side = ckpt.tower.input_size;
                if tile.pixels.dimensions() != (side, side) {
                    return Err(Error::Shape {
                        expected: format!("{side}×{side}×3 tile"),
                        got: format!("{}×{} for `{id}`", tile.pixels.width(), tile.pixels.height()),
                    });
                }
                inputs.insert(id.as_str(), image_to_input(&tile.pixels));
            }
        }
    }

    let trainable: Vec<bool> = ckpt
        .params
        .iter()
        .map(|t| !(config.freeze_backbone && ckpt.tower.kind == TowerKind::PretrainedLightweight) || t.name.starts_with("head."))
        .collect();
    let mut optimizer = Adam::new(&ckpt.params, config.learning_rate as f32);
    let mut rng = seed::rng(seed::derive_seed(config.seed, "shuffle"));
    let mut order: Vec<usize> = (0..pairs.pairs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut pair_visits = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            // Unique tiles of the batch, in first-appearance order.
            let mut slot: HashMap<&str, usize> = HashMap::new();
            let mut ids: Vec<&str> = Vec::new();
            for &p in batch {
                let pair = &pairs.pairs[p];
                for id in [pair.tile_a_id.as_str(), pair.tile_b_id.as_str()] {
                    slot.entry(id).or_insert_with(|| {
                        ids.push(id);
                        ids.len() - 1
                    });
                }
            }
            let mut caches = Vec::with_capacity(ids.len());
            let mut embeddings = Vec::with_capacity(ids.len());
            for id in &ids {
                let (out, cache) = ckpt.net.forward_cached(&ckpt.params, inputs[id].clone());
                embeddings.push(out.data.iter().map(|&v| v as f64).collect::<Vec<f64>>());
                caches.push((cache, out));
            }
            let mut d_emb = vec![vec![0.0f64; ckpt.tower.embedding_dim]; ids.len()];
            let scale = 1.0 / batch.len() as f64;
            for &p in batch {
                let pair = &pairs.pairs[p];
                let (ia, ib) = (slot[pair.tile_a_id.as_str()], slot[pair.tile_b_id.as_str()]);
                let (loss, grad) = pair_loss_and_grad(&embeddings[ia], &embeddings[ib], pair.target, config.loss)?;
                loss_sum += loss;
                for (j, g) in grad.iter().enumerate() {
                    d_emb[ia][j] += g * scale;
                    d_emb[ib][j] -= g * scale;
                }
            }
            pair_visits += batch.len();

            let mut grads: Vec<Vec<f32>> = ckpt.params.iter().map(|t| vec![0.0; t.len()]).collect();
            for ((cache, out), d) in caches.into_iter().zip(d_emb) {
                let dy = FeatureMap { data: d.iter().map(|&v| v as f32).collect(), ..out };
                ckpt.net.backward(&ckpt.params, &mut grads, cache, dy);
            }
            optimizer.step(&mut ckpt.params, &grads, &trainable);
        }
        let mean = loss_sum / pairs.pairs.len() as f64;
        log::info!("{stage:?} epoch {}/{}: mean loss {mean:.5}", epoch + 1, config.epochs);
        epoch_losses.push(mean);
    }

    ckpt.lineage.push(LineageEntry {
        stage,
        dataset_fingerprint: pairs.fingerprint(),
        config: config.clone(),
        epochs: config.epochs,
        epoch_losses,
        optimizer_steps: optimizer.steps(),
        pair_visits,
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Role, Tile};
    use crate::pairs::build_pair_dataset;
    use image::{Rgb, RgbImage};

    fn spec() -> TowerSpec {
        TowerSpec { input_size: 16, embedding_dim: 8, ..TowerSpec::shallow_cnn_compact() }
    }

    /// Two trivially separable classes: bright and dark tiles with jitter.
    fn toy() -> DatasetManifest {
        let mut entries = Vec::new();
        for i in 0..6u8 {
            let bright = RgbImage::from_fn(16, 16, |x, y| Rgb([200 + i * 5, 180 + (x as u8), 190 + (y as u8)]));
            let dark = RgbImage::from_fn(16, 16, |x, y| Rgb([10 + i * 3, (x as u8) * 2, (y as u8) * 2]));
            entries.push((Tile::new(format!("b{i}"), bright, Some("bright".into()), 6.0), Role::BaseTrain));
            entries.push((Tile::new(format!("d{i}"), dark, Some("dark".into()), 6.0), Role::BaseTrain));
        }
        DatasetManifest::new(entries).unwrap()
    }

    fn config(epochs: usize) -> TrainingConfig {
        TrainingConfig { epochs, batch_size: 8, learning_rate: 1e-2, seed: 7, ..TrainingConfig::base() }
    }

    #[test]
    fn loss_decreases_and_runs_repeat_exactly() {
        let tiles = toy();
        let pairs = build_pair_dataset(&tiles, 30, 1).unwrap();
        let a = train_base(&pairs, &tiles, &spec(), &config(8)).unwrap();
        let losses = &a.lineage[0].epoch_losses;
        assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
        let b = train_base(&pairs, &tiles, &spec(), &config(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_full_batch_epoch_is_one_pass() {
        let tiles = toy();
        let pairs = build_pair_dataset(&tiles, 30, 1).unwrap();
        let cfg = TrainingConfig { batch_size: pairs.pairs.len(), ..config(1) };
        let ckpt = train_base(&pairs, &tiles, &spec(), &cfg).unwrap();
        let entry = &ckpt.lineage[0];
        assert_eq!(entry.optimizer_steps, 1);
        assert_eq!(entry.pair_visits, pairs.pairs.len());
    }

    #[test]
    fn missing_tile_fails_before_training() {
        let tiles = toy();
        let mut pairs = build_pair_dataset(&tiles, 4, 1).unwrap();
        pairs.pairs[0].tile_b_id = "ghost".into();
        assert!(matches!(train_base(&pairs, &tiles, &spec(), &config(1)), Err(Error::UnknownTile(id)) if id == "ghost"));
    }

    #[test]
    fn refine_extends_lineage_without_touching_base() {
        let tiles = toy();
        let pairs = build_pair_dataset(&tiles, 10, 1).unwrap();
        let base = train_base(&pairs, &tiles, &spec(), &config(1)).unwrap();
        let snapshot = base.clone();
        let refined = refine(&base, &pairs, &tiles, &config(2)).unwrap();
        assert_eq!(base, snapshot);
        assert_eq!(refined.lineage.len(), 2);
        assert_eq!(refined.lineage[..1], base.lineage[..]);
        assert_eq!(refined.lineage[1].stage, TrainingStage::Refine);
        assert_ne!(refined.params(), base.params());

        let empty = PairDataset { pairs: vec![], ..pairs };
        assert!(refine(&base, &empty, &tiles, &config(1)).is_err());
    }

    #[test]
    fn frozen_backbone_trains_only_the_head() {
        let tiles = toy();
        let pairs = build_pair_dataset(&tiles, 10, 1).unwrap();
        let spec = TowerSpec { input_size: 16, embedding_dim: 8, ..TowerSpec::lightweight_compact() };
        let base = ModelCheckpoint::initialize(spec, 1);
        let cfg = TrainingConfig { freeze_backbone: true, ..config(1) };
        let tuned = refine(&base, &pairs, &tiles, &cfg).unwrap();
        for (a, b) in tuned.params().iter().zip(base.params()) {
            assert_eq!(a.data == b.data, !a.name.starts_with("head."), "{}", a.name);
        }
    }

    #[test]
    fn bad_config_is_rejected() {
        let tiles = toy();
        let pairs = build_pair_dataset(&tiles, 4, 1).unwrap();
        for cfg in [config(0), TrainingConfig { batch_size: 0, ..config(1) }, TrainingConfig { learning_rate: 0.0, ..config(1) }] {
            assert!(matches!(train_base(&pairs, &tiles, &spec(), &cfg), Err(Error::Parameter(_))));
        }
    }
}
