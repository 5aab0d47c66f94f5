use std::collections::HashMap;
use std::fs;
use std::path::Path;

use image::RgbImage;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{EmbeddingVector, TrainingConfig};
use crate::dataset::Tile;
use crate::error::{Error, Result};
use crate::nn::layers::{Network, Tensor};
use crate::nn::{image_to_input, TowerKind, TowerSpec};
use crate::seed;

pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const SIDECAR_FILE: &str = "model.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingStage {
    Base,
    Refine,
}

/// One training run applied to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub stage: TrainingStage,
    pub dataset_fingerprint: String,
    pub config: TrainingConfig,
    pub epochs: usize,
    /// Mean training loss of every epoch, in order.
    pub epoch_losses: Vec<f64>,
    pub optimizer_steps: usize,
    pub pair_visits: usize,
}

/// A tower specification, its single (shared) parameter set and the record
/// of how those parameters were produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub tower: TowerSpec,
    pub lineage: Vec<LineageEntry>,
    pub seed: u64,
    pub(crate) params: Vec<Tensor>,
    pub(crate) net: Network,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    tower: TowerKind,
    embedding_dim: usize,
    lineage: Vec<LineageEntry>,
    seed: u64,
    spec: TowerSpec,
}

impl ModelCheckpoint {
    /// Freshly initialized (untrained) weights.
    pub fn initialize(tower: TowerSpec, seed: u64) -> Self {
        let params = tower.init_params(seed);
        let (net, _) = tower.build();
        ModelCheckpoint { tower, lineage: Vec::new(), seed, params, net }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces every `backbone.*` tensor with the same-named tensor from a
    /// safetensors file, e.g. weights pretrained on a natural-image corpus.
    pub fn load_backbone(&mut self, path: &Path) -> Result<usize> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let file = SafeTensors::deserialize(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut loaded = 0;
        for tensor in self.params.iter_mut().filter(|t| t.name.starts_with("backbone.")) {
            let view = file
                .tensor(&tensor.name)
                .map_err(|e| Error::Checkpoint(format!("backbone tensor `{}`: {e}", tensor.name)))?;
            tensor.data = decode(&tensor.name, &tensor.shape, &view)?;
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn embed_image(&self, img: &RgbImage) -> Result<EmbeddingVector> {
        let side = self.tower.input_size;
        if img.dimensions() != (side, side) {
            return Err(Error::Shape {
                expected: format!("{side}×{side}×3 tile"),
                got: format!("{}×{}×3", img.width(), img.height()),
            });
        }
        let out = self.net.forward(&self.params, image_to_input(img));
        Ok(EmbeddingVector::new(out.data.iter().map(|&v| v as f64).collect()))
    }

    /// Embeds a tile in inference mode. Deterministic for a fixed checkpoint.
    pub fn embed(&self, tile: &Tile) -> Result<EmbeddingVector> {
        self.embed_image(&tile.pixels)
    }

    /// Serialized weight payload (safetensors bytes).
    pub fn weight_bytes(&self) -> Result<Vec<u8>> {
        let raw: Vec<(String, Vec<usize>, Vec<u8>)> = self
            .params
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone(), t.data.iter().flat_map(|v| v.to_le_bytes()).collect()))
            .collect();
        let views = raw
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        safetensors::tensor::serialize(views, None::<HashMap<String, String>>)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn weights_fingerprint(&self) -> Result<String> {
        let bytes = self.weight_bytes()?;
        Ok(seed::fingerprint([bytes.as_slice()]))
    }

    /// Writes `dir/weights.safetensors` and `dir/model.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights = dir.join(WEIGHTS_FILE);
        fs::write(&weights, self.weight_bytes()?).map_err(|e| Error::io(&weights, e))?;
        let sidecar = Sidecar {
            tower: self.tower.kind,
            embedding_dim: self.tower.embedding_dim,
            lineage: self.lineage.clone(),
            seed: self.seed,
            spec: self.tower.clone(),
        };
        let path = dir.join(SIDECAR_FILE);
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json("model sidecar", e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(SIDECAR_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if sidecar.tower != sidecar.spec.kind || sidecar.embedding_dim != sidecar.spec.embedding_dim {
            return Err(Error::Checkpoint(format!("{} is internally inconsistent", path.display())));
        }
        let weights = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
        let file = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", weights.display())))?;
        let (net, mut params) = sidecar.spec.build();
        for tensor in &mut params {
            let view = file
                .tensor(&tensor.name)
                .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", tensor.name)))?;
            tensor.data = decode(&tensor.name, &tensor.shape, &view)?;
        }
        Ok(ModelCheckpoint {
            tower: sidecar.spec,
            lineage: sidecar.lineage,
            seed: sidecar.seed,
            params,
            net,
        })
    }
}

fn decode(name: &str, shape: &[usize], view: &TensorView<'_>) -> Result<Vec<f32>> {
    if view.dtype() != Dtype::F32 || view.shape() != shape {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}`: expected f32 {shape:?}, found {:?} {:?}",
            view.dtype(),
            view.shape()
        )));
    }
    Ok(view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}
