//! Feature-extractor towers.
//!
//! Two tower families are available: a shallow four-convolution CNN and a
//! lightweight inverted-residual backbone in the MobileNetV2 layout. Both
//! end in global average pooling and a dense projection to the embedding.

pub mod layers;
pub mod optim;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seed;
use layers::{Conv, Dense, Depthwise, FeatureMap, Layer, Network, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerKind {
    ShallowCnn,
    PretrainedLightweight,
}

impl TowerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TowerKind::ShallowCnn => "shallow_cnn",
            TowerKind::PretrainedLightweight => "pretrained_lightweight",
        }
    }
}

/// How the shallow tower halves spatial resolution after each convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Downsample {
    /// Stride-1 convolution followed by 2×2 max pooling.
    MaxPool,
    /// Stride-2 convolution; about 4× cheaper.
    StridedConv,
}

/// One stage of inverted-residual blocks: expansion factor, output
/// channels, repeat count and stride of the first block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Architecture {
    ShallowCnn {
        widths: Vec<usize>,
        downsample: Downsample,
    },
    InvertedResidual {
        stem: usize,
        stages: Vec<Stage>,
        head_channels: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerSpec {
    pub kind: TowerKind,
    pub embedding_dim: usize,
    /// Expected square input side in pixels.
    pub input_size: u32,
    pub architecture: Architecture,
}

impl TowerSpec {
    /// Four 3×3 convolutions of widths 32/64/128/256, each followed by ReLU
    /// and 2× max pooling, then a 128-d projection (~421K parameters).
    pub fn shallow_cnn() -> Self {
        TowerSpec {
            kind: TowerKind::ShallowCnn,
            embedding_dim: 128,
            input_size: crate::dataset::TILE_SIZE,
            architecture: Architecture::ShallowCnn {
                widths: vec![32, 64, 128, 256],
                downsample: Downsample::MaxPool,
            },
        }
    }

    /// Narrow, strided variant of the shallow tower sized for single-core
    /// CPU runs of the synthetic suite.
    pub fn shallow_cnn_compact() -> Self {
        TowerSpec {
            kind: TowerKind::ShallowCnn,
            embedding_dim: 32,
            input_size: crate::dataset::TILE_SIZE,
            architecture: Architecture::ShallowCnn {
                widths: vec![16, 32, 48, 64],
                downsample: Downsample::StridedConv,
            },
        }
    }

    /// MobileNetV2 layout (width 1.0), truncated before the classifier and
    /// projected to 128-d.
    pub fn lightweight() -> Self {
        let s = |expansion, channels, repeats, stride| Stage { expansion, channels, repeats, stride };
        TowerSpec {
            kind: TowerKind::PretrainedLightweight,
            embedding_dim: 128,
            input_size: crate::dataset::TILE_SIZE,
            architecture: Architecture::InvertedResidual {
                stem: 32,
                stages: vec![
                    s(1, 16, 1, 1),
                    s(6, 24, 2, 2),
                    s(6, 32, 3, 2),
                    s(6, 64, 4, 2),
                    s(6, 96, 3, 1),
                    s(6, 160, 3, 2),
                    s(6, 320, 1, 1),
                ],
                head_channels: 1280,
            },
        }
    }

    /// A few-block inverted-residual tower for quick runs and tests.
    pub fn lightweight_compact() -> Self {
        let s = |expansion, channels, repeats, stride| Stage { expansion, channels, repeats, stride };
        TowerSpec {
            kind: TowerKind::PretrainedLightweight,
            embedding_dim: 32,
            input_size: crate::dataset::TILE_SIZE,
            architecture: Architecture::InvertedResidual {
                stem: 8,
                stages: vec![s(1, 8, 1, 2), s(4, 16, 2, 2), s(4, 24, 2, 2)],
                head_channels: 64,
            },
        }
    }

    pub fn default_for(kind: TowerKind) -> Self {
        match kind {
            TowerKind::ShallowCnn => TowerSpec::shallow_cnn(),
            TowerKind::PretrainedLightweight => TowerSpec::lightweight(),
        }
    }

    /// Builds the layer graph and the (zero-initialized) parameter list.
    pub fn build(&self) -> (Network, Vec<Tensor>) {
        let mut b = Builder::default();
        match &self.architecture {
            Architecture::ShallowCnn { widths, downsample } => {
                let mut cin = 3;
                for (i, &w) in widths.iter().enumerate() {
                    let stride = match downsample {
                        Downsample::MaxPool => 1,
                        Downsample::StridedConv => 2,
                    };
                    let conv = b.conv(&format!("conv{}", i + 1), cin, w, 3, stride);
                    b.layers.push(conv);
                    b.layers.push(Layer::Relu);
                    if *downsample == Downsample::MaxPool {
                        b.layers.push(Layer::MaxPool2);
                    }
                    cin = w;
                }
                b.layers.push(Layer::GlobalAvgPool);
                let head = b.dense("head", cin, self.embedding_dim);
                b.layers.push(head);
            }
            Architecture::InvertedResidual { stem, stages, head_channels } => {
                let conv = b.conv("backbone.stem", 3, *stem, 3, 2);
                b.layers.push(conv);
                b.layers.push(Layer::Relu6);
                let mut cin = *stem;
                let mut block = 0;
                for stage in stages {
                    for r in 0..stage.repeats {
                        let stride = if r == 0 { stage.stride } else { 1 };
                        let name = format!("backbone.block{block}");
                        let body = b.inverted_residual(&name, cin, stage.channels, stage.expansion, stride);
                        if stride == 1 && cin == stage.channels {
                            b.layers.push(Layer::Residual(body));
                        } else {
                            b.layers.extend(body);
                        }
                        cin = stage.channels;
                        block += 1;
                    }
                }
                let conv = b.conv("backbone.head_conv", cin, *head_channels, 1, 1);
                b.layers.push(conv);
                b.layers.push(Layer::Relu6);
                b.layers.push(Layer::GlobalAvgPool);
                let head = b.dense("head", *head_channels, self.embedding_dim);
                b.layers.push(head);
            }
        }
        (Network { layers: b.layers }, b.params)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.build().1.iter().map(Tensor::len).sum()
    }

    /// He-normal weights, zero biases, seeded.
    pub fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let (_, mut params) = self.build();
        let mut rng = seed::rng(seed);
        for t in &mut params {
            if t.name.ends_with(".bias") {
                continue;
            }
            let fan_in: usize = t.shape[1..].iter().product();
            let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).expect("positive std");
            t.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        params
    }
}

#[derive(Default)]
struct Builder {
    layers: Vec<Layer>,
    params: Vec<Tensor>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>) -> usize {
        self.params.push(Tensor::zeros(name, shape));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Layer {
        let weight = self.push(format!("{name}.weight"), vec![cout, cin * kernel * kernel]);
        let bias = self.push(format!("{name}.bias"), vec![cout]);
        Layer::Conv(Conv { weight, bias, cin, cout, kernel, stride })
    }

    fn dense(&mut self, name: &str, nin: usize, nout: usize) -> Layer {
        let weight = self.push(format!("{name}.weight"), vec![nout, nin]);
        let bias = self.push(format!("{name}.bias"), vec![nout]);
        Layer::Dense(Dense { weight, bias, nin, nout })
    }

    fn inverted_residual(&mut self, name: &str, cin: usize, cout: usize, expansion: usize, stride: usize) -> Vec<Layer> {
        let hidden = cin * expansion;
        let mut body = Vec::new();
        if expansion != 1 {
            body.push(self.conv(&format!("{name}.expand"), cin, hidden, 1, 1));
            body.push(Layer::Relu6);
        }
        let weight = self.push(format!("{name}.depthwise.weight"), vec![hidden, 9]);
        let bias = self.push(format!("{name}.depthwise.bias"), vec![hidden]);
        body.push(Layer::Depthwise(Depthwise { weight, bias, channels: hidden, stride }));
        body.push(Layer::Relu6);
        body.push(self.conv(&format!("{name}.project"), hidden, cout, 1, 1));
        body
    }
}

/// `u8` HWC RGB → `f32` CHW in `[0, 1]`.
pub fn image_to_input(img: &image::RgbImage) -> FeatureMap {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    FeatureMap::from_vec(3, h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shallow_default_lands_near_reported_size() {
        let n = TowerSpec::shallow_cnn().trainable_param_count();
        // 896 + 18_496 + 73_856 + 295_168 + 32_896
        assert_eq!(n, 421_312);
    }

    #[test]
    fn lightweight_backbone_matches_mobilenet_v2_conv_stack() {
        let spec = TowerSpec::lightweight();
        let (net, params) = spec.build();
        let blocks = params.iter().filter(|t| t.name.ends_with(".depthwise.weight")).count();
        assert_eq!(blocks, 17);
        let residuals = net.layers.iter().filter(|l| matches!(l, Layer::Residual(_))).count();
        assert_eq!(residuals, 10);
        let out = net.forward(&spec.init_params(1), FeatureMap::zeros(3, 32, 32));
        assert_eq!(out.data.len(), 128);
    }

    #[test]
    fn init_is_seeded() {
        let spec = TowerSpec::shallow_cnn_compact();
        assert_eq!(spec.init_params(3), spec.init_params(3));
        assert_ne!(spec.init_params(3), spec.init_params(4));
    }
}
