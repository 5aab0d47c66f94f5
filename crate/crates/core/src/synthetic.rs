//! Procedural canopy-like texture tiles for runs without field data.
//!
//! Each tile is a textured disc on a black background. Base classes differ
//! by pattern and get a random hue per tile; the unseen classes all share
//! one pattern and differ only by a fixed hue, so a tower trained to ignore
//! color has to be refined before it can tell them apart.

use image::{Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, Role, Source, Tile, TARGET_GSD_CM};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Blob,
    Stripe,
    Ring,
    Speckle,
    Checker,
    Crosshatch,
}

impl Pattern {
    pub const BASE: [Pattern; 5] = [Pattern::Blob, Pattern::Stripe, Pattern::Ring, Pattern::Speckle, Pattern::Checker];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Blob => "blob",
            Pattern::Stripe => "stripe",
            Pattern::Ring => "ring",
            Pattern::Speckle => "speckle",
            Pattern::Checker => "checker",
            Pattern::Crosshatch => "crosshatch",
        }
    }
}

/// Tile color: either drawn per tile or fixed (with a little jitter).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Hue {
    /// Uniform in `[lo, hi)` degrees.
    Range { lo: f64, hi: f64 },
    Fixed { degrees: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureClass {
    pub label: String,
    pub pattern: Pattern,
    pub hue: Hue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tile_size: u32,
    /// Training tiles per base class.
    pub base_per_class: usize,
    /// Held-out query tiles per base class.
    pub heldout_per_class: usize,
    /// Few-shot pool tiles per unseen class.
    pub unseen_per_class: usize,
    /// Hue band base-class tiles are drawn from.
    pub base_hue: (f64, f64),
    pub unseen_hues: Vec<f64>,
    /// Standard deviation of additive pixel noise, in 8-bit units.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            tile_size: 32,
            base_per_class: 13,
            heldout_per_class: 8,
            unseen_per_class: 12,
            base_hue: (100.0, 130.0),
            unseen_hues: vec![100.0, 115.0, 130.0],
            noise_sigma: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn base_classes(&self) -> Vec<TextureClass> {
        Pattern::BASE
            .iter()
            .map(|&p| TextureClass {
                label: p.name().to_string(),
                pattern: p,
                hue: Hue::Range { lo: self.base_hue.0, hi: self.base_hue.1 },
            })
            .collect()
    }

    pub fn unseen_classes(&self) -> Vec<TextureClass> {
        self.unseen_hues
            .iter()
            .map(|&h| TextureClass {
                label: format!("crosshatch_h{:03}", h.round() as i64),
                pattern: Pattern::Crosshatch,
                hue: Hue::Fixed { degrees: h },
            })
            .collect()
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Pattern intensity in `[0, 1]` at `(x, y)` in `[-1, 1]²`.
struct Field {
    pattern: Pattern,
    freq: f64,
    angle: f64,
    phase: f64,
    blobs: Vec<(f64, f64, f64)>,
    speckles: Vec<(f64, f64)>,
}

impl Field {
    fn draw(pattern: Pattern, rng: &mut Rng) -> Self {
        let blobs = (0..rng.random_range(3..6))
            .map(|_| (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(0.15..0.3)))
            .collect();
        let speckles = (0..rng.random_range(25..40))
            .map(|_| (rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9)))
            .collect();
        Field {
            pattern,
            freq: match pattern {
                Pattern::Stripe => rng.random_range(1.6..2.0),
                Pattern::Ring => rng.random_range(3.6..4.2),
                Pattern::Checker => rng.random_range(3.8..4.4),
                _ => rng.random_range(2.5..3.5),
            },
            angle: rng.random_range(0.0..std::f64::consts::PI),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            blobs,
            speckles,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        use std::f64::consts::PI;
        let (s, c) = self.angle.sin_cos();
        let u = x * c + y * s;
        let v = -x * s + y * c;
        let wave = |t: f64| if (PI * self.freq * t + self.phase).sin() > 0.0 { 1.0 } else { 0.0 };
        match self.pattern {
            Pattern::Blob => self
                .blobs
                .iter()
                .map(|&(bx, by, r)| (-((x - bx).powi(2) + (y - by).powi(2)) / (2.0 * r * r)).exp())
                .fold(0.0, f64::max),
            Pattern::Stripe => wave(u),
            Pattern::Ring => wave((x * x + y * y).sqrt() * 1.5),
            Pattern::Speckle => {
                let near = self.speckles.iter().any(|&(sx, sy)| (x - sx).powi(2) + (y - sy).powi(2) < 0.012);
                if near { 1.0 } else { 0.0 }
            }
            Pattern::Checker => {
                let a = (self.freq * u / 2.0).floor() as i64;
                let b = (self.freq * v / 2.0).floor() as i64;
                if (a + b).rem_euclid(2) == 0 { 1.0 } else { 0.15 }
            }
            Pattern::Crosshatch => wave(u).max(wave(v)),
        }
    }
}

/// Renders one tile of `class`.
pub fn render_tile(class: &TextureClass, size: u32, noise_sigma: f64, rng: &mut Rng) -> RgbImage {
    let field = Field::draw(class.pattern, rng);
    let hue = match class.hue {
        Hue::Range { lo, hi } => rng.random_range(lo..hi),
        Hue::Fixed { degrees } => degrees + rng.random_range(-3.0..3.0),
    };
    let color = hsv_to_rgb(hue, rng.random_range(0.75..0.95), rng.random_range(0.8..1.0));
    let (cx, cy) = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let radius = rng.random_range(0.75..0.95);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    let half = size as f64 / 2.0;
    RgbImage::from_fn(size, size, |px, py| {
        let x = (px as f64 + 0.5 - half) / half;
        let y = (py as f64 + 0.5 - half) / half;
        let inside = (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius;
        let level = if inside { 0.25 + 0.75 * field.at(x - cx, y - cy) } else { 0.0 };
        let jitter = noise.sample(rng);
        Rgb(color.map(|c| (c * level * 255.0 + jitter).round().clamp(0.0, 255.0) as u8))
    })
}

fn push_class(
    entries: &mut Vec<(Tile, Role)>,
    class: &TextureClass,
    counts: &[(Role, usize)],
    spec: &SyntheticSpec,
    rng: &mut Rng,
) {
    for &(role, n) in counts {
        for i in 0..n {
            let id = format!("{}_{}{i:02}", class.label, role.as_str());
            let pixels = render_tile(class, spec.tile_size, spec.noise_sigma, rng);
            let tile = Tile::new(id, pixels, Some(class.label.clone()), TARGET_GSD_CM).with_source(Source::Synthetic);
            entries.push((tile, role));
        }
    }
}

/// Base classes as `base_train` plus held-out `query` tiles, and the unseen
/// classes as the `fewshot` pool.
pub fn generate(spec: &SyntheticSpec) -> Result<DatasetManifest> {
    if spec.tile_size < 8 {
        return Err(Error::Parameter(format!("tile_size {} is below 8", spec.tile_size)));
    }
    let mut rng = seed::rng(seed::derive_seed(spec.seed, "synthetic"));
    let mut entries = Vec::new();
    for class in spec.base_classes() {
        let counts = [(Role::BaseTrain, spec.base_per_class), (Role::Query, spec.heldout_per_class)];
        push_class(&mut entries, &class, &counts, spec, &mut rng);
    }
    for class in spec.unseen_classes() {
        push_class(&mut entries, &class, &[(Role::Fewshot, spec.unseen_per_class)], spec, &mut rng);
    }
    DatasetManifest::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_determinism() {
        let spec = SyntheticSpec { tile_size: 16, ..SyntheticSpec::default() };
        let m = generate(&spec).unwrap();
        assert_eq!(m.class_roster(Role::BaseTrain).len(), 5);
        assert!(m.class_roster(Role::BaseTrain).values().all(|ids| ids.len() == 13));
        assert_eq!(m.class_roster(Role::Fewshot).len(), 3);
        assert!(m.tiles().iter().all(|t| t.pixels.dimensions() == (16, 16)));
        assert_eq!(m.fingerprint(), generate(&spec).unwrap().fingerprint());
    }

    #[test]
    fn corners_are_background() {
        let mut rng = seed::rng(0);
        let class = TextureClass { label: "x".into(), pattern: Pattern::Blob, hue: Hue::Range { lo: 0.0, hi: 360.0 } };
        let img = render_tile(&class, 32, 0.0, &mut rng);
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
    }

    #[test]
    fn primary_hues() {
        let red = hsv_to_rgb(0.0, 1.0, 1.0);
        let green = hsv_to_rgb(120.0, 1.0, 1.0);
        assert_eq!(red, [1.0, 0.0, 0.0]);
        assert_eq!(green, [0.0, 1.0, 0.0]);
    }
}
