//! The five tile augmentation operators and candidate expansion.
//!
//! Every operator preserves the tile size. Exposed regions (rotated corners,
//! the margin around a crop window) are zero-filled, the same convention the
//! normalization padding uses.

use image::{Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{place_centered, DatasetManifest, Role, Tile};
use crate::error::{Error, Result};
use crate::seed;

pub const NOISE_MU: f64 = 0.0;
pub const NOISE_SIGMA: f64 = 25.0;
pub const CROP_FRACTION: f64 = 0.8;
/// Augmented variants per original tile. Six variants (five operators plus a
/// second rotation draw) give 13 × 7 = 91 candidates per class.
pub const VARIANTS_PER_TILE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Rotate,
    Hflip,
    Vflip,
    RotateNoise,
    Crop,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::Rotate,
        AugmentOp::Hflip,
        AugmentOp::Vflip,
        AugmentOp::RotateNoise,
        AugmentOp::Crop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::Rotate => "rotate",
            AugmentOp::Hflip => "hflip",
            AugmentOp::Vflip => "vflip",
            AugmentOp::RotateNoise => "rotate_noise",
            AugmentOp::Crop => "crop",
        }
    }

    /// Operator used for the `i`-th variant of a tile: the five operators in
    /// order, then cycling (the sixth variant is another rotation).
    pub fn for_variant(i: usize) -> AugmentOp {
        AugmentOp::ALL[i % AugmentOp::ALL.len()]
    }
}

/// A fully resolved augmentation: operator plus every random parameter it
/// consumes, so applying a spec is deterministic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub op: AugmentOp,
    /// Degrees, counter-clockwise, in `[0, 360)`.
    pub rotation_deg: f64,
    pub noise_mu: f64,
    /// In 8-bit pixel units.
    pub noise_sigma: f64,
    /// Side fraction kept by `crop`, in `(0, 1]`.
    pub crop_fraction: f64,
    /// Seeds the per-pixel noise and the crop window position.
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn new(op: AugmentOp) -> Self {
        AugmentationSpec {
            op,
            rotation_deg: 0.0,
            noise_mu: NOISE_MU,
            noise_sigma: NOISE_SIGMA,
            crop_fraction: CROP_FRACTION,
            seed: 0,
        }
    }

    /// Draws the random parameters of `op` from `rng`: a uniform angle in
    /// `[0, 360)` and a fresh seed for noise and crop placement.
    pub fn draw(op: AugmentOp, rng: &mut seed::Rng) -> Self {
        let rotation_deg = match op {
            AugmentOp::Rotate | AugmentOp::RotateNoise => rng.random_range(0.0..360.0),
            _ => 0.0,
        };
        AugmentationSpec {
            rotation_deg,
            seed: rng.random(),
            ..AugmentationSpec::new(op)
        }
    }

    /// 0° rotation; leaves every tile unchanged.
    pub fn identity() -> Self {
        AugmentationSpec::new(AugmentOp::Rotate)
    }
}

/// Applies one augmentation. The output has the input's size; the label and
/// provenance are inherited.
pub fn augment(tile: &Tile, spec: &AugmentationSpec) -> Result<Tile> {
    let pixels = augment_pixels(&tile.pixels, spec)?;
    Ok(Tile { pixels, ..tile.clone() })
}

pub fn augment_pixels(img: &RgbImage, spec: &AugmentationSpec) -> Result<RgbImage> {
    match spec.op {
        AugmentOp::Rotate => Ok(rotate(img, spec.rotation_deg)),
        AugmentOp::Hflip => Ok(image::imageops::flip_horizontal(img)),
        AugmentOp::Vflip => Ok(image::imageops::flip_vertical(img)),
        AugmentOp::RotateNoise => {
            let rotated = rotate(img, spec.rotation_deg);
            add_gaussian_noise(&rotated, spec.noise_mu, spec.noise_sigma, spec.seed)
        }
        AugmentOp::Crop => random_crop(img, spec.crop_fraction, spec.seed),
    }
}

/// Bilinear rotation about the image center with zero fill.
pub fn rotate(img: &RgbImage, degrees: f64) -> RgbImage {
    let angle = degrees.rem_euclid(360.0);
    if angle == 0.0 {
        return img.clone();
    }
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.to_radians().sin_cos();
    let max_x = w as f64 - 1.0;
    let max_y = h as f64 - 1.0;
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            // Inverse map: rotate the destination point back by -angle.
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cx + dx * cos - dy * sin;
            let sy = cy + dx * sin + dy * cos;
            const EPS: f64 = 1e-9;
            if sx < -EPS || sy < -EPS || sx > max_x + EPS || sy > max_y + EPS {
                continue;
            }
            let sx = sx.clamp(0.0, max_x);
            let sy = sy.clamp(0.0, max_y);
            out.put_pixel(x, y, bilinear(img, sx, sy));
        }
    }
    out
}

fn bilinear(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (w, h) = img.dimensions();
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let p00 = img.get_pixel(x0, y0).0;
    let p10 = img.get_pixel(x1, y0).0;
    let p01 = img.get_pixel(x0, y1).0;
    let p11 = img.get_pixel(x1, y1).0;
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = p00[c] as f64 * (1.0 - fx) + p10[c] as f64 * fx;
        let bottom = p01[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

/// Adds independent N(mu, sigma²) noise to every channel of every pixel,
/// rounding and clipping to `[0, 255]`.
pub fn add_gaussian_noise(img: &RgbImage, mu: f64, sigma: f64, seed: u64) -> Result<RgbImage> {
    let normal = Normal::new(mu, sigma)
        .map_err(|e| Error::Parameter(format!("noise distribution: {e}")))?;
    let mut rng = seed::rng(seed);
    let mut out = img.clone();
    for v in out.iter_mut() {
        let noisy = *v as f64 + normal.sample(&mut rng);
        *v = noisy.round().clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

/// Keeps a uniformly placed window of `fraction` × each side and re-centers
/// it on a zero canvas of the original size. No rescaling, so the ground
/// sample distance is unchanged.
pub fn random_crop(img: &RgbImage, fraction: f64, seed: u64) -> Result<RgbImage> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("crop_fraction {fraction} is outside (0, 1]")));
    }
    let (w, h) = img.dimensions();
    let cw = ((w as f64 * fraction).round() as u32).clamp(1, w.max(1));
    let ch = ((h as f64 * fraction).round() as u32).clamp(1, h.max(1));
    let mut rng = seed::rng(seed);
    let x0 = rng.random_range(0..=w - cw);
    let y0 = rng.random_range(0..=h - ch);
    let window = image::imageops::crop_imm(img, x0, y0, cw, ch).to_image();
    Ok(place_centered(&window, w, h))
}

/// Id given to the `i`-th augmented variant of `id`.
pub fn variant_id(id: &str, i: usize, op: AugmentOp) -> String {
    format!("{id}~{i}{}", op.name())
}

/// Expands tiles with `variants_per_tile` augmented copies each. The result
/// lists every original immediately followed by its variants.
pub fn expand_tiles(tiles: &[&Tile], variants_per_tile: usize, seed: u64) -> Result<Vec<Tile>> {
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(tiles.len() * (variants_per_tile + 1));
    for tile in tiles {
        out.push((*tile).clone());
        for i in 0..variants_per_tile {
            let op = AugmentOp::for_variant(i);
            let spec = AugmentationSpec::draw(op, &mut rng);
            let mut variant = augment(tile, &spec)?;
            variant.id = variant_id(&tile.id, i + 1, op);
            out.push(variant);
        }
    }
    Ok(out)
}

/// Expands every usable `base_train` tile into itself plus
/// `variants_per_tile` augmented variants. Tiles with other roles are kept
/// unchanged; excluded tiles are dropped.
pub fn expand_candidates(capped: &DatasetManifest, variants_per_tile: usize, seed: u64) -> Result<DatasetManifest> {
    let base: Vec<&Tile> = capped.usable(Role::BaseTrain).collect();
    let expanded = expand_tiles(&base, variants_per_tile, seed)?;
    let others = capped
        .entries()
        .filter(|(t, r)| *r != Role::BaseTrain && !t.excluded)
        .map(|(t, r)| (t.clone(), r));
    DatasetManifest::new(expanded.into_iter().map(|t| (t, Role::BaseTrain)).chain(others))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(seed: u64) -> RgbImage {
        let mut rng = seed::rng(seed);
        RgbImage::from_fn(32, 32, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    fn tile(id: &str, label: &str) -> Tile {
        Tile::new(id, textured(id.len() as u64), Some(label.into()), 6.0)
    }

    #[test]
    fn flips_are_involutions() {
        let t = tile("a", "x");
        for op in [AugmentOp::Hflip, AugmentOp::Vflip] {
            let spec = AugmentationSpec::new(op);
            let twice = augment(&augment(&t, &spec).unwrap(), &spec).unwrap();
            assert_eq!(twice.pixels, t.pixels);
        }
    }

    #[test]
    fn zero_rotation_is_identity() {
        let t = tile("a", "x");
        assert_eq!(augment(&t, &AugmentationSpec::identity()).unwrap().pixels, t.pixels);
        assert_eq!(rotate(&t.pixels, 360.0), t.pixels);
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        let img = RgbImage::from_fn(4, 4, |x, y| Rgb([(x * 10 + y) as u8, 0, 0]));
        let r = rotate(&img, 90.0);
        // Destination (x, y) samples source (cx + dx cos - dy sin, cy + dx sin + dy cos).
        assert_eq!(r.get_pixel(0, 0).0[0], img.get_pixel(3, 0).0[0]);
        assert_eq!(r.get_pixel(3, 3).0[0], img.get_pixel(0, 3).0[0]);
    }

    #[test]
    fn rotation_zero_fills_corners() {
        let img = RgbImage::from_pixel(32, 32, Rgb([200, 200, 200]));
        let r = rotate(&img, 45.0);
        assert_eq!(r.get_pixel(0, 0).0, [0, 0, 0]);
        assert_eq!(r.get_pixel(16, 16).0, [200, 200, 200]);
    }

    #[test]
    fn noise_matches_declared_gaussian() {
        let img = RgbImage::from_pixel(128, 128, Rgb([128, 128, 128]));
        let spec = AugmentationSpec { seed: 99, ..AugmentationSpec::new(AugmentOp::RotateNoise) };
        let out = augment_pixels(&img, &spec).unwrap();
        let n = out.as_raw().len() as f64;
        let mean = out.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = out.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - 128.0).abs() <= 1.0, "mean {mean}");
        assert!((var.sqrt() - 25.0).abs() <= 2.0, "std {}", var.sqrt());
    }

    #[test]
    fn crop_is_recentered_without_rescale() {
        let img = textured(3);
        let out = random_crop(&img, 0.5, 11).unwrap();
        assert_eq!(out.dimensions(), (32, 32));
        // 16×16 window centered: margins of 8 are black.
        assert_eq!(out.get_pixel(7, 20).0, [0, 0, 0]);
        assert_eq!(out.get_pixel(24, 20).0, [0, 0, 0]);
        assert_eq!(random_crop(&img, 1.0, 5).unwrap(), img);
    }

    #[test]
    fn crop_fraction_is_validated() {
        let t = tile("a", "x");
        for f in [0.0, -0.1, 1.5] {
            let spec = AugmentationSpec { crop_fraction: f, ..AugmentationSpec::new(AugmentOp::Crop) };
            assert!(matches!(augment(&t, &spec), Err(Error::Parameter(_))));
        }
    }

    #[test]
    fn expansion_counts_and_labels() {
        let entries: Vec<_> = (0..13)
            .map(|i| (tile(&format!("t{i}"), "s1"), Role::BaseTrain))
            .collect();
        let m = DatasetManifest::new(entries).unwrap();
        let expanded = expand_candidates(&m, VARIANTS_PER_TILE, 1).unwrap();
        assert_eq!(expanded.len(), 13 * 7);
        assert!(expanded.tiles().iter().all(|t| t.label.as_deref() == Some("s1")));
        assert_eq!(expanded, expand_candidates(&m, VARIANTS_PER_TILE, 1).unwrap());
        assert_eq!(expand_candidates(&m, 0, 1).unwrap(), m);
    }

    #[test]
    fn sixth_variant_is_a_second_rotation() {
        assert_eq!(AugmentOp::for_variant(5), AugmentOp::Rotate);
        let ops: Vec<_> = (0..5).map(AugmentOp::for_variant).collect();
        assert_eq!(ops, AugmentOp::ALL.to_vec());
    }
}
