//! Canopy tiles, the dataset manifest, and tile normalization.
//!
//! A [`DatasetManifest`] is an immutable, ordered collection of [`Tile`]s
//! together with the role each tile plays in the workflow. Derived manifests
//! (capped, augmented, normalized) are always new values.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Side length every tile is brought to before it reaches a model.
pub const TILE_SIZE: u32 = 128;

/// Working resolution of the UAV orthomosaic, in centimeters per pixel.
pub const TARGET_GSD_CM: f64 = 6.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Uav,
    Benchmark,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    BaseTrain,
    Fewshot,
    Query,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::BaseTrain => "base_train",
            Role::Fewshot => "fewshot",
            Role::Query => "query",
        }
    }
}

/// One canopy cutout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub id: String,
    pub pixels: RgbImage,
    /// `None` for query-only tiles.
    pub label: Option<String>,
    /// Ground sample distance in centimeters per pixel.
    pub gsd_cm: f64,
    pub source: Source,
    /// Set during data cleaning; excluded tiles never reach pairs or supports.
    pub excluded: bool,
}

impl Tile {
    pub fn new(id: impl Into<String>, pixels: RgbImage, label: Option<String>, gsd_cm: f64) -> Self {
        Tile {
            id: id.into(),
            pixels,
            label,
            gsd_cm,
            source: Source::Uav,
            excluded: false,
        }
    }

    pub fn with_source(mut self, source: Source) -> Self {
        self.source = source;
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.pixels.dimensions() == (TILE_SIZE, TILE_SIZE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    tiles: Vec<Tile>,
    roles: BTreeMap<String, Role>,
    index: BTreeMap<String, usize>,
}

impl DatasetManifest {
    /// Builds a manifest from `(tile, role)` entries, rejecting duplicate ids
    /// and non-positive ground sample distances.
    pub fn new(entries: impl IntoIterator<Item = (Tile, Role)>) -> Result<Self> {
        let mut tiles = Vec::new();
        let mut roles = BTreeMap::new();
        let mut index = BTreeMap::new();
        for (tile, role) in entries {
            if !(tile.gsd_cm > 0.0) {
                return Err(Error::Validation(format!(
                    "tile `{}` has non-positive gsd_cm {}",
                    tile.id, tile.gsd_cm
                )));
            }
            if index.insert(tile.id.clone(), tiles.len()).is_some() {
                return Err(Error::DuplicateTile(tile.id));
            }
            roles.insert(tile.id.clone(), role);
            tiles.push(tile);
        }
        Ok(DatasetManifest { tiles, roles, index })
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Tile> {
        self.index.get(id).map(|&i| &self.tiles[i])
    }

    pub fn require(&self, id: &str) -> Result<&Tile> {
        self.get(id).ok_or_else(|| Error::UnknownTile(id.to_string()))
    }

    pub fn role(&self, id: &str) -> Option<Role> {
        self.roles.get(id).copied()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&Tile, Role)> {
        self.tiles.iter().map(move |t| (t, self.roles[&t.id]))
    }

    /// Non-excluded tiles with the given role, in manifest order.
    pub fn usable(&self, role: Role) -> impl Iterator<Item = &Tile> {
        self.entries()
            .filter(move |(t, r)| *r == role && !t.excluded)
            .map(|(t, _)| t)
    }

    /// Class label → ids of the usable, labeled tiles carrying that role.
    /// Classes are ordered by label, ids by manifest order.
    pub fn class_roster(&self, role: Role) -> BTreeMap<String, Vec<String>> {
        let mut roster: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for tile in self.usable(role) {
            if let Some(label) = &tile.label {
                roster.entry(label.clone()).or_default().push(tile.id.clone());
            }
        }
        roster
    }

    /// A new manifest holding only the tiles whose id satisfies `keep`.
    pub fn filter(&self, mut keep: impl FnMut(&Tile, Role) -> bool) -> DatasetManifest {
        let entries: Vec<_> = self
            .entries()
            .filter(|(t, r)| keep(t, *r))
            .map(|(t, r)| (t.clone(), r))
            .collect();
        DatasetManifest::new(entries).expect("subset of a valid manifest is valid")
    }

    /// Merges two manifests. Ids must not collide.
    pub fn merged(&self, other: &DatasetManifest) -> Result<DatasetManifest> {
        let entries = self
            .entries()
            .chain(other.entries())
            .map(|(t, r)| (t.clone(), r));
        DatasetManifest::new(entries)
    }

    /// Stable content fingerprint over ids, labels, roles and pixels.
    pub fn fingerprint(&self) -> String {
        let mut chunks: Vec<Vec<u8>> = Vec::with_capacity(self.tiles.len() * 4);
        for (tile, role) in self.entries() {
            chunks.push(tile.id.as_bytes().to_vec());
            chunks.push(tile.label.clone().unwrap_or_default().into_bytes());
            chunks.push(role.as_str().as_bytes().to_vec());
            chunks.push(tile.pixels.as_raw().clone());
        }
        seed::fingerprint(chunks.iter().map(Vec::as_slice))
    }
}

// ---------------------------------------------------------------------------
// On-disk manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub tiles: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub label: Option<String>,
    pub gsd_cm: f64,
    pub role: Role,
    #[serde(default)]
    pub excluded: bool,
    #[serde(default = "default_source")]
    pub source: Source,
}

fn default_source() -> Source {
    Source::Uav
}

/// Loads every tile listed in `manifest_file`. Relative image paths resolve
/// against `root` (normally the manifest's own directory).
pub fn ingest_tiles(root: &Path, manifest_file: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(manifest_file).map_err(|e| Error::io(manifest_file, e))?;
    let file: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::json(manifest_file.display().to_string(), e))?;

    let mut seen = HashSet::new();
    for entry in &file.tiles {
        if !seen.insert(entry.id.as_str()) {
            return Err(Error::DuplicateTile(entry.id.clone()));
        }
    }

    let mut entries = Vec::with_capacity(file.tiles.len());
    for entry in file.tiles {
        let path = resolve(root, &entry.path);
        let pixels = load_rgb(&path)?;
        let tile = Tile {
            id: entry.id,
            pixels,
            label: entry.label,
            gsd_cm: entry.gsd_cm,
            source: entry.source,
            excluded: entry.excluded,
        };
        entries.push((tile, entry.role));
    }
    DatasetManifest::new(entries)
}

/// Convenience wrapper: ingest with paths relative to the manifest's directory.
pub fn ingest_manifest(manifest_file: &Path) -> Result<DatasetManifest> {
    let root = manifest_file.parent().unwrap_or(Path::new("."));
    ingest_tiles(root, manifest_file)
}

fn resolve(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

pub(crate) fn load_rgb(path: &Path) -> Result<RgbImage> {
    if !path.is_file() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

/// Writes every tile as a PNG under `dir/tiles/` and the manifest as
/// `dir/manifest.json`. Returns the manifest path.
pub fn write_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    let tiles_dir = dir.join("tiles");
    fs::create_dir_all(&tiles_dir).map_err(|e| Error::io(&tiles_dir, e))?;
    let mut file = ManifestFile { tiles: Vec::with_capacity(manifest.len()) };
    for (i, (tile, role)) in manifest.entries().enumerate() {
        let name = format!("{i:05}_{}.png", sanitize(&tile.id));
        let path = tiles_dir.join(&name);
        tile.pixels.save(&path).map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?;
        file.tiles.push(ManifestEntry {
            id: tile.id.clone(),
            path: format!("tiles/{name}"),
            label: tile.label.clone(),
            gsd_cm: tile.gsd_cm,
            role,
            excluded: tile.excluded,
            source: tile.source,
        });
    }
    let out = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&file).map_err(|e| Error::json("manifest", e))?;
    fs::write(&out, text).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect()
}

// ---------------------------------------------------------------------------
// Normalization

/// What normalization will do to a tile of a given size and resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormalizationPlan {
    /// Size after resampling; equals the input size when no resampling occurs.
    pub resampled: (u32, u32),
    /// Pixels removed (negative) or added (positive) on each side:
    /// left, top, right, bottom.
    pub left: i64,
    pub top: i64,
    pub right: i64,
    pub bottom: i64,
}

impl NormalizationPlan {
    pub fn resamples(&self, input: (u32, u32)) -> bool {
        self.resampled != input
    }
}

pub fn plan_normalization(
    (width, height): (u32, u32),
    gsd_cm: f64,
    target_gsd_cm: f64,
    target_size: u32,
) -> Result<NormalizationPlan> {
    if width == 0 || height == 0 {
        return Err(Error::Normalization("zero-area tile".into()));
    }
    if !(gsd_cm > 0.0) || !(target_gsd_cm > 0.0) {
        return Err(Error::Normalization(format!(
            "ground sample distances must be positive (got {gsd_cm} -> {target_gsd_cm})"
        )));
    }
    if target_size == 0 {
        return Err(Error::Normalization("target size must be positive".into()));
    }
    let scale = gsd_cm / target_gsd_cm;
    let resampled = if (scale - 1.0).abs() < 1e-12 {
        (width, height)
    } else {
        let w = ((width as f64) * scale).round().max(1.0) as u32;
        let h = ((height as f64) * scale).round().max(1.0) as u32;
        (w, h)
    };
    let (left, right) = split_margin(target_size as i64 - resampled.0 as i64);
    let (top, bottom) = split_margin(target_size as i64 - resampled.1 as i64);
    Ok(NormalizationPlan { resampled, left, top, right, bottom })
}

/// Splits a signed margin into (before, after). Whether padding or cropping,
/// the odd pixel lands after (bottom/right).
fn split_margin(total: i64) -> (i64, i64) {
    let before = if total >= 0 { total / 2 } else { -((-total) / 2) };
    (before, total - before)
}

/// Resamples a tile to `target_gsd_cm` (bilinear) and center-crops or
/// zero-pads it to `target_size`².
pub fn normalize_tile(tile: &Tile, target_gsd_cm: f64, target_size: u32) -> Result<Tile> {
    let dims = tile.pixels.dimensions();
    let plan = plan_normalization(dims, tile.gsd_cm, target_gsd_cm, target_size)?;
    let resampled = if plan.resamples(dims) {
        imageops::resize(&tile.pixels, plan.resampled.0, plan.resampled.1, FilterType::Triangle)
    } else {
        tile.pixels.clone()
    };
    let pixels = place_centered(&resampled, target_size, target_size);
    Ok(Tile {
        pixels,
        gsd_cm: target_gsd_cm,
        ..tile.clone()
    })
}

/// Center `src` on a zero canvas of `width`×`height`, cropping when `src` is
/// larger. Odd remainders fall on the bottom/right.
pub fn place_centered(src: &RgbImage, width: u32, height: u32) -> RgbImage {
    let (sw, sh) = src.dimensions();
    if (sw, sh) == (width, height) {
        return src.clone();
    }
    let (dx, _) = split_margin(width as i64 - sw as i64);
    let (dy, _) = split_margin(height as i64 - sh as i64);
    let mut out = RgbImage::new(width, height);
    for y in 0..height as i64 {
        let sy = y - dy;
        if sy < 0 || sy >= sh as i64 {
            continue;
        }
        for x in 0..width as i64 {
            let sx = x - dx;
            if sx < 0 || sx >= sw as i64 {
                continue;
            }
            out.put_pixel(x as u32, y as u32, *src.get_pixel(sx as u32, sy as u32));
        }
    }
    out
}

pub fn normalize_manifest(
    manifest: &DatasetManifest,
    target_gsd_cm: f64,
    target_size: u32,
) -> Result<DatasetManifest> {
    let entries = manifest
        .entries()
        .map(|(t, r)| Ok((normalize_tile(t, target_gsd_cm, target_size)?, r)))
        .collect::<Result<Vec<_>>>()?;
    DatasetManifest::new(entries)
}

// ---------------------------------------------------------------------------
// Candidate capping

/// Keeps at most `per_class_cap` usable tiles of every `base_train` class,
/// sampled uniformly without replacement. Retained tiles keep manifest order.
/// Tiles of other roles pass through untouched.
pub fn cap_candidates(manifest: &DatasetManifest, per_class_cap: usize, seed: u64) -> Result<DatasetManifest> {
    cap_role(manifest, Role::BaseTrain, per_class_cap, seed)
}

/// [`cap_candidates`] for an arbitrary role; also used to cap the few-shot pool.
pub fn cap_role(manifest: &DatasetManifest, role: Role, per_class_cap: usize, seed: u64) -> Result<DatasetManifest> {
    if per_class_cap == 0 {
        return Err(Error::Parameter("per_class_cap must be at least 1".into()));
    }
    // Classes that exist only as excluded tiles are empty, not absent.
    let mut all_labels: BTreeMap<String, ()> = BTreeMap::new();
    for (tile, r) in manifest.entries() {
        if r == role {
            if let Some(l) = &tile.label {
                all_labels.insert(l.clone(), ());
            }
        }
    }
    let roster = manifest.class_roster(role);
    let mut rng = seed::rng(seed);
    let mut keep: HashSet<String> = HashSet::new();
    for label in all_labels.keys() {
        let ids = roster.get(label).map(Vec::as_slice).unwrap_or(&[]);
        if ids.is_empty() {
            return Err(Error::EmptyClass(label.clone()));
        }
        if ids.len() <= per_class_cap {
            keep.extend(ids.iter().cloned());
        } else {
            let mut picked = index::sample(&mut rng, ids.len(), per_class_cap).into_vec();
            picked.sort_unstable();
            keep.extend(picked.into_iter().map(|i| ids[i].clone()));
        }
    }
    Ok(manifest.filter(|t, r| r != role || keep.contains(&t.id)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn solid(w: u32, h: u32, v: u8) -> RgbImage {
        RgbImage::from_pixel(w, h, Rgb([v, v, v]))
    }

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 251) as u8 + 1, (y % 251) as u8 + 1, 7]))
    }

    fn class_manifest(counts: &[usize]) -> DatasetManifest {
        let mut entries = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                let t = Tile::new(format!("c{c}_{i}"), solid(4, 4, i as u8), Some(format!("species_{}", c + 1)), 6.0);
                entries.push((t, Role::BaseTrain));
            }
        }
        DatasetManifest::new(entries).unwrap()
    }

    #[test]
    fn identity_normalization_is_byte_identical() {
        let t = Tile::new("a", gradient(128, 128), None, 6.0);
        let n = normalize_tile(&t, 6.0, 128).unwrap();
        assert_eq!(n.pixels, t.pixels);
    }

    #[test]
    fn small_tile_gets_centered_zero_border() {
        let t = Tile::new("a", gradient(100, 100), None, 6.0);
        let n = normalize_tile(&t, 6.0, 128).unwrap();
        assert_eq!(n.pixels.dimensions(), (128, 128));
        for y in 0..128 {
            for x in 0..128 {
                let inside = (14..114).contains(&x) && (14..114).contains(&y);
                let p = n.pixels.get_pixel(x, y);
                if inside {
                    assert_eq!(p, t.pixels.get_pixel(x - 14, y - 14));
                } else {
                    assert_eq!(p.0, [0, 0, 0]);
                }
            }
        }
    }

    #[test]
    fn odd_remainder_goes_bottom_right() {
        let plan = plan_normalization((101, 99), 6.0, 6.0, 128).unwrap();
        assert_eq!((plan.left, plan.right), (13, 14));
        assert_eq!((plan.top, plan.bottom), (14, 15));
        let crop = plan_normalization((131, 130), 6.0, 6.0, 128).unwrap();
        assert_eq!((crop.left, crop.right), (-1, -2));
        assert_eq!((crop.top, crop.bottom), (-1, -1));
    }

    #[test]
    fn centimeter_tile_is_resampled_then_padded() {
        // Independent scale arithmetic: 600 px * (1 cm / 6 cm) = 100 px.
        let expected_side = (600.0_f64 * (1.0 / 6.0)).round() as u32;
        assert_eq!(expected_side, 100);
        let plan = plan_normalization((600, 600), 1.0, 6.0, 128).unwrap();
        assert_eq!(plan.resampled, (expected_side, expected_side));
        assert_eq!((plan.left, plan.right, plan.top, plan.bottom), (14, 14, 14, 14));

        let t = Tile::new("r", solid(600, 600, 200), None, 1.0);
        let n = normalize_tile(&t, 6.0, 128).unwrap();
        assert_eq!(n.pixels.dimensions(), (128, 128));
        assert_eq!(n.gsd_cm, 6.0);
        assert_eq!(n.pixels.get_pixel(13, 64).0, [0, 0, 0]);
        assert_eq!(n.pixels.get_pixel(14, 64).0, [200, 200, 200]);
        assert_eq!(n.pixels.get_pixel(113, 64).0, [200, 200, 200]);
        assert_eq!(n.pixels.get_pixel(114, 64).0, [0, 0, 0]);
    }

    #[test]
    fn large_tile_is_center_cropped() {
        let t = Tile::new("a", gradient(140, 130), None, 6.0);
        let n = normalize_tile(&t, 6.0, 128).unwrap();
        assert_eq!(n.pixels.get_pixel(0, 0), t.pixels.get_pixel(6, 1));
        assert_eq!(n.pixels.get_pixel(127, 127), t.pixels.get_pixel(133, 128));
    }

    #[test]
    fn zero_area_is_rejected() {
        let t = Tile::new("a", RgbImage::new(0, 5), None, 6.0);
        assert!(matches!(normalize_tile(&t, 6.0, 128), Err(Error::Normalization(_))));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let t = Tile::new("a", solid(2, 2, 0), None, 6.0);
        let err = DatasetManifest::new([(t.clone(), Role::Query), (t, Role::Query)]).unwrap_err();
        assert!(matches!(err, Error::DuplicateTile(id) if id == "a"));
    }

    #[test]
    fn table_one_roster_sizes() {
        let m = class_manifest(&[13, 29, 26, 14, 17]);
        let sizes: Vec<usize> = m.class_roster(Role::BaseTrain).values().map(Vec::len).collect();
        assert_eq!(sizes, vec![13, 29, 26, 14, 17]);
    }

    #[test]
    fn capping_keeps_thirteen() {
        let m = class_manifest(&[13, 29]);
        let capped = cap_candidates(&m, 13, 5).unwrap();
        let roster = capped.class_roster(Role::BaseTrain);
        assert_eq!(roster["species_2"].len(), 13);
        // Cap equal to size keeps everything in order.
        assert_eq!(roster["species_1"], m.class_roster(Role::BaseTrain)["species_1"]);
        assert_eq!(capped, cap_candidates(&m, 13, 5).unwrap());
    }

    #[test]
    fn capping_an_all_excluded_class_names_it() {
        let mut t = Tile::new("x", solid(2, 2, 0), Some("ghost".into()), 6.0);
        t.excluded = true;
        let m = DatasetManifest::new([(t, Role::BaseTrain)]).unwrap();
        assert!(matches!(cap_candidates(&m, 3, 0), Err(Error::EmptyClass(c)) if c == "ghost"));
    }

    #[test]
    fn ingest_reports_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.json");
        fs::write(
            &manifest,
            r#"{"tiles":[{"id":"a","path":"nope.png","label":"s","gsd_cm":6,"role":"base_train","excluded":false}]}"#,
        )
        .unwrap();
        let err = ingest_manifest(&manifest).unwrap_err();
        assert!(err.to_string().contains("nope.png"), "{err}");
    }

    #[test]
    fn write_then_ingest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = class_manifest(&[2, 3]);
        m = m.merged(&DatasetManifest::new([(Tile::new("q/1", gradient(5, 5), None, 6.0), Role::Query)]).unwrap()).unwrap();
        let path = write_manifest(&m, dir.path()).unwrap();
        let back = ingest_manifest(&path).unwrap();
        assert_eq!(back, m);
    }
}
