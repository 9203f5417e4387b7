//! Dataset ingestion: procedural texture tiles and folder-per-class images.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GcmaeError, Result};
use crate::patching::{NormStats, Tile};
use crate::rng;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Synthetic,
    ImageFolder,
}

impl std::str::FromStr for DatasetKind {
    type Err = GcmaeError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "image-folder" | "folder" => Ok(DatasetKind::ImageFolder),
            other => Err(GcmaeError::Config(format!("unknown dataset kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub tile_size: usize,
    pub channels: usize,
    /// Number of synthetic classes (folder datasets take theirs from disk).
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Folder root for image-folder datasets.
    pub path: Option<PathBuf>,
    /// Fraction of images held out when the folder has no train/test split.
    pub test_fraction: f64,
    pub seed: u64,
    /// Std of the additive pixel noise in synthetic tiles.
    pub noise: f64,
    /// Physical resolution recorded as metadata.
    pub microns_per_pixel: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            tile_size: 64,
            channels: 3,
            classes: 2,
            n_train: 1000,
            n_test: 200,
            path: None,
            test_fraction: 0.2,
            seed: 0,
            noise: 0.3,
            microns_per_pixel: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One manifest line: `id, path-or-"synthetic", grid-x, grid-y, label, split`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: usize,
    pub source: String,
    pub grid_x: usize,
    pub grid_y: usize,
    pub label: Option<usize>,
    pub split: Split,
}

impl ManifestEntry {
    pub fn line(&self) -> String {
        let label = self.label.map(|l| l.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.id,
            self.source,
            self.grid_x,
            self.grid_y,
            label,
            self.split.as_str()
        )
    }
}

pub const MANIFEST_HEADER: &str = "id,source,grid_x,grid_y,label,split";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{MANIFEST_HEADER}")?;
    for e in entries {
        writeln!(f, "{}", e.line())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let bad = |line: &str| GcmaeError::Dataset(format!("bad manifest line '{line}'"));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            Ok(ManifestEntry {
                id: f[0].parse().map_err(|_| bad(line))?,
                source: f[1].to_string(),
                grid_x: f[2].parse().map_err(|_| bad(line))?,
                grid_y: f[3].parse().map_err(|_| bad(line))?,
                label: if f[4].is_empty() { None } else { Some(f[4].parse().map_err(|_| bad(line))?) },
                split: match f[5] {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    _ => return Err(bad(line)),
                },
            })
        })
        .collect()
}

/// Loaded train/test tiles with train-split normalization statistics.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Tile>,
    pub test: Vec<Tile>,
    pub classes: usize,
    pub class_names: Vec<String>,
    pub stats: NormStats,
    pub manifest: Vec<ManifestEntry>,
    pub tiling: TilingReport,
}

impl Dataset {
    pub fn load(spec: &DatasetSpec) -> Result<Self> {
        match spec.kind {
            DatasetKind::Synthetic => synth_dataset(spec, spec.n_train, spec.n_test, spec.seed),
            DatasetKind::ImageFolder => {
                let root = spec
                    .path
                    .as_ref()
                    .ok_or_else(|| GcmaeError::Config("image-folder dataset needs data.path".into()))?;
                load_split_folder(root, spec)
            }
        }
    }
}

/// Texture parameters of one synthetic class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureClass {
    /// Stripe direction in radians.
    pub orientation: f64,
    /// Stripe period in pixels.
    pub period: f64,
}

/// Evenly spread orientations, one shared period: classes differ in
/// structure while sharing the same color and intensity distribution.
pub fn default_texture_classes(classes: usize, tile_size: usize) -> Vec<TextureClass> {
    let period = (tile_size as f64 / 3.0).max(2.5);
    (0..classes)
        .map(|c| TextureClass {
            orientation: std::f64::consts::PI * c as f64 / classes as f64,
            period: if classes > 4 && c % 2 == 1 { period * 1.6 } else { period },
        })
        .collect()
}

const BASE_COLOR: [f64; 3] = [0.62, 0.42, 0.58];
const CHANNEL_GAIN: [f64; 3] = [1.0, 0.75, 0.9];

fn synth_tile(id: usize, class: usize, params: &TextureClass, spec: &DatasetSpec, seed: u64) -> Tile {
    let mut r = rng::stream(seed, "synth-tile", id as u64);
    let s = spec.tile_size;
    let c = spec.channels;
    let theta = params.orientation + (rng::unit_f64(&mut r) - 0.5) * 0.2;
    let period = params.period * (0.9 + 0.2 * rng::unit_f64(&mut r));
    let phase = rng::unit_f64(&mut r) * std::f64::consts::TAU;
    let amp = 0.2 + 0.1 * rng::unit_f64(&mut r);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise std");
    let (ct, st) = (theta.cos(), theta.sin());
    let mut px = Vec::with_capacity(s * s * c);
    for y in 0..s {
        for x in 0..s {
            let u = x as f64 * ct + y as f64 * st;
            let wave = (std::f64::consts::TAU * u / period + phase).sin();
            for ch in 0..c {
                let v = BASE_COLOR[ch % 3] + amp * CHANNEL_GAIN[ch % 3] * wave + noise.sample(&mut r);
                px.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tile::new(id, s, s, c, px).expect("synthetic tile shape").with_label(class)
}

/// Balanced procedural texture dataset; labels cycle through classes so
/// each split is balanced to within one tile per class.
pub fn synth_dataset(spec: &DatasetSpec, n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    synth_dataset_with(spec, &default_texture_classes(spec.classes, spec.tile_size), n_train, n_test, seed)
}

pub fn synth_dataset_with(spec: &DatasetSpec, classes: &[TextureClass], n_train: usize, n_test: usize, seed: u64) -> Result<Dataset> {
    if classes.len() < 2 {
        return Err(GcmaeError::Config("synthetic dataset needs at least 2 classes".into()));
    }
    if spec.tile_size == 0 || spec.channels == 0 {
        return Err(GcmaeError::Config("synthetic tiles need positive size and channels".into()));
    }
    for i in 0..classes.len() {
        for j in i + 1..classes.len() {
            if classes[i] == classes[j] {
                warn!("synthetic classes {i} and {j} have identical texture parameters");
            }
        }
    }
    let k = classes.len();
    let mut labels_train: Vec<usize> = (0..n_train).map(|i| i % k).collect();
    let mut labels_test: Vec<usize> = (0..n_test).map(|i| i % k).collect();
    rng::shuffle(&mut labels_train, &mut rng::stream(seed, "synth-labels", 0));
    rng::shuffle(&mut labels_test, &mut rng::stream(seed, "synth-labels", 1));

    let make = |offset: usize, labels: &[usize]| -> Vec<Tile> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let mut t = synth_tile(offset + i, l, &classes[l], spec, seed);
                t.id = i;
                t
            })
            .collect()
    };
    let train = make(0, &labels_train);
    let test = make(n_train, &labels_test);
    let mut manifest = Vec::with_capacity(n_train + n_test);
    for (split, tiles, offset) in [(Split::Train, &train, 0), (Split::Test, &test, n_train)] {
        manifest.extend(tiles.iter().map(|t| ManifestEntry {
            id: offset + t.id,
            source: "synthetic".into(),
            grid_x: 0,
            grid_y: 0,
            label: t.label,
            split,
        }));
    }
    let stats = compute_norm_stats(&train)?;
    Ok(Dataset {
        train,
        test,
        classes: k,
        class_names: (0..k).map(|c| format!("class{c}")).collect(),
        stats,
        manifest,
        tiling: TilingReport::default(),
    })
}

/// Per-channel histograms of raw pixel values in `[0, 1]`, as fractions:
/// a baseline feature that ignores spatial structure.
pub fn pixel_histogram_features(tiles: &[Tile], bins: usize) -> Matrix {
    let c = tiles.first().map_or(0, |t| t.channels);
    let mut out = Matrix::zeros(tiles.len(), c * bins);
    for (r, t) in tiles.iter().enumerate() {
        let row = out.row_mut(r);
        let n = (t.pixels.len() / c.max(1)) as f64;
        for (i, &v) in t.pixels.iter().enumerate() {
            let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            row[(i % c) * bins + b] += 1.0 / n;
        }
    }
    out
}

/// Streaming per-channel mean and population std (Welford).
pub fn compute_norm_stats(tiles: &[Tile]) -> Result<NormStats> {
    let first = tiles.first().ok_or_else(|| GcmaeError::Empty("normalization over no tiles".into()))?;
    let c = first.channels;
    let mut count = 0u64;
    let mut mean = vec![0.0; c];
    let mut m2 = vec![0.0; c];
    for t in tiles {
        if t.channels != c {
            return Err(GcmaeError::shape("tiles disagree on channel count"));
        }
        for px in t.pixels.chunks_exact(c) {
            count += 1;
            let n = count as f64;
            for ch in 0..c {
                let delta = px[ch] - mean[ch];
                mean[ch] += delta / n;
                m2[ch] += delta * (px[ch] - mean[ch]);
            }
        }
    }
    let std: Vec<f64> = m2.iter().map(|v| (v / count as f64).sqrt()).collect();
    let stats = NormStats { mean, std };
    for (ch, &s) in stats.std.iter().enumerate() {
        if s <= 1e-12 {
            return Err(GcmaeError::ZeroVariance { channel: ch });
        }
    }
    Ok(stats)
}

/// Outcome counts of grid tiling.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TilingReport {
    pub images: usize,
    pub tiles: usize,
    /// Pixels in right/bottom margins that did not fill a whole tile.
    pub discarded_margin_pixels: usize,
    pub rejected_small: Vec<String>,
    pub skipped_undecodable: Vec<String>,
}

impl TilingReport {
    fn merge(&mut self, other: TilingReport) {
        self.images += other.images;
        self.tiles += other.tiles;
        self.discarded_margin_pixels += other.discarded_margin_pixels;
        self.rejected_small.extend(other.rejected_small);
        self.skipped_undecodable.extend(other.skipped_undecodable);
    }
}

/// Non-overlapping `tile × tile` crops at offsets `(row, col)` in row-major
/// order, plus the number of margin pixels left over.
pub fn grid_offsets(height: usize, width: usize, tile: usize) -> (Vec<(usize, usize)>, usize) {
    let (gh, gw) = (height / tile, width / tile);
    let offsets = (0..gh)
        .flat_map(|gy| (0..gw).map(move |gx| (gy * tile, gx * tile)))
        .collect();
    (offsets, height * width - gh * gw * tile * tile)
}

fn is_supported(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn decode(path: &Path, channels: usize) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path).map_err(|e| GcmaeError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        3 => img.to_rgb8().into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect(),
        other => return Err(GcmaeError::Config(format!("image folders support 1 or 3 channels, not {other}"))),
    };
    Ok((h, w, data))
}

/// A tile cut from an image file, before ids are assigned.
#[derive(Clone, Debug)]
pub struct FolderTile {
    pub tile: Tile,
    pub source: String,
    pub grid_x: usize,
    pub grid_y: usize,
}

/// Loads `root/<class>/<image>` files, grid-cropping each image into
/// non-overlapping tiles. Ids follow (class, file, grid row, grid col)
/// order and are therefore stable across runs.
pub fn load_image_folder(root: &Path, tile_size: usize, channels: usize) -> Result<(Vec<FolderTile>, Vec<String>, TilingReport)> {
    if tile_size == 0 {
        return Err(GcmaeError::Config("tile size must be positive".into()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(GcmaeError::Dataset(format!("{} has no class subdirectories", root.display())));
    }
    let mut tiles = Vec::new();
    let mut names = Vec::new();
    let mut report = TilingReport::default();
    for (label, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let before = tiles.len();
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file() && is_supported(p)) {
            let rel = file.strip_prefix(root).unwrap_or(&file).to_string_lossy().into_owned();
            let (h, w, px) = match decode(&file, channels) {
                Ok(v) => v,
                Err(e) => {
                    warn!("skipping {rel}: {e}");
                    report.skipped_undecodable.push(rel);
                    continue;
                }
            };
            if h < tile_size || w < tile_size {
                warn!("rejecting {rel}: {w}x{h} is smaller than the {tile_size}-pixel tile");
                report.rejected_small.push(rel);
                continue;
            }
            report.images += 1;
            let (offsets, margin) = grid_offsets(h, w, tile_size);
            report.discarded_margin_pixels += margin;
            for (oy, ox) in offsets {
                let mut data = Vec::with_capacity(tile_size * tile_size * channels);
                for y in oy..oy + tile_size {
                    let start = (y * w + ox) * channels;
                    data.extend_from_slice(&px[start..start + tile_size * channels]);
                }
                tiles.push(FolderTile {
                    tile: Tile::new(0, tile_size, tile_size, channels, data)?.with_label(label),
                    source: rel.clone(),
                    grid_x: ox / tile_size,
                    grid_y: oy / tile_size,
                });
                report.tiles += 1;
            }
        }
        if tiles.len() == before {
            return Err(GcmaeError::Dataset(format!("class '{name}' has no usable tiles")));
        }
        names.push(name);
    }
    Ok((tiles, names, report))
}

fn finish_split(tiles: Vec<FolderTile>, split: Split, offset: usize, manifest: &mut Vec<ManifestEntry>) -> Vec<Tile> {
    tiles
        .into_iter()
        .enumerate()
        .map(|(i, ft)| {
            manifest.push(ManifestEntry {
                id: offset + i,
                source: ft.source,
                grid_x: ft.grid_x,
                grid_y: ft.grid_y,
                label: ft.tile.label,
                split,
            });
            Tile { id: i, ..ft.tile }
        })
        .collect()
}

/// Folder dataset. Uses `root/train` and `root/test` when both exist;
/// otherwise holds out whole images (never single tiles) per class.
fn load_split_folder(root: &Path, spec: &DatasetSpec) -> Result<Dataset> {
    let (train_tiles, test_tiles, names, tiling) = if root.join("train").is_dir() && root.join("test").is_dir() {
        let (tr, names, mut rep) = load_image_folder(&root.join("train"), spec.tile_size, spec.channels)?;
        let (te, test_names, rep2) = load_image_folder(&root.join("test"), spec.tile_size, spec.channels)?;
        if names != test_names {
            return Err(GcmaeError::Dataset("train and test folders list different classes".into()));
        }
        rep.merge(rep2);
        (tr, te, names, rep)
    } else {
        let (all, names, rep) = load_image_folder(root, spec.tile_size, spec.channels)?;
        let mut sources: Vec<(usize, String)> = all.iter().map(|t| (t.tile.label.unwrap_or(0), t.source.clone())).collect();
        sources.dedup();
        let mut held_out = std::collections::HashSet::new();
        for class in 0..names.len() {
            let mut imgs: Vec<&String> = sources.iter().filter(|(l, _)| *l == class).map(|(_, s)| s).collect();
            rng::shuffle(&mut imgs, &mut rng::stream(spec.seed, "folder-split", class as u64));
            let n_test = ((imgs.len() as f64) * spec.test_fraction).round() as usize;
            held_out.extend(imgs.into_iter().take(n_test).cloned());
        }
        let (te, tr): (Vec<FolderTile>, Vec<FolderTile>) = all.into_iter().partition(|t| held_out.contains(&t.source));
        (tr, te, names, rep)
    };
    let mut manifest = Vec::new();
    let n_train = train_tiles.len();
    let train = finish_split(train_tiles, Split::Train, 0, &mut manifest);
    let test = finish_split(test_tiles, Split::Test, n_train, &mut manifest);
    let stats = compute_norm_stats(&train)?;
    Ok(Dataset {
        train,
        test,
        classes: names.len(),
        class_names: names,
        stats,
        manifest,
        tiling,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize) -> DatasetSpec {
        DatasetSpec {
            tile_size: 16,
            classes,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn synthetic_balanced_and_deterministic() {
        let d = synth_dataset(&spec(2), 32, 8, 4).unwrap();
        let ones = d.train.iter().filter(|t| t.label == Some(1)).count();
        assert_eq!(ones, 16);
        let again = synth_dataset(&spec(2), 32, 8, 4).unwrap();
        assert_eq!(d.train, again.train);
        assert_eq!(d.test, again.test);
        assert_ne!(d.train, synth_dataset(&spec(2), 32, 8, 5).unwrap().train);
        assert!(d.train.iter().enumerate().all(|(i, t)| t.id == i));
    }

    #[test]
    fn synthetic_classes_share_mean_color() {
        let d = synth_dataset(&spec(2), 400, 0, 1).unwrap();
        let mean_of = |label: usize| -> f64 {
            let tiles: Vec<&Tile> = d.train.iter().filter(|t| t.label == Some(label)).collect();
            tiles.iter().map(|t| t.pixels.iter().sum::<f64>() / t.pixels.len() as f64).sum::<f64>() / tiles.len() as f64
        };
        assert!((mean_of(0) - mean_of(1)).abs() < 0.01);
    }

    #[test]
    fn synthetic_split_ids_disjoint_in_manifest() {
        let d = synth_dataset(&spec(3), 12, 6, 0).unwrap();
        let mut ids: Vec<usize> = d.manifest.iter().map(|e| e.id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 18);
        assert!(synth_dataset(&spec(1), 4, 0, 0).is_err());
    }

    #[test]
    fn norm_stats_cases() {
        let flat = |v: f64| Tile::new(0, 2, 2, 1, vec![v; 4]).unwrap();
        assert!(matches!(compute_norm_stats(&[flat(0.5), flat(0.5)]), Err(GcmaeError::ZeroVariance { channel: 0 })));
        let s = compute_norm_stats(&[flat(0.0), flat(1.0)]).unwrap();
        assert!((s.mean[0] - 0.5).abs() < 1e-15 && (s.std[0] - 0.5).abs() < 1e-15);
        let r = compute_norm_stats(&[flat(1.0), flat(0.0)]).unwrap();
        assert!((r.mean[0] - s.mean[0]).abs() < 1e-15 && (r.std[0] - s.std[0]).abs() < 1e-15);
        assert!(compute_norm_stats(&[]).is_err());
    }

    #[test]
    fn histogram_rows_sum_to_channels() {
        let d = synth_dataset(&spec(2), 4, 0, 0).unwrap();
        let h = pixel_histogram_features(&d.train, 8);
        assert_eq!(h.shape(), (4, 24));
        for r in 0..4 {
            assert!((h.row(r).iter().sum::<f64>() - 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_arithmetic() {
        assert_eq!(grid_offsets(224, 224, 224), (vec![(0, 0)], 0));
        let (offs, margin) = grid_offsets(448, 448, 224);
        assert_eq!(offs, vec![(0, 0), (0, 224), (224, 0), (224, 224)]);
        assert_eq!(margin, 0);
        let (offs, margin) = grid_offsets(500, 230, 224);
        assert_eq!(offs.len(), 2);
        assert_eq!(margin, 500 * 230 - 2 * 224 * 224);
        assert!(grid_offsets(100, 100, 224).0.is_empty());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_dataset(&spec(2), 4, 2, 0).unwrap();
        let p = dir.path().join("manifest.csv");
        write_manifest(&p, &d.manifest).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), d.manifest);
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), format!("0,synthetic,0,0,{},train", d.train[0].label.unwrap()));
    }
}
