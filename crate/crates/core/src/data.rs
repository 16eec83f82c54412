//! Synthetic slides, multi-magnification tiling and the 16:1 patch
//! correspondence.
//!
//! A slide is cut into non-overlapping 896² parents at 20x. Each parent yields
//! sixteen 224² children (row-major 4×4 grid) and one 224² 5x patch obtained
//! by 4×4 box averaging.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::RgbImage;

pub const PARENT_SIDE: usize = 896;
pub const CHILD_SIDE: usize = 224;
pub const GRID: usize = 4;
pub const N_CHILDREN: usize = GRID * GRID;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("slide dimensions {height}x{width} are not multiples of {PARENT_SIDE}")]
    Dimensions { height: usize, width: usize },
    #[error("need at least 2 classes, got {0}")]
    Classes(usize),
    #[error("image is {got_h}x{got_w}, expected {want}x{want}")]
    ImageShape { want: usize, got_h: usize, got_w: usize },
    #[error("expected {N_CHILDREN} children, got {0}")]
    ChildCount(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("duplicate manifest key ({slide_id}, {grid_row}, {grid_col})")]
    DuplicateKey {
        slide_id: String,
        grid_row: usize,
        grid_col: usize,
    },
    #[error("manifest references missing file {0}")]
    MissingFile(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

/// Texture generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    /// Side of the square phenotype cells the region map is built from.
    #[serde(default = "default_cell")]
    pub cell_size: usize,
    /// Probability that a cell takes the slide's own class.
    #[serde(default = "default_dominant")]
    pub dominant_fraction: f64,
    /// Per-pixel uniform noise half-width, in 8-bit levels.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_stripe")]
    pub stripe_amplitude: f64,
    /// Per-slide stain shift half-width, in 8-bit levels.
    #[serde(default = "default_jitter")]
    pub stain_jitter: f64,
}

fn default_cell() -> usize {
    PARENT_SIDE
}
fn default_dominant() -> f64 {
    0.75
}
fn default_noise() -> f64 {
    12.0
}
fn default_stripe() -> f64 {
    28.0
}
fn default_jitter() -> f64 {
    10.0
}

impl GeneratorConfig {
    pub fn new(height: usize, width: usize, n_classes: usize) -> Self {
        Self {
            height,
            width,
            n_classes,
            cell_size: default_cell(),
            dominant_fraction: default_dominant(),
            noise: default_noise(),
            stripe_amplitude: default_stripe(),
            stain_jitter: default_jitter(),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.height == 0 || self.width == 0 || self.height % PARENT_SIDE != 0 || self.width % PARENT_SIDE != 0 {
            return Err(DataError::Dimensions { height: self.height, width: self.width });
        }
        if self.n_classes < 2 {
            return Err(DataError::Classes(self.n_classes));
        }
        Ok(())
    }
}

/// Appearance of one phenotype: base stain colour plus an oriented stripe
/// texture whose frequency grows with the class index.
#[derive(Debug, Clone, Copy)]
struct ClassTexture {
    base: [f64; 3],
    freq: f64,
    angle: f64,
}

fn class_texture(c: usize, n: usize) -> ClassTexture {
    // Eosin pink to haematoxylin purple.
    let t = c as f64 / (n - 1) as f64;
    let pink = [232.0, 160.0, 196.0];
    let purple = [104.0, 56.0, 150.0];
    let mut base = [0.0; 3];
    for ch in 0..3 {
        base[ch] = pink[ch] + t * (purple[ch] - pink[ch]);
    }
    ClassTexture {
        base,
        freq: 1.0 / (24.0 - 16.0 * t),
        angle: PI * c as f64 / n as f64,
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SyntheticWsi {
    pub id: String,
    pub pixels: RgbImage,
    /// `height × width` phenotype map, row-major.
    pub region_labels: Vec<u8>,
    pub slide_label: usize,
    pub seed: u64,
    pub n_classes: usize,
}

impl std::fmt::Debug for SyntheticWsi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SyntheticWsi")
            .field("id", &self.id)
            .field("dims", &self.pixels.dims())
            .field("slide_label", &self.slide_label)
            .field("seed", &self.seed)
            .finish()
    }
}

impl SyntheticWsi {
    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn region_label(&self, row: usize, col: usize) -> u8 {
        self.region_labels[row * self.width() + col]
    }

    /// Pixel count per phenotype inside a rectangle.
    pub fn region_histogram(&self, row: usize, col: usize, h: usize, w: usize) -> Vec<u64> {
        let mut hist = vec![0u64; self.n_classes];
        for r in row..row + h {
            let base = r * self.width();
            for &l in &self.region_labels[base + col..base + col + w] {
                hist[l as usize] += 1;
            }
        }
        hist
    }
}

/// Deterministic mini-slide: a cell grid of phenotypes, mostly the slide's
/// own class, rendered with class textures, stain jitter and pixel noise.
pub fn generate_synthetic_wsi(cfg: &GeneratorConfig, seed: u64) -> Result<SyntheticWsi, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.n_classes;
    let slide_label = rng.random_range(0..n);
    let cell = cfg.cell_size.max(1);
    let (cells_y, cells_x) = (cfg.height.div_ceil(cell), cfg.width.div_ceil(cell));
    let cells: Vec<u8> = (0..cells_y * cells_x)
        .map(|_| {
            if rng.random_bool(cfg.dominant_fraction.clamp(0.0, 1.0)) {
                slide_label as u8
            } else {
                let other = rng.random_range(0..n - 1);
                (if other >= slide_label { other + 1 } else { other }) as u8
            }
        })
        .collect();
    let shift: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * cfg.stain_jitter);
    let phase = rng.random_range(0.0..2.0 * PI);
    let textures: Vec<ClassTexture> = (0..n).map(|c| class_texture(c, n)).collect();

    let mut pixels = RgbImage::new(cfg.width, cfg.height);
    let mut region_labels = vec![0u8; cfg.width * cfg.height];
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_4E5B);
    let data = pixels.pixels_mut();
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let c = cells[(y / cell) * cells_x + x / cell];
            let tex = textures[c as usize];
            let u = x as f64 * tex.angle.cos() + y as f64 * tex.angle.sin();
            let stripe = cfg.stripe_amplitude * (2.0 * PI * tex.freq * u + phase).sin();
            let idx = y * cfg.width + x;
            region_labels[idx] = c;
            for ch in 0..3 {
                let nz = (noise_rng.random::<f64>() * 2.0 - 1.0) * cfg.noise;
                let v = tex.base[ch] + shift[ch] + stripe + nz;
                data[idx * 3 + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(SyntheticWsi {
        id: format!("slide_{seed:06}"),
        pixels,
        region_labels,
        slide_label,
        seed,
        n_classes: n,
    })
}

/// One 20x parent, its sixteen children and the co-located 5x patch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PyramidPatchPair {
    pub slide_id: String,
    pub grid_row: usize,
    pub grid_col: usize,
    pub parent_20x: RgbImage,
    /// Row-major 4×4 order.
    pub children_20x: Vec<RgbImage>,
    pub patch_5x: RgbImage,
    pub slide_label: usize,
    pub region_histogram: Vec<u64>,
}

impl PyramidPatchPair {
    pub fn from_parent(slide_id: impl Into<String>, grid_row: usize, grid_col: usize, parent: RgbImage) -> Result<Self, DataError> {
        let children_20x = decompose_parent(&parent)?;
        let patch_5x = downsample_to_5x(&parent)?;
        Ok(Self {
            slide_id: slide_id.into(),
            grid_row,
            grid_col,
            parent_20x: parent,
            children_20x,
            patch_5x,
            slide_label: 0,
            region_histogram: Vec::new(),
        })
    }

    /// Index of the majority phenotype inside this tile.
    pub fn dominant_region(&self) -> usize {
        self.region_histogram
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(self.slide_label, |(i, _)| i)
    }

    pub fn key(&self) -> (String, usize, usize) {
        (self.slide_id.clone(), self.grid_row, self.grid_col)
    }
}

/// Optional background rejection. Off unless a threshold is given.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TissueFilter {
    /// Tiles whose mean channel value exceeds this are dropped.
    pub white_threshold: Option<f64>,
}

impl TissueFilter {
    pub fn keeps(&self, tile: &RgbImage) -> bool {
        match self.white_threshold {
            None => true,
            Some(t) => tile.mean_rgb().iter().sum::<f64>() / 3.0 <= t,
        }
    }
}

/// Cuts the slide into full 896² tiles in row-major order.
pub fn tessellate(wsi: &SyntheticWsi) -> Vec<PyramidPatchPair> {
    tessellate_filtered(wsi, TissueFilter::default())
}

pub fn tessellate_filtered(wsi: &SyntheticWsi, filter: TissueFilter) -> Vec<PyramidPatchPair> {
    let rows = wsi.height() / PARENT_SIDE;
    let cols = wsi.width() / PARENT_SIDE;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (y, x) = (r * PARENT_SIDE, c * PARENT_SIDE);
            let parent = wsi.pixels.crop(y, x, PARENT_SIDE, PARENT_SIDE);
            if !filter.keeps(&parent) {
                continue;
            }
            let mut pair = PyramidPatchPair::from_parent(wsi.id.clone(), r, c, parent)
                .expect("tile has parent dimensions by construction");
            pair.slide_label = wsi.slide_label;
            pair.region_histogram = wsi.region_histogram(y, x, PARENT_SIDE, PARENT_SIDE);
            out.push(pair);
        }
    }
    out
}

fn check_parent(parent: &RgbImage) -> Result<(), DataError> {
    if parent.dims() != (PARENT_SIDE, PARENT_SIDE) {
        return Err(DataError::ImageShape { want: PARENT_SIDE, got_h: parent.height(), got_w: parent.width() });
    }
    Ok(())
}

/// Child `i` covers rows `224·⌊i/4⌋..` and columns `224·(i mod 4)..`.
pub fn decompose_parent(parent: &RgbImage) -> Result<Vec<RgbImage>, DataError> {
    check_parent(parent)?;
    Ok((0..N_CHILDREN)
        .map(|i| parent.crop(CHILD_SIDE * (i / GRID), CHILD_SIDE * (i % GRID), CHILD_SIDE, CHILD_SIDE))
        .collect())
}

pub fn reassemble_children(children: &[RgbImage]) -> Result<RgbImage, DataError> {
    if children.len() != N_CHILDREN {
        return Err(DataError::ChildCount(children.len()));
    }
    let mut parent = RgbImage::new(PARENT_SIDE, PARENT_SIDE);
    for (i, child) in children.iter().enumerate() {
        if child.dims() != (CHILD_SIDE, CHILD_SIDE) {
            return Err(DataError::ImageShape { want: CHILD_SIDE, got_h: child.height(), got_w: child.width() });
        }
        parent.paste(child, CHILD_SIDE * (i / GRID), CHILD_SIDE * (i % GRID));
    }
    Ok(parent)
}

/// 4× box-filter downscale; each output is the rounded mean of a 4×4 block
/// (halves round up).
pub fn downsample_to_5x(parent: &RgbImage) -> Result<RgbImage, DataError> {
    check_parent(parent)?;
    let f = PARENT_SIDE / CHILD_SIDE;
    let src = parent.pixels();
    let mut out = RgbImage::new(CHILD_SIDE, CHILD_SIDE);
    let dst = out.pixels_mut();
    for oy in 0..CHILD_SIDE {
        for ox in 0..CHILD_SIDE {
            let mut acc = [0u32; 3];
            for dy in 0..f {
                let row = (oy * f + dy) * PARENT_SIDE;
                for dx in 0..f {
                    let i = (row + ox * f + dx) * 3;
                    acc[0] += src[i] as u32;
                    acc[1] += src[i + 1] as u32;
                    acc[2] += src[i + 2] as u32;
                }
            }
            let n = (f * f) as u32;
            let o = (oy * CHILD_SIDE + ox) * 3;
            for c in 0..3 {
                dst[o + c] = ((acc[c] + n / 2) / n) as u8;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AugOp {
    HorizontalFlip,
    VerticalFlip,
    /// Quarter turn clockwise.
    Rotate90,
    Brightness { factor: f64 },
    /// Scales deviations from mid-grey (128).
    Contrast { factor: f64 },
}

impl AugOp {
    pub fn is_geometric(&self) -> bool {
        matches!(self, AugOp::HorizontalFlip | AugOp::VerticalFlip | AugOp::Rotate90)
    }

    /// Where grid cell `(r, c)` of an `n × n` grid ends up.
    fn map_cell(&self, r: usize, c: usize, n: usize) -> (usize, usize) {
        match self {
            AugOp::HorizontalFlip => (r, n - 1 - c),
            AugOp::VerticalFlip => (n - 1 - r, c),
            AugOp::Rotate90 => (c, n - 1 - r),
            _ => (r, c),
        }
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        match *self {
            AugOp::HorizontalFlip | AugOp::VerticalFlip | AugOp::Rotate90 => {
                assert_eq!(img.height(), img.width(), "geometric ops need square images");
                let n = img.width();
                let mut out = RgbImage::new(n, n);
                for r in 0..n {
                    for c in 0..n {
                        let (rr, cc) = self.map_cell(r, c, n);
                        out.put(rr, cc, img.get(r, c));
                    }
                }
                out
            }
            AugOp::Brightness { factor } => map_levels(img, |v| v * factor),
            AugOp::Contrast { factor } => map_levels(img, |v| (v - 128.0) * factor + 128.0),
        }
    }
}

fn map_levels(img: &RgbImage, f: impl Fn(f64) -> f64) -> RgbImage {
    let lut: Vec<u8> = (0..256).map(|v| f(v as f64).round().clamp(0.0, 255.0) as u8).collect();
    let mut out = img.clone();
    out.pixels_mut().iter_mut().for_each(|p| *p = lut[*p as usize]);
    out
}

/// Ordered augmentation pipeline shared by both magnifications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub seed: u64,
    pub ops: Vec<AugOp>,
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        Self { seed: 0, ops: Vec::new() }
    }

    /// Draws a random dihedral transform plus mild photometric jitter.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ops = Vec::new();
        if rng.random_bool(0.5) {
            ops.push(AugOp::HorizontalFlip);
        }
        if rng.random_bool(0.5) {
            ops.push(AugOp::VerticalFlip);
        }
        for _ in 0..rng.random_range(0..4) {
            ops.push(AugOp::Rotate90);
        }
        ops.push(AugOp::Brightness { factor: rng.random_range(0.9..1.1) });
        ops.push(AugOp::Contrast { factor: rng.random_range(0.9..1.1) });
        Self { seed, ops }
    }

    pub fn apply(&self, img: &RgbImage) -> RgbImage {
        self.ops.iter().fold(img.clone(), |acc, op| op.apply(&acc))
    }

    /// `perm[i]` is the child slot that child `i` occupies after the
    /// geometric part of the pipeline.
    pub fn child_permutation(&self) -> [usize; N_CHILDREN] {
        let mut perm: [usize; N_CHILDREN] = std::array::from_fn(|i| i);
        for op in self.ops.iter().filter(|o| o.is_geometric()) {
            for slot in perm.iter_mut() {
                let (r, c) = op.map_cell(*slot / GRID, *slot % GRID, GRID);
                *slot = r * GRID + c;
            }
        }
        perm
    }
}

/// Applies `spec` to the parent and the 5x patch; children are re-cut from
/// the augmented parent.
pub fn paired_augment(pair: &PyramidPatchPair, spec: &AugmentationSpec) -> PyramidPatchPair {
    if spec.ops.is_empty() {
        return pair.clone();
    }
    let parent = spec.apply(&pair.parent_20x);
    let children_20x = decompose_parent(&parent).expect("augmentation preserves parent size");
    PyramidPatchPair {
        slide_id: pair.slide_id.clone(),
        grid_row: pair.grid_row,
        grid_col: pair.grid_col,
        parent_20x: parent,
        children_20x,
        patch_5x: spec.apply(&pair.patch_5x),
        slide_label: pair.slide_label,
        region_histogram: pair.region_histogram.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub slide_id: String,
    pub grid_row: usize,
    pub grid_col: usize,
    pub parent_path: String,
    pub child_paths: Vec<String>,
    pub lowmag_path: String,
    pub slide_label: usize,
    pub region_label_histogram: Vec<u64>,
    pub format_version: u32,
}

impl ManifestRecord {
    pub fn key(&self) -> (&str, usize, usize) {
        (&self.slide_id, self.grid_row, self.grid_col)
    }

    pub fn dominant_region(&self) -> usize {
        self.region_label_histogram
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map_or(self.slide_label, |(i, _)| i)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub format_version: u32,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self, DataError> {
        let m = Self { format_version: MANIFEST_VERSION, records };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<(), DataError> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(r.key()) {
                return Err(DataError::DuplicateKey {
                    slide_id: r.slide_id.clone(),
                    grid_row: r.grid_row,
                    grid_col: r.grid_col,
                });
            }
        }
        Ok(())
    }

    /// One JSON object per line.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(line).map_err(|e| DataError::Manifest { line: i + 1, msg: e.to_string() })?;
            if rec.format_version != MANIFEST_VERSION {
                return Err(DataError::Manifest {
                    line: i + 1,
                    msg: format!("unsupported format_version {}", rec.format_version),
                });
            }
            if rec.child_paths.len() != N_CHILDREN {
                return Err(DataError::Manifest {
                    line: i + 1,
                    msg: format!("{} child paths, expected {N_CHILDREN}", rec.child_paths.len()),
                });
            }
            records.push(rec);
        }
        Self::new(records)
    }

    pub fn write(&self, root: &Path) -> Result<PathBuf, DataError> {
        let path = root.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(self.serialize().as_bytes()).map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn read(root: &Path) -> Result<Self, DataError> {
        let path = root.join(MANIFEST_FILE);
        let f = fs::File::open(&path).map_err(io_err(&path))?;
        let mut text = String::new();
        for line in BufReader::new(f).lines() {
            text.push_str(&line.map_err(io_err(&path))?);
            text.push('\n');
        }
        Self::parse(&text)
    }

    pub fn verify_files(&self, root: &Path) -> Result<(), DataError> {
        for r in &self.records {
            for p in std::iter::once(&r.parent_path)
                .chain(r.child_paths.iter())
                .chain(std::iter::once(&r.lowmag_path))
            {
                let full = root.join(p);
                if !full.is_file() {
                    return Err(DataError::MissingFile(full));
                }
            }
        }
        Ok(())
    }

    /// Slide ids in first-appearance order.
    pub fn slide_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.records {
            if ids.last() != Some(&r.slide_id) && !ids.contains(&r.slide_id) {
                ids.push(r.slide_id.clone());
            }
        }
        ids
    }

    pub fn records_for<'a>(&'a self, slide_id: &'a str) -> impl Iterator<Item = &'a ManifestRecord> + 'a {
        self.records.iter().filter(move |r| r.slide_id == slide_id)
    }
}

fn write_png(img: &RgbImage, path: &Path) -> Result<(), DataError> {
    img.save_png(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })
}

pub fn read_png(path: &Path) -> Result<RgbImage, DataError> {
    if !path.is_file() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    RgbImage::load_png(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })
}

/// Persists every image under `root/images/` and writes `root/manifest.jsonl`.
pub fn build_manifest(pairs: &[PyramidPatchPair], root: &Path) -> Result<Manifest, DataError> {
    let manifest = Manifest::new(write_pairs(pairs, root)?)?;
    manifest.write(root)?;
    Ok(manifest)
}

/// Writes the images of `pairs` under `root/images/` without touching the
/// manifest, so large corpora can be written slide by slide.
pub fn write_pairs(pairs: &[PyramidPatchPair], root: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    fs::create_dir_all(root).map_err(io_err(root))?;
    pairs.par_iter().map(|pair| write_pair(pair, root)).collect()
}

fn write_pair(pair: &PyramidPatchPair, root: &Path) -> Result<ManifestRecord, DataError> {
    let rel = format!("images/{}/r{:03}_c{:03}", pair.slide_id, pair.grid_row, pair.grid_col);
    let dir = root.join(&rel);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let parent_path = format!("{rel}/parent_20x.png");
    write_png(&pair.parent_20x, &root.join(&parent_path))?;
    let mut child_paths = Vec::with_capacity(N_CHILDREN);
    for (i, child) in pair.children_20x.iter().enumerate() {
        let p = format!("{rel}/child_{i:02}.png");
        write_png(child, &root.join(&p))?;
        child_paths.push(p);
    }
    let lowmag_path = format!("{rel}/lowmag_5x.png");
    write_png(&pair.patch_5x, &root.join(&lowmag_path))?;
    Ok(ManifestRecord {
        slide_id: pair.slide_id.clone(),
        grid_row: pair.grid_row,
        grid_col: pair.grid_col,
        parent_path,
        child_paths,
        lowmag_path,
        slide_label: pair.slide_label,
        region_label_histogram: pair.region_histogram.clone(),
        format_version: MANIFEST_VERSION,
    })
}

/// Reloads a full pair from disk.
pub fn load_pair(root: &Path, rec: &ManifestRecord) -> Result<PyramidPatchPair, DataError> {
    let parent_20x = read_png(&root.join(&rec.parent_path))?;
    let children_20x = rec
        .child_paths
        .iter()
        .map(|p| read_png(&root.join(p)))
        .collect::<Result<Vec<_>, _>>()?;
    let patch_5x = read_png(&root.join(&rec.lowmag_path))?;
    Ok(PyramidPatchPair {
        slide_id: rec.slide_id.clone(),
        grid_row: rec.grid_row,
        grid_col: rec.grid_col,
        parent_20x,
        children_20x,
        patch_5x,
        slide_label: rec.slide_label,
        region_histogram: rec.region_label_histogram.clone(),
    })
}

pub fn load_lowmag(root: &Path, rec: &ManifestRecord) -> Result<RgbImage, DataError> {
    read_png(&root.join(&rec.lowmag_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_parent(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = RgbImage::new(PARENT_SIDE, PARENT_SIDE);
        rng.fill(img.pixels_mut());
        img
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::new(1792, 1792, 2);
        let a = generate_synthetic_wsi(&cfg, 7).unwrap();
        let b = generate_synthetic_wsi(&cfg, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.region_labels.iter().all(|&l| (l as usize) < 2));
        assert_ne!(a.pixels, generate_synthetic_wsi(&cfg, 8).unwrap().pixels);
    }

    #[test]
    fn generation_rejects_unaligned_dimensions() {
        let cfg = GeneratorConfig::new(1000, 896, 2);
        assert!(matches!(
            generate_synthetic_wsi(&cfg, 0),
            Err(DataError::Dimensions { height: 1000, width: 896 })
        ));
        assert!(matches!(
            generate_synthetic_wsi(&GeneratorConfig::new(896, 896, 1), 0),
            Err(DataError::Classes(1))
        ));
    }

    #[test]
    fn tessellation_counts_and_order() {
        let one = generate_synthetic_wsi(&GeneratorConfig::new(896, 896, 2), 1).unwrap();
        let pairs = tessellate(&one);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].grid_row, pairs[0].grid_col), (0, 0));

        let tall = generate_synthetic_wsi(&GeneratorConfig::new(1792, 896, 2), 1).unwrap();
        let pairs = tessellate(&tall);
        let grid: Vec<_> = pairs.iter().map(|p| (p.grid_row, p.grid_col)).collect();
        assert_eq!(grid, vec![(0, 0), (1, 0)]);
        assert!(pairs.iter().all(|p| p.children_20x.len() == 16));
        assert_eq!(pairs[1].parent_20x, tall.pixels.crop(896, 0, 896, 896));
    }

    #[test]
    fn white_filter_defaults_off() {
        let wsi = generate_synthetic_wsi(&GeneratorConfig::new(896, 1792, 2), 3).unwrap();
        assert_eq!(tessellate(&wsi).len(), 2);
        let strict = TissueFilter { white_threshold: Some(10.0) };
        assert_eq!(tessellate_filtered(&wsi, strict).len(), 0);
    }

    #[test]
    fn decompose_constant_and_index_arithmetic() {
        let parent = RgbImage::filled(896, 896, [9, 8, 7]);
        let kids = decompose_parent(&parent).unwrap();
        assert!(kids.iter().all(|k| *k == RgbImage::filled(224, 224, [9, 8, 7])));

        let mut parent = RgbImage::new(896, 896);
        parent.put(300, 500, [255, 1, 2]);
        let kids = decompose_parent(&parent).unwrap();
        let idx = 4 * (300 / 224) + 500 / 224;
        assert_eq!(idx, 6);
        assert_eq!(kids[6].get(300 - 224, 500 - 448), [255, 1, 2]);
    }

    #[test]
    fn decompose_reassemble_is_identity() {
        let parent = random_parent(5);
        let kids = decompose_parent(&parent).unwrap();
        assert_eq!(reassemble_children(&kids).unwrap(), parent);
    }

    #[test]
    fn decompose_and_downsample_reject_bad_shapes() {
        let img = RgbImage::new(895, 896);
        assert!(matches!(decompose_parent(&img), Err(DataError::ImageShape { .. })));
        assert!(matches!(downsample_to_5x(&img), Err(DataError::ImageShape { .. })));
    }

    #[test]
    fn downsample_examples() {
        let c = RgbImage::filled(896, 896, [17, 200, 3]);
        assert_eq!(downsample_to_5x(&c).unwrap(), RgbImage::filled(224, 224, [17, 200, 3]));

        let mut one = RgbImage::new(896, 896);
        for r in 8..12 {
            for col in 20..24 {
                one.put(r, col, [255, 255, 255]);
            }
        }
        let d = downsample_to_5x(&one).unwrap();
        let lit: Vec<_> = d.pixels().chunks(3).enumerate().filter(|(_, p)| p[0] != 0).collect();
        assert_eq!(lit.len(), 1);
        assert_eq!(lit[0].0, 2 * 224 + 5);
        assert_eq!(lit[0].1, &[255, 255, 255]);

        let checker = RgbImage::from_fn(896, 896, |r, c| if (r + c) % 2 == 0 { [255; 3] } else { [0; 3] });
        assert_eq!(downsample_to_5x(&checker).unwrap(), RgbImage::filled(224, 224, [128; 3]));
    }

    #[test]
    fn downsample_preserves_mean() {
        let parent = random_parent(9);
        let small = downsample_to_5x(&parent).unwrap();
        let (a, b) = (parent.mean_rgb(), small.mean_rgb());
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() <= 0.5, "channel {c}: {} vs {}", a[c], b[c]);
        }
    }

    #[test]
    fn identity_and_repeat_augmentation() {
        let pair = PyramidPatchPair::from_parent("s", 0, 0, random_parent(1)).unwrap();
        assert_eq!(paired_augment(&pair, &AugmentationSpec::identity()), pair);
        let spec = AugmentationSpec::sample(42);
        assert_eq!(paired_augment(&pair, &spec), paired_augment(&pair, &spec));
    }

    #[test]
    fn horizontal_flip_reverses_grid_columns() {
        let pair = PyramidPatchPair::from_parent("s", 0, 0, random_parent(2)).unwrap();
        let spec = AugmentationSpec { seed: 0, ops: vec![AugOp::HorizontalFlip] };
        let aug = paired_augment(&pair, &spec);
        for i in 0..16 {
            let (r, c) = (i / 4, i % 4);
            let src = r * 4 + (3 - c);
            assert_eq!(aug.children_20x[i], AugOp::HorizontalFlip.apply(&pair.children_20x[src]));
        }
        assert_eq!(aug.patch_5x, downsample_to_5x(&aug.parent_20x).unwrap());
    }

    #[test]
    fn manifest_round_trip_and_uniqueness() {
        let dir = tempfile::tempdir().unwrap();
        let wsi = generate_synthetic_wsi(&GeneratorConfig::new(896, 1792, 2), 4).unwrap();
        let pairs = tessellate(&wsi);
        let m = build_manifest(&pairs, dir.path()).unwrap();
        assert_eq!(m.records.len(), 2);
        m.verify_files(dir.path()).unwrap();
        assert_eq!(Manifest::read(dir.path()).unwrap(), m);
        assert_eq!(load_pair(dir.path(), &m.records[1]).unwrap(), pairs[1]);

        let mut dup = m.records.clone();
        dup.push(dup[0].clone());
        assert!(matches!(Manifest::new(dup), Err(DataError::DuplicateKey { .. })));

        let empty = build_manifest(&[], &dir.path().join("empty")).unwrap();
        assert!(empty.records.is_empty());
        assert_eq!(Manifest::read(&dir.path().join("empty")).unwrap(), empty);
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let wsi = generate_synthetic_wsi(&GeneratorConfig::new(896, 896, 2), 4).unwrap();
        let m = build_manifest(&tessellate(&wsi), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(&m.records[0].child_paths[3])).unwrap();
        assert!(matches!(m.verify_files(dir.path()), Err(DataError::MissingFile(_))));
    }
}
