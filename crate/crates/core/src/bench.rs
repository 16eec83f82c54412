//! Patch-count model and encoder throughput harness.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::Vit;
use crate::params::{Params, Real};
use crate::raster::RgbImage;

pub const PATCH_SIDE: usize = 224;
/// Representative patches per WSI at 5x and 20x.
pub const PATCHES_5X: usize = 554;
pub const PATCHES_20X: usize = 6260;

static RUNNING: AtomicBool = AtomicBool::new(false);

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("n_patches {n_patches} < batch_size {batch_size}")]
    TooFewPatches { n_patches: usize, batch_size: usize },
    #[error("another benchmark is already running in this process")]
    Busy,
    #[error("no fixtures")]
    NoFixtures,
    #[error("reference model {0} not among fixtures")]
    UnknownReference(String),
    #[error("row {row} ({model}): stored {column} {stored} but recomputed {recomputed}")]
    Mismatch { row: usize, model: String, column: &'static str, stored: f64, recomputed: f64 },
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Magnification {
    #[serde(rename = "5x")]
    X5,
    #[serde(rename = "20x")]
    X20,
}

/// Full non-overlapping tiles of a slide given in 20x pixels. At 5x the
/// slide is a quarter of the size per axis.
pub fn patch_count(width_20x: usize, height_20x: usize, mag: Magnification, patch_side: usize) -> usize {
    let (w, h) = match mag {
        Magnification::X20 => (width_20x, height_20x),
        Magnification::X5 => (width_20x / 4, height_20x / 4),
    };
    (w / patch_side) * (h / patch_side)
}

pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// `60 / t`, unrounded.
pub fn wsis_per_minute(seconds_per_wsi: f64) -> Result<f64, BenchError> {
    if !(seconds_per_wsi > 0.0) {
        return Err(BenchError::NonPositive { what: "seconds_per_wsi", value: seconds_per_wsi });
    }
    Ok(60.0 / seconds_per_wsi)
}

/// `t_other / t_self`, unrounded.
pub fn speedup(t_other: f64, t_self: f64) -> Result<f64, BenchError> {
    for (what, v) in [("t_other", t_other), ("t_self", t_self)] {
        if !(v > 0.0) {
            return Err(BenchError::NonPositive { what, value: v });
        }
    }
    Ok(t_other / t_self)
}

/// One row of the speed comparison. `wsis_per_minute` and `speedup` are
/// derived; `speedup` is how many times faster the reference model is than
/// this one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedFixture {
    pub model: String,
    pub patches_per_wsi: usize,
    pub seconds_per_wsi: f64,
    #[serde(default)]
    pub wsis_per_minute: Option<f64>,
    #[serde(default)]
    pub speedup: Option<f64>,
}

impl SpeedFixture {
    pub fn new(model: &str, patches_per_wsi: usize, seconds_per_wsi: f64) -> Self {
        Self { model: model.into(), patches_per_wsi, seconds_per_wsi, wsis_per_minute: None, speedup: None }
    }
}

/// The published comparison: XMAG at 5x against Phikon and UNI2 at 20x.
pub fn paper_fixtures() -> Vec<SpeedFixture> {
    vec![
        SpeedFixture::new("XMAG", PATCHES_5X, 6.82),
        SpeedFixture::new("Phikon", PATCHES_20X, 54.21),
        SpeedFixture::new("UNI2", PATCHES_20X, 201.25),
    ]
}

/// Fills the derived columns, rounded to two decimals.
pub fn derive_speed_table(fixtures: &[SpeedFixture], reference: &str) -> Result<Vec<SpeedFixture>, BenchError> {
    if fixtures.is_empty() {
        return Err(BenchError::NoFixtures);
    }
    let t_ref = fixtures
        .iter()
        .find(|f| f.model == reference)
        .ok_or_else(|| BenchError::UnknownReference(reference.into()))?
        .seconds_per_wsi;
    fixtures
        .iter()
        .map(|f| {
            Ok(SpeedFixture {
                wsis_per_minute: Some(round2(wsis_per_minute(f.seconds_per_wsi)?)),
                speedup: Some(round2(speedup(f.seconds_per_wsi, t_ref)?)),
                ..f.clone()
            })
        })
        .collect()
}

/// Compares any stored derived values against a fresh recomputation.
pub fn check_speed_table(rows: &[SpeedFixture], reference: &str) -> Result<Vec<SpeedFixture>, BenchError> {
    let derived = derive_speed_table(rows, reference)?;
    for (i, (stored, fresh)) in rows.iter().zip(&derived).enumerate() {
        for (column, s, r) in [
            ("wsis_per_minute", stored.wsis_per_minute, fresh.wsis_per_minute),
            ("speedup", stored.speedup, fresh.speedup),
        ] {
            if let (Some(s), Some(r)) = (s, r) {
                if (s - r).abs() > 1e-9 {
                    return Err(BenchError::Mismatch { row: i, model: stored.model.clone(), column, stored: s, recomputed: r });
                }
            }
        }
    }
    Ok(derived)
}

/// `patches_20x / patches_5x` to two decimals.
pub fn dataset_patch_ratio(patches_5x: usize, patches_20x: usize) -> Result<f64, BenchError> {
    if patches_5x == 0 {
        return Err(BenchError::NonPositive { what: "patches_5x", value: 0.0 });
    }
    Ok(round2(patches_20x as f64 / patches_5x as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub encoder: serde_json::Value,
    pub batch_size: usize,
    pub n_patches: usize,
    pub warmup_batches: usize,
    pub wall_seconds: f64,
    pub patches_per_sec: f64,
    pub hardware: String,
    pub wsis_per_minute_5x: f64,
    pub wsis_per_minute_20x: f64,
}

impl ThroughputReport {
    /// Simulated WSIs per minute at a given number of patches per WSI.
    pub fn wsis_per_minute_at(&self, patches_per_wsi: usize) -> f64 {
        60.0 * self.patches_per_sec / patches_per_wsi as f64
    }
}

pub fn hardware_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{}-{} ({} threads available, single stream)", std::env::consts::ARCH, std::env::consts::OS, threads)
}

struct RunGuard;

impl RunGuard {
    fn acquire() -> Result<Self, BenchError> {
        RUNNING
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| RunGuard)
            .map_err(|_| BenchError::Busy)
    }
}

impl Drop for RunGuard {
    fn drop(&mut self) {
        RUNNING.store(false, Ordering::Release);
    }
}

fn bench_tile(side: usize, seed: u64) -> RgbImage {
    let mut s = seed.wrapping_mul(0x2545_F491_4F6C_DD1D) | 1;
    RgbImage::from_fn(side, side, |_, _| {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        [(s >> 8) as u8, (s >> 16) as u8, (s >> 24) as u8]
    })
}

/// Times inference over `n_patches` synthetic tiles after `warmup_batches`
/// untimed batches, on the calling thread only.
pub fn time_encoder<F: Real>(
    vit: &Vit,
    params: &Params<F>,
    n_patches: usize,
    batch_size: usize,
    warmup_batches: usize,
) -> Result<ThroughputReport, BenchError> {
    if batch_size == 0 {
        return Err(BenchError::NonPositive { what: "batch_size", value: 0.0 });
    }
    if n_patches < batch_size {
        return Err(BenchError::TooFewPatches { n_patches, batch_size });
    }
    let _guard = RunGuard::acquire()?;
    let side = vit.config().input_side;
    let tiles: Vec<RgbImage> = (0..batch_size).map(|i| bench_tile(side, i as u64)).collect();
    let refs: Vec<&RgbImage> = tiles.iter().collect();
    for _ in 0..warmup_batches {
        std::hint::black_box(vit.forward(params, &refs)?);
    }
    let start = Instant::now();
    let mut done = 0;
    while done < n_patches {
        let take = batch_size.min(n_patches - done);
        std::hint::black_box(vit.forward(params, &refs[..take])?);
        done += take;
    }
    let wall = start.elapsed().as_secs_f64().max(1e-9);
    let pps = n_patches as f64 / wall;
    let mut report = ThroughputReport {
        encoder: serde_json::to_value(vit.config()).expect("config serializes"),
        batch_size,
        n_patches,
        warmup_batches,
        wall_seconds: wall,
        patches_per_sec: pps,
        hardware: hardware_descriptor(),
        wsis_per_minute_5x: 0.0,
        wsis_per_minute_20x: 0.0,
    };
    report.wsis_per_minute_5x = report.wsis_per_minute_at(PATCHES_5X);
    report.wsis_per_minute_20x = report.wsis_per_minute_at(PATCHES_20X);
    Ok(report)
}

fn io(path: &Path) -> impl Fn(String) -> BenchError + '_ {
    move |msg| BenchError::Io { path: path.to_path_buf(), msg }
}

pub fn read_fixtures(path: &Path) -> Result<Vec<SpeedFixture>, BenchError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io(path)(e.to_string()))?;
    r.deserialize().collect::<Result<Vec<_>, _>>().map_err(|e| io(path)(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PlotPoint {
    model: String,
    metric: String,
    value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedTableFiles {
    pub table: PathBuf,
    pub plot: PathBuf,
    pub throughput: Option<PathBuf>,
}

/// Writes `speed_table.csv` and the long-form `speed_plot.csv` (model,
/// metric, value) under `dir`, plus `throughput.json` when measurements are
/// given. Refuses to write if stored derived values disagree with a
/// recomputation, and re-reads the table to confirm it round-trips.
pub fn emit_speed_table(
    fixtures: &[SpeedFixture],
    reference: &str,
    measurements: &[ThroughputReport],
    dir: &Path,
) -> Result<(Vec<SpeedFixture>, SpeedTableFiles), BenchError> {
    let rows = check_speed_table(fixtures, reference)?;
    std::fs::create_dir_all(dir).map_err(|e| io(dir)(e.to_string()))?;
    let table = dir.join("speed_table.csv");
    {
        let mut w = csv::Writer::from_path(&table).map_err(|e| io(&table)(e.to_string()))?;
        for r in &rows {
            w.serialize(r).map_err(|e| io(&table)(e.to_string()))?;
        }
        w.flush().map_err(|e| io(&table)(e.to_string()))?;
    }
    let plot = dir.join("speed_plot.csv");
    {
        let mut w = csv::Writer::from_path(&plot).map_err(|e| io(&plot)(e.to_string()))?;
        for r in &rows {
            for (metric, value) in [
                ("patches", r.patches_per_wsi as f64),
                ("seconds", r.seconds_per_wsi),
                ("wsis_per_min", r.wsis_per_minute.unwrap_or(f64::NAN)),
                ("speedup", r.speedup.unwrap_or(f64::NAN)),
            ] {
                w.serialize(PlotPoint { model: r.model.clone(), metric: metric.into(), value })
                    .map_err(|e| io(&plot)(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| io(&plot)(e.to_string()))?;
    }
    let back = read_fixtures(&table)?;
    if back != rows {
        return Err(io(&table)("emitted table does not round-trip".into()));
    }
    let throughput = if measurements.is_empty() {
        None
    } else {
        let p = dir.join("throughput.json");
        let text = serde_json::to_string_pretty(measurements).expect("reports serialize");
        std::fs::write(&p, text).map_err(|e| io(&p)(e.to_string()))?;
        Some(p)
    };
    Ok((rows, SpeedTableFiles { table, plot, throughput }))
}
