//! One function per subcommand. Each reads its prerequisites from the run
//! directory, writes its artifacts back into it and never touches another
//! command's outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crossmag::bench::{self, SpeedFixture, ThroughputReport};
use crossmag::data::{self, Manifest, ManifestRecord, TissueFilter, MANIFEST_FILE};
use crossmag::distill::{self, DistillConfig, StudentStack};
use crossmag::encoder::{EncoderConfig, FrozenTeacher, Vit};
use crossmag::eval::{self, PairedRow, ReportRow};
use crossmag::mil::{self, Bag, FoldResult, MilMode, MilRunConfig};
use crossmag::params::Params;
use crossmag::raster::RgbImage;
use crossmag::weights::{self, WeightFile};

use crate::config::RunConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

pub const LOCK_FILE: &str = ".crossmag.lock";

/// The fixed directory layout under `run_dir`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings")
    }
    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.checkpoints().join(name)
    }

    pub fn create(root: &Path) -> Result<Self> {
        let rd = Self { root: root.to_path_buf() };
        for d in [rd.data(), rd.checkpoints(), rd.embeddings(), rd.reports(), rd.logs()] {
            fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        }
        Ok(rd)
    }
}

/// Advisory lock held for the lifetime of one command.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(rd: &RunDir) -> Result<Self> {
        let path = rd.root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Invariant(format!(
                "run directory {} is in use by another command (lock file {}; delete it if stale)",
                rd.root.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn write_resolved_config(rd: &RunDir, cfg: &RunConfig) -> Result<()> {
    let path = rd.root.join("resolved_config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&path, e))
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> Result<&'a T> {
    s.as_ref().ok_or_else(|| CliError::Config(format!("missing required section [{name}]")))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read_manifest(rd: &RunDir) -> Result<Manifest> {
    let path = rd.data().join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(CliError::missing(&path, "run `crossmag synth` first"));
    }
    Ok(Manifest::read(&rd.data())?)
}

fn slide_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

// ---------------------------------------------------------------- synth

pub fn cmd_synth(rd: &RunDir, cfg: &RunConfig) -> Result<Manifest> {
    let s = section(&cfg.synth, "synth")?;
    let gen = s.generator();
    gen.validate()?;
    if s.n_slides == 0 {
        return Err(CliError::Config("synth.n_slides must be positive".into()));
    }
    let filter = TissueFilter { white_threshold: s.white_threshold };
    let root = rd.data();
    // Stale tiles from an earlier configuration would survive otherwise.
    let images = root.join("images");
    if images.exists() {
        fs::remove_dir_all(&images).map_err(|e| CliError::io(&images, e))?;
    }
    let mut records: Vec<ManifestRecord> = Vec::new();
    for i in 0..s.n_slides {
        let wsi = data::generate_synthetic_wsi(&gen, slide_seed(cfg.global.seed, i))?;
        let pairs = data::tessellate_filtered(&wsi, filter);
        if pairs.is_empty() {
            warn!("{}: every tile rejected by the tissue filter", wsi.id);
        }
        records.extend(data::write_pairs(&pairs, &root)?);
    }
    let manifest = Manifest::new(records)?;
    let path = manifest.write(&root)?;
    info!("wrote {} records for {} slides to {}", manifest.records.len(), s.n_slides, path.display());
    Ok(manifest)
}

// -------------------------------------------------------------- encoders

fn save_encoder(path: &Path, config: &EncoderConfig, p: &Params<f32>) -> Result<String> {
    let mut wf = WeightFile::new(serde_json::to_value(config).expect("config serializes"));
    wf.add_group("student", p);
    Ok(wf.save(path)?)
}

/// Loads a single-encoder checkpoint; returns the encoder, its weights and
/// the file hash.
pub fn load_encoder(path: &Path, hint: &str) -> Result<(Vit, Params<f32>, String)> {
    if !path.is_file() {
        return Err(CliError::missing(path, hint));
    }
    let wf = WeightFile::load(path)?;
    let config: EncoderConfig = serde_json::from_value(wf.header.config.clone())
        .map_err(|e| CliError::Other(format!("{}: bad encoder config: {e}", path.display())))?;
    let vit = Vit::new(config)?;
    let group = wf.groups().into_iter().next().unwrap_or_else(|| "student".into());
    let p = wf.group::<f32>(&group, vit.layout())?;
    Ok((vit, p, weights::file_sha256(path)?))
}

const DISTILL_HINT: &str = "run `crossmag distill` first";

// --------------------------------------------------------------- distill

#[derive(Debug, Serialize, Deserialize)]
pub struct DistillSummary {
    pub steps: usize,
    pub n_pairs: usize,
    pub final_loss: f64,
    pub smoothed_loss: f64,
    pub init_sha256: String,
    pub xmag_sha256: String,
    pub teacher_sha256: String,
}

pub fn cmd_distill(rd: &RunDir, cfg: &RunConfig) -> Result<DistillSummary> {
    let dcfg: &DistillConfig = section(&cfg.distill, "distill")?;
    dcfg.validate()?;
    let manifest = read_manifest(rd)?;
    let root = rd.data();
    let pairs = manifest
        .records
        .par_iter()
        .map(|r| data::load_pair(&root, r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let seed = cfg.global.seed;

    let t_cfg = cfg.model.teacher_config();
    let t_vit = Vit::new(t_cfg.clone())?;
    let t_path = rd.checkpoint("teacher.bin");
    let t_params = if t_path.is_file() {
        let (vit, p, _) = load_encoder(&t_path, "")?;
        if vit.config() != &t_cfg {
            return Err(CliError::Config(format!(
                "{} holds a different teacher than model.teacher selects",
                t_path.display()
            )));
        }
        p
    } else {
        let p = t_vit.init_params::<f32>(seed ^ 0x7EAC_4E50);
        save_encoder(&t_path, &t_cfg, &p)?;
        p
    };
    let teacher = FrozenTeacher::new(t_vit, t_params);

    let s_cfg = cfg.model.student_config();
    let s_vit = Vit::new(s_cfg.clone())?;
    let init = s_vit.init_params::<f32>(seed.wrapping_add(1));
    let init_path = rd.checkpoint("xmag_init.bin");
    let init_sha = save_encoder(&init_path, &s_cfg, &init)?;
    let stack = StudentStack::new(s_vit, init, teacher.dim(), seed.wrapping_add(2));

    info!("distilling on {} pairs for {} steps", pairs.len(), dcfg.total_steps);
    let every = (dcfg.total_steps / 20).max(1);
    let out = distill::train_distill(&pairs, &teacher, stack, dcfg, seed.wrapping_add(3), |row| {
        if row.step % every == 0 || row.step + 1 == dcfg.total_steps {
            info!("step {:>6}  lr {:.3e}  L {:+.4}  (global {:+.4}, local {:+.4})", row.step, row.lr, row.loss, row.loss_global, row.loss_local);
        }
    })?;

    let xmag_sha = save_encoder(&rd.checkpoint("xmag.bin"), &s_cfg, &out.ema.student)?;
    let mut state = WeightFile::new(serde_json::json!({ "student": s_cfg, "distill": dcfg }));
    for (name, p) in out.last.groups() {
        state.add_group(&format!("last/{name}"), p);
    }
    for (name, p) in out.ema.groups() {
        state.add_group(&format!("ema/{name}"), p);
    }
    state.save(&rd.checkpoint("distill_state.bin"))?;
    let log_path = rd.logs().join("distill_loss.csv");
    distill::write_loss_log(&log_path, &out.log).map_err(|e| CliError::io(&log_path, e))?;

    let summary = DistillSummary {
        steps: out.log.len(),
        n_pairs: pairs.len(),
        final_loss: out.log.last().map_or(f64::NAN, |r| r.loss),
        smoothed_loss: distill::smoothed_loss(&out.log, 50).unwrap_or(f64::NAN),
        init_sha256: init_sha,
        xmag_sha256: xmag_sha,
        teacher_sha256: weights::file_sha256(&t_path)?,
    };
    if !summary.final_loss.is_finite() {
        return Err(CliError::Invariant(format!("final distillation loss is {}", summary.final_loss)));
    }
    write_json(&rd.reports().join("distill_summary.json"), &summary)?;
    info!("smoothed L {:+.4}; delivered encoder sha256 {}", summary.smoothed_loss, summary.xmag_sha256);
    Ok(summary)
}

// ------------------------------------------------------------ predictions

/// Per-sample class scores of one or more models on a shared test set,
/// consumed by `stats`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub task: String,
    pub n_classes: usize,
    pub sample_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub models: Vec<ModelScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScores {
    pub name: String,
    /// `[n, n_classes]` row-major.
    pub scores: Vec<Vec<f64>>,
}

impl ModelScores {
    pub fn matrix(&self) -> Array2<f64> {
        let n = self.scores.len();
        let c = self.scores.first().map_or(0, Vec::len);
        Array2::from_shape_vec((n, c), self.scores.iter().flatten().copied().collect()).expect("rectangular scores")
    }
}

fn rows_of(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn pooled_predictions(task: &str, model: &str, folds: &[FoldResult<f32>]) -> Predictions {
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for f in folds {
        ids.extend(f.test_slides.iter().cloned());
        labels.extend(f.test_labels.iter().copied());
        scores.extend(rows_of(&f.test_scores));
    }
    let n_classes = scores.first().map_or(2, Vec::len);
    Predictions {
        task: task.into(),
        n_classes,
        sample_ids: ids,
        labels,
        models: vec![ModelScores { name: model.into(), scores }],
    }
}

fn n_boot(cfg: &RunConfig) -> usize {
    cfg.stats.as_ref().map_or(eval::N_BOOT, |s| s.n_boot)
}

/// Fold rows plus one pooled out-of-fold row with bootstrap intervals.
fn fold_report(task: &str, model: &str, folds: &[FoldResult<f32>], n_boot: usize, seed: u64) -> Result<Vec<ReportRow>> {
    let mut rows: Vec<ReportRow> = folds
        .iter()
        .map(|f| ReportRow {
            task: task.into(),
            model: model.into(),
            fold: f.metrics.fold.to_string(),
            auc: f.metrics.auc,
            auc_lo: f64::NAN,
            auc_hi: f64::NAN,
            acc: f.metrics.acc,
            f1: f.metrics.f1,
            f1_lo: f64::NAN,
            f1_hi: f64::NAN,
        })
        .collect();
    let pred = pooled_predictions(task, model, folds);
    match eval::metric_report(pred.models[0].matrix().view(), &pred.labels, n_boot, seed) {
        Ok(r) => rows.push(ReportRow::from_report(task, model, "pooled", &r)),
        Err(eval::EvalError::SingleClass) => warn!("{task}: pooled labels hold one class; no pooled row"),
        Err(e) => return Err(e.into()),
    }
    Ok(rows)
}

fn save_fold_checkpoints(rd: &RunDir, prefix: &str, cfg: &MilRunConfig, folds: &[FoldResult<f32>]) -> Result<()> {
    for f in folds {
        let mut wf = WeightFile::new(serde_json::json!({ "mil": cfg, "fold": f.metrics.fold }));
        if let Some(b) = &f.backbone {
            wf.add_group("student", b);
        }
        wf.add_group("head", &f.head);
        wf.save(&rd.checkpoint(&format!("{prefix}_fold{}.bin", f.metrics.fold)))?;
    }
    Ok(())
}

// ------------------------------------------------------------------- mil

fn mil_config(cfg: &RunConfig) -> MilRunConfig {
    cfg.mil.clone().unwrap_or_default()
}

fn slide_labels(manifest: &Manifest) -> BTreeMap<String, usize> {
    manifest.records.iter().map(|r| (r.slide_id.clone(), r.slide_label)).collect()
}

fn embedding_path(rd: &RunDir, slide_id: &str) -> PathBuf {
    rd.embeddings().join(format!("{slide_id}.f32"))
}

/// Bags from the delivered encoder, exported under `embeddings/`. Falls back
/// to previously exported embeddings when no checkpoint is present.
fn frozen_bags(rd: &RunDir, manifest: &Manifest) -> Result<Vec<Bag<f32>>> {
    let ckpt = rd.checkpoint("xmag.bin");
    if ckpt.is_file() {
        let (vit, p, sha) = load_encoder(&ckpt, DISTILL_HINT)?;
        let bags = mil::build_bags(&rd.data(), manifest, &vit, &p)?;
        for b in &bags {
            eval::export_embeddings(&embedding_path(rd, &b.slide_id), b.embeddings.view(), &b.slide_id, &sha)?;
        }
        info!("embedded {} slides with {}", bags.len(), ckpt.display());
        return Ok(bags);
    }
    let labels = slide_labels(manifest);
    let mut bags = Vec::with_capacity(labels.len());
    for (id, &label) in &labels {
        let path = embedding_path(rd, id);
        if !path.is_file() {
            return Err(CliError::missing(&ckpt, "no delivered encoder and no exported embeddings; run `crossmag distill` first"));
        }
        let (m, _) = eval::read_embeddings(&path)?;
        bags.push(Bag { slide_id: id.clone(), embeddings: m, label });
    }
    info!("reusing exported embeddings for {} slides", bags.len());
    Ok(bags)
}

pub fn cmd_mil(rd: &RunDir, cfg: &RunConfig) -> Result<()> {
    let mcfg = mil_config(cfg);
    mcfg.validate()?;
    if mcfg.mode == MilMode::E2e {
        return run_e2e(rd, cfg, mcfg);
    }
    let manifest = read_manifest(rd)?;
    let bags = frozen_bags(rd, &manifest)?;
    let folds = mil::train_mil_frozen(&bags, &mcfg, cfg.global.seed)?;
    finish_mil(rd, cfg, &mcfg, "mil", "xmag-abmil", &folds)
}

fn finish_mil(rd: &RunDir, cfg: &RunConfig, mcfg: &MilRunConfig, prefix: &str, model: &str, folds: &[FoldResult<f32>]) -> Result<()> {
    for f in folds {
        info!("{prefix} fold {}: AUC {:.3}  acc {:.3}  F1 {:.3}", f.metrics.fold, f.metrics.auc, f.metrics.acc, f.metrics.f1);
    }
    let metrics: Vec<_> = folds.iter().map(|f| f.metrics.clone()).collect();
    eval::write_csv(&rd.reports().join(format!("{prefix}_folds.csv")), &metrics)?;
    let report = fold_report("slide", model, folds, n_boot(cfg), cfg.global.seed)?;
    eval::write_csv(&rd.reports().join(format!("{prefix}_report.csv")), &report)?;
    write_json(&rd.reports().join(format!("{prefix}_predictions.json")), &pooled_predictions("slide", model, folds))?;
    save_fold_checkpoints(rd, prefix, mcfg, folds)
}

// ------------------------------------------------------------------- e2e

pub fn cmd_e2e(rd: &RunDir, cfg: &RunConfig) -> Result<()> {
    let mcfg = MilRunConfig { mode: MilMode::E2e, ..mil_config(cfg) };
    mcfg.validate()?;
    run_e2e(rd, cfg, mcfg)
}

fn run_e2e(rd: &RunDir, cfg: &RunConfig, mcfg: MilRunConfig) -> Result<()> {
    let manifest = read_manifest(rd)?;
    let (vit, init, _) = load_encoder(&rd.checkpoint("xmag.bin"), DISTILL_HINT)?;
    let slides = mil::load_all_slides(&rd.data(), &manifest)?;
    let seed = cfg.global.seed;
    let e2e = cfg.e2e.clone().unwrap_or(crate::config::E2eSection { ablation: false, grid: None });
    if e2e.ablation {
        let grid = e2e.grid.unwrap_or_else(|| mil::ablation_grid(vit.depth()));
        if let Some(&k) = grid.iter().find(|&&k| k > vit.depth()) {
            return Err(CliError::Config(format!("e2e.grid entry {k} exceeds student depth {}", vit.depth())));
        }
        info!("ablation over k = {grid:?}");
        let (rows, folds) = mil::run_ablation(&slides, &vit, &init, &mcfg, &grid, seed)?;
        for r in &rows {
            info!("k = {:>2}: AUC {:.3} ± {:.3}", r.k, r.auc_mean, r.auc_std);
        }
        eval::write_csv(&rd.reports().join("ablation.csv"), &rows)?;
        eval::write_csv(&rd.reports().join("ablation_folds.csv"), &folds)?;
        return Ok(());
    }
    let folds = mil::train_mil_e2e(&slides, &vit, &init, &mcfg, seed)?;
    finish_mil(rd, cfg, &mcfg, "e2e", &format!("e2e-xmag-k{}", mcfg.n_trainable_blocks), &folds)
}

// ----------------------------------------------------------------- probe

fn embed_all(vit: &Vit, p: &Params<f32>, tiles: &[RgbImage]) -> Result<Array2<f64>> {
    let refs: Vec<&RgbImage> = tiles.iter().collect();
    Ok(mil::embed_tiles(vit, p, &refs)?.mapv(f64::from))
}

/// Patch-level probe of the delivered encoder against its own
/// initialization, labels being each tile's dominant phenotype.
pub fn cmd_probe(rd: &RunDir, cfg: &RunConfig) -> Result<()> {
    let pcfg = cfg.probe.clone().unwrap_or_default();
    let manifest = read_manifest(rd)?;
    let models = [("xmag", rd.checkpoint("xmag.bin")), ("init", rd.checkpoint("xmag_init.bin"))];
    for (_, path) in &models {
        if !path.is_file() {
            return Err(CliError::missing(path, DISTILL_HINT));
        }
    }
    let root = rd.data();
    let tiles = manifest
        .records
        .par_iter()
        .map(|r| data::load_lowmag(&root, r))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let labels: Vec<usize> = manifest.records.iter().map(ManifestRecord::dominant_region).collect();
    let ids: Vec<String> = manifest.records.iter().map(|r| format!("{}/r{}c{}", r.slide_id, r.grid_row, r.grid_col)).collect();
    let n_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));

    let mut report = Vec::new();
    let mut scores = Vec::new();
    let mut test_idx: Option<Vec<usize>> = None;
    for (name, path) in &models {
        let (vit, p, _) = load_encoder(path, DISTILL_HINT)?;
        let emb = embed_all(&vit, &p, &tiles)?;
        let out = eval::linear_probe(emb.view(), &labels, n_classes, &pcfg, cfg.global.seed)?;
        info!("probe {name}: AUC {:.3}  acc {:.3}  F1 {:.3}  (n_test {})", out.report.auc, out.report.accuracy, out.report.f1, out.report.n);
        report.push(ReportRow::from_report("patch_region", name, "holdout", &out.report));
        scores.push(ModelScores { name: name.to_string(), scores: rows_of(&out.test_scores) });
        test_idx = Some(out.test_indices);
    }
    let test_idx = test_idx.expect("two models");
    eval::write_csv(&rd.reports().join("probe_report.csv"), &report)?;
    let pred = Predictions {
        task: "patch_region".into(),
        n_classes,
        sample_ids: test_idx.iter().map(|&i| ids[i].clone()).collect(),
        labels: test_idx.iter().map(|&i| labels[i]).collect(),
        models: scores,
    };
    write_json(&rd.reports().join("probe_predictions.json"), &pred)
}

// ----------------------------------------------------------------- stats

fn prediction_files(rd: &RunDir) -> Result<Vec<PathBuf>> {
    let dir = rd.reports();
    let mut files: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| CliError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_predictions.json")))
        .collect();
    files.sort();
    Ok(files)
}

pub fn cmd_stats(rd: &RunDir, cfg: &RunConfig) -> Result<()> {
    let n_boot = n_boot(cfg);
    let seed = cfg.global.seed;
    let files = prediction_files(rd)?;
    if files.is_empty() {
        return Err(CliError::missing(&rd.reports().join("*_predictions.json"), "run `crossmag probe`, `mil` or `e2e` first"));
    }
    let mut report = Vec::new();
    let mut paired = Vec::new();
    for path in files {
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let pred: Predictions = serde_json::from_str(&text).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
        let task = &pred.task;
        let mut preds = Vec::new();
        for m in &pred.models {
            let s = m.matrix();
            if s.nrows() != pred.labels.len() || s.ncols() != pred.n_classes {
                return Err(CliError::Invariant(format!("{}: model {} has a {:?} score matrix", path.display(), m.name, s.dim())));
            }
            match eval::metric_report(s.view(), &pred.labels, n_boot, seed) {
                Ok(r) => report.push(ReportRow::from_report(task, &m.name, "all", &r)),
                Err(eval::EvalError::SingleClass) => warn!("{task}/{}: single-class labels, skipped", m.name),
                Err(e) => return Err(e.into()),
            }
            preds.push(eval::argmax_rows(s.view()));
        }
        for a in 0..pred.models.len() {
            for b in a + 1..pred.models.len() {
                let (ma, mb) = (&pred.models[a], &pred.models[b]);
                let mut tests = vec![
                    eval::mcnemar_test(&preds[a], &preds[b], &pred.labels)?,
                    eval::bootstrap_f1_test(&preds[a], &preds[b], &pred.labels, pred.n_classes, n_boot, seed)?,
                ];
                if pred.n_classes == 2 {
                    let col = |m: &ModelScores| m.matrix().index_axis(Axis(1), 1).to_vec();
                    let pos: Vec<bool> = pred.labels.iter().map(|&l| l == 1).collect();
                    match eval::delong_test(&col(ma), &col(mb), &pos) {
                        Ok(t) => tests.insert(0, t),
                        Err(eval::EvalError::SingleClass) => warn!("{task}: single-class labels, DeLong skipped"),
                        Err(e) => return Err(e.into()),
                    }
                } else {
                    info!("{task}: {} classes, DeLong applies to binary tasks only", pred.n_classes);
                }
                for t in tests {
                    if let Some(flag) = &t.flag {
                        warn!("{task} {} vs {} {}: {flag}", ma.name, mb.name, t.test.as_str());
                    }
                    paired.push(PairedRow {
                        task: task.clone(),
                        model_a: ma.name.clone(),
                        model_b: mb.name.clone(),
                        test: t.test.as_str().into(),
                        statistic: t.statistic,
                        p: t.p_value,
                    });
                }
            }
        }
    }
    eval::write_csv(&rd.reports().join("stats_report.csv"), &report)?;
    eval::write_csv(&rd.reports().join("paired_tests.csv"), &paired)?;
    info!("{} metric rows, {} paired tests", report.len(), paired.len());
    Ok(())
}

// ----------------------------------------------------------------- bench

pub fn cmd_bench(rd: &RunDir, cfg: &RunConfig) -> Result<Vec<SpeedFixture>> {
    let b = cfg.bench.clone().unwrap_or_default();
    let fixtures = match &b.fixtures {
        Some(p) if !p.is_file() => return Err(CliError::missing(p, "bench.fixtures points at a missing file")),
        Some(p) => bench::read_fixtures(p)?,
        None => bench::paper_fixtures(),
    };
    let mut measurements: Vec<ThroughputReport> = Vec::new();
    if b.measure {
        for c in [cfg.model.student_config(), cfg.model.teacher_config()] {
            let vit = Vit::new(c)?;
            let p = vit.init_params::<f32>(cfg.global.seed);
            let r = bench::time_encoder(&vit, &p, b.n_patches, b.batch_size, b.warmup_batches)?;
            info!("d = {}: {:.1} patches/s", vit.embed_dim(), r.patches_per_sec);
            measurements.push(r);
        }
    }
    let dir = rd.reports().join("bench");
    let (rows, files) = bench::emit_speed_table(&fixtures, &b.reference, &measurements, &dir)?;
    for r in &rows {
        info!(
            "{:<8} {:>5} patches  {:>7.2} s/WSI  {:>5.2} WSIs/min  {:>6.2}x",
            r.model,
            r.patches_per_wsi,
            r.seconds_per_wsi,
            r.wsis_per_minute.unwrap_or(f64::NAN),
            r.speedup.unwrap_or(f64::NAN)
        );
    }
    let ratio = bench::dataset_patch_ratio(bench::PATCHES_5X, bench::PATCHES_20X)?;
    write_json(&dir.join("dataset_ratio.json"), &serde_json::json!({
        "patches_5x": bench::PATCHES_5X,
        "patches_20x": bench::PATCHES_20X,
        "ratio": ratio,
    }))?;
    info!("wrote {}", files.table.display());
    Ok(rows)
}
