//! Slide-level classification: bag construction, attention MIL head,
//! frozen-encoder training and end-to-end training with partial unfreezing.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{read_png, DataError, Manifest, ManifestRecord};
use crate::encoder::{set_freeze_plan, ActivationMode, EncoderError, Vit};
use crate::eval::{argmax_rows, classification_metrics, macro_auc, EvalError};
use crate::nn::{normal_init, Linear};
use crate::optim::{AdamW, AdamWConfig, OptimError};
use crate::params::{LayoutBuilder, ParamId, ParamLayout, Params, Real};
use crate::raster::RgbImage;

/// Tiles per encoder call when embedding a bag.
const EMBED_CHUNK: usize = 32;

#[derive(Debug, Error)]
pub enum MilError {
    #[error("empty bag")]
    EmptyBag,
    #[error("slide {slide_id}: missing tile (row {row}, col {col}): {source}")]
    MissingTile {
        slide_id: String,
        row: usize,
        col: usize,
        #[source]
        source: DataError,
    },
    #[error("{n_slides} slides cannot be split into {folds} folds")]
    TooFewSlides { n_slides: usize, folds: usize },
    #[error("bag dim {got}, head expects {want}")]
    Dim { got: usize, want: usize },
    #[error("label {label} outside 0..{n_classes}")]
    Label { label: usize, n_classes: usize },
    #[error("slide {slide_id}: activation budget exceeded, measured {measured} floats > budget {budget}")]
    ActivationBudget { slide_id: String, measured: usize, budget: usize },
    #[error("non-finite loss on slide {slide_id} (fold {fold}, epoch {epoch})")]
    NonFinite { slide_id: String, fold: usize, epoch: usize },
    #[error("invalid MIL config: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Patch embeddings of one slide, in manifest tile order.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag<F> {
    pub slide_id: String,
    /// `[M, d_S]`
    pub embeddings: Array2<F>,
    pub label: usize,
}

impl<F> Bag<F> {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.nrows() == 0
    }
}

/// 5x tiles of one slide, for end-to-end training.
#[derive(Debug, Clone)]
pub struct SlideTiles {
    pub slide_id: String,
    pub tiles: Vec<RgbImage>,
    pub label: usize,
}

/// Class-token embeddings of `tiles`, computed in fixed-size chunks so the
/// result does not depend on who calls it.
pub fn embed_tiles<F: Real>(vit: &Vit, p: &Params<F>, tiles: &[&RgbImage]) -> Result<Array2<F>, MilError> {
    if tiles.is_empty() {
        return Err(MilError::EmptyBag);
    }
    let mut out = Array2::zeros((tiles.len(), vit.embed_dim()));
    for (c, chunk) in tiles.chunks(EMBED_CHUNK).enumerate() {
        let h = vit.forward(p, chunk)?.class_tokens();
        out.slice_mut(ndarray::s![c * EMBED_CHUNK..c * EMBED_CHUNK + chunk.len(), ..]).assign(&h);
    }
    Ok(out)
}

/// Loads the 5x tiles of a slide's manifest records.
pub fn load_slide_tiles(root: &Path, records: &[&ManifestRecord]) -> Result<SlideTiles, MilError> {
    let first = records.first().ok_or(MilError::EmptyBag)?;
    let tiles = records
        .iter()
        .map(|r| {
            read_png(&root.join(&r.lowmag_path)).map_err(|source| MilError::MissingTile {
                slide_id: r.slide_id.clone(),
                row: r.grid_row,
                col: r.grid_col,
                source,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SlideTiles { slide_id: first.slide_id.clone(), tiles, label: first.slide_label })
}

/// Embeds one slide's 5x tiles with an inference-mode encoder.
pub fn build_bag<F: Real>(root: &Path, records: &[&ManifestRecord], vit: &Vit, p: &Params<F>) -> Result<Bag<F>, MilError> {
    let slide = load_slide_tiles(root, records)?;
    let refs: Vec<&RgbImage> = slide.tiles.iter().collect();
    Ok(Bag { slide_id: slide.slide_id, embeddings: embed_tiles(vit, p, &refs)?, label: slide.label })
}

/// One bag per slide, in first-appearance order, built in parallel.
pub fn build_bags<F: Real>(root: &Path, manifest: &Manifest, vit: &Vit, p: &Params<F>) -> Result<Vec<Bag<F>>, MilError> {
    manifest
        .slide_ids()
        .par_iter()
        .map(|id| {
            let recs: Vec<&ManifestRecord> = manifest.records_for(id).collect();
            build_bag(root, &recs, vit, p)
        })
        .collect()
}

pub fn load_all_slides(root: &Path, manifest: &Manifest) -> Result<Vec<SlideTiles>, MilError> {
    manifest
        .slide_ids()
        .par_iter()
        .map(|id| {
            let recs: Vec<&ManifestRecord> = manifest.records_for(id).collect();
            load_slide_tiles(root, &recs)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbmilConfig {
    pub d_in: usize,
    pub d_a: usize,
    pub n_classes: usize,
    pub gated: bool,
}

/// `a = softmax(wᵀ tanh(V h))` (optionally gated by `σ(U h)`), `z = Σ aᵢ hᵢ`,
/// scores `= Wc z + b`.
#[derive(Debug, Clone)]
pub struct AbmilHead {
    cfg: AbmilConfig,
    layout: Arc<ParamLayout>,
    pub v: ParamId,
    pub u: Option<ParamId>,
    pub w: ParamId,
    pub classifier: Linear,
}

#[derive(Debug, Clone)]
pub struct AbmilOutput<F> {
    pub scores: Array1<F>,
    pub attention: Array1<F>,
}

struct AbmilCache<F> {
    t: Array2<F>,
    gate: Option<Array2<F>>,
    attention: Array1<F>,
    z: Array1<F>,
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn softmax<F: Real>(x: ArrayView1<'_, F>) -> Array1<F> {
    let m = x.fold(F::neg_infinity(), |a, &b| a.max(b));
    let e = x.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// Row indices sorted by row contents.
fn canonical_order<F: Real>(h: ArrayView2<'_, F>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..h.nrows()).collect();
    order.sort_by(|&a, &b| {
        h.row(a)
            .iter()
            .zip(h.row(b).iter())
            .map(|(x, y)| x.as_f64().total_cmp(&y.as_f64()))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

impl AbmilHead {
    pub fn new(cfg: AbmilConfig) -> Result<Self, MilError> {
        if cfg.d_in == 0 || cfg.d_a == 0 || cfg.n_classes < 2 {
            return Err(MilError::Config(format!("bad head dims {cfg:?}")));
        }
        let mut lb = LayoutBuilder::new();
        let v = lb.weight("attn_v", &[cfg.d_in, cfg.d_a]);
        let u = cfg.gated.then(|| lb.weight("attn_u", &[cfg.d_in, cfg.d_a]));
        let w = lb.weight("attn_w", &[cfg.d_a]);
        let classifier = Linear::declare(&mut lb, "classifier", cfg.d_in, cfg.n_classes);
        Ok(Self { cfg, layout: lb.finish(), v, u, w, classifier })
    }

    pub fn config(&self) -> &AbmilConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn init_params<F: Real>(&self, seed: u64) -> Params<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::zeros(self.layout.clone());
        let s_in = (1.0 / self.cfg.d_in as f64).sqrt();
        normal_init(&mut p, self.v, s_in, &mut rng);
        if let Some(u) = self.u {
            normal_init(&mut p, u, s_in, &mut rng);
        }
        normal_init(&mut p, self.w, (1.0 / self.cfg.d_a as f64).sqrt(), &mut rng);
        self.classifier.init(&mut p, s_in, &mut rng);
        p
    }

    fn forward_cached<F: Real>(&self, p: &Params<F>, h: ArrayView2<'_, F>) -> Result<(AbmilOutput<F>, AbmilCache<F>), MilError> {
        if h.nrows() == 0 {
            return Err(MilError::EmptyBag);
        }
        if h.ncols() != self.cfg.d_in {
            return Err(MilError::Dim { got: h.ncols(), want: self.cfg.d_in });
        }
        // Work in a content-defined instance order so that every reduction
        // over the bag, and hence the class scores, is bitwise independent
        // of how the bag was ordered.
        let order = canonical_order(h);
        let hs = h.select(Axis(0), &order);
        let t = hs.dot(&p.mat(self.v)).mapv(|x| x.tanh());
        let gate = self.u.map(|u| hs.dot(&p.mat(u)).mapv(sigmoid));
        let gated = match &gate {
            Some(g) => &t * g,
            None => t.clone(),
        };
        let logits = gated.dot(&p.vec(self.w));
        let attention = softmax(logits.view());
        let z = hs.t().dot(&attention);
        let mut inv = vec![0; order.len()];
        for (pos, &i) in order.iter().enumerate() {
            inv[i] = pos;
        }
        let t = t.select(Axis(0), &inv);
        let gate = gate.map(|g| g.select(Axis(0), &inv));
        let attention = attention.select(Axis(0), &inv);
        let scores = self.classifier.forward(p, z.view().insert_axis(Axis(0))).row(0).to_owned();
        Ok((AbmilOutput { scores, attention: attention.clone() }, AbmilCache { t, gate, attention, z }))
    }

    /// Cross-entropy loss on one bag; accumulates head gradients into `g` and
    /// returns `(loss, output, dL/dh)`.
    pub fn loss_grad<F: Real>(
        &self,
        p: &Params<F>,
        g: &mut Params<F>,
        h: ArrayView2<'_, F>,
        label: usize,
        class_weight: F,
    ) -> Result<(F, AbmilOutput<F>, Array2<F>), MilError> {
        if label >= self.cfg.n_classes {
            return Err(MilError::Label { label, n_classes: self.cfg.n_classes });
        }
        let (out, cache) = self.forward_cached(p, h)?;
        let prob = softmax(out.scores.view());
        let loss = -prob[label].ln() * class_weight;
        let mut dscores = prob;
        dscores[label] -= F::one();
        dscores *= class_weight;

        let dz = self
            .classifier
            .backward(p, g, cache.z.view().insert_axis(Axis(0)), dscores.view().insert_axis(Axis(0)), true)
            .unwrap()
            .row(0)
            .to_owned();
        let a = &cache.attention;
        // z = Hᵀa
        let mut dh = Array2::zeros(h.raw_dim());
        for (i, mut row) in dh.rows_mut().into_iter().enumerate() {
            row.assign(&(&dz * a[i]));
        }
        let da = h.dot(&dz);
        let dot = a.dot(&da);
        let dlogits = a * &(&da - dot);
        let w = p.vec(self.w);
        let gated = match &cache.gate {
            Some(gt) => &cache.t * gt,
            None => cache.t.clone(),
        };
        if p.is_trainable(self.w) {
            let mut gw = g.vec_mut(self.w);
            gw += &gated.t().dot(&dlogits);
        }
        // d(gated) = dlogits ⊗ w
        let dgated = dlogits.view().insert_axis(Axis(1)).dot(&w.view().insert_axis(Axis(0)));
        let dt = match &cache.gate {
            Some(gt) => &dgated * gt,
            None => dgated.clone(),
        };
        let dpre_v = &dt * &cache.t.mapv(|x| F::one() - x * x);
        if p.is_trainable(self.v) {
            let mut gv = g.mat_mut(self.v);
            gv += &h.t().dot(&dpre_v);
        }
        dh += &dpre_v.dot(&p.mat(self.v).t());
        if let (Some(u), Some(gt)) = (self.u, &cache.gate) {
            let dpre_u = &(&dgated * &cache.t) * &gt.mapv(|s| s * (F::one() - s));
            if p.is_trainable(u) {
                let mut gu = g.mat_mut(u);
                gu += &h.t().dot(&dpre_u);
            }
            dh += &dpre_u.dot(&p.mat(u).t());
        }
        Ok((loss, out, dh))
    }
}

pub fn abmil_forward<F: Real>(head: &AbmilHead, p: &Params<F>, bag: &Bag<F>) -> Result<AbmilOutput<F>, MilError> {
    Ok(head.forward_cached(p, bag.embeddings.view())?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MilMode {
    Frozen,
    E2e,
}

impl MilMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MilMode::Frozen => "frozen",
            MilMode::E2e => "e2e",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MilRunConfig {
    #[serde(default = "d_mode")]
    pub mode: MilMode,
    /// Trainable trailing blocks in e2e mode; ignored when frozen.
    #[serde(default = "d_k")]
    pub n_trainable_blocks: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_backbone_lr")]
    pub backbone_lr: f64,
    #[serde(default = "d_folds")]
    pub folds: usize,
    #[serde(default = "d_d_a")]
    pub d_a: usize,
    #[serde(default)]
    pub gated: bool,
    #[serde(default)]
    pub class_weighting: bool,
    /// e2e only: cap on tiles per bag per step, sampled without replacement.
    #[serde(default)]
    pub max_patches_per_bag: Option<usize>,
    /// e2e only: cap on retained activation floats per step.
    #[serde(default)]
    pub activation_budget: Option<usize>,
    #[serde(default = "d_checkpointing")]
    pub checkpointing: bool,
}

fn d_mode() -> MilMode {
    MilMode::Frozen
}
fn d_k() -> usize {
    2
}
fn d_epochs() -> usize {
    20
}
fn d_lr() -> f64 {
    1e-3
}
fn d_backbone_lr() -> f64 {
    1e-4
}
fn d_folds() -> usize {
    5
}
fn d_d_a() -> usize {
    64
}
fn d_checkpointing() -> bool {
    true
}

impl Default for MilRunConfig {
    fn default() -> Self {
        Self {
            mode: d_mode(),
            n_trainable_blocks: d_k(),
            epochs: d_epochs(),
            lr: d_lr(),
            backbone_lr: d_backbone_lr(),
            folds: d_folds(),
            d_a: d_d_a(),
            gated: false,
            class_weighting: false,
            max_patches_per_bag: None,
            activation_budget: None,
            checkpointing: true,
        }
    }
}

impl MilRunConfig {
    pub fn validate(&self) -> Result<(), MilError> {
        if self.folds < 2 {
            return Err(MilError::Config("folds must be at least 2".into()));
        }
        if !(self.lr >= 0.0 && self.backbone_lr >= 0.0) {
            return Err(MilError::Config("learning rates must be nonnegative".into()));
        }
        if self.max_patches_per_bag == Some(0) {
            return Err(MilError::Config("max_patches_per_bag must be positive".into()));
        }
        Ok(())
    }
}

/// Seeded k-fold assignment of `n` slides; returns `(train, test)` index
/// lists per fold.
pub fn kfold_split(n: usize, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>, MilError> {
    if folds < 2 || n < folds {
        return Err(MilError::TooFewSlides { n_slides: n, folds });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..folds)
        .map(|f| {
            let mut train = Vec::new();
            let mut test = Vec::new();
            for (pos, &i) in order.iter().enumerate() {
                if pos % folds == f {
                    test.push(i)
                } else {
                    train.push(i)
                }
            }
            (train, test)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub mode: String,
    pub k: usize,
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct FoldResult<F> {
    pub metrics: FoldMetrics,
    pub head: Params<F>,
    /// Only set in e2e mode.
    pub backbone: Option<Params<F>>,
    pub test_slides: Vec<String>,
    pub test_labels: Vec<usize>,
    /// `[n_test, n_classes]` softmax scores.
    pub test_scores: Array2<f64>,
}

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(fold as u64)
}

fn n_classes_of(labels: impl Iterator<Item = usize>) -> usize {
    labels.max().map_or(2, |m| (m + 1).max(2))
}

fn class_weights(labels: &[usize], n_classes: usize, enabled: bool) -> Vec<f64> {
    if !enabled {
        return vec![1.0; n_classes];
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (n_classes as f64 * c as f64) })
        .collect()
}

fn score_fold(fold: usize, mode: MilMode, k: usize, labels: &[usize], scores: &Array2<f64>) -> Result<FoldMetrics, MilError> {
    let preds = argmax_rows(scores.view());
    let (acc, f1) = classification_metrics(&preds, labels, scores.ncols())?;
    let auc = match macro_auc(scores.view(), labels) {
        Ok(a) => a,
        Err(EvalError::SingleClass) => {
            log::warn!("fold {fold}: held-out labels are single-class; auc undefined");
            f64::NAN
        }
        Err(e) => return Err(e.into()),
    };
    Ok(FoldMetrics { fold, mode: mode.as_str().into(), k, auc, acc, f1 })
}

fn probs_f64<F: Real>(scores: &Array1<F>) -> Array1<f64> {
    softmax(scores.mapv(|v| v.as_f64()).view())
}

/// Trains a fresh head per fold on precomputed bags. The encoder is never
/// touched.
pub fn train_mil_frozen<F: Real>(bags: &[Bag<F>], cfg: &MilRunConfig, seed: u64) -> Result<Vec<FoldResult<F>>, MilError> {
    cfg.validate()?;
    let d = bags.first().map(|b| b.embeddings.ncols()).ok_or(MilError::TooFewSlides { n_slides: 0, folds: cfg.folds })?;
    let n_classes = n_classes_of(bags.iter().map(|b| b.label));
    let head = AbmilHead::new(AbmilConfig { d_in: d, d_a: cfg.d_a, n_classes, gated: cfg.gated })?;
    let splits = kfold_split(bags.len(), cfg.folds, seed)?;
    let mut results = Vec::with_capacity(splits.len());
    for (fold, (train, test)) in splits.into_iter().enumerate() {
        let fs = fold_seed(seed, fold);
        let mut hp = head.init_params::<F>(fs);
        let mut opt = AdamW::new(&hp, AdamWConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(fs ^ 0x5EED);
        let train_labels: Vec<usize> = train.iter().map(|&i| bags[i].label).collect();
        let cw = class_weights(&train_labels, n_classes, cfg.class_weighting);
        let mut order = train.clone();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let bag = &bags[i];
                let mut g = hp.zeros_like();
                let (loss, _, _) = head.loss_grad(&hp, &mut g, bag.embeddings.view(), bag.label, F::num(cw[bag.label]))?;
                if !loss.is_finite() {
                    return Err(MilError::NonFinite { slide_id: bag.slide_id.clone(), fold, epoch });
                }
                opt.step(&mut hp, &g, cfg.lr)?;
            }
        }
        let mut scores = Array2::zeros((test.len(), n_classes));
        for (r, &i) in test.iter().enumerate() {
            let out = abmil_forward(&head, &hp, &bags[i])?;
            scores.row_mut(r).assign(&probs_f64(&out.scores));
        }
        let labels: Vec<usize> = test.iter().map(|&i| bags[i].label).collect();
        results.push(FoldResult {
            metrics: score_fold(fold, MilMode::Frozen, 0, &labels, &scores)?,
            head: hp,
            backbone: None,
            test_slides: test.iter().map(|&i| bags[i].slide_id.clone()).collect(),
            test_labels: labels,
            test_scores: scores,
        });
    }
    Ok(results)
}

/// Loss and gradients of one bag through the (partially trainable) encoder
/// and the head. Returns `(loss, backbone grads, head grads, retained floats)`.
pub fn e2e_loss_grads<F: Real>(
    vit: &Vit,
    backbone: &Params<F>,
    head: &AbmilHead,
    hp: &Params<F>,
    tiles: &[&RgbImage],
    label: usize,
    mode: ActivationMode,
) -> Result<(F, Params<F>, Params<F>, usize), MilError> {
    e2e_step(vit, backbone, head, hp, tiles, label, F::one(), mode)
}

#[allow(clippy::too_many_arguments)]
fn e2e_step<F: Real>(
    vit: &Vit,
    backbone: &Params<F>,
    head: &AbmilHead,
    hp: &Params<F>,
    tiles: &[&RgbImage],
    label: usize,
    weight: F,
    mode: ActivationMode,
) -> Result<(F, Params<F>, Params<F>, usize), MilError> {
    let mut gh = hp.zeros_like();
    let mut gb = backbone.zeros_like();
    let any_trainable = backbone.trainable_flags().iter().any(|&t| t);
    if !any_trainable {
        let h = embed_tiles(vit, backbone, tiles)?;
        let (loss, _, _) = head.loss_grad(hp, &mut gh, h.view(), label, weight)?;
        return Ok((loss, gb, gh, 0));
    }
    let (out, trace) = vit.forward_train(backbone, tiles, mode)?;
    let retained = trace.retained_floats();
    let h = out.class_tokens();
    let (loss, _, dh) = head.loss_grad(hp, &mut gh, h.view(), label, weight)?;
    let mut d_hidden = Array2::zeros(out.hidden.raw_dim());
    for b in 0..out.batch {
        d_hidden.row_mut(b * out.seq).assign(&dh.row(b));
    }
    vit.backward(backbone, &mut gb, trace, d_hidden.view());
    Ok((loss, gb, gh, retained))
}

/// Joint training of the last `k` encoder blocks and a fresh head per fold.
/// With `k = 0` this performs exactly the computation of
/// [`train_mil_frozen`] on bags built by [`embed_tiles`].
pub fn train_mil_e2e<F: Real>(
    slides: &[SlideTiles],
    vit: &Vit,
    init: &Params<F>,
    cfg: &MilRunConfig,
    seed: u64,
) -> Result<Vec<FoldResult<F>>, MilError> {
    cfg.validate()?;
    let k = cfg.n_trainable_blocks;
    let n_classes = n_classes_of(slides.iter().map(|s| s.label));
    let head = AbmilHead::new(AbmilConfig { d_in: vit.embed_dim(), d_a: cfg.d_a, n_classes, gated: cfg.gated })?;
    let splits = kfold_split(slides.len(), cfg.folds, seed)?;
    let mode = if cfg.checkpointing { ActivationMode::Checkpoint } else { ActivationMode::Full };
    let mut results = Vec::with_capacity(splits.len());
    for (fold, (train, test)) in splits.into_iter().enumerate() {
        let fs = fold_seed(seed, fold);
        let mut hp = head.init_params::<F>(fs);
        let mut bp = init.clone();
        set_freeze_plan(vit, &mut bp, k)?;
        let mut opt_h = AdamW::new(&hp, AdamWConfig::default());
        let mut opt_b = AdamW::new(&bp, AdamWConfig::default());
        let mut rng = ChaCha8Rng::seed_from_u64(fs ^ 0x5EED);
        let mut sub_rng = ChaCha8Rng::seed_from_u64(fs ^ 0xB46);
        let train_labels: Vec<usize> = train.iter().map(|&i| slides[i].label).collect();
        let cw = class_weights(&train_labels, n_classes, cfg.class_weighting);
        let mut order = train.clone();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let s = &slides[i];
                let mut tiles: Vec<&RgbImage> = s.tiles.iter().collect();
                if let Some(cap) = cfg.max_patches_per_bag {
                    if tiles.len() > cap {
                        let mut pick = index::sample(&mut sub_rng, tiles.len(), cap).into_vec();
                        pick.sort_unstable();
                        tiles = pick.into_iter().map(|j| &s.tiles[j]).collect();
                    }
                }
                let (loss, gb, gh, retained) = e2e_step(vit, &bp, &head, &hp, &tiles, s.label, F::num(cw[s.label]), mode)?;
                if let Some(budget) = cfg.activation_budget {
                    if retained > budget {
                        return Err(MilError::ActivationBudget { slide_id: s.slide_id.clone(), measured: retained, budget });
                    }
                }
                if !loss.is_finite() {
                    return Err(MilError::NonFinite { slide_id: s.slide_id.clone(), fold, epoch });
                }
                opt_h.step(&mut hp, &gh, cfg.lr)?;
                if k > 0 {
                    opt_b.step(&mut bp, &gb, cfg.backbone_lr)?;
                }
            }
        }
        let mut scores = Array2::zeros((test.len(), n_classes));
        for (r, &i) in test.iter().enumerate() {
            let refs: Vec<&RgbImage> = slides[i].tiles.iter().collect();
            let bag = Bag { slide_id: slides[i].slide_id.clone(), embeddings: embed_tiles(vit, &bp, &refs)?, label: slides[i].label };
            scores.row_mut(r).assign(&probs_f64(&abmil_forward(&head, &hp, &bag)?.scores));
        }
        let labels: Vec<usize> = test.iter().map(|&i| slides[i].label).collect();
        results.push(FoldResult {
            metrics: score_fold(fold, MilMode::E2e, k, &labels, &scores)?,
            head: hp,
            backbone: Some(bp),
            test_slides: test.iter().map(|&i| slides[i].slide_id.clone()).collect(),
            test_labels: labels,
            test_scores: scores,
        });
    }
    Ok(results)
}

/// Trainable-block settings swept by the ablation: `{0, 1, 2, 4, 6, depth}`
/// restricted to `≤ depth`.
pub fn ablation_grid(depth: usize) -> Vec<usize> {
    let mut g: Vec<usize> = [0, 1, 2, 4, 6, depth].into_iter().filter(|&k| k <= depth).collect();
    g.dedup();
    g
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub k: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

pub fn summarize_folds(k: usize, folds: &[FoldMetrics]) -> AblationRow {
    let col = |f: fn(&FoldMetrics) -> f64| mean_std(&folds.iter().map(f).collect::<Vec<_>>());
    let (auc_mean, auc_std) = col(|m| m.auc);
    let (acc_mean, acc_std) = col(|m| m.acc);
    let (f1_mean, f1_std) = col(|m| m.f1);
    AblationRow { k, auc_mean, auc_std, acc_mean, acc_std, f1_mean, f1_std }
}

/// Runs e2e training for every `k` in `grid`; returns one summary row per
/// `k` and all fold rows.
pub fn run_ablation<F: Real>(
    slides: &[SlideTiles],
    vit: &Vit,
    init: &Params<F>,
    cfg: &MilRunConfig,
    grid: &[usize],
    seed: u64,
) -> Result<(Vec<AblationRow>, Vec<FoldMetrics>), MilError> {
    let mut rows = Vec::with_capacity(grid.len());
    let mut all = Vec::new();
    for &k in grid {
        let c = MilRunConfig { mode: MilMode::E2e, n_trainable_blocks: k, ..cfg.clone() };
        let folds = train_mil_e2e(slides, vit, init, &c, seed)?;
        let metrics: Vec<FoldMetrics> = folds.into_iter().map(|f| f.metrics).collect();
        rows.push(summarize_folds(k, &metrics));
        all.extend(metrics);
    }
    Ok((rows, all))
}
