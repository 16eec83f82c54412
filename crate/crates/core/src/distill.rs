//! Cross-magnification distillation: token pooling, projection heads, the
//! dual global/local cosine objective and the training loop.
//!
//! The student sees the 5x patch once; its class token is matched to the mean
//! of the sixteen teacher features (global term) and its token grid, pooled
//! into a 4×4 grid of regions, is matched region by region to the teacher
//! features of the corresponding 20x children (local term).

use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{paired_augment, AugmentationSpec, PyramidPatchPair, GRID, N_CHILDREN};
use crate::encoder::{ActivationMode, EncoderError, EncoderOutput, FrozenTeacher, TeacherFeatures, Vit};
use crate::nn::{BatchNorm, BatchNormCache, Linear};
use crate::optim::{cosine_lr, ema_update, AdamW, AdamWConfig, OptimError};
use crate::params::{LayoutBuilder, ParamLayout, Params, Real};
use crate::raster::RgbImage;

/// Norms below this make a cosine undefined.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum DistillError {
    #[error("token grid side {0} is not divisible by 4")]
    GridSide(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("vector norm {0:e} below {NORM_EPS:e}; cosine undefined")]
    DegenerateNorm(f64),
    #[error("non-finite loss at step {step} (batch: {})", pairs.join(", "))]
    NonFiniteLoss { step: usize, pairs: Vec<String> },
    #[error("invalid distillation config: {0}")]
    Config(String),
    #[error("no training pairs")]
    NoData,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "d_lambda_global")]
    pub lambda_global: f64,
    #[serde(default = "d_lambda_local")]
    pub lambda_local: f64,
    #[serde(default = "d_peak_lr")]
    pub peak_lr: f64,
    pub total_steps: usize,
    #[serde(default = "d_ema")]
    pub ema_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    #[serde(default = "d_augment")]
    pub augment: bool,
}

fn d_lambda_global() -> f64 {
    1.0
}
fn d_lambda_local() -> f64 {
    0.5
}
fn d_peak_lr() -> f64 {
    5e-4
}
fn d_ema() -> f64 {
    0.999
}
fn d_batch() -> usize {
    32
}
fn d_wd() -> f64 {
    0.04
}
fn d_augment() -> bool {
    true
}

impl DistillConfig {
    pub fn with_steps(total_steps: usize) -> Self {
        Self {
            lambda_global: d_lambda_global(),
            lambda_local: d_lambda_local(),
            peak_lr: d_peak_lr(),
            total_steps,
            ema_decay: d_ema(),
            batch_size: d_batch(),
            weight_decay: d_wd(),
            warmup_steps: 0,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        let bad = |m: &str| Err(DistillError::Config(m.to_string()));
        if !(self.lambda_global >= 0.0 && self.lambda_local >= 0.0) {
            return bad("loss weights must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2 for batch normalization");
        }
        if !(self.peak_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("peak_lr and weight_decay must be nonnegative");
        }
        Ok(())
    }
}

/// Averages each `(G/4)×(G/4)` window of a row-major `[G², d]` token grid;
/// output row `i` is region `(⌊i/4⌋, i mod 4)`.
pub fn spatial_pool<F: Real>(tokens: ArrayView2<'_, F>, grid: usize) -> Result<Array2<F>, DistillError> {
    if grid % GRID != 0 || grid == 0 {
        return Err(DistillError::GridSide(grid));
    }
    if tokens.nrows() != grid * grid {
        return Err(DistillError::Shape(format!("{} tokens for a {grid}x{grid} grid", tokens.nrows())));
    }
    let w = grid / GRID;
    let d = tokens.ncols();
    let scale = F::one() / F::from_usize(w * w).unwrap();
    let mut out = Array2::zeros((N_CHILDREN, d));
    for j in 0..grid * grid {
        let region = (j / grid / w) * GRID + (j % grid) / w;
        let mut row = out.row_mut(region);
        row += &tokens.row(j);
    }
    out *= scale;
    Ok(out)
}

/// Adjoint of [`spatial_pool`].
fn spatial_unpool<F: Real>(d_pooled: ArrayView2<'_, F>, grid: usize) -> Array2<F> {
    let w = grid / GRID;
    let scale = F::one() / F::from_usize(w * w).unwrap();
    let mut out = Array2::zeros((grid * grid, d_pooled.ncols()));
    for j in 0..grid * grid {
        let region = (j / grid / w) * GRID + (j % grid) / w;
        out.row_mut(j).assign(&(&d_pooled.row(region) * scale));
    }
    out
}

/// `g(x) = W₂ · GELU(BN(W₁ x + b₁)) + b₂`.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    layout: Arc<ParamLayout>,
    pub fc1: Linear,
    pub bn: BatchNorm,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadCache<F> {
    x: Array2<F>,
    h: Array2<F>,
    bn: BatchNormCache<F>,
    n: Array2<F>,
    a: Array2<F>,
}

impl ProjectionHead {
    pub fn new(d_in: usize, d_out: usize) -> Self {
        let mut lb = LayoutBuilder::new();
        let fc1 = Linear::declare(&mut lb, "fc1", d_in, d_out);
        let bn = BatchNorm::declare(&mut lb, "bn", d_out);
        let fc2 = Linear::declare(&mut lb, "fc2", d_out, d_out);
        Self { layout: lb.finish(), fc1, bn, fc2 }
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn d_in(&self) -> usize {
        self.fc1.d_in
    }

    pub fn d_out(&self) -> usize {
        self.fc2.d_out
    }

    pub fn init_params<F: Real>(&self, seed: u64) -> Params<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::zeros(self.layout.clone());
        self.fc1.init(&mut p, 0.02, &mut rng);
        self.bn.init(&mut p);
        self.fc2.init(&mut p, 0.02, &mut rng);
        p
    }

    /// Batch-statistics forward over the rows of `x`.
    pub fn forward_train<F: Real>(&self, p: &Params<F>, x: ArrayView2<'_, F>) -> (Array2<F>, HeadCache<F>) {
        let h = self.fc1.forward(p, x);
        let (n, bn) = self.bn.forward_train(p, h.view());
        let a = n.mapv(crate::nn::gelu);
        let out = self.fc2.forward(p, a.view());
        (out, HeadCache { x: x.to_owned(), h, bn, n, a })
    }

    /// Running-statistics forward.
    pub fn forward_eval<F: Real>(&self, p: &Params<F>, x: ArrayView2<'_, F>) -> Array2<F> {
        let h = self.fc1.forward(p, x);
        let n = self.bn.forward_eval(p, h.view());
        self.fc2.forward(p, n.mapv(crate::nn::gelu).view())
    }

    pub fn backward<F: Real>(&self, p: &Params<F>, g: &mut Params<F>, cache: &HeadCache<F>, dy: ArrayView2<'_, F>) -> Array2<F> {
        let mut da = self.fc2.backward(p, g, cache.a.view(), dy, true).unwrap();
        ndarray::Zip::from(&mut da)
            .and(&cache.n)
            .for_each(|d, &z| *d = *d * crate::nn::gelu_grad(z));
        let dh = self.bn.backward(p, g, &cache.bn, da.view());
        let _ = &cache.h;
        self.fc1.backward(p, g, cache.x.view(), dh.view(), true).unwrap()
    }

    pub fn update_running<F: Real>(&self, p: &mut Params<F>, cache: &HeadCache<F>) {
        self.bn.update_running(p, &cache.bn);
    }
}

/// Evaluation-mode projection of a single vector.
pub fn project<F: Real>(head: &ProjectionHead, p: &Params<F>, x: ArrayView1<'_, F>) -> Result<Array1<F>, DistillError> {
    if x.len() != head.d_in() {
        return Err(DistillError::Shape(format!("input dim {}, head expects {}", x.len(), head.d_in())));
    }
    let out = head.forward_eval(p, x.insert_axis(Axis(0)));
    Ok(out.row(0).to_owned())
}

/// Mean of the sixteen regional teacher features.
pub fn teacher_global<F: Real>(h: &TeacherFeatures<F>) -> Array1<F> {
    h.0.mean_axis(Axis(0)).expect("teacher features are non-empty")
}

fn norm<F: Real>(v: ArrayView1<'_, F>) -> F {
    v.dot(&v).sqrt()
}

/// Negative cosine similarity, `−a·b / (‖a‖‖b‖)`.
pub fn cosine_loss<F: Real>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> Result<F, DistillError> {
    Ok(cosine_loss_grad(a, b)?.0)
}

/// Loss and its gradient with respect to `b`.
fn cosine_loss_grad<F: Real>(a: ArrayView1<'_, F>, b: ArrayView1<'_, F>) -> Result<(F, Array1<F>), DistillError> {
    if a.len() != b.len() {
        return Err(DistillError::Shape(format!("cosine of {}-d and {}-d vectors", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    for n in [na, nb] {
        if !(n.as_f64() > NORM_EPS) {
            return Err(DistillError::DegenerateNorm(n.as_f64()));
        }
    }
    let cos = a.dot(&b) / (na * nb);
    let cos = cos.max(-F::one()).min(F::one());
    // d(-cos)/db = -(a / (|a||b|) - cos · b / |b|²)
    let grad = (&b * (cos / (nb * nb))) - &(&a / (na * nb));
    Ok((-cos, grad))
}

/// Mean regional negative cosine between teacher features and projected
/// student regions.
pub fn local_loss<F: Real>(h: &TeacherFeatures<F>, z: ArrayView2<'_, F>) -> Result<F, DistillError> {
    if z.nrows() != N_CHILDREN || h.0.nrows() != N_CHILDREN || z.ncols() != h.dim() {
        return Err(DistillError::Shape(format!(
            "teacher {:?} vs student {:?}",
            h.0.shape(),
            z.shape()
        )));
    }
    let mut acc = F::zero();
    for i in 0..N_CHILDREN {
        acc += cosine_loss(h.region(i), z.row(i))?;
    }
    Ok(acc / F::from_usize(N_CHILDREN).unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillLossBreakdown {
    pub global: f64,
    pub local: f64,
    pub total: f64,
}

pub fn total_loss(global: f64, local: f64, cfg: &DistillConfig) -> DistillLossBreakdown {
    DistillLossBreakdown {
        global,
        local,
        total: cfg.lambda_global * global + cfg.lambda_local * local,
    }
}

pub fn lr_at(step: usize, cfg: &DistillConfig) -> f64 {
    cosine_lr(step, cfg.total_steps, cfg.peak_lr, cfg.warmup_steps)
}

/// Student backbone plus both projection heads: everything distillation
/// trains and averages.
#[derive(Debug, Clone)]
pub struct StudentStack<F> {
    pub vit: Vit,
    pub head_global: ProjectionHead,
    pub head_local: ProjectionHead,
    pub student: Params<F>,
    pub global: Params<F>,
    pub local: Params<F>,
}

impl<F: Real> StudentStack<F> {
    pub fn new(vit: Vit, student: Params<F>, teacher_dim: usize, seed: u64) -> Self {
        let d_s = vit.embed_dim();
        let head_global = ProjectionHead::new(d_s, teacher_dim);
        let head_local = ProjectionHead::new(d_s, teacher_dim);
        let global = head_global.init_params(seed.wrapping_add(1));
        let local = head_local.init_params(seed.wrapping_add(2));
        Self { vit, head_global, head_local, student, global, local }
    }

    pub fn grid(&self) -> usize {
        self.vit.config().grid_side()
    }

    pub fn groups(&self) -> [(&'static str, &Params<F>); 3] {
        [("student", &self.student), ("head_global", &self.global), ("head_local", &self.local)]
    }

    fn groups_mut(&mut self) -> [&mut Params<F>; 3] {
        [&mut self.student, &mut self.global, &mut self.local]
    }

    pub fn zero_grads(&self) -> [Params<F>; 3] {
        [self.student.zeros_like(), self.global.zeros_like(), self.local.zeros_like()]
    }
}

/// Teacher features `[B,16,d_T]` together with the student output of the
/// matching 5x patches (class tokens `[B,d_S]`, token grids `[B,G,G,d_S]`).
#[derive(Debug, Clone)]
pub struct DistillBatch<F> {
    pub teacher: Vec<TeacherFeatures<F>>,
    pub student: EncoderOutput<F>,
    pub grid: usize,
}

impl<F: Real> DistillBatch<F> {
    pub fn class_tokens(&self) -> Array2<F> {
        self.student.class_tokens()
    }

    pub fn token_grid(&self, b: usize) -> ArrayView3<'_, F> {
        let d = self.student.hidden.ncols();
        self.student
            .patch_tokens(b)
            .into_shape_with_order((self.grid, self.grid, d))
            .expect("patch tokens are contiguous")
    }
}

struct HeadsPass<F> {
    loss: DistillLossBreakdown,
    d_hidden: Array2<F>,
    grads_global: Params<F>,
    grads_local: Params<F>,
    cache_global: HeadCache<F>,
    cache_local: HeadCache<F>,
}

/// Objective over a batch (training-mode batch norm) and its gradient with
/// respect to the heads and the encoder's hidden states.
fn heads_pass<F: Real>(stack: &StudentStack<F>, batch: &DistillBatch<F>, cfg: &DistillConfig) -> Result<HeadsPass<F>, DistillError> {
    let b = batch.student.batch;
    if batch.teacher.len() != b {
        return Err(DistillError::Shape(format!("{} teacher entries for batch of {b}", batch.teacher.len())));
    }
    let g = batch.grid;
    let seq = batch.student.seq;
    let d_s = batch.student.hidden.ncols();
    let d_t = stack.head_global.d_out();
    for t in &batch.teacher {
        if t.dim() != d_t || t.0.nrows() != N_CHILDREN {
            return Err(DistillError::Shape(format!("teacher features {:?}, head output {d_t}", t.0.shape())));
        }
    }

    let cls = batch.class_tokens();
    let (zg, cache_global) = stack.head_global.forward_train(&stack.global, cls.view());
    let mut pooled = Array2::zeros((b * N_CHILDREN, d_s));
    for i in 0..b {
        pooled
            .slice_mut(s![i * N_CHILDREN..(i + 1) * N_CHILDREN, ..])
            .assign(&spatial_pool(batch.student.patch_tokens(i), g)?);
    }
    let (zl, cache_local) = stack.head_local.forward_train(&stack.local, pooled.view());

    let bf = F::from_usize(b).unwrap();
    let wg = F::num(cfg.lambda_global) / bf;
    let wl = F::num(cfg.lambda_local) / (bf * F::from_usize(N_CHILDREN).unwrap());
    let mut lg = 0.0;
    let mut ll = 0.0;
    let mut dzg = Array2::zeros(zg.raw_dim());
    let mut dzl = Array2::zeros(zl.raw_dim());
    for i in 0..b {
        let tg = teacher_global(&batch.teacher[i]);
        let (l, grad) = cosine_loss_grad(tg.view(), zg.row(i))?;
        lg += l.as_f64();
        dzg.row_mut(i).assign(&(grad * wg));
        for r in 0..N_CHILDREN {
            let row = i * N_CHILDREN + r;
            let (l, grad) = cosine_loss_grad(batch.teacher[i].region(r), zl.row(row))?;
            ll += l.as_f64();
            dzl.row_mut(row).assign(&(grad * wl));
        }
    }
    let loss = total_loss(lg / b as f64, ll / (b * N_CHILDREN) as f64, cfg);

    let mut grads_global = stack.global.zeros_like();
    let mut grads_local = stack.local.zeros_like();
    let dcls = stack.head_global.backward(&stack.global, &mut grads_global, &cache_global, dzg.view());
    let dpooled = stack.head_local.backward(&stack.local, &mut grads_local, &cache_local, dzl.view());
    let mut d_hidden = Array2::zeros(batch.student.hidden.raw_dim());
    for i in 0..b {
        d_hidden.row_mut(i * seq).assign(&dcls.row(i));
        let dtok = spatial_unpool(dpooled.slice(s![i * N_CHILDREN..(i + 1) * N_CHILDREN, ..]), g);
        d_hidden.slice_mut(s![i * seq + 1..(i + 1) * seq, ..]).assign(&dtok);
    }
    Ok(HeadsPass { loss, d_hidden, grads_global, grads_local, cache_global, cache_local })
}

/// Forward-only objective, as used by finite-difference checks.
pub fn distill_loss<F: Real>(
    stack: &StudentStack<F>,
    teacher: &[TeacherFeatures<F>],
    images: &[&RgbImage],
) -> Result<DistillLossBreakdown, DistillError> {
    distill_loss_with(stack, teacher, images, &DistillConfig::with_steps(1))
}

pub fn distill_loss_with<F: Real>(
    stack: &StudentStack<F>,
    teacher: &[TeacherFeatures<F>],
    images: &[&RgbImage],
    cfg: &DistillConfig,
) -> Result<DistillLossBreakdown, DistillError> {
    let student = stack.vit.forward(&stack.student, images)?;
    let batch = DistillBatch { teacher: teacher.to_vec(), student, grid: stack.grid() };
    Ok(heads_pass(stack, &batch, cfg)?.loss)
}

/// As [`distill_loss_with`], on pre-patchified student inputs.
pub fn distill_loss_from_patches<F: Real>(
    stack: &StudentStack<F>,
    teacher: &[TeacherFeatures<F>],
    patches: ArrayView2<'_, F>,
    cfg: &DistillConfig,
) -> Result<DistillLossBreakdown, DistillError> {
    let student = stack.vit.forward_patches(&stack.student, patches);
    if student.batch != teacher.len() {
        return Err(DistillError::Config(format!("{} teacher items for {} images", teacher.len(), student.batch)));
    }
    let batch = DistillBatch { teacher: teacher.to_vec(), student, grid: stack.grid() };
    Ok(heads_pass(stack, &batch, cfg)?.loss)
}

/// Loss and gradients for student, global head and local head (in that
/// order), plus the head batch-norm caches needed to update running stats.
pub struct DistillGrads<F> {
    pub loss: DistillLossBreakdown,
    pub grads: [Params<F>; 3],
    cache_global: HeadCache<F>,
    cache_local: HeadCache<F>,
    pub retained_floats: usize,
}

pub fn distill_grads<F: Real>(
    stack: &StudentStack<F>,
    teacher: &[TeacherFeatures<F>],
    images: &[&RgbImage],
    cfg: &DistillConfig,
    mode: ActivationMode,
) -> Result<DistillGrads<F>, DistillError> {
    let (student, trace) = stack.vit.forward_train(&stack.student, images, mode)?;
    let retained_floats = trace.retained_floats();
    let batch = DistillBatch { teacher: teacher.to_vec(), student, grid: stack.grid() };
    let pass = heads_pass(stack, &batch, cfg)?;
    let mut gs = stack.student.zeros_like();
    stack.vit.backward(&stack.student, &mut gs, trace, pass.d_hidden.view());
    Ok(DistillGrads {
        loss: pass.loss,
        grads: [gs, pass.grads_global, pass.grads_local],
        cache_global: pass.cache_global,
        cache_local: pass.cache_local,
        retained_floats,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLogRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_global: f64,
    pub loss_local: f64,
    pub wall_ms: f64,
}

/// Mean of the last `window` logged totals.
pub fn smoothed_loss(log: &[LossLogRow], window: usize) -> Option<f64> {
    if log.is_empty() {
        return None;
    }
    let tail = &log[log.len().saturating_sub(window.max(1))..];
    Some(tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
}

#[derive(Debug, Clone)]
pub struct DistillOutcome<F> {
    /// Exponential moving average of the trained stack; its backbone is the
    /// delivered encoder.
    pub ema: StudentStack<F>,
    pub last: StudentStack<F>,
    pub log: Vec<LossLogRow>,
}

/// Runs `cfg.total_steps` AdamW steps on the distillation objective with a
/// cosine schedule, updating the EMA copy after each step. The teacher is
/// only ever read.
pub fn train_distill<F: Real>(
    pairs: &[PyramidPatchPair],
    teacher: &FrozenTeacher<F>,
    mut stack: StudentStack<F>,
    cfg: &DistillConfig,
    seed: u64,
    mut on_step: impl FnMut(&LossLogRow),
) -> Result<DistillOutcome<F>, DistillError> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(DistillError::NoData);
    }
    if teacher.dim() != stack.head_global.d_out() {
        return Err(DistillError::Shape(format!(
            "teacher dim {} but heads project to {}",
            teacher.dim(),
            stack.head_global.d_out()
        )));
    }
    stack.student.set_all_trainable(true);
    stack.global.set_all_trainable(true);
    stack.local.set_all_trainable(true);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opt_cfg = AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() };
    let mut opts = [
        AdamW::new(&stack.student, opt_cfg),
        AdamW::new(&stack.global, opt_cfg),
        AdamW::new(&stack.local, opt_cfg),
    ];
    let mut ema = stack.clone();

    let cached: Option<Vec<TeacherFeatures<F>>> = if cfg.augment {
        None
    } else {
        Some(pairs.iter().map(|p| teacher.encode(&p.children_20x)).collect::<Result<_, _>>()?)
    };

    let bsz = cfg.batch_size.min(pairs.len()).max(1);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.total_steps);

    for step in 0..cfg.total_steps {
        let t0 = Instant::now();
        if cursor + bsz > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + bsz];
        cursor += bsz;

        let (teacher_feats, images): (Vec<TeacherFeatures<F>>, Vec<RgbImage>) = match &cached {
            Some(feats) => (
                idx.iter().map(|&i| feats[i].clone()).collect(),
                idx.iter().map(|&i| pairs[i].patch_5x.clone()).collect(),
            ),
            None => {
                let mut tf = Vec::with_capacity(bsz);
                let mut im = Vec::with_capacity(bsz);
                for &i in idx {
                    let spec = AugmentationSpec::sample(rng.random());
                    let aug = paired_augment(&pairs[i], &spec);
                    tf.push(teacher.encode(&aug.children_20x)?);
                    im.push(aug.patch_5x);
                }
                (tf, im)
            }
        };
        let refs: Vec<&RgbImage> = images.iter().collect();
        let out = distill_grads(&stack, &teacher_feats, &refs, cfg, ActivationMode::Full)?;
        if !out.loss.total.is_finite() || !out.grads.iter().all(|g| g.all_finite()) {
            return Err(DistillError::NonFiniteLoss {
                step,
                pairs: idx
                    .iter()
                    .map(|&i| format!("{}@{},{}", pairs[i].slide_id, pairs[i].grid_row, pairs[i].grid_col))
                    .collect(),
            });
        }
        let lr = lr_at(step, cfg);
        {
            let [s, g, l] = stack.groups_mut();
            opts[0].step(s, &out.grads[0], lr)?;
            opts[1].step(g, &out.grads[1], lr)?;
            opts[2].step(l, &out.grads[2], lr)?;
        }
        stack.head_global.update_running(&mut stack.global, &out.cache_global);
        stack.head_local.update_running(&mut stack.local, &out.cache_local);
        ema_update(&mut ema.student, &stack.student, cfg.ema_decay)?;
        ema_update(&mut ema.global, &stack.global, cfg.ema_decay)?;
        ema_update(&mut ema.local, &stack.local, cfg.ema_decay)?;

        let row = LossLogRow {
            step,
            lr,
            loss: out.loss.total,
            loss_global: out.loss.global,
            loss_local: out.loss.local,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&row);
        log.push(row);
    }
    Ok(DistillOutcome { ema, last: stack, log })
}

/// Writes the loss log as CSV `{step, lr, L, L_global, L_local, wall_ms}`.
pub fn write_loss_log(path: &std::path::Path, log: &[LossLogRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "lr", "L", "L_global", "L_local", "wall_ms"])?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            format!("{:e}", r.lr),
            r.loss.to_string(),
            r.loss_global.to_string(),
            r.loss_local.to_string(),
            format!("{:.3}", r.wall_ms),
        ])?;
    }
    w.flush()
}
