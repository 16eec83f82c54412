//! Vision-transformer encoders for the teacher and student roles.
//!
//! One [`Vit`] type serves both roles; the role only decides which output a
//! caller reads (teacher: class token per 224² crop, student: class token plus
//! the full token grid). Training passes go through [`Vit::forward_train`],
//! which keeps either every intermediate activation or only block inputs
//! (recompute on backward), and [`Vit::backward`].

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{normal_init, Attention, AttentionCache, LayerNorm, Linear, Mlp, MlpCache, NormCache};
use crate::params::{LayoutBuilder, ParamId, ParamLayout, Params, Real};
use crate::raster::RgbImage;

/// Per-channel pixel normalization applied before patch embedding.
const PIXEL_MEAN: f64 = 0.5;
const PIXEL_STD: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("input image is {got_h}x{got_w}, encoder expects {want}x{want}")]
    InputShape { want: usize, got_h: usize, got_w: usize },
    #[error("teacher expects 16 sub-patches, got {0}")]
    ChildCount(usize),
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("trainable block count {k} outside [0, {depth}]")]
    FreezeRange { k: usize, depth: usize },
    #[error("empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_side: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub n_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    pub role: Role,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_init_std() -> f64 {
    0.02
}

impl EncoderConfig {
    /// Toy teacher: d_T = 32, 8×8 token grid.
    pub fn toy_teacher() -> Self {
        Self {
            input_side: 224,
            patch_size: 28,
            embed_dim: 32,
            depth: 2,
            n_heads: 2,
            mlp_ratio: 4,
            role: Role::Teacher,
            init_std: 0.02,
        }
    }

    /// Toy student: d_S = 16, depth 4, 8×8 token grid.
    pub fn toy_student() -> Self {
        Self {
            input_side: 224,
            patch_size: 28,
            embed_dim: 16,
            depth: 4,
            n_heads: 2,
            mlp_ratio: 4,
            role: Role::Student,
            init_std: 0.02,
        }
    }

    /// Reference-scale student (ViT-B/14): 256 patch tokens, d_S = 768.
    pub fn reference_student() -> Self {
        Self {
            input_side: 224,
            patch_size: 14,
            embed_dim: 768,
            depth: 12,
            n_heads: 12,
            mlp_ratio: 4,
            role: Role::Student,
            init_std: 0.02,
        }
    }

    /// Reference-scale teacher (ViT-H/14 width): d_T = 1536.
    pub fn reference_teacher() -> Self {
        Self {
            input_side: 224,
            patch_size: 14,
            embed_dim: 1536,
            depth: 24,
            n_heads: 24,
            mlp_ratio: 4,
            role: Role::Teacher,
            init_std: 0.02,
        }
    }

    pub fn grid_side(&self) -> usize {
        self.input_side / self.patch_size
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.n_tokens() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::Config(m));
        if self.patch_size == 0 || self.input_side % self.patch_size != 0 {
            return bad(format!(
                "input_side {} not divisible by patch_size {}",
                self.input_side, self.patch_size
            ));
        }
        if self.role == Role::Student && self.grid_side() % 4 != 0 {
            return bad(format!("student token grid side {} not divisible by 4", self.grid_side()));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!("embed_dim {} not divisible by n_heads {}", self.embed_dim, self.n_heads));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    params: Vec<ParamId>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    ln1: NormCache<F>,
    y1: Array2<F>,
    attn: AttentionCache<F>,
    ln2: NormCache<F>,
    y2: Array2<F>,
    mlp: MlpCache<F>,
}

impl<F: Real> BlockCache<F> {
    pub fn floats(&self) -> usize {
        self.ln1.floats() + self.y1.len() + self.attn.floats() + self.ln2.floats() + self.y2.len() + self.mlp.floats()
    }
}

impl Block {
    fn declare(lb: &mut LayoutBuilder, idx: usize, cfg: &EncoderConfig) -> Self {
        let p = format!("blocks.{idx}");
        let start = lb_count(lb);
        let norm1 = LayerNorm::declare(lb, &format!("{p}.norm1"), cfg.embed_dim);
        let attn = Attention::declare(lb, &format!("{p}.attn"), cfg.embed_dim, cfg.n_heads);
        let norm2 = LayerNorm::declare(lb, &format!("{p}.norm2"), cfg.embed_dim);
        let mlp = Mlp::declare(lb, &format!("{p}.mlp"), cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio);
        let params = (start..lb_count(lb)).map(ParamId).collect();
        Self { norm1, attn, norm2, mlp, params }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.params
    }

    pub fn forward<F: Real>(&self, p: &Params<F>, x: ArrayView2<'_, F>, batch: usize, seq: usize) -> (Array2<F>, BlockCache<F>) {
        let (y1, ln1) = self.norm1.forward(p, x);
        let (a, attn) = self.attn.forward(p, y1.view(), batch, seq);
        let x2 = &x + &a;
        let (y2, ln2) = self.norm2.forward(p, x2.view());
        let (m, mlp) = self.mlp.forward(p, y2.view());
        let out = x2 + m;
        (out, BlockCache { ln1, y1, attn, ln2, y2, mlp })
    }

    pub fn backward<F: Real>(
        &self,
        p: &Params<F>,
        g: &mut Params<F>,
        cache: &BlockCache<F>,
        dy: ArrayView2<'_, F>,
        batch: usize,
        seq: usize,
    ) -> Array2<F> {
        let dm = self.mlp.backward(p, g, cache.y2.view(), &cache.mlp, dy);
        let mut dx2 = dy.to_owned();
        dx2 += &self.norm2.backward(p, g, &cache.ln2, dm.view());
        let da = self.attn.backward(p, g, cache.y1.view(), &cache.attn, dx2.view(), batch, seq);
        let mut dx = dx2;
        dx += &self.norm1.backward(p, g, &cache.ln1, da.view());
        dx
    }

    fn any_trainable<F: Real>(&self, p: &Params<F>) -> bool {
        self.params.iter().any(|&id| p.is_trainable(id))
    }
}

fn lb_count(lb: &LayoutBuilder) -> usize {
    lb.len()
}

/// How much of the forward pass is retained for backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationMode {
    /// Keep every intermediate activation.
    Full,
    /// Keep block inputs only; recompute block internals during backward.
    Checkpoint,
}

/// Batched encoder output: `[batch * seq, dim]`, class token first in each
/// sequence, then patch tokens in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput<F> {
    pub hidden: Array2<F>,
    pub batch: usize,
    pub seq: usize,
}

impl<F: Real> EncoderOutput<F> {
    pub fn class_token(&self, b: usize) -> ArrayView1<'_, F> {
        self.hidden.row(b * self.seq)
    }

    /// `[batch, dim]` matrix of class tokens.
    pub fn class_tokens(&self) -> Array2<F> {
        let d = self.hidden.ncols();
        Array2::from_shape_fn((self.batch, d), |(b, j)| self.hidden[[b * self.seq, j]])
    }

    /// `[G², dim]` patch tokens of one sample.
    pub fn patch_tokens(&self, b: usize) -> ArrayView2<'_, F> {
        self.hidden.slice(s![b * self.seq + 1..(b + 1) * self.seq, ..])
    }

    pub fn student_output(&self, b: usize) -> StudentOutput<F> {
        StudentOutput {
            class_token: self.class_token(b).to_owned(),
            tokens: self.patch_tokens(b).to_owned(),
        }
    }
}

/// Student output for one 5x patch.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentOutput<F> {
    pub class_token: Array1<F>,
    /// `[G², d_S]`, row-major spatial order.
    pub tokens: Array2<F>,
}

/// Teacher features of the 16 children of one parent, row-major 4×4 order.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatures<F>(pub Array2<F>);

impl<F: Real> TeacherFeatures<F> {
    pub fn region(&self, i: usize) -> ArrayView1<'_, F> {
        self.0.row(i)
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }
}

/// Everything retained by [`Vit::forward_train`] for the backward pass.
#[derive(Debug)]
pub struct ForwardTrace<F> {
    mode: ActivationMode,
    batch: usize,
    /// First block whose backward pass runs.
    grad_from: usize,
    patches: Option<Array2<F>>,
    block_inputs: Vec<Option<Array2<F>>>,
    block_caches: Vec<Option<BlockCache<F>>>,
    final_cache: NormCache<F>,
}

impl<F: Real> ForwardTrace<F> {
    /// Number of scalars kept alive between forward and backward.
    pub fn retained_floats(&self) -> usize {
        let inputs: usize = self.block_inputs.iter().flatten().map(|a| a.len()).sum();
        let caches: usize = self.block_caches.iter().flatten().map(|c| c.floats()).sum();
        let patches = self.patches.as_ref().map_or(0, |a| a.len());
        inputs + caches + patches + self.final_cache.floats()
    }

    pub fn mode(&self) -> ActivationMode {
        self.mode
    }
}

#[derive(Debug, Clone)]
pub struct Vit {
    config: EncoderConfig,
    layout: Arc<ParamLayout>,
    pub patch_embed: Linear,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

impl Vit {
    pub fn new(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut lb = LayoutBuilder::new();
        let d = config.embed_dim;
        let patch_embed = Linear::declare(&mut lb, "patch_embed", config.patch_dim(), d);
        let cls_token = lb.weight("cls_token", &[d]);
        let pos_embed = lb.weight("pos_embed", &[config.seq_len(), d]);
        let blocks = (0..config.depth).map(|i| Block::declare(&mut lb, i, &config)).collect();
        let norm = LayerNorm::declare(&mut lb, "norm", d);
        Ok(Self {
            config,
            layout: lb.finish(),
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    /// Truncated-normal-free ViT init: N(0, init_std) weights, zero biases,
    /// unit norms. Deterministic in `seed`.
    pub fn init_params<F: Real>(&self, seed: u64) -> Params<F> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::zeros(self.layout.clone());
        let std = self.config.init_std;
        self.patch_embed.init(&mut p, std, &mut rng);
        normal_init(&mut p, self.cls_token, std, &mut rng);
        normal_init(&mut p, self.pos_embed, std, &mut rng);
        for b in &self.blocks {
            b.norm1.init(&mut p);
            b.attn.qkv.init(&mut p, std, &mut rng);
            b.attn.proj.init(&mut p, std, &mut rng);
            b.norm2.init(&mut p);
            b.mlp.fc1.init(&mut p, std, &mut rng);
            b.mlp.fc2.init(&mut p, std, &mut rng);
        }
        self.norm.init(&mut p);
        p
    }

    pub fn embedding_ids(&self) -> [ParamId; 4] {
        [self.patch_embed.w, self.patch_embed.b, self.cls_token, self.pos_embed]
    }

    /// Flattens each image into `[G², P·P·3]` normalized patch rows, stacked
    /// over the batch.
    pub fn patchify<F: Real>(&self, images: &[&RgbImage]) -> Result<Array2<F>, EncoderError> {
        if images.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let side = self.config.input_side;
        let ps = self.config.patch_size;
        let g = self.config.grid_side();
        let n_tok = g * g;
        let mut out = Array2::zeros((images.len() * n_tok, self.config.patch_dim()));
        let lut: Vec<F> = (0..256)
            .map(|v| F::num((v as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD))
            .collect();
        for (b, img) in images.iter().enumerate() {
            if img.dims() != (side, side) {
                return Err(EncoderError::InputShape { want: side, got_h: img.height(), got_w: img.width() });
            }
            let px = img.pixels();
            for j in 0..n_tok {
                let (tr, tc) = (j / g, j % g);
                let mut row = out.row_mut(b * n_tok + j);
                let row = row.as_slice_mut().unwrap();
                for py in 0..ps {
                    let src = ((tr * ps + py) * side + tc * ps) * 3;
                    let dst = py * ps * 3;
                    for k in 0..ps * 3 {
                        row[dst + k] = lut[px[src + k] as usize];
                    }
                }
            }
        }
        Ok(out)
    }

    fn embed<F: Real>(&self, p: &Params<F>, patches: ArrayView2<'_, F>, batch: usize) -> Array2<F> {
        let seq = self.config.seq_len();
        let n_tok = seq - 1;
        let tok = self.patch_embed.forward(p, patches);
        let pos = p.mat(self.pos_embed);
        let cls = p.vec(self.cls_token);
        let mut x = Array2::zeros((batch * seq, self.config.embed_dim));
        for b in 0..batch {
            let mut seqv = x.slice_mut(s![b * seq..(b + 1) * seq, ..]);
            seqv.row_mut(0).assign(&cls);
            seqv.slice_mut(s![1.., ..]).assign(&tok.slice(s![b * n_tok..(b + 1) * n_tok, ..]));
            seqv += &pos;
        }
        x
    }

    /// Inference forward pass; nothing is retained.
    pub fn forward<F: Real>(&self, p: &Params<F>, images: &[&RgbImage]) -> Result<EncoderOutput<F>, EncoderError> {
        let patches = self.patchify(images)?;
        Ok(self.forward_patches(p, patches.view()))
    }

    /// Inference forward pass on rows already produced by [`Vit::patchify`].
    pub fn forward_patches<F: Real>(&self, p: &Params<F>, patches: ArrayView2<'_, F>) -> EncoderOutput<F> {
        let n_tok = self.config.grid_side() * self.config.grid_side();
        assert_eq!(patches.ncols(), self.config.patch_dim());
        assert_eq!(patches.nrows() % n_tok, 0);
        let batch = patches.nrows() / n_tok;
        let seq = self.config.seq_len();
        let mut x = self.embed(p, patches, batch);
        for blk in &self.blocks {
            x = blk.forward(p, x.view(), batch, seq).0;
        }
        let (hidden, _) = self.norm.forward(p, x.view());
        EncoderOutput { hidden, batch, seq }
    }

    /// Training forward pass. Blocks below the first one holding a trainable
    /// parameter run in inference mode and are never revisited by backward.
    pub fn forward_train<F: Real>(
        &self,
        p: &Params<F>,
        images: &[&RgbImage],
        mode: ActivationMode,
    ) -> Result<(EncoderOutput<F>, ForwardTrace<F>), EncoderError> {
        let batch = images.len();
        let seq = self.config.seq_len();
        let depth = self.blocks.len();
        let embed_trainable = self.embedding_ids().iter().any(|&id| p.is_trainable(id));
        let grad_from = if embed_trainable {
            0
        } else {
            self.blocks
                .iter()
                .position(|b| b.any_trainable(p))
                .unwrap_or(depth)
        };
        let patches = self.patchify(images)?;
        let mut x = self.embed(p, patches.view(), batch);
        let mut block_inputs = Vec::with_capacity(depth);
        let mut block_caches = Vec::with_capacity(depth);
        for (i, blk) in self.blocks.iter().enumerate() {
            if i < grad_from {
                x = blk.forward(p, x.view(), batch, seq).0;
                block_inputs.push(None);
                block_caches.push(None);
                continue;
            }
            let (out, cache) = blk.forward(p, x.view(), batch, seq);
            match mode {
                ActivationMode::Full => {
                    block_inputs.push(None);
                    block_caches.push(Some(cache));
                }
                ActivationMode::Checkpoint => {
                    block_inputs.push(Some(x));
                    block_caches.push(None);
                }
            }
            x = out;
        }
        let (hidden, final_cache) = self.norm.forward(p, x.view());
        let trace = ForwardTrace {
            mode,
            batch,
            grad_from,
            patches: embed_trainable.then_some(patches),
            block_inputs,
            block_caches,
            final_cache,
        };
        Ok((EncoderOutput { hidden, batch, seq }, trace))
    }

    /// Accumulates gradients of trainable parameters given `dL/d hidden`.
    pub fn backward<F: Real>(&self, p: &Params<F>, g: &mut Params<F>, trace: ForwardTrace<F>, d_hidden: ArrayView2<'_, F>) {
        let seq = self.config.seq_len();
        let batch = trace.batch;
        let mut dx = self.norm.backward(p, g, &trace.final_cache, d_hidden);
        let ForwardTrace { mode, grad_from, patches, mut block_inputs, mut block_caches, .. } = trace;
        for i in (grad_from..self.blocks.len()).rev() {
            let blk = &self.blocks[i];
            let cache = match mode {
                ActivationMode::Full => block_caches[i].take().expect("missing block cache"),
                ActivationMode::Checkpoint => {
                    let input = block_inputs[i].take().expect("missing checkpointed input");
                    blk.forward(p, input.view(), batch, seq).1
                }
            };
            dx = blk.backward(p, g, &cache, dx.view(), batch, seq);
        }
        if let Some(patches) = patches {
            let n_tok = seq - 1;
            let d = self.config.embed_dim;
            if p.is_trainable(self.pos_embed) {
                let mut gpos = g.mat_mut(self.pos_embed);
                for b in 0..batch {
                    gpos += &dx.slice(s![b * seq..(b + 1) * seq, ..]);
                }
            }
            if p.is_trainable(self.cls_token) {
                let mut gc = g.vec_mut(self.cls_token);
                for b in 0..batch {
                    gc += &dx.row(b * seq);
                }
            }
            let mut dtok = Array2::zeros((batch * n_tok, d));
            for b in 0..batch {
                dtok.slice_mut(s![b * n_tok..(b + 1) * n_tok, ..])
                    .assign(&dx.slice(s![b * seq + 1..(b + 1) * seq, ..]));
            }
            self.patch_embed.backward(p, g, patches.view(), dtok.view(), false);
        }
    }

    /// Student contract: class token plus `G²` patch tokens.
    pub fn encode_student<F: Real>(&self, p: &Params<F>, patch: &RgbImage) -> Result<StudentOutput<F>, EncoderError> {
        Ok(self.forward(p, &[patch])?.student_output(0))
    }
}

/// Which parameters an optimizer may touch after [`set_freeze_plan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub n_trainable_blocks: usize,
    pub depth: usize,
}

impl FreezePlan {
    pub fn first_trainable_block(&self) -> usize {
        self.depth - self.n_trainable_blocks
    }
}

/// Marks exactly the last `k` blocks trainable. The final norm follows the
/// last block; patch/position/class embeddings only train when every block
/// does.
pub fn set_freeze_plan<F: Real>(vit: &Vit, p: &mut Params<F>, k: usize) -> Result<FreezePlan, EncoderError> {
    let depth = vit.depth();
    if k > depth {
        return Err(EncoderError::FreezeRange { k, depth });
    }
    p.set_all_trainable(false);
    for blk in &vit.blocks[depth - k..] {
        for &id in blk.param_ids() {
            p.set_trainable(id, true);
        }
    }
    if k > 0 {
        p.set_trainable(vit.norm.gamma, true);
        p.set_trainable(vit.norm.beta, true);
    }
    if k == depth {
        for id in vit.embedding_ids() {
            p.set_trainable(id, true);
        }
    }
    Ok(FreezePlan { n_trainable_blocks: k, depth })
}

/// A teacher whose weights can only be read.
#[derive(Debug, Clone)]
pub struct FrozenTeacher<F> {
    vit: Vit,
    params: Params<F>,
}

impl<F: Real> FrozenTeacher<F> {
    pub fn new(vit: Vit, mut params: Params<F>) -> Self {
        params.set_all_trainable(false);
        Self { vit, params }
    }

    pub fn vit(&self) -> &Vit {
        &self.vit
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.vit.embed_dim()
    }

    /// Encodes each of the 16 children independently and returns their
    /// class tokens in child order.
    pub fn encode(&self, children: &[RgbImage]) -> Result<TeacherFeatures<F>, EncoderError> {
        if children.len() != 16 {
            return Err(EncoderError::ChildCount(children.len()));
        }
        let refs: Vec<&RgbImage> = children.iter().collect();
        let out = self.vit.forward(&self.params, &refs)?;
        Ok(TeacherFeatures(out.class_tokens()))
    }
}
