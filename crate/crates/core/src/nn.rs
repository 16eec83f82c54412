//! Layers with hand-written backward passes.
//!
//! Activations are row-major `[rows, features]` matrices. Weight matrices are
//! stored input-major (`[d_in, d_out]`) so a forward pass is `x · W + b`.
//! Backward passes accumulate into a gradient [`Params`] sharing the model's
//! layout and only touch entries whose trainable flag is set.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::params::{LayoutBuilder, ParamId, Params, Real};

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf based) GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let v = x.as_f64();
    F::num(0.5 * v * (1.0 + libm::erf(v * INV_SQRT_2)))
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let v = x.as_f64();
    let cdf = 0.5 * (1.0 + libm::erf(v * INV_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
    F::num(cdf + v * pdf)
}

/// `acc += a · b` (with optional transposes done by the caller through views).
fn mat_mul_acc<F: Real>(acc: &mut ndarray::ArrayViewMut2<'_, F>, a: &ArrayView2<'_, F>, b: &ArrayView2<'_, F>) {
    general_mat_mul(F::one(), a, b, F::one(), acc);
}

pub fn normal_init<F: Real, R: Rng>(p: &mut Params<F>, id: ParamId, std: f64, rng: &mut R) {
    let dist = Normal::new(0.0, std).unwrap();
    for x in p.slice_mut(id) {
        *x = F::num(dist.sample(rng));
    }
}

pub fn const_init<F: Real>(p: &mut Params<F>, id: ParamId, v: f64) {
    let v = F::num(v);
    p.slice_mut(id).iter_mut().for_each(|x| *x = v);
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn declare(lb: &mut LayoutBuilder, prefix: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: lb.weight(format!("{prefix}.weight"), &[d_in, d_out]),
            b: lb.weight(format!("{prefix}.bias"), &[d_out]),
            d_in,
            d_out,
        }
    }

    pub fn init<F: Real, R: Rng>(&self, p: &mut Params<F>, std: f64, rng: &mut R) {
        normal_init(p, self.w, std, rng);
        const_init(p, self.b, 0.0);
    }

    pub fn forward<F: Real>(&self, p: &Params<F>, x: ArrayView2<'_, F>) -> Array2<F> {
        debug_assert_eq!(x.ncols(), self.d_in);
        let mut y = x.dot(&p.mat(self.w));
        y += &p.vec(self.b);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx` when requested.
    pub fn backward<F: Real>(
        &self,
        p: &Params<F>,
        g: &mut Params<F>,
        x: ArrayView2<'_, F>,
        dy: ArrayView2<'_, F>,
        want_dx: bool,
    ) -> Option<Array2<F>> {
        if p.is_trainable(self.w) {
            mat_mul_acc(&mut g.mat_mut(self.w), &x.t(), &dy);
        }
        if p.is_trainable(self.b) {
            let mut gb = g.vec_mut(self.b);
            gb += &dy.sum_axis(Axis(0));
        }
        want_dx.then(|| dy.dot(&p.mat(self.w).t()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
}

impl<F: Real> NormCache<F> {
    pub fn floats(&self) -> usize {
        self.xhat.len() + self.rstd.len()
    }
}

impl LayerNorm {
    pub fn declare(lb: &mut LayoutBuilder, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: lb.weight(format!("{prefix}.weight"), &[dim]),
            beta: lb.weight(format!("{prefix}.bias"), &[dim]),
            dim,
            eps: 1e-6,
        }
    }

    pub fn init<F: Real>(&self, p: &mut Params<F>) {
        const_init(p, self.gamma, 1.0);
        const_init(p, self.beta, 0.0);
    }

    pub fn forward<F: Real>(&self, p: &Params<F>, x: ArrayView2<'_, F>) -> (Array2<F>, NormCache<F>) {
        let n = F::from_usize(self.dim).unwrap();
        let eps = F::num(self.eps);
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(F::zero(), |a, &v| a + v * v) / n;
            *r = F::one() / (var + eps).sqrt();
            let s = *r;
            row.mapv_inplace(|v| v * s);
        }
        let mut y = &xhat * &p.vec(self.gamma);
        y += &p.vec(self.beta);
        (y, NormCache { xhat, rstd })
    }

    pub fn backward<F: Real>(
        &self,
        p: &Params<F>,
        g: &mut Params<F>,
        cache: &NormCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        if p.is_trainable(self.gamma) {
            let mut gg = g.vec_mut(self.gamma);
            gg += &(&dy * &cache.xhat).sum_axis(Axis(0));
        }
        if p.is_trainable(self.beta) {
            let mut gb = g.vec_mut(self.beta);
            gb += &dy.sum_axis(Axis(0));
        }
        let n = F::from_usize(self.dim).unwrap();
        let dxhat = &dy * &p.vec(self.gamma);
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(cache.xhat.rows())
            .and(&cache.rstd)
            .for_each(|mut out, dh, xh, &r| {
                let m1 = dh.sum() / n;
                let m2 = dh.iter().zip(xh.iter()).fold(F::zero(), |a, (&d, &x)| a + d * x) / n;
                Zip::from(&mut out).and(&dh).and(&xh).for_each(|o, &d, &x| {
                    *o = r * (d - m1 - x * m2);
                });
            });
        dx
    }
}

/// Batch normalization over rows, with running statistics kept as buffers.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub dim: usize,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<F> {
    pub xhat: Array2<F>,
    pub rstd: Array1<F>,
    pub batch_mean: Array1<F>,
    pub batch_var: Array1<F>,
}

impl BatchNorm {
    pub fn declare(lb: &mut LayoutBuilder, prefix: &str, dim: usize) -> Self {
        Self {
            gamma: lb.weight(format!("{prefix}.weight"), &[dim]),
            beta: lb.weight(format!("{prefix}.bias"), &[dim]),
            running_mean: lb.buffer(format!("{prefix}.running_mean"), &[dim]),
            running_var: lb.buffer(format!("{prefix}.running_var"), &[dim]),
            dim,
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn init<F: Real>(&self, p: &mut Params<F>) {
        const_init(p, self.gamma, 1.0);
        const_init(p, self.beta, 0.0);
        const_init(p, self.running_mean, 0.0);
        const_init(p, self.running_var, 1.0);
    }

    /// Training-mode forward: normalizes with the statistics of `x` itself.
    pub fn forward_train<F: Real>(&self, p: &Params<F>, x: ArrayView2<'_, F>) -> (Array2<F>, BatchNormCache<F>) {
        let n = F::from_usize(x.nrows()).unwrap();
        let eps = F::num(self.eps);
        let batch_mean = x.sum_axis(Axis(0)) / n;
        let centered = &x - &batch_mean;
        let batch_var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
        let rstd = batch_var.mapv(|v| F::one() / (v + eps).sqrt());
        let xhat = &centered * &rstd;
        let mut y = &xhat * &p.vec(self.gamma);
        y += &p.vec(self.beta);
        (y, BatchNormCache { xhat, rstd, batch_mean, batch_var })
    }

    pub fn forward_eval<F: Real>(&self, p: &Params<F>, x: ArrayView2<'_, F>) -> Array2<F> {
        let eps = F::num(self.eps);
        let rstd = p.vec(self.running_var).mapv(|v| F::one() / (v + eps).sqrt());
        let mut y = (&x - &p.vec(self.running_mean)) * &rstd;
        y *= &p.vec(self.gamma);
        y += &p.vec(self.beta);
        y
    }

    /// Folds one batch's statistics into the running averages
    /// (unbiased variance, exponential momentum).
    pub fn update_running<F: Real>(&self, p: &mut Params<F>, cache: &BatchNormCache<F>) {
        let n = cache.xhat.nrows();
        let m = F::num(self.momentum);
        let keep = F::one() - m;
        let unbias = if n > 1 {
            F::from_usize(n).unwrap() / F::from_usize(n - 1).unwrap()
        } else {
            F::one()
        };
        Zip::from(p.vec_mut(self.running_mean))
            .and(&cache.batch_mean)
            .for_each(|r, &b| *r = keep * *r + m * b);
        Zip::from(p.vec_mut(self.running_var))
            .and(&cache.batch_var)
            .for_each(|r, &b| *r = keep * *r + m * b * unbias);
    }

    pub fn backward<F: Real>(
        &self,
        p: &Params<F>,
        g: &mut Params<F>,
        cache: &BatchNormCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        if p.is_trainable(self.gamma) {
            let mut gg = g.vec_mut(self.gamma);
            gg += &(&dy * &cache.xhat).sum_axis(Axis(0));
        }
        if p.is_trainable(self.beta) {
            let mut gb = g.vec_mut(self.beta);
            gb += &dy.sum_axis(Axis(0));
        }
        let n = F::from_usize(dy.nrows()).unwrap();
        let dxhat = &dy * &p.vec(self.gamma);
        let sum_d = dxhat.sum_axis(Axis(0));
        let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
        let mut dx = dxhat * n;
        dx -= &sum_d;
        dx -= &(&cache.xhat * &sum_dx);
        dx *= &(cache.rstd.mapv(|r| r / n));
        dx
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<F: Real>(x: &mut Array2<F>) {
    for mut row in x.rows_mut() {
        let max = row.fold(F::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Multi-head self attention over `batch` independent sequences of length
/// `seq`, stacked as `[batch * seq, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub n_heads: usize,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    pub qkv: Array2<F>,
    /// `[batch * heads, seq, seq]` attention probabilities.
    pub probs: Array3<F>,
    pub mixed: Array2<F>,
}

impl<F: Real> AttentionCache<F> {
    pub fn floats(&self) -> usize {
        self.qkv.len() + self.probs.len() + self.mixed.len()
    }
}

impl Attention {
    pub fn declare(lb: &mut LayoutBuilder, prefix: &str, dim: usize, n_heads: usize) -> Self {
        assert!(dim % n_heads == 0, "embed dim {dim} not divisible by {n_heads} heads");
        Self {
            qkv: Linear::declare(lb, &format!("{prefix}.qkv"), dim, 3 * dim),
            proj: Linear::declare(lb, &format!("{prefix}.proj"), dim, dim),
            n_heads,
            dim,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn forward<F: Real>(
        &self,
        p: &Params<F>,
        x: ArrayView2<'_, F>,
        batch: usize,
        seq: usize,
    ) -> (Array2<F>, AttentionCache<F>) {
        let qkv = self.qkv.forward(p, x);
        let hd = self.head_dim();
        let scale = F::num(1.0 / (hd as f64).sqrt());
        let mut probs = Array3::zeros((batch * self.n_heads, seq, seq));
        let mut mixed = Array2::zeros((batch * seq, self.dim));
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.n_heads {
                let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![rows.clone(), self.dim + h * hd..self.dim + (h + 1) * hd]);
                let v = qkv.slice(s![rows.clone(), 2 * self.dim + h * hd..2 * self.dim + (h + 1) * hd]);
                let mut a = q.dot(&k.t()) * scale;
                softmax_rows(&mut a);
                mixed
                    .slice_mut(s![rows.clone(), h * hd..(h + 1) * hd])
                    .assign(&a.dot(&v));
                probs.index_axis_mut(Axis(0), b * self.n_heads + h).assign(&a);
            }
        }
        let out = self.proj.forward(p, mixed.view());
        (out, AttentionCache { qkv, probs, mixed })
    }

    pub fn backward<F: Real>(
        &self,
        p: &Params<F>,
        g: &mut Params<F>,
        x: ArrayView2<'_, F>,
        cache: &AttentionCache<F>,
        dy: ArrayView2<'_, F>,
        batch: usize,
        seq: usize,
    ) -> Array2<F> {
        let dmixed = self
            .proj
            .backward(p, g, cache.mixed.view(), dy, true)
            .unwrap();
        let hd = self.head_dim();
        let scale = F::num(1.0 / (hd as f64).sqrt());
        let mut dqkv = Array2::zeros(cache.qkv.raw_dim());
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.n_heads {
                let qc = h * hd..(h + 1) * hd;
                let kc = self.dim + h * hd..self.dim + (h + 1) * hd;
                let vc = 2 * self.dim + h * hd..2 * self.dim + (h + 1) * hd;
                let q = cache.qkv.slice(s![rows.clone(), qc.clone()]);
                let k = cache.qkv.slice(s![rows.clone(), kc.clone()]);
                let v = cache.qkv.slice(s![rows.clone(), vc.clone()]);
                let a = cache.probs.index_axis(Axis(0), b * self.n_heads + h);
                let dout = dmixed.slice(s![rows.clone(), qc.clone()]);
                let da = dout.dot(&v.t());
                dqkv.slice_mut(s![rows.clone(), vc]).assign(&a.t().dot(&dout));
                // softmax backward: ds = a * (da - rowsum(da * a))
                let mut ds = &da * &a;
                let rs = ds.sum_axis(Axis(1)).insert_axis(Axis(1));
                ds = &a * &(&da - &rs);
                ds *= scale;
                dqkv.slice_mut(s![rows.clone(), qc]).assign(&ds.dot(&k));
                dqkv.slice_mut(s![rows.clone(), kc]).assign(&ds.t().dot(&q));
            }
        }
        self.qkv.backward(p, g, x, dqkv.view(), true).unwrap()
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache<F> {
    pub pre: Array2<F>,
    pub act: Array2<F>,
}

impl<F: Real> MlpCache<F> {
    pub fn floats(&self) -> usize {
        self.pre.len() + self.act.len()
    }
}

impl Mlp {
    pub fn declare(lb: &mut LayoutBuilder, prefix: &str, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::declare(lb, &format!("{prefix}.fc1"), dim, hidden),
            fc2: Linear::declare(lb, &format!("{prefix}.fc2"), hidden, dim),
        }
    }

    pub fn forward<F: Real>(&self, p: &Params<F>, x: ArrayView2<'_, F>) -> (Array2<F>, MlpCache<F>) {
        let pre = self.fc1.forward(p, x);
        let act = pre.mapv(gelu);
        let out = self.fc2.forward(p, act.view());
        (out, MlpCache { pre, act })
    }

    pub fn backward<F: Real>(
        &self,
        p: &Params<F>,
        g: &mut Params<F>,
        x: ArrayView2<'_, F>,
        cache: &MlpCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        let mut dact = self.fc2.backward(p, g, cache.act.view(), dy, true).unwrap();
        Zip::from(&mut dact).and(&cache.pre).for_each(|d, &z| *d = *d * gelu_grad(z));
        self.fc1.backward(p, g, x, dact.view(), true).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_344_746_068_542_9).abs() < 1e-12);
        let h = 1e-6;
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 3.1] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut a = array![[1.0f64, 2.0, 3.0], [1000.0, 1000.0, 1000.0]];
        softmax_rows(&mut a);
        for row in a.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((a[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut lb = LayoutBuilder::new();
        let ln = LayerNorm::declare(&mut lb, "ln", 4);
        let mut p = Params::<f64>::zeros(lb.finish());
        ln.init(&mut p);
        let x = array![[1.0, 2.0, 3.0, 4.0], [-5.0, 0.0, 5.0, 10.0]];
        let (y, _) = ln.forward(&p, x.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-9);
            assert!((row.mapv(|v| v * v).sum() / 4.0 - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_identical_rows_normalize_to_zero() {
        let mut lb = LayoutBuilder::new();
        let bn = BatchNorm::declare(&mut lb, "bn", 3);
        let mut p = Params::<f64>::zeros(lb.finish());
        bn.init(&mut p);
        let x = array![[1.0, -2.0, 3.0], [1.0, -2.0, 3.0]];
        let (y, cache) = bn.forward_train(&p, x.view());
        assert!(y.iter().all(|v| *v == 0.0));
        bn.update_running(&mut p, &cache);
        assert!((p.vec(bn.running_mean)[0] - 0.1).abs() < 1e-12);
        assert!((p.vec(bn.running_var)[0] - 0.9).abs() < 1e-12);
    }

    fn finite_diff_check<Fwd>(p: &mut Params<f64>, analytic: &Params<f64>, mut loss: Fwd)
    where
        Fwd: FnMut(&Params<f64>) -> f64,
    {
        let h = 1e-5;
        for i in 0..p.data().len() {
            let orig = p.data()[i];
            p.data_mut()[i] = orig + h;
            let up = loss(p);
            p.data_mut()[i] = orig - h;
            let down = loss(p);
            p.data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-5 * (1.0 + fd.abs().max(a.abs())),
                "param {i}: fd {fd} analytic {a}"
            );
        }
    }

    #[test]
    fn attention_and_mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lb = LayoutBuilder::new();
        let attn = Attention::declare(&mut lb, "attn", 4, 2);
        let mlp = Mlp::declare(&mut lb, "mlp", 4, 8);
        let ln = LayerNorm::declare(&mut lb, "ln", 4);
        let mut p = Params::<f64>::zeros(lb.finish());
        for id in p.ids().collect::<Vec<_>>() {
            normal_init(&mut p, id, 0.5, &mut rng);
        }
        let x = Array2::from_shape_fn((6, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 * 0.3 - 0.6);
        let target = Array2::from_shape_fn((6, 4), |(i, j)| ((i + 2 * j) % 3) as f64 - 1.0);
        let loss = |p: &Params<f64>| {
            let (a, _) = attn.forward(p, x.view(), 2, 3);
            let (l, _) = ln.forward(p, a.view());
            let (m, _) = mlp.forward(p, l.view());
            (&m * &target).sum()
        };
        let mut g = p.zeros_like();
        let (a, ac) = attn.forward(&p, x.view(), 2, 3);
        let (l, lc) = ln.forward(&p, a.view());
        let (_, mc) = mlp.forward(&p, l.view());
        let dl = mlp.backward(&p, &mut g, l.view(), &mc, target.view());
        let da = ln.backward(&p, &mut g, &lc, dl.view());
        attn.backward(&p, &mut g, x.view(), &ac, da.view(), 2, 3);
        finite_diff_check(&mut p, &g, loss);
    }

    #[test]
    fn batch_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut lb = LayoutBuilder::new();
        let fc = Linear::declare(&mut lb, "fc", 3, 4);
        let bn = BatchNorm::declare(&mut lb, "bn", 4);
        let mut p = Params::<f64>::zeros(lb.finish());
        fc.init(&mut p, 0.7, &mut rng);
        bn.init(&mut p);
        normal_init(&mut p, bn.gamma, 1.0, &mut rng);
        let x = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - 2.0) * 0.4 + j as f64 * 0.1 * i as f64);
        let target = Array2::from_shape_fn((5, 4), |(i, j)| ((3 * i + j) % 4) as f64 - 1.5);
        let loss = |p: &Params<f64>| {
            let h = fc.forward(p, x.view());
            let (y, _) = bn.forward_train(p, h.view());
            (&y.mapv(gelu) * &target).sum()
        };
        let mut g = p.zeros_like();
        let h = fc.forward(&p, x.view());
        let (y, c) = bn.forward_train(&p, h.view());
        let dy = &target * &y.mapv(gelu_grad);
        let dh = bn.backward(&p, &mut g, &c, dy.view());
        fc.backward(&p, &mut g, x.view(), dh.view(), false);
        finite_diff_check(&mut p, &g, loss);
    }
}
