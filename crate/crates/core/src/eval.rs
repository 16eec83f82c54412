//! Metrics, confidence intervals, paired significance tests, linear probing
//! and embedding export.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const N_BOOT: usize = 1000;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("labels contain a single class; metric undefined")]
    SingleClass,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("label {label} outside 0..{n_classes}")]
    Label { label: usize, n_classes: usize },
    #[error("bootstrap gave up after {0} undefined resamples")]
    Resampling(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

fn check_len(a: usize, b: usize) -> Result<(), EvalError> {
    if a != b {
        return Err(EvalError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

/// Ranks starting at 1, ties sharing their mean rank.
fn midranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Binary ROC AUC via the Mann–Whitney statistic; ties count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    check_len(scores.len(), labels.len())?;
    let n1 = labels.iter().filter(|&&l| l).count();
    let n0 = labels.len() - n1;
    if n1 == 0 || n0 == 0 {
        return Err(EvalError::SingleClass);
    }
    let ranks = midranks(scores);
    let r1: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    Ok(u / (n1 as f64 * n0 as f64))
}

/// AUC from a `[n, C]` score matrix. Two columns: AUC of column 1. More:
/// unweighted mean of one-vs-rest AUCs over the classes present in `labels`.
pub fn macro_auc(scores: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64, EvalError> {
    check_len(scores.nrows(), labels.len())?;
    let c = scores.ncols();
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(EvalError::Label { label, n_classes: c });
    }
    if c == 2 {
        let pos: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc(scores.column(1).to_vec().as_slice(), &pos);
    }
    let mut total = 0.0;
    let mut present = 0;
    for k in 0..c {
        let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        match auc(scores.column(k).to_vec().as_slice(), &pos) {
            Ok(a) => {
                total += a;
                present += 1;
            }
            Err(EvalError::SingleClass) => {}
            Err(e) => return Err(e),
        }
    }
    if present < 2 {
        return Err(EvalError::SingleClass);
    }
    Ok(total / present as f64)
}

/// Accuracy and macro-F1 over `n_classes` classes. A class with no true or
/// predicted instances scores F1 = 0.
pub fn classification_metrics(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<(f64, f64), EvalError> {
    check_len(preds.len(), labels.len())?;
    for &l in preds.iter().chain(labels) {
        if l >= n_classes {
            return Err(EvalError::Label { label: l, n_classes });
        }
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    let mut f1 = 0.0;
    for k in 0..n_classes {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == k, l == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            f1 += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok((correct as f64 / preds.len() as f64, f1 / n_classes as f64))
}

pub fn argmax_rows(scores: ArrayView2<'_, f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (j, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairedTest {
    Delong,
    Mcnemar,
    BootstrapF1,
}

impl PairedTest {
    pub fn as_str(&self) -> &'static str {
        match self {
            PairedTest::Delong => "delong",
            PairedTest::Mcnemar => "mcnemar",
            PairedTest::BootstrapF1 => "bootstrap_f1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub test: PairedTest,
    pub statistic: f64,
    pub p_value: f64,
    /// Set when a degenerate case was resolved by convention.
    pub flag: Option<String>,
}

fn normal_two_sided(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// DeLong test for two correlated AUCs on the same binary test set. The
/// statistic is `z = (AUC_a − AUC_b) / se`.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[bool]) -> Result<PairedTestResult, EvalError> {
    check_len(scores_a.len(), labels.len())?;
    check_len(scores_b.len(), labels.len())?;
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(EvalError::SingleClass);
    }
    let (m, n) = (pos.len() as f64, neg.len() as f64);
    let psi = |x: f64, y: f64| {
        if x > y {
            1.0
        } else if x == y {
            0.5
        } else {
            0.0
        }
    };
    let placements = |s: &[f64]| {
        let v10: Vec<f64> = pos.iter().map(|&i| neg.iter().map(|&j| psi(s[i], s[j])).sum::<f64>() / n).collect();
        let v01: Vec<f64> = neg.iter().map(|&j| pos.iter().map(|&i| psi(s[i], s[j])).sum::<f64>() / m).collect();
        (v10, v01)
    };
    let (a10, a01) = placements(scores_a);
    let (b10, b01) = placements(scores_b);
    // variance of the difference of placements is the a/b covariance form
    let var_of_diff = |x: &[f64], y: &[f64]| {
        let d: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
        if d.len() < 2 {
            return 0.0;
        }
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64
    };
    let var = var_of_diff(&a10, &b10) / m + var_of_diff(&a01, &b01) / n;
    let delta = auc(scores_a, labels)? - auc(scores_b, labels)?;
    if !(var > 1e-300) {
        return Ok(PairedTestResult {
            test: PairedTest::Delong,
            statistic: 0.0,
            p_value: 1.0,
            flag: Some(format!("degenerate variance (delta auc {delta})")),
        });
    }
    let z = delta / var.sqrt();
    Ok(PairedTestResult { test: PairedTest::Delong, statistic: z, p_value: normal_two_sided(z), flag: None })
}

fn binom_cdf_half(k: usize, n: usize) -> f64 {
    // P(X ≤ k) for X ~ Bin(n, 1/2), n small
    let mut c = 1.0f64;
    let mut acc = 0.0;
    for i in 0..=k {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        acc += c;
    }
    acc / 2f64.powi(n as i32)
}

/// McNemar test on per-sample correctness. `b` counts samples A gets right
/// and B wrong, `c` the reverse. Exact binomial when `b + c < 25` (statistic
/// `b − c`), otherwise continuity-corrected chi-square signed by `b − c`.
pub fn mcnemar_test(preds_a: &[usize], preds_b: &[usize], labels: &[usize]) -> Result<PairedTestResult, EvalError> {
    check_len(preds_a.len(), labels.len())?;
    check_len(preds_b.len(), labels.len())?;
    let mut b = 0usize;
    let mut c = 0usize;
    for i in 0..labels.len() {
        match (preds_a[i] == labels[i], preds_b[i] == labels[i]) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_from_counts(b, c))
}

pub fn mcnemar_from_counts(b: usize, c: usize) -> PairedTestResult {
    let n = b + c;
    let diff = b as f64 - c as f64;
    if n == 0 {
        return PairedTestResult {
            test: PairedTest::Mcnemar,
            statistic: 0.0,
            p_value: 1.0,
            flag: Some("no discordant pairs".into()),
        };
    }
    if n < 25 {
        let p = (2.0 * binom_cdf_half(b.min(c), n)).min(1.0);
        return PairedTestResult { test: PairedTest::Mcnemar, statistic: diff, p_value: p, flag: None };
    }
    let chi = (diff.abs() - 1.0).max(0.0).powi(2) / n as f64;
    let p = normal_two_sided(chi.sqrt());
    PairedTestResult { test: PairedTest::Mcnemar, statistic: chi.copysign(diff), p_value: p, flag: None }
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub lo: f64,
    pub hi: f64,
    /// Resamples discarded because the metric was undefined on them.
    pub redrawn: usize,
}

fn draw(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..n)).collect()
}

/// Statistic values on `n_boot` index resamples with replacement; resamples
/// where `metric` returns `None` are redrawn.
fn bootstrap_values(
    n: usize,
    n_boot: usize,
    seed: u64,
    metric: impl Fn(&[usize]) -> Option<f64>,
) -> Result<(Vec<f64>, usize), EvalError> {
    if n < 2 {
        return Err(EvalError::TooFew { need: 2, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_boot);
    let mut redrawn = 0;
    while values.len() < n_boot {
        let idx = draw(&mut rng, n);
        match metric(&idx) {
            Some(v) => values.push(v),
            None => {
                redrawn += 1;
                if redrawn > 100 * n_boot.max(1) {
                    return Err(EvalError::Resampling(redrawn));
                }
            }
        }
    }
    if redrawn > 0 {
        log::debug!("bootstrap redrew {redrawn} undefined resamples");
    }
    Ok((values, redrawn))
}

/// Percentile 95% interval of `metric` over `n` samples.
pub fn bootstrap_ci(
    n: usize,
    n_boot: usize,
    seed: u64,
    metric: impl Fn(&[usize]) -> Option<f64>,
) -> Result<BootstrapCi, EvalError> {
    let (mut values, redrawn) = bootstrap_values(n, n_boot, seed, metric)?;
    values.sort_by(f64::total_cmp);
    Ok(BootstrapCi { lo: quantile(&values, 0.025), hi: quantile(&values, 0.975), redrawn })
}

/// Paired bootstrap of `ΔF1 = F1(a) − F1(b)`. The p-value is
/// `min(1, 2·min(P*(Δ ≤ 0), P*(Δ ≥ 0)))` over the resampled Δ, i.e. the
/// percentile-interval inversion; the statistic is the observed Δ.
pub fn bootstrap_f1_test(
    preds_a: &[usize],
    preds_b: &[usize],
    labels: &[usize],
    n_classes: usize,
    n_boot: usize,
    seed: u64,
) -> Result<PairedTestResult, EvalError> {
    check_len(preds_a.len(), labels.len())?;
    check_len(preds_b.len(), labels.len())?;
    let f1_of = |p: &[usize], l: &[usize]| classification_metrics(p, l, n_classes).map(|m| m.1);
    let observed = f1_of(preds_a, labels)? - f1_of(preds_b, labels)?;
    let (deltas, _) = bootstrap_values(labels.len(), n_boot, seed, |idx| {
        let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let a: Vec<usize> = idx.iter().map(|&i| preds_a[i]).collect();
        let b: Vec<usize> = idx.iter().map(|&i| preds_b[i]).collect();
        Some(f1_of(&a, &l).ok()? - f1_of(&b, &l).ok()?)
    })?;
    let nb = deltas.len() as f64;
    let le = deltas.iter().filter(|&&d| d <= 0.0).count() as f64 / nb;
    let ge = deltas.iter().filter(|&&d| d >= 0.0).count() as f64 / nb;
    Ok(PairedTestResult {
        test: PairedTest::BootstrapF1,
        statistic: observed,
        p_value: (2.0 * le.min(ge)).min(1.0),
        flag: Some("p = 2·min(P(Δ*≤0), P(Δ*≥0)), Δ = F1(a) − F1(b)".into()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub auc_ci: (f64, f64),
    pub accuracy_ci: (f64, f64),
    pub f1_ci: (f64, f64),
    pub n: usize,
}

/// Point metrics plus percentile bootstrap intervals drawn from one resample
/// stream. Intervals are widened to contain the point estimate when the
/// percentile interval misses it.
pub fn metric_report(scores: ArrayView2<'_, f64>, labels: &[usize], n_boot: usize, seed: u64) -> Result<MetricReport, EvalError> {
    let c = scores.ncols();
    let preds = argmax_rows(scores);
    let auc0 = macro_auc(scores, labels)?;
    let (acc0, f10) = classification_metrics(&preds, labels, c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = labels.len();
    if n < 2 {
        return Err(EvalError::TooFew { need: 2, got: n });
    }
    let (mut aucs, mut accs, mut f1s) = (Vec::new(), Vec::new(), Vec::new());
    let mut redrawn = 0;
    while aucs.len() < n_boot {
        if redrawn > 100 * n_boot.max(1) {
            return Err(EvalError::Resampling(redrawn));
        }
        let idx = draw(&mut rng, n);
        redrawn += 1;
        let s = scores.select(Axis(0), &idx);
        let l: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let p: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let Ok(a) = macro_auc(s.view(), &l) else { continue };
        let Ok((acc, f1)) = classification_metrics(&p, &l, c) else { continue };
        redrawn -= 1;
        aucs.push(a);
        accs.push(acc);
        f1s.push(f1);
    }
    let ci = |v: &mut Vec<f64>, point: f64| {
        v.sort_by(f64::total_cmp);
        (quantile(v, 0.025).min(point), quantile(v, 0.975).max(point))
    };
    Ok(MetricReport {
        auc: auc0,
        accuracy: acc0,
        f1: f10,
        auc_ci: ci(&mut aucs, auc0),
        accuracy_ci: ci(&mut accs, acc0),
        f1_ci: ci(&mut f1s, f10),
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "d_l2")]
    pub l2: f64,
    #[serde(default = "d_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "d_tol")]
    pub tol: f64,
    #[serde(default = "d_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "d_n_boot")]
    pub n_boot: usize,
}

fn d_l2() -> f64 {
    1e-4
}
fn d_max_epochs() -> usize {
    2000
}
fn d_tol() -> f64 {
    1e-5
}
fn d_test_fraction() -> f64 {
    0.25
}
fn d_n_boot() -> usize {
    N_BOOT
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2: d_l2(), max_epochs: d_max_epochs(), tol: d_tol(), test_fraction: d_test_fraction(), n_boot: d_n_boot() }
    }
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
    /// `[d, C]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub epochs: usize,
    pub grad_norm: f64,
}

fn softmax_in_place(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
}

impl LinearProbe {
    fn standardize(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.scale
    }

    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = self.standardize(x).dot(&self.weight) + &self.bias;
        softmax_in_place(&mut z);
        z
    }

    /// Fits by full-batch gradient descent with Armijo backtracking until the
    /// gradient norm drops below `cfg.tol` or `cfg.max_epochs` is reached.
    pub fn fit(x: ArrayView2<'_, f64>, labels: &[usize], n_classes: usize, cfg: &ProbeConfig) -> Result<Self, EvalError> {
        check_len(x.nrows(), labels.len())?;
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(EvalError::Label { label, n_classes });
        }
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(EvalError::SingleClass);
        }
        let n = x.nrows() as f64;
        let mean = x.mean_axis(Axis(0)).unwrap();
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let d = x.ncols();
        let mut probe = LinearProbe {
            mean,
            scale,
            weight: Array2::zeros((d, n_classes)),
            bias: Array1::zeros(n_classes),
            epochs: 0,
            grad_norm: f64::INFINITY,
        };
        let xs = probe.standardize(x);
        let mut onehot = Array2::<f64>::zeros((labels.len(), n_classes));
        for (i, &l) in labels.iter().enumerate() {
            onehot[[i, l]] = 1.0;
        }
        let objective = |w: &Array2<f64>, b: &Array1<f64>| {
            let z = xs.dot(w) + b;
            let mut nll = 0.0;
            for (row, &l) in z.rows().into_iter().zip(labels) {
                let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                nll += lse - row[l];
            }
            nll / n + 0.5 * cfg.l2 * w.iter().map(|v| v * v).sum::<f64>()
        };
        let mut step = 1.0;
        let mut f = objective(&probe.weight, &probe.bias);
        for epoch in 0..cfg.max_epochs {
            let mut p = xs.dot(&probe.weight) + &probe.bias;
            softmax_in_place(&mut p);
            let r = (&p - &onehot) / n;
            let gw = xs.t().dot(&r) + &(&probe.weight * cfg.l2);
            let gb = r.sum_axis(Axis(0));
            let g2 = gw.iter().chain(gb.iter()).map(|v| v * v).sum::<f64>();
            probe.grad_norm = g2.sqrt();
            probe.epochs = epoch;
            if probe.grad_norm < cfg.tol {
                break;
            }
            step *= 2.0;
            loop {
                let w = &probe.weight - &(&gw * step);
                let b = &probe.bias - &(&gb * step);
                let fnew = objective(&w, &b);
                if fnew <= f - 0.5 * step * g2 || step < 1e-12 {
                    probe.weight = w;
                    probe.bias = b;
                    f = fnew;
                    break;
                }
                step *= 0.5;
            }
        }
        Ok(probe)
    }
}

/// Seeded shuffle split; returns `(train, test)` indices.
pub fn holdout_split(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n.saturating_sub(1));
    let test = idx[..n_test].to_vec();
    let train = idx[n_test..].to_vec();
    (train, test)
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub probe: LinearProbe,
    pub report: MetricReport,
    pub test_indices: Vec<usize>,
    pub test_scores: Array2<f64>,
}

/// Trains a linear classifier on a seeded train split of frozen embeddings
/// and reports metrics on the held-out remainder.
pub fn linear_probe(
    embeddings: ArrayView2<'_, f64>,
    labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeOutcome, EvalError> {
    check_len(embeddings.nrows(), labels.len())?;
    if labels.len() < 4 {
        return Err(EvalError::TooFew { need: 4, got: labels.len() });
    }
    let (train, test) = holdout_split(labels.len(), cfg.test_fraction, seed);
    let xtr = embeddings.select(Axis(0), &train);
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let probe = LinearProbe::fit(xtr.view(), &ytr, n_classes, cfg)?;
    let xte = embeddings.select(Axis(0), &test);
    let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let scores = probe.predict_proba(xte.view());
    let report = match metric_report(scores.view(), &yte, cfg.n_boot, seed.wrapping_add(1)) {
        Ok(r) => r,
        Err(EvalError::SingleClass) => {
            let preds = argmax_rows(scores.view());
            let (acc, f1) = classification_metrics(&preds, &yte, n_classes)?;
            MetricReport {
                auc: f64::NAN,
                accuracy: acc,
                f1,
                auc_ci: (f64::NAN, f64::NAN),
                accuracy_ci: (f64::NAN, f64::NAN),
                f1_ci: (f64::NAN, f64::NAN),
                n: yte.len(),
            }
        }
        Err(e) => return Err(e),
    };
    Ok(ProbeOutcome { probe, report, test_indices: test, test_scores: scores })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub slide_id: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub d_s: usize,
    pub encoder_checkpoint_hash: String,
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

/// Writes a row-major little-endian f32 matrix to `path` and its sidecar
/// next to it with a `.json` extension.
pub fn export_embeddings(
    path: &Path,
    matrix: ArrayView2<'_, f32>,
    slide_id: &str,
    encoder_checkpoint_hash: &str,
) -> Result<EmbeddingSidecar, EvalError> {
    if matrix.is_empty() {
        return Err(EvalError::Empty);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut bytes = Vec::with_capacity(matrix.len() * 4);
    for v in matrix.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, &bytes).map_err(io_err(path))?;
    let sidecar = EmbeddingSidecar {
        slide_id: slide_id.to_string(),
        m: matrix.nrows(),
        d_s: matrix.ncols(),
        encoder_checkpoint_hash: encoder_checkpoint_hash.to_string(),
    };
    let side = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, text).map_err(io_err(&side))?;
    Ok(sidecar)
}

pub fn read_embeddings(path: &Path) -> Result<(Array2<f32>, EmbeddingSidecar), EvalError> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(io_err(&side))?;
    let sidecar: EmbeddingSidecar =
        serde_json::from_str(&text).map_err(|e| EvalError::Format { path: side.clone(), msg: e.to_string() })?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != sidecar.m * sidecar.d_s * 4 {
        return Err(EvalError::Format {
            path: path.to_path_buf(),
            msg: format!("{} bytes for a {}x{} matrix", bytes.len(), sidecar.m, sidecar.d_s),
        });
    }
    let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let m = Array2::from_shape_vec((sidecar.m, sidecar.d_s), data).expect("length checked");
    Ok((m, sidecar))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub model: String,
    pub fold: String,
    pub auc: f64,
    pub auc_lo: f64,
    pub auc_hi: f64,
    pub acc: f64,
    pub f1: f64,
    pub f1_lo: f64,
    pub f1_hi: f64,
}

impl ReportRow {
    pub fn from_report(task: &str, model: &str, fold: &str, r: &MetricReport) -> Self {
        Self {
            task: task.into(),
            model: model.into(),
            fold: fold.into(),
            auc: r.auc,
            auc_lo: r.auc_ci.0,
            auc_hi: r.auc_ci.1,
            acc: r.accuracy,
            f1: r.f1,
            f1_lo: r.f1_ci.0,
            f1_hi: r.f1_ci.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRow {
    pub task: String,
    pub model_a: String,
    pub model_b: String,
    pub test: String,
    pub statistic: f64,
    pub p: f64,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), EvalError> {
    let csv_err = |e: csv::Error| EvalError::Format { path: path.to_path_buf(), msg: e.to_string() };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let csv_err = |e: csv::Error| EvalError::Format { path: path.to_path_buf(), msg: e.to_string() };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<Vec<T>, _>>().map_err(csv_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.3, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 6], &[false, true, false, true, true, false]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(EvalError::SingleClass)));
        assert!(matches!(auc(&[0.1], &[true, false]), Err(EvalError::LengthMismatch(1, 2))));
    }

    #[test]
    fn macro_auc_averages_one_vs_rest() {
        let s = array![[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8], [0.6, 0.3, 0.1]];
        assert_eq!(macro_auc(s.view(), &[0, 1, 2, 0]).unwrap(), 1.0);
        let b = array![[0.9, 0.1], [0.6, 0.4], [0.35, 0.65], [0.2, 0.8]];
        assert_eq!(macro_auc(b.view(), &[0, 0, 1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn classification_metric_examples() {
        assert_eq!(classification_metrics(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), (1.0, 1.0));
        assert_eq!(classification_metrics(&[0, 0, 0, 0], &[0, 1, 0, 1], 2).unwrap().0, 0.5);
        let (_, f1) = classification_metrics(&[0, 0, 0], &[0, 0, 0], 3).unwrap();
        assert!((f1 - 1.0 / 3.0).abs() < 1e-15);
        assert!(classification_metrics(&[0], &[0, 1], 2).is_err());
    }

    #[test]
    fn mcnemar_examples() {
        let r = mcnemar_from_counts(10, 0);
        assert_eq!(r.p_value, 1.0 / 512.0);
        assert_eq!(mcnemar_from_counts(4, 4).p_value, 1.0);
        assert_eq!(mcnemar_from_counts(4, 4).statistic, 0.0);
        assert!(mcnemar_from_counts(30, 30).p_value > 0.89);
        assert_eq!(mcnemar_from_counts(0, 0).p_value, 1.0);
        assert!(mcnemar_from_counts(0, 0).flag.is_some());
        let same = mcnemar_test(&[0, 1, 1], &[0, 1, 1], &[1, 1, 0]).unwrap();
        assert_eq!(same.p_value, 1.0);
    }

    #[test]
    fn delong_self_comparison() {
        let s = [0.1, 0.7, 0.3, 0.9, 0.5];
        let l = [false, true, false, true, true];
        let r = delong_test(&s, &s, &l).unwrap();
        assert_eq!(r.p_value, 1.0);
        assert!(r.flag.is_some());
    }

    #[test]
    fn bootstrap_determinism_and_constant_metric() {
        let ci = bootstrap_ci(20, N_BOOT, 7, |_| Some(1.0)).unwrap();
        assert_eq!((ci.lo, ci.hi), (1.0, 1.0));
        let data: Vec<f64> = (0..30).map(|i| (i * 7 % 11) as f64).collect();
        let mean = |idx: &[usize]| Some(idx.iter().map(|&i| data[i]).sum::<f64>() / idx.len() as f64);
        assert_eq!(bootstrap_ci(30, N_BOOT, 3, mean).unwrap(), bootstrap_ci(30, N_BOOT, 3, mean).unwrap());
        let p = [0, 1, 1, 0, 1];
        let l = [0, 1, 0, 0, 1];
        let t = bootstrap_f1_test(&p, &p, &l, 2, N_BOOT, 1).unwrap();
        assert_eq!((t.statistic, t.p_value), (0.0, 1.0));
    }

    #[test]
    fn embedding_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e/slide_1.f32");
        let m = array![[1.5f32, -0.0, f32::MIN_POSITIVE], [3.0, 1e-30, -7.25]];
        let side = export_embeddings(&path, m.view(), "slide_1", "abc").unwrap();
        assert_eq!(side.m, 2);
        let (back, s2) = read_embeddings(&path).unwrap();
        assert_eq!(s2, side);
        assert!(back.iter().zip(m.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(export_embeddings(&path, Array2::<f32>::zeros((0, 3)).view(), "x", ""), Err(EvalError::Empty)));
    }

    #[test]
    fn probe_separates_toy_classes() {
        let x = Array2::from_shape_fn((80, 3), |(i, j)| {
            let c = (i % 2) as f64;
            (c * 4.0 - 2.0) * (j == 0) as u8 as f64 + ((i * 31 + j * 17) % 13) as f64 * 0.05
        });
        let y: Vec<usize> = (0..80).map(|i| i % 2).collect();
        let out = linear_probe(x.view(), &y, 2, &ProbeConfig::default(), 4).unwrap();
        assert_eq!(out.report.accuracy, 1.0);
        assert!(matches!(LinearProbe::fit(x.view(), &[1; 80], 2, &ProbeConfig::default()), Err(EvalError::SingleClass)));
    }
}
