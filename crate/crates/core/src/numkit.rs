//! Dense numeric kernels: row-major `f32` matrices, softmax cross-entropy
//! with analytic gradients, momentum SGD with a cosine schedule, and the
//! seeded random stream every trainer draws from.
//!
//! Features and weights are stored as `f32`. Loss sums, means and the
//! cross-entropy kernel itself accumulate in `f64`.

use std::f64::consts::PI;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry at row {}, col {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        if parts.iter().any(|m| m.cols != cols) {
            return Err(Error::Shape("vstack over differing column counts".into()));
        }
        let rows = parts.iter().map(|m| m.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for m in parts {
            data.extend_from_slice(&m.data);
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Column means with `f64` accumulation.
    pub fn column_means(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.cols];
        for row in self.iter_rows() {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += v as f64;
            }
        }
        let n = self.rows.max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }

    /// Population standard deviation per column.
    pub fn column_stds(&self) -> Vec<f64> {
        let means = self.column_means();
        let mut acc = vec![0.0f64; self.cols];
        for row in self.iter_rows() {
            for ((a, &v), m) in acc.iter_mut().zip(row).zip(&means) {
                let dv = v as f64 - m;
                *a += dv * dv;
            }
        }
        let n = self.rows.max(1) as f64;
        acc.iter().map(|a| (a / n).sqrt()).collect()
    }
}

/// `a · bᵀ`: `(n×k)·(m×k)ᵀ → n×m`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "a·bᵀ with a {}x{} and b {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `aᵀ · b`: `(n×k)ᵀ·(n×m) → k×m`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "aᵀ·b with a {}x{} and b {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for n in 0..a.rows {
        let ar = a.row(n);
        let br = b.row(n);
        for (k, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out.row_mut(k).iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · b`: `(n×k)·(k×m) → n×m`.
pub fn matmul_nn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "a·b with a {}x{} and b {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let ar = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Softmax over `v` in place; returns `log Σ exp(v)` of the original values.
pub(crate) fn softmax_in_place(v: &mut [f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    max + sum.ln()
}

/// Linear softmax head `ν(Wz + b)` held in `f64`, used wherever a loss or
/// gradient has to be exact to well below `f32` resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams64 {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes × dim`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

/// Loss and gradient of a weighted cross-entropy objective.
#[derive(Clone, Debug)]
pub struct WeightedCe {
    pub loss: f64,
    pub grad_w: Vec<f64>,
    pub grad_b: Vec<f64>,
}

impl LinearParams64 {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            classes,
            dim,
            w: vec![0.0; classes * dim],
            b: vec![0.0; classes],
        }
    }

    pub fn num_params(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn logits_into(&self, z: &[f32], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let wr = &self.w[c * self.dim..(c + 1) * self.dim];
            let mut acc = self.b[c];
            for (w, &x) in wr.iter().zip(z) {
                acc += w * x as f64;
            }
            *o = acc;
        }
    }

    /// Per-row negative log-likelihood of `labels` under this head.
    pub fn row_losses(&self, z: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
        self.check(z, labels)?;
        let mut logits = vec![0.0; self.classes];
        Ok(z.iter_rows()
            .zip(labels)
            .map(|(row, &y)| {
                self.logits_into(row, &mut logits);
                let lse = log_sum_exp(&logits);
                lse - logits[y]
            })
            .collect())
    }

    /// `Σ_i weights_i · (−log ν_{y_i}(W z_i + b))` and, if requested, its
    /// exact gradient.
    pub fn weighted_ce(
        &self,
        z: &Matrix,
        labels: &[usize],
        weights: &[f64],
        with_grad: bool,
    ) -> Result<WeightedCe> {
        self.check(z, labels)?;
        if weights.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} samples",
                weights.len(),
                labels.len()
            )));
        }
        let mut grad_w = if with_grad { vec![0.0; self.w.len()] } else { Vec::new() };
        let mut grad_b = if with_grad { vec![0.0; self.classes] } else { Vec::new() };
        let mut probs = vec![0.0; self.classes];
        let mut loss = 0.0;
        for ((row, &y), &wt) in z.iter_rows().zip(labels).zip(weights) {
            if wt == 0.0 {
                continue;
            }
            self.logits_into(row, &mut probs);
            let true_logit = probs[y];
            let lse = softmax_in_place(&mut probs);
            loss += wt * (lse - true_logit);
            if with_grad {
                probs[y] -= 1.0;
                for (c, &p) in probs.iter().enumerate() {
                    let g = wt * p;
                    grad_b[c] += g;
                    let gw = &mut grad_w[c * self.dim..(c + 1) * self.dim];
                    for (gv, &x) in gw.iter_mut().zip(row) {
                        *gv += g * x as f64;
                    }
                }
            }
        }
        Ok(WeightedCe { loss, grad_w, grad_b })
    }

    fn check(&self, z: &Matrix, labels: &[usize]) -> Result<()> {
        if z.cols() != self.dim {
            return Err(Error::Shape(format!(
                "features have {} columns, classifier expects {}",
                z.cols(),
                self.dim
            )));
        }
        if z.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                z.rows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::InvalidInput(format!(
                "label {y} outside [0, {})",
                self.classes
            )));
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean cross-entropy over a batch and its analytic gradients.
#[derive(Clone, Debug)]
pub struct CeLossGrad {
    pub loss: f64,
    pub grad_w: Matrix,
    pub grad_b: Vec<f32>,
}

/// Mean softmax cross-entropy of `labels` under `ν(Wz + b)`, with exact
/// gradients of that mean with respect to `W` and `b`.
pub fn ce_loss_and_grad(w: &Matrix, b: &[f32], z: &Matrix, labels: &[usize]) -> Result<CeLossGrad> {
    if b.len() != w.rows() {
        return Err(Error::Shape(format!(
            "bias of length {} for {} classes",
            b.len(),
            w.rows()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let params = LinearParams64 {
        classes: w.rows(),
        dim: w.cols(),
        w: w.data().iter().map(|&v| v as f64).collect(),
        b: b.iter().map(|&v| v as f64).collect(),
    };
    let weights = vec![1.0 / labels.len() as f64; labels.len()];
    let out = params.weighted_ce(z, labels, &weights, true)?;
    Ok(CeLossGrad {
        loss: out.loss,
        grad_w: Matrix {
            rows: w.rows(),
            cols: w.cols(),
            data: out.grad_w.iter().map(|&g| g as f32).collect(),
        },
        grad_b: out.grad_b.iter().map(|&g| g as f32).collect(),
    })
}

/// Cosine-annealed learning rate `base · ½(1 + cos(π·fraction))`.
pub fn cosine_lr(base_lr: f64, epoch_fraction: f64) -> f64 {
    base_lr * 0.5 * (1.0 + (PI * epoch_fraction).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Whether weight decay also applies to bias vectors.
    pub decay_bias: bool,
}

impl SgdConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} < 0", self.weight_decay)));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be > 0", self.base_lr)));
        }
        Ok(())
    }
}

/// One parameter tensor handed to [`SgdState::step`].
pub struct ParamGroup<'a> {
    pub values: &'a mut [f32],
    pub grads: &'a [f32],
    /// Bias vectors are exempt from weight decay unless `decay_bias` is set.
    pub is_bias: bool,
}

/// Momentum SGD with L2 weight decay folded into the gradient:
/// `g ← g + λp; v ← μv + g; p ← p − lr·v`.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub config: SgdConfig,
    pub total_epochs: u32,
    velocity: Vec<Vec<f32>>,
}

impl SgdState {
    pub fn new(config: SgdConfig, total_epochs: u32) -> Result<Self> {
        config.validate()?;
        if total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        Ok(Self {
            config,
            total_epochs,
            velocity: Vec::new(),
        })
    }

    /// Learning rate for zero-based `epoch` under the per-epoch cosine schedule.
    pub fn lr_for_epoch(&self, epoch: u32) -> f64 {
        cosine_lr(self.config.base_lr, epoch as f64 / self.total_epochs as f64)
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub fn step(&mut self, groups: &mut [ParamGroup<'_>], epoch_fraction: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&epoch_fraction) {
            return Err(Error::InvalidInput(format!(
                "epoch fraction {epoch_fraction} outside [0, 1]"
            )));
        }
        let lr = cosine_lr(self.config.base_lr, epoch_fraction) as f32;
        if self.velocity.is_empty() {
            self.velocity = groups.iter().map(|g| vec![0.0; g.values.len()]).collect();
        }
        if self.velocity.len() != groups.len() {
            return Err(Error::Shape(format!(
                "{} parameter groups, optimizer tracks {}",
                groups.len(),
                self.velocity.len()
            )));
        }
        let mu = self.config.momentum as f32;
        for (group, vel) in groups.iter_mut().zip(&mut self.velocity) {
            if group.values.len() != group.grads.len() || vel.len() != group.values.len() {
                return Err(Error::Shape("parameter/gradient length mismatch".into()));
            }
            let wd = if group.is_bias && !self.config.decay_bias {
                0.0
            } else {
                self.config.weight_decay as f32
            };
            for ((p, &g), v) in group.values.iter_mut().zip(group.grads).zip(vel.iter_mut()) {
                let g = g + wd * *p;
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RngAlgorithm {
    ChaCha8,
}

/// Seeded pseudo-random stream. Identical `(seed, stream)` pairs produce
/// identical sequences on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    algorithm: RngAlgorithm,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            algorithm: RngAlgorithm::ChaCha8,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream derived from the same seed, e.g. one per stage.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = Self::new(seed);
        rng.inner.set_stream(stream);
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn algorithm(&self) -> RngAlgorithm {
        self.algorithm
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    #[test]
    fn softmax_uniform_and_stable() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_reference_values() {
        // e^x / Σe^x for [1,2,3], evaluated to 12 digits independently.
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [0.0900305731704, 0.244728471055, 0.665240955775];
        for (a, e) in p.iter().zip(expected) {
            assert!((a - e).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[0.0, f64::NAN]), Err(Error::InvalidInput(_))));
        assert!(matches!(softmax(&[f64::INFINITY]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_classifier_loss_is_log_classes() {
        let w = Matrix::zeros(4, 3);
        let z = Matrix::new(1, 3, vec![0.3, -1.0, 2.0]).unwrap();
        let out = ce_loss_and_grad(&w, &[0.0; 4], &z, &[2]).unwrap();
        assert!((out.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_shape_errors() {
        let w = Matrix::zeros(4, 3);
        let z = Matrix::zeros(2, 2);
        assert!(matches!(ce_loss_and_grad(&w, &[0.0; 4], &z, &[0, 1]), Err(Error::Shape(_))));
        let z = Matrix::zeros(2, 3);
        assert!(matches!(ce_loss_and_grad(&w, &[0.0; 3], &z, &[0, 1]), Err(Error::Shape(_))));
        assert!(matches!(ce_loss_and_grad(&w, &[0.0; 4], &z, &[0]), Err(Error::Shape(_))));
        assert!(matches!(
            ce_loss_and_grad(&w, &[0.0; 4], &z, &[0, 4]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn duplicated_batch_has_identical_loss_and_grads() {
        let mut rng = SeededRng::new(3);
        let w = random_matrix(&mut rng, 5, 4);
        let b: Vec<f32> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = random_matrix(&mut rng, 7, 4);
        let labels: Vec<usize> = (0..7).map(|_| rng.random_range(0..5)).collect();
        let once = ce_loss_and_grad(&w, &b, &z, &labels).unwrap();
        let z2 = Matrix::vstack(&[&z, &z]).unwrap();
        let labels2 = [labels.clone(), labels].concat();
        let twice = ce_loss_and_grad(&w, &b, &z2, &labels2).unwrap();
        assert!((once.loss - twice.loss).abs() <= 1e-12 * once.loss.abs().max(1.0));
        for (a, b) in once.grad_w.data().iter().zip(twice.grad_w.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3));
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.2, 0.0), 0.2);
        assert!(cosine_lr(0.2, 1.0).abs() < 1e-17);
        assert!((cosine_lr(0.2, 0.5) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_applies_decay_then_momentum() {
        let cfg = SgdConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
            decay_bias: false,
        };
        let mut state = SgdState::new(cfg, 10).unwrap();
        let mut w = vec![1.0f32, -2.0];
        let mut b = vec![0.5f32];
        for _ in 0..2 {
            state
                .step(
                    &mut [
                        ParamGroup { values: &mut w, grads: &[0.5, 0.5], is_bias: false },
                        ParamGroup { values: &mut b, grads: &[1.0], is_bias: true },
                    ],
                    0.0,
                )
                .unwrap();
        }
        // step 1: g = 0.5 + 0.01·1 = 0.51, v = 0.51, w = 1 − 0.051 = 0.949
        // step 2: g = 0.5 + 0.00949 = 0.50949, v = 0.9·0.51 + 0.50949 = 0.96849
        let w0 = 0.949f64 - 0.1 * 0.96849;
        assert!((w[0] as f64 - w0).abs() < 1e-6);
        // bias: no decay; v1 = 1, v2 = 1.9
        assert!((b[0] as f64 - (0.5 - 0.1 - 0.19)).abs() < 1e-6);
    }

    #[test]
    fn sgd_final_fraction_leaves_params() {
        let cfg = SgdConfig { base_lr: 0.2, momentum: 0.9, weight_decay: 0.0005, decay_bias: true };
        let mut state = SgdState::new(cfg, 4).unwrap();
        let mut p = vec![0.3f32, 0.7];
        state
            .step(&mut [ParamGroup { values: &mut p, grads: &[1.0, -1.0], is_bias: false }], 1.0)
            .unwrap();
        assert_eq!(p, vec![0.3, 0.7]);
        assert!(state
            .step(&mut [ParamGroup { values: &mut p, grads: &[1.0, -1.0], is_bias: false }], 1.5)
            .is_err());
    }

    #[test]
    fn sgd_rejects_bad_config() {
        let base = SgdConfig { base_lr: 0.2, momentum: 0.9, weight_decay: 0.0, decay_bias: false };
        assert!(SgdState::new(SgdConfig { momentum: 1.0, ..base }, 1).is_err());
        assert!(SgdState::new(SgdConfig { weight_decay: -1.0, ..base }, 1).is_err());
        assert!(SgdState::new(SgdConfig { base_lr: 0.0, ..base }, 1).is_err());
    }

    #[test]
    fn rng_streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map({
            let mut r = SeededRng::new(9);
            move |_| r.next_u64()
        }).collect();
        let b: Vec<u64> = (0..4).map({
            let mut r = SeededRng::new(9);
            move |_| r.next_u64()
        }).collect();
        assert_eq!(a, b);
        let mut s = SeededRng::with_stream(9, 1);
        assert_ne!(a[0], s.next_u64());
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = SeededRng::new(1);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 5, 4);
        let nt = matmul_nt(&a, &b).unwrap();
        let bt = Matrix::new(4, 5, (0..20).map(|i| b.row(i % 5)[i / 5]).collect()).unwrap();
        let nn = matmul_nn(&a, &bt).unwrap();
        for (x, y) in nt.data().iter().zip(nn.data()) {
            assert!((x - y).abs() < 1e-5);
        }
        let at = Matrix::new(4, 3, (0..12).map(|i| a.row(i % 3)[i / 3]).collect()).unwrap();
        let tn = matmul_tn(&at, &bt).unwrap();
        for (x, y) in tn.data().iter().zip(nn.data()) {
            assert!((x - y).abs() < 1e-5);
        }
        assert!(matmul_nt(&a, &bt).is_err());
    }

    #[test]
    fn matrix_rejects_non_finite_and_bad_len() {
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f32::NAN]).is_err());
    }

    pub(crate) fn random_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix {
        Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap()
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..12),
            shift in -100.0f64..100.0,
        ) {
            let p = softmax(&logits).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }
}
