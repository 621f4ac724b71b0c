//! Stage-one training: a two-layer MLP embedding with a temporary linear
//! head, trained end to end on uniformly shuffled samples. After every epoch
//! the whole training set is embedded and handed to a [`SnapshotSink`].

use rand::seq::SliceRandom;
use rand::Rng;

use crate::classifier::LinearClassifier;
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::numkit::{
    ce_loss_and_grad, matmul_nn, matmul_nt, matmul_tn, Matrix, ParamGroup, SeededRng, SgdConfig,
    SgdState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Softplus,
}

impl Activation {
    pub fn id(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Softplus => 1,
        }
    }

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Softplus),
            _ => Err(Error::Format(format!("unknown activation id {id}"))),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            _ => Err(Error::Config(format!("unknown activation '{name}'"))),
        }
    }

    fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Softplus => {
                if x > 20.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation `x` and output `y`.
    fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

/// `z = W₂·σ(W₁x + b₁) + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    /// `hidden × input_dim`
    pub w1: Matrix,
    pub b1: Vec<f32>,
    /// `feature_dim × hidden`
    pub w2: Matrix,
    pub b2: Vec<f32>,
    pub activation: Activation,
    /// Epoch after which these weights were captured (0 = initialisation).
    pub epoch: u32,
}

impl EmbeddingParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(
        input_dim: usize,
        hidden: usize,
        feature_dim: usize,
        activation: Activation,
        rng: &mut SeededRng,
    ) -> Self {
        let mut glorot = |fan_out: usize, fan_in: usize| {
            let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
            let data = (0..fan_out * fan_in).map(|_| rng.random_range(-a..a)).collect();
            Matrix::new(fan_out, fan_in, data).expect("finite init")
        };
        let w1 = glorot(hidden, input_dim);
        let w2 = glorot(feature_dim, hidden);
        Self {
            w1,
            b1: vec![0.0; hidden],
            w2,
            b2: vec![0.0; feature_dim],
            activation,
            epoch: 0,
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize, feature_dim: usize, activation: Activation) -> Self {
        Self {
            w1: Matrix::zeros(hidden, input_dim),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(feature_dim, hidden),
            b2: vec![0.0; feature_dim],
            activation,
            epoch: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.is_finite()
            && self.w2.is_finite()
            && self.b1.iter().chain(&self.b2).all(|v| v.is_finite())
    }

    fn forward(&self, x: &Matrix) -> Result<Forward> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "inputs have {} columns, embedding expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut pre = matmul_nt(x, &self.w1)?;
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&self.b1) {
                *v += b;
            }
        }
        let mut hidden = pre.clone();
        for v in hidden.data_mut() {
            *v = self.activation.apply(*v);
        }
        let mut z = matmul_nt(&hidden, &self.w2)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.b2) {
                *v += b;
            }
        }
        Ok(Forward { pre, hidden, z })
    }
}

struct Forward {
    pre: Matrix,
    hidden: Matrix,
    z: Matrix,
}

/// Deterministic forward pass, one feature row per input row.
pub fn embed(params: &EmbeddingParams, x: &Matrix) -> Result<Matrix> {
    Ok(params.forward(x)?.z)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOneConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub decay_bias: bool,
    pub hidden: usize,
    pub feature_dim: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for StageOneConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 0.0005,
            // 0.2 at batch 512, scaled linearly to batch 64
            base_lr: 0.025,
            decay_bias: false,
            hidden: 64,
            feature_dim: 32,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl StageOneConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_bias: self.decay_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 2 {
            return Err(Error::Config(format!("epochs = {} (need >= 2)", self.epochs)));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.feature_dim == 0 {
            return Err(Error::Config("batch_size, hidden and feature_dim must be >= 1".into()));
        }
        self.sgd().validate()
    }
}

/// One epoch of image-balanced batches: a seeded permutation of `0..n`
/// chunked into `batch_size` pieces, the last one possibly short.
#[derive(Clone, Debug)]
pub struct EpochBatches {
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for EpochBatches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

pub fn image_balanced_batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Result<EpochBatches> {
    if batch_size == 0 || batch_size > n {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be in [1, {n}]"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    Ok(EpochBatches {
        order,
        batch_size,
        pos: 0,
    })
}

/// Receives the full training-set embedding at the end of each epoch.
pub trait SnapshotSink {
    fn record(&mut self, epoch: u32, features: &Matrix, labels: &[usize]) -> Result<()>;
}

/// Collects snapshots in memory; handy for tests and small runs.
#[derive(Debug, Default)]
pub struct VecSink {
    pub snapshots: Vec<(u32, Matrix)>,
}

impl SnapshotSink for VecSink {
    fn record(&mut self, epoch: u32, features: &Matrix, _labels: &[usize]) -> Result<()> {
        self.snapshots.push((epoch, features.clone()));
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StageOneRun {
    /// Parameters after each epoch, `checkpoints[e - 1]` for epoch `e`.
    pub checkpoints: Vec<EmbeddingParams>,
    pub head: LinearClassifier,
    /// Mean training cross-entropy over each epoch's batches.
    pub epoch_losses: Vec<f64>,
}

impl StageOneRun {
    pub fn final_params(&self) -> &EmbeddingParams {
        self.checkpoints.last().expect("at least one epoch")
    }
}

pub fn train_stage1(train: &Dataset, cfg: &StageOneConfig, sink: &mut dyn SnapshotSink) -> Result<StageOneRun> {
    cfg.validate()?;
    let n = train.len();
    let classes = train.num_classes();
    let mut init_rng = SeededRng::with_stream(cfg.seed, 0);
    let mut batch_rng = SeededRng::with_stream(cfg.seed, 1);
    let mut params = EmbeddingParams::init(
        train.input_dim(),
        cfg.hidden,
        cfg.feature_dim,
        cfg.activation,
        &mut init_rng,
    );
    let mut head = LinearClassifier::zeros(classes, cfg.feature_dim);
    let mut opt = SgdState::new(cfg.sgd(), cfg.epochs)?;

    let mut checkpoints = Vec::with_capacity(cfg.epochs as usize);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 1..=cfg.epochs {
        let fraction = (epoch - 1) as f64 / cfg.epochs as f64;
        let mut loss_sum = 0.0f64;
        for batch in image_balanced_batches(n, cfg.batch_size.min(n), &mut batch_rng)? {
            let x = train.inputs.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let loss = backprop_step(&mut params, &mut head, &mut opt, &x, &y, fraction)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            loss_sum += loss * batch.len() as f64;
        }
        let epoch_loss = loss_sum / n as f64;
        if !epoch_loss.is_finite() || !params.is_finite() {
            return Err(Error::Diverged { epoch, loss: epoch_loss });
        }
        params.epoch = epoch;
        let snapshot = embed(&params, &train.inputs)?;
        if !snapshot.is_finite() {
            return Err(Error::Diverged { epoch, loss: epoch_loss });
        }
        sink.record(epoch, &snapshot, &train.labels)?;
        epoch_losses.push(epoch_loss);
        checkpoints.push(params.clone());
    }
    Ok(StageOneRun {
        checkpoints,
        head,
        epoch_losses,
    })
}

fn backprop_step(
    params: &mut EmbeddingParams,
    head: &mut LinearClassifier,
    opt: &mut SgdState,
    x: &Matrix,
    y: &[usize],
    fraction: f64,
) -> Result<f64> {
    let fwd = params.forward(x)?;
    let ce = ce_loss_and_grad(&head.w, &head.b, &fwd.z, y)?;
    if !ce.loss.is_finite() {
        return Ok(ce.loss);
    }
    // dL/dlogits is folded into ce.grad_*; recover dL/dz = dlogits · W_head.
    let dlogits = logit_grads(head, &fwd.z, y)?;
    let dz = matmul_nn(&dlogits, &head.w)?;
    let grad_w2 = matmul_tn(&dz, &fwd.hidden)?;
    let grad_b2 = column_sums(&dz);
    let mut dpre = matmul_nn(&dz, &params.w2)?;
    for ((g, &p), &h) in dpre
        .data_mut()
        .iter_mut()
        .zip(fwd.pre.data())
        .zip(fwd.hidden.data())
    {
        *g *= params.activation.derivative(p, h);
    }
    let grad_w1 = matmul_tn(&dpre, x)?;
    let grad_b1 = column_sums(&dpre);

    opt.step(
        &mut [
            ParamGroup { values: params.w1.data_mut(), grads: grad_w1.data(), is_bias: false },
            ParamGroup { values: &mut params.b1, grads: &grad_b1, is_bias: true },
            ParamGroup { values: params.w2.data_mut(), grads: grad_w2.data(), is_bias: false },
            ParamGroup { values: &mut params.b2, grads: &grad_b2, is_bias: true },
            ParamGroup { values: head.w.data_mut(), grads: ce.grad_w.data(), is_bias: false },
            ParamGroup { values: &mut head.b, grads: &ce.grad_b, is_bias: true },
        ],
        fraction,
    )?;
    Ok(ce.loss)
}

/// `(softmax(Wz + b) − onehot(y)) / B`, one row per sample.
fn logit_grads(head: &LinearClassifier, z: &Matrix, y: &[usize]) -> Result<Matrix> {
    let params = head.to_params64();
    let mut out = Matrix::zeros(z.rows(), head.classes());
    let mut logits = vec![0.0f64; head.classes()];
    let scale = 1.0 / y.len() as f64;
    for (i, (row, &label)) in z.iter_rows().zip(y).enumerate() {
        params.logits_into(row, &mut logits);
        crate::numkit::softmax_in_place(&mut logits);
        logits[label] -= 1.0;
        for (o, &g) in out.row_mut(i).iter_mut().zip(&logits) {
            *o = (g * scale) as f32;
        }
    }
    Ok(out)
}

fn column_sums(m: &Matrix) -> Vec<f32> {
    let mut out = vec![0.0f32; m.cols()];
    for row in m.iter_rows() {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
