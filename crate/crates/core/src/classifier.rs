//! Stage-two classifier retraining on stored features.
//!
//! A [`SamplingStrategy`] decides which feature set each stage-two epoch
//! trains on and how it is sampled. Four strategies are registered by name
//! in [`strategy_registry`]:
//!
//! * `random`: uniform shuffles of the final snapshot.
//! * `class_balanced`: pick a class uniformly, then a feature within it,
//!   over the final snapshot (classifier re-training baseline).
//! * `weak_breadcrumb`: the trail sets assembled at the final epoch, reused
//!   for every stage-two epoch.
//! * `strong_breadcrumb`: stage-two epoch `e` trains on the trail sets of
//!   stage-one epoch `e`; epochs without enough history fall back to
//!   class-balanced sampling of that epoch's snapshot.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::{ce_loss_and_grad, LinearParams64, Matrix, ParamGroup, SeededRng, SgdConfig, SgdState};
use crate::registry::Registry;
use crate::trailstore::{Alignment, EpochTrainingSet, Provenance, TrailSet, TrailStore};

/// `ν(Wz + b)` with `W: classes × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub w: Matrix,
    pub b: Vec<f32>,
}

impl LinearClassifier {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            w: Matrix::zeros(classes, dim),
            b: vec![0.0; classes],
        }
    }

    pub fn new(w: Matrix, b: Vec<f32>) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(Error::Shape(format!("{} biases for {} classes", b.len(), w.rows())));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite bias".into()));
        }
        Ok(Self { w, b })
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.b.iter().all(|v| v.is_finite())
    }

    pub fn to_params64(&self) -> LinearParams64 {
        LinearParams64 {
            classes: self.classes(),
            dim: self.dim(),
            w: self.w.data().iter().map(|&v| v as f64).collect(),
            b: self.b.iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn from_params64(p: &LinearParams64) -> Result<Self> {
        Self::new(
            Matrix::new(p.classes, p.dim, p.w.iter().map(|&v| v as f32).collect())?,
            p.b.iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn predict(&self, z: &Matrix) -> Result<Vec<usize>> {
        predict(self, z)
    }
}

/// Arg-max of the logits; ties go to the lowest class index.
pub fn predict(clf: &LinearClassifier, z: &Matrix) -> Result<Vec<usize>> {
    if z.cols() != clf.dim() {
        return Err(Error::Shape(format!(
            "features have {} columns, classifier expects {}",
            z.cols(),
            clf.dim()
        )));
    }
    let params = clf.to_params64();
    let mut logits = vec![0.0; clf.classes()];
    Ok(z.iter_rows()
        .map(|row| {
            params.logits_into(row, &mut logits);
            let mut best = 0;
            for (c, &v) in logits.iter().enumerate().skip(1) {
                if v > logits[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

/// `⌈(1/C) Σ n_j⌉`.
pub fn default_n_b(class_counts: &[usize]) -> usize {
    let total: usize = class_counts.iter().sum();
    total.div_ceil(class_counts.len().max(1))
}

/// Draws `(class, row)` pairs: a class uniformly, then a row uniformly
/// within it, with replacement across draws.
pub struct ClassBalancedBatches<'r> {
    sizes: Vec<usize>,
    remaining: usize,
    batch_size: usize,
    rng: &'r mut SeededRng,
}

impl Iterator for ClassBalancedBatches<'_> {
    type Item = Vec<(usize, usize)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        let take = self.batch_size.min(self.remaining);
        self.remaining -= take;
        let c = self.sizes.len();
        Some(
            (0..take)
                .map(|_| {
                    let class = self.rng.random_range(0..c);
                    let row = self.rng.random_range(0..self.sizes[class]);
                    (class, row)
                })
                .collect(),
        )
    }
}

pub fn class_balanced_batches<'r>(
    class_sizes: &[usize],
    batch_size: usize,
    draws: usize,
    rng: &'r mut SeededRng,
) -> Result<ClassBalancedBatches<'r>> {
    if class_sizes.is_empty() {
        return Err(Error::InvalidInput("no classes to sample".into()));
    }
    if let Some(j) = class_sizes.iter().position(|&n| n == 0) {
        return Err(Error::InvalidInput(format!("class {j} is empty")));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    Ok(ClassBalancedBatches {
        sizes: class_sizes.to_vec(),
        remaining: draws,
        batch_size,
        rng,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SetKind {
    Snapshot,
    Trails,
}

/// Identifies which stage-one feature set an epoch trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SetTag {
    pub kind: SetKind,
    pub epoch: u32,
}

/// The feature set of one stage-two epoch and how to draw from it.
#[derive(Clone, Debug, PartialEq)]
pub enum EpochPlan {
    /// One uniform permutation of every row. Rows are stored grouped by
    /// class; `provenance` is present when they come from trail sets.
    Shuffled {
        features: Matrix,
        labels: Vec<usize>,
        provenance: Option<Vec<Provenance>>,
        tag: SetTag,
    },
    /// `draws` class-balanced draws with replacement.
    ClassBalanced {
        by_class: Vec<Matrix>,
        draws: usize,
        tag: SetTag,
    },
}

impl EpochPlan {
    pub fn tag(&self) -> SetTag {
        match self {
            EpochPlan::Shuffled { tag, .. } | EpochPlan::ClassBalanced { tag, .. } => *tag,
        }
    }

    /// Distinct features of `class` in the set.
    pub fn class_features(&self, class: usize) -> Matrix {
        match self {
            EpochPlan::Shuffled { features, labels, .. } => {
                let idx: Vec<usize> = labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &y)| y == class)
                    .map(|(i, _)| i)
                    .collect();
                features.select_rows(&idx)
            }
            EpochPlan::ClassBalanced { by_class, .. } => by_class[class].clone(),
        }
    }

    /// Trail sets carried by this plan, rebuilt from its rows.
    pub fn trail_sets(&self) -> Option<Vec<TrailSet>> {
        let EpochPlan::Shuffled { features, labels, provenance: Some(prov), tag } = self else {
            return None;
        };
        let classes = labels.iter().max().map_or(0, |&m| m + 1);
        Some(
            (0..classes)
                .map(|j| {
                    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == j).collect();
                    TrailSet {
                        class: j,
                        epoch: tag.epoch,
                        features: features.select_rows(&idx),
                        provenance: idx.iter().map(|&i| prov[i]).collect(),
                    }
                })
                .collect(),
        )
    }

    fn shuffled_from_classes(parts: &[&Matrix], tag: SetTag) -> Result<Self> {
        let labels = parts
            .iter()
            .enumerate()
            .flat_map(|(j, m)| std::iter::repeat_n(j, m.rows()))
            .collect();
        Ok(EpochPlan::Shuffled {
            features: Matrix::vstack(parts)?,
            labels,
            provenance: None,
            tag,
        })
    }

    fn from_training_set(set: &EpochTrainingSet, draws: usize) -> Result<Self> {
        match set {
            EpochTrainingSet::Trails { epoch, trails } => {
                let parts: Vec<&Matrix> = trails.iter().map(|t| &t.features).collect();
                let mut plan = Self::shuffled_from_classes(&parts, SetTag { kind: SetKind::Trails, epoch: *epoch })?;
                if let EpochPlan::Shuffled { provenance, .. } = &mut plan {
                    *provenance = Some(trails.iter().flat_map(|t| t.provenance.iter().copied()).collect());
                }
                Ok(plan)
            }
            EpochTrainingSet::Fallback { epoch, by_class } => Ok(EpochPlan::ClassBalanced {
                by_class: by_class.clone(),
                draws,
                tag: SetTag { kind: SetKind::Snapshot, epoch: *epoch },
            }),
        }
    }
}

/// What a strategy can see when planning stage-two epochs.
pub struct StageTwoContext<'a> {
    pub store: &'a TrailStore,
    pub alignment: &'a dyn Alignment,
    /// Training sets assembled online during stage one, `collected[e - 1]`
    /// for epoch `e`.
    pub collected: Option<&'a [EpochTrainingSet]>,
}

impl StageTwoContext<'_> {
    pub fn final_epoch(&self) -> Result<u32> {
        self.store
            .latest_epoch()
            .ok_or_else(|| Error::Config("trail store holds no epochs".into()))
    }

    /// Draws per class-balanced epoch: `C × n_B`.
    pub fn balanced_draws(&self) -> usize {
        self.store.num_classes() * self.store.n_b()
    }

    fn snapshot_by_class(&self, epoch: u32) -> Result<Vec<Matrix>> {
        (0..self.store.num_classes())
            .map(|j| self.store.payload(j, epoch).cloned())
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Config(format!("snapshot of epoch {epoch} unavailable: {e}")))
    }
}

pub trait SamplingStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of stage-two epochs given the configured request.
    fn epochs(&self, _ctx: &StageTwoContext<'_>, requested: u32) -> Result<u32> {
        Ok(requested)
    }

    /// Feature set for stage-two `epoch` (1-based).
    fn plan(&mut self, ctx: &StageTwoContext<'_>, epoch: u32, rng: &mut SeededRng) -> Result<Arc<EpochPlan>>;
}

#[derive(Debug, Default)]
pub struct RandomSampling {
    cached: Option<Arc<EpochPlan>>,
}

impl SamplingStrategy for RandomSampling {
    fn name(&self) -> &'static str {
        "random"
    }

    fn plan(&mut self, ctx: &StageTwoContext<'_>, _epoch: u32, _rng: &mut SeededRng) -> Result<Arc<EpochPlan>> {
        if let Some(p) = &self.cached {
            return Ok(p.clone());
        }
        let last = ctx.final_epoch()?;
        let by_class = ctx.snapshot_by_class(last)?;
        let parts: Vec<&Matrix> = by_class.iter().collect();
        let plan = Arc::new(EpochPlan::shuffled_from_classes(
            &parts,
            SetTag { kind: SetKind::Snapshot, epoch: last },
        )?);
        self.cached = Some(plan.clone());
        Ok(plan)
    }
}

#[derive(Debug, Default)]
pub struct ClassBalancedSampling {
    cached: Option<Arc<EpochPlan>>,
}

impl SamplingStrategy for ClassBalancedSampling {
    fn name(&self) -> &'static str {
        "class_balanced"
    }

    fn plan(&mut self, ctx: &StageTwoContext<'_>, _epoch: u32, _rng: &mut SeededRng) -> Result<Arc<EpochPlan>> {
        if let Some(p) = &self.cached {
            return Ok(p.clone());
        }
        let last = ctx.final_epoch()?;
        let plan = Arc::new(EpochPlan::ClassBalanced {
            by_class: ctx.snapshot_by_class(last)?,
            draws: ctx.balanced_draws(),
            tag: SetTag { kind: SetKind::Snapshot, epoch: last },
        });
        self.cached = Some(plan.clone());
        Ok(plan)
    }
}

#[derive(Debug, Default)]
pub struct WeakBreadcrumb {
    cached: Option<Arc<EpochPlan>>,
}

impl SamplingStrategy for WeakBreadcrumb {
    fn name(&self) -> &'static str {
        "weak_breadcrumb"
    }

    fn plan(&mut self, ctx: &StageTwoContext<'_>, _epoch: u32, rng: &mut SeededRng) -> Result<Arc<EpochPlan>> {
        if let Some(p) = &self.cached {
            return Ok(p.clone());
        }
        let last = ctx.final_epoch()?;
        let trails = (0..ctx.store.num_classes())
            .map(|j| ctx.store.assemble(j, last, ctx.alignment, rng))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Config(format!("weak breadcrumb needs final-epoch trails: {e}")))?;
        let set = EpochTrainingSet::Trails { epoch: last, trails };
        let plan = Arc::new(EpochPlan::from_training_set(&set, ctx.balanced_draws())?);
        self.cached = Some(plan.clone());
        Ok(plan)
    }
}

#[derive(Debug, Default)]
pub struct StrongBreadcrumb;

impl SamplingStrategy for StrongBreadcrumb {
    fn name(&self) -> &'static str {
        "strong_breadcrumb"
    }

    fn epochs(&self, ctx: &StageTwoContext<'_>, _requested: u32) -> Result<u32> {
        ctx.final_epoch()
    }

    fn plan(&mut self, ctx: &StageTwoContext<'_>, epoch: u32, rng: &mut SeededRng) -> Result<Arc<EpochPlan>> {
        let draws = ctx.balanced_draws();
        if let Some(sets) = ctx.collected {
            let set = sets
                .iter()
                .find(|s| s.epoch() == epoch)
                .ok_or_else(|| Error::Config(format!("no collected training set for epoch {epoch}")))?;
            return Ok(Arc::new(EpochPlan::from_training_set(set, draws)?));
        }
        let set = ctx
            .store
            .epoch_training_set(epoch, ctx.alignment, rng)
            .map_err(|e| match e {
                Error::NotFound(msg) => Error::Config(format!(
                    "strong breadcrumb needs per-epoch history ({msg}); retain all snapshots or collect trails online"
                )),
                other => other,
            })?;
        Ok(Arc::new(EpochPlan::from_training_set(&set, draws)?))
    }
}

/// Registry of stage-two sampling strategies, in reporting order.
pub fn strategy_registry() -> Registry<dyn SamplingStrategy> {
    let mut reg: Registry<dyn SamplingStrategy> = Registry::new("sampling strategy");
    reg.register("random", || Box::new(RandomSampling::default()))
        .register("class_balanced", || Box::new(ClassBalancedSampling::default()))
        .register("weak_breadcrumb", || Box::new(WeakBreadcrumb::default()))
        .register("strong_breadcrumb", || Box::new(StrongBreadcrumb));
    reg
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageTwoConfig {
    /// `None` trains for as many epochs as stage one.
    pub epochs: Option<u32>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub decay_bias: bool,
    pub seed: u64,
}

impl Default for StageTwoConfig {
    fn default() -> Self {
        Self {
            epochs: None,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 0.0005,
            // same batch-scaled rate as stage one
            base_lr: 0.025,
            decay_bias: false,
            seed: 0,
        }
    }
}

impl StageTwoConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            base_lr: self.base_lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            decay_bias: self.decay_bias,
        }
    }
}

/// Passed to the observer after every stage-two epoch.
pub struct StageTwoEpoch<'a> {
    pub epoch: u32,
    pub plan: &'a EpochPlan,
    pub classifier: &'a LinearClassifier,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct StageTwoRun {
    pub strategy: &'static str,
    pub classifier: LinearClassifier,
    pub epoch_losses: Vec<f64>,
    pub set_tags: Vec<SetTag>,
}

impl StageTwoRun {
    pub fn distinct_sets(&self) -> usize {
        self.set_tags.iter().collect::<BTreeSet<_>>().len()
    }
}

pub fn train_stage2(
    ctx: &StageTwoContext<'_>,
    strategy: &mut dyn SamplingStrategy,
    cfg: &StageTwoConfig,
    observer: &mut dyn FnMut(&StageTwoEpoch<'_>) -> Result<()>,
) -> Result<StageTwoRun> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("stage-two batch size must be >= 1".into()));
    }
    let requested = match cfg.epochs {
        Some(e) => e,
        None => ctx.final_epoch()?,
    };
    let epochs = strategy.epochs(ctx, requested)?;
    if epochs == 0 {
        return Err(Error::Config("stage two needs at least one epoch".into()));
    }
    let mut opt = SgdState::new(cfg.sgd(), epochs)?;
    let mut plan_rng = SeededRng::with_stream(cfg.seed, 2);
    let mut batch_rng = SeededRng::with_stream(cfg.seed, 3);
    let mut clf = LinearClassifier::zeros(ctx.store.num_classes(), ctx.store.feature_dim());
    let mut epoch_losses = Vec::with_capacity(epochs as usize);
    let mut set_tags = Vec::with_capacity(epochs as usize);

    for epoch in 1..=epochs {
        let plan = strategy.plan(ctx, epoch, &mut plan_rng)?;
        let fraction = (epoch - 1) as f64 / epochs as f64;
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut step = |z: Matrix, y: Vec<usize>, clf: &mut LinearClassifier| -> Result<()> {
            let ce = ce_loss_and_grad(&clf.w, &clf.b, &z, &y)?;
            if !ce.loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: ce.loss });
            }
            loss_sum += ce.loss * y.len() as f64;
            seen += y.len();
            opt.step(
                &mut [
                    ParamGroup { values: clf.w.data_mut(), grads: ce.grad_w.data(), is_bias: false },
                    ParamGroup { values: &mut clf.b, grads: &ce.grad_b, is_bias: true },
                ],
                fraction,
            )
        };
        match plan.as_ref() {
            EpochPlan::Shuffled { features, labels, .. } => {
                let mut order: Vec<usize> = (0..labels.len()).collect();
                order.shuffle(&mut batch_rng);
                for chunk in order.chunks(cfg.batch_size) {
                    let y = chunk.iter().map(|&i| labels[i]).collect();
                    step(features.select_rows(chunk), y, &mut clf)?;
                }
            }
            EpochPlan::ClassBalanced { by_class, draws, .. } => {
                let sizes: Vec<usize> = by_class.iter().map(Matrix::rows).collect();
                let batches: Vec<_> =
                    class_balanced_batches(&sizes, cfg.batch_size, *draws, &mut batch_rng)?.collect();
                for batch in batches {
                    let mut data = Vec::with_capacity(batch.len() * clf.dim());
                    let mut y = Vec::with_capacity(batch.len());
                    for (class, row) in batch {
                        data.extend_from_slice(by_class[class].row(row));
                        y.push(class);
                    }
                    step(Matrix::new(y.len(), clf.dim(), data)?, y, &mut clf)?;
                }
            }
        }
        let loss = loss_sum / seen.max(1) as f64;
        if !clf.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        observer(&StageTwoEpoch {
            epoch,
            plan: &plan,
            classifier: &clf,
            loss,
        })?;
        epoch_losses.push(loss);
        set_tags.push(plan.tag());
    }
    Ok(StageTwoRun {
        strategy: strategy.name(),
        classifier: clf,
        epoch_losses,
        set_tags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trailstore::{MeanAlignment, Retention, StorePolicy, TrailCollector};

    #[test]
    fn n_b_is_ceiling_of_mean() {
        assert_eq!(default_n_b(&[5, 5, 5]), 5);
        assert_eq!(default_n_b(&[10, 1]), 6);
    }

    #[test]
    fn predict_picks_dominant_row_and_breaks_ties_low() {
        let mut clf = LinearClassifier::zeros(3, 2);
        clf.w.row_mut(2).copy_from_slice(&[5.0, 5.0]);
        let z = Matrix::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(clf.predict(&z).unwrap(), vec![2, 0]);
        let zero = LinearClassifier::zeros(4, 2);
        assert_eq!(zero.predict(&z).unwrap(), vec![0, 0]);
        assert!(matches!(zero.predict(&Matrix::zeros(1, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn predict_invariant_to_uniform_bias_shift() {
        let mut rng = SeededRng::new(4);
        let w = Matrix::new(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let b: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let z = Matrix::new(20, 3, (0..60).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let a = LinearClassifier::new(w.clone(), b.clone()).unwrap().predict(&z).unwrap();
        let shifted = LinearClassifier::new(w, b.iter().map(|v| v + 2.5).collect()).unwrap();
        assert_eq!(a, shifted.predict(&z).unwrap());
    }

    #[test]
    fn class_balanced_draws_are_uniform_over_classes() {
        let mut rng = SeededRng::new(17);
        let draws = 100_000;
        let hits = class_balanced_batches(&[100, 1], 512, draws, &mut rng)
            .unwrap()
            .flatten()
            .filter(|&(c, _)| c == 1)
            .count();
        let se = (0.25 / draws as f64).sqrt();
        assert!((hits as f64 / draws as f64 - 0.5).abs() <= 3.0 * se);
    }

    #[test]
    fn single_sample_class_repeats_its_feature() {
        let mut rng = SeededRng::new(1);
        let rows: BTreeSet<usize> = class_balanced_batches(&[7, 1], 16, 200, &mut rng)
            .unwrap()
            .flatten()
            .filter(|&(c, _)| c == 1)
            .map(|(_, r)| r)
            .collect();
        assert_eq!(rows.into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn single_class_sampling_is_uniform_within_class() {
        let mut rng = SeededRng::new(2);
        let mut hits = [0usize; 4];
        for (c, r) in class_balanced_batches(&[4], 8, 40_000, &mut rng).unwrap().flatten() {
            assert_eq!(c, 0);
            hits[r] += 1;
        }
        let se = (0.25 * 0.75 / 40_000f64).sqrt();
        assert!(hits.iter().all(|&h| (h as f64 / 40_000.0 - 0.25).abs() <= 3.0 * se));
    }

    #[test]
    fn empty_class_rejected() {
        let mut rng = SeededRng::new(0);
        assert!(class_balanced_batches(&[3, 0], 4, 10, &mut rng).is_err());
    }

    fn toy_store(epochs: u32, counts: &[usize], n_b: usize, retention: Retention) -> TrailStore {
        let policy = StorePolicy::new(n_b, counts, retention).unwrap();
        let mut store = TrailStore::new(counts.to_vec(), 2, policy).unwrap();
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(j, &n)| std::iter::repeat_n(j, n)).collect();
        let mut rng = SeededRng::new(3);
        for e in 1..=epochs {
            let data = labels
                .iter()
                .flat_map(|&y| [y as f32 * 2.0 + e as f32 * 0.1, -(y as f32)])
                .map(|v| v + rng.random_range(-0.5f32..0.5))
                .collect();
            store.record(e, &Matrix::new(labels.len(), 2, data).unwrap(), &labels).unwrap();
        }
        store
    }

    fn run(store: &TrailStore, name: &str, epochs: Option<u32>) -> StageTwoRun {
        let ctx = StageTwoContext { store, alignment: &MeanAlignment, collected: None };
        let mut strategy = strategy_registry().create(name).unwrap();
        let cfg = StageTwoConfig { epochs, batch_size: 4, base_lr: 0.05, seed: 9, ..Default::default() };
        train_stage2(&ctx, strategy.as_mut(), &cfg, &mut |_| Ok(())).unwrap()
    }

    #[test]
    fn strong_with_one_epoch_is_class_balanced() {
        let store = toy_store(1, &[12, 6, 2], 7, Retention::All);
        let strong = run(&store, "strong_breadcrumb", None);
        let cb = run(&store, "class_balanced", None);
        assert_eq!(strong.classifier, cb.classifier);
        assert_eq!(strong.set_tags, vec![SetTag { kind: SetKind::Snapshot, epoch: 1 }]);
    }

    #[test]
    fn strong_consumes_one_set_per_epoch_weak_one_in_total() {
        let store = toy_store(6, &[12, 6, 2], 7, Retention::All);
        let strong = run(&store, "strong_breadcrumb", Some(2));
        assert_eq!(strong.set_tags.len(), 6, "strong ignores the epoch request");
        assert_eq!(strong.distinct_sets(), 6);
        // K = 4 for the two-sample class → epochs 1..3 fall back
        assert_eq!(strong.set_tags[2].kind, SetKind::Snapshot);
        assert_eq!(strong.set_tags[3].kind, SetKind::Trails);
        let weak = run(&store, "weak_breadcrumb", None);
        assert_eq!(weak.set_tags.len(), 6);
        assert_eq!(weak.distinct_sets(), 1);
    }

    #[test]
    fn weak_without_back_tracking_is_deduplicated_snapshot() {
        let store = toy_store(3, &[12, 9, 8], 8, Retention::All);
        let ctx = StageTwoContext { store: &store, alignment: &MeanAlignment, collected: None };
        let plan = WeakBreadcrumb::default().plan(&ctx, 1, &mut SeededRng::new(0)).unwrap();
        for j in 0..3 {
            let feats = plan.class_features(j);
            assert_eq!(feats.rows(), 8);
            let snap = store.payload(j, 3).unwrap();
            let distinct: BTreeSet<Vec<u32>> =
                feats.iter_rows().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
            assert_eq!(distinct.len(), 8);
            assert!(feats.iter_rows().all(|r| snap.iter_rows().any(|s| s == r)));
        }
    }

    #[test]
    fn trail_plan_round_trips_to_trail_sets() {
        let store = toy_store(5, &[12, 6, 2], 7, Retention::All);
        let set = store.epoch_training_set(5, &MeanAlignment, &mut SeededRng::new(4)).unwrap();
        let plan = EpochPlan::from_training_set(&set, 21).unwrap();
        let EpochTrainingSet::Trails { trails, .. } = set else { panic!("history suffices") };
        assert_eq!(plan.trail_sets().unwrap(), trails);
        let fallback = store.epoch_training_set(2, &MeanAlignment, &mut SeededRng::new(4)).unwrap();
        assert!(EpochPlan::from_training_set(&fallback, 21).unwrap().trail_sets().is_none());
    }

    #[test]
    fn stage_two_is_reproducible() {
        let store = toy_store(5, &[12, 6, 2], 7, Retention::All);
        for name in strategy_registry().names() {
            assert_eq!(run(&store, name, None).classifier, run(&store, name, None).classifier);
        }
    }

    #[test]
    fn strong_fails_on_evicted_history_without_collection() {
        let store = toy_store(6, &[12, 6, 2], 7, Retention::Policy);
        let ctx = StageTwoContext { store: &store, alignment: &MeanAlignment, collected: None };
        let mut s = StrongBreadcrumb;
        let cfg = StageTwoConfig { batch_size: 4, ..Default::default() };
        let err = train_stage2(&ctx, &mut s, &cfg, &mut |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn strong_uses_online_collected_sets() {
        let counts = [12usize, 6, 2];
        let policy = StorePolicy::new(7, &counts, Retention::Policy).unwrap();
        let store = TrailStore::new(counts.to_vec(), 2, policy).unwrap();
        let mut collector = TrailCollector::new(store, Box::new(MeanAlignment), SeededRng::new(0));
        let full = toy_store(6, &counts, 7, Retention::All);
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(j, &n)| std::iter::repeat_n(j, n)).collect();
        for e in 1..=6 {
            let parts: Vec<&Matrix> = (0..3).map(|j| full.payload(j, e).unwrap()).collect();
            let z = Matrix::vstack(&parts).unwrap();
            crate::embedding::SnapshotSink::record(&mut collector, e, &z, &labels).unwrap();
        }
        let ctx = StageTwoContext {
            store: &collector.store,
            alignment: &MeanAlignment,
            collected: Some(&collector.epoch_sets),
        };
        let cfg = StageTwoConfig { batch_size: 4, ..Default::default() };
        let out = train_stage2(&ctx, &mut StrongBreadcrumb, &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(out.distinct_sets(), 6);
    }

    #[test]
    fn observer_sees_every_epoch() {
        let store = toy_store(4, &[12, 6, 2], 7, Retention::All);
        let ctx = StageTwoContext { store: &store, alignment: &MeanAlignment, collected: None };
        let mut seen = Vec::new();
        let cfg = StageTwoConfig { batch_size: 4, ..Default::default() };
        train_stage2(&ctx, &mut StrongBreadcrumb, &cfg, &mut |ep| {
            seen.push((ep.epoch, ep.plan.tag().epoch));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(1, 1), (2, 2), (3, 3), (4, 4)]);
    }
}
