//! Per-epoch class snapshots, class alignment across epochs, and assembly
//! of fixed-size trail sets by back-tracking through earlier epochs.
//!
//! The store keeps, for every recorded epoch, each class's feature matrix
//! (its snapshot), the class means and per-dimension standard deviations,
//! and the all-sample mean. Means and deviations are cached for every epoch;
//! feature payloads are evicted according to the [`StorePolicy`]: a class
//! with `n_j` samples keeps only the `K_j = ⌈n_B / n_j⌉` most recent epochs,
//! which is exactly the history [`TrailStore::assemble`] needs.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::seq::index;

use crate::embedding::SnapshotSink;
use crate::error::{Error, Result};
use crate::numkit::{Matrix, SeededRng};
use crate::registry::Registry;

/// Floor applied to standard deviations before they are used as divisors.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Retention {
    /// Evict payloads older than each class's back-tracking depth.
    Policy,
    /// Keep every payload, e.g. for verification across arbitrary epochs.
    All,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StorePolicy {
    pub n_b: usize,
    /// `K_j = ⌈n_B / n_j⌉` per class.
    pub depths: Vec<usize>,
    pub retention: Retention,
}

impl StorePolicy {
    pub fn new(n_b: usize, class_counts: &[usize], retention: Retention) -> Result<Self> {
        if n_b == 0 {
            return Err(Error::Config("n_B must be >= 1".into()));
        }
        if let Some(j) = class_counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidInput(format!("class {j} is empty")));
        }
        Ok(Self {
            n_b,
            depths: class_counts.iter().map(|&n| backtrack_depth(n_b, n)).collect(),
            retention,
        })
    }

    pub fn depth(&self, class: usize) -> usize {
        self.depths[class]
    }

    /// Classes that need more than their latest snapshot (`n_j < n_B`).
    pub fn retained_classes(&self) -> Vec<usize> {
        self.depths
            .iter()
            .enumerate()
            .filter(|(_, &k)| k > 1)
            .map(|(j, _)| j)
            .collect()
    }
}

/// `⌈n_B / n_j⌉`.
pub fn backtrack_depth(n_b: usize, n_j: usize) -> usize {
    n_b.div_ceil(n_j)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSnapshot {
    pub class: usize,
    pub epoch: u32,
    pub features: Matrix,
}

impl ClassSnapshot {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write_feature_header(&mut out, "class,epoch,index", self.features.cols())?;
        for (i, row) in self.features.iter_rows().enumerate() {
            write!(out, "{},{},{}", self.class, self.epoch, i)?;
            write_row(&mut out, row)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignedSnapshot {
    pub class: usize,
    pub source_epoch: u32,
    pub target_epoch: u32,
    pub features: Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Provenance {
    pub epoch: u32,
    /// Row index within the class snapshot of that epoch.
    pub index: u32,
}

/// Exactly `n_B` features for one class, expressed in the frame of
/// `epoch`, newest source epoch first.
#[derive(Clone, Debug, PartialEq)]
pub struct TrailSet {
    pub class: usize,
    pub epoch: u32,
    pub features: Matrix,
    pub provenance: Vec<Provenance>,
}

impl TrailSet {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    /// Distinct source epochs, newest first.
    pub fn source_epochs(&self) -> Vec<u32> {
        let mut out: Vec<u32> = Vec::new();
        for p in &self.provenance {
            if out.last() != Some(&p.epoch) {
                out.push(p.epoch);
            }
        }
        out
    }

    /// Row count contributed by each source epoch.
    pub fn rows_per_epoch(&self) -> BTreeMap<u32, usize> {
        let mut out = BTreeMap::new();
        for p in &self.provenance {
            *out.entry(p.epoch).or_insert(0) += 1;
        }
        out
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write_feature_header(&mut out, "class,source_epoch,source_index", self.features.cols())?;
        for (row, p) in self.features.iter_rows().zip(&self.provenance) {
            write!(out, "{},{},{}", self.class, p.epoch, p.index)?;
            write_row(&mut out, row)?;
        }
        Ok(())
    }
}

fn write_feature_header<W: Write>(out: &mut W, prefix: &str, dim: usize) -> Result<()> {
    write!(out, "{prefix}")?;
    for k in 0..dim {
        write!(out, ",z{k}")?;
    }
    writeln!(out)?;
    Ok(())
}

fn write_row<W: Write>(out: &mut W, row: &[f32]) -> Result<()> {
    for v in row {
        write!(out, ",{v}")?;
    }
    writeln!(out)?;
    Ok(())
}

/// A way of moving a class snapshot captured at one epoch into the feature
/// frame of another.
pub trait Alignment: Send + Sync {
    fn name(&self) -> &'static str;

    /// Maps `rows` (class `class`, captured at `source`) into epoch `target`.
    fn transfer(&self, store: &TrailStore, class: usize, rows: &Matrix, source: u32, target: u32) -> Result<Matrix>;
}

impl fmt::Debug for dyn Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Alignment({})", self.name())
    }
}

/// `z − z̄_y^{source} + z̄_y^{target}`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanAlignment;

/// Mean alignment plus a per-dimension rescale of the deviations by
/// `σ_target / σ_source`.
#[derive(Debug, Clone, Copy, Default)]
pub struct MeanVarianceAlignment;

/// Translates by the all-sample mean instead of the class mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct ClassAgnosticAlignment;

/// Back-tracking without any alignment.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoAlignment;

impl Alignment for MeanAlignment {
    fn name(&self) -> &'static str {
        "mean"
    }

    fn transfer(&self, store: &TrailStore, class: usize, rows: &Matrix, source: u32, target: u32) -> Result<Matrix> {
        let from = store.class_mean(class, source)?;
        let to = store.class_mean(class, target)?;
        translate(rows, from, to)
    }
}

impl Alignment for MeanVarianceAlignment {
    fn name(&self) -> &'static str {
        "mean_and_variance"
    }

    fn transfer(&self, store: &TrailStore, class: usize, rows: &Matrix, source: u32, target: u32) -> Result<Matrix> {
        let from = store.class_mean(class, source)?;
        let to = store.class_mean(class, target)?;
        let s_from = store.class_std(class, source)?;
        let s_to = store.class_std(class, target)?;
        let scale: Vec<f64> = s_to
            .iter()
            .zip(s_from)
            .map(|(t, s)| t.max(STD_FLOOR) / s.max(STD_FLOOR))
            .collect();
        let mut out = rows.clone();
        for r in 0..out.rows() {
            for (k, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = (to[k] + (*v as f64 - from[k]) * scale[k]) as f32;
            }
        }
        Ok(out)
    }
}

impl Alignment for ClassAgnosticAlignment {
    fn name(&self) -> &'static str {
        "class_agnostic"
    }

    fn transfer(&self, store: &TrailStore, _class: usize, rows: &Matrix, source: u32, target: u32) -> Result<Matrix> {
        translate(rows, store.global_mean(source)?, store.global_mean(target)?)
    }
}

impl Alignment for NoAlignment {
    fn name(&self) -> &'static str {
        "none"
    }

    fn transfer(&self, _store: &TrailStore, _class: usize, rows: &Matrix, _source: u32, _target: u32) -> Result<Matrix> {
        Ok(rows.clone())
    }
}

fn translate(rows: &Matrix, from: &[f64], to: &[f64]) -> Result<Matrix> {
    if from.len() != rows.cols() || to.len() != rows.cols() {
        return Err(Error::Shape("mean dimension differs from feature dimension".into()));
    }
    let mut out = rows.clone();
    for r in 0..out.rows() {
        for ((v, f), t) in out.row_mut(r).iter_mut().zip(from).zip(to) {
            *v = (*v as f64 - f + t) as f32;
        }
    }
    Ok(out)
}

/// Registry of alignment modes: `mean`, `mean_and_variance`,
/// `class_agnostic`, `none`.
pub fn alignment_registry() -> Registry<dyn Alignment> {
    let mut reg: Registry<dyn Alignment> = Registry::new("alignment");
    reg.register("mean", || Box::new(MeanAlignment))
        .register("mean_and_variance", || Box::new(MeanVarianceAlignment))
        .register("class_agnostic", || Box::new(ClassAgnosticAlignment))
        .register("none", || Box::new(NoAlignment));
    reg
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct EpochStats {
    /// Per class, `d` values each.
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
    pub global_mean: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TrailStore {
    class_counts: Vec<usize>,
    feature_dim: usize,
    policy: StorePolicy,
    epochs: Vec<u32>,
    stats: BTreeMap<u32, EpochStats>,
    /// `payloads[class][epoch]`
    payloads: Vec<BTreeMap<u32, Matrix>>,
}

impl TrailStore {
    pub fn new(class_counts: Vec<usize>, feature_dim: usize, policy: StorePolicy) -> Result<Self> {
        if policy.depths.len() != class_counts.len() {
            return Err(Error::Config(format!(
                "policy covers {} classes, store has {}",
                policy.depths.len(),
                class_counts.len()
            )));
        }
        if feature_dim == 0 {
            return Err(Error::Config("feature dimension must be >= 1".into()));
        }
        let classes = class_counts.len();
        Ok(Self {
            class_counts,
            feature_dim,
            policy,
            epochs: Vec::new(),
            stats: BTreeMap::new(),
            payloads: vec![BTreeMap::new(); classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn policy(&self) -> &StorePolicy {
        &self.policy
    }

    pub fn n_b(&self) -> usize {
        self.policy.n_b
    }

    pub fn epochs(&self) -> &[u32] {
        &self.epochs
    }

    pub fn latest_epoch(&self) -> Option<u32> {
        self.epochs.last().copied()
    }

    /// Splits a full-training-set snapshot by class, caches class statistics
    /// and evicts payloads that fell out of their class's retention window.
    pub fn record(&mut self, epoch: u32, features: &Matrix, labels: &[usize]) -> Result<()> {
        if let Some(last) = self.latest_epoch() {
            if epoch <= last {
                return Err(Error::State(format!(
                    "epoch {epoch} recorded after epoch {last}"
                )));
            }
        }
        if features.cols() != self.feature_dim {
            return Err(Error::Shape(format!(
                "snapshot has {} columns, store expects {}",
                features.cols(),
                self.feature_dim
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} snapshot rows for {} labels",
                features.rows(),
                labels.len()
            )));
        }
        let classes = self.num_classes();
        let mut indices = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            indices
                .get_mut(y)
                .ok_or_else(|| Error::InvalidInput(format!("label {y} outside [0, {classes})")))?
                .push(i);
        }
        for (j, idx) in indices.iter().enumerate() {
            if idx.len() != self.class_counts[j] {
                return Err(Error::InvalidInput(format!(
                    "class {j} has {} rows in the snapshot, {} in training",
                    idx.len(),
                    self.class_counts[j]
                )));
            }
        }
        let mut means = Vec::with_capacity(classes);
        let mut stds = Vec::with_capacity(classes);
        for (j, idx) in indices.iter().enumerate() {
            let snap = features.select_rows(idx);
            means.push(snap.column_means());
            stds.push(snap.column_stds());
            self.payloads[j].insert(epoch, snap);
        }
        self.stats.insert(
            epoch,
            EpochStats {
                means,
                stds,
                global_mean: features.column_means(),
            },
        );
        self.epochs.push(epoch);
        self.evict(epoch);
        Ok(())
    }

    fn evict(&mut self, latest: u32) {
        if self.policy.retention == Retention::All {
            return;
        }
        for (j, payloads) in self.payloads.iter_mut().enumerate() {
            let depth = self.policy.depths[j] as u32;
            // keep epochs in (latest - depth, latest]
            payloads.retain(|&e, _| e + depth > latest);
        }
    }

    pub fn has_payload(&self, class: usize, epoch: u32) -> bool {
        self.payloads.get(class).is_some_and(|p| p.contains_key(&epoch))
    }

    /// Epochs whose payload for `class` is still held.
    pub fn retained_epochs(&self, class: usize) -> Vec<u32> {
        self.payloads[class].keys().copied().collect()
    }

    pub fn payload(&self, class: usize, epoch: u32) -> Result<&Matrix> {
        self.check_class(class)?;
        self.payloads[class].get(&epoch).ok_or_else(|| {
            if self.stats.contains_key(&epoch) {
                Error::NotFound(format!("snapshot of class {class} at epoch {epoch} was evicted"))
            } else {
                Error::NotFound(format!("epoch {epoch} was never recorded"))
            }
        })
    }

    pub fn class_snapshot(&self, class: usize, epoch: u32) -> Result<ClassSnapshot> {
        Ok(ClassSnapshot {
            class,
            epoch,
            features: self.payload(class, epoch)?.clone(),
        })
    }

    fn epoch_stats(&self, epoch: u32) -> Result<&EpochStats> {
        self.stats
            .get(&epoch)
            .ok_or_else(|| Error::NotFound(format!("epoch {epoch} was never recorded")))
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(Error::NotFound(format!(
                "class {class} (store has {})",
                self.num_classes()
            )));
        }
        Ok(())
    }

    /// Mean of class `class` at `epoch`, available even after eviction.
    pub fn class_mean(&self, class: usize, epoch: u32) -> Result<&[f64]> {
        self.check_class(class)?;
        Ok(&self.epoch_stats(epoch)?.means[class])
    }

    pub fn class_std(&self, class: usize, epoch: u32) -> Result<&[f64]> {
        self.check_class(class)?;
        Ok(&self.epoch_stats(epoch)?.stds[class])
    }

    pub fn global_mean(&self, epoch: u32) -> Result<&[f64]> {
        Ok(&self.epoch_stats(epoch)?.global_mean)
    }

    /// Class-mean alignment of the `source` snapshot into the `target` frame.
    pub fn align(&self, class: usize, source: u32, target: u32) -> Result<AlignedSnapshot> {
        self.align_with(&MeanAlignment, class, source, target)
    }

    pub fn align_with(&self, alignment: &dyn Alignment, class: usize, source: u32, target: u32) -> Result<AlignedSnapshot> {
        let rows = self.payload(class, source)?;
        // the target frame only needs its statistics
        self.epoch_stats(target)?;
        let features = if source == target {
            rows.clone()
        } else {
            alignment.transfer(self, class, rows, source, target)?
        };
        Ok(AlignedSnapshot {
            class,
            source_epoch: source,
            target_epoch: target,
            features,
        })
    }

    /// Assembles `n_B` features for `class` in the frame of `epoch`: the
    /// snapshot of `epoch` verbatim, then whole aligned snapshots of
    /// `epoch − 1, epoch − 2, …`, and finally a uniform sample without
    /// replacement from the earliest needed epoch to land exactly on `n_B`.
    /// A class with `n_j ≥ n_B` is subsampled from `epoch` alone.
    pub fn assemble(&self, class: usize, epoch: u32, alignment: &dyn Alignment, rng: &mut SeededRng) -> Result<TrailSet> {
        self.check_class(class)?;
        self.epoch_stats(epoch)?;
        let n_b = self.policy.n_b;
        let n_j = self.class_counts[class];
        let current = self.payload(class, epoch)?;

        if n_j >= n_b {
            let mut picked: Vec<usize> = if n_j == n_b {
                (0..n_j).collect()
            } else {
                index::sample(rng, n_j, n_b).into_vec()
            };
            picked.sort_unstable();
            return Ok(TrailSet {
                class,
                epoch,
                features: current.select_rows(&picked),
                provenance: picked
                    .iter()
                    .map(|&i| Provenance { epoch, index: i as u32 })
                    .collect(),
            });
        }

        let depth = self.policy.depths[class];
        let first_needed = epoch as i64 - depth as i64 + 1;
        let history_ok = first_needed >= 1
            && (0..depth as u32).all(|k| self.stats.contains_key(&(epoch - k)));
        if !history_ok {
            return Err(Error::InsufficientHistory {
                class,
                epoch,
                needed: depth,
            });
        }

        let mut parts = vec![current.clone()];
        let mut provenance: Vec<Provenance> = (0..n_j)
            .map(|i| Provenance { epoch, index: i as u32 })
            .collect();
        for k in 1..depth as u32 {
            let source = epoch - k;
            let aligned = self.align_with(alignment, class, source, epoch)?.features;
            let is_last = k as usize == depth - 1;
            let rows: Vec<usize> = if is_last {
                let residual = n_b - (depth - 1) * n_j;
                let mut picked = index::sample(rng, n_j, residual).into_vec();
                picked.sort_unstable();
                picked
            } else {
                (0..n_j).collect()
            };
            provenance.extend(rows.iter().map(|&i| Provenance { epoch: source, index: i as u32 }));
            parts.push(aligned.select_rows(&rows));
        }
        let refs: Vec<&Matrix> = parts.iter().collect();
        let features = Matrix::vstack(&refs)?;
        debug_assert_eq!(features.rows(), n_b);
        Ok(TrailSet {
            class,
            epoch,
            features,
            provenance,
        })
    }

    /// Training set for one epoch: trail sets for every class, or, when some
    /// class lacks the history to back-track, the raw class snapshots.
    pub fn epoch_training_set(&self, epoch: u32, alignment: &dyn Alignment, rng: &mut SeededRng) -> Result<EpochTrainingSet> {
        let mut trails = Vec::with_capacity(self.num_classes());
        for class in 0..self.num_classes() {
            match self.assemble(class, epoch, alignment, rng) {
                Ok(t) => trails.push(t),
                Err(Error::InsufficientHistory { .. }) => {
                    let by_class = (0..self.num_classes())
                        .map(|j| self.payload(j, epoch).cloned())
                        .collect::<Result<Vec<_>>>()?;
                    return Ok(EpochTrainingSet::Fallback { epoch, by_class });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(EpochTrainingSet::Trails { epoch, trails })
    }

    /// Number of `f32` feature values currently held.
    pub fn retained_floats(&self) -> usize {
        self.payloads
            .iter()
            .flat_map(|p| p.values())
            .map(|m| m.data().len())
            .sum()
    }

    /// Upper bound on [`retained_floats`](Self::retained_floats) under the
    /// eviction policy: `Σ_j min(K_j, E)·n_j·d`.
    pub fn payload_bound(&self) -> usize {
        let e = self.epochs.len();
        self.class_counts
            .iter()
            .zip(&self.policy.depths)
            .map(|(&n, &k)| k.min(e) * n * self.feature_dim)
            .sum()
    }

    pub(crate) fn stats_for(&self, epoch: u32) -> Option<&EpochStats> {
        self.stats.get(&epoch)
    }

    /// Rebuilds a store from serialized parts.
    pub(crate) fn from_parts(
        class_counts: Vec<usize>,
        feature_dim: usize,
        policy: StorePolicy,
        stats: BTreeMap<u32, EpochStats>,
        snapshots: Vec<ClassSnapshot>,
    ) -> Result<Self> {
        let mut store = Self::new(class_counts, feature_dim, policy)?;
        store.epochs = stats.keys().copied().collect();
        store.stats = stats;
        for s in snapshots {
            store.check_class(s.class)?;
            if s.features.rows() != store.class_counts[s.class] || s.features.cols() != feature_dim {
                return Err(Error::Format(format!(
                    "snapshot of class {} at epoch {} has shape {}x{}",
                    s.class,
                    s.epoch,
                    s.features.rows(),
                    s.features.cols()
                )));
            }
            if !store.stats.contains_key(&s.epoch) {
                return Err(Error::Format(format!("snapshot for unrecorded epoch {}", s.epoch)));
            }
            store.payloads[s.class].insert(s.epoch, s.features);
        }
        Ok(store)
    }

    /// All retained payloads, ordered by epoch then class.
    pub fn snapshots(&self) -> Vec<ClassSnapshot> {
        let mut out = Vec::new();
        for &e in &self.epochs {
            for (j, p) in self.payloads.iter().enumerate() {
                if let Some(m) = p.get(&e) {
                    out.push(ClassSnapshot { class: j, epoch: e, features: m.clone() });
                }
            }
        }
        out
    }
}

impl SnapshotSink for TrailStore {
    fn record(&mut self, epoch: u32, features: &Matrix, labels: &[usize]) -> Result<()> {
        TrailStore::record(self, epoch, features, labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EpochTrainingSet {
    Trails { epoch: u32, trails: Vec<TrailSet> },
    /// Raw class snapshots, sampled class-balanced.
    Fallback { epoch: u32, by_class: Vec<Matrix> },
}

impl EpochTrainingSet {
    pub fn epoch(&self) -> u32 {
        match self {
            EpochTrainingSet::Trails { epoch, .. } | EpochTrainingSet::Fallback { epoch, .. } => *epoch,
        }
    }

    pub fn is_fallback(&self) -> bool {
        matches!(self, EpochTrainingSet::Fallback { .. })
    }

    /// Distinct features of `class` in this set.
    pub fn class_features(&self, class: usize) -> &Matrix {
        match self {
            EpochTrainingSet::Trails { trails, .. } => &trails[class].features,
            EpochTrainingSet::Fallback { by_class, .. } => &by_class[class],
        }
    }
}

/// Sink that records into a store and assembles the epoch's training set
/// as soon as the epoch is recorded, so that a policy-evicting store can
/// still feed per-epoch trail sets to stage two.
pub struct TrailCollector {
    pub store: TrailStore,
    pub epoch_sets: Vec<EpochTrainingSet>,
    alignment: Box<dyn Alignment>,
    rng: SeededRng,
}

impl TrailCollector {
    pub fn new(store: TrailStore, alignment: Box<dyn Alignment>, rng: SeededRng) -> Self {
        Self {
            store,
            epoch_sets: Vec::new(),
            alignment,
            rng,
        }
    }
}

impl SnapshotSink for TrailCollector {
    fn record(&mut self, epoch: u32, features: &Matrix, labels: &[usize]) -> Result<()> {
        self.store.record(epoch, features, labels)?;
        let set = self
            .store
            .epoch_training_set(epoch, self.alignment.as_ref(), &mut self.rng)?;
        self.epoch_sets.push(set);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn store_with(counts: &[usize], d: usize, n_b: usize, retention: Retention) -> TrailStore {
        let policy = StorePolicy::new(n_b, counts, retention).unwrap();
        TrailStore::new(counts.to_vec(), d, policy).unwrap()
    }

    /// Records `epochs` random snapshots whose class means drift with the epoch.
    fn fill(store: &mut TrailStore, epochs: u32, seed: u64) -> Vec<usize> {
        let mut rng = SeededRng::new(seed);
        let labels: Vec<usize> = store
            .class_counts()
            .iter()
            .enumerate()
            .flat_map(|(j, &n)| std::iter::repeat_n(j, n))
            .collect();
        let d = store.feature_dim();
        for e in 1..=epochs {
            let data: Vec<f32> = labels
                .iter()
                .flat_map(|&y| (0..d).map(move |k| (y * 3 + k) as f32 + e as f32 * 0.5))
                .map(|base| base + rng.random_range(-1.0f32..1.0))
                .collect();
            let z = Matrix::new(labels.len(), d, data).unwrap();
            store.record(e, &z, &labels).unwrap();
        }
        labels
    }

    #[test]
    fn record_splits_by_class() {
        let mut s = store_with(&[1, 2], 2, 2, Retention::All);
        let z = Matrix::new(3, 2, vec![1.0, 0.0, 3.0, 0.0, 5.0, 1.0]).unwrap();
        s.record(1, &z, &[1, 0, 1]).unwrap();
        assert_eq!(s.payload(0, 1).unwrap().rows(), 1);
        assert_eq!(s.payload(1, 1).unwrap().data(), &[1.0, 0.0, 5.0, 1.0]);
        assert_eq!(s.class_mean(1, 1).unwrap(), &[3.0, 0.5]);
        assert_eq!(s.class_mean(0, 1).unwrap(), &[3.0, 0.0]);
    }

    #[test]
    fn record_errors() {
        let mut s = store_with(&[1, 2], 2, 2, Retention::All);
        let z = Matrix::new(3, 2, vec![0.0; 6]).unwrap();
        s.record(2, &z, &[0, 1, 1]).unwrap();
        assert!(matches!(s.record(2, &z, &[0, 1, 1]), Err(Error::State(_))));
        assert!(matches!(s.record(1, &z, &[0, 1, 1]), Err(Error::State(_))));
        assert!(matches!(s.record(3, &z, &[0, 1, 2]), Err(Error::InvalidInput(_))));
        assert!(matches!(s.record(3, &z, &[0, 0, 1]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn class_mean_basics() {
        let mut s = store_with(&[2, 1], 2, 2, Retention::All);
        let z = Matrix::new(3, 2, vec![1.0, 0.0, 3.0, 0.0, 7.0, -2.0]).unwrap();
        s.record(1, &z, &[0, 0, 1]).unwrap();
        assert_eq!(s.class_mean(0, 1).unwrap(), &[2.0, 0.0]);
        assert_eq!(s.class_mean(1, 1).unwrap(), &[7.0, -2.0]);
        assert!(matches!(s.class_mean(0, 2), Err(Error::NotFound(_))));
        assert!(matches!(s.class_mean(5, 1), Err(Error::NotFound(_))));
    }

    #[test]
    fn align_translates_to_target_mean() {
        let mut s = store_with(&[2, 2], 2, 2, Retention::All);
        s.record(1, &Matrix::new(4, 2, vec![1.0, 0.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), &[0, 0, 1, 1])
            .unwrap();
        s.record(2, &Matrix::new(4, 2, vec![4.0, 5.0, 6.0, 5.0, 0.0, 0.0, 0.0, 0.0]).unwrap(), &[0, 0, 1, 1])
            .unwrap();
        let a = s.align(0, 1, 2).unwrap();
        assert_eq!(a.features.data(), &[4.0, 5.0, 6.0, 5.0]);
        let same = s.align(0, 1, 1).unwrap();
        assert_eq!(same.features, *s.payload(0, 1).unwrap());
    }

    #[test]
    fn aligned_means_and_variances() {
        let mut s = store_with(&[6, 4, 3], 3, 10, Retention::All);
        fill(&mut s, 5, 7);
        for class in 0..3 {
            for src in 1..=5 {
                for tgt in 1..=5 {
                    let a = s.align(class, src, tgt).unwrap();
                    for (m, t) in a.features.column_means().iter().zip(s.class_mean(class, tgt).unwrap()) {
                        assert!((m - t).abs() < 1e-5);
                    }
                    let before = s.payload(class, src).unwrap().column_stds();
                    for (x, y) in a.features.column_stds().iter().zip(before) {
                        assert!((x * x - y * y).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn variance_alignment_matches_target_std() {
        let mut s = store_with(&[6, 4, 3], 3, 10, Retention::All);
        fill(&mut s, 3, 8);
        let a = s.align_with(&MeanVarianceAlignment, 1, 1, 3).unwrap();
        for (x, y) in a.features.column_stds().iter().zip(s.class_std(1, 3).unwrap()) {
            assert!((x - y).abs() < 1e-5);
        }
        for (x, y) in a.features.column_means().iter().zip(s.class_mean(1, 3).unwrap()) {
            assert!((x - y).abs() < 1e-5);
        }
        let id = s.align_with(&MeanVarianceAlignment, 1, 2, 2).unwrap();
        assert_eq!(id.features, *s.payload(1, 2).unwrap());
    }

    #[test]
    fn class_agnostic_with_one_class_equals_mean_mode() {
        let mut s = store_with(&[5], 2, 5, Retention::All);
        fill(&mut s, 3, 9);
        let a = s.align_with(&ClassAgnosticAlignment, 0, 1, 3).unwrap();
        let b = s.align(0, 1, 3).unwrap();
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn assemble_small_class_back_tracks_four_epochs() {
        // n_j = 3, n_B = 10: K = 4, epochs e, e−1, e−2 give 3 rows, e−3 gives 1
        let mut s = store_with(&[12, 3], 2, 10, Retention::Policy);
        fill(&mut s, 6, 1);
        let t = s.assemble(1, 6, &MeanAlignment, &mut SeededRng::new(0)).unwrap();
        assert_eq!(t.len(), 10);
        assert_eq!(t.source_epochs(), vec![6, 5, 4, 3]);
        let per: Vec<usize> = t.rows_per_epoch().into_values().collect();
        assert_eq!(per, vec![1, 3, 3, 3]);
        // rows from the target epoch are verbatim
        assert_eq!(t.features.select_rows(&[0, 1, 2]), *s.payload(1, 6).unwrap());
    }

    #[test]
    fn assemble_partial_epoch() {
        // n_j = 7, n_B = 10 → {e: 7, e−1: 3}
        let mut s = store_with(&[7, 20], 2, 10, Retention::Policy);
        fill(&mut s, 4, 2);
        let t = s.assemble(0, 4, &MeanAlignment, &mut SeededRng::new(5)).unwrap();
        let per = t.rows_per_epoch();
        assert_eq!(per.get(&4), Some(&7));
        assert_eq!(per.get(&3), Some(&3));
        assert_eq!(t.len(), 10);
        let idx: Vec<u32> = t.provenance[7..].iter().map(|p| p.index).collect();
        assert!(idx.windows(2).all(|w| w[0] < w[1]), "residual sampled without replacement");
    }

    #[test]
    fn assemble_exact_fit_is_snapshot() {
        let mut s = store_with(&[10, 4], 2, 10, Retention::Policy);
        fill(&mut s, 2, 3);
        let t = s.assemble(0, 2, &MeanAlignment, &mut SeededRng::new(0)).unwrap();
        assert_eq!(t.features, *s.payload(0, 2).unwrap());
        assert_eq!(t.source_epochs(), vec![2]);
        // a large class is subsampled without back-tracking
        let mut s = store_with(&[25, 4], 2, 10, Retention::Policy);
        fill(&mut s, 2, 3);
        let t = s.assemble(0, 2, &MeanAlignment, &mut SeededRng::new(0)).unwrap();
        assert_eq!(t.len(), 10);
        assert_eq!(t.source_epochs(), vec![2]);
    }

    #[test]
    fn assemble_reports_insufficient_history() {
        let mut s = store_with(&[3, 12], 2, 10, Retention::All);
        fill(&mut s, 3, 4);
        match s.assemble(0, 3, &MeanAlignment, &mut SeededRng::new(0)) {
            Err(Error::InsufficientHistory { class: 0, epoch: 3, needed: 4 }) => {}
            other => panic!("{other:?}"),
        }
        let set = s.epoch_training_set(3, &MeanAlignment, &mut SeededRng::new(0)).unwrap();
        assert!(set.is_fallback());
        assert_eq!(set.class_features(0), s.payload(0, 3).unwrap());
    }

    #[test]
    fn policy_eviction_bounds_memory() {
        let counts = [20, 9, 5, 2];
        let mut s = store_with(&counts, 3, 10, Retention::Policy);
        assert_eq!(s.policy().depths, vec![1, 2, 2, 5]);
        assert_eq!(s.policy().retained_classes(), vec![1, 2, 3]);
        fill(&mut s, 8, 5);
        assert_eq!(s.retained_epochs(0), vec![8]);
        assert_eq!(s.retained_epochs(1), vec![7, 8]);
        assert_eq!(s.retained_epochs(3), vec![4, 5, 6, 7, 8]);
        assert!(s.retained_floats() <= s.payload_bound());
        assert!(matches!(s.payload(0, 7), Err(Error::NotFound(_))));
        // means survive eviction
        assert!(s.class_mean(0, 1).is_ok());
        assert!(matches!(s.align(0, 7, 8), Err(Error::NotFound(_))));
        // the latest epoch can always be assembled
        for class in 0..4 {
            assert_eq!(s.assemble(class, 8, &MeanAlignment, &mut SeededRng::new(1)).unwrap().len(), 10);
        }
    }

    #[test]
    fn collector_assembles_online_under_eviction() {
        let counts = [20, 5, 2];
        let policy = StorePolicy::new(10, &counts, Retention::Policy).unwrap();
        let store = TrailStore::new(counts.to_vec(), 2, policy).unwrap();
        let mut c = TrailCollector::new(store, Box::new(MeanAlignment), SeededRng::new(0));
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(j, &n)| std::iter::repeat_n(j, n)).collect();
        for e in 1..=7u32 {
            let z = Matrix::new(
                labels.len(),
                2,
                labels.iter().enumerate().flat_map(|(i, &y)| [y as f32 + e as f32, i as f32 * 0.1]).collect(),
            )
            .unwrap();
            SnapshotSink::record(&mut c, e, &z, &labels).unwrap();
        }
        assert_eq!(c.epoch_sets.len(), 7);
        // K = 5 for the two-sample class: epochs 1..4 fall back
        for (i, set) in c.epoch_sets.iter().enumerate() {
            assert_eq!(set.epoch(), i as u32 + 1);
            assert_eq!(set.is_fallback(), i < 4);
        }
        assert!(c.store.retained_floats() <= c.store.payload_bound());
    }

    #[test]
    fn csv_export() {
        let t = TrailSet {
            class: 2,
            epoch: 5,
            features: Matrix::new(2, 2, vec![1.0, 2.0, 3.5, -1.0]).unwrap(),
            provenance: vec![Provenance { epoch: 5, index: 0 }, Provenance { epoch: 4, index: 1 }],
        };
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "class,source_epoch,source_index,z0,z1\n2,5,0,1,2\n2,4,1,3.5,-1\n"
        );
    }

    #[test]
    fn registry_lists_all_modes() {
        let reg = alignment_registry();
        assert_eq!(reg.names(), &["mean", "mean_and_variance", "class_agnostic", "none"]);
        for name in reg.names() {
            assert_eq!(reg.create(name).unwrap().name(), *name);
        }
    }
}
