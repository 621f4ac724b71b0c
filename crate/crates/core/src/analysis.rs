//! Numerical checks of the back-tracking claims and experiment metrics.
//!
//! The "optimal classifier" of an epoch is found by L-BFGS on the fixed
//! snapshot. Softmax cross-entropy is convex in `(W, b)`, so a gradient norm
//! below [`FitConfig::grad_tol`] certifies near-optimality; fits that do not
//! get there are reported as uncertified and never used to assert anything.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::seq::index;

use crate::classifier::{EpochPlan, LinearClassifier};
use crate::datagen::{Dataset, Group, GroupAssignment};
use crate::embedding::{embed, EmbeddingParams};
use crate::error::{Error, Result};
use crate::numkit::{LinearParams64, Matrix, SeededRng};
use crate::trailstore::{Alignment, TrailStore};

/// Absolute tolerance on the lemma and theorem inequalities.
pub const LEMMA_TOLERANCE: f64 = 1e-4;
/// Per-feature loss above which a training feature counts as hard.
pub const HARD_LOSS_THRESHOLD: f64 = 5.0;

fn mean_class_loss(params: &LinearParams64, z_y: &Matrix, y: usize) -> Result<f64> {
    if z_y.rows() == 0 {
        return Err(Error::InvalidInput(format!("class {y} has no features")));
    }
    let labels = vec![y; z_y.rows()];
    let losses = params.row_losses(z_y, &labels)?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean negative log-likelihood of class `y` over its features `z_y`.
pub fn class_loss(z_y: &Matrix, y: usize, clf: &LinearClassifier) -> Result<f64> {
    mean_class_loss(&clf.to_params64(), z_y, y)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub per_class: Vec<f64>,
    /// Computed in one pass over the whole snapshot, independently of
    /// `per_class`.
    pub total: f64,
    pub classifier_tag: String,
    pub snapshot_tag: String,
}

impl LossReport {
    /// `|total − Σ_y L_y| / max(1, |total|)`.
    pub fn additivity_gap(&self) -> f64 {
        let sum: f64 = self.per_class.iter().sum();
        (self.total - sum).abs() / self.total.abs().max(1.0)
    }
}

fn balanced_objective_parts(by_class: &[&Matrix]) -> Result<(Matrix, Vec<usize>, Vec<f64>)> {
    if let Some(j) = by_class.iter().position(|m| m.rows() == 0) {
        return Err(Error::InvalidInput(format!("class {j} has no features")));
    }
    let z = Matrix::vstack(by_class)?;
    let mut labels = Vec::with_capacity(z.rows());
    let mut weights = Vec::with_capacity(z.rows());
    for (j, m) in by_class.iter().enumerate() {
        labels.extend(std::iter::repeat_n(j, m.rows()));
        weights.extend(std::iter::repeat_n(1.0 / m.rows() as f64, m.rows()));
    }
    Ok((z, labels, weights))
}

/// Per-class and total loss of `clf` on a snapshot split by class.
pub fn loss_report(
    by_class: &[&Matrix],
    clf: &LinearClassifier,
    classifier_tag: &str,
    snapshot_tag: &str,
) -> Result<LossReport> {
    if by_class.len() != clf.classes() {
        return Err(Error::Shape(format!(
            "{} class snapshots for a {}-class classifier",
            by_class.len(),
            clf.classes()
        )));
    }
    let params = clf.to_params64();
    let per_class = by_class
        .iter()
        .enumerate()
        .map(|(y, z)| mean_class_loss(&params, z, y))
        .collect::<Result<Vec<_>>>()?;
    let (z, labels, weights) = balanced_objective_parts(by_class)?;
    let total = params.weighted_ce(&z, &labels, &weights, false)?.loss;
    Ok(LossReport {
        per_class,
        total,
        classifier_tag: classifier_tag.to_string(),
        snapshot_tag: snapshot_tag.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DuplicationVerdict {
    pub original: f64,
    pub duplicated: f64,
    pub equal: bool,
}

/// Class loss on `r` stacked copies of `z_y` against the loss on `z_y`.
pub fn check_duplication(z_y: &Matrix, y: usize, clf: &LinearClassifier, r: usize) -> Result<DuplicationVerdict> {
    if r < 2 {
        return Err(Error::InvalidInput(format!("replication factor {r} < 2")));
    }
    let copies: Vec<&Matrix> = std::iter::repeat_n(z_y, r).collect();
    let original = class_loss(z_y, y, clf)?;
    let duplicated = class_loss(&Matrix::vstack(&copies)?, y, clf)?;
    Ok(DuplicationVerdict {
        original,
        duplicated,
        equal: (duplicated - original).abs() <= 1e-6 * (1.0 + original.abs()),
    })
}

/// Which optimality the per-epoch classifier is taken to satisfy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Optimality {
    /// One classifier per epoch minimizing `Σ_y L_y` on the whole snapshot.
    Shared,
    /// A separate classifier per (class, epoch) minimizing that `L_y` alone.
    PerClass,
}

impl Optimality {
    pub fn as_str(self) -> &'static str {
        match self {
            Optimality::Shared => "shared",
            Optimality::PerClass => "per_class",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "shared" => Ok(Optimality::Shared),
            "per_class" => Ok(Optimality::PerClass),
            other => Err(Error::Config(format!(
                "unknown optimality reading '{other}' (known: shared, per_class)"
            ))),
        }
    }
}

impl fmt::Display for Optimality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitConfig {
    /// Converged once the Euclidean gradient norm drops below this.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// L-BFGS history length.
    pub memory: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grad_tol: 1e-5,
            max_iters: 2000,
            memory: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub params: LinearParams64,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `Σ_i weights_i · CE(z_i, labels_i)` over `(W, b)` with L-BFGS
/// and a backtracking Armijo line search.
pub fn fit_weighted_ce(
    z: &Matrix,
    labels: &[usize],
    weights: &[f64],
    classes: usize,
    init: Option<&LinearParams64>,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    let mut params = match init {
        Some(p) if p.classes == classes && p.dim == z.cols() => p.clone(),
        Some(_) => return Err(Error::Shape("warm start has the wrong shape".into())),
        None => LinearParams64::zeros(classes, z.cols()),
    };
    let split = params.w.len();
    let eval = |p: &LinearParams64| -> Result<(f64, Vec<f64>)> {
        let out = p.weighted_ce(z, labels, weights, true)?;
        let mut g = out.grad_w;
        g.extend(out.grad_b);
        Ok((out.loss, g))
    };
    let set = |p: &mut LinearParams64, x: &[f64]| {
        p.w.copy_from_slice(&x[..split]);
        p.b.copy_from_slice(&x[split..]);
    };

    let mut x: Vec<f64> = params.w.iter().chain(&params.b).copied().collect();
    let (mut f, mut g) = eval(&params)?;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;
    let mut trial = params.clone();

    while iterations < cfg.max_iters && norm(&g) >= cfg.grad_tol {
        iterations += 1;
        // two-loop recursion
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(history.len());
        for (s, y, rho) in history.iter().rev() {
            let a = rho * dot64(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= a * yi;
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot64(s, y) / dot64(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y, rho), a) in history.iter().zip(alphas.iter().rev()) {
            let b = rho * dot64(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += (a - b) * si;
            }
        }
        let mut slope = dot64(&g, &d);
        if slope >= 0.0 {
            history.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -dot64(&g, &g);
        }
        let mut step = if history.is_empty() { 1.0 / norm(&g).max(1.0) } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let x_new: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            set(&mut trial, &x_new);
            let (f_new, g_new) = eval(&trial)?;
            if f_new.is_finite() && f_new <= f + 1e-4 * step * slope {
                accepted = Some((x_new, f_new, g_new));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, g_new)) = accepted else {
            break;
        };
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot64(&s, &y);
        if sy > 1e-12 * norm(&s) * norm(&y) && sy > 0.0 {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        f = f_new;
        g = g_new;
    }
    set(&mut params, &x);
    let grad_norm = norm(&g);
    Ok(FitOutcome {
        params,
        objective: f,
        grad_norm,
        iterations,
        converged: grad_norm < cfg.grad_tol,
    })
}

/// Fits the optimal classifier of one snapshot under `reading`; `class`
/// selects the target of a per-class fit and is ignored for a shared one.
pub fn fit_optimal(
    by_class: &[&Matrix],
    reading: Optimality,
    class: usize,
    init: Option<&LinearParams64>,
    cfg: &FitConfig,
) -> Result<FitOutcome> {
    match reading {
        Optimality::Shared => {
            let (z, labels, weights) = balanced_objective_parts(by_class)?;
            fit_weighted_ce(&z, &labels, &weights, by_class.len(), init, cfg)
        }
        Optimality::PerClass => {
            let z = by_class
                .get(class)
                .ok_or_else(|| Error::InvalidInput(format!("class {class} out of range")))?;
            if z.rows() == 0 {
                return Err(Error::InvalidInput(format!("class {class} has no features")));
            }
            let labels = vec![class; z.rows()];
            let weights = vec![1.0 / z.rows() as f64; z.rows()];
            fit_weighted_ce(z, &labels, &weights, by_class.len(), init, cfg)
        }
    }
}

/// Memoized optimal classifiers keyed by epoch (and class for per-class
/// fits). A fit is warm-started from the closest earlier epoch already fitted
/// for the same key, which only changes the starting point of a convex
/// problem.
pub struct OptimalCache {
    pub reading: Optimality,
    pub config: FitConfig,
    fits: BTreeMap<(usize, u32), std::result::Result<FitOutcome, String>>,
}

impl OptimalCache {
    pub fn new(reading: Optimality, config: FitConfig) -> Self {
        Self {
            reading,
            config,
            fits: BTreeMap::new(),
        }
    }

    fn key(&self, class: usize, epoch: u32) -> (usize, u32) {
        match self.reading {
            Optimality::Shared => (usize::MAX, epoch),
            Optimality::PerClass => (class, epoch),
        }
    }

    /// Certified optimal classifier for `class` at `epoch`.
    pub fn get(&mut self, store: &TrailStore, class: usize, epoch: u32) -> Result<&FitOutcome> {
        let key = self.key(class, epoch);
        if !self.fits.contains_key(&key) {
            let snaps = (0..store.num_classes())
                .map(|j| store.payload(j, epoch))
                .collect::<Result<Vec<_>>>()?;
            let init = self
                .fits
                .range((key.0, 0)..key)
                .next_back()
                .and_then(|(_, r)| r.as_ref().ok())
                .map(|f| f.params.clone());
            let fit = fit_optimal(&snaps, self.reading, class, init.as_ref(), &self.config)?;
            let entry = if fit.converged {
                Ok(fit)
            } else {
                Err(format!(
                    "{} fit at epoch {epoch} stopped at gradient norm {:.3e} after {} iterations",
                    self.reading, fit.grad_norm, fit.iterations
                ))
            };
            self.fits.insert(key, entry);
        }
        self.fits[&key].as_ref().map_err(|msg| Error::Verification(msg.clone()))
    }

    /// Fits every recorded epoch in increasing order (so warm starts chain
    /// forward) and returns those whose fit is certified. Per-class fits are
    /// made lazily, so under that reading every epoch is returned.
    pub fn certified_epochs(&mut self, store: &TrailStore) -> Result<Vec<u32>> {
        if self.reading == Optimality::PerClass {
            return Ok(store.epochs().to_vec());
        }
        let mut out = Vec::new();
        for &e in store.epochs() {
            match self.get(store, 0, e) {
                Ok(_) => out.push(e),
                Err(Error::Verification(_)) => {}
                Err(other) => return Err(other),
            }
        }
        Ok(out)
    }

    /// Uncertified fits as `(epoch, reason)`; the class is omitted.
    pub fn failures(&self) -> Vec<(u32, String)> {
        self.fits
            .iter()
            .filter_map(|(&(_, e), r)| r.as_ref().err().map(|m| (e, m.clone())))
            .collect()
    }

    pub fn fitted(&self) -> usize {
        self.fits.len()
    }

    pub fn uncertified(&self) -> usize {
        self.fits.values().filter(|r| r.is_err()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaVerdict {
    pub class: usize,
    /// `e'`
    pub source_epoch: u32,
    /// `e`
    pub target_epoch: u32,
    pub reading: Optimality,
    /// `L_y(A^e_y, W^e) − L_y(Z^e_y, W^e)`
    pub lhs: f64,
    /// `[L_y(Z^{e'}_y, W^{e'}) − L_y(Z^e_y, W^e)] / 2`
    pub rhs: f64,
    pub satisfied: bool,
    /// `lhs − rhs`
    pub slack: f64,
    /// `L_y(Z^{e'}_y, W^{e'})`
    pub source_loss: f64,
    /// `L_y(Z^e_y, W^e)`
    pub target_loss: f64,
}

impl LemmaVerdict {
    /// Whether the class loss of the optimal classifier decreased from `e'`
    /// to `e`, the precondition of the adversarial-augmentation claim.
    pub fn loss_decreased(&self) -> bool {
        self.source_loss > self.target_loss
    }
}

/// Checks `L_y(A^e_y) − L_y(Z^e_y) ≥ [L_y(Z^{e'}_y) − L_y(Z^e_y)]/2` where
/// `A^e_y = Z^e_y ∪ Z^{e'→e}_y` and each loss is taken under the optimal
/// classifier of its epoch.
pub fn check_transfer_bound(
    store: &TrailStore,
    cache: &mut OptimalCache,
    alignment: &dyn Alignment,
    class: usize,
    source: u32,
    target: u32,
    tolerance: f64,
) -> Result<LemmaVerdict> {
    if source > target {
        return Err(Error::InvalidInput(format!("source epoch {source} after target {target}")));
    }
    let z_target = store.payload(class, target)?;
    let target_params = cache.get(store, class, target)?.params.clone();
    let target_loss = mean_class_loss(&target_params, z_target, class)?;
    if source == target {
        return Ok(LemmaVerdict {
            class,
            source_epoch: source,
            target_epoch: target,
            reading: cache.reading,
            lhs: 0.0,
            rhs: 0.0,
            satisfied: true,
            slack: 0.0,
            source_loss: target_loss,
            target_loss,
        });
    }
    let source_params = cache.get(store, class, source)?.params.clone();
    let source_loss = mean_class_loss(&source_params, store.payload(class, source)?, class)?;
    let moved = store.align_with(alignment, class, source, target)?.features;
    let augmented = Matrix::vstack(&[z_target, &moved])?;
    let lhs = mean_class_loss(&target_params, &augmented, class)? - target_loss;
    let rhs = (source_loss - target_loss) / 2.0;
    let slack = lhs - rhs;
    Ok(LemmaVerdict {
        class,
        source_epoch: source,
        target_epoch: target,
        reading: cache.reading,
        lhs,
        rhs,
        satisfied: slack >= -tolerance,
        slack,
        source_loss,
        target_loss,
    })
}

/// `count` distinct `(class, e', e)` triples with `e' < e`, drawn uniformly.
pub fn sample_pairs(classes: usize, epochs: &[u32], count: usize, rng: &mut SeededRng) -> Vec<(usize, u32, u32)> {
    let mut all = Vec::new();
    for c in 0..classes {
        for (i, &a) in epochs.iter().enumerate() {
            for &b in &epochs[i + 1..] {
                all.push((c, a.min(b), a.max(b)));
            }
        }
    }
    let mut picked: Vec<usize> = index::sample(rng, all.len(), count.min(all.len())).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// How a lemma violation under the shared reading is explained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attribution {
    /// The per-class reading satisfies the inequality, so the violation
    /// stems from one classifier not being optimal for every class at once.
    SharedOptimumGap,
    /// Violated under both readings.
    Unexplained,
    /// The per-class recheck could not be certified.
    Unknown,
}

impl Attribution {
    pub fn as_str(self) -> &'static str {
        match self {
            Attribution::SharedOptimumGap => "shared_optimum_gap",
            Attribution::Unexplained => "unexplained",
            Attribution::Unknown => "unknown",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub verdict: LemmaVerdict,
    pub attribution: Attribution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Uncertified {
    pub class: usize,
    pub source_epoch: u32,
    pub target_epoch: u32,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LemmaSummary {
    pub reading: Optimality,
    pub tolerance: f64,
    pub verdicts: Vec<LemmaVerdict>,
    pub violations: Vec<Violation>,
    pub uncertified: Vec<Uncertified>,
}

impl LemmaSummary {
    pub fn checked(&self) -> usize {
        self.verdicts.len()
    }

    pub fn satisfied(&self) -> usize {
        self.verdicts.iter().filter(|v| v.satisfied).count()
    }

    /// Satisfied fraction of certified pairs; 1 when nothing was checked.
    pub fn rate(&self) -> f64 {
        if self.verdicts.is_empty() {
            1.0
        } else {
            self.satisfied() as f64 / self.verdicts.len() as f64
        }
    }
}

/// Runs [`check_transfer_bound`] over `pairs` with the optimal classifiers in
/// `cache`. Violations under the shared reading are rechecked under the
/// per-class reading to attribute them.
pub fn run_lemma_checks(
    store: &TrailStore,
    alignment: &dyn Alignment,
    pairs: &[(usize, u32, u32)],
    cache: &mut OptimalCache,
    tolerance: f64,
) -> Result<LemmaSummary> {
    let reading = cache.reading;
    let mut recheck = OptimalCache::new(Optimality::PerClass, cache.config);
    let mut summary = LemmaSummary {
        reading,
        tolerance,
        verdicts: Vec::new(),
        violations: Vec::new(),
        uncertified: Vec::new(),
    };
    for &(class, source, target) in pairs {
        match check_transfer_bound(store, cache, alignment, class, source, target, tolerance) {
            Ok(v) => {
                if !v.satisfied {
                    let attribution = match reading {
                        Optimality::PerClass => Attribution::Unexplained,
                        Optimality::Shared => {
                            match check_transfer_bound(store, &mut recheck, alignment, class, source, target, tolerance) {
                                Ok(p) if p.satisfied => Attribution::SharedOptimumGap,
                                Ok(_) => Attribution::Unexplained,
                                Err(Error::Verification(_)) => Attribution::Unknown,
                                Err(other) => return Err(other),
                            }
                        }
                    };
                    summary.violations.push(Violation { verdict: v.clone(), attribution });
                }
                summary.verdicts.push(v);
            }
            Err(Error::Verification(reason)) => summary.uncertified.push(Uncertified {
                class,
                source_epoch: source,
                target_epoch: target,
                reason,
            }),
            Err(other) => return Err(other),
        }
    }
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoremSummary {
    pub pairs: usize,
    /// Pairs whose class loss did not decrease, skipped as vacuous.
    pub skipped: usize,
    pub holds: usize,
    /// Precondition met but `L_y(A^e_y) ≤ L_y(Z^e_y) − tolerance`.
    pub failures: Vec<LemmaVerdict>,
    pub tolerance: f64,
}

impl TheoremSummary {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// For every verdict whose class loss decreased from `e'` to `e`, requires
/// the augmented loss to exceed the snapshot loss: `lhs > −tolerance`.
pub fn check_trail_bound(verdicts: &[LemmaVerdict], tolerance: f64) -> TheoremSummary {
    let mut out = TheoremSummary {
        pairs: verdicts.len(),
        skipped: 0,
        holds: 0,
        failures: Vec::new(),
        tolerance,
    };
    for v in verdicts {
        if !v.loss_decreased() {
            out.skipped += 1;
        } else if v.lhs > -tolerance {
            out.holds += 1;
        } else {
            out.failures.push(v.clone());
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// `bins` equal-width bins spanning the finite values.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: lo + i as f64 * width,
            hi: lo + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for v in finite {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

/// Worst-case deviations over every aligned `(class, e' → e)` pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentCheck {
    pub pairs: usize,
    /// Largest `|column mean of aligned − target class mean|`.
    pub max_mean_error: f64,
    /// Largest `|variance after − variance before|` per dimension.
    pub max_variance_change: f64,
    /// The same change divided by `1 + variance before`, which absorbs f32
    /// rounding on wide features.
    pub max_relative_variance_change: f64,
}

/// Aligns every retained class snapshot into every other recorded epoch.
pub fn check_alignment(store: &TrailStore, alignment: &dyn Alignment) -> Result<AlignmentCheck> {
    let mut out = AlignmentCheck { pairs: 0, max_mean_error: 0.0, max_variance_change: 0.0, max_relative_variance_change: 0.0 };
    for class in 0..store.num_classes() {
        let sources = store.retained_epochs(class);
        for &source in &sources {
            let before = store.payload(class, source)?.column_stds();
            for &target in store.epochs() {
                let aligned = store.align_with(alignment, class, source, target)?.features;
                let want = store.class_mean(class, target)?;
                for (got, w) in aligned.column_means().iter().zip(want) {
                    out.max_mean_error = out.max_mean_error.max((got - w).abs());
                }
                for (after, b) in aligned.column_stds().iter().zip(&before) {
                    let change = (after * after - b * b).abs();
                    out.max_variance_change = out.max_variance_change.max(change);
                    out.max_relative_variance_change = out.max_relative_variance_change.max(change / (1.0 + b * b));
                }
                out.pairs += 1;
            }
        }
    }
    Ok(out)
}

/// Trail sets that violate the cardinality or history contract.
#[derive(Clone, Debug, PartialEq)]
pub struct TrailCheck {
    pub assembled: usize,
    /// `(class, epoch)` skipped for lack of history.
    pub insufficient: usize,
    /// `(class, epoch, rows)` with `rows != n_B`.
    pub wrong_size: Vec<(usize, u32, usize)>,
    /// `(class, epoch)` whose source epochs are not `e, e−1, …, e−K_j+1`.
    pub wrong_history: Vec<(usize, u32)>,
}

impl TrailCheck {
    pub fn passed(&self) -> bool {
        self.wrong_size.is_empty() && self.wrong_history.is_empty()
    }
}

/// Assembles the trail set of every class at every recorded epoch.
pub fn check_trails(store: &TrailStore, alignment: &dyn Alignment, rng: &mut SeededRng) -> Result<TrailCheck> {
    let mut out = TrailCheck { assembled: 0, insufficient: 0, wrong_size: Vec::new(), wrong_history: Vec::new() };
    let n_b = store.n_b();
    for class in 0..store.num_classes() {
        let depth = store.policy().depth(class);
        for &e in store.epochs() {
            match store.assemble(class, e, alignment, rng) {
                Ok(t) => {
                    out.assembled += 1;
                    if t.len() != n_b || t.features.rows() != n_b {
                        out.wrong_size.push((class, e, t.len()));
                    }
                    let want: Vec<u32> = (0..depth as u32).map(|k| e - k).collect();
                    if t.source_epochs() != want {
                        out.wrong_history.push((class, e));
                    }
                }
                Err(Error::InsufficientHistory { .. }) => out.insufficient += 1,
                Err(other) => return Err(other),
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupMetrics {
    pub overall: f64,
    /// `None` when the group has no classes.
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub per_class: Vec<f64>,
}

impl GroupMetrics {
    pub fn group(&self, g: Group) -> Option<f64> {
        match g {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }
}

/// Accuracy of `clf` on already-embedded test features.
pub fn evaluate_features(
    clf: &LinearClassifier,
    features: &Matrix,
    labels: &[usize],
    groups: &GroupAssignment,
) -> Result<GroupMetrics> {
    if features.rows() != labels.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", features.rows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let classes = clf.classes();
    if groups.groups.len() != classes {
        return Err(Error::Shape(format!(
            "group assignment covers {} classes, classifier has {classes}",
            groups.groups.len()
        )));
    }
    let predicted = clf.predict(features)?;
    let mut correct = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&y, &p) in labels.iter().zip(&predicted) {
        if y >= classes {
            return Err(Error::InvalidInput(format!("label {y} outside [0, {classes})")));
        }
        total[y] += 1;
        correct[y] += usize::from(y == p);
    }
    let per_class: Vec<f64> = correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    let group_acc = |g: Group| {
        let members = groups.classes_in(g);
        let t: usize = members.iter().map(|&j| total[j]).sum();
        (t > 0).then(|| members.iter().map(|&j| correct[j]).sum::<usize>() as f64 / t as f64)
    };
    Ok(GroupMetrics {
        overall: correct.iter().sum::<usize>() as f64 / labels.len() as f64,
        many: group_acc(Group::Many),
        medium: group_acc(Group::Medium),
        few: group_acc(Group::Few),
        per_class,
    })
}

/// Embeds `test` and scores `clf` on it.
pub fn evaluate(
    clf: &LinearClassifier,
    embedding: &EmbeddingParams,
    test: &Dataset,
    groups: &GroupAssignment,
) -> Result<GroupMetrics> {
    let z = embed(embedding, &test.inputs)?;
    evaluate_features(clf, &z, &test.labels, groups)
}

/// Number of rows of `z_y` (all class `y`) whose loss exceeds `threshold`.
pub fn hard_example_count(z_y: &Matrix, y: usize, clf: &LinearClassifier, threshold: f64) -> Result<usize> {
    if z_y.rows() == 0 {
        return Ok(0);
    }
    let losses = clf.to_params64().row_losses(z_y, &vec![y; z_y.rows()])?;
    Ok(losses.iter().filter(|&&l| l > threshold).count())
}

/// Hard examples among the distinct features of `classes` in an epoch's
/// training set.
pub fn hard_examples_in_plan(
    plan: &EpochPlan,
    clf: &LinearClassifier,
    classes: &[usize],
    threshold: f64,
) -> Result<usize> {
    classes
        .iter()
        .map(|&j| hard_example_count(&plan.class_features(j), j, clf, threshold))
        .sum()
}
