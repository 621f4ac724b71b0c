//! Synthetic long-tailed datasets: isotropic Gaussian class clusters whose
//! cardinalities decay as a power of the class index, plus a balanced test
//! split.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numkit::{Matrix, SeededRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Labelled vectors. Classes are indexed by decreasing training cardinality.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub class_counts: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    /// Builds a dataset and derives `class_counts` from `labels`.
    pub fn new(inputs: Matrix, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} input rows for {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        let mut class_counts = vec![0usize; classes];
        for &y in &labels {
            *class_counts
                .get_mut(y)
                .ok_or_else(|| Error::InvalidInput(format!("label {y} outside [0, {classes})")))? += 1;
        }
        if let Some(j) = class_counts.iter().position(|&n| n == 0) {
            return Err(Error::InvalidInput(format!("class {j} is empty")));
        }
        Ok(Self {
            inputs,
            labels,
            class_counts,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Row indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    /// CSV with a `label,x0,…` header and one sample per line. An optional
    /// leading `# key=value` comment line carries provenance.
    pub fn write_csv<W: Write>(&self, mut out: W, comment: Option<&str>) -> Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        write!(out, "label")?;
        for k in 0..self.input_dim() {
            write!(out, ",x{k}")?;
        }
        writeln!(out)?;
        for (row, y) in self.inputs.iter_rows().zip(&self.labels) {
            write!(out, "{y}")?;
            for v in row {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub classes: usize,
    pub input_dim: usize,
    pub n_max: usize,
    pub n_min: usize,
    /// Power-law exponent of the cardinality decay. `None` solves for the
    /// exponent that lands the last class exactly on `n_min`.
    pub pareto_alpha: Option<f64>,
    /// Standard deviation of each isotropic class cluster.
    pub cluster_spread: f64,
    /// Class means are drawn uniformly from `[-mean_range, mean_range]^D`.
    pub mean_range: f64,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            classes: 50,
            input_dim: 32,
            n_max: 500,
            n_min: 5,
            pareto_alpha: None,
            cluster_spread: 1.0,
            mean_range: 1.0,
            test_per_class: 20,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.classes < 3 {
            return Err(Error::Config(format!("classes = {} (need >= 3)", self.classes)));
        }
        if self.input_dim < 2 {
            return Err(Error::Config(format!("input_dim = {} (need >= 2)", self.input_dim)));
        }
        if self.n_min > self.n_max {
            return Err(Error::Config(format!(
                "n_min = {} exceeds n_max = {}",
                self.n_min, self.n_max
            )));
        }
        if self.n_min < 2 {
            return Err(Error::Config(format!("n_min = {} (need >= 2)", self.n_min)));
        }
        if self.test_per_class == 0 {
            return Err(Error::Config("test_per_class must be >= 1".into()));
        }
        if !(self.cluster_spread > 0.0) || !(self.mean_range > 0.0) {
            return Err(Error::Config("cluster_spread and mean_range must be > 0".into()));
        }
        if let Some(a) = self.pareto_alpha {
            if !(a >= 0.0) {
                return Err(Error::Config(format!("pareto_alpha = {a} must be >= 0")));
            }
        }
        Ok(())
    }

    /// The decay exponent actually used.
    pub fn effective_alpha(&self) -> f64 {
        self.pareto_alpha.unwrap_or_else(|| {
            (self.n_max as f64 / self.n_min as f64).ln() / (self.classes as f64).ln()
        })
    }
}

/// `n_j = round(n_max · j^(−α))` clamped to `[n_min, n_max]`, `j` 1-indexed.
pub fn cardinalities(cfg: &DatasetConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let alpha = cfg.effective_alpha();
    Ok((1..=cfg.classes)
        .map(|j| {
            let n = (cfg.n_max as f64 * (j as f64).powf(-alpha)).round() as usize;
            n.clamp(cfg.n_min, cfg.n_max)
        })
        .collect())
}

/// Draws the train and balanced test splits. Rows are grouped by class in
/// class order.
pub fn generate(cfg: &DatasetConfig) -> Result<(Dataset, Dataset)> {
    let counts = cardinalities(cfg)?;
    let mut rng = SeededRng::new(cfg.seed);
    let d = cfg.input_dim;
    let means: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            (0..d)
                .map(|_| rng.random_range(-cfg.mean_range..=cfg.mean_range))
                .collect()
        })
        .collect();

    let draw = |per_class: &dyn Fn(usize) -> usize, rng: &mut SeededRng| {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (j, mean) in means.iter().enumerate() {
            for _ in 0..per_class(j) {
                for m in mean {
                    let eps: f64 = rng.sample(StandardNormal);
                    data.push((m + cfg.cluster_spread * eps) as f32);
                }
                labels.push(j);
            }
        }
        (data, labels)
    };

    let (train_x, train_y) = draw(&|j| counts[j], &mut rng);
    let (test_x, test_y) = draw(&|_| cfg.test_per_class, &mut rng);
    let train = Dataset::new(
        Matrix::new(train_y.len(), d, train_x)?,
        train_y,
        cfg.classes,
        Split::Train,
    )?;
    let test = Dataset::new(
        Matrix::new(test_y.len(), d, test_x)?,
        test_y,
        cfg.classes,
        Split::Test,
    )?;
    Ok((train, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Many, Group::Medium, Group::Few];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Many => "many",
            Group::Medium => "medium",
            Group::Few => "few",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupAssignment {
    pub groups: Vec<Group>,
    pub t_many: usize,
    pub t_few: usize,
}

impl GroupAssignment {
    pub fn classes_in(&self, group: Group) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(j, _)| j)
            .collect()
    }
}

/// many: `n > t_many`; few: `n ≤ t_few`; medium otherwise.
pub fn assign_groups(class_counts: &[usize], t_many: usize, t_few: usize) -> Result<GroupAssignment> {
    if t_few >= t_many {
        return Err(Error::Config(format!(
            "group thresholds need t_few < t_many (got {t_few}, {t_many})"
        )));
    }
    let groups = class_counts
        .iter()
        .map(|&n| {
            if n > t_many {
                Group::Many
            } else if n <= t_few {
                Group::Few
            } else {
                Group::Medium
            }
        })
        .collect();
    Ok(GroupAssignment {
        groups,
        t_many,
        t_few,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetStats {
    /// Over-sampling factor `N / (C·n_j)` per class.
    pub oversampling: Vec<f64>,
    /// `n_1 / n_C`.
    pub imbalance_ratio: f64,
}

pub fn stats(class_counts: &[usize]) -> DatasetStats {
    let n: usize = class_counts.iter().sum();
    let c = class_counts.len() as f64;
    let max = class_counts.iter().copied().max().unwrap_or(0) as f64;
    let min = class_counts.iter().copied().min().unwrap_or(0) as f64;
    DatasetStats {
        oversampling: class_counts
            .iter()
            .map(|&nj| n as f64 / (c * nj as f64))
            .collect(),
        imbalance_ratio: max / min,
    }
}
