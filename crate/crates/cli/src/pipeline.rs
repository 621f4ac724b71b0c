//! Experiment stages and the files they leave under the output root.
//!
//! ```text
//! manifest.json
//! dataset/{train,test}.bcts, {train,test}.csv, stats.json
//! seed-<s>/stage1/{embedding,store}.bcts, stage1.json
//! seed-<s>/verify.json, lemma.csv
//! seed-<s>/<strategy>/classifier.bcts, metrics.json, hard_examples.csv, trails/eNN.bcts
//! ```
//!
//! Every stage is recorded in the manifest with its files. A stage whose
//! files all exist and carry the current config hash is skipped on rerun.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use breadcrumbs::analysis::{
    check_alignment, check_trail_bound, check_trails, evaluate, hard_examples_in_plan, histogram, run_lemma_checks,
    sample_pairs, OptimalCache,
};
use breadcrumbs::classifier::{default_n_b, train_stage2, EpochPlan, StageTwoContext};
use breadcrumbs::container::{read_header_from, Container, ContainerWriter};
use breadcrumbs::datagen::{assign_groups, generate, stats, Dataset, Group, GroupAssignment};
use breadcrumbs::embedding::{train_stage1, EmbeddingParams};
use breadcrumbs::trailstore::{MeanAlignment, Retention, StorePolicy};
use breadcrumbs::{alignment_registry, strategy_registry, SeededRng, TrailStore};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{ConfigError, ExperimentConfig};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Paths relative to the output root.
    pub files: Vec<String>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub versions: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Option<Self>> {
        let path = root.join(MANIFEST);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
    }
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("breadcrumbs".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("container_format".to_string(), breadcrumbs::container::VERSION.to_string()),
    ])
}

pub fn dataset_stage() -> String {
    "dataset".into()
}

pub fn stage1_stage(seed: u64) -> String {
    format!("seed-{seed}/stage1")
}

pub fn verify_stage(seed: u64) -> String {
    format!("seed-{seed}/verify")
}

pub fn strategy_stage(seed: u64, strategy: &str) -> String {
    format!("seed-{seed}/{strategy}")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(bytes)?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Config hash embedded in an output file, by file type.
pub fn embedded_hash(path: &Path) -> Option<String> {
    match path.extension()?.to_str()? {
        "bcts" => read_header_from(path).ok().map(|h| hex::encode(h.config_hash)),
        "json" => {
            let v: Value = serde_json::from_str(&fs::read_to_string(path).ok()?).ok()?;
            v.get("config_hash")?.as_str().map(str::to_string)
        }
        _ => {
            let text = fs::read_to_string(path).ok()?;
            text.lines().next()?.strip_prefix("# config_hash=").map(str::to_string)
        }
    }
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    hash: [u8; 32],
    hash_hex: String,
    manifest: Manifest,
    verbose: bool,
    reported: std::collections::BTreeSet<String>,
}

struct StageOutputs {
    embeddings: Vec<EmbeddingParams>,
    store: TrailStore,
}

impl Pipeline {
    pub fn open(cfg: ExperimentConfig, root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        let hash = cfg.hash();
        let hash_hex = hex::encode(hash);
        let manifest = match Manifest::load(root)? {
            Some(m) if m.config_hash != hash_hex => {
                return Err(ConfigError(format!(
                    "{} holds results for config hash {}, not {hash_hex}; choose another output directory",
                    root.display(),
                    m.config_hash
                ))
                .into())
            }
            Some(m) => m,
            None => Manifest { config_hash: hash_hex.clone(), versions: versions(), stages: BTreeMap::new() },
        };
        Ok(Self { cfg, root: root.to_path_buf(), hash, hash_hex, manifest, verbose: false, reported: Default::default() })
    }

    pub fn verbose(mut self, on: bool) -> Self {
        self.verbose = on;
        self
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn hash_hex(&self) -> &str {
        &self.hash_hex
    }

    fn log(&self, msg: &str) {
        if self.verbose {
            eprintln!("{msg}");
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn comment(&self) -> String {
        format!("config_hash={}", self.hash_hex)
    }

    fn container(&self, dim: usize) -> Result<ContainerWriter> {
        Ok(ContainerWriter::new(dim, &self.hash)?)
    }

    fn save_container(&self, rel: &str, w: ContainerWriter) -> Result<String> {
        write_atomic(&self.path(rel), &w.finish())?;
        Ok(rel.to_string())
    }

    fn save_json(&self, rel: &str, mut v: Value) -> Result<String> {
        v["config_hash"] = json!(self.hash_hex);
        write_atomic(&self.path(rel), (serde_json::to_string_pretty(&v)? + "\n").as_bytes())?;
        Ok(rel.to_string())
    }

    /// Writes a CSV whose first line is the config-hash comment.
    fn save_csv(&self, rel: &str, body: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
        let mut buf = format!("# {}\n", self.comment()).into_bytes();
        body(&mut buf)?;
        write_atomic(&self.path(rel), &buf)?;
        Ok(rel.to_string())
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        write_atomic(&self.path(MANIFEST), text.as_bytes())
    }

    /// Whether `id` is recorded with every file present and hashed.
    pub fn is_complete(&self, id: &str) -> bool {
        self.manifest.stages.get(id).is_some_and(|rec| {
            rec.files
                .iter()
                .all(|f| embedded_hash(&self.path(f)).as_deref() == Some(self.hash_hex.as_str()))
        })
    }

    fn stage(&mut self, id: &str, run: impl FnOnce(&Self) -> Result<Vec<String>>) -> Result<bool> {
        if self.is_complete(id) {
            if self.reported.insert(id.to_string()) {
                self.log(&format!("skip {id} (complete)"));
            }
            return Ok(false);
        }
        self.reported.insert(id.to_string());
        self.log(&format!("run  {id}"));
        let start = Instant::now();
        let files = run(self).with_context(|| format!("stage {id}"))?;
        let wall_clock_s = start.elapsed().as_secs_f64();
        self.manifest.stages.insert(id.to_string(), StageRecord { files, wall_clock_s });
        self.save_manifest()?;
        Ok(true)
    }

    pub fn generate(&mut self) -> Result<()> {
        self.stage(&dataset_stage(), |p| {
            let (train, test) = generate(&p.cfg.dataset())?;
            let mut files = Vec::new();
            for (name, ds) in [("train", &train), ("test", &test)] {
                let mut w = p.container(ds.input_dim())?;
                w.dataset(ds)?;
                files.push(p.save_container(&format!("dataset/{name}.bcts"), w)?);
                let rel = format!("dataset/{name}.csv");
                let mut buf = Vec::new();
                ds.write_csv(&mut buf, Some(&p.comment()))?;
                write_atomic(&p.path(&rel), &buf)?;
                files.push(rel);
            }
            let s = stats(&train.class_counts);
            let groups = p.groups(&train.class_counts)?;
            files.push(p.save_json(
                "dataset/stats.json",
                json!({
                    "classes": train.num_classes(),
                    "train_size": train.len(),
                    "test_size": test.len(),
                    "class_counts": train.class_counts,
                    "effective_alpha": p.cfg.dataset().effective_alpha(),
                    "imbalance_ratio": s.imbalance_ratio,
                    "oversampling": s.oversampling,
                    "n_b": p.n_b(&train.class_counts),
                    "groups": Group::ALL.iter().map(|&g| (g.as_str(), groups.classes_in(g))).collect::<BTreeMap<_, _>>(),
                }),
            )?);
            Ok(files)
        })?;
        Ok(())
    }

    fn groups(&self, counts: &[usize]) -> Result<GroupAssignment> {
        Ok(assign_groups(counts, self.cfg.many_threshold, self.cfg.few_threshold)?)
    }

    fn n_b(&self, counts: &[usize]) -> usize {
        self.cfg.n_b.unwrap_or_else(|| default_n_b(counts))
    }

    fn open_container(&self, rel: &str) -> Result<Container> {
        let c = Container::open(&self.path(rel)).with_context(|| format!("reading {rel}"))?;
        if c.header.config_hash != self.hash {
            bail!("{rel} was written for config hash {}", hex::encode(c.header.config_hash));
        }
        Ok(c)
    }

    fn datasets(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            self.open_container("dataset/train.bcts")?.dataset()?,
            self.open_container("dataset/test.bcts")?.dataset()?,
        ))
    }

    pub fn stage1(&mut self, seed: u64) -> Result<()> {
        self.generate()?;
        self.stage(&stage1_stage(seed), |p| {
            let (train, _) = p.datasets()?;
            let s1 = p.cfg.stage_one(seed);
            let policy = StorePolicy::new(p.n_b(&train.class_counts), &train.class_counts, Retention::All)?;
            let mut store = TrailStore::new(train.class_counts.clone(), s1.feature_dim, policy)?;
            let run = train_stage1(&train, &s1, &mut store)?;
            let dir = format!("seed-{seed}/stage1");
            let mut w = p.container(s1.feature_dim)?;
            for params in &run.checkpoints {
                w.embedding(params)?;
            }
            let mut files = vec![p.save_container(&format!("{dir}/embedding.bcts"), w)?];
            let mut w = p.container(s1.feature_dim)?;
            w.store(&store)?;
            files.push(p.save_container(&format!("{dir}/store.bcts"), w)?);
            files.push(p.save_json(
                &format!("{dir}/stage1.json"),
                json!({
                    "seed": seed,
                    "epochs": s1.epochs,
                    "epoch_losses": run.epoch_losses,
                    "n_b": store.n_b(),
                    "retained_floats": store.retained_floats(),
                }),
            )?);
            Ok(files)
        })?;
        Ok(())
    }

    fn stage1_outputs(&self, seed: u64) -> Result<StageOutputs> {
        let dir = format!("seed-{seed}/stage1");
        Ok(StageOutputs {
            embeddings: self.open_container(&format!("{dir}/embedding.bcts"))?.embeddings()?,
            store: self.open_container(&format!("{dir}/store.bcts"))?.store()?,
        })
    }

    /// Runs (or reuses) the verification stage; returns whether it passed.
    pub fn verify(&mut self, seed: u64) -> Result<bool> {
        self.stage1(seed)?;
        self.stage(&verify_stage(seed), |p| p.run_verify(seed))?;
        let v: Value = serde_json::from_str(&fs::read_to_string(self.path(&format!("seed-{seed}/verify.json")))?)?;
        Ok(v["passed"].as_bool().unwrap_or(false))
    }

    fn run_verify(&self, seed: u64) -> Result<Vec<String>> {
        let cfg = &self.cfg;
        let StageOutputs { store, .. } = self.stage1_outputs(seed)?;
        let alignment = alignment_registry().create(&cfg.alignment)?;

        let aligned = check_alignment(&store, &MeanAlignment)?;
        let alignment_ok = aligned.max_mean_error <= 1e-5 && aligned.max_relative_variance_change <= 1e-6;
        let trails = check_trails(&store, alignment.as_ref(), &mut SeededRng::with_stream(seed, 8))?;

        let start = Instant::now();
        let mut cache = OptimalCache::new(cfg.optimality_reading(), cfg.fit());
        let certified = cache.certified_epochs(&store)?;
        let pairs = sample_pairs(store.num_classes(), &certified, cfg.lemma_pairs, &mut SeededRng::with_stream(seed, 9));
        let lemma = run_lemma_checks(&store, alignment.as_ref(), &pairs, &mut cache, cfg.lemma_tolerance)?;
        let theorem = check_trail_bound(&lemma.verdicts, cfg.lemma_tolerance);
        // too few certified pairs is a failure, not a vacuous pass
        let lemma_ok = lemma.checked() >= cfg.lemma_pairs && lemma.rate() >= cfg.lemma_min_rate;
        let verify_s = start.elapsed().as_secs_f64();

        let violations: Vec<Value> = lemma
            .violations
            .iter()
            .map(|v| {
                json!({
                    "class": v.verdict.class,
                    "source_epoch": v.verdict.source_epoch,
                    "target_epoch": v.verdict.target_epoch,
                    "lhs": v.verdict.lhs,
                    "rhs": v.verdict.rhs,
                    "slack": v.verdict.slack,
                    "attribution": v.attribution.as_str(),
                })
            })
            .collect();
        let theorem_failures: Vec<Value> = theorem
            .failures
            .iter()
            .map(|v| json!({"class": v.class, "source_epoch": v.source_epoch, "target_epoch": v.target_epoch, "lhs": v.lhs}))
            .collect();
        let slacks: Vec<f64> = lemma.verdicts.iter().map(|v| v.slack).collect();
        let passed = alignment_ok && trails.passed() && lemma_ok && theorem.passed();

        let dir = format!("seed-{seed}");
        let mut files = vec![self.save_json(
            &format!("{dir}/verify.json"),
            json!({
                "seed": seed,
                "passed": passed,
                "alignment": {
                    "mode": "mean",
                    "pairs": aligned.pairs,
                    "max_mean_error": aligned.max_mean_error,
                    "max_variance_change": aligned.max_variance_change,
                    "max_relative_variance_change": aligned.max_relative_variance_change,
                    "passed": alignment_ok,
                },
                "trails": {
                    "assembled": trails.assembled,
                    "insufficient_history": trails.insufficient,
                    "wrong_size": trails.wrong_size.len(),
                    "wrong_history": trails.wrong_history.len(),
                    "passed": trails.passed(),
                },
                "lemma": {
                    "reading": lemma.reading.as_str(),
                    "tolerance": lemma.tolerance,
                    "pairs_requested": cfg.lemma_pairs,
                    "certified_epochs": certified,
                    "uncertified_fits": cache.failures().iter().map(|(e, r)| json!({"epoch": e, "reason": r})).collect::<Vec<_>>(),
                    "uncertified_pairs": lemma.uncertified.len(),
                    "checked": lemma.checked(),
                    "satisfied": lemma.satisfied(),
                    "rate": lemma.rate(),
                    "min_rate": cfg.lemma_min_rate,
                    "violations": violations,
                    "slack_histogram": histogram(&slacks, 10).iter().map(|b| json!({"lo": b.lo, "hi": b.hi, "count": b.count})).collect::<Vec<_>>(),
                    "wall_clock_s": verify_s,
                    "passed": lemma_ok,
                },
                "theorem": {
                    "pairs": theorem.pairs,
                    "skipped": theorem.skipped,
                    "holds": theorem.holds,
                    "failures": theorem_failures,
                    "passed": theorem.passed(),
                },
            }),
        )?];
        files.push(self.save_csv(&format!("{dir}/lemma.csv"), |buf| {
            writeln!(buf, "class,source_epoch,target_epoch,lhs,rhs,slack,satisfied,source_loss,target_loss")?;
            for v in &lemma.verdicts {
                writeln!(
                    buf,
                    "{},{},{},{:e},{:e},{:e},{},{:e},{:e}",
                    v.class, v.source_epoch, v.target_epoch, v.lhs, v.rhs, v.slack, v.satisfied, v.source_loss, v.target_loss
                )?;
            }
            Ok(())
        })?);
        Ok(files)
    }

    pub fn stage2(&mut self, seed: u64, strategy: &str) -> Result<()> {
        self.stage1(seed)?;
        self.stage(&strategy_stage(seed, strategy), |p| p.run_stage2(seed, strategy))?;
        Ok(())
    }

    fn run_stage2(&self, seed: u64, name: &str) -> Result<Vec<String>> {
        let cfg = &self.cfg;
        let (train, test) = self.datasets()?;
        let groups = self.groups(&train.class_counts)?;
        let few = groups.classes_in(Group::Few);
        let StageOutputs { embeddings, store } = self.stage1_outputs(seed)?;
        let last = embeddings.last().context("no embedding checkpoints")?;
        let alignment = alignment_registry().create(&cfg.alignment)?;
        let ctx = StageTwoContext { store: &store, alignment: alignment.as_ref(), collected: None };
        let mut strategy = strategy_registry().create(name)?;
        let dir = format!("seed-{seed}/{name}");
        let dim = store.feature_dim();

        let mut files = Vec::new();
        let mut hard = Vec::new();
        let mut saved_sets = std::collections::BTreeSet::new();
        let keep_trails = name.contains("breadcrumb");
        let run = train_stage2(&ctx, strategy.as_mut(), &cfg.stage_two(seed), &mut |ep| {
            hard.push((ep.epoch, hard_examples_in_plan(ep.plan, ep.classifier, &few, cfg.hard_loss_threshold)?));
            let tag = ep.plan.tag();
            if keep_trails && saved_sets.insert(tag) {
                let mut w = ContainerWriter::new(dim, &self.hash)?;
                match ep.plan.trail_sets() {
                    Some(sets) => {
                        for t in &sets {
                            w.trails(t)?;
                        }
                    }
                    None => {
                        if let EpochPlan::ClassBalanced { by_class, .. } = ep.plan {
                            for (class, features) in by_class.iter().enumerate() {
                                w.snapshot(&breadcrumbs::trailstore::ClassSnapshot {
                                    class,
                                    epoch: tag.epoch,
                                    features: features.clone(),
                                })?;
                            }
                        }
                    }
                }
                let rel = format!("{dir}/trails/e{:02}.bcts", tag.epoch);
                write_atomic(&self.path(&rel), &w.finish()).map_err(|e| breadcrumbs::Error::State(e.to_string()))?;
                files.push(rel);
            }
            Ok(())
        })?;

        let metrics = evaluate(&run.classifier, last, &test, &groups)?;
        let mut w = self.container(dim)?;
        w.classifier(&run.classifier)?;
        files.push(self.save_container(&format!("{dir}/classifier.bcts"), w)?);
        let mean_hard = hard.iter().map(|&(_, c)| c as f64).sum::<f64>() / hard.len().max(1) as f64;
        files.push(self.save_json(
            &format!("{dir}/metrics.json"),
            json!({
                "seed": seed,
                "strategy": name,
                "overall": metrics.overall,
                "many": metrics.many,
                "medium": metrics.medium,
                "few": metrics.few,
                "per_class": metrics.per_class,
                "epochs": run.epoch_losses.len(),
                "epoch_losses": run.epoch_losses,
                "distinct_sets": run.distinct_sets(),
                "hard_examples": {
                    "threshold": cfg.hard_loss_threshold,
                    "group": "few",
                    "per_epoch": hard.iter().map(|&(_, c)| c).collect::<Vec<_>>(),
                    "mean": mean_hard,
                },
            }),
        )?);
        files.push(self.save_csv(&format!("{dir}/hard_examples.csv"), |buf| {
            writeln!(buf, "epoch,count")?;
            for (e, c) in &hard {
                writeln!(buf, "{e},{c}")?;
            }
            Ok(())
        })?);
        Ok(files)
    }
}

/// What a run left to report on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub stage1_runs: usize,
    pub stage2_runs: usize,
    pub verification_failures: usize,
}

pub fn cmd_generate(cfg: ExperimentConfig, root: &Path) -> Result<()> {
    Pipeline::open(cfg, root)?.verbose(true).generate()
}

fn execute(mut p: Pipeline, with_stage2: bool) -> Result<RunSummary> {
    let mut out = RunSummary::default();
    let seeds = p.cfg.seeds.clone();
    let verified: Vec<u64> = p.cfg.verified_seeds().to_vec();
    let strategies = p.cfg.strategies.clone();
    for seed in seeds {
        p.stage1(seed)?;
        out.stage1_runs += 1;
        if verified.contains(&seed) && !p.verify(seed)? {
            out.verification_failures += 1;
        }
        if with_stage2 {
            for s in &strategies {
                p.stage2(seed, s)?;
                out.stage2_runs += 1;
            }
        }
    }
    Ok(out)
}

/// Stage one per seed, verification for the leading seeds, stage two per
/// (seed, strategy).
pub fn cmd_run(cfg: ExperimentConfig, root: &Path, verbose: bool) -> Result<RunSummary> {
    execute(Pipeline::open(cfg, root)?.verbose(verbose), true)
}

/// Stage one and verification only.
pub fn cmd_verify(mut cfg: ExperimentConfig, root: &Path, verbose: bool) -> Result<RunSummary> {
    cfg.verify_seeds = cfg.verify_seeds.max(1);
    execute(Pipeline::open(cfg, root)?.verbose(verbose), false)
}
