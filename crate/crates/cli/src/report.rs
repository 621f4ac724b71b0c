//! Aggregates per-seed metrics into `report.json` and `report.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use breadcrumbs::strategy_registry;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::pipeline::{embedded_hash, strategy_stage, verify_stage, Manifest, Pipeline};

pub const METRICS: [&str; 4] = ["overall", "many", "medium", "few"];

/// Fixed four-decimal JSON number, so reports compare byte for byte.
pub fn num(x: f64) -> Value {
    serde_json::from_str(&format!("{x:.4}")).expect("finite number")
}

/// Mean and sample standard deviation; no deviation for a single value.
pub fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

fn summary(xs: &[f64]) -> Value {
    let (mean, std) = mean_std(xs);
    let mut v = json!({ "mean": num(mean) });
    if let Some(s) = std {
        v["std"] = num(s);
    }
    v
}

fn read_json(root: &Path, rel: &str, hash: &str) -> Result<Value> {
    let path = root.join(rel);
    let v: Value = serde_json::from_str(&fs::read_to_string(&path).with_context(|| format!("reading {rel}"))?)?;
    match v["config_hash"].as_str() {
        Some(h) if h == hash => Ok(v),
        other => bail!("{rel} carries config hash {}, expected {hash}; refusing to mix runs", other.unwrap_or("none")),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyRow {
    pub strategy: String,
    /// Per metric, the values over seeds (absent groups are skipped).
    pub metrics: BTreeMap<&'static str, Vec<f64>>,
    pub hard_examples: Vec<f64>,
}

/// Builds the report from a finished output root.
pub fn build_report(cfg: &ExperimentConfig, root: &Path) -> Result<(Value, Vec<StrategyRow>)> {
    let manifest = Manifest::load(root)?.with_context(|| format!("no {} under {}", crate::pipeline::MANIFEST, root.display()))?;
    let hash = cfg.hash_hex();
    if manifest.config_hash != hash {
        bail!("{} holds config hash {}, the config hashes to {hash}", root.display(), manifest.config_hash);
    }
    let pipeline = Pipeline::open(cfg.clone(), root)?;

    let order = strategy_registry();
    let strategies: Vec<&str> = order.names().iter().copied().filter(|n| cfg.strategies.iter().any(|s| s == n)).collect();
    for rec in manifest.stages.values() {
        for f in &rec.files {
            let path = root.join(f);
            if path.exists() && embedded_hash(&path).as_deref() != Some(hash.as_str()) {
                bail!("{f} does not carry config hash {hash}; refusing to mix runs");
            }
        }
    }

    let mut missing = Vec::new();
    for &seed in &cfg.seeds {
        for s in &strategies {
            let id = strategy_stage(seed, s);
            if !pipeline.is_complete(&id) {
                missing.push(id);
            }
        }
    }
    for &seed in cfg.verified_seeds() {
        let id = verify_stage(seed);
        if !pipeline.is_complete(&id) {
            missing.push(id);
        }
    }
    if !missing.is_empty() {
        bail!("missing stages: {}", missing.join(", "));
    }

    let mut rows = Vec::new();
    let mut strategy_json = Vec::new();
    for s in &strategies {
        let mut row = StrategyRow { strategy: s.to_string(), metrics: BTreeMap::new(), hard_examples: Vec::new() };
        for &seed in &cfg.seeds {
            let m = read_json(root, &format!("seed-{seed}/{s}/metrics.json"), &hash)?;
            for key in METRICS {
                if let Some(x) = m[key].as_f64() {
                    row.metrics.entry(key).or_default().push(x);
                }
            }
            row.hard_examples.push(m["hard_examples"]["mean"].as_f64().context("hard example mean")?);
        }
        let mut v = json!({ "strategy": s, "seeds": cfg.seeds.len() });
        for (key, xs) in &row.metrics {
            v[*key] = summary(xs);
        }
        v["hard_examples_few"] = summary(&row.hard_examples);
        strategy_json.push(v);
        rows.push(row);
    }

    let mut verification = Vec::new();
    for &seed in cfg.verified_seeds() {
        let v = read_json(root, &format!("seed-{seed}/verify.json"), &hash)?;
        let lemma = &v["lemma"];
        let theorem = &v["theorem"];
        verification.push(json!({
            "seed": seed,
            "passed": v["passed"],
            "alignment_max_mean_error": v["alignment"]["max_mean_error"].as_f64().map(|x| Value::String(format!("{x:.3e}"))),
            "trail_check": v["trails"]["passed"],
            "lemma_reading": lemma["reading"],
            "lemma_checked": lemma["checked"],
            "lemma_satisfied": lemma["satisfied"],
            "lemma_rate": num(lemma["rate"].as_f64().unwrap_or(0.0)),
            "lemma_uncertified": lemma["uncertified_pairs"],
            "theorem_holds": theorem["holds"],
            "theorem_skipped": theorem["skipped"],
            "theorem_failures": theorem["failures"].as_array().map_or(0, Vec::len),
        }));
    }

    let report = json!({
        "config_hash": hash,
        "seeds": cfg.seeds,
        "strategies": strategy_json,
        "verification": verification,
    });
    Ok((report, rows))
}

fn cell(xs: Option<&Vec<f64>>) -> String {
    match xs {
        None => "-".into(),
        Some(xs) => match mean_std(xs) {
            (m, Some(s)) => format!("{m:.4} ± {s:.4}"),
            (m, None) => format!("{m:.4}"),
        },
    }
}

pub fn render_table(hash: &str, rows: &[StrategyRow]) -> String {
    let mut out = format!("# config_hash={hash}\n");
    let header = ["strategy", "overall", "many", "medium", "few", "hard(few)"];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut line = vec![r.strategy.clone()];
            line.extend(METRICS.iter().map(|k| cell(r.metrics.get(k))));
            line.push(cell(Some(&r.hard_examples)));
            line
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| body.iter().map(|l| l[i].chars().count()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let fmt_line = |cells: &[&str]| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
    };
    let _ = writeln!(out, "{}", fmt_line(&header));
    for l in &body {
        let refs: Vec<&str> = l.iter().map(String::as_str).collect();
        let _ = writeln!(out, "{}", fmt_line(&refs));
    }
    out
}

/// Writes `report.json` and `report.txt` under `root`.
pub fn cmd_report(cfg: &ExperimentConfig, root: &Path) -> Result<Value> {
    let (report, rows) = build_report(cfg, root)?;
    fs::write(root.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(root.join("report.txt"), render_table(&cfg.hash_hex(), &rows))?;
    Ok(report)
}
