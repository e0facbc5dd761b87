//! The five subcommands and their artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vflow_core::adaptive::stage_log_csv;
use vflow_core::bench::{
    kind_name, leading_pair, mode_centers, mode_coverage, pretrain_surrogate, report_csv, run_matrix, run_method,
    run_rosenbrock, Cell, RosenbrockMethod,
};
use vflow_core::forward::Problem;
use vflow_core::rng;
use vflow_core::surrogate::{FieldMap, FnoModel, Surrogate};
use vflow_core::{Error, Result};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
/// Radius around each MCMC mode centre counted as coverage.
pub const COVERAGE_RADIUS: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Pretrain,
    Invert,
    Rosenbrock,
    Metrics,
}

/// What a run leaves behind: its resolved config, artifact names and a
/// small deterministic summary. Wall-clock figures live in `timings.json`.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: Command,
    pub version: String,
    pub config: RunConfig,
    pub artifacts: Vec<String>,
    pub summary: Value,
}

struct Out {
    dir: PathBuf,
    artifacts: Vec<String>,
}

impl Out {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), artifacts: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
        fs::write(self.dir.join(name), bytes)?;
        self.artifacts.push(name.to_string());
        Ok(())
    }

    fn finish(self, command: Command, cfg: &RunConfig, summary: Value, timings: Value) -> Result<()> {
        fs::write(self.dir.join("timings.json"), pretty(&timings)?)?;
        let m = Manifest { command, version: env!("CARGO_PKG_VERSION").into(), config: cfg.clone(), artifacts: self.artifacts, summary };
        fs::write(self.dir.join(MANIFEST), pretty(&m)?)?;
        Ok(())
    }
}

fn pretty<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Format(e.to_string()))
}

fn num(v: f64) -> String {
    format!("{v:.17e}")
}

/// Header `ξ_1,…,ξ_d` and one row per sample.
pub fn samples_csv(samples: &[Vec<f64>], d: usize) -> String {
    let mut s = (1..=d).map(|i| format!("ξ_{i}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for row in samples {
        s.push_str(&row.iter().map(|v| num(*v)).collect::<Vec<_>>().join(","));
        s.push('\n');
    }
    s
}

pub fn run(command: Command, cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = Out::create(&cfg.out_dir)?;
    log::info!("{command:?} -> {}", cfg.out_dir.display());
    match command {
        Command::Pretrain => pretrain(cfg, out),
        Command::Invert => invert(cfg, out),
        Command::Rosenbrock => rosenbrock(cfg, out),
        Command::Metrics => metrics(cfg, out),
    }
}

fn pretrain(cfg: &RunConfig, mut out: Out) -> Result<()> {
    let start = Instant::now();
    let (sur, history) = pretrain_surrogate(cfg.problem, cfg.d, &cfg.pipeline, cfg.seed)?;
    let mut ckpt = Vec::new();
    sur.model.save(&mut ckpt)?;
    out.write(CHECKPOINT, ckpt)?;
    let mut loss = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        loss.push_str(&format!("{},{}\n", e + 1, num(*l)));
    }
    out.write("pretrain_loss.csv", loss)?;
    let summary = json!({
        "dataset_size": cfg.pipeline.pretrain_size,
        "dataset_ids": [0, cfg.pipeline.pretrain_size],
        "grid": cfg.pipeline.grid_for(cfg.problem),
        "final_loss": history.last().copied(),
    });
    out.finish(Command::Pretrain, cfg, summary, json!({ "total_s": start.elapsed().as_secs_f64() }))
}

/// Loads a checkpoint written by `pretrain`, checking that it was trained
/// for the same problem and network.
fn load_surrogate(cfg: &RunConfig, path: &Path) -> Result<Surrogate> {
    let (file, manifest) = if path.is_dir() {
        (path.join(CHECKPOINT), Some(path.join(MANIFEST)))
    } else {
        (path.to_path_buf(), path.parent().map(|p| p.join(MANIFEST)))
    };
    if let Some(m) = manifest.filter(|m| m.exists()) {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(&m)?)
            .map_err(|e| Error::Format(format!("{}: {e}", m.display())))?;
        let c = &m.config;
        if c.problem != cfg.problem
            || c.d != cfg.d
            || c.pipeline.fno_config(c.problem) != cfg.pipeline.fno_config(cfg.problem)
            || c.pipeline.pretrain_size != cfg.pipeline.pretrain_size
        {
            return Err(Error::Config(format!(
                "checkpoint {} was trained for {} d={} with a different surrogate setup",
                file.display(),
                kind_name(c.problem),
                c.d
            )));
        }
    }
    let map = FieldMap::new(cfg.problem, cfg.d, cfg.pipeline.grid_for(cfg.problem))?;
    let mut model = FnoModel::new(&cfg.pipeline.fno_config(cfg.problem), &mut rng::seeded(0))?;
    model.load(fs::File::open(&file)?)?;
    Surrogate::new(model, map)
}

fn surrogate_for(cfg: &RunConfig) -> Result<Option<Surrogate>> {
    if !cfg.method.uses_surrogate() {
        return Ok(None);
    }
    match (&cfg.checkpoint, cfg.pretrain_inline) {
        (Some(p), _) => load_surrogate(cfg, p).map(Some),
        (None, true) => Ok(Some(pretrain_surrogate(cfg.problem, cfg.d, &cfg.pipeline, cfg.seed)?.0)),
        (None, false) => Err(Error::Config(format!(
            "method {} needs --checkpoint or --pretrain-inline",
            cfg.method.name()
        ))),
    }
}

fn invert(cfg: &RunConfig, mut out: Out) -> Result<()> {
    let start = Instant::now();
    let problem = Problem::generate(cfg.problem, cfg.d, cfg.delta, cfg.seed)?;
    let sur = surrogate_for(cfg)?;
    let run = run_method(&problem, cfg.method, &cfg.pipeline, sur.as_ref(), 0, cfg.seed)?;
    out.write("stage_log.csv", stage_log_csv(&run.stage_log))?;
    out.write("samples.csv", samples_csv(&run.samples, cfg.d))?;
    out.write("mu_post.csv", samples_csv(std::slice::from_ref(&run.mu_post), cfg.d))?;
    out.write("report.csv", report_csv(std::slice::from_ref(&run.report)))?;
    let r = &run.report;
    if !r.converged {
        log::warn!("stopping criterion not met after {} stages", r.stages_run);
    }
    log::info!("e_I = {:.4}", r.e_i);
    let summary = json!({
        "converged": r.converged,
        "stages_run": r.stages_run,
        "e_I": r.e_i,
        "e_S_final": r.e_s_final,
    });
    let stages: Vec<f64> = run.stage_log.iter().map(|s| s.wallclock_s).collect();
    out.finish(Command::Invert, cfg, summary, json!({ "total_s": start.elapsed().as_secs_f64(), "stages_s": stages }))
}

/// `(ξ₁, ξ₂)` pairs from a marginal dump or a run directory holding one.
pub fn read_marginal(path: &Path) -> Result<Vec<[f64; 2]>> {
    let file = if path.is_dir() { path.join("marginal.csv") } else { path.to_path_buf() };
    let text = fs::read_to_string(&file)?;
    let bad = |line: usize| Error::Format(format!("{}: malformed row {line}", file.display()));
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let mut it = l.split(',').map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => Ok([a, b]),
                _ => Err(bad(i + 1)),
            }
        })
        .collect()
}

fn rosenbrock(cfg: &RunConfig, mut out: Out) -> Result<()> {
    let start = Instant::now();
    let method = cfg.rosenbrock_method;
    let samples = run_rosenbrock(method, &cfg.rosenbrock, cfg.seed)?;
    let pairs = leading_pair(&samples);
    let mut csv = String::from("ξ_1,ξ_2\n");
    for p in &pairs {
        csv.push_str(&format!("{},{}\n", num(p[0]), num(p[1])));
    }
    out.write("marginal.csv", csv)?;
    let centers = match (&cfg.reference, method) {
        (Some(r), _) => Some(mode_centers(&read_marginal(r)?)?),
        (None, RosenbrockMethod::Mcmc) => Some(mode_centers(&pairs)?),
        (None, _) => {
            log::info!("no --reference MCMC dump given; skipping mode coverage");
            None
        }
    };
    let mut summary = json!({ "rows": pairs.len() });
    if let Some(c) = centers {
        let cov = mode_coverage(&pairs, &c, COVERAGE_RADIUS);
        let mut s = String::from("mode,center_1,center_2,fraction\n");
        for k in 0..2 {
            s.push_str(&format!("{},{},{},{}\n", k + 1, num(c[k][0]), num(c[k][1]), num(cov[k])));
        }
        out.write("coverage.csv", s)?;
        log::info!("mode coverage {:.3} / {:.3}", cov[0], cov[1]);
        summary["coverage"] = json!(cov);
        summary["both_modes_covered"] = json!(cov.iter().all(|f| *f > 0.05));
    }
    out.finish(Command::Rosenbrock, cfg, summary, json!({ "total_s": start.elapsed().as_secs_f64() }))
}

fn metrics(cfg: &RunConfig, mut out: Out) -> Result<()> {
    let start = Instant::now();
    let cells: Vec<Cell> = cfg
        .deltas
        .iter()
        .flat_map(|&delta| cfg.methods.iter().map(move |&method| Cell { problem: cfg.problem, d: cfg.d, delta, method }))
        .collect();
    let (reports, failures) = run_matrix(&cells, cfg.repeats, &cfg.pipeline, cfg.seed);
    out.write("report.csv", report_csv(&reports))?;
    for f in &failures {
        log::error!("cell failed: {f}");
    }
    if !failures.is_empty() {
        out.write("failures.txt", failures.join("\n") + "\n")?;
    }
    let summary = json!({ "cells": cells.len(), "rows": reports.len(), "failures": failures.len() });
    out.finish(Command::Metrics, cfg, summary, json!({ "total_s": start.elapsed().as_secs_f64() }))
}

/// Re-runs the manifest's command into `dir` and compares every artifact
/// byte for byte. Returns the names that differ.
pub fn replay(manifest: &Path, dir: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(manifest)?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", manifest.display())))?;
    let original = manifest.parent().unwrap_or(Path::new("."));
    if fs::canonicalize(original).ok() == fs::canonicalize(dir).ok() {
        return Err(Error::Config("replay directory must differ from the original run".into()));
    }
    let mut cfg = m.config.clone();
    cfg.out_dir = dir.to_path_buf();
    run(m.command, &cfg)?;
    let mut differ = Vec::new();
    for name in &m.artifacts {
        let a = fs::read(original.join(name))?;
        let b = fs::read(dir.join(name)).unwrap_or_default();
        if a != b {
            differ.push(name.clone());
        }
    }
    Ok(differ)
}
