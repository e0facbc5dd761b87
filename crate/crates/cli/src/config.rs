//! Run configuration: defaults, then a JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vflow_core::bench::{Method, PipelineConfig, RosenbrockConfig, RosenbrockMethod};
use vflow_core::forward::PdeKind;
use vflow_core::{Error, Result};

/// Everything a command needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub problem: PdeKind,
    /// KL modes inferred.
    pub d: usize,
    /// Relative noise level.
    pub delta: f64,
    pub method: Method,
    pub rosenbrock_method: RosenbrockMethod,
    /// Master seed; every component derives its own stream from it.
    pub seed: u64,
    /// Repeats per cell for `metrics`.
    pub repeats: usize,
    /// Noise levels swept by `metrics`.
    pub deltas: Vec<f64>,
    /// Methods swept by `metrics`.
    pub methods: Vec<Method>,
    pub out_dir: PathBuf,
    pub paper_scale: bool,
    /// Pre-trained surrogate (file or `pretrain` output directory).
    pub checkpoint: Option<PathBuf>,
    pub pretrain_inline: bool,
    /// Marginal dump of a reference MCMC run, for mode coverage.
    pub reference: Option<PathBuf>,
    pub pipeline: PipelineConfig,
    pub rosenbrock: RosenbrockConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_scale(false)
    }
}

impl RunConfig {
    pub fn for_scale(paper_scale: bool) -> Self {
        Self {
            problem: PdeKind::Darcy1d,
            d: 32,
            delta: 0.01,
            method: Method::Ours,
            rosenbrock_method: RosenbrockMethod::Vf,
            seed: 0,
            repeats: 3,
            deltas: vec![0.01, 0.05, 0.1],
            methods: Method::ALL.to_vec(),
            out_dir: PathBuf::from("runs"),
            paper_scale,
            checkpoint: None,
            pretrain_inline: false,
            reference: None,
            pipeline: if paper_scale { PipelineConfig::default() } else { PipelineConfig::desk() },
            rosenbrock: if paper_scale { RosenbrockConfig::default() } else { RosenbrockConfig::desk() },
        }
    }

    /// Scale defaults overlaid with `file`; `scale` overrides the file's own flag.
    pub fn layered(file: Option<&Path>, scale: Option<bool>) -> Result<Self> {
        let overlay = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str::<Value>(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        if !overlay.is_object() {
            return Err(Error::Config("config file must hold a JSON object".into()));
        }
        let paper = scale.or_else(|| overlay.get("paper_scale").and_then(Value::as_bool)).unwrap_or(false);
        let mut base = serde_json::to_value(Self::for_scale(paper)).map_err(|e| Error::Format(e.to_string()))?;
        merge(&mut base, overlay);
        base["paper_scale"] = Value::Bool(paper);
        Self::from_value(base)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        if !(self.delta > 0.0) || self.deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::Config("noise levels must be positive".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be positive".into()));
        }
        if self.rosenbrock.samples == 0 {
            return Err(Error::Config("rosenbrock.samples must be positive".into()));
        }
        self.pipeline.adaptive.validate()
    }
}

/// Recursive object merge; non-object values replace.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}
