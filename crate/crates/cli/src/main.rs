//! `vflow`: adaptive variational-flow inversion from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vflow_core::bench::{parse_kind, Method, RosenbrockMethod};
use vflow_core::{Error, Result};

use vflow_cli::commands::{self, Command};
use vflow_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "vflow", version, about = "Variational-flow Bayesian inversion with adaptive FNO surrogates")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "VFLOW_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the FNO surrogate on prior samples and write a checkpoint.
    Pretrain(RunArgs),
    /// Solve one inverse problem with the chosen method.
    Invert(RunArgs),
    /// Sample the 100-dimensional Rosenbrock posterior.
    Rosenbrock(RunArgs),
    /// Run the method × noise matrix with repeats and write the report table.
    Metrics(RunArgs),
    /// Re-run a manifest and check every artifact byte for byte.
    Replay {
        manifest: PathBuf,
        /// Where the replay writes (default: `<run>/replay`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct RunArgs {
    /// JSON config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    out: Option<PathBuf>,
    /// darcy1d | darcy2d | ns2d
    #[arg(long)]
    problem: Option<String>,
    /// Number of KL coefficients inferred.
    #[arg(long)]
    d: Option<usize>,
    /// Relative observation noise level.
    #[arg(long)]
    delta: Option<f64>,
    /// ours | pcn | uki-fdm | uki-fno | svgd-fno; for `rosenbrock`: vf | vae | mcmc | uki | svgd
    #[arg(long)]
    method: Option<String>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Repeats per cell for `metrics`.
    #[arg(long)]
    repeats: Option<usize>,
    /// Comma-separated noise levels for `metrics`.
    #[arg(long, value_delimiter = ',')]
    deltas: Option<Vec<f64>>,
    /// Comma-separated methods for `metrics`.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Prior-sample pairs used for pre-training.
    #[arg(long)]
    dataset_size: Option<usize>,
    /// Surrogate checkpoint file or `pretrain` output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Pre-train the surrogate inside this run instead of loading one.
    #[arg(long)]
    pretrain_inline: bool,
    /// Reference MCMC marginal dump for Rosenbrock mode coverage.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Stage budget of the adaptive loop.
    #[arg(long)]
    k_max: Option<usize>,
    /// Full budgets from the published setup.
    #[arg(long, conflicts_with = "desk_scale")]
    paper_scale: bool,
    /// Reduced budgets that fit a workstation (default).
    #[arg(long)]
    desk_scale: bool,
}

impl RunArgs {
    fn resolve(self, command: Command) -> Result<RunConfig> {
        let scale = match (self.paper_scale, self.desk_scale) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        };
        let mut c = RunConfig::layered(self.config.as_deref(), scale)?;
        if let Some(v) = self.out {
            c.out_dir = v;
        }
        if let Some(v) = self.problem {
            c.problem = parse_kind(&v)?;
        }
        if let Some(v) = self.d {
            c.d = v;
        }
        if let Some(v) = self.delta {
            c.delta = v;
        }
        if let Some(v) = self.method {
            if command == Command::Rosenbrock {
                c.rosenbrock_method = RosenbrockMethod::parse(&v)?;
            } else {
                c.method = Method::parse(&v)?;
            }
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.repeats {
            c.repeats = v;
        }
        if let Some(v) = self.deltas {
            c.deltas = v;
        }
        if let Some(v) = self.methods {
            c.methods = v.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?;
        }
        if let Some(v) = self.dataset_size {
            c.pipeline.pretrain_size = v;
        }
        if let Some(v) = self.checkpoint {
            c.checkpoint = Some(v);
        }
        c.pretrain_inline |= self.pretrain_inline;
        if let Some(v) = self.reference {
            c.reference = Some(v);
        }
        if let Some(v) = self.k_max {
            c.pipeline.adaptive.k_max = v;
            c.pipeline.svgd_stages = v;
        }
        Ok(c)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Io(_) | Error::Format(_) => 2,
        Error::Shape(_) | Error::Numeric(_) | Error::Solver(_) => 3,
    }
}

fn execute(cmd: Cmd) -> Result<()> {
    let (command, args) = match cmd {
        Cmd::Pretrain(a) => (Command::Pretrain, a),
        Cmd::Invert(a) => (Command::Invert, a),
        Cmd::Rosenbrock(a) => (Command::Rosenbrock, a),
        Cmd::Metrics(a) => (Command::Metrics, a),
        Cmd::Replay { manifest, out } => {
            let dir = out.unwrap_or_else(|| manifest.parent().unwrap_or(std::path::Path::new(".")).join("replay"));
            let differ = commands::replay(&manifest, &dir)?;
            if differ.is_empty() {
                println!("replay identical: {}", dir.display());
                return Ok(());
            }
            return Err(Error::Numeric(format!("replay differs in {}", differ.join(", "))));
        }
    };
    let cfg = args.resolve(command)?;
    commands::run(command, &cfg)?;
    println!("{}", cfg.out_dir.join(commands::MANIFEST).display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} worker threads: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
