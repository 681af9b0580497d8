//! `sheaf-sim` command line: `run`, `sweep` and `verify`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::runner::{self, AggregateRow, RunOptions};
use crate::trainer::Algorithm;
use crate::verify::{self, Fault, Level};

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sheaf-sim", version, about = "Sheaf-coupled decentralized multimodal federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write runlog.csv / summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dotted override, e.g. `train.rounds=5` (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run a configuration for several seeds (and optionally algorithms).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        /// Comma-separated algorithms; defaults to the configured one.
        #[arg(long, value_delimiter = ',')]
        algorithms: Vec<Algorithm>,
    },
    /// Run the property suites.
    Verify {
        #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
        level: LevelArg,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LevelArg {
    Fast,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FaultArg {
    Mixing,
}

impl clap::ValueEnum for Algorithm {
    fn value_variants<'a>() -> &'a [Self] {
        &[Algorithm::SheafDmfl, Algorithm::SheafDmflAtt, Algorithm::Local, Algorithm::Dsgd]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

/// Exit code for an error raised outside training.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_CONFIG
    }
}

fn load(config: &Path, set: &[String], out: Option<&PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config, set)?;
    if let Some(o) = out {
        cfg.output.dir = o.clone();
    }
    Ok(cfg)
}

fn cmd_run(config: &Path, set: &[String], out: Option<&PathBuf>, resume: bool) -> i32 {
    let cfg = match load(config, set, out) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    out!("config hash {}", cfg.hash());
    let opts = RunOptions { out: Some(cfg.output.dir.clone()), resume, progress: true };
    match runner::run_experiment(&cfg, &opts) {
        Ok(outcome) => {
            let s = &outcome.summary;
            for (g, a) in s.group_labels.iter().zip(&s.final_test_acc) {
                out!("{g:>8}  test acc {a:.4}");
            }
            if let Some(t) = &s.theorem {
                out!(
                    "bound: lhs {:.6e}  margin {}  margin (N-scaled) {}",
                    t.lhs,
                    t.margin.map_or("n/a".into(), |m| format!("{m:.6e}")),
                    t.margin_scaled.map_or("n/a".into(), |m| format!("{m:.6e}"))
                );
            }
            out!("wrote {}", cfg.output.dir.display());
            match outcome.error {
                Some(e) => {
                    eprintln!("error after {} rounds: {e}", s.rounds_completed);
                    exit_code(&e).max(EXIT_NUMERIC)
                }
                None => EXIT_OK,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["algorithm", "group", "n_seeds", "mean_test_acc", "sd_test_acc"])?;
    for r in rows {
        w.write_record([
            r.algorithm.name().to_string(),
            r.group.clone(),
            r.n_seeds.to_string(),
            crate::metrics::fmt_f64(r.mean),
            crate::metrics::fmt_f64(r.sd),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_sweep(config: &Path, set: &[String], out: Option<&PathBuf>, seeds: &[u64], algorithms: &[Algorithm]) -> i32 {
    let base = match load(config, set, out) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let algos = if algorithms.is_empty() { vec![base.train.algorithm] } else { algorithms.to_vec() };
    let mut aggregate = Vec::new();
    let mut failed = 0;
    for &alg in &algos {
        let mut finals = Vec::new();
        let mut labels = Vec::new();
        for &seed in seeds {
            let mut cfg = base.with_seed(seed);
            cfg.train.algorithm = alg;
            cfg.model.fusion = None;
            if let Err(e) = cfg.validate() {
                eprintln!("error: {e}");
                return exit_code(&e);
            }
            let dir = base.output.dir.join(alg.name()).join(format!("seed_{seed}"));
            let opts = RunOptions { out: Some(dir.clone()), resume: false, progress: false };
            match runner::run_experiment(&cfg, &opts) {
                Ok(o) if o.error.is_none() => {
                    out!("{} seed {seed}: {:?}", alg.name(), o.summary.final_test_acc);
                    labels = o.summary.group_labels.clone();
                    finals.push(o.summary.final_test_acc.clone());
                }
                Ok(o) => {
                    eprintln!("{} seed {seed} failed: {}", alg.name(), o.error.expect("error set"));
                    failed += 1;
                }
                Err(e) => {
                    eprintln!("{} seed {seed} failed: {e}", alg.name());
                    failed += 1;
                }
            }
        }
        if !finals.is_empty() {
            aggregate.extend(runner::aggregate(alg, &labels, &finals));
        }
    }
    if let Err(e) = fs::create_dir_all(&base.output.dir)
        .map_err(Error::from)
        .and_then(|_| write_aggregate(&base.output.dir.join("aggregate.csv"), &aggregate))
    {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    for r in &aggregate {
        out!("{:>15} {:>8}  {:.4} ± {:.4}  (n={})", r.algorithm.name(), r.group, r.mean, r.sd, r.n_seeds);
    }
    if failed > 0 {
        EXIT_NUMERIC
    } else {
        EXIT_OK
    }
}

fn cmd_verify(level: LevelArg, fault: Option<FaultArg>) -> i32 {
    let level = match level {
        LevelArg::Fast => Level::Fast,
        LevelArg::Full => Level::Full,
    };
    let fault = fault.map(|f| match f {
        FaultArg::Mixing => Fault::Mixing,
    });
    let results = verify::run_suite(level, fault);
    let mut ok = true;
    for r in &results {
        out!("{r}");
        ok &= r.passed;
    }
    if ok {
        out!("all {} properties passed", results.len());
        EXIT_OK
    } else {
        EXIT_VERIFY
    }
}

/// Configures the worker pool from `SHEAF_SIM_THREADS`.
pub fn init_threads() {
    if let Some(n) = std::env::var("SHEAF_SIM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

pub fn main_with(cli: Cli) -> i32 {
    init_threads();
    match cli.command {
        Command::Run { config, set, out, resume } => cmd_run(&config, &set, out.as_ref(), resume),
        Command::Sweep { config, set, out, seeds, algorithms } => {
            cmd_sweep(&config, &set, out.as_ref(), &seeds, &algorithms)
        }
        Command::Verify { level, inject_fault } => cmd_verify(level, inject_fault),
    }
}
