//! Runs one configured experiment end to end: builds the federation, trains,
//! writes `runlog.csv`, `timing.csv`, `summary.json` and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{self, RunLog, TheoremCheck};
use crate::trainer::{self, Algorithm, Federation, FederationState, StepSizes, TheoryConstants, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

/// Everything needed to continue a run bitwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub state: FederationState,
    pub steps: StepSizes,
    pub theory: TheoryConstants,
    pub log: RunLog,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let c: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", c.version)));
        }
        Ok(c)
    }
}

/// Machine-readable results of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub algorithm: Algorithm,
    pub rounds_requested: usize,
    pub rounds_completed: usize,
    pub group_labels: Vec<String>,
    pub final_train_acc: Vec<f64>,
    pub final_test_acc: Vec<f64>,
    pub client_test_acc: Vec<Vec<f64>>,
    pub steps: StepSizes,
    pub theory: TheoryConstants,
    pub lambda: f64,
    pub psi_initial: Option<f64>,
    pub psi_final: Option<f64>,
    pub max_psi_increase: Option<f64>,
    pub lemma1_max_error: Option<f64>,
    pub lemma2_min_residual: Option<f64>,
    pub lemma2_min_residual_avg: Option<f64>,
    pub theorem: Option<TheoremCheck>,
    /// Whether every head stayed within the monitored norm bound.
    pub head_bound_respected: bool,
    pub graph_connected: bool,
    pub comm_total: u64,
    pub error: Option<String>,
}

/// Result of [`run_experiment`]. A numeric failure during training leaves
/// `error` set and the rows completed so far in `log`.
#[derive(Debug)]
pub struct RunOutcome {
    pub log: RunLog,
    pub state: FederationState,
    pub summary: Summary,
    pub error: Option<Error>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Output directory; `None` keeps everything in memory.
    pub out: Option<PathBuf>,
    pub resume: bool,
    pub progress: bool,
}

fn summarize(
    cfg: &ExperimentConfig,
    trainer: &Trainer<'_>,
    fed: &Federation,
    state: &FederationState,
    log: &RunLog,
    error: Option<&Error>,
) -> Result<Summary> {
    let acc = metrics::evaluate(fed, state)?;
    let rows = &log.rows;
    Ok(Summary {
        config_hash: cfg.hash(),
        algorithm: cfg.train.algorithm,
        rounds_requested: cfg.train.rounds,
        rounds_completed: rows.len(),
        group_labels: log.group_labels.clone(),
        final_train_acc: acc.group_train,
        final_test_acc: acc.group_test,
        client_test_acc: acc.client_test,
        steps: trainer.steps.clone(),
        theory: trainer.theory.clone(),
        lambda: trainer.cfg.lambda,
        psi_initial: rows.first().map(|r| r.psi),
        psi_final: rows.last().map(|r| r.psi_next),
        max_psi_increase: (!rows.is_empty()).then(|| log.max_psi_increase()),
        lemma1_max_error: log.max_lemma1_error(),
        lemma2_min_residual: log.min_lemma2_residual(),
        lemma2_min_residual_avg: rows.iter().filter_map(|r| r.lemma2_residual_avg).reduce(f64::min),
        theorem: metrics::theorem1_check(trainer, log),
        head_bound_respected: rows.iter().all(|r| r.max_head_norm <= trainer.theory.head_bound),
        graph_connected: fed.graph.is_connected(),
        comm_total: log.comm_total(),
        error: error.map(|e| e.to_string()),
    })
}

fn write_outputs(dir: &Path, log: &RunLog, summary: &Summary) -> Result<()> {
    log.write_csv(&dir.join("runlog.csv"))?;
    log.write_timing(&dir.join("timing.csv"))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

/// Builds everything from `cfg` and trains. Configuration and graph errors
/// are returned as `Err` before any training; failures during training are
/// reported in [`RunOutcome::error`] after flushing the partial log.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let fed = cfg.federation()?;
    let hash = cfg.hash();
    if let Some(dir) = &opts.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg.to_value())?)?;
    }
    let ckpt_path = opts.out.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let tcfg = cfg.train_config();

    let resumed = match (&ckpt_path, opts.resume) {
        (Some(p), true) if p.exists() => {
            let c = Checkpoint::load(p)?;
            if c.config_hash != hash {
                return Err(Error::Checkpoint(format!(
                    "checkpoint belongs to config {} but this config hashes to {hash}",
                    c.config_hash
                )));
            }
            Some(c)
        }
        _ => None,
    };

    let (trainer, mut state, mut log) = match resumed {
        Some(c) => {
            let mut state = c.state;
            let t = Trainer::with_steps(&fed, tcfg, c.steps, c.theory, &mut state)?;
            (t, state, c.log)
        }
        None => {
            let mut state =
                trainer::initial_state(&fed, tcfg.algorithm, cfg.fusion(), &cfg.sheaf_params(), cfg.model_seed())?;
            let t = Trainer::new(&fed, tcfg, &mut state)?;
            let log = RunLog::new(&fed, t.cfg.algorithm, &hash);
            (t, state, log)
        }
    };

    let every = cfg.output.checkpoint_every;
    let progress_every = if opts.progress { cfg.output.log_every } else { 0 };
    let hook = |s: &FederationState, l: &RunLog| -> Result<()> {
        if progress_every > 0 && s.round.is_multiple_of(progress_every) {
            if let Some(r) = l.rows.last() {
                let acc: Vec<String> = r.test_acc.iter().map(|a| format!("{a:.3}")).collect();
                eprintln!("round {:>5}  psi {:.6}  test acc [{}]", s.round, r.psi_next, acc.join(", "));
            }
        }
        if let Some(p) = &ckpt_path {
            if every > 0 && s.round.is_multiple_of(every) && s.round < trainer.cfg.rounds {
                Checkpoint {
                    version: CHECKPOINT_VERSION,
                    config_hash: hash.clone(),
                    state: s.clone(),
                    steps: trainer.steps.clone(),
                    theory: trainer.theory.clone(),
                    log: l.clone(),
                }
                .save(p)?;
            }
        }
        Ok(())
    };

    let error = trainer.run(&mut state, &mut log, hook).err();
    let summary = summarize(cfg, &trainer, &fed, &state, &log, error.as_ref())?;
    if let Some(dir) = &opts.out {
        write_outputs(dir, &log, &summary)?;
        if error.is_none() {
            Checkpoint {
                version: CHECKPOINT_VERSION,
                config_hash: hash.clone(),
                state: state.clone(),
                steps: trainer.steps.clone(),
                theory: trainer.theory.clone(),
                log: log.clone(),
            }
            .save(&dir.join(CHECKPOINT_FILE))?;
        }
    }
    Ok(RunOutcome { log, state, summary, error })
}

/// Per-group mean and standard deviation of final test accuracy over seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub algorithm: Algorithm,
    pub group: String,
    pub n_seeds: usize,
    pub mean: f64,
    pub sd: f64,
}

pub fn aggregate(algorithm: Algorithm, labels: &[String], finals: &[Vec<f64>]) -> Vec<AggregateRow> {
    labels
        .iter()
        .enumerate()
        .map(|(g, label)| {
            let xs: Vec<f64> = finals.iter().map(|f| f[g]).collect();
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            AggregateRow { algorithm, group: label.clone(), n_seeds: xs.len(), mean, sd: var.sqrt() }
        })
        .collect()
}
