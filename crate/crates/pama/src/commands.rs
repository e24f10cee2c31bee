//! Implementations of the `pama` subcommands, callable without a process.

use std::path::{Path, PathBuf};
use std::time::Instant;

use pama_core::analysis::{stationarity_residual, ParetoReport};
use pama_core::autodiff::PolicyBundle;
use pama_core::envs::rollout;
use pama_core::simplex::solve_closed_form;
use pama_core::trainers::{noon_loss_gradients, theory_check_train, SmoothLoss, Trainer};
use serde::Serialize;

use crate::bench::{complexity_bench, write_bench_csv, BenchOptions};
use crate::checkpoint::Checkpoint;
use crate::config::{Mode, RunConfig};
use crate::error::{CliError, Result};
use crate::metrics::{
    rl_header, rl_row, theory_header, theory_row, trailing_mean, MetricsWriter, RunStatus, Summary,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Steps averaged for the trailing reward in `summary.json`.
pub const TRAILING_WINDOW: usize = 200;

/// Minimum number of response tokens in the frozen batch used by `analyze`.
pub const ANALYZE_TOKENS: usize = 4096;

fn config_error(path: &Path, e: pama_core::Error) -> CliError {
    CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Paths of the artifacts written by a successful `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub checkpoint: PathBuf,
}

impl RunArtifacts {
    fn in_dir(dir: PathBuf) -> Self {
        Self {
            metrics: dir.join(METRICS_FILE),
            summary: dir.join(SUMMARY_FILE),
            checkpoint: dir.join(CHECKPOINT_FILE),
            dir,
        }
    }
}

pub fn train(config_path: &Path) -> Result<RunArtifacts> {
    let cfg = RunConfig::load(config_path)?;
    train_config(&cfg, config_path)
}

/// Runs a parsed config. On a numeric failure the metrics gathered so far and
/// an `aborted` summary are still written before the error is returned.
pub fn train_config(cfg: &RunConfig, config_path: &Path) -> Result<RunArtifacts> {
    let out = RunArtifacts::in_dir(cfg.resolved_output_dir());
    std::fs::create_dir_all(&out.dir).map_err(|e| CliError::io(&out.dir, e))?;
    match cfg.mode {
        Mode::Rl => train_rl(cfg, config_path, &out)?,
        Mode::Theory => train_theory(cfg, config_path, &out)?,
    }
    Ok(out)
}

fn train_rl(cfg: &RunConfig, config_path: &Path, out: &RunArtifacts) -> Result<()> {
    let tc = cfg.trainer_config().map_err(|e| config_error(config_path, e))?;
    let env = cfg.environment().map_err(|e| config_error(config_path, e))?;
    let mut bundle =
        PolicyBundle::new(cfg.architecture(), tc.seed, cfg.init()).map_err(|e| config_error(config_path, e))?;
    bundle.stop_value_gradient = cfg.trainer.stop_value_gradient;
    let track = tc.track_stationarity;
    let n = tc.n_objectives;
    let steps = tc.total_steps;
    let mut trainer = Trainer::new(tc, env, bundle).map_err(|e| config_error(config_path, e))?;

    let start = Instant::now();
    let mut metrics = MetricsWriter::create(&out.metrics, &rl_header(n, track), cfg.flush_every)?;
    let mut rewards: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut failure = None;
    for _ in 0..steps {
        match trainer.step() {
            Ok(report) => {
                metrics.write_row(&rl_row(&report, track))?;
                rewards.push(report.reward_mean);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    metrics.flush()?;

    let summary = Summary {
        status: if failure.is_some() {
            RunStatus::Aborted
        } else {
            RunStatus::Completed
        },
        error: failure.as_ref().map(|e| e.to_string()),
        steps_completed: rewards.len(),
        wall_time_s: start.elapsed().as_secs_f64(),
        final_values: rewards.last().cloned().unwrap_or_default(),
        trailing_reward_mean: Some(trailing_mean(&rewards, TRAILING_WINDOW)),
        trailing_window: Some(TRAILING_WINDOW.min(rewards.len())),
        final_theta: None,
        final_residual: None,
        config: cfg.clone(),
    };
    summary.write(&out.summary)?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Checkpoint::Policy(trainer.into_bundle()).save(&out.checkpoint)
}

fn train_theory(cfg: &RunConfig, config_path: &Path, out: &RunArtifacts) -> Result<()> {
    let losses = cfg.theory_losses().map_err(|e| config_error(config_path, e))?;
    let tcfg = cfg.theory_config().map_err(|e| config_error(config_path, e))?;
    let theta0 = &cfg.theory.as_ref().expect("validated").theta0;
    let dyn_losses: Vec<&dyn SmoothLoss> = losses.iter().map(|l| l as &dyn SmoothLoss).collect();

    let start = Instant::now();
    let mut metrics = MetricsWriter::create(&out.metrics, &theory_header(theta0.len(), losses.len()), cfg.flush_every)?;
    let result = theory_check_train(&dyn_losses, theta0, tcfg);
    let records = match &result {
        Ok(r) => r.as_slice(),
        Err(_) => &[],
    };
    for r in records {
        metrics.write_row(&theory_row(r))?;
    }
    metrics.flush()?;
    let last = records.last();
    let summary = Summary {
        status: if result.is_ok() {
            RunStatus::Completed
        } else {
            RunStatus::Aborted
        },
        error: result.as_ref().err().map(|e| e.to_string()),
        steps_completed: records.len().saturating_sub(1),
        wall_time_s: start.elapsed().as_secs_f64(),
        final_values: last.map(|r| r.losses.clone()).unwrap_or_default(),
        trailing_reward_mean: None,
        trailing_window: None,
        final_theta: last.map(|r| r.theta.clone()),
        final_residual: last.map(|r| r.residual),
        config: cfg.clone(),
    };
    summary.write(&out.summary)?;
    let records = result?;
    let theta = records.last().expect("at least the initial record").theta.clone();
    Checkpoint::Theory { theta }.save(&out.checkpoint)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveOutput {
    pub s_star: f64,
    pub weights: Vec<f64>,
}

pub fn solve(values: &[f64]) -> Result<SolveOutput> {
    if values.is_empty() {
        return Err(CliError::Usage("solve needs at least one value (-a)".into()));
    }
    let sol = solve_closed_form(values)?;
    Ok(SolveOutput {
        // normalise -0.0 so the printed JSON reads 0.0
        s_star: sol.s_star + 0.0,
        weights: sol.weights.into_vec(),
    })
}

pub fn bench(opts: &BenchOptions, out_path: &Path) -> Result<usize> {
    let records = complexity_bench(opts)?;
    let file = std::fs::File::create(out_path).map_err(|e| CliError::io(out_path, e))?;
    write_bench_csv(std::io::BufWriter::new(file), &records)?;
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalyzeOutput {
    pub residual: f64,
    pub weights: Vec<f64>,
    pub gradient_norms: Vec<f64>,
    pub converged: bool,
    /// Tokens in the frozen evaluation batch (RL checkpoints only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens: Option<usize>,
}

impl AnalyzeOutput {
    fn new(r: ParetoReport, tokens: Option<usize>) -> Self {
        Self {
            residual: r.residual,
            weights: r.weights,
            gradient_norms: r.gradient_norms,
            converged: r.converged,
            tokens,
        }
    }
}

/// Stationarity residual of the objectives at a stored checkpoint.
pub fn analyze(checkpoint_path: &Path, config_path: &Path) -> Result<AnalyzeOutput> {
    let cfg = RunConfig::load(config_path)?;
    let ck = Checkpoint::load(checkpoint_path)?;
    let mismatch = |message: String| CliError::Checkpoint {
        path: checkpoint_path.to_path_buf(),
        message,
    };
    match (ck, cfg.mode) {
        (Checkpoint::Policy(bundle), Mode::Rl) => {
            if *bundle.arch() != cfg.architecture() {
                return Err(mismatch(format!(
                    "architecture {:?} does not match the config's {:?}",
                    bundle.arch(),
                    cfg.architecture()
                )));
            }
            let tc = cfg.trainer_config().map_err(|e| config_error(config_path, e))?;
            let env = cfg.environment().map_err(|e| config_error(config_path, e))?;
            let seed = tc.seed ^ 0x5eed_a11a_11e5_0000;
            let mut size = tc.batch_size.max(1);
            let batch = loop {
                let b = rollout(&bundle, &env, size, seed)?;
                if b.len() >= ANALYZE_TOKENS {
                    break b;
                }
                size *= 2;
            };
            let grads = noon_loss_gradients(&bundle, &batch, tc.kl, tc.gae, tc.clip)?;
            Ok(AnalyzeOutput::new(stationarity_residual(&grads)?, Some(batch.len())))
        }
        (Checkpoint::Theory { theta }, Mode::Theory) => {
            let losses = cfg.theory_losses().map_err(|e| config_error(config_path, e))?;
            if let Some(l) = losses.iter().find(|l| l.dim() != theta.len()) {
                return Err(mismatch(format!(
                    "theta has {} entries but the losses take {}",
                    theta.len(),
                    l.dim()
                )));
            }
            let grads: Vec<Vec<f64>> = losses.iter().map(|l| l.gradient(&theta)).collect();
            Ok(AnalyzeOutput::new(stationarity_residual(&grads)?, None))
        }
        (Checkpoint::Policy(_), Mode::Theory) => Err(mismatch("policy checkpoint with a theory config".into())),
        (Checkpoint::Theory { .. }, Mode::Rl) => Err(mismatch("theory checkpoint with an RL config".into())),
    }
}

/// Documented starting configs for `pama example-config`.
pub fn example_config(theory: bool) -> String {
    let cfg = if theory {
        RunConfig::two_quadratics()
    } else {
        RunConfig::default()
    };
    cfg.to_toml()
}
