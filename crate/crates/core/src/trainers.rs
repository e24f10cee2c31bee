//! Training loops.
//!
//! [`Trainer`] runs PAMA, MORLHF or MGDA-UB on a sequence environment: roll
//! out, shape rewards with the KL penalty, run GAE per objective with its own
//! value head, then take `inner_epochs` optimizer steps on
//! `policy_loss + value_coef · Σ value_loss_i`. Gates and weights are
//! recomputed at the current ratios on every inner epoch.
//!
//! [`theory_check_train`] runs the min-norm update on smooth losses with exact
//! gradients, which is where the descent and convergence guarantees are
//! checked.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::advantage::{gae, noon_clamp, whiten, AdvantageBatch, GaeConfig, RatioClip};
use crate::analysis::stationarity_residual;
use crate::autodiff::{PolicyBundle, Tape};
use crate::envs::{rollout, Environment, RolloutBatch};
use crate::error::{check_finite, check_len, Error, Result};
use crate::math::{exp, sqrt};
use crate::objectives::{
    kl_shape_rewards, mgda_ub_aggregate, morlhf_aggregate, pama_aggregate, Aggregation, Granularity,
    KlConfig,
};
use crate::optim::{Adam, Optimizer, Sgd};
use crate::simplex::{solve_closed_form, solve_min_norm_observed, FwOptions, SimplexWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Pama,
    Morlhf,
    MgdaUb,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Pama => "pama",
            Algorithm::Morlhf => "morlhf",
            Algorithm::MgdaUb => "mgda_ub",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Denominator of the probability ratio `u`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioAnchor {
    /// Log-probs recorded when the batch was sampled.
    Rollout,
    /// The frozen reference policy.
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub n_objectives: usize,
    pub batch_size: usize,
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub clip: RatioClip,
    pub value_clip: f64,
    pub value_coef: f64,
    pub kl: KlConfig,
    pub gae: GaeConfig,
    pub granularity: Granularity,
    pub seed: u64,
    pub total_steps: usize,
    /// Required for MORLHF.
    pub fixed_weights: Option<SimplexWeights>,
    /// Noon advantages instead of raw ones. Defaults: on for PAMA, off otherwise.
    pub use_noon: Option<bool>,
    pub whiten: bool,
    pub ratio_anchor: RatioAnchor,
    /// Report the stationarity residual of the per-objective Noon losses.
    pub track_stationarity: bool,
}

impl TrainerConfig {
    pub fn new(algorithm: Algorithm, n_objectives: usize) -> Self {
        Self {
            algorithm,
            n_objectives,
            batch_size: 128,
            inner_epochs: 4,
            learning_rate: 1e-5,
            optimizer: OptimizerKind::Adam,
            clip: RatioClip::default(),
            value_clip: 0.2,
            value_coef: 0.5,
            kl: KlConfig::default(),
            gae: GaeConfig::default(),
            granularity: Granularity::Token,
            seed: 0,
            total_steps: 100,
            fixed_weights: None,
            use_noon: None,
            whiten: false,
            ratio_anchor: RatioAnchor::Rollout,
            track_stationarity: false,
        }
    }

    pub fn noon_enabled(&self) -> bool {
        self.use_noon.unwrap_or(self.algorithm == Algorithm::Pama)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_objectives == 0 {
            return Err(Error::domain("n_objectives must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::domain("batch_size must be at least 1"));
        }
        if self.inner_epochs == 0 {
            return Err(Error::domain("inner_epochs must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain("learning_rate must be positive"));
        }
        if !(self.value_clip > 0.0 && self.value_clip.is_finite()) {
            return Err(Error::domain("value_clip must be positive"));
        }
        if !(self.value_coef >= 0.0 && self.value_coef.is_finite()) {
            return Err(Error::domain("value_coef must be non-negative"));
        }
        self.clip.validate()?;
        self.kl.validate()?;
        self.gae.validate()?;
        if self.algorithm == Algorithm::Pama && self.use_noon == Some(false) {
            return Err(Error::domain("PAMA requires Noon advantages"));
        }
        match (&self.fixed_weights, self.algorithm) {
            (None, Algorithm::Morlhf) => {
                return Err(Error::domain("algorithm morlhf requires fixed_weights"));
            }
            (Some(w), _) if w.len() != self.n_objectives => {
                return Err(Error::DimensionMismatch {
                    what: "fixed_weights",
                    expected: self.n_objectives,
                    found: w.len(),
                });
            }
            _ => {}
        }
        Ok(())
    }
}

/// Metrics of one outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainStepReport {
    pub step: usize,
    pub reward_mean: Vec<f64>,
    pub reward_std: Vec<f64>,
    pub noon_adv_mean: Vec<f64>,
    pub agg_adv_mean: f64,
    pub weight_mean: Vec<f64>,
    pub kl: f64,
    pub policy_loss: f64,
    pub value_loss: Vec<f64>,
    pub epochs_run: usize,
    pub stationarity_residual: Option<f64>,
}

/// Masked mean of `logp − ref_logp`.
pub fn estimate_kl(logp: &[f64], ref_logp: &[f64], mask: &[bool]) -> Result<f64> {
    check_len("reference log-probs", logp.len(), ref_logp.len())?;
    check_len("kl mask", logp.len(), mask.len())?;
    let mut total = 0.0;
    let mut count = 0usize;
    for t in 0..logp.len() {
        if mask[t] {
            total += logp[t] - ref_logp[t];
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone)]
enum OptState {
    Adam(Adam),
    Sgd(Sgd),
}

impl OptState {
    fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        match self {
            OptState::Adam(a) => a.step(params, grad),
            OptState::Sgd(s) => s.step(params, grad),
        }
    }
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, sqrt(var))
}

/// Per-objective GAE over every episode plus value targets.
pub struct Advantages {
    pub raw: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

/// KL-shapes the batch rewards and runs GAE per objective and episode with a
/// terminal bootstrap of 0.
pub fn compute_advantages(batch: &RolloutBatch, kl: KlConfig, gae_cfg: GaeConfig) -> Result<Advantages> {
    let shaped = kl_shape_rewards(&batch.rewards, &batch.logp, &batch.ref_logp, kl)?;
    let n = batch.n_objectives;
    let t_len = batch.len();
    let mut raw = vec![vec![0.0; t_len]; n];
    let mut returns = vec![vec![0.0; t_len]; n];
    let mut values = Vec::new();
    for e in &batch.episodes {
        let r = e.range();
        for i in 0..n {
            values.clear();
            values.extend_from_slice(&batch.values[i][r.clone()]);
            values.push(0.0);
            let a = gae(&shaped[i][r.clone()], &values, &batch.mask[r.clone()], gae_cfg)?;
            for (k, t) in r.clone().enumerate() {
                raw[i][t] = a[k];
                returns[i][t] = a[k] + batch.values[i][t];
            }
        }
    }
    Ok(Advantages { raw, returns })
}

/// Exact gradients of each objective's Noon loss on a fixed batch, restricted
/// to the policy parameters. Ratios are taken against the batch's own
/// log-probs, so the batch should come from the bundle's current policy.
pub fn noon_loss_gradients(
    bundle: &PolicyBundle,
    batch: &RolloutBatch,
    kl: KlConfig,
    gae_cfg: GaeConfig,
    clip: RatioClip,
) -> Result<Vec<Vec<f64>>> {
    let adv = compute_advantages(batch, kl, gae_cfg)?;
    let noon = noon_clamp(&adv.raw);
    let mut tape = Tape::new(bundle.param_count());
    let graph = bundle.build(&mut tape, &bundle.theta, &batch.contexts);
    let logp_var = tape.gather(graph.log_probs, &batch.actions);
    let policy_len = bundle.layout().policy_len();
    noon.iter()
        .map(|a| {
            let loss = tape.clipped_surrogate(logp_var, &batch.logp, a, clip.epsilon);
            let g = tape.grad(loss)?;
            Ok(g[..policy_len].to_vec())
        })
        .collect()
}

/// Owns the mutable policy bundle for one training run.
pub struct Trainer {
    config: TrainerConfig,
    env: Environment,
    bundle: PolicyBundle,
    optimizer: OptState,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainerConfig, env: Environment, bundle: PolicyBundle) -> Result<Self> {
        config.validate()?;
        if env.n_objectives() != config.n_objectives {
            return Err(Error::domain(format!(
                "environment has {} reward channels but the trainer expects {}",
                env.n_objectives(),
                config.n_objectives
            )));
        }
        if bundle.arch().n_value_heads != config.n_objectives {
            return Err(Error::domain(format!(
                "bundle has {} value heads but the trainer expects {}",
                bundle.arch().n_value_heads,
                config.n_objectives
            )));
        }
        if bundle.arch().vocab_size != env.spec.vocab_size {
            return Err(Error::domain("bundle vocabulary does not match the environment"));
        }
        let optimizer = match config.optimizer {
            OptimizerKind::Adam => OptState::Adam(Adam::new(config.learning_rate, bundle.param_count())),
            OptimizerKind::Sgd => OptState::Sgd(Sgd {
                lr: config.learning_rate,
            }),
        };
        Ok(Self {
            config,
            env,
            bundle,
            optimizer,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn bundle(&self) -> &PolicyBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> PolicyBundle {
        self.bundle
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn aggregate(&self, adv: &mut AdvantageBatch, ratios: &[f64]) -> Result<Aggregation> {
        let c = &self.config;
        match c.algorithm {
            Algorithm::Pama => pama_aggregate(adv, ratios, c.clip, c.granularity),
            Algorithm::MgdaUb => mgda_ub_aggregate(adv, ratios, c.clip, c.noon_enabled(), c.granularity),
            Algorithm::Morlhf => {
                let w = c.fixed_weights.as_ref().expect("validated");
                let agg_adv = morlhf_aggregate(adv, w, c.noon_enabled())?;
                Ok(Aggregation {
                    weights: vec![w.as_slice().to_vec(); agg_adv.len()],
                    agg_adv,
                })
            }
        }
    }

    /// One outer iteration: rollout, advantages, inner optimization epochs.
    pub fn step(&mut self) -> Result<TrainStepReport> {
        let cfg = self.config.clone();
        let n = cfg.n_objectives;
        let rollout_seed = splitmix64(cfg.seed ^ splitmix64(self.step as u64));
        let batch = rollout(&self.bundle, &self.env, cfg.batch_size, rollout_seed)?;
        let Advantages { mut raw, returns } = compute_advantages(&batch, cfg.kl, cfg.gae)?;
        if cfg.whiten && batch.len() >= 2 {
            for row in raw.iter_mut() {
                *row = whiten(row, &batch.mask)?;
            }
        }
        let mut adv = AdvantageBatch::new(raw, batch.mask.clone())?;
        let anchor = match cfg.ratio_anchor {
            RatioAnchor::Rollout => &batch.logp,
            RatioAnchor::Reference => &batch.ref_logp,
        };

        let mut reward_mean = Vec::with_capacity(n);
        let mut reward_std = Vec::with_capacity(n);
        for i in 0..n {
            let (m, s) = mean_std(batch.episodes.iter().map(|e| e.rewards[i]));
            reward_mean.push(m);
            reward_std.push(s);
        }
        let noon_adv_mean = adv
            .noon
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
            .collect();

        let d = self.bundle.param_count();
        let policy_len = self.bundle.layout().policy_len();
        let mut policy_loss = 0.0;
        let mut value_loss = vec![0.0; n];
        let mut agg_adv_mean = 0.0;
        let mut weight_mean = vec![0.0; n];
        let mut kl_first = 0.0;
        let mut residual = None;
        let mut epochs_run = 0;

        for epoch in 0..cfg.inner_epochs {
            let mut tape = Tape::new(d);
            let graph = self.bundle.build(&mut tape, &self.bundle.theta, &batch.contexts);
            let logp_var = tape.gather(graph.log_probs, &batch.actions);
            let logp = tape.value(logp_var).data.clone();
            let kl_now = estimate_kl(&logp, &batch.ref_logp, &batch.mask)?;
            if epoch == 0 {
                kl_first = kl_now;
            } else if kl_now.abs() > cfg.kl.target_kl {
                break;
            }
            let ratios: Vec<f64> = logp.iter().zip(anchor).map(|(&lp, &a)| exp(lp - a)).collect();
            let agg = self.aggregate(&mut adv, &ratios)?;

            let pl = tape.clipped_surrogate(logp_var, anchor, &agg.agg_adv, cfg.clip.epsilon);
            let mut total = pl;
            for (i, &v) in graph.values.iter().enumerate() {
                let vl = tape.clipped_value_loss(v, &returns[i], &batch.values[i], cfg.value_clip);
                value_loss[i] += tape.scalar(vl);
                let scaled = tape.scale(vl, cfg.value_coef);
                total = tape.add(total, scaled);
            }
            let total_value = tape.scalar(total);
            if !total_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {} epoch {epoch}",
                    self.step
                )));
            }
            policy_loss += tape.scalar(pl);
            agg_adv_mean += agg.agg_adv.iter().sum::<f64>() / agg.agg_adv.len().max(1) as f64;
            for (w, m) in weight_mean.iter_mut().zip(agg.mean_weights(&batch.mask)) {
                *w += m;
            }

            if epoch == 0 && cfg.track_stationarity {
                let mut grads = Vec::with_capacity(n);
                for i in 0..n {
                    let li = tape.clipped_surrogate(logp_var, anchor, &adv.noon[i], cfg.clip.epsilon);
                    let g = tape.grad(li)?;
                    grads.push(g[..policy_len].to_vec());
                }
                residual = Some(stationarity_residual(&grads)?.residual);
            }

            let grad = tape.grad(total)?;
            if let Err(e) = check_finite("gradient", &grad) {
                return Err(Error::Numeric(format!("step {}: {e}", self.step)));
            }
            self.optimizer.step(&mut self.bundle.theta, &grad)?;
            epochs_run += 1;
        }

        let k = epochs_run.max(1) as f64;
        let report = TrainStepReport {
            step: self.step,
            reward_mean,
            reward_std,
            noon_adv_mean,
            agg_adv_mean: agg_adv_mean / k,
            weight_mean: weight_mean.into_iter().map(|w| w / k).collect(),
            kl: kl_first,
            policy_loss: policy_loss / k,
            value_loss: value_loss.into_iter().map(|v| v / k).collect(),
            epochs_run,
            stationarity_residual: residual,
        };
        self.step += 1;
        Ok(report)
    }
}

/// Runs `config.total_steps` iterations, handing every report to `emit`.
pub fn train(
    config: TrainerConfig,
    env: Environment,
    bundle: PolicyBundle,
    mut emit: impl FnMut(&TrainStepReport),
) -> Result<PolicyBundle> {
    let steps = config.total_steps;
    let mut trainer = Trainer::new(config, env, bundle)?;
    for _ in 0..steps {
        let report = trainer.step()?;
        emit(&report);
    }
    Ok(trainer.into_bundle())
}

// ---------------------------------------------------------------------------
// Theory-check trainer
// ---------------------------------------------------------------------------

/// A loss with an exact gradient and a known gradient-Lipschitz constant.
pub trait SmoothLoss {
    fn dim(&self) -> usize;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
    fn lipschitz(&self) -> f64;
}

/// `½ (x − a)ᵀ H (x − a) + offset` with symmetric PSD `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    hessian: Vec<f64>,
    center: Vec<f64>,
    offset: f64,
    kappa: f64,
}

impl Quadratic {
    pub fn new(hessian: Vec<f64>, center: Vec<f64>, offset: f64) -> Result<Self> {
        let d = center.len();
        if d == 0 {
            return Err(Error::Empty("quadratic center"));
        }
        check_len("hessian", d * d, hessian.len())?;
        check_finite("hessian", &hessian)?;
        check_finite("center", &center)?;
        for i in 0..d {
            for j in 0..i {
                if hessian[i * d + j] != hessian[j * d + i] {
                    return Err(Error::domain("hessian must be symmetric"));
                }
            }
        }
        let kappa = largest_eigenvalue(&hessian, d);
        Ok(Self {
            hessian,
            center,
            offset,
            kappa,
        })
    }

    /// Diagonal Hessian; `(θ − 1)²` is `diagonal(&[2.0], &[1.0])`.
    pub fn diagonal(curvature: &[f64], center: &[f64]) -> Result<Self> {
        check_len("curvature", center.len(), curvature.len())?;
        if curvature.iter().any(|&c| !(c >= 0.0)) {
            return Err(Error::domain("curvature entries must be non-negative"));
        }
        let d = center.len();
        let mut h = vec![0.0; d * d];
        for i in 0..d {
            h[i * d + i] = curvature[i];
        }
        Self::new(h, center.to_vec(), 0.0)
    }

    pub fn hessian(&self) -> &[f64] {
        &self.hessian
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    fn hx(&self, x: &[f64]) -> Vec<f64> {
        let d = self.center.len();
        let diff: Vec<f64> = x.iter().zip(&self.center).map(|(a, b)| a - b).collect();
        (0..d)
            .map(|i| (0..d).map(|j| self.hessian[i * d + j] * diff[j]).sum())
            .collect()
    }
}

impl SmoothLoss for Quadratic {
    fn dim(&self) -> usize {
        self.center.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let hd = self.hx(x);
        let q: f64 = x.iter().zip(&self.center).zip(&hd).map(|((a, b), h)| (a - b) * h).sum();
        0.5 * q + self.offset
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        self.hx(x)
    }

    fn lipschitz(&self) -> f64 {
        self.kappa
    }
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
pub fn largest_eigenvalue(m: &[f64], d: usize) -> f64 {
    if d == 1 {
        return m[0].abs();
    }
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + 0.1 * i as f64).collect();
    let mut lambda = 0.0;
    for _ in 0..10_000 {
        let w: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|j| m[i * d + j] * v[j]).sum())
            .collect();
        let norm = sqrt(w.iter().map(|x| x * x).sum());
        if norm == 0.0 {
            return 0.0;
        }
        let next: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>()
            / v.iter().map(|x| x * x).sum::<f64>();
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-15 * next.abs().max(1.0) {
            return next;
        }
        lambda = next;
    }
    lambda
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryConfig {
    pub eta: f64,
    pub steps: usize,
    /// Reject `eta > 2/κ`.
    pub strict: bool,
    pub fw: FwOptions,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            steps: 1000,
            strict: true,
            fw: FwOptions::default(),
        }
    }
}

/// State at iterate `k`, before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryRecord {
    pub step: usize,
    pub theta: Vec<f64>,
    pub losses: Vec<f64>,
    /// `||Σ c_i ∇L_i||` at the min-norm weights.
    pub residual: f64,
    pub weights: Vec<f64>,
}

/// Min-norm combination of the gradients at `theta`: the scalar closed form
/// for one-dimensional parameters, Frank–Wolfe otherwise.
fn min_norm_direction(grads: &[Vec<f64>], fw: FwOptions) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    if grads[0].len() == 1 {
        let scalars: Vec<f64> = grads.iter().map(|g| g[0]).collect();
        let sol = solve_closed_form(&scalars)?;
        Ok((vec![sol.s_star], sol.weights.into_vec(), sol.s_star.abs()))
    } else {
        let p = solve_min_norm_observed(grads, fw, |_| {})?;
        let r = sqrt(p.squared_norm);
        Ok((p.point, p.weights.into_vec(), r))
    }
}

/// Gradient descent along the min-norm combination of the loss gradients.
/// Returns `steps + 1` records (the final iterate included).
pub fn theory_check_train(losses: &[&dyn SmoothLoss], theta0: &[f64], config: TheoryConfig) -> Result<Vec<TheoryRecord>> {
    if losses.is_empty() {
        return Err(Error::Empty("losses"));
    }
    let d = theta0.len();
    for l in losses {
        check_len("loss dimension", d, l.dim())?;
    }
    check_finite("theta0", theta0)?;
    if !(config.eta > 0.0) {
        return Err(Error::domain("eta must be positive"));
    }
    let kappa = losses.iter().map(|l| l.lipschitz()).fold(0.0, f64::max);
    if config.strict && kappa > 0.0 && config.eta > 2.0 / kappa {
        return Err(Error::domain(format!(
            "eta = {} violates eta <= 2/kappa = {}",
            config.eta,
            2.0 / kappa
        )));
    }

    let mut theta = theta0.to_vec();
    let mut records = Vec::with_capacity(config.steps + 1);
    for k in 0..=config.steps {
        let grads: Vec<Vec<f64>> = losses.iter().map(|l| l.gradient(&theta)).collect();
        let (direction, weights, residual) = min_norm_direction(&grads, config.fw)?;
        records.push(TheoryRecord {
            step: k,
            theta: theta.clone(),
            losses: losses.iter().map(|l| l.value(&theta)).collect(),
            residual,
            weights,
        });
        if k == config.steps {
            break;
        }
        for (t, g) in theta.iter_mut().zip(&direction) {
            *t -= config.eta * g;
        }
        if let Err(e) = check_finite("theta", &theta) {
            let msg: String = format!("theory-check diverged at step {k}: {e}");
            return Err(Error::Numeric(msg));
        }
    }
    Ok(records)
}
