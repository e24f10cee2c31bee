//! Run configuration files.
//!
//! A run is described by one TOML document. Unknown keys are rejected, every
//! omitted key takes its documented default, and semantic errors name the
//! offending line.
//!
//! ```toml
//! mode = "rl"                # or "theory"
//! output_dir = "runs/pama"
//! flush_every = 50
//!
//! [trainer]
//! algorithm = "pama"         # pama | morlhf | mgda_ub
//! learning_rate = 0.003
//! batch_size = 32
//!
//! [env]                      # defaults to the conflicting two-channel task
//! max_len = 16
//!
//! [[rewards]]
//! kind = "length_clip"
//! scale = 42.0
//! lo = 0.5
//! hi = 1.5
//!
//! [[rewards]]
//! kind = "class_score"
//! positive = [0, 1, 2, 3, 11]
//! negative = [4, 5, 6, 7]
//! ```

use std::path::{Path, PathBuf};

use pama_core::advantage::{GaeConfig, RatioClip};
use pama_core::autodiff::{Architecture, Init};
use pama_core::envs::{Environment, EpisodeSpec, RewardSpec};
use pama_core::objectives::{Granularity, KlConfig};
use pama_core::simplex::SimplexWeights;
use pama_core::trainers::{
    largest_eigenvalue, Algorithm, OptimizerKind, Quadratic, RatioAnchor, TheoryConfig, TrainerConfig,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Rl,
    Theory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmName {
    Pama,
    Morlhf,
    MgdaUb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GranularityName {
    Token,
    BatchMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorName {
    Rollout,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    ZeroHeads,
    Random,
}

/// Hyperparameters of the RL trainer. Defaults follow the usual RLHF PPO
/// settings (β 0.2, clip 0.2, λ 0.95, γ 1, lr 1e-5, 4 epochs, batch 128).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub algorithm: AlgorithmName,
    pub batch_size: usize,
    pub inner_epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerName,
    pub clip: f64,
    pub value_clip: f64,
    pub value_coef: f64,
    pub kl_beta: f64,
    pub target_kl: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub granularity: GranularityName,
    pub seed: u64,
    pub total_steps: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_noon: Option<bool>,
    pub whiten: bool,
    pub ratio_anchor: AnchorName,
    pub track_stationarity: bool,
    pub stop_value_gradient: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let c = TrainerConfig::new(Algorithm::Pama, 1);
        Self {
            algorithm: AlgorithmName::Pama,
            batch_size: c.batch_size,
            inner_epochs: c.inner_epochs,
            learning_rate: c.learning_rate,
            optimizer: OptimizerName::Adam,
            clip: c.clip.epsilon,
            value_clip: c.value_clip,
            value_coef: c.value_coef,
            kl_beta: c.kl.beta,
            target_kl: c.kl.target_kl,
            gamma: c.gae.gamma,
            lambda: c.gae.lambda,
            granularity: GranularityName::Token,
            seed: c.seed,
            total_steps: c.total_steps,
            fixed_weights: None,
            use_noon: None,
            whiten: c.whiten,
            ratio_anchor: AnchorName::Rollout,
            track_stationarity: false,
            stop_value_gradient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub value_hidden: usize,
    pub init: InitName,
}

impl Default for ModelSection {
    fn default() -> Self {
        let a = Architecture::new(1, 1);
        Self {
            embed_dim: a.embed_dim,
            hidden_dim: a.hidden_dim,
            value_hidden: a.value_hidden,
            init: InitName::ZeroHeads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub vocab_size: usize,
    pub max_len: usize,
    pub eos_token: u32,
    pub prompt: Vec<u32>,
    pub token_widths: Vec<u32>,
    pub seed: u64,
}

impl Default for EnvSection {
    fn default() -> Self {
        let s = Environment::conflicting_default().spec;
        Self {
            vocab_size: s.vocab_size,
            max_len: s.max_len,
            eos_token: s.eos_token,
            prompt: s.prompt,
            token_widths: s.token_widths,
            seed: s.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSection {
    LengthClip { scale: f64, lo: f64, hi: f64 },
    ClassScore { positive: Vec<u32>, negative: Vec<u32> },
    Constant { value: f64 },
}

fn default_rewards() -> Vec<RewardSection> {
    Environment::conflicting_default()
        .rewards
        .iter()
        .map(|r| match &r.kind {
            pama_core::envs::RewardKind::LengthClip { scale, lo, hi } => RewardSection::LengthClip {
                scale: *scale,
                lo: *lo,
                hi: *hi,
            },
            pama_core::envs::RewardKind::ClassScore { positive, negative } => RewardSection::ClassScore {
                positive: positive.clone(),
                negative: negative.clone(),
            },
            pama_core::envs::RewardKind::Constant { value } => RewardSection::Constant { value: *value },
        })
        .collect()
}

/// `½ (x − center)ᵀ H (x − center) + offset`, with `H` given either as a
/// diagonal (`curvature`) or as a full row-major matrix (`hessian`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curvature: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian: Option<Vec<f64>>,
    pub center: Vec<f64>,
    #[serde(default)]
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    pub eta: f64,
    pub steps: usize,
    #[serde(default = "default_true")]
    pub strict: bool,
    pub theta0: Vec<f64>,
    pub losses: Vec<QuadraticSection>,
}

fn default_true() -> bool {
    true
}

fn default_mode() -> Mode {
    Mode::Rl
}

fn default_output_dir() -> String {
    "runs/default".to_string()
}

fn default_flush() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
    /// Metrics are flushed to disk every this many steps.
    #[serde(default = "default_flush")]
    pub flush_every: usize,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub env: EnvSection,
    #[serde(default = "default_rewards")]
    pub rewards: Vec<RewardSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theory: Option<TheorySection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Rl,
            output_dir: default_output_dir(),
            flush_every: default_flush(),
            trainer: TrainerSection::default(),
            model: ModelSection::default(),
            env: EnvSection::default(),
            rewards: default_rewards(),
            theory: None,
        }
    }
}

/// Line number (1-based) of `key = …` inside `[section]` (`""` for the top
/// level, `"rewards#k"` for the k-th `[[rewards]]` table).
fn locate(src: &str, section: &str, key: &str) -> Option<usize> {
    let (name, nth) = match section.split_once('#') {
        Some((n, k)) => (n, k.parse::<usize>().ok()),
        None => (section, None),
    };
    let mut seen = 0usize;
    let mut in_target = name.is_empty();
    let mut header_line = None;
    for (i, line) in src.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            let current = t.trim_matches(|c| c == '[' || c == ']').trim();
            in_target = current == name
                && match nth {
                    Some(k) => {
                        seen += 1;
                        seen == k + 1
                    }
                    None => true,
                };
            if in_target {
                header_line = Some(i + 1);
            }
            continue;
        }
        if in_target {
            if key.is_empty() {
                return header_line;
            }
            if let Some(rest) = t.strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
    }
    if key.is_empty() {
        header_line
    } else {
        header_line.or(if name.is_empty() { None } else { Some(1) })
    }
}

struct Checker<'a> {
    src: &'a str,
    path: &'a Path,
    errors: Vec<String>,
}

impl Checker<'_> {
    fn fail(&mut self, section: &str, key: &str, message: impl AsRef<str>) {
        let shown = section.split('#').next().unwrap_or(section);
        let dotted = match (shown.is_empty(), key.is_empty()) {
            (true, _) => key.to_string(),
            (false, true) => shown.to_string(),
            (false, false) => format!("{shown}.{key}"),
        };
        let line = locate(self.src, section, key)
            .map(|l| format!("line {l}: "))
            .unwrap_or_default();
        self.errors.push(format!("{line}{dotted}: {}", message.as_ref()));
    }

    fn positive(&mut self, section: &str, key: &str, v: f64) {
        if !(v > 0.0 && v.is_finite()) {
            self.fail(section, key, format!("must be a positive finite number, got {v}"));
        }
    }

    fn unit_interval(&mut self, section: &str, key: &str, v: f64) {
        if !(0.0..=1.0).contains(&v) {
            self.fail(section, key, format!("must lie in [0, 1], got {v}"));
        }
    }
}

impl RunConfig {
    /// Parses and validates a config document; `path` is only used in messages.
    pub fn parse(src: &str, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(src).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })?;
        cfg.validate(src, path)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&src, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// Collects every semantic error and reports them together.
    pub fn validate(&self, src: &str, path: &Path) -> Result<()> {
        let mut c = Checker {
            src,
            path,
            errors: Vec::new(),
        };
        if self.flush_every == 0 {
            c.fail("", "flush_every", "must be at least 1");
        }
        match self.mode {
            Mode::Rl => self.validate_rl(&mut c),
            Mode::Theory => self.validate_theory(&mut c),
        }
        if c.errors.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config {
                path: c.path.to_path_buf(),
                message: c.errors.join("\n"),
            })
        }
    }

    fn validate_rl(&self, c: &mut Checker) {
        let t = &self.trainer;
        if t.batch_size == 0 {
            c.fail("trainer", "batch_size", "must be at least 1");
        }
        if t.inner_epochs == 0 {
            c.fail("trainer", "inner_epochs", "must be at least 1");
        }
        c.positive("trainer", "learning_rate", t.learning_rate);
        if !(t.clip > 0.0 && t.clip < 1.0) {
            c.fail("trainer", "clip", format!("must lie in (0, 1), got {}", t.clip));
        }
        c.positive("trainer", "value_clip", t.value_clip);
        if !(t.value_coef >= 0.0 && t.value_coef.is_finite()) {
            c.fail("trainer", "value_coef", "must be non-negative");
        }
        if !(t.kl_beta >= 0.0 && t.kl_beta.is_finite()) {
            c.fail("trainer", "kl_beta", "must be non-negative");
        }
        c.positive("trainer", "target_kl", t.target_kl);
        c.unit_interval("trainer", "gamma", t.gamma);
        c.unit_interval("trainer", "lambda", t.lambda);
        if t.algorithm == AlgorithmName::Pama && t.use_noon == Some(false) {
            c.fail("trainer", "use_noon", "PAMA always uses Noon advantages");
        }
        let n = self.rewards.len();
        match (&t.fixed_weights, t.algorithm) {
            (None, AlgorithmName::Morlhf) => {
                c.fail("trainer", "algorithm", "morlhf requires trainer.fixed_weights");
            }
            (Some(w), _) => {
                if w.len() != n {
                    c.fail(
                        "trainer",
                        "fixed_weights",
                        format!("has {} entries but there are {n} reward channels", w.len()),
                    );
                } else if let Err(e) = SimplexWeights::new(w.clone()) {
                    c.fail("trainer", "fixed_weights", e.to_string());
                }
            }
            _ => {}
        }

        let m = &self.model;
        for (key, v) in [
            ("embed_dim", m.embed_dim),
            ("hidden_dim", m.hidden_dim),
            ("value_hidden", m.value_hidden),
        ] {
            if v == 0 {
                c.fail("model", key, "must be at least 1");
            }
        }

        let e = &self.env;
        if e.vocab_size < 2 {
            c.fail("env", "vocab_size", "must be at least 2");
        }
        if e.max_len == 0 {
            c.fail("env", "max_len", "must be at least 1");
        }
        if e.eos_token as usize >= e.vocab_size {
            c.fail("env", "eos_token", format!("{} is outside the vocabulary", e.eos_token));
        }
        if e.prompt.is_empty() {
            c.fail("env", "prompt", "must contain at least one token");
        }
        if let Some(t) = e.prompt.iter().find(|&&t| t as usize >= e.vocab_size) {
            c.fail("env", "prompt", format!("token {t} is outside the vocabulary"));
        }
        if e.token_widths.len() != e.vocab_size {
            c.fail(
                "env",
                "token_widths",
                format!("has {} entries for a vocabulary of {}", e.token_widths.len(), e.vocab_size),
            );
        }

        if self.rewards.is_empty() {
            c.fail("", "rewards", "at least one [[rewards]] table is required");
        }
        for (k, r) in self.rewards.iter().enumerate() {
            let sec = format!("rewards#{k}");
            match r {
                RewardSection::LengthClip { scale, lo, hi } => {
                    c.positive(&sec, "scale", *scale);
                    if !(lo <= hi) {
                        c.fail(&sec, "lo", format!("lo = {lo} exceeds hi = {hi}"));
                    }
                }
                RewardSection::ClassScore { positive, negative } => {
                    for (key, set) in [("positive", positive), ("negative", negative)] {
                        if let Some(t) = set.iter().find(|&&t| t as usize >= e.vocab_size) {
                            c.fail(&sec, key, format!("token {t} is outside the vocabulary"));
                        }
                    }
                    if let Some(t) = positive.iter().find(|t| negative.contains(t)) {
                        c.fail(&sec, "negative", format!("token {t} is both positive and negative"));
                    }
                }
                RewardSection::Constant { value } => {
                    if !value.is_finite() {
                        c.fail(&sec, "value", "must be finite");
                    }
                }
            }
        }
    }

    fn validate_theory(&self, c: &mut Checker) {
        let Some(th) = &self.theory else {
            c.fail("", "mode", "mode = \"theory\" requires a [theory] table");
            return;
        };
        c.positive("theory", "eta", th.eta);
        let d = th.theta0.len();
        if d == 0 {
            c.fail("theory", "theta0", "must not be empty");
        }
        if th.losses.is_empty() {
            c.fail("theory", "losses", "at least one [[theory.losses]] table is required");
        }
        for (k, q) in th.losses.iter().enumerate() {
            let sec = format!("theory.losses#{k}");
            if q.center.len() != d {
                c.fail(&sec, "center", format!("has {} entries but theta0 has {d}", q.center.len()));
            }
            match (&q.curvature, &q.hessian) {
                (Some(_), Some(_)) | (None, None) => {
                    c.fail(&sec, "", "give exactly one of curvature or hessian");
                }
                (Some(cv), None) if cv.len() != d => {
                    c.fail(&sec, "curvature", format!("has {} entries, expected {d}", cv.len()));
                }
                (None, Some(h)) if h.len() != d * d => {
                    c.fail(&sec, "hessian", format!("has {} entries, expected {}", h.len(), d * d));
                }
                _ => {}
            }
        }
        if !c.errors.is_empty() {
            return;
        }
        match self.theory_losses() {
            Ok(losses) => {
                let kappa = losses
                    .iter()
                    .map(|q| largest_eigenvalue(q.hessian(), q.center().len()))
                    .fold(0.0, f64::max);
                if th.strict && kappa > 0.0 && th.eta > 2.0 / kappa {
                    c.fail(
                        "theory",
                        "eta",
                        format!("{} exceeds 2/kappa = {} (set strict = false to allow)", th.eta, 2.0 / kappa),
                    );
                }
            }
            Err(e) => c.fail("theory", "losses", e.to_string()),
        }
    }

    pub fn trainer_config(&self) -> std::result::Result<TrainerConfig, pama_core::Error> {
        let t = &self.trainer;
        let algorithm = match t.algorithm {
            AlgorithmName::Pama => Algorithm::Pama,
            AlgorithmName::Morlhf => Algorithm::Morlhf,
            AlgorithmName::MgdaUb => Algorithm::MgdaUb,
        };
        let mut cfg = TrainerConfig::new(algorithm, self.rewards.len());
        cfg.batch_size = t.batch_size;
        cfg.inner_epochs = t.inner_epochs;
        cfg.learning_rate = t.learning_rate;
        cfg.optimizer = match t.optimizer {
            OptimizerName::Adam => OptimizerKind::Adam,
            OptimizerName::Sgd => OptimizerKind::Sgd,
        };
        cfg.clip = RatioClip::new(t.clip)?;
        cfg.value_clip = t.value_clip;
        cfg.value_coef = t.value_coef;
        cfg.kl = KlConfig {
            beta: t.kl_beta,
            target_kl: t.target_kl,
        };
        cfg.gae = GaeConfig::new(t.gamma, t.lambda)?;
        cfg.granularity = match t.granularity {
            GranularityName::Token => Granularity::Token,
            GranularityName::BatchMean => Granularity::BatchMean,
        };
        cfg.seed = t.seed;
        cfg.total_steps = t.total_steps;
        cfg.fixed_weights = t.fixed_weights.clone().map(SimplexWeights::new).transpose()?;
        cfg.use_noon = t.use_noon;
        cfg.whiten = t.whiten;
        cfg.ratio_anchor = match t.ratio_anchor {
            AnchorName::Rollout => RatioAnchor::Rollout,
            AnchorName::Reference => RatioAnchor::Reference,
        };
        cfg.track_stationarity = t.track_stationarity;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn environment(&self) -> std::result::Result<Environment, pama_core::Error> {
        let e = &self.env;
        let spec = EpisodeSpec {
            vocab_size: e.vocab_size,
            max_len: e.max_len,
            eos_token: e.eos_token,
            prompt: e.prompt.clone(),
            token_widths: e.token_widths.clone(),
            seed: e.seed,
        };
        let rewards = self
            .rewards
            .iter()
            .map(|r| match r {
                RewardSection::LengthClip { scale, lo, hi } => RewardSpec::length_clip(*scale, *lo, *hi),
                RewardSection::ClassScore { positive, negative } => {
                    RewardSpec::class_score(positive.clone(), negative.clone())
                }
                RewardSection::Constant { value } => RewardSpec::constant(*value),
            })
            .collect();
        Environment::new(spec, rewards)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            vocab_size: self.env.vocab_size,
            embed_dim: self.model.embed_dim,
            hidden_dim: self.model.hidden_dim,
            value_hidden: self.model.value_hidden,
            n_value_heads: self.rewards.len(),
        }
    }

    pub fn init(&self) -> Init {
        match self.model.init {
            InitName::ZeroHeads => Init::ZeroHeads,
            InitName::Random => Init::Random,
        }
    }

    pub fn theory_losses(&self) -> std::result::Result<Vec<Quadratic>, pama_core::Error> {
        let th = self
            .theory
            .as_ref()
            .ok_or_else(|| pama_core::Error::domain("config has no [theory] table"))?;
        th.losses
            .iter()
            .map(|q| match (&q.curvature, &q.hessian) {
                (Some(cv), _) => {
                    let mut quad = Quadratic::diagonal(cv, &q.center)?;
                    if q.offset != 0.0 {
                        quad = Quadratic::new(quad.hessian().to_vec(), q.center.clone(), q.offset)?;
                    }
                    Ok(quad)
                }
                (None, Some(h)) => Quadratic::new(h.clone(), q.center.clone(), q.offset),
                (None, None) => Err(pama_core::Error::domain("quadratic needs curvature or hessian")),
            })
            .collect()
    }

    pub fn theory_config(&self) -> std::result::Result<TheoryConfig, pama_core::Error> {
        let th = self
            .theory
            .as_ref()
            .ok_or_else(|| pama_core::Error::domain("config has no [theory] table"))?;
        Ok(TheoryConfig {
            eta: th.eta,
            steps: th.steps,
            strict: th.strict,
            ..TheoryConfig::default()
        })
    }

    /// Output directory, overridden by `PAMA_OUTPUT_DIR` when set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => PathBuf::from(&self.output_dir),
        }
    }

    /// The two-quadratic problem `(θ−1)²`, `(θ+1)²` from `θ = 3`.
    pub fn two_quadratics() -> Self {
        RunConfig {
            mode: Mode::Theory,
            output_dir: "runs/theory".to_string(),
            theory: Some(TheorySection {
                eta: 0.4,
                steps: 10_000,
                strict: true,
                theta0: vec![3.0],
                losses: vec![
                    QuadraticSection {
                        curvature: Some(vec![2.0]),
                        hessian: None,
                        center: vec![1.0],
                        offset: 0.0,
                    },
                    QuadraticSection {
                        curvature: Some(vec![2.0]),
                        hessian: None,
                        center: vec![-1.0],
                        offset: 0.0,
                    },
                ],
            }),
            ..RunConfig::default()
        }
    }
}

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "PAMA_OUTPUT_DIR";
