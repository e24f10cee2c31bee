//! Synthetic multi-objective sequence environments.
//!
//! An episode is a fixed prompt followed by sampled tokens until the EOS token
//! or `max_len` response tokens. Rewards are sequence-level: every channel is
//! scored once on the finished response and placed on its last token.
//!
//! Tokens carry a display width so that "response length" means the width of
//! the rendered string, not the token count. The default task gives positive
//! tokens width 1 and the other content tokens width 3, which makes a long
//! string and a positive one pull in different directions.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mat, PolicyBundle};
use crate::error::{check_finite, Error, Result};
use crate::math::exp;

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeSpec {
    pub vocab_size: usize,
    pub max_len: usize,
    pub eos_token: u32,
    pub prompt: Vec<u32>,
    /// Rendered width of every token; EOS usually 0.
    pub token_widths: Vec<u32>,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn validate(&self) -> Result<()> {
        if (self.eos_token as usize) >= self.vocab_size {
            return Err(Error::domain("eos_token must be inside the vocabulary"));
        }
        if self.max_len == 0 {
            return Err(Error::domain("max_len must be at least 1"));
        }
        if self.prompt.is_empty() {
            return Err(Error::domain("prompt must contain at least one token"));
        }
        if let Some(t) = self.prompt.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(Error::domain(format!("prompt token {t} outside the vocabulary")));
        }
        if self.token_widths.len() != self.vocab_size {
            return Err(Error::DimensionMismatch {
                what: "token widths",
                expected: self.vocab_size,
                found: self.token_widths.len(),
            });
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt.len()
    }

    /// Rendered width of a response.
    pub fn width(&self, response: &[u32]) -> usize {
        response.iter().map(|&t| self.token_widths[t as usize] as usize).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    /// `clip(width / scale, lo, hi)`.
    LengthClip { scale: f64, lo: f64, hi: f64 },
    /// `(#positive − #negative) / len`.
    ClassScore { positive: Vec<u32>, negative: Vec<u32> },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Bound every emitted reward must respect.
    pub r_max: f64,
}

impl RewardSpec {
    pub fn length_clip(scale: f64, lo: f64, hi: f64) -> Self {
        Self {
            kind: RewardKind::LengthClip { scale, lo, hi },
            r_max: lo.abs().max(hi.abs()),
        }
    }

    pub fn class_score(positive: Vec<u32>, negative: Vec<u32>) -> Self {
        Self {
            kind: RewardKind::ClassScore { positive, negative },
            r_max: 1.0,
        }
    }

    pub fn constant(value: f64) -> Self {
        Self {
            kind: RewardKind::Constant { value },
            r_max: value.abs(),
        }
    }

    pub fn validate(&self, spec: &EpisodeSpec) -> Result<()> {
        if !(self.r_max >= 0.0 && self.r_max.is_finite()) {
            return Err(Error::domain("r_max must be finite and non-negative"));
        }
        match &self.kind {
            RewardKind::LengthClip { scale, lo, hi } => {
                check_finite("length reward parameters", &[*scale, *lo, *hi])?;
                if !(*scale > 0.0) {
                    return Err(Error::domain("length reward scale must be positive"));
                }
                if lo > hi {
                    return Err(Error::domain("length reward needs lo <= hi"));
                }
            }
            RewardKind::ClassScore { positive, negative } => {
                if let Some(t) = positive
                    .iter()
                    .chain(negative)
                    .find(|&&t| t as usize >= spec.vocab_size)
                {
                    return Err(Error::domain(format!("class token {t} outside the vocabulary")));
                }
                if positive.iter().any(|t| negative.contains(t)) {
                    return Err(Error::domain("a token cannot be both positive and negative"));
                }
            }
            RewardKind::Constant { value } => check_finite("constant reward", &[*value])?,
        }
        Ok(())
    }

    pub fn evaluate(&self, spec: &EpisodeSpec, response: &[u32]) -> Result<f64> {
        let r = match &self.kind {
            RewardKind::LengthClip { scale, lo, hi } => length_reward(spec.width(response), *scale, *lo, *hi)?,
            RewardKind::ClassScore { positive, negative } => class_score_reward(response, positive, negative),
            RewardKind::Constant { value } => *value,
        };
        if r.abs() > self.r_max {
            return Err(Error::domain(format!(
                "reward {r} exceeds its bound r_max = {}",
                self.r_max
            )));
        }
        Ok(r)
    }
}

/// `clip(l / scale, lo, hi)`.
pub fn length_reward(l: usize, scale: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::domain("length scale must be positive"));
    }
    if lo > hi {
        return Err(Error::domain("length reward needs lo <= hi"));
    }
    Ok((l as f64 / scale).clamp(lo, hi))
}

/// `(#positive − #negative) / len`, 0 for an empty sequence.
pub fn class_score_reward(tokens: &[u32], positive: &[u32], negative: &[u32]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let pos = tokens.iter().filter(|t| positive.contains(t)).count() as f64;
    let neg = tokens.iter().filter(|t| negative.contains(t)).count() as f64;
    (pos - neg) / tokens.len() as f64
}

/// An episode definition with `N` reward channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub spec: EpisodeSpec,
    pub rewards: Vec<RewardSpec>,
}

impl Environment {
    pub fn new(spec: EpisodeSpec, rewards: Vec<RewardSpec>) -> Result<Self> {
        spec.validate()?;
        if rewards.is_empty() {
            return Err(Error::Empty("reward channels"));
        }
        for r in &rewards {
            r.validate(&spec)?;
        }
        Ok(Self { spec, rewards })
    }

    /// Vocabulary of 12: tokens 0–3 positive (width 2), 4–7 negative and
    /// 8–10 neutral (width 3), 11 EOS (width 0, counted positive). Prompt
    /// `[8, 9]`, at most 16 response tokens. Channel 0 is the length reward
    /// `clip(width/42, 0.5, 1.5)`, channel 1 the class score.
    ///
    /// 42 is the width of 16 tokens of average width, so the uniform policy
    /// starts near the lower clip. Long responses need wide tokens, which are
    /// never positive: the all-positive response scores `(0.76, 1.0)` while
    /// the longest one scores at most `(1.14, 0.0)`.
    pub fn conflicting_default() -> Self {
        let spec = EpisodeSpec {
            vocab_size: 12,
            max_len: 16,
            eos_token: 11,
            prompt: vec![8, 9],
            token_widths: vec![2, 2, 2, 2, 3, 3, 3, 3, 3, 3, 3, 0],
            seed: 0,
        };
        let rewards = vec![
            RewardSpec::length_clip(42.0, 0.5, 1.5),
            RewardSpec::class_score(vec![0, 1, 2, 3, 11], vec![4, 5, 6, 7]),
        ];
        Self::new(spec, rewards).expect("default environment is valid")
    }

    pub fn n_objectives(&self) -> usize {
        self.rewards.len()
    }

    /// Scores a finished response on every channel.
    pub fn score(&self, response: &[u32]) -> Result<Vec<f64>> {
        self.rewards.iter().map(|r| r.evaluate(&self.spec, response)).collect()
    }
}

/// One sampled episode inside a [`RolloutBatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub response: Vec<u32>,
    /// Offset of the first response token on the flat token axis.
    pub start: usize,
    /// Sequence-level reward per channel.
    pub rewards: Vec<f64>,
}

impl EpisodeRecord {
    pub fn range(&self) -> core::ops::Range<usize> {
        self.start..self.start + self.response.len()
    }
}

/// Sampled episodes flattened onto one token axis (episode-major).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub n_objectives: usize,
    pub episodes: Vec<EpisodeRecord>,
    /// `T × vocab` context features of each decision state.
    pub contexts: Mat,
    pub actions: Vec<usize>,
    pub logp: Vec<f64>,
    pub ref_logp: Vec<f64>,
    /// `N × T` value estimates at sampling time.
    pub values: Vec<Vec<f64>>,
    /// `N × T` rewards, non-zero only on each episode's final token.
    pub rewards: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Little-endian dump of every field, for byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut f = |x: f64| out.extend_from_slice(&x.to_le_bytes());
        for e in &self.episodes {
            f(e.start as f64);
            for &t in &e.response {
                f(t as f64);
            }
            for &r in &e.rewards {
                f(r);
            }
        }
        for &x in &self.contexts.data {
            f(x);
        }
        for &a in &self.actions {
            f(a as f64);
        }
        for (&a, &b) in self.logp.iter().zip(&self.ref_logp) {
            f(a);
            f(b);
        }
        for row in self.values.iter().chain(&self.rewards) {
            for &x in row {
                f(x);
            }
        }
        out
    }
}

/// Inverse-CDF draw from log-probabilities.
fn sample(log_probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in log_probs.iter().enumerate() {
        acc += exp(lp);
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total mass: take the last token with mass
    log_probs
        .iter()
        .rposition(|&lp| lp > f64::NEG_INFINITY)
        .unwrap_or(log_probs.len() - 1)
}

/// Samples `batch` episodes from the bundle's current policy.
///
/// Episode `j` draws from its own ChaCha stream `j` under `rng_seed`, so the
/// result does not depend on how episodes are scheduled.
pub fn rollout(bundle: &PolicyBundle, env: &Environment, batch: usize, rng_seed: u64) -> Result<RolloutBatch> {
    let spec = &env.spec;
    let vocab = spec.vocab_size;
    if bundle.arch().vocab_size != vocab {
        return Err(Error::DimensionMismatch {
            what: "policy vocabulary",
            expected: vocab,
            found: bundle.arch().vocab_size,
        });
    }
    let n = env.n_objectives();
    if bundle.arch().n_value_heads != n {
        return Err(Error::DimensionMismatch {
            what: "value heads",
            expected: n,
            found: bundle.arch().n_value_heads,
        });
    }

    struct Live {
        tokens: Vec<u32>,
        rng: ChaCha8Rng,
        ctx: Vec<Vec<f64>>,
        actions: Vec<usize>,
        logp: Vec<f64>,
        ref_logp: Vec<f64>,
        values: Vec<Vec<f64>>,
        done: bool,
    }
    let mut live: Vec<Live> = (0..batch)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            rng.set_stream(j as u64);
            Live {
                tokens: spec.prompt.clone(),
                rng,
                ctx: Vec::new(),
                actions: Vec::new(),
                logp: Vec::new(),
                ref_logp: Vec::new(),
                values: vec![Vec::new(); n],
                done: false,
            }
        })
        .collect();

    for _ in 0..spec.max_len {
        let active: Vec<usize> = (0..batch).filter(|&j| !live[j].done).collect();
        if active.is_empty() {
            break;
        }
        let mut ctx = Mat::zeros(active.len(), vocab);
        let mut feats = Vec::with_capacity(active.len());
        for (r, &j) in active.iter().enumerate() {
            let f = bundle.context_features(&live[j].tokens)?;
            ctx.data[r * vocab..(r + 1) * vocab].copy_from_slice(&f);
            feats.push(f);
        }
        let (lp, values) = bundle.forward_rows(&bundle.theta, &ctx);
        let (rlp, _) = bundle.forward_rows(bundle.ref_theta(), &ctx);
        for ((r, &j), f) in active.iter().enumerate().zip(feats) {
            let ep = &mut live[j];
            let a = sample(lp.row(r), &mut ep.rng);
            ep.ctx.push(f);
            ep.actions.push(a);
            ep.logp.push(lp.get(r, a));
            ep.ref_logp.push(rlp.get(r, a));
            for (i, head) in values.iter().enumerate() {
                ep.values[i].push(head[r]);
            }
            ep.tokens.push(a as u32);
            if a as u32 == spec.eos_token {
                ep.done = true;
            }
        }
    }

    let total: usize = live.iter().map(|e| e.actions.len()).sum();
    let mut out = RolloutBatch {
        n_objectives: n,
        episodes: Vec::with_capacity(batch),
        contexts: Mat::zeros(total, vocab),
        actions: Vec::with_capacity(total),
        logp: Vec::with_capacity(total),
        ref_logp: Vec::with_capacity(total),
        values: vec![Vec::with_capacity(total); n],
        rewards: vec![vec![0.0; total]; n],
        mask: vec![true; total],
    };
    for ep in live {
        let start = out.actions.len();
        let response: Vec<u32> = ep.tokens[spec.prompt_len()..].to_vec();
        let rewards = env.score(&response)?;
        let last = start + response.len() - 1;
        for (i, &r) in rewards.iter().enumerate() {
            out.rewards[i][last] = r;
        }
        for (k, f) in ep.ctx.iter().enumerate() {
            out.contexts.data[(start + k) * vocab..(start + k + 1) * vocab].copy_from_slice(f);
        }
        out.actions.extend(ep.actions);
        out.logp.extend(ep.logp);
        out.ref_logp.extend(ep.ref_logp);
        for (i, v) in ep.values.into_iter().enumerate() {
            out.values[i].extend(v);
        }
        out.episodes.push(EpisodeRecord {
            response,
            start,
            rewards,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Architecture, Init};

    #[test]
    fn length_reward_examples() {
        assert_eq!(length_reward(140, 140.0, 0.5, 1.5).unwrap(), 1.0);
        assert_eq!(length_reward(10, 140.0, 0.5, 1.5).unwrap(), 0.5);
        assert_eq!(length_reward(300, 140.0, 0.5, 1.5).unwrap(), 1.5);
        assert!(length_reward(1, 0.0, 0.5, 1.5).is_err());
        assert!(length_reward(1, 1.0, 2.0, 1.5).is_err());
    }

    #[test]
    fn class_score_examples() {
        let pos = [1, 2];
        let neg = [3];
        assert_eq!(class_score_reward(&[1, 2, 1], &pos, &neg), 1.0);
        assert_eq!(class_score_reward(&[1, 3], &pos, &neg), 0.0);
        assert_eq!(class_score_reward(&[1, 1, 2, 3, 0, 0, 0, 0], &pos, &neg), 0.25);
        assert_eq!(class_score_reward(&[], &pos, &neg), 0.0);
    }

    #[test]
    fn reward_bound_is_enforced() {
        let env = Environment::conflicting_default();
        let mut tight = RewardSpec::constant(2.0);
        tight.r_max = 1.0;
        assert!(tight.evaluate(&env.spec, &[0]).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut env = Environment::conflicting_default();
        env.spec.eos_token = 12;
        assert!(env.spec.validate().is_err());
        let mut env = Environment::conflicting_default();
        env.spec.max_len = 0;
        assert!(env.spec.validate().is_err());
        let env = Environment::conflicting_default();
        let bad = RewardSpec::class_score(vec![1], vec![1]);
        assert!(Environment::new(env.spec.clone(), vec![bad]).is_err());
    }

    #[test]
    fn max_len_one_gives_single_token_episodes() {
        let mut env = Environment::conflicting_default();
        env.spec.max_len = 1;
        let bundle = PolicyBundle::new(Architecture::new(12, 2), 3, Init::ZeroHeads).unwrap();
        let b = rollout(&bundle, &env, 20, 9).unwrap();
        assert!(b.episodes.iter().all(|e| e.response.len() == 1));
        assert_eq!(b.len(), 20);
    }

    #[test]
    fn terminal_rewards_sit_on_last_token() {
        let env = Environment::conflicting_default();
        let bundle = PolicyBundle::new(Architecture::new(12, 2), 3, Init::Random).unwrap();
        let b = rollout(&bundle, &env, 8, 1).unwrap();
        for e in &b.episodes {
            let last = e.range().end - 1;
            for i in 0..2 {
                assert_eq!(b.rewards[i][last], e.rewards[i]);
                for t in e.range().start..last {
                    assert_eq!(b.rewards[i][t], 0.0);
                }
            }
            assert!(e.response.len() <= env.spec.max_len);
        }
    }

    #[test]
    fn head_count_must_match() {
        let env = Environment::conflicting_default();
        let bundle = PolicyBundle::new(Architecture::new(12, 3), 3, Init::Random).unwrap();
        assert!(rollout(&bundle, &env, 2, 0).is_err());
    }
}
