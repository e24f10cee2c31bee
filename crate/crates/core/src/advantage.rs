//! Advantage estimation, the Noon clamp and the ratio gates.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_finite, check_len, Error, Result};
use crate::math::sqrt;

/// Discount and GAE mixing coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaeConfig {
    pub gamma: f64,
    pub lambda: f64,
}

impl GaeConfig {
    pub fn new(gamma: f64, lambda: f64) -> Result<Self> {
        let cfg = Self { gamma, lambda };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::domain("gamma and lambda must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lambda: 0.95,
        }
    }
}

/// PPO ratio clip range `ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioClip {
    pub epsilon: f64,
}

impl RatioClip {
    pub fn new(epsilon: f64) -> Result<Self> {
        let clip = Self { epsilon };
        clip.validate()?;
        Ok(clip)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::domain("clip epsilon must lie in (0, 1)"));
        }
        Ok(())
    }

    #[inline]
    pub fn clip(&self, ratio: f64) -> f64 {
        ratio.clamp(1.0 - self.epsilon, 1.0 + self.epsilon)
    }
}

impl Default for RatioClip {
    fn default() -> Self {
        Self { epsilon: 0.2 }
    }
}

/// Generalized advantage estimation by backward recursion.
///
/// `values` carries one more entry than `rewards`: the last one is the
/// bootstrap `V(s_T)` (0 for terminal states). Masked steps get `δ_t = 0`
/// and an advantage of 0.
pub fn gae(rewards: &[f64], values: &[f64], mask: &[bool], config: GaeConfig) -> Result<Vec<f64>> {
    check_len("gae values", rewards.len() + 1, values.len())?;
    check_len("gae mask", rewards.len(), mask.len())?;
    let discount = config.gamma * config.lambda;
    let mut out = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        if mask[t] {
            let delta = rewards[t] + config.gamma * values[t + 1] - values[t];
            running = delta + discount * running;
            out[t] = running;
        } else {
            running *= discount;
        }
    }
    Ok(out)
}

#[inline]
pub fn noon(raw: f64) -> f64 {
    raw.max(0.0)
}

/// Elementwise `max(A', 0)` over every objective stream.
pub fn noon_clamp(raw: &[Vec<f64>]) -> Vec<Vec<f64>> {
    raw.iter()
        .map(|row| row.iter().map(|&a| noon(a)).collect())
        .collect()
}

fn check_ratio(ratio: f64) -> Result<()> {
    if ratio > 0.0 && ratio.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(alloc::format!(
            "probability ratio must be positive and finite, got {ratio}"
        )))
    }
}

/// One-sided gate for Noon advantages: zero once the ratio passes `1 + ε`.
#[inline]
pub fn gate_pama(noon_adv: f64, ratio: f64, clip: RatioClip) -> Result<f64> {
    check_ratio(ratio)?;
    if !(noon_adv >= 0.0) {
        return Err(Error::domain("gate_pama expects a non-negative advantage"));
    }
    Ok(if ratio > 1.0 + clip.epsilon { 0.0 } else { noon_adv })
}

/// Two-sided gate for signed advantages.
#[inline]
pub fn gate_mgda_ub(adv: f64, ratio: f64, clip: RatioClip) -> Result<f64> {
    check_ratio(ratio)?;
    let clipped = (adv > 0.0 && ratio > 1.0 + clip.epsilon)
        || (adv < 0.0 && ratio < 1.0 - clip.epsilon);
    Ok(if clipped || adv == 0.0 { 0.0 } else { adv })
}

/// Which gate produced [`AdvantageBatch::gated`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    Pama,
    MgdaUb,
}

/// Per-objective advantages over a flat token axis.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageBatch {
    /// `N × T` raw GAE advantages.
    pub raw: Vec<Vec<f64>>,
    /// `N × T` Noon advantages.
    pub noon: Vec<Vec<f64>>,
    /// `N × T` gated advantages; empty until [`AdvantageBatch::apply_gate`].
    pub gated: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl AdvantageBatch {
    pub fn new(raw: Vec<Vec<f64>>, mask: Vec<bool>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Empty("advantage objectives"));
        }
        for row in &raw {
            check_len("advantage stream", mask.len(), row.len())?;
            check_finite("advantage stream", row)?;
        }
        let noon = noon_clamp(&raw);
        Ok(Self {
            raw,
            noon,
            gated: Vec::new(),
            mask,
        })
    }

    pub fn n_objectives(&self) -> usize {
        self.raw.len()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// Fills `gated` from `source` (`noon` or `raw`) at the current ratios.
    pub fn apply_gate(
        &mut self,
        kind: GateKind,
        use_noon: bool,
        ratios: &[f64],
        clip: RatioClip,
    ) -> Result<()> {
        check_len("ratios", self.len(), ratios.len())?;
        let source = if use_noon { &self.noon } else { &self.raw };
        let mut gated = Vec::with_capacity(source.len());
        for row in source {
            let mut out = Vec::with_capacity(row.len());
            for (t, (&a, &u)) in row.iter().zip(ratios).enumerate() {
                out.push(if !self.mask[t] {
                    0.0
                } else {
                    match kind {
                        GateKind::Pama => gate_pama(a, u, clip)?,
                        GateKind::MgdaUb => gate_mgda_ub(a, u, clip)?,
                    }
                });
            }
            gated.push(out);
        }
        self.gated = gated;
        Ok(())
    }
}

/// Standardizes the masked entries (population variance); masked entries
/// become 0.
pub fn whiten(adv: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    check_len("whiten mask", adv.len(), mask.len())?;
    let count = mask.iter().filter(|&&m| m).count();
    if count < 2 {
        return Err(Error::domain("whitening needs at least two valid entries"));
    }
    let n = count as f64;
    let mean = adv.iter().zip(mask).filter(|(_, &m)| m).map(|(a, _)| a).sum::<f64>() / n;
    let var = adv
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(a, _)| (a - mean) * (a - mean))
        .sum::<f64>()
        / n;
    let scale = sqrt(var) + 1e-8;
    Ok(adv
        .iter()
        .zip(mask)
        .map(|(&a, &m)| if m { (a - mean) / scale } else { 0.0 })
        .collect())
}
