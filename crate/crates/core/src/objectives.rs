//! Per-objective losses, reward shaping and advantage aggregation.
//!
//! Every surrogate is returned as a loss (negated objective) so callers
//! always minimize.

use alloc::vec;
use alloc::vec::Vec;

use crate::advantage::{AdvantageBatch, GateKind, RatioClip};
use crate::autodiff::{surrogate_term, value_term};
use crate::error::{check_finite, check_len, Error, Result};
use crate::simplex::{solve_closed_form, SimplexWeights};

/// KL penalty coefficient and the inner-epoch early-stop threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlConfig {
    pub beta: f64,
    pub target_kl: f64,
}

impl KlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::domain("KL beta must be finite and non-negative"));
        }
        if !(self.target_kl > 0.0 && self.target_kl.is_finite()) {
            return Err(Error::domain("target KL must be finite and positive"));
        }
        Ok(())
    }
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            beta: 0.2,
            target_kl: 3.0,
        }
    }
}

/// Where the min-norm weights are solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    /// One closed-form solve per token.
    Token,
    /// One solve on the masked mean of each objective's gated advantages.
    BatchMean,
}

fn masked_mean(values: impl Iterator<Item = f64>, mask: &[bool]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (v, &m) in values.zip(mask) {
        if m {
            total += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("mask selects no tokens"));
    }
    Ok(total / count as f64)
}

/// PPO clipped surrogate loss for signed advantages.
pub fn clipped_surrogate(ratio: &[f64], adv: &[f64], clip: RatioClip, mask: &[bool]) -> Result<f64> {
    check_len("surrogate advantages", ratio.len(), adv.len())?;
    check_len("surrogate mask", ratio.len(), mask.len())?;
    let terms = ratio
        .iter()
        .zip(adv)
        .map(|(&u, &a)| surrogate_term(u, a, clip.epsilon).0);
    Ok(-masked_mean(terms, mask)?)
}

/// Noon PPO loss. With `A ≥ 0` every token contributes `min(u, 1+ε)·A`.
pub fn noon_surrogate(ratio: &[f64], noon_adv: &[f64], clip: RatioClip, mask: &[bool]) -> Result<f64> {
    if let Some(i) = noon_adv.iter().position(|&a| !(a >= 0.0)) {
        return Err(Error::domain(alloc::format!(
            "Noon advantage {i} is negative or NaN"
        )));
    }
    clipped_surrogate(ratio, noon_adv, clip, mask)
}

/// Aggregated advantage per token and the weights that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregation {
    pub agg_adv: Vec<f64>,
    /// `T × N`.
    pub weights: Vec<Vec<f64>>,
}

impl Aggregation {
    /// Per-objective weight averaged over masked tokens.
    pub fn mean_weights(&self, mask: &[bool]) -> Vec<f64> {
        let n = self.weights.first().map_or(0, Vec::len);
        let mut out = vec![0.0; n];
        let mut count = 0usize;
        for (w, &m) in self.weights.iter().zip(mask) {
            if m {
                count += 1;
                for (o, x) in out.iter_mut().zip(w) {
                    *o += x;
                }
            }
        }
        if count > 0 {
            for o in &mut out {
                *o /= count as f64;
            }
        }
        out
    }
}

fn closed_form_aggregate(gated: &[Vec<f64>], mask: &[bool], granularity: Granularity) -> Result<Aggregation> {
    let n = gated.len();
    if n == 0 {
        return Err(Error::Empty("objectives"));
    }
    let t_len = mask.len();
    let mut agg_adv = vec![0.0; t_len];
    let mut weights = Vec::with_capacity(t_len);
    match granularity {
        Granularity::Token => {
            let mut column = vec![0.0; n];
            for t in 0..t_len {
                if !mask[t] {
                    weights.push(SimplexWeights::uniform(n).into_vec());
                    continue;
                }
                for i in 0..n {
                    column[i] = gated[i][t];
                }
                let sol = solve_closed_form(&column)?;
                agg_adv[t] = sol.s_star;
                weights.push(sol.weights.into_vec());
            }
        }
        Granularity::BatchMean => {
            let means = gated
                .iter()
                .map(|row| masked_mean(row.iter().copied(), mask))
                .collect::<Result<Vec<_>>>()?;
            let c = solve_closed_form(&means)?.weights.into_vec();
            for t in 0..t_len {
                if mask[t] {
                    agg_adv[t] = (0..n).map(|i| c[i] * gated[i][t]).sum();
                }
                weights.push(c.clone());
            }
        }
    }
    Ok(Aggregation { agg_adv, weights })
}

/// Gates Noon advantages at the current ratios and solves the scalar
/// min-norm problem. Token granularity yields `min_i gated[i][t]`.
pub fn pama_aggregate(
    adv: &mut AdvantageBatch,
    ratios: &[f64],
    clip: RatioClip,
    granularity: Granularity,
) -> Result<Aggregation> {
    adv.apply_gate(GateKind::Pama, true, ratios, clip)?;
    closed_form_aggregate(&adv.gated, &adv.mask, granularity)
}

/// Two-sided gate on signed (or Noon) advantages, then the same scalar solve.
pub fn mgda_ub_aggregate(
    adv: &mut AdvantageBatch,
    ratios: &[f64],
    clip: RatioClip,
    use_noon: bool,
    granularity: Granularity,
) -> Result<Aggregation> {
    adv.apply_gate(GateKind::MgdaUb, use_noon, ratios, clip)?;
    closed_form_aggregate(&adv.gated, &adv.mask, granularity)
}

/// Fixed weighted sum of raw (or Noon) advantages.
pub fn morlhf_aggregate(adv: &AdvantageBatch, fixed_weights: &SimplexWeights, use_noon: bool) -> Result<Vec<f64>> {
    check_len("MORLHF weights", adv.n_objectives(), fixed_weights.len())?;
    let source = if use_noon { &adv.noon } else { &adv.raw };
    let w = fixed_weights.as_slice();
    Ok((0..adv.len())
        .map(|t| {
            if adv.mask[t] {
                (0..w.len()).map(|i| w[i] * source[i][t]).sum()
            } else {
                0.0
            }
        })
        .collect())
}

/// Adds `−β (logp − ref_logp)` to every reward channel at every token.
pub fn kl_shape_rewards(rewards: &[Vec<f64>], logp: &[f64], ref_logp: &[f64], kl: KlConfig) -> Result<Vec<Vec<f64>>> {
    check_len("reference log-probs", logp.len(), ref_logp.len())?;
    check_finite("log-probs", logp)?;
    check_finite("reference log-probs", ref_logp)?;
    rewards
        .iter()
        .map(|row| {
            check_len("reward stream", logp.len(), row.len())?;
            Ok(row
                .iter()
                .zip(logp.iter().zip(ref_logp))
                .map(|(&r, (&lp, &rlp))| r - kl.beta * (lp - rlp))
                .collect())
        })
        .collect()
}

/// Clipped value loss per head: `0.5 · mean max((v−R)², (clip(v, v_old±c)−R)²)`.
pub fn value_loss(
    values_pred: &[Vec<f64>],
    returns: &[Vec<f64>],
    old_values: &[Vec<f64>],
    clip_range: f64,
    mask: &[bool],
) -> Result<Vec<f64>> {
    check_len("value heads (returns)", values_pred.len(), returns.len())?;
    check_len("value heads (old values)", values_pred.len(), old_values.len())?;
    values_pred
        .iter()
        .zip(returns.iter().zip(old_values))
        .map(|(v, (r, o))| {
            check_len("value stream", mask.len(), v.len())?;
            check_len("return stream", mask.len(), r.len())?;
            check_len("old value stream", mask.len(), o.len())?;
            let terms = (0..mask.len()).map(|t| value_term(v[t], r[t], o[t], clip_range).0);
            Ok(0.5 * masked_mean(terms, mask)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(cols: &[&[f64]]) -> AdvantageBatch {
        // cols are per-token columns; transpose to N × T
        let n = cols[0].len();
        let raw = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        AdvantageBatch::new(raw, vec![true; cols.len()]).unwrap()
    }

    #[test]
    fn noon_surrogate_examples() {
        let clip = RatioClip::default();
        let l = noon_surrogate(&[1.5], &[2.0], clip, &[true]).unwrap();
        assert!((l + 2.4).abs() < 1e-15);
        let l = noon_surrogate(&[0.5], &[2.0], clip, &[true]).unwrap();
        assert_eq!(l, -1.0);
        let l = noon_surrogate(&[0.3, 7.0], &[0.0, 0.0], clip, &[true, true]).unwrap();
        assert_eq!(l, 0.0);
        assert!(noon_surrogate(&[1.0], &[-1.0], clip, &[true]).is_err());
        assert!(noon_surrogate(&[1.0], &[1.0], clip, &[false]).is_err());
    }

    #[test]
    fn pama_columns() {
        let clip = RatioClip::default();
        let mut b = batch(&[&[0.3, 0.8], &[0.0, 0.8]]);
        let agg = pama_aggregate(&mut b, &[1.0, 1.0], clip, Granularity::Token).unwrap();
        assert_eq!(agg.agg_adv, vec![0.3, 0.0]);
        assert_eq!(agg.weights[0], vec![1.0, 0.0]);
        assert_eq!(agg.weights[1], vec![1.0, 0.0]);
    }

    #[test]
    fn pama_gate_zeroes_high_ratio_tokens() {
        let mut b = batch(&[&[0.3, 0.8]]);
        let agg = pama_aggregate(&mut b, &[1.5], RatioClip::default(), Granularity::Token).unwrap();
        assert_eq!(agg.agg_adv, vec![0.0]);
    }

    #[test]
    fn batch_mean_granularity() {
        let mut b = batch(&[&[1.0, 3.0], &[2.0, 1.0]]);
        let agg = pama_aggregate(&mut b, &[1.0, 1.0], RatioClip::default(), Granularity::BatchMean).unwrap();
        // means (1.5, 2.0) → weight on objective 0
        assert_eq!(agg.weights[0], vec![1.0, 0.0]);
        assert_eq!(agg.agg_adv, vec![1.0, 2.0]);
    }

    #[test]
    fn mgda_columns() {
        let clip = RatioClip::default();
        let mut b = batch(&[&[-1.0, 1.0], &[0.5, 0.2], &[-2.0, -3.0]]);
        let agg = mgda_ub_aggregate(&mut b, &[1.0; 3], clip, false, Granularity::Token).unwrap();
        assert_eq!(agg.agg_adv, vec![0.0, 0.2, -2.0]);
    }

    #[test]
    fn morlhf_examples() {
        let b = batch(&[&[1.0, -1.0], &[2.0, 4.0]]);
        let w = SimplexWeights::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(morlhf_aggregate(&b, &w, false).unwrap(), vec![1.0, 2.0]);
        let w = SimplexWeights::uniform(2);
        assert_eq!(morlhf_aggregate(&b, &w, false).unwrap()[1], 3.0);
        let w = SimplexWeights::new(vec![0.3, 0.7]).unwrap();
        let v = morlhf_aggregate(&b, &w, false).unwrap()[0];
        assert!((v + 0.4).abs() < 1e-15);
        // Noon variant drops the negative entry
        assert!((morlhf_aggregate(&b, &w, true).unwrap()[0] - 0.3).abs() < 1e-15);
        assert!(morlhf_aggregate(&b, &SimplexWeights::uniform(3), false).is_err());
    }

    #[test]
    fn kl_shaping_examples() {
        let r = vec![vec![1.0, 0.0], vec![0.5, 2.0]];
        let kl0 = KlConfig { beta: 0.0, target_kl: 3.0 };
        assert_eq!(kl_shape_rewards(&r, &[-1.0, -2.0], &[-1.5, -2.0], kl0).unwrap(), r);
        let kl = KlConfig::default();
        assert_eq!(kl_shape_rewards(&r, &[-1.0, -2.0], &[-1.0, -2.0], kl).unwrap(), r);
        let s = kl_shape_rewards(&r, &[-1.0, -2.0], &[-1.5, -2.0], kl).unwrap();
        assert!((s[0][0] - 0.9).abs() < 1e-15 && (s[1][0] - 0.4).abs() < 1e-15);
        assert_eq!(s[0][1], 0.0);
        assert_eq!(s[1][1], 2.0);
    }

    #[test]
    fn value_loss_examples() {
        let r = vec![vec![1.0, 2.0, 3.0]];
        let mask = [true; 3];
        assert_eq!(value_loss(&r, &r, &r, 0.2, &mask).unwrap(), vec![0.0]);
        let v = vec![vec![2.0, 3.0, 4.0]];
        assert_eq!(value_loss(&v, &r, &v, 0.2, &mask).unwrap(), vec![0.5]);
        assert!(value_loss(&v, &r, &[], 0.2, &mask).is_err());
    }
}
