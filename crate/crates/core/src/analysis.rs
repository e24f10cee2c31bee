//! Post-hoc checks: stationarity residuals, dominance, the descent lemma and
//! the benchmark record type.

use alloc::vec::Vec;

use crate::error::{check_finite, check_len, Error, Result};
use crate::math::{dot, sqrt};
use crate::simplex::{solve_min_norm_observed, FwOptions};
use crate::trainers::SmoothLoss;

/// Distance of the convex hull of the gradients from the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoReport {
    pub residual: f64,
    pub weights: Vec<f64>,
    pub gradient_norms: Vec<f64>,
    pub converged: bool,
}

impl ParetoReport {
    /// True when the weighted combination vanishes up to `tol`.
    pub fn is_stationary(&self, tol: f64) -> bool {
        self.residual <= tol
    }
}

/// Minimum norm over the simplex of `Σ c_i g_i`, computed with Frank–Wolfe.
pub fn stationarity_residual<V: AsRef<[f64]>>(gradients: &[V]) -> Result<ParetoReport> {
    stationarity_residual_with(gradients, FwOptions::default())
}

pub fn stationarity_residual_with<V: AsRef<[f64]>>(gradients: &[V], opts: FwOptions) -> Result<ParetoReport> {
    let sol = solve_min_norm_observed(gradients, opts, |_| {})?;
    let gradient_norms = gradients
        .iter()
        .map(|g| sqrt(dot(g.as_ref(), g.as_ref())))
        .collect();
    Ok(ParetoReport {
        residual: sqrt(sol.squared_norm.max(0.0)),
        weights: sol.weights.into_vec(),
        gradient_norms,
        converged: sol.converged,
    })
}

/// `a` dominates `b` when it is at least as good everywhere and strictly
/// better somewhere (larger is better).
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::domain("dominance needs vectors of equal length"));
    }
    check_finite("dominance lhs", a)?;
    check_finite("dominance rhs", b)?;
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return Ok(false);
        }
        if x > y {
            strict = true;
        }
    }
    Ok(strict)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Evaluates `f(x + g)` against `f(x) + ∇f(x)ᵀg + (κ/2)||g||²`.
pub fn descent_lemma_check(f: &dyn SmoothLoss, kappa: f64, x: &[f64], g: &[f64]) -> Result<DescentCheck> {
    check_len("descent direction", x.len(), g.len())?;
    check_len("loss dimension", f.dim(), x.len())?;
    let shifted: Vec<f64> = x.iter().zip(g).map(|(a, b)| a + b).collect();
    let lhs = f.value(&shifted);
    let grad = f.gradient(x);
    let rhs = f.value(x) + dot(&grad, g) + 0.5 * kappa * dot(g, g);
    let holds = lhs <= rhs + 1e-8 * (1.0 + rhs.abs());
    Ok(DescentCheck { lhs, rhs, holds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BenchMethod {
    ClosedForm,
    GramPlusQp,
}

impl BenchMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            BenchMethod::ClosedForm => "closed_form",
            BenchMethod::GramPlusQp => "gram_plus_qp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "closed_form" => Some(BenchMethod::ClosedForm),
            "gram_plus_qp" => Some(BenchMethod::GramPlusQp),
            _ => None,
        }
    }

    /// Leading-order operation count: `n` for the closed form, `n²d` for
    /// building the Gram matrix.
    pub fn ops_estimate(&self, n: usize, d: usize) -> u64 {
        let n = n as u64;
        match self {
            BenchMethod::ClosedForm => n,
            BenchMethod::GramPlusQp => n * n * d as u64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRecord {
    pub method: BenchMethod,
    pub n: usize,
    pub d: usize,
    /// Median seconds.
    pub wall_time: f64,
    pub ops_estimate: u64,
}

impl BenchRecord {
    pub fn new(method: BenchMethod, n: usize, d: usize, wall_time: f64) -> Self {
        Self {
            method,
            n,
            d,
            wall_time,
            ops_estimate: method.ops_estimate(n, d),
        }
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_len("slope samples", xs.len(), ys.len())?;
    if xs.len() < 2 {
        return Err(Error::domain("slope needs at least two points"));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return Err(Error::domain("log-log fit needs positive values"));
    }
    let lx: Vec<f64> = xs.iter().map(|&x| libm::log(x)).collect();
    let ly: Vec<f64> = ys.iter().map(|&y| libm::log(y)).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("log-log fit needs distinct x values"));
    }
    Ok(sxy / sxx)
}
