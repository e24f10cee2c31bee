//! Min-norm problems over the probability simplex.
//!
//! [`solve_closed_form`] handles the scalar case: for values `A_1..A_N` the
//! minimizer of `(Σ c_i A_i)²` over the simplex is the projection of 0 onto
//! `[min A, max A]`. It runs in O(N) and never touches a gradient.
//!
//! [`solve_min_norm_fw`] solves the vector problem `min_c ||Σ c_i g_i||²`
//! through the Gram matrix with an away-step Frank–Wolfe method. It exists as
//! an oracle for the scalar solver and as the stationarity checker.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{check_finite, check_len, Error, Result};
use crate::math::dot;

/// Absolute tolerance on the simplex sum constraint.
pub const SIMPLEX_SUM_TOL: f64 = 1e-12;

/// A weight vector on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexWeights(Vec<f64>);

impl SimplexWeights {
    /// Validates non-negativity and unit sum.
    pub fn new(c: Vec<f64>) -> Result<Self> {
        if c.is_empty() {
            return Err(Error::Empty("simplex weights"));
        }
        check_finite("simplex weights", &c)?;
        if let Some(i) = c.iter().position(|&w| w < 0.0) {
            return Err(Error::domain(alloc::format!(
                "simplex weight {i} is negative ({})",
                c[i]
            )));
        }
        let sum: f64 = c.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_SUM_TOL {
            return Err(Error::domain(alloc::format!(
                "simplex weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self(c))
    }

    pub fn one_hot(n: usize, index: usize) -> Self {
        assert!(index < n, "one-hot index out of range");
        let mut c = vec![0.0; n];
        c[index] = 1.0;
        Self(c)
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform weights need at least one entry");
        Self(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `Σ c_i x_i`.
    pub fn combine(&self, values: &[f64]) -> f64 {
        dot(&self.0, values)
    }
}

/// Which branch of the scalar solution applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosedFormCase {
    /// `min ≤ 0 ≤ max`: zero lies in the hull.
    Zero,
    /// Every value positive: the minimum is selected.
    Min,
    /// Every value negative: the maximum is selected.
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormSolution {
    pub s_star: f64,
    pub weights: SimplexWeights,
    pub case: ClosedFormCase,
}

/// Index of the smallest and largest entry, lowest index on ties.
fn extrema(values: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[lo] {
            lo = i;
        }
        if v > values[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Classifies the scalar problem and returns `s*` without building weights.
pub fn closed_form_value(values: &[f64]) -> Result<(f64, ClosedFormCase)> {
    if values.is_empty() {
        return Err(Error::Empty("closed-form values"));
    }
    check_finite("closed-form values", values)?;
    let (lo, hi) = extrema(values);
    let (min, max) = (values[lo], values[hi]);
    Ok(if min > 0.0 {
        (min, ClosedFormCase::Min)
    } else if max < 0.0 {
        (max, ClosedFormCase::Max)
    } else {
        (0.0, ClosedFormCase::Zero)
    })
}

/// Solves `min_{c ∈ Δ} (Σ c_i A_i)²` exactly.
///
/// Weights: one-hot at the argmin (all positive) or argmax (all negative);
/// one-hot at the first exact zero when one exists; otherwise the two-vertex
/// mix of the extreme entries that hits zero.
pub fn solve_closed_form(values: &[f64]) -> Result<ClosedFormSolution> {
    let (s_star, case) = closed_form_value(values)?;
    let n = values.len();
    let (lo, hi) = extrema(values);
    let weights = match case {
        ClosedFormCase::Min => SimplexWeights::one_hot(n, lo),
        ClosedFormCase::Max => SimplexWeights::one_hot(n, hi),
        ClosedFormCase::Zero => match values.iter().position(|&v| v == 0.0) {
            Some(z) => SimplexWeights::one_hot(n, z),
            None => {
                let (min, max) = (values[lo], values[hi]);
                let c_hi = -min / (max - min);
                let mut c = vec![0.0; n];
                c[hi] = c_hi;
                c[lo] = 1.0 - c_hi;
                SimplexWeights(c)
            }
        },
    };
    Ok(ClosedFormSolution {
        s_star,
        weights,
        case,
    })
}

/// Dense symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    n: usize,
    data: Vec<f64>,
}

impl Gram {
    pub fn from_rows(n: usize, data: Vec<f64>) -> Result<Self> {
        check_len("gram matrix", n * n, data.len())?;
        Ok(Self { n, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `cᵀ G c`.
    pub fn quad_form(&self, c: &[f64]) -> f64 {
        (0..self.n).map(|i| c[i] * dot(self.row(i), c)).sum()
    }
}

fn check_gradients<V: AsRef<[f64]>>(gradients: &[V]) -> Result<usize> {
    let first = gradients.first().ok_or(Error::Empty("gradients"))?;
    let d = first.as_ref().len();
    for g in gradients {
        check_len("gradient dimension", d, g.as_ref().len())?;
    }
    Ok(d)
}

/// `G_ij = ⟨g_i, g_j⟩`. Only the upper triangle is computed, so the result is
/// exactly symmetric.
pub fn gram_matrix<V: AsRef<[f64]>>(gradients: &[V]) -> Result<Gram> {
    check_gradients(gradients)?;
    let n = gradients.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = dot(gradients[i].as_ref(), gradients[j].as_ref());
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    Ok(Gram { n, data })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FwOptions {
    pub max_iters: usize,
    /// Bound on the Frank–Wolfe duality gap, which upper-bounds the
    /// suboptimality of `cᵀGc`.
    pub tol: f64,
}

impl Default for FwOptions {
    fn default() -> Self {
        Self {
            max_iters: 250,
            tol: 1e-10,
        }
    }
}

/// Solution of the simplex QP on the Gram matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSolution {
    pub weights: SimplexWeights,
    pub objective: f64,
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinNormPoint {
    pub weights: SimplexWeights,
    pub point: Vec<f64>,
    pub squared_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Exact minimizer of `||γ a + (1-γ) b||²` over `γ ∈ [0, 1]`, expressed
/// through Gram entries.
fn two_point_weight(aa: f64, ab: f64, bb: f64) -> f64 {
    let denom = aa - 2.0 * ab + bb;
    if denom <= 0.0 {
        // a == b: any point is optimal
        return if aa <= bb { 1.0 } else { 0.0 };
    }
    ((bb - ab) / denom).clamp(0.0, 1.0)
}

/// Solves `min_{c ∈ Δ} cᵀ G c`. `observer` sees the objective after every
/// accepted iterate, starting with the initial vertex.
pub fn solve_gram_qp(
    gram: &Gram,
    opts: FwOptions,
    mut observer: impl FnMut(f64),
) -> Result<GramSolution> {
    let n = gram.n();
    if n == 0 {
        return Err(Error::Empty("gram matrix"));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::domain("Frank-Wolfe tolerance must be positive"));
    }
    check_finite("gram matrix", gram.as_slice())?;

    if n == 1 {
        observer(gram.get(0, 0));
        return Ok(GramSolution {
            weights: SimplexWeights::one_hot(1, 0),
            objective: gram.get(0, 0),
            gap: 0.0,
            iterations: 0,
            converged: true,
        });
    }

    if n == 2 {
        let (aa, ab, bb) = (gram.get(0, 0), gram.get(0, 1), gram.get(1, 1));
        let start = aa.min(bb);
        observer(start);
        let g = two_point_weight(aa, ab, bb);
        let mut c = vec![g, 1.0 - g];
        let mut objective = gram.quad_form(&c);
        if objective > start {
            c = if aa <= bb { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
            objective = start;
        }
        let objective = objective.max(0.0);
        observer(objective);
        return Ok(GramSolution {
            weights: SimplexWeights(c),
            objective,
            gap: 0.0,
            iterations: 1,
            converged: true,
        });
    }

    // start at the shortest vertex
    let start = (0..n).fold(0, |best, i| {
        if gram.get(i, i) < gram.get(best, best) {
            i
        } else {
            best
        }
    });
    let mut c = vec![0.0; n];
    c[start] = 1.0;
    let mut gc: Vec<f64> = gram.row(start).to_vec();
    let mut f = gram.get(start, start);
    observer(f);

    let mut gap = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iters {
        // toward vertex: smallest (Gc)_j; away vertex: largest (Gc)_j on the support
        let s = (0..n).fold(0, |b, j| if gc[j] < gc[b] { j } else { b });
        gap = 2.0 * (f - gc[s]);
        if gap <= opts.tol {
            converged = true;
            break;
        }
        let v = (0..n)
            .filter(|&j| c[j] > 0.0)
            .fold(None, |b: Option<usize>, j| match b {
                Some(b) if gc[b] >= gc[j] => Some(b),
                _ => Some(j),
            })
            .expect("support is never empty");
        let away_gap = gc[v] - f;

        let (toward, slope, curvature, step_max) = if f - gc[s] >= away_gap {
            (true, gc[s] - f, gram.get(s, s) - 2.0 * gc[s] + f, 1.0)
        } else {
            let cv = c[v];
            let step_max = if cv < 1.0 { cv / (1.0 - cv) } else { 0.0 };
            (false, f - gc[v], f - 2.0 * gc[v] + gram.get(v, v), step_max)
        };
        let step = if curvature > 0.0 {
            (-slope / curvature).clamp(0.0, step_max)
        } else {
            step_max
        };
        if step <= 0.0 {
            break;
        }

        let mut c_next = c.clone();
        let mut gc_next = gc.clone();
        if toward {
            for j in 0..n {
                c_next[j] *= 1.0 - step;
                gc_next[j] = (1.0 - step) * gc[j] + step * gram.get(j, s);
            }
            c_next[s] += step;
        } else {
            for j in 0..n {
                c_next[j] *= 1.0 + step;
                gc_next[j] = (1.0 + step) * gc[j] - step * gram.get(j, v);
            }
            c_next[v] -= step;
            if step == step_max {
                c_next[v] = 0.0;
            }
        }
        for w in c_next.iter_mut() {
            if *w < 0.0 {
                *w = 0.0;
            }
        }
        let sum: f64 = c_next.iter().sum();
        for w in c_next.iter_mut() {
            *w /= sum;
        }
        let f_next = dot(&c_next, &gc_next);
        iterations += 1;
        if f_next > f {
            // rounding stalled the line search
            break;
        }
        c = c_next;
        gc = gc_next;
        f = f_next;
        observer(f);
    }

    // refresh Gc from scratch to drop accumulated drift
    let objective = gram.quad_form(&c).max(0.0);
    Ok(GramSolution {
        weights: SimplexWeights(c),
        objective,
        gap,
        iterations,
        converged: converged || gap <= opts.tol,
    })
}

/// `min_{c ∈ Δ} ||Σ c_i g_i||²` via the Gram matrix.
pub fn solve_min_norm_fw<V: AsRef<[f64]>>(
    gradients: &[V],
    max_iters: usize,
    tol: f64,
) -> Result<MinNormPoint> {
    solve_min_norm_observed(gradients, FwOptions { max_iters, tol }, |_| {})
}

pub fn solve_min_norm_observed<V: AsRef<[f64]>>(
    gradients: &[V],
    opts: FwOptions,
    observer: impl FnMut(f64),
) -> Result<MinNormPoint> {
    let d = check_gradients(gradients)?;
    for g in gradients {
        check_finite("gradient", g.as_ref())?;
    }
    let gram = gram_matrix(gradients)?;
    let sol = solve_gram_qp(&gram, opts, observer)?;
    let mut point = vec![0.0; d];
    for (g, &w) in gradients.iter().zip(sol.weights.as_slice()) {
        if w != 0.0 {
            for (p, x) in point.iter_mut().zip(g.as_ref()) {
                *p += w * x;
            }
        }
    }
    let squared_norm = dot(&point, &point);
    Ok(MinNormPoint {
        weights: sol.weights,
        point,
        squared_norm,
        iterations: sol.iterations,
        converged: sol.converged,
    })
}
