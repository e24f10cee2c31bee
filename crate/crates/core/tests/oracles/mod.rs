//! Independent reference implementations used by the integration and
//! acceptance tests. Nothing here calls into the library under test.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Minimum of `(Σ c_i a_i)²` over vertices, every pairwise edge sampled at
/// `step`, and `interior` random Dirichlet(1) points.
///
/// A linear function on the simplex attains its range on the edges, so the
/// edge sweep brackets the true optimum to within one grid cell.
pub fn scalar_min_norm_oracle(values: &[f64], step: f64, interior: usize, rng: &mut ChaCha8Rng) -> f64 {
    let n = values.len();
    let mut best = f64::INFINITY;
    for &v in values {
        best = best.min(v * v);
    }
    let cells = (1.0 / step).round() as usize;
    for i in 0..n {
        for j in (i + 1)..n {
            for k in 0..=cells {
                let c = k as f64 / cells as f64;
                let s = c * values[i] + (1.0 - c) * values[j];
                best = best.min(s * s);
            }
        }
    }
    for _ in 0..interior {
        let w = dirichlet(n, rng);
        let s: f64 = w.iter().zip(values).map(|(c, a)| c * a).sum();
        best = best.min(s * s);
    }
    best
}

/// Case label by the sign test on the raw values.
pub fn sign_case(values: &[f64]) -> &'static str {
    if values.iter().all(|&v| v > 0.0) {
        "min"
    } else if values.iter().all(|&v| v < 0.0) {
        "max"
    } else {
        "zero"
    }
}

pub fn dirichlet(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Minimum of `||c0 g0 + c1 g1 + c2 g2||²` over a barycentric grid with `cells`
/// subdivisions per side, followed by a local refinement around the best cell.
pub fn triangle_min_norm_oracle(g: &[Vec<f64>; 3], cells: usize) -> f64 {
    let eval = |a: f64, b: f64| -> f64 {
        let c = 1.0 - a - b;
        (0..g[0].len())
            .map(|k| {
                let x = a * g[0][k] + b * g[1][k] + c * g[2][k];
                x * x
            })
            .sum()
    };
    let h = 1.0 / cells as f64;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..=cells {
        for j in 0..=(cells - i) {
            let (a, b) = (i as f64 * h, j as f64 * h);
            let f = eval(a, b);
            if f < best.0 {
                best = (f, a, b);
            }
        }
    }
    // refine on a finer grid around the best point, staying in the simplex
    let mut step = h;
    for _ in 0..6 {
        let (_, a0, b0) = best;
        let fine = step / 10.0;
        for i in -10i32..=10 {
            for j in -10i32..=10 {
                let a = a0 + i as f64 * fine;
                let b = b0 + j as f64 * fine;
                if a < 0.0 || b < 0.0 || a + b > 1.0 {
                    continue;
                }
                let f = eval(a, b);
                if f < best.0 {
                    best = (f, a, b);
                }
            }
        }
        step = fine;
    }
    best.0
}

/// `A_t = Σ_{l ≥ 0} (γλ)^l δ_{t+l}` written out as a double loop.
pub fn gae_double_sum(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let t_len = rewards.len();
    let delta: Vec<f64> = (0..t_len)
        .map(|t| rewards[t] + gamma * values[t + 1] - values[t])
        .collect();
    (0..t_len)
        .map(|t| {
            let mut total = 0.0;
            for l in 0..(t_len - t) {
                total += (gamma * lambda).powi(l as i32) * delta[t + l];
            }
            total
        })
        .collect()
}

/// Central finite differences of `f` at `x`.
pub fn central_fd(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let up = f(&xp);
            xp[i] = orig - h;
            let down = f(&xp);
            xp[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(m: &[f64], d: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * d + j] * a[i * d + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i * d + i]).collect()
}

/// `BᵀB` for a random `d × d` matrix `B` with entries in `[-1, 1]`.
pub fn random_psd(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let b: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = (0..d).map(|k| b[k * d + i] * b[k * d + j]).sum();
        }
    }
    // exact symmetry
    for i in 0..d {
        for j in 0..i {
            m[i * d + j] = m[j * d + i];
        }
    }
    m
}

/// Plain masked mean of `logp − ref_logp`.
pub fn kl_loop(logp: &[f64], ref_logp: &[f64], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for t in 0..logp.len() {
        if mask[t] {
            total += logp[t] - ref_logp[t];
            count += 1.0;
        }
    }
    total / count
}

/// Log-softmax straight from the definition.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let z: f64 = logits.iter().map(|x| x.exp()).sum();
    logits.iter().map(|x| x - z.ln()).collect()
}
