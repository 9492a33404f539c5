//! t-SNE for embedding-space visualisation: perplexity-matched Gaussian
//! conditionals (binary search), symmetrised joint P, Student-t low-
//! dimensional affinities, and momentum gradient descent on KL(P || Q) with
//! early exaggeration. Single-threaded and deterministic under the seed.

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations during which P is multiplied by `early_exaggeration`.
    pub exaggeration_iters: usize,
    pub momentum_early: f64,
    pub momentum_late: f64,
    /// Iteration at which momentum switches from early to late.
    pub momentum_switch: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_early: 0.5,
            momentum_late: 0.8,
            momentum_switch: 250,
            seed: 71,
        }
    }
}

impl TsneConfig {
    /// Default settings with the perplexity clipped to feasibility for `n`
    /// points (perplexity must stay below (n - 1) / 3).
    pub fn for_n(n: usize, seed: u64) -> Self {
        let max_feasible = (n.saturating_sub(1)) as f64 / 3.0;
        let perplexity = 30.0_f64.min((max_feasible - 1e-9).max(1.0));
        TsneConfig { perplexity, seed, ..TsneConfig::default() }
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// `(n, 2)` output coordinates.
    pub points: Array2<f64>,
    /// KL(P || Q) against the unexaggerated P at every iteration.
    pub kl_trace: Vec<f64>,
}

/// Pairwise squared euclidean distances.
fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for k in 0..x.ncols() {
                let diff = x[[i, k]] - x[[j, k]];
                s += diff * diff;
            }
            d[[i, j]] = s;
            d[[j, i]] = s;
        }
    }
    d
}

/// Row-stochastic conditional probabilities whose per-row entropy matches
/// log2(perplexity), via binary search over the Gaussian precision.
pub fn conditional_probabilities(dist2: &Array2<f64>, perplexity: f64) -> Array2<f64> {
    let n = dist2.nrows();
    let target_entropy = perplexity.ln();
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        let mut row = vec![0.0; n];
        for _ in 0..64 {
            // shifted by the row minimum for numerical stability
            let dmin = (0..n)
                .filter(|&j| j != i)
                .map(|j| dist2[[i, j]])
                .fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            let mut sum_dp = 0.0;
            for (j, r) in row.iter_mut().enumerate() {
                if j == i {
                    *r = 0.0;
                    continue;
                }
                let e = (-beta * (dist2[[i, j]] - dmin)).exp();
                *r = e;
                sum += e;
                sum_dp += dist2[[i, j]] * e;
            }
            // entropy H = ln(sum) + beta * (E[d] - dmin)
            let h = sum.ln() + beta * (sum_dp / sum - dmin);
            let diff = h - target_entropy;
            if diff.abs() < 1e-7 {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_infinite() { beta * 2.0 } else { (beta + beta_max) / 2.0 };
            } else {
                beta_max = beta;
                beta = if beta_min.is_infinite() { beta / 2.0 } else { (beta + beta_min) / 2.0 };
            }
        }
        let sum: f64 = row.iter().sum();
        for j in 0..n {
            p[[i, j]] = row[j] / sum;
        }
    }
    p
}

/// Symmetrised joint distribution p_ij = (p_j|i + p_i|j) / 2n, floored at
/// 1e-12; sums to 1 up to the floor.
pub fn symmetrize(p_cond: &Array2<f64>) -> Array2<f64> {
    let n = p_cond.nrows() as f64;
    let mut p = Array2::zeros(p_cond.raw_dim());
    for i in 0..p_cond.nrows() {
        for j in 0..p_cond.ncols() {
            if i != j {
                p[[i, j]] = ((p_cond[[i, j]] + p_cond[[j, i]]) / (2.0 * n)).max(1e-12);
            }
        }
    }
    p
}

/// Student-t affinities of the 2-D layout, plus the unnormalised kernel.
fn q_affinities(y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let n = y.nrows();
    let mut num = Array2::zeros((n, n));
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = y[[i, 0]] - y[[j, 0]];
            let dy = y[[i, 1]] - y[[j, 1]];
            let k = 1.0 / (1.0 + dx * dx + dy * dy);
            num[[i, j]] = k;
            num[[j, i]] = k;
            total += 2.0 * k;
        }
    }
    let q = num.mapv(|v| (v / total).max(1e-12));
    (q, num)
}

/// KL(P || Q) over off-diagonal entries.
pub fn kl_divergence(p: &Array2<f64>, q: &Array2<f64>) -> f64 {
    let mut kl = 0.0;
    for i in 0..p.nrows() {
        for j in 0..p.ncols() {
            if i != j && p[[i, j]] > 0.0 {
                kl += p[[i, j]] * (p[[i, j]] / q[[i, j]]).ln();
            }
        }
    }
    kl
}

/// KL(P || Q(Y)) and its gradient wrt the 2-D layout Y.
pub fn kl_and_gradient(p: &Array2<f64>, y: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = y.nrows();
    let (q, num) = q_affinities(y);
    let kl = kl_divergence(p, &q);
    let mut grad = Array2::zeros((n, 2));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let coeff = 4.0 * (p[[i, j]] - q[[i, j]]) * num[[i, j]];
            grad[[i, 0]] += coeff * (y[[i, 0]] - y[[j, 0]]);
            grad[[i, 1]] += coeff * (y[[i, 1]] - y[[j, 1]]);
        }
    }
    (kl, grad)
}

/// Standard t-SNE to 2-D. Errors if `n < 4` or the perplexity is infeasible
/// (must be below (n - 1) / 3).
pub fn tsne(embeddings: &Array2<f64>, cfg: &TsneConfig) -> Result<TsneResult> {
    let n = embeddings.nrows();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("t-SNE needs n >= 4 points, got {n}")));
    }
    if !(cfg.perplexity >= 1.0 && cfg.perplexity < (n - 1) as f64 / 3.0) {
        return Err(Error::InvalidArgument(format!(
            "perplexity {} infeasible for n = {n} (must be in [1, {}))",
            cfg.perplexity,
            (n - 1) as f64 / 3.0
        )));
    }
    if cfg.iterations == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::InvalidArgument("iterations >= 1 and learning_rate > 0 required".into()));
    }

    let dist2 = squared_distances(embeddings);
    let p_cond = conditional_probabilities(&dist2, cfg.perplexity);
    let p = symmetrize(&p_cond);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut y = Array2::from_shape_fn((n, 2), |_| {
        // Box-Muller standard normal, scaled small
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random();
        1e-4 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    let mut velocity = Array2::<f64>::zeros((n, 2));
    // per-coordinate adaptive gains (delta-bar-delta), as in the reference
    // implementation; grown when the gradient keeps its direction of travel,
    // shrunk when it flips, floored at 0.01
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut kl_trace = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let exaggerate = it < cfg.exaggeration_iters;
        let p_used = if exaggerate { p.mapv(|v| v * cfg.early_exaggeration) } else { p.clone() };
        let (_, grad) = kl_and_gradient(&p_used, &y);
        // trace records the divergence against the true P
        let (q, _) = q_affinities(&y);
        kl_trace.push(kl_divergence(&p, &q));
        let momentum = if it < cfg.momentum_switch { cfg.momentum_early } else { cfg.momentum_late };
        for i in 0..n {
            for k in 0..2 {
                let same_dir = grad[[i, k]].signum() == velocity[[i, k]].signum();
                gains[[i, k]] =
                    if same_dir { (gains[[i, k]] * 0.8).max(0.01) } else { gains[[i, k]] + 0.2 };
                velocity[[i, k]] = momentum * velocity[[i, k]]
                    - cfg.learning_rate * gains[[i, k]] * grad[[i, k]];
            }
        }
        y = &y + &velocity;
        // recentre to remove the translational degree of freedom
        for k in 0..2 {
            let mean = y.column(k).sum() / n as f64;
            for i in 0..n {
                y[[i, k]] -= mean;
            }
        }
    }
    Ok(TsneResult { points: y, kl_trace })
}
