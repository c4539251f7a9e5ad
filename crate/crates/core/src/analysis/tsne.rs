//! Exact t-SNE.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, PartialEq)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub early_exaggeration: f64,
    /// Iterations that use exaggerated affinities and the lower momentum.
    pub exaggeration_iters: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.perplexity >= 2.0 && self.perplexity.is_finite()) {
            return Err(Error::Config(format!("perplexity must be >= 2, got {}", self.perplexity)));
        }
        if self.perplexity >= n as f64 {
            return Err(Error::Config(format!(
                "perplexity {} must be below the number of points ({n})",
                self.perplexity
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("t-SNE needs at least one iteration".into()));
        }
        if !(self.learning_rate > 0.0 && self.early_exaggeration >= 1.0) {
            return Err(Error::Config("learning rate must be > 0 and exaggeration >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityRow {
    pub probs: Vec<f64>,
    pub sigma: f64,
    /// Perplexity actually reached.
    pub perplexity: f64,
}

const PERPLEXITY_TOL: f64 = 1e-5;
const PERPLEXITY_STEPS: usize = 50;

/// Entropy in bits of `exp(-beta·d)` normalized, written into `probs`.
fn row_entropy(shifted: &[f64], beta: f64, probs: &mut [f64]) -> f64 {
    let mut z = 0.0;
    for (p, &d) in probs.iter_mut().zip(shifted) {
        *p = (-beta * d).exp();
        z += *p;
    }
    let mut weighted = 0.0;
    for (p, &d) in probs.iter_mut().zip(shifted) {
        *p /= z;
        weighted += *p * d;
    }
    (z.ln() + beta * weighted) / std::f64::consts::LN_2
}

/// Calibrates a Gaussian bandwidth so the conditional distribution over
/// `distances` (squared, self excluded) has the target perplexity.
pub fn perplexity_search(distances: &[f64], target: f64) -> Result<PerplexityRow> {
    if distances.is_empty() {
        return Err(Error::DegenerateInput("perplexity search on an empty row".into()));
    }
    if !(target > 0.0 && target < distances.len() as f64 + 1.0) {
        return Err(Error::Config(format!(
            "target perplexity {target} not achievable with {} neighbours",
            distances.len()
        )));
    }
    if distances.iter().all(|&d| d == 0.0) {
        return Err(Error::DegenerateInput("all distances are zero".into()));
    }
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let shifted: Vec<f64> = distances.iter().map(|d| d - min).collect();
    let mean = shifted.iter().sum::<f64>() / shifted.len() as f64;
    let goal = target.log2();

    let mut beta = if mean > 0.0 { 1.0 / mean } else { 1.0 };
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut probs = vec![0.0; shifted.len()];
    let mut h = row_entropy(&shifted, beta, &mut probs);
    for _ in 0..PERPLEXITY_STEPS {
        let diff = h - goal;
        if diff.abs() < PERPLEXITY_TOL {
            break;
        }
        // too flat: sharpen
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
        } else {
            hi = beta;
            beta = 0.5 * (beta + lo);
        }
        h = row_entropy(&shifted, beta, &mut probs);
    }
    Ok(PerplexityRow {
        probs,
        sigma: (0.5 / beta).sqrt(),
        perplexity: h.exp2(),
    })
}

fn squared_distances(x: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x[i * dim..(i + 1) * dim]
                .iter()
                .zip(&x[j * dim..(j + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    }
    d
}

/// Symmetrized joint affinities `(P_cond + P_condᵀ) / 2N`, row-major N×N.
pub fn joint_probabilities(x: &[f64], n: usize, dim: usize, perplexity: f64) -> Result<Vec<f64>> {
    if n < 2 || x.len() != n * dim {
        return Err(Error::dim("joint_probabilities", format!("{} values for {n}×{dim}", x.len())));
    }
    let d = squared_distances(x, n, dim);
    let mut cond = vec![0.0; n * n];
    let mut row = Vec::with_capacity(n - 1);
    for i in 0..n {
        row.clear();
        row.extend((0..n).filter(|&j| j != i).map(|j| d[i * n + j]));
        let fit = perplexity_search(&row, perplexity)
            .map_err(|e| match e {
                Error::DegenerateInput(m) => Error::DegenerateInput(format!("point {i}: {m}")),
                other => other,
            })?;
        let mut it = fit.probs.into_iter();
        for j in (0..n).filter(|&j| j != i) {
            cond[i * n + j] = it.next().unwrap();
        }
    }
    let mut p = vec![0.0; n * n];
    let denom = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / denom;
        }
    }
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneOutput {
    /// N×2 row-major.
    pub y: Vec<f64>,
    pub kl_initial: f64,
    pub kl_final: f64,
}

impl TsneOutput {
    pub fn points(&self) -> Vec<[f64; 2]> {
        self.y.chunks(2).map(|c| [c[0], c[1]]).collect()
    }
}

const P_FLOOR: f64 = 1e-12;

/// Student-t kernel values `1/(1+|yi−yj|²)` (zero diagonal) and their sum.
fn student_kernel(y: &[f64], n: usize) -> (Vec<f64>, f64) {
    let mut num = vec![0.0; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = y[2 * i] - y[2 * j];
            let dy = y[2 * i + 1] - y[2 * j + 1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            sum += 2.0 * v;
        }
    }
    (num, sum)
}

fn kl_divergence(p: &[f64], num: &[f64], sum: f64, n: usize) -> f64 {
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p[i * n + j].max(P_FLOOR);
            let qij = (num[i * n + j] / sum).max(P_FLOOR);
            kl += pij * (pij / qij).ln();
        }
    }
    kl
}

/// Embeds the rows of `x` (N×dim) in two dimensions.
pub fn tsne(x: &[f64], n: usize, dim: usize, config: &TsneConfig) -> Result<TsneOutput> {
    if n < 10 {
        return Err(Error::Config(format!("t-SNE needs at least 10 points, got {n}")));
    }
    config.validate(n)?;
    let p = joint_probabilities(x, n, dim, config.perplexity)?;

    let mut rng = seeding::rng(config.seed, "tsne-init", 0);
    let mut y: Vec<f64> = (0..2 * n).map(|_| 1e-2 * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut grad = vec![0.0; 2 * n];

    let (num, sum) = student_kernel(&y, n);
    let kl_initial = kl_divergence(&p, &num, sum, n);

    for iter in 0..config.iterations {
        let early = iter < config.exaggeration_iters;
        let exaggeration = if early { config.early_exaggeration } else { 1.0 };
        let momentum = if early { config.initial_momentum } else { config.final_momentum };
        let (num, sum) = student_kernel(&y, n);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = num[i * n + j];
                let m = (exaggeration * p[i * n + j] - w / sum) * w;
                gx += m * (y[2 * i] - y[2 * j]);
                gy += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
            grad[2 * i] = 4.0 * gx;
            grad[2 * i + 1] = 4.0 * gy;
        }
        for t in 0..2 * n {
            gains[t] = if (grad[t] > 0.0) != (update[t] > 0.0) {
                gains[t] + 0.2
            } else {
                (gains[t] * 0.8).max(0.01)
            };
            update[t] = momentum * update[t] - config.learning_rate * gains[t] * grad[t];
            y[t] += update[t];
        }
        for axis in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + axis]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + axis] -= mean);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("t-SNE diverged".into()));
    }
    let (num, sum) = student_kernel(&y, n);
    Ok(TsneOutput {
        kl_final: kl_divergence(&p, &num, sum, n),
        y,
        kl_initial,
    })
}
