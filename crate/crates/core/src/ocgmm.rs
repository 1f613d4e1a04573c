//! One-class Gaussian mixture with full covariance matrices.
//!
//! The mixture is fitted by EM on bonafide embeddings only and scores a
//! sample by its log-likelihood `ln Σ_k w_k N(x; μ_k, Σ_k)`.
//!
//! Every M-step adds `cov_reg·I` to each covariance. That update is the exact
//! maximizer for component densities carrying the factor
//! `exp(-½·cov_reg·tr Σ_k⁻¹)`, so the E-step uses the same factor and the
//! recorded trace is the mean of that regularized log-likelihood, which EM
//! never decreases. Scoring uses the plain mixture density.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, input, Error, Result};

const KMEANS_ITERS: usize = 10;
const EMPTY_COMPONENT_FRACTION: f64 = 1e-8;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major `dim x dim` matrices.
    pub covariances: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmInit {
    #[default]
    Kmeans,
    RandomPoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub k: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub cov_reg: f64,
    pub seed: u64,
    pub init: EmInit,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            k: 5,
            max_iters: 200,
            rel_tol: 1e-6,
            cov_reg: 1e-6,
            seed: 0,
            init: EmInit::Kmeans,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(config("GMM needs at least one component"));
        }
        if !(self.rel_tol.is_finite() && self.rel_tol > 0.0) {
            return Err(config(format!("rel_tol must be > 0, got {}", self.rel_tol)));
        }
        if !(self.cov_reg.is_finite() && self.cov_reg > 0.0) {
            return Err(config(format!("cov_reg must be > 0, got {}", self.cov_reg)));
        }
        Ok(())
    }
}

/// A component with its Cholesky factor precomputed.
#[derive(Clone, Debug)]
struct Component {
    log_weight: f64,
    mean: Vec<f64>,
    /// Lower-triangular factor, row-major.
    chol: Vec<f64>,
    /// `-½(d·ln 2π + ln|Σ|)`
    log_norm: f64,
    /// `tr Σ⁻¹`
    trace_inv: f64,
}

impl Component {
    fn new(dim: usize, weight: f64, mean: &[f64], cov: &[f64], index: usize) -> Result<Self> {
        let m = DMatrix::from_row_slice(dim, dim, cov);
        let chol = m.cholesky().ok_or_else(|| {
            Error::Fit(format!("covariance of component {index} is not positive definite"))
        })?;
        let l = chol.l();
        let log_det: f64 = 2.0 * (0..dim).map(|i| l[(i, i)].ln()).sum::<f64>();
        let inv_l = l
            .solve_lower_triangular(&DMatrix::identity(dim, dim))
            .ok_or_else(|| Error::Fit(format!("singular Cholesky factor in component {index}")))?;
        let trace_inv = inv_l.iter().map(|v| v * v).sum();
        let mut flat = vec![0.0; dim * dim];
        for r in 0..dim {
            for c in 0..=r {
                flat[r * dim + c] = l[(r, c)];
            }
        }
        Ok(Self {
            log_weight: weight.ln(),
            mean: mean.to_vec(),
            chol: flat,
            log_norm: -0.5 * (dim as f64 * LN_2PI + log_det),
            trace_inv,
        })
    }

    fn log_density(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.mean.len();
        let mut quad = 0.0;
        for i in 0..d {
            let row = &self.chol[i * d..i * d + i];
            let s: f64 = row.iter().zip(scratch.iter()).map(|(l, y)| l * y).sum();
            let y = (x[i] - self.mean[i] - s) / self.chol[i * d + i];
            scratch[i] = y;
            quad += y * y;
        }
        self.log_norm - 0.5 * quad
    }
}

/// A fitted mixture ready for repeated scoring.
#[derive(Clone, Debug)]
pub struct GmmScorer {
    dim: usize,
    components: Vec<Component>,
}

impl GmmParams {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.dim == 0 {
            return Err(input("GMM has no components or zero dimension"));
        }
        if self.means.len() != k || self.covariances.len() != k {
            return Err(input("GMM weights, means and covariances disagree on K"));
        }
        if self.means.iter().any(|m| m.len() != self.dim)
            || self.covariances.iter().any(|c| c.len() != self.dim * self.dim)
        {
            return Err(input("GMM parameter shapes do not match its dimension"));
        }
        let all = self
            .weights
            .iter()
            .chain(self.means.iter().flatten())
            .chain(self.covariances.iter().flatten());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(input("GMM contains non-finite parameters"));
        }
        if self.weights.iter().any(|&w| w < 0.0) {
            return Err(input("GMM weights must be non-negative"));
        }
        Ok(())
    }

    pub fn scorer(&self) -> Result<GmmScorer> {
        self.validate()?;
        let components = (0..self.k())
            .map(|k| Component::new(self.dim, self.weights[k], &self.means[k], &self.covariances[k], k))
            .collect::<Result<Vec<_>>>()?;
        Ok(GmmScorer {
            dim: self.dim,
            components,
        })
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl GmmScorer {
    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(input(format!("sample has {} dims, GMM expects {}", x.len(), self.dim)));
        }
        Ok(())
    }

    fn component_log_probs(&self, x: &[f64], penalty: f64) -> Vec<f64> {
        let mut scratch = vec![0.0; self.dim];
        self.components
            .iter()
            .map(|c| c.log_weight + c.log_density(x, &mut scratch) - 0.5 * penalty * c.trace_inv)
            .collect()
    }

    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(log_sum_exp(&self.component_log_probs(x, 0.0)))
    }

    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let lp = self.component_log_probs(x, 0.0);
        let lse = log_sum_exp(&lp);
        Ok(lp.iter().map(|v| (v - lse).exp()).collect())
    }
}

/// `ln p(x | Θ)` computed with Cholesky factors and log-sum-exp.
pub fn log_likelihood(gmm: &GmmParams, x: &[f64]) -> Result<f64> {
    gmm.scorer()?.log_likelihood(x)
}

/// Posterior probability of each component given `x`.
pub fn responsibilities(gmm: &GmmParams, x: &[f64]) -> Result<Vec<f64>> {
    gmm.scorer()?.responsibilities(x)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Weighted mean and biased covariance (plus `reg·I`) of `data`.
fn weighted_moments(data: &[Vec<f64>], weights: &[f64], total: f64, reg: f64) -> (Vec<f64>, Vec<f64>) {
    let d = data[0].len();
    let mut mean = vec![0.0; d];
    for (x, &w) in data.iter().zip(weights) {
        for j in 0..d {
            mean[j] += w * x[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut cov = vec![0.0; d * d];
    let mut diff = vec![0.0; d];
    for (x, &w) in data.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        for j in 0..d {
            diff[j] = x[j] - mean[j];
        }
        for r in 0..d {
            let wr = w * diff[r];
            for c in r..d {
                cov[r * d + c] += wr * diff[c];
            }
        }
    }
    for r in 0..d {
        for c in r..d {
            let v = cov[r * d + c] / total;
            cov[r * d + c] = v;
            cov[c * d + r] = v;
        }
        cov[r * d + r] += reg;
    }
    (mean, cov)
}

fn kmeans_assignments(data: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut min_d: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let mut best = 0;
        for i in 1..n {
            if min_d[i] > min_d[best] {
                best = i;
            }
        }
        centers.push(data[best].clone());
        let c = centers.last().expect("just pushed");
        for (i, x) in data.iter().enumerate() {
            min_d[i] = min_d[i].min(sq_dist(x, c));
        }
    }

    let assign = |centers: &[Vec<f64>]| -> Vec<usize> {
        data.iter()
            .map(|x| {
                let mut best = 0;
                let mut best_d = sq_dist(x, &centers[0]);
                for (j, c) in centers.iter().enumerate().skip(1) {
                    let dj = sq_dist(x, c);
                    if dj < best_d {
                        best = j;
                        best_d = dj;
                    }
                }
                best
            })
            .collect()
    };

    let d = data[0].len();
    let mut labels = assign(&centers);
    for _ in 0..KMEANS_ITERS {
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (x, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(x).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next = assign(&centers);
        if next == labels {
            break;
        }
        labels = next;
    }
    labels
}

struct MStep<'a> {
    data: &'a [Vec<f64>],
    reg: f64,
    global_cov: Vec<f64>,
}

impl MStep<'_> {
    /// `resp[i][k]`; `sample_ll[i]` ranks samples for re-seeding empty components.
    fn run(&self, resp: &[Vec<f64>], sample_ll: &[f64], k: usize) -> GmmParams {
        let n = self.data.len();
        let d = self.data[0].len();
        let mut weights = Vec::with_capacity(k);
        let mut means = Vec::with_capacity(k);
        let mut covariances = Vec::with_capacity(k);

        let mut worst: Vec<usize> = (0..n).collect();
        worst.sort_by(|&a, &b| sample_ll[a].total_cmp(&sample_ll[b]).then(a.cmp(&b)));
        let mut reseed = worst.into_iter();

        for j in 0..k {
            let col: Vec<f64> = resp.iter().map(|r| r[j]).collect();
            let mass: f64 = col.iter().sum();
            if mass < EMPTY_COMPONENT_FRACTION * n as f64 {
                let idx = reseed.next().unwrap_or(0);
                weights.push(1.0 / n as f64);
                means.push(self.data[idx].clone());
                covariances.push(self.global_cov.clone());
            } else {
                let (mean, cov) = weighted_moments(self.data, &col, mass, self.reg);
                weights.push(mass / n as f64);
                means.push(mean);
                covariances.push(cov);
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        GmmParams {
            dim: d,
            weights,
            means,
            covariances,
        }
    }
}

/// Fits a `cfg.k`-component GMM by EM.
///
/// Returns the parameters and the per-iteration mean regularized
/// log-likelihood. Stops when its relative change drops below `rel_tol` or
/// after `max_iters` M-steps.
pub fn fit_em(data: &[Vec<f64>], cfg: &EmConfig) -> Result<(GmmParams, Vec<f64>)> {
    cfg.validate()?;
    let n = data.len();
    if n < cfg.k {
        return Err(Error::Fit(format!(
            "{n} samples cannot support {} components",
            cfg.k
        )));
    }
    let d = data[0].len();
    if d == 0 {
        return Err(input("embeddings have zero dimension"));
    }
    for (i, x) in data.iter().enumerate() {
        if x.len() != d {
            return Err(input(format!("sample {i} has {} dims, expected {d}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(input(format!("sample {i} contains non-finite values")));
        }
    }

    let ones = vec![1.0; n];
    let (_, global_cov) = weighted_moments(data, &ones, n as f64, cfg.cov_reg);
    let mstep = MStep {
        data,
        reg: cfg.cov_reg,
        global_cov,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = match cfg.init {
        EmInit::Kmeans => {
            let labels = kmeans_assignments(data, cfg.k, &mut rng);
            let resp: Vec<Vec<f64>> = labels
                .iter()
                .map(|&l| (0..cfg.k).map(|j| if j == l { 1.0 } else { 0.0 }).collect())
                .collect();
            mstep.run(&resp, &vec![0.0; n], cfg.k)
        }
        EmInit::RandomPoints => {
            let picks = rand::seq::index::sample(&mut rng, n, cfg.k).into_vec();
            GmmParams {
                dim: d,
                weights: vec![1.0 / cfg.k as f64; cfg.k],
                means: picks.iter().map(|&i| data[i].clone()).collect(),
                covariances: vec![mstep.global_cov.clone(); cfg.k],
            }
        }
    };

    let mut trace: Vec<f64> = Vec::new();
    let mut resp = vec![vec![0.0; cfg.k]; n];
    let mut sample_ll = vec![0.0; n];
    for iter in 0..=cfg.max_iters {
        let scorer = params.scorer()?;
        let mut total = 0.0;
        for (i, x) in data.iter().enumerate() {
            let lp = scorer.component_log_probs(x, cfg.cov_reg);
            let lse = log_sum_exp(&lp);
            for (r, v) in resp[i].iter_mut().zip(&lp) {
                *r = (v - lse).exp();
            }
            sample_ll[i] = lse;
            total += lse;
        }
        let objective = total / n as f64;
        if !objective.is_finite() {
            return Err(Error::Fit(format!("log-likelihood became non-finite at iteration {iter}")));
        }
        let converged = trace
            .last()
            .is_some_and(|&prev: &f64| (objective - prev).abs() <= cfg.rel_tol * prev.abs());
        trace.push(objective);
        if converged || iter == cfg.max_iters {
            break;
        }
        params = mstep.run(&resp, &sample_ll, cfg.k);
    }
    Ok((params, trace))
}
