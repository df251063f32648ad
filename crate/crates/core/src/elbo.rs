//! Analytical ELBO, closed-form noise variance and finite-difference
//! hyperparameter ascent.

use std::f64::consts::{LN_2, PI};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_log_det, strict_cholesky, Factorized};
use crate::mogp::{TaskData, TaskKind};
use crate::pg_inference::{GaussianPosterior, PGState};
use crate::prior::{GlobalPrior, NoiseVariances, ParamGroup};

/// Floor for the closed-form noise variance.
pub const SIGMA2_FLOOR: f64 = 1e-8;

/// `total = a + b - c - d`, where `a`/`b` are expected log-likelihoods of
/// regression/classification samples and `c`/`d` the KL terms of `q(ω)` and
/// `q(f)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ELBOBreakdown {
    pub term_a: f64,
    pub term_b: f64,
    pub term_c: f64,
    pub term_d: f64,
    pub total: f64,
}

impl ELBOBreakdown {
    pub fn new(term_a: f64, term_b: f64, term_c: f64, term_d: f64) -> Self {
        Self {
            term_a,
            term_b,
            term_c,
            term_d,
            total: term_a + term_b - term_c - term_d,
        }
    }
}

/// First and second posterior moments at each stacked data index.
#[derive(Clone, Debug, PartialEq)]
pub struct Marginals {
    pub mean: DVector<f64>,
    /// `E[f²] = Var[f] + E[f]²`.
    pub second: DVector<f64>,
}

impl Marginals {
    pub fn of(posterior: &GaussianPosterior) -> Self {
        Self {
            mean: posterior.mean.clone(),
            second: posterior.second_moments(),
        }
    }
}

/// `y² − 2 y f̄ + f̃²`, the expected squared residual.
fn expected_sq_residual(y: f64, mean: f64, second: f64) -> f64 {
    y * y - 2.0 * y * mean + second
}

/// Regression term of the expected log-likelihood.
pub fn term_a(marg: &Marginals, noise: &NoiseVariances, data: &TaskData) -> Result<f64> {
    let mut acc = 0.0;
    for block in data.layout.blocks().iter().filter(|b| b.kind == TaskKind::Regression) {
        if block.is_empty() {
            continue;
        }
        let s2 = noise.get(block.task_id)?;
        let norm = -(s2.sqrt() * (2.0 * PI).sqrt()).ln();
        for i in block.range() {
            let r = expected_sq_residual(data.targets[i], marg.mean[i], marg.second[i]);
            acc += norm - r / (2.0 * s2);
        }
    }
    Ok(acc)
}

/// Classification term: `y f̄ / 2 − f̃² E[ω] / 2 − log 2` per sample.
pub fn term_b(marg: &Marginals, pg: &PGState, data: &TaskData) -> f64 {
    pg.indices
        .iter()
        .zip(&pg.omega_mean)
        .map(|(&i, &om)| 0.5 * data.targets[i] * marg.mean[i] - 0.5 * marg.second[i] * om - LN_2)
        .sum()
}

/// `log cosh(x)` without overflow for large `x`.
fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// KL of `q(ω) = PG(1, f̃)` against `PG(1, 0)`.
pub fn term_c(pg: &PGState) -> f64 {
    pg.tilt
        .iter()
        .map(|&c| log_cosh(0.5 * c) - 0.25 * c * (0.5 * c).tanh())
        .sum()
}

/// `KL(N(m, Σ) || N(0, K))`.
pub fn term_d(posterior: &GaussianPosterior, k: &Factorized) -> Result<f64> {
    if k.dim() != posterior.dim() {
        return Err(Error::input("posterior and prior covariance dimensions differ"));
    }
    PosteriorFactor::new(posterior)?.kl(posterior, k)
}

/// Cholesky factor of a fixed posterior covariance, reused when the KL is
/// re-evaluated under many priors.
#[derive(Clone, Debug)]
pub struct PosteriorFactor {
    l: DMatrix<f64>,
    log_det: f64,
}

impl PosteriorFactor {
    pub fn new(posterior: &GaussianPosterior) -> Result<Self> {
        let chol = strict_cholesky(&posterior.cov, "posterior covariance")?;
        Ok(Self {
            log_det: chol_log_det(&chol),
            l: chol.l(),
        })
    }

    pub fn kl(&self, posterior: &GaussianPosterior, k: &Factorized) -> Result<f64> {
        let n = posterior.dim();
        if k.dim() != n || self.l.nrows() != n {
            return Err(Error::input("posterior and prior covariance dimensions differ"));
        }
        // tr(K⁻¹Σ) = ‖L⁻¹ Lσ‖²_F with Σ = Lσ Lσᵀ
        let trace = k.half_solve(&self.l).norm_squared();
        let alpha = k.half_solve(&DMatrix::from_column_slice(n, 1, posterior.mean.as_slice()));
        let quad = alpha.norm_squared();
        let kl = 0.5 * (k.log_det() - self.log_det - n as f64 + trace + quad);
        if !kl.is_finite() {
            return Err(Error::numeric("KL term is not finite"));
        }
        Ok(kl)
    }
}

/// Every ELBO term for a dense client posterior.
pub fn elbo_terms(
    posterior: &GaussianPosterior,
    pg: &PGState,
    noise: &NoiseVariances,
    data: &TaskData,
    k: &Factorized,
) -> Result<ELBOBreakdown> {
    if posterior.dim() != data.len() {
        return Err(Error::input("posterior does not match the data layout"));
    }
    let marg = Marginals::of(posterior);
    Ok(ELBOBreakdown::new(
        term_a(&marg, noise, data)?,
        term_b(&marg, pg, data),
        term_c(pg),
        term_d(posterior, k)?,
    ))
}

/// `(1/N_i) Σ (y² − 2 y f̄ + f̃²)` over task `task`, floored at [`SIGMA2_FLOOR`].
pub fn optimal_sigma2(marg: &Marginals, data: &TaskData, task: usize) -> Result<f64> {
    let block = data
        .layout
        .block_of_task(task)
        .ok_or_else(|| Error::input(format!("task {task} is not in the layout")))?;
    if block.kind != TaskKind::Regression {
        return Err(Error::input(format!("task {task} is not a regression task")));
    }
    if block.is_empty() {
        return Err(Error::input(format!("task {task} has no samples")));
    }
    let sum: f64 = block
        .range()
        .map(|i| expected_sq_residual(data.targets[i], marg.mean[i], marg.second[i]))
        .sum();
    let v = sum / block.len() as f64;
    if !v.is_finite() {
        return Err(Error::numeric(format!("noise estimate for task {task} is not finite")));
    }
    Ok(v.max(SIGMA2_FLOOR))
}

/// Client-side ELBO with its variational factors frozen, as a function of
/// the prior hyperparameters.
pub trait LocalElbo: Send + Sync {
    fn elbo(&self, prior: &GlobalPrior) -> Result<ELBOBreakdown>;
}

/// Average of client ELBO totals, summed pairwise so the result does not
/// depend on the order of `clients` beyond rounding of a balanced tree.
pub fn averaged_elbo(prior: &GlobalPrior, clients: &[&dyn LocalElbo]) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::input("averaged ELBO needs at least one client"));
    }
    let totals = clients
        .iter()
        .map(|c| c.elbo(prior).map(|e| e.total))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&totals) / totals.len() as f64)
}

pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

/// Central finite-difference step at coordinate value `u`.
pub fn fd_step(u: f64, scale: f64) -> f64 {
    scale * u.abs().max(1.0)
}

pub const FD_SCALE: f64 = 1e-5;

/// Gradient of `objective` over the coordinates [`GlobalPrior::gather`]
/// produces for `groups`. Positive parameters are differentiated in log space.
pub fn fd_gradient<F>(prior: &GlobalPrior, groups: &[ParamGroup], scale: f64, objective: F) -> Result<Vec<f64>>
where
    F: Fn(&GlobalPrior) -> Result<f64> + Sync,
{
    use rayon::prelude::*;

    let base = prior.gather(groups);
    let names = prior.param_names(groups);
    (0..base.len())
        .into_par_iter()
        .map(|j| {
            let h = fd_step(base[j], scale);
            let probe = |delta: f64| -> Result<f64> {
                let mut v = base.clone();
                v[j] += delta;
                let mut p = prior.clone();
                p.scatter(groups, &v)?;
                objective(&p)
            };
            let at = |delta: f64| {
                probe(delta).map_err(|e| {
                    e.context(format!("ELBO probe at {} = {:e}", names[j], base[j] + delta))
                })
            };
            Ok((at(h)? - at(-h)?) / (2.0 * h))
        })
        .collect()
}

/// Finite-difference gradient of the averaged ELBO with posteriors fixed.
pub fn hyper_gradient(
    prior: &GlobalPrior,
    clients: &[&dyn LocalElbo],
    targets: &[ParamGroup],
) -> Result<Vec<f64>> {
    if clients.is_empty() {
        return Err(Error::input("hyper_gradient needs at least one client"));
    }
    fd_gradient(prior, targets, FD_SCALE, |p| averaged_elbo(p, clients))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adaptive-moment state for one parameter vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    /// Steps skipped because the gradient was not finite.
    pub skipped: u64,
}

impl OptState {
    pub fn new(dim: usize) -> Self {
        Self {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            skipped: 0,
        }
    }

    /// Ascent direction for `grad`, advancing the moment estimates. Returns
    /// `None` (and counts a skip) when the gradient has non-finite entries.
    pub fn direction(&mut self, grad: &[f64], cfg: &AdamConfig) -> Result<Option<Vec<f64>>> {
        if self.m.is_empty() && self.t == 0 {
            *self = Self { skipped: self.skipped, ..Self::new(grad.len()) };
        }
        if grad.len() != self.m.len() {
            return Err(Error::input(format!(
                "gradient has {} entries, optimizer state has {}",
                grad.len(),
                self.m.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient, optimizer step skipped");
            return Ok(None);
        }
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let mut out = Vec::with_capacity(grad.len());
        for (j, &g) in grad.iter().enumerate() {
            self.m[j] = cfg.beta1 * self.m[j] + (1.0 - cfg.beta1) * g;
            self.v[j] = cfg.beta2 * self.v[j] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[j] / c1;
            let vh = self.v[j] / c2;
            out.push(mh / (vh.sqrt() + cfg.epsilon));
        }
        Ok(Some(out))
    }
}

/// `u + lr · (dir − λ u)`; zero entries of `dir` leave `u` untouched when no
/// decay is configured.
pub(crate) fn apply_direction(u: &[f64], dir: &[f64], lr: f64, decay: f64) -> Vec<f64> {
    u.iter()
        .zip(dir)
        .map(|(&x, &d)| {
            let step = d - decay * x;
            if step == 0.0 {
                x
            } else {
                x + lr * step
            }
        })
        .collect()
}

/// One ascent step on `targets` with moments carried in `opt`.
pub fn optimizer_step(
    prior: &GlobalPrior,
    gradient: &[f64],
    targets: &[ParamGroup],
    opt: &mut OptState,
    cfg: &AdamConfig,
) -> Result<GlobalPrior> {
    let Some(dir) = opt.direction(gradient, cfg)? else {
        return Ok(prior.clone());
    };
    let u = prior.gather(targets);
    let mut next = prior.clone();
    next.scatter(targets, &apply_direction(&u, &dir, cfg.learning_rate, cfg.weight_decay))?;
    Ok(next)
}
