//! Client-side mean-field inference with Pólya-Gamma augmentation.
//!
//! `q(ω) q(f)` is updated by coordinate ascent: each ω factor is
//! `PG(1, f̃)` with `f̃ = sqrt(E[f²])`, and `q(f) = N(m, Σ)` with
//! `Σ = (H + K⁻¹)⁻¹`, `m = Σ H v`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gaussian_site_update, strict_cholesky, Factorized, SitePrecision};
use crate::mogp::{cross_cov_matrix, TaskData, TaskKind, TaskLayout};
use crate::prior::{GlobalPrior, NoiseVariances};
use crate::rng::stream_rng;

/// Floor applied to predictive variances.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// `E[ω]` for `ω ~ PG(b, c)`: `b/(2c) tanh(c/2)`, with the removable
/// singularity at `c = 0` evaluated as `b/4`.
pub fn pg_expectation(b: f64, c: f64) -> Result<f64> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::input(format!("PG shape b must be positive, got {b}")));
    }
    if !c.is_finite() {
        return Err(Error::numeric("PG tilt is not finite"));
    }
    let c = c.abs();
    if c < 1e-4 {
        // tanh(c/2)/(2c) = 1/4 - c²/48 + O(c⁴)
        return Ok(b * (0.25 - c * c / 48.0));
    }
    Ok(b / (2.0 * c) * (0.5 * c).tanh())
}

/// Truncated sum-of-gammas sampler for `PG(b, c)`:
/// `ω = 1/(2π²) Σ_{k=1..K} g_k / ((k - 1/2)² + c²/(4π²))`, `g_k ~ Gamma(b, 1)`.
///
/// The terms past `K` are replaced by their expectation, which the closed
/// form of the full series gives exactly. Without it every draw is biased
/// low by about `b/(2π² K)`; the tail's variance is `O(K⁻³)` and is dropped.
#[derive(Clone, Debug)]
pub struct PgSampler {
    gamma: Gamma<f64>,
    denominators: Vec<f64>,
    tail_mean: f64,
}

impl PgSampler {
    pub const MIN_TRUNCATION: usize = 200;

    pub fn new(b: u32, c: f64, truncation: usize) -> Result<Self> {
        if !(1..=3).contains(&b) {
            return Err(Error::input(format!("PG sampler supports b in {{1, 2, 3}}, got {b}")));
        }
        if truncation < Self::MIN_TRUNCATION {
            return Err(Error::input(format!(
                "PG truncation must be at least {}, got {truncation}",
                Self::MIN_TRUNCATION
            )));
        }
        if !c.is_finite() {
            return Err(Error::input("PG tilt must be finite"));
        }
        let shift = c * c / (4.0 * PI * PI);
        let denominators = (1..=truncation)
            .map(|k| {
                let h = k as f64 - 0.5;
                h * h + shift
            })
            .collect::<Vec<f64>>();
        let head: f64 = denominators.iter().map(|d| f64::from(b) / d).sum::<f64>() / (2.0 * PI * PI);
        let tail_mean = (pg_expectation(f64::from(b), c)? - head).max(0.0);
        Ok(Self {
            gamma: Gamma::new(f64::from(b), 1.0).map_err(|e| Error::input(e.to_string()))?,
            denominators,
            tail_mean,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let s: f64 = self
            .denominators
            .iter()
            .map(|d| self.gamma.sample(rng) / d)
            .sum();
        s / (2.0 * PI * PI) + self.tail_mean
    }
}

/// One PG draw, deterministic in `seed`.
pub fn pg_sample(b: u32, c: f64, seed: u64) -> Result<f64> {
    let sampler = PgSampler::new(b, c, PgSampler::MIN_TRUNCATION)?;
    Ok(sampler.sample(&mut stream_rng(seed, "pg_sample", 0)))
}

/// Variational PG factors, one per classification sample, in stacked order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PGState {
    /// Stacked indices of the classification samples.
    pub indices: Vec<usize>,
    /// `f̃ = sqrt(E[f²])`.
    pub tilt: Vec<f64>,
    /// `E[ω] = pg_expectation(1, f̃)`.
    pub omega_mean: Vec<f64>,
    /// Number of negative second moments clamped to zero.
    pub clamped: u64,
}

impl PGState {
    /// `f̃ = 0`, `E[ω] = 1/4` for every classification sample.
    pub fn initial(layout: &TaskLayout) -> Self {
        let indices = classification_indices(layout);
        let n = indices.len();
        Self {
            indices,
            tilt: vec![0.0; n],
            omega_mean: vec![0.25; n],
            clamped: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Builds the state from per-index second moments `E[f²]`.
    pub fn from_second_moments(layout: &TaskLayout, second: &DVector<f64>) -> Result<Self> {
        if second.len() != layout.len() {
            return Err(Error::input(format!(
                "second moments have length {}, layout has {}",
                second.len(),
                layout.len()
            )));
        }
        let indices = classification_indices(layout);
        let mut tilt = Vec::with_capacity(indices.len());
        let mut omega_mean = Vec::with_capacity(indices.len());
        let mut clamped = 0;
        for &i in &indices {
            let mut s = second[i];
            if s.is_nan() {
                return Err(Error::numeric(format!("second moment at index {i} is NaN")));
            }
            if s < 0.0 {
                s = 0.0;
                clamped += 1;
            }
            let t = s.sqrt();
            tilt.push(t);
            omega_mean.push(pg_expectation(1.0, t)?);
        }
        Ok(Self {
            indices,
            tilt,
            omega_mean,
            clamped,
        })
    }
}

fn classification_indices(layout: &TaskLayout) -> Vec<usize> {
    layout
        .blocks()
        .iter()
        .filter(|b| b.kind == TaskKind::Classification)
        .flat_map(|b| b.range())
        .collect()
}

/// `q(f) = N(m, Σ)` over the stacked latent vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianPosterior {
    /// The prior itself: `m = 0`, `Σ = K`.
    pub fn prior(k: &Factorized) -> Self {
        Self {
            mean: DVector::zeros(k.dim()),
            cov: k.matrix().clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `E[f²] = diag(Σ) + m²`.
    pub fn second_moments(&self) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| self.cov[(i, i)] + self.mean[i] * self.mean[i])
    }
}

/// Diagonal site precision `H` and pseudo-targets `v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteMatrices {
    pub h: DVector<f64>,
    pub v: DVector<f64>,
}

impl SiteMatrices {
    /// Natural mean `H v`.
    pub fn natural_mean(&self) -> DVector<f64> {
        self.h.component_mul(&self.v)
    }
}

/// `q(ω)` update from the current `q(f)`.
pub fn update_q_omega(posterior: &GaussianPosterior, layout: &TaskLayout) -> Result<PGState> {
    if posterior.cov.nrows() != posterior.dim() || posterior.cov.ncols() != posterior.dim() {
        return Err(Error::input("posterior covariance shape does not match its mean"));
    }
    PGState::from_second_moments(layout, &posterior.second_moments())
}

/// `H = diag(1/σ², E[ω])` and `v = [y_r ; y_c / (2 E[ω])]`.
pub fn site_matrices(pg: &PGState, noise: &NoiseVariances, data: &TaskData) -> Result<SiteMatrices> {
    let n = data.len();
    let mut h = DVector::zeros(n);
    let mut v = DVector::zeros(n);
    let mut pg_pos = 0;
    for block in data.layout.blocks() {
        match block.kind {
            TaskKind::Regression => {
                if block.is_empty() {
                    continue;
                }
                let s2 = noise.get(block.task_id)?;
                for i in block.range() {
                    h[i] = 1.0 / s2;
                    v[i] = data.targets[i];
                }
            }
            TaskKind::Classification => {
                for i in block.range() {
                    if pg.indices.get(pg_pos) != Some(&i) {
                        return Err(Error::input("PG state does not match the task layout"));
                    }
                    let y = data.targets[i];
                    if y != 1.0 && y != -1.0 {
                        return Err(Error::input(format!("label at index {i} is {y}, expected ±1")));
                    }
                    let om = pg.omega_mean[pg_pos];
                    if !(om > 0.0) {
                        return Err(Error::numeric(format!("E[ω] at index {i} is {om}")));
                    }
                    h[i] = om;
                    v[i] = y / (2.0 * om);
                    pg_pos += 1;
                }
            }
        }
    }
    if pg_pos != pg.len() {
        return Err(Error::input("PG state has more entries than classification samples"));
    }
    Ok(SiteMatrices { h, v })
}

/// `Σ = (H + K⁻¹)⁻¹`, `m = Σ H v`.
pub fn update_q_f(sites: &SiteMatrices, k: &Factorized) -> Result<GaussianPosterior> {
    if sites.h.len() != k.dim() || sites.v.len() != k.dim() {
        return Err(Error::input("site matrices do not match the prior covariance"));
    }
    let (mean, cov) =
        gaussian_site_update(k, SitePrecision::Diagonal(&sites.h), &sites.natural_mean())?;
    Ok(GaussianPosterior { mean, cov })
}

/// The pair of variational factors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldState {
    pub pg: PGState,
    pub posterior: GaussianPosterior,
}

impl MeanFieldState {
    /// `q(f)` at the prior and `E[ω] = 1/4`.
    pub fn initial(layout: &TaskLayout, k: &Factorized) -> Self {
        Self {
            pg: PGState::initial(layout),
            posterior: GaussianPosterior::prior(k),
        }
    }
}

/// Alternates [`update_q_omega`] and [`update_q_f`] `n_iters` times.
pub fn mean_field_sweep(
    state: MeanFieldState,
    data: &TaskData,
    noise: &NoiseVariances,
    k: &Factorized,
    n_iters: usize,
) -> Result<MeanFieldState> {
    if n_iters == 0 {
        return Err(Error::input("mean-field sweep needs at least one iteration"));
    }
    if state.posterior.dim() != data.len() || k.dim() != data.len() {
        return Err(Error::input("state, data and covariance dimensions disagree"));
    }
    let mut state = state;
    for _ in 0..n_iters {
        let pg = update_q_omega(&state.posterior, &data.layout)?;
        let sites = site_matrices(&pg, noise, data)?;
        let posterior = update_q_f(&sites, k)?;
        state = MeanFieldState { pg, posterior };
    }
    Ok(state)
}

/// Which training latents a prediction conditions on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionScope {
    /// The full stacked vector, using cross-task covariances.
    #[default]
    Joint,
    /// Only the target task's own block.
    TaskBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    /// Set when the raw variance fell below [`VARIANCE_FLOOR`].
    pub clamped: bool,
}

impl Prediction {
    /// `sigmoid(μ / sqrt(1 + π σ² / 8))`, kept inside the open unit interval.
    pub fn class_probability(&self) -> f64 {
        class_probability(self.mean, self.variance)
    }
}

pub fn class_probability(mean: f64, variance: f64) -> f64 {
    let z = mean / (1.0 + PI * variance / 8.0).sqrt();
    let p = 1.0 / (1.0 + (-z).exp());
    p.clamp(1e-12, 1.0 - 1e-12)
}

/// Gaussian conditional `p(f(x*) | u)` integrated against `q(u) = N(m, S)`,
/// where `u` are latent values at labelled points with prior covariance `C`:
/// `μ = kᵀC⁻¹m`, `σ² = k** − kᵀC⁻¹k + kᵀC⁻¹ S C⁻¹k`.
#[derive(Clone, Debug)]
pub struct Conditional {
    points: Vec<(usize, Vec<f64>)>,
    chol: Cholesky<f64, Dyn>,
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    nugget: f64,
}

impl Conditional {
    /// `nugget` is the jitter folded into `prior_cov`; it is treated as part
    /// of the latent, so it also enters covariances with a query point that
    /// coincides with a conditioning point of the same task.
    pub(crate) fn new(
        points: Vec<(usize, Vec<f64>)>,
        prior_cov: &DMatrix<f64>,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        nugget: f64,
    ) -> Result<Self> {
        let chol = strict_cholesky(prior_cov, "conditioning covariance")?;
        Ok(Self {
            points,
            chol,
            mean,
            cov,
            nugget,
        })
    }

    /// Restricts a stacked set of points/moments to the given index range.
    pub(crate) fn from_stacked(
        points: Vec<(usize, Vec<f64>)>,
        prior_cov: &DMatrix<f64>,
        mean: &DVector<f64>,
        cov: &DMatrix<f64>,
        scope: PredictionScope,
        range: std::ops::Range<usize>,
        nugget: f64,
    ) -> Result<Self> {
        match scope {
            PredictionScope::Joint => Self::new(points, prior_cov, mean.clone(), cov.clone(), nugget),
            PredictionScope::TaskBlock => {
                let (s, n) = (range.start, range.len());
                Self::new(
                    points[range].to_vec(),
                    &prior_cov.view((s, s), (n, n)).into_owned(),
                    mean.rows(s, n).into_owned(),
                    cov.view((s, s), (n, n)).into_owned(),
                    nugget,
                )
            }
        }
    }

    pub fn predict(&self, prior: &GlobalPrior, task: usize, x: &[f64]) -> Result<Prediction> {
        let target = [(task, x)];
        let pts: Vec<(usize, &[f64])> = self.points.iter().map(|(t, p)| (*t, p.as_slice())).collect();
        let mut k = cross_cov_matrix(&prior.mixing, &prior.bases, &pts, &target)?.column(0).into_owned();
        let mut kss = cross_cov_matrix(&prior.mixing, &prior.bases, &target, &target)?[(0, 0)];
        let mut coincident = false;
        for (r, (t, p)) in self.points.iter().enumerate() {
            if *t == task && p.as_slice() == x {
                k[r] += self.nugget;
                coincident = true;
            }
        }
        if coincident {
            kss += self.nugget;
        }
        let alpha = self.chol.solve(&k);
        let mean = alpha.dot(&self.mean);
        let raw = kss - k.dot(&alpha) + alpha.dot(&(&self.cov * &alpha));
        if !mean.is_finite() || !raw.is_finite() {
            return Err(Error::numeric("prediction is not finite"));
        }
        let clamped = raw < VARIANCE_FLOOR;
        Ok(Prediction {
            mean,
            variance: if clamped { VARIANCE_FLOOR } else { raw },
            clamped,
        })
    }
}

/// Predictor for one task of a dense posterior.
pub fn dense_conditional(
    posterior: &GaussianPosterior,
    k_train: &Factorized,
    layout: &TaskLayout,
    task: usize,
    scope: PredictionScope,
) -> Result<Conditional> {
    let block = layout
        .block_of_task(task)
        .ok_or_else(|| Error::input(format!("task {task} is not in the layout")))?;
    if posterior.dim() != layout.len() || k_train.dim() != layout.len() {
        return Err(Error::input("posterior does not match the layout"));
    }
    let points = layout.points().into_iter().map(|(t, x)| (t, x.to_vec())).collect();
    Conditional::from_stacked(
        points,
        k_train.matrix(),
        &posterior.mean,
        &posterior.cov,
        scope,
        block.range(),
        k_train.jitter(),
    )
}

/// Predictive distribution of task `task` at `x_star`.
pub fn predict(
    posterior: &GaussianPosterior,
    k_train: &Factorized,
    prior: &GlobalPrior,
    layout: &TaskLayout,
    task: usize,
    x_star: &[f64],
    scope: PredictionScope,
) -> Result<Prediction> {
    dense_conditional(posterior, k_train, layout, task, scope)?.predict(prior, task, x_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{BasisKernel, FeatureMap, KernelSpec};
    use crate::linalg::factorize;
    use crate::mogp::{MixingWeights, TaskObservations};
    use crate::prior::AggregationMode;

    fn scalar_prior(sigma2: f64) -> GlobalPrior {
        GlobalPrior::new(
            vec![BasisKernel::new(KernelSpec::rbf(1.0, 1.0).unwrap(), FeatureMap::identity(1))],
            MixingWeights::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            NoiseVariances::new([(0, sigma2)]).unwrap(),
            AggregationMode::A,
        )
        .unwrap()
    }

    fn one_point(kind: TaskKind, y: f64) -> TaskData {
        let task_id = if kind == TaskKind::Regression { 0 } else { 1 };
        TaskData::new(vec![TaskObservations {
            task_id,
            kind,
            x: vec![vec![0.0]],
            y: vec![y],
        }])
        .unwrap()
    }

    fn unit_k() -> Factorized {
        factorize(&DMatrix::from_element(1, 1, 1.0), 1e-12, "k").unwrap()
    }

    #[test]
    fn pg_expectation_values() {
        assert_eq!(pg_expectation(1.0, 0.0).unwrap(), 0.25);
        assert!((pg_expectation(1.0, 2.0).unwrap() - 0.190_398_538_99).abs() < 1e-9);
        assert!((pg_expectation(2.0, 1.0).unwrap() - 0.462_117_157_26).abs() < 1e-9);
        assert!(pg_expectation(0.0, 1.0).is_err());
        assert!(pg_expectation(-1.0, 1.0).is_err());
    }

    #[test]
    fn pg_expectation_even_and_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..=20 {
            let c = 0.5 * i as f64;
            let e = pg_expectation(1.0, c).unwrap();
            assert_eq!(e, pg_expectation(1.0, -c).unwrap());
            assert!(e < prev, "not decreasing at {c}");
            prev = e;
        }
        // continuity across the series switch-over
        for c in [1e-8f64, 5e-5, 0.99e-4] {
            let exact = (0.5 * c).tanh() / (2.0 * c);
            assert!((pg_expectation(1.0, c).unwrap() - exact).abs() < 1e-14);
        }
    }

    #[test]
    fn pg_sample_basics() {
        assert_eq!(pg_sample(1, 2.0, 9).unwrap(), pg_sample(1, 2.0, 9).unwrap());
        assert!(pg_sample(4, 2.0, 9).is_err());
        assert!(PgSampler::new(1, 0.0, 50).is_err());
        let s = PgSampler::new(2, 3.0, 200).unwrap();
        let mut rng = stream_rng(1, "t", 0);
        assert!((0..1000).all(|_| s.sample(&mut rng) > 0.0));
    }

    #[test]
    fn omega_update_examples() {
        let layout = one_point(TaskKind::Classification, 1.0).layout;
        let mk = |m: f64, v: f64| GaussianPosterior {
            mean: DVector::from_element(1, m),
            cov: DMatrix::from_element(1, 1, v),
        };
        let pg = update_q_omega(&mk(0.0, 0.0), &layout).unwrap();
        assert_eq!((pg.tilt[0], pg.omega_mean[0]), (0.0, 0.25));
        let a = update_q_omega(&mk(2.0, 0.0), &layout).unwrap();
        let b = update_q_omega(&mk(1.0, 3.0), &layout).unwrap();
        assert_eq!(a.tilt[0], 2.0);
        assert_eq!(a, b);
        assert!((a.omega_mean[0] - 0.190_398_538_99).abs() < 1e-9);
        let c = update_q_omega(&mk(0.0, -1e-14), &layout).unwrap();
        assert_eq!((c.tilt[0], c.clamped), (0.0, 1));
        assert!(matches!(update_q_omega(&mk(f64::NAN, 0.0), &layout), Err(Error::Numeric(_))));
    }

    #[test]
    fn site_examples() {
        let d = one_point(TaskKind::Regression, 1.0);
        let noise = NoiseVariances::new([(0, 0.1)]).unwrap();
        let s = site_matrices(&PGState::initial(&d.layout), &noise, &d).unwrap();
        assert!((s.h[0] - 10.0).abs() < 1e-12);
        assert_eq!(s.v[0], 1.0);

        let d = one_point(TaskKind::Classification, 1.0);
        let s = site_matrices(&PGState::initial(&d.layout), &noise, &d).unwrap();
        assert_eq!((s.h[0], s.v[0]), (0.25, 2.0));

        let mixed = TaskData::new(vec![
            TaskObservations { task_id: 1, kind: TaskKind::Classification, x: vec![vec![0.0]], y: vec![-1.0] },
            TaskObservations { task_id: 0, kind: TaskKind::Regression, x: vec![vec![1.0]], y: vec![3.0] },
        ])
        .unwrap();
        let s = site_matrices(&PGState::initial(&mixed.layout), &noise, &mixed).unwrap();
        assert_eq!(s.v.as_slice(), &[3.0, -2.0]);
        assert!(NoiseVariances::new([(0, 0.0)]).is_err());
    }

    #[test]
    fn scalar_posteriors() {
        let k = unit_k();
        let d = one_point(TaskKind::Regression, 1.0);
        let noise = NoiseVariances::new([(0, 0.1)]).unwrap();
        let s = site_matrices(&PGState::initial(&d.layout), &noise, &d).unwrap();
        let q = update_q_f(&s, &k).unwrap();
        assert!((q.cov[(0, 0)] - 1.0 / 11.0).abs() < 1e-10);
        assert!((q.mean[0] - 10.0 / 11.0).abs() < 1e-10);

        let d = one_point(TaskKind::Classification, 1.0);
        let s = site_matrices(&PGState::initial(&d.layout), &noise, &d).unwrap();
        let q = update_q_f(&s, &k).unwrap();
        assert!((q.cov[(0, 0)] - 0.8).abs() < 1e-10);
        assert!((q.mean[0] - 0.4).abs() < 1e-10);

        let d = one_point(TaskKind::Regression, 1.0);
        let noise = NoiseVariances::new([(0, 1e9)]).unwrap();
        let s = site_matrices(&PGState::initial(&d.layout), &noise, &d).unwrap();
        let q = update_q_f(&s, &k).unwrap();
        assert!(q.mean[0].abs() < 1e-6 && (q.cov[(0, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn regression_only_sweep_is_fixed_point() {
        let d = TaskData::new(vec![TaskObservations {
            task_id: 0,
            kind: TaskKind::Regression,
            x: vec![vec![0.0], vec![0.7], vec![2.0]],
            y: vec![0.3, -0.1, 1.2],
        }])
        .unwrap();
        let prior = scalar_prior(0.2);
        let k = prior.covariance(&d.layout, 1e-6).unwrap();
        let s1 = mean_field_sweep(MeanFieldState::initial(&d.layout, &k), &d, &prior.noise, &k, 1).unwrap();
        let s3 = mean_field_sweep(s1.clone(), &d, &prior.noise, &k, 2).unwrap();
        assert_eq!(s1, s3);
        assert!(s1.pg.is_empty());
        assert!(mean_field_sweep(s1, &d, &prior.noise, &k, 0).is_err());
    }

    #[test]
    fn predict_examples() {
        let d = one_point(TaskKind::Regression, 1.0);
        let prior = scalar_prior(0.1);
        let k = prior.covariance(&d.layout, 1e-12).unwrap();

        let at_prior = GaussianPosterior::prior(&k);
        for scope in [PredictionScope::Joint, PredictionScope::TaskBlock] {
            let p = predict(&at_prior, &k, &prior, &d.layout, 0, &[0.3], scope).unwrap();
            assert!(p.mean.abs() < 1e-15);
            assert!((p.variance - 1.0).abs() < 1e-12);
        }

        let s = site_matrices(&PGState::initial(&d.layout), &prior.noise, &d).unwrap();
        let q = update_q_f(&s, &k).unwrap();
        let p = predict(&q, &k, &prior, &d.layout, 0, &[0.0], PredictionScope::Joint).unwrap();
        assert!((p.mean - 10.0 / 11.0).abs() < 1e-9);
        assert!((p.variance - 1.0 / 11.0).abs() < 1e-9);

        let far = predict(&q, &k, &prior, &d.layout, 0, &[1e3], PredictionScope::Joint).unwrap();
        assert!(far.mean.abs() < 1e-12 && (far.variance - 1.0).abs() < 1e-12);
        assert!(predict(&q, &k, &prior, &d.layout, 5, &[0.0], PredictionScope::Joint).is_err());
    }

    #[test]
    fn class_probability_probit_approx() {
        assert_eq!(class_probability(0.0, 1.0), 0.5);
        let p = class_probability(1.0, 8.0 / PI);
        assert!((p - 1.0 / (1.0 + (-(0.5f64).sqrt()).exp())).abs() < 1e-15);
        assert!(class_probability(1e3, 0.0) < 1.0);
    }
}
