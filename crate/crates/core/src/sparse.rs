//! Inducing-point variant of client inference.
//!
//! Every task uses the same `M` inducing inputs `z`, drawn from the client's
//! own data. Latents at data points are tied to the inducing outputs through
//! the conditional-mean map `f_i(x) = A_iᵀ u_i` with
//! `A_i = (K^{ii}_mm)⁻¹ K^i_mn`, so each sweep costs `O(N M²)` after the
//! `O((TM)³)` inducing factorization.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::elbo::{term_a, term_b, term_c, term_d, ELBOBreakdown, Marginals};
use crate::error::{Error, Result};
use crate::linalg::{factorize, gaussian_site_update, Factorized, SitePrecision};
use crate::mogp::{cross_cov_matrix, TaskData, TaskKind, TaskLayout};
use crate::pg_inference::{Conditional, GaussianPosterior, PGState, Prediction, PredictionScope};
use crate::prior::{GlobalPrior, NoiseVariances};
use crate::rng::stream_rng;

/// Inducing inputs shared by every task of one client. Held client-side only.
#[derive(Clone, Debug, PartialEq)]
pub struct InducingSet {
    /// Positions in the client's deduplicated input pool, ascending.
    pub indices: Vec<usize>,
    pub points: Vec<Vec<f64>>,
}

impl InducingSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Distinct inputs of the client, in stacked order of first appearance.
pub fn input_pool(layout: &TaskLayout) -> Vec<Vec<f64>> {
    let mut seen = BTreeSet::new();
    let mut pool = Vec::new();
    for (_, x) in layout.points() {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            pool.push(x.to_vec());
        }
    }
    pool
}

/// Seeded uniform draw of `m` inducing inputs without replacement.
///
/// `m` is clamped to the smallest non-empty task. The draw takes a prefix of
/// one seeded permutation of the pool, so for a fixed seed the sets are nested
/// in `m`.
pub fn select_inducing(data: &TaskData, m: usize, seed: u64) -> Result<InducingSet> {
    if m == 0 {
        return Err(Error::input("inducing set size must be at least 1"));
    }
    if data.is_empty() {
        return Err(Error::input("cannot select inducing points from empty data"));
    }
    let min_n = data
        .layout
        .blocks()
        .iter()
        .filter(|b| !b.is_empty())
        .map(|b| b.len())
        .min()
        .unwrap_or(0);
    let pool = input_pool(&data.layout);
    let m = m.min(min_n).min(pool.len());
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut stream_rng(seed, "select_inducing", 0));
    let mut indices = order[..m].to_vec();
    indices.sort_unstable();
    let points = indices.iter().map(|&i| pool[i].clone()).collect();
    Ok(InducingSet { indices, points })
}

/// Prior quantities tying inducing outputs to the data under one prior.
#[derive(Clone, Debug)]
pub struct SparseModel {
    /// One block of `M` inducing outputs per task, in the data's task order.
    pub inducing_layout: TaskLayout,
    pub k_mm: Factorized,
    /// `A_i = (K^{ii}_mm)⁻¹ K^i_mn`, one `M × N_i` matrix per task block.
    pub maps: Vec<DMatrix<f64>>,
}

impl SparseModel {
    pub fn new(prior: &GlobalPrior, data: &TaskData, inducing: &InducingSet, base_jitter: f64) -> Result<Self> {
        if inducing.is_empty() {
            return Err(Error::input("inducing set is empty"));
        }
        let inducing_layout = TaskLayout::new(
            data.layout
                .blocks()
                .iter()
                .map(|b| (b.task_id, b.kind, inducing.points.clone()))
                .collect(),
        )?;
        let k_mm = prior.covariance(&inducing_layout, base_jitter)?;
        let jitter = k_mm.jitter();
        let m = inducing.len();
        let mut maps = Vec::with_capacity(data.layout.blocks().len());
        for (bi, block) in data.layout.blocks().iter().enumerate() {
            let zi: Vec<(usize, &[f64])> =
                inducing.points.iter().map(|p| (block.task_id, p.as_slice())).collect();
            let xi: Vec<(usize, &[f64])> =
                block.inputs.iter().map(|x| (block.task_id, x.as_slice())).collect();
            if xi.is_empty() {
                maps.push(DMatrix::zeros(m, 0));
                continue;
            }
            let mut k_mn = cross_cov_matrix(&prior.mixing, &prior.bases, &zi, &xi)?;
            // the nugget is part of the latent wherever an inducing input
            // coincides with a data input
            for (r, zp) in inducing.points.iter().enumerate() {
                for (c, xp) in block.inputs.iter().enumerate() {
                    if zp == xp {
                        k_mn[(r, c)] += jitter;
                    }
                }
            }
            let off = inducing_layout.blocks()[bi].offset();
            let k_ii = k_mm.matrix().view((off, off), (m, m)).into_owned();
            let f_ii = factorize(&k_ii, f64::MIN_POSITIVE, "inducing task block")?;
            maps.push(f_ii.solve_matrix(&k_mn));
        }
        Ok(Self {
            inducing_layout,
            k_mm,
            maps,
        })
    }

    pub fn m(&self) -> usize {
        self.inducing_layout.blocks().first().map_or(0, |b| b.len())
    }

    /// Propagated first and second moments at every data point.
    pub fn marginals(&self, posterior: &SparsePosterior, data: &TaskData) -> Result<Marginals> {
        if posterior.dim() != self.inducing_layout.len() {
            return Err(Error::input("sparse posterior does not match the inducing layout"));
        }
        let n = data.len();
        let mut mean = DVector::zeros(n);
        let mut second = DVector::zeros(n);
        let m = self.m();
        for (bi, block) in data.layout.blocks().iter().enumerate() {
            let off = self.inducing_layout.blocks()[bi].offset();
            let a = &self.maps[bi];
            let mi = posterior.mean.rows(off, m);
            let si = posterior.cov.view((off, off), (m, m));
            let sa = si * a;
            for (c, i) in block.range().enumerate() {
                let col = a.column(c);
                let mu = col.dot(&mi);
                let var = col.dot(&sa.column(c));
                mean[i] = mu;
                second[i] = var + mu * mu;
            }
        }
        Ok(Marginals { mean, second })
    }
}

/// `q(u) = N(m_xm, Σ_xm)` over the stacked inducing outputs.
pub type SparsePosterior = GaussianPosterior;

/// Dense site precision over inducing outputs and its natural mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSites {
    /// Block diagonal, one `A_i D_i A_iᵀ` block per task.
    pub h: DMatrix<f64>,
    /// Natural mean: `A_i y / σ_i²` for regression, `A_i y / 2` for
    /// classification.
    pub v: DVector<f64>,
}

pub fn sparse_site_matrices(
    pg: &PGState,
    noise: &NoiseVariances,
    model: &SparseModel,
    data: &TaskData,
) -> Result<SparseSites> {
    let dim = model.inducing_layout.len();
    let m = model.m();
    let mut h = DMatrix::zeros(dim, dim);
    let mut v = DVector::zeros(dim);
    let mut pg_pos = 0;
    for (bi, block) in data.layout.blocks().iter().enumerate() {
        if block.is_empty() {
            continue;
        }
        let a = &model.maps[bi];
        let (d, y_scaled): (Vec<f64>, Vec<f64>) = match block.kind {
            TaskKind::Regression => {
                let s2 = noise.get(block.task_id)?;
                block.range().map(|i| (1.0 / s2, data.targets[i] / s2)).unzip()
            }
            TaskKind::Classification => block
                .range()
                .map(|i| {
                    if pg.indices.get(pg_pos) != Some(&i) {
                        return Err(Error::input("PG state does not match the task layout"));
                    }
                    let om = pg.omega_mean[pg_pos];
                    pg_pos += 1;
                    Ok((om, data.targets[i] / 2.0))
                })
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .unzip(),
        };
        let mut ad = a.clone();
        for (c, mut col) in ad.column_iter_mut().enumerate() {
            col *= d[c];
        }
        let off = model.inducing_layout.blocks()[bi].offset();
        h.view_mut((off, off), (m, m)).copy_from(&(ad * a.transpose()));
        v.rows_mut(off, m).copy_from(&(a * DVector::from_vec(y_scaled)));
    }
    if pg_pos != pg.len() {
        return Err(Error::input("PG state has more entries than classification samples"));
    }
    Ok(SparseSites { h, v })
}

/// `Σ_xm = (H_xm + K_mm⁻¹)⁻¹`, `m_xm = Σ_xm v_xm`.
pub fn sparse_update_q(sites: &SparseSites, k_mm: &Factorized) -> Result<SparsePosterior> {
    if sites.h.nrows() != k_mm.dim() || sites.v.len() != k_mm.dim() {
        return Err(Error::input("sparse sites do not match the inducing covariance"));
    }
    let (mean, cov) = gaussian_site_update(k_mm, SitePrecision::Dense(&sites.h), &sites.v)?;
    Ok(GaussianPosterior { mean, cov })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseState {
    pub pg: PGState,
    pub posterior: SparsePosterior,
}

impl SparseState {
    pub fn initial(model: &SparseModel, data: &TaskData) -> Self {
        Self {
            pg: PGState::initial(&data.layout),
            posterior: GaussianPosterior::prior(&model.k_mm),
        }
    }
}

/// Sparse analogue of [`crate::pg_inference::mean_field_sweep`].
pub fn sparse_sweep(
    state: SparseState,
    data: &TaskData,
    noise: &NoiseVariances,
    model: &SparseModel,
    n_iters: usize,
) -> Result<SparseState> {
    if n_iters == 0 {
        return Err(Error::input("mean-field sweep needs at least one iteration"));
    }
    let mut state = state;
    for _ in 0..n_iters {
        let marg = model.marginals(&state.posterior, data)?;
        let pg = PGState::from_second_moments(&data.layout, &marg.second)?;
        let sites = sparse_site_matrices(&pg, noise, model, data)?;
        let posterior = sparse_update_q(&sites, &model.k_mm)?;
        state = SparseState { pg, posterior };
    }
    Ok(state)
}

/// ELBO terms with data-point moments propagated through the `A_i` maps and
/// the KL taken against the inducing prior.
pub fn sparse_elbo_terms(
    posterior: &SparsePosterior,
    pg: &PGState,
    noise: &NoiseVariances,
    data: &TaskData,
    model: &SparseModel,
) -> Result<ELBOBreakdown> {
    let marg = model.marginals(posterior, data)?;
    Ok(ELBOBreakdown::new(
        term_a(&marg, noise, data)?,
        term_b(&marg, pg, data),
        term_c(pg),
        term_d(posterior, &model.k_mm)?,
    ))
}

/// Predictor for task `task` from a sparse posterior.
pub fn sparse_conditional(
    posterior: &SparsePosterior,
    model: &SparseModel,
    task: usize,
    scope: PredictionScope,
) -> Result<Conditional> {
    let layout = &model.inducing_layout;
    let block = layout
        .block_of_task(task)
        .ok_or_else(|| Error::input(format!("task {task} is not in the layout")))?;
    let points = layout.points().into_iter().map(|(t, x)| (t, x.to_vec())).collect();
    Conditional::from_stacked(
        points,
        model.k_mm.matrix(),
        &posterior.mean,
        &posterior.cov,
        scope,
        block.range(),
        model.k_mm.jitter(),
    )
}

/// `μ = aᵀ m_i`, `σ² = k** − k_mᵀ K_ii⁻¹ k_m + aᵀ Σ_ii a` under
/// [`PredictionScope::TaskBlock`]; the joint scope conditions on every
/// task's inducing outputs.
pub fn sparse_predict(
    posterior: &SparsePosterior,
    model: &SparseModel,
    prior: &GlobalPrior,
    task: usize,
    x_star: &[f64],
    scope: PredictionScope,
) -> Result<Prediction> {
    sparse_conditional(posterior, model, task, scope)?.predict(prior, task, x_star)
}
