//! In-process simulation of the server and client loops.
//!
//! Each round the server samples clients, broadcasts the global prior, and
//! collects payloads; clients fit their variational factors under the prior
//! (overlaid with any hyperparameters they keep personal) and take one local
//! ascent step on those personal hyperparameters. The server then ascends the
//! averaged ELBO of the sampled clients over the groups its mode aggregates.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_payload, encode_payload, Checkpoint, ClientCheckpoint};
use crate::elbo::{
    apply_direction, averaged_elbo, elbo_terms, fd_gradient, hyper_gradient, optimal_sigma2,
    optimizer_step, pairwise_sum, term_a, term_b, term_c, AdamConfig, ELBOBreakdown, LocalElbo,
    Marginals, OptState, PosteriorFactor, FD_SCALE,
};
use crate::error::{Error, Result};
use crate::linalg::{Factorized, DEFAULT_JITTER};
use crate::mogp::{TaskData, TaskKind};
use crate::pg_inference::{
    dense_conditional, mean_field_sweep, Conditional, GaussianPosterior, MeanFieldState, PGState,
    Prediction, PredictionScope,
};
use crate::prior::{AggregationMode, GlobalPrior, ParamGroup};
use crate::rng::{derive_seed, stream_rng};
use crate::sparse::{select_inducing, sparse_conditional, sparse_sweep, InducingSet, SparseModel, SparseState};

/// Largest number of learning-rate halvings tried by the server line search.
pub const MAX_HALVINGS: u32 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Server rounds `T_s`.
    pub rounds: usize,
    /// Client repetitions `T_c` of the mean-field sweep per round.
    pub local_iters: usize,
    /// Number of training clients `Z`.
    pub n_clients: usize,
    /// Clients sampled per round `S`.
    pub sample_size: usize,
    /// Alternations of the `q(ω)` and `q(f)` updates inside one sweep.
    pub mf_iters: usize,
    pub mode: AggregationMode,
    /// Inducing inputs per client; 0 selects dense inference.
    pub inducing_m: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub line_search: bool,
    pub warm_start: bool,
    pub base_jitter: f64,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 20,
            local_iters: 2,
            n_clients: 5,
            sample_size: 5,
            mf_iters: 2,
            mode: AggregationMode::A,
            inducing_m: 0,
            seed: 0,
            adam: AdamConfig::default(),
            line_search: true,
            warm_start: false,
            base_jitter: DEFAULT_JITTER,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(key, msg));
        if self.rounds < 1 {
            return bad("rounds", "must be at least 1");
        }
        if self.local_iters < 1 {
            return bad("local_iters", "must be at least 1");
        }
        if self.mf_iters < 1 {
            return bad("mf_iters", "must be at least 1");
        }
        if self.n_clients < 1 {
            return bad("clients", "must be at least 1");
        }
        if self.sample_size < 1 || self.sample_size > self.n_clients {
            return bad("sample_size", "must lie between 1 and the number of clients");
        }
        if !(self.adam.learning_rate > 0.0 && self.adam.learning_rate.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(self.base_jitter > 0.0 && self.base_jitter.is_finite()) {
            return bad("jitter", "must be positive");
        }
        Ok(())
    }
}

/// Uniform draw of `s` of `z` clients without replacement, fixed by
/// `(seed, round)`. Returned ids are ascending.
pub fn sample_clients(z: usize, s: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if s > z {
        return Err(Error::input(format!("cannot sample {s} of {z} clients")));
    }
    let mut ids: Vec<usize> = (0..z).collect();
    if s < z {
        ids.shuffle(&mut stream_rng(seed, "sample_clients", round as u64));
        ids.truncate(s);
        ids.sort_unstable();
    }
    Ok(ids)
}

/// A client's training data.
#[derive(Clone, Debug)]
pub struct ClientData {
    pub client_id: usize,
    pub data: Arc<TaskData>,
}

/// Variational state a client may carry into the next round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum WarmState {
    Dense(MeanFieldState),
    Sparse(SparseState),
}

#[derive(Clone, Debug)]
enum Fit {
    Dense { k: Factorized },
    Sparse { model: SparseModel, inducing: InducingSet },
}

/// A client's fitted variational factors under the prior it was given. Once
/// built it can re-evaluate its ELBO under other priors with the factors held
/// fixed, which is all the server needs from it.
#[derive(Clone, Debug)]
pub struct ClientFit {
    pub client_id: usize,
    pub data: Arc<TaskData>,
    /// The prior the factors were fitted under, personal groups included.
    pub prior: GlobalPrior,
    pub personal_groups: Vec<ParamGroup>,
    /// Dense: over data latents. Sparse: over inducing outputs.
    pub posterior: GaussianPosterior,
    pub pg: PGState,
    pub elbo: ELBOBreakdown,
    fit: Fit,
    factor: PosteriorFactor,
    base_jitter: f64,
}

impl ClientFit {
    pub fn is_sparse(&self) -> bool {
        matches!(self.fit, Fit::Sparse { .. })
    }

    pub fn inducing(&self) -> Option<&InducingSet> {
        match &self.fit {
            Fit::Sparse { inducing, .. } => Some(inducing),
            Fit::Dense { .. } => None,
        }
    }

    /// Posterior moments at the training points.
    pub fn marginals(&self) -> Result<Marginals> {
        match &self.fit {
            Fit::Dense { .. } => Ok(Marginals::of(&self.posterior)),
            Fit::Sparse { model, .. } => model.marginals(&self.posterior, &self.data),
        }
    }

    /// ELBO under `prior` (taken as complete, personal groups included) with
    /// the variational factors fixed.
    pub fn elbo_under(&self, prior: &GlobalPrior) -> Result<ELBOBreakdown> {
        let (marg, kl) = match &self.fit {
            Fit::Dense { .. } => {
                let k = prior.covariance(&self.data.layout, self.base_jitter)?;
                (Marginals::of(&self.posterior), self.factor.kl(&self.posterior, &k)?)
            }
            Fit::Sparse { inducing, .. } => {
                let model = SparseModel::new(prior, &self.data, inducing, self.base_jitter)?;
                let marg = model.marginals(&self.posterior, &self.data)?;
                (marg, self.factor.kl(&self.posterior, &model.k_mm)?)
            }
        };
        Ok(ELBOBreakdown::new(
            term_a(&marg, &prior.noise, &self.data)?,
            term_b(&marg, &self.pg, &self.data),
            term_c(&self.pg),
            kl,
        ))
    }

    pub fn conditional(&self, task: usize, scope: PredictionScope) -> Result<Conditional> {
        match &self.fit {
            Fit::Dense { k } => dense_conditional(&self.posterior, k, &self.data.layout, task, scope),
            Fit::Sparse { model, .. } => sparse_conditional(&self.posterior, model, task, scope),
        }
    }

    pub fn predict(&self, task: usize, x: &[f64], scope: PredictionScope) -> Result<Prediction> {
        self.conditional(task, scope)?.predict(&self.prior, task, x)
    }

    /// Closed-form noise variance and sample count of each regression task.
    pub fn noise_estimates(&self) -> Result<Vec<NoiseEstimate>> {
        let marg = self.marginals()?;
        self.data
            .layout
            .blocks()
            .iter()
            .filter(|b| b.kind == TaskKind::Regression && !b.is_empty())
            .map(|b| {
                Ok(NoiseEstimate {
                    task_id: b.task_id,
                    count: b.len(),
                    sigma2: optimal_sigma2(&marg, &self.data, b.task_id)?,
                })
            })
            .collect()
    }

    pub fn warm_state(&self) -> WarmState {
        match self.fit {
            Fit::Dense { .. } => WarmState::Dense(MeanFieldState {
                pg: self.pg.clone(),
                posterior: self.posterior.clone(),
            }),
            Fit::Sparse { .. } => WarmState::Sparse(SparseState {
                pg: self.pg.clone(),
                posterior: self.posterior.clone(),
            }),
        }
    }

    pub fn payload(&self, round: usize) -> Result<ClientPayload> {
        let groups = &self.personal_groups;
        let local_params = self
            .prior
            .param_names(groups)
            .into_iter()
            .zip(self.prior.gather(groups))
            .map(|(name, value)| LocalParam { name, value })
            .collect();
        Ok(ClientPayload {
            client_id: self.client_id,
            round,
            kind: if self.is_sparse() { PosteriorKind::Sparse } else { PosteriorKind::Dense },
            posterior: self.posterior.clone(),
            pg: self.pg.clone(),
            elbo: self.elbo,
            noise: self.noise_estimates()?,
            local_params,
        })
    }
}

impl LocalElbo for ClientFit {
    fn elbo(&self, prior: &GlobalPrior) -> Result<ELBOBreakdown> {
        let effective = prior.overlay(&self.prior, &self.personal_groups)?;
        self.elbo_under(&effective)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorKind {
    Dense,
    Sparse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseEstimate {
    pub task_id: usize,
    pub count: usize,
    pub sigma2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalParam {
    pub name: String,
    pub value: f64,
}

/// What a client sends to the server. It carries variational moments and
/// summary statistics only: no inputs, targets or inducing locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientPayload {
    pub client_id: usize,
    pub round: usize,
    pub kind: PosteriorKind,
    pub posterior: GaussianPosterior,
    pub pg: PGState,
    pub elbo: ELBOBreakdown,
    pub noise: Vec<NoiseEstimate>,
    /// Hyperparameters the client keeps personal under the current mode.
    pub local_params: Vec<LocalParam>,
}

impl ClientPayload {
    pub fn validate(&self) -> Result<()> {
        let n = self.posterior.mean.len();
        if self.posterior.cov.nrows() != n || self.posterior.cov.ncols() != n {
            return Err(Error::Encoding("posterior covariance shape does not match the mean".into()));
        }
        if self.posterior.mean.iter().chain(self.posterior.cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Encoding("posterior has non-finite entries".into()));
        }
        let pg = &self.pg;
        if pg.tilt.len() != pg.indices.len() || pg.omega_mean.len() != pg.indices.len() {
            return Err(Error::Encoding("PG state vectors differ in length".into()));
        }
        if pg.tilt.iter().any(|t| !(*t >= 0.0 && t.is_finite()))
            || pg.omega_mean.iter().any(|w| !(*w > 0.0 && w.is_finite()))
        {
            return Err(Error::Encoding("PG state has invalid entries".into()));
        }
        if self.kind == PosteriorKind::Dense && pg.indices.iter().any(|&i| i >= n) {
            return Err(Error::Encoding("PG index outside the posterior".into()));
        }
        if self.noise.iter().any(|e| !(e.sigma2 > 0.0 && e.sigma2.is_finite()) || e.count == 0) {
            return Err(Error::Encoding("invalid noise estimate".into()));
        }
        Ok(())
    }
}

/// Fits a client's variational factors under `prior` (already overlaid with
/// its personal hyperparameters): `local_iters` sweeps of `mf_iters`
/// alternations each, from the prior or from `warm`.
pub fn run_client(
    prior: &GlobalPrior,
    client: &ClientData,
    cfg: &FederationConfig,
    personal_groups: &[ParamGroup],
    inducing: Option<&InducingSet>,
    warm: Option<&WarmState>,
) -> Result<ClientFit> {
    let fit_inner = || -> Result<ClientFit> {
        let data = &client.data;
        let (posterior, pg, fit, elbo) = match inducing {
            None => {
                let k = prior.covariance(&data.layout, cfg.base_jitter)?;
                let mut state = match warm {
                    Some(WarmState::Dense(s)) if cfg.warm_start && s.posterior.dim() == data.len() => s.clone(),
                    _ => MeanFieldState::initial(&data.layout, &k),
                };
                for _ in 0..cfg.local_iters {
                    state = mean_field_sweep(state, data, &prior.noise, &k, cfg.mf_iters)?;
                }
                let elbo = elbo_terms(&state.posterior, &state.pg, &prior.noise, data, &k)?;
                (state.posterior, state.pg, Fit::Dense { k }, elbo)
            }
            Some(ind) => {
                let model = SparseModel::new(prior, data, ind, cfg.base_jitter)?;
                let mut state = match warm {
                    Some(WarmState::Sparse(s))
                        if cfg.warm_start && s.posterior.dim() == model.inducing_layout.len() =>
                    {
                        s.clone()
                    }
                    _ => SparseState::initial(&model, data),
                };
                for _ in 0..cfg.local_iters {
                    state = sparse_sweep(state, data, &prior.noise, &model, cfg.mf_iters)?;
                }
                let elbo = crate::sparse::sparse_elbo_terms(&state.posterior, &state.pg, &prior.noise, data, &model)?;
                (
                    state.posterior,
                    state.pg,
                    Fit::Sparse {
                        model,
                        inducing: ind.clone(),
                    },
                    elbo,
                )
            }
        };
        Ok(ClientFit {
            client_id: client.client_id,
            data: Arc::clone(data),
            prior: prior.clone(),
            personal_groups: personal_groups.to_vec(),
            factor: PosteriorFactor::new(&posterior)?,
            posterior,
            pg,
            elbo,
            fit,
            base_jitter: cfg.base_jitter,
        })
    };
    fit_inner().map_err(|e| e.context(format!("client {}", client.client_id)))
}

/// One ascent step on the client's personal hyperparameters against its own
/// ELBO, factors fixed. Returns the updated personal prior.
pub fn local_step(fit: &ClientFit, opt: &mut OptState, adam: &AdamConfig) -> Result<GlobalPrior> {
    let groups = &fit.personal_groups;
    if fit.prior.gather(groups).is_empty() {
        return Ok(fit.prior.clone());
    }
    let grad = fd_gradient(&fit.prior, groups, FD_SCALE, |p| fit.elbo_under(p).map(|e| e.total))
        .map_err(|e| e.context(format!("local step of client {}", fit.client_id)))?;
    optimizer_step(&fit.prior, &grad, groups, opt, adam)
}

/// Summary of one server round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Averaged ELBO of the sampled clients under the broadcast prior.
    pub elbo_before: f64,
    /// The same average, factors fixed, under the updated prior.
    pub elbo_after: Option<f64>,
    /// Euclidean norm of the change of each parameter group, in the
    /// coordinates used by the optimizer (log scale for positives).
    pub change_norms: BTreeMap<String, f64>,
    pub step_rate: f64,
    pub halvings: u32,
    pub skipped: Option<String>,
    /// Client ELBO breakdowns, by client id.
    pub client_elbos: BTreeMap<usize, ELBOBreakdown>,
}

/// Server update from the sampled clients' payloads and frozen ELBOs. Inputs
/// are put in client-id order first, so their order does not matter.
pub fn server_step(
    prior: &GlobalPrior,
    contributions: &[(ClientPayload, &dyn LocalElbo)],
    cfg: &FederationConfig,
    opt: &mut OptState,
    round: usize,
) -> Result<(GlobalPrior, RoundLog)> {
    if contributions.is_empty() {
        return Err(Error::input("server step needs at least one payload"));
    }
    let mut order: Vec<usize> = (0..contributions.len()).collect();
    order.sort_by_key(|&i| contributions[i].0.client_id);
    let sampled: Vec<usize> = order.iter().map(|&i| contributions[i].0.client_id).collect();
    if sampled.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::input("duplicate client id among payloads"));
    }
    let clients: Vec<&dyn LocalElbo> = order.iter().map(|&i| contributions[i].1).collect();
    let payloads: Vec<&ClientPayload> = order.iter().map(|&i| &contributions[i].0).collect();

    let before = averaged_elbo(prior, &clients)?;
    let mut log = RoundLog {
        round,
        sampled,
        elbo_before: before,
        elbo_after: None,
        change_norms: BTreeMap::new(),
        step_rate: 0.0,
        halvings: 0,
        skipped: None,
        client_elbos: payloads.iter().map(|p| (p.client_id, p.elbo)).collect(),
    };

    let groups = cfg.mode.server_groups();
    let mut next = prior.clone();
    if !prior.gather(&groups).is_empty() {
        match hyper_gradient(prior, &clients, &groups) {
            Err(e) => {
                log::warn!("round {round}: gradient failed, prior unchanged: {e}");
                log.skipped = Some(format!("gradient failed: {e}"));
            }
            Ok(grad) => match opt.direction(&grad, &cfg.adam)? {
                None => log.skipped = Some("non-finite gradient".to_string()),
                Some(dir) => {
                    let u = prior.gather(&groups);
                    let mut rate = cfg.adam.learning_rate;
                    let mut accepted = false;
                    for halving in 0..=MAX_HALVINGS {
                        let mut cand = prior.clone();
                        let value = cand
                            .scatter(&groups, &apply_direction(&u, &dir, rate, cfg.adam.weight_decay))
                            .and_then(|_| averaged_elbo(&cand, &clients));
                        let ok = match value {
                            Ok(v) => !cfg.line_search || v >= before,
                            Err(_) => false,
                        };
                        if ok {
                            next = cand;
                            log.step_rate = rate;
                            log.halvings = halving;
                            accepted = true;
                            break;
                        }
                        if !cfg.line_search {
                            break;
                        }
                        rate *= 0.5;
                    }
                    if !accepted {
                        log.skipped = Some("no ascent step found".to_string());
                    }
                }
            },
        }
    }

    if cfg.mode.aggregates_noise() {
        let tasks: Vec<usize> = next.noise.iter().map(|(t, _)| t).collect();
        for t in tasks {
            let est: Vec<&NoiseEstimate> = payloads
                .iter()
                .flat_map(|p| p.noise.iter())
                .filter(|e| e.task_id == t)
                .collect();
            if est.is_empty() {
                continue;
            }
            let weighted: Vec<f64> = est.iter().map(|e| e.count as f64 * e.sigma2).collect();
            let counts: Vec<f64> = est.iter().map(|e| e.count as f64).collect();
            next.noise.set(t, pairwise_sum(&weighted) / pairwise_sum(&counts))?;
        }
    }

    log.elbo_after = averaged_elbo(&next, &clients).ok();
    for g in [ParamGroup::Phi, ParamGroup::Theta, ParamGroup::Mixing, ParamGroup::Noise] {
        let a = prior.gather(&[g]);
        let b = next.gather(&[g]);
        let norm = a.iter().zip(&b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>().sqrt();
        log.change_norms.insert(g.as_str().to_string(), norm);
    }
    Ok((next, log))
}

/// Hook for per-round inspection of fitted clients.
pub trait RoundObserver {
    fn on_round(&mut self, log: &RoundLog, fits: &[ClientFit]) -> Result<()>;
}

impl RoundObserver for () {
    fn on_round(&mut self, _: &RoundLog, _: &[ClientFit]) -> Result<()> {
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct FederationInput {
    pub train: Vec<ClientData>,
    /// Clients that join only after training and fit against the final prior.
    pub new: Vec<ClientData>,
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Written after every round.
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    pub observer: Option<&'a mut dyn RoundObserver>,
}

#[derive(Clone, Debug)]
pub struct FederationResult {
    pub prior: GlobalPrior,
    pub opt: OptState,
    pub logs: Vec<RoundLog>,
    /// Final fits of the training clients, by id.
    pub train: Vec<ClientFit>,
    /// Final fits of the new clients, by id.
    pub new: Vec<ClientFit>,
    /// Averaged final ELBO over the training clients.
    pub final_elbo: f64,
}

struct ClientSlot {
    data: ClientData,
    inducing: Option<InducingSet>,
    state: ClientCheckpoint,
}

fn sorted_clients(mut clients: Vec<ClientData>) -> Vec<ClientData> {
    clients.sort_by_key(|c| c.client_id);
    clients
}

fn inducing_for(client: &ClientData, cfg: &FederationConfig) -> Result<Option<InducingSet>> {
    if cfg.inducing_m == 0 {
        return Ok(None);
    }
    let seed = derive_seed(cfg.seed, "inducing", client.client_id as u64);
    select_inducing(&client.data, cfg.inducing_m, seed)
        .map(Some)
        .map_err(|e| e.context(format!("client {}", client.client_id)))
}

/// Runs `rounds` server rounds followed by a final fit of every client.
pub fn run_federation(
    initial: &GlobalPrior,
    input: &FederationInput,
    cfg: &FederationConfig,
    opts: RunOptions<'_>,
) -> Result<FederationResult> {
    cfg.validate()?;
    let train = sorted_clients(input.train.clone());
    let new = sorted_clients(input.new.clone());
    if train.len() != cfg.n_clients {
        return Err(Error::config(
            "clients",
            format!("configured {} training clients but {} were provided", cfg.n_clients, train.len()),
        ));
    }
    let mut ids = BTreeSet::new();
    for c in train.iter().chain(&new) {
        if !ids.insert(c.client_id) {
            return Err(Error::input(format!("client id {} appears twice", c.client_id)));
        }
    }

    let mut prior = initial.clone();
    prior.mode = cfg.mode;
    let personal = cfg.mode.local_groups();
    let mut opt = OptState::default();
    let mut logs = Vec::new();
    let mut start = 1;
    let mut slots: Vec<ClientSlot> = train
        .iter()
        .map(|c| {
            Ok(ClientSlot {
                inducing: inducing_for(c, cfg)?,
                data: c.clone(),
                state: ClientCheckpoint {
                    client_id: c.client_id,
                    personal: prior.clone(),
                    opt: OptState::default(),
                    warm: None,
                },
            })
        })
        .collect::<Result<_>>()?;

    if let Some(cp) = opts.resume {
        if cp.seed != cfg.seed {
            return Err(Error::config("resume", format!("checkpoint seed {} differs from {}", cp.seed, cfg.seed)));
        }
        if cp.rounds_completed > cfg.rounds {
            return Err(Error::config("resume", "checkpoint has more rounds than configured"));
        }
        let cp_ids: Vec<usize> = cp.clients.iter().map(|c| c.client_id).collect();
        let our_ids: Vec<usize> = slots.iter().map(|s| s.data.client_id).collect();
        if cp_ids != our_ids {
            return Err(Error::config("resume", "checkpoint clients differ from the data"));
        }
        if cp.prior.mode != cfg.mode {
            return Err(Error::config("resume", "checkpoint aggregation mode differs"));
        }
        prior = cp.prior;
        opt = cp.opt;
        for (slot, state) in slots.iter_mut().zip(cp.clients) {
            slot.state = state;
        }
        start = cp.rounds_completed + 1;
        logs = cp.logs;
        log::info!("resuming after round {}", start - 1);
    }

    let mut observer = opts.observer;
    for round in start..=cfg.rounds {
        let sampled = sample_clients(slots.len(), cfg.sample_size, round, cfg.seed)?;
        let outcomes: Vec<(ClientFit, Vec<u8>, GlobalPrior, OptState)> = sampled
            .par_iter()
            .map(|&pos| {
                let slot = &slots[pos];
                let effective = prior.overlay(&slot.state.personal, &personal)?;
                let fit = run_client(
                    &effective,
                    &slot.data,
                    cfg,
                    &personal,
                    slot.inducing.as_ref(),
                    slot.state.warm.as_ref(),
                )?;
                let bytes = encode_payload(&fit.payload(round)?)?;
                let mut local_opt = slot.state.opt.clone();
                let personal_next = local_step(&fit, &mut local_opt, &cfg.adam)?;
                Ok((fit, bytes, personal_next, local_opt))
            })
            .collect::<Result<_>>()
            .map_err(|e: Error| e.context(format!("round {round}")))?;

        let payloads = outcomes
            .iter()
            .map(|(_, bytes, _, _)| decode_payload(bytes))
            .collect::<Result<Vec<_>>>()?;
        let contributions: Vec<(ClientPayload, &dyn LocalElbo)> = payloads
            .into_iter()
            .zip(&outcomes)
            .map(|(p, (fit, _, _, _))| (p, fit as &dyn LocalElbo))
            .collect();
        let (next, log) = server_step(&prior, &contributions, cfg, &mut opt, round)
            .map_err(|e| e.context(format!("server step of round {round}")))?;
        drop(contributions);
        log::info!(
            "round {round}: averaged ELBO {:.6} -> {}",
            log.elbo_before,
            log.elbo_after.map_or("n/a".to_string(), |v| format!("{v:.6}"))
        );

        let mut fits = Vec::with_capacity(outcomes.len());
        for (&pos, (fit, _, personal_next, local_opt)) in sampled.iter().zip(outcomes) {
            let state = &mut slots[pos].state;
            state.personal = personal_next;
            state.opt = local_opt;
            if cfg.warm_start {
                state.warm = Some(fit.warm_state());
            }
            fits.push(fit);
        }
        prior = next;
        if let Some(obs) = observer.as_deref_mut() {
            obs.on_round(&log, &fits)?;
        }
        logs.push(log);
        if let Some(path) = &opts.checkpoint {
            Checkpoint::new(
                cfg.seed,
                round,
                prior.clone(),
                opt.clone(),
                slots.iter().map(|s| s.state.clone()).collect(),
                logs.clone(),
            )
            .write(path)?;
        }
    }

    let train_fits: Vec<ClientFit> = slots
        .par_iter()
        .map(|slot| {
            let effective = prior.overlay(&slot.state.personal, &personal)?;
            run_client(&effective, &slot.data, cfg, &personal, slot.inducing.as_ref(), slot.state.warm.as_ref())
        })
        .collect::<Result<_>>()
        .map_err(|e: Error| e.context("final fit"))?;
    let new_fits: Vec<ClientFit> = new
        .par_iter()
        .map(|c| run_client(&prior, c, cfg, &[], inducing_for(c, cfg)?.as_ref(), None))
        .collect::<Result<_>>()
        .map_err(|e: Error| e.context("final fit of new clients"))?;
    let totals: Vec<f64> = train_fits.iter().map(|f| f.elbo.total).collect();
    Ok(FederationResult {
        final_elbo: pairwise_sum(&totals) / totals.len() as f64,
        prior,
        opt,
        logs,
        train: train_fits,
        new: new_fits,
    })
}
