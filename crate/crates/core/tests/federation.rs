mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use ciborium::value::Value;
use common::*;
use fedmogp::checkpoint::{decode_payload, encode_payload, Checkpoint};
use fedmogp::config::ExperimentConfig;
use fedmogp::elbo::{elbo_terms, optimal_sigma2, ELBOBreakdown, LocalElbo, Marginals};
use fedmogp::experiment::{federation_input, initial_prior, prepare_data};
use fedmogp::federation::{
    run_client, run_federation, sample_clients, server_step, ClientData, FederationConfig, FederationInput,
    RunOptions,
};
use fedmogp::kernels::FeatureMapKind;
use fedmogp::mogp::TaskData;
use fedmogp::pg_inference::GaussianPosterior;
use fedmogp::prior::{AggregationMode, GlobalPrior, ParamGroup};
use fedmogp::rng::stream_rng;
use fedmogp::Error;

fn small_experiment(clients: usize, points: usize, rounds: usize) -> (ExperimentConfig, FederationInput, GlobalPrior) {
    let mut cfg = ExperimentConfig::default();
    cfg.synthetic.n_clients = clients;
    cfg.synthetic.n_points = points;
    cfg.federation.rounds = rounds;
    let prepared = prepare_data(&cfg).unwrap();
    let input = federation_input(&prepared.datasets).unwrap();
    let prior = initial_prior(&cfg, &prepared.datasets).unwrap();
    (cfg, input, prior)
}

fn fed_config(cfg: &ExperimentConfig, n: usize) -> FederationConfig {
    cfg.federation_config(n)
}

#[test]
fn sampling_frequency_is_close_to_uniform() {
    let mut counts = [0usize; 10];
    for round in 1..=1000 {
        let s = sample_clients(10, 3, round, 42).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.iter().collect::<BTreeSet<_>>().len(), 3);
        for c in s {
            counts[c] += 1;
        }
    }
    for (c, n) in counts.iter().enumerate() {
        let f = *n as f64 / 1000.0;
        assert!((0.25..=0.35).contains(&f), "client {c} sampled with frequency {f}");
    }
    assert_eq!(sample_clients(4, 4, 7, 1).unwrap(), vec![0, 1, 2, 3]);
    assert_eq!(sample_clients(10, 3, 5, 9).unwrap(), sample_clients(10, 3, 5, 9).unwrap());
    assert!(sample_clients(2, 3, 1, 0).is_err());
}

#[test]
fn regression_only_client_has_empty_pg_state() {
    let mut rng = stream_rng(1, "fed_test", 0);
    let data = TaskData::new(vec![regression_task(&mut rng, 0, 6)]).unwrap();
    let prior = random_prior(&mut rng, 1, &[0]);
    let client = ClientData { client_id: 0, data: Arc::new(data) };
    let fit = run_client(&prior, &client, &FederationConfig::default(), &[], None, None).unwrap();
    assert!(fit.pg.is_empty());
    assert_eq!(fit.elbo.term_b, 0.0);
    assert_eq!(fit.elbo.term_c, 0.0);
}

#[test]
fn payload_elbo_matches_recomputation_and_survives_the_wire() {
    let mut rng = stream_rng(2, "fed_test", 0);
    let data = Arc::new(mixed_data(&mut rng, 9));
    let prior = random_prior(&mut rng, 2, &[0]);
    let cfg = FederationConfig::default();
    let client = ClientData { client_id: 3, data: Arc::clone(&data) };
    let fit = run_client(&prior, &client, &cfg, &[], None, None).unwrap();
    let again = run_client(&prior, &client, &cfg, &[], None, None).unwrap();
    let payload = fit.payload(1).unwrap();
    assert_eq!(payload, again.payload(1).unwrap());

    let wire = decode_payload(&encode_payload(&payload).unwrap()).unwrap();
    assert_eq!(wire, payload);

    let k = prior.covariance(&data.layout, cfg.base_jitter).unwrap();
    let post = GaussianPosterior { mean: wire.posterior.mean.clone(), cov: wire.posterior.cov.clone() };
    let e = elbo_terms(&post, &wire.pg, &prior.noise, &data, &k).unwrap();
    assert!((e.total - wire.elbo.total).abs() <= 1e-10 * e.total.abs().max(1.0), "{e:?} vs {:?}", wire.elbo);
}

fn collect_keys(v: &Value, keys: &mut BTreeSet<String>) {
    match v {
        Value::Map(m) => {
            for (k, v) in m {
                if let Value::Text(t) = k {
                    keys.insert(t.clone());
                }
                collect_keys(v, keys);
            }
        }
        Value::Array(a) => a.iter().for_each(|v| collect_keys(v, keys)),
        Value::Tag(_, v) => collect_keys(v, keys),
        _ => {}
    }
}

fn collect_floats(v: &Value, out: &mut Vec<f64>) {
    match v {
        Value::Float(f) => out.push(*f),
        Value::Map(m) => m.iter().for_each(|(_, v)| collect_floats(v, out)),
        Value::Array(a) => a.iter().for_each(|v| collect_floats(v, out)),
        Value::Tag(_, v) => collect_floats(v, out),
        _ => {}
    }
}

#[test]
fn payload_carries_no_inputs_targets_or_inducing_locations() {
    let (cfg, input, prior) = small_experiment(1, 12, 1);
    let mut fcfg = fed_config(&cfg, 1);
    for inducing_m in [0, 5] {
        fcfg.inducing_m = inducing_m;
        let client = &input.train[0];
        let inducing = (inducing_m > 0)
            .then(|| fedmogp::sparse::select_inducing(&client.data, inducing_m, 1).unwrap());
        for mode in AggregationMode::ALL {
            let fit = run_client(&prior, client, &fcfg, &mode.local_groups(), inducing.as_ref(), None).unwrap();
            let bytes = encode_payload(&fit.payload(1).unwrap()).unwrap();
            let value: Value = ciborium::from_reader(bytes.as_slice()).unwrap();
            let mut keys = BTreeSet::new();
            collect_keys(&value, &mut keys);
            for banned in ["x", "y", "inputs", "targets", "points", "inducing", "layout", "data"] {
                assert!(!keys.contains(banned), "payload has field `{banned}`: {keys:?}");
            }
            let mut floats = Vec::new();
            collect_floats(&value, &mut floats);
            let data = &client.data;
            let raw: Vec<f64> = data
                .targets
                .iter()
                .copied()
                .chain(data.layout.points().iter().flat_map(|(_, x)| x.iter().copied()))
                .filter(|v| v.abs() != 1.0 && *v != 0.0)
                .collect();
            for r in raw {
                assert!(!floats.contains(&r), "payload carries the raw value {r}");
            }
        }
    }
}

#[test]
fn server_step_is_order_invariant() {
    let (cfg, input, prior) = small_experiment(4, 10, 1);
    let fcfg = fed_config(&cfg, 4);
    let fits: Vec<_> = input
        .train
        .iter()
        .map(|c| run_client(&prior, c, &fcfg, &[], None, None).unwrap())
        .collect();
    let forward: Vec<_> = fits.iter().map(|f| (f.payload(1).unwrap(), f as &dyn LocalElbo)).collect();
    let mut shuffled = forward.clone();
    shuffled.reverse();
    shuffled.swap(0, 2);
    let (a, la) = server_step(&prior, &forward, &fcfg, &mut Default::default(), 1).unwrap();
    let (b, lb) = server_step(&prior, &shuffled, &fcfg, &mut Default::default(), 1).unwrap();
    let all = [ParamGroup::Phi, ParamGroup::Theta, ParamGroup::Mixing, ParamGroup::Noise];
    let (ga, gb) = (a.gather(&all), b.gather(&all));
    assert!(max_abs_diff(&ga, &gb) <= 1e-12);
    assert_eq!(la.sampled, lb.sampled);
    assert_eq!(la.sampled, vec![0, 1, 2, 3]);
}

struct ConstantElbo;

impl LocalElbo for ConstantElbo {
    fn elbo(&self, _: &GlobalPrior) -> fedmogp::Result<ELBOBreakdown> {
        Ok(ELBOBreakdown::new(-1.0, -2.0, 0.5, 0.25))
    }
}

#[test]
fn zero_gradient_leaves_prior_unchanged() {
    let (cfg, input, mut prior) = small_experiment(1, 8, 1);
    prior.mode = AggregationMode::W;
    let mut fcfg = fed_config(&cfg, 1);
    fcfg.mode = AggregationMode::W;
    let fit = run_client(&prior, &input.train[0], &fcfg, &[], None, None).unwrap();
    let constant = ConstantElbo;
    let contributions = vec![(fit.payload(1).unwrap(), &constant as &dyn LocalElbo)];
    let (next, log) = server_step(&prior, &contributions, &fcfg, &mut Default::default(), 1).unwrap();
    assert_eq!(next, prior);
    assert!(log.change_norms.values().all(|v| *v == 0.0), "{:?}", log.change_norms);
}

#[test]
fn mode_a_noise_is_the_client_closed_form() {
    let mut rng = stream_rng(4, "fed_test", 0);
    let data = Arc::new(TaskData::new(vec![regression_task(&mut rng, 0, 7)]).unwrap());
    let prior = random_prior(&mut rng, 1, &[0]);
    let fcfg = FederationConfig { n_clients: 1, sample_size: 1, ..FederationConfig::default() };
    let fit = run_client(&prior, &ClientData { client_id: 0, data: Arc::clone(&data) }, &fcfg, &[], None, None).unwrap();
    let expect = optimal_sigma2(&Marginals::of(&fit.posterior), &data, 0).unwrap();
    let contributions = vec![(fit.payload(1).unwrap(), &fit as &dyn LocalElbo)];
    let (next, _) = server_step(&prior, &contributions, &fcfg, &mut Default::default(), 1).unwrap();
    assert!((next.noise.get(0).unwrap() - expect).abs() <= 1e-12 * expect);
}

#[test]
fn line_search_halves_an_overlong_step() {
    let (cfg, input, prior) = small_experiment(2, 10, 1);
    let mut fcfg = fed_config(&cfg, 2);
    fcfg.adam.learning_rate = 20.0;
    fcfg.mode = AggregationMode::W;
    let fits: Vec<_> = input
        .train
        .iter()
        .map(|c| run_client(&prior, c, &fcfg, &[], None, None).unwrap())
        .collect();
    let contributions: Vec<_> = fits.iter().map(|f| (f.payload(1).unwrap(), f as &dyn LocalElbo)).collect();
    let (_, log) = server_step(&prior, &contributions, &fcfg, &mut Default::default(), 1).unwrap();
    assert!(log.halvings > 0 || log.skipped.is_some(), "{log:?}");
    if let Some(after) = log.elbo_after {
        assert!(after >= log.elbo_before);
    }
    assert!(log.halvings <= fedmogp::federation::MAX_HALVINGS);
}

#[test]
fn run_is_deterministic_and_improves_on_round_one() {
    let (cfg, input, prior) = small_experiment(3, 15, 4);
    let fcfg = fed_config(&cfg, 3);
    let a = run_federation(&prior, &input, &fcfg, RunOptions::default()).unwrap();
    let b = run_federation(&prior, &input, &fcfg, RunOptions::default()).unwrap();
    assert_eq!(a.prior, b.prior);
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.final_elbo.to_bits(), b.final_elbo.to_bits());
    assert_eq!(a.logs.iter().map(|l| l.round).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    assert!(a.final_elbo >= a.logs[0].elbo_before, "{} < {}", a.final_elbo, a.logs[0].elbo_before);
}

#[test]
fn default_synthetic_run_ends_above_round_one() {
    let (cfg, input, prior) = small_experiment(5, 50, 20);
    let a = run_federation(&prior, &input, &fed_config(&cfg, 5), RunOptions::default()).unwrap();
    assert_eq!(a.logs.len(), 20);
    assert!(a.final_elbo >= a.logs[0].elbo_before);
}

#[test]
fn single_round_and_zero_rounds() {
    let (cfg, input, prior) = small_experiment(2, 6, 1);
    let mut fcfg = fed_config(&cfg, 2);
    let r = run_federation(&prior, &input, &fcfg, RunOptions::default()).unwrap();
    assert_eq!(r.logs.len(), 1);
    fcfg.rounds = 0;
    match run_federation(&prior, &input, &fcfg, RunOptions::default()) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "rounds"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (mut cfg, input, prior) = small_experiment(3, 12, 4);
    cfg.federation.aggregation_mode = AggregationMode::K;
    cfg.federation.sample_size = Some(2);
    let full_cfg = fed_config(&cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.cbor");
    let full = run_federation(&prior, &input, &full_cfg, RunOptions::default()).unwrap();

    let mut half = full_cfg.clone();
    half.rounds = 2;
    run_federation(&prior, &input, &half, RunOptions { checkpoint: Some(path.clone()), ..Default::default() })
        .unwrap();
    let cp = Checkpoint::read(&path).unwrap();
    assert_eq!(cp.rounds_completed, 2);
    let resumed = run_federation(
        &prior,
        &input,
        &full_cfg,
        RunOptions { checkpoint: Some(path.clone()), resume: Some(cp), observer: None },
    )
    .unwrap();
    assert_eq!(resumed.prior, full.prior);
    assert_eq!(resumed.logs, full.logs);
    assert_eq!(resumed.final_elbo.to_bits(), full.final_elbo.to_bits());
    assert_eq!(Checkpoint::read(&path).unwrap().rounds_completed, 4);
}

#[test]
fn personal_groups_follow_the_mode() {
    let (mut cfg, _, _) = small_experiment(2, 10, 3);
    cfg.model.feature_map = FeatureMapKind::Affine;
    let prepared = prepare_data(&cfg).unwrap();
    let input = federation_input(&prepared.datasets).unwrap();
    let prior = initial_prior(&cfg, &prepared.datasets).unwrap();
    for mode in [AggregationMode::N, AggregationMode::K] {
        let mut fcfg = fed_config(&cfg, 2);
        fcfg.mode = mode;
        let r = run_federation(&prior, &input, &fcfg, RunOptions::default()).unwrap();
        for fit in &r.train {
            assert_eq!(fit.personal_groups, mode.local_groups());
        }
        // the broadcast prior never moves what the mode keeps local
        for g in mode.local_groups() {
            assert_eq!(r.prior.gather(&[g]), prior.gather(&[g]), "{mode} moved {}", g.as_str());
        }
    }
}

#[test]
fn new_clients_fit_against_the_final_prior() {
    let (cfg, mut input, prior) = small_experiment(3, 10, 2);
    let moved = input.train.pop().unwrap();
    input.new.push(moved);
    let r = run_federation(&prior, &input, &fed_config(&cfg, 2), RunOptions::default()).unwrap();
    assert_eq!(r.new.len(), 1);
    assert_eq!(r.new[0].prior, r.prior);
    assert!(r.new[0].personal_groups.is_empty());
}
