//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use fedmogp::kernels::{BasisKernel, FeatureMap, KernelSpec};
use fedmogp::mogp::{MixingWeights, TaskData, TaskKind, TaskObservations};
use fedmogp::prior::{AggregationMode, GlobalPrior, NoiseVariances};
use rand::Rng;

pub fn rbf_prior(bases: &[(f64, f64)], mixing: &[Vec<f64>], noise: &[(usize, f64)]) -> GlobalPrior {
    GlobalPrior::new(
        bases
            .iter()
            .map(|&(a, b)| BasisKernel::new(KernelSpec::rbf(a, b).unwrap(), FeatureMap::identity(1)))
            .collect(),
        MixingWeights::from_rows(mixing).unwrap(),
        NoiseVariances::new(noise.iter().copied()).unwrap(),
        AggregationMode::A,
    )
    .unwrap()
}

/// Two RBF bases, `n_tasks` mixing rows, noise on `reg_tasks`.
pub fn random_prior<R: Rng>(rng: &mut R, n_tasks: usize, reg_tasks: &[usize]) -> GlobalPrior {
    let bases: Vec<(f64, f64)> = (0..2)
        .map(|_| (rng.random_range(0.5..2.0), rng.random_range(0.2..2.0)))
        .collect();
    let mixing: Vec<Vec<f64>> = (0..n_tasks)
        .map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let noise: Vec<(usize, f64)> = reg_tasks.iter().map(|&t| (t, rng.random_range(0.05..0.5))).collect();
    rbf_prior(&bases, &mixing, &noise)
}

pub fn random_inputs<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| vec![rng.random_range(-3.0..3.0)]).collect()
}

/// Regression task on `n` random inputs.
pub fn regression_task<R: Rng>(rng: &mut R, task_id: usize, n: usize) -> TaskObservations {
    let x = random_inputs(rng, n);
    regression_task_at(rng, task_id, x)
}

pub fn regression_task_at<R: Rng>(rng: &mut R, task_id: usize, x: Vec<Vec<f64>>) -> TaskObservations {
    let y = x.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
    TaskObservations {
        task_id,
        kind: TaskKind::Regression,
        x,
        y,
    }
}

pub fn classification_task<R: Rng>(rng: &mut R, task_id: usize, n: usize) -> TaskObservations {
    let x = random_inputs(rng, n);
    classification_task_at(rng, task_id, x)
}

pub fn classification_task_at<R: Rng>(rng: &mut R, task_id: usize, x: Vec<Vec<f64>>) -> TaskObservations {
    let y = x.iter().map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    TaskObservations {
        task_id,
        kind: TaskKind::Classification,
        x,
        y,
    }
}

/// Regression task 0 and classification task 1 on the same `n` inputs.
pub fn mixed_data<R: Rng>(rng: &mut R, n: usize) -> TaskData {
    let x = random_inputs(rng, n);
    TaskData::new(vec![regression_task_at(rng, 0, x.clone()), classification_task_at(rng, 1, x)]).unwrap()
}

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
