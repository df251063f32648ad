//! Base kernel families, the feature-map hook and Gram matrix assembly.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::GramMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Linear,
    Laplace,
    Cauchy,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 4] = [
        KernelFamily::Rbf,
        KernelFamily::Linear,
        KernelFamily::Laplace,
        KernelFamily::Cauchy,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelFamily::Rbf => "rbf",
            KernelFamily::Linear => "linear",
            KernelFamily::Laplace => "laplace",
            KernelFamily::Cauchy => "cauchy",
        }
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rbf" => Ok(KernelFamily::Rbf),
            "linear" => Ok(KernelFamily::Linear),
            "laplace" => Ok(KernelFamily::Laplace),
            "cauchy" => Ok(KernelFamily::Cauchy),
            other => Err(Error::input(format!(
                "unknown kernel family `{other}` (expected one of rbf, linear, laplace, cauchy)"
            ))),
        }
    }
}

/// A base kernel with output scale `phi0` and inverse length-scale `phi1`.
///
/// * rbf: `phi0 * exp(-phi1/2 * |d|_2^2)`
/// * laplace: `phi0 * exp(-phi1/2 * |d|_1)`
/// * cauchy: `1 / (phi1 * |d|_2^2 + 1)` (no output scale; `phi0` is unused)
/// * linear: inner product of the unit-normalized inputs (both unused)
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    phi0: f64,
    phi1: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, phi0: f64, phi1: f64) -> Result<Self> {
        for (name, v) in [("phi0", phi0), ("phi1", phi1)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::input(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(Self { family, phi0, phi1 })
    }

    pub fn rbf(phi0: f64, phi1: f64) -> Result<Self> {
        Self::new(KernelFamily::Rbf, phi0, phi1)
    }

    pub fn phi0(&self) -> f64 {
        self.phi0
    }

    pub fn phi1(&self) -> f64 {
        self.phi1
    }

    pub(crate) fn set_phi0(&mut self, v: f64) {
        debug_assert!(v > 0.0);
        self.phi0 = v;
    }

    pub(crate) fn set_phi1(&mut self, v: f64) {
        debug_assert!(v > 0.0);
        self.phi1 = v;
    }

    /// Evaluates the base kernel on already-mapped vectors of equal length.
    pub fn base(&self, u: &[f64], v: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Rbf => self.phi0 * (-0.5 * self.phi1 * sq_dist(u, v)).exp(),
            KernelFamily::Laplace => self.phi0 * (-0.5 * self.phi1 * l1_dist(u, v)).exp(),
            KernelFamily::Cauchy => 1.0 / (self.phi1 * sq_dist(u, v) + 1.0),
            KernelFamily::Linear => {
                let (nu, nv) = (norm(u), norm(v));
                if nu == 0.0 || nv == 0.0 {
                    return 0.0;
                }
                u.iter().zip(v).map(|(a, b)| (a / nu) * (b / nv)).sum()
            }
        }
    }
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn l1_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum()
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMapKind {
    Identity,
    Affine,
}

/// Input transformation composed with a base kernel.
///
/// The affine map stores `latent_dim x input_dim` weights row-major followed
/// by `latent_dim` biases in `params`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub kind: FeatureMapKind,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub params: Vec<f64>,
}

impl FeatureMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            kind: FeatureMapKind::Identity,
            input_dim: dim,
            latent_dim: dim,
            params: Vec::new(),
        }
    }

    /// Affine map initialised to the (rectangular) identity with zero bias.
    pub fn affine(input_dim: usize, latent_dim: usize) -> Result<Self> {
        if input_dim == 0 || latent_dim == 0 {
            return Err(Error::input("affine feature map needs positive dimensions"));
        }
        let mut params = vec![0.0; latent_dim * input_dim + latent_dim];
        for i in 0..latent_dim.min(input_dim) {
            params[i * input_dim + i] = 1.0;
        }
        Ok(Self {
            kind: FeatureMapKind::Affine,
            input_dim,
            latent_dim,
            params,
        })
    }

    pub fn with_params(mut self, params: Vec<f64>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::input(format!(
                "feature map expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(self)
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::input(format!(
                "input has dimension {}, feature map expects {}",
                x.len(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite kernel input"));
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(match self.kind {
            FeatureMapKind::Identity => x.to_vec(),
            FeatureMapKind::Affine => {
                let d = self.input_dim;
                let bias = &self.params[self.latent_dim * d..];
                (0..self.latent_dim)
                    .map(|r| {
                        let row = &self.params[r * d..(r + 1) * d];
                        row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + bias[r]
                    })
                    .collect()
            }
        })
    }
}

/// One basis function of the coregionalization model: base kernel plus
/// its feature map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasisKernel {
    pub spec: KernelSpec,
    pub map: FeatureMap,
}

impl BasisKernel {
    pub fn new(spec: KernelSpec, map: FeatureMap) -> Self {
        Self { spec, map }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        eval_kernel(&self.spec, &self.map, x, y)
    }

    pub fn map_all(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.map.apply(x)).collect()
    }
}

/// `k_phi(eta(x), eta(x'))`.
pub fn eval_kernel(spec: &KernelSpec, map: &FeatureMap, x: &[f64], y: &[f64]) -> Result<f64> {
    let u = map.apply(x)?;
    let v = map.apply(y)?;
    let k = spec.base(&u, &v);
    if !k.is_finite() {
        return Err(Error::numeric("kernel evaluated to a non-finite value"));
    }
    Ok(k)
}

/// Gram matrix of `xs` under one kernel. Symmetric by construction.
pub fn gram(spec: &KernelSpec, map: &FeatureMap, xs: &[Vec<f64>]) -> Result<GramMatrix> {
    if xs.is_empty() {
        return Err(Error::input("gram matrix needs at least one point"));
    }
    let mapped: Vec<Vec<f64>> = xs.iter().map(|x| map.apply(x)).collect::<Result<_>>()?;
    let n = mapped.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let k = spec.base(&mapped[i], &mapped[j]);
            g[(i, j)] = k;
            g[(j, i)] = k;
        }
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("gram matrix has non-finite entries"));
    }
    Ok(GramMatrix::new(g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::stabilized_cholesky;
    use proptest::prelude::*;

    fn id1() -> FeatureMap {
        FeatureMap::identity(1)
    }

    #[test]
    fn rbf_zero_distance_is_phi0() {
        let s = KernelSpec::rbf(2.0, 0.3).unwrap();
        assert_eq!(eval_kernel(&s, &id1(), &[3.0], &[3.0]).unwrap(), 2.0);
    }

    #[test]
    fn rbf_unit_exponent() {
        let s = KernelSpec::rbf(1.0, 0.02).unwrap();
        let k = eval_kernel(&s, &id1(), &[0.0], &[10.0]).unwrap();
        assert!((k - 0.367_879_441_171_442_3).abs() < 1e-12, "{k}");
    }

    #[test]
    fn linear_self_similarity_is_one() {
        let s = KernelSpec::new(KernelFamily::Linear, 1.0, 1.0).unwrap();
        let m = FeatureMap::identity(3);
        let k = eval_kernel(&s, &m, &[1.0, -2.0, 7.5], &[1.0, -2.0, 7.5]).unwrap();
        assert!((k - 1.0).abs() < 1e-15);
    }

    #[test]
    fn laplace_and_cauchy_formulas() {
        let lap = KernelSpec::new(KernelFamily::Laplace, 1.5, 0.4).unwrap();
        let m = FeatureMap::identity(2);
        let k = eval_kernel(&lap, &m, &[0.0, 1.0], &[2.0, -1.0]).unwrap();
        assert!((k - 1.5 * (-0.2f64 * 4.0).exp()).abs() < 1e-15);
        let cau = KernelSpec::new(KernelFamily::Cauchy, 3.0, 0.5).unwrap();
        let k = eval_kernel(&cau, &m, &[0.0, 1.0], &[2.0, -1.0]).unwrap();
        assert!((k - 1.0 / (0.5 * 8.0 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        let s = KernelSpec::rbf(1.0, 1.0).unwrap();
        assert!(matches!(eval_kernel(&s, &id1(), &[1.0, 2.0], &[1.0]), Err(Error::Input(_))));
        assert!(matches!(eval_kernel(&s, &id1(), &[f64::NAN], &[1.0]), Err(Error::Numeric(_))));
        assert!(KernelSpec::rbf(0.0, 1.0).is_err());
        assert!(KernelSpec::rbf(1.0, -1.0).is_err());
        assert!(gram(&s, &id1(), &[]).is_err());
    }

    #[test]
    fn gram_examples() {
        let s = KernelSpec::rbf(1.0, 0.02).unwrap();
        let g = gram(&s, &id1(), &[vec![0.5]]).unwrap();
        assert_eq!(g.entries, DMatrix::from_element(1, 1, 1.0));
        let g = gram(&s, &id1(), &[vec![4.0], vec![4.0]]).unwrap();
        assert_eq!(g.entries, DMatrix::from_element(2, 2, 1.0));
        let g = gram(&s, &id1(), &[vec![0.0], vec![10.0]]).unwrap();
        let e = (-1.0f64).exp();
        assert!((g.entries[(0, 1)] - e).abs() < 1e-15 && g.entries[(0, 1)] == g.entries[(1, 0)]);

        let f = stabilized_cholesky(&g, 1e-6, "g").unwrap();
        let l = f.l();
        assert_eq!(l[(0, 1)], 0.0);
        let rec = &l * l.transpose();
        for i in 0..2 {
            for j in 0..2 {
                let jit = if i == j { f.jitter() } else { 0.0 };
                assert!((rec[(i, j)] - g.entries[(i, j)] - jit).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn affine_map() {
        let m = FeatureMap::affine(2, 1)
            .unwrap()
            .with_params(vec![2.0, -1.0, 0.5])
            .unwrap();
        assert_eq!(m.apply(&[1.0, 3.0]).unwrap(), vec![2.0 - 3.0 + 0.5]);
        let id = FeatureMap::affine(2, 2).unwrap();
        assert_eq!(id.apply(&[1.0, 3.0]).unwrap(), vec![1.0, 3.0]);
        assert!(FeatureMap::affine(2, 1).unwrap().with_params(vec![1.0]).is_err());
    }

    fn family() -> impl Strategy<Value = KernelFamily> {
        prop_oneof![
            Just(KernelFamily::Rbf),
            Just(KernelFamily::Linear),
            Just(KernelFamily::Laplace),
            Just(KernelFamily::Cauchy)
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn symmetric_exactly(fam in family(), phi0 in 0.1f64..5.0, phi1 in 0.01f64..3.0,
                             x in prop::collection::vec(-10.0f64..10.0, 3),
                             y in prop::collection::vec(-10.0f64..10.0, 3)) {
            let s = KernelSpec::new(fam, phi0, phi1).unwrap();
            let m = FeatureMap::affine(3, 2).unwrap().with_params(vec![0.3, -1.2, 0.7, 1.1, 0.2, -0.4, 0.05, -0.3]).unwrap();
            prop_assert_eq!(eval_kernel(&s, &m, &x, &y).unwrap(), eval_kernel(&s, &m, &y, &x).unwrap());
            let id = FeatureMap::identity(3);
            prop_assert_eq!(eval_kernel(&s, &id, &x, &y).unwrap(), eval_kernel(&s, &id, &y, &x).unwrap());
        }

        #[test]
        fn identity_map_is_raw_formula(phi0 in 0.1f64..5.0, phi1 in 0.01f64..3.0,
                                       x in prop::collection::vec(-10.0f64..10.0, 2),
                                       y in prop::collection::vec(-10.0f64..10.0, 2)) {
            let s = KernelSpec::rbf(phi0, phi1).unwrap();
            let d2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2);
            let raw = phi0 * (-phi1 / 2.0 * d2).exp();
            let k = eval_kernel(&s, &FeatureMap::identity(2), &x, &y).unwrap();
            prop_assert!((k - raw).abs() <= 4.0 * f64::EPSILON * raw.max(1e-300));
        }

        #[test]
        fn gram_psd_after_jitter(fam in family(), seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let xs: Vec<Vec<f64>> = (0..8).map(|_| vec![rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect();
            let s = KernelSpec::new(fam, 1.3, 0.7).unwrap();
            let g = gram(&s, &FeatureMap::identity(2), &xs).unwrap();
            let f = stabilized_cholesky(&g, 1e-6, "g").unwrap();
            let rec = f.l() * f.l().transpose();
            let rel = (&rec - f.matrix()).norm() / f.matrix().norm();
            prop_assert!(rel < 1e-8, "relative error {}", rel);
        }
    }
}
