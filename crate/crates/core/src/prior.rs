//! The server-held hyperparameter bundle and its flat parameter view.
//!
//! Positive hyperparameters (kernel `phi`, noise variances) are exposed to
//! optimizers in log space; feature-map parameters and mixing weights are
//! exposed raw.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::BasisKernel;
use crate::linalg::{factorize, Factorized};
use crate::mogp::{assemble_k, MixingWeights, TaskLayout};

/// Which hyperparameters the server aggregates. Everything else is
/// personalized on each client.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggregationMode {
    /// Feature-map parameters only.
    N,
    /// Feature map and kernel parameters.
    K,
    /// Feature map, kernel parameters and mixing weights.
    W,
    /// Everything, with noise variances set in closed form.
    A,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 4] = [
        AggregationMode::N,
        AggregationMode::K,
        AggregationMode::W,
        AggregationMode::A,
    ];

    /// Groups the server moves by gradient ascent.
    pub fn server_groups(self) -> Vec<ParamGroup> {
        use ParamGroup::*;
        match self {
            AggregationMode::N => vec![Theta],
            AggregationMode::K => vec![Phi, Theta],
            AggregationMode::W | AggregationMode::A => vec![Phi, Theta, Mixing],
        }
    }

    /// Groups each client keeps and optimizes against its own ELBO.
    pub fn local_groups(self) -> Vec<ParamGroup> {
        use ParamGroup::*;
        match self {
            AggregationMode::N => vec![Phi, Mixing, Noise],
            AggregationMode::K => vec![Mixing, Noise],
            AggregationMode::W => vec![Noise],
            AggregationMode::A => vec![],
        }
    }

    pub fn aggregates_noise(self) -> bool {
        self == AggregationMode::A
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AggregationMode::N => "N",
            AggregationMode::K => "K",
            AggregationMode::W => "W",
            AggregationMode::A => "A",
        }
    }
}

impl fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "N" => Ok(AggregationMode::N),
            "K" => Ok(AggregationMode::K),
            "W" => Ok(AggregationMode::W),
            "A" => Ok(AggregationMode::A),
            other => Err(Error::input(format!(
                "unknown aggregation mode `{other}` (allowed: N, K, W, A)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Phi,
    Theta,
    Mixing,
    Noise,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Phi => "phi",
            ParamGroup::Theta => "theta",
            ParamGroup::Mixing => "mixing",
            ParamGroup::Noise => "noise",
        }
    }
}

/// Regression noise variance per task id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseVariances(BTreeMap<usize, f64>);

impl NoiseVariances {
    pub fn new(entries: impl IntoIterator<Item = (usize, f64)>) -> Result<Self> {
        let map: BTreeMap<usize, f64> = entries.into_iter().collect();
        for (t, v) in &map {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::input(format!(
                    "noise variance for task {t} must be positive, got {v}"
                )));
            }
        }
        Ok(Self(map))
    }

    pub fn get(&self, task: usize) -> Result<f64> {
        self.0
            .get(&task)
            .copied()
            .ok_or_else(|| Error::input(format!("no noise variance for regression task {task}")))
    }

    pub fn set(&mut self, task: usize, value: f64) -> Result<()> {
        if !(value > 0.0 && value.is_finite()) {
            return Err(Error::input(format!("noise variance must be positive, got {value}")));
        }
        self.0.insert(task, value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.0.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Hyperparameters of the multi-output prior: basis kernels with their
/// feature maps, mixing weights and regression noise variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalPrior {
    pub bases: Vec<BasisKernel>,
    pub mixing: MixingWeights,
    pub noise: NoiseVariances,
    pub mode: AggregationMode,
}

impl GlobalPrior {
    pub fn new(
        bases: Vec<BasisKernel>,
        mixing: MixingWeights,
        noise: NoiseVariances,
        mode: AggregationMode,
    ) -> Result<Self> {
        if bases.len() != mixing.bases() {
            return Err(Error::input(format!(
                "{} basis kernels but the mixing matrix has {} columns",
                bases.len(),
                mixing.bases()
            )));
        }
        if let Some(t) = noise.iter().map(|(t, _)| t).find(|t| *t >= mixing.tasks()) {
            return Err(Error::input(format!(
                "noise variance given for task {t} but the mixing matrix has {} rows",
                mixing.tasks()
            )));
        }
        Ok(Self {
            bases,
            mixing,
            noise,
            mode,
        })
    }

    /// Prior covariance over a layout, factorized with escalating jitter.
    pub fn covariance(&self, layout: &TaskLayout, base_jitter: f64) -> Result<Factorized> {
        let k = assemble_k(layout, &self.mixing, &self.bases)?;
        factorize(&k.entries, base_jitter, "prior covariance K")
    }

    fn sorted(groups: &[ParamGroup]) -> Vec<ParamGroup> {
        let mut g = groups.to_vec();
        g.sort();
        g.dedup();
        g
    }

    /// Flat parameter vector for `groups`, in canonical group order.
    pub fn gather(&self, groups: &[ParamGroup]) -> Vec<f64> {
        let mut out = Vec::new();
        for g in Self::sorted(groups) {
            match g {
                ParamGroup::Phi => {
                    for b in &self.bases {
                        out.push(b.spec.phi0().ln());
                        out.push(b.spec.phi1().ln());
                    }
                }
                ParamGroup::Theta => {
                    for b in &self.bases {
                        out.extend_from_slice(&b.map.params);
                    }
                }
                ParamGroup::Mixing => {
                    let w = self.mixing.matrix();
                    for i in 0..w.nrows() {
                        for j in 0..w.ncols() {
                            out.push(w[(i, j)]);
                        }
                    }
                }
                ParamGroup::Noise => out.extend(self.noise.iter().map(|(_, v)| v.ln())),
            }
        }
        out
    }

    pub fn param_names(&self, groups: &[ParamGroup]) -> Vec<String> {
        let mut out = Vec::new();
        for g in Self::sorted(groups) {
            match g {
                ParamGroup::Phi => {
                    for b in 0..self.bases.len() {
                        out.push(format!("log_phi0[{b}]"));
                        out.push(format!("log_phi1[{b}]"));
                    }
                }
                ParamGroup::Theta => {
                    for (b, k) in self.bases.iter().enumerate() {
                        out.extend((0..k.map.params.len()).map(|p| format!("theta[{b}][{p}]")));
                    }
                }
                ParamGroup::Mixing => {
                    let w = self.mixing.matrix();
                    for i in 0..w.nrows() {
                        out.extend((0..w.ncols()).map(|j| format!("w[{i}][{j}]")));
                    }
                }
                ParamGroup::Noise => {
                    out.extend(self.noise.iter().map(|(t, _)| format!("log_sigma2[{t}]")));
                }
            }
        }
        out
    }

    /// Writes a flat vector produced by [`gather`](Self::gather) back.
    /// Coordinates whose value is bitwise unchanged are left untouched, so a
    /// zero step never perturbs a parameter through a log/exp round trip.
    pub fn scatter(&mut self, groups: &[ParamGroup], values: &[f64]) -> Result<()> {
        let current = self.gather(groups);
        if current.len() != values.len() {
            return Err(Error::input(format!(
                "expected {} parameters, got {}",
                current.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("non-finite parameter value"));
        }
        let changed = |i: usize| current[i].to_bits() != values[i].to_bits();
        let mut i = 0;
        for g in Self::sorted(groups) {
            match g {
                ParamGroup::Phi => {
                    for b in &mut self.bases {
                        if changed(i) {
                            b.spec.set_phi0(values[i].exp());
                        }
                        if changed(i + 1) {
                            b.spec.set_phi1(values[i + 1].exp());
                        }
                        i += 2;
                    }
                }
                ParamGroup::Theta => {
                    for b in &mut self.bases {
                        for p in b.map.params.iter_mut() {
                            if changed(i) {
                                *p = values[i];
                            }
                            i += 1;
                        }
                    }
                }
                ParamGroup::Mixing => {
                    let w = self.mixing.matrix_mut();
                    for r in 0..w.nrows() {
                        for c in 0..w.ncols() {
                            if changed(i) {
                                w[(r, c)] = values[i];
                            }
                            i += 1;
                        }
                    }
                }
                ParamGroup::Noise => {
                    let tasks: Vec<usize> = self.noise.iter().map(|(t, _)| t).collect();
                    for t in tasks {
                        if changed(i) {
                            self.noise.set(t, values[i].exp())?;
                        }
                        i += 1;
                    }
                }
            }
        }
        for b in &self.bases {
            if !(b.spec.phi0() > 0.0 && b.spec.phi0().is_finite())
                || !(b.spec.phi1() > 0.0 && b.spec.phi1().is_finite())
            {
                return Err(Error::numeric("kernel hyperparameter left the positive range"));
            }
        }
        Ok(())
    }

    /// Copy of `self` with `groups` taken from `other`.
    pub fn overlay(&self, other: &GlobalPrior, groups: &[ParamGroup]) -> Result<GlobalPrior> {
        let mut out = self.clone();
        out.scatter(groups, &other.gather(groups))?;
        Ok(out)
    }
}
