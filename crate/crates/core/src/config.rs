//! Experiment configuration: a TOML document merged with command-line
//! overrides.
//!
//! Every section and key is optional; omitted values take the defaults
//! below. Unknown keys are rejected.
//!
//! ```toml
//! seed = 0
//! out = "out"
//!
//! [data]
//! source = "synthetic"      # or "manifest"
//! manifest = "data/manifest.toml"
//! test_fraction = 0.2       # synthetic data only; manifests carry their own splits
//! # k_shot = 10
//!
//! [synthetic]
//! n_clients = 5
//! n_points = 50
//! domain = [0.0, 100.0]
//! sigma2 = 0.1
//! mixing = [[0.6, 0.4], [0.4, 0.6]]
//! phi0 = [1.0, 2.0]
//! phi1 = [0.02, 0.01]
//! grid_points = 101
//! random_inputs = false
//!
//! [federation]
//! rounds = 20
//! local_iters = 2
//! mf_iters = 2
//! # sample_size = 5         # defaults to every training client
//! aggregation_mode = "A"    # N, K, W or A
//! inducing_m = 0            # 0 = dense inference
//! learning_rate = 0.01
//! line_search = true
//! warm_start = false
//! jitter = 1e-6
//!
//! [model]
//! kernel = "rbf"            # rbf, linear, laplace, cauchy
//! phi0 = [1.0, 2.0]
//! phi1 = [0.02, 0.01]
//! mixing = [[0.6, 0.4], [0.4, 0.6]]
//! sigma2 = 0.1
//! feature_map = "identity"  # or "affine"
//! # latent_dim = 1          # affine maps only; defaults to the input dimension
//! scope = "joint"           # or "taskblock"
//!
//! [metrics]
//! n_bins = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticConfig;
use crate::elbo::AdamConfig;
use crate::error::{Error, Result};
use crate::federation::FederationConfig;
use crate::kernels::{FeatureMapKind, KernelFamily};
use crate::linalg::DEFAULT_JITTER;
use crate::pg_inference::PredictionScope;
use crate::prior::AggregationMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Synthetic,
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub manifest: Option<PathBuf>,
    pub test_fraction: f64,
    pub k_shot: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            manifest: None,
            test_fraction: 0.2,
            k_shot: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub rounds: usize,
    pub local_iters: usize,
    pub mf_iters: usize,
    pub sample_size: Option<usize>,
    pub aggregation_mode: AggregationMode,
    pub inducing_m: usize,
    pub learning_rate: f64,
    pub line_search: bool,
    pub warm_start: bool,
    pub jitter: f64,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            rounds: 20,
            local_iters: 2,
            mf_iters: 2,
            sample_size: None,
            aggregation_mode: AggregationMode::A,
            inducing_m: 0,
            learning_rate: AdamConfig::default().learning_rate,
            line_search: true,
            warm_start: false,
            jitter: DEFAULT_JITTER,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub kernel: KernelFamily,
    pub phi0: Vec<f64>,
    pub phi1: Vec<f64>,
    pub mixing: Vec<Vec<f64>>,
    pub sigma2: f64,
    pub feature_map: FeatureMapKind,
    pub latent_dim: Option<usize>,
    pub scope: PredictionScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let syn = SyntheticConfig::default();
        Self {
            kernel: KernelFamily::Rbf,
            phi0: syn.phi0,
            phi1: syn.phi1,
            mixing: syn.mixing,
            sigma2: syn.sigma2,
            feature_map: FeatureMapKind::Identity,
            latent_dim: None,
            scope: PredictionScope::Joint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub n_bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { n_bins: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub federation: FederationSection,
    pub model: ModelConfig,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            federation: FederationSection::default(),
            model: ModelConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub rounds: Option<usize>,
    pub clients: Option<usize>,
    pub points: Option<usize>,
    pub sample_size: Option<usize>,
    pub mf_iters: Option<usize>,
    pub local_iters: Option<usize>,
    pub aggregation_mode: Option<AggregationMode>,
    pub inducing_m: Option<usize>,
    pub kernel: Option<KernelFamily>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

/// Key named in a TOML deserialization error, if it can be recovered.
fn offending_key(message: &str) -> String {
    for marker in ["unknown field `", "missing field `"] {
        if let Some(rest) = message.split(marker).nth(1) {
            if let Some(key) = rest.split('`').next() {
                return key.to_string();
            }
        }
    }
    String::from("<document>")
}

impl ExperimentConfig {
    /// Parses and validates a configuration document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = Self::parse_unvalidated(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse_unvalidated(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let mut key = offending_key(&msg);
            if key == "<document>" {
                if let Some(span) = e.span() {
                    let before = &text[..span.start.min(text.len())];
                    let line = before.rsplit('\n').next().unwrap_or("");
                    let k = line.split('=').next().unwrap_or("").trim();
                    if !k.is_empty() && !k.starts_with('[') {
                        key = k.to_string();
                    }
                }
            }
            Error::config(key, msg)
        })
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.rounds {
            self.federation.rounds = v;
        }
        if let Some(v) = o.clients {
            self.synthetic.n_clients = v;
        }
        if let Some(v) = o.points {
            self.synthetic.n_points = v;
        }
        if let Some(v) = o.sample_size {
            self.federation.sample_size = Some(v);
        }
        if let Some(v) = o.mf_iters {
            self.federation.mf_iters = v;
        }
        if let Some(v) = o.local_iters {
            self.federation.local_iters = v;
        }
        if let Some(v) = o.aggregation_mode {
            self.federation.aggregation_mode = v;
        }
        if let Some(v) = o.inducing_m {
            self.federation.inducing_m = v;
        }
        if let Some(v) = o.kernel {
            self.model.kernel = v;
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = &o.data {
            self.data.source = DataSource::Manifest;
            self.data.manifest = Some(v.clone());
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(key, msg)) };
        check(f.rounds >= 1, "rounds", "must be at least 1")?;
        check(f.local_iters >= 1, "local_iters", "must be at least 1")?;
        check(f.mf_iters >= 1, "mf_iters", "must be at least 1")?;
        check(f.sample_size != Some(0), "sample_size", "must be at least 1")?;
        check(f.learning_rate > 0.0 && f.learning_rate.is_finite(), "learning_rate", "must be positive")?;
        check(f.jitter > 0.0 && f.jitter.is_finite(), "jitter", "must be positive")?;
        let d = &self.data;
        check((0.0..1.0).contains(&d.test_fraction), "test_fraction", "must lie in [0, 1)")?;
        check(
            d.source != DataSource::Manifest || d.manifest.is_some(),
            "manifest",
            "required when data.source = \"manifest\"",
        )?;
        if d.source == DataSource::Synthetic {
            self.synthetic.validate()?;
        }
        let m = &self.model;
        check(!m.phi0.is_empty(), "phi0", "needs at least one basis")?;
        check(m.phi1.len() == m.phi0.len(), "phi1", "needs one entry per basis")?;
        check(
            m.phi0.iter().chain(&m.phi1).all(|v| *v > 0.0 && v.is_finite()),
            "phi0",
            "kernel parameters must be positive",
        )?;
        check(
            !m.mixing.is_empty() && m.mixing.iter().all(|r| r.len() == m.phi0.len()),
            "mixing",
            "needs one row per task and one column per basis",
        )?;
        check(m.mixing.iter().flatten().all(|v| v.is_finite()), "mixing", "must be finite")?;
        check(m.sigma2 > 0.0 && m.sigma2.is_finite(), "sigma2", "must be positive")?;
        check(m.latent_dim != Some(0), "latent_dim", "must be at least 1")?;
        check(
            m.latent_dim.is_none() || m.feature_map == FeatureMapKind::Affine,
            "latent_dim",
            "only applies to affine feature maps",
        )?;
        check(self.metrics.n_bins >= 1, "n_bins", "must be at least 1")?;
        Ok(())
    }

    /// Federation settings for `n_train` training clients.
    pub fn federation_config(&self, n_train: usize) -> FederationConfig {
        let f = &self.federation;
        FederationConfig {
            rounds: f.rounds,
            local_iters: f.local_iters,
            n_clients: n_train,
            sample_size: f.sample_size.unwrap_or(n_train),
            mf_iters: f.mf_iters,
            mode: f.aggregation_mode,
            inducing_m: f.inducing_m,
            seed: self.seed,
            adam: AdamConfig {
                learning_rate: f.learning_rate,
                ..AdamConfig::default()
            },
            line_search: f.line_search,
            warm_start: f.warm_start,
            base_jitter: f.jitter,
        }
    }
}

/// Reads `path` (if any), applies `overrides` and validates the result.
/// Validation runs after the overrides, so a flag can repair a file value.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::from(e).context(format!("reading {}", p.display())))?;
            ExperimentConfig::parse_unvalidated(&text).map_err(|e| e.context(p.display().to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.apply(overrides);
    cfg.validate()?;
    Ok(cfg)
}
