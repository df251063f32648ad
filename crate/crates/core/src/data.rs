//! Synthetic multi-task data, CSV/manifest ingestion and train/test splits.
//!
//! # File formats
//!
//! A task CSV is UTF-8 with a header `x0,...,x{D-1},y` and one sample per
//! row. Classification labels are `-1`/`+1`; files using `0`/`1` are
//! accepted and remapped.
//!
//! A manifest is TOML:
//!
//! ```toml
//! version = 1
//!
//! [[clients]]
//! id = 0
//! role = "train"            # or "new"
//!
//! [[clients.tasks]]
//! id = 0
//! kind = "regression"       # or "classification"
//! path = "client0_task0.csv" # relative to the manifest
//! split = { test_fraction = 0.2, seed = 7 }
//! ```
//!
//! `split` is optional (all rows train) and takes exactly one of
//! `test_fraction` (with optional `seed`), `k_shot` (with optional `seed`),
//! or `test_rows` (explicit zero-based row indices).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{BasisKernel, FeatureMap, KernelSpec};
use crate::linalg::DEFAULT_JITTER;
use crate::mogp::{sample_mogp, MixingWeights, TaskData, TaskKind, TaskLayout, TaskObservations};
use crate::rng::{derive_seed, stream_rng};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientRole {
    #[default]
    Train,
    New,
}

/// One task of one client, with its split.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTable {
    pub task_id: usize,
    pub kind: TaskKind,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl TaskTable {
    /// All rows train.
    pub fn new(task_id: usize, kind: TaskKind, x: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::input(format!("task {task_id}: {} inputs but {} targets", x.len(), y.len())));
        }
        let n = x.len();
        Ok(Self {
            task_id,
            kind,
            x,
            y,
            train: (0..n).collect(),
            test: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn with_split(mut self, rule: &SplitRule) -> Result<Self> {
        let (train, test) = split_indices(self.len(), rule)
            .map_err(|e| e.context(format!("task {}", self.task_id)))?;
        self.train = train;
        self.test = test;
        Ok(self)
    }

    fn rows(&self, idx: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>) {
        idx.iter().map(|&i| (self.x[i].clone(), self.y[i])).unzip()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub role: ClientRole,
    pub tasks: Vec<TaskTable>,
}

impl ClientDataset {
    fn observations(&self, test: bool) -> Vec<TaskObservations> {
        self.tasks
            .iter()
            .map(|t| {
                let (x, y) = t.rows(if test { &t.test } else { &t.train });
                TaskObservations {
                    task_id: t.task_id,
                    kind: t.kind,
                    x,
                    y,
                }
            })
            .collect()
    }

    /// Training rows of every task, stacked.
    pub fn train_data(&self) -> Result<TaskData> {
        TaskData::new(self.observations(false)).map_err(|e| e.context(format!("client {}", self.client_id)))
    }

    /// Held-out rows of every task, stacked.
    pub fn test_data(&self) -> Result<TaskData> {
        TaskData::new(self.observations(true)).map_err(|e| e.context(format!("client {}", self.client_id)))
    }

    pub fn split(mut self, rule: &SplitRule) -> Result<Self> {
        self.tasks = self
            .tasks
            .into_iter()
            .map(|t| t.with_split(rule))
            .collect::<Result<_>>()
            .map_err(|e| e.context(format!("client {}", self.client_id)))?;
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.tasks.iter().flat_map(|t| t.x.first()).map(Vec::len).next().unwrap_or(0)
    }
}

/// How a task's rows are divided between training and evaluation.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitRule {
    /// `floor(fraction · N)` rows drawn uniformly for test.
    Fraction { test_fraction: f64, seed: u64 },
    /// Exactly `k` rows drawn uniformly for training, the rest test.
    KShot { k: usize, seed: u64 },
    /// Explicit test rows.
    TestRows(Vec<usize>),
}

/// `(train, test)` indices, each ascending. Tasks of equal length get the
/// same split for the same rule, so tasks sharing inputs stay aligned.
pub fn split_indices(n: usize, rule: &SplitRule) -> Result<(Vec<usize>, Vec<usize>)> {
    let permuted = |seed: u64| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(seed, "split", n as u64));
        idx
    };
    let test: BTreeSet<usize> = match rule {
        SplitRule::Fraction { test_fraction, seed } => {
            if !(0.0..1.0).contains(test_fraction) {
                return Err(Error::input(format!("test fraction must lie in [0, 1), got {test_fraction}")));
            }
            let n_test = (test_fraction * n as f64).floor() as usize;
            permuted(*seed).into_iter().take(n_test).collect()
        }
        SplitRule::KShot { k, seed } => {
            if *k > n {
                return Err(Error::input(format!("k-shot k = {k} exceeds the {n} available rows")));
            }
            permuted(*seed).into_iter().skip(*k).collect()
        }
        SplitRule::TestRows(rows) => {
            let set: BTreeSet<usize> = rows.iter().copied().collect();
            if set.len() != rows.len() {
                return Err(Error::input("duplicate test row"));
            }
            if let Some(&r) = set.iter().find(|&&r| r >= n) {
                return Err(Error::input(format!("test row {r} out of range for {n} rows")));
            }
            set
        }
    };
    let train = (0..n).filter(|i| !test.contains(i)).collect();
    Ok((train, test.into_iter().collect()))
}

/// Maps labels onto `±1`. `{-1, +1}` passes through; `{0, 1}` is remapped
/// (returning `true`). Anything else, including a mix of `-1` and `0`, is
/// rejected.
pub fn canonicalize_labels(y: &mut [f64]) -> Result<bool> {
    if let Some(v) = y.iter().find(|&&v| v != -1.0 && v != 0.0 && v != 1.0) {
        return Err(Error::input(format!("label {v} is not one of -1, 0, +1")));
    }
    let has_zero = y.iter().any(|&v| v == 0.0);
    let has_neg = y.iter().any(|&v| v == -1.0);
    match (has_zero, has_neg) {
        (true, true) => Err(Error::input("labels mix -1 and 0")),
        (true, false) => {
            for v in y.iter_mut() {
                *v = if *v == 0.0 { -1.0 } else { 1.0 };
            }
            Ok(true)
        }
        _ => Ok(false),
    }
}

/// Parsed task table: inputs, targets and whether labels were remapped.
pub type ParsedCsv = (Vec<Vec<f64>>, Vec<f64>, bool);

/// Parses task CSV text. `source` only labels errors.
pub fn parse_task_csv(text: &str, source: &Path, kind: TaskKind) -> Result<ParsedCsv> {
    let perr = |line: u64, message: String| Error::Parse {
        path: source.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 2 {
        return Err(perr(1, "header needs at least one input column and `y`".into()));
    }
    let d = cols.len() - 1;
    for (j, c) in cols[..d].iter().enumerate() {
        if *c != format!("x{j}") {
            return Err(perr(1, format!("column {} should be `x{j}`, found `{c}`", j + 1)));
        }
    }
    if cols[d] != "y" {
        return Err(perr(1, format!("last column should be `y`, found `{}`", cols[d])));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            perr(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|_| perr(line, format!("`{f}` is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != d + 1 {
            return Err(perr(line, format!("expected {} fields, found {}", d + 1, vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(perr(line, "non-finite value".into()));
        }
        if kind == TaskKind::Classification && ![-1.0, 0.0, 1.0].contains(&vals[d]) {
            return Err(perr(line, format!("label {} is not one of -1, 0, +1", vals[d])));
        }
        ys.push(vals[d]);
        xs.push(vals[..d].to_vec());
    }
    let mut remapped = false;
    if kind == TaskKind::Classification {
        remapped = canonicalize_labels(&mut ys).map_err(|e| perr(0, e.to_string()))?;
        if remapped {
            log::warn!("{}: labels {{0, 1}} remapped to {{-1, +1}}", source.display());
        }
    }
    Ok((xs, ys, remapped))
}

pub fn read_task_csv(path: &Path, kind: TaskKind) -> Result<ParsedCsv> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    parse_task_csv(&text, path, kind)
}

/// Writes a task CSV. Values use the shortest representation that parses
/// back to the same `f64`.
pub fn write_task_csv(path: &Path, x: &[Vec<f64>], y: &[f64]) -> Result<()> {
    let d = x.first().map_or(1, Vec::len);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Encoding(e.to_string()))?;
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header).map_err(|e| Error::Encoding(e.to_string()))?;
    for (xi, yi) in x.iter().zip(y) {
        let mut row: Vec<String> = xi.iter().map(|v| v.to_string()).collect();
        row.push(yi.to_string());
        w.write_record(&row).map_err(|e| Error::Encoding(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub test_fraction: Option<f64>,
    pub k_shot: Option<usize>,
    pub test_rows: Option<Vec<usize>>,
    pub seed: Option<u64>,
}

impl SplitSpec {
    pub fn rule(&self) -> Result<SplitRule> {
        let seed = self.seed.unwrap_or(0);
        match (self.test_fraction, self.k_shot, &self.test_rows) {
            (None, None, None) => Ok(SplitRule::TestRows(Vec::new())),
            (Some(f), None, None) => Ok(SplitRule::Fraction { test_fraction: f, seed }),
            (None, Some(k), None) => Ok(SplitRule::KShot { k, seed }),
            (None, None, Some(rows)) if self.seed.is_none() => Ok(SplitRule::TestRows(rows.clone())),
            (None, None, Some(_)) => Err(Error::input("`seed` has no effect with `test_rows`")),
            _ => Err(Error::input("split takes one of `test_fraction`, `k_shot`, `test_rows`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTask {
    pub id: usize,
    pub kind: TaskKind,
    pub path: PathBuf,
    pub split: Option<SplitSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestClient {
    pub id: usize,
    #[serde(default)]
    pub role: ClientRole,
    pub tasks: Vec<ManifestTask>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub clients: Vec<ManifestClient>,
}

impl Manifest {
    /// Parses and validates manifest text without touching referenced files.
    pub fn parse(text: &str, source: &Path) -> Result<Self> {
        let m: Manifest = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() as u64 + 1);
            Error::Parse {
                path: source.to_path_buf(),
                line,
                message: e.message().to_string(),
            }
        })?;
        m.validate().map_err(|e| e.context(source.display().to_string()))?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::input(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        if self.clients.is_empty() {
            return Err(Error::input("manifest lists no clients"));
        }
        let mut ids = BTreeSet::new();
        for c in &self.clients {
            if !ids.insert(c.id) {
                return Err(Error::input(format!("duplicate client id {}", c.id)));
            }
            if c.tasks.is_empty() {
                return Err(Error::input(format!("client {} has no tasks", c.id)));
            }
            let mut tasks = BTreeSet::new();
            for t in &c.tasks {
                if !tasks.insert(t.id) {
                    return Err(Error::input(format!("client {}: duplicate task id {}", c.id, t.id)));
                }
                if let Some(s) = &t.split {
                    s.rule().map_err(|e| e.context(format!("client {} task {}", c.id, t.id)))?;
                }
            }
        }
        Ok(())
    }
}

/// Reads a manifest and every CSV it references, applying declared splits.
pub fn load_manifest(path: &Path) -> Result<Vec<ClientDataset>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    let manifest = Manifest::parse(&text, path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.clients.len());
    for c in &manifest.clients {
        let mut tasks = Vec::with_capacity(c.tasks.len());
        let mut dim = None;
        for t in &c.tasks {
            let csv_path = base.join(&t.path);
            let (x, y, _) = read_task_csv(&csv_path, t.kind)?;
            let d = x.first().map(Vec::len);
            match (dim, d) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Error::input(format!(
                        "client {}: task {} has {b} input columns, earlier tasks {a}",
                        c.id, t.id
                    )));
                }
                (None, Some(b)) => dim = Some(b),
                _ => {}
            }
            let rule = t.split.as_ref().map(SplitSpec::rule).transpose()?;
            let mut table = TaskTable::new(t.id, t.kind, x, y)?;
            if let Some(rule) = rule {
                table = table.with_split(&rule).map_err(|e| e.context(format!("client {}", c.id)))?;
            }
            tasks.push(table);
        }
        out.push(ClientDataset {
            client_id: c.id,
            role: c.role,
            tasks,
        });
    }
    Ok(out)
}

/// Writes one CSV per task plus `manifest.toml` into `dir`. Splits are
/// recorded as explicit test rows so they reload exactly.
pub fn write_manifest(dir: &Path, datasets: &[ClientDataset]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut clients = Vec::with_capacity(datasets.len());
    for c in datasets {
        let mut tasks = Vec::with_capacity(c.tasks.len());
        for t in &c.tasks {
            let name = PathBuf::from(format!("client{}_task{}.csv", c.client_id, t.task_id));
            write_task_csv(&dir.join(&name), &t.x, &t.y)?;
            tasks.push(ManifestTask {
                id: t.task_id,
                kind: t.kind,
                path: name,
                split: (!t.test.is_empty()).then(|| SplitSpec {
                    test_rows: Some(t.test.clone()),
                    ..SplitSpec::default()
                }),
            });
        }
        clients.push(ManifestClient {
            id: c.client_id,
            role: c.role,
            tasks,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        clients,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Encoding(e.to_string()))?;
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Generating hyperparameters of the synthetic two-task problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_clients: usize,
    pub n_points: usize,
    pub domain: [f64; 2],
    pub sigma2: f64,
    pub mixing: Vec<Vec<f64>>,
    pub phi0: Vec<f64>,
    pub phi1: Vec<f64>,
    /// Ground-truth grid resolution over the domain.
    pub grid_points: usize,
    /// Uniform random inputs instead of an evenly spaced grid.
    pub random_inputs: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clients: 5,
            n_points: 50,
            domain: [0.0, 100.0],
            sigma2: 0.1,
            mixing: vec![vec![0.6, 0.4], vec![0.4, 0.6]],
            phi0: vec![1.0, 2.0],
            phi1: vec![0.02, 0.01],
            grid_points: 101,
            random_inputs: false,
        }
    }
}

/// Task id of the synthetic regression task; the classification task is 1.
pub const SYN_REGRESSION: usize = 0;
pub const SYN_CLASSIFICATION: usize = 1;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("synthetic.n_clients", "must be at least 1"));
        }
        if self.n_points == 0 {
            return Err(Error::config("synthetic.n_points", "must be at least 1"));
        }
        if !(self.domain[0] < self.domain[1]) || self.domain.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("synthetic.domain", "needs finite bounds with lo < hi"));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::config("synthetic.sigma2", "must be non-negative"));
        }
        if self.mixing.len() != 2 {
            return Err(Error::config("synthetic.mixing", "needs one row per task (2)"));
        }
        let b = self.phi0.len();
        if b == 0 || self.phi1.len() != b || self.mixing.iter().any(|r| r.len() != b) {
            return Err(Error::config("synthetic.phi0", "phi0, phi1 and mixing rows must have one entry per basis"));
        }
        if self.grid_points < 2 {
            return Err(Error::config("synthetic.grid_points", "must be at least 2"));
        }
        Ok(())
    }

    pub fn kernels(&self) -> Result<Vec<BasisKernel>> {
        self.phi0
            .iter()
            .zip(&self.phi1)
            .map(|(&a, &b)| Ok(BasisKernel::new(KernelSpec::rbf(a, b)?, FeatureMap::identity(1))))
            .collect()
    }

    pub fn mixing_weights(&self) -> Result<MixingWeights> {
        MixingWeights::from_rows(&self.mixing)
    }
}

/// True latent functions of one synthetic client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientTruth {
    pub client_id: usize,
    pub inputs: Vec<f64>,
    pub f_r: Vec<f64>,
    pub f_c: Vec<f64>,
    pub grid: Vec<f64>,
    pub grid_f_r: Vec<f64>,
    pub grid_f_c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticGroundTruth {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub clients: Vec<ClientTruth>,
}

/// Overrides the sampled latents `(f_r, f_c)` of a client at its data
/// inputs before targets are drawn.
pub type LatentHook<'a> = &'a dyn Fn(usize, &mut [f64], &mut [f64]);

pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<(Vec<ClientDataset>, SyntheticGroundTruth)> {
    generate_synthetic_with(cfg, seed, None)
}

/// Per client: inputs over the domain, a joint draw of both latents at the
/// inputs and on the grid, noisy regression targets and Bernoulli labels.
pub fn generate_synthetic_with(
    cfg: &SyntheticConfig,
    seed: u64,
    hook: Option<LatentHook<'_>>,
) -> Result<(Vec<ClientDataset>, SyntheticGroundTruth)> {
    cfg.validate()?;
    let kernels = cfg.kernels()?;
    let w = cfg.mixing_weights()?;
    let [lo, hi] = cfg.domain;
    let n = cfg.n_points;
    let grid: Vec<f64> = (0..cfg.grid_points)
        .map(|g| lo + (hi - lo) * g as f64 / (cfg.grid_points - 1) as f64)
        .collect();
    let mut datasets = Vec::with_capacity(cfg.n_clients);
    let mut truths = Vec::with_capacity(cfg.n_clients);
    for z in 0..cfg.n_clients {
        let mut rng = stream_rng(seed, "synthetic_inputs", z as u64);
        let inputs: Vec<f64> = if cfg.random_inputs {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
            v.sort_by(f64::total_cmp);
            v
        } else {
            // evenly spaced cells with a client-specific phase
            let step = (hi - lo) / n as f64;
            let phase: f64 = rng.random();
            (0..n).map(|i| lo + step * (i as f64 + phase)).collect()
        };
        let pts: Vec<Vec<f64>> = inputs.iter().chain(&grid).map(|&x| vec![x]).collect();
        let layout = TaskLayout::new(vec![
            (SYN_REGRESSION, TaskKind::Regression, pts.clone()),
            (SYN_CLASSIFICATION, TaskKind::Classification, pts),
        ])?;
        let f = sample_mogp(&layout, &w, &kernels, derive_seed(seed, "synthetic_latent", z as u64), DEFAULT_JITTER)?;
        let m = inputs.len() + grid.len();
        let mut f_r: Vec<f64> = f.rows(0, n).iter().copied().collect();
        let mut f_c: Vec<f64> = f.rows(m, n).iter().copied().collect();
        if let Some(h) = hook {
            h(z, &mut f_r, &mut f_c);
        }
        let mut noise_rng = stream_rng(seed, "synthetic_targets", z as u64);
        let sd = cfg.sigma2.sqrt();
        let y_r: Vec<f64> = f_r
            .iter()
            .map(|&v| {
                let e: f64 = noise_rng.sample(rand_distr::StandardNormal);
                v + sd * e
            })
            .collect();
        let y_c: Vec<f64> = f_c
            .iter()
            .map(|&v| {
                let p = 1.0 / (1.0 + (-v).exp());
                if noise_rng.random_bool(p) {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect();
        let xs: Vec<Vec<f64>> = inputs.iter().map(|&x| vec![x]).collect();
        datasets.push(ClientDataset {
            client_id: z,
            role: ClientRole::Train,
            tasks: vec![
                TaskTable::new(SYN_REGRESSION, TaskKind::Regression, xs.clone(), y_r)?,
                TaskTable::new(SYN_CLASSIFICATION, TaskKind::Classification, xs, y_c)?,
            ],
        });
        truths.push(ClientTruth {
            client_id: z,
            inputs,
            f_r,
            f_c,
            grid: grid.clone(),
            grid_f_r: f.rows(n, grid.len()).iter().copied().collect(),
            grid_f_c: f.rows(m + n, grid.len()).iter().copied().collect(),
        });
    }
    Ok((
        datasets,
        SyntheticGroundTruth {
            config: cfg.clone(),
            seed,
            clients: truths,
        },
    ))
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let va = DVector::from_column_slice(a);
    let vb = DVector::from_column_slice(b);
    let ca = va.add_scalar(-va.mean());
    let cb = vb.add_scalar(-vb.mean());
    let den = ca.norm() * cb.norm();
    (den > 0.0).then(|| ca.dot(&cb) / den)
}
