//! End-to-end experiment runs and their artifacts.
//!
//! # Artifacts
//!
//! `metrics.csv` has the header
//! `phase,round,client,task,kind,split,n,metric,value,elbo_a,elbo_b,elbo_c,elbo_d,elbo_total`.
//! `phase` is `round` for clients sampled in a training round, `final` for
//! training clients and `final_new` for new clients after the last round;
//! `round` is empty in the final phases. `split` is `test`, or `train` when a
//! task has no held-out rows. `metric` is `mse` or `acc`. The ELBO columns
//! are the client's, repeated on each of its task rows.
//!
//! `predictions.csv` has the header
//! `client,task,kind,split,x0,...,x{D-1},mean,variance,prob,target`, one row
//! per evaluated point of the final fits; `prob` is empty for regression.
//!
//! `calibration.json` holds the pooled reliability diagram of every final
//! classification prediction under `pooled`, and one diagram per client
//! under `clients`.
//!
//! `round_log.json` holds `rounds` (one entry per server round),
//! `final_elbo` and `final_prior`.
//!
//! `checkpoint.cbor` is the CBOR-encoded checkpoint after the latest round.
//!
//! `ablation.csv` (ablate only) has the header
//! `axis,value,status,mse,acc,final_elbo,data_digest,error`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CHECKPOINT_FILE};
use crate::config::{DataSource, ExperimentConfig};
use crate::data::{
    generate_synthetic, load_manifest, write_manifest, ClientDataset, ClientRole, SplitRule,
    SyntheticGroundTruth,
};
use crate::elbo::ELBOBreakdown;
use crate::error::{Error, Result};
use crate::federation::{
    run_federation, ClientData, ClientFit, FederationInput, FederationResult, RoundLog, RoundObserver,
    RunOptions,
};
use crate::kernels::{BasisKernel, FeatureMap, FeatureMapKind, KernelFamily, KernelSpec};
use crate::metrics::{accuracy, ece, mse, ReliabilityDiagram};
use crate::mogp::{MixingWeights, TaskKind};
use crate::pg_inference::PredictionScope;
use crate::prior::{AggregationMode, GlobalPrior, NoiseVariances};
use crate::rng::derive_seed;

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub datasets: Vec<ClientDataset>,
    pub truth: Option<SyntheticGroundTruth>,
}

/// Loads or generates the datasets named by `cfg`, with splits applied.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    match cfg.data.source {
        DataSource::Synthetic => {
            let (datasets, truth) = generate_synthetic(&cfg.synthetic, cfg.seed)?;
            let split_seed = derive_seed(cfg.seed, "split", 0);
            let rule = match cfg.data.k_shot {
                Some(k) => SplitRule::KShot { k, seed: split_seed },
                None => SplitRule::Fraction {
                    test_fraction: cfg.data.test_fraction,
                    seed: split_seed,
                },
            };
            let datasets = datasets.into_iter().map(|d| d.split(&rule)).collect::<Result<_>>()?;
            Ok(PreparedData {
                datasets,
                truth: Some(truth),
            })
        }
        DataSource::Manifest => {
            let path = cfg
                .data
                .manifest
                .as_ref()
                .ok_or_else(|| Error::config("manifest", "no manifest path given"))?;
            Ok(PreparedData {
                datasets: load_manifest(path)?,
                truth: None,
            })
        }
    }
}

/// Prior built from the model section, sized for the tasks in `datasets`.
pub fn initial_prior(cfg: &ExperimentConfig, datasets: &[ClientDataset]) -> Result<GlobalPrior> {
    let m = &cfg.model;
    let n_tasks = datasets
        .iter()
        .flat_map(|d| d.tasks.iter().map(|t| t.task_id + 1))
        .max()
        .ok_or_else(|| Error::input("no tasks in the data"))?;
    if m.mixing.len() != n_tasks {
        return Err(Error::config(
            "mixing",
            format!("{} rows given but the data has task ids up to {}", m.mixing.len(), n_tasks - 1),
        ));
    }
    let dim = datasets.iter().map(ClientDataset::input_dim).find(|d| *d > 0).unwrap_or(1);
    let bases = m
        .phi0
        .iter()
        .zip(&m.phi1)
        .map(|(&a, &b)| {
            let map = match m.feature_map {
                FeatureMapKind::Identity => FeatureMap::identity(dim),
                FeatureMapKind::Affine => FeatureMap::affine(dim, m.latent_dim.unwrap_or(dim))?,
            };
            Ok(BasisKernel::new(KernelSpec::new(m.kernel, a, b)?, map))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reg_tasks: Vec<usize> = datasets
        .iter()
        .flat_map(|d| d.tasks.iter())
        .filter(|t| t.kind == TaskKind::Regression)
        .map(|t| t.task_id)
        .collect();
    reg_tasks.sort_unstable();
    reg_tasks.dedup();
    GlobalPrior::new(
        bases,
        MixingWeights::from_rows(&m.mixing)?,
        NoiseVariances::new(reg_tasks.into_iter().map(|t| (t, m.sigma2)))?,
        cfg.federation.aggregation_mode,
    )
}

pub fn federation_input(datasets: &[ClientDataset]) -> Result<FederationInput> {
    let mut input = FederationInput::default();
    for d in datasets {
        let client = ClientData {
            client_id: d.client_id,
            data: Arc::new(d.train_data()?),
        };
        match d.role {
            ClientRole::Train => input.train.push(client),
            ClientRole::New => input.new.push(client),
        }
    }
    if input.train.is_empty() {
        return Err(Error::input("no training clients"));
    }
    Ok(input)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub phase: String,
    pub round: Option<usize>,
    pub client: usize,
    pub task: usize,
    pub kind: TaskKind,
    pub split: String,
    pub n: usize,
    pub metric: String,
    pub value: f64,
    pub elbo: ELBOBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub client: usize,
    pub task: usize,
    pub kind: TaskKind,
    pub split: String,
    pub x: Vec<f64>,
    pub mean: f64,
    pub variance: f64,
    pub prob: Option<f64>,
    pub target: f64,
}

/// Per-task evaluation of one fit on its held-out rows (training rows when
/// none are held out).
pub fn evaluate_fit(
    fit: &ClientFit,
    dataset: &ClientDataset,
    scope: PredictionScope,
    phase: &str,
    round: Option<usize>,
) -> Result<(Vec<MetricRow>, Vec<PredictionRow>)> {
    let mut rows = Vec::new();
    let mut preds = Vec::new();
    for t in &dataset.tasks {
        let (split, idx) = if t.test.is_empty() { ("train", &t.train) } else { ("test", &t.test) };
        if idx.is_empty() {
            continue;
        }
        let cond = fit.conditional(t.task_id, scope)?;
        let mut means = Vec::with_capacity(idx.len());
        let mut targets = Vec::with_capacity(idx.len());
        for &i in idx {
            let p = cond.predict(&fit.prior, t.task_id, &t.x[i])?;
            means.push(p.mean);
            targets.push(t.y[i]);
            preds.push(PredictionRow {
                client: dataset.client_id,
                task: t.task_id,
                kind: t.kind,
                split: split.to_string(),
                x: t.x[i].clone(),
                mean: p.mean,
                variance: p.variance,
                prob: (t.kind == TaskKind::Classification).then(|| p.class_probability()),
                target: t.y[i],
            });
        }
        let (metric, value) = match t.kind {
            TaskKind::Regression => ("mse", mse(&means, &targets)?),
            TaskKind::Classification => ("acc", accuracy(&means, &targets)?),
        };
        rows.push(MetricRow {
            phase: phase.to_string(),
            round,
            client: dataset.client_id,
            task: t.task_id,
            kind: t.kind,
            split: split.to_string(),
            n: idx.len(),
            metric: metric.to_string(),
            value,
            elbo: fit.elbo,
        });
    }
    Ok((rows, preds))
}

struct RoundMetrics<'a> {
    datasets: BTreeMap<usize, &'a ClientDataset>,
    scope: PredictionScope,
    rows: Vec<MetricRow>,
}

impl RoundObserver for RoundMetrics<'_> {
    fn on_round(&mut self, log: &RoundLog, fits: &[ClientFit]) -> Result<()> {
        for fit in fits {
            let ds = self.datasets[&fit.client_id];
            let (rows, _) = evaluate_fit(fit, ds, self.scope, "round", Some(log.round))?;
            self.rows.extend(rows);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub pooled: Option<ReliabilityDiagram>,
    pub clients: BTreeMap<usize, ReliabilityDiagram>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub metrics: Vec<MetricRow>,
    pub predictions: Vec<PredictionRow>,
    pub calibration: CalibrationReport,
    pub result: FederationResult,
    pub input_dim: usize,
}

fn calibration(preds: &[PredictionRow], n_bins: usize) -> Result<CalibrationReport> {
    let mut by_client: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut all = (Vec::new(), Vec::new());
    for p in preds.iter().filter(|p| p.kind == TaskKind::Classification) {
        let prob = p.prob.unwrap_or(0.5);
        let e = by_client.entry(p.client).or_default();
        e.0.push(prob);
        e.1.push(p.target);
        all.0.push(prob);
        all.1.push(p.target);
    }
    Ok(CalibrationReport {
        pooled: if all.0.is_empty() { None } else { Some(ece(&all.0, &all.1, n_bins)?) },
        clients: by_client
            .into_iter()
            .map(|(c, (p, y))| Ok((c, ece(&p, &y, n_bins)?)))
            .collect::<Result<_>>()?,
    })
}

/// Runs federation and evaluation in memory.
pub fn execute(
    cfg: &ExperimentConfig,
    prepared: &PreparedData,
    checkpoint: Option<PathBuf>,
    resume: Option<Checkpoint>,
) -> Result<ExperimentReport> {
    let input = federation_input(&prepared.datasets)?;
    let prior = initial_prior(cfg, &prepared.datasets)?;
    let fed = cfg.federation_config(input.train.len());
    let mut observer = RoundMetrics {
        datasets: prepared.datasets.iter().map(|d| (d.client_id, d)).collect(),
        scope: cfg.model.scope,
        rows: Vec::new(),
    };
    let result = run_federation(
        &prior,
        &input,
        &fed,
        RunOptions {
            checkpoint,
            resume,
            observer: Some(&mut observer),
        },
    )?;
    let mut metrics = std::mem::take(&mut observer.rows);
    let datasets = observer.datasets;
    let evaluated: Vec<(Vec<MetricRow>, Vec<PredictionRow>)> = result
        .train
        .par_iter()
        .map(|f| (f, "final"))
        .chain(result.new.par_iter().map(|f| (f, "final_new")))
        .map(|(f, phase)| evaluate_fit(f, datasets[&f.client_id], cfg.model.scope, phase, None))
        .collect::<Result<_>>()?;
    let mut predictions = Vec::new();
    for (rows, preds) in evaluated {
        metrics.extend(rows);
        predictions.extend(preds);
    }
    let calibration = calibration(&predictions, cfg.metrics.n_bins)?;
    let input_dim = prepared.datasets.iter().map(ClientDataset::input_dim).max().unwrap_or(1);
    Ok(ExperimentReport {
        metrics,
        predictions,
        calibration,
        result,
        input_dim,
    })
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("phase,round,client,task,kind,split,n,metric,value,elbo_a,elbo_b,elbo_c,elbo_d,elbo_total\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.phase,
            r.round.map_or(String::new(), |v| v.to_string()),
            r.client,
            r.task,
            r.kind,
            r.split,
            r.n,
            r.metric,
            r.value,
            r.elbo.term_a,
            r.elbo.term_b,
            r.elbo.term_c,
            r.elbo.term_d,
            r.elbo.total
        );
    }
    s
}

pub fn predictions_csv(rows: &[PredictionRow], dim: usize) -> String {
    let mut s = String::from("client,task,kind,split,");
    for j in 0..dim {
        let _ = write!(s, "x{j},");
    }
    s.push_str("mean,variance,prob,target\n");
    for r in rows {
        let _ = write!(s, "{},{},{},{},", r.client, r.task, r.kind, r.split);
        for v in &r.x {
            let _ = write!(s, "{v},");
        }
        let _ = writeln!(s, "{},{},{},{}", r.mean, r.variance, opt_num(r.prob), r.target);
    }
    s
}

#[derive(Serialize)]
struct RoundLogFile<'a> {
    rounds: &'a [RoundLog],
    final_elbo: f64,
    final_prior: &'a GlobalPrior,
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Encoding(e.to_string()))
}

/// Writes `metrics.csv`, `predictions.csv`, `calibration.json` and
/// `round_log.json` into `out`.
pub fn write_artifacts(report: &ExperimentReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(&report.metrics))?;
    std::fs::write(out.join("predictions.csv"), predictions_csv(&report.predictions, report.input_dim))?;
    std::fs::write(out.join("calibration.json"), json(&report.calibration)?)?;
    let log = RoundLogFile {
        rounds: &report.result.logs,
        final_elbo: report.result.final_elbo,
        final_prior: &report.result.prior,
    };
    std::fs::write(out.join("round_log.json"), json(&log)?)?;
    Ok(())
}

/// `run`: prepare data, federate, evaluate and write every artifact.
pub fn cmd_run(cfg: &ExperimentConfig, resume: bool) -> Result<ExperimentReport> {
    std::fs::create_dir_all(&cfg.out)?;
    let checkpoint = cfg.out.join(CHECKPOINT_FILE);
    let resume = if resume { Some(Checkpoint::read(&checkpoint)?) } else { None };
    let prepared = prepare_data(cfg)?;
    let report = execute(cfg, &prepared, Some(checkpoint), resume)?;
    write_artifacts(&report, &cfg.out)?;
    Ok(report)
}

/// `gen`: writes the synthetic datasets (with their splits), a manifest and
/// `ground_truth.json` into the output directory.
pub fn cmd_gen(cfg: &ExperimentConfig) -> Result<PathBuf> {
    if cfg.data.source != DataSource::Synthetic {
        return Err(Error::config("source", "gen only produces synthetic data"));
    }
    let prepared = prepare_data(cfg)?;
    let manifest = write_manifest(&cfg.out, &prepared.datasets)?;
    if let Some(truth) = &prepared.truth {
        std::fs::write(cfg.out.join("ground_truth.json"), json(truth)?)?;
    }
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Mode,
    Kernel,
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mode" => Ok(Self::Mode),
            "kernel" => Ok(Self::Kernel),
            other => Err(Error::input(format!("unknown ablation axis `{other}` (allowed: mode, kernel)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub status: String,
    pub mse: Option<f64>,
    pub acc: Option<f64>,
    pub final_elbo: Option<f64>,
    pub data_digest: String,
    pub error: Option<String>,
}

/// FNV-1a digest of every number and split index in the datasets.
pub fn data_digest(datasets: &[ClientDataset]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: u64| {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for d in datasets {
        eat(d.client_id as u64);
        for t in &d.tasks {
            eat(t.task_id as u64);
            t.x.iter().flatten().chain(&t.y).for_each(|v| eat(v.to_bits()));
            t.train.iter().chain(&t.test).for_each(|&i| eat(i as u64));
        }
    }
    format!("{h:016x}")
}

fn mean_metric(rows: &[MetricRow], metric: &str) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.phase == "final" && r.metric == metric)
        .map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs one experiment per value on `axis` with the same seed. A failing
/// cell is recorded and the others still run.
pub fn run_ablation(cfg: &ExperimentConfig, axis: AblationAxis) -> Vec<AblationRow> {
    let cells: Vec<(String, ExperimentConfig)> = match axis {
        AblationAxis::Mode => AggregationMode::ALL
            .iter()
            .map(|&m| {
                let mut c = cfg.clone();
                c.federation.aggregation_mode = m;
                (m.to_string(), c)
            })
            .collect(),
        AblationAxis::Kernel => KernelFamily::ALL
            .iter()
            .map(|&k| {
                let mut c = cfg.clone();
                c.model.kernel = k;
                (k.to_string(), c)
            })
            .collect(),
    };
    let axis_name = match axis {
        AblationAxis::Mode => "mode",
        AblationAxis::Kernel => "kernel",
    };
    cells
        .par_iter()
        .map(|(value, c)| {
            let mut row = AblationRow {
                axis: axis_name.to_string(),
                value: value.clone(),
                status: "ok".to_string(),
                mse: None,
                acc: None,
                final_elbo: None,
                data_digest: String::new(),
                error: None,
            };
            let outcome = prepare_data(c).and_then(|p| {
                row.data_digest = data_digest(&p.datasets);
                execute(c, &p, None, None)
            });
            match outcome {
                Ok(rep) => {
                    row.mse = mean_metric(&rep.metrics, "mse");
                    row.acc = mean_metric(&rep.metrics, "acc");
                    row.final_elbo = Some(rep.result.final_elbo);
                }
                Err(e) => {
                    log::error!("ablation cell {axis_name}={value} failed: {e}");
                    row.status = "error".to_string();
                    row.error = Some(e.to_string());
                }
            }
            row
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,value,status,mse,acc,final_elbo,data_digest,error\n");
    for r in rows {
        let err = r.error.as_deref().unwrap_or("").replace(['"', '\n', ','], " ");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.axis,
            r.value,
            r.status,
            opt_num(r.mse),
            opt_num(r.acc),
            opt_num(r.final_elbo),
            r.data_digest,
            err
        );
    }
    s
}

/// `ablate`: writes `ablation.csv` into the output directory.
pub fn cmd_ablate(cfg: &ExperimentConfig, axis: AblationAxis) -> Result<Vec<AblationRow>> {
    let rows = run_ablation(cfg, axis);
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(rows)
}
