//! Linear model of coregionalization: cross-covariances, stacked block
//! covariance assembly and prior sampling.
//!
//! Latent values of every task are stacked into one vector in a canonical
//! order: regression tasks first, then classification tasks, each group
//! sorted by task id. Task ids double as row indices into the mixing matrix.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::BasisKernel;
use crate::linalg::{factorize, GramMatrix};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Regression,
    Classification,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "classification" => Ok(TaskKind::Classification),
            other => Err(Error::input(format!(
                "unknown task kind `{other}` (expected regression or classification)"
            ))),
        }
    }
}

/// The `T x B` matrix of mixing weights `w_{i,b}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixingWeights {
    w: DMatrix<f64>,
}

impl MixingWeights {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if w.nrows() == 0 || w.ncols() == 0 {
            return Err(Error::input("mixing matrix needs at least one task and one basis"));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("mixing matrix has non-finite entries"));
        }
        Ok(Self { w })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let t = rows.len();
        let b = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != b) {
            return Err(Error::input("mixing matrix rows have unequal length"));
        }
        Self::new(DMatrix::from_fn(t, b, |i, j| rows[i][j]))
    }

    pub fn identity(n: usize) -> Self {
        Self {
            w: DMatrix::identity(n, n),
        }
    }

    pub fn tasks(&self) -> usize {
        self.w.nrows()
    }

    pub fn bases(&self) -> usize {
        self.w.ncols()
    }

    pub fn get(&self, task: usize, basis: usize) -> f64 {
        self.w[(task, basis)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.w
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.w.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

/// One task's inputs inside a [`TaskLayout`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskBlock {
    pub task_id: usize,
    pub kind: TaskKind,
    pub inputs: Vec<Vec<f64>>,
    offset: usize,
}

impl TaskBlock {
    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.inputs.len()
    }
}

/// Canonical ordering of the stacked latent vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLayout {
    blocks: Vec<TaskBlock>,
    total: usize,
    input_dim: usize,
}

impl TaskLayout {
    /// Builds the canonical layout from tasks given in any order.
    pub fn new(mut tasks: Vec<(usize, TaskKind, Vec<Vec<f64>>)>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::input("task layout needs at least one task"));
        }
        tasks.sort_by_key(|(id, kind, _)| (*kind, *id));
        if tasks.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::input("duplicate task id in layout"));
        }
        let input_dim = tasks
            .iter()
            .flat_map(|(_, _, xs)| xs.first())
            .map(Vec::len)
            .next()
            .unwrap_or(0);
        let mut blocks = Vec::with_capacity(tasks.len());
        let mut offset = 0;
        for (task_id, kind, inputs) in tasks {
            if inputs.iter().any(|x| x.len() != input_dim) {
                return Err(Error::input(format!(
                    "task {task_id}: inputs must all have dimension {input_dim}"
                )));
            }
            let n = inputs.len();
            blocks.push(TaskBlock {
                task_id,
                kind,
                inputs,
                offset,
            });
            offset += n;
        }
        Ok(Self {
            blocks,
            total: offset,
            input_dim,
        })
    }

    pub fn blocks(&self) -> &[TaskBlock] {
        &self.blocks
    }

    /// Total number of stacked latent values.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn block_of_task(&self, task_id: usize) -> Option<&TaskBlock> {
        self.blocks.iter().find(|b| b.task_id == task_id)
    }

    /// Maps a stacked index back to `(block position, sample index)`.
    pub fn locate(&self, index: usize) -> Option<(usize, usize)> {
        self.blocks
            .iter()
            .position(|b| b.range().contains(&index))
            .map(|p| (p, index - self.blocks[p].offset))
    }

    pub fn index(&self, block: usize, sample: usize) -> Option<usize> {
        let b = self.blocks.get(block)?;
        (sample < b.len()).then_some(b.offset + sample)
    }

    pub fn kind_at(&self, index: usize) -> Option<TaskKind> {
        self.locate(index).map(|(b, _)| self.blocks[b].kind)
    }

    pub fn has_kind(&self, kind: TaskKind) -> bool {
        self.blocks.iter().any(|b| b.kind == kind && !b.is_empty())
    }

    /// `(task id, input)` for every stacked index, in order.
    pub fn points(&self) -> Vec<(usize, &[f64])> {
        self.blocks
            .iter()
            .flat_map(|b| b.inputs.iter().map(move |x| (b.task_id, x.as_slice())))
            .collect()
    }
}

/// A layout together with its stacked observations. Classification targets
/// are `±1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskData {
    pub layout: TaskLayout,
    pub targets: DVector<f64>,
}

/// One task's observations before stacking.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskObservations {
    pub task_id: usize,
    pub kind: TaskKind,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl TaskData {
    pub fn new(tasks: Vec<TaskObservations>) -> Result<Self> {
        let mut tasks = tasks;
        tasks.sort_by_key(|t| (t.kind, t.task_id));
        for t in &tasks {
            if t.x.len() != t.y.len() {
                return Err(Error::input(format!(
                    "task {}: {} inputs but {} targets",
                    t.task_id,
                    t.x.len(),
                    t.y.len()
                )));
            }
            match t.kind {
                TaskKind::Regression => {
                    if t.y.iter().any(|v| !v.is_finite()) {
                        return Err(Error::input(format!("task {}: non-finite target", t.task_id)));
                    }
                }
                TaskKind::Classification => {
                    if t.y.iter().any(|&v| v != 1.0 && v != -1.0) {
                        return Err(Error::input(format!(
                            "task {}: classification labels must be ±1",
                            t.task_id
                        )));
                    }
                }
            }
        }
        let targets: Vec<f64> = tasks.iter().flat_map(|t| t.y.iter().copied()).collect();
        let layout = TaskLayout::new(tasks.into_iter().map(|t| (t.task_id, t.kind, t.x)).collect())?;
        Ok(Self {
            layout,
            targets: DVector::from_vec(targets),
        })
    }

    pub fn len(&self) -> usize {
        self.layout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layout.is_empty()
    }

    /// Targets of one layout block.
    pub fn block_targets(&self, block: usize) -> &[f64] {
        let r = self.layout.blocks()[block].range();
        &self.targets.as_slice()[r]
    }
}

fn check_kernels(w: &MixingWeights, kernels: &[BasisKernel]) -> Result<()> {
    if kernels.len() != w.bases() {
        return Err(Error::input(format!(
            "{} basis kernels for a mixing matrix with {} columns",
            kernels.len(),
            w.bases()
        )));
    }
    Ok(())
}

fn check_task(w: &MixingWeights, task: usize) -> Result<()> {
    if task >= w.tasks() {
        return Err(Error::input(format!(
            "task index {task} out of range for {} mixing rows",
            w.tasks()
        )));
    }
    Ok(())
}

#[inline]
fn lmc_sum(w: &MixingWeights, i: usize, j: usize, ks: impl Iterator<Item = f64>) -> f64 {
    let mut acc = 0.0;
    for (b, k) in ks.enumerate() {
        acc += (w.get(i, b) * w.get(j, b)) * k;
    }
    acc
}

/// `sum_b w_{i,b} w_{j,b} k_b(x, x')`.
pub fn cross_cov(
    w: &MixingWeights,
    kernels: &[BasisKernel],
    i: usize,
    j: usize,
    x: &[f64],
    y: &[f64],
) -> Result<f64> {
    check_kernels(w, kernels)?;
    check_task(w, i)?;
    check_task(w, j)?;
    let ks: Vec<f64> = kernels.iter().map(|k| k.eval(x, y)).collect::<Result<_>>()?;
    Ok(lmc_sum(w, i, j, ks.into_iter()))
}

/// Points labelled with the task whose latent function they index.
pub type TaskPoint<'a> = (usize, &'a [f64]);

fn map_points(kernels: &[BasisKernel], pts: &[TaskPoint<'_>]) -> Result<Vec<Vec<Vec<f64>>>> {
    kernels
        .iter()
        .map(|k| pts.iter().map(|(_, x)| k.map.apply(x)).collect())
        .collect()
}

/// Cross-covariance matrix between two lists of task-labelled points.
pub fn cross_cov_matrix(
    w: &MixingWeights,
    kernels: &[BasisKernel],
    rows: &[TaskPoint<'_>],
    cols: &[TaskPoint<'_>],
) -> Result<DMatrix<f64>> {
    check_kernels(w, kernels)?;
    for (t, _) in rows.iter().chain(cols) {
        check_task(w, *t)?;
    }
    let mr = map_points(kernels, rows)?;
    let mc = map_points(kernels, cols)?;
    let m = DMatrix::from_fn(rows.len(), cols.len(), |r, c| {
        lmc_sum(
            w,
            rows[r].0,
            cols[c].0,
            kernels.iter().enumerate().map(|(b, k)| k.spec.base(&mr[b][r], &mc[b][c])),
        )
    });
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("cross-covariance has non-finite entries"));
    }
    Ok(m)
}

/// Symmetric covariance of task-labelled points.
pub fn covariance_of(
    w: &MixingWeights,
    kernels: &[BasisKernel],
    pts: &[TaskPoint<'_>],
) -> Result<DMatrix<f64>> {
    check_kernels(w, kernels)?;
    for (t, _) in pts {
        check_task(w, *t)?;
    }
    let mapped = map_points(kernels, pts)?;
    let n = pts.len();
    let mut k = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in r..n {
            let v = lmc_sum(
                w,
                pts[r].0,
                pts[c].0,
                kernels.iter().enumerate().map(|(b, kb)| kb.spec.base(&mapped[b][r], &mapped[b][c])),
            );
            k[(r, c)] = v;
            k[(c, r)] = v;
        }
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("covariance has non-finite entries"));
    }
    Ok(k)
}

/// Stacked block covariance `K` over every point in the layout.
pub type BlockCovariance = GramMatrix;

pub fn assemble_k(
    layout: &TaskLayout,
    w: &MixingWeights,
    kernels: &[BasisKernel],
) -> Result<BlockCovariance> {
    if layout.is_empty() {
        return Err(Error::input("cannot assemble a covariance over an empty layout"));
    }
    Ok(GramMatrix::new(covariance_of(w, kernels, &layout.points())?))
}

/// Draws `f ~ N(0, K)` as `L z` with `z` standard normal.
pub fn sample_mogp(
    layout: &TaskLayout,
    w: &MixingWeights,
    kernels: &[BasisKernel],
    seed: u64,
    base_jitter: f64,
) -> Result<DVector<f64>> {
    let k = assemble_k(layout, w, kernels)?;
    let f = factorize(&k.entries, base_jitter, "MOGP prior covariance")?;
    let mut rng = stream_rng(seed, "sample_mogp", 0);
    let z = DVector::from_fn(layout.len(), |_, _| StandardNormal.sample(&mut rng));
    Ok(f.l() * z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{FeatureMap, KernelSpec};
    use crate::linalg::DEFAULT_JITTER;

    pub(crate) fn paper_kernels() -> Vec<BasisKernel> {
        vec![
            BasisKernel::new(KernelSpec::rbf(1.0, 0.02).unwrap(), FeatureMap::identity(1)),
            BasisKernel::new(KernelSpec::rbf(2.0, 0.01).unwrap(), FeatureMap::identity(1)),
        ]
    }

    fn paper_w() -> MixingWeights {
        MixingWeights::from_rows(&[vec![0.6, 0.4], vec![0.4, 0.6]]).unwrap()
    }

    #[test]
    fn orthogonal_rows_have_zero_cross_cov() {
        let w = MixingWeights::identity(2);
        let c = cross_cov(&w, &paper_kernels(), 0, 1, &[1.0], &[7.0]).unwrap();
        assert_eq!(c, 0.0);
    }

    #[test]
    fn paper_mixing_cross_cov() {
        let (w, k) = (paper_w(), paper_kernels());
        let c01 = cross_cov(&w, &k, 0, 1, &[5.0], &[5.0]).unwrap();
        assert!((c01 - 0.72).abs() < 1e-12, "{c01}");
        let c00 = cross_cov(&w, &k, 0, 0, &[5.0], &[5.0]).unwrap();
        assert!((c00 - 0.68).abs() < 1e-12, "{c00}");
        assert!(cross_cov(&w, &k, 2, 0, &[5.0], &[5.0]).is_err());
        assert!(cross_cov(&w, &k[..1], 0, 0, &[5.0], &[5.0]).is_err());
    }

    #[test]
    fn single_point_and_block_diagonal() {
        let k1 = vec![BasisKernel::new(KernelSpec::rbf(1.0, 1.0).unwrap(), FeatureMap::identity(1))];
        let layout = TaskLayout::new(vec![(0, TaskKind::Regression, vec![vec![0.0]])]).unwrap();
        let w = MixingWeights::identity(1);
        assert_eq!(assemble_k(&layout, &w, &k1).unwrap().entries, DMatrix::from_element(1, 1, 1.0));

        let layout = TaskLayout::new(vec![
            (0, TaskKind::Regression, vec![vec![0.0]]),
            (1, TaskKind::Classification, vec![vec![0.5]]),
        ])
        .unwrap();
        let k = assemble_k(&layout, &MixingWeights::identity(2), &paper_kernels()).unwrap();
        assert_eq!(k.entries[(0, 1)], 0.0);
        assert_eq!(k.entries[(1, 0)], 0.0);
        assert_eq!(k.entries[(0, 0)], 1.0);
        assert_eq!(k.entries[(1, 1)], 2.0);
    }

    #[test]
    fn assembled_matches_entrywise_cross_cov() {
        let xs = vec![vec![3.0], vec![40.0], vec![77.5]];
        let layout = TaskLayout::new(vec![
            (1, TaskKind::Classification, xs.clone()),
            (0, TaskKind::Regression, xs),
        ])
        .unwrap();
        let (w, ks) = (paper_w(), paper_kernels());
        let k = assemble_k(&layout, &w, &ks).unwrap().entries;
        assert_eq!(k.nrows(), 6);
        let pts = layout.points();
        for (r, (ti, xi)) in pts.iter().enumerate() {
            for (c, (tj, xj)) in pts.iter().enumerate() {
                assert_eq!(k[(r, c)], cross_cov(&w, &ks, *ti, *tj, xi, xj).unwrap());
            }
        }
    }

    #[test]
    fn layout_canonical_order_and_roundtrip() {
        let a = TaskLayout::new(vec![
            (3, TaskKind::Classification, vec![vec![1.0]]),
            (2, TaskKind::Regression, vec![vec![2.0], vec![3.0]]),
            (0, TaskKind::Classification, vec![vec![4.0]]),
        ])
        .unwrap();
        let ids: Vec<usize> = a.blocks().iter().map(|b| b.task_id).collect();
        assert_eq!(ids, vec![2, 0, 3]);
        for i in 0..a.len() {
            let (b, s) = a.locate(i).unwrap();
            assert_eq!(a.index(b, s), Some(i));
        }
        assert!(a.locate(a.len()).is_none());
        let b = TaskLayout::new(vec![
            (0, TaskKind::Classification, vec![vec![4.0]]),
            (2, TaskKind::Regression, vec![vec![2.0], vec![3.0]]),
            (3, TaskKind::Classification, vec![vec![1.0]]),
        ])
        .unwrap();
        assert_eq!(a, b);
        assert!(TaskLayout::new(vec![
            (0, TaskKind::Regression, vec![vec![1.0]]),
            (0, TaskKind::Classification, vec![vec![1.0]]),
        ])
        .is_err());
    }

    #[test]
    fn quadratic_form_nonnegative() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(0.0..100.0)]).collect();
        let layout = TaskLayout::new(vec![
            (0, TaskKind::Regression, xs.clone()),
            (1, TaskKind::Classification, xs),
        ])
        .unwrap();
        for _ in 0..100 {
            let w = MixingWeights::from_rows(&[
                vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
                vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)],
            ])
            .unwrap();
            let k = assemble_k(&layout, &w, &paper_kernels()).unwrap().entries;
            let v = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
            let q = (v.transpose() * &k * &v)[(0, 0)];
            assert!(q >= -1e-9, "{q}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let layout = TaskLayout::new(vec![(0, TaskKind::Regression, vec![vec![0.0], vec![5.0]])]).unwrap();
        let w = MixingWeights::identity(1);
        let k = &paper_kernels()[..1];
        let a = sample_mogp(&layout, &w, k, 11, DEFAULT_JITTER).unwrap();
        let b = sample_mogp(&layout, &w, k, 11, DEFAULT_JITTER).unwrap();
        assert_eq!(a, b);
        let c = sample_mogp(&layout, &w, k, 12, DEFAULT_JITTER).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sample_moments() {
        let k1 = vec![BasisKernel::new(KernelSpec::rbf(1.0, 1.0).unwrap(), FeatureMap::identity(1))];
        let layout = TaskLayout::new(vec![(0, TaskKind::Regression, vec![vec![0.0]])]).unwrap();
        let w = MixingWeights::identity(1);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|s| sample_mogp(&layout, &w, &k1, s, 1e-12).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((0.94..=1.06).contains(&var), "{var}");

        let layout = TaskLayout::new(vec![
            (0, TaskKind::Regression, vec![vec![5.0]]),
            (1, TaskKind::Classification, vec![vec![5.0]]),
        ])
        .unwrap();
        let (w, ks) = (paper_w(), paper_kernels());
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|s| {
                let f = sample_mogp(&layout, &w, &ks, s, 1e-12).unwrap();
                (f[0], f[1])
            })
            .collect();
        let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
        let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let cov = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / (n - 1) as f64;
        assert!((cov - 0.72).abs() < 0.05, "{cov}");
    }
}
