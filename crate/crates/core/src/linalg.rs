//! Dense factorization helpers shared by the inference and ELBO code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

pub const DEFAULT_JITTER: f64 = 1e-6;
pub const JITTER_ESCALATIONS: u32 = 6;

/// A symmetric kernel matrix together with the diagonal jitter that has been
/// folded into it (zero until factorized).
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub jitter_applied: f64,
}

impl GramMatrix {
    pub fn new(entries: DMatrix<f64>) -> Self {
        Self {
            entries,
            jitter_applied: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }
}

/// Cholesky factor of `matrix + jitter * I`. The jittered matrix is kept so
/// that every consumer sees the same covariance the factor describes.
#[derive(Clone, Debug)]
pub struct Factorized {
    jittered: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl Factorized {
    pub fn dim(&self) -> usize {
        self.jittered.nrows()
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// The covariance actually factorized (input plus jitter on the diagonal).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.jittered
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ b` for the lower factor `L`.
    pub fn half_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn into_gram(self) -> GramMatrix {
        GramMatrix {
            entries: self.jittered,
            jitter_applied: self.jitter,
        }
    }
}

/// Factorizes `g + jitter * I`, starting at `base_jitter` and multiplying by
/// ten on each failure for at most [`JITTER_ESCALATIONS`] escalations.
pub fn stabilized_cholesky(g: &GramMatrix, base_jitter: f64, name: &str) -> Result<Factorized> {
    factorize(&g.entries, base_jitter, name)
}

pub(crate) fn factorize(m: &DMatrix<f64>, base_jitter: f64, name: &str) -> Result<Factorized> {
    if !m.is_square() {
        return Err(Error::input(format!(
            "matrix `{name}` is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    if !(base_jitter > 0.0 && base_jitter.is_finite()) {
        return Err(Error::input(format!("base jitter must be positive, got {base_jitter}")));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("matrix `{name}` has non-finite entries")));
    }
    let mut jitter = base_jitter;
    for attempt in 0..=JITTER_ESCALATIONS {
        if attempt > 0 {
            jitter *= 10.0;
        }
        let mut jittered = m.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered.clone()) {
            if attempt > 0 {
                log::debug!("matrix `{name}` needed jitter {jitter:e}");
            }
            return Ok(Factorized {
                jittered,
                chol,
                jitter,
            });
        }
    }
    Err(Error::Singular {
        matrix: name.to_string(),
        jitter,
    })
}

/// Plain Cholesky without jitter, for matrices that must already be PD
/// (posterior covariances).
pub(crate) fn strict_cholesky(m: &DMatrix<f64>, name: &str) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("matrix `{name}` has non-finite entries")));
    }
    Cholesky::new(m.clone()).ok_or_else(|| Error::Singular {
        matrix: name.to_string(),
        jitter: 0.0,
    })
}

pub(crate) fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    let l = chol.l_dirty();
    2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = s;
            m[(j, i)] = s;
        }
    }
}

/// Site precision in a Gaussian conjugate update.
pub(crate) enum SitePrecision<'a> {
    Diagonal(&'a DVector<f64>),
    Dense(&'a DMatrix<f64>),
}

/// Posterior of `N(0, K)` combined with Gaussian sites of precision `P` and
/// natural mean `b`: `Σ = (P + K⁻¹)⁻¹`, `m = Σ b`.
///
/// With `K = L Lᵀ` and `I + Lᵀ P L = R Rᵀ`, `Σ = S Sᵀ` where `S = L R⁻ᵀ`. No
/// inverse of `K` or `P` is formed and `Σ` is PSD by construction.
pub(crate) fn gaussian_site_update(
    prior: &Factorized,
    precision: SitePrecision<'_>,
    b: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = prior.dim();
    let l = prior.l();
    let inner = match precision {
        SitePrecision::Diagonal(p) => {
            let mut scaled = l.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row *= p[i].max(0.0).sqrt();
            }
            scaled.tr_mul(&scaled)
        }
        SitePrecision::Dense(p) => l.tr_mul(&(p * &l)),
    };
    let mut a = DMatrix::<f64>::identity(n, n) + inner;
    symmetrize(&mut a);
    let r = strict_cholesky(&a, "I + Lᵀ H L")?;
    let st = r
        .l_dirty()
        .solve_lower_triangular(&l.transpose())
        .ok_or_else(|| Error::numeric("triangular solve failed"))?;
    let mut sigma = st.tr_mul(&st);
    symmetrize(&mut sigma);
    let mean = st.tr_mul(&(&st * b));
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("posterior mean is not finite"));
    }
    Ok((mean, sigma))
}
