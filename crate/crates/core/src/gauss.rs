//! Gaussian prior, noise model and posterior updates.
//!
//! A [`GaussianBelief`] carries the mean and covariance of the current
//! (prior or posterior) absorption distribution, optionally together with
//! its precision matrix. Updates never invert an `n × n` matrix: the
//! covariance follows the Woodbury form and the precision is updated
//! additively.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ImageGrid, ProjectionOperator};

/// Jitter levels tried by [`chol_spd`], relative to `tr(M) / dim`.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-10, 1e-8];

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Pixelwise prior standard deviation `γ`.
    pub std_dev: f64,
    /// Correlation length `ℓ`, in domain units.
    pub corr_length: f64,
    /// Noise standard deviation `σ`.
    pub noise_std: f64,
}

impl HyperParams {
    pub fn new(std_dev: f64, corr_length: f64, noise_std: f64) -> Result<Self> {
        let hp = Self {
            std_dev,
            corr_length,
            noise_std,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prior.gamma", self.std_dev),
            ("prior.ell", self.corr_length),
            ("noise.sigma", self.noise_std),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(name, format!("must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn with_corr_length(self, corr_length: f64) -> Self {
        Self {
            corr_length,
            ..self
        }
    }
}

/// Lower Cholesky factor `L` with `L Lᵀ = M + jitter·I`.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Diagonal shift that was needed for the factorization to succeed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.chol.l_dirty()[(i, i)]
    }

    /// `log det (L Lᵀ)`, summed in the log domain.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.diag(i).ln()).sum::<f64>()
    }

    /// `det (L Lᵀ)` as a plain product of the diagonal; underflows easily.
    pub fn det_naive(&self) -> f64 {
        (0..self.dim()).map(|i| self.diag(i)).product::<f64>().powi(2)
    }

    /// Overwrite `b` with `L⁻¹ b`.
    pub fn solve_lower_mut(&self, b: &mut DMatrix<f64>) {
        let ok = self.chol.l_dirty().solve_lower_triangular_mut(b);
        debug_assert!(ok);
    }

    pub fn solve_lower_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        let ok = self.chol.l_dirty().solve_lower_triangular_mut(&mut x);
        debug_assert!(ok);
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let mut inv = self.chol.inverse();
        symmetrize(&mut inv);
        inv
    }
}

/// Cholesky factorization with escalating diagonal jitter; see
/// [`JITTER_LADDER`].
pub fn chol_spd(m: &DMatrix<f64>) -> Result<SpdFactor> {
    let dim = m.nrows();
    if m.ncols() != dim {
        return Err(Error::DimensionMismatch {
            what: "square matrix",
            expected: dim,
            found: m.ncols(),
        });
    }
    if dim == 0 {
        let chol = Cholesky::new(DMatrix::zeros(0, 0)).expect("empty factorization");
        return Ok(SpdFactor { chol, jitter: 0.0 });
    }
    let scale = m.trace() / dim as f64;
    let mut last = 0.0;
    for rel in JITTER_LADDER {
        let jitter = rel * scale;
        last = jitter;
        if jitter.is_nan() || jitter < 0.0 {
            break;
        }
        let mut work = m.clone();
        if jitter > 0.0 {
            for i in 0..dim {
                work[(i, i)] += jitter;
            }
        }
        if let Some(chol) = Cholesky::new(work) {
            if (0..dim).all(|i| chol.l_dirty()[(i, i)] > 0.0) {
                return Ok(SpdFactor { chol, jitter });
            }
        }
    }
    Err(Error::NotPositiveDefinite { dim, jitter: last })
}

/// Replace `m` by `(m + mᵀ) / 2`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Values `exp(-(k h)² / (2ℓ²))` for pixel lags `k = 0..N`.
pub fn se_lag_table(grid: &ImageGrid, corr_length: f64) -> Vec<f64> {
    let h = grid.pixel_width();
    (0..grid.side())
        .map(|k| {
            let d = k as f64 * h;
            (-(d * d) / (2.0 * corr_length * corr_length)).exp()
        })
        .collect()
}

/// One-dimensional factor of the squared-exponential covariance,
/// `K[a, b] = exp(-((a - b) h)² / (2ℓ²))`. The full prior is
/// `γ² · (K ⊗ K)` in row-major pixel order.
pub fn se_kernel_1d(grid: &ImageGrid, corr_length: f64) -> DMatrix<f64> {
    let table = se_lag_table(grid, corr_length);
    let n = grid.side();
    DMatrix::from_fn(n, n, |a, b| table[a.abs_diff(b)])
}

/// Squared-exponential prior covariance over pixel centers.
pub fn build_prior_cov(grid: &ImageGrid, hp: &HyperParams) -> DMatrix<f64> {
    let table = se_lag_table(grid, hp.corr_length);
    let g2 = hp.std_dev * hp.std_dev;
    let n = grid.pixel_count();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let (rj, cj) = grid.row_col(j);
        for i in 0..n {
            let (ri, ci) = grid.row_col(i);
            out[(i, j)] = g2 * table[ri.abs_diff(rj)] * table[ci.abs_diff(cj)];
        }
    }
    out
}

/// Covariance of the additive measurement noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    cov: DMatrix<f64>,
    white_std: Option<f64>,
}

impl NoiseModel {
    /// Independent noise with common standard deviation `sigma`.
    pub fn white(dim: usize, sigma: f64) -> Self {
        Self {
            cov: DMatrix::from_diagonal_element(dim, dim, sigma * sigma),
            white_std: Some(sigma),
        }
    }

    pub fn full(cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() {
            return Err(Error::DimensionMismatch {
                what: "noise covariance",
                expected: cov.nrows(),
                found: cov.ncols(),
            });
        }
        Ok(Self {
            cov,
            white_std: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn white_std(&self) -> Option<f64> {
        self.white_std
    }

    /// Principal submatrix for the listed (active) rays.
    pub fn restrict(&self, active: &[usize]) -> Self {
        if let Some(sigma) = self.white_std {
            return Self::white(active.len(), sigma);
        }
        let cov = DMatrix::from_fn(active.len(), active.len(), |i, j| self.cov[(active[i], active[j])]);
        Self {
            cov,
            white_std: None,
        }
    }

    /// Restriction to the active rays of `op`.
    pub fn for_operator(&self, op: &ProjectionOperator) -> Self {
        self.restrict(op.active_rays())
    }

    pub fn block_diagonal(parts: &[NoiseModel]) -> Self {
        let dim = parts.iter().map(|p| p.dim()).sum();
        let common = parts.first().and_then(|p| p.white_std);
        if parts.iter().all(|p| p.white_std.is_some() && p.white_std == common) {
            return Self::white(dim, common.unwrap_or(1.0));
        }
        let mut cov = DMatrix::zeros(dim, dim);
        let mut at = 0;
        for p in parts {
            cov.view_mut((at, at), (p.dim(), p.dim())).copy_from(&p.cov);
            at += p.dim();
        }
        Self {
            cov,
            white_std: None,
        }
    }

    pub fn log_det(&self) -> Result<f64> {
        match self.white_std {
            Some(sigma) => Ok(self.dim() as f64 * 2.0 * sigma.ln()),
            None => Ok(chol_spd(&self.cov)?.log_det()),
        }
    }

    pub fn add_to(&self, s: &mut DMatrix<f64>) {
        match self.white_std {
            Some(sigma) => {
                for i in 0..s.nrows() {
                    s[(i, i)] += sigma * sigma;
                }
            }
            None => *s += &self.cov,
        }
    }
}

/// Whether a belief keeps its precision matrix alongside the covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum PrecisionTracking {
    #[default]
    Track,
    Skip,
}

/// Mean and covariance (plus optional precision) of the absorption.
#[derive(Debug, Clone)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    prec: Option<DMatrix<f64>>,
    generation: usize,
    stamp: u64,
    prior_jitter: f64,
    /// `log det Γ`, filled on first use and carried through updates.
    log_det: OnceLock<f64>,
}

/// Intermediate products of one Woodbury update; reused by the simulation
/// studies to update many means with the same design.
#[derive(Debug, Clone)]
pub struct WoodburyStep {
    /// Factor of `R Γ Rᵀ + Γ_noise`.
    pub innovation: SpdFactor,
    /// `L⁻¹ R Γ`, `m × n`.
    pub gain_rows: DMatrix<f64>,
}

impl WoodburyStep {
    pub fn new(cov: &DMatrix<f64>, op: &ProjectionOperator, noise: &NoiseModel) -> Result<Self> {
        if noise.dim() != op.m_active() {
            return Err(Error::DimensionMismatch {
                what: "noise covariance",
                expected: op.m_active(),
                found: noise.dim(),
            });
        }
        let g = op.sym_times_transpose(cov);
        let mut s = op.times_dense(&g);
        symmetrize(&mut s);
        noise.add_to(&mut s);
        let innovation = chol_spd(&s)?;
        let mut k = g.transpose();
        innovation.solve_lower_mut(&mut k);
        Ok(Self {
            innovation,
            gain_rows: k,
        })
    }

    /// Mean correction `Γ Rᵀ S⁻¹ (y − R x)`.
    pub fn mean_correction(&self, op: &ProjectionOperator, mean: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let resid = y - op.apply(mean);
        let w = self.innovation.solve_lower_vec(&resid);
        self.gain_rows.tr_mul(&w)
    }

    /// `Γ − Kᵀ K`, symmetrized.
    pub fn downdate(&self, cov: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = cov.clone();
        out.gemm_tr(-1.0, &self.gain_rows, &self.gain_rows, 1.0);
        symmetrize(&mut out);
        out
    }
}

impl GaussianBelief {
    /// Prior belief. With [`PrecisionTracking::Track`] the covariance is
    /// factored once; if jitter is needed it is folded into the stored
    /// covariance so that covariance and precision stay mutual inverses.
    pub fn from_prior(mean: DVector<f64>, cov: DMatrix<f64>, tracking: PrecisionTracking) -> Result<Self> {
        if mean.len() != cov.nrows() || cov.nrows() != cov.ncols() {
            return Err(Error::DimensionMismatch {
                what: "prior mean/covariance",
                expected: cov.nrows(),
                found: mean.len(),
            });
        }
        let mut cov = cov;
        let mut prior_jitter = 0.0;
        let log_det = OnceLock::new();
        let prec = match tracking {
            PrecisionTracking::Skip => None,
            PrecisionTracking::Track => {
                let f = chol_spd(&cov)?;
                prior_jitter = f.jitter();
                let _ = log_det.set(f.log_det());
                if prior_jitter > 0.0 {
                    for i in 0..cov.nrows() {
                        cov[(i, i)] += prior_jitter;
                    }
                }
                Some(f.inverse())
            }
        };
        Ok(Self {
            mean,
            cov,
            prec,
            generation: 0,
            stamp: fresh_stamp(),
            prior_jitter,
            log_det,
        })
    }

    /// Squared-exponential prior on `grid` with constant mean.
    pub fn se_prior(grid: &ImageGrid, hp: &HyperParams, mean: f64, tracking: PrecisionTracking) -> Result<Self> {
        let cov = build_prior_cov(grid, hp);
        Self::from_prior(DVector::from_element(grid.pixel_count(), mean), cov, tracking)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn prec(&self) -> Option<&DMatrix<f64>> {
        self.prec.as_ref()
    }

    pub fn generation(&self) -> usize {
        self.generation
    }

    /// Identity of this particular belief value; changes on every update.
    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn prior_jitter(&self) -> f64 {
        self.prior_jitter
    }

    /// Square roots of the covariance diagonal.
    pub fn std_map(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.cov[(i, i)].max(0.0).sqrt()).collect()
    }

    pub fn cov_diagonal(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.cov[(i, i)]).collect()
    }

    /// `log det Γ`. Computed by factorization the first time it is needed
    /// and then propagated through updates by the determinant lemma
    /// `det Γ_post = det Γ · det Γ_noise / det(R Γ Rᵀ + Γ_noise)`.
    pub fn log_det(&self) -> Result<f64> {
        if let Some(v) = self.log_det.get() {
            return Ok(*v);
        }
        let v = chol_spd(&self.cov)?.log_det();
        Ok(*self.log_det.get_or_init(|| v))
    }

    /// Posterior given data `y` for the projection `op` (Woodbury form).
    pub fn posterior_update_woodbury(&self, op: &ProjectionOperator, noise: &NoiseModel, y: &DVector<f64>) -> Result<Self> {
        if y.len() != op.m_active() {
            return Err(Error::DimensionMismatch {
                what: "measurement vector",
                expected: op.m_active(),
                found: y.len(),
            });
        }
        self.update(op, noise, Some(y))
    }

    /// Posterior covariance for `op` without data; the mean is kept.
    pub fn absorb_design(&self, op: &ProjectionOperator, noise: &NoiseModel) -> Result<Self> {
        self.update(op, noise, None)
    }

    fn update(&self, op: &ProjectionOperator, noise: &NoiseModel, y: Option<&DVector<f64>>) -> Result<Self> {
        let prec = match &self.prec {
            Some(p) => Some(posterior_precision_update(p, op, noise)?),
            None => None,
        };
        if op.is_empty() {
            return Ok(Self {
                prec,
                generation: self.generation + 1,
                stamp: fresh_stamp(),
                ..self.clone()
            });
        }
        let step = WoodburyStep::new(&self.cov, op, noise)?;
        let mean = match y {
            Some(y) => &self.mean + step.mean_correction(op, &self.mean, y),
            None => self.mean.clone(),
        };
        let log_det = OnceLock::new();
        if let Some(ld) = self.log_det.get() {
            let _ = log_det.set(ld + noise.log_det()? - step.innovation.log_det());
        }
        Ok(Self {
            mean,
            cov: step.downdate(&self.cov),
            prec,
            generation: self.generation + 1,
            stamp: fresh_stamp(),
            prior_jitter: self.prior_jitter,
            log_det,
        })
    }

    /// Same distribution with a different mean (used when rebuilding).
    pub(crate) fn with_generation(mut self, generation: usize) -> Self {
        self.generation = generation;
        self
    }
}

/// `prec + Rᵀ Γ_noise⁻¹ R`.
pub fn posterior_precision_update(prec: &DMatrix<f64>, op: &ProjectionOperator, noise: &NoiseModel) -> Result<DMatrix<f64>> {
    if noise.dim() != op.m_active() {
        return Err(Error::DimensionMismatch {
            what: "noise covariance",
            expected: op.m_active(),
            found: noise.dim(),
        });
    }
    if prec.nrows() != op.pixel_count() {
        return Err(Error::DimensionMismatch {
            what: "precision matrix",
            expected: op.pixel_count(),
            found: prec.nrows(),
        });
    }
    let mut out = prec.clone();
    if op.is_empty() {
        return Ok(out);
    }
    match noise.white_std() {
        Some(sigma) => {
            let w = 1.0 / (sigma * sigma);
            for row in op.rows() {
                for (a, va) in row.iter() {
                    for (b, vb) in row.iter() {
                        out[(a, b)] += w * va * vb;
                    }
                }
            }
        }
        None => {
            let f = chol_spd(noise.cov())?;
            let mut w = op.to_dense();
            f.solve_lower_mut(&mut w);
            out.gemm_tr(1.0, &w, &w, 1.0);
            symmetrize(&mut out);
        }
    }
    Ok(out)
}
