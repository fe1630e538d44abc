//! Maximum-likelihood estimation of the prior correlation length from
//! projection data, and the loop that re-estimates it after every
//! measurement.
//!
//! For projection `i` the data are Gaussian with covariance
//! `Γ_ms(ℓ) = Γ_noise + R_i Γ₀(ℓ) R_iᵀ`, so each projection contributes
//! `−½ (log det Γ_ms + rᵢᵀ Γ_ms⁻¹ rᵢ)` with `rᵢ = yᵢ − R_i x₀`.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{optimize_next, DesignProblem, RoundOutcome};
use crate::error::{Error, Result};
use crate::gauss::{chol_spd, GaussianBelief, HyperParams, NoiseModel, PrecisionTracking};
use crate::geometry::{ImageGrid, ProjectionOperator};
use crate::targets::{Criterion, RoiMask, TargetEvaluator};

/// Tuning of the golden-section + Newton search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSettings {
    pub search_lo: f64,
    pub search_hi: f64,
    pub golden_steps: usize,
    pub newton_tol: f64,
    pub newton_max_step: f64,
    pub max_newton_iters: usize,
    pub guard_lo: f64,
    pub guard_hi: f64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            search_lo: 0.01,
            search_hi: 0.2,
            golden_steps: 10,
            newton_tol: 1e-4,
            newton_max_step: 0.01,
            max_newton_iters: 200,
            guard_lo: 0.005,
            guard_hi: 0.5,
        }
    }
}

/// Log-likelihood with its first two derivatives in `ℓ`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LogLik {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

impl std::ops::AddAssign for LogLik {
    fn add_assign(&mut self, o: Self) {
        self.value += o.value;
        self.d1 += o.d1;
        self.d2 += o.d2;
    }
}

/// Kernel and its `ℓ`-derivatives tabulated over pixel lags.
struct LagTables {
    side: usize,
    k: Vec<f64>,
    dk: Vec<f64>,
    d2k: Vec<f64>,
}

impl LagTables {
    fn new(grid: &ImageGrid, gamma: f64, ell: f64) -> Self {
        let side = grid.side();
        let h = grid.pixel_width();
        let g2 = gamma * gamma;
        let (l2, l3, l4, l6) = (ell * ell, ell.powi(3), ell.powi(4), ell.powi(6));
        let mut k = Vec::with_capacity(side * side);
        let mut dk = Vec::with_capacity(side * side);
        let mut d2k = Vec::with_capacity(side * side);
        for dr in 0..side {
            for dc in 0..side {
                let d2 = ((dr * dr + dc * dc) as f64) * h * h;
                let v = g2 * (-d2 / (2.0 * l2)).exp();
                k.push(v);
                dk.push(v * d2 / l3);
                d2k.push(v * (d2 * d2 / l6 - 3.0 * d2 / l4));
            }
        }
        Self { side, k, dk, d2k }
    }
}

/// One stored projection with its residual against the prior mean.
#[derive(Debug, Clone)]
struct Entry {
    rows: Vec<Vec<(usize, usize, f64)>>,
    noise: NoiseModel,
    residual: DVector<f64>,
}

/// Projections and data seen so far, with per-`ℓ` cached contributions.
#[derive(Debug, Clone)]
pub struct LikelihoodState {
    grid: ImageGrid,
    std_dev: f64,
    entries: Vec<Entry>,
    cache: HashMap<(i64, usize), LogLik>,
}

const CACHE_LIMIT: usize = 1 << 16;

fn cache_key(ell: f64) -> i64 {
    (ell * 1e6).round() as i64
}

impl LikelihoodState {
    pub fn new(grid: ImageGrid, std_dev: f64) -> Self {
        Self {
            grid,
            std_dev,
            entries: Vec::new(),
            cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds projection `op` with data `y`; `prior_mean` is `x₀`.
    pub fn push(&mut self, op: &ProjectionOperator, noise: NoiseModel, y: &DVector<f64>, prior_mean: &DVector<f64>) -> Result<()> {
        if y.len() != op.m_active() || noise.dim() != op.m_active() {
            return Err(Error::DimensionMismatch {
                what: "measurement vector",
                expected: op.m_active(),
                found: y.len(),
            });
        }
        let rows = op
            .rows()
            .iter()
            .map(|row| {
                row.iter()
                    .map(|(i, v)| {
                        let (r, c) = self.grid.row_col(i);
                        (r, c, v)
                    })
                    .collect()
            })
            .collect();
        self.entries.push(Entry {
            rows,
            noise,
            residual: y - op.apply(prior_mean),
        });
        Ok(())
    }

    fn projection_term(&self, e: &Entry, t: &LagTables) -> Result<LogLik> {
        let m = e.rows.len();
        if m == 0 {
            return Ok(LogLik::default());
        }
        let mut g = DMatrix::zeros(m, m);
        let mut g1 = DMatrix::zeros(m, m);
        let mut g2 = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..=a {
                let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
                for &(ra, ca, va) in &e.rows[a] {
                    for &(rb, cb, vb) in &e.rows[b] {
                        let idx = ra.abs_diff(rb) * t.side + ca.abs_diff(cb);
                        let w = va * vb;
                        s0 += w * t.k[idx];
                        s1 += w * t.dk[idx];
                        s2 += w * t.d2k[idx];
                    }
                }
                g[(a, b)] = s0;
                g[(b, a)] = s0;
                g1[(a, b)] = s1;
                g1[(b, a)] = s1;
                g2[(a, b)] = s2;
                g2[(b, a)] = s2;
            }
        }
        e.noise.add_to(&mut g);
        let f = chol_spd(&g)?;
        let inv = f.inverse();
        let alpha = f.solve_vec(&e.residual);
        let p1 = &inv * &g1;
        let m1a = &g1 * &alpha;
        let value = -0.5 * (f.log_det() + e.residual.dot(&alpha));
        let d1 = -0.5 * p1.trace() + 0.5 * alpha.dot(&m1a);
        let tr2 = (&inv * &g2).trace();
        let tr11 = (&p1 * &p1).trace();
        let d2 = -0.5 * (tr2 - tr11) + 0.5 * (alpha.dot(&(&g2 * &alpha)) - 2.0 * m1a.dot(&(&inv * &m1a)));
        Ok(LogLik { value, d1, d2 })
    }

    /// Summed log-likelihood and derivatives at `ell`.
    pub fn evaluate(&mut self, ell: f64) -> Result<LogLik> {
        let key = cache_key(ell);
        let mut total = LogLik::default();
        let mut tables = None;
        for i in 0..self.entries.len() {
            if let Some(v) = self.cache.get(&(key, i)) {
                total += *v;
                continue;
            }
            let t = tables.get_or_insert_with(|| LagTables::new(&self.grid, self.std_dev, ell));
            let v = self.projection_term(&self.entries[i], t)?;
            if self.cache.len() >= CACHE_LIMIT {
                self.cache.clear();
            }
            self.cache.insert((key, i), v);
            total += v;
        }
        Ok(total)
    }

    /// Maximizes the log-likelihood. Without `prev`, golden-section steps on
    /// the search interval precede Newton; with `prev`, Newton starts there.
    pub fn estimate(&mut self, prev: Option<f64>, s: &EstimatorSettings) -> Result<f64> {
        if self.entries.is_empty() {
            return Err(Error::config("estimate", "at least one measurement is required"));
        }
        let start = match prev {
            Some(p) => p,
            None => self.golden_section(s)?,
        };
        self.newton(start, s)
    }

    fn golden_section(&mut self, s: &EstimatorSettings) -> Result<f64> {
        let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
        let (mut a, mut b) = (s.search_lo, s.search_hi);
        let mut c = b - inv_phi * (b - a);
        let mut d = a + inv_phi * (b - a);
        let mut fc = self.evaluate(c)?.value;
        let mut fd = self.evaluate(d)?.value;
        for _ in 0..s.golden_steps {
            if fc >= fd {
                b = d;
                d = c;
                fd = fc;
                c = b - inv_phi * (b - a);
                fc = self.evaluate(c)?.value;
            } else {
                a = c;
                c = d;
                fc = fd;
                d = a + inv_phi * (b - a);
                fd = self.evaluate(d)?.value;
            }
        }
        Ok(0.5 * (a + b))
    }

    fn newton(&mut self, start: f64, s: &EstimatorSettings) -> Result<f64> {
        let mut ell = start;
        for _ in 0..s.max_newton_iters {
            let ll = self.evaluate(ell)?;
            // Outside the concave region the Newton step points downhill;
            // take the largest allowed step uphill instead.
            let raw = if ll.d2 < 0.0 { -ll.d1 / ll.d2 } else { s.newton_max_step * ll.d1.signum() };
            let step = raw.clamp(-s.newton_max_step, s.newton_max_step);
            ell += step;
            if !(ell >= s.guard_lo && ell <= s.guard_hi) {
                return Err(Error::Divergence { ell });
            }
            if step.abs() < s.newton_tol {
                return Ok(ell);
            }
        }
        Ok(ell)
    }
}

/// Batch posterior for prior `Γ₀(ℓ)` and all projections so far.
pub fn rebuild_posterior(
    grid: &ImageGrid,
    hp: &HyperParams,
    prior_mean: &DVector<f64>,
    ops: &[ProjectionOperator],
    noises: &[NoiseModel],
    data: &[DVector<f64>],
    tracking: PrecisionTracking,
) -> Result<GaussianBelief> {
    if ops.len() != data.len() || ops.len() != noises.len() {
        return Err(Error::DimensionMismatch {
            what: "designs and data",
            expected: ops.len(),
            found: data.len(),
        });
    }
    let cov = crate::gauss::build_prior_cov(grid, hp);
    let prior = GaussianBelief::from_prior(prior_mean.clone(), cov, tracking)?;
    if ops.is_empty() {
        return Ok(prior);
    }
    let stacked = ProjectionOperator::stack(ops.iter());
    let noise = NoiseModel::block_diagonal(noises);
    let y = DVector::from_iterator(stacked.m_active(), data.iter().flat_map(|d| d.iter().copied()));
    Ok(prior.posterior_update_woodbury(&stacked, &noise, &y)?.with_generation(ops.len()))
}

/// One round of the hyperparameter-adaptive loop.
#[derive(Debug, Clone)]
pub struct AdaptiveRound {
    pub outcome: RoundOutcome,
    pub data: DVector<f64>,
    pub ell: f64,
}

#[derive(Debug, Clone)]
pub struct AdaptiveRun {
    pub rounds: Vec<AdaptiveRound>,
    pub belief: GaussianBelief,
}

impl AdaptiveRun {
    pub fn hyper_trace(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.ell).collect()
    }
}

/// Sequential design with the correlation length re-estimated after every
/// measurement. `measure` returns the data of the chosen projection.
#[allow(clippy::too_many_arguments)]
pub fn run_adaptive(
    problem: &DesignProblem,
    hp0: &HyperParams,
    prior_mean: &DVector<f64>,
    roi: &RoiMask,
    criterion: Criterion,
    rounds: usize,
    settings: &EstimatorSettings,
    tracking: PrecisionTracking,
    mut measure: impl FnMut(usize, &ProjectionOperator) -> Result<DVector<f64>>,
    mut after_round: impl FnMut(usize, &AdaptiveRound, &GaussianBelief),
) -> Result<AdaptiveRun> {
    let grid = problem.grid;
    let mut belief = GaussianBelief::from_prior(prior_mean.clone(), crate::gauss::build_prior_cov(&grid, hp0), tracking)?;
    let mut state = LikelihoodState::new(grid, hp0.std_dev);
    let mut ops = Vec::new();
    let mut noises = Vec::new();
    let mut data = Vec::new();
    let mut out: Vec<AdaptiveRound> = Vec::with_capacity(rounds);
    for k in 0..rounds {
        let evaluator = TargetEvaluator::prepare(criterion, &belief, roi)?;
        let outcome = optimize_next(problem, &belief, roi, &evaluator)?;
        let op = problem.operator(outcome.point)?;
        let noise = problem.noise_for(&op);
        let y = measure(k, &op)?;
        state.push(&op, noise.clone(), &y, prior_mean)?;
        let prev = out.last().map(|r| r.ell);
        let ell = state.estimate(prev, settings)?;
        ops.push(op);
        noises.push(noise);
        data.push(y.clone());
        belief = rebuild_posterior(&grid, &hp0.with_corr_length(ell), prior_mean, &ops, &noises, &data, tracking)?;
        let round = AdaptiveRound { outcome, data: y, ell };
        after_round(k, &round, &belief);
        out.push(round);
    }
    Ok(AdaptiveRun { rounds: out, belief })
}
