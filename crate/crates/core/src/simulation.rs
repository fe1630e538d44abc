//! Synthetic targets and data, and the reconstruction-error studies that
//! compare design policies.
//!
//! All randomness comes from ChaCha streams derived from a study seed, so
//! every table is exactly repeatable regardless of thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{run_basic, DesignProblem};
use crate::error::{Error, Result};
use crate::gauss::{chol_spd, se_kernel_1d, GaussianBelief, HyperParams, NoiseModel, PrecisionTracking, WoodburyStep};
use crate::geometry::{DesignPoint, ImageGrid, ProjectionOperator};
use crate::likelihood::{run_adaptive, EstimatorSettings};
use crate::targets::{Criterion, RoiMask};

/// Deterministic generator for the pair `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vector(len: usize, rng: &mut impl Rng) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Draws `x = x₀ + L z` from a Gaussian.
#[derive(Debug, Clone)]
pub enum PriorSampler {
    /// Full Cholesky factor of the covariance.
    Dense { mean: DVector<f64>, factor: DMatrix<f64> },
    /// `γ (L₁ ⊗ L₁)` for the separable squared-exponential prior; a draw is
    /// `γ L₁ Z L₁ᵀ` with `Z` an `N × N` normal matrix.
    Separable {
        mean: DVector<f64>,
        gamma: f64,
        factor_1d: DMatrix<f64>,
    },
}

impl PriorSampler {
    pub fn from_belief(belief: &GaussianBelief) -> Result<Self> {
        Ok(PriorSampler::Dense {
            mean: belief.mean().clone(),
            factor: chol_spd(belief.cov())?.l(),
        })
    }

    pub fn separable(grid: &ImageGrid, hp: &HyperParams, mean: f64) -> Result<Self> {
        let k1 = se_kernel_1d(grid, hp.corr_length);
        Ok(PriorSampler::Separable {
            mean: DVector::from_element(grid.pixel_count(), mean),
            gamma: hp.std_dev,
            factor_1d: chol_spd(&k1)?.l(),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            PriorSampler::Dense { mean, .. } | PriorSampler::Separable { mean, .. } => mean.len(),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        match self {
            PriorSampler::Dense { mean, factor } => mean + factor * normal_vector(mean.len(), rng),
            PriorSampler::Separable { mean, gamma, factor_1d } => {
                let side = factor_1d.nrows();
                // Row-major pixel order: z[row * N + col] = Z[row, col].
                let z = DMatrix::from_row_iterator(side, side, (0..side * side).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let x = factor_1d * z * factor_1d.transpose() * *gamma;
                mean + DVector::from_iterator(side * side, x.transpose().iter().copied())
            }
        }
    }

    pub fn sample_seeded(&self, seed: u64, stream: u64) -> DVector<f64> {
        self.sample(&mut stream_rng(seed, stream))
    }
}

/// `y = R x + ε` with `ε` drawn from `noise`.
pub fn simulate_measurement(op: &ProjectionOperator, x_true: &DVector<f64>, noise: &NoiseModel, rng: &mut impl Rng) -> Result<DVector<f64>> {
    if noise.dim() != op.m_active() || x_true.len() != op.pixel_count() {
        return Err(Error::DimensionMismatch {
            what: "simulated measurement",
            expected: op.m_active(),
            found: noise.dim(),
        });
    }
    let clean = op.apply(x_true);
    let z = normal_vector(op.m_active(), rng);
    Ok(match noise.white_std() {
        Some(sigma) => clean + z * sigma,
        None => clean + chol_spd(noise.cov())?.l() * z,
    })
}

/// `‖a − b‖₂ / N`, the discrete counterpart of the `L²(D)` error.
pub fn scaled_l2_error(a: &DVector<f64>, b: &DVector<f64>, side: usize) -> f64 {
    (a - b).norm() / side as f64
}

/// Precomputed gains of a fixed design sequence, for updating many means.
#[derive(Debug, Clone)]
pub struct PolicyTrack {
    steps: Vec<(ProjectionOperator, NoiseModel, WoodburyStep)>,
}

impl PolicyTrack {
    pub fn build(problem: &DesignProblem, prior: &GaussianBelief, points: &[DesignPoint]) -> Result<Self> {
        let mut cov = prior.cov().clone();
        let mut steps = Vec::with_capacity(points.len());
        for (k, &p) in points.iter().enumerate() {
            let op = problem.operator(p)?;
            let noise = problem.noise_for(&op);
            let step = WoodburyStep::new(&cov, &op, &noise)?;
            if k + 1 < points.len() && !op.is_empty() {
                cov = step.downdate(&cov);
            }
            steps.push((op, noise, step));
        }
        Ok(Self { steps })
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Errors of the CM estimate after `0..=K` projections for one target.
    pub fn errors(&self, prior_mean: &DVector<f64>, x_true: &DVector<f64>, side: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        Ok(self.errors_and_estimate(prior_mean, x_true, side, rng)?.0)
    }

    /// As [`PolicyTrack::errors`], also returning the final CM estimate.
    pub fn errors_and_estimate(
        &self,
        prior_mean: &DVector<f64>,
        x_true: &DVector<f64>,
        side: usize,
        rng: &mut impl Rng,
    ) -> Result<(Vec<f64>, DVector<f64>)> {
        let mut mean = prior_mean.clone();
        let mut out = Vec::with_capacity(self.steps.len() + 1);
        out.push(scaled_l2_error(&mean, x_true, side));
        for (op, noise, step) in &self.steps {
            let y = simulate_measurement(op, x_true, noise, rng)?;
            if !op.is_empty() {
                mean += step.mean_correction(op, &mean, &y);
            }
            out.push(scaled_l2_error(&mean, x_true, side));
        }
        Ok((out, mean))
    }
}

/// How a policy produces its design sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PolicySpec {
    /// A precomputed sequence (e.g. A- or D-optimal).
    Fixed { name: String, points: Vec<DesignPoint> },
    /// Uniform random angles; offsets re-centered on the ROI when it is not
    /// the whole domain.
    Random { name: String },
}

impl PolicySpec {
    pub fn name(&self) -> &str {
        match self {
            PolicySpec::Fixed { name, .. } | PolicySpec::Random { name } => name,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySettings {
    /// Targets drawn from the prior.
    pub replications: usize,
    /// Random design sequences per random policy.
    pub random_sequences: usize,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for StudySettings {
    fn default() -> Self {
        Self {
            replications: 100,
            random_sequences: 100,
            rounds: 10,
            seed: 1,
        }
    }
}

/// One line of an error table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub policy: String,
    pub k: usize,
    pub mean_error: f64,
    pub std_error: f64,
}

/// Random sequence `s` of a random policy.
pub fn random_designs(problem: &DesignProblem, roi: &RoiMask, rounds: usize, seed: u64, sequence: u64) -> Vec<DesignPoint> {
    let mut rng = stream_rng(seed ^ 0x0005_eed0_fde5_16e5, sequence);
    let reach = problem.beam.max_offset();
    let centroid = roi.centroid(&problem.grid);
    (0..rounds)
        .map(|_| {
            let angle: f64 = rng.random_range(-90.0..90.0);
            let offset = if reach <= 0.0 {
                0.0
            } else if roi.is_full() {
                rng.random_range(-reach..=reach)
            } else {
                // Beam axis through the point of the admissible range closest
                // to the ROI centroid.
                let t = angle.to_radians();
                let s = -(centroid[0] - 0.5) * t.sin() + (centroid[1] - 0.5) * t.cos();
                s.clamp(-reach, reach)
            };
            DesignPoint::new(angle, offset)
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-target error curves of a fixed sequence: `replications × (K + 1)`.
fn curves(problem: &DesignProblem, prior: &GaussianBelief, sampler: &PriorSampler, track: &PolicyTrack, settings: &StudySettings, salt: u64) -> Result<Vec<Vec<f64>>> {
    let side = problem.grid.side();
    (0..settings.replications)
        .into_par_iter()
        .map(|t| {
            let x = sampler.sample_seeded(settings.seed, t as u64);
            let mut rng = stream_rng(settings.seed.wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)), t as u64);
            track.errors(prior.mean(), &x, side, &mut rng)
        })
        .collect()
}

/// Mean and standard deviation of the reconstruction error after `k`
/// projections, `k = 0..=K`, for every policy. Targets are shared across
/// policies. For random policies the mean over targets is taken per
/// sequence, and the table reports mean and spread over sequences.
pub fn run_error_study(
    problem: &DesignProblem,
    prior: &GaussianBelief,
    sampler: &PriorSampler,
    roi: &RoiMask,
    policies: &[PolicySpec],
    settings: &StudySettings,
) -> Result<Vec<ErrorRow>> {
    if settings.replications == 0 {
        return Err(Error::config("study.replications", "must be at least 1"));
    }
    if sampler.dim() != prior.dim() {
        return Err(Error::DimensionMismatch {
            what: "sampler dimension",
            expected: prior.dim(),
            found: sampler.dim(),
        });
    }
    let mut rows = Vec::new();
    for (pi, policy) in policies.iter().enumerate() {
        let salt = pi as u64 + 1;
        let per_k: Vec<Vec<f64>> = match policy {
            PolicySpec::Fixed { points, .. } => {
                let track = PolicyTrack::build(problem, prior, points)?;
                let c = curves(problem, prior, sampler, &track, settings, salt)?;
                transpose(&c)
            }
            PolicySpec::Random { .. } => {
                if settings.random_sequences == 0 {
                    return Err(Error::config("study.random_sequences", "must be at least 1"));
                }
                let seq_means: Vec<Vec<f64>> = (0..settings.random_sequences)
                    .map(|s| {
                        let points = random_designs(problem, roi, settings.rounds, settings.seed, s as u64);
                        let track = PolicyTrack::build(problem, prior, &points)?;
                        let c = curves(problem, prior, sampler, &track, settings, salt.wrapping_mul(1 << 20).wrapping_add(s as u64))?;
                        Ok(transpose(&c).iter().map(|v| mean_std(v).0).collect())
                    })
                    .collect::<Result<_>>()?;
                transpose(&seq_means)
            }
        };
        for (k, v) in per_k.iter().enumerate() {
            let (mean_error, std_error) = mean_std(v);
            rows.push(ErrorRow {
                policy: policy.name().to_string(),
                k,
                mean_error,
                std_error,
            });
        }
    }
    Ok(rows)
}

fn transpose(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let width = rows.first().map_or(0, |r| r.len());
    (0..width).map(|k| rows.iter().map(|r| r[k]).collect()).collect()
}

/// Settings of the correlation-length recovery study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperStudySettings {
    pub replications: usize,
    pub rounds: usize,
    /// True `ℓ` is drawn uniformly from this interval.
    pub ell_lo: f64,
    pub ell_hi: f64,
    /// Initial guess, also the fixed value of the comparison run.
    pub ell0: f64,
    pub seed: u64,
    pub estimator: EstimatorSettings,
    /// Final reconstructions are kept for this many leading replications.
    pub keep_maps: usize,
}

impl Default for HyperStudySettings {
    fn default() -> Self {
        Self {
            replications: 100,
            rounds: 10,
            ell_lo: 0.04,
            ell_hi: 0.06,
            ell0: 0.15,
            seed: 1,
            estimator: EstimatorSettings::default(),
            keep_maps: 0,
        }
    }
}

/// Truth and final reconstructions of one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedMaps {
    pub truth: Vec<f64>,
    pub estimated: Vec<f64>,
    pub fixed: Vec<f64>,
}

/// Per-replication results of the recovery study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperReplication {
    pub ell_true: f64,
    /// Estimate after each projection.
    pub trace: Vec<f64>,
    /// Errors with the estimated `ℓ`, after `0..=K` projections.
    pub errors_estimated: Vec<f64>,
    /// Errors with the fixed initial guess, after `0..=K` projections.
    pub errors_fixed: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maps: Option<PairedMaps>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperStudy {
    pub replications: Vec<HyperReplication>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperSummaryRow {
    pub k: usize,
    pub mean_signed_error: f64,
    pub std_signed_error: f64,
    pub mean_error_estimated: f64,
    pub mean_error_fixed: f64,
}

impl HyperStudy {
    pub fn summary(&self) -> Vec<HyperSummaryRow> {
        let k_max = self.replications.first().map_or(0, |r| r.trace.len());
        (1..=k_max)
            .map(|k| {
                let signed: Vec<f64> = self.replications.iter().map(|r| r.trace[k - 1] - r.ell_true).collect();
                let (mean_signed_error, std_signed_error) = mean_std(&signed);
                let est: Vec<f64> = self.replications.iter().map(|r| r.errors_estimated[k]).collect();
                let fix: Vec<f64> = self.replications.iter().map(|r| r.errors_fixed[k]).collect();
                HyperSummaryRow {
                    k,
                    mean_signed_error,
                    std_signed_error,
                    mean_error_estimated: mean_std(&est).0,
                    mean_error_fixed: mean_std(&fix).0,
                }
            })
            .collect()
    }
}

/// Draws a true `ℓ` and a target per replication, runs the adaptive loop
/// from `ℓ₀`, and compares with designs and reconstructions that keep `ℓ₀`.
pub fn run_hyper_study(problem: &DesignProblem, std_dev: f64, prior_mean: f64, roi: &RoiMask, criterion: Criterion, settings: &HyperStudySettings) -> Result<HyperStudy> {
    let grid = problem.grid;
    let sigma = problem.noise.white_std().unwrap_or(1.0);
    let hp0 = HyperParams::new(std_dev, settings.ell0, sigma)?;
    let x0 = DVector::from_element(grid.pixel_count(), prior_mean);
    let fixed_prior = GaussianBelief::se_prior(&grid, &hp0, prior_mean, PrecisionTracking::Skip)?;
    let fixed_points = run_basic(problem, &fixed_prior, roi, criterion, settings.rounds, |_, _| {})?.points();
    let fixed_track = PolicyTrack::build(problem, &fixed_prior, &fixed_points)?;
    let replications = (0..settings.replications)
        .into_par_iter()
        .map(|r| {
            let r = r as u64;
            let mut rng = stream_rng(settings.seed, 3 * r);
            let ell_true = rng.random_range(settings.ell_lo..settings.ell_hi);
            let sampler = PriorSampler::separable(&grid, &hp0.with_corr_length(ell_true), prior_mean)?;
            let x = sampler.sample(&mut rng);
            let mut noise_rng = stream_rng(settings.seed, 3 * r + 1);
            let mut errors_estimated = vec![scaled_l2_error(&x0, &x, grid.side())];
            let run = run_adaptive(
                problem,
                &hp0,
                &x0,
                roi,
                criterion,
                settings.rounds,
                &settings.estimator,
                PrecisionTracking::Skip,
                |_, op| simulate_measurement(op, &x, &problem.noise_for(op), &mut noise_rng),
                |_, _, belief| errors_estimated.push(scaled_l2_error(belief.mean(), &x, grid.side())),
            )?;
            let (errors_fixed, fixed_mean) = fixed_track.errors_and_estimate(&x0, &x, grid.side(), &mut stream_rng(settings.seed, 3 * r + 2))?;
            let maps = ((r as usize) < settings.keep_maps).then(|| PairedMaps {
                truth: x.iter().copied().collect(),
                estimated: run.belief.mean().iter().copied().collect(),
                fixed: fixed_mean.iter().copied().collect(),
            });
            Ok(HyperReplication {
                ell_true,
                trace: run.hyper_trace(),
                errors_estimated,
                errors_fixed,
                maps,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HyperStudy { replications })
}
