//! Greedy sequential design: exhaustive sweeps over an angle × offset grid,
//! the offline loop and the interactive session with ROI changes.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{GaussianBelief, NoiseModel};
use crate::geometry::{assemble_projection, BeamSpec, DesignPoint, ImageGrid, ObstructionMask, ProjectionOperator};
use crate::targets::{Criterion, Landscape, LandscapeEntry, RoiMask, TargetEvaluator, TargetValue};

/// Candidate designs, scanned angle-major then offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignGrid {
    angles: Vec<f64>,
    offsets: Vec<f64>,
}

impl DesignGrid {
    /// Uniform grid: angles `-90 + k·step` below 90, offsets `k·offset_step`
    /// within `|c| ≤ 0.5 − w/2`. The default offset step is `w / (2m)`.
    pub fn uniform(beam: &BeamSpec, angle_step_deg: f64, offset_step: Option<f64>) -> Result<Self> {
        if !(angle_step_deg > 0.0 && angle_step_deg <= 180.0) {
            return Err(Error::config("design_grid.angle_step_deg", format!("must lie in (0, 180], got {angle_step_deg}")));
        }
        let step = offset_step.unwrap_or(beam.width / (2.0 * beam.detectors as f64));
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::config("design_grid.offset_step", format!("must be positive, got {step}")));
        }
        let count = (180.0 / angle_step_deg - 1e-9).ceil() as usize;
        let angles = (0..count).map(|k| -90.0 + k as f64 * angle_step_deg).collect();
        let reach = (beam.max_offset() / step + 1e-9).floor() as i64;
        let offsets = (-reach..=reach).map(|k| k as f64 * step).collect();
        Self::from_lists(beam, angles, offsets)
    }

    pub fn from_lists(beam: &BeamSpec, mut angles: Vec<f64>, mut offsets: Vec<f64>) -> Result<Self> {
        if angles.is_empty() || offsets.is_empty() {
            return Err(Error::config("design_grid", "needs at least one angle and one offset"));
        }
        if let Some(a) = angles.iter().find(|a| !(**a >= -90.0 && **a < 90.0)) {
            return Err(Error::config("design_grid.angles", format!("angle {a} outside [-90, 90)")));
        }
        for &c in &offsets {
            if !beam.is_admissible(&DesignPoint::new(0.0, c)) {
                return Err(Error::InadmissibleDesign {
                    offset: c,
                    width: beam.width,
                });
            }
        }
        angles.sort_by(f64::total_cmp);
        offsets.sort_by(f64::total_cmp);
        Ok(Self { angles, offsets })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.angles.len() * self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, k: usize) -> DesignPoint {
        let nc = self.offsets.len();
        DesignPoint::new(self.angles[k / nc], self.offsets[k % nc])
    }

    pub fn points(&self) -> impl Iterator<Item = DesignPoint> + '_ {
        (0..self.len()).map(|k| self.point(k))
    }
}

/// Everything about the imaging setup that does not change between rounds.
#[derive(Debug, Clone)]
pub struct DesignProblem {
    pub grid: ImageGrid,
    pub beam: BeamSpec,
    /// Noise of the `m` nominal rays; restricted per projection.
    pub noise: NoiseModel,
    pub obstruction: ObstructionMask,
    pub candidates: DesignGrid,
}

impl DesignProblem {
    pub fn new(grid: ImageGrid, beam: BeamSpec, noise: NoiseModel, obstruction: ObstructionMask, candidates: DesignGrid) -> Result<Self> {
        if noise.dim() != beam.detectors {
            return Err(Error::DimensionMismatch {
                what: "nominal noise covariance",
                expected: beam.detectors,
                found: noise.dim(),
            });
        }
        if obstruction.blocked().len() != grid.pixel_count() {
            return Err(Error::DimensionMismatch {
                what: "obstruction mask",
                expected: grid.pixel_count(),
                found: obstruction.blocked().len(),
            });
        }
        Ok(Self {
            grid,
            beam,
            noise,
            obstruction,
            candidates,
        })
    }

    pub fn operator(&self, point: DesignPoint) -> Result<ProjectionOperator> {
        assemble_projection(&self.grid, &self.beam, point, &self.obstruction)
    }

    pub fn noise_for(&self, op: &ProjectionOperator) -> NoiseModel {
        self.noise.for_operator(op)
    }

    /// Evaluates every candidate (in parallel, order preserved).
    pub fn landscape(&self, belief: &GaussianBelief, roi: &RoiMask, evaluator: &TargetEvaluator) -> Result<Landscape> {
        let entries = (0..self.candidates.len())
            .into_par_iter()
            .map(|k| {
                let point = self.candidates.point(k);
                let op = self.operator(point)?;
                let value = evaluator.eval(belief, &op, &self.noise_for(&op), roi)?;
                Ok(LandscapeEntry {
                    point,
                    value,
                    m_active: op.m_active(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Landscape {
            criterion: evaluator.criterion(),
            entries,
        })
    }
}

/// Result of one sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub point: DesignPoint,
    pub value: TargetValue,
    pub m_active: usize,
    pub landscape: Landscape,
}

/// Global grid minimizer of the target; ties go to the first candidate in
/// scan order.
pub fn optimize_next(problem: &DesignProblem, belief: &GaussianBelief, roi: &RoiMask, evaluator: &TargetEvaluator) -> Result<RoundOutcome> {
    let landscape = problem.landscape(belief, roi, evaluator)?;
    if landscape.entries.iter().all(|e| e.m_active == 0) {
        return Err(Error::AllCandidatesBlocked);
    }
    let best = *landscape.argmin().ok_or(Error::AllCandidatesBlocked)?;
    Ok(RoundOutcome {
        point: best.point,
        value: best.value,
        m_active: best.m_active,
        landscape,
    })
}

/// Output of the offline loop.
#[derive(Debug, Clone)]
pub struct BasicRun {
    pub rounds: Vec<RoundOutcome>,
    pub belief: GaussianBelief,
}

impl BasicRun {
    pub fn points(&self) -> Vec<DesignPoint> {
        self.rounds.iter().map(|r| r.point).collect()
    }
}

/// Offline sequential design of `rounds` projections; no data is needed
/// because the posterior covariance does not depend on it.
pub fn run_basic(
    problem: &DesignProblem,
    prior: &GaussianBelief,
    roi: &RoiMask,
    criterion: Criterion,
    rounds: usize,
    mut on_round: impl FnMut(usize, &RoundOutcome),
) -> Result<BasicRun> {
    let mut belief = prior.clone();
    let mut out = Vec::with_capacity(rounds);
    for k in 0..rounds {
        let evaluator = TargetEvaluator::prepare(criterion, &belief, roi)?;
        let round = optimize_next(problem, &belief, roi, &evaluator)?;
        let op = problem.operator(round.point)?;
        belief = belief.absorb_design(&op, &problem.noise_for(&op))?;
        on_round(k, &round);
        out.push(round);
    }
    Ok(BasicRun { rounds: out, belief })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Running,
    Stopped,
}

/// A projection that has been chosen and absorbed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChosenDesign {
    pub point: DesignPoint,
    pub value: TargetValue,
    pub m_active: usize,
}

/// CM estimate with its pixelwise standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Interactive sequential state: choose a projection, absorb its data,
/// optionally move the ROI, repeat until stopped.
#[derive(Debug, Clone)]
pub struct DesignSession {
    problem: DesignProblem,
    criterion: Criterion,
    prior_mean: DVector<f64>,
    belief: GaussianBelief,
    roi: RoiMask,
    evaluator: Option<TargetEvaluator>,
    pending: Option<RoundOutcome>,
    chosen: Vec<ChosenDesign>,
    data: Vec<DVector<f64>>,
    latest_landscape: Option<Landscape>,
    status: SessionStatus,
}

impl DesignSession {
    pub fn new(problem: DesignProblem, prior: GaussianBelief, roi: RoiMask, criterion: Criterion) -> Result<Self> {
        if prior.dim() != problem.grid.pixel_count() || roi.selected().len() != prior.dim() {
            return Err(Error::DimensionMismatch {
                what: "session prior",
                expected: problem.grid.pixel_count(),
                found: prior.dim(),
            });
        }
        Ok(Self {
            prior_mean: prior.mean().clone(),
            problem,
            criterion,
            belief: prior,
            roi,
            evaluator: None,
            pending: None,
            chosen: Vec::new(),
            data: Vec::new(),
            latest_landscape: None,
            status: SessionStatus::Running,
        })
    }

    pub fn problem(&self) -> &DesignProblem {
        &self.problem
    }

    pub fn criterion(&self) -> Criterion {
        self.criterion
    }

    pub fn belief(&self) -> &GaussianBelief {
        &self.belief
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn roi(&self) -> &RoiMask {
        &self.roi
    }

    pub fn chosen(&self) -> &[ChosenDesign] {
        &self.chosen
    }

    pub fn data(&self) -> &[DVector<f64>] {
        &self.data
    }

    pub fn pending(&self) -> Option<&RoundOutcome> {
        self.pending.as_ref()
    }

    pub fn latest_landscape(&self) -> Option<&Landscape> {
        self.latest_landscape.as_ref()
    }

    pub fn status(&self) -> SessionStatus {
        self.status
    }

    pub fn reconstruction(&self) -> Reconstruction {
        Reconstruction {
            mean: self.belief.mean().iter().copied().collect(),
            std: self.belief.std_map(),
        }
    }

    fn ensure_running(&self) -> Result<()> {
        match self.status {
            SessionStatus::Running => Ok(()),
            SessionStatus::Stopped => Err(Error::SessionStopped),
        }
    }

    /// Installs a new ROI; the next sweep rebuilds its precomputation.
    pub fn set_roi(&mut self, roi: RoiMask) -> Result<()> {
        self.ensure_running()?;
        if roi.selected().len() != self.belief.dim() {
            return Err(Error::DimensionMismatch {
                what: "ROI mask",
                expected: self.belief.dim(),
                found: roi.selected().len(),
            });
        }
        self.roi = roi;
        self.evaluator = None;
        self.pending = None;
        Ok(())
    }

    /// Finds the next optimal projection and holds it until its data arrive.
    pub fn optimize_next(&mut self) -> Result<&RoundOutcome> {
        self.ensure_running()?;
        let evaluator = match self.evaluator.take() {
            Some(TargetEvaluator::D(pre)) if !pre.is_valid_for(&self.belief, &self.roi) => {
                TargetEvaluator::prepare(self.criterion, &self.belief, &self.roi)?
            }
            Some(e) => e,
            None => TargetEvaluator::prepare(self.criterion, &self.belief, &self.roi)?,
        };
        let outcome = optimize_next(&self.problem, &self.belief, &self.roi, &evaluator);
        self.evaluator = Some(evaluator);
        let outcome = outcome?;
        self.latest_landscape = Some(outcome.landscape.clone());
        Ok(self.pending.insert(outcome))
    }

    /// Operator of the design awaiting data.
    pub fn pending_operator(&self) -> Result<ProjectionOperator> {
        let p = self.pending.as_ref().ok_or(Error::NoPendingDesign)?;
        self.problem.operator(p.point)
    }

    /// Absorbs data `y` for the pending design (Woodbury update).
    pub fn absorb_measurement(&mut self, y: &DVector<f64>) -> Result<()> {
        self.ensure_running()?;
        let pending = self.pending.as_ref().ok_or(Error::NoPendingDesign)?;
        let op = self.problem.operator(pending.point)?;
        if y.len() != op.m_active() {
            return Err(Error::DimensionMismatch {
                what: "measurement vector",
                expected: op.m_active(),
                found: y.len(),
            });
        }
        self.belief = self.belief.posterior_update_woodbury(&op, &self.problem.noise_for(&op), y)?;
        let pending = self.pending.take().expect("checked above");
        self.chosen.push(ChosenDesign {
            point: pending.point,
            value: pending.value,
            m_active: pending.m_active,
        });
        self.data.push(y.clone());
        self.evaluator = None;
        Ok(())
    }

    /// One step of the interactive loop: absorb the data, then install
    /// the new ROI if one is given.
    pub fn adaptive_step(&mut self, roi_update: Option<RoiMask>, y: &DVector<f64>) -> Result<Reconstruction> {
        self.absorb_measurement(y)?;
        if let Some(roi) = roi_update {
            self.set_roi(roi)?;
        }
        Ok(self.reconstruction())
    }

    /// Ends the session and returns the final reconstruction. A second call
    /// fails with [`Error::SessionStopped`].
    pub fn stop(&mut self) -> Result<Reconstruction> {
        self.ensure_running()?;
        self.status = SessionStatus::Stopped;
        self.pending = None;
        Ok(self.reconstruction())
    }
}

/// Pixels where `|x̂ − x₀|` exceeds `q · max |x̂ − x₀|`. Never applied
/// automatically.
pub fn roi_heuristic(grid: &ImageGrid, estimate: &[f64], prior_mean: &[f64], q: f64) -> Result<RoiMask> {
    if estimate.len() != grid.pixel_count() || prior_mean.len() != grid.pixel_count() {
        return Err(Error::DimensionMismatch {
            what: "reconstruction",
            expected: grid.pixel_count(),
            found: estimate.len(),
        });
    }
    let dev: Vec<f64> = estimate.iter().zip(prior_mean).map(|(a, b)| (a - b).abs()).collect();
    let max = dev.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(Error::EmptyRoi);
    }
    RoiMask::from_mask(grid, dev.iter().map(|&d| d > q * max).collect())
}
