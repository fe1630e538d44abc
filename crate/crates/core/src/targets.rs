//! A- and D-optimality targets restricted to a region of interest.
//!
//! Every candidate evaluation costs one `m × m` Cholesky factorization plus
//! products with the sparse projection rows; the `n × n` work is done once
//! per round.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss::{chol_spd, symmetrize, GaussianBelief, NoiseModel, SpdFactor};
use crate::geometry::{DesignPoint, ImageGrid, ProjectionOperator, Shape, SparseRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Criterion {
    #[serde(alias = "a")]
    A,
    #[serde(alias = "d")]
    D,
}

impl Criterion {
    pub fn column_name(self) -> &'static str {
        match self {
            Criterion::A => "phi_A",
            Criterion::D => "phi_D",
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::A => "A",
            Criterion::D => "D",
        })
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Criterion::A),
            "D" | "d" => Ok(Criterion::D),
            other => Err(Error::config("criterion", format!("expected A or D, got {other:?}"))),
        }
    }
}

/// Target value of one candidate.
///
/// For A the display value is the expected scaled `L²` error
/// `√Φ_A / N`; for D it is the information gain over the region of
/// interest. Both are monotone in `raw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetValue {
    pub criterion: Criterion,
    pub raw: f64,
    pub display: f64,
}

/// Pixels of interest ("block 1") and the rest ("block 2").
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiMask {
    selected: Vec<bool>,
    roi: Vec<usize>,
    rest: Vec<usize>,
}

impl RoiMask {
    pub fn full(grid: &ImageGrid) -> Self {
        Self::from_mask(grid, vec![true; grid.pixel_count()]).expect("full mask is nonempty")
    }

    pub fn from_mask(grid: &ImageGrid, selected: Vec<bool>) -> Result<Self> {
        if selected.len() != grid.pixel_count() {
            return Err(Error::DimensionMismatch {
                what: "ROI mask",
                expected: grid.pixel_count(),
                found: selected.len(),
            });
        }
        let roi: Vec<usize> = (0..selected.len()).filter(|&i| selected[i]).collect();
        if roi.is_empty() {
            return Err(Error::EmptyRoi);
        }
        let rest = (0..selected.len()).filter(|&i| !selected[i]).collect();
        Ok(Self { selected, roi, rest })
    }

    pub fn from_shape(grid: &ImageGrid, shape: &Shape) -> Result<Self> {
        Self::from_mask(grid, shape.rasterize(grid))
    }

    pub fn from_indices(grid: &ImageGrid, indices: &[usize]) -> Result<Self> {
        let mut selected = vec![false; grid.pixel_count()];
        for &i in indices {
            if i >= selected.len() {
                return Err(Error::DimensionMismatch {
                    what: "ROI pixel index",
                    expected: selected.len(),
                    found: i,
                });
            }
            selected[i] = true;
        }
        Self::from_mask(grid, selected)
    }

    pub fn selected(&self) -> &[bool] {
        &self.selected
    }

    pub fn roi_indices(&self) -> &[usize] {
        &self.roi
    }

    pub fn rest_indices(&self) -> &[usize] {
        &self.rest
    }

    pub fn len(&self) -> usize {
        self.roi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roi.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.rest.is_empty()
    }

    pub fn contains(&self, pixel: usize) -> bool {
        self.selected[pixel]
    }

    /// Mean pixel center of the region.
    pub fn centroid(&self, grid: &ImageGrid) -> [f64; 2] {
        let mut acc = [0.0, 0.0];
        for &i in &self.roi {
            let c = grid.pixel_center(i);
            acc[0] += c[0];
            acc[1] += c[1];
        }
        let k = self.roi.len() as f64;
        [acc[0] / k, acc[1] / k]
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.selected.hash(&mut h);
        h.finish()
    }
}

/// `R M Rᵀ` for sparse rows and a dense symmetric `M`.
fn sparse_congruence(rows: &[SparseRow], m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = rows.len();
    let mut out = DMatrix::zeros(k, k);
    for a in 0..k {
        for b in 0..=a {
            let mut acc = 0.0;
            for (i, vi) in rows[a].iter() {
                let col = m.column(i);
                let mut inner = 0.0;
                for (j, vj) in rows[b].iter() {
                    inner += vj * col[j];
                }
                acc += vi * inner;
            }
            out[(a, b)] = acc;
            out[(b, a)] = acc;
        }
    }
    out
}

/// Factor of `R Γ Rᵀ + Γ_noise` for the active rows.
fn innovation_factor(belief: &GaussianBelief, op: &ProjectionOperator, noise: &NoiseModel) -> Result<SpdFactor> {
    check_noise(op, noise)?;
    let mut s = sparse_congruence(op.rows(), belief.cov());
    noise.add_to(&mut s);
    chol_spd(&s)
}

fn check_noise(op: &ProjectionOperator, noise: &NoiseModel) -> Result<()> {
    if noise.dim() != op.m_active() {
        return Err(Error::DimensionMismatch {
            what: "noise covariance",
            expected: op.m_active(),
            found: noise.dim(),
        });
    }
    Ok(())
}

fn check_dims(belief: &GaussianBelief, op: &ProjectionOperator, roi: &RoiMask) -> Result<()> {
    if op.pixel_count() != belief.dim() || roi.selected.len() != belief.dim() {
        return Err(Error::DimensionMismatch {
            what: "pixel count",
            expected: belief.dim(),
            found: if op.pixel_count() != belief.dim() {
                op.pixel_count()
            } else {
                roi.selected.len()
            },
        });
    }
    Ok(())
}

fn side_of(belief: &GaussianBelief) -> f64 {
    (belief.dim() as f64).sqrt()
}

/// `tr(A Γ Aᵀ)`, the A-target before any measurement.
pub fn roi_trace(belief: &GaussianBelief, roi: &RoiMask) -> f64 {
    roi.roi.iter().map(|&i| belief.cov()[(i, i)]).sum()
}

fn a_value(raw: f64, side: f64) -> TargetValue {
    TargetValue {
        criterion: Criterion::A,
        raw,
        display: raw.max(0.0).sqrt() / side,
    }
}

/// A-optimality target `tr(A Γ_post Aᵀ) = c′ − ‖C⁻¹ R Γ Aᵀ‖_F²`.
pub fn eval_a(belief: &GaussianBelief, op: &ProjectionOperator, noise: &NoiseModel, roi: &RoiMask) -> Result<TargetValue> {
    check_dims(belief, op, roi)?;
    check_noise(op, noise)?;
    let c_prime = roi_trace(belief, roi);
    let side = side_of(belief);
    if op.is_empty() {
        return Ok(a_value(c_prime, side));
    }
    // G = Γ Rᵀ gives both S = R G + Γ_noise and B = (A G)ᵀ.
    let g = op.sym_times_transpose(belief.cov());
    let mut s = op.times_dense(&g);
    symmetrize(&mut s);
    noise.add_to(&mut s);
    let chol = chol_spd(&s)?;
    let mut b = if roi.is_full() {
        g.transpose()
    } else {
        g.select_rows(&roi.roi).transpose()
    };
    chol.solve_lower_mut(&mut b);
    Ok(a_value(c_prime - b.norm_squared(), side))
}

/// Per-round data for the D-target: the Schur complement
/// `W = ((Γ⁻¹)₂₂)⁻¹ = Γ₂₂ − Γ₂₁ Γ₁₁⁻¹ Γ₁₂` over the complement of the ROI and
/// the design-independent constant `c = log det Γ₁₁`.
#[derive(Debug, Clone)]
pub struct DCandidatePrecomp {
    schur: DMatrix<f64>,
    const_c: f64,
    rest_pos: Vec<u32>,
    belief_stamp: u64,
    roi_fingerprint: u64,
    jitter: f64,
}

const NOT_REST: u32 = u32::MAX;

impl DCandidatePrecomp {
    /// Builds the precomputation from the covariance blocks alone.
    pub fn new(belief: &GaussianBelief, roi: &RoiMask) -> Result<Self> {
        if roi.selected.len() != belief.dim() {
            return Err(Error::DimensionMismatch {
                what: "ROI mask",
                expected: belief.dim(),
                found: roi.selected.len(),
            });
        }
        if roi.rest.is_empty() {
            // Whole domain: c is log det Γ, which the belief tracks.
            return Ok(Self::assemble(DMatrix::zeros(0, 0), belief.log_det()?, belief, roi, 0.0));
        }
        let cov = belief.cov();
        let g11 = cov.select_rows(&roi.roi).select_columns(&roi.roi);
        let f11 = chol_spd(&g11)?;
        let const_c = f11.log_det();
        let mut h = cov.select_rows(&roi.roi).select_columns(&roi.rest);
        f11.solve_lower_mut(&mut h);
        let mut schur = cov.select_rows(&roi.rest).select_columns(&roi.rest);
        schur.gemm_tr(-1.0, &h, &h, 1.0);
        symmetrize(&mut schur);
        Ok(Self::assemble(schur, const_c, belief, roi, f11.jitter()))
    }

    /// Builds the precomputation from the precision matrix: `W` is the
    /// inverse of `(Γ⁻¹)₂₂` and `c = log det Γ + log det (Γ⁻¹)₂₂`.
    pub fn from_precision(belief: &GaussianBelief, roi: &RoiMask) -> Result<Self> {
        let prec = belief.prec().ok_or(Error::PrecisionUnavailable)?;
        let fpr = chol_spd(belief.cov())?;
        let (schur, log_det22, jitter) = if roi.rest.is_empty() {
            (DMatrix::zeros(0, 0), 0.0, fpr.jitter())
        } else {
            let p22 = prec.select_rows(&roi.rest).select_columns(&roi.rest);
            let chol22 = chol_spd(&p22)?;
            (chol22.inverse(), chol22.log_det(), fpr.jitter().max(chol22.jitter()))
        };
        Ok(Self::assemble(schur, fpr.log_det() + log_det22, belief, roi, jitter))
    }

    fn assemble(schur: DMatrix<f64>, const_c: f64, belief: &GaussianBelief, roi: &RoiMask, jitter: f64) -> Self {
        let mut rest_pos = vec![NOT_REST; belief.dim()];
        for (k, &i) in roi.rest.iter().enumerate() {
            rest_pos[i] = k as u32;
        }
        Self {
            schur,
            const_c,
            rest_pos,
            belief_stamp: belief.stamp(),
            roi_fingerprint: roi.fingerprint(),
            jitter,
        }
    }

    /// `log det Γ₁₁`, the D-target when nothing is measured.
    pub fn const_c(&self) -> f64 {
        self.const_c
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn is_valid_for(&self, belief: &GaussianBelief, roi: &RoiMask) -> bool {
        self.belief_stamp == belief.stamp() && self.roi_fingerprint == roi.fingerprint()
    }

    fn complement_rows(&self, op: &ProjectionOperator) -> Vec<SparseRow> {
        op.rows()
            .iter()
            .map(|row| {
                let mut indices = Vec::new();
                let mut values = Vec::new();
                for (i, v) in row.iter() {
                    let p = self.rest_pos[i];
                    if p != NOT_REST {
                        indices.push(p as usize);
                        values.push(v);
                    }
                }
                SparseRow { indices, values }
            })
            .collect()
    }

    fn value(&self, raw: f64) -> TargetValue {
        TargetValue {
            criterion: Criterion::D,
            raw,
            display: 0.5 * (self.const_c - raw),
        }
    }
}

/// D-optimality target `log det (Γ_post)₁₁ = 2 Σ (ln c̃_jj − ln c_jj) + c`.
pub fn eval_d(
    belief: &GaussianBelief,
    op: &ProjectionOperator,
    noise: &NoiseModel,
    roi: &RoiMask,
    pre: &DCandidatePrecomp,
) -> Result<TargetValue> {
    check_dims(belief, op, roi)?;
    check_noise(op, noise)?;
    if !pre.is_valid_for(belief, roi) {
        return Err(Error::PrecompStale);
    }
    if op.is_empty() {
        return Ok(pre.value(pre.const_c));
    }
    let c = innovation_factor(belief, op, noise)?;
    let mut s2 = sparse_congruence(&pre.complement_rows(op), &pre.schur);
    noise.add_to(&mut s2);
    let c_tilde = chol_spd(&s2)?;
    let m = op.m_active();
    let sum: f64 = (0..m).map(|j| c_tilde.diag(j).ln() - c.diag(j).ln()).sum();
    Ok(pre.value(2.0 * sum + pre.const_c))
}

/// Criterion together with whatever it needs precomputed for one round.
#[derive(Debug, Clone)]
pub enum TargetEvaluator {
    A,
    D(DCandidatePrecomp),
}

impl TargetEvaluator {
    pub fn prepare(criterion: Criterion, belief: &GaussianBelief, roi: &RoiMask) -> Result<Self> {
        Ok(match criterion {
            Criterion::A => TargetEvaluator::A,
            Criterion::D => TargetEvaluator::D(DCandidatePrecomp::new(belief, roi)?),
        })
    }

    pub fn criterion(&self) -> Criterion {
        match self {
            TargetEvaluator::A => Criterion::A,
            TargetEvaluator::D(_) => Criterion::D,
        }
    }

    pub fn eval(&self, belief: &GaussianBelief, op: &ProjectionOperator, noise: &NoiseModel, roi: &RoiMask) -> Result<TargetValue> {
        match self {
            TargetEvaluator::A => eval_a(belief, op, noise, roi),
            TargetEvaluator::D(pre) => eval_d(belief, op, noise, roi, pre),
        }
    }

    /// Target value with no measurement at all.
    pub fn baseline(&self, belief: &GaussianBelief, roi: &RoiMask) -> TargetValue {
        match self {
            TargetEvaluator::A => a_value(roi_trace(belief, roi), side_of(belief)),
            TargetEvaluator::D(pre) => pre.value(pre.const_c),
        }
    }
}

/// `½ (log det Γ_pr − log det Γ_post)`, the information gain of the whole
/// image.
pub fn info_gain_total(prior: &GaussianBelief, post: &GaussianBelief) -> Result<f64> {
    if prior.dim() != post.dim() {
        return Err(Error::DimensionMismatch {
            what: "belief dimension",
            expected: prior.dim(),
            found: post.dim(),
        });
    }
    let a = chol_spd(prior.cov())?.log_det();
    let b = chol_spd(post.cov())?.log_det();
    Ok(0.5 * (a - b))
}

/// `log det Γ₁₁` of the ROI marginal.
pub fn roi_log_det(belief: &GaussianBelief, roi: &RoiMask) -> Result<f64> {
    let g11 = belief.cov().select_rows(&roi.roi).select_columns(&roi.roi);
    Ok(chol_spd(&g11)?.log_det())
}

/// One evaluated candidate of a design-grid sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapeEntry {
    pub point: DesignPoint,
    pub value: TargetValue,
    pub m_active: usize,
}

/// Target values over the whole design grid, in scan order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub criterion: Criterion,
    pub entries: Vec<LandscapeEntry>,
}

impl Landscape {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["angle_deg", "offset", self.criterion.column_name(), "display_value"])
            .map_err(csv_err)?;
        for e in &self.entries {
            w.write_record([
                e.point.angle_deg.to_string(),
                e.point.offset.to_string(),
                e.value.raw.to_string(),
                e.value.display.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn argmin(&self) -> Option<&LandscapeEntry> {
        let mut best: Option<&LandscapeEntry> = None;
        for e in &self.entries {
            if best.is_none_or(|b| e.value.raw < b.value.raw) {
                best = Some(e);
            }
        }
        best
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse(format!("{other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{build_prior_cov, HyperParams, PrecisionTracking};
    use crate::geometry::{assemble_projection, BeamSpec, ObstructionMask};
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Instance {
        grid: ImageGrid,
        belief: GaussianBelief,
        op: ProjectionOperator,
        noise: NoiseModel,
        sigma: f64,
    }

    fn instance(seed: u64, side: usize, m: usize) -> Instance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = ImageGrid::new(side).unwrap();
        let ell = grid.pixel_width() * rng.random_range(0.3..1.0);
        let sigma = rng.random_range(0.05..0.3);
        let hp = HyperParams::new(rng.random_range(0.5..1.5), ell, sigma).unwrap();
        let belief = GaussianBelief::from_prior(DVector::zeros(grid.pixel_count()), build_prior_cov(&grid, &hp), PrecisionTracking::Track).unwrap();
        let width = rng.random_range(0.3..1.0);
        let beam = BeamSpec::new(m, width).unwrap();
        let c = rng.random_range(-1.0..1.0) * beam.max_offset();
        let p = DesignPoint::new(rng.random_range(-90.0..90.0), c);
        let op = assemble_projection(&grid, &beam, p, &ObstructionMask::none(&grid)).unwrap();
        let noise = NoiseModel::white(op.m_active(), sigma);
        Instance {
            grid,
            belief,
            op,
            noise,
            sigma,
        }
    }

    fn dense_posterior(inst: &Instance) -> DMatrix<f64> {
        let r = inst.op.to_dense();
        let prec = inst.belief.cov().clone().try_inverse().unwrap() + r.transpose() * &r / (inst.sigma * inst.sigma);
        prec.try_inverse().unwrap()
    }

    fn random_roi(grid: &ImageGrid, k: usize, rng: &mut ChaCha8Rng) -> RoiMask {
        let mut idx: Vec<usize> = (0..grid.pixel_count()).collect();
        for i in 0..k {
            let j = rng.random_range(i..idx.len());
            idx.swap(i, j);
        }
        RoiMask::from_indices(grid, &idx[..k]).unwrap()
    }

    fn dense_logdet(m: &DMatrix<f64>) -> f64 {
        m.clone().cholesky().unwrap().l().diagonal().iter().map(|d| 2.0 * d.ln()).sum()
    }

    #[test]
    fn roi_mask_partitions() {
        let grid = ImageGrid::new(8).unwrap();
        let quad = Shape::Rect {
            lo: [0.5, 0.5],
            hi: [1.0, 1.0],
        };
        let roi = RoiMask::from_shape(&grid, &quad).unwrap();
        assert_eq!(roi.len(), 16);
        assert_eq!(roi.len() + roi.rest_indices().len(), 64);
        assert!(roi.roi_indices().iter().all(|i| !roi.rest_indices().contains(i)));
        let c = roi.centroid(&grid);
        assert!((c[0] - 0.75).abs() < 1e-12 && (c[1] - 0.75).abs() < 1e-12);
        assert!(matches!(RoiMask::from_mask(&grid, vec![false; 64]), Err(Error::EmptyRoi)));
        assert!(RoiMask::full(&grid).is_full());
    }

    #[test]
    fn a_target_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..20 {
            let inst = instance(seed, 4, 3);
            let post = dense_posterior(&inst);
            let roi = if seed % 2 == 0 {
                RoiMask::full(&inst.grid)
            } else {
                random_roi(&inst.grid, 6, &mut rng)
            };
            let oracle: f64 = roi.roi_indices().iter().map(|&i| post[(i, i)]).sum();
            let got = eval_a(&inst.belief, &inst.op, &inst.noise, &roi).unwrap();
            assert!((got.raw - oracle).abs() <= 1e-8 * (1.0 + oracle.abs()), "{} vs {oracle}", got.raw);
            assert!((got.display - oracle.sqrt() / 4.0).abs() < 1e-10);
        }
    }

    #[test]
    fn a_target_without_measurement() {
        let grid = ImageGrid::new(5).unwrap();
        let hp = HyperParams::new(1.0, 0.1, 0.1).unwrap();
        let belief = GaussianBelief::from_prior(DVector::zeros(25), build_prior_cov(&grid, &hp), PrecisionTracking::Skip).unwrap();
        let empty = ProjectionOperator::from_rows(DesignPoint::new(0.0, 0.0), 25, vec![]);
        let v = eval_a(&belief, &empty, &NoiseModel::white(0, 0.1), &RoiMask::full(&grid)).unwrap();
        assert_eq!(v.raw, 25.0);
        assert!((v.display - 1.0).abs() < 1e-15);
    }

    #[test]
    fn d_target_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for seed in 0..20 {
            let inst = instance(seed + 100, 4, 3);
            let post = dense_posterior(&inst);
            let roi = random_roi(&inst.grid, 6, &mut rng);
            let sub = post.select_rows(roi.roi_indices()).select_columns(roi.roi_indices());
            let oracle = dense_logdet(&sub);
            let pre = DCandidatePrecomp::new(&inst.belief, &roi).unwrap();
            let got = eval_d(&inst.belief, &inst.op, &inst.noise, &roi, &pre).unwrap();
            assert!((got.raw - oracle).abs() < 1e-7, "{} vs {oracle}", got.raw);
            let prior_sub = inst.belief.cov().select_rows(roi.roi_indices()).select_columns(roi.roi_indices());
            assert!((got.display - 0.5 * (dense_logdet(&prior_sub) - oracle)).abs() < 1e-7);
            assert!(got.display >= -1e-10);
        }
    }

    #[test]
    fn precomp_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let inst = instance(seed + 300, 5, 4);
            let roi = random_roi(&inst.grid, 1 + seed as usize, &mut rng);
            let a = DCandidatePrecomp::new(&inst.belief, &roi).unwrap();
            let b = DCandidatePrecomp::from_precision(&inst.belief, &roi).unwrap();
            assert!((a.const_c() - b.const_c()).abs() < 1e-7 * (1.0 + a.const_c().abs()));
            let va = eval_d(&inst.belief, &inst.op, &inst.noise, &roi, &a).unwrap();
            let vb = eval_d(&inst.belief, &inst.op, &inst.noise, &roi, &b).unwrap();
            assert!((va.raw - vb.raw).abs() < 1e-7 * (1.0 + va.raw.abs()));
        }
    }

    #[test]
    fn full_roi_d_target_is_total_log_det() {
        let inst = instance(5, 4, 3);
        let roi = RoiMask::full(&inst.grid);
        let pre = DCandidatePrecomp::new(&inst.belief, &roi).unwrap();
        let got = eval_d(&inst.belief, &inst.op, &inst.noise, &roi, &pre).unwrap();
        assert!((got.raw - dense_logdet(&dense_posterior(&inst))).abs() < 1e-7);
        let post = inst.belief.absorb_design(&inst.op, &inst.noise).unwrap();
        let gain = info_gain_total(&inst.belief, &post).unwrap();
        assert!((got.display - gain).abs() < 1e-7);
    }

    #[test]
    fn d_target_empty_operator() {
        let inst = instance(8, 4, 3);
        let roi = RoiMask::from_indices(&inst.grid, &[0, 5, 10]).unwrap();
        let pre = DCandidatePrecomp::new(&inst.belief, &roi).unwrap();
        let empty = ProjectionOperator::from_rows(DesignPoint::new(0.0, 0.0), 16, vec![]);
        let v = eval_d(&inst.belief, &empty, &NoiseModel::white(0, 0.1), &roi, &pre).unwrap();
        assert!((v.raw - roi_log_det(&inst.belief, &roi).unwrap()).abs() < 1e-12);
        assert_eq!(v.display, 0.0);
    }

    #[test]
    fn stale_precomp_rejected() {
        let inst = instance(9, 4, 3);
        let roi = RoiMask::full(&inst.grid);
        let pre = DCandidatePrecomp::new(&inst.belief, &roi).unwrap();
        let post = inst.belief.absorb_design(&inst.op, &inst.noise).unwrap();
        assert!(matches!(eval_d(&post, &inst.op, &inst.noise, &roi, &pre), Err(Error::PrecompStale)));
        let other = RoiMask::from_indices(&inst.grid, &[1, 2]).unwrap();
        assert!(matches!(eval_d(&inst.belief, &inst.op, &inst.noise, &other, &pre), Err(Error::PrecompStale)));
    }

    #[test]
    fn info_gain_rank_one() {
        let grid = ImageGrid::new(3).unwrap();
        let hp = HyperParams::new(1.0, 0.3, 0.2).unwrap();
        let belief = GaussianBelief::from_prior(DVector::zeros(9), build_prior_cov(&grid, &hp), PrecisionTracking::Skip).unwrap();
        let beam = BeamSpec::new(1, 0.2).unwrap();
        let op = assemble_projection(&grid, &beam, DesignPoint::new(20.0, 0.1), &ObstructionMask::none(&grid)).unwrap();
        let noise = NoiseModel::white(1, 0.2);
        let post = belief.absorb_design(&op, &noise).unwrap();
        assert_eq!(info_gain_total(&belief, &belief).unwrap(), 0.0);
        let r = DVector::from(op.to_dense().row(0).transpose());
        let q = r.dot(&(belief.cov() * &r));
        let oracle = 0.5 * (1.0 + q / 0.04).ln();
        assert!((info_gain_total(&belief, &post).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn info_gain_telescopes() {
        let inst = instance(12, 4, 3);
        let beam = BeamSpec::new(3, 0.6).unwrap();
        let op2 = assemble_projection(&inst.grid, &beam, DesignPoint::new(-40.0, 0.1), &ObstructionMask::none(&inst.grid)).unwrap();
        let n2 = NoiseModel::white(3, inst.sigma);
        let p1 = inst.belief.absorb_design(&inst.op, &inst.noise).unwrap();
        let p2 = p1.absorb_design(&op2, &n2).unwrap();
        let stacked = ProjectionOperator::stack([&inst.op, &op2]);
        let batch = inst.belief.absorb_design(&stacked, &NoiseModel::white(stacked.m_active(), inst.sigma)).unwrap();
        let seq = info_gain_total(&inst.belief, &p1).unwrap() + info_gain_total(&p1, &p2).unwrap();
        assert!((seq - info_gain_total(&inst.belief, &batch).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn landscape_csv_and_argmin() {
        let v = |raw| TargetValue {
            criterion: Criterion::A,
            raw,
            display: raw,
        };
        let land = Landscape {
            criterion: Criterion::A,
            entries: vec![
                LandscapeEntry {
                    point: DesignPoint::new(-90.0, 0.0),
                    value: v(2.0),
                    m_active: 3,
                },
                LandscapeEntry {
                    point: DesignPoint::new(0.0, 0.0),
                    value: v(1.0),
                    m_active: 3,
                },
                LandscapeEntry {
                    point: DesignPoint::new(45.0, 0.0),
                    value: v(1.0),
                    m_active: 3,
                },
            ],
        };
        assert_eq!(land.argmin().unwrap().point.angle_deg, 0.0);
        let mut buf = Vec::new();
        land.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("angle_deg,offset,phi_A,display_value\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
