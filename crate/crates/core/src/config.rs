//! JSON run configuration shared by the command line and the service.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::design::{DesignGrid, DesignProblem};
use crate::error::{Error, Result};
use crate::gauss::{GaussianBelief, HyperParams, NoiseModel, PrecisionTracking};
use crate::geometry::{BeamSpec, ImageGrid, ObstructionMask, Shape};
use crate::likelihood::EstimatorSettings;
use crate::simulation::{HyperStudySettings, PriorSampler, StudySettings};
use crate::targets::{Criterion, RoiMask};

/// Precision matrices are tracked automatically up to this many pixels.
pub const AUTO_PRECISION_LIMIT: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub detectors: usize,
    pub width: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionPolicy {
    #[default]
    Auto,
    Always,
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub gamma: f64,
    pub ell: f64,
    #[serde(default)]
    pub mean: f64,
    #[serde(default)]
    pub precision: PrecisionPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignGridConfig {
    #[serde(default = "default_angle_step")]
    pub angle_step_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_step: Option<f64>,
}

fn default_angle_step() -> f64 {
    1.0
}

impl Default for DesignGridConfig {
    fn default() -> Self {
        Self {
            angle_step_deg: default_angle_step(),
            offset_step: None,
        }
    }
}

/// A pixel set given by a shape or an explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegionConfig {
    Full,
    None,
    Rect {
        lo: [f64; 2],
        hi: [f64; 2],
    },
    Disk {
        center: [f64; 2],
        radius: f64,
    },
    /// Explicit pixel indices, inline or from a text file of integers.
    Pixels {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        indices: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        path: Option<String>,
    },
    /// Everything not covered by the obstruction.
    OutsideObstruction,
}

impl RegionConfig {
    fn mask(&self, grid: &ImageGrid, base: &Path, field: &str) -> Result<Vec<bool>> {
        let n = grid.pixel_count();
        Ok(match self {
            RegionConfig::Full => vec![true; n],
            RegionConfig::None => vec![false; n],
            RegionConfig::Rect { lo, hi } => Shape::Rect { lo: *lo, hi: *hi }.rasterize(grid),
            RegionConfig::Disk { center, radius } => Shape::Disk {
                center: *center,
                radius: *radius,
            }
            .rasterize(grid),
            RegionConfig::Pixels { indices, path } => {
                let list = match (indices, path) {
                    (Some(i), None) => i.clone(),
                    (None, Some(p)) => read_index_file(&base.join(p), field)?,
                    _ => return Err(Error::config(field, "pixels needs exactly one of `indices` or `path`")),
                };
                let mut mask = vec![false; n];
                for i in list {
                    if i >= n {
                        return Err(Error::config(field, format!("pixel index {i} out of range 0..{n}")));
                    }
                    mask[i] = true;
                }
                mask
            }
            RegionConfig::OutsideObstruction => return Err(Error::config(field, "only valid for `roi`")),
        })
    }
}

fn read_index_file(path: &Path, field: &str) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config(field, format!("{}: {e}", path.display())))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|e| Error::config(field, format!("{}: bad index {t:?}: {e}", path.display()))))
        .collect()
}

/// Inclusion added to a prior draw to build a simulated truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inclusion {
    pub shape: Shape,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    /// Start from a prior draw (seeded by `seed`) instead of the prior mean.
    #[serde(default = "yes")]
    pub from_prior: bool,
    #[serde(default)]
    pub inclusions: Vec<Inclusion>,
}

fn yes() -> bool {
    true
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            from_prior: true,
            inclusions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyName {
    #[serde(alias = "a")]
    A,
    #[serde(alias = "d")]
    D,
    #[serde(rename = "random", alias = "Random")]
    Random,
}

/// Coarse discretization used to design; reconstructions stay on the main
/// grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseConfig {
    pub n: usize,
    pub detectors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    #[serde(default = "default_policies")]
    pub policies: Vec<PolicyName>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_replications")]
    pub random_sequences: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse: Option<CoarseConfig>,
}

fn default_policies() -> Vec<PolicyName> {
    vec![PolicyName::A, PolicyName::D, PolicyName::Random]
}

fn default_replications() -> usize {
    100
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            policies: default_policies(),
            replications: default_replications(),
            random_sequences: default_replications(),
            coarse: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_ell_lo")]
    pub ell_lo: f64,
    #[serde(default = "default_ell_hi")]
    pub ell_hi: f64,
    #[serde(default)]
    pub estimator: EstimatorSettings,
}

fn default_ell_lo() -> f64 {
    0.04
}

fn default_ell_hi() -> f64 {
    0.06
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            replications: default_replications(),
            ell_lo: default_ell_lo(),
            ell_hi: default_ell_hi(),
            estimator: EstimatorSettings::default(),
        }
    }
}

/// Complete description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub grid: GridConfig,
    pub beam: BeamConfig,
    pub prior: PriorConfig,
    pub noise: NoiseConfig,
    #[serde(default)]
    pub design_grid: DesignGridConfig,
    #[serde(default = "default_criterion")]
    pub criterion: Criterion,
    #[serde(default = "full_region")]
    pub roi: RegionConfig,
    #[serde(default = "no_region")]
    pub obstruction: RegionConfig,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<String>,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub estimate: EstimateConfig,
    #[serde(default)]
    pub phantom: PhantomConfig,
    /// Directory that relative pixel-list paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_criterion() -> Criterion {
    Criterion::A
}

fn full_region() -> RegionConfig {
    RegionConfig::Full
}

fn no_region() -> RegionConfig {
    RegionConfig::None
}

fn default_rounds() -> usize {
    10
}

fn default_seed() -> u64 {
    1
}

impl RunConfig {
    /// Parses and validates; errors name the offending field.
    pub fn from_json_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::config(field, format!("{inner}"))
        })?;
        cfg.base_dir = base_dir.into();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json_str(&text, base)
    }

    /// Replaces pixel-list file references by their contents so the config
    /// no longer depends on the filesystem.
    pub fn inline_regions(&mut self) -> Result<()> {
        for (region, field) in [(&mut self.roi, "roi"), (&mut self.obstruction, "obstruction")] {
            if let RegionConfig::Pixels { indices, path: Some(p) } = region {
                *indices = Some(read_index_file(&self.base_dir.join(&*p), field)?);
                *region = RegionConfig::Pixels {
                    indices: indices.take(),
                    path: None,
                };
            }
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.image_grid()?;
        self.hyper_params()?;
        let beam = self.beam_spec()?;
        DesignGrid::uniform(&beam, self.design_grid.angle_step_deg, self.design_grid.offset_step)?;
        if self.obstruction == RegionConfig::OutsideObstruction {
            return Err(Error::config("obstruction", "`outside_obstruction` is only valid for `roi`"));
        }
        if let Some(c) = &self.study.coarse {
            ImageGrid::new(c.n).map_err(|_| Error::config("study.coarse.n", "must be positive"))?;
            BeamSpec::new(c.detectors, self.beam.width)?;
        }
        if !(self.estimate.ell_lo > 0.0 && self.estimate.ell_lo <= self.estimate.ell_hi) {
            return Err(Error::config("estimate.ell_lo", "need 0 < ell_lo <= ell_hi"));
        }
        Ok(())
    }

    pub fn image_grid(&self) -> Result<ImageGrid> {
        ImageGrid::new(self.grid.n).map_err(|_| Error::config("grid.n", "must be positive"))
    }

    pub fn beam_spec(&self) -> Result<BeamSpec> {
        if self.beam.detectors == 0 {
            return Err(Error::config("beam.detectors", "must be positive"));
        }
        BeamSpec::new(self.beam.detectors, self.beam.width)
    }

    pub fn hyper_params(&self) -> Result<HyperParams> {
        HyperParams::new(self.prior.gamma, self.prior.ell, self.noise.sigma)
    }

    pub fn tracking(&self) -> Result<PrecisionTracking> {
        let n = self.image_grid()?.pixel_count();
        Ok(match self.prior.precision {
            PrecisionPolicy::Always => PrecisionTracking::Track,
            PrecisionPolicy::Never => PrecisionTracking::Skip,
            PrecisionPolicy::Auto if n <= AUTO_PRECISION_LIMIT => PrecisionTracking::Track,
            PrecisionPolicy::Auto => PrecisionTracking::Skip,
        })
    }

    pub fn obstruction_mask(&self, grid: &ImageGrid) -> Result<ObstructionMask> {
        let mask = self.obstruction.mask(grid, &self.base_dir, "obstruction")?;
        ObstructionMask::from_mask(grid, mask)
    }

    pub fn roi_mask(&self, grid: &ImageGrid) -> Result<RoiMask> {
        self.region_roi(grid, &self.roi).map_err(|e| match e {
            Error::EmptyRoi => Error::config("roi", "region of interest must contain at least one pixel"),
            other => other,
        })
    }

    /// Interprets `region` as an ROI in the context of this configuration.
    pub fn region_roi(&self, grid: &ImageGrid, region: &RegionConfig) -> Result<RoiMask> {
        let mask = match region {
            RegionConfig::OutsideObstruction => self.obstruction_mask(grid)?.blocked().iter().map(|b| !b).collect(),
            r => r.mask(grid, &self.base_dir, "roi")?,
        };
        RoiMask::from_mask(grid, mask)
    }

    /// Imaging setup on the main grid.
    pub fn problem(&self) -> Result<DesignProblem> {
        self.problem_at(self.grid.n, self.beam.detectors)
    }

    /// Same setup on another discretization.
    pub fn problem_at(&self, n: usize, detectors: usize) -> Result<DesignProblem> {
        let grid = ImageGrid::new(n)?;
        let beam = BeamSpec::new(detectors, self.beam.width)?;
        let candidates = DesignGrid::uniform(&beam, self.design_grid.angle_step_deg, self.design_grid.offset_step)?;
        DesignProblem::new(grid, beam, NoiseModel::white(detectors, self.noise.sigma), self.obstruction_mask(&grid)?, candidates)
    }

    pub fn prior_belief(&self) -> Result<GaussianBelief> {
        let grid = self.image_grid()?;
        GaussianBelief::se_prior(&grid, &self.hyper_params()?, self.prior.mean, self.tracking()?)
    }

    pub fn prior_belief_at(&self, grid: &ImageGrid) -> Result<GaussianBelief> {
        let tracking = match self.prior.precision {
            PrecisionPolicy::Always => PrecisionTracking::Track,
            _ => PrecisionTracking::Skip,
        };
        GaussianBelief::se_prior(grid, &self.hyper_params()?, self.prior.mean, tracking)
    }

    pub fn sampler(&self) -> Result<PriorSampler> {
        PriorSampler::separable(&self.image_grid()?, &self.hyper_params()?, self.prior.mean)
    }

    /// Simulated ground truth: optional prior draw plus inclusions.
    pub fn truth(&self, seed: u64) -> Result<DVector<f64>> {
        let grid = self.image_grid()?;
        let mut x = if self.phantom.from_prior {
            self.sampler()?.sample_seeded(seed, 0)
        } else {
            DVector::from_element(grid.pixel_count(), self.prior.mean)
        };
        for inc in &self.phantom.inclusions {
            for (i, inside) in inc.shape.rasterize(&grid).into_iter().enumerate() {
                if inside {
                    x[i] += inc.value;
                }
            }
        }
        Ok(x)
    }

    pub fn study_settings(&self) -> StudySettings {
        StudySettings {
            replications: self.study.replications,
            random_sequences: self.study.random_sequences,
            rounds: self.rounds,
            seed: self.seed,
        }
    }

    pub fn hyper_study_settings(&self) -> HyperStudySettings {
        HyperStudySettings {
            replications: self.estimate.replications,
            rounds: self.rounds,
            ell_lo: self.estimate.ell_lo,
            ell_hi: self.estimate.ell_hi,
            ell0: self.prior.ell,
            seed: self.seed,
            estimator: self.estimate.estimator,
            keep_maps: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TEST_1_1: &str = r#"{
        "grid": {"n": 20},
        "beam": {"detectors": 9, "width": 1.0},
        "prior": {"gamma": 1.0, "ell": 0.05},
        "noise": {"sigma": 0.05},
        "criterion": "A",
        "rounds": 10
    }"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = RunConfig::from_json_str(TEST_1_1, ".").unwrap();
        assert_eq!(cfg.design_grid.angle_step_deg, 1.0);
        assert_eq!(cfg.roi, RegionConfig::Full);
        assert_eq!(cfg.obstruction, RegionConfig::None);
        assert_eq!(cfg.seed, 1);
        let p = cfg.problem().unwrap();
        assert_eq!(p.candidates.offsets(), &[0.0]);
        assert_eq!(cfg.roi_mask(&p.grid).unwrap().len(), 400);
        let again = RunConfig::from_json_str(&cfg.to_json_pretty(), ".").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_field_is_reported_with_path() {
        let text = TEST_1_1.replace("\"sigma\": 0.05", "\"sigma\": 0.05, \"colour\": 1");
        match RunConfig::from_json_str(&text, ".") {
            Err(Error::InvalidConfig { field, message }) => {
                assert_eq!(field, "noise.colour");
                assert!(message.contains("colour"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_type_is_reported_with_path() {
        let text = TEST_1_1.replace("\"n\": 20", "\"n\": \"twenty\"");
        match RunConfig::from_json_str(&text, ".") {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "grid.n"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn too_wide_beam_is_inadmissible() {
        let text = TEST_1_1.replace("\"width\": 1.0", "\"width\": 1.5");
        let err = RunConfig::from_json_str(&text, ".").unwrap_err();
        assert_eq!(err.code(), "InadmissibleDesign");
        assert!(err.to_string().contains("|c| + w/2 <= 0.5"));
    }

    #[test]
    fn regions() {
        let text = TEST_1_1
            .replace("\"criterion\": \"A\"", "\"criterion\": \"A\", \"obstruction\": {\"kind\": \"rect\", \"lo\": [0.0, 0.45], \"hi\": [0.5, 0.55]}, \"roi\": {\"kind\": \"outside_obstruction\"}");
        let cfg = RunConfig::from_json_str(&text, ".").unwrap();
        let grid = cfg.image_grid().unwrap();
        let obst = cfg.obstruction_mask(&grid).unwrap();
        let roi = cfg.roi_mask(&grid).unwrap();
        assert_eq!(obst.blocked_count() + roi.len(), 400);
        assert!(obst.blocked_count() > 0);

        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("roi.txt"), "0, 1 2\n3\n").unwrap();
        let text = TEST_1_1.replace("\"criterion\": \"A\"", "\"criterion\": \"D\", \"roi\": {\"kind\": \"pixels\", \"path\": \"roi.txt\"}");
        let cfg = RunConfig::from_json_str(&text, dir.path()).unwrap();
        assert_eq!(cfg.roi_mask(&grid).unwrap().roi_indices(), &[0, 1, 2, 3]);
        let mut inlined = cfg.clone();
        inlined.inline_regions().unwrap();
        inlined.base_dir = PathBuf::new();
        assert_eq!(inlined.roi, RegionConfig::Pixels { indices: Some(vec![0, 1, 2, 3]), path: None });
        assert_eq!(inlined.roi_mask(&grid).unwrap(), cfg.roi_mask(&grid).unwrap());
        let text = TEST_1_1.replace("\"criterion\": \"A\"", "\"roi\": {\"kind\": \"none\"}");
        let cfg = RunConfig::from_json_str(&text, ".").unwrap();
        assert!(cfg.roi_mask(&grid).is_err());
    }

    #[test]
    fn truth_with_inclusion() {
        let text = TEST_1_1.replace(
            "\"rounds\": 10",
            "\"rounds\": 10, \"phantom\": {\"from_prior\": false, \"inclusions\": [{\"shape\": {\"kind\": \"disk\", \"center\": [0.75, 0.75], \"radius\": 0.1}, \"value\": 2.0}]}",
        );
        let cfg = RunConfig::from_json_str(&text, ".").unwrap();
        let x = cfg.truth(3).unwrap();
        let grid = cfg.image_grid().unwrap();
        let inside = grid.locate([0.75, 0.75]).unwrap();
        assert_eq!(x[inside], 2.0);
        assert_eq!(x[0], 0.0);
        assert_eq!(cfg.truth(3).unwrap(), x);
    }
}
