//! JSON shapes exchanged with clients.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use oedct::config::RegionConfig;
use oedct::design::{ChosenDesign, DesignSession, SessionStatus};
use oedct::targets::{Criterion, Landscape};

use crate::error::ApiError;

/// Precision of encoded float arrays, chosen with `?precision=`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionQuery {
    #[serde(default)]
    pub precision: Precision,
}

/// Little-endian floats, base64 encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatArray {
    pub dtype: Precision,
    pub len: usize,
    pub data: String,
}

impl FloatArray {
    pub fn encode(values: &[f64], precision: Precision) -> Self {
        let bytes: Vec<u8> = match precision {
            Precision::F32 => values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect(),
            Precision::F64 => values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        };
        Self {
            dtype: precision,
            len: values.len(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Vec<f64>, ApiError> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| ApiError::bad_request("BadEncoding", format!("base64: {e}"), Some("data")))?;
        let width = match self.dtype {
            Precision::F32 => 4,
            Precision::F64 => 8,
        };
        if bytes.len() != self.len * width {
            return Err(ApiError::bad_request(
                "BadEncoding",
                format!("{} bytes do not hold {} values of {width} bytes", bytes.len(), self.len),
                Some("data"),
            ));
        }
        Ok(match self.dtype {
            Precision::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Precision::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignView {
    pub angle_deg: f64,
    pub offset: f64,
    /// Target value in the units used for selection.
    pub value: f64,
    /// Target value in display units.
    pub display: f64,
    pub active_rays: usize,
}

impl From<&ChosenDesign> for DesignView {
    fn from(c: &ChosenDesign) -> Self {
        Self {
            angle_deg: c.point.angle_deg,
            offset: c.point.offset,
            value: c.value.raw,
            display: c.value.display,
            active_rays: c.m_active,
        }
    }
}

/// Target over the angle × offset grid, angle-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeView {
    pub criterion: Criterion,
    pub angles: Vec<f64>,
    pub offsets: Vec<f64>,
    pub values: FloatArray,
    pub display: FloatArray,
    pub active_rays: Vec<usize>,
    /// Index of the minimizer in scan order.
    pub argmin: usize,
}

impl LandscapeView {
    pub fn new(l: &Landscape, angles: &[f64], offsets: &[f64], precision: Precision) -> Self {
        let raw: Vec<f64> = l.entries.iter().map(|e| e.value.raw).collect();
        let display: Vec<f64> = l.entries.iter().map(|e| e.value.display).collect();
        let best = l.argmin().map(|b| b.point);
        Self {
            criterion: l.criterion,
            angles: angles.to_vec(),
            offsets: offsets.to_vec(),
            values: FloatArray::encode(&raw, precision),
            display: FloatArray::encode(&display, precision),
            active_rays: l.entries.iter().map(|e| e.m_active).collect(),
            argmin: l.entries.iter().position(|e| Some(e.point) == best).unwrap_or(0),
        }
    }
}

/// Full state returned by `GET /sessions/{id}` and by creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    pub revision: u64,
    pub status: SessionStatus,
    pub generation: usize,
    pub criterion: Criterion,
    /// Pixels per edge; arrays are indexed `row * n + col` with row 0 at the
    /// bottom of the domain.
    pub n: usize,
    pub reconstruction: FloatArray,
    pub std: FloatArray,
    pub roi_pixels: Vec<usize>,
    pub obstruction_pixels: Vec<usize>,
    pub chosen: Vec<DesignView>,
    pub pending: Option<DesignView>,
    pub landscape: Option<LandscapeView>,
}

/// Immutable copy of everything a reader may ask for, published after each
/// accepted mutation.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub revision: u64,
    pub status: SessionStatus,
    pub generation: usize,
    pub criterion: Criterion,
    pub n: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub roi_pixels: Vec<usize>,
    pub obstruction_pixels: Vec<usize>,
    pub chosen: Vec<DesignView>,
    pub pending: Option<DesignView>,
    pub landscape: Option<Landscape>,
    pub angles: Vec<f64>,
    pub offsets: Vec<f64>,
}

impl Snapshot {
    pub fn capture(revision: u64, s: &DesignSession) -> Self {
        let rec = s.reconstruction();
        let p = s.problem();
        Self {
            revision,
            status: s.status(),
            generation: s.belief().generation(),
            criterion: s.criterion(),
            n: p.grid.side(),
            mean: rec.mean,
            std: rec.std,
            roi_pixels: s.roi().roi_indices().to_vec(),
            obstruction_pixels: p
                .obstruction
                .blocked()
                .iter()
                .enumerate()
                .filter_map(|(i, b)| b.then_some(i))
                .collect(),
            chosen: s.chosen().iter().map(DesignView::from).collect(),
            pending: s.pending().map(|o| DesignView {
                angle_deg: o.point.angle_deg,
                offset: o.point.offset,
                value: o.value.raw,
                display: o.value.display,
                active_rays: o.m_active,
            }),
            landscape: s.latest_landscape().cloned(),
            angles: p.candidates.angles().to_vec(),
            offsets: p.candidates.offsets().to_vec(),
        }
    }

    pub fn landscape_view(&self, precision: Precision) -> Option<LandscapeView> {
        self.landscape
            .as_ref()
            .map(|l| LandscapeView::new(l, &self.angles, &self.offsets, precision))
    }

    pub fn view(&self, id: &str, precision: Precision) -> SessionView {
        SessionView {
            id: id.to_string(),
            revision: self.revision,
            status: self.status,
            generation: self.generation,
            criterion: self.criterion,
            n: self.n,
            reconstruction: FloatArray::encode(&self.mean, precision),
            std: FloatArray::encode(&self.std, precision),
            roi_pixels: self.roi_pixels.clone(),
            obstruction_pixels: self.obstruction_pixels.clone(),
            chosen: self.chosen.clone(),
            pending: self.pending,
            landscape: self.landscape_view(precision),
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RevisionBody {
    pub revision: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoiBody {
    pub revision: u64,
    pub roi: RegionConfig,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSpec {
    pub seed: u64,
}

/// Exactly one of `data`, `data_encoded` or `simulate`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureBody {
    pub revision: u64,
    #[serde(default)]
    pub data: Option<Vec<f64>>,
    #[serde(default)]
    pub data_encoded: Option<FloatArray>,
    #[serde(default)]
    pub simulate: Option<SimulateSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevisionReply {
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextReply {
    pub revision: u64,
    pub design: DesignView,
    pub landscape: LandscapeView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasureReply {
    pub revision: u64,
    pub generation: usize,
    pub reconstruction: FloatArray,
    pub std: FloatArray,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopReply {
    pub revision: u64,
    pub reconstruction: FloatArray,
    /// Diagonal of the final posterior covariance.
    pub variance: FloatArray,
    /// Path of the downloadable session archive.
    pub archive: String,
}
