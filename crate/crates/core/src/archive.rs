//! Self-describing session archives and the recorder that writes them.
//!
//! An archive holds the configuration plus every accepted mutation in order.
//! Replaying the events through a fresh session reproduces the final state
//! bit for bit, because the same floating point operations run in the same
//! order on the same inputs.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::design::{DesignSession, Reconstruction, RoundOutcome};
use crate::error::{Error, Result};
use crate::geometry::DesignPoint;
use crate::simulation::{simulate_measurement, stream_rng};
use crate::targets::RoiMask;

pub const ARCHIVE_FORMAT: &str = "oedct-session/1";

/// One accepted mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum SessionEvent {
    /// New ROI as sorted pixel indices.
    SetRoi { pixels: Vec<usize> },
    Next,
    /// Data for the pending design; `seed` is set when they were simulated.
    Measure {
        data: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionArchive {
    pub format: String,
    pub config: RunConfig,
    pub events: Vec<SessionEvent>,
    /// Chosen designs in measurement order.
    pub designs: Vec<DesignPoint>,
    /// Absorbed data vectors, aligned with `designs`.
    pub data: Vec<Vec<f64>>,
    #[serde(default)]
    pub hyper_trace: Vec<f64>,
}

impl SessionArchive {
    pub fn new(config: RunConfig) -> Self {
        Self {
            format: ARCHIVE_FORMAT.to_string(),
            config,
            events: Vec::new(),
            designs: Vec::new(),
            data: Vec::new(),
            hyper_trace: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("archive serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let a: SessionArchive = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse(format!("archive at {}: {}", e.path(), e.inner())))?;
        if a.format != ARCHIVE_FORMAT {
            return Err(Error::Parse(format!("unsupported archive format {:?}", a.format)));
        }
        a.config.validate()?;
        Ok(a)
    }

    /// Rebuilds the session by replaying every event.
    pub fn replay(&self) -> Result<RecordedSession> {
        let mut rec = RecordedSession::new(self.config.clone())?;
        for ev in &self.events {
            match ev {
                SessionEvent::SetRoi { pixels } => {
                    let roi = RoiMask::from_indices(&rec.session.problem().grid, pixels)?;
                    rec.set_roi(roi)?;
                }
                SessionEvent::Next => {
                    rec.next()?;
                }
                SessionEvent::Measure { data, seed } => {
                    rec.measure_recorded(DVector::from_column_slice(data), *seed)?;
                }
                SessionEvent::Stop => {
                    rec.stop()?;
                }
            }
        }
        Ok(rec)
    }
}

/// A design session that logs each accepted mutation into its archive.
#[derive(Debug, Clone)]
pub struct RecordedSession {
    session: DesignSession,
    archive: SessionArchive,
    truth: Option<DVector<f64>>,
}

impl RecordedSession {
    /// Pixel-list files in `config` are inlined into the archive.
    pub fn new(mut config: RunConfig) -> Result<Self> {
        config.inline_regions()?;
        config.base_dir = Default::default();
        let problem = config.problem()?;
        let prior = config.prior_belief()?;
        let roi = config.roi_mask(&problem.grid)?;
        let session = DesignSession::new(problem, prior, roi, config.criterion)?;
        Ok(Self {
            session,
            archive: SessionArchive::new(config),
            truth: None,
        })
    }

    pub fn session(&self) -> &DesignSession {
        &self.session
    }

    pub fn archive(&self) -> &SessionArchive {
        &self.archive
    }

    pub fn config(&self) -> &RunConfig {
        &self.archive.config
    }

    pub fn set_roi(&mut self, roi: RoiMask) -> Result<()> {
        let pixels = roi.roi_indices().to_vec();
        self.session.set_roi(roi)?;
        self.archive.events.push(SessionEvent::SetRoi { pixels });
        Ok(())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Result<&RoundOutcome> {
        self.session.optimize_next()?;
        self.archive.events.push(SessionEvent::Next);
        Ok(self.session.pending().expect("just computed"))
    }

    /// Absorbs uploaded data for the pending design.
    pub fn measure(&mut self, y: DVector<f64>) -> Result<Reconstruction> {
        self.measure_recorded(y, None)
    }

    /// Simulates data for the pending design from the configured phantom.
    /// The phantom uses the config seed; the noise uses `seed`.
    pub fn measure_simulated(&mut self, seed: u64) -> Result<Reconstruction> {
        let op = self.session.pending_operator()?;
        if self.truth.is_none() {
            self.truth = Some(self.archive.config.truth(self.archive.config.seed)?);
        }
        let truth = self.truth.as_ref().expect("set above");
        let noise = self.session.problem().noise_for(&op);
        let mut rng = stream_rng(seed, self.session.data().len() as u64);
        let y = simulate_measurement(&op, truth, &noise, &mut rng)?;
        self.measure_recorded(y, Some(seed))
    }

    fn measure_recorded(&mut self, y: DVector<f64>, seed: Option<u64>) -> Result<Reconstruction> {
        let point = self.session.pending().ok_or(Error::NoPendingDesign)?.point;
        self.session.absorb_measurement(&y)?;
        let data: Vec<f64> = y.iter().copied().collect();
        self.archive.designs.push(point);
        self.archive.data.push(data.clone());
        self.archive.events.push(SessionEvent::Measure { data, seed });
        Ok(self.session.reconstruction())
    }

    pub fn stop(&mut self) -> Result<Reconstruction> {
        let r = self.session.stop()?;
        self.archive.events.push(SessionEvent::Stop);
        Ok(r)
    }
}
