//! Vehicle trajectory ingestion: NGSIM parsing, signal smoothing and
//! follower/leader conflict series.

mod conflict;
mod ngsim;
mod smoothing;

pub use conflict::{build_conflict_series, ConflictRecord, ConflictSeries, PairingReport};
pub use ngsim::{parse_ngsim, parse_ngsim_reader, ColumnMap, IngestReport, LengthUnit};
pub use smoothing::{savgol_filter, smooth_track, smooth_tracks, SmoothingStatus};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Seconds per NGSIM frame.
pub const FRAME_SECONDS: f64 = 0.1;

/// One observation of a vehicle at a frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub frame_index: i64,
    /// Longitudinal position in metres.
    pub position: f64,
    /// Speed in metres per second.
    pub velocity: f64,
    pub lane_id: i64,
    pub preceding_vehicle_id: Option<i64>,
}

/// A single vehicle's time series, ordered by frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleTrack {
    pub vehicle_id: i64,
    /// Vehicle length in metres.
    pub length: f64,
    pub samples: Vec<TrajectorySample>,
}

impl VehicleTrack {
    /// Sample at `frame`, if the vehicle is present then.
    pub fn sample_at(&self, frame: i64) -> Option<&TrajectorySample> {
        self.samples
            .binary_search_by_key(&frame, |s| s.frame_index)
            .ok()
            .map(|i| &self.samples[i])
    }

    /// Presence duration in seconds (frame count times the frame period).
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 * FRAME_SECONDS
    }
}

/// Writes tracks in the compact binary format used between CLI stages.
pub fn save_tracks(path: &Path, tracks: &[VehicleTrack]) -> Result<()> {
    let bytes = bincode::serialize(tracks)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tracks(path: &Path) -> Result<Vec<VehicleTrack>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(bincode::deserialize(&bytes)?)
}
