use super::VehicleTrack;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Follower/leader state at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictRecord {
    pub frame_index: i64,
    pub leader_id: i64,
    /// Bumper-to-bumper spacing `x_leader - x_follower - L_leader`, metres.
    pub gap: f64,
    /// Closing speed `v_follower - v_leader`, m/s. Positive while closing.
    pub relative_speed: f64,
    pub follower_speed: f64,
    /// The raw gap fell below the minimum and was clamped.
    pub gap_clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictSeries {
    pub follower_id: i64,
    pub records: Vec<ConflictRecord>,
}

#[derive(Debug, Clone, Default)]
pub struct PairingReport {
    /// One series per input track, same order.
    pub series: Vec<ConflictSeries>,
    /// Frames whose preceding id names a vehicle not in the data.
    pub unknown_leader_frames: usize,
    /// Frames where the leader was absent or in another lane.
    pub unmatched_frames: usize,
    pub clamped_frames: usize,
}

/// Pairs each follower frame with its preceding vehicle at the same frame
/// and lane. Gaps below `min_gap` are clamped to it and flagged.
pub fn build_conflict_series(tracks: &[VehicleTrack], min_gap: f64) -> PairingReport {
    let index: HashMap<i64, &VehicleTrack> = tracks.iter().map(|t| (t.vehicle_id, t)).collect();
    let mut report = PairingReport::default();

    for track in tracks {
        let mut records = Vec::new();
        for sample in &track.samples {
            let Some(leader_id) = sample.preceding_vehicle_id else {
                continue;
            };
            let Some(leader) = index.get(&leader_id) else {
                report.unknown_leader_frames += 1;
                continue;
            };
            let Some(lead) = leader
                .sample_at(sample.frame_index)
                .filter(|l| l.lane_id == sample.lane_id)
            else {
                report.unmatched_frames += 1;
                continue;
            };
            let raw_gap = lead.position - sample.position - leader.length;
            let gap_clamped = raw_gap < min_gap;
            if gap_clamped {
                report.clamped_frames += 1;
            }
            records.push(ConflictRecord {
                frame_index: sample.frame_index,
                leader_id,
                gap: if gap_clamped { min_gap } else { raw_gap },
                relative_speed: sample.velocity - lead.velocity,
                follower_speed: sample.velocity,
                gap_clamped,
            });
        }
        report.series.push(ConflictSeries {
            follower_id: track.vehicle_id,
            records,
        });
    }
    if report.unknown_leader_frames > 0 {
        log::warn!(
            "{} frames reference unknown preceding vehicles",
            report.unknown_leader_frames
        );
    }
    if report.clamped_frames > 0 {
        log::warn!("{} frames had gaps clamped to {min_gap} m", report.clamped_frames);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::TrajectorySample;

    fn sample(frame: i64, x: f64, v: f64, lane: i64, lead: Option<i64>) -> TrajectorySample {
        TrajectorySample {
            frame_index: frame,
            position: x,
            velocity: v,
            lane_id: lane,
            preceding_vehicle_id: lead,
        }
    }

    #[test]
    fn gap_subtracts_leader_length() {
        let tracks = vec![
            VehicleTrack {
                vehicle_id: 1,
                length: 4.0,
                samples: vec![sample(1, 0.0, 15.0, 1, Some(2))],
            },
            VehicleTrack {
                vehicle_id: 2,
                length: 5.0,
                samples: vec![sample(1, 25.0, 5.0, 1, None)],
            },
        ];
        let r = build_conflict_series(&tracks, 0.1);
        let rec = r.series[0].records[0];
        assert_eq!(rec.gap, 20.0);
        assert_eq!(rec.relative_speed, 10.0);
        assert_eq!(rec.follower_speed, 15.0);
        assert!(r.series[1].records.is_empty());
    }

    #[test]
    fn lane_change_leaves_hole() {
        let f: Vec<_> = (0..5).map(|i| sample(i, i as f64, 10.0, 1, Some(2))).collect();
        let l: Vec<_> = (0..5)
            .map(|i| sample(i, 50.0 + i as f64, 9.0, if i == 2 || i == 3 { 2 } else { 1 }, None))
            .collect();
        let tracks = vec![
            VehicleTrack { vehicle_id: 1, length: 4.0, samples: f },
            VehicleTrack { vehicle_id: 2, length: 4.0, samples: l },
        ];
        let r = build_conflict_series(&tracks, 0.1);
        let frames: Vec<i64> = r.series[0].records.iter().map(|c| c.frame_index).collect();
        assert_eq!(frames, vec![0, 1, 4]);
        assert_eq!(r.unmatched_frames, 2);
    }

    #[test]
    fn unknown_leader_skipped_and_counted() {
        let tracks = vec![VehicleTrack {
            vehicle_id: 1,
            length: 4.0,
            samples: vec![sample(0, 0.0, 1.0, 1, Some(99)), sample(1, 0.1, 1.0, 1, Some(99))],
        }];
        let r = build_conflict_series(&tracks, 0.1);
        assert!(r.series[0].records.is_empty());
        assert_eq!(r.unknown_leader_frames, 2);
    }

    #[test]
    fn overlap_is_clamped_and_flagged() {
        let tracks = vec![
            VehicleTrack {
                vehicle_id: 1,
                length: 4.0,
                samples: vec![sample(0, 10.0, 5.0, 1, Some(2))],
            },
            VehicleTrack {
                vehicle_id: 2,
                length: 4.0,
                samples: vec![sample(0, 12.0, 4.0, 1, None)],
            },
        ];
        let r = build_conflict_series(&tracks, 0.1);
        let rec = r.series[0].records[0];
        assert_eq!(rec.gap, 0.1);
        assert!(rec.gap_clamped);
        assert_eq!(r.clamped_frames, 1);
    }
}
