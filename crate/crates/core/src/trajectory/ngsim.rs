use super::{TrajectorySample, VehicleTrack};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

const FEET_TO_METRES: f64 = 0.3048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthUnit {
    #[default]
    Feet,
    Metres,
}

impl LengthUnit {
    fn factor(self) -> f64 {
        match self {
            LengthUnit::Feet => FEET_TO_METRES,
            LengthUnit::Metres => 1.0,
        }
    }
}

impl std::str::FromStr for LengthUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "feet" | "ft" => Ok(LengthUnit::Feet),
            "metres" | "meters" | "m" => Ok(LengthUnit::Metres),
            other => Err(Error::Parameter(format!("unknown unit `{other}`"))),
        }
    }
}

/// Header names of the mandatory columns. Defaults follow the public US-101 schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnMap {
    pub vehicle_id: String,
    pub frame_id: String,
    pub local_y: String,
    pub velocity: String,
    pub length: String,
    pub lane_id: String,
    pub preceding: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            vehicle_id: "Vehicle_ID".into(),
            frame_id: "Frame_ID".into(),
            local_y: "Local_Y".into(),
            velocity: "v_Vel".into(),
            length: "v_Length".into(),
            lane_id: "Lane_ID".into(),
            preceding: "Preceding".into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    /// One track per vehicle, ordered by vehicle id.
    pub tracks: Vec<VehicleTrack>,
    /// Rows missing or failing to parse a mandatory field.
    pub malformed_rows: usize,
    /// Rows repeating an already seen (vehicle, frame) pair.
    pub duplicate_rows: usize,
}

impl IngestReport {
    pub fn dropped_rows(&self) -> usize {
        self.malformed_rows + self.duplicate_rows
    }
}

pub fn parse_ngsim(path: &Path, unit: LengthUnit, columns: &ColumnMap) -> Result<IngestReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_ngsim_reader(file, unit, columns)
}

struct Indices {
    vehicle_id: usize,
    frame_id: usize,
    local_y: usize,
    velocity: usize,
    length: usize,
    lane_id: usize,
    preceding: usize,
}

fn locate(headers: &csv::StringRecord, columns: &ColumnMap) -> Result<Indices> {
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    Ok(Indices {
        vehicle_id: find(&columns.vehicle_id)?,
        frame_id: find(&columns.frame_id)?,
        local_y: find(&columns.local_y)?,
        velocity: find(&columns.velocity)?,
        length: find(&columns.length)?,
        lane_id: find(&columns.lane_id)?,
        preceding: find(&columns.preceding)?,
    })
}

fn parse_int(record: &csv::StringRecord, idx: usize) -> Option<i64> {
    let raw = record.get(idx)?.trim();
    raw.parse::<i64>()
        .ok()
        .or_else(|| raw.parse::<f64>().ok().filter(|v| v.fract() == 0.0).map(|v| v as i64))
}

fn parse_real(record: &csv::StringRecord, idx: usize) -> Option<f64> {
    record.get(idx)?.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn parse_ngsim_reader<R: Read>(
    reader: R,
    unit: LengthUnit,
    columns: &ColumnMap,
) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().all(|h| h.trim().is_empty()) {
        return Err(Error::EmptyInput("trajectory file has no header".into()));
    }
    let idx = locate(&headers, columns)?;
    let factor = unit.factor();

    let mut by_vehicle: BTreeMap<i64, (f64, BTreeMap<i64, TrajectorySample>)> = BTreeMap::new();
    let mut report = IngestReport::default();
    let mut rows = 0usize;

    for record in rdr.records() {
        let record = record?;
        rows += 1;
        let parsed = (|| {
            let vehicle = parse_int(&record, idx.vehicle_id)?;
            let frame = parse_int(&record, idx.frame_id)?;
            let y = parse_real(&record, idx.local_y)?;
            let v = parse_real(&record, idx.velocity)?;
            let len = parse_real(&record, idx.length)?.max(0.0);
            let lane = parse_int(&record, idx.lane_id)?;
            let preceding = parse_int(&record, idx.preceding)?;
            (len > 0.0).then_some((vehicle, frame, y, v, len, lane, preceding))
        })();
        let Some((vehicle, frame, y, v, len, lane, preceding)) = parsed else {
            report.malformed_rows += 1;
            continue;
        };

        let sample = TrajectorySample {
            frame_index: frame,
            position: y * factor,
            velocity: v * factor,
            lane_id: lane,
            preceding_vehicle_id: (preceding > 0).then_some(preceding),
        };
        let (_, frames) = by_vehicle
            .entry(vehicle)
            .or_insert_with(|| (len * factor, BTreeMap::new()));
        match frames.entry(frame) {
            Entry::Vacant(slot) => {
                slot.insert(sample);
            }
            Entry::Occupied(_) => report.duplicate_rows += 1,
        }
    }

    if rows == 0 {
        return Err(Error::EmptyInput("trajectory file has no data rows".into()));
    }

    report.tracks = by_vehicle
        .into_iter()
        .map(|(vehicle_id, (length, frames))| VehicleTrack {
            vehicle_id,
            length,
            samples: frames.into_values().collect(),
        })
        .collect();
    if report.malformed_rows + report.duplicate_rows > 0 {
        log::warn!(
            "dropped {} malformed and {} duplicate rows",
            report.malformed_rows,
            report.duplicate_rows
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "Vehicle_ID,Frame_ID,Local_Y,v_Vel,v_Length,Lane_ID,Preceding\n";

    fn parse(body: &str, unit: LengthUnit) -> Result<IngestReport> {
        let text = format!("{HEADER}{body}");
        parse_ngsim_reader(text.as_bytes(), unit, &ColumnMap::default())
    }

    #[test]
    fn converts_feet_to_metres() {
        let r = parse("5,100,328.084,32.8084,16.404,2,0\n", LengthUnit::Feet).unwrap();
        assert_eq!(r.tracks.len(), 1);
        let t = &r.tracks[0];
        assert!((t.length - 5.0).abs() < 1e-3);
        assert!((t.samples[0].position - 100.0).abs() < 1e-3);
        assert!((t.samples[0].velocity - 10.0).abs() < 1e-3);
        assert_eq!(t.samples[0].preceding_vehicle_id, None);
    }

    #[test]
    fn singleton_passthrough() {
        let r = parse("1,1,10,5,4,1,0\n", LengthUnit::Metres).unwrap();
        assert_eq!(r.tracks.len(), 1);
        assert_eq!(r.tracks[0].samples.len(), 1);
        assert_eq!(r.dropped_rows(), 0);
    }

    #[test]
    fn duplicate_frame_keeps_first_row() {
        let r = parse("1,1,10,5,4,1,0\n1,1,99,5,4,1,0\n", LengthUnit::Metres).unwrap();
        assert_eq!(r.tracks[0].samples.len(), 1);
        assert_eq!(r.tracks[0].samples[0].position, 10.0);
        assert_eq!(r.duplicate_rows, 1);
    }

    #[test]
    fn malformed_rows_are_counted() {
        let r = parse("1,1,10,5,4,1,0\n2,1,,5,4,1,0\n3,x,1,1,1,1,0\n", LengthUnit::Metres).unwrap();
        assert_eq!(r.tracks.len(), 1);
        assert_eq!(r.malformed_rows, 2);
    }

    #[test]
    fn missing_column_is_named() {
        let text = "Vehicle_ID,Frame_ID,Local_Y,v_Vel,v_Length,Lane_ID\n1,1,1,1,1,1\n";
        let err = parse_ngsim_reader(text.as_bytes(), LengthUnit::Feet, &ColumnMap::default())
            .unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "Preceding"), "{err}");
    }

    #[test]
    fn empty_file_is_rejected() {
        let err = parse_ngsim_reader("".as_bytes(), LengthUnit::Feet, &ColumnMap::default())
            .unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
        let err = parse("", LengthUnit::Feet).unwrap_err();
        assert!(matches!(err, Error::EmptyInput(_)));
    }

    #[test]
    fn remapped_columns() {
        let cols = ColumnMap {
            vehicle_id: "id".into(),
            ..ColumnMap::default()
        };
        let text = "id,Frame_ID,Local_Y,v_Vel,v_Length,Lane_ID,Preceding\n7,3,1,1,1,1,2\n";
        let r = parse_ngsim_reader(text.as_bytes(), LengthUnit::Metres, &cols).unwrap();
        assert_eq!(r.tracks[0].vehicle_id, 7);
        assert_eq!(r.tracks[0].samples[0].preceding_vehicle_id, Some(2));
    }

    #[test]
    fn samples_sorted_by_frame() {
        let r = parse("1,3,3,1,4,1,0\n1,1,1,1,4,1,0\n1,2,2,1,4,1,0\n", LengthUnit::Metres).unwrap();
        let frames: Vec<i64> = r.tracks[0].samples.iter().map(|s| s.frame_index).collect();
        assert_eq!(frames, vec![1, 2, 3]);
    }
}
