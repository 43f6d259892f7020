//! The vehicles × risk-features matrix passed between pipeline stages.

use crate::error::{Error, Result};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// The twelve risk indicator features, in canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Feature {
    TtcMin,
    TetT1Max,
    TetT2Max,
    TetT3Max,
    TitT1Max,
    TitT2Max,
    TitT3Max,
    DracMax,
    CpiM1Max,
    CpiM2Max,
    PsdMin,
    PsdMean,
}

impl Feature {
    pub const ALL: [Feature; 12] = [
        Feature::TtcMin,
        Feature::TetT1Max,
        Feature::TetT2Max,
        Feature::TetT3Max,
        Feature::TitT1Max,
        Feature::TitT2Max,
        Feature::TitT3Max,
        Feature::DracMax,
        Feature::CpiM1Max,
        Feature::CpiM2Max,
        Feature::PsdMin,
        Feature::PsdMean,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::TtcMin => "TTC.min",
            Feature::TetT1Max => "TET.t1.max",
            Feature::TetT2Max => "TET.t2.max",
            Feature::TetT3Max => "TET.t3.max",
            Feature::TitT1Max => "TIT.t1.max",
            Feature::TitT2Max => "TIT.t2.max",
            Feature::TitT3Max => "TIT.t3.max",
            Feature::DracMax => "DRAC.max",
            Feature::CpiM1Max => "CPI.m1.max",
            Feature::CpiM2Max => "CPI.m2.max",
            Feature::PsdMin => "PSD.min",
            Feature::PsdMean => "PSD.mean",
        }
    }

    pub fn from_name(name: &str) -> Option<Feature> {
        Feature::ALL.into_iter().find(|f| f.name() == name)
    }

    /// Larger values mean a safer situation (time or distance margins).
    pub fn safer_when_higher(self) -> bool {
        matches!(self, Feature::TtcMin | Feature::PsdMin | Feature::PsdMean)
    }

    pub fn is_cpi(self) -> bool {
        matches!(self, Feature::CpiM1Max | Feature::CpiM2Max)
    }
}

/// Whether a column name is one of the safety-margin features.
pub fn safer_when_higher(name: &str) -> bool {
    Feature::from_name(name).is_some_and(Feature::safer_when_higher)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixState {
    Raw,
    Rectified,
    Standardized,
}

/// Per-column parameters of a z-score transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub vehicle_ids: Vec<i64>,
    pub feature_names: Vec<String>,
    pub values: Array2<f64>,
    pub state: MatrixState,
    /// Set once standardized; maps back to the rectified scale.
    pub scaling: Option<Scaling>,
}

impl FeatureMatrix {
    pub fn new(
        vehicle_ids: Vec<i64>,
        feature_names: Vec<String>,
        values: Array2<f64>,
        state: MatrixState,
    ) -> Result<Self> {
        if values.nrows() != vehicle_ids.len() || values.ncols() != feature_names.len() {
            return Err(Error::Mismatch(format!(
                "matrix is {}x{} but has {} ids and {} names",
                values.nrows(),
                values.ncols(),
                vehicle_ids.len(),
                feature_names.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("feature matrix contains non-finite values".into()));
        }
        Ok(Self {
            vehicle_ids,
            feature_names,
            values: values.as_standard_layout().into_owned(),
            state,
            scaling: None,
        })
    }

    /// A matrix of anonymous columns, ids `0..n`, treated as already rectified.
    pub fn from_rows(values: Array2<f64>) -> Result<Self> {
        let ids = (0..values.nrows() as i64).collect();
        let names = (0..values.ncols()).map(|j| format!("f{j}")).collect();
        Self::new(ids, names, values, MatrixState::Rectified)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Keeps the named columns in the given order.
    pub fn select_columns<S: AsRef<str>>(&self, names: &[S]) -> Result<FeatureMatrix> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.column_index(n.as_ref())
                    .ok_or_else(|| Error::MissingColumn(n.as_ref().to_string()))
            })
            .collect::<Result<_>>()?;
        Ok(self.take_columns(&idx))
    }

    pub fn drop_column(&self, col: usize) -> FeatureMatrix {
        let idx: Vec<usize> = (0..self.ncols()).filter(|&j| j != col).collect();
        self.take_columns(&idx)
    }

    fn take_columns(&self, idx: &[usize]) -> FeatureMatrix {
        let values = self.values.select(Axis(1), idx).as_standard_layout().into_owned();
        let scaling = self.scaling.as_ref().map(|s| Scaling {
            means: idx.iter().map(|&j| s.means[j]).collect(),
            stds: idx.iter().map(|&j| s.stds[j]).collect(),
        });
        FeatureMatrix {
            vehicle_ids: self.vehicle_ids.clone(),
            feature_names: idx.iter().map(|&j| self.feature_names[j].clone()).collect(),
            values,
            state: self.state,
            scaling,
        }
    }

    /// Population statistics per column.
    pub fn column_stats(&self) -> Vec<ColumnStats> {
        self.feature_names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let col = self.values.column(j);
                let n = col.len().max(1) as f64;
                let mean = col.sum() / n;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                ColumnStats {
                    name: name.clone(),
                    mean,
                    std: var.sqrt(),
                    min: col.iter().copied().fold(f64::INFINITY, f64::min),
                    max: col.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["vehicle_id".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header)?;
        for (i, id) in self.vehicle_ids.iter().enumerate() {
            let mut rec = vec![id.to_string()];
            rec.extend(self.values.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    /// Reads `vehicle_id` plus named columns; the state is supplied by the caller.
    pub fn read_csv<R: Read>(reader: R, state: MatrixState) -> Result<FeatureMatrix> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("vehicle_id") {
            return Err(Error::MissingColumn("vehicle_id".into()));
        }
        let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut ids = Vec::new();
        let mut flat = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let id: i64 = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::Mismatch(format!("bad vehicle id `{}`", &rec[0])))?;
            ids.push(id);
            for j in 1..=names.len() {
                let v: f64 = rec.get(j).unwrap_or("").trim().parse().map_err(|_| {
                    Error::Mismatch(format!("bad value in column {} for vehicle {id}", names[j - 1]))
                })?;
                flat.push(v);
            }
        }
        if ids.is_empty() {
            return Err(Error::EmptyInput("feature file has no rows".into()));
        }
        let values = Array2::from_shape_vec((ids.len(), names.len()), flat)
            .map_err(|e| Error::Mismatch(e.to_string()))?;
        FeatureMatrix::new(ids, names, values, state)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load_csv(path: &Path, state: MatrixState) -> Result<FeatureMatrix> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn csv_round_trip_keeps_values_bitwise() {
        let m = FeatureMatrix::new(
            vec![3, 9],
            vec!["TTC.min".into(), "PSD.mean".into()],
            array![[0.1 + 0.2, 7.95], [1e-17, 2.0]],
            MatrixState::Rectified,
        )
        .unwrap();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let back = FeatureMatrix::read_csv(buf.as_slice(), MatrixState::Rectified).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn feature_names_round_trip() {
        for f in Feature::ALL {
            assert_eq!(Feature::from_name(f.name()), Some(f));
        }
        assert!(safer_when_higher("TTC.min"));
        assert!(!safer_when_higher("TET.t1.max"));
    }

    #[test]
    fn select_and_drop_columns() {
        let m = FeatureMatrix::from_rows(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let s = m.select_columns(&["f2", "f0"]).unwrap();
        assert_eq!(s.values, array![[3.0, 1.0], [6.0, 4.0]]);
        let d = m.drop_column(1);
        assert_eq!(d.feature_names, vec!["f0", "f2"]);
        assert!(matches!(m.select_columns(&["nope"]), Err(Error::MissingColumn(_))));
    }
}
