//! Elimination-based model reliance importance.
//!
//! Each feature is removed in turn, the remaining columns are re-standardized
//! and every model is refitted with its unchanged spec. The relative change in
//! bSI against the full-feature baseline is the difference ratio `r`; centring
//! `r` within each model gives the feature-related change `R`. Features whose
//! removal makes clustering worse than average (`R <= 0`) are the ones the
//! models rely on.

use crate::clustering::{registry, ModelSpec};
use crate::error::{Error, Result};
use crate::evaluation::{ClusterWeights, QualityReport};
use crate::features::{FeatureMatrix, MatrixState};
use crate::indicators::standardize;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTable {
    pub features: Vec<String>,
    /// Report label of each model.
    pub models: Vec<String>,
    /// bSI of each model on the full feature set.
    pub baseline: Vec<f64>,
    /// `r[feature][model]`; `None` where the reduced fit failed.
    pub ratios: Vec<Vec<Option<f64>>>,
    /// `R[feature][model]`, centred within each model.
    pub centered: Vec<Vec<Option<f64>>>,
    /// `E_m`: mean ratio of each model.
    pub model_change: Vec<f64>,
    /// Mean of `R` over the models with a value.
    pub aggregate: Vec<f64>,
    /// `[min, max]` of `R` over the models with a value.
    pub range: Vec<(f64, f64)>,
}

impl ImportanceTable {
    /// Assembles the table from difference ratios laid out as `[feature][model]`.
    pub fn from_ratios(
        features: Vec<String>,
        models: Vec<String>,
        baseline: Vec<f64>,
        ratios: Vec<Vec<Option<f64>>>,
    ) -> Result<Self> {
        if ratios.len() != features.len() || ratios.iter().any(|r| r.len() != models.len()) {
            return Err(Error::Mismatch("ratio table does not match features x models".into()));
        }
        let model_change: Vec<f64> = (0..models.len())
            .map(|m| {
                let vals: Vec<f64> = ratios.iter().filter_map(|r| r[m]).collect();
                if vals.is_empty() {
                    f64::NAN
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                }
            })
            .collect();
        let centered: Vec<Vec<Option<f64>>> = ratios
            .iter()
            .map(|row| row.iter().zip(&model_change).map(|(r, e)| r.map(|v| v - e)).collect())
            .collect();
        let mut aggregate = Vec::with_capacity(features.len());
        let mut range = Vec::with_capacity(features.len());
        for (f, row) in features.iter().zip(&centered) {
            let vals: Vec<f64> = row.iter().flatten().copied().collect();
            if vals.len() < row.len() {
                log::warn!(
                    "importance of `{f}` uses {} of {} models; the others failed without it",
                    vals.len(),
                    row.len()
                );
            }
            if vals.is_empty() {
                aggregate.push(f64::NAN);
                range.push((f64::NAN, f64::NAN));
            } else {
                aggregate.push(vals.iter().sum::<f64>() / vals.len() as f64);
                range.push((
                    vals.iter().copied().fold(f64::INFINITY, f64::min),
                    vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                ));
            }
        }
        Ok(Self {
            features,
            models,
            baseline,
            ratios,
            centered,
            model_change,
            aggregate,
            range,
        })
    }

    /// One row per feature (`r` per model, then `R_i` and its range) followed
    /// by an `E_m` row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["feature".to_string()];
        header.extend(self.models.iter().cloned());
        header.extend(["R_i".to_string(), "R_min".to_string(), "R_max".to_string()]);
        w.write_record(&header)?;
        for (i, f) in self.features.iter().enumerate() {
            let mut rec = vec![f.clone()];
            rec.extend(self.ratios[i].iter().map(|&r| cell(r)));
            rec.push(self.aggregate[i].to_string());
            rec.push(self.range[i].0.to_string());
            rec.push(self.range[i].1.to_string());
            w.write_record(&rec)?;
        }
        let mut last = vec!["E_m".to_string()];
        last.extend(self.model_change.iter().map(|e| e.to_string()));
        last.extend([String::new(), String::new(), String::new()]);
        w.write_record(&last)?;
        w.flush().map_err(|e| Error::io("<importance writer>", e))?;
        Ok(())
    }
}

fn bsi_of(spec: &ModelSpec, m: &FeatureMatrix) -> Result<f64> {
    let result = registry().fit(spec, m)?;
    Ok(QualityReport::compute(m, &result.labels, &ClusterWeights::Equal)?.bsi)
}

/// Refits every model once per left-out feature and tabulates the change in bSI.
pub fn elimination_importance(models: &[ModelSpec], m: &FeatureMatrix) -> Result<ImportanceTable> {
    if m.state == MatrixState::Raw {
        return Err(Error::Parameter("feature importance needs a rectified matrix".into()));
    }
    if m.ncols() < 2 {
        return Err(Error::Selection("at least two features are needed".into()));
    }
    if models.is_empty() {
        return Err(Error::Selection("no models to measure importance with".into()));
    }
    let full = standardize(m)?;
    let baseline = models
        .par_iter()
        .map(|spec| {
            let b = bsi_of(spec, &full)
                .map_err(|e| Error::Selection(format!("{} fails on the full feature set: {e}", spec.label())))?;
            if b == 0.0 {
                return Err(Error::Selection(format!(
                    "{} has a zero baseline bSI; ratios are undefined",
                    spec.label()
                )));
            }
            Ok(b)
        })
        .collect::<Result<Vec<f64>>>()?;

    let reduced: Vec<FeatureMatrix> = (0..m.ncols())
        .map(|i| standardize(&m.drop_column(i)))
        .collect::<Result<_>>()?;
    let cells: Vec<Option<f64>> = (0..m.ncols() * models.len())
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / models.len(), cell % models.len());
            match bsi_of(&models[j], &reduced[i]) {
                Ok(si) => Some((si - baseline[j]) / baseline[j]),
                Err(e) => {
                    log::warn!("{} fails without `{}`: {e}", models[j].label(), m.feature_names[i]);
                    None
                }
            }
        })
        .collect();
    let ratios = cells.chunks(models.len()).map(<[_]>::to_vec).collect();
    ImportanceTable::from_ratios(
        m.feature_names.clone(),
        models.iter().map(ModelSpec::label).collect(),
        baseline,
        ratios,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    /// Kept features, most relied upon (most negative `R_i`) first.
    pub selected: Vec<String>,
    pub dropped: Vec<String>,
}

/// Keeps the features whose aggregate importance is not positive.
pub fn select_features(table: &ImportanceTable) -> Result<FeatureSelection> {
    select_by_importance(&table.features, &table.aggregate)
}

/// [`select_features`] on a bare `(name, R_i)` list.
pub fn select_by_importance(features: &[String], importance: &[f64]) -> Result<FeatureSelection> {
    if features.len() != importance.len() {
        return Err(Error::Mismatch("one importance value per feature is required".into()));
    }
    if let Some(i) = importance.iter().position(|v| v.is_nan()) {
        return Err(Error::Selection(format!("no model produced an importance for `{}`", features[i])));
    }
    let mut order: Vec<usize> = (0..features.len()).collect();
    order.sort_by(|&a, &b| importance[a].total_cmp(&importance[b]));
    let (keep, drop): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| importance[i] <= 0.0);
    if keep.is_empty() {
        return Err(Error::Selection(
            "every feature has positive importance; the clustering looks degenerate, review manually".into(),
        ));
    }
    Ok(FeatureSelection {
        selected: keep.into_iter().map(|i| features[i].clone()).collect(),
        dropped: drop.into_iter().map(|i| features[i].clone()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::signal_with_noise;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn models() -> Vec<ModelSpec> {
        vec![ModelSpec::new("kmeans_pp", Some(2)), ModelSpec::new("ward", Some(2))]
    }

    #[test]
    fn centering_sums_to_zero() {
        let (m, _) = signal_with_noise(40, 3, 1);
        let t = elimination_importance(&models(), &m).unwrap();
        for j in 0..t.models.len() {
            let s: f64 = t.centered.iter().filter_map(|r| r[j]).sum();
            assert!(s.abs() < 1e-9);
        }
    }

    #[test]
    fn informative_feature_is_most_relied_upon() {
        let (m, _) = signal_with_noise(40, 3, 2);
        let t = elimination_importance(&models(), &m).unwrap();
        let sel = select_features(&t).unwrap();
        assert_eq!(sel.selected[0], "signal");
        for j in 0..t.models.len() {
            let signal = t.centered[0][j].unwrap();
            assert!(t.centered[1..].iter().all(|r| r[j].unwrap() > signal));
        }
    }

    #[test]
    fn duplicated_feature_matters_less_than_informative_one() {
        // A weak, noisy copy of the group signal appears twice; the clean
        // signal appears once.
        let (base, truth) = signal_with_noise(40, 1, 3);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let weak = rand_distr::Normal::new(0.0, 6.0).unwrap();
        let mut values = Array2::zeros((base.nrows(), 4));
        values.slice_mut(ndarray::s![.., 0..2]).assign(&base.values);
        for (i, &g) in truth.iter().enumerate() {
            let w = g as f64 * 8.0 + rand_distr::Distribution::sample(&weak, &mut rng);
            values[[i, 2]] = w;
            values[[i, 3]] = w;
        }
        let m = FeatureMatrix::new(
            base.vehicle_ids.clone(),
            vec!["signal".into(), "noise1".into(), "weak".into(), "weak_copy".into()],
            values,
            MatrixState::Rectified,
        )
        .unwrap();
        let t = elimination_importance(&models(), &m).unwrap();
        for j in 0..2 {
            assert!(t.centered[3][j].unwrap().abs() < t.centered[0][j].unwrap().abs());
        }
    }

    #[test]
    fn column_order_only_permutes_rows() {
        let (m, _) = signal_with_noise(30, 2, 4);
        let t = elimination_importance(&models(), &m).unwrap();
        let names: Vec<String> = m.feature_names.iter().rev().cloned().collect();
        let t2 = elimination_importance(&models(), &m.select_columns(&names).unwrap()).unwrap();
        for (i, f) in t.features.iter().enumerate() {
            let i2 = t2.features.iter().position(|g| g == f).unwrap();
            assert!((t.aggregate[i] - t2.aggregate[i2]).abs() < 1e-9);
        }
    }

    #[test]
    fn model_order_does_not_change_aggregate() {
        let (m, _) = signal_with_noise(30, 2, 5);
        let mut specs = models();
        let a = elimination_importance(&specs, &m).unwrap();
        specs.reverse();
        let b = elimination_importance(&specs, &m).unwrap();
        for (x, y) in a.aggregate.iter().zip(&b.aggregate) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_rules() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let all = select_by_importance(&names, &[-0.1, -0.3, 0.0]).unwrap();
        assert_eq!(all.selected, vec!["b", "a", "c"]);
        assert!(all.dropped.is_empty());
        let one = select_by_importance(&names, &[-0.1, 0.2, -0.05]).unwrap();
        assert_eq!(one.dropped, vec!["b"]);
        assert!(select_by_importance(&names, &[0.1, 0.2, 0.3]).is_err());
    }

    #[test]
    fn reported_importances_select_eight_features() {
        let rows = [
            ("TET.t1.max", -0.668),
            ("TIT.t1.max", -0.408),
            ("TET.t3.max", -0.317),
            ("CPI.m2.max", -0.241),
            ("TIT.t3.max", -0.209),
            ("TET.t2.max", -0.128),
            ("TIT.t2.max", -0.126),
            ("CPI.m1.max", -0.085),
            ("DRAC.max", 0.143),
            ("TTC.min", 0.177),
            ("PSD.min", 0.532),
            ("PSD.mean", 1.331),
        ];
        let names: Vec<String> = rows.iter().rev().map(|r| r.0.to_string()).collect();
        let values: Vec<f64> = rows.iter().rev().map(|r| r.1).collect();
        let sel = select_by_importance(&names, &values).unwrap();
        let expected: Vec<&str> = rows[..8].iter().map(|r| r.0).collect();
        assert_eq!(sel.selected, expected);
        assert_eq!(sel.dropped, vec!["DRAC.max", "TTC.min", "PSD.min", "PSD.mean"]);
    }

    #[test]
    fn missing_cells_are_skipped_in_centering() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let ratios: Vec<Vec<Option<f64>>> = (0..5)
            .map(|i| (0..3).map(|j| if i == 2 && j == 1 { None } else { Some(rng.random::<f64>()) }).collect())
            .collect();
        let t = ImportanceTable::from_ratios(
            (0..5).map(|i| format!("f{i}")).collect(),
            (0..3).map(|j| format!("m{j}")).collect(),
            vec![0.5; 3],
            ratios.clone(),
        )
        .unwrap();
        let e1: f64 = ratios.iter().filter_map(|r| r[1]).sum::<f64>() / 4.0;
        assert!((t.model_change[1] - e1).abs() < 1e-15);
        assert_eq!(t.centered[2][1], None);
        let r2: Vec<f64> = [0, 2].iter().map(|&j| ratios[2][j].unwrap() - t.model_change[j]).collect();
        assert!((t.aggregate[2] - (r2[0] + r2[1]) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn csv_has_feature_rows_and_model_row() {
        let t = ImportanceTable::from_ratios(
            vec!["x".into(), "y".into()],
            vec!["m".into()],
            vec![0.4],
            vec![vec![Some(0.1)], vec![Some(0.3)]],
        )
        .unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "feature,m,R_i,R_min,R_max");
        assert!(lines[1].starts_with("x,0.1,-0.1"));
        assert!(lines[3].starts_with("E_m,0.2"));
    }
}
