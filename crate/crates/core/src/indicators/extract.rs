use super::{
    cpi, drac_series, min_window_mean_ttc, psd_series, tet_tit, ttc_series, CpiMode,
    IndicatorConfig,
};
use crate::error::{Error, Result};
use crate::features::{Feature, FeatureMatrix, MatrixState, Scaling};
use crate::trajectory::{ConflictSeries, VehicleTrack};
use ndarray::Array2;
use rayon::prelude::*;
use std::collections::HashMap;

/// Spreads per-record values onto the vehicle's full frame sequence; frames
/// without a leader stay `None`.
fn align(track: &VehicleTrack, cs: &ConflictSeries, values: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut out = vec![None; track.samples.len()];
    let mut pos = 0;
    for (rec, v) in cs.records.iter().zip(values) {
        while pos < track.samples.len() && track.samples[pos].frame_index < rec.frame_index {
            pos += 1;
        }
        if pos < track.samples.len() && track.samples[pos].frame_index == rec.frame_index {
            out[pos] = *v;
        }
    }
    out
}

fn max_or_zero(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().fold(0.0, f64::max)
}

fn vehicle_row(track: &VehicleTrack, cs: Option<&ConflictSeries>, cfg: &IndicatorConfig) -> Result<[f64; 12]> {
    let empty = ConflictSeries {
        follower_id: track.vehicle_id,
        records: Vec::new(),
    };
    let cs = cs.unwrap_or(&empty);
    let plan = cfg.window_plan()?;
    let tick = cfg.tick;

    let ttc = align(track, cs, &ttc_series(cs));
    let drac = align(track, cs, &drac_series(cs, cfg.drac_cap));
    let psd: Vec<f64> = psd_series(cs, cfg.psd_decel).into_iter().flatten().collect();

    let ttc_min = min_window_mean_ttc(&ttc, &plan).unwrap_or(cfg.ttc_cap);
    let mut tet = [0.0; 3];
    let mut tit = [0.0; 3];
    for (i, &star) in cfg.ttc_thresholds.iter().enumerate() {
        let windows = tet_tit(&ttc, star, &plan, tick);
        tet[i] = max_or_zero(windows.iter().map(|w| w.0));
        tit[i] = max_or_zero(windows.iter().map(|w| w.1));
    }
    let drac_max = max_or_zero(drac.iter().flatten().copied());
    let cpi_m1 = max_or_zero(cpi(&drac, cfg.madr(CpiMode::M1), &plan, tick)?);
    let cpi_m2 = max_or_zero(cpi(&drac, cfg.madr(CpiMode::M2), &plan, tick)?);
    let (psd_min, psd_mean) = if psd.is_empty() {
        (cfg.psd_cap, cfg.psd_cap)
    } else {
        (
            psd.iter().copied().fold(f64::INFINITY, f64::min),
            psd.iter().sum::<f64>() / psd.len() as f64,
        )
    };

    Ok([
        ttc_min, tet[0], tet[1], tet[2], tit[0], tit[1], tit[2], drac_max, cpi_m1, cpi_m2, psd_min,
        psd_mean,
    ])
}

/// Builds the raw 12-feature matrix, one row per vehicle ordered by id.
///
/// Vehicles without defined conflict frames get the safe-limit row
/// (TTC and PSD at their caps, exposure features at zero).
pub fn extract_features(
    tracks: &[VehicleTrack],
    conflicts: &[ConflictSeries],
    cfg: &IndicatorConfig,
) -> Result<FeatureMatrix> {
    if tracks.is_empty() {
        return Err(Error::EmptyInput("no vehicle tracks".into()));
    }
    cfg.validate()?;
    let by_id: HashMap<i64, &ConflictSeries> = conflicts.iter().map(|c| (c.follower_id, c)).collect();
    let mut order: Vec<&VehicleTrack> = tracks.iter().collect();
    order.sort_by_key(|t| t.vehicle_id);

    let rows: Vec<[f64; 12]> = order
        .par_iter()
        .map(|t| vehicle_row(t, by_id.get(&t.vehicle_id).copied(), cfg))
        .collect::<Result<_>>()?;

    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let values = Array2::from_shape_vec((rows.len(), 12), flat).expect("12 values per row");
    FeatureMatrix::new(
        order.iter().map(|t| t.vehicle_id).collect(),
        Feature::ALL.iter().map(|f| f.name().to_string()).collect(),
        values,
        MatrixState::Raw,
    )
}

fn cap_for(name: &str, cfg: &IndicatorConfig) -> Option<f64> {
    match Feature::from_name(name)? {
        Feature::TtcMin => Some(cfg.ttc_cap),
        Feature::PsdMin | Feature::PsdMean => Some(cfg.psd_cap),
        Feature::DracMax => Some(cfg.drac_cap),
        _ => None,
    }
}

/// Suppresses the "sufficiently safe" tail: values above a feature's cap are
/// clamped (or compressed by `safety_scale` when it is positive).
pub fn rectify(m: &FeatureMatrix, cfg: &IndicatorConfig) -> Result<FeatureMatrix> {
    if m.state != MatrixState::Raw {
        return Err(Error::Parameter(format!(
            "rectify expects a raw matrix, got {:?}",
            m.state
        )));
    }
    cfg.validate()?;
    let lambda = cfg.safety_scale;
    let mut out = m.clone();
    for (j, name) in m.feature_names.iter().enumerate() {
        let Some(cap) = cap_for(name, cfg) else { continue };
        out.values.column_mut(j).mapv_inplace(|v| {
            if v > cap {
                cap + lambda * (v - cap)
            } else {
                v
            }
        });
    }
    out.state = MatrixState::Rectified;
    Ok(out)
}

/// Per-column z-score with population standard deviation. Constant columns
/// become zeros.
pub fn standardize(m: &FeatureMatrix) -> Result<FeatureMatrix> {
    if m.state == MatrixState::Raw {
        return Err(Error::Parameter("standardize expects a rectified matrix".into()));
    }
    if m.nrows() == 0 {
        return Err(Error::EmptyInput("no rows to standardize".into()));
    }
    let n = m.nrows() as f64;
    let mut out = m.clone();
    let mut means = Vec::with_capacity(m.ncols());
    let mut stds = Vec::with_capacity(m.ncols());
    for j in 0..m.ncols() {
        let mut col = out.values.column_mut(j);
        let mean = col.sum() / n;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std > 1e-12 {
            col.mapv_inplace(|v| (v - mean) / std);
        } else {
            log::debug!("column `{}` is constant; standardized to zeros", m.feature_names[j]);
            col.fill(0.0);
        }
        means.push(mean);
        stds.push(std);
    }
    out.state = MatrixState::Standardized;
    // Keep the first scaling so reports map back to the rectified scale.
    out.scaling = Some(m.scaling.clone().unwrap_or(Scaling { means, stds }));
    Ok(out)
}
