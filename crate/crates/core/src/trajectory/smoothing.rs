//! Savitzky-Golay smoothing.
//!
//! Interior points use the centred least-squares polynomial of the window.
//! The first and last half-windows are evaluated on the polynomial fitted to
//! the first and last full window, so the output has the input's length and
//! polynomials up to `poly_order` pass through unchanged.

use super::VehicleTrack;
use crate::error::{Error, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmoothingStatus {
    Applied,
    /// Track shorter than the window; returned unchanged.
    TooShort,
}

fn check_params(window: usize, poly_order: usize) -> Result<()> {
    if window % 2 == 0 {
        return Err(Error::Parameter(format!("window {window} must be odd")));
    }
    if window <= poly_order {
        return Err(Error::Parameter(format!(
            "window {window} must exceed poly_order {poly_order}"
        )));
    }
    Ok(())
}

/// Hat matrix `A (AᵀA)⁻¹ Aᵀ` of the window: row `r` holds the weights that
/// evaluate the fitted polynomial at window position `r`.
fn projection(window: usize, poly_order: usize) -> DMatrix<f64> {
    let half = (window / 2) as f64;
    let scale = half.max(1.0);
    let design = DMatrix::from_fn(window, poly_order + 1, |i, j| {
        ((i as f64 - half) / scale).powi(j as i32)
    });
    let gram = design.transpose() * &design;
    let inv = gram
        .try_inverse()
        .expect("Vandermonde gram matrix is invertible when window > poly_order");
    &design * inv * design.transpose()
}

/// Smooths a uniformly sampled series. Input shorter than `window` is
/// returned as-is.
pub fn savgol_filter(values: &[f64], window: usize, poly_order: usize) -> Result<Vec<f64>> {
    check_params(window, poly_order)?;
    let n = values.len();
    if n < window {
        return Ok(values.to_vec());
    }
    let hat = projection(window, poly_order);
    let half = window / 2;
    let apply = |row: usize, start: usize| -> f64 {
        (0..window).map(|j| hat[(row, j)] * values[start + j]).sum()
    };

    let mut out = vec![0.0; n];
    for (i, slot) in out.iter_mut().enumerate() {
        *slot = if i < half {
            apply(i, 0)
        } else if i >= n - half {
            apply(window - (n - i), n - window)
        } else {
            apply(half, i - half)
        };
    }
    Ok(out)
}

pub fn smooth_track(
    track: &VehicleTrack,
    window: usize,
    poly_order: usize,
) -> Result<(VehicleTrack, SmoothingStatus)> {
    check_params(window, poly_order)?;
    if track.samples.len() < window {
        return Ok((track.clone(), SmoothingStatus::TooShort));
    }
    let positions: Vec<f64> = track.samples.iter().map(|s| s.position).collect();
    let velocities: Vec<f64> = track.samples.iter().map(|s| s.velocity).collect();
    let positions = savgol_filter(&positions, window, poly_order)?;
    let velocities = savgol_filter(&velocities, window, poly_order)?;

    let mut out = track.clone();
    for ((sample, x), v) in out.samples.iter_mut().zip(positions).zip(velocities) {
        sample.position = x;
        sample.velocity = v.max(0.0);
    }
    Ok((out, SmoothingStatus::Applied))
}

/// Smooths every track in parallel. Returns the tracks and how many were
/// too short to smooth.
pub fn smooth_tracks(
    tracks: &[VehicleTrack],
    window: usize,
    poly_order: usize,
) -> Result<(Vec<VehicleTrack>, usize)> {
    check_params(window, poly_order)?;
    let results: Vec<(VehicleTrack, SmoothingStatus)> = tracks
        .par_iter()
        .map(|t| smooth_track(t, window, poly_order))
        .collect::<Result<_>>()?;
    let short = results
        .iter()
        .filter(|(_, s)| *s == SmoothingStatus::TooShort)
        .count();
    if short > 0 {
        log::warn!("{short} tracks shorter than the {window}-frame smoothing window left unsmoothed");
    }
    Ok((results.into_iter().map(|(t, _)| t).collect(), short))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::TrajectorySample;

    /// Least-squares polynomial through `(x, y)` via normal equations and
    /// Gaussian elimination, evaluated at `at`.
    fn lsq_poly_eval(xs: &[f64], ys: &[f64], order: usize, at: f64) -> f64 {
        let m = order + 1;
        let mut a = vec![vec![0.0; m + 1]; m];
        for r in 0..m {
            for c in 0..m {
                a[r][c] = xs.iter().map(|x| x.powi((r + c) as i32)).sum();
            }
            a[r][m] = xs.iter().zip(ys).map(|(x, y)| x.powi(r as i32) * y).sum();
        }
        for p in 0..m {
            let piv = (p..m).max_by(|&i, &j| a[i][p].abs().total_cmp(&a[j][p].abs())).unwrap();
            a.swap(p, piv);
            for r in 0..m {
                if r != p {
                    let f = a[r][p] / a[p][p];
                    for c in p..=m {
                        a[r][c] -= f * a[p][c];
                    }
                }
            }
        }
        (0..m).map(|i| a[i][m] / a[i][i] * at.powi(i as i32)).sum()
    }

    #[test]
    fn alternating_series_matches_windowed_regression() {
        let ys = [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let out = savgol_filter(&ys, 5, 2).unwrap();
        for centre in 2..5 {
            let xs: Vec<f64> = (centre - 2..=centre + 2).map(|i| i as f64).collect();
            let expect = lsq_poly_eval(&xs, &ys[centre - 2..=centre + 2], 2, centre as f64);
            assert!((out[centre] - expect).abs() < 1e-12, "{centre}: {} vs {expect}", out[centre]);
        }
        // Edges come from the first/last window's fit.
        let xs: Vec<f64> = (0..5).map(|i| i as f64).collect();
        for i in 0..2 {
            let expect = lsq_poly_eval(&xs, &ys[0..5], 2, i as f64);
            assert!((out[i] - expect).abs() < 1e-12);
        }
        let xs: Vec<f64> = (2..7).map(|i| i as f64).collect();
        for i in 5..7 {
            let expect = lsq_poly_eval(&xs, &ys[2..7], 2, i as f64);
            assert!((out[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn polynomials_pass_through() {
        let linear: Vec<f64> = (0..40).map(|i| 3.0 + 0.7 * i as f64).collect();
        let cubic: Vec<f64> = (0..40)
            .map(|i| {
                let t = i as f64 * 0.1;
                1.0 - t + 0.5 * t * t - 0.2 * t * t * t
            })
            .collect();
        for (w, p) in [(5, 1), (21, 3), (7, 2)] {
            let out = savgol_filter(&linear, w, p).unwrap();
            for (a, b) in out.iter().zip(&linear) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let out = savgol_filter(&cubic, 21, 3).unwrap();
        for (a, b) in out.iter().zip(&cubic) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(matches!(savgol_filter(&[1.0; 10], 4, 2), Err(Error::Parameter(_))));
        assert!(matches!(savgol_filter(&[1.0; 10], 3, 3), Err(Error::Parameter(_))));
    }

    fn track(vals: &[(f64, f64)]) -> VehicleTrack {
        VehicleTrack {
            vehicle_id: 1,
            length: 4.0,
            samples: vals
                .iter()
                .enumerate()
                .map(|(i, &(x, v))| TrajectorySample {
                    frame_index: 10 + i as i64,
                    position: x,
                    velocity: v,
                    lane_id: 1,
                    preceding_vehicle_id: None,
                })
                .collect(),
        }
    }

    #[test]
    fn constant_velocity_and_alignment_kept() {
        let vals: Vec<(f64, f64)> = (0..30).map(|i| (i as f64, 10.0)).collect();
        let t = track(&vals);
        let (s, status) = smooth_track(&t, 21, 3).unwrap();
        assert_eq!(status, SmoothingStatus::Applied);
        assert_eq!(s.samples.len(), t.samples.len());
        for (a, b) in s.samples.iter().zip(&t.samples) {
            assert_eq!(a.frame_index, b.frame_index);
            assert!((a.velocity - 10.0).abs() < 1e-9);
            assert!((a.position - b.position).abs() < 1e-9);
        }
    }

    #[test]
    fn short_track_unchanged_and_velocity_clamped() {
        let t = track(&[(0.0, 1.0), (1.0, 1.0)]);
        let (s, status) = smooth_track(&t, 5, 2).unwrap();
        assert_eq!(status, SmoothingStatus::TooShort);
        assert_eq!(s, t);

        let vals: Vec<(f64, f64)> = (0..9).map(|i| (0.0, if i % 2 == 0 { 0.0 } else { 0.2 })).collect();
        let mut vals = vals;
        vals[0].1 = -3.0;
        let (s, _) = smooth_track(&track(&vals), 5, 2).unwrap();
        assert!(s.samples.iter().all(|x| x.velocity >= 0.0));
    }
}
