//! Surrogate conflict indicators (TTC, TET, TIT, DRAC, CPI, PSD) and their
//! aggregation into per-vehicle risk features.

mod extract;

pub use extract::{extract_features, rectify, standardize};

use crate::error::{Error, Result};
use crate::trajectory::ConflictSeries;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use std::ops::Range;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndicatorConfig {
    /// TTC thresholds t1 < t2 < t3, seconds.
    pub ttc_thresholds: [f64; 3],
    /// Sampling interval, seconds.
    pub tick: f64,
    /// Aggregation window, seconds.
    pub window: f64,
    /// Trailing partial windows at least this long (seconds) are kept,
    /// shorter ones are merged into the previous window.
    pub min_partial_window: f64,
    /// Acceptable maximum deceleration for PSD, m/s².
    pub psd_decel: f64,
    /// Fixed MADR, m/s².
    pub madr_m1: f64,
    /// Mean and standard deviation of the Gaussian MADR, m/s².
    pub madr_m2: (f64, f64),
    pub drac_cap: f64,
    pub ttc_cap: f64,
    pub psd_cap: f64,
    /// Slope applied beyond a cap by the rectifier; 0 is a hard clamp.
    pub safety_scale: f64,
}

impl Default for IndicatorConfig {
    fn default() -> Self {
        Self {
            ttc_thresholds: [2.0, 3.0, 4.0],
            tick: 0.1,
            window: 60.0,
            min_partial_window: 10.0,
            psd_decel: 3.35,
            madr_m1: 8.45,
            madr_m2: (8.45, 1.40),
            drac_cap: 9.8,
            ttc_cap: 7.95,
            psd_cap: 2.0,
            safety_scale: 0.0,
        }
    }
}

impl IndicatorConfig {
    pub fn validate(&self) -> Result<()> {
        let [t1, t2, t3] = self.ttc_thresholds;
        if !(0.0 < t1 && t1 < t2 && t2 < t3) {
            return Err(Error::Parameter(format!(
                "TTC thresholds must satisfy 0 < t1 < t2 < t3, got {:?}",
                self.ttc_thresholds
            )));
        }
        if !(self.tick > 0.0) {
            return Err(Error::Parameter("tick must be positive".into()));
        }
        let ratio = self.window / self.tick;
        if !(self.window > 0.0) || (ratio - ratio.round()).abs() > 1e-6 {
            return Err(Error::Parameter(format!(
                "window {} s must be a positive multiple of tick {} s",
                self.window, self.tick
            )));
        }
        if self.min_partial_window < 0.0 || self.min_partial_window > self.window {
            return Err(Error::Parameter("min_partial_window must lie in [0, window]".into()));
        }
        for (name, v) in [
            ("psd_decel", self.psd_decel),
            ("madr_m1", self.madr_m1),
            ("drac_cap", self.drac_cap),
            ("ttc_cap", self.ttc_cap),
            ("psd_cap", self.psd_cap),
        ] {
            if !(v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        MadrModel::Gaussian {
            mean: self.madr_m2.0,
            std: self.madr_m2.1,
        }
        .validate()?;
        if !(0.0..1.0).contains(&self.safety_scale) {
            return Err(Error::Parameter("safety_scale must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn window_plan(&self) -> Result<WindowPlan> {
        WindowPlan::new(self.window, self.min_partial_window, self.tick)
    }

    pub fn madr(&self, mode: CpiMode) -> MadrModel {
        match mode {
            CpiMode::M1 => MadrModel::Fixed(self.madr_m1),
            CpiMode::M2 => MadrModel::Gaussian {
                mean: self.madr_m2.0,
                std: self.madr_m2.1,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpiMode {
    M1,
    M2,
}

/// Maximum available deceleration rate model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MadrModel {
    Fixed(f64),
    Gaussian { mean: f64, std: f64 },
}

impl MadrModel {
    fn validate(&self) -> Result<()> {
        match *self {
            MadrModel::Gaussian { std, .. } if !(std > 0.0) => Err(Error::Parameter(format!(
                "Gaussian MADR needs std > 0, got {std}"
            ))),
            _ => Ok(()),
        }
    }

    /// Probability that the required deceleration exceeds the available one.
    pub fn exceedance(&self, drac: f64) -> f64 {
        match *self {
            MadrModel::Fixed(madr) => {
                if drac > madr {
                    1.0
                } else {
                    0.0
                }
            }
            MadrModel::Gaussian { mean, std } => {
                let normal = Normal::new(mean, std).expect("validated std > 0");
                // Adding zero turns the -0.0 of the far tail into 0.0.
                normal.cdf(drac).clamp(0.0, 1.0) + 0.0
            }
        }
    }
}

/// Tumbling aggregation windows over a vehicle's frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowPlan {
    pub frames_per_window: usize,
    pub min_partial_frames: usize,
}

impl WindowPlan {
    pub fn new(window: f64, min_partial: f64, tick: f64) -> Result<Self> {
        if !(tick > 0.0) || !(window >= tick) {
            return Err(Error::Parameter("window must be at least one tick".into()));
        }
        Ok(Self {
            frames_per_window: (window / tick).round() as usize,
            min_partial_frames: (min_partial / tick).round() as usize,
        })
    }

    /// Splits `n` frames into consecutive windows. A trailing remainder shorter
    /// than `min_partial_frames` extends the last full window.
    pub fn split(&self, n: usize) -> Vec<Range<usize>> {
        if n == 0 {
            return Vec::new();
        }
        let w = self.frames_per_window.max(1);
        let full = n / w;
        let rem = n % w;
        if full == 0 {
            return vec![0..n];
        }
        let mut windows: Vec<Range<usize>> = (0..full).map(|i| i * w..(i + 1) * w).collect();
        if rem >= self.min_partial_frames.max(1) {
            windows.push(full * w..n);
        } else if rem > 0 {
            windows.last_mut().expect("full > 0").end = n;
        }
        windows
    }
}

/// Time to collision per record, defined only while closing in.
pub fn ttc_series(cs: &ConflictSeries) -> Vec<Option<f64>> {
    cs.records
        .iter()
        .map(|r| (r.relative_speed > 0.0).then(|| r.gap / r.relative_speed))
        .collect()
}

/// Deceleration rate to avoid crash per record, capped at `cap`.
pub fn drac_series(cs: &ConflictSeries, cap: f64) -> Vec<Option<f64>> {
    cs.records
        .iter()
        .map(|r| (r.relative_speed > 0.0).then(|| (r.relative_speed.powi(2) / r.gap).min(cap)))
        .collect()
}

/// Proportion of stopping distance per record, with the gap as remaining
/// distance. Undefined while the follower is stationary.
pub fn psd_series(cs: &ConflictSeries, decel: f64) -> Vec<Option<f64>> {
    cs.records
        .iter()
        .map(|r| {
            (r.follower_speed > 0.0).then(|| r.gap / (r.follower_speed.powi(2) / (2.0 * decel)))
        })
        .collect()
}

/// Normalised time exposed (fraction of the window) and time integrated
/// (seconds of shortfall per second) below `ttc_star`, per window.
pub fn tet_tit(ttc: &[Option<f64>], ttc_star: f64, plan: &WindowPlan, tick: f64) -> Vec<(f64, f64)> {
    plan.split(ttc.len())
        .into_iter()
        .map(|range| {
            let duration = range.len() as f64 * tick;
            let mut tet = 0.0;
            let mut tit = 0.0;
            for value in ttc[range].iter().flatten() {
                if *value > 0.0 && *value < ttc_star {
                    tet += tick;
                    tit += (ttc_star - value) * tick;
                }
            }
            (tet / duration, tit / duration)
        })
        .collect()
}

/// Crash potential index per window: time-averaged probability that DRAC
/// exceeds MADR.
pub fn cpi(drac: &[Option<f64>], madr: MadrModel, plan: &WindowPlan, tick: f64) -> Result<Vec<f64>> {
    madr.validate()?;
    Ok(plan
        .split(drac.len())
        .into_iter()
        .map(|range| {
            let duration = range.len() as f64 * tick;
            let exposure: f64 = drac[range].iter().flatten().map(|d| madr.exceedance(*d) * tick).sum();
            exposure / duration
        })
        .collect())
}

/// Minimum over windows of the within-window mean TTC; `None` when no
/// window has a defined TTC.
pub fn min_window_mean_ttc(ttc: &[Option<f64>], plan: &WindowPlan) -> Option<f64> {
    plan.split(ttc.len())
        .into_iter()
        .filter_map(|range| {
            let defined: Vec<f64> = ttc[range].iter().flatten().copied().collect();
            (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
        })
        .min_by(f64::total_cmp)
}
