//! Synthetic data: Gaussian blobs, an imbalanced risk-feature matrix shaped
//! like real car-following data, and a small car-following simulator that
//! writes NGSIM-format CSV. Also hosts the adjusted Rand index used to score
//! partitions against a known truth.

use crate::error::{Error, Result};
use crate::features::{Feature, FeatureMatrix, MatrixState};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;
use std::io::Write;

/// Isotropic Gaussian blobs with standard deviation `std`. Blob `c` is
/// centred at `spacing / sqrt(2)` on axis `c mod dim`, so every pair of
/// centres is `spacing` apart when there are at most `dim` blobs. Returns the
/// rows and the generating blob of each row.
pub fn gaussian_blobs(sizes: &[usize], dim: usize, std: f64, spacing: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, std).expect("finite std");
    let n: usize = sizes.iter().sum();
    let mut values = Array2::zeros((n, dim));
    let mut truth = Vec::with_capacity(n);
    let offset = spacing / 2f64.sqrt();
    let mut row = 0;
    for (c, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            for j in 0..dim {
                let centre = if j == c % dim { offset } else { 0.0 };
                values[[row, j]] = centre + noise.sample(&mut rng);
            }
            truth.push(c);
            row += 1;
        }
    }
    (values, truth)
}

/// Adjusted Rand index between two labelings of the same rows.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must cover the same rows");
    let n = a.len() as f64;
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut rows: HashMap<usize, f64> = HashMap::new();
    let mut cols: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    let pairs = |v: f64| v * (v - 1.0) / 2.0;
    let index: f64 = table.values().copied().map(pairs).sum();
    let sum_a: f64 = rows.values().copied().map(pairs).sum();
    let sum_b: f64 = cols.values().copied().map(pairs).sum();
    let expected = sum_a * sum_b / pairs(n);
    let max = 0.5 * (sum_a + sum_b);
    if (max - expected).abs() < f64::EPSILON {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Two well-separated groups along a single `signal` column plus
/// `noise_cols` columns of uniform noise that carry no group structure.
/// Returns a rectified matrix and the generating group of each row.
pub fn signal_with_noise(per_group: usize, noise_cols: usize, seed: u64) -> (FeatureMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.3).expect("finite std");
    let dim = 1 + noise_cols;
    let mut rows = Vec::with_capacity(2 * per_group * dim);
    let mut truth = Vec::with_capacity(2 * per_group);
    for group in 0..2 {
        for _ in 0..per_group {
            rows.push(group as f64 * 8.0 + jitter.sample(&mut rng));
            rows.extend((0..noise_cols).map(|_| rng.random::<f64>() * 8.0));
            truth.push(group);
        }
    }
    let values = Array2::from_shape_vec((truth.len(), dim), rows).expect("rectangular rows");
    let mut names = vec!["signal".to_string()];
    names.extend((1..=noise_cols).map(|j| format!("noise{j}")));
    let ids = (1..=truth.len() as i64).collect();
    let m = FeatureMatrix::new(ids, names, values, MatrixState::Rectified).expect("finite synthetic values");
    (m, truth)
}

/// Level sizes of the reference partition (safe, three low-to-moderate
/// levels, two high-risk levels) as fractions of the population.
const LEVEL_SHARES: [f64; 6] = [2725.0, 872.0, 810.0, 591.0, 66.0, 18.0];

/// Rectified 12-feature matrix with an imbalanced latent risk structure.
/// Returns the matrix and the generating level of each row.
pub fn ngsim_like_matrix(n: usize, seed: u64) -> (FeatureMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = LEVEL_SHARES.iter().sum();
    let mut counts: Vec<usize> = LEVEL_SHARES.iter().map(|s| (s / total * n as f64).round() as usize).collect();
    let assigned: usize = counts.iter().sum();
    counts[0] = (counts[0] + n).saturating_sub(assigned);

    let mut rows = Vec::with_capacity(n * 12);
    let mut levels = Vec::with_capacity(n);
    for (level, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            rows.extend_from_slice(&risk_row(level, &mut rng));
            levels.push(level);
        }
    }
    let values = Array2::from_shape_vec((levels.len(), 12), rows).expect("12 values per row");
    let names = Feature::ALL.iter().map(|f| f.name().to_string()).collect();
    let ids = (1..=levels.len() as i64).collect();
    let m = FeatureMatrix::new(ids, names, values, MatrixState::Rectified).expect("finite synthetic values");
    (m, levels)
}

fn risk_row(level: usize, rng: &mut ChaCha8Rng) -> [f64; 12] {
    let mut u = |a: f64, b: f64| a + (b - a) * rng.random::<f64>();
    // TTC.min, TET t1..t3, TIT t1..t3, DRAC, CPI m1, CPI m2, PSD.min, PSD.mean
    let mut r = [0.0; 12];
    match level {
        0 => {
            if u(0.0, 1.0) < 0.3 {
                r[0] = 7.95;
                r[10] = 2.0;
                r[11] = 2.0;
            } else {
                r[0] = u(4.5, 7.95);
                r[7] = u(0.04, 0.6);
                r[10] = u(0.5, 2.0);
                r[11] = (r[10] + u(0.0, 0.8)).min(2.0);
            }
        }
        1 => {
            r[0] = u(3.0, 6.0);
            r[3] = u(0.02, 0.6);
            r[6] = r[3] * u(0.2, 1.5);
            r[7] = u(0.2, 1.5);
            r[10] = u(0.3, 1.0);
            r[11] = (r[10] + u(0.2, 0.8)).min(2.0);
        }
        2 => {
            r[0] = u(2.0, 4.0);
            r[3] = u(0.3, 1.0);
            r[2] = r[3] * u(0.2, 0.8);
            r[1] = r[2] * u(0.0, 0.2);
            r[6] = r[3] * u(1.0, 2.0);
            r[5] = r[2] * u(0.5, 1.5);
            r[4] = r[1] * u(0.0, 0.8);
            r[7] = u(0.5, 3.0);
            r[10] = u(0.2, 0.8);
            r[11] = (r[10] + u(0.2, 0.7)).min(2.0);
        }
        _ => {
            let (ttc, drac, m1, m2) = match level {
                3 => ((1.0, 2.5), (1.0, 5.0), (0.0, 0.0), (0.0, 0.05)),
                4 => ((0.6, 1.5), (5.0, 9.8), (0.2, 1.0), (0.3, 0.8)),
                _ => ((0.2, 1.0), (8.5, 9.8), (0.5, 1.0), (0.4, 0.83)),
            };
            r[0] = u(ttc.0, ttc.1);
            r[1] = u(0.3, 1.0);
            r[2] = r[1] + (1.0 - r[1]) * u(0.0, 0.5);
            r[3] = r[2] + (1.0 - r[2]) * u(0.0, 0.5);
            r[4] = r[1] * u(0.2, 1.2);
            r[5] = r[4] + r[2] * u(0.3, 1.0);
            r[6] = r[5] + r[3] * u(0.3, 1.0);
            r[7] = u(drac.0, drac.1);
            r[8] = u(m1.0, m1.1);
            r[9] = u(m2.0, m2.1);
            r[10] = u(0.01, 0.4);
            r[11] = (r[10] + u(0.1, 0.6)).min(2.0);
        }
    }
    r
}

/// Settings of the car-following simulator.
#[derive(Debug, Clone)]
pub struct TrafficScenario {
    pub lanes: usize,
    pub vehicles_per_lane: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for TrafficScenario {
    fn default() -> Self {
        Self {
            lanes: 3,
            vehicles_per_lane: 20,
            frames: 900,
            seed: 7,
        }
    }
}

struct Driver {
    length: f64,
    desired_speed: f64,
    headway: f64,
    x: f64,
    v: f64,
    /// Perception delay in frames; the driver sees its leader as it was
    /// this many frames ago.
    reaction: usize,
    /// Frames during which the vehicle is reported in another lane.
    drift: Option<(usize, usize)>,
}

const FEET_PER_METRE: f64 = 1.0 / 0.3048;

/// Simulates platoons of IDM drivers (one platoon per lane, with braking
/// disturbances on the platoon leaders) and writes NGSIM-style rows in feet.
/// Measurement noise is added to positions and speeds.
pub fn write_ngsim_csv<W: Write>(writer: W, scenario: &TrafficScenario) -> Result<()> {
    if scenario.lanes == 0 || scenario.vehicles_per_lane == 0 || scenario.frames == 0 {
        return Err(Error::Parameter("scenario must have lanes, vehicles and frames".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let pos_noise = Normal::new(0.0, 0.1).expect("valid noise");
    let vel_noise = Normal::new(0.0, 0.2).expect("valid noise");
    let dt = 0.1;
    let (a_max, b_comf, s0) = (1.5, 2.0, 2.0);

    let mut out = csv::Writer::from_writer(writer);
    out.write_record([
        "Vehicle_ID", "Frame_ID", "Local_X", "Local_Y", "v_Length", "v_Vel", "v_Acc", "Lane_ID", "Preceding",
    ])?;

    let mut next_id = 1;
    for lane in 1..=scenario.lanes {
        let mut drivers: Vec<Driver> = Vec::new();
        let mut x = 40.0 * scenario.vehicles_per_lane as f64;
        for i in 0..scenario.vehicles_per_lane {
            let length = if rng.random::<f64>() < 0.05 { 12.0 } else { rng.random_range(4.0..5.5) };
            let v = rng.random_range(18.0..24.0);
            let drift = (i > 0 && rng.random::<f64>() < 0.15).then(|| {
                let start = rng.random_range(0..scenario.frames);
                (start, (start + 20).min(scenario.frames))
            });
            // Some drivers are slow to react and follow closely.
            let (reaction, headway) = if rng.random::<f64>() < 0.35 {
                (rng.random_range(8..20), rng.random_range(0.3..0.9))
            } else {
                (0, rng.random_range(0.6..2.0))
            };
            drivers.push(Driver {
                length,
                desired_speed: rng.random_range(22.0..30.0),
                headway,
                x,
                v,
                reaction,
                drift,
            });
            x -= length + s0 + v * rng.random_range(0.5..1.5);
        }
        // Leader disturbances: (start frame, duration, target speed, deceleration).
        let events: Vec<(usize, usize, f64, f64)> = (0..scenario.frames / 120 + 1)
            .map(|_| {
                (
                    rng.random_range(0..scenario.frames),
                    rng.random_range(20..80),
                    rng.random_range(0.0..10.0),
                    rng.random_range(3.0..7.0),
                )
            })
            .collect();

        let mut rows: Vec<Vec<String>> = Vec::new();
        let ids: Vec<i64> = (0..drivers.len()).map(|i| next_id + i as i64).collect();
        next_id += drivers.len() as i64;
        let mut log: Vec<Vec<(f64, f64, f64)>> = vec![Vec::with_capacity(scenario.frames); drivers.len()];
        for frame in 0..scenario.frames {
            let mut acc = vec![0.0; drivers.len()];
            for i in 0..drivers.len() {
                let d = &drivers[i];
                let free = 1.0 - (d.v / d.desired_speed).powi(4);
                acc[i] = if i == 0 {
                    let event = events.iter().find(|(s, len, _, _)| frame >= *s && frame < s + len);
                    match event {
                        Some(&(_, _, target, decel)) if d.v > target => -decel,
                        _ => a_max * free,
                    }
                } else {
                    let lead = &drivers[i - 1];
                    let (lead_x, lead_v) = match frame.checked_sub(d.reaction) {
                        Some(f) if d.reaction > 0 => (log[i - 1][f].0, log[i - 1][f].1),
                        _ => (lead.x, lead.v),
                    };
                    let gap = (lead_x - d.x - lead.length).max(0.1);
                    let dv = d.v - lead_v;
                    let desired = s0 + d.v * d.headway + d.v * dv / (2.0 * (a_max * b_comf).sqrt());
                    (a_max * (free - (desired.max(0.0) / gap).powi(2))).max(-9.0)
                };
            }
            for (i, d) in drivers.iter_mut().enumerate() {
                let v_next = (d.v + acc[i] * dt).max(0.0);
                d.x += 0.5 * (d.v + v_next) * dt;
                d.v = v_next;
                log[i].push((d.x, d.v, acc[i]));
            }
        }
        for (i, d) in drivers.iter().enumerate() {
            for (frame, &(x, v, a)) in log[i].iter().enumerate() {
                let lane_id = match d.drift {
                    Some((s, e)) if frame >= s && frame < e => lane + scenario.lanes,
                    _ => lane,
                };
                let preceding = if i == 0 { 0 } else { ids[i - 1] };
                rows.push(vec![
                    ids[i].to_string(),
                    (frame + 1).to_string(),
                    format!("{:.3}", (lane as f64 * 3.6 - 1.8) * FEET_PER_METRE),
                    format!("{:.3}", (x + pos_noise.sample(&mut rng)) * FEET_PER_METRE),
                    format!("{:.3}", d.length * FEET_PER_METRE),
                    format!("{:.3}", (v + vel_noise.sample(&mut rng)).max(0.0) * FEET_PER_METRE),
                    format!("{:.3}", a * FEET_PER_METRE),
                    lane_id.to_string(),
                    preceding.to_string(),
                ]);
            }
        }
        for row in rows {
            out.write_record(&row)?;
        }
    }
    out.flush().map_err(|e| Error::io("<ngsim writer>", e))?;
    Ok(())
}
