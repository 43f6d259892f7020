use super::{dist, nearest, rng, sq_dist, ClusteringResult, Clusterer, Points};
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Rows used to estimate the bandwidth; larger inputs are subsampled.
const BANDWIDTH_SAMPLE: usize = 2000;
/// Seed of the bandwidth subsample, fixed so the algorithm is deterministic.
const BANDWIDTH_SEED: u64 = 0x5eed;
/// Upper bound on the number of bin seeds climbed.
const MAX_SEEDS: usize = 512;
const MAX_ITER: usize = 300;

/// Flat-kernel mean shift; the bandwidth is estimated from the data.
#[derive(Debug, Clone)]
pub struct MeanShift {
    pub quantile: f64,
}

impl MeanShift {
    pub fn new(quantile: f64) -> Result<Self> {
        if !(quantile > 0.0 && quantile <= 1.0) {
            return Err(Error::Parameter(format!("quantile must lie in (0, 1], got {quantile}")));
        }
        Ok(Self { quantile })
    }
}

/// Mean distance from each row to its `floor(quantile * n)`-th nearest
/// neighbour (the row itself counts as the first).
pub fn estimate_bandwidth(points: Points<'_>, quantile: f64) -> f64 {
    let n = points.len();
    let idx: Vec<usize> = if n > BANDWIDTH_SAMPLE {
        let mut v = sample(&mut rng(BANDWIDTH_SEED), n, BANDWIDTH_SAMPLE).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n).collect()
    };
    let s = idx.len();
    let kth = ((quantile * s as f64) as usize).clamp(1, s) - 1;
    let kth_dists: Vec<f64> = idx
        .par_iter()
        .map(|&i| {
            let mut d: Vec<f64> = idx.iter().map(|&j| sq_dist(points.row(i), points.row(j))).collect();
            let (_, v, _) = d.select_nth_unstable_by(kth, f64::total_cmp);
            v.sqrt()
        })
        .collect();
    // Summed in row order so the estimate does not depend on thread scheduling.
    kth_dists.iter().sum::<f64>() / s as f64
}

/// Grid-binned starting points: one per occupied cell of side `bandwidth`,
/// at the cell centre, most populated cells first.
fn bin_seeds(points: Points<'_>, bandwidth: f64) -> Vec<Vec<f64>> {
    let mut bins: BTreeMap<Vec<i64>, usize> = BTreeMap::new();
    for i in 0..points.len() {
        let key = points.row(i).iter().map(|x| (x / bandwidth).round() as i64).collect();
        *bins.entry(key).or_default() += 1;
    }
    let mut cells: Vec<(Vec<i64>, usize)> = bins.into_iter().collect();
    cells.sort_by(|a, b| b.1.cmp(&a.1));
    cells.truncate(MAX_SEEDS);
    cells
        .into_iter()
        .map(|(key, _)| key.iter().map(|&c| c as f64 * bandwidth).collect())
        .collect()
}

/// Climbs from `start` to a mode; returns the mode and its support size.
fn climb(points: Points<'_>, start: &[f64], bandwidth: f64) -> Option<(Vec<f64>, usize, bool)> {
    let bw2 = bandwidth * bandwidth;
    let mut mean = start.to_vec();
    let mut support = 0;
    for _ in 0..MAX_ITER {
        let mut sum = vec![0.0; points.dim()];
        let mut count = 0;
        for i in 0..points.len() {
            let x = points.row(i);
            if sq_dist(x, &mean) <= bw2 {
                count += 1;
                sum.iter_mut().zip(x).for_each(|(s, v)| *s += v);
            }
        }
        if count == 0 {
            return if support == 0 { None } else { Some((mean, support, false)) };
        }
        let next: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let shift = dist(&next, &mean);
        mean = next;
        support = count;
        if shift < 1e-3 * bandwidth {
            return Some((mean, support, true));
        }
    }
    Some((mean, support, false))
}

impl Clusterer for MeanShift {
    fn name(&self) -> &'static str {
        "mean_shift"
    }

    fn fit(&self, points: Points<'_>, _k: Option<usize>, _seed: u64) -> Result<ClusteringResult> {
        let n = points.len();
        if n == 0 {
            return Err(Error::EmptyInput("no rows to cluster".into()));
        }
        let bandwidth = estimate_bandwidth(points, self.quantile);
        if bandwidth <= 0.0 {
            // All rows coincide.
            return Ok(ClusteringResult::from_labels(vec![0; n]));
        }
        let seeds = bin_seeds(points, bandwidth);
        let climbed: Vec<(Vec<f64>, usize, bool)> =
            seeds.par_iter().filter_map(|s| climb(points, s, bandwidth)).collect();
        let converged = climbed.iter().all(|c| c.2);

        let mut order: Vec<usize> = (0..climbed.len()).collect();
        order.sort_by(|&a, &b| climbed[b].1.cmp(&climbed[a].1));
        let mut modes: Vec<Vec<f64>> = Vec::new();
        for i in order {
            let c = &climbed[i].0;
            if modes.iter().all(|m| dist(m, c) >= bandwidth) {
                modes.push(c.clone());
            }
        }
        if modes.is_empty() {
            return Ok(ClusteringResult::from_labels(vec![0; n]));
        }
        let labels: Vec<usize> = (0..n).into_par_iter().map(|i| nearest(points.row(i), &modes).0).collect();
        let mut r = ClusteringResult::from_labels(labels);
        r.converged = converged;
        r.iterations = 1;
        Ok(r)
    }
}
