use super::kmeans::plusplus;
use super::{check_k, rng, sq_dist, ClusteringResult, Clusterer, Points};
use crate::error::{Error, Result};
use ndarray::Array2;

/// Fuzzy c-means with fuzzifier `m`.
#[derive(Debug, Clone)]
pub struct FuzzyCMeans {
    pub m: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl FuzzyCMeans {
    pub fn new(m: f64) -> Result<Self> {
        if !(m.is_finite() && m > 1.0) {
            return Err(Error::Parameter(format!("fuzzifier m must exceed 1, got {m}")));
        }
        Ok(Self {
            m,
            tol: 1e-5,
            max_iter: 300,
        })
    }
}

/// Memberships of one point: `u_j = 1 / sum_c (d_j / d_c)^(2/(m-1))`.
/// A point sitting on one or more centres belongs to them in equal parts.
pub fn fcm_memberships(point: &[f64], centers: &[Vec<f64>], m: f64) -> Vec<f64> {
    let d2: Vec<f64> = centers.iter().map(|c| sq_dist(point, c)).collect();
    let zeros = d2.iter().filter(|&&d| d == 0.0).count();
    if zeros > 0 {
        let share = 1.0 / zeros as f64;
        return d2.iter().map(|&d| if d == 0.0 { share } else { 0.0 }).collect();
    }
    // (d_j/d_c)^(2/(m-1)) == (d2_j/d2_c)^(1/(m-1))
    let p = 1.0 / (m - 1.0);
    d2.iter()
        .map(|&dj| 1.0 / d2.iter().map(|&dc| (dj / dc).powf(p)).sum::<f64>())
        .collect()
}

impl Clusterer for FuzzyCMeans {
    fn name(&self) -> &'static str {
        "fuzzy_c_means"
    }

    fn fit(&self, points: Points<'_>, k: Option<usize>, seed: u64) -> Result<ClusteringResult> {
        let n = points.len();
        let k = check_k(k, n, self.name())?;
        let dim = points.dim();
        let all: Vec<usize> = (0..n).collect();
        let mut centers = plusplus(points, &all, k, &mut rng(seed));
        let mut u = Array2::<f64>::zeros((n, k));
        let mut trace = Vec::new();
        let mut converged = false;
        let mut iterations = 0;

        for iter in 0..self.max_iter {
            let mut delta: f64 = 0.0;
            let mut objective = 0.0;
            for i in 0..n {
                let row = fcm_memberships(points.row(i), &centers, self.m);
                for (j, v) in row.into_iter().enumerate() {
                    delta = delta.max((u[[i, j]] - v).abs());
                    u[[i, j]] = v;
                    objective += v.powf(self.m) * sq_dist(points.row(i), &centers[j]);
                }
            }
            trace.push(objective);
            iterations = iter + 1;
            if iter > 0 && delta < self.tol {
                converged = true;
                break;
            }
            let mut sums = vec![vec![0.0; dim]; k];
            let mut weights = vec![0.0; k];
            for i in 0..n {
                for j in 0..k {
                    let w = u[[i, j]].powf(self.m);
                    weights[j] += w;
                    for (s, x) in sums[j].iter_mut().zip(points.row(i)) {
                        *s += w * x;
                    }
                }
            }
            for j in 0..k {
                if weights[j] > 0.0 {
                    centers[j] = sums[j].iter().map(|s| s / weights[j]).collect();
                }
            }
        }

        let labels = u
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b })
                    .0
            })
            .collect();
        Ok(ClusteringResult {
            labels,
            memberships: Some(u),
            k_found: k,
            converged,
            iterations,
            noise: None,
            collapsed: false,
            objective_trace: trace,
        })
    }
}
