use super::{sq_dist, ClusteringResult, Clusterer, Points};
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::collections::VecDeque;

/// Density-based clustering. Noise rows are attached to the cluster of their
/// nearest clustered row and flagged in [`ClusteringResult::noise`].
#[derive(Debug, Clone)]
pub struct Dbscan {
    pub eps: f64,
    pub min_pts: usize,
}

impl Dbscan {
    pub fn new(eps: f64, min_pts: usize) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
        }
        if min_pts == 0 {
            return Err(Error::Parameter("min_pts must be at least 1".into()));
        }
        Ok(Self { eps, min_pts })
    }
}

const UNVISITED: usize = usize::MAX;

impl Clusterer for Dbscan {
    fn name(&self) -> &'static str {
        "dbscan"
    }

    fn fit(&self, points: Points<'_>, _k: Option<usize>, _seed: u64) -> Result<ClusteringResult> {
        let n = points.len();
        if n == 0 {
            return Err(Error::EmptyInput("no rows to cluster".into()));
        }
        let eps2 = self.eps * self.eps;
        // Neighbourhoods include the row itself.
        let hood = |i: usize| (0..n).filter(move |&j| sq_dist(points.row(i), points.row(j)) <= eps2);
        let core: Vec<bool> = (0..n)
            .into_par_iter()
            .map(|i| hood(i).take(self.min_pts).count() >= self.min_pts)
            .collect();

        let mut labels = vec![UNVISITED; n];
        let mut clusters = 0;
        for start in 0..n {
            if labels[start] != UNVISITED || !core[start] {
                continue;
            }
            labels[start] = clusters;
            let mut queue = VecDeque::from([start]);
            while let Some(p) = queue.pop_front() {
                if !core[p] {
                    continue;
                }
                for q in hood(p) {
                    if labels[q] == UNVISITED {
                        labels[q] = clusters;
                        queue.push_back(q);
                    }
                }
            }
            clusters += 1;
        }

        let noise: Vec<bool> = labels.iter().map(|&l| l == UNVISITED).collect();
        if clusters == 0 {
            log::warn!("dbscan found no dense region; all rows are noise");
            let mut r = ClusteringResult::from_labels(vec![0; n]);
            r.noise = Some(noise);
            return Ok(r);
        }
        let clustered: Vec<usize> = (0..n).filter(|&i| !noise[i]).collect();
        let attached: Vec<(usize, usize)> = (0..n)
            .into_par_iter()
            .filter(|&i| noise[i])
            .map(|i| {
                let mut best = (clustered[0], f64::INFINITY);
                for &j in &clustered {
                    let d = sq_dist(points.row(i), points.row(j));
                    if d < best.1 {
                        best = (j, d);
                    }
                }
                (i, labels[best.0])
            })
            .collect();
        for (i, l) in attached {
            labels[i] = l;
        }
        let mut r = ClusteringResult::from_labels(labels);
        r.noise = Some(noise);
        Ok(r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fit(xs: &[f64], eps: f64, min_pts: usize) -> ClusteringResult {
        Dbscan::new(eps, min_pts).unwrap().fit(Points::new(xs, 1), None, 0).unwrap()
    }

    #[test]
    fn two_dense_groups_and_noise() {
        let xs = [0.0, 0.1, 0.2, 5.0, 5.1, 5.2, 20.0];
        let r = fit(&xs, 0.15, 2);
        assert_eq!(r.labels, vec![0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(r.k_found, 2);
        assert_eq!(r.noise.unwrap(), vec![false, false, false, false, false, false, true]);
    }

    #[test]
    fn border_points_join_without_expanding() {
        // Only 0.1 and 0.2 are core; the ends are border rows.
        let xs = [0.0, 0.1, 0.2, 0.3];
        let r = fit(&xs, 0.1 + 1e-9, 3);
        assert_eq!(r.k_found, 1);
        assert_eq!(r.noise.unwrap(), vec![false; 4]);
    }

    #[test]
    fn all_noise_is_one_flagged_cluster() {
        let xs = [0.0, 10.0, 20.0];
        let r = fit(&xs, 1.0, 2);
        assert_eq!(r.k_found, 1);
        assert!(r.noise.unwrap().iter().all(|&b| b));
    }

    #[test]
    fn invalid_parameters() {
        assert!(Dbscan::new(0.0, 5).is_err());
        assert!(Dbscan::new(1.0, 0).is_err());
    }
}
