//! k-means with k-means++ seeding, in EM-style (Lloyd) and Elkan variants,
//! plus mini-batch k-means.
//!
//! Both full-batch cores run the same iteration schedule: assign, stop if no
//! label changed, re-seed empty clusters at the worst-fitted point, update
//! centres. Elkan only skips distance evaluations the triangle inequality
//! proves unnecessary, so both cores return the same partition for a seed.

use super::{check_k, dist, nearest, rng, sq_dist, ClusteringResult, Clusterer, Points};
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KMeansCore {
    EmStyle,
    Elkan,
}

impl std::str::FromStr for KMeansCore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "em_style" | "em" | "lloyd" => Ok(KMeansCore::EmStyle),
            "elkan" => Ok(KMeansCore::Elkan),
            other => Err(Error::Parameter(format!("unknown k-means core `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub n_init: usize,
    pub core: KMeansCore,
    pub max_iter: usize,
}

impl KMeans {
    pub fn new(n_init: usize, core: KMeansCore) -> Self {
        Self {
            n_init: n_init.max(1),
            core,
            max_iter: 300,
        }
    }
}

struct Run {
    labels: Vec<usize>,
    wcss: f64,
    iterations: usize,
    converged: bool,
    trace: Vec<f64>,
}

/// Greedy k-means++ seeding: first centre uniform, then `2 + ln k` draws
/// proportional to squared distance from the nearest chosen centre, keeping
/// the draw that lowers the total squared distance most.
pub(crate) fn plusplus(points: Points<'_>, idx: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = idx[rng.random_range(0..idx.len())];
    let mut centers = vec![points.row(first).to_vec()];
    let mut d2: Vec<f64> = idx.iter().map(|&i| sq_dist(points.row(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = if total > 0.0 {
                let target = rng.random::<f64>() * total;
                let mut acc = 0.0;
                let mut chosen = idx.len() - 1;
                for (pos, d) in d2.iter().enumerate() {
                    acc += d;
                    if acc > target {
                        chosen = pos;
                        break;
                    }
                }
                chosen
            } else {
                rng.random_range(0..idx.len())
            };
            let c = points.row(idx[pick]);
            let updated: Vec<f64> = idx.iter().zip(&d2).map(|(&i, &d)| d.min(sq_dist(points.row(i), c))).collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, updated));
            }
        }
        let (_, pick, updated) = best.expect("at least two trials");
        d2 = updated;
        centers.push(points.row(idx[pick]).to_vec());
    }
    centers
}

fn update_centers(points: Points<'_>, labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; points.dim()]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(points.row(i)) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

/// Moves each empty cluster onto the point farthest from its own centre.
/// Returns true if anything changed.
fn reseed_empty(points: Points<'_>, labels: &mut [usize], d2: &mut [f64], k: usize) -> bool {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    let mut changed = false;
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if d2[b] >= d2[i] => Some(b),
                _ => Some(i),
            });
        let Some(far) = far else { break };
        counts[labels[far]] -= 1;
        counts[c] = 1;
        labels[far] = c;
        d2[far] = 0.0;
        changed = true;
    }
    changed
}

fn wcss(points: Points<'_>, labels: &[usize], centers: &[Vec<f64>]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(points.row(i), &centers[l]))
        .sum()
}

fn lloyd(points: Points<'_>, mut centers: Vec<Vec<f64>>, max_iter: usize) -> Run {
    let n = points.len();
    let k = centers.len();
    let mut labels = vec![usize::MAX; n];
    let mut d2 = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    for iter in 0..max_iter {
        let mut changed = false;
        for i in 0..n {
            let (c, d) = nearest(points.row(i), &centers);
            changed |= labels[i] != c;
            labels[i] = c;
            d2[i] = d;
        }
        trace.push(d2.iter().sum());
        iterations = iter + 1;
        if !changed {
            converged = true;
            break;
        }
        reseed_empty(points, &mut labels, &mut d2, k);
        centers = update_centers(points, &labels, k);
    }
    Run {
        wcss: wcss(points, &labels, &centers),
        labels,
        iterations,
        converged,
        trace,
    }
}

fn elkan(points: Points<'_>, mut centers: Vec<Vec<f64>>, max_iter: usize) -> Run {
    let n = points.len();
    let k = centers.len();
    let mut labels = vec![usize::MAX; n];
    let mut upper = vec![0.0; n];
    let mut lower = vec![vec![0.0; k]; n];
    let mut exact = true;
    let mut iterations = 0;
    let mut converged = false;

    for iter in 0..max_iter {
        let mut changed = false;
        if exact {
            for i in 0..n {
                let x = points.row(i);
                let mut best = (0, f64::INFINITY);
                for (c, center) in centers.iter().enumerate() {
                    let d2 = sq_dist(x, center);
                    lower[i][c] = d2.sqrt();
                    if d2 < best.1 {
                        best = (c, d2);
                    }
                }
                changed |= labels[i] != best.0;
                labels[i] = best.0;
                upper[i] = best.1.sqrt();
            }
            exact = false;
        } else {
            let mut cc = vec![vec![0.0; k]; k];
            for a in 0..k {
                for b in a + 1..k {
                    let d = dist(&centers[a], &centers[b]);
                    cc[a][b] = d;
                    cc[b][a] = d;
                }
            }
            let half_min: Vec<f64> = (0..k)
                .map(|a| 0.5 * (0..k).filter(|&b| b != a).map(|b| cc[a][b]).fold(f64::INFINITY, f64::min))
                .collect();
            for i in 0..n {
                let mut a = labels[i];
                if upper[i] <= half_min[a] {
                    continue;
                }
                let x = points.row(i);
                let mut tight = false;
                for c in 0..k {
                    if c == a || upper[i] <= lower[i][c] || upper[i] <= 0.5 * cc[a][c] {
                        continue;
                    }
                    if !tight {
                        upper[i] = dist(x, &centers[a]);
                        lower[i][a] = upper[i];
                        tight = true;
                        if upper[i] <= lower[i][c] || upper[i] <= 0.5 * cc[a][c] {
                            continue;
                        }
                    }
                    let d = dist(x, &centers[c]);
                    lower[i][c] = d;
                    if d < upper[i] || (d == upper[i] && c < a) {
                        a = c;
                        upper[i] = d;
                    }
                }
                if a != labels[i] {
                    labels[i] = a;
                    changed = true;
                }
            }
        }
        iterations = iter + 1;
        if !changed {
            converged = true;
            break;
        }

        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        if counts.contains(&0) {
            let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers[labels[i]])).collect();
            reseed_empty(points, &mut labels, &mut d2, k);
            exact = true;
        }
        let next = update_centers(points, &labels, k);
        if !exact {
            for (c, (old, new)) in centers.iter().zip(&next).enumerate() {
                let shift = dist(old, new);
                for i in 0..n {
                    lower[i][c] = (lower[i][c] - shift).max(0.0);
                    if labels[i] == c {
                        upper[i] += shift;
                    }
                }
            }
        }
        centers = next;
    }
    Run {
        wcss: wcss(points, &labels, &centers),
        labels,
        iterations,
        converged,
        trace: Vec::new(),
    }
}

impl Clusterer for KMeans {
    fn name(&self) -> &'static str {
        "kmeans_pp"
    }

    fn fit(&self, points: Points<'_>, k: Option<usize>, seed: u64) -> Result<ClusteringResult> {
        let k = check_k(k, points.len(), self.name())?;
        let mut rng = rng(seed);
        let all: Vec<usize> = (0..points.len()).collect();
        let mut best: Option<Run> = None;
        for _ in 0..self.n_init {
            let centers = plusplus(points, &all, k, &mut rng);
            let run = match self.core {
                KMeansCore::EmStyle => lloyd(points, centers, self.max_iter),
                KMeansCore::Elkan => elkan(points, centers, self.max_iter),
            };
            if best.as_ref().is_none_or(|b| run.wcss < b.wcss) {
                best = Some(run);
            }
        }
        let best = best.expect("n_init >= 1");
        Ok(ClusteringResult {
            labels: best.labels,
            memberships: None,
            k_found: k,
            converged: best.converged,
            iterations: best.iterations,
            noise: None,
            collapsed: false,
            objective_trace: best.trace,
        })
    }
}

/// Mini-batch k-means with per-centre learning rates `1/count`.
#[derive(Debug, Clone)]
pub struct MiniBatchKMeans {
    /// Zero selects `max(256, n/10)`.
    pub batch_size: usize,
    pub max_steps: usize,
}

impl Default for MiniBatchKMeans {
    fn default() -> Self {
        Self {
            batch_size: 0,
            max_steps: 100,
        }
    }
}

impl MiniBatchKMeans {
    pub fn effective_batch(&self, n: usize) -> usize {
        let b = if self.batch_size == 0 {
            256.max(n / 10)
        } else {
            self.batch_size
        };
        b.min(n).max(1)
    }
}

impl Clusterer for MiniBatchKMeans {
    fn name(&self) -> &'static str {
        "minibatch_kmeans"
    }

    fn fit(&self, points: Points<'_>, k: Option<usize>, seed: u64) -> Result<ClusteringResult> {
        let n = points.len();
        let k = check_k(k, n, self.name())?;
        let batch = self.effective_batch(n);
        let mut rng = rng(seed);

        let init_size = (3 * batch).clamp(k, n);
        let mut init_idx = sample(&mut rng, n, init_size).into_vec();
        init_idx.sort_unstable();
        let mut centers = plusplus(points, &init_idx, k, &mut rng);
        let mut counts = vec![0usize; k];

        for _ in 0..self.max_steps {
            let idx = sample(&mut rng, n, batch).into_vec();
            let assigned: Vec<usize> = idx.iter().map(|&i| nearest(points.row(i), &centers).0).collect();
            for (&i, &c) in idx.iter().zip(&assigned) {
                counts[c] += 1;
                let eta = 1.0 / counts[c] as f64;
                for (m, x) in centers[c].iter_mut().zip(points.row(i)) {
                    *m += eta * (x - *m);
                }
            }
        }

        let labels: Vec<usize> = (0..n).map(|i| nearest(points.row(i), &centers).0).collect();
        Ok(ClusteringResult {
            labels,
            memberships: None,
            k_found: k,
            converged: true,
            iterations: self.max_steps,
            noise: None,
            collapsed: false,
            objective_trace: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::gaussian_blobs;

    fn pts(data: &[f64], dim: usize) -> Points<'_> {
        Points::new(data, dim)
    }

    /// Best 2-partition of a tiny 1-d set by exhaustive enumeration.
    fn exhaustive_two_partition(xs: &[f64]) -> Vec<usize> {
        let n = xs.len();
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1..(1u32 << n) - 1 {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut cost = 0.0;
            for c in 0..2 {
                let members: Vec<f64> = (0..n).filter(|&i| labels[i] == c).map(|i| xs[i]).collect();
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, labels);
            }
        }
        ClusteringResult::from_labels(best.1).labels
    }

    #[test]
    fn tiny_1d_matches_exhaustive_oracle() {
        let xs = [0.0, 1.0, 10.0, 11.0];
        let oracle = exhaustive_two_partition(&xs);
        assert_eq!(oracle, vec![0, 0, 1, 1]);
        for core in [KMeansCore::EmStyle, KMeansCore::Elkan] {
            for seed in 0..5 {
                let mut r = KMeans::new(3, core).fit(pts(&xs, 1), Some(2), seed).unwrap();
                r.canonicalize(Some(2));
                assert_eq!(r.labels, oracle);
            }
        }
    }

    #[test]
    fn single_cluster_wcss_is_total_variance() {
        let xs = [1.0, 2.0, 3.0, 6.0];
        let r = KMeans::new(1, KMeansCore::EmStyle).fit(pts(&xs, 1), Some(1), 0).unwrap();
        assert!(r.labels.iter().all(|&l| l == 0));
        let mean = 3.0;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!((r.objective_trace.last().unwrap() - var * 4.0).abs() < 1e-12);
    }

    #[test]
    fn n_equals_k_gives_singletons() {
        let xs = [0.0, 3.0, 7.0, 20.0];
        for core in [KMeansCore::EmStyle, KMeansCore::Elkan] {
            let mut r = KMeans::new(1, core).fit(pts(&xs, 1), Some(4), 3).unwrap();
            r.canonicalize(Some(4));
            assert_eq!(r.k_found, 4);
        }
    }

    #[test]
    fn elkan_matches_em_style() {
        let (m, _) = gaussian_blobs(&[60, 40, 50], 5, 1.0, 3.0, 11);
        let view = m.view();
        let p = Points::from_view(&view);
        for seed in 0..10 {
            for k in [2, 3, 5, 8] {
                let a = KMeans::new(2, KMeansCore::EmStyle).fit(p, Some(k), seed).unwrap();
                let b = KMeans::new(2, KMeansCore::Elkan).fit(p, Some(k), seed).unwrap();
                assert_eq!(a.labels, b.labels, "seed {seed} k {k}");
                assert_eq!(a.iterations, b.iterations);
            }
        }
    }

    #[test]
    fn wcss_never_increases() {
        let (m, _) = gaussian_blobs(&[80, 80, 80, 80], 4, 1.5, 2.0, 5);
        let view = m.view();
        for seed in 0..10 {
            let r = KMeans::new(1, KMeansCore::EmStyle).fit(Points::from_view(&view), Some(6), seed).unwrap();
            for w in r.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", r.objective_trace);
            }
        }
    }

    #[test]
    fn k_larger_than_n_rejected() {
        let xs = [0.0, 1.0];
        assert!(matches!(
            KMeans::new(1, KMeansCore::EmStyle).fit(pts(&xs, 1), Some(3), 0),
            Err(Error::KExceedsRows { k: 3, n: 2 })
        ));
    }

    #[test]
    fn minibatch_batch_size_rule() {
        let mb = MiniBatchKMeans::default();
        assert_eq!(mb.effective_batch(100), 100);
        assert_eq!(mb.effective_batch(1000), 256);
        assert_eq!(mb.effective_batch(5000), 500);
    }

    #[test]
    fn deterministic_given_seed() {
        let (m, _) = gaussian_blobs(&[50, 50, 50], 3, 1.0, 2.0, 2);
        let view = m.view();
        let p = Points::from_view(&view);
        let a = MiniBatchKMeans::default().fit(p, Some(4), 9).unwrap();
        let b = MiniBatchKMeans::default().fit(p, Some(4), 9).unwrap();
        assert_eq!(a, b);
    }
}
