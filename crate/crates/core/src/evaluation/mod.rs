//! Internal clustering validity indices and replicate-based stability.

mod stability;

pub use stability::{
    coefficient_of_variation, stability_cv, stability_report, Replicate, StabilityConfig,
    StabilityEstimate, StabilityReport,
};

use crate::clustering::{dist, sq_dist, Points};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Default tolerance of the boundary-sample count.
pub const BOUNDARY_TOL: f64 = 0.05;

/// How clusters are weighted in the balanced silhouette.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterWeights {
    #[default]
    Equal,
    /// Weight by cluster size; the balanced index then equals the plain one.
    Size,
    /// One weight per cluster in canonical label order.
    Custom(Vec<f64>),
}

impl ClusterWeights {
    pub fn resolve(&self, sizes: &[usize]) -> Result<Vec<f64>> {
        let w = match self {
            ClusterWeights::Equal => vec![1.0; sizes.len()],
            ClusterWeights::Size => sizes.iter().map(|&s| s as f64).collect(),
            ClusterWeights::Custom(w) if w.len() == sizes.len() => w.clone(),
            ClusterWeights::Custom(w) => {
                return Err(Error::Parameter(format!(
                    "{} cluster weights given for {} clusters",
                    w.len(),
                    sizes.len()
                )))
            }
        };
        if w.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::Parameter("cluster weights must be positive".into()));
        }
        Ok(w)
    }
}

/// Relabels to `0..k` by first appearance.
fn compact(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let out = labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

fn sizes(labels: &[usize], k: usize) -> Vec<usize> {
    let mut s = vec![0; k];
    labels.iter().for_each(|&l| s[l] += 1);
    s
}

fn require_two(k: usize, what: &str) -> Result<()> {
    if k < 2 {
        return Err(Error::UndefinedMetric(format!("{what} needs at least two clusters")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Silhouettes {
    /// s(i) per row.
    pub samples: Vec<f64>,
    /// Mean s(i) per cluster (S_k), clusters in first-appearance order.
    pub cluster_scores: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    /// Mean over all rows.
    pub si: f64,
}

/// Sample silhouettes. Rows of singleton clusters score 0.
pub fn silhouette(points: Points<'_>, labels: &[usize]) -> Result<Silhouettes> {
    if labels.len() != points.len() {
        return Err(Error::Mismatch(format!("{} labels for {} rows", labels.len(), points.len())));
    }
    let (labels, k) = compact(labels);
    require_two(k, "silhouette")?;
    let size = sizes(&labels, k);
    let n = labels.len();
    let samples: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = labels[i];
            if size[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            let x = points.row(i);
            for j in 0..n {
                sums[labels[j]] += dist(x, points.row(j));
            }
            let a = sums[own] / (size[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own)
                .map(|c| sums[c] / size[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                (b - a) / denom
            } else {
                0.0
            }
        })
        .collect();
    let mut cluster_scores = vec![0.0; k];
    for (i, &l) in labels.iter().enumerate() {
        cluster_scores[l] += samples[i];
    }
    for (s, &c) in cluster_scores.iter_mut().zip(&size) {
        *s /= c as f64;
    }
    let si = samples.iter().sum::<f64>() / n as f64;
    Ok(Silhouettes {
        samples,
        cluster_scores,
        cluster_sizes: size,
        si,
    })
}

/// Balanced silhouette: weighted mean of the cluster scores.
pub fn bsi(scores: &[f64], weights: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("no cluster scores".into()));
    }
    if scores.len() != weights.len() {
        return Err(Error::Mismatch("one weight per cluster score is required".into()));
    }
    let total: f64 = weights.iter().sum();
    Ok(scores.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / total)
}

/// Weighted root-mean-square deviation of the cluster scores around `bsi`.
pub fn sigma_sk(scores: &[f64], weights: &[f64], bsi: f64) -> f64 {
    let total: f64 = weights.iter().sum();
    let msd = scores
        .iter()
        .zip(weights)
        .map(|(s, w)| w * (s - bsi).powi(2))
        .sum::<f64>()
        / total;
    msd.sqrt()
}

fn centroids(points: Points<'_>, labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let size = sizes(labels, k);
    let mut c = vec![vec![0.0; points.dim()]; k];
    for (i, &l) in labels.iter().enumerate() {
        c[l].iter_mut().zip(points.row(i)).for_each(|(a, b)| *a += b);
    }
    for (row, &s) in c.iter_mut().zip(&size) {
        row.iter_mut().for_each(|v| *v /= s as f64);
    }
    c
}

/// Calinski-Harabasz: `tr(B)/tr(W) * (N-k)/(k-1)`. Infinite when every
/// cluster is a single point cloud of zero spread.
pub fn calinski_harabasz(points: Points<'_>, labels: &[usize]) -> Result<f64> {
    let (labels, k) = compact(labels);
    require_two(k, "Calinski-Harabasz")?;
    let n = labels.len();
    let size = sizes(&labels, k);
    let c = centroids(points, &labels, k);
    let all: Vec<f64> = (0..points.dim())
        .map(|j| (0..n).map(|i| points.row(i)[j]).sum::<f64>() / n as f64)
        .collect();
    let tr_b: f64 = c.iter().zip(&size).map(|(ck, &s)| s as f64 * sq_dist(ck, &all)).sum();
    let tr_w: f64 = (0..n).map(|i| sq_dist(points.row(i), &c[labels[i]])).sum();
    let scale = (n - k) as f64 / (k - 1) as f64;
    Ok(if tr_w > 0.0 {
        tr_b / tr_w * scale
    } else if tr_b > 0.0 && scale > 0.0 {
        f64::INFINITY
    } else {
        0.0
    })
}

/// Davies-Bouldin index and whether two centroids coincided (that pair then
/// contributes `+inf`).
pub fn davies_bouldin(points: Points<'_>, labels: &[usize]) -> Result<(f64, bool)> {
    let (labels, k) = compact(labels);
    require_two(k, "Davies-Bouldin")?;
    let size = sizes(&labels, k);
    let c = centroids(points, &labels, k);
    let mut spread = vec![0.0; k];
    for (i, &l) in labels.iter().enumerate() {
        spread[l] += dist(points.row(i), &c[l]);
    }
    for (s, &n) in spread.iter_mut().zip(&size) {
        *s /= n as f64;
    }
    let mut degenerate = false;
    let mut total = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in (0..k).filter(|&j| j != i) {
            let d = dist(&c[i], &c[j]);
            let r = if d > 0.0 {
                (spread[i] + spread[j]) / d
            } else {
                degenerate = true;
                f64::INFINITY
            };
            worst = worst.max(r);
        }
        total += worst;
    }
    Ok((total / k as f64, degenerate))
}

/// Rows with `|s(i)| < tol`.
pub fn boundary_count(samples: &[f64], tol: f64) -> usize {
    samples.iter().filter(|s| s.abs() < tol).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub sample_silhouettes: Vec<f64>,
    pub cluster_scores: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    pub bsi: f64,
    pub sigma_sk: f64,
    pub si: f64,
    #[serde(with = "crate::serde_float")]
    pub ch: f64,
    #[serde(with = "crate::serde_float")]
    pub db: f64,
    pub db_degenerate: bool,
    pub boundary_count: usize,
}

/// Everything in a [`QualityReport`] except the per-row silhouettes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualitySummary {
    pub cluster_scores: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    pub bsi: f64,
    pub sigma_sk: f64,
    pub si: f64,
    #[serde(with = "crate::serde_float")]
    pub ch: f64,
    #[serde(with = "crate::serde_float")]
    pub db: f64,
    pub boundary_count: usize,
}

impl QualityReport {
    pub fn compute(m: &FeatureMatrix, labels: &[usize], weights: &ClusterWeights) -> Result<Self> {
        let view = m.view();
        Self::compute_points(Points::from_view(&view), labels, weights)
    }

    pub fn compute_points(points: Points<'_>, labels: &[usize], weights: &ClusterWeights) -> Result<Self> {
        let s = silhouette(points, labels)?;
        let w = weights.resolve(&s.cluster_sizes)?;
        let b = bsi(&s.cluster_scores, &w)?;
        let sigma = sigma_sk(&s.cluster_scores, &w, b);
        let ch = calinski_harabasz(points, labels)?;
        let (db, db_degenerate) = davies_bouldin(points, labels)?;
        Ok(Self {
            boundary_count: boundary_count(&s.samples, BOUNDARY_TOL),
            sample_silhouettes: s.samples,
            cluster_scores: s.cluster_scores,
            cluster_sizes: s.cluster_sizes,
            bsi: b,
            sigma_sk: sigma,
            si: s.si,
            ch,
            db,
            db_degenerate,
        })
    }

    pub fn summary(&self) -> QualitySummary {
        QualitySummary {
            cluster_scores: self.cluster_scores.clone(),
            cluster_sizes: self.cluster_sizes.clone(),
            bsi: self.bsi,
            sigma_sk: self.sigma_sk,
            si: self.si,
            ch: self.ch,
            db: self.db,
            boundary_count: self.boundary_count,
        }
    }
}

/// Per-row silhouettes as CSV (`vehicle_id,cluster,silhouette`).
pub fn write_silhouettes_csv<W: Write>(writer: W, ids: &[i64], labels: &[usize], samples: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["vehicle_id", "cluster", "silhouette"])?;
    for ((id, l), s) in ids.iter().zip(labels).zip(samples) {
        w.write_record([id.to_string(), l.to_string(), s.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<silhouette writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silhouette_hand_example() {
        let xs = [0.0, 1.0, 10.0, 11.0];
        let s = silhouette(Points::new(&xs, 1), &[0, 0, 1, 1]).unwrap();
        assert!((s.samples[0] - 9.5 / 10.5).abs() < 1e-12);
        assert!((s.samples[1] - 8.5 / 9.5).abs() < 1e-12);
        assert!((s.si - (9.5 / 10.5 + 8.5 / 9.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_members_score_one() {
        let xs = [0.0, 0.0, 5.0, 5.0];
        let s = silhouette(Points::new(&xs, 1), &[3, 3, 9, 9]).unwrap();
        assert!(s.samples.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn misassigned_point_is_negative() {
        let xs = [0.0, 0.1, 0.2, 10.0, 10.1, 10.2];
        let s = silhouette(Points::new(&xs, 1), &[0, 0, 1, 1, 1, 1]).unwrap();
        assert!(s.samples[2] < 0.0);
    }

    #[test]
    fn singleton_scores_zero_and_single_cluster_errors() {
        let xs = [0.0, 1.0, 10.0];
        let s = silhouette(Points::new(&xs, 1), &[0, 0, 1]).unwrap();
        assert_eq!(s.samples[2], 0.0);
        assert!(matches!(
            silhouette(Points::new(&xs, 1), &[0, 0, 0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn bsi_and_sigma_examples() {
        assert!((bsi(&[0.9, 0.5], &[1.0, 1.0]).unwrap() - 0.7).abs() < 1e-12);
        assert!((bsi(&[0.9, 0.5], &[2.0, 1.0]).unwrap() - 2.3 / 3.0).abs() < 1e-12);
        assert_eq!(bsi(&[0.4], &[1.0]).unwrap(), 0.4);
        assert!((sigma_sk(&[0.9, 0.5], &[1.0, 1.0], 0.7) - 0.2).abs() < 1e-12);
        assert_eq!(sigma_sk(&[0.3, 0.3, 0.3], &[1.0; 3], 0.3), 0.0);
        assert!(bsi(&[], &[]).is_err());
    }

    #[test]
    fn boundary_examples() {
        assert_eq!(boundary_count(&[0.04, -0.02, 0.5], 0.05), 2);
        assert_eq!(boundary_count(&[1.0, 1.0], 0.05), 0);
        assert_eq!(boundary_count(&[0.0, 0.01], 0.0), 0);
    }

    #[test]
    fn tight_distant_blobs() {
        let xs = [0.0, 0.01, 0.02, 100.0, 100.01, 100.02];
        let p = Points::new(&xs, 1);
        let labels = [0, 0, 0, 1, 1, 1];
        assert!(calinski_harabasz(p, &labels).unwrap() > 100.0);
        assert!(davies_bouldin(p, &labels).unwrap().0 < 0.1);
    }

    #[test]
    fn coincident_centroids_flagged() {
        let xs = [-1.0, 1.0, -2.0, 2.0];
        let (db, flag) = davies_bouldin(Points::new(&xs, 1), &[0, 0, 1, 1]).unwrap();
        assert!(db.is_infinite() && flag);
        let q = QualityReport::compute_points(Points::new(&xs, 1), &[0, 0, 1, 1], &ClusterWeights::Equal).unwrap();
        let json = serde_json::to_string(&q).unwrap();
        assert!(json.contains("\"db\":\"inf\""));
        let back: QualityReport = serde_json::from_str(&json).unwrap();
        assert!(back.db.is_infinite());
    }

    #[test]
    fn size_weights_reproduce_si() {
        let xs = [0.0, 1.0, 2.0, 10.0, 12.0];
        let labels = [0, 0, 0, 1, 1];
        let q = QualityReport::compute_points(Points::new(&xs, 1), &labels, &ClusterWeights::Size).unwrap();
        assert!((q.bsi - q.si).abs() < 1e-12);
        assert!(ClusterWeights::Custom(vec![1.0]).resolve(&[2, 3]).is_err());
    }
}
