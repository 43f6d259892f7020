//! Clustering algorithm portfolio.
//!
//! Every algorithm implements [`Clusterer`] and is registered by name in an
//! [`AlgorithmRegistry`]; a [`ModelSpec`] picks one at runtime together with
//! its hyperparameters, cluster count and seed.

mod agglomerative;
mod birch;
mod dbscan;
mod fcm;
mod kmeans;
mod mean_shift;
mod params;
mod registry;

pub use agglomerative::{ward_merges, Agglomerative, Linkage, Merge};
pub use birch::{Birch, CfEntry, CfTree};
pub use dbscan::Dbscan;
pub use fcm::{fcm_memberships, FuzzyCMeans};
pub use kmeans::{KMeans, KMeansCore, MiniBatchKMeans};
pub use mean_shift::{estimate_bandwidth, MeanShift};
pub use params::{Hyperparameters, ParamDomain, ParamValue};
pub use registry::{registry, AlgorithmInfo, AlgorithmRegistry};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Row-major view of the data as contiguous slices.
#[derive(Debug, Clone, Copy)]
pub struct Points<'a> {
    data: &'a [f64],
    dim: usize,
}

impl<'a> Points<'a> {
    pub fn new(data: &'a [f64], dim: usize) -> Self {
        assert!(dim > 0 && data.len() % dim == 0, "data length must be a multiple of dim");
        Self { data, dim }
    }

    pub fn from_view(view: &'a ArrayView2<'a, f64>) -> Self {
        let data = view.as_slice().expect("matrix rows must be contiguous");
        Self::new(data, view.ncols().max(1))
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One point of the search space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub algorithm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default)]
    pub hyperparameters: Hyperparameters,
    #[serde(default)]
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(algorithm: &str, k: Option<usize>) -> Self {
        Self {
            algorithm: algorithm.to_string(),
            k,
            hyperparameters: Hyperparameters::new(),
            seed: 0,
        }
    }

    pub fn with_params(mut self, hyperparameters: Hyperparameters) -> Self {
        self.hyperparameters = hyperparameters;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Short name for reports, e.g. `kmeans_pp[k=6]`.
    pub fn label(&self) -> String {
        match self.k {
            Some(k) => format!("{}[k={k}]", self.algorithm),
            None => self.algorithm.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    /// Cluster index per row, in `0..k_found`, numbered by first appearance.
    pub labels: Vec<usize>,
    /// Soft memberships (rows sum to one), fuzzy algorithms only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memberships: Option<Array2<f64>>,
    pub k_found: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Rows labelled as noise and attached to their nearest cluster.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<Vec<bool>>,
    /// Fewer clusters than requested survived.
    #[serde(default)]
    pub collapsed: bool,
    /// Objective value per iteration for iterative algorithms.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub objective_trace: Vec<f64>,
}

impl ClusteringResult {
    pub fn from_labels(labels: Vec<usize>) -> Self {
        let mut r = Self {
            labels,
            memberships: None,
            k_found: 0,
            converged: true,
            iterations: 0,
            noise: None,
            collapsed: false,
            objective_trace: Vec::new(),
        };
        r.canonicalize(None);
        r
    }

    /// Renumbers clusters by first appearance, drops empty ones, and flags a
    /// shortfall against `requested`.
    pub fn canonicalize(&mut self, requested: Option<usize>) {
        let width = self.labels.iter().copied().max().map_or(0, |m| m + 1);
        let mut map = vec![usize::MAX; width];
        let mut next = 0;
        for l in self.labels.iter_mut() {
            if map[*l] == usize::MAX {
                map[*l] = next;
                next += 1;
            }
            *l = map[*l];
        }
        if let Some(u) = self.memberships.take() {
            let mut cols = vec![usize::MAX; next];
            for (old, &new) in map.iter().enumerate() {
                if new != usize::MAX {
                    cols[new] = old;
                }
            }
            let mut reordered = u.select(ndarray::Axis(1), &cols);
            // Memberships of dropped (empty) clusters fold into the rest.
            for mut row in reordered.rows_mut() {
                let s: f64 = row.sum();
                if s > 0.0 {
                    row.mapv_inplace(|v| v / s);
                }
            }
            self.memberships = Some(reordered);
        }
        self.k_found = next;
        if let Some(k) = requested {
            if next < k {
                self.collapsed = true;
            }
        }
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k_found];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// A clustering algorithm with its hyperparameters bound.
pub trait Clusterer: Send + Sync {
    fn name(&self) -> &'static str;

    /// Partitions the rows of `data`. `k` is `None` for algorithms whose
    /// cluster count is emergent.
    fn fit(&self, data: Points<'_>, k: Option<usize>, seed: u64) -> Result<ClusteringResult>;
}

/// Fits `spec` on the (standardized) matrix using the built-in registry.
pub fn fit(spec: &ModelSpec, m: &FeatureMatrix) -> Result<ClusteringResult> {
    registry().fit(spec, m)
}

pub(crate) fn check_k(k: Option<usize>, n: usize, name: &str) -> Result<usize> {
    let k = k.ok_or_else(|| Error::MissingK(name.to_string()))?;
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if k > n {
        return Err(Error::KExceedsRows { k, n });
    }
    Ok(k)
}

/// Index of the nearest centre (lowest index on ties) and the squared distance.
pub(crate) fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}
