use super::agglomerative::{cut, ward_merges};
use super::{check_k, nearest, sq_dist, ClusteringResult, Clusterer, Points};
use crate::error::{Error, Result};

/// Clustering feature: count, linear sum and squared sum of a subcluster.
#[derive(Debug, Clone, PartialEq)]
pub struct CfEntry {
    pub n: f64,
    pub ls: Vec<f64>,
    pub ss: f64,
    child: Option<usize>,
}

impl CfEntry {
    pub fn from_point(x: &[f64]) -> Self {
        Self {
            n: 1.0,
            ls: x.to_vec(),
            ss: x.iter().map(|v| v * v).sum(),
            child: None,
        }
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.ls.iter().map(|v| v / self.n).collect()
    }

    /// Root-mean-square distance of members to the centroid.
    pub fn radius(&self) -> f64 {
        let c2: f64 = self.ls.iter().map(|v| (v / self.n).powi(2)).sum();
        (self.ss / self.n - c2).max(0.0).sqrt()
    }

    pub fn absorb(&mut self, other: &CfEntry) {
        self.n += other.n;
        self.ss += other.ss;
        self.ls.iter_mut().zip(&other.ls).for_each(|(a, b)| *a += b);
    }

    pub fn merged(&self, other: &CfEntry) -> CfEntry {
        let mut m = self.clone();
        m.absorb(other);
        m
    }
}

#[derive(Debug, Clone)]
struct Node {
    leaf: bool,
    entries: Vec<CfEntry>,
}

/// Height-balanced CF tree stored in an arena.
#[derive(Debug, Clone)]
pub struct CfTree {
    threshold: f64,
    branching: usize,
    nodes: Vec<Node>,
    root: usize,
}

impl CfTree {
    pub fn new(threshold: f64, branching: usize) -> Self {
        Self {
            threshold,
            branching,
            nodes: vec![Node {
                leaf: true,
                entries: Vec::new(),
            }],
            root: 0,
        }
    }

    pub fn insert(&mut self, x: &[f64]) {
        let entry = CfEntry::from_point(x);
        if let Some((left, right)) = self.insert_into(self.root, &entry) {
            let entries = vec![self.summary(left), self.summary(right)];
            self.nodes.push(Node { leaf: false, entries });
            self.root = self.nodes.len() - 1;
        }
    }

    fn summary(&self, node: usize) -> CfEntry {
        let entries = &self.nodes[node].entries;
        let mut s = entries[0].clone();
        for e in &entries[1..] {
            s.absorb(e);
        }
        s.child = Some(node);
        s
    }

    fn closest(&self, node: usize, e: &CfEntry) -> Option<usize> {
        let c = e.centroid();
        self.nodes[node]
            .entries
            .iter()
            .enumerate()
            .map(|(i, f)| (i, sq_dist(&f.centroid(), &c)))
            .fold(None, |best: Option<(usize, f64)>, cur| match best {
                Some(b) if b.1 <= cur.1 => Some(b),
                _ => Some(cur),
            })
            .map(|b| b.0)
    }

    /// Inserts below `node`; returns the two halves if `node` was split.
    fn insert_into(&mut self, node: usize, e: &CfEntry) -> Option<(usize, usize)> {
        let closest = self.closest(node, e);
        if self.nodes[node].leaf {
            if let Some(i) = closest {
                let merged = self.nodes[node].entries[i].merged(e);
                if merged.radius() <= self.threshold {
                    self.nodes[node].entries[i] = merged;
                    return None;
                }
            }
            self.nodes[node].entries.push(e.clone());
        } else {
            let i = closest.expect("inner nodes are never empty");
            let child = self.nodes[node].entries[i].child.expect("inner entry has a child");
            match self.insert_into(child, e) {
                None => self.nodes[node].entries[i].absorb(e),
                Some((left, right)) => {
                    self.nodes[node].entries[i] = self.summary(left);
                    let right = self.summary(right);
                    self.nodes[node].entries.push(right);
                }
            }
        }
        (self.nodes[node].entries.len() > self.branching).then(|| self.split(node))
    }

    /// Splits around the farthest pair of entries; `node` keeps the left half.
    fn split(&mut self, node: usize) -> (usize, usize) {
        let entries = std::mem::take(&mut self.nodes[node].entries);
        let centroids: Vec<Vec<f64>> = entries.iter().map(CfEntry::centroid).collect();
        let mut far = (0, 1, -1.0);
        for i in 0..centroids.len() {
            for j in i + 1..centroids.len() {
                let d = sq_dist(&centroids[i], &centroids[j]);
                if d > far.2 {
                    far = (i, j, d);
                }
            }
        }
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for (e, c) in entries.into_iter().zip(&centroids) {
            if sq_dist(c, &centroids[far.0]) <= sq_dist(c, &centroids[far.1]) {
                left.push(e);
            } else {
                right.push(e);
            }
        }
        if right.is_empty() {
            // Coincident centroids.
            right.push(left.pop().expect("split of an overfull node"));
        }
        let leaf = self.nodes[node].leaf;
        self.nodes[node].entries = left;
        self.nodes.push(Node { leaf, entries: right });
        (node, self.nodes.len() - 1)
    }

    /// Subclusters held in the leaves, left to right.
    pub fn leaf_entries(&self) -> Vec<&CfEntry> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(node) = stack.pop() {
            let n = &self.nodes[node];
            if n.leaf {
                out.extend(n.entries.iter());
            } else {
                stack.extend(n.entries.iter().rev().filter_map(|e| e.child));
            }
        }
        out
    }
}

/// BIRCH: CF-tree summarization followed by weighted Ward on the leaf
/// subclusters.
#[derive(Debug, Clone)]
pub struct Birch {
    pub threshold: f64,
    pub branching_factor: usize,
}

impl Birch {
    pub fn new(threshold: f64, branching_factor: usize) -> Result<Self> {
        if !(threshold.is_finite() && threshold > 0.0) {
            return Err(Error::Parameter(format!("threshold must be positive, got {threshold}")));
        }
        if branching_factor < 2 {
            return Err(Error::Parameter("branching_factor must be at least 2".into()));
        }
        Ok(Self {
            threshold,
            branching_factor,
        })
    }
}

impl Clusterer for Birch {
    fn name(&self) -> &'static str {
        "birch"
    }

    fn fit(&self, points: Points<'_>, k: Option<usize>, _seed: u64) -> Result<ClusteringResult> {
        let n = points.len();
        let k = check_k(k, n, self.name())?;
        let mut tree = CfTree::new(self.threshold, self.branching_factor);
        for i in 0..n {
            tree.insert(points.row(i));
        }
        let leaves = tree.leaf_entries();
        let centroids: Vec<Vec<f64>> = leaves.iter().map(|e| e.centroid()).collect();
        let weights: Vec<f64> = leaves.iter().map(|e| e.n).collect();
        let m = centroids.len();
        let sub_labels = if m <= k {
            (0..m).collect()
        } else {
            let flat: Vec<f64> = centroids.iter().flatten().copied().collect();
            cut(m, &ward_merges(Points::new(&flat, points.dim()), &weights), k)
        };
        let labels = (0..n)
            .map(|i| sub_labels[nearest(points.row(i), &centroids).0])
            .collect();
        Ok(ClusteringResult::from_labels(labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{adjusted_rand_index, gaussian_blobs};

    #[test]
    fn cf_arithmetic() {
        let mut a = CfEntry::from_point(&[1.0, 2.0]);
        a.absorb(&CfEntry::from_point(&[3.0, 4.0]));
        assert_eq!(a.n, 2.0);
        assert_eq!(a.ls, vec![4.0, 6.0]);
        assert_eq!(a.ss, 1.0 + 4.0 + 9.0 + 16.0);
        assert_eq!(a.centroid(), vec![2.0, 3.0]);
        // Both members are sqrt(2) from the centroid.
        assert!((a.radius() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn tree_preserves_total_count_and_sum() {
        let (m, _) = gaussian_blobs(&[100, 100], 3, 1.0, 3.0, 6);
        let mut tree = CfTree::new(0.3, 5);
        for row in m.rows() {
            tree.insert(row.as_slice().unwrap());
        }
        let leaves = tree.leaf_entries();
        assert!(leaves.len() > 5);
        let total: f64 = leaves.iter().map(|e| e.n).sum();
        assert_eq!(total, 200.0);
        for j in 0..3 {
            let ls: f64 = leaves.iter().map(|e| e.ls[j]).sum();
            assert!((ls - m.column(j).sum()).abs() < 1e-9);
        }
        for e in leaves {
            assert!(e.radius() <= 0.3 + 1e-12 || e.n == 1.0);
        }
    }

    #[test]
    fn recovers_blobs() {
        let (m, truth) = gaussian_blobs(&[80, 80, 80], 4, 0.7, 6.0, 1);
        let view = m.view();
        let r = Birch::new(0.5, 20).unwrap().fit(Points::from_view(&view), Some(3), 0).unwrap();
        assert!(adjusted_rand_index(&r.labels, &truth) > 0.99);
    }

    #[test]
    fn too_few_subclusters_collapse() {
        let xs = [0.0, 0.01, 0.02, 0.03];
        let spec_k = 3;
        let mut r = Birch::new(1.0, 10).unwrap().fit(Points::new(&xs, 1), Some(spec_k), 0).unwrap();
        r.canonicalize(Some(spec_k));
        assert_eq!(r.k_found, 1);
        assert!(r.collapsed);
    }
}
