use super::{check_k, dist, sq_dist, ClusteringResult, Clusterer, Points};
use crate::error::{Error, Result};
use rayon::prelude::*;
use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linkage {
    Ward,
    Average,
}

/// One merge of the dendrogram. `a` and `b` are the slots of the two merged
/// clusters; the result keeps slot `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct Agglomerative {
    pub linkage: Linkage,
    /// Neighbours per row in the connectivity graph; `None` is unconstrained.
    pub connectivity: Option<usize>,
}

impl Agglomerative {
    pub fn new(linkage: Linkage, connectivity: Option<usize>) -> Result<Self> {
        if connectivity == Some(0) {
            return Err(Error::Parameter("connectivity_neighbours must be positive".into()));
        }
        Ok(Self { linkage, connectivity })
    }
}

fn condensed(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    n * i - i * (i + 1) / 2 + j - i - 1
}

/// Nearest-neighbour-chain agglomeration. `d` is the condensed initial
/// dissimilarity matrix, `w` the cluster weights. Merges are returned sorted
/// by cost.
fn nn_chain(n: usize, mut d: Vec<f64>, mut w: Vec<f64>, linkage: Linkage) -> Vec<Merge> {
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    let mut chain: Vec<usize> = Vec::new();
    while merges.len() + 1 < n {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster"));
        }
        let (a, b, cost) = loop {
            let a = *chain.last().unwrap();
            let prev = (chain.len() >= 2).then(|| chain[chain.len() - 2]);
            let mut best = prev.map_or((usize::MAX, f64::INFINITY), |p| (p, d[condensed(n, a, p)]));
            for c in 0..n {
                if c == a || !active[c] {
                    continue;
                }
                let v = d[condensed(n, a, c)];
                if v < best.1 {
                    best = (c, v);
                }
            }
            if Some(best.0) == prev {
                chain.pop();
                chain.pop();
                break (a, best.0, best.1);
            }
            chain.push(best.0);
        };
        let (keep, gone) = (a.min(b), a.max(b));
        let (wa, wb) = (w[keep], w[gone]);
        for k in 0..n {
            if !active[k] || k == keep || k == gone {
                continue;
            }
            let dk_a = d[condensed(n, k, keep)];
            let dk_b = d[condensed(n, k, gone)];
            d[condensed(n, k, keep)] = match linkage {
                Linkage::Ward => {
                    let wk = w[k];
                    ((wa + wk) * dk_a + (wb + wk) * dk_b - wk * cost) / (wa + wb + wk)
                }
                Linkage::Average => (wa * dk_a + wb * dk_b) / (wa + wb),
            };
        }
        w[keep] = wa + wb;
        active[gone] = false;
        merges.push(Merge { a: keep, b: gone, cost });
    }
    merges.sort_by(|x, y| x.cost.total_cmp(&y.cost));
    merges
}

fn initial_matrix(points: Points<'_>, weights: &[f64], linkage: Linkage) -> Vec<f64> {
    let n = points.len();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            (i + 1..n).map(move |j| match linkage {
                Linkage::Ward => {
                    let (a, b) = (weights[i], weights[j]);
                    a * b / (a + b) * sq_dist(points.row(i), points.row(j))
                }
                Linkage::Average => dist(points.row(i), points.row(j)),
            })
        })
        .collect()
}

/// Unconstrained weighted Ward merges of `points`. The cost of a merge is the
/// increase in within-cluster sum of squares.
pub fn ward_merges(points: Points<'_>, weights: &[f64]) -> Vec<Merge> {
    let d = initial_matrix(points, weights, Linkage::Ward);
    nn_chain(points.len(), d, weights.to_vec(), Linkage::Ward)
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }
}

/// Labels after applying the cheapest `n - k` merges.
pub(crate) fn cut(n: usize, merges: &[Merge], k: usize) -> Vec<usize> {
    let mut uf = UnionFind::new(n);
    for m in merges.iter().take(n - k) {
        let (ra, rb) = (uf.find(m.a), uf.find(m.b));
        uf.0[rb] = ra;
    }
    (0..n).map(|i| uf.find(i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    cost: f64,
    a: usize,
    b: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cost
            .total_cmp(&other.cost)
            .then(self.a.cmp(&other.a))
            .then(self.b.cmp(&other.b))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Symmetrized k-nearest-neighbour graph as sorted adjacency lists.
fn knn_graph(points: Points<'_>, k: usize) -> Vec<Vec<usize>> {
    let n = points.len();
    let k = k.min(n - 1);
    let nn: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(points.row(i), points.row(j)), j))
                .collect();
            if k < d.len() {
                d.select_nth_unstable_by(k, |x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                d.truncate(k);
            }
            d.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    let mut adj = vec![Vec::new(); n];
    for (i, list) in nn.iter().enumerate() {
        for &j in list {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for list in adj.iter_mut() {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Cluster state for graph-constrained merging. New clusters get fresh ids,
/// so stale heap entries are recognised by an inactive endpoint.
struct Graph<'a> {
    points: Points<'a>,
    linkage: Linkage,
    active: Vec<bool>,
    weight: Vec<f64>,
    sums: Vec<Vec<f64>>,
    members: Vec<Vec<usize>>,
    /// Current average-linkage distances to adjacent clusters.
    links: Vec<BTreeMap<usize, f64>>,
}

impl Graph<'_> {
    fn ward_cost(&self, a: usize, b: usize) -> f64 {
        let (wa, wb) = (self.weight[a], self.weight[b]);
        let d2: f64 = self.sums[a]
            .iter()
            .zip(&self.sums[b])
            .map(|(x, y)| (x / wa - y / wb).powi(2))
            .sum();
        wa * wb / (wa + wb) * d2
    }

    fn mean_distance(&self, a: usize, b: usize) -> f64 {
        let mut total = 0.0;
        for &i in &self.members[a] {
            for &j in &self.members[b] {
                total += dist(self.points.row(i), self.points.row(j));
            }
        }
        total / (self.members[a].len() * self.members[b].len()) as f64
    }

    fn cost(&self, a: usize, b: usize) -> f64 {
        match self.linkage {
            Linkage::Ward => self.ward_cost(a, b),
            Linkage::Average => self.links[a][&b],
        }
    }

    fn merge(&mut self, a: usize, b: usize) -> usize {
        let id = self.active.len();
        self.active[a] = false;
        self.active[b] = false;
        self.active.push(true);
        self.weight.push(self.weight[a] + self.weight[b]);
        let sum: Vec<f64> = self.sums[a].iter().zip(&self.sums[b]).map(|(x, y)| x + y).collect();
        self.sums.push(sum);
        let mut members = std::mem::take(&mut self.members[a]);
        members.append(&mut std::mem::take(&mut self.members[b]));
        self.members.push(members);

        let (la, lb) = (std::mem::take(&mut self.links[a]), std::mem::take(&mut self.links[b]));
        let (wa, wb) = (self.weight[a], self.weight[b]);
        let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
        for (&c, &v) in la.iter() {
            if c == b || !self.active[c] {
                continue;
            }
            let value = match lb.get(&c) {
                Some(&u) => (wa * v + wb * u) / (wa + wb),
                None => v,
            };
            merged.insert(c, value);
        }
        for (&c, &u) in lb.iter() {
            if c != a && self.active[c] {
                merged.entry(c).or_insert(u);
            }
        }
        for (&c, &v) in merged.iter() {
            self.links[c].remove(&a);
            self.links[c].remove(&b);
            self.links[c].insert(id, v);
        }
        self.links.push(merged);
        id
    }
}

fn constrained(points: Points<'_>, k: usize, neighbours: usize, linkage: Linkage) -> Vec<usize> {
    let n = points.len();
    let adj = knn_graph(points, neighbours);
    let mut g = Graph {
        points,
        linkage,
        active: vec![true; n],
        weight: vec![1.0; n],
        sums: (0..n).map(|i| points.row(i).to_vec()).collect(),
        members: (0..n).map(|i| vec![i]).collect(),
        links: adj
            .iter()
            .enumerate()
            .map(|(i, list)| list.iter().map(|&j| (j, dist(points.row(i), points.row(j)))).collect())
            .collect(),
    };
    let mut heap = BinaryHeap::new();
    for (i, list) in adj.iter().enumerate() {
        for &j in list.iter().filter(|&&j| j > i) {
            heap.push(Reverse(Candidate { cost: g.cost(i, j), a: i, b: j }));
        }
    }
    let mut remaining = n;
    while remaining > k {
        let Some(Reverse(c)) = heap.pop() else {
            // Disconnected graph: link every pair of remaining clusters.
            let alive: Vec<usize> = (0..g.active.len()).filter(|&i| g.active[i]).collect();
            log::warn!("connectivity graph has {} components; completing it", alive.len());
            for (x, &a) in alive.iter().enumerate() {
                for &b in &alive[x + 1..] {
                    if !g.links[a].contains_key(&b) {
                        let d = g.mean_distance(a, b);
                        g.links[a].insert(b, d);
                        g.links[b].insert(a, d);
                    }
                    heap.push(Reverse(Candidate { cost: g.cost(a, b), a, b }));
                }
            }
            continue;
        };
        if !g.active[c.a] || !g.active[c.b] {
            continue;
        }
        let id = g.merge(c.a, c.b);
        remaining -= 1;
        let neighbours: Vec<usize> = g.links[id].keys().copied().collect();
        for other in neighbours {
            heap.push(Reverse(Candidate { cost: g.cost(other, id), a: other, b: id }));
        }
    }
    let mut labels = vec![0; n];
    for (cluster, members) in g.members.iter().enumerate() {
        if g.active[cluster] {
            for &i in members {
                labels[i] = cluster;
            }
        }
    }
    labels
}

impl Clusterer for Agglomerative {
    fn name(&self) -> &'static str {
        match self.linkage {
            Linkage::Ward => "ward",
            Linkage::Average => "average_linkage",
        }
    }

    fn fit(&self, points: Points<'_>, k: Option<usize>, _seed: u64) -> Result<ClusteringResult> {
        let n = points.len();
        let k = check_k(k, n, self.name())?;
        let labels = match self.connectivity {
            Some(neighbours) if n > 1 => constrained(points, k, neighbours, self.linkage),
            _ => {
                let weights = vec![1.0; n];
                let d = initial_matrix(points, &weights, self.linkage);
                cut(n, &nn_chain(n, d, weights, self.linkage), k)
            }
        };
        Ok(ClusteringResult::from_labels(labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{adjusted_rand_index, gaussian_blobs};

    #[test]
    fn tiny_1d_partitions() {
        let xs = [0.0, 1.0, 10.0, 11.0];
        for linkage in [Linkage::Ward, Linkage::Average] {
            for conn in [None, Some(1), Some(3)] {
                let r = Agglomerative::new(linkage, conn)
                    .unwrap()
                    .fit(Points::new(&xs, 1), Some(2), 0)
                    .unwrap();
                assert_eq!(r.labels, vec![0, 0, 1, 1], "{linkage:?} {conn:?}");
            }
        }
    }

    #[test]
    fn ward_costs_are_wcss_increments() {
        // Singletons 0 and 1 merge at 0.5; {0,1} with 10 and 11 at the end.
        let xs = [0.0, 1.0, 10.0, 11.0];
        let merges = ward_merges(Points::new(&xs, 1), &[1.0; 4]);
        assert_eq!(merges.len(), 3);
        assert!((merges[0].cost - 0.5).abs() < 1e-12);
        assert!((merges[1].cost - 0.5).abs() < 1e-12);
        // Total WCSS 101 - 1 already spent.
        assert!((merges[2].cost - 100.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_ward_matches_formula() {
        let xs = [0.0, 3.0];
        let merges = ward_merges(Points::new(&xs, 1), &[2.0, 1.0]);
        assert!((merges[0].cost - 2.0 / 3.0 * 9.0).abs() < 1e-12);
    }

    #[test]
    fn average_linkage_oracle() {
        // Cluster {0,1}; distance to 4 is mean(4, 3) = 3.5, to 5 is 4.5.
        let xs = [0.0, 1.0, 4.0, 10.0];
        let r = Agglomerative::new(Linkage::Average, None)
            .unwrap()
            .fit(Points::new(&xs, 1), Some(2), 0)
            .unwrap();
        assert_eq!(r.labels, vec![0, 0, 0, 1]);
    }

    #[test]
    fn blobs_recovered_with_and_without_graph() {
        let (m, truth) = gaussian_blobs(&[60, 60, 60], 4, 0.7, 6.0, 21);
        let view = m.view();
        let p = Points::from_view(&view);
        for linkage in [Linkage::Ward, Linkage::Average] {
            for conn in [None, Some(10)] {
                let r = Agglomerative::new(linkage, conn).unwrap().fit(p, Some(3), 0).unwrap();
                assert!(adjusted_rand_index(&r.labels, &truth) > 0.99);
            }
        }
    }

    #[test]
    fn disconnected_graph_is_completed() {
        let xs = [0.0, 0.1, 50.0, 50.1, 120.0, 120.1];
        let r = Agglomerative::new(Linkage::Ward, Some(1))
            .unwrap()
            .fit(Points::new(&xs, 1), Some(2), 0)
            .unwrap();
        assert_eq!(r.k_found, 2);
        assert_eq!(r.labels, vec![0, 0, 0, 0, 1, 1]);
    }
}
