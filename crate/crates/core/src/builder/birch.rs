//! BIRCH clustering: a CF-tree of `(n, LS, SS)` clustering features built by
//! radius-threshold insertion, followed by centroid-linkage agglomeration of
//! the leaf subclusters.

use crate::error::{Error, Result};

/// Clustering feature: point count, linear sum and sum of squared norms.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringFeature {
    pub n: f64,
    pub ls: Vec<f64>,
    pub ss: f64,
}

impl ClusteringFeature {
    pub fn empty(dim: usize) -> Self {
        Self {
            n: 0.0,
            ls: vec![0.0; dim],
            ss: 0.0,
        }
    }

    pub fn from_point(p: &[f64]) -> Self {
        Self {
            n: 1.0,
            ls: p.to_vec(),
            ss: p.iter().map(|v| v * v).sum(),
        }
    }

    pub fn absorb(&mut self, other: &ClusteringFeature) {
        self.n += other.n;
        self.ss += other.ss;
        for (a, b) in self.ls.iter_mut().zip(&other.ls) {
            *a += b;
        }
    }

    pub fn centroid(&self) -> Vec<f64> {
        self.ls.iter().map(|v| v / self.n).collect()
    }

    /// Root-mean-square distance of members to the centroid.
    pub fn radius(&self) -> f64 {
        radius_of(self.n, &self.ls, self.ss)
    }

    fn merged_radius(&self, other: &ClusteringFeature) -> f64 {
        let n = self.n + other.n;
        let ls: Vec<f64> = self.ls.iter().zip(&other.ls).map(|(a, b)| a + b).collect();
        radius_of(n, &ls, self.ss + other.ss)
    }
}

fn radius_of(n: f64, ls: &[f64], ss: f64) -> f64 {
    if n <= 0.0 {
        return 0.0;
    }
    let c2: f64 = ls.iter().map(|v| (v / n) * (v / n)).sum();
    (ss / n - c2).max(0.0).sqrt()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
pub struct ClusterSet {
    /// Cluster id of every input point, in input order.
    pub assignments: Vec<usize>,
    /// Per-cluster centroid in the clustering feature space.
    pub centroids: Vec<Vec<f64>>,
    /// Per-cluster RMS radius from the clustering features.
    pub radii: Vec<f64>,
    /// Leaf subcluster centroids owned by each cluster (for radius audits).
    pub subcluster_centroids: Vec<Vec<Vec<f64>>>,
    pub count: usize,
}

enum NodeKind {
    Leaf(Vec<usize>),
    Inner(Vec<usize>),
}

struct TreeNode {
    cf: ClusteringFeature,
    kind: NodeKind,
}

struct CfTree {
    threshold: f64,
    branching: usize,
    dim: usize,
    nodes: Vec<TreeNode>,
    subs: Vec<ClusteringFeature>,
    sub_centroids: Vec<Vec<f64>>,
    root: usize,
}

impl CfTree {
    fn new(dim: usize, threshold: f64, branching: usize) -> Self {
        Self {
            threshold,
            branching,
            dim,
            nodes: vec![TreeNode {
                cf: ClusteringFeature::empty(dim),
                kind: NodeKind::Leaf(Vec::new()),
            }],
            subs: Vec::new(),
            sub_centroids: Vec::new(),
            root: 0,
        }
    }

    /// Inserts a point and returns the id of the leaf subcluster holding it.
    fn insert(&mut self, p: &[f64]) -> usize {
        let point = ClusteringFeature::from_point(p);
        let (sub, split) = self.insert_at(self.root, &point, p);
        if let Some(sibling) = split {
            let mut cf = self.nodes[self.root].cf.clone();
            cf.absorb(&self.nodes[sibling].cf);
            self.nodes.push(TreeNode {
                cf,
                kind: NodeKind::Inner(vec![self.root, sibling]),
            });
            self.root = self.nodes.len() - 1;
        }
        sub
    }

    fn insert_at(&mut self, node: usize, point: &ClusteringFeature, p: &[f64]) -> (usize, Option<usize>) {
        let sub = match &self.nodes[node].kind {
            NodeKind::Leaf(entries) => {
                let closest = entries
                    .iter()
                    .copied()
                    .map(|s| (sq_dist(&self.sub_centroids[s], p), s))
                    .min_by(|a, b| a.partial_cmp(b).unwrap());
                match closest {
                    Some((_, s)) if self.subs[s].merged_radius(point) <= self.threshold => {
                        self.subs[s].absorb(point);
                        self.sub_centroids[s] = self.subs[s].centroid();
                        s
                    }
                    _ => {
                        self.subs.push(point.clone());
                        self.sub_centroids.push(p.to_vec());
                        let s = self.subs.len() - 1;
                        if let NodeKind::Leaf(entries) = &mut self.nodes[node].kind {
                            entries.push(s);
                        }
                        s
                    }
                }
            }
            NodeKind::Inner(children) => {
                let child = children
                    .iter()
                    .copied()
                    .map(|c| (sq_dist(&self.nodes[c].cf.centroid(), p), c))
                    .min_by(|a, b| a.partial_cmp(b).unwrap())
                    .map(|(_, c)| c)
                    .expect("inner nodes have children");
                let (sub, split) = self.insert_at(child, point, p);
                if let Some(sibling) = split {
                    if let NodeKind::Inner(children) = &mut self.nodes[node].kind {
                        children.push(sibling);
                    }
                }
                sub
            }
        };
        self.nodes[node].cf.absorb(point);
        let len = match &self.nodes[node].kind {
            NodeKind::Leaf(e) | NodeKind::Inner(e) => e.len(),
        };
        let split = (len > self.branching).then(|| self.split(node));
        (sub, split)
    }

    fn entry_cf(&self, leaf: bool, id: usize) -> &ClusteringFeature {
        if leaf {
            &self.subs[id]
        } else {
            &self.nodes[id].cf
        }
    }

    /// Splits an overfull node around its farthest pair of entries; returns
    /// the new sibling.
    fn split(&mut self, node: usize) -> usize {
        let (leaf, entries) = match &mut self.nodes[node].kind {
            NodeKind::Leaf(e) => (true, std::mem::take(e)),
            NodeKind::Inner(e) => (false, std::mem::take(e)),
        };
        let cents: Vec<Vec<f64>> = entries.iter().map(|&e| self.entry_cf(leaf, e).centroid()).collect();
        let (mut sa, mut sb, mut best) = (0, 1, -1.0);
        for i in 0..cents.len() {
            for j in i + 1..cents.len() {
                let d = sq_dist(&cents[i], &cents[j]);
                if d > best {
                    best = d;
                    sa = i;
                    sb = j;
                }
            }
        }
        let mut left = Vec::new();
        let mut right = Vec::new();
        for (i, &e) in entries.iter().enumerate() {
            if i == sa || (i != sb && sq_dist(&cents[i], &cents[sa]) <= sq_dist(&cents[i], &cents[sb])) {
                left.push(e);
            } else {
                right.push(e);
            }
        }
        let sum = |ids: &[usize], tree: &CfTree| {
            let mut cf = ClusteringFeature::empty(tree.dim);
            for &e in ids {
                cf.absorb(tree.entry_cf(leaf, e));
            }
            cf
        };
        let left_cf = sum(&left, self);
        let right_cf = sum(&right, self);
        let wrap = |ids: Vec<usize>| if leaf { NodeKind::Leaf(ids) } else { NodeKind::Inner(ids) };
        self.nodes[node] = TreeNode {
            cf: left_cf,
            kind: wrap(left),
        };
        self.nodes.push(TreeNode {
            cf: right_cf,
            kind: wrap(right),
        });
        self.nodes.len() - 1
    }
}

/// Clusters `points` into at most `target_k` groups.
pub fn birch_cluster(points: &[Vec<f64>], target_k: usize, threshold: f64, branching: usize) -> Result<ClusterSet> {
    if points.is_empty() {
        return Err(Error::Contract("birch_cluster needs at least one point".into()));
    }
    if !(threshold > 0.0) || branching < 2 || target_k == 0 {
        return Err(Error::Contract(format!(
            "invalid BIRCH parameters: threshold {threshold}, branching {branching}, target {target_k}"
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Contract("points have inconsistent dimensions".into()));
    }
    let mut tree = CfTree::new(dim, threshold, branching);
    let point_sub: Vec<usize> = points.iter().map(|p| tree.insert(p)).collect();

    let sub_to_cluster = agglomerate(&tree.subs, target_k);
    let count = sub_to_cluster.iter().max().map_or(0, |m| m + 1);
    let mut cfs = vec![ClusteringFeature::empty(dim); count];
    let mut members = vec![Vec::new(); count];
    for (s, &c) in sub_to_cluster.iter().enumerate() {
        cfs[c].absorb(&tree.subs[s]);
        members[c].push(tree.sub_centroids[s].clone());
    }
    Ok(ClusterSet {
        assignments: point_sub.iter().map(|&s| sub_to_cluster[s]).collect(),
        centroids: cfs.iter().map(ClusteringFeature::centroid).collect(),
        radii: cfs.iter().map(ClusteringFeature::radius).collect(),
        subcluster_centroids: members,
        count,
    })
}

/// Centroid-linkage agglomeration down to `target` groups. Returns a compact
/// group id per subcluster, numbered in order of each group's lowest
/// subcluster id.
fn agglomerate(subs: &[ClusteringFeature], target: usize) -> Vec<usize> {
    let m = subs.len();
    let mut owner: Vec<usize> = (0..m).collect();
    if m > target {
        let mut cfs: Vec<ClusteringFeature> = subs.to_vec();
        let mut cents: Vec<Vec<f64>> = cfs.iter().map(ClusteringFeature::centroid).collect();
        let mut active = vec![true; m];
        let nearest = |i: usize, active: &[bool], cents: &[Vec<f64>]| -> (f64, usize) {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..active.len() {
                if j != i && active[j] {
                    let d = sq_dist(&cents[i], &cents[j]);
                    if d < best.0 {
                        best = (d, j);
                    }
                }
            }
            best
        };
        let mut nn: Vec<(f64, usize)> = (0..m).map(|i| nearest(i, &active, &cents)).collect();
        let mut alive = m;
        while alive > target {
            let (i, (_, j)) = (0..m)
                .filter(|&i| active[i])
                .map(|i| (i, nn[i]))
                .min_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap().then(a.0.cmp(&b.0)))
                .unwrap();
            let (keep, drop) = (i.min(j), i.max(j));
            let absorbed = cfs[drop].clone();
            cfs[keep].absorb(&absorbed);
            cents[keep] = cfs[keep].centroid();
            active[drop] = false;
            owner[drop] = keep;
            alive -= 1;
            nn[keep] = nearest(keep, &active, &cents);
            for k in 0..m {
                if !active[k] || k == keep {
                    continue;
                }
                if nn[k].1 == keep || nn[k].1 == drop {
                    nn[k] = nearest(k, &active, &cents);
                } else {
                    let d = sq_dist(&cents[k], &cents[keep]);
                    if d < nn[k].0 || (d == nn[k].0 && keep < nn[k].1) {
                        nn[k] = (d, keep);
                    }
                }
            }
        }
    }
    // Resolve merge chains to their surviving representative.
    let root = |mut s: usize, owner: &[usize]| {
        while owner[s] != s {
            s = owner[s];
        }
        s
    };
    let mut compact = std::collections::BTreeMap::new();
    (0..m)
        .map(|s| {
            let r = root(s, &owner);
            let next = compact.len();
            *compact.entry(r).or_insert(next)
        })
        .collect()
}
