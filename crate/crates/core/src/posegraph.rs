//! Pose-graph construction: top-k edge selection, RANSAC pairwise
//! registration, the ICR/IPR confidence ratios and the maximum-spanning-tree
//! initialization.
//!
//! Edge `(u, v)` carries `T_uv = T_u ∘ T_v⁻¹`, which maps frame-`v`
//! coordinates into frame `u`.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{kabsch, PoseJson, RigidPose};
use crate::matching::{CorrespondenceSet, DescriptorSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelMeasure {
    pub transform: RigidPose,
    pub overlap: f64,
    pub icr: f64,
    pub ipr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub m: RelMeasure,
}

/// Directed pose graph in which every edge is stored in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub n_nodes: usize,
    pub edges: Vec<Edge>,
}

/// Measurements for one undirected pair `(u, v)`: `forward` belongs to
/// `(u, v)`; the reverse edge gets the inverse transform, the same overlap
/// and IPR, and its own ICR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairMeasure {
    pub u: usize,
    pub v: usize,
    pub forward: RelMeasure,
    pub icr_reverse: f64,
}

impl PoseGraph {
    /// Expands pairs into directed edges, ordered as `(u,v), (v,u)` per pair.
    pub fn from_pairs(n_nodes: usize, pairs: &[PairMeasure]) -> Result<Self> {
        let mut edges = Vec::with_capacity(2 * pairs.len());
        for p in pairs {
            edges.push(Edge {
                u: p.u,
                v: p.v,
                m: p.forward,
            });
            edges.push(Edge {
                u: p.v,
                v: p.u,
                m: RelMeasure {
                    transform: p.forward.transform.inverse(),
                    icr: p.icr_reverse,
                    ..p.forward
                },
            });
        }
        let g = PoseGraph { n_nodes, edges };
        g.validate()?;
        Ok(g)
    }

    /// Checks indices, self-loops, reverse edges and connectivity.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes;
        let mut has = std::collections::HashSet::new();
        for e in &self.edges {
            if e.u >= n || e.v >= n {
                return Err(Error::InvalidSpec(format!("edge ({}, {}) out of range", e.u, e.v)));
            }
            if e.u == e.v {
                return Err(Error::InvalidSpec(format!("self-loop at {}", e.u)));
            }
            if !has.insert((e.u, e.v)) {
                return Err(Error::InvalidSpec(format!("duplicate edge ({}, {})", e.u, e.v)));
            }
        }
        for e in &self.edges {
            if !has.contains(&(e.v, e.u)) {
                return Err(Error::InvalidSpec(format!("edge ({}, {}) has no reverse", e.u, e.v)));
            }
        }
        if n > 1 {
            let adj = self.adjacency();
            if let Some(i) = (0..n).find(|&i| adj[i].is_empty()) {
                return Err(Error::IsolatedNode(i));
            }
            if !is_connected(n, &adj) {
                return Err(Error::DisconnectedGraph);
            }
        }
        Ok(())
    }

    /// Neighbor lists, each sorted by neighbor index.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for e in &self.edges {
            adj[e.u].push(e.v);
        }
        for a in &mut adj {
            a.sort_unstable();
            a.dedup();
        }
        adj
    }

    pub fn find_edge(&self, u: usize, v: usize) -> Option<&Edge> {
        self.edges.iter().find(|e| e.u == u && e.v == v)
    }

    /// Relabels nodes: node `i` becomes `perm[i]`. Edge order is kept.
    pub fn permuted(&self, perm: &[usize]) -> PoseGraph {
        PoseGraph {
            n_nodes: self.n_nodes,
            edges: self
                .edges
                .iter()
                .map(|e| Edge {
                    u: perm[e.u],
                    v: perm[e.v],
                    m: e.m,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> PoseGraphJson {
        PoseGraphJson {
            nodes: self.n_nodes,
            edges: self
                .edges
                .iter()
                .map(|e| {
                    let p = PoseJson::from(&e.m.transform);
                    EdgeJson {
                        u: e.u,
                        v: e.v,
                        r: p.r,
                        t: p.t,
                        overlap: e.m.overlap,
                        icr: e.m.icr,
                        ipr: e.m.ipr,
                    }
                })
                .collect(),
        }
    }

    pub fn from_json(j: &PoseGraphJson) -> Result<Self> {
        let edges = j
            .edges
            .iter()
            .map(|e| Edge {
                u: e.u,
                v: e.v,
                m: RelMeasure {
                    transform: RigidPose::from(&PoseJson { r: e.r, t: e.t }),
                    overlap: e.overlap,
                    icr: e.icr,
                    ipr: e.ipr,
                },
            })
            .collect();
        let g = PoseGraph {
            n_nodes: j.nodes,
            edges,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.to_json())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let j: PoseGraphJson = serde_json::from_str(&fs::read_to_string(path)?)?;
        Self::from_json(&j)
    }
}

fn is_connected(n: usize, adj: &[Vec<usize>]) -> bool {
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut q = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                q.push_back(v);
            }
        }
    }
    count == n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeJson {
    pub u: usize,
    pub v: usize,
    #[serde(rename = "R")]
    pub r: [f64; 9],
    pub t: [f64; 3],
    pub overlap: f64,
    pub icr: f64,
    pub ipr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseGraphJson {
    pub nodes: usize,
    pub edges: Vec<EdgeJson>,
}

pub fn save_poses(path: &Path, poses: &[RigidPose]) -> Result<()> {
    let j: Vec<PoseJson> = poses.iter().map(PoseJson::from).collect();
    fs::write(path, serde_json::to_string_pretty(&j)?)?;
    Ok(())
}

pub fn load_poses(path: &Path) -> Result<Vec<RigidPose>> {
    let j: Vec<PoseJson> = serde_json::from_str(&fs::read_to_string(path)?)?;
    Ok(j.iter().map(RigidPose::from).collect())
}

/// Union over nodes of each node's `k` highest-overlap partners in the
/// symmetrized matrix `(O + Oᵀ)/2`, ties to the lower partner index.
/// Returns both directions of every selected pair, sorted.
pub fn select_topk(overlap: &[Vec<f64>], k: usize) -> Result<Vec<(usize, usize)>> {
    let n = overlap.len();
    if k == 0 || k + 1 > n {
        return Err(Error::KTooLarge { k, n });
    }
    let mut chosen = std::collections::BTreeSet::new();
    for u in 0..n {
        let mut partners: Vec<(usize, f64)> = (0..n)
            .filter(|&v| v != u)
            .map(|v| (v, 0.5 * (overlap[u][v] + overlap[v][u])))
            .collect();
        partners.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(v, _) in &partners[..k] {
            chosen.insert((u.min(v), u.max(v)));
        }
    }
    let mut out: Vec<(usize, usize)> = chosen.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Every ordered pair `u ≠ v`.
pub fn full_edges(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|u| (0..n).filter(move |&v| v != u).map(move |v| (u, v)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier residual threshold τ (meters).
    pub tau: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations: 1024,
            tau: 0.07,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub pose: RigidPose,
    /// One flag per correspondence: residual < τ under `pose`.
    pub inliers: Vec<bool>,
}

impl RansacResult {
    pub fn n_inliers(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Residual `‖p_i^u − T·p_j^v‖` per correspondence, where `a` is frame `u`.
fn residuals(c: &CorrespondenceSet, a: &DescriptorSet, b: &DescriptorSet, t: &RigidPose) -> Vec<f64> {
    c.pairs
        .iter()
        .map(|&(i, j)| (a.keypoints[i] - t.apply(&b.keypoints[j])).norm())
        .collect()
}

/// Robust `T_uv` from correspondences `(i in a = frame u, j in b = frame v)`:
/// best of `iterations` minimal 3-point hypotheses by inlier count (ties to
/// lower mean inlier residual), then least-squares refitting on the inliers
/// until the inlier set is stable.
pub fn ransac_register(
    c: &CorrespondenceSet,
    a: &DescriptorSet,
    b: &DescriptorSet,
    cfg: &RansacConfig,
) -> Result<RansacResult> {
    let m = c.len();
    if m < 3 {
        return Err(Error::InsufficientCorrespondence(m));
    }
    let src: Vec<Vector3<f64>> = c.pairs.iter().map(|&(_, j)| b.keypoints[j]).collect();
    let dst: Vec<Vector3<f64>> = c.pairs.iter().map(|&(i, _)| a.keypoints[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let score = |t: &RigidPose| -> (usize, f64) {
        let mut n = 0;
        let mut sum = 0.0;
        for (s, d) in src.iter().zip(&dst) {
            let r = (d - t.apply(s)).norm();
            if r < cfg.tau {
                n += 1;
                sum += r;
            }
        }
        (n, if n > 0 { sum / n as f64 } else { f64::INFINITY })
    };
    let mut best: Option<(RigidPose, usize, f64)> = None;
    for _ in 0..cfg.iterations {
        let idx = rand::seq::index::sample(&mut rng, m, 3);
        let s3: Vec<_> = idx.iter().map(|i| src[i]).collect();
        let d3: Vec<_> = idx.iter().map(|i| dst[i]).collect();
        let Ok(t) = kabsch(&s3, &d3, &[1.0; 3]) else {
            continue;
        };
        let (n, mr) = score(&t);
        let better = match &best {
            None => true,
            Some((_, bn, bm)) => n > *bn || (n == *bn && mr < *bm),
        };
        if better {
            best = Some((t, n, mr));
        }
    }
    let (mut pose, n, _) = best.ok_or(Error::NoConsensus(0))?;
    if n < 3 {
        return Err(Error::NoConsensus(n));
    }
    let mut mask: Vec<bool> = src.iter().zip(&dst).map(|(s, d)| (d - pose.apply(s)).norm() < cfg.tau).collect();
    for _ in 0..10 {
        let w: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let Ok(refined) = kabsch(&src, &dst, &w) else {
            break;
        };
        let new_mask: Vec<bool> =
            src.iter().zip(&dst).map(|(s, d)| (d - refined.apply(s)).norm() < cfg.tau).collect();
        let cnt = new_mask.iter().filter(|&&b| b).count();
        if cnt < 3 {
            break;
        }
        pose = refined;
        let stable = new_mask == mask;
        mask = new_mask;
        if stable {
            break;
        }
    }
    let n = mask.iter().filter(|&&b| b).count();
    if n < 3 {
        return Err(Error::NoConsensus(n));
    }
    Ok(RansacResult { pose, inliers: mask })
}

/// Correspondences within `tau` under `t`, divided by the keypoint count
/// of frame `u` (`a`), not by `|c|`.
pub fn compute_icr(
    c: &CorrespondenceSet,
    a: &DescriptorSet,
    b: &DescriptorSet,
    t: &RigidPose,
    tau: f64,
) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let n = residuals(c, a, b, t).iter().filter(|&&r| r < tau).count();
    n as f64 / a.len() as f64
}

/// Inlier keypoints of both frames expressed in frame `u`.
pub fn merged_inlier_cloud(
    c: &CorrespondenceSet,
    a: &DescriptorSet,
    b: &DescriptorSet,
    t: &RigidPose,
    inliers: &[bool],
) -> Vec<Vector3<f64>> {
    let mut out = Vec::new();
    for (&(i, j), &ok) in c.pairs.iter().zip(inliers) {
        if ok {
            out.push(a.keypoints[i]);
            out.push(t.apply(&b.keypoints[j]));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlaneConfig {
    pub iterations: usize,
    /// Point-to-plane inlier distance κ (meters).
    pub kappa: f64,
    pub seed: u64,
}

impl Default for PlaneConfig {
    fn default() -> Self {
        PlaneConfig {
            iterations: 512,
            kappa: 0.01,
            seed: 0,
        }
    }
}

/// Fraction of `points` on the largest plane found by 3-point RANSAC.
/// Fewer than three points, or no non-degenerate sample, gives 1.0.
pub fn compute_ipr(points: &[Vector3<f64>], cfg: &PlaneConfig) -> f64 {
    let n = points.len();
    if n < 3 {
        return 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best = 0usize;
    for _ in 0..cfg.iterations {
        let idx = rand::seq::index::sample(&mut rng, n, 3);
        let (p0, p1, p2) = (points[idx.index(0)], points[idx.index(1)], points[idx.index(2)]);
        let normal = (p1 - p0).cross(&(p2 - p0));
        let len = normal.norm();
        if len < 1e-12 {
            continue;
        }
        let nrm = normal / len;
        let cnt = points.iter().filter(|p| (*p - p0).dot(&nrm).abs() < cfg.kappa).count();
        best = best.max(cnt);
        if best == n {
            break;
        }
    }
    if best == 0 {
        return 1.0;
    }
    best as f64 / n as f64
}

/// Spanning-tree initialization of absolute poses.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanningInit {
    pub root: usize,
    pub poses: Vec<RigidPose>,
    pub hops: Vec<usize>,
    /// Product of edge priorities along the root path.
    pub cum_priority: Vec<f64>,
    pub parent: Vec<Option<usize>>,
    /// Undirected tree edges `(a, b)` with `a < b`.
    pub tree_edges: Vec<(usize, usize)>,
}

impl SpanningInit {
    pub fn max_hop(&self) -> usize {
        self.hops.iter().copied().max().unwrap_or(0)
    }
}

/// Undirected edge priorities `s = ō · (ICR_uv + ICR_vu)/2` keyed by
/// `(a, b)` with `a < b`, where `ō` averages the two stored overlaps.
pub fn edge_priorities(g: &PoseGraph) -> Vec<((usize, usize), f64)> {
    let mut out = Vec::new();
    for e in &g.edges {
        if e.u < e.v {
            let r = g.find_edge(e.v, e.u).expect("validated graph has reverse edges");
            let o = 0.5 * (e.m.overlap + r.m.overlap);
            out.push(((e.u, e.v), o * 0.5 * (e.m.icr + r.m.icr)));
        }
    }
    out.sort_by_key(|a| a.0);
    out
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
        true
    }
}

/// Kruskal on descending priority (ties to the lexicographically lower pair).
pub fn max_spanning_tree(n: usize, weighted: &[((usize, usize), f64)]) -> Result<Vec<(usize, usize)>> {
    let mut order: Vec<&((usize, usize), f64)> = weighted.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut uf = UnionFind::new(n);
    let mut tree = Vec::with_capacity(n.saturating_sub(1));
    for &&((a, b), _) in &order {
        if uf.union(a, b) {
            tree.push((a.min(b), a.max(b)));
        }
    }
    if tree.len() + 1 != n.max(1) {
        return Err(Error::DisconnectedGraph);
    }
    tree.sort_unstable();
    Ok(tree)
}

fn bfs_hops(adj: &[Vec<usize>], src: usize) -> Vec<usize> {
    let mut d = vec![usize::MAX; adj.len()];
    d[src] = 0;
    let mut q = VecDeque::from([src]);
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if d[v] == usize::MAX {
                d[v] = d[u] + 1;
                q.push_back(v);
            }
        }
    }
    d
}

/// Node of minimum eccentricity (ties to lower index).
pub fn tree_center(n: usize, tree: &[(usize, usize)]) -> usize {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in tree {
        adj[a].push(b);
        adj[b].push(a);
    }
    (0..n)
        .map(|u| (bfs_hops(&adj, u).into_iter().max().unwrap_or(0), u))
        .min()
        .map(|(_, u)| u)
        .unwrap_or(0)
}

/// Maximum-spanning tree on edge priority, rooted at the tree center with
/// the identity pose; a child `v` of `u` gets `T_v = T_uv⁻¹ ∘ T_u`.
pub fn spanning_init(g: &PoseGraph) -> Result<SpanningInit> {
    let n = g.n_nodes;
    if n == 0 {
        return Err(Error::InvalidSpec("empty pose graph".into()));
    }
    let pri = edge_priorities(g);
    let tree = max_spanning_tree(n, &pri)?;
    let prio_of = |a: usize, b: usize| -> f64 {
        let key = (a.min(b), a.max(b));
        pri[pri.binary_search_by(|p| p.0.cmp(&key)).expect("tree edge is a graph edge")].1
    };
    let root = tree_center(n, &tree);
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in &tree {
        adj[a].push(b);
        adj[b].push(a);
    }
    for a in &mut adj {
        a.sort_unstable();
    }
    let mut poses = vec![RigidPose::identity(); n];
    let mut hops = vec![0; n];
    let mut cum = vec![1.0; n];
    let mut parent = vec![None; n];
    let mut seen = vec![false; n];
    seen[root] = true;
    let mut q = VecDeque::from([root]);
    while let Some(u) = q.pop_front() {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            let e = g.find_edge(u, v).expect("tree edge is a graph edge");
            poses[v] = e.m.transform.inverse().compose(&poses[u]);
            hops[v] = hops[u] + 1;
            cum[v] = cum[u] * prio_of(u, v);
            parent[v] = Some(u);
            q.push_back(v);
        }
    }
    Ok(SpanningInit {
        root,
        poses,
        hops,
        cum_priority: cum,
        parent,
        tree_edges: tree,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::geometry::{rotation_error, Rotation};

    fn meas(t: RigidPose, o: f64, icr: f64) -> RelMeasure {
        RelMeasure {
            transform: t,
            overlap: o,
            icr,
            ipr: 0.1,
        }
    }

    fn graph_from_gt(gt: &[RigidPose], pairs: &[(usize, usize, f64)]) -> PoseGraph {
        let p: Vec<PairMeasure> = pairs
            .iter()
            .map(|&(u, v, s)| PairMeasure {
                u,
                v,
                forward: meas(gt[u].relative_to(&gt[v]), 1.0, s),
                icr_reverse: s,
            })
            .collect();
        PoseGraph::from_pairs(gt.len(), &p).unwrap()
    }

    #[test]
    fn topk_complete_case() {
        let o = vec![vec![0.0, 0.5, 0.2], vec![0.5, 0.0, 0.9], vec![0.2, 0.9, 0.0]];
        let e = select_topk(&o, 2).unwrap();
        assert_eq!(e, full_edges(3));
        assert!(matches!(select_topk(&o, 3), Err(Error::KTooLarge { .. })));
        assert!(select_topk(&o, 0).is_err());
    }

    #[test]
    fn topk_zero_row_keeps_argmax() {
        let mut o = vec![vec![0.0; 4]; 4];
        o[0][1] = 0.9;
        o[1][0] = 0.9;
        o[2][1] = 0.8;
        o[1][2] = 0.8;
        let e = select_topk(&o, 1).unwrap();
        // node 3 has all-zero overlaps; its tie-broken argmax is node 0
        assert!(e.contains(&(3, 0)) && e.contains(&(0, 3)));
        let mut adj = vec![vec![]; 4];
        for &(u, v) in &e {
            adj[u].push(v);
        }
        assert!(is_connected(4, &adj));
    }

    #[test]
    fn topk_uses_symmetrized_matrix() {
        let o = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 0.3], vec![0.0, 0.2, 0.0]];
        // sym: (0,1)=0.5, (1,2)=0.25, (0,2)=0
        let e = select_topk(&o, 1).unwrap();
        assert_eq!(e, vec![(0, 1), (1, 0), (1, 2), (2, 1)]);
    }

    #[test]
    fn reverse_edges_are_inverses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt: Vec<RigidPose> = (0..5).map(|_| RigidPose::random(&mut rng, 6.0)).collect();
        let g = graph_from_gt(&gt, &[(0, 1, 0.5), (1, 2, 0.5), (2, 3, 0.5), (3, 4, 0.5), (4, 0, 0.5)]);
        for e in &g.edges {
            let r = g.find_edge(e.v, e.u).unwrap();
            let c = e.m.transform.compose(&r.m.transform);
            assert!((c.r.matrix() - Rotation::identity().matrix()).norm() < 1e-12);
            assert!(c.t.norm() < 1e-12);
        }
    }

    #[test]
    fn validation_errors() {
        let id = RigidPose::identity();
        let e = |u, v| Edge {
            u,
            v,
            m: meas(id, 1.0, 1.0),
        };
        let g = PoseGraph {
            n_nodes: 3,
            edges: vec![e(0, 1)],
        };
        assert!(g.validate().is_err());
        let g = PoseGraph {
            n_nodes: 4,
            edges: vec![e(0, 1), e(1, 0), e(2, 3), e(3, 2)],
        };
        assert!(matches!(g.validate(), Err(Error::DisconnectedGraph)));
        let g = PoseGraph {
            n_nodes: 3,
            edges: vec![e(0, 1), e(1, 0)],
        };
        assert!(matches!(g.validate(), Err(Error::IsolatedNode(2))));
    }

    #[test]
    fn tree_graph_reproduces_gt_up_to_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt: Vec<RigidPose> = (0..6).map(|_| RigidPose::random(&mut rng, 6.0)).collect();
        let g = graph_from_gt(&gt, &[(0, 1, 0.9), (1, 2, 0.8), (1, 3, 0.7), (3, 4, 0.6), (4, 5, 0.5)]);
        let s = spanning_init(&g).unwrap();
        assert_eq!(s.poses[s.root], RigidPose::identity());
        assert_eq!(s.hops[s.root], 0);
        assert_eq!(s.cum_priority[s.root], 1.0);
        for u in 0..6 {
            for v in 0..6 {
                let a = s.poses[u].relative_to(&s.poses[v]);
                let b = gt[u].relative_to(&gt[v]);
                assert!(rotation_error(&a.r, &b.r) < 1e-9);
                assert!((a.t - b.t).norm() < 1e-9);
            }
        }
        // path 0-1-3-4-5 plus leaf 2: center is node 3 (eccentricity 2)
        assert_eq!(s.root, 3);
        assert_eq!(s.hops, vec![2, 1, 2, 0, 1, 2]);
        assert!((s.cum_priority[0] - 0.7 * 0.9).abs() < 1e-15);
    }

    #[test]
    fn three_cycle_keeps_heaviest_edges() {
        let gt = vec![RigidPose::identity(); 3];
        let g = graph_from_gt(&gt, &[(0, 1, 0.9), (1, 2, 0.8), (0, 2, 0.1)]);
        let s = spanning_init(&g).unwrap();
        assert_eq!(s.tree_edges, vec![(0, 1), (1, 2)]);
        assert_eq!(s.root, 1);
    }

    #[test]
    fn priority_averages_directed_icr() {
        let id = RigidPose::identity();
        let g = PoseGraph::from_pairs(
            2,
            &[PairMeasure {
                u: 0,
                v: 1,
                forward: meas(id, 0.5, 0.4),
                icr_reverse: 0.2,
            }],
        )
        .unwrap();
        let p = edge_priorities(&g);
        assert_eq!(p.len(), 1);
        assert!((p[0].1 - 0.5 * 0.3).abs() < 1e-15);
    }

    #[test]
    fn ipr_examples() {
        let cfg = PlaneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flat: Vec<Vector3<f64>> = (0..40)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 0.3))
            .collect();
        assert_eq!(compute_ipr(&flat, &cfg), 1.0);
        let mut cube = vec![];
        for x in [0.0, 1.0] {
            for y in [0.0, 1.0] {
                for z in [0.0, 1.0] {
                    cube.push(Vector3::new(x, y, z));
                }
            }
        }
        assert_eq!(compute_ipr(&cube, &cfg), 0.5);
        assert_eq!(compute_ipr(&cube[..2], &cfg), 1.0);
    }

    #[test]
    fn json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt: Vec<RigidPose> = (0..3).map(|_| RigidPose::random(&mut rng, 6.0)).collect();
        let g = graph_from_gt(&gt, &[(0, 1, 0.3), (1, 2, 0.4)]);
        let s = serde_json::to_string(&g.to_json()).unwrap();
        assert!(s.contains("\"R\"") && s.contains("\"overlap\""));
        let back = PoseGraph::from_json(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(back, g);
    }
}
