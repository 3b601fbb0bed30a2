//! Independent oracles shared by the integration tests and the acceptance
//! harness. Nothing here calls the code under test except to build inputs.

#![allow(dead_code)]

use mdgd_core::geometry::{RigidPose, Rotation};
use mdgd_core::matching::{CorrespondenceSet, DescriptorSet};
use mdgd_core::sync::refine::RefineEdge;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;

/// Colex index of the unordered pair `i < j`.
pub fn pair_bit(i: usize, j: usize) -> usize {
    let (i, j) = (i.min(j), i.max(j));
    j * (j - 1) / 2 + i
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn edges_of(mask: u32, n: usize) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for j in 1..n {
        for i in 0..j {
            if mask >> pair_bit(i, j) & 1 == 1 {
                e.push((i, j));
            }
        }
    }
    e
}

fn canonical(mask: u32, n: usize, perms: &[Vec<usize>]) -> u32 {
    let e = edges_of(mask, n);
    perms
        .iter()
        .map(|p| e.iter().fold(0u32, |m, &(i, j)| m | 1 << pair_bit(p[i], p[j])))
        .min()
        .unwrap()
}

/// One representative edge list per isomorphism class of connected simple
/// graphs on `n` nodes. Every connected graph has a non-cut vertex, so
/// each class on `n` nodes extends a class on `n − 1` nodes by one vertex
/// joined to a nonempty subset.
pub fn connected_graphs(n: usize) -> Vec<Vec<(usize, usize)>> {
    let mut classes: Vec<u32> = vec![0];
    for m in 2..=n {
        let perms = permutations(m);
        let mut next = std::collections::BTreeSet::new();
        for &g in &classes {
            for sub in 1u32..(1 << (m - 1)) {
                let mut h = g;
                for i in 0..m - 1 {
                    if sub >> i & 1 == 1 {
                        h |= 1 << pair_bit(i, m - 1);
                    }
                }
                next.insert(canonical(h, m, &perms));
            }
        }
        classes = next.into_iter().collect();
    }
    classes.into_iter().map(|m| edges_of(m, n)).collect()
}

fn find(p: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while p[r] != r {
        r = p[r];
    }
    r
}

/// Every spanning tree as a list of edge indices into `edges`.
pub fn spanning_trees(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    fn rec(
        n: usize,
        edges: &[(usize, usize)],
        start: usize,
        parent: Vec<usize>,
        cur: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if cur.len() + 1 == n {
            out.push(cur.clone());
            return;
        }
        for k in start..edges.len() {
            if edges.len() - k < n - 1 - cur.len() {
                break;
            }
            let mut p = parent.clone();
            let (a, b) = (find(&mut p, edges[k].0), find(&mut p, edges[k].1));
            if a != b {
                p[a] = b;
                cur.push(k);
                rec(n, edges, k + 1, p, cur, out);
                cur.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(n, edges, 0, (0..n).collect(), &mut Vec::new(), &mut out);
    out
}

/// Mutual nearest neighbors by double loop, ties to the lower index.
pub fn brute_mutual(a: &DescriptorSet, b: &DescriptorSet) -> Vec<(usize, usize)> {
    let d = |i: usize, j: usize| -> f64 {
        a.descriptor(i)
            .iter()
            .zip(b.descriptor(j))
            .map(|(x, y)| ((x - y) as f64).powi(2))
            .sum()
    };
    let mut out = Vec::new();
    for i in 0..a.len() {
        let mut bj = 0;
        for j in 1..b.len() {
            if d(i, j) < d(i, bj) {
                bj = j;
            }
        }
        let mut bi = 0;
        for k in 1..a.len() {
            if d(k, bj) < d(bi, bj) {
                bi = k;
            }
        }
        if bi == i {
            out.push((i, bj));
        }
    }
    out
}

/// ICR by direct counting.
pub fn brute_icr(c: &CorrespondenceSet, a: &DescriptorSet, b: &DescriptorSet, t: &RigidPose, tau: f64) -> f64 {
    let mut n = 0usize;
    for &(i, j) in &c.pairs {
        let q = t.r.matrix() * b.keypoints[j] + t.t;
        let d = a.keypoints[i] - q;
        if (d.x * d.x + d.y * d.y + d.z * d.z).sqrt() < tau {
            n += 1;
        }
    }
    n as f64 / a.len() as f64
}

/// Largest coplanar fraction by trying the plane through every triple.
pub fn exhaustive_plane_fraction(points: &[Vector3<f64>], kappa: f64) -> f64 {
    let n = points.len();
    let mut best = 0;
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                let nrm = (points[j] - points[i]).cross(&(points[k] - points[i]));
                if nrm.norm() < 1e-12 {
                    continue;
                }
                let nrm = nrm.normalize();
                let c = points.iter().filter(|p| (*p - points[i]).dot(&nrm).abs() < kappa).count();
                best = best.max(c);
            }
        }
    }
    best as f64 / n as f64
}

/// Minimum-norm weighted least-squares correction via a dense SVD
/// pseudo-inverse of `BᵀPB`, no anchoring. Returns refined translations.
pub fn pinv_refine(
    r: &[Matrix3<f64>],
    coarse: &[Vector3<f64>],
    edges: &[RefineEdge],
    w: &[f64],
) -> Vec<Vector3<f64>> {
    let n = r.len();
    let m = edges.len();
    let mut bm = DMatrix::<f64>::zeros(3 * m, 3 * n);
    let mut l = DVector::<f64>::zeros(3 * m);
    let mut p = DMatrix::<f64>::zeros(3 * m, 3 * m);
    for (e, ed) in edges.iter().enumerate() {
        let (ru, rv) = (r[ed.u].transpose(), r[ed.v].transpose());
        for i in 0..3 {
            for j in 0..3 {
                bm[(3 * e + i, 3 * ed.u + j)] += ru[(i, j)];
                bm[(3 * e + i, 3 * ed.v + j)] -= rv[(i, j)];
            }
            p[(3 * e + i, 3 * e + i)] = w[e];
        }
        let le = ru * ed.t_uv - ru * coarse[ed.u] + rv * coarse[ed.v];
        for i in 0..3 {
            l[3 * e + i] = le[i];
        }
    }
    let a = bm.transpose() * &p * &bm;
    let rhs = bm.transpose() * &p * l;
    let pinv = a.pseudo_inverse(1e-10).expect("svd");
    let d = pinv * rhs;
    (0..n)
        .map(|i| coarse[i] + Vector3::new(d[3 * i], d[3 * i + 1], d[3 * i + 2]))
        .collect()
}

/// `Σ w_e ‖t_u − R_u R_vᵀ t_v − t_uv‖²` written out independently.
pub fn residual(r: &[Matrix3<f64>], t: &[Vector3<f64>], edges: &[RefineEdge], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for (e, &we) in edges.iter().zip(w) {
        let rel = r[e.u] * r[e.v].transpose();
        let x = t[e.u] - rel * t[e.v] - e.t_uv;
        s += we * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]);
    }
    s
}

/// One Monte-Carlo instance: `n` exact correspondences of which a fraction
/// `inlier_frac` follow `truth`; the rest map to uniform random points.
/// Returns `(a = frame u, b = frame v, correspondences)`.
pub fn ransac_instance<R: Rng>(
    rng: &mut R,
    n: usize,
    inlier_frac: f64,
    truth: &RigidPose,
) -> (DescriptorSet, DescriptorSet, CorrespondenceSet) {
    let n_in = (n as f64 * inlier_frac).round() as usize;
    let mut kb = Vec::with_capacity(n);
    let mut ka = Vec::with_capacity(n);
    for k in 0..n {
        let p = Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        kb.push(p);
        if k < n_in {
            ka.push(truth.apply(&p));
        } else {
            ka.push(Vector3::new(rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0)));
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let desc = vec![1.0f32; n];
    let a = DescriptorSet::new(ka, desc.clone(), 1).unwrap();
    let b = DescriptorSet::new(kb, desc, 1).unwrap();
    let c = CorrespondenceSet {
        pairs: order.iter().map(|&k| (k, k)).collect(),
        distances: vec![0.0; n],
    };
    (a, b, c)
}

/// Rotation error by `acos` of the clamped trace, the textbook form.
pub fn re_acos(a: &Rotation, b: &Rotation) -> f64 {
    let m = a.matrix().transpose() * b.matrix();
    ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}
