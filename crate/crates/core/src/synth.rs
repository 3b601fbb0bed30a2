//! Deterministic synthetic data: pose-graph scenes with planted noise,
//! outliers and confidence attributes, matching-statistics samples with a
//! planted overlap, and the fixed benchmark suites.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RigidPose, Rotation};
use crate::matching::{compute_stats_with, MatchStats, ECDF_THRESHOLDS};
use crate::posegraph::{select_topk, PairMeasure, PoseGraph, RelMeasure};

/// Seed domains keep streams for different purposes disjoint.
pub mod domain {
    pub const SUITE: u64 = 0x5u64 << 56;
    pub const TRAIN_SCENES: u64 = 0x7u64 << 56;
    pub const HELDOUT_SCENES: u64 = 0x9u64 << 56;
    pub const STATS: u64 = 0xbu64 << 56;
    pub const SCENE_STATS: u64 = 0xdu64 << 56;
    pub const PAIRS: u64 = 0xfu64 << 56;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for `(domain, a, b)`.
pub fn derive_seed(domain: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(domain) ^ a) ^ b.rotate_left(17))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub n_min: usize,
    pub n_max: usize,
    pub sigma_r_deg: f64,
    pub sigma_t: f64,
    pub p_out: f64,
    /// Partners per node in the top-k edge selection.
    pub k: usize,
    /// Translation components are drawn from `[-t_range, t_range]`.
    pub t_range: f64,
    /// Length scale ℓ of the planted overlap `exp(−d²/(2ℓ²))` between
    /// frame centers.
    pub overlap_scale: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_min: 30,
            n_max: 30,
            sigma_r_deg: 5.0,
            sigma_t: 0.1,
            p_out: 0.2,
            k: 6,
            t_range: 6.0,
            overlap_scale: 4.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.n_min < 2 || self.n_max < self.n_min {
            return bad("need 2 <= n_min <= n_max");
        }
        if self.k == 0 || self.k >= self.n_min {
            return bad("need 1 <= k < n_min");
        }
        if !(0.0..1.0).contains(&self.p_out) {
            return bad("p_out must lie in [0, 1)");
        }
        if self.sigma_r_deg < 0.0 || self.sigma_t < 0.0 || self.t_range < 0.0 {
            return bad("noise levels and ranges must be nonnegative");
        }
        if self.overlap_scale <= 0.0 {
            return bad("overlap_scale must be positive");
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub gt: Vec<RigidPose>,
    pub graph: PoseGraph,
    /// One label per directed edge, aligned with `graph.edges`.
    pub outlier: Vec<bool>,
    /// Planted pairwise overlap between frames (symmetric, zero diagonal).
    pub overlap: Vec<Vec<f64>>,
}

impl SyntheticScene {
    pub fn n(&self) -> usize {
        self.gt.len()
    }

    pub fn gt_relative(&self, u: usize, v: usize) -> RigidPose {
        self.gt[u].relative_to(&self.gt[v])
    }
}

const MAX_RETRIES: usize = 100;

/// Rotation by an angle `|N(0, σ)|` about a uniformly random axis.
pub fn random_small_rotation<R: Rng + ?Sized>(rng: &mut R, sigma_rad: f64) -> Rotation {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = if sigma_rad > 0.0 {
        Normal::new(0.0, sigma_rad).expect("sigma is positive").sample(rng).abs()
    } else {
        0.0
    };
    Rotation::from_axis_angle(&Vector3::from(axis), angle)
}

fn frame_center(p: &RigidPose) -> Vector3<f64> {
    -(p.r.transpose().apply(&p.t))
}

pub fn planted_overlap(gt: &[RigidPose], scale: f64) -> Vec<Vec<f64>> {
    let c: Vec<_> = gt.iter().map(frame_center).collect();
    let n = gt.len();
    let mut o = vec![vec![0.0; n]; n];
    for u in 0..n {
        for v in 0..n {
            if u != v {
                let d2 = (c[u] - c[v]).norm_squared();
                o[u][v] = (-d2 / (2.0 * scale * scale)).exp();
            }
        }
    }
    o
}

fn connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut adj = vec![Vec::new(); n];
    for &(u, v) in edges {
        adj[u].push(v);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(u) = stack.pop() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                stack.push(v);
            }
        }
    }
    seen.iter().all(|&s| s)
}

/// Samples ground truth, selects the top-k overlap edges (resampling
/// disconnected draws), and plants measurements and confidence attributes
/// on every undirected pair.
pub fn gen_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = rng.gen_range(spec.n_min..=spec.n_max);
    let mut picked = None;
    for _ in 0..MAX_RETRIES {
        let gt: Vec<RigidPose> = (0..n).map(|_| RigidPose::random(&mut rng, spec.t_range)).collect();
        let overlap = planted_overlap(&gt, spec.overlap_scale);
        let edges = select_topk(&overlap, spec.k)?;
        if connected(n, &edges) {
            picked = Some((gt, overlap, edges));
            break;
        }
    }
    let (gt, overlap, edges) = picked.ok_or(Error::DisconnectedSample(MAX_RETRIES))?;

    let mut scene = SyntheticScene {
        spec: *spec,
        gt,
        graph: PoseGraph {
            n_nodes: n,
            edges: Vec::new(),
        },
        outlier: Vec::new(),
        overlap,
    };
    let (graph, outlier) = scene.graph_on(&edges)?;
    scene.graph = graph;
    scene.outlier = outlier;
    Ok(scene)
}

impl SyntheticScene {
    /// Planted measurement of the undirected pair `{u, v}` (`u < v`) and
    /// its outlier label. Each pair draws from its own stream, so the
    /// measurement does not depend on which other pairs are selected.
    pub fn measure(&self, u: usize, v: usize) -> (PairMeasure, bool) {
        let (u, v) = (u.min(v), u.max(v));
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(domain::PAIRS ^ spec.seed, u as u64, v as u64));
        let is_out = rng.gen_bool(spec.p_out);
        let gt_uv = self.gt[u].relative_to(&self.gt[v]);
        let (transform, o, icr_f, icr_r, ipr) = if is_out {
            let t = RigidPose::random(&mut rng, spec.t_range);
            let o = rng.gen_range(0.05..0.45);
            (t, o, rng.gen_range(0.0..0.15), rng.gen_range(0.0..0.15), rng.gen_range(0.4..1.0))
        } else {
            let noise = random_small_rotation(&mut rng, spec.sigma_r_deg.to_radians());
            let dt = if spec.sigma_t > 0.0 {
                let nd = Normal::new(0.0, spec.sigma_t).expect("positive sigma");
                Vector3::new(nd.sample(&mut rng), nd.sample(&mut rng), nd.sample(&mut rng))
            } else {
                Vector3::zeros()
            };
            let t = RigidPose::new(noise.compose(&gt_uv.r), gt_uv.t + dt);
            let o = rng.gen_range(0.35..0.9);
            let icr_f = rng.gen_range(0.2..0.6) * o;
            let icr_r = rng.gen_range(0.2..0.6) * o;
            (t, o, icr_f, icr_r, rng.gen_range(0.05..0.5))
        };
        let m = PairMeasure {
            u,
            v,
            forward: RelMeasure {
                transform,
                overlap: o,
                icr: icr_f,
                ipr,
            },
            icr_reverse: icr_r,
        };
        (m, is_out)
    }

    /// Pose graph with planted measurements on the given directed edge list
    /// (both directions of each pair must be present), plus per-edge
    /// outlier labels aligned with the graph's edges.
    pub fn graph_on(&self, edges: &[(usize, usize)]) -> Result<(PoseGraph, Vec<bool>)> {
        let mut pairs = Vec::new();
        let mut labels = Vec::new();
        for &(u, v) in edges.iter().filter(|(u, v)| u < v) {
            let (m, out) = self.measure(u, v);
            pairs.push(m);
            labels.push(out);
            labels.push(out);
        }
        let graph = PoseGraph::from_pairs(self.n(), &pairs)?;
        graph.validate()?;
        Ok((graph, labels))
    }
}

/// Matching statistics for a pair with overlap `o`: `Poisson(40 + 1500·o)`
/// correspondences, a fraction `o` of them true matches with distances
/// `|N(0.18, 0.06)|`, the rest `N(0.55, 0.1)` clipped to `[0, 2]`.
pub fn sample_stats<R: Rng + ?Sized>(rng: &mut R, o: f64) -> MatchStats {
    sample_stats_with(rng, o, &ECDF_THRESHOLDS)
}

/// [`sample_stats`] with custom eCDF thresholds.
pub fn sample_stats_with<R: Rng + ?Sized>(rng: &mut R, o: f64, thresholds: &[f64; 4]) -> MatchStats {
    let lambda = 40.0 + 1500.0 * o;
    let count = Poisson::new(lambda).expect("positive rate").sample(rng) as usize;
    let good = Normal::<f64>::new(0.18, 0.06).expect("valid");
    let bad = Normal::<f64>::new(0.55, 0.1).expect("valid");
    let d: Vec<f64> = (0..count)
        .map(|_| {
            if rng.gen_bool(o.clamp(0.0, 1.0)) {
                good.sample(rng).abs()
            } else {
                bad.sample(rng).clamp(0.0, 2.0)
            }
        })
        .collect();
    compute_stats_with(&d, thresholds)
}

/// `(stats, planted overlap)` pairs with `o ~ U(0, 1)`.
pub fn gen_stats_dataset(n_samples: usize, seed: u64) -> Vec<(MatchStats, f64)> {
    gen_stats_dataset_with(n_samples, seed, &ECDF_THRESHOLDS)
}

pub fn gen_stats_dataset_with(n_samples: usize, seed: u64, thresholds: &[f64; 4]) -> Vec<(MatchStats, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(domain::STATS, seed, 0));
    (0..n_samples)
        .map(|_| {
            let o = rng.gen_range(0.0..1.0);
            (sample_stats_with(&mut rng, o, thresholds), o)
        })
        .collect()
}

/// Symmetric matrix of matching statistics for every frame pair of a
/// scene, drawn from its planted overlap. Each pair has its own stream.
pub fn scene_stats(scene: &SyntheticScene, seed: u64) -> Vec<Vec<MatchStats>> {
    scene_stats_with(scene, seed, &ECDF_THRESHOLDS)
}

pub fn scene_stats_with(scene: &SyntheticScene, seed: u64, thresholds: &[f64; 4]) -> Vec<Vec<MatchStats>> {
    let n = scene.n();
    let mut out = vec![vec![MatchStats::EMPTY; n]; n];
    for u in 0..n {
        for v in u + 1..n {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(domain::SCENE_STATS ^ seed, u as u64, v as u64));
            let s = sample_stats_with(&mut rng, scene.overlap[u][v], thresholds);
            out[u][v] = s;
            out[v][u] = s;
        }
    }
    out
}

pub const SUITE_VERSION: u32 = 1;
pub const SUITE_SIZE: usize = 50;
pub const PROFILES: [&str; 3] = ["easy", "standard", "hard"];

/// Spec shared by every scene of a suite profile (seed left at 0).
pub fn profile_spec(profile: &str) -> Result<SceneSpec> {
    let (n, sr, st, po) = match profile {
        "easy" => (10, 2.0, 0.05, 0.1),
        "standard" => (30, 5.0, 0.1, 0.2),
        "hard" => (40, 10.0, 0.2, 0.4),
        other => return Err(Error::UnknownProfile(other.to_string())),
    };
    Ok(SceneSpec {
        n_min: n,
        n_max: n,
        sigma_r_deg: sr,
        sigma_t: st,
        p_out: po,
        ..SceneSpec::default()
    })
}

/// The fixed list of scene specs of a benchmark suite.
pub fn gen_benchmark_suite(profile: &str) -> Result<Vec<SceneSpec>> {
    let base = profile_spec(profile)?;
    let pi = PROFILES.iter().position(|&p| p == profile).expect("known profile") as u64;
    Ok((0..SUITE_SIZE)
        .map(|i| base.with_seed(derive_seed(domain::SUITE | SUITE_VERSION as u64, pi, i as u64)))
        .collect())
}
