//! Finite-difference gradient checks of every tape op, every layer, the
//! overlap network and the full motion loss, run at `f64`.
//!
//! Each op case contracts the op output with a fixed random weight so the
//! upstream gradient is generic rather than all-ones.

use std::rc::Rc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{RigidPose, Rotation};
use crate::matching::OverlapNet;
use crate::nn::gradcheck::{check_leaves, check_params, GradCheckConfig, GradCheckReport};
use crate::nn::layers::{self, GruCell, LayerNorm, Mlp};
use crate::nn::{Bound, ParamStore, Segments, Tape, Var};
use crate::posegraph::{spanning_init, PairMeasure, PoseGraph, RelMeasure};
use crate::sync::refine::{refine_on_tape, RefineEdge};
use crate::sync::{motion_loss, GraphInput, MotionTargets, SyncConfig, SyncNet};
use crate::synth::{derive_seed, random_small_rotation};

/// Relative-error bound for every case.
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub report: GradCheckReport,
}

impl CaseResult {
    pub fn passes(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    leaves: Vec<(usize, usize, Vec<f64>)>,
    build: Build,
}

fn rand_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn leaf(rng: &mut ChaCha8Rng, r: usize, c: usize) -> (usize, usize, Vec<f64>) {
    (r, c, rand_vec(rng, r * c, 1.0))
}

/// `Σ op(x) ⊙ W` with a fixed random `W` matching the op's output.
fn contract(tape: &mut Tape<f64>, out: Var, w_seed: u64) -> Var {
    let (r, c) = tape.shape(out);
    let mut rng = ChaCha8Rng::seed_from_u64(w_seed);
    let w = rand_vec(&mut rng, r * c, 1.0);
    let w = tape.leaf_f64(r, c, &w);
    let p = tape.mul(out, w);
    tape.sum(p)
}

fn unary(name: &'static str, rng: &mut ChaCha8Rng, r: usize, c: usize, f: fn(&mut Tape<f64>, Var) -> Var) -> Case {
    let ws = rng.gen();
    Case {
        name,
        leaves: vec![leaf(rng, r, c)],
        build: Box::new(move |t, x| {
            let y = f(t, x[0]);
            Ok(contract(t, y, ws))
        }),
    }
}

fn binary(
    name: &'static str,
    rng: &mut ChaCha8Rng,
    a: (usize, usize),
    b: (usize, usize),
    f: fn(&mut Tape<f64>, Var, Var) -> Var,
) -> Case {
    let ws = rng.gen();
    Case {
        name,
        leaves: vec![leaf(rng, a.0, a.1), leaf(rng, b.0, b.1)],
        build: Box::new(move |t, x| {
            let y = f(t, x[0], x[1]);
            Ok(contract(t, y, ws))
        }),
    }
}

fn random_rotations(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).flat_map(|_| Rotation::random_euler(rng).to_row_major()).collect()
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut v = vec![
        binary("matmul", rng, (3, 4), (4, 2), |t, a, b| t.matmul(a, b)),
        binary("matmul_t", rng, (3, 4), (5, 4), |t, a, b| t.matmul_t(a, b)),
        unary("transpose", rng, 3, 4, |t, a| t.transpose(a)),
        binary("add_row", rng, (3, 4), (1, 4), |t, a, b| t.add_row(a, b)),
        binary("add", rng, (3, 4), (3, 4), |t, a, b| t.add(a, b)),
        binary("sub", rng, (3, 4), (3, 4), |t, a, b| t.sub(a, b)),
        binary("mul", rng, (3, 4), (3, 4), |t, a, b| t.mul(a, b)),
        unary("affine", rng, 3, 4, |t, a| t.affine(a, -1.7, 0.3)),
        unary("scale", rng, 3, 4, |t, a| t.scale(a, 2.5)),
        unary("relu", rng, 4, 5, |t, a| t.relu(a)),
        unary("sigmoid", rng, 3, 4, |t, a| t.sigmoid(a)),
        unary("tanh", rng, 3, 4, |t, a| t.tanh(a)),
        unary("softplus", rng, 3, 4, |t, a| t.softplus(a)),
        unary("abs", rng, 4, 5, |t, a| t.abs(a)),
        unary("smooth_l1", rng, 4, 5, |t, a| {
            let s = t.scale(a, 2.0);
            t.smooth_l1(s)
        }),
        binary("concat", rng, (3, 2), (3, 4), |t, a, b| t.concat(&[a, b, a])),
        unary("slice_cols", rng, 3, 5, |t, a| t.slice_cols(a, 1, 3)),
        binary("row_dot", rng, (5, 3), (5, 3), |t, a, b| t.row_dot(a, b)),
        binary("mul_col", rng, (5, 3), (5, 1), |t, a, b| t.mul_col(a, b)),
        unary("sum", rng, 3, 4, |t, a| t.sum(a)),
        unary("mean", rng, 3, 4, |t, a| t.mean(a)),
        unary("layer_norm", rng, 4, 5, |t, a| {
            let g = t.leaf_f64(1, 5, &[1.2, 0.8, -0.5, 1.0, 0.3]);
            let b = t.leaf_f64(1, 5, &[0.1, -0.2, 0.0, 0.4, 0.2]);
            t.layer_norm(a, g, b)
        }),
        unary("sixd_to_rotation", rng, 4, 6, |t, a| t.sixd_to_rotation(a)),
    ];
    let idx: Rc<[usize]> = (0..7).map(|_| rng.gen_range(0..4)).collect();
    let ws = rng.gen();
    v.push(Case {
        name: "gather",
        leaves: vec![leaf(rng, 4, 3)],
        build: Box::new(move |t, x| {
            let y = t.gather(x[0], idx.clone());
            Ok(contract(t, y, ws))
        }),
    });
    let seg = Rc::new(Segments::new((0..9).map(|i| [0, 2, 1, 2, 2, 0, 3, 1, 2][i]).collect(), 4));
    let seg2 = seg.clone();
    let ws = rng.gen();
    v.push(Case {
        name: "segment_sum",
        leaves: vec![leaf(rng, 9, 3)],
        build: Box::new(move |t, x| {
            let y = t.segment_sum(x[0], seg.clone());
            Ok(contract(t, y, ws))
        }),
    });
    let ws = rng.gen();
    v.push(Case {
        name: "segment_softmax",
        leaves: vec![(9, 1, rand_vec(rng, 9, 2.0))],
        build: Box::new(move |t, x| {
            let y = t.segment_softmax(x[0], seg2.clone());
            Ok(contract(t, y, ws))
        }),
    });
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        let ws = rng.gen();
        v.push(Case {
            name: ["mat3", "mat3_bt", "mat3_at", "mat3_atbt"][2 * ta as usize + tb as usize],
            leaves: vec![leaf(rng, 4, 9), leaf(rng, 4, 9)],
            build: Box::new(move |t, x| {
                let y = t.mat3(x[0], x[1], ta, tb);
                Ok(contract(t, y, ws))
            }),
        });
    }
    for tm in [false, true] {
        let ws = rng.gen();
        v.push(Case {
            name: if tm { "mat3_vec_t" } else { "mat3_vec" },
            leaves: vec![leaf(rng, 4, 9), leaf(rng, 4, 3)],
            build: Box::new(move |t, x| {
                let y = t.mat3_vec(x[0], x[1], tm);
                Ok(contract(t, y, ws))
            }),
        });
    }
    // translation refinement on a 4-node graph with a chord
    let pairs = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)];
    let edges: Rc<[RefineEdge]> = pairs
        .iter()
        .flat_map(|&(u, v)| [(u, v), (v, u)])
        .map(|(u, v)| RefineEdge {
            u,
            v,
            t_uv: Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)),
        })
        .collect();
    let m = edges.len();
    let ws = rng.gen();
    v.push(Case {
        name: "refine_translations",
        leaves: vec![
            (4, 9, random_rotations(rng, 4)),
            leaf(rng, 4, 3),
            (m, 1, (0..m).map(|_| rng.gen_range(0.2..2.0)).collect()),
        ],
        build: Box::new(move |t, x| {
            let y = refine_on_tape(t, x[0], x[1], x[2], edges.clone(), 1)?;
            Ok(contract(t, y, ws))
        }),
    });
    v
}

fn layer_cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut v = Vec::new();
    let ws = rng.gen();
    v.push(Case {
        name: "dense",
        leaves: vec![leaf(rng, 3, 4), leaf(rng, 4, 5), leaf(rng, 1, 5)],
        build: Box::new(move |t, x| {
            let y = layers::dense(t, x[0], x[1], x[2])?;
            Ok(contract(t, y, ws))
        }),
    });
    let ws = rng.gen();
    v.push(Case {
        name: "layernorm",
        leaves: vec![leaf(rng, 3, 6), leaf(rng, 1, 6), leaf(rng, 1, 6)],
        build: Box::new(move |t, x| {
            let y = layers::layernorm(t, x[0], x[1], x[2])?;
            Ok(contract(t, y, ws))
        }),
    });
    let ws = rng.gen();
    v.push(Case {
        name: "smooth_l1_layer",
        leaves: vec![(4, 4, rand_vec(rng, 16, 2.0))],
        build: Box::new(move |t, x| {
            let y = layers::smooth_l1(t, x[0]);
            Ok(contract(t, y, ws))
        }),
    });
    let ws = rng.gen();
    v.push(Case {
        name: "softmax_attention",
        leaves: vec![leaf(rng, 1, 4), leaf(rng, 5, 4), leaf(rng, 5, 3)],
        build: Box::new(move |t, x| {
            let y = layers::softmax_attention(t, x[0], x[1], x[2])?;
            Ok(contract(t, y, ws))
        }),
    });
    let ws = rng.gen();
    let (d, din) = (4, 3);
    v.push(Case {
        name: "gru_cell",
        leaves: vec![
            leaf(rng, 2, d),
            leaf(rng, 2, din),
            leaf(rng, din, 3 * d),
            leaf(rng, 1, 3 * d),
            leaf(rng, d, 3 * d),
            leaf(rng, 1, 3 * d),
        ],
        build: Box::new(move |t, x| {
            let y = layers::gru_cell(t, x[0], x[1], x[2], x[3], x[4], x[5])?;
            Ok(contract(t, y, ws))
        }),
    });
    v
}

fn run_case(c: &Case, seed: u64, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    let report = check_leaves(&c.leaves, cfg, rng, |t, x| (c.build)(t, x))?;
    Ok(CaseResult {
        name: c.name.to_string(),
        seed,
        report,
    })
}

/// Checks a parameterized module: `build` receives the store and a
/// [`Bound`] wrapping the perturbed leaves.
fn run_params<F>(name: &str, seed: u64, store: &ParamStore, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng, build: F) -> Result<CaseResult>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let report = check_params(store, cfg, rng, |t, _, leaves| {
        let p = Bound::from_vars(leaves.to_vec());
        build(t, &p)
    })?;
    Ok(CaseResult {
        name: name.to_string(),
        seed,
        report,
    })
}

fn module_cases(seed: u64, cfg: &GradCheckConfig, rng: &mut ChaCha8Rng) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &[3, 5, 3], rng);
    let ln = LayerNorm::new(&mut store, "ln", 3);
    let x = rand_vec(rng, 12, 1.0);
    let ws = rng.gen();
    out.push(run_params("mlp_layernorm", seed, &store, cfg, rng, |t, p| {
        let x = t.leaf_f64(4, 3, &x);
        let y = mlp.forward(t, p, x)?;
        let y = ln.forward(t, p, y)?;
        Ok(contract(t, y, ws))
    })?);

    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, "gru", 3, 4, rng);
    let (h, x) = (rand_vec(rng, 8, 1.0), rand_vec(rng, 6, 1.0));
    let ws = rng.gen();
    out.push(run_params("gru_params", seed, &store, cfg, rng, |t, p| {
        let h = t.leaf_f64(2, 4, &h);
        let x = t.leaf_f64(2, 3, &x);
        let y = gru.forward(t, p, h, x)?;
        Ok(contract(t, y, ws))
    })?);

    let net = OverlapNet::new(4, 5000.0, seed);
    let x = rand_vec(rng, 5 * 8, 1.0);
    let y: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.0)).collect();
    out.push(run_params("overlap_loss", seed, &net.params, cfg, rng, |t, p| {
        let x = t.leaf_f64(5, 8, &x);
        let target = t.leaf_f64(5, 1, &y);
        let pred = net.forward(t, p, x)?;
        let r = t.sub(pred, target);
        let l = t.smooth_l1(r);
        Ok(t.mean(l))
    })?);
    Ok(out)
}

/// A noisy 4-node graph (a ring plus one chord) with its ground truth.
pub fn four_node_graph(rng: &mut ChaCha8Rng) -> Result<(PoseGraph, Vec<RigidPose>)> {
    let gt: Vec<RigidPose> = (0..4).map(|_| RigidPose::random(rng, 3.0)).collect();
    let pairs: Vec<PairMeasure> = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]
        .iter()
        .map(|&(u, v)| {
            let noise = RigidPose::new(
                random_small_rotation(rng, 0.1),
                Vector3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)),
            );
            PairMeasure {
                u,
                v,
                forward: RelMeasure {
                    transform: noise.compose(&gt[u].relative_to(&gt[v])),
                    overlap: rng.gen_range(0.3..0.9),
                    icr: rng.gen_range(0.1..0.5),
                    ipr: rng.gen_range(0.0..0.5),
                },
                icr_reverse: rng.gen_range(0.1..0.5),
            }
        })
        .collect();
    Ok((PoseGraph::from_pairs(4, &pairs)?, gt))
}

/// Full motion loss of a sync network on a 4-node graph, checked over
/// every parameter tensor. The zero-initialized heads are randomized so
/// gradients reach every layer.
pub fn motion_loss_case(seed: u64, d: usize, cfg: &GradCheckConfig) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x6a, seed, 1));
    let mut net = SyncNet::new(SyncConfig {
        d,
        init_seed: seed,
        ..SyncConfig::default()
    });
    let ids: Vec<_> = net.params.ids().collect();
    for id in ids {
        if net.params.name(id).starts_with("head.") {
            for x in net.params.get_mut(id).data.iter_mut() {
                *x = rng.gen_range(-0.3..0.3);
            }
        }
    }
    let (pg, gt) = four_node_graph(&mut rng)?;
    let s = spanning_init(&pg)?;
    let g = GraphInput::new(&pg, &s, net.cfg.residual_heads)?;
    let tg = MotionTargets::from_absolute(&gt, &g)?;
    run_params("motion_loss", seed, &net.params, cfg, &mut rng, |t, p| {
        let tr = net.forward(t, p, &g, true)?;
        Ok(motion_loss(t, &tr, &tg, net.cfg.gamma, net.cfg.beta)?.total)
    })
}

/// Every op and layer case for one seed.
pub fn primitive_cases(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x6a, seed, 0));
    let cfg = GradCheckConfig::default();
    let mut out = Vec::new();
    let cases: Vec<Case> = op_cases(&mut rng).into_iter().chain(layer_cases(&mut rng)).collect();
    for c in &cases {
        out.push(run_case(c, seed, &cfg, &mut rng)?);
    }
    out.extend(module_cases(seed, &cfg, &mut rng)?);
    Ok(out)
}

/// The whole suite over `seeds`; the motion loss uses the default width
/// with `per_leaf` entries probed per tensor.
pub fn run_suite(seeds: std::ops::Range<u64>, per_leaf: Option<usize>) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for s in seeds {
        out.extend(primitive_cases(s)?);
        let cfg = GradCheckConfig {
            max_per_leaf: per_leaf,
            ..GradCheckConfig::default()
        };
        out.push(motion_loss_case(s, SyncConfig::default().d, &cfg)?);
    }
    Ok(out)
}
