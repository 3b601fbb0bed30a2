//! Learned motion synchronization: feature initialization from the pose
//! graph, alternating rotation/translation feature updates with confidence
//! attention and GRUs, pose and weight regression, and least-squares
//! translation refinement.
//!
//! With `residual_heads` on (the default), the network works in the frame
//! of the spanning-tree initialization: edge inputs are
//! `E_uv = T_u^init⁻¹ ∘ T_uv ∘ T_v^init`, node pose inputs are the identity,
//! and the heads regress a correction `Δ_u` with `T_u = T_u^init ∘ Δ_u`.
//! Auxiliary relative outputs are mapped back via
//! `T_uv = T_u^init ∘ Ê_uv ∘ T_v^init⁻¹`. With it off, raw measurements and
//! init poses are fed and the heads regress absolute poses directly.

pub mod loss;
pub mod refine;
pub mod train;

use std::rc::Rc;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{sixd_to_rotation, RigidPose, Rotation};
use crate::nn::{checkpoint, Bound, Dense, GruCell, LayerNorm, Mlp, ParamStore, Real, Segments, Tape, Tensor, Var};
use crate::posegraph::{PoseGraph, SpanningInit};
use refine::{refine_on_tape, refine_translations, RefineEdge};

pub use loss::{motion_loss, MotionTargets};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyncConfig {
    /// Feature width.
    pub d: usize,
    /// Update rounds T.
    pub iterations: usize,
    /// Loss discount γ applied as `γ^{T−t}`.
    pub gamma: f64,
    /// Translation loss weight β.
    pub beta: f64,
    /// Absolute updates per stream per round.
    pub abs_updates: usize,
    pub residual_heads: bool,
    pub weight_floor: f64,
    pub init_seed: u64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            d: 64,
            iterations: 4,
            gamma: 0.8,
            beta: 0.2,
            abs_updates: 2,
            residual_heads: true,
            weight_floor: 1e-4,
            init_seed: 0,
        }
    }
}

/// Graph topology, network inputs and refinement data for one pose graph.
#[derive(Debug, Clone)]
pub struct GraphInput {
    pub n: usize,
    pub m: usize,
    /// Receiving node of each directed edge `(u, v)`.
    pub us: Rc<[usize]>,
    pub vs: Rc<[usize]>,
    /// Edges grouped by `u`.
    pub seg: Rc<Segments>,
    pub edge_r: Vec<f64>,
    pub edge_t: Vec<f64>,
    pub edge_c: Vec<f64>,
    pub node_r: Vec<f64>,
    pub node_t: Vec<f64>,
    pub node_c: Vec<f64>,
    pub init: Vec<RigidPose>,
    pub refine_edges: Rc<[RefineEdge]>,
    pub root: usize,
    pub residual: bool,
}

fn push_pose(r: &mut Vec<f64>, t: &mut Vec<f64>, p: &RigidPose) {
    r.extend_from_slice(&p.r.to_row_major());
    t.extend_from_slice(&[p.t.x, p.t.y, p.t.z]);
}

impl GraphInput {
    pub fn new(g: &PoseGraph, s: &SpanningInit, residual: bool) -> Result<Self> {
        let n = g.n_nodes;
        let m = g.edges.len();
        if s.poses.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                got: s.poses.len(),
            });
        }
        let us: Rc<[usize]> = g.edges.iter().map(|e| e.u).collect();
        let vs: Rc<[usize]> = g.edges.iter().map(|e| e.v).collect();
        let mut deg = vec![0usize; n];
        for &u in us.iter() {
            deg[u] += 1;
        }
        if let Some(i) = deg.iter().position(|&d| d == 0) {
            if n > 1 {
                return Err(Error::IsolatedNode(i));
            }
        }
        let seg = Rc::new(Segments::new(us.to_vec(), n));
        let (mut edge_r, mut edge_t) = (Vec::with_capacity(9 * m), Vec::with_capacity(3 * m));
        let mut edge_c = Vec::with_capacity(3 * m);
        for e in &g.edges {
            let p = if residual {
                s.poses[e.u].inverse().compose(&e.m.transform).compose(&s.poses[e.v])
            } else {
                e.m.transform
            };
            push_pose(&mut edge_r, &mut edge_t, &p);
            edge_c.extend_from_slice(&[e.m.overlap, e.m.icr, e.m.ipr]);
        }
        let (mut node_r, mut node_t) = (Vec::with_capacity(9 * n), Vec::with_capacity(3 * n));
        let mut node_c = Vec::with_capacity(2 * n);
        let max_hop = s.max_hop().max(1) as f64;
        for i in 0..n {
            let p = if residual { RigidPose::identity() } else { s.poses[i] };
            push_pose(&mut node_r, &mut node_t, &p);
            node_c.extend_from_slice(&[s.hops[i] as f64 / max_hop, s.cum_priority[i]]);
        }
        let refine_edges = g
            .edges
            .iter()
            .map(|e| RefineEdge {
                u: e.u,
                v: e.v,
                t_uv: e.m.transform.t,
            })
            .collect();
        Ok(GraphInput {
            n,
            m,
            us,
            vs,
            seg,
            edge_r,
            edge_t,
            edge_c,
            node_r,
            node_t,
            node_c,
            init: s.poses.clone(),
            refine_edges,
            root: s.root,
            residual,
        })
    }
}

/// Per-stream parameters: neighbor mix, confidence attention, node GRU and
/// the relative (edge) update.
#[derive(Debug, Clone)]
struct Stream {
    mix: Mlp,
    wq: Dense,
    wk: Dense,
    wf: Dense,
    wc: Dense,
    gru: GruCell,
    ln_h: LayerNorm,
    ln_c: LayerNorm,
    rel_f: Mlp,
    rel_c: Mlp,
    rel_gru: GruCell,
    rel_ln_h: LayerNorm,
    rel_ln_c: LayerNorm,
}

impl Stream {
    fn new(p: &mut ParamStore, name: &str, d: usize, mix_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        Stream {
            mix: Mlp::new(p, &n("mix"), &[mix_in, d, d], rng),
            wq: Dense::new(p, &n("wq"), 2 * d, d, rng),
            wk: Dense::new(p, &n("wk"), 2 * d, d, rng),
            wf: Dense::new(p, &n("wf"), d, d, rng),
            wc: Dense::new(p, &n("wc"), d, d, rng),
            gru: GruCell::new(p, &n("gru"), 2 * d, 2 * d, rng),
            ln_h: LayerNorm::new(p, &n("ln_h"), d),
            ln_c: LayerNorm::new(p, &n("ln_c"), d),
            rel_f: Mlp::new(p, &n("rel_f"), &[2 * d, d, d], rng),
            rel_c: Mlp::new(p, &n("rel_c"), &[2 * d, d, d], rng),
            rel_gru: GruCell::new(p, &n("rel_gru"), 2 * d, 2 * d, rng),
            rel_ln_h: LayerNorm::new(p, &n("rel_ln_h"), d),
            rel_ln_c: LayerNorm::new(p, &n("rel_ln_c"), d),
        }
    }
}

/// Node and edge features of one stream plus the shared confidence
/// features.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub node_r: Var,
    pub node_t: Var,
    pub node_c: Var,
    pub edge_r: Var,
    pub edge_t: Var,
    pub edge_c: Var,
}

/// Regression outputs of one round. Rotations are row-major `[·, 9]`.
#[derive(Debug, Clone, Copy)]
pub struct RoundOutput {
    pub rot: Var,
    pub t_coarse: Var,
    pub t_refined: Var,
    pub rel_rot: Var,
    pub rel_t: Var,
    pub weight: Var,
    /// Head outputs before composition with the init poses (equal to the
    /// final outputs when `residual_heads` is off).
    pub delta_rot: Var,
    pub delta_t: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub rounds: Vec<RoundOutput>,
    pub features: Vec<Features>,
    /// Attention weights `[m, 1]` of every absolute update, in order.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct SyncNet {
    pub cfg: SyncConfig,
    pub params: ParamStore,
    in_er: Mlp,
    in_et: Mlp,
    in_ec: Mlp,
    in_nr: Mlp,
    in_nt: Mlp,
    in_nc: Mlp,
    rot: Stream,
    trans: Stream,
    head_rot: Mlp,
    head_t: Mlp,
    head_rel_rot: Mlp,
    head_rel_t: Mlp,
    head_w: Mlp,
}

const SIXD_IDENTITY: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Per-row constants fed to the tape.
struct Consts {
    init_r_u: Var,
    init_r_v: Var,
    init_r: Var,
    init_t: Var,
    init_t_u: Var,
    init_c_v: Var,
    sixd_id: Var,
}

impl SyncNet {
    pub fn new(cfg: SyncConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let d = cfg.d;
        let mut p = ParamStore::new();
        let r = &mut rng;
        let in_er = Mlp::new(&mut p, "in.edge_r", &[9, d, d], r);
        let in_et = Mlp::new(&mut p, "in.edge_t", &[3, d, d], r);
        let in_ec = Mlp::new(&mut p, "in.edge_c", &[3, d, d], r);
        let in_nr = Mlp::new(&mut p, "in.node_r", &[9, d, d], r);
        let in_nt = Mlp::new(&mut p, "in.node_t", &[3, d, d], r);
        let in_nc = Mlp::new(&mut p, "in.node_c", &[2, d, d], r);
        let rot = Stream::new(&mut p, "rot", d, 2 * d, r);
        let trans = Stream::new(&mut p, "trans", d, 3 * d, r);
        let head_rot = Mlp::new_zero_head(&mut p, "head.rot", &[d, d, 6], r);
        let head_t = Mlp::new_zero_head(&mut p, "head.t", &[d, d, 3], r);
        let head_rel_rot = Mlp::new_zero_head(&mut p, "head.rel_rot", &[d, d, 6], r);
        let head_rel_t = Mlp::new_zero_head(&mut p, "head.rel_t", &[d, d, 3], r);
        let head_w = Mlp::new_zero_head(&mut p, "head.w", &[d, d, 1], r);
        SyncNet {
            cfg,
            params: p,
            in_er,
            in_et,
            in_ec,
            in_nr,
            in_nt,
            in_nc,
            rot,
            trans,
            head_rot,
            head_t,
            head_rel_rot,
            head_rel_t,
            head_w,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        checkpoint::write_checkpoint(path, &self.named_tensors())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.named().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    pub fn load(cfg: SyncConfig, path: &std::path::Path) -> Result<Self> {
        let mut net = SyncNet::new(cfg);
        net.params.load_from(&checkpoint::read_checkpoint(path)?)?;
        Ok(net)
    }

    /// Initial features from the graph inputs.
    pub fn init_features<S: Real>(&self, tape: &mut Tape<S>, p: &Bound, g: &GraphInput) -> Result<Features> {
        let er = tape.leaf_f64(g.m, 9, &g.edge_r);
        let et = tape.leaf_f64(g.m, 3, &g.edge_t);
        let ec = tape.leaf_f64(g.m, 3, &g.edge_c);
        let nr = tape.leaf_f64(g.n, 9, &g.node_r);
        let nt = tape.leaf_f64(g.n, 3, &g.node_t);
        let nc = tape.leaf_f64(g.n, 2, &g.node_c);
        Ok(Features {
            edge_r: self.in_er.forward(tape, p, er)?,
            edge_t: self.in_et.forward(tape, p, et)?,
            edge_c: self.in_ec.forward(tape, p, ec)?,
            node_r: self.in_nr.forward(tape, p, nr)?,
            node_t: self.in_nt.forward(tape, p, nt)?,
            node_c: self.in_nc.forward(tape, p, nc)?,
        })
    }

    /// One absolute (node) update; returns updated node features, updated
    /// node confidence and the attention weights.
    #[allow(clippy::too_many_arguments)]
    fn absolute_update<S: Real>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        g: &GraphInput,
        st: &Stream,
        h_node: Var,
        c_node: Var,
        h_edge: Var,
        c_edge: Var,
        extra: Option<Var>,
    ) -> Result<(Var, Var, Var)> {
        let d = self.cfg.d;
        let h_v = tape.gather(h_node, g.vs.clone());
        let mix_in = match extra {
            Some(x) => tape.concat(&[h_v, h_edge, x]),
            None => tape.concat(&[h_v, h_edge]),
        };
        let z = st.mix.forward(tape, p, mix_in)?;
        let qin = tape.concat(&[h_node, c_node]);
        let q = st.wq.forward(tape, p, qin)?;
        let q_e = tape.gather(q, g.us.clone());
        let kin = tape.concat(&[z, c_edge]);
        let k = st.wk.forward(tape, p, kin)?;
        let logits = tape.row_dot(q_e, k);
        let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
        let alpha = tape.segment_softmax(logits, g.seg.clone());
        let f = st.wf.forward(tape, p, z)?;
        let c = st.wc.forward(tape, p, c_edge)?;
        let fa = tape.mul_col(f, alpha);
        let ca = tape.mul_col(c, alpha);
        let msg = tape.segment_sum(fa, g.seg.clone());
        let cmsg = tape.segment_sum(ca, g.seg.clone());
        let hn = st.ln_h.forward(tape, p, h_node)?;
        let cn = st.ln_c.forward(tape, p, c_node)?;
        let hidden = tape.concat(&[hn, cn]);
        let input = tape.concat(&[msg, cmsg]);
        let out = st.gru.forward(tape, p, hidden, input)?;
        let h_new = tape.slice_cols(out, 0, d);
        let c_new = tape.slice_cols(out, d, d);
        Ok((h_new, c_new, alpha))
    }

    /// Relative (edge) update from the ordered endpoint features.
    #[allow(clippy::too_many_arguments)]
    fn relative_update<S: Real>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        g: &GraphInput,
        st: &Stream,
        h_node: Var,
        c_node: Var,
        h_edge: Var,
        c_edge: Var,
    ) -> Result<(Var, Var)> {
        let d = self.cfg.d;
        let hu = tape.gather(h_node, g.us.clone());
        let hv = tape.gather(h_node, g.vs.clone());
        let cu = tape.gather(c_node, g.us.clone());
        let cv = tape.gather(c_node, g.vs.clone());
        let fin = tape.concat(&[hu, hv]);
        let cin = tape.concat(&[cu, cv]);
        let a = st.rel_f.forward(tape, p, fin)?;
        let b = st.rel_c.forward(tape, p, cin)?;
        let hn = st.rel_ln_h.forward(tape, p, h_edge)?;
        let cn = st.rel_ln_c.forward(tape, p, c_edge)?;
        let hidden = tape.concat(&[hn, cn]);
        let input = tape.concat(&[a, b]);
        let out = st.rel_gru.forward(tape, p, hidden, input)?;
        Ok((tape.slice_cols(out, 0, d), tape.slice_cols(out, d, d)))
    }

    /// One full round: rotation stream then translation stream.
    pub fn round<S: Real>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        g: &GraphInput,
        f: Features,
        attention: &mut Vec<Var>,
    ) -> Result<Features> {
        let mut f = f;
        for _ in 0..self.cfg.abs_updates {
            let (h, c, a) =
                self.absolute_update(tape, p, g, &self.rot, f.node_r, f.node_c, f.edge_r, f.edge_c, None)?;
            f.node_r = h;
            f.node_c = c;
            attention.push(a);
        }
        let (h, c) = self.relative_update(tape, p, g, &self.rot, f.node_r, f.node_c, f.edge_r, f.edge_c)?;
        f.edge_r = h;
        f.edge_c = c;
        for _ in 0..self.cfg.abs_updates {
            let (h, c, a) = self.absolute_update(
                tape,
                p,
                g,
                &self.trans,
                f.node_t,
                f.node_c,
                f.edge_t,
                f.edge_c,
                Some(f.edge_r),
            )?;
            f.node_t = h;
            f.node_c = c;
            attention.push(a);
        }
        let (h, c) = self.relative_update(tape, p, g, &self.trans, f.node_t, f.node_c, f.edge_t, f.edge_c)?;
        f.edge_t = h;
        f.edge_c = c;
        Ok(f)
    }

    fn consts<S: Real>(&self, tape: &mut Tape<S>, g: &GraphInput) -> Consts {
        let r: Vec<f64> = g.init.iter().flat_map(|p| p.r.to_row_major()).collect();
        let t: Vec<f64> = g.init.iter().flat_map(|p| [p.t.x, p.t.y, p.t.z]).collect();
        let init_r = tape.leaf_f64(g.n, 9, &r);
        let init_t = tape.leaf_f64(g.n, 3, &t);
        let init_r_u = tape.gather(init_r, g.us.clone());
        let init_r_v = tape.gather(init_r, g.vs.clone());
        let init_t_u = tape.gather(init_t, g.us.clone());
        let c: Vec<f64> = g
            .vs
            .iter()
            .flat_map(|&v| {
                let c = g.init[v].inverse().t;
                [c.x, c.y, c.z]
            })
            .collect();
        let init_c_v = tape.leaf_f64(g.m, 3, &c);
        let sixd_id = tape.leaf_f64(1, 6, &SIXD_IDENTITY);
        Consts {
            init_r_u,
            init_r_v,
            init_r,
            init_t,
            init_t_u,
            init_c_v,
            sixd_id,
        }
    }

    /// Regression heads and refinement on one feature state.
    fn regress<S: Real>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        g: &GraphInput,
        f: &Features,
        k: &Consts,
    ) -> Result<RoundOutput> {
        let six = self.head_rot.forward(tape, p, f.node_r)?;
        let six = tape.add_row(six, k.sixd_id);
        let delta_rot = tape.sixd_to_rotation(six);
        let delta_t = self.head_t.forward(tape, p, f.node_t)?;
        let rsix = self.head_rel_rot.forward(tape, p, f.edge_r)?;
        let rsix = tape.add_row(rsix, k.sixd_id);
        let rel_e = tape.sixd_to_rotation(rsix);
        let rel_te = self.head_rel_t.forward(tape, p, f.edge_t)?;
        let w = self.head_w.forward(tape, p, f.edge_c)?;
        let w = tape.softplus(w);
        let weight = tape.affine(w, 1.0, self.cfg.weight_floor);

        let (rot, t_coarse, rel_rot, rel_t) = if g.residual {
            let rot = tape.mat3(k.init_r, delta_rot, false, false);
            let rt = tape.mat3_vec(k.init_r, delta_t, false);
            let t_coarse = tape.add(rt, k.init_t);
            let a = tape.mat3(k.init_r_u, rel_e, false, false);
            let rel_rot = tape.mat3(a, k.init_r_v, false, true);
            // t_uv = R_u^init (R_E c_v + t_E) + t_u^init
            let rc = tape.mat3_vec(rel_e, k.init_c_v, false);
            let inner = tape.add(rc, rel_te);
            let outer = tape.mat3_vec(k.init_r_u, inner, false);
            let rel_t = tape.add(outer, k.init_t_u);
            (rot, t_coarse, rel_rot, rel_t)
        } else {
            (delta_rot, delta_t, rel_e, rel_te)
        };
        let t_refined = refine_on_tape(tape, rot, t_coarse, weight, g.refine_edges.clone(), g.root)?;
        Ok(RoundOutput {
            rot,
            t_coarse,
            t_refined,
            rel_rot,
            rel_t,
            weight,
            delta_rot,
            delta_t,
        })
    }

    /// Runs all rounds. With `every_round` the heads run after each round
    /// (training); otherwise only after the last (inference).
    pub fn forward<S: Real>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        g: &GraphInput,
        every_round: bool,
    ) -> Result<ForwardTrace> {
        if self.cfg.iterations == 0 {
            return Err(Error::InvalidSpec("iterations must be >= 1".into()));
        }
        let k = self.consts(tape, g);
        let mut f = self.init_features(tape, p, g)?;
        let mut features = vec![f];
        let mut attention = Vec::new();
        let mut rounds = Vec::new();
        for it in 0..self.cfg.iterations {
            f = self.round(tape, p, g, f, &mut attention)?;
            features.push(f);
            if every_round || it + 1 == self.cfg.iterations {
                rounds.push(self.regress(tape, p, g, &f, &k)?);
            }
        }
        Ok(ForwardTrace {
            rounds,
            features,
            attention,
        })
    }

    /// Inference on an `f32` tape. Corrections are composed with the init
    /// poses and the translations refined in `f64`.
    pub fn predict(&self, g: &GraphInput) -> Result<SyncPrediction> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape);
        let tr = self.forward(&mut tape, &p, g, false)?;
        let out = tr.rounds.last().expect("at least one round");
        let rows9 = |v: Var, tape: &Tape<f32>| -> Vec<Matrix3<f64>> {
            tape.value(v)
                .chunks_exact(9)
                .map(|c| Matrix3::from_fn(|i, j| c[3 * i + j] as f64))
                .collect()
        };
        let rows3 = |v: Var, tape: &Tape<f32>| -> Vec<Vector3<f64>> {
            tape.value(v)
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64))
                .collect()
        };
        let d_rot = rows9(out.delta_rot, &tape);
        let d_t = rows3(out.delta_t, &tape);
        let mut poses: Vec<RigidPose> = d_rot
            .iter()
            .zip(&d_t)
            .map(|(r, t)| {
                // f32 outputs are orthonormal only to ~1e-7; redo Gram-Schmidt in f64
                let r = sixd_to_rotation(&Rotation::from_matrix_unchecked(*r).to_sixd())?;
                Ok(RigidPose::new(r, *t))
            })
            .collect::<Result<_>>()?;
        if g.residual {
            for (i, pose) in poses.iter_mut().enumerate() {
                *pose = g.init[i].compose(pose);
            }
        }
        let weights: Vec<f64> = tape.value(out.weight).iter().map(|&w| w as f64).collect();
        let rots: Vec<Matrix3<f64>> = poses.iter().map(|p| *p.r.matrix()).collect();
        let coarse: Vec<Vector3<f64>> = poses.iter().map(|p| p.t).collect();
        let refined = refine_translations(&rots, &coarse, &g.refine_edges, &weights, g.root)?;
        Ok(SyncPrediction {
            rotations: poses.iter().map(|p| p.r).collect(),
            t_coarse: coarse,
            t_refined: refined,
            weights,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncPrediction {
    pub rotations: Vec<Rotation>,
    pub t_coarse: Vec<Vector3<f64>>,
    pub t_refined: Vec<Vector3<f64>>,
    /// Per directed edge, aligned with the graph's edge list.
    pub weights: Vec<f64>,
}

impl SyncPrediction {
    pub fn poses(&self) -> Vec<RigidPose> {
        self.rotations.iter().zip(&self.t_refined).map(|(r, t)| RigidPose::new(*r, *t)).collect()
    }

    pub fn coarse_poses(&self) -> Vec<RigidPose> {
        self.rotations.iter().zip(&self.t_coarse).map(|(r, t)| RigidPose::new(*r, *t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::posegraph::spanning_init;
    use crate::synth::{gen_scene, SceneSpec};

    fn small_scene(seed: u64, n: usize) -> crate::synth::SyntheticScene {
        gen_scene(&SceneSpec {
            n_min: n,
            n_max: n,
            k: 2,
            seed,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    fn input(seed: u64, n: usize) -> GraphInput {
        let sc = small_scene(seed, n);
        let s = spanning_init(&sc.graph).unwrap();
        GraphInput::new(&sc.graph, &s, true).unwrap()
    }

    fn small_cfg() -> SyncConfig {
        SyncConfig {
            d: 16,
            iterations: 2,
            ..SyncConfig::default()
        }
    }

    #[test]
    fn feature_shapes_default_width() {
        let net = SyncNet::new(SyncConfig::default());
        let g = input(1, 5);
        let mut tape = Tape::<f64>::new();
        let p = net.params.bind(&mut tape);
        let f = net.init_features(&mut tape, &p, &g).unwrap();
        for v in [f.node_r, f.node_t, f.node_c] {
            assert_eq!(tape.shape(v), (5, 64));
        }
        for v in [f.edge_r, f.edge_t, f.edge_c] {
            assert_eq!(tape.shape(v), (g.m, 64));
        }
    }

    #[test]
    fn identical_edges_give_identical_features() {
        let net = SyncNet::new(small_cfg());
        let mut g = input(2, 6);
        let (a, b) = (0, 3);
        for (xs, w) in [(&mut g.edge_r, 9), (&mut g.edge_t, 3), (&mut g.edge_c, 3)] {
            let src: Vec<f64> = xs[a * w..(a + 1) * w].to_vec();
            xs[b * w..(b + 1) * w].copy_from_slice(&src);
        }
        let mut tape = Tape::<f64>::new();
        let p = net.params.bind(&mut tape);
        let f = net.init_features(&mut tape, &p, &g).unwrap();
        let d = 16;
        for v in [f.edge_r, f.edge_t, f.edge_c] {
            let x = tape.value(v);
            assert_eq!(x[a * d..(a + 1) * d], x[b * d..(b + 1) * d]);
        }
    }

    #[test]
    fn attention_normalized_per_node() {
        let net = SyncNet::new(small_cfg());
        let g = input(3, 7);
        let mut tape = Tape::<f64>::new();
        let p = net.params.bind(&mut tape);
        let tr = net.forward(&mut tape, &p, &g, true).unwrap();
        assert_eq!(tr.attention.len(), 2 * 2 * 2);
        for &a in &tr.attention {
            let mut s = vec![0.0; g.n];
            for (e, &u) in g.us.iter().enumerate() {
                s[u] += tape.value(a)[e];
            }
            for x in s {
                assert!((x - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_neighbor_gets_full_attention() {
        // a path graph: the two ends have exactly one neighbor
        let mut pairs = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for u in 0..3 {
            pairs.push(crate::posegraph::PairMeasure {
                u,
                v: u + 1,
                forward: crate::posegraph::RelMeasure {
                    transform: RigidPose::random(&mut rng, 2.0),
                    overlap: 0.5,
                    icr: 0.3,
                    ipr: 0.2,
                },
                icr_reverse: 0.3,
            });
        }
        let pg = PoseGraph::from_pairs(4, &pairs).unwrap();
        let s = spanning_init(&pg).unwrap();
        let g = GraphInput::new(&pg, &s, true).unwrap();
        let net = SyncNet::new(small_cfg());
        let mut tape = Tape::<f64>::new();
        let p = net.params.bind(&mut tape);
        let tr = net.forward(&mut tape, &p, &g, false).unwrap();
        for &a in &tr.attention {
            for (e, &u) in g.us.iter().enumerate() {
                if u == 0 || u == 3 {
                    assert_eq!(tape.value(a)[e], 1.0);
                }
            }
        }
    }

    #[test]
    fn twin_neighbors_split_attention_evenly() {
        // node 0 linked to 1 and 2 with identical measurements; 1 and 2 are
        // symmetric so their features coincide
        let m = crate::posegraph::RelMeasure {
            transform: RigidPose::identity(),
            overlap: 0.6,
            icr: 0.4,
            ipr: 0.1,
        };
        let pairs: Vec<_> = [(0, 1), (0, 2)]
            .iter()
            .map(|&(u, v)| crate::posegraph::PairMeasure {
                u,
                v,
                forward: m,
                icr_reverse: 0.4,
            })
            .collect();
        let pg = PoseGraph::from_pairs(3, &pairs).unwrap();
        let s = spanning_init(&pg).unwrap();
        assert_eq!(s.root, 0);
        let g = GraphInput::new(&pg, &s, true).unwrap();
        let net = SyncNet::new(small_cfg());
        let mut tape = Tape::<f64>::new();
        let p = net.params.bind(&mut tape);
        let tr = net.forward(&mut tape, &p, &g, false).unwrap();
        for &a in &tr.attention {
            for (e, &u) in g.us.iter().enumerate() {
                if u == 0 {
                    assert!((tape.value(a)[e] - 0.5).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn closed_update_gate_keeps_edge_state() {
        let mut net = SyncNet::new(small_cfg());
        let d = 16;
        // z gate sits in the middle third of the GRU bias
        let big = 1e3;
        for st in ["rot", "trans"] {
            for b in ["bx", "bh"] {
                let id = net.params.id(&format!("{st}.rel_gru.{b}")).unwrap();
                let t = net.params.get_mut(id);
                for j in 2 * d..4 * d {
                    t.data[j] = -big;
                }
            }
        }
        let g = input(5, 6);
        let mut tape = Tape::<f64>::new();
        let p = net.params.bind(&mut tape);
        let f0 = net.init_features(&mut tape, &p, &g).unwrap();
        let mut att = Vec::new();
        let f1 = net.round(&mut tape, &p, &g, f0, &mut att).unwrap();
        // the hidden state is the layernormed input, so compare to that
        let ln = net.rot.rel_ln_h.forward(&mut tape, &p, f0.edge_r).unwrap();
        let (a, b) = (tape.value(ln), tape.value(f1.edge_r));
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-9, "{x} {y}");
        }
    }

    #[test]
    fn outputs_valid_and_counted() {
        let net = SyncNet::new(small_cfg());
        let g = input(6, 8);
        let pred = net.predict(&g).unwrap();
        assert_eq!(pred.rotations.len(), 8);
        assert_eq!(pred.weights.len(), g.m);
        assert!(pred.weights.iter().all(|&w| w > 0.0 && w.is_finite()));
        for r in &pred.rotations {
            assert!(r.orthonormality_error() < 1e-6);
        }
        let mut tape = Tape::<f64>::new();
        let p = net.params.bind(&mut tape);
        let tr = net.forward(&mut tape, &p, &g, true).unwrap();
        assert_eq!(tr.rounds.len(), 2);
        let o = tr.rounds[1];
        assert_eq!(tape.shape(o.rot), (8, 9));
        assert_eq!(tape.shape(o.rel_rot), (g.m, 9));
        assert_eq!(tape.shape(o.rel_t), (g.m, 3));
        assert_eq!(tape.shape(o.weight), (g.m, 1));
    }

    #[test]
    fn zero_heads_reproduce_init() {
        let net = SyncNet::new(small_cfg());
        let sc = small_scene(7, 8);
        let s = spanning_init(&sc.graph).unwrap();
        let g = GraphInput::new(&sc.graph, &s, true).unwrap();
        let pred = net.predict(&g).unwrap();
        for (r, p) in pred.rotations.iter().zip(&s.poses) {
            assert!((r.matrix() - p.r.matrix()).norm() < 1e-12);
        }
        for (t, p) in pred.t_coarse.iter().zip(&s.poses) {
            assert!((t - p.t).norm() < 1e-12);
        }
    }

    #[test]
    fn single_round_network() {
        let net = SyncNet::new(SyncConfig {
            iterations: 1,
            ..small_cfg()
        });
        let g = input(8, 5);
        let mut tape = Tape::<f64>::new();
        let p = net.params.bind(&mut tape);
        let tr = net.forward(&mut tape, &p, &g, true).unwrap();
        assert_eq!(tr.rounds.len(), 1);
        assert_eq!(tr.features.len(), 2);
        assert_eq!(tr.attention.len(), 4);
        let bad = SyncNet::new(SyncConfig {
            iterations: 0,
            ..small_cfg()
        });
        let mut tape = Tape::<f64>::new();
        let p = bad.params.bind(&mut tape);
        assert!(bad.forward(&mut tape, &p, &g, true).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let net = SyncNet::new(small_cfg());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sync.mdgd");
        net.save(&path).unwrap();
        let back = SyncNet::load(small_cfg(), &path).unwrap();
        assert_eq!(net.params.tensors(), back.params.tensors());
    }
}
