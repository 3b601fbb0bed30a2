//! Discounted motion losses on rotations and translations.
//!
//! The consistency terms compare predicted relatives `R_u R_vᵀ` and
//! `t_u − R_u R_vᵀ t_v` against ground truth on every ordered pair `u ≠ v`;
//! the auxiliary terms compare the per-edge relative heads. Every term is a
//! mean of elementwise absolute errors.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::geometry::RigidPose;
use crate::nn::{Real, Tape, Var};

use super::{ForwardTrace, GraphInput, RoundOutput};

/// Ground-truth relatives for the loss. Only relatives enter, so the loss
/// cannot see the global gauge of the ground truth.
#[derive(Debug, Clone)]
pub struct MotionTargets {
    pub n: usize,
    pair_u: Rc<[usize]>,
    pair_v: Rc<[usize]>,
    pair_r: Vec<f64>,
    pair_t: Vec<f64>,
    edge_r: Vec<f64>,
    edge_t: Vec<f64>,
}

fn flat(p: &RigidPose, r: &mut Vec<f64>, t: &mut Vec<f64>) {
    r.extend_from_slice(&p.r.to_row_major());
    t.extend_from_slice(&[p.t.x, p.t.y, p.t.z]);
}

impl MotionTargets {
    /// `rel(u, v)` must return the ground-truth `T_u ∘ T_v⁻¹`.
    pub fn from_relatives(n: usize, g: &GraphInput, rel: impl Fn(usize, usize) -> RigidPose) -> Result<Self> {
        if g.n != n {
            return Err(Error::LengthMismatch { expected: g.n, got: n });
        }
        let (mut pu, mut pv) = (Vec::new(), Vec::new());
        let (mut pair_r, mut pair_t) = (Vec::new(), Vec::new());
        for u in 0..n {
            for v in 0..n {
                if u != v {
                    pu.push(u);
                    pv.push(v);
                    flat(&rel(u, v), &mut pair_r, &mut pair_t);
                }
            }
        }
        let (mut edge_r, mut edge_t) = (Vec::new(), Vec::new());
        for (&u, &v) in g.us.iter().zip(g.vs.iter()) {
            flat(&rel(u, v), &mut edge_r, &mut edge_t);
        }
        Ok(MotionTargets {
            n,
            pair_u: pu.into(),
            pair_v: pv.into(),
            pair_r,
            pair_t,
            edge_r,
            edge_t,
        })
    }

    pub fn from_absolute(gt: &[RigidPose], g: &GraphInput) -> Result<Self> {
        Self::from_relatives(gt.len(), g, |u, v| gt[u].relative_to(&gt[v]))
    }

    pub fn n_pairs(&self) -> usize {
        self.pair_u.len()
    }
}

/// Loss components as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct MotionLoss {
    pub total: Var,
    pub rot: Var,
    pub trans: Var,
}

struct Leaves {
    pair_r: Var,
    pair_t: Var,
    edge_r: Var,
    edge_t: Var,
}

fn round_terms<S: Real>(
    tape: &mut Tape<S>,
    o: &RoundOutput,
    tg: &MotionTargets,
    k: &Leaves,
) -> (Var, Var) {
    let ru = tape.gather(o.rot, tg.pair_u.clone());
    let rv = tape.gather(o.rot, tg.pair_v.clone());
    let rel = tape.mat3(ru, rv, false, true);
    let d = tape.sub(rel, k.pair_r);
    let d = tape.abs(d);
    let l_cons = tape.mean(d);
    let d = tape.sub(o.rel_rot, k.edge_r);
    let d = tape.abs(d);
    let l_aux = tape.mean(d);
    let l_rot = tape.add(l_cons, l_aux);

    let trans_consistency = |tape: &mut Tape<S>, t: Var| {
        let tu = tape.gather(t, tg.pair_u.clone());
        let tv = tape.gather(t, tg.pair_v.clone());
        let rtv = tape.mat3_vec(rel, tv, false);
        let pred = tape.sub(tu, rtv);
        let d = tape.sub(pred, k.pair_t);
        let d = tape.abs(d);
        tape.mean(d)
    };
    let l_ref = trans_consistency(tape, o.t_refined);
    let l_coarse = trans_consistency(tape, o.t_coarse);
    let d = tape.sub(o.rel_t, k.edge_t);
    let d = tape.abs(d);
    let l_aux_t = tape.mean(d);
    let s = tape.add(l_ref, l_coarse);
    let l_trans = tape.add(s, l_aux_t);
    (l_rot, l_trans)
}

/// `Σ_t γ^{T−t} L_rot^t + β Σ_t γ^{T−t} L_trans^t` over the rounds of
/// `trace` (the last round has weight 1).
pub fn motion_loss<S: Real>(
    tape: &mut Tape<S>,
    trace: &ForwardTrace,
    tg: &MotionTargets,
    gamma: f64,
    beta: f64,
) -> Result<MotionLoss> {
    let Some(first) = trace.rounds.first() else {
        return Err(Error::InvalidSpec("trace has no regression rounds".into()));
    };
    let n = tape.rows(first.rot);
    if n != tg.n {
        return Err(Error::LengthMismatch { expected: tg.n, got: n });
    }
    let np = tg.n_pairs();
    let m = tape.rows(first.rel_rot);
    let k = Leaves {
        pair_r: tape.leaf_f64(np, 9, &tg.pair_r),
        pair_t: tape.leaf_f64(np, 3, &tg.pair_t),
        edge_r: tape.leaf_f64(m, 9, &tg.edge_r),
        edge_t: tape.leaf_f64(m, 3, &tg.edge_t),
    };
    if tg.edge_r.len() != 9 * m {
        return Err(Error::LengthMismatch {
            expected: 9 * m,
            got: tg.edge_r.len(),
        });
    }
    let t_total = trace.rounds.len();
    let mut rot = None;
    let mut trans = None;
    for (i, o) in trace.rounds.iter().enumerate() {
        let w = gamma.powi((t_total - 1 - i) as i32);
        let (lr, lt) = round_terms(tape, o, tg, &k);
        let lr = tape.scale(lr, w);
        let lt = tape.scale(lt, w);
        rot = Some(match rot {
            Some(acc) => tape.add(acc, lr),
            None => lr,
        });
        trans = Some(match trans {
            Some(acc) => tape.add(acc, lt),
            None => lt,
        });
    }
    let (rot, trans) = (rot.expect("nonempty"), trans.expect("nonempty"));
    let bt = tape.scale(trans, beta);
    let total = tape.add(rot, bt);
    Ok(MotionLoss { total, rot, trans })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::posegraph::{spanning_init, PairMeasure, PoseGraph, RelMeasure};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(gt: &[RigidPose], pairs: &[(usize, usize)]) -> GraphInput {
        let ps: Vec<_> = pairs
            .iter()
            .map(|&(u, v)| PairMeasure {
                u,
                v,
                forward: RelMeasure {
                    transform: gt[u].relative_to(&gt[v]),
                    overlap: 0.5,
                    icr: 0.3,
                    ipr: 0.2,
                },
                icr_reverse: 0.3,
            })
            .collect();
        let pg = PoseGraph::from_pairs(gt.len(), &ps).unwrap();
        GraphInput::new(&pg, &spanning_init(&pg).unwrap(), true).unwrap()
    }

    /// A trace whose every round outputs `abs` and the matching relatives.
    fn trace_of(tape: &mut Tape<f64>, g: &GraphInput, abs: &[RigidPose], rounds: usize) -> ForwardTrace {
        let r: Vec<f64> = abs.iter().flat_map(|p| p.r.to_row_major()).collect();
        let t: Vec<f64> = abs.iter().flat_map(|p| [p.t.x, p.t.y, p.t.z]).collect();
        let mut er = Vec::new();
        let mut et = Vec::new();
        for (&u, &v) in g.us.iter().zip(g.vs.iter()) {
            flat(&abs[u].relative_to(&abs[v]), &mut er, &mut et);
        }
        let (n, m) = (abs.len(), g.m);
        let out = RoundOutput {
            rot: tape.leaf_f64(n, 9, &r),
            t_coarse: tape.leaf_f64(n, 3, &t),
            t_refined: tape.leaf_f64(n, 3, &t),
            rel_rot: tape.leaf_f64(m, 9, &er),
            rel_t: tape.leaf_f64(m, 3, &et),
            weight: tape.leaf_f64(m, 1, &vec![1.0; m]),
            delta_rot: tape.leaf_f64(n, 9, &r),
            delta_t: tape.leaf_f64(n, 3, &t),
        };
        ForwardTrace {
            rounds: vec![out; rounds],
            features: Vec::new(),
            attention: Vec::new(),
        }
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<RigidPose> = (0..5).map(|_| RigidPose::random(&mut rng, 3.0)).collect();
        let g = graph(&gt, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]);
        let tg = MotionTargets::from_absolute(&gt, &g).unwrap();
        let mut tape = Tape::<f64>::new();
        let tr = trace_of(&mut tape, &g, &gt, 4);
        let l = motion_loss(&mut tape, &tr, &tg, 0.8, 0.2).unwrap();
        assert!(tape.scalar(l.total) < 1e-12);
    }

    #[test]
    fn two_node_manual_evaluation() {
        let gt = vec![RigidPose::identity(); 2];
        let g = graph(&gt, &[(0, 1)]);
        let tg = MotionTargets::from_absolute(&gt, &g).unwrap();
        let theta = 30f64.to_radians();
        let wrong = RigidPose::new(Rotation::from_axis_angle(&Vector3::z(), theta), Vector3::zeros());
        let mut tape = Tape::<f64>::new();
        let mut tr = trace_of(&mut tape, &g, &gt, 1);
        let r: Vec<f64> = [RigidPose::identity(), wrong].iter().flat_map(|p| p.r.to_row_major()).collect();
        tr.rounds[0].rot = tape.leaf_f64(2, 9, &r);
        let l = motion_loss(&mut tape, &tr, &tg, 0.8, 0.2).unwrap();
        // R_0 R_1ᵀ − I has entries (cos−1) twice and ±sin twice; both
        // ordered pairs contribute the same 9-entry mean
        let (c, s) = (theta.cos(), theta.sin());
        let rot = (2.0 * (1.0 - c) + 2.0 * s) / 9.0;
        assert!((tape.scalar(l.rot) - rot).abs() < 1e-12);
        // translations are zero so the rotation error cannot leak into them
        assert!(tape.scalar(l.trans).abs() < 1e-12);
        assert!((tape.scalar(l.total) - rot).abs() < 1e-6);
    }

    #[test]
    fn discount_weights_rounds() {
        let gt = vec![RigidPose::identity(); 2];
        let g = graph(&gt, &[(0, 1)]);
        let tg = MotionTargets::from_absolute(&gt, &g).unwrap();
        let off = RigidPose::new(Rotation::identity(), Vector3::new(0.3, 0.0, 0.0));
        let mut tape = Tape::<f64>::new();
        let tr1 = trace_of(&mut tape, &g, &[RigidPose::identity(), off], 1);
        let tr3 = trace_of(&mut tape, &g, &[RigidPose::identity(), off], 3);
        let l1 = motion_loss(&mut tape, &tr1, &tg, 0.5, 1.0).unwrap();
        let l3 = motion_loss(&mut tape, &tr3, &tg, 0.5, 1.0).unwrap();
        let (a, b) = (tape.scalar(l1.total), tape.scalar(l3.total));
        assert!(a > 0.0);
        assert!((b - a * (1.0 + 0.5 + 0.25)).abs() < 1e-12);
    }

    #[test]
    fn mismatched_targets_rejected() {
        let gt = vec![RigidPose::identity(); 3];
        let g = graph(&gt, &[(0, 1), (1, 2)]);
        assert!(MotionTargets::from_absolute(&gt[..2], &g).is_err());
    }
}
