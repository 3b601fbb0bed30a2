//! Weighted least-squares translation refinement with fixed rotations.
//!
//! For every directed edge `e = (u, v)` the residual
//! `t_u − R_u R_vᵀ t_v − t_uv`, rotated by `R_uᵀ`, is linear in the
//! correction `δ = t − t^coarse`: `B_e δ − L_e` with blocks `R_uᵀ` at `u`,
//! `−R_vᵀ` at `v` and `L_e = R_uᵀ t_uv − R_uᵀ t_u^coarse + R_vᵀ t_v^coarse`.
//! The normal equations `(Σ w_e B_eᵀB_e) δ = Σ w_e B_eᵀ L_e` have a
//! global-translation nullspace, removed by fixing the root's correction at
//! zero. The system is solved in `f64` by Cholesky.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::nn::{CustomOp, Real, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineEdge {
    pub u: usize,
    pub v: usize,
    pub t_uv: Vector3<f64>,
}

#[derive(Debug, Clone)]
struct System {
    n: usize,
    /// Block column of each node; `None` for the anchored root.
    col: Vec<Option<usize>>,
    chol: Option<Cholesky<f64, Dyn>>,
    x: DVector<f64>,
}

fn block(v: &DVector<f64>, c: Option<usize>) -> Vector3<f64> {
    match c {
        Some(c) => Vector3::new(v[3 * c], v[3 * c + 1], v[3 * c + 2]),
        None => Vector3::zeros(),
    }
}

fn lhs_vec(r: &[Matrix3<f64>], tc: &[Vector3<f64>], e: &RefineEdge) -> Vector3<f64> {
    r[e.u].transpose() * (e.t_uv - tc[e.u]) + r[e.v].transpose() * tc[e.v]
}

fn solve(
    r: &[Matrix3<f64>],
    tc: &[Vector3<f64>],
    edges: &[RefineEdge],
    w: &[f64],
    root: usize,
) -> Result<System> {
    let n = r.len();
    let mut col = vec![None; n];
    let mut k = 0;
    for (i, c) in col.iter_mut().enumerate() {
        if i != root {
            *c = Some(k);
            k += 1;
        }
    }
    let dim = 3 * k;
    if dim == 0 {
        return Ok(System {
            n,
            col,
            chol: None,
            x: DVector::zeros(0),
        });
    }
    let mut a = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);
    let add_block = |a: &mut DMatrix<f64>, ci: usize, cj: usize, m: &Matrix3<f64>| {
        for i in 0..3 {
            for j in 0..3 {
                a[(3 * ci + i, 3 * cj + j)] += m[(i, j)];
            }
        }
    };
    for (e, &we) in edges.iter().zip(w) {
        let (ru, rv) = (&r[e.u], &r[e.v]);
        let l = lhs_vec(r, tc, e);
        let (cu, cv) = (col[e.u], col[e.v]);
        if let Some(cu) = cu {
            add_block(&mut a, cu, cu, &(ru * ru.transpose() * we));
            let bu = ru * l * we;
            for i in 0..3 {
                b[3 * cu + i] += bu[i];
            }
        }
        if let Some(cv) = cv {
            add_block(&mut a, cv, cv, &(rv * rv.transpose() * we));
            let bv = rv * l * we;
            for i in 0..3 {
                b[3 * cv + i] -= bv[i];
            }
        }
        if let (Some(cu), Some(cv)) = (cu, cv) {
            let m = ru * rv.transpose() * (-we);
            add_block(&mut a, cu, cv, &m);
            add_block(&mut a, cv, cu, &m.transpose());
        }
    }
    let chol = Cholesky::new(a).ok_or(Error::SingularSystem)?;
    let x = chol.solve(&b);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem);
    }
    Ok(System {
        n,
        col,
        chol: Some(chol),
        x,
    })
}

fn validate(n: usize, tc_len: usize, edges: &[RefineEdge], w: &[f64], root: usize) -> Result<()> {
    if tc_len != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: tc_len,
        });
    }
    if w.len() != edges.len() {
        return Err(Error::LengthMismatch {
            expected: edges.len(),
            got: w.len(),
        });
    }
    if root >= n || edges.iter().any(|e| e.u >= n || e.v >= n) {
        return Err(Error::InvalidSpec("node index out of range".into()));
    }
    Ok(())
}

/// Refined translations `t^coarse + δ` with `δ_root = 0`.
pub fn refine_translations(
    rotations: &[Matrix3<f64>],
    coarse: &[Vector3<f64>],
    edges: &[RefineEdge],
    w: &[f64],
    root: usize,
) -> Result<Vec<Vector3<f64>>> {
    validate(rotations.len(), coarse.len(), edges, w, root)?;
    let s = solve(rotations, coarse, edges, w, root)?;
    Ok((0..s.n).map(|i| coarse[i] + block(&s.x, s.col[i])).collect())
}

/// `Σ_e w_e ‖t_u − R_u R_vᵀ t_v − t_uv‖²`.
pub fn weighted_residual(
    rotations: &[Matrix3<f64>],
    t: &[Vector3<f64>],
    edges: &[RefineEdge],
    w: &[f64],
) -> f64 {
    edges
        .iter()
        .zip(w)
        .map(|(e, &we)| {
            let r = t[e.u] - rotations[e.u] * rotations[e.v].transpose() * t[e.v] - e.t_uv;
            we * r.norm_squared()
        })
        .sum()
}

fn mat_from_row<S: Real>(v: &[S]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| v[3 * i + j].to_f64())
}

fn vec_from_row<S: Real>(v: &[S]) -> Vector3<f64> {
    Vector3::new(v[0].to_f64(), v[1].to_f64(), v[2].to_f64())
}

#[derive(Debug)]
struct RefineOp {
    rot: Var,
    coarse: Var,
    weight: Var,
    edges: std::rc::Rc<[RefineEdge]>,
    r: Vec<Matrix3<f64>>,
    tc: Vec<Vector3<f64>>,
    w: Vec<f64>,
    sys: System,
}

impl<S: Real> CustomOp<S> for RefineOp {
    fn parents(&self) -> Vec<Var> {
        vec![self.rot, self.coarse, self.weight]
    }

    fn backward(&self, _out: &[S], g: &[S], _pv: &[&[S]], pg: &mut [Vec<S>]) {
        let s = &self.sys;
        let n = s.n;
        let gt: Vec<Vector3<f64>> = (0..n).map(|i| vec_from_row(&g[3 * i..3 * i + 3])).collect();
        let mut d_r = vec![Matrix3::<f64>::zeros(); n];
        let mut d_tc = gt.clone();
        let mut d_w = vec![0.0; self.edges.len()];
        if let Some(chol) = &s.chol {
            let mut gx = DVector::<f64>::zeros(s.x.len());
            for i in 0..n {
                if let Some(c) = s.col[i] {
                    for k in 0..3 {
                        gx[3 * c + k] = gt[i][k];
                    }
                }
            }
            let gb = chol.solve(&gx);
            let (r, tc) = (&self.r, &self.tc);
            for (ei, e) in self.edges.iter().enumerate() {
                let we = self.w[ei];
                let (cu, cv) = (s.col[e.u], s.col[e.v]);
                let (gbu, gbv) = (block(&gb, cu), block(&gb, cv));
                let (xu, xv) = (block(&s.x, cu), block(&s.x, cv));
                let y = r[e.u].transpose() * gbu - r[e.v].transpose() * gbv;
                let bx = r[e.u].transpose() * xu - r[e.v].transpose() * xv;
                let l = lhs_vec(r, tc, e);
                let res = l - bx;
                d_w[ei] = y.dot(&res);
                if cu.is_some() {
                    d_r[e.u] += (gbu * res.transpose() - xu * y.transpose()) * we;
                }
                if cv.is_some() {
                    d_r[e.v] -= (gbv * res.transpose() - xv * y.transpose()) * we;
                }
                let wy = y * we;
                d_r[e.u] += (e.t_uv - tc[e.u]) * wy.transpose();
                d_r[e.v] += tc[e.v] * wy.transpose();
                d_tc[e.u] -= r[e.u] * wy;
                d_tc[e.v] += r[e.v] * wy;
            }
        }
        for i in 0..n {
            for a in 0..3 {
                for b in 0..3 {
                    pg[0][9 * i + 3 * a + b] += S::from_f64(d_r[i][(a, b)]);
                }
                pg[1][3 * i + a] += S::from_f64(d_tc[i][a]);
            }
        }
        for (k, v) in d_w.into_iter().enumerate() {
            pg[2][k] += S::from_f64(v);
        }
    }
}

/// Tape version of [`refine_translations`]: `rot [n,9]` (row-major),
/// `coarse [n,3]`, `weight [m,1]` aligned with `edges`; returns `[n,3]`.
pub fn refine_on_tape<S: Real>(
    tape: &mut Tape<S>,
    rot: Var,
    coarse: Var,
    weight: Var,
    edges: std::rc::Rc<[RefineEdge]>,
    root: usize,
) -> Result<Var> {
    let n = tape.rows(rot);
    if tape.shape(rot) != (n, 9) || tape.shape(coarse) != (n, 3) || tape.shape(weight) != (edges.len(), 1) {
        return Err(Error::ShapeMismatch {
            op: "refine",
            detail: format!(
                "rot {:?}, coarse {:?}, weight {:?} for {} edges",
                tape.shape(rot),
                tape.shape(coarse),
                tape.shape(weight),
                edges.len()
            ),
        });
    }
    let r: Vec<Matrix3<f64>> = tape.value(rot).chunks_exact(9).map(mat_from_row).collect();
    let tc: Vec<Vector3<f64>> = tape.value(coarse).chunks_exact(3).map(vec_from_row).collect();
    let w: Vec<f64> = tape.value(weight).iter().map(|&v| Real::to_f64(v)).collect();
    validate(n, tc.len(), &edges, &w, root)?;
    let sys = solve(&r, &tc, &edges, &w, root)?;
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        let t = tc[i] + block(&sys.x, sys.col[i]);
        out.extend(t.iter().map(|&v| S::from_f64(v)));
    }
    let op = RefineOp {
        rot,
        coarse,
        weight,
        edges,
        r,
        tc,
        w,
        sys,
    };
    Ok(tape.custom(n, 3, out, Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RigidPose, Rotation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ring_edges(gt: &[RigidPose], extra: &[(usize, usize)]) -> Vec<RefineEdge> {
        let n = gt.len();
        let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        pairs.extend_from_slice(extra);
        pairs
            .iter()
            .flat_map(|&(u, v)| [(u, v), (v, u)])
            .map(|(u, v)| RefineEdge {
                u,
                v,
                t_uv: gt[u].relative_to(&gt[v]).t,
            })
            .collect()
    }

    #[test]
    fn noiseless_recovers_gt_up_to_gauge() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt: Vec<RigidPose> = (0..6).map(|_| RigidPose::random(&mut rng, 6.0)).collect();
        let edges = ring_edges(&gt, &[(0, 3), (1, 4)]);
        let r: Vec<Matrix3<f64>> = gt.iter().map(|p| *p.r.matrix()).collect();
        let coarse: Vec<Vector3<f64>> = (0..6)
            .map(|_| Vector3::new(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0), 0.0))
            .collect();
        let w: Vec<f64> = edges.iter().map(|_| rng.gen_range(0.1..2.0)).collect();
        let t = refine_translations(&r, &coarse, &edges, &w, 2).unwrap();
        assert_eq!(t[2], coarse[2]);
        for u in 0..6 {
            for v in 0..6 {
                let a = t[u] - r[u] * r[v].transpose() * t[v];
                let b = gt[u].relative_to(&gt[v]).t;
                assert!((a - b).norm() < 1e-9);
            }
        }
        assert!(weighted_residual(&r, &t, &edges, &w) < 1e-18);
    }

    #[test]
    fn exact_coarse_gives_zero_correction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt: Vec<RigidPose> = (0..5).map(|_| RigidPose::random(&mut rng, 6.0)).collect();
        let edges = ring_edges(&gt, &[]);
        let r: Vec<Matrix3<f64>> = gt.iter().map(|p| *p.r.matrix()).collect();
        let coarse: Vec<Vector3<f64>> = gt.iter().map(|p| p.t).collect();
        let t = refine_translations(&r, &coarse, &edges, &vec![1.0; edges.len()], 0).unwrap();
        for (a, b) in t.iter().zip(&coarse) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn single_node_and_errors() {
        let r = vec![Matrix3::identity()];
        let t = vec![Vector3::new(1.0, 2.0, 3.0)];
        assert_eq!(refine_translations(&r, &t, &[], &[], 0).unwrap(), t);
        let r2 = vec![Matrix3::identity(); 2];
        let t2 = vec![Vector3::zeros(); 2];
        // node 1 is unconstrained
        assert!(matches!(
            refine_translations(&r2, &t2, &[], &[], 0),
            Err(Error::SingularSystem)
        ));
        assert!(refine_translations(&r2, &t, &[], &[], 0).is_err());
    }

    #[test]
    fn tape_matches_plain_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        let rots: Vec<Rotation> = (0..n).map(|_| Rotation::random_euler(&mut rng)).collect();
        let edges: Vec<RefineEdge> = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]
            .iter()
            .flat_map(|&(u, v)| [(u, v), (v, u)])
            .map(|(u, v)| RefineEdge {
                u,
                v,
                t_uv: Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            })
            .collect();
        let r: Vec<Matrix3<f64>> = rots.iter().map(|x| *x.matrix()).collect();
        let tc: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect();
        let w: Vec<f64> = edges.iter().map(|_| rng.gen_range(0.5..1.5)).collect();
        let plain = refine_translations(&r, &tc, &edges, &w, 1).unwrap();
        let mut tape = Tape::<f64>::new();
        let rv: Vec<f64> = rots.iter().flat_map(|x| x.to_row_major()).collect();
        let rot = tape.leaf(n, 9, rv);
        let coarse = tape.leaf(n, 3, tc.iter().flat_map(|v| [v.x, v.y, v.z]).collect());
        let wt = tape.leaf(edges.len(), 1, w.clone());
        let out = refine_on_tape(&mut tape, rot, coarse, wt, edges.into(), 1).unwrap();
        for i in 0..n {
            for k in 0..3 {
                assert_eq!(tape.value(out)[3 * i + k], plain[i][k]);
            }
        }
    }
}
