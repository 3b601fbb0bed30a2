//! Central finite-difference checks of reverse-mode gradients on an `f64`
//! tape.
//!
//! A perturbation that flips the branch of a ReLU, `|·|` or smooth-L1
//! straddles a kink, where a central difference is meaningless. Each probe
//! compares the tape's kink signature with the unperturbed one and shrinks
//! the step until both sides sit on the same smooth piece; if that never
//! happens the one-sided difference from the matching side is used, and if
//! neither side matches the entry is skipped and counted.

use rand::seq::index::sample;
use rand::Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Shrink factor applied when a probe crosses a kink.
    pub shrink: f64,
    pub max_shrinks: usize,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are compared absolutely.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen entries per leaf.
    pub max_per_leaf: Option<usize>,
    /// Combine the central differences at `h` and `h/2` as
    /// `(4 D(h/2) − D(h)) / 3`, cancelling the `O(h²)` truncation term.
    pub richardson: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            shrink: 0.1,
            max_shrinks: 3,
            abs_floor: 1e-6,
            max_per_leaf: None,
            richardson: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub shrunk: usize,
    pub one_sided: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks d(loss)/d(leaf) for every leaf in `values` (each `(rows, cols,
/// data)`). `build` receives the leaves in order and returns the scalar loss.
pub fn check_leaves<F, R>(
    values: &[(usize, usize, Vec<f64>)],
    cfg: &GradCheckConfig,
    rng: &mut R,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let eval = |vals: &[(usize, usize, Vec<f64>)]| -> Result<(f64, u64)> {
        let mut t = Tape::new();
        let leaves: Vec<Var> = vals.iter().map(|(r, c, v)| t.leaf(*r, *c, v.clone())).collect();
        let loss = build(&mut t, &leaves)?;
        Ok((t.scalar(loss), t.kink_signature()))
    };

    let mut t = Tape::new();
    let leaves: Vec<Var> = values.iter().map(|(r, c, v)| t.leaf(*r, *c, v.clone())).collect();
    let loss = build(&mut t, &leaves)?;
    let base_sig = t.kink_signature();
    let grads = t.backward(loss)?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .zip(values)
        .map(|(&v, (_, _, d))| grads.get_or_zero(v, d.len()))
        .collect();

    let mut report = GradCheckReport::default();
    let mut work: Vec<(usize, usize, Vec<f64>)> = values.to_vec();
    for li in 0..values.len() {
        let n = values[li].2.len();
        let idx: Vec<usize> = match cfg.max_per_leaf {
            Some(k) if k < n => {
                let mut s = sample(rng, n, k).into_vec();
                s.sort_unstable();
                s
            }
            _ => (0..n).collect(),
        };
        for j in idx {
            let x0 = values[li].2[j];
            let mut h = cfg.step;
            let mut numeric = None;
            let mut fallback = None;
            for attempt in 0..=cfg.max_shrinks {
                work[li].2[j] = x0 + h;
                let (fp, sp) = eval(&work)?;
                work[li].2[j] = x0 - h;
                let (fm, sm) = eval(&work)?;
                work[li].2[j] = x0;
                if sp == base_sig && sm == base_sig {
                    let d_h = (fp - fm) / (2.0 * h);
                    let mut d = d_h;
                    if cfg.richardson {
                        work[li].2[j] = x0 + 0.5 * h;
                        let (gp, tp) = eval(&work)?;
                        work[li].2[j] = x0 - 0.5 * h;
                        let (gm, tm) = eval(&work)?;
                        work[li].2[j] = x0;
                        if tp == base_sig && tm == base_sig {
                            d = (4.0 * (gp - gm) / h - d_h) / 3.0;
                        }
                    }
                    numeric = Some(d);
                    if attempt > 0 {
                        report.shrunk += 1;
                    }
                    break;
                }
                if fallback.is_none() || attempt == cfg.max_shrinks {
                    let (f0, _) = eval(&work)?;
                    if sp == base_sig {
                        fallback = Some((fp - f0) / h);
                    } else if sm == base_sig {
                        fallback = Some((f0 - fm) / h);
                    }
                }
                h *= cfg.shrink;
            }
            let num = match (numeric, fallback) {
                (Some(v), _) => v,
                (None, Some(v)) => {
                    report.one_sided += 1;
                    v
                }
                (None, None) => {
                    report.skipped += 1;
                    continue;
                }
            };
            let a = analytic[li][j];
            let e = rel_err(a, num, cfg.abs_floor);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some(Mismatch {
                    leaf: li,
                    index: j,
                    analytic: a,
                    numeric: num,
                    rel_err: e,
                });
            }
        }
    }
    Ok(report)
}

/// [`check_leaves`] over every tensor of a parameter store.
pub fn check_params<F, R>(
    store: &ParamStore,
    cfg: &GradCheckConfig,
    rng: &mut R,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let values: Vec<(usize, usize, Vec<f64>)> = store
        .tensors()
        .iter()
        .map(|t| {
            let (r, c) = t.dims2();
            (r, c, t.data.iter().map(|&x| x as f64).collect())
        })
        .collect();
    check_leaves(&values, cfg, rng, |tape, leaves| build(tape, store, leaves))
}
