//! Multiview evaluation on the relative poses of every ordered pair.

use mdgd_core::geometry::{rotation_error, translation_error, RigidPose};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RE_BUCKETS_DEG: [f64; 5] = [3.0, 5.0, 10.0, 30.0, 45.0];
pub const TE_BUCKETS: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 0.75];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalThresholds {
    /// Translation threshold (meters) of registration recall.
    pub te: f64,
    /// Rotation gate (degrees) of registration recall.
    pub re_gate_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub u: usize,
    pub v: usize,
    pub re_deg: f64,
    pub te: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub threshold: f64,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_poses: usize,
    pub thresholds: EvalThresholds,
    /// Fraction of pairs passing both the translation and rotation gates.
    pub rr: f64,
    /// Fraction of pairs passing the translation gate alone.
    pub rr_translation_only: f64,
    pub mean_re_deg: f64,
    pub median_re_deg: f64,
    pub mean_te: f64,
    pub median_te: f64,
    /// Fraction of pairs with error at or below each threshold.
    pub re_ecdf: Vec<Bucket>,
    pub te_ecdf: Vec<Bucket>,
    pub pairs: Vec<PairError>,
}

/// Median with the two middle values averaged for even counts.
pub fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

fn ecdf(x: &[f64], thresholds: &[f64]) -> Vec<Bucket> {
    thresholds
        .iter()
        .map(|&t| Bucket {
            threshold: t,
            fraction: if x.is_empty() {
                0.0
            } else {
                x.iter().filter(|&&v| v <= t).count() as f64 / x.len() as f64
            },
        })
        .collect()
}

/// Compares `T_u ∘ T_v⁻¹` of predictions and ground truth for all ordered
/// pairs `u ≠ v`.
pub fn evaluate(pred: &[RigidPose], gt: &[RigidPose], th: EvalThresholds) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::CountMismatch {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    let n = gt.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let p = pred[u].relative_to(&pred[v]);
            let g = gt[u].relative_to(&gt[v]);
            pairs.push(PairError {
                u,
                v,
                re_deg: rotation_error(&p.r, &g.r).to_degrees(),
                te: translation_error(&p.t, &g.t),
            });
        }
    }
    let re: Vec<f64> = pairs.iter().map(|p| p.re_deg).collect();
    let te: Vec<f64> = pairs.iter().map(|p| p.te).collect();
    let frac = |f: &dyn Fn(&PairError) -> bool| {
        if pairs.is_empty() {
            0.0
        } else {
            pairs.iter().filter(|p| f(p)).count() as f64 / pairs.len() as f64
        }
    };
    Ok(EvalReport {
        n_poses: n,
        thresholds: th,
        rr: frac(&|p| p.te < th.te && p.re_deg < th.re_gate_deg),
        rr_translation_only: frac(&|p| p.te < th.te),
        mean_re_deg: mean(&re),
        median_re_deg: median(&re),
        mean_te: mean(&te),
        median_te: median(&te),
        re_ecdf: ecdf(&re, &RE_BUCKETS_DEG),
        te_ecdf: ecdf(&te, &TE_BUCKETS),
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use mdgd_core::geometry::Rotation;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TH: EvalThresholds = EvalThresholds {
        te: 0.2,
        re_gate_deg: 15.0,
    };

    fn random_poses(seed: u64, n: usize) -> Vec<RigidPose> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| RigidPose::random(&mut rng, 6.0)).collect()
    }

    #[test]
    fn perfect_prediction() {
        let gt = random_poses(1, 5);
        let r = evaluate(&gt, &gt, TH).unwrap();
        assert_eq!(r.pairs.len(), 20);
        assert_eq!(r.rr, 1.0);
        assert!(r.mean_re_deg < 1e-6 && r.mean_te < 1e-9);
        assert!(r.re_ecdf.iter().chain(&r.te_ecdf).all(|b| b.fraction == 1.0));
    }

    #[test]
    fn one_bad_pose_fails_every_pair_touching_it() {
        let gt = random_poses(2, 3);
        let mut pred = gt.clone();
        pred[2] = RigidPose::new(
            Rotation::from_axis_angle(&Vector3::x(), 0.5).compose(&gt[2].r),
            gt[2].t + Vector3::new(1.0, 0.0, 0.0),
        );
        let r = evaluate(&pred, &gt, TH).unwrap();
        // 6 ordered pairs, 4 of which touch node 2
        assert_eq!(r.rr, 2.0 / 6.0);
        for p in &r.pairs {
            assert_eq!(p.u == 2 || p.v == 2, p.te > 0.2);
        }
    }

    #[test]
    fn rotation_gate_only_affects_gated_recall() {
        let gt = vec![RigidPose::identity(); 2];
        let pred = vec![
            RigidPose::identity(),
            RigidPose::new(Rotation::from_axis_angle(&Vector3::z(), 20f64.to_radians()), Vector3::zeros()),
        ];
        let r = evaluate(&pred, &gt, TH).unwrap();
        assert_eq!(r.rr, 0.0);
        assert_eq!(r.rr_translation_only, 1.0);
        assert!((r.mean_re_deg - 20.0).abs() < 1e-9);
        assert_eq!(r.re_ecdf.iter().map(|b| b.fraction).collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn count_mismatch() {
        let gt = random_poses(3, 3);
        assert!(matches!(
            evaluate(&gt[..2], &gt, TH),
            Err(Error::CountMismatch { pred: 2, gt: 3 })
        ));
    }

    #[test]
    fn global_frame_change_leaves_report_unchanged() {
        let gt = random_poses(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pred: Vec<RigidPose> = gt
            .iter()
            .map(|p| p.compose(&RigidPose::random(&mut rng, 0.1)))
            .collect();
        let g = RigidPose::random(&mut rng, 10.0);
        let a = evaluate(&pred, &gt, TH).unwrap();
        let moved: Vec<RigidPose> = pred.iter().map(|p| p.compose(&g)).collect();
        let b = evaluate(&moved, &gt, TH).unwrap();
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            assert!((x.re_deg - y.re_deg).abs() < 1e-9 && (x.te - y.te).abs() < 1e-9);
        }
        assert_eq!(a.rr, b.rr);
    }

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[]), 0.0);
    }

    #[test]
    fn ecdf_nondecreasing() {
        let gt = random_poses(5, 8);
        let pred = random_poses(6, 8);
        let r = evaluate(&pred, &gt, TH).unwrap();
        for e in [&r.re_ecdf, &r.te_ecdf] {
            assert!(e.windows(2).all(|w| w[0].fraction <= w[1].fraction));
        }
        assert!((0.0..=1.0).contains(&r.rr));
    }
}
