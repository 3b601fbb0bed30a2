use mdgd_core::geometry::rotation_error;
use mdgd_core::matching::MatchStats;
use mdgd_core::synth::{gen_scene, sample_stats, SceneSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Scenes with their undirected edge counts, until `target` edges are reached.
fn collect_edges(spec: SceneSpec, target: usize) -> Vec<(mdgd_core::synth::SyntheticScene, usize)> {
    let mut out = Vec::new();
    let mut total = 0;
    let mut seed = 0;
    while total < target {
        let s = gen_scene(&spec.with_seed(seed)).unwrap();
        let k = s.graph.edges.len() / 2;
        total += k;
        out.push((s, k));
        seed += 1;
    }
    out
}

#[test]
fn outlier_fraction_matches_p_out() {
    let spec = SceneSpec {
        p_out: 0.3,
        ..SceneSpec::default()
    };
    let scenes = collect_edges(spec, 10_000);
    let mut n = 0usize;
    let mut out = 0usize;
    for (s, _) in &scenes {
        for (e, &o) in s.graph.edges.iter().zip(&s.outlier) {
            if e.u < e.v {
                n += 1;
                out += o as usize;
            }
        }
    }
    let frac = out as f64 / n as f64;
    assert!(n >= 10_000);
    assert!((frac - 0.3).abs() <= 0.01, "{frac} over {n}");
}

#[test]
fn inlier_rotation_noise_is_within_five_sigma() {
    let spec = SceneSpec::default();
    let scenes = collect_edges(spec, 10_000);
    let bound = 5.0 * spec.sigma_r_deg.to_radians();
    let mut n = 0usize;
    let mut within = 0usize;
    for (s, _) in &scenes {
        for (e, &o) in s.graph.edges.iter().zip(&s.outlier) {
            if e.u < e.v && !o {
                n += 1;
                let gt = s.gt_relative(e.u, e.v);
                within += (rotation_error(&e.m.transform.r, &gt.r) <= bound) as usize;
            }
        }
    }
    assert!(within as f64 >= 0.999 * n as f64, "{within}/{n}");
}

#[test]
fn confidence_attributes_follow_the_label() {
    let s = gen_scene(&SceneSpec::default().with_seed(3)).unwrap();
    for (e, &o) in s.graph.edges.iter().zip(&s.outlier) {
        let m = &e.m;
        if o {
            assert!((0.05..0.45).contains(&m.overlap) && m.icr < 0.15 && m.ipr >= 0.4);
        } else {
            assert!((0.35..0.9).contains(&m.overlap) && m.icr <= 0.6 * m.overlap && m.ipr < 0.5);
        }
    }
}

fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn full_overlap_has_smaller_matching_distance() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let draw = |rng: &mut ChaCha8Rng, o: f64| -> Vec<MatchStats> { (0..1000).map(|_| sample_stats(rng, o)).collect() };
    let hi = draw(&mut rng, 1.0);
    let lo = draw(&mut rng, 0.0);
    let (m1, se1) = mean_and_se(&hi.iter().map(|s| s.mean).collect::<Vec<_>>());
    let (m0, se0) = mean_and_se(&lo.iter().map(|s| s.mean).collect::<Vec<_>>());
    assert!(m0 - m1 > 3.0 * (se0 * se0 + se1 * se1).sqrt(), "{m0} vs {m1}");
    for s in hi.iter().chain(&lo) {
        assert!(s.ecdf.windows(2).all(|w| w[0] <= w[1]));
    }
}

#[test]
fn distance_spread_peaks_at_intermediate_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mean_std = |rng: &mut ChaCha8Rng, o: f64| -> f64 { (0..200).map(|_| sample_stats(rng, o).std).sum::<f64>() / 200.0 };
    let (a, b, c) = (mean_std(&mut rng, 0.02), mean_std(&mut rng, 0.5), mean_std(&mut rng, 0.98));
    assert!(b > a && b > c, "{a} {b} {c}");
}
