use mdgd_core::geometry::rotation_error;
use mdgd_core::matching::{overlap_loss_and_grads, train_overlap, OverlapNet, OverlapTrainConfig};
use mdgd_core::nn::{AdamW, AdamWConfig};
use mdgd_core::sync::train::{loss_and_grads, scene_example, SyncTrainConfig, SyncTrainer};
use mdgd_core::sync::{GraphInput, MotionTargets, SyncConfig, SyncNet};
use mdgd_core::synth::{gen_scene, gen_stats_dataset, SceneSpec};

#[test]
fn overlap_net_learns_a_constant() {
    let data: Vec<_> = gen_stats_dataset(512, 1).into_iter().map(|(s, _)| (s, 0.37)).collect();
    let cfg = OverlapTrainConfig {
        epochs: 8,
        lr: 3e-3,
        width: 16,
        ..OverlapTrainConfig::default()
    };
    let (net, _) = train_overlap(&data, &cfg).unwrap();
    let (loss, _) = overlap_loss_and_grads(&net, &data).unwrap();
    assert!(loss < 1e-4, "{loss}");
}

#[test]
fn overlap_loss_decreases_on_a_fixed_batch() {
    for seed in 0..3 {
        let batch = gen_stats_dataset(256, 100 + seed);
        let mut net = OverlapNet::new(32, 5000.0, seed);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 3e-4,
                ..AdamWConfig::default()
            },
            &net.params,
        );
        let mut prev = f64::INFINITY;
        for step in 0..50 {
            let (loss, grads) = overlap_loss_and_grads(&net, &batch).unwrap();
            assert!(loss < prev, "seed {seed} step {step}: {loss} >= {prev}");
            prev = loss;
            opt.step(&mut net.params, &grads, 3e-4).unwrap();
        }
    }
}

fn small_spec(seed: u64, noise: bool) -> SceneSpec {
    SceneSpec {
        n_min: 6,
        n_max: 8,
        k: 3,
        sigma_r_deg: if noise { 5.0 } else { 0.0 },
        sigma_t: if noise { 0.1 } else { 0.0 },
        p_out: if noise { 0.2 } else { 0.0 },
        seed,
        ..SceneSpec::default()
    }
}

fn small_net(seed: u64) -> SyncConfig {
    SyncConfig {
        d: 16,
        iterations: 2,
        init_seed: seed,
        ..SyncConfig::default()
    }
}

/// Mean loss and mean gradient over a fixed set of graphs.
fn full_batch(net: &SyncNet, data: &[(GraphInput, MotionTargets)]) -> (f64, Vec<Vec<f64>>) {
    let mut total = 0.0;
    let mut acc: Vec<Vec<f64>> = Vec::new();
    for (g, tg) in data {
        let ((l, _, _), gr) = loss_and_grads::<f32>(net, g, tg).unwrap();
        total += l;
        if acc.is_empty() {
            acc = gr;
        } else {
            for (a, b) in acc.iter_mut().zip(&gr) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }
    let k = data.len() as f64;
    acc.iter_mut().for_each(|a| a.iter_mut().for_each(|x| *x /= k));
    (total / k, acc)
}

#[test]
fn sync_loss_decreases_on_a_fixed_dataset() {
    for seed in 0..3 {
        let data: Vec<_> = (0..4)
            .map(|i| scene_example(&gen_scene(&small_spec(1000 * seed + i, true)).unwrap(), true).unwrap())
            .collect();
        let mut net = SyncNet::new(small_net(seed));
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 1e-4,
                ..AdamWConfig::default()
            },
            &net.params,
        );
        let mut prev = f64::INFINITY;
        for step in 0..100 {
            let (loss, grads) = full_batch(&net, &data);
            assert!(loss < prev, "seed {seed} step {step}: {loss} >= {prev}");
            prev = loss;
            opt.step(&mut net.params, &grads, 1e-4).unwrap();
        }
    }
}

#[test]
fn noiseless_training_keeps_rotations_exact() {
    let cfg = SyncTrainConfig {
        net: small_net(7),
        scenes: small_spec(0, false),
        pool_size: 40,
        epochs: 1,
        seed: 7,
        ..SyncTrainConfig::default()
    };
    let mut t = SyncTrainer::new(cfg).unwrap();
    t.run(usize::MAX, |_| {}).unwrap();
    let mut sum = 0.0;
    let mut count = 0;
    for i in 0..10 {
        let scene = gen_scene(&small_spec(900_000 + i, false)).unwrap();
        let (g, _) = scene_example(&scene, true).unwrap();
        let poses = t.net.predict(&g).unwrap().poses();
        for u in 0..scene.n() {
            for v in 0..scene.n() {
                if u != v {
                    let p = poses[u].relative_to(&poses[v]);
                    sum += rotation_error(&p.r, &scene.gt_relative(u, v).r);
                    count += 1;
                }
            }
        }
    }
    let mean_deg = (sum / count as f64).to_degrees();
    assert!(mean_deg < 3.0, "{mean_deg}");
}
