use mdgd_core::gradsuite::{motion_loss_case, primitive_cases};
use mdgd_core::nn::gradcheck::GradCheckConfig;

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in 0..20 {
        for c in primitive_cases(seed).unwrap() {
            assert!(c.passes(), "{} seed {}: {:?}", c.name, seed, c.report);
            assert_eq!(c.report.skipped, 0, "{} seed {}", c.name, seed);
        }
    }
}

#[test]
fn narrow_motion_loss_every_entry() {
    for seed in 0..2 {
        let c = motion_loss_case(seed, 4, &GradCheckConfig::default()).unwrap();
        assert!(c.passes(), "seed {seed}: {:?}", c.report);
    }
}

#[test]
fn narrow_motion_loss_sampled_entries_many_seeds() {
    let cfg = GradCheckConfig {
        max_per_leaf: Some(6),
        ..GradCheckConfig::default()
    };
    for seed in 2..22 {
        let c = motion_loss_case(seed, 4, &cfg).unwrap();
        assert!(c.passes(), "seed {seed}: {:?}", c.report);
    }
}

#[test]
fn default_width_motion_loss_sampled_entries() {
    let cfg = GradCheckConfig {
        max_per_leaf: Some(1),
        ..GradCheckConfig::default()
    };
    for seed in 0..2 {
        let c = motion_loss_case(seed, 64, &cfg).unwrap();
        assert!(c.passes(), "seed {seed}: {:?}", c.report);
    }
}
