mod common;

use nalgebra::Vector3;
use proptest::prelude::*;
use rand::Rng;
use splatgen_core::cloud::{logit, GaussianCloud, RawGaussian};
use splatgen_core::density::{
    densify_and_prune, prune_by_opacity, prune_by_size, schedule_gate, DensifyConfig, DensifyStats, DensityAction,
};
use splatgen_core::optim::AdamState;
use splatgen_core::raster::RenderSettings;
use splatgen_core::{render, Camera, Error};

fn gaussian(pos: [f64; 3], scale: [f64; 3], opacity: f64) -> RawGaussian {
    RawGaussian {
        position: pos,
        log_scale: scale.map(f64::ln),
        rotation: [1.0, 0.0, 0.0, 0.0],
        sh_dc: [0.3, -0.2, 0.5],
        opacity_logit: logit(opacity),
    }
}

fn hot_stats(n: usize, hot: &[usize]) -> DensifyStats {
    let mut s = DensifyStats::zeros(n);
    for &i in hot {
        s.grad2d_norm_accum[i] = 1.0;
        s.hits[i] = 2;
        s.position_accum[i] = [0.0, 3.0, 0.0];
    }
    s
}

#[test]
fn gate_matches_schedule() {
    let c = DensifyConfig::default();
    let densify: Vec<usize> = (0..4000).filter(|&i| schedule_gate(i, &c) == DensityAction::DensifyPrune).collect();
    let prune: Vec<usize> = (0..4000).filter(|&i| schedule_gate(i, &c) == DensityAction::PruneOnly).collect();
    assert_eq!(densify, (300..=2100).step_by(300).collect::<Vec<_>>());
    assert_eq!(prune, vec![2400, 2700, 3000, 3300]);
    assert_eq!(schedule_gate(600, &c), DensityAction::DensifyPrune);
    assert_eq!(schedule_gate(2250, &c), DensityAction::None);
}

#[test]
fn quiet_cloud_is_unchanged() {
    let cloud = common::random_cloud(&mut common::rng(0), 50, 1.0, (0.01, 0.1));
    let out = densify_and_prune(&cloud, &DensifyStats::zeros(50), &DensifyConfig::default(), 2.0, &mut common::rng(1))
        .unwrap();
    assert_eq!(out.cloud, cloud);
    assert_eq!(out.origin, (0..50).map(Some).collect::<Vec<_>>());
}

#[test]
fn large_hot_gaussian_splits_into_two_smaller_children() {
    let cloud = GaussianCloud::from_gaussians([
        gaussian([0.0; 3], [0.2, 0.1, 0.05], 0.8),
        gaussian([1.0, 0.0, 0.0], [0.001; 3], 0.8),
    ])
    .unwrap();
    let cfg = DensifyConfig::default();
    let out = densify_and_prune(&cloud, &hot_stats(2, &[0]), &cfg, 2.0, &mut common::rng(3)).unwrap();
    assert_eq!(out.cloud.len(), 3);
    assert_eq!(out.split, 1);
    assert_eq!(out.origin, vec![Some(1), None, None]);
    for child in 1..3 {
        let s = out.cloud.scale(child);
        for (k, want) in [0.2, 0.1, 0.05].iter().enumerate() {
            assert!((s[k] - want / 1.6).abs() < 1e-12);
        }
    }
}

#[test]
fn small_hot_gaussian_is_cloned_against_the_gradient() {
    let cloud = GaussianCloud::from_gaussians([gaussian([0.0; 3], [0.005; 3], 0.8)]).unwrap();
    let out = densify_and_prune(&cloud, &hot_stats(1, &[0]), &DensifyConfig::default(), 2.0, &mut common::rng(3))
        .unwrap();
    assert_eq!(out.cloud.len(), 2);
    assert_eq!(out.cloned, 1);
    assert_eq!(out.cloud.positions[0], [0.0; 3]);
    let p = out.cloud.positions[1];
    assert!((p[1] + 0.005).abs() < 1e-12 && p[0] == 0.0 && p[2] == 0.0);
}

#[test]
fn split_children_follow_the_parent_distribution() {
    let cloud = GaussianCloud::from_gaussians([gaussian([0.5, 0.0, 0.0], [0.3, 0.1, 0.1], 0.8)]).unwrap();
    let mut rng = common::rng(9);
    let mut xs = Vec::new();
    for _ in 0..4000 {
        let out = densify_and_prune(&cloud, &hot_stats(1, &[0]), &DensifyConfig::default(), 2.0, &mut rng).unwrap();
        xs.extend(out.cloud.positions.iter().map(|p| p[0]));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    assert!((sd - 0.3).abs() < 0.01, "sd {sd}");
}

#[test]
fn low_opacity_pruning_barely_changes_the_render() {
    let mut rng = common::rng(4);
    let gs: Vec<RawGaussian> = (0..10)
        .map(|i| {
            let op = if i < 3 { 0.004 } else { rng.random_range(0.3..0.9) };
            gaussian([0; 3].map(|_| rng.random_range(-0.4..0.4)), [0.15; 3], op)
        })
        .collect();
    let cloud = GaussianCloud::from_gaussians(gs).unwrap();
    let out = densify_and_prune(&cloud, &DensifyStats::zeros(10), &DensifyConfig::default(), 2.0, &mut rng).unwrap();
    assert_eq!(out.cloud.len(), 7);
    assert_eq!(out.pruned, 3);
    let cam = Camera::from_spherical(3.0, 0.0, 0.0, 40.0, Vector3::zeros(), 64, 64).unwrap();
    let s = RenderSettings::default();
    let p = common::psnr(&render(&cloud, &cam, &s).rgb, &render(&out.cloud, &cam, &s).rgb);
    assert!(p > 40.0, "psnr {p}");
}

#[test]
fn size_pruning() {
    let cloud = GaussianCloud::from_gaussians([
        gaussian([0.0; 3], [0.01, 0.001, 0.001], 0.5),
        gaussian([0.0; 3], [0.008, 0.008, 0.001], 0.5),
    ])
    .unwrap();
    let out = prune_by_size(&cloud, 0.008).unwrap();
    assert_eq!(out.cloud.len(), 1);
    assert_eq!(out.origin, vec![Some(1)]);
    let small = prune_by_size(&out.cloud, 0.008).unwrap();
    assert_eq!(small.cloud, out.cloud);
    assert!(matches!(prune_by_size(&cloud, 0.0005), Err(Error::Collapse(_))));
    assert!(matches!(prune_by_size(&cloud, 0.0), Err(Error::Parameter(_))));
}

#[test]
fn pruning_everything_is_a_collapse() {
    let cloud = GaussianCloud::from_gaussians([gaussian([0.0; 3], [0.01; 3], 0.001)]).unwrap();
    let r = densify_and_prune(&cloud, &DensifyStats::zeros(1), &DensifyConfig::default(), 1.0, &mut common::rng(0));
    assert!(matches!(r, Err(Error::Collapse(_))));
    assert!(matches!(prune_by_opacity(&cloud, 0.005), Err(Error::Collapse(_))));
}

#[test]
fn config_problems_are_reported() {
    let c = DensifyConfig { start_iter: 5000, interval: 0, grad_threshold: -1.0, ..Default::default() };
    assert_eq!(c.problems().len(), 3);
    assert!(DensifyConfig::default().problems().is_empty());
}

fn random_stats(rng: &mut impl Rng, n: usize) -> DensifyStats {
    let mut s = DensifyStats::zeros(n);
    for i in 0..n {
        s.hits[i] = rng.random_range(0..4);
        s.grad2d_norm_accum[i] = rng.random_range(0.0..1e-3) * s.hits[i] as f64;
        s.position_accum[i] = [0; 3].map(|_| rng.random_range(-1.0..1.0));
    }
    s
}

/// Runs the gate over a whole schedule, growing every scale between events.
#[test]
fn full_schedule_leaves_only_small_gaussians() {
    let mut rng = common::rng(7);
    let mut cloud = common::random_cloud(&mut rng, 300, 1.0, (0.002, 0.03));
    let cfg = DensifyConfig::default();
    let extent = cloud.bbox_diagonal();
    let mut adam = AdamState::new(cloud.len());
    for it in 1..=3600 {
        if it % 100 == 0 {
            for s in cloud.log_scales.iter_mut().flatten() {
                *s += rng.random_range(-0.05..0.1);
            }
        }
        let edit = match schedule_gate(it, &cfg) {
            DensityAction::None => continue,
            DensityAction::DensifyPrune => {
                let n = cloud.len();
                let before = n;
                let out = densify_and_prune(&cloud, &random_stats(&mut rng, n), &cfg, extent, &mut rng).unwrap();
                assert!(out.cloud.len() + out.pruned >= before);
                out
            }
            DensityAction::PruneOnly => prune_by_size(&cloud, 0.008).unwrap(),
        };
        adam.remap(&edit.origin);
        cloud = edit.cloud;
        assert_eq!(adam.rows(), cloud.len());
        if it == 3300 {
            break;
        }
    }
    assert!((0..cloud.len()).all(|i| cloud.max_scale(i) <= 0.008));
}

proptest! {
    #[test]
    fn size_prune_is_idempotent_and_bounded(seed in 0u64..1000, thr in 0.02f64..0.2) {
        let cloud = common::random_cloud(&mut common::rng(seed), 40, 1.0, (0.01, 0.3));
        if let Ok(once) = prune_by_size(&cloud, thr) {
            prop_assert!((0..once.cloud.len()).all(|i| once.cloud.max_scale(i) <= thr));
            let twice = prune_by_size(&once.cloud, thr).unwrap();
            prop_assert_eq!(&twice.cloud, &once.cloud);
            for (r, o) in once.origin.iter().enumerate() {
                prop_assert_eq!(once.cloud.get(r), cloud.get(o.unwrap()));
            }
        }
    }

    #[test]
    fn densify_then_prune_counts(seed in 0u64..1000) {
        let mut rng = common::rng(seed);
        let mut cloud = common::random_cloud(&mut rng, 30, 1.0, (0.005, 0.1));
        for o in cloud.opacity_logits.iter_mut().step_by(5) {
            *o = logit(0.001);
        }
        let stats = random_stats(&mut rng, 30);
        let out = densify_and_prune(&cloud, &stats, &DensifyConfig::default(), 1.5, &mut rng).unwrap();
        prop_assert_eq!(out.cloud.len(), 30 + out.cloned + out.split - out.pruned);
        prop_assert_eq!(out.origin.len(), out.cloud.len());
        prop_assert!((0..out.cloud.len()).all(|i| out.cloud.opacity(i) >= 0.005));
    }
}
