mod common;

use common::*;
use rand::seq::SliceRandom;
use rand::Rng;
use splatgen_core::cloud::{logit, GaussianCloud, RawGaussian};
use splatgen_core::raster::{DepthNorm, RenderSettings};
use splatgen_core::{render, render_backward, Camera};
use nalgebra::Vector3;

fn cam(size: u32, az: f64, el: f64) -> Camera {
    Camera::from_spherical(2.0, el, az, 50.0, Vector3::zeros(), size, size).unwrap()
}

#[test]
fn gradients_match_central_differences_pooled() {
    let settings = RenderSettings::with_background([0.1, 0.2, 0.3]);
    let (mut checked, mut passed) = (0, 0);
    for seed in 0..10 {
        let mut r = rng(seed);
        let cloud = random_cloud(&mut r, 16, 0.35, (0.04, 0.15));
        let adj = random_adjoint(&mut r, 32, 32);
        let g = gradient_check(&cloud, &cam(32, 20.0 * seed as f64, 10.0), &settings, &adj, 1e-4, 1e-3);
        checked += g.checked;
        passed += g.passed;
    }
    let rate = passed as f64 / checked as f64;
    assert!(checked > 2000);
    assert!(rate >= 0.99, "{passed}/{checked}");
}

#[test]
fn rgb_and_alpha_gradients_are_exact_everywhere() {
    // Without the depth term the loss is smooth, so every parameter must pass.
    let settings = RenderSettings::default();
    for seed in 0..3 {
        let mut r = rng(100 + seed);
        let cloud = random_cloud(&mut r, 12, 0.3, (0.05, 0.15));
        let mut adj = random_adjoint(&mut r, 32, 32);
        adj.depth.iter_mut().for_each(|d| *d = 0.0);
        let g = gradient_check(&cloud, &cam(32, 45.0, -15.0), &settings, &adj, 1e-4, 1e-3);
        assert_eq!(g.passed, g.checked, "worst {}", g.worst);
    }
}

#[test]
fn near_far_depth_gradients_are_exact() {
    // The far-plane background keeps this mapping smooth, unlike the min/max mask.
    let settings = RenderSettings { depth_norm: DepthNorm::NearFar { near: 1.0, far: 3.5 }, ..Default::default() };
    for seed in 0..3 {
        let mut r = rng(200 + seed);
        let cloud = random_cloud(&mut r, 12, 0.3, (0.05, 0.15));
        let mut adj = random_adjoint(&mut r, 32, 32);
        adj.rgb.iter_mut().chain(adj.alpha.iter_mut()).for_each(|a| *a = 0.0);
        let g = gradient_check(&cloud, &cam(32, 30.0, 5.0), &settings, &adj, 1e-4, 1e-3);
        assert!(g.checked > 100);
        assert_eq!(g.passed, g.checked, "worst {}", g.worst);
    }
}

#[test]
fn tiled_matches_brute_force() {
    for seed in 0..20u64 {
        let mut r = rng(1000 + seed);
        let n = r.random_range(1..=1000);
        let cloud = random_cloud(&mut r, n, 0.5, (0.005, 0.08));
        let camera = cam(48 + (seed as u32 % 3) * 8, r.random_range(-180.0..180.0), r.random_range(-30.0..30.0));
        let settings = RenderSettings::with_background([1.0, 1.0, 1.0]);
        let tiled = render(&cloud, &camera, &settings);
        let brute = brute_force_render(&cloud, &camera, &settings);
        let max_diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_diff(&tiled.rgb, &brute.rgb) < 1e-6, "seed {seed}");
        assert!(max_diff(&tiled.alpha, &brute.alpha) < 1e-6);
        assert!(max_diff(&tiled.depth_raw, &brute.depth_raw) < 1e-6);
        assert!(max_diff(&tiled.depth, &brute.depth) < 1e-6);
    }
}

#[test]
fn permutation_invariance_is_bit_exact() {
    let mut r = rng(5);
    let cloud = random_cloud(&mut r, 300, 0.5, (0.01, 0.1));
    let mut order: Vec<usize> = (0..cloud.len()).collect();
    order.shuffle(&mut r);
    let shuffled = cloud.select(&order);
    let camera = cam(64, 30.0, 5.0);
    let s = RenderSettings::default();
    let a = render(&cloud, &camera, &s);
    let b = render(&shuffled, &camera, &s);
    assert_eq!(a.rgb, b.rgb);
    assert_eq!(a.depth, b.depth);
    assert_eq!(a.alpha, b.alpha);

    // Gradients follow the permutation exactly as well.
    let adj = random_adjoint(&mut r, 64, 64);
    let ga = render_backward(&cloud, &camera, &a, &adj).unwrap();
    let gb = render_backward(&shuffled, &camera, &b, &adj).unwrap();
    for (j, &i) in order.iter().enumerate() {
        assert_eq!(ga.positions[i], gb.positions[j]);
        assert_eq!(ga.opacity_logits[i], gb.opacity_logits[j]);
    }
}

#[test]
fn near_transparent_gaussian_changes_nothing() {
    let mut r = rng(6);
    let cloud = random_cloud(&mut r, 200, 0.5, (0.01, 0.1));
    let camera = cam(64, 0.0, 0.0);
    let s = RenderSettings::default();
    let before = render(&cloud, &camera, &s);
    let mut more = cloud.clone();
    more.push(RawGaussian {
        position: [0.0, 0.0, 0.9],
        log_scale: [0.2f64.ln(); 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        sh_dc: [1.0, 1.0, 1.0],
        opacity_logit: logit(5e-8),
    });
    let after = render(&more, &camera, &s);
    for (a, b) in before.rgb.iter().zip(&after.rgb).chain(before.alpha.iter().zip(&after.alpha)) {
        assert!((a - b).abs() < 1e-6);
    }
    for (a, b) in before.depth.iter().zip(&after.depth) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn early_stop_error_is_bounded() {
    // A stack of opaque layers: dropping everything after T < 1e-4 must stay within 1e-4.
    let layers = 40;
    let cloud = GaussianCloud::from_gaussians((0..layers).map(|i| RawGaussian {
        position: [0.0, 0.0, 0.5 - 0.02 * i as f64],
        log_scale: [0.5f64.ln(); 3],
        rotation: [1.0, 0.0, 0.0, 0.0],
        sh_dc: [1.7, 1.7, 1.7],
        opacity_logit: logit(0.4),
    }))
    .unwrap();
    let camera = cam(16, 0.0, 0.0);
    let s = RenderSettings::default();
    let out = render(&cloud, &camera, &s);
    let center = 8 * 16 + 8;
    let sigma = 0.4 * splatgen_core::raster::splat_kernel(
        splatgen_core::raster::project_splats(&cloud, &camera)[0].mahalanobis(8.0, 8.0),
    )
    .0;
    let exact: f64 = 1.0 - (1.0 - sigma).powi(layers);
    assert!((out.alpha[center] - exact).abs() <= 1e-4);
    let c = splatgen_core::cloud::sh_to_color(1.7);
    assert!((out.rgb[3 * center] - c * exact).abs() <= 1e-4 * c);
}

#[test]
fn union_render_equals_concatenated_cloud() {
    let mut r = rng(9);
    let a = random_cloud(&mut r, 50, 0.4, (0.02, 0.1));
    let b = random_cloud(&mut r, 50, 0.4, (0.02, 0.1));
    let mut ab = a.clone();
    ab.extend(&b);
    let mut ba = b.clone();
    ba.extend(&a);
    let camera = cam(40, -70.0, 20.0);
    let s = RenderSettings::default();
    assert_eq!(render(&ab, &camera, &s).rgb, render(&ba, &camera, &s).rgb);
}
