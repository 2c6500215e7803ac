//! Shared oracles for integration and acceptance tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatgen_core::cloud::{logit, GaussianCloud, RawGaussian, PARAMS_PER_GAUSSIAN};
use splatgen_core::raster::{
    normalize_depth, project_splats, splat_kernel, Adjoint, RenderOutput, RenderSettings,
    CUTOFF_Q, MAX_CONTRIBUTORS, TRANSMITTANCE_MIN,
};
use splatgen_core::{render, render_backward, Camera};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random scene of `n` Gaussians inside a cube of half-size `extent` around the origin.
pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64, scale: (f64, f64)) -> GaussianCloud {
    GaussianCloud::from_gaussians((0..n).map(|_| RawGaussian {
        position: [0; 3].map(|_| rng.random_range(-extent..extent)),
        log_scale: [0; 3].map(|_| rng.random_range(scale.0.ln()..scale.1.ln())),
        rotation: [0; 4].map(|_| rng.random_range(-1.0..1.0)),
        sh_dc: [0; 3].map(|_| rng.random_range(-1.4..1.4)),
        opacity_logit: logit(rng.random_range(0.15..0.85)),
    }))
    .unwrap()
}

pub struct BruteImage {
    pub rgb: Vec<f64>,
    pub depth_raw: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// O(N·H·W) blend without tiles: every pixel walks all splats in global depth order.
pub fn brute_force_render(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> BruteImage {
    let splats = project_splats(cloud, camera);
    let mut order: Vec<usize> = (0..splats.len()).filter(|&i| splats[i].visible).collect();
    order.sort_by(|&a, &b| splats[a].depth.total_cmp(&splats[b].depth).then(a.cmp(&b)));
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut rgb = vec![0.0; w * h * 3];
    let mut depth_raw = vec![0.0; w * h];
    let mut alpha = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (mut t, mut n) = (1.0, 0usize);
            let mut c = [0.0; 3];
            let mut d = 0.0;
            for &i in &order {
                let s = &splats[i];
                let q = s.mahalanobis(x as f64, y as f64);
                if q >= CUTOFF_Q {
                    continue;
                }
                let sigma = s.opacity * splat_kernel(q).0;
                if sigma <= 0.0 {
                    continue;
                }
                for k in 0..3 {
                    c[k] += s.color[k] * sigma * t;
                }
                d += s.depth * sigma * t;
                t *= 1.0 - sigma;
                n += 1;
                if t < TRANSMITTANCE_MIN || n >= MAX_CONTRIBUTORS {
                    break;
                }
            }
            for k in 0..3 {
                rgb[3 * p + k] = c[k] + settings.background[k] * t;
            }
            depth_raw[p] = d;
            alpha[p] = 1.0 - t;
        }
    }
    let (depth, _) = normalize_depth(&depth_raw, &alpha, settings.depth_norm);
    BruteImage { rgb, depth_raw, depth, alpha }
}

pub fn random_adjoint(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Adjoint {
    let mut a = Adjoint::zeros(w, h);
    for v in a.rgb.iter_mut().chain(a.depth.iter_mut()).chain(a.alpha.iter_mut()) {
        *v = rng.random_range(-1.0..1.0);
    }
    a
}

pub fn linear_loss(out: &RenderOutput, adj: &Adjoint) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(&out.rgb, &adj.rgb) + dot(&out.depth, &adj.depth) + dot(&out.alpha, &adj.alpha)
}

pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    pub worst: f64,
}

/// Central differences on every raw parameter against `render_backward`.
pub fn gradient_check(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    adj: &Adjoint,
    h: f64,
    rel_tol: f64,
) -> GradCheck {
    let out = render(cloud, camera, settings);
    let grads = render_backward(cloud, camera, &out, adj).unwrap();
    let mut report = GradCheck { checked: 0, passed: 0, worst: 0.0 };
    for i in 0..cloud.len() {
        for k in 0..PARAMS_PER_GAUSSIAN {
            let analytic = grads.get(i, k);
            let mut plus = cloud.clone();
            *plus.param_mut(i, k) += h;
            let mut minus = cloud.clone();
            *minus.param_mut(i, k) -= h;
            let fd = (linear_loss(&render(&plus, camera, settings), adj)
                - linear_loss(&render(&minus, camera, settings), adj))
                / (2.0 * h);
            if analytic.abs().max(fd.abs()) <= 1e-6 {
                continue;
            }
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs());
            report.checked += 1;
            if rel < rel_tol {
                report.passed += 1;
            } else {
                eprintln!("gaussian {i} param {k}: analytic {analytic:.6e} fd {fd:.6e} rel {rel:.3e}");
            }
            report.worst = report.worst.max(rel);
        }
    }
    report
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
