use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3, Vector4};
use rayon::prelude::*;

use super::{blend_pixel, splat_covariance, splat_kernel, tile_pixels, DepthRange, RenderOutput};
use crate::cloud::{sh_to_color, CloudGradients, GaussianCloud, SH_C0};
use crate::error::{Error, Result};
use crate::geometry::{projection_jacobian, Camera};

/// Upstream gradients ∂L/∂(rgb, normalized depth, alpha), laid out like [`RenderOutput`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adjoint {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl Adjoint {
    pub fn zeros(width: usize, height: usize) -> Self {
        Adjoint {
            rgb: vec![0.0; width * height * 3],
            depth: vec![0.0; width * height],
            alpha: vec![0.0; width * height],
        }
    }
}

// Per (Gaussian, view) screen-space gradient slots.
const DU: usize = 0;
const DV: usize = 1;
const DCONIC: usize = 2;
const DOPACITY: usize = 5;
const DCOLOR: usize = 6;
const DDEPTH: usize = 9;
const SLOTS: usize = 10;

/// Splits the normalized-depth adjoint into raw-depth and alpha adjoints.
fn raw_depth_adjoint(out: &RenderOutput, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = out.pixel_count();
    let fg = |p: usize| out.alpha[p] > super::DEPTH_FOREGROUND_ALPHA;
    let mut raw = vec![0.0; n];
    let mut to_alpha = vec![0.0; n];
    match out.blend_state.depth_range {
        DepthRange::Empty | DepthRange::Degenerate => {}
        DepthRange::Fixed { near, far } => {
            for p in 0..n {
                let d = super::near_far(out.depth_raw[p], out.alpha[p], near, far);
                if d > 0.0 && d < 1.0 {
                    raw[p] = g[p] / (far - near);
                    to_alpha[p] = -g[p] * far / (far - near);
                }
            }
        }
        DepthRange::MinMax {
            min_pixel,
            max_pixel,
            min,
            max,
        } => {
            // d = (r − r_min) / (r_max − r_min) with the extremal pixels held fixed.
            let span = max - min;
            let (mut to_min, mut to_max) = (0.0, 0.0);
            for p in (0..n).filter(|&p| fg(p)) {
                let d = out.depth[p];
                raw[p] += g[p] / span;
                to_min += g[p] * (d - 1.0) / span;
                to_max -= g[p] * d / span;
            }
            raw[min_pixel] += to_min;
            raw[max_pixel] += to_max;
        }
    }
    (raw, to_alpha)
}

struct Contribution {
    entry: usize,
    gaussian: usize,
    sigma: f64,
    transmittance: f64,
    q: f64,
}

/// Exact gradients of the forward blend with respect to the raw cloud parameters.
///
/// Also records, per Gaussian, the NDC-space norm of ∂L/∂(screen mean) and a hit
/// for every Gaussian rasterized in this view.
pub fn render_backward(
    cloud: &GaussianCloud,
    camera: &Camera,
    out: &RenderOutput,
    adjoint: &Adjoint,
) -> Result<CloudGradients> {
    let (w, h) = (out.width, out.height);
    let n = w * h;
    if camera.width as usize != w || camera.height as usize != h {
        return Err(Error::Shape(format!(
            "camera is {}x{}, render is {w}x{h}",
            camera.width, camera.height
        )));
    }
    if adjoint.rgb.len() != 3 * n || adjoint.depth.len() != n || adjoint.alpha.len() != n {
        return Err(Error::Shape(format!(
            "adjoint sizes rgb={} depth={} alpha={} do not match {w}x{h}",
            adjoint.rgb.len(),
            adjoint.depth.len(),
            adjoint.alpha.len()
        )));
    }
    let state = &out.blend_state;
    if state.splats.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "render has {} splats, cloud has {} Gaussians",
            state.splats.len(),
            cloud.len()
        )));
    }

    let (depth_adj, alpha_from_depth) = raw_depth_adjoint(out, &adjoint.depth);
    let splats = &state.splats;
    let bg = out.settings.background;

    let per_tile: Vec<Vec<[f64; SLOTS]>> = state
        .bins
        .par_iter()
        .map(|bin| {
            let mut acc = vec![[0.0; SLOTS]; bin.entries.len()];
            let mut buf: Vec<Contribution> = Vec::new();
            for (x, y) in tile_pixels(bin, w, h) {
                let p = y * w + x;
                let gc = [adjoint.rgb[3 * p], adjoint.rgb[3 * p + 1], adjoint.rgb[3 * p + 2]];
                let gd = depth_adj[p];
                let ga = adjoint.alpha[p] + alpha_from_depth[p];
                if gc == [0.0; 3] && gd == 0.0 && ga == 0.0 {
                    continue;
                }
                let (px, py) = (x as f64, y as f64);
                buf.clear();
                blend_pixel(splats, bin, px, py, |entry, gaussian, sigma, t, q| {
                    buf.push(Contribution {
                        entry,
                        gaussian,
                        sigma,
                        transmittance: t,
                        q,
                    })
                });
                // Color/depth seen just behind the current contributor, and the
                // transmittance product of everything behind it.
                let mut behind_c = bg;
                let mut behind_d = 0.0;
                let mut behind_t = 1.0;
                for c in buf.iter().rev() {
                    let s = &splats[c.gaussian];
                    let wgt = c.sigma * c.transmittance;
                    let slot = &mut acc[c.entry];
                    for k in 0..3 {
                        slot[DCOLOR + k] += gc[k] * wgt;
                    }
                    slot[DDEPTH] += gd * wgt;
                    let mut dsigma = ga * behind_t + gd * (s.depth - behind_d);
                    for k in 0..3 {
                        dsigma += gc[k] * (s.color[k] - behind_c[k]);
                    }
                    dsigma *= c.transmittance;

                    let (kernel, dkernel) = splat_kernel(c.q);
                    slot[DOPACITY] += dsigma * kernel;
                    let dq = dsigma * s.opacity * dkernel;
                    let dx = px - s.mean[0];
                    let dy = py - s.mean[1];
                    let [a, b, cc] = s.conic;
                    slot[DU] += dq * -2.0 * (a * dx + b * dy);
                    slot[DV] += dq * -2.0 * (b * dx + cc * dy);
                    slot[DCONIC] += dq * dx * dx;
                    slot[DCONIC + 1] += dq * 2.0 * dx * dy;
                    slot[DCONIC + 2] += dq * dy * dy;

                    for k in 0..3 {
                        behind_c[k] = s.color[k] * c.sigma + (1.0 - c.sigma) * behind_c[k];
                    }
                    behind_d = s.depth * c.sigma + (1.0 - c.sigma) * behind_d;
                    behind_t *= 1.0 - c.sigma;
                }
            }
            acc
        })
        .collect();

    // Fixed tile order keeps the reduction deterministic across thread counts.
    let mut screen = vec![[0.0; SLOTS]; cloud.len()];
    for (bin, acc) in state.bins.iter().zip(&per_tile) {
        for (&(gi, _), g) in bin.entries.iter().zip(acc) {
            let dst = &mut screen[gi as usize];
            for k in 0..SLOTS {
                dst[k] += g[k];
            }
        }
    }

    let per_gaussian: Vec<GaussianGrad> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            if !splats[i].visible {
                GaussianGrad::default()
            } else {
                chain_to_params(cloud, camera, i, &screen[i])
            }
        })
        .collect();

    let mut grads = CloudGradients::zeros(cloud.len());
    for (i, g) in per_gaussian.into_iter().enumerate() {
        grads.positions[i] = g.position;
        grads.log_scales[i] = g.log_scale;
        grads.rotations[i] = g.rotation;
        grads.sh_dc[i] = g.sh_dc;
        grads.opacity_logits[i] = g.opacity_logit;
        grads.position_accum[i] = g.position;
        if splats[i].visible {
            let su = screen[i][DU] * 0.5 * w as f64;
            let sv = screen[i][DV] * 0.5 * h as f64;
            grads.grad2d_norm_accum[i] = (su * su + sv * sv).sqrt();
            grads.hits[i] = 1;
        }
    }
    Ok(grads)
}

#[derive(Default)]
struct GaussianGrad {
    position: [f64; 3],
    log_scale: [f64; 3],
    rotation: [f64; 4],
    sh_dc: [f64; 3],
    opacity_logit: f64,
}

/// ∂R/∂q for R = quat_to_matrix(q), q = (w, x, y, z) unit.
fn rotation_grad_to_quat(q: &Vector4<f64>, g: &Matrix3<f64>) -> Vector4<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let gw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let gx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let gy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let gz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Vector4::new(gw, gx, gy, gz)
}

fn chain_to_params(
    cloud: &GaussianCloud,
    camera: &Camera,
    i: usize,
    g: &[f64; SLOTS],
) -> GaussianGrad {
    let f = camera.focal();
    let (view, cov) = splat_covariance(cloud, camera, i);
    let (x, y, z) = (view.x, view.y, view.z);

    // Conic K = Σ₂⁻¹; ∂L/∂Σ₂ = −K G K with G the symmetric gradient of K.
    let conic = cov.try_inverse().unwrap_or_else(Matrix2::zeros);
    let g_conic = Matrix2::new(g[DCONIC], 0.5 * g[DCONIC + 1], 0.5 * g[DCONIC + 1], g[DCONIC + 2]);
    let g_cov2 = -(conic * g_conic * conic);

    let w = camera.rotation();
    let scale = cloud.scale(i);
    let raw_q = Vector4::from(cloud.rotations[i]);
    let q_norm = raw_q.norm();
    let q = if q_norm > 0.0 { raw_q / q_norm } else { Vector4::new(1.0, 0.0, 0.0, 0.0) };
    let rot = crate::geometry::quat_to_matrix(&q);
    let m = rot * Matrix3::from_diagonal(&scale);
    let sigma = m * m.transpose();
    let view_cov = w * sigma * w.transpose();
    let j: Matrix2x3<f64> = projection_jacobian(camera, &view);

    let g_view_cov = j.transpose() * g_cov2 * j;
    let g_j = 2.0 * g_cov2 * j * view_cov;
    let g_sigma = w.transpose() * g_view_cov * w;
    let g_m = 2.0 * g_sigma * m;

    let mut log_scale = [0.0; 3];
    let mut g_rot = Matrix3::zeros();
    for k in 0..3 {
        let mut s = 0.0;
        for r in 0..3 {
            s += g_m[(r, k)] * rot[(r, k)];
            g_rot[(r, k)] = g_m[(r, k)] * scale[k];
        }
        log_scale[k] = s * scale[k];
    }
    let g_qn = rotation_grad_to_quat(&q, &g_rot);
    let g_q = if q_norm > 0.0 { (g_qn - q * q.dot(&g_qn)) / q_norm } else { Vector4::zeros() };

    // Screen mean, depth and Jacobian all depend on the camera-space center.
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let mut g_view = Vector3::new(
        g[DU] * f * iz,
        g[DV] * f * iz,
        -g[DU] * f * x * iz2 - g[DV] * f * y * iz2 + g[DDEPTH],
    );
    g_view.x += g_j[(0, 2)] * -f * iz2;
    g_view.y += g_j[(1, 2)] * -f * iz2;
    g_view.z += g_j[(0, 0)] * -f * iz2
        + g_j[(0, 2)] * 2.0 * f * x * iz2 * iz
        + g_j[(1, 1)] * -f * iz2
        + g_j[(1, 2)] * 2.0 * f * y * iz2 * iz;
    let g_pos = w.transpose() * g_view;

    let opacity = cloud.opacity(i);
    let mut sh_dc = [0.0; 3];
    for k in 0..3 {
        let raw = sh_to_color(cloud.sh_dc[i][k]);
        if raw > 0.0 && raw < 1.0 {
            sh_dc[k] = g[DCOLOR + k] * SH_C0;
        }
    }
    GaussianGrad {
        position: [g_pos.x, g_pos.y, g_pos.z],
        log_scale,
        rotation: [g_q[0], g_q[1], g_q[2], g_q[3]],
        sh_dc,
        opacity_logit: g[DOPACITY] * opacity * (1.0 - opacity),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{logit, RawGaussian};
    use crate::raster::{render, RenderSettings};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn cam(size: u32) -> Camera {
        Camera::from_spherical(2.0, 0.0, 0.0, 60.0, Vector3::zeros(), size, size).unwrap()
    }

    #[test]
    fn zero_adjoint_gives_zero_gradients() {
        let cloud = GaussianCloud::from_gaussians([RawGaussian {
            position: [0.05, -0.02, 0.1],
            log_scale: [-2.0, -2.5, -2.2],
            rotation: [0.9, 0.2, -0.1, 0.3],
            sh_dc: [0.4, -0.2, 0.1],
            opacity_logit: 0.3,
        }])
        .unwrap();
        let c = cam(32);
        let out = render(&cloud, &c, &RenderSettings::default());
        let g = render_backward(&cloud, &c, &out, &Adjoint::zeros(32, 32)).unwrap();
        assert_eq!(g.norm(), 0.0);
        assert!(g.grad2d_norm_accum.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn color_gradient_at_center_is_sigma_times_c0() {
        let o = 0.6;
        let cloud = GaussianCloud::from_gaussians([RawGaussian {
            position: [0.0; 3],
            log_scale: [(0.05f64).ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            sh_dc: [0.3, 0.0, 0.0],
            opacity_logit: logit(o),
        }])
        .unwrap();
        let c = cam(33);
        let out = render(&cloud, &c, &RenderSettings::default());
        let mut adj = Adjoint::zeros(33, 33);
        adj.rgb[3 * (16 * 33 + 16)] = 1.0;
        let g = render_backward(&cloud, &c, &out, &adj).unwrap();
        assert_relative_eq!(g.sh_dc[0][0], o * SH_C0, epsilon = 1e-12);
        assert_eq!(g.sh_dc[0][1], 0.0);
    }

    #[test]
    fn mismatched_adjoint_is_rejected() {
        let cloud = GaussianCloud::from_gaussians([RawGaussian {
            position: [0.0; 3],
            log_scale: [-2.0; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            sh_dc: [0.0; 3],
            opacity_logit: 0.0,
        }])
        .unwrap();
        let c = cam(16);
        let out = render(&cloud, &c, &RenderSettings::default());
        let err = render_backward(&cloud, &c, &out, &Adjoint::zeros(8, 8)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn quaternion_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let q = Vector4::new(0.8, 0.3, -0.4, 0.2).normalize();
        let weights = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let loss = |q: &Vector4<f64>| crate::geometry::quat_to_matrix(q).component_mul(&weights).sum();
        let analytic = rotation_grad_to_quat(&q, &weights);
        for k in 0..4 {
            let mut e = Vector4::zeros();
            e[k] = 1e-6;
            let fd = (loss(&(q + e)) - loss(&(q - e))) / 2e-6;
            assert_relative_eq!(analytic[k], fd, epsilon = 1e-7);
        }
    }
}
