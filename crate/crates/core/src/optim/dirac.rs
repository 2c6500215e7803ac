//! Multi-view reconstruction through the exact Dirac denoiser.

use nalgebra::Vector3;
use rand::Rng;

use crate::body::{init_cloud, BodyModel, PoseParams};
use crate::cloud::{color_to_sh, logit, GaussianCloud};
use crate::error::Result;
use crate::geometry::Camera;
use crate::guidance::{DiracProvider, DiracTarget};
use crate::raster::{render, RenderSettings};

/// A body-surface cloud with smoothly varying colors and high opacity.
pub fn painted_reference<R: Rng + ?Sized>(
    model: &BodyModel,
    params: &PoseParams,
    count: usize,
    rng: &mut R,
) -> Result<GaussianCloud> {
    let mut cloud = init_cloud(model, params, count, rng)?;
    for i in 0..cloud.len() {
        let p = cloud.position(i);
        let c = [
            0.5 + 0.35 * (4.0 * p.y + 1.0).sin(),
            0.5 + 0.35 * (5.0 * p.x - 3.0 * p.z).cos(),
            0.5 + 0.35 * (3.0 * p.y + 4.0 * p.z).sin(),
        ];
        cloud.sh_dc[i] = c.map(color_to_sh);
        cloud.opacity_logits[i] = logit(0.9);
        cloud.log_scales[i] = cloud.log_scales[i].map(|s| s + 1.5f64.ln());
    }
    Ok(cloud)
}

/// `per_ring` azimuths at each elevation, starting from `azimuth_offset`.
pub fn orbit_views(
    per_ring: usize,
    elevations: &[f64],
    azimuth_offset: f64,
    distance: f64,
    fovy: f64,
    target: Vector3<f64>,
    resolution: u32,
) -> Result<Vec<Camera>> {
    let mut out = Vec::with_capacity(per_ring * elevations.len());
    for &el in elevations {
        for k in 0..per_ring {
            let az = azimuth_offset + 360.0 * k as f64 / per_ring as f64;
            let az = (az + 180.0).rem_euclid(360.0) - 180.0;
            out.push(Camera::from_spherical(distance, el, az, fovy, target, resolution, resolution)?);
        }
    }
    Ok(out)
}

/// The 16 supervised views: 8 azimuths at elevations −15° and 15°.
pub fn training_views(distance: f64, fovy: f64, target: Vector3<f64>, resolution: u32) -> Result<Vec<Camera>> {
    orbit_views(8, &[-15.0, 15.0], 0.0, distance, fovy, target, resolution)
}

/// Held-out views halfway between the training azimuths, at elevation 0.
pub fn held_out_views(distance: f64, fovy: f64, target: Vector3<f64>, resolution: u32) -> Result<Vec<Camera>> {
    orbit_views(8, &[0.0], 22.5, distance, fovy, target, resolution)
}

/// One Dirac target per view, rendered from `reference`.
pub fn provider_for(reference: &GaussianCloud, views: &[Camera], settings: &RenderSettings) -> DiracProvider {
    DiracProvider::new(
        views
            .iter()
            .map(|c| {
                let out = render(reference, c, settings);
                DiracTarget { camera: Some(c.clone()), rgb: out.rgb, depth: out.depth }
            })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewScores {
    /// Mean over views of per-view rgb PSNR in dB.
    pub psnr: f64,
    /// Mean absolute normalized-depth error over the reference foreground.
    pub depth_mae: f64,
}

pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len().max(1) as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

pub fn evaluate(cloud: &GaussianCloud, reference: &GaussianCloud, views: &[Camera], settings: &RenderSettings) -> ViewScores {
    let (mut p, mut err, mut count) = (0.0, 0.0, 0usize);
    for c in views {
        let a = render(cloud, c, settings);
        let b = render(reference, c, settings);
        p += psnr(&a.rgb, &b.rgb);
        for i in 0..b.depth.len() {
            if b.alpha[i] > 0.5 {
                err += (a.depth[i] - b.depth[i]).abs();
                count += 1;
            }
        }
    }
    ViewScores { psnr: p / views.len().max(1) as f64, depth_mae: err / count.max(1) as f64 }
}
