//! Tile-based α-blending of projected Gaussians into RGB, depth and alpha.
//!
//! Per pixel, Gaussians are composited front to back in ascending view depth
//! (ties broken by index):
//!
//! ```text
//! rgb   = Σ c_i σ_i T_i + background · T_final
//! depth = Σ d_i σ_i T_i
//! alpha = 1 − T_final,        σ_i = opacity_i · K(q_i),  T_i = Π_{j<i} (1 − σ_j)
//! ```
//!
//! `q` is the squared Mahalanobis distance of the pixel center to the splat
//! mean. The kernel `K(q) = exp(−q/2)` is faded to zero over `8 ≤ q ≤ 9` so
//! that the 3σ cutoff does not introduce a jump. Compositing stops after the
//! contribution that brings `T` below [`TRANSMITTANCE_MIN`] or after
//! [`MAX_CONTRIBUTORS`] contributions.

mod backward;

pub use backward::{render_backward, Adjoint};

use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::GaussianCloud;
use crate::geometry::{projection_jacobian, Camera, COV2D_FLOOR};

pub const TILE_SIZE: usize = 16;
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
pub const MAX_CONTRIBUTORS: usize = 1024;
/// Squared Mahalanobis radius of the splat footprint (3σ).
pub const CUTOFF_Q: f64 = 9.0;
pub const FADE_START_Q: f64 = 8.0;

/// Truncated splat kernel and its derivative with respect to `q`.
#[inline]
pub fn splat_kernel(q: f64) -> (f64, f64) {
    if q >= CUTOFF_Q {
        return (0.0, 0.0);
    }
    let g = (-0.5 * q).exp();
    if q <= FADE_START_Q {
        return (g, -0.5 * g);
    }
    let u = (CUTOFF_Q - q) / (CUTOFF_Q - FADE_START_Q);
    let fade = u * u * (3.0 - 2.0 * u);
    let dfade = -6.0 * u * (1.0 - u) / (CUTOFF_Q - FADE_START_Q);
    (g * fade, g * (dfade - 0.5 * fade))
}

/// How raw α-blended depth is mapped into [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DepthNorm {
    /// Per-view min/max over pixels with alpha > 0.5.
    MinMax,
    /// Fixed range, clamped; the background sits on the far plane, so empty pixels map to 1.
    NearFar { near: f64, far: f64 },
}

impl Default for DepthNorm {
    fn default() -> Self {
        DepthNorm::MinMax
    }
}

/// Pixels at or below this alpha count as background for depth.
pub const DEPTH_FOREGROUND_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    pub depth_norm: DepthNorm,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            background: [0.0; 3],
            depth_norm: DepthNorm::MinMax,
        }
    }
}

impl RenderSettings {
    pub fn with_background(background: [f64; 3]) -> Self {
        RenderSettings {
            background,
            ..Default::default()
        }
    }
}

/// A Gaussian after projection to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat {
    pub visible: bool,
    pub mean: [f64; 2],
    /// Inverse 2D covariance as (a, b, c) of [[a, b], [b, c]].
    pub conic: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    /// Clamped color.
    pub color: [f64; 3],
    /// Inclusive tile rectangle (x0, y0, x1, y1).
    pub tiles: [usize; 4],
}

impl Splat {
    const HIDDEN: Splat = Splat {
        visible: false,
        mean: [0.0; 2],
        conic: [0.0; 3],
        depth: 0.0,
        opacity: 0.0,
        color: [0.0; 3],
        tiles: [0; 4],
    };

    #[inline]
    pub fn mahalanobis(&self, px: f64, py: f64) -> f64 {
        let dx = px - self.mean[0];
        let dy = py - self.mean[1];
        self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy
    }
}

/// 2D covariance of Gaussian `i` (floored) together with its camera-space center.
pub(crate) fn splat_covariance(
    cloud: &GaussianCloud,
    camera: &Camera,
    i: usize,
) -> (Vector3<f64>, Matrix2<f64>) {
    let view = camera.to_view(&cloud.position(i));
    let m = cloud.rotation_matrix(i) * nalgebra::Matrix3::from_diagonal(&cloud.scale(i));
    let w = camera.rotation();
    let view_cov = w * (m * m.transpose()) * w.transpose();
    let j = projection_jacobian(camera, &view);
    let cov = j * view_cov * j.transpose() + Matrix2::identity() * COV2D_FLOOR;
    (view, cov)
}

fn tile_grid(camera: &Camera) -> (usize, usize) {
    (
        (camera.width as usize).div_ceil(TILE_SIZE),
        (camera.height as usize).div_ceil(TILE_SIZE),
    )
}

/// Projects every Gaussian of the cloud; hidden splats have `visible == false`.
pub fn project_splats(cloud: &GaussianCloud, camera: &Camera) -> Vec<Splat> {
    let (w, h) = (camera.width as usize, camera.height as usize);
    (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let (view, cov) = splat_covariance(cloud, camera, i);
            if view.z <= camera.near {
                return Splat::HIDDEN;
            }
            let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
            let det = a * c - b * b;
            if !(det > 0.0) {
                return Splat::HIDDEN;
            }
            let mean = camera.view_to_pixel(&view);
            let mid = 0.5 * (a + c);
            let lambda = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = CUTOFF_Q.sqrt() * lambda.sqrt();
            let x0 = (mean.x - radius).ceil().max(0.0);
            let x1 = (mean.x + radius).floor().min(w as f64 - 1.0);
            let y0 = (mean.y - radius).ceil().max(0.0);
            let y1 = (mean.y + radius).floor().min(h as f64 - 1.0);
            if !(x0 <= x1 && y0 <= y1) {
                return Splat::HIDDEN;
            }
            let color = cloud.color(i).map(|v| v.clamp(0.0, 1.0));
            Splat {
                visible: true,
                mean: [mean.x, mean.y],
                conic: [c / det, -b / det, a / det],
                depth: view.z,
                opacity: cloud.opacity(i),
                color,
                tiles: [
                    x0 as usize / TILE_SIZE,
                    y0 as usize / TILE_SIZE,
                    x1 as usize / TILE_SIZE,
                    y1 as usize / TILE_SIZE,
                ],
            }
        })
        .collect()
}

/// Gaussians overlapping one tile, sorted by (view depth, index).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TileBin {
    pub tile: (usize, usize),
    pub entries: Vec<(u32, f64)>,
}

pub fn bin_splats(splats: &[Splat], camera: &Camera) -> Vec<TileBin> {
    let (tx, ty) = tile_grid(camera);
    let mut bins: Vec<TileBin> = (0..tx * ty)
        .map(|t| TileBin {
            tile: (t % tx, t / tx),
            entries: Vec::new(),
        })
        .collect();
    for (i, s) in splats.iter().enumerate() {
        if !s.visible {
            continue;
        }
        for y in s.tiles[1]..=s.tiles[3] {
            for x in s.tiles[0]..=s.tiles[2] {
                bins[y * tx + x].entries.push((i as u32, s.depth));
            }
        }
    }
    bins.par_iter_mut().for_each(|b| {
        b.entries
            .sort_unstable_by(|l, r| l.1.total_cmp(&r.1).then(l.0.cmp(&r.0)))
    });
    bins
}

/// Saved forward state used to replay blending in the backward pass.
#[derive(Debug, Clone)]
pub struct BlendState {
    pub splats: Vec<Splat>,
    pub bins: Vec<TileBin>,
    /// Per pixel: number of bin entries walked up to and including the last contributor.
    pub last_entry: Vec<u32>,
    /// Per pixel: number of Gaussians that contributed.
    pub contributors: Vec<u32>,
    pub final_transmittance: Vec<f64>,
    pub depth_range: DepthRange,
}

/// Which pixels defined the min/max depth normalization, if any.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthRange {
    /// No foreground pixels.
    Empty,
    /// min == max; foreground depth is 0.5.
    Degenerate,
    MinMax {
        min_pixel: usize,
        max_pixel: usize,
        min: f64,
        max: f64,
    },
    Fixed { near: f64, far: f64 },
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// Row-major H×W×3.
    pub rgb: Vec<f64>,
    pub depth_raw: Vec<f64>,
    pub depth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub settings: RenderSettings,
    pub blend_state: BlendState,
}

impl RenderOutput {
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Walks a tile bin for one pixel; calls `visit(entry, gaussian, sigma, T_before, q)`
/// for each contributor and returns (last_entry, contributors, T_final).
#[inline]
pub(crate) fn blend_pixel(
    splats: &[Splat],
    bin: &TileBin,
    px: f64,
    py: f64,
    mut visit: impl FnMut(usize, usize, f64, f64, f64),
) -> (u32, u32, f64) {
    let mut t = 1.0;
    let mut last = 0;
    let mut count = 0u32;
    for (k, &(gi, _)) in bin.entries.iter().enumerate() {
        let s = &splats[gi as usize];
        let q = s.mahalanobis(px, py);
        if q >= CUTOFF_Q {
            continue;
        }
        let sigma = s.opacity * splat_kernel(q).0;
        if sigma <= 0.0 {
            continue;
        }
        visit(k, gi as usize, sigma, t, q);
        t *= 1.0 - sigma;
        count += 1;
        last = k + 1;
        if t < TRANSMITTANCE_MIN || count as usize >= MAX_CONTRIBUTORS {
            break;
        }
    }
    (last as u32, count, t)
}

struct TileImage {
    rgb: Vec<[f64; 3]>,
    depth: Vec<f64>,
    t_final: Vec<f64>,
    last: Vec<u32>,
    count: Vec<u32>,
}

pub(crate) fn tile_pixels(bin: &TileBin, w: usize, h: usize) -> impl Iterator<Item = (usize, usize)> {
    let (tx, ty) = bin.tile;
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    let x1 = (x0 + TILE_SIZE).min(w);
    let y1 = (y0 + TILE_SIZE).min(h);
    (y0..y1).flat_map(move |y| (x0..x1).map(move |x| (x, y)))
}

/// Forward render of RGB, raw and normalized depth, and alpha.
pub fn render(cloud: &GaussianCloud, camera: &Camera, settings: &RenderSettings) -> RenderOutput {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let splats = project_splats(cloud, camera);
    let bins = bin_splats(&splats, camera);
    let bg = settings.background;

    let tiles: Vec<TileImage> = bins
        .par_iter()
        .map(|bin| {
            let n = tile_pixels(bin, w, h).count();
            let mut out = TileImage {
                rgb: Vec::with_capacity(n),
                depth: Vec::with_capacity(n),
                t_final: Vec::with_capacity(n),
                last: Vec::with_capacity(n),
                count: Vec::with_capacity(n),
            };
            for (x, y) in tile_pixels(bin, w, h) {
                let mut c = [0.0; 3];
                let mut d = 0.0;
                let (last, count, t) =
                    blend_pixel(&splats, bin, x as f64, y as f64, |_, gi, sigma, t, _| {
                        let s = &splats[gi];
                        let wgt = sigma * t;
                        c[0] += s.color[0] * wgt;
                        c[1] += s.color[1] * wgt;
                        c[2] += s.color[2] * wgt;
                        d += s.depth * wgt;
                    });
                out.rgb.push([c[0] + bg[0] * t, c[1] + bg[1] * t, c[2] + bg[2] * t]);
                out.depth.push(d);
                out.t_final.push(t);
                out.last.push(last);
                out.count.push(count);
            }
            out
        })
        .collect();

    let mut rgb = vec![0.0; w * h * 3];
    let mut depth_raw = vec![0.0; w * h];
    let mut alpha = vec![0.0; w * h];
    let mut final_transmittance = vec![1.0; w * h];
    let mut last_entry = vec![0; w * h];
    let mut contributors = vec![0; w * h];
    for (bin, tile) in bins.iter().zip(&tiles) {
        for (k, (x, y)) in tile_pixels(bin, w, h).enumerate() {
            let p = y * w + x;
            rgb[3 * p..3 * p + 3].copy_from_slice(&tile.rgb[k]);
            depth_raw[p] = tile.depth[k];
            alpha[p] = 1.0 - tile.t_final[k];
            final_transmittance[p] = tile.t_final[k];
            last_entry[p] = tile.last[k];
            contributors[p] = tile.count[k];
        }
    }

    let (depth, depth_range) = normalize_depth(&depth_raw, &alpha, settings.depth_norm);
    RenderOutput {
        width: w,
        height: h,
        rgb,
        depth_raw,
        depth,
        alpha,
        settings: *settings,
        blend_state: BlendState {
            splats,
            bins,
            last_entry,
            contributors,
            final_transmittance,
            depth_range,
        },
    }
}

/// Near/far mapping with the uncovered fraction of the pixel placed on the far plane.
pub(crate) fn near_far(raw: f64, alpha: f64, near: f64, far: f64) -> f64 {
    ((raw + (1.0 - alpha) * far - near) / (far - near)).clamp(0.0, 1.0)
}

/// Maps raw depth to [0, 1]; empty pixels become 1.
pub fn normalize_depth(raw: &[f64], alpha: &[f64], mode: DepthNorm) -> (Vec<f64>, DepthRange) {
    let fg = |p: usize| alpha[p] > DEPTH_FOREGROUND_ALPHA;
    match mode {
        DepthNorm::NearFar { near, far } => {
            let out = (0..raw.len()).map(|p| near_far(raw[p], alpha[p], near, far)).collect();
            (out, DepthRange::Fixed { near, far })
        }
        DepthNorm::MinMax => {
            let mut range: Option<(usize, usize)> = None;
            for p in (0..raw.len()).filter(|&p| fg(p)) {
                range = Some(match range {
                    None => (p, p),
                    Some((lo, hi)) => (
                        if raw[p] < raw[lo] { p } else { lo },
                        if raw[p] > raw[hi] { p } else { hi },
                    ),
                });
            }
            let Some((lo, hi)) = range else {
                return (vec![1.0; raw.len()], DepthRange::Empty);
            };
            let (min, max) = (raw[lo], raw[hi]);
            if max == min {
                let out = (0..raw.len()).map(|p| if fg(p) { 0.5 } else { 1.0 }).collect();
                return (out, DepthRange::Degenerate);
            }
            let out = (0..raw.len())
                .map(|p| if fg(p) { (raw[p] - min) / (max - min) } else { 1.0 })
                .collect();
            (
                out,
                DepthRange::MinMax {
                    min_pixel: lo,
                    max_pixel: hi,
                    min,
                    max,
                },
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{logit, RawGaussian, SH_C0};
    use approx::assert_relative_eq;

    pub(crate) fn gaussian(pos: [f64; 3], scale: f64, color: [f64; 3], opacity: f64) -> RawGaussian {
        RawGaussian {
            position: pos,
            log_scale: [scale.ln(); 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            sh_dc: color.map(|c| (c - 0.5) / SH_C0),
            opacity_logit: logit(opacity),
        }
    }

    fn camera(size: u32) -> Camera {
        Camera::from_spherical(2.0, 0.0, 0.0, 60.0, Vector3::zeros(), size, size).unwrap()
    }

    #[test]
    fn kernel_is_continuous_at_cutoffs() {
        let (a, _) = splat_kernel(FADE_START_Q - 1e-12);
        let (b, _) = splat_kernel(FADE_START_Q + 1e-12);
        assert_relative_eq!(a, b, epsilon = 1e-10);
        assert!(splat_kernel(CUTOFF_Q - 1e-9).0 < 1e-15);
        assert_eq!(splat_kernel(0.0).0, 1.0);
        // Derivative check inside the fade band.
        let q = 8.4;
        let h = 1e-6;
        let fd = (splat_kernel(q + h).0 - splat_kernel(q - h).0) / (2.0 * h);
        assert_relative_eq!(splat_kernel(q).1, fd, epsilon = 1e-8);
    }

    #[test]
    fn transparent_scene_shows_background() {
        let cloud = GaussianCloud::from_gaussians([gaussian([0.0; 3], 0.1, [1.0, 0.0, 0.0], 1e-12)])
            .unwrap();
        let s = RenderSettings::with_background([0.2, 0.4, 0.6]);
        let out = render(&cloud, &camera(32), &s);
        for p in 0..out.pixel_count() {
            for k in 0..3 {
                assert!((out.rgb[3 * p + k] - s.background[k]).abs() < 1e-10);
            }
            assert!(out.alpha[p] < 1e-10);
            assert_eq!(out.depth[p], 1.0);
        }
    }

    #[test]
    fn single_gaussian_center_pixel() {
        let o = 0.7;
        let c = [0.9, 0.3, 0.1];
        let cloud = GaussianCloud::from_gaussians([gaussian([0.0; 3], 0.05, c, o)]).unwrap();
        let bg = [0.1, 0.2, 0.3];
        let out = render(&cloud, &camera(33), &RenderSettings::with_background(bg));
        // 33 px wide: pixel 16 sits exactly on the principal point.
        let p = 16 * 33 + 16;
        for k in 0..3 {
            assert_relative_eq!(out.rgb[3 * p + k], c[k] * o + bg[k] * (1.0 - o), epsilon = 1e-12);
        }
        assert_relative_eq!(out.depth_raw[p], 2.0 * o, epsilon = 1e-12);
        assert_relative_eq!(out.alpha[p], o, epsilon = 1e-12);
    }

    #[test]
    fn tile_bins_are_sorted() {
        let cloud = GaussianCloud::from_gaussians([
            gaussian([0.0, 0.0, -0.3], 0.2, [1.0; 3], 0.5),
            gaussian([0.0, 0.0, 0.3], 0.2, [1.0; 3], 0.5),
            gaussian([0.0, 0.0, 0.0], 0.2, [1.0; 3], 0.5),
        ])
        .unwrap();
        let cam = camera(64);
        let splats = project_splats(&cloud, &cam);
        for bin in bin_splats(&splats, &cam) {
            for pair in bin.entries.windows(2) {
                assert!(pair[0].1 < pair[1].1 || (pair[0].1 == pair[1].1 && pair[0].0 < pair[1].0));
            }
        }
    }

    #[test]
    fn depth_normalization_cases() {
        let raw = [1.0, 2.0, 3.0, 9.0];
        let alpha = [0.9, 0.9, 0.9, 0.1];
        let (d, r) = normalize_depth(&raw, &alpha, DepthNorm::MinMax);
        assert_eq!(d, vec![0.0, 0.5, 1.0, 1.0]);
        assert!(matches!(r, DepthRange::MinMax { min_pixel: 0, max_pixel: 2, .. }));
        let (d, r) = normalize_depth(&[2.0, 2.0], &[0.9, 0.9], DepthNorm::MinMax);
        assert_eq!(d, vec![0.5, 0.5]);
        assert_eq!(r, DepthRange::Degenerate);
        let (d, r) = normalize_depth(&[2.0], &[0.2], DepthNorm::MinMax);
        assert_eq!(d, vec![1.0]);
        assert_eq!(r, DepthRange::Empty);
        let nf = DepthNorm::NearFar { near: 1.0, far: 3.0 };
        let (d, _) = normalize_depth(&[1.5, 0.0, 0.0, 1.2], &[1.0, 1.0, 0.0, 0.6], nf);
        for (a, b) in d.iter().zip([0.25, 0.0, 1.0, 0.7]) {
            assert!((a - b).abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn opaque_gaussian_depth_ignores_color() {
        let mk = |c: [f64; 3]| {
            GaussianCloud::from_gaussians([
                gaussian([0.0, 0.0, 0.0], 0.3, c, 0.999),
                gaussian([0.0, 0.0, -0.4], 0.3, c, 0.999),
            ])
            .unwrap()
        };
        let a = render(&mk([0.2; 3]), &camera(32), &RenderSettings::default());
        let b = render(&mk([0.9; 3]), &camera(32), &RenderSettings::default());
        assert_eq!(a.depth, b.depth);
    }
}
