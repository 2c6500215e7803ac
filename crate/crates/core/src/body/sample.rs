//! Area-uniform surface sampling and the Gaussian initialization built on it.

use nalgebra::Vector3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::{normalization, skin, BodyModel, PoseParams};
use crate::cloud::{logit, GaussianCloud};
use crate::error::{Error, Result};

/// Opacity of freshly initialized Gaussians.
pub const INIT_OPACITY: f64 = 0.1;
const NN_SUBSAMPLE: usize = 1000;
/// Scale used when a single point leaves the nearest-neighbour distance undefined.
const LONE_POINT_SCALE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct SurfaceSamples {
    pub points: Vec<Vector3<f64>>,
    /// Face each point was drawn from.
    pub faces: Vec<u32>,
    pub nn_dist: f64,
}

pub fn triangle_area(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

/// Draws `count` points with face probability ∝ area and uniform barycentrics.
pub fn sample_triangles<R: Rng + ?Sized>(
    vertices: &[Vector3<f64>],
    faces: &[[u32; 3]],
    count: usize,
    rng: &mut R,
) -> Result<SurfaceSamples> {
    if count == 0 {
        return Err(Error::Parameter("sample count must be at least 1".into()));
    }
    let corners = |f: &[u32; 3]| f.map(|i| vertices[i as usize]);
    let areas: Vec<f64> = faces
        .iter()
        .map(|f| {
            let [a, b, c] = corners(f);
            triangle_area(&a, &b, &c)
        })
        .collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Model("mesh has zero total surface area".into()));
    }
    let pick = WeightedIndex::new(&areas).map_err(|e| Error::Model(e.to_string()))?;
    let mut points = Vec::with_capacity(count);
    let mut chosen = Vec::with_capacity(count);
    for _ in 0..count {
        let f = pick.sample(rng);
        let [a, b, c] = corners(&faces[f]);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let s = r1.sqrt();
        points.push(a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2));
        chosen.push(f as u32);
    }
    let nn_dist = mean_nn_distance(&points);
    Ok(SurfaceSamples { points, faces: chosen, nn_dist })
}

/// Mean distance from the first `min(1000, n)` points to their nearest other point.
/// Points are random draws, so the prefix is an unbiased subsample.
pub fn mean_nn_distance(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return f64::NAN;
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].x.total_cmp(&points[b].x));
    let xs: Vec<f64> = order.iter().map(|&i| points[i].x).collect();
    let queries = points.len().min(NN_SUBSAMPLE);
    let mut sum = 0.0;
    for q in 0..queries {
        let p = points[q];
        let start = xs.partition_point(|&x| x < p.x);
        let mut best2 = f64::INFINITY;
        // Walk outward in x until the slab is wider than the best distance.
        let mut scan = |j: usize| -> bool {
            let dx = xs[j] - p.x;
            if dx * dx > best2 {
                return false;
            }
            if order[j] != q {
                best2 = best2.min((points[order[j]] - p).norm_squared());
            }
            true
        };
        for j in start..xs.len() {
            if !scan(j) {
                break;
            }
        }
        for j in (0..start).rev() {
            if !scan(j) {
                break;
            }
        }
        sum += best2.sqrt();
    }
    sum / queries as f64
}

/// Samples the posed body surface in normalized scene units.
pub fn sample_surface<R: Rng + ?Sized>(
    model: &BodyModel,
    params: &PoseParams,
    count: usize,
    rng: &mut R,
) -> Result<SurfaceSamples> {
    let posed = skin(model, params)?;
    let (scale, offset) = normalization(&posed)?;
    let posed = posed.transformed(scale, &offset);
    sample_triangles(&posed.vertices, &model.faces, count, rng)
}

/// Gray, isotropic, unrotated Gaussians of opacity 0.1 on the body surface.
pub fn init_cloud<R: Rng + ?Sized>(
    model: &BodyModel,
    params: &PoseParams,
    count: usize,
    rng: &mut R,
) -> Result<GaussianCloud> {
    let s = sample_surface(model, params, count, rng)?;
    let scale = if s.nn_dist.is_finite() && s.nn_dist > 0.0 { s.nn_dist } else { LONE_POINT_SCALE };
    let n = s.points.len();
    Ok(GaussianCloud {
        positions: s.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        log_scales: vec![[scale.ln(); 3]; n],
        rotations: vec![[1.0, 0.0, 0.0, 0.0]; n],
        sh_dc: vec![[0.0; 3]; n],
        opacity_logits: vec![logit(INIT_OPACITY); n],
    })
}
