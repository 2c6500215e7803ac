//! The learnable Gaussian scene and its gradient buffers.

use nalgebra::{Matrix2, Vector2, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quat_to_matrix, Rotation};

/// Degree-0 spherical-harmonic basis constant.
pub const SH_C0: f64 = 0.282_094_791_773_878_14;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Raw color from a degree-0 SH coefficient, before the [0, 1] clamp.
pub fn sh_to_color(dc: f64) -> f64 {
    0.5 + SH_C0 * dc
}

pub fn color_to_sh(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

/// exp(-½ dᵀ Σ⁻¹ d) for a 2D Gaussian.
pub fn evaluate_gaussian(p: &Vector2<f64>, mean: &Vector2<f64>, cov: &Matrix2<f64>) -> f64 {
    let d = p - mean;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    let q = (cov[(1, 1)] * d.x * d.x - (cov[(0, 1)] + cov[(1, 0)]) * d.x * d.y
        + cov[(0, 0)] * d.y * d.y)
        / det;
    (-0.5 * q).exp()
}

/// One Gaussian in raw (optimizer) parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawGaussian {
    pub position: [f64; 3],
    pub log_scale: [f64; 3],
    pub rotation: [f64; 4],
    pub sh_dc: [f64; 3],
    pub opacity_logit: f64,
}

/// Structure-of-arrays Gaussian cloud.
///
/// Scales are stored as logs and opacities as logits; quaternions are
/// (w, x, y, z) and normalized whenever they are read through the accessors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub sh_dc: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
}

impl GaussianCloud {
    pub fn from_gaussians(items: impl IntoIterator<Item = RawGaussian>) -> Result<Self> {
        let mut cloud = GaussianCloud::default();
        for g in items {
            cloud.push(g);
        }
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn push(&mut self, g: RawGaussian) {
        self.positions.push(g.position);
        self.log_scales.push(g.log_scale);
        self.rotations.push(g.rotation);
        self.sh_dc.push(g.sh_dc);
        self.opacity_logits.push(g.opacity_logit);
    }

    pub fn get(&self, i: usize) -> RawGaussian {
        RawGaussian {
            position: self.positions[i],
            log_scale: self.log_scales[i],
            rotation: self.rotations[i],
            sh_dc: self.sh_dc[i],
            opacity_logit: self.opacity_logits[i],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::Shape("a Gaussian cloud needs at least one Gaussian".into()));
        }
        let lens = [
            ("log_scales", self.log_scales.len()),
            ("rotations", self.rotations.len()),
            ("sh_dc", self.sh_dc.len()),
            ("opacity_logits", self.opacity_logits.len()),
        ];
        for (name, len) in lens {
            if len != n {
                return Err(Error::Shape(format!("{name} has {len} rows, positions has {n}")));
            }
        }
        Ok(())
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.positions[i])
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.log_scales[i]).map(f64::exp)
    }

    pub fn max_scale(&self, i: usize) -> f64 {
        self.log_scales[i].iter().copied().fold(f64::NEG_INFINITY, f64::max).exp()
    }

    pub fn rotation(&self, i: usize) -> Rotation {
        Rotation(Vector4::from(self.rotations[i])).normalize()
    }

    pub fn rotation_matrix(&self, i: usize) -> nalgebra::Matrix3<f64> {
        quat_to_matrix(&self.rotation(i).0)
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    /// Unclamped RGB color; the rasterizer clamps it to [0, 1].
    pub fn color(&self, i: usize) -> [f64; 3] {
        self.sh_dc[i].map(sh_to_color)
    }

    /// Keeps the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        GaussianCloud {
            positions: rows.iter().map(|&i| self.positions[i]).collect(),
            log_scales: rows.iter().map(|&i| self.log_scales[i]).collect(),
            rotations: rows.iter().map(|&i| self.rotations[i]).collect(),
            sh_dc: rows.iter().map(|&i| self.sh_dc[i]).collect(),
            opacity_logits: rows.iter().map(|&i| self.opacity_logits[i]).collect(),
        }
    }

    pub fn extend(&mut self, other: &GaussianCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.sh_dc.extend_from_slice(&other.sh_dc);
        self.opacity_logits.extend_from_slice(&other.opacity_logits);
    }

    /// Diagonal of the axis-aligned bounding box of the centers.
    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &self.positions {
            let p = Vector3::from(*p);
            lo = lo.inf(&p);
            hi = hi.sup(&p);
        }
        (lo, hi)
    }

    /// Flat view of every raw parameter of Gaussian `i`, in the order
    /// position(3), log-scale(3), rotation(4), sh_dc(3), opacity-logit(1).
    pub fn param_mut(&mut self, i: usize, k: usize) -> &mut f64 {
        match k {
            0..=2 => &mut self.positions[i][k],
            3..=5 => &mut self.log_scales[i][k - 3],
            6..=9 => &mut self.rotations[i][k - 6],
            10..=12 => &mut self.sh_dc[i][k - 10],
            13 => &mut self.opacity_logits[i],
            _ => panic!("parameter slot {k} out of range"),
        }
    }
}

pub const PARAMS_PER_GAUSSIAN: usize = 14;

/// Gradients with respect to the raw parameters, plus densification statistics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CloudGradients {
    pub positions: Vec<[f64; 3]>,
    pub log_scales: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub sh_dc: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    /// Sum over views of ‖∂L/∂(screen position)‖ in NDC units.
    pub grad2d_norm_accum: Vec<f64>,
    /// Number of views in which the Gaussian was rasterized.
    pub hits: Vec<u32>,
    /// Sum over steps of ∂L/∂μ, used as the clone direction.
    pub position_accum: Vec<[f64; 3]>,
}

impl CloudGradients {
    pub fn zeros(n: usize) -> Self {
        CloudGradients {
            positions: vec![[0.0; 3]; n],
            log_scales: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            sh_dc: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            grad2d_norm_accum: vec![0.0; n],
            hits: vec![0; n],
            position_accum: vec![[0.0; 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Zeroes everything, statistics included.
    pub fn reset(&mut self) {
        *self = Self::zeros(self.len());
    }

    /// Zeroes parameter gradients but keeps densification statistics.
    pub fn clear_params(&mut self) {
        let n = self.len();
        self.positions = vec![[0.0; 3]; n];
        self.log_scales = vec![[0.0; 3]; n];
        self.rotations = vec![[0.0; 4]; n];
        self.sh_dc = vec![[0.0; 3]; n];
        self.opacity_logits = vec![0.0; n];
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        match k {
            0..=2 => self.positions[i][k],
            3..=5 => self.log_scales[i][k - 3],
            6..=9 => self.rotations[i][k - 6],
            10..=12 => self.sh_dc[i][k - 10],
            13 => self.opacity_logits[i],
            _ => panic!("parameter slot {k} out of range"),
        }
    }

    /// Adds `other` (parameters and statistics) into `self`.
    pub fn accumulate(&mut self, other: &CloudGradients) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Shape(format!(
                "gradient buffers have {} and {} rows",
                self.len(),
                other.len()
            )));
        }
        fn add<const K: usize>(a: &mut [[f64; K]], b: &[[f64; K]]) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..K {
                    x[k] += y[k];
                }
            }
        }
        add(&mut self.positions, &other.positions);
        add(&mut self.log_scales, &other.log_scales);
        add(&mut self.rotations, &other.rotations);
        add(&mut self.sh_dc, &other.sh_dc);
        add(&mut self.position_accum, &other.position_accum);
        for (x, y) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *x += y;
        }
        for (x, y) in self.grad2d_norm_accum.iter_mut().zip(&other.grad2d_norm_accum) {
            *x += y;
        }
        for (x, y) in self.hits.iter_mut().zip(&other.hits) {
            *x += y;
        }
        Ok(())
    }

    /// Euclidean norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.len() {
            for k in 0..PARAMS_PER_GAUSSIAN {
                s += self.get(i, k).powi(2);
            }
        }
        s.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        (0..self.len()).all(|i| (0..PARAMS_PER_GAUSSIAN).all(|k| self.get(i, k).is_finite()))
            && self.grad2d_norm_accum.iter().all(|v| v.is_finite())
    }
}
