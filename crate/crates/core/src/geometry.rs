//! Cameras, projection and covariance math.
//!
//! World frame: +y up, the body faces +z. Azimuth 0 looks at the body front
//! from +z; positive azimuth orbits toward the body's right side (-x), so
//! azimuth 90 is the right-side view. Positive elevation raises the camera.
//!
//! Camera frame follows the pinhole convention x right, y down, z forward.
//! Pixel `i` has its center at coordinate `i`.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plain-data form of a [`Camera`], used for serialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub distance: f64,
    pub elevation: f64,
    pub azimuth: f64,
    pub fovy: f64,
    pub target: [f64; 3],
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

impl CameraSpec {
    pub fn build(&self) -> Result<Camera> {
        Camera::with_clip(
            self.distance,
            self.elevation,
            self.azimuth,
            self.fovy,
            Vector3::from(self.target),
            self.width,
            self.height,
            self.near,
            self.far,
        )
    }
}

/// Isotropic floor added to every projected 2D covariance, in px².
pub const COV2D_FLOOR: f64 = 0.3;

pub const DEFAULT_NEAR: f64 = 0.01;
pub const DEFAULT_FAR: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub distance: f64,
    pub elevation: f64,
    pub azimuth: f64,
    pub fovy: f64,
    pub target: Vector3<f64>,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    position: Vector3<f64>,
    focal: f64,
}

impl Camera {
    /// Builds a look-at camera on a sphere around `target`. Angles in degrees.
    pub fn from_spherical(
        distance: f64,
        elevation: f64,
        azimuth: f64,
        fovy: f64,
        target: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        Self::with_clip(
            distance,
            elevation,
            azimuth,
            fovy,
            target,
            width,
            height,
            DEFAULT_NEAR,
            DEFAULT_FAR,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_clip(
        distance: f64,
        elevation: f64,
        azimuth: f64,
        fovy: f64,
        target: Vector3<f64>,
        width: u32,
        height: u32,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        if !(distance.is_finite() && distance > 0.0) {
            return Err(Error::Parameter(format!(
                "camera distance must be positive, got {distance}"
            )));
        }
        if !(fovy > 0.0 && fovy < 180.0) {
            return Err(Error::Parameter(format!(
                "fovy must lie in (0, 180) degrees, got {fovy}"
            )));
        }
        if !(elevation > -90.0 && elevation < 90.0) {
            return Err(Error::Parameter(format!(
                "elevation must lie in (-90, 90) degrees, got {elevation}"
            )));
        }
        if !azimuth.is_finite() || !target.iter().all(|v| v.is_finite()) {
            return Err(Error::Parameter("camera angles/target must be finite".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Parameter(format!(
                "image size must be at least 1x1, got {width}x{height}"
            )));
        }
        if !(near > 0.0 && near < far) {
            return Err(Error::Parameter(format!(
                "clip planes need 0 < near < far, got near={near} far={far}"
            )));
        }

        let (el, az) = (elevation.to_radians(), azimuth.to_radians());
        let offset = Vector3::new(-az.sin() * el.cos(), el.sin(), az.cos() * el.cos());
        let position = target + offset * distance;
        let forward = -offset;
        let right = forward.cross(&Vector3::y()).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position);
        let focal = 0.5 * height as f64 / (0.5 * fovy.to_radians()).tan();

        Ok(Self {
            distance,
            elevation,
            azimuth,
            fovy,
            target,
            width,
            height,
            near,
            far,
            rotation,
            translation,
            position,
            focal,
        })
    }

    pub fn spec(&self) -> CameraSpec {
        CameraSpec {
            distance: self.distance,
            elevation: self.elevation,
            azimuth: self.azimuth,
            fovy: self.fovy,
            target: self.target.into(),
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
    }

    /// Same pose and intrinsics at another resolution.
    pub fn resized(&self, width: u32, height: u32) -> Result<Self> {
        Self::with_clip(
            self.distance,
            self.elevation,
            self.azimuth,
            self.fovy,
            self.target,
            width,
            height,
            self.near,
            self.far,
        )
    }

    /// World-to-camera rotation (rows: right, down, forward).
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    /// Focal length in pixels (square pixels, so fx = fy).
    pub fn focal(&self) -> f64 {
        self.focal
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        Vector2::new(
            0.5 * (self.width as f64 - 1.0),
            0.5 * (self.height as f64 - 1.0),
        )
    }

    pub fn to_view(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// 4x4 world-to-camera matrix.
    pub fn view_matrix(&self) -> nalgebra::Matrix4<f64> {
        let mut m = nalgebra::Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Pixel coordinates of a camera-space point (z must be positive).
    pub fn view_to_pixel(&self, v: &Vector3<f64>) -> Vector2<f64> {
        let c = self.principal_point();
        Vector2::new(
            self.focal * v.x / v.z + c.x,
            self.focal * v.y / v.z + c.y,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// Distance along the camera forward axis.
    pub view_depth: f64,
    /// False when the point sits at or behind the near plane.
    pub renderable: bool,
}

pub fn project_point(camera: &Camera, p: &Vector3<f64>) -> Projection {
    let v = camera.to_view(p);
    let renderable = v.z > camera.near;
    let pixel = if renderable {
        camera.view_to_pixel(&v)
    } else {
        Vector2::new(f64::NAN, f64::NAN)
    };
    Projection {
        pixel,
        view_depth: v.z,
        renderable,
    }
}

/// Unit quaternion stored as (w, x, y, z).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(pub Vector4<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Rotation(Vector4::new(1.0, 0.0, 0.0, 0.0))
    }

    pub fn from_wxyz(q: [f64; 4]) -> Self {
        Rotation(Vector4::from(q))
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let a = axis.normalize() * (0.5 * angle).sin();
        Rotation(Vector4::new((0.5 * angle).cos(), a.x, a.y, a.z))
    }

    pub fn normalize(&self) -> Self {
        let n = self.0.norm();
        if n > 0.0 {
            Rotation(self.0 / n)
        } else {
            Self::identity()
        }
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&self.normalize().0)
    }
}

/// Rotation matrix of an already-normalized (w, x, y, z) quaternion.
pub fn quat_to_matrix(q: &Vector4<f64>) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Σ = R diag(s²) Rᵀ.
pub fn covariance_from(scale: &Vector3<f64>, rotation: &Rotation) -> Result<Matrix3<f64>> {
    if !scale.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::Parameter(format!(
            "scale components must be positive, got {scale:?}"
        )));
    }
    let m = rotation.to_matrix() * Matrix3::from_diagonal(scale);
    Ok(m * m.transpose())
}

/// Jacobian of the perspective map at a camera-space point.
pub fn projection_jacobian(camera: &Camera, v: &Vector3<f64>) -> Matrix2x3<f64> {
    let f = camera.focal();
    let iz = 1.0 / v.z;
    Matrix2x3::new(
        f * iz,
        0.0,
        -f * v.x * iz * iz,
        0.0,
        f * iz,
        -f * v.y * iz * iz,
    )
}

/// First-order (EWA) screen-space covariance J W Σ Wᵀ Jᵀ plus the isotropic floor.
pub fn project_covariance(
    camera: &Camera,
    mu: &Vector3<f64>,
    sigma: &Matrix3<f64>,
) -> Matrix2<f64> {
    let v = camera.to_view(mu);
    let j = projection_jacobian(camera, &v);
    let w = camera.rotation();
    let view_cov = w * sigma * w.transpose();
    j * view_cov * j.transpose() + Matrix2::identity() * COV2D_FLOOR
}
