//! OpenPose-style skeleton maps with view-dependent face-keypoint culling.

use nalgebra::{Vector2, Vector3};

use super::{posed_normalized, BodyModel, PoseParams};
use crate::error::Result;
use crate::geometry::{project_point, Camera};

/// OpenPose 18-point palette, indexed by OpenPose keypoint id.
pub const OPENPOSE_COLORS: [[u8; 3]; 18] = [
    [255, 0, 0],
    [255, 85, 0],
    [255, 170, 0],
    [255, 255, 0],
    [170, 255, 0],
    [85, 255, 0],
    [0, 255, 0],
    [0, 255, 85],
    [0, 255, 170],
    [0, 255, 255],
    [0, 170, 255],
    [0, 85, 255],
    [0, 0, 255],
    [85, 0, 255],
    [170, 0, 255],
    [255, 0, 255],
    [255, 0, 170],
    [255, 0, 85],
];

/// OpenPose id of each COCO-17 keypoint (OpenPose id 1 is the neck).
pub const COCO_TO_OPENPOSE: [usize; 17] = [0, 15, 14, 17, 16, 5, 2, 6, 3, 7, 4, 11, 8, 12, 9, 13, 10];

/// Limbs as OpenPose id pairs; limb `i` is drawn in color `i`.
pub const LIMBS: [(usize, usize); 17] = [
    (1, 2),
    (1, 5),
    (2, 3),
    (3, 4),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (1, 0),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

const NECK: usize = 1;
const LIMB_INTENSITY: f64 = 0.6;
/// Disc radius and line width in pixels at a 512-pixel canvas.
const REFERENCE_SIZE: f64 = 512.0;
const DISC_RADIUS: f64 = 4.0;
const LINE_WIDTH: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewClass {
    Front,
    /// Camera on the body's right (positive azimuth).
    Right,
    Left,
    Back,
}

impl ViewClass {
    pub fn from_azimuth(azimuth: f64) -> Self {
        let a = (azimuth + 180.0).rem_euclid(360.0) - 180.0;
        if a.abs() <= 60.0 {
            ViewClass::Front
        } else if a > 60.0 && a <= 120.0 {
            ViewClass::Right
        } else if (-120.0..-60.0).contains(&a) {
            ViewClass::Left
        } else {
            ViewClass::Back
        }
    }

    /// Which COCO keypoints are drawn in this view.
    pub fn visible(self) -> [bool; 17] {
        let mut v = [true; 17];
        let hide: &[usize] = match self {
            ViewClass::Front => &[],
            ViewClass::Right => &[1, 3],
            ViewClass::Left => &[2, 4],
            ViewClass::Back => &[0, 1, 2, 3, 4],
        };
        for &i in hide {
            v[i] = false;
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB8.
    pub data: Vec<u8>,
}

impl SkeletonImage {
    fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0; width * height * 3] }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn count_color(&self, color: [u8; 3]) -> usize {
        self.data.chunks_exact(3).filter(|p| *p == color).count()
    }

    /// Pixel-space centroid of all pixels of `color`.
    pub fn centroid(&self, color: [u8; 3]) -> Option<Vector2<f64>> {
        let mut sum = Vector2::zeros();
        let mut n = 0.0;
        for (i, p) in self.data.chunks_exact(3).enumerate() {
            if p == color {
                sum += Vector2::new((i % self.width) as f64, (i / self.width) as f64);
                n += 1.0;
            }
        }
        (n > 0.0).then(|| sum / n)
    }

    /// Paints pixels whose center lies within `radius` of the segment `a`–`b`.
    fn fill_capsule(&mut self, a: Vector2<f64>, b: Vector2<f64>, radius: f64, color: [u8; 3]) {
        let lo = a.inf(&b).add_scalar(-radius);
        let hi = a.sup(&b).add_scalar(radius);
        let x0 = lo.x.ceil().max(0.0) as usize;
        let y0 = lo.y.ceil().max(0.0) as usize;
        let x1 = (hi.x.floor() as i64).min(self.width as i64 - 1);
        let y1 = (hi.y.floor() as i64).min(self.height as i64 - 1);
        if x1 < 0 || y1 < 0 {
            return;
        }
        let ab = b - a;
        let len2 = ab.norm_squared();
        for y in y0..=y1 as usize {
            for x in x0..=x1 as usize {
                let p = Vector2::new(x as f64, y as f64);
                let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                if (p - (a + ab * t)).norm_squared() <= radius * radius {
                    let i = 3 * (y * self.width + x);
                    self.data[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }
}

/// Draws COCO keypoints (world space) as seen from `camera`, culled by the
/// camera's azimuth class. Limbs first, then discs on top.
pub fn draw_skeleton(keypoints: &[Vector3<f64>; 17], camera: &Camera) -> SkeletonImage {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut img = SkeletonImage::new(w, h);
    let s = w.min(h) as f64 / REFERENCE_SIZE;
    let radius = (DISC_RADIUS * s).max(1.0);
    let half_width = (LINE_WIDTH * s / 2.0).max(0.5);
    let visible = ViewClass::from_azimuth(camera.azimuth).visible();

    let mut op: [Option<Vector2<f64>>; 18] = [None; 18];
    for (c, kp) in keypoints.iter().enumerate() {
        let proj = project_point(camera, kp);
        if visible[c] && proj.renderable {
            op[COCO_TO_OPENPOSE[c]] = Some(proj.pixel);
        }
    }
    let (ls, rs) = (op[5], op[2]);
    op[NECK] = ls.zip(rs).map(|(a, b)| (a + b) / 2.0);

    for (i, &(a, b)) in LIMBS.iter().enumerate() {
        if let (Some(pa), Some(pb)) = (op[a], op[b]) {
            let color = OPENPOSE_COLORS[i].map(|c| (c as f64 * LIMB_INTENSITY).round() as u8);
            img.fill_capsule(pa, pb, half_width, color);
        }
    }
    for (id, p) in op.iter().enumerate() {
        if let (Some(p), false) = (p, id == NECK) {
            img.fill_capsule(*p, *p, radius, OPENPOSE_COLORS[id]);
        }
    }
    img
}

pub fn render_skeleton(model: &BodyModel, params: &PoseParams, camera: &Camera) -> Result<SkeletonImage> {
    let posed = posed_normalized(model, params)?;
    Ok(draw_skeleton(&model.coco_keypoints(&posed), camera))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn view_classes() {
        use ViewClass::*;
        for (az, c) in [
            (0.0, Front),
            (60.0, Front),
            (-60.0, Front),
            (60.5, Right),
            (120.0, Right),
            (-120.0, Left),
            (-60.5, Left),
            (120.5, Back),
            (180.0, Back),
            (-180.0, Back),
            (430.0, Right),
        ] {
            assert_eq!(ViewClass::from_azimuth(az), c, "azimuth {az}");
        }
    }

    #[test]
    fn limb_colors_never_equal_disc_colors() {
        for c in OPENPOSE_COLORS {
            let dim = c.map(|v| (v as f64 * LIMB_INTENSITY).round() as u8);
            assert!(!OPENPOSE_COLORS.contains(&dim));
        }
    }
}
