//! Training configuration, camera sampling, Adam and the optimization loop.

pub mod adam;
pub mod dirac;
pub mod train;

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::body::{posed_normalized, BodyModel, PoseParams};
use crate::density::DensifyConfig;
use crate::error::Result;
use crate::geometry::Camera;
use crate::guidance::GuidanceConfig;
use crate::raster::{DepthNorm, RenderSettings};

pub use adam::{adam_step, AdamConfig, AdamState, GROUP_NAMES};
pub use train::{Checkpoint, IterationRecord, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub position: f64,
    pub scale: f64,
    pub rotation: f64,
    pub color: f64,
    pub opacity: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { position: 5e-5, scale: 1e-3, rotation: 1e-2, color: 1.25e-2, opacity: 1e-2 }
    }
}

impl LearningRates {
    pub fn as_array(&self) -> [f64; 5] {
        [self.position, self.scale, self.rotation, self.color, self.opacity]
    }
}

/// Uniform sampling ranges. Angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraRanges {
    pub distance: [f64; 2],
    pub fovy: [f64; 2],
    pub elevation: [f64; 2],
    pub azimuth: [f64; 2],
}

impl Default for CameraRanges {
    fn default() -> Self {
        Self { distance: [1.5, 2.0], fovy: [40.0, 70.0], elevation: [-30.0, 30.0], azimuth: [-180.0, 180.0] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadZoom {
    pub probability: f64,
    /// Zoom is possible for iterations in `[start_iter, end_iter)`.
    pub start_iter: usize,
    pub end_iter: usize,
    pub distance: [f64; 2],
}

impl Default for HeadZoom {
    fn default() -> Self {
        Self { probability: 0.25, start_iter: 1200, end_iter: 3600, distance: [0.4, 0.6] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch: usize,
    pub resolution: u32,
    pub init_count: usize,
    pub lr: LearningRates,
    /// When set, the position rate decays log-linearly to this value at the last iteration.
    pub position_lr_final: Option<f64>,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub camera: CameraRanges,
    pub head_zoom: HeadZoom,
    pub background: [f64; 3],
    pub depth_norm: DepthNorm,
    pub seed: u64,
    pub prompt: String,
    pub negative_prompt: String,
    pub checkpoint_every: usize,
    pub guidance: GuidanceConfig,
    pub densify: DensifyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            iterations: 3600,
            batch: 8,
            resolution: 1024,
            init_count: 100_000,
            lr: LearningRates::default(),
            position_lr_final: None,
            betas: [0.9, 0.99],
            adam_eps: 1e-15,
            camera: CameraRanges::default(),
            head_zoom: HeadZoom::default(),
            background: [1.0; 3],
            depth_norm: DepthNorm::MinMax,
            seed: 0,
            prompt: "a photo of a person".into(),
            negative_prompt: "unrealistic, blurry, low quality, out of focus, ugly, low contrast, dull, dark, \
                              low-resolution, gloomy"
                .into(),
            checkpoint_every: 300,
            guidance: GuidanceConfig::default(),
            densify: DensifyConfig::default(),
        }
    }

    /// Same schedule at 256², batch 2 and 10k initial Gaussians.
    pub fn desk() -> Self {
        Self { batch: 2, resolution: 256, init_count: 10_000, ..Self::full() }
    }

    pub fn profile(name: &str) -> Option<Self> {
        match name {
            "full" => Some(Self::full()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings { background: self.background, depth_norm: self.depth_norm }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lrs: self.lr.as_array(), betas: self.betas, eps: self.adam_eps }
    }

    /// Every violated invariant, prefixed with `prefix` (e.g. `train.`).
    pub fn problems(&self, prefix: &str, schedule_steps: usize) -> Vec<String> {
        let mut p = Vec::new();
        if self.iterations == 0 {
            p.push("iterations must be positive".to_string());
        }
        if self.batch == 0 {
            p.push("batch must be positive".to_string());
        }
        if self.resolution == 0 {
            p.push("resolution must be positive".to_string());
        }
        if self.init_count == 0 {
            p.push("init_count must be positive".to_string());
        }
        if self.checkpoint_every == 0 {
            p.push("checkpoint_every must be positive".to_string());
        }
        for (name, v) in ["position", "scale", "rotation", "color", "opacity"].iter().zip(self.lr.as_array()) {
            if !(v >= 0.0 && v.is_finite()) {
                p.push(format!("lr.{name} = {v} must be a non-negative number"));
            }
        }
        if let Some(f) = self.position_lr_final {
            if !(f > 0.0) || !(self.lr.position > 0.0) {
                p.push("position_lr_final needs positive start and final rates".to_string());
            }
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            p.push(format!("betas = {:?} must lie in [0, 1)", self.betas));
        }
        if !(self.adam_eps > 0.0) {
            p.push("adam_eps must be positive".to_string());
        }
        let ranges = [
            ("camera.distance", self.camera.distance),
            ("camera.fovy", self.camera.fovy),
            ("camera.elevation", self.camera.elevation),
            ("camera.azimuth", self.camera.azimuth),
            ("head_zoom.distance", self.head_zoom.distance),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) {
                p.push(format!("{name} = [{lo}, {hi}] is empty"));
            }
        }
        if !(self.camera.distance[0] > 0.0 && self.head_zoom.distance[0] > 0.0) {
            p.push("camera distances must be positive".to_string());
        }
        if !(self.camera.fovy[0] > 0.0 && self.camera.fovy[1] < 180.0) {
            p.push("camera.fovy must lie in (0, 180)".to_string());
        }
        if !(self.camera.elevation[0] > -90.0 && self.camera.elevation[1] < 90.0) {
            p.push("camera.elevation must lie in (-90, 90)".to_string());
        }
        if !(0.0..=1.0).contains(&self.head_zoom.probability) {
            p.push(format!("head_zoom.probability = {} must lie in [0, 1]", self.head_zoom.probability));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            p.push("background components must lie in [0, 1]".to_string());
        }
        if let DepthNorm::NearFar { near, far } = self.depth_norm {
            if !(near.is_finite() && far.is_finite() && near < far) {
                p.push(format!("depth_norm needs near < far (got {near}, {far})"));
            }
        }
        let mut out: Vec<String> = p.into_iter().map(|m| format!("{prefix}{m}")).collect();
        out.extend(self.guidance.problems(schedule_steps).into_iter().map(|m| format!("{prefix}{m}")));
        out.extend(self.densify.problems().into_iter().map(|m| format!("{prefix}{m}")));
        out
    }

    pub fn position_lr(&self, iteration: usize) -> f64 {
        match self.position_lr_final {
            Some(f) if self.iterations > 0 => {
                let frac = (iteration as f64 / self.iterations as f64).clamp(0.0, 1.0);
                (self.lr.position.ln() * (1.0 - frac) + f.ln() * frac).exp()
            }
            _ => self.lr.position,
        }
    }
}

/// Look-at points for regular and head-zoomed views, in normalized scene units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraTargets {
    pub center: [f64; 3],
    pub head: [f64; 3],
}

impl CameraTargets {
    /// Center of the posed body's bounding box and its head joint.
    pub fn from_body(model: &BodyModel, params: &PoseParams) -> Result<Self> {
        let posed = posed_normalized(model, params)?;
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for v in &posed.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        Ok(Self { center: ((lo + hi) * 0.5).into(), head: model.head_position(&posed).into() })
    }
}

fn lerp(range: [f64; 2], u: f64) -> f64 {
    range[0] + (range[1] - range[0]) * u
}

/// Draws one training camera. Always consumes five uniforms so the stream
/// position does not depend on whether the view was zoomed.
pub fn sample_camera<R: Rng + ?Sized>(
    config: &TrainConfig,
    iteration: usize,
    targets: &CameraTargets,
    rng: &mut R,
) -> Result<Camera> {
    let u: [f64; 5] = std::array::from_fn(|_| rng.random());
    let hz = &config.head_zoom;
    let zoom = iteration >= hz.start_iter && iteration < hz.end_iter && u[0] < hz.probability;
    let (distance, target) = if zoom {
        (lerp(hz.distance, u[1]), targets.head)
    } else {
        (lerp(config.camera.distance, u[1]), targets.center)
    };
    Camera::from_spherical(
        distance,
        lerp(config.camera.elevation, u[2]),
        lerp(config.camera.azimuth, u[3]),
        lerp(config.camera.fovy, u[4]),
        Vector3::from(target),
        config.resolution,
        config.resolution,
    )
}
