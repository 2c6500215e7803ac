//! The score-provider interface and an exact denoiser for point-mass targets.

use crate::error::{Error, Result};
use crate::geometry::Camera;

/// One noised view. Tensors are row-major `H×W×C` (C = 3 for rgb and pose, 1 for depth).
#[derive(Debug, Clone)]
pub struct ScoreRequest {
    pub t: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub width: usize,
    pub height: usize,
    pub x_t: Vec<f64>,
    pub d_t: Vec<f64>,
    pub pose_map: Vec<f64>,
    pub prompt: String,
    pub negative_prompt: String,
    /// The view that produced this request; never sent over the wire.
    pub camera: Option<Camera>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchEps {
    pub cond: Vec<f64>,
    pub uncond: Vec<f64>,
    pub neg: Vec<f64>,
}

impl BranchEps {
    fn check(&self, branch: &str, len: usize) -> Result<()> {
        for (name, v) in [("eps_cond", &self.cond), ("eps_uncond", &self.uncond), ("eps_neg", &self.neg)] {
            if v.len() != len {
                return Err(Error::ScoreData {
                    branch: branch.into(),
                    detail: format!("{name} has {} values, expected {len}", v.len()),
                });
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::ScoreData {
                    branch: branch.into(),
                    detail: format!("{name}[{i}] = {}", v[i]),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreResponse {
    pub rgb: BranchEps,
    pub depth: BranchEps,
}

impl ScoreResponse {
    /// Shapes must match the request and every value must be finite.
    pub fn validate(&self, request: &ScoreRequest) -> Result<()> {
        let px = request.width * request.height;
        self.rgb.check("rgb", px * 3)?;
        self.depth.check("depth", px)
    }
}

pub trait ScoreProvider: Send + Sync {
    /// Scores a batch of views sharing one timestep; responses come back in request order.
    fn score(&self, requests: &[ScoreRequest]) -> Result<Vec<ScoreResponse>>;
}

#[derive(Debug, Clone)]
pub struct DiracTarget {
    /// Requests are matched to the target rendered from the same camera; a
    /// target without a camera matches any request.
    pub camera: Option<Camera>,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
}

/// Exact ε-predictor for a data distribution concentrated on one image per view:
/// ε(x_t) = (x_t − α·x*)/σ. The unconditional branch points at uniform gray and
/// the negative branch at the inverted target.
#[derive(Debug, Clone)]
pub struct DiracProvider {
    pub targets: Vec<DiracTarget>,
    pub uncond_value: f64,
    pub invert_negative: bool,
}

impl DiracProvider {
    pub fn new(targets: Vec<DiracTarget>) -> Self {
        Self { targets, uncond_value: 0.5, invert_negative: true }
    }

    pub fn single(rgb: Vec<f64>, depth: Vec<f64>) -> Self {
        Self::new(vec![DiracTarget { camera: None, rgb, depth }])
    }

    fn target_for(&self, request: &ScoreRequest) -> Result<&DiracTarget> {
        let same = |a: &Camera, b: &Camera| {
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-9;
            close(a.distance, b.distance)
                && close(a.elevation, b.elevation)
                && close((a.azimuth - b.azimuth).rem_euclid(360.0).min((b.azimuth - a.azimuth).rem_euclid(360.0)), 0.0)
                && close(a.fovy, b.fovy)
                && (a.target - b.target).norm() <= 1e-9
                && a.width == b.width
                && a.height == b.height
        };
        self.targets
            .iter()
            .find(|tg| match (&tg.camera, &request.camera) {
                (None, _) => true,
                (Some(a), Some(b)) => same(a, b),
                (Some(_), None) => false,
            })
            .ok_or_else(|| Error::Parameter("no Dirac target for the requested camera".into()))
    }
}

fn exact_eps(x_t: &[f64], target: impl Iterator<Item = f64>, alpha: f64, sigma: f64) -> Vec<f64> {
    x_t.iter().zip(target).map(|(x, t)| (x - alpha * t) / sigma).collect()
}

impl ScoreProvider for DiracProvider {
    fn score(&self, requests: &[ScoreRequest]) -> Result<Vec<ScoreResponse>> {
        requests
            .iter()
            .map(|r| {
                let tg = self.target_for(r)?;
                if tg.rgb.len() != r.x_t.len() || tg.depth.len() != r.d_t.len() {
                    return Err(Error::Shape("Dirac target resolution differs from the request".into()));
                }
                let (a, s) = (r.alpha, r.sigma);
                let gray = std::iter::repeat(self.uncond_value);
                let neg = |x: &[f64]| -> Vec<f64> {
                    if self.invert_negative {
                        x.iter().map(|v| 1.0 - v).collect()
                    } else {
                        vec![self.uncond_value; x.len()]
                    }
                };
                Ok(ScoreResponse {
                    rgb: BranchEps {
                        cond: exact_eps(&r.x_t, tg.rgb.iter().copied(), a, s),
                        uncond: exact_eps(&r.x_t, gray.clone(), a, s),
                        neg: exact_eps(&r.x_t, neg(&tg.rgb).into_iter(), a, s),
                    },
                    depth: BranchEps {
                        cond: exact_eps(&r.d_t, tg.depth.iter().copied(), a, s),
                        uncond: exact_eps(&r.d_t, gray, a, s),
                        neg: exact_eps(&r.d_t, neg(&tg.depth).into_iter(), a, s),
                    },
                })
            })
            .collect()
    }
}
