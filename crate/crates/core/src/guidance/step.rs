//! One score-distillation step: render, noise, score, and backpropagate both branches.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::provider::{ScoreProvider, ScoreRequest};
use super::{branch_delta, GuidanceConfig, NoiseSchedule};
use crate::body::draw_skeleton;
use crate::cloud::{CloudGradients, GaussianCloud};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::raster::{render, render_backward, Adjoint, RenderOutput, RenderSettings};

pub struct StepContext<'a> {
    pub provider: &'a dyn ScoreProvider,
    pub schedule: &'a NoiseSchedule,
    pub config: &'a GuidanceConfig,
    pub settings: RenderSettings,
    pub prompt: &'a str,
    pub negative_prompt: &'a str,
    /// COCO keypoints in world space; without them the pose map is black.
    pub keypoints: Option<&'a [Vector3<f64>; 17]>,
    /// Overrides the sampled timestep.
    pub fixed_t: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub t: usize,
    /// Root-mean-square of the rgb and depth guidance deltas over the batch.
    pub rgb_delta_rms: f64,
    pub depth_delta_rms: f64,
}

pub struct StepOutcome {
    /// Parameter gradients averaged over the batch; screen-gradient statistics are summed.
    pub grads: CloudGradients,
    pub stats: StepStats,
    pub renders: Vec<RenderOutput>,
}

fn pose_map(keypoints: Option<&[Vector3<f64>; 17]>, camera: &Camera) -> Vec<f64> {
    let n = camera.width as usize * camera.height as usize * 3;
    match keypoints {
        Some(k) => draw_skeleton(k, camera).data.iter().map(|&b| b as f64 / 255.0).collect(),
        None => vec![0.0; n],
    }
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
    }
}

fn scale_params(g: &mut CloudGradients, s: f64) {
    fn rows<const K: usize>(a: &mut [[f64; K]], s: f64) {
        a.iter_mut().flatten().for_each(|x| *x *= s);
    }
    rows(&mut g.positions, s);
    rows(&mut g.log_scales, s);
    rows(&mut g.rotations, s);
    rows(&mut g.sh_dc, s);
    rows(&mut g.position_accum, s);
    g.opacity_logits.iter_mut().for_each(|x| *x *= s);
}

/// Runs one step over a batch of views sharing a single timestep.
pub fn dual_branch_batch<R: Rng + ?Sized>(
    cloud: &GaussianCloud,
    cameras: &[Camera],
    ctx: &StepContext,
    rng: &mut R,
) -> Result<StepOutcome> {
    if cameras.is_empty() {
        return Err(Error::Parameter("a step needs at least one camera".into()));
    }
    let cfg = ctx.config;
    let t = match ctx.fixed_t {
        Some(t) => t,
        None => rng.random_range(cfg.t_min..cfg.t_max),
    };
    if t >= ctx.schedule.steps() {
        return Err(Error::Parameter(format!("timestep {t} outside the {}-step schedule", ctx.schedule.steps())));
    }
    let (alpha, sigma) = (ctx.schedule.alpha(t), ctx.schedule.sigma(t));

    // Noise is drawn sequentially so results do not depend on the thread count.
    let noise: Vec<(Vec<f64>, Vec<f64>)> = cameras
        .iter()
        .map(|c| {
            let px = c.width as usize * c.height as usize;
            let rgb = (0..3 * px).map(|_| rng.sample(StandardNormal)).collect();
            let depth = (0..px).map(|_| rng.sample(StandardNormal)).collect();
            (rgb, depth)
        })
        .collect();

    let renders: Vec<RenderOutput> = cameras.par_iter().map(|c| render(cloud, c, &ctx.settings)).collect();
    let requests: Vec<ScoreRequest> = cameras
        .par_iter()
        .zip(&renders)
        .zip(&noise)
        .map(|((c, out), (er, ed))| ScoreRequest {
            t,
            alpha,
            sigma,
            width: out.width,
            height: out.height,
            x_t: out.rgb.iter().zip(er).map(|(x, e)| alpha * x + sigma * e).collect(),
            d_t: out.depth.iter().zip(ed).map(|(x, e)| alpha * x + sigma * e).collect(),
            pose_map: pose_map(ctx.keypoints, c),
            prompt: ctx.prompt.to_string(),
            negative_prompt: ctx.negative_prompt.to_string(),
            camera: Some(c.clone()),
        })
        .collect();

    let responses = ctx.provider.score(&requests)?;
    if responses.len() != requests.len() {
        return Err(Error::Protocol(format!(
            "provider returned {} responses for {} requests",
            responses.len(),
            requests.len()
        )));
    }
    for (resp, req) in responses.iter().zip(&requests) {
        resp.validate(req)?;
    }

    let per_view: Vec<(CloudGradients, Vec<f64>, Vec<f64>)> = (0..cameras.len())
        .into_par_iter()
        .map(|b| {
            let out = &renders[b];
            let px = out.pixel_count() as f64;
            let mut adj = Adjoint::zeros(out.width, out.height);
            let rgb_delta = branch_delta(&responses[b].rgb, &noise[b].0, t, ctx.schedule, cfg);
            for (a, d) in adj.rgb.iter_mut().zip(&rgb_delta) {
                *a = cfg.lambda_rgb * d / (3.0 * px);
            }
            let depth_delta = if cfg.lambda_depth == 0.0 {
                Vec::new()
            } else {
                let d = branch_delta(&responses[b].depth, &noise[b].1, t, ctx.schedule, cfg);
                for (a, d) in adj.depth.iter_mut().zip(&d) {
                    *a = cfg.lambda_depth * d / px;
                }
                d
            };
            let g = render_backward(cloud, &cameras[b], out, &adj)?;
            Ok((g, rgb_delta, depth_delta))
        })
        .collect::<Result<_>>()?;

    let mut grads = CloudGradients::zeros(cloud.len());
    let (mut rgb_all, mut depth_all) = (Vec::new(), Vec::new());
    for (g, r, d) in &per_view {
        grads.accumulate(g)?;
        rgb_all.extend_from_slice(r);
        depth_all.extend_from_slice(d);
    }
    scale_params(&mut grads, 1.0 / cameras.len() as f64);
    Ok(StepOutcome {
        grads,
        stats: StepStats { t, rgb_delta_rms: rms(&rgb_all), depth_delta_rms: rms(&depth_all) },
        renders,
    })
}

pub fn dual_branch_step<R: Rng + ?Sized>(
    cloud: &GaussianCloud,
    camera: &Camera,
    ctx: &StepContext,
    rng: &mut R,
) -> Result<StepOutcome> {
    dual_branch_batch(cloud, std::slice::from_ref(camera), ctx, rng)
}
