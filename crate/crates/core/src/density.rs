//! Adaptive density control: clone, split, opacity pruning and the size-based prune-only phase.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cloud::{CloudGradients, GaussianCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensifyConfig {
    pub start_iter: usize,
    pub end_iter: usize,
    pub interval: usize,
    pub prune_phase_start: usize,
    pub prune_phase_end: usize,
    pub prune_phase_interval: usize,
    /// Mean NDC-space position-gradient norm above which a Gaussian is densified.
    pub grad_threshold: f64,
    /// Fraction of the scene extent separating clones (at or below) from splits.
    pub scale_split_threshold: f64,
    pub split_factor: f64,
    pub min_opacity: f64,
    /// Absolute max-scale bound used by the prune-only phase.
    pub size_prune_threshold: f64,
    pub opacity_reset: bool,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            start_iter: 300,
            end_iter: 2100,
            interval: 300,
            prune_phase_start: 2400,
            prune_phase_end: 3300,
            prune_phase_interval: 300,
            grad_threshold: 2e-4,
            scale_split_threshold: 0.01,
            split_factor: 1.6,
            min_opacity: 0.005,
            size_prune_threshold: 0.008,
            opacity_reset: false,
        }
    }
}

impl DensifyConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if self.start_iter > self.end_iter {
            p.push("densify.start_iter must not exceed densify.end_iter".into());
        }
        if self.prune_phase_start > self.prune_phase_end {
            p.push("densify.prune_phase_start must not exceed densify.prune_phase_end".into());
        }
        if self.interval == 0 || self.prune_phase_interval == 0 {
            p.push("densify intervals must be positive".into());
        }
        for (name, v) in [
            ("grad_threshold", self.grad_threshold),
            ("scale_split_threshold", self.scale_split_threshold),
            ("min_opacity", self.min_opacity),
            ("size_prune_threshold", self.size_prune_threshold),
        ] {
            if !(v > 0.0) {
                p.push(format!("densify.{name} = {v} must be positive"));
            }
        }
        if !(self.split_factor > 1.0) {
            p.push(format!("densify.split_factor = {} must exceed 1", self.split_factor));
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityAction {
    None,
    DensifyPrune,
    PruneOnly,
}

pub fn schedule_gate(iteration: usize, config: &DensifyConfig) -> DensityAction {
    let on = |it: usize, start: usize, end: usize, every: usize| {
        every > 0 && it >= start && it <= end && (it - start) % every == 0
    };
    if on(iteration, config.start_iter, config.end_iter, config.interval) {
        DensityAction::DensifyPrune
    } else if on(iteration, config.prune_phase_start, config.prune_phase_end, config.prune_phase_interval) {
        DensityAction::PruneOnly
    } else {
        DensityAction::None
    }
}

/// Per-Gaussian statistics gathered between density events.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DensifyStats {
    pub grad2d_norm_accum: Vec<f64>,
    pub hits: Vec<u32>,
    pub position_accum: Vec<[f64; 3]>,
}

impl DensifyStats {
    pub fn zeros(n: usize) -> Self {
        Self { grad2d_norm_accum: vec![0.0; n], hits: vec![0; n], position_accum: vec![[0.0; 3]; n] }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn record(&mut self, grads: &CloudGradients) -> Result<()> {
        if grads.len() != self.len() {
            return Err(Error::Shape(format!("statistics have {} rows, gradients {}", self.len(), grads.len())));
        }
        for i in 0..self.len() {
            self.grad2d_norm_accum[i] += grads.grad2d_norm_accum[i];
            self.hits[i] += grads.hits[i];
            for k in 0..3 {
                self.position_accum[i][k] += grads.positions[i][k];
            }
        }
        Ok(())
    }

    /// Mean screen-gradient norm over the views that saw the Gaussian.
    pub fn mean_grad(&self, i: usize) -> f64 {
        if self.hits[i] == 0 {
            0.0
        } else {
            self.grad2d_norm_accum[i] / self.hits[i] as f64
        }
    }
}

/// Where each row of an edited cloud came from: `Some(old_row)` for survivors,
/// `None` for newly created Gaussians.
pub type RowOrigin = Vec<Option<usize>>;

#[derive(Debug, Clone)]
pub struct DensifyOutcome {
    pub cloud: GaussianCloud,
    pub origin: RowOrigin,
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

fn keep_rows(cloud: &GaussianCloud, origin: &[Option<usize>], keep: impl Fn(usize) -> bool) -> (GaussianCloud, RowOrigin) {
    let rows: Vec<usize> = (0..cloud.len()).filter(|&i| keep(i)).collect();
    let origin = rows.iter().map(|&i| origin[i]).collect();
    (cloud.select(&rows), origin)
}

pub fn densify_and_prune<R: Rng + ?Sized>(
    cloud: &GaussianCloud,
    stats: &DensifyStats,
    config: &DensifyConfig,
    scene_extent: f64,
    rng: &mut R,
) -> Result<DensifyOutcome> {
    let n = cloud.len();
    if stats.len() != n {
        return Err(Error::Shape(format!("statistics have {} rows, cloud {n}", stats.len())));
    }
    let size_limit = config.scale_split_threshold * scene_extent;
    let mut out = cloud.clone();
    let mut origin: RowOrigin = (0..n).map(Some).collect();
    let mut split_parents = vec![false; n];
    let (mut cloned, mut split) = (0, 0);
    let shrink = config.split_factor.ln();

    for i in 0..n {
        if stats.mean_grad(i) <= config.grad_threshold {
            continue;
        }
        let mut g = cloud.get(i);
        if cloud.max_scale(i) <= size_limit {
            let dir = Vector3::from(stats.position_accum[i]);
            let norm = dir.norm();
            if norm > 0.0 {
                let step = -cloud.max_scale(i) * dir / norm;
                g.position = (cloud.position(i) + step).into();
            }
            out.push(g);
            origin.push(None);
            cloned += 1;
        } else {
            let rot = cloud.rotation_matrix(i);
            let scale = cloud.scale(i);
            for _ in 0..2 {
                let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let mut child = g;
                child.position = (cloud.position(i) + rot * scale.component_mul(&z)).into();
                child.log_scale = g.log_scale.map(|s| s - shrink);
                out.push(child);
                origin.push(None);
            }
            split_parents[i] = true;
            split += 1;
        }
    }

    let before = out.len() - split;
    let (out, origin) =
        keep_rows(&out, &origin, |r| !(r < n && split_parents[r]) && out.opacity(r) >= config.min_opacity);
    if out.is_empty() {
        return Err(Error::Collapse("every Gaussian was pruned by the opacity threshold".into()));
    }
    let pruned = before - out.len();
    Ok(DensifyOutcome { cloud: out, origin, cloned, split, pruned })
}

/// Removes every Gaussian whose largest activated scale exceeds `threshold`.
pub fn prune_by_size(cloud: &GaussianCloud, threshold: f64) -> Result<DensifyOutcome> {
    if !(threshold > 0.0) {
        return Err(Error::Parameter(format!("size threshold {threshold} must be positive")));
    }
    let origin: RowOrigin = (0..cloud.len()).map(Some).collect();
    let (out, origin) = keep_rows(cloud, &origin, |i| cloud.max_scale(i) <= threshold);
    if out.is_empty() {
        return Err(Error::Collapse(format!("every Gaussian exceeds the size threshold {threshold}")));
    }
    let pruned = cloud.len() - out.len();
    Ok(DensifyOutcome { cloud: out, origin, cloned: 0, split: 0, pruned })
}

/// Removes every Gaussian whose activated opacity is below `min_opacity`.
pub fn prune_by_opacity(cloud: &GaussianCloud, min_opacity: f64) -> Result<DensifyOutcome> {
    let origin: RowOrigin = (0..cloud.len()).map(Some).collect();
    let (out, origin) = keep_rows(cloud, &origin, |i| cloud.opacity(i) >= min_opacity);
    if out.is_empty() {
        return Err(Error::Collapse(format!("every Gaussian is below opacity {min_opacity}")));
    }
    let pruned = cloud.len() - out.len();
    Ok(DensifyOutcome { cloud: out, origin, cloned: 0, split: 0, pruned })
}

/// Resets every opacity to at most `ceiling` (only used when `opacity_reset` is on).
pub fn reset_opacity(cloud: &mut GaussianCloud, ceiling: f64) {
    let cap = crate::cloud::logit(ceiling);
    for o in &mut cloud.opacity_logits {
        *o = o.min(cap);
    }
}
