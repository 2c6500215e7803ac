//! The training loop, checkpoints and metrics.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::{sample_camera, CameraTargets, TrainConfig};
use crate::cloud::GaussianCloud;
use crate::density::{densify_and_prune, prune_by_size, reset_opacity, schedule_gate, DensifyStats, DensityAction};
use crate::error::{Error, Result};
use crate::geometry::{Camera, CameraSpec};
use crate::guidance::{dual_branch_batch, NoiseSchedule, ScoreProvider, StepContext};
use crate::image::{hstack, write_rgb};
use crate::ply::write_ply;
use crate::raster::render;

/// Consecutive skipped steps tolerated before training aborts.
pub const MAX_CONSECUTIVE_SKIPS: usize = 3;
const CHECKPOINT_FORMAT: u32 = 1;
const OPACITY_RESET_VALUE: f64 = 0.01;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub t: Option<usize>,
    pub gaussians: usize,
    pub grad_norm: f64,
    pub rgb_delta_rms: f64,
    pub depth_delta_rms: f64,
    pub max_scale: f64,
    pub action: DensityAction,
    pub skipped: bool,
}

/// Everything needed to continue a run in a fresh process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub iteration: usize,
    /// Training configuration as JSON.
    pub config_json: String,
    pub cloud: GaussianCloud,
    pub adam: AdamState,
    pub stats: DensifyStats,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub scene_extent: f64,
    pub targets: CameraTargets,
    pub keypoints: Option<Vec<[f64; 3]>>,
    pub views: Option<Vec<CameraSpec>>,
    pub skips: usize,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = bincode::serialize(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            bincode::deserialize(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("{}: unsupported format {}", path.display(), ck.format)));
        }
        Ok(ck)
    }
}

pub struct Trainer {
    pub config: TrainConfig,
    pub cloud: GaussianCloud,
    pub adam: AdamState,
    pub stats: DensifyStats,
    pub iteration: usize,
    pub scene_extent: f64,
    pub targets: CameraTargets,
    pub keypoints: Option<[Vector3<f64>; 17]>,
    /// Fixed camera set; when absent, cameras are sampled from the configured ranges.
    pub views: Option<Vec<Camera>>,
    pub schedule: NoiseSchedule,
    rng: ChaCha8Rng,
    skips: usize,
    output: Option<PathBuf>,
    config_text: Option<String>,
    metrics: Option<BufWriter<fs::File>>,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        cloud: GaussianCloud,
        targets: CameraTargets,
        keypoints: Option<[Vector3<f64>; 17]>,
        views: Option<Vec<Camera>>,
    ) -> Result<Self> {
        cloud.validate()?;
        let problems = config.problems("", NoiseSchedule::default().steps());
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        if views.as_ref().is_some_and(|v| v.is_empty()) {
            return Err(Error::Parameter("the fixed view set is empty".into()));
        }
        let schedule = NoiseSchedule::default().with_weighting(config.guidance.weighting);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            adam: AdamState::new(cloud.len()),
            stats: DensifyStats::zeros(cloud.len()),
            scene_extent: cloud.bbox_diagonal(),
            iteration: 0,
            targets,
            keypoints,
            views,
            schedule,
            config,
            cloud,
            skips: 0,
            output: None,
            config_text: None,
            metrics: None,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let config: TrainConfig =
            serde_json::from_str(&ck.config_json).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let keypoints = match ck.keypoints {
            Some(k) => {
                let k: [Vector3<f64>; 17] = k
                    .iter()
                    .map(|p| Vector3::from(*p))
                    .collect::<Vec<_>>()
                    .try_into()
                    .map_err(|_| Error::Checkpoint("expected 17 keypoints".into()))?;
                Some(k)
            }
            None => None,
        };
        let views = match ck.views {
            Some(v) => Some(v.iter().map(CameraSpec::build).collect::<Result<Vec<_>>>()?),
            None => None,
        };
        let n = ck.cloud.len();
        if ck.adam.rows() != n || ck.stats.len() != n {
            return Err(Error::Checkpoint("optimizer state rows do not match the cloud".into()));
        }
        let mut rng = ChaCha8Rng::from_seed(ck.rng_seed);
        rng.set_stream(ck.rng_stream);
        rng.set_word_pos(ck.rng_word_pos);
        Ok(Self {
            schedule: NoiseSchedule::default().with_weighting(config.guidance.weighting),
            config,
            cloud: ck.cloud,
            adam: ck.adam,
            stats: ck.stats,
            iteration: ck.iteration,
            scene_extent: ck.scene_extent,
            targets: ck.targets,
            keypoints,
            views,
            rng,
            skips: ck.skips,
            output: None,
            config_text: None,
            metrics: None,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            format: CHECKPOINT_FORMAT,
            iteration: self.iteration,
            config_json: serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?,
            cloud: self.cloud.clone(),
            adam: self.adam.clone(),
            stats: self.stats.clone(),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos(),
            scene_extent: self.scene_extent,
            targets: self.targets,
            keypoints: self.keypoints.map(|k| k.iter().map(|p| [p.x, p.y, p.z]).collect()),
            views: self.views.as_ref().map(|v| v.iter().map(Camera::spec).collect()),
            skips: self.skips,
        })
    }

    /// Directs checkpoints, metrics and final artifacts to `dir`. Metrics are
    /// appended, so a resumed run continues the same log.
    pub fn set_output(&mut self, dir: &Path, config_text: Option<String>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("metrics.jsonl");
        let file = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
        self.metrics = Some(BufWriter::new(file));
        self.output = Some(dir.to_path_buf());
        self.config_text = config_text;
        Ok(())
    }

    pub fn output(&self) -> Option<&Path> {
        self.output.as_deref()
    }

    fn cameras(&mut self) -> Result<Vec<Camera>> {
        let it = self.iteration;
        (0..self.config.batch)
            .map(|_| match &self.views {
                Some(v) => Ok(v[self.rng.random_range(0..v.len())].clone()),
                None => sample_camera(&self.config, it, &self.targets, &mut self.rng),
            })
            .collect()
    }

    /// Runs one iteration. A retriable provider failure skips the update; the
    /// error is returned once the skip budget is exhausted.
    pub fn step(&mut self, provider: &dyn ScoreProvider) -> Result<IterationRecord> {
        let rng_before = self.rng.clone();
        let result = self.step_inner(provider);
        if result.is_err() {
            self.rng = rng_before;
        }
        result
    }

    fn step_inner(&mut self, provider: &dyn ScoreProvider) -> Result<IterationRecord> {
        let it = self.iteration + 1;
        let cameras = self.cameras()?;
        let ctx = StepContext {
            provider,
            schedule: &self.schedule,
            config: &self.config.guidance,
            settings: self.config.render_settings(),
            prompt: &self.config.prompt,
            negative_prompt: &self.config.negative_prompt,
            keypoints: self.keypoints.as_ref(),
            fixed_t: None,
        };
        let mut record = IterationRecord {
            iteration: it,
            t: None,
            gaussians: 0,
            grad_norm: 0.0,
            rgb_delta_rms: 0.0,
            depth_delta_rms: 0.0,
            max_scale: 0.0,
            action: DensityAction::None,
            skipped: false,
        };
        match dual_branch_batch(&self.cloud, &cameras, &ctx, &mut self.rng) {
            Ok(outcome) => {
                self.skips = 0;
                self.stats.record(&outcome.grads)?;
                let mut adam = self.config.adam();
                adam.lrs[0] = self.config.position_lr(it);
                adam_step(&mut self.cloud, &outcome.grads, &mut self.adam, &adam)?;
                record.t = Some(outcome.stats.t);
                record.grad_norm = outcome.grads.norm();
                record.rgb_delta_rms = outcome.stats.rgb_delta_rms;
                record.depth_delta_rms = outcome.stats.depth_delta_rms;
            }
            Err(e) if e.is_retriable() => {
                self.skips += 1;
                log::warn!("iteration {it}: skipping step ({e})");
                if self.skips >= MAX_CONSECUTIVE_SKIPS {
                    return Err(e);
                }
                record.skipped = true;
            }
            Err(e) => return Err(e),
        }

        record.action = schedule_gate(it, &self.config.densify);
        let edit = match record.action {
            DensityAction::None => None,
            DensityAction::DensifyPrune => {
                Some(densify_and_prune(&self.cloud, &self.stats, &self.config.densify, self.scene_extent, &mut self.rng)?)
            }
            DensityAction::PruneOnly => Some(prune_by_size(&self.cloud, self.config.densify.size_prune_threshold)?),
        };
        if let Some(edit) = edit {
            log::info!(
                "iteration {it}: {:?} cloned {} split {} pruned {} -> {} Gaussians",
                record.action,
                edit.cloned,
                edit.split,
                edit.pruned,
                edit.cloud.len()
            );
            self.cloud = edit.cloud;
            self.adam.remap(&edit.origin);
            self.stats = DensifyStats::zeros(self.cloud.len());
            if record.action == DensityAction::DensifyPrune && self.config.densify.opacity_reset {
                reset_opacity(&mut self.cloud, OPACITY_RESET_VALUE);
                self.adam.reset_group(4);
            }
        }
        self.iteration = it;
        record.gaussians = self.cloud.len();
        record.max_scale = (0..self.cloud.len()).map(|i| self.cloud.max_scale(i)).fold(0.0, f64::max);
        Ok(record)
    }

    fn log_record(&mut self, record: &IterationRecord) -> Result<()> {
        if let (Some(w), Some(dir)) = (self.metrics.as_mut(), self.output.as_ref()) {
            let line = serde_json::to_string(record).map_err(|e| Error::Checkpoint(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::io(dir.join("metrics.jsonl"), e))?;
        }
        Ok(())
    }

    /// Appends a free-form JSON object to the metrics log.
    pub fn log_extra(&mut self, value: &serde_json::Value) -> Result<()> {
        if let (Some(w), Some(dir)) = (self.metrics.as_mut(), self.output.as_ref()) {
            writeln!(w, "{value}").map_err(|e| Error::io(dir.join("metrics.jsonl"), e))?;
            w.flush().map_err(|e| Error::io(dir.join("metrics.jsonl"), e))?;
        }
        Ok(())
    }

    /// Writes `checkpoints/<name>/{cloud.ply, state.bin, config.toml}` and returns the directory.
    pub fn save_checkpoint(&mut self, name: &str) -> Result<Option<PathBuf>> {
        let Some(out) = self.output.clone() else { return Ok(None) };
        if let Some(w) = self.metrics.as_mut() {
            w.flush().map_err(|e| Error::io(out.join("metrics.jsonl"), e))?;
        }
        let dir = out.join("checkpoints").join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_ply(&self.cloud, dir.join("cloud.ply"))?;
        self.checkpoint()?.save(&dir.join("state.bin"))?;
        if let Some(text) = &self.config_text {
            let p = dir.join("config.toml");
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(Some(dir))
    }

    /// Trains until the configured iteration count. On a fatal error the
    /// state before the failing iteration is checkpointed as `abort`.
    pub fn run(&mut self, provider: &dyn ScoreProvider) -> Result<()> {
        while self.iteration < self.config.iterations {
            let record = match self.step(provider) {
                Ok(r) => r,
                Err(e) => {
                    if let Ok(Some(dir)) = self.save_checkpoint("abort") {
                        log::error!("training aborted; state saved to {}", dir.display());
                    }
                    return Err(e);
                }
            };
            self.log_record(&record)?;
            if self.iteration % self.config.checkpoint_every == 0 {
                self.save_checkpoint(&format!("iter_{:06}", self.iteration))?;
            }
        }
        if let Some(w) = self.metrics.as_mut() {
            w.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        Ok(())
    }

    /// Eight renders at evenly spaced azimuths around the body center.
    pub fn turntable(&self) -> Result<Vec<f64>> {
        let c = &self.config.camera;
        let size = self.config.resolution;
        let settings = self.config.render_settings();
        let frames = (0..8)
            .map(|k| {
                let az = -180.0 + 45.0 * k as f64;
                let cam = Camera::from_spherical(
                    0.5 * (c.distance[0] + c.distance[1]),
                    0.0,
                    az,
                    0.5 * (c.fovy[0] + c.fovy[1]),
                    Vector3::from(self.targets.center),
                    size,
                    size,
                )?;
                Ok(render(&self.cloud, &cam, &settings).rgb)
            })
            .collect::<Result<Vec<_>>>()?;
        hstack(&frames, size as usize, size as usize)
    }

    /// Writes `final.ply` and `turntable.png` into the output directory.
    pub fn write_final(&self) -> Result<()> {
        let Some(out) = &self.output else { return Ok(()) };
        write_ply(&self.cloud, out.join("final.ply"))?;
        let size = self.config.resolution as usize;
        write_rgb(&out.join("turntable.png"), &self.turntable()?, size * 8, size)
    }
}
