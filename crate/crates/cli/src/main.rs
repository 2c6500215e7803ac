use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use splatgen_core::body::smplx::{convert_npz, ConvertOptions};
use splatgen_core::body::{
    init_cloud, load_model, posed_normalized, render_skeleton, save_model, to_obj, toy, BodyModel, PoseParams,
};
use splatgen_core::config::{ProviderKind, RunConfig};
use splatgen_core::density::prune_by_size;
use splatgen_core::guidance::{EchoMode, EchoServer, RemoteProvider, ScoreProvider};
use splatgen_core::image::{write_gray16, write_rgb, write_rgb8};
use splatgen_core::optim::dirac::{evaluate, held_out_views, painted_reference, provider_for, training_views};
use splatgen_core::optim::{CameraTargets, Checkpoint, Trainer};
use splatgen_core::ply::{read_ply, write_ply};
use splatgen_core::raster::RenderSettings;
use splatgen_core::{render, Camera, Error};

#[derive(Parser)]
#[command(name = "splatgen", version, about = "Gaussian splatting avatars from a body prior and score distillation")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "SPLATGEN_THREADS")]
    threads: Option<usize>,
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct BodyArgs {
    /// Body model file (binary container or JSON); the built-in capsule person when omitted.
    #[arg(long)]
    body: Option<PathBuf>,
    /// Pose parameters as JSON.
    #[arg(long)]
    pose: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct CameraArgs {
    #[arg(long, default_value_t = 2.5)]
    distance: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    elevation: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    azimuth: f64,
    #[arg(long, default_value_t = 50.0)]
    fovy: f64,
    #[arg(long, default_value_t = 512)]
    size: u32,
    /// Look-at point as x,y,z.
    #[arg(long, value_delimiter = ',', default_value = "0,0,0", allow_hyphen_values = true)]
    target: Vec<f64>,
}

impl CameraArgs {
    fn camera(&self) -> Result<Camera, Error> {
        if self.target.len() != 3 {
            return Err(Error::Parameter("--target takes three comma-separated numbers".into()));
        }
        Camera::from_spherical(
            self.distance,
            self.elevation,
            self.azimuth,
            self.fovy,
            Vector3::new(self.target[0], self.target[1], self.target[2]),
            self.size,
            self.size,
        )
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample an initial cloud on the body surface.
    Init {
        #[command(flatten)]
        body: BodyArgs,
        #[arg(long, default_value_t = 100_000, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render rgb, depth and alpha PNGs of a cloud.
    Render {
        #[arg(long)]
        cloud: PathBuf,
        #[command(flatten)]
        camera: CameraArgs,
        /// Background color as r,g,b in [0, 1].
        #[arg(long, value_delimiter = ',', default_value = "1,1,1")]
        background: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Draw the view-culled pose skeleton.
    Skeleton {
        #[command(flatten)]
        body: BodyArgs,
        #[command(flatten)]
        camera: CameraArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a cloud from a run configuration.
    Optimize {
        #[arg(long)]
        config: PathBuf,
        /// Validate the configuration and print it with defaults filled in.
        #[arg(long)]
        dry_run: bool,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Remove Gaussians whose largest scale exceeds a threshold.
    Prune {
        #[arg(long)]
        cloud: PathBuf,
        #[arg(long, default_value_t = 0.008)]
        scale_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the posed, normalized body mesh as OBJ.
    Mesh {
        #[command(flatten)]
        body: BodyArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert an SMPL-X style .npz release into the body container format.
    ConvertSmplx {
        #[arg(long)]
        npz: PathBuf,
        #[arg(long, default_value_t = 10)]
        betas: usize,
        #[arg(long, default_value_t = 10)]
        expressions: usize,
        /// Keypoint map JSON; the bundled COCO-17 map when omitted.
        #[arg(long)]
        keypoints: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in capsule person body model.
    ToyBody {
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a reference score server that answers with fixed patterns.
    ServeEcho {
        #[arg(long, default_value = "127.0.0.1:8765")]
        bind: String,
        /// zeros, echo, wrong-height, nan or unavailable.
        #[arg(long, default_value = "zeros")]
        mode: EchoMode,
    },
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parameter(_) | Error::Config(_) => 2,
            Error::Io { .. } | Error::Ply(_) | Error::Model(_) | Error::Checkpoint(_) | Error::Image(_) => 3,
            Error::Shape(_) | Error::Collapse(_) | Error::NonFinite(_) => 4,
            Error::Transport(_) | Error::Protocol(_) | Error::ScoreData { .. } => 5,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure { code: 3, message: format!("{}: {e}", path.display()) }
}

type CliResult<T = ()> = Result<T, Failure>;

fn load_body(path: Option<&Path>) -> CliResult<BodyModel> {
    Ok(match path {
        Some(p) => load_model(p)?,
        None => toy::capsule_person(),
    })
}

fn load_pose(path: Option<&Path>) -> CliResult<PoseParams> {
    match path {
        None => Ok(PoseParams::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))
        }
    }
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(())
}

fn cmd_init(body: &BodyArgs, count: u64, seed: u64, out: &Path) -> CliResult {
    let model = load_body(body.body.as_deref())?;
    let pose = load_pose(body.pose.as_deref())?;
    let cloud = init_cloud(&model, &pose, count as usize, &mut ChaCha8Rng::seed_from_u64(seed))?;
    ensure_parent(out)?;
    write_ply(&cloud, out)?;
    let targets = CameraTargets::from_body(&model, &pose)?;
    let cam = Camera::from_spherical(2.6, 0.0, 0.0, 50.0, Vector3::from(targets.center), 256, 256)?;
    let img = render(&cloud, &cam, &RenderSettings::with_background([0.0; 3]));
    let sil = out.with_extension("silhouette.png");
    write_gray16(&sil, &img.alpha, 256, 256)?;
    println!("wrote {} Gaussians to {} and {}", cloud.len(), out.display(), sil.display());
    Ok(())
}

fn cmd_render(cloud: &Path, camera: &CameraArgs, background: &[f64], out_dir: &Path) -> CliResult {
    let cloud = read_ply(cloud)?;
    let cam = camera.camera()?;
    if background.len() != 3 || !background.iter().all(|c| (0.0..=1.0).contains(c)) {
        return Err(usage("--background takes three comma-separated components in [0, 1]"));
    }
    let out = render(&cloud, &cam, &RenderSettings::with_background([background[0], background[1], background[2]]));
    let (w, h) = (out.width, out.height);
    write_rgb(&out_dir.join("rgb.png"), &out.rgb, w, h)?;
    write_gray16(&out_dir.join("depth.png"), &out.depth, w, h)?;
    write_gray16(&out_dir.join("alpha.png"), &out.alpha, w, h)?;
    println!("wrote rgb.png, depth.png and alpha.png ({w}x{h}) to {}", out_dir.display());
    Ok(())
}

fn cmd_skeleton(body: &BodyArgs, camera: &CameraArgs, out: &Path) -> CliResult {
    let model = load_body(body.body.as_deref())?;
    let pose = load_pose(body.pose.as_deref())?;
    let img = render_skeleton(&model, &pose, &camera.camera()?)?;
    write_rgb8(out, img.data, img.width, img.height)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_optimize(config: &Path, dry_run: bool, resume: Option<&Path>) -> CliResult {
    let text = fs::read_to_string(config).map_err(|e| io_err(config, e))?;
    let run = RunConfig::parse(&text)?;
    if dry_run {
        print!("{}", run.to_toml()?);
        return Ok(());
    }
    let model = load_body(run.body.as_deref())?;
    let targets = CameraTargets::from_body(&model, &run.pose)?;
    let keypoints = model.coco_keypoints(&posed_normalized(&model, &run.pose)?);
    let train = &run.train;
    let settings = train.render_settings();
    let center = Vector3::from(targets.center);
    let pc = &run.provider;

    let mut analytic = None;
    let (provider, views): (Box<dyn ScoreProvider>, _) = match pc.kind {
        ProviderKind::Analytic => {
            let reference = match &pc.reference {
                Some(p) => read_ply(p)?,
                None => painted_reference(
                    &model,
                    &run.pose,
                    pc.reference_count,
                    &mut ChaCha8Rng::seed_from_u64(pc.reference_seed),
                )?,
            };
            let views = training_views(pc.view_distance, pc.view_fovy, center, train.resolution)?;
            let provider = provider_for(&reference, &views, &settings);
            analytic = Some(reference);
            (Box::new(provider), Some(views))
        }
        ProviderKind::Remote => {
            let timeout = Duration::from_secs_f64(pc.timeout_secs);
            (Box::new(RemoteProvider::new(&pc.endpoint, timeout)), None)
        }
    };

    let mut trainer = match resume {
        Some(dir) => Trainer::from_checkpoint(Checkpoint::load(&dir.join("state.bin"))?)?,
        None => {
            let cloud = init_cloud(&model, &run.pose, train.init_count, &mut ChaCha8Rng::seed_from_u64(train.seed))?;
            Trainer::new(train.clone(), cloud, targets, Some(keypoints), views)?
        }
    };
    trainer.set_output(&run.output, Some(text.clone()))?;
    log::info!(
        "training {} Gaussians for {} iterations at {}px, batch {}",
        trainer.cloud.len(),
        trainer.config.iterations,
        trainer.config.resolution,
        trainer.config.batch
    );
    trainer.run(provider.as_ref())?;
    trainer.write_final()?;
    if let Some(reference) = analytic {
        let held = held_out_views(pc.view_distance, pc.view_fovy, center, trainer.config.resolution)?;
        let s = evaluate(&trainer.cloud, &reference, &held, &settings);
        trainer.log_extra(&serde_json::json!({ "final_psnr": s.psnr, "final_depth_mae": s.depth_mae }))?;
        println!("held-out PSNR {:.2} dB, depth MAE {:.4}", s.psnr, s.depth_mae);
    }
    println!("wrote {}", run.output.display());
    Ok(())
}

fn cmd_prune(cloud: &Path, threshold: f64, out: &Path) -> CliResult {
    let input = read_ply(cloud)?;
    let edit = prune_by_size(&input, threshold)?;
    ensure_parent(out)?;
    write_ply(&edit.cloud, out)?;
    println!("kept {} of {} Gaussians", edit.cloud.len(), input.len());
    Ok(())
}

fn cmd_mesh(body: &BodyArgs, out: &Path) -> CliResult {
    let model = load_body(body.body.as_deref())?;
    let pose = load_pose(body.pose.as_deref())?;
    let posed = posed_normalized(&model, &pose)?;
    ensure_parent(out)?;
    fs::write(out, to_obj(&model, &posed)).map_err(|e| io_err(out, e))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_convert(npz: &Path, betas: usize, expressions: usize, keypoints: Option<&Path>, out: &Path) -> CliResult {
    let mut opts = ConvertOptions { betas, expressions, ..Default::default() };
    if let Some(p) = keypoints {
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        opts.keypoint_map = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    let model = convert_npz(npz, &opts)?;
    ensure_parent(out)?;
    save_model(&model, out)?;
    println!("wrote {} ({} vertices, {} joints)", out.display(), model.vertex_count(), model.joint_count());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Init { body, count, seed, out } => cmd_init(body, *count, *seed, out),
        Command::Render { cloud, camera, background, out_dir } => cmd_render(cloud, camera, background, out_dir),
        Command::Skeleton { body, camera, out } => cmd_skeleton(body, camera, out),
        Command::Optimize { config, dry_run, resume } => cmd_optimize(config, *dry_run, resume.as_deref()),
        Command::Prune { cloud, scale_threshold, out } => cmd_prune(cloud, *scale_threshold, out),
        Command::Mesh { body, out } => cmd_mesh(body, out),
        Command::ConvertSmplx { npz, betas, expressions, keypoints, out } => {
            cmd_convert(npz, *betas, *expressions, keypoints.as_deref(), out)
        }
        Command::ToyBody { out } => ensure_parent(out).and_then(|_| Ok(save_model(&toy::capsule_person(), out)?)),
        Command::ServeEcho { bind, mode } => EchoServer::start(bind, *mode).map_err(Failure::from).map(|server| {
            println!("serving {mode:?} scores on {}", server.endpoint());
            server.join();
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
