//! Command-line surface: synthetic data generation, the two-stage training
//! loop, rendering, evaluation, rectifier training, and the ablation matrix.
//!
//! Exit codes: 0 success, 2 usage error, 3 invalid configuration (with the
//! offending key), 1 any other failure.

use clap::{Args, Parser, Subcommand};
use georect4d_core::{
    camera::ViewSample,
    checkpoint,
    error::Error as CoreError,
    pipeline::{self, PipelineConfig},
    rectifier::{
        self, make_degradation_pairs, train_rectifier, IdentityRectifier, LearnedRectifier,
        OracleRectifier, Rectifier,
    },
    render::render_no_tape,
    runconfig::{RectifierVariant, RunConfig},
    synth::{self, SyntheticSceneSpec},
};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "georect4d",
    about = "Sparse-view dynamic Gaussian reconstruction with stochastic purification and rectifier distillation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (cameras, PPM frames, ground-truth scene).
    Synth(SynthArgs),
    /// Run the two-stage closed loop from a run configuration file.
    Train(TrainArgs),
    /// Render a scene checkpoint at a dataset camera and frame.
    Render(RenderArgs),
    /// Evaluate a scene checkpoint against a dataset view (CSV metrics).
    Eval(EvalArgs),
    /// Train the learned rectifier on degraded/ground-truth render pairs.
    RectifierTrain(RectifierTrainArgs),
    /// Paired-seed ablation matrix over the purification and rectification
    /// components.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Full scene spec as JSON (overrides the individual flags below).
    #[arg(long)]
    spec_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    resolution: Option<u32>,
    #[arg(long)]
    static_splats: Option<usize>,
    #[arg(long)]
    dynamic_splats: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML with defaults for every omitted key).
    #[arg(long)]
    config: PathBuf,
    /// Override the inference-time residual-bridge strength of the learned
    /// rectifier.
    #[arg(long)]
    lambda_res: Option<f64>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: PathBuf,
    /// Dataset directory providing the camera definitions.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    camera: u32,
    #[arg(long)]
    frame: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Camera to evaluate on; defaults to the dataset's holdout camera.
    #[arg(long)]
    camera: Option<u32>,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RectifierTrainArgs {
    /// Dataset directory (provides the ground-truth scene and cameras).
    #[arg(long)]
    data: PathBuf,
    /// Sparse-trained scene checkpoint providing degraded renders.
    #[arg(long)]
    sparse_scene: PathBuf,
    /// Output net checkpoint (GRNT).
    #[arg(long)]
    out: PathBuf,
    /// Optional run config supplying [rectifier_train].
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_res: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of paired seeds per variant.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
        Command::RectifierTrain(a) => cmd_rectifier_train(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                CoreError::Config { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), CoreError> {
    let mut spec = match &args.spec_file {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<SyntheticSceneSpec>(&text).map_err(|e| CoreError::Config {
                key: "spec_file".into(),
                message: e.to_string(),
            })?
        }
        None => SyntheticSceneSpec::default(),
    };
    spec.seed = args.seed;
    if let Some(f) = args.frames {
        spec.frame_count = f;
    }
    if let Some(c) = args.cameras {
        spec.camera_count = c;
    }
    if let Some(r) = args.resolution {
        spec.resolution = (r, r);
    }
    if let Some(s) = args.static_splats {
        spec.static_splat_count = s;
    }
    if let Some(d) = args.dynamic_splats {
        spec.dynamic_splat_count = d;
    }
    let data = synth::generate_synthetic(&spec)?;
    synth::write_dataset(&args.out, &data)?;
    println!(
        "wrote {} views ({} cameras x {} frames) to {}",
        data.views.len(),
        spec.camera_count,
        spec.frame_count,
        args.out.display()
    );
    Ok(())
}

fn build_rectifier(
    cfg: &RunConfig,
    gt_scene: Option<&georect4d_core::scene::SceneModel>,
) -> Result<Box<dyn Rectifier>, CoreError> {
    match cfg.rectifier {
        RectifierVariant::Identity => Ok(Box::new(IdentityRectifier)),
        RectifierVariant::Oracle => {
            let scene = gt_scene.cloned().ok_or_else(|| CoreError::Config {
                key: "rectifier".into(),
                message: "oracle rectifier needs gt_scene.gr4d in the data dir".into(),
            })?;
            Ok(Box::new(OracleRectifier {
                scene,
                opts: cfg.pipeline.render,
            }))
        }
        RectifierVariant::Learned => {
            let net = match &cfg.rectifier_net {
                Some(path) => checkpoint::load_net(path)?,
                None => rectifier::RectifierNet::new(
                    cfg.rectifier_train.arch,
                    cfg.pipeline.master_seed,
                ),
            };
            Ok(Box::new(LearnedRectifier {
                net,
                lambda_res: cfg.lambda_res,
            }))
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CoreError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(l) = args.lambda_res {
        cfg.lambda_res = l;
    }
    if let Some(s) = args.seed {
        cfg.pipeline.master_seed = s;
    }
    if let Some(o) = args.out {
        cfg.out_dir = o;
    }
    let dataset = synth::load_dataset(&cfg.data_dir)?;
    let data = pipeline::train_data_from_dataset(&dataset);
    let rectifier = build_rectifier(&cfg, dataset.gt_scene.as_ref())?;

    std::fs::create_dir_all(&cfg.out_dir)?;
    cfg.save(&cfg.out_dir.join("config.resolved.toml"))?;

    let (state, report) = pipeline::run_closed_loop(&data, &cfg.pipeline, rectifier.as_ref())?;

    checkpoint::save_scene(&cfg.out_dir.join("scene.gr4d"), &state.scene)?;
    write_run_log(&cfg.out_dir.join("run_log.jsonl"), &state.metric_history)?;
    std::fs::write(cfg.out_dir.join("metrics.csv"), report.to_csv())?;
    let render_dir = cfg.out_dir.join("renders");
    std::fs::create_dir_all(&render_dir)?;
    for view in &data.holdout {
        let frame_idx = view.timestamp as usize;
        let asm = state.scene.assemble(view.timestamp)?;
        let img = render_no_tape(&asm.primitives, view, &cfg.pipeline.render)?.color;
        img.write_ppm(&render_dir.join(format!("holdout_f{frame_idx:04}.ppm")))?;
    }
    println!(
        "run complete: {} primitives ({} dynamic), holdout PSNR {:.2} dB, SSIM {:.4}",
        state.scene.total_count(),
        state.scene.dynamic_count(),
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(())
}

fn write_run_log(
    path: &Path,
    history: &[pipeline::CheckpointRecord],
) -> Result<(), CoreError> {
    let mut out = String::new();
    for rec in history {
        out.push_str(
            &serde_json::to_string(rec)
                .map_err(|e| CoreError::Format(format!("run log: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn find_view(views: &[ViewSample], camera: u32, frame: usize) -> Result<&ViewSample, CoreError> {
    views
        .iter()
        .find(|v| v.camera_index == Some(camera) && v.timestamp as usize == frame)
        .ok_or_else(|| CoreError::Config {
            key: "camera/frame".into(),
            message: format!("camera {camera} frame {frame} not in dataset"),
        })
}

fn cmd_render(args: RenderArgs) -> Result<(), CoreError> {
    let scene = checkpoint::load_scene(&args.scene)?;
    let dataset = synth::load_dataset(&args.data)?;
    let view = find_view(&dataset.views, args.camera, args.frame)?;
    let asm = scene.assemble(view.timestamp)?;
    let img = render_no_tape(&asm.primitives, view, &Default::default())?.color;
    img.write_ppm(&args.out)?;
    println!("rendered camera {} frame {} -> {}", args.camera, args.frame, args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CoreError> {
    let scene = checkpoint::load_scene(&args.scene)?;
    let dataset = synth::load_dataset(&args.data)?;
    let camera = args.camera.unwrap_or(dataset.holdout_camera);
    let views: Vec<ViewSample> = dataset
        .views
        .iter()
        .filter(|v| v.camera_index == Some(camera))
        .cloned()
        .collect();
    if views.is_empty() {
        return Err(CoreError::Config {
            key: "camera".into(),
            message: format!("camera {camera} has no views in the dataset"),
        });
    }
    let report = pipeline::evaluate_holdout(&scene, &views, &PipelineConfig::default())?;
    let csv = report.to_csv();
    match args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_rectifier_train(args: RectifierTrainArgs) -> Result<(), CoreError> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = args.steps {
        cfg.rectifier_train.steps = s;
    }
    if let Some(l) = args.lambda_res {
        cfg.rectifier_train.lambda_res_infer = l;
    }
    let seed = args.seed.unwrap_or(cfg.pipeline.master_seed);
    let dataset = synth::load_dataset(&args.data)?;
    let gt_scene = dataset.gt_scene.as_ref().ok_or_else(|| CoreError::Config {
        key: "data".into(),
        message: "rectifier training needs gt_scene.gr4d in the data dir".into(),
    })?;
    let sparse_scene = checkpoint::load_scene(&args.sparse_scene)?;
    let views = dataset.train_views();
    let pairs = make_degradation_pairs(
        gt_scene,
        &sparse_scene,
        &views,
        &cfg.pipeline.render,
        cfg.pipeline.rectify_temporal_window,
    )?;
    let (net, trace) = train_rectifier(&pairs, &cfg.rectifier_train, seed)?;
    checkpoint::save_net(&args.out, &net)?;
    println!(
        "trained rectifier on {} pairs for {} steps: loss {:.5} -> best {:.5}; saved {}",
        pairs.len(),
        trace.losses.len(),
        trace.losses.first().copied().unwrap_or(f64::NAN),
        trace.best_so_far.last().copied().unwrap_or(f64::NAN),
        args.out.display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<(), CoreError> {
    let base = RunConfig::load(&args.config)?;
    let dataset = synth::load_dataset(&base.data_dir)?;
    let data = pipeline::train_data_from_dataset(&dataset);

    std::fs::create_dir_all(&args.out)?;
    base.save(&args.out.join("config.resolved.toml"))?;

    let variants: [(&str, Box<dyn Fn(&mut PipelineConfig)>); 5] = [
        ("full", Box::new(|_| {})),
        ("no-pruning", Box::new(|c| c.enable_pruning = false)),
        ("no-annealing", Box::new(|c| c.enable_annealing = false)),
        ("no-roi", Box::new(|c| c.enable_roi = false)),
        ("no-rectification", Box::new(|c| c.lambda_rect = 0.0)),
    ];

    let mut csv = String::from("variant,seed,psnr,ssim,temporal_consistency\n");
    for (name, tweak) in &variants {
        for seed_idx in 0..args.seeds {
            let mut cfg = base.clone();
            tweak(&mut cfg.pipeline);
            cfg.pipeline.master_seed = base.pipeline.master_seed + seed_idx;
            let rectifier = if *name == "no-rectification" {
                Box::new(IdentityRectifier) as Box<dyn Rectifier>
            } else {
                build_rectifier(&cfg, dataset.gt_scene.as_ref())?
            };
            let (_, report) =
                pipeline::run_closed_loop(&data, &cfg.pipeline, rectifier.as_ref())?;
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                name,
                cfg.pipeline.master_seed,
                report.mean_psnr,
                report.mean_ssim,
                report.temporal_consistency
            ));
            println!(
                "{name} seed {}: PSNR {:.2} SSIM {:.4}",
                cfg.pipeline.master_seed, report.mean_psnr, report.mean_ssim
            );
        }
    }
    std::fs::write(args.out.join("ablation.csv"), csv)?;
    Ok(())
}
