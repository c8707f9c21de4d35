//! `surfreg` command-line interface.
//!
//! Exit status is 0 on success, 3 when training hits a non-finite loss and 2 for
//! every other error (configuration, usage, unreadable inputs). `SURFREG_THREADS`
//! caps the worker pool.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use surfreg::config::RunConfig;
use surfreg::curriculum::CurriculumSchedule;
use surfreg::experiment::{evaluate, run_experiment, schedule_preview, Dataset, ExperimentSpec};
use surfreg::field::FieldParams;
use surfreg::io;
use surfreg::metrics::view_metrics;
use surfreg::render::{eval_endpoints, render_view, RenderOptions, DEFAULT_INTERVALS};
use surfreg::scene::{render_ground_truth, AnalyticScene, SceneKind};
use surfreg::sphere::{ray_rotation, LatticeConfig, SampleSphere};
use surfreg::train::{finetune, inspect_ray, train, TrainState};
use surfreg::{Error, Result};

#[derive(Parser)]
#[command(name = "surfreg", version, about = "Surface regularisation for grid radiance fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the sample lattice (directions, shell radii, ball points) as CSV.
    Sample(SampleArgs),
    /// Render a checkpoint from a camera file and score it against an analytic scene.
    Render(RenderArgs),
    /// Train a field on a synthetic scene.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out views of a configuration.
    Eval(EvalArgs),
    /// Per-ray regularisation losses for a checkpoint.
    Losses(LossesArgs),
    /// Print the regularisation schedule and its overhead.
    Schedule(ScheduleArgs),
    /// Paired regularised/control runs with a report.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, default_value_t = LatticeConfig::DEFAULT_SAMPLES)]
    n: usize,
    /// Apply the rotation drawn for this seed (iteration 0, ray 0).
    #[arg(long)]
    rotate_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ViewArgs {
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long, default_value_t = 48)]
    width: usize,
    #[arg(long, default_value_t = 48)]
    height: usize,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    view: ViewArgs,
    /// Ground-truth scene for metrics.
    #[arg(long, default_value = "plane")]
    scene: SceneKind,
    #[arg(long, default_value_t = DEFAULT_INTERVALS)]
    intervals: usize,
    #[arg(long, default_value = "render")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `data.scene`.
    #[arg(long)]
    scene: Option<SceneKind>,
    /// Control run without regularisation.
    #[arg(long)]
    no_reg: bool,
    /// Continue from this checkpoint at the finetuning rate.
    #[arg(long)]
    finetune: Option<PathBuf>,
    /// Finetuning steps (defaults to `schedule.total_iterations`).
    #[arg(long)]
    steps: Option<usize>,
    /// Drop the specular-bias term while finetuning.
    #[arg(long)]
    no_specular_bias: bool,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Also write the ground-truth training views.
    #[arg(long)]
    write_dataset: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: Option<SceneKind>,
}

#[derive(Args)]
struct LossesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    view: ViewArgs,
    /// Row of the camera file to cast rays from.
    #[arg(long, default_value_t = 0)]
    view_id: usize,
    /// Use every `stride`-th pixel; ray ids are pixel indices.
    #[arg(long, default_value_t = 1)]
    stride: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Iteration whose per-ray rotations are used.
    #[arg(long, default_value_t = 0)]
    iteration: usize,
    #[arg(long)]
    dump_batch: Option<PathBuf>,
}

#[derive(Args)]
struct ScheduleArgs {
    #[arg(long, default_value_t = 512)]
    initial: usize,
    #[arg(long, default_value_t = 4)]
    r#final: usize,
    #[arg(long, default_value_t = 25_000)]
    total: usize,
    /// Extra cost of a regularised step in plain steps.
    #[arg(long, default_value_t = 1.0)]
    extra_cost: f64,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scene: Option<SceneKind>,
    #[arg(long, default_value = "experiment")]
    out: PathBuf,
    /// Also run the leave-one-loss-out grid.
    #[arg(long)]
    ablation: bool,
}

fn load_config(path: Option<&Path>, scene: Option<SceneKind>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = scene {
        cfg.data.scene = s;
    }
    Ok(cfg)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => io::write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_sample(a: &SampleArgs) -> Result<()> {
    let cfg = LatticeConfig::new(a.n, a.rotate_seed.unwrap_or(0))?;
    let mut sphere = SampleSphere::canonical(&cfg);
    if let Some(seed) = a.rotate_seed {
        sphere = sphere.rotated(&ray_rotation(seed, 0, 0));
    }
    emit(a.out.as_deref(), &io::samples_csv(&sphere))
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let params = io::load_checkpoint(&a.checkpoint)?;
    let cams = io::read_cameras_csv(&a.view.cameras, a.view.width, a.view.height)?;
    let scene = AnalyticScene::of_kind(a.scene);
    let opts = RenderOptions {
        bounds: params.layout.bounds,
        n_intervals: a.intervals,
    };
    let mut rows = Vec::new();
    for (i, cam) in cams.iter().enumerate() {
        let view = render_view(&params, cam, &opts);
        let truth = render_ground_truth(&scene, cam);
        rows.push((i.to_string(), view_metrics(&view, &truth)?));
        let stem = a.out.join(format!("view_{i:03}"));
        io::write_ppm(&stem.with_extension("ppm"), view.width, view.height, &view.color)?;
        io::write_f32_map(&a.out.join(format!("depth_{i:03}.f32")), &view.depth)?;
        io::write_f32_map(&a.out.join(format!("disparity_{i:03}.f32")), &view.disparity)?;
        io::write_f32_vec3_map(&a.out.join(format!("normal_{i:03}.f32")), &view.normal)?;
    }
    io::write_text(&a.out.join("metrics.csv"), &io::metrics_csv(&rows))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), a.scene)?;
    if a.no_reg {
        cfg.train.regularize = false;
    }
    let data = Dataset::build(&cfg)?;
    if a.write_dataset {
        io::write_dataset(&a.out.join("dataset"), &data.train_cameras, &data.train_views)?;
    }
    let log_path = a.out.join("train_log.csv");
    let every = cfg.train.checkpoint_every;
    let (params, log) = match &a.finetune {
        Some(ckpt) => {
            let start = io::load_checkpoint(ckpt)?;
            if start.layout != cfg.field.layout()? && a.config.is_some() {
                eprintln!("note: checkpoint layout differs from config; using the checkpoint's");
            }
            let steps = a.steps.unwrap_or(cfg.train.schedule.total_iterations());
            finetune(start, &data.rays, &cfg.train, steps, !a.no_specular_bias)?
        }
        None => {
            let params = FieldParams::new(cfg.field.layout()?, &cfg.field.init(cfg.train.seed));
            let mut state = TrainState::new(params);
            let out = a.out.clone();
            let log = train(&mut state, &data.rays, &cfg.train, |r, s| {
                if every > 0 && (r.iteration + 1) % every == 0 {
                    io::save_checkpoint(&out.join(format!("checkpoint_{:06}.bin", r.iteration + 1)), &s.params)?;
                }
                Ok(())
            })?;
            (state.params, log)
        }
    };
    io::write_text(&log_path, &io::train_log_csv(&log))?;
    io::save_checkpoint(&a.out.join("final.bin"), &params)?;
    io::write_text(&a.out.join("config.txt"), &cfg.serialize())?;
    io::write_text(&a.out.join("cameras.csv"), &io::cameras_csv(&data.heldout_cameras))?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.scene)?;
    let params = io::load_checkpoint(&a.checkpoint)?;
    let data = Dataset::build(&cfg)?;
    let (cams, truth) = data.eval_set();
    let (pooled, per_view, _) = evaluate(&params, &cfg, cams, truth)?;
    let mut rows: Vec<(String, _)> = per_view.into_iter().enumerate().map(|(i, m)| (i.to_string(), m)).collect();
    rows.push(("all".to_string(), pooled));
    print!("{}", io::metrics_csv(&rows));
    Ok(())
}

fn cmd_losses(a: &LossesArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), None)?;
    let params = io::load_checkpoint(&a.checkpoint)?;
    let cams = io::read_cameras_csv(&a.view.cameras, a.view.width, a.view.height)?;
    let cam = cams
        .get(a.view_id)
        .ok_or_else(|| Error::InvalidArgument(format!("view {} not in camera file", a.view_id)))?;
    if a.stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    let opts = RenderOptions {
        bounds: params.layout.bounds,
        n_intervals: cfg.train.n_intervals,
    };
    let mut out = format!("{}\n", io::LOSSES_HEADER);
    let mut dump = format!("{}\n", io::REG_BATCH_HEADER);
    for (id, ray) in cam.rays().iter().enumerate().step_by(a.stride) {
        let Some(t) = eval_endpoints(ray, &opts) else {
            continue;
        };
        match inspect_ray(&params, ray, t, &cfg.train, a.iteration, id)? {
            Some(ins) => {
                let _ = writeln!(out, "{}", io::losses_row(id, &ins.losses, Some(ins.candidate.w_star)));
                io::reg_batch_rows(id, &ins.batch, &mut dump);
            }
            None => {
                let _ = writeln!(out, "{}", io::losses_row(id, &Default::default(), None));
            }
        }
    }
    print!("{out}");
    if let Some(p) = &a.dump_batch {
        io::write_text(p, &dump)?;
    }
    Ok(())
}

fn cmd_schedule(a: &ScheduleArgs) -> Result<()> {
    let s = CurriculumSchedule::new(a.initial, a.r#final, a.total)?;
    print!("{}", schedule_preview(&s, a.extra_cost));
    Ok(())
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref(), a.scene)?;
    let mut spec = ExperimentSpec::paired(cfg);
    spec.output_dir = Some(a.out.clone());
    spec.ablation = a.ablation;
    let (report, _) = run_experiment(&spec)?;
    print!("{}", report.to_csv());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Sample(a) => cmd_sample(a),
        Command::Render(a) => cmd_render(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Losses(a) => cmd_losses(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("SURFREG_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: SURFREG_THREADS must be a positive integer, got '{v}'");
                return ExitCode::from(2);
            }
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
