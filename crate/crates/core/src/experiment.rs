//! Paired treatment/control runs, held-out evaluation and reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::curriculum::CurriculumSchedule;
use crate::field::FieldParams;
use crate::io;
use crate::metrics::{metrics, view_metrics, ViewMetrics};
use crate::render::{render_view, RenderOptions, RenderedView};
use crate::scene::{render_ground_truth, Camera, GroundTruthView};
use crate::train::{train, StepReport, TrainState, TrainingData};
use crate::{Error, Result, Vec3};

pub const REPORT_HEADER: &str = "run,psnr_db,normal_mae_deg,disparity_rmse";

/// Rendered ground truth for training and held-out cameras.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train_cameras: Vec<Camera>,
    pub train_views: Vec<GroundTruthView>,
    pub heldout_cameras: Vec<Camera>,
    pub heldout_views: Vec<GroundTruthView>,
    pub rays: TrainingData,
}

impl Dataset {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let scene = cfg.data.scene();
        let (train_cameras, heldout_cameras) = cfg.data.cameras()?;
        let train_views: Vec<_> = train_cameras.iter().map(|c| render_ground_truth(&scene, c)).collect();
        let heldout_views: Vec<_> = heldout_cameras.iter().map(|c| render_ground_truth(&scene, c)).collect();
        let rays = TrainingData::from_views(&train_cameras, &train_views, &cfg.field.bounds()?)?;
        Ok(Self {
            train_cameras,
            train_views,
            heldout_cameras,
            heldout_views,
            rays,
        })
    }

    /// Cameras and truth used for evaluation: held-out views, or training views if none.
    pub fn eval_set(&self) -> (&[Camera], &[GroundTruthView]) {
        if self.heldout_cameras.is_empty() {
            (&self.train_cameras, &self.train_views)
        } else {
            (&self.heldout_cameras, &self.heldout_views)
        }
    }
}

/// A trained field and its evaluation.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub name: String,
    pub params: FieldParams,
    pub log: Vec<StepReport>,
    pub pooled: ViewMetrics,
    pub per_view: Vec<ViewMetrics>,
    pub rendered: Vec<RenderedView>,
}

pub fn evaluate(params: &FieldParams, cfg: &RunConfig, cameras: &[Camera], truth: &[GroundTruthView]) -> Result<(ViewMetrics, Vec<ViewMetrics>, Vec<RenderedView>)> {
    let opts = RenderOptions {
        bounds: params.layout.bounds,
        n_intervals: cfg.train.n_intervals,
    };
    let rendered: Vec<RenderedView> = cameras.iter().map(|c| render_view(params, c, &opts)).collect();
    let per_view = rendered
        .iter()
        .zip(truth)
        .map(|(r, t)| view_metrics(r, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((metrics(&rendered, truth)?, per_view, rendered))
}

/// Trains a fresh field under `cfg` and evaluates it on the dataset's evaluation views.
pub fn run_single(name: &str, cfg: &RunConfig, data: &Dataset) -> Result<RunResult> {
    let params = FieldParams::new(cfg.field.layout()?, &cfg.field.init(cfg.train.seed));
    let mut state = TrainState::new(params);
    let log = train(&mut state, &data.rays, &cfg.train, |_, _| Ok(()))?;
    let (cams, truth) = data.eval_set();
    let (pooled, per_view, rendered) = evaluate(&state.params, cfg, cams, truth)?;
    Ok(RunResult {
        name: name.to_string(),
        params: state.params,
        log,
        pooled,
        per_view,
        rendered,
    })
}

/// Treatment and control runs that share everything except regularisation settings.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub treatment: RunConfig,
    pub control: RunConfig,
    pub output_dir: Option<PathBuf>,
    /// Also run the leave-one-loss-out grid.
    pub ablation: bool,
}

impl ExperimentSpec {
    /// Control is the treatment with regularisation switched off.
    pub fn paired(treatment: RunConfig) -> Self {
        let mut control = treatment;
        control.train.regularize = false;
        Self {
            treatment,
            control,
            output_dir: None,
            ablation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.treatment.validate()?;
        self.control.validate()?;
        let strip = |c: &RunConfig| {
            let mut c = *c;
            c.train.regularize = true;
            c.train.loss_weights = Default::default();
            c.train.schedule = CurriculumSchedule::new(1, 1, c.train.schedule.total_iterations()).expect("valid");
            c.train.reg_fraction = 1.0;
            c.train.specular_norm = Default::default();
            c.train.knn_k = 1;
            c.train.n_samples = 2;
            c
        };
        if strip(&self.treatment) != strip(&self.control) {
            return Err(Error::Config(
                "treatment and control may differ only in regularisation settings".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub metrics: ViewMetrics,
}

/// Paired metrics and, optionally, the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub ablation: Vec<ReportRow>,
}

impl Report {
    fn find(&self, run: &str) -> Option<&ViewMetrics> {
        self.rows.iter().find(|r| r.run == run).map(|r| &r.metrics)
    }

    /// Treatment minus control: (Δ normal MAE, Δ disparity RMSE, Δ PSNR).
    pub fn deltas(&self) -> Option<(f64, f64, f64)> {
        let t = self.find("treatment")?;
        let c = self.find("control")?;
        Some((
            t.normal_mae_deg - c.normal_mae_deg,
            t.disparity_rmse - c.disparity_rmse,
            t.psnr_db - c.psnr_db,
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_HEADER}\n");
        let row = |out: &mut String, name: &str, m: &ViewMetrics| {
            let _ = writeln!(out, "{name},{},{},{}", m.psnr_db, m.normal_mae_deg, m.disparity_rmse);
        };
        for r in &self.rows {
            row(&mut out, &r.run, &r.metrics);
        }
        if let Some((dm, dr, dp)) = self.deltas() {
            let _ = writeln!(out, "delta,{dp},{dm},{dr}");
        }
        for r in &self.ablation {
            row(&mut out, &format!("ablation_{}", r.run), &r.metrics);
        }
        out
    }
}

/// Names and configs of the full run plus one run per dropped loss.
pub fn ablation_configs(full: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut out = vec![("full".to_string(), *full)];
    for (name, k) in [("no_L_d", 0), ("no_L_n", 1), ("no_L_b", 2), ("no_L_s", 3)] {
        let mut c = *full;
        let w = &mut c.train.loss_weights;
        *[&mut w.lambda_d, &mut w.lambda_n, &mut w.lambda_b, &mut w.lambda_s][k] = 0.0;
        out.push((name.to_string(), c));
    }
    out
}

fn depth_to_gray(depth: &[f64], mask: &[bool]) -> Vec<Vec3> {
    let (lo, hi) = depth
        .iter()
        .zip(mask)
        .filter(|(_, m)| **m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (d, _)| (lo.min(*d), hi.max(*d)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    depth
        .iter()
        .zip(mask)
        .map(|(d, m)| if *m { Vec3::repeat(1.0 - (d - lo) / span) } else { Vec3::zeros() })
        .collect()
}

/// Side-by-side panels: rendered colour, diffuse, specular and depth.
pub fn comparison_strip(view: &RenderedView) -> (usize, usize, Vec<Vec3>) {
    let mask: Vec<bool> = view.accumulation.iter().map(|a| *a >= crate::render::BACKGROUND_ACCUMULATION).collect();
    let depth = depth_to_gray(&view.depth, &mask);
    let panels = [&view.color, &view.diffuse, &view.specular, &depth];
    let (w, h) = (view.width, view.height);
    let mut px = Vec::with_capacity(4 * w * h);
    for y in 0..h {
        for p in panels {
            px.extend_from_slice(&p[y * w..(y + 1) * w]);
        }
    }
    (4 * w, h, px)
}

fn write_run_outputs(dir: &Path, run: &RunResult) -> Result<()> {
    let rows: Vec<(String, ViewMetrics)> = run
        .per_view
        .iter()
        .enumerate()
        .map(|(i, m)| (i.to_string(), *m))
        .collect();
    io::write_text(&dir.join(format!("{}_metrics.csv", run.name)), &io::metrics_csv(&rows))?;
    io::write_text(&dir.join(format!("{}_train_log.csv", run.name)), &io::train_log_csv(&run.log))?;
    io::save_checkpoint(&dir.join(format!("{}.bin", run.name)), &run.params)?;
    for (i, v) in run.rendered.iter().enumerate() {
        let (w, h, px) = comparison_strip(v);
        io::write_ppm(&dir.join(format!("{}_strip_{i:03}.ppm", run.name)), w, h, &px)?;
    }
    Ok(())
}

/// Runs treatment then control with the same seed, plus the ablation grid if requested.
///
/// With an output directory, `report.csv` is rewritten after every run so a failure
/// leaves the completed rows on disk.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<(Report, Vec<RunResult>)> {
    spec.validate()?;
    let data = Dataset::build(&spec.treatment)?;
    let mut report = Report {
        rows: Vec::new(),
        ablation: Vec::new(),
    };
    let flush = |report: &Report| -> Result<()> {
        if let Some(dir) = &spec.output_dir {
            io::write_text(&dir.join("report.csv"), &report.to_csv())?;
        }
        Ok(())
    };
    let mut runs = Vec::new();
    for (name, cfg) in [("treatment", &spec.treatment), ("control", &spec.control)] {
        let run = run_single(name, cfg, &data)?;
        if let Some(dir) = &spec.output_dir {
            write_run_outputs(dir, &run)?;
        }
        report.rows.push(ReportRow {
            run: name.to_string(),
            metrics: run.pooled,
        });
        flush(&report)?;
        runs.push(run);
    }
    if spec.ablation {
        for (name, cfg) in ablation_configs(&spec.treatment) {
            let metrics = if name == "full" {
                runs[0].pooled
            } else {
                run_single(&name, &cfg, &data)?.pooled
            };
            report.ablation.push(ReportRow { run: name, metrics });
            flush(&report)?;
        }
    }
    Ok((report, runs))
}

/// Stage table with regularised-step counts and the resulting time overhead.
///
/// `extra_cost` is the additional cost of a regularised step in units of a plain step.
pub fn schedule_preview(schedule: &CurriculumSchedule, extra_cost: f64) -> String {
    let mut out = String::from("stage,start,end,period,regularized_steps,cumulative_steps\n");
    for s in schedule.stages() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.stage, s.start, s.end, s.period, s.regularized_steps, s.cumulative_steps
        );
    }
    let total = schedule.regularized_step_count();
    let _ = writeln!(out, "# total_iterations={}", schedule.total_iterations());
    let _ = writeln!(out, "# regularized_steps={total}");
    let _ = writeln!(
        out,
        "# regularized_fraction={:.4}",
        total as f64 / schedule.total_iterations() as f64
    );
    let _ = writeln!(
        out,
        "# estimated_overhead={:.2}% (regularized step costs {} extra plain steps)",
        100.0 * schedule.overhead_fraction(extra_cost),
        extra_cost
    );
    out
}
