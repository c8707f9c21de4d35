//! Training loop: photometric loss plus scheduled surface regularisation.
//!
//! Gradients are computed in reverse mode by hand-written adjoints through the
//! renderer, the regularisation batches and the losses. Rays are processed in fixed
//! chunks whose gradients are reduced in chunk order, so a seeded run produces
//! the same bits regardless of the worker count.

use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::curriculum::CurriculumSchedule;
use crate::field::{ColorSample, DensitySample, FieldParams, HeadSample};
use crate::geometry::{ConicalGaussian, Ray};
use crate::regularizers::{
    build_directional_batch, build_spatial_batch, specular_denominator, total_regularization,
    LossBreakdown, LossWeights, RegBatch, RegOptions, SpecularNorm, SurfaceCandidate,
};
use crate::render::{
    composite_weights, first_above_median, interval_endpoints, interval_gaussians, render_ray,
    background_color, select_surface, weights_backward, RaySamples, DEFAULT_INTERVALS,
};
use crate::scene::{Camera, GroundTruthView};
use crate::sphere::{ray_rotation, stream_key, LatticeConfig, SampleSphere};
use crate::{Error, Result, Vec3};

/// Learning rate used when finetuning a pretrained field.
pub const FINETUNE_LR: f64 = 3.25e-4;

const CHUNK_RAYS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    /// Cosine decay from `initial` to `final_lr` over the schedule's iterations.
    Cosine { initial: f64, final_lr: f64 },
    Fixed(f64),
}

impl LrSchedule {
    pub fn at(&self, iteration: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Fixed(lr) => lr,
            LrSchedule::Cosine { initial, final_lr } => {
                let p = (iteration as f64 / total.max(1) as f64).min(1.0);
                final_lr + 0.5 * (initial - final_lr) * (1.0 + (PI * p).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: LrSchedule,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub schedule: CurriculumSchedule,
    pub seed: u64,
    /// Sphere samples per regularisation batch.
    pub n_samples: usize,
    pub knn_k: usize,
    /// Fraction of rays in a regularisation step that are regularised.
    pub reg_fraction: f64,
    pub regularize: bool,
    pub n_intervals: usize,
    pub specular_norm: SpecularNorm,
    /// Checkpoint period in iterations (0 disables).
    pub checkpoint_every: usize,
}

impl TrainConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self {
            learning_rate: LrSchedule::Cosine {
                initial: 0.05,
                final_lr: 0.005,
            },
            batch_size: 1024,
            loss_weights: LossWeights::default(),
            schedule: CurriculumSchedule::new(64, 4, 2000).expect("valid default schedule"),
            seed: 0,
            n_samples: LatticeConfig::DEFAULT_SAMPLES,
            knn_k: crate::regularizers::DEFAULT_KNN,
            reg_fraction: 1.0,
            regularize: true,
            n_intervals: DEFAULT_INTERVALS,
            specular_norm: SpecularNorm::ChannelMax,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        LatticeConfig::new(self.n_samples, self.seed).map_err(|e| Error::Config(e.to_string()))?;
        if self.knn_k == 0 || self.knn_k >= self.n_samples {
            return Err(Error::Config(format!(
                "knn_k must be in [1, n_samples), got {}",
                self.knn_k
            )));
        }
        if !(0.0..=1.0).contains(&self.reg_fraction) {
            return Err(Error::Config("reg_fraction must be in [0, 1]".into()));
        }
        if self.n_intervals == 0 {
            return Err(Error::Config("n_intervals must be positive".into()));
        }
        self.loss_weights.validate()
    }

    /// Configuration for finetuning: fixed learning rate, final-period regularisation only.
    pub fn finetune(&self, steps: usize, include_specular_bias: bool) -> Result<Self> {
        let mut cfg = *self;
        cfg.learning_rate = LrSchedule::Fixed(FINETUNE_LR);
        cfg.schedule = CurriculumSchedule::constant(self.schedule.final_period(), steps.max(1))?;
        if !include_specular_bias {
            cfg.loss_weights.lambda_b = 0.0;
        }
        Ok(cfg)
    }
}

/// One training pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRay {
    pub ray: Ray,
    pub near: f64,
    pub far: f64,
    pub target: Vec3,
}

/// All pixel rays that cross the field's bounds.
#[derive(Debug, Clone, Default)]
pub struct TrainingData {
    pub rays: Vec<TrainRay>,
}

impl TrainingData {
    pub fn from_views(
        cameras: &[Camera],
        views: &[GroundTruthView],
        bounds: &crate::field::Aabb,
    ) -> Result<Self> {
        if cameras.len() != views.len() {
            return Err(Error::DimensionMismatch("one view per camera required".into()));
        }
        let mut rays = Vec::new();
        for (cam, view) in cameras.iter().zip(views) {
            for (ray, target) in cam.rays().into_iter().zip(&view.color) {
                if let Some((near, far)) = bounds.intersect(&ray.origin, &ray.direction) {
                    let near = near.max(1e-6);
                    if far > near {
                        rays.push(TrainRay {
                            ray,
                            near,
                            far,
                            target: *target,
                        });
                    }
                }
            }
        }
        if rays.is_empty() {
            return Err(Error::invalid("no training ray crosses the field bounds"));
        }
        Ok(Self { rays })
    }
}

/// A ray of a batch with its sampled interval endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRay {
    pub ray_index: usize,
    pub t: Vec<f64>,
    /// Whether this ray is regularised if the step is a regularisation step.
    pub regularize: bool,
}

/// Batch for `iteration`, drawn from a stream keyed on the seed and iteration.
pub fn sample_batch(data: &TrainingData, config: &TrainConfig, iteration: usize) -> Vec<BatchRay> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_key(&[config.seed, iteration as u64, 0xBA7C]));
    (0..config.batch_size)
        .map(|_| {
            let ray_index = rng.gen_range(0..data.rays.len());
            let r = &data.rays[ray_index];
            let t = interval_endpoints(r.near, r.far, config.n_intervals, Some(&mut rng as &mut dyn RngCore));
            let regularize = config.reg_fraction >= 1.0 || rng.gen::<f64>() < config.reg_fraction;
            BatchRay {
                ray_index,
                t,
                regularize,
            }
        })
        .collect()
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn step(&mut self, values: &mut [f64], grad: &[f64], lr: f64) {
        self.steps += 1;
        let b1t = 1.0 - self.beta1.powi(self.steps as i32);
        let b2t = 1.0 - self.beta2.powi(self.steps as i32);
        for i in 0..values.len() {
            let g = grad[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            if g == 0.0 && *m == 0.0 && *v == 0.0 {
                continue;
            }
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / b1t;
            let v_hat = *v / b2t;
            values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Per-step losses, averaged over the batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub photometric: f64,
    pub losses: LossBreakdown,
    pub is_reg_step: bool,
    /// Regularisation batches built this step.
    pub reg_batches: usize,
}

impl StepReport {
    pub fn total(&self) -> f64 {
        self.photometric + self.losses.total()
    }
}

/// What a single ray contributed.
#[derive(Debug, Clone, Copy, Default)]
struct RayOutcome {
    photometric: f64,
    losses: LossBreakdown,
    reg_batch: bool,
    denominator: Option<f64>,
}

struct RayContext<'a> {
    params: &'a FieldParams,
    config: &'a TrainConfig,
    sphere: &'a SampleSphere,
    iteration: usize,
    reg_step: bool,
    photometric_scale: f64,
    reg_weights: LossWeights,
}

struct IntervalCache {
    gaussian: ConicalGaussian,
    density: DensitySample,
    color: ColorSample,
    head: HeadSample,
}

/// Forward and backward pass for one ray.
fn ray_pass(
    ctx: &RayContext,
    data: &TrainingData,
    batch_pos: usize,
    br: &BatchRay,
    frozen: Option<f64>,
    grad: &mut Vec<f64>,
) -> Result<RayOutcome> {
    let params = ctx.params;
    let tr = &data.rays[br.ray_index];
    let ray = &tr.ray;
    let gaussians = interval_gaussians(ray, &br.t)?;
    let cache: Vec<IntervalCache> = gaussians
        .into_iter()
        .map(|g| {
            let density = params.density_sample(&g.mean3);
            let color = params.color_sample(&g.mean3);
            let head = params.head_sample(color.features(), &ray.direction);
            IntervalCache {
                gaussian: g,
                density,
                color,
                head,
            }
        })
        .collect();
    let deltas: Vec<f64> = br.t.windows(2).map(|w| w[1] - w[0]).collect();
    let tau: Vec<f64> = cache.iter().map(|c| c.density.tau).collect();
    let (weights, trans, remainder) = composite_weights(&tau, &deltas);

    let mut color = Vec3::zeros();
    let mut sample_colors = Vec::with_capacity(cache.len());
    for (c, w) in cache.iter().zip(&weights) {
        let raw = c.color.c_d + c.color.tint.component_mul(&c.head.c_s);
        sample_colors.push(raw);
        color += raw.map(|v| v.clamp(0.0, 1.0)) * *w;
    }
    color += background_color() * remainder;
    let residual = color - tr.target;
    let mut outcome = RayOutcome {
        photometric: residual.norm_squared() * ctx.photometric_scale,
        ..Default::default()
    };
    let d_color = residual * (2.0 * ctx.photometric_scale);

    // the background enters through remainder = 1 - sum w
    let bg = background_color();
    let mut d_weights: Vec<f64> = sample_colors
        .iter()
        .map(|raw| (raw.map(|v| v.clamp(0.0, 1.0)) - bg).dot(&d_color))
        .collect();

    if ctx.reg_step && br.regularize {
        if let Some(i_star) = first_above_median(&weights) {
            let c_star = &cache[i_star];
            if !c_star.density.degenerate {
                let cand = SurfaceCandidate {
                    index: i_star,
                    x_star: c_star.gaussian.mean3,
                    n_star: c_star.density.normal,
                    w_star: weights[i_star],
                    cov_star: c_star.gaussian.cov3,
                    sigma_r_star: c_star.gaussian.sigma_r(),
                };
                let rotation = ray_rotation(ctx.config.seed, ctx.iteration as u64, batch_pos as u64);
                let sphere = ctx.sphere.rotated(&rotation);
                let (x_m, d_m) = build_spatial_batch(&cand, &sphere);
                let (x_phi, d_phi) = build_directional_batch(&cand, &sphere);
                let spatial: Vec<DensitySample> = x_m.iter().map(|x| params.density_sample(x)).collect();
                let heads: Vec<HeadSample> = d_phi
                    .iter()
                    .map(|d| params.head_sample(c_star.color.features(), d))
                    .collect();
                let batch = RegBatch {
                    spatial_tau: spatial.iter().map(|s| s.tau).collect(),
                    spatial_normals: spatial.iter().map(|s| s.normal).collect(),
                    directional_cs: heads.iter().map(|h| h.c_s).collect(),
                    spatial_points: x_m,
                    spatial_dirs: d_m,
                    directional_point: x_phi,
                    directional_dirs: d_phi,
                };
                let opts = RegOptions {
                    knn_k: ctx.config.knn_k,
                    specular_norm: ctx.config.specular_norm,
                    frozen_denominator: frozen,
                };
                outcome.denominator =
                    Some(frozen.unwrap_or_else(|| specular_denominator(&batch.directional_cs, opts.specular_norm)));
                let (losses, adj) = total_regularization(&cand, &batch, &ctx.reg_weights, &opts)?;
                outcome.losses = losses;
                outcome.reg_batch = true;

                for (s, (dt, dn)) in spatial.iter().zip(adj.d_tau.iter().zip(&adj.d_normals)) {
                    if *dt != 0.0 || dn.norm_squared() > 0.0 {
                        params.density_backward(s, *dt, dn, grad);
                    }
                }
                let mut d_features = vec![0.0; params.layout.n_features];
                for (h, dc) in heads.iter().zip(&adj.d_cs) {
                    if dc.norm_squared() > 0.0 {
                        let df = params.head_backward(h, dc, grad);
                        for (a, b) in d_features.iter_mut().zip(&df) {
                            *a += b;
                        }
                    }
                }
                if d_features.iter().any(|v| *v != 0.0) {
                    params.color_backward(&c_star.color, &Vec3::zeros(), &Vec3::zeros(), &d_features, grad);
                }
                if adj.d_n_star.norm_squared() > 0.0 {
                    params.density_backward(&c_star.density, 0.0, &adj.d_n_star, grad);
                }
                d_weights[i_star] += adj.d_w_star;
            }
        }
    }

    let d_tau = weights_backward(&deltas, &weights, &trans, remainder, &d_weights);
    for (i, c) in cache.iter().enumerate() {
        if d_tau[i] != 0.0 {
            params.density_backward(&c.density, d_tau[i], &Vec3::zeros(), grad);
        }
        let w = weights[i];
        if w == 0.0 {
            continue;
        }
        let mask = sample_colors[i].map(|v| if (0.0..=1.0).contains(&v) { 1.0 } else { 0.0 });
        let d_raw = (d_color * w).component_mul(&mask);
        if d_raw.norm_squared() == 0.0 {
            continue;
        }
        let d_cd = d_raw;
        let d_tint = d_raw.component_mul(&c.head.c_s);
        let d_cs = d_raw.component_mul(&c.color.tint);
        let d_features = params.head_backward(&c.head, &d_cs, grad);
        params.color_backward(&c.color, &d_cd, &d_tint, &d_features, grad);
    }
    Ok(outcome)
}

/// Loss and dense gradient of one batch.
#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub gradient: Vec<f64>,
    pub report: StepReport,
    /// Specular-bias denominators used per batch position (for frozen re-evaluation).
    pub denominators: Vec<Option<f64>>,
    pub total: f64,
}

/// Evaluates the training objective of `batch` at `iteration` and its gradient.
///
/// Pass `frozen` (from a previous evaluation) to hold the specular-bias denominators
/// fixed, e.g. for finite-difference checks of the stop-gradient.
pub fn evaluate_batch(
    params: &FieldParams,
    data: &TrainingData,
    config: &TrainConfig,
    iteration: usize,
    batch: &[BatchRay],
    frozen: Option<&[Option<f64>]>,
) -> Result<BatchEvaluation> {
    let sphere = SampleSphere::canonical(&LatticeConfig::new(config.n_samples, config.seed)?);
    let reg_step = config.regularize && config.schedule.is_reg_step(iteration % config.schedule.total_iterations());
    let reg_rays = batch.iter().filter(|b| b.regularize).count().max(1);
    let ctx = RayContext {
        params,
        config,
        sphere: &sphere,
        iteration,
        reg_step,
        photometric_scale: 1.0 / (3.0 * batch.len().max(1) as f64),
        reg_weights: config.loss_weights.scaled(1.0 / reg_rays as f64),
    };
    let chunks: Vec<(usize, &[BatchRay])> = batch
        .chunks(CHUNK_RAYS)
        .enumerate()
        .map(|(c, rays)| (c * CHUNK_RAYS, rays))
        .collect();
    let partials: Vec<Result<(Vec<f64>, Vec<RayOutcome>)>> = chunks
        .par_iter()
        .map(|(start, rays)| {
            let mut grad = vec![0.0; params.values.len()];
            let mut outcomes = Vec::with_capacity(rays.len());
            for (k, br) in rays.iter().enumerate() {
                let pos = start + k;
                let fz = frozen.and_then(|f| f.get(pos).copied().flatten());
                outcomes.push(ray_pass(&ctx, data, pos, br, fz, &mut grad)?);
            }
            Ok((grad, outcomes))
        })
        .collect();

    let mut gradient = vec![0.0; params.values.len()];
    let mut report = StepReport {
        iteration,
        is_reg_step: reg_step,
        ..Default::default()
    };
    let mut denominators = Vec::with_capacity(batch.len());
    let mut bad_rays = Vec::new();
    for part in partials {
        let (grad, outcomes) = part?;
        for (g, p) in gradient.iter_mut().zip(&grad) {
            *g += p;
        }
        for o in outcomes {
            if !(o.photometric.is_finite() && o.losses.is_finite()) {
                bad_rays.push(batch[denominators.len()].ray_index);
            }
            report.photometric += o.photometric;
            report.losses.accumulate(&o.losses);
            report.reg_batches += o.reg_batch as usize;
            denominators.push(o.denominator);
        }
    }
    let total = report.total();
    if !total.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
        let shown = &bad_rays[..bad_rays.len().min(8)];
        return Err(Error::NonFinite {
            iteration,
            detail: format!(
                "photometric={} L_d={} L_n={} L_b={} L_s={} rays={:?}{}",
                report.photometric,
                report.losses.l_d,
                report.losses.l_n,
                report.losses.l_b,
                report.losses.l_s,
                shown,
                if bad_rays.len() > shown.len() {
                    format!(" and {} more", bad_rays.len() - shown.len())
                } else {
                    String::new()
                }
            ),
        });
    }
    Ok(BatchEvaluation {
        gradient,
        report,
        denominators,
        total,
    })
}

/// Parameters plus optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: FieldParams,
    pub optimizer: Adam,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(params: FieldParams) -> Self {
        let n = params.values.len();
        Self {
            params,
            optimizer: Adam::new(n),
            iteration: 0,
        }
    }
}

/// One optimisation step on a freshly sampled batch.
pub fn train_step(state: &mut TrainState, data: &TrainingData, config: &TrainConfig) -> Result<StepReport> {
    let it = state.iteration;
    let batch = sample_batch(data, config, it);
    let eval = evaluate_batch(&state.params, data, config, it, &batch, None)?;
    let lr = config.learning_rate.at(it, config.schedule.total_iterations());
    state.optimizer.step(&mut state.params.values, &eval.gradient, lr);
    state.iteration += 1;
    Ok(eval.report)
}

/// Runs the schedule's full iteration count, reporting after every step.
pub fn train(
    state: &mut TrainState,
    data: &TrainingData,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepReport, &TrainState) -> Result<()>,
) -> Result<Vec<StepReport>> {
    config.validate()?;
    let total = config.schedule.total_iterations();
    let mut reports = Vec::with_capacity(total);
    while state.iteration < total {
        let r = train_step(state, data, config)?;
        on_step(&r, state)?;
        reports.push(r);
    }
    Ok(reports)
}

/// Continues training a pretrained field for `steps` iterations at the finetuning rate.
///
/// Regularisation (when enabled in `config`) runs at the final period throughout;
/// `include_specular_bias = false` drops `L_b` for fields without a diffuse branch.
pub fn finetune(
    params: FieldParams,
    data: &TrainingData,
    config: &TrainConfig,
    steps: usize,
    include_specular_bias: bool,
) -> Result<(FieldParams, Vec<StepReport>)> {
    if steps == 0 {
        return Ok((params, Vec::new()));
    }
    let cfg = config.finetune(steps, include_specular_bias)?;
    let mut state = TrainState::new(params);
    let reports = train(&mut state, data, &cfg, |_, _| Ok(()))?;
    Ok((state.params, reports))
}

/// Surface candidate, regularisation batch and unscaled losses of one ray.
#[derive(Debug, Clone)]
pub struct RayInspection {
    pub candidate: SurfaceCandidate,
    pub batch: RegBatch,
    pub losses: LossBreakdown,
}

/// Regularisation of a single ray with the rotation the trainer would draw for
/// `(iteration, ray_id)`, or `None` without a surface candidate.
pub fn inspect_ray(
    params: &FieldParams,
    ray: &Ray,
    t: Vec<f64>,
    config: &TrainConfig,
    iteration: usize,
    ray_id: usize,
) -> Result<Option<RayInspection>> {
    let samples = RaySamples::query(ray, t, params)?;
    let result = render_ray(&samples);
    let Some(candidate) = select_surface(&samples, &result) else {
        return Ok(None);
    };
    let sphere = SampleSphere::canonical(&LatticeConfig::new(config.n_samples, config.seed)?)
        .rotated(&ray_rotation(config.seed, iteration as u64, ray_id as u64));
    let batch = RegBatch::evaluate(params, &candidate, &sphere);
    let opts = RegOptions {
        knn_k: config.knn_k,
        specular_norm: config.specular_norm,
        frozen_denominator: None,
    };
    let (losses, _) = total_regularization(&candidate, &batch, &config.loss_weights, &opts)?;
    Ok(Some(RayInspection {
        candidate,
        batch,
        losses,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = LrSchedule::Cosine {
            initial: 0.1,
            final_lr: 0.01,
        };
        assert!((s.at(0, 100) - 0.1).abs() < 1e-15);
        assert!((s.at(100, 100) - 0.01).abs() < 1e-15);
        assert!((s.at(50, 100) - 0.055).abs() < 1e-12);
        assert_eq!(LrSchedule::Fixed(0.3).at(7, 10), 0.3);
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut adam = Adam::new(3);
        let mut v = vec![1.0, 2.0, 3.0];
        adam.step(&mut v, &[0.5, -0.5, 1.0], 0.0);
        assert_eq!(v, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2);
        let mut v = vec![1.0, 1.0];
        adam.step(&mut v, &[2.0, -3.0], 0.1);
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::desk();
        assert!(c.validate().is_ok());
        c.knn_k = 32;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.n_samples = 24;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn finetune_config_uses_fixed_rate_and_final_period() {
        let c = TrainConfig::desk().finetune(500, false).unwrap();
        assert_eq!(c.learning_rate, LrSchedule::Fixed(FINETUNE_LR));
        assert_eq!(c.schedule.n_stages(), 1);
        assert_eq!(c.schedule.initial_period(), 4);
        assert_eq!(c.loss_weights.lambda_b, 0.0);
    }
}
