//! Quadrature volume rendering and first-surface selection.

use rand::{Rng, RngCore};
use rayon::prelude::*;

use crate::field::{Aabb, FieldOutput, FieldParams, FieldQuery};
use crate::geometry::{frustum_moments, lift_gaussian, ConicalGaussian, Ray};
use crate::regularizers::SurfaceCandidate;
use crate::scene::{AnalyticScene, Camera};
use crate::{Error, Result, Vec3};

/// Accumulated opacity below which a ray counts as background.
pub const BACKGROUND_ACCUMULATION: f64 = 0.05;

/// Grey level seen through the transmittance left at the end of a ray.
pub const BACKGROUND_LEVEL: f64 = 1.0;

pub fn background_color() -> Vec3 {
    Vec3::repeat(BACKGROUND_LEVEL)
}

/// Default number of intervals per ray.
pub const DEFAULT_INTERVALS: usize = 64;

const EPS: f64 = 1e-10;

/// Anything that can be queried like a radiance field.
pub trait RadianceField: Sync {
    fn query(&self, q: &FieldQuery) -> FieldOutput;
}

impl RadianceField for FieldParams {
    fn query(&self, q: &FieldQuery) -> FieldOutput {
        FieldParams::query(self, q)
    }
}

impl RadianceField for AnalyticScene {
    fn query(&self, q: &FieldQuery) -> FieldOutput {
        self.analytic_query(q)
    }
}

/// Interval endpoints and their Gaussians along one ray, plus the field responses.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub gaussians: Vec<ConicalGaussian>,
    pub outputs: Vec<FieldOutput>,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.t.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Queries `field` at every interval mean along `ray`.
    pub fn query<F: RadianceField + ?Sized>(ray: &Ray, t: Vec<f64>, field: &F) -> Result<Self> {
        let gaussians = interval_gaussians(ray, &t)?;
        let outputs = gaussians
            .iter()
            .map(|g| {
                field.query(&FieldQuery {
                    position: g.mean3,
                    direction: ray.direction,
                    covariance: Some(g.cov3),
                })
            })
            .collect();
        Ok(Self {
            t,
            gaussians,
            outputs,
        })
    }
}

/// `k + 1` strictly increasing endpoints covering `[near, far]` in `k + 1` equal bins.
///
/// Endpoint `i` sits at `near + (i + u_i) * delta`; `u_i` is uniform per endpoint when
/// jitter is given and `0.5` otherwise, which keeps the sequence strictly increasing.
pub fn interval_endpoints(
    near: f64,
    far: f64,
    k: usize,
    jitter: Option<&mut dyn RngCore>,
) -> Vec<f64> {
    let delta = (far - near) / (k + 1) as f64;
    match jitter {
        Some(rng) => (0..=k)
            .map(|i| near + (i as f64 + rng.gen::<f64>()) * delta)
            .collect(),
        None => (0..=k).map(|i| near + (i as f64 + 0.5) * delta).collect(),
    }
}

pub fn interval_gaussians(ray: &Ray, t: &[f64]) -> Result<Vec<ConicalGaussian>> {
    if t.len() < 2 {
        return Err(Error::invalid("a ray needs at least one interval"));
    }
    t.windows(2)
        .map(|w| {
            if !(w[1] > w[0]) {
                return Err(Error::invalid("interval endpoints must be strictly increasing"));
            }
            Ok(lift_gaussian(ray, &frustum_moments(w[0], w[1], ray.radius_rate)?))
        })
        .collect()
}

/// Rendering weights `w_i = T_i alpha_i` and the transmittance `T_i` entering each interval.
///
/// Returns `(weights, transmittance, remainder)` where `remainder = T_K`.
pub fn composite_weights(tau: &[f64], deltas: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let mut weights = Vec::with_capacity(tau.len());
    let mut trans = Vec::with_capacity(tau.len());
    let mut optical = 0.0;
    let mut t_i = 1.0;
    for (tau, d) in tau.iter().zip(deltas) {
        trans.push(t_i);
        optical += tau * d;
        let t_next = (-optical).exp();
        // T_i - T_{i+1} = T_i (1 - exp(-tau delta))
        weights.push(t_i * -(-tau * d).exp_m1());
        t_i = t_next;
    }
    (weights, trans, t_i)
}

/// Back-propagates weight adjoints to densities.
///
/// `d tau_k = delta_k (g_k T_{k+1} - sum_{i>k} g_i w_i)`.
pub fn weights_backward(
    deltas: &[f64],
    weights: &[f64],
    trans: &[f64],
    remainder: f64,
    d_weights: &[f64],
) -> Vec<f64> {
    let k = weights.len();
    let mut d_tau = vec![0.0; k];
    let mut suffix = 0.0;
    for i in (0..k).rev() {
        let t_next = if i + 1 < k { trans[i + 1] } else { remainder };
        d_tau[i] = deltas[i] * (d_weights[i] * t_next - suffix);
        suffix += d_weights[i] * weights[i];
    }
    d_tau
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderResult {
    pub color: Vec3,
    /// Composited diffuse colour `sum w c_d`.
    pub diffuse: Vec3,
    /// Composited specular contribution `sum w s c_s`.
    pub specular: Vec3,
    pub weights: Vec<f64>,
    /// Transmittance remaining after the last interval.
    pub transmittance: f64,
    pub accumulation: f64,
    pub depth: f64,
    pub disparity: f64,
    pub normal: Vec3,
    pub background: bool,
}

/// Composites colour, depth, disparity and the weighted density normal.
pub fn render_ray(samples: &RaySamples) -> RenderResult {
    let tau: Vec<f64> = samples.outputs.iter().map(|o| o.tau).collect();
    let deltas = samples.deltas();
    let (weights, _, remainder) = composite_weights(&tau, &deltas);
    let mut color = Vec3::zeros();
    let mut diffuse = Vec3::zeros();
    let mut specular = Vec3::zeros();
    let mut normal = Vec3::zeros();
    let mut acc = 0.0;
    let mut depth_sum = 0.0;
    for (i, (w, o)) in weights.iter().zip(&samples.outputs).enumerate() {
        color += o.color() * *w;
        diffuse += o.c_d * *w;
        specular += o.tint.component_mul(&o.c_s) * *w;
        normal += o.normal * *w;
        acc += w;
        depth_sum += w * 0.5 * (samples.t[i] + samples.t[i + 1]);
    }
    let n = normal.norm();
    RenderResult {
        color: color + background_color() * remainder,
        diffuse,
        specular,
        weights,
        transmittance: remainder,
        accumulation: acc,
        depth: depth_sum / acc.max(EPS),
        disparity: acc / depth_sum.max(EPS),
        normal: if n > EPS { normal / n } else { Vec3::zeros() },
        background: acc < BACKGROUND_ACCUMULATION,
    }
}

/// Lower median: element `floor(K/2) - 1` of the sorted weights for even `K`.
pub fn lower_median(weights: &[f64]) -> f64 {
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = sorted.len();
    if k % 2 == 1 {
        sorted[k / 2]
    } else {
        sorted[k / 2 - 1]
    }
}

/// Index of the first weight strictly above the median.
pub fn first_above_median(weights: &[f64]) -> Option<usize> {
    if weights.is_empty() {
        return None;
    }
    let med = lower_median(weights);
    weights.iter().position(|w| *w > med)
}

/// First-surface candidate: the first interval whose weight exceeds the ray's median.
///
/// Returns `None` when nothing exceeds the median or the normal there is undefined.
pub fn select_surface(samples: &RaySamples, result: &RenderResult) -> Option<SurfaceCandidate> {
    let i = first_above_median(&result.weights)?;
    let out = &samples.outputs[i];
    if out.degenerate {
        return None;
    }
    let g = &samples.gaussians[i];
    Some(SurfaceCandidate {
        index: i,
        x_star: g.mean3,
        n_star: out.normal,
        w_star: result.weights[i],
        cov_star: g.cov3,
        sigma_r_star: g.sigma_r(),
    })
}

/// Sampling settings for whole-image rendering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub bounds: Aabb,
    pub n_intervals: usize,
}

/// Entry/exit distances and evaluation-time interval endpoints of a ray, if it hits the box.
pub fn eval_endpoints(ray: &Ray, opts: &RenderOptions) -> Option<Vec<f64>> {
    let (near, far) = opts.bounds.intersect(&ray.origin, &ray.direction)?;
    let near = near.max(1e-6);
    (far > near).then(|| interval_endpoints(near, far, opts.n_intervals, None))
}

/// Renders one ray, or the empty (background) result when it misses the bounds.
pub fn render_pixel<F: RadianceField + ?Sized>(
    field: &F,
    ray: &Ray,
    opts: &RenderOptions,
) -> RenderResult {
    match eval_endpoints(ray, opts).and_then(|t| RaySamples::query(ray, t, field).ok()) {
        Some(samples) => render_ray(&samples),
        None => RenderResult {
            color: background_color(),
            diffuse: Vec3::zeros(),
            specular: Vec3::zeros(),
            weights: Vec::new(),
            transmittance: 1.0,
            accumulation: 0.0,
            depth: 0.0,
            disparity: 0.0,
            normal: Vec3::zeros(),
            background: true,
        },
    }
}

/// Per-pixel rendering of one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub color: Vec<Vec3>,
    pub diffuse: Vec<Vec3>,
    pub specular: Vec<Vec3>,
    pub depth: Vec<f64>,
    pub disparity: Vec<f64>,
    pub normal: Vec<Vec3>,
    pub accumulation: Vec<f64>,
}

pub fn render_view<F: RadianceField + ?Sized>(
    field: &F,
    camera: &Camera,
    opts: &RenderOptions,
) -> RenderedView {
    let rays = camera.rays();
    let results: Vec<RenderResult> = rays
        .par_iter()
        .map(|ray| render_pixel(field, ray, opts))
        .collect();
    RenderedView {
        width: camera.width,
        height: camera.height,
        color: results.iter().map(|r| r.color).collect(),
        diffuse: results.iter().map(|r| r.diffuse).collect(),
        specular: results.iter().map(|r| r.specular).collect(),
        depth: results.iter().map(|r| r.depth).collect(),
        disparity: results.iter().map(|r| r.disparity).collect(),
        normal: results.iter().map(|r| r.normal).collect(),
        accumulation: results.iter().map(|r| r.accumulation).collect(),
    }
}
