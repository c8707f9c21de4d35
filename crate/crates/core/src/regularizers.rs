//! Spatial and directional regularisation batches and the four surface losses.
//!
//! Every loss is evaluated per ray at its surface candidate. Along with the values,
//! [`total_regularization`] returns the adjoints of the loss with respect to the
//! quantities the field produced (densities, normals, specular colours, the candidate
//! weight and the candidate normal), which the trainer pushes back into the parameters.
//! The specular-bias denominator is a stop-gradient and never receives an adjoint.

use crate::field::FieldQuery;
use crate::render::RadianceField;
use crate::sphere::SampleSphere;
use crate::{Error, Mat3, Result, Vec3};

/// Below this norm the batch-max specular colour counts as zero and `L_b` vanishes.
pub const SPECULAR_GUARD: f64 = 1e-8;

/// Default neighbour count for the sphere total variation.
pub const DEFAULT_KNN: usize = 3;

/// First-surface point along a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceCandidate {
    /// Interval index along the ray.
    pub index: usize,
    pub x_star: Vec3,
    pub n_star: Vec3,
    pub w_star: f64,
    pub cov_star: Mat3,
    /// Radial standard deviation of the interval's Gaussian.
    pub sigma_r_star: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_n: f64,
    pub lambda_b: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 0.1,
            lambda_n: 0.1,
            lambda_b: 0.03,
            lambda_s: 0.001,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_d: 0.0,
            lambda_n: 0.0,
            lambda_b: 0.0,
            lambda_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_n", self.lambda_n),
            ("lambda_b", self.lambda_b),
            ("lambda_s", self.lambda_s),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            lambda_d: self.lambda_d * s,
            lambda_n: self.lambda_n * s,
            lambda_b: self.lambda_b * s,
            lambda_s: self.lambda_s * s,
        }
    }
}

/// How the specular-bias denominator summarises the batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpecularNorm {
    /// Norm of the per-channel maximum over the batch.
    #[default]
    ChannelMax,
    /// Largest per-sample norm.
    SampleMax,
}

impl std::str::FromStr for SpecularNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel_max" => Ok(SpecularNorm::ChannelMax),
            "sample_max" => Ok(SpecularNorm::SampleMax),
            other => Err(Error::Config(format!("unknown specular norm `{other}`"))),
        }
    }
}

impl std::fmt::Display for SpecularNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SpecularNorm::ChannelMax => "channel_max",
            SpecularNorm::SampleMax => "sample_max",
        })
    }
}

/// Spatial and directional samples at one candidate with the field's responses.
#[derive(Debug, Clone, PartialEq)]
pub struct RegBatch {
    pub spatial_points: Vec<Vec3>,
    pub spatial_dirs: Vec<Vec3>,
    pub directional_point: Vec3,
    pub directional_dirs: Vec<Vec3>,
    pub spatial_tau: Vec<f64>,
    /// Density normals; zero where the gradient is degenerate.
    pub spatial_normals: Vec<Vec3>,
    pub directional_cs: Vec<Vec3>,
}

impl RegBatch {
    /// Builds both batches and queries `field` for them.
    pub fn evaluate<F: RadianceField + ?Sized>(
        field: &F,
        cand: &SurfaceCandidate,
        sphere: &SampleSphere,
    ) -> Self {
        let (x_phi, d_phi) = build_directional_batch(cand, sphere);
        let (x_m, d_m) = build_spatial_batch(cand, sphere);
        let mut spatial_tau = Vec::with_capacity(x_m.len());
        let mut spatial_normals = Vec::with_capacity(x_m.len());
        for (x, d) in x_m.iter().zip(&d_m) {
            let out = field.query(&FieldQuery::new(*x, *d));
            spatial_tau.push(out.tau);
            spatial_normals.push(if out.degenerate { Vec3::zeros() } else { out.normal });
        }
        let directional_cs = d_phi
            .iter()
            .map(|d| field.query(&FieldQuery::new(x_phi, *d)).c_s)
            .collect();
        Self {
            spatial_points: x_m,
            spatial_dirs: d_m,
            directional_point: x_phi,
            directional_dirs: d_phi,
            spatial_tau,
            spatial_normals,
            directional_cs,
        }
    }
}

/// Directions flipped into the hemisphere of `n_star`; `sgn(0)` is taken as `+1`.
pub fn build_directional_batch(cand: &SurfaceCandidate, sphere: &SampleSphere) -> (Vec3, Vec<Vec3>) {
    let dirs = sphere
        .directions
        .iter()
        .map(|d| if d.dot(&cand.n_star) < 0.0 { -d } else { *d })
        .collect();
    (cand.x_star, dirs)
}

/// Ball points scaled to the candidate's half-maximum footprint radius.
pub fn build_spatial_batch(cand: &SurfaceCandidate, sphere: &SampleSphere) -> (Vec<Vec3>, Vec<Vec3>) {
    let scale = cand.sigma_r_star * (2.0 * 2f64.ln()).sqrt();
    let points = sphere
        .ball_points()
        .iter()
        .map(|p| cand.x_star + p * scale)
        .collect();
    (points, sphere.directions.clone())
}

/// Unit offset from the candidate, or `None` for a coincident sample.
fn unit_offset(x: &Vec3, x_star: &Vec3) -> Option<Vec3> {
    let off = x - x_star;
    let n = off.norm();
    (n > 0.0).then(|| off / n)
}

/// Density away from the tangent plane: `lambda w sum (1 - e^-tau) |u . n|`.
pub fn loss_density(cand: &SurfaceCandidate, batch: &RegBatch, lambda_d: f64) -> f64 {
    let mut sum = 0.0;
    for (x, tau) in batch.spatial_points.iter().zip(&batch.spatial_tau) {
        if let Some(u) = unit_offset(x, &cand.x_star) {
            sum += -(-tau).exp_m1() * u.dot(&cand.n_star).abs();
        }
    }
    lambda_d * cand.w_star * sum
}

/// Normal disagreement of dense samples: `lambda w sum (1 - e^-tau) (1 - n_j . n) / 2`.
pub fn loss_normal(cand: &SurfaceCandidate, batch: &RegBatch, lambda_n: f64) -> f64 {
    let mut sum = 0.0;
    for (n, tau) in batch.spatial_normals.iter().zip(&batch.spatial_tau) {
        if n.norm_squared() > 0.0 {
            sum += -(-tau).exp_m1() * (1.0 - n.dot(&cand.n_star)) / 2.0;
        }
    }
    lambda_n * cand.w_star * sum
}

/// Denominator of the specular-bias term, before the guard.
pub fn specular_denominator(c_s: &[Vec3], mode: SpecularNorm) -> f64 {
    match mode {
        SpecularNorm::ChannelMax => c_s
            .iter()
            .fold(Vec3::repeat(f64::NEG_INFINITY), |m, c| m.sup(c))
            .map(|v| v.max(0.0))
            .norm(),
        SpecularNorm::SampleMax => c_s.iter().map(|c| c.norm()).fold(0.0, f64::max),
    }
}

/// Specular energy relative to the batch maximum, with an explicit denominator.
pub fn loss_specular_bias_with(cand: &SurfaceCandidate, c_s: &[Vec3], lambda_b: f64, denom: f64) -> f64 {
    if !(denom >= SPECULAR_GUARD) {
        return 0.0;
    }
    let sum: f64 = c_s.iter().map(|c| c.norm_squared()).sum();
    lambda_b * cand.w_star * sum / (denom * denom)
}

/// `lambda w sum |c_j / ||max c|| |^2` with the per-channel maximum.
pub fn loss_specular_bias(cand: &SurfaceCandidate, c_s: &[Vec3], lambda_b: f64) -> f64 {
    let denom = specular_denominator(c_s, SpecularNorm::ChannelMax);
    loss_specular_bias_with(cand, c_s, lambda_b, denom)
}

/// `k` nearest neighbours of every direction by angular distance, self excluded.
///
/// Ties go to the lower index.
pub fn knn_directions(dirs: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = dirs.len();
    if n <= k {
        return Err(Error::invalid(format!(
            "sphere total variation needs more than {k} samples, got {n}"
        )));
    }
    Ok((0..n)
        .map(|j| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&i| i != j)
                .map(|i| (dirs[j].dot(&dirs[i]).clamp(-1.0, 1.0).acos(), i))
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            others.truncate(k);
            others.into_iter().map(|(_, i)| i).collect()
        })
        .collect())
}

/// Directed, cosine-weighted L1 variation of `c_s` over the kNN graph of `dirs`.
pub fn loss_sphere_tv(
    dirs: &[Vec3],
    c_s: &[Vec3],
    k: usize,
    cand: &SurfaceCandidate,
    lambda_s: f64,
) -> Result<f64> {
    if dirs.len() != c_s.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} directions but {} colours",
            dirs.len(),
            c_s.len()
        )));
    }
    let nbrs = knn_directions(dirs, k)?;
    let mut sum = 0.0;
    for (j, list) in nbrs.iter().enumerate() {
        for &i in list {
            let weight = 0.5 * (dirs[j].dot(&dirs[i]) + 1.0);
            sum += weight * (c_s[j] - c_s[i]).abs().sum();
        }
    }
    Ok(lambda_s * cand.w_star * sum)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_d: f64,
    pub l_n: f64,
    pub l_b: f64,
    pub l_s: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.l_d + self.l_n + self.l_b + self.l_s
    }

    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.l_d += other.l_d;
        self.l_n += other.l_n;
        self.l_b += other.l_b;
        self.l_s += other.l_s;
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}

/// Adjoints of the total regularisation with respect to the batch inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RegAdjoint {
    pub d_tau: Vec<f64>,
    pub d_normals: Vec<Vec3>,
    pub d_cs: Vec<Vec3>,
    pub d_w_star: f64,
    pub d_n_star: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegOptions {
    pub knn_k: usize,
    pub specular_norm: SpecularNorm,
    /// Replaces the live `L_b` denominator, e.g. to evaluate with it frozen.
    pub frozen_denominator: Option<f64>,
}

impl Default for RegOptions {
    fn default() -> Self {
        Self {
            knn_k: DEFAULT_KNN,
            specular_norm: SpecularNorm::ChannelMax,
            frozen_denominator: None,
        }
    }
}

/// Sum of the four losses and their adjoints.
///
/// Gradients reach `tau_j`, `n_j`, `c_s,j`, `w_star` and `n_star`. The `L_b`
/// denominator is held constant. The hemisphere flip and the neighbour graph are
/// piecewise constant and carry no gradient.
pub fn total_regularization(
    cand: &SurfaceCandidate,
    batch: &RegBatch,
    weights: &LossWeights,
    opts: &RegOptions,
) -> Result<(LossBreakdown, RegAdjoint)> {
    let n = batch.spatial_points.len();
    let m = batch.directional_dirs.len();
    if batch.spatial_tau.len() != n || batch.spatial_normals.len() != n || batch.directional_cs.len() != m {
        return Err(Error::DimensionMismatch("incomplete regularisation batch".into()));
    }
    let w = cand.w_star;
    let mut adj = RegAdjoint {
        d_tau: vec![0.0; n],
        d_normals: vec![Vec3::zeros(); n],
        d_cs: vec![Vec3::zeros(); m],
        d_w_star: 0.0,
        d_n_star: Vec3::zeros(),
    };

    // density and normal consistency
    let mut sum_d = 0.0;
    let mut sum_n = 0.0;
    for j in 0..n {
        let tau = batch.spatial_tau[j];
        let opacity = -(-tau).exp_m1();
        let d_opacity = (-tau).exp();
        if let Some(u) = unit_offset(&batch.spatial_points[j], &cand.x_star) {
            let dot = u.dot(&cand.n_star);
            sum_d += opacity * dot.abs();
            adj.d_tau[j] += weights.lambda_d * w * d_opacity * dot.abs();
            adj.d_n_star += u * (weights.lambda_d * w * opacity * dot.signum());
        }
        let nj = batch.spatial_normals[j];
        if nj.norm_squared() > 0.0 {
            let mis = (1.0 - nj.dot(&cand.n_star)) / 2.0;
            sum_n += opacity * mis;
            adj.d_tau[j] += weights.lambda_n * w * d_opacity * mis;
            adj.d_normals[j] = -cand.n_star * (weights.lambda_n * w * opacity / 2.0);
            adj.d_n_star -= nj * (weights.lambda_n * w * opacity / 2.0);
        }
    }
    let l_d = weights.lambda_d * w * sum_d;
    let l_n = weights.lambda_n * w * sum_n;
    adj.d_w_star += weights.lambda_d * sum_d + weights.lambda_n * sum_n;

    // specular bias
    let denom = opts
        .frozen_denominator
        .unwrap_or_else(|| specular_denominator(&batch.directional_cs, opts.specular_norm));
    let mut l_b = 0.0;
    if denom >= SPECULAR_GUARD && weights.lambda_b > 0.0 {
        let inv2 = 1.0 / (denom * denom);
        let energy: f64 = batch.directional_cs.iter().map(|c| c.norm_squared()).sum();
        l_b = weights.lambda_b * w * energy * inv2;
        adj.d_w_star += weights.lambda_b * energy * inv2;
        for (d, c) in adj.d_cs.iter_mut().zip(&batch.directional_cs) {
            *d += c * (2.0 * weights.lambda_b * w * inv2);
        }
    }

    // sphere total variation
    let mut l_s = 0.0;
    if weights.lambda_s > 0.0 {
        let nbrs = knn_directions(&batch.directional_dirs, opts.knn_k)?;
        let mut sum_s = 0.0;
        let (dirs, cs) = (&batch.directional_dirs, &batch.directional_cs);
        for (j, list) in nbrs.iter().enumerate() {
            for &i in list {
                let ew = 0.5 * (dirs[j].dot(&dirs[i]) + 1.0);
                let diff = cs[j] - cs[i];
                sum_s += ew * diff.abs().sum();
                let g = diff.map(f64::signum) * (weights.lambda_s * w * ew);
                adj.d_cs[j] += g;
                adj.d_cs[i] -= g;
            }
        }
        l_s = weights.lambda_s * w * sum_s;
        adj.d_w_star += weights.lambda_s * sum_s;
    }

    Ok((LossBreakdown { l_d, l_n, l_b, l_s }, adj))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::LatticeConfig;

    fn candidate(w_star: f64, sigma_r: f64) -> SurfaceCandidate {
        SurfaceCandidate {
            index: 0,
            x_star: Vec3::new(0.1, -0.2, 0.3),
            n_star: Vec3::z(),
            w_star,
            cov_star: Mat3::identity() * sigma_r * sigma_r,
            sigma_r_star: sigma_r,
        }
    }

    fn spatial_batch(points: Vec<Vec3>, tau: Vec<f64>, normals: Vec<Vec3>) -> RegBatch {
        let n = points.len();
        RegBatch {
            spatial_points: points,
            spatial_dirs: vec![Vec3::z(); n],
            directional_point: Vec3::zeros(),
            directional_dirs: Vec::new(),
            spatial_tau: tau,
            spatial_normals: normals,
            directional_cs: Vec::new(),
        }
    }

    fn sphere() -> SampleSphere {
        SampleSphere::canonical(&LatticeConfig::new(32, 0).unwrap())
    }

    #[test]
    fn directional_batch_flips_into_hemisphere() {
        let cand = candidate(1.0, 0.1);
        let mut s = sphere();
        s.directions[0] = cand.n_star;
        s.directions[1] = -cand.n_star;
        s.directions[2] = Vec3::x();
        let (x, dirs) = build_directional_batch(&cand, &s);
        assert_eq!(x, cand.x_star);
        assert_eq!(dirs[0], cand.n_star);
        assert_eq!(dirs[1], cand.n_star);
        assert_eq!(dirs[2], Vec3::x());
        assert!(dirs.iter().all(|d| d.dot(&cand.n_star) >= 0.0));
    }

    #[test]
    fn spatial_batch_scaling() {
        let cand = candidate(1.0, 0.0);
        let (pts, _) = build_spatial_batch(&cand, &sphere());
        assert!(pts.iter().all(|p| *p == cand.x_star));

        let cand = candidate(1.0, 0.37);
        let (pts, dirs) = build_spatial_batch(&cand, &sphere());
        let limit = 0.37 * (2.0 * 2f64.ln()).sqrt();
        assert!(pts.iter().all(|p| (p - cand.x_star).norm() <= limit + 1e-15));
        assert_eq!(dirs, sphere().directions);

        let mut s = sphere();
        s.directions[0] = Vec3::z();
        s.radii[0] = 1.0;
        let cand = candidate(1.0, 1.0);
        let (pts, _) = build_spatial_batch(&cand, &s);
        assert!((pts[0] - cand.x_star - Vec3::new(0.0, 0.0, 1.177_410_022_515_474_6)).norm() < 1e-12);
    }

    #[test]
    fn density_loss_examples() {
        let cand = candidate(0.5, 0.1);
        let up = cand.x_star + Vec3::z() * 0.05;
        let tangent = cand.x_star + Vec3::x() * 0.05;
        let b = spatial_batch(vec![up, tangent], vec![0.0, 0.0], vec![Vec3::z(); 2]);
        assert_eq!(loss_density(&cand, &b, 0.1), 0.0);
        let b = spatial_batch(vec![tangent], vec![5.0], vec![Vec3::z()]);
        assert_eq!(loss_density(&cand, &b, 0.1), 0.0);
        let b = spatial_batch(vec![up], vec![2f64.ln()], vec![Vec3::z()]);
        assert!((loss_density(&cand, &b, 0.1) - 0.025).abs() < 1e-15);
        // a coincident sample carries no evidence
        let b = spatial_batch(vec![cand.x_star], vec![5.0], vec![Vec3::z()]);
        assert_eq!(loss_density(&cand, &b, 0.1), 0.0);
    }

    #[test]
    fn normal_loss_examples() {
        let cand = candidate(1.0, 0.1);
        let p = vec![cand.x_star + Vec3::x() * 0.01; 3];
        let b = spatial_batch(p.clone(), vec![1.0; 3], vec![Vec3::z(); 3]);
        assert_eq!(loss_normal(&cand, &b, 0.1), 0.0);
        let b = spatial_batch(vec![p[0]], vec![1e3], vec![-Vec3::z()]);
        assert!((loss_normal(&cand, &b, 0.1) - 0.1).abs() < 1e-15);
        let b = spatial_batch(vec![p[0]], vec![2f64.ln()], vec![Vec3::x()]);
        assert!((loss_normal(&cand, &b, 1.0) - 0.25).abs() < 1e-15);
        let b = spatial_batch(vec![p[0]], vec![2f64.ln()], vec![Vec3::zeros()]);
        assert_eq!(loss_normal(&cand, &b, 1.0), 0.0);
    }

    #[test]
    fn specular_bias_examples() {
        let cand = candidate(1.0, 0.1);
        assert_eq!(loss_specular_bias(&cand, &[Vec3::zeros(); 8], 0.03), 0.0);
        let c = Vec3::new(0.2, 0.5, 0.1);
        let uniform = loss_specular_bias(&cand, &[c; 8], 0.03);
        assert!((uniform - 0.03 * 8.0).abs() < 1e-14);
        let mut sparse = vec![Vec3::zeros(); 8];
        sparse[3] = c;
        assert!((loss_specular_bias(&cand, &sparse, 0.03) - 0.03).abs() < 1e-15);
    }

    #[test]
    fn uniform_specular_is_maximal() {
        let cand = candidate(1.0, 0.1);
        let mut state = 1u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let cs: Vec<Vec3> = (0..16).map(|_| Vec3::new(next(), next(), next())).collect();
            assert!(loss_specular_bias(&cand, &cs, 0.03) <= 0.03 * 16.0 + 1e-12);
        }
    }

    #[test]
    fn sphere_tv_examples() {
        let cand = candidate(1.0, 0.1);
        let s = sphere();
        let cs = vec![Vec3::new(0.3, 0.2, 0.1); 32];
        assert_eq!(loss_sphere_tv(&s.directions, &cs, 3, &cand, 1.0).unwrap(), 0.0);

        // antipodal pair: zero edge weight
        let dirs = vec![Vec3::z(), -Vec3::z()];
        let cs = vec![Vec3::repeat(1.0), Vec3::zeros()];
        assert_eq!(loss_sphere_tv(&dirs, &cs, 1, &cand, 1.0).unwrap(), 0.0);

        // three mutually orthogonal samples, k = 1: neighbours by index tie-break
        let dirs = vec![Vec3::x(), Vec3::y(), Vec3::z()];
        let cs = vec![Vec3::x(), Vec3::zeros(), Vec3::zeros()];
        let nbrs = knn_directions(&dirs, 1).unwrap();
        assert_eq!(nbrs, vec![vec![1], vec![0], vec![0]]);
        // edges 0->1 and 2->0 carry an L1 gap of 1, edge 1->0 too: 3 edges * 0.5
        assert!((loss_sphere_tv(&dirs, &cs, 1, &cand, 1.0).unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn sphere_tv_needs_enough_samples() {
        let cand = candidate(1.0, 0.1);
        let dirs = vec![Vec3::x(), Vec3::y(), Vec3::z()];
        let cs = vec![Vec3::zeros(); 3];
        assert!(loss_sphere_tv(&dirs, &cs, 3, &cand, 1.0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_total() {
        let cand = candidate(0.7, 0.05);
        let s = sphere();
        let (x_m, d_m) = build_spatial_batch(&cand, &s);
        let (x_phi, d_phi) = build_directional_batch(&cand, &s);
        let batch = RegBatch {
            spatial_tau: vec![1.0; 32],
            spatial_normals: vec![Vec3::x(); 32],
            directional_cs: (0..32).map(|i| Vec3::repeat(i as f64 / 32.0)).collect(),
            spatial_points: x_m,
            spatial_dirs: d_m,
            directional_point: x_phi,
            directional_dirs: d_phi,
        };
        let (l, adj) = total_regularization(&cand, &batch, &LossWeights::zero(), &RegOptions::default()).unwrap();
        assert_eq!(l.total(), 0.0);
        assert_eq!(adj.d_w_star, 0.0);
        let (l, _) = total_regularization(&cand, &batch, &LossWeights::default(), &RegOptions::default()).unwrap();
        assert!(l.l_d > 0.0 && l.l_n > 0.0 && l.l_b > 0.0 && l.l_s > 0.0);
    }
}
