//! Ray geometry: conical-frustum Gaussians and virtual rays about a surface point.

use crate::sphere::SampleSphere;
use crate::{Error, Mat3, Result, Vec3};

/// A camera ray with its pixel footprint growth rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    /// Footprint radius per unit distance along the ray.
    pub radius_rate: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, radius_rate: f64) -> Result<Self> {
        if !(radius_rate > 0.0) || !radius_rate.is_finite() {
            return Err(Error::invalid(format!(
                "radius rate must be positive, got {radius_rate}"
            )));
        }
        let n = direction.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::invalid("ray direction must be non-zero"));
        }
        Ok(Self {
            origin,
            direction: direction / n,
            radius_rate,
        })
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Along-ray moments of a conical frustum between `t0` and `t1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrustumMoments {
    /// Mean distance along the ray.
    pub t_mu: f64,
    /// Variance along the ray.
    pub sigma_t2: f64,
    /// Variance perpendicular to the ray.
    pub sigma_r2: f64,
}

/// Closed-form Gaussian moments of the cone segment `[t0, t1]`.
///
/// Uses the midpoint/half-width parameterisation, which stays accurate as the segment
/// collapses: `sigma_t2 -> 0` and `sigma_r2 -> rdot^2 t^2 / 4`.
pub fn frustum_moments(t0: f64, t1: f64, radius_rate: f64) -> Result<FrustumMoments> {
    if !(t0 > 0.0) || !t0.is_finite() {
        return Err(Error::invalid(format!("t0 must be positive, got {t0}")));
    }
    if !(t1 >= t0) || !t1.is_finite() {
        return Err(Error::invalid(format!("t1 must be >= t0, got [{t0}, {t1}]")));
    }
    if !(radius_rate > 0.0) {
        return Err(Error::invalid(format!(
            "radius rate must be positive, got {radius_rate}"
        )));
    }
    let mid = 0.5 * (t0 + t1);
    let half = 0.5 * (t1 - t0);
    let mid2 = mid * mid;
    let half2 = half * half;
    let half4 = half2 * half2;
    let denom = 3.0 * mid2 + half2;
    let t_mu = mid + 2.0 * mid * half2 / denom;
    let sigma_t2 = half2 / 3.0 - (4.0 / 15.0) * half4 * (12.0 * mid2 - half2) / (denom * denom);
    let sigma_r2 = radius_rate
        * radius_rate
        * (mid2 / 4.0 + (5.0 / 12.0) * half2 - (4.0 / 15.0) * half4 / denom);
    Ok(FrustumMoments {
        t_mu: t_mu.clamp(t0, t1),
        sigma_t2: sigma_t2.max(0.0),
        sigma_r2: sigma_r2.max(0.0),
    })
}

/// A frustum Gaussian together with its lifted world-space mean and covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConicalGaussian {
    pub t_mu: f64,
    pub sigma_t2: f64,
    pub sigma_r2: f64,
    pub mean3: Vec3,
    pub cov3: Mat3,
}

impl ConicalGaussian {
    pub fn sigma_r(&self) -> f64 {
        self.sigma_r2.sqrt()
    }
}

/// Lifts along-ray moments to 3D: `cov = sigma_t2 d d^T + sigma_r2 (I - d d^T)`.
pub fn lift_gaussian(ray: &Ray, moments: &FrustumMoments) -> ConicalGaussian {
    let d = ray.direction;
    let ddt = d * d.transpose();
    let cov3 = ddt * moments.sigma_t2 + (Mat3::identity() - ddt) * moments.sigma_r2;
    ConicalGaussian {
        t_mu: moments.t_mu,
        sigma_t2: moments.sigma_t2,
        sigma_r2: moments.sigma_r2,
        mean3: ray.at(moments.t_mu),
        cov3,
    }
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Half-turn about an axis orthogonal to `d`, built from the least-aligned basis vector.
fn half_turn_orthogonal_to(d: &Vec3) -> Mat3 {
    let a = d.abs();
    let basis = if a.x <= a.y && a.x <= a.z {
        Vec3::x()
    } else if a.y <= a.z {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let u = d.cross(&basis).normalize();
    2.0 * u * u.transpose() - Mat3::identity()
}

/// Minimal-angle rotation taking `from` onto `to` (both unit vectors).
///
/// Exactly antiparallel inputs use a half-turn about a deterministic orthogonal axis.
pub fn rotation_between(from: &Vec3, to: &Vec3) -> Mat3 {
    let v = from.cross(to);
    let c = from.dot(to);
    let s2 = v.norm_squared();
    if c < 0.0 && s2 < 1e-24 {
        let flip = half_turn_orthogonal_to(from);
        let flipped = flip * from;
        return rotation_between(&flipped, to) * flip;
    }
    if c < 0.0 {
        // Two reflections: the first swaps from/to, the second fixes `to`. The product
        // turns about from x to, and stays accurate when that axis is poorly determined.
        let n1 = (from - to).normalize();
        let n2 = to.cross(&v.normalize());
        let h1 = Mat3::identity() - 2.0 * n1 * n1.transpose();
        let h2 = Mat3::identity() - 2.0 * n2 * n2.transpose();
        return h2 * h1;
    }
    let k = skew(&v);
    Mat3::identity() + k + k * k / (1.0 + c)
}

/// Virtual rays sharing the original ray's distance to the surface point.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualRayBatch {
    pub origins: Vec<Vec3>,
    pub directions: Vec<Vec3>,
    pub covariances: Vec<Mat3>,
    pub rotations: Vec<Mat3>,
}

/// Rotates the ray about `x_star` onto each sphere direction.
///
/// `o_s = R_s (o - x_star) + x_star` and `cov_s = R_s cov_star R_s^T`, where `R_s`
/// takes the ray direction onto the sample direction.
pub fn build_virtual_rays(
    ray: &Ray,
    x_star: &Vec3,
    cov_star: &Mat3,
    sphere: &SampleSphere,
) -> VirtualRayBatch {
    let n = sphere.len();
    let mut batch = VirtualRayBatch {
        origins: Vec::with_capacity(n),
        directions: Vec::with_capacity(n),
        covariances: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
    };
    let offset = ray.origin - x_star;
    for d_s in &sphere.directions {
        let r = rotation_between(&ray.direction, d_s);
        batch.origins.push(r * offset + x_star);
        batch.directions.push(*d_s);
        batch.covariances.push(r * cov_star * r.transpose());
        batch.rotations.push(r);
    }
    batch
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere::{ray_rotation, LatticeConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
        loop {
            let v = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 && n <= 1.0 {
                return v / n;
            }
        }
    }

    #[test]
    fn collapsed_segment_is_planar_isotropic() {
        let m = frustum_moments(2.0, 2.0, 0.1).unwrap();
        assert!((m.t_mu - 2.0).abs() < 1e-15);
        assert_eq!(m.sigma_t2, 0.0);
        assert!((m.sigma_r2 - 0.01).abs() < 1e-15);
    }

    #[test]
    fn near_collapsed_segment_is_close_to_limit() {
        let t0 = 2.0;
        let m = frustum_moments(t0, t0 * (1.0 + 1e-6), 0.1).unwrap();
        let lim = frustum_moments(t0, t0, 0.1).unwrap();
        assert!((m.t_mu - lim.t_mu).abs() / lim.t_mu < 1e-4);
        assert!(m.sigma_t2 / (lim.t_mu * lim.t_mu) < 1e-4);
        assert!((m.sigma_r2 - lim.sigma_r2).abs() / lim.sigma_r2 < 1e-4);
    }

    #[test]
    fn mean_stays_inside_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let t0 = rng.gen_range(1e-3..10.0);
            let t1 = t0 + rng.gen_range(0.0..20.0);
            let m = frustum_moments(t0, t1, rng.gen_range(1e-4..1.0)).unwrap();
            assert!(m.t_mu >= t0 && m.t_mu <= t1);
            assert!(m.sigma_t2 >= 0.0 && m.sigma_r2 >= 0.0);
        }
    }

    #[test]
    fn invalid_segments_rejected() {
        assert!(frustum_moments(0.0, 1.0, 0.1).is_err());
        assert!(frustum_moments(-1.0, 1.0, 0.1).is_err());
        assert!(frustum_moments(2.0, 1.0, 0.1).is_err());
        assert!(frustum_moments(1.0, 2.0, 0.0).is_err());
    }

    #[test]
    fn lift_along_z_is_diagonal() {
        let ray = Ray::new(Vec3::zeros(), Vec3::z(), 0.1).unwrap();
        let m = FrustumMoments {
            t_mu: 1.0,
            sigma_t2: 0.0,
            sigma_r2: 0.3,
        };
        let g = lift_gaussian(&ray, &m);
        assert!((g.cov3 - Mat3::from_diagonal(&Vec3::new(0.3, 0.3, 0.0))).norm() < 1e-15);
        assert_eq!(g.mean3, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn lift_eigenstructure() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let d = random_unit(&mut rng);
            let ray = Ray::new(Vec3::new(0.1, 0.2, 0.3), d, 0.05).unwrap();
            let m = FrustumMoments {
                t_mu: 2.0,
                sigma_t2: rng.gen_range(0.0..1.0),
                sigma_r2: rng.gen_range(0.0..1.0),
            };
            let g = lift_gaussian(&ray, &m);
            assert!((g.cov3.trace() - (m.sigma_t2 + 2.0 * m.sigma_r2)).abs() < 1e-12);
            assert!((g.cov3 * d - d * m.sigma_t2).norm() < 1e-12);
            let perp = d.cross(&Vec3::new(0.3, -0.7, 0.2)).normalize();
            assert!((g.cov3 * perp - perp * m.sigma_r2).norm() < 1e-12);
            assert!((g.cov3 - g.cov3.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn rotation_between_identity_and_quarter_turn() {
        let r = rotation_between(&Vec3::x(), &Vec3::x());
        assert!((r - Mat3::identity()).norm() < 1e-15);
        let r = rotation_between(&Vec3::x(), &Vec3::y());
        let rz90 = Mat3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - rz90).norm() < 1e-15);
    }

    #[test]
    fn rotation_between_antiparallel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cases = vec![Vec3::x(), Vec3::y(), Vec3::z()];
        cases.extend((0..50).map(|_| random_unit(&mut rng)));
        for d in cases {
            let r = rotation_between(&d, &-d);
            assert!((r * d + d).norm() < 1e-10);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
            assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-12);
            assert_eq!(r, rotation_between(&d, &-d));
        }
    }

    #[test]
    fn rotation_between_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let a = random_unit(&mut rng);
            let mut b = random_unit(&mut rng);
            if rng.gen_bool(0.2) {
                // nearly antiparallel
                b = (-a + b * 1e-7).normalize();
            }
            let r = rotation_between(&a, &b);
            assert!((r * a - b).norm() < 1e-10, "{a} -> {b}");
            assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-10);
            assert!((r.determinant() - 1.0).abs() < 1e-10);
            // minimal rotation keeps the common axis fixed
            let axis = a.cross(&b);
            if axis.norm() > 1e-6 {
                let axis = axis.normalize();
                assert!((r * axis - axis).norm() < 1e-9);
            }
        }
    }

    fn sphere32(seed: u64) -> SampleSphere {
        let cfg = LatticeConfig::new(32, seed).unwrap();
        SampleSphere::canonical(&cfg).rotated(&ray_rotation(seed, 0, 0))
    }

    #[test]
    fn virtual_rays_preserve_distance_and_spectrum() {
        let ray = Ray::new(Vec3::new(0.0, -3.0, 1.0), Vec3::new(0.0, 1.0, -0.3), 0.01).unwrap();
        let x_star = Vec3::new(0.1, 0.2, 0.0);
        let a = nalgebra::Matrix3::new(1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 0.3);
        let cov = a * a.transpose();
        let eig_ref = {
            let mut e: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
            e.sort_by(f64::total_cmp);
            e
        };
        let batch = build_virtual_rays(&ray, &x_star, &cov, &sphere32(4));
        let dist = (ray.origin - x_star).norm();
        for j in 0..batch.origins.len() {
            assert!(((batch.origins[j] - x_star).norm() - dist).abs() < 1e-9);
            let mut e: Vec<f64> = batch.covariances[j]
                .symmetric_eigenvalues()
                .iter()
                .copied()
                .collect();
            e.sort_by(f64::total_cmp);
            for (x, y) in e.iter().zip(&eig_ref) {
                assert!((x - y).abs() < 1e-9);
            }
            assert!((batch.rotations[j] * ray.direction - batch.directions[j]).norm() < 1e-10);
        }
    }

    #[test]
    fn virtual_ray_along_original_direction_is_fixed_point() {
        let ray = Ray::new(Vec3::new(0.0, 0.0, 3.0), -Vec3::z(), 0.01).unwrap();
        let x_star = Vec3::zeros();
        let cov = Mat3::from_diagonal(&Vec3::new(0.1, 0.2, 0.3));
        let mut sphere = sphere32(0);
        sphere.directions[0] = ray.direction;
        let batch = build_virtual_rays(&ray, &x_star, &cov, &sphere);
        assert!((batch.origins[0] - ray.origin).norm() < 1e-15);
        assert!((batch.covariances[0] - cov).norm() < 1e-15);
    }

    #[test]
    fn isotropic_covariance_is_rotation_invariant() {
        let ray = Ray::new(Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, -1.0, -1.0), 0.01).unwrap();
        let cov = Mat3::identity() * 0.04;
        let batch = build_virtual_rays(&ray, &Vec3::zeros(), &cov, &sphere32(8));
        for c in &batch.covariances {
            assert!((c - cov).norm() < 1e-15);
        }
    }
}
