//! Deterministic sampling of the unit sphere and unit ball.
//!
//! Directions come from the uniform (zero-concentration) limit of the Fibonacci-Kronecker
//! lattice. Each direction is assigned to one of `log2(N)` shells so that the same set
//! of samples also covers the unit ball. A uniformly random rotation from SO(3) is
//! applied per use to remove orientation bias.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Mat3, Result, Vec3};

/// Validated lattice parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatticeConfig {
    n_samples: usize,
    seed: u64,
}

impl LatticeConfig {
    pub const DEFAULT_SAMPLES: usize = 32;

    pub fn new(n_samples: usize, seed: u64) -> Result<Self> {
        if n_samples < 2 || !n_samples.is_power_of_two() {
            return Err(Error::invalid(format!(
                "sample count must be a power of two >= 2, got {n_samples}"
            )));
        }
        Ok(Self { n_samples, seed })
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of ball shells, `log2(N)`.
    pub fn n_shells(&self) -> usize {
        self.n_samples.trailing_zeros() as usize
    }
}

/// Inverse golden ratio, `(sqrt(5) - 1) / 2`.
pub fn inverse_golden_ratio() -> f64 {
    (5f64.sqrt() - 1.0) / 2.0
}

/// Zero-concentration Fibonacci-Kronecker lattice with `n` points.
///
/// Point `i` (one-based) has polar coordinate `w = (N - 2i + 1) / N` and azimuth
/// `2 pi i / Phi`. The returned vector is indexed from zero, so element `k` is lattice
/// point `i = k + 1`.
pub fn fibonacci_sphere(n: usize) -> Result<Vec<Vec3>> {
    if n == 0 {
        return Err(Error::invalid("lattice needs at least one sample"));
    }
    let nf = n as f64;
    let inv_phi = inverse_golden_ratio();
    Ok((1..=n)
        .map(|i| {
            let fi = i as f64;
            let w = (nf - 2.0 * fi + 1.0) / nf;
            let rho = (1.0 - w * w).max(0.0).sqrt();
            let azimuth = 2.0 * PI * fi * inv_phi;
            Vec3::new(w, rho * azimuth.cos(), rho * azimuth.sin())
        })
        .collect())
}

/// Shell radius of array index `k` for `n_shells` shells: `(1 + k mod L) / L`.
pub fn shell_radius(k: usize, n_shells: usize) -> f64 {
    (1 + k % n_shells) as f64 / n_shells as f64
}

/// Scales each direction onto its shell so the set covers the unit ball.
///
/// The shell index uses the zero-based array position.
pub fn ball_partition(directions: &[Vec3]) -> Result<Vec<Vec3>> {
    let n = directions.len();
    if n < 2 || !n.is_power_of_two() {
        return Err(Error::invalid(format!(
            "ball partition needs a power-of-two sample count >= 2, got {n}"
        )));
    }
    let shells = n.trailing_zeros() as usize;
    Ok(directions
        .iter()
        .enumerate()
        .map(|(k, d)| d * shell_radius(k, shells))
        .collect())
}

/// Draws a rotation uniformly distributed over SO(3) (Arvo's method).
///
/// A random rotation about the z axis is followed by a Householder reflection about a
/// uniformly distributed plane; negating the reflection keeps the determinant at +1.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let x1: f64 = rng.gen();
    let x2: f64 = rng.gen();
    let x3: f64 = rng.gen();
    let theta = 2.0 * PI * x1;
    let phi = 2.0 * PI * x2;
    let (st, ct) = theta.sin_cos();
    let rz = Mat3::new(ct, st, 0.0, -st, ct, 0.0, 0.0, 0.0, 1.0);
    let r = x3.sqrt();
    let v = Vec3::new(phi.cos() * r, phi.sin() * r, (1.0 - x3).sqrt());
    let householder = Mat3::identity() - 2.0 * v * v.transpose();
    -householder * rz
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D1_049B_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based key derivation: mixes an arbitrary number of words into one seed.
pub fn stream_key(words: &[u64]) -> u64 {
    words
        .iter()
        .fold(0x5EED_u64, |acc, &w| splitmix64(acc ^ splitmix64(w)))
}

/// Random stream keyed on `(seed, iteration, ray)`. Independent of call order.
pub fn rotation_stream(seed: u64, iteration: u64, ray: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_key(&[seed, iteration, ray, 0x0507]))
}

/// Rotation for one ray at one regularisation step.
pub fn ray_rotation(seed: u64, iteration: u64, ray: u64) -> Mat3 {
    random_rotation(&mut rotation_stream(seed, iteration, ray))
}

/// `N` unit directions with their shell radii and the rotation applied to them.
///
/// `directions` are already rotated; `radii[k] * directions[k]` is the ball point.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSphere {
    pub directions: Vec<Vec3>,
    pub radii: Vec<f64>,
    pub rotation: Mat3,
}

impl SampleSphere {
    /// Unrotated lattice. Computed once and shared; use [`SampleSphere::rotated`] per ray.
    pub fn canonical(config: &LatticeConfig) -> Self {
        let n = config.n_samples();
        let shells = config.n_shells();
        let directions = fibonacci_sphere(n).expect("validated sample count");
        let radii = (0..n).map(|k| shell_radius(k, shells)).collect();
        Self {
            directions,
            radii,
            rotation: Mat3::identity(),
        }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Applies `rotation` on top of the current orientation.
    pub fn rotated(&self, rotation: &Mat3) -> Self {
        Self {
            directions: self.directions.iter().map(|d| rotation * d).collect(),
            radii: self.radii.clone(),
            rotation: rotation * self.rotation,
        }
    }

    /// Points in the unit ball, `radius_k * direction_k`.
    pub fn ball_points(&self) -> Vec<Vec3> {
        self.directions
            .iter()
            .zip(&self.radii)
            .map(|(d, r)| d * *r)
            .collect()
    }
}
