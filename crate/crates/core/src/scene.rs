//! Analytic ground-truth scenes and pinhole cameras.
//!
//! Scenes are a plane patch or a sphere with a smooth diffuse texture, a uniform tint
//! and a specular lobe about the mirror direction of a fixed light. The analytic field
//! wraps the surface in a Gaussian density ridge so the regularisers can be checked on
//! a field whose minimiser is known.

use std::f64::consts::PI;

use crate::field::{FieldOutput, FieldQuery};
use crate::geometry::Ray;
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    /// Square patch of half-width `half_extent` through `point`; `None` for an infinite plane.
    Plane {
        point: Vec3,
        normal: Vec3,
        half_extent: Option<f64>,
    },
    Sphere { center: Vec3, radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecularLobe {
    /// Unit direction the mirror reflection must match for a maximal response.
    pub light_dir: Vec3,
    pub sharpness: f64,
    pub color: Vec3,
}

impl SpecularLobe {
    /// `color * exp(sharpness (r . l - 1))`, `r` the reflection of `dir` about `normal`.
    pub fn eval(&self, dir: &Vec3, normal: &Vec3) -> Vec3 {
        let r = dir - normal * (2.0 * dir.dot(normal));
        self.color * (self.sharpness * (r.dot(&self.light_dir) - 1.0)).exp()
    }
}

/// Smooth two-tone texture `base + amplitude * sin(f u) sin(f v)` per channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Texture {
    pub base: Vec3,
    pub amplitude: Vec3,
    pub frequency: f64,
}

impl Texture {
    fn eval(&self, u: f64, v: f64) -> Vec3 {
        let s = (self.frequency * u).sin() * (self.frequency * v).sin();
        (self.base + self.amplitude * s).map(|c| c.clamp(0.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalyticScene {
    pub geometry: Geometry,
    pub texture: Texture,
    pub tint: Vec3,
    pub lobe: SpecularLobe,
    /// Peak density of the ridge.
    pub tau0: f64,
    /// Ridge standard deviation.
    pub sigma_g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Plane,
    Sphere,
}

impl std::str::FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plane" => Ok(SceneKind::Plane),
            "sphere" => Ok(SceneKind::Sphere),
            other => Err(Error::Config(format!("unknown scene `{other}`"))),
        }
    }
}

impl std::fmt::Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SceneKind::Plane => "plane",
            SceneKind::Sphere => "sphere",
        })
    }
}

fn plane_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    (u, v)
}

impl AnalyticScene {
    /// Textured plane `z = 0` with a highlight, the reference desk scene.
    pub fn plane_with_highlight() -> Self {
        Self {
            geometry: Geometry::Plane {
                point: Vec3::zeros(),
                normal: Vec3::z(),
                half_extent: Some(1.0),
            },
            texture: Texture {
                base: Vec3::new(0.45, 0.35, 0.25),
                amplitude: Vec3::new(0.25, 0.2, 0.15),
                frequency: 10.0,
            },
            tint: Vec3::repeat(1.0),
            lobe: SpecularLobe {
                light_dir: Vec3::new(0.3, 0.2, 1.0).normalize(),
                sharpness: 12.0,
                color: Vec3::repeat(0.5),
            },
            tau0: 50.0,
            sigma_g: 0.02,
        }
    }

    pub fn sphere_with_highlight() -> Self {
        Self {
            geometry: Geometry::Sphere {
                center: Vec3::zeros(),
                radius: 0.6,
            },
            ..Self::plane_with_highlight()
        }
    }

    pub fn of_kind(kind: SceneKind) -> Self {
        match kind {
            SceneKind::Plane => Self::plane_with_highlight(),
            SceneKind::Sphere => Self::sphere_with_highlight(),
        }
    }

    /// Same scene with the specular lobe switched off.
    pub fn lambertian(mut self) -> Self {
        self.lobe.color = Vec3::zeros();
        self
    }

    /// Closest surface point and outward geometric normal.
    pub fn closest_point(&self, x: &Vec3) -> (Vec3, Vec3) {
        match self.geometry {
            Geometry::Plane {
                point,
                normal,
                half_extent,
            } => {
                let rel = x - point;
                let (u, v) = plane_basis(&normal);
                let (mut a, mut b) = (rel.dot(&u), rel.dot(&v));
                if let Some(h) = half_extent {
                    a = a.clamp(-h, h);
                    b = b.clamp(-h, h);
                }
                (point + u * a + v * b, normal)
            }
            Geometry::Sphere { center, radius } => {
                let rel = x - center;
                let n = if rel.norm() > 1e-12 {
                    rel.normalize()
                } else {
                    Vec3::z()
                };
                (center + n * radius, n)
            }
        }
    }

    pub fn distance(&self, x: &Vec3) -> f64 {
        (x - self.closest_point(x).0).norm()
    }

    fn texture_at(&self, p: &Vec3) -> Vec3 {
        match self.geometry {
            Geometry::Plane { point, normal, .. } => {
                let (u, v) = plane_basis(&normal);
                let rel = p - point;
                self.texture.eval(rel.dot(&u), rel.dot(&v))
            }
            Geometry::Sphere { center, .. } => {
                let n = (p - center).normalize();
                let theta = n.z.clamp(-1.0, 1.0).acos();
                let phi = n.y.atan2(n.x);
                self.texture.eval(theta, phi)
            }
        }
    }

    /// Analytic field: Gaussian density ridge about the surface with the true normal.
    pub fn analytic_query(&self, q: &FieldQuery) -> FieldOutput {
        let (p, n) = self.closest_point(&q.position);
        let dist2 = (q.position - p).norm_squared();
        let tau = self.tau0 * (-dist2 / (2.0 * self.sigma_g * self.sigma_g)).exp();
        FieldOutput {
            tau,
            normal: n,
            degenerate: false,
            c_d: self.texture_at(&p),
            tint: self.tint,
            c_s: self.lobe.eval(&q.direction, &n).map(|c| c.clamp(0.0, 1.0)),
        }
    }

    /// First intersection of a ray with the surface: distance and normal facing the ray.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<(f64, Vec3)> {
        match self.geometry {
            Geometry::Plane {
                point,
                normal,
                half_extent,
            } => {
                let denom = dir.dot(&normal);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (point - origin).dot(&normal) / denom;
                if t <= 0.0 {
                    return None;
                }
                if let Some(h) = half_extent {
                    let (u, v) = plane_basis(&normal);
                    let rel = origin + dir * t - point;
                    if rel.dot(&u).abs() > h || rel.dot(&v).abs() > h {
                        return None;
                    }
                }
                let facing = if denom > 0.0 { -normal } else { normal };
                Some((t, facing))
            }
            Geometry::Sphere { center, radius } => {
                let oc = origin - center;
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = if -b - sq > 0.0 { -b - sq } else { -b + sq };
                if t <= 0.0 {
                    return None;
                }
                let n = (origin + dir * t - center).normalize();
                let facing = if n.dot(dir) > 0.0 { -n } else { n };
                Some((t, facing))
            }
        }
    }

    /// Surface radiance seen along `dir` at surface point `p` with facing normal `n`.
    pub fn radiance(&self, p: &Vec3, n: &Vec3, dir: &Vec3) -> Vec3 {
        let c_s = self.lobe.eval(dir, n).map(|c| c.clamp(0.0, 1.0));
        (self.texture_at(p) + self.tint.component_mul(&c_s)).map(|c| c.clamp(0.0, 1.0))
    }
}

/// Pinhole camera looking from `position` at `look_at`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub fov_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        position: Vec3,
        look_at: Vec3,
        up: Vec3,
        fov_deg: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::invalid(format!("field of view out of range: {fov_deg}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        let fwd = look_at - position;
        if fwd.norm() < 1e-12 || fwd.cross(&up).norm() < 1e-12 {
            return Err(Error::invalid("camera look direction is degenerate"));
        }
        Ok(Self {
            position,
            look_at,
            up,
            fov_deg,
            width,
            height,
        })
    }

    fn frame(&self) -> (Vec3, Vec3, Vec3) {
        let fwd = (self.look_at - self.position).normalize();
        let right = fwd.cross(&self.up).normalize();
        let up = right.cross(&fwd);
        (fwd, right, up)
    }

    /// Image-plane extent of one pixel at unit distance.
    pub fn pixel_size(&self) -> f64 {
        2.0 * (0.5 * self.fov_deg.to_radians()).tan() / self.width as f64
    }

    /// Footprint radius growth matching a pixel's area (`2 / sqrt(12)` of its width).
    pub fn radius_rate(&self) -> f64 {
        self.pixel_size() * 2.0 / 12f64.sqrt()
    }

    /// Ray through the centre of pixel `(px, py)`, row-major from the top-left.
    pub fn pixel_ray(&self, px: usize, py: usize) -> Ray {
        let (fwd, right, up) = self.frame();
        let s = self.pixel_size();
        let x = (px as f64 + 0.5 - 0.5 * self.width as f64) * s;
        let y = (0.5 * self.height as f64 - py as f64 - 0.5) * s;
        let d = (fwd + right * x + up * y).normalize();
        Ray::new(self.position, d, self.radius_rate()).expect("camera rays are valid")
    }

    pub fn rays(&self) -> Vec<Ray> {
        (0..self.height)
            .flat_map(|py| (0..self.width).map(move |px| (px, py)))
            .map(|(px, py)| self.pixel_ray(px, py))
            .collect()
    }
}

/// Cameras on a spherical cap around `target`, deterministic in `count`.
///
/// Azimuths advance by the golden angle and elevations sweep between the limits, so
/// any prefix of the sequence is spread around the scene.
pub fn orbit_cameras(
    count: usize,
    target: Vec3,
    distance: f64,
    elevation_deg: (f64, f64),
    fov_deg: f64,
    size: usize,
) -> Result<Vec<Camera>> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|i| {
            let f = if count > 1 {
                (i as f64 * 0.618_033_988_749_895).fract()
            } else {
                0.5
            };
            let elev = (elevation_deg.0 + (elevation_deg.1 - elevation_deg.0) * f).to_radians();
            let az = golden * i as f64;
            let pos = target
                + Vec3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()) * distance;
            Camera::new(pos, target, Vec3::z(), fov_deg, size, size)
        })
        .collect()
}

/// One analytic rendering: colour, depth and facing normal per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthView {
    pub width: usize,
    pub height: usize,
    pub color: Vec<Vec3>,
    /// Distance along the (unit) pixel ray; zero on background pixels.
    pub depth: Vec<f64>,
    pub normal: Vec<Vec3>,
    pub foreground: Vec<bool>,
}

/// Closed-form first-surface render of an analytic scene.
pub fn render_ground_truth(scene: &AnalyticScene, camera: &Camera) -> GroundTruthView {
    let n = camera.width * camera.height;
    let mut view = GroundTruthView {
        width: camera.width,
        height: camera.height,
        color: Vec::with_capacity(n),
        depth: Vec::with_capacity(n),
        normal: Vec::with_capacity(n),
        foreground: Vec::with_capacity(n),
    };
    for ray in camera.rays() {
        match scene.intersect(&ray.origin, &ray.direction) {
            Some((t, nrm)) => {
                let p = ray.at(t);
                view.color.push(scene.radiance(&p, &nrm, &ray.direction));
                view.depth.push(t);
                view.normal.push(nrm);
                view.foreground.push(true);
            }
            None => {
                view.color.push(crate::render::background_color());
                view.depth.push(0.0);
                view.normal.push(Vec3::zeros());
                view.foreground.push(false);
            }
        }
    }
    view
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ridge_peak_and_half_width() {
        let scene = AnalyticScene::plane_with_highlight();
        let on = scene.analytic_query(&FieldQuery::new(Vec3::new(0.2, 0.1, 0.0), Vec3::z()));
        assert!((on.tau - scene.tau0).abs() < 1e-12);
        let h = scene.sigma_g * (2.0 * 2f64.ln()).sqrt();
        let half = scene.analytic_query(&FieldQuery::new(Vec3::new(0.2, 0.1, h), Vec3::z()));
        assert!((half.tau - scene.tau0 / 2.0).abs() < 1e-10);
        assert_eq!(on.normal, Vec3::z());
    }

    #[test]
    fn lobe_peaks_at_mirror_direction() {
        let scene = AnalyticScene::plane_with_highlight();
        let l = scene.lobe.light_dir;
        // reflect(d, z) == l  <=>  d = reflect(l, z)
        let mirror = Vec3::new(l.x, l.y, -l.z);
        let at_mirror = scene.analytic_query(&FieldQuery::new(Vec3::zeros(), mirror));
        assert!((at_mirror.c_s - scene.lobe.color).norm() < 1e-12);
        let away = Vec3::new(-l.x, -l.y, l.z);
        let far = scene.analytic_query(&FieldQuery::new(Vec3::zeros(), away.normalize()));
        assert!(far.c_s.max() < 1e-6);
    }

    #[test]
    fn frontal_plane_depth_is_constant() {
        let scene = AnalyticScene::plane_with_highlight();
        let cam = Camera::new(Vec3::new(0.0, 0.0, 3.0), Vec3::zeros(), Vec3::y(), 30.0, 16, 16)
            .unwrap();
        let view = render_ground_truth(&scene, &cam);
        assert!(view.foreground.iter().all(|&f| f));
        // depth along the unit ray of a frontal plane is the perpendicular distance over cos
        for (k, ray) in cam.rays().iter().enumerate() {
            let perpendicular = view.depth[k] * ray.direction.dot(&-Vec3::z());
            assert!((perpendicular - 3.0).abs() < 1e-12);
            assert_eq!(view.normal[k], Vec3::z());
        }
    }

    #[test]
    fn sphere_silhouette_matches_closed_form() {
        let scene = AnalyticScene::sphere_with_highlight();
        let cam = Camera::new(Vec3::new(0.0, -3.0, 0.0), Vec3::zeros(), Vec3::z(), 40.0, 32, 32)
            .unwrap();
        let view = render_ground_truth(&scene, &cam);
        let (center, radius) = (Vec3::zeros(), 0.6);
        for (k, ray) in cam.rays().iter().enumerate() {
            // oracle: distance from the centre to the ray line
            let oc = center - ray.origin;
            let along = oc.dot(&ray.direction);
            let miss = (oc - ray.direction * along).norm();
            assert_eq!(view.foreground[k], miss <= radius, "pixel {k}");
            if view.foreground[k] {
                let t = along - (radius * radius - miss * miss).sqrt();
                assert!((view.depth[k] - t).abs() < 1e-9);
            }
        }
        assert!(view.foreground.iter().any(|f| !f));
    }

    #[test]
    fn lambertian_scene_is_view_independent() {
        let scene = AnalyticScene::plane_with_highlight().lambertian();
        let p = Vec3::new(0.3, -0.2, 0.0);
        let a = Vec3::new(1.0, 0.5, 2.0);
        let b = Vec3::new(-1.5, 0.2, 1.0);
        let ca = scene.intersect(&a, &(p - a).normalize()).unwrap();
        let cb = scene.intersect(&b, &(p - b).normalize()).unwrap();
        let ra = scene.radiance(&(a + (p - a).normalize() * ca.0), &ca.1, &(p - a).normalize());
        let rb = scene.radiance(&(b + (p - b).normalize() * cb.0), &cb.1, &(p - b).normalize());
        assert!((ra - rb).norm() < 1e-12);
    }

    #[test]
    fn orbit_cameras_look_at_target() {
        let cams = orbit_cameras(20, Vec3::zeros(), 3.0, (35.0, 70.0), 40.0, 8).unwrap();
        assert_eq!(cams.len(), 20);
        for c in &cams {
            assert!((c.position.norm() - 3.0).abs() < 1e-12);
            assert!(c.position.z > 0.0);
            let center = c.pixel_ray(4, 4);
            assert!(center.direction.dot(&(-c.position.normalize())) > 0.99);
        }
    }
}
