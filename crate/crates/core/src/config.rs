//! Flat `section.key=value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional and
//! defaults to [`RunConfig::default`]; unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::curriculum::CurriculumSchedule;
use crate::field::{Aabb, FieldInit, FieldLayout};
use crate::scene::{orbit_cameras, AnalyticScene, Camera, SceneKind};
use crate::train::{LrSchedule, TrainConfig};
use crate::{Error, Result, Vec3};

/// Grid field shape and initialisation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldSetup {
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub density_res: usize,
    pub color_res: usize,
    pub n_features: usize,
    pub hidden: usize,
    pub density_bias: f64,
    pub density_noise: f64,
    pub feature_noise: f64,
}

impl Default for FieldSetup {
    fn default() -> Self {
        Self {
            bounds_min: Vec3::new(-1.25, -1.25, -0.3125),
            bounds_max: Vec3::new(1.25, 1.25, 0.3125),
            density_res: 64,
            color_res: 32,
            n_features: 4,
            hidden: 8,
            density_bias: -5.0,
            density_noise: 0.1,
            feature_noise: 0.1,
        }
    }
}

impl FieldSetup {
    pub fn bounds(&self) -> Result<Aabb> {
        Aabb::new(self.bounds_min, self.bounds_max).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn layout(&self) -> Result<FieldLayout> {
        FieldLayout::new(
            self.bounds()?,
            self.density_res,
            self.color_res,
            self.n_features,
            self.hidden,
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn init(&self, seed: u64) -> FieldInit {
        FieldInit {
            density_bias: self.density_bias,
            density_noise: self.density_noise,
            feature_noise: self.feature_noise,
            seed,
            ..FieldInit::default()
        }
    }
}

/// Synthetic dataset: an analytic scene seen from an orbit of cameras.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataSetup {
    pub scene: SceneKind,
    pub n_views: usize,
    pub heldout_views: usize,
    pub image_size: usize,
    pub camera_distance: f64,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub fov_deg: f64,
}

impl Default for DataSetup {
    fn default() -> Self {
        Self {
            scene: SceneKind::Plane,
            n_views: 20,
            heldout_views: 4,
            image_size: 48,
            camera_distance: 2.6,
            elevation_min_deg: 35.0,
            elevation_max_deg: 75.0,
            fov_deg: 40.0,
        }
    }
}

impl DataSetup {
    pub fn scene(&self) -> AnalyticScene {
        AnalyticScene::of_kind(self.scene)
    }

    /// Training cameras followed by held-out cameras.
    pub fn cameras(&self) -> Result<(Vec<Camera>, Vec<Camera>)> {
        let all = orbit_cameras(
            self.n_views + self.heldout_views,
            Vec3::zeros(),
            self.camera_distance,
            (self.elevation_min_deg, self.elevation_max_deg),
            self.fov_deg,
            self.image_size,
        )?;
        // Held-out views are interleaved so they cover the same orbit.
        let stride = if self.heldout_views > 0 {
            (self.n_views + self.heldout_views) / self.heldout_views
        } else {
            usize::MAX
        };
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, cam) in all.into_iter().enumerate() {
            if held.len() < self.heldout_views && i % stride == stride - 1 {
                held.push(cam);
            } else {
                train.push(cam);
            }
        }
        Ok((train, held))
    }
}

/// Everything a training run needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub field: FieldSetup,
    pub data: DataSetup,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::desk(),
            field: FieldSetup::default(),
            data: DataSetup::default(),
        }
    }
}

/// Every accepted key, in serialisation order.
pub const KEYS: &[&str] = &[
    "train.lr_schedule",
    "train.lr_init",
    "train.lr_final",
    "train.batch_size",
    "train.seed",
    "train.n_samples",
    "train.knn_k",
    "train.reg_fraction",
    "train.regularize",
    "train.n_intervals",
    "train.specular_norm",
    "train.checkpoint_every",
    "loss_weights.lambda_d",
    "loss_weights.lambda_n",
    "loss_weights.lambda_b",
    "loss_weights.lambda_s",
    "schedule.initial_period",
    "schedule.final_period",
    "schedule.total_iterations",
    "field.bounds_min",
    "field.bounds_max",
    "field.density_res",
    "field.color_res",
    "field.n_features",
    "field.hidden",
    "field.density_bias",
    "field.density_noise",
    "field.feature_noise",
    "data.scene",
    "data.n_views",
    "data.heldout_views",
    "data.image_size",
    "data.camera_distance",
    "data.elevation_min_deg",
    "data.elevation_max_deg",
    "data.fov_deg",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_vec3(key: &str, value: &str) -> Result<Vec3> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("{key} expects x,y,z, got '{value}'")));
    }
    Ok(Vec3::new(
        parse(key, parts[0])?,
        parse(key, parts[1])?,
        parse(key, parts[2])?,
    ))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        let (mut lr_kind, mut lr_init, mut lr_final) = match cfg.train.learning_rate {
            LrSchedule::Cosine { initial, final_lr } => ("cosine".to_string(), initial, final_lr),
            LrSchedule::Fixed(lr) => ("fixed".to_string(), lr, lr),
        };
        let mut sched = (
            cfg.train.schedule.initial_period(),
            cfg.train.schedule.final_period(),
            cfg.train.schedule.total_iterations(),
        );
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key '{key}'", lineno + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            let t = &mut cfg.train;
            let f = &mut cfg.field;
            let d = &mut cfg.data;
            match key {
                "train.lr_schedule" => {
                    if value != "cosine" && value != "fixed" {
                        return Err(Error::Config(format!("lr_schedule must be cosine or fixed, got '{value}'")));
                    }
                    lr_kind = value.to_string();
                }
                "train.lr_init" => lr_init = parse(key, value)?,
                "train.lr_final" => lr_final = parse(key, value)?,
                "train.batch_size" => t.batch_size = parse(key, value)?,
                "train.seed" => t.seed = parse(key, value)?,
                "train.n_samples" => t.n_samples = parse(key, value)?,
                "train.knn_k" => t.knn_k = parse(key, value)?,
                "train.reg_fraction" => t.reg_fraction = parse(key, value)?,
                "train.regularize" => t.regularize = parse(key, value)?,
                "train.n_intervals" => t.n_intervals = parse(key, value)?,
                "train.specular_norm" => t.specular_norm = parse(key, value)?,
                "train.checkpoint_every" => t.checkpoint_every = parse(key, value)?,
                "loss_weights.lambda_d" => t.loss_weights.lambda_d = parse(key, value)?,
                "loss_weights.lambda_n" => t.loss_weights.lambda_n = parse(key, value)?,
                "loss_weights.lambda_b" => t.loss_weights.lambda_b = parse(key, value)?,
                "loss_weights.lambda_s" => t.loss_weights.lambda_s = parse(key, value)?,
                "schedule.initial_period" => sched.0 = parse(key, value)?,
                "schedule.final_period" => sched.1 = parse(key, value)?,
                "schedule.total_iterations" => sched.2 = parse(key, value)?,
                "field.bounds_min" => f.bounds_min = parse_vec3(key, value)?,
                "field.bounds_max" => f.bounds_max = parse_vec3(key, value)?,
                "field.density_res" => f.density_res = parse(key, value)?,
                "field.color_res" => f.color_res = parse(key, value)?,
                "field.n_features" => f.n_features = parse(key, value)?,
                "field.hidden" => f.hidden = parse(key, value)?,
                "field.density_bias" => f.density_bias = parse(key, value)?,
                "field.density_noise" => f.density_noise = parse(key, value)?,
                "field.feature_noise" => f.feature_noise = parse(key, value)?,
                "data.scene" => d.scene = parse(key, value)?,
                "data.n_views" => d.n_views = parse(key, value)?,
                "data.heldout_views" => d.heldout_views = parse(key, value)?,
                "data.image_size" => d.image_size = parse(key, value)?,
                "data.camera_distance" => d.camera_distance = parse(key, value)?,
                "data.elevation_min_deg" => d.elevation_min_deg = parse(key, value)?,
                "data.elevation_max_deg" => d.elevation_max_deg = parse(key, value)?,
                "data.fov_deg" => d.fov_deg = parse(key, value)?,
                _ => unreachable!("key list and match arms out of sync"),
            }
        }
        cfg.train.learning_rate = if lr_kind == "fixed" {
            LrSchedule::Fixed(lr_init)
        } else {
            LrSchedule::Cosine {
                initial: lr_init,
                final_lr: lr_final,
            }
        };
        cfg.train.schedule = CurriculumSchedule::new(sched.0, sched.1, sched.2)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.field.layout()?;
        if self.data.n_views == 0 || self.data.image_size == 0 {
            return Err(Error::Config("data needs at least one view of positive size".into()));
        }
        if !(self.data.fov_deg > 0.0 && self.data.fov_deg < 180.0) {
            return Err(Error::Config("data.fov_deg must be in (0, 180)".into()));
        }
        if !(self.data.camera_distance > 0.0) {
            return Err(Error::Config("data.camera_distance must be positive".into()));
        }
        Ok(())
    }

    /// Serialises every key. Floats use the shortest representation that parses back exactly.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let f = &self.field;
        let d = &self.data;
        let (kind, lr_init, lr_final) = match t.learning_rate {
            LrSchedule::Cosine { initial, final_lr } => ("cosine", initial, final_lr),
            LrSchedule::Fixed(lr) => ("fixed", lr, lr),
        };
        let v3 = |v: &Vec3| format!("{},{},{}", v.x, v.y, v.z);
        let values: Vec<String> = vec![
            kind.to_string(),
            lr_init.to_string(),
            lr_final.to_string(),
            t.batch_size.to_string(),
            t.seed.to_string(),
            t.n_samples.to_string(),
            t.knn_k.to_string(),
            t.reg_fraction.to_string(),
            t.regularize.to_string(),
            t.n_intervals.to_string(),
            t.specular_norm.to_string(),
            t.checkpoint_every.to_string(),
            t.loss_weights.lambda_d.to_string(),
            t.loss_weights.lambda_n.to_string(),
            t.loss_weights.lambda_b.to_string(),
            t.loss_weights.lambda_s.to_string(),
            t.schedule.initial_period().to_string(),
            t.schedule.final_period().to_string(),
            t.schedule.total_iterations().to_string(),
            v3(&f.bounds_min),
            v3(&f.bounds_max),
            f.density_res.to_string(),
            f.color_res.to_string(),
            f.n_features.to_string(),
            f.hidden.to_string(),
            f.density_bias.to_string(),
            f.density_noise.to_string(),
            f.feature_noise.to_string(),
            d.scene.to_string(),
            d.n_views.to_string(),
            d.heldout_views.to_string(),
            d.image_size.to_string(),
            d.camera_distance.to_string(),
            d.elevation_min_deg.to_string(),
            d.elevation_max_deg.to_string(),
            d.fov_deg.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
