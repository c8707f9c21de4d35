#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfreg::curriculum::CurriculumSchedule;
use surfreg::field::{Aabb, FieldInit, FieldLayout, FieldParams, GridDims};
use surfreg::scene::{orbit_cameras, render_ground_truth, AnalyticScene};
use surfreg::train::{sample_batch, BatchRay, LrSchedule, TrainConfig, TrainingData};
use surfreg::Vec3;

pub fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0);
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// 8^3 density grid with a noisy ridge near z = 0 and a 4^3 colour grid.
pub fn small_field(seed: u64) -> FieldParams {
    let bounds = Aabb::new(Vec3::new(-1.0, -1.0, -0.5), Vec3::new(1.0, 1.0, 0.5)).unwrap();
    let layout = FieldLayout::with_dims(bounds, GridDims::cube(8), GridDims::cube(4), 2, 4).unwrap();
    let mut p = FieldParams::new(
        layout,
        &FieldInit {
            seed,
            feature_noise: 0.5,
            ..FieldInit::default()
        },
    );
    p.fit_density(|x| 0.2 + 6.0 * (-(x.z * x.z) / (2.0 * 0.12 * 0.12)).exp());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for v in p.density_grid_mut() {
        *v += 0.3 * (rng.gen::<f64>() - 0.5);
    }
    let off = p.layout.color_offset();
    let end = p.layout.head_offset();
    for v in &mut p.values[off..end] {
        *v += 0.4 * (rng.gen::<f64>() - 0.5);
    }
    p
}

pub fn small_data(bounds: &Aabb) -> TrainingData {
    let scene = AnalyticScene::plane_with_highlight();
    let cams = orbit_cameras(3, Vec3::zeros(), 2.5, (40.0, 70.0), 40.0, 5).unwrap();
    let views: Vec<_> = cams.iter().map(|c| render_ground_truth(&scene, c)).collect();
    TrainingData::from_views(&cams, &views, bounds).unwrap()
}

/// Every step regularised, small batches and sphere.
pub fn small_config(batch_size: usize, steps: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: LrSchedule::Fixed(0.01),
        batch_size,
        schedule: CurriculumSchedule::constant(1, steps).unwrap(),
        n_samples: 8,
        knn_k: 3,
        n_intervals: 24,
        ..TrainConfig::desk()
    }
}

pub fn small_batch(data: &TrainingData, cfg: &TrainConfig) -> Vec<BatchRay> {
    sample_batch(data, cfg, 0)
}
