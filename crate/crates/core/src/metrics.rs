//! Image, normal and disparity metrics against ground truth.
//!
//! Pixels count as foreground when the ground truth hits the surface and the rendered
//! accumulation reaches [`BACKGROUND_ACCUMULATION`]. Sums use Kahan compensation so
//! results do not depend on pixel order beyond rounding.

use crate::render::{RenderedView, BACKGROUND_ACCUMULATION};
use crate::scene::GroundTruthView;
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, Default)]
struct Kahan {
    sum: f64,
    c: f64,
}

impl Kahan {
    fn add(&mut self, x: f64) {
        let y = x - self.c;
        let t = self.sum + y;
        self.c = (t - self.sum) - y;
        self.sum = t;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewMetrics {
    /// `+inf` for a perfect reconstruction.
    pub psnr_db: f64,
    pub normal_mae_deg: f64,
    pub disparity_rmse: f64,
    /// Fraction of ground-truth foreground pixels that entered the normal/disparity terms.
    pub foreground_coverage: f64,
}

#[derive(Debug, Default, Clone)]
struct Accum {
    sq_err: Kahan,
    n_values: usize,
    angle: Kahan,
    disp_sq: Kahan,
    n_fg: usize,
    n_truth_fg: usize,
}

impl Accum {
    fn add_view(&mut self, rendered: &RenderedView, truth: &GroundTruthView) -> Result<()> {
        if rendered.width != truth.width || rendered.height != truth.height {
            return Err(Error::DimensionMismatch(format!(
                "rendered {}x{} vs truth {}x{}",
                rendered.width, rendered.height, truth.width, truth.height
            )));
        }
        let n = truth.width * truth.height;
        if rendered.color.len() != n || truth.color.len() != n {
            return Err(Error::DimensionMismatch("pixel buffers do not match image size".into()));
        }
        for p in 0..n {
            let diff: Vec3 = rendered.color[p] - truth.color[p];
            for k in 0..3 {
                self.sq_err.add(diff[k] * diff[k]);
            }
            self.n_values += 3;
            if !truth.foreground[p] {
                continue;
            }
            self.n_truth_fg += 1;
            if rendered.accumulation[p] < BACKGROUND_ACCUMULATION {
                continue;
            }
            self.n_fg += 1;
            let cos = rendered.normal[p].dot(&truth.normal[p]).clamp(-1.0, 1.0);
            self.angle.add(cos.acos().to_degrees());
            let d = rendered.disparity[p] - 1.0 / truth.depth[p];
            self.disp_sq.add(d * d);
        }
        Ok(())
    }

    fn finish(&self) -> ViewMetrics {
        let mse = self.sq_err.sum / self.n_values.max(1) as f64;
        let psnr_db = if mse > 0.0 { -10.0 * mse.log10() } else { f64::INFINITY };
        let fg = self.n_fg.max(1) as f64;
        ViewMetrics {
            psnr_db,
            normal_mae_deg: if self.n_fg > 0 { self.angle.sum / fg } else { f64::NAN },
            disparity_rmse: if self.n_fg > 0 { (self.disp_sq.sum / fg).sqrt() } else { f64::NAN },
            foreground_coverage: self.n_fg as f64 / self.n_truth_fg.max(1) as f64,
        }
    }
}

pub fn view_metrics(rendered: &RenderedView, truth: &GroundTruthView) -> Result<ViewMetrics> {
    let mut acc = Accum::default();
    acc.add_view(rendered, truth)?;
    Ok(acc.finish())
}

/// Pooled metrics over a set of views (MSE, angles and disparity errors pooled per pixel).
pub fn metrics(rendered: &[RenderedView], truth: &[GroundTruthView]) -> Result<ViewMetrics> {
    if rendered.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} rendered views vs {} ground-truth views",
            rendered.len(),
            truth.len()
        )));
    }
    let mut acc = Accum::default();
    for (r, t) in rendered.iter().zip(truth) {
        acc.add_view(r, t)?;
    }
    Ok(acc.finish())
}
