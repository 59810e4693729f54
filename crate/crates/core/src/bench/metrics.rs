//! Image-quality metrics against a ground truth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ScalarField;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ssim: f64,
    /// `+inf` for identical images.
    pub psnr: f64,
    pub nrmse: f64,
    pub mass: f64,
    pub mass_truth: f64,
}

pub fn metrics(rec: &ScalarField, gt: &ScalarField) -> Result<Metrics> {
    rec.grid().check_same(gt.grid(), "metrics on different grids")?;
    Ok(Metrics { ssim: ssim(rec, gt)?, psnr: psnr(rec, gt), nrmse: nrmse(rec, gt)?, mass: rec.mass(), mass_truth: gt.mass() })
}

fn gaussian_window() -> Vec<f64> {
    let c = (WINDOW / 2) as f64;
    let w: Vec<f64> = (0..WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Mean structural similarity over all window positions that fit inside
/// the image, dynamic range `max(gt) - min(gt)`.
pub fn ssim(rec: &ScalarField, gt: &ScalarField) -> Result<f64> {
    rec.grid().check_same(gt.grid(), "ssim on different grids")?;
    let (nx, ny) = gt.grid().shape();
    if nx < WINDOW || ny < WINDOW {
        return Err(Error::InvalidArgument(format!("ssim needs at least {WINDOW}x{WINDOW} pixels")));
    }
    let range = gt.max() - gt.min();
    let (c1, c2) = ((K1 * range).powi(2), (K2 * range).powi(2));
    let w = gaussian_window();
    let (a, b) = (rec.values(), gt.values());
    let (mx, my) = (nx - WINDOW + 1, ny - WINDOW + 1);
    let mut total = 0.0;
    for i in 0..mx {
        for j in 0..my {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (p, wp) in w.iter().enumerate() {
                for (q, wq) in w.iter().enumerate() {
                    let wt = wp * wq;
                    let (x, y) = (a[[i + p, j + q]], b[[i + p, j + q]]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (mx * my) as f64)
}

/// `10 log10(max(gt)^2 / mse)` with the plain per-pixel mean squared error.
pub fn psnr(rec: &ScalarField, gt: &ScalarField) -> f64 {
    let n = gt.values().len() as f64;
    let mse = rec.values().iter().zip(gt.values().iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (gt.max().powi(2) / mse).log10()
}

pub fn nrmse(rec: &ScalarField, gt: &ScalarField) -> Result<f64> {
    let norm = gt.norm();
    if norm == 0.0 {
        return Err(Error::InvalidArgument("ground truth has zero norm".into()));
    }
    Ok(rec.sub(gt).norm() / norm)
}
