//! Smoothing operator of the admissible velocity space.
//!
//! In Gaussian mode `K u (x) = sum_y k(x - y) u(y) dx dy` with
//! `k(r) = exp(-|r|^2 / (2 sigma^2))` applied to each component, i.e. a
//! quadrature of the integral operator with the matrix kernel `k I_2`. The
//! convolution is linear (zero padded to at least `2n - 1` per axis) and is
//! evaluated with one complex FFT per field by packing `ux + i uy`. The
//! identity mode turns the velocity update into a plain L2 gradient step.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, VectorField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    Gaussian,
    Identity,
}

#[derive(Clone)]
struct Spectrum {
    px: usize,
    py: usize,
    /// Transform of the padded, cell-area weighted kernel. The kernel is even
    /// on the padded lattice so its transform is real.
    kernel_hat: Vec<f64>,
    fwd_x: Arc<dyn Fft<f64>>,
    inv_x: Arc<dyn Fft<f64>>,
    fwd_y: Arc<dyn Fft<f64>>,
    inv_y: Arc<dyn Fft<f64>>,
}

#[derive(Clone)]
pub struct KernelOp {
    grid: Grid,
    sigma: f64,
    mode: KernelMode,
    spectrum: Option<Spectrum>,
}

impl std::fmt::Debug for KernelOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelOp")
            .field("grid", &self.grid)
            .field("sigma", &self.sigma)
            .field("mode", &self.mode)
            .finish()
    }
}

impl KernelOp {
    pub fn new(grid: Grid, sigma: f64, mode: KernelMode) -> Result<Self> {
        if mode == KernelMode::Identity {
            return Ok(KernelOp { grid, sigma, mode, spectrum: None });
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("kernel width must be positive, got {sigma}")));
        }
        let (nx, ny) = grid.shape();
        let (px, py) = (2 * nx, 2 * ny);
        let (dx, dy) = (grid.dx(), grid.dy());
        let area = grid.cell_area();
        let mut padded = vec![Complex64::new(0.0, 0.0); px * py];
        for di in -(nx as isize - 1)..=(nx as isize - 1) {
            for dj in -(ny as isize - 1)..=(ny as isize - 1) {
                let r2 = (di as f64 * dx).powi(2) + (dj as f64 * dy).powi(2);
                let i = di.rem_euclid(px as isize) as usize;
                let j = dj.rem_euclid(py as isize) as usize;
                padded[i * py + j] = Complex64::new(area * (-r2 / (2.0 * sigma * sigma)).exp(), 0.0);
            }
        }
        let mut planner = FftPlanner::new();
        let mut spectrum = Spectrum {
            px,
            py,
            kernel_hat: Vec::new(),
            fwd_x: planner.plan_fft_forward(px),
            inv_x: planner.plan_fft_inverse(px),
            fwd_y: planner.plan_fft_forward(py),
            inv_y: planner.plan_fft_inverse(py),
        };
        spectrum.transform(&mut padded, true);
        spectrum.kernel_hat = padded.iter().map(|c| c.re).collect();
        Ok(KernelOp { grid, sigma, mode, spectrum: Some(spectrum) })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mode(&self) -> KernelMode {
        self.mode
    }

    pub fn apply(&self, u: &VectorField) -> Result<VectorField> {
        self.grid.check_same(u.grid(), "kernel operator applied on a foreign grid")?;
        let Some(spec) = &self.spectrum else {
            return Ok(u.clone());
        };
        let (nx, ny) = self.grid.shape();
        let (px, py) = (spec.px, spec.py);
        let mut buf = vec![Complex64::new(0.0, 0.0); px * py];
        let (ux, uy) = u.slices();
        for i in 0..nx {
            for j in 0..ny {
                buf[i * py + j] = Complex64::new(ux[i * ny + j], uy[i * ny + j]);
            }
        }
        spec.transform(&mut buf, true);
        for (b, &k) in buf.iter_mut().zip(&spec.kernel_hat) {
            *b *= k;
        }
        spec.transform(&mut buf, false);
        let norm = 1.0 / (px * py) as f64;
        let mut out = VectorField::zeros(self.grid);
        let (ox, oy) = out.slices_mut();
        for i in 0..nx {
            for j in 0..ny {
                let c = buf[i * py + j];
                ox[i * ny + j] = c.re * norm;
                oy[i * ny + j] = c.im * norm;
            }
        }
        Ok(out)
    }
}

impl Spectrum {
    /// Unnormalized 2D transform of a `px x py` row-major buffer.
    fn transform(&self, buf: &mut [Complex64], forward: bool) {
        let (row_fft, col_fft) =
            if forward { (&self.fwd_y, &self.fwd_x) } else { (&self.inv_y, &self.inv_x) };
        row_fft.process(buf);
        let mut column = vec![Complex64::new(0.0, 0.0); self.px];
        for j in 0..self.py {
            for i in 0..self.px {
                column[i] = buf[i * self.py + j];
            }
            col_fft.process(&mut column);
            for i in 0..self.px {
                buf[i * self.py + j] = column[i];
            }
        }
    }
}

/// Fraction of discrete Fourier energy above half the Nyquist frequency in
/// either axis, summed over all fields.
pub fn high_frequency_fraction(fields: &[VectorField]) -> f64 {
    let Some(first) = fields.first() else {
        return 0.0;
    };
    let (nx, ny) = first.grid().shape();
    let mut planner = FftPlanner::new();
    let (fx, fy) = (planner.plan_fft_forward(nx), planner.plan_fft_forward(ny));
    let high = |k: usize, n: usize| 4 * k.min(n - k) > n;
    let (mut total, mut upper) = (0.0, 0.0);
    for field in fields {
        for comp in [field.ux(), field.uy()] {
            let spec = dft2(comp, fx.as_ref(), fy.as_ref());
            for ((i, j), c) in spec.indexed_iter() {
                let e = c.norm_sqr();
                total += e;
                if high(i, nx) || high(j, ny) {
                    upper += e;
                }
            }
        }
    }
    if total == 0.0 {
        0.0
    } else {
        upper / total
    }
}

fn dft2(a: &Array2<f64>, fx: &dyn Fft<f64>, fy: &dyn Fft<f64>) -> Array2<Complex64> {
    let (nx, ny) = a.dim();
    let mut out = a.mapv(|v| Complex64::new(v, 0.0));
    for mut row in out.rows_mut() {
        let mut tmp: Vec<_> = row.iter().copied().collect();
        fy.process(&mut tmp);
        row.iter_mut().zip(tmp).for_each(|(r, t)| *r = t);
    }
    for j in 0..ny {
        let mut tmp: Vec<_> = (0..nx).map(|i| out[[i, j]]).collect();
        fx.process(&mut tmp);
        for (i, t) in tmp.into_iter().enumerate() {
            out[[i, j]] = t;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{inner_vector, Extent};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vector(grid: Grid, seed: u64) -> VectorField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ux = Array2::from_shape_fn(grid.shape(), |_| rng.random_range(-1.0..1.0));
        let uy = Array2::from_shape_fn(grid.shape(), |_| rng.random_range(-1.0..1.0));
        VectorField::from_components(grid, ux, uy).unwrap()
    }

    /// O(n^4) direct summation of the quadrature.
    fn direct(grid: Grid, sigma: f64, u: &VectorField) -> VectorField {
        let (nx, ny) = grid.shape();
        let a = grid.cell_area();
        let mut ux = Array2::zeros((nx, ny));
        let mut uy = Array2::zeros((nx, ny));
        for i in 0..nx {
            for j in 0..ny {
                let p = grid.center(i, j);
                let (mut sx, mut sy) = (0.0, 0.0);
                for k in 0..nx {
                    for l in 0..ny {
                        let q = grid.center(k, l);
                        let w = (-((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2))
                            / (2.0 * sigma * sigma))
                            .exp();
                        sx += w * u.ux()[[k, l]];
                        sy += w * u.uy()[[k, l]];
                    }
                }
                ux[[i, j]] = a * sx;
                uy[[i, j]] = a * sy;
            }
        }
        VectorField::from_components(grid, ux, uy).unwrap()
    }

    #[test]
    fn construction() {
        let g = Grid::new(438, 438, Extent::centered(16.0)).unwrap();
        assert!(KernelOp::new(g, 2.0, KernelMode::Gaussian).is_ok());
        let h = Grid::new(120, 120, Extent::centered(4.5)).unwrap();
        assert!(KernelOp::new(h, 1.25, KernelMode::Gaussian).is_ok());
        assert!(KernelOp::new(h, 1.0, KernelMode::Gaussian).is_ok());
        assert!(KernelOp::new(h, 0.0, KernelMode::Gaussian).is_err());
        assert!(KernelOp::new(h, -1.0, KernelMode::Gaussian).is_err());
    }

    #[test]
    fn identity_mode_is_bitwise_identity() {
        let g = Grid::new(10, 12, Extent::centered(1.0)).unwrap();
        let op = KernelOp::new(g, 0.0, KernelMode::Identity).unwrap();
        let u = random_vector(g, 1);
        assert_eq!(op.apply(&u).unwrap(), u);
    }

    #[test]
    fn zero_maps_to_zero_and_foreign_grid_rejected() {
        let g = Grid::new(8, 8, Extent::centered(1.0)).unwrap();
        let op = KernelOp::new(g, 0.3, KernelMode::Gaussian).unwrap();
        let z = op.apply(&VectorField::zeros(g)).unwrap();
        assert!(z.ux().iter().chain(z.uy().iter()).all(|&v| v == 0.0));
        let other = Grid::new(8, 9, Extent::centered(1.0)).unwrap();
        assert!(op.apply(&VectorField::zeros(other)).is_err());
    }

    #[test]
    fn impulse_response_matches_direct_summation() {
        let g = Grid::new(16, 16, Extent::new(-2.0, 2.0, -1.0, 3.0)).unwrap();
        let sigma = 0.6;
        let op = KernelOp::new(g, sigma, KernelMode::Gaussian).unwrap();
        let mut ux = Array2::zeros((16, 16));
        ux[[5, 9]] = 1.0;
        let u = VectorField::from_components(g, ux, Array2::zeros((16, 16))).unwrap();
        let (fast, slow) = (op.apply(&u).unwrap(), direct(g, sigma, &u));
        let a = g.cell_area();
        for i in 0..16 {
            for j in 0..16 {
                assert!((fast.ux()[[i, j]] - slow.ux()[[i, j]]).abs() < 1e-10);
                assert!(fast.uy()[[i, j]].abs() < 1e-12);
            }
        }
        assert!((fast.ux()[[5, 9]] - a).abs() < 1e-12);
    }

    #[test]
    fn random_field_matches_direct_summation() {
        let g = Grid::new(16, 16, Extent::centered(2.0)).unwrap();
        let op = KernelOp::new(g, 0.5, KernelMode::Gaussian).unwrap();
        let u = random_vector(g, 3);
        let (fast, slow) = (op.apply(&u).unwrap(), direct(g, 0.5, &u));
        let diff = fast.ux().iter().zip(slow.ux()).chain(fast.uy().iter().zip(slow.uy()));
        assert!(diff.map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < 1e-10);
    }

    #[test]
    fn symmetric_and_positive_semidefinite() {
        let g = Grid::new(16, 16, Extent::centered(2.0)).unwrap();
        let op = KernelOp::new(g, 0.4, KernelMode::Gaussian).unwrap();
        for seed in 0..4 {
            let (u, w) = (random_vector(g, 2 * seed), random_vector(g, 2 * seed + 1));
            let lhs = inner_vector(&op.apply(&u).unwrap(), &w).unwrap();
            let rhs = inner_vector(&u, &op.apply(&w).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10);
            assert!(inner_vector(&op.apply(&u).unwrap(), &u).unwrap() >= -1e-12);
        }
    }

    #[test]
    fn smoothing_removes_high_frequencies() {
        let g = Grid::new(32, 32, Extent::centered(4.0)).unwrap();
        let op = KernelOp::new(g, 0.5, KernelMode::Gaussian).unwrap();
        let u = random_vector(g, 8);
        let before = high_frequency_fraction(std::slice::from_ref(&u));
        let after = high_frequency_fraction(&[op.apply(&u).unwrap()]);
        assert!(after < before, "{after} vs {before}");
        assert!(after < 0.01);
    }
}
