//! Parallel-beam Radon transform on a [`Grid`], its exact discrete transpose,
//! and additive white-noise simulation.
//!
//! For view angle `phi` the detector axis is `e = (cos phi, sin phi)` and
//! rays run along `d = (-sin phi, cos phi)`. Bin `b` integrates the image
//! over the line `s_b e + t d`. The integral is a Riemann sum over a fixed
//! lattice of `t` values with spacing `min(dx, dy) / 2`, each sample a
//! bilinear interpolation. [`adjoint`] scatters exactly the same weights, so
//! `<forward(f), g>_ds = <f, adjoint(g)>_dxdy` up to rounding.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField, Stencil};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    angles: Vec<f64>,
    num_bins: usize,
    s0: f64,
    s1: f64,
}

impl Geometry {
    pub fn new(angles: Vec<f64>, num_bins: usize, s0: f64, s1: f64) -> Result<Self> {
        if num_bins == 0 {
            return Err(Error::InvalidArgument("detector needs at least one bin".into()));
        }
        if !(s0.is_finite() && s1.is_finite()) || s1 <= s0 {
            return Err(Error::InvalidArgument(format!("degenerate detector range [{s0}, {s1}]")));
        }
        if angles.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument("view angles must be finite".into()));
        }
        Ok(Geometry { angles, num_bins, s0, s1 })
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn num_views(&self) -> usize {
        self.angles.len()
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn detector_range(&self) -> (f64, f64) {
        (self.s0, self.s1)
    }

    pub fn bin_width(&self) -> f64 {
        (self.s1 - self.s0) / self.num_bins as f64
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        self.s0 + (b as f64 + 0.5) * self.bin_width()
    }
}

/// Views of gate `i` (1-based): `(i - 1) offset_step + k pi / num_views`
/// for `k = 0..num_views`, uniform and half-open over a pi span.
pub fn gate_geometry(
    gate: usize,
    num_views: usize,
    num_bins: usize,
    detector: (f64, f64),
    offset_step: f64,
) -> Result<Geometry> {
    if gate == 0 {
        return Err(Error::InvalidArgument("gates are numbered from 1".into()));
    }
    if num_views == 0 {
        return Err(Error::InvalidArgument("a gate needs at least one view".into()));
    }
    let offset = (gate - 1) as f64 * offset_step;
    let angles = (0..num_views).map(|k| offset + k as f64 * PI / num_views as f64).collect();
    Geometry::new(angles, num_bins, detector.0, detector.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    geometry: Geometry,
    values: Array2<f64>,
}

impl Sinogram {
    pub fn zeros(geometry: Geometry) -> Self {
        let values = Array2::zeros((geometry.num_views(), geometry.num_bins()));
        Sinogram { geometry, values }
    }

    pub fn from_values(geometry: Geometry, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (geometry.num_views(), geometry.num_bins()) {
            return Err(Error::GeometryMismatch);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("sinogram values must be finite".into()));
        }
        Ok(Sinogram { geometry, values: values.as_standard_layout().into_owned() })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Data-space inner product, weighted by the bin width.
    pub fn inner(&self, other: &Sinogram) -> Result<f64> {
        if self.geometry != other.geometry {
            return Err(Error::GeometryMismatch);
        }
        let s: f64 = self.values.iter().zip(other.values.iter()).map(|(a, b)| a * b).sum();
        Ok(s * self.geometry.bin_width())
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() * self.geometry.bin_width()
    }

    pub fn sub(&self, other: &Sinogram) -> Result<Sinogram> {
        if self.geometry != other.geometry {
            return Err(Error::GeometryMismatch);
        }
        Ok(Sinogram { geometry: self.geometry.clone(), values: &self.values - &other.values })
    }

    pub fn scaled(&self, a: f64) -> Sinogram {
        Sinogram { geometry: self.geometry.clone(), values: self.values.mapv(|v| a * v) }
    }
}

/// Sampling lattice of one ray.
struct Ray {
    /// Index-space position of sample `k = 0` and the per-sample increment.
    start: [f64; 2],
    step: [f64; 2],
    k_range: std::ops::Range<usize>,
}

struct RayLattice {
    grid: Grid,
    /// Quadrature step along the ray, in world units.
    h: f64,
    t_min: f64,
    samples: usize,
}

impl RayLattice {
    fn new(grid: &Grid) -> Self {
        let e = grid.extent();
        let h = 0.5 * grid.dx().min(grid.dy());
        let r = [e.x0.hypot(e.y0), e.x0.hypot(e.y1), e.x1.hypot(e.y0), e.x1.hypot(e.y1)]
            .into_iter()
            .fold(0.0, f64::max);
        let samples = (2.0 * r / h).ceil() as usize;
        RayLattice { grid: *grid, h, t_min: -r, samples }
    }

    fn ray(&self, phi: f64, s: f64) -> Ray {
        let g = &self.grid;
        let (c, sn) = (phi.cos(), phi.sin());
        let t0 = self.t_min + 0.5 * self.h;
        let p0 = [s * c - t0 * sn, s * sn + t0 * c];
        let start = g.to_index(p0);
        let step = [-sn * self.h / g.dx(), c * self.h / g.dy()];

        // Clip the lattice to the hull of pixel centers (with a one-sample
        // margin); the stencil test below is the exact membership check.
        let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
        for (p, d, n) in [(start[0], step[0], g.nx()), (start[1], step[1], g.ny())] {
            let upper = (n - 1) as f64;
            if d.abs() < 1e-300 {
                if !(0.0..=upper).contains(&p) {
                    return Ray { start, step, k_range: 0..0 };
                }
            } else {
                let (a, b) = ((0.0 - p) / d, (upper - p) / d);
                lo = lo.max(a.min(b));
                hi = hi.min(a.max(b));
            }
        }
        if hi < lo {
            return Ray { start, step, k_range: 0..0 };
        }
        let k0 = (lo.floor() - 1.0).max(0.0) as usize;
        let k1 = ((hi.ceil() + 2.0).max(0.0) as usize).min(self.samples);
        Ray { start, step, k_range: k0.min(k1)..k1 }
    }

    #[inline]
    fn for_each_stencil(&self, ray: &Ray, mut f: impl FnMut(Stencil)) {
        for k in ray.k_range.clone() {
            let kf = k as f64;
            let fx = ray.start[0] + kf * ray.step[0];
            let fy = ray.start[1] + kf * ray.step[1];
            if let Some(st) = Stencil::at(&self.grid, fx, fy) {
                f(st);
            }
        }
    }
}

/// The discretized transform as a sparse matrix over (view, bin) rows.
/// Sample weights of one ray falling on the same pixel are merged, so
/// applying the matrix is much cheaper than re-walking the rays.
#[derive(Clone, Debug)]
pub struct Projector {
    geometry: Geometry,
    grid: Grid,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    weights: Vec<f64>,
}

impl Projector {
    pub fn new(geometry: &Geometry, grid: &Grid) -> Self {
        let lattice = RayLattice::new(grid);
        let ny = grid.ny();
        let per_view: Vec<Vec<Vec<(u32, f64)>>> = geometry
            .angles
            .par_iter()
            .map(|&phi| {
                (0..geometry.num_bins)
                    .map(|b| {
                        let ray = lattice.ray(phi, geometry.bin_center(b));
                        let mut entries = Vec::new();
                        lattice.for_each_stencil(&ray, |st| {
                            let (tx, ty) = (st.tx, st.ty);
                            for (k, w) in [
                                (st.base, (1.0 - tx) * (1.0 - ty)),
                                (st.base + ny, tx * (1.0 - ty)),
                                (st.base + 1, (1.0 - tx) * ty),
                                (st.base + ny + 1, tx * ty),
                            ] {
                                if w != 0.0 {
                                    entries.push((k as u32, w));
                                }
                            }
                        });
                        entries.sort_by_key(|e| e.0);
                        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len() / 2);
                        for (k, w) in entries {
                            match merged.last_mut() {
                                Some(last) if last.0 == k => last.1 += w,
                                _ => merged.push((k, w)),
                            }
                        }
                        for e in &mut merged {
                            e.1 *= lattice.h;
                        }
                        merged
                    })
                    .collect()
            })
            .collect();
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut weights = Vec::new();
        for row in per_view.into_iter().flatten() {
            for (k, w) in row {
                cols.push(k);
                weights.push(w);
            }
            row_ptr.push(cols.len());
        }
        Projector { geometry: geometry.clone(), grid: *grid, row_ptr, cols, weights }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    /// Line integrals of `f` along every (view, bin) ray.
    pub fn forward(&self, f: &ScalarField) -> Result<Sinogram> {
        self.grid.check_same(f.grid(), "projector built for another grid")?;
        let x = f.as_slice();
        let flat: Vec<f64> = (0..self.row_ptr.len() - 1)
            .map(|r| {
                let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
                self.cols[a..b].iter().zip(&self.weights[a..b]).map(|(&k, &w)| w * x[k as usize]).sum()
            })
            .collect();
        let values = Array2::from_shape_vec((self.geometry.num_views(), self.geometry.num_bins), flat)
            .expect("one row per ray");
        Ok(Sinogram { geometry: self.geometry.clone(), values })
    }

    /// Transpose of [`Projector::forward`] with respect to the weighted inner
    /// products: `<forward(f), g>_ds = <f, adjoint(g)>_dxdy`.
    pub fn adjoint(&self, g: &Sinogram) -> Result<ScalarField> {
        if g.geometry != self.geometry {
            return Err(Error::GeometryMismatch);
        }
        let scale = self.geometry.bin_width() / self.grid.cell_area();
        let mut out = ScalarField::zeros(self.grid);
        let acc = out.as_slice_mut();
        for (r, &gv) in g.values.iter().enumerate() {
            let c = gv * scale;
            if c == 0.0 {
                continue;
            }
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            for (&k, &w) in self.cols[a..b].iter().zip(&self.weights[a..b]) {
                acc[k as usize] += c * w;
            }
        }
        Ok(out)
    }
}

/// Line integrals of `f` along every (view, bin) ray of `geom`. Builds a
/// [`Projector`]; reuse one when projecting repeatedly.
pub fn forward(f: &ScalarField, geom: &Geometry) -> Sinogram {
    Projector::new(geom, f.grid()).forward(f).expect("projector built on the field grid")
}

/// Exact transpose of [`forward`] with respect to the weighted inner products.
pub fn adjoint(g: &Sinogram, geom: &Geometry, grid: &Grid) -> Result<ScalarField> {
    if &g.geometry != geom {
        return Err(Error::GeometryMismatch);
    }
    Projector::new(geom, grid).adjoint(g)
}

/// Adds i.i.d. Gaussian noise scaled so the realized SNR,
/// `10 log10(|g|^2 / |n|^2)`, equals `snr_db` exactly. An infinite target
/// returns the data unchanged.
pub fn add_noise(g: &Sinogram, snr_db: f64, seed: u64) -> Result<Sinogram> {
    if snr_db == f64::INFINITY {
        return Ok(g.clone());
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid SNR target {snr_db}")));
    }
    let signal: f64 = g.values.iter().map(|v| v * v).sum();
    if signal == 0.0 {
        return Err(Error::InvalidArgument("cannot reach a finite SNR on an all-zero signal".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..g.values.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let raw_energy: f64 = raw.iter().map(|v| v * v).sum();
    let target = signal * 10f64.powf(-snr_db / 10.0);
    let scale = (target / raw_energy).sqrt();
    let values = Array2::from_shape_fn(g.values.dim(), |(v, b)| {
        g.values[[v, b]] + scale * raw[v * g.values.ncols() + b]
    });
    Ok(Sinogram { geometry: g.geometry.clone(), values })
}

/// Realized SNR in dB of `noisy` against `clean`.
pub fn measured_snr_db(clean: &Sinogram, noisy: &Sinogram) -> f64 {
    let signal: f64 = clean.values.iter().map(|v| v * v).sum();
    let noise: f64 =
        clean.values.iter().zip(noisy.values.iter()).map(|(a, b)| (b - a) * (b - a)).sum();
    10.0 * (signal / noise).log10()
}
