//! Rectangular grids, scalar and vector fields on them, and the discrete
//! calculus shared by the projector, the flow and the solver.
//!
//! Values are sampled at pixel centers `x0 + (i + 1/2) dx`. Arrays have shape
//! `(nx, ny)` in C order, so the flat index of pixel `(ix, iy)` is
//! `ix * ny + iy`. All inner products carry the cell area `dx * dy`, which
//! makes them quadratures of the corresponding integrals.
//!
//! Two divergence stencils are provided:
//!
//! + [`div`] is the exact negative adjoint of the forward-difference [`grad`]
//!   (Neumann boundary), used by the total-variation term.
//! + [`div_central`] is the central-difference divergence with replicated
//!   boundary values, used inside the transport updates.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical box `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Extent {
    pub fn new(x0: f64, x1: f64, y0: f64, y1: f64) -> Self {
        Extent { x0, x1, y0, y1 }
    }

    /// Square box `[-half, half]^2`.
    pub fn centered(half: f64) -> Self {
        Extent::new(-half, half, -half, half)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    nx: usize,
    ny: usize,
    extent: Extent,
}

impl Grid {
    pub fn new(nx: usize, ny: usize, extent: Extent) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2x2 pixels, got {nx}x{ny}")));
        }
        let Extent { x0, x1, y0, y1 } = extent;
        if !(x0.is_finite() && x1.is_finite() && y0.is_finite() && y1.is_finite()) {
            return Err(Error::InvalidGrid("extent must be finite".into()));
        }
        if x1 <= x0 || y1 <= y0 {
            return Err(Error::InvalidGrid(format!("degenerate extent {extent:?}")));
        }
        Ok(Grid { nx, ny, extent })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn extent(&self) -> Extent {
        self.extent
    }

    pub fn dx(&self) -> f64 {
        (self.extent.x1 - self.extent.x0) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.extent.y1 - self.extent.y0) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    /// Area of the whole box.
    pub fn area(&self) -> f64 {
        self.cell_area() * self.len() as f64
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// World coordinates of the center of pixel `(ix, iy)`.
    pub fn center(&self, ix: usize, iy: usize) -> [f64; 2] {
        [
            self.extent.x0 + (ix as f64 + 0.5) * self.dx(),
            self.extent.y0 + (iy as f64 + 0.5) * self.dy(),
        ]
    }

    /// Continuous pixel index of a world point; pixel centers map to integers.
    pub fn to_index(&self, p: [f64; 2]) -> [f64; 2] {
        [
            (p[0] - self.extent.x0) / self.dx() - 0.5,
            (p[1] - self.extent.y0) / self.dy() - 0.5,
        ]
    }

    pub(crate) fn check_same(&self, other: &Grid, what: &'static str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::GridMismatch(what))
        }
    }
}

/// Bilinear interpolation weights around a continuous index position.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    /// Flat index of the lower-left neighbour.
    pub base: usize,
    pub tx: f64,
    pub ty: f64,
}

impl Stencil {
    /// `None` when the position lies outside the hull of pixel centers.
    #[inline]
    pub fn at(grid: &Grid, fx: f64, fy: f64) -> Option<Stencil> {
        let (nx, ny) = (grid.nx, grid.ny);
        if !(fx >= 0.0 && fx <= (nx - 1) as f64 && fy >= 0.0 && fy <= (ny - 1) as f64) {
            return None;
        }
        let ix = (fx.floor() as usize).min(nx - 2);
        let iy = (fy.floor() as usize).min(ny - 2);
        Some(Stencil { base: ix * ny + iy, tx: fx - ix as f64, ty: fy - iy as f64 })
    }

    #[inline]
    pub fn sample(&self, values: &[f64], ny: usize) -> f64 {
        let b = self.base;
        let (tx, ty) = (self.tx, self.ty);
        (1.0 - tx) * (1.0 - ty) * values[b]
            + tx * (1.0 - ty) * values[b + ny]
            + (1.0 - tx) * ty * values[b + 1]
            + tx * ty * values[b + ny + 1]
    }

    /// Derivative of [`Stencil::sample`] with respect to the index position.
    #[inline]
    pub fn sample_gradient(&self, values: &[f64], ny: usize) -> [f64; 2] {
        let b = self.base;
        let (tx, ty) = (self.tx, self.ty);
        let (v00, v10, v01, v11) = (values[b], values[b + ny], values[b + 1], values[b + ny + 1]);
        [(1.0 - ty) * (v10 - v00) + ty * (v11 - v01), (1.0 - tx) * (v01 - v00) + tx * (v11 - v10)]
    }

    /// Transpose of [`Stencil::sample`]: adds `c` times the weights into `out`.
    #[inline]
    pub fn scatter(&self, out: &mut [f64], ny: usize, c: f64) {
        let b = self.base;
        let (tx, ty) = (self.tx, self.ty);
        out[b] += (1.0 - tx) * (1.0 - ty) * c;
        out[b + ny] += tx * (1.0 - ty) * c;
        out[b + 1] += (1.0 - tx) * ty * c;
        out[b + ny + 1] += tx * ty * c;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    grid: Grid,
    values: Array2<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        ScalarField { grid, values: Array2::zeros(grid.shape()) }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        ScalarField { grid, values: Array2::from_elem(grid.shape(), c) }
    }

    pub fn from_values(grid: Grid, values: Array2<f64>) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::GridMismatch("value array shape differs from grid"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("field values must be finite".into()));
        }
        Ok(ScalarField { grid, values: values.as_standard_layout().into_owned() })
    }

    /// Samples `f(x, y)` at every pixel center.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = Array2::from_shape_fn(grid.shape(), |(ix, iy)| {
            let [x, y] = grid.center(ix, iy);
            f(x, y)
        });
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub(crate) fn as_slice(&self) -> &[f64] {
        self.values.as_slice().expect("fields are stored in standard layout")
    }

    pub(crate) fn as_slice_mut(&mut self) -> &mut [f64] {
        self.values.as_slice_mut().expect("fields are stored in standard layout")
    }

    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.values[[ix, iy]]
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Integral of the field: `sum(f) * dx * dy`.
    pub fn mass(&self) -> f64 {
        self.values.sum() * self.grid.cell_area()
    }

    /// Weighted L2 norm.
    pub fn norm(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_area()).sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField { grid: self.grid, values: self.values.mapv(f) }
    }

    pub fn scaled(&self, a: f64) -> ScalarField {
        self.map(|v| a * v)
    }

    /// `self += a * other`.
    pub fn add_scaled(&mut self, a: f64, other: &ScalarField) {
        debug_assert_eq!(self.grid, other.grid);
        Zip::from(&mut self.values).and(&other.values).for_each(|s, &o| *s += a * o);
    }

    pub fn sub(&self, other: &ScalarField) -> ScalarField {
        debug_assert_eq!(self.grid, other.grid);
        ScalarField { grid: self.grid, values: &self.values - &other.values }
    }

    /// Elementwise `max(v, 0)`.
    pub fn clamp_nonnegative(&self) -> ScalarField {
        self.map(|v| v.max(0.0))
    }

    pub(crate) fn stencil(&self, p: [f64; 2]) -> Option<Stencil> {
        let [fx, fy] = self.grid.to_index(p);
        Stencil::at(&self.grid, fx, fy)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    ux: Array2<f64>,
    uy: Array2<f64>,
}

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        VectorField { grid, ux: Array2::zeros(grid.shape()), uy: Array2::zeros(grid.shape()) }
    }

    pub fn from_components(grid: Grid, ux: Array2<f64>, uy: Array2<f64>) -> Result<Self> {
        if ux.dim() != grid.shape() || uy.dim() != grid.shape() {
            return Err(Error::GridMismatch("component shape differs from grid"));
        }
        if ux.iter().chain(uy.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("vector field values must be finite".into()));
        }
        Ok(VectorField {
            grid,
            ux: ux.as_standard_layout().into_owned(),
            uy: uy.as_standard_layout().into_owned(),
        })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let mut ux = Array2::zeros(grid.shape());
        let mut uy = Array2::zeros(grid.shape());
        for ix in 0..grid.nx() {
            for iy in 0..grid.ny() {
                let [x, y] = grid.center(ix, iy);
                let [a, b] = f(x, y);
                ux[[ix, iy]] = a;
                uy[[ix, iy]] = b;
            }
        }
        VectorField { grid, ux, uy }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn ux(&self) -> &Array2<f64> {
        &self.ux
    }

    pub fn uy(&self) -> &Array2<f64> {
        &self.uy
    }

    pub fn components_mut(&mut self) -> (&mut Array2<f64>, &mut Array2<f64>) {
        (&mut self.ux, &mut self.uy)
    }

    pub(crate) fn slices(&self) -> (&[f64], &[f64]) {
        (self.ux.as_slice().expect("standard layout"), self.uy.as_slice().expect("standard layout"))
    }

    pub(crate) fn slices_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (
            self.ux.as_slice_mut().expect("standard layout"),
            self.uy.as_slice_mut().expect("standard layout"),
        )
    }

    /// Pointwise squared magnitude `|u|^2`.
    pub fn magnitude_squared(&self) -> ScalarField {
        let values = Zip::from(&self.ux).and(&self.uy).map_collect(|a, b| a * a + b * b);
        ScalarField { grid: self.grid, values }
    }

    pub fn max_magnitude(&self) -> f64 {
        Zip::from(&self.ux).and(&self.uy).fold(0.0f64, |m, a, b| m.max((a * a + b * b).sqrt()))
    }

    pub fn norm(&self) -> f64 {
        (self.ux.iter().chain(self.uy.iter()).map(|v| v * v).sum::<f64>() * self.grid.cell_area())
            .sqrt()
    }

    pub fn scaled(&self, a: f64) -> VectorField {
        VectorField { grid: self.grid, ux: self.ux.mapv(|v| a * v), uy: self.uy.mapv(|v| a * v) }
    }

    pub fn add_scaled(&mut self, a: f64, other: &VectorField) {
        debug_assert_eq!(self.grid, other.grid);
        Zip::from(&mut self.ux).and(&other.ux).for_each(|s, &o| *s += a * o);
        Zip::from(&mut self.uy).and(&other.uy).for_each(|s, &o| *s += a * o);
    }

    /// Multiplies both components pointwise by a scalar field.
    pub fn mul_scalar_field(&self, s: &ScalarField) -> VectorField {
        debug_assert_eq!(self.grid, s.grid);
        VectorField { grid: self.grid, ux: &self.ux * &s.values, uy: &self.uy * &s.values }
    }
}

/// Uniform time grid `tau_j = j / (M N)` refining the gate grid `t_i = i / N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    gates: usize,
    degree: usize,
}

impl TimeGrid {
    pub fn new(gates: usize, degree: usize) -> Result<Self> {
        if gates == 0 || degree == 0 {
            return Err(Error::InvalidArgument(format!(
                "time grid needs N >= 1 and M >= 1, got N={gates} M={degree}"
            )));
        }
        Ok(TimeGrid { gates, degree })
    }

    /// Gate count `N`.
    pub fn gates(&self) -> usize {
        self.gates
    }

    /// Time-degree factor `M`.
    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Number of fine steps `M N`.
    pub fn steps(&self) -> usize {
        self.gates * self.degree
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps() as f64
    }

    pub fn tau(&self, j: usize) -> f64 {
        j as f64 / self.steps() as f64
    }

    pub fn gate_time(&self, i: usize) -> f64 {
        i as f64 / self.gates as f64
    }

    /// Fine index of gate `i`, i.e. `i M`.
    pub fn gate_step(&self, i: usize) -> usize {
        i * self.degree
    }

    /// Number of gates `i >= 1` with `i M >= j`.
    pub fn gates_at_or_after(&self, j: usize) -> usize {
        (1..=self.gates).filter(|&i| self.gate_step(i) >= j).count()
    }
}

/// Bilinear interpolation at world points; points outside the hull of pixel
/// centers evaluate to zero.
pub fn interp(f: &ScalarField, pts: &[[f64; 2]]) -> Vec<f64> {
    let ny = f.grid.ny();
    let values = f.as_slice();
    pts.iter()
        .map(|&p| f.stencil(p).map_or(0.0, |st| st.sample(values, ny)))
        .collect()
}

/// Weighted L2 inner product `sum(f g) dx dy`.
pub fn inner(f: &ScalarField, g: &ScalarField) -> Result<f64> {
    f.grid.check_same(&g.grid, "inner product of fields on different grids")?;
    Ok(Zip::from(&f.values).and(&g.values).fold(0.0, |acc, a, b| acc + a * b) * f.grid.cell_area())
}

pub fn inner_vector(u: &VectorField, w: &VectorField) -> Result<f64> {
    u.grid.check_same(&w.grid, "inner product of vector fields on different grids")?;
    let sx = Zip::from(&u.ux).and(&w.ux).fold(0.0, |acc, a, b| acc + a * b);
    let sy = Zip::from(&u.uy).and(&w.uy).fold(0.0, |acc, a, b| acc + a * b);
    Ok((sx + sy) * u.grid.cell_area())
}

/// Forward differences with a zero outward difference on the last row and
/// column (Neumann boundary).
pub fn grad(f: &ScalarField) -> VectorField {
    let g = f.grid;
    let (nx, ny) = g.shape();
    let (dx, dy) = (g.dx(), g.dy());
    let v = &f.values;
    let mut ux = Array2::zeros((nx, ny));
    let mut uy = Array2::zeros((nx, ny));
    for ix in 0..nx {
        for iy in 0..ny {
            if ix + 1 < nx {
                ux[[ix, iy]] = (v[[ix + 1, iy]] - v[[ix, iy]]) / dx;
            }
            if iy + 1 < ny {
                uy[[ix, iy]] = (v[[ix, iy + 1]] - v[[ix, iy]]) / dy;
            }
        }
    }
    VectorField { grid: g, ux, uy }
}

/// Backward-difference divergence, the exact negative adjoint of [`grad`].
pub fn div(p: &VectorField) -> ScalarField {
    let g = p.grid;
    let (nx, ny) = g.shape();
    let (dx, dy) = (g.dx(), g.dy());
    let mut out = Array2::zeros((nx, ny));
    for ix in 0..nx {
        for iy in 0..ny {
            let px = if ix + 1 < nx { p.ux[[ix, iy]] } else { 0.0 };
            let px_prev = if ix > 0 { p.ux[[ix - 1, iy]] } else { 0.0 };
            let py = if iy + 1 < ny { p.uy[[ix, iy]] } else { 0.0 };
            let py_prev = if iy > 0 { p.uy[[ix, iy - 1]] } else { 0.0 };
            out[[ix, iy]] = (px - px_prev) / dx + (py - py_prev) / dy;
        }
    }
    ScalarField { grid: g, values: out }
}

/// Central-difference divergence with replicated boundary values.
pub fn div_central(p: &VectorField) -> ScalarField {
    let g = p.grid;
    let (nx, ny) = g.shape();
    let (dx, dy) = (g.dx(), g.dy());
    let mut out = Array2::zeros((nx, ny));
    for ix in 0..nx {
        let (xm, xp) = (ix.saturating_sub(1), (ix + 1).min(nx - 1));
        for iy in 0..ny {
            let (ym, yp) = (iy.saturating_sub(1), (iy + 1).min(ny - 1));
            out[[ix, iy]] = (p.ux[[xp, iy]] - p.ux[[xm, iy]]) / (2.0 * dx)
                + (p.uy[[ix, yp]] - p.uy[[ix, ym]]) / (2.0 * dy);
        }
    }
    ScalarField { grid: g, values: out }
}

/// Transpose of [`div_central`]: `<div_central(p), s> = <p, div_central_adjoint(s)>`.
pub fn div_central_adjoint(s: &ScalarField) -> VectorField {
    let g = s.grid;
    let (nx, ny) = g.shape();
    let (dx, dy) = (g.dx(), g.dy());
    let mut ux = Array2::zeros((nx, ny));
    let mut uy = Array2::zeros((nx, ny));
    for ix in 0..nx {
        let (xm, xp) = (ix.saturating_sub(1), (ix + 1).min(nx - 1));
        for iy in 0..ny {
            let (ym, yp) = (iy.saturating_sub(1), (iy + 1).min(ny - 1));
            let cx = s.values[[ix, iy]] / (2.0 * dx);
            ux[[xp, iy]] += cx;
            ux[[xm, iy]] -= cx;
            let cy = s.values[[ix, iy]] / (2.0 * dy);
            uy[[ix, yp]] += cy;
            uy[[ix, ym]] -= cy;
        }
    }
    VectorField { grid: g, ux, uy }
}

/// Central-difference gradient with replicated boundary values.
pub fn grad_central(f: &ScalarField) -> VectorField {
    let g = f.grid;
    let (nx, ny) = g.shape();
    let (dx, dy) = (g.dx(), g.dy());
    let v = &f.values;
    let mut ux = Array2::zeros((nx, ny));
    let mut uy = Array2::zeros((nx, ny));
    for ix in 0..nx {
        let (xm, xp) = (ix.saturating_sub(1), (ix + 1).min(nx - 1));
        for iy in 0..ny {
            let (ym, yp) = (iy.saturating_sub(1), (iy + 1).min(ny - 1));
            ux[[ix, iy]] = (v[[xp, iy]] - v[[xm, iy]]) / (2.0 * dx);
            uy[[ix, iy]] = (v[[ix, yp]] - v[[ix, ym]]) / (2.0 * dy);
        }
    }
    VectorField { grid: g, ux, uy }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: Grid, rng: &mut ChaCha8Rng) -> ScalarField {
        let values = Array2::from_shape_fn(grid.shape(), |_| rng.random_range(-1.0..1.0));
        ScalarField::from_values(grid, values).unwrap()
    }

    fn random_vector(grid: Grid, rng: &mut ChaCha8Rng) -> VectorField {
        let ux = Array2::from_shape_fn(grid.shape(), |_| rng.random_range(-1.0..1.0));
        let uy = Array2::from_shape_fn(grid.shape(), |_| rng.random_range(-1.0..1.0));
        VectorField::from_components(grid, ux, uy).unwrap()
    }

    #[test]
    fn grid_cell_sizes() {
        let g = Grid::new(438, 438, Extent::centered(16.0)).unwrap();
        assert_eq!(g.dx(), 32.0 / 438.0);
        assert_eq!(g.dy(), 32.0 / 438.0);
        let g = Grid::new(120, 120, Extent::centered(4.5)).unwrap();
        assert_eq!(g.dx(), 9.0 / 120.0);
        let g = Grid::new(2, 2, Extent::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        assert_eq!(g.cell_area(), 0.25);
    }

    #[test]
    fn degenerate_grids_rejected() {
        assert!(Grid::new(1, 4, Extent::centered(1.0)).is_err());
        assert!(Grid::new(4, 4, Extent::new(0.0, 0.0, 0.0, 1.0)).is_err());
        assert!(Grid::new(4, 4, Extent::new(0.0, 1.0, 2.0, 1.0)).is_err());
        assert!(Grid::new(4, 4, Extent::new(0.0, f64::NAN, 0.0, 1.0)).is_err());
    }

    #[test]
    fn center_index_round_trip() {
        let g = Grid::new(7, 5, Extent::new(-1.0, 2.5, 0.25, 3.0)).unwrap();
        for ix in 0..7 {
            for iy in 0..5 {
                let [fx, fy] = g.to_index(g.center(ix, iy));
                assert!((fx - ix as f64).abs() < 1e-12 && (fy - iy as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_grid_gate_nodes() {
        let t = TimeGrid::new(5, 2).unwrap();
        assert_eq!(t.steps(), 10);
        for i in 0..=5 {
            assert_eq!(t.tau(t.gate_step(i)), t.gate_time(i));
        }
        assert_eq!(t.gates_at_or_after(0), 5);
        assert_eq!(t.gates_at_or_after(3), 4);
        assert_eq!(t.gates_at_or_after(10), 1);
        assert!(TimeGrid::new(0, 1).is_err());
        assert!(TimeGrid::new(1, 0).is_err());
    }

    #[test]
    fn gradient_of_constant_and_linear() {
        let g = Grid::new(8, 6, Extent::new(0.0, 2.0, 0.0, 3.0)).unwrap();
        let c = grad(&ScalarField::constant(g, 3.5));
        assert!(c.ux().iter().chain(c.uy().iter()).all(|&v| v == 0.0));

        let lin = grad(&ScalarField::from_fn(g, |x, _| x));
        for ix in 0..7 {
            for iy in 0..6 {
                assert!((lin.ux()[[ix, iy]] - 1.0).abs() < 1e-12);
            }
        }
        assert!(lin.uy().iter().all(|&v| v == 0.0));
        assert!((0..6).all(|iy| lin.ux()[[7, iy]] == 0.0));
    }

    #[test]
    fn divergence_of_zero_and_linear() {
        let g = Grid::new(8, 8, Extent::centered(1.0)).unwrap();
        assert!(div(&VectorField::zeros(g)).values().iter().all(|&v| v == 0.0));
        let d = div(&VectorField::from_fn(g, |x, _| [x, 0.0]));
        for ix in 1..7 {
            for iy in 0..8 {
                assert!((d.get(ix, iy) - 1.0).abs() < 1e-12);
            }
        }
        let dc = div_central(&VectorField::from_fn(g, |x, y| [x, 2.0 * y]));
        for ix in 1..7 {
            for iy in 1..7 {
                assert!((dc.get(ix, iy) - 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_div_adjoint_identity() {
        let g = Grid::new(16, 16, Extent::new(-1.0, 3.0, 0.0, 2.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let f = random_field(g, &mut rng);
            let p = random_vector(g, &mut rng);
            let lhs = inner_vector(&grad(&f), &p).unwrap();
            let rhs = -inner(&f, &div(&p)).unwrap();
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn central_divergence_adjoint_identity() {
        let g = Grid::new(9, 13, Extent::centered(2.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random_field(g, &mut rng);
        let p = random_vector(g, &mut rng);
        let lhs = inner(&div_central(&p), &s).unwrap();
        let rhs = inner_vector(&p, &div_central_adjoint(&s)).unwrap();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn interpolation_at_centers_and_outside() {
        let g = Grid::new(5, 4, Extent::new(0.0, 5.0, 0.0, 4.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_field(g, &mut rng);
        let pts: Vec<_> = (0..5).flat_map(|ix| (0..4).map(move |iy| (ix, iy))).collect();
        let vals = interp(&f, &pts.iter().map(|&(ix, iy)| g.center(ix, iy)).collect::<Vec<_>>());
        for (&(ix, iy), v) in pts.iter().zip(vals) {
            assert_eq!(v, f.get(ix, iy));
        }
        let out = interp(&f, &[[-0.1, 2.0], [5.2, 1.0], [2.0, 3.9], [2.0, -3.0]]);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn interpolation_exact_on_bilinear_functions() {
        let g = Grid::new(10, 12, Extent::centered(3.0)).unwrap();
        let f = ScalarField::from_fn(g, |x, y| 2.0 * x + 3.0 * y + 0.5 * x * y);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lo = g.center(0, 0);
        let hi = g.center(9, 11);
        for _ in 0..200 {
            let p = [rng.random_range(lo[0]..hi[0]), rng.random_range(lo[1]..hi[1])];
            let v = interp(&f, &[p])[0];
            let exact = 2.0 * p[0] + 3.0 * p[1] + 0.5 * p[0] * p[1];
            assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
        }
    }

    #[test]
    fn inner_products_and_mass() {
        let g = Grid::new(2, 2, Extent::new(0.0, 1.0, 0.0, 1.0)).unwrap();
        let ones = ScalarField::constant(g, 1.0);
        assert_eq!(inner(&ones, &ones).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = random_field(g, &mut rng);
        assert!((inner(&f, &ones).unwrap() - f.mass()).abs() < 1e-15);
        assert_eq!(inner(&ScalarField::zeros(g), &f).unwrap(), 0.0);
        let other = Grid::new(2, 2, Extent::new(0.0, 2.0, 0.0, 1.0)).unwrap();
        assert!(matches!(inner(&f, &ScalarField::zeros(other)), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn stencil_gradient_matches_differences() {
        let g = Grid::new(6, 6, Extent::centered(1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_field(g, &mut rng);
        let (fx, fy) = (2.3, 3.6);
        let st = Stencil::at(&g, fx, fy).unwrap();
        let [gx, gy] = st.sample_gradient(f.as_slice(), 6);
        let h = 1e-6;
        let s = |a: f64, b: f64| Stencil::at(&g, a, b).unwrap().sample(f.as_slice(), 6);
        assert!((gx - (s(fx + h, fy) - s(fx - h, fy)) / (2.0 * h)).abs() < 1e-8);
        assert!((gy - (s(fx, fy + h) - s(fx, fy - h)) / (2.0 * h)).abs() < 1e-8);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn interpolation_preserves_nonnegativity(
                vals in proptest::collection::vec(0.0f64..10.0, 36),
                px in -4.0f64..4.0,
                py in -4.0f64..4.0,
            ) {
                let g = Grid::new(6, 6, Extent::centered(3.0)).unwrap();
                let f = ScalarField::from_values(g, Array2::from_shape_vec((6, 6), vals).unwrap()).unwrap();
                prop_assert!(interp(&f, &[[px, py]])[0] >= 0.0);
            }

            #[test]
            fn scatter_is_transpose_of_sample(
                vals in proptest::collection::vec(-1.0f64..1.0, 20),
                fx in 0.0f64..4.0,
                fy in 0.0f64..3.0,
                c in -2.0f64..2.0,
            ) {
                let g = Grid::new(5, 4, Extent::centered(1.0)).unwrap();
                let st = Stencil::at(&g, fx, fy).unwrap();
                let mut out = vec![0.0; 20];
                st.scatter(&mut out, 4, c);
                let lhs = c * st.sample(&vals, 4);
                let rhs: f64 = out.iter().zip(&vals).map(|(a, b)| a * b).sum();
                prop_assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }
}
