//! Explicit first-order transport along the flow generated by a
//! time-dependent velocity field.
//!
//! With `dt = 1 / (M N)` and fine nodes `tau_j = j dt`, a density is advanced
//! by
//!
//! ```text
//! rho_j = (1 - dt div v_j) * rho_{j-1}(x - dt v_j(x)),   j = 1..=M N
//! ```
//!
//! which is the mass-preserving action of the one-step map `Id + dt v_j`.
//! Backward quantities are composed with `Id + dt v_j` instead:
//!
//! ```text
//! h_j = h_{j+1}(x + dt v_j(x)),   j = i M - 1, ..., 0
//! ```
//!
//! Compositions use bilinear interpolation with zero extension, evaluated in
//! index space so that a zero velocity reproduces its input bit for bit. The
//! divergence inside the multiplier is [`div_central`]. A multiplier that
//! turns negative (a step too stiff for the grid) is clamped to zero and
//! counted.

use crate::error::{Error, Result};
use crate::field::{div_central, Grid, ScalarField, Stencil, TimeGrid, VectorField};

/// Velocity samples `v(tau_j)` for `j = 0..=M N`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    time_grid: TimeGrid,
    frames: Vec<VectorField>,
}

impl VelocityField {
    pub fn zeros(grid: Grid, time_grid: TimeGrid) -> Self {
        VelocityField { time_grid, frames: vec![VectorField::zeros(grid); time_grid.steps() + 1] }
    }

    pub fn from_frames(time_grid: TimeGrid, frames: Vec<VectorField>) -> Result<Self> {
        if frames.len() != time_grid.steps() + 1 {
            return Err(Error::InvalidArgument(format!(
                "expected {} velocity frames, got {}",
                time_grid.steps() + 1,
                frames.len()
            )));
        }
        let grid = *frames[0].grid();
        for f in &frames[1..] {
            grid.check_same(f.grid(), "velocity frames on different grids")?;
        }
        Ok(VelocityField { time_grid, frames })
    }

    /// The same stationary field at every node.
    pub fn stationary(time_grid: TimeGrid, frame: VectorField) -> Self {
        VelocityField { time_grid, frames: vec![frame; time_grid.steps() + 1] }
    }

    pub fn time_grid(&self) -> TimeGrid {
        self.time_grid
    }

    pub fn grid(&self) -> &Grid {
        self.frames[0].grid()
    }

    pub fn frame(&self, j: usize) -> &VectorField {
        &self.frames[j]
    }

    pub fn frames(&self) -> &[VectorField] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [VectorField] {
        &mut self.frames
    }

    /// `sqrt(sum_j dt |v_j|^2)`.
    pub fn norm(&self) -> f64 {
        let dt = self.time_grid.dt();
        self.frames.iter().map(|f| dt * f.norm().powi(2)).sum::<f64>().sqrt()
    }

    pub fn add_scaled(&mut self, a: f64, other: &VelocityField) {
        for (f, o) in self.frames.iter_mut().zip(&other.frames) {
            f.add_scaled(a, o);
        }
    }

    pub fn scaled(&self, a: f64) -> VelocityField {
        VelocityField {
            time_grid: self.time_grid,
            frames: self.frames.iter().map(|f| f.scaled(a)).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.frames.iter().all(|f| f.ux().iter().chain(f.uy().iter()).all(|&v| v == 0.0))
    }
}

/// Scalar fields at every fine node `tau_0..=tau_{MN}`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub time_grid: TimeGrid,
    pub frames: Vec<ScalarField>,
    /// Pixel updates whose multiplier `1 - dt div v` was negative and clamped.
    pub clamped: usize,
}

impl FrameSequence {
    pub fn frame(&self, j: usize) -> &ScalarField {
        &self.frames[j]
    }

    /// Frame at gate `i`, i.e. fine index `i M`.
    pub fn gate_frame(&self, i: usize) -> &ScalarField {
        &self.frames[self.time_grid.gate_step(i)]
    }
}

/// Stencils of `x + sign * dt * v(x)` at every pixel center.
pub(crate) fn displaced_stencils(v: &VectorField, dt: f64, sign: f64) -> Vec<Option<Stencil>> {
    let g = v.grid();
    let (nx, ny) = g.shape();
    let (sx, sy) = (sign * dt / g.dx(), sign * dt / g.dy());
    let (ux, uy) = v.slices();
    let mut out = Vec::with_capacity(nx * ny);
    for ix in 0..nx {
        for iy in 0..ny {
            let k = ix * ny + iy;
            out.push(Stencil::at(g, ix as f64 + sx * ux[k], iy as f64 + sy * uy[k]));
        }
    }
    out
}

/// `f o (Id + shift)` for precomputed stencils.
pub(crate) fn compose(f: &ScalarField, stencils: &[Option<Stencil>]) -> ScalarField {
    let ny = f.grid().ny();
    let src = f.as_slice();
    let mut out = ScalarField::zeros(*f.grid());
    for (o, st) in out.as_slice_mut().iter_mut().zip(stencils) {
        if let Some(st) = st {
            *o = st.sample(src, ny);
        }
    }
    out
}

/// One forward transport step `rho -> m * rho(x - dt v)`.
pub(crate) struct TransportStep {
    /// Unclamped multiplier `1 - dt div v`.
    pub multiplier: Vec<f64>,
    /// Stencils of `x - dt v(x)`.
    pub stencils: Vec<Option<Stencil>>,
}

impl TransportStep {
    pub fn new(v: &VectorField, dt: f64) -> Self {
        let d = div_central(v);
        let multiplier = d.as_slice().iter().map(|&dv| 1.0 - dt * dv).collect();
        TransportStep { multiplier, stencils: displaced_stencils(v, dt, -1.0) }
    }

    /// Returns the advanced field and the number of clamped multipliers.
    pub fn apply(&self, prev: &ScalarField) -> (ScalarField, usize) {
        let ny = prev.grid().ny();
        let src = prev.as_slice();
        let mut out = ScalarField::zeros(*prev.grid());
        let mut clamped = 0;
        for ((o, st), &m) in out.as_slice_mut().iter_mut().zip(&self.stencils).zip(&self.multiplier)
        {
            if m < 0.0 {
                clamped += 1;
                continue;
            }
            if let Some(st) = st {
                *o = m * st.sample(src, ny);
            }
        }
        (out, clamped)
    }

    /// Adds the transpose of [`TransportStep::apply`] applied to `lambda` into `out`.
    pub fn apply_transpose(&self, lambda: &[f64], ny: usize, out: &mut [f64]) {
        for ((st, &m), &l) in self.stencils.iter().zip(&self.multiplier).zip(lambda) {
            if m < 0.0 || l == 0.0 {
                continue;
            }
            if let Some(st) = st {
                st.scatter(out, ny, m * l);
            }
        }
    }
}

fn transport(initial: ScalarField, v: &VelocityField) -> FrameSequence {
    let tg = v.time_grid();
    let dt = tg.dt();
    let mut frames = Vec::with_capacity(tg.steps() + 1);
    frames.push(initial);
    let mut clamped = 0;
    for j in 1..=tg.steps() {
        let (next, c) = TransportStep::new(v.frame(j), dt).apply(&frames[j - 1]);
        clamped += c;
        frames.push(next);
    }
    FrameSequence { time_grid: tg, frames, clamped }
}

/// Mass-preserving push-forward of `template` to every fine node.
pub fn push_forward(template: &ScalarField, v: &VelocityField) -> Result<FrameSequence> {
    template.grid().check_same(v.grid(), "template and velocity on different grids")?;
    Ok(transport(template.clone(), v))
}

/// Jacobian determinants of the inverse flow maps, by the same recursion
/// started from a constant 1.
pub fn jac_det_sequence(v: &VelocityField) -> FrameSequence {
    transport(ScalarField::constant(*v.grid(), 1.0), v)
}

/// `h_{tau_j, t_i}` for `j = 0..=i M` (indexed by `j`), starting from
/// `h_end` at `t_i` and composing backwards with `Id + dt v_j`.
pub fn back_transport(h_end: &ScalarField, v: &VelocityField, gate: usize) -> Result<Vec<ScalarField>> {
    let tg = v.time_grid();
    if gate == 0 || gate > tg.gates() {
        return Err(Error::InvalidArgument(format!("gate {gate} outside 1..={}", tg.gates())));
    }
    h_end.grid().check_same(v.grid(), "residual and velocity on different grids")?;
    let end = tg.gate_step(gate);
    let dt = tg.dt();
    let mut seq = vec![h_end.clone(); end + 1];
    for j in (0..end).rev() {
        seq[j] = compose(&seq[j + 1], &displaced_stencils(v.frame(j), dt, 1.0));
    }
    Ok(seq)
}

/// Time average of `|v(tau_l)|^2` carried back to `tau_j` along the flow:
///
/// ```text
/// eta_{j,i} = 1/(iM - j) * sum_{l=j+1}^{iM} |v_l|^2 o phi_{tau_j, tau_l}
/// ```
///
/// where each `phi_{tau_j, tau_l}` is built by composing `Id + dt v_s` for
/// `s = l-1 down to j`. Zero when `j = i M`.
pub fn eta(v: &VelocityField, j: usize, gate: usize) -> Result<ScalarField> {
    let tg = v.time_grid();
    if gate == 0 || gate > tg.gates() {
        return Err(Error::InvalidArgument(format!("gate {gate} outside 1..={}", tg.gates())));
    }
    let end = tg.gate_step(gate);
    if j > end {
        return Err(Error::InvalidArgument(format!("fine index {j} is after gate {gate} ({end})")));
    }
    let mut acc = ScalarField::zeros(*v.grid());
    if j == end {
        return Ok(acc);
    }
    let dt = tg.dt();
    let forward: Vec<_> = (j..end).map(|s| displaced_stencils(v.frame(s), dt, 1.0)).collect();
    for l in j + 1..=end {
        let mut q = v.frame(l).magnitude_squared();
        for s in (j..l).rev() {
            q = compose(&q, &forward[s - j]);
        }
        acc.add_scaled(1.0, &q);
    }
    Ok(acc.scaled(1.0 / (end - j) as f64))
}

/// All of `eta_{j,i}` for `j = 0..=i M`, by the running-sum recursion
/// `E_j = (|v_{j+1}|^2 + E_{j+1}) o (Id + dt v_j)`, `eta_j = E_j / (iM - j)`.
/// Agrees with [`eta`] up to rounding since interpolation is linear.
pub fn eta_sequence(v: &VelocityField, gate: usize) -> Result<Vec<ScalarField>> {
    let tg = v.time_grid();
    if gate == 0 || gate > tg.gates() {
        return Err(Error::InvalidArgument(format!("gate {gate} outside 1..={}", tg.gates())));
    }
    let end = tg.gate_step(gate);
    let dt = tg.dt();
    let grid = *v.grid();
    let mut out = vec![ScalarField::zeros(grid); end + 1];
    let mut running = ScalarField::zeros(grid);
    for j in (0..end).rev() {
        let mut q = v.frame(j + 1).magnitude_squared();
        q.add_scaled(1.0, &running);
        running = compose(&q, &displaced_stencils(v.frame(j), dt, 1.0));
        out[j] = running.scaled(1.0 / (end - j) as f64);
    }
    Ok(out)
}

/// Mean over steps of the weighted L2 norm of the discrete continuity
/// residual `(rho_j - rho_{j-1}) / dt + div(rho_{j-1} v_j)`.
pub fn continuity_residual(frames: &FrameSequence, v: &VelocityField) -> f64 {
    let tg = frames.time_grid;
    let dt = tg.dt();
    let mut total = 0.0;
    for j in 1..=tg.steps() {
        let mut r = frames.frames[j].sub(&frames.frames[j - 1]).scaled(1.0 / dt);
        let flux = v.frame(j).mul_scalar_field(&frames.frames[j - 1]);
        r.add_scaled(1.0, &div_central(&flux));
        total += r.norm();
    }
    total / tg.steps() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Extent;

    fn blob(grid: Grid, c: [f64; 2], w: f64) -> ScalarField {
        ScalarField::from_fn(grid, |x, y| {
            (-((x - c[0]).powi(2) + (y - c[1]).powi(2)) / (2.0 * w * w)).exp()
        })
    }

    fn centroid(f: &ScalarField) -> [f64; 2] {
        let g = f.grid();
        let (mut sx, mut sy, mut m) = (0.0, 0.0, 0.0);
        for ix in 0..g.nx() {
            for iy in 0..g.ny() {
                let [x, y] = g.center(ix, iy);
                let v = f.get(ix, iy);
                sx += v * x;
                sy += v * y;
                m += v;
            }
        }
        [sx / m, sy / m]
    }

    fn rotation(grid: Grid, omega: f64) -> VectorField {
        VectorField::from_fn(grid, |x, y| [-omega * y, omega * x])
    }

    #[test]
    fn zero_velocity_is_a_strict_fixed_point() {
        let grid = Grid::new(20, 16, Extent::centered(2.0)).unwrap();
        let tg = TimeGrid::new(3, 2).unwrap();
        let theta = blob(grid, [0.3, -0.2], 0.4);
        let v = VelocityField::zeros(grid, tg);
        let rho = push_forward(&theta, &v).unwrap();
        assert!(rho.frames.iter().all(|f| f == &theta));
        assert_eq!(rho.clamped, 0);
        assert!(jac_det_sequence(&v).frames.iter().all(|f| f.values().iter().all(|&x| x == 1.0)));
        let h = back_transport(&theta, &v, 2).unwrap();
        assert_eq!(h.len(), 5);
        assert!(h.iter().all(|f| f == &theta));
        for j in 0..=4 {
            assert!(eta(&v, j, 2).unwrap().values().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn translation_moves_the_centroid() {
        let grid = Grid::new(64, 64, Extent::centered(4.0)).unwrap();
        let tg = TimeGrid::new(4, 4).unwrap();
        let c = [0.8, -0.5];
        let v = VelocityField::stationary(tg, VectorField::from_fn(grid, |_, _| c));
        let theta = blob(grid, [-0.4, 0.2], 0.5);
        let rho = push_forward(&theta, &v).unwrap();
        let start = centroid(&theta);
        let end = centroid(rho.frames.last().unwrap());
        for k in 0..2 {
            let shift = end[k] - start[k];
            assert!((shift - c[k]).abs() < 0.05 * c[k].abs(), "axis {k}: {shift}");
        }
        let mass_err = (rho.frames.last().unwrap().mass() - theta.mass()).abs() / theta.mass();
        assert!(mass_err < 1e-3);
    }

    #[test]
    fn rotation_mass_drift_is_first_order() {
        let grid = Grid::new(96, 96, Extent::centered(4.0)).unwrap();
        let theta = blob(grid, [1.2, 0.0], 0.45);
        let omega = std::f64::consts::PI / 8.0;
        let drift = |steps: usize| {
            let tg = TimeGrid::new(steps, 1).unwrap();
            let v = VelocityField::stationary(tg, rotation(grid, omega));
            let rho = push_forward(&theta, &v).unwrap();
            (rho.frames.last().unwrap().mass() - theta.mass()).abs() / theta.mass()
        };
        let (d32, d64) = (drift(32), drift(64));
        assert!(d32 < 0.01, "{d32}");
        let ratio = d32 / d64;
        assert!((1.5..=3.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn rigid_rotation_keeps_unit_jacobian() {
        let grid = Grid::new(48, 48, Extent::centered(3.0)).unwrap();
        let err = |steps: usize| {
            let tg = TimeGrid::new(steps, 1).unwrap();
            let v = VelocityField::stationary(tg, rotation(grid, 0.5));
            let jac = jac_det_sequence(&v);
            let last = jac.frames.last().unwrap();
            // Inside radius 1 the backward characteristics stay in the domain.
            let mut worst: f64 = 0.0;
            for ix in 0..48 {
                for iy in 0..48 {
                    let [x, y] = grid.center(ix, iy);
                    if x.hypot(y) < 1.0 {
                        worst = worst.max((last.get(ix, iy) - 1.0).abs());
                    }
                }
            }
            worst
        };
        assert!(err(16) < 1e-9, "divergence-free linear field has exact unit multiplier");
        assert!(err(32) < 1e-9);
    }

    #[test]
    fn contraction_grows_jacobian_exponentially() {
        let grid = Grid::new(64, 64, Extent::centered(4.0)).unwrap();
        let c = 0.4;
        let tg = TimeGrid::new(64, 1).unwrap();
        let v = VelocityField::stationary(tg, VectorField::from_fn(grid, |x, y| [-c * x, -c * y]));
        let jac = jac_det_sequence(&v);
        let expect = (2.0 * c).exp();
        for ix in 24..40 {
            for iy in 24..40 {
                let got = jac.frames.last().unwrap().get(ix, iy);
                assert!((got - expect).abs() / expect < 0.02, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn back_transport_of_translation_shifts_forward() {
        let grid = Grid::new(64, 64, Extent::centered(4.0)).unwrap();
        let tg = TimeGrid::new(4, 4).unwrap();
        let c = [0.6, 0.3];
        let v = VelocityField::stationary(tg, VectorField::from_fn(grid, |_, _| c));
        let h_end = blob(grid, [0.0, 0.0], 0.5);
        let seq = back_transport(&h_end, &v, 2).unwrap();
        assert_eq!(seq.len(), 9);
        assert_eq!(seq[8], h_end);
        // h_{0,t_i}(x) = h_end(x + c t_i): the bump moves by -c t_i.
        let t = tg.gate_time(2);
        let cen = centroid(&seq[0]);
        assert!((cen[0] + c[0] * t).abs() < 0.02 && (cen[1] + c[1] * t).abs() < 0.02, "{cen:?}");
    }

    #[test]
    fn push_then_back_transport_nearly_inverts() {
        let grid = Grid::new(128, 128, Extent::centered(4.0)).unwrap();
        let theta = blob(grid, [0.5, 0.0], 0.8);
        let err = |m: usize| {
            let tg = TimeGrid::new(1, m).unwrap();
            let v = VelocityField::stationary(tg, rotation(grid, 0.6));
            let rho = push_forward(&theta, &v).unwrap();
            let back = back_transport(rho.frames.last().unwrap(), &v, 1).unwrap();
            back[0].sub(&theta).norm() / theta.norm()
        };
        // First order in time until bilinear smoothing (about 4% at this
        // resolution) takes over.
        let (e4, e8, e16) = (err(4), err(8), err(16));
        assert!(e4 / e8 > 1.5 && e8 > e16, "{e4} {e8} {e16}");
        assert!(err(32) < 0.05);
    }

    #[test]
    fn eta_of_spatially_constant_speed_is_the_mean() {
        let grid = Grid::new(24, 24, Extent::centered(3.0)).unwrap();
        let tg = TimeGrid::new(2, 3).unwrap();
        let speeds = [0.0, 0.1, 0.2, 0.3, 0.25, 0.15, 0.05];
        let frames: Vec<_> =
            speeds.iter().map(|&s| VectorField::from_fn(grid, move |_, _| [s, 0.0])).collect();
        let v = VelocityField::from_frames(tg, frames).unwrap();
        let gate = 2;
        let end = tg.gate_step(gate);
        for j in 0..end {
            let e = eta(&v, j, gate).unwrap();
            let mean: f64 =
                (j + 1..=end).map(|l| speeds[l] * speeds[l]).sum::<f64>() / (end - j) as f64;
            // Deep interior: compositions never leave the hull.
            for ix in 6..18 {
                for iy in 6..18 {
                    assert!((e.get(ix, iy) - mean).abs() < 1e-12);
                }
            }
        }
        assert!(eta(&v, end, gate).unwrap().values().iter().all(|&x| x == 0.0));
        assert!(eta(&v, end + 1, gate).is_err());
    }

    #[test]
    fn eta_recursion_matches_nested_compositions() {
        let grid = Grid::new(32, 32, Extent::centered(2.0)).unwrap();
        let tg = TimeGrid::new(2, 3).unwrap();
        let frames: Vec<_> = (0..=tg.steps())
            .map(|j| {
                let a = 0.2 + 0.05 * j as f64;
                VectorField::from_fn(grid, move |x, y| {
                    let w = (-(x * x + y * y)).exp();
                    [-a * y * w, a * x * w + 0.1 * w]
                })
            })
            .collect();
        let v = VelocityField::from_frames(tg, frames).unwrap();
        let seq = eta_sequence(&v, 2).unwrap();
        for (j, s) in seq.iter().enumerate() {
            let direct = eta(&v, j, 2).unwrap();
            assert!(s.sub(&direct).norm() <= 1e-12 * direct.norm().max(1e-300) + 1e-15);
        }
    }

    #[test]
    fn continuity_residual_decreases_with_refinement() {
        let grid = Grid::new(128, 128, Extent::centered(4.0)).unwrap();
        let theta = blob(grid, [0.8, 0.0], 0.6);
        let field = VectorField::from_fn(grid, |x, y| {
            let w = (-(x * x + y * y) / 8.0).exp();
            [(-0.8 * y + 0.5) * w, (0.8 * x - 0.3 * x * y) * w]
        });
        let residual = |steps: usize| {
            let tg = TimeGrid::new(steps, 1).unwrap();
            let v = VelocityField::stationary(tg, field.clone());
            continuity_residual(&push_forward(&theta, &v).unwrap(), &v)
        };
        let r: Vec<f64> = [4, 8, 16].iter().map(|&s| residual(s)).collect();
        assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
    }

    #[test]
    fn stiff_flow_is_clamped_and_counted() {
        let grid = Grid::new(16, 16, Extent::centered(1.0)).unwrap();
        let tg = TimeGrid::new(1, 1).unwrap();
        // div v = 40 everywhere, so 1 - dt div v < 0.
        let v = VelocityField::stationary(tg, VectorField::from_fn(grid, |x, y| [20.0 * x, 20.0 * y]));
        let rho = push_forward(&ScalarField::constant(grid, 1.0), &v).unwrap();
        assert!(rho.clamped > 0);
        assert!(rho.frames[1].is_nonnegative());
    }
}
