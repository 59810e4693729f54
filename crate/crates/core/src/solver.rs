//! Joint template / velocity reconstruction.
//!
//! The discrete objective is
//!
//! ```text
//! J(theta, v) = 1/N_g sum_i [ D_i(rho_{iM}) + mu2 dt sum_{j=1}^{iM} <rho_j, |v_j|^2> ]
//!             + mu1 sum_pixels sqrt(|grad theta|^2 + eps) dx dy
//! ```
//!
//! with `rho = push_forward(theta, v)` and `N_g` the number of gates that carry
//! data. Gradients are taken with respect to the cell-area weighted pairing
//! for the template and `dt dx dy` for velocity frames.
//!
//! Two gradient schemes are available. [`GradientScheme::Adjoint`] is the
//! exact derivative of the discrete objective, obtained by running the
//! transposed transport steps backwards. [`GradientScheme::Composition`]
//! assembles the gradient from back-transported residuals `h` and the time
//! averages `eta` as in the continuous optimality system; it converges to the
//! same field as the grids are refined but is not the derivative of `J` at
//! finite resolution.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    div, div_central_adjoint, grad, grad_central, inner, Grid, ScalarField, TimeGrid, VectorField,
};
use crate::flow::{back_transport, eta_sequence, push_forward, FrameSequence, TransportStep, VelocityField};
use crate::projector::{Projector, Sinogram};
use crate::rkhs::KernelOp;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    Radon,
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientScheme {
    #[default]
    Adjoint,
    Composition,
}

/// Measurement at one gate.
#[derive(Clone, Debug)]
pub enum GateData {
    /// Projection data; the geometry travels with the sinogram.
    Radon(Sinogram),
    /// Direct observation of the gate image (registration).
    Image(ScalarField),
}

#[derive(Clone, Debug)]
pub struct Gate {
    /// Gate number `i` in `1..=N`.
    pub index: usize,
    pub data: GateData,
}

#[derive(Clone, Debug)]
pub struct Problem {
    grid: Grid,
    time_grid: TimeGrid,
    gates: Vec<Gate>,
    /// One per gate for radon data, shared between restricted copies.
    projectors: Vec<Option<Arc<Projector>>>,
    mu1: f64,
    mu2: f64,
    eps_tv: f64,
    kernel: KernelOp,
    scheme: GradientScheme,
}

impl Problem {
    pub fn new(
        grid: Grid,
        time_grid: TimeGrid,
        gates: Vec<Gate>,
        mu1: f64,
        mu2: f64,
        eps_tv: f64,
        kernel: KernelOp,
    ) -> Result<Self> {
        if gates.is_empty() {
            return Err(Error::InvalidArgument("problem has no gates".into()));
        }
        if !(mu1 >= 0.0 && mu1.is_finite() && mu2 >= 0.0 && mu2.is_finite()) {
            return Err(Error::InvalidArgument(format!("mu1={mu1}, mu2={mu2} must be finite and >= 0")));
        }
        if !(eps_tv > 0.0 && eps_tv.is_finite()) {
            return Err(Error::InvalidArgument(format!("eps_tv must be positive, got {eps_tv}")));
        }
        grid.check_same(kernel.grid(), "kernel built for another grid")?;
        let mut seen = vec![false; time_grid.gates() + 1];
        let radon = matches!(gates[0].data, GateData::Radon(_));
        for gate in &gates {
            if gate.index == 0 || gate.index > time_grid.gates() || seen[gate.index] {
                return Err(Error::InvalidArgument(format!(
                    "gate index {} invalid or repeated for N={}",
                    gate.index,
                    time_grid.gates()
                )));
            }
            seen[gate.index] = true;
            match &gate.data {
                GateData::Radon(_) if radon => {}
                GateData::Image(img) if !radon => {
                    grid.check_same(img.grid(), "gate image on another grid")?;
                }
                _ => return Err(Error::InvalidArgument("gates mix radon and image data".into())),
            }
        }
        let mut gates = gates;
        gates.sort_by_key(|g| g.index);
        let projectors = gates
            .par_iter()
            .map(|g| match &g.data {
                GateData::Radon(sino) => Some(Arc::new(Projector::new(sino.geometry(), &grid))),
                GateData::Image(_) => None,
            })
            .collect();
        Ok(Problem { grid, time_grid, gates, projectors, mu1, mu2, eps_tv, kernel, scheme: GradientScheme::Adjoint })
    }

    pub fn with_scheme(mut self, scheme: GradientScheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// The same problem restricted to the listed gate numbers.
    pub fn restrict(&self, indices: &[usize]) -> Result<Problem> {
        let (gates, projectors): (Vec<Gate>, Vec<_>) = self
            .gates
            .iter()
            .zip(&self.projectors)
            .filter(|(g, _)| indices.contains(&g.index))
            .map(|(g, p)| (g.clone(), p.clone()))
            .unzip();
        if gates.len() != indices.len() {
            return Err(Error::InvalidArgument(format!("gates {indices:?} not all present")));
        }
        Ok(Problem { gates, projectors, ..self.clone() })
    }

    pub fn with_kernel(&self, kernel: KernelOp) -> Result<Problem> {
        self.grid.check_same(kernel.grid(), "kernel built for another grid")?;
        Ok(Problem { kernel, ..self.clone() })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn time_grid(&self) -> TimeGrid {
        self.time_grid
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn mu1(&self) -> f64 {
        self.mu1
    }

    pub fn mu2(&self) -> f64 {
        self.mu2
    }

    pub fn eps_tv(&self) -> f64 {
        self.eps_tv
    }

    pub fn kernel(&self) -> &KernelOp {
        &self.kernel
    }

    pub fn scheme(&self) -> GradientScheme {
        self.scheme
    }

    pub fn forward_mode(&self) -> ForwardMode {
        match self.gates[0].data {
            GateData::Radon(_) => ForwardMode::Radon,
            GateData::Image(_) => ForwardMode::Identity,
        }
    }

    /// Number of data gates `i` with `i M >= j`.
    fn gates_from(&self, j: usize) -> usize {
        self.gates.iter().filter(|g| self.time_grid.gate_step(g.index) >= j).count()
    }

    fn check(&self, theta: &ScalarField, v: &VelocityField) -> Result<()> {
        self.grid.check_same(theta.grid(), "template on another grid")?;
        self.grid.check_same(v.grid(), "velocity on another grid")?;
        if v.time_grid() != self.time_grid {
            return Err(Error::InvalidArgument("velocity time grid differs from the problem".into()));
        }
        Ok(())
    }

    /// Forward model at `(theta, v)`: frames, residuals and objective terms.
    pub fn evaluate(&self, theta: &ScalarField, v: &VelocityField) -> Result<Evaluation> {
        self.check(theta, v)?;
        let frames = if v.is_zero() {
            // Bitwise what the transport would produce, without the work.
            FrameSequence { time_grid: self.time_grid, frames: vec![theta.clone(); self.time_grid.steps() + 1], clamped: 0 }
        } else {
            push_forward(theta, v)?
        };
        let gate_terms = self
            .gates
            .par_iter()
            .zip(&self.projectors)
            .map(|(gate, proj)| {
                let rho = frames.gate_frame(gate.index);
                match &gate.data {
                    GateData::Radon(g) => {
                        let proj = proj.as_ref().expect("radon gates carry a projector");
                        let r = proj.forward(rho)?.sub(g)?;
                        let source = proj.adjoint(&r)?.scaled(2.0);
                        Ok((r.norm_squared(), source))
                    }
                    GateData::Image(img) => {
                        let r = rho.sub(img);
                        Ok((inner(&r, &r)?, r.scaled(2.0)))
                    }
                }
            })
            .collect::<Result<Vec<(f64, ScalarField)>>>()?;
        let ng = self.gates.len() as f64;
        let tg = self.time_grid;
        let dt = tg.dt();

        let mut kinetic = vec![0.0; tg.steps() + 1];
        if self.mu2 != 0.0 {
            for (j, k) in kinetic.iter_mut().enumerate().skip(1) {
                *k = inner(frames.frame(j), &v.frame(j).magnitude_squared())?;
            }
        }
        let mut data = 0.0;
        let mut transport = 0.0;
        for (gate, (d, _)) in self.gates.iter().zip(&gate_terms) {
            data += d;
            let e: f64 = kinetic[1..=tg.gate_step(gate.index)].iter().sum();
            transport += self.mu2 * dt * e;
        }
        let terms = Objective::new(data / ng, transport / ng, self.mu1 * tv_value(theta, self.eps_tv));
        Ok(Evaluation {
            frames,
            sources: gate_terms.into_iter().map(|(_, s)| s).collect(),
            terms,
        })
    }

    pub fn objective(&self, theta: &ScalarField, v: &VelocityField) -> Result<Objective> {
        Ok(self.evaluate(theta, v)?.terms)
    }
}

/// Objective split into its terms; `total = data + transport + tv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub data: f64,
    pub transport: f64,
    pub tv: f64,
    pub total: f64,
}

impl Objective {
    fn new(data: f64, transport: f64, tv: f64) -> Self {
        Objective { data, transport, tv, total: data + transport + tv }
    }
}

/// Cached forward pass.
#[derive(Clone, Debug)]
pub struct Evaluation {
    frames: FrameSequence,
    /// `2 T*(T rho_{iM} - g_i)` per data gate, in gate order.
    sources: Vec<ScalarField>,
    terms: Objective,
}

impl Evaluation {
    pub fn objective(&self) -> Objective {
        self.terms
    }

    pub fn frames(&self) -> &FrameSequence {
        &self.frames
    }

    /// Densities `lambda_j = dJ_data+transport / d rho_j` for `j = 0..=MN`.
    /// `steps` is `None` for a zero velocity, where every transport step is
    /// the identity.
    fn costates(&self, p: &Problem, v: &VelocityField, steps: Option<&[TransportStep]>) -> Vec<ScalarField> {
        let tg = p.time_grid;
        let s = tg.steps();
        let ng = p.gates.len() as f64;
        let ny = p.grid.ny();
        let mut out = vec![ScalarField::zeros(p.grid); s + 1];
        let mut cur = ScalarField::zeros(p.grid);
        for j in (1..=s).rev() {
            for (gate, src) in p.gates.iter().zip(&self.sources) {
                if tg.gate_step(gate.index) == j {
                    cur.add_scaled(1.0 / ng, src);
                }
            }
            let c = p.gates_from(j);
            if p.mu2 != 0.0 && c > 0 {
                cur.add_scaled(p.mu2 * tg.dt() * c as f64 / ng, &v.frame(j).magnitude_squared());
            }
            let prev = match steps {
                Some(steps) => {
                    let mut prev = ScalarField::zeros(p.grid);
                    steps[j - 1].apply_transpose(cur.as_slice(), ny, prev.as_slice_mut());
                    prev
                }
                None => cur.clone(),
            };
            out[j] = std::mem::replace(&mut cur, prev);
        }
        out[0] = cur;
        out
    }

    fn transport_steps(p: &Problem, v: &VelocityField) -> Vec<TransportStep> {
        let dt = p.time_grid.dt();
        (1..=p.time_grid.steps()).into_par_iter().map(|j| TransportStep::new(v.frame(j), dt)).collect()
    }

    pub fn grad_template(&self, p: &Problem, theta: &ScalarField, v: &VelocityField) -> Result<ScalarField> {
        p.check(theta, v)?;
        let mut g = match p.scheme {
            GradientScheme::Adjoint => {
                if v.is_zero() {
                    self.costates(p, v, None).swap_remove(0)
                } else {
                    let steps = Self::transport_steps(p, v);
                    self.costates(p, v, Some(&steps)).swap_remove(0)
                }
            }
            GradientScheme::Composition => {
                let ng = p.gates.len() as f64;
                let mut acc = ScalarField::zeros(p.grid);
                for (gate, src) in p.gates.iter().zip(&self.sources) {
                    let h = back_transport(src, v, gate.index)?;
                    acc.add_scaled(1.0 / ng, &h[0]);
                    if p.mu2 != 0.0 {
                        let eta = eta_sequence(v, gate.index)?;
                        acc.add_scaled(p.mu2 / ng, &eta[0]);
                    }
                }
                acc
            }
        };
        g.add_scaled(p.mu1, &tv_gradient(theta, p.eps_tv));
        Ok(g)
    }

    /// Velocity gradient before smoothing, paired with `dt dx dy`.
    pub fn grad_velocity_l2(&self, p: &Problem, v: &VelocityField) -> Result<VelocityField> {
        p.grid.check_same(v.grid(), "velocity on another grid")?;
        match p.scheme {
            GradientScheme::Adjoint => self.grad_velocity_adjoint(p, v),
            GradientScheme::Composition => self.grad_velocity_composition(p, v),
        }
    }

    fn grad_velocity_adjoint(&self, p: &Problem, v: &VelocityField) -> Result<VelocityField> {
        let tg = p.time_grid;
        let grid = p.grid;
        let (dx, dy) = (grid.dx(), grid.dy());
        let ny = grid.ny();
        let ng = p.gates.len() as f64;
        let steps = Self::transport_steps(p, v);
        let lambda = self.costates(p, v, Some(&steps));

        let mut frames: Vec<VectorField> = (1..=tg.steps())
            .into_par_iter()
            .map(|j| {
                let step = &steps[j - 1];
                let prev = self.frames.frame(j - 1).as_slice();
                let lam = lambda[j].as_slice();
                let mut g = VectorField::zeros(grid);
                let mut s = ScalarField::zeros(grid);
                {
                    let (gx, gy) = g.slices_mut();
                    let sv = s.as_slice_mut();
                    for k in 0..grid.len() {
                        let m = step.multiplier[k];
                        let (Some(st), true) = (&step.stencils[k], m >= 0.0) else {
                            continue;
                        };
                        let [ix, iy] = st.sample_gradient(prev, ny);
                        gx[k] = -lam[k] * m * ix / dx;
                        gy[k] = -lam[k] * m * iy / dy;
                        sv[k] = lam[k] * st.sample(prev, ny);
                    }
                }
                g.add_scaled(-1.0, &div_central_adjoint(&s));
                let c = p.gates_from(j) as f64;
                if p.mu2 != 0.0 && c > 0.0 {
                    let kin = v.frame(j).mul_scalar_field(self.frames.frame(j));
                    g.add_scaled(2.0 * p.mu2 * c / ng, &kin);
                }
                g
            })
            .collect();

        // J does not see v_0; it takes the gradient of the first step so the
        // initial frame tracks v_1.
        frames.insert(0, frames[0].clone());
        VelocityField::from_frames(tg, frames)
    }

    fn grad_velocity_composition(&self, p: &Problem, v: &VelocityField) -> Result<VelocityField> {
        let tg = p.time_grid;
        let ng = p.gates.len() as f64;
        let mut acc: Vec<ScalarField> = vec![ScalarField::zeros(p.grid); tg.steps() + 1];
        let mut counts = vec![0usize; tg.steps() + 1];
        for (gate, src) in p.gates.iter().zip(&self.sources) {
            let h = back_transport(src, v, gate.index)?;
            let eta = if p.mu2 != 0.0 { Some(eta_sequence(v, gate.index)?) } else { None };
            for (j, hj) in h.iter().enumerate() {
                acc[j].add_scaled(1.0, hj);
                if let Some(eta) = &eta {
                    acc[j].add_scaled(p.mu2, &eta[j]);
                }
                counts[j] += 1;
            }
        }
        let frames = (0..=tg.steps())
            .into_par_iter()
            .map(|j| {
                let rho = self.frames.frame(j);
                let mut g = grad_central(&acc[j]);
                g.add_scaled(2.0 * p.mu2 * counts[j] as f64, v.frame(j));
                g.mul_scalar_field(rho).scaled(1.0 / ng)
            })
            .collect();
        VelocityField::from_frames(tg, frames)
    }

    /// Smoothed velocity gradient `K G`.
    pub fn grad_velocity(&self, p: &Problem, v: &VelocityField) -> Result<VelocityField> {
        let g = self.grad_velocity_l2(p, v)?;
        let frames =
            g.frames().par_iter().map(|f| p.kernel.apply(f)).collect::<Result<Vec<_>>>()?;
        VelocityField::from_frames(p.time_grid, frames)
    }
}

/// `sum sqrt(|grad f|^2 + eps) dx dy` with forward differences.
pub fn tv_value(f: &ScalarField, eps: f64) -> f64 {
    let g = grad(f);
    let s: f64 =
        g.ux().iter().zip(g.uy().iter()).map(|(a, b)| (a * a + b * b + eps).sqrt()).sum();
    s * f.grid().cell_area()
}

/// Gradient of [`tv_value`]: `-div(grad f / |grad f|_eps)`.
pub fn tv_gradient(f: &ScalarField, eps: f64) -> ScalarField {
    let mut g = grad(f);
    let (ux, uy) = g.components_mut();
    ndarray::Zip::from(ux).and(uy).for_each(|a, b| {
        let n = (*a * *a + *b * *b + eps).sqrt();
        *a /= n;
        *b /= n;
    });
    div(&g).scaled(-1.0)
}

pub fn objective(theta: &ScalarField, v: &VelocityField, p: &Problem) -> Result<Objective> {
    p.objective(theta, v)
}

pub fn grad_template(theta: &ScalarField, v: &VelocityField, p: &Problem) -> Result<ScalarField> {
    p.evaluate(theta, v)?.grad_template(p, theta, v)
}

pub fn grad_velocity_l2(theta: &ScalarField, v: &VelocityField, p: &Problem) -> Result<VelocityField> {
    p.evaluate(theta, v)?.grad_velocity_l2(p, v)
}

pub fn grad_velocity(theta: &ScalarField, v: &VelocityField, p: &Problem) -> Result<VelocityField> {
    p.evaluate(theta, v)?.grad_velocity(p, v)
}

/// `max(theta - alpha grad, 0)`.
pub fn project_step(theta: &ScalarField, grad: &ScalarField, alpha: f64) -> ScalarField {
    let mut out = theta.clone();
    out.add_scaled(-alpha, grad);
    out.clamp_nonnegative()
}

pub fn step_template(theta: &ScalarField, v: &VelocityField, p: &Problem, alpha: f64) -> Result<ScalarField> {
    Ok(project_step(theta, &grad_template(theta, v, p)?, alpha))
}

pub fn step_velocity(theta: &ScalarField, v: &VelocityField, p: &Problem, beta: f64) -> Result<VelocityField> {
    let mut out = v.clone();
    out.add_scaled(-beta, &grad_velocity(theta, v, p)?);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateOrder {
    TemplateFirst,
    VelocityFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub alpha: f64,
    pub beta: f64,
    pub max_iterations: usize,
    pub template_iterations: usize,
    pub velocity_iterations: usize,
    pub tol_template: f64,
    pub tol_velocity: f64,
    pub order: UpdateOrder,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            alpha: 0.01,
            beta: 0.05,
            max_iterations: 100,
            template_iterations: 1,
            velocity_iterations: 1,
            tol_template: 0.0,
            tol_velocity: 0.0,
            order: UpdateOrder::TemplateFirst,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite() && self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "step sizes must be positive, got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        if !(self.tol_template >= 0.0 && self.tol_velocity >= 0.0) {
            return Err(Error::InvalidArgument("tolerances must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum WarmStart {
    /// Projected gradient on all gates with zero velocity.
    StaticTv { iterations: usize },
    /// Projected gradient on gate 1 only, then velocity descent on all gates.
    FirstGate { template_iterations: usize, velocity_iterations: usize },
}

/// Projected gradient descent on the template with `v` held fixed.
pub fn projected_gradient(
    p: &Problem,
    theta: ScalarField,
    v: &VelocityField,
    alpha: f64,
    iterations: usize,
) -> Result<ScalarField> {
    let mut theta = theta;
    for k in 0..iterations {
        let eval = p.evaluate(&theta, v)?;
        if !eval.terms.total.is_finite() {
            return Err(Error::Diverged { iteration: k, step: "alpha" });
        }
        theta = project_step(&theta, &eval.grad_template(p, &theta, v)?, alpha);
    }
    Ok(theta)
}

/// Kernel-smoothed gradient descent on the velocity with `theta` held fixed.
pub fn velocity_descent(
    p: &Problem,
    theta: &ScalarField,
    v: VelocityField,
    beta: f64,
    iterations: usize,
) -> Result<VelocityField> {
    let mut v = v;
    for k in 0..iterations {
        let eval = p.evaluate(theta, &v)?;
        if !eval.terms.total.is_finite() {
            return Err(Error::Diverged { iteration: k, step: "beta" });
        }
        v.add_scaled(-beta, &eval.grad_velocity(p, &v)?);
    }
    Ok(v)
}

pub fn warm_start(p: &Problem, strategy: WarmStart, cfg: &SolverConfig) -> Result<(ScalarField, VelocityField)> {
    cfg.validate()?;
    let zero_v = VelocityField::zeros(p.grid, p.time_grid);
    let theta0 = ScalarField::zeros(p.grid);
    match strategy {
        WarmStart::StaticTv { iterations } => {
            let theta = projected_gradient(p, theta0, &zero_v, cfg.alpha, iterations)?;
            Ok((theta, zero_v))
        }
        WarmStart::FirstGate { template_iterations, velocity_iterations } => {
            let first = p.gates[0].index;
            let theta =
                projected_gradient(&p.restrict(&[first])?, theta0, &zero_v, cfg.alpha, template_iterations)?;
            let v = velocity_descent(p, &theta, zero_v, cfg.beta, velocity_iterations)?;
            Ok((theta, v))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: Objective,
    pub template_change: f64,
    pub velocity_change: f64,
    /// `|| min(theta, grad_theta J) ||` at the template update of this iteration.
    pub kkt_residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Clamped transport multipliers in the final push-forward.
    pub clamped: usize,
    pub template_mass: f64,
    pub gate_masses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub template: ScalarField,
    pub velocity: VelocityField,
    /// `rho_{iM}` for `i = 1..=N`.
    pub gate_images: Vec<ScalarField>,
    pub history: Vec<IterationRecord>,
    pub diagnostics: Diagnostics,
}

impl Solution {
    pub fn objective_history(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.objective.total).collect()
    }

    pub fn write_history_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["iteration", "objective", "data", "transport", "tv", "kkt_residual"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.history {
            let o = r.objective;
            w.write_record([
                r.iteration.to_string(),
                format!("{:e}", o.total),
                format!("{:e}", o.data),
                format!("{:e}", o.transport),
                format!("{:e}", o.tv),
                format!("{:e}", r.kkt_residual),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, e.to_string())
}

fn relative_change(new: f64, old: f64) -> f64 {
    new / old.max(1e-30)
}

fn kkt_residual(theta: &ScalarField, g: &ScalarField) -> f64 {
    let a = theta.grid().cell_area();
    let s: f64 = theta.values().iter().zip(g.values().iter()).map(|(t, d)| t.min(*d).powi(2)).sum();
    (s * a).sqrt()
}

/// Alternating template and velocity updates from `(theta, v)`.
pub fn alternate(
    p: &Problem,
    cfg: &SolverConfig,
    theta: ScalarField,
    v: VelocityField,
) -> Result<Solution> {
    cfg.validate()?;
    p.check(&theta, &v)?;
    let (mut theta, mut v) = (theta, v);
    let mut eval = p.evaluate(&theta, &v)?;
    if !eval.terms.total.is_finite() {
        return Err(Error::InvalidArgument("objective is not finite at the starting point".into()));
    }
    let mut history = vec![IterationRecord {
        iteration: 0,
        objective: eval.terms,
        template_change: 0.0,
        velocity_change: 0.0,
        kkt_residual: f64::NAN,
    }];
    let stages = match cfg.order {
        UpdateOrder::TemplateFirst => [true, false],
        UpdateOrder::VelocityFirst => [false, true],
    };
    let mut converged = false;
    let mut iterations = 0;
    for k in 1..=cfg.max_iterations {
        let (theta_old, v_old) = (theta.clone(), v.clone());
        let mut kkt = f64::NAN;
        for template_stage in stages {
            if template_stage {
                for _ in 0..cfg.template_iterations {
                    let g = eval.grad_template(p, &theta, &v)?;
                    if kkt.is_nan() {
                        kkt = kkt_residual(&theta, &g);
                    }
                    theta = project_step(&theta, &g, cfg.alpha);
                    eval = p.evaluate(&theta, &v)?;
                    if !eval.terms.total.is_finite() {
                        return Err(Error::Diverged { iteration: k, step: "alpha" });
                    }
                }
            } else {
                for _ in 0..cfg.velocity_iterations {
                    let g = eval.grad_velocity(p, &v)?;
                    v.add_scaled(-cfg.beta, &g);
                    eval = p.evaluate(&theta, &v)?;
                    if !eval.terms.total.is_finite() {
                        return Err(Error::Diverged { iteration: k, step: "beta" });
                    }
                }
            }
        }
        iterations = k;
        let dt = relative_change(theta.sub(&theta_old).norm(), theta_old.norm());
        let mut dv_field = v.clone();
        dv_field.add_scaled(-1.0, &v_old);
        let dv = relative_change(dv_field.norm(), v_old.norm());
        history.push(IterationRecord {
            iteration: k,
            objective: eval.terms,
            template_change: dt,
            velocity_change: dv,
            kkt_residual: kkt,
        });
        log::debug!("iteration {k}: J={:.6e} dtheta={dt:.3e} dv={dv:.3e}", eval.terms.total);
        if dt < cfg.tol_template && dv < cfg.tol_velocity {
            converged = true;
            break;
        }
    }
    let tg = p.time_grid;
    let gate_images: Vec<ScalarField> =
        (1..=tg.gates()).map(|i| eval.frames.gate_frame(i).clone()).collect();
    let diagnostics = Diagnostics {
        iterations,
        converged,
        clamped: eval.frames.clamped,
        template_mass: theta.mass(),
        gate_masses: gate_images.iter().map(ScalarField::mass).collect(),
    };
    Ok(Solution { template: theta, velocity: v, gate_images, history, diagnostics })
}
