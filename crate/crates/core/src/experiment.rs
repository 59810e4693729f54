//! End-to-end experiment runs driven by a TOML configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{metrics, phantom_sequence, simulate, AcquisitionPlan, Dataset, Metrics, Motion, Phantom};
use crate::error::{Error, Result};
use crate::field::{Extent, Grid, ScalarField, TimeGrid};
use crate::flow::VelocityField;
use crate::io::{write_field, write_png16, write_vector_field};
use crate::rkhs::{KernelMode, KernelOp};
use crate::solver::{
    alternate, projected_gradient, warm_start, ForwardMode, Gate, GateData, GradientScheme, Problem, Solution,
    SolverConfig, WarmStart,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub extent: Extent,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mu1: f64,
    pub mu2: f64,
    /// Kernel width in world units.
    pub sigma: f64,
    pub eps_tv: f64,
    pub kernel: KernelMode,
    pub forward: ForwardMode,
    #[serde(default)]
    pub gradient: GradientScheme,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub alpha: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WarmStartConfig {
    StaticTv { iterations: usize },
    FirstGate { template_iterations: usize, velocity_iterations: usize },
}

impl From<WarmStartConfig> for WarmStart {
    fn from(w: WarmStartConfig) -> Self {
        match w {
            WarmStartConfig::StaticTv { iterations } => WarmStart::StaticTv { iterations },
            WarmStartConfig::FirstGate { template_iterations, velocity_iterations } => {
                WarmStart::FirstGate { template_iterations, velocity_iterations }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Noise level in dB; `inf` for noise-free data.
    pub snr_db: f64,
    pub gates: usize,
    /// Fine time steps per gate interval.
    pub degree: usize,
    pub grid: GridConfig,
    pub phantom: Phantom,
    pub motion: Motion,
    pub acquisition: AcquisitionPlan,
    pub model: ModelConfig,
    pub solver: SolverConfig,
    pub warm_start: WarmStartConfig,
    pub baseline: BaselineConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.gates == 0 || self.degree == 0 {
            return bad(format!("gates={} and degree={} must be >= 1", self.gates, self.degree));
        }
        if !(self.snr_db == f64::INFINITY || self.snr_db.is_finite()) {
            return bad(format!("snr_db must be finite or inf, got {}", self.snr_db));
        }
        let m = &self.model;
        for (name, v) in [("mu1", m.mu1), ("mu2", m.mu2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(m.eps_tv > 0.0 && m.eps_tv.is_finite()) {
            return bad(format!("eps_tv must be positive, got {}", m.eps_tv));
        }
        if m.kernel == KernelMode::Gaussian && !(m.sigma > 0.0 && m.sigma.is_finite()) {
            return bad(format!("sigma must be positive, got {}", m.sigma));
        }
        if !(self.baseline.alpha > 0.0 && self.baseline.alpha.is_finite()) {
            return bad(format!("baseline alpha must be positive, got {}", self.baseline.alpha));
        }
        self.solver.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.grid_spec().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn grid_spec(&self) -> Result<Grid> {
        Grid::new(self.grid.nx, self.grid.ny, self.grid.extent)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.gates, self.degree)
    }

    /// Ground truth at gates `1..=N`. In identity-forward mode one extra
    /// leading frame is rendered; it serves as the fixed template.
    pub fn ground_truth(&self) -> Result<Vec<ScalarField>> {
        let extra = usize::from(self.model.forward == ForwardMode::Identity);
        phantom_sequence(&self.phantom, &self.motion, self.grid_spec()?, self.gates + extra)
    }
}

/// Simulated acquisition. In identity-forward mode the leading template
/// frame is kept in `ground_truth[0]` and has no gate record.
pub fn run_simulation(cfg: &ExperimentConfig) -> Result<Dataset> {
    let truth = cfg.ground_truth()?;
    match cfg.model.forward {
        ForwardMode::Radon => simulate(&truth, &cfg.acquisition, cfg.snr_db, cfg.seed),
        ForwardMode::Identity => Ok(Dataset {
            grid: cfg.grid_spec()?,
            ground_truth: truth,
            gates: Vec::new(),
            base_seed: cfg.seed,
            target_snr_db: f64::INFINITY,
        }),
    }
}

pub fn build_problem(cfg: &ExperimentConfig, data: &Dataset) -> Result<Problem> {
    let grid = cfg.grid_spec()?;
    grid.check_same(&data.grid, "dataset grid differs from the configuration")?;
    let gates: Vec<Gate> = match cfg.model.forward {
        ForwardMode::Radon => {
            if data.gates.len() != cfg.gates {
                return Err(Error::Config(format!("dataset has {} gates, config {}", data.gates.len(), cfg.gates)));
            }
            data.gates.iter().map(|g| Gate { index: g.index, data: GateData::Radon(g.noisy.clone()) }).collect()
        }
        ForwardMode::Identity => {
            if data.ground_truth.len() != cfg.gates + 1 {
                return Err(Error::Config("registration dataset needs gates + 1 frames".into()));
            }
            data.ground_truth[1..]
                .iter()
                .enumerate()
                .map(|(k, f)| Gate { index: k + 1, data: GateData::Image(f.clone()) })
                .collect()
        }
    };
    let m = &cfg.model;
    let kernel = KernelOp::new(grid, m.sigma, m.kernel)?;
    Ok(Problem::new(grid, cfg.time_grid()?, gates, m.mu1, m.mu2, m.eps_tv, kernel)?.with_scheme(m.gradient))
}

/// Ground truth per gate `1..=N`, skipping the registration template frame.
pub fn gate_truth<'a>(cfg: &ExperimentConfig, data: &'a Dataset) -> &'a [ScalarField] {
    match cfg.model.forward {
        ForwardMode::Radon => &data.ground_truth,
        ForwardMode::Identity => &data.ground_truth[1..],
    }
}

/// Warm start followed by the alternating solver.
pub fn run_reconstruction(cfg: &ExperimentConfig, data: &Dataset) -> Result<Solution> {
    let p = build_problem(cfg, data)?;
    let (theta, v) = match cfg.model.forward {
        ForwardMode::Radon => warm_start(&p, cfg.warm_start.into(), &cfg.solver)?,
        ForwardMode::Identity => (data.ground_truth[0].clone(), VelocityField::zeros(*p.grid(), p.time_grid())),
    };
    alternate(&p, &cfg.solver, theta, v)
}

#[derive(Clone, Debug)]
pub struct BaselineResult {
    /// Independent smoothed-TV reconstruction of every gate.
    pub per_gate: Vec<ScalarField>,
    /// One reconstruction from all gates pooled, ignoring motion.
    pub pooled: ScalarField,
}

pub fn run_baseline(cfg: &ExperimentConfig, data: &Dataset) -> Result<BaselineResult> {
    let p = build_problem(cfg, data)?;
    if p.forward_mode() != ForwardMode::Radon {
        return Err(Error::Config("the TV baseline needs projection data".into()));
    }
    let grid = *p.grid();
    let zero = VelocityField::zeros(grid, p.time_grid());
    let b = cfg.baseline;
    let per_gate = p
        .gates()
        .iter()
        .map(|g| {
            let single = p.restrict(&[g.index])?;
            projected_gradient(&single, ScalarField::zeros(grid), &zero, b.alpha, b.iterations)
        })
        .collect::<Result<Vec<_>>>()?;
    let pooled = projected_gradient(&p, ScalarField::zeros(grid), &zero, b.alpha, b.iterations)?;
    Ok(BaselineResult { per_gate, pooled })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub gate: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub nrmse: f64,
    pub mass: f64,
    pub mass_truth: f64,
}

impl MetricRow {
    pub fn new(method: &str, gate: usize, m: Metrics) -> Self {
        MetricRow {
            method: method.to_string(),
            gate,
            ssim: m.ssim,
            psnr: m.psnr,
            nrmse: m.nrmse,
            mass: m.mass,
            mass_truth: m.mass_truth,
        }
    }
}

pub fn score(method: &str, images: &[ScalarField], truth: &[ScalarField]) -> Result<Vec<MetricRow>> {
    images.iter().zip(truth).enumerate().map(|(k, (r, t))| Ok(MetricRow::new(method, k + 1, metrics(r, t)?))).collect()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::format(path, e.to_string()))).collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes raw dumps and PNGs of `images` named `<prefix>_gateNN`; PNG
/// windows are `[0, max(truth, image)]`.
fn write_images(dir: &Path, prefix: &str, images: &[ScalarField], truth: &[ScalarField]) -> Result<()> {
    for (k, (img, gt)) in images.iter().zip(truth).enumerate() {
        let stem = format!("{prefix}_gate{:02}", k + 1);
        write_field(&dir.join(format!("{stem}.raw")), img)?;
        write_png16(&dir.join(format!("{stem}.png")), img, [0.0, gt.max().max(img.max())])?;
    }
    Ok(())
}

pub fn write_solution(dir: &Path, cfg: &ExperimentConfig, data: &Dataset, sol: &Solution) -> Result<Vec<MetricRow>> {
    create_dir(dir)?;
    let truth = gate_truth(cfg, data);
    write_images(dir, "recon", &sol.gate_images, truth)?;
    write_field(&dir.join("template.raw"), &sol.template)?;
    let steps = sol.velocity.time_grid().steps();
    write_vector_field(&dir.join("velocity_t0.raw"), sol.velocity.frame(0))?;
    write_vector_field(&dir.join("velocity_t1.raw"), sol.velocity.frame(steps))?;
    sol.write_history_csv(&dir.join("objective.csv"))?;
    let method = match cfg.model.kernel {
        KernelMode::Gaussian => "proposed",
        KernelMode::Identity => "l2",
    };
    let rows = score(method, &sol.gate_images, truth)?;
    write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
    let diag = dir.join("diagnostics.toml");
    let text = toml::to_string(&sol.diagnostics).map_err(|e| Error::format(&diag, e.to_string()))?;
    fs::write(&diag, text).map_err(|e| Error::io(&diag, e))?;
    Ok(rows)
}

pub fn write_baseline(dir: &Path, data: &Dataset, b: &BaselineResult) -> Result<Vec<MetricRow>> {
    create_dir(dir)?;
    let truth = &data.ground_truth;
    write_images(dir, "tv", &b.per_gate, truth)?;
    let pooled = vec![b.pooled.clone(); truth.len()];
    write_field(&dir.join("static.raw"), &b.pooled)?;
    write_png16(&dir.join("static.png"), &b.pooled, [0.0, b.pooled.max().max(truth[0].max())])?;
    let mut rows = score("tv", &b.per_gate, truth)?;
    rows.extend(score("static", &pooled, truth)?);
    write_metrics_csv(&dir.join("metrics.csv"), &rows)?;
    Ok(rows)
}

/// One row of a cross-run comparison; deltas are taken against the same
/// method and gate in the first run that reports it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub method: String,
    pub gate: usize,
    pub ssim: f64,
    pub psnr: f64,
    pub nrmse: f64,
    pub mass: f64,
    pub delta_ssim: f64,
    pub delta_psnr: f64,
    pub delta_nrmse: f64,
}

pub fn compare(runs: &[(String, Vec<MetricRow>)]) -> Vec<ComparisonRow> {
    let mut out: Vec<ComparisonRow> = Vec::new();
    for (run, rows) in runs {
        for r in rows {
            let base = out.iter().find(|c| c.method == r.method && c.gate == r.gate);
            let (bs, bp, bn) = base.map_or((r.ssim, r.psnr, r.nrmse), |b| (b.ssim, b.psnr, b.nrmse));
            let delta = |a: f64, b: f64| if a == b { 0.0 } else { a - b };
            out.push(ComparisonRow {
                run: run.clone(),
                method: r.method.clone(),
                gate: r.gate,
                ssim: r.ssim,
                psnr: r.psnr,
                nrmse: r.nrmse,
                mass: r.mass,
                delta_ssim: delta(r.ssim, bs),
                delta_psnr: delta(r.psnr, bp),
                delta_nrmse: delta(r.nrmse, bn),
            });
        }
    }
    out
}

pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
