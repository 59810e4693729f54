//! Procedural phantoms and their gated motion.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, ScalarField, TimeGrid, VectorField};
use crate::flow::{push_forward, VelocityField};

/// Subsamples per pixel axis when rasterizing.
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Phantom {
    /// Smooth star-shaped bumps `I (1 - u^2)^2`, `u = r / (R0 (1 + a cos(n (phi - phase))))`,
    /// placed on a ring with parameters drawn from `seed`.
    Stars { count: usize, seed: u64 },
    /// Crescent-shaped wall with two flanking lobes.
    Heart,
    /// Centered Gaussian bump of unit peak, cut off at four widths; `width`
    /// is a fraction of the domain half-width.
    Blob { width: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Motion {
    Identity,
    /// Per-gate increments of an affine map about the domain center; gate
    /// `i` applies `k = i - 1` increments. The warped image is
    /// `|det A^-1| f(A^-1 x)`, so mass is preserved.
    Affine {
        /// Radians per gate.
        rotation: f64,
        translation: [f64; 2],
        /// Isotropic scale factor per gate.
        scale: f64,
    },
    /// Transport along the stationary swirl `s exp(-|x|^2 / (2 w^2)) (-y, x)`
    /// for unit time per gate.
    Swirl { strength: f64, width: f64, steps_per_gate: usize },
}

#[derive(Clone, Copy, Debug)]
struct Star {
    center: [f64; 2],
    radius: f64,
    modulation: f64,
    lobes: f64,
    phase: f64,
    intensity: f64,
}

impl Star {
    fn value(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let phi = dy.atan2(dx);
        let u = dx.hypot(dy) / (self.radius * (1.0 + self.modulation * (self.lobes * (phi - self.phase)).cos()));
        if u < 1.0 {
            self.intensity * (1.0 - u * u).powi(2)
        } else {
            0.0
        }
    }
}

fn stars(count: usize, seed: u64, half: f64) -> Vec<Star> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ring = 0.45 * half;
    (0..count)
        .map(|k| {
            let angle = 2.0 * PI * k as f64 / count as f64 + rng.random_range(-0.15..0.15);
            let dist = ring * rng.random_range(0.85..1.1);
            Star {
                center: [dist * angle.cos(), dist * angle.sin()],
                radius: half * rng.random_range(0.09..0.13),
                modulation: rng.random_range(0.15..0.3),
                lobes: rng.random_range(3..=6) as f64,
                phase: rng.random_range(0.0..2.0 * PI),
                intensity: rng.random_range(0.4..1.0),
            }
        })
        .collect()
}

impl Phantom {
    /// Analytic intensity at a world point; the layout scales with `half`,
    /// the smaller half-width of the domain.
    fn sampler(&self, half: f64) -> Box<dyn Fn(f64, f64) -> f64 + Send + Sync> {
        match *self {
            Phantom::Stars { count, seed } => {
                let objs = stars(count, seed, half);
                Box::new(move |x, y| {
                    objs.iter().map(|s| s.value(x, y)).fold(0.0, f64::max)
                })
            }
            Phantom::Blob { width } => {
                let w = width * half;
                Box::new(move |x, y| {
                    let r2 = (x * x + y * y) / (w * w);
                    if r2 < 16.0 {
                        (-r2 / 2.0).exp()
                    } else {
                        0.0
                    }
                })
            }
            Phantom::Heart => Box::new(move |x, y| {
                let (u, v) = (x / half, y / half);
                let outer = (u + 0.05).powi(2) + v.powi(2) < 0.32f64.powi(2);
                let inner = (u - 0.04).powi(2) + (v - 0.02).powi(2) < 0.22f64.powi(2);
                let lobe_a = ((u - 0.38) / 0.12).powi(2) + ((v - 0.2) / 0.18).powi(2) < 1.0;
                let lobe_b = ((u - 0.36) / 0.1).powi(2) + ((v + 0.22) / 0.15).powi(2) < 1.0;
                if outer && !inner {
                    1.0
                } else if lobe_a || lobe_b {
                    0.6
                } else if inner {
                    0.15
                } else {
                    0.0
                }
            }),
        }
    }

    /// Supersampled rasterization of the pulled-back phantom
    /// `weight(x) f(map(x))`.
    fn rasterize(&self, grid: Grid, map: impl Fn(f64, f64) -> [f64; 2] + Sync, weight: f64) -> ScalarField {
        let e = grid.extent();
        let half = ((e.x1 - e.x0) / 2.0).min((e.y1 - e.y0) / 2.0);
        let f = self.sampler(half);
        let (cx, cy) = ((e.x0 + e.x1) / 2.0, (e.y0 + e.y1) / 2.0);
        let (dx, dy) = (grid.dx(), grid.dy());
        let n = SUPERSAMPLE as f64;
        ScalarField::from_fn(grid, |x, y| {
            let mut acc = 0.0;
            for a in 0..SUPERSAMPLE {
                for b in 0..SUPERSAMPLE {
                    let px = x + ((a as f64 + 0.5) / n - 0.5) * dx;
                    let py = y + ((b as f64 + 0.5) / n - 0.5) * dy;
                    let [qx, qy] = map(px - cx, py - cy);
                    acc += f(qx, qy);
                }
            }
            weight * acc / (n * n)
        })
    }

    pub fn render(&self, grid: Grid) -> ScalarField {
        self.rasterize(grid, |x, y| [x, y], 1.0)
    }
}

fn touches_boundary(f: &ScalarField) -> bool {
    let (nx, ny) = f.grid().shape();
    let v = f.values();
    (0..nx).any(|i| v[[i, 0]] != 0.0 || v[[i, ny - 1]] != 0.0)
        || (0..ny).any(|j| v[[0, j]] != 0.0 || v[[nx - 1, j]] != 0.0)
}

/// Ground-truth images at gates `1..=gates`; gate 1 is the undeformed phantom.
pub fn phantom_sequence(phantom: &Phantom, motion: &Motion, grid: Grid, gates: usize) -> Result<Vec<ScalarField>> {
    if gates == 0 {
        return Err(Error::InvalidArgument("need at least one gate".into()));
    }
    let seq = match *motion {
        Motion::Identity => vec![phantom.render(grid); gates],
        Motion::Affine { rotation, translation, scale } => {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::InvalidArgument(format!("scale must be positive, got {scale}")));
            }
            (0..gates)
                .map(|k| {
                    let k = k as f64;
                    let (s, th) = (scale.powf(k), rotation * k);
                    let (t0, t1) = (translation[0] * k, translation[1] * k);
                    let (c, sn) = (th.cos(), th.sin());
                    // Inverse of x -> s R x + t.
                    let inv = move |x: f64, y: f64| {
                        let (u, v) = ((x - t0) / s, (y - t1) / s);
                        [c * u + sn * v, -sn * u + c * v]
                    };
                    phantom.rasterize(grid, inv, 1.0 / (s * s))
                })
                .collect()
        }
        Motion::Swirl { strength, width, steps_per_gate } => {
            let tg = TimeGrid::new(gates.max(2) - 1, steps_per_gate.max(1))?;
            let frame = VectorField::from_fn(grid, |x, y| {
                let w = strength * (-(x * x + y * y) / (2.0 * width * width)).exp();
                [-w * y, w * x]
            });
            // Unit time per gate: the flow runs over [0, 1] in N - 1 gate
            // intervals, so velocities scale with N - 1.
            let v = VelocityField::stationary(tg, frame.scaled(tg.gates() as f64));
            let frames = push_forward(&phantom.render(grid), &v)?;
            (0..gates).map(|i| frames.frame(i * tg.degree()).clone()).collect()
        }
    };
    if let Some(i) = seq.iter().position(touches_boundary) {
        return Err(Error::SupportViolation { gate: i + 1 });
    }
    Ok(seq)
}
