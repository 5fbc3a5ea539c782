//! Buoyancy-driven 2D smoke at desk scale: semi-Lagrangian advection, a
//! Boussinesq buoyant force, and a pressure projection that drives the
//! central-difference divergence of the collocated velocity to solver
//! precision. Closed-box boundaries (velocity clamped to zero on the boundary
//! ring).
//!
//! The same continuous initial condition is rolled out at three resolutions
//! to produce ground truth, expensive (`c2`) and inexpensive (`c1`)
//! simulator outputs for one trajectory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{C2Data, Split, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::fields::{resize_bilinear, warp, Field2D, VelocityField2D};

/// Buoyant acceleration in cells/time² at the 32-cell reference resolution;
/// scaled with the grid so every resolution integrates the same physics.
pub const BUOYANCY_ACCEL: f64 = 0.3;
const REFERENCE_RESOLUTION: f64 = 32.0;

/// Fixed iteration budget for the pressure solve.
pub const PRESSURE_ITERS: usize = 600;
const PRESSURE_TOL: f64 = 1e-12;

/// One snapshot of the solver state. Velocity components are in grid cells
/// per time unit; the boundary ring is always zero.
#[derive(Debug, Clone)]
pub struct FluidState {
    pub buoyancy: Field2D,
    pub velocity: VelocityField2D,
    pub time_index: usize,
    /// Maximum of the initial buoyancy; advection clamps against it so the
    /// transport stays non-amplifying.
    pub buoyancy_bound: f64,
}

/// Continuous initial condition: Gaussian buoyancy blobs plus a swirl
/// streamfunction, both defined on normalized [0,1]² coordinates so any grid
/// samples the same fields.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FluidInit {
    pub seed: u64,
    pub blobs: Vec<Blob>,
    pub swirls: Vec<Blob>,
}

/// An isotropic Gaussian bump; `amplitude` is signed for swirls.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub amplitude: f64,
}

impl FluidInit {
    /// Seeded random scene: 2–4 buoyancy blobs in the lower half, 2–3 signed
    /// swirls anywhere.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_blobs = rng.gen_range(2..=4);
        let blobs = (0..n_blobs)
            .map(|_| Blob {
                cx: rng.gen_range(0.25..0.75),
                cy: rng.gen_range(0.25..0.55),
                radius: rng.gen_range(0.08..0.13),
                amplitude: rng.gen_range(0.4..1.0),
            })
            .collect();
        let n_swirls = rng.gen_range(2..=3);
        let swirls = (0..n_swirls)
            .map(|_| Blob {
                cx: rng.gen_range(0.2..0.8),
                cy: rng.gen_range(0.2..0.8),
                radius: rng.gen_range(0.1..0.25),
                amplitude: rng.gen_range(0.005..0.012) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            })
            .collect();
        Self { seed, blobs, swirls }
    }

    fn buoyancy_at(&self, x: f64, y: f64) -> f64 {
        self.blobs
            .iter()
            .map(|b| {
                let d2 = (x - b.cx).powi(2) + (y - b.cy).powi(2);
                b.amplitude * (-d2 / (2.0 * b.radius * b.radius)).exp()
            })
            .sum()
    }

    /// Swirl velocity in normalized units: the curl of a Gaussian
    /// streamfunction, evaluated analytically.
    fn swirl_at(&self, x: f64, y: f64) -> (f64, f64) {
        let mut vx = 0.0;
        let mut vy = 0.0;
        for s in &self.swirls {
            let (dx, dy) = (x - s.cx, y - s.cy);
            let psi = s.amplitude * (-(dx * dx + dy * dy) / (2.0 * s.radius * s.radius)).exp();
            let r2 = s.radius * s.radius;
            vx += psi * (-dy / r2);
            vy -= psi * (-dx / r2);
        }
        (vx, vy)
    }

    /// Samples the continuous fields at cell centers of a `res × res` grid.
    pub fn init_state(&self, res: usize) -> FluidState {
        let at = |i: usize, n: usize| (i as f64 + 0.5) / n as f64;
        let buoyancy = Field2D::from_fn(res, res, |x, y| {
            self.buoyancy_at(at(x, res), at(y, res)).clamp(0.0, 1.0)
        });
        let mut vx = Field2D::zeros(res, res);
        let mut vy = Field2D::zeros(res, res);
        for y in 0..res {
            for x in 0..res {
                let (nx, ny) = self.swirl_at(at(x, res), at(y, res));
                vx.set(x, y, nx * res as f64);
                vy.set(x, y, ny * res as f64);
            }
        }
        let bound = buoyancy.max();
        let mut state = FluidState {
            buoyancy,
            velocity: VelocityField2D::new(vx, vy).expect("same dims"),
            time_index: 0,
            buoyancy_bound: bound,
        };
        clamp_walls(&mut state.velocity);
        state
    }
}

fn clamp_walls(v: &mut VelocityField2D) {
    let (w, h) = (v.width(), v.height());
    for comp in [&mut v.vx, &mut v.vy] {
        for x in 0..w {
            comp.set(x, 0, 0.0);
            comp.set(x, h - 1, 0.0);
        }
        for y in 0..h {
            comp.set(0, y, 0.0);
            comp.set(w - 1, y, 0.0);
        }
    }
}

/// Central-difference divergence on interior cells (boundary cells read as
/// stored, which the solver keeps at zero).
pub fn divergence(v: &VelocityField2D) -> Field2D {
    let (w, h) = (v.width(), v.height());
    Field2D::from_fn(w, h, |x, y| {
        if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
            0.0
        } else {
            0.5 * (v.vx.get(x + 1, y) - v.vx.get(x - 1, y))
                + 0.5 * (v.vy.get(x, y + 1) - v.vy.get(x, y - 1))
        }
    })
}

pub fn max_divergence(v: &VelocityField2D) -> f64 {
    divergence(v).data().iter().fold(0.0f64, |m, d| m.max(d.abs()))
}

/// Face-divergence measured by averaging cell velocities onto faces (wall
/// faces are closed).
fn face_divergence(v: &VelocityField2D) -> Vec<f64> {
    let (w, h) = (v.width(), v.height());
    let mut div = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let fx_r = if x + 1 < w { 0.5 * (v.vx.get(x, y) + v.vx.get(x + 1, y)) } else { 0.0 };
            let fx_l = if x > 0 { 0.5 * (v.vx.get(x - 1, y) + v.vx.get(x, y)) } else { 0.0 };
            let fy_d = if y + 1 < h { 0.5 * (v.vy.get(x, y) + v.vy.get(x, y + 1)) } else { 0.0 };
            let fy_u = if y > 0 { 0.5 * (v.vy.get(x, y - 1) + v.vy.get(x, y)) } else { 0.0 };
            div[y * w + x] = (fx_r - fx_l) + (fy_d - fy_u);
        }
    }
    div
}

/// Approximate projection against the compact face divergence: solves the
/// 5-point Neumann Poisson system on cell pressures with conjugate gradients
/// and subtracts central pressure gradients from interior cells. This is what
/// keeps semi-Lagrangian advection close to mass-conserving; the exact
/// central-difference cleanup runs afterwards.
fn project_faces(v: &mut VelocityField2D) {
    let (w, h) = (v.width(), v.height());
    if w < 3 || h < 3 {
        return;
    }
    let b: Vec<f64> = face_divergence(v).into_iter().map(|d| -d).collect();
    // A = -graph Laplacian with Neumann walls (positive semidefinite)
    let apply = |q: &[f64], out: &mut [f64]| {
        for y in 0..h {
            for x in 0..w {
                let c = q[y * w + x];
                let mut acc = 0.0;
                if x > 0 {
                    acc += c - q[y * w + x - 1];
                }
                if x + 1 < w {
                    acc += c - q[y * w + x + 1];
                }
                if y > 0 {
                    acc += c - q[(y - 1) * w + x];
                }
                if y + 1 < h {
                    acc += c - q[(y + 1) * w + x];
                }
                out[y * w + x] = acc;
            }
        }
    };
    let dot = |a: &[f64], bv: &[f64]| -> f64 { a.iter().zip(bv).map(|(x, y)| x * y).sum() };
    let mut p = vec![0.0; w * h];
    let mut r = b;
    let mut dir = r.clone();
    let mut aq = vec![0.0; w * h];
    let mut rr = dot(&r, &r);
    let scale = rr.sqrt().max(1.0);
    for _ in 0..PRESSURE_ITERS {
        if rr.sqrt() <= PRESSURE_TOL * scale {
            break;
        }
        apply(&dir, &mut aq);
        let denom = dot(&dir, &aq);
        if denom.abs() < 1e-300 {
            break;
        }
        let alpha = rr / denom;
        for i in 0..p.len() {
            p[i] += alpha * dir[i];
            r[i] -= alpha * aq[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..dir.len() {
            dir[i] = r[i] + beta * dir[i];
        }
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = 0.5 * (p[y * w + x + 1] - p[y * w + x - 1]);
            let gy = 0.5 * (p[(y + 1) * w + x] - p[(y - 1) * w + x]);
            v.vx.set(x, y, v.vx.get(x, y) - gx);
            v.vy.set(x, y, v.vy.get(x, y) - gy);
        }
    }
}

/// Matrix-free conjugate gradients on the composite div·grad system. The
/// pressure lives on interior cells (zero outside); the velocity update is
/// the negated adjoint of the divergence, so the post-update divergence is
/// exactly the solver residual.
fn project(v: &mut VelocityField2D) {
    let (w, h) = (v.width(), v.height());
    if w < 3 || h < 3 {
        return;
    }
    let idx = |x: usize, y: usize| y * w + x;
    let interior = |x: usize, y: usize| x >= 1 && y >= 1 && x + 1 < w && y + 1 < h;

    // rhs b = -div(v) on interior cells
    let div = divergence(v);
    let mut b = vec![0.0; w * h];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            b[idx(x, y)] = -div.get(x, y);
        }
    }

    // A q = div(adjoint_update(q)) where the update is central-difference
    // gradients of q (zero-extended) applied to interior velocity cells.
    let apply = |q: &[f64], out: &mut [f64]| {
        let qat = |x: isize, y: isize| -> f64 {
            if x >= 1 && y >= 1 && (x as usize) + 1 < w && (y as usize) + 1 < h {
                q[y as usize * w + x as usize]
            } else {
                0.0
            }
        };
        // velocity increment from q
        let ux = |x: usize, y: usize| -> f64 {
            if !interior(x, y) {
                return 0.0;
            }
            0.5 * (qat(x as isize - 1, y as isize) - qat(x as isize + 1, y as isize))
        };
        let uy = |x: usize, y: usize| -> f64 {
            if !interior(x, y) {
                return 0.0;
            }
            0.5 * (qat(x as isize, y as isize - 1) - qat(x as isize, y as isize + 1))
        };
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                out[idx(x, y)] =
                    0.5 * (ux(x + 1, y) - ux(x - 1, y)) + 0.5 * (uy(x, y + 1) - uy(x, y - 1));
            }
        }
    };

    let dot = |a: &[f64], bv: &[f64]| -> f64 { a.iter().zip(bv).map(|(x, y)| x * y).sum() };
    let mut p = vec![0.0; w * h];
    let mut r = b.clone();
    let mut dir = r.clone();
    let mut aq = vec![0.0; w * h];
    let mut rr = dot(&r, &r);
    let scale = rr.sqrt().max(1.0);
    for _ in 0..PRESSURE_ITERS {
        if rr.sqrt() <= PRESSURE_TOL * scale {
            break;
        }
        apply(&dir, &mut aq);
        let denom = dot(&dir, &aq);
        if denom.abs() < 1e-300 {
            break;
        }
        let alpha = rr / denom;
        for i in 0..p.len() {
            p[i] += alpha * dir[i];
            r[i] -= alpha * aq[i];
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..dir.len() {
            dir[i] = r[i] + beta * dir[i];
        }
    }

    // apply the velocity increment from the solved pressure
    let qat = |x: isize, y: isize| -> f64 {
        if x >= 1 && y >= 1 && (x as usize) + 1 < w && (y as usize) + 1 < h {
            p[y as usize * w + x as usize]
        } else {
            0.0
        }
    };
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let dx = 0.5 * (qat(x as isize - 1, y as isize) - qat(x as isize + 1, y as isize));
            let dy = 0.5 * (qat(x as isize, y as isize - 1) - qat(x as isize, y as isize + 1));
            v.vx.set(x, y, v.vx.get(x, y) + dx);
            v.vy.set(x, y, v.vy.get(x, y) + dy);
        }
    }
}

/// Error-compensated semi-Lagrangian advection (back-and-forth error
/// correction) for the buoyancy, limited per cell to the value range of the
/// four source cells so the transport stays non-amplifying.
fn advect_bfecc(b: &Field2D, v: &VelocityField2D, dt: f64, bound: f64) -> Result<Field2D> {
    let fwd = warp(b, v, dt)?;
    let back = warp(&fwd, v, -dt)?;
    let adjusted = b.add_scaled(&b.add_scaled(&back, -1.0), 0.5);
    let raw = warp(&adjusted, v, dt)?;
    let (w, h) = (b.width(), b.height());
    Ok(Field2D::from_fn(w, h, |x, y| {
        let sx = (x as f64 - v.vx.get(x, y) * dt).clamp(0.0, (w - 1) as f64);
        let sy = (y as f64 - v.vy.get(x, y) * dt).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (cx, cy) in [(x0, y0), (x1, y0), (x0, y1), (x1, y1)] {
            lo = lo.min(b.get(cx, cy));
            hi = hi.max(b.get(cx, cy));
        }
        raw.get(x, y).clamp(lo, hi).clamp(0.0, bound)
    }))
}

/// One solver step: advect velocity and buoyancy semi-Lagrangially, add the
/// buoyant force, clamp the walls, project to (discretely) divergence-free.
pub fn fluid_step(state: &FluidState, dt: f64) -> Result<FluidState> {
    if !(dt > 0.0) {
        return Err(Error::RejectedInput("dt must be positive".into()));
    }
    let max_speed = state
        .velocity
        .vx
        .data()
        .iter()
        .chain(state.velocity.vy.data())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let cfl = max_speed * dt;
    if cfl > 1.0 {
        return Err(Error::RejectedInput(format!(
            "CFL {cfl:.3} exceeds 1 (max speed {max_speed:.3}, dt {dt})"
        )));
    }

    let vx = warp(&state.velocity.vx, &state.velocity, dt)?;
    let vy = warp(&state.velocity.vy, &state.velocity, dt)?;
    let buoyancy = advect_bfecc(&state.buoyancy, &state.velocity, dt, state.buoyancy_bound)?;

    let h = state.buoyancy.height() as f64;
    let accel = BUOYANCY_ACCEL * h / REFERENCE_RESOLUTION;
    let vy = vy.add_scaled(&buoyancy, dt * accel);

    let mut velocity = VelocityField2D::new(vx, vy)?;
    clamp_walls(&mut velocity);
    project_faces(&mut velocity);
    clamp_walls(&mut velocity);
    project(&mut velocity);

    Ok(FluidState { buoyancy, velocity, time_index: state.time_index + 1, buoyancy_bound: state.buoyancy_bound })
}

/// Fixed-dt rollout; returns every state including the initial one.
pub fn simulate(init: &FluidInit, steps: usize, resolution: usize, dt: f64) -> Result<Vec<FluidState>> {
    if ![8, 16, 32].contains(&resolution) {
        return Err(Error::RejectedInput(format!(
            "resolution {resolution} not in the desk-scale set {{8, 16, 32}}"
        )));
    }
    let mut states = Vec::with_capacity(steps + 1);
    states.push(init.init_state(resolution));
    for _ in 0..steps {
        let next = fluid_step(states.last().unwrap(), dt)?;
        states.push(next);
    }
    Ok(states)
}

/// Everything `gen-data` records about one trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FluidTrajectoryInfo {
    pub id: String,
    pub split: Split,
    pub init: FluidInit,
}

/// Dataset spec for the fluid experiment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FluidDatasetSpec {
    pub n_trajectories: usize,
    pub seed: u64,
    pub fine: usize,
    pub mid: usize,
    pub coarse: usize,
    pub horizon_steps: usize,
    pub dt: f64,
}

impl Default for FluidDatasetSpec {
    fn default() -> Self {
        Self { n_trajectories: 20, seed: 7, fine: 32, mid: 16, coarse: 8, horizon_steps: 200, dt: 0.05 }
    }
}

fn downsampled_state(fine: &FluidState, res: usize) -> Result<FluidState> {
    let scale = res as f64 / fine.buoyancy.width() as f64;
    let buoyancy = resize_bilinear(&fine.buoyancy, res, res)?;
    let bound = buoyancy.max();
    Ok(FluidState {
        buoyancy,
        velocity: {
            let mut v = VelocityField2D::new(
                resize_bilinear(&fine.velocity.vx, res, res)?.scaled(scale),
                resize_bilinear(&fine.velocity.vy, res, res)?.scaled(scale),
            )?;
            clamp_walls(&mut v);
            v
        },
        time_index: 0,
        buoyancy_bound: bound,
    })
}

fn rollout_from(mut state: FluidState, steps: usize, dt: f64) -> Result<FluidState> {
    for _ in 0..steps {
        state = fluid_step(&state, dt)?;
    }
    Ok(state)
}

/// Runs each seeded init at fine (ground truth), mid (`c2`) and coarse
/// (`c1` buoyancy + vorticity) resolutions. Context is the fine initial
/// buoyancy; the target is the fine buoyancy at the horizon. A seeded
/// shuffle tags a 10% test split.
pub fn gen_fluid_dataset(spec: &FluidDatasetSpec) -> Result<(Vec<TrajectoryRecord>, Vec<FluidTrajectoryInfo>)> {
    if spec.n_trajectories == 0 {
        return Err(Error::RejectedInput("need at least one trajectory".into()));
    }
    let n = spec.n_trajectories;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let test_count = ((n as f64) * 0.1).round() as usize;
    let mut split = vec![Split::Train; n];
    for &i in order.iter().take(test_count) {
        split[i] = Split::Test;
    }

    let results: Vec<(TrajectoryRecord, FluidTrajectoryInfo)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(TrajectoryRecord, FluidTrajectoryInfo)> {
            let init = FluidInit::random(spec.seed.wrapping_add(i as u64).wrapping_mul(2654435761));
            let fine0 = init.init_state(spec.fine);
            let context = fine0.buoyancy.clone();
            let mid0 = downsampled_state(&fine0, spec.mid)?;
            let coarse0 = downsampled_state(&fine0, spec.coarse)?;

            let fine_end = rollout_from(fine0, spec.horizon_steps, spec.dt)?;
            let mid_end = rollout_from(mid0, spec.horizon_steps, spec.dt)?;
            let coarse_end = rollout_from(coarse0, spec.horizon_steps, spec.dt)?;

            let id = format!("fluid{i:04}");
            let record = TrajectoryRecord {
                id: id.clone(),
                split: split[i],
                context: vec![context],
                target: vec![fine_end.buoyancy.clone()],
                c1: vec![coarse_end.buoyancy.clone(), coarse_end.velocity.curl()],
                c2: Some(C2Data::Fields(vec![mid_end.buoyancy.clone()])),
            };
            Ok((record, FluidTrajectoryInfo { id, split: split[i], init }))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(results.into_iter().unzip())
}
