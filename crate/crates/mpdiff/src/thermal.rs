//! The laser melt-pool process: closed-form heat-kernel solution of the
//! anisotropic 2D heat equation with surface loss, nonlinear least-squares
//! calibration of its four parameters, a synthetic spatter-particle video
//! generator, and dense optical-flow estimation for the flow conditional
//! model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{C2Data, Split, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::fields::{warp, Field2D, Mask2D, VelocityField2D};

/// Heat-equation parameters: surface-loss rate, axis diffusivities, and the
/// kernel amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatParams {
    pub rho: f64,
    pub kappa_x: f64,
    pub kappa_y: f64,
    pub c_n: f64,
}

impl HeatParams {
    pub fn validate(&self) -> Result<()> {
        if self.rho < 0.0 || self.kappa_x <= 0.0 || self.kappa_y <= 0.0 || self.c_n <= 0.0 {
            return Err(Error::RejectedInput(format!("invalid heat parameters {self:?}")));
        }
        Ok(())
    }
}

/// Piecewise-linear moving point source: the G-code surrogate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LaserPath {
    pub waypoints: Vec<Waypoint>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Waypoint {
    pub time: f64,
    pub x: f64,
    pub y: f64,
    pub power: f64,
}

impl LaserPath {
    pub fn new(waypoints: Vec<Waypoint>) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::RejectedInput("path needs at least two waypoints".into()));
        }
        for pair in waypoints.windows(2) {
            if !(pair[1].time > pair[0].time) {
                return Err(Error::RejectedInput("waypoint times must strictly increase".into()));
            }
        }
        if waypoints.iter().any(|w| w.power < 0.0) {
            return Err(Error::RejectedInput("waypoint power must be non-negative".into()));
        }
        Ok(Self { waypoints })
    }

    pub fn span(&self) -> (f64, f64) {
        (self.waypoints[0].time, self.waypoints[self.waypoints.len() - 1].time)
    }

    /// Source position and power at time `s`; power is zero outside the span.
    pub fn at(&self, s: f64) -> (f64, f64, f64) {
        let (t0, t1) = self.span();
        if s < t0 {
            let w = &self.waypoints[0];
            return (w.x, w.y, 0.0);
        }
        if s > t1 {
            let w = &self.waypoints[self.waypoints.len() - 1];
            return (w.x, w.y, 0.0);
        }
        let idx = self
            .waypoints
            .windows(2)
            .position(|p| s <= p[1].time)
            .unwrap_or(self.waypoints.len() - 2);
        let (a, b) = (&self.waypoints[idx], &self.waypoints[idx + 1]);
        let f = (s - a.time) / (b.time - a.time);
        (a.x + f * (b.x - a.x), a.y + f * (b.y - a.y), a.power + f * (b.power - a.power))
    }
}

/// Grid geometry: cell centers at `((i + 0.5)/n)·extent` per axis.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub extent: f64,
}

impl GridSpec {
    pub fn cell_center(&self, x: usize, y: usize) -> (f64, f64) {
        (
            (x as f64 + 0.5) / self.width as f64 * self.extent,
            (y as f64 + 0.5) / self.height as f64 * self.extent,
        )
    }
}

/// Free-space kernel of `∂u/∂s = ∇·κ∇u − ρu + f`:
/// `C_n/(s−s′) · exp(−ρ(s−s′)) · exp(−(r−r′)ᵀκ⁻¹(r−r′)/(4(s−s′)))`.
pub fn greens_function(
    r: (f64, f64),
    s: f64,
    r_prime: (f64, f64),
    s_prime: f64,
    phi: &HeatParams,
) -> Result<f64> {
    if !(s > s_prime) {
        return Err(Error::RejectedInput(format!("need s > s_prime, got {s} <= {s_prime}")));
    }
    let tau = s - s_prime;
    let dx = r.0 - r_prime.0;
    let dy = r.1 - r_prime.1;
    let quad = dx * dx / phi.kappa_x + dy * dy / phi.kappa_y;
    Ok(phi.c_n / tau * (-phi.rho * tau).exp() * (-quad / (4.0 * tau)).exp())
}

/// Default quadrature resolution relative to the frame interval.
pub const QUAD_STEPS_PER_FRAME: usize = 20;

/// Melt-pool temperature at time `s`: the kernel integrated along the moving
/// point source with a fixed-step trapezoid rule. The singular endpoint is
/// excluded by stopping the quadrature half a step short of `s`.
pub fn meltpool_field(
    path: &LaserPath,
    s: f64,
    phi: &HeatParams,
    grid: &GridSpec,
    quad_step: f64,
) -> Result<Field2D> {
    phi.validate()?;
    if !(quad_step > 0.0) {
        return Err(Error::RejectedInput("quadrature step must be positive".into()));
    }
    let nodes = quadrature_nodes(s, quad_step);
    let mut field = Field2D::zeros(grid.width, grid.height);
    if nodes.is_empty() {
        return Ok(field);
    }
    let sources: Vec<(f64, f64, f64, f64)> = nodes
        .iter()
        .map(|&(sp, w)| {
            let (px, py, power) = path.at(sp);
            (sp, w * power, px, py)
        })
        .collect();
    for y in 0..grid.height {
        for x in 0..grid.width {
            let r = grid.cell_center(x, y);
            let mut acc = 0.0;
            for &(sp, weight, px, py) in &sources {
                if weight == 0.0 {
                    continue;
                }
                acc += weight * greens_function(r, s, (px, py), sp, phi)?;
            }
            field.set(x, y, acc);
        }
    }
    Ok(field)
}

/// Uniform trapezoid nodes on `[0, s − quad_step/2]` as `(s', weight)`.
fn quadrature_nodes(s: f64, quad_step: f64) -> Vec<(f64, f64)> {
    let end = s - quad_step / 2.0;
    if end <= 0.0 {
        return Vec::new();
    }
    let k = ((end / quad_step).round() as usize).max(1);
    let h = end / k as f64;
    (0..=k)
        .map(|i| {
            let w = if i == 0 || i == k { 0.5 * h } else { h };
            (i as f64 * h, w)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CalibrateOptions {
    pub steps: usize,
    pub lr: f64,
    pub quad_step: f64,
}

impl Default for CalibrateOptions {
    fn default() -> Self {
        Self { steps: 300, lr: 0.05, quad_step: 0.1 / QUAD_STEPS_PER_FRAME as f64 }
    }
}

pub struct CalibrationOutcome {
    pub params: HeatParams,
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
}

/// Melt-pool field and its analytic gradient with respect to
/// `(ρ, κ_x, κ_y, C_n)`, sharing kernel evaluations.
fn meltpool_with_grad(
    path: &LaserPath,
    s: f64,
    phi: &HeatParams,
    grid: &GridSpec,
    quad_step: f64,
) -> (Field2D, [Field2D; 4]) {
    let nodes = quadrature_nodes(s, quad_step);
    let (w, h) = (grid.width, grid.height);
    let mut u = Field2D::zeros(w, h);
    let mut grad = [
        Field2D::zeros(w, h),
        Field2D::zeros(w, h),
        Field2D::zeros(w, h),
        Field2D::zeros(w, h),
    ];
    let sources: Vec<(f64, f64, f64, f64)> = nodes
        .iter()
        .map(|&(sp, wgt)| {
            let (px, py, power) = path.at(sp);
            (sp, wgt * power, px, py)
        })
        .collect();
    for y in 0..h {
        for x in 0..w {
            let r = grid.cell_center(x, y);
            let (mut acc, mut d_rho, mut d_kx, mut d_ky, mut d_cn) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(sp, weight, px, py) in &sources {
                if weight == 0.0 {
                    continue;
                }
                let tau = s - sp;
                let dx = r.0 - px;
                let dy = r.1 - py;
                let quad = dx * dx / phi.kappa_x + dy * dy / phi.kappa_y;
                let g = phi.c_n / tau * (-phi.rho * tau).exp() * (-quad / (4.0 * tau)).exp();
                let wg = weight * g;
                acc += wg;
                d_rho += wg * (-tau);
                d_kx += wg * dx * dx / (4.0 * tau * phi.kappa_x * phi.kappa_x);
                d_ky += wg * dy * dy / (4.0 * tau * phi.kappa_y * phi.kappa_y);
                d_cn += wg / phi.c_n;
            }
            u.set(x, y, acc);
            grad[0].set(x, y, d_rho);
            grad[1].set(x, y, d_kx);
            grad[2].set(x, y, d_ky);
            grad[3].set(x, y, d_cn);
        }
    }
    (u, grad)
}

/// Nonlinear least squares on `(ρ, κ_x, κ_y, C_n)` against observed frames.
/// Adam runs on log-parameters (positivity by construction); steps that
/// increase the loss are rejected and halve the learning rate, so the
/// accepted-loss trace is non-increasing.
pub fn calibrate(
    observations: &[(f64, Field2D)],
    path: &LaserPath,
    grid: &GridSpec,
    phi0: &HeatParams,
    opts: &CalibrateOptions,
) -> Result<CalibrationOutcome> {
    if observations.is_empty() {
        return Err(Error::RejectedInput("need at least one observation frame".into()));
    }
    phi0.validate()?;
    let rho_floor = 1e-6;
    let mut theta = [
        phi0.rho.max(rho_floor).ln(),
        phi0.kappa_x.ln(),
        phi0.kappa_y.ln(),
        phi0.c_n.ln(),
    ];
    let to_phi = |t: &[f64; 4]| HeatParams {
        rho: t[0].exp(),
        kappa_x: t[1].exp(),
        kappa_y: t[2].exp(),
        c_n: t[3].exp(),
    };
    let norm = 1.0 / observations.len() as f64;
    let eval = |t: &[f64; 4]| -> Result<(f64, [f64; 4])> {
        let phi = to_phi(t);
        let mut loss = 0.0;
        let mut grad = [0.0; 4];
        for (s, obs) in observations {
            let (u, du) = meltpool_with_grad(path, *s, &phi, grid, opts.quad_step);
            if !u.same_shape(obs) {
                return Err(Error::RejectedInput("observation grid mismatch".into()));
            }
            for idx in 0..u.data().len() {
                let r = u.data()[idx] - obs.data()[idx];
                loss += norm * r * r;
                for p in 0..4 {
                    grad[p] += norm * 2.0 * r * du[p].data()[idx];
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::DivergedCalibration(format!("non-finite loss at {:?}", to_phi(t))));
        }
        // chain rule through the log parameterization
        let phi_arr = [phi.rho, phi.kappa_x, phi.kappa_y, phi.c_n];
        for p in 0..4 {
            grad[p] *= phi_arr[p];
        }
        Ok((loss, grad))
    };

    let (mut best_loss, mut grad) = eval(&theta)?;
    let mut trace = vec![best_loss];
    let mut lr = opts.lr;
    let mut adam = crate::diffusion::AdamState::new(4, lr);
    for _ in 0..opts.steps {
        if lr < 1e-10 {
            break;
        }
        let mut cand = theta;
        adam.update(&mut cand, &grad)?;
        let (cand_loss, cand_grad) = eval(&cand)?;
        if cand_loss <= best_loss + 1e-12 {
            theta = cand;
            best_loss = cand_loss;
            grad = cand_grad;
            trace.push(cand_loss);
        } else {
            lr *= 0.5;
            adam = crate::diffusion::AdamState::new(4, lr);
        }
    }
    Ok(CalibrationOutcome { params: to_phi(&theta), loss_trace: trace, final_loss: best_loss })
}

/// One ejected particle: position/velocity in physical units, temperature in
/// (0, 1], exponential decay rate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Particle {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub temp: f64,
    pub decay: f64,
}

/// The synthetic spatter-video scene: melt pool parameters, laser path, live
/// particles, and the seeded spawning process.
#[derive(Debug, Clone)]
pub struct ThermalScene {
    pub grid: GridSpec,
    pub path: LaserPath,
    pub params: HeatParams,
    pub particles: Vec<Particle>,
    pub time: f64,
    pub delta_s: f64,
    pub spawn_per_step: usize,
    /// Gaussian splat width in physical units.
    pub splat_sigma: f64,
    /// Particles are born within this radius of the instantaneous laser spot.
    pub core_radius: f64,
    rng: ChaCha8Rng,
}

const PARTICLE_RETIRE_TEMP: f64 = 0.02;

impl ThermalScene {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: GridSpec,
        path: LaserPath,
        params: HeatParams,
        delta_s: f64,
        spawn_per_step: usize,
        splat_sigma: f64,
        core_radius: f64,
        seed: u64,
    ) -> Self {
        Self {
            grid,
            path,
            params,
            particles: Vec::new(),
            time: 0.0,
            delta_s,
            spawn_per_step,
            splat_sigma,
            core_radius,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Advances the scene one frame: ballistic advection, exponential temperature
/// decay, retirement of cold or escaped particles, then seeded spawning at
/// the instantaneous laser spot with outward random velocities.
pub fn spatter_step(scene: &ThermalScene) -> ThermalScene {
    let mut next = scene.clone();
    next.time += scene.delta_s;
    for p in &mut next.particles {
        p.x += p.vx * scene.delta_s;
        p.y += p.vy * scene.delta_s;
        p.temp *= (-p.decay * scene.delta_s).exp();
    }
    let extent = scene.grid.extent;
    next.particles.retain(|p| {
        p.temp >= PARTICLE_RETIRE_TEMP && p.x >= 0.0 && p.x <= extent && p.y >= 0.0 && p.y <= extent
    });
    let (px, py, power) = scene.path.at(next.time);
    if power > 0.0 {
        for _ in 0..scene.spawn_per_step {
            let angle = next.rng.gen_range(0.0..std::f64::consts::TAU);
            let jitter = next.rng.gen_range(0.0..scene.core_radius);
            let speed = next.rng.gen_range(0.3..1.0) * extent;
            let temp = next.rng.gen_range(0.55..0.95);
            let decay = next.rng.gen_range(1.5..4.0);
            next.particles.push(Particle {
                x: px + jitter * angle.cos(),
                y: py + jitter * angle.sin(),
                vx: speed * angle.cos(),
                vy: speed * angle.sin(),
                temp,
                decay,
            });
        }
    }
    next
}

/// Composes the melt pool and the particle splats into one observed frame,
/// clamped to [0, 1].
pub fn render_frame(scene: &ThermalScene, phi: &HeatParams) -> Result<Field2D> {
    let quad_step = scene.delta_s / QUAD_STEPS_PER_FRAME as f64;
    let mut frame = meltpool_field(&scene.path, scene.time, phi, &scene.grid, quad_step)?;
    let two_sigma_sq = 2.0 * scene.splat_sigma * scene.splat_sigma;
    for p in &scene.particles {
        for y in 0..scene.grid.height {
            for x in 0..scene.grid.width {
                let (cx, cy) = scene.grid.cell_center(x, y);
                let d2 = (cx - p.x).powi(2) + (cy - p.y).powi(2);
                frame.set(x, y, frame.get(x, y) + p.temp * (-d2 / two_sigma_sq).exp());
            }
        }
    }
    Ok(frame.map(|v| v.clamp(0.0, 1.0)))
}

/// Spatter region: the complement of the melt pool, thresholded against the
/// field maximum. Membership uses `<=` so a zero melt pool marks every cell.
pub fn spatter_mask(meltpool: &Field2D, threshold: f64) -> Result<Mask2D> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::RejectedInput(format!("threshold {threshold} outside (0, 1)")));
    }
    let cut = threshold * meltpool.max();
    Ok(Mask2D::from_fn(meltpool.width(), meltpool.height(), |x, y| meltpool.get(x, y) <= cut))
}

#[derive(Debug, Clone)]
pub struct FlowOptions {
    pub lambda: f64,
    pub iterations: usize,
}

impl Default for FlowOptions {
    fn default() -> Self {
        Self { lambda: 0.1, iterations: 100 }
    }
}

/// Dense flow minimizing `Σ(warp(prev, v) − next)² + λ‖∇v‖²` with
/// Horn–Schunck-style fixed-count alternating linearized updates.
/// Deterministic; flow units are grid cells per frame.
pub fn estimate_flow(prev: &Field2D, next: &Field2D, opts: &FlowOptions) -> Result<VelocityField2D> {
    if !prev.same_shape(next) {
        return Err(Error::RejectedInput("flow: shape mismatch".into()));
    }
    let (w, h) = (prev.width(), prev.height());
    let mut flow = VelocityField2D::zeros(w, h);
    let outer = 4usize;
    let inner = opts.iterations.div_ceil(outer);
    let gradient = |f: &Field2D| -> (Field2D, Field2D) {
        let gx = Field2D::from_fn(w, h, |x, y| {
            let (xm, xp) = (x.saturating_sub(1), (x + 1).min(w - 1));
            (f.get(xp, y) - f.get(xm, y)) / (xp - xm).max(1) as f64
        });
        let gy = Field2D::from_fn(w, h, |x, y| {
            let (ym, yp) = (y.saturating_sub(1), (y + 1).min(h - 1));
            (f.get(x, yp) - f.get(x, ym)) / (yp - ym).max(1) as f64
        });
        (gx, gy)
    };
    for _ in 0..outer {
        // relinearize around the current flow
        let warped = warp(prev, &flow, 1.0)?;
        let (gx_w, gy_w) = gradient(&warped);
        let (gx_n, gy_n) = gradient(next);
        let ix = gx_w.add_scaled(&gx_n, 1.0).scaled(0.5);
        let iy = gy_w.add_scaled(&gy_n, 1.0).scaled(0.5);
        let it = next.add_scaled(&warped, -1.0);
        let mut du = VelocityField2D::zeros(w, h);
        for _ in 0..inner {
            let avg = |f: &Field2D, x: usize, y: usize| -> f64 {
                let mut acc = 0.0;
                let mut n = 0.0;
                if x > 0 {
                    acc += f.get(x - 1, y);
                    n += 1.0;
                }
                if x + 1 < w {
                    acc += f.get(x + 1, y);
                    n += 1.0;
                }
                if y > 0 {
                    acc += f.get(x, y - 1);
                    n += 1.0;
                }
                if y + 1 < h {
                    acc += f.get(x, y + 1);
                    n += 1.0;
                }
                acc / n
            };
            let mut nx = Field2D::zeros(w, h);
            let mut ny = Field2D::zeros(w, h);
            for y in 0..h {
                for x in 0..w {
                    let (ax, ay) = (avg(&du.vx, x, y), avg(&du.vy, x, y));
                    let (gx, gy) = (ix.get(x, y), iy.get(x, y));
                    let common =
                        (gx * ax + gy * ay + it.get(x, y)) / (opts.lambda + gx * gx + gy * gy);
                    nx.set(x, y, ax - gx * common);
                    ny.set(x, y, ay - gy * common);
                }
            }
            du = VelocityField2D::new(nx, ny)?;
        }
        flow = VelocityField2D::new(
            flow.vx.add_scaled(&du.vx, 1.0),
            flow.vy.add_scaled(&du.vy, 1.0),
        )?;
    }
    Ok(flow)
}

/// Dataset spec for the synthetic thermal experiment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ThermalDatasetSpec {
    pub n_clips: usize,
    pub seed: u64,
    pub grid: GridSpec,
    pub frames_per_clip: usize,
    pub context_frames: usize,
    pub target_frames: usize,
    pub delta_s: f64,
    pub phi_true: HeatParams,
    pub spawn_per_step: usize,
    pub splat_sigma: f64,
    pub mask_threshold: f64,
}

impl Default for ThermalDatasetSpec {
    fn default() -> Self {
        Self {
            n_clips: 24,
            seed: 11,
            grid: GridSpec { width: 24, height: 24, extent: 1.0 },
            frames_per_clip: 10,
            context_frames: 2,
            target_frames: 5,
            delta_s: 0.1,
            phi_true: HeatParams { rho: 1.2, kappa_x: 0.004, kappa_y: 0.0028, c_n: 0.05 },
            spawn_per_step: 3,
            splat_sigma: 0.025,
            mask_threshold: 0.15,
        }
    }
}

/// Extra per-clip info recorded in the dataset index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThermalClipInfo {
    pub id: String,
    pub split: Split,
    pub path: LaserPath,
    pub frame_times: Vec<f64>,
    pub seed: u64,
}

/// A random straight laser track that stays inside the grid for the whole
/// clip, with mild power variation.
fn random_path(spec: &ThermalDatasetSpec, rng: &mut ChaCha8Rng) -> LaserPath {
    let total = spec.frames_per_clip as f64 * spec.delta_s;
    let margin = 0.22 * spec.grid.extent;
    let x0 = rng.gen_range(margin..spec.grid.extent - margin);
    let y0 = rng.gen_range(margin..spec.grid.extent - margin);
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let reach = spec.grid.extent / 2.0 - margin;
    let speed = rng.gen_range(0.3..0.9) * reach / total;
    let x1 = (x0 + angle.cos() * speed * total).clamp(margin, spec.grid.extent - margin);
    let y1 = (y0 + angle.sin() * speed * total).clamp(margin, spec.grid.extent - margin);
    let p0 = rng.gen_range(0.8..1.2);
    let p1 = rng.gen_range(0.8..1.2);
    LaserPath::new(vec![
        Waypoint { time: 0.0, x: x0, y: y0, power: p0 },
        Waypoint { time: total + spec.delta_s, x: x1, y: y1, power: p1 },
    ])
    .expect("monotone times")
}

/// Renders clips of spatter video: context frames, stacked target frames,
/// melt-pool PDE solutions (computed with `phi_c1`, normally the calibrated
/// parameters) as `c1`, and flows estimated between adjacent ground-truth
/// target frames as `c2`. An 80/20 seeded shuffle tags the test split.
pub fn gen_thermal_dataset(
    spec: &ThermalDatasetSpec,
    phi_c1: &HeatParams,
) -> Result<(Vec<TrajectoryRecord>, Vec<ThermalClipInfo>)> {
    if spec.n_clips == 0 {
        return Err(Error::RejectedInput("need at least one clip".into()));
    }
    if spec.context_frames + spec.target_frames > spec.frames_per_clip {
        return Err(Error::RejectedInput("clip layout does not fit frame count".into()));
    }
    let n = spec.n_clips;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7f4a_7c15);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let test_count = ((n as f64) * 0.2).round() as usize;
    let mut split = vec![Split::Train; n];
    for &i in order.iter().take(test_count) {
        split[i] = Split::Test;
    }

    use rayon::prelude::*;
    let results: Vec<(TrajectoryRecord, ThermalClipInfo)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(TrajectoryRecord, ThermalClipInfo)> {
            let clip_seed = spec.seed.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9);
            let mut path_rng = ChaCha8Rng::seed_from_u64(clip_seed);
            let path = random_path(spec, &mut path_rng);
            let mut scene = ThermalScene::new(
                spec.grid,
                path.clone(),
                spec.phi_true,
                spec.delta_s,
                spec.spawn_per_step,
                spec.splat_sigma,
                0.03 * spec.grid.extent,
                clip_seed,
            );
            let mut frames = Vec::with_capacity(spec.frames_per_clip);
            let mut times = Vec::with_capacity(spec.frames_per_clip);
            for _ in 0..spec.frames_per_clip {
                scene = spatter_step(&scene);
                frames.push(render_frame(&scene, &spec.phi_true)?);
                times.push(scene.time);
            }
            let t0 = spec.frames_per_clip - spec.target_frames;
            let target: Vec<Field2D> = frames[t0..].to_vec();
            let context: Vec<Field2D> = frames[..spec.context_frames].to_vec();
            let quad_step = spec.delta_s / QUAD_STEPS_PER_FRAME as f64;
            let c1: Vec<Field2D> = times[t0..]
                .iter()
                .map(|&s| {
                    meltpool_field(&path, s, phi_c1, &spec.grid, quad_step)
                        .map(|f| f.map(|v| v.clamp(0.0, 1.0)))
                })
                .collect::<Result<Vec<_>>>()?;
            let flows: Vec<VelocityField2D> = (0..spec.target_frames - 1)
                .map(|k| estimate_flow(&target[k], &target[k + 1], &FlowOptions::default()))
                .collect::<Result<Vec<_>>>()?;
            let id = format!("clip{i:04}");
            let record = TrajectoryRecord {
                id: id.clone(),
                split: split[i],
                context,
                target,
                c1,
                c2: Some(C2Data::Flows(flows)),
            };
            let info =
                ThermalClipInfo { id, split: split[i], path, frame_times: times, seed: clip_seed };
            Ok((record, info))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(results.into_iter().unzip())
}

/// Finite-difference residual ratio of the heat-kernel field against the PDE,
/// measured away from the source (outside `exclusion_radius`); used by the
/// acceptance suite and the module tests.
pub fn pde_residual_ratio(grid_n: usize, exclusion_radius: f64) -> Result<f64> {
    let grid = GridSpec { width: grid_n, height: grid_n, extent: 1.0 };
    let p = HeatParams { rho: 1.0, kappa_x: 0.0225, kappa_y: 0.0225, c_n: 1.0 };
    let path = LaserPath::new(vec![
        Waypoint { time: 0.0, x: 0.5, y: 0.5, power: 1.0 },
        Waypoint { time: 10.0, x: 0.5, y: 0.5, power: 1.0 },
    ])?;
    let s = 1.0;
    let quad = 0.005;
    let dfd = quad;
    let u0 = meltpool_field(&path, s, &p, &grid, quad)?;
    let up = meltpool_field(&path, s + dfd, &p, &grid, quad)?;
    let um = meltpool_field(&path, s - dfd, &p, &grid, quad)?;
    let hx = grid.extent / grid.width as f64;
    let hy = grid.extent / grid.height as f64;
    let mut max_res = 0.0f64;
    let mut max_du = 0.0f64;
    for y in 1..grid.height - 1 {
        for x in 1..grid.width - 1 {
            let (cx, cy) = grid.cell_center(x, y);
            if ((cx - 0.5).powi(2) + (cy - 0.5).powi(2)).sqrt() < exclusion_radius {
                continue;
            }
            let du = (up.get(x, y) - um.get(x, y)) / (2.0 * dfd);
            let lap = p.kappa_x * (u0.get(x + 1, y) - 2.0 * u0.get(x, y) + u0.get(x - 1, y))
                / (hx * hx)
                + p.kappa_y * (u0.get(x, y + 1) - 2.0 * u0.get(x, y) + u0.get(x, y - 1))
                    / (hy * hy);
            let res = (du - lap + p.rho * u0.get(x, y)).abs();
            max_res = max_res.max(res);
            max_du = max_du.max(du.abs());
        }
    }
    Ok(max_res / max_du)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::consistency_score;

    fn phi() -> HeatParams {
        HeatParams { rho: 1.0, kappa_x: 0.0225, kappa_y: 0.0225, c_n: 1.0 }
    }

    fn center_path(power: f64) -> LaserPath {
        LaserPath::new(vec![
            Waypoint { time: 0.0, x: 0.5, y: 0.5, power },
            Waypoint { time: 10.0, x: 0.5, y: 0.5, power },
        ])
        .unwrap()
    }

    #[test]
    fn greens_point_values() {
        let p = phi();
        // r = r' at unit elapsed time: the Gaussian factor is 1
        let g = greens_function((0.3, 0.4), 1.5, (0.3, 0.4), 0.5, &p).unwrap();
        assert!((g - (-1.0f64).exp()).abs() < 1e-12);
        // displacement sign flip leaves the value unchanged
        let a = greens_function((0.7, 0.6), 2.0, (0.5, 0.5), 1.0, &p).unwrap();
        let b = greens_function((0.3, 0.4), 2.0, (0.5, 0.5), 1.0, &p).unwrap();
        assert!((a - b).abs() < 1e-12);
        // |r-r'|^2 = 4 with unit parameters: e^{-1}·e^{-1}
        let unit = HeatParams { rho: 1.0, kappa_x: 1.0, kappa_y: 1.0, c_n: 1.0 };
        let g2 = greens_function((2.0, 0.0), 1.0, (0.0, 0.0), 0.0, &unit).unwrap();
        assert!((g2 - (-2.0f64).exp()).abs() < 1e-9);
        assert!((g2 - 0.13534).abs() < 1e-5);
        assert!(greens_function((0.0, 0.0), 1.0, (0.0, 0.0), 1.0, &unit).is_err());
    }

    #[test]
    fn greens_positivity() {
        let p = phi();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let g = greens_function(
                (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                rng.gen_range(0.5..2.0),
                (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)),
                rng.gen_range(0.0..0.49),
                &p,
            )
            .unwrap();
            assert!(g > 0.0);
        }
    }

    #[test]
    fn meltpool_zero_power_and_linearity() {
        let grid = GridSpec { width: 12, height: 12, extent: 1.0 };
        let quad = 0.005;
        let zero = meltpool_field(&center_path(0.0), 1.0, &phi(), &grid, quad).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));

        let base = meltpool_field(&center_path(1.0), 1.0, &phi(), &grid, quad).unwrap();
        let mut phi2 = phi();
        phi2.c_n *= 2.0;
        let doubled = meltpool_field(&center_path(1.0), 1.0, &phi2, &grid, quad).unwrap();
        for (a, b) in base.data().iter().zip(doubled.data()) {
            assert!((2.0 * a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
        // linearity in power too
        let double_power = meltpool_field(&center_path(2.0), 1.0, &phi(), &grid, quad).unwrap();
        for (a, b) in base.data().iter().zip(double_power.data()) {
            assert!((2.0 * a - b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn heat_equation_residual_small_away_from_source() {
        let ratio = pde_residual_ratio(64, 0.2).unwrap();
        assert!(ratio <= 0.05, "residual ratio {ratio}");
    }

    fn moving_path() -> LaserPath {
        LaserPath::new(vec![
            Waypoint { time: 0.0, x: 0.3, y: 0.35, power: 1.0 },
            Waypoint { time: 1.2, x: 0.7, y: 0.6, power: 1.0 },
        ])
        .unwrap()
    }

    fn observations(phi_true: &HeatParams, noise: f64, seed: u64) -> Vec<(f64, Field2D)> {
        let grid = GridSpec { width: 20, height: 20, extent: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [0.3, 0.6, 0.9, 1.1]
            .iter()
            .map(|&s| {
                let mut u = meltpool_field(&moving_path(), s, phi_true, &grid, 0.005).unwrap();
                if noise > 0.0 {
                    u = u.map(|v| v + noise * rng.sample::<f64, _>(rand_distr::StandardNormal));
                }
                (s, u)
            })
            .collect()
    }

    #[test]
    fn calibration_recovers_noiseless_parameters() {
        let truth = HeatParams { rho: 1.1, kappa_x: 0.02, kappa_y: 0.013, c_n: 0.8 };
        let grid = GridSpec { width: 20, height: 20, extent: 1.0 };
        let obs = observations(&truth, 0.0, 0);
        let phi0 = HeatParams { rho: 0.7, kappa_x: 0.035, kappa_y: 0.02, c_n: 0.5 };
        let out = calibrate(&obs, &moving_path(), &grid, &phi0, &CalibrateOptions::default()).unwrap();
        let rel = |a: f64, b: f64| (a - b).abs() / b;
        assert!(rel(out.params.rho, truth.rho) <= 0.05, "rho {:?}", out.params);
        assert!(rel(out.params.kappa_x, truth.kappa_x) <= 0.05, "kx {:?}", out.params);
        assert!(rel(out.params.kappa_y, truth.kappa_y) <= 0.05, "ky {:?}", out.params);
        assert!(rel(out.params.c_n, truth.c_n) <= 0.05, "cn {:?}", out.params);
    }

    #[test]
    fn calibration_loss_trace_is_non_increasing() {
        let truth = HeatParams { rho: 1.1, kappa_x: 0.02, kappa_y: 0.013, c_n: 0.8 };
        let grid = GridSpec { width: 20, height: 20, extent: 1.0 };
        let obs = observations(&truth, 0.0, 0);
        let phi0 = HeatParams { rho: 0.6, kappa_x: 0.04, kappa_y: 0.02, c_n: 0.4 };
        let opts = CalibrateOptions { steps: 120, ..Default::default() };
        let out = calibrate(&obs, &moving_path(), &grid, &phi0, &opts).unwrap();
        for pair in out.loss_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-8, "loss increased: {} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn calibration_degenerate_zero_problem() {
        let grid = GridSpec { width: 8, height: 8, extent: 1.0 };
        let obs = vec![(0.5, Field2D::zeros(8, 8)), (0.9, Field2D::zeros(8, 8))];
        let path = center_path(0.0);
        let phi0 = HeatParams { rho: 0.5, kappa_x: 0.01, kappa_y: 0.01, c_n: 0.3 };
        let opts = CalibrateOptions { steps: 10, ..Default::default() };
        let out = calibrate(&obs, &path, &grid, &phi0, &opts).unwrap();
        assert_eq!(out.final_loss, 0.0);
        // parameters survive the log parameterization round trip untouched
        let rel = |a: f64, b: f64| (a - b).abs() / b;
        assert!(rel(out.params.rho, phi0.rho) < 1e-12);
        assert!(rel(out.params.kappa_x, phi0.kappa_x) < 1e-12);
        assert!(rel(out.params.kappa_y, phi0.kappa_y) < 1e-12);
        assert!(rel(out.params.c_n, phi0.c_n) < 1e-12);
    }

    #[test]
    fn calibration_with_noise_stays_within_fifteen_percent() {
        let truth = HeatParams { rho: 1.1, kappa_x: 0.02, kappa_y: 0.013, c_n: 0.8 };
        let grid = GridSpec { width: 20, height: 20, extent: 1.0 };
        let phi0 = HeatParams { rho: 0.8, kappa_x: 0.03, kappa_y: 0.018, c_n: 0.6 };
        for seed in [1, 2, 3] {
            let obs = observations(&truth, 0.01, seed);
            let out =
                calibrate(&obs, &moving_path(), &grid, &phi0, &CalibrateOptions::default()).unwrap();
            let rel = |a: f64, b: f64| (a - b).abs() / b;
            assert!(rel(out.params.rho, truth.rho) <= 0.15, "seed {seed}: {:?}", out.params);
            assert!(rel(out.params.kappa_x, truth.kappa_x) <= 0.15, "seed {seed}: {:?}", out.params);
            assert!(rel(out.params.kappa_y, truth.kappa_y) <= 0.15, "seed {seed}: {:?}", out.params);
            assert!(rel(out.params.c_n, truth.c_n) <= 0.15, "seed {seed}: {:?}", out.params);
        }
    }

    fn test_scene(spawn: usize, seed: u64) -> ThermalScene {
        ThermalScene::new(
            GridSpec { width: 16, height: 16, extent: 1.0 },
            center_path(1.0),
            phi(),
            0.1,
            spawn,
            0.03,
            0.03,
            seed,
        )
    }

    #[test]
    fn spatter_step_without_spawn_only_advances_time() {
        let scene = test_scene(0, 1);
        let next = spatter_step(&scene);
        assert!(next.particles.is_empty());
        assert!((next.time - 0.1).abs() < 1e-12);
    }

    #[test]
    fn particle_moves_ballistically() {
        let mut scene = test_scene(0, 1);
        scene.delta_s = 1.0;
        scene.particles.push(Particle { x: 0.2, y: 0.5, vx: 0.1, vy: 0.0, temp: 0.9, decay: 0.01 });
        let next = spatter_step(&scene);
        assert!((next.particles[0].x - 0.3).abs() < 1e-12);
        assert!((next.particles[0].y - 0.5).abs() < 1e-12);
    }

    #[test]
    fn particle_temperature_decays_exponentially() {
        let mut scene = test_scene(0, 1);
        scene.particles.push(Particle { x: 0.5, y: 0.5, vx: 0.0, vy: 0.0, temp: 1.0, decay: 2.0 });
        let k = 7;
        let mut s = scene.clone();
        for _ in 0..k {
            s = spatter_step(&s);
        }
        let expect = (-2.0 * k as f64 * scene.delta_s).exp();
        assert!((s.particles[0].temp - expect).abs() < 1e-12);
    }

    #[test]
    fn render_composes_meltpool_and_bump() {
        let mut scene = test_scene(0, 1);
        scene.time = 0.6;
        let base = render_frame(&scene, &phi()).unwrap();
        let quad = scene.delta_s / QUAD_STEPS_PER_FRAME as f64;
        let meltpool = meltpool_field(&scene.path, 0.6, &phi(), &scene.grid, quad)
            .unwrap()
            .map(|v| v.clamp(0.0, 1.0));
        assert_eq!(base, meltpool);
        assert!(base.max() <= 1.0);

        // one particle far from the melt pool: the difference is its Gaussian
        scene.particles.push(Particle { x: 0.15, y: 0.8, vx: 0.0, vy: 0.0, temp: 0.4, decay: 1.0 });
        let with = render_frame(&scene, &phi()).unwrap();
        assert!(with.max() <= 1.0);
        for y in 0..16 {
            for x in 0..16 {
                let (cx, cy) = scene.grid.cell_center(x, y);
                if base.get(x, y) > 0.5 {
                    continue; // skip any clamped region
                }
                let d2 = (cx - 0.15).powi(2) + (cy - 0.8).powi(2);
                let bump = 0.4 * (-d2 / (2.0 * 0.03 * 0.03)).exp();
                assert!(((with.get(x, y) - base.get(x, y)) - bump).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn spatter_mask_examples() {
        let zero = Field2D::zeros(6, 6);
        let all = spatter_mask(&zero, 0.15).unwrap();
        assert_eq!(all.count(), 36);

        let mut peaked = Field2D::constant(6, 6, 0.1);
        peaked.set(3, 3, 1.0);
        let near_one = spatter_mask(&peaked, 0.999).unwrap();
        assert_eq!(near_one.count(), 35);
        assert!(!near_one.get(3, 3));

        let m = spatter_mask(&peaked, 0.5).unwrap();
        let c = m.complement();
        for y in 0..6 {
            for x in 0..6 {
                assert!(m.get(x, y) ^ c.get(x, y));
            }
        }
        assert!(spatter_mask(&zero, 0.0).is_err());
        assert!(spatter_mask(&zero, 1.0).is_err());
    }

    fn smooth_test_field(w: usize, h: usize) -> Field2D {
        Field2D::from_fn(w, h, |x, y| {
            let (fx, fy) = (x as f64 / w as f64, y as f64 / h as f64);
            (-((fx - 0.45).powi(2) + (fy - 0.55).powi(2)) / 0.02).exp()
                + 0.5 * (-((fx - 0.7).powi(2) + (fy - 0.3).powi(2)) / 0.01).exp()
        })
    }

    #[test]
    fn flow_is_zero_for_identical_frames() {
        let f = smooth_test_field(16, 16);
        let v = estimate_flow(&f, &f, &FlowOptions::default()).unwrap();
        assert!(v.vx.data().iter().all(|&x| x.abs() < 1e-12));
        assert!(v.vy.data().iter().all(|&x| x.abs() < 1e-12));
    }

    #[test]
    fn flow_recovers_one_cell_shift() {
        let prev = smooth_test_field(20, 20);
        let shift =
            VelocityField2D::new(Field2D::constant(20, 20, 1.0), Field2D::zeros(20, 20)).unwrap();
        let next = warp(&prev, &shift, 1.0).unwrap();
        let v = estimate_flow(&prev, &next, &FlowOptions::default()).unwrap();
        // average over cells with meaningful signal
        let mut acc = 0.0;
        let mut n = 0.0;
        for y in 2..18 {
            for x in 2..18 {
                if prev.get(x, y) > 0.1 {
                    acc += v.vx.get(x, y);
                    n += 1.0;
                }
            }
        }
        let mean_vx = acc / n;
        assert!((0.7..=1.3).contains(&mean_vx), "mean vx {mean_vx}");
    }

    #[test]
    fn estimated_flow_round_trip_consistency() {
        let prev = smooth_test_field(20, 20);
        let truth = VelocityField2D::new(
            Field2D::from_fn(20, 20, |x, y| 0.3 * ((x + y) as f64 * 0.2).sin()),
            Field2D::from_fn(20, 20, |x, _| 0.2 * (x as f64 * 0.3).cos()),
        )
        .unwrap();
        let next = warp(&prev, &truth, 1.0).unwrap();
        let mask = Mask2D::full(20, 20);
        // true flows reproduce the frames exactly
        let cs_true =
            consistency_score(&[prev.clone(), next.clone()], &[truth], std::slice::from_ref(&mask))
                .unwrap();
        assert!(cs_true <= 1e-10, "cs with true flows {cs_true}");
        // estimated flows keep the score small
        let est = estimate_flow(&prev, &next, &FlowOptions::default()).unwrap();
        let cs_est = consistency_score(&[prev, next], &[est], &[mask]).unwrap();
        assert!(cs_est <= 0.1, "cs with estimated flows {cs_est}");
    }

    #[test]
    fn thermal_dataset_layout_and_split() {
        let spec = ThermalDatasetSpec { n_clips: 10, ..Default::default() };
        let (records, infos) = gen_thermal_dataset(&spec, &spec.phi_true).unwrap();
        assert_eq!(records.len(), 10);
        let tests = records.iter().filter(|r| r.split == Split::Test).count();
        assert_eq!(tests, 2);
        for r in &records {
            assert_eq!(r.context.len(), 2);
            assert_eq!(r.target.len(), 5);
            assert_eq!(r.c1.len(), 5);
            match &r.c2 {
                Some(C2Data::Flows(fl)) => assert_eq!(fl.len(), 4),
                other => panic!("expected flows, got {other:?}"),
            }
        }
        assert_eq!(infos[0].frame_times.len(), 10);
        // determinism
        let (again, _) = gen_thermal_dataset(&spec, &spec.phi_true).unwrap();
        assert_eq!(records[0].target, again[0].target);
    }
}
