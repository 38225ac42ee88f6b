//! Explicit time integrators for the built-in periodic systems.
//!
//! States are flat `f64` buffers in row-major spatial order with one channel.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, DynamicalSystem, SystemSpec};
use crate::registry::Named;

/// Upper bound on step-halving retries before a trajectory is abandoned.
const MAX_REFINEMENTS: u32 = 6;

// ---------------------------------------------------------------- heat2d

pub struct Heat2d;

impl Named for Heat2d {
    fn name(&self) -> &'static str {
        "heat2d"
    }
}

/// Diffusion number `κ·Δt_int/Δx²` on each axis.
pub fn heat_diffusion_numbers(spec: &SystemSpec) -> Vec<f64> {
    let h = spec.dt / spec.substeps as f64;
    spec.grid
        .iter()
        .map(|&n| {
            let dx = spec.domain_length / n as f64;
            spec.kappa * h / (dx * dx)
        })
        .collect()
}

/// One forward-Euler step of `u_t = κ Δu` on a periodic `[ny, nx]` grid.
pub fn heat2d_step(u: &[f64], out: &mut [f64], ny: usize, nx: usize, rx: f64, ry: f64) {
    for j in 0..ny {
        let jm = (j + ny - 1) % ny;
        let jp = (j + 1) % ny;
        for i in 0..nx {
            let im = (i + nx - 1) % nx;
            let ip = (i + 1) % nx;
            let c = u[j * nx + i];
            out[j * nx + i] = c
                + rx * (u[j * nx + ip] - 2.0 * c + u[j * nx + im])
                + ry * (u[jp * nx + i] - 2.0 * c + u[jm * nx + i]);
        }
    }
}

/// Integrates heat from `u0`, emitting `t_steps` frames (the first is `u0`).
pub fn run_heat2d(spec: &SystemSpec, u0: &[f64]) -> Vec<f64> {
    let (ny, nx) = (spec.grid[0], spec.grid[1]);
    let r = heat_diffusion_numbers(spec);
    let mut u = u0.to_vec();
    let mut tmp = vec![0.0; u.len()];
    let mut frames = Vec::with_capacity(spec.t_steps * u.len());
    frames.extend_from_slice(&u);
    for _ in 1..spec.t_steps {
        for _ in 0..spec.substeps {
            heat2d_step(&u, &mut tmp, ny, nx, r[1], r[0]);
            std::mem::swap(&mut u, &mut tmp);
        }
        frames.extend_from_slice(&u);
    }
    frames
}

impl DynamicalSystem for Heat2d {
    fn spatial_rank(&self) -> usize {
        2
    }

    fn check(&self, spec: &SystemSpec) -> Result<(), DataError> {
        for (axis, r) in heat_diffusion_numbers(spec).into_iter().enumerate() {
            if r > 0.25 {
                return Err(DataError::Unstable {
                    system: "heat2d",
                    detail: format!("kappa*dt/dx^2 = {r:.6} on axis {axis} exceeds the explicit bound 0.25"),
                });
            }
        }
        Ok(())
    }

    fn trajectory(&self, spec: &SystemSpec, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>, DataError> {
        let (ny, nx) = (spec.grid[0], spec.grid[1]);
        let l = spec.domain_length;
        let mut u0 = vec![0.0; ny * nx];
        let kmax = spec.ic_modes as i64;
        for ky in 0..=kmax {
            for kx in -kmax..=kmax {
                if ky == 0 && kx <= 0 {
                    continue;
                }
                let decay = 1.0 / (1.0 + (kx * kx + ky * ky) as f64);
                let a: f64 = StandardNormal.sample(rng);
                let phase = rng.random::<f64>() * std::f64::consts::TAU;
                for j in 0..ny {
                    let y = j as f64 * l / ny as f64;
                    for i in 0..nx {
                        let x = i as f64 * l / nx as f64;
                        let arg = std::f64::consts::TAU * (kx as f64 * x + ky as f64 * y) / l + phase;
                        u0[j * nx + i] += spec.ic_amplitude * a * decay * arg.cos();
                    }
                }
            }
        }
        Ok(run_heat2d(spec, &u0))
    }
}

// ------------------------------------------------------------- burgers1d

pub struct Burgers1d;

impl Named for Burgers1d {
    fn name(&self) -> &'static str {
        "burgers1d"
    }
}

/// Godunov flux for `f(u) = u²/2`.
pub fn godunov_flux(ul: f64, ur: f64) -> f64 {
    if ul <= ur {
        if ul > 0.0 {
            0.5 * ul * ul
        } else if ur < 0.0 {
            0.5 * ur * ur
        } else {
            0.0
        }
    } else {
        0.5 * (ul * ul).max(ur * ur)
    }
}

/// One conservative finite-volume step of viscous Burgers on a periodic line.
pub fn burgers_step(u: &[f64], out: &mut [f64], flux: &mut [f64], dt: f64, dx: f64, nu: f64) {
    let n = u.len();
    // flux[i] is the flux through the interface i+1/2
    for i in 0..n {
        flux[i] = godunov_flux(u[i], u[(i + 1) % n]);
    }
    let a = dt / dx;
    let d = nu * dt / (dx * dx);
    for i in 0..n {
        let im = (i + n - 1) % n;
        let ip = (i + 1) % n;
        out[i] = u[i] - a * (flux[i] - flux[im]) + d * (u[ip] - 2.0 * u[i] + u[im]);
    }
}

/// Integrates Burgers from `u0` with `substeps` internal steps per frame.
/// Returns `None` if the CFL number exceeds 0.5 at any internal step.
pub fn run_burgers(spec: &SystemSpec, u0: &[f64], substeps: usize) -> Option<Vec<f64>> {
    let n = u0.len();
    let dx = spec.domain_length / n as f64;
    let h = spec.dt / substeps as f64;
    let mut u = u0.to_vec();
    let mut tmp = vec![0.0; n];
    let mut flux = vec![0.0; n];
    let mut frames = Vec::with_capacity(spec.t_steps * n);
    frames.extend_from_slice(&u);
    for _ in 1..spec.t_steps {
        for _ in 0..substeps {
            let umax = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if !(umax * h / dx <= 0.5) {
                return None;
            }
            burgers_step(&u, &mut tmp, &mut flux, h, dx, spec.nu);
            std::mem::swap(&mut u, &mut tmp);
        }
        frames.extend_from_slice(&u);
    }
    Some(frames)
}

/// Smallest sub-step count satisfying the explicit diffusion bound.
fn burgers_min_substeps(spec: &SystemSpec) -> usize {
    let dx = spec.domain_length / spec.grid[0] as f64;
    let need = (spec.nu * spec.dt / (0.5 * dx * dx)).ceil() as usize;
    spec.substeps.max(need).max(1)
}

impl DynamicalSystem for Burgers1d {
    fn spatial_rank(&self) -> usize {
        1
    }

    fn check(&self, spec: &SystemSpec) -> Result<(), DataError> {
        if spec.nu < 0.0 {
            return Err(DataError::InvalidSpec(format!("nu must be >= 0, got {}", spec.nu)));
        }
        Ok(())
    }

    fn trajectory(&self, spec: &SystemSpec, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>, DataError> {
        let n = spec.grid[0];
        let l = spec.domain_length;
        let mut u0 = vec![0.0; n];
        for k in 1..=spec.ic_modes.max(1) {
            let a: f64 = StandardNormal.sample(rng);
            let phase = rng.random::<f64>() * std::f64::consts::TAU;
            for (i, v) in u0.iter_mut().enumerate() {
                let x = i as f64 * l / n as f64;
                *v += spec.ic_amplitude * a / k as f64 * (std::f64::consts::TAU * k as f64 * x / l + phase).sin();
            }
        }
        let mut substeps = burgers_min_substeps(spec);
        for _ in 0..=MAX_REFINEMENTS {
            if let Some(frames) = run_burgers(spec, &u0, substeps) {
                return Ok(frames);
            }
            substeps *= 2;
        }
        Err(DataError::Unstable {
            system: "burgers1d",
            detail: format!("CFL > 0.5 persists with {substeps} sub-steps per frame"),
        })
    }
}

// -------------------------------------------------------------- lorenz96

pub struct Lorenz96;

impl Named for Lorenz96 {
    fn name(&self) -> &'static str {
        "lorenz96"
    }
}

/// `dX_i/dt = (X_{i+1} − X_{i−2}) X_{i−1} − X_i + F` on a ring.
pub fn lorenz96_rhs(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    for i in 0..n {
        let xp1 = x[(i + 1) % n];
        let xm1 = x[(i + n - 1) % n];
        let xm2 = x[(i + n - 2) % n];
        out[i] = (xp1 - xm2) * xm1 - x[i] + forcing;
    }
}

/// Classical RK4 step in place.
pub fn rk4_step(x: &mut [f64], h: f64, forcing: f64, work: &mut Rk4Work) {
    let Rk4Work { k1, k2, k3, k4, tmp } = work;
    lorenz96_rhs(x, forcing, k1);
    for i in 0..x.len() {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    lorenz96_rhs(tmp, forcing, k2);
    for i in 0..x.len() {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    lorenz96_rhs(tmp, forcing, k3);
    for i in 0..x.len() {
        tmp[i] = x[i] + h * k3[i];
    }
    lorenz96_rhs(tmp, forcing, k4);
    for i in 0..x.len() {
        x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
}

/// Scratch buffers for [`rk4_step`].
pub struct Rk4Work {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Work {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

/// Integrates Lorenz-96 for `time` units with step `h` (the last step is
/// shortened to land exactly). Returns false if the state leaves |X| ≤ 1e3.
pub fn integrate_lorenz96(x: &mut [f64], time: f64, h: f64, forcing: f64, work: &mut Rk4Work) -> bool {
    let steps = (time / h).round().max(0.0) as usize;
    for _ in 0..steps {
        rk4_step(x, h, forcing, work);
    }
    x.iter().all(|v| v.is_finite() && v.abs() <= 1e3)
}

fn run_lorenz96(spec: &SystemSpec, x0: &[f64], substeps: usize) -> Option<Vec<f64>> {
    let n = x0.len();
    let h = spec.dt / substeps as f64;
    let mut work = Rk4Work::new(n);
    let mut x = x0.to_vec();
    if !integrate_lorenz96(&mut x, spec.warmup_time, h, spec.forcing, &mut work) {
        return None;
    }
    let mut frames = Vec::with_capacity(spec.t_steps * n);
    frames.extend_from_slice(&x);
    for _ in 1..spec.t_steps {
        for _ in 0..substeps {
            rk4_step(&mut x, h, spec.forcing, &mut work);
        }
        if !x.iter().all(|v| v.is_finite() && v.abs() <= 1e3) {
            return None;
        }
        frames.extend_from_slice(&x);
    }
    Some(frames)
}

impl DynamicalSystem for Lorenz96 {
    fn spatial_rank(&self) -> usize {
        1
    }

    fn check(&self, spec: &SystemSpec) -> Result<(), DataError> {
        if spec.grid[0] < 4 {
            return Err(DataError::InvalidSpec("lorenz96 needs at least 4 sites".into()));
        }
        Ok(())
    }

    fn trajectory(&self, spec: &SystemSpec, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>, DataError> {
        let n = spec.grid[0];
        let x0: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                spec.forcing + spec.ic_amplitude * z
            })
            .collect();
        let mut substeps = spec.substeps.max(1);
        for _ in 0..=MAX_REFINEMENTS {
            if let Some(frames) = run_lorenz96(spec, &x0, substeps) {
                return Ok(frames);
            }
            substeps *= 2;
        }
        Err(DataError::Unstable {
            system: "lorenz96",
            detail: format!("|X| exceeded 1e3 with {substeps} RK4 sub-steps per frame"),
        })
    }
}
