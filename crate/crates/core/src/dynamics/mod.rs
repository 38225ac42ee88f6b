//! Built-in periodic dynamical systems, trajectory datasets and their file format.

mod dataset;
pub mod solvers;

pub use dataset::{ChannelStats, Split, SplitIndices, TrajectoryDataset, DATA_MAGIC, DATA_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{Named, Registry, UnknownName};
use crate::util::derive_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{system} is unstable: {detail}")]
    Unstable { system: &'static str, detail: String },
    #[error("invalid system spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    UnknownSystem(#[from] UnknownName),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("non-finite value in trajectory {trajectory} at step {step}")]
    NonFinite { trajectory: usize, step: usize },
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything needed to regenerate a dataset bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSpec {
    pub system: String,
    /// Grid extents; `[ny, nx]` for heat2d, `[n]` otherwise.
    pub grid: Vec<usize>,
    pub domain_length: f64,
    /// Output interval between stored frames.
    pub dt: f64,
    /// Internal integrator steps per output interval.
    pub substeps: usize,
    pub kappa: f64,
    pub nu: f64,
    pub forcing: f64,
    pub n_trajectories: usize,
    /// Frames stored per trajectory.
    pub t_steps: usize,
    /// Highest Fourier mode in random initial conditions.
    pub ic_modes: usize,
    pub ic_amplitude: f64,
    /// Model time discarded before the first stored frame (Lorenz-96).
    pub warmup_time: f64,
    pub seed: u64,
}

impl Default for SystemSpec {
    fn default() -> Self {
        Self::preset("lorenz96").expect("built-in preset")
    }
}

impl SystemSpec {
    /// Reasonable defaults for a built-in system.
    pub fn preset(system: &str) -> Result<Self, DataError> {
        let base = SystemSpec {
            system: system.to_string(),
            grid: vec![40],
            domain_length: 1.0,
            dt: 0.05,
            substeps: 5,
            kappa: 0.0,
            nu: 0.0,
            forcing: 8.0,
            n_trajectories: 640,
            t_steps: 120,
            ic_modes: 4,
            ic_amplitude: 1.0,
            warmup_time: 10.0,
            seed: 0,
        };
        Ok(match system {
            "lorenz96" => base,
            "heat2d" => SystemSpec {
                grid: vec![32, 32],
                dt: 0.01,
                substeps: 1,
                kappa: 0.01,
                forcing: 0.0,
                n_trajectories: 160,
                t_steps: 60,
                warmup_time: 0.0,
                ..base
            },
            "burgers1d" => SystemSpec {
                grid: vec![128],
                domain_length: std::f64::consts::TAU,
                dt: 0.02,
                substeps: 4,
                nu: 0.02,
                forcing: 0.0,
                n_trajectories: 320,
                t_steps: 110,
                warmup_time: 0.0,
                ..base
            },
            other => return Err(systems().get(other).map(|_| ()).unwrap_err().into()),
        })
    }

    /// Structural validation shared by all systems.
    pub fn validate(&self) -> Result<&'static dyn DynamicalSystem, DataError> {
        let sys = systems().get(&self.system)?;
        if self.grid.len() != sys.spatial_rank() {
            return Err(DataError::InvalidSpec(format!(
                "{} needs a rank-{} grid, got {:?}",
                self.system,
                sys.spatial_rank(),
                self.grid
            )));
        }
        if self.grid.iter().any(|&g| g == 0) || self.t_steps == 0 || self.substeps == 0 {
            return Err(DataError::InvalidSpec("grid, t_steps and substeps must be positive".into()));
        }
        if !(self.dt > 0.0 && self.domain_length > 0.0) {
            return Err(DataError::InvalidSpec("dt and domain_length must be positive".into()));
        }
        sys.check(self)?;
        Ok(sys)
    }
}

/// A solver that can emit trajectories for a [`SystemSpec`].
pub trait DynamicalSystem: Named + Send + Sync {
    fn spatial_rank(&self) -> usize;

    fn channels(&self) -> usize {
        1
    }

    /// Stability and parameter checks run before any integration.
    fn check(&self, spec: &SystemSpec) -> Result<(), DataError>;

    /// One trajectory `[t_steps, C, spatial...]`, flattened.
    fn trajectory(&self, spec: &SystemSpec, rng: &mut dyn rand::RngCore) -> Result<Vec<f64>, DataError>;
}

pub fn systems() -> &'static Registry<dyn DynamicalSystem> {
    static REG: std::sync::OnceLock<Registry<dyn DynamicalSystem>> = std::sync::OnceLock::new();
    REG.get_or_init(|| {
        Registry::<dyn DynamicalSystem>::new("system")
            .with(Box::new(solvers::Heat2d))
            .with(Box::new(solvers::Burgers1d))
            .with(Box::new(solvers::Lorenz96))
    })
}

/// Generates the dataset described by `spec`.
///
/// Trajectory `i` draws its initial condition from a stream keyed by
/// `(spec.seed, i)`, so the output does not depend on the thread count.
pub fn generate(spec: &SystemSpec, config_hash: Option<String>) -> Result<TrajectoryDataset, DataError> {
    let sys = spec.validate()?;
    if spec.n_trajectories == 0 {
        return Err(DataError::InvalidSpec("n_trajectories must be positive".into()));
    }
    let trajectories: Vec<Vec<f64>> = (0..spec.n_trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, i as u64));
            sys.trajectory(spec, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let mut states = Vec::with_capacity(trajectories.iter().map(Vec::len).sum());
    for traj in &trajectories {
        states.extend(traj.iter().map(|&v| v as f32));
    }
    let hash = config_hash.unwrap_or_else(|| crate::util::canonical_hash(spec));
    TrajectoryDataset::new(
        spec.clone(),
        sys.channels(),
        spec.grid.clone(),
        spec.n_trajectories,
        spec.t_steps,
        states,
        hash,
    )
}

#[cfg(test)]
mod tests;
