//! Trajectory-level bootstrap of medians.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;

pub const DEFAULT_N_BOOT: usize = 100;

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Linearly interpolated percentile of sorted data, `q` in `[0, 100]`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Resample index sets: `n_boot` draws of `n` indices with replacement.
pub fn bootstrap_indices(n: usize, n_boot: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_boot).map(|_| (0..n).map(|_| rng.random_range(0..n)).collect()).collect()
}

/// Central estimate with 95% and 68% percentile intervals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub median: f64,
    pub ci95: [f64; 2],
    pub ci68: [f64; 2],
}

impl Interval {
    fn from_samples(mut samples: Vec<f64>) -> Self {
        samples.sort_unstable_by(f64::total_cmp);
        // the bounds and the median come from the same sorted sample, so
        // lo <= median <= hi holds by monotonicity of interpolation
        Self {
            median: percentile_sorted(&samples, 50.0),
            ci95: [percentile_sorted(&samples, 2.5), percentile_sorted(&samples, 97.5)],
            ci68: [percentile_sorted(&samples, 16.0), percentile_sorted(&samples, 84.0)],
        }
    }

    pub fn contains_zero68(&self) -> bool {
        self.ci68[0] <= 0.0 && 0.0 <= self.ci68[1]
    }
}

/// Median-of-medians bootstrap over per-trajectory values.
pub fn bootstrap_aggregate(values: &[f64], n_boot: usize, seed: u64) -> Result<Interval, EvalError> {
    if values.len() < 2 {
        return Err(EvalError::Input(format!("bootstrap needs at least 2 records, got {}", values.len())));
    }
    if n_boot == 0 {
        return Err(EvalError::Input("n_boot must be positive".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Input("bootstrap values must be finite".into()));
    }
    let mut buf = vec![0.0; values.len()];
    let samples = bootstrap_indices(values.len(), n_boot, seed)
        .into_iter()
        .map(|idx| {
            buf.iter_mut().zip(&idx).for_each(|(b, &i)| *b = values[i]);
            median(&buf)
        })
        .collect();
    Ok(Interval::from_samples(samples))
}

/// Paired ratio-of-medians improvement of `prob` over `det`, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    pub interval: Interval,
    /// One value per bootstrap iteration.
    pub samples: Vec<f64>,
}

/// `100 · (med(det) − med(prob)) / med(det)` over shared resamples of paired
/// `(trajectory id, value)` records.
pub fn paired_improvement(
    det: &[(usize, f64)],
    prob: &[(usize, f64)],
    n_boot: usize,
    seed: u64,
) -> Result<Improvement, EvalError> {
    let mut d = det.to_vec();
    let mut p = prob.to_vec();
    d.sort_by_key(|r| r.0);
    p.sort_by_key(|r| r.0);
    let ids = |v: &[(usize, f64)]| v.iter().map(|r| r.0).collect::<Vec<_>>();
    if ids(&d) != ids(&p) {
        return Err(EvalError::Input("paired comparison needs the same trajectory ids on both sides".into()));
    }
    if d.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(EvalError::Input("duplicate trajectory id in paired records".into()));
    }
    if d.len() < 2 || n_boot == 0 {
        return Err(EvalError::Input(format!("paired bootstrap needs >= 2 pairs and n_boot > 0, got {} pairs", d.len())));
    }
    if d.iter().chain(&p).any(|r| !r.1.is_finite()) {
        return Err(EvalError::Input("paired values must be finite".into()));
    }
    let n = d.len();
    let (mut bd, mut bp) = (vec![0.0; n], vec![0.0; n]);
    let mut samples = Vec::with_capacity(n_boot);
    for idx in bootstrap_indices(n, n_boot, seed) {
        for (k, &i) in idx.iter().enumerate() {
            bd[k] = d[i].1;
            bp[k] = p[i].1;
        }
        let (md, mp) = (median(&bd), median(&bp));
        let delta = if md == mp { 0.0 } else { (md - mp) / md * 100.0 };
        samples.push(delta);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::Input("baseline median is zero; relative improvement undefined".into()));
    }
    Ok(Improvement {
        interval: Interval::from_samples(samples.clone()),
        samples,
    })
}
