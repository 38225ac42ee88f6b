//! Frame-level scores and their per-trajectory averages.

use serde::{Deserialize, Serialize};

use crate::objectives::{crps_per_component, CrpsEstimator};
use crate::util::nonfinite;

/// Regulariser in the VRMSE denominator.
pub const VRMSE_EPS: f64 = 1e-6;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Variance-normalised RMSE of prediction `v` against truth `u`, both one
/// channel of one frame.
pub fn vrmse(v: &[f64], u: &[f64]) -> f64 {
    assert_eq!(v.len(), u.len(), "vrmse operands differ in length");
    let mu = mean(u);
    let num = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / u.len() as f64;
    let var = u.iter().map(|a| (a - mu) * (a - mu)).sum::<f64>() / u.len() as f64;
    (num / (var + VRMSE_EPS)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpreadSkill {
    /// RMSE of the ensemble mean.
    pub skill: f64,
    /// Square root of the spatially averaged unbiased member variance.
    pub spread: f64,
    /// `spread / skill · sqrt((M+1)/M)`; `+inf` when `skill == 0`.
    pub ssr_corrected: f64,
    /// Set when the ratio is undefined because the skill is zero.
    pub degenerate: bool,
}

/// Spread-skill statistics of `M` members (member-major, `[M, sites]`)
/// against one truth frame. Needs `M >= 2`.
pub fn skill_spread_ssr(members: &[f64], truth: &[f64]) -> SpreadSkill {
    let s = truth.len();
    let m = members.len() / s;
    assert!(m >= 2 && members.len() == m * s, "spread-skill needs at least two members");
    let (mut sq_err, mut var_sum) = (0.0, 0.0);
    for site in 0..s {
        let mu = (0..m).map(|j| members[j * s + site]).sum::<f64>() / m as f64;
        sq_err += (truth[site] - mu).powi(2);
        var_sum += (0..m).map(|j| (members[j * s + site] - mu).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    }
    let skill = (sq_err / s as f64).sqrt();
    let spread = (var_sum / s as f64).sqrt();
    let correction = ((m as f64 + 1.0) / m as f64).sqrt();
    if skill == 0.0 {
        return SpreadSkill {
            skill,
            spread,
            ssr_corrected: f64::INFINITY,
            degenerate: true,
        };
    }
    SpreadSkill {
        skill,
        spread,
        ssr_corrected: spread / skill * correction,
        degenerate: false,
    }
}

/// Fair CRPS averaged over the sites of one frame; MAE for a single member.
pub fn frame_fcrps(members: &[f64], truth: &[f64]) -> f64 {
    let m = members.len() / truth.len();
    if m == 1 {
        return members.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / truth.len() as f64;
    }
    mean(&crps_per_component(members, truth, CrpsEstimator::Fair))
}

/// Scores of one trajectory, averaged over time and channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub trajectory: usize,
    pub members: usize,
    #[serde(with = "nonfinite")]
    pub fcrps: f64,
    #[serde(with = "nonfinite")]
    pub vrmse: f64,
    /// `None` for single-member forecasts.
    #[serde(with = "nonfinite::option")]
    pub skill: Option<f64>,
    #[serde(with = "nonfinite::option")]
    pub spread: Option<f64>,
    /// Mean over frames with nonzero skill; `None` if there are none.
    #[serde(with = "nonfinite::option")]
    pub ssr_corrected: Option<f64>,
    /// Frames whose spread-skill ratio was undefined.
    pub ssr_degenerate_frames: usize,
    #[serde(with = "nonfinite::vec")]
    pub fcrps_per_channel: Vec<f64>,
    #[serde(with = "nonfinite::vec")]
    pub vrmse_per_channel: Vec<f64>,
    /// Fraction of (member, step) pairs lost to divergence.
    #[serde(with = "nonfinite")]
    pub diverged_fraction: f64,
}

impl TrajectoryRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "fcrps" => Some(self.fcrps),
            "vrmse" => Some(self.vrmse),
            "skill" => self.skill,
            "spread" => self.spread,
            "ssr_corrected" => self.ssr_corrected,
            _ => None,
        }
        .filter(|v| v.is_finite())
    }
}

pub const METRIC_NAMES: [&str; 5] = ["fcrps", "vrmse", "skill", "spread", "ssr_corrected"];
