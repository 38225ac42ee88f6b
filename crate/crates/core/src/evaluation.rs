//! Autoregressive rollouts, trajectory scores, bootstrap aggregation and
//! ensemble-size sweeps.
//!
//! Rollouts run in normalised units; [`evaluate_model`] converts forecasts and
//! truth back to physical units before scoring.

pub mod bootstrap;
pub mod metrics;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone;
use crate::dynamics::{Split, TrajectoryDataset};
use crate::model::{ModelBundle, ModelError};
use crate::modulation::{NoiseMode, NoiseStreams};
use crate::tensor::{Tape, Tensor};
use crate::util::derive_seed;

pub use bootstrap::{bootstrap_aggregate, paired_improvement, Improvement, Interval};
pub use metrics::{frame_fcrps, skill_spread_ssr, vrmse, SpreadSkill, TrajectoryRecord, METRIC_NAMES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// A normalised state beyond this magnitude counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Upper bound on rows pushed through one batched forward.
const MAX_ROWS: usize = 128;

/// `M` rollouts from one initial history.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleForecast {
    /// `[M, T, C, spatial...]`; frames of a diverged member are NaN from the
    /// divergence step on.
    pub members: Tensor,
    /// First diverged step of each member.
    pub diverged_at: Vec<Option<usize>>,
    pub seed: u64,
    pub model_id: String,
}

impl EnsembleForecast {
    pub fn n_members(&self) -> usize {
        self.members.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.members.shape()[1]
    }

    fn frame_len(&self) -> usize {
        self.members.shape()[2..].iter().product()
    }

    /// Frame `t` of member `m`, `[C · sites]`.
    pub fn frame(&self, m: usize, t: usize) -> &[f64] {
        let f = self.frame_len();
        let off = (m * self.horizon() + t) * f;
        &self.members.data()[off..off + f]
    }

    /// Keeps the first `m` members.
    pub fn prefix(&self, m: usize) -> EnsembleForecast {
        let per = self.horizon() * self.frame_len();
        let mut shape = self.members.shape().to_vec();
        shape[0] = m;
        EnsembleForecast {
            members: Tensor::new(shape, self.members.data()[..m * per].to_vec()).expect("prefix shape"),
            diverged_at: self.diverged_at[..m].to_vec(),
            seed: self.seed,
            model_id: self.model_id.clone(),
        }
    }

    fn map_frames(&self, f: impl Fn(&mut [f64])) -> EnsembleForecast {
        let mut out = self.clone();
        out.members.data_mut().chunks_mut(self.frame_len()).for_each(f);
        out
    }
}

fn check_history(model: &ModelBundle, history: &Tensor) -> Result<()> {
    let cfg = &model.backbone;
    let mut expect = vec![cfg.history_len, cfg.channels];
    expect.extend_from_slice(&cfg.spatial);
    if history.shape() != expect {
        return Err(EvalError::Input(format!(
            "history shape {:?} does not match the model's {:?}",
            history.shape(),
            expect
        )));
    }
    Ok(())
}

/// Rolls `members` ensemble members forward for `horizon` steps from each
/// normalised history `[k, C, spatial...]`. History `i` draws its noise from
/// `seeds[i]`, member `m` from stream `m` of that seed.
pub fn rollout_batch(
    model: &ModelBundle,
    histories: &[Tensor],
    horizon: usize,
    members: usize,
    seeds: &[u64],
    mode: NoiseMode,
) -> Result<Vec<EnsembleForecast>> {
    if horizon == 0 || members == 0 {
        return Err(EvalError::Input("rollout needs horizon >= 1 and members >= 1".into()));
    }
    if histories.len() != seeds.len() {
        return Err(EvalError::Input("one seed per history required".into()));
    }
    if members > 1 && !model.has_noise_branch() {
        return Err(EvalError::Input(format!(
            "a deterministic model has a single member, {members} requested"
        )));
    }
    for h in histories {
        check_history(model, h)?;
    }
    model.params.check_finite()?;
    let cfg = &model.backbone;
    let k = cfg.history_len;
    let frame: usize = cfg.channels * cfg.sites();
    let n = histories.len();
    let rows = n * members;

    // row r = trajectory (r / members), member (r % members)
    let mut window: Vec<f64> = Vec::with_capacity(rows * k * frame);
    for h in histories {
        for _ in 0..members {
            window.extend_from_slice(h.data());
        }
    }
    let mut streams: Vec<NoiseStreams> = match &model.noise {
        Some(nc) => seeds
            .iter()
            .map(|&s| NoiseStreams::new(s, members, nc.d_noise))
            .collect::<std::result::Result<_, _>>()?,
        None => Vec::new(),
    };
    let draw_all = |streams: &mut Vec<NoiseStreams>| -> Option<Vec<f64>> {
        if streams.is_empty() {
            return None;
        }
        Some(streams.iter_mut().flat_map(|s| s.draw().into_data()).collect())
    };
    let mut eps = draw_all(&mut streams);
    let d_noise = model.noise.as_ref().map_or(0, |n| n.d_noise);

    let mut out = vec![0.0; rows * horizon * frame];
    let mut diverged: Vec<Option<usize>> = vec![None; rows];
    let mut hist_shape = vec![0, k, cfg.channels];
    hist_shape.extend_from_slice(&cfg.spatial);

    for t in 0..horizon {
        if t > 0 && mode == NoiseMode::Resample {
            eps = draw_all(&mut streams);
        }
        let mut next = Vec::with_capacity(rows * frame);
        for start in (0..rows).step_by(MAX_ROWS) {
            let end = (start + MAX_ROWS).min(rows);
            hist_shape[0] = end - start;
            let h = Tensor::new(hist_shape.clone(), window[start * k * frame..end * k * frame].to_vec())
                .map_err(ModelError::from)?;
            let tape = Tape::new();
            let p = model.params.to_vars(&tape, |_| false);
            let pred = match &eps {
                Some(e) => {
                    let et = Tensor::new(vec![end - start, d_noise], e[start * d_noise..end * d_noise].to_vec())
                        .map_err(ModelError::from)?;
                    model.forward_with_noise(&p, &tape, &h, &et)?
                }
                None => backbone::forward(cfg, &p, &tape, &h, &[])?,
            };
            next.extend_from_slice(pred.value().data());
        }
        for r in 0..rows {
            let state = &mut next[r * frame..(r + 1) * frame];
            if diverged[r].is_none() && state.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
                diverged[r] = Some(t);
            }
            if diverged[r].is_some() {
                state.fill(f64::NAN);
            }
            let (m_idx, traj) = (r % members, r / members);
            let off = ((traj * members + m_idx) * horizon + t) * frame;
            out[off..off + frame].copy_from_slice(state);
            let w = &mut window[r * k * frame..(r + 1) * k * frame];
            w.copy_within(frame.., 0);
            w[(k - 1) * frame..].copy_from_slice(state);
        }
    }

    let mut shape = vec![members, horizon, cfg.channels];
    shape.extend_from_slice(&cfg.spatial);
    let per = members * horizon * frame;
    Ok((0..n)
        .map(|i| EnsembleForecast {
            members: Tensor::new(shape.clone(), out[i * per..(i + 1) * per].to_vec()).expect("forecast shape"),
            diverged_at: diverged[i * members..(i + 1) * members].to_vec(),
            seed: seeds[i],
            model_id: model.config_hash.clone(),
        })
        .collect())
}

/// Single-history rollout; see [`rollout_batch`].
pub fn rollout(
    model: &ModelBundle,
    history: &Tensor,
    horizon: usize,
    members: usize,
    seed: u64,
    mode: NoiseMode,
) -> Result<EnsembleForecast> {
    Ok(rollout_batch(model, std::slice::from_ref(history), horizon, members, &[seed], mode)?.remove(0))
}

/// Per-trajectory scores of a forecast against truth `[T, C, spatial...]`
/// in the same units. Frames of diverged members are left out; frames with
/// no live member are skipped.
pub fn trajectory_metrics(forecast: &EnsembleForecast, truth: &Tensor, trajectory: usize) -> Result<TrajectoryRecord> {
    let fshape = forecast.members.shape();
    if truth.shape() != &fshape[1..] {
        return Err(EvalError::Input(format!(
            "truth shape {:?} does not match forecast frames {:?}",
            truth.shape(),
            &fshape[1..]
        )));
    }
    let (m, horizon, channels) = (fshape[0], fshape[1], fshape[2]);
    let sites: usize = fshape[3..].iter().product();
    let frame = channels * sites;
    let (mut fc, mut vr) = (vec![0.0; channels], vec![0.0; channels]);
    let (mut skill, mut spread, mut ssr) = (0.0, 0.0, 0.0);
    let (mut n_frames, mut n_ssr_frames, mut n_degenerate, mut n_spread_frames) = (0usize, 0usize, 0usize, 0usize);
    let mut lost = 0usize;
    let mut ens = Vec::with_capacity(m * sites);
    let mut mean = vec![0.0; sites];
    for t in 0..horizon {
        let live: Vec<usize> = (0..m).filter(|&j| forecast.diverged_at[j].is_none_or(|d| d > t)).collect();
        lost += m - live.len();
        if live.is_empty() {
            continue;
        }
        n_frames += 1;
        let u_frame = &truth.data()[t * frame..(t + 1) * frame];
        for c in 0..channels {
            let u = &u_frame[c * sites..(c + 1) * sites];
            ens.clear();
            for &j in &live {
                ens.extend_from_slice(&forecast.frame(j, t)[c * sites..(c + 1) * sites]);
            }
            mean.iter_mut().enumerate().for_each(|(s, v)| {
                *v = (0..live.len()).map(|j| ens[j * sites + s]).sum::<f64>() / live.len() as f64;
            });
            fc[c] += frame_fcrps(&ens, u);
            vr[c] += vrmse(&mean, u);
            if live.len() >= 2 {
                let st = skill_spread_ssr(&ens, u);
                skill += st.skill;
                spread += st.spread;
                n_spread_frames += 1;
                if st.degenerate {
                    n_degenerate += 1;
                } else {
                    ssr += st.ssr_corrected;
                    n_ssr_frames += 1;
                }
            }
        }
    }
    let avg = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| x / n_frames as f64).collect() };
    let (fc, vr) = if n_frames == 0 { (vec![f64::NAN; channels], vec![f64::NAN; channels]) } else { (avg(&fc), avg(&vr)) };
    let over_channels = |v: &[f64]| v.iter().sum::<f64>() / channels as f64;
    let spread_stats = (n_spread_frames > 0).then(|| {
        (
            skill / n_spread_frames as f64,
            spread / n_spread_frames as f64,
        )
    });
    Ok(TrajectoryRecord {
        trajectory,
        members: m,
        fcrps: over_channels(&fc),
        vrmse: over_channels(&vr),
        skill: spread_stats.map(|s| s.0),
        spread: spread_stats.map(|s| s.1),
        ssr_corrected: (n_ssr_frames > 0).then(|| ssr / n_ssr_frames as f64),
        ssr_degenerate_frames: n_degenerate,
        fcrps_per_channel: fc,
        vrmse_per_channel: vr,
        diverged_fraction: lost as f64 / (m * horizon) as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub members: usize,
    /// Rollout length; `None` picks the system default.
    pub horizon: Option<usize>,
    /// Cap on the number of test trajectories; `None` uses all.
    pub max_trajectories: Option<usize>,
    pub noise_mode: NoiseMode,
    pub n_boot: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            members: 16,
            horizon: None,
            max_trajectories: None,
            noise_mode: NoiseMode::Resample,
            n_boot: bootstrap::DEFAULT_N_BOOT,
            seed: 0,
        }
    }
}

pub fn default_horizon(system: &str) -> usize {
    match system {
        "heat2d" => 50,
        _ => 100,
    }
}

impl EvalConfig {
    pub fn horizon_for(&self, data: &TrajectoryDataset) -> usize {
        self.horizon.unwrap_or_else(|| default_horizon(&data.spec().system))
    }
}

/// Test trajectories, their normalised initial histories and physical truth.
struct TestCases {
    ids: Vec<usize>,
    histories: Vec<Tensor>,
    truths: Vec<Tensor>,
}

fn test_cases(model: &ModelBundle, data: &TrajectoryDataset, cfg: &EvalConfig) -> Result<TestCases> {
    let k = model.backbone.history_len;
    if model.backbone.channels != data.channels() || model.backbone.spatial != data.spatial() {
        return Err(EvalError::Input(format!(
            "model expects {} channels on {:?}, data has {} on {:?}",
            model.backbone.channels,
            model.backbone.spatial,
            data.channels(),
            data.spatial()
        )));
    }
    let horizon = cfg.horizon_for(data);
    if horizon == 0 || k + horizon > data.t_steps() {
        return Err(EvalError::Input(format!(
            "horizon {horizon} with history {k} needs {} frames, trajectories have {}",
            k + horizon,
            data.t_steps()
        )));
    }
    let mut ids = data.splits().get(Split::Test).to_vec();
    if let Some(cap) = cfg.max_trajectories {
        ids.truncate(cap);
    }
    if ids.is_empty() {
        return Err(EvalError::Input("no test trajectories".into()));
    }
    let mut hist_shape = vec![k, data.channels()];
    hist_shape.extend_from_slice(data.spatial());
    let mut truth_shape = vec![horizon, data.channels()];
    truth_shape.extend_from_slice(data.spatial());
    let mut histories = Vec::new();
    let mut truths = Vec::new();
    for &i in &ids {
        let mut h = Vec::new();
        for t in 0..k {
            let mut f = data.frame_f64(i, t);
            model.stats.normalize(&mut f);
            h.extend(f);
        }
        histories.push(Tensor::new(hist_shape.clone(), h).map_err(ModelError::from)?);
        let truth: Vec<f64> = (k..k + horizon).flat_map(|t| data.frame_f64(i, t)).collect();
        truths.push(Tensor::new(truth_shape.clone(), truth).map_err(ModelError::from)?);
    }
    Ok(TestCases { ids, histories, truths })
}

/// Rolls out every test trajectory in fixed-size groups, in parallel, and
/// returns forecasts in physical units. Grouping depends only on the
/// ensemble size, so results do not depend on the thread count.
fn forecasts(model: &ModelBundle, cases: &TestCases, horizon: usize, members: usize, cfg: &EvalConfig) -> Result<Vec<EnsembleForecast>> {
    let group = (MAX_ROWS / members).max(1);
    let seeds: Vec<u64> = cases.ids.iter().map(|&i| derive_seed(cfg.seed, i as u64)).collect();
    let chunks: Vec<(usize, usize)> = (0..cases.ids.len()).step_by(group).map(|s| (s, (s + group).min(cases.ids.len()))).collect();
    let parts = chunks
        .par_iter()
        .map(|&(s, e)| rollout_batch(model, &cases.histories[s..e], horizon, members, &seeds[s..e], cfg.noise_mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts
        .into_iter()
        .flatten()
        .map(|f| f.map_frames(|fr| model.stats.denormalize(fr)))
        .collect())
}

/// Scores a model on the test split. Deterministic models are evaluated as
/// a single member whatever `cfg.members` says.
pub fn evaluate_model(model: &ModelBundle, data: &TrajectoryDataset, cfg: &EvalConfig) -> Result<Vec<TrajectoryRecord>> {
    let cases = test_cases(model, data, cfg)?;
    let members = if model.has_noise_branch() { cfg.members } else { 1 };
    let horizon = cfg.horizon_for(data);
    let fc = forecasts(model, &cases, horizon, members, cfg)?;
    fc.par_iter()
        .zip(&cases.truths)
        .zip(&cases.ids)
        .map(|((f, truth), &id)| trajectory_metrics(f, truth, id))
        .collect()
}

/// Per-trajectory records with bootstrap aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub dataset_hash: String,
    pub model_id: String,
    pub members: usize,
    pub horizon: usize,
    pub n_boot: usize,
    pub bootstrap_seed: u64,
    pub ci_levels: [u32; 2],
    pub records: Vec<TrajectoryRecord>,
    /// Metrics with at least two finite per-trajectory values.
    pub aggregates: IndexMap<String, Interval>,
    /// Mean fraction of diverged (member, step) pairs.
    pub divergence_fraction: f64,
    pub diverged_trajectories: usize,
}

pub const REPORT_CSV_HEADER: &str =
    "config_hash,trajectory,members,fcrps,vrmse,skill,spread,ssr_corrected,diverged_fraction";

impl MetricsReport {
    pub fn build(
        records: Vec<TrajectoryRecord>,
        config_hash: &str,
        dataset_hash: &str,
        model_id: &str,
        horizon: usize,
        n_boot: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut aggregates = IndexMap::new();
        for name in METRIC_NAMES {
            let vals: Vec<f64> = records.iter().filter_map(|r| r.metric(name)).collect();
            if vals.len() >= 2 {
                aggregates.insert(name.to_string(), bootstrap_aggregate(&vals, n_boot, seed)?);
            }
        }
        let n = records.len().max(1) as f64;
        Ok(Self {
            config_hash: config_hash.into(),
            dataset_hash: dataset_hash.into(),
            model_id: model_id.into(),
            members: records.first().map_or(0, |r| r.members),
            horizon,
            n_boot,
            bootstrap_seed: seed,
            ci_levels: [95, 68],
            divergence_fraction: records.iter().map(|r| r.diverged_fraction).sum::<f64>() / n,
            diverged_trajectories: records.iter().filter(|r| r.diverged_fraction > 0.0).count(),
            records,
            aggregates,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| EvalError::Input(format!("metrics report: {e}")))
    }

    /// Flat per-trajectory table, with per-channel columns after the fixed ones.
    pub fn to_csv(&self) -> String {
        let channels = self.records.first().map_or(0, |r| r.fcrps_per_channel.len());
        let mut out = String::from(REPORT_CSV_HEADER);
        for c in 0..channels {
            out.push_str(&format!(",fcrps_c{c},vrmse_c{c}"));
        }
        out.push('\n');
        let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}",
                self.config_hash,
                r.trajectory,
                r.members,
                fmt_f64(r.fcrps),
                fmt_f64(r.vrmse),
                opt(r.skill),
                opt(r.spread),
                opt(r.ssr_corrected),
                fmt_f64(r.diverged_fraction)
            ));
            for c in 0..channels {
                out.push_str(&format!(",{},{}", fmt_f64(r.fcrps_per_channel[c]), fmt_f64(r.vrmse_per_channel[c])));
            }
            out.push('\n');
        }
        out
    }

    /// `(trajectory, value)` pairs of a metric, skipping non-finite values.
    pub fn paired_values(&self, metric: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.metric(metric).map(|v| (r.trajectory, v)))
            .collect()
    }
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// One row of an ensemble-size sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub members: usize,
    pub median_vrmse: f64,
    /// `median_vrmse` divided by the single-member value.
    pub normalised: f64,
}

/// Median rollout VRMSE of the ensemble mean for each ensemble size, using
/// prefixes of one rollout at the largest size.
pub fn ensemble_scaling_sweep(
    model: &ModelBundle,
    data: &TrajectoryDataset,
    sizes: &[usize],
    cfg: &EvalConfig,
) -> Result<Vec<ScalingRow>> {
    if !model.has_noise_branch() {
        return Err(ModelError::MissingNoiseBranch.into());
    }
    if sizes.first() != Some(&1) || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::Input(format!("sizes must be increasing and start at 1, got {sizes:?}")));
    }
    let m_max = *sizes.last().expect("nonempty");
    let cases = test_cases(model, data, cfg)?;
    let horizon = cfg.horizon_for(data);
    let fc = forecasts(model, &cases, horizon, m_max, cfg)?;
    let mut rows = Vec::new();
    for &m in sizes {
        let vals = fc
            .par_iter()
            .zip(&cases.truths)
            .zip(&cases.ids)
            .map(|((f, truth), &id)| trajectory_metrics(&f.prefix(m), truth, id).map(|r| r.vrmse))
            .collect::<Result<Vec<f64>>>()?;
        let finite: Vec<f64> = vals.into_iter().filter(|v| v.is_finite()).collect();
        if finite.is_empty() {
            return Err(EvalError::Input(format!("every trajectory diverged at M = {m}")));
        }
        rows.push(bootstrap::median(&finite));
    }
    let base = rows[0];
    Ok(sizes
        .iter()
        .zip(rows)
        .map(|(&members, median_vrmse)| ScalingRow {
            members,
            median_vrmse,
            normalised: median_vrmse / base,
        })
        .collect())
}
