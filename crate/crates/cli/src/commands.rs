//! One function per subcommand. Each returns the text printed on success.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crpsrft_core::dynamics::{generate, TrajectoryDataset};
use crpsrft_core::evaluation::{
    ensemble_scaling_sweep, evaluate_model, paired_improvement, MetricsReport, METRIC_NAMES,
};
use crpsrft_core::model::ModelBundle;
use crpsrft_core::training::{finetune_deterministic, retrofit_crps, train_deterministic, TrainLog};

use crate::config::{run_hash, RunConfig};
use crate::error::CliError;
use crate::report::{ImprovementRow, ImprovementTable, ScalingReport};

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

pub fn read_to_string(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))
}

/// `base` with `suffix` appended to the file name.
pub fn with_suffix(base: &Path, suffix: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn pick(flag: Option<PathBuf>, fallback: &Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| CliError::Config(format!("no {what} path given on the command line or in `paths`")))
}

fn load_data(path: &Path) -> Result<TrajectoryDataset, CliError> {
    Ok(TrajectoryDataset::read(path)?)
}

fn load_model(path: &Path) -> Result<ModelBundle, CliError> {
    Ok(ModelBundle::load(path)?)
}

pub fn generate_data(cfg: &RunConfig, out: Option<PathBuf>) -> Result<String, CliError> {
    let out = pick(out, &cfg.paths.data, "output")?;
    let data = generate(&cfg.system, None)?;
    data.write(&out)?;
    let stats = data.stats();
    let splits = data.splits();
    let mut msg = format!(
        "wrote {}\nsystem {} grid {:?} trajectories {} steps {} channels {}\nsplits train {} val {} test {}\ndataset hash {}\n",
        out.display(),
        cfg.system.system,
        data.spatial(),
        data.n_trajectories(),
        data.t_steps(),
        data.channels(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len(),
        data.config_hash()
    );
    for (c, (m, s)) in stats.mean.iter().zip(&stats.std).enumerate() {
        let _ = writeln!(msg, "channel {c}: mean {m:.6} std {s:.6}");
    }
    Ok(msg)
}

/// Where a training command puts its outputs.
pub struct TrainPaths {
    pub data: Option<PathBuf>,
    pub base: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub peer: Option<PathBuf>,
}

#[derive(Serialize)]
struct LogMeta<'a> {
    command: &'a str,
    config_hash: &'a str,
    dataset_hash: &'a str,
    base_model: Option<&'a str>,
    total_steps: usize,
    rows_per_step: usize,
    member_forwards: u64,
    best_epoch: usize,
    best_val_loss: f64,
    warnings: &'a [String],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainKind {
    Pretrain,
    Finetune,
    Retrofit,
}

impl TrainKind {
    pub fn command(self) -> &'static str {
        match self {
            TrainKind::Pretrain => "train-det",
            TrainKind::Finetune => "finetune-det",
            TrainKind::Retrofit => "retrofit-crps",
        }
    }
}

/// Refuses a run whose forward budget differs from the peer configuration's.
pub fn check_compute_match(cfg: &RunConfig, peer: &RunConfig) -> Result<(), CliError> {
    let own = cfg.train.total_steps() * cfg.train.rows_per_step();
    let theirs = peer.train.total_steps() * peer.train.rows_per_step();
    if own != theirs {
        return Err(CliError::Config(format!(
            "compute mismatch: this run performs {own} member forwards, the peer {theirs}"
        )));
    }
    Ok(())
}

pub fn train(kind: TrainKind, cfg: &RunConfig, paths: TrainPaths) -> Result<String, CliError> {
    let data_path = pick(paths.data, &cfg.paths.data, "dataset")?;
    let out = pick(paths.out, &cfg.paths.out, "checkpoint output")?;
    if let Some(peer) = &paths.peer {
        if kind == TrainKind::Pretrain {
            return Err(CliError::Config("--match applies to finetune-det and retrofit-crps".into()));
        }
        let mut peer_cfg = RunConfig::load(peer)?;
        if cfg.seed.is_some() {
            peer_cfg.seed = cfg.seed;
        }
        check_compute_match(cfg, &peer_cfg)?;
    }
    let data = load_data(&data_path)?;
    let base = match kind {
        TrainKind::Pretrain => None,
        _ => Some(load_model(&pick(paths.base, &cfg.paths.base_checkpoint, "base checkpoint")?)?),
    };
    let base_id = base.as_ref().map(|b| b.config_hash.clone());
    let mut inputs = vec![data.config_hash().to_string()];
    inputs.extend(base_id.clone());
    let input_refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    let hash = run_hash(kind.command(), cfg, &input_refs);

    let (model, log) = match (kind, &base) {
        (TrainKind::Pretrain, _) => {
            let mut bb = cfg.backbone.clone();
            bb.channels = data.channels();
            bb.spatial = data.spatial().to_vec();
            train_deterministic(&data, &bb, &cfg.train, hash.clone())?
        }
        (TrainKind::Finetune, Some(b)) => finetune_deterministic(b, &data, &cfg.train, hash.clone())?,
        (TrainKind::Retrofit, Some(b)) => retrofit_crps(b, &cfg.noise, &data, &cfg.train, hash.clone())?,
        _ => unreachable!("base checkpoint loaded above"),
    };
    model.save(&out)?;
    let log_path = paths.log.unwrap_or_else(|| with_suffix(&out, ".log.csv"));
    write_log(&log, &log_path, kind, cfg, &hash, data.config_hash(), base_id.as_deref())?;

    let mut msg = format!(
        "wrote {} and {}\nconfig hash {hash}\nbest epoch {} val loss {:.6e}\nmember forwards {}\n",
        out.display(),
        log_path.display(),
        log.best_epoch,
        log.best_val_loss(),
        log.member_forwards
    );
    for w in &log.warnings {
        let _ = writeln!(msg, "warning: {w}");
    }
    Ok(msg)
}

fn write_log(
    log: &TrainLog,
    path: &Path,
    kind: TrainKind,
    cfg: &RunConfig,
    hash: &str,
    dataset_hash: &str,
    base: Option<&str>,
) -> Result<(), CliError> {
    write_file(path, log.to_csv())?;
    let meta = LogMeta {
        command: kind.command(),
        config_hash: hash,
        dataset_hash,
        base_model: base,
        total_steps: cfg.train.total_steps(),
        rows_per_step: cfg.train.rows_per_step(),
        member_forwards: log.member_forwards,
        best_epoch: log.best_epoch,
        best_val_loss: log.best_val_loss(),
        warnings: &log.warnings,
    };
    write_file(
        &with_suffix(path, ".meta.json"),
        serde_json::to_string_pretty(&meta).expect("meta serialises"),
    )
}

pub struct EvalPaths {
    pub model: PathBuf,
    pub baseline: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Writes `<out>.json` and `<out>.csv`; with a baseline also the baseline's
/// report and `<out>.improvement.{json,csv}`.
pub fn evaluate(cfg: &RunConfig, paths: EvalPaths, members: Option<usize>) -> Result<String, CliError> {
    let mut cfg = cfg.clone();
    if let Some(m) = members {
        if m == 0 {
            return Err(CliError::Config("--M must be positive".into()));
        }
        cfg.eval.members = m;
    }
    let data = load_data(&pick(paths.data, &cfg.paths.data, "dataset")?)?;
    let out = pick(paths.out, &cfg.paths.out, "report output")?;
    let model = load_model(&paths.model)?;
    let baseline = paths.baseline.as_deref().map(load_model).transpose()?;

    let ev = &cfg.eval;
    let horizon = ev.horizon_for(&data);
    let score = |m: &ModelBundle| -> Result<MetricsReport, CliError> {
        let hash = run_hash("evaluate", &cfg, &[&m.config_hash, data.config_hash()]);
        let records = evaluate_model(m, &data, ev)?;
        Ok(MetricsReport::build(records, &hash, data.config_hash(), &m.config_hash, horizon, ev.n_boot, ev.seed)?)
    };
    let report = score(&model)?;
    write_file(&with_suffix(&out, ".json"), report.to_json())?;
    write_file(&with_suffix(&out, ".csv"), report.to_csv())?;
    let mut msg = summary(&report, &out);

    if let Some(b) = baseline {
        let base_report = score(&b)?;
        let base_out = with_suffix(&out, ".baseline");
        write_file(&with_suffix(&base_out, ".json"), base_report.to_json())?;
        write_file(&with_suffix(&base_out, ".csv"), base_report.to_csv())?;
        msg.push_str(&summary(&base_report, &base_out));
        let table = improvement_table(&cfg, &report, &base_report)?;
        write_file(&with_suffix(&out, ".improvement.json"), serde_json::to_string_pretty(&table).expect("table serialises"))?;
        write_file(&with_suffix(&out, ".improvement.csv"), table.to_csv())?;
        msg.push_str("improvement over baseline (%), median [68% CI] [95% CI]\n");
        for r in &table.rows {
            let _ = writeln!(
                msg,
                "  {:<6} {:8.2} [{:.2}, {:.2}] [{:.2}, {:.2}]",
                r.metric, r.median, r.ci68[0], r.ci68[1], r.ci95[0], r.ci95[1]
            );
        }
    }
    Ok(msg)
}

fn summary(report: &MetricsReport, out: &Path) -> String {
    let mut msg = format!(
        "{}: model {} M={} horizon {} trajectories {} diverged {}\n",
        out.display(),
        report.model_id,
        report.members,
        report.horizon,
        report.records.len(),
        report.diverged_trajectories
    );
    for (name, iv) in &report.aggregates {
        let _ = writeln!(msg, "  {name:<14} {:.6e} [{:.6e}, {:.6e}]", iv.median, iv.ci68[0], iv.ci68[1]);
    }
    msg
}

/// Paired improvement of `model` over `baseline` for the headline metrics.
pub fn improvement_table(cfg: &RunConfig, model: &MetricsReport, baseline: &MetricsReport) -> Result<ImprovementTable, CliError> {
    if model.dataset_hash != baseline.dataset_hash {
        return Err(CliError::Config("model and baseline were scored on different datasets".into()));
    }
    let mut rows = Vec::new();
    for metric in ["fcrps", "vrmse"] {
        debug_assert!(METRIC_NAMES.contains(&metric));
        let det = baseline.paired_values(metric);
        let prob = model.paired_values(metric);
        let imp = paired_improvement(&det, &prob, cfg.eval.n_boot, cfg.eval.seed)?;
        rows.push(ImprovementRow {
            metric: metric.to_string(),
            n: det.len().min(prob.len()),
            median: imp.interval.median,
            ci95: imp.interval.ci95,
            ci68: imp.interval.ci68,
        });
    }
    Ok(ImprovementTable {
        config_hash: model.config_hash.clone(),
        dataset_hash: model.dataset_hash.clone(),
        model_id: model.model_id.clone(),
        baseline_id: baseline.model_id.clone(),
        n_boot: cfg.eval.n_boot,
        bootstrap_seed: cfg.eval.seed,
        rows,
    })
}

pub const DEFAULT_SIZES: [usize; 5] = [1, 2, 4, 8, 16];

/// Writes `<out>.json` and `<out>.csv`.
pub fn ensemble_scaling(
    cfg: &RunConfig,
    model: &Path,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    sizes: &[usize],
) -> Result<String, CliError> {
    let data = load_data(&pick(data, &cfg.paths.data, "dataset")?)?;
    let out = pick(out, &cfg.paths.out, "scaling output")?;
    let model = load_model(model)?;
    let sizes_json: Vec<String> = sizes.iter().map(usize::to_string).collect();
    let mut inputs = vec![model.config_hash.as_str(), data.config_hash()];
    inputs.extend(sizes_json.iter().map(String::as_str));
    let hash = run_hash("ensemble-scaling", cfg, &inputs);
    let rows = ensemble_scaling_sweep(&model, &data, sizes, &cfg.eval)?;
    let report = ScalingReport {
        config_hash: hash,
        dataset_hash: data.config_hash().to_string(),
        model_id: model.config_hash.clone(),
        rows,
    };
    write_file(&with_suffix(&out, ".json"), serde_json::to_string_pretty(&report).expect("scaling serialises"))?;
    write_file(&with_suffix(&out, ".csv"), report.to_csv())?;
    let mut msg = format!("wrote {}.{{json,csv}}\nmembers  median_vrmse  normalised\n", out.display());
    for r in &report.rows {
        let _ = writeln!(msg, "{:>7}  {:.6e}  {:.4}", r.members, r.median_vrmse, r.normalised);
    }
    Ok(msg)
}
