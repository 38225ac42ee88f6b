//! Artifact types written by `evaluate` and `ensemble-scaling`, and the
//! `report` merge over them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crpsrft_core::evaluation::{fmt_f64, MetricsReport, ScalingRow};

use crate::commands::{read_to_string, write_file};
use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub config_hash: String,
    pub dataset_hash: String,
    pub model_id: String,
    pub rows: Vec<ScalingRow>,
}

pub const SCALING_CSV_HEADER: &str = "config_hash,members,median_vrmse,normalised";

impl ScalingReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SCALING_CSV_HEADER}\n");
        self.push_rows(&mut out);
        out
    }

    fn push_rows(&self, out: &mut String) {
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.config_hash,
                r.members,
                fmt_f64(r.median_vrmse),
                fmt_f64(r.normalised)
            );
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementRow {
    pub metric: String,
    pub n: usize,
    pub median: f64,
    pub ci95: [f64; 2],
    pub ci68: [f64; 2],
}

/// Percent improvement of a model over a baseline, one row per metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImprovementTable {
    pub config_hash: String,
    pub dataset_hash: String,
    pub model_id: String,
    pub baseline_id: String,
    pub n_boot: usize,
    pub bootstrap_seed: u64,
    #[serde(rename = "improvements")]
    pub rows: Vec<ImprovementRow>,
}

pub const IMPROVEMENT_CSV_HEADER: &str = "config_hash,baseline_id,metric,n,median,ci95_lo,ci95_hi,ci68_lo,ci68_hi";

impl ImprovementTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{IMPROVEMENT_CSV_HEADER}\n");
        self.push_rows(&mut out);
        out
    }

    fn push_rows(&self, out: &mut String) {
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.config_hash,
                self.baseline_id,
                r.metric,
                r.n,
                fmt_f64(r.median),
                fmt_f64(r.ci95[0]),
                fmt_f64(r.ci95[1]),
                fmt_f64(r.ci68[0]),
                fmt_f64(r.ci68[1])
            );
        }
    }
}

/// Any artifact `report` accepts, told apart by its distinguishing field.
#[derive(Clone, Debug, PartialEq)]
pub enum Artifact {
    Metrics(MetricsReport),
    Scaling(ScalingReport),
    Improvement(ImprovementTable),
}

impl Artifact {
    pub fn parse(text: &str) -> Result<Self, String> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let has = |k: &str| v.get(k).is_some();
        let r = if has("records") {
            serde_json::from_value(v).map(Artifact::Metrics)
        } else if has("improvements") {
            serde_json::from_value(v).map(Artifact::Improvement)
        } else if has("rows") {
            serde_json::from_value(v).map(Artifact::Scaling)
        } else {
            return Err("not a metrics, scaling or improvement report".into());
        };
        r.map_err(|e| e.to_string())
    }

    fn ids(&self) -> (&str, &str) {
        match self {
            Artifact::Metrics(m) => (&m.config_hash, &m.dataset_hash),
            Artifact::Scaling(s) => (&s.config_hash, &s.dataset_hash),
            Artifact::Improvement(t) => (&t.config_hash, &t.dataset_hash),
        }
    }
}

pub const RUNS_CSV_HEADER: &str =
    "config_hash,dataset_hash,model_id,trajectory,members,fcrps,vrmse,skill,spread,ssr_corrected,diverged_fraction";

/// Row counts of the merged tables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MergeSummary {
    pub runs: usize,
    pub scaling: usize,
    pub improvement: usize,
    pub dat_files: usize,
}

/// Short stable prefix for file names.
fn tag(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Merges artifacts into `runs.csv`, `scaling.csv` and `improvement.csv`
/// under `out_dir`, plus two-column `.dat` files for plotting.
pub fn merge(inputs: &[PathBuf], out_dir: &Path) -> Result<MergeSummary, CliError> {
    let mut artifacts = Vec::with_capacity(inputs.len());
    let mut datasets: BTreeMap<String, (String, PathBuf)> = BTreeMap::new();
    for path in inputs {
        let a = Artifact::parse(&read_to_string(path)?).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let (run, ds) = a.ids();
        if let Some((prev, prev_path)) = datasets.get(run) {
            if prev != ds {
                return Err(CliError::Config(format!(
                    "run {run} has dataset hash {prev} in {} but {ds} in {}",
                    prev_path.display(),
                    path.display()
                )));
            }
        } else {
            datasets.insert(run.to_string(), (ds.to_string(), path.clone()));
        }
        artifacts.push(a);
    }

    let mut runs = format!("{RUNS_CSV_HEADER}\n");
    let mut scaling = format!("{SCALING_CSV_HEADER}\n");
    let mut improvement = format!("{IMPROVEMENT_CSV_HEADER}\n");
    let mut summary = MergeSummary::default();
    let mut dats: Vec<(String, String)> = Vec::new();
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    for a in &artifacts {
        match a {
            Artifact::Metrics(m) => {
                let mut dat = String::from("# trajectory fcrps\n");
                for r in &m.records {
                    let _ = writeln!(
                        runs,
                        "{},{},{},{},{},{},{},{},{},{},{}",
                        m.config_hash,
                        m.dataset_hash,
                        m.model_id,
                        r.trajectory,
                        r.members,
                        fmt_f64(r.fcrps),
                        fmt_f64(r.vrmse),
                        opt(r.skill),
                        opt(r.spread),
                        opt(r.ssr_corrected),
                        fmt_f64(r.diverged_fraction)
                    );
                    let _ = writeln!(dat, "{} {}", r.trajectory, fmt_f64(r.fcrps));
                }
                summary.runs += m.records.len();
                dats.push((format!("fcrps_{}.dat", tag(&m.config_hash)), dat));
            }
            Artifact::Scaling(s) => {
                s.push_rows(&mut scaling);
                summary.scaling += s.rows.len();
                let mut dat = String::from("# members normalised_vrmse\n");
                for r in &s.rows {
                    let _ = writeln!(dat, "{} {}", r.members, fmt_f64(r.normalised));
                }
                dats.push((format!("scaling_{}.dat", tag(&s.config_hash)), dat));
            }
            Artifact::Improvement(t) => {
                t.push_rows(&mut improvement);
                summary.improvement += t.rows.len();
                let mut dat = String::from("# metric improvement_percent\n");
                for r in &t.rows {
                    let _ = writeln!(dat, "{} {}", r.metric, fmt_f64(r.median));
                }
                dats.push((format!("improvement_{}.dat", tag(&t.config_hash)), dat));
            }
        }
    }
    write_file(&out_dir.join("runs.csv"), runs)?;
    write_file(&out_dir.join("scaling.csv"), scaling)?;
    write_file(&out_dir.join("improvement.csv"), improvement)?;
    summary.dat_files = dats.len();
    for (name, body) in dats {
        write_file(&out_dir.join(name), body)?;
    }
    Ok(summary)
}
