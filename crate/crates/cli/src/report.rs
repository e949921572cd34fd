//! Report records and their JSON/CSV encodings.
//!
//! Both encodings print every float with [`fmt_f64`], so a value read back
//! from either file has the same bits.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

use crate::HarnessError;

/// Seventeen significant digits; round-trips every finite `f64`.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("\"{v}\"")
    }
}

/// A float serialized through [`fmt_f64`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(fmt_f64(self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

fn nums(v: &[f64]) -> Vec<Num> {
    v.iter().copied().map(Num).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct LossRecord {
    pub ce: Num,
    pub qkd: Num,
    pub sparsity: Num,
    pub total: Num,
}

#[derive(Clone, Debug, Serialize)]
pub struct StageRecord {
    pub task_id: usize,
    pub accuracy: Num,
    pub mean_max_alpha: Num,
    pub mean_entropy: Num,
    pub num_samples: usize,
    pub epoch_losses: Vec<LossRecord>,
}

/// One seeded protocol run.
#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub stream_seed: u64,
    pub per_stage_accuracy: Vec<Num>,
    pub final_accuracy: Num,
    pub average: Num,
    pub trainable_params: usize,
    pub wall_clock_seconds: Num,
    pub stages: Vec<StageRecord>,
}

impl RunRecord {
    pub fn from_outcome(out: &qkd_core::RunOutcome, seed: u64, stream_seed: u64, seconds: f64) -> Self {
        Self {
            seed,
            stream_seed,
            per_stage_accuracy: nums(&out.metrics.per_stage_accuracy),
            final_accuracy: Num(out.metrics.final_accuracy),
            average: Num(out.metrics.average),
            trainable_params: out.model.num_trainable_params(),
            wall_clock_seconds: Num(seconds),
            stages: out
                .stages
                .iter()
                .map(|s| StageRecord {
                    task_id: s.task_id,
                    accuracy: Num(s.eval.accuracy),
                    mean_max_alpha: Num(s.eval.mean_max_alpha),
                    mean_entropy: Num(s.eval.mean_entropy),
                    num_samples: s.eval.num_samples,
                    epoch_losses: s
                        .epoch_losses
                        .iter()
                        .map(|l| LossRecord {
                            ce: Num(l.ce),
                            qkd: Num(l.qkd),
                            sparsity: Num(l.sparsity),
                            total: Num(l.total),
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

/// Means over the replicates of one configuration.
#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub mean_average: Num,
    pub mean_final: Num,
    pub trainable_params: usize,
    pub wall_clock_seconds: Num,
}

impl Summary {
    pub fn of(runs: &[RunRecord]) -> Self {
        let n = runs.len().max(1) as f64;
        Self {
            mean_average: Num(runs.iter().map(|r| r.average.0).sum::<f64>() / n),
            mean_final: Num(runs.iter().map(|r| r.final_accuracy.0).sum::<f64>() / n),
            trainable_params: runs.first().map_or(0, |r| r.trainable_params),
            wall_clock_seconds: Num(runs.iter().map(|r| r.wall_clock_seconds.0).sum()),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub version: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub summary: Summary,
    pub runs: Vec<RunRecord>,
}

/// One row of an ablation, sweep or gate comparison.
#[derive(Clone, Debug, Serialize)]
pub struct TableRow {
    pub label: String,
    /// Keys this row overrides relative to the base configuration.
    pub overrides: BTreeMap<String, String>,
    pub error: Option<String>,
    pub summary: Option<Summary>,
    pub runs: Vec<RunRecord>,
}

#[derive(Clone, Debug, Serialize)]
pub struct TableReport {
    pub version: String,
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub rows: Vec<TableRow>,
}

pub fn version_string() -> String {
    format!("qkd {}", env!("CARGO_PKG_VERSION"))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String, HarnessError> {
    serde_json::to_string_pretty(value).map_err(|e| HarnessError::Runtime(format!("JSON encoding failed: {e}")))
}

/// Per-stage accuracies, one line per (run, stage).
pub fn run_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("seed,stream_seed,stage,task_id,accuracy,mean_max_alpha,mean_entropy\n");
    for r in &report.runs {
        for (b, s) in r.stages.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{b},{},{},{},{}\n",
                r.seed,
                r.stream_seed,
                s.task_id,
                fmt_f64(s.accuracy.0),
                fmt_f64(s.mean_max_alpha.0),
                fmt_f64(s.mean_entropy.0)
            ));
        }
    }
    out
}

/// One line per row; failed rows carry their message and empty numbers.
pub fn table_csv(report: &TableReport) -> String {
    let mut out = String::from("row,mean_average,mean_final,trainable_params,wall_clock_seconds,error\n");
    for row in &report.rows {
        let label = csv_field(&row.label);
        match &row.summary {
            Some(s) => out.push_str(&format!(
                "{label},{},{},{},{},\n",
                fmt_f64(s.mean_average.0),
                fmt_f64(s.mean_final.0),
                s.trainable_params,
                fmt_f64(s.wall_clock_seconds.0)
            )),
            None => out.push_str(&format!(
                "{label},,,,,{}\n",
                csv_field(row.error.as_deref().unwrap_or(""))
            )),
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), HarnessError> {
    let file_name = path
        .file_name()
        .ok_or_else(|| HarnessError::Runtime(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents.as_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formatted_floats_round_trip() {
        for v in [0.0, 1.0, 0.1, 1.0 / 3.0, f64::MIN_POSITIVE, 1e300, -2.5e-7, f64::MAX] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn json_carries_the_same_text() {
        let json = serde_json::to_string(&vec![Num(0.1), Num(2.0 / 3.0)]).unwrap();
        assert_eq!(json, format!("[{},{}]", fmt_f64(0.1), fmt_f64(2.0 / 3.0)));
        let back: Vec<f64> = serde_json::from_str(&json).unwrap();
        assert_eq!(back[1].to_bits(), (2.0f64 / 3.0).to_bits());
    }

    #[test]
    fn csv_quotes_separators() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        write_atomic(&p, "{}").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "{}");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
