//! Seeded protocol runs and the tables built from them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use qkd_core::datagen::{gen_stream, load_feature_file, split_by_task};
use qkd_core::{run_protocol, GateKind, IncrementalModel, TaskData};

use crate::config::HarnessConfig;
use crate::report::{version_string, ExperimentReport, RunRecord, Summary, TableReport, TableRow};
use crate::HarnessError;

/// Builds the task stream for one replicate.
pub fn load_tasks(cfg: &HarnessConfig) -> Result<Vec<TaskData>, HarnessError> {
    match &cfg.features {
        Some(path) => {
            let samples = load_feature_file(path).map_err(|e| match e {
                qkd_core::QkdError::Io(io) => HarnessError::Data(format!("cannot read {}: {io}", path.display())),
                other => other.into(),
            })?;
            Ok(split_by_task(&samples, cfg.test_fraction)?)
        }
        None => Ok(gen_stream(&cfg.stream)?.tasks),
    }
}

/// Runs one replicate exactly as configured.
pub fn run_once(cfg: &HarnessConfig) -> Result<(RunRecord, IncrementalModel), HarnessError> {
    let tasks = load_tasks(cfg)?;
    let start = Instant::now();
    let outcome = run_protocol(&tasks, &cfg.train)?;
    let seconds = start.elapsed().as_secs_f64();
    let record = RunRecord::from_outcome(&outcome, cfg.train.seed, cfg.stream.seed, seconds);
    Ok((record, outcome.model))
}

/// Runs all replicates; returns their records and the first replicate's model.
pub fn run_replicates(cfg: &HarnessConfig) -> Result<(Vec<RunRecord>, IncrementalModel), HarnessError> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.num_seeds);
    let mut first = None;
    for i in 0..cfg.num_seeds {
        let (record, model) = run_once(&cfg.replicate(i))?;
        log::info!("seed {}: average accuracy {:.4}", record.seed, record.average.0);
        records.push(record);
        first.get_or_insert(model);
    }
    Ok((records, first.expect("num_seeds ≥ 1")))
}

fn snapshot(cfg: &HarnessConfig) -> BTreeMap<String, String> {
    cfg.entries().into_iter().collect()
}

pub fn run(cfg: &HarnessConfig) -> Result<(ExperimentReport, IncrementalModel), HarnessError> {
    let (runs, model) = run_replicates(cfg)?;
    let report = ExperimentReport {
        version: version_string(),
        command: "run".into(),
        config: snapshot(cfg),
        summary: Summary::of(&runs),
        runs,
    };
    Ok((report, model))
}

/// Component switched on by one ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Toggle {
    Qgtm,
    QkdLoss,
    Sparsity,
}

impl Toggle {
    pub const ALL: [Toggle; 3] = [Toggle::Qgtm, Toggle::QkdLoss, Toggle::Sparsity];

    fn label(self) -> &'static str {
        match self {
            Self::Qgtm => "+QGTM",
            Self::QkdLoss => "+QKD",
            Self::Sparsity => "+L_s",
        }
    }
}

impl FromStr for Toggle {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s.trim() {
            "qgtm" => Ok(Self::Qgtm),
            "qkd_loss" => Ok(Self::QkdLoss),
            "sparsity" => Ok(Self::Sparsity),
            other => Err(HarnessError::Config(format!(
                "unknown ablation toggle {other:?} (expected qgtm, qkd_loss or sparsity)"
            ))),
        }
    }
}

impl fmt::Display for Toggle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Qgtm => "qgtm",
            Self::QkdLoss => "qkd_loss",
            Self::Sparsity => "sparsity",
        })
    }
}

/// Labels and overrides of the cumulative rows. The first row switches
/// everything off: random adapter selection and a cross-entropy objective.
/// Label of a table row and the keys it overrides.
pub type RowSpec = (String, Vec<(String, String)>);

pub fn ablation_rows(base: &HarnessConfig, toggles: &[Toggle]) -> Result<Vec<RowSpec>, HarnessError> {
    let mut sorted = toggles.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != toggles.len() {
        return Err(HarnessError::Config("repeated ablation toggle".into()));
    }
    let gate = match base.train.gate_kind {
        GateKind::Random => GateKind::Quantum,
        k => k,
    };
    let mut current = vec![
        ("gate_kind".to_string(), GateKind::Random.to_string()),
        ("lambda_kd".to_string(), "0".to_string()),
        ("lambda_s".to_string(), "0".to_string()),
    ];
    let mut rows = vec![("none".to_string(), current.clone())];
    for t in sorted {
        let (slot, value) = match t {
            Toggle::Qgtm => (0, gate.to_string()),
            Toggle::QkdLoss => (1, base.train.lambda_kd.to_string()),
            Toggle::Sparsity => (2, base.train.lambda_s.to_string()),
        };
        current[slot].1 = value;
        rows.push((t.label().to_string(), current.clone()));
    }
    Ok(rows)
}

fn run_row(base: &HarnessConfig, label: String, overrides: Vec<(String, String)>) -> TableRow {
    let mut cfg = base.clone();
    let outcome = overrides
        .iter()
        .try_for_each(|(k, v)| cfg.set(k, v))
        .and_then(|()| run_replicates(&cfg));
    let overrides = overrides.into_iter().collect();
    match outcome {
        Ok((runs, _)) => TableRow {
            label,
            overrides,
            error: None,
            summary: Some(Summary::of(&runs)),
            runs,
        },
        Err(e) => {
            log::warn!("row {label} failed: {e}");
            TableRow {
                label,
                overrides,
                error: Some(e.to_string()),
                summary: None,
                runs: Vec::new(),
            }
        }
    }
}

fn table(base: &HarnessConfig, command: &str, rows: Vec<TableRow>) -> TableReport {
    TableReport {
        version: version_string(),
        command: command.into(),
        config: snapshot(base),
        rows,
    }
}

fn first_error(rows: &[TableRow]) -> Result<(), HarnessError> {
    match rows.iter().find_map(|r| r.error.as_ref()) {
        Some(e) => Err(HarnessError::Runtime(e.clone())),
        None => Ok(()),
    }
}

/// Cumulative ablation; any failed row fails the table.
pub fn ablate(base: &HarnessConfig, toggles: &[Toggle]) -> Result<TableReport, HarnessError> {
    base.validate()?;
    let rows: Vec<TableRow> = ablation_rows(base, toggles)?
        .into_iter()
        .map(|(label, ov)| run_row(base, label, ov))
        .collect();
    first_error(&rows)?;
    Ok(table(base, "ablate", rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Qubits,
    SvdDim,
    LambdaKd,
    LambdaS,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            Self::Qubits => "qubits",
            Self::SvdDim => "svd_dim",
            Self::LambdaKd => "lambda_kd",
            Self::LambdaS => "lambda_s",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s {
            "qubits" => Ok(Self::Qubits),
            "svd_dim" => Ok(Self::SvdDim),
            "lambda_kd" => Ok(Self::LambdaKd),
            "lambda_s" => Ok(Self::LambdaS),
            other => Err(HarnessError::Config(format!(
                "unknown sweep axis {other:?} (expected qubits, svd_dim, lambda_kd or lambda_s)"
            ))),
        }
    }
}

/// One row per value. A value that fails produces an error row and the
/// sweep moves on.
pub fn sweep(base: &HarnessConfig, axis: SweepAxis, values: &[String]) -> Result<TableReport, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let rows = values
        .iter()
        .map(|v| {
            run_row(
                base,
                format!("{}={v}", axis.key()),
                vec![(axis.key().to_string(), v.clone())],
            )
        })
        .collect();
    Ok(table(base, "sweep", rows))
}

/// Same seeds and stream for every gate kind.
pub fn compare_gates(base: &HarnessConfig) -> Result<TableReport, HarnessError> {
    base.validate()?;
    let rows: Vec<TableRow> = GateKind::ALL
        .iter()
        .map(|k| run_row(base, k.to_string(), vec![("gate_kind".into(), k.to_string())]))
        .collect();
    first_error(&rows)?;
    Ok(table(base, "compare-gates", rows))
}
