//! Flat `key = value` configuration with flag overrides.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use qkd_core::{StreamSpec, TrainConfig};

use crate::HarnessError;

/// Every recognised key, in report order.
pub const KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "base_lr",
    "momentum",
    "r_adapter",
    "svd_dim",
    "qubits",
    "layers",
    "tau",
    "lambda_kd",
    "lambda_s",
    "gate_kind",
    "gate_input",
    "distill_space",
    "task_state_mode",
    "sparsity_target",
    "num_blocks",
    "backbone_mode",
    "seed",
    "num_seeds",
    "num_tasks",
    "classes_per_task",
    "train_per_class",
    "test_per_class",
    "input_dim",
    "subspace_dim",
    "overlap",
    "noise_sigma",
    "stream_seed",
    "features",
    "test_fraction",
];

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessConfig {
    pub train: TrainConfig,
    pub stream: StreamSpec,
    /// Feature file replacing the synthetic stream.
    pub features: Option<PathBuf>,
    /// Per-class fraction of a feature file held out for testing.
    pub test_fraction: f64,
    /// Replicate `i` uses `seed + i` and `stream_seed + i`.
    pub num_seeds: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            stream: StreamSpec::default(),
            features: None,
            test_fraction: 0.5,
            num_seeds: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, HarnessError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| HarnessError::Config(format!("invalid value {value:?} for {key}: {e}")))
}

impl HarnessConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let v = value.trim();
        let (t, s) = (&mut self.train, &mut self.stream);
        match key {
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "base_lr" => t.base_lr = parse(key, v)?,
            "momentum" => t.momentum = parse(key, v)?,
            "r_adapter" => t.r_adapter = parse(key, v)?,
            "svd_dim" => t.r_svd = parse(key, v)?,
            "qubits" => t.q = parse(key, v)?,
            "layers" => t.l_q = parse(key, v)?,
            "tau" => t.tau = parse(key, v)?,
            "lambda_kd" => t.lambda_kd = parse(key, v)?,
            "lambda_s" => t.lambda_s = parse(key, v)?,
            "gate_kind" => t.gate_kind = parse(key, v)?,
            "gate_input" => t.gate_input = parse(key, v)?,
            "distill_space" => t.distill_space = parse(key, v)?,
            "task_state_mode" => t.task_state_mode = parse(key, v)?,
            "sparsity_target" => t.sparsity_target = parse(key, v)?,
            "num_blocks" => t.num_blocks = parse(key, v)?,
            "backbone_mode" => t.backbone_mode = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "num_seeds" => self.num_seeds = parse(key, v)?,
            "num_tasks" => s.num_tasks = parse(key, v)?,
            "classes_per_task" => s.classes_per_task = parse(key, v)?,
            "train_per_class" => s.train_per_class = parse(key, v)?,
            "test_per_class" => s.test_per_class = parse(key, v)?,
            "input_dim" => s.input_dim = parse(key, v)?,
            "subspace_dim" => s.subspace_dim = parse(key, v)?,
            "overlap" => s.overlap = parse(key, v)?,
            "noise_sigma" => s.noise_sigma = parse(key, v)?,
            "stream_seed" => s.seed = parse(key, v)?,
            "features" => self.features = (!v.is_empty() && v != "none").then(|| PathBuf::from(v)),
            "test_fraction" => self.test_fraction = parse(key, v)?,
            other => {
                return Err(HarnessError::Config(format!(
                    "unknown config key {other:?}; valid keys: {}",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (t, s) = (&self.train, &self.stream);
        Some(match key {
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "base_lr" => t.base_lr.to_string(),
            "momentum" => t.momentum.to_string(),
            "r_adapter" => t.r_adapter.to_string(),
            "svd_dim" => t.r_svd.to_string(),
            "qubits" => t.q.to_string(),
            "layers" => t.l_q.to_string(),
            "tau" => t.tau.to_string(),
            "lambda_kd" => t.lambda_kd.to_string(),
            "lambda_s" => t.lambda_s.to_string(),
            "gate_kind" => t.gate_kind.to_string(),
            "gate_input" => t.gate_input.to_string(),
            "distill_space" => t.distill_space.to_string(),
            "task_state_mode" => t.task_state_mode.to_string(),
            "sparsity_target" => t.sparsity_target.to_string(),
            "num_blocks" => t.num_blocks.to_string(),
            "backbone_mode" => t.backbone_mode.to_string(),
            "seed" => t.seed.to_string(),
            "num_seeds" => self.num_seeds.to_string(),
            "num_tasks" => s.num_tasks.to_string(),
            "classes_per_task" => s.classes_per_task.to_string(),
            "train_per_class" => s.train_per_class.to_string(),
            "test_per_class" => s.test_per_class.to_string(),
            "input_dim" => s.input_dim.to_string(),
            "subspace_dim" => s.subspace_dim.to_string(),
            "overlap" => s.overlap.to_string(),
            "noise_sigma" => s.noise_sigma.to_string(),
            "stream_seed" => s.seed.to_string(),
            "features" => self
                .features
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
            "test_fraction" => self.test_fraction.to_string(),
            _ => return None,
        })
    }

    /// Resolved value of every key, defaults included.
    pub fn entries(&self) -> Vec<(String, String)> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("every listed key resolves")))
            .collect()
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies a comma-separated `key=value` list.
    pub fn apply_list(&mut self, list: &str) -> Result<(), HarnessError> {
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("expected key=value, got {item:?}")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Checks everything that can be checked before any data exists.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.num_seeds == 0 {
            return Err(HarnessError::Config("num_seeds must be at least 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(HarnessError::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        if self.features.is_none() {
            self.stream.validate()?;
            self.train.validate(self.stream.input_dim)?;
        }
        Ok(())
    }

    /// Configuration of replicate `i`.
    pub fn replicate(&self, i: usize) -> Self {
        let mut c = self.clone();
        c.train.seed = self.train.seed.wrapping_add(i as u64);
        c.stream.seed = self.stream.seed.wrapping_add(i as u64);
        c.num_seeds = 1;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qkd_core::GateKind;

    #[test]
    fn every_key_round_trips() {
        let cfg = HarnessConfig::default();
        for (k, v) in cfg.entries() {
            let mut c = HarnessConfig::default();
            c.set(&k, &v).unwrap();
            assert_eq!(c, cfg, "{k}");
        }
    }

    #[test]
    fn text_and_overrides() {
        let mut cfg = HarnessConfig::default();
        cfg.apply_text("# comment\n gate_kind = cosine\n\nqubits=3 # trailing\n")
            .unwrap();
        assert_eq!(cfg.train.gate_kind, GateKind::Cosine);
        assert_eq!(cfg.train.q, 3);
        cfg.apply_list("num_tasks=2, overlap=1").unwrap();
        assert_eq!((cfg.stream.num_tasks, cfg.stream.overlap), (2, 1.0));
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = HarnessConfig::default().set("qbits", "3").unwrap_err().to_string();
        assert!(err.contains("qbits") && err.contains("qubits") && err.contains("lambda_kd"));
        assert!(HarnessConfig::default().apply_text("just words").is_err());
        assert!(HarnessConfig::default().set("tau", "hot").is_err());
    }

    #[test]
    fn replicates_shift_both_seeds() {
        let cfg = HarnessConfig {
            num_seeds: 5,
            ..HarnessConfig::default()
        };
        let r = cfg.replicate(3);
        assert_eq!((r.train.seed, r.stream.seed, r.num_seeds), (3, 3, 1));
    }
}
