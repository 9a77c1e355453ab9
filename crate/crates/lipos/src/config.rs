//! Run configuration: one document with a block per subsystem, loadable
//! from TOML or JSON. Every block and every field is optional; omitted
//! values take the defaults documented on each config struct.

use crate::kvfs::KvfsConfig;
use crate::model::ModelConfig;
use crate::scheduler::SchedConfig;
use crate::sim::WorkloadSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("bad JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot tell the format of {0:?} (expected a .toml or .json extension)")]
    UnknownFormat(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Complete configuration of a run: storage, model, batching policy, and
/// workload.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub kvfs: KvfsConfig,
    pub model: ModelConfig,
    pub scheduler: SchedConfig,
    pub workload: WorkloadSpec,
}

impl SimConfig {
    /// Parse a config file, choosing the parser by file extension.
    /// Does not validate — call [`SimConfig::validate`] after applying any
    /// command-line overrides.
    pub fn load(path: impl AsRef<Path>) -> Result<SimConfig, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => Ok(toml::from_str(&text)?),
            Some("json") => Ok(serde_json::from_str(&text)?),
            _ => Err(ConfigError::UnknownFormat(path.display().to_string())),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<SimConfig, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn from_json_str(text: &str) -> Result<SimConfig, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reject configurations the simulator cannot run meaningfully.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: String| Err(ConfigError::Invalid(m));
        let k = &self.kvfs;
        if k.page_size == 0 {
            return err("kvfs.page_size must be at least 1".into());
        }
        if k.device_capacity_pages == 0 {
            return err("kvfs.device_capacity_pages must be at least 1".into());
        }
        let m = &self.model;
        if m.vocab_size < 2 {
            return err(format!(
                "model.vocab_size is {}; need at least 2 (one EOS, one content token)",
                m.vocab_size
            ));
        }
        if u64::from(m.eos_token) >= u64::from(m.vocab_size) {
            return err(format!(
                "model.eos_token {} is outside the vocabulary (size {})",
                m.eos_token, m.vocab_size
            ));
        }
        if !(m.temperature_internal.is_finite() && m.temperature_internal > 0.0) {
            return err("model.temperature_internal must be finite and positive".into());
        }
        let s = &self.scheduler;
        if s.w_max_ns == 0 {
            return err("scheduler.w_max_ns must be positive".into());
        }
        if s.b_max == 0 {
            return err("scheduler.b_max must be at least 1".into());
        }
        if !(s.ewma_alpha > 0.0 && s.ewma_alpha <= 1.0) {
            return err(format!(
                "scheduler.ewma_alpha is {}; must be in (0, 1]",
                s.ewma_alpha
            ));
        }
        if s.dt_default_ns == 0 {
            return err("scheduler.dt_default_ns must be positive".into());
        }
        let w = &self.workload;
        if w.num_docs == 0 {
            return err("workload.num_docs must be at least 1".into());
        }
        if w.doc_len == 0 || w.query_len == 0 || w.gen_len == 0 {
            return err("workload token lengths must all be at least 1".into());
        }
        if !(w.pareto_alpha.is_finite() && w.pareto_alpha > 0.0) {
            return err("workload.pareto_alpha must be finite and positive".into());
        }
        if !(w.request_rate.is_finite() && w.request_rate > 0.0) {
            return err("workload.request_rate must be finite and positive".into());
        }
        if !(w.duration.is_finite() && w.duration > 0.0) {
            return err("workload.duration must be finite and positive".into());
        }
        Ok(())
    }

    /// Profile used by the bundled throughput experiment: a small
    /// vocabulary so distributions are cheap at tens of thousands of
    /// generated tokens, and a device pool comfortably holding the corpus
    /// (100 docs x 3,000 tokens ~ 18,750 pages) plus in-flight requests.
    pub fn experiment_profile() -> SimConfig {
        SimConfig {
            kvfs: KvfsConfig {
                page_size: 16,
                device_capacity_pages: 65_536,
                host_capacity_pages: 65_536,
            },
            model: ModelConfig { vocab_size: 64, ..ModelConfig::default() },
            ..SimConfig::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        SimConfig::default().validate().unwrap();
        SimConfig::experiment_profile().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_everything() {
        let mut cfg = SimConfig::experiment_profile();
        cfg.workload.pareto_alpha = 0.6;
        cfg.scheduler.b_max = 48;
        let text = cfg.to_toml_string();
        let back = SimConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = SimConfig::from_toml_str(
            "[model]\nvocab_size = 32\n\n[workload]\npareto_alpha = 0.2\n",
        )
        .unwrap();
        assert_eq!(cfg.model.vocab_size, 32);
        assert_eq!(cfg.workload.pareto_alpha, 0.2);
        // Untouched blocks keep their defaults.
        assert_eq!(cfg.kvfs, KvfsConfig::default());
        assert_eq!(cfg.scheduler, SchedConfig::default());
        assert_eq!(cfg.workload.num_docs, WorkloadSpec::default().num_docs);
    }

    #[test]
    fn json_parses_too() {
        let cfg = SimConfig::from_json_str(r#"{"workload": {"request_rate": 5.0}}"#).unwrap();
        assert_eq!(cfg.workload.request_rate, 5.0);
    }

    #[test]
    fn load_rejects_unknown_extension() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.yaml");
        std::fs::write(&p, "x: 1").unwrap();
        assert!(matches!(
            SimConfig::load(&p),
            Err(ConfigError::UnknownFormat(_))
        ));
    }

    #[test]
    fn load_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("cfg.toml");
        std::fs::write(&t, "[scheduler]\nb_max = 7\n").unwrap();
        assert_eq!(SimConfig::load(&t).unwrap().scheduler.b_max, 7);
        let j = dir.path().join("cfg.json");
        std::fs::write(&j, r#"{"scheduler": {"b_max": 9}}"#).unwrap();
        assert_eq!(SimConfig::load(&j).unwrap().scheduler.b_max, 9);
    }

    #[test]
    fn validation_catches_bad_fields() {
        let cases: Vec<(fn(&mut SimConfig), &str)> = vec![
            (|c| c.kvfs.page_size = 0, "page_size"),
            (|c| c.model.vocab_size = 1, "vocab_size"),
            (|c| c.model.eos_token = 1 << 20, "eos_token"),
            (|c| c.model.temperature_internal = 0.0, "temperature_internal"),
            (|c| c.scheduler.ewma_alpha = 1.5, "ewma_alpha"),
            (|c| c.scheduler.b_max = 0, "b_max"),
            (|c| c.workload.pareto_alpha = -1.0, "pareto_alpha"),
            (|c| c.workload.request_rate = f64::INFINITY, "request_rate"),
            (|c| c.workload.duration = 0.0, "duration"),
            (|c| c.workload.gen_len = 0, "lengths"),
        ];
        for (mutate, what) in cases {
            let mut cfg = SimConfig::default();
            mutate(&mut cfg);
            assert!(cfg.validate().is_err(), "expected {what} to be rejected");
        }
    }
}
