//! Experiment configuration: a flat TOML file of typed keys.
//!
//! A file may start from a named preset (`preset = "paper-default"`) and
//! override any key. Unknown keys are rejected so a typo in a sweep axis
//! fails immediately instead of silently running the default.

use std::path::{Path, PathBuf};

use fedsup_core::data::{PartitionSpec, SyntheticBlinkSpec};
use fedsup_core::federation::{Aggregator, BufferMode, FederationConfig, UwaaWeighting};
use fedsup_core::nn::DropoutRates;
use fedsup_core::uncertainty::ClientConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::CliError;

pub const PRESETS: &[&str] = &["paper-default", "desk"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Federated,
    Centralized,
    Standalone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Name of the output subdirectory.
    pub name: String,
    pub method: Method,

    pub edges: usize,
    pub clients: usize,
    pub participation: f64,
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// MC dropout passes, `M`.
    pub passes: usize,
    pub epsilon: f64,
    pub rounds: usize,
    pub aggregator: Aggregator,
    pub uwaa_weighting: UwaaWeighting,
    pub buffer_mode: BufferMode,
    pub pretrain_rounds: usize,
    /// End a run at the first round reaching `target_accuracy`.
    pub stop_at_target: bool,
    pub dropout_conv: f64,
    pub dropout_dense: f64,

    /// Load images from a dataset file instead of generating them.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    pub image_height: usize,
    pub image_width: usize,
    pub num_samples: usize,
    pub noise_std: f64,
    pub jitter_px: usize,
    /// Fixed dataset seed; by default each run seed draws its own dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    pub holdout_fraction: f64,

    pub partition_mu: f64,
    pub partition_sigma: f64,
    pub sigma_is_variance: bool,

    pub seeds: Vec<u64>,
    pub target_accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fed = FederationConfig::default();
        Self {
            name: "paper-default".into(),
            method: Method::Federated,
            edges: fed.edges,
            clients: fed.clients,
            participation: fed.participation,
            local_epochs: fed.local_epochs,
            learning_rate: f64::from(fed.learning_rate),
            batch_size: fed.batch_size,
            passes: fed.client.passes,
            epsilon: fed.client.epsilon,
            rounds: fed.rounds,
            aggregator: fed.aggregator,
            uwaa_weighting: fed.uwaa_weighting,
            buffer_mode: fed.buffer_mode,
            pretrain_rounds: 0,
            stop_at_target: false,
            dropout_conv: f64::from(DropoutRates::default().conv),
            dropout_dense: f64::from(DropoutRates::default().dense),
            dataset_path: None,
            image_height: 24,
            image_width: 24,
            num_samples: 2600,
            noise_std: 0.5,
            jitter_px: 2,
            data_seed: None,
            holdout_fraction: 0.2,
            partition_mu: 40.0,
            partition_sigma: 3.0,
            sigma_is_variance: false,
            seeds: vec![1, 2, 3, 4, 5],
            target_accuracy: 0.90,
            output_dir: None,
        }
    }
}

/// The named starting points a config file can extend.
pub fn preset(name: &str) -> Result<ExperimentConfig, CliError> {
    match name {
        "paper-default" => Ok(ExperimentConfig::default()),
        "desk" => Ok(ExperimentConfig {
            name: "desk".into(),
            rounds: 20,
            ..ExperimentConfig::default()
        }),
        other => Err(CliError::Config(format!(
            "unknown preset `{other}` (known: {})",
            PRESETS.join(", ")
        ))),
    }
}

fn to_table(cfg: &ExperimentConfig) -> Table {
    match Value::try_from(cfg) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("config always serializes to a table"),
    }
}

impl ExperimentConfig {
    /// Parses a config document, resolving `preset` and relative
    /// `dataset_path` against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self, CliError> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        Self::from_table(table, base_dir)
    }

    pub fn from_table(mut table: Table, base_dir: Option<&Path>) -> Result<Self, CliError> {
        let base = match table.remove("preset") {
            None => ExperimentConfig::default(),
            Some(Value::String(name)) => preset(&name)?,
            Some(other) => return Err(CliError::Config(format!("`preset` must be a string, got {other}"))),
        };
        let mut merged = to_table(&base);
        for (k, v) in table {
            merged.insert(k, v);
        }
        let mut cfg: ExperimentConfig = Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        if let (Some(dir), Some(path)) = (base_dir, cfg.dataset_path.as_mut()) {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text, path.parent()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_table(&self) -> Table {
        to_table(self)
    }

    /// Field-level validation; the message names the offending key.
    pub fn validate(&self) -> Result<(), CliError> {
        fn bad(field: &str, why: impl std::fmt::Display) -> Result<(), CliError> {
            Err(CliError::Config(format!("invalid `{field}`: {why}")))
        }
        if self.name.is_empty()
            || self
                .name
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || "-_.=".contains(c)))
        {
            return bad("name", "use letters, digits, '-', '_', '.', '='");
        }
        if self.edges == 0 {
            return bad("edges", "must be >= 1");
        }
        if self.clients < self.edges {
            return bad(
                "clients",
                format!("{} clients cannot cover {} edges", self.clients, self.edges),
            );
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation", format!("{} is outside (0, 1]", self.participation));
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a finite value >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.passes == 0 {
            return bad("passes", "must be >= 1");
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad("epsilon", "must be a finite value >= 0");
        }
        for (field, p) in [
            ("dropout_conv", self.dropout_conv),
            ("dropout_dense", self.dropout_dense),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(field, format!("{p} is outside [0, 1)"));
            }
        }
        match &self.dataset_path {
            Some(path) if !path.is_file() => return bad("dataset_path", format!("{} does not exist", path.display())),
            Some(_) => {}
            None => {
                if let Err(e) = self.synthetic_spec(0).validate() {
                    return bad("image_height/image_width/noise_std/jitter_px", e);
                }
                if self.num_samples < 2 {
                    return bad("num_samples", "must be >= 2");
                }
            }
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction", "must be in (0, 1)");
        }
        if self.partition_mu.is_nan() || self.partition_mu < 1.0 {
            return bad("partition_mu", "must be >= 1");
        }
        if !(self.partition_sigma >= 0.0 && self.partition_sigma.is_finite()) {
            return bad("partition_sigma", "must be a finite value >= 0");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds", "duplicate seeds");
        }
        if !(0.0..=1.0).contains(&self.target_accuracy) {
            return bad("target_accuracy", "must be in [0, 1]");
        }
        if self.pretrain_rounds > self.rounds {
            return bad("pretrain_rounds", "cannot exceed `rounds`");
        }
        self.federation()
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn federation(&self) -> FederationConfig {
        FederationConfig {
            edges: self.edges,
            clients: self.clients,
            participation: self.participation,
            local_epochs: self.local_epochs,
            learning_rate: self.learning_rate as f32,
            batch_size: self.batch_size,
            client: ClientConfig {
                passes: self.passes,
                epsilon: self.epsilon,
            },
            rounds: self.rounds,
            aggregator: self.aggregator,
            uwaa_weighting: self.uwaa_weighting,
            buffer_mode: self.buffer_mode,
            stop_at: self.stop_at_target.then_some(self.target_accuracy),
            pretrain_rounds: self.pretrain_rounds,
        }
    }

    pub fn dropout(&self) -> DropoutRates {
        DropoutRates {
            conv: self.dropout_conv as f32,
            dense: self.dropout_dense as f32,
        }
    }

    pub fn synthetic_spec(&self, seed: u64) -> SyntheticBlinkSpec {
        SyntheticBlinkSpec {
            image_size: (self.image_height, self.image_width),
            num_samples: self.num_samples,
            noise_std: self.noise_std as f32,
            jitter_px: self.jitter_px,
            seed: self.data_seed.unwrap_or(seed),
        }
    }

    pub fn partition_spec(&self, seed: u64) -> PartitionSpec {
        PartitionSpec {
            num_parts: self.clients,
            mu: self.partition_mu,
            sigma: self.partition_sigma,
            sigma_is_variance: self.sigma_is_variance,
            seed,
        }
    }
}

/// Keys whose values differ between two configs, in key order.
pub fn diff_keys(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<(String, String, String)> {
    let (ta, tb) = (a.to_table(), b.to_table());
    let mut keys: Vec<&String> = ta.keys().chain(tb.keys()).collect();
    keys.sort();
    keys.dedup();
    let show = |v: Option<&Value>| v.map_or_else(|| "(unset)".to_string(), Value::to_string);
    keys.into_iter()
        .filter(|k| ta.get(*k) != tb.get(*k))
        .map(|k| (k.clone(), show(ta.get(k)), show(tb.get(k))))
        .collect()
}
