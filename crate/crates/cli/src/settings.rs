//! Experiment config resolution: JSON file, then `--set` overrides, then
//! the named flags.

use std::path::PathBuf;

use serde_json::{json, Value};
use sgxp_core::dataio::ExperimentConfig;

use crate::error::{invalid, CliResult};

#[derive(clap::Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON experiment config with keys mode, segmented, model, schedule,
    /// augmentation and seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key by dotted path, e.g.
    /// `--set schedule.classifier.finetune_epochs=5`. The value is parsed as
    /// JSON and falls back to a plain string.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Top-level seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// multiclass, covid_generalization_2fold or source_bias.
    #[arg(long)]
    pub mode: Option<String>,
    /// Classify lung ROI crops instead of whole images.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", value_name = "BOOL")]
    pub segmented: Option<bool>,
}

fn parse_override(raw: &str) -> CliResult<(String, Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| invalid(format!("--set {raw:?}: expected KEY=VALUE")))?;
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
    Ok((key.trim().to_string(), value))
}

impl ConfigArgs {
    /// Resolved, validated config. A config without `mode` defaults to
    /// multiclass.
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        let mut root = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| invalid(format!("config {}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| invalid(format!("config {}: {e}", p.display())))?
            }
            None => json!({}),
        };
        let obj = root
            .as_object_mut()
            .ok_or_else(|| invalid("experiment config must be a JSON object"))?;
        obj.entry("mode").or_insert_with(|| json!("multiclass"));
        let mut overrides = self.set.iter().map(|s| parse_override(s)).collect::<CliResult<Vec<_>>>()?;
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), json!(seed)));
        }
        if let Some(mode) = &self.mode {
            overrides.push(("mode".into(), json!(mode)));
        }
        if let Some(seg) = self.segmented {
            overrides.push(("segmented".into(), json!(seg)));
        }
        Ok(ExperimentConfig::from_value_with_overrides(root, &overrides)?)
    }
}
