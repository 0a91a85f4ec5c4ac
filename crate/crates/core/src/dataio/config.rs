use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augmentation::AugmentationConfig;
use crate::classification::{ClassifierConfig, TrainSchedule};
use crate::error::{Error, Result};
use crate::segmentation::{scaled_roi_size, SegTrainConfig, UNetConfig};
use crate::seed::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    /// normal / lung_opacity / covid19 on a train/val/test split.
    Multiclass,
    /// covid19 vs the rest, trained on one source fold and tested on the other.
    #[serde(rename = "covid_generalization_2fold")]
    CovidGeneralization2Fold,
    /// Predict the image source (cohen / rsna / other).
    SourceBias,
}

impl ExperimentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentMode::Multiclass => "multiclass",
            ExperimentMode::CovidGeneralization2Fold => "covid_generalization_2fold",
            ExperimentMode::SourceBias => "source_bias",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Working size images are resized to on load.
    pub input_size: usize,
    pub unet: UNetConfig,
    /// `input_size` here is derived: the working size, or the ROI size
    /// when `segmented`.
    pub classifier: ClassifierConfig,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_size: 64,
            unet: UNetConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub segmentation: SegTrainConfig,
    /// `seed` is derived from the experiment seed.
    pub classifier: TrainSchedule,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub segmentation: AugmentationConfig,
    pub classifier: AugmentationConfig,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            segmentation: AugmentationConfig::segmentation(),
            classifier: AugmentationConfig::classification(),
        }
    }
}

/// One experiment run. Unknown keys are rejected so typos fail loudly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: ExperimentMode,
    #[serde(default)]
    pub segmented: bool,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub augmentation: AugmentationSpec,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn new(mode: ExperimentMode) -> Self {
        ExperimentConfig {
            mode,
            segmented: false,
            model: ModelSpec::default(),
            schedule: ScheduleSpec::default(),
            augmentation: AugmentationSpec::default(),
            seed: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))
    }

    /// Parses `value`, applies dotted-path overrides (`a.b.c=json`), fills
    /// derived fields and validates.
    pub fn from_value_with_overrides(mut value: Value, overrides: &[(String, Value)]) -> Result<Self> {
        for (path, v) in overrides {
            set_path(&mut value, path, v.clone())?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::config(format!("experiment config: {e}")))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Input size the classifier sees.
    pub fn classifier_input_size(&self) -> usize {
        if self.segmented {
            scaled_roi_size(self.model.input_size)
        } else {
            self.model.input_size
        }
    }

    /// Copy with derived fields filled in: sizes follow `model.input_size`
    /// and `segmented`, the classifier seed follows `seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.unet.input_size = c.model.input_size;
        c.model.classifier.input_size = c.classifier_input_size();
        c.schedule.classifier.seed = derive_seed(c.seed, "classifier-schedule");
        c
    }

    pub fn validate(&self) -> Result<()> {
        let size = self.model.input_size;
        if size < 8 {
            return Err(Error::config(format!("model.input_size {size} is below 8")));
        }
        self.model.unet.validate()?;
        self.model.classifier.validate()?;
        self.schedule.segmentation.validate()?;
        self.schedule.classifier.validate()?;
        self.augmentation.segmentation.validate()?;
        self.augmentation.classifier.validate()?;
        let r = self.resolved();
        if r.model.classifier.input_size != self.model.classifier.input_size
            || r.model.unet.input_size != self.model.unet.input_size
        {
            return Err(Error::config("derived sizes are stale; validate a resolved config"));
        }
        Ok(())
    }
}

/// Sets `path` (dot separated) inside a JSON object, creating objects on
/// the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::arg(format!("bad override path {path:?}")));
    }
    let mut cur = root;
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::arg(format!("override {path:?}: {} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one key")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_value_with_overrides(json!({"mode": "multiclass"}), &[]).unwrap();
        assert_eq!(c.mode, ExperimentMode::Multiclass);
        assert!(!c.segmented);
        assert_eq!(c.model.classifier.input_size, 64);
    }

    #[test]
    fn segmented_classifier_sees_roi_size() {
        let c = ExperimentConfig::from_value_with_overrides(
            json!({"mode": "source_bias", "segmented": true, "model": {"input_size": 64}}),
            &[],
        )
        .unwrap();
        assert_eq!(c.model.classifier.input_size, 48);
        assert_eq!(c.model.unet.input_size, 64);
    }

    #[test]
    fn top_level_keys_round_trip() {
        let c = ExperimentConfig::new(ExperimentMode::CovidGeneralization2Fold).resolved();
        let v = serde_json::to_value(&c).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        keys.sort();
        assert_eq!(keys, ["augmentation", "mode", "model", "schedule", "seed", "segmented"]);
        assert_eq!(v["mode"], "covid_generalization_2fold");
        let back: ExperimentConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_and_mode_are_rejected() {
        let e = ExperimentConfig::from_value_with_overrides(json!({"mode": "multiclass", "sed": 1}), &[]);
        assert!(matches!(e, Err(Error::Config(_))));
        let e = ExperimentConfig::from_value_with_overrides(json!({"mode": "binary"}), &[]);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn overrides_win_over_file_values() {
        let c = ExperimentConfig::from_value_with_overrides(
            json!({"mode": "multiclass", "seed": 3, "schedule": {"classifier": {"warmup_epochs": 9}}}),
            &[
                ("seed".into(), json!(7)),
                ("schedule.classifier.finetune_epochs".into(), json!(2)),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.schedule.classifier.warmup_epochs, 9);
        assert_eq!(c.schedule.classifier.finetune_epochs, 2);
        assert_eq!(c.schedule.classifier.seed, derive_seed(7, "classifier-schedule"));
    }

    #[test]
    fn invalid_nested_value_fails_validation() {
        let e = ExperimentConfig::from_value_with_overrides(
            json!({"mode": "multiclass"}),
            &[("model.classifier.dropout_rate".into(), json!(1.5))],
        );
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn override_through_scalar_is_an_error() {
        let mut v = json!({"seed": 1});
        assert!(set_path(&mut v, "seed.x", json!(1)).is_err());
        assert!(set_path(&mut v, "a..b", json!(1)).is_err());
    }
}
