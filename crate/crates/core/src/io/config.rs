use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datasets::DatasetSpec;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::sampling::SamplerConfig;
use crate::training::TrainConfig;

/// Everything needed to replay a run. Missing keys take their defaults,
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub data: DatasetSpec,
    pub seed: u64,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            data: DatasetSpec::default(),
            seed: 0,
            out_dir: "runs/deepflow".into(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.k)?;
        self.sampler.validate()?;
        self.data.validate()?;
        if self.model.geometry != self.data.geometry() {
            return Err(Error::Config(format!(
                "model.geometry {:?} does not match dataset {:?} ({:?})",
                self.model.geometry,
                self.data.name,
                self.data.geometry()
            )));
        }
        let data_classes = self.data.num_classes();
        if self.model.num_classes != 0 && self.model.num_classes != data_classes {
            return Err(Error::Config(format!(
                "model.num_classes = {} but the dataset has {data_classes} classes (use 0 for unconditional)",
                self.model.num_classes
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        with_overrides(self, overrides)
    }
}

/// Apply `section.key=value` overrides to any configuration document. Values
/// are parsed as JSON, falling back to a plain string.
pub fn with_overrides<T, S>(cfg: &T, overrides: &[S]) -> Result<T>
where
    T: Serialize + DeserializeOwned + Clone,
    S: AsRef<str>,
{
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut doc = serde_json::to_value(cfg)?;
    for o in overrides {
        apply_override(&mut doc, o.as_ref())?;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(format!("after overrides: {e}")))
}

pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    for key in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(key))
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
    }
    *node = value;
    Ok(())
}

/// Parse a configuration document; syntax and schema errors name the byte
/// offset where parsing stopped.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    parse_json(text)
}

pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let offset = byte_offset(text, e.line(), e.column());
        Error::Config(format!("at byte {offset}: {e}"))
    })
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    load_json(path)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_json(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = RunConfig::default();
        let back = parse_run_config(&cfg.to_json()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.to_json(), back.to_json());
    }

    #[test]
    fn empty_document_is_all_defaults() {
        assert_eq!(parse_run_config("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_run_config(r#"{"train": {"stepz": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        let err = RunConfig::default().with_overrides(&["train.stepz=3"]).unwrap_err();
        assert!(err.to_string().contains("stepz"));
    }

    #[test]
    fn malformed_json_names_byte_offset() {
        let text = "{\n  \"seed\": 1,\n  \"train\": {\"steps\": }\n}";
        let err = parse_run_config(text).unwrap_err().to_string();
        let at = text.find("}\n}").unwrap();
        assert!(err.contains(&format!("at byte {at}")), "{err}");
    }

    #[test]
    fn overrides() {
        let cfg = RunConfig::default()
            .with_overrides(&["train.steps=10", "seed=7", "out_dir=/tmp/x", "model.vera_variant=additive"])
            .unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.out_dir, "/tmp/x");
        assert_eq!(cfg.model.vera_variant, crate::network::VeraVariant::Additive);
        assert!(RunConfig::default().with_overrides(&["train.steps"]).is_err());
    }

    #[test]
    fn geometry_must_match_data() {
        let mut cfg = RunConfig::default();
        cfg.data.name = crate::datasets::DatasetName::TinyBars;
        assert!(cfg.validate().is_err());
    }
}
