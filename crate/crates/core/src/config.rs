//! Run configuration file: a shape preset plus per-section overrides.
//!
//! ```json
//! {
//!   "preset": "toy",
//!   "model": { "layers": 4, "regions": { "threshold": 0.3 } },
//!   "train": { "learning_rate": 0.001, "max_steps": 800 },
//!   "generate": { "beam": 4, "max_len": 20 }
//! }
//! ```
//!
//! Every section is optional. `model` keys are merged over the preset;
//! `train` and `generate` keys over their defaults. The model's
//! `vocab_size` is replaced by the dataset vocabulary when training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::infer::GenerateConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generate: GenerateConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        Ok(Self {
            preset: name.to_owned(),
            model: ModelConfig::preset(name)?,
            train: TrainConfig::default(),
            generate: GenerateConfig::default(),
            data: None,
            out: None,
        })
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs: Vec<String> = self.model.validate().into_iter().map(|e| format!("model: {e}")).collect();
        errs.extend(self.train.validate().into_iter().map(|e| format!("train: {e}")));
        errs.extend(self.generate.validate().into_iter().map(|e| format!("generate: {e}")));
        errs
    }

    /// Parses, merges and validates, reporting every problem at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::Validation(vec![format!("config is not valid JSON: {e}")]))?;
        let Value::Object(mut root) = root else {
            return Err(Error::Validation(vec!["config must be a JSON object".into()]));
        };
        let mut errs = Vec::new();
        let preset = match root.remove("preset") {
            None => "toy".to_owned(),
            Some(Value::String(s)) => s,
            Some(other) => {
                errs.push(format!("preset must be a string, got {other}"));
                "toy".to_owned()
            }
        };
        let base = match ModelConfig::preset(&preset) {
            Ok(m) => m,
            Err(e) => {
                errs.push(e.to_string());
                ModelConfig::toy()
            }
        };
        let mut section = |key: &str, base: Value| -> Option<Value> {
            let mut merged = base;
            if let Some(over) = root.remove(key) {
                if !over.is_object() {
                    errs.push(format!("{key} must be an object"));
                    return None;
                }
                merge(&mut merged, over);
            }
            Some(merged)
        };
        let model_v = section("model", serde_json::to_value(&base).expect("config serializes"));
        let train_v = section("train", serde_json::to_value(TrainConfig::default()).expect("config serializes"));
        let gen_v = section("generate", serde_json::to_value(GenerateConfig::default()).expect("config serializes"));
        let path_of = |root: &mut serde_json::Map<String, Value>, key: &str, errs: &mut Vec<String>| match root.remove(key) {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => {
                errs.push(format!("{key} must be a path string"));
                None
            }
        };
        let data = path_of(&mut root, "data", &mut errs);
        let out = path_of(&mut root, "out", &mut errs);
        for key in root.keys() {
            errs.push(format!("unknown top-level key `{key}`"));
        }

        fn parse<T: serde::de::DeserializeOwned>(name: &str, v: Option<Value>, errs: &mut Vec<String>) -> Option<T> {
            serde_json::from_value(v?).map_err(|e| errs.push(format!("{name}: {e}"))).ok()
        }
        let model = parse::<ModelConfig>("model", model_v, &mut errs);
        let train = parse::<TrainConfig>("train", train_v, &mut errs);
        let generate = parse::<GenerateConfig>("generate", gen_v, &mut errs);
        if let Some(m) = &model {
            errs.extend(m.validate().into_iter().map(|e| format!("model: {e}")));
        }
        if let Some(t) = &train {
            errs.extend(t.validate().into_iter().map(|e| format!("train: {e}")));
        }
        if let Some(g) = &generate {
            errs.extend(g.validate().into_iter().map(|e| format!("generate: {e}")));
        }
        match (model, train, generate) {
            (Some(model), Some(train), Some(generate)) if errs.is_empty() => Ok(Self {
                preset,
                model,
                train,
                generate,
                data,
                out,
            }),
            _ => Err(Error::Validation(errs)),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Recursive object merge; non-object values replace.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
