//! Run configuration as a flat JSON object with dotted keys
//! (`"crf.iterations": 5`). Missing keys take their defaults; unknown keys
//! and type mismatches are rejected by name.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::crf::CrfConfig;
use crate::discriminator::DiscriminatorConfig;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset root in `<case_id>/{t1,t1c,t2,flair,labels}.mvol` layout.
    pub dir: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub crf: CrfConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, value) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), value.clone());
            } else {
                node = node
                    .entry(part)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("flattened keys never collide with leaves");
            }
        }
    }
    Value::Object(root)
}

fn kind(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn compatible(default: &Value, given: &Value) -> bool {
    match (default, given) {
        // optional fields default to null
        (Value::Null, _) | (_, Value::Null) => true,
        _ => kind(default) == kind(given),
    }
}

impl RunConfig {
    /// Canonical flat form: sorted dotted keys to JSON leaves.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten(
            "",
            &serde_json::to_value(self).expect("config serializes"),
            &mut out,
        );
        out
    }

    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut merged = Self::default().to_flat();
        for (key, value) in flat {
            let Some(default) = merged.get(key) else {
                return Err(Error::config(key.clone(), "unknown key"));
            };
            if !compatible(default, value) {
                return Err(Error::config(
                    key.clone(),
                    format!("expected {}, found {}", kind(default), kind(value)),
                ));
            }
            merged.insert(key.clone(), value.clone());
        }
        let config = Self::deserialize_sections(&unflatten(&merged))?;
        config.validate()?;
        Ok(config)
    }

    fn deserialize_sections(value: &Value) -> Result<Self> {
        fn section<T: serde::de::DeserializeOwned>(value: &Value, name: &str) -> Result<T> {
            serde_json::from_value(value[name].clone())
                .map_err(|e| Error::config(name, e.to_string()))
        }
        Ok(Self {
            generator: section(value, "generator")?,
            discriminator: section(value, "discriminator")?,
            crf: section(value, "crf")?,
            train: section(value, "train")?,
            data: section(value, "data")?,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
        match value {
            Value::Object(map) => Self::from_flat(&map),
            other => Err(Error::config(
                "<document>",
                format!("expected an object, found {}", kind(&other)),
            )),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_flat()).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.crf.validate()?;
        self.train.validate()
    }

    /// FNV-1a 64 over the compact canonical flat JSON.
    pub fn hash(&self) -> u64 {
        let text = serde_json::to_string(&self.to_flat()).expect("config serializes");
        text.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_is_stable() {
        let c = RunConfig::default();
        let text = c.to_json();
        assert!(text.contains("\"crf.iterations\": 5"));
        assert!(text.contains("\"train.alpha\": 5.0"));
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), text);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn partial_documents_take_defaults() {
        let c = RunConfig::from_json(r#"{"train.epochs": 3, "data.dir": "cases"}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.data.dir.as_deref(), Some("cases"));
        assert_eq!(c.crf, CrfConfig::default());
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn rejects_unknown_and_mistyped_keys_by_name() {
        let key = |text: &str| match RunConfig::from_json(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(key(r#"{"train.alpah": 5}"#), "train.alpah");
        assert_eq!(key(r#"{"crf.iterations": "five"}"#), "crf.iterations");
        assert_eq!(key(r#"{"train.beta1": 1.5}"#), "train.beta1");
        assert_eq!(key(r#"{"crf.iterations": 0}"#), "crf.iterations");
        assert_eq!(key("[1]"), "<document>");
        assert_eq!(key(r#"{"generator.base_channels": -1}"#), "generator");
    }

    #[test]
    fn hash_is_a_fixed_function_of_the_document() {
        // FNV-1a 64 reference values
        let fnv = |s: &str| {
            s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
                (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
            })
        };
        assert_eq!(fnv(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv("a"), 0xaf63_dc4c_8601_ec8c);
        let mut c = RunConfig::default();
        let h = c.hash();
        c.crf.iterations = 4;
        assert_ne!(c.hash(), h);
    }
}
