//! Run configuration: JSON documents layered over per-method presets,
//! with repeatable `--set key=value` overrides. Unknown keys are
//! rejected; the effective configuration is echoed next to every run's
//! artifacts so any run can be reproduced bit-exactly.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::VitConfig;
use crate::curriculum::CurriculumConfig;
use crate::error::{Error, Result};
use crate::ncut::AffinityConfig;
use crate::synthdata::GenConfig;
use crate::trainer::{Method, TrainConfig};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub train: TrainConfig,
    pub vit: VitConfig,
    pub affinity: AffinityConfig,
    pub curriculum: CurriculumConfig,
}

impl RunConfig {
    pub fn preset(method: Method) -> Self {
        RunConfig {
            method,
            seed: 0,
            train: TrainConfig::preset(method),
            vit: VitConfig::default(),
            affinity: AffinityConfig::default(),
            curriculum: CurriculumConfig::corruption_preset(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.vit.validate()?;
        self.affinity.validate()?;
        self.curriculum.validate()
    }
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_n() -> usize {
    16
}

fn default_shape() -> [usize; 3] {
    [3, 32, 32]
}

fn default_fraction() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GenDataConfig {
    #[serde(default = "default_name")]
    pub dataset_name: String,
    #[serde(rename = "K", default = "default_k")]
    pub k: usize,
    #[serde(default = "default_n")]
    pub n_per_class_per_domain: usize,
    #[serde(default = "default_shape")]
    pub image_shape: [usize; 3],
    #[serde(default)]
    pub seed: u64,
    /// Number of labelled-eligible classes (the first ones).
    #[serde(default = "default_base_count")]
    pub base_class_count: usize,
    #[serde(default = "default_fraction")]
    pub labelled_fraction: f64,
}

fn default_k() -> usize {
    8
}

fn default_base_count() -> usize {
    4
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            dataset_name: default_name(),
            k: default_k(),
            n_per_class_per_domain: default_n(),
            image_shape: default_shape(),
            seed: 0,
            base_class_count: default_base_count(),
            labelled_fraction: default_fraction(),
        }
    }
}

impl GenDataConfig {
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            k: self.k,
            n_per_class_per_domain: self.n_per_class_per_domain,
            image_shape: self.image_shape,
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> crate::synthdata::SplitSpec {
        crate::synthdata::SplitSpec::first_n_base(self.base_class_count, self.k, self.labelled_fraction)
    }
}

/// Recursive merge: objects merge key-wise, everything else replaces.
pub fn merge_json(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn find_leaf_paths(value: &Value, key: &str, prefix: &mut Vec<String>, hits: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = value {
        for (k, v) in map {
            prefix.push(k.clone());
            if k == key {
                hits.push(prefix.clone());
            }
            find_leaf_paths(v, key, prefix, hits);
            prefix.pop();
        }
    }
}

/// Applies one `key=value` override. The key is either a dotted path
/// (`train.beta1`) or a bare field name resolved to a unique location in
/// the document. The value parses as JSON where possible, else a string.
pub fn apply_override(doc: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));

    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else {
        let mut hits = Vec::new();
        find_leaf_paths(doc, key, &mut Vec::new(), &mut hits);
        match hits.len() {
            0 => return Err(Error::Config(format!("unknown config key '{key}'"))),
            1 => hits.pop().unwrap(),
            n => {
                return Err(Error::Config(format!(
                    "config key '{key}' is ambiguous ({n} locations); use a dotted path"
                )))
            }
        }
    };

    let mut cursor = doc;
    for (i, part) in path.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{}' is not an object", path[..i].join("."))))?;
        if i + 1 == path.len() {
            if !map.contains_key(part) {
                return Err(Error::Config(format!("unknown config key '{key}'")));
            }
            map.insert(part.clone(), value);
            return Ok(());
        }
        cursor = map
            .get_mut(part)
            .ok_or_else(|| Error::Config(format!("unknown config key '{key}'")))?;
    }
    unreachable!("path is never empty")
}

/// Builds the effective run configuration: preset for the method, merged
/// with an optional JSON file, then `--set` overrides, then validation.
pub fn resolve_run_config(
    method: Method,
    config_file: Option<&std::path::Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<RunConfig> {
    let mut doc = serde_json::to_value(RunConfig::preset(method))?;
    if let Some(path) = config_file {
        let file: Value = serde_json::from_slice(&std::fs::read(path)?)?;
        merge_json(&mut doc, &file);
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg: RunConfig =
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    if cfg.method != method {
        return Err(Error::Config(format!(
            "config file method '{}' conflicts with --method '{}'",
            cfg.method.name(),
            method.name()
        )));
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Same layering for the dataset generator configuration.
pub fn resolve_gen_config(
    config_file: Option<&std::path::Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> Result<GenDataConfig> {
    let mut doc = serde_json::to_value(GenDataConfig::default())?;
    if let Some(path) = config_file {
        let file: Value = serde_json::from_slice(&std::fs::read(path)?)?;
        merge_json(&mut doc, &file);
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let mut cfg: GenDataConfig =
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("bad config: {e}")))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Hex SHA-256 of a byte string; used for config hashes and checkpoint ids.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
