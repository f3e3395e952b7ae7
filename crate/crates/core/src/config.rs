//! Run configuration as a flat JSON object with dotted keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::eval::TrackerConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub rhos: Vec<f64>,
    pub seeds: Vec<u64>,
    pub lr_drop_fraction: f64,
    /// Epochs whose mean training IoU counts as "early".
    pub early_epochs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            rhos: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            seeds: vec![0, 1, 2],
            lr_drop_fraction: 0.2,
            early_epochs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub sweep: SweepConfig,
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

pub fn flatten(v: &Value) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    flatten_into("", v, &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let parts: Vec<&str> = key.split('.').collect();
        let mut node = &mut root;
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("dotted prefixes are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        flatten(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Applies dotted-key values on top of the defaults; unknown keys are rejected.
    pub fn from_flat(values: &Map<String, Value>) -> Result<Self> {
        let mut flat = Self::default().to_flat();
        for (k, v) in values {
            match flat.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        let cfg: Self = serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        match v {
            Value::Object(m) => Self::from_flat(&m),
            _ => Err(Error::Config(format!("{}: expected a JSON object", path.display()))),
        }
    }

    /// `key=value` overrides; values parse as JSON, falling back to a plain string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut m: Map<String, Value> = self.to_flat().into_iter().collect();
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            if !m.contains_key(k) {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
            m.insert(k.to_string(), value);
        }
        Self::from_flat(&m)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        if self.sweep.seeds.is_empty() || self.sweep.rhos.is_empty() {
            return Err(Error::Config("sweep needs at least one rho and one seed".into()));
        }
        if !(self.tracker.template_factor >= 1.0 && self.tracker.search_factor >= 1.0) {
            return Err(Error::Config("tracker crop factors must be at least 1".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let m: Map<String, Value> = self.to_flat().into_iter().collect();
        serde_json::to_string_pretty(&Value::Object(m)).expect("config serializes") + "\n"
    }

    /// Writes the resolved flat config as `dir/config.json`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.json");
        fs::write(&p, self.to_json()).map_err(|e| Error::io(p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_roundtrip() {
        let cfg = RunConfig::default();
        let m: Map<String, Value> = cfg.to_flat().into_iter().collect();
        assert!(m.contains_key("train.sampler.rho"));
        assert!(m.contains_key("train.model.encoder.embed_dim"));
        assert_eq!(RunConfig::from_flat(&m).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut m = Map::new();
        m.insert("train.sampler.rhoo".into(), Value::from(0.5));
        assert!(RunConfig::from_flat(&m).unwrap_err().is_config());
        assert!(RunConfig::default().with_overrides(&["nope=1".into()]).is_err());
    }

    #[test]
    fn overrides_apply_and_validate() {
        let cfg = RunConfig::default()
            .with_overrides(&["train.sampler.rho=0.5".into(), "train.model.head=corner".into()])
            .unwrap();
        assert_eq!(cfg.train.sampler.rho, 0.5);
        assert_eq!(cfg.train.model.head, crate::heads::HeadKind::Corner);
        assert!(RunConfig::default().with_overrides(&["train.sampler.rho=1.5".into()]).is_err());
        assert!(RunConfig::default().with_overrides(&["train.epochs=\"x\"".into()]).is_err());
    }

    #[test]
    fn resolved_file_reloads_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default().with_overrides(&["data.seed=7".into()]).unwrap();
        cfg.write_resolved(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&dir.path().join("config.json")).unwrap(), cfg);
    }
}
