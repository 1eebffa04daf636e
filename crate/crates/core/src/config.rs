//! Run configuration: defaults, a flat `key = value` file, then flag overrides.
//!
//! Grammar, one setting per line:
//!
//! ```text
//! # comment
//! section.field = value      # trailing comments allowed
//! ```
//!
//! Keys are the dotted field paths printed by [`RunConfig::dump`]; lists are
//! comma separated. Unknown or repeated keys are errors.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{DEFAULT_KS, DEFAULT_SUBSET_KS};
use crate::model::ModelConfig;
use crate::synthcorpus::CorpusConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub subset_ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            subset_ks: DEFAULT_SUBSET_KS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Corpus generation seed.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// `model.d_raw` always follows the corpus render width.
const DERIVED_KEYS: [&str; 1] = ["model.d_raw"];

/// Parses the flat file format into ordered `(key, value)` pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
        let k = k.trim();
        let v = v.trim().trim_matches('"');
        if k.is_empty() || !k.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.') {
            return Err(Error::InvalidConfig(format!("line {}: bad key {k:?}", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::InvalidConfig(format!("line {}: duplicate key {k}", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn leaf_value(key: &str, old: &Value, text: &str) -> Result<Value> {
    let bad = || Error::InvalidConfig(format!("{key}: cannot parse {text:?}"));
    Ok(match old {
        Value::Bool(_) => Value::Bool(text.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(text.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => {
            let f: f64 = text.parse().map_err(|_| bad())?;
            if !f.is_finite() {
                return Err(bad());
            }
            Value::from(f)
        }
        Value::String(_) => Value::String(text.to_string()),
        Value::Array(_) => Value::Array(
            text.split(',')
                .map(|s| s.trim().parse::<u64>().map(Value::from).map_err(|_| bad()))
                .collect::<Result<_>>()?,
        ),
        _ => return Err(Error::InvalidConfig(format!("{key} is a section, not a setting"))),
    })
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, child, out);
            }
        }
        Value::Array(items) => {
            let s: Vec<String> = items.iter().map(Value::to_string).collect();
            out.push((prefix.to_string(), s.join(",")));
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunConfig {
    /// Sets one dotted key. Type follows the field's current value.
    pub fn set(&mut self, key: &str, text: &str) -> Result<()> {
        if DERIVED_KEYS.contains(&key) {
            return Err(Error::InvalidConfig(format!("{key} is derived from corpus.render.d_raw")));
        }
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = node
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::InvalidConfig(format!("unknown key {key}")))?;
        }
        *node = leaf_value(key, node, text)?;
        *self = serde_json::from_value(tree).map_err(|e| Error::InvalidConfig(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Defaults, then `file` settings, then `overrides`; validated.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file {
            for (k, v) in parse_kv(text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.model.d_raw = cfg.corpus.render.d_raw;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.model.d_raw != self.corpus.render.d_raw {
            return Err(Error::InvalidConfig("model.d_raw must equal corpus.render.d_raw".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) || self.eval.subset_ks.contains(&0) {
            return Err(Error::InvalidConfig("eval K values must be positive".into()));
        }
        Ok(())
    }

    /// Effective configuration in the file format, keys sorted.
    pub fn dump(&self) -> String {
        let mut pairs = Vec::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut pairs);
        pairs.retain(|(k, _)| !DERIVED_KEYS.contains(&k.as_str()));
        pairs.sort();
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PoolStrategy;
    use crate::model::SoftMode;

    #[test]
    fn grammar() {
        let kv = parse_kv("# header\n\ntrain.batch = 16  # small\nmodel.soft_mode=\"universal\"\n").unwrap();
        assert_eq!(
            kv,
            vec![
                ("train.batch".to_string(), "16".to_string()),
                ("model.soft_mode".to_string(), "universal".to_string())
            ]
        );
        assert!(parse_kv("no equals sign").is_err());
        assert!(parse_kv("a = 1\na = 2").is_err());
        assert!(parse_kv("Bad-Key = 1").is_err());
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let file = "train.batch = 16\ntrain.lambda = 30\nmodel.pooling = last\n";
        let flags = vec![("train.batch".to_string(), "8".to_string())];
        let c = RunConfig::resolve(Some(file), &flags).unwrap();
        assert_eq!(c.train.batch, 8);
        assert_eq!(c.train.lambda, 30.0);
        assert_eq!(c.model.pooling, PoolStrategy::Last);
        assert_eq!(c.train.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(RunConfig::resolve(Some("train.nope = 1"), &[]).is_err());
        assert!(RunConfig::resolve(Some("train = 1"), &[]).is_err());
        assert!(RunConfig::resolve(Some("model.d_raw = 8"), &[]).is_err());
        assert!(RunConfig::resolve(Some("model.soft_mode = sometimes"), &[]).is_err());
        assert!(RunConfig::resolve(Some("train.batch = 1"), &[]).is_err());
        assert!(RunConfig::resolve(Some("train.lambda = -1"), &[]).is_err());
        assert!(RunConfig::resolve(Some("corpus.candidates = 601"), &[]).is_err());
        assert!(RunConfig::resolve(Some("train.batch = 2.5"), &[]).is_err());
    }

    #[test]
    fn dump_round_trips() {
        let mut c = RunConfig::default();
        c.set("model.soft_mode", "none").unwrap();
        c.set("eval.ks", "1,3").unwrap();
        c.set("corpus.render.noise_std", "0.05").unwrap();
        c.set("corpus.render.d_raw", "16").unwrap();
        c.model.d_raw = 16;
        let text = c.dump();
        assert!(text.contains("model.soft_mode = none\n"));
        assert!(!text.contains("model.d_raw"));
        let back = RunConfig::resolve(Some(&text), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model.soft_mode, SoftMode::None);
    }
}
