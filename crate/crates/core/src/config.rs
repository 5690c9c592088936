//! Run configuration and its canonical fingerprint.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::EncoderArch;
use crate::error::{Error, Result};
use crate::evaluation::PromptMode;
use crate::synth::DatasetSpec;
use crate::training::{BindConfig, DistillConfig, PretrainConfig};

/// Canonical JSON: object keys sorted, no whitespace, numbers in shortest
/// round-trip form.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value keeps object keys in a BTreeMap, so re-serializing
    // through it sorts them.
    let v = serde_json::to_value(value)?;
    Ok(serde_json::to_string(&v)?)
}

/// Hex SHA-256 of the canonical JSON form.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let digest = Sha256::digest(canonical_json(value)?.as_bytes());
    Ok(hex(&digest))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub prompt_mode: PromptMode,
    pub shots: Vec<usize>,
    pub probe_seeds: Vec<u64>,
    /// Also train and evaluate the ablation variants.
    pub ablations: bool,
    /// Order in which the modality-count sweep grows its subset; its first
    /// two entries form the tracked pair.
    pub sweep_order: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            prompt_mode: PromptMode::Multi,
            shots: vec![1, 5, 10],
            probe_seeds: (0..5).collect(),
            ablations: false,
            sweep_order: ["xray", "ecg", "retina", "path", "ct"].map(String::from).to_vec(),
        }
    }
}

/// Everything that determines a run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub master_seed: u64,
    pub dataset: DatasetSpec,
    pub arch: EncoderArch,
    pub pretrain: PretrainConfig,
    pub bind: BindConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    /// Bind and distill checkpoints are written every this many steps
    /// (0 disables intermediate checkpoints).
    pub checkpoint_every: usize,
    /// Parent of the run directory; not part of the fingerprint.
    pub output_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 0,
            dataset: DatasetSpec::default(),
            arch: EncoderArch::default(),
            pretrain: PretrainConfig::default(),
            bind: BindConfig::default(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
            checkpoint_every: 500,
            output_dir: "runs".into(),
        }
    }
}

impl RunConfig {
    /// Default configuration with both the training and the dataset seed set.
    pub fn with_seed(seed: u64) -> Self {
        let mut c = RunConfig {
            master_seed: seed,
            ..RunConfig::default()
        };
        c.dataset.seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.bind.validate()?;
        self.distill.validate()?;
        if self.eval.shots.contains(&0) {
            return Err(Error::Config("eval.shots must be positive".into()));
        }
        if self.eval.probe_seeds.is_empty() {
            return Err(Error::Config("eval.probe_seeds must not be empty".into()));
        }
        if let Some(subset) = &self.bind.modalities {
            let known = self.dataset.modality_ids();
            if let Some(m) = subset.iter().find(|m| !known.contains(m)) {
                return Err(Error::Config(format!("bind.modalities names unknown modality '{m}'")));
            }
        }
        Ok(())
    }

    /// Fingerprint of everything except `output_dir`.
    pub fn fingerprint(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = String::new();
        fingerprint(&c)
    }

    /// Modalities that take part in binding, in id order.
    pub fn bound_modalities(&self) -> Vec<String> {
        let mut ids = match &self.bind.modalities {
            Some(s) => s.clone(),
            None => self.dataset.modality_ids(),
        };
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// Sets `path` (dot-separated keys) inside a JSON document to `value`, which
/// is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(doc: &mut serde_json::Value, path: &str, value: &str) -> Result<()> {
    let parsed = serde_json::from_str(value).unwrap_or_else(|_| serde_json::Value::String(value.to_string()));
    let mut cur = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, k) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("'{}' is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(k.to_string(), parsed);
            return Ok(());
        }
        cur = obj.entry(k.to_string()).or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_sorts_keys() {
        let v: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":{"d":2.5,"c":[1,2]}}"#).unwrap();
        assert_eq!(canonical_json(&v).unwrap(), r#"{"a":{"c":[1,2],"d":2.5},"b":1}"#);
    }

    #[test]
    fn fingerprint_ignores_output_dir_and_key_order() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.fingerprint().unwrap(), b.fingerprint().unwrap());
        b.bind.lambda = 0.0;
        assert_ne!(a.fingerprint().unwrap(), b.fingerprint().unwrap());

        let json = serde_json::to_value(&a).unwrap();
        let reordered: RunConfig = serde_json::from_str(&canonical_json(&json).unwrap()).unwrap();
        assert_eq!(reordered.fingerprint().unwrap(), a.fingerprint().unwrap());
    }

    #[test]
    fn overrides_and_partial_documents() {
        let mut doc = serde_json::json!({"bind": {"lambda": 10.0}});
        apply_override(&mut doc, "bind.lambda", "0").unwrap();
        apply_override(&mut doc, "bind.modalities", r#"["xray","ecg"]"#).unwrap();
        let c: RunConfig = serde_json::from_value(doc).unwrap();
        assert_eq!(c.bind.lambda, 0.0);
        assert_eq!(c.bound_modalities(), vec!["ecg".to_string(), "xray".to_string()]);
        assert_eq!(c.pretrain, PretrainConfig::default());
    }

    #[test]
    fn rejects_unknown_subset_modality() {
        let mut c = RunConfig::default();
        c.bind.modalities = Some(vec!["mri".into()]);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
