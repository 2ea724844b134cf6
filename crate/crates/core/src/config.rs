//! Training configuration and its flat `key = value` file format.
//!
//! A config file holds dotted keys, one per line:
//!
//! ```text
//! stage1.epochs = 15
//! stage2.tau = 0.3
//! encoder.dropout_p = 0.1
//! ```
//!
//! Missing keys keep their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::tokenizer::DEFAULT_MASK_RATE;

/// Encoder architecture; the vocabulary size comes from the vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let e = EncoderConfig::new(5);
        Self {
            d_model: e.d_model,
            n_layers: e.n_layers,
            n_heads: e.n_heads,
            d_ff: e.d_ff,
            max_len: e.max_len,
            dropout_p: e.dropout_p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch: usize,
    pub tau: f64,
    pub lambda: f64,
    pub lr: f64,
    pub seed: u64,
    pub mask_rate: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch: 64,
            tau: 0.1,
            lambda: 1.0,
            lr: 5e-4,
            seed: 0,
            mask_rate: DEFAULT_MASK_RATE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch: usize,
    pub tau: f64,
    pub lambda2: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub seed: u64,
    pub kshot: usize,
    /// Include the supervised contrastive term.
    pub scl: bool,
    /// Add the stage-1 objective on corpus batches at every step.
    pub joint: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 16,
            tau: 0.1,
            lambda2: 0.03,
            epsilon: 0.1,
            lr: 1e-3,
            seed: 0,
            kshot: 5,
            scl: true,
            joint: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: ArchConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
}

impl TrainConfig {
    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        let a = &self.encoder;
        EncoderConfig {
            d_model: a.d_model,
            n_layers: a.n_layers,
            n_heads: a.n_heads,
            d_ff: a.d_ff,
            max_len: a.max_len,
            dropout_p: a.dropout_p,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.encoder_config(5).validate()?;
        let (s1, s2) = (&self.stage1, &self.stage2);
        if s1.batch < 2 || s2.batch < 1 {
            return bad("stage1.batch must be >= 2 and stage2.batch >= 1".into());
        }
        for (key, tau) in [("stage1.tau", s1.tau), ("stage2.tau", s2.tau)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return bad(format!("{key} must be positive, got {tau}"));
            }
        }
        for (key, lr) in [("stage1.lr", s1.lr), ("stage2.lr", s2.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{key} must be positive, got {lr}"));
            }
        }
        if !(s1.lambda >= 0.0 && s2.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if !(0.0..1.0).contains(&s2.epsilon) {
            return bad(format!("stage2.epsilon must lie in [0, 1), got {}", s2.epsilon));
        }
        if !(s1.mask_rate > 0.0 && s1.mask_rate <= 1.0) {
            return bad(format!("stage1.mask_rate must lie in (0, 1], got {}", s1.mask_rate));
        }
        if s1.seed > i64::MAX as u64 || s2.seed > i64::MAX as u64 {
            return bad("seeds must fit in 63 bits".into());
        }
        if s2.kshot == 0 {
            return bad("stage2.kshot must be positive".into());
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every key with its current value, one `key = value` line each, in
    /// declaration order.
    pub fn to_flat_string(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut out = String::new();
        for section in ["encoder", "stage1", "stage2"] {
            let table = value[section].as_table().expect("section table");
            for (key, v) in table {
                out.push_str(&format!("{section}.{key} = {v}\n"));
            }
        }
        out
    }

    /// Replaces the value of one dotted key, parsing `raw` as a config value.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let (section, field) = key
            .split_once('.')
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let mut value = toml::Value::try_from(&*self).expect("config serializes");
        let slot = value
            .get_mut(section)
            .and_then(|s| s.get_mut(field))
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        let parsed: toml::Table = toml::from_str(&format!("v = {raw}"))
            .map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))?;
        let mut new = parsed["v"].clone();
        // integers are accepted for float fields
        if let (toml::Value::Float(_), toml::Value::Integer(i)) = (&*slot, &new) {
            new = toml::Value::Float(*i as f64);
        }
        *slot = new;
        let cfg: Self = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("`{key}`: {e}")))?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    /// Hex SHA-256 of the flat rendering.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_flat_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.stage1.epochs, c.stage1.batch), (15, 64));
        assert_eq!((c.stage1.tau, c.stage1.lambda), (0.1, 1.0));
        assert_eq!((c.stage2.epochs, c.stage2.batch), (30, 16));
        assert_eq!(c.stage2.epsilon, 0.1);
        assert_eq!((c.stage1.lr, c.stage2.lr), (5e-4, 1e-3));
        c.validate().unwrap();
    }

    #[test]
    fn flat_round_trip() {
        let mut c = TrainConfig::default();
        c.stage2.tau = 0.3;
        c.stage1.seed = 42;
        c.stage2.scl = false;
        let text = c.to_flat_string();
        assert!(text.contains("stage2.tau = 0.3\n"));
        assert!(text.contains("stage2.scl = false\n"));
        assert_eq!(TrainConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = TrainConfig::parse("# comment\nstage2.lambda2 = 0.05\nstage1.epochs = 3\n").unwrap();
        assert_eq!(c.stage2.lambda2, 0.05);
        assert_eq!(c.stage1.epochs, 3);
        assert_eq!(c.stage2.epochs, 30);
    }

    #[test]
    fn unknown_and_invalid_keys() {
        assert!(matches!(TrainConfig::parse("stage1.epoch = 3"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("stage1.batch = 1"), Err(Error::Config(_))));
        assert!(matches!(TrainConfig::parse("stage2.tau = 0"), Err(Error::Config(_))));
        let mut c = TrainConfig::default();
        assert!(c.set("stage3.tau", "1").is_err());
        assert!(c.set("stage2.tau", "abc").is_err());
        assert!(c.set("stage2.tau", "-1").is_err());
        assert_eq!(c, TrainConfig::default());
    }

    #[test]
    fn set_overrides() {
        let mut c = TrainConfig::default();
        c.set("stage2.tau", "1").unwrap();
        c.set("stage2.kshot", "10").unwrap();
        c.set("stage2.joint", "true").unwrap();
        assert_eq!(c.stage2.tau, 1.0);
        assert_eq!(c.stage2.kshot, 10);
        assert!(c.stage2.joint);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.stage1.lr = 1e-4;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
