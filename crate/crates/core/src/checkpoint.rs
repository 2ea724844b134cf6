//! Self-describing model container.
//!
//! Layout: the 8-byte magic `CPFTCKPT`, a little-endian `u64` header length,
//! a JSON header (architecture, vocabulary, stage, config fingerprint, loss
//! history, tensor manifest), then every tensor as little-endian `f64` in
//! manifest order.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;

const MAGIC: &[u8; 8] = b"CPFTCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Initialized,
    Pretrained,
    Finetuned,
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: StageTag,
    pub epoch: usize,
    pub loss: f64,
    /// Unweighted mean of each loss term, e.g. `uns_cl`, `mlm`, `s_cl`, `intent`.
    pub components: BTreeMap<String, f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub vocab: Vocabulary,
    pub vocab_hash: String,
    pub stage: StageTag,
    pub config_fingerprint: String,
    pub history: Vec<EpochRecord>,
    /// Intent names in head order; empty without an intent head.
    pub label_set: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: EncoderConfig,
    num_classes: Option<usize>,
    vocab: Vec<String>,
    vocab_hash: String,
    stage: StageTag,
    config_fingerprint: String,
    history: Vec<EpochRecord>,
    label_set: Vec<String>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(
        params: EncoderParams,
        vocab: Vocabulary,
        stage: StageTag,
        config_fingerprint: String,
    ) -> Result<Self> {
        if params.config.vocab_size != vocab.size() {
            return Err(Error::Shape(format!(
                "encoder expects {} tokens, vocabulary has {}",
                params.config.vocab_size,
                vocab.size()
            )));
        }
        let vocab_hash = vocab.hash();
        Ok(Self {
            params,
            vocab,
            vocab_hash,
            stage,
            config_fingerprint,
            history: Vec::new(),
            label_set: Vec::new(),
        })
    }

    /// Fails unless the stored hash matches the stored vocabulary.
    pub fn verify_vocab(&self) -> Result<()> {
        let actual = self.vocab.hash();
        if actual != self.vocab_hash || self.vocab.size() != self.params.config.vocab_size {
            return Err(Error::VocabMismatch {
                expected: self.vocab_hash.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let names = self.params.names();
        let tensors = self.params.tensors();
        let header = Header {
            version: FORMAT_VERSION,
            config: self.params.config.clone(),
            num_classes: self.params.num_classes(),
            vocab: self.vocab.tokens().to_vec(),
            vocab_hash: self.vocab_hash.clone(),
            stage: self.stage,
            config_fingerprint: self.config_fingerprint.clone(),
            history: self.history.clone(),
            label_set: self.label_set.clone(),
            tensors: names
                .into_iter()
                .zip(&tensors)
                .map(|(name, m)| TensorEntry {
                    name,
                    rows: m.rows,
                    cols: m.cols,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let floats: usize = tensors.iter().map(|m| m.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in tensors {
            for x in &m.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.version
            )));
        }
        header.config.validate()?;
        let mut params = EncoderParams::zeros(&header.config, header.num_classes);
        let names = params.names();
        if names.len() != header.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "manifest lists {} tensors, config implies {}",
                header.tensors.len(),
                names.len()
            )));
        }
        let mut data = &bytes[16 + hlen..];
        for ((m, name), entry) in params.tensors_mut().into_iter().zip(&names).zip(&header.tensors) {
            if entry.name != *name || (entry.rows, entry.cols) != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {}x{} does not match config (`{name}` {}x{})",
                    entry.name, entry.rows, entry.cols, m.rows, m.cols
                )));
            }
            let need = 8 * m.len();
            if data.len() < need {
                return Err(Error::Checkpoint(format!("truncated data in `{name}`")));
            }
            for (x, chunk) in m.data.iter_mut().zip(data[..need].chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().unwrap());
            }
            data = &data[need..];
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        if header.num_classes.unwrap_or(0) != header.label_set.len() {
            return Err(bad("label set does not match intent head"));
        }
        let ckpt = Self {
            params,
            vocab: Vocabulary::from_token_list(header.vocab)?,
            vocab_hash: header.vocab_hash,
            stage: header.stage,
            config_fingerprint: header.config_fingerprint,
            history: header.history,
            label_set: header.label_set,
        };
        ckpt.verify_vocab()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
