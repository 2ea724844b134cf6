//! Word-level vocabulary, sequence encoding and per-epoch dynamic masking.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::corpus::{PretrainCorpus, Utterance};
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const MASK: usize = 3;
pub const NUM_SPECIALS: usize = 4;
const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[MASK]"];

/// Default fraction of maskable tokens replaced per utterance.
pub const DEFAULT_MASK_RATE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_of: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(token_of: Vec<String>) -> Result<Self> {
        if token_of.len() < NUM_SPECIALS + 1 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary needs at least {} entries, got {}",
                NUM_SPECIALS + 1,
                token_of.len()
            )));
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if token_of[i] != *s {
                return Err(Error::InvalidArgument(format!(
                    "id {i} must be {s}, found {}",
                    token_of[i]
                )));
            }
        }
        let mut id_of = HashMap::with_capacity(token_of.len());
        for (i, t) in token_of.iter().enumerate() {
            if id_of.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { token_of, id_of })
    }

    pub fn size(&self) -> usize {
        self.token_of.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.token_of.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.token_of
    }

    /// SHA-256 of the persisted file contents, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_file_contents().as_bytes());
        h.finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn to_file_contents(&self) -> String {
        let mut s = String::new();
        for t in &self.token_of {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_contents())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path)?;
        Self::from_tokens(body.lines().map(str::to_owned).collect())
    }

    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

/// Lowercased tokens with frequency `>= min_freq`, ordered by frequency
/// (descending) then lexicographically, after the four specials.
pub fn build_vocab(corpus: &PretrainCorpus, min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for u in corpus.utterances() {
        for t in u.tokens() {
            *freq.entry(t.to_lowercase()).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = freq
        .into_iter()
        .filter(|(t, n)| *n >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut token_of: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    token_of.extend(entries.into_iter().map(|(t, _)| t));
    Vocabulary::from_tokens(token_of)
}

/// `[CLS]` followed by token ids, padded with `[PAD]` to `max_len`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    len: usize,
}

impl TokenSequence {
    /// Builds a sequence from raw ids (first must be `[CLS]`), padded to `max_len`.
    pub fn from_ids(mut ids: Vec<usize>, max_len: usize) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::InvalidArgument("sequence must start with [CLS]".into()));
        }
        if ids.len() > max_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max_len,
            });
        }
        let len = ids.len();
        ids.resize(max_len, PAD);
        Ok(Self { ids, len })
    }

    /// All ids including trailing padding.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Non-padding prefix.
    pub fn active(&self) -> &[usize] {
        &self.ids[..self.len]
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn padded_len(&self) -> usize {
        self.ids.len()
    }

    pub fn attention_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i < self.len).collect()
    }

    /// Positions eligible for masking: everything after `[CLS]`, before padding.
    pub fn maskable(&self) -> usize {
        self.len.saturating_sub(1)
    }

    /// Same tokens, re-padded to a longer width.
    pub fn with_padding(&self, max_len: usize) -> Result<Self> {
        Self::from_ids(self.active().to_vec(), max_len)
    }
}

pub fn encode(vocab: &Vocabulary, utterance: &Utterance, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::InvalidArgument("max_len must be >= 2".into()));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    for t in utterance.tokens().iter().take(max_len - 1) {
        ids.push(vocab.id(&t.to_lowercase()).unwrap_or(UNK));
    }
    TokenSequence::from_ids(ids, max_len)
}

/// Inverse of [`encode`] over the non-special tokens.
pub fn decode(vocab: &Vocabulary, seq: &TokenSequence) -> Vec<String> {
    seq.active()
        .iter()
        .skip(1)
        .map(|&id| vocab.token(id).unwrap_or("[UNK]").to_owned())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskAction {
    Mask,
    Random,
    Keep,
}

/// Positions chosen in one masking round and what happened to each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub positions: Vec<usize>,
    pub actions: Vec<MaskAction>,
    pub original: Vec<usize>,
}

impl MaskPlan {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `max(1, round(rate * maskable))`, rounding half away from zero.
pub fn mask_count(maskable: usize, rate: f64) -> usize {
    ((rate * maskable as f64).round() as usize).clamp(1, maskable.max(1))
}

/// Draws a fresh mask plan for `seq` and returns the masked copy.
///
/// Randomness is keyed by `(seed, epoch, utterance)`, so every epoch re-draws
/// positions. Chosen positions become `[MASK]` with probability 0.8, a random
/// non-special token (never the original) with 0.1, and stay unchanged with 0.1.
pub fn apply_dynamic_mask(
    seq: &TokenSequence,
    vocab_size: usize,
    rate: f64,
    seed: u64,
    epoch: u64,
    utterance: u64,
) -> Result<(TokenSequence, MaskPlan)> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask rate must lie in (0, 1], got {rate}"
        )));
    }
    let maskable = seq.maskable();
    if maskable == 0 {
        return Err(Error::NothingToMask);
    }
    let mut rng = rng_for(seed, Stream::Mask, &[epoch, utterance]);
    let count = mask_count(maskable, rate);
    let mut positions: Vec<usize> = index::sample(&mut rng, maskable, count)
        .into_iter()
        .map(|p| p + 1)
        .collect();
    positions.sort_unstable();

    let mut ids = seq.ids.clone();
    let mut actions = Vec::with_capacity(count);
    let mut original = Vec::with_capacity(count);
    let regular = vocab_size.saturating_sub(NUM_SPECIALS);
    for &p in &positions {
        let orig = ids[p];
        original.push(orig);
        let roll: f64 = rng.gen();
        let action = if roll < 0.8 {
            MaskAction::Mask
        } else if roll < 0.9 {
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        let action = match action {
            MaskAction::Random if regular < 2 && orig >= NUM_SPECIALS => MaskAction::Mask,
            MaskAction::Random if regular == 0 => MaskAction::Mask,
            a => a,
        };
        match action {
            MaskAction::Mask => ids[p] = MASK,
            MaskAction::Random => loop {
                let r = NUM_SPECIALS + rng.gen_range(0..regular);
                if r != orig {
                    ids[p] = r;
                    break;
                }
            },
            MaskAction::Keep => {}
        }
        actions.push(action);
    }
    Ok((
        TokenSequence { ids, len: seq.len },
        MaskPlan {
            positions,
            actions,
            original,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_pretraining_corpus, LabeledDataset, Split};

    fn corpus_of(texts: &[&str]) -> PretrainCorpus {
        let utts = texts
            .iter()
            .map(|t| Utterance::new(*t, Some("x".into()), Split::Train))
            .chain(std::iter::once(Utterance::new("t", Some("x".into()), Split::Test)))
            .collect();
        let ds = LabeledDataset::new("c", utts).unwrap();
        build_pretraining_corpus(&[ds], 1).unwrap()
    }

    #[test]
    fn vocab_counts_specials_plus_tokens() {
        let v = build_vocab(&corpus_of(&["book a flight now please"]), 1).unwrap();
        assert_eq!(v.size(), 4 + 5);
        assert_eq!(v.token(CLS), Some("[CLS]"));
    }

    #[test]
    fn vocab_min_freq_threshold() {
        let c = corpus_of(&["book a flight", "flight status check"]);
        let v = build_vocab(&c, 2);
        // only "flight" survives, which leaves V = 5
        let v = v.unwrap();
        assert_eq!(v.size(), 5);
        assert_eq!(v.id("flight"), Some(4));
    }

    #[test]
    fn vocab_is_deterministic_and_lowercased() {
        let c = corpus_of(&["Book a FLIGHT", "book the flight", "a b c"]);
        let a = build_vocab(&c, 1).unwrap();
        let b = build_vocab(&c, 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
        // frequency desc, then lexicographic
        assert_eq!(&a.tokens()[4..], ["a", "book", "flight", "b", "c", "the"]);
    }

    #[test]
    fn vocab_file_round_trip() {
        let v = build_vocab(&corpus_of(&["alpha beta gamma delta"]), 1).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn encode_layout_and_oov() {
        let v = build_vocab(&corpus_of(&["one two three four five"]), 1).unwrap();
        let u = Utterance::new("one two three four five", None, Split::Train);
        let s = encode(&v, &u, 16).unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s.ids()[0], CLS);
        assert_eq!(s.ids()[6..].iter().filter(|&&i| i == PAD).count(), 10);
        assert_eq!(s.attention_mask().iter().filter(|&&m| m).count(), 6);
        assert_eq!(decode(&v, &s), u.tokens());

        let oov = Utterance::new("one zebra", None, Split::Train);
        assert_eq!(encode(&v, &oov, 16).unwrap().ids()[2], UNK);

        let long = Utterance::new(vec!["one"; 30].join(" "), None, Split::Train);
        assert_eq!(encode(&v, &long, 16).unwrap().len(), 16);
    }

    #[test]
    fn mask_count_rounding() {
        assert_eq!(mask_count(10, 0.1), 1);
        assert_eq!(mask_count(3, 0.1), 1);
        assert_eq!(mask_count(15, 0.1), 2);
        assert_eq!(mask_count(14, 0.1), 1);
        assert_eq!(mask_count(25, 0.1), 3);
        assert_eq!(mask_count(2, 1.0), 2);
    }

    #[test]
    fn masking_only_cls_is_an_error() {
        let s = TokenSequence::from_ids(vec![CLS], 4).unwrap();
        assert!(matches!(
            apply_dynamic_mask(&s, 10, 0.1, 1, 0, 0),
            Err(Error::NothingToMask)
        ));
    }

    #[test]
    fn masked_ids_differ_exactly_where_action_is_not_keep() {
        let ids: Vec<usize> = std::iter::once(CLS).chain(4..24).collect();
        let s = TokenSequence::from_ids(ids, 32).unwrap();
        for epoch in 0..200 {
            let (m, plan) = apply_dynamic_mask(&s, 30, 0.3, 9, epoch, 0).unwrap();
            for p in 0..32 {
                let k = plan.positions.iter().position(|&q| q == p);
                let changed = m.ids()[p] != s.ids()[p];
                match k {
                    Some(k) => assert_eq!(changed, plan.actions[k] != MaskAction::Keep),
                    None => assert!(!changed),
                }
            }
        }
    }
}
