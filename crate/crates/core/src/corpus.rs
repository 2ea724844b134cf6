//! Intent datasets: loading, pretraining-corpus assembly, K-shot sampling
//! and synthetic fine-grained intent generation.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// Minimum whitespace-token count for an utterance to enter the pretraining corpus.
pub const DEFAULT_MIN_TOKENS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[serde(alias = "valid", alias = "dev")]
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    /// Directory name used by the pairfile layout.
    fn pairfile_dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "valid",
            Split::Test => "test",
        }
    }
}

/// One user utterance. `tokens` is always the whitespace split of `text`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    text: String,
    tokens: Vec<String>,
    label: Option<String>,
    split: Split,
}

impl Utterance {
    pub fn new(text: impl Into<String>, label: Option<String>, split: Split) -> Self {
        let text = text.into();
        let tokens = text.split_whitespace().map(str::to_owned).collect();
        Self {
            text,
            tokens,
            label,
            split,
        }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn label(&self) -> Option<&str> {
        self.label.as_deref()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    fn without_label(&self) -> Self {
        Self {
            text: self.text.clone(),
            tokens: self.tokens.clone(),
            label: None,
            split: self.split,
        }
    }
}

/// A labeled intent dataset. Class index `j` is the rank of the label name
/// in lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    name: String,
    utterances: Vec<Utterance>,
    label_set: Vec<String>,
}

impl LabeledDataset {
    /// Validates labels and split coverage, and derives the sorted label set.
    pub fn new(name: impl Into<String>, utterances: Vec<Utterance>) -> Result<Self> {
        let name = name.into();
        if utterances.is_empty() {
            return Err(Error::EmptyDataset(name));
        }
        let mut labels = BTreeSet::new();
        for (i, u) in utterances.iter().enumerate() {
            match u.label() {
                Some(l) => {
                    labels.insert(l.to_owned());
                }
                None => {
                    return Err(Error::InvalidArgument(format!(
                        "utterance {i} of dataset `{name}` has no label"
                    )))
                }
            }
        }
        for split in [Split::Train, Split::Test] {
            if !utterances.iter().any(|u| u.split == split) {
                return Err(Error::EmptySplit {
                    name,
                    split: split.as_str(),
                });
            }
        }
        Ok(Self {
            name,
            utterances,
            label_set: labels.into_iter().collect(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn num_classes(&self) -> usize {
        self.label_set.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.label_set
            .binary_search_by(|l| l.as_str().cmp(label))
            .ok()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Utterance> + '_ {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    /// Utterances of one split paired with their class index.
    pub fn labeled_split(&self, split: Split) -> Vec<(&Utterance, usize)> {
        self.split(split)
            .map(|u| {
                let label = u.label().expect("validated at construction");
                (u, self.class_index(label).expect("label in label_set"))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    /// `train/`, `valid/`, `test/` directories holding `seq.in` and `label`.
    Pairfile,
    /// One `{"text", "label", "split"}` object per line.
    Jsonl,
}

impl DatasetFormat {
    /// Directories are pairfile datasets, files are jsonl.
    pub fn detect(path: &Path) -> Self {
        if path.is_dir() {
            DatasetFormat::Pairfile
        } else {
            DatasetFormat::Jsonl
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    text: String,
    label: String,
    split: Split,
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_owned())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(line);
    }
    Ok(out)
}

fn load_pairfile(dir: &Path) -> Result<LabeledDataset> {
    let mut utterances = Vec::new();
    for split in Split::ALL {
        let split_dir = dir.join(split.pairfile_dir());
        if !split_dir.is_dir() {
            continue;
        }
        let seq_path = split_dir.join("seq.in");
        let label_path = split_dir.join("label");
        let texts = read_lines(&seq_path)?;
        let labels = read_lines(&label_path)?;
        if texts.len() != labels.len() {
            return Err(Error::PairCountMismatch {
                path: split_dir,
                utterances: texts.len(),
                labels: labels.len(),
            });
        }
        for (i, (text, label)) in texts.into_iter().zip(labels).enumerate() {
            if text.trim().is_empty() {
                return Err(Error::Parse {
                    path: seq_path.clone(),
                    line: i + 1,
                    message: "empty utterance".into(),
                });
            }
            let label = label.trim();
            if label.is_empty() {
                return Err(Error::Parse {
                    path: label_path.clone(),
                    line: i + 1,
                    message: "empty label".into(),
                });
            }
            utterances.push(Utterance::new(text, Some(label.to_owned()), split));
        }
    }
    LabeledDataset::new(stem_of(dir), utterances)
}

fn load_jsonl(path: &Path) -> Result<LabeledDataset> {
    let mut utterances = Vec::new();
    for (i, line) in read_lines(path)?.into_iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.text.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: "empty utterance".into(),
            });
        }
        utterances.push(Utterance::new(rec.text, Some(rec.label), rec.split));
    }
    LabeledDataset::new(stem_of(path), utterances)
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<LabeledDataset> {
    match format {
        DatasetFormat::Pairfile => load_pairfile(path),
        DatasetFormat::Jsonl => load_jsonl(path),
    }
}

/// Writes the dataset as jsonl, one record per utterance in dataset order.
pub fn save_jsonl(dataset: &LabeledDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for u in &dataset.utterances {
        let rec = JsonlRecord {
            text: u.text.clone(),
            label: u.label.clone().unwrap_or_default(),
            split: u.split,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the pairfile layout (`train/`, `valid/`, `test/`) under `dir`.
pub fn save_pairfile(dataset: &LabeledDataset, dir: &Path) -> Result<()> {
    for split in Split::ALL {
        let rows: Vec<&Utterance> = dataset.split(split).collect();
        if rows.is_empty() {
            continue;
        }
        let split_dir = dir.join(split.pairfile_dir());
        fs::create_dir_all(&split_dir)?;
        let mut seq = BufWriter::new(File::create(split_dir.join("seq.in"))?);
        let mut lab = BufWriter::new(File::create(split_dir.join("label"))?);
        for u in rows {
            writeln!(seq, "{}", u.text)?;
            writeln!(lab, "{}", u.label.as_deref().unwrap_or_default())?;
        }
        seq.flush()?;
        lab.flush()?;
    }
    Ok(())
}

/// Anything that can feed utterances into the pretraining corpus builder.
pub trait UtteranceSource {
    /// `(dataset name, utterance)` pairs in a fixed order.
    fn entries(&self) -> Vec<(&str, &Utterance)>;
}

impl UtteranceSource for LabeledDataset {
    fn entries(&self) -> Vec<(&str, &Utterance)> {
        self.utterances
            .iter()
            .map(|u| (self.name.as_str(), u))
            .collect()
    }
}

/// Unlabeled stage-1 text. Never contains test-split utterances and never
/// exposes labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainCorpus {
    utterances: Vec<Utterance>,
    origin: Vec<usize>,
    provenance: Vec<(String, Split)>,
}

impl PretrainCorpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn provenance(&self) -> &[(String, Split)] {
        &self.provenance
    }
}

impl UtteranceSource for PretrainCorpus {
    fn entries(&self) -> Vec<(&str, &Utterance)> {
        self.utterances
            .iter()
            .zip(&self.origin)
            .map(|(u, &o)| (self.provenance[o].0.as_str(), u))
            .collect()
    }
}

/// Union of train and validation utterances with at least `min_tokens`
/// whitespace tokens, in source order. Labels are dropped.
pub fn build_pretraining_corpus<S: UtteranceSource>(
    sources: &[S],
    min_tokens: usize,
) -> Result<PretrainCorpus> {
    if sources.is_empty() {
        return Err(Error::InvalidArgument("no datasets given".into()));
    }
    let mut utterances = Vec::new();
    let mut origin = Vec::new();
    let mut provenance: Vec<(String, Split)> = Vec::new();
    for source in sources {
        for (name, u) in source.entries() {
            if u.split == Split::Test || u.tokens.len() < min_tokens {
                continue;
            }
            let key = provenance
                .iter()
                .position(|(n, s)| n == name && *s == u.split)
                .unwrap_or_else(|| {
                    provenance.push((name.to_owned(), u.split));
                    provenance.len() - 1
                });
            utterances.push(u.without_label());
            origin.push(key);
        }
    }
    if utterances.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(PretrainCorpus {
        utterances,
        origin,
        provenance,
    })
}

/// A balanced K-shot training sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FewShotSample {
    pub dataset: String,
    pub k: usize,
    pub seed: u64,
    pub selected: Vec<(Utterance, usize)>,
}

impl FewShotSample {
    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }
}

/// Draws exactly `k` train utterances per class, uniformly without replacement.
pub fn sample_k_shot(dataset: &LabeledDataset, k: usize, seed: u64) -> Result<FewShotSample> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be positive".into()));
    }
    let mut per_class: Vec<Vec<&Utterance>> = vec![Vec::new(); dataset.num_classes()];
    for (u, c) in dataset.labeled_split(Split::Train) {
        per_class[c].push(u);
    }
    for (c, pool) in per_class.iter().enumerate() {
        if pool.len() < k {
            return Err(Error::NotEnoughExamples {
                class: dataset.label_set[c].clone(),
                available: pool.len(),
                required: k,
            });
        }
    }
    let mut selected = Vec::with_capacity(k * per_class.len());
    for (c, pool) in per_class.iter().enumerate() {
        let mut rng = rng_for(seed, Stream::KShot, &[c as u64, k as u64]);
        for i in index::sample(&mut rng, pool.len(), k) {
            selected.push((pool[i].clone(), c));
        }
    }
    Ok(FewShotSample {
        dataset: dataset.name.clone(),
        k,
        seed,
        selected,
    })
}

const CORE_SLOTS: usize = 6;
const SYNONYMS: usize = 6;
const CLUSTER: usize = 4;
const SHARED_CHOICES: usize = 3;
const SLOT_DROP: f64 = 0.15;
const CARRIERS: [&str; 16] = [
    "please", "can", "you", "i", "want", "to", "need", "help", "me", "with", "the", "my", "a",
    "now", "how", "do",
];

fn pseudo_word<R: Rng>(rng: &mut R, taken: &mut HashSet<String>) -> String {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st",
        "kl",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    loop {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        }
        if rng.gen_bool(0.5) {
            w.push_str(["n", "r", "s", "x"][rng.gen_range(0..4)]);
        }
        if taken.insert(w.clone()) {
            return w;
        }
    }
}

/// One slot of an intent template.
#[derive(Debug, Clone)]
enum Slot {
    Shared(String),
    Unique(Vec<String>),
}

/// Template-generated dataset with `num_intents` fine-grained intents.
///
/// Each intent template has six core slots. A `confusability` fraction of them
/// (rounded, at most five) are filled from word pools shared across intents;
/// intents are grouped in clusters of four that use identical shared words.
/// The remaining slots each hold six intent-specific synonyms. Utterances
/// wrap the core in up to two carrier words on each side and drop each slot
/// with probability 0.15. Splits are 60/20/20 per intent.
pub fn generate_synthetic(
    num_intents: usize,
    per_intent: usize,
    confusability: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_intents < 2 {
        return Err(Error::InvalidArgument("num_intents must be >= 2".into()));
    }
    if per_intent < 10 {
        return Err(Error::InvalidArgument("per_intent must be >= 10".into()));
    }
    if !(0.0..=1.0).contains(&confusability) {
        return Err(Error::InvalidArgument(
            "confusability must lie in [0, 1]".into(),
        ));
    }
    let conf_pct = (confusability * 100.0).round() as u64;
    let mut rng = rng_for(
        seed,
        Stream::Synthetic,
        &[num_intents as u64, per_intent as u64, confusability.to_bits()],
    );
    let mut taken: HashSet<String> = CARRIERS.iter().map(|s| s.to_string()).collect();

    let n_shared = ((confusability * CORE_SLOTS as f64).round() as usize).min(CORE_SLOTS - 1);

    let shared_pools: Vec<Vec<String>> = (0..n_shared)
        .map(|_| {
            (0..SHARED_CHOICES)
                .map(|_| pseudo_word(&mut rng, &mut taken))
                .collect()
        })
        .collect();
    let n_clusters = num_intents.div_ceil(CLUSTER);
    let cluster_shared: Vec<Vec<String>> = (0..n_clusters)
        .map(|_| {
            shared_pools
                .iter()
                .map(|pool| pool[rng.gen_range(0..pool.len())].clone())
                .collect()
        })
        .collect();

    let templates: Vec<Vec<Slot>> = (0..num_intents)
        .map(|i| {
            let mut slots: Vec<Slot> = cluster_shared[i / CLUSTER]
                .iter()
                .cloned()
                .map(Slot::Shared)
                .collect();
            for _ in n_shared..CORE_SLOTS {
                let syn = (0..SYNONYMS)
                    .map(|_| pseudo_word(&mut rng, &mut taken))
                    .collect();
                slots.push(Slot::Unique(syn));
            }
            // interleave shared and unique slots in an intent-specific order
            for a in (1..slots.len()).rev() {
                let b = rng.gen_range(0..=a);
                slots.swap(a, b);
            }
            slots
        })
        .collect();

    let width = (num_intents - 1).to_string().len().max(2);
    let n_train = per_intent * 6 / 10;
    let n_val = per_intent * 2 / 10;
    let mut utterances = Vec::with_capacity(num_intents * per_intent);
    for (i, template) in templates.iter().enumerate() {
        let label = format!("intent_{i:0width$}");
        for k in 0..per_intent {
            let mut keep: Vec<bool> = template.iter().map(|_| !rng.gen_bool(SLOT_DROP)).collect();
            let unique_idx: Vec<usize> = template
                .iter()
                .enumerate()
                .filter(|(_, s)| matches!(s, Slot::Unique(_)))
                .map(|(j, _)| j)
                .collect();
            if !unique_idx.iter().any(|&j| keep[j]) {
                keep[unique_idx[rng.gen_range(0..unique_idx.len())]] = true;
            }
            let mut words: Vec<String> = Vec::new();
            for _ in 0..rng.gen_range(0..=2) {
                words.push(CARRIERS[rng.gen_range(0..CARRIERS.len())].to_owned());
            }
            for (slot, kept) in template.iter().zip(&keep) {
                if !kept {
                    continue;
                }
                match slot {
                    Slot::Shared(w) => words.push(w.clone()),
                    Slot::Unique(syn) => words.push(syn[rng.gen_range(0..syn.len())].clone()),
                }
            }
            for _ in 0..rng.gen_range(0..=2) {
                words.push(CARRIERS[rng.gen_range(0..CARRIERS.len())].to_owned());
            }
            let split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
            utterances.push(Utterance::new(words.join(" "), Some(label.clone()), split));
        }
    }
    let name = format!("synth_{num_intents}x{per_intent}_c{conf_pct:03}_s{seed}");
    LabeledDataset::new(name, utterances)
}

/// Token vocabulary of each intent's template core (carrier words excluded).
pub fn core_vocabularies(dataset: &LabeledDataset) -> BTreeMap<String, BTreeSet<String>> {
    let carriers: HashSet<&str> = CARRIERS.iter().copied().collect();
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for u in &dataset.utterances {
        let entry = out
            .entry(u.label.clone().unwrap_or_default())
            .or_default();
        for t in &u.tokens {
            if !carriers.contains(t.as_str()) {
                entry.insert(t.clone());
            }
        }
    }
    out
}
