//! Accuracy, repeated runs, hyper-parameter grid search and the ablation runner.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{build_pretraining_corpus, sample_k_shot, LabeledDataset, Split, DEFAULT_MIN_TOKENS};
use crate::encoder::{forward, DropoutState, EncoderParams, ForwardOptions};
use crate::error::{Error, Result};
use crate::tokenizer::{build_vocab, encode, TokenSequence};
use crate::train::{finetune, initial_checkpoint, pretrain, Stage2Telemetry};

const PREDICT_CHUNK: usize = 256;

/// Index of the first maximal entry.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode intent predictions.
pub fn predict(params: &EncoderParams, seqs: &[TokenSequence]) -> Result<Vec<usize>> {
    if params.intent.is_none() {
        return Err(Error::Shape("prediction requires an intent head".into()));
    }
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(PREDICT_CHUNK) {
        let (fwd, _) = forward(params, chunk, &DropoutState::eval(), ForwardOptions::default())?;
        let logits = fwd.intent_logits.expect("intent head present");
        out.extend((0..logits.rows).map(|r| argmax(logits.row(r))));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub correct: usize,
    pub n_test: usize,
    /// Accuracy per class, `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    pub support: Vec<usize>,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_predictions(predicted: &[usize], gold: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        if gold.is_empty() {
            return Err(Error::InvalidArgument("no examples to evaluate".into()));
        }
        if predicted.len() != gold.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), gold.len())));
        }
        let mut hits = vec![0usize; num_classes];
        let mut support = vec![0usize; num_classes];
        for (&p, &g) in predicted.iter().zip(gold) {
            if g >= num_classes {
                return Err(Error::BadLabel {
                    label: g,
                    classes: num_classes,
                });
            }
            support[g] += 1;
            if p == g {
                hits[g] += 1;
            }
        }
        let correct: usize = hits.iter().sum();
        Ok(Self {
            accuracy: correct as f64 / gold.len() as f64,
            correct,
            n_test: gold.len(),
            per_class: hits
                .iter()
                .zip(&support)
                .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
                .collect(),
            support,
            seed,
        })
    }
}

/// Accuracy of a fine-tuned model on one split of `dataset`.
pub fn evaluate_accuracy(model: &Checkpoint, dataset: &LabeledDataset, split: Split, seed: u64) -> Result<EvalReport> {
    if model.label_set != dataset.label_set() {
        return Err(Error::InvalidArgument(format!(
            "model labels do not match the label set of `{}`",
            dataset.name()
        )));
    }
    let items = dataset.labeled_split(split);
    if items.is_empty() {
        return Err(Error::EmptySplit {
            name: dataset.name().to_owned(),
            split: split.as_str(),
        });
    }
    let max_len = model.params.config.max_len;
    let seqs: Vec<TokenSequence> = items
        .iter()
        .map(|(u, _)| encode(&model.vocab, u, max_len))
        .collect::<Result<_>>()?;
    let gold: Vec<usize> = items.iter().map(|(_, y)| *y).collect();
    EvalReport::from_predictions(&predict(&model.params, &seqs)?, &gold, dataset.num_classes(), seed)
}

/// Mean and population variance.
pub fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatedReport {
    pub runs: Vec<EvalReport>,
    pub telemetry: Vec<Stage2Telemetry>,
    pub tau: f64,
    pub lambda2: f64,
    pub kshot: usize,
    pub mean: f64,
    pub variance: f64,
    pub variance_convention: String,
}

/// `base, base + 1, …, base + repeats − 1`.
pub fn repeat_seeds(base: u64, repeats: usize) -> Vec<u64> {
    (0..repeats as u64).map(|r| base.wrapping_add(r)).collect()
}

/// K-shot sample, fine-tune and test once per seed; the seed drives both the
/// sample and stage 2.
pub fn run_with_seeds(
    base: &Checkpoint,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<RepeatedReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one repeat is required".into()));
    }
    let results: Vec<(EvalReport, Stage2Telemetry)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = config.clone();
            cfg.stage2.seed = seed;
            let sample = sample_k_shot(dataset, cfg.stage2.kshot, seed)?;
            let out = finetune(base, &sample, dataset, &cfg)?;
            let report = evaluate_accuracy(&out.checkpoint, dataset, Split::Test, seed)?;
            Ok((report, out.telemetry))
        })
        .collect::<Result<_>>()?;
    let (runs, telemetry): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let accs: Vec<f64> = runs.iter().map(|r| r.accuracy).collect();
    let (mean, variance) = mean_and_variance(&accs);
    Ok(RepeatedReport {
        runs,
        telemetry,
        tau: config.stage2.tau,
        lambda2: config.stage2.lambda2,
        kshot: config.stage2.kshot,
        mean,
        variance,
        variance_convention: "population".into(),
    })
}

/// `repeats` runs with seeds `stage2.seed + 0 …`.
pub fn run_repeated(
    base: &Checkpoint,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    repeats: usize,
) -> Result<RepeatedReport> {
    run_with_seeds(base, dataset, config, &repeat_seeds(config.stage2.seed, repeats))
}

pub const TAU_GRID: [f64; 3] = [0.1, 0.3, 0.5];
pub const LAMBDA2_GRID: [f64; 3] = [0.01, 0.03, 0.05];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub tau: f64,
    pub lambda2: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridCell,
    /// Every cell in `τ`-major order.
    pub cells: Vec<GridCell>,
    pub runs: usize,
}

/// Scores every `(τ, λ′)` cell once and keeps the highest; ties go to the
/// smaller `τ`, then the smaller `λ′`.
pub fn grid_search<F>(taus: &[f64], lambdas: &[f64], score: F) -> Result<GridResult>
where
    F: Fn(f64, f64) -> Result<f64> + Sync,
{
    if taus.is_empty() || lambdas.is_empty() {
        return Err(Error::InvalidArgument("grid search needs non-empty grids".into()));
    }
    let pairs: Vec<(f64, f64)> = taus.iter().flat_map(|&t| lambdas.iter().map(move |&l| (t, l))).collect();
    let cells: Vec<GridCell> = pairs
        .par_iter()
        .map(|&(tau, lambda2)| Ok(GridCell { tau, lambda2, score: score(tau, lambda2)? }))
        .collect::<Result<_>>()?;
    let mut best = cells[0];
    for &c in &cells[1..] {
        let better = c.score > best.score
            || (c.score == best.score && (c.tau, c.lambda2) < (best.tau, best.lambda2));
        if better {
            best = c;
        }
    }
    Ok(GridResult {
        best,
        runs: cells.len(),
        cells,
    })
}

/// Validation accuracy of one fine-tuning run with the given `τ` and `λ′`,
/// using the config's seed for both the sample and stage 2.
pub fn validation_score(base: &Checkpoint, dataset: &LabeledDataset, config: &TrainConfig, tau: f64, lambda2: f64) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.stage2.tau = tau;
    cfg.stage2.lambda2 = lambda2;
    let sample = sample_k_shot(dataset, cfg.stage2.kshot, cfg.stage2.seed)?;
    finetune(base, &sample, dataset, &cfg)?
        .best_val_accuracy
        .ok_or_else(|| Error::EmptySplit {
            name: dataset.name().to_owned(),
            split: Split::Validation.as_str(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPretrain,
    NoScl,
    NoPretrainNoScl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoPretrain, Variant::NoScl, Variant::NoPretrainNoScl];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPretrain => "no_pretrain",
            Variant::NoScl => "no_scl",
            Variant::NoPretrainNoScl => "no_pretrain_no_scl",
        }
    }

    pub fn pretrains(self) -> bool {
        matches!(self, Variant::Full | Variant::NoScl)
    }

    pub fn uses_scl(self) -> bool {
        matches!(self, Variant::Full | Variant::NoPretrain)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AblationOptions {
    pub repeats: usize,
    /// Leave the target dataset out of the stage-1 corpus.
    pub exclude_target: bool,
    /// Further datasets whose train and validation text join the stage-1 corpus.
    pub extra_sources: Vec<LabeledDataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean: f64,
    pub variance: f64,
    /// `(mean − mean_full) × 100`.
    pub delta: f64,
    pub report: RepeatedReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub corpus_size: usize,
    pub rows: Vec<AblationRow>,
}

/// One machine-readable record per run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLine {
    pub variant: String,
    pub seed: u64,
    pub tau: f64,
    pub lambda2: f64,
    pub k: usize,
    pub accuracy: f64,
}

impl RepeatedReport {
    pub fn lines(&self, variant: &str) -> Vec<RunLine> {
        self.runs
            .iter()
            .map(|r| RunLine {
                variant: variant.to_owned(),
                seed: r.seed,
                tau: self.tau,
                lambda2: self.lambda2,
                k: self.kshot,
                accuracy: r.accuracy,
            })
            .collect()
    }
}

/// Serializes records one JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn lines(&self) -> Vec<RunLine> {
        self.rows.iter().flat_map(|r| r.report.lines(r.variant.tag())).collect()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<20} {:>9} {:>9} {:>8}  runs", "variant", "acc×100", "var×1e4", "delta");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20} {:>9.2} {:>9.2} {:>+8.2}  {}",
                r.variant.tag(),
                100.0 * r.mean,
                1e4 * r.variance,
                r.delta,
                r.report.runs.len()
            );
        }
        s
    }
}

/// Runs all four variants with [`run_repeated`] and reports deltas against
/// `full` in accuracy points. Stage 1 runs once and is shared by the
/// variants that use it.
pub fn run_ablation(dataset: &LabeledDataset, config: &TrainConfig, opts: &AblationOptions) -> Result<AblationReport> {
    let mut corpus_sources: Vec<LabeledDataset> = opts.extra_sources.clone();
    if !opts.exclude_target {
        corpus_sources.push(dataset.clone());
    }
    let corpus = build_pretraining_corpus(&corpus_sources, DEFAULT_MIN_TOKENS)?;
    let mut vocab_sources = opts.extra_sources.clone();
    vocab_sources.push(dataset.clone());
    let vocab = build_vocab(&build_pretraining_corpus(&vocab_sources, 1)?, 1)?;

    let pretrained = pretrain(&corpus, &vocab, config)?;
    let random = initial_checkpoint(&vocab, config)?;
    let mut rows = Vec::with_capacity(4);
    for v in Variant::ALL {
        let mut cfg = config.clone();
        cfg.stage2.scl = v.uses_scl();
        let base = if v.pretrains() { &pretrained } else { &random };
        let report = run_repeated(base, dataset, &cfg, opts.repeats)?;
        rows.push(AblationRow {
            variant: v,
            mean: report.mean,
            variance: report.variance,
            delta: 0.0,
            report,
        });
    }
    let full = rows[0].mean;
    for r in &mut rows {
        r.delta = 100.0 * (r.mean - full);
    }
    Ok(AblationReport {
        dataset: dataset.name().to_owned(),
        corpus_size: corpus.len(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn report_counts() {
        let r = EvalReport::from_predictions(&[0, 1, 2, 3], &[0, 1, 2, 3], 4, 0).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let r = EvalReport::from_predictions(&[0, 1, 2, 0], &[0, 1, 2, 3], 4, 0).unwrap();
        assert_eq!(r.accuracy, 0.75);
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), Some(1.0), Some(0.0)]);
        let gold: Vec<usize> = (0..20).map(|i| i % 5).collect();
        let r = EvalReport::from_predictions(&[3; 20], &gold, 5, 0).unwrap();
        assert_eq!(r.accuracy, 0.2);
        let weighted: f64 = r
            .per_class
            .iter()
            .zip(&r.support)
            .map(|(a, &s)| a.unwrap() * s as f64)
            .sum::<f64>()
            / 20.0;
        assert_eq!(weighted, r.accuracy);
        assert!(EvalReport::from_predictions(&[], &[], 2, 0).is_err());
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    #[test]
    fn population_variance() {
        let (m, v) = mean_and_variance(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert_eq!(v, 1.25);
        assert_eq!(mean_and_variance(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn grid_single_cell() {
        let g = grid_search(&[0.3], &[0.01], |_, _| Ok(0.4)).unwrap();
        assert_eq!((g.best.tau, g.best.lambda2, g.runs), (0.3, 0.01, 1));
    }

    #[test]
    fn grid_stub_argmax_and_tie_break() {
        let calls = AtomicUsize::new(0);
        let g = grid_search(&TAU_GRID, &LAMBDA2_GRID, |t, l| {
            calls.fetch_add(1, Ordering::SeqCst);
            Ok(if (t, l) == (0.3, 0.05) { 0.9 } else { 0.5 })
        })
        .unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 9);
        assert_eq!(g.runs, 9);
        assert_eq!((g.best.tau, g.best.lambda2), (0.3, 0.05));

        // reversed grids: ties still resolve to the smallest (τ, λ′)
        let g = grid_search(&[0.5, 0.3, 0.1], &[0.05, 0.01, 0.03], |t, _| Ok(if t < 0.4 { 0.8 } else { 0.1 })).unwrap();
        assert_eq!((g.best.tau, g.best.lambda2), (0.1, 0.01));
        assert!(grid_search(&[], &[0.1], |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn variant_flags() {
        assert!(Variant::Full.pretrains() && Variant::Full.uses_scl());
        assert!(!Variant::NoPretrain.pretrains() && Variant::NoPretrain.uses_scl());
        assert!(Variant::NoScl.pretrains() && !Variant::NoScl.uses_scl());
        assert!(!Variant::NoPretrainNoScl.pretrains() && !Variant::NoPretrainNoScl.uses_scl());
    }

    #[test]
    fn jsonl_lines() {
        let line = RunLine {
            variant: "full".into(),
            seed: 3,
            tau: 0.1,
            lambda2: 0.03,
            k: 5,
            accuracy: 0.5,
        };
        let s = to_jsonl(&[line.clone(), line]).unwrap();
        assert_eq!(s.lines().count(), 2);
        assert!(s.starts_with(r#"{"variant":"full","seed":3,"tau":0.1,"lambda2":0.03,"k":5,"accuracy":0.5}"#));
    }
}
