//! `cpft` command line.
//!
//! Exit status: 0 success, 1 a `check` failed, 2 usage error, 3 runtime error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::corpus::{
    build_pretraining_corpus, generate_synthetic, load_dataset, sample_k_shot, save_jsonl, save_pairfile,
    DatasetFormat, LabeledDataset, PretrainCorpus, Split, DEFAULT_MIN_TOKENS,
};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_accuracy, grid_search, run_ablation, run_repeated, to_jsonl, validation_score, AblationOptions,
    LAMBDA2_GRID, TAU_GRID,
};
use crate::suite;
use crate::tokenizer::{build_vocab, Vocabulary};
use crate::train::{finetune_with_corpus, initial_checkpoint, pretrain};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cpft", version, about = "Contrastive pre-training and fine-tuning for few-shot intent detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic intent dataset.
    GenData(GenDataArgs),
    /// Build a vocabulary from the train and validation text of datasets.
    BuildVocab(BuildVocabArgs),
    /// Stage 1: contrastive + MLM pre-training on unlabeled text.
    Pretrain(TrainArgs),
    /// Stage 2: K-shot fine-tuning from a checkpoint.
    Finetune(TrainArgs),
    /// Test accuracy of a fine-tuned checkpoint, or repeated fine-tune + test runs.
    Eval(TrainArgs),
    /// All four ablation variants averaged over repeats.
    Ablate(TrainArgs),
    /// Validation grid search over τ and λ′.
    Grid(TrainArgs),
    /// Loss oracles, closed-form values, gradient checks, invariances and masking rules.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    Pairfile,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    pub intents: usize,
    #[arg(long, default_value_t = 40)]
    pub per_intent: usize,
    #[arg(long, default_value_t = 0.7)]
    pub confusability: f64,
    #[arg(long, env = "CPFT_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    pub format: FormatArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Dataset files or pairfile directories.
    #[arg(long, required = true, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training flags. `--epochs`, `--batch` and `--tau` set the stage-1 keys for
/// `pretrain` and the stage-2 keys for every other verb.
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set stage1.lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, env = "CPFT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub kshot: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Stage-1 MLM weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Stage-2 intent-loss weight.
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Labeled dataset (jsonl file or pairfile directory).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Datasets whose train and validation text form the stage-1 corpus.
    #[arg(long, num_args = 1..)]
    pub corpus: Vec<PathBuf>,
    /// Vocabulary file; built from the corpus when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Split to evaluate on.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Ablation: keep the target dataset out of the stage-1 corpus.
    #[arg(long)]
    pub exclude_target: bool,
    /// Grid over the given temperatures instead of 0.1, 0.3, 0.5.
    #[arg(long, num_args = 1..)]
    pub tau_grid: Vec<f64>,
    /// Grid over the given intent weights instead of 0.01, 0.03, 0.05.
    #[arg(long, num_args = 1..)]
    pub lambda2_grid: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Oracle equivalence and closed-form values.
    #[arg(long)]
    pub losses: bool,
    /// Finite-difference gradient checks.
    #[arg(long)]
    pub grad: bool,
    /// Scale, permutation, shift and padding invariances.
    #[arg(long)]
    pub invariance: bool,
    /// Masking count and special-token rules.
    #[arg(long)]
    pub masking: bool,
    #[arg(long, default_value_t = 100)]
    pub batches: usize,
    #[arg(long, env = "CPFT_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, PartialEq)]
enum Stage {
    One,
    Two,
}

impl TrainArgs {
    fn config(&self, stage: Stage) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        let prefix = if stage == Stage::One { "stage1" } else { "stage2" };
        let mut set = |key: &str, v: String| cfg.set(key, &v);
        if let Some(s) = self.seed {
            set("stage1.seed", s.to_string())?;
            set("stage2.seed", s.to_string())?;
        }
        if let Some(v) = self.epochs {
            set(&format!("{prefix}.epochs"), v.to_string())?;
        }
        if let Some(v) = self.batch {
            set(&format!("{prefix}.batch"), v.to_string())?;
        }
        if let Some(v) = self.tau {
            set(&format!("{prefix}.tau"), format!("{v:?}"))?;
        }
        if let Some(v) = self.lambda {
            set("stage1.lambda", format!("{v:?}"))?;
        }
        if let Some(v) = self.lambda2 {
            set("stage2.lambda2", format!("{v:?}"))?;
        }
        if let Some(v) = self.epsilon {
            set("stage2.epsilon", format!("{v:?}"))?;
        }
        if let Some(v) = self.kshot {
            set("stage2.kshot", v.to_string())?;
        }
        for o in &self.overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("`--set {o}` is not KEY=VALUE")))?;
            set(k.trim(), v.trim().to_owned())?;
        }
        Ok(cfg)
    }

    fn dataset(&self) -> Result<LabeledDataset> {
        let p = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("--dataset is required".into()))?;
        load(p)
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        let p = self
            .checkpoint
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("--checkpoint is required".into()))?;
        Checkpoint::load(p)
    }

    fn corpus(&self) -> Result<Option<(Vec<LabeledDataset>, PretrainCorpus)>> {
        if self.corpus.is_empty() {
            return Ok(None);
        }
        let sources = self.corpus.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
        let corpus = build_pretraining_corpus(&sources, DEFAULT_MIN_TOKENS)?;
        Ok(Some((sources, corpus)))
    }

    fn split(&self) -> Result<Split> {
        serde_json::from_value(serde_json::Value::String(self.split.clone()))
            .map_err(|_| Error::InvalidArgument(format!("unknown split `{}`", self.split)))
    }
}

fn load(path: &Path) -> Result<LabeledDataset> {
    load_dataset(path, DatasetFormat::detect(path))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<i32> {
    let ds = generate_synthetic(a.intents, a.per_intent, a.confusability, a.seed)?;
    match a.format {
        FormatArg::Jsonl => save_jsonl(&ds, &a.out)?,
        FormatArg::Pairfile => save_pairfile(&ds, &a.out)?,
    }
    eprintln!("wrote {} utterances, {} intents to {}", ds.utterances().len(), ds.num_classes(), a.out.display());
    Ok(EXIT_OK)
}

fn cmd_build_vocab(a: &BuildVocabArgs) -> Result<i32> {
    let sources = a.corpus.iter().map(|p| load(p)).collect::<Result<Vec<_>>>()?;
    let vocab = build_vocab(&build_pretraining_corpus(&sources, 1)?, a.min_freq)?;
    vocab.save(&a.out)?;
    eprintln!("wrote {} tokens to {} (hash {})", vocab.size(), a.out.display(), vocab.hash());
    Ok(EXIT_OK)
}

fn cmd_pretrain(a: &TrainArgs) -> Result<i32> {
    let cfg = a.config(Stage::One)?;
    let (sources, corpus) = a
        .corpus()?
        .ok_or_else(|| Error::InvalidArgument("--corpus is required".into()))?;
    let vocab = match &a.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => build_vocab(&build_pretraining_corpus(&sources, 1)?, 1)?,
    };
    let out = a
        .out
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--out is required".into()))?;
    let ckpt = pretrain(&corpus, &vocab, &cfg)?;
    ckpt.save(out)?;
    print!("{}", to_jsonl(&ckpt.history)?);
    Ok(EXIT_OK)
}

fn cmd_finetune(a: &TrainArgs) -> Result<i32> {
    let cfg = a.config(Stage::Two)?;
    let ds = a.dataset()?;
    let base = a.checkpoint()?;
    let corpus = a.corpus()?.map(|(_, c)| c);
    let sample = sample_k_shot(&ds, cfg.stage2.kshot, cfg.stage2.seed)?;
    let out = finetune_with_corpus(&base, &sample, &ds, &cfg, corpus.as_ref())?;
    if let Some(p) = &a.out {
        out.checkpoint.save(p)?;
    }
    let stage2: Vec<_> = out.checkpoint.history.iter().skip(base.history.len()).collect();
    print!("{}", to_jsonl(&stage2)?);
    eprintln!(
        "best epoch {} (validation accuracy {:?}), {} steps",
        out.best_epoch, out.best_val_accuracy, out.telemetry.steps
    );
    Ok(EXIT_OK)
}

fn cmd_eval(a: &TrainArgs) -> Result<i32> {
    let cfg = a.config(Stage::Two)?;
    let ds = a.dataset()?;
    let ckpt = a.checkpoint()?;
    match a.repeats {
        Some(r) => {
            let report = run_repeated(&ckpt, &ds, &cfg, r)?;
            emit(a.out.as_deref(), &to_jsonl(&report.lines("repeated"))?)?;
            eprintln!(
                "mean accuracy {:.4}, population variance {:.6} over {} runs",
                report.mean,
                report.variance,
                report.runs.len()
            );
        }
        None => {
            let report = evaluate_accuracy(&ckpt, &ds, a.split()?, cfg.stage2.seed)?;
            emit(a.out.as_deref(), &to_jsonl(&[report])?)?;
        }
    }
    Ok(EXIT_OK)
}

fn cmd_ablate(a: &TrainArgs) -> Result<i32> {
    let cfg = a.config(Stage::Two)?;
    let ds = a.dataset()?;
    let extra = a.corpus()?.map(|(s, _)| s).unwrap_or_default();
    let opts = AblationOptions {
        repeats: a.repeats.unwrap_or(5),
        exclude_target: a.exclude_target,
        extra_sources: extra,
    };
    let report = run_ablation(&ds, &cfg, &opts)?;
    print!("{}", report.table());
    let lines = to_jsonl(&report.lines())?;
    match &a.out {
        Some(p) => fs::write(p, lines)?,
        None => eprint!("{lines}"),
    }
    Ok(EXIT_OK)
}

fn cmd_grid(a: &TrainArgs) -> Result<i32> {
    let cfg = a.config(Stage::Two)?;
    let ds = a.dataset()?;
    let base = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?,
        None => match a.corpus()? {
            Some((sources, corpus)) => {
                let mut all = sources;
                all.push(ds.clone());
                let vocab = build_vocab(&build_pretraining_corpus(&all, 1)?, 1)?;
                pretrain(&corpus, &vocab, &cfg)?
            }
            None => {
                let vocab = build_vocab(&build_pretraining_corpus(std::slice::from_ref(&ds), 1)?, 1)?;
                initial_checkpoint(&vocab, &cfg)?
            }
        },
    };
    let taus = if a.tau_grid.is_empty() { TAU_GRID.to_vec() } else { a.tau_grid.clone() };
    let lambdas = if a.lambda2_grid.is_empty() { LAMBDA2_GRID.to_vec() } else { a.lambda2_grid.clone() };
    let g = grid_search(&taus, &lambdas, |t, l| validation_score(&base, &ds, &cfg, t, l))?;
    emit(a.out.as_deref(), &to_jsonl(&g.cells)?)?;
    eprintln!(
        "best tau {} lambda2 {} (validation accuracy {:.4}) over {} runs",
        g.best.tau, g.best.lambda2, g.best.score, g.runs
    );
    Ok(EXIT_OK)
}

fn cmd_check(a: &CheckArgs) -> Result<i32> {
    let all = !(a.losses || a.grad || a.invariance || a.masking);
    let (losses, grad) = (all || a.losses, all || a.grad);
    let mut lines = Vec::new();
    if losses {
        lines.extend(suite::loss_equivalence(a.batches, a.seed)?);
        lines.extend(suite::analytic_values()?);
    }
    if grad {
        lines.extend(suite::standalone_gradients(a.seed)?);
        lines.extend(suite::composed_gradients(a.seed)?.into_iter().map(|(l, _)| l));
    }
    if all || a.invariance {
        lines.extend(suite::invariances(a.batches, a.seed)?);
    }
    if all || a.masking {
        lines.extend(suite::masking_properties(10_000, a.seed)?);
    }
    print!("{}", suite::format_table(&lines));
    Ok(if lines.iter().all(|l| l.passed) { EXIT_OK } else { EXIT_CHECK_FAILED })
}

pub fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::BuildVocab(a) => cmd_build_vocab(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Check(a) => cmd_check(a),
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e @ (Error::InvalidArgument(_) | Error::Config(_))) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("cpft").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn unknown_verb_and_flag_are_usage_errors() {
        assert_eq!(run(["cpft", "train"]), EXIT_USAGE);
        assert_eq!(run(["cpft", "finetune", "--bogus", "1"]), EXIT_USAGE);
        assert_eq!(run(["cpft", "finetune", "--tau", "x"]), EXIT_USAGE);
    }

    #[test]
    fn flags_map_to_stage_keys() {
        let cli = parse(&["finetune", "--kshot", "5", "--tau", "0.1", "--lambda2", "0.03", "--epochs", "30", "--batch", "16"]);
        let Command::Finetune(a) = &cli.command else { panic!() };
        let c = a.config(Stage::Two).unwrap();
        let d = TrainConfig::default();
        assert_eq!((c.stage2.kshot, c.stage2.tau, c.stage2.lambda2), (5, 0.1, 0.03));
        assert_eq!((c.stage2.epochs, c.stage2.batch), (30, 16));
        assert_eq!(c.stage1, d.stage1);

        let cli = parse(&["pretrain", "--epochs", "3", "--tau", "0.2", "--lambda", "0.5", "--seed", "9"]);
        let Command::Pretrain(a) = &cli.command else { panic!() };
        let c = a.config(Stage::One).unwrap();
        assert_eq!((c.stage1.epochs, c.stage1.tau, c.stage1.lambda, c.stage1.seed), (3, 0.2, 0.5, 9));
        assert_eq!(c.stage2.epochs, d.stage2.epochs);
        assert_eq!(c.stage2.seed, 9);
    }

    #[test]
    fn flags_override_file_and_set_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        fs::write(&p, "stage2.tau = 0.5\nstage2.epochs = 4\n").unwrap();
        let ps = p.to_str().unwrap();
        let cli = parse(&["grid", "--config", ps, "--tau", "0.3", "--set", "stage2.epochs=7"]);
        let Command::Grid(a) = &cli.command else { panic!() };
        let c = a.config(Stage::Two).unwrap();
        assert_eq!((c.stage2.tau, c.stage2.epochs), (0.3, 7));
    }

    #[test]
    fn missing_required_input_is_usage_error() {
        assert_eq!(run(["cpft", "finetune", "--kshot", "5"]), EXIT_USAGE);
        assert_eq!(run(["cpft", "eval", "--dataset", "/nonexistent/x.jsonl", "--checkpoint", "/nonexistent/c"]), EXIT_RUNTIME);
    }
}
