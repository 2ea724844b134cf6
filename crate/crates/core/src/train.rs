//! The two-stage schedule: contrastive pre-training on unlabeled text, then
//! few-shot fine-tuning with supervised contrastive and intent losses.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, EpochRecord, StageTag};
use crate::config::TrainConfig;
use crate::corpus::{FewShotSample, LabeledDataset, PretrainCorpus, Split};
use crate::encoder::{backward, forward, init_params, DropoutState, EncoderParams, ForwardOptions, Upstream};
use crate::error::{Error, Result};
use crate::eval::predict;
use crate::losses::{
    intent_loss, mlm_loss, stage1_loss, supervised_contrastive_loss, unsupervised_contrastive_loss, GradKey,
    LossBundle, MlmTarget, Temperature,
};
use crate::optim::{optimizer_step, AdamConfig, OptimizerState};
use crate::rng::{mix, rng_for, Stream};
use crate::tensor::Mat;
use crate::tokenizer::{apply_dynamic_mask, encode, MaskPlan, TokenSequence, Vocabulary};

const STAGE1: u64 = 1;
const STAGE2: u64 = 2;

/// Permutation of `0..n` that depends only on `(seed, stage, epoch)`.
pub fn shuffle_order(n: usize, seed: u64, stage: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, Stream::Shuffle, &[stage, epoch as u64]));
    order
}

fn dropout_seed(seed: u64, stage: u64) -> u64 {
    mix(seed, Stream::Dropout, &[stage])
}

/// One stage-1 step's input: `n` clean encodings followed by their `n`
/// masked copies, all in one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Batch {
    pub sequences: Vec<TokenSequence>,
    pub n: usize,
    /// Corpus index of each pair.
    pub members: Vec<usize>,
    pub plans: Vec<MaskPlan>,
    /// Rows of the stacked MLM logits, which cover all `2n` sequences.
    pub targets: Vec<MlmTarget>,
    /// Corpus indices dropped because nothing in them could be masked.
    pub skipped: Vec<usize>,
    pub dropout: DropoutState,
}

/// Builds the paired batch for corpus entries `indices` at `epoch`. Masks are
/// keyed by `(stage1.seed, epoch, corpus index)`.
pub fn make_stage1_batch(
    corpus: &PretrainCorpus,
    indices: &[usize],
    vocab: &Vocabulary,
    config: &TrainConfig,
    epoch: usize,
    draw: u64,
) -> Result<Stage1Batch> {
    let s1 = &config.stage1;
    if indices.len() > s1.batch {
        return Err(Error::InvalidArgument(format!(
            "{} utterances exceed batch size {}",
            indices.len(),
            s1.batch
        )));
    }
    let mut clean = Vec::with_capacity(indices.len());
    let mut masked = Vec::with_capacity(indices.len());
    let mut members = Vec::with_capacity(indices.len());
    let mut plans = Vec::with_capacity(indices.len());
    let mut skipped = Vec::new();
    for &i in indices {
        let u = corpus
            .utterances()
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("corpus index {i} out of range")))?;
        let seq = encode(vocab, u, config.encoder.max_len)?;
        match apply_dynamic_mask(&seq, vocab.size(), s1.mask_rate, s1.seed, epoch as u64, i as u64) {
            Ok((m, plan)) => {
                clean.push(seq);
                masked.push(m);
                members.push(i);
                plans.push(plan);
            }
            Err(Error::NothingToMask) => {
                warn!("skipping corpus utterance {i}: no maskable token");
                skipped.push(i);
            }
            Err(e) => return Err(e),
        }
    }
    let n = clean.len();
    let mut offset: usize = clean.iter().map(TokenSequence::len).sum();
    let mut targets = Vec::new();
    for (seq, plan) in masked.iter().zip(&plans) {
        for (&p, &orig) in plan.positions.iter().zip(&plan.original) {
            targets.push(MlmTarget {
                row: offset + p,
                target: orig,
            });
        }
        offset += seq.len();
    }
    clean.extend(masked);
    Ok(Stage1Batch {
        sequences: clean,
        n,
        members,
        plans,
        targets,
        skipped,
        dropout: DropoutState::train(dropout_seed(s1.seed, STAGE1), draw),
    })
}

/// Loss value of one step and its unweighted components.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub components: BTreeMap<&'static str, f64>,
}

fn vstack(a: &Mat, b: &Mat) -> Mat {
    let mut data = a.data.clone();
    data.extend_from_slice(&b.data);
    Mat::from_vec(a.rows + b.rows, a.cols, data)
}

/// Stage-1 loss `L_uns_cl + λ·L_mlm` and its parameter gradients. With
/// `λ = 0` the MLM head is not evaluated, so its gradient is exactly zero.
pub fn stage1_gradients(
    params: &EncoderParams,
    batch: &Stage1Batch,
    config: &TrainConfig,
) -> Result<(StepLoss, EncoderParams)> {
    let s1 = &config.stage1;
    let use_mlm = s1.lambda != 0.0 && !batch.targets.is_empty();
    let (out, tape) = forward(params, &batch.sequences, &batch.dropout, ForwardOptions { mlm: use_mlm })?;
    let n = batch.n;
    let d = params.config.d_model;
    let anchors = Mat::from_vec(n, d, out.pooled.data[..n * d].to_vec());
    let views = Mat::from_vec(n, d, out.pooled.data[n * d..].to_vec());
    let uns = unsupervised_contrastive_loss(&anchors, &views, Temperature::new(s1.tau)?)?;
    let mut components = BTreeMap::from([("uns_cl", uns.value)]);
    let total: LossBundle = if use_mlm {
        let logits = &out.mlm.as_ref().expect("mlm requested").logits;
        let mlm = mlm_loss(logits, &batch.targets)?;
        components.insert("mlm", mlm.value);
        stage1_loss(&uns, &mlm, s1.lambda)
    } else {
        uns
    };
    let pooled = vstack(
        total.grad(GradKey::Anchors).expect("anchor grad"),
        total.grad(GradKey::MaskedViews).expect("view grad"),
    );
    let grads = backward(
        params,
        &tape,
        &Upstream {
            pooled: Some(&pooled),
            mlm: total.grad(GradKey::MlmLogits),
            intent: None,
        },
    )?;
    Ok((
        StepLoss {
            total: total.value,
            components,
        },
        grads,
    ))
}

fn record(stage: StageTag, epoch: usize, sums: &BTreeMap<&'static str, f64>, total: f64, steps: usize) -> EpochRecord {
    let k = steps.max(1) as f64;
    EpochRecord {
        stage,
        epoch,
        loss: total / k,
        components: sums.iter().map(|(n, v)| (n.to_string(), v / k)).collect(),
        val_accuracy: None,
    }
}

fn accumulate(sums: &mut BTreeMap<&'static str, f64>, step: &StepLoss) {
    for (k, v) in &step.components {
        *sums.entry(k).or_insert(0.0) += v;
    }
}

fn check_finite(loss: f64, grads: &EncoderParams, epoch: usize, step: usize) -> Result<()> {
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Diverged { epoch, step, loss });
    }
    Ok(())
}

/// Freshly initialized encoder for `vocab`, seeded by `stage1.seed`.
pub fn initial_checkpoint(vocab: &Vocabulary, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let params = init_params(&config.encoder_config(vocab.size()), config.stage1.seed)?;
    Checkpoint::new(params, vocab.clone(), StageTag::Initialized, config.fingerprint())
}

/// Stage 1 from a fresh initialization.
pub fn pretrain(corpus: &PretrainCorpus, vocab: &Vocabulary, config: &TrainConfig) -> Result<Checkpoint> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ckpt = initial_checkpoint(vocab, config)?;
    let s1 = &config.stage1;
    let mut state = OptimizerState::new(&ckpt.params, AdamConfig::with_lr(s1.lr));
    let mut draw = 0u64;
    let mut step = 0usize;
    for epoch in 0..s1.epochs {
        let order = shuffle_order(corpus.len(), s1.seed, STAGE1, epoch);
        let mut sums = BTreeMap::new();
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(s1.batch) {
            let batch = make_stage1_batch(corpus, chunk, vocab, config, epoch, draw)?;
            draw += batch.sequences.len() as u64;
            if batch.n == 0 {
                continue;
            }
            let (loss, grads) = stage1_gradients(&ckpt.params, &batch, config)?;
            check_finite(loss.total, &grads, epoch, step)?;
            optimizer_step(&mut ckpt.params, &grads, &mut state)?;
            accumulate(&mut sums, &loss);
            total += loss.total;
            steps += 1;
            step += 1;
        }
        let rec = record(StageTag::Pretrained, epoch, &sums, total, steps);
        info!("stage 1 epoch {epoch}: loss {:.6}", rec.loss);
        ckpt.history.push(rec);
    }
    ckpt.stage = StageTag::Pretrained;
    ckpt.config_fingerprint = config.fingerprint();
    Ok(ckpt)
}

/// One stage-2 step's input: every utterance twice, first views then second
/// views, each entry with its own dropout draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Batch {
    pub sequences: Vec<TokenSequence>,
    pub labels: Vec<usize>,
    pub view_of: Vec<usize>,
    pub dropout: DropoutState,
}

pub fn make_stage2_batch(items: &[(TokenSequence, usize)], seed: u64, draw: u64) -> Stage2Batch {
    let n = items.len();
    let mut sequences = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    let mut view_of = Vec::with_capacity(2 * n);
    for _ in 0..2 {
        for (i, (seq, y)) in items.iter().enumerate() {
            sequences.push(seq.clone());
            labels.push(*y);
            view_of.push(i);
        }
    }
    Stage2Batch {
        sequences,
        labels,
        view_of,
        dropout: DropoutState::train(dropout_seed(seed, STAGE2), draw),
    }
}

/// Stage-2 loss and gradients. With `scl` on: `L_s_cl + λ′·L_intent`;
/// off: `λ′·L_intent` alone.
pub fn stage2_gradients(
    params: &EncoderParams,
    batch: &Stage2Batch,
    config: &TrainConfig,
) -> Result<(StepLoss, EncoderParams)> {
    let s2 = &config.stage2;
    let (out, tape) = forward(params, &batch.sequences, &batch.dropout, ForwardOptions::default())?;
    let logits = out
        .intent_logits
        .as_ref()
        .ok_or_else(|| Error::Shape("fine-tuning requires an intent head".into()))?;
    let intent = intent_loss(logits, &batch.labels, s2.epsilon)?;
    let mut components = BTreeMap::from([("intent", intent.value)]);
    let total = if s2.scl {
        let scl = supervised_contrastive_loss(&out.pooled, &batch.labels, &batch.view_of, Temperature::new(s2.tau)?)?;
        components.insert("s_cl", scl.value);
        LossBundle::combine(&scl, &intent, s2.lambda2)
    } else {
        let mut weighted = intent.clone();
        weighted.value *= s2.lambda2;
        for g in weighted.grads.values_mut() {
            g.scale(s2.lambda2);
        }
        weighted
    };
    let grads = backward(
        params,
        &tape,
        &Upstream {
            pooled: total.grad(GradKey::Views),
            mlm: None,
            intent: total.grad(GradKey::IntentLogits),
        },
    )?;
    Ok((
        StepLoss {
            total: total.value,
            components,
        },
        grads,
    ))
}

/// Counts of loss terms actually evaluated during fine-tuning.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage2Telemetry {
    pub epochs: usize,
    pub steps: usize,
    pub scl_terms: usize,
    pub intent_terms: usize,
    pub stage1_terms: usize,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: Option<f64>,
    pub telemetry: Stage2Telemetry,
}

fn check_sample(sample: &FewShotSample, dataset: &LabeledDataset) -> Result<()> {
    if sample.dataset != dataset.name() {
        return Err(Error::InvalidArgument(format!(
            "few-shot sample drawn from `{}`, not `{}`",
            sample.dataset,
            dataset.name()
        )));
    }
    let c = dataset.num_classes();
    let mut seen = vec![false; c];
    for (u, y) in &sample.selected {
        let name = dataset.label_set().get(*y);
        if name.is_none() || u.label() != name.map(String::as_str) {
            return Err(Error::InvalidArgument(format!(
                "few-shot sample class {y} ({:?}) is not in the label set of `{}`",
                u.label(),
                dataset.name()
            )));
        }
        seen[*y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidArgument(format!(
            "few-shot sample has no example of class `{}`",
            dataset.label_set()[missing]
        )));
    }
    Ok(())
}

/// Stage 2 without the joint stage-1 term.
pub fn finetune(
    checkpoint: &Checkpoint,
    sample: &FewShotSample,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<FinetuneOutcome> {
    finetune_with_corpus(checkpoint, sample, dataset, config, None)
}

/// Stage 2. When `stage2.joint` is set, every step also adds the stage-1
/// objective on the next batch of `corpus`.
pub fn finetune_with_corpus(
    checkpoint: &Checkpoint,
    sample: &FewShotSample,
    dataset: &LabeledDataset,
    config: &TrainConfig,
    corpus: Option<&PretrainCorpus>,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    checkpoint.verify_vocab()?;
    check_sample(sample, dataset)?;
    if sample.is_empty() {
        return Err(Error::InvalidArgument("few-shot sample is empty".into()));
    }
    let joint = match (config.stage2.joint, corpus) {
        (false, _) => None,
        (true, Some(c)) if !c.is_empty() => Some(c),
        (true, _) => return Err(Error::Config("stage2.joint needs a non-empty corpus".into())),
    };
    let s2 = &config.stage2;
    let vocab = &checkpoint.vocab;
    let max_len = checkpoint.params.config.max_len;
    let c = dataset.num_classes();

    let mut params = checkpoint.params.clone();
    params.attach_intent_head(c, mix(s2.seed, Stream::Init, &[STAGE2]));
    let mut state = OptimizerState::new(&params, AdamConfig::with_lr(s2.lr));

    let train: Vec<(TokenSequence, usize)> = sample
        .selected
        .iter()
        .map(|(u, y)| Ok((encode(vocab, u, max_len)?, *y)))
        .collect::<Result<_>>()?;
    let val = dataset.labeled_split(Split::Validation);
    let val_seqs: Vec<TokenSequence> = val.iter().map(|(u, _)| encode(vocab, u, max_len)).collect::<Result<_>>()?;
    let val_gold: Vec<usize> = val.iter().map(|(_, y)| *y).collect();

    let mut history = checkpoint.history.clone();
    let mut telemetry = Stage2Telemetry::default();
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let mut draw = 0u64;
    let mut step = 0usize;
    let mut joint_cursor = 0usize;
    let mut joint_draw = 1u64 << 40;
    for epoch in 0..s2.epochs {
        let order = shuffle_order(train.len(), s2.seed, STAGE2, epoch);
        let mut sums = BTreeMap::new();
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(s2.batch) {
            let items: Vec<(TokenSequence, usize)> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = make_stage2_batch(&items, s2.seed, draw);
            draw += batch.sequences.len() as u64;
            let (mut loss, mut grads) = stage2_gradients(&params, &batch, config)?;
            telemetry.intent_terms += 1;
            if s2.scl {
                telemetry.scl_terms += 1;
            }
            if let Some(corpus) = joint {
                let take = config.stage1.batch.min(corpus.len());
                let idx: Vec<usize> = (0..take).map(|k| (joint_cursor + k) % corpus.len()).collect();
                joint_cursor = (joint_cursor + take) % corpus.len();
                let b1 = make_stage1_batch(corpus, &idx, vocab, config, epoch, joint_draw)?;
                joint_draw += b1.sequences.len() as u64;
                if b1.n > 0 {
                    let (l1, g1) = stage1_gradients(&params, &b1, config)?;
                    grads.add_scaled(&g1, 1.0);
                    loss.total += l1.total;
                    for (k, v) in l1.components {
                        loss.components.insert(k, v);
                    }
                    telemetry.stage1_terms += 1;
                }
            }
            check_finite(loss.total, &grads, epoch, step)?;
            optimizer_step(&mut params, &grads, &mut state)?;
            accumulate(&mut sums, &loss);
            total += loss.total;
            steps += 1;
            step += 1;
        }
        telemetry.steps += steps;
        telemetry.epochs += 1;
        let mut rec = record(StageTag::Finetuned, epoch, &sums, total, steps);
        if !val_seqs.is_empty() {
            let pred = predict(&params, &val_seqs)?;
            let correct = pred.iter().zip(&val_gold).filter(|(p, g)| p == g).count();
            let acc = correct as f64 / val_seqs.len() as f64;
            rec.val_accuracy = Some(acc);
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, params.clone()));
            }
        }
        debug!("stage 2 epoch {epoch}: loss {:.6} val {:?}", rec.loss, rec.val_accuracy);
        history.push(rec);
    }
    let (best_val_accuracy, best_epoch, params) = match best {
        Some((acc, epoch, p)) => (Some(acc), epoch, p),
        None => (None, s2.epochs.saturating_sub(1), params),
    };
    let mut out = Checkpoint::new(params, vocab.clone(), StageTag::Finetuned, config.fingerprint())?;
    out.history = history;
    out.label_set = dataset.label_set().to_vec();
    Ok(FinetuneOutcome {
        checkpoint: out,
        best_epoch,
        best_val_accuracy,
        telemetry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_pretraining_corpus, generate_synthetic, sample_k_shot};
    use crate::encoder::embed;
    use crate::tokenizer::build_vocab;

    fn small_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.encoder.d_model = 16;
        c.encoder.n_heads = 2;
        c.encoder.d_ff = 32;
        c.encoder.n_layers = 1;
        c.stage1.batch = 16;
        c.stage1.epochs = 2;
        c.stage2.epochs = 2;
        c.stage2.batch = 8;
        c
    }

    fn setup() -> (LabeledDataset, PretrainCorpus, Vocabulary) {
        let ds = generate_synthetic(4, 20, 0.5, 1).unwrap();
        let corpus = build_pretraining_corpus(std::slice::from_ref(&ds), 1).unwrap();
        let vocab = build_vocab(&corpus, 1).unwrap();
        (ds, corpus, vocab)
    }

    #[test]
    fn stage1_batch_pairs_and_targets() {
        let (_, corpus, vocab) = setup();
        let cfg = small_config();
        let idx: Vec<usize> = (0..10).collect();
        let b = make_stage1_batch(&corpus, &idx, &vocab, &cfg, 0, 0).unwrap();
        assert_eq!(b.n, 10);
        assert_eq!(b.sequences.len(), 20);
        let offset: usize = b.sequences[..10].iter().map(TokenSequence::len).sum();
        let mut row = offset;
        let mut t = b.targets.iter();
        for k in 0..10 {
            assert_eq!(b.sequences[k].ids(), encode(&vocab, &corpus.utterances()[k], 32).unwrap().ids());
            for (&p, &orig) in b.plans[k].positions.iter().zip(&b.plans[k].original) {
                let tg = t.next().unwrap();
                assert_eq!((tg.row, tg.target), (row + p, orig));
                assert_eq!(b.sequences[k].ids()[p], orig);
            }
            row += b.sequences[10 + k].len();
        }
        assert!(t.next().is_none());
    }

    #[test]
    fn stage1_batch_rejects_oversized_slice() {
        let (_, corpus, vocab) = setup();
        let cfg = small_config();
        let idx: Vec<usize> = (0..17).collect();
        assert!(make_stage1_batch(&corpus, &idx, &vocab, &cfg, 0, 0).is_err());
    }

    #[test]
    fn masks_change_between_epochs() {
        let (_, corpus, vocab) = setup();
        let cfg = small_config();
        let idx: Vec<usize> = (0..16).collect();
        let a = make_stage1_batch(&corpus, &idx, &vocab, &cfg, 3, 0).unwrap();
        let b = make_stage1_batch(&corpus, &idx, &vocab, &cfg, 4, 0).unwrap();
        assert_ne!(a.plans, b.plans);
        assert_eq!(a, make_stage1_batch(&corpus, &idx, &vocab, &cfg, 3, 0).unwrap());
    }

    #[test]
    fn shuffle_is_a_pure_permutation() {
        let a = shuffle_order(50, 7, STAGE1, 2);
        assert_eq!(a, shuffle_order(50, 7, STAGE1, 2));
        assert_ne!(a, shuffle_order(50, 7, STAGE1, 3));
        let mut s = a.clone();
        s.sort_unstable();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn zero_lambda_leaves_mlm_head_untouched() {
        let (_, corpus, vocab) = setup();
        let mut cfg = small_config();
        cfg.stage1.lambda = 0.0;
        let ck = initial_checkpoint(&vocab, &cfg).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let b = make_stage1_batch(&corpus, &idx, &vocab, &cfg, 0, 0).unwrap();
        let (loss, g) = stage1_gradients(&ck.params, &b, &cfg).unwrap();
        assert!(!loss.components.contains_key("mlm"));
        assert!(g.mlm_w.data.iter().chain(&g.mlm_b.data).all(|&x| x == 0.0));
        let out = pretrain(&corpus, &vocab, &cfg).unwrap();
        assert_eq!(out.params.mlm_w, ck.params.mlm_w);
        assert_eq!(out.params.mlm_b, ck.params.mlm_b);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let (_, corpus, vocab) = setup();
        let cfg = small_config();
        let a = pretrain(&corpus, &vocab, &cfg).unwrap();
        let b = pretrain(&corpus, &vocab, &cfg).unwrap();
        assert_eq!(a.history.len(), 2);
        assert_eq!(a, b);
        assert_eq!(a.stage, StageTag::Pretrained);
    }

    #[test]
    fn stage2_batch_layout() {
        let items: Vec<(TokenSequence, usize)> = (0..16)
            .map(|i| (TokenSequence::from_ids(vec![2, 4 + i % 3], 4).unwrap(), i % 4))
            .collect();
        let b = make_stage2_batch(&items, 0, 10);
        assert_eq!(b.sequences.len(), 32);
        for i in 0..16 {
            assert_eq!(b.sequences[i], b.sequences[16 + i]);
            assert_eq!((b.view_of[i], b.view_of[16 + i]), (i, i));
            assert_eq!(b.labels[i], b.labels[16 + i]);
        }
        let own_pairs = (0..32).filter(|&i| b.view_of.iter().enumerate().any(|(j, &v)| j != i && v == b.view_of[i])).count();
        assert_eq!(own_pairs, 32);
    }

    #[test]
    fn stage2_views_coincide_without_dropout() {
        let (ds, _, vocab) = setup();
        let mut cfg = small_config();
        cfg.encoder.dropout_p = 0.0;
        let mut ck = initial_checkpoint(&vocab, &cfg).unwrap();
        ck.params.attach_intent_head(ds.num_classes(), 0);
        let s = sample_k_shot(&ds, 2, 0).unwrap();
        let items: Vec<(TokenSequence, usize)> =
            s.selected.iter().map(|(u, y)| (encode(&vocab, u, 32).unwrap(), *y)).collect();
        let b = make_stage2_batch(&items, 0, 0);
        let (out, _) = forward(&ck.params, &b.sequences, &b.dropout, ForwardOptions::default()).unwrap();
        let n = items.len();
        for i in 0..n {
            assert_eq!(out.pooled.row(i), out.pooled.row(n + i));
        }
        let (loss, _) = stage2_gradients(&ck.params, &b, &cfg).unwrap();
        assert!(loss.total.is_finite());
    }

    #[test]
    fn intent_head_moves_only_with_positive_lambda2() {
        let (ds, _, vocab) = setup();
        let mut cfg = small_config();
        cfg.encoder.dropout_p = 0.0;
        cfg.stage2.epochs = 1;
        cfg.stage2.batch = 100;
        let ck = initial_checkpoint(&vocab, &cfg).unwrap();
        let s = sample_k_shot(&ds, 2, 0).unwrap();
        let head = |c: &TrainConfig| {
            let mut p = ck.params.clone();
            p.attach_intent_head(ds.num_classes(), mix(c.stage2.seed, Stream::Init, &[STAGE2]));
            p.intent.unwrap()
        };
        cfg.stage2.lambda2 = 0.0;
        let out = finetune(&ck, &s, &ds, &cfg).unwrap();
        assert_eq!(out.checkpoint.params.intent.clone().unwrap(), head(&cfg));
        cfg.stage2.lambda2 = 0.05;
        let out = finetune(&ck, &s, &ds, &cfg).unwrap();
        assert_ne!(out.checkpoint.params.intent.clone().unwrap(), head(&cfg));
    }

    #[test]
    fn finetune_checks_inputs_and_is_deterministic() {
        let (ds, _, vocab) = setup();
        let cfg = small_config();
        let ck = initial_checkpoint(&vocab, &cfg).unwrap();
        let s = sample_k_shot(&ds, 3, 1).unwrap();
        let a = finetune(&ck, &s, &ds, &cfg).unwrap();
        let b = finetune(&ck, &s, &ds, &cfg).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.telemetry.steps, 2 * 2);
        assert_eq!(a.telemetry.scl_terms, 4);
        assert_eq!(a.checkpoint.label_set, ds.label_set());
        assert!(a.best_val_accuracy.is_some());

        let mut bad = s.clone();
        bad.selected.retain(|(_, y)| *y != 0);
        assert!(matches!(finetune(&ck, &bad, &ds, &cfg), Err(Error::InvalidArgument(_))));
        let mut bad = s.clone();
        bad.selected[0].1 = 1 - bad.selected[0].1.min(1);
        assert!(finetune(&ck, &bad, &ds, &cfg).is_err());
        let mut bad = s.clone();
        bad.dataset = "other".into();
        assert!(finetune(&ck, &bad, &ds, &cfg).is_err());
        let mut tampered = ck.clone();
        tampered.vocab_hash = "x".into();
        assert!(matches!(finetune(&tampered, &s, &ds, &cfg), Err(Error::VocabMismatch { .. })));
    }

    #[test]
    fn no_scl_skips_contrastive_term() {
        let (ds, _, vocab) = setup();
        let mut cfg = small_config();
        cfg.stage2.scl = false;
        let ck = initial_checkpoint(&vocab, &cfg).unwrap();
        let s = sample_k_shot(&ds, 3, 1).unwrap();
        let out = finetune(&ck, &s, &ds, &cfg).unwrap();
        assert_eq!(out.telemetry.scl_terms, 0);
        assert_eq!(out.telemetry.intent_terms, out.telemetry.steps);
        for rec in out.checkpoint.history.iter().filter(|r| r.stage == StageTag::Finetuned) {
            assert!(!rec.components.contains_key("s_cl"));
            assert!((rec.loss - cfg.stage2.lambda2 * rec.components["intent"]).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_mode_needs_corpus_and_adds_stage1_terms() {
        let (ds, corpus, vocab) = setup();
        let mut cfg = small_config();
        cfg.stage2.joint = true;
        let ck = initial_checkpoint(&vocab, &cfg).unwrap();
        let s = sample_k_shot(&ds, 2, 1).unwrap();
        assert!(matches!(finetune(&ck, &s, &ds, &cfg), Err(Error::Config(_))));
        let out = finetune_with_corpus(&ck, &s, &ds, &cfg, Some(&corpus)).unwrap();
        assert_eq!(out.telemetry.stage1_terms, out.telemetry.steps);
    }

    #[test]
    fn finetuned_checkpoint_round_trips() {
        let (ds, _, vocab) = setup();
        let cfg = small_config();
        let ck = initial_checkpoint(&vocab, &cfg).unwrap();
        let s = sample_k_shot(&ds, 2, 1).unwrap();
        let out = finetune(&ck, &s, &ds, &cfg).unwrap().checkpoint;
        let back = Checkpoint::from_bytes(&out.to_bytes().unwrap()).unwrap();
        let probe: Vec<TokenSequence> = ds.utterances()[..5].iter().map(|u| encode(&vocab, u, 32).unwrap()).collect();
        assert_eq!(embed(&out.params, &probe).unwrap(), embed(&back.params, &probe).unwrap());
        assert_eq!(back, out);
    }
}
