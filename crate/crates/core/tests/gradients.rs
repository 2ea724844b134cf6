//! Finite-difference checks of every loss, standalone and composed through
//! the encoder.

use std::collections::BTreeMap;

use cpft_core::encoder::{
    backward, forward, init_params, DropoutState, EncoderConfig, EncoderParams, ForwardOptions,
    Upstream,
};
use cpft_core::losses::{
    intent_loss, mlm_loss, stage1_loss, stage2_loss, supervised_contrastive_loss,
    unsupervised_contrastive_loss, GradKey, MlmTarget, Temperature,
};
use cpft_core::oracle::{check_loss_inputs, finite_diff_check_params, GradCheckOptions};
use cpft_core::tensor::Mat;
use cpft_core::tokenizer::{TokenSequence, CLS, MASK};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn standalone_opts() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-6,
        coords_per_tensor: 1000,
        seed: 1,
    }
}

#[test]
fn standalone_unsupervised() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tau = Temperature::new(0.1).unwrap();
    let h = random_mat(6, 5, &mut rng);
    let hb = random_mat(6, 5, &mut rng);
    let l = unsupervised_contrastive_loss(&h, &hb, tau).unwrap();
    let inputs = BTreeMap::from([("a".to_string(), h), ("b".to_string(), hb)]);
    let grads = BTreeMap::from([
        ("a".to_string(), l.grad(GradKey::Anchors).unwrap().clone()),
        ("b".to_string(), l.grad(GradKey::MaskedViews).unwrap().clone()),
    ]);
    let r = check_loss_inputs(
        &inputs,
        &grads,
        |t| Ok(unsupervised_contrastive_loss(&t[0], &t[1], tau)?.value),
        &standalone_opts(),
    )
    .unwrap();
    assert!(r.passed, "{r:#?}");
}

#[test]
fn standalone_supervised() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tau = Temperature::new(0.3).unwrap();
    let h = random_mat(8, 4, &mut rng);
    let labels = [0, 0, 1, 1, 2, 2, 0, 0];
    let view_of = [0, 0, 1, 1, 2, 2, 3, 3];
    let l = supervised_contrastive_loss(&h, &labels, &view_of, tau).unwrap();
    let inputs = BTreeMap::from([("h".to_string(), h)]);
    let grads = BTreeMap::from([("h".to_string(), l.grad(GradKey::Views).unwrap().clone())]);
    let r = check_loss_inputs(
        &inputs,
        &grads,
        |t| Ok(supervised_contrastive_loss(&t[0], &labels, &view_of, tau)?.value),
        &standalone_opts(),
    )
    .unwrap();
    assert!(r.passed, "{r:#?}");
}

#[test]
fn standalone_mlm() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits = random_mat(6, 12, &mut rng);
    let targets = [
        MlmTarget { row: 0, target: 3 },
        MlmTarget { row: 2, target: 11 },
        MlmTarget { row: 2, target: 0 },
        MlmTarget { row: 5, target: 7 },
    ];
    let l = mlm_loss(&logits, &targets).unwrap();
    let inputs = BTreeMap::from([("z".to_string(), logits)]);
    let grads = BTreeMap::from([("z".to_string(), l.grad(GradKey::MlmLogits).unwrap().clone())]);
    let r = check_loss_inputs(
        &inputs,
        &grads,
        |t| Ok(mlm_loss(&t[0], &targets)?.value),
        &standalone_opts(),
    )
    .unwrap();
    assert!(r.passed, "{r:#?}");
}

#[test]
fn standalone_intent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random_mat(8, 4, &mut rng);
    let labels = [0, 1, 2, 3, 3, 2, 1, 0];
    let l = intent_loss(&logits, &labels, 0.1).unwrap();
    let inputs = BTreeMap::from([("z".to_string(), logits)]);
    let grads = BTreeMap::from([(
        "z".to_string(),
        l.grad(GradKey::IntentLogits).unwrap().clone(),
    )]);
    let r = check_loss_inputs(
        &inputs,
        &grads,
        |t| Ok(intent_loss(&t[0], &labels, 0.1)?.value),
        &standalone_opts(),
    )
    .unwrap();
    assert!(r.passed, "{r:#?}");
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        max_len: 10,
        ..EncoderConfig::new(16)
    }
}

fn batch(n: usize, rng: &mut ChaCha8Rng) -> Vec<TokenSequence> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(3..9);
            let mut ids = vec![CLS];
            ids.extend((0..len).map(|_| rng.gen_range(4..16)));
            TokenSequence::from_ids(ids, 10).unwrap()
        })
        .collect()
}

fn composed_opts() -> GradCheckOptions {
    GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-4,
        coords_per_tensor: 20,
        seed: 11,
    }
}

/// Stage-1 objective through the encoder: clean and masked copies in one pass.
fn stage1_value(
    params: &EncoderParams,
    seqs: &[TokenSequence],
    targets: &[MlmTarget],
) -> cpft_core::Result<(f64, Option<EncoderParams>)> {
    let n = seqs.len() / 2;
    let tau = Temperature::new(0.1)?;
    let (out, tape) = forward(params, seqs, &DropoutState::train(5, 0), ForwardOptions { mlm: true })?;
    let anchors = Mat::from_vec(n, out.pooled.cols, out.pooled.data[..n * out.pooled.cols].to_vec());
    let views = Mat::from_vec(n, out.pooled.cols, out.pooled.data[n * out.pooled.cols..].to_vec());
    let uns = unsupervised_contrastive_loss(&anchors, &views, tau)?;
    let mlm = mlm_loss(&out.mlm.as_ref().unwrap().logits, targets)?;
    let total = stage1_loss(&uns, &mlm, 1.0);
    let mut dpooled = uns.grad(GradKey::Anchors).unwrap().clone();
    dpooled.data.extend_from_slice(&uns.grad(GradKey::MaskedViews).unwrap().data);
    dpooled.rows *= 2;
    let grads = backward(
        params,
        &tape,
        &Upstream {
            pooled: Some(&dpooled),
            mlm: total.grad(GradKey::MlmLogits),
            intent: None,
        },
    )?;
    Ok((total.value, Some(grads)))
}

#[test]
fn composed_stage1_through_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let params = init_params(&tiny_config(), 3).unwrap();
    let clean = batch(4, &mut rng);
    let mut seqs = clean.clone();
    let mut targets = Vec::new();
    let mut row = clean.iter().map(|s| s.len()).sum::<usize>();
    for s in &clean {
        let mut ids = s.active().to_vec();
        let orig = ids[1];
        ids[1] = MASK;
        targets.push(MlmTarget { row: row + 1, target: orig });
        row += ids.len();
        seqs.push(TokenSequence::from_ids(ids, 10).unwrap());
    }
    let (_, grads) = stage1_value(&params, &seqs, &targets).unwrap();
    let grads = grads.unwrap();
    let r = finite_diff_check_params(
        &params,
        &grads,
        |p| Ok(stage1_value(p, &seqs, &targets)?.0),
        &composed_opts(),
    )
    .unwrap();
    for t in &r.tensors {
        println!("{:<20} {:>3} {:.3e}", t.name, t.coords, t.max_rel_error);
    }
    assert!(r.passed, "max rel err {}", r.max_rel_error());
}

fn stage2_value(
    params: &EncoderParams,
    seqs: &[TokenSequence],
    labels: &[usize],
    view_of: &[usize],
) -> cpft_core::Result<(f64, EncoderParams)> {
    let tau = Temperature::new(0.3)?;
    let (out, tape) = forward(params, seqs, &DropoutState::train(8, 100), ForwardOptions::default())?;
    let scl = supervised_contrastive_loss(&out.pooled, labels, view_of, tau)?;
    let ce = intent_loss(out.intent_logits.as_ref().unwrap(), labels, 0.1)?;
    let total = stage2_loss(&scl, &ce, 0.05);
    let grads = backward(
        params,
        &tape,
        &Upstream {
            pooled: total.grad(GradKey::Views),
            mlm: None,
            intent: total.grad(GradKey::IntentLogits),
        },
    )?;
    Ok((total.value, grads))
}

#[test]
fn composed_stage2_through_encoder() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut params = init_params(&tiny_config(), 4).unwrap();
    params.attach_intent_head(3, 9);
    let utts = batch(8, &mut rng);
    let mut seqs = Vec::new();
    let mut labels = Vec::new();
    let mut view_of = Vec::new();
    for (i, s) in utts.iter().enumerate() {
        for _ in 0..2 {
            seqs.push(s.clone());
            labels.push(i % 3);
            view_of.push(i);
        }
    }
    let (_, grads) = stage2_value(&params, &seqs, &labels, &view_of).unwrap();
    let r = finite_diff_check_params(
        &params,
        &grads,
        |p| Ok(stage2_value(p, &seqs, &labels, &view_of)?.0),
        &composed_opts(),
    )
    .unwrap();
    for t in &r.tensors {
        println!("{:<20} {:>3} {:.3e}", t.name, t.coords, t.max_rel_error);
    }
    assert!(r.passed, "max rel err {}", r.max_rel_error());
}
