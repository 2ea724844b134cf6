//! Self-checks run by `cpft check`: main losses against the brute-force
//! references, closed-form values, finite-difference gradient checks both
//! standalone and through the encoder, invariances, and masking rules.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::encoder::{embed, init_params, DropoutState, EncoderConfig};
use crate::error::Result;
use crate::losses::{
    intent_loss, mlm_loss, supervised_contrastive_loss, unsupervised_contrastive_loss, GradKey, LossBundle,
    MlmTarget, Temperature,
};
use crate::oracle::{
    check_loss_inputs, finite_diff_check_params, ref_intent_loss, ref_mlm_loss, ref_supervised_loss,
    ref_unsupervised_loss, GradCheckOptions, GradCheckReport,
};
use crate::rng::{rng_for, Stream};
use crate::tensor::Mat;
use crate::eval::argmax;
use crate::tokenizer::{apply_dynamic_mask, MaskAction, TokenSequence, CLS, MASK, NUM_SPECIALS, PAD};
use crate::train::{make_stage2_batch, stage1_gradients, stage2_gradients, Stage1Batch};

pub const TAUS: [f64; 5] = [0.05, 0.1, 0.3, 0.5, 1.0];

/// One named check: the worst observed error against its tolerance. A zero
/// tolerance demands an exact result.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckLine {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckLine {
    fn new(name: impl Into<String>, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            worst,
            tolerance,
            passed: if tolerance == 0.0 { worst == 0.0 } else { worst < tolerance },
        }
    }
}

pub fn format_table(lines: &[CheckLine]) -> String {
    let mut s = format!("{:<36} {:>11} {:>9}  result\n", "check", "worst", "tol");
    for l in lines {
        s.push_str(&format!(
            "{:<36} {:>11.3e} {:>9.0e}  {}\n",
            l.name,
            l.worst,
            l.tolerance,
            if l.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}

fn random_mat<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| scale * rng.gen_range(-1.0..1.0)).collect())
}

fn batch_rng(seed: u64, loss: u64, batch: u64) -> ChaCha8Rng {
    rng_for(seed, Stream::GradCheck, &[loss, batch])
}

/// Main vs reference loss on `batches` random inputs per loss
/// (`N ≤ 16`, `d ≤ 8`, `τ` from [`TAUS`]).
pub fn loss_equivalence(batches: usize, seed: u64) -> Result<Vec<CheckLine>> {
    const TOL: f64 = 1e-10;
    let mut worst = [0.0f64; 4];
    for b in 0..batches as u64 {
        let mut rng = batch_rng(seed, 0, b);
        let (n, d) = (rng.gen_range(1..=16), rng.gen_range(2..=8));
        let tau = TAUS[rng.gen_range(0..TAUS.len())];
        let a = random_mat(n, d, 1.0, &mut rng);
        let v = random_mat(n, d, 1.0, &mut rng);
        let main = unsupervised_contrastive_loss(&a, &v, Temperature::new(tau)?)?.value;
        worst[0] = worst[0].max((main - ref_unsupervised_loss(&a, &v, tau)?).abs());

        let mut rng = batch_rng(seed, 1, b);
        let utts = rng.gen_range(1..=8);
        let classes = rng.gen_range(1..=4);
        let d = rng.gen_range(2..=8);
        let tau = TAUS[rng.gen_range(0..TAUS.len())];
        let utt_label: Vec<usize> = (0..utts).map(|_| rng.gen_range(0..classes)).collect();
        let mut labels = Vec::new();
        let mut view_of = Vec::new();
        for _ in 0..2 {
            for (u, &y) in utt_label.iter().enumerate() {
                labels.push(y);
                view_of.push(u);
            }
        }
        let h = random_mat(labels.len(), d, 1.0, &mut rng);
        let main = supervised_contrastive_loss(&h, &labels, &view_of, Temperature::new(tau)?)?.value;
        worst[1] = worst[1].max((main - ref_supervised_loss(&h, &labels, &view_of, tau)?).abs());

        let mut rng = batch_rng(seed, 2, b);
        let (rows, vocab) = (rng.gen_range(1..=16), rng.gen_range(5..=12));
        let z = random_mat(rows, vocab, 5.0, &mut rng);
        let targets: Vec<MlmTarget> = (0..rng.gen_range(1..=rows))
            .map(|_| MlmTarget {
                row: rng.gen_range(0..rows),
                target: rng.gen_range(0..vocab),
            })
            .collect();
        let pairs: Vec<(usize, usize)> = targets.iter().map(|t| (t.row, t.target)).collect();
        let main = mlm_loss(&z, &targets)?.value;
        worst[2] = worst[2].max((main - ref_mlm_loss(&z, &pairs)?).abs());

        let mut rng = batch_rng(seed, 3, b);
        let (n, c) = (rng.gen_range(1..=16), rng.gen_range(2..=8));
        let eps = [0.0, 0.1, 0.3][rng.gen_range(0..3)];
        let z = random_mat(n, c, 5.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let main = intent_loss(&z, &labels, eps)?.value;
        worst[3] = worst[3].max((main - ref_intent_loss(&z, &labels, eps)?).abs());
    }
    Ok(["unsupervised", "supervised", "mlm", "intent"]
        .iter()
        .zip(worst)
        .map(|(name, w)| CheckLine::new(format!("oracle {name} ({batches} batches)"), w, TOL))
        .collect())
}

/// Closed-form values: uniform similarities give `ln N`, `N = 1` gives 0,
/// uniform logits give `ln V` and `ln C`.
pub fn analytic_values() -> Result<Vec<CheckLine>> {
    const TOL: f64 = 1e-9;
    let mut out = Vec::new();
    let tau = Temperature::new(0.1)?;
    let mut worst: f64 = 0.0;
    for n in [2usize, 4, 8, 64] {
        // every row the same direction: all cosines equal 1
        let h = Mat::filled(n, 3, 1.0);
        let l = unsupervised_contrastive_loss(&h, &h, tau)?.value;
        worst = worst.max((l - (n as f64).ln()).abs());
    }
    out.push(CheckLine::new("uniform similarities = ln N", worst, TOL));
    let one = unsupervised_contrastive_loss(&Mat::filled(1, 3, 0.5), &Mat::filled(1, 3, -0.2), tau)?.value;
    out.push(CheckLine::new("N = 1 gives 0", one.abs(), 0.0));
    let v = 37;
    let t = [MlmTarget { row: 0, target: 5 }, MlmTarget { row: 1, target: 36 }];
    let l = mlm_loss(&Mat::filled(2, v, 0.3), &t)?.value;
    out.push(CheckLine::new("uniform MLM logits = ln V", (l - (v as f64).ln()).abs(), TOL));
    let mut worst: f64 = 0.0;
    for eps in [0.0, 0.1, 0.5, 0.9] {
        let l = intent_loss(&Mat::filled(3, 7, -1.0), &[0, 3, 6], eps)?.value;
        worst = worst.max((l - 7f64.ln()).abs());
    }
    out.push(CheckLine::new("uniform intent logits = ln C", worst, TOL));
    Ok(out)
}

fn grads_of(bundle: &LossBundle, keys: &[(&str, GradKey)]) -> BTreeMap<String, Mat> {
    keys.iter()
        .map(|(n, k)| (n.to_string(), bundle.grad(*k).expect("gradient present").clone()))
        .collect()
}

fn standalone_line(name: &str, r: &GradCheckReport) -> CheckLine {
    CheckLine::new(format!("grad {name} standalone"), r.max_rel_error(), r.tolerance)
}

/// Finite differences of each loss with respect to its inputs.
pub fn standalone_gradients(seed: u64) -> Result<Vec<CheckLine>> {
    let opts = GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-6,
        coords_per_tensor: 1000,
        seed,
    };
    let mut rng = batch_rng(seed, 10, 0);
    let mut out = Vec::new();

    let tau = Temperature::new(0.1)?;
    let a = random_mat(6, 5, 1.0, &mut rng);
    let v = random_mat(6, 5, 1.0, &mut rng);
    let l = unsupervised_contrastive_loss(&a, &v, tau)?;
    let inputs = BTreeMap::from([("a".to_string(), a), ("b".to_string(), v)]);
    let r = check_loss_inputs(
        &inputs,
        &grads_of(&l, &[("a", GradKey::Anchors), ("b", GradKey::MaskedViews)]),
        |t| Ok(unsupervised_contrastive_loss(&t[0], &t[1], tau)?.value),
        &opts,
    )?;
    out.push(standalone_line("unsupervised", &r));

    let tau = Temperature::new(0.3)?;
    let h = random_mat(8, 4, 1.0, &mut rng);
    let labels = [0, 0, 1, 1, 2, 2, 0, 0];
    let view_of = [0, 0, 1, 1, 2, 2, 3, 3];
    let l = supervised_contrastive_loss(&h, &labels, &view_of, tau)?;
    let r = check_loss_inputs(
        &BTreeMap::from([("h".to_string(), h)]),
        &grads_of(&l, &[("h", GradKey::Views)]),
        |t| Ok(supervised_contrastive_loss(&t[0], &labels, &view_of, tau)?.value),
        &opts,
    )?;
    out.push(standalone_line("supervised", &r));

    let z = random_mat(6, 12, 2.0, &mut rng);
    let targets = [
        MlmTarget { row: 0, target: 3 },
        MlmTarget { row: 2, target: 11 },
        MlmTarget { row: 2, target: 0 },
        MlmTarget { row: 5, target: 7 },
    ];
    let l = mlm_loss(&z, &targets)?;
    let r = check_loss_inputs(
        &BTreeMap::from([("z".to_string(), z)]),
        &grads_of(&l, &[("z", GradKey::MlmLogits)]),
        |t| Ok(mlm_loss(&t[0], &targets)?.value),
        &opts,
    )?;
    out.push(standalone_line("mlm", &r));

    let z = random_mat(8, 4, 2.0, &mut rng);
    let labels = [0, 1, 2, 3, 3, 2, 1, 0];
    let l = intent_loss(&z, &labels, 0.1)?;
    let r = check_loss_inputs(
        &BTreeMap::from([("z".to_string(), z)]),
        &grads_of(&l, &[("z", GradKey::IntentLogits)]),
        |t| Ok(intent_loss(&t[0], &labels, 0.1)?.value),
        &opts,
    )?;
    out.push(standalone_line("intent", &r));
    Ok(out)
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        max_len: 10,
        ..EncoderConfig::new(16)
    }
}

fn random_sequences<R: Rng>(n: usize, rng: &mut R) -> Vec<TokenSequence> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(3..9);
            let mut ids = vec![CLS];
            ids.extend((0..len).map(|_| rng.gen_range(4..16)));
            TokenSequence::from_ids(ids, 10).expect("fits")
        })
        .collect()
}

/// Finite differences of both stage objectives with respect to every encoder
/// tensor, through the training-path gradient code.
pub fn composed_gradients(seed: u64) -> Result<Vec<(CheckLine, GradCheckReport)>> {
    let opts = GradCheckOptions {
        step: 1e-5,
        tolerance: 1e-4,
        coords_per_tensor: 20,
        seed,
    };
    let mut rng = batch_rng(seed, 20, 0);
    let mut cfg = TrainConfig::default();
    cfg.stage2.tau = 0.3;
    cfg.stage2.lambda2 = 0.05;
    let mut out = Vec::new();

    let params = init_params(&tiny_encoder(), seed)?;
    let clean = random_sequences(4, &mut rng);
    let mut sequences = clean.clone();
    let mut targets = Vec::new();
    let mut row: usize = clean.iter().map(TokenSequence::len).sum();
    for s in &clean {
        let mut ids = s.active().to_vec();
        let p = rng.gen_range(1..ids.len());
        targets.push(MlmTarget { row: row + p, target: ids[p] });
        ids[p] = MASK;
        row += ids.len();
        sequences.push(TokenSequence::from_ids(ids, 10)?);
    }
    let batch = Stage1Batch {
        sequences,
        n: 4,
        members: (0..4).collect(),
        plans: Vec::new(),
        targets,
        skipped: Vec::new(),
        dropout: DropoutState::train(seed, 0),
    };
    let (_, grads) = stage1_gradients(&params, &batch, &cfg)?;
    let r = finite_diff_check_params(&params, &grads, |p| Ok(stage1_gradients(p, &batch, &cfg)?.0.total), &opts)?;
    out.push((CheckLine::new("grad stage-1 through encoder", r.max_rel_error(), 1e-4), r));

    let mut params = init_params(&tiny_encoder(), seed + 1)?;
    params.attach_intent_head(3, seed);
    let items: Vec<(TokenSequence, usize)> = random_sequences(8, &mut rng)
        .into_iter()
        .enumerate()
        .map(|(i, s)| (s, i % 3))
        .collect();
    let batch = make_stage2_batch(&items, seed, 100);
    let (_, grads) = stage2_gradients(&params, &batch, &cfg)?;
    let r = finite_diff_check_params(&params, &grads, |p| Ok(stage2_gradients(p, &batch, &cfg)?.0.total), &opts)?;
    out.push((CheckLine::new("grad stage-2 through encoder", r.max_rel_error(), 1e-4), r));
    Ok(out)
}

fn permuted(m: &Mat, perm: &[usize]) -> Mat {
    let mut out = Mat::zeros(m.rows, m.cols);
    for (dst, &src) in perm.iter().enumerate() {
        out.row_mut(dst).copy_from_slice(m.row(src));
    }
    out
}

fn random_perm<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Scale, permutation, logit-shift, padding and large-`τ` invariances on
/// `batches` random inputs.
pub fn invariances(batches: usize, seed: u64) -> Result<Vec<CheckLine>> {
    const SCALES: [f64; 3] = [1e-3, 1.0, 1e3];
    const SHIFTS: [f64; 4] = [-1e3, -0.5, 1e-3, 1e3];
    let mut scale: f64 = 0.0;
    let mut perm: f64 = 0.0;
    let mut limit: f64 = 0.0;
    let mut shifted = 0usize;
    for b in 0..batches as u64 {
        let mut rng = batch_rng(seed, 30, b);
        let n = rng.gen_range(2..=16);
        let d = rng.gen_range(2..=8);
        let tau = Temperature::new(TAUS[rng.gen_range(0..TAUS.len())])?;
        let a = random_mat(n, d, 1.0, &mut rng);
        let v = random_mat(n, d, 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        let view_of: Vec<usize> = (0..n).map(|i| i / 2).collect();
        let uns = unsupervised_contrastive_loss(&a, &v, tau)?.value;
        let sup = supervised_contrastive_loss(&a, &labels, &view_of, tau);
        let sup = sup.ok().map(|l| l.value);

        for c in SCALES {
            let row = rng.gen_range(0..n);
            let mut a2 = a.clone();
            a2.row_mut(row).iter_mut().for_each(|x| *x *= c);
            let mut v2 = v.clone();
            v2.row_mut(rng.gen_range(0..n)).iter_mut().for_each(|x| *x *= c);
            scale = scale.max((unsupervised_contrastive_loss(&a2, &v2, tau)?.value - uns).abs());
            if let Some(sup) = sup {
                let l = supervised_contrastive_loss(&a2, &labels, &view_of, tau)?.value;
                scale = scale.max((l - sup).abs());
            }
        }

        let p = random_perm(n, &mut rng);
        let l = unsupervised_contrastive_loss(&permuted(&a, &p), &permuted(&v, &p), tau)?.value;
        perm = perm.max((l - uns).abs());
        if let Some(sup) = sup {
            let pl: Vec<usize> = p.iter().map(|&i| labels[i]).collect();
            let pv: Vec<usize> = p.iter().map(|&i| view_of[i]).collect();
            let l = supervised_contrastive_loss(&permuted(&a, &p), &pl, &pv, tau)?.value;
            perm = perm.max((l - sup).abs());
        }

        let l = unsupervised_contrastive_loss(&a, &v, Temperature::new(1e6)?)?.value;
        limit = limit.max((l - (n as f64).ln()).abs());

        let z: Vec<f64> = (0..rng.gen_range(2..=20)).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let want = argmax(&z);
        for c in SHIFTS {
            let moved: Vec<f64> = z.iter().map(|x| x + c).collect();
            shifted += usize::from(argmax(&moved) != want);
        }
    }

    // padding and batch order through the encoder, eval mode
    let cfg = EncoderConfig {
        max_len: 32,
        ..EncoderConfig::new(40)
    };
    let params = init_params(&cfg, seed)?;
    let mut rng = batch_rng(seed, 31, 0);
    let mut pad: f64 = 0.0;
    let mut seqs = Vec::new();
    for _ in 0..batches.clamp(1, 16) {
        let len = rng.gen_range(1..=20);
        let mut ids = vec![CLS];
        ids.extend((0..len).map(|_| rng.gen_range(NUM_SPECIALS..40)));
        let base = TokenSequence::from_ids(ids.clone(), ids.len())?;
        let tight = embed(&params, std::slice::from_ref(&base))?;
        for width in [ids.len() + 1, ids.len() + 5, 32] {
            let wide = embed(&params, &[base.with_padding(width)?])?;
            pad = pad.max(tight.data.iter().zip(&wide.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
        seqs.push(TokenSequence::from_ids(ids, 32)?);
    }
    let p = random_perm(seqs.len(), &mut rng);
    let out = embed(&params, &seqs)?;
    let shuffled: Vec<TokenSequence> = p.iter().map(|&i| seqs[i].clone()).collect();
    let out_p = embed(&params, &shuffled)?;
    let order = permuted(&out, &p)
        .data
        .iter()
        .zip(&out_p.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);

    Ok(vec![
        CheckLine::new("cosine scale c in {1e-3, 1, 1e3}", scale, 1e-12),
        CheckLine::new("loss under batch permutation", perm, 1e-12),
        CheckLine::new("argmax under logit shift", shifted as f64, 0.0),
        CheckLine::new("pooling under PAD extension", pad, 0.0),
        CheckLine::new("forward under batch permutation", order, 0.0),
        CheckLine::new("tau 1e6 limit = ln N", limit, 1e-6),
    ])
}

/// Mask count rule, special-token protection, per-epoch redraws and the
/// overall masked fraction, over `draws` seeded masking rounds.
pub fn masking_properties(draws: usize, seed: u64) -> Result<Vec<CheckLine>> {
    const V: usize = 50;
    const WIDTH: usize = 32;
    let mut rng = batch_rng(seed, 40, 0);
    let mut count_errors = 0usize;
    let mut special_hits = 0usize;
    let mut id_errors = 0usize;
    let (mut masked, mut maskable) = (0usize, 0usize);
    for u in 0..draws as u64 {
        let len = rng.gen_range(1..WIDTH);
        let mut ids = vec![CLS];
        ids.extend((0..len).map(|_| rng.gen_range(NUM_SPECIALS..V)));
        let seq = TokenSequence::from_ids(ids, WIDTH)?;
        let (out, plan) = apply_dynamic_mask(&seq, V, 0.1, seed, u % 7, u)?;
        // half away from zero of len / 10, at least one
        let want = ((len + 5) / 10).max(1);
        count_errors += usize::from(plan.len() != want);
        special_hits += plan.positions.iter().filter(|&&p| p == 0 || p > len).count();
        special_hits += usize::from(out.ids()[0] != CLS);
        special_hits += out.ids()[len + 1..].iter().filter(|&&t| t != PAD).count();
        for (p, (&a, &b)) in seq.ids().iter().zip(out.ids()).enumerate() {
            let at = plan.positions.iter().position(|&q| q == p);
            let changed = a != b;
            let expect = at.is_some_and(|i| plan.actions[i] != MaskAction::Keep);
            id_errors += usize::from(changed != expect);
            if at.is_some_and(|i| plan.actions[i] == MaskAction::Random) && b < NUM_SPECIALS {
                special_hits += 1;
            }
        }
        masked += plan.len();
        maskable += len;
    }

    let mut frozen = 0usize;
    for u in 0..50u64 {
        let mut ids = vec![CLS];
        ids.extend((0..20).map(|_| rng.gen_range(NUM_SPECIALS..V)));
        let seq = TokenSequence::from_ids(ids, WIDTH)?;
        let plans: Vec<Vec<usize>> = (0..10)
            .map(|e| apply_dynamic_mask(&seq, V, 0.1, seed, e, u).map(|(_, p)| p.positions))
            .collect::<Result<_>>()?;
        frozen += usize::from(plans.iter().all(|p| *p == plans[0]));
    }

    let fraction = masked as f64 / maskable.max(1) as f64;
    Ok(vec![
        CheckLine::new("mask count = max(1, round(L/10))", count_errors as f64, 0.0),
        CheckLine::new(format!("specials untouched ({draws} draws)"), special_hits as f64, 0.0),
        CheckLine::new("ids change exactly where not kept", id_errors as f64, 0.0),
        CheckLine::new("plans redrawn across 10 epochs", frozen as f64, 0.0),
        CheckLine::new("masked fraction near 0.10", (fraction - 0.1).abs(), 0.02),
    ])
}
