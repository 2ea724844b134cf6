//! Tiny post-LN transformer encoder with hand-written reverse mode.
//!
//! Each sequence is processed independently over its non-padding prefix, so
//! padding never influences any output. Pooling is the mean of final hidden
//! states over that prefix. An MLM head maps every position to vocabulary
//! logits, and an optional intent head maps the pooled vector to class logits.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::tensor::{affine, affine_backward, dot, matmul, matmul_backward, softmax_rows, Mat};
use crate::tokenizer::TokenSequence;

const LN_EPS: f64 = 1e-5;
/// Sequences per gradient-accumulation chunk. Fixed so that the reduction
/// order, and therefore every bit of the result, is independent of the
/// thread pool size.
const CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout_p: f64,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// Default architecture (64 wide, 2 layers, 4 heads) for a vocabulary size.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 32,
            dropout_p: 0.1,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return bad("encoder dimensions must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if self.max_len < 2 {
            return bad("max_len must be >= 2");
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad("dropout_p must lie in [0, 1)");
        }
        if self.vocab_size < 5 {
            return bad("vocab_size must be >= 5");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
}

// No key bias: it shifts every score of a softmax row equally and has no effect.
const LAYER_NAMES: [&str; 15] = [
    "wq", "bq", "wk", "wv", "bv", "wo", "bo", "ln1.gain", "ln1.bias", "w1", "b1", "w2", "b2",
    "ln2.gain", "ln2.bias",
];

impl LayerParams {
    fn zeros(c: &EncoderConfig) -> Self {
        let (d, f) = (c.d_model, c.d_ff);
        Self {
            wq: Mat::zeros(d, d),
            bq: Mat::zeros(1, d),
            wk: Mat::zeros(d, d),
            wv: Mat::zeros(d, d),
            bv: Mat::zeros(1, d),
            wo: Mat::zeros(d, d),
            bo: Mat::zeros(1, d),
            ln1_g: Mat::zeros(1, d),
            ln1_b: Mat::zeros(1, d),
            w1: Mat::zeros(d, f),
            b1: Mat::zeros(1, f),
            w2: Mat::zeros(f, d),
            b2: Mat::zeros(1, d),
            ln2_g: Mat::zeros(1, d),
            ln2_b: Mat::zeros(1, d),
        }
    }

    fn mats(&self) -> [&Mat; 15] {
        [
            &self.wq, &self.bq, &self.wk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln1_g,
            &self.ln1_b, &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_g, &self.ln2_b,
        ]
    }

    fn mats_mut(&mut self) -> [&mut Mat; 15] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }
}

/// Classification head: `logits = W·h + b` with `W: C×d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentHead {
    pub w: Mat,
    pub b: Mat,
}

impl IntentHead {
    pub fn num_classes(&self) -> usize {
        self.w.rows
    }
}

/// Every trainable tensor. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub tok_emb: Mat,
    pub pos_emb: Mat,
    pub emb_ln_g: Mat,
    pub emb_ln_b: Mat,
    pub layers: Vec<LayerParams>,
    pub mlm_w: Mat,
    pub mlm_b: Mat,
    pub intent: Option<IntentHead>,
}

fn xavier<R: Rng>(m: &mut Mat, fan_in: usize, fan_out: usize, rng: &mut R) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    for x in m.data.iter_mut() {
        *x = rng.gen_range(-a..a);
    }
}

impl EncoderParams {
    /// All-zero tensors with the shapes implied by `config`.
    pub fn zeros(config: &EncoderConfig, num_classes: Option<usize>) -> Self {
        let (v, d) = (config.vocab_size, config.d_model);
        Self {
            config: config.clone(),
            tok_emb: Mat::zeros(v, d),
            pos_emb: Mat::zeros(config.max_len, d),
            emb_ln_g: Mat::zeros(1, d),
            emb_ln_b: Mat::zeros(1, d),
            layers: (0..config.n_layers).map(|_| LayerParams::zeros(config)).collect(),
            mlm_w: Mat::zeros(d, v),
            mlm_b: Mat::zeros(1, v),
            intent: num_classes.map(|c| IntentHead {
                w: Mat::zeros(c, d),
                b: Mat::zeros(1, c),
            }),
        }
    }

    /// Gradient buffer matching this parameter set.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config, self.num_classes())
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.intent.as_ref().map(IntentHead::num_classes)
    }

    /// Tensor names in declaration order.
    pub fn names(&self) -> Vec<String> {
        let mut out = vec![
            "tok_emb".to_owned(),
            "pos_emb".to_owned(),
            "emb_ln.gain".to_owned(),
            "emb_ln.bias".to_owned(),
        ];
        for l in 0..self.layers.len() {
            out.extend(LAYER_NAMES.iter().map(|n| format!("layer{l}.{n}")));
        }
        out.push("mlm.w".to_owned());
        out.push("mlm.b".to_owned());
        if self.intent.is_some() {
            out.push("intent.w".to_owned());
            out.push("intent.b".to_owned());
        }
        out
    }

    /// Tensors in declaration order (same order as [`names`](Self::names)).
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = vec![&self.tok_emb, &self.pos_emb, &self.emb_ln_g, &self.emb_ln_b];
        for l in &self.layers {
            out.extend(l.mats());
        }
        out.push(&self.mlm_w);
        out.push(&self.mlm_b);
        if let Some(h) = &self.intent {
            out.push(&h.w);
            out.push(&h.b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![
            &mut self.tok_emb,
            &mut self.pos_emb,
            &mut self.emb_ln_g,
            &mut self.emb_ln_b,
        ];
        for l in &mut self.layers {
            out.extend(l.mats_mut());
        }
        out.push(&mut self.mlm_w);
        out.push(&mut self.mlm_b);
        if let Some(h) = &mut self.intent {
            out.push(&mut h.w);
            out.push(&mut h.b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.all_finite())
    }

    /// `self += s * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &EncoderParams, s: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(b, s);
        }
    }

    /// Replaces the intent head with a freshly initialized one of `num_classes` outputs.
    pub fn attach_intent_head(&mut self, num_classes: usize, seed: u64) {
        let d = self.config.d_model;
        let mut w = Mat::zeros(num_classes, d);
        let mut rng = rng_for(seed, Stream::Init, &[u64::MAX, num_classes as u64]);
        xavier(&mut w, d, num_classes, &mut rng);
        self.intent = Some(IntentHead {
            w,
            b: Mat::zeros(1, num_classes),
        });
    }

    pub fn detach_intent_head(&mut self) {
        self.intent = None;
    }
}

/// Seeded uniform Xavier init for weight matrices, unit layer-norm gains,
/// zero biases. No intent head.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    config.validate()?;
    let mut p = EncoderParams::zeros(config, None);
    let mut k = 0u64;
    let mut init = |m: &mut Mat| {
        let mut rng = rng_for(seed, Stream::Init, &[k]);
        k += 1;
        xavier(m, m.rows, m.cols, &mut rng);
    };
    init(&mut p.tok_emb);
    init(&mut p.pos_emb);
    p.emb_ln_g.data.fill(1.0);
    for l in &mut p.layers {
        init(&mut l.wq);
        init(&mut l.wk);
        init(&mut l.wv);
        init(&mut l.wo);
        init(&mut l.w1);
        init(&mut l.w2);
        l.ln1_g.data.fill(1.0);
        l.ln2_g.data.fill(1.0);
    }
    init(&mut p.mlm_w);
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Dropout configuration for one forward pass. In train mode sequence `b`
/// of the batch uses draw index `draw + b`; its masks are a pure function of
/// `(seed, draw + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutState {
    pub mode: DropoutMode,
    pub seed: u64,
    pub draw: u64,
}

impl DropoutState {
    pub fn eval() -> Self {
        Self {
            mode: DropoutMode::Eval,
            seed: 0,
            draw: 0,
        }
    }

    pub fn train(seed: u64, draw: u64) -> Self {
        Self {
            mode: DropoutMode::Train,
            seed,
            draw,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Compute per-position vocabulary logits.
    pub mlm: bool,
}

/// MLM logits of a batch, stacked: row `offsets[b] + p` is position `p` of sequence `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlmLogits {
    pub logits: Mat,
    pub offsets: Vec<usize>,
}

impl MlmLogits {
    pub fn row_index(&self, seq: usize, pos: usize) -> usize {
        self.offsets[seq] + pos
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `B × d_model`, not normalized.
    pub pooled: Mat,
    pub mlm: Option<MlmLogits>,
    /// `B × C` when an intent head is attached.
    pub intent_logits: Option<Mat>,
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct LayerTape {
    x_in: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
    drop_attn: Option<Vec<f64>>,
    ln1: LnCache,
    x1: Mat,
    h_pre: Mat,
    h_act: Mat,
    drop_ff: Option<Vec<f64>>,
    ln2: LnCache,
}

#[derive(Debug, Clone)]
struct SeqTape {
    ids: Vec<usize>,
    emb_ln: LnCache,
    drop_emb: Option<Vec<f64>>,
    layers: Vec<LayerTape>,
    hidden: Mat,
    pooled: Vec<f64>,
}

/// Intermediates recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone, Default)]
pub struct Tape {
    seqs: Vec<SeqTape>,
    mlm_offsets: Option<Vec<usize>>,
    has_intent: bool,
}

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// Upstream gradients for [`backward`]. Absent parts count as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upstream<'a> {
    pub pooled: Option<&'a Mat>,
    pub mlm: Option<&'a Mat>,
    pub intent: Option<&'a Mat>,
}

fn layer_norm(x: &Mat, g: &Mat, b: &Mat) -> (Mat, LnCache) {
    let d = x.cols;
    let mut y = Mat::zeros(x.rows, d);
    let mut xhat = Mat::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (o, v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = &mut y.data[r * d..(r + 1) * d];
        for c in 0..d {
            yr[c] = g.data[c] * xhat.data[r * d + c] + b.data[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Mat, cache: &LnCache, g: &Mat, dg: &mut Mat, db: &mut Mat) -> Mat {
    let d = dy.cols;
    let mut dx = Mat::zeros(dy.rows, d);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dg.data[c] += dyr[c] * xh[c];
            db.data[c] += dyr[c];
            dxhat[c] = dyr[c] * g.data[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn dropout_mask<R: Rng>(n: usize, p: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect()
}

fn apply_mask(m: &mut Mat, mask: &Option<Vec<f64>>) {
    if let Some(mask) = mask {
        for (x, k) in m.data.iter_mut().zip(mask) {
            *x *= k;
        }
    }
}

fn forward_seq(
    params: &EncoderParams,
    seq: &TokenSequence,
    dropout: Option<(u64, u64)>,
) -> SeqTape {
    let c = &params.config;
    let (d, nh, dh) = (c.d_model, c.n_heads, c.head_dim());
    let ids = seq.active().to_vec();
    let len = ids.len();
    let mut rng = dropout.map(|(seed, draw)| rng_for(seed, Stream::Dropout, &[draw]));
    let mut draw_mask = |n: usize| rng.as_mut().map(|r| dropout_mask(n, c.dropout_p, r));

    let mut e = Mat::zeros(len, d);
    for (p, &id) in ids.iter().enumerate() {
        let row = e.row_mut(p);
        for ((o, t), q) in row
            .iter_mut()
            .zip(params.tok_emb.row(id))
            .zip(params.pos_emb.row(p))
        {
            *o = t + q;
        }
    }
    let (mut x, emb_ln) = layer_norm(&e, &params.emb_ln_g, &params.emb_ln_b);
    let drop_emb = draw_mask(len * d);
    apply_mask(&mut x, &drop_emb);

    let scale = 1.0 / (dh as f64).sqrt();
    let mut layers = Vec::with_capacity(params.layers.len());
    for lp in &params.layers {
        let q = affine(&x, &lp.wq, &lp.bq);
        let k = matmul(&x, &lp.wk);
        let v = affine(&x, &lp.wv, &lp.bv);
        let mut ctx = Mat::zeros(len, d);
        let mut probs = Vec::with_capacity(nh);
        for h in 0..nh {
            let off = h * dh;
            let mut s = Mat::zeros(len, len);
            for i in 0..len {
                let qi = &q.row(i)[off..off + dh];
                for j in 0..len {
                    s.data[i * len + j] = dot(qi, &k.row(j)[off..off + dh]) * scale;
                }
            }
            softmax_rows(&mut s);
            for i in 0..len {
                let out = &mut ctx.data[i * d + off..i * d + off + dh];
                for j in 0..len {
                    let pij = s.data[i * len + j];
                    for (o, vv) in out.iter_mut().zip(&v.row(j)[off..off + dh]) {
                        *o += pij * vv;
                    }
                }
            }
            probs.push(s);
        }
        let mut a = affine(&ctx, &lp.wo, &lp.bo);
        let drop_attn = draw_mask(len * d);
        apply_mask(&mut a, &drop_attn);
        a.add_scaled(&x, 1.0);
        let (x1, ln1) = layer_norm(&a, &lp.ln1_g, &lp.ln1_b);

        let h_pre = affine(&x1, &lp.w1, &lp.b1);
        let mut h_act = h_pre.clone();
        h_act.data.iter_mut().for_each(|z| *z = gelu(*z));
        let mut f = affine(&h_act, &lp.w2, &lp.b2);
        let drop_ff = draw_mask(len * d);
        apply_mask(&mut f, &drop_ff);
        f.add_scaled(&x1, 1.0);
        let (x2, ln2) = layer_norm(&f, &lp.ln2_g, &lp.ln2_b);

        layers.push(LayerTape {
            x_in: x,
            q,
            k,
            v,
            probs,
            ctx,
            drop_attn,
            ln1,
            x1,
            h_pre,
            h_act,
            drop_ff,
            ln2,
        });
        x = x2;
    }

    let mut pooled = vec![0.0; d];
    for r in 0..len {
        for (p, v) in pooled.iter_mut().zip(x.row(r)) {
            *p += v;
        }
    }
    pooled.iter_mut().for_each(|p| *p /= len as f64);

    SeqTape {
        ids,
        emb_ln,
        drop_emb,
        layers,
        hidden: x,
        pooled,
    }
}

/// Runs the encoder over a batch.
///
/// Fails if any sequence is wider than `max_len` or uses an id outside the
/// vocabulary.
pub fn forward(
    params: &EncoderParams,
    batch: &[TokenSequence],
    dropout: &DropoutState,
    opts: ForwardOptions,
) -> Result<(ForwardOutput, Tape)> {
    let c = &params.config;
    for s in batch {
        if s.padded_len() > c.max_len {
            return Err(Error::SequenceTooLong {
                len: s.padded_len(),
                max_len: c.max_len,
            });
        }
        if s.is_empty() {
            return Err(Error::Shape("empty sequence".into()));
        }
        if let Some(&bad) = s.active().iter().find(|&&id| id >= c.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocabulary of {}",
                c.vocab_size
            )));
        }
    }
    let train = dropout.mode == DropoutMode::Train && c.dropout_p > 0.0;
    let seqs: Vec<SeqTape> = batch
        .par_iter()
        .enumerate()
        .map(|(b, s)| {
            let dr = train.then(|| (dropout.seed, dropout.draw.wrapping_add(b as u64)));
            forward_seq(params, s, dr)
        })
        .collect();

    let d = c.d_model;
    let mut pooled = Mat::zeros(batch.len(), d);
    for (b, t) in seqs.iter().enumerate() {
        pooled.row_mut(b).copy_from_slice(&t.pooled);
    }

    let mlm = opts.mlm.then(|| {
        let mut offsets = Vec::with_capacity(seqs.len() + 1);
        offsets.push(0);
        for t in &seqs {
            offsets.push(offsets.last().unwrap() + t.ids.len());
        }
        let blocks: Vec<Mat> = seqs
            .par_iter()
            .map(|t| affine(&t.hidden, &params.mlm_w, &params.mlm_b))
            .collect();
        let mut logits = Mat::zeros(*offsets.last().unwrap(), c.vocab_size);
        for (b, blk) in blocks.iter().enumerate() {
            let start = offsets[b] * c.vocab_size;
            logits.data[start..start + blk.data.len()].copy_from_slice(&blk.data);
        }
        MlmLogits { logits, offsets }
    });

    let intent_logits = params.intent.as_ref().map(|h| {
        let mut out = Mat::zeros(batch.len(), h.num_classes());
        for b in 0..batch.len() {
            let pr = pooled.row(b);
            for j in 0..h.num_classes() {
                out.data[b * h.num_classes() + j] = dot(h.w.row(j), pr) + h.b.data[j];
            }
        }
        out
    });

    let tape = Tape {
        mlm_offsets: mlm.as_ref().map(|m| m.offsets.clone()),
        has_intent: intent_logits.is_some(),
        seqs,
    };
    Ok((
        ForwardOutput {
            pooled,
            mlm,
            intent_logits,
        },
        tape,
    ))
}

fn backward_seq(
    params: &EncoderParams,
    t: &SeqTape,
    mut dpooled: Vec<f64>,
    dmlm: Option<&[f64]>,
    dintent: Option<&[f64]>,
    g: &mut EncoderParams,
) {
    let c = &params.config;
    let (d, nh, dh, v) = (c.d_model, c.n_heads, c.head_dim(), c.vocab_size);
    let len = t.ids.len();

    if let (Some(di), Some(h), Some(gh)) = (dintent, &params.intent, g.intent.as_mut()) {
        for (j, &dj) in di.iter().enumerate() {
            if dj == 0.0 {
                continue;
            }
            gh.b.data[j] += dj;
            for (gw, p) in gh.w.row_mut(j).iter_mut().zip(&t.pooled) {
                *gw += dj * p;
            }
            for (dp, w) in dpooled.iter_mut().zip(h.w.row(j)) {
                *dp += dj * w;
            }
        }
    }

    let mut dx = Mat::zeros(len, d);
    let inv_len = 1.0 / len as f64;
    for r in 0..len {
        for (o, dp) in dx.row_mut(r).iter_mut().zip(&dpooled) {
            *o = dp * inv_len;
        }
    }
    if let Some(dm) = dmlm {
        if dm.iter().any(|&z| z != 0.0) {
            let dl = Mat::from_vec(len, v, dm.to_vec());
            let dh_mlm = affine_backward(&t.hidden, &params.mlm_w, &dl, &mut g.mlm_w, &mut g.mlm_b);
            dx.add_scaled(&dh_mlm, 1.0);
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    for (li, (lp, lt)) in params.layers.iter().zip(&t.layers).enumerate().rev() {
        let gl = &mut g.layers[li];
        // x2 = LN2(x1 + drop(FF(x1)))
        let mut dsum2 = layer_norm_backward(&dx, &lt.ln2, &lp.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);
        let mut df = dsum2.clone();
        apply_mask(&mut df, &lt.drop_ff);
        let mut dh_act = affine_backward(&lt.h_act, &lp.w2, &df, &mut gl.w2, &mut gl.b2);
        for (z, pre) in dh_act.data.iter_mut().zip(&lt.h_pre.data) {
            *z *= gelu_grad(*pre);
        }
        let dx1_ff = affine_backward(&lt.x1, &lp.w1, &dh_act, &mut gl.w1, &mut gl.b1);
        dsum2.add_scaled(&dx1_ff, 1.0);
        let dx1 = dsum2;

        // x1 = LN1(x + drop(Attn(x)))
        let mut dsum1 = layer_norm_backward(&dx1, &lt.ln1, &lp.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b);
        let mut da = dsum1.clone();
        apply_mask(&mut da, &lt.drop_attn);
        let dctx = affine_backward(&lt.ctx, &lp.wo, &da, &mut gl.wo, &mut gl.bo);

        let mut dq = Mat::zeros(len, d);
        let mut dk = Mat::zeros(len, d);
        let mut dv = Mat::zeros(len, d);
        let mut dp_row = vec![0.0; len];
        for h in 0..nh {
            let off = h * dh;
            let pm = &lt.probs[h];
            for i in 0..len {
                let dci = &dctx.row(i)[off..off + dh];
                let prow = pm.row(i);
                for j in 0..len {
                    dp_row[j] = dot(dci, &lt.v.row(j)[off..off + dh]);
                    let pij = prow[j];
                    let dvj = &mut dv.data[j * d + off..j * d + off + dh];
                    for (o, x) in dvj.iter_mut().zip(dci) {
                        *o += pij * x;
                    }
                }
                let s: f64 = prow.iter().zip(&dp_row).map(|(p, dp)| p * dp).sum();
                for j in 0..len {
                    let ds = prow[j] * (dp_row[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &lt.k.row(j)[off..off + dh];
                    let qi = &lt.q.row(i)[off..off + dh];
                    let dqi = &mut dq.data[i * d + off..i * d + off + dh];
                    for (o, x) in dqi.iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let dkj = &mut dk.data[j * d + off..j * d + off + dh];
                    for (o, x) in dkj.iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        let dxq = affine_backward(&lt.x_in, &lp.wq, &dq, &mut gl.wq, &mut gl.bq);
        let dxk = matmul_backward(&lt.x_in, &lp.wk, &dk, &mut gl.wk);
        let dxv = affine_backward(&lt.x_in, &lp.wv, &dv, &mut gl.wv, &mut gl.bv);
        dsum1.add_scaled(&dxq, 1.0);
        dsum1.add_scaled(&dxk, 1.0);
        dsum1.add_scaled(&dxv, 1.0);
        dx = dsum1;
    }

    apply_mask(&mut dx, &t.drop_emb);
    let de = layer_norm_backward(&dx, &t.emb_ln, &params.emb_ln_g, &mut g.emb_ln_g, &mut g.emb_ln_b);
    for (p, &id) in t.ids.iter().enumerate() {
        let der = de.row(p);
        for (o, x) in g.tok_emb.row_mut(id).iter_mut().zip(der) {
            *o += x;
        }
        for (o, x) in g.pos_emb.row_mut(p).iter_mut().zip(der) {
            *o += x;
        }
    }
}

/// Exact gradients of a scalar loss given its upstream gradients with
/// respect to the outputs of the recorded forward pass.
pub fn backward(params: &EncoderParams, tape: &Tape, upstream: &Upstream) -> Result<EncoderParams> {
    if tape.is_empty() {
        return Err(Error::BackwardBeforeForward);
    }
    let c = &params.config;
    let n = tape.seqs.len();
    if let Some(p) = upstream.pooled {
        if p.shape() != (n, c.d_model) {
            return Err(Error::Shape(format!(
                "pooled gradient {:?}, expected {:?}",
                p.shape(),
                (n, c.d_model)
            )));
        }
    }
    if let Some(m) = upstream.mlm {
        let offsets = tape
            .mlm_offsets
            .as_ref()
            .ok_or_else(|| Error::Shape("MLM gradient without MLM logits".into()))?;
        if m.shape() != (*offsets.last().unwrap(), c.vocab_size) {
            return Err(Error::Shape("MLM gradient shape".into()));
        }
    }
    if let Some(i) = upstream.intent {
        let classes = params
            .num_classes()
            .filter(|_| tape.has_intent)
            .ok_or_else(|| Error::Shape("intent gradient without intent head".into()))?;
        if i.shape() != (n, classes) {
            return Err(Error::Shape("intent gradient shape".into()));
        }
    }

    let chunks: Vec<EncoderParams> = (0..n)
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| {
            let mut g = params.zeros_like();
            for &b in idx {
                let t = &tape.seqs[b];
                let dpooled = upstream
                    .pooled
                    .map_or_else(|| vec![0.0; c.d_model], |p| p.row(b).to_vec());
                let dmlm = upstream.mlm.map(|m| {
                    let off = tape.mlm_offsets.as_ref().unwrap();
                    &m.data[off[b] * c.vocab_size..off[b + 1] * c.vocab_size]
                });
                let dint = upstream.intent.map(|m| m.row(b));
                backward_seq(params, t, dpooled, dmlm, dint, &mut g);
            }
            g
        })
        .collect();
    let mut iter = chunks.into_iter();
    let mut total = iter.next().expect("non-empty tape");
    for g in iter {
        total.add_scaled(&g, 1.0);
    }
    Ok(total)
}

/// Eval-mode pooled embeddings of a batch.
pub fn embed(params: &EncoderParams, batch: &[TokenSequence]) -> Result<Mat> {
    Ok(forward(params, batch, &DropoutState::eval(), ForwardOptions::default())?
        .0
        .pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::CLS;

    fn cfg(v: usize) -> EncoderConfig {
        EncoderConfig {
            max_len: 12,
            ..EncoderConfig::new(v)
        }
    }

    fn seq(ids: &[usize], max_len: usize) -> TokenSequence {
        let mut v = vec![CLS];
        v.extend_from_slice(ids);
        TokenSequence::from_ids(v, max_len).unwrap()
    }

    #[test]
    fn param_count_closed_form() {
        let c = EncoderConfig::new(100);
        let p = init_params(&c, 1).unwrap();
        let (v, d, f, l, m) = (100, 64, 128, 2, 32);
        let per_layer = 4 * d * d + 3 * d + 2 * (2 * d) + (d * f + f) + (f * d + d);
        let expected = v * d + m * d + 2 * d + l * per_layer + d * v + v;
        assert_eq!(p.param_count(), expected);
        assert_eq!(p.names().len(), p.tensors().len());
    }

    #[test]
    fn init_is_seeded_and_gains_are_one() {
        let c = cfg(20);
        let a = init_params(&c, 3).unwrap();
        assert_eq!(a, init_params(&c, 3).unwrap());
        assert_ne!(a, init_params(&c, 4).unwrap());
        assert!(a.layers.iter().all(|l| l.ln1_g.data.iter().all(|&g| g == 1.0)));
        assert!(a.emb_ln_g.data.iter().all(|&g| g == 1.0));
        assert!(a.layers[0].bq.data.iter().all(|&b| b == 0.0));
        let bound = (6.0f64 / 128.0).sqrt();
        assert!(a.layers[0].wq.data.iter().all(|w| w.abs() < bound));
    }

    #[test]
    fn bad_config_is_rejected() {
        let mut c = cfg(20);
        c.n_heads = 5;
        assert!(init_params(&c, 0).is_err());
    }

    #[test]
    fn shapes_and_eval_determinism() {
        let c = cfg(30);
        let p = init_params(&c, 0).unwrap();
        let batch: Vec<TokenSequence> = (0..16)
            .map(|i| seq(&(4..4 + (i % 10) + 1).collect::<Vec<_>>(), 12))
            .collect();
        let (o1, _) = forward(&p, &batch, &DropoutState::eval(), ForwardOptions { mlm: true }).unwrap();
        let (o2, _) = forward(&p, &batch, &DropoutState::eval(), ForwardOptions { mlm: true }).unwrap();
        assert_eq!(o1.pooled.shape(), (16, 64));
        assert_eq!(o1, o2);
        let m = o1.mlm.unwrap();
        assert_eq!(m.logits.rows, batch.iter().map(|s| s.len()).sum::<usize>());
        assert!(o1.intent_logits.is_none());
    }

    #[test]
    fn dropout_draws_differ_and_replay() {
        let c = cfg(30);
        let p = init_params(&c, 0).unwrap();
        let b = vec![seq(&[4, 5, 6, 7], 12)];
        let run = |draw| {
            forward(&p, &b, &DropoutState::train(9, draw), ForwardOptions::default())
                .unwrap()
                .0
                .pooled
        };
        assert_ne!(run(0), run(1));
        assert_eq!(run(1), run(1));
    }

    #[test]
    fn zero_dropout_train_equals_eval() {
        let mut c = cfg(30);
        c.dropout_p = 0.0;
        let p = init_params(&c, 0).unwrap();
        let b = vec![seq(&[4, 5, 6, 7], 12), seq(&[8, 9], 12)];
        let e = forward(&p, &b, &DropoutState::eval(), ForwardOptions::default()).unwrap().0;
        let t = forward(&p, &b, &DropoutState::train(1, 5), ForwardOptions::default()).unwrap().0;
        assert_eq!(e, t);
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let p = init_params(&cfg(30), 0).unwrap();
        let long = seq(&[4; 13], 14);
        assert!(matches!(
            forward(&p, &[long], &DropoutState::eval(), ForwardOptions::default()),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn backward_requires_forward() {
        let p = init_params(&cfg(30), 0).unwrap();
        assert!(matches!(
            backward(&p, &Tape::default(), &Upstream::default()),
            Err(Error::BackwardBeforeForward)
        ));
    }

    #[test]
    fn absent_token_gets_zero_gradient() {
        let mut c = cfg(30);
        c.n_layers = 1;
        let p = init_params(&c, 2).unwrap();
        let b = vec![seq(&[4, 5, 6], 12)];
        let (out, tape) = forward(&p, &b, &DropoutState::eval(), ForwardOptions::default()).unwrap();
        let ones = Mat::filled(out.pooled.rows, out.pooled.cols, 1.0);
        let g = backward(&p, &tape, &Upstream { pooled: Some(&ones), ..Default::default() }).unwrap();
        assert!(g.tok_emb.row(20).iter().all(|&x| x == 0.0));
        assert!(g.tok_emb.row(5).iter().any(|&x| x != 0.0));
        assert!(g.mlm_w.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_is_replayable() {
        let p = init_params(&cfg(30), 2).unwrap();
        let b = vec![seq(&[4, 5, 6], 12), seq(&[7, 8], 12)];
        let (out, tape) = forward(&p, &b, &DropoutState::train(3, 0), ForwardOptions::default()).unwrap();
        let up = out.pooled.clone();
        let u = Upstream { pooled: Some(&up), ..Default::default() };
        assert_eq!(backward(&p, &tape, &u).unwrap(), backward(&p, &tape, &u).unwrap());
    }
}
