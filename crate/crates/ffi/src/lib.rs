//! C ABI over `cpft-core`.
//!
//! Every function returns a [`CpftStatus`]. On failure the message is kept
//! per thread and can be read with [`cpft_last_error`]. Handles are opaque and
//! must be released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use cpft_core::checkpoint::Checkpoint;
use cpft_core::config::TrainConfig;
use cpft_core::corpus::{
    build_pretraining_corpus, generate_synthetic, load_dataset, sample_k_shot, DatasetFormat, LabeledDataset,
    Split, Utterance, DEFAULT_MIN_TOKENS,
};
use cpft_core::eval::{evaluate_accuracy, predict};
use cpft_core::losses::{
    intent_loss, mlm_loss, supervised_contrastive_loss, unsupervised_contrastive_loss, GradKey, LossBundle,
    MlmTarget, Temperature,
};
use cpft_core::tensor::Mat;
use cpft_core::tokenizer::{build_vocab, encode};
use cpft_core::train::{finetune, pretrain};
use cpft_core::Error;

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CpftStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    Domain = 6,
    Training = 7,
    Checkpoint = 8,
    Panic = 9,
}

/// A labeled dataset.
pub struct CpftDataset {
    inner: LabeledDataset,
}

/// An encoder checkpoint, with or without intent head.
pub struct CpftModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CpftStatus {
    match e {
        Error::Io(_) => CpftStatus::Io,
        Error::Parse { .. } | Error::PairCountMismatch { .. } | Error::Json(_) => CpftStatus::Parse,
        Error::Shape(_) | Error::SequenceTooLong { .. } | Error::BadLabel { .. } => CpftStatus::Shape,
        Error::ZeroNorm { .. }
        | Error::BadTemperature(_)
        | Error::NoMaskedPositions
        | Error::NoPositivePairs
        | Error::NothingToMask => CpftStatus::Domain,
        Error::Diverged { .. } | Error::NonFinite(_) | Error::BackwardBeforeForward => CpftStatus::Training,
        Error::Checkpoint(_) | Error::VocabMismatch { .. } => CpftStatus::Checkpoint,
        _ => CpftStatus::InvalidArgument,
    }
}

struct Fail(CpftStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CpftStatus::NullPointer, format!("`{what}` is null"))
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> CpftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CpftStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            CpftStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CpftStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn array<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<Mat, Fail> {
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| Fail(CpftStatus::InvalidArgument, format!("`{what}` is too large")))?;
    Ok(Mat::from_vec(rows, cols, array(p, len, what)?.to_vec()))
}

unsafe fn write_grad(bundle: &LossBundle, key: GradKey, out: *mut f64) {
    if out.is_null() {
        return;
    }
    if let Some(g) = bundle.grad(key) {
        ptr::copy_nonoverlapping(g.data.as_ptr(), out, g.data.len());
    }
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cpft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a jsonl file or pairfile directory.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpft_dataset_load(path: *const c_char, out: *mut *mut CpftDataset) -> CpftStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let inner = load_dataset(&path, DatasetFormat::detect(&path))?;
        *out = Box::into_raw(Box::new(CpftDataset { inner }));
        Ok(())
    })
}

/// Generates a synthetic dataset.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpft_dataset_generate(
    num_intents: usize,
    per_intent: usize,
    confusability: f64,
    seed: u64,
    out: *mut *mut CpftDataset,
) -> CpftStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = generate_synthetic(num_intents, per_intent, confusability, seed)?;
        *out = Box::into_raw(Box::new(CpftDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpft_dataset_num_classes(ds: *const CpftDataset, out: *mut usize) -> CpftStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(ds, "ds")?.inner.num_classes();
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpft_dataset_len(ds: *const CpftDataset, out: *mut usize) -> CpftStatus {
    guard(|| {
        *out_arg(out, "out")? = ref_arg(ds, "ds")?.inner.utterances().len();
        Ok(())
    })
}

/// # Safety
/// `ds` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cpft_dataset_free(ds: *mut CpftDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Stage 1 on the train and validation text of `ds` with default settings
/// except `epochs` and `seed`.
///
/// # Safety
/// `ds` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpft_pretrain(
    ds: *const CpftDataset,
    epochs: usize,
    seed: u64,
    out: *mut *mut CpftModel,
) -> CpftStatus {
    guard(|| {
        let ds = &ref_arg(ds, "ds")?.inner;
        let out = out_arg(out, "out")?;
        let mut cfg = TrainConfig::default();
        cfg.stage1.epochs = epochs;
        cfg.stage1.seed = seed;
        let sources = std::slice::from_ref(ds);
        let corpus = build_pretraining_corpus(sources, DEFAULT_MIN_TOKENS)?;
        let vocab = build_vocab(&build_pretraining_corpus(sources, 1)?, 1)?;
        let inner = pretrain(&corpus, &vocab, &cfg)?;
        *out = Box::into_raw(Box::new(CpftModel { inner }));
        Ok(())
    })
}

/// Stage 2 on a `k`-shot sample of `ds`.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn cpft_finetune(
    model: *const CpftModel,
    ds: *const CpftDataset,
    k: usize,
    epochs: usize,
    tau: f64,
    lambda2: f64,
    seed: u64,
    out: *mut *mut CpftModel,
) -> CpftStatus {
    guard(|| {
        let base = &ref_arg(model, "model")?.inner;
        let ds = &ref_arg(ds, "ds")?.inner;
        let out = out_arg(out, "out")?;
        let mut cfg = TrainConfig::default();
        cfg.stage2.kshot = k;
        cfg.stage2.epochs = epochs;
        cfg.stage2.tau = tau;
        cfg.stage2.lambda2 = lambda2;
        cfg.stage2.seed = seed;
        cfg.validate()?;
        let sample = sample_k_shot(ds, k, seed)?;
        let inner = finetune(base, &sample, ds, &cfg)?.checkpoint;
        *out = Box::into_raw(Box::new(CpftModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpft_model_load(path: *const c_char, out: *mut *mut CpftModel) -> CpftStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let out = out_arg(out, "out")?;
        let inner = Checkpoint::load(&path)?;
        *out = Box::into_raw(Box::new(CpftModel { inner }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn cpft_model_save(model: *const CpftModel, path: *const c_char) -> CpftStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        m.inner.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn cpft_model_free(model: *mut CpftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Intent index predicted for one utterance.
///
/// # Safety
/// `model` must come from this library; `text` must be a nul-terminated
/// string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpft_model_predict(
    model: *const CpftModel,
    text: *const c_char,
    out: *mut usize,
) -> CpftStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.inner;
        let u = Utterance::new(str_arg(text, "text")?, None, Split::Test);
        let out = out_arg(out, "out")?;
        let seq = encode(&m.vocab, &u, m.params.config.max_len)?;
        *out = predict(&m.params, &[seq])?[0];
        Ok(())
    })
}

/// Test-split accuracy.
///
/// # Safety
/// Handles must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpft_model_evaluate(
    model: *const CpftModel,
    ds: *const CpftDataset,
    out: *mut f64,
) -> CpftStatus {
    guard(|| {
        let m = &ref_arg(model, "model")?.inner;
        let ds = &ref_arg(ds, "ds")?.inner;
        let out = out_arg(out, "out")?;
        *out = evaluate_accuracy(m, ds, Split::Test, 0)?.accuracy;
        Ok(())
    })
}

/// In-batch contrastive loss of `n` anchors against `n` masked views, both
/// row-major `n × d`. Gradient buffers may be null.
///
/// # Safety
/// Arrays must hold `n·d` values; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cpft_unsupervised_loss(
    anchors: *const f64,
    views: *const f64,
    n: usize,
    d: usize,
    tau: f64,
    loss: *mut f64,
    grad_anchors: *mut f64,
    grad_views: *mut f64,
) -> CpftStatus {
    guard(|| {
        let a = matrix(anchors, n, d, "anchors")?;
        let v = matrix(views, n, d, "views")?;
        let loss = out_arg(loss, "loss")?;
        let b = unsupervised_contrastive_loss(&a, &v, Temperature::new(tau)?)?;
        *loss = b.value;
        write_grad(&b, GradKey::Anchors, grad_anchors);
        write_grad(&b, GradKey::MaskedViews, grad_views);
        Ok(())
    })
}

/// Supervised contrastive loss of `n` views (`n × d`) with per-view labels
/// and the utterance each view came from.
///
/// # Safety
/// `views` must hold `n·d` values, `labels` and `view_of` `n` each; `loss`
/// must be writable; `grad` is null or holds `n·d` values.
#[no_mangle]
pub unsafe extern "C" fn cpft_supervised_loss(
    views: *const f64,
    labels: *const usize,
    view_of: *const usize,
    n: usize,
    d: usize,
    tau: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> CpftStatus {
    guard(|| {
        let h = matrix(views, n, d, "views")?;
        let labels = array(labels, n, "labels")?;
        let view_of = array(view_of, n, "view_of")?;
        let loss = out_arg(loss, "loss")?;
        let b = supervised_contrastive_loss(&h, labels, view_of, Temperature::new(tau)?)?;
        *loss = b.value;
        write_grad(&b, GradKey::Views, grad);
        Ok(())
    })
}

/// MLM cross-entropy over `m` (row, target) pairs of a `rows × vocab` logit matrix.
///
/// # Safety
/// `logits` must hold `rows·vocab` values, `rows_idx` and `targets` `m`
/// each; `loss` must be writable; `grad` is null or holds `rows·vocab` values.
#[no_mangle]
pub unsafe extern "C" fn cpft_mlm_loss(
    logits: *const f64,
    rows: usize,
    vocab: usize,
    rows_idx: *const usize,
    targets: *const usize,
    m: usize,
    loss: *mut f64,
    grad: *mut f64,
) -> CpftStatus {
    guard(|| {
        let z = matrix(logits, rows, vocab, "logits")?;
        let r = array(rows_idx, m, "rows_idx")?;
        let t = array(targets, m, "targets")?;
        let loss = out_arg(loss, "loss")?;
        let tg: Vec<MlmTarget> = r.iter().zip(t).map(|(&row, &target)| MlmTarget { row, target }).collect();
        let b = mlm_loss(&z, &tg)?;
        *loss = b.value;
        write_grad(&b, GradKey::MlmLogits, grad);
        Ok(())
    })
}

/// Label-smoothed intent cross-entropy of `n × c` logits.
///
/// # Safety
/// `logits` must hold `n·c` values and `labels` `n`; `loss` must be
/// writable; `grad` is null or holds `n·c` values.
#[no_mangle]
pub unsafe extern "C" fn cpft_intent_loss(
    logits: *const f64,
    labels: *const usize,
    n: usize,
    c: usize,
    epsilon: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> CpftStatus {
    guard(|| {
        let z = matrix(logits, n, c, "logits")?;
        let labels = array(labels, n, "labels")?;
        let loss = out_arg(loss, "loss")?;
        let b = intent_loss(&z, labels, epsilon)?;
        *loss = b.value;
        write_grad(&b, GradKey::IntentLogits, grad);
        Ok(())
    })
}
