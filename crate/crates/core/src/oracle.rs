//! Brute-force reference losses and finite-difference gradient checking.
//!
//! The reference losses are literal transcriptions of the loss formulas:
//! nested loops, plain `exp`/`ln`, no max subtraction. They share no code
//! with [`crate::losses`] beyond the `Mat` container, so a fault in the main
//! path cannot hide itself by breaking the reference the same way.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::Serialize;

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};
use crate::tensor::Mat;

fn ref_cos(a: &[f64], b: &[f64], ia: usize, ib: usize) -> Result<f64> {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for k in 0..a.len() {
        ab += a[k] * b[k];
        aa += a[k] * a[k];
        bb += b[k] * b[k];
    }
    if aa == 0.0 {
        return Err(Error::ZeroNorm { index: ia });
    }
    if bb == 0.0 {
        return Err(Error::ZeroNorm { index: ib });
    }
    Ok(ab / (aa.sqrt() * bb.sqrt()))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::BadTemperature(tau))
    }
}

/// Reference for the unsupervised contrastive loss.
pub fn ref_unsupervised_loss(anchors: &Mat, views: &Mat, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let n = anchors.rows;
    if n == 0 || views.rows != n {
        return Err(Error::Shape("anchor/view count".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let num = (ref_cos(anchors.row(i), views.row(i), i, i)? / tau).exp();
        let mut den = 0.0;
        for j in 0..n {
            den += (ref_cos(anchors.row(i), views.row(j), i, j)? / tau).exp();
        }
        total += (num / den).ln();
    }
    Ok(-total / n as f64)
}

/// Reference for the supervised contrastive loss over ordered positive
/// pairs, anchor excluded from its own denominator. `view_of` only has its
/// length checked: positives are defined by label.
pub fn ref_supervised_loss(views: &Mat, labels: &[usize], view_of: &[usize], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let n = views.rows;
    if labels.len() != n || view_of.len() != n {
        return Err(Error::Shape("label count".into()));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        let mut den = 0.0;
        for k in 0..n {
            if k != i {
                den += (ref_cos(views.row(i), views.row(k), i, k)? / tau).exp();
            }
        }
        for j in 0..n {
            if j != i && labels[j] == labels[i] {
                let num = (ref_cos(views.row(i), views.row(j), i, j)? / tau).exp();
                total += (num / den).ln();
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::NoPositivePairs);
    }
    Ok(-total / pairs as f64)
}

/// Reference MLM loss over `(row, original id)` targets.
pub fn ref_mlm_loss(logits: &Mat, targets: &[(usize, usize)]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let mut total = 0.0;
    for &(row, id) in targets {
        if id >= logits.cols {
            return Err(Error::BadLabel {
                label: id,
                classes: logits.cols,
            });
        }
        let r = logits.row(row);
        let den: f64 = r.iter().map(|z| z.exp()).sum();
        total += (r[id].exp() / den).ln();
    }
    Ok(-total / targets.len() as f64)
}

/// Reference label-smoothed cross-entropy with an explicit target vector.
pub fn ref_intent_loss(logits: &Mat, labels: &[usize], epsilon: f64) -> Result<f64> {
    let c = logits.cols;
    if c < 2 {
        return Err(Error::Shape("need at least two classes".into()));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::BadLabel {
                label: y,
                classes: c,
            });
        }
        let target: Vec<f64> = (0..c)
            .map(|j| {
                if j == y {
                    1.0 - epsilon
                } else {
                    epsilon / (c - 1) as f64
                }
            })
            .collect();
        let r = logits.row(i);
        let den: f64 = r.iter().map(|z| z.exp()).sum();
        for j in 0..c {
            let p = r[j].exp() / den;
            total -= target[j] * p.ln();
        }
    }
    Ok(total / labels.len() as f64)
}

/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// `(f(x + h) − f(x − h)) / 2h`.
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, step: f64) -> Result<f64> {
    let hi = f(x + step);
    let lo = f(x - step);
    if !hi.is_finite() || !lo.is_finite() {
        return Err(Error::NonFinite(format!("probe around {x}")));
    }
    Ok((hi - lo) / (2.0 * step))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            coords_per_tensor: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    /// Entries in the tensor.
    pub size: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_rel_error)
            .fold(0.0, f64::max)
    }

    fn from_checks(tensors: Vec<TensorCheck>, opts: &GradCheckOptions) -> Self {
        let passed = tensors.iter().all(|t| t.max_rel_error < opts.tolerance);
        Self {
            step: opts.step,
            tolerance: opts.tolerance,
            tensors,
            passed,
        }
    }
}

/// Seeded coordinate subset: all coordinates when the tensor is small.
fn sample_coords(len: usize, k: usize, seed: u64, tensor: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    let mut rng = rng_for(seed, Stream::GradCheck, &[tensor as u64]);
    let mut v = index::sample(&mut rng, len, k).into_vec();
    v.sort_unstable();
    v
}

/// Compares analytic gradients of `f` against central differences on a
/// seeded subset of coordinates of each named tensor in `point`.
pub fn finite_diff_check<F>(
    names: &[String],
    point: &[Mat],
    analytic: &[Mat],
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Mat]) -> Result<f64>,
{
    if names.len() != point.len() || analytic.len() != point.len() {
        return Err(Error::Shape("names/point/analytic length".into()));
    }
    let mut work: Vec<Mat> = point.to_vec();
    let mut checks = Vec::with_capacity(point.len());
    for (t, name) in names.iter().enumerate() {
        if analytic[t].shape() != point[t].shape() {
            return Err(Error::Shape(format!("gradient of `{name}`")));
        }
        let coords = sample_coords(point[t].len(), opts.coords_per_tensor, opts.seed, t);
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let x0 = work[t].data[c];
            work[t].data[c] = x0 + opts.step;
            let hi = f(&work)?;
            work[t].data[c] = x0 - opts.step;
            let lo = f(&work)?;
            work[t].data[c] = x0;
            if !hi.is_finite() || !lo.is_finite() {
                return Err(Error::NonFinite(format!("{name}[{c}]")));
            }
            let numeric = (hi - lo) / (2.0 * opts.step);
            worst = worst.max(relative_error(analytic[t].data[c], numeric));
        }
        checks.push(TensorCheck {
            name: name.clone(),
            coords: coords.len(),
            size: point[t].data.len(),
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport::from_checks(checks, opts))
}

/// [`finite_diff_check`] over every tensor of an encoder.
pub fn finite_diff_check_params<F>(
    params: &EncoderParams,
    analytic: &EncoderParams,
    mut f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&EncoderParams) -> Result<f64>,
{
    let names = params.names();
    let point: Vec<Mat> = params.tensors().into_iter().cloned().collect();
    let grads: Vec<Mat> = analytic.tensors().into_iter().cloned().collect();
    let mut probe = params.clone();
    finite_diff_check(
        &names,
        &point,
        &grads,
        |tensors| {
            for (dst, src) in probe.tensors_mut().into_iter().zip(tensors) {
                dst.data.copy_from_slice(&src.data);
            }
            f(&probe)
        },
        opts,
    )
}

/// Per-key gradient check of a loss against its own input tensors.
pub fn check_loss_inputs<F>(
    inputs: &BTreeMap<String, Mat>,
    analytic: &BTreeMap<String, Mat>,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Mat]) -> Result<f64>,
{
    let names: Vec<String> = inputs.keys().cloned().collect();
    let point: Vec<Mat> = inputs.values().cloned().collect();
    let grads: Vec<Mat> = names
        .iter()
        .map(|n| {
            analytic
                .get(n)
                .cloned()
                .ok_or_else(|| Error::Shape(format!("no analytic gradient for `{n}`")))
        })
        .collect::<Result<_>>()?;
    finite_diff_check(&names, &point, &grads, f, opts)
}
