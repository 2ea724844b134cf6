//! Training objectives and their gradients.
//!
//! * unsupervised contrastive loss between utterances and their masked views
//! * masked-language-modeling cross-entropy over masked positions
//! * supervised contrastive loss over labeled dropout views
//! * label-smoothed intent cross-entropy
//!
//! Every loss returns a [`LossBundle`] holding the scalar value and the
//! gradient with respect to each of its inputs. All softmax denominators are
//! evaluated with log-sum-exp.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{dot, log_sum_exp, Mat};

/// Which loss input a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GradKey {
    /// Clean-utterance embeddings of the unsupervised loss.
    Anchors,
    /// Masked-view embeddings of the unsupervised loss.
    MaskedViews,
    /// Stacked MLM logits.
    MlmLogits,
    /// Dropout-view embeddings of the supervised contrastive loss.
    Views,
    /// Intent-head logits.
    IntentLogits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBundle {
    pub value: f64,
    pub grads: BTreeMap<GradKey, Mat>,
}

impl LossBundle {
    pub fn grad(&self, key: GradKey) -> Option<&Mat> {
        self.grads.get(&key)
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.values().all(Mat::all_finite)
    }

    /// `a + weight · b`, merging gradients by key.
    pub fn combine(a: &LossBundle, b: &LossBundle, weight: f64) -> LossBundle {
        let mut grads = a.grads.clone();
        for (k, g) in &b.grads {
            match grads.get_mut(k) {
                Some(acc) => acc.add_scaled(g, weight),
                None => {
                    let mut g = g.clone();
                    g.scale(weight);
                    grads.insert(*k, g);
                }
            }
        }
        LossBundle {
            value: a.value + weight * b.value,
            grads,
        }
    }
}

/// Softmax temperature; always strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(Error::BadTemperature(tau))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

/// Loss-combination weights: `λ` for MLM in stage 1, `λ′` for the intent
/// loss in stage 2, and the label-smoothing mass `ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageWeights {
    pub lambda: f64,
    pub lambda2: f64,
    pub epsilon: f64,
}

impl Default for StageWeights {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            lambda2: 0.03,
            epsilon: 0.1,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("{} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(Error::ZeroNorm { index: 0 });
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm { index: 1 });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-normalized copy plus the original row norms.
fn normalize_rows(m: &Mat) -> Result<(Mat, Vec<f64>)> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        let n = norm(m.row(r));
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroNorm { index: r });
        }
        out.row_mut(r).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pairwise cosine similarities `S[i][j] = cos(a_i, b_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub s: Mat,
    a_hat: Mat,
    a_norm: Vec<f64>,
    b_hat: Mat,
    b_norm: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn between(a: &Mat, b: &Mat) -> Result<Self> {
        if a.cols != b.cols {
            return Err(Error::Shape(format!(
                "embedding widths {} and {}",
                a.cols, b.cols
            )));
        }
        let (a_hat, a_norm) = normalize_rows(a)?;
        let (b_hat, b_norm) = normalize_rows(b)?;
        let mut s = Mat::zeros(a.rows, b.rows);
        for i in 0..a.rows {
            for j in 0..b.rows {
                s.data[i * b.rows + j] = dot(a_hat.row(i), b_hat.row(j));
            }
        }
        Ok(Self {
            s,
            a_hat,
            a_norm,
            b_hat,
            b_norm,
        })
    }

    /// Pulls `dL/dS` back to `(dL/da, dL/db)`.
    fn backward(&self, ds: &Mat) -> (Mat, Mat) {
        let d = self.a_hat.cols;
        let mut da = Mat::zeros(self.a_hat.rows, d);
        let mut db = Mat::zeros(self.b_hat.rows, d);
        let mut acc = vec![0.0; d];
        for i in 0..self.a_hat.rows {
            acc.iter_mut().for_each(|x| *x = 0.0);
            let mut radial = 0.0;
            for j in 0..self.b_hat.rows {
                let g = ds.get(i, j);
                if g == 0.0 {
                    continue;
                }
                radial += g * self.s.get(i, j);
                for (x, y) in acc.iter_mut().zip(self.b_hat.row(j)) {
                    *x += g * y;
                }
            }
            let ah = self.a_hat.row(i);
            for ((o, x), y) in da.row_mut(i).iter_mut().zip(&acc).zip(ah) {
                *o = (x - radial * y) / self.a_norm[i];
            }
        }
        for j in 0..self.b_hat.rows {
            acc.iter_mut().for_each(|x| *x = 0.0);
            let mut radial = 0.0;
            for i in 0..self.a_hat.rows {
                let g = ds.get(i, j);
                if g == 0.0 {
                    continue;
                }
                radial += g * self.s.get(i, j);
                for (x, y) in acc.iter_mut().zip(self.a_hat.row(i)) {
                    *x += g * y;
                }
            }
            let bh = self.b_hat.row(j);
            for ((o, x), y) in db.row_mut(j).iter_mut().zip(&acc).zip(bh) {
                *o = (x - radial * y) / self.b_norm[j];
            }
        }
        (da, db)
    }
}

/// In-batch contrastive loss between utterances and their masked views:
/// `-(1/N) Σ_i log softmax_j(cos(h_i, h̄_j)/τ)[i]`.
pub fn unsupervised_contrastive_loss(
    anchors: &Mat,
    views: &Mat,
    tau: Temperature,
) -> Result<LossBundle> {
    let n = anchors.rows;
    if n == 0 || views.rows != n {
        return Err(Error::Shape(format!(
            "{} anchors vs {} views",
            anchors.rows, views.rows
        )));
    }
    let sim = SimilarityMatrix::between(anchors, views)?;
    let t = tau.get();
    let mut value = 0.0;
    let mut ds = Mat::zeros(n, n);
    let mut logits = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            logits[j] = sim.s.get(i, j) / t;
        }
        let lse = log_sum_exp(&logits);
        value += lse - logits[i];
        for j in 0..n {
            let p = (logits[j] - lse).exp();
            let target = if i == j { 1.0 } else { 0.0 };
            ds.set(i, j, (p - target) / (n as f64 * t));
        }
    }
    let (da, db) = sim.backward(&ds);
    let mut grads = BTreeMap::new();
    grads.insert(GradKey::Anchors, da);
    grads.insert(GradKey::MaskedViews, db);
    Ok(LossBundle {
        value: value / n as f64,
        grads,
    })
}

/// One MLM prediction target: a row of the stacked logits and the original id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlmTarget {
    pub row: usize,
    pub target: usize,
}

/// `-(1/M) Σ_m log softmax(logits_m)[x_m]` over the `M` masked positions.
pub fn mlm_loss(logits: &Mat, targets: &[MlmTarget]) -> Result<LossBundle> {
    if targets.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    let m = targets.len() as f64;
    let v = logits.cols;
    let mut grad = Mat::zeros(logits.rows, v);
    let mut value = 0.0;
    for t in targets {
        if t.row >= logits.rows {
            return Err(Error::Shape(format!("row {} of {}", t.row, logits.rows)));
        }
        if t.target >= v {
            return Err(Error::BadLabel {
                label: t.target,
                classes: v,
            });
        }
        let row = logits.row(t.row);
        let lse = log_sum_exp(row);
        value += lse - row[t.target];
        let g = grad.row_mut(t.row);
        for (gj, &z) in g.iter_mut().zip(row) {
            *gj += (z - lse).exp() / m;
        }
        g[t.target] -= 1.0 / m;
    }
    let mut grads = BTreeMap::new();
    grads.insert(GradKey::MlmLogits, grad);
    Ok(LossBundle {
        value: value / m,
        grads,
    })
}

/// `L_uns_cl + λ · L_mlm`.
pub fn stage1_loss(uns_cl: &LossBundle, mlm: &LossBundle, lambda: f64) -> LossBundle {
    LossBundle::combine(uns_cl, mlm, lambda)
}

/// Supervised contrastive loss over labeled views.
///
/// For every ordered pair `(i, j)`, `i ≠ j`, with equal labels:
/// `-log exp(s_ij/τ) / Σ_{n≠i} exp(s_in/τ)`, averaged over the `T` such pairs.
/// `view_of[i]` names the utterance entry `i` was encoded from; entries of the
/// same utterance must carry the same label.
pub fn supervised_contrastive_loss(
    views: &Mat,
    labels: &[usize],
    view_of: &[usize],
    tau: Temperature,
) -> Result<LossBundle> {
    let n = views.rows;
    if n < 2 {
        return Err(Error::Shape(format!("need at least 2 views, got {n}")));
    }
    if labels.len() != n || view_of.len() != n {
        return Err(Error::Shape(format!(
            "{n} views, {} labels, {} view ids",
            labels.len(),
            view_of.len()
        )));
    }
    let mut label_of_view: BTreeMap<usize, usize> = BTreeMap::new();
    for (&u, &y) in view_of.iter().zip(labels) {
        if *label_of_view.entry(u).or_insert(y) != y {
            return Err(Error::InvalidArgument(format!(
                "views of utterance {u} carry different labels"
            )));
        }
    }
    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let pairs: usize = positives.iter().sum();
    if pairs == 0 {
        return Err(Error::NoPositivePairs);
    }
    let t_pairs = pairs as f64;
    let sim = SimilarityMatrix::between(views, views)?;
    let t = tau.get();
    let mut value = 0.0;
    let mut ds = Mat::zeros(n, n);
    let mut logits = Vec::with_capacity(n - 1);
    for i in 0..n {
        if positives[i] == 0 {
            continue;
        }
        logits.clear();
        logits.extend((0..n).filter(|&j| j != i).map(|j| sim.s.get(i, j) / t));
        let lse = log_sum_exp(&logits);
        let np = positives[i] as f64;
        value += np * lse;
        for j in (0..n).filter(|&j| j != i) {
            let l = sim.s.get(i, j) / t;
            let is_pos = labels[j] == labels[i];
            if is_pos {
                value -= l;
            }
            let p = (l - lse).exp();
            let g = (np * p - if is_pos { 1.0 } else { 0.0 }) / (t_pairs * t);
            ds.set(i, j, g);
        }
    }
    let (da, db) = sim.backward(&ds);
    let mut grad = da;
    grad.add_scaled(&db, 1.0);
    let mut grads = BTreeMap::new();
    grads.insert(GradKey::Views, grad);
    Ok(LossBundle {
        value: value / t_pairs,
        grads,
    })
}

/// Mean cross-entropy against label-smoothed targets: `1 − ε` on the gold
/// class and `ε/(C−1)` on every other class.
pub fn intent_loss(logits: &Mat, labels: &[usize], epsilon: f64) -> Result<LossBundle> {
    let (n, c) = logits.shape();
    if c < 2 {
        return Err(Error::Shape(format!("need at least 2 classes, got {c}")));
    }
    if n == 0 || labels.len() != n {
        return Err(Error::Shape(format!("{n} logit rows, {} labels", labels.len())));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing must lie in [0, 1), got {epsilon}"
        )));
    }
    let off = epsilon / (c - 1) as f64;
    let mut grad = Mat::zeros(n, c);
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::BadLabel {
                label: y,
                classes: c,
            });
        }
        let row = logits.row(i);
        let lse = log_sum_exp(row);
        let g = grad.row_mut(i);
        for j in 0..c {
            let target = if j == y { 1.0 - epsilon } else { off };
            let logp = row[j] - lse;
            if target > 0.0 {
                value -= target * logp;
            }
            g[j] = (logp.exp() - target) / n as f64;
        }
    }
    let mut grads = BTreeMap::new();
    grads.insert(GradKey::IntentLogits, grad);
    Ok(LossBundle {
        value: value / n as f64,
        grads,
    })
}

/// `L_s_cl + λ′ · L_intent`.
pub fn stage2_loss(s_cl: &LossBundle, intent: &LossBundle, lambda2: f64) -> LossBundle {
    LossBundle::combine(s_cl, intent, lambda2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tau(t: f64) -> Temperature {
        Temperature::new(t).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            cosine_sim(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::ZeroNorm { index: 0 })
        ));
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-0.1).is_err());
        assert!(Temperature::new(f64::NAN).is_err());
    }

    #[test]
    fn unsupervised_single_pair_is_zero() {
        let h = Mat::from_rows(&[vec![0.3, -1.2, 0.5]]);
        let hb = Mat::from_rows(&[vec![-2.0, 0.1, 0.7]]);
        assert_eq!(unsupervised_contrastive_loss(&h, &hb, tau(0.1)).unwrap().value, 0.0);
    }

    #[test]
    fn unsupervised_uniform_is_ln_n() {
        let h = Mat::filled(4, 3, 1.0);
        let l = unsupervised_contrastive_loss(&h, &h, tau(0.1)).unwrap();
        assert!((l.value - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unsupervised_zero_norm_is_rejected() {
        let h = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(
            unsupervised_contrastive_loss(&h, &h, tau(0.1)),
            Err(Error::ZeroNorm { index: 1 })
        ));
    }

    #[test]
    fn mlm_uniform_and_confident() {
        let logits = Mat::zeros(3, 100);
        let t = [MlmTarget { row: 1, target: 7 }];
        assert!((mlm_loss(&logits, &t).unwrap().value - 100f64.ln()).abs() < 1e-12);

        let mut sharp = Mat::zeros(1, 10);
        sharp.set(0, 4, 50.0);
        assert!(mlm_loss(&sharp, &[MlmTarget { row: 0, target: 4 }]).unwrap().value < 1e-8);
        assert!(matches!(mlm_loss(&sharp, &[]), Err(Error::NoMaskedPositions)));
    }

    #[test]
    fn stage_combinations() {
        let mk = |v: f64| LossBundle {
            value: v,
            grads: BTreeMap::new(),
        };
        assert_eq!(stage1_loss(&mk(1.0), &mk(2.0), 1.0).value, 3.0);
        assert_eq!(stage1_loss(&mk(1.0), &mk(2.0), 0.0).value, 1.0);
        assert!((stage2_loss(&mk(1.0), &mk(2.0), 0.03).value - 1.06).abs() < 1e-15);
        assert_eq!(stage2_loss(&mk(1.0), &mk(2.0), 0.0).value, 1.0);
    }

    #[test]
    fn supcon_two_views_of_one_utterance_is_zero() {
        let h = Mat::from_rows(&[vec![1.0, 0.2], vec![0.9, 0.3]]);
        let l = supervised_contrastive_loss(&h, &[0, 0], &[0, 0], tau(0.1)).unwrap();
        assert!(l.value.abs() < 1e-15);
    }

    #[test]
    fn supcon_uniform_is_ln_3() {
        let h = Mat::filled(4, 3, 1.0);
        let l = supervised_contrastive_loss(&h, &[0, 0, 1, 1], &[0, 0, 1, 1], tau(0.3)).unwrap();
        assert!((l.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn supcon_without_positives_fails() {
        let h = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            supervised_contrastive_loss(&h, &[0, 1], &[0, 1], tau(0.1)),
            Err(Error::NoPositivePairs)
        ));
        assert!(supervised_contrastive_loss(&h, &[0, 1], &[0, 0], tau(0.1)).is_err());
    }

    #[test]
    fn intent_examples() {
        let mut l = Mat::zeros(2, 4);
        let u = intent_loss(&l, &[0, 3], 0.1).unwrap().value;
        assert!((u - 4f64.ln()).abs() < 1e-12);
        l.set(0, 2, 50.0);
        l.set(1, 1, 50.0);
        assert!(intent_loss(&l, &[2, 1], 0.0).unwrap().value < 1e-8);
        assert!(matches!(
            intent_loss(&l, &[2, 4], 0.0),
            Err(Error::BadLabel { label: 4, classes: 4 })
        ));
    }
}
