//! Adaptive-moment optimizer with bias correction.

use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl OptimizerState {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &EncoderParams, config: AdamConfig) -> Self {
        let zeros: Vec<Mat> = params
            .tensors()
            .iter()
            .map(|m| Mat::zeros(m.rows, m.cols))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One update of every tensor. Rejects non-finite gradients before touching
/// any parameter.
pub fn optimizer_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut OptimizerState,
) -> Result<()> {
    let names = params.names();
    let gs = grads.tensors();
    if gs.len() != state.first.len() || names.len() != gs.len() {
        return Err(Error::Shape(format!(
            "{} gradient tensors for {} optimizer slots",
            gs.len(),
            state.first.len()
        )));
    }
    for ((g, m), name) in gs.iter().zip(&state.first).zip(&names) {
        if g.shape() != m.shape() {
            return Err(Error::Shape(format!("gradient of `{name}`")));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(name.clone()));
        }
    }
    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(gs)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            let mi = beta1 * m.data[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data[i] + (1.0 - beta2) * gi * gi;
            m.data[i] = mi;
            v.data[i] = vi;
            p.data[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};

    fn small() -> EncoderParams {
        let mut c = EncoderConfig::new(8);
        c.d_model = 8;
        c.n_heads = 2;
        c.d_ff = 8;
        c.n_layers = 1;
        c.max_len = 4;
        init_params(&c, 0).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = small();
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = OptimizerState::new(&p, AdamConfig::with_lr(0.1));
        optimizer_step(&mut p, &g, &mut s).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = small();
        let before = p.mlm_b.data[0];
        let mut g = p.zeros_like();
        g.mlm_b.data[0] = 1.0;
        let mut s = OptimizerState::new(&p, AdamConfig::with_lr(0.1));
        optimizer_step(&mut p, &g, &mut s).unwrap();
        // m̂ = g, v̂ = g², so the step is lr · g / (|g| + eps)
        let expected = 0.1 / (1.0 + 1e-8);
        assert!((before - p.mlm_b.data[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = small();
        let mut g = p.zeros_like();
        g.layers[0].w1.data[3] = f64::NAN;
        let mut s = OptimizerState::new(&p, AdamConfig::with_lr(0.1));
        match optimizer_step(&mut p, &g, &mut s) {
            Err(Error::NonFinite(name)) => assert_eq!(name, "layer0.w1"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(s.step, 0);
    }

    #[test]
    fn identical_runs_match() {
        let run = || {
            let mut p = small();
            let mut s = OptimizerState::new(&p, AdamConfig::with_lr(0.01));
            for k in 0..5 {
                let mut g = p.zeros_like();
                for (i, x) in g.tok_emb.data.iter_mut().enumerate() {
                    *x = ((i + k) as f64).sin();
                }
                optimizer_step(&mut p, &g, &mut s).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
