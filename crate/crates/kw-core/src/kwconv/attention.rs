//! Row normalization of attention logits and the temperature schedule.
//!
//! Every function blends the normalized logits against the frozen beta row:
//! `alpha_j = (1 - tau) * norm(z)_j + tau * beta_j`. The linear normalizer
//! `z_j / sum_p |z_p|` is the default; softmax, sigmoid and
//! `max(z_j, 0) / sum_p |z_p|` are the ablation alternatives. The zero-cell
//! logit participates in the denominator like any other column.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::{AttentionFn, TemperatureSchedule};
use crate::tensor::tape::{CustomOp, GradTape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Below this total magnitude the `|z|`-normalized term is defined as the
/// zero vector instead of dividing.
pub const DEGENERATE_NORM_EPS: f64 = 1e-12;

/// `tau = max(0, 1 - step / anneal_steps)`.
pub fn temperature_at(schedule: &TemperatureSchedule, step: usize) -> f64 {
    if schedule.anneal_steps == 0 || step >= schedule.anneal_steps {
        0.0
    } else {
        1.0 - step as f64 / schedule.anneal_steps as f64
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-v))
}

/// Normalized term before the beta blend, written into `out`.
fn normalized_term(z: &[f64], fun: AttentionFn, out: &mut [f64]) {
    match fun {
        AttentionFn::Naf | AttentionFn::ReluNorm => {
            let s: f64 = z.iter().map(|v| v.abs()).sum();
            if s < DEGENERATE_NORM_EPS {
                log::debug!("degenerate attention row: sum|z| = {s:e}, emitting zeros");
                out.fill(0.0);
                return;
            }
            for (o, &v) in out.iter_mut().zip(z) {
                let num = if matches!(fun, AttentionFn::ReluNorm) { v.max(0.0) } else { v };
                *o = num / s;
            }
        }
        AttentionFn::Softmax => {
            let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let mut s = 0.0;
            for (o, &v) in out.iter_mut().zip(z) {
                *o = libm::exp(v - m);
                s += *o;
            }
            for o in out.iter_mut() {
                *o /= s;
            }
        }
        AttentionFn::Sigmoid => {
            for (o, &v) in out.iter_mut().zip(z) {
                *o = sigmoid(v);
            }
        }
    }
}

/// Normalize one row of logits and blend with its beta row.
pub fn normalize_attention(z_row: &[f64], tau: f64, beta_row: &[f64], fun: AttentionFn) -> Vec<f64> {
    debug_assert_eq!(z_row.len(), beta_row.len());
    let mut out = vec![0.0; z_row.len()];
    normalized_term(z_row, fun, &mut out);
    for (o, &b) in out.iter_mut().zip(beta_row) {
        *o = (1.0 - tau) * *o + tau * b;
    }
    out
}

/// Row-wise normalization of an `(..., m, n_cols)` logit tensor against an
/// `(m, n_cols)` beta tensor.
pub fn normalize_attention_all(
    z: &Tensor,
    tau: f64,
    beta: &Tensor,
    fun: AttentionFn,
) -> Result<Tensor> {
    let dims = z.shape();
    if dims.len() < 2 {
        return Err(TensorError::ShapeMismatch {
            op: "normalize_attention",
            detail: alloc::format!("logits must be at least 2-d, got {dims:?}"),
        });
    }
    let n_cols = dims[dims.len() - 1];
    let m = dims[dims.len() - 2];
    if beta.shape() != [m, n_cols] {
        return Err(TensorError::ShapeMismatch {
            op: "normalize_attention",
            detail: alloc::format!(
                "beta shape {:?} does not match logit rows ({m}, {n_cols})",
                beta.shape()
            ),
        });
    }
    let mut out = Tensor::zeros(dims);
    let rows = z.numel() / n_cols;
    for r in 0..rows {
        let zr = &z.data()[r * n_cols..(r + 1) * n_cols];
        let br = &beta.data()[(r % m) * n_cols..(r % m + 1) * n_cols];
        let a = normalize_attention(zr, tau, br, fun);
        out.data_mut()[r * n_cols..(r + 1) * n_cols].copy_from_slice(&a);
    }
    Ok(out)
}

/// Vector-Jacobian product of one row, accumulated into `gz`.
fn row_vjp(z: &[f64], g: &[f64], tau: f64, fun: AttentionFn, gz: &mut [f64]) {
    let one_minus_tau = 1.0 - tau;
    match fun {
        AttentionFn::Naf => {
            let s: f64 = z.iter().map(|v| v.abs()).sum();
            if s < DEGENERATE_NORM_EPS {
                gz.fill(0.0);
                return;
            }
            let dot: f64 = g.iter().zip(z).map(|(gj, zj)| gj * zj).sum();
            for (k, o) in gz.iter_mut().enumerate() {
                *o = one_minus_tau * (g[k] / s - sign(z[k]) * dot / (s * s));
            }
        }
        AttentionFn::ReluNorm => {
            let s: f64 = z.iter().map(|v| v.abs()).sum();
            if s < DEGENERATE_NORM_EPS {
                gz.fill(0.0);
                return;
            }
            let dot: f64 = g.iter().zip(z).map(|(gj, zj)| gj * zj.max(0.0)).sum();
            for (k, o) in gz.iter_mut().enumerate() {
                let direct = if z[k] > 0.0 { g[k] / s } else { 0.0 };
                *o = one_minus_tau * (direct - sign(z[k]) * dot / (s * s));
            }
        }
        AttentionFn::Softmax => {
            let mut p = vec![0.0; z.len()];
            normalized_term(z, AttentionFn::Softmax, &mut p);
            let dot: f64 = g.iter().zip(&p).map(|(gj, pj)| gj * pj).sum();
            for (k, o) in gz.iter_mut().enumerate() {
                *o = one_minus_tau * p[k] * (g[k] - dot);
            }
        }
        AttentionFn::Sigmoid => {
            for (k, o) in gz.iter_mut().enumerate() {
                let sk = sigmoid(z[k]);
                *o = one_minus_tau * g[k] * sk * (1.0 - sk);
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

struct NormalizeAttentionOp {
    tau: f64,
    fun: AttentionFn,
    n_cols: usize,
}

impl CustomOp for NormalizeAttentionOp {
    fn name(&self) -> &'static str {
        "normalize_attention"
    }

    fn grads(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &Tensor,
    ) -> Vec<Option<Tensor>> {
        let z = inputs[0];
        let mut gz = Tensor::zeros(z.shape());
        let rows = z.numel() / self.n_cols;
        for r in 0..rows {
            let span = r * self.n_cols..(r + 1) * self.n_cols;
            row_vjp(
                &z.data()[span.clone()],
                &grad_out.data()[span.clone()],
                self.tau,
                self.fun,
                &mut gz.data_mut()[span],
            );
        }
        vec![Some(gz)]
    }
}

/// Record row normalization on a tape. `beta` is frozen metadata, not an
/// input: no gradient flows to it and the `tau * beta` offset is constant.
pub fn normalize_attention_tape(
    tape: &mut GradTape,
    z: Var,
    tau: f64,
    beta: &Tensor,
    fun: AttentionFn,
) -> Result<Var> {
    let value = normalize_attention_all(tape.value(z), tau, beta, fun)?;
    let n_cols = beta.shape()[1];
    Ok(tape.custom(
        Rc::new(NormalizeAttentionOp { tau, fun, n_cols }),
        &[z],
        value,
    ))
}
