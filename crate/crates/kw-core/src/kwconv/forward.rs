//! Attention-logit computation and the full per-sample forward pass, plus
//! the vanilla dynamic-convolution reference used as an equivalence target.

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use super::{
    assemble_kernel_tape, normalize_attention_all, normalize_attention_tape, AttentionFn,
    AttentionModuleParams, AttentionVars, KWConvLayer, Warehouse,
};
use crate::tensor::tape::{GradTape, Var};
use crate::tensor::{ops, Result, Tensor, TensorError};

fn check_channels(x: &Tensor, attention: &AttentionModuleParams) -> Result<()> {
    if x.shape().len() != 4 || x.shape()[1] != attention.in_channels() {
        return Err(TensorError::ShapeMismatch {
            op: "attention_logits",
            detail: alloc::format!(
                "input {:?} does not provide {} channels for layer '{}'",
                x.shape(),
                attention.in_channels(),
                attention.layer_id
            ),
        });
    }
    Ok(())
}

/// Raw feature logits `(N, m, n_cols)`: GAP, FC down to `ceil(c/16)`, ReLU,
/// FC up to `m * n_cols`.
pub fn attention_logits(x: &Tensor, layer: &KWConvLayer) -> Result<Tensor> {
    check_channels(x, &layer.attention)?;
    let pooled = ops::global_avg_pool(x)?;
    let hidden = ops::relu(&ops::dense_affine(
        &pooled,
        &layer.attention.fc1_weight,
        &layer.attention.fc1_bias,
    )?);
    let logits = ops::dense_affine(&hidden, &layer.attention.fc2_weight, &layer.attention.fc2_bias)?;
    logits.reshaped(&[x.shape()[0], layer.m(), layer.n_cols()])
}

/// Tape version of [`attention_logits`].
pub fn attention_logits_tape(
    tape: &mut GradTape,
    x: Var,
    layer: &KWConvLayer,
    attn: &AttentionVars,
) -> Result<Var> {
    check_channels(tape.value(x), &layer.attention)?;
    let batch = tape.value(x).shape()[0];
    let pooled = tape.global_avg_pool(x)?;
    let pre = tape.dense_affine(pooled, attn.fc1_weight, attn.fc1_bias)?;
    let hidden = tape.relu(pre);
    let logits = tape.dense_affine(hidden, attn.fc2_weight, attn.fc2_bias)?;
    tape.reshape(logits, &[batch, layer.m(), layer.n_cols()])
}

/// Normalized attentions `(N, m, n_cols)` at the layer's effective
/// temperature; what the statistics exporter averages.
pub fn kw_attentions(x: &Tensor, layer: &KWConvLayer, tau: f64) -> Result<Tensor> {
    let z = attention_logits(x, layer)?;
    normalize_attention_all(&z, layer.effective_tau(tau), &layer.beta, layer.attention_fn)
}

/// Full KernelWarehouse forward for one layer, recorded on a tape.
///
/// Attention is input-dependent, so every sample assembles its own kernel:
/// slice the batch, normalize that sample's logit rows, assemble, convolve,
/// and concatenate the per-sample outputs.
pub fn kw_forward_tape(
    tape: &mut GradTape,
    x: Var,
    layer: &KWConvLayer,
    attn: &AttentionVars,
    cells: &[Var],
    tau: f64,
) -> Result<Var> {
    let tau = layer.effective_tau(tau);
    let z = attention_logits_tape(tape, x, layer, attn)?;
    let batch = tape.value(x).shape()[0];
    let partition = Rc::new(layer.partition.clone());
    let mut outputs = Vec::with_capacity(batch);
    for i in 0..batch {
        let xi = tape.slice_batch(x, i)?;
        let zi = tape.slice_batch(z, i)?;
        let zi = tape.reshape(zi, &[layer.m(), layer.n_cols()])?;
        let alpha = normalize_attention_tape(tape, zi, tau, &layer.beta, layer.attention_fn)?;
        let kernel = assemble_kernel_tape(tape, alpha, cells, &partition)?;
        outputs.push(tape.conv2d(xi, kernel, layer.spec.stride, layer.spec.pad)?);
    }
    tape.concat_batch(&outputs)
}

/// Inference-only forward: same computation on a throwaway tape.
pub fn kw_forward(x: &Tensor, layer: &KWConvLayer, warehouse: &Warehouse, tau: f64) -> Result<Tensor> {
    let mut tape = GradTape::new();
    let xv = tape.leaf(x.clone());
    let attn = layer.attention.bind(&mut tape);
    let wv = warehouse.bind(&mut tape);
    let y = kw_forward_tape(&mut tape, xv, layer, &attn, &wv.cells, tau)?;
    Ok(tape.value(y).clone())
}

/// Vanilla dynamic convolution: a per-sample mixture of whole kernels.
///
/// Deliberately written with plain loops (only the convolution itself is
/// shared with the fast path) so it can serve as an independent equivalence
/// target for the `m = 1`, `l = 1`, cell = kernel degeneration.
#[allow(clippy::too_many_arguments)]
pub fn reference_dynamic_conv(
    x: &Tensor,
    kernels: &[Tensor],
    attention: &AttentionModuleParams,
    tau: f64,
    beta_row: &[f64],
    fun: AttentionFn,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    if kernels.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "reference_dynamic_conv",
            detail: "need at least one kernel".into(),
        });
    }
    let kshape = kernels[0].shape().to_vec();
    for k in kernels {
        if k.shape() != kshape {
            return Err(TensorError::ShapeMismatch {
                op: "reference_dynamic_conv",
                detail: "kernels differ in shape".into(),
            });
        }
    }
    let n_cols = beta_row.len();
    if attention.logit_count() != n_cols || !(n_cols == kernels.len() || n_cols == kernels.len() + 1)
    {
        return Err(TensorError::ShapeMismatch {
            op: "reference_dynamic_conv",
            detail: alloc::format!(
                "{} logits / {} beta columns for {} kernels",
                attention.logit_count(),
                n_cols,
                kernels.len()
            ),
        });
    }
    check_channels(x, attention)?;

    let [batch, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let hidden = attention.hidden_width();
    let mut out: Option<Tensor> = None;

    for b in 0..batch {
        // GAP.
        let mut pooled = vec![0.0; c];
        for (ci, p) in pooled.iter_mut().enumerate() {
            let base = (b * c + ci) * h * w;
            *p = x.data()[base..base + h * w].iter().sum::<f64>() / (h * w) as f64;
        }
        // FC -> ReLU -> FC.
        let mut hid = vec![0.0; hidden];
        for (j, hv) in hid.iter_mut().enumerate() {
            let mut acc = attention.fc1_bias.data()[j];
            for (i, p) in pooled.iter().enumerate() {
                acc += attention.fc1_weight.data()[j * c + i] * p;
            }
            *hv = acc.max(0.0);
        }
        let mut z = vec![0.0; n_cols];
        for (k, zv) in z.iter_mut().enumerate() {
            let mut acc = attention.fc2_bias.data()[k];
            for (j, hv) in hid.iter().enumerate() {
                acc += attention.fc2_weight.data()[k * hidden + j] * hv;
            }
            *zv = acc;
        }
        // Normalize and blend, written out longhand.
        let mut alpha = vec![0.0; n_cols];
        match fun {
            AttentionFn::Naf | AttentionFn::ReluNorm => {
                let s: f64 = z.iter().map(|v| v.abs()).sum();
                if s >= super::attention::DEGENERATE_NORM_EPS {
                    for (a, &v) in alpha.iter_mut().zip(&z) {
                        let num = if matches!(fun, AttentionFn::ReluNorm) { v.max(0.0) } else { v };
                        *a = num / s;
                    }
                }
            }
            AttentionFn::Softmax => {
                let m = z.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let mut s = 0.0;
                for (a, &v) in alpha.iter_mut().zip(&z) {
                    *a = libm::exp(v - m);
                    s += *a;
                }
                for a in alpha.iter_mut() {
                    *a /= s;
                }
            }
            AttentionFn::Sigmoid => {
                for (a, &v) in alpha.iter_mut().zip(&z) {
                    *a = 1.0 / (1.0 + libm::exp(-v));
                }
            }
        }
        for (a, &bv) in alpha.iter_mut().zip(beta_row) {
            *a = (1.0 - tau) * *a + tau * bv;
        }
        // Mix whole kernels; a trailing zero-cell column is skipped.
        let mut mixed = Tensor::zeros(&kshape);
        for (j, kernel) in kernels.iter().enumerate() {
            let a = alpha[j];
            if a == 0.0 {
                continue;
            }
            for (mv, &kv) in mixed.data_mut().iter_mut().zip(kernel.data()) {
                *mv += a * kv;
            }
        }

        let xb = Tensor::from_vec(
            &[1, c, h, w],
            x.data()[b * c * h * w..(b + 1) * c * h * w].to_vec(),
        )?;
        let yb = ops::conv2d(&xb, &mixed, stride, pad)?;
        out = Some(match out {
            None => yb,
            Some(acc) => {
                let mut shape = acc.shape().to_vec();
                shape[0] += 1;
                let mut data = acc.into_data();
                data.extend_from_slice(yb.data());
                Tensor::from_vec(&shape, data)?
            }
        });
    }
    out.ok_or(TensorError::InvalidArgument {
        op: "reference_dynamic_conv",
        detail: "empty batch".into(),
    })
}
