//! Forward operations and their gradient kernels.
//!
//! `conv2d` is the im2col + matrix-multiply fast path; `conv2d_naive` is the
//! direct six-loop form kept as an independent oracle for equivalence tests.
//! Both compute cross-correlation (no kernel flip) and carry no bias.

use alloc::format;
use alloc::vec;

use super::{Result, Tensor, TensorError};

fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

fn check_conv_args(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<[usize; 8]> {
    if x.shape().len() != 4 || w.shape().len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "expected 4-d input and kernel, got {:?} and {:?}",
                x.shape(),
                w.shape()
            ),
        });
    }
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [f, wc, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    if c != wc {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("input has {c} channels but kernel expects {wc}"),
        });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            detail: "stride must be positive".into(),
        });
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!(
                "kernel {kh}x{kw} does not fit padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            ),
        });
    }
    Ok([n, c, h, wd, f, kh, kw, stride])
}

/// 2-d cross-correlation, im2col + GEMM path.
///
/// `x` is `(N, c, h, w)`, `w` is `(f, c, kh, kw)`; the output is
/// `(N, f, h', w')` with `h' = (h + 2*pad - kh)/stride + 1`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, wd, f, kh, kw, _] = check_conv_args(x, w, stride, pad)?;
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(wd, kw, stride, pad);
    let patch = c * kh * kw;
    let cols_w = oh * ow;

    let mut out = vec![0.0; n * f * cols_w];
    let mut cols = vec![0.0; patch * cols_w];
    let xd = x.data();
    let wdat = w.data();

    for b in 0..n {
        im2col(
            &xd[b * c * h * wd..(b + 1) * c * h * wd],
            c,
            h,
            wd,
            kh,
            kw,
            stride,
            pad,
            &mut cols,
        );
        // out[b, fi, :] = W[fi, :] . cols  (k accumulated in ascending order)
        let obase = b * f * cols_w;
        for fi in 0..f {
            let orow = &mut out[obase + fi * cols_w..obase + (fi + 1) * cols_w];
            let wrow = &wdat[fi * patch..(fi + 1) * patch];
            for (k, &wv) in wrow.iter().enumerate() {
                if wv == 0.0 {
                    continue;
                }
                let crow = &cols[k * cols_w..(k + 1) * cols_w];
                for (o, &cv) in orow.iter_mut().zip(crow) {
                    *o += wv * cv;
                }
            }
        }
    }
    Tensor::from_vec(&[n, f, oh, ow], out)
}

/// Unroll one sample's patches: row `(c, kh, kw)`, column `(oh, ow)`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f64],
) {
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(w, kw, stride, pad);
    let cols_w = oh * ow;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let in_row = iy >= 0 && (iy as usize) < h;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        cols[row * cols_w + oy * ow + ox] =
                            if in_row && ix >= 0 && (ix as usize) < w {
                                x[(ci * h + iy as usize) * w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

/// Direct six-loop cross-correlation. Slow; retained as the conv oracle.
pub fn conv2d_naive(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let [n, c, h, wd, f, kh, kw, _] = check_conv_args(x, w, stride, pad)?;
    let oh = conv_out_extent(h, kh, stride, pad);
    let ow = conv_out_extent(wd, kw, stride, pad);
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    let od = out.data_mut();
    let xd = x.data();
    let wdat = w.data();
    for b in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0
                                    && (iy as usize) < h
                                    && ix >= 0
                                    && (ix as usize) < wd
                                {
                                    acc += xd[((b * c + ci) * h + iy as usize) * wd
                                        + ix as usize]
                                        * wdat[((fi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    od[((b * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d` w.r.t. the input, given the output gradient.
pub(crate) fn conv2d_grad_input(
    gy: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    in_shape: &[usize],
) -> Tensor {
    let [n, c, h, wd] = [in_shape[0], in_shape[1], in_shape[2], in_shape[3]];
    let [f, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let [oh, ow] = [gy.shape()[2], gy.shape()[3]];
    let mut gx = Tensor::zeros(in_shape);
    let gxd = gx.data_mut();
    let gyd = gy.data();
    let wdat = w.data();
    for b in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gyd[((b * f + fi) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix as usize >= wd {
                                    continue;
                                }
                                gxd[((b * c + ci) * h + iy as usize) * wd + ix as usize] +=
                                    g * wdat[((fi * c + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Gradient of `conv2d` w.r.t. the kernel, given the output gradient.
pub(crate) fn conv2d_grad_weight(
    gy: &Tensor,
    x: &Tensor,
    stride: usize,
    pad: usize,
    w_shape: &[usize],
) -> Tensor {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [f, _, kh, kw] = [w_shape[0], w_shape[1], w_shape[2], w_shape[3]];
    let [oh, ow] = [gy.shape()[2], gy.shape()[3]];
    let mut gw = Tensor::zeros(w_shape);
    let gwd = gw.data_mut();
    let gyd = gy.data();
    let xd = x.data();
    for b in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gyd[((b * f + fi) * oh + oy) * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix as usize >= wd {
                                    continue;
                                }
                                gwd[((fi * c + ci) * kh + ky) * kw + kx] +=
                                    g * xd[((b * c + ci) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    gw
}

/// Channel-wise global average pooling: `(N, c, h, w)` to `(N, c)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "global_avg_pool",
            detail: format!("expected 4-d input, got {:?}", x.shape()),
        });
    }
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    if h * w == 0 {
        return Err(TensorError::InvalidArgument {
            op: "global_avg_pool",
            detail: "empty spatial extent".into(),
        });
    }
    let hw = (h * w) as f64;
    let xd = x.data();
    let out = (0..n * c)
        .map(|i| xd[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / hw)
        .collect();
    Tensor::from_vec(&[n, c], out)
}

/// Fully connected layer with bias: `out = v . M^T + bias`, batched over rows.
///
/// `v` is `(N, d)`, `m` is `(d', d)`, `bias` is `(d')`.
pub fn dense_affine(v: &Tensor, m: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if v.shape().len() != 2 || m.shape().len() != 2 || bias.shape().len() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "dense_affine",
            detail: format!(
                "expected (N,d), (d',d), (d'), got {:?}, {:?}, {:?}",
                v.shape(),
                m.shape(),
                bias.shape()
            ),
        });
    }
    let [n, d] = [v.shape()[0], v.shape()[1]];
    let [dp, md] = [m.shape()[0], m.shape()[1]];
    if d != md || bias.shape()[0] != dp {
        return Err(TensorError::ShapeMismatch {
            op: "dense_affine",
            detail: format!(
                "inner dims disagree: v is (_,{d}), M is ({dp},{md}), bias is ({})",
                bias.shape()[0]
            ),
        });
    }
    let vd = v.data();
    let mdat = m.data();
    let bd = bias.data();
    let mut out = vec![0.0; n * dp];
    for b in 0..n {
        for j in 0..dp {
            let mut acc = bd[j];
            let mrow = &mdat[j * d..(j + 1) * d];
            for (vv, mv) in vd[b * d..(b + 1) * d].iter().zip(mrow) {
                acc += vv * mv;
            }
            out[b * dp + j] = acc;
        }
    }
    Tensor::from_vec(&[n, dp], out)
}

/// Elementwise `max(v, 0)`.
pub fn relu(v: &Tensor) -> Tensor {
    Tensor::from_fn(v.shape(), |i| v.data()[i].max(0.0))
}

/// Elementwise sum of two same-shaped tensors.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "add",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]))
}

/// Scalar multiple.
pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor::from_fn(a.shape(), |i| a.data()[i] * s)
}

/// Sum of every element, as a scalar tensor.
pub fn sum_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data().iter().sum())
}

/// Mean cross-entropy of row-wise softmax against integer labels.
///
/// `logits` is `(N, K)`; computed via the log-sum-exp form so the result is
/// finite for any finite logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_cross_entropy",
            detail: format!(
                "logits {:?} vs {} labels",
                logits.shape(),
                labels.len()
            ),
        });
    }
    let [n, k] = [logits.shape()[0], logits.shape()[1]];
    let ld = logits.data();
    let mut total = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                detail: format!("label {label} out of range for {k} classes"),
            });
        }
        let row = &ld[b * k..(b + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + libm::log(row.iter().map(|&v| libm::exp(v - m)).sum::<f64>());
        total += lse - row[label];
    }
    Ok(Tensor::scalar(total / n as f64))
}

/// Row-wise softmax probabilities for `(N, K)` logits.
pub(crate) fn softmax_rows(logits: &Tensor) -> Tensor {
    let [n, k] = [logits.shape()[0], logits.shape()[1]];
    let ld = logits.data();
    let mut out = vec![0.0; n * k];
    for b in 0..n {
        let row = &ld[b * k..(b + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let mut s = 0.0;
        for (o, &v) in out[b * k..(b + 1) * k].iter_mut().zip(row) {
            *o = libm::exp(v - m);
            s += *o;
        }
        for o in &mut out[b * k..(b + 1) * k] {
            *o /= s;
        }
    }
    Tensor::from_vec(&[n, k], out).expect("softmax shape")
}
