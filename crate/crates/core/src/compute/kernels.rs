//! Numeric kernels shared by training, teacher-forced inference and
//! sample-by-sample generation.
//!
//! Accumulation order contract: for one output position, a causal
//! convolution sums `bias + sum over (in-channel, tap)` with the in-channel
//! loop outermost and taps oldest-first. The incremental generation path in
//! `generator` reproduces this order term by term, which is what makes
//! cached generation bit-identical to full re-convolution.

use crate::compute::tensor::Tensor;
use crate::error::{Error, Result};

/// Dilated causal 1-D convolution.
///
/// `input` is `[C_in x T]`, `weights` `[C_out x C_in x K]`, `bias` `[C_out]`.
/// The input is treated as left-padded with `(K-1)*dilation` zeros, so the
/// output is `[C_out x T]` and `out[:, t]` depends only on `input[:, ..=t]`.
pub fn conv1d_causal(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    dilation: usize,
) -> Result<Tensor> {
    check_conv_shapes(input, weights, Some(bias), dilation)?;
    if !input.is_finite() || !weights.is_finite() || !bias.is_finite() {
        return Err(Error::NonFinite {
            context: "conv1d_causal input".to_string(),
        });
    }
    Ok(conv1d_causal_raw(
        &input.data,
        input.shape[0],
        input.shape[1],
        &weights.data,
        weights.shape[0],
        weights.shape[2],
        Some(&bias.data),
        dilation,
    ))
}

pub(crate) fn check_conv_shapes(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    dilation: usize,
) -> Result<()> {
    if dilation == 0 {
        return Err(Error::InvalidConfig("dilation must be >= 1".into()));
    }
    if input.shape.len() != 2 || weights.shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "conv1d_causal",
            expected: "input rank 2, weights rank 3".into(),
            got: format!("input {:?}, weights {:?}", input.shape, weights.shape),
        });
    }
    if weights.shape[2] == 0 {
        return Err(Error::InvalidConfig("kernel size must be >= 1".into()));
    }
    if weights.shape[1] != input.shape[0] {
        return Err(Error::ShapeMismatch {
            context: "conv1d_causal",
            expected: format!("weights C_in == input C_in ({})", input.shape[0]),
            got: format!("{}", weights.shape[1]),
        });
    }
    if let Some(b) = bias {
        if b.shape != [weights.shape[0]] {
            return Err(Error::ShapeMismatch {
                context: "conv1d_causal",
                expected: format!("bias [{}]", weights.shape[0]),
                got: format!("{:?}", b.shape),
            });
        }
    }
    Ok(())
}

/// Unchecked convolution over flat buffers. `weights` is
/// `[c_out, c_in, k]` row-major; `input` is `[c_in, t]` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_causal_raw(
    input: &[f64],
    c_in: usize,
    t_len: usize,
    weights: &[f64],
    c_out: usize,
    k: usize,
    bias: Option<&[f64]>,
    dilation: usize,
) -> Tensor {
    let mut out = vec![0.0; c_out * t_len];
    for co in 0..c_out {
        let w_row = &weights[co * c_in * k..(co + 1) * c_in * k];
        let b = bias.map_or(0.0, |b| b[co]);
        let out_row = &mut out[co * t_len..(co + 1) * t_len];
        for (t, slot) in out_row.iter_mut().enumerate() {
            let mut acc = b;
            for ci in 0..c_in {
                let in_row = &input[ci * t_len..(ci + 1) * t_len];
                for tap in 0..k {
                    // Tap `tap` reads position t - (k-1-tap)*dilation; the
                    // oldest tap comes first. Out-of-range reads are the
                    // implicit left zero-padding.
                    let back = (k - 1 - tap) * dilation;
                    if t >= back {
                        acc += w_row[ci * k + tap] * in_row[t - back];
                    }
                }
            }
            *slot = acc;
        }
    }
    Tensor {
        shape: vec![c_out, t_len],
        data: out,
    }
}

/// Gradients of [`conv1d_causal_raw`] with respect to input, weights and
/// bias, given the upstream gradient `grad_out` of shape `[c_out, t]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_causal_backward(
    grad_out: &[f64],
    input: &[f64],
    c_in: usize,
    t_len: usize,
    weights: &[f64],
    c_out: usize,
    k: usize,
    dilation: usize,
    want_input_grad: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let mut d_weights = vec![0.0; c_out * c_in * k];
    let mut d_bias = vec![0.0; c_out];
    for co in 0..c_out {
        let g_row = &grad_out[co * t_len..(co + 1) * t_len];
        d_bias[co] = g_row.iter().sum();
        for ci in 0..c_in {
            let in_row = &input[ci * t_len..(ci + 1) * t_len];
            for tap in 0..k {
                let back = (k - 1 - tap) * dilation;
                let mut acc = 0.0;
                for (t, g) in g_row.iter().enumerate().skip(back) {
                    acc += g * in_row[t - back];
                }
                d_weights[(co * c_in + ci) * k + tap] = acc;
            }
        }
    }
    let d_input = want_input_grad.then(|| {
        let mut d_in = vec![0.0; c_in * t_len];
        for co in 0..c_out {
            let g_row = &grad_out[co * t_len..(co + 1) * t_len];
            for ci in 0..c_in {
                let d_row = &mut d_in[ci * t_len..(ci + 1) * t_len];
                for tap in 0..k {
                    let back = (k - 1 - tap) * dilation;
                    let w = weights[(co * c_in + ci) * k + tap];
                    for (t, g) in g_row.iter().enumerate().skip(back) {
                        d_row[t - back] += w * g;
                    }
                }
            }
        }
        Tensor {
            shape: vec![c_in, t_len],
            data: d_in,
        }
    });
    (
        d_input,
        Tensor {
            shape: vec![c_out, c_in, k],
            data: d_weights,
        },
        Tensor {
            shape: vec![c_out],
            data: d_bias,
        },
    )
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stabilized softmax of one logit row, written into `out`.
pub(crate) fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Mean categorical cross-entropy over `T` logit rows, with its gradient.
///
/// `logits` is `[T x Q]`; `targets[t]` indexes the correct class of row t.
/// Returns `(loss, grad)` where `loss = mean_t -log softmax(logits[t])[targets[t]]`
/// and `grad[t] = (softmax(logits[t]) - onehot(targets[t])) / T`.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[u16]) -> Result<(f64, Tensor)> {
    if logits.shape.len() != 2 || logits.shape[0] != targets.len() {
        return Err(Error::ShapeMismatch {
            context: "softmax_cross_entropy",
            expected: format!("[{} x Q] logits", targets.len()),
            got: format!("{:?}", logits.shape),
        });
    }
    let q = logits.cols();
    let scale = 1.0 / targets.len() as f64;
    let (loss, grad) = cross_entropy_masked(logits, targets, 0, scale)?;
    debug_assert_eq!(grad.shape, vec![targets.len(), q]);
    Ok((loss, grad))
}

/// Cross-entropy restricted to rows `start..`, scaled by `scale`.
///
/// Rows before `start` contribute nothing to either loss or gradient; the
/// trainer uses this to keep receptive-field context out of the objective.
pub(crate) fn cross_entropy_masked(
    logits: &Tensor,
    targets: &[u16],
    start: usize,
    scale: f64,
) -> Result<(f64, Tensor)> {
    let t_len = logits.rows();
    let q = logits.cols();
    let mut grad = vec![0.0; t_len * q];
    let mut loss = 0.0;
    for t in start..t_len {
        let target = targets[t] as usize;
        if target >= q {
            return Err(Error::ClassOutOfRange {
                class: target,
                classes: q,
            });
        }
        let row = &logits.data[t * q..(t + 1) * q];
        // log-sum-exp with max subtraction
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &l in row {
            sum += (l - max).exp();
        }
        let log_z = max + sum.ln();
        loss += scale * (log_z - row[target]);
        let g_row = &mut grad[t * q..(t + 1) * q];
        for (c, (g, &l)) in g_row.iter_mut().zip(row).enumerate() {
            let p = (l - log_z).exp();
            *g = scale * if c == target { p - 1.0 } else { p };
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: "cross-entropy loss".to_string(),
        });
    }
    Ok((
        loss,
        Tensor {
            shape: vec![t_len, q],
            data: grad,
        },
    ))
}
