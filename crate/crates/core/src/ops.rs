//! Forward and backward kernels for every differentiable operation.
//!
//! These are pure functions over flat slices. The autodiff graph records
//! them; the eval-mode model forward calls them directly, so training and
//! inference share one numeric path. Reductions accumulate in f64 and cast
//! to f32 at the end.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg;

// ---------------------------------------------------------------- conv 3x3

pub struct ConvSaved {
    /// im2col buffers, one per batch image, each `c_in*9 * h*w`.
    pub cols: Vec<f32>,
}

/// x: [B,C,H,W], w: [F,C,3,3] -> out [B,F,H,W] (stride 1, zero pad 1).
pub fn conv3x3_forward(
    x: &[f32],
    w: &[f32],
    batch: usize,
    c_in: usize,
    h: usize,
    wd: usize,
    filters: usize,
) -> (Vec<f32>, ConvSaved) {
    let plane = h * wd;
    let ck = c_in * 9;
    let mut cols = vec![0.0f32; batch * ck * plane];
    let mut out = vec![0.0f32; batch * filters * plane];
    for b in 0..batch {
        let col = &mut cols[b * ck * plane..(b + 1) * ck * plane];
        linalg::im2col_3x3(&x[b * c_in * plane..(b + 1) * c_in * plane], c_in, h, wd, col);
        linalg::gemm_nn(
            w,
            col,
            &mut out[b * filters * plane..(b + 1) * filters * plane],
            filters,
            ck,
            plane,
        );
    }
    (out, ConvSaved { cols })
}

/// Accumulates dx and dw from dy using the saved column buffers.
pub fn conv3x3_backward(
    dy: &[f32],
    w: &[f32],
    saved: &ConvSaved,
    batch: usize,
    c_in: usize,
    h: usize,
    wd: usize,
    filters: usize,
    dx: Option<&mut [f32]>,
    dw: Option<&mut [f32]>,
) {
    let plane = h * wd;
    let ck = c_in * 9;
    if let Some(dw) = dw {
        for b in 0..batch {
            let col = &saved.cols[b * ck * plane..(b + 1) * ck * plane];
            let dyb = &dy[b * filters * plane..(b + 1) * filters * plane];
            // dW[f,ck] += sum_hw dY[f,hw] * col[ck,hw]
            linalg::gemm_nt(dyb, col, dw, filters, plane, ck);
        }
    }
    if let Some(dx) = dx {
        let mut dcol = vec![0.0f32; ck * plane];
        for b in 0..batch {
            dcol.fill(0.0);
            let dyb = &dy[b * filters * plane..(b + 1) * filters * plane];
            // dcol[ck,hw] = W^T[ck,f] * dY[f,hw]
            linalg::gemm_tn(w, dyb, &mut dcol, filters, ck, plane);
            linalg::col2im_3x3(&dcol, c_in, h, wd, &mut dx[b * c_in * plane..(b + 1) * c_in * plane]);
        }
    }
}

// ------------------------------------------------------------------- relu

pub fn relu_forward(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn relu_backward(dy: &[f32], x: &[f32], dx: &mut [f32]) {
    for i in 0..x.len() {
        if x[i] > 0.0 {
            dx[i] += dy[i];
        }
    }
}

// -------------------------------------------------------------- maxpool 2x2

/// Ties break toward the first (lowest-index) maximum, so backward is
/// deterministic. Returns (out, argmax) with argmax holding flat indices
/// into `x`.
pub fn maxpool2x2_forward(
    x: &[f32],
    batch: usize,
    channels: usize,
    h: usize,
    w: usize,
) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; batch * channels * oh * ow];
    let mut arg = vec![0u32; out.len()];
    let mut o = 0;
    for bc in 0..batch * channels {
        let base = bc * h * w;
        for y in 0..oh {
            for xcol in 0..ow {
                let i00 = base + (2 * y) * w + 2 * xcol;
                let i01 = i00 + 1;
                let i10 = i00 + w;
                let i11 = i10 + 1;
                let mut best = i00;
                if x[i01] > x[best] {
                    best = i01;
                }
                if x[i10] > x[best] {
                    best = i10;
                }
                if x[i11] > x[best] {
                    best = i11;
                }
                out[o] = x[best];
                arg[o] = best as u32;
                o += 1;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2x2_backward(dy: &[f32], argmax: &[u32], dx: &mut [f32]) {
    for (g, &a) in dy.iter().zip(argmax.iter()) {
        dx[a as usize] += *g;
    }
}

// --------------------------------------------------------- global avg pool

/// x: [B,C,H,W] -> out [B,C]
pub fn gap_forward(x: &[f32], batch: usize, channels: usize, plane: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; batch * channels];
    for bc in 0..batch * channels {
        let mut acc = 0.0f64;
        for v in &x[bc * plane..(bc + 1) * plane] {
            acc += *v as f64;
        }
        out[bc] = (acc / plane as f64) as f32;
    }
    out
}

pub fn gap_backward(dy: &[f32], plane: usize, dx: &mut [f32]) {
    let inv = 1.0f32 / plane as f32;
    for (bc, &g) in dy.iter().enumerate() {
        let gv = g * inv;
        for v in &mut dx[bc * plane..(bc + 1) * plane] {
            *v += gv;
        }
    }
}

// ---------------------------------------------------------------- batchnorm

pub struct BnSaved {
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

/// Training-mode batchnorm over [B,C,H,W] using per-channel batch statistics
/// (biased variance). Running-stat updates are the caller's business.
pub fn bn_train_forward(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    batch: usize,
    channels: usize,
    plane: usize,
    eps: f32,
) -> (Vec<f32>, BnSaved) {
    let n = batch * plane;
    let mut mean = vec![0.0f32; channels];
    let mut var = vec![0.0f32; channels];
    let mut inv_std = vec![0.0f32; channels];
    for c in 0..channels {
        let mut acc = 0.0f64;
        for b in 0..batch {
            let s = (b * channels + c) * plane;
            for v in &x[s..s + plane] {
                acc += *v as f64;
            }
        }
        let m = acc / n as f64;
        let mut vacc = 0.0f64;
        for b in 0..batch {
            let s = (b * channels + c) * plane;
            for v in &x[s..s + plane] {
                let d = *v as f64 - m;
                vacc += d * d;
            }
        }
        let va = vacc / n as f64;
        mean[c] = m as f32;
        var[c] = va as f32;
        inv_std[c] = (1.0 / libm::sqrt(va + eps as f64)) as f32;
    }
    let mut xhat = vec![0.0f32; x.len()];
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let s = (b * channels + c) * plane;
            let (m, is, g, be) = (mean[c], inv_std[c], gamma[c], beta[c]);
            for i in s..s + plane {
                let h = (x[i] - m) * is;
                xhat[i] = h;
                out[i] = g * h + be;
            }
        }
    }
    (out, BnSaved { xhat, inv_std, batch_mean: mean, batch_var: var })
}

/// Eval-mode batchnorm: normalize with the provided (running) statistics.
pub fn bn_eval_forward(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    batch: usize,
    channels: usize,
    plane: usize,
    eps: f32,
) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        for c in 0..channels {
            let s = (b * channels + c) * plane;
            let is = (1.0 / libm::sqrt(var[c] as f64 + eps as f64)) as f32;
            let (m, g, be) = (mean[c], gamma[c], beta[c]);
            for i in s..s + plane {
                out[i] = g * (x[i] - m) * is + be;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn bn_train_backward(
    dy: &[f32],
    gamma: &[f32],
    saved: &BnSaved,
    batch: usize,
    channels: usize,
    plane: usize,
    dx: Option<&mut [f32]>,
    dgamma: Option<&mut [f32]>,
    dbeta: Option<&mut [f32]>,
) {
    let n = (batch * plane) as f64;
    let mut sum_dy = vec![0.0f64; channels];
    let mut sum_dy_xhat = vec![0.0f64; channels];
    for b in 0..batch {
        for c in 0..channels {
            let s = (b * channels + c) * plane;
            let (mut a0, mut a1) = (0.0f64, 0.0f64);
            for i in s..s + plane {
                a0 += dy[i] as f64;
                a1 += (dy[i] * saved.xhat[i]) as f64;
            }
            sum_dy[c] += a0;
            sum_dy_xhat[c] += a1;
        }
    }
    if let Some(dgamma) = dgamma {
        for c in 0..channels {
            dgamma[c] += sum_dy_xhat[c] as f32;
        }
    }
    if let Some(dbeta) = dbeta {
        for c in 0..channels {
            dbeta[c] += sum_dy[c] as f32;
        }
    }
    if let Some(dx) = dx {
        for b in 0..batch {
            for c in 0..channels {
                let s = (b * channels + c) * plane;
                let scale = gamma[c] * saved.inv_std[c];
                let mdy = (sum_dy[c] / n) as f32;
                let mdyx = (sum_dy_xhat[c] / n) as f32;
                for i in s..s + plane {
                    dx[i] += scale * (dy[i] - mdy - saved.xhat[i] * mdyx);
                }
            }
        }
    }
}

// -------------------------------------------------------------- log_softmax

/// Row-wise log-softmax over [B,C], max-shifted for stability.
pub fn log_softmax_forward(x: &[f32], batch: usize, classes: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        let row = &x[b * classes..(b + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &v| if v > a { v } else { a });
        let mut denom = 0.0f64;
        for &v in row {
            denom += libm::exp((v - max) as f64);
        }
        let log_denom = libm::log(denom);
        let dst = &mut out[b * classes..(b + 1) * classes];
        for (o, &v) in dst.iter_mut().zip(row.iter()) {
            *o = ((v - max) as f64 - log_denom) as f32;
        }
    }
    out
}

/// dx = dy - softmax(x) * rowsum(dy); `out` is the forward log-softmax.
pub fn log_softmax_backward(dy: &[f32], out: &[f32], batch: usize, classes: usize, dx: &mut [f32]) {
    for b in 0..batch {
        let s = b * classes;
        let mut rowsum = 0.0f64;
        for i in s..s + classes {
            rowsum += dy[i] as f64;
        }
        for i in s..s + classes {
            let p = libm::exp(out[i] as f64) as f32;
            dx[i] += dy[i] - p * rowsum as f32;
        }
    }
}

/// Row-wise softmax probabilities (stable).
pub fn softmax_rows(x: &[f32], batch: usize, classes: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        let row = &x[b * classes..(b + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &v| if v > a { v } else { a });
        let mut denom = 0.0f64;
        let dst = &mut out[b * classes..(b + 1) * classes];
        for (o, &v) in dst.iter_mut().zip(row.iter()) {
            let e = libm::exp((v - max) as f64);
            *o = e as f32;
            denom += e;
        }
        let inv = 1.0 / denom;
        for o in dst.iter_mut() {
            *o = (*o as f64 * inv) as f32;
        }
    }
    out
}

// ------------------------------------------------------------ cross entropy

/// Mean over the batch of -log_softmax(logits)[label]. Returns the loss and
/// the softmax probabilities saved for backward.
pub fn cross_entropy_forward(
    logits: &[f32],
    labels: &[u32],
    batch: usize,
    classes: usize,
) -> (f32, Vec<f32>) {
    let probs = softmax_rows(logits, batch, classes);
    let mut acc = 0.0f64;
    for (b, &lab) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &v| if v > a { v } else { a });
        let mut denom = 0.0f64;
        for &v in row {
            denom += libm::exp((v - max) as f64);
        }
        acc += libm::log(denom) - (row[lab as usize] - max) as f64;
    }
    ((acc / batch as f64) as f32, probs)
}

/// dlogits += g/B * (softmax - onehot)
pub fn cross_entropy_backward(
    g: f32,
    probs: &[f32],
    labels: &[u32],
    batch: usize,
    classes: usize,
    dlogits: &mut [f32],
) {
    let scale = g / batch as f32;
    for (b, &lab) in labels.iter().enumerate() {
        let s = b * classes;
        for c in 0..classes {
            let y = if c == lab as usize { 1.0 } else { 0.0 };
            dlogits[s + c] += scale * (probs[s + c] - y);
        }
    }
}

// ------------------------------------------------------------- KL divergence

/// Mean over the batch of sum_c p_T(c) * (log p_T(c) - log p_S(c)).
/// Returns the loss plus both probability tables for backward.
pub fn kl_forward(
    student_logits: &[f32],
    teacher_logits: &[f32],
    batch: usize,
    classes: usize,
) -> (f32, Vec<f32>, Vec<f32>) {
    let lps = log_softmax_forward(student_logits, batch, classes);
    let lpt = log_softmax_forward(teacher_logits, batch, classes);
    let mut acc = 0.0f64;
    let mut p_s = vec![0.0f32; lps.len()];
    let mut p_t = vec![0.0f32; lpt.len()];
    for i in 0..lps.len() {
        let pt = libm::exp(lpt[i] as f64);
        p_t[i] = pt as f32;
        p_s[i] = libm::exp(lps[i] as f64) as f32;
        acc += pt * (lpt[i] - lps[i]) as f64;
    }
    ((acc / batch as f64) as f32, p_s, p_t)
}

/// d student_logits += g/B * (p_S - p_T); the teacher is detached.
pub fn kl_backward(
    g: f32,
    p_s: &[f32],
    p_t: &[f32],
    batch: usize,
    dstudent: &mut [f32],
) {
    let scale = g / batch as f32;
    for i in 0..p_s.len() {
        dstudent[i] += scale * (p_s[i] - p_t[i]);
    }
}

// ------------------------------------------------------------- row bias add

/// x: [B,C] plus bias[C] broadcast over rows.
pub fn add_row_bias_forward(x: &[f32], bias: &[f32], batch: usize, classes: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for b in 0..batch {
        let s = b * classes;
        for c in 0..classes {
            out[s + c] = x[s + c] + bias[c];
        }
    }
    out
}

pub fn add_row_bias_backward_bias(dy: &[f32], batch: usize, classes: usize, dbias: &mut [f32]) {
    for b in 0..batch {
        for c in 0..classes {
            dbias[c] += dy[b * classes + c];
        }
    }
}
