//! Forward and backward kernels for every layer type the two networks use.
//!
//! Convolutions go through im2col and a GEMM; everything else is a direct
//! loop. All kernels are deterministic for a given input.

use rand::{Rng, RngCore};

use super::tensor::{Real, Tensor};
use crate::error::{dim_err, GaitError, Result};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(dim_err!("stride must be >= 1"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(dim_err!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &[usize], weights: &[usize], stride: usize, pad: usize) -> Result<(Self, usize, usize)> {
        let (n, c, h, w) = match *input {
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(dim_err!("conv input must be 4-D (N,C,H,W), got {input:?}")),
        };
        let (oc, ic, kh, kw) = match *weights {
            [o, i, kh, kw] => (o, i, kh, kw),
            _ => return Err(dim_err!("conv weights must be 4-D (out,in,kh,kw), got {weights:?}")),
        };
        if ic != c {
            return Err(dim_err!(
                "input channel axis (axis 1) is {c} but weight in-channel axis (axis 1) is {ic}"
            ));
        }
        let oh = out_extent(h, kh, stride, pad)?;
        let ow = out_extent(w, kw, stride, pad)?;
        Ok((
            ConvGeom { c, h, w, kh, kw, stride, pad, oh, ow },
            n,
            oc,
        ))
    }

    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col<T: Real>(&self, x: &[T], col: &mut [T]) {
        let p = self.p();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], gx: &mut [T]) {
        let p = self.p();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut gx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. Output extent is `floor((H + 2*pad - kh)/stride) + 1`.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (g, n, oc) = ConvGeom::new(input.shape(), weights.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != oc {
            return Err(dim_err!("bias length {} != output channels {oc}", b.len()));
        }
    }
    let (k, p) = (g.k(), g.p());
    let mut out = Tensor::zeros(&[n, oc, g.oh, g.ow]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let in_item = input.item_len();
    for b in 0..n {
        let x = &input.data()[b * in_item..(b + 1) * in_item];
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        let y = &mut out.data_mut()[b * oc * p..(b + 1) * oc * p];
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            oc,
            k,
            p,
            T::one(),
            weights.data(),
            k as isize,
            1,
            cols,
            p as isize,
            1,
            beta,
            y,
            p as isize,
            1,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub grad_input: Tensor<T>,
    pub grad_weights: Tensor<T>,
    pub grad_bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads<T>> {
    let (g, n, oc) = ConvGeom::new(cached_input.shape(), weights.shape(), stride, pad)?;
    if grad_out.shape() != [n, oc, g.oh, g.ow] {
        return Err(dim_err!(
            "grad_out shape {:?} does not match forward output {:?}",
            grad_out.shape(),
            [n, oc, g.oh, g.ow]
        ));
    }
    let (k, p) = (g.k(), g.p());
    let mut grad_input = Tensor::zeros(cached_input.shape());
    let mut grad_weights = Tensor::zeros(weights.shape());
    let mut grad_bias = vec![T::zero(); oc];
    let mut col = vec![T::zero(); k * p];
    let mut gcol = vec![T::zero(); k * p];
    let in_item = cached_input.item_len();
    for b in 0..n {
        let x = &cached_input.data()[b * in_item..(b + 1) * in_item];
        let gy = &grad_out.data()[b * oc * p..(b + 1) * oc * p];
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            *gb += gy[o * p..(o + 1) * p].iter().copied().sum::<T>();
        }
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            g.im2col(x, &mut col);
            &col
        };
        // dW += dY (oc x p) * cols^T (p x k)
        T::gemm(
            oc,
            p,
            k,
            T::one(),
            gy,
            p as isize,
            1,
            cols,
            1,
            p as isize,
            T::one(),
            grad_weights.data_mut(),
            k as isize,
            1,
        );
        // dcols = W^T (k x oc) * dY (oc x p)
        let gx = &mut grad_input.data_mut()[b * in_item..(b + 1) * in_item];
        if g.is_pointwise() {
            T::gemm(
                k,
                oc,
                p,
                T::one(),
                weights.data(),
                1,
                k as isize,
                gy,
                p as isize,
                1,
                T::zero(),
                gx,
                p as isize,
                1,
            );
        } else {
            T::gemm(
                k,
                oc,
                p,
                T::one(),
                weights.data(),
                1,
                k as isize,
                gy,
                p as isize,
                1,
                T::zero(),
                &mut gcol,
                p as isize,
                1,
            );
            g.col2im(&gcol, gx);
        }
    }
    Ok(ConvGrads {
        grad_input,
        grad_weights,
        grad_bias,
    })
}

/// Per-channel state carried between a training forward pass and its backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Batch normalization over (N, H, W) per channel.
///
/// In train mode the batch statistics normalize the input and the running
/// statistics are blended with momentum [`BN_MOMENTUM`]; in eval mode the
/// running statistics are used as-is.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    mode: Mode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let (n, c, h, w) = input.dims4()?;
    for (name, len) in [
        ("gamma", gamma.len()),
        ("beta", beta.len()),
        ("running_mean", running_mean.len()),
        ("running_var", running_var.len()),
    ] {
        if len != c {
            return Err(dim_err!("batchnorm {name} has length {len}, channel axis is {c}"));
        }
    }
    let hw = h * w;
    let m = n * hw;
    let eps = T::from_f64c(BN_EPSILON);
    let mut out = Tensor::zeros(input.shape());
    let x = input.data();
    match mode {
        Mode::Eval => {
            for ch in 0..c {
                let inv = T::one() / (running_var[ch] + eps).sqrt();
                let scale = gamma[ch] * inv;
                let shift = beta[ch] - running_mean[ch] * scale;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        out.data_mut()[i] = x[i] * scale + shift;
                    }
                }
            }
            Ok((out, None))
        }
        Mode::Train => {
            let mut xhat = Tensor::zeros(input.shape());
            let mut inv_std = vec![T::zero(); c];
            let mom = T::from_f64c(BN_MOMENTUM);
            let mf = T::from_usize(m).unwrap();
            for ch in 0..c {
                let mut sum = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    sum += x[base..base + hw].iter().copied().sum::<T>();
                }
                let mean = sum / mf;
                let mut sq = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for &v in &x[base..base + hw] {
                        let d = v - mean;
                        sq += d * d;
                    }
                }
                let var = sq / mf;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[ch] = inv;
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        let xh = (x[i] - mean) * inv;
                        xhat.data_mut()[i] = xh;
                        out.data_mut()[i] = gamma[ch] * xh + beta[ch];
                    }
                }
                let unbiased = if m > 1 {
                    sq / T::from_usize(m - 1).unwrap()
                } else {
                    var
                };
                running_mean[ch] = mom * running_mean[ch] + (T::one() - mom) * mean;
                running_var[ch] = mom * running_var[ch] + (T::one() - mom) * unbiased;
            }
            Ok((out, Some(BatchNormCache { xhat, inv_std })))
        }
    }
}

/// Returns (grad_input, grad_gamma, grad_beta).
pub fn batchnorm_backward<T: Real>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, h, w) = grad_out.dims4()?;
    if cache.xhat.shape() != grad_out.shape() {
        return Err(dim_err!(
            "batchnorm grad_out {:?} vs cached {:?}",
            grad_out.shape(),
            cache.xhat.shape()
        ));
    }
    let hw = h * w;
    let mf = T::from_usize(n * hw).unwrap();
    let gy = grad_out.data();
    let xh = cache.xhat.data();
    let mut gx = Tensor::zeros(grad_out.shape());
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                sum_g += gy[i];
                sum_gx += gy[i] * xh[i];
            }
        }
        ggamma[ch] = sum_gx;
        gbeta[ch] = sum_g;
        let k = gamma[ch] * cache.inv_std[ch] / mf;
        for b in 0..n {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                gx.data_mut()[i] = k * (mf * gy[i] - sum_g - xh[i] * sum_gx);
            }
        }
    }
    Ok((gx, ggamma, gbeta))
}

/// Fully connected layer. A 4-D input is flattened per batch item.
/// Weights are (units, inputs).
pub fn dense_forward<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let n = input.batch();
    let f = input.item_len();
    let (units, inputs) = match *weights.shape() {
        [u, i] => (u, i),
        _ => return Err(dim_err!("dense weights must be 2-D, got {:?}", weights.shape())),
    };
    if inputs != f {
        return Err(dim_err!(
            "dense input has {f} features per item, weight input axis (axis 1) is {inputs}"
        ));
    }
    if bias.len() != units {
        return Err(dim_err!("dense bias length {} != units {units}", bias.len()));
    }
    let mut out = Tensor::zeros(&[n, units]);
    for row in out.data_mut().chunks_mut(units) {
        row.copy_from_slice(bias);
    }
    T::gemm(
        n,
        f,
        units,
        T::one(),
        input.data(),
        f as isize,
        1,
        weights.data(),
        1,
        f as isize,
        T::one(),
        out.data_mut(),
        units as isize,
        1,
    );
    Ok(out)
}

/// Returns (grad_input shaped like `cached_input`, grad_weights, grad_bias).
pub fn dense_backward<T: Real>(
    grad_out: &Tensor<T>,
    cached_input: &Tensor<T>,
    weights: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let n = cached_input.batch();
    let f = cached_input.item_len();
    let units = weights.shape()[0];
    if grad_out.shape() != [n, units] {
        return Err(dim_err!(
            "dense grad_out {:?} expected {:?}",
            grad_out.shape(),
            [n, units]
        ));
    }
    let mut gw = Tensor::zeros(weights.shape());
    T::gemm(
        units,
        n,
        f,
        T::one(),
        grad_out.data(),
        1,
        units as isize,
        cached_input.data(),
        f as isize,
        1,
        T::zero(),
        gw.data_mut(),
        f as isize,
        1,
    );
    let mut gx = Tensor::zeros(cached_input.shape());
    T::gemm(
        n,
        units,
        f,
        T::one(),
        grad_out.data(),
        units as isize,
        1,
        weights.data(),
        f as isize,
        1,
        T::zero(),
        gx.data_mut(),
        f as isize,
        1,
    );
    let mut gb = vec![T::zero(); units];
    for row in grad_out.data().chunks(units) {
        for (g, &v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    Ok((gx, gw, gb))
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of ReLU given the forward *output*.
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != output.shape() {
        return Err(dim_err!("relu grad {:?} vs output {:?}", grad_out.shape(), output.shape()));
    }
    let mut g = grad_out.clone();
    for (gv, &y) in g.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *gv = T::zero();
        }
    }
    Ok(g)
}

/// 2x2 max pooling with stride 2. Returns the output and the flat argmax
/// index into the input for every output element.
pub fn maxpool2_forward<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = input.dims4()?;
    if h < 2 || w < 2 {
        return Err(dim_err!("maxpool2 needs H, W >= 2, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0usize; n * c * oh * ow];
    let x = input.data();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.data_mut()[o] = x[best];
                arg[o] = best;
                o += 1;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Real>(grad_out: &Tensor<T>, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(dim_err!("maxpool2 grad has {} elements, argmax {}", grad_out.len(), argmax.len()));
    }
    let mut gx = Tensor::zeros(input_shape);
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        gx.data_mut()[i] += g;
    }
    Ok(gx)
}

/// Global average pooling (N,C,H,W) -> (N,C).
pub fn avgpool_global_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data = input
        .data()
        .chunks(hw)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn avgpool_global_backward<T: Real>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (n, c, h, w) = match *input_shape {
        [n, c, h, w] => (n, c, h, w),
        _ => return Err(dim_err!("avgpool input shape must be 4-D, got {input_shape:?}")),
    };
    if grad_out.shape() != [n, c] {
        return Err(dim_err!("avgpool grad {:?} expected {:?}", grad_out.shape(), [n, c]));
    }
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let mut gx = Tensor::zeros(input_shape);
    for (plane, &g) in gx.data_mut().chunks_mut(hw).zip(grad_out.data()) {
        plane.iter_mut().for_each(|v| *v = g * inv);
    }
    Ok(gx)
}

/// Inverted dropout: surviving units are scaled by `1/(1-p)` in train mode.
/// Returns the output and the per-element multiplier (empty in eval mode).
pub fn dropout_forward<T: Real>(
    input: &Tensor<T>,
    p: f64,
    mode: Mode,
    rng: &mut dyn RngCore,
) -> Result<(Tensor<T>, Vec<T>)> {
    if !(0.0..=1.0).contains(&p) {
        return Err(GaitError::Input(format!("dropout probability {p} outside [0,1]")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok((input.clone(), Vec::new()));
    }
    let keep = if p >= 1.0 { T::zero() } else { T::from_f64c(1.0 / (1.0 - p)) };
    let mask: Vec<T> = (0..input.len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
        .collect();
    let mut out = input.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    Ok((out, mask))
}

pub fn dropout_backward<T: Real>(grad_out: &Tensor<T>, mask: &[T]) -> Tensor<T> {
    if mask.is_empty() {
        return grad_out.clone();
    }
    let mut g = grad_out.clone();
    for (v, &m) in g.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    g
}

/// Row-wise softmax of an (N, K) tensor.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.ndim() != 2 {
        return Err(dim_err!("softmax expects (N,K), got {:?}", logits.shape()));
    }
    if !logits.is_finite() {
        return Err(GaitError::Numeric("softmax received non-finite logits".into()));
    }
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / sum);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SoftmaxCrossEntropy<T> {
    /// Mean negative log-likelihood over the batch.
    pub loss: T,
    pub probs: Tensor<T>,
    /// d loss / d logits.
    pub grad_logits: Tensor<T>,
}

pub fn softmax_crossentropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<SoftmaxCrossEntropy<T>> {
    let probs = softmax(logits)?;
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(dim_err!("{} labels for batch of {n}", labels.len()));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grad = probs.clone();
    let mut loss = T::zero();
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(GaitError::Input(format!("label {y} outside [0, {k})")));
        }
        let p = probs.data()[i * k + y];
        loss -= p.max(T::min_positive_value()).ln();
        grad.data_mut()[i * k + y] -= T::one();
    }
    grad.scale(inv_n);
    Ok(SoftmaxCrossEntropy {
        loss: loss * inv_n,
        probs,
        grad_logits: grad,
    })
}
