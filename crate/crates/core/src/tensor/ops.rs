//! Layer kernels with paired forward/backward passes.
//!
//! Slice-level functions work on one sample (`[C,H,W]`) or one batch
//! (`[N,C,H·W]`) and are what the network uses; the `Tensor` wrappers at
//! the bottom validate shapes and are the public entry points.

use std::borrow::Cow;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.99;

/// Shape bookkeeping for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_area(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.filters * self.out_area()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.height + 2 * self.pad < self.kernel || self.width + 2 * self.pad < self.kernel {
            return Err(Error::config(format!(
                "input {}x{} smaller than kernel {}",
                self.height, self.width, self.kernel
            )));
        }
        if self.stride == 0 || self.filters == 0 || self.channels == 0 {
            return Err(Error::config("convolution with zero stride/filters/channels"));
        }
        Ok(())
    }
}

/// Unrolls input patches into a `[C·k·k, H'·W']` matrix.
fn im2col<'a, T: Real>(input: &'a [T], g: &ConvGeometry) -> Cow<'a, [T]> {
    if g.is_pointwise() {
        return Cow::Borrowed(input);
    }
    let (oh, ow) = (g.out_height(), g.out_width());
    let mut cols = vec![T::zero(); g.patch_len() * oh * ow];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            *o = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Cow::Owned(cols)
}

/// Inverse of [`im2col`]: scatters (accumulates) columns back onto the image.
fn col2im<T: Real>(cols: &[T], g: &ConvGeometry, out: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of one `[C,H,W]` sample into `out: [F,H',W']`.
pub fn conv2d_forward_sample<T: Real>(
    input: &[T],
    weights: &[T],
    bias: Option<&[T]>,
    g: &ConvGeometry,
    out: &mut [T],
) {
    let cols = im2col(input, g);
    let area = g.out_area();
    match bias {
        Some(b) => {
            for (f, chunk) in out.chunks_mut(area).enumerate() {
                chunk.iter_mut().for_each(|x| *x = b[f]);
            }
            T::gemm(g.filters, g.patch_len(), area, weights, false, &cols, false, T::one(), out);
        }
        None => {
            T::gemm(g.filters, g.patch_len(), area, weights, false, &cols, false, T::zero(), out);
        }
    }
}

/// Backward pass for one sample. Weight and bias gradients are accumulated
/// into `dweights`/`dbias`; the input gradient is written to `dinput` when
/// requested.
pub fn conv2d_backward_sample<T: Real>(
    input: &[T],
    weights: &[T],
    g: &ConvGeometry,
    dout: &[T],
    dweights: &mut [T],
    dbias: Option<&mut [T]>,
    dinput: Option<&mut [T]>,
) {
    let area = g.out_area();
    let cols = im2col(input, g);
    // dW += dY · colsᵀ
    T::gemm(g.filters, area, g.patch_len(), dout, false, &cols, true, T::one(), dweights);
    if let Some(db) = dbias {
        for (f, chunk) in dout.chunks(area).enumerate() {
            db[f] = db[f] + chunk.iter().copied().sum();
        }
    }
    if let Some(dx) = dinput {
        if g.is_pointwise() {
            T::gemm(g.channels, g.filters, area, weights, true, dout, false, T::zero(), dx);
        } else {
            let mut dcols = vec![T::zero(); g.patch_len() * area];
            T::gemm(g.patch_len(), g.filters, area, weights, true, dout, false, T::zero(), &mut dcols);
            dx.iter_mut().for_each(|x| *x = T::zero());
            col2im(&dcols, g, dx);
        }
    }
}

/// 2×2 / stride-2 max pooling of one `[C,H,W]` sample. Returns, per output
/// cell, the flat input index of the winning element (first in row-major
/// order on ties).
pub fn maxpool_forward_sample<T: Real>(
    input: &[T],
    channels: usize,
    height: usize,
    width: usize,
    out: &mut [T],
    argmax: &mut [u32],
) {
    let (oh, ow) = (height / 2, width / 2);
    for c in 0..channels {
        let base = c * height * width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * width + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * width + 2 * ox + dx;
                    // strict comparison keeps the first maximum
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = input[best];
                argmax[o] = best as u32;
            }
        }
    }
}

pub fn maxpool_backward_sample<T: Real>(dout: &[T], argmax: &[u32], dinput: &mut [T]) {
    dinput.iter_mut().for_each(|x| *x = T::zero());
    for (g, &i) in dout.iter().zip(argmax) {
        dinput[i as usize] = dinput[i as usize] + *g;
    }
}

#[inline]
pub fn leaky<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::lit(LEAKY_SLOPE)
    }
}

/// Derivative of leaky ReLU expressed through its output (same sign as input).
#[inline]
pub fn leaky_grad<T: Real>(y: T) -> T {
    if y > T::zero() {
        T::one()
    } else {
        T::lit(LEAKY_SLOPE)
    }
}

/// Batch normalization state for one layer with `C` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T: Real = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn identity(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchNormMode {
    Train,
    Infer,
}

/// Saved values for the batch-norm backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T: Real> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

/// Train-mode batch norm over `x: [N, C, area]` using batch statistics.
/// Running statistics are updated in place.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_train<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    area: usize,
    gamma: &[T],
    beta: &[T],
    running_mean: &mut [T],
    running_var: &mut [T],
    out: &mut [T],
) -> BatchNormCache<T> {
    let m = T::from_usize(n * area).unwrap();
    let eps = T::lit(BN_EPSILON);
    let mom = T::lit(BN_MOMENTUM);
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    for ch in 0..c {
        let planes = || (0..n).map(move |s| (s * c + ch) * area);
        let mut sum = T::zero();
        for start in planes() {
            sum = sum + x[start..start + area].iter().copied().sum();
        }
        let mean = sum / m;
        let mut var = T::zero();
        for start in planes() {
            for &v in &x[start..start + area] {
                var = var + (v - mean) * (v - mean);
            }
        }
        var = var / m;
        let istd = T::one() / (var + eps).sqrt();
        inv_std[ch] = istd;
        for start in planes() {
            for i in start..start + area {
                let h = (x[i] - mean) * istd;
                xhat[i] = h;
                out[i] = gamma[ch] * h + beta[ch];
            }
        }
        running_mean[ch] = mom * running_mean[ch] + (T::one() - mom) * mean;
        running_var[ch] = mom * running_var[ch] + (T::one() - mom) * var;
    }
    BatchNormCache { xhat, inv_std }
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_infer<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    area: usize,
    state: &BatchNormState<T>,
    out: &mut [T],
) {
    let eps = T::lit(BN_EPSILON);
    for s in 0..n {
        for ch in 0..c {
            let scale = state.gamma[ch] / (state.running_var[ch] + eps).sqrt();
            let shift = state.beta[ch] - state.running_mean[ch] * scale;
            let start = (s * c + ch) * area;
            for i in start..start + area {
                out[i] = x[i] * scale + shift;
            }
        }
    }
}

/// Backward of train-mode batch norm. Accumulates into `dgamma`/`dbeta` and
/// writes the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward_slices<T: Real>(
    dy: &[T],
    cache: &BatchNormCache<T>,
    gamma: &[T],
    n: usize,
    c: usize,
    area: usize,
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
) {
    let m = T::from_usize(n * area).unwrap();
    for ch in 0..c {
        let planes = || (0..n).map(move |s| (s * c + ch) * area);
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for start in planes() {
            for i in start..start + area {
                sum_dy = sum_dy + dy[i];
                sum_dy_xhat = sum_dy_xhat + dy[i] * cache.xhat[i];
            }
        }
        dgamma[ch] = dgamma[ch] + sum_dy_xhat;
        dbeta[ch] = dbeta[ch] + sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / m;
        for start in planes() {
            for i in start..start + area {
                dx[i] = k * (m * dy[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Tensor-level entry points.

/// Gradients produced by [`conv2d_backward`].
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Real> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

fn conv_geometry<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let [c, h, w] = input.shape() else {
        return Err(Error::config(format!(
            "conv2d input must be [C,H,W], got {:?}",
            input.shape()
        )));
    };
    let [f, wc, k, k2] = weights.shape() else {
        return Err(Error::config(format!(
            "conv2d weights must be [F,C,k,k], got {:?}",
            weights.shape()
        )));
    };
    if wc != c || k != k2 || bias.shape() != [*f] {
        return Err(Error::config(format!(
            "conv2d shape mismatch: input {:?}, weights {:?}, bias {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    let g = ConvGeometry {
        channels: *c,
        height: *h,
        width: *w,
        filters: *f,
        kernel: *k,
        stride,
        pad,
    };
    g.validate()?;
    Ok(g)
}

/// `out[f] = bias[f] + Σ_c weights[f,c] ⋆ input[c]` with output side
/// `(H + 2·pad − k)/stride + 1`.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weights, bias, stride, pad)?;
    let mut out = Tensor::zeros(&[g.filters, g.out_height(), g.out_width()]);
    conv2d_forward_sample(input.data(), weights.data(), Some(bias.data()), &g, out.data_mut());
    Ok(out)
}

pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    dout: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry(input, weights, bias, stride, pad)?;
    if dout.shape() != [g.filters, g.out_height(), g.out_width()] {
        return Err(Error::config(format!(
            "conv2d output gradient has shape {:?}",
            dout.shape()
        )));
    }
    let mut grads = ConvGrads {
        input: Tensor::zeros(input.shape()),
        weights: Tensor::zeros(weights.shape()),
        bias: Tensor::zeros(bias.shape()),
    };
    conv2d_backward_sample(
        input.data(),
        weights.data(),
        &g,
        dout.data(),
        grads.weights.data_mut(),
        Some(grads.bias.data_mut()),
        Some(grads.input.data_mut()),
    );
    Ok(grads)
}

fn pool_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let [c, h, w] = shape else {
        return Err(Error::config(format!("maxpool input must be [C,H,W], got {shape:?}")));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::config(format!("maxpool needs even H and W, got {h}x{w}")));
    }
    Ok((*c, *h, *w))
}

/// 2×2 stride-2 max pooling. Also returns the argmax routing table used by
/// [`maxpool_backward`].
pub fn maxpool<T: Real>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let (c, h, w) = pool_dims(input.shape())?;
    let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
    let mut argmax = vec![0u32; out.len()];
    maxpool_forward_sample(input.data(), c, h, w, out.data_mut(), &mut argmax);
    Ok((out, argmax))
}

pub fn maxpool_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[u32],
    dout: &Tensor<T>,
) -> Result<Tensor<T>> {
    pool_dims(input_shape)?;
    if argmax.len() != dout.len() {
        return Err(Error::config("maxpool routing table does not match gradient"));
    }
    let mut dx = Tensor::zeros(input_shape);
    maxpool_backward_sample(dout.data(), argmax, dx.data_mut());
    Ok(dx)
}

pub fn leaky_relu<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    input.map(leaky)
}

pub fn leaky_relu_backward<T: Real>(input: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(dout.data())
        .map(|(&x, &g)| g * leaky_grad(x))
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

fn bn_dims<T: Real>(input: &Tensor<T>, state: &BatchNormState<T>) -> Result<(usize, usize, usize)> {
    let (n, c, area) = match input.shape() {
        [c, h, w] => (1, *c, h * w),
        [n, c, h, w] => (*n, *c, h * w),
        other => {
            return Err(Error::config(format!(
                "batchnorm input must be [C,H,W] or [N,C,H,W], got {other:?}"
            )))
        }
    };
    let ok = [&state.gamma, &state.beta, &state.running_mean, &state.running_var]
        .iter()
        .all(|v| v.len() == c);
    if !ok {
        return Err(Error::config(format!(
            "batchnorm parameters do not match {c} channels"
        )));
    }
    Ok((n, c, area))
}

/// Batch normalization. In train mode the batch statistics are used and the
/// running statistics updated; the returned cache feeds [`batchnorm_backward`].
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: BatchNormMode,
) -> Result<(Tensor<T>, Option<BatchNormCache<T>>)> {
    let (n, c, area) = bn_dims(input, state)?;
    let mut out = Tensor::zeros(input.shape());
    match mode {
        BatchNormMode::Infer => {
            batchnorm_infer(input.data(), n, c, area, state, out.data_mut());
            Ok((out, None))
        }
        BatchNormMode::Train => {
            let BatchNormState {
                gamma,
                beta,
                running_mean,
                running_var,
            } = state;
            let cache = batchnorm_train(
                input.data(),
                n,
                c,
                area,
                gamma,
                beta,
                running_mean,
                running_var,
                out.data_mut(),
            );
            Ok((out, Some(cache)))
        }
    }
}

/// Returns `(dinput, dgamma, dbeta)` for a train-mode forward.
pub fn batchnorm_backward<T: Real>(
    dout: &Tensor<T>,
    cache: &BatchNormCache<T>,
    state: &BatchNormState<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let (n, c, area) = bn_dims(dout, state)?;
    let mut dx = Tensor::zeros(dout.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    batchnorm_backward_slices(
        dout.data(),
        cache,
        &state.gamma,
        n,
        c,
        area,
        &mut dgamma,
        &mut dbeta,
        dx.data_mut(),
    );
    Ok((dx, dgamma, dbeta))
}
