//! Forward and backward kernels for the layer types.

use rand::Rng;

use super::tensor::{gemm, Layout, Scalar, Tensor4};
use crate::error::{Error, Result};

/// Kernel size, stride and zero padding of a (transposed) convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub pad: [usize; 2],
}

impl ConvGeometry {
    pub fn square(k: usize, stride: usize, pad: usize) -> Self {
        ConvGeometry {
            kernel: [k, k],
            stride: [stride, stride],
            pad: [pad, pad],
        }
    }

    fn taps(&self) -> usize {
        self.kernel[0] * self.kernel[1]
    }

    /// Convolution output size `(in + 2p - k) / s + 1`, or `None` when the
    /// kernel does not fit.
    pub fn conv_out(&self, rows: usize, cols: usize) -> Option<(usize, usize)> {
        let dim = |n: usize, i: usize| {
            let padded = n + 2 * self.pad[i];
            (padded >= self.kernel[i] && self.stride[i] > 0)
                .then(|| (padded - self.kernel[i]) / self.stride[i] + 1)
        };
        Some((dim(rows, 0)?, dim(cols, 1)?))
    }

    /// Transposed convolution output size `(in - 1) s - 2p + k`.
    pub fn transposed_out(&self, rows: usize, cols: usize) -> Option<(usize, usize)> {
        let dim = |n: usize, i: usize| {
            let full = (n.checked_sub(1)?) * self.stride[i] + self.kernel[i];
            full.checked_sub(2 * self.pad[i]).filter(|&v| v > 0)
        };
        let out = (dim(rows, 0)?, dim(cols, 1)?);
        // Only accept sizes the matching convolution maps back exactly.
        (self.conv_out(out.0, out.1) == Some((rows, cols))).then_some(out)
    }
}

/// Unfolds `x` (`c x h x w`) into `(c * kh * kw) x (oh * ow)` patches.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, cols: &mut [T]) {
    let [kh, kw] = g.kernel;
    let [sh, sw] = g.stride;
    let [ph, pw] = g.pad;
    let p = oh * ow;
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if sw == 1 {
                        // ix = ox + kj - pw; copy the in-bounds run in one go.
                        let shift = kj as isize - pw as isize;
                        let lo = (-shift).clamp(0, ow as isize) as usize;
                        let hi = (w as isize - shift).clamp(0, ow as isize) as usize;
                        out[..lo].fill(T::zero());
                        if hi > lo {
                            let s0 = (lo as isize + shift) as usize;
                            out[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        }
                        out[hi.max(lo)..].fill(T::zero());
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * sw + kj) as isize - pw as isize;
                            *o = if ix >= 0 && ix < w as isize { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patches back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, g: &ConvGeometry, oh: usize, ow: usize, x: &mut [T]) {
    let [kh, kw] = g.kernel;
    let [sh, sw] = g.stride;
    let [ph, pw] = g.pad;
    let p = oh * ow;
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_len(op: &'static str, what: &str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{what} of {expected} values"), got))
    }
}

/// Cross-correlation. `weight` is `out_ch x in_ch x kh x kw`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: &[T],
    out_ch: usize,
    g: &ConvGeometry,
) -> Result<Tensor4<T>> {
    let [n, c, h, w] = x.shape();
    let k = c * g.taps();
    check_len("conv2d", "weight", out_ch * k, weight.len())?;
    check_len("conv2d", "bias", out_ch, bias.len())?;
    let (oh, ow) = g
        .conv_out(h, w)
        .ok_or_else(|| Error::shape("conv2d", format!("input >= kernel {:?}", g.kernel), format!("{h}x{w}")))?;
    let p = oh * ow;
    let mut y = Tensor4::zeros([n, out_ch, oh, ow]);
    let mut cols = vec![T::zero(); k * p];
    for i in 0..n {
        im2col(x.sample(i), c, h, w, g, oh, ow, &mut cols);
        let out = y.sample_mut(i);
        for (o, &b) in bias.iter().enumerate() {
            out[o * p..(o + 1) * p].fill(b);
        }
        gemm(out_ch, k, p, weight, Layout::rows(k), &cols, Layout::rows(p), T::one(), out);
    }
    Ok(y)
}

/// Gradient with respect to the input of a convolution.
pub fn conv2d_backward_input<T: Scalar>(
    dy: &Tensor4<T>,
    weight: &[T],
    in_shape: [usize; 4],
    g: &ConvGeometry,
) -> Result<Tensor4<T>> {
    let [n, c, h, w] = in_shape;
    let [dn, out_ch, oh, ow] = dy.shape();
    let k = c * g.taps();
    check_len("conv2d_backward", "weight", out_ch * k, weight.len())?;
    if dn != n || g.conv_out(h, w) != Some((oh, ow)) {
        return Err(Error::shape("conv2d_backward", format!("gradient for input {in_shape:?}"), format!("{:?}", dy.shape())));
    }
    let p = oh * ow;
    let mut dx = Tensor4::zeros(in_shape);
    let mut dcols = vec![T::zero(); k * p];
    for i in 0..n {
        gemm(k, out_ch, p, weight, Layout::transposed(k), dy.sample(i), Layout::rows(p), T::zero(), &mut dcols);
        col2im(&dcols, c, h, w, g, oh, ow, dx.sample_mut(i));
    }
    Ok(dx)
}

/// Input, weight and bias gradients of a convolution.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    dy: &Tensor4<T>,
    g: &ConvGeometry,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    let [n, c, h, w] = x.shape();
    let [_, out_ch, oh, ow] = dy.shape();
    let dx = conv2d_backward_input(dy, weight, x.shape(), g)?;
    let k = c * g.taps();
    let p = oh * ow;
    let mut dw = vec![T::zero(); out_ch * k];
    let mut db = vec![T::zero(); out_ch];
    let mut cols = vec![T::zero(); k * p];
    for i in 0..n {
        im2col(x.sample(i), c, h, w, g, oh, ow, &mut cols);
        let d = dy.sample(i);
        gemm(out_ch, p, k, d, Layout::rows(p), &cols, Layout::transposed(p), T::one(), &mut dw);
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += d[o * p..(o + 1) * p].iter().copied().sum::<T>();
        }
    }
    Ok((dx, dw, db))
}

/// Transposed convolution (the adjoint of [`conv2d_forward`]'s input map)
/// plus bias. `weight` is `in_ch x out_ch x kh x kw`.
pub fn tconv2d_forward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    bias: &[T],
    out_ch: usize,
    g: &ConvGeometry,
) -> Result<Tensor4<T>> {
    let [n, in_ch, h, w] = x.shape();
    let (oh, ow) = g
        .transposed_out(h, w)
        .ok_or_else(|| Error::shape("tconv2d", "input compatible with kernel/stride/pad", format!("{h}x{w}")))?;
    check_len("tconv2d", "weight", in_ch * out_ch * g.taps(), weight.len())?;
    check_len("tconv2d", "bias", out_ch, bias.len())?;
    let mut y = conv2d_backward_input(x, weight, [n, out_ch, oh, ow], g)?;
    let p = oh * ow;
    for i in 0..n {
        let out = y.sample_mut(i);
        for (o, &b) in bias.iter().enumerate() {
            for v in &mut out[o * p..(o + 1) * p] {
                *v += b;
            }
        }
    }
    Ok(y)
}

/// Input, weight and bias gradients of a transposed convolution.
pub fn tconv2d_backward<T: Scalar>(
    x: &Tensor4<T>,
    weight: &[T],
    dy: &Tensor4<T>,
    g: &ConvGeometry,
) -> Result<(Tensor4<T>, Vec<T>, Vec<T>)> {
    let [n, in_ch, h, w] = x.shape();
    let [_, out_ch, oh, ow] = dy.shape();
    let k = out_ch * g.taps();
    let p = h * w;
    // dx is the forward convolution of dy with the same weights.
    let zero_bias = vec![T::zero(); in_ch];
    let dx = conv2d_forward(dy, weight, &zero_bias, in_ch, g)?;
    let mut dw = vec![T::zero(); in_ch * k];
    let mut db = vec![T::zero(); out_ch];
    let mut cols = vec![T::zero(); k * p];
    let q = oh * ow;
    for i in 0..n {
        let d = dy.sample(i);
        im2col(d, out_ch, oh, ow, g, h, w, &mut cols);
        gemm(in_ch, p, k, x.sample(i), Layout::rows(p), &cols, Layout::transposed(p), T::one(), &mut dw);
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += d[o * q..(o + 1) * q].iter().copied().sum::<T>();
        }
    }
    Ok((dx, dw, db))
}

/// Saved state of a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: Tensor4<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

fn channel_stride<T: Scalar>(x: &Tensor4<T>) -> (usize, usize, usize) {
    let [n, c, h, w] = x.shape();
    (n, c, h * w)
}

/// Normalizes with the batch statistics of each channel.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor4<T>, BatchNormCache<T>)> {
    let (n, c, p) = channel_stride(x);
    check_len("batchnorm", "gamma", c, gamma.len())?;
    check_len("batchnorm", "beta", c, beta.len())?;
    let count = T::from_usize(n * p).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for i in 0..n {
        let s = x.sample(i);
        for ch in 0..c {
            mean[ch] += s[ch * p..(ch + 1) * p].iter().copied().sum::<T>();
        }
    }
    for m in &mut mean {
        *m = *m / count;
    }
    for i in 0..n {
        let s = x.sample(i);
        for ch in 0..c {
            let m = mean[ch];
            var[ch] += s[ch * p..(ch + 1) * p].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
        }
    }
    for v in &mut var {
        *v = *v / count;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor4::zeros(x.shape());
    let mut y = Tensor4::zeros(x.shape());
    for i in 0..n {
        let s = x.sample(i);
        let xh = xhat.sample_mut(i);
        for ch in 0..c {
            for j in ch * p..(ch + 1) * p {
                xh[j] = (s[j] - mean[ch]) * inv_std[ch];
            }
        }
        let yo = y.sample_mut(i);
        let xh = xhat.sample(i);
        for ch in 0..c {
            for j in ch * p..(ch + 1) * p {
                yo[j] = gamma[ch] * xh[j] + beta[ch];
            }
        }
    }
    Ok((y, BatchNormCache { xhat, inv_std, mean, var }))
}

/// Normalizes with running statistics.
pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor4<T>,
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    eps: T,
) -> Result<Tensor4<T>> {
    let (n, c, p) = channel_stride(x);
    for (what, len) in [("gamma", gamma.len()), ("beta", beta.len()), ("running_mean", running_mean.len()), ("running_var", running_var.len())] {
        check_len("batchnorm", what, c, len)?;
    }
    let scale: Vec<T> = (0..c).map(|ch| gamma[ch] / (running_var[ch] + eps).sqrt()).collect();
    let shift: Vec<T> = (0..c).map(|ch| beta[ch] - running_mean[ch] * scale[ch]).collect();
    let mut y = x.clone();
    for i in 0..n {
        let s = y.sample_mut(i);
        for ch in 0..c {
            for v in &mut s[ch * p..(ch + 1) * p] {
                *v = *v * scale[ch] + shift[ch];
            }
        }
    }
    Ok(y)
}

/// Input, scale and shift gradients of a training-mode batch norm.
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor4<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let (n, c, p) = channel_stride(dy);
    let count = T::from_usize(n * p).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        let d = dy.sample(i);
        let xh = cache.xhat.sample(i);
        for ch in 0..c {
            for j in ch * p..(ch + 1) * p {
                dbeta[ch] += d[j];
                dgamma[ch] += d[j] * xh[j];
            }
        }
    }
    let mut dx = Tensor4::zeros(dy.shape());
    for i in 0..n {
        let d = dy.sample(i);
        let xh = cache.xhat.sample(i);
        let out = dx.sample_mut(i);
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / count;
            for j in ch * p..(ch + 1) * p {
                out[j] = k * (count * d[j] - dbeta[ch] - xh[j] * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn relu_forward<T: Scalar>(x: &Tensor4<T>) -> Tensor4<T> {
    let mut y = x.clone();
    for v in y.as_mut_slice() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Scalar>(dy: &Tensor4<T>, y: &Tensor4<T>) -> Tensor4<T> {
    let mut dx = dy.clone();
    for (d, &o) in dx.as_mut_slice().iter_mut().zip(y.as_slice()) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

/// Non-overlapping `k x k` average pooling.
pub fn avgpool_forward<T: Scalar>(x: &Tensor4<T>, k: usize) -> Result<Tensor4<T>> {
    let [n, c, h, w] = x.shape();
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::shape("avgpool", format!("rows and cols divisible by {k}"), format!("{h}x{w}")));
    }
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::from_usize(k * k).unwrap();
    let mut y = Tensor4::zeros([n, c, oh, ow]);
    for i in 0..n {
        let s = x.sample(i);
        let o = y.sample_mut(i);
        for ch in 0..c {
            for r in 0..h {
                let src = &s[(ch * h + r) * w..(ch * h + r + 1) * w];
                let dst = &mut o[(ch * oh + r / k) * ow..(ch * oh + r / k + 1) * ow];
                for (col, &v) in src.iter().enumerate() {
                    dst[col / k] += v * scale;
                }
            }
        }
    }
    Ok(y)
}

pub fn avgpool_backward<T: Scalar>(dy: &Tensor4<T>, in_shape: [usize; 4], k: usize) -> Tensor4<T> {
    let [n, c, h, w] = in_shape;
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::from_usize(k * k).unwrap();
    let mut dx = Tensor4::zeros(in_shape);
    for i in 0..n {
        let d = dy.sample(i);
        let o = dx.sample_mut(i);
        for ch in 0..c {
            for r in 0..h {
                let src = &d[(ch * oh + r / k) * ow..(ch * oh + r / k + 1) * ow];
                let dst = &mut o[(ch * h + r) * w..(ch * h + r + 1) * w];
                for (col, v) in dst.iter_mut().enumerate() {
                    *v = src[col / k] * scale;
                }
            }
        }
    }
    dx
}

pub fn check_dropout_rate(rate: f32) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::Config(format!("dropout rate must be in [0, 1), got {rate}")))
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)`. Returns the
/// multiplicative mask, or `None` when inactive (the output is then the input,
/// unchanged).
pub fn dropout_forward<T: Scalar, R: Rng + ?Sized>(
    x: &Tensor4<T>,
    rate: f32,
    active: bool,
    rng: &mut R,
) -> Result<(Tensor4<T>, Option<Vec<T>>)> {
    check_dropout_rate(rate)?;
    if !active || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = T::of(1.0 / (1.0 - rate as f64));
    // Drop when a uniform u32 falls below rate * 2^32.
    let threshold = (rate as f64 * 4_294_967_296.0) as u64;
    let mask: Vec<T> = (0..x.as_slice().len())
        .map(|_| if (rng.next_u32() as u64) < threshold { T::zero() } else { keep })
        .collect();
    let mut y = x.clone();
    for (v, &m) in y.as_mut_slice().iter_mut().zip(&mask) {
        *v = *v * m;
    }
    Ok((y, Some(mask)))
}

pub fn dropout_backward<T: Scalar>(dy: &Tensor4<T>, mask: Option<&[T]>) -> Tensor4<T> {
    let mut dx = dy.clone();
    if let Some(mask) = mask {
        for (d, &m) in dx.as_mut_slice().iter_mut().zip(mask) {
            *d = *d * m;
        }
    }
    dx
}

/// Channel concatenation `[a, b]`.
pub fn concat_forward<T: Scalar>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let [n, ca, h, w] = a.shape();
    let [nb, cb, hb, wb] = b.shape();
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape("concat", format!("[{n}, _, {h}, {w}]"), format!("{:?}", b.shape())));
    }
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        data.extend_from_slice(a.sample(i));
        data.extend_from_slice(b.sample(i));
    }
    Tensor4::from_vec([n, ca + cb, h, w], data)
}

/// Splits a concatenated gradient back into its two parts.
pub fn concat_backward<T: Scalar>(dy: &Tensor4<T>, first_channels: usize) -> (Tensor4<T>, Tensor4<T>) {
    let [n, c, h, w] = dy.shape();
    let split = first_channels * h * w;
    let mut a = Vec::with_capacity(n * split);
    let mut b = Vec::with_capacity(n * (c * h * w - split));
    for i in 0..n {
        let s = dy.sample(i);
        a.extend_from_slice(&s[..split]);
        b.extend_from_slice(&s[split..]);
    }
    (
        Tensor4::from_vec([n, first_channels, h, w], a).unwrap(),
        Tensor4::from_vec([n, c - first_channels, h, w], b).unwrap(),
    )
}

/// Mean absolute error and its (sub)gradient `sign(pred - target) / N`.
pub fn l1_loss<T: Scalar>(pred: &Tensor4<T>, target: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    target.expect_shape("l1_loss", pred.shape())?;
    let n = pred.as_slice().len();
    if n == 0 {
        return Err(Error::shape("l1_loss", "non-empty tensors", "0 values"));
    }
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut total = 0.0f64;
    let mut grad = Tensor4::zeros(pred.shape());
    for ((g, &p), &t) in grad.as_mut_slice().iter_mut().zip(pred.as_slice()).zip(target.as_slice()) {
        let d = p - t;
        total += d.abs().to_f64().unwrap();
        *g = if d > T::zero() {
            inv
        } else if d < T::zero() {
            -inv
        } else {
            T::zero()
        };
    }
    Ok((total / n as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn t(shape: [usize; 4], data: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn one_by_one_kernel_scales() {
        let x = t([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = conv2d_forward(&x, &[2.0], &[0.0], 1, &ConvGeometry::square(1, 1, 0)).unwrap();
        assert_eq!(y.as_slice(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn centered_delta_kernel_is_identity() {
        let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = t([1, 1, 4, 5], &data);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = conv2d_forward(&x, &k, &[0.0], 1, &ConvGeometry::square(3, 1, 1)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_shape_errors_name_dims() {
        let x = Tensor4::<f32>::zeros([1, 2, 4, 4]);
        let err = conv2d_forward(&x, &[0.0; 9], &[0.0], 1, &ConvGeometry::square(3, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("18"), "{err}");
        let err = conv2d_forward(&x, &[0.0; 50], &[0.0], 1, &ConvGeometry::square(5, 1, 0)).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        let err = conv2d_forward(&Tensor4::<f32>::zeros([1, 2, 2, 2]), &[0.0; 50], &[0.0], 1, &ConvGeometry::square(5, 1, 0));
        assert!(err.is_err());
    }

    #[test]
    fn vertical_transposed_conv_doubles_rows() {
        let g = ConvGeometry { kernel: [4, 3], stride: [2, 1], pad: [1, 1] };
        assert_eq!(g.transposed_out(16, 1024), Some((32, 1024)));
        let x = Tensor4::<f32>::zeros([1, 1, 16, 64]);
        let y = tconv2d_forward(&x, &[0.1; 12 * 2], &[0.5, -0.25], 2, &g).unwrap();
        assert_eq!(y.shape(), [1, 2, 32, 64]);
        assert!(y.sample(0)[..32 * 64].iter().all(|&v| v == 0.5));
        assert!(y.sample(0)[32 * 64..].iter().all(|&v| v == -0.25));
    }

    #[test]
    fn batchnorm_constant_channel_gives_shift() {
        let x = t([2, 1, 2, 2], &[3.0; 8]);
        let (y, _) = batchnorm_train(&x, &[1.5], &[0.25], 1e-5).unwrap();
        assert!(y.as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn relu_values() {
        let y = relu_forward(&t([1, 1, 1, 2], &[-3.0, 3.0]));
        assert_eq!(y.as_slice(), &[0.0, 3.0]);
    }

    #[test]
    fn avgpool_averages_blocks() {
        let x = t([1, 1, 2, 4], &[1.0, 3.0, 5.0, 7.0, 1.0, 3.0, 5.0, 7.0]);
        assert_eq!(avgpool_forward(&x, 2).unwrap().as_slice(), &[2.0, 6.0]);
        assert!(avgpool_forward(&t([1, 1, 3, 4], &[0.0; 12]), 2).is_err());
    }

    #[test]
    fn inactive_dropout_is_bit_identity() {
        let x = t([1, 2, 3, 3], &(0..18).map(|i| i as f64 / 7.0).collect::<Vec<_>>());
        let (y, mask) = dropout_forward(&x, 0.5, false, &mut rng::stream(1, 1)).unwrap();
        assert!(mask.is_none());
        assert_eq!(y, x);
        assert!(dropout_forward(&x, 1.0, true, &mut rng::stream(1, 1)).is_err());
    }

    #[test]
    fn dropout_scales_kept_units() {
        let x = t([1, 1, 10, 10], &[1.0; 100]);
        let (y, _) = dropout_forward(&x, 0.5, true, &mut rng::stream(7, 0)).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(y.as_slice().iter().any(|&v| v == 0.0));
    }

    #[test]
    fn l1_examples() {
        let p = t([1, 1, 1, 2], &[0.5, 0.5]);
        let q = t([1, 1, 1, 2], &[0.0, 1.0]);
        assert_eq!(l1_loss(&p, &q).unwrap().0, 0.5);
        let (loss, grad) = l1_loss(&p, &p).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.as_slice().iter().all(|&g| g == 0.0));
        assert!(l1_loss(&p, &t([1, 1, 2, 1], &[0.0, 1.0])).is_err());
    }

    #[test]
    fn concat_roundtrip() {
        let a = t([2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t([2, 2, 1, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = concat_forward(&a, &b).unwrap();
        assert_eq!(c.sample(1), &[3.0, 4.0, 9.0, 10.0, 11.0, 12.0]);
        let (ga, gb) = concat_backward(&c, 1);
        assert_eq!((ga, gb), (a, b));
    }
}
