//! Forward and backward compute kernels behind the autograd ops.
//!
//! Every kernel works on whole batches but processes samples one at a time
//! in order, so reductions happen in a fixed sequence and results are
//! bit-reproducible.

use crate::error::{Error, Result};
use crate::tensor::{checked_gemm, Scalar, Tensor};

/// Geometry of a 2-D sliding window over a single `(c, h, w)` map.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize, axis: &str) -> Result<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return Err(Error::Shape(format!(
            "conv2d: kernel {axis} {kernel} exceeds padded input {axis} {padded}"
        )));
    }
    if !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::Shape(format!(
            "conv2d: non-integral output {axis}: ({input} + 2*{padding} - {kernel}) / {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Unfold `x` (one sample) into a `[c*kh*kw, out_h*out_w]` column matrix.
fn im2col<T: Scalar>(x: &[T], g: &Window, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatter-add columns back into `x`.
fn col2im<T: Scalar>(cols: &[T], g: &Window, x: &mut [T]) {
    let p = g.cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, channels: usize, op: &str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::Shape(format!(
                "{op}: bias shape {:?} does not match {channels} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[c % bias.len()];
        for v in chunk {
            *v = *v + b;
        }
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = g.dims4()?;
    let mut out = vec![T::zero(); c];
    for n in 0..b {
        for (ch, acc) in out.iter_mut().enumerate() {
            let start = (n * c + ch) * h * w;
            *acc = *acc + g.data()[start..start + h * w].iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[c], out)
}

pub(crate) struct ConvGeometry {
    window: Window,
    batch: usize,
    out_channels: usize,
}

pub(crate) fn conv2d_geometry<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let (b, ci, h, w) = x.dims4()?;
    let &[co, wci, kh, kw] = weight.shape() else {
        return Err(Error::Shape(format!(
            "conv2d: weight must be rank 4 (co, ci, kh, kw), got {:?}",
            weight.shape()
        )));
    };
    if wci != ci {
        return Err(Error::Shape(format!(
            "conv2d: input channels {ci} do not match weight input channels {wci}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    let out_h = conv_out_extent(h, kh, stride, padding, "height")?;
    let out_w = conv_out_extent(w, kw, stride, padding, "width")?;
    Ok(ConvGeometry {
        window: Window {
            channels: ci,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            padding,
            out_h,
            out_w,
        },
        batch: b,
        out_channels: co,
    })
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let geo = conv2d_geometry(x, weight, stride, padding)?;
    check_bias(bias, geo.out_channels, "conv2d")?;
    let g = &geo.window;
    let (k, p, co) = (g.rows(), g.cols(), geo.out_channels);
    let in_step = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); geo.batch * co * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for n in 0..geo.batch {
        let xn = &x.data()[n * in_step..(n + 1) * in_step];
        let rhs: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        let on = &mut out[n * co * p..(n + 1) * co * p];
        checked_gemm(co, k, p, weight.data(), (k, 1), rhs, (p, 1), T::zero(), on, (p, 1));
        if let Some(b) = bias {
            add_channel_bias(on, b.data(), p);
        }
    }
    Tensor::new(&[geo.batch, co, g.out_h, g.out_w], out)
}

/// `(dx, dweight, dbias)`; `dx` is `None` unless requested.
pub(crate) type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Gradients of conv2d.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    gout: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let geo = conv2d_geometry(x, weight, stride, padding)?;
    let g = &geo.window;
    let (k, p, co) = (g.rows(), g.cols(), geo.out_channels);
    let in_step = g.channels * g.height * g.width;
    let mut dw = vec![T::zero(); co * k];
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { k * p } else { 0 }];
    for n in 0..geo.batch {
        let xn = &x.data()[n * in_step..(n + 1) * in_step];
        let gn = &gout.data()[n * co * p..(n + 1) * co * p];
        let rhs: &[T] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        // dW[co, K] += gout_n[co, P] * cols^T[P, K]
        checked_gemm(co, p, k, gn, (p, 1), rhs, (1, p), T::one(), &mut dw, (k, 1));
        if need_dx {
            let dxn = &mut dx[n * in_step..(n + 1) * in_step];
            if g.is_pointwise() {
                checked_gemm(k, co, p, weight.data(), (1, k), gn, (p, 1), T::zero(), dxn, (p, 1));
            } else {
                checked_gemm(
                    k,
                    co,
                    p,
                    weight.data(),
                    (1, k),
                    gn,
                    (p, 1),
                    T::zero(),
                    &mut dcols,
                    (p, 1),
                );
                col2im(&dcols, g, dxn);
            }
        }
    }
    let dx = if need_dx {
        Some(Tensor::new(x.shape(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(weight.shape(), dw)?, channel_sums(gout)?))
}

fn depthwise_check<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (b, c, h, w) = x.dims4()?;
    let &[wc, one, k, k2] = weight.shape() else {
        return Err(Error::Shape(format!(
            "depthwise_conv2d: weight must be (c, 1, k, k), got {:?}",
            weight.shape()
        )));
    };
    if wc != c {
        return Err(Error::Shape(format!(
            "depthwise_conv2d: weight channels {wc} do not match input channels {c}"
        )));
    }
    if one != 1 || k != k2 {
        return Err(Error::Shape(format!(
            "depthwise_conv2d: weight must be (c, 1, k, k), got {:?}",
            weight.shape()
        )));
    }
    if k % 2 == 0 || padding * 2 + 1 != k {
        return Err(Error::InvalidArgument(format!(
            "depthwise_conv2d: padding {padding} does not preserve size for kernel {k}"
        )));
    }
    Ok((b, c, h, w, k))
}

pub(crate) fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let (b, c, h, w, k) = depthwise_check(x, weight, padding)?;
    check_bias(bias, c, "depthwise_conv2d")?;
    let mut out = vec![T::zero(); x.len()];
    let pad = padding as isize;
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * h * w;
            let src = &x.data()[base..base + h * w];
            let dst = &mut out[base..base + h * w];
            let kern = &weight.data()[ch * k * k..(ch + 1) * k * k];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wv = kern[ky * k + kx];
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let srow = iy as usize * w;
                        let drow = oy * w;
                        for ox in x0..x1 {
                            let ix = (ox as isize + dx) as usize;
                            dst[drow + ox] = dst[drow + ox] + wv * src[srow + ix];
                        }
                    }
                }
            }
            if let Some(bias) = bias {
                let bv = bias.data()[ch];
                for v in dst.iter_mut() {
                    *v = *v + bv;
                }
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    padding: usize,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w, k) = depthwise_check(x, weight, padding)?;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let pad = padding as isize;
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * h * w;
            let src = &x.data()[base..base + h * w];
            let g = &gout.data()[base..base + h * w];
            let dsrc = &mut dx[base..base + h * w];
            for ky in 0..k {
                let dy = ky as isize - pad;
                for kx in 0..k {
                    let dxo = kx as isize - pad;
                    let widx = ch * k * k + ky * k + kx;
                    let wv = weight.data()[widx];
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = (w as isize - dxo).min(w as isize).max(0) as usize;
                    let mut acc = T::zero();
                    for oy in 0..h {
                        let iy = oy as isize + dy;
                        if iy < 0 || iy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let srow = iy as usize * w;
                        let grow = oy * w;
                        for ox in x0..x1 {
                            let ix = srow + (ox as isize + dxo) as usize;
                            let gv = g[grow + ox];
                            acc = acc + gv * src[ix];
                            dsrc[ix] = dsrc[ix] + gv * wv;
                        }
                    }
                    dw[widx] = dw[widx] + acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        channel_sums(gout)?,
    ))
}

fn transpose_geometry<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize, Window)> {
    let (b, ci, h, w) = x.dims4()?;
    if stride < 1 {
        return Err(Error::InvalidArgument("conv_transpose2d: stride must be >= 1".into()));
    }
    let &[wci, co, kh, kw] = weight.shape() else {
        return Err(Error::Shape(format!(
            "conv_transpose2d: weight must be rank 4 (ci, co, kh, kw), got {:?}",
            weight.shape()
        )));
    };
    if wci != ci {
        return Err(Error::Shape(format!(
            "conv_transpose2d: input channels {ci} do not match weight input channels {wci}"
        )));
    }
    let out_h = ((h - 1) * stride + kh)
        .checked_sub(2 * padding)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Shape("conv_transpose2d: padding removes whole output height".into()))?;
    let out_w = ((w - 1) * stride + kw)
        .checked_sub(2 * padding)
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Shape("conv_transpose2d: padding removes whole output width".into()))?;
    // The output map plays the role of a conv2d input whose conv output is `x`.
    Ok((
        b,
        ci,
        Window {
            channels: co,
            height: out_h,
            width: out_w,
            kh,
            kw,
            stride,
            padding,
            out_h: h,
            out_w: w,
        },
    ))
}

pub(crate) fn conv_transpose2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (b, ci, g) = transpose_geometry(x, weight, stride, padding)?;
    check_bias(bias, g.channels, "conv_transpose2d")?;
    let (k, p) = (g.rows(), g.cols());
    let out_step = g.channels * g.height * g.width;
    let mut out = vec![T::zero(); b * out_step];
    let mut cols = vec![T::zero(); k * p];
    for n in 0..b {
        let xn = &x.data()[n * ci * p..(n + 1) * ci * p];
        // cols[K, P] = W^T[K, ci] * x_n[ci, P]
        checked_gemm(
            k,
            ci,
            p,
            weight.data(),
            (1, k),
            xn,
            (p, 1),
            T::zero(),
            &mut cols,
            (p, 1),
        );
        let on = &mut out[n * out_step..(n + 1) * out_step];
        col2im(&cols, &g, on);
        if let Some(bias) = bias {
            add_channel_bias(on, bias.data(), g.height * g.width);
        }
    }
    Tensor::new(&[b, g.channels, g.height, g.width], out)
}

pub(crate) fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    gout: &Tensor<T>,
    need_dx: bool,
) -> Result<ConvGrads<T>> {
    let (b, ci, g) = transpose_geometry(x, weight, stride, padding)?;
    let (k, p) = (g.rows(), g.cols());
    let out_step = g.channels * g.height * g.width;
    let mut gcols = vec![T::zero(); k * p];
    let mut dw = vec![T::zero(); weight.len()];
    let mut dx = if need_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    for n in 0..b {
        im2col(&gout.data()[n * out_step..(n + 1) * out_step], &g, &mut gcols);
        let xn = &x.data()[n * ci * p..(n + 1) * ci * p];
        // dW[ci, K] += x_n[ci, P] * gcols^T[P, K]
        checked_gemm(ci, p, k, xn, (p, 1), &gcols, (1, p), T::one(), &mut dw, (k, 1));
        if need_dx {
            let dxn = &mut dx[n * ci * p..(n + 1) * ci * p];
            checked_gemm(ci, k, p, weight.data(), (k, 1), &gcols, (p, 1), T::zero(), dxn, (p, 1));
        }
    }
    let dx = if need_dx {
        Some(Tensor::new(x.shape(), dx)?)
    } else {
        None
    };
    Ok((dx, Tensor::new(weight.shape(), dw)?, channel_sums(gout)?))
}

/// Statistics saved by a normalization forward pass for its backward.
#[derive(Debug, Clone)]
pub(crate) struct NormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn check_affine<T: Scalar>(gamma: &Tensor<T>, beta: &Tensor<T>, c: usize, op: &str) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "{op}: gamma/beta shapes {:?}/{:?} do not match {c} channels",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

/// Per-channel batch statistics `(mean, biased variance)` over `(b, h, w)`.
pub(crate) fn channel_moments<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, h, w) = x.dims4()?;
    let count = (b * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for n in 0..b {
            let start = (n * c + ch) * h * w;
            s += x.data()[start..start + h * w].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0;
        for n in 0..b {
            let start = (n * c + ch) * h * w;
            q += x.data()[start..start + h * w]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    Ok((mean, var))
}

/// Normalize channel `c` as `(x - mean[c]) * inv_std[c]` then apply the affine map.
pub(crate) fn channel_affine_normalize<T: Scalar>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (b, c, h, w) = x.dims4()?;
    check_affine(gamma, beta, c, "batch_norm")?;
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for n in 0..b {
        for ch in 0..c {
            let start = (n * c + ch) * h * w;
            let (m, s, gm, bt) = (mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in start..start + h * w {
                let v = (x.data()[i] - m) * s;
                xhat[i] = v;
                out[i] = gm * v + bt;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        NormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std: inv_std.to_vec(),
        },
    ))
}

/// Batch-norm backward; `batch_stats` selects the train-mode formula.
pub(crate) fn batch_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    gout: &Tensor<T>,
    batch_stats: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = gout.dims4()?;
    let count = (b * h * w) as f64;
    let xhat = cache.xhat.data();
    let g = gout.data();
    let mut dx = vec![T::zero(); gout.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for n in 0..b {
            let start = (n * c + ch) * h * w;
            for i in start..start + h * w {
                sum_g += g[i].as_f64();
                sum_gx += (g[i] * xhat[i]).as_f64();
            }
        }
        dgamma[ch] = T::of(sum_gx);
        dbeta[ch] = T::of(sum_g);
        let gm = gamma.data()[ch];
        let s = cache.inv_std[ch];
        let mean_g = T::of(sum_g / count);
        let mean_gx = T::of(sum_gx / count);
        for n in 0..b {
            let start = (n * c + ch) * h * w;
            for i in start..start + h * w {
                dx[i] = if batch_stats {
                    gm * s * (g[i] - mean_g - xhat[i] * mean_gx)
                } else {
                    gm * s * g[i]
                };
            }
        }
    }
    Ok((
        Tensor::new(gout.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

/// Layer norm across channels at every `(b, y, x)` location.
pub(crate) fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormCache<T>)> {
    let (b, c, h, w) = x.dims4()?;
    if c == 0 {
        return Err(Error::Shape("layer_norm: zero channels".into()));
    }
    check_affine(gamma, beta, c, "layer_norm")?;
    let plane = h * w;
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); b * plane];
    let d = x.data();
    for n in 0..b {
        let base = n * c * plane;
        for loc in 0..plane {
            let mut s = 0.0;
            for ch in 0..c {
                s += d[base + ch * plane + loc].as_f64();
            }
            let m = s / c as f64;
            let mut q = 0.0;
            for ch in 0..c {
                q += (d[base + ch * plane + loc].as_f64() - m).powi(2);
            }
            let is = 1.0 / (q / c as f64 + eps).sqrt();
            inv_std[n * plane + loc] = T::of(is);
            let (mt, ist) = (T::of(m), T::of(is));
            for ch in 0..c {
                let i = base + ch * plane + loc;
                let v = (d[i] - mt) * ist;
                xhat[i] = v;
                out[i] = gamma.data()[ch] * v + beta.data()[ch];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), out)?,
        NormCache {
            xhat: Tensor::new(x.shape(), xhat)?,
            inv_std,
        },
    ))
}

pub(crate) fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    gamma: &Tensor<T>,
    gout: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, c, h, w) = gout.dims4()?;
    let plane = h * w;
    let xhat = cache.xhat.data();
    let g = gout.data();
    let mut dx = vec![T::zero(); gout.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for n in 0..b {
        let base = n * c * plane;
        for loc in 0..plane {
            let mut sum_dh = T::zero();
            let mut sum_dhx = T::zero();
            for ch in 0..c {
                let i = base + ch * plane + loc;
                let dh = g[i] * gamma.data()[ch];
                sum_dh = sum_dh + dh;
                sum_dhx = sum_dhx + dh * xhat[i];
                dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                dbeta[ch] = dbeta[ch] + g[i];
            }
            let cn = T::of(c as f64);
            let s = cache.inv_std[n * plane + loc];
            for ch in 0..c {
                let i = base + ch * plane + loc;
                let dh = g[i] * gamma.data()[ch];
                dx[i] = s * (dh - sum_dh / cn - xhat[i] * sum_dhx / cn);
            }
        }
    }
    Ok((
        Tensor::new(gout.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu<T: Scalar>(v: T) -> T {
    let half = T::of(0.5);
    half * v * (T::one() + (v * T::of(FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(v: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (v * T::of(FRAC_1_SQRT_2)).erf());
    let pdf = T::of(FRAC_1_SQRT_2PI) * (-(v * v) * T::of(0.5)).exp();
    cdf + v * pdf
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
