//! Forward and adjoint kernels for the tensor operators.
//!
//! Every function here is pure. Reductions (conv inner products, pooling
//! sums, softmax normalisers) accumulate in `f64` regardless of `T`.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor4};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvCfg {
    pub const fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        ConvCfg {
            stride,
            dilation,
            padding,
        }
    }

    /// Stride 1, no dilation, no padding.
    pub const fn unit() -> Self {
        ConvCfg::new(1, 1, 0)
    }

    /// Stride 1 with the padding that keeps spatial size for an odd `kernel`.
    pub const fn same(kernel: usize, dilation: usize) -> Self {
        ConvCfg::new(1, dilation, dilation * (kernel - 1) / 2)
    }
}

impl Default for ConvCfg {
    fn default() -> Self {
        ConvCfg::unit()
    }
}

fn conv_out_len(input: usize, kernel: usize, cfg: ConvCfg) -> Option<usize> {
    let span = cfg.dilation * (kernel - 1) + 1;
    let padded = input + 2 * cfg.padding;
    if padded < span {
        return None;
    }
    Some((padded - span) / cfg.stride + 1)
}

/// Output dims of a convolution, validating the configuration.
pub fn conv_output_dims(x: Dims, kernel: Dims, cfg: ConvCfg) -> Result<Dims> {
    if cfg.stride == 0 || cfg.dilation == 0 {
        return Err(Error::Config(format!(
            "conv2d needs stride and dilation >= 1, got {cfg:?}"
        )));
    }
    if kernel.h == 0 || kernel.w == 0 {
        return Err(Error::Config(format!(
            "conv2d kernel {kernel} has an empty window"
        )));
    }
    if x.c != kernel.c {
        return Err(Error::shape("conv2d", x, kernel));
    }
    match (
        conv_out_len(x.h, kernel.h, cfg),
        conv_out_len(x.w, kernel.w, cfg),
    ) {
        (Some(h), Some(w)) if h >= 1 && w >= 1 => Ok(Dims::new(x.n, kernel.n, h, w)),
        _ => Err(Error::Config(format!(
            "conv2d of {x} with kernel {kernel} and {cfg:?} has zero-size output"
        ))),
    }
}

/// Output indices `o` in `lo..hi` for which `o*stride + offset` lies in `0..in_len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) + s - 1) / s
    };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = (hi as usize).min(out_len);
    let lo = lo as usize;
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

fn check_bias<T: Real>(bias: Option<&Tensor4<T>>, out_c: usize) -> Result<()> {
    if let Some(b) = bias {
        let want = Dims::new(1, out_c, 1, 1);
        if b.dims() != want {
            return Err(Error::shape("conv2d bias", b.dims(), want));
        }
    }
    Ok(())
}

/// Cross-correlation with zero padding, stride and dilation.
pub fn conv2d<T: Real>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    bias: Option<&Tensor4<T>>,
    cfg: ConvCfg,
) -> Result<Tensor4<T>> {
    let xd = x.dims();
    let kd = kernel.dims();
    let od = conv_output_dims(xd, kd, cfg)?;
    check_bias(bias, kd.n)?;
    let (s, d, p) = (cfg.stride, cfg.dilation as isize, cfg.padding as isize);
    let mut out = Tensor4::zeros(od);
    let mut acc = vec![0f64; od.plane()];
    for n in 0..xd.n {
        for oc in 0..kd.n {
            let b0 = bias.map_or(0.0, |b| b.data()[oc].as_f64());
            acc.iter_mut().for_each(|a| *a = b0);
            for ic in 0..xd.c {
                let xp = x.plane(n, ic);
                for ky in 0..kd.h {
                    let oy_off = ky as isize * d - p;
                    let (oy_lo, oy_hi) = valid_range(od.h, xd.h, oy_off, s);
                    for kx in 0..kd.w {
                        let wv = kernel.get(oc, ic, ky, kx).as_f64();
                        if wv == 0.0 {
                            continue;
                        }
                        let ox_off = kx as isize * d - p;
                        let (ox_lo, ox_hi) = valid_range(od.w, xd.w, ox_off, s);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as isize * s as isize + oy_off) as usize;
                            let row = &xp[iy * xd.w..(iy + 1) * xd.w];
                            let arow = &mut acc[oy * od.w..(oy + 1) * od.w];
                            if s == 1 {
                                let src = &row[(ox_lo as isize + ox_off) as usize
                                    ..(ox_hi as isize + ox_off) as usize];
                                for (a, &v) in arow[ox_lo..ox_hi].iter_mut().zip(src) {
                                    *a += wv * v.as_f64();
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox as isize * s as isize + ox_off) as usize;
                                    arow[ox] += wv * row[ix].as_f64();
                                }
                            }
                        }
                    }
                }
            }
            for (o, &a) in out.plane_mut(n, oc).iter_mut().zip(&acc) {
                *o = T::of(a);
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<T: Real> {
    pub x: Tensor4<T>,
    pub kernel: Tensor4<T>,
    pub bias: Tensor4<T>,
}

/// Adjoint of [`conv2d`] given the upstream gradient `gy`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    kernel: &Tensor4<T>,
    gy: &Tensor4<T>,
    cfg: ConvCfg,
) -> ConvGrads<T> {
    let xd = x.dims();
    let kd = kernel.dims();
    let od = gy.dims();
    let (s, d, p) = (cfg.stride, cfg.dilation as isize, cfg.padding as isize);

    let mut gx = Tensor4::zeros(xd);
    let mut gx_acc = vec![0f64; xd.plane()];
    let mut gw = vec![0f64; kd.len()];
    let mut gb = vec![0f64; kd.n];

    for n in 0..xd.n {
        for oc in 0..kd.n {
            gb[oc] += gy.plane(n, oc).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        for ic in 0..xd.c {
            gx_acc.iter_mut().for_each(|a| *a = 0.0);
            let xp = x.plane(n, ic);
            for oc in 0..kd.n {
                let gp = gy.plane(n, oc);
                for ky in 0..kd.h {
                    let oy_off = ky as isize * d - p;
                    let (oy_lo, oy_hi) = valid_range(od.h, xd.h, oy_off, s);
                    for kx in 0..kd.w {
                        let ox_off = kx as isize * d - p;
                        let (ox_lo, ox_hi) = valid_range(od.w, xd.w, ox_off, s);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        let wv = kernel.get(oc, ic, ky, kx).as_f64();
                        let mut dw = 0f64;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as isize * s as isize + oy_off) as usize;
                            let grow = &gp[oy * od.w..(oy + 1) * od.w];
                            let xrow = &xp[iy * xd.w..(iy + 1) * xd.w];
                            let arow = &mut gx_acc[iy * xd.w..(iy + 1) * xd.w];
                            if s == 1 {
                                let lo = (ox_lo as isize + ox_off) as usize;
                                let hi = (ox_hi as isize + ox_off) as usize;
                                for ((a, &xv), &g) in arow[lo..hi]
                                    .iter_mut()
                                    .zip(&xrow[lo..hi])
                                    .zip(&grow[ox_lo..ox_hi])
                                {
                                    let g = g.as_f64();
                                    *a += wv * g;
                                    dw += g * xv.as_f64();
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox as isize * s as isize + ox_off) as usize;
                                    let g = grow[ox].as_f64();
                                    arow[ix] += wv * g;
                                    dw += g * xrow[ix].as_f64();
                                }
                            }
                        }
                        gw[((oc * kd.c + ic) * kd.h + ky) * kd.w + kx] += dw;
                    }
                }
            }
            for (o, &a) in gx.plane_mut(n, ic).iter_mut().zip(&gx_acc) {
                *o = T::of(a);
            }
        }
    }
    ConvGrads {
        x: gx,
        kernel: Tensor4::from_vec(kd, gw.into_iter().map(T::of).collect()).expect("kernel dims"),
        bias: Tensor4::from_vec([1, kd.n, 1, 1], gb.into_iter().map(T::of).collect())
            .expect("bias dims"),
    }
}

pub fn leaky_relu<T: Real>(x: &Tensor4<T>, slope: f64) -> Tensor4<T> {
    let k = T::of(slope);
    x.map(|v| if v > T::zero() { v } else { k * v })
}

/// The derivative at exactly zero is `slope`.
pub fn leaky_relu_backward<T: Real>(x: &Tensor4<T>, gy: &Tensor4<T>, slope: f64) -> Tensor4<T> {
    let k = T::of(slope);
    let data = x
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { k * g })
        .collect();
    Tensor4::from_vec(x.dims(), data).expect("same dims")
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    x.map(|v| T::of(sigmoid_scalar(v.as_f64())))
}

/// Uses the saved forward output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor4<T>, gy: &Tensor4<T>) -> Tensor4<T> {
    let data = y
        .data()
        .iter()
        .zip(gy.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Tensor4::from_vec(y.dims(), data).expect("same dims")
}

/// Softmax across the channel axis at each (batch, row, col), max-shifted.
pub fn softmax_channels<T: Real>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let d = x.dims();
    if d.c == 0 {
        return Err(Error::ShapeMsg(format!("softmax over zero channels: {d}")));
    }
    let plane = d.plane();
    let mut out = Tensor4::zeros(d);
    let src = x.data();
    let dst = out.data_mut();
    let mut buf = vec![0f64; d.c];
    for n in 0..d.n {
        let base = n * d.c * plane;
        for i in 0..plane {
            let mut m = f64::NEG_INFINITY;
            for c in 0..d.c {
                m = m.max(src[base + c * plane + i].as_f64());
            }
            let mut z = 0.0;
            for (c, b) in buf.iter_mut().enumerate() {
                *b = (src[base + c * plane + i].as_f64() - m).exp();
                z += *b;
            }
            for (c, b) in buf.iter().enumerate() {
                dst[base + c * plane + i] = T::of(b / z);
            }
        }
    }
    Ok(out)
}

pub fn softmax_channels_backward<T: Real>(y: &Tensor4<T>, gy: &Tensor4<T>) -> Tensor4<T> {
    let d = y.dims();
    let plane = d.plane();
    let mut gx = Tensor4::zeros(d);
    let (ys, gs) = (y.data(), gy.data());
    let out = gx.data_mut();
    for n in 0..d.n {
        let base = n * d.c * plane;
        for i in 0..plane {
            let dot: f64 = (0..d.c)
                .map(|c| ys[base + c * plane + i].as_f64() * gs[base + c * plane + i].as_f64())
                .sum();
            for c in 0..d.c {
                let k = base + c * plane + i;
                out[k] = T::of(ys[k].as_f64() * (gs[k].as_f64() - dot));
            }
        }
    }
    gx
}

fn require_spatial(op: &str, d: Dims) -> Result<()> {
    if d.plane() == 0 {
        return Err(Error::ShapeMsg(format!(
            "{op} needs a non-empty spatial plane, got {d}"
        )));
    }
    Ok(())
}

pub fn global_avg_pool<T: Real>(x: &Tensor4<T>) -> Result<Tensor4<T>> {
    let d = x.dims();
    require_spatial("global_avg_pool", d)?;
    Ok(Tensor4::from_fn([d.n, d.c, 1, 1], |n, c, _, _| {
        let s: f64 = x.plane(n, c).iter().map(|v| v.as_f64()).sum();
        T::of(s / d.plane() as f64)
    }))
}

pub fn global_avg_pool_backward<T: Real>(xd: Dims, gy: &Tensor4<T>) -> Tensor4<T> {
    let inv = 1.0 / xd.plane() as f64;
    Tensor4::from_fn(xd, |n, c, _, _| T::of(gy.get(n, c, 0, 0).as_f64() * inv))
}

/// Returns the pooled tensor and, per (batch, channel), the plane offset of
/// the first maximal element in row-major order.
pub fn global_max_pool<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    let d = x.dims();
    require_spatial("global_max_pool", d)?;
    let mut arg = Vec::with_capacity(d.n * d.c);
    let out = Tensor4::from_fn([d.n, d.c, 1, 1], |n, c, _, _| {
        let p = x.plane(n, c);
        let mut best = 0;
        for (i, &v) in p.iter().enumerate().skip(1) {
            if v > p[best] {
                best = i;
            }
        }
        arg.push(best);
        p[best]
    });
    Ok((out, arg))
}

pub fn global_max_pool_backward<T: Real>(
    xd: Dims,
    argmax: &[usize],
    gy: &Tensor4<T>,
) -> Tensor4<T> {
    let mut gx = Tensor4::zeros(xd);
    for n in 0..xd.n {
        for c in 0..xd.c {
            gx.plane_mut(n, c)[argmax[n * xd.c + c]] = gy.get(n, c, 0, 0);
        }
    }
    gx
}

/// Channel 0 holds the per-pixel channel mean, channel 1 the per-pixel
/// channel max. Also returns the first maximal channel per (batch, pixel).
pub fn channel_mean_max<T: Real>(x: &Tensor4<T>) -> Result<(Tensor4<T>, Vec<usize>)> {
    let d = x.dims();
    if d.c == 0 {
        return Err(Error::ShapeMsg(format!(
            "channel_mean_max over zero channels: {d}"
        )));
    }
    let plane = d.plane();
    let mut out = Tensor4::zeros([d.n, 2, d.h, d.w]);
    let mut arg = vec![0usize; d.n * plane];
    for n in 0..d.n {
        for i in 0..plane {
            let mut sum = 0f64;
            let mut best = 0;
            let mut best_v = x.plane(n, 0)[i];
            for c in 0..d.c {
                let v = x.plane(n, c)[i];
                sum += v.as_f64();
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            out.plane_mut(n, 0)[i] = T::of(sum / d.c as f64);
            out.plane_mut(n, 1)[i] = best_v;
            arg[n * plane + i] = best;
        }
    }
    Ok((out, arg))
}

pub fn channel_mean_max_backward<T: Real>(
    xd: Dims,
    argmax: &[usize],
    gy: &Tensor4<T>,
) -> Tensor4<T> {
    let plane = xd.plane();
    let inv = 1.0 / xd.c as f64;
    let mut gx = Tensor4::zeros(xd);
    for n in 0..xd.n {
        for i in 0..plane {
            let gm = T::of(gy.plane(n, 0)[i].as_f64() * inv);
            for c in 0..xd.c {
                gx.plane_mut(n, c)[i] = gm;
            }
            let c = argmax[n * plane + i];
            gx.plane_mut(n, c)[i] = gx.plane_mut(n, c)[i] + gy.plane(n, 1)[i];
        }
    }
    gx
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct PoolCfg {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolCfg {
    pub const fn new(window: usize, stride: usize, padding: usize) -> Self {
        PoolCfg {
            window,
            stride,
            padding,
        }
    }
}

pub fn avg_pool_output_dims(x: Dims, cfg: PoolCfg) -> Result<Dims> {
    if cfg.window == 0 || cfg.stride == 0 {
        return Err(Error::Config(format!(
            "avg_pool2d needs window and stride >= 1, got {cfg:?}"
        )));
    }
    let conv = ConvCfg::new(cfg.stride, 1, cfg.padding);
    match (
        conv_out_len(x.h, cfg.window, conv),
        conv_out_len(x.w, cfg.window, conv),
    ) {
        (Some(h), Some(w)) if h >= 1 && w >= 1 => Ok(Dims::new(x.n, x.c, h, w)),
        _ => Err(Error::Config(format!(
            "avg_pool2d of {x} with {cfg:?} has zero-size output"
        ))),
    }
}

/// Mean over each window. Padded positions count as zeros, so every window
/// is divided by `window²`.
pub fn avg_pool2d<T: Real>(x: &Tensor4<T>, cfg: PoolCfg) -> Result<Tensor4<T>> {
    let xd = x.dims();
    let od = avg_pool_output_dims(xd, cfg)?;
    let inv = 1.0 / (cfg.window * cfg.window) as f64;
    let p = cfg.padding as isize;
    let mut out = Tensor4::zeros(od);
    for n in 0..xd.n {
        for c in 0..xd.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let mut s = 0f64;
                    for ky in 0..cfg.window {
                        let iy = (oy * cfg.stride + ky) as isize - p;
                        if iy < 0 || iy >= xd.h as isize {
                            continue;
                        }
                        for kx in 0..cfg.window {
                            let ix = (ox * cfg.stride + kx) as isize - p;
                            if ix < 0 || ix >= xd.w as isize {
                                continue;
                            }
                            s += src[iy as usize * xd.w + ix as usize].as_f64();
                        }
                    }
                    dst[oy * od.w + ox] = T::of(s * inv);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2d_backward<T: Real>(xd: Dims, gy: &Tensor4<T>, cfg: PoolCfg) -> Tensor4<T> {
    let od = gy.dims();
    let inv = 1.0 / (cfg.window * cfg.window) as f64;
    let p = cfg.padding as isize;
    let mut gx = Tensor4::zeros(xd);
    let mut acc = vec![0f64; xd.plane()];
    for n in 0..xd.n {
        for c in 0..xd.c {
            acc.iter_mut().for_each(|a| *a = 0.0);
            let g = gy.plane(n, c);
            for oy in 0..od.h {
                for ox in 0..od.w {
                    let gv = g[oy * od.w + ox].as_f64() * inv;
                    for ky in 0..cfg.window {
                        let iy = (oy * cfg.stride + ky) as isize - p;
                        if iy < 0 || iy >= xd.h as isize {
                            continue;
                        }
                        for kx in 0..cfg.window {
                            let ix = (ox * cfg.stride + kx) as isize - p;
                            if ix < 0 || ix >= xd.w as isize {
                                continue;
                            }
                            acc[iy as usize * xd.w + ix as usize] += gv;
                        }
                    }
                }
            }
            for (o, &a) in gx.plane_mut(n, c).iter_mut().zip(&acc) {
                *o = T::of(a);
            }
        }
    }
    gx
}

pub fn upsample_nearest<T: Real>(x: &Tensor4<T>, factor: usize) -> Result<Tensor4<T>> {
    if factor == 0 {
        return Err(Error::Config("upsample factor must be >= 1".into()));
    }
    let d = x.dims();
    if factor == 1 {
        return Ok(x.clone());
    }
    Ok(Tensor4::from_fn(
        [d.n, d.c, d.h * factor, d.w * factor],
        |n, c, y, xx| x.get(n, c, y / factor, xx / factor),
    ))
}

pub fn upsample_nearest_backward<T: Real>(xd: Dims, gy: &Tensor4<T>, factor: usize) -> Tensor4<T> {
    if factor == 1 {
        return gy.clone();
    }
    let od = gy.dims();
    let mut acc = vec![0f64; xd.len()];
    for n in 0..od.n {
        for c in 0..od.c {
            let g = gy.plane(n, c);
            let base = (n * xd.c + c) * xd.plane();
            for y in 0..od.h {
                for x in 0..od.w {
                    acc[base + (y / factor) * xd.w + x / factor] += g[y * od.w + x].as_f64();
                }
            }
        }
    }
    Tensor4::from_vec(xd, acc.into_iter().map(T::of).collect()).expect("input dims")
}

pub fn concat_channels<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (ad, bd) = (a.dims(), b.dims());
    if (ad.n, ad.h, ad.w) != (bd.n, bd.h, bd.w) {
        return Err(Error::shape("concat_channels", ad, bd));
    }
    let mut data = Vec::with_capacity(ad.len() + bd.len());
    for n in 0..ad.n {
        for c in 0..ad.c {
            data.extend_from_slice(a.plane(n, c));
        }
        for c in 0..bd.c {
            data.extend_from_slice(b.plane(n, c));
        }
    }
    Tensor4::from_vec([ad.n, ad.c + bd.c, ad.h, ad.w], data)
}

pub fn add<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    if a.dims() != b.dims() {
        return Err(Error::shape("add", a.dims(), b.dims()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| x + y)
        .collect();
    Tensor4::from_vec(a.dims(), data)
}

/// Checks that `b` broadcasts against `a`: equal batch, channel either equal
/// or 1, spatial either equal or `1×1`.
pub fn broadcast_ok(a: Dims, b: Dims) -> bool {
    a.n == b.n && (b.c == a.c || b.c == 1) && ((b.h == a.h && b.w == a.w) || (b.h == 1 && b.w == 1))
}

/// Elementwise product with `b` broadcast over `a`.
pub fn mul_broadcast<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>) -> Result<Tensor4<T>> {
    let (ad, bd) = (a.dims(), b.dims());
    if !broadcast_ok(ad, bd) {
        return Err(Error::shape("mul", ad, bd));
    }
    let mut out = Tensor4::zeros(ad);
    let point = bd.h == 1 && bd.w == 1;
    for n in 0..ad.n {
        for c in 0..ad.c {
            let bc = if bd.c == 1 { 0 } else { c };
            let src = a.plane(n, c);
            let gate = b.plane(n, bc);
            let dst = out.plane_mut(n, c);
            if point {
                let g = gate[0];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o = v * g;
                }
            } else {
                for ((o, &v), &g) in dst.iter_mut().zip(src).zip(gate) {
                    *o = v * g;
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of [`mul_broadcast`] w.r.t. `a` and the (reduced) `b`.
pub fn mul_broadcast_backward<T: Real>(
    a: &Tensor4<T>,
    b: &Tensor4<T>,
    gy: &Tensor4<T>,
) -> (Tensor4<T>, Tensor4<T>) {
    let (ad, bd) = (a.dims(), b.dims());
    let ga = mul_broadcast(gy, b).expect("validated in forward");
    let point = bd.h == 1 && bd.w == 1;
    let mut gb_acc = vec![0f64; bd.len()];
    for n in 0..ad.n {
        for c in 0..ad.c {
            let bc = if bd.c == 1 { 0 } else { c };
            let base = (n * bd.c + bc) * bd.plane();
            let av = a.plane(n, c);
            let gv = gy.plane(n, c);
            if point {
                gb_acc[base] += av
                    .iter()
                    .zip(gv)
                    .map(|(x, g)| x.as_f64() * g.as_f64())
                    .sum::<f64>();
            } else {
                for (i, (x, g)) in av.iter().zip(gv).enumerate() {
                    gb_acc[base + i] += x.as_f64() * g.as_f64();
                }
            }
        }
    }
    let gb = Tensor4::from_vec(bd, gb_acc.into_iter().map(T::of).collect()).expect("b dims");
    (ga, gb)
}
