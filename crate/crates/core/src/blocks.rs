//! Reusable attention and residual building blocks.
//!
//! Each block comes as an owning parameter struct (`*Params`) and a
//! binding struct holding the tape handles of those parameters. Forward
//! functions take bindings, so the same code serves standalone blocks and
//! blocks whose weights live in a [`ParamStore`](crate::network::ParamStore).

use rand::Rng;

use crate::error::{Error, Result};
use crate::ops::ConvCfg;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor4};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Real = f32> {
    /// `[out_c, in_c, k_h, k_w]`
    pub kernel: Tensor4<T>,
    /// `[1, out_c, 1, 1]`
    pub bias: Option<Tensor4<T>>,
    pub cfg: ConvCfg,
}

impl<T: Real> ConvParams<T> {
    pub fn zeros(out_c: usize, in_c: usize, k: usize, bias: bool, cfg: ConvCfg) -> Self {
        ConvParams {
            kernel: Tensor4::zeros([out_c, in_c, k, k]),
            bias: bias.then(|| Tensor4::zeros([1, out_c, 1, 1])),
            cfg,
        }
    }

    /// He-uniform kernel (bound `sqrt(6 / fan_in)`), zero bias.
    pub fn he_uniform(
        out_c: usize,
        in_c: usize,
        k: usize,
        bias: bool,
        cfg: ConvCfg,
        rng: &mut impl Rng,
    ) -> Self {
        let mut p = Self::zeros(out_c, in_c, k, bias, cfg);
        he_fill(&mut p.kernel, rng);
        p
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ConvBinding {
        ConvBinding {
            kernel: tape.leaf(self.kernel.clone()),
            bias: self.bias.as_ref().map(|b| tape.leaf(b.clone())),
            cfg: self.cfg,
        }
    }
}

/// Fills a `[out, in, kh, kw]` kernel from `U(−b, b)` with `b = sqrt(6 / (in·kh·kw))`.
pub fn he_fill<T: Real>(kernel: &mut Tensor4<T>, rng: &mut impl Rng) {
    let d = kernel.dims();
    let fan_in = (d.c * d.h * d.w).max(1) as f64;
    let bound = (6.0 / fan_in).sqrt();
    for v in kernel.data_mut() {
        *v = T::of(rng.random_range(-bound..bound));
    }
}

/// `out·in·k² (+ out)`.
pub const fn conv_param_count(out_c: usize, in_c: usize, k: usize, bias: bool) -> usize {
    out_c * in_c * k * k + if bias { out_c } else { 0 }
}

#[derive(Copy, Clone, Debug)]
pub struct ConvBinding {
    pub kernel: Var,
    pub bias: Option<Var>,
    pub cfg: ConvCfg,
}

impl ConvBinding {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.kernel, self.bias, self.cfg)
    }
}

/// Deep-supervision head: 1×1 class logits, nearest upsampling by `scale`,
/// 3×3 average smoothing, then a 3×3 convolution.
#[derive(Copy, Clone, Debug)]
pub struct SideHeadBinding {
    pub logits: ConvBinding,
    pub conv: ConvBinding,
    pub scale: usize,
}

pub fn side_head<T: Real>(tape: &mut Tape<T>, x: Var, p: &SideHeadBinding) -> Result<Var> {
    let z = p.logits.apply(tape, x)?;
    let z = tape.upsample_nearest(z, p.scale)?;
    let z = tape.avg_pool2d(z, crate::ops::PoolCfg::new(3, 1, 1))?;
    p.conv.apply(tape, z)
}

/// Two 3×3 convolutions with a learned 1×1 projection shortcut:
/// `lrelu(conv_b(lrelu(conv_a(x))) + shortcut(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualUnitParams<T: Real = f32> {
    pub conv_a: ConvParams<T>,
    pub conv_b: ConvParams<T>,
    pub shortcut: ConvParams<T>,
    pub slope: f64,
}

impl<T: Real> ResidualUnitParams<T> {
    pub fn zeros(in_c: usize, out_c: usize, dilation: usize) -> Self {
        ResidualUnitParams {
            conv_a: ConvParams::zeros(out_c, in_c, 3, true, ConvCfg::same(3, dilation)),
            conv_b: ConvParams::zeros(out_c, out_c, 3, true, ConvCfg::same(3, dilation)),
            shortcut: ConvParams::zeros(out_c, in_c, 1, true, ConvCfg::unit()),
            slope: LEAKY_SLOPE,
        }
    }

    pub fn he_uniform(in_c: usize, out_c: usize, dilation: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(in_c, out_c, dilation);
        he_fill(&mut p.conv_a.kernel, rng);
        he_fill(&mut p.conv_b.kernel, rng);
        he_fill(&mut p.shortcut.kernel, rng);
        p
    }

    pub fn param_count(&self) -> usize {
        self.conv_a.param_count() + self.conv_b.param_count() + self.shortcut.param_count()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ResidualBinding {
        ResidualBinding {
            conv_a: self.conv_a.bind(tape),
            conv_b: self.conv_b.bind(tape),
            shortcut: self.shortcut.bind(tape),
            slope: self.slope,
        }
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = residual_unit(&mut tape, xv, &b)?;
        Ok(tape.value(y).clone())
    }
}

pub const fn residual_param_count(in_c: usize, out_c: usize) -> usize {
    conv_param_count(out_c, in_c, 3, true)
        + conv_param_count(out_c, out_c, 3, true)
        + conv_param_count(out_c, in_c, 1, true)
}

#[derive(Copy, Clone, Debug)]
pub struct ResidualBinding {
    pub conv_a: ConvBinding,
    pub conv_b: ConvBinding,
    pub shortcut: ConvBinding,
    pub slope: f64,
}

pub fn residual_unit<T: Real>(tape: &mut Tape<T>, x: Var, p: &ResidualBinding) -> Result<Var> {
    let a = p.conv_a.apply(tape, x)?;
    let a = tape.leaky_relu(a, p.slope);
    let b = p.conv_b.apply(tape, a)?;
    let s = p.shortcut.apply(tape, x)?;
    let sum = tape.add(b, s)?;
    Ok(tape.leaky_relu(sum, p.slope))
}

/// Channel attention (shared two-layer map over average- and max-pooled
/// descriptors) followed by spatial attention over the channel mean/max
/// of the channel-gated features.
#[derive(Clone, Debug, PartialEq)]
pub struct CbamParams<T: Real = f32> {
    /// `C → C/r`, with bias.
    pub w0: ConvParams<T>,
    /// `C/r → C`, without bias.
    pub w1: ConvParams<T>,
    /// `2 → 1`, `k×k`, same padding.
    pub spatial_conv: ConvParams<T>,
    pub ratio: usize,
}

impl<T: Real> CbamParams<T> {
    pub fn zeros(channels: usize, ratio: usize, spatial_kernel: usize) -> Result<Self> {
        if ratio == 0 || !channels.is_multiple_of(ratio) {
            return Err(Error::Config(format!(
                "CBAM reduction ratio {ratio} must divide the channel count {channels}"
            )));
        }
        if spatial_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "CBAM spatial kernel must be odd, got {spatial_kernel}"
            )));
        }
        let hidden = channels / ratio;
        Ok(CbamParams {
            w0: ConvParams::zeros(hidden, channels, 1, true, ConvCfg::unit()),
            w1: ConvParams::zeros(channels, hidden, 1, false, ConvCfg::unit()),
            spatial_conv: ConvParams::zeros(
                1,
                2,
                spatial_kernel,
                true,
                ConvCfg::same(spatial_kernel, 1),
            ),
            ratio,
        })
    }

    pub fn he_uniform(
        channels: usize,
        ratio: usize,
        spatial_kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut p = Self::zeros(channels, ratio, spatial_kernel)?;
        he_fill(&mut p.w0.kernel, rng);
        he_fill(&mut p.w1.kernel, rng);
        he_fill(&mut p.spatial_conv.kernel, rng);
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.w0.kernel.dims().c
    }

    pub fn param_count(&self) -> usize {
        self.w0.param_count() + self.w1.param_count() + self.spatial_conv.param_count()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> CbamBinding {
        CbamBinding {
            w0: self.w0.bind(tape),
            w1: self.w1.bind(tape),
            spatial_conv: self.spatial_conv.bind(tape),
            channels: self.channels(),
        }
    }

    pub fn channel_attention(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = cbam_channel_attention(&mut tape, xv, &b)?;
        Ok(tape.value(y).clone())
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = cbam_apply(&mut tape, xv, &b)?;
        Ok(tape.value(y).clone())
    }
}

/// `2·C²/r + C/r + 2k² + 1`.
pub const fn cbam_param_count(channels: usize, ratio: usize, spatial_kernel: usize) -> usize {
    let hidden = channels / ratio;
    conv_param_count(hidden, channels, 1, true)
        + conv_param_count(channels, hidden, 1, false)
        + conv_param_count(1, 2, spatial_kernel, true)
}

#[derive(Copy, Clone, Debug)]
pub struct CbamBinding {
    pub w0: ConvBinding,
    pub w1: ConvBinding,
    pub spatial_conv: ConvBinding,
    pub channels: usize,
}

fn check_channels<T: Real>(tape: &Tape<T>, x: Var, want: usize, block: &str) -> Result<()> {
    let d = tape.dims(x);
    if d.c != want {
        return Err(Error::ShapeMsg(format!(
            "{block} expects {want} channels, input has dims {d}"
        )));
    }
    Ok(())
}

/// Per-channel gates `[n, C, 1, 1]` in `(0, 1)`.
pub fn cbam_channel_attention<T: Real>(tape: &mut Tape<T>, x: Var, p: &CbamBinding) -> Result<Var> {
    check_channels(tape, x, p.channels, "CBAM")?;
    let avg = tape.global_avg_pool(x)?;
    let max = tape.global_max_pool(x)?;
    let a = p.w0.apply(tape, avg)?;
    let a = p.w1.apply(tape, a)?;
    let m = p.w0.apply(tape, max)?;
    let m = p.w1.apply(tape, m)?;
    let s = tape.add(a, m)?;
    Ok(tape.sigmoid(s))
}

pub fn cbam_apply<T: Real>(tape: &mut Tape<T>, x: Var, p: &CbamBinding) -> Result<Var> {
    let gates = cbam_channel_attention(tape, x, p)?;
    let y = tape.mul(x, gates)?;
    let pooled = tape.channel_mean_max(y)?;
    let s = p.spatial_conv.apply(tape, pooled)?;
    let s = tape.sigmoid(s);
    tape.mul(y, s)
}

/// Channel squeeze and spatial excitation: a 1×1 convolution collapses
/// every channel fiber to a sigmoid gate that rescales that location.
#[derive(Clone, Debug, PartialEq)]
pub struct CsseParams<T: Real = f32> {
    pub squeeze_conv: ConvParams<T>,
}

impl<T: Real> CsseParams<T> {
    pub fn zeros(channels: usize) -> Self {
        CsseParams {
            squeeze_conv: ConvParams::zeros(1, channels, 1, true, ConvCfg::unit()),
        }
    }

    pub fn he_uniform(channels: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(channels);
        he_fill(&mut p.squeeze_conv.kernel, rng);
        p
    }

    pub fn param_count(&self) -> usize {
        self.squeeze_conv.param_count()
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> CsseBinding {
        CsseBinding {
            squeeze_conv: self.squeeze_conv.bind(tape),
        }
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let b = self.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let y = csse_apply(&mut tape, xv, &b)?;
        Ok(tape.value(y).clone())
    }
}

pub const fn csse_param_count(channels: usize) -> usize {
    conv_param_count(1, channels, 1, true)
}

#[derive(Copy, Clone, Debug)]
pub struct CsseBinding {
    pub squeeze_conv: ConvBinding,
}

pub fn csse_apply<T: Real>(tape: &mut Tape<T>, x: Var, p: &CsseBinding) -> Result<Var> {
    let g = p.squeeze_conv.apply(tape, x)?;
    let g = tape.sigmoid(g);
    tape.mul(x, g)
}

/// Two channels holding each pixel's row index and column index.
pub fn coord_channels<T: Real>(h: usize, w: usize) -> Tensor4<T> {
    Tensor4::from_fn([1, 2, h, w], |_, c, y, x| {
        T::of(if c == 0 { y } else { x } as f64)
    })
}
