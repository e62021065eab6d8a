//! The full segmentation network: coordinate-augmented stem, three dilated
//! residual encoder stages, CBAM at the bottleneck, three decoder stages
//! with CS-SE gating and skip concatenation, three side heads and a fused
//! output head.
//!
//! Shapes for an `h × w` input (`h`, `w` divisible by 8):
//!
//! ```text
//! input ─┬─ coords ─► stem 3→S              (h,   w)    ── skip for decoder 3
//!        enc1: stride-2 conv S→C1, 2 residual units      (h/2, w/2)  ── skip for decoder 2
//!        enc2: stride-2 conv C1→C2, 2 residual units     (h/4, w/4)  ── skip for decoder 1
//!        enc3: stride-2 conv C2→C3, 2 residual units     (h/8, w/8)
//!        concat(enc3, CBAM(enc3))                         2·C3
//!        dec1: up×2, residual → C2, CS-SE, concat enc2, conv → C2 ─► side1 (×4)
//!        dec2: up×2, residual → C1, CS-SE, concat enc1, conv → C1 ─► side2 (×2)
//!        dec3: up×2, residual → S,  CS-SE, concat stem, conv → S  ─► side3 (×1)
//!        fused = 1×1 conv over concat(side1, side2, side3)
//! ```
//!
//! A side head is `1×1 conv → upsample to full size → 3×3 average pool
//! (stride 1, pad 1) → 3×3 conv`, all producing class logits.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    self, cbam_param_count, conv_param_count, csse_param_count, residual_param_count, CbamBinding,
    ConvBinding, CsseBinding, ResidualBinding, SideHeadBinding,
};
use crate::error::{Error, Result};
use crate::label::NUM_CLASSES;
use crate::ops::ConvCfg;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Dims, Real, Tensor4};

/// Total downsampling factor of the encoder.
pub const SPATIAL_MULTIPLE: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub stem_channels: usize,
    pub enc_channels: [usize; 3],
    pub enc_dilations: [usize; 3],
    pub dec_dilations: [usize; 3],
    pub cbam_ratio: usize,
    pub cbam_kernel: usize,
    pub n_classes: usize,
    pub side_scales: [usize; 3],
    pub slope: f64,
    /// Upper bound enforced by [`build`].
    pub param_budget: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            stem_channels: 16,
            enc_channels: [24, 30, 48],
            enc_dilations: [1, 2, 4],
            dec_dilations: [4, 2, 1],
            cbam_ratio: 8,
            cbam_kernel: 7,
            n_classes: NUM_CLASSES,
            side_scales: [4, 2, 1],
            slope: blocks::LEAKY_SLOPE,
            param_budget: 260_000,
        }
    }
}

impl NetworkSpec {
    /// Narrow variant for desk-scale runs and gradient checks.
    pub fn reduced() -> Self {
        NetworkSpec {
            stem_channels: 8,
            enc_channels: [8, 8, 8],
            cbam_ratio: 4,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes != NUM_CLASSES {
            return Err(Error::Config(format!(
                "n_classes must be {NUM_CLASSES}, got {}",
                self.n_classes
            )));
        }
        if self.stem_channels == 0 || self.enc_channels.contains(&0) {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.enc_dilations.contains(&0) || self.dec_dilations.contains(&0) {
            return Err(Error::Config("dilations must be positive".into()));
        }
        if self.side_scales != [4, 2, 1] {
            return Err(Error::Config(format!(
                "side_scales must be [4, 2, 1] to reach full resolution from the decoder stages, got {:?}",
                self.side_scales
            )));
        }
        if self.cbam_ratio == 0 || !self.enc_channels[2].is_multiple_of(self.cbam_ratio) {
            return Err(Error::Config(format!(
                "cbam_ratio {} must divide the bottleneck width {}",
                self.cbam_ratio, self.enc_channels[2]
            )));
        }
        if self.cbam_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "cbam_kernel must be odd, got {}",
                self.cbam_kernel
            )));
        }
        if !(self.slope > 0.0 && self.slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky slope must lie in (0, 1), got {}",
                self.slope
            )));
        }
        Ok(())
    }

    fn decoder_widths(&self) -> [usize; 3] {
        [
            self.enc_channels[1],
            self.enc_channels[0],
            self.stem_channels,
        ]
    }

    /// Closed-form parameter count of the topology.
    pub fn parameter_count(&self) -> usize {
        let [c1, c2, c3] = self.enc_channels;
        let s = self.stem_channels;
        let k = self.n_classes;
        let mut total = conv_param_count(s, 3, 3, true);
        let mut prev = s;
        for c in [c1, c2, c3] {
            total += conv_param_count(c, prev, 3, true) + 2 * residual_param_count(c, c);
            prev = c;
        }
        total += cbam_param_count(c3, self.cbam_ratio, self.cbam_kernel);
        let mut inp = 2 * c3;
        for w in self.decoder_widths() {
            total += residual_param_count(inp, w)
                + csse_param_count(w)
                + conv_param_count(w, 2 * w, 3, true);
            total += conv_param_count(k, w, 1, true) + conv_param_count(k, k, 3, true);
            inp = w;
        }
        total + conv_param_count(k, 3 * k, 1, true)
    }

    /// Ordered `(name, dims)` of every learnable tensor.
    pub fn layout(&self) -> Vec<(String, Dims)> {
        let mut out = Vec::new();
        let mut conv = |name: String, o: usize, i: usize, k: usize, bias: bool| {
            out.push((format!("{name}.weight"), Dims::new(o, i, k, k)));
            if bias {
                out.push((format!("{name}.bias"), Dims::new(1, o, 1, 1)));
            }
        };
        let residual = |conv: &mut dyn FnMut(String, usize, usize, usize, bool),
                        p: &str,
                        i: usize,
                        o: usize| {
            conv(format!("{p}.conv_a"), o, i, 3, true);
            conv(format!("{p}.conv_b"), o, o, 3, true);
            conv(format!("{p}.shortcut"), o, i, 1, true);
        };
        let s = self.stem_channels;
        let k = self.n_classes;
        conv("stem".into(), s, 3, 3, true);
        let mut prev = s;
        for (e, &c) in self.enc_channels.iter().enumerate() {
            conv(format!("enc{}.down", e + 1), c, prev, 3, true);
            residual(&mut conv, &format!("enc{}.ru1", e + 1), c, c);
            residual(&mut conv, &format!("enc{}.ru2", e + 1), c, c);
            prev = c;
        }
        let c3 = self.enc_channels[2];
        let hidden = c3 / self.cbam_ratio.max(1);
        conv("cbam.w0".into(), hidden, c3, 1, true);
        conv("cbam.w1".into(), c3, hidden, 1, false);
        conv("cbam.spatial".into(), 1, 2, self.cbam_kernel, true);
        let mut inp = 2 * c3;
        for (d, w) in self.decoder_widths().into_iter().enumerate() {
            residual(&mut conv, &format!("dec{}.ru", d + 1), inp, w);
            conv(format!("dec{}.csse", d + 1), 1, w, 1, true);
            conv(format!("dec{}.merge", d + 1), w, 2 * w, 3, true);
            inp = w;
        }
        for (d, w) in self.decoder_widths().into_iter().enumerate() {
            conv(format!("side{}.logits", d + 1), k, w, 1, true);
            conv(format!("side{}.conv", d + 1), k, k, 3, true);
        }
        conv("fuse".into(), k, 3 * k, 1, true);
        out
    }
}

/// The four class-logit maps produced by [`forward`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs<V> {
    pub side1: V,
    pub side2: V,
    pub side3: V,
    pub fused: V,
}

impl<V: Clone> ForwardOutputs<V> {
    /// `[side1, side2, side3, fused]`
    pub fn heads(&self) -> [V; 4] {
        [
            self.side1.clone(),
            self.side2.clone(),
            self.side3.clone(),
            self.fused.clone(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Real> {
    pub value: Tensor4<T>,
    pub grad: Tensor4<T>,
    /// Adam first moment.
    pub m: Tensor4<T>,
    /// Adam second moment.
    pub v: Tensor4<T>,
}

impl<T: Real> ParamEntry<T> {
    pub fn new(value: Tensor4<T>) -> Self {
        let d = value.dims();
        ParamEntry {
            value,
            grad: Tensor4::zeros(d),
            m: Tensor4::zeros(d),
            v: Tensor4::zeros(d),
        }
    }
}

/// Named learnable tensors with gradient buffers and optimizer state.
/// Iteration follows insertion order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Real = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
    step: u64,
}

/// Tape handles for every entry of a [`ParamStore`], in store order.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter store has no entry {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Points `name` at another node, e.g. a probe leaf in a gradient check.
    pub fn rebind(&mut self, name: &str, var: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(v) => {
                *v = var;
                Ok(())
            }
            None => Err(Error::Config(format!(
                "parameter store has no entry {name:?}"
            ))),
        }
    }

    fn conv(&self, prefix: &str, cfg: ConvCfg) -> Result<ConvBinding> {
        let bias_name = format!("{prefix}.bias");
        Ok(ConvBinding {
            kernel: self.var(&format!("{prefix}.weight"))?,
            bias: self.vars.get(&bias_name).copied(),
            cfg,
        })
    }

    fn residual(&self, prefix: &str, dilation: usize, slope: f64) -> Result<ResidualBinding> {
        Ok(ResidualBinding {
            conv_a: self.conv(&format!("{prefix}.conv_a"), ConvCfg::same(3, dilation))?,
            conv_b: self.conv(&format!("{prefix}.conv_b"), ConvCfg::same(3, dilation))?,
            shortcut: self.conv(&format!("{prefix}.shortcut"), ConvCfg::unit())?,
            slope,
        })
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor4<T>) -> Result<()> {
        self.insert_entry(name, ParamEntry::new(value))
    }

    pub fn insert_entry(&mut self, name: impl Into<String>, entry: ParamEntry<T>) -> Result<()> {
        let name = name.into();
        let d = entry.value.dims();
        if entry.grad.dims() != d || entry.m.dims() != d || entry.v.dims() != d {
            return Err(Error::ShapeMsg(format!(
                "buffers of {name:?} do not match its dims {d}"
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Total number of learnable scalars.
    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Records every parameter as a tape leaf.
    pub fn record(&self, tape: &mut Tape<T>) -> BoundParams {
        BoundParams {
            vars: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), tape.leaf(e.value.clone())))
                .collect(),
        }
    }

    /// Adds the tape gradients of the bound leaves into the gradient buffers.
    pub fn accumulate_grads(&mut self, bound: &BoundParams, grads: &Gradients<T>) {
        for (name, var) in bound.iter() {
            if let (Some(e), Some(g)) = (self.entries.get_mut(name), grads.get(var)) {
                for (a, b) in e.grad.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
        }
    }

    /// Converts every buffer to another element type.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            value: e.value.cast(),
                            grad: e.grad.cast(),
                            m: e.m.cast(),
                            v: e.v.cast(),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }

    /// Checks that names and dims agree exactly with `spec`'s layout.
    pub fn check_layout(&self, spec: &NetworkSpec) -> Result<()> {
        let layout = spec.layout();
        for (name, dims) in &layout {
            match self.entries.get(name) {
                None => return Err(Error::Checkpoint(format!("missing entry {name:?}"))),
                Some(e) if e.value.dims() != *dims => {
                    return Err(Error::Checkpoint(format!(
                        "entry {name:?} has dims {}, the network expects {dims}",
                        e.value.dims()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self
            .entries
            .keys()
            .find(|k| !layout.iter().any(|(n, _)| n == *k))
        {
            return Err(Error::Checkpoint(format!("unexpected entry {extra:?}")));
        }
        Ok(())
    }
}

/// Allocates and initialises every parameter of `spec`: He-uniform kernels,
/// zero biases, drawn in layout order from a ChaCha8 stream seeded by `seed`.
pub fn build(spec: &NetworkSpec, seed: u64) -> Result<ParamStore<f32>> {
    spec.validate()?;
    let count = spec.parameter_count();
    if count > spec.param_budget {
        return Err(Error::Config(format!(
            "network has {count} parameters, over the budget of {}",
            spec.param_budget
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, dims) in spec.layout() {
        let mut t = Tensor4::zeros(dims);
        if name.ends_with(".weight") {
            blocks::he_fill(&mut t, &mut rng);
        }
        store.insert(name, t)?;
    }
    debug_assert_eq!(store.parameter_count(), count);
    Ok(store)
}

/// Maps coordinate channels linearly onto `[−1, 1]`; a length-1 axis maps to 0.
pub fn coord_normalize<T: Real>(c: &Tensor4<T>) -> Tensor4<T> {
    let d = c.dims();
    let scale = |v: T, len: usize| {
        if len <= 1 {
            T::zero()
        } else {
            T::of(2.0 * v.as_f64() / (len - 1) as f64 - 1.0)
        }
    };
    Tensor4::from_fn(d, |n, ch, y, x| {
        let v = c.get(n, ch, y, x);
        if ch == 0 {
            scale(v, d.h)
        } else {
            scale(v, d.w)
        }
    })
}

/// Intermediate nodes exposed for structural inspection.
#[derive(Clone, Debug)]
pub struct ForwardTaps {
    /// CS-SE outputs of decoder stages 1..3.
    pub decoder_gated: [Var; 3],
    /// Final outputs of decoder stages 1..3 (after the skip merge); these
    /// feed the side heads.
    pub decoder_out: [Var; 3],
    pub bottleneck: Var,
}

/// Records the network on `tape` for a `[n, 1, h, w]` input node.
pub fn forward<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    params: &BoundParams,
    spec: &NetworkSpec,
) -> Result<ForwardOutputs<Var>> {
    forward_with_taps(tape, x, params, spec).map(|(o, _)| o)
}

pub fn forward_with_taps<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    params: &BoundParams,
    spec: &NetworkSpec,
) -> Result<(ForwardOutputs<Var>, ForwardTaps)> {
    let d = tape.dims(x);
    if d.c != 1
        || d.h == 0
        || d.w == 0
        || !d.h.is_multiple_of(SPATIAL_MULTIPLE)
        || !d.w.is_multiple_of(SPATIAL_MULTIPLE)
    {
        return Err(Error::ShapeMsg(format!(
            "network input must be [n, 1, h, w] with h and w positive multiples of {SPATIAL_MULTIPLE}, got {d}"
        )));
    }
    let slope = spec.slope;

    let coords = coord_normalize(&blocks::coord_channels::<T>(d.h, d.w));
    let coords = Tensor4::stack_batch(&vec![coords; d.n])?;
    let coords = tape.leaf(coords);
    let x0 = tape.concat_channels(x, coords)?;
    let stem = params.conv("stem", ConvCfg::same(3, 1))?.apply(tape, x0)?;
    let stem = tape.leaky_relu(stem, slope);

    let mut skips = vec![stem];
    let mut h = stem;
    for (e, &dil) in spec.enc_dilations.iter().enumerate() {
        let p = format!("enc{}", e + 1);
        h = params
            .conv(&format!("{p}.down"), ConvCfg::new(2, dil, dil))?
            .apply(tape, h)?;
        h = tape.leaky_relu(h, slope);
        h = blocks::residual_unit(tape, h, &params.residual(&format!("{p}.ru1"), dil, slope)?)?;
        h = blocks::residual_unit(tape, h, &params.residual(&format!("{p}.ru2"), dil, slope)?)?;
        skips.push(h);
    }

    let cbam = CbamBinding {
        w0: params.conv("cbam.w0", ConvCfg::unit())?,
        w1: params.conv("cbam.w1", ConvCfg::unit())?,
        spatial_conv: params.conv("cbam.spatial", ConvCfg::same(spec.cbam_kernel, 1))?,
        channels: spec.enc_channels[2],
    };
    let attended = blocks::cbam_apply(tape, h, &cbam)?;
    h = tape.concat_channels(h, attended)?;
    let bottleneck = h;

    let mut gated = Vec::with_capacity(3);
    let mut stage_out = Vec::with_capacity(3);
    for (j, &dil) in spec.dec_dilations.iter().enumerate() {
        let p = format!("dec{}", j + 1);
        h = tape.upsample_nearest(h, 2)?;
        h = blocks::residual_unit(tape, h, &params.residual(&format!("{p}.ru"), dil, slope)?)?;
        let csse = CsseBinding {
            squeeze_conv: params.conv(&format!("{p}.csse"), ConvCfg::unit())?,
        };
        let g = blocks::csse_apply(tape, h, &csse)?;
        gated.push(g);
        let skip = skips[2 - j];
        h = tape.concat_channels(g, skip)?;
        h = params
            .conv(&format!("{p}.merge"), ConvCfg::same(3, dil))?
            .apply(tape, h)?;
        h = tape.leaky_relu(h, slope);
        stage_out.push(h);
    }

    let mut sides = Vec::with_capacity(3);
    for (j, &g) in stage_out.iter().enumerate() {
        let p = format!("side{}", j + 1);
        let head = SideHeadBinding {
            logits: params.conv(&format!("{p}.logits"), ConvCfg::unit())?,
            conv: params.conv(&format!("{p}.conv"), ConvCfg::same(3, 1))?,
            scale: spec.side_scales[j],
        };
        sides.push(blocks::side_head(tape, g, &head)?);
    }
    let cat = tape.concat_channels(sides[0], sides[1])?;
    let cat = tape.concat_channels(cat, sides[2])?;
    let fused = params.conv("fuse", ConvCfg::unit())?.apply(tape, cat)?;

    let outputs = ForwardOutputs {
        side1: sides[0],
        side2: sides[1],
        side3: sides[2],
        fused,
    };
    let taps = ForwardTaps {
        decoder_gated: [gated[0], gated[1], gated[2]],
        decoder_out: [stage_out[0], stage_out[1], stage_out[2]],
        bottleneck,
    };
    Ok((outputs, taps))
}

/// Runs the network on a tensor and returns the four logit maps.
pub fn predict<T: Real>(
    params: &ParamStore<T>,
    spec: &NetworkSpec,
    x: &Tensor4<T>,
) -> Result<ForwardOutputs<Tensor4<T>>> {
    let mut tape = Tape::new();
    let bound = params.record(&mut tape);
    let xv = tape.leaf(x.clone());
    let out = forward(&mut tape, xv, &bound, spec)?;
    Ok(ForwardOutputs {
        side1: tape.value(out.side1).clone(),
        side2: tape.value(out.side2).clone(),
        side3: tape.value(out.side3).clone(),
        fused: tape.value(out.fused).clone(),
    })
}
