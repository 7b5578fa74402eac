//! Fixed-layer-set networks with reverse-mode gradients.
//!
//! A [`Network`] is a shared trunk followed by one or more heads. Every head
//! reads the trunk output; head gradients are summed back into the trunk.
//! Images are `C×H×W` tensors processed one sample at a time; batching is
//! done by accumulating gradients over samples.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("layer {layer}: {msg}")]
    Layer { layer: String, msg: String },
    #[error("non-finite activation after {0}")]
    NonFinite(String),
    #[error("tape does not match this network: {0}")]
    StaleTape(String),
    #[error("invalid layer chain: {0}")]
    Topology(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv3x3 { in_ch: usize, out_ch: usize },
    Conv1x1 { in_ch: usize, out_ch: usize },
    LeakyRelu { slope: f64 },
    Softplus,
    Exp,
    Dropout { p: f64 },
}

impl LayerSpec {
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![outputs, inputs], vec![outputs]],
            LayerSpec::Conv3x3 { in_ch, out_ch } => vec![vec![out_ch, in_ch, 3, 3], vec![out_ch]],
            LayerSpec::Conv1x1 { in_ch, out_ch } => vec![vec![out_ch, in_ch], vec![out_ch]],
            _ => Vec::new(),
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv3x3 { in_ch, .. } => in_ch * 9,
            LayerSpec::Conv1x1 { in_ch, .. } => in_ch,
            _ => 0,
        }
    }

    /// Text form used in checkpoint headers, e.g. `conv3x3(1,16)`.
    pub fn encode(&self) -> String {
        match *self {
            LayerSpec::Dense { inputs, outputs } => format!("dense({inputs},{outputs})"),
            LayerSpec::Conv3x3 { in_ch, out_ch } => format!("conv3x3({in_ch},{out_ch})"),
            LayerSpec::Conv1x1 { in_ch, out_ch } => format!("conv1x1({in_ch},{out_ch})"),
            LayerSpec::LeakyRelu { slope } => format!("leaky_relu({slope})"),
            LayerSpec::Softplus => "softplus".to_string(),
            LayerSpec::Exp => "exp".to_string(),
            LayerSpec::Dropout { p } => format!("dropout({p})"),
        }
    }

    pub fn decode(s: &str) -> Option<LayerSpec> {
        let (name, args) = match s.find('(') {
            Some(i) if s.ends_with(')') => (&s[..i], &s[i + 1..s.len() - 1]),
            _ => (s, ""),
        };
        let ints = || -> Option<(usize, usize)> {
            let (a, b) = args.split_once(',')?;
            Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
        };
        Some(match name {
            "dense" => {
                let (inputs, outputs) = ints()?;
                LayerSpec::Dense { inputs, outputs }
            }
            "conv3x3" => {
                let (in_ch, out_ch) = ints()?;
                LayerSpec::Conv3x3 { in_ch, out_ch }
            }
            "conv1x1" => {
                let (in_ch, out_ch) = ints()?;
                LayerSpec::Conv1x1 { in_ch, out_ch }
            }
            "leaky_relu" => LayerSpec::LeakyRelu { slope: args.parse().ok()? },
            "softplus" if args.is_empty() => LayerSpec::Softplus,
            "exp" if args.is_empty() => LayerSpec::Exp,
            "dropout" => LayerSpec::Dropout { p: args.parse().ok()? },
            _ => return None,
        })
    }
}

/// Inputs to `exp` are clamped here so the activation cannot overflow.
pub const EXP_INPUT_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `[weight, bias]` for parametric layers, empty otherwise.
    pub params: Vec<Tensor>,
}

impl Layer {
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Self {
        let shapes = spec.param_shapes();
        let params = if shapes.is_empty() {
            Vec::new()
        } else {
            let bound = (6.0 / spec.fan_in() as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound);
            let w = Tensor::from_fn(&shapes[0], |_| dist.sample(rng));
            vec![w, Tensor::zeros(&shapes[1])]
        };
        Self { spec, params }
    }

    fn name(&self) -> String {
        self.spec.encode()
    }

    fn err(&self, msg: impl Into<String>) -> NnError {
        NnError::Layer { layer: self.name(), msg: msg.into() }
    }

    fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor, Option<Vec<f64>>), NnError> {
        let out = match self.spec {
            LayerSpec::Dense { inputs, outputs } => {
                if x.len() != inputs {
                    return Err(self.err(format!("expected {inputs} inputs, got {}", x.len())));
                }
                let w = self.params[0].data();
                let b = self.params[1].data();
                let xs = x.data();
                let data = (0..outputs)
                    .map(|o| {
                        b[o] + w[o * inputs..(o + 1) * inputs]
                            .iter()
                            .zip(xs)
                            .map(|(a, v)| a * v)
                            .sum::<f64>()
                    })
                    .collect();
                Tensor::new(vec![outputs], data)?
            }
            LayerSpec::Conv3x3 { in_ch, out_ch } => {
                let (c, h, w) = x.chw()?;
                if c != in_ch {
                    return Err(self.err(format!("expected {in_ch} channels, got {c}")));
                }
                conv3x3_forward(x.data(), in_ch, out_ch, h, w, &self.params[0], &self.params[1])?
            }
            LayerSpec::Conv1x1 { in_ch, out_ch } => {
                let (c, h, w) = x.chw()?;
                if c != in_ch {
                    return Err(self.err(format!("expected {in_ch} channels, got {c}")));
                }
                let hw = h * w;
                let wt = self.params[0].data();
                let b = self.params[1].data();
                let mut out = vec![0.0; out_ch * hw];
                for o in 0..out_ch {
                    let dst = &mut out[o * hw..(o + 1) * hw];
                    dst.fill(b[o]);
                    for ci in 0..in_ch {
                        let k = wt[o * in_ch + ci];
                        for (d, s) in dst.iter_mut().zip(&x.data()[ci * hw..(ci + 1) * hw]) {
                            *d += k * s;
                        }
                    }
                }
                Tensor::new(vec![out_ch, h, w], out)?
            }
            LayerSpec::LeakyRelu { slope } => x.map(|v| if v > 0.0 { v } else { slope * v }),
            LayerSpec::Softplus => x.map(softplus),
            LayerSpec::Exp => x.map(|v| v.clamp(-EXP_INPUT_LIMIT, EXP_INPUT_LIMIT).exp()),
            LayerSpec::Dropout { p } => {
                if matches!(mode, Mode::Eval) || p == 0.0 {
                    x.clone()
                } else {
                    let keep = 1.0 / (1.0 - p);
                    let mask: Vec<f64> = (0..x.len())
                        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                        .collect();
                    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                    let out = Tensor::new(x.shape().to_vec(), data)?;
                    return Ok((out, Some(mask)));
                }
            }
        };
        Ok((out, None))
    }

    /// Accumulates parameter gradients into `grads` and returns dL/dx.
    fn backward(
        &self,
        rec: &LayerRecord,
        grad_out: &Tensor,
        grads: &mut [Tensor],
    ) -> Result<Tensor, NnError> {
        rec.output.ensure_same_shape(grad_out)?;
        let x = &rec.input;
        let g = grad_out.data();
        let grad_in = match self.spec {
            LayerSpec::Dense { inputs, outputs } => {
                let w = self.params[0].data();
                let mut gx = vec![0.0; inputs];
                {
                    let (gw, gb) = grads.split_at_mut(1);
                    let gw = gw[0].data_mut();
                    let gb = gb[0].data_mut();
                    for o in 0..outputs {
                        gb[o] += g[o];
                        let row = &mut gw[o * inputs..(o + 1) * inputs];
                        for (i, (gwi, xi)) in row.iter_mut().zip(x.data()).enumerate() {
                            *gwi += g[o] * xi;
                            gx[i] += g[o] * w[o * inputs + i];
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), gx)?
            }
            LayerSpec::Conv3x3 { in_ch, out_ch } => {
                let (_, h, w) = x.chw()?;
                conv3x3_backward(x.data(), g, in_ch, out_ch, h, w, &self.params[0], grads)?
            }
            LayerSpec::Conv1x1 { in_ch, out_ch } => {
                let (_, h, w) = x.chw()?;
                let hw = h * w;
                let wt = self.params[0].data();
                let mut gx = vec![0.0; in_ch * hw];
                let (gw, gb) = grads.split_at_mut(1);
                let gw = gw[0].data_mut();
                let gb = gb[0].data_mut();
                for o in 0..out_ch {
                    let go = &g[o * hw..(o + 1) * hw];
                    gb[o] += go.iter().sum::<f64>();
                    for ci in 0..in_ch {
                        let xs = &x.data()[ci * hw..(ci + 1) * hw];
                        gw[o * in_ch + ci] += go.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        let k = wt[o * in_ch + ci];
                        for (d, s) in gx[ci * hw..(ci + 1) * hw].iter_mut().zip(go) {
                            *d += k * s;
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), gx)?
            }
            LayerSpec::LeakyRelu { slope } => {
                x.zip_map(grad_out, |v, gv| if v > 0.0 { gv } else { slope * gv })?
            }
            LayerSpec::Softplus => x.zip_map(grad_out, |v, gv| gv * sigmoid(v))?,
            LayerSpec::Exp => {
                let d = x
                    .data()
                    .iter()
                    .zip(rec.output.data())
                    .zip(g)
                    .map(|((&v, &y), &gv)| if v.abs() > EXP_INPUT_LIMIT { 0.0 } else { gv * y })
                    .collect();
                Tensor::new(x.shape().to_vec(), d)?
            }
            LayerSpec::Dropout { .. } => match &rec.mask {
                Some(mask) => {
                    let d = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                    Tensor::new(x.shape().to_vec(), d)?
                }
                None => grad_out.clone(),
            },
        };
        Ok(grad_in)
    }
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Zero-padded copy of a `c×h×w` buffer, size `c×(h+2)×(w+2)`.
fn pad_zero(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![0.0; c * ph * pw];
    for ch in 0..c {
        for i in 0..h {
            let dst = (ch * ph + i + 1) * pw + 1;
            out[dst..dst + w].copy_from_slice(&x[(ch * h + i) * w..(ch * h + i + 1) * w]);
        }
    }
    out
}

fn conv3x3_forward(
    x: &[f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor, NnError> {
    let padded = pad_zero(x, in_ch, h, w);
    let (ph, pw) = (h + 2, w + 2);
    let wt = weight.data();
    let mut out = vec![0.0; out_ch * h * w];
    for o in 0..out_ch {
        let dst = &mut out[o * h * w..(o + 1) * h * w];
        dst.fill(bias.data()[o]);
        for c in 0..in_ch {
            let src = &padded[c * ph * pw..(c + 1) * ph * pw];
            for ki in 0..3 {
                for kj in 0..3 {
                    let k = wt[((o * in_ch + c) * 3 + ki) * 3 + kj];
                    for i in 0..h {
                        let row = &src[(i + ki) * pw + kj..(i + ki) * pw + kj + w];
                        for (d, s) in dst[i * w..(i + 1) * w].iter_mut().zip(row) {
                            *d += k * s;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![out_ch, h, w], out)?)
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    x: &[f64],
    g: &[f64],
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    weight: &Tensor,
    grads: &mut [Tensor],
) -> Result<Tensor, NnError> {
    let padded = pad_zero(x, in_ch, h, w);
    let (ph, pw) = (h + 2, w + 2);
    let wt = weight.data();
    let mut gpad = vec![0.0; in_ch * ph * pw];
    let (gw, gb) = grads.split_at_mut(1);
    let gw = gw[0].data_mut();
    let gb = gb[0].data_mut();
    for o in 0..out_ch {
        let go = &g[o * h * w..(o + 1) * h * w];
        gb[o] += go.iter().sum::<f64>();
        for c in 0..in_ch {
            let src = &padded[c * ph * pw..(c + 1) * ph * pw];
            let gsrc = &mut gpad[c * ph * pw..(c + 1) * ph * pw];
            for ki in 0..3 {
                for kj in 0..3 {
                    let widx = ((o * in_ch + c) * 3 + ki) * 3 + kj;
                    let k = wt[widx];
                    let mut acc = 0.0;
                    for i in 0..h {
                        let off = (i + ki) * pw + kj;
                        let grow = &go[i * w..(i + 1) * w];
                        for (s, gv) in src[off..off + w].iter().zip(grow) {
                            acc += s * gv;
                        }
                        for (d, gv) in gsrc[off..off + w].iter_mut().zip(grow) {
                            *d += k * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    // Padding cells are constants; keep only the interior gradient.
    let mut gx = vec![0.0; in_ch * h * w];
    for c in 0..in_ch {
        for i in 0..h {
            let src = (c * ph + i + 1) * pw + 1;
            gx[(c * h + i) * w..(c * h + i + 1) * w].copy_from_slice(&gpad[src..src + w]);
        }
    }
    Ok(Tensor::new(vec![in_ch, h, w], gx)?)
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Inference with dropout masks drawn, for MC-dropout sampling.
    McDropout,
}

#[derive(Debug, Clone)]
struct LayerRecord {
    input: Tensor,
    output: Tensor,
    mask: Option<Vec<f64>>,
}

/// Activation record from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    trunk: Vec<LayerRecord>,
    heads: Vec<Vec<LayerRecord>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub trunk: Vec<Layer>,
    pub heads: Vec<Vec<Layer>>,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(
        trunk: &[LayerSpec],
        heads: &[Vec<LayerSpec>],
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if heads.is_empty() {
            return Err(NnError::Topology("network needs at least one head".into()));
        }
        let net = Self {
            trunk: trunk.iter().map(|s| Layer::new(*s, rng)).collect(),
            heads: heads
                .iter()
                .map(|h| h.iter().map(|s| Layer::new(*s, rng)).collect())
                .collect(),
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks that channel/width counts chain through the layer list.
    pub fn validate(&self) -> Result<(), NnError> {
        let trunk_out = chain_width(&self.trunk, None)?;
        for head in &self.heads {
            chain_width(head, trunk_out)?;
        }
        for layer in self.layers() {
            let shapes = layer.spec.param_shapes();
            if shapes.len() != layer.params.len()
                || shapes.iter().zip(&layer.params).any(|(s, p)| s.as_slice() != p.shape())
            {
                return Err(NnError::Topology(format!("{} has wrong parameter shapes", layer.name())));
            }
            if let LayerSpec::Dropout { p } = layer.spec {
                if !(0.0..1.0).contains(&p) {
                    return Err(NnError::Topology(format!("dropout p={p} outside [0,1)")));
                }
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.trunk.iter().chain(self.heads.iter().flatten())
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| l.params.iter()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut().flatten())
            .flat_map(|l| l.params.iter_mut())
            .collect()
    }

    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Parameter index ranges (into `params()`) owned by each head.
    pub fn head_param_range(&self, head: usize) -> std::ops::Range<usize> {
        let count = |ls: &[Layer]| ls.iter().map(|l| l.params.len()).sum::<usize>();
        let start = count(&self.trunk) + self.heads[..head].iter().map(|h| count(h)).sum::<usize>();
        start..start + count(&self.heads[head])
    }

    /// Runs the network; returns one output per head plus the tape.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<Tensor>, Tape), NnError> {
        let (trunk_out, trunk_rec) = run_layers(&self.trunk, x, mode, rng)?;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (out, rec) = run_layers(head, &trunk_out, mode, rng)?;
            outs.push(out);
            heads.push(rec);
        }
        Ok((outs, Tape { trunk: trunk_rec, heads }))
    }

    /// Eval-mode forward without a tape. Dropout layers are inactive so no
    /// randomness is consumed.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<Tensor>, NnError> {
        let mut rng = NoRng;
        let (outs, _) = self.forward(x, Mode::Eval, &mut rng)?;
        Ok(outs)
    }

    /// Output of trunk layer `tag` (eval mode).
    pub fn trunk_features(&self, x: &Tensor, tag: usize) -> Result<Tensor, NnError> {
        if tag >= self.trunk.len() {
            return Err(NnError::Topology(format!("no trunk layer {tag}")));
        }
        let mut rng = NoRng;
        let (out, _) = run_layers(&self.trunk[..=tag], x, Mode::Eval, &mut rng)?;
        Ok(out)
    }

    /// Reverse pass. `grad_outs` has one entry per head. Parameter gradients
    /// are added into `grads` (aligned with `params()`); returns dL/dx.
    pub fn backward(
        &self,
        tape: &Tape,
        grad_outs: &[Tensor],
        grads: &mut [Tensor],
    ) -> Result<Tensor, NnError> {
        if tape.trunk.len() != self.trunk.len()
            || tape.heads.len() != self.heads.len()
            || tape.heads.iter().zip(&self.heads).any(|(r, h)| r.len() != h.len())
        {
            return Err(NnError::StaleTape("layer count differs".into()));
        }
        if grad_outs.len() != self.heads.len() {
            return Err(NnError::StaleTape(format!(
                "{} head gradients for {} heads",
                grad_outs.len(),
                self.heads.len()
            )));
        }
        let n_params: Vec<usize> = self.layers().map(|l| l.params.len()).collect();
        if grads.len() != n_params.iter().sum::<usize>() {
            return Err(NnError::StaleTape("gradient buffer size differs".into()));
        }

        let trunk_params: usize = self.trunk.iter().map(|l| l.params.len()).sum();
        let (trunk_grads, mut rest) = grads.split_at_mut(trunk_params);
        let mut trunk_grad: Option<Tensor> = None;
        for ((head, rec), g) in self.heads.iter().zip(&tape.heads).zip(grad_outs) {
            let head_params: usize = head.iter().map(|l| l.params.len()).sum();
            let (hg, tail) = rest.split_at_mut(head_params);
            rest = tail;
            let gin = back_layers(head, rec, g, hg)?;
            match trunk_grad.as_mut() {
                Some(t) => t.add_assign(&gin)?,
                None => trunk_grad = Some(gin),
            }
        }
        let trunk_grad = trunk_grad.expect("at least one head");
        back_layers(&self.trunk, &tape.trunk, &trunk_grad, trunk_grads)
    }

    /// Copy with a dropout layer inserted before the last layer of every head.
    pub fn with_dropout_before_last(&self, p: f64) -> Result<Self, NnError> {
        let mut net = self.clone();
        for head in &mut net.heads {
            let at = head.len().saturating_sub(1);
            head.insert(at, Layer { spec: LayerSpec::Dropout { p }, params: Vec::new() });
        }
        net.validate()?;
        Ok(net)
    }
}

fn chain_width(layers: &[Layer], mut width: Option<usize>) -> Result<Option<usize>, NnError> {
    for l in layers {
        let (inp, out) = match l.spec {
            LayerSpec::Dense { inputs, outputs } => (inputs, outputs),
            LayerSpec::Conv3x3 { in_ch, out_ch } | LayerSpec::Conv1x1 { in_ch, out_ch } => {
                (in_ch, out_ch)
            }
            _ => continue,
        };
        // Dense layers flatten, so only conv→conv chains are checkable here.
        if let (Some(w), false) = (width, matches!(l.spec, LayerSpec::Dense { .. })) {
            if w != inp {
                return Err(NnError::Topology(format!("{} after width {w}", l.spec.encode())));
            }
        }
        width = if matches!(l.spec, LayerSpec::Dense { .. }) { None } else { Some(out) };
    }
    Ok(width)
}

fn run_layers<R: Rng + ?Sized>(
    layers: &[Layer],
    x: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, Vec<LayerRecord>), NnError> {
    let mut cur = x.clone();
    let mut recs = Vec::with_capacity(layers.len());
    for layer in layers {
        let (out, mask) = layer.forward(&cur, mode, rng)?;
        if !out.all_finite() {
            return Err(NnError::NonFinite(layer.name()));
        }
        recs.push(LayerRecord { input: cur, output: out.clone(), mask });
        cur = out;
    }
    Ok((cur, recs))
}

fn back_layers(
    layers: &[Layer],
    recs: &[LayerRecord],
    grad_out: &Tensor,
    grads: &mut [Tensor],
) -> Result<Tensor, NnError> {
    let mut offsets = Vec::with_capacity(layers.len());
    let mut acc = 0;
    for l in layers {
        offsets.push(acc);
        acc += l.params.len();
    }
    let mut g = grad_out.clone();
    for (i, (layer, rec)) in layers.iter().zip(recs).enumerate().rev() {
        let slot = &mut grads[offsets[i]..offsets[i] + layer.params.len()];
        g = layer.backward(rec, &g, slot)?;
    }
    Ok(g)
}

/// Placeholder RNG for eval-mode passes, which never draw.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval-mode forward drew a random number")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("eval-mode forward drew a random number")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("eval-mode forward drew a random number")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> Result<(), rand::Error> {
        unreachable!("eval-mode forward drew a random number")
    }
}

/// Largest relative error between backprop gradients and central finite
/// differences of f = Σ outputs (all heads), over every parameter.
///
/// The relative error uses max(|analytic|, |numeric|, 1e-6) as denominator
/// so vanishing gradients do not blow up the ratio.
pub fn finite_diff_check(net: &Network, x: &Tensor, h: f64) -> Result<f64, NnError> {
    let outs = net.predict(x)?;
    let mut rng = NoRng;
    let (_, tape) = net.forward(x, Mode::Eval, &mut rng)?;
    let ones: Vec<Tensor> = outs.iter().map(|o| Tensor::full(o.shape(), 1.0)).collect();
    let mut grads = net.zero_grads();
    net.backward(&tape, &ones, &mut grads)?;

    let total = |n: &Network| -> Result<f64, NnError> {
        Ok(n.predict(x)?.iter().map(Tensor::sum).sum())
    };
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        for k in 0..g.len() {
            let orig = probe.params()[pi].data()[k];
            probe.params_mut()[pi].data_mut()[k] = orig + h;
            let up = total(&probe)?;
            probe.params_mut()[pi].data_mut()[k] = orig - h;
            let down = total(&probe)?;
            probe.params_mut()[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.data()[k];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
