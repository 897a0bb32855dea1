//! A small convolutional classifier with semantic-unit analysis.
//!
//! The network is deliberately desk-scale: a few 3×3 valid convolutions
//! with ReLU and 2×2 max-pooling, one fully-connected layer, softmax. It
//! trains by plain SGD with momentum on cross-entropy. Beyond forward and
//! backward, the module can judge each convolutional filter ("unit") as
//! semantic or not: a unit is semantic when some small window of one of
//! its feature maps concentrates enough strong activations — strong at
//! the first layer meaning a uniform local binary pattern, and at deeper
//! layers meaning activation above a calibrated per-layer threshold.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::imagery::{self, Image, ImageryError};
use crate::lbp;
use crate::persist::{self, PersistError};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("network needs at least one conv layer and one class")]
    BadArch,
    #[error("input {got_w}x{got_h} does not match the network's {want_w}x{want_h} input")]
    ShapeMismatch { got_w: usize, got_h: usize, want_w: usize, want_h: usize },
    #[error("input {w}x{h} is too small for the conv/pool stack")]
    InputTooSmall { w: usize, h: usize },
    #[error("label {label} is out of range for {classes} classes")]
    BadLabel { label: usize, classes: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite {context}; aborting the update")]
    NonFinite { context: String },
    #[error("layer index {layer} out of range ({layers} conv layers)")]
    BadLayer { layer: usize, layers: usize },
    #[error("semantic window must be odd and hold at least k cells; got window {window}, k {k}")]
    BadWindow { window: usize, k: usize },
    #[error("calibration needs at least one image")]
    EmptyCalib,
    #[error("unit index {unit} out of range for layer {layer}")]
    BadUnit { layer: usize, unit: usize },
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Imagery(#[from] ImageryError),
    #[error("malformed network file {path}: {reason}")]
    BadFile { path: String, reason: String },
}

/// A `channels × height × width` activation volume.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }

    /// One channel as a flat row-major slice.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }
}

/// One 3×3 convolution layer; weights laid out `out_c × in_c × 9`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub in_c: usize,
    pub out_c: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub const KERNEL: usize = 3;
const K2: usize = KERNEL * KERNEL;

impl ConvLayer {
    fn zeros(in_c: usize, out_c: usize) -> Self {
        Self { in_c, out_c, weights: vec![0.0; out_c * in_c * K2], bias: vec![0.0; out_c] }
    }

    /// The weight block of one output filter.
    fn unit_slice(&self, j: usize) -> &[f64] {
        &self.weights[j * self.in_c * K2..(j + 1) * self.in_c * K2]
    }
}

/// One convolutional filter with its bias — the atomic element exchanged
/// between networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Unit {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// A fixed-input convolutional classifier.
#[derive(Debug, Clone)]
pub struct ConvNet {
    pub input_w: usize,
    pub input_h: usize,
    pub convs: Vec<ConvLayer>,
    /// Whether a 2×2 max-pool follows conv layer `l`.
    pub pool_after: Vec<bool>,
    /// Fully-connected weights, `classes × flattened`.
    pub fc_weights: Vec<f64>,
    pub fc_bias: Vec<f64>,
    pub classes: usize,
}

impl ConvNet {
    /// Builds a net with the given conv stack — `(out_channels, pooled)`
    /// per layer — and seeded scaled-normal weights.
    pub fn with_arch(
        input_w: usize,
        input_h: usize,
        arch: &[(usize, bool)],
        classes: usize,
        seed: u64,
    ) -> Result<Self, NetError> {
        if arch.is_empty() || classes == 0 || arch.iter().any(|&(c, _)| c == 0) {
            return Err(NetError::BadArch);
        }
        let mut convs = Vec::with_capacity(arch.len());
        let mut in_c = 1;
        for &(out_c, _) in arch {
            convs.push(ConvLayer::zeros(in_c, out_c));
            in_c = out_c;
        }
        let pool_after = arch.iter().map(|&(_, p)| p).collect();
        let mut net = Self {
            input_w,
            input_h,
            convs,
            pool_after,
            fc_weights: Vec::new(),
            fc_bias: Vec::new(),
            classes,
        };
        let (c, h, w) = net
            .final_shape()
            .ok_or(NetError::InputTooSmall { w: input_w, h: input_h })?;
        net.fc_weights = vec![0.0; classes * c * h * w];
        net.fc_bias = vec![0.0; classes];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in net.convs.iter_mut() {
            let scale = (2.0 / (layer.in_c * K2) as f64).sqrt();
            for w in layer.weights.iter_mut() {
                *w = scale * gauss(&mut rng);
            }
        }
        let fc_in = c * h * w;
        let scale = (2.0 / fc_in as f64).sqrt();
        for w in net.fc_weights.iter_mut() {
            *w = scale * gauss(&mut rng);
        }
        Ok(net)
    }

    /// The standard desk-scale architecture: three 3×3 conv layers of 8,
    /// 16, and 32 filters with pooling after the first two, then a
    /// fully-connected layer onto the classes.
    pub fn desk(input_w: usize, input_h: usize, classes: usize, seed: u64) -> Result<Self, NetError> {
        Self::with_arch(input_w, input_h, &[(8, true), (16, true), (32, false)], classes, seed)
    }

    /// Spatial shape after each conv (+ pool) stage; `None` when the
    /// input is too small to pass every 3×3 valid convolution.
    fn shapes(&self) -> Option<Vec<(usize, usize)>> {
        let (mut h, mut w) = (self.input_h, self.input_w);
        let mut out = Vec::with_capacity(self.convs.len());
        for (l, _) in self.convs.iter().enumerate() {
            if h < KERNEL || w < KERNEL {
                return None;
            }
            h -= KERNEL - 1;
            w -= KERNEL - 1;
            if self.pool_after[l] {
                h /= 2;
                w /= 2;
                if h == 0 || w == 0 {
                    return None;
                }
            }
            out.push((h, w));
        }
        Some(out)
    }

    fn final_shape(&self) -> Option<(usize, usize, usize)> {
        let shapes = self.shapes()?;
        let (h, w) = *shapes.last()?;
        Some((self.convs.last()?.out_c, h, w))
    }

    /// Number of conv units on layer `l`.
    pub fn units(&self, layer: usize) -> Result<usize, NetError> {
        self.convs
            .get(layer)
            .map(|c| c.out_c)
            .ok_or(NetError::BadLayer { layer, layers: self.convs.len() })
    }

    /// Total conv units across all layers.
    pub fn total_units(&self) -> usize {
        self.convs.iter().map(|c| c.out_c).sum()
    }

    /// A copy of unit `j` on conv layer `layer`.
    pub fn unit(&self, layer: usize, j: usize) -> Result<Unit, NetError> {
        let conv = self
            .convs
            .get(layer)
            .ok_or(NetError::BadLayer { layer, layers: self.convs.len() })?;
        if j >= conv.out_c {
            return Err(NetError::BadUnit { layer, unit: j });
        }
        Ok(Unit { weights: conv.unit_slice(j).to_vec(), bias: conv.bias[j] })
    }

    /// Replaces unit `j` on conv layer `layer`.
    pub fn set_unit(&mut self, layer: usize, j: usize, unit: &Unit) -> Result<(), NetError> {
        let layers = self.convs.len();
        let conv = self.convs.get_mut(layer).ok_or(NetError::BadLayer { layer, layers })?;
        if j >= conv.out_c {
            return Err(NetError::BadUnit { layer, unit: j });
        }
        let want = conv.in_c * K2;
        if unit.weights.len() != want {
            return Err(NetError::BadArch);
        }
        let start = j * want;
        conv.weights[start..start + want].copy_from_slice(&unit.weights);
        conv.bias[j] = unit.bias;
        Ok(())
    }

    /// Visits every parameter in a fixed order.
    fn for_each_param(&mut self, mut f: impl FnMut(&mut f64)) {
        for conv in self.convs.iter_mut() {
            for w in conv.weights.iter_mut() {
                f(w);
            }
            for b in conv.bias.iter_mut() {
                f(b);
            }
        }
        for w in self.fc_weights.iter_mut() {
            f(w);
        }
        for b in self.fc_bias.iter_mut() {
            f(b);
        }
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.weights.len() + c.bias.len()).sum::<usize>()
            + self.fc_weights.len()
            + self.fc_bias.len()
    }
}

fn gauss(rng: &mut impl Rng) -> f64 {
    // Box–Muller from two uniforms; the clamp avoids ln(0).
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Everything `forward` produces: per-layer pre-activation and
/// post-activation (ReLU applied) maps at full conv resolution, plus the
/// class probabilities.
#[derive(Debug, Clone)]
pub struct Forward {
    pub pre: Vec<FeatureMap>,
    pub post: Vec<FeatureMap>,
    pub probs: Vec<f64>,
}

struct Trace {
    /// Input to each conv layer (after any previous pooling).
    conv_in: Vec<FeatureMap>,
    pre: Vec<FeatureMap>,
    post: Vec<FeatureMap>,
    /// Pooled output and argmax switches for layers that pool.
    pooled: Vec<Option<(FeatureMap, Vec<usize>)>>,
    flat: Vec<f64>,
    probs: Vec<f64>,
}

fn conv_forward(layer: &ConvLayer, input: &FeatureMap) -> FeatureMap {
    let oh = input.height - (KERNEL - 1);
    let ow = input.width - (KERNEL - 1);
    let mut out = FeatureMap::zeros(layer.out_c, oh, ow);
    for oc in 0..layer.out_c {
        let w_oc = layer.unit_slice(oc);
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = layer.bias[oc];
                for ic in 0..input.channels {
                    let w = &w_oc[ic * K2..(ic + 1) * K2];
                    let base = (ic * input.height + y) * input.width + x;
                    for dy in 0..KERNEL {
                        let row = &input.data[base + dy * input.width..];
                        acc += w[dy * KERNEL] * row[0]
                            + w[dy * KERNEL + 1] * row[1]
                            + w[dy * KERNEL + 2] * row[2];
                    }
                }
                *out.at_mut(oc, y, x) = acc;
            }
        }
    }
    out
}

fn pool_forward(input: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let oh = input.height / 2;
    let ow = input.width / 2;
    let mut out = FeatureMap::zeros(input.channels, oh, ow);
    let mut switches = vec![0usize; input.channels * oh * ow];
    for c in 0..input.channels {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let yy = 2 * y + dy;
                        let xx = 2 * x + dx;
                        let v = input.at(c, yy, xx);
                        if v > best {
                            best = v;
                            arg = (c * input.height + yy) * input.width + xx;
                        }
                    }
                }
                *out.at_mut(c, y, x) = best;
                switches[(c * oh + y) * ow + x] = arg;
            }
        }
    }
    (out, switches)
}

fn image_map(img: &Image) -> FeatureMap {
    FeatureMap { channels: 1, height: img.height(), width: img.width(), data: img.data().to_vec() }
}

fn run_forward(net: &ConvNet, img: &Image) -> Result<Trace, NetError> {
    if img.width() != net.input_w || img.height() != net.input_h {
        return Err(NetError::ShapeMismatch {
            got_w: img.width(),
            got_h: img.height(),
            want_w: net.input_w,
            want_h: net.input_h,
        });
    }
    let mut x = image_map(img);
    let mut conv_in = Vec::with_capacity(net.convs.len());
    let mut pre = Vec::with_capacity(net.convs.len());
    let mut post = Vec::with_capacity(net.convs.len());
    let mut pooled = Vec::with_capacity(net.convs.len());
    for (l, conv) in net.convs.iter().enumerate() {
        if x.height < KERNEL || x.width < KERNEL {
            return Err(NetError::InputTooSmall { w: net.input_w, h: net.input_h });
        }
        conv_in.push(x.clone());
        let z = conv_forward(conv, &x);
        let mut a = z.clone();
        for v in a.data.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        pre.push(z);
        if net.pool_after[l] {
            let (p, sw) = pool_forward(&a);
            post.push(a);
            x = p.clone();
            pooled.push(Some((p, sw)));
        } else {
            x = a.clone();
            post.push(a);
            pooled.push(None);
        }
    }
    let flat = x.data.clone();
    let mut logits = net.fc_bias.clone();
    for (k, logit) in logits.iter_mut().enumerate() {
        let row = &net.fc_weights[k * flat.len()..(k + 1) * flat.len()];
        *logit += row.iter().zip(&flat).map(|(w, v)| w * v).sum::<f64>();
    }
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = probs.iter().sum();
    for p in probs.iter_mut() {
        *p /= z;
    }
    Ok(Trace { conv_in, pre, post, pooled, flat, probs })
}

/// Runs the network on one image.
pub fn forward(net: &ConvNet, img: &Image) -> Result<Forward, NetError> {
    let t = run_forward(net, img)?;
    Ok(Forward { pre: t.pre, post: t.post, probs: t.probs })
}

/// Gradients in the same shapes as the network parameters.
#[derive(Debug, Clone)]
pub struct Grads {
    pub conv_w: Vec<Vec<f64>>,
    pub conv_b: Vec<Vec<f64>>,
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

impl Grads {
    fn zeros(net: &ConvNet) -> Self {
        Self {
            conv_w: net.convs.iter().map(|c| vec![0.0; c.weights.len()]).collect(),
            conv_b: net.convs.iter().map(|c| vec![0.0; c.bias.len()]).collect(),
            fc_w: vec![0.0; net.fc_weights.len()],
            fc_b: vec![0.0; net.fc_bias.len()],
        }
    }

    fn scale(&mut self, s: f64) {
        for g in self.conv_w.iter_mut().flatten() {
            *g *= s;
        }
        for g in self.conv_b.iter_mut().flatten() {
            *g *= s;
        }
        for g in self.fc_w.iter_mut() {
            *g *= s;
        }
        for g in self.fc_b.iter_mut() {
            *g *= s;
        }
    }

    fn add(&mut self, other: &Grads) {
        let pairs = self
            .conv_w
            .iter_mut()
            .flatten()
            .zip(other.conv_w.iter().flatten())
            .chain(self.conv_b.iter_mut().flatten().zip(other.conv_b.iter().flatten()))
            .chain(self.fc_w.iter_mut().zip(other.fc_w.iter()))
            .chain(self.fc_b.iter_mut().zip(other.fc_b.iter()));
        for (a, b) in pairs {
            *a += *b;
        }
    }

    fn is_finite(&self) -> bool {
        self.conv_w.iter().flatten().all(|g| g.is_finite())
            && self.conv_b.iter().flatten().all(|g| g.is_finite())
            && self.fc_w.iter().all(|g| g.is_finite())
            && self.fc_b.iter().all(|g| g.is_finite())
    }
}

fn backward_one(net: &ConvNet, trace: &Trace, label: usize) -> (Grads, f64) {
    let mut g = Grads::zeros(net);
    let loss = -trace.probs[label].max(1e-300).ln();
    // Softmax + cross-entropy: dlogit = p - onehot.
    let mut dlogits = trace.probs.clone();
    dlogits[label] -= 1.0;
    let flat_len = trace.flat.len();
    let mut dflat = vec![0.0; flat_len];
    for (k, dl) in dlogits.iter().enumerate() {
        g.fc_b[k] = *dl;
        let row = &net.fc_weights[k * flat_len..(k + 1) * flat_len];
        let grow = &mut g.fc_w[k * flat_len..(k + 1) * flat_len];
        for i in 0..flat_len {
            grow[i] = dl * trace.flat[i];
            dflat[i] += dl * row[i];
        }
    }
    // Walk the conv stack backwards.
    let mut dx = dflat;
    for l in (0..net.convs.len()).rev() {
        // Through the pool, if any: route each pooled gradient to its argmax.
        let mut dpost = vec![0.0; trace.post[l].data.len()];
        match &trace.pooled[l] {
            Some((pooledmap, switches)) => {
                debug_assert_eq!(dx.len(), pooledmap.data.len());
                for (i, &arg) in switches.iter().enumerate() {
                    dpost[arg] += dx[i];
                }
            }
            None => dpost.copy_from_slice(&dx),
        }
        // Through the ReLU.
        for (d, z) in dpost.iter_mut().zip(&trace.pre[l].data) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        // Through the convolution.
        let conv = &net.convs[l];
        let input = &trace.conv_in[l];
        let (oh, ow) = (trace.pre[l].height, trace.pre[l].width);
        let mut dinput = vec![0.0; input.data.len()];
        for oc in 0..conv.out_c {
            let w_oc = conv.unit_slice(oc);
            let gw_oc = &mut g.conv_w[l][oc * conv.in_c * K2..(oc + 1) * conv.in_c * K2];
            let mut gb = 0.0;
            for y in 0..oh {
                for x in 0..ow {
                    let d = dpost[(oc * oh + y) * ow + x];
                    if d == 0.0 {
                        continue;
                    }
                    gb += d;
                    for ic in 0..input.channels {
                        let base = (ic * input.height + y) * input.width + x;
                        for dy in 0..KERNEL {
                            for dxk in 0..KERNEL {
                                let ii = base + dy * input.width + dxk;
                                gw_oc[ic * K2 + dy * KERNEL + dxk] += d * input.data[ii];
                                dinput[ii] += d * w_oc[ic * K2 + dy * KERNEL + dxk];
                            }
                        }
                    }
                }
            }
            g.conv_b[l][oc] += gb;
        }
        dx = dinput;
    }
    (g, loss)
}

/// Mean cross-entropy loss and mean parameter gradients over a batch.
pub fn gradients(net: &ConvNet, batch: &[(&Image, usize)]) -> Result<(Grads, f64), NetError> {
    if batch.is_empty() {
        return Err(NetError::EmptyBatch);
    }
    for &(_, label) in batch {
        if label >= net.classes {
            return Err(NetError::BadLabel { label, classes: net.classes });
        }
    }
    let parts: Vec<(Grads, f64)> = batch
        .par_iter()
        .map(|&(img, label)| {
            let trace = run_forward(net, img)?;
            Ok(backward_one(net, &trace, label))
        })
        .collect::<Result<_, NetError>>()?;
    let mut total = Grads::zeros(net);
    let mut loss = 0.0;
    for (g, l) in &parts {
        total.add(g);
        loss += l;
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    loss *= inv;
    Ok((total, loss))
}

/// Per-parameter SGD velocity; zero it whenever the network's units are
/// replaced from outside so stale momentum does not drag the new filters.
#[derive(Debug, Clone)]
pub struct Momentum {
    pub conv_w: Vec<Vec<f64>>,
    pub conv_b: Vec<Vec<f64>>,
    pub fc_w: Vec<f64>,
    pub fc_b: Vec<f64>,
}

impl Momentum {
    pub fn zeros(net: &ConvNet) -> Self {
        let g = Grads::zeros(net);
        Self { conv_w: g.conv_w, conv_b: g.conv_b, fc_w: g.fc_w, fc_b: g.fc_b }
    }

    pub fn reset(&mut self) {
        for v in self.conv_w.iter_mut().flatten() {
            *v = 0.0;
        }
        for v in self.conv_b.iter_mut().flatten() {
            *v = 0.0;
        }
        for v in self.fc_w.iter_mut() {
            *v = 0.0;
        }
        for v in self.fc_b.iter_mut() {
            *v = 0.0;
        }
    }
}

/// One SGD step with momentum over the batch: computes mean gradients,
/// refuses non-finite ones, and updates the parameters in place. Returns
/// the mean loss measured before the update.
pub fn backward_sgd(
    net: &mut ConvNet,
    batch: &[(&Image, usize)],
    lr: f64,
    momentum: f64,
    state: &mut Momentum,
) -> Result<f64, NetError> {
    let (grads, loss) = gradients(net, batch)?;
    if !loss.is_finite() {
        return Err(NetError::NonFinite { context: "loss".into() });
    }
    if !grads.is_finite() {
        return Err(NetError::NonFinite { context: "gradients".into() });
    }
    for (l, conv) in net.convs.iter_mut().enumerate() {
        for ((w, v), g) in
            conv.weights.iter_mut().zip(state.conv_w[l].iter_mut()).zip(&grads.conv_w[l])
        {
            *v = momentum * *v - lr * g;
            *w += *v;
        }
        for ((b, v), g) in conv.bias.iter_mut().zip(state.conv_b[l].iter_mut()).zip(&grads.conv_b[l])
        {
            *v = momentum * *v - lr * g;
            *b += *v;
        }
    }
    for ((w, v), g) in net.fc_weights.iter_mut().zip(state.fc_w.iter_mut()).zip(&grads.fc_w) {
        *v = momentum * *v - lr * g;
        *w += *v;
    }
    for ((b, v), g) in net.fc_bias.iter_mut().zip(state.fc_b.iter_mut()).zip(&grads.fc_b) {
        *v = momentum * *v - lr * g;
        *b += *v;
    }
    Ok(loss)
}

/// A calibrated semantic threshold for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauReport {
    pub tau: f64,
    /// Set when every unit's peak activation was identical, which makes
    /// the two-group split meaningless.
    pub degenerate: bool,
}

/// Splits scalars into two groups by 1-D 2-means (centers seeded at the
/// extremes, up to 100 refinements) and returns the smallest member of
/// the higher-mean group. Always one of the inputs.
pub fn two_group_threshold(values: &[f64]) -> TauReport {
    let lo0 = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi0 = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi0 - lo0 == 0.0 {
        return TauReport { tau: hi0, degenerate: true };
    }
    let (mut lo, mut hi) = (lo0, hi0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let (mut sl, mut nl, mut sh, mut nh) = (0.0, 0usize, 0.0, 0usize);
        for &v in values {
            if v > mid {
                sh += v;
                nh += 1;
            } else {
                sl += v;
                nl += 1;
            }
        }
        if nl == 0 || nh == 0 {
            break;
        }
        let (nlo, nhi) = (sl / nl as f64, sh / nh as f64);
        if nlo == lo && nhi == hi {
            break;
        }
        lo = nlo;
        hi = nhi;
    }
    let mid = 0.5 * (lo + hi);
    let tau = values
        .iter()
        .cloned()
        .filter(|&v| v > mid)
        .fold(f64::INFINITY, f64::min);
    TauReport { tau, degenerate: false }
}

/// Calibrates the semantic threshold of conv layer `layer`: each unit's
/// peak activation over the calibration images is collected, the peaks
/// are split into two groups, and the threshold is the smallest peak of
/// the higher group.
pub fn calibrate_tau(
    net: &ConvNet,
    calib: &[&Image],
    layer: usize,
) -> Result<TauReport, NetError> {
    if calib.is_empty() {
        return Err(NetError::EmptyCalib);
    }
    let units = net.units(layer)?;
    let mut maxima = vec![f64::NEG_INFINITY; units];
    for img in calib {
        let t = run_forward(net, img)?;
        let map = &t.post[layer];
        for (j, peak) in maxima.iter_mut().enumerate() {
            for &v in map.channel(j) {
                if v > *peak {
                    *peak = v;
                }
            }
        }
    }
    Ok(two_group_threshold(&maxima))
}

/// Default semantic window side.
pub const SEMANTIC_WINDOW: usize = 5;
/// Default number of strong activations a window must hold.
pub const SEMANTIC_K: usize = 10;

/// Per-unit semantic verdicts, one boolean list per conv layer.
#[derive(Debug, Clone)]
pub struct SemanticVerdict {
    pub layers: Vec<Vec<bool>>,
    pub taus: Vec<f64>,
    pub window: usize,
    pub k: usize,
}

/// Fraction of conv units judged semantic.
pub fn semantic_fraction(verdict: &SemanticVerdict) -> f64 {
    let total: usize = verdict.layers.iter().map(|l| l.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let hits: usize = verdict.layers.iter().flatten().filter(|&&b| b).count();
    hits as f64 / total as f64
}

/// Does any clipped `window`-square centered on a strong cell count at
/// least `k` strong cells? Uses a summed-area table so each map is one
/// linear pass.
fn window_hit(strong: &[bool], h: usize, w: usize, window: usize, k: usize) -> bool {
    let half = window / 2;
    let mut sat = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1]
                + sat[(y + 1) * (w + 1) + x]
                - sat[y * (w + 1) + x]
                + u32::from(strong[y * w + x]);
        }
    }
    let total = sat[h * (w + 1) + w] as usize;
    if total < k {
        return false;
    }
    for cy in 0..h {
        let y0 = cy.saturating_sub(half);
        let y1 = (cy + half).min(h - 1);
        for cx in 0..w {
            let x0 = cx.saturating_sub(half);
            let x1 = (cx + half).min(w - 1);
            let count = sat[(y1 + 1) * (w + 1) + x1 + 1] + sat[y0 * (w + 1) + x0]
                - sat[y0 * (w + 1) + x1 + 1]
                - sat[(y1 + 1) * (w + 1) + x0];
            if count as usize >= k {
                return true;
            }
        }
    }
    false
}

/// Judges every conv unit with a custom window and count.
pub fn semantic_units_with(
    net: &ConvNet,
    calib: &[&Image],
    taus: &[f64],
    window: usize,
    k: usize,
) -> Result<SemanticVerdict, NetError> {
    if window % 2 == 0 || k > window * window || window == 0 || k == 0 {
        return Err(NetError::BadWindow { window, k });
    }
    if calib.is_empty() {
        return Err(NetError::EmptyCalib);
    }
    if taus.len() != net.convs.len() {
        return Err(NetError::BadLayer { layer: taus.len(), layers: net.convs.len() });
    }
    let traces: Vec<Trace> =
        calib.iter().map(|img| run_forward(net, img)).collect::<Result<_, _>>()?;
    let layers = net
        .convs
        .iter()
        .enumerate()
        .map(|(l, conv)| {
            (0..conv.out_c)
                .into_par_iter()
                .map(|j| {
                    traces.iter().any(|t| {
                        let map = &t.post[l];
                        let (h, w) = (map.height, map.width);
                        let plane = map.channel(j);
                        let strong: Vec<bool> = if l == 0 {
                            // First layer: a location is strong when its
                            // local binary pattern is uniform; the border
                            // ring has no full neighborhood.
                            (0..h * w)
                                .map(|i| {
                                    let (y, x) = (i / w, i % w);
                                    y > 0
                                        && x > 0
                                        && y + 1 < h
                                        && x + 1 < w
                                        && lbp::is_uniform(lbp::code_at(plane, w, x, y))
                                })
                                .collect()
                        } else {
                            plane.iter().map(|&v| v > taus[l]).collect()
                        };
                        window_hit(&strong, h, w, window, k)
                    })
                })
                .collect::<Vec<bool>>()
        })
        .collect();
    Ok(SemanticVerdict { layers, taus: taus.to_vec(), window, k })
}

/// Judges every conv unit with the standard 5×5 window and k = 10.
pub fn semantic_units(
    net: &ConvNet,
    calib: &[&Image],
    taus: &[f64],
) -> Result<SemanticVerdict, NetError> {
    semantic_units_with(net, calib, taus, SEMANTIC_WINDOW, SEMANTIC_K)
}

/// Writes `net` as `CNN1`: magic, input size, conv stack descriptor,
/// class count, then every parameter as 64-bit reals in layer order.
pub fn save_net(net: &ConvNet, path: &Path) -> Result<(), NetError> {
    let file = File::create(path).map_err(PersistError::from)?;
    let mut w = BufWriter::new(file);
    persist::write_magic(&mut w, "CNN1")?;
    persist::write_u32(&mut w, net.input_w as u32)?;
    persist::write_u32(&mut w, net.input_h as u32)?;
    persist::write_u32(&mut w, net.convs.len() as u32)?;
    for (l, conv) in net.convs.iter().enumerate() {
        persist::write_u32(&mut w, conv.in_c as u32)?;
        persist::write_u32(&mut w, conv.out_c as u32)?;
        persist::write_u32(&mut w, u32::from(net.pool_after[l]))?;
    }
    persist::write_u32(&mut w, net.classes as u32)?;
    for conv in &net.convs {
        persist::write_f64_slice(&mut w, &conv.weights)?;
        persist::write_f64_slice(&mut w, &conv.bias)?;
    }
    persist::write_f64_slice(&mut w, &net.fc_weights)?;
    persist::write_f64_slice(&mut w, &net.fc_bias)?;
    Ok(())
}

/// Reads a `CNN1` file written by [`save_net`].
pub fn load_net(path: &Path) -> Result<ConvNet, NetError> {
    let file = File::open(path).map_err(PersistError::from)?;
    let mut r = BufReader::new(file);
    persist::read_magic(&mut r, "CNN1")?;
    let input_w = persist::read_u32(&mut r)? as usize;
    let input_h = persist::read_u32(&mut r)? as usize;
    let n = persist::read_u32(&mut r)? as usize;
    let bad = |reason: &str| NetError::BadFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if n == 0 {
        return Err(bad("no conv layers"));
    }
    let mut convs = Vec::with_capacity(n);
    let mut pool_after = Vec::with_capacity(n);
    let mut expect_in = 1usize;
    for _ in 0..n {
        let in_c = persist::read_u32(&mut r)? as usize;
        let out_c = persist::read_u32(&mut r)? as usize;
        let pool = persist::read_u32(&mut r)?;
        if in_c != expect_in || out_c == 0 {
            return Err(bad("inconsistent conv channel chain"));
        }
        convs.push(ConvLayer::zeros(in_c, out_c));
        pool_after.push(pool != 0);
        expect_in = out_c;
    }
    let classes = persist::read_u32(&mut r)? as usize;
    if classes == 0 {
        return Err(bad("zero classes"));
    }
    let mut net = ConvNet {
        input_w,
        input_h,
        convs,
        pool_after,
        fc_weights: Vec::new(),
        fc_bias: Vec::new(),
        classes,
    };
    let (c, h, w) = net.final_shape().ok_or_else(|| bad("input too small for stack"))?;
    for conv in net.convs.iter_mut() {
        conv.weights = persist::read_f64_vec(&mut r, conv.out_c * conv.in_c * K2)?;
        conv.bias = persist::read_f64_vec(&mut r, conv.out_c)?;
    }
    net.fc_weights = persist::read_f64_vec(&mut r, classes * c * h * w)?;
    net.fc_bias = persist::read_f64_vec(&mut r, classes)?;
    Ok(net)
}

/// Writes each unit's post-activation map for `img` as a PGM under `dir`
/// (named `layer{l}_unit{j}.pgm`, values rescaled to the unit range) and
/// returns the paths.
pub fn dump_activations(net: &ConvNet, img: &Image, dir: &Path) -> Result<Vec<PathBuf>, NetError> {
    let f = forward(net, img)?;
    std::fs::create_dir_all(dir).map_err(PersistError::from)?;
    let mut out = Vec::new();
    for (l, map) in f.post.iter().enumerate() {
        for j in 0..map.channels {
            let plane = map.channel(j);
            let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            let vis = Image::from_fn(map.width, map.height, |x, y| {
                (plane[y * map.width + x] - lo) / span
            })?;
            let path = dir.join(format!("layer{l}_unit{j}.pgm"));
            imagery::save_pgm(&vis, &path)?;
            out.push(path);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn zero_weight_net_gives_uniform_probabilities() {
        let mut net = ConvNet::desk(32, 32, 5, 1).unwrap();
        net.for_each_param(|p| *p = 0.0);
        let img = tiny_image(32, 32, 2);
        let f = forward(&net, &img).unwrap();
        for p in &f.probs {
            assert!((p - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_sum_to_one_for_random_nets() {
        for seed in 0..4 {
            let net = ConvNet::desk(24, 24, 4, seed).unwrap();
            let img = tiny_image(24, 24, 90 + seed);
            let f = forward(&net, &img).unwrap();
            let s: f64 = f.probs.iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "sum = {s}");
            assert!(f.probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn identity_filter_reproduces_the_input_interior() {
        let mut net = ConvNet::with_arch(10, 9, &[(1, false)], 2, 3).unwrap();
        net.for_each_param(|p| *p = 0.0);
        let mut unit = net.unit(0, 0).unwrap();
        unit.weights[4] = 1.0; // center tap of the 3×3 kernel
        net.set_unit(0, 0, &unit).unwrap();
        let img = tiny_image(10, 9, 7);
        let f = forward(&net, &img).unwrap();
        let map = &f.post[0];
        assert_eq!((map.height, map.width), (7, 8));
        for y in 0..map.height {
            for x in 0..map.width {
                let want = img.get(x + 1, y + 1).max(0.0);
                assert!((map.at(0, y, x) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        let mut net = ConvNet::with_arch(8, 8, &[(3, true), (4, false)], 3, 11).unwrap();
        let imgs: Vec<Image> = (0..3).map(|i| tiny_image(8, 8, 40 + i)).collect();
        let batch: Vec<(&Image, usize)> = imgs.iter().zip([0usize, 1, 2]).collect();
        let (grads, _) = gradients(&net, &batch).unwrap();
        let flat_grads: Vec<f64> = grads
            .conv_w
            .iter()
            .flatten()
            .chain(grads.conv_b.iter().flatten())
            .chain(grads.fc_w.iter())
            .chain(grads.fc_b.iter())
            .cloned()
            .collect();
        // Central differences over every parameter, in the same order as
        // the gradient flattening above.
        let h = 1e-5;
        let mut idx = 0usize;
        let mut worst = 0.0f64;
        let n_params = net.param_count();
        for k in 0..n_params {
            let mut probe = |delta: f64, net: &mut ConvNet| {
                let mut i = 0usize;
                net.for_each_param(|p| {
                    if i == k {
                        *p += delta;
                    }
                    i += 1;
                });
            };
            probe(h, &mut net);
            let (_, up) = gradients(&net, &batch).unwrap();
            probe(-2.0 * h, &mut net);
            let (_, down) = gradients(&net, &batch).unwrap();
            probe(h, &mut net);
            let fd = (up - down) / (2.0 * h);
            let g = flat_in_param_order(&grads, k);
            let rel = (g - fd).abs() / (g.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
            idx += 1;
        }
        assert_eq!(idx, flat_grads.len());
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    /// Reads the k-th parameter's gradient in `for_each_param` order.
    fn flat_in_param_order(g: &Grads, k: usize) -> f64 {
        let mut all: Vec<f64> = Vec::new();
        for (w, b) in g.conv_w.iter().zip(&g.conv_b) {
            all.extend(w);
            all.extend(b);
        }
        all.extend(&g.fc_w);
        all.extend(&g.fc_b);
        all[k]
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut net = ConvNet::desk(20, 20, 3, 5).unwrap();
        let before = net.clone();
        let img = tiny_image(20, 20, 6);
        let mut vel = Momentum::zeros(&net);
        backward_sgd(&mut net, &[(&img, 1)], 0.0, 0.9, &mut vel).unwrap();
        for (a, b) in net.fc_weights.iter().zip(&before.fc_weights) {
            assert_eq!(a, b);
        }
        for (ca, cb) in net.convs.iter().zip(&before.convs) {
            assert_eq!(ca.weights, cb.weights);
            assert_eq!(ca.bias, cb.bias);
        }
    }

    #[test]
    fn separable_toy_problem_trains_with_strictly_falling_loss() {
        // Class 0: bright top half; class 1: bright bottom half.
        let mk = |bright_top: bool, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Image::from_fn(12, 12, |_, y| {
                let base = if (y < 6) == bright_top { 0.8 } else { 0.2 };
                base + 0.05 * rng.random::<f64>()
            })
            .unwrap()
        };
        let imgs: Vec<(Image, usize)> = (0..8)
            .map(|i| (mk(i % 2 == 0, 50 + i as u64), (i % 2) as usize))
            .collect();
        let batch: Vec<(&Image, usize)> = imgs.iter().map(|(i, c)| (i, *c)).collect();
        let mut net = ConvNet::with_arch(12, 12, &[(4, true)], 2, 8).unwrap();
        let mut vel = Momentum::zeros(&net);
        let mut losses = Vec::new();
        for _ in 0..10 {
            losses.push(backward_sgd(&mut net, &batch, 0.05, 0.0, &mut vel).unwrap());
        }
        for pair in losses.windows(2) {
            assert!(pair[1] < pair[0], "losses: {losses:?}");
        }
    }

    #[test]
    fn two_group_threshold_matches_hand_clustering() {
        let r = two_group_threshold(&[0.0, 0.0, 0.0, 10.0, 10.0]);
        assert_eq!(r.tau, 10.0);
        assert!(!r.degenerate);
        let r = two_group_threshold(&[0.0, 0.0, 0.0]);
        assert_eq!(r.tau, 0.0);
        assert!(r.degenerate);
        // The threshold is always one of the observed values.
        let vals = [0.3, 1.7, 0.2, 5.0, 4.1, 0.9];
        let r = two_group_threshold(&vals);
        assert!(vals.contains(&r.tau), "tau = {}", r.tau);
    }

    #[test]
    fn calibration_on_a_dead_net_is_degenerate_zero() {
        let mut net = ConvNet::desk(20, 20, 2, 9).unwrap();
        net.for_each_param(|p| *p = 0.0);
        let img = tiny_image(20, 20, 3);
        let r = calibrate_tau(&net, &[&img], 1).unwrap();
        assert_eq!(r.tau, 0.0);
        assert!(r.degenerate);
    }

    #[test]
    fn deep_units_follow_the_threshold_rule() {
        // Bias-driven: unit 0 of layer 1 fires everywhere above tau, unit
        // 1 stays at zero.
        let mut net = ConvNet::with_arch(16, 16, &[(2, true), (2, false)], 2, 4).unwrap();
        net.for_each_param(|p| *p = 0.0);
        net.convs[1].bias[0] = 1.0;
        let img = tiny_image(16, 16, 4);
        let v = semantic_units(&net, &[&img], &[0.5, 0.5]).unwrap();
        assert!(v.layers[1][0], "high-bias unit must be semantic");
        assert!(!v.layers[1][1], "zero unit must not be semantic");
    }

    #[test]
    fn raising_the_threshold_never_adds_semantic_units() {
        let net = ConvNet::desk(28, 28, 3, 17).unwrap();
        let imgs: Vec<Image> = (0..2).map(|i| tiny_image(28, 28, 70 + i)).collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let lo = semantic_units(&net, &refs, &[0.0, 0.1, 0.1]).unwrap();
        let hi = semantic_units(&net, &refs, &[0.0, 0.6, 0.6]).unwrap();
        for l in 1..3 {
            for (a, b) in hi.layers[l].iter().zip(&lo.layers[l]) {
                assert!(!a | b, "unit became semantic when tau rose");
            }
        }
    }

    #[test]
    fn semantic_fraction_counts_flags() {
        let v = SemanticVerdict {
            layers: vec![vec![true; 4], vec![true, true, true, false, false, false]],
            taus: vec![0.0, 0.5],
            window: 5,
            k: 10,
        };
        assert!((semantic_fraction(&v) - 0.7).abs() < 1e-12);
        let all = SemanticVerdict {
            layers: vec![vec![true; 3]],
            taus: vec![0.0],
            window: 5,
            k: 10,
        };
        assert_eq!(semantic_fraction(&all), 1.0);
        let none = SemanticVerdict {
            layers: vec![vec![false; 3]],
            taus: vec![0.0],
            window: 5,
            k: 10,
        };
        assert_eq!(semantic_fraction(&none), 0.0);
    }

    #[test]
    fn network_roundtrips_through_its_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.net");
        let net = ConvNet::desk(32, 32, 5, 77).unwrap();
        save_net(&net, &path).unwrap();
        let back = load_net(&path).unwrap();
        assert_eq!(back.classes, 5);
        assert_eq!(back.input_w, 32);
        for (a, b) in back.convs.iter().zip(&net.convs) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.bias, b.bias);
        }
        assert_eq!(back.fc_weights, net.fc_weights);
        assert_eq!(back.fc_bias, net.fc_bias);
    }

    #[test]
    fn activation_dump_writes_one_file_per_unit() {
        let dir = tempfile::tempdir().unwrap();
        let net = ConvNet::with_arch(12, 12, &[(2, true), (3, false)], 2, 5).unwrap();
        let img = tiny_image(12, 12, 8);
        let paths = dump_activations(&net, &img, dir.path()).unwrap();
        assert_eq!(paths.len(), 5);
        for p in &paths {
            assert!(p.exists());
        }
    }

    #[test]
    fn shape_and_label_errors_are_reported() {
        let net = ConvNet::desk(32, 32, 3, 1).unwrap();
        let img = tiny_image(16, 16, 1);
        assert!(matches!(forward(&net, &img), Err(NetError::ShapeMismatch { .. })));
        let ok = tiny_image(32, 32, 1);
        assert!(matches!(
            gradients(&net, &[(&ok, 3)]),
            Err(NetError::BadLabel { label: 3, classes: 3 })
        ));
        assert!(matches!(gradients(&net, &[]), Err(NetError::EmptyBatch)));
    }

    #[test]
    fn unit_roundtrip_preserves_filters() {
        let mut net = ConvNet::desk(32, 32, 3, 2).unwrap();
        let u = net.unit(1, 5).unwrap();
        assert_eq!(u.weights.len(), 8 * K2);
        let mut changed = u.clone();
        changed.bias += 1.5;
        changed.weights[0] = -2.0;
        net.set_unit(1, 5, &changed).unwrap();
        assert_eq!(net.unit(1, 5).unwrap(), changed);
        assert!(net.unit(3, 0).is_err());
        assert!(net.unit(1, 16).is_err());
    }
}
