//! Feed-forward model representation: typed layers, shape validation,
//! Glorot initialization, and the batched forward/backward passes.

use crate::error::{LapError, Result};
use crate::mask::Mask;
use crate::tensor::{conv2d_into, matmul_into, matmul_nt_into, matmul_tn_into};
use crate::tensor::{Padding, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Elementwise nonlinearity selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Sigmoid,
    Tanh,
    Identity,
}

/// One layer of a [`Network`].
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Fully-connected layer; `weight` is (out, in), `bias` is (out).
    Dense { weight: Tensor, bias: Tensor },
    /// Stride-1 convolution; `kernel` is (out_ch, in_ch, kh, kw), `bias` is (out_ch).
    Conv2d {
        kernel: Tensor,
        bias: Tensor,
        padding: Padding,
    },
    /// Per-feature affine normalization with running statistics.
    BatchNorm {
        scale: Tensor,
        shift: Tensor,
        running_mean: Tensor,
        running_var: Tensor,
        eps: f64,
        momentum: f64,
    },
    Activation(ActKind),
    /// 2x2 window, stride 2, floor semantics on odd sizes.
    MaxPool2d,
    Flatten,
}

impl Layer {
    /// Weight tensor of a prunable (dense/conv) layer.
    pub fn weights(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense { weight, .. } => Some(weight),
            Layer::Conv2d { kernel, .. } => Some(kernel),
            _ => None,
        }
    }

    pub fn weights_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Layer::Dense { weight, .. } => Some(weight),
            Layer::Conv2d { kernel, .. } => Some(kernel),
            _ => None,
        }
    }

    pub fn is_prunable(&self) -> bool {
        self.weights().is_some()
    }
}

/// Forward-pass statistics mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// BatchNorm uses batch statistics.
    Train,
    /// BatchNorm uses running statistics.
    Eval,
}

/// Spec of one layer before initialization; shapes are inferred on build.
#[derive(Clone, Debug)]
pub enum LayerSpec {
    Dense { out: usize },
    Conv2d { out_ch: usize, kh: usize, kw: usize, padding: Padding },
    BatchNorm,
    Activation(ActKind),
    MaxPool2d,
    Flatten,
}

/// Architecture description consumed by [`glorot_init`].
#[derive(Clone, Debug)]
pub struct NetSpec {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
}

/// Default running-statistics hyperparameters for BatchNorm layers.
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Ordered stack of layers with composing shapes. Masks, when attached,
/// pin pruned weights at exactly zero through training.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    input_shape: Shape,
    masks: Vec<Option<Mask>>,
}

fn infer_shape(prev: &[usize], layer: &Layer) -> Result<Shape> {
    match layer {
        Layer::Dense { weight, bias } => {
            let (out, inn) = (weight.shape()[0], weight.shape()[1]);
            if bias.shape() != [out] {
                return Err(LapError::Shape(format!(
                    "dense bias shape {:?} does not match out={out}",
                    bias.shape()
                )));
            }
            if prev != [inn] {
                return Err(LapError::Shape(format!(
                    "dense layer expects flat input of {inn}, got {prev:?}"
                )));
            }
            Ok(vec![out])
        }
        Layer::Conv2d { kernel, bias, .. } => {
            let (oc, ic) = (kernel.shape()[0], kernel.shape()[1]);
            if kernel.rank() != 4 {
                return Err(LapError::Shape("conv kernel must be rank 4".into()));
            }
            if bias.shape() != [oc] {
                return Err(LapError::Shape(format!(
                    "conv bias shape {:?} does not match out_ch={oc}",
                    bias.shape()
                )));
            }
            match prev {
                [c, h, w] if *c == ic => Ok(vec![oc, *h, *w]),
                _ => Err(LapError::Shape(format!(
                    "conv layer expects ({ic},h,w) input, got {prev:?}"
                ))),
            }
        }
        Layer::BatchNorm {
            scale,
            shift,
            running_mean,
            running_var,
            eps,
            ..
        } => {
            let d = scale.len();
            if shift.len() != d || running_mean.len() != d || running_var.len() != d {
                return Err(LapError::Shape("batchnorm parameter lengths disagree".into()));
            }
            if *eps <= 0.0 {
                return Err(LapError::Shape("batchnorm eps must be positive".into()));
            }
            if running_var.data().iter().any(|&v| v < 0.0) {
                return Err(LapError::Shape("batchnorm running variance must be >= 0".into()));
            }
            let features = match prev {
                [f] => *f,
                [c, _, _] => *c,
                _ => {
                    return Err(LapError::Shape(format!(
                        "batchnorm expects flat or (c,h,w) input, got {prev:?}"
                    )))
                }
            };
            if features != d {
                return Err(LapError::Shape(format!(
                    "batchnorm dim {d} does not match {features} input features"
                )));
            }
            Ok(prev.to_vec())
        }
        Layer::Activation(_) => Ok(prev.to_vec()),
        Layer::MaxPool2d => match prev {
            [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
            _ => Err(LapError::Shape(format!(
                "maxpool expects (c,h>=2,w>=2) input, got {prev:?}"
            ))),
        },
        Layer::Flatten => Ok(vec![prev.iter().product()]),
    }
}

impl Network {
    /// Validate that all layer shapes compose from `input_shape`.
    pub fn new(input_shape: Shape, layers: Vec<Layer>) -> Result<Network> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(LapError::Shape("input shape must be nonempty and positive".into()));
        }
        let mut cur = input_shape.clone();
        for layer in &layers {
            cur = infer_shape(&cur, layer)?;
        }
        let masks = vec![None; layers.len()];
        Ok(Network {
            layers,
            input_shape,
            masks,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Output shape of every layer, in order.
    pub fn layer_shapes(&self) -> Vec<Shape> {
        let mut cur = self.input_shape.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            cur = infer_shape(&cur, layer).expect("validated at construction");
            out.push(cur.clone());
        }
        out
    }

    /// Ordered indices of dense/conv layers.
    pub fn prunable(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_prunable())
            .map(|(i, _)| i)
            .collect()
    }

    /// Class count read off the final dense layer.
    pub fn class_count(&self) -> Result<usize> {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Dense { weight, .. } => Some(weight.shape()[0]),
                _ => None,
            })
            .ok_or_else(|| LapError::Unsupported("network has no dense layer".into()))
    }

    pub fn mask(&self, layer: usize) -> Option<&Mask> {
        self.masks.get(layer).and_then(|m| m.as_ref())
    }

    pub fn masks(&self) -> impl Iterator<Item = &Mask> {
        self.masks.iter().filter_map(|m| m.as_ref())
    }

    /// Attach masks and zero the pruned weights.
    pub fn attach_masks(&mut self, masks: Vec<Mask>) -> Result<()> {
        for m in masks {
            let idx = m.layer;
            let weights = self
                .layers
                .get_mut(idx)
                .and_then(|l| l.weights_mut())
                .ok_or_else(|| {
                    LapError::InvalidArgument(format!("layer {idx} is not prunable"))
                })?;
            if m.bits.len() != weights.len() {
                return Err(LapError::Shape(format!(
                    "mask for layer {idx} has {} bits, weights have {} entries",
                    m.bits.len(),
                    weights.len()
                )));
            }
            for (w, &keep) in weights.data_mut().iter_mut().zip(&m.bits) {
                if !keep {
                    *w = 0.0;
                }
            }
            self.masks[idx] = Some(m);
        }
        Ok(())
    }

    pub fn clear_masks(&mut self) {
        for m in &mut self.masks {
            *m = None;
        }
    }

    /// Force masked weights to exactly zero (no-op without masks).
    pub fn enforce_masks(&mut self) {
        for i in 0..self.layers.len() {
            if let Some(m) = self.masks[i].clone() {
                if let Some(w) = self.layers[i].weights_mut() {
                    for (wv, &keep) in w.data_mut().iter_mut().zip(&m.bits) {
                        if !keep {
                            *wv = 0.0;
                        }
                    }
                }
            }
        }
    }

    /// Total weight entries across prunable layers (biases excluded).
    pub fn total_prunable_weights(&self) -> usize {
        self.prunable()
            .iter()
            .map(|&i| self.layers[i].weights().unwrap().len())
            .sum()
    }

    /// Surviving fraction counted from masks (layers without masks count full).
    pub fn surviving_fraction(&self) -> f64 {
        let total = self.total_prunable_weights();
        if total == 0 {
            return 1.0;
        }
        let surviving: usize = self
            .prunable()
            .iter()
            .map(|&i| match &self.masks[i] {
                Some(m) => m.surviving,
                None => self.layers[i].weights().unwrap().len(),
            })
            .sum();
        surviving as f64 / total as f64
    }

    /// Logits for one example (input_shape) or a batch ((B,) + input_shape).
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if x.shape() == self.input_shape.as_slice() {
            let mut batch_shape = vec![1];
            batch_shape.extend_from_slice(&self.input_shape);
            let xb = x.reshape(batch_shape)?;
            let (out, _, _) = self.forward_cached(&xb, mode, false)?;
            let classes = out.shape()[1];
            return out.reshape(vec![classes]);
        }
        if x.shape().len() == self.input_shape.len() + 1 && x.shape()[1..] == *self.input_shape {
            let (out, _, _) = self.forward_cached(x, mode, false)?;
            return Ok(out);
        }
        Err(LapError::Shape(format!(
            "input shape {:?} does not match network input {:?}",
            x.shape(),
            self.input_shape
        )))
    }

    /// Batched forward returning per-layer caches for backward and, in train
    /// mode, the per-batch BN statistics so the caller can fold them into the
    /// running averages in a deterministic order.
    pub(crate) fn forward_cached(
        &self,
        x: &Tensor,
        mode: Mode,
        want_caches: bool,
    ) -> Result<(Tensor, Vec<LayerCache>, Vec<Option<BnBatchStats>>)> {
        if x.shape().len() != self.input_shape.len() + 1 || x.shape()[1..] != *self.input_shape {
            return Err(LapError::Shape(format!(
                "batch shape {:?} does not match input {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        let batch = x.shape()[0];
        let mut cur = x.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut bn_stats = vec![None; self.layers.len()];
        for (li, layer) in self.layers.iter().enumerate() {
            let (next, cache) = match layer {
                Layer::Dense { weight, bias } => {
                    let (out, inn) = (weight.shape()[0], weight.shape()[1]);
                    let mut y = vec![0.0; batch * out];
                    matmul_nt_into(cur.data(), weight.data(), batch, inn, out, &mut y);
                    for row in y.chunks_mut(out) {
                        for (v, b) in row.iter_mut().zip(bias.data()) {
                            *v += b;
                        }
                    }
                    let cache = if want_caches {
                        LayerCache::Input(cur.clone())
                    } else {
                        LayerCache::None
                    };
                    (Tensor::new(vec![batch, out], y)?, cache)
                }
                Layer::Conv2d {
                    kernel,
                    bias,
                    padding,
                } => {
                    let (c, h, w) = (cur.shape()[1], cur.shape()[2], cur.shape()[3]);
                    let (oc, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
                    let plane = h * w;
                    let mut y = vec![0.0; batch * oc * plane];
                    for b in 0..batch {
                        let xi = &cur.data()[b * c * plane..(b + 1) * c * plane];
                        let yo = &mut y[b * oc * plane..(b + 1) * oc * plane];
                        conv2d_into(xi, c, h, w, kernel.data(), oc, kh, kw, *padding, yo);
                        for (o, chunk) in yo.chunks_mut(plane).enumerate() {
                            let bv = bias.data()[o];
                            for v in chunk {
                                *v += bv;
                            }
                        }
                    }
                    let cache = if want_caches {
                        LayerCache::Input(cur.clone())
                    } else {
                        LayerCache::None
                    };
                    (Tensor::new(vec![batch, oc, h, w], y)?, cache)
                }
                Layer::BatchNorm {
                    scale,
                    shift,
                    running_mean,
                    running_var,
                    eps,
                    ..
                } => {
                    let feats = scale.len();
                    let (mean, var) = match mode {
                        Mode::Train => batch_moments(&cur, feats),
                        Mode::Eval => (
                            running_mean.data().to_vec(),
                            running_var.data().to_vec(),
                        ),
                    };
                    let invstd: Vec<f64> =
                        var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
                    let mut xhat = cur.clone();
                    normalize_features(&mut xhat, feats, &mean, &invstd);
                    let mut y = xhat.clone();
                    affine_features(&mut y, feats, scale.data(), shift.data());
                    let cache = if want_caches {
                        LayerCache::BatchNorm {
                            xhat: xhat.clone(),
                            invstd: invstd.clone(),
                        }
                    } else {
                        LayerCache::None
                    };
                    if mode == Mode::Train {
                        bn_stats[li] = Some(BnBatchStats { mean, var });
                    }
                    (y, cache)
                }
                Layer::Activation(kind) => {
                    let mut y = cur.clone();
                    match kind {
                        ActKind::Relu => {
                            for v in y.data_mut() {
                                if *v < 0.0 {
                                    *v = 0.0;
                                }
                            }
                        }
                        ActKind::Sigmoid => {
                            for v in y.data_mut() {
                                *v = 1.0 / (1.0 + (-*v).exp());
                            }
                        }
                        ActKind::Tanh => {
                            for v in y.data_mut() {
                                *v = v.tanh();
                            }
                        }
                        ActKind::Identity => {}
                    }
                    let cache = if want_caches {
                        LayerCache::ActInOut {
                            input: cur.clone(),
                            output: y.clone(),
                        }
                    } else {
                        LayerCache::None
                    };
                    (y, cache)
                }
                Layer::MaxPool2d => {
                    let (c, h, w) = (cur.shape()[1], cur.shape()[2], cur.shape()[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let mut y = vec![0.0; batch * c * oh * ow];
                    let mut arg = vec![0usize; batch * c * oh * ow];
                    for b in 0..batch {
                        for ch in 0..c {
                            let xi = &cur.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                            let base_o = (b * c + ch) * oh * ow;
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut best_idx = 0usize;
                                    for dy in 0..2 {
                                        for dx in 0..2 {
                                            let idx = (oy * 2 + dy) * w + (ox * 2 + dx);
                                            if xi[idx] > best {
                                                best = xi[idx];
                                                best_idx = idx;
                                            }
                                        }
                                    }
                                    y[base_o + oy * ow + ox] = best;
                                    arg[base_o + oy * ow + ox] = best_idx;
                                }
                            }
                        }
                    }
                    let cache = if want_caches {
                        LayerCache::MaxPool {
                            argmax: arg,
                            in_hw: (h, w),
                        }
                    } else {
                        LayerCache::None
                    };
                    (Tensor::new(vec![batch, c, oh, ow], y)?, cache)
                }
                Layer::Flatten => {
                    let flat: usize = cur.shape()[1..].iter().product();
                    let shape_in = cur.shape().to_vec();
                    let y = cur.reshape(vec![batch, flat])?;
                    let cache = if want_caches {
                        LayerCache::Reshape(shape_in)
                    } else {
                        LayerCache::None
                    };
                    (y, cache)
                }
            };
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches, bn_stats))
    }

    /// Backward pass from logit gradients; caches must come from
    /// `forward_cached` on the same input with `want_caches = true`.
    pub(crate) fn backward(
        &self,
        caches: &[LayerCache],
        dlogits: Tensor,
    ) -> Result<Grads> {
        let mut dcur = dlogits;
        let batch = dcur.shape()[0];
        let mut grads: Vec<LayerGrads> = vec![LayerGrads::None; self.layers.len()];
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let cache = &caches[li];
            dcur = match layer {
                Layer::Dense { weight, .. } => {
                    let x = cache.input()?;
                    let (out, inn) = (weight.shape()[0], weight.shape()[1]);
                    let mut dw = vec![0.0; out * inn];
                    matmul_tn_into(dcur.data(), x.data(), batch, out, inn, &mut dw);
                    let mut db = vec![0.0; out];
                    for row in dcur.data().chunks(out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let mut dx = vec![0.0; batch * inn];
                    matmul_into(dcur.data(), weight.data(), batch, out, inn, &mut dx);
                    grads[li] = LayerGrads::Dense {
                        dw: Tensor::new(vec![out, inn], dw)?,
                        db: Tensor::new(vec![out], db)?,
                    };
                    Tensor::new(vec![batch, inn], dx)?
                }
                Layer::Conv2d {
                    kernel, padding, ..
                } => {
                    let x = cache.input()?;
                    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                    let (oc, kh, kw) =
                        (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
                    let plane = h * w;
                    let cy = (kh - 1) / 2;
                    let cx = (kw - 1) / 2;
                    let mut dk = vec![0.0; kernel.len()];
                    let mut db = vec![0.0; oc];
                    let mut dx = vec![0.0; batch * c * plane];
                    for b in 0..batch {
                        let xb = &x.data()[b * c * plane..(b + 1) * c * plane];
                        let dyb = &dcur.data()[b * oc * plane..(b + 1) * oc * plane];
                        let dxb = &mut dx[b * c * plane..(b + 1) * c * plane];
                        for o in 0..oc {
                            let kbase_o = o * c * kh * kw;
                            db[o] += dyb[o * plane..(o + 1) * plane].iter().sum::<f64>();
                            for y in 0..h {
                                for xxp in 0..w {
                                    let g = dyb[(o * h + y) * w + xxp];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for i in 0..c {
                                        let kbase = kbase_o + i * kh * kw;
                                        let xbase = i * plane;
                                        for dy in 0..kh {
                                            let sy = y as isize + dy as isize - cy as isize;
                                            let sy = match padding {
                                                Padding::SameZero => {
                                                    if sy < 0 || sy >= h as isize {
                                                        continue;
                                                    }
                                                    sy as usize
                                                }
                                                Padding::Circular => {
                                                    sy.rem_euclid(h as isize) as usize
                                                }
                                            };
                                            for dxk in 0..kw {
                                                let sx =
                                                    xxp as isize + dxk as isize - cx as isize;
                                                let sx = match padding {
                                                    Padding::SameZero => {
                                                        if sx < 0 || sx >= w as isize {
                                                            continue;
                                                        }
                                                        sx as usize
                                                    }
                                                    Padding::Circular => {
                                                        sx.rem_euclid(w as isize) as usize
                                                    }
                                                };
                                                let xv = xb[xbase + sy * w + sx];
                                                dk[kbase + dy * kw + dxk] += g * xv;
                                                dxb[xbase + sy * w + sx] +=
                                                    g * kernel.data()[kbase + dy * kw + dxk];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    grads[li] = LayerGrads::Conv {
                        dk: Tensor::new(kernel.shape().to_vec(), dk)?,
                        db: Tensor::new(vec![oc], db)?,
                    };
                    Tensor::new(x.shape().to_vec(), dx)?
                }
                Layer::BatchNorm { scale, .. } => {
                    let (xhat, invstd) = cache.batchnorm()?;
                    let feats = scale.len();
                    let reduce = dcur.len() / feats;
                    let mut dscale = vec![0.0; feats];
                    let mut dshift = vec![0.0; feats];
                    let mut sum_dxhat = vec![0.0; feats];
                    let mut sum_dxhat_xhat = vec![0.0; feats];
                    for_each_feature(&dcur, feats, |f, idx| {
                        let g = dcur.data()[idx];
                        let xh = xhat.data()[idx];
                        dscale[f] += g * xh;
                        dshift[f] += g;
                        let dxh = g * scale.data()[f];
                        sum_dxhat[f] += dxh;
                        sum_dxhat_xhat[f] += dxh * xh;
                    });
                    let n = reduce as f64;
                    let mut dx = dcur.clone();
                    let dslice = dx.data_mut();
                    for_each_feature(&dcur, feats, |f, idx| {
                        let g = dcur.data()[idx];
                        let xh = xhat.data()[idx];
                        let dxh = g * scale.data()[f];
                        dslice[idx] =
                            invstd[f] / n * (n * dxh - sum_dxhat[f] - xh * sum_dxhat_xhat[f]);
                    });
                    grads[li] = LayerGrads::BatchNorm {
                        dscale: Tensor::new(vec![feats], dscale)?,
                        dshift: Tensor::new(vec![feats], dshift)?,
                    };
                    dx
                }
                Layer::Activation(kind) => {
                    let (input, output) = cache.act_in_out()?;
                    let mut dx = dcur.clone();
                    match kind {
                        ActKind::Relu => {
                            for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
                                if x <= 0.0 {
                                    *d = 0.0;
                                }
                            }
                        }
                        ActKind::Sigmoid => {
                            for (d, &s) in dx.data_mut().iter_mut().zip(output.data()) {
                                *d *= s * (1.0 - s);
                            }
                        }
                        ActKind::Tanh => {
                            for (d, &t) in dx.data_mut().iter_mut().zip(output.data()) {
                                *d *= 1.0 - t * t;
                            }
                        }
                        ActKind::Identity => {}
                    }
                    dx
                }
                Layer::MaxPool2d => {
                    let (argmax, (h, w)) = cache.maxpool()?;
                    let (c, oh, ow) = (dcur.shape()[1], dcur.shape()[2], dcur.shape()[3]);
                    let mut dx = vec![0.0; batch * c * h * w];
                    for b in 0..batch {
                        for ch in 0..c {
                            let base_o = (b * c + ch) * oh * ow;
                            let base_i = (b * c + ch) * h * w;
                            for t in 0..oh * ow {
                                dx[base_i + argmax[base_o + t]] += dcur.data()[base_o + t];
                            }
                        }
                    }
                    Tensor::new(vec![batch, c, h, w], dx)?
                }
                Layer::Flatten => {
                    let shape_in = cache.reshape()?;
                    dcur.reshape(shape_in.to_vec())?
                }
            };
        }
        Ok(Grads { layers: grads })
    }
}

/// Per-feature batch moments: features are axis 1, reduction over the rest.
fn batch_moments(x: &Tensor, feats: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; feats];
    let mut count = 0usize;
    for_each_feature(x, feats, |f, idx| {
        mean[f] += x.data()[idx];
        if f == 0 {
            count += 1;
        }
    });
    let n = count as f64;
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; feats];
    for_each_feature(x, feats, |f, idx| {
        let d = x.data()[idx] - mean[f];
        var[f] += d * d;
    });
    for v in &mut var {
        *v /= n;
    }
    (mean, var)
}

/// Visit every element of a (B,F) or (B,F,H,W) tensor with its feature index.
fn for_each_feature(x: &Tensor, feats: usize, mut f: impl FnMut(usize, usize)) {
    let batch = x.shape()[0];
    let per_feat: usize = x.shape()[2..].iter().product::<usize>().max(1);
    for b in 0..batch {
        for c in 0..feats {
            let base = (b * feats + c) * per_feat;
            for t in 0..per_feat {
                f(c, base + t);
            }
        }
    }
}

fn normalize_features(x: &mut Tensor, feats: usize, mean: &[f64], invstd: &[f64]) {
    let snapshot = x.clone();
    let data = x.data_mut();
    for_each_feature(&snapshot, feats, |f, idx| {
        data[idx] = (data[idx] - mean[f]) * invstd[f];
    });
}

fn affine_features(x: &mut Tensor, feats: usize, scale: &[f64], shift: &[f64]) {
    let snapshot = x.clone();
    let data = x.data_mut();
    for_each_feature(&snapshot, feats, |f, idx| {
        data[idx] = data[idx] * scale[f] + shift[f];
    });
}

/// Batch statistics produced by a train-mode BN forward.
#[derive(Clone, Debug)]
pub(crate) struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// What each layer's backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub(crate) enum LayerCache {
    None,
    Input(Tensor),
    ActInOut { input: Tensor, output: Tensor },
    BatchNorm { xhat: Tensor, invstd: Vec<f64> },
    MaxPool { argmax: Vec<usize>, in_hw: (usize, usize) },
    Reshape(Shape),
}

impl LayerCache {
    fn input(&self) -> Result<&Tensor> {
        match self {
            LayerCache::Input(t) => Ok(t),
            _ => Err(LapError::InvalidArgument("missing forward cache".into())),
        }
    }
    fn act_in_out(&self) -> Result<(&Tensor, &Tensor)> {
        match self {
            LayerCache::ActInOut { input, output } => Ok((input, output)),
            _ => Err(LapError::InvalidArgument("missing forward cache".into())),
        }
    }
    fn batchnorm(&self) -> Result<(&Tensor, &[f64])> {
        match self {
            LayerCache::BatchNorm { xhat, invstd } => Ok((xhat, invstd)),
            _ => Err(LapError::InvalidArgument("missing forward cache".into())),
        }
    }
    fn maxpool(&self) -> Result<(&[usize], (usize, usize))> {
        match self {
            LayerCache::MaxPool { argmax, in_hw } => Ok((argmax, *in_hw)),
            _ => Err(LapError::InvalidArgument("missing forward cache".into())),
        }
    }
    fn reshape(&self) -> Result<&[usize]> {
        match self {
            LayerCache::Reshape(s) => Ok(s),
            _ => Err(LapError::InvalidArgument("missing forward cache".into())),
        }
    }
}

/// Gradients aligned with a network's layer list.
#[derive(Clone, Debug)]
pub struct Grads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Clone, Debug)]
pub enum LayerGrads {
    None,
    Dense { dw: Tensor, db: Tensor },
    Conv { dk: Tensor, db: Tensor },
    BatchNorm { dscale: Tensor, dshift: Tensor },
}

impl Grads {
    /// Elementwise sum, used by the fixed-order data-parallel reduction.
    pub(crate) fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            match (a, b) {
                (LayerGrads::None, LayerGrads::None) => {}
                (
                    LayerGrads::Dense { dw, db },
                    LayerGrads::Dense { dw: ow, db: ob },
                ) => {
                    add_into(dw, ow);
                    add_into(db, ob);
                }
                (
                    LayerGrads::Conv { dk, db },
                    LayerGrads::Conv { dk: ok, db: ob },
                ) => {
                    add_into(dk, ok);
                    add_into(db, ob);
                }
                (
                    LayerGrads::BatchNorm { dscale, dshift },
                    LayerGrads::BatchNorm {
                        dscale: os,
                        dshift: oh,
                    },
                ) => {
                    add_into(dscale, os);
                    add_into(dshift, oh);
                }
                _ => panic!("gradient structures disagree"),
            }
        }
    }

    pub(crate) fn scale(&mut self, c: f64) {
        for g in &mut self.layers {
            match g {
                LayerGrads::None => {}
                LayerGrads::Dense { dw, db } => {
                    scale_into(dw, c);
                    scale_into(db, c);
                }
                LayerGrads::Conv { dk, db } => {
                    scale_into(dk, c);
                    scale_into(db, c);
                }
                LayerGrads::BatchNorm { dscale, dshift } => {
                    scale_into(dscale, c);
                    scale_into(dshift, c);
                }
            }
        }
    }
}

fn add_into(a: &mut Tensor, b: &Tensor) {
    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

fn scale_into(a: &mut Tensor, c: f64) {
    for x in a.data_mut() {
        *x *= c;
    }
}

/// Build a network from `spec` with Glorot-uniform weights, zero biases,
/// and unit-scale BatchNorm; bit-deterministic per seed.
pub fn glorot_init(spec: &NetSpec, seed: u64) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur: Shape = spec.input_shape.clone();
    let mut layers = Vec::with_capacity(spec.layers.len());
    for ls in &spec.layers {
        let layer = match ls {
            LayerSpec::Dense { out } => {
                let inn = match cur.as_slice() {
                    [d] => *d,
                    other => {
                        return Err(LapError::Shape(format!(
                            "dense layer needs flat input, got {other:?} (insert a flatten layer)"
                        )))
                    }
                };
                let bound = (6.0 / (inn + out) as f64).sqrt();
                let weight =
                    Tensor::from_fn(vec![*out, inn], |_| rng.gen_range(-bound..bound));
                Layer::Dense {
                    weight,
                    bias: Tensor::zeros(vec![*out]),
                }
            }
            LayerSpec::Conv2d {
                out_ch,
                kh,
                kw,
                padding,
            } => {
                let ic = match cur.as_slice() {
                    [c, _, _] => *c,
                    other => {
                        return Err(LapError::Shape(format!(
                            "conv layer needs (c,h,w) input, got {other:?}"
                        )))
                    }
                };
                let fan_in = ic * kh * kw;
                let fan_out = out_ch * kh * kw;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let kernel = Tensor::from_fn(vec![*out_ch, ic, *kh, *kw], |_| {
                    rng.gen_range(-bound..bound)
                });
                Layer::Conv2d {
                    kernel,
                    bias: Tensor::zeros(vec![*out_ch]),
                    padding: *padding,
                }
            }
            LayerSpec::BatchNorm => {
                let feats = match cur.as_slice() {
                    [f] => *f,
                    [c, _, _] => *c,
                    other => {
                        return Err(LapError::Shape(format!(
                            "batchnorm needs flat or (c,h,w) input, got {other:?}"
                        )))
                    }
                };
                Layer::BatchNorm {
                    scale: Tensor::ones(vec![feats]),
                    shift: Tensor::zeros(vec![feats]),
                    running_mean: Tensor::zeros(vec![feats]),
                    running_var: Tensor::ones(vec![feats]),
                    eps: BN_EPS,
                    momentum: BN_MOMENTUM,
                }
            }
            LayerSpec::Activation(kind) => Layer::Activation(*kind),
            LayerSpec::MaxPool2d => Layer::MaxPool2d,
            LayerSpec::Flatten => Layer::Flatten,
        };
        cur = infer_shape(&cur, &layer)?;
        layers.push(layer);
    }
    Network::new(spec.input_shape.clone(), layers)
}
