//! Data-dependent statistics: empirical ReLU activation probabilities and a
//! Gauss-Newton diagonal Hessian estimate, both computed with eval-mode
//! normalization so they describe the frozen network.

use crate::data::Dataset;
use crate::error::{LapError, Result};
use crate::network::{ActKind, Layer, LayerCache, Mode, Network};
use crate::tensor::{Padding, Tensor};

/// Per-layer activation probabilities, aligned with the network's layer list;
/// `Some` exactly at ReLU activation layers, shaped like one example's input
/// to that layer (so conv feature maps keep per-position probabilities).
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    pub per_layer: Vec<Option<Tensor>>,
}

impl ActivationStats {
    /// Stats with p = 1 at every ReLU unit, for the identity-activation limit.
    pub fn all_ones(net: &Network) -> ActivationStats {
        let shapes = net.layer_shapes();
        let per_layer = net
            .layers()
            .iter()
            .enumerate()
            .map(|(li, layer)| match layer {
                Layer::Activation(ActKind::Relu) => Some(Tensor::ones(shapes[li].clone())),
                _ => None,
            })
            .collect();
        ActivationStats { per_layer }
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.iter().all(|p| p.is_none())
    }
}

/// Fraction of examples whose pre-activation is strictly positive, per ReLU
/// unit (per spatial position for conv feature maps).
pub fn estimate_activation_probs(net: &Network, data: &Dataset) -> Result<ActivationStats> {
    if data.is_empty() {
        return Err(LapError::Data(
            "activation probabilities need a nonempty dataset".into(),
        ));
    }
    let shapes = net.layer_shapes();
    let mut counts: Vec<Option<Vec<u64>>> = net
        .layers()
        .iter()
        .enumerate()
        .map(|(li, layer)| match layer {
            Layer::Activation(ActKind::Relu) => {
                Some(vec![0u64; shapes[li].iter().product()])
            }
            _ => None,
        })
        .collect();
    if counts.iter().all(|c| c.is_none()) {
        return Ok(ActivationStats {
            per_layer: vec![None; net.layers().len()],
        });
    }

    let chunk = 256;
    let mut idx = 0;
    while idx < data.len() {
        let hi = (idx + chunk).min(data.len());
        let indices: Vec<usize> = (idx..hi).collect();
        let (bx, _) = data.gather(&indices)?;
        let (_, caches, _) = net.forward_cached(&bx, Mode::Eval, true)?;
        for (li, cache) in caches.iter().enumerate() {
            let count = match &mut counts[li] {
                Some(c) => c,
                None => continue,
            };
            if let LayerCache::ActInOut { input, .. } = cache {
                let unit_len = count.len();
                for (t, v) in input.data().iter().enumerate() {
                    if *v > 0.0 {
                        count[t % unit_len] += 1;
                    }
                }
            }
        }
        idx = hi;
    }

    let n = data.len() as f64;
    let per_layer = counts
        .into_iter()
        .enumerate()
        .map(|(li, c)| {
            c.map(|counts| {
                let probs: Vec<f64> = counts.iter().map(|&k| k as f64 / n).collect();
                Tensor::new(shapes[li].clone(), probs).expect("probabilities are finite")
            })
        })
        .collect();
    Ok(ActivationStats { per_layer })
}

/// Per-weight diagonal curvature estimates, `Some` at prunable layers,
/// shaped like the weight tensors. Nonnegative by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianDiag {
    pub per_layer: Vec<Option<Tensor>>,
}

impl HessianDiag {
    pub fn for_layer(&self, li: usize) -> Option<&Tensor> {
        self.per_layer.get(li).and_then(|h| h.as_ref())
    }
}

/// Gauss-Newton diagonal of the mean softmax cross-entropy over `data`:
/// squared Jacobians propagate backward from the softmax curvature seed,
/// so every entry is a sum of squares.
pub fn hessian_diagonal(net: &Network, data: &Dataset) -> Result<HessianDiag> {
    hessian_diagonal_scaled(net, data, 1.0)
}

/// Same with the loss scaled by `c`; the diagonal scales linearly in `c`.
pub(crate) fn hessian_diagonal_scaled(
    net: &Network,
    data: &Dataset,
    loss_scale: f64,
) -> Result<HessianDiag> {
    if data.is_empty() {
        return Err(LapError::Data("hessian needs a nonempty dataset".into()));
    }
    let mut acc: Vec<Option<Tensor>> = net
        .layers()
        .iter()
        .map(|l| l.weights().map(|w| Tensor::zeros(w.shape().to_vec())))
        .collect();

    let chunk = 256;
    let mut idx = 0;
    while idx < data.len() {
        let hi = (idx + chunk).min(data.len());
        let indices: Vec<usize> = (idx..hi).collect();
        let (bx, _) = data.gather(&indices)?;
        let (logits, caches, _) = net.forward_cached(&bx, Mode::Eval, true)?;
        let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
        // Softmax cross-entropy curvature seed: diag of p - p^2 per example.
        let mut h = vec![0.0; batch * classes];
        for b in 0..batch {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - maxv).exp()).sum();
            for (hv, &v) in h[b * classes..(b + 1) * classes].iter_mut().zip(row) {
                let p = (v - maxv).exp() / denom;
                *hv = loss_scale * p * (1.0 - p);
            }
        }
        let mut hcur = Tensor::new(vec![batch, classes], h)?;
        backprop_squared(net, &caches, &mut hcur, &mut acc)?;
        idx = hi;
    }

    let n = data.len() as f64;
    for t in acc.iter_mut().flatten() {
        for v in t.data_mut() {
            *v /= n;
        }
    }
    Ok(HessianDiag { per_layer: acc })
}

/// Propagate per-unit diagonal curvature backward, squaring every linear map,
/// and accumulate per-weight curvature sums into `acc`.
fn backprop_squared(
    net: &Network,
    caches: &[LayerCache],
    hcur: &mut Tensor,
    acc: &mut [Option<Tensor>],
) -> Result<()> {
    let batch = hcur.shape()[0];
    for (li, layer) in net.layers().iter().enumerate().rev() {
        let cache = &caches[li];
        *hcur = match layer {
            Layer::Dense { weight, .. } => {
                let x = cache_input(cache)?;
                let (out, inn) = (weight.shape()[0], weight.shape()[1]);
                let hacc = acc[li].as_mut().expect("dense layer accumulates");
                // h_W[k,j] += sum_b x[b,j]^2 h[b,k]; h_x[b,j] = sum_k W[k,j]^2 h[b,k]
                let mut hx = vec![0.0; batch * inn];
                for b in 0..batch {
                    let xb = &x.data()[b * inn..(b + 1) * inn];
                    let hb = &hcur.data()[b * out..(b + 1) * out];
                    for k in 0..out {
                        let hk = hb[k];
                        if hk == 0.0 {
                            continue;
                        }
                        let wrow = &weight.data()[k * inn..(k + 1) * inn];
                        let hrow = &mut hacc.data_mut()[k * inn..(k + 1) * inn];
                        let hxb = &mut hx[b * inn..(b + 1) * inn];
                        for j in 0..inn {
                            hrow[j] += xb[j] * xb[j] * hk;
                            hxb[j] += wrow[j] * wrow[j] * hk;
                        }
                    }
                }
                Tensor::new(vec![batch, inn], hx)?
            }
            Layer::Conv2d {
                kernel, padding, ..
            } => {
                let x = cache_input(cache)?;
                let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
                let (oc, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
                let plane = h * w;
                let cy = (kh - 1) / 2;
                let cx = (kw - 1) / 2;
                let hacc = acc[li].as_mut().expect("conv layer accumulates");
                let mut hx = vec![0.0; batch * c * plane];
                for b in 0..batch {
                    let xb = &x.data()[b * c * plane..(b + 1) * c * plane];
                    let hyb = &hcur.data()[b * oc * plane..(b + 1) * oc * plane];
                    let hxb = &mut hx[b * c * plane..(b + 1) * c * plane];
                    for o in 0..oc {
                        let kbase_o = o * c * kh * kw;
                        for y in 0..h {
                            for xp in 0..w {
                                let g = hyb[(o * h + y) * w + xp];
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
                                            Padding::Circular => sy.rem_euclid(h as isize) as usize,
                                        };
                                        for dxk in 0..kw {
                                            let sx = xp as isize + dxk as isize - cx as isize;
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
                                            let kv = kernel.data()[kbase + dy * kw + dxk];
                                            hacc.data_mut()[kbase + dy * kw + dxk] +=
                                                xv * xv * g;
                                            hxb[xbase + sy * w + sx] += kv * kv * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Tensor::new(vec![batch, c, h, w], hx)?
            }
            Layer::BatchNorm { scale, .. } => {
                // Eval-mode BN is affine per feature: second derivative factor
                // (scale * invstd)^2.
                let invstd = cache_bn_invstd(cache)?;
                let feats = scale.len();
                let per_feat: usize = hcur.shape()[2..].iter().product::<usize>().max(1);
                let mut hx = hcur.clone();
                for b in 0..batch {
                    for f in 0..feats {
                        let factor = scale.data()[f] * invstd[f];
                        let fac2 = factor * factor;
                        let base = (b * feats + f) * per_feat;
                        for t in 0..per_feat {
                            hx.data_mut()[base + t] *= fac2;
                        }
                    }
                }
                hx
            }
            Layer::Activation(kind) => {
                let mut hx = hcur.clone();
                match kind {
                    ActKind::Relu => {
                        let (input, _) = cache_act(cache)?;
                        for (hv, &x) in hx.data_mut().iter_mut().zip(input.data()) {
                            if x <= 0.0 {
                                *hv = 0.0;
                            }
                        }
                    }
                    ActKind::Sigmoid => {
                        let (_, output) = cache_act(cache)?;
                        for (hv, &s) in hx.data_mut().iter_mut().zip(output.data()) {
                            let d = s * (1.0 - s);
                            *hv *= d * d;
                        }
                    }
                    ActKind::Tanh => {
                        let (_, output) = cache_act(cache)?;
                        for (hv, &t) in hx.data_mut().iter_mut().zip(output.data()) {
                            let d = 1.0 - t * t;
                            *hv *= d * d;
                        }
                    }
                    ActKind::Identity => {}
                }
                hx
            }
            Layer::MaxPool2d => {
                let (argmax, (h, w)) = cache_maxpool(cache)?;
                let (c, oh, ow) = (hcur.shape()[1], hcur.shape()[2], hcur.shape()[3]);
                let mut hx = vec![0.0; batch * c * h * w];
                for b in 0..batch {
                    for ch in 0..c {
                        let base_o = (b * c + ch) * oh * ow;
                        let base_i = (b * c + ch) * h * w;
                        for t in 0..oh * ow {
                            hx[base_i + argmax[base_o + t]] += hcur.data()[base_o + t];
                        }
                    }
                }
                Tensor::new(vec![batch, c, h, w], hx)?
            }
            Layer::Flatten => {
                let shape_in = cache_reshape(cache)?;
                hcur.reshape(shape_in.to_vec())?
            }
        };
    }
    Ok(())
}

fn cache_input(cache: &LayerCache) -> Result<&Tensor> {
    match cache {
        LayerCache::Input(t) => Ok(t),
        _ => Err(LapError::InvalidArgument("missing forward cache".into())),
    }
}

fn cache_act(cache: &LayerCache) -> Result<(&Tensor, &Tensor)> {
    match cache {
        LayerCache::ActInOut { input, output } => Ok((input, output)),
        _ => Err(LapError::InvalidArgument("missing forward cache".into())),
    }
}

fn cache_bn_invstd(cache: &LayerCache) -> Result<&[f64]> {
    match cache {
        LayerCache::BatchNorm { invstd, .. } => Ok(invstd),
        _ => Err(LapError::InvalidArgument("missing forward cache".into())),
    }
}

fn cache_maxpool(cache: &LayerCache) -> Result<(&[usize], (usize, usize))> {
    match cache {
        LayerCache::MaxPool { argmax, in_hw } => Ok((argmax, *in_hw)),
        _ => Err(LapError::InvalidArgument("missing forward cache".into())),
    }
}

fn cache_reshape(cache: &LayerCache) -> Result<&[usize]> {
    match cache {
        LayerCache::Reshape(s) => Ok(s),
        _ => Err(LapError::InvalidArgument("missing forward cache".into())),
    }
}
