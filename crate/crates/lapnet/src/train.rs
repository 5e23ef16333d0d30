//! Softmax cross-entropy training with Adam, deterministic shuffling,
//! masked-weight freezing, and fixed-order data-parallel accumulation.

use crate::data::Dataset;
use crate::error::{LapError, Result};
use crate::network::{BnBatchStats, Grads, Layer, LayerGrads, Mode, Network};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Training hyperparameters. `retrain_steps` is consumed by the experiment
/// pipeline; `workers` > 1 splits each batch into fixed chunks whose partial
/// gradients reduce in chunk order, so results are deterministic per config.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub retrain_steps: usize,
    pub workers: usize,
    pub train_bn_params: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            learning_rate: 1.2e-3,
            batch_size: 60,
            seed: 0,
            retrain_steps: 5000,
            workers: 1,
            train_bn_params: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LapError::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(LapError::Config("learning_rate must be finite and >= 0".into()));
        }
        if self.workers == 0 {
            return Err(LapError::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    /// Copy configured for the retraining phase.
    pub fn for_retrain(&self) -> TrainConfig {
        let mut c = self.clone();
        c.steps = self.retrain_steps;
        c
    }
}

/// Mean softmax cross-entropy and logit gradients of the SUM of per-example
/// losses (caller divides by the full batch size once).
fn softmax_ce_sums(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(LapError::InvalidArgument(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let mut loss_sum = 0.0;
    let mut dlogits = vec![0.0; batch * classes];
    for b in 0..batch {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let label = labels[b];
        if label >= classes {
            return Err(LapError::Data(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - maxv).exp();
        }
        loss_sum += denom.ln() - (row[label] - maxv);
        let drow = &mut dlogits[b * classes..(b + 1) * classes];
        for (d, &v) in drow.iter_mut().zip(row) {
            *d = (v - maxv).exp() / denom;
        }
        drow[label] -= 1.0;
    }
    Ok((loss_sum, Tensor::new(vec![batch, classes], dlogits)?))
}

/// Sum-scaled loss/gradients over one chunk, with the chunk's BN batch
/// statistics for the caller's running-average update.
fn loss_grads_sums(
    net: &Network,
    x: &Tensor,
    labels: &[usize],
) -> Result<(f64, Grads, Vec<Option<BnBatchStats>>)> {
    let (logits, caches, bn_stats) = net.forward_cached(x, Mode::Train, true)?;
    let (loss_sum, dlogits) = softmax_ce_sums(&logits, labels)?;
    let grads = net.backward(&caches, dlogits)?;
    Ok((loss_sum, grads, bn_stats))
}

/// Mean softmax cross-entropy and mean gradients over a batch (train-mode BN).
pub fn loss_and_grads(net: &Network, x: &Tensor, labels: &[usize]) -> Result<(f64, Grads)> {
    if labels.is_empty() {
        return Err(LapError::InvalidArgument("empty batch".into()));
    }
    let (loss_sum, mut grads, _) = loss_grads_sums(net, x, labels)?;
    let n = labels.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss_sum / n, grads))
}

/// First and second Adam moments per trainable tensor pair of each layer.
#[derive(Clone, Debug)]
pub struct AdamState {
    t: u64,
    slots: Vec<Option<[(Tensor, Tensor); 2]>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(net: &Network) -> AdamState {
        let slots = net
            .layers()
            .iter()
            .map(|layer| {
                let shapes: Option<[&Tensor; 2]> = match layer {
                    Layer::Dense { weight, bias } => Some([weight, bias]),
                    Layer::Conv2d { kernel, bias, .. } => Some([kernel, bias]),
                    Layer::BatchNorm { scale, shift, .. } => Some([scale, shift]),
                    _ => None,
                };
                shapes.map(|pair| {
                    [
                        (
                            Tensor::zeros(pair[0].shape().to_vec()),
                            Tensor::zeros(pair[0].shape().to_vec()),
                        ),
                        (
                            Tensor::zeros(pair[1].shape().to_vec()),
                            Tensor::zeros(pair[1].shape().to_vec()),
                        ),
                    ]
                })
            })
            .collect();
        AdamState { t: 0, slots }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

fn adam_update(param: &mut [f64], m: &mut Tensor, v: &mut Tensor, grad: &Tensor, lr: f64, t: u64) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for ((p, g), (mv, vv)) in param
        .iter_mut()
        .zip(grad.data())
        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
    {
        *mv = ADAM_BETA1 * *mv + (1.0 - ADAM_BETA1) * g;
        *vv = ADAM_BETA2 * *vv + (1.0 - ADAM_BETA2) * g * g;
        let mhat = *mv / bc1;
        let vhat = *vv / bc2;
        *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

/// One Adam step over every trainable tensor; BN parameters are skipped when
/// `train_bn` is false.
pub fn adam_step(
    net: &mut Network,
    state: &mut AdamState,
    grads: &Grads,
    lr: f64,
    train_bn: bool,
) -> Result<()> {
    if grads.layers.len() != net.layers().len() {
        return Err(LapError::InvalidArgument(
            "gradient list does not match network layers".into(),
        ));
    }
    state.t += 1;
    let t = state.t;
    for (li, layer) in net.layers_mut().iter_mut().enumerate() {
        let slot = match &mut state.slots[li] {
            Some(s) => s,
            None => continue,
        };
        match (layer, &grads.layers[li]) {
            (Layer::Dense { weight, bias }, LayerGrads::Dense { dw, db }) => {
                let (s0, s1) = slot.split_at_mut(1);
                adam_update(weight.data_mut(), &mut s0[0].0, &mut s0[0].1, dw, lr, t);
                adam_update(bias.data_mut(), &mut s1[0].0, &mut s1[0].1, db, lr, t);
            }
            (Layer::Conv2d { kernel, bias, .. }, LayerGrads::Conv { dk, db }) => {
                let (s0, s1) = slot.split_at_mut(1);
                adam_update(kernel.data_mut(), &mut s0[0].0, &mut s0[0].1, dk, lr, t);
                adam_update(bias.data_mut(), &mut s1[0].0, &mut s1[0].1, db, lr, t);
            }
            (Layer::BatchNorm { scale, shift, .. }, LayerGrads::BatchNorm { dscale, dshift }) => {
                if train_bn {
                    let (s0, s1) = slot.split_at_mut(1);
                    adam_update(scale.data_mut(), &mut s0[0].0, &mut s0[0].1, dscale, lr, t);
                    adam_update(shift.data_mut(), &mut s1[0].0, &mut s1[0].1, dshift, lr, t);
                }
            }
            (_, LayerGrads::None) => {}
            _ => {
                return Err(LapError::InvalidArgument(
                    "gradient kind does not match layer kind".into(),
                ))
            }
        }
    }
    Ok(())
}

/// Zero gradient entries at masked-out weight positions.
fn freeze_masked_grads(net: &Network, grads: &mut Grads) {
    for li in 0..net.layers().len() {
        let mask = match net.mask(li) {
            Some(m) => m,
            None => continue,
        };
        let grad = match &mut grads.layers[li] {
            LayerGrads::Dense { dw, .. } => dw,
            LayerGrads::Conv { dk, .. } => dk,
            _ => continue,
        };
        for (g, &keep) in grad.data_mut().iter_mut().zip(&mask.bits) {
            if !keep {
                *g = 0.0;
            }
        }
    }
}

/// Contiguous chunk bounds splitting `total` into `parts` near-equal pieces.
fn chunk_bounds(total: usize, parts: usize) -> Vec<(usize, usize)> {
    let parts = parts.max(1).min(total.max(1));
    let base = total / parts;
    let rem = total % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for c in 0..parts {
        let len = base + usize::from(c < rem);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// Train a copy of `net` for `cfg.steps` Adam steps over seeded shuffled
/// batches. Attached masks freeze pruned weights at exactly zero throughout.
pub fn train(net: &Network, data: &Dataset, cfg: &TrainConfig) -> Result<Network> {
    cfg.validate()?;
    let mut net = net.clone();
    if cfg.steps == 0 {
        return Ok(net);
    }
    if data.is_empty() {
        return Err(LapError::Data("cannot train on an empty dataset".into()));
    }
    net.enforce_masks();
    let mut state = AdamState::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = data.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    let mut pos = 0usize;
    let mut indices = Vec::with_capacity(cfg.batch_size);

    for _ in 0..cfg.steps {
        indices.clear();
        for _ in 0..cfg.batch_size {
            if pos == n {
                perm.shuffle(&mut rng);
                pos = 0;
            }
            indices.push(perm[pos]);
            pos += 1;
        }
        let (bx, blabels) = data.gather(&indices)?;
        let bounds = chunk_bounds(cfg.batch_size, cfg.workers);
        let mut parts: Vec<(f64, Grads, Vec<Option<BnBatchStats>>)> =
            Vec::with_capacity(bounds.len());
        if bounds.len() == 1 {
            parts.push(loss_grads_sums(&net, &bx, &blabels)?);
        } else {
            let example_len = data.example_len();
            let net_ref = &net;
            let chunk_results = std::thread::scope(|scope| {
                let handles: Vec<_> = bounds
                    .iter()
                    .map(|&(lo, hi)| {
                        let chunk_data = bx.data()[lo * example_len..hi * example_len].to_vec();
                        let chunk_labels = blabels[lo..hi].to_vec();
                        let mut shape = vec![hi - lo];
                        shape.extend_from_slice(data.example_shape());
                        scope.spawn(move || {
                            let cx = Tensor::new(shape, chunk_data)?;
                            loss_grads_sums(net_ref, &cx, &chunk_labels)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("worker panicked"))
                    .collect::<Vec<_>>()
            });
            for r in chunk_results {
                parts.push(r?);
            }
        }

        // Fixed-order reduction keeps the result independent of thread timing.
        let mut iter = parts.into_iter();
        let (mut loss_sum, mut grads, first_stats) = iter.next().expect("at least one chunk");
        let mut all_stats = vec![first_stats];
        for (l, g, s) in iter {
            loss_sum += l;
            grads.add_assign(&g);
            all_stats.push(s);
        }
        let bsz = cfg.batch_size as f64;
        grads.scale(1.0 / bsz);
        if !(loss_sum / bsz).is_finite() {
            return Err(LapError::Numeric("training loss became non-finite".into()));
        }

        // Running BN statistics: EMA folded per chunk, in chunk order.
        for stats in &all_stats {
            for (li, st) in stats.iter().enumerate() {
                let st = match st {
                    Some(s) => s,
                    None => continue,
                };
                if let Layer::BatchNorm {
                    running_mean,
                    running_var,
                    momentum,
                    ..
                } = &mut net.layers_mut()[li]
                {
                    let mom = *momentum;
                    for (r, &b) in running_mean.data_mut().iter_mut().zip(&st.mean) {
                        *r = mom * *r + (1.0 - mom) * b;
                    }
                    for (r, &b) in running_var.data_mut().iter_mut().zip(&st.var) {
                        *r = mom * *r + (1.0 - mom) * b;
                    }
                }
            }
        }

        freeze_masked_grads(&net, &mut grads);
        adam_step(&mut net, &mut state, &grads, cfg.learning_rate, cfg.train_bn_params)?;
        net.enforce_masks();
    }

    for layer in net.layers() {
        let tensors: Vec<&Tensor> = match layer {
            Layer::Dense { weight, bias } => vec![weight, bias],
            Layer::Conv2d { kernel, bias, .. } => vec![kernel, bias],
            Layer::BatchNorm {
                scale,
                shift,
                running_mean,
                running_var,
                ..
            } => vec![scale, shift, running_mean, running_var],
            _ => vec![],
        };
        if tensors.iter().any(|t| !t.all_finite()) {
            return Err(LapError::Numeric(
                "training produced non-finite parameters".into(),
            ));
        }
    }
    Ok(net)
}

/// Error rate (fraction of argmax-misclassified examples), eval-mode BN.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(LapError::Data("cannot evaluate on an empty dataset".into()));
    }
    let chunk = 256;
    let mut wrong = 0usize;
    let mut idx = 0usize;
    while idx < data.len() {
        let hi = (idx + chunk).min(data.len());
        let indices: Vec<usize> = (idx..hi).collect();
        let (bx, blabels) = data.gather(&indices)?;
        let (logits, _, _) = net.forward_cached(&bx, Mode::Eval, false)?;
        let classes = logits.shape()[1];
        for (b, &label) in blabels.iter().enumerate() {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let mut best = 0usize;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            if best != label {
                wrong += 1;
            }
        }
        idx = hi;
    }
    Ok(wrong as f64 / data.len() as f64)
}

/// Convenience complement of [`evaluate`].
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    Ok(1.0 - evaluate(net, data)?)
}
