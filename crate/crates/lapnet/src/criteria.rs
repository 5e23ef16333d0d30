//! Saliency scoring: magnitude, random, lookahead (with BN correction and
//! one-sided variants), activation-weighted lookahead, OBD curvature scores,
//! their composition, the whole-chain variant, and the reduced squared form.
//!
//! Lookahead convention: the score of weight w connecting input unit j to
//! output unit k of layer i is |w| multiplied by the Frobenius norm of the
//! previous layer's output slice j and the next layer's input slice k.
//! Neighbor lookup skips activation, pool, flatten, and BN layers; BN scale
//! magnitudes enter as per-unit factors. A missing neighbor contributes 1.

use crate::data::Dataset;
use crate::error::{LapError, Result};
use crate::network::{ActKind, Layer, Network};
use crate::stats::{ActivationStats, HessianDiag};
use crate::tensor::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pruning criterion tags, stringly addressable from the CLI and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Criterion {
    Mp,
    Rp,
    Lfp,
    Lbp,
    Lap,
    LapAll,
    LapAct,
    Obd,
    ObdLap,
}

impl Criterion {
    pub const ALL: [Criterion; 9] = [
        Criterion::Mp,
        Criterion::Rp,
        Criterion::Lfp,
        Criterion::Lbp,
        Criterion::Lap,
        Criterion::LapAll,
        Criterion::LapAct,
        Criterion::Obd,
        Criterion::ObdLap,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Criterion::Mp => "mp",
            Criterion::Rp => "rp",
            Criterion::Lfp => "lfp",
            Criterion::Lbp => "lbp",
            Criterion::Lap => "lap",
            Criterion::LapAll => "lap-all",
            Criterion::LapAct => "lap-act",
            Criterion::Obd => "obd",
            Criterion::ObdLap => "obd-lap",
        }
    }

    pub fn parse(s: &str) -> Result<Criterion> {
        Criterion::ALL
            .iter()
            .copied()
            .find(|c| c.tag() == s)
            .ok_or_else(|| {
                LapError::InvalidArgument(format!(
                    "unknown criterion '{s}'; expected one of {}",
                    Criterion::ALL.map(|c| c.tag()).join(", ")
                ))
            })
    }

    /// Criteria whose scores depend on neighbor-layer state, enabling the
    /// ordered pruning strategies.
    pub fn is_lap_family(&self) -> bool {
        matches!(
            self,
            Criterion::Lfp
                | Criterion::Lbp
                | Criterion::Lap
                | Criterion::LapAll
                | Criterion::LapAct
                | Criterion::ObdLap
        )
    }

    /// Whether scoring requires activation statistics.
    pub fn needs_activation_stats(&self) -> bool {
        matches!(self, Criterion::LapAct)
    }

    /// Whether scoring requires a Hessian diagonal.
    pub fn needs_hessian(&self) -> bool {
        matches!(self, Criterion::Obd | Criterion::ObdLap)
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Nonnegative per-weight saliency for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTensor {
    pub layer: usize,
    pub values: Tensor,
}

impl ScoreTensor {
    pub fn new(layer: usize, values: Tensor, weight_shape: &[usize]) -> Result<ScoreTensor> {
        if values.shape() != weight_shape {
            return Err(LapError::Shape(format!(
                "score shape {:?} does not match weight shape {weight_shape:?}",
                values.shape()
            )));
        }
        if values.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LapError::Numeric(format!(
                "scores for layer {layer} must be finite and nonnegative"
            )));
        }
        Ok(ScoreTensor { layer, values })
    }
}

/// Inputs for data-dependent criteria. `data` enables re-estimating the
/// statistics between ordered-pruning passes.
#[derive(Clone, Debug, Default)]
pub struct PruneContext<'a> {
    pub activation: Option<ActivationStats>,
    pub hessian: Option<HessianDiag>,
    pub data: Option<&'a Dataset>,
    pub rp_seed: u64,
}

impl PruneContext<'_> {
    pub fn none() -> PruneContext<'static> {
        PruneContext::default()
    }
}

/// score(w) = |w|.
pub fn score_mp(w: &Tensor) -> Tensor {
    let data = w.data().iter().map(|v| v.abs()).collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape")
}

/// Independent uniform(0,1) scores, deterministic per seed.
pub fn score_random(w: &Tensor, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape")
}

/// score(w) = h_ww * w^2 / 2.
pub fn score_obd(w: &Tensor, h: &Tensor) -> Result<Tensor> {
    if w.shape() != h.shape() {
        return Err(LapError::Shape(format!(
            "weight shape {:?} vs hessian shape {:?}",
            w.shape(),
            h.shape()
        )));
    }
    let data = w
        .data()
        .iter()
        .zip(h.data())
        .map(|(w, h)| h * w * w / 2.0)
        .collect();
    Ok(Tensor::new(w.shape().to_vec(), data).expect("same shape"))
}

fn prunable_weights(net: &Network, i: usize) -> Result<&Tensor> {
    net.layers()
        .get(i)
        .and_then(|l| l.weights())
        .ok_or_else(|| LapError::InvalidArgument(format!("layer {i} is not prunable")))
}

fn prev_prunable(net: &Network, i: usize) -> Option<usize> {
    (0..i).rev().find(|&m| net.layers()[m].is_prunable())
}

fn next_prunable(net: &Network, i: usize) -> Option<usize> {
    (i + 1..net.layers().len()).find(|&m| net.layers()[m].is_prunable())
}

/// Input units of layer i (dense columns / conv input channels).
fn in_units(net: &Network, i: usize) -> usize {
    match &net.layers()[i] {
        Layer::Dense { weight, .. } => weight.shape()[1],
        Layer::Conv2d { kernel, .. } => kernel.shape()[1],
        _ => unreachable!("caller checked prunability"),
    }
}

/// Output units of layer i (dense rows / conv output channels).
fn out_units(net: &Network, i: usize) -> usize {
    match &net.layers()[i] {
        Layer::Dense { weight, .. } => weight.shape()[0],
        Layer::Conv2d { kernel, .. } => kernel.shape()[0],
        _ => unreachable!("caller checked prunability"),
    }
}

/// Squared sums per output slice (axis-0 slices; contiguous).
fn out_slice_sq(w: &Tensor) -> Vec<f64> {
    let slice = w.len() / w.shape()[0];
    w.data()
        .chunks(slice)
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect()
}

/// Squared sums per input slice (dense columns / conv input channels).
fn in_slice_sq(w: &Tensor) -> Vec<f64> {
    match w.rank() {
        2 => {
            let (out, inn) = (w.shape()[0], w.shape()[1]);
            let mut sq = vec![0.0; inn];
            for k in 0..out {
                let row = &w.data()[k * inn..(k + 1) * inn];
                for (s, v) in sq.iter_mut().zip(row) {
                    *s += v * v;
                }
            }
            sq
        }
        4 => {
            let (oc, ic) = (w.shape()[0], w.shape()[1]);
            let block = w.shape()[2] * w.shape()[3];
            let mut sq = vec![0.0; ic];
            for o in 0..oc {
                for (i, s) in sq.iter_mut().enumerate() {
                    let base = (o * ic + i) * block;
                    *s += w.data()[base..base + block].iter().map(|v| v * v).sum::<f64>();
                }
            }
            sq
        }
        _ => unreachable!("prunable tensors are rank 2 or 4"),
    }
}

/// Per-output-slice and per-input-slice squared norms of one weight tensor.
type SliceSq = (Vec<f64>, Vec<f64>);

/// Both squared-sum families in a single sweep over the tensor.
fn slice_sq_both(w: &Tensor) -> SliceSq {
    match w.rank() {
        2 => {
            let (out, inn) = (w.shape()[0], w.shape()[1]);
            let mut osq = vec![0.0; out];
            let mut isq = vec![0.0; inn];
            for k in 0..out {
                let row = &w.data()[k * inn..(k + 1) * inn];
                let mut acc = 0.0;
                for (j, v) in row.iter().enumerate() {
                    let v2 = v * v;
                    acc += v2;
                    isq[j] += v2;
                }
                osq[k] = acc;
            }
            (osq, isq)
        }
        4 => {
            let (oc, ic) = (w.shape()[0], w.shape()[1]);
            let block = w.shape()[2] * w.shape()[3];
            let mut osq = vec![0.0; oc];
            let mut isq = vec![0.0; ic];
            for o in 0..oc {
                for i in 0..ic {
                    let base = (o * ic + i) * block;
                    let s: f64 = w.data()[base..base + block].iter().map(|v| v * v).sum();
                    osq[o] += s;
                    isq[i] += s;
                }
            }
            (osq, isq)
        }
        _ => unreachable!("prunable tensors are rank 2 or 4"),
    }
}

/// The (channels, plane) of the flatten boundary strictly inside
/// (lo, hi), if any: shape entering the first flatten layer there.
fn flatten_geometry(
    net: &Network,
    shapes: &[Shape],
    lo: usize,
    hi: usize,
) -> Result<Option<(usize, usize)>> {
    for m in lo + 1..hi {
        if matches!(net.layers()[m], Layer::Flatten) {
            let before = if m == 0 {
                net.input_shape().to_vec()
            } else {
                shapes[m - 1].clone()
            };
            return match before.as_slice() {
                [c, h, w] => Ok(Some((*c, h * w))),
                [_] => Ok(None),
                other => Err(LapError::Shape(format!(
                    "flatten boundary with unexpected shape {other:?}"
                ))),
            };
        }
    }
    Ok(None)
}

/// Expand a per-channel vector to per-flat-unit across the flatten boundary
/// inside (lo, hi); identity when no boundary exists.
fn expand_channels(
    net: &Network,
    shapes: &[Shape],
    lo: usize,
    hi: usize,
    per_channel: &[f64],
    out_len: usize,
) -> Result<Vec<f64>> {
    match flatten_geometry(net, shapes, lo, hi)? {
        Some((c, plane)) => {
            if c != per_channel.len() || c * plane != out_len {
                return Err(LapError::Shape(format!(
                    "channel factor of {} does not map onto {out_len} units (plane {plane})",
                    per_channel.len()
                )));
            }
            let mut out = Vec::with_capacity(out_len);
            for &v in per_channel {
                out.extend(std::iter::repeat_n(v, plane));
            }
            Ok(out)
        }
        None => {
            if per_channel.len() != out_len {
                return Err(LapError::Shape(format!(
                    "factor length {} does not match {out_len} units",
                    per_channel.len()
                )));
            }
            Ok(per_channel.to_vec())
        }
    }
}

/// Sum a per-flat-unit vector into per-channel groups across the flatten
/// boundary inside (lo, hi); identity when no boundary exists.
fn contract_channels(
    net: &Network,
    shapes: &[Shape],
    lo: usize,
    hi: usize,
    per_unit: &[f64],
    channels: usize,
) -> Result<Vec<f64>> {
    match flatten_geometry(net, shapes, lo, hi)? {
        Some((c, plane)) => {
            if c != channels || c * plane != per_unit.len() {
                return Err(LapError::Shape(format!(
                    "{} units do not group into {channels} channels (plane {plane})",
                    per_unit.len()
                )));
            }
            Ok(per_unit
                .chunks(plane)
                .map(|chunk| chunk.iter().sum())
                .collect())
        }
        None => {
            if per_unit.len() != channels {
                return Err(LapError::Shape(format!(
                    "factor length {} does not match {channels} units",
                    per_unit.len()
                )));
            }
            Ok(per_unit.to_vec())
        }
    }
}

fn bn_after(net: &Network, from: usize) -> Option<usize> {
    for m in from + 1..net.layers().len() {
        if net.layers()[m].is_prunable() {
            return None;
        }
        if matches!(net.layers()[m], Layer::BatchNorm { .. }) {
            return Some(m);
        }
    }
    None
}

fn bn_scale_abs(net: &Network, idx: usize) -> Vec<f64> {
    match &net.layers()[idx] {
        Layer::BatchNorm { scale, .. } => scale.data().iter().map(|v| v.abs()).collect(),
        _ => unreachable!("index points at a BN layer"),
    }
}

/// Absolute BN scale factors adjacent to layer i: `pre` per input unit
/// (from the BN between the previous prunable layer and i), `post` per
/// output unit (from the BN between i and the next prunable layer).
/// All ones where no such BN exists.
pub fn bn_factors(net: &Network, i: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    prunable_weights(net, i)?;
    let shapes = net.layer_shapes();
    let n_in = in_units(net, i);
    let n_out = out_units(net, i);

    let pre = match (0..i)
        .rev()
        .take_while(|&m| !net.layers()[m].is_prunable())
        .find(|&m| matches!(net.layers()[m], Layer::BatchNorm { .. }))
    {
        Some(b) => expand_channels(net, &shapes, b, i, &bn_scale_abs(net, b), n_in)?,
        None => vec![1.0; n_in],
    };
    let post = match bn_after(net, i) {
        Some(b) => {
            let s = bn_scale_abs(net, b);
            if s.len() != n_out {
                return Err(LapError::Shape(format!(
                    "BN after layer {i} has {} features for {n_out} output units",
                    s.len()
                )));
            }
            s
        }
        None => vec![1.0; n_out],
    };
    Ok((pre, post))
}

/// Combine per-input-unit and per-output-unit factors with |w| entrywise.
fn combine(w: &Tensor, prev_fac: &[f64], next_fac: &[f64]) -> Tensor {
    let mut out = vec![0.0; w.len()];
    match w.rank() {
        2 => {
            let (o, inn) = (w.shape()[0], w.shape()[1]);
            for k in 0..o {
                let nf = next_fac[k];
                let row = &w.data()[k * inn..(k + 1) * inn];
                let orow = &mut out[k * inn..(k + 1) * inn];
                for j in 0..inn {
                    orow[j] = row[j].abs() * prev_fac[j] * nf;
                }
            }
        }
        4 => {
            let (oc, ic) = (w.shape()[0], w.shape()[1]);
            let block = w.shape()[2] * w.shape()[3];
            for o in 0..oc {
                let nf = next_fac[o];
                for i in 0..ic {
                    let f = prev_fac[i] * nf;
                    let base = (o * ic + i) * block;
                    for t in 0..block {
                        out[base + t] = w.data()[base + t].abs() * f;
                    }
                }
            }
        }
        _ => unreachable!("prunable tensors are rank 2 or 4"),
    }
    Tensor::new(w.shape().to_vec(), out).expect("same shape")
}

/// Per-unit multiplier brackets of the lookahead score: sqrt of the mapped
/// neighbor squared sums times the BN magnitude, or all-ones for a disabled
/// flag or missing neighbor.
#[allow(clippy::too_many_arguments)]
fn lap_factors(
    net: &Network,
    shapes: &[Shape],
    i: usize,
    prev_sq: Option<(usize, &[f64])>,
    next_sq: Option<(usize, &[f64])>,
    use_prev: bool,
    use_next: bool,
    bn: Option<(&[f64], &[f64])>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_in = in_units(net, i);
    let n_out = out_units(net, i);

    let prev_fac = match (use_prev, prev_sq) {
        (true, Some((p, sq))) => {
            let mut f: Vec<f64> = expand_channels(net, shapes, p, i, sq, n_in)?
                .iter()
                .map(|v| v.sqrt())
                .collect();
            if let Some((pre, _)) = bn {
                for (fv, b) in f.iter_mut().zip(pre) {
                    *fv *= b;
                }
            }
            f
        }
        _ => vec![1.0; n_in],
    };
    let next_fac = match (use_next, next_sq) {
        (true, Some((nx, sq))) => {
            let mut f: Vec<f64> = contract_channels(net, shapes, i, nx, sq, n_out)?
                .iter()
                .map(|v| v.sqrt())
                .collect();
            if let Some((_, post)) = bn {
                for (fv, b) in f.iter_mut().zip(post) {
                    *fv *= b;
                }
            }
            f
        }
        _ => vec![1.0; n_out],
    };
    Ok((prev_fac, next_fac))
}

/// Lookahead score of layer i. `use_prev`/`use_next` select the one-sided
/// variants; both false reduces exactly to the magnitude score.
pub fn score_lap(net: &Network, i: usize, use_prev: bool, use_next: bool) -> Result<Tensor> {
    let w = prunable_weights(net, i)?;
    let shapes = net.layer_shapes();
    let prev = prev_prunable(net, i);
    let next = next_prunable(net, i);
    let (bn_pre, bn_post) = bn_factors(net, i)?;

    let prev_sq = prev.map(|p| out_slice_sq(prunable_weights(net, p).expect("prunable")));
    let next_sq = next.map(|nx| in_slice_sq(prunable_weights(net, nx).expect("prunable")));
    let (pf, nf) = lap_factors(
        net,
        &shapes,
        i,
        prev.map(|p| (p, prev_sq.as_deref().unwrap())),
        next.map(|nx| (nx, next_sq.as_deref().unwrap())),
        use_prev,
        use_next,
        Some((&bn_pre, &bn_post)),
    )?;
    Ok(combine(w, &pf, &nf))
}

/// The sqrt-probability sum per output slice of prunable layer m: singleton
/// sqrt(p_j) for dense layers, the sum over the channel's spatial ReLU
/// positions for conv layers, and exactly 1 when no ReLU follows m.
fn act_slice_factors(
    net: &Network,
    stats: &ActivationStats,
    m: usize,
) -> Result<Vec<f64>> {
    let n_out = out_units(net, m);
    let relu = (m + 1..net.layers().len())
        .take_while(|&r| !net.layers()[r].is_prunable())
        .find(|&r| matches!(net.layers()[r], Layer::Activation(ActKind::Relu)));
    let r = match relu {
        Some(r) => r,
        None => return Ok(vec![1.0; n_out]),
    };
    if stats.per_layer.len() != net.layers().len() {
        return Err(LapError::MissingStats(
            "activation statistics do not match this network".into(),
        ));
    }
    let p = stats.per_layer[r].as_ref().ok_or_else(|| {
        LapError::MissingStats(format!("no activation probabilities for layer {r}"))
    })?;
    match p.shape() {
        [d] => {
            if *d != n_out {
                return Err(LapError::Shape(format!(
                    "activation stats of {d} units for layer {m} with {n_out} outputs"
                )));
            }
            Ok(p.data().iter().map(|v| v.sqrt()).collect())
        }
        [c, _, _] => {
            if *c != n_out {
                return Err(LapError::Shape(format!(
                    "activation stats of {c} channels for layer {m} with {n_out} outputs"
                )));
            }
            let plane = p.len() / c;
            Ok(p.data()
                .chunks(plane)
                .map(|chunk| chunk.iter().map(|v| v.sqrt()).sum())
                .collect())
        }
        other => Err(LapError::Shape(format!(
            "unexpected activation stats shape {other:?}"
        ))),
    }
}

/// Scale output slice j of `w` by `factors[j]`.
fn scale_out_slices(w: &Tensor, factors: &[f64]) -> Tensor {
    let slice = w.len() / w.shape()[0];
    let mut data = w.data().to_vec();
    for (s, chunk) in factors.iter().zip(data.chunks_mut(slice)) {
        for v in chunk {
            *v *= s;
        }
    }
    Tensor::new(w.shape().to_vec(), data).expect("same shape")
}

/// Activation-probability-weighted lookahead: neighbor slices and the central
/// weight come from tensors whose output slices are scaled by the
/// sqrt-probability sums of their following ReLU units.
pub fn score_lap_act(net: &Network, i: usize, stats: &ActivationStats) -> Result<Tensor> {
    prunable_weights(net, i)?;
    let shapes = net.layer_shapes();
    let prev = prev_prunable(net, i);
    let next = next_prunable(net, i);
    let (bn_pre, bn_post) = bn_factors(net, i)?;

    let scaled = |m: usize| -> Result<Tensor> {
        let f = act_slice_factors(net, stats, m)?;
        Ok(scale_out_slices(prunable_weights(net, m)?, &f))
    };
    let w_hat = scaled(i)?;
    let prev_hat = prev.map(scaled).transpose()?;
    let next_hat = next.map(scaled).transpose()?;

    let prev_sq = prev_hat.as_ref().map(out_slice_sq);
    let next_sq = next_hat.as_ref().map(in_slice_sq);
    let (pf, nf) = lap_factors(
        net,
        &shapes,
        i,
        prev.zip(prev_sq.as_deref()),
        next.zip(next_sq.as_deref()),
        true,
        true,
        Some((&bn_pre, &bn_post)),
    )?;
    Ok(combine(&w_hat, &pf, &nf))
}

/// Entrywise sqrt of the OBD saliency h * w^2 / 2, restoring magnitude units.
fn sqrt_saliency(w: &Tensor, h: &Tensor) -> Result<Tensor> {
    let s = score_obd(w, h)?;
    let data = s.data().iter().map(|v| v.sqrt()).collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Lookahead with sqrt-OBD saliencies substituted for weight magnitudes.
pub fn score_obd_lap(net: &Network, i: usize, h: &HessianDiag) -> Result<Tensor> {
    prunable_weights(net, i)?;
    let shapes = net.layer_shapes();
    let prev = prev_prunable(net, i);
    let next = next_prunable(net, i);

    let sqrt_of = |m: usize| -> Result<Tensor> {
        let hm = h.for_layer(m).ok_or_else(|| {
            LapError::MissingStats(format!("no hessian diagonal for layer {m}"))
        })?;
        sqrt_saliency(prunable_weights(net, m)?, hm)
    };
    let t_i = sqrt_of(i)?;
    let t_prev = prev.map(sqrt_of).transpose()?;
    let t_next = next.map(sqrt_of).transpose()?;

    let prev_sq = t_prev.as_ref().map(out_slice_sq);
    let next_sq = t_next.as_ref().map(in_slice_sq);
    let (pf, nf) = lap_factors(
        net,
        &shapes,
        i,
        prev.zip(prev_sq.as_deref()),
        next.zip(next_sq.as_deref()),
        true,
        true,
        None,
    )?;
    Ok(combine(&t_i, &pf, &nf))
}

/// Whole-chain lookahead for fully-connected stacks: slice norms of the
/// full matrix products before and after layer i.
pub fn score_lap_all(net: &Network, i: usize) -> Result<Tensor> {
    let w = prunable_weights(net, i)?;
    let prunable = net.prunable();
    for &m in &prunable {
        if !matches!(net.layers()[m], Layer::Dense { .. }) {
            return Err(LapError::Unsupported(
                "whole-chain lookahead needs an all-dense prunable chain".into(),
            ));
        }
    }
    let dense = |m: usize| prunable_weights(net, m).expect("dense");

    // P = W_{i-1} ... W_1: rows span layer i's input units.
    let mut p: Option<Tensor> = None;
    for &m in prunable.iter().filter(|&&m| m < i) {
        p = Some(match p {
            None => dense(m).clone(),
            Some(acc) => crate::tensor::matmul(dense(m), &acc)?,
        });
    }
    // S = W_L ... W_{i+1}: columns span layer i's output units.
    let mut s: Option<Tensor> = None;
    for &m in prunable.iter().filter(|&&m| m > i) {
        s = Some(match s {
            None => dense(m).clone(),
            Some(acc) => crate::tensor::matmul(dense(m), &acc)?,
        });
    }

    let n_in = in_units(net, i);
    let n_out = out_units(net, i);
    let pf: Vec<f64> = match &p {
        Some(p) => out_slice_sq(p).iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; n_in],
    };
    let nf: Vec<f64> = match &s {
        Some(s) => in_slice_sq(s).iter().map(|v| v.sqrt()).collect(),
        None => vec![1.0; n_out],
    };
    if pf.len() != n_in || nf.len() != n_out {
        return Err(LapError::Shape(
            "chain products do not match layer i's unit counts".into(),
        ));
    }
    Ok(combine(w, &pf, &nf))
}

/// Squared lookahead scores for a dense triple via reduced tensors and
/// broadcasting: out[k,j] = W[k,j]^2 * sum_m W_prev[j,m]^2 * sum_m W_next[m,k]^2.
pub fn fast_lap_squared(w_prev: &Tensor, w: &Tensor, w_next: &Tensor) -> Result<Tensor> {
    if w_prev.rank() != 2 || w.rank() != 2 || w_next.rank() != 2 {
        return Err(LapError::Shape("fast lookahead expects dense matrices".into()));
    }
    let (out, inn) = (w.shape()[0], w.shape()[1]);
    if w_prev.shape()[0] != inn {
        return Err(LapError::Shape(format!(
            "previous layer emits {} units, layer consumes {inn}",
            w_prev.shape()[0]
        )));
    }
    if w_next.shape()[1] != out {
        return Err(LapError::Shape(format!(
            "next layer consumes {} units, layer emits {out}",
            w_next.shape()[1]
        )));
    }
    let rowsq = out_slice_sq(w_prev);
    let colsq = in_slice_sq(w_next);
    let mut data = vec![0.0; w.len()];
    for k in 0..out {
        let cf = colsq[k];
        let row = &w.data()[k * inn..(k + 1) * inn];
        let orow = &mut data[k * inn..(k + 1) * inn];
        for j in 0..inn {
            orow[j] = row[j] * row[j] * rowsq[j] * cf;
        }
    }
    Tensor::new(w.shape().to_vec(), data)
}

/// Score every prunable layer under one criterion. The lookahead family runs
/// fused: each weight tensor is swept once for both slice-sum families, then
/// factors are assembled per layer, so its cost stays near the magnitude
/// scorer's.
pub fn score_network(
    net: &Network,
    criterion: Criterion,
    ctx: &PruneContext<'_>,
) -> Result<Vec<ScoreTensor>> {
    let prunable = net.prunable();
    let mut out = Vec::with_capacity(prunable.len());
    match criterion {
        Criterion::Mp => {
            for &i in &prunable {
                let w = prunable_weights(net, i)?;
                out.push(ScoreTensor::new(i, score_mp(w), w.shape())?);
            }
        }
        Criterion::Rp => {
            for &i in &prunable {
                let w = prunable_weights(net, i)?;
                let seed = ctx.rp_seed.wrapping_add(i as u64);
                out.push(ScoreTensor::new(i, score_random(w, seed), w.shape())?);
            }
        }
        Criterion::Lfp | Criterion::Lbp | Criterion::Lap => {
            let use_prev = criterion != Criterion::Lfp;
            let use_next = criterion != Criterion::Lbp;
            let shapes = net.layer_shapes();
            let sq: Vec<(usize, SliceSq)> = prunable
                .iter()
                .map(|&m| (m, slice_sq_both(prunable_weights(net, m).expect("prunable"))))
                .collect();
            let sq_for = |m: usize| -> &SliceSq {
                &sq.iter().find(|(idx, _)| *idx == m).expect("prunable").1
            };
            for &i in &prunable {
                let w = prunable_weights(net, i)?;
                let prev = prev_prunable(net, i);
                let next = next_prunable(net, i);
                let (bn_pre, bn_post) = bn_factors(net, i)?;
                let (pf, nf) = lap_factors(
                    net,
                    &shapes,
                    i,
                    prev.map(|p| (p, sq_for(p).0.as_slice())),
                    next.map(|nx| (nx, sq_for(nx).1.as_slice())),
                    use_prev,
                    use_next,
                    Some((&bn_pre, &bn_post)),
                )?;
                out.push(ScoreTensor::new(i, combine(w, &pf, &nf), w.shape())?);
            }
        }
        Criterion::LapAll => {
            for &i in &prunable {
                let w = prunable_weights(net, i)?;
                out.push(ScoreTensor::new(i, score_lap_all(net, i)?, w.shape())?);
            }
        }
        Criterion::LapAct => {
            let stats = ctx.activation.as_ref().ok_or_else(|| {
                LapError::MissingStats("activation probabilities required; estimate them first".into())
            })?;
            for &i in &prunable {
                let w = prunable_weights(net, i)?;
                out.push(ScoreTensor::new(i, score_lap_act(net, i, stats)?, w.shape())?);
            }
        }
        Criterion::Obd => {
            let h = ctx.hessian.as_ref().ok_or_else(|| {
                LapError::MissingStats("hessian diagonal required; estimate it first".into())
            })?;
            for &i in &prunable {
                let w = prunable_weights(net, i)?;
                let hi = h.for_layer(i).ok_or_else(|| {
                    LapError::MissingStats(format!("no hessian diagonal for layer {i}"))
                })?;
                out.push(ScoreTensor::new(i, score_obd(w, hi)?, w.shape())?);
            }
        }
        Criterion::ObdLap => {
            let h = ctx.hessian.as_ref().ok_or_else(|| {
                LapError::MissingStats("hessian diagonal required; estimate it first".into())
            })?;
            for &i in &prunable {
                let w = prunable_weights(net, i)?;
                out.push(ScoreTensor::new(i, score_obd_lap(net, i, h)?, w.shape())?);
            }
        }
    }
    Ok(out)
}
