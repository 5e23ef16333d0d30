//! Mask selection: sparsity schedules, layerwise/global/channel selection,
//! and the pruning orchestrator with ordered and sequential strategies.
//!
//! Pruning never resurrects: when a network already carries masks, selection
//! is restricted to surviving entries and keep targets are clamped to the
//! survivor counts, which also makes one-shot pruning idempotent.

use crate::criteria::{
    score_lap, score_lap_act, score_lap_all, score_mp, score_network, score_obd, score_obd_lap,
    score_random, Criterion, PruneContext, ScoreTensor,
};
use crate::error::{LapError, Result};
use crate::mask::Mask;
use crate::network::{Layer, Network};
use crate::stats::{estimate_activation_probs, hessian_diagonal, ActivationStats, HessianDiag};

/// Per-layer keep-fraction rule: conv layers keep p^tau, dense layers q^tau,
/// and the last dense layer ((1+q)/2)^tau.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsitySchedule {
    pub p: f64,
    pub q: f64,
    pub tau: u32,
}

impl SparsitySchedule {
    pub fn new(p: f64, q: f64, tau: u32) -> Result<SparsitySchedule> {
        let s = SparsitySchedule { p, q, tau };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("p", self.p), ("q", self.q)] {
            if !(0.0..=1.0).contains(&v) || v.is_nan() {
                return Err(LapError::Config(format!(
                    "schedule base {name}={v} must lie in [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Layerwise,
    Global,
    GlobalNormalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Structure {
    Unstructured,
    ChannelL1,
    ChannelL2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Order {
    Simultaneous,
    Forward,
    Backward,
}

macro_rules! tagged_enum {
    ($ty:ident { $($variant:ident => $tag:literal),+ $(,)? }) => {
        impl $ty {
            pub fn tag(&self) -> &'static str {
                match self {
                    $($ty::$variant => $tag),+
                }
            }

            pub fn parse(s: &str) -> Result<$ty> {
                match s {
                    $($tag => Ok($ty::$variant),)+
                    other => Err(LapError::InvalidArgument(format!(
                        concat!("unknown ", stringify!($ty), " '{}'; expected one of ",
                                tagged_enum!(@tags $($tag),+)),
                        other
                    ))),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.tag())
            }
        }
    };
    (@tags $first:literal $(, $rest:literal)*) => {
        concat!($first $(, ", ", $rest)*)
    };
}

tagged_enum!(Scope {
    Layerwise => "layerwise",
    Global => "global",
    GlobalNormalized => "global-normalized",
});

tagged_enum!(Structure {
    Unstructured => "unstructured",
    ChannelL1 => "channel-l1",
    ChannelL2 => "channel-l2",
});

tagged_enum!(Order {
    Simultaneous => "simultaneous",
    Forward => "forward",
    Backward => "backward",
});

/// Full pruning recipe.
#[derive(Clone, Debug)]
pub struct PruneConfig {
    pub criterion: Criterion,
    pub scope: Scope,
    pub structure: Structure,
    pub order: Order,
    /// 1 = one-shot; n > 1 splits each layer's pruning budget into n passes.
    pub sequential_steps: usize,
    pub schedule: SparsitySchedule,
    pub seed: u64,
}

impl PruneConfig {
    pub fn new(criterion: Criterion, schedule: SparsitySchedule) -> PruneConfig {
        PruneConfig {
            criterion,
            scope: Scope::Layerwise,
            structure: Structure::Unstructured,
            order: Order::Simultaneous,
            sequential_steps: 1,
            schedule,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.sequential_steps < 1 {
            return Err(LapError::Config("sequential_steps must be at least 1".into()));
        }
        if self.order != Order::Simultaneous && !self.criterion.is_lap_family() {
            return Err(LapError::Config(format!(
                "ordered pruning ({}) needs a lookahead-family criterion, got {}",
                self.order, self.criterion
            )));
        }
        if self.structure != Structure::Unstructured {
            if self.criterion == Criterion::LapAll {
                return Err(LapError::Config(
                    "channel structure is incompatible with the whole-chain criterion".into(),
                ));
            }
            if self.scope != Scope::Layerwise {
                return Err(LapError::Config(
                    "channel structure requires layerwise scope".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Keep counts per prunable layer, in layer-index order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrunePlan {
    /// (layer index, units to keep); units are weights, or output channels
    /// under a channel structure.
    pub keep: Vec<(usize, usize)>,
}

fn last_dense_layer(net: &Network) -> Option<usize> {
    net.prunable()
        .into_iter()
        .rev()
        .find(|&i| matches!(net.layers()[i], Layer::Dense { .. }))
}

/// The schedule's keep fraction for every prunable layer.
pub fn keep_fractions(schedule: &SparsitySchedule, net: &Network) -> Result<Vec<(usize, f64)>> {
    schedule.validate()?;
    let last_dense = last_dense_layer(net);
    let tau = schedule.tau as i32;
    Ok(net
        .prunable()
        .into_iter()
        .map(|i| {
            let base = match &net.layers()[i] {
                Layer::Conv2d { .. } => schedule.p,
                Layer::Dense { .. } if Some(i) == last_dense => (1.0 + schedule.q) / 2.0,
                Layer::Dense { .. } => schedule.q,
                _ => unreachable!("prunable layers are dense or conv"),
            };
            (i, base.powi(tau))
        })
        .collect())
}

/// Half-up rounding with a floor of one unit and a cap at the unit count.
fn keep_count(fraction: f64, units: usize) -> usize {
    ((fraction * units as f64).round() as usize).clamp(1, units.max(1))
}

/// Keep counts in weights for every prunable layer.
pub fn prune_plan(schedule: &SparsitySchedule, net: &Network) -> Result<PrunePlan> {
    let keep = keep_fractions(schedule, net)?
        .into_iter()
        .map(|(i, f)| (i, keep_count(f, net.layers()[i].weights().unwrap().len())))
        .collect();
    Ok(PrunePlan { keep })
}

/// Indices of the `keep` largest alive values; ties broken by lowest index.
fn top_k(values: &[f64], alive: &[bool], keep: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..values.len()).filter(|&i| alive[i]).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut bits = vec![false; values.len()];
    for &i in idx.iter().take(keep) {
        bits[i] = true;
    }
    bits
}

/// Keep the `keep` highest-scoring weights of one layer.
pub fn select_layerwise(scores: &ScoreTensor, keep: usize) -> Result<Mask> {
    let n = scores.values.len();
    if keep > n {
        return Err(LapError::InvalidArgument(format!(
            "keep {keep} exceeds {n} weights"
        )));
    }
    let alive = vec![true; n];
    Mask::new(scores.layer, top_k(scores.values.data(), &alive, keep))
}

/// Keep the `total_keep` highest-scoring weights pooled across layers,
/// optionally normalizing each layer's scores by their Frobenius norm first.
/// Ties break by (layer index, flat index).
pub fn select_global(
    scores: &[ScoreTensor],
    normalize: bool,
    total_keep: usize,
) -> Result<Vec<Mask>> {
    let alive: Vec<Vec<bool>> = scores
        .iter()
        .map(|s| vec![true; s.values.len()])
        .collect();
    select_global_from(scores, &alive, normalize, total_keep)
}

fn select_global_from(
    scores: &[ScoreTensor],
    alive: &[Vec<bool>],
    normalize: bool,
    total_keep: usize,
) -> Result<Vec<Mask>> {
    let total_alive: usize = alive.iter().map(|a| a.iter().filter(|&&b| b).count()).sum();
    if total_keep > total_alive {
        return Err(LapError::InvalidArgument(format!(
            "total keep {total_keep} exceeds {total_alive} selectable weights"
        )));
    }
    // (value, position in `scores`, flat index); layer order in `scores` is
    // ascending by construction, so position order is layer order.
    let mut pool: Vec<(f64, usize, usize)> = Vec::with_capacity(total_alive);
    for (pos, st) in scores.iter().enumerate() {
        let norm = if normalize {
            let n = st.values.frobenius_norm();
            if n == 0.0 {
                1.0
            } else {
                n
            }
        } else {
            1.0
        };
        for (i, v) in st.values.data().iter().enumerate() {
            if alive[pos][i] {
                pool.push((v / norm, pos, i));
            }
        }
    }
    pool.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("scores are finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut bits: Vec<Vec<bool>> = scores
        .iter()
        .map(|s| vec![false; s.values.len()])
        .collect();
    for &(_, pos, i) in pool.iter().take(total_keep) {
        bits[pos][i] = true;
    }
    scores
        .iter()
        .zip(bits)
        .map(|(s, b)| Mask::new(s.layer, b))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelAgg {
    L1,
    L2,
}

/// Aggregate a layer's scores per output slice.
fn channel_aggregates(scores: &ScoreTensor, agg: ChannelAgg) -> Vec<f64> {
    let channels = scores.values.shape()[0];
    let slice = scores.values.len() / channels;
    scores
        .values
        .data()
        .chunks(slice)
        .map(|c| match agg {
            ChannelAgg::L1 => c.iter().sum(),
            ChannelAgg::L2 => c.iter().map(|v| v * v).sum::<f64>().sqrt(),
        })
        .collect()
}

/// Keep the `keep_channels` output slices with the largest aggregated scores
/// and zero every weight of the rest.
pub fn select_channels(
    scores: &ScoreTensor,
    agg: ChannelAgg,
    keep_channels: usize,
) -> Result<Mask> {
    let channels = scores.values.shape()[0];
    if keep_channels > channels {
        return Err(LapError::InvalidArgument(format!(
            "keep {keep_channels} exceeds {channels} output channels"
        )));
    }
    let aggs = channel_aggregates(scores, agg);
    let alive = vec![true; channels];
    let ch_bits = top_k(&aggs, &alive, keep_channels);
    let slice = scores.values.len() / channels;
    let mut bits = vec![false; scores.values.len()];
    for (ch, &keep) in ch_bits.iter().enumerate() {
        if keep {
            bits[ch * slice..(ch + 1) * slice].fill(true);
        }
    }
    Mask::new(scores.layer, bits)
}

/// Stats and seed with ownership resolved, computed once on the unpruned net.
struct ScoringInputs {
    activation: Option<ActivationStats>,
    hessian: Option<HessianDiag>,
    seed: u64,
}

impl ScoringInputs {
    fn as_context(&self) -> PruneContext<'static> {
        PruneContext {
            activation: self.activation.clone(),
            hessian: self.hessian.clone(),
            data: None,
            rp_seed: self.seed,
        }
    }
}

fn materialize_stats(
    net: &Network,
    config: &PruneConfig,
    ctx: &PruneContext<'_>,
) -> Result<ScoringInputs> {
    let activation = if config.criterion.needs_activation_stats() {
        Some(match (&ctx.activation, ctx.data) {
            (Some(a), _) => a.clone(),
            (None, Some(d)) => estimate_activation_probs(net, d)?,
            (None, None) => {
                return Err(LapError::MissingStats(
                    "criterion needs activation probabilities: supply them or a dataset".into(),
                ))
            }
        })
    } else {
        None
    };
    let hessian = if config.criterion.needs_hessian() {
        Some(match (&ctx.hessian, ctx.data) {
            (Some(h), _) => h.clone(),
            (None, Some(d)) => hessian_diagonal(net, d)?,
            (None, None) => {
                return Err(LapError::MissingStats(
                    "criterion needs a hessian diagonal: supply it or a dataset".into(),
                ))
            }
        })
    } else {
        None
    };
    Ok(ScoringInputs {
        activation,
        hessian,
        seed: config.seed,
    })
}

/// Score a single layer of the current (possibly masked) network.
fn score_one(
    net: &Network,
    criterion: Criterion,
    i: usize,
    inputs: &ScoringInputs,
) -> Result<ScoreTensor> {
    let w = net.layers()[i].weights().expect("prunable layer");
    let values = match criterion {
        Criterion::Mp => score_mp(w),
        Criterion::Rp => score_random(w, inputs.seed.wrapping_add(i as u64)),
        Criterion::Lfp => score_lap(net, i, false, true)?,
        Criterion::Lbp => score_lap(net, i, true, false)?,
        Criterion::Lap => score_lap(net, i, true, true)?,
        Criterion::LapAll => score_lap_all(net, i)?,
        Criterion::LapAct => {
            score_lap_act(net, i, inputs.activation.as_ref().expect("materialized"))?
        }
        Criterion::Obd => {
            let h = inputs.hessian.as_ref().expect("materialized");
            let hi = h.for_layer(i).ok_or_else(|| {
                LapError::MissingStats(format!("no hessian diagonal for layer {i}"))
            })?;
            score_obd(w, hi)?
        }
        Criterion::ObdLap => {
            score_obd_lap(net, i, inputs.hessian.as_ref().expect("materialized"))?
        }
    };
    ScoreTensor::new(i, values, w.shape())
}

/// Alive flags per selection unit for one layer of the working network.
fn alive_units(net: &Network, i: usize, structure: Structure) -> Vec<bool> {
    let w = net.layers()[i].weights().expect("prunable layer");
    let weight_alive: Vec<bool> = match net.mask(i) {
        Some(m) => m.bits.clone(),
        None => vec![true; w.len()],
    };
    match structure {
        Structure::Unstructured => weight_alive,
        Structure::ChannelL1 | Structure::ChannelL2 => {
            let channels = w.shape()[0];
            let slice = w.len() / channels;
            weight_alive
                .chunks(slice)
                .map(|c| c.iter().any(|&b| b))
                .collect()
        }
    }
}

/// Build the layer's weight mask from surviving-unit flags, preserving the
/// existing weight mask inside surviving channels.
fn units_to_mask(net: &Network, i: usize, unit_bits: &[bool], structure: Structure) -> Mask {
    let w = net.layers()[i].weights().expect("prunable layer");
    match structure {
        Structure::Unstructured => Mask::new(i, unit_bits.to_vec()).expect("nonempty"),
        Structure::ChannelL1 | Structure::ChannelL2 => {
            let channels = w.shape()[0];
            let slice = w.len() / channels;
            let prior: Vec<bool> = match net.mask(i) {
                Some(m) => m.bits.clone(),
                None => vec![true; w.len()],
            };
            let mut bits = vec![false; w.len()];
            for (ch, &keep) in unit_bits.iter().enumerate() {
                if keep {
                    bits[ch * slice..(ch + 1) * slice]
                        .copy_from_slice(&prior[ch * slice..(ch + 1) * slice]);
                }
            }
            Mask::new(i, bits).expect("nonempty")
        }
    }
}

/// Select within one layer's alive units and return the new weight mask.
fn select_one(
    net: &Network,
    i: usize,
    scores: &ScoreTensor,
    keep: usize,
    structure: Structure,
) -> Mask {
    let alive = alive_units(net, i, structure);
    let unit_scores = match structure {
        Structure::Unstructured => scores.values.data().to_vec(),
        Structure::ChannelL1 => channel_aggregates(scores, ChannelAgg::L1),
        Structure::ChannelL2 => channel_aggregates(scores, ChannelAgg::L2),
    };
    let unit_bits = top_k(&unit_scores, &alive, keep);
    units_to_mask(net, i, &unit_bits, structure)
}

/// Per-step cumulative keep targets: the pruning budget splits into
/// `steps` equal chunks with the remainder removed in the last step.
fn step_targets(alive: usize, final_keep: usize, steps: usize) -> Vec<usize> {
    let budget = alive.saturating_sub(final_keep);
    let chunk = budget / steps;
    (1..=steps)
        .map(|t| {
            if t == steps {
                final_keep
            } else {
                alive - chunk * t
            }
        })
        .collect()
}

/// Orchestrated pruning: derives keep targets from the schedule, scores under
/// the configured criterion, and applies masks in the configured scope,
/// structure, order, and number of sequential passes. Data-dependent
/// statistics are computed once, on the network as given.
pub fn prune(
    net: &Network,
    config: &PruneConfig,
    ctx: &PruneContext<'_>,
) -> Result<(Network, Vec<Mask>)> {
    config.validate()?;
    let mut work = net.clone();
    work.enforce_masks();
    let inputs = materialize_stats(&work, config, ctx)?;
    let score_ctx = inputs.as_context();
    let prunable = work.prunable();
    let channel_structure = config.structure != Structure::Unstructured;

    // Final keep target per prunable layer, in selection units, clamped to
    // what is still alive.
    let fractions = keep_fractions(&config.schedule, &work)?;
    let mut final_keep = Vec::with_capacity(prunable.len());
    let mut alive0 = Vec::with_capacity(prunable.len());
    for &(i, f) in &fractions {
        let units = if channel_structure {
            work.layers()[i].weights().unwrap().shape()[0]
        } else {
            work.layers()[i].weights().unwrap().len()
        };
        let alive = alive_units(&work, i, config.structure)
            .iter()
            .filter(|&&b| b)
            .count();
        final_keep.push(keep_count(f, units).min(alive));
        alive0.push(alive);
    }
    let steps = config.sequential_steps;
    let targets: Vec<Vec<usize>> = alive0
        .iter()
        .zip(&final_keep)
        .map(|(&a, &k)| step_targets(a, k, steps))
        .collect();

    for t in 0..steps {
        match config.order {
            Order::Simultaneous => match config.scope {
                Scope::Layerwise => {
                    let scores = score_network(&work, config.criterion, &score_ctx)?;
                    let masks: Vec<Mask> = scores
                        .iter()
                        .enumerate()
                        .map(|(pos, st)| {
                            select_one(&work, st.layer, st, targets[pos][t], config.structure)
                        })
                        .collect();
                    work.attach_masks(masks)?;
                }
                Scope::Global | Scope::GlobalNormalized => {
                    let scores = score_network(&work, config.criterion, &score_ctx)?;
                    let alive: Vec<Vec<bool>> = prunable
                        .iter()
                        .map(|&i| alive_units(&work, i, Structure::Unstructured))
                        .collect();
                    let total_keep: usize = targets.iter().map(|ts| ts[t]).sum();
                    let masks = select_global_from(
                        &scores,
                        &alive,
                        config.scope == Scope::GlobalNormalized,
                        total_keep,
                    )?;
                    work.attach_masks(masks)?;
                }
            },
            Order::Forward => {
                for (pos, &i) in prunable.iter().enumerate() {
                    let st = score_one(&work, config.criterion, i, &inputs)?;
                    let mask = select_one(&work, i, &st, targets[pos][t], config.structure);
                    work.attach_masks(vec![mask])?;
                }
            }
            Order::Backward => {
                for (pos, &i) in prunable.iter().enumerate().rev() {
                    let st = score_one(&work, config.criterion, i, &inputs)?;
                    let mask = select_one(&work, i, &st, targets[pos][t], config.structure);
                    work.attach_masks(vec![mask])?;
                }
            }
        }
    }

    let masks: Vec<Mask> = prunable
        .iter()
        .map(|&i| work.mask(i).expect("every prunable layer was masked").clone())
        .collect();
    Ok((work, masks))
}
