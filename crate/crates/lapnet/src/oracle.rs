//! Independent verification oracles: explicit-product block distortions,
//! exhaustive mask search on tiny instances, the binary-quadratic reduction
//! with its own Jacobi eigensolver, doubly-block-circulant convolution
//! matrices built by index arithmetic, the operator-norm bound check, and a
//! finite-difference Hessian diagonal.
//!
//! Everything here recomputes from first principles and shares no code path
//! with the scoring implementations it checks.

use crate::error::{LapError, Result};
use crate::mask::Mask;
use crate::network::{Layer, Mode, Network};
use crate::stats::HessianDiag;
use crate::tensor::{matmul, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A dense three-layer operator block W_next . W_cur . W_prev.
#[derive(Clone, Debug)]
pub struct BlockInstance {
    pub w_prev: Tensor,
    pub w_cur: Tensor,
    pub w_next: Tensor,
}

impl BlockInstance {
    pub fn new(w_prev: Tensor, w_cur: Tensor, w_next: Tensor) -> Result<BlockInstance> {
        if w_prev.rank() != 2 || w_cur.rank() != 2 || w_next.rank() != 2 {
            return Err(LapError::Shape("block matrices must be rank 2".into()));
        }
        if w_prev.shape()[0] != w_cur.shape()[1] || w_next.shape()[1] != w_cur.shape()[0] {
            return Err(LapError::Shape(format!(
                "block shapes do not compose: {:?} . {:?} . {:?}",
                w_next.shape(),
                w_cur.shape(),
                w_prev.shape()
            )));
        }
        Ok(BlockInstance {
            w_prev,
            w_cur,
            w_next,
        })
    }

    pub fn weight_count(&self) -> usize {
        self.w_cur.len()
    }

    /// View the block as a three-layer dense network with zero biases, so
    /// the scoring functions can run on it directly.
    pub fn as_network(&self) -> Result<Network> {
        let layers = [&self.w_prev, &self.w_cur, &self.w_next]
            .iter()
            .map(|m| Layer::Dense {
                weight: (*m).clone(),
                bias: Tensor::zeros(vec![m.shape()[0]]),
            })
            .collect();
        Network::new(vec![self.w_prev.shape()[1]], layers)
    }
}

fn apply_bits(w: &Tensor, bits: &[bool]) -> Tensor {
    let data = w
        .data()
        .iter()
        .zip(bits)
        .map(|(v, &b)| if b { *v } else { 0.0 })
        .collect();
    Tensor::new(w.shape().to_vec(), data).expect("same shape")
}

/// Frobenius distortion of masking the middle factor, by explicit products.
pub fn block_distortion(inst: &BlockInstance, mask: &Mask) -> Result<f64> {
    if mask.bits.len() != inst.w_cur.len() {
        return Err(LapError::Shape(format!(
            "mask has {} bits for {} middle weights",
            mask.bits.len(),
            inst.w_cur.len()
        )));
    }
    let full = matmul(&inst.w_next, &matmul(&inst.w_cur, &inst.w_prev)?)?;
    let masked = apply_bits(&inst.w_cur, &mask.bits);
    let pruned = matmul(&inst.w_next, &matmul(&masked, &inst.w_prev)?)?;
    let diff: f64 = full
        .data()
        .iter()
        .zip(pruned.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(diff.sqrt())
}

/// Exhaustive minimum-distortion mask with exactly `keep` survivors.
/// Candidates run in ascending bit-pattern order (bit j = flat index j), so
/// ties resolve to the lowest pattern.
pub fn brute_force_mask(inst: &BlockInstance, keep: usize) -> Result<(Mask, f64)> {
    let n = inst.weight_count();
    if n > 20 {
        return Err(LapError::InvalidArgument(format!(
            "brute force is capped at 20 weights, instance has {n}"
        )));
    }
    if keep > n {
        return Err(LapError::InvalidArgument(format!(
            "keep {keep} exceeds {n} weights"
        )));
    }
    let mut best: Option<(u32, f64)> = None;
    for pattern in 0u32..(1u32 << n) {
        if pattern.count_ones() as usize != keep {
            continue;
        }
        let bits: Vec<bool> = (0..n).map(|j| pattern >> j & 1 == 1).collect();
        let mask = Mask::new(0, bits)?;
        let d = block_distortion(inst, &mask)?;
        let better = match best {
            None => true,
            Some((_, bd)) => d < bd,
        };
        if better {
            best = Some((pattern, d));
        }
    }
    let (pattern, d) = best.expect("at least one candidate for keep <= n");
    let bits: Vec<bool> = (0..n).map(|j| pattern >> j & 1 == 1).collect();
    Ok((Mask::new(0, bits)?, d))
}

/// Exact Frobenius distortion of the whole dense-chain product when a single
/// weight of layer `layer` (flat index `flat`) is zeroed.
pub fn whole_chain_distortion(net: &Network, layer: usize, flat: usize) -> Result<f64> {
    let prunable = net.prunable();
    for &m in &prunable {
        if !matches!(net.layers()[m], Layer::Dense { .. }) {
            return Err(LapError::Unsupported(
                "whole-chain distortion needs an all-dense chain".into(),
            ));
        }
    }
    if !prunable.contains(&layer) {
        return Err(LapError::InvalidArgument(format!(
            "layer {layer} is not a dense layer of the chain"
        )));
    }
    let weights = |m: usize| net.layers()[m].weights().expect("dense layer");
    if flat >= weights(layer).len() {
        return Err(LapError::InvalidArgument(format!(
            "flat index {flat} out of range"
        )));
    }
    let product = |zeroed: bool| -> Result<Tensor> {
        let mut acc: Option<Tensor> = None;
        for &m in &prunable {
            let w = if zeroed && m == layer {
                let mut t = weights(m).clone();
                t.data_mut()[flat] = 0.0;
                t
            } else {
                weights(m).clone()
            };
            acc = Some(match acc {
                None => w,
                Some(prev) => matmul(&w, &prev)?,
            });
        }
        Ok(acc.expect("chain has at least one layer"))
    };
    let full = product(false)?;
    let pruned = product(true)?;
    let diff: f64 = full
        .data()
        .iter()
        .zip(pruned.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(diff.sqrt())
}

/// A symmetric matrix for the binary-quadratic reduction.
#[derive(Clone, Debug)]
pub struct BqpInstance {
    pub a: Tensor,
}

impl BqpInstance {
    pub fn new(a: Tensor) -> Result<BqpInstance> {
        if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
            return Err(LapError::Shape("instance must be a square matrix".into()));
        }
        let n = a.shape()[0];
        for i in 0..n {
            for j in 0..n {
                let d = (a.data()[i * n + j] - a.data()[j * n + i]).abs();
                if d > 1e-12 {
                    return Err(LapError::InvalidArgument(format!(
                        "matrix is not symmetric: |A[{i},{j}] - A[{j},{i}]| = {d}"
                    )));
                }
            }
        }
        Ok(BqpInstance { a })
    }

    pub fn n(&self) -> usize {
        self.a.shape()[0]
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns the
/// eigenvalues and the orthogonal matrix with eigenvectors as columns.
pub fn jacobi_eigh(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = a.shape()[0];
    let mut m = a.data().to_vec();
    let mut u = vec![0.0; n * n];
    for i in 0..n {
        u[i * n + i] = 1.0;
    }
    let scale = a.frobenius_norm().max(1e-300);
    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for p in 0..n {
            for q in 0..n {
                if p != q {
                    s += m[p * n + q] * m[p * n + q];
                }
            }
        }
        s.sqrt()
    };
    let mut converged = false;
    for _sweep in 0..100 {
        if off(&m) <= 1e-13 * scale {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let ukp = u[k * n + p];
                    let ukq = u[k * n + q];
                    u[k * n + p] = c * ukp - s * ukq;
                    u[k * n + q] = s * ukp + c * ukq;
                }
            }
        }
    }
    if !converged && off(&m) > 1e-10 * scale {
        return Err(LapError::Numeric(
            "Jacobi eigendecomposition did not converge".into(),
        ));
    }
    let eig = (0..n).map(|i| m[i * n + i]).collect();
    Ok((eig, Tensor::new(vec![n, n], u)?))
}

/// Appendix-style reduction: H = A - lambda_min I when the smallest eigenvalue
/// is negative (H = A otherwise), factored as W1 = sqrt(Lambda) U^T. Returns
/// W1 and, for every x in {0,1}^n indexed by bit pattern (bit i = x_i), the
/// pair (x^T H x, ||W1 x||^2); the two must agree to 1e-8.
pub fn bqp_reduce(inst: &BqpInstance) -> Result<(Tensor, Vec<(f64, f64)>)> {
    let n = inst.n();
    if n > 12 {
        return Err(LapError::InvalidArgument(format!(
            "reduction is capped at n = 12, instance has n = {n}"
        )));
    }
    let (eig_a, _) = jacobi_eigh(&inst.a)?;
    let lambda_min = eig_a.iter().copied().fold(f64::INFINITY, f64::min);
    let mut h = inst.a.clone();
    if lambda_min < 0.0 {
        for i in 0..n {
            let d = h.idx2(i, i);
            h.data_mut()[d] -= lambda_min;
        }
    }
    let (eig_h, u) = jacobi_eigh(&h)?;
    // W1[i, j] = sqrt(lambda_i) * U[j, i]; tiny negative eigenvalues are
    // rounding residue of the shift and clamp to zero.
    let w1 = Tensor::from_fn(vec![n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        eig_h[i].max(0.0).sqrt() * u.data()[j * n + i]
    });

    let mut table = Vec::with_capacity(1 << n);
    for pattern in 0u32..(1u32 << n) {
        let x: Vec<f64> = (0..n).map(|i| f64::from(pattern >> i & 1)).collect();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += x[i] * h.data()[i * n + j] * x[j];
            }
        }
        let mut norm_sq = 0.0;
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                row += w1.data()[i * n + j] * x[j];
            }
            norm_sq += row * row;
        }
        table.push((quad, norm_sq));
    }
    Ok((w1, table))
}

/// Dense hw x hw matrix J with J . vec(x) = vec of the circular convolution
/// of x by `kernel`, built purely by index arithmetic.
pub fn circulant_jacobian(kernel: &Tensor, spatial: (usize, usize)) -> Result<Tensor> {
    if kernel.rank() != 2 {
        return Err(LapError::Shape(format!(
            "kernel must be rank 2, got {:?}",
            kernel.shape()
        )));
    }
    let (h, w) = spatial;
    if h * w > 64 {
        return Err(LapError::InvalidArgument(format!(
            "spatial size {h}x{w} exceeds the 64-entry cap"
        )));
    }
    let (kh, kw) = (kernel.shape()[0], kernel.shape()[1]);
    let (cy, cx) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut j = vec![0.0; h * w * h * w];
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for dy in 0..kh {
                for dx in 0..kw {
                    let iy = (y as i64 + dy as i64 - cy as i64).rem_euclid(h as i64) as usize;
                    let ix = (x as i64 + dx as i64 - cx as i64).rem_euclid(w as i64) as usize;
                    let col = iy * w + ix;
                    j[row * h * w + col] += kernel.data()[dy * kw + dx];
                }
            }
        }
    }
    Tensor::new(vec![h * w, h * w], j)
}

/// Max over sampled Gaussian inputs of ||Wx - (M.W)x|| / (||W - M.W||_F ||x||),
/// which the Frobenius bound caps at 1.
pub fn distortion_bound_check(
    w: &Tensor,
    mask: &Mask,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if w.rank() != 2 {
        return Err(LapError::Shape("bound check expects a dense matrix".into()));
    }
    if mask.bits.len() != w.len() {
        return Err(LapError::Shape(format!(
            "mask has {} bits for {} weights",
            mask.bits.len(),
            w.len()
        )));
    }
    let (out, inn) = (w.shape()[0], w.shape()[1]);
    // D = W - M.W holds exactly the pruned entries.
    let d: Vec<f64> = w
        .data()
        .iter()
        .zip(&mask.bits)
        .map(|(v, &b)| if b { 0.0 } else { *v })
        .collect();
    let d_norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if d_norm == 0.0 {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio: f64 = 0.0;
    for _ in 0..samples {
        let x: Vec<f64> = (0..inn).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x_norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if x_norm == 0.0 {
            continue;
        }
        let mut dx_sq = 0.0;
        for k in 0..out {
            let row = &d[k * inn..(k + 1) * inn];
            let dot: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
            dx_sq += dot * dot;
        }
        max_ratio = max_ratio.max(dx_sq.sqrt() / (d_norm * x_norm));
    }
    Ok(max_ratio)
}

/// Central second difference of a scalar function at w with step h.
pub fn second_difference(f: impl Fn(f64) -> f64, w: f64, h: f64) -> f64 {
    (f(w + h) - 2.0 * f(w) + f(w - h)) / (h * h)
}

/// Mean softmax cross-entropy of the network on a dataset, evaluated in
/// batches with frozen normalization statistics.
fn mean_ce_loss(net: &Network, data: &crate::data::Dataset) -> Result<f64> {
    let n = data.len();
    if n == 0 {
        return Err(LapError::Data("empty dataset".into()));
    }
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let (x, labels) = data.gather(&idx)?;
        let logits = net.forward(&x, Mode::Eval)?;
        let classes = logits.shape()[1];
        for (b, &label) in labels.iter().enumerate() {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        start = end;
    }
    Ok(total / n as f64)
}

/// Finite-difference Hessian diagonal of the mean loss, with per-weight step
/// h_base * max(1, |w|). Only practical for tiny networks.
pub fn finite_diff_hessian_diag(
    net: &Network,
    data: &crate::data::Dataset,
    h_base: f64,
) -> Result<HessianDiag> {
    if net.total_prunable_weights() > 500 {
        return Err(LapError::InvalidArgument(format!(
            "finite differences are capped at 500 weights, network has {}",
            net.total_prunable_weights()
        )));
    }
    let mut work = net.clone();
    let loss0 = mean_ce_loss(&work, data)?;
    let mut per_layer: Vec<Option<Tensor>> = vec![None; net.layers().len()];
    for i in net.prunable() {
        let count = net.layers()[i].weights().unwrap().len();
        let mut diag = vec![0.0; count];
        for flat in 0..count {
            let orig = work.layers()[i].weights().unwrap().data()[flat];
            let h = h_base * orig.abs().max(1.0);
            work.layers_mut()[i].weights_mut().unwrap().data_mut()[flat] = orig + h;
            let lp = mean_ce_loss(&work, data)?;
            work.layers_mut()[i].weights_mut().unwrap().data_mut()[flat] = orig - h;
            let lm = mean_ce_loss(&work, data)?;
            work.layers_mut()[i].weights_mut().unwrap().data_mut()[flat] = orig;
            diag[flat] = (lp - 2.0 * loss0 + lm) / (h * h);
        }
        let shape = net.layers()[i].weights().unwrap().shape().to_vec();
        per_layer[i] = Some(Tensor::new(shape, diag)?);
    }
    Ok(HessianDiag { per_layer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::{score_lap, score_lap_all};
    use crate::network::{glorot_init, LayerSpec, NetSpec};
    use crate::tensor::{conv2d, Padding};
    use rand::Rng;

    fn seeded(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn eye(n: usize) -> Tensor {
        Tensor::from_fn(vec![n, n], move |i| if i % (n + 1) == 0 { 1.0 } else { 0.0 })
    }

    fn dense_net(mats: &[&Tensor], input: usize) -> Network {
        let layers = mats
            .iter()
            .map(|m| Layer::Dense {
                weight: (*m).clone(),
                bias: Tensor::zeros(vec![m.shape()[0]]),
            })
            .collect();
        Network::new(vec![input], layers).unwrap()
    }

    #[test]
    fn all_ones_mask_has_zero_distortion() {
        let inst = BlockInstance::new(
            seeded(vec![4, 3], 1),
            seeded(vec![5, 4], 2),
            seeded(vec![3, 5], 3),
        )
        .unwrap();
        let m = Mask::new(0, vec![true; 20]).unwrap();
        assert_eq!(block_distortion(&inst, &m).unwrap(), 0.0);
    }

    #[test]
    fn identity_neighbors_reduce_to_masked_frobenius() {
        let w = seeded(vec![3, 3], 4);
        let inst = BlockInstance::new(eye(3), w.clone(), eye(3)).unwrap();
        let bits: Vec<bool> = (0..9).map(|i| i % 2 == 0).collect();
        let m = Mask::new(0, bits.clone()).unwrap();
        let d = block_distortion(&inst, &m).unwrap();
        let direct: f64 = w
            .data()
            .iter()
            .zip(&bits)
            .filter(|(_, &b)| !b)
            .map(|(v, _)| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((d - direct).abs() < 1e-12);
    }

    #[test]
    fn single_zero_matches_lookahead_score() {
        let w_prev = seeded(vec![4, 3], 5);
        let w_cur = seeded(vec![5, 4], 6);
        let w_next = seeded(vec![3, 5], 7);
        let inst = BlockInstance::new(w_prev.clone(), w_cur.clone(), w_next.clone()).unwrap();
        let net = dense_net(&[&w_prev, &w_cur, &w_next], 3);
        let lap = score_lap(&net, 1, true, true).unwrap();
        for flat in [0usize, 7, 13, 19] {
            let mut bits = vec![true; 20];
            bits[flat] = false;
            let d = block_distortion(&inst, &Mask::new(0, bits).unwrap()).unwrap();
            let s = lap.data()[flat];
            assert!(
                (d - s).abs() <= 1e-10 * s.max(1e-300),
                "flat {flat}: {d} vs {s}"
            );
        }
    }

    #[test]
    fn brute_force_keep_all_and_cap() {
        let inst = BlockInstance::new(
            seeded(vec![3, 2], 8),
            seeded(vec![4, 3], 9),
            seeded(vec![2, 4], 10),
        )
        .unwrap();
        let (m, d) = brute_force_mask(&inst, 12).unwrap();
        assert_eq!(m.surviving, 12);
        assert_eq!(d, 0.0);
        let big = BlockInstance::new(
            seeded(vec![5, 2], 11),
            seeded(vec![5, 5], 12),
            seeded(vec![2, 5], 13),
        )
        .unwrap();
        assert!(brute_force_mask(&big, 10).is_err());
    }

    #[test]
    fn identity_neighbors_prune_smallest_magnitude() {
        let w = Tensor::new(vec![2, 2], vec![3.0, -0.2, 1.5, 2.0]).unwrap();
        let inst = BlockInstance::new(eye(2), w, eye(2)).unwrap();
        let (m, _) = brute_force_mask(&inst, 3).unwrap();
        assert_eq!(m.bits, vec![true, false, true, true]);
    }

    #[test]
    fn brute_force_dominates_heuristics() {
        let w_prev = seeded(vec![4, 3], 14);
        let w_cur = seeded(vec![3, 4], 15);
        let w_next = seeded(vec![3, 3], 16);
        let inst = BlockInstance::new(w_prev.clone(), w_cur.clone(), w_next.clone()).unwrap();
        let (_, optimal) = brute_force_mask(&inst, 6).unwrap();

        let net = dense_net(&[&w_prev, &w_cur, &w_next], 3);
        let heuristic = |scores: &Tensor| {
            let mut idx: Vec<usize> = (0..12).collect();
            idx.sort_by(|&a, &b| {
                scores.data()[b]
                    .partial_cmp(&scores.data()[a])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let mut bits = vec![false; 12];
            for &i in idx.iter().take(6) {
                bits[i] = true;
            }
            Mask::new(0, bits).unwrap()
        };
        let lap_mask = heuristic(&score_lap(&net, 1, true, true).unwrap());
        let mp_mask = heuristic(&crate::criteria::score_mp(&w_cur));
        let lap_d = block_distortion(&inst, &lap_mask).unwrap();
        let mp_d = block_distortion(&inst, &mp_mask).unwrap();
        assert!(optimal <= lap_d + 1e-12);
        assert!(optimal <= mp_d + 1e-12);
    }

    #[test]
    fn chain_of_three_equals_block() {
        let w_prev = seeded(vec![4, 3], 17);
        let w_cur = seeded(vec![5, 4], 18);
        let w_next = seeded(vec![3, 5], 19);
        let inst = BlockInstance::new(w_prev.clone(), w_cur.clone(), w_next.clone()).unwrap();
        let net = dense_net(&[&w_prev, &w_cur, &w_next], 3);
        for flat in [2usize, 11] {
            let mut bits = vec![true; 20];
            bits[flat] = false;
            let block = block_distortion(&inst, &Mask::new(0, bits).unwrap()).unwrap();
            let chain = whole_chain_distortion(&net, 1, flat).unwrap();
            assert!((block - chain).abs() <= 1e-12 * block.max(1e-300));
        }
    }

    #[test]
    fn chain_matches_whole_network_lookahead() {
        let mats: Vec<Tensor> = [(5, 4, 20u64), (6, 5, 21), (4, 6, 22), (3, 4, 23), (2, 3, 24)]
            .iter()
            .map(|&(o, i, s)| seeded(vec![o, i], s))
            .collect();
        let refs: Vec<&Tensor> = mats.iter().collect();
        let net = dense_net(&refs, 4);
        for layer in [0usize, 2, 4] {
            let s = score_lap_all(&net, layer).unwrap();
            let count = mats[layer].len().min(6); // probe a handful
            for flat in 0..count {
                let d = whole_chain_distortion(&net, layer, flat).unwrap();
                let e = s.data()[flat];
                assert!(
                    (d - e).abs() <= 1e-10 * e.max(1e-300),
                    "layer {layer} flat {flat}: {d} vs {e}"
                );
            }
        }
    }

    #[test]
    fn zeroing_an_already_zero_weight_costs_nothing() {
        let mut w_cur = seeded(vec![3, 3], 25);
        w_cur.data_mut()[4] = 0.0;
        let w_prev = seeded(vec![3, 2], 26);
        let w_next = seeded(vec![2, 3], 27);
        let net = dense_net(&[&w_prev, &w_cur, &w_next], 2);
        assert_eq!(whole_chain_distortion(&net, 1, 4).unwrap(), 0.0);
    }

    #[test]
    fn jacobi_reconstructs_the_matrix() {
        let mut a = seeded(vec![5, 5], 28);
        // Symmetrize.
        for i in 0..5 {
            for j in 0..i {
                let avg = (a.data()[i * 5 + j] + a.data()[j * 5 + i]) / 2.0;
                a.data_mut()[i * 5 + j] = avg;
                a.data_mut()[j * 5 + i] = avg;
            }
        }
        let (eig, u) = jacobi_eigh(&a).unwrap();
        // || U Lambda U^T - A ||_F small.
        let mut err = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                let mut v = 0.0;
                for k in 0..5 {
                    v += u.data()[i * 5 + k] * eig[k] * u.data()[j * 5 + k];
                }
                err += (v - a.data()[i * 5 + j]).powi(2);
            }
        }
        assert!(err.sqrt() <= 1e-10 * a.frobenius_norm());
    }

    #[test]
    fn bqp_identity_counts_ones() {
        let inst = BqpInstance::new(eye(3)).unwrap();
        let (_, table) = bqp_reduce(&inst).unwrap();
        assert_eq!(table.len(), 8);
        for (pattern, &(quad, norm_sq)) in table.iter().enumerate() {
            let ones = (pattern as u32).count_ones() as f64;
            assert!((quad - ones).abs() < 1e-10);
            assert!((norm_sq - ones).abs() < 1e-8);
        }
    }

    #[test]
    fn bqp_negative_eigenvalue_columns_agree() {
        let mut a = seeded(vec![4, 4], 29);
        for i in 0..4 {
            for j in 0..i {
                let avg = (a.data()[i * 4 + j] + a.data()[j * 4 + i]) / 2.0;
                a.data_mut()[i * 4 + j] = avg;
                a.data_mut()[j * 4 + i] = avg;
            }
            // Push the spectrum negative.
            let d = a.idx2(i, i);
            a.data_mut()[d] -= 2.0;
        }
        let inst = BqpInstance::new(a.clone()).unwrap();
        let (eig, _) = jacobi_eigh(&a).unwrap();
        assert!(eig.iter().copied().fold(f64::INFINITY, f64::min) < 0.0);
        let (_, table) = bqp_reduce(&inst).unwrap();
        for &(quad, norm_sq) in &table {
            assert!((quad - norm_sq).abs() <= 1e-8, "{quad} vs {norm_sq}");
        }
        assert_eq!(table[0], (0.0, 0.0));
    }

    #[test]
    fn asymmetric_matrix_rejected() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.5, 0.2, 1.0]).unwrap();
        assert!(BqpInstance::new(a).is_err());
    }

    #[test]
    fn delta_kernel_gives_identity() {
        let mut k = Tensor::zeros(vec![3, 3]);
        k.data_mut()[4] = 1.0; // center
        let j = circulant_jacobian(&k, (4, 4)).unwrap();
        assert_eq!(j, eye(16));
    }

    #[test]
    fn scaled_one_by_one_kernel() {
        let k = Tensor::new(vec![1, 1], vec![2.5]).unwrap();
        let j = circulant_jacobian(&k, (3, 5)).unwrap();
        for r in 0..15 {
            for c in 0..15 {
                let want = if r == c { 2.5 } else { 0.0 };
                assert_eq!(j.data()[r * 15 + c], want);
            }
        }
    }

    #[test]
    fn circulant_matches_conv_on_basis() {
        let k2 = seeded(vec![3, 3], 30);
        let j = circulant_jacobian(&k2, (4, 4)).unwrap();
        let kernel4 = k2.reshape(vec![1, 1, 3, 3]).unwrap();
        for p in 0..16 {
            let mut x = Tensor::zeros(vec![1, 4, 4]);
            x.data_mut()[p] = 1.0;
            let y = conv2d(&x, &kernel4, Padding::Circular).unwrap();
            for r in 0..16 {
                assert_eq!(j.data()[r * 16 + p], y.data()[r], "basis {p} row {r}");
            }
        }
        assert!(circulant_jacobian(&k2, (9, 9)).is_err());
    }

    #[test]
    fn bound_holds_on_random_samples() {
        let w = seeded(vec![6, 5], 31);
        let bits: Vec<bool> = (0..30).map(|i| i % 3 != 0).collect();
        let m = Mask::new(0, bits).unwrap();
        let r = distortion_bound_check(&w, &m, 200, 32).unwrap();
        assert!(r <= 1.0 + 1e-12, "ratio {r}");
        assert!(r > 0.0);
        let full = Mask::new(0, vec![true; 30]).unwrap();
        assert_eq!(distortion_bound_check(&w, &full, 50, 33).unwrap(), 0.0);
    }

    #[test]
    fn rank_one_difference_attains_the_bound() {
        // Prune exactly one row: D = e_k v^T is rank one, so spectral and
        // Frobenius norms coincide and x = v attains ratio 1.
        let w = seeded(vec![4, 5], 34);
        let mut bits = vec![true; 20];
        for j in 0..5 {
            bits[2 * 5 + j] = false;
        }
        let v: Vec<f64> = w.data()[10..15].to_vec();
        let v_norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let lhs = v.iter().map(|a| a * a).sum::<f64>(); // |v . v| = ||v||^2
        let ratio = lhs / (v_norm * v_norm);
        assert!((ratio - 1.0).abs() < 1e-12);
        // And sampled ratios still respect the cap.
        let r = distortion_bound_check(&w, &Mask::new(0, bits).unwrap(), 100, 35).unwrap();
        assert!(r <= 1.0 + 1e-12);
    }

    #[test]
    fn second_difference_is_exact_for_quadratics() {
        let d = second_difference(|w| 3.0 * w * w, 0.7, 1e-3);
        assert!((d - 6.0).abs() < 1e-6, "{d}");
        let lin = second_difference(|w| 5.0 * w - 2.0, 0.7, 1e-3);
        assert!(lin.abs() < 1e-6, "{lin}");
    }

    #[test]
    fn finite_differences_approach_the_backpropagated_diagonal() {
        // A single dense layer feeding softmax keeps the logits linear in the
        // weights, so the curvature recurrence carries no layer-propagation
        // approximation and must track the finite differences closely.
        let spec = NetSpec {
            input_shape: vec![4],
            layers: vec![LayerSpec::Dense { out: 3 }],
        };
        let mut net = glorot_init(&spec, 40).unwrap();
        for l in net.layers_mut() {
            if let Some(w) = l.weights_mut() {
                for v in w.data_mut() {
                    *v *= 0.5;
                }
            }
        }
        let data = crate::data::synthetic_blobs(3, 4, 50, 9).unwrap();
        let gn = crate::stats::hessian_diagonal(&net, &data).unwrap();
        let fd = finite_diff_hessian_diag(&net, &data, 1e-3).unwrap();
        let g = gn.for_layer(0).unwrap();
        let f = fd.per_layer[0].as_ref().unwrap();
        let mut checked = 0;
        for (a, b) in g.data().iter().zip(f.data()) {
            if b.abs() > 1e-4 {
                let rel = (a - b).abs() / b.abs();
                assert!(rel < 0.10, "gn {a} vs fd {b} (rel {rel})");
                checked += 1;
            }
        }
        assert!(checked > 6, "only {checked} entries were comparable");
    }

    #[test]
    fn finite_difference_size_cap() {
        let net = glorot_init(
            &NetSpec {
                input_shape: vec![30],
                layers: vec![LayerSpec::Dense { out: 30 }],
            },
            0,
        )
        .unwrap();
        let data = crate::data::synthetic_blobs(2, 30, 4, 0).unwrap();
        assert!(finite_diff_hessian_diag(&net, &data, 1e-3).is_err());
    }
}
