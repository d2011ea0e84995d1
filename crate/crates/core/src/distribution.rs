//! Discrete edge-offset distributions.
//!
//! Each side of a bounding box is represented by a probability vector over
//! `n + 1` evenly spaced offset bins. Decoding takes the expectation over the
//! bins; the Top-k statistics of the vector summarize how peaked it is, which
//! is the signal the quality predictor consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Evenly spaced bin layout shared by the four side distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    y0: f64,
    yn: f64,
    n: usize,
}

impl BinGrid {
    pub fn new(y0: f64, yn: f64, n: usize) -> Result<Self> {
        if !(y0.is_finite() && yn.is_finite()) {
            return Err(Error::invalid_input("grid endpoints must be finite"));
        }
        if yn <= y0 {
            return Err(Error::invalid_input(format!(
                "grid requires yn > y0, got y0={y0}, yn={yn}"
            )));
        }
        if n < 1 {
            return Err(Error::invalid_input("grid needs at least two bins (n >= 1)"));
        }
        Ok(BinGrid { y0, yn, n })
    }

    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn yn(&self) -> f64 {
        self.yn
    }

    /// Number of bins minus one; bin count is `n + 1`.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn delta(&self) -> f64 {
        (self.yn - self.y0) / self.n as f64
    }

    pub fn num_bins(&self) -> usize {
        self.n + 1
    }

    /// Center of bin `i`: y_i = y0 + i * delta.
    pub fn bin_value(&self, i: usize) -> f64 {
        self.y0 + i as f64 * self.delta()
    }
}

/// Normalized distribution over the bins of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralDistribution {
    grid: BinGrid,
    probs: Vec<f64>,
}

impl GeneralDistribution {
    /// Wraps an already-normalized probability vector, checking the
    /// distribution invariants (entries in [0,1], sum 1 within 1e-9).
    pub fn new(grid: BinGrid, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != grid.num_bins() {
            return Err(Error::invalid_input(format!(
                "expected {} probabilities, got {}",
                grid.num_bins(),
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid_input(format!(
                    "probability {p} outside [0, 1]"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid_input(format!(
                "probabilities sum to {sum}, expected 1 within 1e-9"
            )));
        }
        Ok(GeneralDistribution { grid, probs })
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Largest probability in the vector (the Top-1 statistic).
    pub fn top1(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Unnormalized pre-softmax parameterization of a side distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionLogits {
    pub grid: BinGrid,
    pub logits: Vec<f64>,
}

impl DistributionLogits {
    pub fn new(grid: BinGrid, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != grid.num_bins() {
            return Err(Error::invalid_input(format!(
                "expected {} logits, got {}",
                grid.num_bins(),
                logits.len()
            )));
        }
        Ok(DistributionLogits { grid, logits })
    }
}

/// Softmax over the bin logits.
pub fn normalize(input: &DistributionLogits) -> Result<GeneralDistribution> {
    let probs = softmax_checked(&input.logits)?;
    Ok(GeneralDistribution {
        grid: input.grid,
        probs,
    })
}

/// Softmax with max-shift stabilization; rejects non-finite entries.
pub fn softmax_checked(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::invalid_input("non-finite logit"));
    }
    Ok(softmax(logits))
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}

/// Backward of softmax: given dL/dprobs, returns dL/dlogits.
///
/// d p_j / d z_i = p_j (delta_ij - p_i), so
/// dL/dz_i = p_i (g_i - sum_j g_j p_j).
pub fn softmax_backward(probs: &[f64], upstream: &[f64]) -> Vec<f64> {
    debug_assert_eq!(probs.len(), upstream.len());
    let weighted: f64 = probs.iter().zip(upstream).map(|(p, g)| p * g).sum();
    probs
        .iter()
        .zip(upstream)
        .map(|(&p, &g)| p * (g - weighted))
        .collect()
}

/// Expectation decode: y_hat = sum_i P(y_i) y_i.
pub fn expectation(dist: &GeneralDistribution) -> f64 {
    dist.probs
        .iter()
        .enumerate()
        .map(|(i, &p)| p * dist.grid.bin_value(i))
        .sum()
}

/// Gradient of the expectation with respect to the logits that produced
/// `dist` (softmax and weighted sum fused): dE/dz_j = p_j (y_j - E).
pub fn expectation_backward(dist: &GeneralDistribution, upstream: f64) -> Vec<f64> {
    let e = expectation(dist);
    dist.probs
        .iter()
        .enumerate()
        .map(|(j, &p)| upstream * p * (dist.grid.bin_value(j) - e))
        .collect()
}

/// Output of the Top-k statistic for one side, together with the selection
/// needed to route gradients back.
#[derive(Debug, Clone, PartialEq)]
pub struct TopkmOutput {
    /// k top probabilities (non-increasing), their mean, and optionally the
    /// population variance of the k values.
    pub block: Vec<f64>,
    /// Bin indices of the selected top-k values, in block order.
    pub selected: Vec<usize>,
}

/// Top-k values of the probability vector plus their mean (and optionally
/// the population variance of those k values).
///
/// Ties are broken toward the lowest bin index so the forward selection and
/// the backward routing always agree.
pub fn topkm(dist: &GeneralDistribution, k: usize, include_variance: bool) -> Result<TopkmOutput> {
    let n_bins = dist.probs.len();
    if k < 1 || k > n_bins {
        return Err(Error::InvalidArgument {
            arg: "k",
            reason: format!("k={k} outside [1, {n_bins}]"),
        });
    }
    let mut order: Vec<usize> = (0..n_bins).collect();
    order.sort_by(|&a, &b| {
        dist.probs[b]
            .partial_cmp(&dist.probs[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let selected: Vec<usize> = order[..k].to_vec();
    let mut block: Vec<f64> = selected.iter().map(|&i| dist.probs[i]).collect();
    let mean = block.iter().sum::<f64>() / k as f64;
    block.push(mean);
    if include_variance {
        let var = selected
            .iter()
            .map(|&i| {
                let d = dist.probs[i] - mean;
                d * d
            })
            .sum::<f64>()
            / k as f64;
        block.push(var);
    }
    Ok(TopkmOutput { block, selected })
}

/// Gradient of `topkm` with respect to the probability vector.
///
/// `upstream` has one slot per block entry (k values, mean, optional
/// variance). Only the selected bins receive gradient: each gets its direct
/// top-slot term plus 1/k of the mean-slot term, plus the variance chain
/// when enabled. All other bins get zero.
pub fn backprop_topkm(forward: &TopkmOutput, k: usize, upstream: &[f64], n_bins: usize) -> Vec<f64> {
    debug_assert_eq!(forward.selected.len(), k);
    debug_assert_eq!(upstream.len(), forward.block.len());
    let mut grad = vec![0.0; n_bins];
    let g_mean = upstream[k];
    let mean = forward.block[k];
    let g_var = if forward.block.len() > k + 1 {
        upstream[k + 1]
    } else {
        0.0
    };
    for (slot, &bin) in forward.selected.iter().enumerate() {
        let mut g = upstream[slot] + g_mean / k as f64;
        if g_var != 0.0 {
            // d var / d v_s = (2/k)(v_s - mean); the mean's own dependence
            // cancels because the deviations sum to zero.
            g += g_var * 2.0 / k as f64 * (forward.block[slot] - mean);
        }
        grad[bin] += g;
    }
    grad
}

/// Concatenated Top-k statistics of the four side distributions, in fixed
/// l, r, t, b order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatFeature {
    pub k: usize,
    pub include_variance: bool,
    pub values: Vec<f64>,
}

impl StatFeature {
    /// Feature length for a configuration: 4(k+1), +4 with variance.
    pub fn len_for(k: usize, include_variance: bool) -> usize {
        4 * (k + 1) + if include_variance { 4 } else { 0 }
    }
}

/// Per-side cache kept so gradients can be routed back through the statistic.
#[derive(Debug, Clone)]
pub struct StatFeatureCache {
    pub sides: [TopkmOutput; 4],
    pub block_len: usize,
}

/// Builds the statistical feature F = concat(topkm(P^w)) for w in l, r, t, b.
///
/// All four distributions must share the same grid.
pub fn assemble_stat_feature(
    sides: &[GeneralDistribution; 4],
    k: usize,
    include_variance: bool,
) -> Result<(StatFeature, StatFeatureCache)> {
    let grid = sides[0].grid;
    if sides.iter().any(|d| *d.grid() != grid) {
        return Err(Error::invalid_input(
            "side distributions must share one bin grid",
        ));
    }
    let mut values = Vec::with_capacity(StatFeature::len_for(k, include_variance));
    let mut outputs = Vec::with_capacity(4);
    for dist in sides {
        let out = topkm(dist, k, include_variance)?;
        values.extend_from_slice(&out.block);
        outputs.push(out);
    }
    let block_len = outputs[0].block.len();
    let cache = StatFeatureCache {
        sides: [
            outputs[0].clone(),
            outputs[1].clone(),
            outputs[2].clone(),
            outputs[3].clone(),
        ],
        block_len,
    };
    Ok((
        StatFeature {
            k,
            include_variance,
            values,
        },
        cache,
    ))
}

/// Routes dL/dF back to the four probability vectors.
pub fn backprop_stat_feature(
    cache: &StatFeatureCache,
    k: usize,
    upstream: &[f64],
    n_bins: usize,
) -> [Vec<f64>; 4] {
    debug_assert_eq!(upstream.len(), 4 * cache.block_len);
    let mut out: [Vec<f64>; 4] = Default::default();
    for (side, slot) in out.iter_mut().zip(cache.sides.iter().zip(0..4)) {
        let (fwd, idx) = slot;
        let chunk = &upstream[idx * cache.block_len..(idx + 1) * cache.block_len];
        *side = backprop_topkm(fwd, k, chunk, n_bins);
    }
    out
}
