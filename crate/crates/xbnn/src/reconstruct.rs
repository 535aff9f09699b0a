//! Input splitting: rewriting a layer whose fan-in exceeds the array input
//! capacity into n blocks that each emit a 1-bit intermediate neuron, plus a
//! fixed merge stage (all merge weights +1, merge threshold 0).

use serde::{Deserialize, Serialize};

use crate::bn::{fold_bn_to_thresholds, BatchNormParams};
use crate::error::{Error, Result};
use crate::network::{Layer, Network, PlainLayer, SplitBlock, SplitLayer};

/// How a layer's fan-in is cut into blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Number of blocks; 1 means no split.
    pub n: usize,
    /// Inputs per block (the last block may be smaller when padding applies).
    pub block_size: usize,
    /// Actual sizes per block; equal when an exact divisor exists.
    pub sizes: Vec<usize>,
    /// Zero-padded positions in the last block (0 when fan-in divides evenly).
    pub padded_tail: usize,
}

impl SplitPlan {
    pub fn fanin(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Input index range covered by block `i` (contiguous, disjoint, covering).
    pub fn block_range(&self, i: usize) -> (usize, usize) {
        let start: usize = self.sizes[..i].iter().sum();
        (start, start + self.sizes[i])
    }
}

/// Block count for a layer of `fanin` inputs on arrays accepting `capacity`
/// inputs: the smallest divisor of `fanin` whose equal-size blocks fit, or
/// ceil(fanin/capacity) with a zero-padded last block when no divisor fits.
///
/// The divisor search is capped at twice the ceil count: past that point each
/// equal block would fill less than half an array and the padded ceil split
/// is denser (this is what rules out divisor splits for prime fan-ins).
pub fn choose_block_count(fanin: usize, capacity: usize) -> usize {
    assert!(fanin >= 1 && capacity >= 1);
    if fanin <= capacity {
        return 1;
    }
    let min_n = fanin.div_ceil(capacity);
    for d in min_n..=(2 * min_n).min(fanin) {
        if fanin % d == 0 {
            return d;
        }
    }
    min_n
}

pub fn build_split_plan(fanin: usize, capacity: usize) -> SplitPlan {
    let n = choose_block_count(fanin, capacity);
    if fanin % n == 0 {
        let block_size = fanin / n;
        SplitPlan {
            n,
            block_size,
            sizes: vec![block_size; n],
            padded_tail: 0,
        }
    } else {
        // no divisor fits: ceil split, last block short, padding recorded
        let block_size = capacity.min(fanin);
        let mut sizes = vec![block_size; n - 1];
        let last = fanin - block_size * (n - 1);
        sizes.push(last);
        SplitPlan {
            n,
            block_size,
            sizes,
            padded_tail: block_size - last,
        }
    }
}

/// Scale baseline batch-norm parameters for n split blocks: b, mu, sigma and
/// beta are scaled by 1/n while gamma (and epsilon) stay unchanged.
pub fn map_parameters(bn: &BatchNormParams, n: usize) -> Vec<BatchNormParams> {
    assert!(n >= 1);
    let inv = 1.0 / n as f64;
    let block = BatchNormParams {
        bias: bn.bias.iter().map(|v| v * inv).collect(),
        mu: bn.mu.iter().map(|v| v * inv).collect(),
        sigma: bn.sigma.iter().map(|v| v * inv).collect(),
        gamma: bn.gamma.clone(),
        beta: bn.beta.iter().map(|v| v * inv).collect(),
        epsilon: bn.epsilon,
    };
    vec![block; n]
}

/// Popcount-domain merge threshold: the merge neuron fires +1 iff at least
/// ceil(n/2) of the n intermediates are +1 (sum of ±1 intermediates >= 0,
/// ties firing +1).
pub fn merge_threshold(n: usize) -> i64 {
    (n as i64 + 1) / 2
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReconstructMode {
    /// Copy baseline weight slices and apply the 1/n parameter mapping.
    Mapped,
    /// Keep the split structure but leave parameters for the trainer
    /// (weights copied slice-wise, batch norm reset to identity).
    FreshInit,
}

/// Split one plain layer into `n` blocks per the plan. The merge stage is
/// fixed: weights +1, threshold 0.
pub fn split_layer(layer: &PlainLayer, capacity: usize, mode: ReconstructMode) -> Result<Layer> {
    let fanin = layer.geom.fanin();
    let plan = build_split_plan(fanin, capacity);
    if plan.n == 1 {
        return Ok(Layer::Plain(layer.clone()));
    }
    let out_dim = layer.geom.out_dim();
    let mapped = map_parameters(&layer.bn, plan.n);
    let mut blocks = Vec::with_capacity(plan.n);
    for i in 0..plan.n {
        let (start, end) = plan.block_range(i);
        let weights = layer.weights.slice_rows(start, end)?;
        let bn = match mode {
            ReconstructMode::Mapped => mapped[i].clone(),
            ReconstructMode::FreshInit => BatchNormParams::identity(out_dim),
        };
        let thresholds = fold_bn_to_thresholds(&bn, plan.sizes[i]);
        blocks.push(SplitBlock {
            weights,
            bn,
            thresholds,
        });
    }
    Ok(Layer::Split(SplitLayer {
        geom: layer.geom.clone(),
        plan: plan.clone(),
        blocks,
        merge_threshold: merge_threshold(plan.n),
    }))
}

/// Reconstruct a network for array capacity `capacity`: every hidden layer
/// with fan-in above capacity is split; the first and last layers pass
/// through unchanged.
pub fn reconstruct_network(net: &Network, capacity: usize, mode: ReconstructMode) -> Result<Network> {
    let last = net.layers.len() - 1;
    let mut layers = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let exempt = i == 0 || i == last;
        match layer {
            Layer::Plain(p) if !exempt && p.geom.fanin() > capacity => {
                layers.push(split_layer(p, capacity, mode)?);
            }
            Layer::Plain(p) => layers.push(Layer::Plain(p.clone())),
            Layer::Split(_) => {
                return Err(Error::Config(format!(
                    "layer {i} is already split; reconstruct from a baseline network"
                )))
            }
        }
    }
    Ok(Network {
        layers,
        first_multibit: net.first_multibit,
    })
}

/// Per-layer block counts, with None for layers excluded from splitting.
/// This is the shape of the published split-count tables.
pub fn split_pattern(net: &Network, capacity: usize) -> Vec<Option<usize>> {
    let last = net.layers.len() - 1;
    net.layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if i == 0 || i == last {
                None
            } else {
                Some(choose_block_count(l.geom().fanin(), capacity))
            }
        })
        .collect()
}
