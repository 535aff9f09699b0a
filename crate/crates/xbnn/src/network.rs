//! Network representation and the reference (non-crossbar) inference engine.
//!
//! The reference engine is integer-exact and defines ground truth for every
//! crossbar output mode: the first layer runs on multi-bit integer pixels
//! with ±1 weights, hidden layers run XNOR-popcount against folded integer
//! thresholds, and the last layer emits raw integer class scores with no
//! binarization.

use ndarray::{Array2, Array4, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::bn::{fold_bn_to_sum_thresholds, fold_bn_to_thresholds, BatchNormParams};
use crate::conv::{lower_conv_input, lower_conv_input_int, ConvGeom};
use crate::error::{Error, Result};
use crate::reconstruct::SplitPlan;
use crate::tensor::{xnor_popcount_matmul_wt, BinaryTensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerGeom {
    Dense { in_dim: usize, out_dim: usize },
    Conv(ConvGeom),
}

impl LayerGeom {
    /// Lowered input dimension (fan-in per output neuron).
    pub fn fanin(&self) -> usize {
        match self {
            LayerGeom::Dense { in_dim, .. } => *in_dim,
            LayerGeom::Conv(g) => g.fanin(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            LayerGeom::Dense { out_dim, .. } => *out_dim,
            LayerGeom::Conv(g) => g.out_c,
        }
    }
}

/// A baseline (unsplit) layer: lowered ±1 weights (fanin × out) and the
/// shift-scale parameters that fold into thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainLayer {
    pub geom: LayerGeom,
    pub weights: BinaryTensor,
    pub bn: BatchNormParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitBlock {
    pub weights: BinaryTensor,
    pub bn: BatchNormParams,
    pub thresholds: crate::bn::ThresholdVector,
}

/// A layer rewritten into n input-split blocks plus the fixed merge stage.
/// Merge weights are all +1 and the merge threshold is 0 in the ±1 domain
/// (popcount form: fires iff at least ceil(n/2) intermediates are +1); both
/// are immutable by construction — they are not even stored as parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLayer {
    pub geom: LayerGeom,
    pub plan: SplitPlan,
    pub blocks: Vec<SplitBlock>,
    pub merge_threshold: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Plain(PlainLayer),
    Split(SplitLayer),
}

impl Layer {
    pub fn geom(&self) -> &LayerGeom {
        match self {
            Layer::Plain(p) => &p.geom,
            Layer::Split(s) => &s.geom,
        }
    }

    pub fn is_split(&self) -> bool {
        matches!(self, Layer::Split(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layers: Vec<Layer>,
    /// Whether layer 0 consumes multi-bit integer input (scaled 8-bit pixels).
    /// Hidden layers always consume binary activations.
    pub first_multibit: bool,
}

/// Input to a forward pass. Pixels must already be on the signed integer
/// grid (see [`crate::data::scale_pixel`]).
#[derive(Debug, Clone)]
pub enum NetInput {
    /// batch × features
    Flat(Array2<i32>),
    /// batch × h × w × c
    Image(Array4<i32>),
    /// Binary input straight into an all-binary network (first_multibit = false).
    Bits(BinaryTensor),
}

impl NetInput {
    pub fn batch(&self) -> usize {
        match self {
            NetInput::Flat(a) => a.nrows(),
            NetInput::Image(a) => a.dim().0,
            NetInput::Bits(b) => b.shape()[0],
        }
    }
}

/// Binary activation flowing between layers, with optional spatial shape
/// (h, w, c) when it is a conv feature map.
#[derive(Debug, Clone)]
pub struct Activation {
    pub bits: BinaryTensor,
    pub spatial: Option<(usize, usize, usize)>,
}

impl Activation {
    /// Flatten to batch × features for a dense consumer.
    fn flat(&self, batch: usize) -> Result<BinaryTensor> {
        let total: usize = self.bits.shape().iter().product();
        let features = total / batch;
        if self.bits.shape().len() == 2 && self.bits.shape() == [batch, features] {
            Ok(self.bits.clone())
        } else {
            self.bits.repack(&[batch, features])
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// batch × classes integer scores; argmax is the predicted class.
    pub scores: Array2<i64>,
    /// Per-hidden-layer activations, when requested.
    pub activations: Option<Vec<Activation>>,
}

impl ForwardResult {
    pub fn predictions(&self) -> Vec<usize> {
        self.scores
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .max_by_key(|&(i, &v)| (v, std::cmp::Reverse(i)))
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }
}

/// Exact integer matmul of a multi-bit matrix against ±1 weights, computed as
/// an f64 gemm (products are small integers, sums stay far below 2^53).
pub fn int_matmul_pm1(x: &ArrayView2<i32>, w: &BinaryTensor) -> Result<Array2<i64>> {
    let (k, m) = (w.shape()[0], w.shape()[1]);
    if x.ncols() != k {
        return Err(Error::Shape(format!(
            "inner dimensions disagree: input {:?} vs weights {:?}",
            x.dim(),
            w.shape()
        )));
    }
    let xf = x.mapv(|v| v as f64);
    let mut wf = Array2::<f64>::zeros((k, m));
    for r in 0..k {
        for c in 0..m {
            wf[(r, c)] = w.get_pm1(r, c) as f64;
        }
    }
    let s = xf.dot(&wf);
    Ok(s.mapv(|v| v.round() as i64))
}

fn binarize_popcounts(
    p: &Array2<i32>,
    tv: &crate::bn::ThresholdVector,
) -> Result<BinaryTensor> {
    let (rows, cols) = p.dim();
    if tv.len() != cols {
        return Err(Error::Shape(format!(
            "threshold count {} vs output count {}",
            tv.len(),
            cols
        )));
    }
    let mut bits = BinaryTensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            if tv.fire(c, p[(r, c)] as i64) {
                bits.set_bit(r, c, true);
            }
        }
    }
    Ok(bits)
}

/// Forward one binary layer (plain or split) on lowered 2D input bits.
/// Returns the binarized outputs; `scores_out` requests raw sums instead
/// (last layer).
pub fn forward_binary_layer(layer: &Layer, input: &BinaryTensor) -> Result<BinaryTensor> {
    match layer {
        Layer::Plain(p) => {
            let k = p.geom.fanin();
            if input.row_len() != k {
                return Err(Error::Shape(format!(
                    "layer fan-in {} vs input width {}",
                    k,
                    input.row_len()
                )));
            }
            let wt = p.weights.transpose()?;
            let pc = xnor_popcount_matmul_wt(input, &wt);
            let tv = fold_bn_to_thresholds(&p.bn, k);
            binarize_popcounts(&pc, &tv)
        }
        Layer::Split(s) => forward_split_layer(s, input),
    }
}

fn forward_split_layer(s: &SplitLayer, input: &BinaryTensor) -> Result<BinaryTensor> {
    let fanin = s.geom.fanin();
    if input.row_len() != fanin {
        return Err(Error::Shape(format!(
            "split layer fan-in {} vs input width {}",
            fanin,
            input.row_len()
        )));
    }
    let rows = input.rows();
    let m = s.geom.out_dim();
    let mut plus_votes = Array2::<i32>::zeros((rows, m));
    for (i, block) in s.blocks.iter().enumerate() {
        let (start, end) = s.plan.block_range(i);
        let slice = input.slice_cols(start, end)?;
        let wt = block.weights.transpose()?;
        let pc = xnor_popcount_matmul_wt(&slice, &wt);
        for r in 0..rows {
            for c in 0..m {
                if block.thresholds.fire(c, pc[(r, c)] as i64) {
                    plus_votes[(r, c)] += 1;
                }
            }
        }
    }
    // merge: fixed +1 weights, fires iff popcount of intermediates >= ceil(n/2)
    let mut bits = BinaryTensor::zeros(&[rows, m]);
    for r in 0..rows {
        for c in 0..m {
            if plus_votes[(r, c)] as i64 >= s.merge_threshold {
                bits.set_bit(r, c, true);
            }
        }
    }
    Ok(bits)
}

/// Raw integer output sums (2P - K) of the last layer.
fn output_scores(layer: &Layer, input: &BinaryTensor) -> Result<Array2<i64>> {
    let p = match layer {
        Layer::Plain(p) => p,
        Layer::Split(_) => {
            return Err(Error::Config(
                "the output layer must not be split (it is excluded from input splitting)".into(),
            ))
        }
    };
    let k = p.geom.fanin();
    if input.row_len() != k {
        return Err(Error::Shape(format!(
            "output layer fan-in {} vs input width {}",
            k,
            input.row_len()
        )));
    }
    let wt = p.weights.transpose()?;
    let pc = xnor_popcount_matmul_wt(input, &wt);
    Ok(pc.mapv(|p| 2 * p as i64 - k as i64))
}

/// First layer on integer input: exact integer sums, binarized against the
/// sum-domain fold of its batch-norm parameters.
pub(crate) fn forward_first_layer(
    layer: &PlainLayer,
    input: &NetInput,
) -> Result<(Array2<i64>, Activation)> {
    let (sums, spatial) = match (&layer.geom, input) {
        (LayerGeom::Dense { in_dim, .. }, NetInput::Flat(x)) => {
            if x.ncols() != *in_dim {
                return Err(Error::Shape(format!(
                    "first layer expects {} inputs, got {}",
                    in_dim,
                    x.ncols()
                )));
            }
            (int_matmul_pm1(&x.view(), &layer.weights)?, None)
        }
        (LayerGeom::Conv(g), NetInput::Image(img)) => {
            let patches = lower_conv_input_int(&img.view(), g)?;
            let s = int_matmul_pm1(&patches.view(), &layer.weights)?;
            (s, Some((g.out_h(), g.out_w(), g.out_c)))
        }
        _ => {
            return Err(Error::Shape(
                "first layer kind does not match the input kind".into(),
            ))
        }
    };
    let st = fold_bn_to_sum_thresholds(&layer.bn);
    let (rows, cols) = sums.dim();
    let mut bits = BinaryTensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            if st.fire(c, sums[(r, c)]) {
                bits.set_bit(r, c, true);
            }
        }
    }
    let batch = input.batch();
    let bits = match spatial {
        Some((h, w, c)) => bits.reshape(&[batch, h, w, c])?,
        None => bits,
    };
    Ok((sums, Activation { bits, spatial }))
}

/// Lower an activation for consumption by `layer` (im2col for conv, flatten
/// for dense), returning 2D bits whose width is the layer fan-in.
pub fn lower_for_layer(act: &Activation, layer: &Layer, batch: usize) -> Result<BinaryTensor> {
    match layer.geom() {
        LayerGeom::Dense { .. } => act.flat(batch),
        LayerGeom::Conv(g) => {
            let (h, w, c) = act.spatial.ok_or_else(|| {
                Error::Shape("conv layer needs a spatial feature-map input".into())
            })?;
            if (h, w, c) != (g.in_h, g.in_w, g.in_c) {
                return Err(Error::Shape(format!(
                    "feature map {h}x{w}x{c} does not match conv input {}x{}x{}",
                    g.in_h, g.in_w, g.in_c
                )));
            }
            let map = act.bits.reshape(&[batch, h, w, c])?;
            lower_conv_input(&map, g)
        }
    }
}

fn spatial_of(layer: &Layer) -> Option<(usize, usize, usize)> {
    match layer.geom() {
        LayerGeom::Dense { .. } => None,
        LayerGeom::Conv(g) => Some((g.out_h(), g.out_w(), g.out_c)),
    }
}

/// Deterministic, integer-exact forward pass: class scores plus (optionally)
/// every hidden activation.
pub fn reference_forward(
    net: &Network,
    input: &NetInput,
    keep_activations: bool,
) -> Result<ForwardResult> {
    if net.layers.is_empty() {
        return Err(Error::Config("network has no layers".into()));
    }
    let batch = input.batch();
    let last = net.layers.len() - 1;
    let mut acts: Vec<Activation> = Vec::new();

    let mut current: Activation;
    let mut start_idx = 0usize;
    if net.first_multibit {
        let first = match &net.layers[0] {
            Layer::Plain(p) => p,
            Layer::Split(_) => {
                return Err(Error::Config(
                    "the first layer must not be split (it is excluded from input splitting)"
                        .into(),
                ))
            }
        };
        if last == 0 {
            // single-layer network: multi-bit input straight to scores
            let (sums, _) = forward_first_layer(first, input)?;
            return Ok(ForwardResult {
                scores: sums,
                activations: keep_activations.then(Vec::new),
            });
        }
        let (_, act) = forward_first_layer(first, input)?;
        current = act;
        start_idx = 1;
    } else {
        let bits = match input {
            NetInput::Bits(b) => b.clone(),
            _ => {
                return Err(Error::Shape(
                    "all-binary network expects binary input".into(),
                ))
            }
        };
        current = Activation {
            bits,
            spatial: None,
        };
    }
    if keep_activations {
        acts.push(current.clone());
    }

    for (i, layer) in net.layers.iter().enumerate().skip(start_idx) {
        let lowered = lower_for_layer(&current, layer, batch)?;
        if i == last {
            let scores = output_scores(layer, &lowered)?;
            return Ok(ForwardResult {
                scores,
                activations: keep_activations.then_some(acts),
            });
        }
        let out_bits = forward_binary_layer(layer, &lowered)?;
        let spatial = spatial_of(layer);
        let shaped = match spatial {
            Some((h, w, c)) => out_bits.reshape(&[batch, h, w, c])?,
            None => out_bits,
        };
        current = Activation {
            bits: shaped,
            spatial,
        };
        if keep_activations {
            acts.push(current.clone());
        }
    }
    unreachable!("loop returns at the last layer");
}

/// Classification accuracy of a forward result against integer labels.
pub fn accuracy(scores: &ForwardResult, labels: &[u8]) -> f64 {
    let preds = scores.predictions();
    let correct = preds
        .iter()
        .zip(labels)
        .filter(|(p, l)| **p == **l as usize)
        .count();
    correct as f64 / labels.len() as f64
}
