//! Crossbar compilation and simulation.
//!
//! A network is tiled onto fixed-size RRAM arrays. Each array holds a slice
//! of one layer's weight matrix: up to R input rows (the array's input
//! capacity) and as many output columns as fit. Three output interfaces are
//! modeled: per-column 1-bit sense amplifiers firing against programmed
//! thresholds, N-bit ADCs quantizing signed partial sums, and an ideal
//! (lossless) converter. All arrays are simulated at digital-equivalent
//! fidelity — no analog noise or device variation.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bn::{fold_bn_to_thresholds, ThresholdVector};
use crate::error::{Error, Result};
use crate::network::{
    forward_binary_layer, forward_first_layer, lower_for_layer, Activation, ForwardResult, Layer,
    LayerGeom, Network, NetInput,
};
use crate::quantizer::{sum_grid_quantizer, QuantizerSpec};
use crate::tensor::{xnor_popcount_matmul_wt, BinaryTensor};

/// How a ±1 weight maps onto RRAM cells.
///
/// Mode A ("(0,1) neurons"): one wordline per input, two columns per output
/// (differential column pair). Mode B ("(−1,1) neurons"): two wordlines per
/// input, one column per output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellMode {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum OutputMode {
    Sa1Bit,
    Ideal,
    Adc { bits: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub cell_mode: CellMode,
    pub output_mode: OutputMode,
}

impl ArrayConfig {
    pub fn new(rows: usize, cols: usize, cell_mode: CellMode, output_mode: OutputMode) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Config("array must have nonzero rows and columns".into()));
        }
        if let OutputMode::Adc { bits } = output_mode {
            if bits < 1 {
                return Err(Error::InvalidAdcBits(bits));
            }
        }
        let cfg = ArrayConfig { rows, cols, cell_mode, output_mode };
        if cfg.input_capacity() == 0 || cfg.outputs_per_array() == 0 {
            return Err(Error::Config("array too small for its cell mode".into()));
        }
        Ok(cfg)
    }

    /// Input capacity R: inputs an array can take per pass.
    pub fn input_capacity(&self) -> usize {
        match self.cell_mode {
            CellMode::A => self.rows,
            CellMode::B => self.rows / 2,
        }
    }

    /// Output neurons per array.
    pub fn outputs_per_array(&self) -> usize {
        match self.cell_mode {
            CellMode::A => self.cols / 2,
            CellMode::B => self.cols,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerRole {
    /// Multi-bit input layer; exempt from splitting and quantization.
    First,
    Hidden,
    /// Emits raw integer scores; exempt from splitting and quantization.
    Output,
}

/// One physical array: a (row slice × output slice) of one layer unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayAssignment {
    pub array_id: usize,
    pub layer: usize,
    /// Split block index within the layer; `None` for a plain layer.
    pub block: Option<usize>,
    /// Input slice within the unit's fan-in (half-open).
    pub row_start: usize,
    pub row_end: usize,
    /// Output-neuron slice (half-open).
    pub col_start: usize,
    pub col_end: usize,
}

impl ArrayAssignment {
    pub fn rows_used(&self) -> usize {
        self.row_end - self.row_start
    }

    pub fn outputs(&self) -> usize {
        self.col_end - self.col_start
    }
}

/// One logical weight matrix to tile: a plain layer, or one block of a split
/// layer. Row chunks are the input slices that share output accumulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitPlan {
    pub block: Option<usize>,
    pub fanin: usize,
    pub row_chunks: Vec<(usize, usize)>,
    /// One quantizer per row chunk in ADC mode on hidden layers; `None` in
    /// every other mode/role.
    pub quantizers: Option<Vec<QuantizerSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub role: LayerRole,
    pub out_dim: usize,
    pub units: Vec<UnitPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilePlan {
    pub config: ArrayConfig,
    pub layers: Vec<LayerPlan>,
    pub assignments: Vec<ArrayAssignment>,
    pub per_layer_arrays: Vec<usize>,
    pub array_count: usize,
}

fn chunk_ranges(total: usize, chunk: usize) -> Vec<(usize, usize)> {
    (0..total)
        .step_by(chunk)
        .map(|s| (s, (s + chunk).min(total)))
        .collect()
}

fn role_of(idx: usize, last: usize, first_multibit: bool) -> LayerRole {
    if idx == last {
        LayerRole::Output
    } else if idx == 0 && first_multibit {
        LayerRole::First
    } else {
        LayerRole::Hidden
    }
}

/// Compile `net` onto arrays of shape `cfg`.
///
/// SA_1BIT mode requires every hidden-layer unit (plain layer or split
/// block) to fit the input capacity in one pass — partial sums cannot cross
/// arrays through a 1-bit interface. First and output layers are exempt:
/// they are row-tiled and accumulated at full precision in every mode.
pub fn plan_tiling(net: &Network, cfg: &ArrayConfig) -> Result<TilePlan> {
    let capacity = cfg.input_capacity();
    let out_per_array = cfg.outputs_per_array();
    let last = net.layers.len().checked_sub(1).ok_or_else(|| Error::Config("network has no layers".into()))?;

    let mut layers = Vec::new();
    let mut assignments = Vec::new();
    let mut per_layer_arrays = vec![0usize; net.layers.len()];
    let mut next_id = 0usize;

    for (li, layer) in net.layers.iter().enumerate() {
        let role = role_of(li, last, net.first_multibit);
        let out_dim = layer.geom().out_dim();
        let col_chunks = chunk_ranges(out_dim, out_per_array);

        // (block id, unit fanin) per unit of the layer
        let units_src: Vec<(Option<usize>, usize)> = match layer {
            Layer::Plain(p) => vec![(None, p.geom.fanin())],
            Layer::Split(s) => (0..s.plan.n)
                .map(|i| {
                    let (a, b) = s.plan.block_range(i);
                    (Some(i), b - a)
                })
                .collect(),
        };

        let mut units = Vec::new();
        for (block, fanin) in units_src {
            if matches!(cfg.output_mode, OutputMode::Sa1Bit)
                && role == LayerRole::Hidden
                && fanin > capacity
            {
                return Err(Error::UnsplitLayer { layer: li, fanin, capacity });
            }
            let row_chunks = chunk_ranges(fanin, capacity);
            let quantizers = match cfg.output_mode {
                OutputMode::Adc { bits } if role == LayerRole::Hidden => Some(
                    row_chunks
                        .iter()
                        .map(|&(a, b)| sum_grid_quantizer(b - a, bits))
                        .collect::<Result<Vec<_>>>()?,
                ),
                _ => None,
            };
            for &(rs, re) in &row_chunks {
                for &(cs, ce) in &col_chunks {
                    assignments.push(ArrayAssignment {
                        array_id: next_id,
                        layer: li,
                        block,
                        row_start: rs,
                        row_end: re,
                        col_start: cs,
                        col_end: ce,
                    });
                    next_id += 1;
                    per_layer_arrays[li] += 1;
                }
            }
            units.push(UnitPlan { block, fanin, row_chunks, quantizers });
        }
        layers.push(LayerPlan { layer: li, role, out_dim, units });
    }

    Ok(TilePlan {
        config: *cfg,
        layers,
        assignments,
        per_layer_arrays,
        array_count: next_id,
    })
}

/// Replace the default (linear) quantizers of a hidden-layer ADC plan.
/// `specs[layer_index][chunk_index]` must cover every quantized unit chunk;
/// all blocks of a split layer share the layer's per-chunk-position spec.
pub fn install_quantizers(plan: &mut TilePlan, specs: &BTreeMap<usize, Vec<QuantizerSpec>>) -> Result<()> {
    for lp in &mut plan.layers {
        let Some(layer_specs) = specs.get(&lp.layer) else { continue };
        for unit in &mut lp.units {
            if unit.quantizers.is_none() {
                continue;
            }
            if layer_specs.len() < unit.row_chunks.len() {
                return Err(Error::Config(format!(
                    "layer {}: {} quantizers provided for {} row chunks",
                    lp.layer,
                    layer_specs.len(),
                    unit.row_chunks.len()
                )));
            }
            unit.quantizers = Some(layer_specs[..unit.row_chunks.len()].to_vec());
        }
    }
    Ok(())
}

/// Histograms of the raw (unquantized) per-chunk partial sums of every
/// hidden-layer unit, keyed by layer index; `result[layer][chunk]` pools the
/// sums of that chunk position across all units and batch entries. Sums are
/// integers, so counting keeps memory flat. Used to fit empirical
/// quantizers; the forward pass runs at ideal precision and the first and
/// output layers (quantization-exempt) are skipped.
pub fn collect_partial_sums(
    net: &Network,
    plan: &TilePlan,
    input: &NetInput,
) -> Result<BTreeMap<usize, Vec<BTreeMap<i32, u64>>>> {
    if plan.layers.len() != net.layers.len() {
        return Err(Error::Config(format!(
            "plan covers {} layers but the network has {}",
            plan.layers.len(),
            net.layers.len()
        )));
    }
    let batch = input.batch();
    let last = net.layers.len() - 1;
    let mut collected = BTreeMap::new();

    let mut current: Activation;
    let mut start_idx = 0usize;
    if net.first_multibit {
        let first = match &net.layers[0] {
            Layer::Plain(p) => p,
            Layer::Split(_) => {
                return Err(Error::Config(
                    "the first layer must not be split (it is excluded from input splitting)".into(),
                ))
            }
        };
        if last == 0 {
            return Ok(collected);
        }
        let (_, act) = forward_first_layer(first, input)?;
        current = act;
        start_idx = 1;
    } else {
        let bits = match input {
            NetInput::Bits(b) => b.clone(),
            _ => return Err(Error::Shape("all-binary network expects binary input".into())),
        };
        current = Activation { bits, spatial: None };
    }

    for (i, layer) in net.layers.iter().enumerate().skip(start_idx) {
        if i == last {
            break;
        }
        let lowered = lower_for_layer(&current, layer, batch)?;
        let lp = &plan.layers[i];
        let max_chunks = lp.units.iter().map(|u| u.row_chunks.len()).max().unwrap_or(0);
        let sink: &mut Vec<BTreeMap<i32, u64>> =
            collected.entry(i).or_insert_with(|| vec![BTreeMap::new(); max_chunks]);

        let record = |unit: &UnitPlan, unit_input: &BinaryTensor, weights: &BinaryTensor, sink: &mut Vec<BTreeMap<i32, u64>>| -> Result<()> {
            for (ci, &(rs, re)) in unit.row_chunks.iter().enumerate() {
                let sums = chunk_sums(unit_input, weights, rs, re)?;
                for &v in sums.iter() {
                    *sink[ci].entry(v).or_insert(0) += 1;
                }
            }
            Ok(())
        };
        match layer {
            Layer::Plain(p) => record(&lp.units[0], &lowered, &p.weights, sink)?,
            Layer::Split(s) => {
                for (unit, block) in lp.units.iter().zip(&s.blocks) {
                    let bi = unit.block.ok_or_else(|| Error::Config("split layer unit lacks a block id".into()))?;
                    let (start, _) = s.plan.block_range(bi);
                    let slice = lowered.slice_cols(start, start + unit.fanin)?;
                    record(unit, &slice, &block.weights, sink)?;
                }
            }
        }

        // advance activations at ideal precision
        let out_bits = simulate_ideal_layer(layer, lp, &lowered)?;
        let spatial = spatial_of(layer);
        let shaped = match spatial {
            Some((h, w, c)) => out_bits.reshape(&[batch, h, w, c])?,
            None => out_bits,
        };
        current = Activation { bits: shaped, spatial };
    }
    Ok(collected)
}

/// Hidden-layer forward at ideal precision regardless of any installed
/// quantizers (used while collecting calibration sums).
fn simulate_ideal_layer(layer: &Layer, lp: &LayerPlan, input: &BinaryTensor) -> Result<BinaryTensor> {
    let mut stripped = lp.clone();
    for unit in &mut stripped.units {
        unit.quantizers = None;
    }
    simulate_hidden_layer(layer, &stripped, input)
}

/// Signed partial sums (2P − k) of `input` against `weights` restricted to
/// input rows [rs, re).
fn chunk_sums(
    input: &BinaryTensor,
    weights: &BinaryTensor,
    rs: usize,
    re: usize,
) -> Result<Array2<i32>> {
    let k = (re - rs) as i32;
    let in_slice = input.slice_cols(rs, re)?;
    let w_slice = weights.slice_rows(rs, re)?;
    let wt = w_slice.transpose()?;
    let pc = xnor_popcount_matmul_wt(&in_slice, &wt);
    Ok(pc.mapv(|p| 2 * p - k))
}

/// Accumulated signed sums of a unit across its row chunks, optionally
/// passing each chunk sum through its ADC quantizer.
fn unit_sums(
    input: &BinaryTensor,
    weights: &BinaryTensor,
    unit: &UnitPlan,
) -> Result<Array2<f64>> {
    let batch = input.rows();
    let m = weights.shape()[1];
    let mut acc = Array2::<f64>::zeros((batch, m));
    for (ci, &(rs, re)) in unit.row_chunks.iter().enumerate() {
        let sums = chunk_sums(input, weights, rs, re)?;
        match &unit.quantizers {
            Some(qs) => acc.zip_mut_with(&sums, {
                let q = &qs[ci];
                move |a, &s| *a += q.quantize(s as f64)
            }),
            None => acc.zip_mut_with(&sums, |a, &s| *a += s as f64),
        }
    }
    Ok(acc)
}

fn binarize_sums(sums: &Array2<f64>, tv: &ThresholdVector) -> BinaryTensor {
    let (rows, cols) = sums.dim();
    let mut bits = BinaryTensor::zeros(&[rows, cols]);
    for r in 0..rows {
        for c in 0..cols {
            if tv.fire_sum(c, sums[(r, c)]) {
                bits.set_bit(r, c, true);
            }
        }
    }
    bits
}

/// Hidden layer under array tiling: per-unit chunked (and possibly
/// quantized) accumulation, real-valued threshold test, digital merge for
/// split layers.
fn simulate_hidden_layer(layer: &Layer, lp: &LayerPlan, input: &BinaryTensor) -> Result<BinaryTensor> {
    match layer {
        Layer::Plain(p) => {
            let unit = &lp.units[0];
            let sums = unit_sums(input, &p.weights, unit)?;
            let tv = fold_bn_to_thresholds(&p.bn, p.geom.fanin());
            Ok(binarize_sums(&sums, &tv))
        }
        Layer::Split(s) => {
            let batch = input.rows();
            let m = s.geom.out_dim();
            let mut plus_votes = Array2::<i64>::zeros((batch, m));
            for (unit, block) in lp.units.iter().zip(&s.blocks) {
                let bi = unit.block.ok_or_else(|| Error::Config("split layer unit lacks a block id".into()))?;
                let (start, _) = s.plan.block_range(bi);
                let slice = input.slice_cols(start, start + unit.fanin)?;
                let sums = unit_sums(&slice, &block.weights, unit)?;
                for r in 0..batch {
                    for c in 0..m {
                        if block.thresholds.fire_sum(c, sums[(r, c)]) {
                            plus_votes[(r, c)] += 1;
                        }
                    }
                }
            }
            let mut bits = BinaryTensor::zeros(&[batch, m]);
            for r in 0..batch {
                for c in 0..m {
                    if plus_votes[(r, c)] >= s.merge_threshold {
                        bits.set_bit(r, c, true);
                    }
                }
            }
            Ok(bits)
        }
    }
}

/// Output layer: raw integer scores accumulated at full precision (exempt
/// from quantization in every mode).
fn simulate_output_layer(layer: &Layer, lp: &LayerPlan, input: &BinaryTensor) -> Result<Array2<i64>> {
    let p = match layer {
        Layer::Plain(p) => p,
        Layer::Split(_) => {
            return Err(Error::Config(
                "the output layer must not be split (it is excluded from input splitting)".into(),
            ))
        }
    };
    let unit = &lp.units[0];
    let batch = input.rows();
    let m = p.geom.out_dim();
    let mut acc = Array2::<i64>::zeros((batch, m));
    for &(rs, re) in &unit.row_chunks {
        let sums = chunk_sums(input, &p.weights, rs, re)?;
        acc.zip_mut_with(&sums, |a, &s| *a += s as i64);
    }
    Ok(acc)
}

fn spatial_of(layer: &Layer) -> Option<(usize, usize, usize)> {
    match layer.geom() {
        LayerGeom::Dense { .. } => None,
        LayerGeom::Conv(g) => Some((g.out_h(), g.out_w(), g.out_c)),
    }
}

/// Simulate `net` on the crossbar fabric described by `plan`.
///
/// IDEAL mode is bit-exact with [`crate::network::reference_forward`];
/// SA_1BIT mode is bit-exact with the reconstructed network's software
/// forward; ADC mode quantizes each array's partial sum before digital
/// accumulation.
pub fn simulate(net: &Network, plan: &TilePlan, input: &NetInput) -> Result<ForwardResult> {
    if plan.layers.len() != net.layers.len() {
        return Err(Error::Config(format!(
            "plan covers {} layers but the network has {}",
            plan.layers.len(),
            net.layers.len()
        )));
    }
    let batch = input.batch();
    let last = net.layers.len() - 1;

    let mut current: Activation;
    let mut start_idx = 0usize;
    if net.first_multibit {
        let first = match &net.layers[0] {
            Layer::Plain(p) => p,
            Layer::Split(_) => {
                return Err(Error::Config(
                    "the first layer must not be split (it is excluded from input splitting)".into(),
                ))
            }
        };
        if last == 0 {
            let (sums, _) = forward_first_layer(first, input)?;
            return Ok(ForwardResult { scores: sums, activations: None });
        }
        let (_, act) = forward_first_layer(first, input)?;
        current = act;
        start_idx = 1;
    } else {
        let bits = match input {
            NetInput::Bits(b) => b.clone(),
            _ => return Err(Error::Shape("all-binary network expects binary input".into())),
        };
        current = Activation { bits, spatial: None };
    }

    for (i, layer) in net.layers.iter().enumerate().skip(start_idx) {
        let lowered = lower_for_layer(&current, layer, batch)?;
        let lp = &plan.layers[i];
        if i == last {
            let scores = simulate_output_layer(layer, lp, &lowered)?;
            return Ok(ForwardResult { scores, activations: None });
        }
        let out_bits = match plan.config.output_mode {
            // the SA applies the integer threshold to the single-pass
            // popcount — identical to the software layer forward
            OutputMode::Sa1Bit => forward_binary_layer(layer, &lowered)?,
            OutputMode::Ideal | OutputMode::Adc { .. } => {
                simulate_hidden_layer(layer, lp, &lowered)?
            }
        };
        let spatial = spatial_of(layer);
        let shaped = match spatial {
            Some((h, w, c)) => out_bits.reshape(&[batch, h, w, c])?,
            None => out_bits,
        };
        current = Activation { bits: shaped, spatial };
    }
    unreachable!("loop returns at the last layer");
}

/// Converter inventory of a plan, feeding the power model. Only hidden-layer
/// partial-sum interfaces are counted: the first and output layers need
/// full-precision conversion in every design under comparison, so they
/// cancel out of the published ratios. The digital merge block is likewise
/// excluded (modeled as popcount-and-compare logic, not a converter).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterfaceCensus {
    pub array_count: usize,
    pub sa_count: u64,
    /// ADC count keyed by resolution in bits.
    pub adc_counts: BTreeMap<u32, u64>,
}

impl InterfaceCensus {
    pub fn total_adcs(&self) -> u64 {
        self.adc_counts.values().sum()
    }

    pub fn total_converters(&self) -> u64 {
        self.sa_count + self.total_adcs()
    }
}

/// ADC resolution that loses nothing on a chunk of `rows_used` inputs: the
/// signed sum takes rows_used + 1 distinct values.
pub fn lossless_bits(rows_used: usize) -> u32 {
    (rows_used as f64 + 1.0).log2().ceil() as u32
}

pub fn count_interfaces(plan: &TilePlan) -> InterfaceCensus {
    let mut sa_count = 0u64;
    let mut adc_counts: BTreeMap<u32, u64> = BTreeMap::new();
    for a in &plan.assignments {
        if plan.layers[a.layer].role != LayerRole::Hidden {
            continue;
        }
        let converters = a.outputs() as u64;
        match plan.config.output_mode {
            OutputMode::Sa1Bit => sa_count += converters,
            OutputMode::Adc { bits } => *adc_counts.entry(bits).or_insert(0) += converters,
            OutputMode::Ideal => {
                *adc_counts.entry(lossless_bits(a.rows_used())).or_insert(0) += converters
            }
        }
    }
    InterfaceCensus {
        array_count: plan.array_count,
        sa_count,
        adc_counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::PlainLayer;
    use crate::network::{accuracy, reference_forward};
    use crate::reconstruct::{reconstruct_network, ReconstructMode};
    use ndarray::Array2 as A2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    use crate::bn::BatchNormParams;
    use crate::quantizer::linear_quantizer;
    use crate::conv::ConvGeom;

    fn random_bits(rng: &mut impl Rng, shape: &[usize]) -> BinaryTensor {
        let n: usize = shape.iter().product();
        let v: Vec<i8> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        BinaryTensor::from_pm1(shape, &v).unwrap()
    }

    fn random_bn(rng: &mut impl Rng, n: usize) -> BatchNormParams {
        BatchNormParams::new(
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect(),
            (0..n).map(|_| rng.gen_range(0.2..3.0)).collect(),
            (0..n)
                .map(|_| rng.gen_range(0.2..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 })
                .collect(),
            (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
            1e-5,
        )
        .unwrap()
    }

    fn random_mlp(rng: &mut impl Rng, dims: &[usize]) -> Network {
        let mut layers = Vec::new();
        for i in 0..dims.len() - 1 {
            layers.push(Layer::Plain(PlainLayer {
                geom: LayerGeom::Dense { in_dim: dims[i], out_dim: dims[i + 1] },
                weights: random_bits(rng, &[dims[i], dims[i + 1]]),
                bn: random_bn(rng, dims[i + 1]),
            }));
        }
        Network { layers, first_multibit: true }
    }

    fn random_cnn(rng: &mut impl Rng) -> Network {
        // 8x8x2 input -> 3x3 conv to 6 ch -> 3x3 conv to 4 ch -> dense to 3
        let g1 = ConvGeom { in_h: 8, in_w: 8, in_c: 2, fh: 3, fw: 3, out_c: 6, stride: 1, pad: 1 };
        let g2 = ConvGeom { in_h: 8, in_w: 8, in_c: 6, fh: 3, fw: 3, out_c: 4, stride: 1, pad: 1 };
        let flat = 8 * 8 * 4;
        Network {
            layers: vec![
                Layer::Plain(PlainLayer {
                    geom: LayerGeom::Conv(g1),
                    weights: random_bits(rng, &[g1.fanin(), 6]),
                    bn: random_bn(rng, 6),
                }),
                Layer::Plain(PlainLayer {
                    geom: LayerGeom::Conv(g2),
                    weights: random_bits(rng, &[g2.fanin(), 4]),
                    bn: random_bn(rng, 4),
                }),
                Layer::Plain(PlainLayer {
                    geom: LayerGeom::Dense { in_dim: flat, out_dim: 3 },
                    weights: random_bits(rng, &[flat, 3]),
                    bn: random_bn(rng, 3),
                }),
            ],
            first_multibit: true,
        }
    }

    fn cfg(rows: usize, cols: usize, mode: OutputMode) -> ArrayConfig {
        ArrayConfig::new(rows, cols, CellMode::A, mode).unwrap()
    }

    #[test]
    fn capacity_accounting_by_cell_mode() {
        let a = cfg(128, 128, OutputMode::Ideal);
        assert_eq!(a.input_capacity(), 128);
        assert_eq!(a.outputs_per_array(), 64);
        let b = ArrayConfig::new(128, 128, CellMode::B, OutputMode::Ideal).unwrap();
        assert_eq!(b.input_capacity(), 64);
        assert_eq!(b.outputs_per_array(), 128);
    }

    #[test]
    fn dense_512x256_needs_two_arrays_at_r512() {
        // mode A, 512 rows x 256 cols -> 128 outputs per array, so the 256
        // outputs tile across 2 arrays
        let mut rng = StdRng::seed_from_u64(3);
        let net = Network {
            layers: vec![Layer::Plain(PlainLayer {
                geom: LayerGeom::Dense { in_dim: 512, out_dim: 256 },
                weights: random_bits(&mut rng, &[512, 256]),
                bn: random_bn(&mut rng, 256),
            })],
            first_multibit: true,
        };
        let plan = plan_tiling(&net, &cfg(512, 256, OutputMode::Ideal)).unwrap();
        assert_eq!(plan.array_count, 2);
    }

    #[test]
    fn single_array_when_everything_fits() {
        let mut rng = StdRng::seed_from_u64(4);
        let net = random_mlp(&mut rng, &[64, 32, 10]);
        let plan = plan_tiling(&net, &cfg(128, 128, OutputMode::Ideal)).unwrap();
        // layer 0: 64 inputs, 32 outputs -> 1 array; layer 1: 32x10 -> 1
        assert_eq!(plan.per_layer_arrays, vec![1, 1]);
    }

    #[test]
    fn sa_mode_rejects_unsplit_over_capacity_hidden_layer() {
        let mut rng = StdRng::seed_from_u64(5);
        let net = random_mlp(&mut rng, &[32, 300, 50, 10]); // hidden fanin 300 > 128
        let err = plan_tiling(&net, &cfg(128, 128, OutputMode::Sa1Bit)).unwrap_err();
        match err {
            Error::UnsplitLayer { layer, fanin, capacity } => {
                assert_eq!((layer, fanin, capacity), (1, 300, 128));
            }
            e => panic!("wrong error: {e}"),
        }
        // after reconstruction the same network plans fine
        let split = reconstruct_network(&net, 128, ReconstructMode::Mapped).unwrap();
        assert!(plan_tiling(&split, &cfg(128, 128, OutputMode::Sa1Bit)).is_ok());
    }

    #[test]
    fn first_and_output_layers_exempt_from_sa_fit() {
        let mut rng = StdRng::seed_from_u64(6);
        // first fanin 784 and output fanin 256 both exceed R=128; only the
        // hidden layer (fanin 256 -> split) must fit
        let net = random_mlp(&mut rng, &[784, 256, 200, 10]);
        let split = reconstruct_network(&net, 128, ReconstructMode::Mapped).unwrap();
        let plan = plan_tiling(&split, &cfg(128, 128, OutputMode::Sa1Bit)).unwrap();
        assert!(plan.layers[0].units[0].fanin > 128);
        assert_eq!(plan.layers[0].role, LayerRole::First);
        assert_eq!(plan.layers[2].role, LayerRole::Output);
    }

    #[test]
    fn ideal_mode_matches_reference_forward_mlp_and_cnn() {
        let mut rng = StdRng::seed_from_u64(7);
        let net = random_mlp(&mut rng, &[49, 90, 70, 10]);
        let plan = plan_tiling(&net, &cfg(32, 16, OutputMode::Ideal)).unwrap();
        let x = A2::from_shape_fn((50, 49), |_| rng.gen_range(-255i32..=255));
        let sim = simulate(&net, &plan, &NetInput::Flat(x.clone())).unwrap();
        let reference = reference_forward(&net, &NetInput::Flat(x), false).unwrap();
        assert_eq!(sim.scores, reference.scores);

        let cnn = random_cnn(&mut rng);
        let plan = plan_tiling(&cnn, &cfg(16, 8, OutputMode::Ideal)).unwrap();
        let img = ndarray::Array4::from_shape_fn((10, 8, 8, 2), |_| rng.gen_range(-255i32..=255));
        let sim = simulate(&cnn, &plan, &NetInput::Image(img.clone())).unwrap();
        let reference = reference_forward(&cnn, &NetInput::Image(img), false).unwrap();
        assert_eq!(sim.scores, reference.scores);
    }

    #[test]
    fn sa_mode_matches_split_network_software_forward() {
        let mut rng = StdRng::seed_from_u64(8);
        let net = random_mlp(&mut rng, &[40, 300, 200, 10]);
        let split = reconstruct_network(&net, 128, ReconstructMode::Mapped).unwrap();
        let plan = plan_tiling(&split, &cfg(128, 64, OutputMode::Sa1Bit)).unwrap();
        let x = A2::from_shape_fn((64, 40), |_| rng.gen_range(-255i32..=255));
        let sim = simulate(&split, &plan, &NetInput::Flat(x.clone())).unwrap();
        let reference = reference_forward(&split, &NetInput::Flat(x), false).unwrap();
        assert_eq!(sim.scores, reference.scores);
    }

    #[test]
    fn lossless_adc_equals_ideal() {
        // N >= ceil(log2(2R+1)) gives the ADC a code per achievable chunk
        // sum, so quantization is the identity and ADC == IDEAL bit-exactly
        let mut rng = StdRng::seed_from_u64(9);
        let net = random_mlp(&mut rng, &[30, 120, 80, 10]);
        let r = 32usize;
        let ideal = plan_tiling(&net, &cfg(r, 16, OutputMode::Ideal)).unwrap();
        let bits = lossless_bits(2 * r); // generous: covers sums and midpoints
        let adc = plan_tiling(&net, &cfg(r, 16, OutputMode::Adc { bits })).unwrap();
        let x = A2::from_shape_fn((80, 30), |_| rng.gen_range(-255i32..=255));
        let si = simulate(&net, &ideal, &NetInput::Flat(x.clone())).unwrap();
        let sa = simulate(&net, &adc, &NetInput::Flat(x.clone())).unwrap();
        let reference = reference_forward(&net, &NetInput::Flat(x), false).unwrap();
        assert_eq!(si.scores, reference.scores);
        assert_eq!(sa.scores, reference.scores);
    }

    #[test]
    fn adc_fidelity_nondecreasing_in_bits() {
        let mut rng = StdRng::seed_from_u64(10);
        let net = random_mlp(&mut rng, &[30, 120, 80, 10]);
        let x = A2::from_shape_fn((200, 30), |_| rng.gen_range(-255i32..=255));
        let ideal_plan = plan_tiling(&net, &cfg(32, 16, OutputMode::Ideal)).unwrap();
        let ideal = simulate(&net, &ideal_plan, &NetInput::Flat(x.clone())).unwrap();
        let labels: Vec<u8> = ideal.predictions().iter().map(|&p| p as u8).collect();
        let mut prev = -1.0f64;
        for bits in 1..=7u32 {
            let plan = plan_tiling(&net, &cfg(32, 16, OutputMode::Adc { bits })).unwrap();
            let out = simulate(&net, &plan, &NetInput::Flat(x.clone())).unwrap();
            let agree = accuracy(&out, &labels);
            assert!(
                agree + 1e-12 >= prev,
                "agreement with ideal dropped at {bits} bits: {agree} < {prev}"
            );
            prev = agree;
        }
    }

    #[test]
    fn halving_capacity_never_decreases_array_count() {
        let mut rng = StdRng::seed_from_u64(11);
        let net = random_mlp(&mut rng, &[100, 500, 300, 10]);
        let mut prev = 0usize;
        for rows in [512usize, 256, 128, 64] {
            let plan = plan_tiling(&net, &cfg(rows, 64, OutputMode::Ideal)).unwrap();
            assert!(plan.array_count >= prev);
            prev = plan.array_count;
        }
    }

    #[test]
    fn census_sa_mode_reports_zero_adcs() {
        let mut rng = StdRng::seed_from_u64(12);
        let net = random_mlp(&mut rng, &[40, 64, 100, 10]);
        let plan = plan_tiling(&net, &cfg(128, 64, OutputMode::Sa1Bit)).unwrap();
        let census = count_interfaces(&plan);
        assert_eq!(census.total_adcs(), 0);
        assert_eq!(census.sa_count, 100); // one SA per hidden output column
    }

    #[test]
    fn census_ideal_bits_at_r128_is_8() {
        assert_eq!(lossless_bits(128), 8);
        let mut rng = StdRng::seed_from_u64(13);
        let net = random_mlp(&mut rng, &[64, 256, 32, 10]);
        let plan = plan_tiling(&net, &cfg(128, 128, OutputMode::Ideal)).unwrap();
        let census = count_interfaces(&plan);
        // hidden layer fanin 256 tiles into two full 128-row chunks
        assert_eq!(census.adc_counts.keys().copied().collect::<Vec<_>>(), vec![8]);
    }

    #[test]
    fn census_additivity_under_column_doubling() {
        let mut rng = StdRng::seed_from_u64(14);
        let one = Network {
            layers: vec![
                Layer::Plain(PlainLayer {
                    geom: LayerGeom::Dense { in_dim: 32, out_dim: 64 },
                    weights: random_bits(&mut rng, &[32, 64]),
                    bn: random_bn(&mut rng, 64),
                }),
                Layer::Plain(PlainLayer {
                    geom: LayerGeom::Dense { in_dim: 64, out_dim: 4 },
                    weights: random_bits(&mut rng, &[64, 4]),
                    bn: random_bn(&mut rng, 4),
                }),
            ],
            first_multibit: false,
        };
        let mut two = one.clone();
        if let Layer::Plain(p) = &mut two.layers[0] {
            p.geom = LayerGeom::Dense { in_dim: 32, out_dim: 128 };
            p.weights = random_bits(&mut rng, &[32, 128]);
            p.bn = random_bn(&mut rng, 128);
        }
        if let Layer::Plain(p) = &mut two.layers[1] {
            p.geom = LayerGeom::Dense { in_dim: 128, out_dim: 4 };
            p.weights = random_bits(&mut rng, &[128, 4]);
            p.bn = random_bn(&mut rng, 4);
        }
        let c = cfg(128, 128, OutputMode::Adc { bits: 3 });
        let c1 = count_interfaces(&plan_tiling(&one, &c).unwrap());
        let c2 = count_interfaces(&plan_tiling(&two, &c).unwrap());
        assert_eq!(c2.adc_counts[&3], 2 * c1.adc_counts[&3]);
    }

    #[test]
    fn plan_serializes_to_json_and_back() {
        let mut rng = StdRng::seed_from_u64(15);
        let net = random_mlp(&mut rng, &[40, 100, 50, 10]);
        let plan = plan_tiling(&net, &cfg(64, 32, OutputMode::Adc { bits: 2 })).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        let back: TilePlan = serde_json::from_str(&json).unwrap();
        assert_eq!(plan, back);
    }

    #[test]
    fn install_quantizers_replaces_defaults() {
        let mut rng = StdRng::seed_from_u64(16);
        let net = random_mlp(&mut rng, &[40, 100, 50, 10]);
        let mut plan = plan_tiling(&net, &cfg(64, 32, OutputMode::Adc { bits: 2 })).unwrap();
        let custom = linear_quantizer(-10.0, 10.0, 2).unwrap();
        let n_chunks = plan.layers[1].units[0].row_chunks.len();
        let mut specs = BTreeMap::new();
        specs.insert(1usize, vec![custom.clone(); n_chunks]);
        install_quantizers(&mut plan, &specs).unwrap();
        assert_eq!(plan.layers[1].units[0].quantizers.as_ref().unwrap()[0], custom);
        // too few specs is an error
        specs.insert(1usize, vec![custom; n_chunks - 1]);
        if n_chunks > 1 {
            assert!(install_quantizers(&mut plan, &specs).is_err());
        }
    }
}
