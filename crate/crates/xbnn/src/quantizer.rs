//! Partial-sum quantization baselines: a uniform mid-rise quantizer and the
//! Lloyd-Max optimal scalar quantizer driven by a Gaussian-kernel density
//! estimate of the empirical partial-sum distribution.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LLOYD_TOL: f64 = 1e-6;
pub const LLOYD_MAX_ITERS: usize = 200;
const EMPTY_REGION_MASS: f64 = 1e-12;
/// Total fixed integration grid over the padded support.
const SIMPSON_GRID: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantKind {
    Linear,
    LloydMax,
}

/// A scalar quantizer: 2^bits reconstruction levels separated by
/// 2^bits - 1 decision boundaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub kind: QuantKind,
    pub bits: u32,
    pub boundaries: Vec<f64>,
    pub levels: Vec<f64>,
}

impl QuantizerSpec {
    pub fn validate(&self) -> Result<()> {
        let n = 1usize << self.bits;
        if self.levels.is_empty() || self.levels.len() > n {
            return Err(Error::Config(format!(
                "{}-bit quantizer supports 1..={} levels, got {}",
                self.bits,
                n,
                self.levels.len()
            )));
        }
        if self.boundaries.len() != self.levels.len() - 1 {
            return Err(Error::Config(format!(
                "{} levels need {} boundaries, got {}",
                self.levels.len(),
                self.levels.len() - 1,
                self.boundaries.len()
            )));
        }
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.levels) || !increasing(&self.boundaries) {
            return Err(Error::Config(
                "levels and boundaries must be strictly increasing".into(),
            ));
        }
        for i in 0..self.boundaries.len() {
            if !(self.levels[i] <= self.boundaries[i] && self.boundaries[i] <= self.levels[i + 1]) {
                return Err(Error::Config(format!(
                    "boundary {i} not between its neighboring levels"
                )));
            }
        }
        Ok(())
    }

    /// Map a value to its region's reconstruction level. Values beyond the
    /// outer boundaries clamp to the extreme levels.
    #[inline]
    pub fn quantize(&self, x: f64) -> f64 {
        let region = self.boundaries.partition_point(|&b| b <= x);
        self.levels[region]
    }

    /// Mean squared quantization error under `pdf` on `[lo, hi]`.
    pub fn mse(&self, pdf: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
        let f = |x: f64| {
            let e = x - self.quantize(x);
            e * e * pdf(x)
        };
        simpson(&f, lo, hi, SIMPSON_GRID)
    }
}

/// Uniform mid-rise quantizer: 2^bits levels centered in equal cells of
/// [range_min, range_max], boundaries at the cell edges (level midpoints).
pub fn linear_quantizer(range_min: f64, range_max: f64, bits: u32) -> Result<QuantizerSpec> {
    if bits < 1 {
        return Err(Error::InvalidAdcBits(bits));
    }
    if !(range_min < range_max) {
        return Err(Error::InvalidRange {
            min: range_min,
            max: range_max,
        });
    }
    let n = 1usize << bits;
    let step = (range_max - range_min) / n as f64;
    let levels: Vec<f64> = (0..n)
        .map(|i| range_min + (i as f64 + 0.5) * step)
        .collect();
    let boundaries: Vec<f64> = (1..n).map(|i| range_min + i as f64 * step).collect();
    let spec = QuantizerSpec {
        kind: QuantKind::Linear,
        bits,
        boundaries,
        levels,
    };
    spec.validate()?;
    Ok(spec)
}

/// Default ADC transfer for a crossbar row chunk of `fanin` binary inputs.
///
/// The chunk's signed sum takes the fanin + 1 values {-k, -k+2, ..., k}.
/// With 2^bits codes to spare for all of them, the converter digitizes the
/// sum exactly (one code per achievable value — lossless); otherwise it
/// falls back to the uniform mid-rise quantizer over [-k, k].
pub fn sum_grid_quantizer(fanin: usize, bits: u32) -> Result<QuantizerSpec> {
    if bits < 1 {
        return Err(Error::InvalidAdcBits(bits));
    }
    let k = fanin as f64;
    let codes = 1usize << bits.min(32);
    if codes >= fanin + 1 {
        let levels: Vec<f64> = (0..=fanin).map(|i| -k + 2.0 * i as f64).collect();
        let boundaries: Vec<f64> = (0..fanin).map(|i| -k + 2.0 * i as f64 + 1.0).collect();
        let spec = QuantizerSpec {
            kind: QuantKind::Linear,
            bits,
            boundaries,
            levels,
        };
        spec.validate()?;
        Ok(spec)
    } else {
        linear_quantizer(-k, k, bits)
    }
}

/// Silverman's rule-of-thumb bandwidth: 1.06 * sigma * n^(-1/5).
pub fn kde_bandwidth(sigma: f64, n_samples: usize) -> f64 {
    1.06 * sigma * (n_samples as f64).powf(-0.2)
}

/// Gaussian-kernel density estimate of an empirical sample set. Duplicate
/// sample values are stored weighted, which leaves the density unchanged but
/// makes evaluation cheap for integer-valued partial sums.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KdeModel {
    /// Distinct sample values with multiplicities.
    pub samples: Vec<(f64, u64)>,
    pub bandwidth: f64,
    pub n_samples: usize,
    pub sigma_hat: f64,
}

impl KdeModel {
    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.n_samples as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        let mut acc = 0.0;
        for &(v, c) in &self.samples {
            let z = (x - v) / h;
            acc += c as f64 * (-0.5 * z * z).exp();
        }
        acc * norm
    }

    pub fn min_sample(&self) -> f64 {
        self.samples
            .iter()
            .map(|&(v, _)| v)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_sample(&self) -> f64 {
        self.samples
            .iter()
            .map(|&(v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Support padded by 8 bandwidths on each side; the density mass outside
    /// is below 1e-6.
    pub fn padded_support(&self) -> (f64, f64) {
        (
            self.min_sample() - 8.0 * self.bandwidth,
            self.max_sample() + 8.0 * self.bandwidth,
        )
    }
}

/// Fit a Gaussian KDE with the rule-of-thumb bandwidth.
pub fn kde_fit(samples: &[f64]) -> Result<KdeModel> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::DegenerateSamples { n });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Err(Error::DegenerateSamples { n });
    }
    // compress duplicates (partial sums are integers; this is exact)
    let mut sorted: Vec<f64> = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut compressed: Vec<(f64, u64)> = Vec::new();
    for &v in &sorted {
        match compressed.last_mut() {
            Some((last, c)) if *last == v => *c += 1,
            _ => compressed.push((v, 1)),
        }
    }
    Ok(KdeModel {
        samples: compressed,
        bandwidth: kde_bandwidth(sigma, n),
        n_samples: n,
        sigma_hat: sigma,
    })
}

/// Composite Simpson integration with `n` (even) subintervals.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Simpson subinterval count for a region, proportional to its share of the
/// support (the fixed 4096-point budget), with a floor so thin regions still
/// integrate accurately.
fn region_grid(lo: f64, hi: f64, support: f64) -> usize {
    let share = ((hi - lo) / support * SIMPSON_GRID as f64).ceil() as usize;
    share.clamp(8, SIMPSON_GRID).next_multiple_of(2)
}

/// Lloyd-Max optimal scalar quantizer for a probability density on
/// [support_lo, support_hi]: alternates the two necessary conditions
/// (boundaries = level midpoints, levels = region centroids) until the
/// largest level movement is below 1e-6 or 200 iterations pass.
pub fn lloyd_max(
    pdf: &dyn Fn(f64) -> f64,
    support_lo: f64,
    support_hi: f64,
    bits: u32,
) -> Result<QuantizerSpec> {
    if bits < 1 {
        return Err(Error::InvalidAdcBits(bits));
    }
    if !(support_lo < support_hi) {
        return Err(Error::InvalidRange {
            min: support_lo,
            max: support_hi,
        });
    }
    let n = 1usize << bits;
    let width = support_hi - support_lo;
    // init with the uniform levels
    let mut levels: Vec<f64> = linear_quantizer(support_lo, support_hi, bits)?.levels;
    let mut boundaries = vec![0.0f64; n - 1];
    for _ in 0..LLOYD_MAX_ITERS {
        for i in 0..n - 1 {
            boundaries[i] = 0.5 * (levels[i] + levels[i + 1]);
        }
        let mut max_move = 0.0f64;
        for i in 0..n {
            let lo = if i == 0 { support_lo } else { boundaries[i - 1] };
            let hi = if i == n - 1 { support_hi } else { boundaries[i] };
            let grid = region_grid(lo, hi, width);
            let mass = simpson(pdf, lo, hi, grid);
            if mass < EMPTY_REGION_MASS {
                // standard Lloyd repair: drop the starved level into the
                // middle of the widest region
                let widest = widest_region(&boundaries, support_lo, support_hi);
                let new = 0.5 * (widest.0 + widest.1);
                max_move = max_move.max((levels[i] - new).abs());
                levels[i] = new;
                levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
                continue;
            }
            let moment = simpson(&|x| x * pdf(x), lo, hi, grid);
            let centroid = moment / mass;
            max_move = max_move.max((levels[i] - centroid).abs());
            levels[i] = centroid;
        }
        if max_move < LLOYD_TOL {
            break;
        }
    }
    for i in 0..n - 1 {
        boundaries[i] = 0.5 * (levels[i] + levels[i + 1]);
    }
    let spec = QuantizerSpec {
        kind: QuantKind::LloydMax,
        bits,
        boundaries,
        levels,
    };
    spec.validate()?;
    Ok(spec)
}

fn widest_region(boundaries: &[f64], lo: f64, hi: f64) -> (f64, f64) {
    let mut edges = Vec::with_capacity(boundaries.len() + 2);
    edges.push(lo);
    edges.extend_from_slice(boundaries);
    edges.push(hi);
    edges
        .windows(2)
        .map(|w| (w[0], w[1]))
        .max_by(|a, b| (a.1 - a.0).partial_cmp(&(b.1 - b.0)).unwrap())
        .unwrap()
}

/// Fit a Lloyd-Max quantizer to empirical partial sums via the KDE pipeline.
pub fn lloyd_max_from_samples(samples: &[f64], bits: u32) -> Result<QuantizerSpec> {
    let kde = kde_fit(samples)?;
    let (lo, hi) = kde.padded_support();
    lloyd_max(&|x| kde.density(x), lo, hi, bits)
}

/// Fit a Gaussian KDE from pre-counted sample values (value, multiplicity).
/// Identical to [`kde_fit`] on the expanded sample list, but integer-valued
/// partial sums can be accumulated as histograms without materializing them.
pub fn kde_fit_counts(counts: &[(f64, u64)]) -> Result<KdeModel> {
    let n_u64: u64 = counts.iter().map(|&(_, c)| c).sum();
    let n = n_u64 as usize;
    if n < 2 {
        return Err(Error::DegenerateSamples { n });
    }
    let mean = counts.iter().map(|&(v, c)| v * c as f64).sum::<f64>() / n as f64;
    let var = counts
        .iter()
        .map(|&(v, c)| c as f64 * (v - mean) * (v - mean))
        .sum::<f64>()
        / (n as f64 - 1.0);
    let sigma = var.sqrt();
    if sigma == 0.0 {
        return Err(Error::DegenerateSamples { n });
    }
    let mut compressed: Vec<(f64, u64)> = counts.iter().copied().filter(|&(_, c)| c > 0).collect();
    compressed.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(KdeModel {
        samples: compressed,
        bandwidth: kde_bandwidth(sigma, n),
        n_samples: n,
        sigma_hat: sigma,
    })
}

/// [`lloyd_max_from_samples`] over a histogram of integer partial sums.
pub fn lloyd_max_from_counts(counts: &[(f64, u64)], bits: u32) -> Result<QuantizerSpec> {
    let kde = kde_fit_counts(counts)?;
    let (lo, hi) = kde.padded_support();
    lloyd_max(&|x| kde.density(x), lo, hi, bits)
}

/// Map every integer partial sum to its reconstruction level.
pub fn quantize_partial_sums(sums: &Array2<i32>, spec: &QuantizerSpec) -> Array2<f64> {
    sums.mapv(|s| spec.quantize(s as f64))
}
