//! Bit-packed binary tensors and the XNOR-popcount matrix multiply.
//!
//! Values are drawn from {-1, +1}; bit 1 encodes +1 and bit 0 encodes -1.
//! Packing is row-major along the last dimension, 64 bits per word, and all
//! tail padding bits are kept at 0 so popcounts never see them.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryTensor {
    shape: Vec<usize>,
    words_per_row: usize,
    data: Vec<u64>,
}

impl std::fmt::Debug for BinaryTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "BinaryTensor(shape={:?})", self.shape)
    }
}

impl BinaryTensor {
    /// All-(-1) tensor (every bit 0).
    pub fn zeros(shape: &[usize]) -> Self {
        assert!(!shape.is_empty(), "shape must have at least one dim");
        let row_len = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let words_per_row = row_len.div_ceil(WORD_BITS);
        BinaryTensor {
            shape: shape.to_vec(),
            words_per_row,
            data: vec![0u64; rows * words_per_row],
        }
    }

    /// Pack a ±1 integer slice (row-major) into a bit tensor.
    pub fn from_pm1(shape: &[usize], values: &[i8]) -> Result<Self> {
        let count: usize = shape.iter().product();
        if values.len() != count {
            return Err(Error::Shape(format!(
                "expected {} elements for shape {:?}, got {}",
                count,
                shape,
                values.len()
            )));
        }
        let mut t = BinaryTensor::zeros(shape);
        let row_len = t.row_len();
        for (i, &v) in values.iter().enumerate() {
            debug_assert!(v == 1 || v == -1, "values must be ±1");
            if v > 0 {
                t.set_bit(i / row_len, i % row_len, true);
            }
        }
        Ok(t)
    }

    /// Unpack to a ±1 integer vector, row-major.
    pub fn to_pm1(&self) -> Vec<i8> {
        let rows = self.rows();
        let row_len = self.row_len();
        let mut out = Vec::with_capacity(rows * row_len);
        for r in 0..rows {
            for c in 0..row_len {
                out.push(if self.get(r, c) { 1 } else { -1 });
            }
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Logical length of one packed row (the last dimension).
    pub fn row_len(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Number of packed rows (product of leading dimensions).
    pub fn rows(&self) -> usize {
        self.shape[..self.shape.len() - 1].iter().product()
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.data
    }

    /// Replace the packed words wholesale (used by deserialization). The
    /// word count must match and tail padding bits must be zero.
    pub fn set_words(&mut self, words: &[u64]) -> Result<()> {
        if words.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "word count {} does not match shape {:?} ({} words)",
                words.len(),
                self.shape,
                self.data.len()
            )));
        }
        self.data.copy_from_slice(words);
        if !self.tail_bits_clear() {
            return Err(Error::Shape(
                "tail padding bits must be zero in packed weight words".into(),
            ));
        }
        Ok(())
    }

    pub fn row_words(&self, row: usize) -> &[u64] {
        &self.data[row * self.words_per_row..(row + 1) * self.words_per_row]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        let w = self.data[row * self.words_per_row + col / WORD_BITS];
        (w >> (col % WORD_BITS)) & 1 == 1
    }

    /// ±1 view of a single element.
    #[inline]
    pub fn get_pm1(&self, row: usize, col: usize) -> i8 {
        if self.get(row, col) {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub fn set_bit(&mut self, row: usize, col: usize, value: bool) {
        debug_assert!(col < self.row_len());
        let idx = row * self.words_per_row + col / WORD_BITS;
        let mask = 1u64 << (col % WORD_BITS);
        if value {
            self.data[idx] |= mask;
        } else {
            self.data[idx] &= !mask;
        }
    }

    #[inline]
    pub fn set_pm1(&mut self, row: usize, col: usize, value: i8) {
        self.set_bit(row, col, value > 0);
    }

    /// Reinterpret the leading dimensions; the packed last dimension must not change.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let count: usize = shape.iter().product();
        let own: usize = self.shape.iter().product();
        if count != own || *shape.last().unwrap() != self.row_len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} (packed last dim {}) to {:?}",
                self.shape,
                self.row_len(),
                shape
            )));
        }
        let mut t = self.clone();
        t.shape = shape.to_vec();
        Ok(t)
    }

    /// Repack to an arbitrary shape with the same element count (bit shuffle).
    pub fn repack(&self, shape: &[usize]) -> Result<Self> {
        let count: usize = shape.iter().product();
        let own: usize = self.shape.iter().product();
        if count != own {
            return Err(Error::Shape(format!(
                "cannot repack {:?} into {:?}",
                self.shape, shape
            )));
        }
        let mut t = BinaryTensor::zeros(shape);
        let row_len = self.row_len();
        let new_row_len = t.row_len();
        for i in 0..count {
            if self.get(i / row_len, i % row_len) {
                t.set_bit(i / new_row_len, i % new_row_len, true);
            }
        }
        Ok(t)
    }

    /// Transpose a 2D tensor.
    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "transpose requires 2D tensor, got {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut t = BinaryTensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                if self.get(i, j) {
                    t.set_bit(j, i, true);
                }
            }
        }
        Ok(t)
    }

    /// Select a contiguous range of leading rows (2D: a row slice `[start, end)` × all cols).
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if self.shape.len() != 2 || end > self.shape[0] || start > end {
            return Err(Error::Shape(format!(
                "invalid row slice {}..{} of {:?}",
                start, end, self.shape
            )));
        }
        let mut t = self.clone();
        t.shape = vec![end - start, self.shape[1]];
        t.data = self.data[start * self.words_per_row..end * self.words_per_row].to_vec();
        Ok(t)
    }

    /// Select a contiguous column range `[start, end)` of a 2D tensor (repacked).
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if self.shape.len() != 2 || end > self.shape[1] || start > end {
            return Err(Error::Shape(format!(
                "invalid col slice {}..{} of {:?}",
                start, end, self.shape
            )));
        }
        let rows = self.shape[0];
        let width = end - start;
        let mut t = BinaryTensor::zeros(&[rows, width]);
        for r in 0..rows {
            for (j, c) in (start..end).enumerate() {
                if self.get(r, c) {
                    t.set_bit(r, j, true);
                }
            }
        }
        Ok(t)
    }

    /// Number of +1 entries in a packed row. Tail bits are zero by invariant.
    pub fn row_popcount(&self, row: usize) -> u32 {
        self.row_words(row).iter().map(|w| w.count_ones()).sum()
    }

    /// Check the tail-padding invariant (all bits past the logical row length are 0).
    pub fn tail_bits_clear(&self) -> bool {
        let tail = self.row_len() % WORD_BITS;
        if tail == 0 {
            return true;
        }
        let mask = !0u64 << tail;
        (0..self.rows()).all(|r| self.row_words(r)[self.words_per_row - 1] & mask == 0)
    }
}

/// Number of positions where the two bit rows agree: `len - popcount(a ^ b)`.
#[inline]
pub fn xnor_popcount_row(a: &[u64], b: &[u64], len: usize) -> i32 {
    debug_assert_eq!(a.len(), b.len());
    let diff: u32 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x ^ y).count_ones())
        .sum();
    len as i32 - diff as i32
}

/// XNOR-popcount matrix multiply: `inputs` is batch×K, `weights` is K×M.
///
/// Returns the popcount matrix P (batch×M), the number of positions where
/// input bit equals weight bit. The signed ±1 weighted sum is `2P - K`.
pub fn xnor_popcount_matmul(inputs: &BinaryTensor, weights: &BinaryTensor) -> Result<Array2<i32>> {
    if inputs.shape().len() != 2 || weights.shape().len() != 2 {
        return Err(Error::Shape("matmul operands must be 2D".into()));
    }
    let k = inputs.shape()[1];
    if weights.shape()[0] != k {
        return Err(Error::Shape(format!(
            "inner dimensions disagree: inputs {:?} vs weights {:?}",
            inputs.shape(),
            weights.shape()
        )));
    }
    let wt = weights.transpose()?;
    Ok(xnor_popcount_matmul_wt(inputs, &wt))
}

/// Same as [`xnor_popcount_matmul`] but takes the weights already transposed
/// (M×K, one packed row per output neuron). This is the hot path; layers cache
/// the transposed packing.
pub fn xnor_popcount_matmul_wt(inputs: &BinaryTensor, weights_t: &BinaryTensor) -> Array2<i32> {
    let batch = inputs.rows();
    let k = inputs.row_len();
    debug_assert_eq!(weights_t.row_len(), k);
    let m = weights_t.rows();
    let mut out = Array2::<i32>::zeros((batch, m));
    for b in 0..batch {
        let xr = inputs.row_words(b);
        for j in 0..m {
            out[(b, j)] = xnor_popcount_row(xr, weights_t.row_words(j), k);
        }
    }
    out
}
