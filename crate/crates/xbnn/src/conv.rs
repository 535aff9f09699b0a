//! Convolution lowering: 4D filters become a 2D (fh*fw*cin) x cout matrix and
//! input feature maps become patch matrices, so convolution is an ordinary
//! matrix product on the lowered operands.

use ndarray::{Array2, Array4, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::BinaryTensor;

/// Geometry of a conv layer. Feature maps are laid out [batch, h, w, c] and
/// lowered patch rows use (fy, fx, c) index order, matching the contiguous
/// input-index order that input splitting slices along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub fh: usize,
    pub fw: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.fh == 0 || self.fw == 0 || self.in_c == 0 || self.out_c == 0 {
            return Err(Error::Shape(format!("degenerate conv geometry {self:?}")));
        }
        if self.in_h + 2 * self.pad < self.fh || self.in_w + 2 * self.pad < self.fw {
            return Err(Error::Shape(format!(
                "filter {}x{} larger than padded input {}x{}",
                self.fh,
                self.fw,
                self.in_h + 2 * self.pad,
                self.in_w + 2 * self.pad
            )));
        }
        Ok(())
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.fh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.fw) / self.stride + 1
    }

    /// Lowered input dimension: fh * fw * cin.
    pub fn fanin(&self) -> usize {
        self.fh * self.fw * self.in_c
    }

    pub fn patches_per_image(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Lower a binary feature map [batch, h, w, c] to a patch matrix
/// [batch * out_h * out_w, fh * fw * c]. Padding inserts -1 (bit 0), the only
/// zero-analog a two-level cell can hold.
pub fn lower_conv_input(input: &BinaryTensor, g: &ConvGeom) -> Result<BinaryTensor> {
    g.validate()?;
    let shape = input.shape();
    if shape.len() != 4 || shape[1] != g.in_h || shape[2] != g.in_w || shape[3] != g.in_c {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match conv geometry {:?}",
            shape, g
        )));
    }
    let batch = shape[0];
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut patches = BinaryTensor::zeros(&[batch * oh * ow, g.fanin()]);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let prow = (b * oh + oy) * ow + ox;
                let mut pcol = 0usize;
                for fy in 0..g.fh {
                    for fx in 0..g.fw {
                        let iy = (oy * g.stride + fy) as isize - g.pad as isize;
                        let ix = (ox * g.stride + fx) as isize - g.pad as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.in_h
                            && (ix as usize) < g.in_w;
                        for c in 0..g.in_c {
                            if inside {
                                let row = (b * g.in_h + iy as usize) * g.in_w + ix as usize;
                                if input.get(row, c) {
                                    patches.set_bit(prow, pcol, true);
                                }
                            }
                            // padding stays at bit 0 == -1
                            pcol += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(patches)
}

/// Integer variant for the multi-bit first layer. Padding inserts 0.
pub fn lower_conv_input_int(input: &ArrayView4<i32>, g: &ConvGeom) -> Result<Array2<i32>> {
    g.validate()?;
    let (batch, h, w, c) = input.dim();
    if h != g.in_h || w != g.in_w || c != g.in_c {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match conv geometry {:?}",
            input.dim(),
            g
        )));
    }
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut patches = Array2::<i32>::zeros((batch * oh * ow, g.fanin()));
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let prow = (b * oh + oy) * ow + ox;
                let mut pcol = 0usize;
                for fy in 0..g.fh {
                    for fx in 0..g.fw {
                        let iy = (oy * g.stride + fy) as isize - g.pad as isize;
                        let ix = (ox * g.stride + fx) as isize - g.pad as isize;
                        let inside =
                            iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                        for ch in 0..c {
                            if inside {
                                patches[(prow, pcol)] =
                                    input[(b, iy as usize, ix as usize, ch)];
                            }
                            pcol += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(patches)
}

/// Lower 4D ±1 filters [fh, fw, cin, cout] to the 2D (fh*fw*cin) x cout form.
pub fn lower_filters(filters: &Array4<i8>, g: &ConvGeom) -> Result<BinaryTensor> {
    let (fh, fw, cin, cout) = filters.dim();
    if fh != g.fh || fw != g.fw || cin != g.in_c || cout != g.out_c {
        return Err(Error::Shape(format!(
            "filter shape {:?} does not match conv geometry {:?}",
            filters.dim(),
            g
        )));
    }
    let mut w = BinaryTensor::zeros(&[g.fanin(), cout]);
    for fy in 0..fh {
        for fx in 0..fw {
            for c in 0..cin {
                let row = (fy * fw + fx) * cin + c;
                for o in 0..cout {
                    if filters[(fy, fx, c, o)] > 0 {
                        w.set_bit(row, o, true);
                    }
                }
            }
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::xnor_popcount_matmul;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_bits(rng: &mut impl Rng, shape: &[usize]) -> BinaryTensor {
        let n: usize = shape.iter().product();
        let v: Vec<i8> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        BinaryTensor::from_pm1(shape, &v).unwrap()
    }

    /// Direct ±1 sliding-window convolution oracle (padding = -1).
    fn direct_conv(input: &BinaryTensor, filt: &Array4<i8>, g: &ConvGeom) -> Vec<i32> {
        let batch = input.shape()[0];
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0i32; batch * oh * ow * g.out_c];
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..g.out_c {
                        let mut s = 0i32;
                        for fy in 0..g.fh {
                            for fx in 0..g.fw {
                                for c in 0..g.in_c {
                                    let iy = (oy * g.stride + fy) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + fx) as isize - g.pad as isize;
                                    let xv = if iy >= 0
                                        && ix >= 0
                                        && (iy as usize) < g.in_h
                                        && (ix as usize) < g.in_w
                                    {
                                        input.get_pm1(
                                            (b * g.in_h + iy as usize) * g.in_w + ix as usize,
                                            c,
                                        )
                                    } else {
                                        -1
                                    };
                                    s += xv as i32 * filt[(fy, fx, c, o)] as i32;
                                }
                            }
                        }
                        out[((b * oh + oy) * ow + ox) * g.out_c + o] = s;
                    }
                }
            }
        }
        out
    }

    fn check_lowering_matches_direct(g: ConvGeom, batch: usize, seed: u64) {
        let mut rng = StdRng::seed_from_u64(seed);
        let input = random_bits(&mut rng, &[batch, g.in_h, g.in_w, g.in_c]);
        let filt = Array4::from_shape_fn((g.fh, g.fw, g.in_c, g.out_c), |_| {
            if rng.gen::<bool>() {
                1i8
            } else {
                -1
            }
        });
        let patches = lower_conv_input(&input, &g).unwrap();
        let w = lower_filters(&filt, &g).unwrap();
        let p = xnor_popcount_matmul(&patches, &w).unwrap();
        let oracle = direct_conv(&input, &filt, &g);
        let k = g.fanin() as i32;
        for (row, chunk) in oracle.chunks(g.out_c).enumerate() {
            for (o, &expected) in chunk.iter().enumerate() {
                assert_eq!(2 * p[(row, o)] - k, expected, "row {row} out {o}");
            }
        }
    }

    #[test]
    fn one_by_one_filter_is_identity_rearrangement() {
        let g = ConvGeom {
            in_h: 4,
            in_w: 3,
            in_c: 5,
            fh: 1,
            fw: 1,
            out_c: 2,
            stride: 1,
            pad: 0,
        };
        let mut rng = StdRng::seed_from_u64(1);
        let input = random_bits(&mut rng, &[2, 4, 3, 5]);
        let patches = lower_conv_input(&input, &g).unwrap();
        assert_eq!(patches.shape(), &[2 * 4 * 3, 5]);
        // patch matrix is the input rows reshaped, in the same order
        for r in 0..patches.rows() {
            for c in 0..5 {
                assert_eq!(patches.get(r, c), input.get(r, c));
            }
        }
    }

    #[test]
    fn three_by_three_on_5x5_single_channel() {
        let g = ConvGeom {
            in_h: 5,
            in_w: 5,
            in_c: 1,
            fh: 3,
            fw: 3,
            out_c: 4,
            stride: 1,
            pad: 0,
        };
        assert_eq!(g.patches_per_image(), 9);
        assert_eq!(g.fanin(), 9);
        check_lowering_matches_direct(g, 3, 11);
    }

    #[test]
    fn lowered_row_count_for_3x3x128_filter() {
        let g = ConvGeom {
            in_h: 16,
            in_w: 16,
            in_c: 128,
            fh: 3,
            fw: 3,
            out_c: 8,
            stride: 1,
            pad: 1,
        };
        assert_eq!(g.fanin(), 1152);
    }

    #[test]
    fn random_geometries_match_direct_conv() {
        for (i, g) in [
            ConvGeom { in_h: 6, in_w: 6, in_c: 3, fh: 3, fw: 3, out_c: 5, stride: 1, pad: 1 },
            ConvGeom { in_h: 7, in_w: 5, in_c: 2, fh: 3, fw: 2, out_c: 3, stride: 2, pad: 0 },
            ConvGeom { in_h: 8, in_w: 8, in_c: 4, fh: 2, fw: 2, out_c: 6, stride: 2, pad: 1 },
        ]
        .iter()
        .enumerate()
        {
            check_lowering_matches_direct(*g, 2, 100 + i as u64);
        }
    }

    #[test]
    fn inconsistent_geometry_is_shape_error() {
        let g = ConvGeom {
            in_h: 4,
            in_w: 4,
            in_c: 2,
            fh: 3,
            fw: 3,
            out_c: 2,
            stride: 1,
            pad: 0,
        };
        let input = BinaryTensor::zeros(&[1, 5, 4, 2]); // wrong height
        assert!(lower_conv_input(&input, &g).is_err());
        let filt = Array4::<i8>::from_elem((3, 3, 3, 2), 1); // wrong cin
        assert!(lower_filters(&filt, &g).is_err());
    }
}
