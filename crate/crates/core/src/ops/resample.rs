//! Nearest and trilinear resampling of the spatial axes.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::dims5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResampleMode {
    Nearest,
    Trilinear,
}

/// Per-axis source taps for every output index: `(i0, i1, w0, w1)`.
#[derive(Debug, Clone)]
pub struct ResizePlan {
    pub in_extent: [usize; 3],
    pub out_extent: [usize; 3],
    taps: [Vec<(usize, usize, f64, f64)>; 3],
}

fn axis_taps(n_in: usize, n_out: usize, mode: ResampleMode) -> Vec<(usize, usize, f64, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| match mode {
            ResampleMode::Nearest => {
                let i = (o * n_in / n_out).min(n_in - 1);
                (i, i, 1.0, 0.0)
            }
            ResampleMode::Trilinear => {
                // half-pixel centers, corners not aligned
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let l = if i1 == i0 { 0.0 } else { src - i0 as f64 };
                (i0, i1, 1.0 - l, l)
            }
        })
        .collect()
}

impl ResizePlan {
    pub fn new(in_extent: [usize; 3], out_extent: [usize; 3], mode: ResampleMode) -> Result<Self> {
        if in_extent.iter().chain(&out_extent).any(|&e| e == 0) {
            return Err(shape_err!("resize extents must be positive: {:?} -> {:?}", in_extent, out_extent));
        }
        let taps = [0, 1, 2].map(|a| axis_taps(in_extent[a], out_extent[a], mode));
        Ok(Self { in_extent, out_extent, taps })
    }

    pub fn by_factor(in_extent: [usize; 3], factor: [usize; 3], mode: ResampleMode) -> Result<Self> {
        if factor.iter().any(|&f| f == 0) {
            return Err(shape_err!("upsample factors must be positive, got {:?}", factor));
        }
        Self::new(in_extent, [0, 1, 2].map(|a| in_extent[a] * factor[a]), mode)
    }

    pub fn forward(&self, x: &[f64], shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
        let [n, c, d, h, w] = dims5(shape)?;
        if [d, h, w] != self.in_extent {
            return Err(shape_err!("resize plan built for {:?}, got {:?}", self.in_extent, [d, h, w]));
        }
        let [od, oh, ow] = self.out_extent;
        let mut out = vec![0.0; n * c * od * oh * ow];
        let in_plane = d * h * w;
        let out_plane = od * oh * ow;
        for nc in 0..n * c {
            let src = &x[nc * in_plane..(nc + 1) * in_plane];
            let dst = &mut out[nc * out_plane..(nc + 1) * out_plane];
            let mut k = 0;
            for &(d0, d1, a0, a1) in &self.taps[0] {
                for &(h0, h1, b0, b1) in &self.taps[1] {
                    for &(w0, w1, c0, c1) in &self.taps[2] {
                        let at = |z: usize, y: usize, x: usize| src[(z * h + y) * w + x];
                        dst[k] = a0 * (b0 * (c0 * at(d0, h0, w0) + c1 * at(d0, h0, w1))
                            + b1 * (c0 * at(d0, h1, w0) + c1 * at(d0, h1, w1)))
                            + a1 * (b0 * (c0 * at(d1, h0, w0) + c1 * at(d1, h0, w1))
                                + b1 * (c0 * at(d1, h1, w0) + c1 * at(d1, h1, w1)));
                        k += 1;
                    }
                }
            }
        }
        Ok((out, vec![n, c, od, oh, ow]))
    }

    pub fn backward(&self, nc: usize, gy: &[f64], dx: &mut [f64]) {
        let [_, h, w] = self.in_extent;
        let in_plane: usize = self.in_extent.iter().product();
        let out_plane: usize = self.out_extent.iter().product();
        for i in 0..nc {
            let g = &gy[i * out_plane..(i + 1) * out_plane];
            let dst = &mut dx[i * in_plane..(i + 1) * in_plane];
            let mut k = 0;
            for &(d0, d1, a0, a1) in &self.taps[0] {
                for &(h0, h1, b0, b1) in &self.taps[1] {
                    for &(w0, w1, c0, c1) in &self.taps[2] {
                        let gv = g[k];
                        k += 1;
                        for (z, wz) in [(d0, a0), (d1, a1)] {
                            for (y, wy) in [(h0, b0), (h1, b1)] {
                                for (x, wx) in [(w0, c0), (w1, c1)] {
                                    let wt = wz * wy * wx;
                                    if wt != 0.0 {
                                        dst[(z * h + y) * w + x] += gv * wt;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_single_voxel_block() {
        let p = ResizePlan::by_factor([1, 1, 1], [2, 2, 2], ResampleMode::Nearest).unwrap();
        let (y, s) = p.forward(&[4.0], &[1, 1, 1, 1, 1]).unwrap();
        assert_eq!(s, vec![1, 1, 2, 2, 2]);
        assert_eq!(y, vec![4.0; 8]);
    }

    #[test]
    fn nearest_index_map_floor_i_over_f() {
        let p = ResizePlan::by_factor([1, 1, 2], [1, 1, 2], ResampleMode::Nearest).unwrap();
        let (y, _) = p.forward(&[1.0, 7.0], &[1, 1, 1, 1, 2]).unwrap();
        let oracle: Vec<f64> = (0..4).map(|i| [1.0, 7.0][i / 2]).collect();
        assert_eq!(y, oracle);
    }

    #[test]
    fn trilinear_constant_stays_constant() {
        let p = ResizePlan::new([2, 3, 3], [4, 5, 7], ResampleMode::Trilinear).unwrap();
        let (y, _) = p.forward(&[1.25; 18], &[1, 1, 2, 3, 3]).unwrap();
        assert!(y.iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn trilinear_1d_half_pixel() {
        // in [0, 1] upsampled x2 -> [0, 0.25, 0.75, 1]
        let p = ResizePlan::by_factor([1, 1, 2], [1, 1, 2], ResampleMode::Trilinear).unwrap();
        let (y, _) = p.forward(&[0.0, 1.0], &[1, 1, 1, 1, 2]).unwrap();
        assert_eq!(y, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
