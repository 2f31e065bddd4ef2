use serde::{Deserialize, Serialize};

use super::conv::AXIS_NAMES;
use crate::error::{shape_err, Result};
use crate::tensor::dims5;

/// Max-pooling window. Padded positions never win the max.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl PoolSpec {
    pub fn cube(k: usize, stride: usize, padding: usize) -> Self {
        Self { kernel: [k; 3], stride: [stride; 3], padding: [padding; 3] }
    }

    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            if self.kernel[a] == 0 || self.stride[a] == 0 {
                return Err(shape_err!("pool kernel and stride must be positive: {:?}", self));
            }
            if self.padding[a] >= self.kernel[a] {
                return Err(shape_err!("pool padding {} must be below kernel {}", self.padding[a], self.kernel[a]));
            }
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(shape_err!(
                    "pool window {} larger than padded {} extent {}",
                    self.kernel[a],
                    AXIS_NAMES[a],
                    padded
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// Returns pooled values, output shape, and the flat input index of each
/// window's maximum (first occurrence in row-major window order on ties).
pub fn maxpool3d_forward(x: &[f64], shape: &[usize], spec: &PoolSpec) -> Result<(Vec<f64>, Vec<usize>, Vec<usize>)> {
    let [n, c, d, h, w] = dims5(shape)?;
    let [od, oh, ow] = spec.output_extent([d, h, w])?;
    let total = n * c * od * oh * ow;
    let mut out = Vec::with_capacity(total);
    let mut arg = Vec::with_capacity(total);
    let plane = d * h * w;
    let range = |o: usize, a: usize, len: usize| {
        let start = (o * spec.stride[a]) as isize - spec.padding[a] as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + spec.kernel[a] as isize).min(len as isize)) as usize;
        lo..hi
    };
    for nc in 0..n * c {
        let base = nc * plane;
        for zd in 0..od {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for id in range(zd, 0, d) {
                        for ih in range(zh, 1, h) {
                            for iw in range(zw, 2, w) {
                                let i = base + (id * h + ih) * w + iw;
                                if best_i == usize::MAX || x[i] > best {
                                    best = x[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((out, vec![n, c, od, oh, ow], arg))
}

pub fn maxpool3d_backward(argmax: &[usize], gy: &[f64], dx: &mut [f64]) {
    for (&i, &g) in argmax.iter().zip(gy) {
        dx[i] += g;
    }
}

/// Spatial mean per `(n, c)`; output `N,C,1,1,1`.
pub fn global_avg_pool_forward(x: &[f64], shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    let [n, c, d, h, w] = dims5(shape)?;
    let plane = d * h * w;
    let out = x.chunks_exact(plane).map(|ch| ch.iter().sum::<f64>() / plane as f64).collect();
    Ok((out, vec![n, c, 1, 1, 1]))
}

pub fn global_avg_pool_backward(shape: &[usize], gy: &[f64], dx: &mut [f64]) {
    let plane: usize = shape[2..].iter().product();
    let inv = 1.0 / plane as f64;
    for (chunk, &g) in dx.chunks_exact_mut(plane).zip(gy) {
        chunk.iter_mut().for_each(|v| *v += g * inv);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_constant_output() {
        let (y, s, _) = maxpool3d_forward(&[2.5; 64], &[1, 1, 4, 4, 4], &PoolSpec::cube(3, 2, 1)).unwrap();
        assert_eq!(s, vec![1, 1, 2, 2, 2]);
        assert!(y.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn ramp_picks_last_corner() {
        // brute-force window scan oracle
        let x: Vec<f64> = (0..64).map(|v| v as f64).collect();
        let (y, _, arg) = maxpool3d_forward(&x, &[1, 1, 4, 4, 4], &PoolSpec::cube(2, 2, 0)).unwrap();
        let mut want = Vec::new();
        for d in 0..2 {
            for h in 0..2 {
                for w in 0..2 {
                    let mut m = f64::MIN;
                    for a in 0..2 {
                        for b in 0..2 {
                            for c in 0..2 {
                                m = m.max(x[((2 * d + a) * 4 + 2 * h + b) * 4 + 2 * w + c]);
                            }
                        }
                    }
                    want.push(m);
                }
            }
        }
        assert_eq!(y, want);
        assert_eq!(arg[0], (4 + 1) * 4 + 1);
    }

    #[test]
    fn ties_route_gradient_to_first_index() {
        let (_, _, arg) = maxpool3d_forward(&[1.0; 8], &[1, 1, 2, 2, 2], &PoolSpec::cube(2, 2, 0)).unwrap();
        let mut dx = vec![0.0; 8];
        maxpool3d_backward(&arg, &[3.0], &mut dx);
        assert_eq!(dx, vec![3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn oversized_window_is_an_error() {
        assert!(maxpool3d_forward(&[0.0; 8], &[1, 1, 2, 2, 2], &PoolSpec::cube(3, 1, 0)).is_err());
        // padding keeps extent-1 inputs poolable
        let (_, s, _) = maxpool3d_forward(&[0.0; 1], &[1, 1, 1, 1, 1], &PoolSpec::cube(3, 2, 1)).unwrap();
        assert_eq!(s, vec![1, 1, 1, 1, 1]);
    }

    #[test]
    fn gap_of_range_is_three_and_a_half() {
        let x: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let (y, s) = global_avg_pool_forward(&x, &[1, 1, 2, 2, 2]).unwrap();
        assert_eq!(s, vec![1, 1, 1, 1, 1]);
        assert_eq!(y, vec![3.5]);
    }
}
