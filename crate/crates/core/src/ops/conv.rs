//! 3D cross-correlation with zero padding, lowered to GEMM through im2col.

use serde::{Deserialize, Serialize};

use super::gemm::gemm;
use crate::error::{shape_err, Result};

/// Geometry of a 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub has_bias: bool,
}

impl ConvSpec {
    /// Cubic kernel with "same"-style padding `k / 2`.
    pub fn same(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [k / 2; 3],
            has_bias: true,
        }
    }

    /// 1x1x1 convolution with bias.
    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::same(in_channels, out_channels, 1, 1)
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kd, kh, kw]
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.taps() + if self.has_bias { self.out_channels } else { 0 }
    }

    fn is_pointwise_identity_grid(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.padding == [0; 3]
    }

    /// Output spatial extents for the given input extents.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if self.stride.iter().any(|&s| s == 0) || self.kernel.iter().any(|&k| k == 0) {
            return Err(shape_err!("conv kernel and stride must be positive: {:?}", self));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return Err(shape_err!(
                    "conv axis {} extent {} (padded {}) smaller than kernel {}",
                    AXIS_NAMES[a],
                    input[a],
                    padded,
                    self.kernel[a]
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }

    /// Multiply-adds for one batch element.
    pub fn macs(&self, input: [usize; 3]) -> Result<u64> {
        let o = self.output_extent(input)?;
        Ok((o.iter().product::<usize>() * self.out_channels * self.in_channels * self.taps()) as u64)
    }
}

pub(crate) const AXIS_NAMES: [&str; 3] = ["depth", "height", "width"];

struct Geometry {
    cin: usize,
    inp: [usize; 3],
    out: [usize; 3],
    spec: ConvSpec,
}

impl Geometry {
    fn in_plane(&self) -> usize {
        self.inp.iter().product()
    }
    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }
    fn k_rows(&self) -> usize {
        self.cin * self.spec.taps()
    }

    /// Valid output range along one axis for a tap offset: indices `o` with
    /// `0 <= o*s + k - p < n`.
    fn valid(&self, axis: usize, tap: usize) -> (usize, usize) {
        let s = self.spec.stride[axis];
        let p = self.spec.padding[axis];
        let n = self.inp[axis];
        let o_n = self.out[axis];
        let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
        // o*s + tap - p <= n - 1  =>  o <= (n - 1 + p - tap) / s
        let hi = if n + p > tap { ((n - 1 + p - tap) / s + 1).min(o_n) } else { 0 };
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let [kd, kh, kw] = self.spec.kernel;
        let [_, oh_n, ow_n] = self.out;
        let [_, ih_n, iw_n] = self.inp;
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.padding;
        let p_out = self.out_plane();
        let mut row = 0;
        for ci in 0..self.cin {
            let xc = &x[ci * self.in_plane()..(ci + 1) * self.in_plane()];
            for a in 0..kd {
                let (d0, d1) = self.valid(0, a);
                for b in 0..kh {
                    let (h0, h1) = self.valid(1, b);
                    for c in 0..kw {
                        let (w0, w1) = self.valid(2, c);
                        let dst = &mut cols[row * p_out..(row + 1) * p_out];
                        dst.fill(0.0);
                        for od in d0..d1 {
                            let id = od * sd + a - pd;
                            for oh in h0..h1 {
                                let ih = oh * sh + b - ph;
                                let src = &xc[(id * ih_n + ih) * iw_n..];
                                let o = &mut dst[(od * oh_n + oh) * ow_n..];
                                for ow in w0..w1 {
                                    o[ow] = src[ow * sw + c - pw];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let [kd, kh, kw] = self.spec.kernel;
        let [_, oh_n, ow_n] = self.out;
        let [_, ih_n, iw_n] = self.inp;
        let [sd, sh, sw] = self.spec.stride;
        let [pd, ph, pw] = self.spec.padding;
        let p_out = self.out_plane();
        let plane = self.in_plane();
        let mut row = 0;
        for ci in 0..self.cin {
            let xc = &mut dx[ci * plane..(ci + 1) * plane];
            for a in 0..kd {
                let (d0, d1) = self.valid(0, a);
                for b in 0..kh {
                    let (h0, h1) = self.valid(1, b);
                    for c in 0..kw {
                        let (w0, w1) = self.valid(2, c);
                        let src = &cols[row * p_out..(row + 1) * p_out];
                        for od in d0..d1 {
                            let id = od * sd + a - pd;
                            for oh in h0..h1 {
                                let ih = oh * sh + b - ph;
                                let base = (id * ih_n + ih) * iw_n;
                                let s = &src[(od * oh_n + oh) * ow_n..];
                                for ow in w0..w1 {
                                    xc[base + ow * sw + c - pw] += s[ow];
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }
}

fn geometry(x_shape: &[usize], spec: &ConvSpec) -> Result<(usize, Geometry)> {
    let [n, c, d, h, w] = crate::tensor::dims5(x_shape)?;
    if c != spec.in_channels {
        return Err(shape_err!("conv3d expects {} input channels, got {}", spec.in_channels, c));
    }
    let out = spec.output_extent([d, h, w])?;
    Ok((n, Geometry { cin: c, inp: [d, h, w], out, spec: *spec }))
}

/// Output shape of `conv3d` for an input shape.
pub fn conv3d_output_shape(x_shape: &[usize], spec: &ConvSpec) -> Result<Vec<usize>> {
    let (n, g) = geometry(x_shape, spec)?;
    Ok(vec![n, spec.out_channels, g.out[0], g.out[1], g.out[2]])
}

pub(crate) fn check_params(spec: &ConvSpec, w_shape: &[usize], b_shape: Option<&[usize]>) -> Result<()> {
    if w_shape != spec.weight_shape() {
        return Err(shape_err!("conv weight shape {:?}, expected {:?}", w_shape, spec.weight_shape()));
    }
    match (spec.has_bias, b_shape) {
        (true, Some(b)) if b == [spec.out_channels] => Ok(()),
        (false, None) => Ok(()),
        (has, got) => Err(shape_err!("conv bias mismatch: has_bias={} got {:?}", has, got)),
    }
}

/// Forward pass. `x` is `N,Cin,D,H,W`; `w` is `Cout,Cin,kd,kh,kw`.
pub fn conv3d_forward(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    bias: Option<&[f64]>,
    spec: &ConvSpec,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let (n, g) = geometry(x_shape, spec)?;
    let cout = spec.out_channels;
    let (p_in, p_out, k) = (g.in_plane(), g.out_plane(), g.k_rows());
    let mut out = vec![0.0; n * cout * p_out];
    let identity_grid = spec.is_pointwise_identity_grid();
    let mut cols = if identity_grid { Vec::new() } else { vec![0.0; k * p_out] };
    for b in 0..n {
        let xb = &x[b * g.cin * p_in..(b + 1) * g.cin * p_in];
        let ob = &mut out[b * cout * p_out..(b + 1) * cout * p_out];
        if let Some(bias) = bias {
            for co in 0..cout {
                ob[co * p_out..(co + 1) * p_out].fill(bias[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if identity_grid {
            gemm(cout, k, p_out, w, false, xb, false, ob, beta);
        } else {
            g.im2col(xb, &mut cols);
            gemm(cout, k, p_out, w, false, &cols, false, ob, beta);
        }
    }
    Ok((out, vec![n, cout, g.out[0], g.out[1], g.out[2]]))
}

/// Gradients of `conv3d_forward`. Each requested gradient is accumulated into
/// the provided buffer.
pub fn conv3d_backward(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    spec: &ConvSpec,
    gy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) -> Result<()> {
    let (n, g) = geometry(x_shape, spec)?;
    let cout = spec.out_channels;
    let (p_in, p_out, k) = (g.in_plane(), g.out_plane(), g.k_rows());
    let identity_grid = spec.is_pointwise_identity_grid();
    if let Some(db) = db {
        for b in 0..n {
            for co in 0..cout {
                let off = (b * cout + co) * p_out;
                db[co] += gy[off..off + p_out].iter().sum::<f64>();
            }
        }
    }
    if let Some(dw) = dw {
        let mut cols = if identity_grid { Vec::new() } else { vec![0.0; k * p_out] };
        for b in 0..n {
            let xb = &x[b * g.cin * p_in..(b + 1) * g.cin * p_in];
            let gb = &gy[b * cout * p_out..(b + 1) * cout * p_out];
            if identity_grid {
                gemm(cout, p_out, k, gb, false, xb, true, dw, 1.0);
            } else {
                g.im2col(xb, &mut cols);
                gemm(cout, p_out, k, gb, false, &cols, true, dw, 1.0);
            }
        }
    }
    if let Some(dx) = dx {
        let mut dcols = vec![0.0; k * p_out];
        for b in 0..n {
            let gb = &gy[b * cout * p_out..(b + 1) * cout * p_out];
            let dxb = &mut dx[b * g.cin * p_in..(b + 1) * g.cin * p_in];
            if identity_grid {
                gemm(k, cout, p_out, w, true, gb, false, dxb, 1.0);
            } else {
                gemm(k, cout, p_out, w, true, gb, false, &mut dcols, 0.0);
                g.col2im(&dcols, dxb);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel() {
        let spec = ConvSpec { has_bias: false, ..ConvSpec::pointwise(1, 1) };
        let x: Vec<f64> = (0..8).map(|v| v as f64 - 3.0).collect();
        let (y, s) = conv3d_forward(&x, &[1, 1, 2, 2, 2], &[1.0], None, &spec).unwrap();
        assert_eq!(s, vec![1, 1, 2, 2, 2]);
        assert_eq!(y, x);
    }

    #[test]
    fn zero_input_gives_bias() {
        let spec = ConvSpec::same(2, 3, 3, 1);
        let w = vec![0.7; 3 * 2 * 27];
        let (y, _) = conv3d_forward(&vec![0.0; 2 * 27], &[1, 2, 3, 3, 3], &w, Some(&[1.0, -2.0, 0.5]), &spec).unwrap();
        assert!(y[..27].iter().all(|&v| v == 1.0));
        assert!(y[27..54].iter().all(|&v| v == -2.0));
        assert!(y[54..].iter().all(|&v| v == 0.5));
    }

    #[test]
    fn all_ones_cube_sums_to_eight() {
        let spec = ConvSpec { in_channels: 1, out_channels: 1, kernel: [2; 3], stride: [1; 3], padding: [0; 3], has_bias: false };
        let (y, s) = conv3d_forward(&[1.0; 8], &[1, 1, 2, 2, 2], &[1.0; 8], None, &spec).unwrap();
        assert_eq!(s, vec![1, 1, 1, 1, 1]);
        assert_eq!(y, vec![8.0]);
    }

    #[test]
    fn collapsing_extent_is_an_error() {
        let spec = ConvSpec { in_channels: 1, out_channels: 1, kernel: [3; 3], stride: [1; 3], padding: [0; 3], has_bias: false };
        let err = conv3d_output_shape(&[1, 1, 2, 5, 5], &spec).unwrap_err();
        assert!(err.to_string().contains("depth"));
    }

    #[test]
    fn stride_two_same_padding_halves_with_ceil() {
        let spec = ConvSpec::same(1, 1, 7, 2);
        assert_eq!(conv3d_output_shape(&[1, 1, 64, 160, 160], &spec).unwrap(), vec![1, 1, 32, 80, 80]);
        assert_eq!(conv3d_output_shape(&[1, 1, 5, 5, 5], &spec).unwrap(), vec![1, 1, 3, 3, 3]);
    }
}
