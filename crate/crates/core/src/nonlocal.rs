//! Non-local block with dot-product pairwise affinity.
//!
//! `y_i = (1/P) * sum_j <theta(x_i), phi(x_j)> g(x_j)` over all `P` positions,
//! followed by a pointwise projection `W_z` and a residual sum
//! `z = x + W_z y`. `W_z` starts at zero, so a fresh block is the identity.
//!
//! The `P x P` affinity matrix is materialised per batch element; memory is
//! `O(P^2)` for that buffer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv3d, Cost, ParamRegistry};
use crate::ops::{linear, ConvSpec};
use crate::tensor::{dims5, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NonLocalConfig {
    pub channels: usize,
    pub bottleneck_channels: usize,
}

impl NonLocalConfig {
    /// Bottleneck of half the input width.
    pub fn halved(channels: usize) -> Self {
        Self { channels, bottleneck_channels: channels / 2 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_channels < 1 || self.channels < 1 {
            return Err(Error::Config(format!("non-local block needs >= 1 channel in every embedding: {:?}", self)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NonLocalBlock {
    pub cfg: NonLocalConfig,
    theta: Conv3d,
    phi: Conv3d,
    g: Conv3d,
    out: Conv3d,
}

impl NonLocalBlock {
    pub fn new(reg: &mut ParamRegistry, name: &str, cfg: NonLocalConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, b) = (cfg.channels, cfg.bottleneck_channels);
        Ok(Self {
            cfg,
            theta: Conv3d::new(reg, &format!("{}.theta", name), ConvSpec::pointwise(c, b), 1.0)?,
            phi: Conv3d::new(reg, &format!("{}.phi", name), ConvSpec::pointwise(c, b), 1.0)?,
            g: Conv3d::new(reg, &format!("{}.g", name), ConvSpec::pointwise(c, b), 1.0)?,
            out: Conv3d::new(reg, &format!("{}.out", name), ConvSpec::pointwise(b, c), 0.0)?,
        })
    }

    /// Parameters of the output projection `W_z`.
    pub fn output_projection(&self) -> &Conv3d {
        &self.out
    }

    pub fn forward(&self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<Var> {
        let [n, c, d, h, w] = dims5(tape.shape(x))?;
        if c != self.cfg.channels {
            return Err(shape_err!("non-local block expects {} channels, got {}", self.cfg.channels, c));
        }
        let p = d * h * w;
        let b = self.cfg.bottleneck_channels;
        let flat = |tape: &mut Tape, v: Var| tape.reshape(v, &[n, b, p]);
        let theta = self.theta.forward(tape, pv, x)?;
        let theta = flat(tape, theta)?;
        let phi = self.phi.forward(tape, pv, x)?;
        let phi = flat(tape, phi)?;
        let g = self.g.forward(tape, pv, x)?;
        let g = flat(tape, g)?;
        // affinity[i][j] = <theta_i, phi_j>
        let affinity = tape.bmm(theta, true, phi, false)?;
        // y[c][i] = sum_j g[c][j] * affinity[i][j]
        let y = tape.bmm(g, false, affinity, true)?;
        let y = tape.scale(y, 1.0 / p as f64)?;
        let y = tape.reshape(y, &[n, b, d, h, w])?;
        let z = self.out.forward(tape, pv, y)?;
        tape.add(x, z)
    }

    pub fn infer(&self, input: [usize; 5], cost: &mut Cost) -> Result<[usize; 5]> {
        let s = self.theta.infer(input, cost)?;
        self.phi.infer(input, cost)?;
        self.g.infer(input, cost)?;
        let [n, b, d, h, w] = s;
        let p = (d * h * w) as u64;
        // affinity plus aggregation
        cost.macs += 2 * n as u64 * p * p * b as u64;
        self.out.infer(s, cost)
    }
}

/// Dot-product affinity between embeddings laid out as `[channels, positions]`.
pub fn pairwise_affinity(theta: &Tensor, phi: &Tensor) -> Result<Tensor> {
    let (&[ct, pt], &[cp, pp]) = (theta.shape(), phi.shape()) else {
        return Err(shape_err!("affinity expects [C,P] embeddings, got {:?} and {:?}", theta.shape(), phi.shape()));
    };
    if ct != cp {
        return Err(shape_err!("embedding widths differ: {} vs {}", ct, cp));
    }
    let (data, _) = linear::bmm_forward(theta.data(), &[1, ct, pt], true, phi.data(), &[1, cp, pp], false)?;
    Tensor::new(vec![pt, pp], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_affinity() {
        // theta columns (1,2), (0,1); phi columns (3,0), (1,1)
        let theta = Tensor::new(vec![2, 2], vec![1.0, 0.0, 2.0, 1.0]).unwrap();
        let phi = Tensor::new(vec![2, 2], vec![3.0, 1.0, 0.0, 1.0]).unwrap();
        let a = pairwise_affinity(&theta, &phi).unwrap();
        assert_eq!(a.data(), &[3.0, 3.0, 0.0, 1.0]);
    }

    #[test]
    fn orthogonal_embeddings_zero_off_diagonal() {
        let e = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 3.0]).unwrap();
        let a = pairwise_affinity(&e, &e).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(a.data()[i * 3 + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn gram_is_symmetric_psd() {
        let e = Tensor::from_fn(&[2, 4], |i| (i as f64 * 1.3).cos());
        let a = pairwise_affinity(&e, &e).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(a.data()[i * 4 + j], a.data()[j * 4 + i]);
            }
        }
        // v^T A v = |E v|^2 >= 0 for a few probe vectors
        for s in 0..5 {
            let v: Vec<f64> = (0..4).map(|i| ((i + s) as f64).sin()).collect();
            let q: f64 = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| v[i] * a.data()[i * 4 + j] * v[j]).sum();
            assert!(q >= -1e-12);
        }
    }

    #[test]
    fn bottleneck_below_one_rejected() {
        let mut reg = ParamRegistry::default();
        assert!(matches!(NonLocalBlock::new(&mut reg, "nl", NonLocalConfig::halved(1)), Err(Error::Config(_))));
    }
}
