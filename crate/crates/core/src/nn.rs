//! Parameters and the layer wrappers shared by every architecture component.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::Tensor;

/// Index of a parameter within a [`ParamRegistry`] / [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `N(0, (gain^2) * 2 / fan_in)`.
    KaimingNormal { fan_in: usize, gain: f64 },
    Zeros,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Parameter shapes and initialisers collected while a network plan is built.
/// Nothing is allocated until [`ParamRegistry::initialize`].
#[derive(Debug, Clone, Default)]
pub struct ParamRegistry {
    specs: Vec<ParamSpec>,
}

impl ParamRegistry {
    pub fn register(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = name.into();
        if self.specs.iter().any(|s| s.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {}", name)));
        }
        self.specs.push(ParamSpec { name, shape: shape.to_vec(), init });
        Ok(ParamId(self.specs.len() - 1))
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> u64 {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>() as u64).sum()
    }

    pub fn initialize<R: Rng>(&self, rng: &mut R) -> ParamStore {
        let params = self
            .specs
            .iter()
            .map(|s| {
                let tensor = match s.init {
                    Init::Zeros => Tensor::zeros(&s.shape),
                    Init::KaimingNormal { fan_in, gain } => {
                        let std = gain * (2.0 / fan_in as f64).sqrt();
                        Tensor::from_fn(&s.shape, |_| std * rng.sample::<f64, _>(StandardNormal))
                    }
                };
                Parameter { name: s.name.clone(), tensor }
            })
            .collect();
        ParamStore { params }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Concrete parameter values, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn from_params(params: Vec<Parameter>) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.tensor)
    }

    pub fn count(&self) -> u64 {
        self.params.iter().map(|p| p.tensor.len() as u64).sum()
    }

    /// Place every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.tensor.clone(), requires_grad)).collect()
    }

    /// Gradients accumulated on `tape` for previously bound parameters.
    /// Parameters the backward pass never reached get zeros.
    pub fn gradients(&self, tape: &Tape, vars: &[Var]) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; p.tensor.len()]))
            .collect()
    }

    /// Check names and shapes against a registry.
    pub fn conforms_to(&self, reg: &ParamRegistry) -> Result<()> {
        if self.params.len() != reg.len() {
            return Err(Error::Incompatible(format!(
                "{} parameters stored, architecture has {}",
                self.params.len(),
                reg.len()
            )));
        }
        for (p, s) in self.params.iter().zip(reg.specs()) {
            if p.name != s.name || p.tensor.shape() != s.shape.as_slice() {
                return Err(Error::Incompatible(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(())
    }
}

/// Running totals for symbolic shape inference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Cost {
    /// Multiply-adds per forward pass.
    pub macs: u64,
}

/// Convolution layer bound to registered parameters.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub spec: ConvSpec,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Conv3d {
    /// Kaiming-normal weights scaled by `gain`, zero bias.
    pub fn new(reg: &mut ParamRegistry, name: &str, spec: ConvSpec, gain: f64) -> Result<Self> {
        let fan_in = spec.in_channels * spec.taps();
        let init = if gain == 0.0 { Init::Zeros } else { Init::KaimingNormal { fan_in, gain } };
        let weight = reg.register(format!("{}.weight", name), &spec.weight_shape(), init)?;
        let bias = if spec.has_bias {
            Some(reg.register(format!("{}.bias", name), &[spec.out_channels], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { spec, weight, bias })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    pub fn forward(&self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<Var> {
        tape.conv3d(x, pv[self.weight.0], self.bias.map(|b| pv[b.0]), &self.spec)
    }

    pub fn infer(&self, input: [usize; 5], cost: &mut Cost) -> Result<[usize; 5]> {
        let [n, c, d, h, w] = input;
        if c != self.spec.in_channels {
            return Err(shape_err!("conv expects {} channels, got {}", self.spec.in_channels, c));
        }
        let o = self.spec.output_extent([d, h, w])?;
        cost.macs += n as u64 * self.spec.macs([d, h, w])?;
        Ok([n, self.spec.out_channels, o[0], o[1], o[2]])
    }
}

/// Fully connected layer `x W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new(reg: &mut ParamRegistry, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        let weight = reg.register(
            format!("{}.weight", name),
            &[out_features, in_features],
            Init::KaimingNormal { fan_in: in_features, gain: 1.0 },
        )?;
        let bias = reg.register(format!("{}.bias", name), &[out_features], Init::Zeros)?;
        Ok(Self { in_features, out_features, weight, bias })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn forward(&self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<Var> {
        tape.linear(x, pv[self.weight.0], Some(pv[self.bias.0]))
    }
}

/// Bottleneck residual unit: `1x1 -> 3x3x3 (strided) -> 1x1` plus a skip that
/// is projected by a strided 1x1 convolution when channels or stride change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualUnitConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl ResidualUnitConfig {
    /// Identity-shape unit with a 4x bottleneck.
    pub fn preserving(channels: usize) -> Self {
        Self { in_channels: channels, mid_channels: (channels / 4).max(1), out_channels: channels, stride: 1 }
    }

    pub fn needs_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub cfg: ResidualUnitConfig,
    reduce: Conv3d,
    spatial: Conv3d,
    expand: Conv3d,
    projection: Option<Conv3d>,
}

impl ResidualUnit {
    /// `residual_gain` scales the initial weights of the last convolution on
    /// the residual branch.
    pub fn new(reg: &mut ParamRegistry, name: &str, cfg: ResidualUnitConfig, residual_gain: f64) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.mid_channels == 0 || cfg.out_channels == 0 || cfg.stride == 0 {
            return Err(Error::Config(format!("{}: residual unit extents must be positive: {:?}", name, cfg)));
        }
        let reduce = Conv3d::new(reg, &format!("{}.conv1", name), ConvSpec::pointwise(cfg.in_channels, cfg.mid_channels), 1.0)?;
        let spatial = Conv3d::new(reg, &format!("{}.conv2", name), ConvSpec::same(cfg.mid_channels, cfg.mid_channels, 3, cfg.stride), 1.0)?;
        let expand = Conv3d::new(
            reg,
            &format!("{}.conv3", name),
            ConvSpec::pointwise(cfg.mid_channels, cfg.out_channels),
            residual_gain,
        )?;
        let projection = if cfg.needs_projection() {
            let spec = ConvSpec { stride: [cfg.stride; 3], ..ConvSpec::pointwise(cfg.in_channels, cfg.out_channels) };
            Some(Conv3d::new(reg, &format!("{}.shortcut", name), spec, 1.0)?)
        } else {
            None
        };
        Ok(Self { cfg, reduce, spatial, expand, projection })
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv3d> {
        [&self.reduce, &self.spatial, &self.expand].into_iter().chain(self.projection.as_ref())
    }

    pub fn forward(&self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied();
        if c != Some(self.cfg.in_channels) {
            return Err(shape_err!("residual unit expects {} channels, got shape {:?}", self.cfg.in_channels, tape.shape(x)));
        }
        let h = self.reduce.forward(tape, pv, x)?;
        let h = tape.relu(h)?;
        let h = self.spatial.forward(tape, pv, h)?;
        let h = tape.relu(h)?;
        let h = self.expand.forward(tape, pv, h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(tape, pv, x)?,
            None => x,
        };
        let sum = tape.add(h, skip)?;
        tape.relu(sum)
    }

    pub fn infer(&self, input: [usize; 5], cost: &mut Cost) -> Result<[usize; 5]> {
        let s = self.reduce.infer(input, cost)?;
        let s = self.spatial.infer(s, cost)?;
        let s = self.expand.infer(s, cost)?;
        if let Some(p) = &self.projection {
            let ps = p.infer(input, cost)?;
            debug_assert_eq!(ps, s);
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_param_count_closed_form() {
        let mut reg = ParamRegistry::default();
        Conv3d::new(&mut reg, "c", ConvSpec::same(2, 4, 3, 1), 1.0).unwrap();
        assert_eq!(reg.count(), 2 * 4 * 27 + 4);
        let mut reg = ParamRegistry::default();
        Linear::new(&mut reg, "fc", 256, 3).unwrap();
        assert_eq!(reg.count(), 771);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut reg = ParamRegistry::default();
        reg.register("a", &[1], Init::Zeros).unwrap();
        assert!(reg.register("a", &[2], Init::Zeros).is_err());
    }

    #[test]
    fn projection_iff_shape_changes() {
        let mut reg = ParamRegistry::default();
        let keep = ResidualUnit::new(&mut reg, "a", ResidualUnitConfig::preserving(8), 1.0).unwrap();
        assert!(keep.projection.is_none());
        let strided = ResidualUnit::new(&mut reg, "b", ResidualUnitConfig { stride: 2, ..ResidualUnitConfig::preserving(8) }, 1.0).unwrap();
        assert!(strided.projection.is_some());
        let widen = ResidualUnit::new(&mut reg, "c", ResidualUnitConfig { in_channels: 4, mid_channels: 2, out_channels: 8, stride: 1 }, 1.0).unwrap();
        assert!(widen.projection.is_some());
    }

    fn zero_weights(store: &mut ParamStore) {
        for p in store.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_trunk_is_relu_of_input() {
        let mut reg = ParamRegistry::default();
        let unit = ResidualUnit::new(&mut reg, "u", ResidualUnitConfig::preserving(4), 1.0).unwrap();
        let mut store = reg.initialize(&mut ChaCha8Rng::seed_from_u64(0));
        zero_weights(&mut store);
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape, false);
        let x = Tensor::from_fn(&[1, 4, 2, 3, 3], |i| (i as f64 * 0.77).sin());
        let xv = tape.constant(x.clone());
        let y = unit.forward(&mut tape, &pv, xv).unwrap();
        assert_eq!(tape.value(y), &x.map(|v| v.max(0.0)));
    }

    #[test]
    fn stride_two_halves_with_floor_of_padded_arithmetic() {
        let mut reg = ParamRegistry::default();
        let unit = ResidualUnit::new(&mut reg, "u", ResidualUnitConfig { in_channels: 2, mid_channels: 2, out_channels: 4, stride: 2 }, 1.0).unwrap();
        let mut cost = Cost::default();
        assert_eq!(unit.infer([1, 2, 8, 6, 4], &mut cost).unwrap(), [1, 4, 4, 3, 2]);
        assert_eq!(unit.infer([1, 2, 5, 5, 5], &mut cost).unwrap(), [1, 4, 3, 3, 3]);
        let store = reg.initialize(&mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let pv = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::ones(&[1, 2, 8, 6, 4]));
        let y = unit.forward(&mut tape, &pv, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 4, 4, 3, 2]);
    }
}
