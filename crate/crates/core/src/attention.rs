//! Stackable 3D residual attention module.
//!
//! A trunk of residual units produces `F`; a bottom-up/top-down mask branch
//! (max-pool + residual unit per level going down, residual unit + trilinear
//! upsampling per level going up, with skip units summed at matching scales)
//! ends in two pointwise convolutions and the variant activation, giving `M`.
//! The module output is `H = (1 + M) * F`, followed by the post units.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, Cost, ParamRegistry, ResidualUnit, ResidualUnitConfig};
use crate::ops::{ConvSpec, PoolSpec, ResampleMode, ResizePlan};
use crate::tensor::dims5;

/// Activation applied to the mask-branch output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// Elementwise sigmoid over channels and positions.
    Mixed,
    /// Per-position L2 normalisation across channels.
    Channel,
    /// Per-channel spatial standardisation followed by sigmoid.
    Spatial,
}

impl AttentionVariant {
    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::Mixed => "mixed",
            AttentionVariant::Channel => "channel",
            AttentionVariant::Spatial => "spatial",
        }
    }

    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            AttentionVariant::Mixed => tape.sigmoid(x),
            AttentionVariant::Channel => tape.channel_attention(x),
            AttentionVariant::Spatial => tape.spatial_attention(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionModuleConfig {
    pub channels: usize,
    pub down_steps: usize,
    pub up_steps: usize,
    pub pre_units: usize,
    pub trunk_units: usize,
    pub post_units: usize,
    pub variant: AttentionVariant,
}

impl AttentionModuleConfig {
    pub fn new(channels: usize, variant: AttentionVariant) -> Self {
        Self { channels, down_steps: 2, up_steps: 2, pre_units: 1, trunk_units: 2, post_units: 1, variant }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("attention module needs at least one channel".into()));
        }
        if self.down_steps != self.up_steps {
            return Err(Error::Config(format!(
                "mask branch must return to input resolution: {} down vs {} up steps",
                self.down_steps, self.up_steps
            )));
        }
        if self.trunk_units == 0 {
            return Err(Error::Config("attention trunk needs at least one residual unit".into()));
        }
        Ok(())
    }
}

/// Values produced by one module application.
#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// Trunk features `F`.
    pub trunk: Var,
    /// Attention map `M`, same shape as `F`.
    pub mask: Var,
    /// `(1 + M) * F`.
    pub combined: Var,
    /// Module output after the post units.
    pub output: Var,
}

const MASK_POOL: PoolSpec = PoolSpec { kernel: [3; 3], stride: [2; 3], padding: [1; 3] };

#[derive(Debug, Clone)]
pub struct AttentionModule {
    pub cfg: AttentionModuleConfig,
    pre: Vec<ResidualUnit>,
    trunk: Vec<ResidualUnit>,
    down: Vec<ResidualUnit>,
    skips: Vec<ResidualUnit>,
    up: Vec<ResidualUnit>,
    head: [Conv3d; 2],
    post: Vec<ResidualUnit>,
}

impl AttentionModule {
    pub fn new(reg: &mut ParamRegistry, name: &str, cfg: AttentionModuleConfig, residual_gain: f64) -> Result<Self> {
        cfg.validate()?;
        let unit = ResidualUnitConfig::preserving(cfg.channels);
        let units = |part: &str, n: usize, reg: &mut ParamRegistry| -> Result<Vec<ResidualUnit>> {
            (0..n).map(|i| ResidualUnit::new(reg, &format!("{}.{}{}", name, part, i), unit, residual_gain)).collect()
        };
        let pre = units("pre", cfg.pre_units, reg)?;
        let trunk = units("trunk", cfg.trunk_units, reg)?;
        let down = units("down", cfg.down_steps, reg)?;
        let skips = units("skip", cfg.down_steps.saturating_sub(1), reg)?;
        let up = units("up", cfg.up_steps, reg)?;
        let c = cfg.channels;
        let head = [
            Conv3d::new(reg, &format!("{}.mask_head0", name), ConvSpec::pointwise(c, c), 1.0)?,
            Conv3d::new(reg, &format!("{}.mask_head1", name), ConvSpec::pointwise(c, c), 0.0)?,
        ];
        let post = units("post", cfg.post_units, reg)?;
        Ok(Self { cfg, pre, trunk, down, skips, up, head, post })
    }

    pub fn trunk_units(&self) -> &[ResidualUnit] {
        &self.trunk
    }

    pub fn mask_head(&self) -> &[Conv3d; 2] {
        &self.head
    }

    pub fn forward(&self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<AttentionOutput> {
        self.forward_inner(tape, pv, x, None)
    }

    /// Forward pass with the attention map replaced by a constant.
    pub fn forward_with_fixed_mask(&self, tape: &mut Tape, pv: &[Var], x: Var, value: f64) -> Result<AttentionOutput> {
        self.forward_inner(tape, pv, x, Some(value))
    }

    fn forward_inner(&self, tape: &mut Tape, pv: &[Var], x: Var, fixed: Option<f64>) -> Result<AttentionOutput> {
        let [_, c, ..] = dims5(tape.shape(x))?;
        if c != self.cfg.channels {
            return Err(crate::error::shape_err!("attention module expects {} channels, got {}", self.cfg.channels, c));
        }
        let mut cur = x;
        for u in &self.pre {
            cur = u.forward(tape, pv, cur)?;
        }
        let entry = cur;
        let mut trunk = entry;
        for u in &self.trunk {
            trunk = u.forward(tape, pv, trunk)?;
        }

        // mask branch
        let k = self.cfg.down_steps;
        let mut extents = Vec::with_capacity(k);
        let mut skips = Vec::with_capacity(k.saturating_sub(1));
        let mut m = entry;
        for level in 0..k {
            extents.push(spatial(tape.shape(m)));
            m = tape.maxpool3d(m, &MASK_POOL)?;
            m = self.down[level].forward(tape, pv, m)?;
            if level + 1 < k {
                skips.push(self.skips[level].forward(tape, pv, m)?);
            }
        }
        for step in 0..k {
            let level = k - 1 - step;
            m = self.up[step].forward(tape, pv, m)?;
            let plan = ResizePlan::new(spatial(tape.shape(m)), extents[level], ResampleMode::Trilinear)?;
            m = tape.resize(m, plan)?;
            if level >= 1 {
                m = tape.add(m, skips[level - 1])?;
            }
        }
        m = self.head[0].forward(tape, pv, m)?;
        m = tape.relu(m)?;
        m = self.head[1].forward(tape, pv, m)?;
        let mask = match fixed {
            None => self.cfg.variant.apply(tape, m)?,
            Some(v) => {
                let t = crate::tensor::Tensor::full(tape.shape(m), v);
                tape.constant(t)
            }
        };

        let combined = combine(tape, trunk, mask)?;
        let mut output = combined;
        for u in &self.post {
            output = u.forward(tape, pv, output)?;
        }
        Ok(AttentionOutput { trunk, mask, combined, output })
    }

    pub fn infer(&self, input: [usize; 5], cost: &mut Cost) -> Result<[usize; 5]> {
        if input[1] != self.cfg.channels {
            return Err(crate::error::shape_err!("attention module expects {} channels, got {}", self.cfg.channels, input[1]));
        }
        let mut s = input;
        for u in &self.pre {
            s = u.infer(s, cost)?;
        }
        let entry = s;
        for u in &self.trunk {
            s = u.infer(s, cost)?;
        }
        let trunk = s;
        let mut m = entry;
        let mut extents = Vec::new();
        for level in 0..self.cfg.down_steps {
            extents.push([m[2], m[3], m[4]]);
            let o = MASK_POOL.output_extent([m[2], m[3], m[4]])?;
            m = [m[0], m[1], o[0], o[1], o[2]];
            m = self.down[level].infer(m, cost)?;
            if level + 1 < self.cfg.down_steps {
                self.skips[level].infer(m, cost)?;
            }
        }
        for step in 0..self.cfg.up_steps {
            m = self.up[step].infer(m, cost)?;
            let e = extents[self.cfg.down_steps - 1 - step];
            m = [m[0], m[1], e[0], e[1], e[2]];
        }
        for h in &self.head {
            m = h.infer(m, cost)?;
        }
        debug_assert_eq!(m, trunk);
        let mut s = trunk;
        for u in &self.post {
            s = u.infer(s, cost)?;
        }
        Ok(s)
    }
}

/// `H = (1 + M) * F`, computed as `F + M * F`.
pub fn combine(tape: &mut Tape, trunk: Var, mask: Var) -> Result<Var> {
    let mf = tape.mul(mask, trunk)?;
    tape.add(trunk, mf)
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[2], shape[3], shape[4]]
}

/// `n` attention modules applied in sequence; returns the final output and
/// each module's attention map.
pub fn stack_attention(tape: &mut Tape, pv: &[Var], x: Var, modules: &[AttentionModule]) -> Result<(Var, Vec<Var>)> {
    let mut cur = x;
    let mut masks = Vec::with_capacity(modules.len());
    for m in modules {
        let out = m.forward(tape, pv, cur)?;
        masks.push(out.mask);
        cur = out.output;
    }
    Ok((cur, masks))
}
