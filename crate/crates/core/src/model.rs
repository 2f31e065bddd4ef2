//! Full network assembly, symbolic shape/cost accounting, and checkpoints.
//!
//! Layout: 7x7x7 stride-2 stem, 3x3x3 stride-2 max pool, three stages of
//! `residual unit -> attention stack`, an optional non-local block right after
//! the last attention stage, three closing residual units, global average
//! pooling and a fully connected classifier. The stage widths double after
//! every downsampling: bottleneck width `C * 2^s`, output width `4C * 2^s`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::{AttentionModule, AttentionModuleConfig, AttentionVariant};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv3d, Cost, Linear, ParamRegistry, ParamStore, Parameter, ResidualUnit, ResidualUnitConfig};
use crate::nonlocal::{NonLocalBlock, NonLocalConfig};
use crate::ops::{ConvSpec, PoolSpec};
use crate::tensor::{DType, Tensor};

fn default_base_channels() -> usize {
    8
}
fn default_in_channels() -> usize {
    1
}
fn default_stacks() -> [usize; 3] {
    [1, 1, 1]
}
fn default_variant() -> AttentionVariant {
    AttentionVariant::Mixed
}
fn default_true() -> bool {
    true
}
fn default_classes() -> usize {
    3
}
fn default_input_shape() -> [usize; 3] {
    [16, 32, 32]
}
fn default_mask_steps() -> usize {
    2
}
fn default_residual_gain() -> f64 {
    DEFAULT_RESIDUAL_GAIN
}

/// Initial gain on the last convolution of every residual branch.
pub const DEFAULT_RESIDUAL_GAIN: f64 = 0.25;

/// Declarative description of one network variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Stem width `C`.
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Attention modules after each of the three stage-leading residual units.
    #[serde(default = "default_stacks")]
    pub attention_stacks: [usize; 3],
    #[serde(default = "default_variant")]
    pub attention_variant: AttentionVariant,
    #[serde(default = "default_true")]
    pub use_nonlocal: bool,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Input extents `D, H, W`.
    #[serde(default = "default_input_shape")]
    pub input_shape: [usize; 3],
    /// Downsampling (= upsampling) steps in each mask branch.
    #[serde(default = "default_mask_steps")]
    pub mask_steps: usize,
    #[serde(default = "default_residual_gain")]
    pub residual_init_gain: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl NetworkConfig {
    /// Desk-scale configuration with three attention modules and the non-local block.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Plain residual backbone: no attention, no non-local block.
    pub fn resnet_baseline(self) -> Self {
        Self { attention_stacks: [0, 0, 0], use_nonlocal: false, ..self }
    }

    pub fn full_resmix3() -> Self {
        Self { base_channels: 64, input_shape: [64, 160, 160], ..Self::default() }
    }

    pub fn full_resmix6() -> Self {
        Self { attention_stacks: [1, 2, 3], ..Self::full_resmix3() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.input_shape.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!("input extents must be positive: {:?}", self.input_shape)));
        }
        if !(self.residual_init_gain >= 0.0) {
            return Err(Error::Config("residual_init_gain must be non-negative".into()));
        }
        Ok(())
    }

    /// `(mid, out)` widths of stage `s` (0..=3).
    pub fn stage_widths(&self, s: usize) -> (usize, usize) {
        let mid = self.base_channels << s;
        (mid, 4 * mid)
    }

    pub fn canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("config serialises")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json()))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    unit: ResidualUnit,
    attention: Vec<AttentionModule>,
}

/// Layer structure and parameter shapes of a network; no weights.
#[derive(Debug, Clone)]
pub struct NetworkPlan {
    pub config: NetworkConfig,
    registry: ParamRegistry,
    stem: Conv3d,
    pool: PoolSpec,
    stages: Vec<Stage>,
    nonlocal: Option<NonLocalBlock>,
    tail: Vec<ResidualUnit>,
    fc: Linear,
}

/// One row of the symbolic shape walk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageShape {
    pub layer: String,
    /// `N, C, D, H, W`.
    pub shape: [usize; 5],
}

fn stage_err(name: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Config(format!("{}: {}", name, e))
}

impl NetworkPlan {
    pub fn new(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let gain = config.residual_init_gain;
        let mut reg = ParamRegistry::default();
        let c = config.base_channels;
        let stem = Conv3d::new(&mut reg, "stem", ConvSpec::same(config.in_channels, c, 7, 2), 1.0)?;
        let mut in_ch = c;
        let mut stages = Vec::new();
        for s in 0..3 {
            let (mid, out) = config.stage_widths(s);
            let unit_cfg = ResidualUnitConfig {
                in_channels: in_ch,
                mid_channels: mid,
                out_channels: out,
                stride: if s == 0 { 1 } else { 2 },
            };
            let unit = ResidualUnit::new(&mut reg, &format!("stage{}.unit", s + 1), unit_cfg, gain)?;
            let attention = (0..config.attention_stacks[s])
                .map(|i| {
                    let cfg = AttentionModuleConfig {
                        down_steps: config.mask_steps,
                        up_steps: config.mask_steps,
                        ..AttentionModuleConfig::new(out, config.attention_variant)
                    };
                    AttentionModule::new(&mut reg, &format!("stage{}.attention{}", s + 1, i), cfg, gain)
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage { unit, attention });
            in_ch = out;
        }
        let nonlocal = if config.use_nonlocal {
            Some(NonLocalBlock::new(&mut reg, "nonlocal", NonLocalConfig::halved(in_ch))?)
        } else {
            None
        };
        let (mid, out) = config.stage_widths(3);
        let mut tail = Vec::new();
        for i in 0..3 {
            let cfg = ResidualUnitConfig {
                in_channels: if i == 0 { in_ch } else { out },
                mid_channels: mid,
                out_channels: out,
                stride: if i == 0 { 2 } else { 1 },
            };
            tail.push(ResidualUnit::new(&mut reg, &format!("stage4.unit{}", i), cfg, gain)?);
        }
        let fc = Linear::new(&mut reg, "fc", out, config.num_classes)?;
        let plan = Self {
            config: config.clone(),
            registry: reg,
            stem,
            pool: PoolSpec::cube(3, 2, 1),
            stages,
            nonlocal,
            tail,
            fc,
        };
        plan.shape_walk(1).map_err(|e| Error::Config(format!("shape-infeasible configuration: {}", e)))?;
        Ok(plan)
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn attention_module_count(&self) -> usize {
        self.stages.iter().map(|s| s.attention.len()).sum()
    }

    pub fn fc(&self) -> &Linear {
        &self.fc
    }

    pub fn count_params(&self) -> u64 {
        self.registry.count()
    }

    /// Symbolic forward over the configured input, one row per network stage.
    pub fn shape_walk(&self, batch: usize) -> Result<Vec<StageShape>> {
        Ok(self.walk(batch)?.0)
    }

    /// Multiply-adds of one forward pass. Counts every convolution as
    /// `N * Cout * D'H'W' * Cin * kd*kh*kw`, the classifier as `N * K * F`, and
    /// the non-local block's affinity and aggregation products as
    /// `2 * N * P^2 * C'`. Pooling, activations and elementwise ops are free.
    pub fn count_flops(&self, batch: usize) -> Result<u64> {
        Ok(self.walk(batch)?.1.macs)
    }

    fn walk(&self, batch: usize) -> Result<(Vec<StageShape>, Cost)> {
        let cfg = &self.config;
        let mut cost = Cost::default();
        let mut rows = Vec::new();
        let [d, h, w] = cfg.input_shape;
        let mut s = [batch, cfg.in_channels, d, h, w];
        s = self.stem.infer(s, &mut cost).map_err(stage_err("conv1"))?;
        rows.push(StageShape { layer: "conv1".into(), shape: s });
        let o = self.pool.output_extent([s[2], s[3], s[4]]).map_err(stage_err("max pooling"))?;
        s = [s[0], s[1], o[0], o[1], o[2]];
        rows.push(StageShape { layer: "max pooling".into(), shape: s });
        for (i, st) in self.stages.iter().enumerate() {
            let name = format!("residual unit {}", i + 1);
            s = st.unit.infer(s, &mut cost).map_err(stage_err(&name))?;
            rows.push(StageShape { layer: name, shape: s });
            for (j, m) in st.attention.iter().enumerate() {
                let name = format!("attention {}.{}", i + 1, j + 1);
                s = m.infer(s, &mut cost).map_err(stage_err(&name))?;
                rows.push(StageShape { layer: name, shape: s });
            }
        }
        if let Some(nl) = &self.nonlocal {
            s = nl.infer(s, &mut cost).map_err(stage_err("non-local"))?;
            rows.push(StageShape { layer: "non-local".into(), shape: s });
        }
        for (i, u) in self.tail.iter().enumerate() {
            let name = format!("residual unit 4.{}", i + 1);
            s = u.infer(s, &mut cost).map_err(stage_err(&name))?;
            rows.push(StageShape { layer: name, shape: s });
        }
        s = [s[0], s[1], 1, 1, 1];
        rows.push(StageShape { layer: "average pooling".into(), shape: s });
        cost.macs += (batch * self.fc.in_features * self.fc.out_features) as u64;
        rows.push(StageShape { layer: "fc".into(), shape: [batch, self.fc.out_features, 1, 1, 1] });
        Ok((rows, cost))
    }
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[N, num_classes]`.
    pub logits: Var,
    /// Attention map of every module, in network order.
    pub attention_maps: Vec<Var>,
    /// Last feature map before global average pooling.
    pub features: Var,
}

/// A plan together with concrete weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub plan: NetworkPlan,
    pub params: ParamStore,
}

impl Model {
    /// Build with Kaiming-initialised weights drawn from `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        let plan = NetworkPlan::new(config)?;
        let params = plan.registry.initialize(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self { plan, params })
    }

    pub fn from_params(config: &NetworkConfig, params: ParamStore) -> Result<Self> {
        let plan = NetworkPlan::new(config)?;
        params.conforms_to(&plan.registry)?;
        Ok(Self { plan, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.plan.config
    }

    pub fn count_params(&self) -> u64 {
        self.params.count()
    }

    /// Record the forward pass of `x` (`N, Cin, D, H, W`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, pv: &[Var], x: Var) -> Result<ForwardOutput> {
        let p = &self.plan;
        let mut h = p.stem.forward(tape, pv, x)?;
        h = tape.relu(h)?;
        h = tape.maxpool3d(h, &p.pool)?;
        let mut maps = Vec::new();
        for st in &p.stages {
            h = st.unit.forward(tape, pv, h)?;
            let (out, m) = crate::attention::stack_attention(tape, pv, h, &st.attention)?;
            h = out;
            maps.extend(m);
        }
        if let Some(nl) = &p.nonlocal {
            h = nl.forward(tape, pv, h)?;
        }
        for u in &p.tail {
            h = u.forward(tape, pv, h)?;
        }
        let features = h;
        let pooled = tape.global_avg_pool(h)?;
        let n = tape.shape(pooled)[0];
        let flat = tape.reshape(pooled, &[n, p.fc.in_features])?;
        let logits = p.fc.forward(tape, pv, flat)?;
        Ok(ForwardOutput { logits, attention_maps: maps, features })
    }

    /// Inference-only logits for a batch.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &pv, xv)?;
        Ok(tape.value(out.logits).clone())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"NLCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    config: NetworkConfig,
    config_hash: String,
    epoch: u64,
    best_metric: f64,
}

/// Weights plus the configuration and training position they belong to.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub epoch: u64,
    pub best_metric: f64,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let config = self.model.config().clone();
        let meta = CheckpointMeta { config_hash: config.hash(), config, epoch: self.epoch, best_metric: self.best_metric };
        let json = serde_json::to_vec(&meta)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        let params = self.model.params.params();
        w.write_all(&(params.len() as u32).to_le_bytes())?;
        for p in params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            p.tensor.write_to(w, DType::F64)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("not a checkpoint: magic {:?}", magic)));
        }
        let mut v = [0u8; 2];
        read_exact(r, &mut v)?;
        let version = u16::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", version)));
        }
        let json_len = read_u32(r)? as usize;
        let mut json = vec![0u8; json_len];
        read_exact(r, &mut json)?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("checkpoint header: {}", e)))?;
        if meta.config.hash() != meta.config_hash {
            return Err(Error::Incompatible(format!(
                "stored config hash {} does not match its config ({})",
                meta.config_hash,
                meta.config.hash()
            )));
        }
        let count = read_u32(r)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let mut l = [0u8; 2];
            read_exact(r, &mut l)?;
            let mut name = vec![0u8; u16::from_le_bytes(l) as usize];
            read_exact(r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let tensor = Tensor::read_from(r)?;
            params.push(Parameter { name, tensor });
        }
        let model = Model::from_params(&meta.config, ParamStore::from_params(params))?;
        Ok(Self { model, epoch: meta.epoch, best_metric: meta.best_metric })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Load, insisting the stored configuration equals `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &NetworkConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.model.config().hash() != expected.hash() {
            return Err(Error::Incompatible(format!(
                "checkpoint config hash {} differs from expected {}",
                ck.model.config().hash(),
                expected.hash()
            )));
        }
        Ok(ck)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
