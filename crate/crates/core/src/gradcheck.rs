//! Central-difference verification of tape gradients.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionModule, AttentionModuleConfig, AttentionVariant};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::ParamRegistry;
use crate::nonlocal::{NonLocalBlock, NonLocalConfig};
use crate::ops::{conv3d_output_shape, ConvSpec, PoolSpec, ResampleMode, ResizePlan};
use crate::tensor::Tensor;

/// Largest relative discrepancy between the tape gradient of `f` at `x` and
/// a central difference with step `eps`, measured per component as
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_difference_check_many(|t, v| f(t, v[0]), std::slice::from_ref(x), eps)
}

/// As [`finite_difference_check`], differentiating with respect to every
/// tensor in `xs` at once.
pub fn finite_difference_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {}", eps)));
    }
    for x in xs {
        x.check_finite("finite-difference input")?;
    }
    let eval = |inputs: &[Tensor], grad: bool| -> Result<(f64, Tape, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item()?;
        if grad {
            tape.backward(out)?;
        }
        Ok((value, tape, vars))
    };
    let (_, tape, vars) = eval(xs, true)?;
    let mut worst = 0.0f64;
    let mut probe = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        let zeros = vec![0.0; x.len()];
        let analytic = tape.grad(vars[k]).unwrap_or(&zeros);
        for i in 0..x.len() {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let (up, _, _) = eval(&probe, false)?;
            probe[k].data_mut()[i] = orig - eps;
            let (down, _, _) = eval(&probe, false)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Tolerance used by [`suite`].
pub const SUITE_TOLERANCE: f64 = 1e-4;
const SUITE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub inputs: usize,
    pub passed: bool,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// `sum(y * r)` for a fixed random `r`, so every output element carries a
/// distinct weight.
fn weighted_sum(t: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let rv = t.constant(r.clone());
    let p = t.mul(y, rv)?;
    t.sum(p)
}

fn projection(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    random(rng, shape, -1.0, 1.0)
}

fn check<F>(name: &str, xs: Vec<Tensor>, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let inputs = xs.iter().map(Tensor::len).sum();
    let err = finite_difference_check_many(f, &xs, SUITE_EPS)?;
    Ok(CheckResult { name: name.into(), max_rel_error: err, inputs, passed: err < SUITE_TOLERANCE })
}

/// Module parameters drawn uniformly so that zero-initialised projections
/// still carry gradient.
fn random_params(reg: &ParamRegistry, rng: &mut ChaCha8Rng, scale: f64) -> Vec<Tensor> {
    reg.specs().iter().map(|s| random(rng, &s.shape, -scale, scale)).collect()
}

/// Finite-difference checks of every differentiable operation and of the
/// composite attention and non-local modules, in 64-bit precision.
pub fn suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let spec = ConvSpec { in_channels: 2, out_channels: 3, kernel: [3, 3, 3], stride: [2, 2, 2], padding: [1, 1, 1], has_bias: true };
    let x = random(&mut rng, &[1, 2, 4, 5, 5], -1.0, 1.0);
    let w = random(&mut rng, &spec.weight_shape(), -0.5, 0.5);
    let b = random(&mut rng, &[3], -0.5, 0.5);
    let oshape = conv3d_output_shape(x.shape(), &spec)?;
    let r = projection(&mut rng, &oshape);
    out.push(check("conv3d", vec![x, w, b], |t, v| {
        let y = t.conv3d(v[0], v[1], Some(v[2]), &spec)?;
        weighted_sum(t, y, &r)
    })?);

    // distinct, well separated values keep the arg-max away from ties
    let pool = PoolSpec::cube(3, 2, 1);
    let mut vals: Vec<f64> = (0..2 * 4 * 5 * 5).map(|i| i as f64 * 0.01).collect();
    vals.shuffle(&mut rng);
    let x = Tensor::new(vec![1, 2, 4, 5, 5], vals)?;
    let r = projection(&mut rng, &[1, 2, 2, 3, 3]);
    out.push(check("maxpool3d", vec![x], |t, v| {
        let y = t.maxpool3d(v[0], &pool)?;
        weighted_sum(t, y, &r)
    })?);

    for (name, mode) in [("upsample3d trilinear", ResampleMode::Trilinear), ("upsample3d nearest", ResampleMode::Nearest)] {
        let plan = ResizePlan::new([2, 3, 3], [4, 5, 6], mode)?;
        let x = random(&mut rng, &[1, 2, 2, 3, 3], -1.0, 1.0);
        let r = projection(&mut rng, &[1, 2, 4, 5, 6]);
        out.push(check(name, vec![x], |t, v| {
            let y = t.resize(v[0], plan.clone())?;
            weighted_sum(t, y, &r)
        })?);
    }

    for variant in [AttentionVariant::Mixed, AttentionVariant::Channel, AttentionVariant::Spatial] {
        let x = random(&mut rng, &[2, 3, 2, 2, 3], -2.0, 2.0);
        let r = projection(&mut rng, &[2, 3, 2, 2, 3]);
        out.push(check(&format!("{} attention activation", variant.name()), vec![x], |t, v| {
            let y = variant.apply(t, v[0])?;
            weighted_sum(t, y, &r)
        })?);
    }

    let x = random(&mut rng, &[2, 3, 2, 3, 2], -1.0, 1.0);
    let r = projection(&mut rng, &[2, 3, 1, 1, 1]);
    out.push(check("global average pooling", vec![x], |t, v| {
        let y = t.global_avg_pool(v[0])?;
        weighted_sum(t, y, &r)
    })?);

    let x = random(&mut rng, &[3, 4], -1.0, 1.0);
    let w = random(&mut rng, &[2, 4], -1.0, 1.0);
    let b = random(&mut rng, &[2], -1.0, 1.0);
    let r = projection(&mut rng, &[3, 2]);
    out.push(check("fully connected", vec![x, w, b], |t, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        weighted_sum(t, y, &r)
    })?);

    let logits = random(&mut rng, &[4, 3], -2.0, 2.0);
    let labels = [0, 2, 1, 2];
    out.push(check("softmax cross-entropy", vec![logits], |t, v| t.softmax_cross_entropy(v[0], &labels))?);

    for variant in [AttentionVariant::Mixed, AttentionVariant::Channel, AttentionVariant::Spatial] {
        let mut reg = ParamRegistry::default();
        let module = AttentionModule::new(&mut reg, "att", AttentionModuleConfig::new(4, variant), 1.0)?;
        let mut xs = vec![random(&mut rng, &[1, 4, 4, 4, 4], -1.0, 1.0)];
        xs.extend(random_params(&reg, &mut rng, 0.5));
        let r = projection(&mut rng, &[1, 4, 4, 4, 4]);
        out.push(check(&format!("attention module ({})", variant.name()), xs, |t, v| {
            let y = module.forward(t, &v[1..], v[0])?.output;
            weighted_sum(t, y, &r)
        })?);
    }

    let mut reg = ParamRegistry::default();
    let block = NonLocalBlock::new(&mut reg, "nl", NonLocalConfig::halved(4))?;
    let mut xs = vec![random(&mut rng, &[2, 4, 2, 3, 2], -1.0, 1.0)];
    xs.extend(random_params(&reg, &mut rng, 0.5));
    let r = projection(&mut rng, &[2, 4, 2, 3, 2]);
    out.push(check("non-local block", xs, |t, v| {
        let y = block.forward(t, &v[1..], v[0])?;
        weighted_sum(t, y, &r)
    })?);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25);
        let err = finite_difference_check(|t, v| t.sum(v), &x, 1e-3).unwrap();
        assert!(err < 1e-12, "{}", err);
    }

    #[test]
    fn sigmoid_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(&[10], |_| rng.gen_range(-2.0..2.0));
        let err = finite_difference_check(
            |t, v| {
                let s = t.sigmoid(v)?;
                t.sum(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{}", err);
    }

    #[test]
    fn cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(&[4, 3], |_| rng.gen_range(-3.0..3.0));
        let err = finite_difference_check(|t, v| t.softmax_cross_entropy(v, &[0, 2, 1, 1]), &x, 1e-5).unwrap();
        assert!(err < 1e-5, "{}", err);
    }

    #[test]
    fn non_scalar_output_is_rank_error() {
        let x = Tensor::ones(&[3]);
        assert!(matches!(finite_difference_check(|t, v| t.relu(v), &x, 1e-4), Err(Error::Rank(_))));
    }

    #[test]
    fn full_suite_passes() {
        for r in suite(7).unwrap() {
            assert!(r.passed, "{}: {:e}", r.name, r.max_rel_error);
        }
    }
}
