//! Pointwise activations and the three attention-map activations.

use crate::error::Result;
use crate::tensor::dims5;

/// Guard added to the per-channel standard deviation in the spatial variant.
pub const SPATIAL_STD_EPS: f64 = 1e-5;

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Mixed attention: elementwise logistic sigmoid.
pub fn mixed_attention_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sigmoid(v)).collect()
}

/// `y` is the forward output.
pub fn sigmoid_backward(y: &[f64], gy: &[f64], dx: &mut [f64]) {
    for ((d, &y), &g) in dx.iter_mut().zip(y).zip(gy) {
        *d += g * y * (1.0 - y);
    }
}

pub fn relu_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

pub fn relu_backward(x: &[f64], gy: &[f64], dx: &mut [f64]) {
    for ((d, &x), &g) in dx.iter_mut().zip(x).zip(gy) {
        if x > 0.0 {
            *d += g;
        }
    }
}

/// Channel attention: every `(n, position)` channel vector scaled to unit L2
/// norm. All-zero vectors stay zero.
pub fn channel_attention_forward(x: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
    let [n, c, d, h, w] = dims5(shape)?;
    let plane = d * h * w;
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let norm = (0..c).map(|k| x[base + k * plane + p].powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for k in 0..c {
                    let i = base + k * plane + p;
                    y[i] = x[i] / norm;
                }
            }
        }
    }
    Ok(y)
}

/// `dx = (g - y (y.g)) / |x|`; zero-norm vectors receive zero gradient.
pub fn channel_attention_backward(x: &[f64], y: &[f64], shape: &[usize], gy: &[f64], dx: &mut [f64]) -> Result<()> {
    let [n, c, d, h, w] = dims5(shape)?;
    let plane = d * h * w;
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let idx = |k: usize| base + k * plane + p;
            let norm = (0..c).map(|k| x[idx(k)].powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            let dot: f64 = (0..c).map(|k| y[idx(k)] * gy[idx(k)]).sum();
            for k in 0..c {
                dx[idx(k)] += (gy[idx(k)] - y[idx(k)] * dot) / norm;
            }
        }
    }
    Ok(())
}

fn channel_moments(x: &[f64]) -> (f64, f64) {
    let m = x.len() as f64;
    let mean = x.iter().sum::<f64>() / m;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    (mean, var.sqrt())
}

/// Spatial attention: per `(n, c)`, `sigmoid((x - mean) / (std + eps))` with
/// population std over that channel's spatial elements.
pub fn spatial_attention_forward(x: &[f64], shape: &[usize]) -> Result<Vec<f64>> {
    let [_, _, d, h, w] = dims5(shape)?;
    let plane = d * h * w;
    let mut y = Vec::with_capacity(x.len());
    for ch in x.chunks_exact(plane) {
        let (mean, std) = channel_moments(ch);
        let denom = std + SPATIAL_STD_EPS;
        y.extend(ch.iter().map(|&v| sigmoid((v - mean) / denom)));
    }
    Ok(y)
}

pub fn spatial_attention_backward(x: &[f64], y: &[f64], shape: &[usize], gy: &[f64], dx: &mut [f64]) -> Result<()> {
    let [_, _, d, h, w] = dims5(shape)?;
    let plane = d * h * w;
    let m = plane as f64;
    for (((xc, yc), gc), dc) in x
        .chunks_exact(plane)
        .zip(y.chunks_exact(plane))
        .zip(gy.chunks_exact(plane))
        .zip(dx.chunks_exact_mut(plane))
    {
        let (mean, std) = channel_moments(xc);
        let denom = std + SPATIAL_STD_EPS;
        // a = dL/dz
        let a: Vec<f64> = yc.iter().zip(gc).map(|(&y, &g)| g * y * (1.0 - y)).collect();
        let a_mean = a.iter().sum::<f64>() / m;
        let a_dot_c: f64 = a.iter().zip(xc).map(|(&a, &x)| a * (x - mean)).sum();
        let coupling = if std > 0.0 { a_dot_c / (m * std * denom * denom) } else { 0.0 };
        for k in 0..plane {
            dc[k] += (a[k] - a_mean) / denom - coupling * (xc[k] - mean);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_points() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(sigmoid(40.0) <= 1.0 && sigmoid(40.0) > 0.999_999);
        assert!(sigmoid(-40.0) >= 0.0 && sigmoid(-40.0) < 1e-6);
        let xs: Vec<f64> = (-50..50).map(|i| i as f64 * 0.3).collect();
        let ys = mixed_attention_forward(&xs);
        assert!(ys.windows(2).all(|p| p[0] <= p[1]));
    }

    #[test]
    fn channel_l2_cases() {
        let y = channel_attention_forward(&[3.0, 4.0], &[1, 2, 1, 1, 1]).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
        assert_eq!(channel_attention_forward(&[0.0, 1.0, 0.0], &[1, 3, 1, 1, 1]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert_eq!(channel_attention_forward(&[0.0, 0.0], &[1, 2, 1, 1, 1]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn spatial_cases() {
        let y = spatial_attention_forward(&[2.0; 4], &[1, 1, 1, 2, 2]).unwrap();
        assert!(y.iter().all(|&v| v == 0.5));
        // mean 0, population std 1
        let y = spatial_attention_forward(&[-1.0, 1.0], &[1, 1, 1, 1, 2]).unwrap();
        let s = 1.0 + SPATIAL_STD_EPS;
        assert!((y[0] - sigmoid(-1.0 / s)).abs() < 1e-15);
        assert!((y[0] - 0.268_941_421).abs() < 1e-5);
        assert!((y[1] - 0.731_058_579).abs() < 1e-5);
    }
}
