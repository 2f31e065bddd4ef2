use crate::error::{shape_err, Error, Result};

/// Row-wise softmax of `[N,K]` logits, max-subtracted.
pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        p.extend(e.iter().map(|v| v / s));
    }
    p
}

/// Mean cross-entropy of softmax(logits) against class indices. Returns the
/// loss and the softmax probabilities (reused by the backward pass).
pub fn softmax_cross_entropy_forward(logits: &[f64], shape: &[usize], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let &[n, k] = shape else {
        return Err(shape_err!("cross-entropy expects [N,K] logits, got {:?}", shape));
    };
    if labels.len() != n {
        return Err(shape_err!("{} labels for batch of {}", labels.len(), n));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label: bad, classes: k });
    }
    let mut loss = 0.0;
    for (row, &l) in logits.chunks_exact(k).zip(labels) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        loss += lse - row[l];
    }
    Ok((loss / n as f64, softmax_rows(logits, k)))
}

/// `d loss / d logits = (softmax - onehot) / N`, scaled by the upstream scalar.
pub fn softmax_cross_entropy_backward(probs: &[f64], k: usize, labels: &[usize], g: f64, dx: &mut [f64]) {
    let scale = g / labels.len() as f64;
    for (i, &l) in labels.iter().enumerate() {
        for j in 0..k {
            let onehot = if j == l { 1.0 } else { 0.0 };
            dx[i * k + j] += (probs[i * k + j] - onehot) * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let (l, _) = softmax_cross_entropy_forward(&[0.0; 3], &[1, 3], &[1]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-15);
        // logits whose softmax is (0.5, 0.25, 0.25)
        let z = [2f64.ln(), 0.0, 0.0];
        let (l, p) = softmax_cross_entropy_forward(&z, &[1, 3], &[0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((l - 0.693_147_180_559_945_3).abs() < 1e-15);
        let (l, _) = softmax_cross_entropy_forward(&[60.0, 0.0, 0.0], &[1, 3], &[0]).unwrap();
        assert!(l < 1e-20);
    }

    #[test]
    fn bad_label() {
        assert!(matches!(
            softmax_cross_entropy_forward(&[0.0; 3], &[1, 3], &[3]),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn simplex_rows() {
        let z: Vec<f64> = (0..30).map(|i| ((i * 7919) % 97) as f64 * 0.3 - 10.0).collect();
        let p = softmax_rows(&z, 3);
        for row in p.chunks_exact(3) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
