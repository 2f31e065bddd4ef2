use super::gemm::gemm;
use crate::error::{shape_err, Result};

/// `y = x W^T + b` with `x: [N,F]`, `W: [K,F]`, `b: [K]`.
pub fn linear_forward(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    b: Option<&[f64]>,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let (n, f, k) = linear_dims(x_shape, w_shape)?;
    if let Some(b) = b {
        if b.len() != k {
            return Err(shape_err!("fc bias has {} entries, expected {}", b.len(), k));
        }
    }
    let mut y = vec![0.0; n * k];
    if let Some(b) = b {
        y.chunks_exact_mut(k).for_each(|row| row.copy_from_slice(b));
    }
    gemm(n, f, k, x, false, w, true, &mut y, if b.is_some() { 1.0 } else { 0.0 });
    Ok((y, vec![n, k]))
}

pub(crate) fn linear_dims(x_shape: &[usize], w_shape: &[usize]) -> Result<(usize, usize, usize)> {
    match (x_shape, w_shape) {
        (&[n, f], &[k, f2]) if f == f2 => Ok((n, f, k)),
        _ => Err(shape_err!("fully connected: input {:?} incompatible with weight {:?}", x_shape, w_shape)),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    x: &[f64],
    x_shape: &[usize],
    w: &[f64],
    w_shape: &[usize],
    gy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) -> Result<()> {
    let (n, f, k) = linear_dims(x_shape, w_shape)?;
    if let Some(dx) = dx {
        gemm(n, k, f, gy, false, w, false, dx, 1.0);
    }
    if let Some(dw) = dw {
        gemm(k, n, f, gy, true, x, false, dw, 1.0);
    }
    if let Some(db) = db {
        for row in gy.chunks_exact(k) {
            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
        }
    }
    Ok(())
}

/// Batched matrix product on rank-3 tensors, with optional transposes of
/// the last two axes: `C[b] = op(A[b]) op(B[b])`.
pub fn bmm_dims(a: &[usize], ta: bool, b: &[usize], tb: bool) -> Result<(usize, usize, usize, usize)> {
    let (&[ba, ar, ac], &[bb, br, bc]) = (a, b) else {
        return Err(shape_err!("bmm needs rank-3 operands, got {:?} and {:?}", a, b));
    };
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if ba != bb || k != k2 {
        return Err(shape_err!("bmm operands {:?}{} and {:?}{} do not chain", a, if ta { "^T" } else { "" }, b, if tb { "^T" } else { "" }));
    }
    Ok((ba, m, k, n))
}

pub fn bmm_forward(a: &[f64], a_shape: &[usize], ta: bool, b: &[f64], b_shape: &[usize], tb: bool) -> Result<(Vec<f64>, Vec<usize>)> {
    let (batch, m, k, n) = bmm_dims(a_shape, ta, b_shape, tb)?;
    let mut c = vec![0.0; batch * m * n];
    for i in 0..batch {
        gemm(m, k, n, &a[i * m * k..], ta, &b[i * k * n..], tb, &mut c[i * m * n..], 0.0);
    }
    Ok((c, vec![batch, m, n]))
}

#[allow(clippy::too_many_arguments)]
pub fn bmm_backward(
    a: &[f64],
    a_shape: &[usize],
    ta: bool,
    b: &[f64],
    b_shape: &[usize],
    tb: bool,
    gc: &[f64],
    da: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) -> Result<()> {
    let (batch, m, k, n) = bmm_dims(a_shape, ta, b_shape, tb)?;
    if let Some(da) = da {
        for i in 0..batch {
            let (ai, bi, gi) = (&mut da[i * m * k..], &b[i * k * n..], &gc[i * m * n..]);
            if ta {
                // stored k x m: op(B) gC^T
                gemm(k, n, m, bi, tb, gi, true, ai, 1.0);
            } else {
                // m x k: gC op(B)^T
                gemm(m, n, k, gi, false, bi, !tb, ai, 1.0);
            }
        }
    }
    if let Some(db) = db {
        for i in 0..batch {
            let (ai, bi, gi) = (&a[i * m * k..], &mut db[i * k * n..], &gc[i * m * n..]);
            if tb {
                // stored n x k: gC^T op(A)
                gemm(n, m, k, gi, true, ai, ta, bi, 1.0);
            } else {
                // k x n: op(A)^T gC
                gemm(k, m, n, ai, !ta, gi, false, bi, 1.0);
            }
        }
    }
    Ok(())
}
