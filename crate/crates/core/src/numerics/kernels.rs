//! Slice-level numerical kernels shared by the tensor type, the tape, and the
//! incremental decoder.

/// Layer-norm variance epsilon. Patched and unpatched runs share it so their
/// outputs agree bitwise.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), all row-major.
///
/// `a` is `m x k` after the optional transpose, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to the extents implied by
    // (m, k, n) and the strides describe in-bounds row/column layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Softmax over `row`, restricted to the first `visible` entries; the rest are
/// set to exactly zero.
pub fn softmax_prefix(row: &mut [f64], visible: usize) {
    let (live, masked) = row.split_at_mut(visible);
    let max = live.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in live.iter_mut() {
        *v /= total;
    }
    masked.fill(0.0);
}

/// Row-wise softmax of a `rows x cols` buffer. With `causal`, row `i` only sees
/// columns `0..=i + (cols - rows)`.
pub fn softmax_rows(data: &mut [f64], rows: usize, cols: usize, causal: bool) {
    let offset = cols.saturating_sub(rows);
    for (i, row) in data.chunks_exact_mut(cols).enumerate() {
        let visible = if causal { (i + offset + 1).min(cols) } else { cols };
        softmax_prefix(row, visible);
    }
}

/// Normalizes one row in place and returns `1 / sqrt(var + eps)`.
pub fn normalize_row(row: &[f64], out: &mut [f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - mean) * rstd;
    }
    rstd
}

/// Layer norm with affine parameters. Returns `(output, normalized, rstd)`.
pub fn layer_norm(x: &[f64], cols: usize, gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / cols;
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        rstd.push(normalize_row(&x[span.clone()], &mut xhat[span.clone()]));
        for ((o, &h), (&g, &b)) in out[span.clone()].iter_mut().zip(&xhat[span]).zip(gamma.iter().zip(beta)) {
            *o = h * g + b;
        }
    }
    (out, xhat, rstd)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Natural-log softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut naive = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                for p in 0..3 {
                    naive[i * 4 + j] += a[i * 3 + p] * b[p * 4 + j];
                }
            }
        }
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, &a, false, &b, false, &mut c, false);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-14);
        }
        // a^T stored as 3x2, b^T stored as 4x3
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        let mut bt = vec![0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm(2, 3, 4, &at, true, &bt, true, &mut c2, false);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut d = vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        softmax_rows(&mut d, 2, 3, true);
        // offset 1: row 0 sees two columns, row 1 sees three
        assert_eq!(d[2], 0.0);
        assert!((d[0] + d[1] - 1.0).abs() < 1e-15);
        assert!((d[3..].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
