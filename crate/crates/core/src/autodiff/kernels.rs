//! Shared dense f64 kernels.
//!
//! Forward and backward passes call the same routines so that two code
//! paths computing the same mathematical quantity agree bit-for-bit.
//! All reductions accumulate in index order; nothing here is parallel.

/// out[m,n] = a[m,k] @ b[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// out[m,n] = a[m,k] @ b[n,k]^T
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// out[k,n] = a[m,k]^T @ b[m,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for r in 0..m {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * n..(r + 1) * n];
        for i in 0..k {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub const GELU_C: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (s * (x + GELU_C * x * x * x)).tanh())
}

/// Derivative of the tanh-form GELU.
pub fn gelu_grad(x: f64) -> f64 {
    let s = (2.0 / std::f64::consts::PI).sqrt();
    let u = s * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * s * (1.0 + 3.0 * GELU_C * x * x)
}

/// Numerically stable log(sum(exp(row))).
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut acc = 0.0;
    for &x in row {
        acc += (x - mx).exp();
    }
    mx + acc.ln()
}

/// Stable softmax over the first `len` entries of `row`, writing into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64], len: usize) {
    let mx = row[..len].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut denom = 0.0;
    for j in 0..len {
        let e = (row[j] - mx).exp();
        out[j] = e;
        denom += e;
    }
    for v in out[..len].iter_mut() {
        *v /= denom;
    }
    for v in out[len..].iter_mut() {
        *v = 0.0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] @ [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(matmul(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.5).collect(); // 3x4
        let plain = matmul(&a, &b, 2, 3, 4);
        // b transposed to 4x3, then a @ bt^T must equal a @ b
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let nt = matmul_nt(&a, &bt, 2, 3, 4);
        assert_eq!(plain, nt);
    }

    #[test]
    fn gelu_grad_matches_fd() {
        for &x in &[-2.5, -1.0, -0.1, 0.0, 0.3, 1.7] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_uniform() {
        let mut out = [0.0; 3];
        softmax_into(&[0.0, 0.0, 0.0], &mut out, 3);
        for v in out {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
