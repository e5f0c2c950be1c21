//! Dense row-major matrix kernels shared by forward and backward rules.

use super::tensor::Float;

/// Dot product with eight independent accumulators so the loop vectorizes.
/// The summation order is fixed, which keeps results bit-reproducible.
#[inline]
pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s01 = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    let s23 = (acc[4] + acc[5]) + (acc[6] + acc[7]);
    (s01 + s23) + tail
}

#[inline]
pub fn axpy<F: Float>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c += a · b` with `a: m×k`, `b: k×n`.
pub fn mm_acc<F: Float>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (t, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            axpy(av, &b[t * n..(t + 1) * n], crow);
        }
    }
}

pub fn mm<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    mm_acc(a, b, &mut c, m, k, n);
    c
}

/// `c += a · bᵀ` with `a: m×k`, `b: n×k`.
pub fn mm_nt_acc<F: Float>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            crow[j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

pub fn mm_nt<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    mm_nt_acc(a, b, &mut c, m, k, n);
    c
}

/// `c += aᵀ · b` with `a: k×m`, `b: k×n`, `c: m×n`.
pub fn mm_tn_acc<F: Float>(a: &[F], b: &[F], c: &mut [F], k: usize, m: usize, n: usize) {
    for t in 0..k {
        let arow = &a[t * m..(t + 1) * m];
        let brow = &b[t * n..(t + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            axpy(av, brow, &mut c[i * n..(i + 1) * n]);
        }
    }
}

pub fn transpose<F: Float>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Copies the column block `[start, start + width)` of an `rows×cols` matrix.
pub fn col_block<F: Float>(a: &[F], rows: usize, cols: usize, start: usize, width: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        out.extend_from_slice(&a[r * cols + start..r * cols + start + width]);
    }
    out
}

pub fn add_col_block<F: Float>(
    dst: &mut [F],
    rows: usize,
    cols: usize,
    start: usize,
    width: usize,
    src: &[F],
) {
    for r in 0..rows {
        let d = &mut dst[r * cols + start..r * cols + start + width];
        for (x, &y) in d.iter_mut().zip(&src[r * width..(r + 1) * width]) {
            *x += y;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive_triple_loop() {
        let (m, k, n) = (5, 11, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        let got = mm(&a, &b, m, k, n);
        let bt = transpose(&b, k, n);
        let got_nt = mm_nt(&a, &bt, m, k, n);
        let at = transpose(&a, m, k);
        let mut got_tn = vec![0.0; m * n];
        mm_tn_acc(&at, &b, &mut got_tn, k, m, n);
        for i in 0..m * n {
            assert!((want[i] - got[i]).abs() < 1e-12);
            assert!((want[i] - got_nt[i]).abs() < 1e-12);
            assert!((want[i] - got_tn[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (1..=13).map(f64::from).collect();
        let s: f64 = a.iter().map(|x| x * x).sum();
        assert_eq!(dot(&a, &a), s);
    }
}
