//! Small dense matrix-multiply kernels backing every convolution path, plus
//! the multiply-add counter used to cross-check analytic FLOP reports.
//!
//! All three variants accumulate into `c` with a fixed per-element summation
//! order, so results are bit-identical across runs and across thread counts:
//! parallelism only ever splits work at output-row granularity.

use rayon::prelude::*;

use crate::tensor::Scalar;

/// Multiply-add counter threaded through the inference executor. One "MAC"
/// is one fused multiply-add; the reported FLOP convention is 2 per MAC.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MacCounter {
    pub macs: u64,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, m: usize, k: usize, n: usize) {
        self.macs += (m as u64) * (k as u64) * (n as u64);
    }

    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

// Below this many scalar MACs the rayon dispatch overhead outweighs the win.
const PAR_THRESHOLD: usize = 1 << 16;

/// c[m x n] += a[m x k] . b[k x n], all row-major.
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n == 0 {
        return;
    }
    let row = |i: usize, c_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_exact_mut(n).enumerate() {
            row(i, c_row);
        }
    }
}

/// c[m x n] += a[m x k] . b[n x k]^T (b stored row-major as n rows of k).
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n == 0 {
        return;
    }
    let row = |i: usize, c_row: &mut [T]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv += acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_exact_mut(n).enumerate() {
            row(i, c_row);
        }
    }
}

/// c[m x n] += a[k x m]^T . b[k x n] (a stored row-major as k rows of m).
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n == 0 {
        return;
    }
    let row = |i: usize, c_row: &mut [T]| {
        for kk in 0..k {
            let aik = a[kk * m + i];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, c_row)| row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_exact_mut(n).enumerate() {
            row(i, c_row);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    c[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn variants_agree_with_naive() {
        let mut rng = crate::rng::seeded(42);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 5), (8, 16, 7), (17, 9, 33)] {
            let a = crate::rng::uniform_tensor::<f32>(
                crate::tensor::Shape::new(1, 1, m, k),
                -1.0,
                1.0,
                &mut rng,
            );
            let b = crate::rng::uniform_tensor::<f32>(
                crate::tensor::Shape::new(1, 1, k, n),
                -1.0,
                1.0,
                &mut rng,
            );
            let want = naive(m, k, n, a.data(), b.data());

            let mut c = vec![0.0f32; m * n];
            gemm_nn(m, k, n, a.data(), b.data(), &mut c);
            assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-5));

            // b transposed: store as n rows of k.
            let mut bt = vec![0.0f32; n * k];
            for kk in 0..k {
                for j in 0..n {
                    bt[j * k + kk] = b.data()[kk * n + j];
                }
            }
            let mut c = vec![0.0f32; m * n];
            gemm_nt(m, k, n, a.data(), &bt, &mut c);
            assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-5));

            // a transposed: store as k rows of m.
            let mut at = vec![0.0f32; k * m];
            for i in 0..m {
                for kk in 0..k {
                    at[kk * m + i] = a.data()[i * k + kk];
                }
            }
            let mut c = vec![0.0f32; m * n];
            gemm_tn(m, k, n, &at, b.data(), &mut c);
            assert!(c.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-5));
        }
    }

    #[test]
    fn counter_tracks_dims() {
        let mut counter = MacCounter::new();
        counter.add(3, 4, 5);
        counter.add(2, 2, 2);
        assert_eq!(counter.macs, 60 + 8);
        assert_eq!(counter.flops(), 2 * 68);
    }
}
