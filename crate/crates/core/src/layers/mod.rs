//! Hand-written forward and backward passes for every layer kind in the
//! network.

pub(crate) mod conv;
pub(crate) mod fc;
pub mod gradcheck;
pub(crate) mod lrn;
pub(crate) mod pool;
pub(crate) mod relu;
mod softmax;

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
pub use fc::{fc_backward, fc_forward, FcGrads, FcParams};
pub use lrn::{lrn_backward, lrn_forward, LrnParams};
pub use pool::{maxpool_backward, maxpool_forward, PoolGeometry, PoolIndices};
pub use relu::{relu_backward, relu_forward};
pub use softmax::softmax;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Output size and zero padding for one spatial axis under SAME padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SameGeometry {
    pub out_size: usize,
    pub pad_before: usize,
    pub pad_after: usize,
}

/// SAME padding: `out = ceil(in / stride)`, with any odd padding cell placed
/// after the data.
pub fn same_pad_geometry(in_size: usize, kernel: usize, stride: usize) -> Result<SameGeometry> {
    if in_size == 0 || kernel == 0 || stride == 0 {
        return Err(Error::invalid(format!(
            "SAME geometry needs positive sizes, got in={in_size} kernel={kernel} stride={stride}"
        )));
    }
    let out_size = in_size.div_ceil(stride);
    let total = ((out_size - 1) * stride + kernel).saturating_sub(in_size);
    let pad_before = total / 2;
    Ok(SameGeometry {
        out_size,
        pad_before,
        pad_after: total - pad_before,
    })
}

/// Sum in `f64` over eight interleaved partial sums, combined in a fixed
/// order.
pub(crate) fn sum_f64<T: Scalar>(v: &[T]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let chunks = v.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a += x.as_f64();
        }
    }
    for (a, &x) in acc.iter_mut().zip(tail) {
        *a += x.as_f64();
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c`, where `op(a)` is `m x k`
/// and `op(b)` is `k x n`. A transposed operand is stored in its untransposed
/// layout (`k x m` for `a`, `n x k` for `b`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    a_transposed: bool,
    b: &[T],
    b_transposed: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let lda = if a_transposed { m } else { k };
    let ldb = if b_transposed { k } else { n };
    gemm_ld(
        m,
        k,
        n,
        alpha,
        (a, lda, a_transposed),
        (b, ldb, b_transposed),
        beta,
        (c, n),
    );
}

/// Smallest buffer holding `rows` rows of `cols` elements `ld` apart.
fn strided_len(rows: usize, cols: usize, ld: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * ld + cols
    }
}

/// [`gemm`] over sub-matrices: each operand is `(data, leading dimension)`,
/// with `a` and `b` also carrying their transpose flag.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ld<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    (a, lda, a_transposed): (&[T], usize, bool),
    (b, ldb, b_transposed): (&[T], usize, bool),
    beta: T,
    (c, ldc): (&mut [T], usize),
) {
    let (ar, ac) = if a_transposed { (k, m) } else { (m, k) };
    let (br, bc) = if b_transposed { (n, k) } else { (k, n) };
    assert!(lda >= ac && ldb >= bc && ldc >= n);
    assert!(a.len() >= strided_len(ar, ac, lda));
    assert!(b.len() >= strided_len(br, bc, ldb));
    assert!(c.len() >= strided_len(m, n, ldc));
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, lda) } else { (lda, 1) };
    let (rsb, csb) = if b_transposed { (1, ldb) } else { (ldb, 1) };
    // SAFETY: the asserts above bound every index the kernel derives from the
    // dimensions and strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lane_sum_matches_exact_integer_sum() {
        for n in [0, 1, 7, 8, 9, 100, 1001] {
            let v: Vec<f32> = (0..n).map(|i| (i % 13) as f32 - 6.0).collect();
            let exact: i64 = (0..n).map(|i| (i % 13) as i64 - 6).sum();
            assert_eq!(sum_f64(&v), exact as f64);
        }
    }

    #[test]
    fn same_geometry_follows_the_table() {
        let g = |i, k, s| {
            let g = same_pad_geometry(i, k, s).unwrap();
            (g.out_size, g.pad_before, g.pad_after)
        };
        assert_eq!(g(228, 3, 1), (228, 1, 1));
        assert_eq!(g(228, 3, 2), (114, 0, 1));
        assert_eq!(g(114, 3, 2), (57, 0, 1));
        assert_eq!(g(1, 3, 1), (1, 1, 1));
        assert_eq!(g(5, 1, 1), (5, 0, 0));
        assert!(same_pad_geometry(0, 3, 1).is_err());
    }

    #[test]
    fn gemm_matches_naive_product_for_every_transpose() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 3.0).collect();
        let mut expect = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                expect[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        let transpose = |x: &[f32], r: usize, c: usize| {
            let mut t = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    t[j * r + i] = x[i * c + j];
                }
            }
            t
        };
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, n);
        for (aa, ta) in [(&a, false), (&at, true)] {
            for (bb, tb) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, 1.0, aa, ta, bb, tb, 0.0, &mut c);
                assert_eq!(c, expect);
            }
        }
    }

    #[test]
    fn strided_gemm_reads_and_writes_sub_blocks() {
        // a: 2x3 block of a 2x5 buffer; b: 3x2 block (columns 1..3) of a 3x4
        // buffer; c: columns 2..4 of a 2x6 buffer
        let a = [1.0f32, 2.0, 3.0, 9.0, 9.0, 4.0, 5.0, 6.0, 9.0, 9.0];
        let b = [
            9.0f32, 1.0, 0.0, 9.0, 9.0, 0.0, 1.0, 9.0, 9.0, 1.0, 1.0, 9.0,
        ];
        let mut c = [7.0f32; 12];
        gemm_ld(
            2,
            3,
            2,
            1.0,
            (&a, 5, false),
            (&b[1..], 4, false),
            0.0,
            (&mut c[2..], 6),
        );
        assert_eq!(
            c,
            [7.0, 7.0, 4.0, 5.0, 7.0, 7.0, 7.0, 7.0, 10.0, 11.0, 7.0, 7.0]
        );
    }
}
