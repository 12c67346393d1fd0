//! Dense row-major f64 tensors and the low-level compute kernels.
//!
//! Kernels come in a sequential form (always compiled) and a rayon form
//! (behind the `parallel` feature). Dispatch is by estimated work so small
//! problems never pay the fork/join overhead. Every parallel kernel assigns
//! whole output rows to single workers, so parallel and sequential results
//! are bit-identical.

use crate::error::TntError;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work estimate (in flops) below which parallel dispatch is never worth it.
#[cfg(feature = "parallel")]
pub const PAR_MIN_WORK: usize = 64 * 1024;

// ── Value type ───────────────────────────────────────────────────────────

/// Dense tensor: shape plus row-major f64 storage. Rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TntError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TntError::shape(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, n, data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat index for a multi-index (row-major).
    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            flat = flat * d + i;
        }
        flat
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }
}

// ── Shape helpers ────────────────────────────────────────────────────────

/// Split a shape at `axis` into (outer, extent, inner) products.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

// ── Row-parallel driver ──────────────────────────────────────────────────

/// Run `f(row_index, row_slice)` over `out` split into rows of `row_len`.
///
/// `work` is the total flop estimate used to decide parallel dispatch.
/// Each row is produced by exactly one worker with the same inner loop as
/// the sequential path, so results do not depend on the thread count.
pub(crate) fn for_each_row<F>(out: &mut [f64], row_len: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    debug_assert!(row_len > 0 && out.len() % row_len == 0);
    #[cfg(feature = "parallel")]
    {
        if work >= PAR_MIN_WORK {
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    for (i, row) in out.chunks_mut(row_len).enumerate() {
        f(i, row);
    }
}

// ── Matmul kernels ───────────────────────────────────────────────────────
//
// C[b, i, j] = sum_k A[b, i, k] * B[b or shared, k, j].
// The inner loop runs j over contiguous C and B rows so it vectorizes.

fn matmul_row(a_row: &[f64], b_mat: &[f64], k: usize, n: usize, c_row: &mut [f64]) {
    c_row.fill(0.0);
    for (p, &av) in a_row.iter().enumerate().take(k) {
        let b_row = &b_mat[p * n..(p + 1) * n];
        for (cv, bv) in c_row.iter_mut().zip(b_row) {
            *cv += av * bv;
        }
    }
}

/// Batched matmul; `b_shared` means B is a single [k, n] used for every batch.
pub fn matmul(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    let work = batch * m * k * n;
    for_each_row(&mut out, n, work, |row, c_row| {
        let bi = row / m;
        let i = row % m;
        let a_row = &a[(bi * m + i) * k..(bi * m + i + 1) * k];
        let b_mat = if b_shared { b } else { &b[bi * k * n..(bi + 1) * k * n] };
        matmul_row(a_row, b_mat, k, n, c_row);
    });
    out
}

/// Sequential-only variant, kept for benchmarking the dispatcher against.
pub fn matmul_seq(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for (row, c_row) in out.chunks_mut(n).enumerate() {
        let bi = row / m;
        let i = row % m;
        let a_row = &a[(bi * m + i) * k..(bi * m + i + 1) * k];
        let b_mat = if b_shared { b } else { &b[bi * k * n..(bi + 1) * k * n] };
        matmul_row(a_row, b_mat, k, n, c_row);
    }
    out
}

/// dA[b, i, p] = sum_j G[b, i, j] * B[b or shared, p, j]   (G . B^T)
pub(crate) fn matmul_grad_a(
    g: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * k];
    let work = batch * m * k * n;
    for_each_row(&mut out, k, work, |row, da_row| {
        let bi = row / m;
        let i = row % m;
        let g_row = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
        let b_mat = if b_shared { b } else { &b[bi * k * n..(bi + 1) * k * n] };
        for (p, dv) in da_row.iter_mut().enumerate() {
            let b_row = &b_mat[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            *dv = acc;
        }
    });
    out
}

/// Gradient for B.
///
/// Batched B: dB[b, p, j] = sum_i A[b, i, p] * G[b, i, j].
/// Shared B:  dB[p, j]    = sum_{b,i} A[b, i, p] * G[b, i, j], accumulated in
/// fixed batch-major order so the reduction is deterministic.
pub(crate) fn matmul_grad_b(
    a: &[f64],
    g: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
) -> Vec<f64> {
    let work = batch * m * k * n;
    if b_shared {
        let mut out = vec![0.0; k * n];
        for_each_row(&mut out, n, work, |p, db_row| {
            for bi in 0..batch {
                for i in 0..m {
                    let av = a[(bi * m + i) * k + p];
                    let g_row = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                    for (dv, gv) in db_row.iter_mut().zip(g_row) {
                        *dv += av * gv;
                    }
                }
            }
        });
        out
    } else {
        let mut out = vec![0.0; batch * k * n];
        for_each_row(&mut out, n, work, |row, db_row| {
            let bi = row / k;
            let p = row % k;
            for i in 0..m {
                let av = a[(bi * m + i) * k + p];
                let g_row = &g[(bi * m + i) * n..(bi * m + i + 1) * n];
                for (dv, gv) in db_row.iter_mut().zip(g_row) {
                    *dv += av * gv;
                }
            }
        });
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] . [[1],[1]] = [[3],[7]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0], 1, 2, 2, 1, true);
        assert_eq!(c, vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let m = [0.5, -1.0, 2.0, 3.5];
        let id = [1.0, 0.0, 0.0, 1.0];
        let c = matmul(&id, &m, 1, 2, 2, 2, true);
        assert_eq!(c.as_slice(), m.as_slice());
    }

    #[test]
    fn matmul_batched_matches_per_batch() {
        let a: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.1).collect();
        let b: Vec<f64> = (0..2 * 4 * 2).map(|i| (i as f64).sin()).collect();
        let c = matmul(&a, &b, 2, 3, 4, 2, false);
        for bi in 0..2 {
            let cb = matmul(&a[bi * 12..(bi + 1) * 12], &b[bi * 8..(bi + 1) * 8], 1, 3, 4, 2, true);
            assert_eq!(&c[bi * 6..(bi + 1) * 6], cb.as_slice());
        }
    }

    #[test]
    fn dispatcher_matches_sequential_bit_exactly() {
        let a: Vec<f64> = (0..64 * 80).map(|i| ((i * 31) % 17) as f64 - 8.0).collect();
        let b: Vec<f64> = (0..80 * 96).map(|i| ((i * 13) % 23) as f64 * 0.25).collect();
        let c1 = matmul(&a, &b, 1, 64, 80, 96, true);
        let c2 = matmul_seq(&a, &b, 1, 64, 80, 96, true);
        assert_eq!(c1, c2);
    }

    #[test]
    fn tensor_shape_mismatch_is_error() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_tensor_is_rank_zero() {
        let t = Tensor::scalar(4.5);
        assert_eq!(t.rank(), 0);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 4.5);
    }
}
