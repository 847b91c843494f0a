//! Deterministic dense matrix products.
//!
//! Every output element accumulates over k in ascending order from 0.0 with
//! plain multiply-then-add, so results are bit-identical regardless of batch
//! size or which segment of a computation produced them. BLAS-style blocked
//! or FMA kernels do not guarantee that, and the split-equivalence and
//! transport-equivalence contracts need it.

use ndarray::Array2;

fn rows(a: &Array2<f64>) -> (&[f64], usize, usize) {
    let (m, n) = a.dim();
    let slice = a.as_slice().expect("standard-layout matrix");
    (slice, m, n)
}

/// `a (m x k) * b (k x n)`.
pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (a_s, m, ka) = rows(a);
    let (b_s, kb, n) = rows(b);
    assert_eq!(ka, kb, "matmul inner dims {ka} vs {kb}");
    let mut c = Array2::zeros((m, n));
    let c_s = c.as_slice_mut().expect("fresh matrix is standard layout");
    for i in 0..m {
        let a_row = &a_s[i * ka..(i + 1) * ka];
        let c_row = &mut c_s[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b_s[k * n..(k + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
    c
}

/// `a^T (k x m)^T * b (k x n)`: both operands indexed by their shared
/// leading axis, accumulation over it in ascending order.
pub fn matmul_tn(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (a_s, ka, m) = rows(a);
    let (b_s, kb, n) = rows(b);
    assert_eq!(ka, kb, "matmul_tn shared dims {ka} vs {kb}");
    let mut c = Array2::zeros((m, n));
    let c_s = c.as_slice_mut().expect("fresh matrix is standard layout");
    for k in 0..ka {
        let a_row = &a_s[k * m..(k + 1) * m];
        let b_row = &b_s[k * n..(k + 1) * n];
        for (i, &aki) in a_row.iter().enumerate() {
            let c_row = &mut c_s[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
    c
}

/// `a (m x k) * b^T (n x k)^T`: plain dot products of contiguous rows.
pub fn matmul_nt(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (a_s, m, ka) = rows(a);
    let (b_s, n, kb) = rows(b);
    assert_eq!(ka, kb, "matmul_nt inner dims {ka} vs {kb}");
    let mut c = Array2::zeros((m, n));
    let c_s = c.as_slice_mut().expect("fresh matrix is standard layout");
    for i in 0..m {
        let a_row = &a_s[i * ka..(i + 1) * ka];
        for j in 0..n {
            let b_row = &b_s[j * kb..(j + 1) * kb];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c_s[i * n + j] = acc;
        }
    }
    c
}
