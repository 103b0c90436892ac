//! Dense kernels behind conv2d and matmul.

use std::cell::RefCell;

const MR: usize = 4;

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable per-thread buffer of `len` elements. Contents on
/// entry are unspecified. Not reentrant.
pub fn with_scratch<T>(len: usize, f: impl FnOnce(&mut [f64]) -> T) -> T {
    SCRATCH.with(|cell| {
        let mut buf = cell.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}
const NR: usize = 8;

/// `c[m x n] += A * b[k x n]`, where element (i, p) of A is
/// `a[i * a_rs + p * a_cs]`. All buffers row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    c: &mut [f64],
) {
    let n_main = n - n % NR;
    let mut panel = vec![[0.0f64; MR]; k];
    let mut i0 = 0;
    while i0 + MR <= m {
        for (p, slot) in panel.iter_mut().enumerate() {
            for (ii, v) in slot.iter_mut().enumerate() {
                *v = a[(i0 + ii) * a_rs + p * a_cs];
            }
        }
        for j0 in (0..n_main).step_by(NR) {
            let mut acc = [[0.0f64; NR]; MR];
            for (p, ap) in panel.iter().enumerate() {
                let brow: &[f64; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                for ii in 0..MR {
                    for jj in 0..NR {
                        acc[ii][jj] += ap[ii] * brow[jj];
                    }
                }
            }
            for (ii, row) in acc.iter().enumerate() {
                let dst = &mut c[(i0 + ii) * n + j0..(i0 + ii) * n + j0 + NR];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += v;
                }
            }
        }
        if n_main < n {
            gemm_edge(i0..i0 + MR, n_main..n, n, k, a, a_rs, a_cs, b, c);
        }
        i0 += MR;
    }
    if i0 < m {
        gemm_edge(i0..m, 0..n, n, k, a, a_rs, a_cs, b, c);
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm_edge(
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    n: usize,
    k: usize,
    a: &[f64],
    a_rs: usize,
    a_cs: usize,
    b: &[f64],
    c: &mut [f64],
) {
    for i in rows {
        for p in 0..k {
            let av = a[i * a_rs + p * a_cs];
            let brow = &b[p * n + cols.start..p * n + cols.end];
            for (d, bv) in c[i * n + cols.start..i * n + cols.end].iter_mut().zip(brow) {
                *d += av * bv;
            }
        }
    }
}

/// Row-major transpose of an (r x c) matrix.
pub fn transpose(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    const B: usize = 16;
    let mut out = vec![0.0; r * c];
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    out[j * r + i] = src[i * c + j];
                }
            }
        }
    }
    out
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    const L: usize = 8;
    let mut acc = [0.0f64; L];
    let main = x.len() - x.len() % L;
    for (a, b) in x[..main].chunks_exact(L).zip(y[..main].chunks_exact(L)) {
        for l in 0..L {
            acc[l] += a[l] * b[l];
        }
    }
    let tail: f64 = x[main..].iter().zip(&y[main..]).map(|(a, b)| a * b).sum();
    acc.iter().sum::<f64>() + tail
}

/// `c[m x n] += a[m x k] * b[n x k]^T` as row-by-row dot products.
pub fn gemm_abt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}
