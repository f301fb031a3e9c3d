//! Plain loops behind the tape ops. Row-parallel variants split work into
//! `parts` contiguous chunks; every output element is computed by the same
//! sequence of floating-point operations regardless of `parts`.

use rayon::prelude::*;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rows_per_part(rows: usize, parts: usize) -> usize {
    rows.div_ceil(parts.max(1)).max(1)
}

/// Row-parallel `out[rows×n] = x[rows×k] · w[k×n]`.
pub(crate) fn linear_forward(x: &[f64], w: &[f64], rows: usize, k: usize, n: usize, parts: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * n];
    if parts <= 1 || rows == 0 {
        matmul_acc(x, w, &mut out, rows, k, n);
        return out;
    }
    let chunk = rows_per_part(rows, parts);
    out.par_chunks_mut(chunk * n)
        .zip(x.par_chunks(chunk * k))
        .for_each(|(o, xs)| {
            let r = xs.len() / k;
            matmul_acc(xs, w, o, r, k, n);
        });
    out
}

/// Row-parallel `dx[rows×k] += dy[rows×n] · w[k×n]ᵀ`.
pub(crate) fn linear_backward_input(dy: &[f64], w: &[f64], dx: &mut [f64], rows: usize, k: usize, n: usize, parts: usize) {
    if parts <= 1 || rows == 0 {
        matmul_nt_acc(dy, w, dx, rows, n, k);
        return;
    }
    let chunk = rows_per_part(rows, parts);
    dx.par_chunks_mut(chunk * k)
        .zip(dy.par_chunks(chunk * n))
        .for_each(|(d, g)| {
            let r = g.len() / n;
            matmul_nt_acc(g, w, d, r, n, k);
        });
}

/// `dw[k×n] += x[rows×k]ᵀ · dy[rows×n]`, parallel over rows of `dw`.
pub(crate) fn linear_backward_weight(x: &[f64], dy: &[f64], dw: &mut [f64], rows: usize, k: usize, n: usize, parts: usize) {
    if parts <= 1 {
        matmul_tn_acc(x, dy, dw, rows, k, n);
        return;
    }
    let chunk = rows_per_part(k, parts);
    dw.par_chunks_mut(chunk * n)
        .enumerate()
        .for_each(|(ci, dwc)| {
            let i0 = ci * chunk;
            let width = dwc.len() / n;
            for r in 0..rows {
                let g = &dy[r * n..(r + 1) * n];
                for ii in 0..width {
                    let xv = x[r * k + i0 + ii];
                    if xv == 0.0 {
                        continue;
                    }
                    let row = &mut dwc[ii * n..(ii + 1) * n];
                    for (d, gv) in row.iter_mut().zip(g) {
                        *d += xv * gv;
                    }
                }
            }
        });
}
