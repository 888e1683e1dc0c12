//! Hot inner loops shared by the forward and backward passes. Everything is
//! row-major and accumulates into `out` (callers zero the buffer when they
//! want a plain product). The loop shapes are chosen so LLVM autovectorizes
//! them; keep them free of bounds checks and branches.

use super::Element;

/// out[m,n] += a[m,k] · b[k,n]
///
/// Four output rows per pass so each streamed row of `b` feeds four FMA
/// chains; the tail falls back to one row at a time.
pub fn matmul_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let blocks = m / 4;
    for blk in 0..blocks {
        let i = blk * 4;
        let (c0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for l in 0..k {
            let b_row = &b[l * n..(l + 1) * n];
            let a0 = a[i * k + l];
            let a1 = a[(i + 1) * k + l];
            let a2 = a[(i + 2) * k + l];
            let a3 = a[(i + 3) * k + l];
            for ((((v0, v1), v2), v3), &bv) in c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(b_row.iter())
            {
                *v0 += a0 * bv;
                *v1 += a1 * bv;
                *v2 += a2 * bv;
                *v3 += a3 * bv;
            }
        }
    }
    for i in blocks * 4..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *c += av * bv;
            }
        }
    }
}

/// out[m,p] += a[m,n] · b[p,n]ᵀ  (dot-product form; `b` indexed by rows)
pub fn matmul_nt_acc<E: Element>(a: &[E], b: &[E], m: usize, n: usize, p: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let c_row = &mut out[i * p..(i + 1) * p];
        for (j, c) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * n..(j + 1) * n];
            *c += dot(a_row, b_row);
        }
    }
}

/// out[k,n] += a[m,k]ᵀ · b[m,n]  (accumulation over the shared m axis)
///
/// Four `m` rows per pass: each load of an output row absorbs four FMA
/// chains instead of one.
pub fn matmul_tn_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let blocks = m / 4;
    for blk in 0..blocks {
        let i = blk * 4;
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for l in 0..k {
            let a0 = a[i * k + l];
            let a1 = a[(i + 1) * k + l];
            let a2 = a[(i + 2) * k + l];
            let a3 = a[(i + 3) * k + l];
            let c_row = &mut out[l * n..(l + 1) * n];
            for ((((c, &v0), &v1), &v2), &v3) in c_row
                .iter_mut()
                .zip(b0.iter())
                .zip(b1.iter())
                .zip(b2.iter())
                .zip(b3.iter())
            {
                *c += a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
            }
        }
    }
    for i in blocks * 4..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let c_row = &mut out[l * n..(l + 1) * n];
            for (c, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *c += av * bv;
            }
        }
    }
}

/// Multi-lane dot product; fixed lane count so the reduction vectorizes
/// without reassociation flags.
pub fn dot<E: Element>(x: &[E], y: &[E]) -> E {
    const LANES: usize = 8;
    let mut acc = [E::ZERO; LANES];
    let chunks = x.len() / LANES;
    for c in 0..chunks {
        let xs = &x[c * LANES..(c + 1) * LANES];
        let ys = &y[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += xs[l] * ys[l];
        }
    }
    let mut s = E::ZERO;
    for l in 0..LANES {
        s += acc[l];
    }
    for i in chunks * LANES..x.len() {
        s += x[i] * y[i];
    }
    s
}

/// y += alpha * x
pub fn axpy<E: Element>(alpha: E, x: &[E], y: &mut [E]) {
    for (yv, &xv) in y.iter_mut().zip(x.iter()) {
        *yv += alpha * xv;
    }
}
