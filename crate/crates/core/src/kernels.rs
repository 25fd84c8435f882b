//! Raw numeric kernels behind tape operations.
//!
//! All kernels are deterministic: every output element is produced by exactly
//! one task with a fixed inner accumulation order, so results are bit-identical
//! regardless of thread count.

use rayon::prelude::*;

/// Work threshold (multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 16;

/// C[m,n] += A[m,k] · B[k,n]
pub fn matmul_2d_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Row-parallel C[m,n] = A[m,k] · B[k,n] (C assumed zeroed).
fn matmul_2d_par(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m * k * n < PAR_THRESHOLD || m < 2 {
        matmul_2d_acc(a, b, c, m, k, n);
        return;
    }
    let rows_per_chunk = (m / (rayon::current_num_threads() * 4)).max(1);
    c.par_chunks_mut(rows_per_chunk * n).enumerate().for_each(|(ci, cchunk)| {
        let r0 = ci * rows_per_chunk;
        let rows = cchunk.len() / n;
        matmul_2d_acc(&a[r0 * k..(r0 + rows) * k], b, cchunk, rows, k, n);
    });
}

/// dA[m,k] += dY[m,n] · Bᵀ  (B given as [k,n])
pub fn matmul_2d_acc_abt(dy: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (dv, bv) in dyrow.iter().zip(brow) {
                s += dv * bv;
            }
            darow[p] += s;
        }
    }
}

/// dB[k,n] += Aᵀ · dY  (A given as [m,k])
pub fn matmul_2d_acc_atb(a: &[f64], dy: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let dyrow = &dy[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let dbrow = &mut db[i * n..(i + 1) * n];
            for (dv, &dyv) in dbrow.iter_mut().zip(dyrow) {
                *dv += av * dyv;
            }
        }
    }
}

/// Batched matmul forward. `offsets` holds per-batch (a_off, b_off) into the
/// flat inputs; out is [nb, m, n] contiguous.
pub fn matmul_batched(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    offsets: &[(usize, usize)],
    m: usize,
    k: usize,
    n: usize,
) {
    let nb = offsets.len();
    if nb == 1 {
        let (ao, bo) = offsets[0];
        matmul_2d_par(&a[ao..ao + m * k], &b[bo..bo + k * n], out, m, k, n);
        return;
    }
    if nb * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(m * n).zip(offsets.par_iter()).for_each(|(c, &(ao, bo))| {
            matmul_2d_acc(&a[ao..ao + m * k], &b[bo..bo + k * n], c, m, k, n);
        });
    } else {
        for (c, &(ao, bo)) in out.chunks_mut(m * n).zip(offsets) {
            matmul_2d_acc(&a[ao..ao + m * k], &b[bo..bo + k * n], c, m, k, n);
        }
    }
}

/// Accumulate `dst[j] += k * src[j]` over aligned slices (vectorizes).
#[inline]
fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

/// Zero-padded "same" cross-correlation of one [h,w] image with one [k1,k2] kernel.
/// `out` is accumulated into.
pub fn conv2d_same_single(
    x: &[f64],
    kern: &[f64],
    out: &mut [f64],
    h: usize,
    w: usize,
    k1: usize,
    k2: usize,
) {
    let c1 = (k1 / 2) as isize;
    let c2 = (k2 / 2) as isize;
    for i in 0..h as isize {
        let orow = &mut out[(i as usize) * w..(i as usize + 1) * w];
        for u in 0..k1 as isize {
            let xi = i + u - c1;
            if xi < 0 || xi >= h as isize {
                continue;
            }
            let xrow = &x[(xi as usize) * w..(xi as usize + 1) * w];
            for v in 0..k2 as isize {
                let kv = kern[(u as usize) * k2 + v as usize];
                if kv == 0.0 {
                    continue;
                }
                let s = v - c2; // source column offset
                let j_lo = (-s).max(0) as usize;
                let j_hi = ((w as isize - s).min(w as isize)).max(0) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                let src = &xrow[(j_lo as isize + s) as usize..(j_hi as isize + s) as usize];
                axpy(&mut orow[j_lo..j_hi], src, kv);
            }
        }
    }
}

/// dX for the same-padded cross-correlation (correlation with the flipped kernel).
pub fn conv2d_same_dx(
    dy: &[f64],
    kern: &[f64],
    dx: &mut [f64],
    h: usize,
    w: usize,
    k1: usize,
    k2: usize,
) {
    let c1 = (k1 / 2) as isize;
    let c2 = (k2 / 2) as isize;
    for p in 0..h as isize {
        let dxrow = &mut dx[(p as usize) * w..(p as usize + 1) * w];
        for u in 0..k1 as isize {
            let di = p - u + c1;
            if di < 0 || di >= h as isize {
                continue;
            }
            let dyrow = &dy[(di as usize) * w..(di as usize + 1) * w];
            for v in 0..k2 as isize {
                let kv = kern[(u as usize) * k2 + v as usize];
                if kv == 0.0 {
                    continue;
                }
                let s = c2 - v;
                let q_lo = (-s).max(0) as usize;
                let q_hi = ((w as isize - s).min(w as isize)).max(0) as usize;
                if q_lo >= q_hi {
                    continue;
                }
                let src = &dyrow[(q_lo as isize + s) as usize..(q_hi as isize + s) as usize];
                axpy(&mut dxrow[q_lo..q_hi], src, kv);
            }
        }
    }
}

/// dK for the same-padded cross-correlation of a single image.
pub fn conv2d_same_dk(
    x: &[f64],
    dy: &[f64],
    dk: &mut [f64],
    h: usize,
    w: usize,
    k1: usize,
    k2: usize,
) {
    let c1 = (k1 / 2) as isize;
    let c2 = (k2 / 2) as isize;
    for u in 0..k1 as isize {
        for v in 0..k2 as isize {
            let mut s = 0.0;
            for i in 0..h as isize {
                let xi = i + u - c1;
                if xi < 0 || xi >= h as isize {
                    continue;
                }
                let dyrow = &dy[(i as usize) * w..(i as usize + 1) * w];
                let xrow = &x[(xi as usize) * w..(xi as usize + 1) * w];
                let sh = v - c2;
                let j_lo = (-sh).max(0) as usize;
                let j_hi = ((w as isize - sh).min(w as isize)).max(0) as usize;
                if j_lo >= j_hi {
                    continue;
                }
                let src = &xrow[(j_lo as isize + sh) as usize..(j_hi as isize + sh) as usize];
                for (d, xv) in dyrow[j_lo..j_hi].iter().zip(src) {
                    s += d * xv;
                }
            }
            dk[(u as usize) * k2 + v as usize] += s;
        }
    }
}

/// Batched dX: `dx` is [nb,h,w], accumulated per batch element (disjoint, so
/// parallelism keeps determinism).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_batched_dx(
    dy: &[f64],
    kern: &[f64],
    dx: &mut [f64],
    nb: usize,
    h: usize,
    w: usize,
    k1: usize,
    k2: usize,
    shared_kernel: bool,
) {
    let img = h * w;
    let ksz = k1 * k2;
    let body = |bi: usize, g: &mut [f64]| {
        let kslice = if shared_kernel { kern } else { &kern[bi * ksz..(bi + 1) * ksz] };
        conv2d_same_dx(&dy[bi * img..(bi + 1) * img], kslice, g, h, w, k1, k2);
    };
    if nb * img * ksz >= PAR_THRESHOLD && nb > 1 {
        dx.par_chunks_mut(img).enumerate().for_each(|(bi, g)| body(bi, g));
    } else {
        for (bi, g) in dx.chunks_mut(img).enumerate() {
            body(bi, g);
        }
    }
}

/// Batched dK for per-batch kernels (disjoint output blocks).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_batched_dk_per_batch(
    x: &[f64],
    dy: &[f64],
    dk: &mut [f64],
    nb: usize,
    h: usize,
    w: usize,
    k1: usize,
    k2: usize,
) {
    let img = h * w;
    let ksz = k1 * k2;
    let body = |bi: usize, g: &mut [f64]| {
        conv2d_same_dk(&x[bi * img..(bi + 1) * img], &dy[bi * img..(bi + 1) * img], g, h, w, k1, k2);
    };
    if nb * img * ksz >= PAR_THRESHOLD && nb > 1 {
        dk.par_chunks_mut(ksz).enumerate().for_each(|(bi, g)| body(bi, g));
    } else {
        for (bi, g) in dk.chunks_mut(ksz).enumerate() {
            body(bi, g);
        }
    }
}

/// Batched conv forward: x is [nb,h,w]; kern either one [k1,k2] (shared) or [nb,k1,k2].
pub fn conv2d_batched(
    x: &[f64],
    kern: &[f64],
    out: &mut [f64],
    nb: usize,
    h: usize,
    w: usize,
    k1: usize,
    k2: usize,
    shared_kernel: bool,
) {
    let img = h * w;
    let ksz = k1 * k2;
    let work = nb * img * ksz;
    let body = |bi: usize, o: &mut [f64]| {
        let kslice = if shared_kernel { kern } else { &kern[bi * ksz..(bi + 1) * ksz] };
        conv2d_same_single(&x[bi * img..(bi + 1) * img], kslice, o, h, w, k1, k2);
    };
    if work >= PAR_THRESHOLD && nb > 1 {
        out.par_chunks_mut(img).enumerate().for_each(|(bi, o)| body(bi, o));
    } else {
        for (bi, o) in out.chunks_mut(img).enumerate() {
            body(bi, o);
        }
    }
}
