//! Shared numeric kernels. All loops have a fixed evaluation order, so results
//! are bit-identical regardless of thread count: rayon only ever splits work
//! across disjoint output ranges.

use rayon::prelude::*;

/// Work threshold (in multiply-adds) below which kernels stay single-threaded.
const PAR_THRESHOLD: usize = 1 << 18;

/// Dot product with 8 fixed-order lanes; vectorizes under AVX without
/// changing the summation order between runs.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 8;
    let mut acc = [0.0f32; 8];
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] += a[i + l] * b[i + l];
        }
    }
    let mut s = 0.0;
    for l in 0..8 {
        s += acc[l];
    }
    for i in chunks * 8..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * *xi;
    }
}

/// C[m,n] = A[m,k] · B[k,n], overwriting C.
pub fn matmul_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let body = |i: usize, row: &mut [f32]| {
        row.fill(0.0);
        for p in 0..k {
            let aik = a[i * k + p];
            if aik != 0.0 {
                axpy(aik, &b[p * n..(p + 1) * n], row);
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// C[m,n] = A[m,k] · B[n,k]^T  (dot of rows; the cache-friendly case).
pub fn matmul_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let body = |i: usize, row: &mut [f32]| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, out) in row.iter_mut().enumerate() {
            *out = dot(ar, &b[j * k..(j + 1) * k]);
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// C[m,n] = A[k,m]^T · B[k,n]
pub fn matmul_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let body = |i: usize, row: &mut [f32]| {
        row.fill(0.0);
        for p in 0..k {
            let aik = a[p * m + i];
            if aik != 0.0 {
                axpy(aik, &b[p * n..(p + 1) * n], row);
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in c.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
}

/// C[m,n] = A[k,m]^T · B[n,k]^T
pub fn matmul_tt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[p * m + i] * b[j * k + p];
            }
            c[i * n + j] = s;
        }
    }
}

/// 1-D convolution, channels-first: x [B,Cin,L], w [Cout,Cin,K] → out [B,Cout,Lout]
/// with Lout = (L + 2·pad − K)/stride + 1 (caller guarantees divisibility).
pub fn conv1d(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
) {
    let l_out = (len + 2 * pad - ksize) / stride + 1;
    debug_assert_eq!(out.len(), batch * c_out, "{}", l_out * 0 + 1); // silence unused when debug off
    debug_assert_eq!(out.len() / (batch * c_out), l_out);
    let body = |idx: usize, orow: &mut [f32]| {
        let b = idx / c_out;
        let co = idx % c_out;
        let base = bias.map_or(0.0, |bv| bv[co]);
        let wrow = &w[co * c_in * ksize..(co + 1) * c_in * ksize];
        let xb = &x[b * c_in * len..(b + 1) * c_in * len];
        for (l, o) in orow.iter_mut().enumerate() {
            let start = (l * stride) as isize - pad as isize;
            let mut s = base;
            for ci in 0..c_in {
                let xrow = &xb[ci * len..(ci + 1) * len];
                let wk = &wrow[ci * ksize..(ci + 1) * ksize];
                let k_lo = (-start).max(0) as usize;
                let k_hi = ksize.min((len as isize - start).max(0) as usize);
                let x_off = (start + k_lo as isize) as usize;
                let mut acc = 0.0;
                for k in k_lo..k_hi {
                    acc += wk[k] * xrow[x_off + k - k_lo];
                }
                s += acc;
            }
            *o = s;
        }
    };
    let work = batch * c_out * l_out * c_in * ksize;
    if work >= PAR_THRESHOLD && batch * c_out > 1 {
        out.par_chunks_mut(l_out).enumerate().for_each(|(i, r)| body(i, r));
    } else {
        for (i, r) in out.chunks_mut(l_out).enumerate() {
            body(i, r);
        }
    }
}

/// Gradient of conv1d w.r.t. its input.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_grad_x(
    g: &[f32],
    w: &[f32],
    dx: &mut [f32],
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
) {
    let l_out = (len + 2 * pad - ksize) / stride + 1;
    let body = |idx: usize, dxrow: &mut [f32]| {
        let b = idx / c_in;
        let ci = idx % c_in;
        dxrow.fill(0.0);
        for co in 0..c_out {
            let grow = &g[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
            let wk = &w[(co * c_in + ci) * ksize..(co * c_in + ci + 1) * ksize];
            for (l, &gl) in grow.iter().enumerate() {
                if gl == 0.0 {
                    continue;
                }
                let start = (l * stride) as isize - pad as isize;
                let k_lo = (-start).max(0) as usize;
                let k_hi = ksize.min((len as isize - start).max(0) as usize);
                let x_off = (start + k_lo as isize) as usize;
                for k in k_lo..k_hi {
                    dxrow[x_off + k - k_lo] += gl * wk[k];
                }
            }
        }
    };
    let work = batch * c_in * l_out * c_out * ksize;
    if work >= PAR_THRESHOLD && batch * c_in > 1 {
        dx.par_chunks_mut(len).enumerate().for_each(|(i, r)| body(i, r));
    } else {
        for (i, r) in dx.chunks_mut(len).enumerate() {
            body(i, r);
        }
    }
}

/// Gradient of conv1d w.r.t. its weights (accumulated over batch).
#[allow(clippy::too_many_arguments)]
pub fn conv1d_grad_w(
    g: &[f32],
    x: &[f32],
    dw: &mut [f32],
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
) {
    let l_out = (len + 2 * pad - ksize) / stride + 1;
    let body = |co: usize, dwrow: &mut [f32]| {
        dwrow.fill(0.0);
        for b in 0..batch {
            let grow = &g[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
            let xb = &x[b * c_in * len..(b + 1) * c_in * len];
            for (l, &gl) in grow.iter().enumerate() {
                if gl == 0.0 {
                    continue;
                }
                let start = (l * stride) as isize - pad as isize;
                let k_lo = (-start).max(0) as usize;
                let k_hi = ksize.min((len as isize - start).max(0) as usize);
                let x_off = (start + k_lo as isize) as usize;
                for ci in 0..c_in {
                    let xrow = &xb[ci * len..(ci + 1) * len];
                    let drow = &mut dwrow[ci * ksize..(ci + 1) * ksize];
                    for k in k_lo..k_hi {
                        drow[k] += gl * xrow[x_off + k - k_lo];
                    }
                }
            }
        }
    };
    let work = batch * c_out * l_out * c_in * ksize;
    if work >= PAR_THRESHOLD && c_out > 1 {
        dw.par_chunks_mut(c_in * ksize)
            .enumerate()
            .for_each(|(i, r)| body(i, r));
    } else {
        for (i, r) in dw.chunks_mut(c_in * ksize).enumerate() {
            body(i, r);
        }
    }
}

/// Transposed 1-D convolution: x [B,Cin,F], w [Cin,Cout,K] → out [B,Cout,F·stride].
/// The full output of length (F−1)·stride + K is trimmed by (K − stride),
/// split left/right, so frame f maps exactly onto samples [f·stride, (f+1)·stride).
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
    batch: usize,
    c_in: usize,
    frames: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
) {
    assert!(ksize >= stride, "kernel must cover the stride");
    let l_out = frames * stride;
    let trim_l = (ksize - stride) / 2;
    let body = |idx: usize, orow: &mut [f32]| {
        let b = idx / c_out;
        let co = idx % c_out;
        orow.fill(bias.map_or(0.0, |bv| bv[co]));
        let xb = &x[b * c_in * frames..(b + 1) * c_in * frames];
        for ci in 0..c_in {
            let xrow = &xb[ci * frames..(ci + 1) * frames];
            let wk = &w[(ci * c_out + co) * ksize..(ci * c_out + co + 1) * ksize];
            for (f, &xf) in xrow.iter().enumerate() {
                if xf == 0.0 {
                    continue;
                }
                let full_start = f * stride; // position in the untrimmed output
                for (k, &wv) in wk.iter().enumerate() {
                    let j = full_start + k;
                    if j >= trim_l && j - trim_l < l_out {
                        orow[j - trim_l] += xf * wv;
                    }
                }
            }
        }
    };
    let work = batch * c_out * frames * c_in * ksize;
    if work >= PAR_THRESHOLD && batch * c_out > 1 {
        out.par_chunks_mut(l_out).enumerate().for_each(|(i, r)| body(i, r));
    } else {
        for (i, r) in out.chunks_mut(l_out).enumerate() {
            body(i, r);
        }
    }
}

/// Gradient of conv_transpose1d w.r.t. its input.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d_grad_x(
    g: &[f32],
    w: &[f32],
    dx: &mut [f32],
    batch: usize,
    c_in: usize,
    frames: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
) {
    let l_out = frames * stride;
    let trim_l = (ksize - stride) / 2;
    let body = |idx: usize, dxrow: &mut [f32]| {
        let b = idx / c_in;
        let ci = idx % c_in;
        dxrow.fill(0.0);
        for co in 0..c_out {
            let grow = &g[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
            let wk = &w[(ci * c_out + co) * ksize..(ci * c_out + co + 1) * ksize];
            for (f, d) in dxrow.iter_mut().enumerate() {
                let full_start = f * stride;
                let mut s = 0.0;
                for (k, &wv) in wk.iter().enumerate() {
                    let j = full_start + k;
                    if j >= trim_l && j - trim_l < l_out {
                        s += grow[j - trim_l] * wv;
                    }
                }
                *d += s;
            }
        }
    };
    let work = batch * c_in * frames * c_out * ksize;
    if work >= PAR_THRESHOLD && batch * c_in > 1 {
        dx.par_chunks_mut(frames).enumerate().for_each(|(i, r)| body(i, r));
    } else {
        for (i, r) in dx.chunks_mut(frames).enumerate() {
            body(i, r);
        }
    }
}

/// Gradient of conv_transpose1d w.r.t. its weights.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose1d_grad_w(
    g: &[f32],
    x: &[f32],
    dw: &mut [f32],
    batch: usize,
    c_in: usize,
    frames: usize,
    c_out: usize,
    ksize: usize,
    stride: usize,
) {
    let l_out = frames * stride;
    let trim_l = (ksize - stride) / 2;
    dw.fill(0.0);
    for b in 0..batch {
        for ci in 0..c_in {
            let xrow = &x[(b * c_in + ci) * frames..(b * c_in + ci + 1) * frames];
            for co in 0..c_out {
                let grow = &g[(b * c_out + co) * l_out..(b * c_out + co + 1) * l_out];
                let drow = &mut dw[(ci * c_out + co) * ksize..(ci * c_out + co + 1) * ksize];
                for (f, &xf) in xrow.iter().enumerate() {
                    if xf == 0.0 {
                        continue;
                    }
                    let full_start = f * stride;
                    for (k, d) in drow.iter_mut().enumerate() {
                        let j = full_start + k;
                        if j >= trim_l && j - trim_l < l_out {
                            *d += xf * grow[j - trim_l];
                        }
                    }
                }
            }
        }
    }
}
