//! Raw forward/backward kernels over flat buffers.
//!
//! Every reduction runs in a fixed order, and parallel loops only ever split
//! the work by output element, so results are bit-reproducible.

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::{strides, Element};

/// Broadcasted batched-matmul geometry.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct MatmulDims {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// Element offset of each output batch's A and B matrices.
    pub a_off: Vec<usize>,
    pub b_off: Vec<usize>,
    pub a_batches: usize,
    pub b_batches: usize,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(err());
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let rank = ab.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ab), pad(bb));
    let mut batch = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            batch.push(x);
        } else if x == 1 {
            batch.push(y);
        } else {
            return Err(err());
        }
    }
    let (sa, sb) = (strides(&pa), strides(&pb));
    let nb: usize = batch.iter().product();
    let bstr = strides(&batch);
    let mut a_off = Vec::with_capacity(nb);
    let mut b_off = Vec::with_capacity(nb);
    for ob in 0..nb {
        let (mut ia, mut ib) = (0, 0);
        for d in 0..rank {
            let idx = (ob / bstr[d]) % batch[d];
            if pa[d] != 1 {
                ia += idx * sa[d];
            }
            if pb[d] != 1 {
                ib += idx * sb[d];
            }
        }
        a_off.push(ia * m * k);
        b_off.push(ib * k * n);
    }
    let mut out_shape = batch;
    out_shape.push(m);
    out_shape.push(n);
    Ok(MatmulDims {
        out_shape,
        m,
        k,
        n,
        a_off,
        b_off,
        a_batches: pa.iter().product(),
        b_batches: pb.iter().product(),
    })
}

pub(crate) fn matmul_forward<T: Element>(a: &[T], b: &[T], d: &MatmulDims) -> Vec<T> {
    let (m, k, n) = (d.m, d.k, d.n);
    let mut out = vec![T::zero(); d.a_off.len() * m * n];
    exec::for_each_chunk(&mut out, n, |row, c| {
        let (ob, i) = (row / m, row % m);
        let arow = &a[d.a_off[ob] + i * k..][..k];
        let bm = &b[d.b_off[ob]..][..k * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bm[kk * n..][..n];
            for (o, &bv) in c.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

/// Returns (dA, dB).
pub(crate) fn matmul_backward<T: Element>(
    a: &[T],
    b: &[T],
    g: &[T],
    d: &MatmulDims,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k, n) = (d.m, d.k, d.n);
    let nb = d.a_off.len();
    let da = need_a.then(|| {
        let mut da = vec![T::zero(); d.a_batches * m * k];
        exec::for_each_chunk(&mut da, k, |row, c| {
            let (abatch, i) = (row / m, row % m);
            for ob in 0..nb {
                if d.a_off[ob] != abatch * m * k {
                    continue;
                }
                let grow = &g[(ob * m + i) * n..][..n];
                let bm = &b[d.b_off[ob]..][..k * n];
                for (kk, o) in c.iter_mut().enumerate() {
                    let brow = &bm[kk * n..][..n];
                    let mut acc = T::zero();
                    for (&gv, &bv) in grow.iter().zip(brow) {
                        acc = acc + gv * bv;
                    }
                    *o = *o + acc;
                }
            }
        });
        da
    });
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); d.b_batches * k * n];
        exec::for_each_chunk(&mut db, n, |row, c| {
            let (bbatch, kk) = (row / k, row % k);
            for ob in 0..nb {
                if d.b_off[ob] != bbatch * k * n {
                    continue;
                }
                for i in 0..m {
                    let av = a[d.a_off[ob] + i * k + kk];
                    let grow = &g[(ob * m + i) * n..][..n];
                    for (o, &gv) in c.iter_mut().zip(grow) {
                        *o = *o + av * gv;
                    }
                }
            }
        });
        db
    });
    (da, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

pub(crate) fn conv_dims(
    x: &[usize],
    w: &[usize],
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::config("stride", "must be at least 1"));
    }
    let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
    let (ph, pw) = (h + 2 * padding, wd + 2 * padding);
    if kh > ph || kw > pw {
        return Err(Error::config(
            "kernel",
            format!("{kh}x{kw} kernel exceeds padded input {ph}x{pw}"),
        ));
    }
    if (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
        return Err(Error::config(
            "stride",
            format!("output size of {ph}x{pw} input with {kh}x{kw} kernel and stride {stride} is not integral"),
        ));
    }
    Ok(ConvDims {
        batch: x[0],
        cin: x[1],
        h,
        w: wd,
        cout: w[0],
        kh,
        kw,
        stride,
        padding,
        oh: (ph - kh) / stride + 1,
        ow: (pw - kw) / stride + 1,
    })
}

/// Output coordinates `lo..hi` whose tap `k` lands inside an input of length `len`.
#[inline]
fn valid(k: usize, len: usize, out: usize, d: &ConvDims) -> (usize, usize) {
    let lo = if k >= d.padding {
        0
    } else {
        (d.padding - k).div_ceil(d.stride)
    };
    let hi = if len + d.padding > k {
        ((len + d.padding - k - 1) / d.stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfolds the first `rows` batch items into `[cin·kh·kw, rows·oh·ow]`;
/// padded taps are zero.
fn im2col<T: Element>(x: &[T], d: &ConvDims, rows: usize) -> Vec<T> {
    let plane = d.oh * d.ow;
    let q = rows * plane;
    let (s, p) = (d.stride, d.padding);
    let mut col = vec![T::zero(); d.cin * d.kh * d.kw * q];
    exec::for_each_chunk(&mut col, q, |r, crow| {
        let (ci, ky, kx) = (r / (d.kh * d.kw), (r / d.kw) % d.kh, r % d.kw);
        let (y0, y1) = valid(ky, d.h, d.oh, d);
        let (x0, x1) = valid(kx, d.w, d.ow, d);
        for nb in 0..rows {
            let xp = &x[(nb * d.cin + ci) * d.h * d.w..][..d.h * d.w];
            let dst = &mut crow[nb * plane..][..plane];
            for oy in y0..y1 {
                let xrow = &xp[(oy * s + ky - p) * d.w..][..d.w];
                for ox in x0..x1 {
                    dst[oy * d.ow + ox] = xrow[ox * s + kx - p];
                }
            }
        }
    });
    col
}

/// `[batch, c, plane]` → `[c, rows·plane]` for the first `rows` items.
fn to_channel_major<T: Element>(g: &[T], c: usize, plane: usize, rows: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c * rows * plane];
    exec::for_each_chunk(&mut out, rows * plane, |ch, o| {
        for nb in 0..rows {
            o[nb * plane..][..plane].copy_from_slice(&g[(nb * c + ch) * plane..][..plane]);
        }
    });
    out
}

/// Cross-correlation without bias, computed for the first `rows` batch items;
/// the remaining outputs are left at zero. Each output sums its taps in
/// `(cin, ky, kx)` order.
pub(crate) fn conv2d_forward<T: Element>(x: &[T], w: &[T], d: &ConvDims, rows: usize) -> Vec<T> {
    let rows = rows.min(d.batch);
    let plane = d.oh * d.ow;
    let q = rows * plane;
    let r_len = d.cin * d.kh * d.kw;
    let mut out = vec![T::zero(); d.batch * d.cout * plane];
    if q == 0 {
        return out;
    }
    let col = im2col(x, d, rows);
    let mut cm = vec![T::zero(); d.cout * q];
    exec::for_each_chunk(&mut cm, q, |co, orow| {
        let wrow = &w[co * r_len..][..r_len];
        for (r, &wv) in wrow.iter().enumerate() {
            let crow = &col[r * q..][..q];
            for (o, &c) in orow.iter_mut().zip(crow) {
                *o = *o + wv * c;
            }
        }
    });
    exec::for_each_chunk(
        &mut out[..rows * d.cout * plane],
        d.cout * plane,
        |nb, o| {
            for co in 0..d.cout {
                o[co * plane..][..plane].copy_from_slice(&cm[co * q + nb * plane..][..plane]);
            }
        },
    );
    out
}

/// Gradients of [`conv2d_forward`]; outputs past `rows` carry no gradient.
pub(crate) fn conv2d_backward<T: Element>(
    x: &[T],
    w: &[T],
    g: &[T],
    d: &ConvDims,
    rows: usize,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let rows = rows.min(d.batch);
    let plane = d.oh * d.ow;
    let q = rows * plane;
    let r_len = d.cin * d.kh * d.kw;
    let (s, p) = (d.stride, d.padding);
    let gc = to_channel_major(g, d.cout, plane, rows);
    let dx = need_x.then(|| {
        let mut dcol = vec![T::zero(); r_len * q];
        exec::for_each_chunk(&mut dcol, q, |r, drow| {
            for co in 0..d.cout {
                let wv = w[co * r_len + r];
                for (o, &gv) in drow.iter_mut().zip(&gc[co * q..][..q]) {
                    *o = *o + wv * gv;
                }
            }
        });
        let mut dx = vec![T::zero(); d.batch * d.cin * d.h * d.w];
        exec::for_each_chunk(
            &mut dx[..rows * d.cin * d.h * d.w],
            d.cin * d.h * d.w,
            |nb, dxn| {
                for ci in 0..d.cin {
                    let dxp = &mut dxn[ci * d.h * d.w..][..d.h * d.w];
                    for ky in 0..d.kh {
                        let (y0, y1) = valid(ky, d.h, d.oh, d);
                        for kx in 0..d.kw {
                            let (x0, x1) = valid(kx, d.w, d.ow, d);
                            let r = (ci * d.kh + ky) * d.kw + kx;
                            let src = &dcol[r * q + nb * plane..][..plane];
                            for oy in y0..y1 {
                                let drow = &mut dxp[(oy * s + ky - p) * d.w..][..d.w];
                                for ox in x0..x1 {
                                    let slot = &mut drow[ox * s + kx - p];
                                    *slot = *slot + src[oy * d.ow + ox];
                                }
                            }
                        }
                    }
                }
            },
        );
        dx
    });
    let dw = need_w.then(|| {
        let col = im2col(x, d, rows);
        let mut dw = vec![T::zero(); d.cout * r_len];
        exec::for_each_chunk(&mut dw, r_len, |co, dwr| {
            let grow = &gc[co * q..][..q];
            for (r, slot) in dwr.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (&gv, &c) in grow.iter().zip(&col[r * q..][..q]) {
                    acc = acc + gv * c;
                }
                *slot = acc;
            }
        });
        dw
    });
    (dx, dw)
}

/// Geometry of a channel-wise normalization: `[outer, channels, inner]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ChannelDims {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl ChannelDims {
    pub fn of(shape: &[usize]) -> Result<Self> {
        if shape.len() < 2 {
            return Err(Error::Shape {
                op: "batchnorm",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        Ok(ChannelDims {
            outer: shape[0],
            channels: shape[1],
            inner: shape[2..].iter().product(),
        })
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }

    fn for_channel<T: Copy>(&self, data: &[T], c: usize, mut f: impl FnMut(usize, T)) {
        for o in 0..self.outer {
            let base = (o * self.channels + c) * self.inner;
            for (j, &v) in data[base..base + self.inner].iter().enumerate() {
                f(base + j, v);
            }
        }
    }
}

pub(crate) struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance.
    pub var: Vec<T>,
}

pub(crate) fn channel_stats<T: Element>(x: &[T], d: &ChannelDims) -> BatchStats<T> {
    let cnt = T::from_usize(d.count()).unwrap();
    let mut mean = Vec::with_capacity(d.channels);
    let mut var = Vec::with_capacity(d.channels);
    for c in 0..d.channels {
        let mut s = T::zero();
        d.for_channel(x, c, |_, v| s = s + v);
        let mu = s / cnt;
        let mut q = T::zero();
        d.for_channel(x, c, |_, v| q = q + (v - mu) * (v - mu));
        mean.push(mu);
        var.push(q / cnt);
    }
    BatchStats { mean, var }
}

/// y = gamma * (x - mean) * inv_std + beta. Returns (y, xhat).
pub(crate) fn normalize<T: Element>(
    x: &[T],
    d: &ChannelDims,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for c in 0..d.channels {
        d.for_channel(x, c, |i, v| {
            let h = (v - mean[c]) * inv_std[c];
            xhat[i] = h;
            y[i] = gamma[c] * h + beta[c];
        });
    }
    (y, xhat)
}

/// Returns (dx, dgamma, dbeta). `batch_stats` selects the train-mode rule
/// (statistics depend on x) versus the eval-mode affine rule.
pub(crate) fn batchnorm_backward<T: Element>(
    g: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
    d: &ChannelDims,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cnt = T::from_usize(d.count()).unwrap();
    let mut dx = vec![T::zero(); g.len()];
    let mut dgamma = vec![T::zero(); d.channels];
    let mut dbeta = vec![T::zero(); d.channels];
    for c in 0..d.channels {
        let (mut sg, mut sgx) = (T::zero(), T::zero());
        d.for_channel(g, c, |i, gv| {
            sg = sg + gv;
            sgx = sgx + gv * xhat[i];
        });
        dgamma[c] = sgx;
        dbeta[c] = sg;
        let k = gamma[c] * inv_std[c];
        if batch_stats {
            d.for_channel(g, c, |i, gv| {
                dx[i] = k * (gv - sg / cnt - xhat[i] * sgx / cnt);
            });
        } else {
            d.for_channel(g, c, |i, gv| dx[i] = k * gv);
        }
    }
    (dx, dgamma, dbeta)
}
