//! Layer primitives with hand-derived backward passes.
//!
//! Everything is generic over [`Scalar`] so the same code runs plain
//! `f64` training and dual-number Hessian-vector products. Convolutions
//! are stride-1 with symmetric zero padding, implemented as im2col plus
//! a matrix product; pooling is 2x2 max with stride 2 and floor
//! semantics on odd extents.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView4, Axis, Dimension};

use crate::scalar::Scalar;

/// Unfold `(B, C, H, W)` into `(B*H*W, C*k*k)` patch rows.
pub fn im2col<S: Scalar>(x: &Array4<S>, k: usize, pad: usize) -> Array2<S> {
    let (b, c, h, w) = x.dim();
    let mut cols = Array2::from_elem((b * h * w, c * k * k), S::zero());
    for bi in 0..b {
        for oh in 0..h {
            for ow in 0..w {
                let row = (bi * h + oh) * w + ow;
                let mut col = 0;
                for ci in 0..c {
                    for dh in 0..k {
                        let ih = oh + dh;
                        for dw in 0..k {
                            let iw = ow + dw;
                            if ih >= pad && ih < h + pad && iw >= pad && iw < w + pad {
                                cols[[row, col]] = x[[bi, ci, ih - pad, iw - pad]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Fold patch-row gradients back onto the input, accumulating overlaps.
pub fn col2im<S: Scalar>(
    dcols: &Array2<S>,
    dim: (usize, usize, usize, usize),
    k: usize,
    pad: usize,
) -> Array4<S> {
    let (b, c, h, w) = dim;
    let mut dx = Array4::from_elem(dim, S::zero());
    for bi in 0..b {
        for oh in 0..h {
            for ow in 0..w {
                let row = (bi * h + oh) * w + ow;
                let mut col = 0;
                for ci in 0..c {
                    for dh in 0..k {
                        let ih = oh + dh;
                        for dw in 0..k {
                            let iw = ow + dw;
                            if ih >= pad && ih < h + pad && iw >= pad && iw < w + pad {
                                dx[[bi, ci, ih - pad, iw - pad]] += dcols[[row, col]];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn weight_matrix<S: Scalar>(w: ArrayView4<'_, S>) -> Array2<S> {
    let (co, ci, kh, kw) = w.dim();
    w.to_shape((co, ci * kh * kw)).unwrap().to_owned()
}

/// `(B, Cin, H, W) -> (B, Cout, H, W)`, stride 1.
pub fn conv2d_forward<S: Scalar>(
    x: &Array4<S>,
    w: ArrayView4<'_, S>,
    b: ArrayView1<'_, S>,
    pad: usize,
) -> Array4<S> {
    let (bs, _, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let cols = im2col(x, k, pad);
    let wmat = weight_matrix(w);
    let mut ymat = cols.dot(&wmat.t());
    for mut row in ymat.rows_mut() {
        for (v, bias) in row.iter_mut().zip(b.iter()) {
            *v += *bias;
        }
    }
    // (B*H*W, Cout) -> (B, Cout, H, W)
    let y = ymat.into_shape_with_order((bs, h, wd, co)).unwrap();
    let y = y.permuted_axes([0, 3, 1, 2]);
    y.as_standard_layout().to_owned()
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<S: Scalar>(
    x: &Array4<S>,
    w: ArrayView4<'_, S>,
    gy: &Array4<S>,
    pad: usize,
) -> (Array4<S>, Array4<S>, Array1<S>) {
    let (bs, _, h, wd) = x.dim();
    let (co, ci, k, _) = w.dim();
    let cols = im2col(x, k, pad);
    let wmat = weight_matrix(w);
    let gymat = gy
        .view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((bs * h * wd, co))
        .unwrap();
    let dwmat = gymat.t().dot(&cols);
    let db = gymat.sum_axis(Axis(0));
    let dcols = gymat.dot(&wmat);
    let dx = col2im(&dcols, x.dim(), k, pad);
    let dw = dwmat.into_shape_with_order((co, ci, k, k)).unwrap();
    (dx, dw, db)
}

/// Per-channel batch statistics carried out of a training-mode forward.
pub struct BnBatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Normalized activations and inverse stddev, kept for the backward
/// pass. `xhat` is stored in `(batch, channel, rest)` form.
pub struct BnCache<S> {
    xhat: Array3<S>,
    inv_std: Array1<S>,
}

pub type BnCache4<S> = BnCache<S>;
pub type BnCache2<S> = BnCache<S>;

const BN_EPS: f64 = 1e-5; // variance floor; keeps size-1 batches finite

fn to3_4<S: Scalar>(x: &Array4<S>) -> Array3<S> {
    let (b, c, h, w) = x.dim();
    x.clone().into_shape_with_order((b, c, h * w)).unwrap()
}

fn to3_2<S: Scalar>(x: &Array2<S>) -> Array3<S> {
    let (b, d) = x.dim();
    x.clone().into_shape_with_order((b, d, 1)).unwrap()
}

fn bn_train3<S: Scalar>(
    x: Array3<S>,
    gamma: ArrayView1<'_, S>,
    beta: ArrayView1<'_, S>,
) -> (Array3<S>, BnCache<S>, BnBatchStats) {
    let (b, c, k) = x.dim();
    let n = S::from_f64((b * k) as f64);
    let mut mean = vec![S::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                mean[ci] += x[[bi, ci, ki]];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![S::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                let d = x[[bi, ci, ki]] - mean[ci];
                var[ci] += d * d;
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    let inv_std: Array1<S> = var
        .iter()
        .map(|v| S::one() / (*v + S::from_f64(BN_EPS)).sqrt())
        .collect();
    let mut xhat = x;
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                xhat[[bi, ci, ki]] = (xhat[[bi, ci, ki]] - mean[ci]) * inv_std[ci];
            }
        }
    }
    let mut y = xhat.clone();
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                y[[bi, ci, ki]] = gamma[ci] * y[[bi, ci, ki]] + beta[ci];
            }
        }
    }
    let stats = BnBatchStats {
        mean: mean.iter().map(|m| m.value()).collect(),
        var: var.iter().map(|v| v.value()).collect(),
    };
    (y, BnCache { xhat, inv_std }, stats)
}

fn bn_backward3<S: Scalar>(
    cache: &BnCache<S>,
    gamma: ArrayView1<'_, S>,
    gy: &Array3<S>,
) -> (Array3<S>, Array1<S>, Array1<S>) {
    let (b, c, k) = gy.dim();
    let n = S::from_f64((b * k) as f64);
    let mut dgamma = vec![S::zero(); c];
    let mut dbeta = vec![S::zero(); c];
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                let g = gy[[bi, ci, ki]];
                dgamma[ci] += g * cache.xhat[[bi, ci, ki]];
                dbeta[ci] += g;
            }
        }
    }
    let mut dx = gy.clone();
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..k {
                let term =
                    dx[[bi, ci, ki]] * n - dbeta[ci] - cache.xhat[[bi, ci, ki]] * dgamma[ci];
                dx[[bi, ci, ki]] = gamma[ci] * cache.inv_std[ci] * term / n;
            }
        }
    }
    (dx, Array1::from_vec(dgamma), Array1::from_vec(dbeta))
}

fn bn_eval3<S: Scalar>(
    mut x: Array3<S>,
    gamma: ArrayView1<'_, S>,
    beta: ArrayView1<'_, S>,
    run_mean: ArrayView1<'_, f64>,
    run_var: ArrayView1<'_, f64>,
) -> Array3<S> {
    let (b, c, k) = x.dim();
    for ci in 0..c {
        let inv = S::from_f64(1.0 / (run_var[ci] + BN_EPS).sqrt());
        let mu = S::from_f64(run_mean[ci]);
        for bi in 0..b {
            for ki in 0..k {
                x[[bi, ci, ki]] = gamma[ci] * (x[[bi, ci, ki]] - mu) * inv + beta[ci];
            }
        }
    }
    x
}

/// BN over `(B, H, W)` per channel of a `(B, C, H, W)` input.
pub fn bn4_train<S: Scalar>(
    x: &Array4<S>,
    gamma: ArrayView1<'_, S>,
    beta: ArrayView1<'_, S>,
) -> (Array4<S>, BnCache4<S>, BnBatchStats) {
    let dim = x.dim();
    let (y, cache, stats) = bn_train3(to3_4(x), gamma, beta);
    (y.into_shape_with_order(dim).unwrap(), cache, stats)
}

pub fn bn4_backward<S: Scalar>(
    cache: &BnCache4<S>,
    gamma: ArrayView1<'_, S>,
    gy: &Array4<S>,
) -> (Array4<S>, Array1<S>, Array1<S>) {
    let dim = gy.dim();
    let (dx, dgamma, dbeta) = bn_backward3(cache, gamma, &to3_4(gy));
    (dx.into_shape_with_order(dim).unwrap(), dgamma, dbeta)
}

pub fn bn4_eval<S: Scalar>(
    x: &Array4<S>,
    gamma: ArrayView1<'_, S>,
    beta: ArrayView1<'_, S>,
    run_mean: ArrayView1<'_, f64>,
    run_var: ArrayView1<'_, f64>,
) -> Array4<S> {
    let dim = x.dim();
    bn_eval3(to3_4(x), gamma, beta, run_mean, run_var)
        .into_shape_with_order(dim)
        .unwrap()
}

/// BN over the batch per feature of a `(B, D)` input.
pub fn bn2_train<S: Scalar>(
    x: &Array2<S>,
    gamma: ArrayView1<'_, S>,
    beta: ArrayView1<'_, S>,
) -> (Array2<S>, BnCache2<S>, BnBatchStats) {
    let dim = x.dim();
    let (y, cache, stats) = bn_train3(to3_2(x), gamma, beta);
    (y.into_shape_with_order(dim).unwrap(), cache, stats)
}

pub fn bn2_backward<S: Scalar>(
    cache: &BnCache2<S>,
    gamma: ArrayView1<'_, S>,
    gy: &Array2<S>,
) -> (Array2<S>, Array1<S>, Array1<S>) {
    let dim = gy.dim();
    let (dx, dgamma, dbeta) = bn_backward3(cache, gamma, &to3_2(gy));
    (dx.into_shape_with_order(dim).unwrap(), dgamma, dbeta)
}

pub fn bn2_eval<S: Scalar>(
    x: &Array2<S>,
    gamma: ArrayView1<'_, S>,
    beta: ArrayView1<'_, S>,
    run_mean: ArrayView1<'_, f64>,
    run_var: ArrayView1<'_, f64>,
) -> Array2<S> {
    let dim = x.dim();
    bn_eval3(to3_2(x), gamma, beta, run_mean, run_var)
        .into_shape_with_order(dim)
        .unwrap()
}

/// Fold batch statistics into running statistics with momentum 0.1.
pub fn update_running_stats(
    mut run_mean: ndarray::ArrayViewMut1<'_, f64>,
    mut run_var: ndarray::ArrayViewMut1<'_, f64>,
    stats: &BnBatchStats,
) {
    const MOMENTUM: f64 = 0.1;
    for (r, b) in run_mean.iter_mut().zip(stats.mean.iter()) {
        *r = (1.0 - MOMENTUM) * *r + MOMENTUM * *b;
    }
    for (r, b) in run_var.iter_mut().zip(stats.var.iter()) {
        *r = (1.0 - MOMENTUM) * *r + MOMENTUM * *b;
    }
}

pub fn relu_forward<S: Scalar, D: Dimension>(
    x: &ndarray::Array<S, D>,
) -> (ndarray::Array<S, D>, ndarray::Array<bool, D>) {
    let mask = x.mapv(|v| v > S::zero());
    let y = x.mapv(|v| if v > S::zero() { v } else { S::zero() });
    (y, mask)
}

pub fn relu_backward<S: Scalar, D: Dimension>(
    mask: &ndarray::Array<bool, D>,
    gy: &ndarray::Array<S, D>,
) -> ndarray::Array<S, D> {
    let mut dx = gy.clone();
    ndarray::Zip::from(&mut dx).and(mask).for_each(|g, &m| {
        if !m {
            *g = S::zero();
        }
    });
    dx
}

/// 2x2 max pool, stride 2; odd trailing rows/cols are dropped.
/// The cache stores each winner's flat `ih * W + iw` position.
pub fn maxpool2_forward<S: Scalar>(x: &Array4<S>) -> (Array4<S>, Array4<usize>) {
    let (b, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::from_elem((b, c, oh, ow), S::zero());
    let mut idx = Array4::from_elem((b, c, oh, ow), 0usize);
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = x[[bi, ci, 2 * i, 2 * j]];
                    let mut pos = (2 * i) * w + 2 * j;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let v = x[[bi, ci, 2 * i + di, 2 * j + dj]];
                            if v > best {
                                best = v;
                                pos = (2 * i + di) * w + 2 * j + dj;
                            }
                        }
                    }
                    y[[bi, ci, i, j]] = best;
                    idx[[bi, ci, i, j]] = pos;
                }
            }
        }
    }
    (y, idx)
}

pub fn maxpool2_backward<S: Scalar>(
    idx: &Array4<usize>,
    in_dim: (usize, usize, usize, usize),
    gy: &Array4<S>,
) -> Array4<S> {
    let (_, _, _, w) = in_dim;
    let mut dx = Array4::from_elem(in_dim, S::zero());
    for ((bi, ci, i, j), g) in gy.indexed_iter() {
        let pos = idx[[bi, ci, i, j]];
        dx[[bi, ci, pos / w, pos % w]] += *g;
    }
    dx
}

/// `y = x W + b` with `x: (B, In)`, `W: (In, Out)`.
pub fn linear_forward<S: Scalar>(
    x: &Array2<S>,
    w: ArrayView2<'_, S>,
    b: Option<ArrayView1<'_, S>>,
) -> Array2<S> {
    let mut y = x.dot(&w);
    if let Some(b) = b {
        for mut row in y.rows_mut() {
            for (v, bias) in row.iter_mut().zip(b.iter()) {
                *v += *bias;
            }
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<S: Scalar>(
    x: &Array2<S>,
    w: ArrayView2<'_, S>,
    gy: &Array2<S>,
) -> (Array2<S>, Array2<S>, Array1<S>) {
    let dx = gy.dot(&w.t());
    let dw = x.t().dot(gy);
    let db = gy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Norm guard so zero vectors stay finite without bending nonzero ones.
const COS_EPS: f64 = 1e-24;

pub struct CosineCache<S> {
    u: Array2<S>,       // normalized inputs (B, D)
    v: Array2<S>,       // normalized class columns (C, D)
    sx: Array1<S>,      // input norms
    sw: Array1<S>,      // column norms
}

/// Cosine-similarity logits scaled by `tau`; `w: (In, Classes)`.
pub fn cosine_forward<S: Scalar>(
    x: &Array2<S>,
    w: ArrayView2<'_, S>,
    tau: f64,
) -> (Array2<S>, CosineCache<S>) {
    let (b, d) = x.dim();
    let c = w.dim().1;
    let eps = S::from_f64(COS_EPS);
    let mut sx = Array1::from_elem(b, S::zero());
    let mut u = x.clone();
    for (i, row) in x.rows().into_iter().enumerate() {
        let n = (row.iter().map(|v| *v * *v).sum::<S>() + eps).sqrt();
        sx[i] = n;
        for (uv, xv) in u.row_mut(i).iter_mut().zip(row.iter()) {
            *uv = *xv / n;
        }
    }
    let mut sw = Array1::from_elem(c, S::zero());
    let mut v = Array2::from_elem((c, d), S::zero());
    for j in 0..c {
        let col = w.column(j);
        let n = (col.iter().map(|v| *v * *v).sum::<S>() + eps).sqrt();
        sw[j] = n;
        for (vv, wv) in v.row_mut(j).iter_mut().zip(col.iter()) {
            *vv = *wv / n;
        }
    }
    let t = S::from_f64(tau);
    let y = u.dot(&v.t()).mapv(|e| e * t);
    (y, CosineCache { u, v, sx, sw })
}

/// Returns `(dx, dw)`.
pub fn cosine_backward<S: Scalar>(
    cache: &CosineCache<S>,
    gy: &Array2<S>,
    tau: f64,
) -> (Array2<S>, Array2<S>) {
    let t = S::from_f64(tau);
    let (b, d) = cache.u.dim();
    let c = cache.v.dim().0;
    // d/dx of u = (I - u u^T) / sx, applied to g_u = tau * gy v
    let gu = gy.dot(&cache.v).mapv(|e| e * t); // (B, D)
    let mut dx = Array2::from_elem((b, d), S::zero());
    for i in 0..b {
        let ui = cache.u.row(i);
        let gi = gu.row(i);
        let dot = ui.iter().zip(gi.iter()).map(|(a, b)| *a * *b).sum::<S>();
        for k in 0..d {
            dx[[i, k]] = (gi[k] - ui[k] * dot) / cache.sx[i];
        }
    }
    let gv = gy.t().dot(&cache.u).mapv(|e| e * t); // (C, D)
    let mut dw = Array2::from_elem((d, c), S::zero());
    for j in 0..c {
        let vj = cache.v.row(j);
        let gj = gv.row(j);
        let dot = vj.iter().zip(gj.iter()).map(|(a, b)| *a * *b).sum::<S>();
        for k in 0..d {
            dw[[k, j]] = (gj[k] - vj[k] * dot) / cache.sw[j];
        }
    }
    (dx, dw)
}
