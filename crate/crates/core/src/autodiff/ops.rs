//! Forward and backward kernels for the primitive layers.
//!
//! All kernels work on whole batches. Image tensors are NCHW; per-sample
//! work goes through `im2col` + GEMM so every convolution reduces to a
//! matrix product.

use crate::tensor::{mat, Real, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub s: usize,
    pub p: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, s: usize, p: usize) -> Self {
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        ConvGeom {
            c,
            h,
            w,
            k,
            s,
            p,
            ho,
            wo,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }
}

pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let n = g.cols();
    for ci in 0..g.c {
        let plane = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Convolution. `w` is `[out, in, k, k]`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c, h, wd) = dims4(x);
    let out_ch = w.shape()[0];
    let k = w.shape()[2];
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let mut out = Tensor::zeros(&[n, out_ch, g.ho, g.wo]);
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let per_out = out_ch * g.cols();
    for i in 0..n {
        im2col(x.item(i), &g, &mut cols);
        let dst = &mut out.data_mut()[i * per_out..(i + 1) * per_out];
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(g.cols()).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        mat::mul_acc(out_ch, g.rows(), g.cols(), w.data(), &cols, dst);
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_params: bool,
) -> ConvGrads<T> {
    let (n, c, h, wd) = dims4(x);
    let out_ch = w.shape()[0];
    let k = w.shape()[2];
    let g = ConvGeom::new(c, h, wd, k, stride, pad);
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = want_params.then(|| Tensor::zeros(w.shape()));
    let mut db = (want_params && has_bias).then(|| Tensor::zeros(&[out_ch]));
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let mut dcols = vec![T::zero(); g.rows() * g.cols()];
    let item = c * h * wd;
    for i in 0..n {
        let go = gout.item(i);
        if let Some(dw) = dw.as_mut() {
            im2col(x.item(i), &g, &mut cols);
            mat::mul_a_bt_acc(out_ch, g.cols(), g.rows(), go, &cols, dw.data_mut());
        }
        if let Some(db) = db.as_mut() {
            for (o, chunk) in go.chunks(g.cols()).enumerate() {
                db.data_mut()[o] += chunk.iter().copied().sum::<T>();
            }
        }
        dcols.fill(T::zero());
        mat::mul_at_b_acc(g.rows(), out_ch, g.cols(), w.data(), go, &mut dcols);
        col2im(&dcols, &g, &mut dx.data_mut()[i * item..(i + 1) * item]);
    }
    ConvGrads { dx, dw, db }
}

/// Transposed convolution. `w` is `[in, out, k, k]`; output spatial size is
/// `(h - 1) * stride - 2 * pad + k`.
pub(crate) fn conv_transpose_forward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let (n, c_in, h, wd) = dims4(x);
    let out_ch = w.shape()[1];
    let k = w.shape()[2];
    let ho = (h - 1) * stride + k - 2 * pad;
    let wo = (wd - 1) * stride + k - 2 * pad;
    // geometry of the equivalent forward convolution from output to input
    let g = ConvGeom {
        c: out_ch,
        h: ho,
        w: wo,
        k,
        s: stride,
        p: pad,
        ho: h,
        wo: wd,
    };
    let mut out = Tensor::zeros(&[n, out_ch, ho, wo]);
    let mut cols = vec![T::zero(); g.rows() * g.cols()];
    let item = out_ch * ho * wo;
    for i in 0..n {
        cols.fill(T::zero());
        mat::mul_at_b_acc(g.rows(), c_in, h * wd, w.data(), x.item(i), &mut cols);
        let dst = &mut out.data_mut()[i * item..(i + 1) * item];
        col2im(&cols, &g, dst);
        if let Some(b) = b {
            for (o, chunk) in dst.chunks_mut(ho * wo).enumerate() {
                let bias = b.data()[o];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

pub(crate) fn conv_transpose_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    gout: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_params: bool,
) -> ConvGrads<T> {
    let (n, c_in, h, wd) = dims4(x);
    let out_ch = w.shape()[1];
    let k = w.shape()[2];
    let (_, _, ho, wo) = dims4(gout);
    let g = ConvGeom {
        c: out_ch,
        h: ho,
        w: wo,
        k,
        s: stride,
        p: pad,
        ho: h,
        wo: wd,
    };
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = want_params.then(|| Tensor::zeros(w.shape()));
    let mut db = (want_params && has_bias).then(|| Tensor::zeros(&[out_ch]));
    let mut gcols = vec![T::zero(); g.rows() * g.cols()];
    let item = c_in * h * wd;
    for i in 0..n {
        let go = gout.item(i);
        im2col(go, &g, &mut gcols);
        mat::mul_acc(
            c_in,
            g.rows(),
            h * wd,
            w.data(),
            &gcols,
            &mut dx.data_mut()[i * item..(i + 1) * item],
        );
        if let Some(dw) = dw.as_mut() {
            mat::mul_a_bt_acc(c_in, h * wd, g.rows(), x.item(i), &gcols, dw.data_mut());
        }
        if let Some(db) = db.as_mut() {
            for (o, chunk) in go.chunks(ho * wo).enumerate() {
                db.data_mut()[o] += chunk.iter().copied().sum::<T>();
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Non-overlapping max pooling; returns the output and the flat argmax of
/// each output cell within its batch item.
pub(crate) fn maxpool_forward<T: Real>(x: &Tensor<T>, window: usize) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = dims4(x);
    let (ho, wo) = (h / window, w / window);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let item_out = c * ho * wo;
    for i in 0..n {
        let src = x.item(i);
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = (ci * h + oy * window + dy) * w + ox * window + dx;
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = i * item_out + (ci * ho + oy) * wo + ox;
                    out.data_mut()[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
    }
    (out, arg)
}

pub(crate) fn maxpool_backward<T: Real>(
    input_shape: &[usize],
    arg: &[u32],
    gout: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let item_in: usize = input_shape[1..].iter().product();
    let item_out = gout.item_len();
    for i in 0..gout.batch() {
        for j in 0..item_out {
            let o = i * item_out + j;
            dx.data_mut()[i * item_in + arg[o] as usize] += gout.data()[o];
        }
    }
    dx
}

/// `[N, C, spatial]` view of a batch for per-channel statistics.
fn channel_view(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape[1];
    let s = shape[2..].iter().product();
    (n, c, s)
}

pub(crate) struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

pub(crate) fn batchnorm_train<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Tensor<T>, BnSaved<T>) {
    let (n, c, s) = channel_view(x.shape());
    let m = T::from_usize(n * s).unwrap();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut acc = T::zero();
        for i in 0..n {
            let base = (i * c + ci) * s;
            acc += x.data()[base..base + s].iter().copied().sum::<T>();
        }
        mean[ci] = acc / m;
        let mut acc = T::zero();
        for i in 0..n {
            let base = (i * c + ci) * s;
            for &v in &x.data()[base..base + s] {
                let d = v - mean[ci];
                acc += d * d;
            }
        }
        var[ci] = acc / m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        for ci in 0..c {
            let base = (i * c + ci) * s;
            for j in base..base + s {
                let xh = (x.data()[j] - mean[ci]) * inv_std[ci];
                xhat.data_mut()[j] = xh;
                out.data_mut()[j] = gamma[ci] * xh + beta[ci];
            }
        }
    }
    (
        out,
        BnSaved {
            xhat,
            inv_std,
            batch_mean: mean,
            batch_var: var,
        },
    )
}

pub(crate) fn batchnorm_eval<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mean: &[T],
    var: &[T],
    eps: T,
) -> (Tensor<T>, Vec<T>) {
    let (n, c, s) = channel_view(x.shape());
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..n {
        for ci in 0..c {
            let scale = gamma[ci] * inv_std[ci];
            let shift = beta[ci] - mean[ci] * scale;
            let base = (i * c + ci) * s;
            for j in base..base + s {
                out.data_mut()[j] = x.data()[j] * scale + shift;
            }
        }
    }
    (out, inv_std)
}

/// Returns `(dx, dgamma, dbeta)` for batch-statistics normalization.
pub(crate) fn batchnorm_train_backward<T: Real>(
    saved: &BnSaved<T>,
    gamma: &[T],
    gout: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, s) = channel_view(gout.shape());
    let m = T::from_usize(n * s).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ci in 0..c {
            let base = (i * c + ci) * s;
            for j in base..base + s {
                dgamma[ci] += gout.data()[j] * saved.xhat.data()[j];
                dbeta[ci] += gout.data()[j];
            }
        }
    }
    let mut dx = Tensor::zeros(gout.shape());
    for i in 0..n {
        for ci in 0..c {
            let k = gamma[ci] * saved.inv_std[ci] / m;
            let base = (i * c + ci) * s;
            for j in base..base + s {
                dx.data_mut()[j] =
                    k * (m * gout.data()[j] - dbeta[ci] - saved.xhat.data()[j] * dgamma[ci]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Backward of the running-statistics (affine) normalization.
pub(crate) fn batchnorm_eval_backward<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    gout: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, s) = channel_view(gout.shape());
    let mut dx = Tensor::zeros(gout.shape());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for i in 0..n {
        for ci in 0..c {
            let base = (i * c + ci) * s;
            for j in base..base + s {
                let g = gout.data()[j];
                dx.data_mut()[j] = g * gamma[ci] * inv_std[ci];
                dgamma[ci] += g * (x.data()[j] - mean[ci]) * inv_std[ci];
                dbeta[ci] += g;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// `y = x · Wᵀ + b` with `W` stored `[out, in]`.
pub(crate) fn dense_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let n = x.batch();
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let mut y = Tensor::zeros(&[n, out_f]);
    for row in y.data_mut().chunks_mut(out_f) {
        row.copy_from_slice(b.data());
    }
    mat::mul_a_bt_acc(n, in_f, out_f, x.data(), w.data(), y.data_mut());
    y
}

pub(crate) fn dense_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gout: &Tensor<T>,
    want_params: bool,
) -> ConvGrads<T> {
    let n = x.batch();
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let mut dx = Tensor::zeros(x.shape());
    mat::mul_acc(n, out_f, in_f, gout.data(), w.data(), dx.data_mut());
    let (dw, db) = if want_params {
        let mut dw = Tensor::zeros(w.shape());
        mat::mul_at_b_acc(out_f, n, in_f, gout.data(), x.data(), dw.data_mut());
        let mut db = Tensor::zeros(&[out_f]);
        for row in gout.data().chunks(out_f) {
            for (d, &g) in db.data_mut().iter_mut().zip(row) {
                *d += g;
            }
        }
        (Some(dw), Some(db))
    } else {
        (None, None)
    };
    ConvGrads { dx, dw, db }
}

pub(crate) fn softmax_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let k = x.item_len();
    let mut y = x.clone();
    for row in y.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Real>(y: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let k = y.item_len();
    let mut dx = Tensor::zeros(y.shape());
    for ((yr, gr), dr) in y
        .data()
        .chunks(k)
        .zip(gout.data().chunks(k))
        .zip(dx.data_mut().chunks_mut(k))
    {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &g) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Concatenation along axis 1.
pub(crate) fn concat_forward<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let n = parts[0].batch();
    let mut shape = parts[0].shape().to_vec();
    shape[1] = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for i in 0..n {
        for p in parts {
            data.extend_from_slice(p.item(i));
        }
    }
    Tensor::from_vec(&shape, data)
}

pub(crate) fn concat_backward<T: Real>(shapes: &[Vec<usize>], gout: &Tensor<T>) -> Vec<Tensor<T>> {
    let n = gout.batch();
    let lens: Vec<usize> = shapes.iter().map(|s| s[1..].iter().product()).collect();
    let mut outs: Vec<Vec<T>> = lens.iter().map(|&l| Vec::with_capacity(l * n)).collect();
    for i in 0..n {
        let item = gout.item(i);
        let mut off = 0;
        for (o, &l) in outs.iter_mut().zip(&lens) {
            o.extend_from_slice(&item[off..off + l]);
            off += l;
        }
    }
    outs.into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::from_vec(s, d))
        .collect()
}

pub(crate) fn global_avg_pool_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = dims4(x);
    let area = T::from_usize(h * w).unwrap();
    let data = x
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() / area)
        .collect();
    Tensor::from_vec(&[n, c], data)
}

pub(crate) fn global_avg_pool_backward<T: Real>(
    input_shape: &[usize],
    gout: &Tensor<T>,
) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let area = T::from_usize(hw).unwrap();
    let mut data = Vec::with_capacity(gout.len() * hw);
    for &g in gout.data() {
        data.extend(std::iter::repeat_n(g / area, hw));
    }
    Tensor::from_vec(input_shape, data)
}

pub(crate) fn upsample_forward<T: Real>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (n, c, h, w) = dims4(x);
    let mut out = Tensor::zeros(&[n, c, h * f, w * f]);
    let wo = w * f;
    for (plane_in, plane_out) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w * f * f)) {
        for y in 0..h * f {
            for xo in 0..wo {
                plane_out[y * wo + xo] = plane_in[(y / f) * w + xo / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward<T: Real>(
    input_shape: &[usize],
    gout: &Tensor<T>,
    f: usize,
) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let wo = w * f;
    let mut dx = Tensor::zeros(input_shape);
    for (plane_g, plane_d) in gout.data().chunks(h * w * f * f).zip(dx.data_mut().chunks_mut(h * w)) {
        for y in 0..h * f {
            for xo in 0..wo {
                plane_d[(y / f) * w + xo / f] += plane_g[y * wo + xo];
            }
        }
    }
    dx
}

pub(crate) fn dims4<T: Real>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}
