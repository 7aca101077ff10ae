//! Forward/backward kernels shared by the CNN and ViT.
//!
//! Matrices are row-major slices. Dense weights are stored `[in, out]` so that
//! `y = x W + b`; convolution weights are `[out, in, k, k]`.

use crate::error::{Error, Result};

/// `a (n x k) * b (k x m)`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a (n x k) * b^T` where `b` is `(m x k)`.
pub fn matmul_bt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            out[i * m + j] = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `acc (k x m) += a^T * b` where `a` is `(n x k)` and `b` is `(n x m)`.
pub fn add_matmul_at(acc: &mut [f64], a: &[f64], b: &[f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let br = &b[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in acc[p * m..(p + 1) * m].iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y = x W + b` for `n` rows.
pub fn dense_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, d_in: usize, d_out: usize) -> Vec<f64> {
    let mut y = matmul(x, w, n, d_in, d_out);
    for row in y.chunks_mut(d_out) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    y
}

/// Accumulates weight/bias gradients and returns `dL/dx`.
#[allow(clippy::too_many_arguments)]
pub fn dense_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    n: usize,
    d_in: usize,
    d_out: usize,
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    add_matmul_at(gw, x, dy, n, d_in, d_out);
    for row in dy.chunks(d_out) {
        for (g, v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    matmul_bt(dy, w, n, d_out, d_in)
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Gradient through ReLU given its output.
pub fn relu_backward(out: &[f64], dy: &[f64]) -> Vec<f64> {
    out.iter()
        .zip(dy)
        .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
        .collect()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        softmax_inplace(row);
    }
    out
}

/// Row-wise softmax backward given the softmax output `p`.
pub fn softmax_rows_backward(p: &[f64], dp: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    for ((o, pr), gr) in out.chunks_mut(cols).zip(p.chunks(cols)).zip(dp.chunks(cols)) {
        let s = dot(pr, gr);
        for ((ov, &pv), &gv) in o.iter_mut().zip(pr).zip(gr) {
            *ov = pv * (gv - s);
        }
    }
    out
}

/// Scaled dot-product attention weights `softmax(Q K^T / sqrt(d_k))`.
///
/// `q` and `k` are `(n, d_k)` row-major; the result is `(n, n)` with rows summing to one.
pub fn attention_weights(q: &[f64], k: &[f64], n: usize, d_k: usize) -> Result<Vec<f64>> {
    if d_k == 0 {
        return Err(Error::InvalidArgument("attention key dimension d_k is zero".into()));
    }
    if q.len() != n * d_k || k.len() != n * d_k {
        return Err(Error::ShapeMismatch {
            expected: vec![n, d_k],
            actual: vec![q.len().max(k.len())],
        });
    }
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut s = matmul_bt(q, k, n, d_k, n);
    for v in &mut s {
        *v *= scale;
    }
    for row in s.chunks_mut(n) {
        softmax_inplace(row);
    }
    Ok(s)
}

/// Cache of a layer-norm forward over `n` rows of width `d`.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm_forward(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    d: usize,
) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; n];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[i * d + j] = h;
            y[i * d + j] = h * gamma[j] + beta[j];
        }
    }
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &[f64],
    dy: &[f64],
    d: usize,
    g_gamma: &mut [f64],
    g_beta: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; d];
    for i in 0..n {
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let g = &dy[i * d..(i + 1) * d];
        for j in 0..d {
            g_gamma[j] += g[j] * xh[j];
            g_beta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
        }
        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dxhat_xhat = dot(&dxhat, xh) / d as f64;
        let is = cache.inv_std[i];
        for j in 0..d {
            dx[i * d + j] = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Geometry of a 2-D convolution over a `[channels, height, width]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub out_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn in_len(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_c * self.out_h() * self.out_w()
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kernel * self.kernel
    }
}

/// Convolution of one sample.
pub fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut out = vec![0.0; g.out_len()];
    for o in 0..g.out_c {
        let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
        plane.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.in_c {
            let xin = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            let wk = &w[(o * g.in_c + c) * k * k..(o * g.in_c + c + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let xrow = &xin[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                        let prow = &mut plane[oy * ow..(oy + 1) * ow];
                        for (ox, pv) in prow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                *pv += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv2d_forward`] for one sample: accumulates into `gw`/`gb`, returns `dL/dx`.
pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let k = g.kernel;
    let mut dx = vec![0.0; g.in_len()];
    for o in 0..g.out_c {
        let dplane = &dy[o * oh * ow..(o + 1) * oh * ow];
        gb[o] += dplane.iter().sum::<f64>();
        for c in 0..g.in_c {
            let base = c * g.in_h * g.in_w;
            let widx = (o * g.in_c + c) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = w[widx + ky * k + kx];
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        let row_off = base + iy as usize * g.in_w;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.in_w as isize {
                                let d = dplane[oy * ow + ox];
                                acc += d * x[row_off + ix as usize];
                                dx[row_off + ix as usize] += d * wv;
                            }
                        }
                    }
                    gw[widx + ky * k + kx] += acc;
                }
            }
        }
    }
    dx
}

/// Non-overlapping max pooling of one `[c, h, w]` sample. Returns output and argmax indices.
pub fn maxpool_forward(x: &[f64], c: usize, h: usize, w: usize, size: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / size, w / size);
    let mut out = vec![0.0; c * oh * ow];
    let mut idx = vec![0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = ch * h * w + (oy * size + dy) * w + ox * size + dx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                let o = ch * oh * ow + oy * ow + ox;
                out[o] = best;
                idx[o] = best_i;
            }
        }
    }
    (out, idx)
}

pub fn maxpool_backward(idx: &[usize], dy: &[f64], in_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; in_len];
    for (&i, &g) in idx.iter().zip(dy) {
        dx[i] += g;
    }
    dx
}
