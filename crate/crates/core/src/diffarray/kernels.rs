//! Forward and adjoint kernels shared by the tape ops.
//!
//! Everything here is plain slice arithmetic; shape validation happens in
//! the graph layer before these are called.

use crate::error::{Error, Result};

use super::tensor::{numel, Tensor};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// Strides of `shape` laid against `out`, zero along broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + n - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output element with the matching offsets into both operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = aligned_strides(a, out);
    let sb = aligned_strides(b, out);
    // (extent, stride_a, stride_b), outermost first, contiguous runs merged.
    let mut dims: Vec<(usize, usize, usize)> = Vec::new();
    for i in 0..out.len() {
        if out[i] == 1 {
            continue;
        }
        let d = (out[i], sa[i], sb[i]);
        if let Some(p) = dims.last_mut() {
            if p.1 == d.0 * d.1 && p.2 == d.0 * d.2 {
                *p = (p.0 * d.0, d.1, d.2);
                continue;
            }
        }
        dims.push(d);
    }
    let Some(&(inner, ia, ib)) = dims.last() else {
        f(0, 0, 0);
        return;
    };
    let outer = &dims[..dims.len() - 1];
    let mut idx = vec![0usize; outer.len()];
    let (mut oa, mut ob, mut o) = (0usize, 0usize, 0usize);
    loop {
        for j in 0..inner {
            f(o, oa + j * ia, ob + j * ib);
            o += 1;
        }
        let mut k = outer.len();
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            oa += outer[k].1;
            ob += outer[k].2;
            if idx[k] < outer[k].0 {
                break;
            }
            oa -= outer[k].1 * outer[k].0;
            ob -= outer[k].2 * outer[k].0;
            idx[k] = 0;
        }
    }
}

pub(crate) fn broadcast_binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let mut out = vec![0.0; numel(&shape)];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&shape, a.shape(), b.shape(), |o, ia, ib| {
        out[o] = f(ad[ia], bd[ib]);
    });
    Ok(Tensor::from_parts(shape, out))
}

/// Sums `grad` (shaped like the broadcast output) back onto `shape`,
/// weighting each element by `weight(out_index, operand_offset)`.
pub(crate) fn reduce_to(
    grad: &Tensor,
    shape: &[usize],
    weight: impl Fn(usize, usize) -> f64,
) -> Tensor {
    let mut acc = vec![0.0; numel(shape)];
    let g = grad.data();
    for_each_broadcast(grad.shape(), shape, shape, |o, ia, _| {
        acc[ia] += g[o] * weight(o, ia);
    });
    Tensor::from_parts(shape.to_vec(), acc)
}

/// `c = a·b + beta·c` for row-major strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(span(m, k, rsa, csa) <= a.len());
    assert!(span(k, n, rsb, csb) <= b.len());
    assert!(span(m, n, rsc, csc) <= c.len());
    // SAFETY: the asserts above keep every strided access within the slices,
    // and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Geometry of a strided 2D correlation over one image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (size + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
}

/// Output columns `ox` whose source `ox·stride + k − pad` falls inside `0..width`.
fn valid_cols(g: &ConvGeom, k: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(k).div_ceil(g.stride);
    let hi = if g.width + g.pad > k {
        ((g.width + g.pad - k - 1) / g.stride + 1).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (j, v) in line[lo..hi].iter_mut().enumerate() {
                            *v = src[start + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let ncol = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        dst[start..start + hi - lo].iter_mut().zip(line).for_each(|(d, s)| *d += s);
                    } else {
                        for (j, s) in line.iter().enumerate() {
                            dst[start + j * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

/// x: [N, C, H, W], w: [Co, C, kh, kw] → [N, Co, Ho, Wo]
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let n = x.shape()[0];
    let co = w.shape()[0];
    let (rows, ncol) = (g.rows(), g.cols());
    let in_sz = g.channels * g.height * g.width;
    let mut out = vec![0.0; n * co * ncol];
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        im2col(&x.data()[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        let dst = &mut out[b * co * ncol..(b + 1) * co * ncol];
        gemm(co, rows, ncol, w.data(), (rows as isize, 1), &cols, (ncol as isize, 1), 0.0, dst, (ncol as isize, 1));
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * ncol..(o + 1) * ncol].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_parts(vec![n, co, g.out_h, g.out_w], out)
}

pub(crate) struct ConvGrads {
    pub x: Option<Tensor>,
    pub w: Option<Tensor>,
    pub b: Option<Tensor>,
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let n = x.shape()[0];
    let co = w.shape()[0];
    let (rows, ncol) = (g.rows(), g.cols());
    let in_sz = g.channels * g.height * g.width;
    let mut dx = need.0.then(|| vec![0.0; x.len()]);
    let mut dw = need.1.then(|| vec![0.0; w.len()]);
    let mut db = need.2.then(|| vec![0.0; co]);
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let go = &gout.data()[b * co * ncol..(b + 1) * co * ncol];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[b * in_sz..(b + 1) * in_sz], g, &mut cols);
            // dW += gout · colsᵀ
            gemm(co, ncol, rows, go, (ncol as isize, 1), &cols, (1, ncol as isize), 1.0, dw, (rows as isize, 1));
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · gout
            gemm(rows, co, ncol, w.data(), (1, rows as isize), go, (ncol as isize, 1), 0.0, &mut cols, (ncol as isize, 1));
            col2im_add(&cols, g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
        if let Some(db) = db.as_mut() {
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += go[o * ncol..(o + 1) * ncol].iter().sum::<f64>();
            }
        }
    }
    ConvGrads {
        x: dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        w: dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        b: db.map(|d| Tensor::from_parts(vec![co], d)),
    }
}

/// Transposed convolution. x: [N, Ci, H, W], w: [Ci, Co, kh, kw]; `g` describes
/// the adjoint correlation whose *input* image is the output here.
pub(crate) fn conv_transpose2d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: &ConvGeom) -> Tensor {
    let n = x.shape()[0];
    let ci = x.shape()[1];
    let (rows, ncol) = (g.rows(), g.cols());
    let out_sz = g.channels * g.height * g.width;
    let mut out = vec![0.0; n * out_sz];
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let xb = &x.data()[b * ci * ncol..(b + 1) * ci * ncol];
        // cols = Wᵀ · x_b, W viewed as [Ci, rows]
        gemm(rows, ci, ncol, w.data(), (1, rows as isize), xb, (ncol as isize, 1), 0.0, &mut cols, (ncol as isize, 1));
        let dst = &mut out[b * out_sz..(b + 1) * out_sz];
        col2im_add(&cols, g, dst);
        if let Some(bias) = bias {
            let plane = g.height * g.width;
            for (o, &bv) in bias.data().iter().enumerate() {
                dst[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    Tensor::from_parts(vec![n, g.channels, g.height, g.width], out)
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let n = x.shape()[0];
    let ci = x.shape()[1];
    let (rows, ncol) = (g.rows(), g.cols());
    let out_sz = g.channels * g.height * g.width;
    let mut dx = need.0.then(|| vec![0.0; x.len()]);
    let mut dw = need.1.then(|| vec![0.0; w.len()]);
    let mut db = need.2.then(|| vec![0.0; g.channels]);
    let mut cols = vec![0.0; rows * ncol];
    for b in 0..n {
        let go = &gout.data()[b * out_sz..(b + 1) * out_sz];
        if dx.is_some() || dw.is_some() {
            im2col(go, g, &mut cols);
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[b * ci * ncol..(b + 1) * ci * ncol];
            gemm(ci, rows, ncol, w.data(), (rows as isize, 1), &cols, (ncol as isize, 1), 0.0, dst, (ncol as isize, 1));
        }
        if let Some(dw) = dw.as_mut() {
            let xb = &x.data()[b * ci * ncol..(b + 1) * ci * ncol];
            gemm(ci, ncol, rows, xb, (ncol as isize, 1), &cols, (1, ncol as isize), 1.0, dw, (rows as isize, 1));
        }
        if let Some(db) = db.as_mut() {
            let plane = g.height * g.width;
            for (o, acc) in db.iter_mut().enumerate() {
                *acc += go[o * plane..(o + 1) * plane].iter().sum::<f64>();
            }
        }
    }
    ConvGrads {
        x: dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        w: dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        b: db.map(|d| Tensor::from_parts(vec![g.channels], d)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

/// Per-output-index taps `(i0, i1, w1)`; value = (1-w1)·src[i0] + w1·src[i1].
pub(crate) fn resize_taps(input: usize, output: usize, mode: ResizeMode) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| match mode {
            ResizeMode::Nearest => {
                let i = (((d as f64 + 0.5) * ratio).floor() as usize).min(input - 1);
                (i, i, 0.0)
            }
            ResizeMode::Bilinear => {
                let src = ((d as f64 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                (i0, i1, src - i0 as f64)
            }
        })
        .collect()
}

/// Resizes the trailing two axes of a rank-4 tensor.
pub(crate) fn resize(x: &Tensor, out_h: usize, out_w: usize, mode: ResizeMode) -> Tensor {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let ty = resize_taps(h, out_h, mode);
    let tx = resize_taps(w, out_w, mode);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
                let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
                dst[oy * out_w + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::from_parts(vec![s[0], s[1], out_h, out_w], out)
}

pub(crate) fn resize_backward(gout: &Tensor, in_shape: &[usize], mode: ResizeMode) -> Tensor {
    let (planes, h, w) = (in_shape[0] * in_shape[1], in_shape[2], in_shape[3]);
    let (out_h, out_w) = (gout.shape()[2], gout.shape()[3]);
    let ty = resize_taps(h, out_h, mode);
    let tx = resize_taps(w, out_w, mode);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let go = &gout.data()[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = go[oy * out_w + ox];
                dst[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                dst[y0 * w + x1] += gv * (1.0 - wy) * wx;
                dst[y1 * w + x0] += gv * wy * (1.0 - wx);
                dst[y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Splits `shape` around `axis` into (outer, extent, inner) block sizes.
pub(crate) fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn permute(x: &Tensor, perm: &[usize]) -> Tensor {
    let s = x.shape();
    let n = s.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let mut in_strides = vec![1; n];
    for i in (0..n.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * s[i + 1];
    }
    // Strides of the input, ordered as the output axes.
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; x.len()];
    let mut idx = vec![0usize; n];
    let mut off = 0usize;
    let src = x.data();
    for v in out.iter_mut() {
        *v = src[off];
        let mut k = n;
        while k > 0 {
            k -= 1;
            idx[k] += 1;
            off += strides[k];
            if idx[k] < out_shape[k] {
                break;
            }
            off -= strides[k] * out_shape[k];
            idx[k] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
