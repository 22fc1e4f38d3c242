//! Raw forward and backward kernels on `Tensor4` values.
//!
//! These functions never touch the tape. They are shared by the recorded
//! ops and by the value-level helpers elsewhere in the crate.

use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_dims(input: Dims, kernel: Dims, geom: ConvGeom) -> Result<Dims> {
    let [b, c, h, w] = input;
    let [o, kc, kh, kw] = kernel;
    if kc != c {
        return Err(Error::shape("conv2d", &input, &kernel));
    }
    if geom.stride == 0 {
        return Err(Error::arg("conv2d", "stride must be at least 1"));
    }
    if h + 2 * geom.pad < kh || w + 2 * geom.pad < kw {
        return Err(Error::shape("conv2d", &input, &kernel));
    }
    let oh = (h + 2 * geom.pad - kh) / geom.stride + 1;
    let ow = (w + 2 * geom.pad - kw) / geom.stride + 1;
    Ok([b, o, oh, ow])
}

/// Output column range `[lo, hi)` whose input tap `ox*stride + k - pad` lies in `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if len + pad > k {
        ((len + pad - k - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

pub fn conv2d_forward(
    input: &Tensor4,
    kernel: &Tensor4,
    bias: Option<&Tensor4>,
    geom: ConvGeom,
) -> Result<Tensor4> {
    let od = conv_out_dims(input.dims(), kernel.dims(), geom)?;
    let [bn, c, h, w] = input.dims();
    let [o, _, kh, kw] = kernel.dims();
    if let Some(bias) = bias {
        if bias.len() != o {
            return Err(Error::shape("conv2d bias", &kernel.dims(), &bias.dims()));
        }
    }
    let [_, _, oh, ow] = od;
    let mut out = Tensor4::zeros(od);
    let inp = input.data();
    let ker = kernel.data();
    let s = geom.stride;
    let p = geom.pad;
    let out_data = out.data_mut();
    for b in 0..bn {
        for oc in 0..o {
            let plane = &mut out_data[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            if let Some(bias) = bias {
                plane.fill(bias.data()[oc]);
            }
            for ic in 0..c {
                let in_plane = &inp[(b * c + ic) * h * w..(b * c + ic + 1) * h * w];
                for ky in 0..kh {
                    let (y_lo, y_hi) = valid_range(ky, p, s, h, oh);
                    for kx in 0..kw {
                        let wv = ker[((oc * c + ic) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x_lo, x_hi) = valid_range(kx, p, s, w, ow);
                        for oy in y_lo..y_hi {
                            let iy = oy * s + ky - p;
                            let in_row = &in_plane[iy * w..(iy + 1) * w];
                            let out_row = &mut plane[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let base = kx as isize - p as isize;
                                for ox in x_lo..x_hi {
                                    out_row[ox] += wv * in_row[(ox as isize + base) as usize];
                                }
                            } else {
                                for ox in x_lo..x_hi {
                                    out_row[ox] += wv * in_row[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradients `(d_input, d_kernel, d_bias)` of a convolution given the upstream gradient.
pub fn conv2d_backward(
    input: &Tensor4,
    kernel: &Tensor4,
    grad_out: &Tensor4,
    geom: ConvGeom,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Tensor4>, Option<Tensor4>, Tensor4) {
    let [bn, c, h, w] = input.dims();
    let [o, _, kh, kw] = kernel.dims();
    let [_, _, oh, ow] = grad_out.dims();
    let s = geom.stride;
    let p = geom.pad;
    let inp = input.data();
    let ker = kernel.data();
    let go = grad_out.data();

    let mut d_bias = Tensor4::zeros([o, 1, 1, 1]);
    for b in 0..bn {
        for oc in 0..o {
            let plane = &go[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            d_bias.data_mut()[oc] += plane.iter().sum::<f64>();
        }
    }

    let mut d_in = want_input.then(|| Tensor4::zeros(input.dims()));
    let mut d_ker = want_kernel.then(|| Tensor4::zeros(kernel.dims()));

    for b in 0..bn {
        for oc in 0..o {
            let g_plane = &go[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow];
            for ic in 0..c {
                let base = (b * c + ic) * h * w;
                for ky in 0..kh {
                    let (y_lo, y_hi) = valid_range(ky, p, s, h, oh);
                    for kx in 0..kw {
                        let (x_lo, x_hi) = valid_range(kx, p, s, w, ow);
                        let k_idx = ((oc * c + ic) * kh + ky) * kw + kx;
                        if let Some(d_in) = d_in.as_mut() {
                            let wv = ker[k_idx];
                            if wv != 0.0 {
                                let din = &mut d_in.data_mut()[base..base + h * w];
                                for oy in y_lo..y_hi {
                                    let iy = oy * s + ky - p;
                                    let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                                    let d_row = &mut din[iy * w..(iy + 1) * w];
                                    for ox in x_lo..x_hi {
                                        d_row[ox * s + kx - p] += wv * g_row[ox];
                                    }
                                }
                            }
                        }
                        if let Some(d_ker) = d_ker.as_mut() {
                            let in_plane = &inp[base..base + h * w];
                            let mut acc = 0.0;
                            for oy in y_lo..y_hi {
                                let iy = oy * s + ky - p;
                                let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                                let in_row = &in_plane[iy * w..(iy + 1) * w];
                                for ox in x_lo..x_hi {
                                    acc += g_row[ox] * in_row[ox * s + kx - p];
                                }
                            }
                            d_ker.data_mut()[k_idx] += acc;
                        }
                    }
                }
            }
        }
    }
    (d_in, d_ker, d_bias)
}

pub fn avg_pool_forward(input: &Tensor4, window: usize) -> Result<Tensor4> {
    let [b, c, h, w] = input.dims();
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::shape("avg_pool2d", &input.dims(), &[window, window]));
    }
    let (oh, ow) = (h / window, w / window);
    let norm = 1.0 / (window * window) as f64;
    let mut out = Tensor4::zeros([b, c, oh, ow]);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..window {
                        for dx in 0..window {
                            acc += input.at(bi, ci, oy * window + dy, ox * window + dx);
                        }
                    }
                    out.set(bi, ci, oy, ox, acc * norm);
                }
            }
        }
    }
    Ok(out)
}

pub fn avg_pool_backward(in_dims: Dims, grad_out: &Tensor4, window: usize) -> Tensor4 {
    let [b, c, h, w] = in_dims;
    let norm = 1.0 / (window * window) as f64;
    let mut d = Tensor4::zeros(in_dims);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    d.set(bi, ci, y, x, grad_out.at(bi, ci, y / window, x / window) * norm);
                }
            }
        }
    }
    d
}

pub fn upsample_forward(input: &Tensor4, factor: usize) -> Tensor4 {
    let [b, c, h, w] = input.dims();
    Tensor4::from_fn([b, c, h * factor, w * factor], |[bi, ci, y, x]| {
        input.at(bi, ci, y / factor, x / factor)
    })
}

pub fn upsample_backward(in_dims: Dims, grad_out: &Tensor4, factor: usize) -> Tensor4 {
    let [_, _, oh, ow] = grad_out.dims();
    let mut d = Tensor4::zeros(in_dims);
    let [b, c, _, _] = in_dims;
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let o = d.offset(bi, ci, y / factor, x / factor);
                    d.data_mut()[o] += grad_out.at(bi, ci, y, x);
                }
            }
        }
    }
    d
}

/// Patch-major layout: patch index `b * gh * gw + py * gw + px`.
pub fn unfold_forward(input: &Tensor4, patch: usize) -> Result<Tensor4> {
    let [b, c, h, w] = input.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("unfold", &input.dims(), &[patch, patch]));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(Tensor4::from_fn(
        [b * gh * gw, c, patch, patch],
        |[n, ci, y, x]| {
            let bi = n / (gh * gw);
            let py = (n / gw) % gh;
            let px = n % gw;
            input.at(bi, ci, py * patch + y, px * patch + x)
        },
    ))
}

/// Inverse of [`unfold_forward`] for a `(batch, C, h, w)` target.
pub fn fold_forward(patches: &Tensor4, batch: usize, h: usize, w: usize) -> Result<Tensor4> {
    let [n, c, ph, pw] = patches.dims();
    if ph == 0 || ph != pw || !h.is_multiple_of(ph) || !w.is_multiple_of(pw) || n != batch * (h / ph) * (w / pw) {
        return Err(Error::shape("fold", &patches.dims(), &[batch, c, h, w]));
    }
    let patch = ph;
    let (gh, gw) = (h / patch, w / patch);
    Ok(Tensor4::from_fn([batch, c, h, w], |[bi, ci, y, x]| {
        let idx = bi * gh * gw + (y / patch) * gw + x / patch;
        patches.at(idx, ci, y % patch, x % patch)
    }))
}

/// Softmax across the channel axis for every `(batch, y, x)` position.
pub fn softmax_channels(input: &Tensor4) -> Tensor4 {
    let [b, c, h, w] = input.dims();
    let mut out = Tensor4::zeros(input.dims());
    let mut buf = vec![0.0; c];
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for (ci, v) in buf.iter_mut().enumerate() {
                    *v = input.at(bi, ci, y, x);
                }
                softmax_in_place(&mut buf);
                for (ci, v) in buf.iter().enumerate() {
                    out.set(bi, ci, y, x, *v);
                }
            }
        }
    }
    out
}

/// Max-subtracted softmax on a slice.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

/// Per-item Gram matrix, output `(B, 1, C, C)` with `G[i][j] = sum_p F[i,p] F[j,p]`.
pub fn gram_forward(input: &Tensor4) -> Tensor4 {
    let [b, c, h, w] = input.dims();
    let n = h * w;
    let data = input.data();
    let mut out = Tensor4::zeros([b, 1, c, c]);
    for bi in 0..b {
        for i in 0..c {
            let ri = &data[(bi * c + i) * n..(bi * c + i + 1) * n];
            for j in i..c {
                let rj = &data[(bi * c + j) * n..(bi * c + j + 1) * n];
                let dot: f64 = ri.iter().zip(rj).map(|(a, b)| a * b).sum();
                out.set(bi, 0, i, j, dot);
                out.set(bi, 0, j, i, dot);
            }
        }
    }
    out
}

pub fn gram_backward(input: &Tensor4, grad_out: &Tensor4) -> Tensor4 {
    let [b, c, h, w] = input.dims();
    let n = h * w;
    let data = input.data();
    let mut d = Tensor4::zeros(input.dims());
    for bi in 0..b {
        for i in 0..c {
            for j in 0..c {
                // dL/dF_i = sum_j (g_ij + g_ji) F_j
                let g = grad_out.at(bi, 0, i, j) + grad_out.at(bi, 0, j, i);
                if g == 0.0 {
                    continue;
                }
                let rj = &data[(bi * c + j) * n..(bi * c + j + 1) * n];
                let di = &mut d.data_mut()[(bi * c + i) * n..(bi * c + i + 1) * n];
                for (dv, fv) in di.iter_mut().zip(rj) {
                    *dv += g * fv;
                }
            }
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_covers_padding() {
        // K=3, pad=1, stride=1, len=4: kx=0 touches ix=-1 at ox=0
        assert_eq!(valid_range(0, 1, 1, 4, 4), (1, 4));
        assert_eq!(valid_range(1, 1, 1, 4, 4), (0, 4));
        assert_eq!(valid_range(2, 1, 1, 4, 4), (0, 3));
        // stride 2, pad 1, len 4, out 2
        assert_eq!(valid_range(0, 1, 2, 4, 2), (1, 2));
        assert_eq!(valid_range(2, 1, 2, 4, 2), (0, 2));
    }

    #[test]
    fn softmax_handles_large_logits() {
        let mut v = [1000.0, 0.0];
        softmax_in_place(&mut v);
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1] >= 0.0 && v[1] < 1e-300);
    }
}
