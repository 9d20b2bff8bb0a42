use rayon::prelude::*;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn mismatch(reason: String) -> Error {
    Error::ShapeMismatch { layer: "op".into(), reason }
}

/// Output positions `o` with `0 <= o*s + t - p < len`, for tap `t`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, s: usize, t: usize, p: usize) -> std::ops::Range<usize> {
    let lo = if p > t { (p - t).div_ceil(s) } else { 0 };
    let hi = if in_len + p > t { ((in_len + p - t - 1) / s + 1).min(out_len) } else { 0 };
    lo..hi.max(lo)
}

/// Grouped cross-correlation. `wshape` is `[cout, cin/groups, kh, kw]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    wshape: [usize; 4],
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.dims();
    let [cout, cig, kh, kw] = wshape;
    if groups == 0 || cin % groups != 0 || cout % groups != 0 || cig * groups != cin {
        return Err(mismatch(format!("weight {wshape:?} with groups {groups} does not fit {cin} input channels")));
    }
    if w.len() != wshape.iter().product::<usize>() {
        return Err(mismatch(format!("weight has {} values for shape {wshape:?}", w.len())));
    }
    if bias.is_some_and(|b| b.len() != cout) {
        return Err(mismatch("bias length".into()));
    }
    if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(mismatch(format!("kernel {kh}×{kw} larger than padded input {h}×{wd}")));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    let cog = cout / groups;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    out.data_mut().par_chunks_mut(ho * wo).enumerate().for_each(|(plane, dst)| {
        let (b, o) = (plane / cout, plane % cout);
        let g = o / cog;
        if let Some(bias) = bias {
            dst.fill(bias[o]);
        }
        for ic in 0..cig {
            let src = x.plane(b, g * cig + ic);
            for ky in 0..kh {
                let ys = valid_range(ho, h, stride, ky, padding);
                for kx in 0..kw {
                    let wv = w[((o * cig + ic) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    let xs = valid_range(wo, wd, stride, kx, padding);
                    for oy in ys.clone() {
                        let iy = oy * stride + ky - padding;
                        let row = &src[iy * wd..(iy + 1) * wd];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        for ox in xs.clone() {
                            drow[ox] += wv * row[ox * stride + kx - padding];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Dense transposed convolution (the input-gradient of [`conv2d`]).
/// `wshape` is `[cin, cout, kh, kw]`; output size is `(H−1)·s − 2p + k`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    wshape: [usize; 4],
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, cin, h, wd] = x.dims();
    let [wi, cout, kh, kw] = wshape;
    if wi != cin {
        return Err(mismatch(format!("transposed weight {wshape:?} for {cin} input channels")));
    }
    if w.len() != wshape.iter().product::<usize>() {
        return Err(mismatch(format!("weight has {} values for shape {wshape:?}", w.len())));
    }
    if bias.is_some_and(|b| b.len() != cout) {
        return Err(mismatch("bias length".into()));
    }
    if stride == 0 || (h - 1) * stride + kh <= 2 * padding || (wd - 1) * stride + kw <= 2 * padding {
        return Err(mismatch("transposed conv output would be empty".into()));
    }
    let ho = (h - 1) * stride + kh - 2 * padding;
    let wo = (wd - 1) * stride + kw - 2 * padding;
    let mut out = Tensor::zeros([n, cout, ho, wo]);
    out.data_mut().par_chunks_mut(ho * wo).enumerate().for_each(|(plane, dst)| {
        let (b, o) = (plane / cout, plane % cout);
        if let Some(bias) = bias {
            dst.fill(bias[o]);
        }
        for i in 0..cin {
            let src = x.plane(b, i);
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w[((i * cout + o) * kh + ky) * kw + kx];
                    if wv == T::zero() {
                        continue;
                    }
                    for iy in 0..h {
                        let oy = iy * stride + ky;
                        if oy < padding || oy - padding >= ho {
                            continue;
                        }
                        let drow = &mut dst[(oy - padding) * wo..(oy - padding + 1) * wo];
                        for ix in 0..wd {
                            let ox = ix * stride + kx;
                            if ox >= padding && ox - padding < wo {
                                drow[ox - padding] += wv * src[iy * wd + ix];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// `y = x·scale[c] + shift[c]`, in place.
pub fn channel_affine<T: Scalar>(x: &mut Tensor<T>, scale: Option<&[T]>, shift: &[T]) {
    let [_, c, h, w] = x.dims();
    for (plane, chunk) in x.data_mut().chunks_mut(h * w).enumerate() {
        let ch = plane % c;
        let s = scale.map_or(T::one(), |s| s[ch]);
        for v in chunk {
            *v = *v * s + shift[ch];
        }
    }
}

pub fn relu6<T: Scalar>(x: &mut Tensor<T>) {
    let six = T::of(6.0);
    for v in x.data_mut() {
        *v = v.max(T::zero()).min(six);
    }
}

/// Concatenate along channels.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, h, w] = a.dims();
    let [nb, cb, hb, wb] = b.dims();
    if (n, h, w) != (nb, hb, wb) {
        return Err(mismatch(format!("concat of {:?} and {:?}", a.dims(), b.dims())));
    }
    let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
    for i in 0..n {
        for c in 0..ca {
            data.extend_from_slice(a.plane(i, c));
        }
        for c in 0..cb {
            data.extend_from_slice(b.plane(i, c));
        }
    }
    Tensor::from_vec([n, ca + cb, h, w], data)
}

pub fn add_in_place<T: Scalar>(x: &mut Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(mismatch(format!("residual add of {:?} and {:?}", x.dims(), y.dims())));
    }
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
    Ok(())
}
