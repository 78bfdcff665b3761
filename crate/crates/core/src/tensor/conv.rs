//! Cross-correlation (im2col + GEMM) and max-pooling kernels.
//!
//! 1D inputs `[N,C,L]` are handled as 2D inputs with a unit height.

use serde::{Deserialize, Serialize};

use super::tape::{gemm_nn, gemm_nt, gemm_tn};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvDims {
    One,
    Two,
}

/// Convolution geometry: dimensionality, stride and zero padding (same on every spatial axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub dims: ConvDims,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn d1(stride: usize, padding: usize) -> Self {
        Self { dims: ConvDims::One, stride, padding }
    }

    pub fn d2(stride: usize, padding: usize) -> Self {
        Self { dims: ConvDims::Two, stride, padding }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub dims: ConvDims,
    pub window: usize,
    pub stride: usize,
}

impl PoolSpec {
    pub fn d1(window: usize, stride: usize) -> Self {
        Self { dims: ConvDims::One, window, stride }
    }

    pub fn d2(window: usize, stride: usize) -> Self {
        Self { dims: ConvDims::Two, window, stride }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvGeom {
    dims: ConvDims,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

fn out_extent(input: usize, pad: usize, k: usize, stride: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

impl ConvGeom {
    pub(crate) fn new(xs: &[usize], ws: &[usize], spec: ConvSpec) -> Result<Self> {
        if spec.stride == 0 {
            return Err(dim_err("conv", "stride must be positive"));
        }
        let (n, c, h, w, o, wc, kh, kw, sh, ph) = match spec.dims {
            ConvDims::One => {
                if xs.len() != 3 || ws.len() != 3 {
                    return Err(dim_err("conv", format!("1D conv expects [N,C,L] and [O,C,k], got {xs:?} and {ws:?}")));
                }
                (xs[0], xs[1], 1, xs[2], ws[0], ws[1], 1, ws[2], 1, 0)
            }
            ConvDims::Two => {
                if xs.len() != 4 || ws.len() != 4 {
                    return Err(dim_err("conv", format!("2D conv expects [N,C,H,W] and [O,C,kh,kw], got {xs:?} and {ws:?}")));
                }
                (xs[0], xs[1], xs[2], xs[3], ws[0], ws[1], ws[2], ws[3], spec.stride, spec.padding)
            }
        };
        if c != wc {
            return Err(dim_err("conv", format!("input has {c} channels, kernel expects {wc}")));
        }
        let (sw, pw) = (spec.stride, spec.padding);
        let oh = out_extent(h, ph, kh, sh);
        let ow = out_extent(w, pw, kw, sw);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(dim_err("conv", format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {})", spec.padding)));
        };
        Ok(Self { dims: spec.dims, n, c, h, w, o, kh, kw, sh, sw, ph, pw, oh, ow })
    }

    pub(crate) fn out_shape(&self) -> Vec<usize> {
        match self.dims {
            ConvDims::One => vec![self.n, self.o, self.ow],
            ConvDims::Two => vec![self.n, self.o, self.oh, self.ow],
        }
    }

    /// Output index range along one axis for which `o*stride + k - pad` lies in `[0, extent)`.
    fn valid(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
        // smallest o with o*stride + k >= pad
        let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
        // largest o with o*stride + k - pad <= extent - 1
        let hi = if extent + pad > k { ((extent + pad - 1 - k) / stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfolds image `n` into `cols: [C·kh·kw, oh·ow]` (zeros where the kernel hits padding).
fn im2col<T: Scalar>(x: &[T], n: usize, g: &ConvGeom, cols: &mut [T]) {
    let plane_in = g.h * g.w;
    let p = g.oh * g.ow;
    for c in 0..g.c {
        let src = &x[(n * g.c + c) * plane_in..][..plane_in];
        for ki in 0..g.kh {
            let (oy0, oy1) = ConvGeom::valid(g.oh, g.h, ki, g.sh, g.ph);
            for kj in 0..g.kw {
                let (ox0, ox1) = ConvGeom::valid(g.ow, g.w, kj, g.sw, g.pw);
                let dst = &mut cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                // only the padding needs zeros; everything else is overwritten
                dst[..oy0 * g.ow].fill(T::zero());
                dst[oy1.max(oy0) * g.ow..].fill(T::zero());
                for oy in oy0..oy1 {
                    let row = &src[(oy * g.sh + ki - g.ph) * g.w..][..g.w];
                    let drow = &mut dst[oy * g.ow..][..g.ow];
                    drow[..ox0].fill(T::zero());
                    drow[ox1.max(ox0)..].fill(T::zero());
                    if g.sw == 1 {
                        let ix0 = ox0 + kj - g.pw;
                        drow[ox0..ox1].copy_from_slice(&row[ix0..ix0 + (ox1 - ox0)]);
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox] = row[ox * g.sw + kj - g.pw];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the input gradient of image `n`.
fn col2im<T: Scalar>(cols: &[T], n: usize, g: &ConvGeom, gx: &mut [T]) {
    let plane_in = g.h * g.w;
    let p = g.oh * g.ow;
    for c in 0..g.c {
        let dst = &mut gx[(n * g.c + c) * plane_in..][..plane_in];
        for ki in 0..g.kh {
            let (oy0, oy1) = ConvGeom::valid(g.oh, g.h, ki, g.sh, g.ph);
            for kj in 0..g.kw {
                let (ox0, ox1) = ConvGeom::valid(g.ow, g.w, kj, g.sw, g.pw);
                let src = &cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in oy0..oy1 {
                    let drow = &mut dst[(oy * g.sh + ki - g.ph) * g.w..][..g.w];
                    let srow = &src[oy * g.ow..][..g.ow];
                    if g.sw == 1 {
                        let ix0 = ox0 + kj - g.pw;
                        for (d, &v) in drow[ix0..ix0 + (ox1 - ox0)].iter_mut().zip(&srow[ox0..ox1]) {
                            *d += v;
                        }
                    } else {
                        for ox in ox0..ox1 {
                            drow[ox * g.sw + kj - g.pw] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

fn col_len(g: &ConvGeom) -> usize {
    g.c * g.kh * g.kw * g.oh * g.ow
}

pub(crate) fn conv_forward<T: Scalar>(x: &[T], wt: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.oh * g.ow;
    let ck = g.c * g.kh * g.kw;
    let mut out = vec![T::zero(); g.n * g.o * p];
    let mut cols = vec![T::zero(); col_len(g)];
    for n in 0..g.n {
        im2col(x, n, g, &mut cols);
        gemm_nn(wt, &cols, &mut out[n * g.o * p..][..g.o * p], g.o, ck, p);
    }
    out
}

pub(crate) fn conv_backward_input<T: Scalar>(gy: &[T], wt: &[T], gx: &mut [T], g: &ConvGeom) {
    let p = g.oh * g.ow;
    let ck = g.c * g.kh * g.kw;
    let mut cols = vec![T::zero(); col_len(g)];
    for n in 0..g.n {
        cols.fill(T::zero());
        gemm_tn(wt, &gy[n * g.o * p..][..g.o * p], &mut cols, g.o, ck, p);
        col2im(&cols, n, g, gx);
    }
}

pub(crate) fn conv_backward_weight<T: Scalar>(gy: &[T], x: &[T], gw: &mut [T], g: &ConvGeom) {
    let p = g.oh * g.ow;
    let ck = g.c * g.kh * g.kw;
    let mut cols = vec![T::zero(); col_len(g)];
    for n in 0..g.n {
        im2col(x, n, g, &mut cols);
        gemm_nt(&gy[n * g.o * p..][..g.o * p], &cols, gw, g.o, p, ck);
    }
}

/// Returns (output shape, values, flat source index of each output's max).
pub(crate) fn max_pool_forward<T: Scalar>(x: &Tensor<T>, spec: PoolSpec) -> Result<(Vec<usize>, Vec<T>, Vec<usize>)> {
    if spec.window == 0 || spec.stride == 0 {
        return Err(dim_err("max_pool", "window and stride must be positive"));
    }
    let xs = x.shape();
    let (planes, h, w, kh) = match spec.dims {
        ConvDims::One if xs.len() == 3 => (xs[0] * xs[1], 1, xs[2], 1),
        ConvDims::Two if xs.len() == 4 => (xs[0] * xs[1], xs[2], xs[3], spec.window),
        _ => return Err(dim_err("max_pool", format!("unsupported input shape {xs:?} for {:?}", spec.dims))),
    };
    let sh = if kh == 1 { 1 } else { spec.stride };
    let (Some(oh), Some(ow)) = (out_extent(h, 0, kh, sh), out_extent(w, 0, spec.window, spec.stride)) else {
        return Err(dim_err("max_pool", format!("window {} larger than input {h}x{w}", spec.window)));
    };
    let data = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut bi = 0;
                for ki in 0..kh {
                    for kj in 0..spec.window {
                        let idx = base + (oy * sh + ki) * w + ox * spec.stride + kj;
                        if data[idx] > best {
                            best = data[idx];
                            bi = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    let shape = match spec.dims {
        ConvDims::One => vec![xs[0], xs[1], ow],
        ConvDims::Two => vec![xs[0], xs[1], oh, ow],
    };
    Ok((shape, out, arg))
}
