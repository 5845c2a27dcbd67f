//! Raw numerical kernels: convolution, pooling, resampling, softmax.
//!
//! Everything here is a pure function from tensors to tensors; the tape in
//! [`crate::tape`] wires forward and backward kernels together. Summation
//! order inside `conv2d` is fixed (bias first, then channel-major over the
//! filter window) so results are reproducible run to run.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// How a convolution connects input channels to output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Every input channel feeds every output channel. Weight `[D,C,P,Q]`.
    Full,
    /// Channel i feeds only channel i (requires C == D). Weight `[C,P,Q]`.
    Depthwise,
    /// Depthwise with one filter shared across channels. Weight `[1,P,Q]`.
    DepthwiseShared,
}

pub struct ConvDims {
    pub in_channels: usize,
    pub out_channels: usize,
    pub filter_h: usize,
    pub filter_w: usize,
    pub height: usize,
    pub width: usize,
}

pub fn conv_dims<S: Scalar>(
    input: &TensorBase<S>,
    weight: &TensorBase<S>,
    kind: ConvKind,
) -> Result<ConvDims> {
    let ishape = input.shape();
    if ishape.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input must be [C,H,W], got {:?}",
            ishape
        )));
    }
    let (c, h, w) = (ishape[0], ishape[1], ishape[2]);
    let wshape = weight.shape();
    let (d, wc, p, q) = match kind {
        ConvKind::Full => {
            if wshape.len() != 4 {
                return Err(Error::ShapeMismatch(format!(
                    "full conv weight must be [D,C,P,Q], got {:?}",
                    wshape
                )));
            }
            (wshape[0], wshape[1], wshape[2], wshape[3])
        }
        ConvKind::Depthwise => {
            if wshape.len() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "depthwise conv weight must be [C,P,Q], got {:?}",
                    wshape
                )));
            }
            (wshape[0], wshape[0], wshape[1], wshape[2])
        }
        ConvKind::DepthwiseShared => {
            if wshape.len() != 3 || wshape[0] != 1 {
                return Err(Error::ShapeMismatch(format!(
                    "shared depthwise conv weight must be [1,P,Q], got {:?}",
                    wshape
                )));
            }
            (c, c, wshape[1], wshape[2])
        }
    };
    if wc != c {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input has {} channels but weight expects {}",
            c, wc
        )));
    }
    if p % 2 == 0 || q % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d filter size must be odd, got {}x{}",
            p, q
        )));
    }
    Ok(ConvDims { in_channels: c, out_channels: d, filter_h: p, filter_w: q, height: h, width: w })
}

/// `out[y,x] += w * in[y+dy, x+dx]` over the in-bounds region.
#[inline]
fn axpy_shifted<S: Scalar>(
    out: &mut [S],
    inp: &[S],
    w: S,
    dy: isize,
    dx: isize,
    h: usize,
    width: usize,
) {
    let y0 = (-dy).max(0) as usize;
    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = ((width as isize - dx).min(width as isize)).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let src_y = (y as isize + dy) as usize;
        let o = &mut out[y * width + x0..y * width + x1];
        let i = &inp[src_y * width + (x0 as isize + dx) as usize..];
        for (ov, iv) in o.iter_mut().zip(i) {
            *ov += w * *iv;
        }
    }
}

/// Dot product of `a[y,x]` with `b[y+dy, x+dx]` over the in-bounds region.
#[inline]
fn dot_shifted<S: Scalar>(a: &[S], b: &[S], dy: isize, dx: isize, h: usize, width: usize) -> S {
    let y0 = (-dy).max(0) as usize;
    let y1 = ((h as isize - dy).min(h as isize)).max(0) as usize;
    let x0 = (-dx).max(0) as usize;
    let x1 = ((width as isize - dx).min(width as isize)).max(0) as usize;
    let mut acc = S::zero();
    if x0 >= x1 {
        return acc;
    }
    for y in y0..y1 {
        let src_y = (y as isize + dy) as usize;
        let av = &a[y * width + x0..y * width + x1];
        let bv = &b[src_y * width + (x0 as isize + dx) as usize..];
        acc += av.iter().zip(bv).map(|(&x, &y)| x * y).sum::<S>();
    }
    acc
}

fn weight_offset(kind: ConvKind, d: usize, c: usize, cdim: usize, p: usize, q: usize) -> usize {
    match kind {
        ConvKind::Full => (d * cdim + c) * p * q,
        ConvKind::Depthwise => d * p * q,
        ConvKind::DepthwiseShared => 0,
    }
}

/// "Same" zero-padded dilated 2-D correlation.
pub fn conv2d_forward<S: Scalar>(
    input: &TensorBase<S>,
    weight: &TensorBase<S>,
    bias: Option<&TensorBase<S>>,
    dilation: usize,
    kind: ConvKind,
) -> Result<TensorBase<S>> {
    if dilation == 0 {
        return Err(Error::InvalidArgument("conv2d dilation must be positive".into()));
    }
    let dims = conv_dims(input, weight, kind)?;
    let ConvDims { in_channels: c, out_channels: d, filter_h: p, filter_w: q, height: h, width: w } =
        dims;
    if let Some(b) = bias {
        if b.shape() != [d] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias must be [{}], got {:?}",
                d,
                b.shape()
            )));
        }
    }
    let mut out = TensorBase::zeros(&[d, h, w]);
    let plane = h * w;
    let idata = input.data();
    let wdata = weight.data();
    let odata = out.data_mut();
    for od in 0..d {
        let out_plane = &mut odata[od * plane..(od + 1) * plane];
        if let Some(b) = bias {
            let bv = b.data()[od];
            out_plane.iter_mut().for_each(|v| *v = bv);
        }
        let channels = match kind {
            ConvKind::Full => 0..c,
            _ => od..od + 1,
        };
        for ic in channels {
            let in_plane = &idata[ic * plane..(ic + 1) * plane];
            let woff = weight_offset(kind, od, ic, c, p, q);
            for i in 0..p {
                let dy = dilation as isize * (i as isize - (p / 2) as isize);
                for j in 0..q {
                    let dx = dilation as isize * (j as isize - (q / 2) as isize);
                    let wv = wdata[woff + i * q + j];
                    axpy_shifted(out_plane, in_plane, wv, dy, dx, h, w);
                }
            }
        }
    }
    Ok(out)
}

pub struct ConvGrads<S> {
    pub input: TensorBase<S>,
    pub weight: TensorBase<S>,
    pub bias: Option<TensorBase<S>>,
}

pub fn conv2d_backward<S: Scalar>(
    input: &TensorBase<S>,
    weight: &TensorBase<S>,
    has_bias: bool,
    dilation: usize,
    kind: ConvKind,
    out_grad: &TensorBase<S>,
) -> Result<ConvGrads<S>> {
    let dims = conv_dims(input, weight, kind)?;
    let ConvDims { in_channels: c, out_channels: d, filter_h: p, filter_w: q, height: h, width: w } =
        dims;
    let plane = h * w;
    let mut in_grad = TensorBase::zeros(input.shape());
    let mut w_grad = TensorBase::zeros(weight.shape());
    let mut b_grad = if has_bias { Some(TensorBase::zeros(&[d])) } else { None };
    let idata = input.data();
    let wdata = weight.data();
    let gdata = out_grad.data();
    for od in 0..d {
        let g_plane = &gdata[od * plane..(od + 1) * plane];
        if let Some(bg) = b_grad.as_mut() {
            bg.data_mut()[od] = g_plane.iter().copied().sum();
        }
        let channels = match kind {
            ConvKind::Full => 0..c,
            _ => od..od + 1,
        };
        for ic in channels {
            let woff = weight_offset(kind, od, ic, c, p, q);
            for i in 0..p {
                let dy = dilation as isize * (i as isize - (p / 2) as isize);
                for j in 0..q {
                    let dx = dilation as isize * (j as isize - (q / 2) as isize);
                    let in_plane = &idata[ic * plane..(ic + 1) * plane];
                    // d/dweight: correlate out_grad with the shifted input.
                    let wg = dot_shifted(g_plane, in_plane, dy, dx, h, w);
                    w_grad.data_mut()[woff + i * q + j] += wg;
                    // d/dinput: scatter out_grad back through the shift.
                    let wv = wdata[woff + i * q + j];
                    let ig_plane = &mut in_grad.data_mut()[ic * plane..(ic + 1) * plane];
                    axpy_shifted(ig_plane, g_plane, wv, -dy, -dx, h, w);
                }
            }
        }
    }
    Ok(ConvGrads { input: in_grad, weight: w_grad, bias: b_grad })
}

/// 2x2 average pooling. Rejects odd spatial dimensions.
pub fn down2<S: Scalar>(input: &TensorBase<S>) -> Result<TensorBase<S>> {
    let sh = input.shape();
    if sh.len() != 3 {
        return Err(Error::ShapeMismatch(format!("down2 input must be [C,H,W], got {:?}", sh)));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidArgument(format!("down2 requires even dims, got {}x{}", h, w)));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::of(0.25);
    let mut out = TensorBase::zeros(&[c, oh, ow]);
    let idata = input.data();
    let odata = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let base = ch * h * w + 2 * y * w + 2 * x;
                odata[ch * oh * ow + y * ow + x] =
                    (idata[base] + idata[base + 1] + idata[base + w] + idata[base + w + 1]) * quarter;
            }
        }
    }
    Ok(out)
}

pub fn down2_backward<S: Scalar>(in_shape: &[usize], out_grad: &TensorBase<S>) -> TensorBase<S> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::of(0.25);
    let mut in_grad = TensorBase::zeros(in_shape);
    let gdata = out_grad.data();
    let idata = in_grad.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let g = gdata[ch * oh * ow + y * ow + x] * quarter;
                let base = ch * h * w + 2 * y * w + 2 * x;
                idata[base] += g;
                idata[base + 1] += g;
                idata[base + w] += g;
                idata[base + w + 1] += g;
            }
        }
    }
    in_grad
}

/// Interpolation stencil for one output coordinate of the x2 bilinear
/// upsampling with half-pixel centers: source position (y+0.5)/2 - 0.5,
/// clamped at the borders.
#[inline]
fn up2_taps(y: usize, src_len: usize) -> (usize, usize, f64) {
    let v = (y as f64 + 0.5) / 2.0 - 0.5;
    let v = v.clamp(0.0, (src_len - 1) as f64);
    let lo = v.floor() as usize;
    let hi = (lo + 1).min(src_len - 1);
    (lo, hi, v - lo as f64)
}

/// Bilinear x2 upsampling with half-pixel centers.
pub fn up2<S: Scalar>(input: &TensorBase<S>) -> Result<TensorBase<S>> {
    let sh = input.shape();
    if sh.len() != 3 {
        return Err(Error::ShapeMismatch(format!("up2 input must be [C,H,W], got {:?}", sh)));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = TensorBase::zeros(&[c, oh, ow]);
    let idata = input.data();
    let odata = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            let (ylo, yhi, fy) = up2_taps(y, h);
            let fy = S::of(fy);
            for x in 0..ow {
                let (xlo, xhi, fx) = up2_taps(x, w);
                let fx = S::of(fx);
                let p = ch * h * w;
                let one = S::one();
                let v = (one - fy) * ((one - fx) * idata[p + ylo * w + xlo] + fx * idata[p + ylo * w + xhi])
                    + fy * ((one - fx) * idata[p + yhi * w + xlo] + fx * idata[p + yhi * w + xhi]);
                odata[ch * oh * ow + y * ow + x] = v;
            }
        }
    }
    Ok(out)
}

pub fn up2_backward<S: Scalar>(in_shape: &[usize], out_grad: &TensorBase<S>) -> TensorBase<S> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (2 * h, 2 * w);
    let mut in_grad = TensorBase::zeros(in_shape);
    let gdata = out_grad.data();
    let idata = in_grad.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            let (ylo, yhi, fy) = up2_taps(y, h);
            let fy = S::of(fy);
            for x in 0..ow {
                let (xlo, xhi, fx) = up2_taps(x, w);
                let fx = S::of(fx);
                let g = gdata[ch * oh * ow + y * ow + x];
                let p = ch * h * w;
                let one = S::one();
                idata[p + ylo * w + xlo] += (one - fy) * (one - fx) * g;
                idata[p + ylo * w + xhi] += (one - fy) * fx * g;
                idata[p + yhi * w + xlo] += fy * (one - fx) * g;
                idata[p + yhi * w + xhi] += fy * fx * g;
            }
        }
    }
    in_grad
}

/// Per-pixel softmax over the channel axis of `[S,M,N]`, stabilized by max
/// subtraction.
pub fn softmax_channels<S: Scalar>(input: &TensorBase<S>) -> Result<TensorBase<S>> {
    let sh = input.shape();
    if sh.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "softmax_channels input must be [S,M,N], got {:?}",
            sh
        )));
    }
    let (k, h, w) = (sh[0], sh[1], sh[2]);
    let plane = h * w;
    let mut out = TensorBase::zeros(sh);
    let idata = input.data();
    let odata = out.data_mut();
    for px in 0..plane {
        let mut maxv = idata[px];
        for s in 1..k {
            let v = idata[s * plane + px];
            if v > maxv {
                maxv = v;
            }
        }
        let mut total = S::zero();
        for s in 0..k {
            let e = (idata[s * plane + px] - maxv).exp();
            odata[s * plane + px] = e;
            total += e;
        }
        for s in 0..k {
            odata[s * plane + px] /= total;
        }
    }
    Ok(out)
}

/// Jacobian-vector product of softmax: `dlogit = p * (g - <g, p>)` per pixel.
pub fn softmax_channels_backward<S: Scalar>(
    probs: &TensorBase<S>,
    out_grad: &TensorBase<S>,
) -> TensorBase<S> {
    let sh = probs.shape();
    let (k, h, w) = (sh[0], sh[1], sh[2]);
    let plane = h * w;
    let mut in_grad = TensorBase::zeros(sh);
    let pdata = probs.data();
    let gdata = out_grad.data();
    let idata = in_grad.data_mut();
    for px in 0..plane {
        let mut dot = S::zero();
        for s in 0..k {
            dot += gdata[s * plane + px] * pdata[s * plane + px];
        }
        for s in 0..k {
            idata[s * plane + px] = pdata[s * plane + px] * (gdata[s * plane + px] - dot);
        }
    }
    in_grad
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}
