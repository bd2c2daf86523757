//! Stride-1 2-D cross-correlation with zero padding.
//!
//! Kernels are never flipped. Work is split across samples; gradient reductions
//! over the batch are summed in sample order, so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ConvKernel, Dims4, Real, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `(k - 1) / 2` on each side; spatial dims are preserved. Needs odd kernels.
    Same,
    /// Explicit `(pad_h, pad_w)`.
    Explicit(usize, usize),
}

impl Padding {
    pub fn resolve(self, kh: usize, kw: usize) -> Result<(usize, usize)> {
        match self {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::config(format!(
                        "\"same\" padding needs an odd kernel, got {kh}x{kw}"
                    )));
                }
                Ok(((kh - 1) / 2, (kw - 1) / 2))
            }
            Padding::Explicit(ph, pw) => Ok((ph, pw)),
        }
    }
}

/// Output dims of a convolution, or a shape error.
pub fn conv2d_output_dims<T: Real>(x: Dims4, w: &ConvKernel<T>, padding: Padding) -> Result<Dims4> {
    if x.c != w.c_in() {
        return Err(Error::shape(format!(
            "input has {} channels but kernel expects {}",
            x.c,
            w.c_in()
        )));
    }
    let (ph, pw) = padding.resolve(w.kh(), w.kw())?;
    let h = (x.h + 2 * ph).checked_sub(w.kh() - 1);
    let wd = (x.w + 2 * pw).checked_sub(w.kw() - 1);
    match (h, wd) {
        (Some(h), Some(wd)) if h > 0 && wd > 0 => Ok(Dims4::new(x.n, w.c_out(), h, wd)),
        _ => Err(Error::shape(format!(
            "kernel {}x{} larger than padded input {}x{}",
            w.kh(),
            w.kw(),
            x.h + 2 * ph,
            x.w + 2 * pw
        ))),
    }
}

pub fn conv2d_forward<T: Real>(
    x: &Tensor4<T>,
    w: &ConvKernel<T>,
    bias: Option<&[T]>,
    padding: Padding,
) -> Result<Tensor4<T>> {
    let od = conv2d_output_dims(x.dims(), w, padding)?;
    let mut out = Tensor4::zeros(od);
    if let Some(b) = bias {
        if b.len() != w.c_out() {
            return Err(Error::shape(format!(
                "bias length {} for {} output channels",
                b.len(),
                w.c_out()
            )));
        }
        for n in 0..od.n {
            for (co, &bv) in b.iter().enumerate() {
                out.plane_mut(n, co).fill(bv);
            }
        }
    }
    conv2d_accumulate(x, w, padding, &mut out)?;
    Ok(out)
}

/// Adds `x ⊛ w` into `out`, which must already have the output dims.
pub fn conv2d_accumulate<T: Real>(
    x: &Tensor4<T>,
    w: &ConvKernel<T>,
    padding: Padding,
    out: &mut Tensor4<T>,
) -> Result<()> {
    let od = conv2d_output_dims(x.dims(), w, padding)?;
    if out.dims() != od {
        return Err(Error::shape(format!(
            "accumulator dims {} but convolution yields {od}",
            out.dims()
        )));
    }
    let (ph, pw) = padding.resolve(w.kh(), w.kw())?;
    let xd = x.dims();
    let per_sample = od.c * od.plane();
    out.data_mut()
        .par_chunks_mut(per_sample)
        .enumerate()
        .for_each(|(n, dst)| {
            let src = x.sample(n);
            forward_sample(src, xd, w, (ph, pw), od, dst);
        });
    Ok(())
}

fn forward_sample<T: Real>(
    src: &[T],
    xd: Dims4,
    w: &ConvKernel<T>,
    (ph, pw): (usize, usize),
    od: Dims4,
    dst: &mut [T],
) {
    let (xp, op) = (xd.plane(), od.plane());
    for co in 0..od.c {
        let out_plane = &mut dst[co * op..(co + 1) * op];
        for ci in 0..xd.c {
            let in_plane = &src[ci * xp..(ci + 1) * xp];
            for ky in 0..w.kh() {
                let (oy0, oy1) = valid_range(od.h, xd.h, ky, ph);
                for kx in 0..w.kw() {
                    let wv = w.at(co, ci, ky, kx);
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(od.w, xd.w, kx, pw);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy + ky - ph;
                        let ix0 = ox0 + kx - pw;
                        let o = &mut out_plane[oy * od.w + ox0..oy * od.w + ox1];
                        let i = &in_plane[iy * xd.w + ix0..iy * xd.w + ix0 + (ox1 - ox0)];
                        for (ov, &iv) in o.iter_mut().zip(i) {
                            *ov = *ov + wv * iv;
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `o` for which `o + k - pad` indexes inside an input of length `len`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (in_len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

pub struct ConvGrads<T> {
    pub grad_x: Tensor4<T>,
    pub grad_w: ConvKernel<T>,
    pub grad_bias: Vec<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor4<T>,
    w: &ConvKernel<T>,
    grad_out: &Tensor4<T>,
    padding: Padding,
) -> Result<ConvGrads<T>> {
    let mut grad_x = Tensor4::zeros(x.dims());
    let mut grad_w = ConvKernel::zeros(w.c_out(), w.c_in(), w.kh(), w.kw());
    let mut grad_bias = vec![T::zero(); w.c_out()];
    conv2d_backward_into(
        x,
        w,
        grad_out,
        padding,
        Some(&mut grad_x),
        Some(grad_w.data_mut()),
        Some(&mut grad_bias),
    )?;
    Ok(ConvGrads {
        grad_x,
        grad_w,
        grad_bias,
    })
}

/// Accumulates whichever gradients are requested into the given buffers.
pub fn conv2d_backward_into<T: Real>(
    x: &Tensor4<T>,
    w: &ConvKernel<T>,
    grad_out: &Tensor4<T>,
    padding: Padding,
    grad_x: Option<&mut Tensor4<T>>,
    grad_w: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) -> Result<()> {
    let od = conv2d_output_dims(x.dims(), w, padding)?;
    if grad_out.dims() != od {
        return Err(Error::shape(format!(
            "grad_out dims {} but forward output is {od}",
            grad_out.dims()
        )));
    }
    let (ph, pw) = padding.resolve(w.kh(), w.kw())?;
    let xd = x.dims();

    if let Some(gb) = grad_bias {
        if gb.len() != od.c {
            return Err(Error::shape("bias gradient length mismatch"));
        }
        for n in 0..od.n {
            for (co, g) in gb.iter_mut().enumerate() {
                *g = *g + grad_out.plane(n, co).iter().copied().sum();
            }
        }
    }

    if let Some(gx) = grad_x {
        if gx.dims() != xd {
            return Err(Error::shape("input gradient dims mismatch"));
        }
        let per_sample = xd.c * xd.plane();
        gx.data_mut()
            .par_chunks_mut(per_sample)
            .enumerate()
            .for_each(|(n, dst)| {
                input_grad_sample(grad_out.sample(n), od, w, (ph, pw), xd, dst);
            });
    }

    if let Some(gw) = grad_w {
        if gw.len() != w.len() {
            return Err(Error::shape("kernel gradient length mismatch"));
        }
        let partials: Vec<Vec<T>> = (0..xd.n)
            .into_par_iter()
            .map(|n| {
                let mut acc = vec![T::zero(); w.len()];
                weight_grad_sample(x.sample(n), xd, grad_out.sample(n), od, w, (ph, pw), &mut acc);
                acc
            })
            .collect();
        for part in &partials {
            for (g, &p) in gw.iter_mut().zip(part) {
                *g = *g + p;
            }
        }
    }
    Ok(())
}

fn input_grad_sample<T: Real>(
    g: &[T],
    od: Dims4,
    w: &ConvKernel<T>,
    (ph, pw): (usize, usize),
    xd: Dims4,
    dst: &mut [T],
) {
    let (xp, op) = (xd.plane(), od.plane());
    for co in 0..od.c {
        let g_plane = &g[co * op..(co + 1) * op];
        for ci in 0..xd.c {
            let in_plane = &mut dst[ci * xp..(ci + 1) * xp];
            for ky in 0..w.kh() {
                let (oy0, oy1) = valid_range(od.h, xd.h, ky, ph);
                for kx in 0..w.kw() {
                    let wv = w.at(co, ci, ky, kx);
                    if wv == T::zero() {
                        continue;
                    }
                    let (ox0, ox1) = valid_range(od.w, xd.w, kx, pw);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy + ky - ph;
                        let ix0 = ox0 + kx - pw;
                        let gi = &g_plane[oy * od.w + ox0..oy * od.w + ox1];
                        let xi = &mut in_plane[iy * xd.w + ix0..iy * xd.w + ix0 + (ox1 - ox0)];
                        for (xv, &gv) in xi.iter_mut().zip(gi) {
                            *xv = *xv + wv * gv;
                        }
                    }
                }
            }
        }
    }
}

fn weight_grad_sample<T: Real>(
    src: &[T],
    xd: Dims4,
    g: &[T],
    od: Dims4,
    w: &ConvKernel<T>,
    (ph, pw): (usize, usize),
    acc: &mut [T],
) {
    let (xp, op) = (xd.plane(), od.plane());
    for co in 0..od.c {
        let g_plane = &g[co * op..(co + 1) * op];
        for ci in 0..xd.c {
            let in_plane = &src[ci * xp..(ci + 1) * xp];
            for ky in 0..w.kh() {
                let (oy0, oy1) = valid_range(od.h, xd.h, ky, ph);
                for kx in 0..w.kw() {
                    let (ox0, ox1) = valid_range(od.w, xd.w, kx, pw);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut s = T::zero();
                    for oy in oy0..oy1 {
                        let iy = oy + ky - ph;
                        let ix0 = ox0 + kx - pw;
                        let gi = &g_plane[oy * od.w + ox0..oy * od.w + ox1];
                        let xi = &in_plane[iy * xd.w + ix0..iy * xd.w + ix0 + (ox1 - ox0)];
                        s = s + gi.iter().zip(xi).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    let i = w.offset(co, ci, ky, kx);
                    acc[i] = acc[i] + s;
                }
            }
        }
    }
}
