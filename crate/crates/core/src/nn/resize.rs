//! Bilinear resampling with corner-aligned sampling grids.
//!
//! Output pixel `o` of an axis of length `n_out` samples the input at
//! `o * (n_in - 1) / (n_out - 1)`, so the corner pixels of input and output
//! coincide. Interpolation uses `a + w * (b - a)`, which reproduces constant
//! signals exactly and never leaves the `[min, max]` range of its inputs.

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    w: f64,
}

fn axis_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = if n_out > 1 {
        (n_in - 1) as f64 / (n_out - 1) as f64
    } else {
        0.0
    };
    (0..n_out)
        .map(|o| {
            let src = o as f64 * scale;
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            Tap { lo, hi, w: src - lo as f64 }
        })
        .collect()
}

#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    a + w * (b - a)
}

/// Resample one `h x w` plane to `ho x wo`.
pub fn resize_plane(src: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), h * w);
    if (h, w) == (ho, wo) {
        return src.to_vec();
    }
    let tx = axis_taps(w, wo);
    let ty = axis_taps(h, ho);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (ox, t) in tx.iter().enumerate() {
            tmp[y * wo + ox] = lerp(row[t.lo], row[t.hi], t.w);
        }
    }
    let mut out = vec![0.0; ho * wo];
    for (oy, t) in ty.iter().enumerate() {
        for ox in 0..wo {
            out[oy * wo + ox] = lerp(tmp[t.lo * wo + ox], tmp[t.hi * wo + ox], t.w);
        }
    }
    out
}

/// Adjoint of [`resize_plane`].
pub fn resize_plane_backward(dout: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Vec<f64> {
    if (h, w) == (ho, wo) {
        return dout.to_vec();
    }
    let tx = axis_taps(w, wo);
    let ty = axis_taps(h, ho);
    let mut dtmp = vec![0.0; h * wo];
    for (oy, t) in ty.iter().enumerate() {
        for ox in 0..wo {
            let g = dout[oy * wo + ox];
            dtmp[t.lo * wo + ox] += (1.0 - t.w) * g;
            dtmp[t.hi * wo + ox] += t.w * g;
        }
    }
    let mut dsrc = vec![0.0; h * w];
    for y in 0..h {
        for (ox, t) in tx.iter().enumerate() {
            let g = dtmp[y * wo + ox];
            dsrc[y * w + t.lo] += (1.0 - t.w) * g;
            dsrc[y * w + t.hi] += t.w * g;
        }
    }
    dsrc
}

/// Resize every plane of a `(B, C, H, W)` tensor.
pub fn resize(x: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (ho, wo) {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for plane in x.data().chunks(h * w) {
        out.extend(resize_plane(plane, h, w, ho, wo));
    }
    Tensor::from_vec(&[b, c, ho, wo], out)
}

pub fn resize_backward(dy: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (b, c, ho, wo) = dy.dims4()?;
    if (h, w) == (ho, wo) {
        return Ok(dy.clone());
    }
    let mut out = Vec::with_capacity(b * c * h * w);
    for plane in dy.data().chunks(ho * wo) {
        out.extend(resize_plane_backward(plane, h, w, ho, wo));
    }
    Tensor::from_vec(&[b, c, h, w], out)
}
