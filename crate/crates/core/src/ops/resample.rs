//! Adaptive average pooling and bilinear resizing over the trailing two axes.
//!
//! Both work on a flat buffer of `planes` consecutive `in_h x in_w` planes.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Half-open source window `[start, end)` for adaptive output cell `i`.
pub fn adaptive_window(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = (i * in_len) / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end)
}

pub fn check_pool(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("avg_pool output size must be at least 1x1"));
    }
    if out_h > in_h || out_w > in_w {
        return Err(Error::invalid(format!(
            "avg_pool cannot enlarge {in_h}x{in_w} to {out_h}x{out_w}"
        )));
    }
    Ok(())
}

pub fn avg_pool<T: Scalar>(x: &[T], planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
        for oy in 0..out_h {
            let (y0, y1) = adaptive_window(oy, in_h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_window(ox, in_w, out_w);
                let mut acc = T::zero();
                for y in y0..y1 {
                    acc += src[y * in_w + x0..y * in_w + x1].iter().copied().sum::<T>();
                }
                out[(p * out_h + oy) * out_w + ox] = acc / T::of(((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(dy: &[T], planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); planes * in_h * in_w];
    for p in 0..planes {
        let dst = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for oy in 0..out_h {
            let (y0, y1) = adaptive_window(oy, in_h, out_h);
            for ox in 0..out_w {
                let (x0, x1) = adaptive_window(ox, in_w, out_w);
                let share = dy[(p * out_h + oy) * out_w + ox] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    dst[y * in_w + x0..y * in_w + x1].iter_mut().for_each(|v| *v += share);
                }
            }
        }
    }
    dx
}

/// Source taps `(lo, hi, frac)` for each output coordinate under the
/// half-pixel (align-corners = false) convention.
pub fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn check_resize(out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize output size must be at least 1x1"));
    }
    Ok(())
}

pub fn bilinear<T: Scalar>(x: &[T], planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &x[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let top = src[y0 * in_w + x0] * (T::one() - fx) + src[y0 * in_w + x1] * fx;
                let bot = src[y1 * in_w + x0] * (T::one() - fx) + src[y1 * in_w + x1] * fx;
                out[(p * out_h + oy) * out_w + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(dy: &[T], planes: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Vec<T> {
    let ty = bilinear_taps(in_h, out_h);
    let tx = bilinear_taps(in_w, out_w);
    let mut dx = vec![T::zero(); planes * in_h * in_w];
    for p in 0..planes {
        let dst = &mut dx[p * in_h * in_w..(p + 1) * in_h * in_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let g = dy[(p * out_h + oy) * out_w + ox];
                dst[y0 * in_w + x0] += g * (T::one() - fy) * (T::one() - fx);
                dst[y0 * in_w + x1] += g * (T::one() - fy) * fx;
                dst[y1 * in_w + x0] += g * fy * (T::one() - fx);
                dst[y1 * in_w + x1] += g * fy * fx;
            }
        }
    }
    dx
}
