//! 2-D convolution with stride, zero padding and dilation.
//!
//! The fast path lowers each batch item to a column matrix (im2col) and
//! runs one GEMM. [`conv2d_reference`] is the plain nested-loop definition
//! and is what the fast path is tested against.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub const SAME_3X3: ConvGeometry = ConvGeometry { stride: 1, padding: 1, dilation: 1 };
    pub const POINTWISE: ConvGeometry = ConvGeometry { stride: 1, padding: 0, dilation: 1 };

    pub fn new(stride: usize, padding: usize, dilation: usize) -> Self {
        Self { stride, padding, dilation }
    }

    /// Output length along one spatial axis, or `None` if no kernel placement fits.
    pub fn output_len(&self, input: usize, kernel: usize) -> Option<usize> {
        if self.stride == 0 || self.dilation == 0 || kernel == 0 {
            return None;
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn resolve(input: &[usize], kernel: &[usize], geom: ConvGeometry) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects [N,C,H,W] input and [Cout,Cin,kH,kW] kernel, got {input:?} and {kernel:?}"
            )));
        }
        if geom.stride == 0 || geom.dilation == 0 {
            return Err(Error::invalid("conv2d stride and dilation must be positive"));
        }
        if input[1] != kernel[1] {
            return Err(Error::shape(format!(
                "conv2d input has {} channels but kernel expects {}",
                input[1], kernel[1]
            )));
        }
        let oh = geom.output_len(input[2], kernel[2]);
        let ow = geom.output_len(input[3], kernel[3]);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::shape(format!(
                "conv2d output would be empty for input {input:?}, kernel {kernel:?}, {geom:?}"
            )));
        };
        Ok(Self {
            n: input[0],
            cin: input[1],
            h: input[2],
            w: input[3],
            cout: kernel[0],
            kh: kernel[2],
            kw: kernel[3],
            oh,
            ow,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_item(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn is_pointwise(&self, geom: ConvGeometry) -> bool {
        self.kh == 1 && self.kw == 1 && geom == ConvGeometry::POINTWISE
    }
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d bias must have shape [{cout}], got {:?}",
                b.shape()
            )));
        }
    }
    Ok(())
}

fn im2col<T: Scalar>(x: &[T], d: &ConvDims, g: ConvGeometry, cols: &mut [T]) {
    let plane = d.out_plane();
    for ci in 0..d.cin {
        let src = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    let line = &mut dst[oy * d.ow..(oy + 1) * d.ow];
                    if iy < 0 || iy >= d.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= d.w as isize { T::zero() } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], d: &ConvDims, g: ConvGeometry, dx: &mut [T]) {
    let plane = d.out_plane();
    for ci in 0..d.cin {
        let dst = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (ci * d.kh + ky) * d.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..d.oh {
                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.ow {
                        let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                        if ix >= 0 && ix < d.w as isize {
                            drow[ix as usize] += src[oy * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Fast convolution: `input [N,Cin,H,W]`, `kernel [Cout,Cin,kH,kW]`,
/// optional `bias [Cout]`, producing `[N,Cout,H',W']`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = ConvDims::resolve(input.shape(), kernel.shape(), geom)?;
    check_bias(bias, d.cout)?;
    let plane = d.out_plane();
    let patch = d.patch();
    let pointwise = d.is_pointwise(geom);
    let k = kernel.data();
    let mut out = vec![T::zero(); d.n * d.cout * plane];
    out.par_chunks_mut(d.cout * plane)
        .zip(input.data().par_chunks(d.in_item()))
        .for_each(|(y, x)| {
            let owned;
            let cols: &[T] = if pointwise {
                x
            } else {
                let mut buf = vec![T::zero(); patch * plane];
                im2col(x, &d, geom, &mut buf);
                owned = buf;
                &owned
            };
            T::gemm(d.cout, patch, plane, T::one(), k, (patch, 1), cols, (plane, 1), T::zero(), y, (plane, 1));
            if let Some(b) = bias {
                for (co, row) in y.chunks_mut(plane).enumerate() {
                    let bv = b.data()[co];
                    row.iter_mut().for_each(|v| *v += bv);
                }
            }
        });
    Tensor::new(vec![d.n, d.cout, d.oh, d.ow], out)
}

/// Gradients of [`conv2d`] with respect to its input, kernel and bias.
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    geom: ConvGeometry,
    need: (bool, bool, bool),
) -> Result<ConvGrads<T>> {
    let d = ConvDims::resolve(input.shape(), kernel.shape(), geom)?;
    grad_out.expect_shape(&[d.n, d.cout, d.oh, d.ow])?;
    let (need_x, need_k, need_b) = need;
    let plane = d.out_plane();
    let patch = d.patch();
    let pointwise = d.is_pointwise(geom);
    let k = kernel.data();
    let dy = grad_out.data();

    let mut dx = if need_x { vec![T::zero(); input.numel()] } else { Vec::new() };
    let mut dk = vec![T::zero(); kernel.numel()];

    if need_x || need_k {
        let item = |x: &[T], dy_item: &[T], dx_item: Option<&mut [T]>| -> Option<Vec<T>> {
            let owned;
            let cols: Option<&[T]> = if !need_k {
                None
            } else if pointwise {
                Some(x)
            } else {
                let mut buf = vec![T::zero(); patch * plane];
                im2col(x, &d, geom, &mut buf);
                owned = buf;
                Some(&owned)
            };
            if let Some(dx_item) = dx_item {
                if pointwise {
                    T::gemm(d.cin, d.cout, plane, T::one(), k, (1, patch), dy_item, (plane, 1), T::zero(), dx_item, (plane, 1));
                } else {
                    let mut dcols = vec![T::zero(); patch * plane];
                    T::gemm(patch, d.cout, plane, T::one(), k, (1, patch), dy_item, (plane, 1), T::zero(), &mut dcols, (plane, 1));
                    col2im(&dcols, &d, geom, dx_item);
                }
            }
            cols.map(|cols| {
                let mut part = vec![T::zero(); d.cout * patch];
                T::gemm(d.cout, plane, patch, T::one(), dy_item, (plane, 1), cols, (1, plane), T::zero(), &mut part, (patch, 1));
                part
            })
        };
        let xs = input.data().par_chunks(d.in_item());
        let dys = dy.par_chunks(d.cout * plane);
        let parts: Vec<Option<Vec<T>>> = if need_x {
            dx.par_chunks_mut(d.in_item())
                .zip(xs.zip(dys))
                .map(|(dxi, (x, dyi))| item(x, dyi, Some(dxi)))
                .collect()
        } else {
            xs.zip(dys).map(|(x, dyi)| item(x, dyi, None)).collect()
        };
        // Fixed-order reduction keeps results independent of scheduling.
        for part in parts.into_iter().flatten() {
            dk.iter_mut().zip(part).for_each(|(a, b)| *a += b);
        }
    }

    let db = if need_b {
        let mut db = vec![T::zero(); d.cout];
        for n in 0..d.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = (n * d.cout + co) * plane;
                *acc += dy[start..start + plane].iter().copied().sum::<T>();
            }
        }
        Some(Tensor::new(vec![d.cout], db)?)
    } else {
        None
    };

    Ok(ConvGrads {
        input: if need_x { Some(Tensor::new(input.shape().to_vec(), dx)?) } else { None },
        kernel: if need_k { Some(Tensor::new(kernel.shape().to_vec(), dk)?) } else { None },
        bias: db,
    })
}

/// Direct nested-loop convolution, the correctness reference for [`conv2d`].
pub fn conv2d_reference<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geom: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = ConvDims::resolve(input.shape(), kernel.shape(), geom)?;
    check_bias(bias, d.cout)?;
    let mut out = Tensor::zeros(&[d.n, d.cout, d.oh, d.ow]);
    let (x, k) = (input.data(), kernel.data());
    let o = out.data_mut();
    for n in 0..d.n {
        for co in 0..d.cout {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = bias.map_or(T::zero(), |b| b.data()[co]);
                    for ci in 0..d.cin {
                        for ky in 0..d.kh {
                            for kx in 0..d.kw {
                                let iy = (oy * geom.stride + ky * geom.dilation) as isize - geom.padding as isize;
                                let ix = (ox * geom.stride + kx * geom.dilation) as isize - geom.padding as isize;
                                if iy < 0 || ix < 0 || iy >= d.h as isize || ix >= d.w as isize {
                                    continue;
                                }
                                let xv = x[((n * d.cin + ci) * d.h + iy as usize) * d.w + ix as usize];
                                let kv = k[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                                acc += xv * kv;
                            }
                        }
                    }
                    o[((n * d.cout + co) * d.oh + oy) * d.ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}
