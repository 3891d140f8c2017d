//! Convolution kernels (im2col + GEMM) used by the tape.

use crate::tensor::{matmul, Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: Shape, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if input.h + 2 * pad < k || input.w + 2 * pad < k || stride == 0 {
            return None;
        }
        Some(ConvGeom {
            c_in: input.c,
            h: input.h,
            w: input.w,
            k,
            stride,
            pad,
            ho: (input.h + 2 * pad - k) / stride + 1,
            wo: (input.w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx`.
    #[inline]
    fn x_range(&self, kx: usize) -> (usize, usize) {
        if self.stride == 1 {
            let lo = self.pad.saturating_sub(kx).min(self.wo);
            let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo).max(lo);
            (lo, hi)
        } else {
            let s = self.stride;
            let lo = self.pad.saturating_sub(kx).div_ceil(s).min(self.wo);
            let lim = (self.w + self.pad).saturating_sub(kx);
            let hi = lim.div_ceil(s).min(self.wo).max(lo);
            (lo, hi)
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (h, w, k, s, p) = (g.h, g.w, g.k, g.stride, g.pad);
    let ncols = g.cols();
    for ci in 0..g.c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.x_range(kx);
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    drow[..lo].iter_mut().for_each(|v| *v = T::zero());
                    drow[hi..].iter_mut().for_each(|v| *v = T::zero());
                    if s == 1 {
                        let off = lo + kx - p;
                        drow[lo..hi].copy_from_slice(&srow[off..off + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = srow[ox * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let (h, w, k, s, p) = (g.h, g.w, g.k, g.stride, g.pad);
    let ncols = g.cols();
    for ci in 0..g.c_in {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ncols..(row + 1) * ncols];
                let (lo, hi) = g.x_range(kx);
                for oy in 0..g.ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in lo..hi {
                        drow[ox * s + kx - p] += srow[ox];
                    }
                }
            }
        }
    }
}

/// `x: [n, c_in, h, w]`, `weight: [c_out, c_in, k, k]`, `bias: [1, c_out, 1, 1]`.
pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let xs = x.shape();
    let c_out = weight.shape().n;
    let mut out = Tensor::zeros(Shape::new(xs.n, c_out, g.ho, g.wo));
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.rows() * g.cols()]
    };
    for n in 0..xs.n {
        let cols: &[T] = if g.is_pointwise() {
            x.item(n)
        } else {
            im2col(x.item(n), g, &mut col);
            &col
        };
        let dst = out.item_mut(n);
        matmul(weight.data(), false, cols, false, dst, c_out, g.rows(), g.cols(), false);
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                dst[co * g.cols()..(co + 1) * g.cols()]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    g: &ConvGeom,
    need_x: bool,
) -> ConvGrads<T> {
    let xs = x.shape();
    let c_out = weight.shape().n;
    let mut gx = Tensor::zeros(if need_x { xs } else { Shape::default() });
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(Shape::new(1, c_out, 1, 1));
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.rows() * g.cols()]
    };
    let mut dcol = vec![T::zero(); g.rows() * g.cols()];
    for n in 0..xs.n {
        let gy = grad.item(n);
        for (co, b) in gb.data_mut().iter_mut().enumerate() {
            *b += gy[co * g.cols()..(co + 1) * g.cols()].iter().copied().sum::<T>();
        }
        let cols: &[T] = if g.is_pointwise() {
            x.item(n)
        } else {
            im2col(x.item(n), g, &mut col);
            &col
        };
        // dW += dY · colᵀ
        matmul(gy, false, cols, true, gw.data_mut(), c_out, g.cols(), g.rows(), true);
        if need_x {
            if g.is_pointwise() {
                matmul(weight.data(), true, gy, false, gx.item_mut(n), g.rows(), c_out, g.cols(), false);
            } else {
                matmul(weight.data(), true, gy, false, &mut dcol, g.rows(), c_out, g.cols(), false);
                col2im(&dcol, g, gx.item_mut(n));
            }
        }
    }
    ConvGrads {
        x: gx,
        weight: gw,
        bias: gb,
    }
}
