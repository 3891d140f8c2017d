//! Differentiable spatial resampling.
//!
//! Coordinates are in pixel units with integer values at pixel centres.
//! Samples outside the image use clamp-to-edge, so gradients stay defined
//! at the borders. Flow offsets `(u, v)` are (horizontal, vertical) and are
//! added to each output pixel's own integer coordinates.
//!
//! Every operation has a plain forward on tensors plus the backward kernel
//! used by the autodiff tape (see [`crate::graph::Tape`]).

use crate::error::{ensure_shape, Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

/// `n` displaced sampling positions per pixel with blending weights.
///
/// `u`, `v` and `w` all have shape `[batch, n, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowStack<T> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    pub w: Tensor<T>,
}

impl<T: Real> FlowStack<T> {
    pub fn new(u: Tensor<T>, v: Tensor<T>, w: Tensor<T>) -> Result<Self> {
        let s = u.shape();
        if s.c == 0 {
            return Err(Error::invalid("flow stack", "n must be at least 1"));
        }
        ensure_shape("flow stack", s, v.shape())?;
        ensure_shape("flow stack", s, w.shape())?;
        Ok(FlowStack { u, v, w })
    }

    /// Single-coordinate flow with unit weight.
    pub fn single(u: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        let w = Tensor::full(u.shape(), T::one());
        Self::new(u, v, w)
    }

    /// Zero offsets with uniform weights `1/n`.
    pub fn identity(batch: usize, n: usize, h: usize, w: usize) -> Self {
        let s = Shape::new(batch, n, h, w);
        FlowStack {
            u: Tensor::zeros(s),
            v: Tensor::zeros(s),
            w: Tensor::full(s, T::one() / T::from_usize(n).unwrap()),
        }
    }

    pub fn n(&self) -> usize {
        self.u.shape().c
    }

    pub fn shape(&self) -> Shape {
        self.u.shape()
    }
}

/// Bilinear interpolation of a single `h×w` plane at `(x, y)`, clamp-to-edge.
#[inline]
pub(crate) fn sample_plane<T: Real>(plane: &[T], h: usize, w: usize, x: T, y: T) -> T {
    let t = Taps::new(h, w, x, y);
    t.value(plane)
}

/// Precomputed neighbour indices and fractional weights for one sample.
#[derive(Clone, Copy)]
pub(crate) struct Taps<T> {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fx: T,
    fy: T,
}

impl<T: Real> Taps<T> {
    #[inline]
    pub(crate) fn new(h: usize, w: usize, x: T, y: T) -> Self {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let clamp = |v: T, hi: usize| -> usize {
            let v = v.to_f64().unwrap_or(0.0);
            if v <= 0.0 {
                0
            } else if v >= (hi - 1) as f64 {
                hi - 1
            } else {
                v as usize
            }
        };
        let xa = clamp(x0, w);
        let xb = clamp(x0 + T::one(), w);
        let ya = clamp(y0, h);
        let yb = clamp(y0 + T::one(), h);
        Taps {
            i00: ya * w + xa,
            i01: ya * w + xb,
            i10: yb * w + xa,
            i11: yb * w + xb,
            fx,
            fy,
        }
    }

    #[inline]
    pub(crate) fn value(&self, p: &[T]) -> T {
        let one = T::one();
        let top = p[self.i00] * (one - self.fx) + p[self.i01] * self.fx;
        let bot = p[self.i10] * (one - self.fx) + p[self.i11] * self.fx;
        top * (one - self.fy) + bot * self.fy
    }

    /// Partial derivatives of the sample w.r.t. `x` and `y`.
    #[inline]
    fn coord_grad(&self, p: &[T]) -> (T, T) {
        let one = T::one();
        let dx = (p[self.i01] - p[self.i00]) * (one - self.fy) + (p[self.i11] - p[self.i10]) * self.fy;
        let dy = (p[self.i10] - p[self.i00]) * (one - self.fx) + (p[self.i11] - p[self.i01]) * self.fx;
        (dx, dy)
    }

    /// Scatters `g` into the four neighbours with the bilinear weights.
    #[inline]
    fn scatter(&self, p: &mut [T], g: T) {
        let one = T::one();
        p[self.i00] += g * (one - self.fx) * (one - self.fy);
        p[self.i01] += g * self.fx * (one - self.fy);
        p[self.i10] += g * (one - self.fx) * self.fy;
        p[self.i11] += g * self.fx * self.fy;
    }
}

/// Samples `image` at absolute coordinates. `xs`/`ys` are `[batch, 1, ho, wo]`.
pub fn bilinear_sample<T: Real>(
    image: &Tensor<T>,
    xs: &Tensor<T>,
    ys: &Tensor<T>,
) -> Result<Tensor<T>> {
    let is = image.shape();
    let cs = xs.shape();
    ensure_shape("bilinear_sample", cs, ys.shape())?;
    if cs.c != 1 || cs.n != is.n {
        return Err(Error::invalid(
            "bilinear_sample",
            format!("coordinate maps {cs} do not fit image {is}"),
        ));
    }
    let mut out = Tensor::zeros(Shape::new(is.n, is.c, cs.h, cs.w));
    for n in 0..is.n {
        let xp = xs.plane(n, 0);
        let yp = ys.plane(n, 0);
        for c in 0..is.c {
            let src = image.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (i, d) in dst.iter_mut().enumerate() {
                *d = sample_plane(src, is.h, is.w, xp[i], yp[i]);
            }
        }
    }
    Ok(out)
}

fn check_warp_shapes<T: Real>(image: &Tensor<T>, flow: &FlowStack<T>) -> Result<()> {
    let fs = flow.shape();
    if fs.c == 0 {
        return Err(Error::invalid("multi_warp", "n must be at least 1"));
    }
    ensure_shape("multi_warp", fs, flow.v.shape())?;
    ensure_shape("multi_warp", fs, flow.w.shape())?;
    let is = image.shape();
    if is.n != fs.n || is.h != fs.h || is.w != fs.w {
        return Err(Error::ShapeMismatch {
            op: "multi_warp",
            expected: Shape::new(fs.n, is.c, fs.h, fs.w),
            got: is,
        });
    }
    Ok(())
}

/// Weighted sum of `n` bilinear samples per pixel:
/// `out(x, y) = Σᵢ wᵢ(x, y) · image(x + uᵢ(x, y), y + vᵢ(x, y))`.
///
/// The weights broadcast over channels and are not normalized here.
pub fn multi_warp<T: Real>(image: &Tensor<T>, flow: &FlowStack<T>) -> Result<Tensor<T>> {
    check_warp_shapes(image, flow)?;
    Ok(multi_warp_forward(image, &flow.u, &flow.v, &flow.w))
}

pub(crate) fn multi_warp_forward<T: Real>(
    image: &Tensor<T>,
    u: &Tensor<T>,
    v: &Tensor<T>,
    wt: &Tensor<T>,
) -> Tensor<T> {
    let is = image.shape();
    let fs = u.shape();
    let (h, w) = (is.h, is.w);
    let mut out = Tensor::zeros(is);
    for b in 0..is.n {
        for i in 0..fs.c {
            let up = u.plane(b, i);
            let vp = v.plane(b, i);
            let wp = wt.plane(b, i);
            let taps: Vec<Taps<T>> = (0..h * w)
                .map(|p| {
                    let x = T::from_usize(p % w).unwrap() + up[p];
                    let y = T::from_usize(p / w).unwrap() + vp[p];
                    Taps::new(h, w, x, y)
                })
                .collect();
            for c in 0..is.c {
                let src = image.plane(b, c);
                let dst = out.plane_mut(b, c);
                for p in 0..h * w {
                    dst[p] += wp[p] * taps[p].value(src);
                }
            }
        }
    }
    out
}

pub(crate) struct WarpGrads<T> {
    pub image: Tensor<T>,
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    pub w: Tensor<T>,
}

pub(crate) fn multi_warp_backward<T: Real>(
    image: &Tensor<T>,
    u: &Tensor<T>,
    v: &Tensor<T>,
    wt: &Tensor<T>,
    grad: &Tensor<T>,
) -> WarpGrads<T> {
    let is = image.shape();
    let fs = u.shape();
    let (h, w) = (is.h, is.w);
    let mut gi = Tensor::zeros(is);
    let mut gu = Tensor::zeros(fs);
    let mut gv = Tensor::zeros(fs);
    let mut gw = Tensor::zeros(fs);
    for b in 0..is.n {
        for i in 0..fs.c {
            let up = u.plane(b, i);
            let vp = v.plane(b, i);
            let wp = wt.plane(b, i);
            let taps: Vec<Taps<T>> = (0..h * w)
                .map(|p| {
                    let x = T::from_usize(p % w).unwrap() + up[p];
                    let y = T::from_usize(p / w).unwrap() + vp[p];
                    Taps::new(h, w, x, y)
                })
                .collect();
            let mut acc_u = vec![T::zero(); h * w];
            let mut acc_v = vec![T::zero(); h * w];
            let mut acc_w = vec![T::zero(); h * w];
            for c in 0..is.c {
                let src = image.plane(b, c);
                let g = grad.plane(b, c);
                let gsrc = gi.plane_mut(b, c);
                for p in 0..h * w {
                    let t = &taps[p];
                    let (dx, dy) = t.coord_grad(src);
                    acc_u[p] += g[p] * dx;
                    acc_v[p] += g[p] * dy;
                    acc_w[p] += g[p] * t.value(src);
                    t.scatter(gsrc, g[p] * wp[p]);
                }
            }
            let gu_p = gu.plane_mut(b, i);
            for p in 0..h * w {
                gu_p[p] = acc_u[p] * wp[p];
            }
            let gv_p = gv.plane_mut(b, i);
            for p in 0..h * w {
                gv_p[p] = acc_v[p] * wp[p];
            }
            gw.plane_mut(b, i).copy_from_slice(&acc_w);
        }
    }
    WarpGrads {
        image: gi,
        u: gu,
        v: gv,
        w: gw,
    }
}

/// Rearranges each `s×s` block into channels, row-major within the block,
/// channel fastest: output channel `(by·s + bx)·c + ch`.
pub fn space_to_depth<T: Real>(t: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = t.shape();
    if s == 0 || sh.h % s != 0 || sh.w % s != 0 {
        return Err(Error::invalid(
            "space_to_depth",
            format!("spatial dims {}×{} not divisible by {s}", sh.h, sh.w),
        ));
    }
    let (ho, wo) = (sh.h / s, sh.w / s);
    let mut out = Tensor::zeros(Shape::new(sh.n, sh.c * s * s, ho, wo));
    for n in 0..sh.n {
        for c in 0..sh.c {
            for y in 0..sh.h {
                for x in 0..sh.w {
                    let oc = ((y % s) * s + (x % s)) * sh.c + c;
                    out.set(n, oc, y / s, x / s, t.at(n, c, y, x));
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space<T: Real>(t: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let sh = t.shape();
    if s == 0 || sh.c % (s * s) != 0 {
        return Err(Error::invalid(
            "depth_to_space",
            format!("{} channels not divisible by {}", sh.c, s * s),
        ));
    }
    let c_out = sh.c / (s * s);
    let mut out = Tensor::zeros(Shape::new(sh.n, c_out, sh.h * s, sh.w * s));
    for n in 0..sh.n {
        for c in 0..c_out {
            for y in 0..sh.h * s {
                for x in 0..sh.w * s {
                    let ic = ((y % s) * s + (x % s)) * c_out + c;
                    out.set(n, c, y, x, t.at(n, ic, y / s, x / s));
                }
            }
        }
    }
    Ok(out)
}

/// Replicates each pixel into an `r×r` block.
pub fn nn_upsample<T: Real>(t: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r < 1 {
        return Err(Error::invalid("nn_upsample", "factor must be at least 1"));
    }
    let s = t.shape();
    let (ho, wo) = (s.h * r, s.w * r);
    let mut out = Tensor::zeros(s.with_hw(ho, wo));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..ho {
                let row = &src[(y / r) * s.w..(y / r + 1) * s.w];
                let drow = &mut dst[y * wo..(y + 1) * wo];
                for (x, d) in drow.iter_mut().enumerate() {
                    *d = row[x / r];
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn nn_upsample_backward<T: Real>(g: &Tensor<T>, r: usize) -> Tensor<T> {
    let gs = g.shape();
    let (h, w) = (gs.h / r, gs.w / r);
    let mut out = Tensor::zeros(gs.with_hw(h, w));
    for n in 0..gs.n {
        for c in 0..gs.c {
            let src = g.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..gs.h {
                for x in 0..gs.w {
                    dst[(y / r) * w + x / r] += src[y * gs.w + x];
                }
            }
        }
    }
    out
}

/// 1-D linear interpolation taps for upsampling by `r` with half-pixel centres.
fn linear_taps(len: usize, r: usize) -> Vec<(usize, usize, f64)> {
    (0..len * r)
        .map(|o| {
            let src = ((o as f64 + 0.5) / r as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, half-pixel aligned, edge-clamped.
pub fn bilinear_upsample<T: Real>(t: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r < 1 {
        return Err(Error::invalid("bilinear_upsample", "factor must be at least 1"));
    }
    let s = t.shape();
    let tx = linear_taps(s.w, r);
    let ty = linear_taps(s.h, r);
    let (ho, wo) = (s.h * r, s.w * r);
    let mut out = Tensor::zeros(s.with_hw(ho, wo));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = t.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let top = src[y0 * s.w + x0] * (T::one() - fx) + src[y0 * s.w + x1] * fx;
                    let bot = src[y1 * s.w + x0] * (T::one() - fx) + src[y1 * s.w + x1] * fx;
                    dst[y * wo + x] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn bilinear_upsample_backward<T: Real>(g: &Tensor<T>, r: usize) -> Tensor<T> {
    let gs = g.shape();
    let (h, w) = (gs.h / r, gs.w / r);
    let tx = linear_taps(w, r);
    let ty = linear_taps(h, r);
    let mut out = Tensor::zeros(gs.with_hw(h, w));
    for n in 0..gs.n {
        for c in 0..gs.c {
            let src = g.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (x, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let gv = src[y * gs.w + x];
                    let one = T::one();
                    dst[y0 * w + x0] += gv * (one - fx) * (one - fy);
                    dst[y0 * w + x1] += gv * fx * (one - fy);
                    dst[y1 * w + x0] += gv * (one - fx) * fy;
                    dst[y1 * w + x1] += gv * fx * fy;
                }
            }
        }
    }
    out
}

/// Tape-level multi-coordinate warp; all four inputs receive gradients.
pub fn multi_warp_var<T: Real>(tape: &mut Tape<T>, image: Var, u: Var, v: Var, w: Var) -> Result<Var> {
    let flow = FlowStack {
        u: tape.value(u).clone(),
        v: tape.value(v).clone(),
        w: tape.value(w).clone(),
    };
    check_warp_shapes(tape.value(image), &flow)?;
    Ok(tape.multi_warp_unchecked(image, u, v, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.random::<f64>())
    }

    #[test]
    fn identity_grid_reproduces_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random(Shape::new(1, 3, 5, 6), &mut rng);
        let xs = Tensor::from_fn(Shape::new(1, 1, 5, 6), |_, _, _, x| x as f64);
        let ys = Tensor::from_fn(Shape::new(1, 1, 5, 6), |_, _, y, _| y as f64);
        assert_eq!(bilinear_sample(&img, &xs, &ys).unwrap(), img);
    }

    #[test]
    fn integer_shift_duplicates_last_column() {
        let img = Tensor::from_fn(Shape::new(1, 1, 2, 4), |_, _, y, x| (10 * y + x) as f64);
        let xs = Tensor::from_fn(Shape::new(1, 1, 2, 4), |_, _, _, x| x as f64 + 1.0);
        let ys = Tensor::from_fn(Shape::new(1, 1, 2, 4), |_, _, y, _| y as f64);
        let out = bilinear_sample(&img, &xs, &ys).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 3.0, 11.0, 12.0, 13.0, 13.0]);
    }

    #[test]
    fn sampler_matches_four_neighbour_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random(Shape::new(1, 1, 4, 4), &mut rng);
        for _ in 0..200 {
            let x: f64 = rng.random_range(-1.5..4.5);
            let y: f64 = rng.random_range(-1.5..4.5);
            // clamp the coordinate itself, then interpolate the four neighbours
            let cx = x.clamp(0.0, 3.0);
            let cy = y.clamp(0.0, 3.0);
            let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(3), (y0 + 1).min(3));
            let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
            let p = |yy: usize, xx: usize| img.at(0, 0, yy, xx);
            let want = p(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + p(y0, x1) * fx * (1.0 - fy)
                + p(y1, x0) * (1.0 - fx) * fy
                + p(y1, x1) * fx * fy;
            let got = sample_plane(img.plane(0, 0), 4, 4, x, y);
            assert!((got - want).abs() < 1e-12, "({x}, {y}): {got} vs {want}");
        }
    }

    #[test]
    fn single_unit_weight_is_identity_for_zero_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random(Shape::new(2, 3, 5, 5), &mut rng);
        let flow = FlowStack::identity(2, 1, 5, 5);
        assert_eq!(multi_warp(&img, &flow).unwrap(), img);
        let half = FlowStack::identity(2, 2, 5, 5);
        let out = multi_warp(&img, &half).unwrap();
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn warp_rejects_empty_stack_and_mismatch() {
        let img = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let empty = Tensor::<f64>::zeros(Shape::new(1, 0, 4, 4));
        assert!(FlowStack::new(empty.clone(), empty.clone(), empty).is_err());
        let flow = FlowStack::identity(1, 2, 5, 4);
        assert!(multi_warp(&img, &flow).is_err());
    }

    #[test]
    fn space_to_depth_block_order() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let d = space_to_depth(&t, 2).unwrap();
        assert_eq!(d.shape(), Shape::new(1, 4, 1, 1));
        assert_eq!(d.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(depth_to_space(&d, 2).unwrap(), t);
        assert_eq!(space_to_depth(&t, 1).unwrap(), t);
        assert_eq!(depth_to_space(&t, 1).unwrap(), t);
    }

    #[test]
    fn space_to_depth_channel_fastest() {
        // two channels: block position major, channel minor
        let t = Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, y, x| (c * 10 + y * 2 + x) as f64);
        let d = space_to_depth(&t, 2).unwrap();
        assert_eq!(d.data(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0]);
    }

    #[test]
    fn rearrangement_rejects_bad_sizes() {
        let t = Tensor::<f32>::zeros(Shape::new(1, 3, 6, 6));
        assert!(space_to_depth(&t, 4).is_err());
        assert!(depth_to_space(&t, 2).is_err());
        assert!(nn_upsample(&t, 0).is_err());
    }

    #[test]
    fn nn_upsample_replicates() {
        let t = Tensor::full(Shape::new(1, 1, 1, 1), 0.3f32);
        let u = nn_upsample(&t, 2).unwrap();
        assert_eq!(u.data(), &[0.3; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random(Shape::new(1, 2, 3, 3), &mut rng);
        assert_eq!(nn_upsample(&t, 1).unwrap(), t);
        let u = nn_upsample(&t, 4).unwrap();
        for c in 0..2 {
            for y in 0..12 {
                for x in 0..12 {
                    assert_eq!(u.at(0, c, y, x), t.at(0, c, y / 4, x / 4));
                }
            }
        }
    }

    #[test]
    fn bilinear_upsample_preserves_constants_and_ramps() {
        let t = Tensor::full(Shape::new(1, 1, 3, 3), 0.7f64);
        let u = bilinear_upsample(&t, 4).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        // interior of a linear ramp stays linear
        let ramp = Tensor::from_fn(Shape::new(1, 1, 1, 4), |_, _, _, x| x as f64);
        let u = bilinear_upsample(&ramp, 2).unwrap();
        let row = [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0];
        assert_eq!(u.plane(0, 0)[..8], row);
        assert_eq!(u.plane(0, 0)[8..], row);
    }
}
