//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! walks the record in reverse and returns gradients for the leaf nodes
//! (parameters, inputs and constants). Parameters shared across the time
//! steps of an unroll are bound once per tape, so their gradients accumulate
//! over every use.

use crate::conv::{self, ConvGeom};
use crate::error::{ensure_shape, Error, Result};
use crate::resample;
use crate::tensor::{matmul, Real, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[n, c, h, w] ⊙ [n, 1, h, w]`
    MulMask(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Clamp(Var, T, T),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    LogFloor(Var, T),
    Concat(Vec<Var>),
    Channels { x: Var, start: usize },
    Reshape(Var),
    NnUpsample(Var, usize),
    BilinearUpsample(Var, usize),
    SpaceToDepth(Var, usize),
    DepthToSpace(Var, usize),
    MultiWarp { image: Var, u: Var, v: Var, w: Var },
    SoftmaxChannels(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Mean(Var),
    Sum(Var),
    SumChannels(Var),
    Gram(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulMask(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Relu(a)
            | Op::Clamp(a, _, _)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::LogFloor(a, _)
            | Op::Channels { x: a, .. }
            | Op::Reshape(a)
            | Op::NnUpsample(a, _)
            | Op::BilinearUpsample(a, _)
            | Op::SpaceToDepth(a, _)
            | Op::DepthToSpace(a, _)
            | Op::SoftmaxChannels(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::SumChannels(a)
            | Op::Gram(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::MultiWarp { image, u, v, w } => vec![*image, *u, *v, *w],
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    /// Whether any trainable leaf feeds this node.
    tracked: bool,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf holding `value`. Leaves receive gradients but have no parents.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient. Operations on
    /// constants only are not differentiated at all.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the value of `x` into a fresh leaf, cutting the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.leaf(v)
    }

    pub fn value(&self, x: Var) -> &Tensor<T> {
        &self.nodes[x.0].value
    }

    pub fn shape(&self, x: Var) -> Shape {
        self.nodes[x.0].value.shape()
    }

    pub fn is_leaf(&self, x: Var) -> bool {
        matches!(self.nodes[x.0].op, Op::Leaf)
    }

    /// Scalar value of a `[1, 1, 1, 1]` node.
    pub fn scalar(&self, x: Var) -> T {
        self.value(x).data()[0]
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c || ws.h != ws.w {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {ws} does not fit input {xs}"),
            ));
        }
        if let Some(b) = b {
            ensure_shape("conv2d bias", Shape::new(1, ws.n, 1, 1), self.shape(b))?;
        }
        let geom = ConvGeom::new(xs, ws.h, stride, pad)
            .ok_or_else(|| Error::invalid("conv2d", format!("input {xs} smaller than kernel")))?;
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }))
    }

    /// `x: [n, in, 1, 1]`, `w: [out, in, 1, 1]`, `b: [1, out, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.h * xs.w != 1 || ws.c != xs.c || ws.h * ws.w != 1 {
            return Err(Error::invalid(
                "linear",
                format!("weight {ws} does not fit input {xs}"),
            ));
        }
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, 1, 1));
        matmul(self.value(x).data(), false, self.value(w).data(), true, out.data_mut(), xs.n, xs.c, ws.n, false);
        if let Some(b) = b {
            ensure_shape("linear bias", Shape::new(1, ws.n, 1, 1), self.shape(b))?;
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(ws.n) {
                row.iter_mut().zip(&bv).for_each(|(o, &b)| *o += b);
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<()> {
        ensure_shape(op, self.shape(a), self.shape(b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies every channel of `a` by the single-channel `mask`.
    pub fn mul_mask(&mut self, a: Var, mask: Var) -> Result<Var> {
        let s = self.shape(a);
        ensure_shape("mul_mask", s.with_c(1), self.shape(mask))?;
        let mut out = self.value(a).clone();
        let m = self.value(mask);
        for n in 0..s.n {
            let mp = m.plane(n, 0).to_vec();
            for c in 0..s.c {
                out.plane_mut(n, c).iter_mut().zip(&mp).for_each(|(o, &k)| *o *= k);
            }
        }
        Ok(self.push(out, Op::MulMask(a, mask)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, Op::Relu(a))
    }

    /// Clamps to `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    /// `ln(max(a, eps))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, a: Var, eps: T) -> Var {
        let out = self.value(a).map(|x| if x > eps { x.ln() } else { eps.ln() });
        self.push(out, Op::LogFloor(a, eps))
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "nothing to concatenate"))?;
        let s0 = self.shape(first);
        let mut c = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.n != s0.n || s.h != s0.h || s.w != s0.w {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    expected: s0.with_c(s.c),
                    got: s,
                });
            }
            c += s.c;
        }
        let mut out = Tensor::zeros(s0.with_c(c));
        for n in 0..s0.n {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).item(n);
                out.item_mut(n)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(out, Op::Concat(parts.to_vec())))
    }

    /// Channel slice `[start, start + len)`.
    pub fn channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c || len == 0 {
            return Err(Error::invalid(
                "channels",
                format!("range {start}..{} out of {} channels", start + len, s.c),
            ));
        }
        let out = self.value(x).channels(start, len);
        Ok(self.push(out, Op::Channels { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// `[n, c, h, w] -> [n, c·h·w, 1, 1]`
    pub fn flatten(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        self.reshape(x, Shape::new(s.n, s.item(), 1, 1))
            .expect("flatten preserves length")
    }

    pub fn nn_upsample(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = resample::nn_upsample(self.value(x), r)?;
        Ok(self.push(out, Op::NnUpsample(x, r)))
    }

    pub fn bilinear_upsample(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = resample::bilinear_upsample(self.value(x), r)?;
        Ok(self.push(out, Op::BilinearUpsample(x, r)))
    }

    pub fn space_to_depth(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = resample::space_to_depth(self.value(x), s)?;
        Ok(self.push(out, Op::SpaceToDepth(x, s)))
    }

    pub fn depth_to_space(&mut self, x: Var, s: usize) -> Result<Var> {
        let out = resample::depth_to_space(self.value(x), s)?;
        Ok(self.push(out, Op::DepthToSpace(x, s)))
    }

    pub(crate) fn multi_warp_unchecked(&mut self, image: Var, u: Var, v: Var, w: Var) -> Var {
        let out = resample::multi_warp_forward(self.value(image), self.value(u), self.value(v), self.value(w));
        self.push(out, Op::MultiWarp { image, u, v, w })
    }

    /// See [`resample::multi_warp`].
    pub fn multi_warp(&mut self, image: Var, u: Var, v: Var, w: Var) -> Result<Var> {
        resample::multi_warp_var(self, image, u, v, w)
    }

    /// Softmax across channels, independently at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let mut out = self.value(x).clone();
        let p = s.plane();
        for n in 0..s.n {
            let item = out.item_mut(n);
            for i in 0..p {
                let mut m = T::neg_infinity();
                for c in 0..s.c {
                    m = m.max(item[c * p + i]);
                }
                let mut z = T::zero();
                for c in 0..s.c {
                    let e = (item[c * p + i] - m).exp();
                    item[c * p + i] = e;
                    z += e;
                }
                for c in 0..s.c {
                    item[c * p + i] = item[c * p + i] / z;
                }
            }
        }
        self.push(out, Op::SoftmaxChannels(x))
    }

    /// Per-channel batch normalization. With `running = None` the batch
    /// statistics are used and returned; otherwise the given `(mean, var)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let s = self.shape(x);
        ensure_shape("batch_norm", Shape::new(1, s.c, 1, 1), self.shape(gamma))?;
        ensure_shape("batch_norm", Shape::new(1, s.c, 1, 1), self.shape(beta))?;
        let count = T::from_usize(s.n * s.plane()).unwrap();
        let xv = self.value(x);
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let mut mean = vec![T::zero(); s.c];
                let mut var = vec![T::zero(); s.c];
                for c in 0..s.c {
                    let mut acc = T::zero();
                    for n in 0..s.n {
                        acc += xv.plane(n, c).iter().copied().sum::<T>();
                    }
                    mean[c] = acc / count;
                    let mut acc = T::zero();
                    for n in 0..s.n {
                        acc += xv.plane(n, c).iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum::<T>();
                    }
                    var[c] = acc / count;
                }
                let st = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                };
                (mean, var, Some(st))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = xv.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let (m, is, gc, bc) = (mean[c], inv_std[c], g[c], b[c]);
                out.plane_mut(n, c).iter_mut().for_each(|v| *v = gc * (*v - m) * is + bc);
            }
        }
        let var = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats: running.is_none(),
            },
        );
        Ok((var, stats))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let m = self.value(x).mean();
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let m = self.value(x).sum();
        self.push(Tensor::scalar(m), Op::Sum(x))
    }

    /// Sums over channels: `[n, c, h, w] -> [n, 1, h, w]`.
    pub fn sum_channels(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let xv = self.value(x);
        let mut out = Tensor::zeros(s.with_c(1));
        for n in 0..s.n {
            for c in 0..s.c {
                let src = xv.plane(n, c).to_vec();
                out.plane_mut(n, 0).iter_mut().zip(&src).for_each(|(o, &v)| *o += v);
            }
        }
        self.push(out, Op::SumChannels(x))
    }

    /// Per-item Gram matrix `F·Fᵀ / (c·h·w)` with `F` the `c×(h·w)` reshaping;
    /// output `[n, 1, c, c]`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(Error::invalid("gram", "empty feature map"));
        }
        let norm = T::one() / T::from_usize(s.item()).unwrap();
        let mut out = Tensor::zeros(Shape::new(s.n, 1, s.c, s.c));
        let xv = self.value(x);
        for n in 0..s.n {
            let f = xv.item(n);
            let dst = out.item_mut(n);
            T::gemm(
                s.c,
                s.plane(),
                s.c,
                norm,
                f,
                (s.plane() as isize, 1),
                f,
                (1, s.plane() as isize),
                T::zero(),
                dst,
                (s.c as isize, 1),
            );
        }
        Ok(self.push(out, Op::Gram(x)))
    }

    /// Adds a list of same-shaped nodes.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let mut it = xs.iter().copied();
        let mut acc = it
            .next()
            .ok_or_else(|| Error::invalid("add_all", "empty list"))?;
        for x in it {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    /// Gradients of `loss` (seeded with ones) with respect to every leaf it reaches.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let need_x = tracked(*x);
                let cg = conv::conv2d_backward(val(*x), val(*w), g, geom, need_x);
                if need_x {
                    acc(*x, cg.x);
                }
                acc(*w, cg.weight);
                if let Some(b) = b {
                    acc(*b, cg.bias);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = val(*x).shape();
                let ws = val(*w).shape();
                let mut gx = Tensor::zeros(xs);
                matmul(g.data(), false, val(*w).data(), false, gx.data_mut(), xs.n, ws.n, xs.c, false);
                let mut gw = Tensor::zeros(ws);
                matmul(g.data(), true, val(*x).data(), false, gw.data_mut(), ws.n, xs.n, xs.c, false);
                acc(*x, gx);
                acc(*w, gw);
                if let Some(b) = b {
                    let mut gb = Tensor::zeros(Shape::new(1, ws.n, 1, 1));
                    for row in g.data().chunks(ws.n) {
                        gb.data_mut().iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                    }
                    acc(*b, gb);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |g, y| g * y));
                acc(*b, g.zip_map(val(*a), |g, x| g * x));
            }
            Op::MulMask(a, m) => {
                let s = val(*a).shape();
                let mv = val(*m);
                let av = val(*a);
                let mut ga = g.clone();
                let mut gm = Tensor::zeros(s.with_c(1));
                for n in 0..s.n {
                    let mp = mv.plane(n, 0);
                    for c in 0..s.c {
                        let gp = g.plane(n, c);
                        let ap = av.plane(n, c);
                        let gmp = gm.plane_mut(n, 0);
                        for i in 0..s.plane() {
                            gmp[i] += gp[i] * ap[i];
                        }
                        ga.plane_mut(n, c).iter_mut().zip(mp).for_each(|(o, &k)| *o *= k);
                    }
                }
                acc(*a, ga);
                acc(*m, gm);
            }
            Op::Scale(a, k) => acc(*a, g.map(|x| x * *k)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |g, x| if x > T::zero() { g } else { T::zero() })),
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(val(*a), |g, x| if x >= *lo && x <= *hi { g } else { T::zero() }),
            ),
            Op::LeakyRelu(a, k) => acc(*a, g.zip_map(val(*a), |g, x| if x > T::zero() { g } else { g * *k })),
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y * (T::one() - y))),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y)),
            Op::Abs(a) => acc(
                *a,
                g.zip_map(val(*a), |g, x| {
                    if x > T::zero() {
                        g
                    } else if x < T::zero() {
                        -g
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |g, x| g * (x + x))),
            Op::LogFloor(a, eps) => acc(*a, g.zip_map(val(*a), |g, x| if x > *eps { g / x } else { T::zero() })),
            Op::Concat(parts) => {
                let s = g.shape();
                let mut off = 0;
                for &p in parts {
                    let c = val(p).shape().c;
                    acc(p, g.channels(off, c));
                    off += c;
                }
                debug_assert_eq!(off, s.c);
            }
            Op::Channels { x, start } => {
                let xs = val(*x).shape();
                let p = xs.plane();
                let mut gx = Tensor::zeros(xs);
                let len = g.shape().c;
                for n in 0..xs.n {
                    gx.item_mut(n)[start * p..(start + len) * p].copy_from_slice(g.item(n));
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape()).unwrap()),
            Op::NnUpsample(x, r) => acc(*x, resample::nn_upsample_backward(g, *r)),
            Op::BilinearUpsample(x, r) => acc(*x, resample::bilinear_upsample_backward(g, *r)),
            Op::SpaceToDepth(x, s) => acc(*x, resample::depth_to_space(g, *s).unwrap()),
            Op::DepthToSpace(x, s) => acc(*x, resample::space_to_depth(g, *s).unwrap()),
            Op::MultiWarp { image, u, v, w } => {
                let wg = resample::multi_warp_backward(val(*image), val(*u), val(*v), val(*w), g);
                acc(*image, wg.image);
                acc(*u, wg.u);
                acc(*v, wg.v);
                acc(*w, wg.w);
            }
            Op::SoftmaxChannels(x) => {
                let y = &node.value;
                let s = y.shape();
                let p = s.plane();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    let yi = y.item(n);
                    let gi = g.item(n);
                    let out = gx.item_mut(n);
                    for i in 0..p {
                        let dot: T = (0..s.c).map(|c| yi[c * p + i] * gi[c * p + i]).sum();
                        for c in 0..s.c {
                            out[c * p + i] = yi[c * p + i] * (gi[c * p + i] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let xv = val(*x);
                let s = xv.shape();
                let gam = val(*gamma).data();
                let count = T::from_usize(s.n * s.plane()).unwrap();
                let mut gx = Tensor::zeros(s);
                let mut gg = Tensor::zeros(Shape::new(1, s.c, 1, 1));
                let mut gb = Tensor::zeros(Shape::new(1, s.c, 1, 1));
                for c in 0..s.c {
                    let (m, is) = (mean[c], inv_std[c]);
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for n in 0..s.n {
                        for (&gv, &xv) in g.plane(n, c).iter().zip(xv.plane(n, c)) {
                            sum_g += gv;
                            sum_gx += gv * (xv - m) * is;
                        }
                    }
                    gb.data_mut()[c] = sum_g;
                    gg.data_mut()[c] = sum_gx;
                    for n in 0..s.n {
                        let gp = g.plane(n, c).to_vec();
                        let xp = xv.plane(n, c).to_vec();
                        let out = gx.plane_mut(n, c);
                        for i in 0..out.len() {
                            out[i] = if *batch_stats {
                                let xhat = (xp[i] - m) * is;
                                gam[c] * is * (gp[i] - sum_g / count - xhat * sum_gx / count)
                            } else {
                                gam[c] * is * gp[i]
                            };
                        }
                    }
                }
                acc(*x, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::Mean(x) => {
                let s = val(*x).shape();
                let k = g.data()[0] / T::from_usize(s.len()).unwrap();
                acc(*x, Tensor::full(s, k));
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.data()[0])),
            Op::SumChannels(x) => {
                let s = val(*x).shape();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    let gp = g.plane(n, 0).to_vec();
                    for c in 0..s.c {
                        gx.plane_mut(n, c).copy_from_slice(&gp);
                    }
                }
                acc(*x, gx);
            }
            Op::Gram(x) => {
                let xv = val(*x);
                let s = xv.shape();
                let norm = T::one() / T::from_usize(s.item()).unwrap();
                let mut gx = Tensor::zeros(s);
                for n in 0..s.n {
                    let gm = g.item(n);
                    // (G + Gᵀ) / norm
                    let mut sym = vec![T::zero(); s.c * s.c];
                    for i in 0..s.c {
                        for j in 0..s.c {
                            sym[i * s.c + j] = gm[i * s.c + j] + gm[j * s.c + i];
                        }
                    }
                    T::gemm(
                        s.c,
                        s.c,
                        s.plane(),
                        norm,
                        &sym,
                        (s.c as isize, 1),
                        xv.item(n),
                        (s.plane() as isize, 1),
                        T::zero(),
                        gx.item_mut(n),
                        (s.plane() as isize, 1),
                    );
                }
                acc(*x, gx);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Gradients of leaf nodes produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, x: Var) -> Option<&Tensor<T>> {
        self.grads.get(x.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `x`, or zeros of `shape` when no path from the loss reaches it.
    pub fn get_or_zeros(&self, x: Var, shape: Shape) -> Tensor<T> {
        self.get(x).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, x: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(x.0).and_then(|g| g.take())
    }
}
