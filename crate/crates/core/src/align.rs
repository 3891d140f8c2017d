//! Motion compensation: an LR-space network that predicts `n` sampling
//! offsets and blending weights per HR pixel, and the warp of the previous
//! HR estimate onto the current frame.
//!
//! The body is `concat(y_t, y_prev) → conv → ReLU → res_blocks × ResBlock`;
//! its last activation is also handed to the generator as motion features.
//! A 3×3 head emits `3n` LR maps laid out as `[u₀..uₙ₋₁, v₀..vₙ₋₁, ℓ₀..ℓₙ₋₁]`.
//! Offsets are bilinearly upsampled by `s` and multiplied by `s`; the weight
//! logits are upsampled and then normalized by a per-pixel softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure_shape, Error, Result};
use crate::graph::{Tape, Var};
use crate::nn::{Bound, Conv, ParamSet, ResBlock};
use crate::optim::{Adam, AdamConfig};
use crate::resample::{self, FlowStack};
use crate::tensor::{Real, Shape, Tensor};

/// Scale of the head initialization relative to He-normal; keeps the
/// initial offsets near zero and the weights near uniform while leaving
/// every body parameter with a nonzero gradient.
const HEAD_GAIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignNetConfig {
    pub n: usize,
    pub res_blocks: usize,
    pub filters: usize,
    pub scale: usize,
}

impl Default for AlignNetConfig {
    fn default() -> Self {
        AlignNetConfig {
            n: 5,
            res_blocks: 10,
            filters: 64,
            scale: 4,
        }
    }
}

impl AlignNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.res_blocks < 1 || self.filters < 1 || self.scale < 1 {
            return Err(Error::invalid(
                "align config",
                format!("n, res_blocks, filters and scale must be ≥ 1 (got {self:?})"),
            ));
        }
        Ok(())
    }

    /// Channels emitted by the head.
    pub fn head_channels(&self) -> usize {
        3 * self.n
    }

    /// Closed-form parameter count of the architecture.
    pub fn param_count(&self) -> usize {
        Conv::param_count(6, self.filters, 3)
            + self.res_blocks * ResBlock::param_count(self.filters)
            + Conv::param_count(self.filters, self.head_channels(), 3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignNet<T> {
    cfg: AlignNetConfig,
    pub params: ParamSet<T>,
    input: Conv,
    blocks: Vec<ResBlock>,
    head: Conv,
}

/// Alignment output on a tape: HR flow maps and LR motion features.
#[derive(Clone, Copy, Debug)]
pub struct FieldVars {
    pub u: Var,
    pub v: Var,
    pub w: Var,
    pub features: Var,
}

/// Flow at HR resolution plus LR motion features.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentField<T> {
    pub flow: FlowStack<T>,
    pub features: Tensor<T>,
}

impl<T: Real> AlignmentField<T> {
    pub fn from_vars(tape: &Tape<T>, f: &FieldVars) -> Self {
        AlignmentField {
            flow: FlowStack {
                u: tape.value(f.u).clone(),
                v: tape.value(f.v).clone(),
                w: tape.value(f.w).clone(),
            },
            features: tape.value(f.features).clone(),
        }
    }
}

impl<T: Real> AlignNet<T> {
    /// Deterministic initialization from `seed`.
    pub fn build(cfg: AlignNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let f = cfg.filters;
        let input = Conv::new(&mut params, "align.input", 6, f, 3, 1, 1.0, &mut rng);
        let blocks = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(&mut params, &format!("align.block{i}"), f, &mut rng))
            .collect();
        let head = Conv::new(&mut params, "align.head", f, cfg.head_channels(), 3, 1, HEAD_GAIN, &mut rng);
        Ok(AlignNet {
            cfg,
            params,
            input,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &AlignNetConfig {
        &self.cfg
    }

    /// Runs the network on `[batch, 3, h, w]` LR frames.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, y_t: Var, y_prev: Var) -> Result<FieldVars> {
        ensure_shape("estimate_alignment", tape.shape(y_t), tape.shape(y_prev))?;
        if tape.shape(y_t).c != 3 {
            return Err(Error::invalid("estimate_alignment", "frames must have 3 channels"));
        }
        let n = self.cfg.n;
        let s = self.cfg.scale;
        let x = tape.concat(&[y_t, y_prev])?;
        let h = self.input.forward(tape, p, x)?;
        let mut h = tape.relu(h);
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        let features = h;
        let head = self.head.forward(tape, p, features)?;
        let su = tape.channels(head, 0, n)?;
        let sv = tape.channels(head, n, n)?;
        let sl = tape.channels(head, 2 * n, n)?;
        let u = tape.bilinear_upsample(su, s)?;
        let u = tape.scale(u, T::from_usize(s).unwrap());
        let v = tape.bilinear_upsample(sv, s)?;
        let v = tape.scale(v, T::from_usize(s).unwrap());
        let l = tape.bilinear_upsample(sl, s)?;
        let w = tape.softmax_channels(l);
        Ok(FieldVars { u, v, w, features })
    }

    /// Inference-mode alignment of two LR frames (`[batch, 3, h, w]`).
    pub fn estimate_alignment(&self, y_t: &Tensor<T>, y_prev: &Tensor<T>) -> Result<AlignmentField<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let a = tape.constant(y_t.clone());
        let b = tape.constant(y_prev.clone());
        let f = self.forward(&mut tape, &p, a, b)?;
        Ok(AlignmentField::from_vars(&tape, &f))
    }
}

/// Warps the previous HR estimate with the field's flow (no clamping).
pub fn warp_previous<T: Real>(x_prev: &Tensor<T>, field: &AlignmentField<T>) -> Result<Tensor<T>> {
    resample::multi_warp(x_prev, &field.flow)
}

/// Tape version of [`warp_previous`].
pub fn warp_previous_var<T: Real>(tape: &mut Tape<T>, x_prev: Var, f: &FieldVars) -> Result<Var> {
    tape.multi_warp(x_prev, f.u, f.v, f.w)
}

/// Raw flow parameters: offsets plus unnormalized weight logits, `[1, n, h, w]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowParams<T> {
    pub u: Tensor<T>,
    pub v: Tensor<T>,
    pub logits: Tensor<T>,
}

impl<T: Real> FlowParams<T> {
    /// Coordinate 0 starts at zero offset; the others start on a half-pixel
    /// ring (plus a little seeded jitter) so the coordinates are not symmetric.
    pub fn initial(n: usize, h: usize, w: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape::new(1, n, h, w);
        let mut u = Tensor::zeros(s);
        let mut v = Tensor::zeros(s);
        for i in 1..n {
            let angle = 2.0 * std::f64::consts::PI * (i - 1) as f64 / (n - 1) as f64;
            let (ru, rv) = (0.5 * angle.cos(), 0.5 * angle.sin());
            for p in u.plane_mut(0, i) {
                let j: f64 = rng.sample(StandardNormal);
                *p = T::lit(ru + 0.01 * j);
            }
            for p in v.plane_mut(0, i) {
                let j: f64 = rng.sample(StandardNormal);
                *p = T::lit(rv + 0.01 * j);
            }
        }
        FlowParams {
            u,
            v,
            logits: Tensor::zeros(s),
        }
    }

    pub fn n(&self) -> usize {
        self.u.shape().c
    }

    /// Embeds these coordinates into a larger stack; the extra coordinates
    /// get weight exactly zero after the softmax.
    pub fn embed(&self, n: usize) -> Result<Self> {
        let m = self.n();
        if n < m {
            return Err(Error::invalid("embed", format!("cannot embed {m} coordinates into {n}")));
        }
        let s = self.u.shape().with_c(n);
        let grow = |t: &Tensor<T>, fill: T| {
            let mut out = Tensor::full(s, fill);
            for c in 0..n {
                let src = t.plane(0, c.min(m - 1)).to_vec();
                if c < m {
                    out.plane_mut(0, c).copy_from_slice(&src);
                }
            }
            out
        };
        Ok(FlowParams {
            u: grow(&self.u, T::zero()),
            v: grow(&self.v, T::zero()),
            logits: grow(&self.logits, T::lit(-1e4)),
        })
    }

    /// Spreads a single-coordinate solution to `n` coordinates: the extra
    /// ones sit on a ring of radius [`SPREAD_RADIUS`] around the first with
    /// logits [`SPREAD_LOGIT_GAP`] below it.
    pub fn spread(&self, n: usize, seed: u64) -> Result<Self> {
        if self.n() != 1 || n == 0 {
            return Err(Error::invalid("spread", "expects one coordinate and n ≥ 1"));
        }
        let ring = FlowParams::<T>::initial(n, self.u.shape().h, self.u.shape().w, seed);
        let s = ring.u.shape();
        let base = |t: &Tensor<T>, c: usize| t.plane(0, 0)[c];
        let mut out = FlowParams {
            u: Tensor::zeros(s),
            v: Tensor::zeros(s),
            logits: Tensor::zeros(s),
        };
        let hw = s.h * s.w;
        for i in 0..n {
            let gap = if i == 0 { T::zero() } else { T::lit(-SPREAD_LOGIT_GAP) };
            let k = T::lit(SPREAD_RADIUS / 0.5);
            for p in 0..hw {
                out.u.plane_mut(0, i)[p] = base(&self.u, p) + k * ring.u.plane(0, i)[p];
                out.v.plane_mut(0, i)[p] = base(&self.v, p) + k * ring.v.plane(0, i)[p];
                out.logits.plane_mut(0, i)[p] = base(&self.logits, p) + gap;
            }
        }
        Ok(out)
    }

    pub fn to_flow(&self) -> FlowStack<T> {
        let mut tape = Tape::new();
        let l = tape.constant(self.logits.clone());
        let w = tape.softmax_channels(l);
        FlowStack {
            u: self.u.clone(),
            v: self.v.clone(),
            w: tape.value(w).clone(),
        }
    }
}

pub const SPREAD_RADIUS: f64 = 0.5;
pub const SPREAD_LOGIT_GAP: f64 = 4.0;

/// Settings for [`fit_flow`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowFitConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for FlowFitConfig {
    fn default() -> Self {
        FlowFitConfig { steps: 500, lr: 0.05 }
    }
}

fn warp_mse<T: Real>(tape: &mut Tape<T>, prev: Var, target: Var, u: Var, v: Var, logits: Var) -> Result<Var> {
    let w = tape.softmax_channels(logits);
    let warped = tape.multi_warp(prev, u, v, w)?;
    let d = tape.sub(warped, target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Mean squared warp error of `params` (single-item frames).
pub fn warp_error<T: Real>(x_prev: &Tensor<T>, x_target: &Tensor<T>, params: &FlowParams<T>) -> Result<T> {
    let mut tape = Tape::new();
    let prev = tape.constant(x_prev.clone());
    let target = tape.constant(x_target.clone());
    let u = tape.constant(params.u.clone());
    let v = tape.constant(params.v.clone());
    let l = tape.constant(params.logits.clone());
    let e = warp_mse(&mut tape, prev, target, u, v, l)?;
    Ok(tape.scalar(e))
}

/// Gradient-descent fit of raw flow maps minimizing the mean squared warp error,
/// starting from `init`.
pub fn fit_flow<T: Real>(
    x_prev: &Tensor<T>,
    x_target: &Tensor<T>,
    init: FlowParams<T>,
    cfg: FlowFitConfig,
) -> Result<FlowParams<T>> {
    ensure_shape("fit_flow", x_prev.shape(), x_target.shape())?;
    let xs = x_prev.shape();
    if xs.n != 1 {
        return Err(Error::invalid("fit_flow", "expects a single frame pair"));
    }
    ensure_shape("fit_flow", Shape::new(1, init.n(), xs.h, xs.w), init.u.shape())?;
    if cfg.steps < 1 {
        return Err(Error::invalid("fit_flow", "steps must be at least 1"));
    }
    let mut params = vec![init.u, init.v, init.logits];
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &params,
    );
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let prev = tape.constant(x_prev.clone());
        let target = tape.constant(x_target.clone());
        let u = tape.leaf(params[0].clone());
        let v = tape.leaf(params[1].clone());
        let l = tape.leaf(params[2].clone());
        let e = warp_mse(&mut tape, prev, target, u, v, l)?;
        let g = tape.backward(e);
        let grads: Vec<Tensor<T>> = [u, v, l]
            .iter()
            .zip(&params)
            .map(|(&var, p)| g.get_or_zeros(var, p.shape()))
            .collect();
        opt.update(&mut params, &grads)?;
    }
    let mut it = params.into_iter();
    Ok(FlowParams {
        u: it.next().unwrap(),
        v: it.next().unwrap(),
        logits: it.next().unwrap(),
    })
}

/// Fits `n` coordinates directly (no network) to warp `x_prev` onto `x_target`.
pub fn fit_flow_direct<T: Real>(
    x_prev: &Tensor<T>,
    x_target: &Tensor<T>,
    n: usize,
    steps: usize,
    seed: u64,
) -> Result<FlowStack<T>> {
    Ok(fit_flow_staged(x_prev, x_target, n, FlowFitConfig { steps, ..Default::default() }, seed)?.to_flow())
}

/// Two-stage fit used by [`fit_flow_direct`]: a single coordinate is fitted
/// for the first half of the steps, then spread to `n` coordinates (see
/// [`FlowParams::spread`]) and all are refined for the rest. The result is
/// whichever scores lower: the spread fit, or the one-coordinate fit carried
/// through both stages and embedded with zero-weight extras. So an `n > 1`
/// fit never scores worse than `n = 1` under the same seed and steps.
pub fn fit_flow_staged<T: Real>(
    x_prev: &Tensor<T>,
    x_target: &Tensor<T>,
    n: usize,
    cfg: FlowFitConfig,
    seed: u64,
) -> Result<FlowParams<T>> {
    if n == 0 {
        return Err(Error::invalid("fit_flow_direct", "n must be at least 1"));
    }
    if cfg.steps < 2 {
        return Err(Error::invalid("fit_flow_direct", "steps must be at least 2"));
    }
    let s = x_prev.shape();
    let first = cfg.steps / 2;
    let one = fit_flow(x_prev, x_target, FlowParams::initial(1, s.h, s.w, seed), FlowFitConfig { steps: first, ..cfg })?;
    let rest = FlowFitConfig { steps: cfg.steps - first, ..cfg };
    let single = fit_flow(x_prev, x_target, one.clone(), rest)?;
    if n == 1 {
        return Ok(single);
    }
    let spread = fit_flow(x_prev, x_target, one.spread(n, seed)?, rest)?;
    let single = single.embed(n)?;
    if warp_error(x_prev, x_target, &spread)? < warp_error(x_prev, x_target, &single)? {
        Ok(spread)
    } else {
        Ok(single)
    }
}
