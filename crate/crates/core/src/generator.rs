//! Frame-recurrent generator and the unrolled sequence pass.
//!
//! Per step the input is `concat(y_t, space_to_depth(warped prev), motion
//! features)` at LR resolution. It runs through `conv → ReLU → ResBlocks`,
//! then two upscaling stages of `nn_upsample ×r → conv → ReLU` and a final
//! conv to RGB, plus a global skip of the nearest-neighbor upscaled input.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{warp_previous_var, AlignNet, AlignmentField, FieldVars};
use crate::error::{ensure_shape, Error, Result};
use crate::frame::{Frame, FrameSequence};
use crate::graph::{Tape, Var};
use crate::nn::{Bound, Conv, ParamSet, ResBlock};
use crate::tensor::{Real, Shape, Tensor};

/// Gain of the output conv; the network starts out as the global skip.
const OUTPUT_GAIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub res_blocks: usize,
    pub filters: usize,
    pub scale: usize,
    /// magnification of each of the two upscaling stages
    pub step: usize,
    /// must equal the alignment network's filter count
    pub motion_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            res_blocks: 10,
            filters: 64,
            scale: 4,
            step: 2,
            motion_channels: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.res_blocks < 1 || self.filters < 1 {
            return Err(Error::invalid("generator config", "res_blocks and filters must be ≥ 1"));
        }
        if self.step < 2 || self.step * self.step != self.scale {
            return Err(Error::invalid(
                "generator config",
                format!("scale {} must equal step² with step ≥ 2 (step {})", self.scale, self.step),
            ));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        3 + 3 * self.scale * self.scale + self.motion_channels
    }

    pub fn param_count(&self) -> usize {
        let f = self.filters;
        Conv::param_count(self.input_channels(), f, 3)
            + self.res_blocks * ResBlock::param_count(f)
            + 2 * Conv::param_count(f, f, 3)
            + Conv::param_count(f, 3, 3)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    cfg: GeneratorConfig,
    pub params: ParamSet<T>,
    input: Conv,
    blocks: Vec<ResBlock>,
    up: [Conv; 2],
    output: Conv,
}

impl<T: Real> Generator<T> {
    pub fn build(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let f = cfg.filters;
        let input = Conv::new(&mut params, "gen.input", cfg.input_channels(), f, 3, 1, 1.0, &mut rng);
        let blocks = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(&mut params, &format!("gen.block{i}"), f, &mut rng))
            .collect();
        let up = [
            Conv::new(&mut params, "gen.up0", f, f, 3, 1, 1.0, &mut rng),
            Conv::new(&mut params, "gen.up1", f, f, 3, 1, 1.0, &mut rng),
        ];
        let output = Conv::new(&mut params, "gen.output", f, 3, 3, 1, OUTPUT_GAIN, &mut rng);
        Ok(Generator {
            cfg,
            params,
            input,
            blocks,
            up,
            output,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Input conv (for inspecting its width).
    pub fn input_conv(&self) -> Conv {
        self.input
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, y: Var, warped: Var, features: Var) -> Result<Var> {
        let s = self.cfg.scale;
        let ys = tape.shape(y);
        if ys.c != 3 {
            return Err(Error::invalid("generate_frame", "LR frame must have 3 channels"));
        }
        ensure_shape("generate_frame", ys.with_hw(ys.h * s, ys.w * s), tape.shape(warped))?;
        ensure_shape(
            "generate_frame",
            ys.with_c(self.cfg.motion_channels),
            tape.shape(features),
        )?;
        let packed = tape.space_to_depth(warped, s)?;
        let x = tape.concat(&[y, packed, features])?;
        let h = self.input.forward(tape, p, x)?;
        let mut h = tape.relu(h);
        for b in &self.blocks {
            h = b.forward(tape, p, h)?;
        }
        for conv in &self.up {
            let u = tape.nn_upsample(h, self.cfg.step)?;
            let u = conv.forward(tape, p, u)?;
            h = tape.relu(u);
        }
        let out = self.output.forward(tape, p, h)?;
        let skip = tape.nn_upsample(y, s)?;
        tape.add(out, skip)
    }

    /// One inference step on concrete tensors.
    pub fn generate_frame(&self, y: &Tensor<T>, warped: &Tensor<T>, features: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let y = tape.constant(y.clone());
        let w = tape.constant(warped.clone());
        let f = tape.constant(features.clone());
        let out = self.forward(&mut tape, &p, y, w, f)?;
        Ok(tape.value(out).clone())
    }
}

/// Tape nodes of an unrolled pass.
#[derive(Clone, Debug)]
pub struct UnrollVars {
    pub estimates: Vec<Var>,
    pub warped_prevs: Vec<Var>,
    /// `None` at step 0, which has no previous frame to align
    pub fields: Vec<Option<FieldVars>>,
}

/// Unrolls generator and alignment over `lr` (one `[batch, 3, h, w]` node per
/// step). Step 0 starts from a black HR frame and zero motion features;
/// gradients flow through the whole chain.
pub fn unroll_vars<T: Real>(
    tape: &mut Tape<T>,
    gen: &Generator<T>,
    gp: &Bound,
    align: &AlignNet<T>,
    ap: &Bound,
    lr: &[Var],
) -> Result<UnrollVars> {
    check_pair(gen, align)?;
    if lr.is_empty() {
        return Err(Error::invalid("unroll", "T must be at least 1"));
    }
    let s = gen.cfg.scale;
    let ls = tape.shape(lr[0]);
    let mut out = UnrollVars {
        estimates: Vec::with_capacity(lr.len()),
        warped_prevs: Vec::with_capacity(lr.len()),
        fields: Vec::with_capacity(lr.len()),
    };
    for (t, &y) in lr.iter().enumerate() {
        ensure_shape("unroll", ls, tape.shape(y))?;
        let (warped, features, field) = if t == 0 {
            let black = tape.constant(Tensor::zeros(ls.with_hw(ls.h * s, ls.w * s)));
            let feat = tape.constant(Tensor::zeros(ls.with_c(gen.cfg.motion_channels)));
            (black, feat, None)
        } else {
            let f = align.forward(tape, ap, y, lr[t - 1])?;
            let prev = out.estimates[t - 1];
            let warped = warp_previous_var(tape, prev, &f)?;
            (warped, f.features, Some(f))
        };
        let est = gen.forward(tape, gp, y, warped, features)?;
        out.estimates.push(est);
        out.warped_prevs.push(warped);
        out.fields.push(field);
    }
    Ok(out)
}

fn check_pair<T: Real>(gen: &Generator<T>, align: &AlignNet<T>) -> Result<()> {
    let a = align.config();
    if a.filters != gen.cfg.motion_channels || a.scale != gen.cfg.scale {
        return Err(Error::invalid(
            "unroll",
            format!(
                "alignment network (filters {}, scale {}) does not match generator (motion channels {}, scale {})",
                a.filters, a.scale, gen.cfg.motion_channels, gen.cfg.scale
            ),
        ));
    }
    Ok(())
}

/// Concrete outputs of an inference unroll; tensors keep the batch axis of
/// the input and are not clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollResult<T> {
    pub estimates: Vec<Tensor<T>>,
    pub warped_prevs: Vec<Tensor<T>>,
    /// `None` at step 0
    pub fields: Vec<Option<AlignmentField<T>>>,
}

impl UnrollResult<f32> {
    /// Estimates of batch item `b` as clamped frames.
    pub fn estimate_frames(&self, b: usize) -> Result<FrameSequence> {
        FrameSequence::new(
            self.estimates
                .iter()
                .map(|t| Frame::from_tensor(t, b))
                .collect::<Result<_>>()?,
        )
    }

    pub fn warped_frames(&self, b: usize) -> Result<FrameSequence> {
        FrameSequence::new(
            self.warped_prevs
                .iter()
                .map(|t| Frame::from_tensor(t, b))
                .collect::<Result<_>>()?,
        )
    }
}

/// Inference unroll over the first `t_len` frames of `lr`, one fresh tape per step.
pub fn unroll<T: Real>(
    gen: &Generator<T>,
    align: &AlignNet<T>,
    lr: &[Tensor<T>],
    t_len: usize,
) -> Result<UnrollResult<T>> {
    check_pair(gen, align)?;
    if t_len < 1 {
        return Err(Error::invalid("unroll", "T must be at least 1"));
    }
    if lr.len() < t_len {
        return Err(Error::invalid(
            "unroll",
            format!("sequence has {} frames, {t_len} requested", lr.len()),
        ));
    }
    let s = gen.cfg.scale;
    let ls = lr[0].shape();
    let mut res = UnrollResult {
        estimates: Vec::with_capacity(t_len),
        warped_prevs: Vec::with_capacity(t_len),
        fields: Vec::with_capacity(t_len),
    };
    for t in 0..t_len {
        ensure_shape("unroll", ls, lr[t].shape())?;
        let (warped, features, field) = if t == 0 {
            (
                Tensor::zeros(Shape::new(ls.n, 3, ls.h * s, ls.w * s)),
                Tensor::zeros(ls.with_c(gen.cfg.motion_channels)),
                None,
            )
        } else {
            let f = align.estimate_alignment(&lr[t], &lr[t - 1])?;
            let warped = crate::align::warp_previous(&res.estimates[t - 1], &f)?;
            (warped, f.features.clone(), Some(f))
        };
        let est = gen.generate_frame(&lr[t], &warped, &features)?;
        res.estimates.push(est);
        res.warped_prevs.push(warped);
        res.fields.push(field);
    }
    Ok(res)
}

/// Inference unroll of a whole LR frame sequence.
pub fn upscale_sequence(gen: &Generator<f32>, align: &AlignNet<f32>, lr: &FrameSequence) -> Result<FrameSequence> {
    if lr.is_empty() {
        return Err(Error::invalid("upscale", "empty input sequence"));
    }
    let frames: Vec<Tensor<f32>> = lr.iter().map(Frame::to_tensor).collect();
    unroll(gen, align, &frames, frames.len())?.estimate_frames(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::AlignNetConfig;
    use crate::resample;
    use rand::Rng;

    fn pair(filters: usize) -> (Generator<f64>, AlignNet<f64>) {
        let g = Generator::build(
            GeneratorConfig {
                res_blocks: 1,
                filters,
                scale: 4,
                step: 2,
                motion_channels: 6,
            },
            1,
        )
        .unwrap();
        let a = AlignNet::build(
            AlignNetConfig {
                n: 2,
                res_blocks: 1,
                filters: 6,
                scale: 4,
            },
            2,
        )
        .unwrap();
        (g, a)
    }

    fn noise(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random::<f64>())
    }

    #[test]
    fn deterministic_build_and_closed_form_count() {
        let cfg = GeneratorConfig::default();
        let a = Generator::<f32>::build(cfg, 4).unwrap();
        let b = Generator::<f32>::build(cfg, 4).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.params.count(), cfg.param_count());
        // 3 + 3·16 + 64 input channels
        assert_eq!(a.params.get(a.input_conv().weight).shape().c, 115);
        let hand = (64 * 115 * 9 + 64) + 10 * 2 * (64 * 64 * 9 + 64) + 2 * (64 * 64 * 9 + 64) + (3 * 64 * 9 + 3);
        assert_eq!(cfg.param_count(), hand);
    }

    #[test]
    fn rejects_bad_configs() {
        let bad = GeneratorConfig { step: 3, ..Default::default() };
        assert!(Generator::<f32>::build(bad, 0).is_err());
        let bad = GeneratorConfig { res_blocks: 0, ..Default::default() };
        assert!(Generator::<f32>::build(bad, 0).is_err());
    }

    #[test]
    fn fresh_generator_passes_the_upscaled_input_through() {
        let (g, _) = pair(8);
        let y = noise(Shape::new(1, 3, 16, 16), 1);
        let out = g
            .generate_frame(&y, &Tensor::zeros(Shape::new(1, 3, 64, 64)), &Tensor::zeros(Shape::new(1, 6, 16, 16)))
            .unwrap();
        assert_eq!(out.shape(), Shape::new(1, 3, 64, 64));
        let nn = resample::nn_upsample(&y, 4).unwrap();
        let d = out.zip_map(&nn, |a, b| a - b).max_abs();
        assert!(d < 0.05, "{d}");
    }

    #[test]
    fn dimension_mismatches_are_errors() {
        let (g, _) = pair(4);
        let y = noise(Shape::new(1, 3, 8, 8), 1);
        let f = Tensor::zeros(Shape::new(1, 6, 8, 8));
        assert!(g.generate_frame(&y, &Tensor::zeros(Shape::new(1, 3, 16, 16)), &f).is_err());
        assert!(g
            .generate_frame(&y, &Tensor::zeros(Shape::new(1, 3, 32, 32)), &Tensor::zeros(Shape::new(1, 5, 8, 8)))
            .is_err());
    }

    #[test]
    fn unroll_lengths_and_shapes() {
        let (g, a) = pair(4);
        let lr: Vec<_> = (0..10).map(|i| noise(Shape::new(2, 3, 4, 4), i)).collect();
        let r = unroll(&g, &a, &lr, 10).unwrap();
        assert_eq!(r.estimates.len(), 10);
        assert_eq!(r.fields.len(), 10);
        assert!(r.fields[0].is_none() && r.fields[1..].iter().all(Option::is_some));
        assert!(r.estimates.iter().all(|e| e.shape() == Shape::new(2, 3, 16, 16)));
        assert_eq!(r.warped_prevs[0], Tensor::zeros(Shape::new(2, 3, 16, 16)));
        let one = unroll(&g, &a, &lr, 1).unwrap();
        assert_eq!(one.estimates[0], r.estimates[0]);
        assert!(unroll(&g, &a, &lr, 0).is_err());
        assert!(unroll(&g, &a, &lr[..3], 4).is_err());
    }

    #[test]
    fn tape_unroll_matches_inference_unroll() {
        let (g, a) = pair(4);
        let lr: Vec<_> = (0..3).map(|i| noise(Shape::new(1, 3, 4, 4), i)).collect();
        let r = unroll(&g, &a, &lr, 3).unwrap();
        let mut tape = Tape::new();
        let gp = g.params.bind(&mut tape, true);
        let ap = a.params.bind(&mut tape, true);
        let ys: Vec<Var> = lr.iter().map(|t| tape.constant(t.clone())).collect();
        let u = unroll_vars(&mut tape, &g, &gp, &a, &ap, &ys).unwrap();
        for (v, t) in u.estimates.iter().zip(&r.estimates) {
            assert_eq!(tape.value(*v), t);
        }
    }

    #[test]
    fn every_generator_parameter_gets_a_gradient() {
        let (g, a) = pair(4);
        let lr: Vec<_> = (0..2).map(|i| noise(Shape::new(1, 3, 4, 4), i)).collect();
        let mut tape = Tape::new();
        let gp = g.params.bind(&mut tape, true);
        let ap = a.params.bind(&mut tape, true);
        let ys: Vec<Var> = lr.iter().map(|t| tape.constant(t.clone())).collect();
        let u = unroll_vars(&mut tape, &g, &gp, &a, &ap, &ys).unwrap();
        let sq = tape.square(u.estimates[1]);
        let loss = tape.mean(sq);
        let grads = tape.backward(loss);
        for (id, gr) in g.params.ids().zip(g.params.gradients(&gp, &grads)) {
            assert!(gr.max_abs() > 0.0, "{}", g.params.name(id));
        }
    }

    #[test]
    fn shared_weights_are_untouched_by_unrolling() {
        let (g, a) = pair(4);
        let before = (g.params.clone(), a.params.clone());
        let lr: Vec<_> = (0..4).map(|i| noise(Shape::new(1, 3, 4, 4), i)).collect();
        unroll(&g, &a, &lr, 4).unwrap();
        assert_eq!((g.params.clone(), a.params.clone()), before);
    }

    #[test]
    fn mismatched_alignment_network_is_rejected() {
        let (g, _) = pair(4);
        let a = AlignNet::<f64>::build(AlignNetConfig { filters: 5, ..AlignNetConfig::default() }, 0).unwrap();
        let lr = vec![noise(Shape::new(1, 3, 4, 4), 0)];
        assert!(unroll(&g, &a, &lr, 1).is_err());
    }
}
