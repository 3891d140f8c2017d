//! Video discriminator: classifies a whole `T`-frame stream, given as the
//! channel concatenation of its frames, as real or generated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_shape, Error, Result};
use crate::graph::{BatchStats, Tape, Var};
use crate::nn::{Bound, Conv, Dense, ParamId, ParamSet};
use crate::tensor::{Real, Shape, Tensor};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscriminatorConfig {
    pub blocks: usize,
    pub base_filters: usize,
    /// leaky ReLU slope in thousandths (kept integral so the config is `Eq`)
    pub leaky_milli: u32,
    pub dense_width: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            blocks: 5,
            base_filters: 64,
            leaky_milli: 200,
            dense_width: 1024,
            frames: 10,
            height: 256,
            width: 256,
        }
    }
}

impl DiscriminatorConfig {
    pub fn leaky_slope(&self) -> f64 {
        self.leaky_milli as f64 / 1000.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 || self.base_filters < 1 || self.dense_width < 1 || self.frames < 1 {
            return Err(Error::invalid(
                "discriminator config",
                "blocks, base_filters, dense_width and frames must be ≥ 1",
            ));
        }
        let div = 1usize << self.blocks;
        if self.height == 0 || self.width == 0 || self.height % div != 0 || self.width % div != 0 {
            return Err(Error::invalid(
                "discriminator config",
                format!(
                    "input {}×{} is not divisible by 2^{} = {div}",
                    self.height, self.width, self.blocks
                ),
            ));
        }
        Ok(())
    }

    /// Output channels of block `i`: doubling from `base`, capped at `8·base`.
    pub fn block_channels(&self, i: usize) -> usize {
        (self.base_filters << i.min(3)).min(8 * self.base_filters)
    }

    /// `(channels, height, width)` entering the dense head.
    pub fn feature_dims(&self) -> (usize, usize, usize) {
        (
            self.block_channels(self.blocks - 1),
            self.height >> self.blocks,
            self.width >> self.blocks,
        )
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = 3 * self.frames;
        for i in 0..self.blocks {
            let c = self.block_channels(i);
            total += Conv::param_count(c_in, c, 3);
            if i > 0 {
                total += 2 * c;
            }
            c_in = c;
        }
        let (c, h, w) = self.feature_dims();
        total + Dense::param_count(c * h * w, self.dense_width) + Dense::param_count(self.dense_width, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

/// Whether batch normalization uses batch statistics or the running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running mean and variance of one batch-normalized block.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    cfg: DiscriminatorConfig,
    pub params: ParamSet<T>,
    convs: Vec<Conv>,
    norms: Vec<Option<Norm>>,
    pub running: Vec<Option<RunningStats<T>>>,
    hidden: Dense,
    out: Dense,
}

/// Discriminator output nodes.
#[derive(Clone, Debug)]
pub struct DiscOutput<T> {
    /// `[batch, 1, 1, 1]` probabilities
    pub prob: Var,
    pub logit: Var,
    /// batch statistics per block (`None` for unnormalized blocks or in eval mode)
    pub stats: Vec<Option<BatchStats<T>>>,
}

impl<T: Real> Discriminator<T> {
    pub fn build(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut running = Vec::new();
        let mut c_in = 3 * cfg.frames;
        for i in 0..cfg.blocks {
            let c = cfg.block_channels(i);
            convs.push(Conv::new(&mut params, &format!("disc.block{i}.conv"), c_in, c, 3, 2, 1.0, &mut rng));
            if i == 0 {
                norms.push(None);
                running.push(None);
            } else {
                let gamma = params.add(format!("disc.block{i}.bn.gamma"), Tensor::full(Shape::new(1, c, 1, 1), T::one()));
                let beta = params.add(format!("disc.block{i}.bn.beta"), Tensor::zeros(Shape::new(1, c, 1, 1)));
                norms.push(Some(Norm { gamma, beta }));
                running.push(Some(RunningStats {
                    mean: vec![T::zero(); c],
                    var: vec![T::one(); c],
                }));
            }
            c_in = c;
        }
        let (c, h, w) = cfg.feature_dims();
        let hidden = Dense::new(&mut params, "disc.dense0", c * h * w, cfg.dense_width, 1.0, &mut rng);
        let out = Dense::new(&mut params, "disc.dense1", cfg.dense_width, 1, 0.5, &mut rng);
        Ok(Discriminator {
            cfg,
            params,
            convs,
            norms,
            running,
            hidden,
            out,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Scores the stream `frames` (each `[batch, 3, h, w]`, in temporal order).
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, frames: &[Var], mode: BnMode) -> Result<DiscOutput<T>> {
        if frames.len() != self.cfg.frames {
            return Err(Error::invalid(
                "discriminate",
                format!("expected {} frames, got {}", self.cfg.frames, frames.len()),
            ));
        }
        let fs = tape.shape(frames[0]);
        ensure_shape("discriminate", Shape::new(fs.n, 3, self.cfg.height, self.cfg.width), fs)?;
        for &f in frames {
            ensure_shape("discriminate", fs, tape.shape(f))?;
        }
        let slope = T::lit(self.cfg.leaky_slope());
        let mut h = tape.concat(frames)?;
        let mut stats = Vec::with_capacity(self.convs.len());
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, p, h)?;
            match self.norms[i] {
                Some(norm) => {
                    let running = match mode {
                        BnMode::Train => None,
                        BnMode::Eval => self.running[i].as_ref().map(|r| (&r.mean[..], &r.var[..])),
                    };
                    let (y, st) =
                        tape.batch_norm(h, p.var(norm.gamma), p.var(norm.beta), running, T::lit(BN_EPS))?;
                    h = y;
                    stats.push(st);
                }
                None => stats.push(None),
            }
            h = tape.leaky_relu(h, slope);
        }
        let flat = tape.flatten(h);
        let d = self.hidden.forward(tape, p, flat)?;
        let d = tape.leaky_relu(d, slope);
        let logit = self.out.forward(tape, p, d)?;
        let prob = tape.sigmoid(logit);
        Ok(DiscOutput { prob, logit, stats })
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running(&mut self, stats: &[Option<BatchStats<T>>]) {
        let m = T::lit(BN_MOMENTUM);
        for (r, s) in self.running.iter_mut().zip(stats) {
            if let (Some(r), Some(s)) = (r.as_mut(), s.as_ref()) {
                for (a, b) in r.mean.iter_mut().zip(&s.mean) {
                    *a = (T::one() - m) * *a + m * *b;
                }
                for (a, b) in r.var.iter_mut().zip(&s.var) {
                    *a = (T::one() - m) * *a + m * *b;
                }
            }
        }
    }

    /// Per-item probabilities for concrete frames, using running statistics.
    pub fn discriminate(&self, frames: &[Tensor<T>]) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let vars: Vec<Var> = frames.iter().map(|f| tape.constant(f.clone())).collect();
        let out = self.forward(&mut tape, &p, &vars, BnMode::Eval)?;
        Ok(tape.value(out.prob).data().to_vec())
    }

    /// Names and tensors of the running statistics, for serialization.
    pub fn running_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, r) in self.running.iter().enumerate() {
            if let Some(r) = r {
                let s = Shape::new(1, r.mean.len(), 1, 1);
                out.push((format!("disc.block{i}.bn.running_mean"), Tensor::from_vec(s, r.mean.clone()).unwrap()));
                out.push((format!("disc.block{i}.bn.running_var"), Tensor::from_vec(s, r.var.clone()).unwrap()));
            }
        }
        out
    }

    pub fn load_running(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (i, r) in self.running.iter_mut().enumerate() {
            if let Some(r) = r {
                for (suffix, dst) in [("running_mean", &mut r.mean), ("running_var", &mut r.var)] {
                    let name = format!("disc.block{i}.bn.{suffix}");
                    let t = lookup(&name).ok_or_else(|| Error::format("parameters", format!("missing tensor `{name}`")))?;
                    if t.len() != dst.len() {
                        return Err(Error::format("parameters", format!("tensor `{name}` has the wrong length")));
                    }
                    dst.copy_from_slice(t.data());
                }
            }
        }
        Ok(())
    }
}
