//! Training: an L1 pretraining phase followed by alternating
//! discriminator / generator updates, with checkpoints and a CSV loss log.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{AlignNet, AlignNetConfig};
use crate::archive::Archive;
use crate::dataseq::{check_clip_constraints, sample_clip_batch, ClipBatch, ResampleKernel, SequencePair};
use crate::discriminator::{BnMode, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{unroll_vars, Generator, GeneratorConfig};
use crate::graph::{Tape, Var};
use crate::losses::{self, FeatureExtractor, LossTerms, LossWeights};
use crate::nn::ParamSet;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
/// `d_fake` below this for a whole epoch triggers a saturation warning.
const SATURATION: f64 = 1e-6;

/// All training settings. Parsed from flat `key = value` text; see
/// [`TrainConfig::KEYS`] for the accepted keys.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub t_len: usize,
    pub batch: usize,
    pub crop_hr: usize,
    pub scale: usize,
    pub n: usize,
    pub pretrain_iters: Option<u64>,
    pub pretrain_epochs: f64,
    pub main_iters: Option<u64>,
    pub main_epochs: f64,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// 0 disables periodic checkpoints
    pub checkpoint_interval: u64,
    pub gen_res_blocks: usize,
    pub gen_filters: usize,
    pub align_res_blocks: usize,
    pub align_filters: usize,
    pub disc_blocks: usize,
    pub disc_base_filters: usize,
    pub disc_dense_width: usize,
    /// dataset manifest
    pub data: Option<PathBuf>,
    pub kernel: ResampleKernel,
    /// tensor archive with pretrained feature-extractor weights
    pub features: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            t_len: 10,
            batch: 8,
            crop_hr: 256,
            scale: 4,
            n: 5,
            pretrain_iters: None,
            pretrain_epochs: 2.0,
            main_iters: None,
            main_epochs: 4.0,
            learning_rate: 1e-4,
            seed: 0,
            weights: LossWeights::default(),
            checkpoint_interval: 1000,
            gen_res_blocks: 10,
            gen_filters: 64,
            align_res_blocks: 10,
            align_filters: 64,
            disc_blocks: 5,
            disc_base_filters: 64,
            disc_dense_width: 1024,
            data: None,
            kernel: ResampleKernel::Bicubic,
            features: None,
        }
    }
}

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| Error::Config {
        key: key.into(),
        msg: format!("cannot parse `{value}`"),
    })
}

fn optional_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "T",
        "batch",
        "crop_hr",
        "scale",
        "n",
        "pretrain_iters",
        "pretrain_epochs",
        "main_iters",
        "main_epochs",
        "learning_rate",
        "seed",
        "w_e",
        "w_a",
        "w_g",
        "w_t",
        "alpha",
        "checkpoint_interval",
        "gen_res_blocks",
        "gen_filters",
        "align_res_blocks",
        "align_filters",
        "disc_blocks",
        "disc_base_filters",
        "disc_dense_width",
        "data",
        "kernel",
        "features",
    ];

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "T" => self.t_len = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "crop_hr" => self.crop_hr = parse_value(key, v)?,
            "scale" => self.scale = parse_value(key, v)?,
            "n" => self.n = parse_value(key, v)?,
            "pretrain_iters" => self.pretrain_iters = Some(parse_value(key, v)?),
            "pretrain_epochs" => self.pretrain_epochs = parse_value(key, v)?,
            "main_iters" => self.main_iters = Some(parse_value(key, v)?),
            "main_epochs" => self.main_epochs = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "w_e" => self.weights.w_e = parse_value(key, v)?,
            "w_a" => self.weights.w_a = parse_value(key, v)?,
            "w_g" => self.weights.w_g = parse_value(key, v)?,
            "w_t" => self.weights.w_t = parse_value(key, v)?,
            "alpha" => self.weights.alpha = parse_value(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse_value(key, v)?,
            "gen_res_blocks" => self.gen_res_blocks = parse_value(key, v)?,
            "gen_filters" => self.gen_filters = parse_value(key, v)?,
            "align_res_blocks" => self.align_res_blocks = parse_value(key, v)?,
            "align_filters" => self.align_filters = parse_value(key, v)?,
            "disc_blocks" => self.disc_blocks = parse_value(key, v)?,
            "disc_base_filters" => self.disc_base_filters = parse_value(key, v)?,
            "disc_dense_width" => self.disc_dense_width = parse_value(key, v)?,
            "data" => self.data = optional_path(v),
            "kernel" => {
                self.kernel = v.parse().map_err(|e: Error| Error::Config {
                    key: key.into(),
                    msg: e.to_string(),
                })?
            }
            "features" => self.features = optional_path(v),
            other => {
                return Err(Error::Config {
                    key: other.into(),
                    msg: "unknown configuration key".into(),
                })
            }
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.into(),
                msg: format!("line {}: expected `key = value`", i + 1),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `data`/`features` path resolves against the file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data, &mut cfg.features].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Canonical text form; parsing it reproduces the config.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let opt = |v: Option<u64>| v.map(|x| x.to_string());
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into());
        let mut pairs: Vec<(&str, String)> = vec![
            ("T", self.t_len.to_string()),
            ("batch", self.batch.to_string()),
            ("crop_hr", self.crop_hr.to_string()),
            ("scale", self.scale.to_string()),
            ("n", self.n.to_string()),
        ];
        if let Some(v) = opt(self.pretrain_iters) {
            pairs.push(("pretrain_iters", v));
        }
        pairs.push(("pretrain_epochs", self.pretrain_epochs.to_string()));
        if let Some(v) = opt(self.main_iters) {
            pairs.push(("main_iters", v));
        }
        pairs.extend([
            ("main_epochs", self.main_epochs.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("seed", self.seed.to_string()),
            ("w_e", w.w_e.to_string()),
            ("w_a", w.w_a.to_string()),
            ("w_g", w.w_g.to_string()),
            ("w_t", w.w_t.to_string()),
            ("alpha", w.alpha.to_string()),
            ("checkpoint_interval", self.checkpoint_interval.to_string()),
            ("gen_res_blocks", self.gen_res_blocks.to_string()),
            ("gen_filters", self.gen_filters.to_string()),
            ("align_res_blocks", self.align_res_blocks.to_string()),
            ("align_filters", self.align_filters.to_string()),
            ("disc_blocks", self.disc_blocks.to_string()),
            ("disc_base_filters", self.disc_base_filters.to_string()),
            ("disc_dense_width", self.disc_dense_width.to_string()),
            ("data", path(&self.data)),
            ("kernel", self.kernel.to_string()),
            ("features", path(&self.features)),
        ]);
        let mut s = String::new();
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            res_blocks: self.gen_res_blocks,
            filters: self.gen_filters,
            scale: self.scale,
            step: (self.scale as f64).sqrt().round() as usize,
            motion_channels: self.align_filters,
        }
    }

    pub fn align_config(&self) -> AlignNetConfig {
        AlignNetConfig {
            n: self.n,
            res_blocks: self.align_res_blocks,
            filters: self.align_filters,
            scale: self.scale,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            blocks: self.disc_blocks,
            base_filters: self.disc_base_filters,
            dense_width: self.disc_dense_width,
            frames: self.t_len,
            height: self.crop_hr,
            width: self.crop_hr,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| {
            Err(Error::Config {
                key: key.into(),
                msg: msg.into(),
            })
        };
        if self.batch < 1 {
            return bad("batch", "must be at least 1");
        }
        if self.t_len < 2 {
            return bad("T", "must be at least 2 for the temporal losses");
        }
        if self.scale < 1 || self.crop_hr % self.scale != 0 || self.crop_hr == 0 {
            return bad("crop_hr", "must be a positive multiple of scale");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be finite and non-negative");
        }
        if !(self.pretrain_epochs >= 0.0 && self.main_epochs >= 0.0) {
            return bad("pretrain_epochs", "epoch counts must be non-negative");
        }
        self.weights.validate()?;
        let wrap = |key: &'static str, r: Result<()>| {
            r.map_err(|e| Error::Config {
                key: key.into(),
                msg: e.to_string(),
            })
        };
        wrap("gen_filters", self.generator_config().validate())?;
        wrap("align_filters", self.align_config().validate())?;
        wrap("disc_blocks", self.discriminator_config().validate())?;
        Ok(())
    }

    /// Architecture description; checkpoints refuse configs that differ in it.
    pub fn fingerprint_text(&self) -> String {
        format!(
            "scale={} n={} T={} crop_hr={} gen={}x{} align={}x{} disc={}x{}x{}",
            self.scale,
            self.n,
            self.t_len,
            self.crop_hr,
            self.gen_res_blocks,
            self.gen_filters,
            self.align_res_blocks,
            self.align_filters,
            self.disc_blocks,
            self.disc_base_filters,
            self.disc_dense_width
        )
    }

    /// 64-bit FNV-1a hash of [`Self::fingerprint_text`].
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint_text()
            .bytes()
            .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
    }
}

/// Clips per epoch: `Σ ⌊len / T⌋` over sequences, and the derived iteration count `⌈clips / batch⌉`.
pub fn iterations_per_epoch(dataset: &[SequencePair], t_len: usize, batch: usize) -> u64 {
    let clips: usize = dataset.iter().map(|p| p.len() / t_len.max(1)).sum();
    (clips.div_ceil(batch.max(1)) as u64).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Adversarial,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adversarial => "adversarial",
        }
    }
}

/// Losses and diagnostics of one step. Terms not computed in a phase are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub iteration: u64,
    pub phase: Phase,
    pub l_e: f64,
    pub l_a: Option<f64>,
    pub l_g: Option<f64>,
    pub l_td: Option<f64>,
    pub l_ts: Option<f64>,
    pub l_c: Option<f64>,
    pub l_d: Option<f64>,
    pub d_real: Option<f64>,
    pub d_fake: Option<f64>,
    /// largest |gradient| reaching generator/alignment parameters from L_D
    pub d_step_g_grad: Option<f64>,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "iteration,phase,l_e,l_a,l_g,l_td,l_ts,l_c,l_d,d_real,d_fake,wall_time";

    pub fn terms(&self) -> Option<LossTerms<f64>> {
        Some(LossTerms {
            l_e: self.l_e,
            l_a: self.l_a?,
            l_g: self.l_g?,
            l_td: self.l_td?,
            l_ts: self.l_ts?,
        })
    }

    pub fn csv_row(&self, wall: f64) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{},{},{:.9e},{},{},{},{},{},{},{},{},{:.3}",
            self.iteration,
            self.phase.as_str(),
            self.l_e,
            f(self.l_a),
            f(self.l_g),
            f(self.l_td),
            f(self.l_ts),
            f(self.l_c),
            f(self.l_d),
            f(self.d_real),
            f(self.d_fake),
            wall
        )
    }
}

/// Which halves of an adversarial step to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Updates {
    pub discriminator: bool,
    pub generator: bool,
}

impl Updates {
    pub const BOTH: Updates = Updates {
        discriminator: true,
        generator: true,
    };
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub gen: Generator<f32>,
    pub align: AlignNet<f32>,
    pub disc: Discriminator<f32>,
    pub features: FeatureExtractor<f32>,
    /// moments for the generator parameters followed by the alignment parameters
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    /// completed steps
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    saturated_run: u64,
}

fn joint(gen: &ParamSet<f32>, align: &ParamSet<f32>) -> Vec<Tensor<f32>> {
    gen.tensors().iter().chain(align.tensors()).cloned().collect()
}

fn check_finite(term: &'static str, v: f64, iteration: u64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { term, iteration })
    }
}

fn mean_of(tape: &mut Tape<f32>, parts: &[Var]) -> Result<Var> {
    let s = tape.add_all(parts)?;
    Ok(tape.scale(s, 1.0 / parts.len() as f32))
}

impl TrainState {
    /// Fresh, seeded state.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let gen = Generator::build(cfg.generator_config(), seed)?;
        let align = AlignNet::build(cfg.align_config(), seed.wrapping_add(1))?;
        let disc = Discriminator::build(cfg.discriminator_config(), seed.wrapping_add(2))?;
        let mut features = FeatureExtractor::default_random(seed.wrapping_add(3));
        if let Some(p) = &cfg.features {
            features.load_weights(&Archive::load(p)?)?;
        }
        let adam = AdamConfig {
            lr: cfg.learning_rate,
            ..Default::default()
        };
        let opt_g = Adam::new(adam, &joint(&gen.params, &align.params));
        let opt_d = Adam::new(adam, disc.params.tensors());
        Ok(TrainState {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a),
            cfg,
            gen,
            align,
            disc,
            features,
            opt_g,
            opt_d,
            iteration: 0,
            saturated_run: 0,
        })
    }

    fn apply_g(&mut self, grads: &[Tensor<f32>]) -> Result<()> {
        let mut params = joint(&self.gen.params, &self.align.params);
        self.opt_g.update(&mut params, grads)?;
        let ng = self.gen.params.len();
        let mut it = params.into_iter();
        for (dst, src) in self.gen.params.tensors_mut().iter_mut().zip(it.by_ref().take(ng)) {
            *dst = src;
        }
        for (dst, src) in self.align.params.tensors_mut().iter_mut().zip(it) {
            *dst = src;
        }
        Ok(())
    }

    /// One step on mean-over-unroll L1 only; the discriminator is untouched.
    pub fn pretrain_step(&mut self, batch: &ClipBatch) -> Result<StepLog> {
        batch.validate()?;
        let mut tape = Tape::new();
        let gp = self.gen.params.bind(&mut tape, true);
        let ap = self.align.params.bind(&mut tape, true);
        let lr: Vec<Var> = batch.lr.iter().map(|t| tape.constant(t.clone())).collect();
        let hr: Vec<Var> = batch.hr.iter().map(|t| tape.constant(t.clone())).collect();
        let un = unroll_vars(&mut tape, &self.gen, &gp, &self.align, &ap, &lr)?;
        let mut parts = Vec::with_capacity(hr.len());
        for (&e, &h) in un.estimates.iter().zip(&hr) {
            parts.push(losses::l1_loss(&mut tape, e, h)?);
        }
        let l_e = mean_of(&mut tape, &parts)?;
        let value = check_finite("l_e", tape.scalar(l_e) as f64, self.iteration)?;
        let grads = tape.backward(l_e);
        let mut g = self.gen.params.gradients(&gp, &grads);
        g.extend(self.align.params.gradients(&ap, &grads));
        self.apply_g(&g)?;
        self.iteration += 1;
        Ok(StepLog {
            iteration: self.iteration,
            phase: Phase::Pretrain,
            l_e: value,
            l_a: None,
            l_g: None,
            l_td: None,
            l_ts: None,
            l_c: None,
            l_d: None,
            d_real: None,
            d_fake: None,
            d_step_g_grad: None,
        })
    }

    pub fn adversarial_step(&mut self, batch: &ClipBatch) -> Result<StepLog> {
        self.adversarial_step_with(batch, Updates::BOTH)
    }

    /// One discriminator update on real vs detached generated streams, then one
    /// generator + alignment update of the combined loss, whose adversarial term
    /// comes from a fresh evaluation of the updated discriminator.
    pub fn adversarial_step_with(&mut self, batch: &ClipBatch, updates: Updates) -> Result<StepLog> {
        batch.validate()?;
        let it = self.iteration;
        let w = self.cfg.weights;
        let mut tape = Tape::new();
        let gp = self.gen.params.bind(&mut tape, true);
        let ap = self.align.params.bind(&mut tape, true);
        let lr: Vec<Var> = batch.lr.iter().map(|t| tape.constant(t.clone())).collect();
        let hr: Vec<Var> = batch.hr.iter().map(|t| tape.constant(t.clone())).collect();
        let un = unroll_vars(&mut tape, &self.gen, &gp, &self.align, &ap, &lr)?;
        let est = un.estimates;
        let clamped: Vec<Var> = est.iter().map(|&e| tape.clamp(e, 0.0, 1.0)).collect();

        // discriminator half: the fake stream is detached from the generator
        let fake: Vec<Var> = clamped.iter().map(|&c| tape.detach(c)).collect();
        let dp = self.disc.params.bind(&mut tape, true);
        let out_r = self.disc.forward(&mut tape, &dp, &hr, BnMode::Train)?;
        let out_f = self.disc.forward(&mut tape, &dp, &fake, BnMode::Train)?;
        let l_d = losses::adversarial_d_loss(&mut tape, out_r.prob, out_f.prob)?;
        let l_d_value = check_finite("l_d", tape.scalar(l_d) as f64, it)?;
        let d_real = tape.value(out_r.prob).mean() as f64;
        let d_fake = tape.value(out_f.prob).mean() as f64;
        let grads_d = tape.backward(l_d);
        let leak = self
            .gen
            .params
            .gradients(&gp, &grads_d)
            .iter()
            .chain(&self.align.params.gradients(&ap, &grads_d))
            .fold(0.0f64, |m, g| m.max(g.max_abs() as f64));
        if updates.discriminator {
            let dg = self.disc.params.gradients(&dp, &grads_d);
            self.opt_d.update(self.disc.params.tensors_mut(), &dg)?;
            self.disc.update_running(&out_r.stats);
            self.disc.update_running(&out_f.stats);
        }

        // generator half
        let dp2 = self.disc.params.bind(&mut tape, false);
        let out_a = self.disc.forward(&mut tape, &dp2, &clamped, BnMode::Train)?;
        let l_a = losses::adversarial_g_loss(&mut tape, out_a.prob);
        let mut e_parts = Vec::with_capacity(est.len());
        let mut g_parts = Vec::with_capacity(est.len());
        for (&e, &h) in est.iter().zip(&hr) {
            e_parts.push(losses::l1_loss(&mut tape, e, h)?);
            g_parts.push(losses::texture_loss(&mut tape, &self.features, e, h)?);
        }
        let l_e = mean_of(&mut tape, &e_parts)?;
        let l_g = mean_of(&mut tape, &g_parts)?;
        let mut td_parts = Vec::with_capacity(est.len() - 1);
        for t in 1..est.len() {
            let m = losses::static_mask(&mut tape, hr[t], hr[t - 1], w.alpha)?;
            td_parts.push(losses::static_temporal_loss(&mut tape, est[t], est[t - 1], m)?);
        }
        let l_td = mean_of(&mut tape, &td_parts)?;
        let l_ts = losses::temporal_statistics_loss(&mut tape, &est, &hr)?;
        let terms = LossTerms { l_e, l_a, l_g, l_td, l_ts };
        let l_c = losses::combined_loss_var(&mut tape, &w, &terms)?;
        let values = LossTerms {
            l_e: tape.scalar(l_e) as f64,
            l_a: tape.scalar(l_a) as f64,
            l_g: tape.scalar(l_g) as f64,
            l_td: tape.scalar(l_td) as f64,
            l_ts: tape.scalar(l_ts) as f64,
        };
        for (name, v) in values.named() {
            check_finite(name, v, it)?;
        }
        let l_c_value = check_finite("l_c", tape.scalar(l_c) as f64, it)?;
        if updates.generator {
            let grads = tape.backward(l_c);
            let mut g = self.gen.params.gradients(&gp, &grads);
            g.extend(self.align.params.gradients(&ap, &grads));
            self.apply_g(&g)?;
        }
        self.iteration += 1;
        Ok(StepLog {
            iteration: self.iteration,
            phase: Phase::Adversarial,
            l_e: values.l_e,
            l_a: Some(values.l_a),
            l_g: Some(values.l_g),
            l_td: Some(values.l_td),
            l_ts: Some(values.l_ts),
            l_c: Some(l_c_value),
            l_d: Some(l_d_value),
            d_real: Some(d_real),
            d_fake: Some(d_fake),
            d_step_g_grad: Some(leak),
        })
    }

    /// Resolved `(pretrain, adversarial)` iteration counts for `dataset`.
    pub fn schedule(&self, dataset: &[SequencePair]) -> (u64, u64) {
        let per = iterations_per_epoch(dataset, self.cfg.t_len, self.cfg.batch) as f64;
        let pre = self.cfg.pretrain_iters.unwrap_or((self.cfg.pretrain_epochs * per).ceil() as u64);
        let main = self.cfg.main_iters.unwrap_or((self.cfg.main_epochs * per).ceil() as u64);
        (pre, main)
    }

    /// Samples the next batch from the state's generator.
    pub fn next_batch(&mut self, dataset: &[SequencePair]) -> Result<ClipBatch> {
        let (b, _) = sample_clip_batch(dataset, self.cfg.batch, self.cfg.t_len, self.cfg.crop_hr, &mut self.rng)?;
        Ok(b)
    }

    /// Samples a batch and runs the step the schedule calls for.
    pub fn step(&mut self, dataset: &[SequencePair], pretrain_iters: u64) -> Result<StepLog> {
        let batch = self.next_batch(dataset)?;
        if self.iteration < pretrain_iters {
            self.pretrain_step(&batch)
        } else {
            self.adversarial_step(&batch)
        }
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = Archive::new();
        a.set_meta("format", "vsr-checkpoint");
        a.set_meta("checkpoint_version", CHECKPOINT_VERSION);
        a.set_meta("fingerprint", format!("{:016x}", self.cfg.fingerprint()));
        a.set_meta("fingerprint_text", self.cfg.fingerprint_text());
        a.set_meta("config", self.cfg.to_text());
        a.set_meta("iteration", self.iteration);
        a.set_meta("saturated_run", self.saturated_run);
        a.set_meta("rng_seed", self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect::<String>());
        a.set_meta("rng_stream", self.rng.get_stream());
        a.set_meta("rng_word_pos", self.rng.get_word_pos());
        a.set_meta("opt_g_step", self.opt_g.step);
        a.set_meta("opt_d_step", self.opt_d.step);
        for (n, t) in self.gen.params.iter().chain(self.align.params.iter()).chain(self.disc.params.iter()) {
            a.insert(n, t.clone());
        }
        for (n, t) in self.disc.running_tensors() {
            a.insert(n, t);
        }
        let g_names = self.gen.params.iter().chain(self.align.params.iter()).map(|(n, _)| n);
        for (i, n) in g_names.enumerate() {
            a.insert(format!("opt_g.m.{n}"), self.opt_g.m[i].clone());
            a.insert(format!("opt_g.v.{n}"), self.opt_g.v[i].clone());
        }
        for (i, (n, _)) in self.disc.params.iter().enumerate() {
            a.insert(format!("opt_d.m.{n}"), self.opt_d.m[i].clone());
            a.insert(format!("opt_d.v.{n}"), self.opt_d.v[i].clone());
        }
        a
    }

    /// Restores a state saved with an architecture-compatible `cfg`. Training
    /// settings (weights, learning rate, schedule) come from `cfg`, not the file.
    pub fn from_archive(a: &Archive, cfg: TrainConfig, allow_mismatch: bool) -> Result<Self> {
        check_header(a)?;
        let found = u64::from_str_radix(a.meta("fingerprint")?, 16)
            .map_err(|_| Error::format("checkpoint", "bad fingerprint"))?;
        if found != cfg.fingerprint() && !allow_mismatch {
            return Err(Error::FingerprintMismatch {
                expected: cfg.fingerprint(),
                found,
            });
        }
        let mut s = TrainState::new(cfg)?;
        let get = |n: &str| a.get(n).cloned();
        s.gen.params.load_from(get)?;
        s.align.params.load_from(get)?;
        s.disc.params.load_from(get)?;
        s.disc.load_running(get)?;
        let need = |n: String| a.get(&n).cloned().ok_or_else(|| Error::format("checkpoint", format!("missing `{n}`")));
        let g_names: Vec<String> = s.gen.params.iter().chain(s.align.params.iter()).map(|(n, _)| n.to_owned()).collect();
        for (i, n) in g_names.iter().enumerate() {
            s.opt_g.m[i] = need(format!("opt_g.m.{n}"))?;
            s.opt_g.v[i] = need(format!("opt_g.v.{n}"))?;
        }
        let d_names: Vec<String> = s.disc.params.iter().map(|(n, _)| n.to_owned()).collect();
        for (i, n) in d_names.iter().enumerate() {
            s.opt_d.m[i] = need(format!("opt_d.m.{n}"))?;
            s.opt_d.v[i] = need(format!("opt_d.v.{n}"))?;
        }
        s.opt_g.step = a.meta_parse("opt_g_step")?;
        s.opt_d.step = a.meta_parse("opt_d_step")?;
        s.iteration = a.meta_parse("iteration")?;
        s.saturated_run = a.meta_parse("saturated_run")?;
        let hex = a.meta("rng_seed")?;
        let mut seed = [0u8; 32];
        if hex.len() != 64 {
            return Err(Error::format("checkpoint", "bad rng seed"));
        }
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| Error::format("checkpoint", "bad rng seed"))?;
        }
        s.rng = ChaCha8Rng::from_seed(seed);
        s.rng.set_stream(a.meta_parse("rng_stream")?);
        s.rng.set_word_pos(a.meta_parse("rng_word_pos")?);
        Ok(s)
    }
}

fn check_header(a: &Archive) -> Result<()> {
    if a.meta("format")? != "vsr-checkpoint" {
        return Err(Error::format("checkpoint", "not a checkpoint archive"));
    }
    let v: u32 = a.meta_parse("checkpoint_version")?;
    if v != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("version {v} is not supported (expected {CHECKPOINT_VERSION})"),
        ));
    }
    Ok(())
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    state.to_archive().save(path)
}

/// Loads a checkpoint using the configuration stored inside it.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let a = Archive::load(path)?;
    check_header(&a)?;
    let cfg = TrainConfig::parse(a.meta("config")?)?;
    TrainState::from_archive(&a, cfg, false)
}

/// Loads a checkpoint against `cfg`; a differing architecture fingerprint is
/// refused unless `allow_mismatch`.
pub fn load_checkpoint_with(path: &Path, cfg: TrainConfig, allow_mismatch: bool) -> Result<TrainState> {
    TrainState::from_archive(&Archive::load(path)?, cfg, allow_mismatch)
}

/// Generator and alignment network of a checkpoint, for inference only.
pub fn load_model(path: &Path) -> Result<(Generator<f32>, AlignNet<f32>, TrainConfig)> {
    let a = Archive::load(path)?;
    check_header(&a)?;
    let cfg = TrainConfig::parse(a.meta("config")?)?;
    let mut gen = Generator::build(cfg.generator_config(), 0)?;
    let mut align = AlignNet::build(cfg.align_config(), 0)?;
    gen.params.load_from(|n| a.get(n).cloned())?;
    align.params.load_from(|n| a.get(n).cloned())?;
    Ok((gen, align, cfg))
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("losses.csv")
    }

    pub fn checkpoint_path(&self, iteration: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{iteration:08}.vsr"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.vsr")
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub pretrain_iters: u64,
    pub main_iters: u64,
    pub last: Option<StepLog>,
    pub final_checkpoint: PathBuf,
}

/// Runs (or resumes) the schedule until `pretrain + main` iterations are done,
/// appending every step to the loss log and checkpointing at the interval.
pub fn train(state: &mut TrainState, dataset: &[SequencePair], out: &RunOutput) -> Result<TrainSummary> {
    train_until(state, dataset, out, None)
}

/// Like [`train`] but stops after `stop_at` total iterations if given.
pub fn train_until(
    state: &mut TrainState,
    dataset: &[SequencePair],
    out: &RunOutput,
    stop_at: Option<u64>,
) -> Result<TrainSummary> {
    state.cfg.validate()?;
    check_clip_constraints(dataset, state.cfg.batch, state.cfg.t_len, state.cfg.crop_hr)?;
    if dataset[0].scale() != Some(state.cfg.scale) {
        return Err(Error::Config {
            key: "scale".into(),
            msg: format!("dataset scale {:?} differs from the configured {}", dataset[0].scale(), state.cfg.scale),
        });
    }
    let (pre, main) = state.schedule(dataset);
    let total = stop_at.map_or(pre + main, |s| s.min(pre + main));
    let per_epoch = iterations_per_epoch(dataset, state.cfg.t_len, state.cfg.batch);
    fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
    let log_path = out.log_path();
    let fresh = fs::metadata(&log_path).map(|m| m.len() == 0).unwrap_or(true);
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh {
        writeln!(log, "{}", StepLog::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
    }
    let start = Instant::now();
    let mut last = None;
    while state.iteration < total {
        let entry = state.step(dataset, pre)?;
        writeln!(log, "{}", entry.csv_row(start.elapsed().as_secs_f64())).map_err(|e| Error::io(&log_path, e))?;
        if let Some(df) = entry.d_fake {
            if df < SATURATION {
                state.saturated_run += 1;
                if state.saturated_run % per_epoch == 0 {
                    log::warn!(
                        "discriminator saturated: d_fake < {SATURATION:e} for the last {} iterations (iteration {})",
                        state.saturated_run,
                        state.iteration
                    );
                }
            } else {
                state.saturated_run = 0;
            }
        }
        if entry.iteration % 100 == 0 {
            log::info!(
                "iteration {} ({}) l_e {:.5}{}",
                entry.iteration,
                entry.phase.as_str(),
                entry.l_e,
                entry.l_c.map(|c| format!(" l_c {c:.5}")).unwrap_or_default()
            );
        }
        let interval = state.cfg.checkpoint_interval;
        if interval > 0 && state.iteration % interval == 0 {
            save_checkpoint(state, &out.checkpoint_path(state.iteration))?;
        }
        last = Some(entry);
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = out.final_checkpoint();
    save_checkpoint(state, &final_checkpoint)?;
    Ok(TrainSummary {
        pretrain_iters: pre,
        main_iters: main,
        last,
        final_checkpoint,
    })
}
