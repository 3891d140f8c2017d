//! Training objectives on the tape, plus tensor-level evaluators in [`eval`].
//!
//! Pixel losses use mean reduction over batch, channels and pixels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::archive::Archive;
use crate::error::{ensure_shape, Error, Result};
use crate::graph::{Tape, Var};
use crate::nn::{Conv, ParamSet};
use crate::tensor::{Real, Shape, Tensor};

/// Floor inside every logarithm.
pub const LOG_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_e: f64,
    pub w_a: f64,
    pub w_g: f64,
    /// shared by the static and the statistics temporal terms
    pub w_t: f64,
    /// sharpness of the static mask
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_e: 0.01,
            w_a: 0.005,
            w_g: 1.0,
            w_t: 0.1,
            alpha: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("w_e", self.w_e),
            ("w_a", self.w_a),
            ("w_g", self.w_g),
            ("w_t", self.w_t),
            ("alpha", self.alpha),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config {
                    key: name.into(),
                    msg: format!("must be a finite non-negative number, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Individual terms of the combined objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms<T> {
    pub l_e: T,
    pub l_a: T,
    pub l_g: T,
    pub l_td: T,
    pub l_ts: T,
}

impl<T: Copy> LossTerms<T> {
    pub fn named(&self) -> [(&'static str, T); 5] {
        [
            ("l_e", self.l_e),
            ("l_a", self.l_a),
            ("l_g", self.l_g),
            ("l_td", self.l_td),
            ("l_ts", self.l_ts),
        ]
    }
}

/// `w_e·L_E + w_a·L_A + w_g·L_G + w_t·(L_Td + L_Ts)`; a non-finite term is an error naming it.
pub fn combined_loss(w: &LossWeights, terms: &LossTerms<f64>) -> Result<f64> {
    for (name, v) in terms.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite { term: name, iteration: 0 });
        }
    }
    Ok(w.w_e * terms.l_e + w.w_a * terms.l_a + w.w_g * terms.l_g + w.w_t * (terms.l_td + terms.l_ts))
}

/// Tape version of [`combined_loss`].
pub fn combined_loss_var<T: Real>(tape: &mut Tape<T>, w: &LossWeights, terms: &LossTerms<Var>) -> Result<Var> {
    let parts = [
        tape.scale(terms.l_e, T::lit(w.w_e)),
        tape.scale(terms.l_a, T::lit(w.w_a)),
        tape.scale(terms.l_g, T::lit(w.w_g)),
        tape.scale(terms.l_td, T::lit(w.w_t)),
        tape.scale(terms.l_ts, T::lit(w.w_t)),
    ];
    tape.add_all(&parts)
}

pub fn l1_loss<T: Real>(tape: &mut Tape<T>, x_hat: Var, x: Var) -> Result<Var> {
    let d = tape.sub(x_hat, x)?;
    let a = tape.abs(d);
    Ok(tape.mean(a))
}

/// `−log d`, averaged over the batch.
pub fn adversarial_g_loss<T: Real>(tape: &mut Tape<T>, d_fake: Var) -> Var {
    let l = tape.log_floor(d_fake, T::lit(LOG_EPS));
    let m = tape.mean(l);
    tape.scale(m, -T::one())
}

/// `−log d_real − log(1 − d_fake)`, each averaged over the batch.
pub fn adversarial_d_loss<T: Real>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let lr = tape.log_floor(d_real, T::lit(LOG_EPS));
    let lr = tape.mean(lr);
    let one_minus = tape.scale(d_fake, -T::one());
    let one_minus = tape.add_scalar(one_minus, T::one());
    let lf = tape.log_floor(one_minus, T::lit(LOG_EPS));
    let lf = tape.mean(lf);
    let s = tape.add(lr, lf)?;
    Ok(tape.scale(s, -T::one()))
}

/// Per-item Gram matrix normalized by `c·h·w`, shape `[n, 1, c, c]`.
pub fn gram_matrix<T: Real>(tape: &mut Tape<T>, features: Var) -> Result<Var> {
    tape.gram(features)
}

/// Per-pixel `exp(−α Σ_c (x_t − x_prev)²)`, shape `[n, 1, h, w]`.
pub fn static_mask<T: Real>(tape: &mut Tape<T>, x_t: Var, x_prev: Var, alpha: f64) -> Result<Var> {
    let d = tape.sub(x_t, x_prev)?;
    let sq = tape.square(d);
    let s = tape.sum_channels(sq);
    let s = tape.scale(s, T::lit(-alpha));
    Ok(tape.exp(s))
}

/// Mean over pixels of `mask · mean_c |x̂_t − x̂_{t−1}|`.
pub fn static_temporal_loss<T: Real>(tape: &mut Tape<T>, est_t: Var, est_prev: Var, mask: Var) -> Result<Var> {
    let d = tape.sub(est_t, est_prev)?;
    let a = tape.abs(d);
    let m = tape.mul_mask(a, mask)?;
    Ok(tape.mean(m))
}

/// Per-pixel population variance over the frames in `xs`.
pub fn temporal_variance<T: Real>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    let inv_t = T::one() / T::from_usize(xs.len()).unwrap();
    let sum = tape.add_all(xs)?;
    let mu = tape.scale(sum, inv_t);
    let mut devs = Vec::with_capacity(xs.len());
    for &x in xs {
        let d = tape.sub(x, mu)?;
        devs.push(tape.square(d));
    }
    let s = tape.add_all(&devs)?;
    Ok(tape.scale(s, inv_t))
}

/// Mean absolute difference of the temporal variance maps of `est` and `gt`.
pub fn temporal_statistics_loss<T: Real>(tape: &mut Tape<T>, est: &[Var], gt: &[Var]) -> Result<Var> {
    if est.len() != gt.len() {
        return Err(Error::invalid(
            "temporal_statistics_loss",
            format!("{} estimated vs {} ground-truth frames", est.len(), gt.len()),
        ));
    }
    if est.len() < 2 {
        return Err(Error::invalid("temporal_statistics_loss", "needs at least 2 frames"));
    }
    let shape = tape.shape(est[0]);
    for &v in est.iter().chain(gt) {
        ensure_shape("temporal_statistics_loss", shape, tape.shape(v))?;
    }
    let ve = temporal_variance(tape, est)?;
    let vg = temporal_variance(tape, gt)?;
    l1_loss(tape, ve, vg)
}

/// One layer of a [`FeatureExtractor`]: conv followed by ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub tap: bool,
}

/// Input gain of the random-weight extractor. Gram differences grow with its
/// square; at 1 the texture term is too weak to hold the generator during
/// adversarial training.
pub const RANDOM_FEATURE_INPUT_SCALE: f64 = 16.0;

/// Frozen convolutional feature extractor whose tapped activations feed the
/// texture loss. Its parameters are only ever bound as constants.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T> {
    params: ParamSet<T>,
    layers: Vec<(Conv, bool)>,
    input_scale: f64,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn new(layers: &[LayerSpec], seed: u64) -> Result<Self> {
        if !layers.iter().any(|l| l.tap) {
            return Err(Error::invalid("feature extractor", "no tapped layer"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut c_in = 3;
        let mut out = Vec::with_capacity(layers.len());
        for (i, l) in layers.iter().enumerate() {
            if l.c_out == 0 || l.kernel == 0 || l.stride == 0 {
                return Err(Error::invalid("feature extractor", format!("layer {i} has a zero size")));
            }
            let conv = Conv::new(&mut params, &format!("feat.layer{i}"), c_in, l.c_out, l.kernel, l.stride, 1.0, &mut rng);
            out.push((conv, l.tap));
            c_in = l.c_out;
        }
        Ok(FeatureExtractor {
            params,
            layers: out,
            input_scale: 1.0,
        })
    }

    /// Three tapped 3×3 layers of widths 8, 16, 32, the last two strided.
    pub fn default_random(seed: u64) -> Self {
        let l = |c_out, stride| LayerSpec {
            c_out,
            kernel: 3,
            stride,
            tap: true,
        };
        Self::new(&[l(8, 1), l(16, 2), l(32, 2)], seed)
            .expect("static layer list is valid")
            .with_input_scale(RANDOM_FEATURE_INPUT_SCALE)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    /// Multiplies inputs by `scale` before the first layer.
    pub fn with_input_scale(mut self, scale: f64) -> Self {
        self.input_scale = scale;
        self
    }

    pub fn input_scale(&self) -> f64 {
        self.input_scale
    }

    /// Replaces the weights with `feat.layer{i}.weight` / `.bias` tensors of an archive.
    /// The input scale comes from the `input_scale` metadata entry, 1 if absent.
    pub fn load_weights(&mut self, archive: &Archive) -> Result<()> {
        let scale = match archive.meta.get("input_scale") {
            Some(_) => archive.meta_parse("input_scale")?,
            None => 1.0,
        };
        self.params.load_from(|name| archive.get(name).map(|t| t.cast()))?;
        self.input_scale = scale;
        Ok(())
    }

    /// Tapped activations of `x` (`[n, 3, h, w]`).
    pub fn extract(&self, tape: &mut Tape<T>, x: Var) -> Result<Vec<Var>> {
        let p = self.params.bind(tape, false);
        let mut h = if self.input_scale == 1.0 { x } else { tape.scale(x, T::lit(self.input_scale)) };
        let mut taps = Vec::new();
        for (conv, tap) in &self.layers {
            let y = conv.forward(tape, &p, h)?;
            h = tape.relu(y);
            if *tap {
                taps.push(h);
            }
        }
        Ok(taps)
    }
}

/// Sum over tapped layers of the mean absolute Gram difference.
pub fn texture_loss<T: Real>(tape: &mut Tape<T>, fe: &FeatureExtractor<T>, x_hat: Var, x: Var) -> Result<Var> {
    ensure_shape("texture_loss", tape.shape(x), tape.shape(x_hat))?;
    let fa = fe.extract(tape, x_hat)?;
    let fb = fe.extract(tape, x)?;
    let mut parts = Vec::with_capacity(fa.len());
    for (a, b) in fa.into_iter().zip(fb) {
        let ga = gram_matrix(tape, a)?;
        let gb = gram_matrix(tape, b)?;
        parts.push(l1_loss(tape, ga, gb)?);
    }
    tape.add_all(&parts)
}

/// The same objectives evaluated on concrete tensors.
pub mod eval {
    use super::*;

    fn with_tape<T: Real, R>(f: impl FnOnce(&mut Tape<T>) -> Result<R>) -> Result<R> {
        let mut tape = Tape::new();
        f(&mut tape)
    }

    fn scalar2<T: Real>(
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>,
    ) -> Result<T> {
        with_tape(|t| {
            let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
            let out = f(t, va, vb)?;
            Ok(t.scalar(out))
        })
    }

    pub fn l1<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<T> {
        scalar2(x_hat, x, |t, a, b| l1_loss(t, a, b))
    }

    pub fn adversarial_g(d_fake: f64) -> f64 {
        -d_fake.max(LOG_EPS).ln()
    }

    pub fn adversarial_d(d_real: f64, d_fake: f64) -> f64 {
        -d_real.max(LOG_EPS).ln() - (1.0 - d_fake).max(LOG_EPS).ln()
    }

    pub fn gram<T: Real>(features: &Tensor<T>) -> Result<Tensor<T>> {
        with_tape(|t| {
            let v = t.constant(features.clone());
            let g = gram_matrix(t, v)?;
            Ok(t.value(g).clone())
        })
    }

    pub fn static_mask<T: Real>(x_t: &Tensor<T>, x_prev: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
        with_tape(|t| {
            let (a, b) = (t.constant(x_t.clone()), t.constant(x_prev.clone()));
            let m = super::static_mask(t, a, b, alpha)?;
            Ok(t.value(m).clone())
        })
    }

    pub fn static_temporal<T: Real>(est_t: &Tensor<T>, est_prev: &Tensor<T>, mask: &Tensor<T>) -> Result<T> {
        with_tape(|t| {
            let a = t.constant(est_t.clone());
            let b = t.constant(est_prev.clone());
            let m = t.constant(mask.clone());
            let l = static_temporal_loss(t, a, b, m)?;
            Ok(t.scalar(l))
        })
    }

    pub fn temporal_statistics<T: Real>(est: &[Tensor<T>], gt: &[Tensor<T>]) -> Result<T> {
        with_tape(|t| {
            let e: Vec<Var> = est.iter().map(|x| t.constant(x.clone())).collect();
            let g: Vec<Var> = gt.iter().map(|x| t.constant(x.clone())).collect();
            let l = temporal_statistics_loss(t, &e, &g)?;
            Ok(t.scalar(l))
        })
    }

    pub fn texture<T: Real>(fe: &FeatureExtractor<T>, x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<T> {
        scalar2(x_hat, x, |t, a, b| texture_loss(t, fe, a, b))
    }

    /// Shape of a Gram matrix for features of shape `s`.
    pub fn gram_shape(s: Shape) -> Shape {
        Shape::new(s.n, 1, s.c, s.c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn noise(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_, _, _, _| rng.random::<f64>())
    }

    #[test]
    fn l1_closed_forms() {
        let s = Shape::new(1, 3, 4, 4);
        let a = Tensor::full(s, 0.75);
        let b = Tensor::full(s, 0.25);
        assert_eq!(eval::l1(&a, &b).unwrap(), 0.5);
        assert_eq!(eval::l1(&a, &a).unwrap(), 0.0);
        assert!(eval::l1(&a, &Tensor::zeros(Shape::new(1, 3, 4, 5))).is_err());
    }

    #[test]
    fn adversarial_closed_forms() {
        assert_eq!(eval::adversarial_g(1.0), 0.0);
        assert!((eval::adversarial_g((-1.0f64).exp()) - 1.0).abs() < 1e-15);
        assert!((eval::adversarial_g(0.5) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(eval::adversarial_d(1.0, 0.0), 0.0);
        assert!((eval::adversarial_d(0.5, 0.5) - 2.0 * 2f64.ln()).abs() < 1e-15);
        assert!(eval::adversarial_g(0.0).is_finite());

        let mut tape = Tape::<f64>::new();
        let dr = tape.constant(Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.9, 0.7]).unwrap());
        let df = tape.constant(Tensor::from_vec(Shape::new(2, 1, 1, 1), vec![0.2, 0.4]).unwrap());
        let ld = adversarial_d_loss(&mut tape, dr, df).unwrap();
        let want = (eval::adversarial_d(0.9, 0.2) + eval::adversarial_d(0.7, 0.4)) / 2.0;
        assert!((tape.scalar(ld) - want).abs() < 1e-14);
        let lg = adversarial_g_loss(&mut tape, df);
        assert!((tape.scalar(lg) - (eval::adversarial_g(0.2) + eval::adversarial_g(0.4)) / 2.0).abs() < 1e-14);
    }

    #[test]
    fn combined_weights() {
        let w = LossWeights::default();
        let z = LossTerms::default();
        assert_eq!(combined_loss(&w, &z).unwrap(), 0.0);
        assert_eq!(combined_loss(&w, &LossTerms { l_e: 1.0, ..z }).unwrap(), 0.01);
        let t = combined_loss(&w, &LossTerms { l_td: 1.0, l_ts: 1.0, ..z }).unwrap();
        assert!((t - 0.2).abs() < 1e-15);
        let err = combined_loss(&w, &LossTerms { l_g: f64::NAN, ..z }).unwrap_err();
        assert!(err.to_string().contains("l_g"));
    }

    #[test]
    fn gram_oracle_and_structure() {
        let f = noise(Shape::new(1, 3, 4, 4), 1);
        let g = eval::gram(&f).unwrap();
        assert_eq!(g.shape(), eval::gram_shape(f.shape()));
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for y in 0..4 {
                    for x in 0..4 {
                        acc += f.at(0, i, y, x) * f.at(0, j, y, x);
                    }
                }
                assert!((g.at(0, 0, i, j) - acc / 48.0).abs() < 1e-12);
            }
        }
        let onehot = Tensor::from_fn(Shape::new(1, 2, 1, 2), |_, c, _, x| if c == x { 1.0 } else { 0.0 });
        let g = eval::gram(&onehot).unwrap();
        assert_eq!((g.at(0, 0, 0, 1), g.at(0, 0, 1, 0)), (0.0, 0.0));
        assert!(g.at(0, 0, 0, 0) > 0.0);
        let same = Tensor::from_fn(Shape::new(1, 3, 2, 2), |_, _, y, x| (y * 2 + x) as f64);
        let g = eval::gram(&same).unwrap();
        assert!(g.data().iter().all(|&v| v == g.data()[0]));
    }

    #[test]
    fn static_mask_calibration() {
        let s = Shape::new(1, 3, 1, 1);
        let a = Tensor::from_vec(s, vec![0.1, 0.2, 0.3]).unwrap();
        // channel differences whose squares sum to 0.0461
        let b = Tensor::from_vec(s, vec![0.1 + 0.19, 0.2 + 0.1, 0.3]).unwrap();
        let m = eval::static_mask(&a, &b, 100.0).unwrap();
        assert!((m.data()[0] - (-4.61f64).exp()).abs() < 1e-9);
        assert!((m.data()[0] - 0.009952).abs() < 1e-6);
        let c = a.map(|v| v + 0.3);
        assert!(eval::static_mask(&a, &c, 100.0).unwrap().data()[0] < 2e-12);
        assert_eq!(eval::static_mask(&a, &a, 100.0).unwrap().data()[0], 1.0);
    }

    #[test]
    fn static_temporal_oracle() {
        let s = Shape::new(2, 3, 3, 4);
        let a = noise(s, 1);
        let b = noise(s, 2);
        let m = noise(Shape::new(2, 1, 3, 4), 3);
        let got = eval::static_temporal(&a, &b, &m).unwrap();
        let mut acc = 0.0;
        for n in 0..2 {
            for y in 0..3 {
                for x in 0..4 {
                    let d: f64 = (0..3).map(|c| (a.at(n, c, y, x) - b.at(n, c, y, x)).abs()).sum::<f64>() / 3.0;
                    acc += m.at(n, 0, y, x) * d;
                }
            }
        }
        assert!((got - acc / 24.0).abs() < 1e-12);
        assert_eq!(eval::static_temporal(&a, &a, &m).unwrap(), 0.0);
        assert_eq!(eval::static_temporal(&a, &b, &Tensor::zeros(m.shape())).unwrap(), 0.0);
    }

    #[test]
    fn temporal_statistics_oracle() {
        let s = Shape::new(1, 3, 2, 2);
        let est: Vec<_> = (0..3).map(|i| noise(s, i)).collect();
        let gt: Vec<_> = (0..3).map(|i| noise(s, 10 + i)).collect();
        let var = |xs: &[Tensor<f64>], i: usize| {
            let m = xs.iter().map(|x| x.data()[i]).sum::<f64>() / 3.0;
            xs.iter().map(|x| (x.data()[i] - m).powi(2)).sum::<f64>() / 3.0
        };
        let want = (0..s.len()).map(|i| (var(&est, i) - var(&gt, i)).abs()).sum::<f64>() / s.len() as f64;
        assert!((eval::temporal_statistics(&est, &gt).unwrap() - want).abs() < 1e-12);
        assert_eq!(eval::temporal_statistics(&est, &est).unwrap(), 0.0);
        let c1 = vec![Tensor::full(s, 0.2); 3];
        let c2 = vec![Tensor::full(s, 0.9); 3];
        assert_eq!(eval::temporal_statistics(&c1, &c2).unwrap(), 0.0);
        assert!(eval::temporal_statistics(&est[..1], &gt[..1]).is_err());
        assert!(eval::temporal_statistics(&est, &gt[..2]).is_err());
    }

    #[test]
    fn texture_properties() {
        let fe = FeatureExtractor::<f64>::default_random(0);
        let a = noise(Shape::new(1, 3, 8, 8), 1);
        let b = noise(Shape::new(1, 3, 8, 8), 2);
        assert_eq!(eval::texture(&fe, &a, &a).unwrap(), 0.0);
        let ab = eval::texture(&fe, &a, &b).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, eval::texture(&fe, &b, &a).unwrap());

        // a 1×1 extractor pools over space, so a pixel permutation is invisible
        let point = FeatureExtractor::<f64>::new(
            &[LayerSpec {
                c_out: 4,
                kernel: 1,
                stride: 1,
                tap: true,
            }],
            3,
        )
        .unwrap();
        let perm = Tensor::from_fn(a.shape(), |n, c, y, x| a.at(n, c, 7 - x, y));
        assert!(eval::texture(&point, &a, &perm).unwrap().abs() < 1e-15);
    }

    #[test]
    fn texture_matches_independent_composition() {
        let fe = FeatureExtractor::<f64>::default_random(5);
        let a = noise(Shape::new(1, 3, 8, 8), 1);
        let b = noise(Shape::new(1, 3, 8, 8), 2);
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let vb = tape.constant(b.clone());
        let fa = fe.extract(&mut tape, va).unwrap();
        let fb = fe.extract(&mut tape, vb).unwrap();
        let mut want = 0.0;
        for (x, y) in fa.iter().zip(&fb) {
            let gx = eval::gram(tape.value(*x)).unwrap();
            let gy = eval::gram(tape.value(*y)).unwrap();
            want += gx.zip_map(&gy, |p, q| (p - q).abs()).mean();
        }
        assert!((eval::texture(&fe, &a, &b).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn extractor_weights_load_from_an_archive() {
        let src = FeatureExtractor::<f32>::default_random(1);
        let mut ar = Archive::new();
        for (n, t) in src.params().iter() {
            ar.insert(n, t.clone());
        }
        let mut dst = FeatureExtractor::<f32>::default_random(2);
        assert_ne!(dst, src);
        dst.load_weights(&ar).unwrap();
        assert_eq!(dst.input_scale(), 1.0);
        ar.set_meta("input_scale", RANDOM_FEATURE_INPUT_SCALE);
        dst.load_weights(&ar).unwrap();
        assert_eq!(dst, src);
        assert!(dst.load_weights(&Archive::new()).is_err());
    }
}
