use proptest::prelude::*;
use vsr_core::align::FlowParams;
use vsr_core::archive::Archive;
use vsr_core::discriminator::{Discriminator, DiscriminatorConfig};
use vsr_core::metrics::{psnr, ssim};
use vsr_core::resample::{depth_to_space, multi_warp, space_to_depth, FlowStack};
use vsr_core::trainer::TrainConfig;
use vsr_core::{Frame, Shape, Tensor};

fn tensor(shape: Shape, values: &[f64]) -> Tensor<f64> {
    Tensor::from_fn(shape, |n, c, y, x| {
        let i = ((n * shape.c + c) * shape.h + y) * shape.w + x;
        values[i % values.len()]
    })
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, 1..64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_weights_form_a_partition(n in 1usize..6, h in 1usize..6, w in 1usize..6, logits in values()) {
        let s = Shape::new(1, n, h, w);
        let params = FlowParams { u: Tensor::zeros(s), v: Tensor::zeros(s), logits: tensor(s, &logits) };
        let flow = params.to_flow();
        for y in 0..h {
            for x in 0..w {
                let total: f64 = (0..n).map(|i| flow.w.at(0, i, y, x)).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!((0..n).all(|i| flow.w.at(0, i, y, x) >= 0.0));
            }
        }
    }

    #[test]
    fn constant_image_is_a_fixed_point(n in 1usize..6, h in 1usize..8, w in 1usize..8,
                                       level in 0.0f64..1.0, offs in values(), logits in values()) {
        let s = Shape::new(1, n, h, w);
        let scaled: Vec<f64> = offs.iter().map(|o| o * 3.0).collect();
        let params = FlowParams { u: tensor(s, &scaled), v: tensor(s, &offs), logits: tensor(s, &logits) };
        let img = Tensor::full(Shape::new(1, 3, h, w), level);
        let out = multi_warp(&img, &params.to_flow()).unwrap();
        prop_assert!(out.data().iter().all(|v| (v - level).abs() < 1e-12));
    }

    #[test]
    fn one_coordinate_embeds_exactly(n in 2usize..6, h in 1usize..8, w in 1usize..8,
                                     offs in values(), pix in values()) {
        let s = Shape::new(1, 1, h, w);
        let one = FlowParams { u: tensor(s, &offs), v: tensor(s, &pix), logits: Tensor::zeros(s) };
        let img = tensor(Shape::new(1, 2, h, w), &pix);
        let a = multi_warp(&img, &one.to_flow()).unwrap();
        let b = multi_warp(&img, &one.embed(n).unwrap().to_flow()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn space_depth_round_trip(s in 1usize..5, c in 1usize..4, hb in 1usize..4, wb in 1usize..4, vals in values()) {
        let x = tensor(Shape::new(2, c, s * hb, s * wb), &vals);
        let deep = space_to_depth(&x, s).unwrap();
        prop_assert_eq!(deep.shape(), Shape::new(2, c * s * s, hb, wb));
        prop_assert_eq!(depth_to_space(&deep, s).unwrap(), x);
    }

    #[test]
    fn psnr_decreases_as_error_grows(level in 0.1f32..0.9, d1 in 0.001f32..0.05, extra in 0.001f32..0.05) {
        let x = Frame::constant(6, 6, level);
        let near = Frame::constant(6, 6, level + d1);
        let far = Frame::constant(6, 6, level + d1 + extra);
        prop_assert!(psnr(&near, &x).unwrap() > psnr(&far, &x).unwrap());
    }

    #[test]
    fn ssim_of_identical_frames_is_one(seed in 0u32..1000) {
        let f = Frame::from_fn(16, 14, |c, y, x| ((x * 31 + y * 17 + c * 7 + seed as usize) % 23) as f32 / 22.0);
        prop_assert!((ssim(&f, &f).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn archive_round_trip(vals in prop::collection::vec(-1e6f32..1e6, 1..40), key in "[a-z]{1,8}", value in ".{0,12}") {
        let mut a = Archive::new();
        a.set_meta(key.clone(), value.clone());
        a.insert("t", Tensor::from_vec(Shape::new(1, 1, 1, vals.len()), vals.clone()).unwrap());
        let b = Archive::from_bytes(&a.to_bytes()).unwrap();
        prop_assert_eq!(b.meta(&key).unwrap(), value.as_str());
        prop_assert_eq!(b.get("t").unwrap().data(), &vals[..]);
    }

    #[test]
    fn config_text_round_trip(t in 2usize..12, batch in 1usize..9, w_t in 0.0f64..1.0, seed in any::<u64>()) {
        let mut cfg = TrainConfig::default();
        cfg.set("T", &t.to_string()).unwrap();
        cfg.set("batch", &batch.to_string()).unwrap();
        cfg.set("w_t", &w_t.to_string()).unwrap();
        cfg.set("seed", &seed.to_string()).unwrap();
        prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

#[test]
fn default_discriminator_starts_undecided() {
    let cfg = DiscriminatorConfig {
        height: 64,
        width: 64,
        ..Default::default()
    };
    let disc = Discriminator::<f32>::build(cfg, 0).unwrap();
    for seed in 0..3u32 {
        let frames: Vec<Tensor<f32>> = (0..cfg.frames)
            .map(|t| {
                Tensor::from_fn(Shape::new(2, 3, 64, 64), |n, c, y, x| {
                    ((x * 13 + y * 7 + c * 5 + n * 3 + t + seed as usize * 11) % 17) as f32 / 16.0
                })
            })
            .collect();
        for p in disc.discriminate(&frames).unwrap() {
            let logit = (p / (1.0 - p)).ln();
            assert!(logit.abs() < 5.0, "logit {logit}");
        }
    }
}

#[test]
fn identity_flow_reproduces_the_image() {
    let img = tensor(Shape::new(1, 3, 5, 7), &[0.1, 0.7, 0.3, 0.9, 0.5]);
    for n in 1..=5 {
        let out = multi_warp(&img, &FlowStack::identity(1, n, 5, 7)).unwrap();
        assert!(out.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
