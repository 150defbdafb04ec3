use damage_cot::dataset::{generate_synthetic, render_sample, DamageClass, SyntheticSpec};
use damage_cot::gradcheck::grad_check_params;
use damage_cot::segmenter::{
    corpus_loss, normalize_image, render_vr, train_segmenter, Activation, SegmentationMap, Segmenter, SegmenterConfig,
    SegmenterTrainConfig,
};
use damage_cot::{Error, ParamStore, RngStream, Tensor};

fn build(config: SegmenterConfig, seed: u64) -> (ParamStore, Segmenter) {
    let mut store = ParamStore::new();
    let seg = Segmenter::new(&mut store, config, &mut RngStream::new(seed)).unwrap();
    (store, seg)
}

fn small(channels: usize) -> SegmenterConfig {
    SegmenterConfig {
        channels,
        ..SegmenterConfig::default()
    }
}

fn sample(class: DamageClass, side: usize, seed: u64) -> (Tensor, Tensor) {
    let (img, mask) = render_sample(class, side, 0.6, &mut RngStream::new(seed));
    (normalize_image(&img).unwrap(), mask)
}

fn iou(a: &Tensor, b: &Tensor) -> f64 {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x > 0.5 && y > 0.5) as u8 as f64;
        union += (x > 0.5 || y > 0.5) as u8 as f64;
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

#[test]
fn full_segmenter_gradients_match_finite_differences() {
    for (bias, seed) in [(false, 1), (true, 2)] {
        let (store, seg) = build(
            SegmenterConfig {
                channels: 3,
                bias,
                ..SegmenterConfig::default()
            },
            seed,
        );
        let (img, mask) = sample(DamageClass::ConcreteHole, 8, seed);
        let report = grad_check_params(&store, &seg.param_ids(), 1e-6, None, |tape, s| {
            seg.bce_loss(tape, s, &img, &mask)
        })
        .unwrap();
        assert!(report.checked > 0);
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}

#[test]
fn extents_and_ranges_are_preserved() {
    let (store, seg) = build(small(4), 3);
    let mut rng = RngStream::new(4);
    let img = Tensor::from_fn(&[6, 11, 3], |_| rng.uniform());
    let map = seg.segment(&store, &img).unwrap();
    assert_eq!(map.prob.shape(), &[6, 11]);
    assert_eq!(map.mask.shape(), &[6, 11]);
    assert!(map.prob.data().iter().all(|p| (0.0..=1.0).contains(p)));
    assert!(map.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
    let vr = render_vr(&map, 3);
    assert_eq!(vr.shape(), &[6, 11, 3]);
}

#[test]
fn checkerboard_renders_channelwise() {
    let prob = Tensor::from_fn(&[4, 5], |i| ((i / 5 + i % 5) % 2) as f64);
    let vr = render_vr(&SegmentationMap::from_prob(prob.clone(), 0.5), 3);
    for (p, px) in vr.data().chunks(3).enumerate() {
        let want = 255.0 * prob.data()[p];
        assert!(px.iter().all(|&v| v == want));
    }
}

#[test]
fn identity_activation_makes_logits_linear() {
    let (store, seg) = build(
        SegmenterConfig {
            channels: 4,
            activation: Activation::Identity,
            ..SegmenterConfig::default()
        },
        5,
    );
    let mut rng = RngStream::new(6);
    let x = Tensor::from_fn(&[7, 7, 3], |_| rng.uniform());
    let y = Tensor::from_fn(&[7, 7, 3], |_| rng.uniform());
    let lx = seg.logits(&store, &x).unwrap();
    let ly = seg.logits(&store, &y).unwrap();
    let a = -2.5;
    let scaled = seg.logits(&store, &x.map(|v| a * v)).unwrap();
    assert!(scaled.max_abs_diff(&lx.map(|v| a * v)) < 1e-12);
    let sum = Tensor::from_fn(&[7, 7, 3], |i| x.data()[i] + y.data()[i]);
    let lsum = seg.logits(&store, &sum).unwrap();
    let expect = Tensor::from_fn(lx.shape(), |i| lx.data()[i] + ly.data()[i]);
    assert!(lsum.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn one_image_overfits_to_pixel_accuracy() {
    let (mut store, seg) = build(small(8), 7);
    let corpus = vec![sample(DamageClass::ConcreteHole, 16, 8)];
    let config = SegmenterTrainConfig {
        steps: 300,
        batch_size: 1,
        ..SegmenterTrainConfig::default()
    };
    train_segmenter(&seg, &mut store, &corpus, &config).unwrap();
    let map = seg.segment(&store, &corpus[0].0).unwrap();
    let agree = map
        .mask
        .data()
        .iter()
        .zip(corpus[0].1.data())
        .filter(|(a, b)| a == b)
        .count();
    let accuracy = agree as f64 / 256.0;
    assert!(accuracy >= 0.99, "pixel accuracy {accuracy}");
}

#[test]
fn eight_image_overfit_decreases_below_threshold() {
    let (mut store, seg) = build(small(16), 9);
    let corpus: Vec<_> = DamageClass::ALL
        .iter()
        .chain([DamageClass::ConcreteCrack].iter())
        .enumerate()
        .map(|(i, &c)| sample(c, 16, 100 + i as u64))
        .collect();
    let config = SegmenterTrainConfig {
        steps: 2000,
        batch_size: 8,
        eval_every: 50,
        target_loss: Some(0.05),
        ..SegmenterTrainConfig::default()
    };
    let report = train_segmenter(&seg, &mut store, &corpus, &config).unwrap();
    let evals: Vec<f64> = report.eval_losses.iter().map(|e| e.1).collect();
    let last = *evals.last().unwrap();
    assert!(last < 0.05, "final loss {last}, curve {evals:?}");
    for w in evals.windows(2) {
        assert!(w[1] <= w[0], "loss rose between checkpoints: {evals:?}");
    }
    assert_eq!(corpus_loss(&seg, &store, &corpus).unwrap(), last);
}

#[test]
fn trained_weights_find_held_out_cracks() {
    let spec = SyntheticSpec {
        per_class: 24,
        seed: 12,
        ..SyntheticSpec::default()
    };
    let records = generate_synthetic(&spec).unwrap();
    let cracks: Vec<_> = records
        .iter()
        .filter(|r| r.class() == DamageClass::ConcreteCrack)
        .map(|r| (normalize_image(&r.image).unwrap(), r.mask.clone()))
        .collect();
    let (train, held) = cracks.split_at(20);
    let (mut store, seg) = build(small(12), 13);
    let config = SegmenterTrainConfig {
        steps: 400,
        ..SegmenterTrainConfig::default()
    };
    train_segmenter(&seg, &mut store, train, &config).unwrap();
    let scores: Vec<f64> = held
        .iter()
        .map(|(img, mask)| iou(&seg.segment(&store, img).unwrap().mask, mask))
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    assert!(mean >= 0.5, "held-out crack IoU {scores:?}");
}

#[test]
fn training_is_bit_reproducible() {
    let corpus: Vec<_> = (0..3).map(|i| sample(DamageClass::SteelCorrosion, 8, i)).collect();
    let config = SegmenterTrainConfig {
        steps: 20,
        batch_size: 2,
        ..SegmenterTrainConfig::default()
    };
    let run = || {
        let (mut store, seg) = build(small(4), 14);
        train_segmenter(&seg, &mut store, &corpus, &config).unwrap();
        store.flat_values()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn bad_training_inputs_are_rejected() {
    let (mut store, seg) = build(small(4), 15);
    let config = SegmenterTrainConfig::default();
    assert!(matches!(
        train_segmenter(&seg, &mut store, &[], &config),
        Err(Error::Contract(_))
    ));
    let img = Tensor::zeros(&[4, 4, 3]);
    let soft = Tensor::full(&[4, 4], 0.5);
    assert!(matches!(
        train_segmenter(&seg, &mut store, &[(img.clone(), soft)], &config),
        Err(Error::Contract(_))
    ));
    let wrong = Tensor::zeros(&[4, 5]);
    assert!(train_segmenter(&seg, &mut store, &[(img, wrong)], &config).is_err());
}
