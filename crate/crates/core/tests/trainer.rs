mod common;

use damage_cot::checkpoint::{load_checkpoint, save_checkpoint};
use damage_cot::decoder::log_softmax_rows;
use damage_cot::lora::{detach, reattach};
use damage_cot::optim::{Optimizer, OptimizerConfig};
use damage_cot::trainer::{
    answer_loss, apply_freeze_policy, fit, mean_loss, train_step, BatchTarget, Regime, TrainConfig,
};
use damage_cot::{ErrorKind, Tape, Tensor};

use common::{bits, default_model, prepared, records};

fn sgd(lr: f64) -> Optimizer {
    Optimizer::new(OptimizerConfig::Sgd { lr }).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let recs = records(1, 1);
    let data = prepared(&default_model(&recs, 1), &recs);
    for config in [
        OptimizerConfig::Sgd { lr: 0.0 },
        OptimizerConfig::default().with_lr(0.0),
    ] {
        let mut model = default_model(&recs, 1);
        let before = bits(&model.store.flat_values());
        let mut opt = Optimizer::new(config).unwrap();
        let batch: Vec<_> = data.iter().collect();
        for _ in 0..2 {
            train_step(&mut model, &mut opt, &batch, None).unwrap();
        }
        assert_eq!(bits(&model.store.flat_values()), before);
    }
}

#[test]
fn small_step_descends() {
    let recs = records(1, 2);
    let mut model = default_model(&recs, 2);
    let data = prepared(&model, &recs);
    let batch: Vec<_> = data.iter().take(4).collect();
    let fixed: Vec<_> = batch.iter().map(|r| (*r).clone()).collect();
    let before = mean_loss(&model, &fixed).unwrap();
    let stats = train_step(&mut model, &mut sgd(1e-4), &batch, None).unwrap();
    assert_eq!(stats.loss, before);
    let after = mean_loss(&model, &fixed).unwrap();
    assert!(after <= before, "{after} > {before}");
}

#[test]
fn runs_are_bit_reproducible_at_step_100() {
    let recs = records(1, 3);
    let config = TrainConfig {
        steps: 100,
        batch_size: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut model = default_model(&recs, 3);
        let data = prepared(&model, &recs);
        let report = fit(&mut model, &data, &config, None, |_, _| {}).unwrap();
        assert_eq!(report.losses.len(), 100);
        (bits(&model.store.flat_values()), bits(&report.losses))
    };
    assert_eq!(run(), run());
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let recs = records(1, 4);
    let full = TrainConfig {
        steps: 12,
        batch_size: 3,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut straight = default_model(&recs, 4);
    let data = prepared(&straight, &recs);
    let whole = fit(&mut straight, &data, &full, None, |_, _| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = default_model(&recs, 4);
    let half = fit(
        &mut first,
        &data,
        &TrainConfig {
            steps: 5,
            ..full.clone()
        },
        None,
        |_, _| {},
    )
    .unwrap();
    save_checkpoint(dir.path(), &first, Some(&half.state)).unwrap();
    drop(first);

    let (mut resumed, state) = load_checkpoint(dir.path()).unwrap();
    let state = state.expect("training state saved");
    assert_eq!(state.step, 5);
    let rest = fit(&mut resumed, &data, &full, Some(state), |_, _| {}).unwrap();
    assert_eq!(bits(&rest.losses), bits(&whole.losses));
    assert_eq!(bits(&resumed.store.flat_values()), bits(&straight.store.flat_values()));

    // the same holds across the fine-tuning regime, adapters included
    let tune = TrainConfig {
        regime: Regime::PaperFinetune,
        steps: 6,
        ..full.clone()
    };
    let whole = fit(&mut straight, &data, &tune, None, |_, _| {}).unwrap();
    let half = fit(
        &mut resumed,
        &data,
        &TrainConfig {
            steps: 2,
            ..tune.clone()
        },
        None,
        |_, _| {},
    )
    .unwrap();
    save_checkpoint(dir.path(), &resumed, Some(&half.state)).unwrap();
    let (mut again, state) = load_checkpoint(dir.path()).unwrap();
    let rest = fit(&mut again, &data, &tune, state, |_, _| {}).unwrap();
    assert_eq!(bits(&rest.losses), bits(&whole.losses));
    assert_eq!(bits(&again.store.flat_values()), bits(&straight.store.flat_values()));
}

#[test]
fn loss_ignores_targets_outside_the_mask() {
    let recs = records(1, 5);
    let model = default_model(&recs, 5);
    let data = prepared(&model, &recs);
    let visual = model.visual_tensor(&data[0].image).unwrap();
    let target = data[0]
        .examples
        .iter()
        .find(|e| e.layout == damage_cot::cot::InferenceMode::Plain)
        .unwrap()
        .target
        .clone();
    let base = answer_loss(&model, Some(&visual), &target).unwrap();
    let mut scrambled = target.clone();
    for t in 0..scrambled.targets.len() {
        if !scrambled.mask[t] {
            scrambled.targets[t] = (scrambled.targets[t] + 7 * t + 1) % model.vocab.len();
        }
    }
    assert_ne!(scrambled.targets, target.targets);
    assert_eq!(
        answer_loss(&model, Some(&visual), &scrambled).unwrap().to_bits(),
        base.to_bits()
    );
}

#[test]
fn loss_matches_direct_log_probability_sum() {
    let recs = records(1, 6);
    let model = default_model(&recs, 6);
    let data = prepared(&model, &recs);
    for rec in &data[..3] {
        let visual = model.visual_tensor(&rec.image).unwrap();
        let ex = rec
            .examples
            .iter()
            .find(|e| e.layout == damage_cot::cot::InferenceMode::Plain)
            .unwrap();
        let t = &ex.target;
        let mut tape = Tape::new();
        let v = tape.leaf(visual.clone());
        let x = model.decoder.embed(&mut tape, &model.store, Some(v), &t.input).unwrap();
        let logits = model.decoder.forward_logits(&mut tape, &model.store, x).unwrap();
        let logp = log_softmax_rows(tape.value(logits)).unwrap();
        let mut oracle = 0.0;
        for pos in t.masked_positions() {
            oracle -= logp.at2(pos, t.targets[pos]);
        }
        let loss = answer_loss(&model, Some(&visual), t).unwrap();
        assert!((loss - oracle).abs() <= 1e-10, "{loss} vs {oracle}");
    }
}

#[test]
fn uniform_output_layer_costs_log_vocabulary_per_token() {
    let recs = records(1, 7);
    let mut model = default_model(&recs, 7);
    for name in ["decoder.out.w", "decoder.out.b"] {
        let id = model.store.find(name).unwrap();
        let shape = model.store.value(id).shape().to_vec();
        model.store.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    let v = model.vocab.len() as f64;
    let one = BatchTarget::answer(&[damage_cot::decoder::BOS], &[10]).unwrap();
    // one label token plus its end marker
    assert_eq!(one.label_tokens(), 2);
    let loss = answer_loss(&model, None, &one).unwrap();
    assert!((loss - 2.0 * v.ln()).abs() < 1e-12);

    let empty = BatchTarget {
        input: vec![1, 10],
        targets: vec![10, 2],
        mask: vec![false, false],
    };
    assert!(matches!(
        answer_loss(&model, None, &empty).map_err(|e| e.kind()),
        Err(ErrorKind::Usage)
    ));
}

#[test]
fn detached_decoder_is_unchanged_by_a_finetune_step() {
    let recs = records(1, 8);
    let mut model = default_model(&recs, 8);
    let data = prepared(&model, &recs);
    apply_freeze_policy(&mut model, Regime::PaperFinetune).unwrap();
    let text = model.vocab.tokenize("Q: Please describe the damage. A:");
    let base_logits = |m: &damage_cot::model::Model| {
        let mut tape = Tape::new();
        let x = m.decoder.embed(&mut tape, &m.store, None, &text).unwrap();
        let l = m.decoder.forward_logits(&mut tape, &m.store, x).unwrap();
        tape.value(l).clone()
    };
    let set = model.adapters.clone().unwrap();
    detach(&mut model.decoder, &set);
    let before = base_logits(&model);
    reattach(&mut model.decoder, &set);

    let mut opt = Optimizer::new(OptimizerConfig::default().with_lr(1e-2)).unwrap();
    let batch: Vec<_> = data.iter().collect();
    train_step(&mut model, &mut opt, &batch, None).unwrap();
    train_step(&mut model, &mut opt, &batch, None).unwrap();
    let adapted = base_logits(&model);
    detach(&mut model.decoder, &set);
    let after = base_logits(&model);
    assert!(before.bit_eq(&after));
    assert!(!adapted.bit_eq(&after), "the adapters should have moved");
}

#[test]
fn non_finite_loss_aborts_the_step() {
    let recs = records(1, 9);
    let mut model = default_model(&recs, 9);
    let data = prepared(&model, &recs);
    let id = model.store.find("decoder.out.w").unwrap();
    let shape = model.store.value(id).shape().to_vec();
    model.store.set_value(id, Tensor::full(&shape, 1e308)).unwrap();
    let before = bits(&model.store.flat_values());
    let err = train_step(&mut model, &mut sgd(1e-3), &[&data[0]], None).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Numeric, "{err}");
    assert_eq!(bits(&model.store.flat_values()), before);
}

#[test]
fn fit_rejects_an_empty_corpus_and_reports_every_step() {
    let recs = records(1, 10);
    let mut model = default_model(&recs, 10);
    let config = TrainConfig {
        steps: 7,
        batch_size: 2,
        ..TrainConfig::default()
    };
    assert!(fit(&mut model, &[], &config, None, |_, _| {}).is_err());
    let data = prepared(&model, &recs);
    let mut seen = Vec::new();
    let report = fit(&mut model, &data, &config, None, |s, st| seen.push((s, st.loss))).unwrap();
    assert_eq!(report.losses.len(), 7);
    assert_eq!(
        seen.iter().map(|s| s.0).collect::<Vec<_>>(),
        (1..=7).collect::<Vec<_>>()
    );
    assert_eq!(report.trainable, model.store.total_count());
}
