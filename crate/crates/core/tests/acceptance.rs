//! Acceptance checks, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach stdout; exits non-zero on any failure.
//!
//!     cargo test -p damage-cot --test acceptance

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use damage_cot::cot::{run_cot_with, run_plain, run_stage1, visual_context, PromptTemplate};
use damage_cot::dataset::{
    evaluate_categories, generate_synthetic, mentions_class, parse_corpus, DamageClass, Split, SyntheticSpec,
    HIGH_CLUTTER,
};
use damage_cot::decoder::log_softmax_rows;
use damage_cot::diagnostics::{gradient_suite, softmax_row_deviation};
use damage_cot::lora::{merge_into_base, Projection};
use damage_cot::optim::{Optimizer, OptimizerConfig};
use damage_cot::pipeline::{ablation, train_model, RunConfig};
use damage_cot::segmenter::render_vr;
use damage_cot::tensor::{conv2d, flip_kernel, tconv2d};
use damage_cot::trainer::{apply_freeze_policy, fit, mean_loss, train_step, Regime, TrainConfig};
use damage_cot::vision::{patchify, unpatchify};
use damage_cot::{RngStream, Tape, Tensor};
use nalgebra::DMatrix;

use common::{bits, default_model, prepared, records, stage1_logits};

const REFERENCE: &str = include_str!("data/reference_records.json");

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, minutes: u64) -> bool {
    elapsed <= Duration::from_secs(60 * minutes)
}

fn gradient() -> Check {
    let clock = Instant::now();
    let entries = gradient_suite(&[0, 1, 2, 3, 4]).map_err(|e| e.to_string())?;
    let elapsed = clock.elapsed();
    let worst = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<_> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| format!("{}@{}", e.op, e.seed))
        .collect();
    ensure(
        failed.is_empty() && worst < 1e-4 && within(elapsed, 2),
        format!(
            "{} checks over 5 seeds, max rel err {worst:.2e}, {elapsed:.1?}, failing {failed:?}",
            entries.len()
        ),
    )
}

fn normalization() -> Check {
    let dev = softmax_row_deviation(1000, 0);
    ensure(dev <= 1e-12, format!("1000 cases, max |row sum - 1| = {dev:.2e}"))
}

fn lora() -> Check {
    let recs = records(1, 31);

    let mut model = default_model(&recs, 31);
    let before = stage1_logits(&model, &recs[2].image);
    model.attach_lora().map_err(|e| e.to_string())?;
    let neutral = before.bit_eq(&stage1_logits(&model, &recs[2].image));

    let mut merged_model = model.clone();
    let set = merged_model.adapters.clone().unwrap();
    let mut rng = RngStream::new(32);
    for (_, slot) in &set.slots {
        let shape = merged_model.store.value(slot.a).shape().to_vec();
        merged_model
            .store
            .set_value(slot.a, rng.gaussian_tensor(&shape, 0.05))
            .unwrap();
    }
    let adapted = stage1_logits(&merged_model, &recs[4].image);
    merge_into_base(&mut merged_model.decoder, &mut merged_model.store, &set).map_err(|e| e.to_string())?;
    let merge_err = adapted.max_abs_diff(&stage1_logits(&merged_model, &recs[4].image));

    let data = prepared(&model, &recs);
    let trainable = apply_freeze_policy(&mut model, Regime::PaperFinetune).map_err(|e| e.to_string())?;
    let mut opt = Optimizer::new(OptimizerConfig::default().with_lr(1e-2)).unwrap();
    let batch: Vec<_> = data.iter().collect();
    for _ in 0..3 {
        train_step(&mut model, &mut opt, &batch, None).map_err(|e| e.to_string())?;
    }
    let set = model.adapters.as_ref().unwrap();
    let adapters = set.adapters(&model.store);
    let mut max_rank = 0;
    for ad in &adapters {
        let delta = ad.delta().unwrap();
        let (r, c) = delta.dims2().unwrap();
        let s = DMatrix::from_row_slice(r, c, delta.data())
            .svd(false, false)
            .singular_values;
        let top = s.max();
        max_rank = max_rank.max(s.iter().filter(|&&v| v > 1e-10 * top).count());
    }
    let sum_r_io: usize = adapters.iter().map(|a| a.rank * (a.d_in() + a.d_out())).sum();
    let audit = trainable == model.store.count_prefix("vision.") + sum_r_io
        && set.layers == [0, 3]
        && adapters.len() == 2 * Projection::ALL.len();
    ensure(
        neutral && merge_err <= 1e-10 && max_rank <= 10 && audit,
        format!(
            "neutral bitwise {neutral}, merge err {merge_err:.2e}, max ΔW rank {max_rank}, \
             trainable {trainable} = vision + Σr(i+o) {sum_r_io}: {audit}"
        ),
    )
}

fn factorization() -> Check {
    let recs = records(1, 41);
    let mut model = default_model(&recs, 41);
    let data = prepared(&model, &recs);
    let config = TrainConfig {
        steps: 30,
        batch_size: 7,
        seed: 41,
        ..TrainConfig::default()
    };
    fit(&mut model, &data, &config, None, |_, _| {}).map_err(|e| e.to_string())?;

    // one causal pass per step, each over the growing teacher-forced prefix
    let stepwise = |visual: &Tensor, prefix: &[usize], answer: &[usize]| -> f64 {
        let mut ids = prefix.to_vec();
        let mut total = 0.0;
        for &a in answer {
            let mut tape = Tape::new();
            let v = tape.leaf(visual.clone());
            let x = model.decoder.embed(&mut tape, &model.store, Some(v), &ids).unwrap();
            let l = model.decoder.forward_logits(&mut tape, &model.store, x).unwrap();
            let logp = log_softmax_rows(tape.value(l)).unwrap();
            total += logp.at2(ids.len() - 1, a);
            ids.push(a);
        }
        total
    };

    let template = PromptTemplate {
        max_new_tokens: 24,
        ..PromptTemplate::default()
    };
    let (mut seq_err, mut joint_err): (f64, f64) = (0.0, 0.0);
    for r in &recs {
        let ctx = visual_context(&model, &r.image).map_err(|e| e.to_string())?;
        let trace = run_cot_with(&model, &ctx, None, &template).map_err(|e| e.to_string())?;
        let mut rescored = 0.0;
        for (prefix, out) in [
            (&trace.stage1_prefix, &trace.rationale),
            (&trace.stage2_prefix, &trace.answer),
        ] {
            let tokens = &out.generation.tokens;
            let score = model
                .decoder
                .score(&model.store, Some(&ctx.tokens), prefix, tokens)
                .unwrap();
            let direct = stepwise(&ctx.tokens, prefix, tokens);
            seq_err = seq_err.max((score - direct).abs());
            rescored += direct;
        }
        joint_err = joint_err
            .max((trace.joint_logprob - (trace.rationale.logprob() + trace.answer.logprob())).abs())
            .max((trace.joint_logprob - rescored).abs());
    }

    let mut prefix_stable = true;
    let mut rng = RngStream::new(42);
    let v = model.vocab.len();
    for _ in 0..20 {
        let len = 2 + rng.below(40);
        let ids: Vec<usize> = (0..len).map(|_| 7 + rng.below(v - 7)).collect();
        let cut = 1 + rng.below(len - 1);
        let mut other = ids.clone();
        for t in other.iter_mut().skip(cut) {
            *t = 7 + (*t + 1) % (v - 7);
        }
        let logits = |ids: &[usize]| {
            let mut tape = Tape::new();
            let x = model.decoder.embed(&mut tape, &model.store, None, ids).unwrap();
            let l = model.decoder.forward_logits(&mut tape, &model.store, x).unwrap();
            bits(&tape.value(l).data()[..cut * v])
        };
        prefix_stable &= logits(&ids) == logits(&other);
    }
    ensure(
        seq_err <= 1e-10 && joint_err <= 1e-10 && prefix_stable,
        format!("score vs stepwise {seq_err:.2e}, joint vs stage sum {joint_err:.2e}, prefix bitwise {prefix_stable}"),
    )
}

fn structural() -> Check {
    let mut rng = RngStream::new(51);
    let img = Tensor::from_fn(&[32, 32, 3], |_| rng.uniform());
    let patches = patchify(&img, 8).map_err(|e| e.to_string())?;
    let round_trip = patches.len() == 16 && unpatchify(&patches).unwrap().bit_eq(&img);

    let mut conv_err: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = RngStream::new(seed);
        let (h, w, cin, cout) = (2 + rng.below(8), 2 + rng.below(8), 1 + rng.below(4), 1 + rng.below(4));
        let k = [1, 3, 5][rng.below(3)];
        let x = rng.gaussian_tensor(&[h, w, cin], 1.0);
        let kern = rng.gaussian_tensor(&[k, k, cin, cout], 1.0);
        let t = tconv2d(&x, &kern).unwrap();
        conv_err = conv_err.max(t.max_abs_diff(&conv2d(&x, &flip_kernel(&kern).unwrap()).unwrap()));
    }

    let recs = records(1, 52);
    let model = default_model(&recs, 52);
    let image = &recs[0].image;
    let map = model.segment(&model.prepare_image(image).unwrap()).unwrap();
    let vr = render_vr(&map, 3);
    let extents = map.mask.shape() == [32, 32] && vr.shape() == image.shape();

    let qc = model.queries();
    let ctx = visual_context(&model, image).map_err(|e| e.to_string())?;
    let cot_tokens = ctx.tokens.shape()[0];
    let plain = run_plain(&model, image, &PromptTemplate::default().stage1, 4).map_err(|e| e.to_string());
    let plain_tokens = plain.map_or(0, |p| p.visual_tokens);
    ensure(
        round_trip && conv_err <= 1e-12 && extents && cot_tokens == 2 * qc && plain_tokens == qc,
        format!(
            "patchify bit-exact {round_trip}, conv/tconv {conv_err:.2e}, VR extents {extents}, \
             visual tokens cot {cot_tokens} plain {plain_tokens} (Qc = {qc})"
        ),
    )
}

fn overfit() -> Check {
    let spec = SyntheticSpec {
        per_class: 2,
        seed: 0,
        ..SyntheticSpec::default()
    };
    let recs: Vec<_> = generate_synthetic(&spec).unwrap().into_iter().take(8).collect();
    let config = TrainConfig {
        steps: 500,
        batch_size: 8,
        seed: 0,
        ..TrainConfig::default()
    };
    let clock = Instant::now();
    let run = || {
        let mut model = default_model(&recs, 0);
        let data = prepared(&model, &recs);
        let report = fit(&mut model, &data, &config, None, |_, _| {}).unwrap();
        let loss = mean_loss(&model, &data).unwrap();
        (
            loss,
            model.vocab.len(),
            bits(&report.losses),
            bits(&model.store.flat_values()),
        )
    };
    let (loss, vocab, losses, params) = run();
    let elapsed = clock.elapsed();
    let (_, _, losses2, params2) = run();
    let deterministic = losses == losses2 && params == params2;
    ensure(
        loss < 0.05 && vocab <= 512 && deterministic && within(elapsed, 10),
        format!("masked loss {loss:.4} after 500 steps, V = {vocab}, deterministic {deterministic}, {elapsed:.1?}"),
    )
}

fn proxy() -> Check {
    let mut config = RunConfig::default().with_seed(1);
    config.model.segmenter.channels = 16;
    config.segmenter_train.steps = 400;
    config.scratch.steps = 2000;
    config.finetune = Some(TrainConfig {
        regime: Regime::PaperFinetune,
        steps: 300,
        seed: 1,
        ..TrainConfig::default()
    });

    let clock = Instant::now();
    let records = generate_synthetic(&config.synthetic).map_err(|e| e.to_string())?;
    let (train, eval): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.meta.split == Split::Train);
    let (model, _) = train_model(&config, &train, |_| {}).map_err(|e| e.to_string())?;
    let eval: Vec<_> = eval.iter().collect();
    let result = ablation(&model, &eval, &config.template).map_err(|e| e.to_string())?;
    let elapsed = clock.elapsed();

    let holes: Vec<_> = eval
        .iter()
        .filter(|r| r.class() == DamageClass::ConcreteHole && r.meta.clutter >= HIGH_CLUTTER)
        .collect();
    let named = holes
        .iter()
        .filter(|r| {
            let ctx = visual_context(&model, &r.image).unwrap();
            run_stage1(&model, &ctx, &config.template).is_ok_and(|o| mentions_class(&o.text, DamageClass::ConcreteHole))
        })
        .count();
    println!(
        "INFO cluttered hole images whose rationale names holes: {named}/{}",
        holes.len()
    );

    let high = result.high_clutter.as_ref().ok_or("no high-clutter records")?;
    ensure(
        eval.len() == 140
            && result.all.cot.accuracy >= 0.85
            && high.cot.accuracy >= high.plain.accuracy
            && within(elapsed, 60),
        format!(
            "held-out {} records, CoT {:.4} plain {:.4}; high clutter ({}) CoT {:.4} plain {:.4}; {elapsed:.0?}",
            eval.len(),
            result.all.cot.accuracy,
            result.all.plain.accuracy,
            high.cot.total,
            high.cot.accuracy,
            high.plain.accuracy
        ),
    )
}

fn format_fidelity() -> Check {
    let records = parse_corpus(REFERENCE).map_err(|e| e.to_string())?;
    let oracle: Vec<_> = DamageClass::ALL.iter().rev().map(|&c| (c, c.rationale())).collect();
    let rows: Vec<String> = evaluate_categories(&oracle)
        .unwrap()
        .rows
        .into_iter()
        .map(|r| r.category)
        .collect();
    let order = rows
        == [
            "Road potholes",
            "Concrete cracks",
            "Concrete holes",
            "Concrete spalling and rebar exposure",
            "Steel elements cracks",
            "Steel elements spalling and corrosion",
            "undamaged",
        ];
    ensure(
        records.len() == 7 && order,
        format!("{} reference records accepted, report row order {order}", records.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Check); 8] = [
        ("gradient suite", gradient),
        ("normalization suite", normalization),
        ("LoRA suite", lora),
        ("factorization suite", factorization),
        ("structural suite", structural),
        ("overfit", overfit),
        ("synthetic proxy", proxy),
        ("format fidelity", format_fidelity),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {} {name}: {detail}", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
