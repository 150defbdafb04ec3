//! Attaches low-rank adapters to the decoder, fine-tunes them briefly under
//! the adapter freeze policy, then folds them into the base weights.
//!
//!     cargo run --release --example lora_merge -- [steps] [seed]

use damage_cot::cot::{stage1_prefix, visual_context, PromptTemplate};
use damage_cot::dataset::{corpus_vocabulary, generate_synthetic, SyntheticSpec};
use damage_cot::lora::merge_into_base;
use damage_cot::model::{Model, ModelConfig};
use damage_cot::trainer::{apply_freeze_policy, fit, prepare_records, Regime, TrainConfig};
use damage_cot::{Tape, Tensor};

fn logits(model: &Model, image: &Tensor) -> damage_cot::Result<Tensor> {
    let ctx = visual_context(model, image)?;
    let ids = stage1_prefix(model, &ctx, &PromptTemplate::default());
    let mut tape = Tape::new();
    let v = tape.leaf(ctx.tokens);
    let x = model.decoder.embed(&mut tape, &model.store, Some(v), &ids)?;
    let l = model.decoder.forward_logits(&mut tape, &model.store, x)?;
    Ok(tape.value(l).clone())
}

fn main() -> damage_cot::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(20, |s| s.parse().expect("steps"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let records = generate_synthetic(&SyntheticSpec {
        per_class: 2,
        seed,
        ..SyntheticSpec::default()
    })?;
    let corpus: Vec<_> = records.iter().map(|r| r.record.clone()).collect();
    let mut model = Model::new(
        ModelConfig {
            seed,
            ..ModelConfig::default()
        },
        corpus_vocabulary(&corpus),
    )?;
    let image = &records[0].image;
    let base = logits(&model, image)?;

    let total = model.store.total_count();
    let trainable = apply_freeze_policy(&mut model, Regime::PaperFinetune)?;
    let set = model.adapters.clone().expect("policy attaches adapters");
    println!(
        "adapters on decoder layers {:?}: {} adapter values, {trainable} of {total} parameters trainable",
        set.layers,
        set.param_count(&model.store)
    );
    println!("logits unchanged at attach: {}", logits(&model, image)?.bit_eq(&base));

    let pairs: Vec<_> = records.iter().map(|r| (r.record.clone(), r.image.clone())).collect();
    let data = prepare_records(&model, &pairs)?;
    let report = fit(
        &mut model,
        &data,
        &TrainConfig {
            regime: Regime::PaperFinetune,
            steps,
            seed,
            ..TrainConfig::default()
        },
        None,
        |_, _| {},
    )?;
    println!(
        "fine-tune loss {:.4} -> {:.4}",
        report.losses[0],
        report.losses.last().unwrap()
    );

    let adapted = logits(&model, image)?;
    merge_into_base(&mut model.decoder, &mut model.store, &set)?;
    let merged = logits(&model, image)?;
    println!("merged vs adapted max |Δlogit| = {:.2e}", adapted.max_abs_diff(&merged));
    Ok(())
}
