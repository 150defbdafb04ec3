//! Trains a small model, then walks one image through segmentation, the
//! rationale stage and the answer stage, and continues the dialogue.
//!
//!     cargo run --release --example cot_pipeline -- [steps] [seed]

use damage_cot::cot::{continue_dialogue, run_cot, run_plain, DialogueState, PromptTemplate};
use damage_cot::dataset::{generate_synthetic, DamageClass, Split, SyntheticSpec};
use damage_cot::pipeline::{train_model, RunConfig};

fn main() -> damage_cot::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(400, |s| s.parse().expect("steps"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let mut config = RunConfig::default().with_seed(seed);
    config.synthetic = SyntheticSpec {
        per_class: 10,
        seed,
        ..SyntheticSpec::default()
    };
    config.model.segmenter.channels = 16;
    config.segmenter_train.steps = 200;
    config.scratch.steps = steps;
    config.finetune = None;
    let records = generate_synthetic(&config.synthetic)?;
    let (train, eval): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.meta.split == Split::Train);
    let (model, report) = train_model(&config, &train, |_| {})?;
    println!("trained {} records, final loss {:.4}", train.len(), report.final_loss);

    let template = PromptTemplate::default();
    let sample = eval
        .iter()
        .find(|r| r.class() == DamageClass::ConcreteHole)
        .unwrap_or(&eval[0]);
    println!("\nimage {} ({})", sample.meta.img, sample.class().display_name());
    let trace = run_cot(&model, &sample.image, None, &template)?;
    println!("VR: {} damage pixels", trace.vr.damage_pixels());
    println!("R:  {}  (log p {:.3})", trace.rationale.text, trace.rationale.logprob());
    println!("A:  {}  (log p {:.3})", trace.answer.text, trace.answer.logprob());
    println!("joint log p {:.3}", trace.joint_logprob);

    let plain = run_plain(&model, &sample.image, &template.stage1, template.max_new_tokens)?;
    println!("without VR: {}", plain.output.text);

    let mut state = DialogueState::new(sample.meta.img.clone(), sample.image.clone());
    for q in [
        "Determine whether there is damage to the structure in the picture.",
        "Please describe the characteristics of the damage in detail.",
    ] {
        let (reply, next) = continue_dialogue(&model, state, q, &template)?;
        state = next;
        println!("\nQ: {q}\nA: {}", reply.answer.text);
    }
    Ok(())
}
