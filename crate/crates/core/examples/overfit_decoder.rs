//! Trains the whole pipeline from scratch on eight synthetic records until
//! the masked answer loss collapses.
//!
//!     cargo run --release --example overfit_decoder -- [steps] [seed]

use std::time::Instant;

use damage_cot::dataset::{corpus_vocabulary, generate_synthetic, SyntheticSpec};
use damage_cot::model::{Model, ModelConfig};
use damage_cot::trainer::{fit, prepare_records, uptick_fraction, TrainConfig};

fn main() -> damage_cot::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(500, |s| s.parse().expect("steps"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let spec = SyntheticSpec {
        per_class: 2,
        seed,
        ..SyntheticSpec::default()
    };
    let records: Vec<_> = generate_synthetic(&spec)?.into_iter().take(8).collect();
    let corpus: Vec<_> = records.iter().map(|r| r.record.clone()).collect();
    let mut model = Model::new(
        ModelConfig {
            seed,
            ..ModelConfig::default()
        },
        corpus_vocabulary(&corpus),
    )?;
    println!(
        "vocabulary {} tokens, {} parameters",
        model.vocab.len(),
        model.store.total_count()
    );
    let pairs: Vec<_> = records.iter().map(|r| (r.record.clone(), r.image.clone())).collect();
    let prepared = prepare_records(&model, &pairs)?;

    let config = TrainConfig {
        steps,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let report = fit(&mut model, &prepared, &config, None, |step, s| {
        if step % 25 == 0 || step == 1 {
            println!("step {step:4}  loss {:.5}  |g| {:.3}", s.loss, s.grad_norm);
        }
    })?;
    println!(
        "final loss {:.5} after {} steps in {:.1?}; upticks after step 50: {:.1}%",
        report.losses.last().unwrap(),
        report.losses.len(),
        start.elapsed(),
        100.0 * uptick_fraction(&report.losses, 50)
    );
    Ok(())
}
