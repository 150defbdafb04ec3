//! Synthetic proxy experiment: 7 classes × 100 records, 80/20 split,
//! segmenter fitting, scratch training, adapter fine-tuning, then the
//! CoT-vs-plain category accuracy comparison on the held-out records.
//!
//!     cargo run --release --example proxy_experiment -- [scratch_steps] [finetune_steps] [seed]

use std::time::Instant;

use damage_cot::dataset::{generate_synthetic, Split};
use damage_cot::pipeline::{ablation, train_model, Progress, RunConfig};
use damage_cot::trainer::{Regime, TrainConfig};

fn main() -> damage_cot::Result<()> {
    let mut args = std::env::args().skip(1);
    let scratch: usize = args.next().map_or(1500, |s| s.parse().expect("scratch steps"));
    let finetune: usize = args.next().map_or(300, |s| s.parse().expect("finetune steps"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let mut config = RunConfig::default().with_seed(seed);
    config.model.segmenter.channels = 16;
    config.segmenter_train.steps = 400;
    config.scratch.steps = scratch;
    config.finetune = (finetune > 0).then(|| TrainConfig {
        regime: Regime::PaperFinetune,
        steps: finetune,
        seed,
        ..TrainConfig::default()
    });

    let clock = Instant::now();
    let records = generate_synthetic(&config.synthetic)?;
    let (train, eval): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.meta.split == Split::Train);
    println!("{} training and {} held-out records", train.len(), eval.len());

    let (model, report) = train_model(&config, &train, |p| match p {
        Progress::Segmenter { step, loss } if step % 100 == 0 => println!("segmenter {step:5}  {loss:.4}"),
        Progress::Step { phase, step, loss } if step % 100 == 0 => println!("{phase:>9} {step:5}  {loss:.4}"),
        _ => {}
    })?;
    println!(
        "segmenter {:.0}s, scratch {:.0}s, finetune {:.0}s, final train loss {:.4}",
        report.segmenter_seconds,
        report.scratch.seconds,
        report.finetune.as_ref().map_or(0.0, |f| f.seconds),
        report.final_loss
    );

    let eval: Vec<_> = eval.iter().collect();
    let result = ablation(&model, &eval, &config.template)?;
    print!("{}", result.all.cot.table("CoT"));
    print!("{}", result.all.plain.table("plain"));
    if let Some(h) = &result.high_clutter {
        println!(
            "high clutter ({} records): CoT {:.3}  plain {:.3}",
            h.cot.total, h.cot.accuracy, h.plain.accuracy
        );
    }
    println!("total {:.0}s", clock.elapsed().as_secs_f64());
    Ok(())
}
