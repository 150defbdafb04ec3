//! Fits the segmenter on synthetic masks and reports held-out IoU per class.
//!
//!     cargo run --release --example segment_synthetic -- [steps] [channels] [seed]

use damage_cot::dataset::{generate_synthetic, DamageClass, Split, SyntheticSpec};
use damage_cot::segmenter::{normalize_image, train_segmenter, Segmenter, SegmenterConfig, SegmenterTrainConfig};
use damage_cot::{ParamStore, RngStream, Tensor};

fn iou(a: &Tensor, b: &Tensor) -> Option<f64> {
    let (mut inter, mut union) = (0.0, 0.0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x > 0.5 && y > 0.5) as u8 as f64;
        union += (x > 0.5 || y > 0.5) as u8 as f64;
    }
    (union > 0.0).then(|| inter / union)
}

fn main() -> damage_cot::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(400, |s| s.parse().expect("steps"));
    let channels: usize = args.next().map_or(16, |s| s.parse().expect("channels"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let records = generate_synthetic(&SyntheticSpec {
        per_class: 20,
        seed,
        ..SyntheticSpec::default()
    })?;
    let pair = |r: &damage_cot::dataset::SyntheticRecord| Ok((normalize_image(&r.image)?, r.mask.clone()));
    let train = records
        .iter()
        .filter(|r| r.meta.split == Split::Train)
        .map(pair)
        .collect::<damage_cot::Result<Vec<_>>>()?;

    let mut store = ParamStore::new();
    let config = SegmenterConfig {
        channels,
        ..SegmenterConfig::default()
    };
    let seg = Segmenter::new(&mut store, config, &mut RngStream::new(seed))?;
    let report = train_segmenter(
        &seg,
        &mut store,
        &train,
        &SegmenterTrainConfig {
            steps,
            seed,
            ..SegmenterTrainConfig::default()
        },
    )?;
    println!(
        "{} training pairs, loss {:.4} -> {:.4}",
        train.len(),
        report.step_losses[0],
        report.step_losses.last().unwrap()
    );

    for class in DamageClass::ALL {
        let scores: Vec<f64> = records
            .iter()
            .filter(|r| r.meta.split == Split::Eval && r.class() == class)
            .filter(|r| r.mask.data().iter().any(|&m| m > 0.5))
            .filter_map(|r| {
                let map = seg.segment(&store, &normalize_image(&r.image).ok()?).ok()?;
                iou(&map.mask, &r.mask)
            })
            .collect();
        if scores.is_empty() {
            println!("{:<40} no damage pixels", class.display_name());
        } else {
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            println!("{:<40} IoU {mean:.3}", class.display_name());
        }
    }
    Ok(())
}
