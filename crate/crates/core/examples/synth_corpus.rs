//! Writes a small synthetic corpus (images, masks, dialogue records) to a
//! directory and reads it back.
//!
//!     cargo run --release --example synth_corpus -- <dir> [per_class] [seed]

use std::path::PathBuf;

use damage_cot::dataset::{generate_synthetic, read_synthetic, write_synthetic, Split, SyntheticSpec};

fn main() -> damage_cot::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir: PathBuf = args.next().unwrap_or_else(|| "synthetic".into()).into();
    let per_class: usize = args.next().map_or(5, |s| s.parse().expect("per_class"));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));

    let records = generate_synthetic(&SyntheticSpec {
        per_class,
        seed,
        ..SyntheticSpec::default()
    })?;
    write_synthetic(&dir, &records)?;
    let back = read_synthetic(&dir)?;
    let eval = back.iter().filter(|r| r.meta.split == Split::Eval).count();
    println!("{} records in {} ({} held out)", back.len(), dir.display(), eval);
    for r in back.iter().step_by(per_class).take(7) {
        println!("{:<18} clutter {:.2}  {}", r.meta.img, r.meta.clutter, r.record.label);
    }
    Ok(())
}
