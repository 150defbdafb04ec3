//! Splits an image into patches, encodes them with the transformer encoder
//! and pools the result into the fixed-length query prefix.
//!
//!     cargo run --release --example patch_encoder -- [seed]

use damage_cot::qformer::{QFormer, QFormerConfig};
use damage_cot::vision::{patchify, unpatchify, VisionConfig, VisionEncoder};
use damage_cot::{ParamStore, RngStream, Tensor};

fn main() -> damage_cot::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let mut rng = RngStream::new(seed);
    let config = VisionConfig::default();
    let image = Tensor::from_fn(&[config.height, config.width, config.channels], |_| rng.uniform());

    let seq = patchify(&image, config.patch)?;
    println!(
        "{}×{} grid of {} patches, each flattened to {} values",
        seq.grid_rows,
        seq.grid_cols,
        seq.len(),
        seq.token_len()
    );
    println!("round trip exact: {}", unpatchify(&seq)?.bit_eq(&image));

    let mut store = ParamStore::new();
    let encoder = VisionEncoder::new(&mut store, config, &mut rng)?;
    let aligner = QFormer::new(&mut store, QFormerConfig::default(), &mut rng)?;
    let tokens = encoder.encode_tensor(&store, &image)?;
    let prefix = aligner.align_tensor(&store, &tokens)?;
    println!(
        "encoder output {:?}, aligned prefix {:?}",
        tokens.shape(),
        prefix.shape()
    );
    println!("{} parameters", store.total_count());
    Ok(())
}
