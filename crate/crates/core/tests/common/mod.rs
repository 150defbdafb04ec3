#![allow(dead_code)]

use damage_cot::cot::{stage1_prefix, visual_context, PromptTemplate};
use damage_cot::dataset::{corpus_vocabulary, generate_synthetic, SyntheticRecord, SyntheticSpec};
use damage_cot::model::{Model, ModelConfig};
use damage_cot::trainer::{prepare_records, PreparedRecord};
use damage_cot::{Tape, Tensor};

/// `per_class` synthetic records of every class.
pub fn records(per_class: usize, seed: u64) -> Vec<SyntheticRecord> {
    generate_synthetic(&SyntheticSpec {
        per_class,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

pub fn model_for(records: &[SyntheticRecord], config: ModelConfig) -> Model {
    let corpus: Vec<_> = records.iter().map(|r| r.record.clone()).collect();
    Model::new(config, corpus_vocabulary(&corpus)).unwrap()
}

pub fn default_model(records: &[SyntheticRecord], seed: u64) -> Model {
    model_for(
        records,
        ModelConfig {
            seed,
            ..ModelConfig::default()
        },
    )
}

pub fn prepared(model: &Model, records: &[SyntheticRecord]) -> Vec<PreparedRecord> {
    let pairs: Vec<_> = records.iter().map(|r| (r.record.clone(), r.image.clone())).collect();
    prepare_records(model, &pairs).unwrap()
}

/// Causal logits over the whole stage-1 prefix of `image`.
pub fn stage1_logits(model: &Model, image: &Tensor) -> Tensor {
    let ctx = visual_context(model, image).unwrap();
    let ids = stage1_prefix(model, &ctx, &PromptTemplate::default());
    let mut tape = Tape::new();
    let v = tape.leaf(ctx.tokens.clone());
    let x = model.decoder.embed(&mut tape, &model.store, Some(v), &ids).unwrap();
    let logits = model.decoder.forward_logits(&mut tape, &model.store, x).unwrap();
    tape.value(logits).clone()
}

pub fn bits(values: &[f64]) -> Vec<u64> {
    values.iter().map(|v| v.to_bits()).collect()
}
