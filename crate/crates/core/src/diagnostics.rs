//! Self-checks runnable from the command line: central-difference gradient
//! verification of every differentiable op and of the full
//! encode→align→score path, and the softmax normalization sweep.

use serde::Serialize;

use crate::dataset::DamageRecord;
use crate::decoder::{DecoderConfig, Vocabulary};
use crate::error::Result;
use crate::gradcheck::{grad_check, grad_check_params, GradCheckReport};
use crate::model::{Model, ModelConfig};
use crate::qformer::QFormerConfig;
use crate::rng::RngStream;
use crate::segmenter::SegmenterConfig;
use crate::tape::{AttnSpec, Tape, Var};
use crate::tensor::{softmax_rows, Tensor};
use crate::trainer::{record_examples, record_loss, PreparedRecord};
use crate::vision::VisionConfig;

pub const GRAD_EPS: f64 = 1e-6;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradEntry {
    pub op: String,
    pub seed: u64,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

impl GradEntry {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < GRAD_TOLERANCE
    }
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

/// Reduces `v` to a scalar with fixed random weights, so every output
/// element carries a distinct upstream gradient.
fn probe(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(v).shape().to_vec();
    let w = RngStream::derive(seed, "probe").gaussian_tensor(&shape, 1.0);
    tape.dot_const(v, &w)
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = RngStream::derive(seed, "gradcheck-ops");
    let mut g = |shape: &[usize]| rng.gaussian_tensor(shape, 1.0);
    let s = seed;
    vec![
        (
            "matmul",
            vec![g(&[3, 4]), g(&[4, 5])],
            Box::new(move |t, x| {
                let y = t.matmul(x[0], x[1])?;
                probe(t, y, s)
            }),
        ),
        (
            "matmul_nt",
            vec![g(&[3, 4]), g(&[5, 4])],
            Box::new(move |t, x| {
                let y = t.matmul_nt(x[0], x[1])?;
                probe(t, y, s)
            }),
        ),
        (
            "add_row",
            vec![g(&[3, 4]), g(&[4])],
            Box::new(move |t, x| {
                let y = t.add_row(x[0], x[1])?;
                probe(t, y, s)
            }),
        ),
        (
            "scale",
            vec![g(&[2, 3])],
            Box::new(move |t, x| {
                let y = t.scale(x[0], -0.7)?;
                probe(t, y, s)
            }),
        ),
        (
            "relu",
            vec![g(&[4, 5])],
            Box::new(move |t, x| {
                let y = t.relu(x[0]);
                probe(t, y, s)
            }),
        ),
        (
            "softmax_rows",
            vec![g(&[3, 6])],
            Box::new(move |t, x| {
                let y = t.softmax_rows(x[0])?;
                probe(t, y, s)
            }),
        ),
        (
            "layer_norm",
            vec![g(&[3, 6]), g(&[6]), g(&[6])],
            Box::new(move |t, x| {
                let y = t.layer_norm(x[0], x[1], x[2])?;
                probe(t, y, s)
            }),
        ),
        (
            "attention",
            vec![g(&[4, 6]), g(&[5, 6]), g(&[5, 6])],
            Box::new(move |t, x| {
                let y = t.attention(
                    x[0],
                    x[1],
                    x[2],
                    AttnSpec {
                        heads: 2,
                        causal: false,
                    },
                )?;
                probe(t, y, s)
            }),
        ),
        (
            "attention_causal",
            vec![g(&[4, 6]), g(&[4, 6]), g(&[4, 6])],
            Box::new(move |t, x| {
                let y = t.attention(x[0], x[1], x[2], AttnSpec { heads: 3, causal: true })?;
                probe(t, y, s)
            }),
        ),
        (
            "rows",
            vec![g(&[5, 3]), g(&[2, 3])],
            Box::new(move |t, x| {
                let a = t.slice_rows(x[0], 1, 3)?;
                let b = t.gather_rows(x[0], &[4, 0, 4])?;
                let c = t.concat_rows(&[a, x[1], b])?;
                let r = t.reshape(c, &[8, 3])?;
                probe(t, r, s)
            }),
        ),
        (
            "conv2d",
            vec![g(&[5, 4, 2]), g(&[3, 3, 2, 3])],
            Box::new(move |t, x| {
                let y = t.conv2d(x[0], x[1])?;
                probe(t, y, s)
            }),
        ),
        (
            "tconv2d",
            vec![g(&[4, 5, 3]), g(&[3, 3, 3, 2])],
            Box::new(move |t, x| {
                let y = t.tconv2d(x[0], x[1])?;
                probe(t, y, s)
            }),
        ),
        ("sigmoid_bce", vec![g(&[4, 4, 1])], {
            let target = Tensor::from_fn(&[4, 4, 1], |i| ((i * 7 + seed as usize) % 3 == 0) as u8 as f64);
            Box::new(move |t, x| t.sigmoid_bce_mean(x[0], &target))
        }),
        ("cross_entropy", vec![g(&[3, 7])], {
            let targets = vec![seed as usize % 7, 3, 6];
            Box::new(move |t, x| t.cross_entropy_sum(x[0], &targets))
        }),
    ]
}

/// A model small enough to finite-difference every path through it.
pub fn toy_model(seed: u64) -> Result<Model> {
    let config = ModelConfig {
        vision: VisionConfig {
            height: 8,
            width: 8,
            channels: 3,
            patch: 4,
            d_model: 8,
            heads: 2,
            layers: 1,
            d_ff: 16,
            ..VisionConfig::default()
        },
        segmenter: SegmenterConfig {
            channels: 4,
            ..SegmenterConfig::default()
        },
        qformer: QFormerConfig {
            queries: 2,
            layers: 1,
            d_model: 8,
            heads: 2,
            d_ff: 16,
            d_lm: 8,
        },
        decoder: DecoderConfig {
            d_lm: 8,
            layers: 2,
            heads: 2,
            d_ff: 16,
            max_len: 64,
            ..DecoderConfig::default()
        },
        seed,
        ..ModelConfig::default()
    };
    Model::new(
        config,
        Vocabulary::build(["judge it . there are holes . describe . small holes ."]),
    )
}

fn toy_record(model: &Model, seed: u64) -> Result<PreparedRecord> {
    let mut rng = RngStream::derive(seed, "gradcheck-record");
    let record = DamageRecord {
        img: "toy.ppm".into(),
        prompt: "Q: Judge it. A: There are holes. Q: Describe.".into(),
        label: "Small holes.".into(),
    };
    Ok(PreparedRecord {
        image: Tensor::from_fn(&[8, 8, 3], |_| rng.uniform()),
        vr: Tensor::from_fn(&[8, 8, 3], |i| ((i / 3) % 5 == 0) as u8 as f64),
        examples: record_examples(&model.vocab, model.queries(), &record)?,
    })
}

/// Gradient check of the summed answer loss of one record with respect to
/// the encoder, aligner and decoder parameters (a sample of elements per
/// parameter).
pub fn full_path_check(seed: u64, per_param: usize) -> Result<GradCheckReport> {
    let model = toy_model(seed)?;
    let record = toy_record(&model, seed)?;
    let ids: Vec<_> = model
        .store
        .iter()
        .filter(|(_, p)| !p.name.starts_with("segmenter."))
        .map(|(id, _)| id)
        .collect();
    let mut rng = RngStream::derive(seed, "gradcheck-sample");
    grad_check_params(
        &model.store,
        &ids,
        GRAD_EPS,
        Some((per_param, &mut rng)),
        |tape, store| {
            let m = Model {
                store: store.clone(),
                ..model.clone()
            };
            Ok(record_loss(&m, tape, &record)?.0)
        },
    )
}

/// Every op plus the full path, once per seed.
pub fn gradient_suite(seeds: &[u64]) -> Result<Vec<GradEntry>> {
    let mut out = Vec::new();
    for &seed in seeds {
        for (op, inputs, f) in op_cases(seed) {
            out.push(GradEntry {
                op: op.to_string(),
                seed,
                report: grad_check(f, &inputs, GRAD_EPS)?,
            });
        }
        out.push(GradEntry {
            op: "encode_align_score".into(),
            seed,
            report: full_path_check(seed, 4)?,
        });
    }
    Ok(out)
}

/// Largest `|Σ row − 1|` over `cases` random softmax inputs, a tenth of
/// them scaled to magnitude 1e3.
pub fn softmax_row_deviation(cases: usize, seed: u64) -> f64 {
    let mut rng = RngStream::derive(seed, "softmax-sweep");
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let rows = 1 + rng.below(6);
        let cols = 1 + rng.below(40);
        let scale = if c % 10 == 0 { 1e3 } else { rng.range(0.1, 30.0) };
        let x = rng.gaussian_tensor(&[rows, cols], scale);
        let p = softmax_rows(&x).expect("finite input");
        for r in 0..rows {
            let s: f64 = p.row(r).iter().sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    worst
}
