//! End-to-end workflows shared by the command-line tool, the examples and
//! the acceptance checks: segmenter fitting, scratch training followed by
//! adapter fine-tuning, and category evaluation with the CoT/plain ablation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cot::{evaluate_model, predict_categories, InferenceMode, PromptTemplate};
use crate::dataset::{
    corpus_vocabulary, evaluate_categories, CategoryReport, DamageClass, SyntheticRecord, SyntheticSpec, HIGH_CLUTTER,
};
use crate::error::{contract, Result};
use crate::model::{Model, ModelConfig};
use crate::segmenter::SegmenterTrainConfig;
use crate::tensor::Tensor;
use crate::trainer::{fit, fit_segmenter, mean_loss, prepare_records, Regime, TrainConfig};

/// Everything a run needs, as read from a JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub segmenter_train: SegmenterTrainConfig,
    pub scratch: TrainConfig,
    /// Adapter fine-tuning after scratch training; skipped when absent.
    pub finetune: Option<TrainConfig>,
    pub template: PromptTemplate,
    pub synthetic: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            segmenter_train: SegmenterTrainConfig::default(),
            scratch: TrainConfig::default(),
            finetune: Some(TrainConfig {
                regime: Regime::PaperFinetune,
                steps: 100,
                ..TrainConfig::default()
            }),
            template: PromptTemplate::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl RunConfig {
    /// Overrides every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.model.seed = seed;
        self.segmenter_train.seed = seed;
        self.scratch.seed = seed;
        if let Some(f) = &mut self.finetune {
            f.seed = seed;
        }
        self.synthetic.seed = seed;
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub losses: Vec<f64>,
    pub trainable: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub segmenter_losses: Vec<f64>,
    pub segmenter_seconds: f64,
    pub scratch: PhaseReport,
    pub finetune: Option<PhaseReport>,
    /// Mean per-token loss on the training records at the end.
    pub final_loss: f64,
}

/// Progress events of [`train_model`].
#[derive(Clone, Copy, Debug)]
pub enum Progress<'a> {
    Segmenter { step: usize, loss: f64 },
    Step { phase: &'a str, step: usize, loss: f64 },
}

/// Trains a fresh model on `records`: the segmenter on the masks first,
/// then the language path from scratch, then optional adapter fine-tuning.
pub fn train_model(
    config: &RunConfig,
    records: &[SyntheticRecord],
    mut progress: impl FnMut(Progress<'_>),
) -> Result<(Model, TrainingReport)> {
    contract!(!records.is_empty(), "cannot train on an empty corpus");
    let corpus: Vec<_> = records.iter().map(|r| r.record.clone()).collect();
    let mut model = Model::new(config.model.clone(), corpus_vocabulary(&corpus))?;
    let mut report = TrainingReport::default();

    let clock = Instant::now();
    if config.segmenter_train.steps > 0 {
        let pairs: Vec<(&Tensor, &Tensor)> = records.iter().map(|r| (&r.image, &r.mask)).collect();
        let seg = fit_segmenter(&mut model, &pairs, &config.segmenter_train)?;
        for (i, &l) in seg.step_losses.iter().enumerate() {
            progress(Progress::Segmenter { step: i + 1, loss: l });
        }
        report.segmenter_losses = seg.step_losses;
    }
    report.segmenter_seconds = clock.elapsed().as_secs_f64();

    let pairs: Vec<_> = records.iter().map(|r| (r.record.clone(), r.image.clone())).collect();
    let prepared = prepare_records(&model, &pairs)?;
    let phases = std::iter::once(("scratch", &config.scratch)).chain(config.finetune.iter().map(|f| ("finetune", f)));
    for (phase, tc) in phases {
        let clock = Instant::now();
        let fitted = fit(&mut model, &prepared, tc, None, |step, s| {
            progress(Progress::Step {
                phase,
                step,
                loss: s.loss,
            })
        })?;
        let pr = PhaseReport {
            losses: fitted.losses,
            trainable: fitted.trainable,
            seconds: clock.elapsed().as_secs_f64(),
        };
        if phase == "scratch" {
            report.scratch = pr;
        } else {
            report.finetune = Some(pr);
        }
    }
    report.final_loss = mean_loss(&model, &prepared)?;
    Ok((model, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPair {
    pub cot: CategoryReport,
    pub plain: CategoryReport,
    /// CoT accuracy minus plain accuracy.
    pub difference: f64,
}

impl AblationPair {
    fn new(cot: CategoryReport, plain: CategoryReport) -> Self {
        Self {
            difference: cot.accuracy - plain.accuracy,
            cot,
            plain,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub all: AblationPair,
    /// Records with clutter at or above the high-clutter threshold.
    pub high_clutter: Option<AblationPair>,
}

/// Category accuracy of `mode` on `records`.
pub fn evaluate_records(
    model: &Model,
    records: &[&SyntheticRecord],
    mode: InferenceMode,
    template: &PromptTemplate,
) -> Result<CategoryReport> {
    let items: Vec<_> = records.iter().map(|r| (r.class(), &r.image)).collect();
    evaluate_model(model, &items, mode, template)
}

/// CoT and plain accuracy on `records`, overall and on the high-clutter subset.
pub fn ablation(model: &Model, records: &[&SyntheticRecord], template: &PromptTemplate) -> Result<EvalReport> {
    contract!(!records.is_empty(), "cannot evaluate an empty split");
    let items: Vec<_> = records.iter().map(|r| (r.class(), &r.image)).collect();
    let cot = predict_categories(model, &items, InferenceMode::Cot, template)?;
    let plain = predict_categories(model, &items, InferenceMode::Plain, template)?;
    let pair = |keep: &dyn Fn(usize) -> bool| -> Result<AblationPair> {
        let pick = |p: &[(DamageClass, String)]| -> Vec<(DamageClass, String)> {
            p.iter()
                .enumerate()
                .filter(|(i, _)| keep(*i))
                .map(|(_, x)| x.clone())
                .collect()
        };
        Ok(AblationPair::new(
            evaluate_categories(&pick(&cot))?,
            evaluate_categories(&pick(&plain))?,
        ))
    };
    let all = pair(&|_| true)?;
    let high = |i: usize| records[i].meta.clutter >= HIGH_CLUTTER;
    let high_clutter = if (0..records.len()).any(high) {
        Some(pair(&high)?)
    } else {
        None
    };
    Ok(EvalReport { all, high_clutter })
}
