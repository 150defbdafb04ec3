//! Two-stage multimodal chain-of-thought inference.
//!
//! The segmentation map (the visual reasoning step) is rendered as an image
//! and aligned alongside the original, giving the decoder a prefix of
//! `[VR tokens][image tokens]`. Stage one generates a rationale naming the
//! damage category; stage two continues the same dialogue with the
//! description question and generates the answer. The single-stage baseline
//! sees only the original image's tokens and the question.

use serde::{Deserialize, Serialize};

use crate::dataset::{self, DamageClass, STAGE1_QUESTIONS, STAGE2_QUESTIONS};
use crate::decoder::{GenerationResult, Vocabulary, BOS, IMG};
use crate::error::{contract, Error, Result};
use crate::model::Model;
use crate::segmenter::SegmentationMap;
use crate::tensor::Tensor;

/// Fixed instructions for the two reasoning stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    /// Category judgment.
    pub stage1: String,
    /// Feature description.
    pub stage2: String,
    /// Generation cap per stage.
    pub max_new_tokens: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            stage1: STAGE1_QUESTIONS[0].to_string(),
            stage2: STAGE2_QUESTIONS[0].to_string(),
            max_new_tokens: 40,
        }
    }
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<()> {
        contract!(
            !self.stage1.trim().is_empty() && !self.stage2.trim().is_empty(),
            "both template stages need an instruction"
        );
        contract!(self.max_new_tokens > 0, "generation cap must be positive");
        Ok(())
    }
}

/// Token ids of one question turn, ending with the answer marker.
pub fn question_ids(vocab: &Vocabulary, question: &str) -> Vec<usize> {
    vocab.tokenize(&format!("Q: {question} A:"))
}

/// `[IMG × visual] BOS Q: question A:`
pub fn prompt_ids(vocab: &Vocabulary, visual: usize, question: &str) -> Vec<usize> {
    let mut ids = vec![IMG; visual];
    ids.push(BOS);
    ids.extend(question_ids(vocab, question));
    ids
}

const EMPTY_GENERATION: &str = "empty generation";

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| Error::Stage {
        stage,
        reason: e.to_string(),
    }
}

/// Segmentation map and the `2·Qc` visual tokens it produces with the image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualContext {
    pub vr: SegmentationMap,
    /// VR tokens first, then image tokens.
    pub tokens: Tensor,
}

/// Runs segmentation and encodes both views. `image` holds 8-bit pixels.
pub fn visual_context(model: &Model, image: &Tensor) -> Result<VisualContext> {
    let img = model.prepare_image(image).map_err(stage_err("segmentation"))?;
    let vr = model.segment(&img).map_err(stage_err("segmentation"))?;
    let encode = || -> Result<Tensor> {
        let vr_tokens = model.visual_tensor(&model.vr_image(&vr)?)?;
        let img_tokens = model.visual_tensor(&img)?;
        Tensor::concat_rows(&[&vr_tokens, &img_tokens])
    };
    let tokens = encode().map_err(stage_err("encoding"))?;
    Ok(VisualContext { vr, tokens })
}

/// Generated text of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutput {
    pub text: String,
    pub generation: GenerationResult,
}

impl StageOutput {
    pub fn logprob(&self) -> f64 {
        self.generation.total_logprob
    }
}

fn generate_stage(
    model: &Model,
    stage: &'static str,
    visual: &Tensor,
    prefix: &[usize],
    max_new: usize,
) -> Result<StageOutput> {
    let generation = model
        .decoder
        .generate(&model.store, Some(visual), prefix, max_new)
        .map_err(stage_err(stage))?;
    if generation.content().is_empty() {
        return Err(Error::Stage {
            stage,
            reason: EMPTY_GENERATION.into(),
        });
    }
    Ok(StageOutput {
        text: model.vocab.detokenize(generation.content()),
        generation,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CotTrace {
    pub vr: SegmentationMap,
    pub rationale: StageOutput,
    pub answer: StageOutput,
    /// `log p(R | ·) + log p(A | ·, R)`.
    pub joint_logprob: f64,
    /// Visual slots in the stage prefixes.
    pub visual_tokens: usize,
    pub stage1_prefix: Vec<usize>,
    pub stage2_prefix: Vec<usize>,
}

/// Stage-one prefix for a visual context.
pub fn stage1_prefix(model: &Model, ctx: &VisualContext, template: &PromptTemplate) -> Vec<usize> {
    prompt_ids(&model.vocab, ctx.tokens.shape()[0], &template.stage1)
}

/// Generates only the stage-one rationale.
pub fn run_stage1(model: &Model, ctx: &VisualContext, template: &PromptTemplate) -> Result<StageOutput> {
    template.validate()?;
    let prefix = stage1_prefix(model, ctx, template);
    generate_stage(model, "rationale", &ctx.tokens, &prefix, template.max_new_tokens)
}

/// Both stages over an already computed visual context. `question`, when
/// given, replaces the stage-two instruction.
pub fn run_cot_with(
    model: &Model,
    ctx: &VisualContext,
    question: Option<&str>,
    template: &PromptTemplate,
) -> Result<CotTrace> {
    template.validate()?;
    let stage1 = stage1_prefix(model, ctx, template);
    let rationale = generate_stage(model, "rationale", &ctx.tokens, &stage1, template.max_new_tokens)?;
    let mut stage2 = stage1.clone();
    stage2.extend_from_slice(rationale.generation.content());
    let q2 = question.unwrap_or(&template.stage2);
    stage2.extend(question_ids(&model.vocab, q2));
    let answer = generate_stage(model, "answer", &ctx.tokens, &stage2, template.max_new_tokens)?;
    Ok(CotTrace {
        vr: ctx.vr.clone(),
        joint_logprob: rationale.logprob() + answer.logprob(),
        visual_tokens: stage1.iter().filter(|&&t| t == IMG).count(),
        rationale,
        answer,
        stage1_prefix: stage1,
        stage2_prefix: stage2,
    })
}

/// Segments `image`, then runs both reasoning stages.
pub fn run_cot(model: &Model, image: &Tensor, question: Option<&str>, template: &PromptTemplate) -> Result<CotTrace> {
    let ctx = visual_context(model, image)?;
    run_cot_with(model, &ctx, question, template)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainAnswer {
    pub output: StageOutput,
    pub visual_tokens: usize,
    pub prefix: Vec<usize>,
}

/// Visual tokens of the original image alone.
pub fn plain_visual(model: &Model, image: &Tensor) -> Result<Tensor> {
    let img = model.prepare_image(image).map_err(stage_err("encoding"))?;
    model.visual_tensor(&img).map_err(stage_err("encoding"))
}

pub fn run_plain_with(model: &Model, visual: &Tensor, question: &str, max_new: usize) -> Result<PlainAnswer> {
    let prefix = prompt_ids(&model.vocab, visual.shape()[0], question);
    let output = generate_stage(model, "answer", visual, &prefix, max_new)?;
    Ok(PlainAnswer {
        visual_tokens: prefix.iter().filter(|&&t| t == IMG).count(),
        output,
        prefix,
    })
}

/// Single-stage baseline: no segmentation, no rationale.
pub fn run_plain(model: &Model, image: &Tensor, question: &str, max_new: usize) -> Result<PlainAnswer> {
    run_plain_with(model, &plain_visual(model, image)?, question, max_new)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub question: String,
    pub answer: String,
}

#[derive(Clone, Debug)]
struct Reasoning {
    ctx: VisualContext,
    prefix: Vec<usize>,
}

/// A multi-round conversation about one image. The visual context and the
/// stage-one rationale are computed on the first question and reused.
#[derive(Clone, Debug)]
pub struct DialogueState {
    pub image_ref: String,
    pub image: Tensor,
    pub rounds: Vec<Round>,
    answer_ids: Vec<Vec<usize>>,
    reasoning: Option<Reasoning>,
    rationale: Option<String>,
    segmentations: usize,
}

impl DialogueState {
    pub fn new(image_ref: impl Into<String>, image: Tensor) -> Self {
        Self {
            image_ref: image_ref.into(),
            image,
            rounds: Vec::new(),
            answer_ids: Vec::new(),
            reasoning: None,
            rationale: None,
            segmentations: 0,
        }
    }

    /// History as `Q: … A: … Q: … A: …`.
    pub fn serialize(&self) -> String {
        serialize_rounds(&self.rounds)
    }

    pub fn rationale(&self) -> Option<&str> {
        self.rationale.as_deref()
    }

    pub fn vr(&self) -> Option<&SegmentationMap> {
        self.reasoning.as_ref().map(|r| &r.ctx.vr)
    }

    /// How many times the segmenter ran for this dialogue.
    pub fn segmentations(&self) -> usize {
        self.segmentations
    }
}

pub fn serialize_rounds(rounds: &[Round]) -> String {
    rounds
        .iter()
        .map(|r| format!("Q: {} A: {}", r.question, r.answer))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq)]
pub struct DialogueReply {
    pub answer: StageOutput,
    /// Older rounds were left out of the decoder context.
    pub truncated: bool,
    pub dropped_rounds: usize,
}

/// Answers `question` in the context of the earlier rounds, dropping the
/// oldest rounds from the decoder input when the context would overflow.
pub fn continue_dialogue(
    model: &Model,
    mut state: DialogueState,
    question: &str,
    template: &PromptTemplate,
) -> Result<(DialogueReply, DialogueState)> {
    template.validate()?;
    if state.reasoning.is_none() {
        let ctx = visual_context(model, &state.image)?;
        state.segmentations += 1;
        let mut prefix = stage1_prefix(model, &ctx, template);
        let r = run_stage1(model, &ctx, template)?;
        prefix.extend_from_slice(r.generation.content());
        state.rationale = Some(r.text);
        state.reasoning = Some(Reasoning { ctx, prefix });
    }
    let reasoning = state.reasoning.as_ref().expect("computed above");
    let tail = question_ids(&model.vocab, question);
    let history: Vec<Vec<usize>> = state
        .rounds
        .iter()
        .zip(&state.answer_ids)
        .map(|(r, a)| {
            let mut ids = question_ids(&model.vocab, &r.question);
            ids.extend_from_slice(a);
            ids
        })
        .collect();
    let budget = model.config.decoder.max_len;
    let fixed = reasoning.prefix.len() + tail.len() + template.max_new_tokens;
    let mut start = 0;
    while start < history.len() && fixed + history[start..].iter().map(Vec::len).sum::<usize>() > budget {
        start += 1;
    }
    if fixed > budget {
        return Err(Error::Stage {
            stage: "answer",
            reason: format!("context of {fixed} positions exceeds the {budget}-position window"),
        });
    }
    let mut prefix = reasoning.prefix.clone();
    for h in &history[start..] {
        prefix.extend_from_slice(h);
    }
    prefix.extend(tail);
    let answer = generate_stage(model, "answer", &reasoning.ctx.tokens, &prefix, template.max_new_tokens)?;
    state.rounds.push(Round {
        question: question.to_string(),
        answer: answer.text.clone(),
    });
    state.answer_ids.push(answer.generation.content().to_vec());
    Ok((
        DialogueReply {
            answer,
            truncated: start > 0,
            dropped_rounds: start,
        },
        state,
    ))
}

/// Which prefix the category judgment is generated from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    Cot,
    Plain,
}

/// Category judgments for labelled images.
pub fn predict_categories(
    model: &Model,
    images: &[(DamageClass, &Tensor)],
    mode: InferenceMode,
    template: &PromptTemplate,
) -> Result<Vec<(DamageClass, String)>> {
    images
        .iter()
        .map(|(class, image)| {
            let text = match mode {
                InferenceMode::Cot => run_stage1(model, &visual_context(model, image)?, template),
                InferenceMode::Plain => {
                    run_plain(model, image, &template.stage1, template.max_new_tokens).map(|p| p.output)
                }
            };
            // an empty generation names no category
            let text = match text {
                Ok(o) => o.text,
                Err(Error::Stage { reason, .. }) if reason == EMPTY_GENERATION => String::new(),
                Err(e) => return Err(e),
            };
            Ok((*class, text))
        })
        .collect()
}

/// Per-category accuracy of `mode` over labelled images.
pub fn evaluate_model(
    model: &Model,
    images: &[(DamageClass, &Tensor)],
    mode: InferenceMode,
    template: &PromptTemplate,
) -> Result<dataset::CategoryReport> {
    contract!(!images.is_empty(), "cannot evaluate an empty split");
    dataset::evaluate_categories(&predict_categories(model, images, mode, template)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_rounds_serialize_in_dialogue_layout() {
        let rounds = vec![
            Round {
                question: "Determine whether there is damage to the structure in the picture.".into(),
                answer: "There are holes in the concrete surface.".into(),
            },
            Round {
                question: "Please describe the characteristics of the damage in detail.".into(),
                answer: "The concrete surface contains multiple small holes of different sizes.".into(),
            },
        ];
        assert_eq!(
            serialize_rounds(&rounds),
            "Q: Determine whether there is damage to the structure in the picture. \
             A: There are holes in the concrete surface. \
             Q: Please describe the characteristics of the damage in detail. \
             A: The concrete surface contains multiple small holes of different sizes."
        );
        assert_eq!(serialize_rounds(&[]), "");
    }

    #[test]
    fn prompt_layout() {
        let v = Vocabulary::build(["judge it ."]);
        let ids = prompt_ids(&v, 3, "Judge it.");
        assert_eq!(&ids[..4], &[IMG, IMG, IMG, BOS]);
        assert_eq!(ids.iter().filter(|&&t| t == IMG).count(), 3);
        assert_eq!(v.detokenize(&ids[4..]), "Q: judge it. A:");
    }

    #[test]
    fn empty_template_is_rejected() {
        let t = PromptTemplate {
            stage2: " ".into(),
            ..PromptTemplate::default()
        };
        assert!(t.validate().is_err());
    }
}
