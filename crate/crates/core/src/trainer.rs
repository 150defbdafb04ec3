//! Masked answer loss, freeze policies and the deterministic training loop.
//!
//! Every sample is scored with teacher forcing: the loss is the summed
//! negative log-likelihood of the label tokens (each label followed by
//! `EOS`) given everything before them. Prompt and visual positions never
//! contribute. A training step sums per-record gradients in record order, so
//! the result does not depend on how many worker threads computed them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cot::{question_ids, InferenceMode};
use crate::dataset::{prompt_stages, DamageRecord};
use crate::decoder::{Vocabulary, BOS, EOS, IMG, PAD, Q_MARK};
use crate::error::{contract, Error, Result};
use crate::model::Model;
use crate::optim::{clip_grad_norm, Optimizer, OptimizerConfig};
use crate::param::ParamGrads;
use crate::rng::RngStream;
use crate::segmenter::{train_segmenter, SegmenterTrainConfig, SegmenterTrainReport};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "SDIGLM_THREADS";

/// Worker count from `SDIGLM_THREADS`; absent or `0` means one thread.
pub fn worker_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Contract(format!("{THREADS_ENV}={v:?} is not a count")))?;
            Ok(n.max(1))
        }
    }
}

/// Which parameters train.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// Everything trainable.
    #[default]
    Scratch,
    /// Image encoder and decoder adapters train; decoder base weights,
    /// aligner and segmenter stay frozen.
    PaperFinetune,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Regime::Scratch),
            "paper-finetune" => Ok(Regime::PaperFinetune),
            _ => Err(Error::Contract(format!("unknown regime {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Total optimizer steps of the run.
    pub steps: usize,
    /// Records per step.
    pub batch_size: usize,
    pub seed: u64,
    pub regime: Regime,
    /// Global gradient-norm cap.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            steps: 500,
            batch_size: 8,
            seed: 0,
            regime: Regime::Scratch,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        contract!(self.batch_size > 0, "batch size must be positive");
        if let Some(c) = self.clip_norm {
            contract!(c > 0.0, "clip norm must be positive");
        }
        Ok(())
    }
}

/// Teacher-forced token sequence with per-position targets. Position `t` is
/// scored on `targets[t]` when `mask[t]` is set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchTarget {
    pub input: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

impl BatchTarget {
    /// `prefix` followed by one label.
    pub fn answer(prefix: &[usize], label: &[usize]) -> Result<Self> {
        Self::chain(&[(prefix, false), (label, true)])
    }

    /// Concatenates prompt segments (`false`) and label segments (`true`).
    /// Each label is scored token by token and then on `EOS` at its last
    /// position, so a chain equals the separate single-label samples it
    /// contains. Labels must each follow a non-empty prompt segment.
    pub fn chain(segments: &[(&[usize], bool)]) -> Result<Self> {
        let input: Vec<usize> = segments.iter().flat_map(|(s, _)| s.iter().copied()).collect();
        contract!(!input.is_empty(), "empty training sequence");
        let mut targets: Vec<usize> = input[1..].to_vec();
        targets.push(PAD);
        let mut mask = vec![false; input.len()];
        let mut start = 0;
        let mut prev_prompt = false;
        for (seg, label) in segments {
            if *label {
                contract!(prev_prompt, "a label must follow a non-empty prompt segment");
                contract!(!seg.is_empty(), "empty label");
                for k in 0..=seg.len() {
                    let t = start + k - 1;
                    targets[t] = if k < seg.len() { seg[k] } else { EOS };
                    mask[t] = true;
                }
                prev_prompt = false;
            } else {
                prev_prompt = !seg.is_empty();
            }
            start += seg.len();
        }
        Ok(Self { input, targets, mask })
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&t| self.mask[t]).collect()
    }

    pub fn label_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Summed masked negative log-likelihood on `tape`.
pub fn answer_loss_on_tape(model: &Model, tape: &mut Tape, visual: Option<Var>, target: &BatchTarget) -> Result<Var> {
    let positions = target.masked_positions();
    contract!(!positions.is_empty(), "loss mask is empty");
    let x = model.decoder.embed(tape, &model.store, visual, &target.input)?;
    let logits = model.decoder.logits_at(tape, &model.store, x, &positions)?;
    let labels: Vec<usize> = positions.iter().map(|&t| target.targets[t]).collect();
    tape.cross_entropy_sum(logits, &labels)
}

/// `−Σ log P(aⱼ | …)` over masked positions, given precomputed visual tokens.
pub fn answer_loss(model: &Model, visual: Option<&Tensor>, target: &BatchTarget) -> Result<f64> {
    let mut tape = Tape::new();
    let v = visual.map(|v| tape.leaf(v.clone()));
    let l = answer_loss_on_tape(model, &mut tape, v, target)?;
    Ok(tape.scalar(l))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub layout: InferenceMode,
    pub target: BatchTarget,
}

/// Training samples for one record. A `Q: s1 A: R Q: s2` prompt yields a
/// chain-of-thought sequence (rationale and description labels behind
/// `[VR][image]` tokens) and a plain sequence (rationale behind the image
/// tokens alone). Any other prompt yields one sample per layout.
pub fn record_examples(vocab: &Vocabulary, queries: usize, record: &DamageRecord) -> Result<Vec<TrainExample>> {
    let head = |visual: usize| {
        let mut ids = vec![IMG; visual];
        ids.push(BOS);
        ids
    };
    let label = vocab.tokenize(&record.label);
    contract!(!label.is_empty(), "label of {:?} has no tokens", record.img);
    if let Ok((s1, r, s2)) = prompt_stages(&record.prompt) {
        let rationale = vocab.tokenize(&r);
        let q1 = question_ids(vocab, &s1);
        let q2 = question_ids(vocab, &s2);
        let mut cot_head = head(2 * queries);
        cot_head.extend_from_slice(&q1);
        let mut plain_head = head(queries);
        plain_head.extend_from_slice(&q1);
        return Ok(vec![
            TrainExample {
                layout: InferenceMode::Cot,
                target: BatchTarget::chain(&[(&cot_head, false), (&rationale, true), (&q2, false), (&label, true)])?,
            },
            TrainExample {
                layout: InferenceMode::Plain,
                target: BatchTarget::answer(&plain_head, &rationale)?,
            },
        ]);
    }
    let prompt = vocab.tokenize(&record.prompt);
    let question = if prompt.first() == Some(&Q_MARK) {
        vocab.tokenize(&format!("{} A:", record.prompt))
    } else {
        question_ids(vocab, &record.prompt)
    };
    [(InferenceMode::Cot, 2 * queries), (InferenceMode::Plain, queries)]
        .into_iter()
        .map(|(layout, visual)| {
            let mut ids = head(visual);
            ids.extend_from_slice(&question);
            Ok(TrainExample {
                layout,
                target: BatchTarget::answer(&ids, &label)?,
            })
        })
        .collect()
}

/// A record with its normalized image, rendered segmentation and samples.
#[derive(Clone, Debug)]
pub struct PreparedRecord {
    pub image: Tensor,
    pub vr: Tensor,
    pub examples: Vec<TrainExample>,
}

/// Normalizes images, runs the (frozen) segmenter and tokenizes the text.
pub fn prepare_records(model: &Model, records: &[(DamageRecord, Tensor)]) -> Result<Vec<PreparedRecord>> {
    let threads = worker_threads()?;
    parallel_map(records, threads, |(record, image)| {
        let image = model.prepare_image(image)?;
        let vr = model.vr_image(&model.segment(&image)?)?;
        let examples = record_examples(&model.vocab, model.queries(), record)?;
        Ok(PreparedRecord { image, vr, examples })
    })
}

/// Applies `f` to every item on up to `threads` scoped workers, keeping the
/// input order.
fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Result<Vec<U>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Summed loss of every sample of one record, and its label-token count.
pub fn record_loss(model: &Model, tape: &mut Tape, record: &PreparedRecord) -> Result<(Var, usize)> {
    let img = model.visual_tokens(tape, &record.image)?;
    let needs_vr = record.examples.iter().any(|e| e.layout == InferenceMode::Cot);
    let cot = if needs_vr {
        let vr = model.visual_tokens(tape, &record.vr)?;
        Some(tape.concat_rows(&[vr, img])?)
    } else {
        None
    };
    let mut parts = Vec::with_capacity(record.examples.len());
    let mut tokens = 0;
    for ex in &record.examples {
        let visual = match ex.layout {
            InferenceMode::Cot => cot.expect("built above"),
            InferenceMode::Plain => img,
        };
        parts.push(answer_loss_on_tape(model, tape, Some(visual), &ex.target)?);
        tokens += ex.target.label_tokens();
    }
    Ok((tape.add_scalars(&parts)?, tokens))
}

/// Mean per-token loss over records, without gradients.
pub fn mean_loss(model: &Model, records: &[PreparedRecord]) -> Result<f64> {
    let threads = worker_threads()?;
    let parts = parallel_map(records, threads, |r| {
        let mut tape = Tape::new();
        let (l, n) = record_loss(model, &mut tape, r)?;
        Ok((tape.scalar(l), n))
    })?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, n), (l, k)| (s + l, n + k));
    Ok(sum / n as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Mean per-token loss of the batch before the update.
    pub loss: f64,
    pub tokens: usize,
    pub grad_norm: f64,
}

/// One optimizer step on `batch`: the gradient of the mean per-token loss
/// reaches trainable parameters only.
pub fn train_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    batch: &[&PreparedRecord],
    clip_norm: Option<f64>,
) -> Result<StepStats> {
    contract!(!batch.is_empty(), "empty batch");
    let threads = worker_threads()?;
    let n_params = model.store.len();
    let m: &Model = model;
    let parts = parallel_map(batch, threads, |r| {
        let mut tape = Tape::new();
        let (l, n) = record_loss(m, &mut tape, r)?;
        let grads = tape.backward(l)?;
        Ok((tape.scalar(l), n, tape.param_grads(&grads, n_params)))
    })?;
    let mut total = ParamGrads::with_len(n_params);
    let mut loss = 0.0;
    let mut tokens = 0;
    for (l, n, g) in &parts {
        loss += l;
        tokens += n;
        total.add_assign(g);
    }
    let loss = loss / tokens as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "answer loss" });
    }
    total.scale(1.0 / tokens as f64);
    let store = &mut model.store;
    store.zero_grads();
    store.accumulate(&total);
    let grad_norm = match clip_norm {
        Some(c) => clip_grad_norm(store, c),
        None => clip_grad_norm(store, f64::INFINITY),
    };
    if !grad_norm.is_finite() {
        store.zero_grads();
        return Err(Error::NonFinite { op: "gradient" });
    }
    optimizer.apply(store);
    Ok(StepStats {
        loss,
        tokens,
        grad_norm,
    })
}

/// Sets trainable flags for `regime` and returns the trainable count. The
/// fine-tuning regime attaches adapters first when none are present.
pub fn apply_freeze_policy(model: &mut Model, regime: Regime) -> Result<usize> {
    match regime {
        Regime::Scratch => model.store.set_all_trainable(true),
        Regime::PaperFinetune => {
            model.attach_lora()?;
            let store = &mut model.store;
            store.set_all_trainable(false);
            store.set_trainable_prefix("vision.", true);
            let set = model.adapters.as_ref().expect("attached above");
            for (_, slot) in &set.slots {
                store.get_mut(slot.a).trainable = true;
                store.get_mut(slot.b).trainable = true;
            }
        }
    }
    Ok(model.store.trainable_count())
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub regime: Regime,
    pub seed: u64,
    pub batch_size: usize,
    /// Completed steps.
    pub step: usize,
    /// Per-step losses so far.
    pub losses: Vec<f64>,
    pub optimizer: Optimizer,
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub losses: Vec<f64>,
    pub trainable: usize,
    pub state: TrainState,
}

/// Record order of epoch `e`: a fixed permutation per seed and epoch, so
/// the `k`-th sample of a run is a pure function of `k`.
struct EpochOrder {
    seed: u64,
    n: usize,
    cache: HashMap<usize, Vec<usize>>,
}

impl EpochOrder {
    fn sample(&mut self, k: usize) -> usize {
        let (seed, n) = (self.seed, self.n);
        let order = self
            .cache
            .entry(k / n)
            .or_insert_with(|| RngStream::derive(seed, &format!("epoch-{}", k / n)).permutation(n));
        order[k % n]
    }
}

/// Trains until `config.steps` steps are complete, continuing from `resume`
/// when given. `progress` sees every step.
pub fn fit(
    model: &mut Model,
    records: &[PreparedRecord],
    config: &TrainConfig,
    resume: Option<TrainState>,
    mut progress: impl FnMut(usize, &StepStats),
) -> Result<FitReport> {
    config.validate()?;
    contract!(!records.is_empty(), "cannot train on an empty corpus");
    let trainable = apply_freeze_policy(model, config.regime)?;
    let mut state = match resume {
        Some(s) => {
            contract!(
                s.regime == config.regime && s.seed == config.seed && s.batch_size == config.batch_size,
                "resume state ({:?}, seed {}, batch {}) does not match the run config",
                s.regime,
                s.seed,
                s.batch_size
            );
            contract!(s.step <= config.steps, "resume state is past the final step");
            s
        }
        None => TrainState {
            regime: config.regime,
            seed: config.seed,
            batch_size: config.batch_size,
            step: 0,
            losses: Vec::new(),
            optimizer: Optimizer::new(config.optimizer.clone())?,
        },
    };
    state.optimizer.config = config.optimizer.clone();
    let mut order = EpochOrder {
        seed: config.seed,
        n: records.len(),
        cache: HashMap::new(),
    };
    while state.step < config.steps {
        let first = state.step * config.batch_size;
        let batch: Vec<&PreparedRecord> = (first..first + config.batch_size)
            .map(|k| &records[order.sample(k)])
            .collect();
        order.cache.retain(|&e, _| e + 1 >= first / records.len());
        let stats = train_step(model, &mut state.optimizer, &batch, config.clip_norm)?;
        state.losses.push(stats.loss);
        state.step += 1;
        progress(state.step, &stats);
    }
    model.store.zero_grads();
    Ok(FitReport {
        losses: state.losses.clone(),
        trainable,
        state,
    })
}

/// Fraction of steps from `start` on whose loss exceeds the previous step's.
pub fn uptick_fraction(losses: &[f64], start: usize) -> f64 {
    if losses.len() <= start + 1 {
        return 0.0;
    }
    let ups = (start + 1..losses.len()).filter(|&i| losses[i] > losses[i - 1]).count();
    ups as f64 / (losses.len() - start - 1) as f64
}

/// Trains the segmenter on `(8-bit image, binary mask)` pairs.
pub fn fit_segmenter(
    model: &mut Model,
    pairs: &[(&Tensor, &Tensor)],
    config: &SegmenterTrainConfig,
) -> Result<SegmenterTrainReport> {
    let corpus = pairs
        .iter()
        .map(|(img, mask)| Ok((model.prepare_image(img)?, (*mask).clone())))
        .collect::<Result<Vec<_>>>()?;
    train_segmenter(&model.segmenter, &mut model.store, &corpus, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chain_marks_labels_and_their_eos() {
        let t = BatchTarget::chain(&[(&[10, 11], false), (&[20, 21], true), (&[12], false), (&[30], true)]).unwrap();
        assert_eq!(t.input, vec![10, 11, 20, 21, 12, 30]);
        assert_eq!(t.targets, vec![11, 20, 21, EOS, 30, EOS]);
        assert_eq!(t.mask, vec![false, true, true, true, true, true]);
        let a = BatchTarget::answer(&[10, 11], &[20]).unwrap();
        assert_eq!(a.input, vec![10, 11, 20]);
        assert_eq!(a.masked_positions(), vec![1, 2]);
        assert_eq!(a.targets[1..], [20, EOS]);
    }

    #[test]
    fn chain_rejects_leading_or_adjacent_labels() {
        assert!(BatchTarget::chain(&[(&[1], true)]).is_err());
        assert!(BatchTarget::chain(&[(&[1], false), (&[2], true), (&[3], true)]).is_err());
        assert!(BatchTarget::chain(&[(&[1], false), (&[], true)]).is_err());
    }

    #[test]
    fn regime_names() {
        assert_eq!("paper-finetune".parse::<Regime>().unwrap(), Regime::PaperFinetune);
        assert!("lora-only".parse::<Regime>().is_err());
    }

    #[test]
    fn uptick_counting() {
        assert_eq!(uptick_fraction(&[3.0, 2.0, 2.5, 1.0, 0.5], 0), 0.25);
        assert_eq!(uptick_fraction(&[1.0], 0), 0.0);
    }
}
