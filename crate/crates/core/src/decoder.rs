//! Causal transformer decoder over a word-level vocabulary: tokenization,
//! teacher-forced scoring, and greedy generation with an incremental
//! key/value cache.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::nn::{Block, BlockMode, LayerNorm, Linear};
use crate::param::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{attention_forward, AttnSpec, Tape, Var};
use crate::tensor::{self, log_sum_exp, Tensor};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Slot marker for one soft visual token.
pub const IMG: usize = 4;
pub const Q_MARK: usize = 5;
pub const A_MARK: usize = 6;
pub const SPECIALS: [&str; 7] = ["<pad>", "<bos>", "<eos>", "<unk>", "<img>", "Q:", "A:"];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Splits text into word, punctuation and role-marker pieces.
///
/// Words are lowercased alphanumeric runs; every other non-space character
/// is its own piece. An uppercase `Q` or `A` standing alone and followed
/// (after optional spaces) by `:` becomes the role marker `Q:` or `A:`.
pub fn split_pieces(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if (c == 'Q' || c == 'A')
            && (i == 0 || !is_word_char(chars[i - 1]))
            && (i + 1 == chars.len() || !is_word_char(chars[i + 1]))
        {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            if j < chars.len() && chars[j] == ':' {
                out.push(format!("{c}:"));
                i = j + 1;
                continue;
            }
        }
        if is_word_char(c) {
            let start = i;
            while i < chars.len() && is_word_char(chars[i]) {
                i += 1;
            }
            out.push(chars[start..i].iter().collect::<String>().to_lowercase());
        } else {
            out.push(c.to_string());
            i += 1;
        }
    }
    out
}

fn is_punctuation(piece: &str) -> bool {
    let mut cs = piece.chars();
    matches!((cs.next(), cs.next()), (Some(c), None) if !is_word_char(c))
}

/// Joins pieces with single spaces, attaching punctuation to the preceding piece.
pub fn join_pieces<S: AsRef<str>>(pieces: &[S]) -> String {
    let mut out = String::new();
    for p in pieces {
        let p = p.as_ref();
        if !out.is_empty() && !is_punctuation(p) {
            out.push(' ');
        }
        out.push_str(p);
    }
    out
}

/// Canonical form of a text: the join of its pieces.
pub fn normalize_text(text: &str) -> String {
    join_pieces(&split_pieces(text))
}

/// Token ↔ id bijection. Ids are dense from zero, specials first, then
/// corpus pieces in first-occurrence order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::from_tokens(SPECIALS.iter().map(|s| s.to_string()).collect()).expect("specials are distinct");
        for text in texts {
            for piece in split_pieces(text) {
                if !v.index.contains_key(&piece) {
                    v.index.insert(piece.clone(), v.tokens.len());
                    v.tokens.push(piece);
                }
            }
        }
        v
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_pieces(text).iter().map(|p| self.id(p).unwrap_or(UNK)).collect()
    }

    /// Text of `ids`, skipping padding, sequence markers and visual slots.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let pieces: Vec<&str> = ids
            .iter()
            .filter(|&&i| !matches!(i, PAD | BOS | EOS | IMG))
            .map(|&i| self.token(i).unwrap_or(SPECIALS[UNK]))
            .collect();
        join_pieces(&pieces)
    }

    /// `{token: id}` object.
    pub fn to_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), serde_json::Value::from(i)))
            .collect();
        serde_json::Value::Object(map)
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let map = value
            .as_object()
            .ok_or_else(|| Error::Data("vocabulary must be a JSON object".into()))?;
        let mut tokens = vec![None; map.len()];
        for (t, id) in map {
            let id = id
                .as_u64()
                .map(|i| i as usize)
                .filter(|&i| i < tokens.len())
                .ok_or_else(|| Error::Data(format!("bad id for vocabulary token {t:?}")))?;
            if tokens[id].replace(t.clone()).is_some() {
                return Err(Error::Data(format!("vocabulary id {id} used twice")));
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("ids dense")).collect();
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Data(format!("vocabulary id {i} must be {s:?}")));
            }
        }
        Self::from_tokens(tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_lm: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub mode: BlockMode,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_lm: 32,
            layers: 4,
            heads: 4,
            d_ff: 64,
            max_len: 128,
            mode: BlockMode::Residual,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.vocab_size > 0, "decoder vocabulary is empty");
        contract!(
            self.heads > 0 && self.d_lm % self.heads == 0,
            "{} heads do not divide d_lm {}",
            self.heads,
            self.d_lm
        );
        contract!(self.max_len > 0 && self.d_ff > 0, "decoder sizes must be positive");
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<Block>,
    pub ln_f: LayerNorm,
    pub out: Linear,
}

/// Greedy decoding output. `tokens` ends with `EOS` when generation stopped
/// on it; `step_logprobs[i]` is the log-probability of `tokens[i]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub tokens: Vec<usize>,
    pub step_logprobs: Vec<f64>,
    pub total_logprob: f64,
    pub stopped_at_eos: bool,
}

impl GenerationResult {
    /// Generated tokens without the trailing `EOS`.
    pub fn content(&self) -> &[usize] {
        match self.tokens.last() {
            Some(&EOS) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Row-wise log-softmax.
pub fn log_softmax_rows(logits: &Tensor) -> Result<Tensor> {
    let (_, v) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(v) {
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|x| *x -= lse);
    }
    out.checked("log_softmax")
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Decoder {
    pub fn new(store: &mut ParamStore, config: DecoderConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.d_lm;
        let tok_emb = store.add("decoder.tok_emb", rng.gaussian_tensor(&[config.vocab_size, d], 1.0));
        let pos_emb = store.add("decoder.pos_emb", rng.gaussian_tensor(&[config.max_len, d], 0.02));
        let layers = (0..config.layers)
            .map(|i| Block::new(store, &format!("decoder.layer{i}"), d, config.heads, config.d_ff, rng))
            .collect();
        let ln_f = LayerNorm::new(store, "decoder.ln_f", d);
        let out = Linear::new(store, "decoder.out", d, config.vocab_size, true, rng);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            ln_f,
            out,
        })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn check_len(&self, t: usize) -> Result<()> {
        contract!(t > 0, "decoder input is empty");
        contract!(
            t <= self.config.max_len,
            "sequence of {t} positions exceeds max_len {}",
            self.config.max_len
        );
        Ok(())
    }

    /// Input embeddings (without positions) for `ids`, with the rows of
    /// `visual` substituted at the `IMG` slots in order.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, visual: Option<Var>, ids: &[usize]) -> Result<Var> {
        self.check_ids(ids)?;
        self.check_len(ids.len())?;
        let slots = ids.iter().filter(|&&i| i == IMG).count();
        let rows = match visual {
            Some(v) => tape.value(v).dims2()?.0,
            None => 0,
        };
        contract!(slots == rows, "{slots} visual slots but {rows} visual tokens supplied");
        let table = tape.param(store, self.tok_emb);
        let mut parts = Vec::new();
        let mut used = 0;
        let mut i = 0;
        while i < ids.len() {
            let is_img = ids[i] == IMG;
            let start = i;
            while i < ids.len() && (ids[i] == IMG) == is_img {
                i += 1;
            }
            let len = i - start;
            if is_img {
                let v = visual.expect("slot count checked above");
                parts.push(tape.slice_rows(v, used, len)?);
                used += len;
            } else {
                parts.push(tape.gather_rows(table, &ids[start..i])?);
            }
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            tape.concat_rows(&parts)
        }
    }

    /// Final hidden states of `x` (`T × d_lm` input embeddings).
    pub fn hidden(&self, tape: &mut Tape, store: &ParamStore, x: Var, causal: bool) -> Result<Var> {
        let (t, d) = tape.value(x).dims2()?;
        self.check_len(t)?;
        contract!(
            d == self.config.d_lm,
            "embedding width {d} differs from d_lm {}",
            self.config.d_lm
        );
        let pos_table = tape.param(store, self.pos_emb);
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.gather_rows(pos_table, &positions)?;
        let mut h = tape.add(x, pos)?;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, self.config.mode, causal)?;
        }
        self.ln_f.forward(tape, store, h)
    }

    /// Causal next-token logits at every position of `x`.
    pub fn forward_logits(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden(tape, store, x, true)?;
        self.out.forward(tape, store, h)
    }

    /// Logits at an unmasked run: every position sees the whole input.
    pub fn forward_logits_unmasked(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden(tape, store, x, false)?;
        self.out.forward(tape, store, h)
    }

    /// Causal logits only at `positions`.
    pub fn logits_at(&self, tape: &mut Tape, store: &ParamStore, x: Var, positions: &[usize]) -> Result<Var> {
        let h = self.hidden(tape, store, x, true)?;
        let h = tape.gather_rows(h, positions)?;
        self.out.forward(tape, store, h)
    }

    /// Per-token log-probabilities of `answer` after `prefix`, teacher forced
    /// in a single pass.
    pub fn score_steps(
        &self,
        store: &ParamStore,
        visual: Option<&Tensor>,
        prefix: &[usize],
        answer: &[usize],
    ) -> Result<Vec<f64>> {
        contract!(!answer.is_empty(), "cannot score an empty answer");
        contract!(!prefix.is_empty(), "scoring needs a non-empty prefix");
        self.check_ids(answer)?;
        let mut ids = prefix.to_vec();
        ids.extend_from_slice(&answer[..answer.len() - 1]);
        let mut tape = Tape::new();
        let vis = visual.map(|v| tape.leaf(v.clone()));
        let x = self.embed(&mut tape, store, vis, &ids)?;
        let positions: Vec<usize> = (prefix.len() - 1..ids.len()).collect();
        let logits = self.logits_at(&mut tape, store, x, &positions)?;
        let logp = log_softmax_rows(tape.value(logits))?;
        Ok(answer.iter().enumerate().map(|(i, &a)| logp.at2(i, a)).collect())
    }

    /// `Σᵢ log p(aᵢ | prefix, a₍<ᵢ₎)`.
    pub fn score(
        &self,
        store: &ParamStore,
        visual: Option<&Tensor>,
        prefix: &[usize],
        answer: &[usize],
    ) -> Result<f64> {
        Ok(self.score_steps(store, visual, prefix, answer)?.iter().sum())
    }

    /// Tape-free input embeddings for a session.
    pub fn embed_tensor(&self, store: &ParamStore, visual: Option<&Tensor>, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vis = visual.map(|v| tape.leaf(v.clone()));
        let x = self.embed(&mut tape, store, vis, ids)?;
        Ok(tape.value(x).clone())
    }

    pub fn session<'a>(&'a self, store: &'a ParamStore) -> DecoderSession<'a> {
        DecoderSession {
            decoder: self,
            store,
            keys: vec![None; self.layers.len()],
            values: vec![None; self.layers.len()],
            len: 0,
        }
    }

    /// Greedy decoding: appends the most probable token (lowest id on ties)
    /// until `EOS`, `max_new` tokens, or the position limit.
    pub fn generate(
        &self,
        store: &ParamStore,
        visual: Option<&Tensor>,
        prefix: &[usize],
        max_new: usize,
    ) -> Result<GenerationResult> {
        let mut result = GenerationResult::default();
        if max_new == 0 {
            return Ok(result);
        }
        let mut session = self.session(store);
        let x = self.embed_tensor(store, visual, prefix)?;
        let mut logits = session.feed(&x)?;
        loop {
            let last = logits.shape()[0] - 1;
            let row = &logits.data()[last * self.config.vocab_size..];
            let lse = log_sum_exp(row);
            let next = argmax(row);
            let lp = row[next] - lse;
            result.tokens.push(next);
            result.step_logprobs.push(lp);
            result.total_logprob += lp;
            if next == EOS {
                result.stopped_at_eos = true;
                break;
            }
            if result.tokens.len() == max_new || session.len() == self.config.max_len {
                break;
            }
            let x = self.embed_tensor(store, None, &[next])?;
            logits = session.feed(&x)?;
        }
        Ok(result)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok_emb, self.pos_emb];
        for b in &self.layers {
            ids.extend([b.ln_attn.gain, b.ln_attn.bias, b.ln_ffn.gain, b.ln_ffn.bias]);
            for (_, l) in b.attn.projections() {
                ids.extend(l.param_ids());
            }
            ids.extend(b.ffn.w1.param_ids());
            ids.extend(b.ffn.w2.param_ids());
        }
        ids.extend([self.ln_f.gain, self.ln_f.bias]);
        ids.extend(self.out.param_ids());
        ids
    }
}

/// Incremental decoding state: per-layer cached keys and values.
pub struct DecoderSession<'a> {
    decoder: &'a Decoder,
    store: &'a ParamStore,
    keys: Vec<Option<Tensor>>,
    values: Vec<Option<Tensor>>,
    len: usize,
}

fn append_rows(cache: &mut Option<Tensor>, rows: Tensor) -> Result<&Tensor> {
    let next = match cache.take() {
        Some(c) => Tensor::concat_rows(&[&c, &rows])?,
        None => rows,
    };
    Ok(cache.insert(next))
}

impl DecoderSession<'_> {
    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Consumes `x` (`n × d_lm` input embeddings) at the next `n` positions
    /// and returns their logits.
    pub fn feed(&mut self, x: &Tensor) -> Result<Tensor> {
        let dec = self.decoder;
        let store = self.store;
        let (n, _) = x.dims2()?;
        dec.check_len(self.len + n)?;
        let positions: Vec<usize> = (self.len..self.len + n).collect();
        let pos_rows: Vec<&[f64]> = positions.iter().map(|&p| store.value(dec.pos_emb).row(p)).collect();
        let pos = Tensor::new(vec![n, dec.config.d_lm], pos_rows.concat())?;
        let mut h = tensor::add(x, &pos)?;
        for (l, block) in dec.layers.iter().enumerate() {
            let attn = &block.attn;
            let spec = AttnSpec {
                heads: attn.heads,
                causal: true,
            };
            let src = match dec.config.mode {
                BlockMode::Residual => block.ln_attn.apply(store, &h)?,
                BlockMode::Strict => h.clone(),
            };
            let q = attn.wq.apply(store, &src)?;
            let k_new = attn.wk.apply(store, &src)?;
            let v_new = attn.wv.apply(store, &src)?;
            let k = append_rows(&mut self.keys[l], k_new)?.clone();
            let v = append_rows(&mut self.values[l], v_new)?;
            let (heads, _) = attention_forward(&q, &k, v, spec)?;
            let a = attn.wo.apply(store, &heads)?;
            h = match dec.config.mode {
                BlockMode::Residual => {
                    let x1 = tensor::add(&h, &a)?;
                    let f = block.ffn.apply(store, &block.ln_ffn.apply(store, &x1)?)?;
                    tensor::add(&x1, &f)?
                }
                BlockMode::Strict => block.ffn.apply(store, &a)?,
            };
        }
        self.len += n;
        let h = dec.ln_f.apply(store, &h)?;
        dec.out.apply(store, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;

    fn toy(vocab: usize, layers: usize, seed: u64) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let cfg = DecoderConfig {
            vocab_size: vocab,
            d_lm: 16,
            layers,
            heads: 2,
            d_ff: 24,
            max_len: 32,
            mode: BlockMode::Residual,
        };
        let dec = Decoder::new(&mut store, cfg, &mut RngStream::new(seed)).unwrap();
        (store, dec)
    }

    #[test]
    fn tokenize_examples() {
        assert!(split_pieces("").is_empty());
        assert_eq!(
            split_pieces("A: There are cracks."),
            ["A:", "there", "are", "cracks", "."]
        );
        assert_eq!(split_pieces(" Q : Why? A : No."), ["Q:", "why", "?", "A:", "no", "."]);
        assert_eq!(split_pieces("A crack: wide"), ["a", "crack", ":", "wide"]);
        assert_eq!(split_pieces("q: lower"), ["q", ":", "lower"]);
    }

    #[test]
    fn vocabulary_is_first_occurrence_ordered() {
        let v = Vocabulary::build(["b a.", "a c"]);
        assert_eq!(&v.tokens()[..7], SPECIALS.map(String::from).as_slice());
        assert_eq!(&v.tokens()[7..], ["b", "a", ".", "c"]);
        assert_eq!(v.tokenize("A: c d"), vec![A_MARK, 10, UNK]);
        assert_eq!(v.tokenize("A c"), vec![8, 10]);
        assert_eq!(v.detokenize(&v.tokenize("B  a . c")), "b a. c");
    }

    #[test]
    fn specials_never_come_from_text() {
        let v = Vocabulary::build(["<pad> <eos> <img>"]);
        let ids = v.tokenize("<pad> <eos> <img>");
        assert!(ids.iter().all(|&i| i >= SPECIALS.len()));
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = Vocabulary::build(["there are holes in the concrete surface."]);
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(v, back);
        let mut bad = v.to_json();
        bad["there"] = serde_json::json!(0);
        assert!(Vocabulary::from_json(&bad).is_err());
    }

    #[test]
    fn suffix_perturbation_leaves_prefix_logits_bit_identical() {
        let (store, dec) = toy(20, 2, 1);
        let x = RngStream::new(2).gaussian_tensor(&[7, 16], 1.0);
        let mut y = x.clone();
        for v in &mut y.data_mut()[5 * 16..] {
            *v += 0.37;
        }
        let run = |input: &Tensor| {
            let mut t = Tape::new();
            let v = t.leaf(input.clone());
            let l = dec.forward_logits(&mut t, &store, v).unwrap();
            t.value(l).clone()
        };
        let (a, b) = (run(&x), run(&y));
        assert!(a.slice_rows(0, 5).unwrap().bit_eq(&b.slice_rows(0, 5).unwrap()));
        assert!(!a.slice_rows(5, 2).unwrap().bit_eq(&b.slice_rows(5, 2).unwrap()));
    }

    #[test]
    fn causal_logits_match_prefix_reruns() {
        let (store, dec) = toy(20, 2, 3);
        let x = RngStream::new(4).gaussian_tensor(&[6, 16], 1.0);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let full = dec.forward_logits(&mut t, &store, v).unwrap();
        let full = t.value(full).clone();
        for len in 1..=6 {
            let mut t = Tape::new();
            let v = t.leaf(x.slice_rows(0, len).unwrap());
            let l = dec.forward_logits(&mut t, &store, v).unwrap();
            assert!(t.value(l).bit_eq(&full.slice_rows(0, len).unwrap()));
        }
    }

    #[test]
    fn one_layer_causal_logits_match_unmasked_prefix_runs() {
        // With a single layer, the last row of an unmasked run over x[..=t]
        // sees exactly what causal row t sees.
        let (store, dec) = toy(20, 1, 3);
        let x = RngStream::new(4).gaussian_tensor(&[6, 16], 1.0);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let full = dec.forward_logits(&mut t, &store, v).unwrap();
        let full = t.value(full).clone();
        for len in 1..=6 {
            let mut t = Tape::new();
            let v = t.leaf(x.slice_rows(0, len).unwrap());
            let l = dec.forward_logits_unmasked(&mut t, &store, v).unwrap();
            let last = t.value(l).slice_rows(len - 1, 1).unwrap();
            assert!(last.max_abs_diff(&full.slice_rows(len - 1, 1).unwrap()) < 1e-12);
        }
    }

    #[test]
    fn single_position_depends_only_on_its_embedding() {
        let (store, dec) = toy(20, 2, 5);
        let x = RngStream::new(6).gaussian_tensor(&[1, 16], 1.0);
        let run = || {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let l = dec.forward_logits(&mut t, &store, v).unwrap();
            t.value(l).clone()
        };
        assert!(run().bit_eq(&run()));
    }

    #[test]
    fn next_token_distributions_sum_to_one() {
        let (store, dec) = toy(30, 2, 7);
        let x = RngStream::new(8).gaussian_tensor(&[9, 16], 30.0);
        let mut t = Tape::new();
        let v = t.leaf(x);
        let l = dec.forward_logits(&mut t, &store, v).unwrap();
        let p = tensor::softmax_rows(t.value(l)).unwrap();
        for r in 0..9 {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_model_scores_minus_three_ln_four() {
        let (mut store, dec) = toy(4, 1, 9);
        store.set_value(dec.out.w, Tensor::zeros(&[16, 4])).unwrap();
        let s = dec.score(&store, None, &[BOS], &[0, 3, 2]).unwrap();
        assert!((s + 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rescoring_matches_generation() {
        let (store, dec) = toy(12, 2, 10);
        let visual = RngStream::new(11).gaussian_tensor(&[3, 16], 1.0);
        let prefix = [IMG, IMG, IMG, BOS, 7, 8];
        let g = dec.generate(&store, Some(&visual), &prefix, 10).unwrap();
        assert!(!g.tokens.is_empty());
        let sum: f64 = g.step_logprobs.iter().sum();
        assert!((sum - g.total_logprob).abs() < 1e-10);
        let s = dec.score(&store, Some(&visual), &prefix, &g.tokens).unwrap();
        assert!((s - g.total_logprob).abs() < 1e-10, "{s} vs {}", g.total_logprob);
        let again = dec.generate(&store, Some(&visual), &prefix, 10).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn zero_budget_generation_is_empty() {
        let (store, dec) = toy(12, 1, 12);
        let g = dec.generate(&store, None, &[BOS], 0).unwrap();
        assert!(g.tokens.is_empty());
        assert_eq!(g.total_logprob, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn unknown_ids_and_slot_mismatch_are_rejected() {
        let (store, dec) = toy(12, 1, 13);
        assert!(dec.score(&store, None, &[BOS], &[12]).is_err());
        assert!(dec.score(&store, None, &[BOS], &[]).is_err());
        let v = Tensor::zeros(&[2, 16]);
        assert!(dec.score(&store, Some(&v), &[IMG, BOS], &[5]).is_err());
    }

    #[test]
    fn score_gradients_match_finite_differences() {
        let (store, dec) = toy(10, 2, 14);
        let ids: Vec<_> = store.ids().collect();
        let prefix = [BOS, 7, 8];
        let answer = [9usize, 5, EOS];
        let mut rng = RngStream::new(15);
        let report = grad_check_params(&store, &ids, 1e-6, Some((12, &mut rng)), |t, s| {
            let mut all = prefix.to_vec();
            all.extend_from_slice(&answer[..2]);
            let x = dec.embed(t, s, None, &all)?;
            let l = dec.logits_at(t, s, x, &[2, 3, 4])?;
            t.cross_entropy_sum(l, &answer)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        assert!(report.checked > 100);
    }
}
