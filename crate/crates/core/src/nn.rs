//! Transformer building blocks shared by the vision encoder, the aligner and
//! the decoder.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::param::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{AttnSpec, Tape, Var};
use crate::tensor::{self, Tensor};

/// How a block composes its attention and feed-forward sublayers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockMode {
    /// `x + MSA(LN(x))`, then `x + FFN(LN(x))`.
    #[default]
    Residual,
    /// The bare composition `FFN(MSA(x))`, no residual and no normalization.
    Strict,
}

/// Low-rank adapter parameters attached to a [`Linear`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoraSlot {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
}

/// `y = x·W (+ b) (+ x·A·B)` with row-vector inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub lora: Option<LoraSlot>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut RngStream) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), rng.gaussian_tensor(&[d_in, d_out], std));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[d_out])));
        Self {
            w,
            b,
            lora: None,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let mut y = tape.matmul(x, w)?;
        if let Some(slot) = self.lora {
            let a = tape.param(store, slot.a);
            let b = tape.param(store, slot.b);
            let xa = tape.matmul(x, a)?;
            let delta = tape.matmul(xa, b)?;
            y = tape.add(y, delta)?;
        }
        if let Some(b) = self.b {
            let b = tape.param(store, b);
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }

    /// Tape-free forward with the same accumulation order as [`Linear::forward`].
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut y = tensor::matmul(x, store.value(self.w))?;
        if let Some(slot) = self.lora {
            let xa = tensor::matmul(x, store.value(slot.a))?;
            let delta = tensor::matmul(&xa, store.value(slot.b))?;
            y = tensor::add(&y, &delta)?;
        }
        if let Some(b) = self.b {
            y = tensor::add_row(&y, store.value(b))?;
        }
        Ok(y)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w];
        ids.extend(self.b);
        if let Some(s) = self.lora {
            ids.push(s.a);
            ids.push(s.b);
        }
        ids
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        tensor::layer_norm_rows(x, store.value(self.gain), store.value(self.bias))
    }
}

/// Multi-head attention: per-head query/key/value projections stored as
/// column blocks of `wq`, `wk`, `wv`, followed by the output projection `wo`.
#[derive(Clone, Debug)]
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut RngStream) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.wq"), d_model, d_model, false, rng),
            wk: Linear::new(store, &format!("{name}.wk"), d_model, d_model, false, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d_model, d_model, false, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d_model, d_model, false, rng),
            heads,
        }
    }

    /// Attention of `queries` over `context`; self-attention when both are
    /// the same node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        context: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = self.wq.forward(tape, store, queries)?;
        let k = self.wk.forward(tape, store, context)?;
        let v = self.wv.forward(tape, store, context)?;
        let spec = AttnSpec {
            heads: self.heads,
            causal,
        };
        let heads = tape.attention(q, k, v, spec)?;
        self.wo.forward(tape, store, heads)
    }

    pub fn projections(&self) -> [(&'static str, &Linear); 4] {
        [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)]
    }

    pub fn projections_mut(&mut self) -> [(&'static str, &mut Linear); 4] {
        [
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ]
    }
}

/// `ReLU(x·W1 + b1)·W2 + b2`
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut RngStream) -> Self {
        Self {
            w1: Linear::new(store, &format!("{name}.w1"), d_model, d_ff, true, rng),
            w2: Linear::new(store, &format!("{name}.w2"), d_ff, d_model, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.w1.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.w2.forward(tape, store, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = tensor::relu(&self.w1.apply(store, x)?);
        self.w2.apply(store, &h)
    }
}

/// One encoder/decoder layer: self-attention then feed-forward.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), d_model),
            attn: Attention::new(store, &format!("{name}.attn"), d_model, heads, rng),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, d_ff, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: BlockMode, causal: bool) -> Result<Var> {
        match mode {
            BlockMode::Strict => {
                let z = self.attn.forward(tape, store, x, x, causal)?;
                self.ffn.forward(tape, store, z)
            }
            BlockMode::Residual => {
                let h = self.ln_attn.forward(tape, store, x)?;
                let a = self.attn.forward(tape, store, h, h, causal)?;
                let x = tape.add(x, a)?;
                let h = self.ln_ffn.forward(tape, store, x)?;
                let f = self.ffn.forward(tape, store, h)?;
                tape.add(x, f)
            }
        }
    }
}
