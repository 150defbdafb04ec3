//! Query-based aligner pooling image tokens into a fixed-length visual
//! prefix for the decoder.
//!
//! A fixed set of learnable query vectors runs through layers of
//! self-attention among the queries, cross-attention onto the image tokens
//! (keys and values come only from the image), and a feed-forward network.
//! The result is projected to the decoder's embedding width.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nn::{Attention, FeedForward, LayerNorm, Linear};
use crate::param::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{attention_forward, AttnSpec, Tape, Var};
use crate::tensor::{matmul, Tensor};
use crate::vision::MsaWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QFormerConfig {
    pub queries: usize,
    pub layers: usize,
    /// Width of the queries and of the incoming image tokens.
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    /// Decoder embedding width.
    pub d_lm: usize,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            queries: 8,
            layers: 1,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            d_lm: 32,
        }
    }
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.queries > 0, "aligner needs at least one query");
        contract!(
            self.heads > 0 && self.d_model % self.heads == 0,
            "{} heads do not divide d_model {}",
            self.heads,
            self.d_model
        );
        contract!(self.d_ff > 0 && self.d_lm > 0, "aligner widths must be positive");
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct QFormerLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct QFormer {
    pub config: QFormerConfig,
    pub queries: ParamId,
    pub layers: Vec<QFormerLayer>,
    pub proj: Linear,
}

/// Cross-attention of `queries` onto `image_tokens`: `Q` from the queries,
/// `K` and `V` from the image tokens, heads concatenated and mixed by `W_z`.
pub fn cross_attend(queries: &Tensor, image_tokens: &Tensor, w: &MsaWeights) -> Result<Tensor> {
    let (_, dq) = queries.dims2()?;
    let (n, di) = image_tokens.dims2()?;
    contract!(n > 0, "cross-attention over an empty image token sequence");
    contract!(dq == di, "query width {dq} differs from image token width {di}");
    let q = matmul(queries, &w.wq)?;
    let k = matmul(image_tokens, &w.wk)?;
    let v = matmul(image_tokens, &w.wv)?;
    let spec = AttnSpec {
        heads: w.heads,
        causal: false,
    };
    let (heads, _) = attention_forward(&q, &k, &v, spec)?;
    matmul(&heads, &w.wz)
}

impl QFormer {
    pub fn new(store: &mut ParamStore, config: QFormerConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let queries = store.add("qformer.queries", rng.gaussian_tensor(&[config.queries, d], 1.0));
        let layers = (0..config.layers)
            .map(|i| {
                let name = format!("qformer.layer{i}");
                QFormerLayer {
                    ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
                    self_attn: Attention::new(store, &format!("{name}.self_attn"), d, config.heads, rng),
                    ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), d),
                    cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d, config.heads, rng),
                    ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), d),
                    ffn: FeedForward::new(store, &format!("{name}.ffn"), d, config.d_ff, rng),
                }
            })
            .collect();
        let proj = Linear::new(store, "qformer.proj", d, config.d_lm, true, rng);
        Ok(Self {
            config,
            queries,
            layers,
            proj,
        })
    }

    /// Pools `N × d_model` image tokens into `queries × d_lm` soft tokens.
    pub fn align(&self, tape: &mut Tape, store: &ParamStore, image_tokens: Var) -> Result<Var> {
        let (n, d) = tape.value(image_tokens).dims2()?;
        contract!(n > 0, "aligner received no image tokens");
        contract!(
            d == self.config.d_model,
            "image tokens have width {d}, aligner expects {}",
            self.config.d_model
        );
        let mut x = tape.param(store, self.queries);
        for layer in &self.layers {
            let h = layer.ln_self.forward(tape, store, x)?;
            let a = layer.self_attn.forward(tape, store, h, h, false)?;
            x = tape.add(x, a)?;
            let h = layer.ln_cross.forward(tape, store, x)?;
            let c = layer.cross_attn.forward(tape, store, h, image_tokens, false)?;
            x = tape.add(x, c)?;
            let h = layer.ln_ffn.forward(tape, store, x)?;
            let f = layer.ffn.forward(tape, store, h)?;
            x = tape.add(x, f)?;
        }
        self.proj.forward(tape, store, x)
    }

    pub fn align_tensor(&self, store: &ParamStore, image_tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(image_tokens.clone());
        let y = self.align(&mut tape, store, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn cross_weights(&self, store: &ParamStore, layer: usize) -> MsaWeights {
        let a = &self.layers[layer].cross_attn;
        MsaWeights {
            wq: store.value(a.wq.w).clone(),
            wk: store.value(a.wk.w).clone(),
            wv: store.value(a.wv.w).clone(),
            wz: store.value(a.wo.w).clone(),
            heads: a.heads,
        }
    }
}
