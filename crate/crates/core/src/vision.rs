//! Patch-transformer image encoder.
//!
//! An `H×W×C` image is cut into `P×P` patches, each flattened to a vector of
//! length `L = P²C`, linearly projected, offset by a learnable positional
//! table and passed through a stack of self-attention/feed-forward layers.
//! No class token is used: every patch token flows on to the aligner.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nn::{Block, BlockMode};
use crate::param::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub mode: BlockMode,
}

impl Default for VisionConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            patch: 8,
            d_model: 32,
            heads: 4,
            layers: 2,
            d_ff: 64,
            mode: BlockMode::Residual,
        }
    }
}

impl VisionConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(
            [
                self.height,
                self.width,
                self.channels,
                self.patch,
                self.d_model,
                self.heads,
                self.d_ff
            ]
            .iter()
            .all(|&v| v > 0),
            "vision config extents must be positive: {self:?}"
        );
        contract!(
            self.height % self.patch == 0 && self.width % self.patch == 0,
            "patch side {} must divide {}×{}",
            self.patch,
            self.height,
            self.width
        );
        contract!(
            self.d_model % self.heads == 0,
            "{} heads must divide d_model {}",
            self.heads,
            self.d_model
        );
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// `N` flattened patches of length `L = P²C`, stored as an `N × L` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub tokens: Tensor,
    pub patch: usize,
    pub channels: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
}

impl PatchSequence {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_len(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Splits an image into patches, row-major over the patch grid. Inside a
/// patch, pixels are taken row-major with the channels of each pixel kept
/// together.
pub fn patchify(image: &Tensor, patch: usize) -> Result<PatchSequence> {
    let (h, w, c) = image.dims3()?;
    contract!(
        patch > 0 && h % patch == 0 && w % patch == 0,
        "patch side {patch} must divide image extents {h}×{w}"
    );
    let (gr, gc) = (h / patch, w / patch);
    let len = patch * patch * c;
    let mut data = Vec::with_capacity(h * w * c);
    for pr in 0..gr {
        for pc in 0..gc {
            for y in 0..patch {
                let row = pr * patch + y;
                let start = (row * w + pc * patch) * c;
                data.extend_from_slice(&image.data()[start..start + patch * c]);
            }
        }
    }
    Ok(PatchSequence {
        tokens: Tensor::new(vec![gr * gc, len], data)?,
        patch,
        channels: c,
        grid_rows: gr,
        grid_cols: gc,
    })
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(seq: &PatchSequence) -> Result<Tensor> {
    let (p, c) = (seq.patch, seq.channels);
    let (h, w) = (seq.grid_rows * p, seq.grid_cols * p);
    let mut out = vec![0.0; h * w * c];
    for (idx, token) in seq.tokens.data().chunks(p * p * c).enumerate() {
        let (pr, pc) = (idx / seq.grid_cols, idx % seq.grid_cols);
        for y in 0..p {
            let row = pr * p + y;
            let dst = (row * w + pc * p) * c;
            out[dst..dst + p * c].copy_from_slice(&token[y * p * c..(y + 1) * p * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// `Z[i] = t_i·E + E_pos[i]`
pub fn embed_patches(seq: &PatchSequence, e: &Tensor, e_pos: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let t = tape.leaf(seq.tokens.clone());
    let e = tape.leaf(e.clone());
    let pos = tape.leaf(e_pos.clone());
    let z = embed_on_tape(&mut tape, t, e, pos)?;
    Ok(tape.value(z).clone())
}

fn embed_on_tape(tape: &mut Tape, tokens: Var, e: Var, e_pos: Var) -> Result<Var> {
    let proj = tape.matmul(tokens, e)?;
    tape.add(proj, e_pos)
}

/// Plain-tensor weights of one self-attention sublayer.
#[derive(Clone, Debug)]
pub struct MsaWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wz: Tensor,
    pub heads: usize,
}

/// Multi-head self-attention: per head `softmax(Q_iK_iᵀ/√d_k)V_i`, heads
/// concatenated along features, then projected by `W_z`.
pub fn msa_block(z: &Tensor, w: &MsaWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(z.clone());
    let [wq, wk, wv, wz] = [&w.wq, &w.wk, &w.wv, &w.wz].map(|t| tape.leaf(t.clone()));
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let heads = tape.attention(
        q,
        k,
        v,
        crate::tape::AttnSpec {
            heads: w.heads,
            causal: false,
        },
    )?;
    let out = tape.matmul(heads, wz)?;
    Ok(tape.value(out).clone())
}

/// `ReLU(Z'·W1 + b1)·W2 + b2`
pub fn ffn_block(z: &Tensor, w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(z.clone());
    let [w1, b1, w2, b2] = [w1, b1, w2, b2].map(|t| tape.leaf(t.clone()));
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w2)?;
    let o = tape.add_row(o, b2)?;
    Ok(tape.value(o).clone())
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub config: VisionConfig,
    pub e: ParamId,
    pub e_pos: ParamId,
    pub layers: Vec<Block>,
}

impl VisionEncoder {
    pub fn new(store: &mut ParamStore, config: VisionConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let (n, l, d) = (config.num_patches(), config.patch_len(), config.d_model);
        let e = store.add("vision.e", rng.gaussian_tensor(&[l, d], 1.0 / (l as f64).sqrt()));
        let e_pos = store.add("vision.e_pos", rng.gaussian_tensor(&[n, d], 0.02));
        let layers = (0..config.layers)
            .map(|i| Block::new(store, &format!("vision.layer{i}"), d, config.heads, config.d_ff, rng))
            .collect();
        Ok(Self {
            config,
            e,
            e_pos,
            layers,
        })
    }

    /// Encodes an `H×W×C` image into `N × d_model` tokens on `tape`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor) -> Result<Var> {
        let (h, w, c) = image.dims3()?;
        contract!(
            (h, w, c) == (self.config.height, self.config.width, self.config.channels),
            "image {h}×{w}×{c} does not match encoder config {}×{}×{}",
            self.config.height,
            self.config.width,
            self.config.channels
        );
        let seq = patchify(image, self.config.patch)?;
        let tokens = tape.leaf(seq.tokens);
        let e = tape.param(store, self.e);
        let e_pos = tape.param(store, self.e_pos);
        let mut z = embed_on_tape(tape, tokens, e, e_pos)?;
        for layer in &self.layers {
            z = layer.forward(tape, store, z, self.config.mode, false)?;
        }
        Ok(z)
    }

    /// Tape-free convenience wrapper around [`VisionEncoder::encode`].
    pub fn encode_tensor(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = self.encode(&mut tape, store, image)?;
        Ok(tape.value(z).clone())
    }

    pub fn msa_weights(&self, store: &ParamStore, layer: usize) -> MsaWeights {
        let a = &self.layers[layer].attn;
        MsaWeights {
            wq: store.value(a.wq.w).clone(),
            wk: store.value(a.wk.w).clone(),
            wv: store.value(a.wv.w).clone(),
            wz: store.value(a.wo.w).clone(),
            heads: a.heads,
        }
    }
}
