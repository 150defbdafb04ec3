//! Low-rank adapters on frozen projection matrices.
//!
//! An adapter adds `x·A·B` to `x·W0`, with `A` (`i×r`) initialized to zero and
//! `B` (`r×o`) drawn from a standard Gaussian, so a fresh adapter leaves the
//! host layer's output unchanged.

use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::error::{contract, Result};
use crate::nn::LoraSlot;
use crate::param::ParamStore;
use crate::rng::RngStream;
use crate::tensor::{add, matmul, Tensor};

pub const DEFAULT_RANK: usize = 10;
/// Layer ids of the reference placement; see [`map_layers`] for smaller decoders.
pub const DEFAULT_LAYERS: [usize; 2] = [0, 14];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    Wq,
    Wk,
    Wv,
    Wo,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Projection::Wq, Projection::Wk, Projection::Wv, Projection::Wo];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Wq => "wq",
            Projection::Wk => "wk",
            Projection::Wv => "wv",
            Projection::Wo => "wo",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LoraTarget {
    pub layer: usize,
    pub matrix: Projection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: LoraTarget,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
}

impl LoraAdapter {
    pub fn d_in(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[1]
    }

    /// `r·(i + o)`
    pub fn param_count(&self) -> usize {
        self.rank * (self.d_in() + self.d_out())
    }

    /// The dense update `ΔW = A·B`.
    pub fn delta(&self) -> Result<Tensor> {
        matmul(&self.a, &self.b)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Requested layer ids, mapped onto the decoder with [`map_layers`].
    pub layers: Vec<usize>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_RANK,
            layers: DEFAULT_LAYERS.to_vec(),
        }
    }
}

fn check_rank(i: usize, o: usize, r: usize) -> Result<()> {
    contract!(r > 0, "adapter rank must be positive");
    contract!(r <= i.min(o), "adapter rank {r} exceeds min({i}, {o})");
    Ok(())
}

pub fn init_adapter(
    target: LoraTarget,
    d_in: usize,
    d_out: usize,
    rank: usize,
    rng: &mut RngStream,
) -> Result<LoraAdapter> {
    check_rank(d_in, d_out, rank)?;
    Ok(LoraAdapter {
        target,
        a: Tensor::zeros(&[d_in, rank]),
        b: rng.gaussian_tensor(&[rank, d_out], 1.0),
        rank,
    })
}

fn check_shapes(w0: &Tensor, adapter: &LoraAdapter) -> Result<()> {
    let (i, o) = w0.dims2()?;
    contract!(
        adapter.a.shape() == [i, adapter.rank] && adapter.b.shape() == [adapter.rank, o],
        "adapter shapes {:?}·{:?} do not fit W0 {i}×{o}",
        adapter.a.shape(),
        adapter.b.shape()
    );
    Ok(())
}

/// `x·W0 + (x·A)·B`, never forming `A·B`.
pub fn adapted_forward(x: &Tensor, w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    check_shapes(w0, adapter)?;
    let base = matmul(x, w0)?;
    let low = matmul(&matmul(x, &adapter.a)?, &adapter.b)?;
    add(&base, &low)
}

/// `W0 + A·B`
pub fn merge(w0: &Tensor, adapter: &LoraAdapter) -> Result<Tensor> {
    check_shapes(w0, adapter)?;
    add(w0, &adapter.delta()?)
}

/// Maps requested layer ids onto a decoder of `n_layers` layers.
///
/// Ids that all fit are kept. Otherwise every id is scaled proportionally,
/// `id ↦ round(id·(n_layers − 1)/max_id)`, so the smallest requested id
/// lands on the first layer and the largest on the last.
pub fn map_layers(ids: &[usize], n_layers: usize) -> Result<Vec<usize>> {
    contract!(n_layers > 0, "cannot place adapters on a decoder without layers");
    contract!(!ids.is_empty(), "no adapter layers requested");
    let max_id = *ids.iter().max().expect("non-empty");
    let mut out: Vec<usize> = if max_id < n_layers {
        ids.to_vec()
    } else {
        ids.iter()
            .map(|&id| ((id * (n_layers - 1)) as f64 / max_id as f64).round() as usize)
            .collect()
    };
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Adapters attached to a decoder, one per projection of each listed layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub layers: Vec<usize>,
    pub rank: usize,
    pub slots: Vec<(LoraTarget, LoraSlot)>,
}

impl AdapterSet {
    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.slots
            .iter()
            .map(|(_, s)| store.value(s.a).numel() + store.value(s.b).numel())
            .sum()
    }

    /// Current adapter values.
    pub fn adapters(&self, store: &ParamStore) -> Vec<LoraAdapter> {
        self.slots
            .iter()
            .map(|(t, s)| LoraAdapter {
                target: *t,
                a: store.value(s.a).clone(),
                b: store.value(s.b).clone(),
                rank: s.rank,
            })
            .collect()
    }

    /// Overwrites adapter values, e.g. from a checkpoint.
    pub fn load(&self, store: &mut ParamStore, adapters: &[LoraAdapter]) -> Result<()> {
        contract!(
            adapters.len() == self.slots.len(),
            "expected {} adapters, got {}",
            self.slots.len(),
            adapters.len()
        );
        for ((t, s), ad) in self.slots.iter().zip(adapters) {
            contract!(*t == ad.target, "adapter target {:?} does not match {:?}", ad.target, t);
            store.set_value(s.a, ad.a.clone())?;
            store.set_value(s.b, ad.b.clone())?;
        }
        Ok(())
    }
}

fn linear_mut(decoder: &mut Decoder, t: LoraTarget) -> &mut crate::nn::Linear {
    let attn = &mut decoder.layers[t.layer].attn;
    match t.matrix {
        Projection::Wq => &mut attn.wq,
        Projection::Wk => &mut attn.wk,
        Projection::Wv => &mut attn.wv,
        Projection::Wo => &mut attn.wo,
    }
}

/// Attaches fresh adapters to the attention projections of `layers` and
/// freezes every other decoder parameter.
pub fn attach_policy(
    decoder: &mut Decoder,
    store: &mut ParamStore,
    layers: &[usize],
    rank: usize,
    rng: &mut RngStream,
) -> Result<AdapterSet> {
    let n = decoder.layers.len();
    for &l in layers {
        contract!(l < n, "adapter layer {l} out of range for a {n}-layer decoder");
    }
    let mut layers = layers.to_vec();
    layers.sort_unstable();
    layers.dedup();
    store.set_trainable_prefix("decoder.", false);
    let mut slots = Vec::new();
    for &layer in &layers {
        for matrix in Projection::ALL {
            let target = LoraTarget { layer, matrix };
            let lin = linear_mut(decoder, target);
            contract!(
                lin.lora.is_none(),
                "layer {layer} {} already has an adapter",
                matrix.name()
            );
            let ad = init_adapter(target, lin.d_in, lin.d_out, rank, rng)?;
            let prefix = format!("decoder.layer{layer}.attn.{}", matrix.name());
            let a = store.add(format!("{prefix}.lora_a"), ad.a);
            let b = store.add(format!("{prefix}.lora_b"), ad.b);
            let slot = LoraSlot { a, b, rank };
            lin.lora = Some(slot);
            slots.push((target, slot));
        }
    }
    Ok(AdapterSet { layers, rank, slots })
}

/// Removes the adapters from the decoder's forward pass (their parameters
/// stay in the store).
pub fn detach(decoder: &mut Decoder, set: &AdapterSet) {
    for (t, _) in &set.slots {
        linear_mut(decoder, *t).lora = None;
    }
}

/// Re-enables adapters previously removed with [`detach`].
pub fn reattach(decoder: &mut Decoder, set: &AdapterSet) {
    for (t, s) in &set.slots {
        linear_mut(decoder, *t).lora = Some(*s);
    }
}

/// Folds every adapter into its base matrix and detaches it.
pub fn merge_into_base(decoder: &mut Decoder, store: &mut ParamStore, set: &AdapterSet) -> Result<()> {
    for ad in set.adapters(store) {
        let w = linear_mut(decoder, ad.target).w;
        let merged = merge(store.value(w), &ad)?;
        store.set_value(w, merged)?;
    }
    detach(decoder, set);
    Ok(())
}
