//! The assembled pipeline: image encoder, segmenter, aligner and decoder over
//! one parameter store, plus the vocabulary and any attached adapters.

use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, Vocabulary};
use crate::error::{contract, Result};
use crate::lora::{attach_policy, map_layers, AdapterSet, LoraConfig};
use crate::param::ParamStore;
use crate::qformer::{QFormer, QFormerConfig};
use crate::rng::RngStream;
use crate::segmenter::{normalize_image, render_vr, SegmentationMap, Segmenter, SegmenterConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vision::{VisionConfig, VisionEncoder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub segmenter: SegmenterConfig,
    pub qformer: QFormerConfig,
    /// `vocab_size` is filled in from the vocabulary when the model is built.
    pub decoder: DecoderConfig,
    pub lora: LoraConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: VisionConfig::default(),
            segmenter: SegmenterConfig::default(),
            qformer: QFormerConfig::default(),
            decoder: DecoderConfig::default(),
            lora: LoraConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.qformer.validate()?;
        contract!(
            self.qformer.d_model == self.vision.d_model,
            "aligner width {} differs from encoder width {}",
            self.qformer.d_model,
            self.vision.d_model
        );
        contract!(
            self.qformer.d_lm == self.decoder.d_lm,
            "aligner output width {} differs from decoder width {}",
            self.qformer.d_lm,
            self.decoder.d_lm
        );
        contract!(
            self.segmenter.in_channels == self.vision.channels,
            "segmenter takes {} channels, encoder {}",
            self.segmenter.in_channels,
            self.vision.channels
        );
        contract!(
            2 * self.qformer.queries < self.decoder.max_len,
            "{} visual tokens leave no room in a {}-position context",
            2 * self.qformer.queries,
            self.decoder.max_len
        );
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub vision: VisionEncoder,
    pub segmenter: Segmenter,
    pub qformer: QFormer,
    pub decoder: Decoder,
    pub vocab: Vocabulary,
    pub adapters: Option<AdapterSet>,
}

impl Model {
    /// Builds a freshly initialized model. Each component draws from its own
    /// stream derived from `config.seed`.
    pub fn new(mut config: ModelConfig, vocab: Vocabulary) -> Result<Self> {
        config.decoder.vocab_size = vocab.len();
        config.validate()?;
        let seed = config.seed;
        let mut store = ParamStore::new();
        let vision = VisionEncoder::new(
            &mut store,
            config.vision.clone(),
            &mut RngStream::derive(seed, "vision"),
        )?;
        let segmenter = Segmenter::new(
            &mut store,
            config.segmenter.clone(),
            &mut RngStream::derive(seed, "segmenter"),
        )?;
        let qformer = QFormer::new(
            &mut store,
            config.qformer.clone(),
            &mut RngStream::derive(seed, "qformer"),
        )?;
        let decoder = Decoder::new(
            &mut store,
            config.decoder.clone(),
            &mut RngStream::derive(seed, "decoder"),
        )?;
        Ok(Self {
            config,
            store,
            vision,
            segmenter,
            qformer,
            decoder,
            vocab,
            adapters: None,
        })
    }

    /// Visual tokens per aligned image.
    pub fn queries(&self) -> usize {
        self.config.qformer.queries
    }

    /// Checks extents and maps 8-bit pixels onto `[0, 1]`.
    pub fn prepare_image(&self, image: &Tensor) -> Result<Tensor> {
        let (h, w, c) = image.dims3()?;
        let v = &self.config.vision;
        contract!(
            (h, w, c) == (v.height, v.width, v.channels),
            "image is {h}×{w}×{c}, model expects {}×{}×{}",
            v.height,
            v.width,
            v.channels
        );
        normalize_image(image)
    }

    pub fn segment(&self, image: &Tensor) -> Result<SegmentationMap> {
        self.segmenter.segment(&self.store, image)
    }

    /// The segmentation map rendered as a normalized encoder input.
    pub fn vr_image(&self, map: &SegmentationMap) -> Result<Tensor> {
        normalize_image(&render_vr(map, self.config.vision.channels))
    }

    /// `queries × d_lm` soft tokens for a normalized image.
    pub fn visual_tokens(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        let z = self.vision.encode(tape, &self.store, image)?;
        self.qformer.align(tape, &self.store, z)
    }

    pub fn visual_tensor(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.visual_tokens(&mut tape, image)?;
        Ok(tape.value(v).clone())
    }

    /// Attaches adapters at the configured layers (mapped onto this decoder's
    /// depth) and freezes the rest of the decoder. A no-op when adapters are
    /// already attached.
    pub fn attach_lora(&mut self) -> Result<&AdapterSet> {
        if self.adapters.is_none() {
            let layers = map_layers(&self.config.lora.layers, self.decoder.layers.len())?;
            let mut rng = RngStream::derive(self.config.seed, "lora");
            let set = attach_policy(
                &mut self.decoder,
                &mut self.store,
                &layers,
                self.config.lora.rank,
                &mut rng,
            )?;
            self.adapters = Some(set);
        }
        Ok(self.adapters.as_ref().expect("set above"))
    }
}
