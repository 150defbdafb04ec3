//! Convolutional encoder-decoder producing the damage segmentation map.
//!
//! Two stride-1 convolutions with ReLU, two stride-1 transposed convolutions
//! with ReLU, then a 1×1 projection to a single logit channel squashed by the
//! logistic function. Zero "same" padding keeps the map at the input's
//! resolution. There are no skip connections and no resampling.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::param::{ParamGrads, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::{sigmoid, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
    /// Linear network, used to probe superposition.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterConfig {
    pub in_channels: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Per-channel bias after every convolution.
    pub bias: bool,
    pub activation: Activation,
    pub threshold: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            channels: 32,
            kernel: 3,
            bias: false,
            activation: Activation::Relu,
            threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    pub config: SegmenterConfig,
    pub conv: [ParamId; 2],
    pub tconv: [ParamId; 2],
    pub head: ParamId,
    pub biases: Option<[ParamId; 5]>,
}

/// Per-pixel damage probability with its thresholded binary mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap {
    pub prob: Tensor,
    pub mask: Tensor,
    pub threshold: f64,
}

impl SegmentationMap {
    pub fn from_prob(prob: Tensor, threshold: f64) -> Self {
        let mask = prob.map(|p| if p >= threshold { 1.0 } else { 0.0 });
        Self { prob, mask, threshold }
    }

    pub fn height(&self) -> usize {
        self.prob.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.prob.shape()[1]
    }

    pub fn damage_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m > 0.5).count()
    }
}

/// Maps 8-bit pixel values onto `[0, 1]` by dividing by 255.
pub fn normalize_image(image: &Tensor) -> Result<Tensor> {
    contract!(
        image.data().iter().all(|v| (0.0..=255.0).contains(v)),
        "pixel values must lie in [0, 255]"
    );
    Ok(image.map(|v| v / 255.0))
}

/// Renders a mask as an image: damage white (255), background black (0),
/// replicated over `channels`.
pub fn render_vr(map: &SegmentationMap, channels: usize) -> Tensor {
    let (h, w) = (map.height(), map.width());
    Tensor::from_fn(&[h, w, channels], |i| {
        if map.mask.data()[i / channels] > 0.5 {
            255.0
        } else {
            0.0
        }
    })
}

impl Segmenter {
    pub fn new(store: &mut ParamStore, config: SegmenterConfig, rng: &mut RngStream) -> Result<Self> {
        let (k, c, cin) = (config.kernel, config.channels, config.in_channels);
        contract!(k % 2 == 1 && c > 0 && cin > 0, "invalid segmenter config {config:?}");
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let conv = [
            store.add("segmenter.conv1", rng.gaussian_tensor(&[k, k, cin, c], he(k * k * cin))),
            store.add("segmenter.conv2", rng.gaussian_tensor(&[k, k, c, c], he(k * k * c))),
        ];
        let tconv = [
            store.add("segmenter.tconv1", rng.gaussian_tensor(&[k, k, c, c], he(k * k * c))),
            store.add("segmenter.tconv2", rng.gaussian_tensor(&[k, k, c, c], he(k * k * c))),
        ];
        let head = store.add(
            "segmenter.head",
            rng.gaussian_tensor(&[1, 1, c, 1], 1.0 / (c as f64).sqrt()),
        );
        let biases = config.bias.then(|| {
            [
                store.add("segmenter.conv1.b", Tensor::zeros(&[c])),
                store.add("segmenter.conv2.b", Tensor::zeros(&[c])),
                store.add("segmenter.tconv1.b", Tensor::zeros(&[c])),
                store.add("segmenter.tconv2.b", Tensor::zeros(&[c])),
                store.add("segmenter.head.b", Tensor::zeros(&[1])),
            ]
        });
        Ok(Self {
            config,
            conv,
            tconv,
            head,
            biases,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.conv[0], self.conv[1], self.tconv[0], self.tconv[1], self.head];
        if let Some(b) = self.biases {
            ids.extend(b);
        }
        ids
    }

    fn bias(&self, tape: &mut Tape, store: &ParamStore, x: Var, slot: usize) -> Result<Var> {
        let Some(b) = self.biases else { return Ok(x) };
        let shape = tape.value(x).shape().to_vec();
        let flat = tape.reshape(x, &[shape[0] * shape[1], shape[2]])?;
        let b = tape.param(store, b[slot]);
        let y = tape.add_row(flat, b)?;
        tape.reshape(y, &shape)
    }

    fn act(&self, tape: &mut Tape, x: Var) -> Var {
        match self.config.activation {
            Activation::Relu => tape.relu(x),
            Activation::Identity => x,
        }
    }

    /// Pre-logistic logits, `H × W × 1`, for a normalized image.
    pub fn forward_logits(&self, tape: &mut Tape, store: &ParamStore, image: Var) -> Result<Var> {
        let (_, _, c) = tape.value(image).dims3()?;
        contract!(
            c == self.config.in_channels,
            "segmenter expects {} channels, got {c}",
            self.config.in_channels
        );
        let mut x = image;
        for (slot, &w) in self.conv.iter().enumerate() {
            let w = tape.param(store, w);
            let y = tape.conv2d(x, w)?;
            let y = self.bias(tape, store, y, slot)?;
            x = self.act(tape, y);
        }
        for (slot, &w) in self.tconv.iter().enumerate() {
            let w = tape.param(store, w);
            let y = tape.tconv2d(x, w)?;
            let y = self.bias(tape, store, y, slot + 2)?;
            x = self.act(tape, y);
        }
        let head = tape.param(store, self.head);
        let y = tape.conv2d(x, head)?;
        self.bias(tape, store, y, 4)
    }

    pub fn logits(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(image.clone());
        let z = self.forward_logits(&mut tape, store, x)?;
        Ok(tape.value(z).clone())
    }

    /// Segments a normalized `H×W×C` image.
    pub fn segment(&self, store: &ParamStore, image: &Tensor) -> Result<SegmentationMap> {
        let logits = self.logits(store, image)?;
        let (h, w, _) = logits.dims3()?;
        let prob = logits.map(sigmoid).reshape(&[h, w])?;
        Ok(SegmentationMap::from_prob(prob, self.config.threshold))
    }

    /// Mean per-pixel binary cross-entropy against `mask` on `tape`.
    pub fn bce_loss(&self, tape: &mut Tape, store: &ParamStore, image: &Tensor, mask: &Tensor) -> Result<Var> {
        let x = tape.leaf(image.clone());
        let z = self.forward_logits(tape, store, x)?;
        tape.sigmoid_bce_mean(z, mask)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmenterTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Stop once the full-set mean loss falls below this value.
    pub target_loss: Option<f64>,
    /// Evaluate the full-set loss every this many steps (0 disables).
    pub eval_every: usize,
}

impl Default for SegmenterTrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 4,
            optimizer: OptimizerConfig::Adam {
                lr: 1e-2,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            seed: 0,
            target_loss: None,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SegmenterTrainReport {
    /// Mean batch loss per step.
    pub step_losses: Vec<f64>,
    /// `(step, full-set loss)` checkpoints.
    pub eval_losses: Vec<(usize, f64)>,
}

/// Mean loss of the segmenter over a corpus of normalized images and masks.
pub fn corpus_loss(seg: &Segmenter, store: &ParamStore, corpus: &[(Tensor, Tensor)]) -> Result<f64> {
    let mut total = 0.0;
    for (img, mask) in corpus {
        let mut tape = Tape::new();
        let l = seg.bce_loss(&mut tape, store, img, mask)?;
        total += tape.scalar(l);
    }
    Ok(total / corpus.len() as f64)
}

/// Fits the segmenter's weights (in `store`) to binary masks by minimizing
/// mean per-pixel binary cross-entropy. Only segmenter parameters move.
pub fn train_segmenter(
    seg: &Segmenter,
    store: &mut ParamStore,
    corpus: &[(Tensor, Tensor)],
    config: &SegmenterTrainConfig,
) -> Result<SegmenterTrainReport> {
    contract!(!corpus.is_empty(), "segmenter training needs a non-empty corpus");
    contract!(config.batch_size > 0, "batch size must be positive");
    for (i, (img, mask)) in corpus.iter().enumerate() {
        let (h, w, _) = img.dims3()?;
        contract!(
            mask.shape() == [h, w],
            "mask {i} has shape {:?}, image is {h}×{w}",
            mask.shape()
        );
        contract!(
            mask.data().iter().all(|&m| m == 0.0 || m == 1.0),
            "mask {i} is not binary"
        );
    }
    let ids = seg.param_ids();
    let saved: Vec<bool> = store.iter().map(|(_, p)| p.trainable).collect();
    store.set_all_trainable(false);
    for &id in &ids {
        store.get_mut(id).trainable = true;
    }

    let mut opt = Optimizer::new(config.optimizer.clone())?;
    let mut rng = RngStream::derive(config.seed, "segmenter-train");
    let mut order: Vec<usize> = Vec::new();
    let mut report = SegmenterTrainReport::default();
    let result = (|| -> Result<()> {
        for step in 0..config.steps {
            store.zero_grads();
            let mut total = ParamGrads::with_len(store.len());
            let mut loss = 0.0;
            for _ in 0..config.batch_size {
                if order.is_empty() {
                    order = rng.permutation(corpus.len());
                    order.reverse();
                }
                let idx = order.pop().expect("refilled above");
                let (img, mask) = &corpus[idx];
                let mut tape = Tape::new();
                let l = seg.bce_loss(&mut tape, store, img, mask)?;
                loss += tape.scalar(l);
                let grads = tape.backward(l)?;
                total.add_assign(&tape.param_grads(&grads, store.len()));
            }
            let b = config.batch_size as f64;
            total.scale(1.0 / b);
            loss /= b;
            if !loss.is_finite() {
                return Err(Error::NonFinite { op: "segmenter loss" });
            }
            store.accumulate(&total);
            opt.apply(store);
            report.step_losses.push(loss);
            let last = step + 1 == config.steps;
            if config.eval_every > 0 && ((step + 1) % config.eval_every == 0 || last) {
                let full = corpus_loss(seg, store, corpus)?;
                report.eval_losses.push((step + 1, full));
                if config.target_loss.is_some_and(|t| full < t) {
                    break;
                }
            }
        }
        Ok(())
    })();
    store.zero_grads();
    for (id, flag) in store.ids().zip(saved).collect::<Vec<_>>() {
        store.get_mut(id).trainable = flag;
    }
    result.map(|_| report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_weights(store: &mut ParamStore, seg: &Segmenter) {
        for id in seg.param_ids() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(
            normalize_image(&Tensor::zeros(&[2, 2, 3])).unwrap(),
            Tensor::zeros(&[2, 2, 3])
        );
        assert_eq!(
            normalize_image(&Tensor::full(&[2, 2, 3], 255.0)).unwrap(),
            Tensor::full(&[2, 2, 3], 1.0)
        );
        assert_eq!(normalize_image(&Tensor::scalar(127.5)).unwrap().data(), &[0.5]);
        assert!(normalize_image(&Tensor::scalar(256.0)).is_err());
        assert!(normalize_image(&Tensor::scalar(-1.0)).is_err());
    }

    #[test]
    fn zero_network_gives_half_probability_and_full_mask() {
        let mut store = ParamStore::new();
        let seg = Segmenter::new(&mut store, SegmenterConfig::default(), &mut RngStream::new(0)).unwrap();
        zero_weights(&mut store, &seg);
        let img = Tensor::from_fn(&[6, 5, 3], |i| (i % 7) as f64 / 7.0);
        let map = seg.segment(&store, &img).unwrap();
        assert!(map.prob.data().iter().all(|&p| p == 0.5));
        assert!(map.mask.data().iter().all(|&m| m == 1.0));
        assert_eq!(map.prob.shape(), &[6, 5]);
    }

    #[test]
    fn zero_input_gives_half_probability() {
        let mut store = ParamStore::new();
        let seg = Segmenter::new(&mut store, SegmenterConfig::default(), &mut RngStream::new(3)).unwrap();
        let map = seg.segment(&store, &Tensor::zeros(&[8, 8, 3])).unwrap();
        assert!(map.prob.data().iter().all(|&p| p == 0.5));
        assert_eq!(map.damage_pixels(), 64);
    }

    #[test]
    fn render_examples() {
        let zero = SegmentationMap::from_prob(Tensor::zeros(&[3, 3]), 0.5);
        assert!(render_vr(&zero, 3).data().iter().all(|&v| v == 0.0));
        let one = SegmentationMap::from_prob(Tensor::full(&[3, 3], 1.0), 0.5);
        assert!(render_vr(&one, 3).data().iter().all(|&v| v == 255.0));
        let checker = SegmentationMap::from_prob(Tensor::from_fn(&[4, 4], |i| ((i / 4 + i % 4) % 2) as f64), 0.5);
        let img = render_vr(&checker, 3);
        for y in 0..4 {
            for x in 0..4 {
                let expect = if (x + y) % 2 == 1 { 255.0 } else { 0.0 };
                for c in 0..3 {
                    assert_eq!(img.data()[(y * 4 + x) * 3 + c], expect);
                }
            }
        }
    }

    #[test]
    fn mask_tie_maps_to_damage() {
        let m = SegmentationMap::from_prob(Tensor::new(vec![1, 3], vec![0.49, 0.5, 0.51]).unwrap(), 0.5);
        assert_eq!(m.mask.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn extents_are_preserved() {
        let mut store = ParamStore::new();
        let seg = Segmenter::new(&mut store, SegmenterConfig::default(), &mut RngStream::new(1)).unwrap();
        let img = RngStream::new(2)
            .gaussian_tensor(&[7, 9, 3], 0.3)
            .map(|v| v.abs().min(1.0));
        let map = seg.segment(&store, &img).unwrap();
        assert_eq!(map.prob.shape(), &[7, 9]);
        assert!(map.prob.data().iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(map.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
    }

    #[test]
    fn linear_mode_logits_scale_with_input() {
        let config = SegmenterConfig {
            activation: Activation::Identity,
            ..SegmenterConfig::default()
        };
        let mut store = ParamStore::new();
        let seg = Segmenter::new(&mut store, config, &mut RngStream::new(4)).unwrap();
        let x = RngStream::new(5).gaussian_tensor(&[6, 6, 3], 1.0);
        let a = -2.5;
        let base = seg.logits(&store, &x).unwrap();
        let scaled = seg.logits(&store, &x.map(|v| v * a)).unwrap();
        let expected = base.map(|v| v * a);
        assert!(
            scaled.max_abs_diff(&expected) < 1e-10 * (1.0 + base.data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
        );
    }

    #[test]
    fn empty_corpus_and_bad_masks_are_rejected() {
        let mut store = ParamStore::new();
        let seg = Segmenter::new(&mut store, SegmenterConfig::default(), &mut RngStream::new(0)).unwrap();
        let cfg = SegmenterTrainConfig::default();
        assert!(train_segmenter(&seg, &mut store, &[], &cfg).is_err());
        let bad = vec![(Tensor::zeros(&[4, 4, 3]), Tensor::full(&[4, 4], 0.5))];
        assert!(train_segmenter(&seg, &mut store, &bad, &cfg).is_err());
    }
}
