use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_image, normalize_image, Conv, Dense, ModelConfig, PoseBins, PoseLogits};
use crate::error::{Error, Result};
use crate::lpa::LpaPose;
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor, Var};

pub const PREDICTOR_TAG: u32 = 3;
pub const BACKBONE_TAG: u32 = 4;
pub const CLASSIFIER_TAG: u32 = 5;
pub const SEG_HEAD_TAG: u32 = 6;

/// Feature maps at full, half and quarter resolution.
#[derive(Debug, Clone, Copy)]
pub struct BackboneFeatures {
    pub scales: [Var; 3],
}

/// Small multi-scale convolutional feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub store: ParamStore,
    pub width: usize,
    pub image_size: usize,
    s1a: Conv,
    s1b: Conv,
    s2: Conv,
    s3: Conv,
}

impl Backbone {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new(BACKBONE_TAG);
        let c = config.backbone_width;
        Backbone {
            s1a: Conv::new(&mut store, "s1a", 3, c, 3, 1, rng),
            s1b: Conv::new(&mut store, "s1b", c, c, 3, 1, rng),
            s2: Conv::new(&mut store, "s2", c, 2 * c, 3, 2, rng),
            s3: Conv::new(&mut store, "s3", 2 * c, 4 * c, 3, 2, rng),
            store,
            width: c,
            image_size: config.image_size,
        }
    }

    pub fn channels(&self) -> [usize; 3] {
        [self.width, 2 * self.width, 4 * self.width]
    }

    pub fn forward(&self, g: &mut Graph, trainable: bool, images: Var) -> Result<BackboneFeatures> {
        check_image(g.value(images), self.image_size)?;
        let x = normalize_image(g, images);
        let h = self.s1a.forward_act(g, &self.store, trainable, x);
        let f1 = self.s1b.forward_act(g, &self.store, trainable, h);
        let f2 = self.s2.forward_act(g, &self.store, trainable, f1);
        let f3 = self.s3.forward_act(g, &self.store, trainable, f2);
        Ok(BackboneFeatures {
            scales: [f1, f2, f3],
        })
    }

    /// Globally pooled features of every scale, concatenated: `[B, 7c]`.
    pub fn pooled_features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let f = self.forward(&mut g, false, x)?;
        let pooled: Vec<Var> = f.scales.iter().map(|&s| g.mean_spatial(s)).collect();
        let b = images.shape[0];
        let widths = self.channels();
        Ok((0..b)
            .map(|i| {
                pooled
                    .iter()
                    .zip(widths)
                    .flat_map(|(&p, c)| g.value(p).data[i * c..(i + 1) * c].to_vec())
                    .collect()
            })
            .collect())
    }
}

/// Minibatch schedule shared by the supervised trainers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 10,
            batch_size: 16,
            lr: 2e-3,
        }
    }
}

fn shuffled_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

fn stack(images: &[Tensor], idx: &[usize]) -> Tensor {
    let refs: Vec<&Tensor> = idx.iter().map(|&i| &images[i]).collect();
    Tensor::stack(&refs)
}

/// Foreground/background segmenter: backbone plus per-scale 1x1 heads
/// summed at full resolution. Output 1 marks foreground (objects).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmenter {
    pub backbone: Backbone,
    pub head_store: ParamStore,
    heads: [Conv; 3],
}

impl Segmenter {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config, rng);
        let mut head_store = ParamStore::new(SEG_HEAD_TAG);
        let [a, b, c] = backbone.channels();
        let heads = [
            Conv::new(&mut head_store, "head1", a, 1, 1, 1, rng),
            Conv::new(&mut head_store, "head2", b, 1, 1, 1, rng),
            Conv::new(&mut head_store, "head3", c, 1, 1, 1, rng),
        ];
        Ok(Segmenter {
            backbone,
            head_store,
            heads,
        })
    }

    /// Per-pixel foreground logits `[B, 1, W, W]`.
    pub fn forward(&self, g: &mut Graph, trainable: bool, images: Var) -> Result<Var> {
        let f = self.backbone.forward(g, trainable, images)?;
        let l1 = self.heads[0].forward(g, &self.head_store, trainable, f.scales[0]);
        let l2 = self.heads[1].forward(g, &self.head_store, trainable, f.scales[1]);
        let l2 = g.upsample2x(l2);
        let l3 = self.heads[2].forward(g, &self.head_store, trainable, f.scales[2]);
        let l3 = g.upsample2x(l3);
        let l3 = g.upsample2x(l3);
        Ok(g.add_all(&[l1, l2, l3]))
    }

    /// Trains on `(image [3, W, W], mask with 1 = foreground)` pairs;
    /// returns the mean loss per epoch.
    pub fn train(
        &mut self,
        images: &[Tensor],
        masks: &[Vec<f64>],
        fit: &FitConfig,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if images.len() != masks.len() || images.is_empty() {
            return Err(Error::invalid(
                "segmenter needs matching, non-empty images and masks",
            ));
        }
        let mut opt_b = Adam::new(AdamConfig::new(fit.lr, 0.9, 0.999), &self.backbone.store);
        let mut opt_h = Adam::new(AdamConfig::new(fit.lr, 0.9, 0.999), &self.head_store);
        let mut history = Vec::with_capacity(fit.epochs);
        for _ in 0..fit.epochs {
            let (mut total, mut count) = (0.0, 0);
            for batch in shuffled_batches(images.len(), fit.batch_size, rng) {
                let mut g = Graph::new();
                let x = g.constant(stack(images, &batch));
                let logits = self.forward(&mut g, true, x)?;
                let targets: Vec<f64> = batch
                    .iter()
                    .flat_map(|&i| masks[i].iter().cloned())
                    .collect();
                let l = g.bce_with_logits(logits, &targets);
                let loss = g.mean(l);
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite("segmenter loss".into()));
                }
                let grads = g.backward(loss);
                let (gb, gh) = (
                    grads.for_store(&self.backbone.store),
                    grads.for_store(&self.head_store),
                );
                opt_b.update(&mut self.backbone.store, &gb);
                opt_h.update(&mut self.head_store, &gh);
                total += value * batch.len() as f64;
                count += batch.len();
            }
            history.push(total / count as f64);
        }
        Ok(history)
    }

    /// Binary masks (1 = foreground), one per image, row-major.
    pub fn segment(&self, images: &Tensor) -> Result<Vec<Vec<u8>>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let logits = self.forward(&mut g, false, x)?;
        let w = self.backbone.image_size;
        Ok(g.value(logits)
            .data
            .chunks(w * w)
            .map(|c| c.iter().map(|&v| u8::from(v > 0.0)).collect())
            .collect())
    }

    /// Fraction of pixels whose predicted label matches the mask.
    pub fn pixel_accuracy(&self, images: &[Tensor], masks: &[Vec<f64>]) -> Result<f64> {
        let (mut hit, mut total) = (0usize, 0usize);
        for chunk in (0..images.len()).collect::<Vec<_>>().chunks(32) {
            let pred = self.segment(&stack(images, chunk))?;
            for (p, &i) in pred.iter().zip(chunk) {
                for (&a, &b) in p.iter().zip(&masks[i]) {
                    hit += usize::from((a == 1) == (b > 0.5));
                    total += 1;
                }
            }
        }
        Ok(hit as f64 / total.max(1) as f64)
    }
}

/// Camera predictor: multi-scale backbone features aligned to the coarsest
/// scale by strided convolutions, summed, then a linear pose head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraPredictor {
    pub backbone: Backbone,
    /// When set the backbone is trained along with the head.
    pub scratch: bool,
    pub store: ParamStore,
    pub bins: PoseBins,
    align1: [Conv; 2],
    align2: Conv,
    align3: Conv,
    post: Conv,
    head: Dense,
}

impl CameraPredictor {
    /// Uses `backbone` (frozen) or, when `scratch`, a fresh trainable one.
    pub fn new(
        config: &ModelConfig,
        backbone: Option<&Backbone>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let scratch = backbone.is_none();
        let backbone = match backbone {
            Some(b) => b.clone(),
            None => Backbone::new(config, rng),
        };
        let mut store = ParamStore::new(PREDICTOR_TAG);
        let [a, b, c] = backbone.channels();
        let w = 2 * config.backbone_width;
        let bins = config.pose_bins();
        let align1 = [
            Conv::new(&mut store, "align1a", a, w, 3, 2, rng),
            Conv::new(&mut store, "align1b", w, w, 3, 2, rng),
        ];
        let align2 = Conv::new(&mut store, "align2", b, w, 3, 2, rng);
        let align3 = Conv::new(&mut store, "align3", c, w, 3, 1, rng);
        let post = Conv::new(&mut store, "post", w, w, 3, 2, rng);
        let cells = (config.image_size / 8) * (config.image_size / 8);
        let head = Dense::new(&mut store, "head", w * cells, bins.logit_count(), 0.5, rng);
        Ok(CameraPredictor {
            backbone,
            scratch,
            store,
            bins,
            align1,
            align2,
            align3,
            post,
            head,
        })
    }

    /// Pose logits `[B, 4 + 7B]`.
    pub fn forward(&self, g: &mut Graph, trainable: bool, images: Var) -> Result<Var> {
        let b = g.shape(images)[0];
        let f = self
            .backbone
            .forward(g, trainable && self.scratch, images)?;
        let h1 = self.align1[0].forward_act(g, &self.store, trainable, f.scales[0]);
        let h1 = self.align1[1].forward(g, &self.store, trainable, h1);
        let h2 = self.align2.forward(g, &self.store, trainable, f.scales[1]);
        let h3 = self.align3.forward(g, &self.store, trainable, f.scales[2]);
        let h = g.add_all(&[h1, h2, h3]);
        let h = g.leaky_relu(h, super::LEAK);
        let h = self.post.forward_act(g, &self.store, trainable, h);
        let n = g.value(h).numel() / b;
        let h = g.reshape(h, &[b, n]);
        Ok(self.head.forward(g, &self.store, trainable, h))
    }

    pub fn predict_logits(&self, images: &Tensor) -> Result<Vec<PoseLogits>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.forward(&mut g, false, x)?;
        let k = self.bins.logit_count();
        Ok(g.value(out)
            .data
            .chunks(k)
            .map(|c| PoseLogits { values: c.to_vec() })
            .collect())
    }

    pub fn predict_camera(&self, images: &Tensor) -> Result<Vec<LpaPose>> {
        Ok(self
            .predict_logits(images)?
            .iter()
            .map(|l| self.bins.decode(l))
            .collect())
    }

    /// Predicts in chunks to bound memory.
    pub fn predict_many(&self, images: &[Tensor], chunk: usize) -> Result<Vec<LpaPose>> {
        let mut out = Vec::with_capacity(images.len());
        for idx in (0..images.len()).collect::<Vec<_>>().chunks(chunk.max(1)) {
            out.extend(self.predict_camera(&stack(images, idx))?);
        }
        Ok(out)
    }
}

/// Five convolutions and a dense layer over the flattened `W/8 x W/8` map.
/// Keeping the spatial layout matters: the label is the leftmost corner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorClassifier {
    pub store: ParamStore,
    pub image_size: usize,
    convs: Vec<Conv>,
    head: Dense,
}

impl AnchorClassifier {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(CLASSIFIER_TAG);
        let c = config.classifier_width;
        let spec = [
            (3, c, 3, 1),
            (c, c, 3, 2),
            (c, 2 * c, 3, 1),
            (2 * c, 2 * c, 3, 2),
            (2 * c, 4 * c, 3, 2),
        ];
        let convs = spec
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, k, s))| {
                Conv::new(&mut store, &format!("conv{i}"), ci, co, k, s, rng)
            })
            .collect();
        let cells = (config.image_size / 8) * (config.image_size / 8);
        let head = Dense::new(&mut store, "head", 4 * c * cells, 4, 0.5, rng);
        Ok(AnchorClassifier {
            store,
            image_size: config.image_size,
            convs,
            head,
        })
    }

    /// Anchor logits `[B, 4]`.
    pub fn forward(&self, g: &mut Graph, trainable: bool, images: Var) -> Result<Var> {
        check_image(g.value(images), self.image_size)?;
        let b = g.shape(images)[0];
        let mut h = normalize_image(g, images);
        for conv in &self.convs {
            h = conv.forward_act(g, &self.store, trainable, h);
        }
        let n = g.value(h).numel() / b;
        let h = g.reshape(h, &[b, n]);
        Ok(self.head.forward(g, &self.store, trainable, h))
    }

    /// Trains on labeled images; returns the mean loss per epoch. A missing
    /// class only triggers a warning.
    pub fn train(
        &mut self,
        images: &[Tensor],
        labels: &[usize],
        fit: &FitConfig,
        rng: &mut impl Rng,
    ) -> Result<Vec<f64>> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::invalid(
                "classifier needs matching, non-empty images and labels",
            ));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 3) {
            return Err(Error::invalid(format!("anchor label {bad} out of range")));
        }
        for a in 0..4 {
            if !labels.contains(&a) {
                warn!("anchor class {a} has no training labels");
            }
        }
        let mut opt = Adam::new(AdamConfig::new(fit.lr, 0.9, 0.999), &self.store);
        let mut history = Vec::with_capacity(fit.epochs);
        for _ in 0..fit.epochs {
            let (mut total, mut count) = (0.0, 0);
            for batch in shuffled_batches(images.len(), fit.batch_size, rng) {
                let mut g = Graph::new();
                let x = g.constant(stack(images, &batch));
                let logits = self.forward(&mut g, true, x)?;
                let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let ce = g.grouped_cross_entropy(logits, &[(0, 4)], &targets);
                let loss = g.mean(ce);
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFinite("anchor classifier loss".into()));
                }
                let grads = g.backward(loss).for_store(&self.store);
                opt.update(&mut self.store, &grads);
                total += value * batch.len() as f64;
                count += batch.len();
            }
            history.push(total / count as f64);
        }
        Ok(history)
    }

    pub fn classify(&self, images: &Tensor) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let logits = self.forward(&mut g, false, x)?;
        Ok(g.value(logits)
            .data
            .chunks(4)
            .map(|c| {
                let mut best = 0;
                for a in 1..4 {
                    if c[a] > c[best] {
                        best = a;
                    }
                }
                best
            })
            .collect())
    }

    pub fn classify_many(&self, images: &[Tensor]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        for idx in (0..images.len()).collect::<Vec<_>>().chunks(64) {
            out.extend(self.classify(&stack(images, idx))?);
        }
        Ok(out)
    }

    pub fn accuracy(&self, images: &[Tensor], labels: &[usize]) -> Result<f64> {
        let pred = self.classify_many(images)?;
        let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}
