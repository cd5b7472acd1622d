use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{check_image, normalize_image, Conv, Dense, ModelConfig, PoseBins, PoseLogits};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

pub const DISCRIMINATOR_TAG: u32 = 2;

/// Realness score and pose head outputs for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscOutput {
    pub realness: f64,
    pub pose: Option<PoseLogits>,
}

/// Graph handles of a discriminator pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscVars {
    /// `[B, 1]`.
    pub realness: Var,
    /// `[B, 4 + 7B]` when the pose head is enabled.
    pub pose: Option<Var>,
    /// Feature map after the first downsampling, for feature matching.
    pub mid: Var,
}

/// Convolutional discriminator with a binned camera-pose head. The realness
/// score can be conditioned on the image's anchor through a projection term
/// `<embed(anchor), h>`, so generated views of anchor k are compared with
/// real images labeled k.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub pose_head: bool,
    stem: Conv,
    down: Vec<Conv>,
    hidden: Dense,
    out: Dense,
    embed: ParamId,
}

impl Discriminator {
    pub fn new(config: &ModelConfig, pose_head: bool, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(DISCRIMINATOR_TAG);
        let c0 = config.disc_width;
        let stem = Conv::new(&mut store, "stem", 3, c0, 3, 1, rng);
        let mut down = Vec::new();
        let (mut size, mut c) = (config.image_size, c0);
        while size > 4 {
            let next = (2 * c).min(8 * c0);
            down.push(Conv::new(
                &mut store,
                &format!("down{}", down.len()),
                c,
                next,
                3,
                2,
                rng,
            ));
            c = next;
            size /= 2;
        }
        let hidden = Dense::new(&mut store, "hidden", c * 16, 4 * c0, 1.0, rng);
        let outputs = 1 + if pose_head {
            config.pose_bins().logit_count()
        } else {
            0
        };
        let out = Dense::new(&mut store, "out", 4 * c0, outputs, 0.5, rng);
        let embed = store.add("embed", &[4, 4 * c0], Init::Zeros, rng);
        Ok(Discriminator {
            config: config.clone(),
            store,
            pose_head,
            stem,
            down,
            hidden,
            out,
            embed,
        })
    }

    pub fn pose_bins(&self) -> PoseBins {
        self.config.pose_bins()
    }

    /// `images` is `[B, 3, W, W]` in `[0, 1]`; unconditioned realness.
    pub fn forward(&self, g: &mut Graph, trainable: bool, images: Var) -> Result<DiscVars> {
        self.forward_anchored(g, trainable, images, None)
    }

    /// As [`forward`](Self::forward), adding the anchor projection term when
    /// `anchors` (one per image) is given.
    pub fn forward_anchored(
        &self,
        g: &mut Graph,
        trainable: bool,
        images: Var,
        anchors: Option<&[usize]>,
    ) -> Result<DiscVars> {
        check_image(g.value(images), self.config.image_size)?;
        let b = g.shape(images)[0];
        if let Some(a) = anchors {
            if a.len() != b || a.iter().any(|&k| k > 3) {
                return Err(Error::invalid(format!(
                    "need {b} anchors in 0..4, got {a:?}"
                )));
            }
        }
        let x = normalize_image(g, images);
        let mut h = self.stem.forward_act(g, &self.store, trainable, x);
        let mut mid = h;
        for (i, conv) in self.down.iter().enumerate() {
            h = conv.forward_act(g, &self.store, trainable, h);
            if i == 0 {
                mid = h;
            }
        }
        let n = g.value(h).numel() / b;
        let h = g.reshape(h, &[b, n]);
        let h = self.hidden.forward(g, &self.store, trainable, h);
        let h = g.leaky_relu(h, super::LEAK);
        let out = self.out.forward(g, &self.store, trainable, h);
        let mut realness = g.slice_channels(out, 0, 1);
        if let Some(a) = anchors {
            let mut onehot = vec![0.0; b * 4];
            for (i, &k) in a.iter().enumerate() {
                onehot[i * 4 + k] = 1.0;
            }
            let onehot = g.constant(Tensor::new(vec![b, 4], onehot));
            let e = g.param(&self.store, self.embed, trainable);
            let e = g.matmul(onehot, e);
            let p = g.mul(e, h);
            let width = g.shape(h)[1];
            let ones = g.constant(Tensor::new(vec![width, 1], vec![1.0; width]));
            let proj = g.matmul(p, ones);
            realness = g.add(realness, proj);
        }
        let pose = self.pose_head.then(|| {
            let k = self.pose_bins().logit_count();
            g.slice_channels(out, 1, k)
        });
        Ok(DiscVars {
            realness,
            pose,
            mid,
        })
    }

    pub fn discriminate(&self, images: &Tensor) -> Result<Vec<DiscOutput>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let v = self.forward(&mut g, false, x)?;
        let scores = g.value(v.realness).data.clone();
        let k = self.pose_bins().logit_count();
        Ok(scores
            .iter()
            .enumerate()
            .map(|(i, &realness)| DiscOutput {
                realness,
                pose: v.pose.map(|p| PoseLogits {
                    values: g.value(p).data[i * k..(i + 1) * k].to_vec(),
                }),
            })
            .collect())
    }
}
