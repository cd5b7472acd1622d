//! Networks: boundary-aware generator, discriminator with camera head,
//! camera predictor on a frozen segmentation backbone, anchor classifier.

mod backbone;
mod checkpoint;
mod discriminator;
mod generator;
mod pose_head;

pub use backbone::{
    AnchorClassifier, Backbone, BackboneFeatures, CameraPredictor, FitConfig, Segmenter,
    BACKBONE_TAG, CLASSIFIER_TAG, PREDICTOR_TAG, SEG_HEAD_TAG,
};
pub use checkpoint::{
    load_classifier, load_segmenter, model_fingerprint, read_stores, replace_store,
    save_classifier, save_segmenter, write_stores, CHECKPOINT_VERSION,
};
pub use discriminator::{DiscOutput, DiscVars, Discriminator, DISCRIMINATOR_TAG};
pub use generator::{room_geometry_grid, Generator, RoomSizeEncoder, RoomSizeGrid, GENERATOR_TAG};
pub use pose_head::{PoseBins, PoseLogits, COMPONENTS};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpa::RoomBox;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

pub(crate) const LEAK: f64 = 0.2;

/// Network sizes and pose-binning ranges shared by every component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub image_size: usize,
    pub latent_dim: usize,
    /// N; a power of two of at least 4.
    pub plane_resolution: usize,
    /// C.
    pub plane_channels: usize,
    pub decoder_hidden: usize,
    pub decoder_hidden_layers: usize,
    pub gen_width: usize,
    pub disc_width: usize,
    pub backbone_width: usize,
    pub classifier_width: usize,
    pub bins: usize,
    pub max_room: [f64; 3],
    pub render_steps: usize,
    pub pitch_range: (f64, f64),
    pub roll_range: (f64, f64),
    pub fov_range: (f64, f64),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            latent_dim: 128,
            plane_resolution: 64,
            plane_channels: 16,
            decoder_hidden: 64,
            decoder_hidden_layers: 2,
            gen_width: 64,
            disc_width: 32,
            backbone_width: 16,
            classifier_width: 16,
            bins: 32,
            max_room: [6.0, 3.2, 6.0],
            render_steps: 48,
            pitch_range: (-10.0, 40.0),
            roll_range: (-5.0, 5.0),
            fov_range: (40.0, 90.0),
        }
    }
}

impl ModelConfig {
    /// A reduced model that trains in minutes on one CPU core.
    pub fn small() -> Self {
        ModelConfig {
            image_size: 16,
            latent_dim: 32,
            plane_resolution: 16,
            plane_channels: 8,
            decoder_hidden: 32,
            decoder_hidden_layers: 1,
            gen_width: 16,
            disc_width: 16,
            backbone_width: 8,
            classifier_width: 8,
            bins: 16,
            render_steps: 16,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.plane_resolution;
        if n < 4 || !n.is_power_of_two() {
            return Err(Error::invalid(format!(
                "plane_resolution must be a power of two >= 4, got {n}"
            )));
        }
        let w = self.image_size;
        if w < 8 || w % 8 != 0 {
            return Err(Error::invalid(format!(
                "image_size must be a multiple of 8, got {w}"
            )));
        }
        if self.bins < 2 || self.render_steps < 2 {
            return Err(Error::invalid("bins and render_steps must be at least 2"));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("plane_channels", self.plane_channels),
            ("decoder_hidden", self.decoder_hidden),
            ("gen_width", self.gen_width),
            ("disc_width", self.disc_width),
            ("backbone_width", self.backbone_width),
            ("classifier_width", self.classifier_width),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        self.max_room()?;
        Ok(())
    }

    pub fn max_room(&self) -> Result<RoomBox> {
        RoomBox::new(self.max_room[0], self.max_room[1], self.max_room[2])
    }

    pub fn pose_bins(&self) -> PoseBins {
        PoseBins::new(self)
    }

    /// Generator levels: 4x4 up to N x N.
    pub fn gen_levels(&self) -> usize {
        (self.plane_resolution / 4).trailing_zeros() as usize + 1
    }
}

/// Maps `[0, 1]` images to `[-1, 1]`.
pub(crate) fn normalize_image(g: &mut Graph, x: Var) -> Var {
    let y = g.scale(x, 2.0);
    g.add_scalar(y, -1.0)
}

/// Checks an image batch is `[B, 3, W, W]`.
pub(crate) fn check_image(t: &Tensor, w: usize) -> Result<()> {
    if t.shape.len() != 4 || t.shape[1] != 3 || t.shape[2] != w || t.shape[3] != w {
        return Err(Error::invalid(format!(
            "expected images [B, 3, {w}, {w}], got {:?}",
            t.shape
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub(crate) struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            &[cout, cin, k, k],
            Init::HeNormal {
                fan_in: cin * k * k,
                gain: 1.0,
            },
            rng,
        );
        let b = store.add(format!("{name}.b"), &[cout], Init::Zeros, rng);
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        x: Var,
    ) -> Var {
        let w = g.param(store, self.w, trainable);
        let b = g.param(store, self.b, trainable);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub(crate) fn forward_act(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        x: Var,
    ) -> Var {
        let y = self.forward(g, store, trainable, x);
        g.leaky_relu(y, LEAK)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub(crate) struct Dense {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Dense {
    pub(crate) fn new(
        store: &mut ParamStore,
        name: &str,
        fin: usize,
        fout: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            &[fin, fout],
            Init::HeNormal { fan_in: fin, gain },
            rng,
        );
        let b = store.add(format!("{name}.b"), &[fout], Init::Zeros, rng);
        Dense { w, b }
    }

    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        x: Var,
    ) -> Var {
        let w = g.param(store, self.w, trainable);
        let b = g.param(store, self.b, trainable);
        g.linear(x, w, b)
    }
}
