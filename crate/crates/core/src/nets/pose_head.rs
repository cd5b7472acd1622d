use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::lpa::{wrap_yaw, LpaPose};

/// Continuous pose components in logit order.
pub const COMPONENTS: [&str; 7] = ["x", "y", "z", "yaw", "pitch", "roll", "fov"];

const YAW: usize = 3;

/// Raw pose logits: 4 anchor logits followed by `B` logits for each of the
/// 7 continuous components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseLogits {
    pub values: Vec<f64>,
}

/// Uniform binning of each continuous component over its range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseBins {
    pub bins: usize,
    pub ranges: [(f64, f64); 7],
}

impl PoseBins {
    /// Positions span the largest anchor-local extent of the maximum room;
    /// angles span the configured sampling ranges; yaw spans a full turn.
    pub fn new(config: &ModelConfig) -> Self {
        let [w, h, d] = config.max_room;
        let horizontal = w.max(d);
        PoseBins {
            bins: config.bins,
            ranges: [
                (0.0, horizontal),
                (0.0, h),
                (0.0, horizontal),
                (0.0, 360.0),
                config.pitch_range,
                config.roll_range,
                config.fov_range,
            ],
        }
    }

    pub fn logit_count(&self) -> usize {
        4 + 7 * self.bins
    }

    /// `(offset, len)` of the anchor group and the 7 component groups.
    pub fn groups(&self) -> Vec<(usize, usize)> {
        let mut g = vec![(0, 4)];
        g.extend((0..7).map(|c| (4 + c * self.bins, self.bins)));
        g
    }

    pub fn bin_width(&self, component: usize) -> f64 {
        let (lo, hi) = self.ranges[component];
        (hi - lo) / self.bins as f64
    }

    /// Bin containing `value`; yaw wraps, the rest clamp to the edge bins.
    pub fn bin_index(&self, component: usize, value: f64) -> usize {
        let (lo, _) = self.ranges[component];
        let w = self.bin_width(component);
        if component == YAW {
            let b = (wrap_yaw(value) / w).floor() as usize;
            return b % self.bins;
        }
        let b = ((value - lo) / w).floor();
        b.clamp(0.0, (self.bins - 1) as f64) as usize
    }

    pub fn bin_center(&self, component: usize, bin: usize) -> f64 {
        let (lo, _) = self.ranges[component];
        lo + (bin as f64 + 0.5) * self.bin_width(component)
    }

    pub fn component_value(pose: &LpaPose, component: usize) -> f64 {
        match component {
            0..=2 => pose.position[component],
            3 => pose.yaw,
            4 => pose.pitch,
            5 => pose.roll,
            _ => pose.fov,
        }
    }

    /// Class targets `[anchor, bin_x, ..., bin_fov]`.
    pub fn encode(&self, pose: &LpaPose) -> [usize; 8] {
        let mut t = [pose.anchor; 8];
        for c in 0..7 {
            t[c + 1] = self.bin_index(c, Self::component_value(pose, c));
        }
        t
    }

    /// Logits that put `margin` on the target class of every group.
    pub fn one_hot(&self, pose: &LpaPose, margin: f64) -> PoseLogits {
        let mut values = vec![0.0; self.logit_count()];
        for ((off, _), t) in self.groups().into_iter().zip(self.encode(pose)) {
            values[off + t] = margin;
        }
        PoseLogits { values }
    }

    /// Hard argmax anchor (ties to the smaller id) and soft-argmax
    /// components; yaw uses the circular mean of bin centers.
    pub fn decode(&self, logits: &PoseLogits) -> LpaPose {
        assert_eq!(logits.values.len(), self.logit_count(), "pose logit count");
        let v = &logits.values;
        let mut anchor = 0;
        for a in 1..4 {
            if v[a] > v[anchor] {
                anchor = a;
            }
        }
        let mut comp = [0.0; 7];
        for (c, slot) in comp.iter_mut().enumerate() {
            let seg = &v[4 + c * self.bins..4 + (c + 1) * self.bins];
            let m = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = seg.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            if c == YAW {
                let (mut s, mut co) = (0.0, 0.0);
                for (b, p) in e.iter().enumerate() {
                    let a = self.bin_center(c, b).to_radians();
                    s += p / z * a.sin();
                    co += p / z * a.cos();
                }
                *slot = if s.hypot(co) < 1e-9 {
                    180.0
                } else {
                    wrap_yaw(s.atan2(co).to_degrees())
                };
            } else {
                *slot = e
                    .iter()
                    .enumerate()
                    .map(|(b, p)| p / z * self.bin_center(c, b))
                    .sum();
            }
        }
        LpaPose {
            anchor,
            position: [comp[0], comp[1], comp[2]],
            yaw: comp[3],
            pitch: comp[4],
            roll: comp[5],
            fov: comp[6],
        }
    }
}
