//! Evaluation: pose errors against the withheld ground truth, camera
//! histograms, a Fréchet feature distance, the layout-abnormality proxy and
//! panorama/trajectory renders.

mod abnormality;
mod frechet;
mod views;

pub use abnormality::{
    abnormality_rate, count_core_components, field_occupancy, oracle_occupancy, OccupancyConfig,
    OccupancyMap,
};
pub use frechet::{feature_distribution_distance, frechet_distance, GaussianFit};
pub use views::{panorama, trajectory, RenderedView};

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpa::{circular_abs_diff, AnchorSystem, LpaPose, RoomBox};
use crate::nets::{CameraPredictor, PoseBins, COMPONENTS};
use crate::synthroom::{GT_HEADER, GT_POSES_FILE};
use crate::tensor::Tensor;

static GT_OPENS: AtomicUsize = AtomicUsize::new(0);

/// How often the ground-truth sidecar has been opened in this process.
pub fn gt_open_count() -> usize {
    GT_OPENS.load(Ordering::SeqCst)
}

/// One ground-truth row.
#[derive(Debug, Clone, PartialEq)]
pub struct GtRecord {
    pub id: String,
    pub pose: LpaPose,
    pub room: RoomBox,
}

impl GtRecord {
    /// The same camera expressed in another anchor's frame.
    pub fn in_anchor(&self, anchor: usize) -> Result<LpaPose> {
        let system = AnchorSystem::new(self.room)?;
        Ok(system.to_lpa_with_anchor(&system.to_global(&self.pose)?, anchor))
    }
}

#[derive(Deserialize)]
struct GtRow {
    id: String,
    anchor: usize,
    x: f64,
    y: f64,
    z: f64,
    yaw: f64,
    pitch: f64,
    roll: f64,
    fov: f64,
    room_width: f64,
    room_height: f64,
    room_depth: f64,
}

/// Reads `poses_gt.csv` under a dataset root. Evaluation only.
pub fn read_gt_poses(root: &Path) -> Result<Vec<GtRecord>> {
    let path = root.join(GT_POSES_FILE);
    GT_OPENS.fetch_add(1, Ordering::SeqCst);
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let header = rdr
        .headers()
        .map_err(|e| Error::format(&path, e.to_string()))?
        .clone();
    if header.iter().ne(GT_HEADER) {
        return Err(Error::format(
            &path,
            format!("unexpected header {header:?}"),
        ));
    }
    let mut out = Vec::new();
    for row in rdr.deserialize::<GtRow>() {
        let r = row.map_err(|e| Error::format(&path, e.to_string()))?;
        let pose = LpaPose {
            anchor: r.anchor,
            position: [r.x, r.y, r.z],
            yaw: r.yaw,
            pitch: r.pitch,
            roll: r.roll,
            fov: r.fov,
        };
        pose.validate()
            .map_err(|e| Error::format(&path, format!("record {}: {e}", r.id)))?;
        out.push(GtRecord {
            id: r.id,
            pose,
            room: RoomBox::new(r.room_width, r.room_height, r.room_depth)?,
        });
    }
    Ok(out)
}

/// Mean absolute error per component; yaw uses the circular difference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMae {
    pub count: usize,
    pub anchor_accuracy: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub fov: f64,
}

impl PoseMae {
    /// Values in [`COMPONENTS`] order.
    pub fn components(&self) -> [f64; 7] {
        [
            self.x, self.y, self.z, self.yaw, self.pitch, self.roll, self.fov,
        ]
    }
}

/// Compares predictions with ground truth record by record.
pub fn pose_mae(predicted: &[LpaPose], truth: &[LpaPose]) -> Result<PoseMae> {
    if predicted.is_empty() {
        return Err(Error::invalid("pose MAE of an empty evaluation set"));
    }
    if predicted.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth poses",
            predicted.len(),
            truth.len()
        )));
    }
    let mut sums = [0.0; 7];
    let mut hits = 0;
    for (p, t) in predicted.iter().zip(truth) {
        hits += usize::from(p.anchor == t.anchor);
        for (k, s) in sums.iter_mut().enumerate() {
            let (a, b) = (
                PoseBins::component_value(p, k),
                PoseBins::component_value(t, k),
            );
            *s += if k == 3 {
                circular_abs_diff(a, b)
            } else {
                (a - b).abs()
            };
        }
    }
    let n = predicted.len() as f64;
    let m = sums.map(|s| s / n);
    Ok(PoseMae {
        count: predicted.len(),
        anchor_accuracy: hits as f64 / n,
        x: m[0],
        y: m[1],
        z: m[2],
        yaw: m[3],
        pitch: m[4],
        roll: m[5],
        fov: m[6],
    })
}

/// Runs the predictor on `images` and scores it. With `anchor_free` both
/// sides are expressed in anchor 0's frame.
pub fn eval_pose_mae(
    predictor: &CameraPredictor,
    images: &[Tensor],
    truth: &[GtRecord],
    anchor_free: bool,
) -> Result<PoseMae> {
    if images.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} images for {} ground-truth poses",
            images.len(),
            truth.len()
        )));
    }
    let mut predicted = predictor.predict_many(images, 32)?;
    let gt: Vec<LpaPose> = if anchor_free {
        predicted.iter_mut().for_each(|p| p.anchor = 0);
        truth
            .iter()
            .map(|t| t.in_anchor(0))
            .collect::<Result<_>>()?
    } else {
        truth.iter().map(|t| t.pose).collect()
    };
    pose_mae(&predicted, &gt)
}

/// Binned counts of each pose component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseHistograms {
    pub bins: PoseBins,
    /// `[component][bin]`; the anchor row has 4 entries.
    pub counts: Vec<Vec<usize>>,
}

pub fn pose_histograms(poses: &[LpaPose], bins: &PoseBins) -> PoseHistograms {
    let mut counts = vec![vec![0; 4]];
    counts.extend((0..7).map(|_| vec![0; bins.bins]));
    for p in poses {
        for (c, idx) in bins.encode(p).iter().enumerate() {
            counts[c][*idx] += 1;
        }
    }
    PoseHistograms {
        bins: bins.clone(),
        counts,
    }
}

impl PoseHistograms {
    /// Long-format CSV: `component,bin,center,count`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let fail = |e: csv::Error| Error::format(path, e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(fail)?;
        w.write_record(["component", "bin", "center", "count"])
            .map_err(fail)?;
        for (c, row) in self.counts.iter().enumerate() {
            for (b, n) in row.iter().enumerate() {
                let center = if c == 0 {
                    b as f64
                } else {
                    self.bins.bin_center(c - 1, b)
                };
                let name = if c == 0 { "anchor" } else { COMPONENTS[c - 1] };
                w.write_record([
                    name.to_string(),
                    b.to_string(),
                    format!("{center}"),
                    n.to_string(),
                ])
                .map_err(fail)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
