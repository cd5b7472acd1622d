//! Camera samplers for generated scenes: softmin selection among candidate
//! poses by field density (GSR), uniform pose sampling with density-aware
//! position candidates (PSR), and anchor-balanced resampling of datasets.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::TriPlaneField;
use crate::lpa::{AnchorSystem, GlobalCamera, LpaPose, RoomBox};

/// Field-of-view distribution for sampled cameras.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FovPrior {
    Uniform { min: f64, max: f64 },
    Normal { mean: f64, std: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Softmin temperature in density units.
    pub temperature: f64,
    /// Position candidates per PSR pose.
    pub psr_fanout: usize,
    /// Predictor poses offered to GSR per generated view.
    pub gsr_candidates: usize,
    pub pitch_range: (f64, f64),
    pub roll_range: (f64, f64),
    pub fov: FovPrior,
    /// Minimum camera distance to walls, floor and ceiling.
    pub position_margin: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            psr_fanout: 8,
            gsr_candidates: 16,
            pitch_range: (-10.0, 40.0),
            roll_range: (-5.0, 5.0),
            fov: FovPrior::Uniform {
                min: 40.0,
                max: 90.0,
            },
            position_margin: 0.1,
        }
    }
}

impl FovPrior {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            FovPrior::Uniform { min, max } => rng.random_range(min..=max),
            FovPrior::Normal { mean, std } => {
                let n = Normal::new(mean, std).expect("finite fov prior");
                n.sample(rng).clamp(1.0, 179.0)
            }
        }
    }
}

/// Candidate poses with their densities and selection probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub poses: Vec<LpaPose>,
    pub densities: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// `p_i = exp(-rho_i / tau) / sum_j exp(-rho_j / tau)`, evaluated relative
/// to the minimum density. Infinite densities get probability zero; if
/// every density is infinite the result is all zeros.
pub fn softmin(densities: &[f64], temperature: f64) -> Vec<f64> {
    let m = densities.iter().cloned().fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return vec![0.0; densities.len()];
    }
    let e: Vec<f64> = densities
        .iter()
        .map(|&r| (-(r - m) / temperature).exp())
        .collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Index drawn from a normalized probability vector.
fn draw(probabilities: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probabilities.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Density at each candidate's global position; candidates outside the
/// room get infinite density.
pub fn candidate_set(
    field: &TriPlaneField,
    system: &AnchorSystem,
    candidates: &[LpaPose],
    temperature: f64,
) -> Result<CandidateSet> {
    if candidates.is_empty() {
        return Err(Error::invalid("GSR needs at least one candidate pose"));
    }
    let densities: Vec<f64> = candidates
        .iter()
        .map(|p| match system.to_global(p) {
            Ok(cam) if system.room.contains_strict(&cam.position()) => {
                field.density_at(&cam.position())
            }
            _ => f64::INFINITY,
        })
        .collect();
    let probabilities = softmin(&densities, temperature);
    Ok(CandidateSet {
        poses: candidates.to_vec(),
        densities,
        probabilities,
    })
}

/// Picks one candidate by softmin over densities, excluding out-of-room
/// candidates and renormalizing over the rest.
pub fn gsr_select(
    field: &TriPlaneField,
    room: &RoomBox,
    candidates: &[LpaPose],
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<LpaPose> {
    let system = AnchorSystem::new(*room)?;
    let set = candidate_set(field, &system, candidates, temperature)?;
    if set.probabilities.iter().all(|&p| p == 0.0) {
        return Err(Error::invalid("every GSR candidate lies outside the room"));
    }
    Ok(set.poses[draw(&set.probabilities, rng)])
}

fn uniform_in(room: &RoomBox, margin: f64, rng: &mut impl Rng) -> Vector3<f64> {
    let (lo, hi) = (room.min_corner(), room.max_corner());
    let mut span = |a: f64, b: f64| {
        let m = margin.min(0.25 * (b - a));
        rng.random_range(a + m..b - m)
    };
    let x = span(lo.x, hi.x);
    let y = span(lo.y, hi.y);
    Vector3::new(x, y, span(lo.z, hi.z))
}

/// Draws a room-frame camera: position by softmin among `fanout` uniform
/// candidates, rotation and field of view uniform in the configured ranges.
pub fn psr_camera(
    field: &TriPlaneField,
    room: &RoomBox,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> GlobalCamera {
    let positions: Vec<Vector3<f64>> = (0..config.psr_fanout.max(1))
        .map(|_| uniform_in(room, config.position_margin, rng))
        .collect();
    let densities: Vec<f64> = positions.iter().map(|p| field.density_at(p)).collect();
    let pick = draw(&softmin(&densities, config.temperature), rng);
    let position = positions[pick];
    GlobalCamera {
        position: [position.x, position.y, position.z],
        yaw: rng.random_range(0.0..360.0),
        pitch: rng.random_range(config.pitch_range.0..=config.pitch_range.1),
        roll: rng.random_range(config.roll_range.0..=config.roll_range.1),
        fov: config.fov.sample(rng),
    }
}

/// `count` PSR poses expressed in the anchor assigned to each camera.
pub fn psr_sample(
    field: &TriPlaneField,
    room: &RoomBox,
    count: usize,
    config: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<LpaPose>> {
    let system = AnchorSystem::new(*room)?;
    Ok((0..count)
        .map(|_| system.to_lpa(&psr_camera(field, room, config, rng)))
        .collect())
}

/// Tiles every anchor class up to the largest class count. Originals keep
/// their order; repeats of each class follow in cyclic order.
pub fn balance_by_anchor<T: Clone>(
    records: &[T],
    anchor_of: impl Fn(&T) -> usize,
) -> Result<Vec<T>> {
    let mut by_anchor: [Vec<usize>; 4] = Default::default();
    for (i, r) in records.iter().enumerate() {
        let a = anchor_of(r);
        if a > 3 {
            return Err(Error::invalid(format!("anchor label {a} out of range")));
        }
        by_anchor[a].push(i);
    }
    if let Some(a) = by_anchor.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!(
            "anchor class {a} has no records to tile from"
        )));
    }
    let max = by_anchor.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = records.to_vec();
    for idx in &by_anchor {
        out.extend(
            idx.iter()
                .cycle()
                .take(max - idx.len())
                .map(|&i| records[i].clone()),
        );
    }
    Ok(out)
}

/// Per-anchor record counts.
pub fn anchor_counts<T>(records: &[T], anchor_of: impl Fn(&T) -> usize) -> [usize; 4] {
    let mut c = [0; 4];
    for r in records {
        c[anchor_of(r).min(3)] += 1;
    }
    c
}
