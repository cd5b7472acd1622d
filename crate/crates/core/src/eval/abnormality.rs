use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::TriPlaneField;
use crate::lpa::RoomBox;
use crate::synthroom::SceneSpec;

/// Top-down occupancy settings. Components smaller than `min_area` are
/// treated as clutter, larger ones as core objects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OccupancyConfig {
    pub cell: f64,
    /// Margin removed along every wall so walls themselves do not count.
    pub inset: f64,
    /// Height band that is integrated.
    pub band: (f64, f64),
    pub band_step: f64,
    /// Band opacity above which a column is occupied.
    pub opacity: f64,
    pub min_area: f64,
}

impl Default for OccupancyConfig {
    fn default() -> Self {
        OccupancyConfig {
            cell: 0.1,
            inset: 0.15,
            band: (0.15, 1.0),
            band_step: 0.05,
            opacity: 0.5,
            min_area: 1.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyMap {
    pub cols: usize,
    pub rows: usize,
    pub cell: f64,
    /// Row-major, row index along z.
    pub occupied: Vec<bool>,
}

fn grid(room: &RoomBox, cfg: &OccupancyConfig) -> Result<(usize, usize, f64, f64)> {
    let (w, d) = (room.width - 2.0 * cfg.inset, room.depth - 2.0 * cfg.inset);
    if w <= cfg.cell || d <= cfg.cell || cfg.cell <= 0.0 {
        return Err(Error::invalid("room too small for the occupancy grid"));
    }
    let (cols, rows) = (
        (w / cfg.cell).floor() as usize,
        (d / cfg.cell).floor() as usize,
    );
    // Center the grid in the room.
    let x0 = -0.5 * cols as f64 * cfg.cell;
    let z0 = -0.5 * rows as f64 * cfg.cell;
    Ok((cols, rows, x0, z0))
}

fn build(
    room: &RoomBox,
    cfg: &OccupancyConfig,
    mut occupied_at: impl FnMut(f64, f64) -> bool,
) -> Result<OccupancyMap> {
    let (cols, rows, x0, z0) = grid(room, cfg)?;
    let mut occupied = Vec::with_capacity(cols * rows);
    for r in 0..rows {
        for c in 0..cols {
            let (x, z) = (
                x0 + (c as f64 + 0.5) * cfg.cell,
                z0 + (r as f64 + 0.5) * cfg.cell,
            );
            occupied.push(occupied_at(x, z));
        }
    }
    Ok(OccupancyMap {
        cols,
        rows,
        cell: cfg.cell,
        occupied,
    })
}

/// Occupancy from the density of a field: a column is occupied when the
/// opacity accumulated through the height band exceeds the threshold.
pub fn field_occupancy(field: &TriPlaneField, cfg: &OccupancyConfig) -> Result<OccupancyMap> {
    let (lo, hi) = cfg.band;
    let top = hi.min(field.room.height);
    let steps = (((top - lo) / cfg.band_step).ceil() as usize).max(1);
    let dy = (top - lo) / steps as f64;
    let threshold = -(1.0 - cfg.opacity).ln();
    build(&field.room, cfg, |x, z| {
        let optical: f64 = (0..steps)
            .map(|k| field.density_at(&Vector3::new(x, lo + (k as f64 + 0.5) * dy, z)) * dy)
            .sum();
        optical > threshold
    })
}

/// Exact occupancy of an oracle scene: boxes reaching into the band.
pub fn oracle_occupancy(scene: &SceneSpec, cfg: &OccupancyConfig) -> Result<OccupancyMap> {
    build(&scene.room, cfg, |x, z| {
        scene.boxes().any(|b| {
            b.max[1] > cfg.band.0
                && b.min[1] < cfg.band.1
                && x > b.min[0]
                && x < b.max[0]
                && z > b.min[2]
                && z < b.max[2]
        })
    })
}

impl OccupancyMap {
    /// Areas of the 4-connected occupied components.
    pub fn component_areas(&self) -> Vec<f64> {
        let mut label = vec![false; self.occupied.len()];
        let mut areas = Vec::new();
        for start in 0..self.occupied.len() {
            if !self.occupied[start] || label[start] {
                continue;
            }
            let mut stack = vec![start];
            label[start] = true;
            let mut count = 0usize;
            while let Some(i) = stack.pop() {
                count += 1;
                let (r, c) = (i / self.cols, i % self.cols);
                let mut push = |j: usize| {
                    if self.occupied[j] && !label[j] {
                        label[j] = true;
                        stack.push(j);
                    }
                };
                if c > 0 {
                    push(i - 1);
                }
                if c + 1 < self.cols {
                    push(i + 1);
                }
                if r > 0 {
                    push(i - self.cols);
                }
                if r + 1 < self.rows {
                    push(i + self.cols);
                }
            }
            areas.push(count as f64 * self.cell * self.cell);
        }
        areas
    }
}

/// Components large enough to be a core object.
pub fn count_core_components(map: &OccupancyMap, cfg: &OccupancyConfig) -> usize {
    map.component_areas()
        .iter()
        .filter(|&&a| a >= cfg.min_area)
        .count()
}

/// Fraction of maps whose core-object count is not exactly one.
pub fn abnormality_rate(maps: &[OccupancyMap], cfg: &OccupancyConfig) -> Result<f64> {
    if maps.is_empty() {
        return Err(Error::invalid("abnormality rate of zero scenes"));
    }
    let bad = maps
        .iter()
        .filter(|m| count_core_components(m, cfg) != 1)
        .count();
    Ok(bad as f64 / maps.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthroom::{sample_scene, BoxObject, ScenePriors};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn oracle_scenes_have_one_core_object() {
        let cfg = OccupancyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let maps: Vec<OccupancyMap> = (0..200)
            .map(|_| {
                oracle_occupancy(
                    &sample_scene(&mut rng, &ScenePriors::default()).unwrap(),
                    &cfg,
                )
                .unwrap()
            })
            .collect();
        assert!(abnormality_rate(&maps, &cfg).unwrap() < 0.05);
    }

    #[test]
    fn a_second_planted_core_object_is_abnormal() {
        let cfg = OccupancyConfig::default();
        let mut scene =
            sample_scene(&mut ChaCha8Rng::seed_from_u64(8), &ScenePriors::default()).unwrap();
        scene.clutter.clear();
        scene.fixtures.clear();
        scene.room = RoomBox::new(6.0, 3.0, 6.0).unwrap();
        scene.core.bbox.min = [-0.8, 0.0, -3.0];
        scene.core.bbox.max = [0.8, 0.6, -1.0];
        let map = oracle_occupancy(&scene, &cfg).unwrap();
        assert_eq!(count_core_components(&map, &cfg), 1);
        // The same object against the opposite wall.
        scene.clutter.push(BoxObject {
            min: [-0.8, 0.0, 1.0],
            max: [0.8, 0.6, 3.0],
            color: [0.5; 3],
        });
        let map = oracle_occupancy(&scene, &cfg).unwrap();
        assert_eq!(count_core_components(&map, &cfg), 2);
        assert_eq!(abnormality_rate(&[map], &cfg).unwrap(), 1.0);
    }
}
