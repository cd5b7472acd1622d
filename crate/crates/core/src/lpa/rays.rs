use nalgebra::Vector3;

use super::pose::{AnchorSystem, GlobalCamera, LpaPose};
use super::room::RoomBox;
use crate::error::{Error, Result};

/// One ray per pixel, row-major from the top-left pixel. Directions are unit
/// length and expressed in room coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Rays {
    pub resolution: usize,
    pub origins: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
}

impl Rays {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }
}

pub fn generate_rays(pose: &LpaPose, room: &RoomBox, resolution: (usize, usize)) -> Result<Rays> {
    let cam = AnchorSystem::new(*room)?.to_global(pose)?;
    camera_rays(&cam, resolution)
}

/// Pinhole rays through pixel centers for a square image.
pub fn camera_rays(cam: &GlobalCamera, (w, h): (usize, usize)) -> Result<Rays> {
    if w != h {
        return Err(Error::invalid(format!("image must be square, got {w}x{h}")));
    }
    if w == 0 {
        return Err(Error::invalid("resolution must be at least 1"));
    }
    let rot = cam.rotation();
    let t = (0.5 * cam.fov).to_radians().tan();
    let origin = cam.position();
    let mut directions = Vec::with_capacity(w * w);
    for j in 0..w {
        let ndc_y = 1.0 - 2.0 * (j as f64 + 0.5) / w as f64;
        for i in 0..w {
            let ndc_x = 2.0 * (i as f64 + 0.5) / w as f64 - 1.0;
            let d = Vector3::new(ndc_x * t, ndc_y * t, -1.0);
            directions.push((rot * d).normalize());
        }
    }
    Ok(Rays {
        resolution: w,
        origins: vec![origin; w * w],
        directions,
    })
}

/// Exit distance of a ray leaving the room cuboid from the inside.
pub fn ray_box_distance(
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
    room: &RoomBox,
) -> Result<f64> {
    if !room.contains(origin) {
        return Err(Error::invalid(format!(
            "ray origin {origin:?} is outside the room"
        )));
    }
    Ok(exit_distance(origin, direction, room))
}

/// Slab-method exit distance, without the containment check.
pub(crate) fn exit_distance(
    origin: &Vector3<f64>,
    direction: &Vector3<f64>,
    room: &RoomBox,
) -> f64 {
    let (lo, hi) = (room.min_corner(), room.max_corner());
    let mut t_exit = f64::INFINITY;
    for i in 0..3 {
        let d = direction[i];
        if d > 0.0 {
            t_exit = t_exit.min((hi[i] - origin[i]) / d);
        } else if d < 0.0 {
            t_exit = t_exit.min((lo[i] - origin[i]) / d);
        }
    }
    t_exit.max(0.0)
}

/// Exit distance for every ray of a set.
pub fn boundary_depths(rays: &Rays, room: &RoomBox) -> Vec<f64> {
    rays.origins
        .iter()
        .zip(&rays.directions)
        .map(|(o, d)| exit_distance(o, d, room))
        .collect()
}
