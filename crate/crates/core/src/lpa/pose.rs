use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::room::{anchor_frames_with, AnchorFrame, CoreOrientation, RoomBox};
use crate::error::{Error, Result};

/// Rotation for intrinsic yaw (about +y), then pitch (about +x), then roll
/// (about +z). Angles in degrees. The camera looks along local `-z`.
pub fn euler_to_matrix(yaw: f64, pitch: f64, roll: f64) -> Matrix3<f64> {
    let (sa, ca) = yaw.to_radians().sin_cos();
    let (sb, cb) = pitch.to_radians().sin_cos();
    let (sc, cc) = roll.to_radians().sin_cos();
    let ry = Matrix3::new(ca, 0.0, sa, 0.0, 1.0, 0.0, -sa, 0.0, ca);
    let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, cb, -sb, 0.0, sb, cb);
    let rz = Matrix3::new(cc, -sc, 0.0, sc, cc, 0.0, 0.0, 0.0, 1.0);
    ry * rx * rz
}

/// Inverse of [`euler_to_matrix`]. Returns `(yaw, pitch, roll)` with yaw in
/// `[0, 360)`, pitch in `[-90, 90]` and roll in `(-180, 180]`.
pub fn matrix_to_euler(m: &Matrix3<f64>) -> (f64, f64, f64) {
    let sb = (-m[(1, 2)]).clamp(-1.0, 1.0);
    let pitch = sb.asin();
    let cb = (m[(1, 0)].powi(2) + m[(1, 1)].powi(2)).sqrt();
    let (yaw, roll) = if cb > 1e-9 {
        (m[(0, 2)].atan2(m[(2, 2)]), m[(1, 0)].atan2(m[(1, 1)]))
    } else {
        // Gimbal lock: fold the roll into the yaw.
        ((-m[(2, 0)]).atan2(m[(0, 0)]), 0.0)
    };
    (
        wrap_yaw(yaw.to_degrees()),
        pitch.to_degrees(),
        wrap_roll(roll.to_degrees()),
    )
}

/// Maps an angle into `[0, 360)`.
pub fn wrap_yaw(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Maps an angle into `(-180, 180]`.
pub fn wrap_roll(deg: f64) -> f64 {
    let w = 180.0 - (180.0 - deg).rem_euclid(360.0);
    if w <= -180.0 {
        w + 360.0
    } else {
        w
    }
}

/// Absolute circular difference in degrees, in `[0, 180]`.
pub fn circular_abs_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Angle of the relative rotation between two rotation matrices, degrees.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let r = a.transpose() * b;
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos loses precision near 0; use the skew part as well.
    let s = 0.5
        * Vector3::new(
            r[(2, 1)] - r[(1, 2)],
            r[(0, 2)] - r[(2, 0)],
            r[(1, 0)] - r[(0, 1)],
        )
        .norm();
    s.atan2(c).to_degrees()
}

/// Camera pose in an anchor-local frame: anchor id, local position,
/// yaw/pitch/roll and vertical field of view (degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpaPose {
    pub anchor: usize,
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub fov: f64,
}

impl LpaPose {
    pub fn validate(&self) -> Result<()> {
        if self.anchor > 3 {
            return Err(Error::invalid(format!(
                "anchor id {} out of range",
                self.anchor
            )));
        }
        if !(0.0..360.0).contains(&self.yaw) {
            return Err(Error::invalid(format!("yaw {} outside [0, 360)", self.yaw)));
        }
        if !(-90.0..=90.0).contains(&self.pitch) {
            return Err(Error::invalid(format!(
                "pitch {} outside [-90, 90]",
                self.pitch
            )));
        }
        if !(self.roll > -180.0 && self.roll <= 180.0) {
            return Err(Error::invalid(format!(
                "roll {} outside (-180, 180]",
                self.roll
            )));
        }
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::invalid(format!("fov {} outside (0, 180)", self.fov)));
        }
        if self.position.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite position"));
        }
        Ok(())
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_to_matrix(self.yaw, self.pitch, self.roll)
    }
}

/// Camera in room coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalCamera {
    pub position: [f64; 3],
    pub yaw: f64,
    pub pitch: f64,
    pub roll: f64,
    pub fov: f64,
}

impl GlobalCamera {
    pub fn from_rotation(position: Vector3<f64>, rotation: &Matrix3<f64>, fov: f64) -> Self {
        let (yaw, pitch, roll) = matrix_to_euler(rotation);
        GlobalCamera {
            position: position.into(),
            yaw,
            pitch,
            roll,
            fov,
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        Vector3::from(self.position)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        euler_to_matrix(self.yaw, self.pitch, self.roll)
    }

    pub fn forward(&self) -> Vector3<f64> {
        -self.rotation().column(2).into_owned()
    }

    /// Projects a room-space point. Returns `(screen_x, screen_y, depth)`
    /// with screen coordinates normalized to `[0, 1]` (x to the right,
    /// y downwards) and depth along the viewing axis.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64, f64) {
        let v = self.rotation().transpose() * (p - self.position());
        let depth = -v.z;
        let t = (0.5 * self.fov).to_radians().tan();
        let ndc_x = v.x / (depth * t);
        let ndc_y = v.y / (depth * t);
        (0.5 * (ndc_x + 1.0), 0.5 * (1.0 - ndc_y), depth)
    }

    /// Horizontal view-space angle of a point in degrees; 0 straight ahead,
    /// positive to the right.
    pub fn horizontal_angle(&self, p: &Vector3<f64>) -> f64 {
        let v = self.rotation().transpose() * (p - self.position());
        v.x.atan2(-v.z).to_degrees()
    }
}

/// A room together with its four anchor frames.
#[derive(Debug, Clone, Copy)]
pub struct AnchorSystem {
    pub room: RoomBox,
    pub frames: [AnchorFrame; 4],
}

impl AnchorSystem {
    pub fn new(room: RoomBox) -> Result<Self> {
        Self::with_core(room, &CoreOrientation::canonical())
    }

    pub fn with_core(room: RoomBox, core: &CoreOrientation) -> Result<Self> {
        let frames = anchor_frames_with(&room, core)?;
        Ok(AnchorSystem { room, frames })
    }

    pub fn to_global(&self, pose: &LpaPose) -> Result<GlobalCamera> {
        pose.validate()?;
        let frame = &self.frames[pose.anchor];
        let position = frame.to_room(&pose.position());
        let rotation = frame.basis * pose.rotation();
        Ok(GlobalCamera::from_rotation(position, &rotation, pose.fov))
    }

    pub fn to_lpa(&self, cam: &GlobalCamera) -> LpaPose {
        let anchor = self.assign_anchor(cam);
        self.to_lpa_with_anchor(cam, anchor)
    }

    pub fn to_lpa_with_anchor(&self, cam: &GlobalCamera, anchor: usize) -> LpaPose {
        let frame = &self.frames[anchor];
        let position = frame.to_local(&cam.position());
        let rotation = frame.basis.transpose() * cam.rotation();
        let (yaw, pitch, roll) = matrix_to_euler(&rotation);
        LpaPose {
            anchor,
            position: position.into(),
            yaw,
            pitch,
            roll,
            fov: cam.fov,
        }
    }

    /// Leftmost visible corner; when no corner is on screen, falls back to
    /// horizontal view angles (see [`pick_anchor`]).
    pub fn assign_anchor(&self, cam: &GlobalCamera) -> usize {
        let views: Vec<CornerView> = self
            .frames
            .iter()
            .map(|f| {
                let (sx, sy, depth) = cam.project(&f.origin);
                CornerView {
                    screen_x: sx,
                    screen_y: sy,
                    depth,
                    horizontal_angle: cam.horizontal_angle(&f.origin),
                }
            })
            .collect();
        pick_anchor(&views, cam.fov)
    }

    /// Anchor ids whose corner projects inside the image with positive depth.
    pub fn visible_corners(&self, cam: &GlobalCamera) -> Vec<usize> {
        self.frames
            .iter()
            .filter(|f| {
                let (sx, sy, depth) = cam.project(&f.origin);
                on_screen(sx, sy, depth)
            })
            .map(|f| f.anchor_id)
            .collect()
    }
}

/// Projection of one anchor corner into a camera.
#[derive(Debug, Clone, Copy)]
pub struct CornerView {
    pub screen_x: f64,
    pub screen_y: f64,
    pub depth: f64,
    pub horizontal_angle: f64,
}

fn on_screen(sx: f64, sy: f64, depth: f64) -> bool {
    depth > 0.0 && (0.0..=1.0).contains(&sx) && (0.0..=1.0).contains(&sy)
}

/// Anchor selection over projected corners, indexed by anchor id.
///
/// 1. Corners on screen with positive depth: smallest screen x.
/// 2. Corners inside the horizontal field of view but off screen vertically:
///    smallest horizontal angle.
/// 3. Otherwise the first corner met when turning left from the left image
///    edge.
///
/// Ties go to the smaller anchor id.
pub fn pick_anchor(views: &[CornerView], fov: f64) -> usize {
    let argmin = |key: &dyn Fn(&CornerView) -> Option<f64>| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, v) in views.iter().enumerate() {
            if let Some(k) = key(v) {
                if best.is_none_or(|(_, b)| k < b) {
                    best = Some((i, k));
                }
            }
        }
        best.map(|(i, _)| i)
    };
    let half = 0.5 * fov;
    argmin(&|v| on_screen(v.screen_x, v.screen_y, v.depth).then_some(v.screen_x))
        .or_else(|| argmin(&|v| (v.horizontal_angle.abs() <= half).then_some(v.horizontal_angle)))
        .or_else(|| argmin(&|v| Some((-half - v.horizontal_angle).rem_euclid(360.0))))
        .unwrap_or(0)
}

/// Converts an anchor-local pose of a canonical room to room coordinates.
pub fn lpa_to_global(pose: &LpaPose, room: &RoomBox) -> Result<GlobalCamera> {
    AnchorSystem::new(*room)?.to_global(pose)
}

/// Re-expresses a room camera relative to its assigned anchor.
pub fn global_to_lpa(cam: &GlobalCamera, room: &RoomBox) -> Result<LpaPose> {
    Ok(AnchorSystem::new(*room)?.to_lpa(cam))
}

pub fn assign_anchor(cam: &GlobalCamera, room: &RoomBox) -> Result<usize> {
    Ok(AnchorSystem::new(*room)?.assign_anchor(cam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn room() -> RoomBox {
        RoomBox::new(4.0, 3.0, 4.0).unwrap()
    }

    #[test]
    fn euler_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let (a, b, c) = (
                rng.random_range(0.0..360.0),
                rng.random_range(-89.0..89.0),
                rng.random_range(-179.0..180.0),
            );
            let m = euler_to_matrix(a, b, c);
            let (a2, b2, c2) = matrix_to_euler(&m);
            assert!(circular_abs_diff(a, a2) < 1e-8);
            assert!((b - b2).abs() < 1e-8);
            assert!(circular_abs_diff(c, c2) < 1e-8);
        }
    }

    #[test]
    fn positive_pitch_looks_up() {
        let cam = GlobalCamera {
            position: [0.0, 1.0, 0.0],
            yaw: 0.0,
            pitch: 30.0,
            roll: 0.0,
            fov: 60.0,
        };
        let f = cam.forward();
        assert!(f.y > 0.0 && f.z < 0.0);
    }

    #[test]
    fn wraps() {
        assert_eq!(wrap_yaw(-10.0), 350.0);
        assert_eq!(wrap_yaw(360.0), 0.0);
        assert_eq!(wrap_roll(-180.0), 180.0);
        assert_eq!(wrap_roll(190.0), -170.0);
        assert_eq!(circular_abs_diff(350.0, 10.0), 20.0);
    }

    #[test]
    fn identity_local_pose_sits_on_the_corner() {
        let sys = AnchorSystem::new(room()).unwrap();
        for k in 0..4 {
            let pose = LpaPose {
                anchor: k,
                position: [0.0; 3],
                yaw: 0.0,
                pitch: 0.0,
                roll: 0.0,
                fov: 60.0,
            };
            let cam = sys.to_global(&pose).unwrap();
            assert!((cam.position() - sys.frames[k].origin).norm() < 1e-12);
            assert!(rotation_angle_between(&cam.rotation(), &sys.frames[k].basis) < 1e-9);
            assert_eq!(cam.fov, 60.0);
        }
    }

    #[test]
    fn local_position_matches_explicit_matrix_product() {
        let sys = AnchorSystem::new(room()).unwrap();
        let f = &sys.frames[0];
        let pose = LpaPose {
            anchor: 0,
            position: [1.0, 1.0, 1.0],
            yaw: 10.0,
            pitch: 5.0,
            roll: 0.0,
            fov: 60.0,
        };
        let cam = sys.to_global(&pose).unwrap();
        // Column-by-column product written out by hand.
        let b = f.basis;
        let expect = [
            f.origin.x + b[(0, 0)] + b[(0, 1)] + b[(0, 2)],
            f.origin.y + b[(1, 0)] + b[(1, 1)] + b[(1, 2)],
            f.origin.z + b[(2, 0)] + b[(2, 1)] + b[(2, 2)],
        ];
        for i in 0..3 {
            assert!((cam.position[i] - expect[i]).abs() < 1e-12);
        }
    }

    fn cam_at(x: f64, z: f64, yaw: f64, fov: f64) -> GlobalCamera {
        GlobalCamera {
            position: [x, 1.2, z],
            yaw,
            pitch: 0.0,
            roll: 0.0,
            fov,
        }
    }

    /// Yaw that makes the camera at `from` look horizontally at `to`.
    fn yaw_towards(from: Vector3<f64>, to: Vector3<f64>) -> f64 {
        let d = to - from;
        // forward(yaw) = (-sin, 0, -cos)
        wrap_yaw((-d.x).atan2(-d.z).to_degrees())
    }

    #[test]
    fn leftmost_visible_corner_wins() {
        let views = [
            CornerView {
                screen_x: 0.7,
                screen_y: 0.5,
                depth: 2.0,
                horizontal_angle: 10.0,
            },
            CornerView {
                screen_x: 0.2,
                screen_y: 0.5,
                depth: 2.0,
                horizontal_angle: -15.0,
            },
            CornerView {
                screen_x: -1.0,
                screen_y: 0.5,
                depth: 2.0,
                horizontal_angle: -80.0,
            },
            CornerView {
                screen_x: 0.5,
                screen_y: 0.5,
                depth: -1.0,
                horizontal_angle: 170.0,
            },
        ];
        assert_eq!(pick_anchor(&views, 60.0), 1);
    }

    #[test]
    fn facing_a_corner_head_on_selects_it() {
        let sys = AnchorSystem::new(room()).unwrap();
        let corner = sys.frames[1].origin;
        let centre = Vector3::new(0.0, 1.2, 0.0);
        let mut cam = cam_at(0.0, 0.0, yaw_towards(centre, corner), 40.0);
        let d = corner - centre;
        cam.pitch = d.y.atan2((d.x * d.x + d.z * d.z).sqrt()).to_degrees();
        // Oracle: independent pinhole projection of every corner.
        let visible: Vec<usize> = (0..4)
            .filter(|&k| {
                let v = cam.rotation().transpose() * (sys.frames[k].origin - cam.position());
                let t = 20f64.to_radians().tan();
                -v.z > 0.0 && (v.x / -v.z).abs() <= t && (v.y / -v.z).abs() <= t
            })
            .collect();
        assert_eq!(visible, vec![1]);
        assert_eq!(sys.assign_anchor(&cam), 1);
    }

    fn closest_left_by_oracle(sys: &AnchorSystem, cam: &GlobalCamera) -> usize {
        // Leftward angular distance from the left image edge to each corner.
        let half = 0.5 * cam.fov;
        let dist =
            |k: usize| (-half - cam.horizontal_angle(&sys.frames[k].origin)).rem_euclid(360.0);
        (0..4).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap()
    }

    #[test]
    fn facing_flat_wall_picks_closest_left_corner() {
        let sys = AnchorSystem::new(room()).unwrap();
        let centre = Vector3::new(0.0, 1.2, 0.0);
        // Counter-clockwise enumeration puts corner k + 1 to the left of k
        // when seen from inside the room.
        for (a, b, expect) in [(0, 1, 1), (1, 2, 2), (2, 3, 3), (3, 0, 0)] {
            let mid = 0.5 * (sys.frames[a].origin + sys.frames[b].origin);
            let cam = cam_at(0.0, 0.0, yaw_towards(centre, mid), 20.0);
            assert!(sys.visible_corners(&cam).is_empty());
            assert_eq!(closest_left_by_oracle(&sys, &cam), expect);
            assert_eq!(sys.assign_anchor(&cam), expect);
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let sys = AnchorSystem::new(RoomBox::new(4.3, 2.8, 5.1).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let cam = GlobalCamera {
                position: [
                    rng.random_range(-2.1..2.1),
                    rng.random_range(0.05..2.75),
                    rng.random_range(-2.5..2.5),
                ],
                yaw: rng.random_range(0.0..360.0),
                pitch: rng.random_range(-60.0..60.0),
                roll: rng.random_range(-20.0..20.0),
                fov: rng.random_range(30.0..100.0),
            };
            let pose = sys.to_lpa(&cam);
            pose.validate().unwrap();
            let back = sys.to_global(&pose).unwrap();
            assert!((back.position() - cam.position()).norm() < 1e-9);
            assert!(rotation_angle_between(&back.rotation(), &cam.rotation()) < 1e-6);
        }
    }
}
