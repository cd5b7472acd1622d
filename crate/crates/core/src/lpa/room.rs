use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cuboid room with its origin at the center of the floor and `+y` up.
///
/// Floor at `y = 0`, ceiling at `y = height`, walls at `x = ±width/2` and
/// `z = ±depth/2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomBox {
    pub width: f64,
    pub height: f64,
    pub depth: f64,
}

impl RoomBox {
    /// Builds a room, checking that every extent is positive and finite.
    pub fn new(width: f64, height: f64, depth: f64) -> Result<Self> {
        let room = RoomBox {
            width,
            height,
            depth,
        };
        room.validate()?;
        Ok(room)
    }

    /// Builds a room that must also fit inside `max`.
    pub fn bounded(width: f64, height: f64, depth: f64, max: &RoomBox) -> Result<Self> {
        let room = Self::new(width, height, depth)?;
        if !room.fits_within(max) {
            return Err(Error::invalid(format!(
                "room {:?} exceeds the maximum room size {:?}",
                room.size(),
                max.size()
            )));
        }
        Ok(room)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("width", self.width),
            ("height", self.height),
            ("depth", self.depth),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!(
                    "room {name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn size(&self) -> [f64; 3] {
        [self.width, self.height, self.depth]
    }

    pub fn fits_within(&self, max: &RoomBox) -> bool {
        self.width <= max.width && self.height <= max.height && self.depth <= max.depth
    }

    pub fn min_corner(&self) -> Vector3<f64> {
        Vector3::new(-0.5 * self.width, 0.0, -0.5 * self.depth)
    }

    pub fn max_corner(&self) -> Vector3<f64> {
        Vector3::new(0.5 * self.width, self.height, 0.5 * self.depth)
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(0.0, 0.5 * self.height, 0.0)
    }

    /// Closed containment test.
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let (lo, hi) = (self.min_corner(), self.max_corner());
        (0..3).all(|i| p[i] >= lo[i] && p[i] <= hi[i])
    }

    pub fn contains_strict(&self, p: &Vector3<f64>) -> bool {
        let (lo, hi) = (self.min_corner(), self.max_corner());
        (0..3).all(|i| p[i] > lo[i] && p[i] < hi[i])
    }

    pub fn diagonal(&self) -> f64 {
        (self.width * self.width + self.height * self.height + self.depth * self.depth).sqrt()
    }

    pub fn scaled(&self, k: f64) -> RoomBox {
        RoomBox {
            width: self.width * k,
            height: self.height * k,
            depth: self.depth * k,
        }
    }

    /// The four wall-floor corners.
    pub fn floor_corners(&self) -> [Vector3<f64>; 4] {
        let (hx, hz) = (0.5 * self.width, 0.5 * self.depth);
        [
            Vector3::new(hx, 0.0, hz),
            Vector3::new(-hx, 0.0, hz),
            Vector3::new(-hx, 0.0, -hz),
            Vector3::new(hx, 0.0, -hz),
        ]
    }
}

/// Horizontal orientation of the room's core object: `front` points from
/// the head of the object into the room, `right` is `front × up`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreOrientation {
    pub front: Vector3<f64>,
    pub right: Vector3<f64>,
}

impl CoreOrientation {
    /// Orientation used for generated rooms: the core object stands against
    /// the `z = -depth/2` wall and faces `+z`.
    pub fn canonical() -> Self {
        Self::facing(Vector3::z())
    }

    /// Orientation for a core object facing the horizontal direction `front`.
    pub fn facing(front: Vector3<f64>) -> Self {
        let front = Vector3::new(front.x, 0.0, front.z).normalize();
        let right = front.cross(&Vector3::y());
        CoreOrientation { front, right }
    }
}

impl Default for CoreOrientation {
    fn default() -> Self {
        Self::canonical()
    }
}

/// Local coordinate frame rooted at a wall-floor corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorFrame {
    pub anchor_id: usize,
    pub origin: Vector3<f64>,
    /// Columns are the local x, y, z axes expressed in room coordinates.
    pub basis: Matrix3<f64>,
}

impl AnchorFrame {
    pub fn axis_x(&self) -> Vector3<f64> {
        self.basis.column(0).into_owned()
    }

    pub fn axis_y(&self) -> Vector3<f64> {
        self.basis.column(1).into_owned()
    }

    pub fn axis_z(&self) -> Vector3<f64> {
        self.basis.column(2).into_owned()
    }

    pub fn to_room(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.origin + self.basis * local
    }

    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.basis.transpose() * (p - self.origin)
    }
}

/// Anchor frames of `room` under the canonical core-object convention.
pub fn anchor_frames(room: &RoomBox) -> Result<[AnchorFrame; 4]> {
    anchor_frames_with(room, &CoreOrientation::canonical())
}

/// Anchor frames of `room`, enumerated counter-clockwise seen from above,
/// starting at the corner behind and to the left of the core object.
pub fn anchor_frames_with(room: &RoomBox, core: &CoreOrientation) -> Result<[AnchorFrame; 4]> {
    room.validate()?;
    let corners = room.floor_corners();

    // Head-left corner: furthest along -front, then along -right.
    let score = |c: &Vector3<f64>| -> (f64, f64) { (-c.dot(&core.front), -c.dot(&core.right)) };
    let mut start = 0;
    for (i, c) in corners.iter().enumerate() {
        let (a, b) = score(c);
        let (sa, sb) = score(&corners[start]);
        if a > sa + 1e-12 || ((a - sa).abs() <= 1e-12 && b > sb) {
            start = i;
        }
    }

    // Counter-clockwise about +y means increasing atan2(-z, x).
    let angle = |c: &Vector3<f64>| (-c.z).atan2(c.x);
    let base = angle(&corners[start]);
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let da = (angle(&corners[a]) - base).rem_euclid(std::f64::consts::TAU);
        let db = (angle(&corners[b]) - base).rem_euclid(std::f64::consts::TAU);
        da.total_cmp(&db)
    });

    let frames = std::array::from_fn(|k| {
        let origin = corners[order[k]];
        let inward_x = Vector3::new(-origin.x.signum(), 0.0, 0.0);
        let inward_z = Vector3::new(0.0, 0.0, -origin.z.signum());
        // Pick the axis assignment that makes x × y = z.
        let (ax, az) = if inward_x.cross(&Vector3::y()).dot(&inward_z) > 0.0 {
            (inward_x, inward_z)
        } else {
            (inward_z, inward_x)
        };
        AnchorFrame {
            anchor_id: k,
            origin,
            basis: Matrix3::from_columns(&[ax, Vector3::y(), az]),
        }
    });
    Ok(frames)
}
