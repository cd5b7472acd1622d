//! Procedural cuboid rooms: scene sampling, exact ray-cast oracle renders
//! and on-disk datasets with anchor labels and withheld ground-truth poses.

mod dataset;

pub use dataset::{
    build_dataset, content_hash, load_dataset, quantize_image, write_dataset, Counts, Dataset,
    DatasetRecord, GroundTruth, Manifest, GT_HEADER, GT_POSES_FILE,
};

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lpa::{
    camera_rays, exit_distance, AnchorSystem, CoreOrientation, GlobalCamera, RoomBox,
};
use crate::samplers::SamplerConfig;

/// Axis-aligned box with a flat color.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [f64; 3],
}

impl BoxObject {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] > self.min[i] && p[i] < self.max[i])
    }

    /// Interiors overlap (touching faces do not count).
    pub fn overlaps(&self, other: &BoxObject) -> bool {
        (0..3).all(|i| self.min[i] < other.max[i] && other.min[i] < self.max[i])
    }

    pub fn inside_room(&self, room: &RoomBox) -> bool {
        let (lo, hi) = (room.min_corner(), room.max_corner());
        (0..3).all(|i| self.min[i] >= lo[i] - 1e-12 && self.max[i] <= hi[i] + 1e-12)
    }

    pub fn center(&self) -> Vector3<f64> {
        Vector3::new(
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        )
    }

    /// Entry distance and entry-face axis of a ray starting outside the
    /// box, if it hits.
    pub fn ray_entry(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, usize)> {
        let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        for i in 0..3 {
            if d[i].abs() < 1e-15 {
                if o[i] <= self.min[i] || o[i] >= self.max[i] {
                    return None;
                }
                continue;
            }
            let (a, b) = ((self.min[i] - o[i]) / d[i], (self.max[i] - o[i]) / d[i]);
            let (near, far) = if a < b { (a, b) } else { (b, a) };
            if near > t0 {
                t0 = near;
                axis = i;
            }
            t1 = t1.min(far);
        }
        (t0 <= t1 && t0 > 0.0).then_some((t0, axis))
    }
}

/// The category-defining object: a box whose back face touches a wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoreObject {
    pub bbox: BoxObject,
    /// Unit horizontal direction from its head into the room.
    pub front: [f64; 3],
    pub right: [f64; 3],
}

impl CoreObject {
    pub fn orientation(&self) -> CoreOrientation {
        CoreOrientation::facing(Vector3::from(self.front))
    }
}

/// Surface order for [`SceneSpec::surface_colors`].
pub const FACES: [&str; 6] = [
    "floor", "ceiling", "wall_-x", "wall_+x", "wall_-z", "wall_+z",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub room: RoomBox,
    pub core: CoreObject,
    pub clutter: Vec<BoxObject>,
    /// Furniture placed relative to the core object (nightstands, a
    /// wardrobe on its right, a window opposite). Gives each corner of the
    /// room a recognizable look.
    #[serde(default)]
    pub fixtures: Vec<BoxObject>,
    pub surface_colors: [[f64; 3]; 6],
}

impl SceneSpec {
    pub fn anchor_system(&self) -> Result<AnchorSystem> {
        AnchorSystem::with_core(self.room, &self.core.orientation())
    }

    pub fn boxes(&self) -> impl Iterator<Item = &BoxObject> {
        std::iter::once(&self.core.bbox)
            .chain(&self.fixtures)
            .chain(&self.clutter)
    }

    /// All placement invariants.
    pub fn check(&self) -> Result<()> {
        self.room.validate()?;
        for b in self.boxes() {
            if !b.inside_room(&self.room) {
                return Err(Error::invalid(format!("box {b:?} leaves the room")));
            }
        }
        for (i, a) in self.fixtures.iter().chain(&self.clutter).enumerate() {
            if a.overlaps(&self.core.bbox) {
                return Err(Error::invalid(format!(
                    "object {i} intersects the core object"
                )));
            }
            for b in self.fixtures.iter().chain(&self.clutter).skip(i + 1) {
                if a.overlaps(b) {
                    return Err(Error::invalid(format!("object {i} intersects another box")));
                }
            }
        }
        let f = Vector3::from(self.core.front);
        let back = self.core.bbox.center() - f * 0.5 * extent_along(&self.core.bbox, &f);
        if (back.dot(&f) + 0.5 * wall_span(&self.room, &f)).abs() > 1e-9 {
            return Err(Error::invalid("core object does not stand against a wall"));
        }
        Ok(())
    }
}

fn extent_along(b: &BoxObject, dir: &Vector3<f64>) -> f64 {
    (0..3).map(|i| (b.max[i] - b.min[i]) * dir[i].abs()).sum()
}

fn wall_span(room: &RoomBox, dir: &Vector3<f64>) -> f64 {
    room.width * dir.x.abs() + room.depth * dir.z.abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenePriors {
    pub width: (f64, f64),
    pub height: (f64, f64),
    pub depth: (f64, f64),
    pub clutter: (usize, usize),
    /// Core object extent across its front, along it, and its height.
    pub core_width: (f64, f64),
    pub core_length: (f64, f64),
    pub core_height: (f64, f64),
    /// Fraction of the free wall length the core object may slide off center.
    pub core_offset: f64,
    pub clutter_footprint: (f64, f64),
    pub clutter_height: (f64, f64),
    pub color_jitter: f64,
    /// Probability that a dataset camera turns toward the core object.
    pub view_bias: f64,
    /// Yaw spread (degrees) of biased views.
    pub view_spread: f64,
    /// Dataset camera heights above the floor, clamped to the room.
    pub camera_height: (f64, f64),
    /// Place nightstands, a wardrobe and a window around the core object.
    pub fixtures: bool,
    /// Per-wall base colors in [`FACES`] order (`-x`, `+x`, `-z`, `+z`),
    /// jittered per scene. Walls keep their role relative to the canonical
    /// core object, so the tint tells which way a view faces. `None` gives
    /// every wall the same jittered base.
    pub wall_tints: Option<[[f64; 3]; 4]>,
    pub camera: SamplerConfig,
    pub max_attempts: usize,
}

impl Default for ScenePriors {
    fn default() -> Self {
        ScenePriors {
            width: (3.0, 6.0),
            height: (2.4, 3.2),
            depth: (3.0, 6.0),
            clutter: (0, 6),
            core_width: (1.4, 2.0),
            core_length: (1.9, 2.2),
            core_height: (0.45, 0.8),
            core_offset: 0.5,
            clutter_footprint: (0.3, 0.8),
            clutter_height: (0.3, 1.2),
            color_jitter: 0.06,
            view_bias: 0.5,
            view_spread: 35.0,
            camera_height: (0.9, 1.8),
            fixtures: true,
            wall_tints: Some([
                [0.5, 0.74, 0.5],
                [0.86, 0.62, 0.42],
                [0.45, 0.55, 0.82],
                [0.8, 0.78, 0.74],
            ]),
            camera: SamplerConfig::default(),
            max_attempts: 1000,
        }
    }
}

impl ScenePriors {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("width", self.width),
            ("height", self.height),
            ("depth", self.depth),
            ("core_width", self.core_width),
            ("core_length", self.core_length),
            ("core_height", self.core_height),
            ("clutter_footprint", self.clutter_footprint),
            ("clutter_height", self.clutter_height),
            ("camera_height", self.camera_height),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::invalid(format!(
                    "prior {name} = ({lo}, {hi}) is not a positive range"
                )));
            }
        }
        if self.clutter.0 > self.clutter.1 {
            return Err(Error::invalid("clutter range is inverted"));
        }
        if self.core_width.1 + 0.2 > self.width.0.min(self.depth.0)
            || self.core_length.1 + 0.5 > self.width.0.min(self.depth.0)
        {
            return Err(Error::invalid("core object does not fit the smallest room"));
        }
        if self.core_height.1 >= self.height.0 || self.clutter_height.1 >= self.height.0 {
            return Err(Error::invalid("objects taller than the lowest ceiling"));
        }
        if !(0.0..=1.0).contains(&self.view_bias) {
            return Err(Error::invalid("view_bias must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Largest room the priors can produce.
    pub fn max_room(&self) -> RoomBox {
        RoomBox {
            width: self.width.1,
            height: self.height.1,
            depth: self.depth.1,
        }
    }

    /// Uniform room size draw.
    pub fn sample_room(&self, rng: &mut impl Rng) -> RoomBox {
        RoomBox {
            width: rng.random_range(self.width.0..=self.width.1),
            height: rng.random_range(self.height.0..=self.height.1),
            depth: rng.random_range(self.depth.0..=self.depth.1),
        }
    }
}

fn range(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn jitter(rng: &mut impl Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Samples a scene satisfying every placement invariant.
pub fn sample_scene(rng: &mut impl Rng, priors: &ScenePriors) -> Result<SceneSpec> {
    priors.validate()?;
    let room = priors.sample_room(rng);
    let j = priors.color_jitter;
    let wall = jitter(rng, [0.72, 0.70, 0.64], 2.0 * j);
    let mut surface_colors = [[0.0; 3]; 6];
    surface_colors[0] = jitter(rng, [0.45, 0.33, 0.24], 2.0 * j);
    surface_colors[1] = jitter(rng, [0.93, 0.93, 0.90], j);
    for (k, c) in surface_colors.iter_mut().skip(2).enumerate() {
        *c = match priors.wall_tints {
            Some(t) => jitter(rng, t[k], j),
            None => jitter(rng, wall, 0.5 * j),
        };
    }

    // Generated rooms are canonical: the core object backs onto the
    // z = -depth/2 wall and faces +z. Random width and depth cover the
    // other walls up to a rotation of the whole scene.
    let orient = CoreOrientation::canonical();
    let (cw, cl, ch) = (
        range(rng, priors.core_width),
        range(rng, priors.core_length),
        range(rng, priors.core_height),
    );
    let slack = 0.5 * (room.width - cw).max(0.0) * priors.core_offset;
    let offset = if slack > 0.0 {
        rng.random_range(-slack..=slack)
    } else {
        0.0
    };
    let z0 = -0.5 * room.depth;
    let core_box = BoxObject {
        min: [offset - 0.5 * cw, 0.0, z0],
        max: [offset + 0.5 * cw, ch, z0 + cl],
        color: jitter(rng, [0.25, 0.38, 0.72], j),
    };
    let core = CoreObject {
        bbox: core_box,
        front: orient.front.into(),
        right: orient.right.into(),
    };

    let fixtures = if priors.fixtures {
        place_fixtures(rng, &room, &core_box, j)
    } else {
        Vec::new()
    };

    let n_clutter = rng.random_range(priors.clutter.0..=priors.clutter.1);
    let mut clutter: Vec<BoxObject> = Vec::with_capacity(n_clutter);
    let mut attempts = 0;
    while clutter.len() < n_clutter {
        attempts += 1;
        if attempts > priors.max_attempts {
            return Err(Error::RejectionExhausted {
                attempts: priors.max_attempts,
                detail: format!(
                    "placed {} of {n_clutter} clutter boxes in room {:?}",
                    clutter.len(),
                    room.size()
                ),
            });
        }
        let (sx, sz) = (
            range(rng, priors.clutter_footprint),
            range(rng, priors.clutter_footprint),
        );
        let h = range(rng, priors.clutter_height);
        let (hx, hz) = (0.5 * (room.width - sx), 0.5 * (room.depth - sz));
        if hx <= 0.0 || hz <= 0.0 {
            continue;
        }
        let (cx, cz) = (rng.random_range(-hx..=hx), rng.random_range(-hz..=hz));
        let candidate = BoxObject {
            min: [cx - 0.5 * sx, 0.0, cz - 0.5 * sz],
            max: [cx + 0.5 * sx, h, cz + 0.5 * sz],
            color: [rng.random(), rng.random(), rng.random()],
        };
        if candidate.overlaps(&core_box)
            || fixtures
                .iter()
                .chain(&clutter)
                .any(|c| c.overlaps(&candidate))
        {
            continue;
        }
        clutter.push(candidate);
    }
    let scene = SceneSpec {
        room,
        core,
        clutter,
        fixtures,
        surface_colors,
    };
    scene.check()?;
    Ok(scene)
}

/// Role-consistent furniture for a canonical core object. Each piece is
/// skipped when it does not fit, so every room stays valid.
fn place_fixtures(rng: &mut impl Rng, room: &RoomBox, core: &BoxObject, j: f64) -> Vec<BoxObject> {
    let (hx, hz) = (0.5 * room.width, 0.5 * room.depth);
    let mut out = Vec::with_capacity(4);
    // Nightstands touch the core object on both sides of its head.
    let (sw, sd, sh) = (
        range(rng, (0.4, 0.55)),
        range(rng, (0.35, 0.45)),
        range(rng, (0.45, 0.6)),
    );
    let wood = jitter(rng, [0.55, 0.36, 0.2], j);
    for (lo, hi) in [
        (core.min[0] - sw, core.min[0]),
        (core.max[0], core.max[0] + sw),
    ] {
        if lo >= -hx && hi <= hx {
            out.push(BoxObject {
                min: [lo, 0.0, -hz],
                max: [hi, sh, -hz + sd],
                color: wood,
            });
        }
    }
    // Wardrobe on the core object's right (the -x wall), in the foot half.
    let (ww, wd) = (range(rng, (0.9, 1.2)), range(rng, (0.5, 0.6)));
    let wh = range(rng, (1.8, 2.1)).min(room.height - 0.2);
    // Beside the core object when there is room, otherwise past its foot.
    let beside = -hx + wd < core.min[0] - sw - 0.1;
    let z_hi = hz - ww - 0.05;
    // Prefer the foot half of the room.
    let z_lo = if beside {
        (-hz + sd + 0.1).max(z_hi.min(0.0))
    } else {
        core.max[2] + 0.1
    };
    if z_hi >= z_lo {
        let z = rng.random_range(z_lo..=z_hi);
        out.push(BoxObject {
            min: [-hx, 0.0, z],
            max: [-hx + wd, wh, z + ww],
            color: jitter(rng, [0.92, 0.9, 0.86], j),
        });
    }
    // A thin bright window panel on the foot wall, above the floor band.
    let ww = range(rng, (1.0, 1.6)).min(room.width - 0.4);
    let slack = 0.5 * (room.width - ww) - 0.2;
    let x = if slack > 0.0 {
        rng.random_range(-slack..=slack)
    } else {
        0.0
    };
    let (y0, y1) = (1.05, (room.height - 0.3).min(2.1));
    if y1 > y0 + 0.4 {
        out.push(BoxObject {
            min: [x - 0.5 * ww, y0, hz - 0.03],
            max: [x + 0.5 * ww, y1, hz],
            color: jitter(rng, [0.8, 0.92, 1.0], 0.5 * j),
        });
    }
    out
}

/// Samples a dataset camera inside the room and outside every object:
/// position uniform over the floor within the height prior (respecting the
/// sampler margin), yaw uniform or, with
/// probability `view_bias`, spread around the direction of the core object.
pub fn sample_camera(
    scene: &SceneSpec,
    priors: &ScenePriors,
    rng: &mut impl Rng,
) -> Result<GlobalCamera> {
    let cam_cfg = &priors.camera;
    let m = cam_cfg.position_margin;
    let (lo, hi) = (scene.room.min_corner(), scene.room.max_corner());
    for _ in 0..priors.max_attempts {
        let y_lo = (lo.y + priors.camera_height.0).clamp(lo.y + m, hi.y - m);
        let y_hi = (lo.y + priors.camera_height.1).clamp(y_lo, hi.y - m);
        let p = Vector3::new(
            rng.random_range(lo.x + m..hi.x - m),
            rng.random_range(y_lo..=y_hi),
            rng.random_range(lo.z + m..hi.z - m),
        );
        if scene.boxes().any(|b| grown(b, m).contains(&p)) {
            continue;
        }
        let yaw = if rng.random::<f64>() < priors.view_bias {
            let to = scene.core.bbox.center() - p;
            // Forward is (-sin(yaw), 0, -cos(yaw)).
            let toward = (-to.x).atan2(-to.z).to_degrees();
            let spread = Normal::new(0.0, priors.view_spread).expect("finite spread");
            (toward + spread.sample(rng)).rem_euclid(360.0)
        } else {
            rng.random_range(0.0..360.0)
        };
        let yaw = if yaw >= 360.0 { 0.0 } else { yaw };
        return Ok(GlobalCamera {
            position: [p.x, p.y, p.z],
            yaw,
            pitch: rng.random_range(cam_cfg.pitch_range.0..=cam_cfg.pitch_range.1),
            roll: rng.random_range(cam_cfg.roll_range.0..=cam_cfg.roll_range.1),
            fov: cam_cfg.fov.sample(rng),
        });
    }
    Err(Error::RejectionExhausted {
        attempts: priors.max_attempts,
        detail: "no free camera position".into(),
    })
}

fn grown(b: &BoxObject, m: f64) -> BoxObject {
    BoxObject {
        min: b.min.map(|v| v - m),
        max: b.max.map(|v| v + m),
        color: b.color,
    }
}

/// Exact flat-shaded render of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleView {
    pub resolution: usize,
    /// `[3, W, W]` channel-major.
    pub rgb: Vec<f64>,
    /// First-hit distance along each unit ray.
    pub depth: Vec<f64>,
    /// Object pixels.
    pub foreground: Vec<bool>,
    pub visible_corners: Vec<usize>,
}

const BOX_SHADE: [f64; 3] = [0.82, 1.0, 0.68];

/// Ray-casts room surfaces and boxes; object faces are shaded by axis.
pub fn render_oracle(
    scene: &SceneSpec,
    cam: &GlobalCamera,
    resolution: usize,
) -> Result<OracleView> {
    let p = cam.position();
    if !scene.room.contains_strict(&p) {
        return Err(Error::invalid("camera is outside the room"));
    }
    if scene.boxes().any(|b| b.contains(&p)) {
        return Err(Error::invalid("camera is inside an object"));
    }
    let rays = camera_rays(cam, (resolution, resolution))?;
    let n = resolution * resolution;
    let mut rgb = vec![0.0; 3 * n];
    let mut depth = vec![0.0; n];
    let mut foreground = vec![false; n];
    let (lo, hi) = (scene.room.min_corner(), scene.room.max_corner());
    for i in 0..n {
        let (o, d) = (rays.origins[i], rays.directions[i]);
        let mut t = exit_distance(&o, &d, &scene.room);
        let hit = o + t * d;
        // Which surface: the coordinate closest to a bound.
        let mut face = 0;
        let mut best = f64::INFINITY;
        for (f, (axis, bound)) in [
            (1, lo.y),
            (1, hi.y),
            (0, lo.x),
            (0, hi.x),
            (2, lo.z),
            (2, hi.z),
        ]
        .iter()
        .enumerate()
        {
            let e = (hit[*axis] - bound).abs();
            if e < best {
                best = e;
                face = f;
            }
        }
        let mut color = scene.surface_colors[face];
        for b in scene.boxes() {
            if let Some((te, axis)) = b.ray_entry(&o, &d) {
                if te < t {
                    t = te;
                    color = b.color.map(|c| c * BOX_SHADE[axis]);
                    foreground[i] = true;
                }
            }
        }
        depth[i] = t;
        for c in 0..3 {
            rgb[c * n + i] = color[c];
        }
    }
    Ok(OracleView {
        resolution,
        rgb,
        depth,
        foreground,
        visible_corners: scene.anchor_system()?.visible_corners(cam),
    })
}
