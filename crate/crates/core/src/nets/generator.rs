use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Conv, Dense, ModelConfig};
use crate::error::{Error, Result};
use crate::field::{DecoderWeights, FieldVars, PlaneLayout, TriPlaneField};
use crate::lpa::RoomBox;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub(crate) const GEOMETRY_CHANNELS: usize = 12;

/// Per-level room-size feature maps, `[1, width, s, s]` for s = 4 .. N.
#[derive(Debug, Clone, PartialEq)]
pub struct RoomSizeGrid {
    pub levels: Vec<Tensor>,
}

/// Fixed geometric description of the room on each plane's pixel grid,
/// `[B, 12, s, s]`.
///
/// Pixels use the same corner-aligned mapping as the output planes. For
/// each plane: the distance to the nearest wall along each in-plane axis
/// and their minimum (positive inside, negative outside, in units of half
/// the maximum extent), followed by three channels of room size relative
/// to the maximum.
pub fn room_geometry_grid(rooms: &[RoomBox], max_room: &RoomBox, s: usize) -> Tensor {
    let (lo, hi) = (max_room.min_corner(), max_room.max_corner());
    let scale = 0.5 * max_room.width.max(max_room.depth).max(max_room.height);
    let coord =
        |axis: usize, i: usize| lo[axis] + (hi[axis] - lo[axis]) * i as f64 / (s - 1).max(1) as f64;
    let mut data = Vec::with_capacity(rooms.len() * GEOMETRY_CHANNELS * s * s);
    for room in rooms {
        let dist = |axis: usize, v: f64| -> f64 {
            match axis {
                0 => 0.5 * room.width - v.abs(),
                1 => v.min(room.height - v),
                _ => 0.5 * room.depth - v.abs(),
            }
        };
        // (column axis, row axis) per plane.
        for (ca, ra) in [(0, 1), (0, 2), (2, 1)] {
            let mut a = Vec::with_capacity(s * s);
            let mut b = Vec::with_capacity(s * s);
            for row in 0..s {
                for col in 0..s {
                    a.push(dist(ca, coord(ca, col)) / scale);
                    b.push(dist(ra, coord(ra, row)) / scale);
                }
            }
            let m: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect();
            data.extend(a);
            data.extend(b);
            data.extend(m);
        }
        for (v, m) in room.size().iter().zip(max_room.size()) {
            data.extend(std::iter::repeat_n(v / m, s * s));
        }
    }
    Tensor::new(vec![rooms.len(), GEOMETRY_CHANNELS, s, s], data)
}

/// Learned expansion of the geometry grids into per-level feature maps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSizeEncoder {
    levels: Vec<(Conv, Conv)>,
}

impl RoomSizeEncoder {
    fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let w = config.gen_width;
        let levels = (0..config.gen_levels())
            .map(|l| {
                (
                    Conv::new(
                        store,
                        &format!("room{l}.a"),
                        GEOMETRY_CHANNELS,
                        w,
                        1,
                        1,
                        rng,
                    ),
                    Conv::new(store, &format!("room{l}.b"), w, w, 3, 1, rng),
                )
            })
            .collect();
        RoomSizeEncoder { levels }
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        trainable: bool,
        rooms: &[RoomBox],
        max_room: &RoomBox,
    ) -> Vec<Var> {
        self.levels
            .iter()
            .enumerate()
            .map(|(l, (a, b))| {
                let grid = g.constant(room_geometry_grid(rooms, max_room, 4 << l));
                let h = a.forward_act(g, store, trainable, grid);
                b.forward(g, store, trainable, h)
            })
            .collect()
    }
}

/// Boundary-aware tri-plane generator conditioned on a latent code and the
/// room size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub config: ModelConfig,
    pub store: ParamStore,
    mapping: Dense,
    levels: Vec<(Conv, Conv)>,
    encoder: RoomSizeEncoder,
    to_planes: Conv,
    decoder: Vec<Dense>,
}

pub const GENERATOR_TAG: u32 = 1;

impl Generator {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(GENERATOR_TAG);
        let w = config.gen_width;
        let mapping = Dense::new(
            &mut store,
            "mapping",
            config.latent_dim + 3,
            w * 16,
            1.0,
            rng,
        );
        let levels = (0..config.gen_levels())
            .map(|l| {
                (
                    Conv::new(&mut store, &format!("level{l}.a"), w, w, 3, 1, rng),
                    Conv::new(&mut store, &format!("level{l}.b"), w, w, 3, 1, rng),
                )
            })
            .collect();
        let encoder = RoomSizeEncoder::new(&mut store, config, rng);
        let to_planes = Conv::new(
            &mut store,
            "to_planes",
            w,
            3 * config.plane_channels,
            1,
            1,
            rng,
        );
        let mut dims = vec![config.plane_channels];
        dims.extend(std::iter::repeat_n(
            config.decoder_hidden,
            config.decoder_hidden_layers,
        ));
        dims.push(4);
        let decoder = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Dense::new(&mut store, &format!("decoder{i}"), d[0], d[1], 1.0, rng))
            .collect();
        Ok(Generator {
            config: config.clone(),
            store,
            mapping,
            levels,
            encoder,
            to_planes,
            decoder,
        })
    }

    pub fn layout(&self) -> PlaneLayout {
        PlaneLayout {
            resolution: self.config.plane_resolution,
            channels: self.config.plane_channels,
            max_room: self.config.max_room().expect("validated config"),
        }
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn sample_latent(&self, rng: &mut impl Rng) -> Vec<f64> {
        (0..self.config.latent_dim)
            .map(|_| StandardNormal.sample(rng))
            .collect()
    }

    fn check_rooms(&self, rooms: &[RoomBox]) -> Result<RoomBox> {
        let max = self.config.max_room()?;
        for r in rooms {
            r.validate()?;
            if !r.fits_within(&max) {
                return Err(Error::invalid(format!(
                    "room {:?} exceeds the maximum {:?}",
                    r.size(),
                    max.size()
                )));
            }
        }
        Ok(max)
    }

    /// Expands one room size into its per-level feature maps.
    pub fn encode_room_size(&self, z_r: &RoomBox) -> Result<RoomSizeGrid> {
        let max = self.check_rooms(std::slice::from_ref(z_r))?;
        let mut g = Graph::new();
        let levels =
            self.encoder
                .forward(&mut g, &self.store, false, std::slice::from_ref(z_r), &max);
        Ok(RoomSizeGrid {
            levels: levels.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// Batched forward pass. `latents` is `B x latent_dim` row-major.
    pub fn forward(
        &self,
        g: &mut Graph,
        trainable: bool,
        latents: &[f64],
        rooms: &[RoomBox],
    ) -> Result<FieldVars> {
        let max = self.check_rooms(rooms)?;
        let (b, dz, w) = (rooms.len(), self.config.latent_dim, self.config.gen_width);
        if latents.len() != b * dz {
            return Err(Error::invalid(format!(
                "expected {} latent values, got {}",
                b * dz,
                latents.len()
            )));
        }
        let mut input = Vec::with_capacity(b * (dz + 3));
        for (i, room) in rooms.iter().enumerate() {
            input.extend_from_slice(&latents[i * dz..(i + 1) * dz]);
            for (v, m) in room.size().iter().zip(max.size()) {
                input.push(2.0 * v / m - 1.0);
            }
        }
        let z = g.constant(Tensor::new(vec![b, dz + 3], input));
        let h = self.mapping.forward(g, &self.store, trainable, z);
        let h = g.leaky_relu(h, super::LEAK);
        let mut h = g.reshape(h, &[b, w, 4, 4]);
        let room_feats = self.encoder.forward(g, &self.store, trainable, rooms, &max);
        for (l, ((a, c), rf)) in self.levels.iter().zip(room_feats).enumerate() {
            if l > 0 {
                h = g.upsample2x(h);
            }
            h = a.forward_act(g, &self.store, trainable, h);
            h = g.add(h, rf);
            h = c.forward_act(g, &self.store, trainable, h);
        }
        let planes = self.to_planes.forward(g, &self.store, trainable, h);
        let decoder = self
            .decoder
            .iter()
            .map(|d| {
                (
                    g.param(&self.store, d.w, trainable),
                    g.param(&self.store, d.b, trainable),
                )
            })
            .collect();
        Ok(FieldVars {
            planes,
            decoder,
            density_scale: 1.0,
        })
    }

    /// One field as a plain value.
    pub fn generate(&self, z_s: &[f64], z_r: &RoomBox) -> Result<TriPlaneField> {
        let mut g = Graph::new();
        let fv = self.forward(&mut g, false, z_s, std::slice::from_ref(z_r))?;
        let mut planes = g.value(fv.planes).clone();
        planes.shape.remove(0);
        Ok(TriPlaneField {
            layout: self.layout(),
            planes,
            decoder: DecoderWeights {
                layers: self
                    .decoder
                    .iter()
                    .map(|d| (self.store.get(d.w).clone(), self.store.get(d.b).clone()))
                    .collect(),
                density_scale: fv.density_scale,
            },
            room: *z_r,
        })
    }
}
