//! Tri-plane radiance field and differentiable volume rendering.
//!
//! Three axis-aligned feature planes span the maximum room volume. A point
//! is bilinearly sampled on each plane, the three feature vectors are
//! summed and a small MLP decodes density (softplus) and color (sigmoid).

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lpa::{Rays, RoomBox};
use crate::tensor::{sigmoid_scalar, softplus_scalar};
use crate::tensor::{Graph, Tensor, Var};

pub const NEUTRAL_COLOR: f64 = 0.5;

/// Geometry shared by every field: plane resolution, channel count and the
/// volume the planes cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneLayout {
    pub resolution: usize,
    pub channels: usize,
    pub max_room: RoomBox,
}

impl PlaneLayout {
    pub fn plane_channels(&self) -> usize {
        3 * self.channels
    }

    /// Normalized `[0, 1]` coordinates of a point in the maximum volume, or
    /// `None` outside it.
    fn normalized(&self, p: &Vector3<f64>) -> Option<[f64; 3]> {
        let (lo, hi) = (self.max_room.min_corner(), self.max_room.max_corner());
        let mut u = [0.0; 3];
        for i in 0..3 {
            let v = (p[i] - lo[i]) / (hi[i] - lo[i]);
            if !(0.0..=1.0).contains(&v) {
                return None;
            }
            u[i] = v;
        }
        Some(u)
    }

    /// Bilinear taps for the three planes: `(flat index within one field's
    /// planes, weight)`, 12 taps per point. Plane 0 is (x, y), plane 1 is
    /// (x, z), plane 2 is (z, y); the first coordinate runs along columns.
    pub fn taps(&self, p: &Vector3<f64>) -> Option<[(usize, f64); 12]> {
        let u = self.normalized(p)?;
        let n = self.resolution;
        let c = self.channels;
        let axis = |v: f64| -> (usize, f64) {
            let g = v * (n - 1) as f64;
            let i = (g.floor() as usize).min(n.saturating_sub(2));
            (i, g - i as f64)
        };
        let pairs = [(u[0], u[1]), (u[0], u[2]), (u[2], u[1])];
        let mut taps = [(0usize, 0.0f64); 12];
        for (pi, &(cu, cv)) in pairs.iter().enumerate() {
            let (ix, fx) = axis(cu);
            let (iy, fy) = axis(cv);
            // Index of channel 0; channel ch adds ch * n * n.
            let base = pi * c * n * n;
            let corners = [
                (iy, ix, (1.0 - fx) * (1.0 - fy)),
                (iy, ix + 1, fx * (1.0 - fy)),
                (iy + 1, ix, (1.0 - fx) * fy),
                (iy + 1, ix + 1, fx * fy),
            ];
            for (k, &(r, col, w)) in corners.iter().enumerate() {
                let (r, col) = (r.min(n - 1), col.min(n - 1));
                taps[pi * 4 + k] = (base + r * n + col, w);
            }
        }
        Some(taps)
    }
}

/// Decoder weights: a stack of `(weight [in, out], bias [out])` layers with
/// softplus between them; the final layer has 4 outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderWeights {
    pub layers: Vec<(Tensor, Tensor)>,
    /// Multiplier applied to the activated density.
    pub density_scale: f64,
}

impl DecoderWeights {
    /// Density and color for one summed feature vector.
    pub fn decode(&self, features: &[f64]) -> (f64, [f64; 3]) {
        let mut h = features.to_vec();
        for (li, (w, b)) in self.layers.iter().enumerate() {
            let (fin, fout) = (w.shape[0], w.shape[1]);
            let mut o = b.data.clone();
            for i in 0..fin {
                let hi = h[i];
                for j in 0..fout {
                    o[j] += hi * w.data[i * fout + j];
                }
            }
            if li + 1 < self.layers.len() {
                o.iter_mut().for_each(|v| *v = softplus_scalar(*v));
            }
            h = o;
        }
        (
            self.density_scale * softplus_scalar(h[0]),
            [
                sigmoid_scalar(h[1]),
                sigmoid_scalar(h[2]),
                sigmoid_scalar(h[3]),
            ],
        )
    }
}

/// A radiance field: feature planes `[3C, N, N]`, decoder, and the room it
/// was generated for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriPlaneField {
    pub layout: PlaneLayout,
    pub planes: Tensor,
    pub decoder: DecoderWeights,
    pub room: RoomBox,
}

impl TriPlaneField {
    /// Summed tri-plane features at a point (zeros outside the volume).
    pub fn features(&self, p: &Vector3<f64>) -> Option<Vec<f64>> {
        let taps = self.layout.taps(p)?;
        let (c, nn) = (
            self.layout.channels,
            self.layout.resolution * self.layout.resolution,
        );
        let mut f = vec![0.0; c];
        for &(idx, w) in &taps {
            for (ch, fv) in f.iter_mut().enumerate() {
                *fv += w * self.planes.data[idx + ch * nn];
            }
        }
        Some(f)
    }

    /// Density and color at a point. Outside the maximum volume the field is
    /// empty with a neutral color.
    pub fn sample(&self, p: &Vector3<f64>) -> (f64, [f64; 3]) {
        match self.features(p) {
            Some(f) => self.decoder.decode(&f),
            None => (0.0, [NEUTRAL_COLOR; 3]),
        }
    }

    pub fn density_at(&self, p: &Vector3<f64>) -> f64 {
        self.sample(p).0
    }
}

pub fn sample_field(field: &TriPlaneField, point: &Vector3<f64>) -> (f64, [f64; 3]) {
    field.sample(point)
}

pub fn density_at(field: &TriPlaneField, global_position: &Vector3<f64>) -> f64 {
    field.density_at(global_position)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub steps: usize,
    pub near: f64,
    pub far: f64,
    pub background: f64,
}

impl RenderConfig {
    /// Defaults for a given maximum room: far is the box diagonal.
    pub fn for_room(max_room: &RoomBox, steps: usize) -> Self {
        RenderConfig {
            steps,
            near: 0.05,
            far: max_room.diagonal(),
            background: NEUTRAL_COLOR,
        }
    }
}

/// Rendered images, each `W x W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub resolution: usize,
    /// `[3, W, W]` channel-major, values in `[0, 1]`.
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub opacity: Vec<f64>,
}

impl RenderOutput {
    pub fn pixel(&self, i: usize) -> [f64; 3] {
        let n = self.resolution * self.resolution;
        [self.rgb[i], self.rgb[n + i], self.rgb[2 * n + i]]
    }
}

/// Sample positions along a batch of rays.
#[derive(Debug, Clone)]
pub struct RaySamples {
    pub batch: usize,
    pub rays_per_image: usize,
    pub steps: usize,
    /// `t` per sample, `[B * R * S]`.
    pub t: Vec<f64>,
    /// Bin width per ray, `[B * R]`.
    pub delta: Vec<f64>,
    /// 12 taps per sample, `None` outside the volume.
    pub taps: Vec<Option<[(usize, f64); 12]>>,
}

impl RaySamples {
    /// Stratified samples on `[near, ray_far]` for every ray; `ray_far`
    /// defaults to `config.far`. Without an RNG the samples sit at bin
    /// midpoints.
    pub fn new(
        layout: &PlaneLayout,
        rays: &[&Rays],
        config: &RenderConfig,
        ray_far: Option<&[Vec<f64>]>,
        mut rng: Option<&mut dyn rand::RngCore>,
    ) -> Self {
        let batch = rays.len();
        let r = rays[0].len();
        let s = config.steps;
        let mut t = Vec::with_capacity(batch * r * s);
        let mut delta = Vec::with_capacity(batch * r);
        let mut taps = Vec::with_capacity(batch * r * s);
        for (bi, set) in rays.iter().enumerate() {
            assert_eq!(set.len(), r, "all images in a batch share a resolution");
            for ri in 0..r {
                let far = ray_far.map_or(config.far, |f| {
                    f[bi][ri].clamp(config.near + 1e-6, config.far)
                });
                let step = (far - config.near) / s as f64;
                delta.push(step);
                let (o, d) = (set.origins[ri], set.directions[ri]);
                for si in 0..s {
                    let jitter = match rng.as_deref_mut() {
                        Some(g) => g.random::<f64>(),
                        None => 0.5,
                    };
                    let ti = config.near + (si as f64 + jitter) * step;
                    t.push(ti);
                    taps.push(layout.taps(&(o + ti * d)));
                }
            }
        }
        RaySamples {
            batch,
            rays_per_image: r,
            steps: s,
            t,
            delta,
            taps,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Graph handles of a batch of fields: planes `[B, 3C, N, N]` and decoder
/// layers.
#[derive(Debug, Clone)]
pub struct FieldVars {
    pub planes: Var,
    pub decoder: Vec<(Var, Var)>,
    pub density_scale: f64,
}

/// Graph handles of a rendered batch.
#[derive(Debug, Clone, Copy)]
pub struct RenderVars {
    /// `[B, 3, W, W]`.
    pub rgb: Var,
    /// `[B, 1, W, W]`.
    pub depth: Var,
    /// `[B, 1, W, W]`.
    pub opacity: Var,
}

/// Gathers summed tri-plane features for every sample: `[B * R * S, C]`.
pub fn triplane_gather(
    g: &mut Graph,
    planes: Var,
    layout: &PlaneLayout,
    samples: &RaySamples,
) -> Var {
    let pv = g.value(planes);
    let (c, n) = (layout.channels, layout.resolution);
    assert_eq!(
        pv.shape,
        vec![samples.batch, 3 * c, n, n],
        "plane tensor shape"
    );
    let per_field = 3 * c * n * n;
    let per_image = samples.rays_per_image * samples.steps;
    let nn = n * n;
    let m = samples.len();
    let mut out = vec![0.0; m * c];
    for (i, taps) in samples.taps.iter().enumerate() {
        let Some(taps) = taps else { continue };
        let base = (i / per_image) * per_field;
        let row = &mut out[i * c..(i + 1) * c];
        for &(idx, w) in taps {
            let src = base + idx;
            for (ch, o) in row.iter_mut().enumerate() {
                *o += w * pv.data[src + ch * nn];
            }
        }
    }
    let taps = samples.taps.clone();
    let total = samples.batch * per_field;
    g.custom(
        &[planes],
        Tensor::new(vec![m, c], out),
        Box::new(move |ctx| {
            let mut d = vec![0.0; total];
            for (i, taps) in taps.iter().enumerate() {
                let Some(taps) = taps else { continue };
                let base = (i / per_image) * per_field;
                let grow = &ctx.grad[i * c..(i + 1) * c];
                for &(idx, w) in taps {
                    let dst = base + idx;
                    for (ch, gv) in grow.iter().enumerate() {
                        d[dst + ch * nn] += w * gv;
                    }
                }
            }
            vec![Some(d)]
        }),
    )
}

/// Activation head on raw decoder outputs `[M, 4]`: softplus density
/// (times `scale`) and sigmoid color; samples outside the volume become
/// empty and neutral.
pub fn decoder_head(g: &mut Graph, raw: Var, inside: Vec<bool>, scale: f64) -> Var {
    let rv = g.value(raw);
    let m = rv.shape[0];
    assert_eq!(rv.shape[1], 4);
    let mut out = vec![0.0; m * 4];
    for i in 0..m {
        if inside[i] {
            out[i * 4] = scale * softplus_scalar(rv.data[i * 4]);
            for k in 1..4 {
                out[i * 4 + k] = sigmoid_scalar(rv.data[i * 4 + k]);
            }
        } else {
            for k in 1..4 {
                out[i * 4 + k] = NEUTRAL_COLOR;
            }
        }
    }
    g.custom(
        &[raw],
        Tensor::new(vec![m, 4], out),
        Box::new(move |ctx| {
            let (x, y) = (&ctx.inputs[0].data, &ctx.out.data);
            let mut d = vec![0.0; m * 4];
            for i in 0..m {
                if !inside[i] {
                    continue;
                }
                d[i * 4] = ctx.grad[i * 4] * scale * sigmoid_scalar(x[i * 4]);
                for k in 1..4 {
                    let s = y[i * 4 + k];
                    d[i * 4 + k] = ctx.grad[i * 4 + k] * s * (1.0 - s);
                }
            }
            vec![Some(d)]
        }),
    )
}

/// Alpha compositing of `[M, 4]` (density, r, g, b) samples into
/// `[B, 5, W, W]` (r, g, b, depth, opacity).
///
/// `w_i = T_i (1 - exp(-sigma_i delta))`, `T_i = exp(-sum_{j<i} sigma_j delta)`;
/// color and depth composite onto `background` and `far` respectively.
pub fn composite(
    g: &mut Graph,
    dens_col: Var,
    samples: &RaySamples,
    background: f64,
    far: f64,
) -> Var {
    let dv = g.value(dens_col);
    let (b, r, s) = (samples.batch, samples.rays_per_image, samples.steps);
    let w = (r as f64).sqrt().round() as usize;
    assert_eq!(w * w, r, "composite expects square images");
    assert_eq!(dv.shape, vec![b * r * s, 4]);
    let mut out = vec![0.0; b * 5 * r];
    let mut weights = vec![0.0; b * r * s];
    let mut trans_after = vec![0.0; b * r * s];
    for bi in 0..b {
        for ri in 0..r {
            let ray = bi * r + ri;
            let delta = samples.delta[ray];
            let mut log_t: f64 = 0.0;
            let mut acc = [0.0; 5];
            for si in 0..s {
                let idx = ray * s + si;
                let sigma = dv.data[idx * 4];
                let t_before = log_t.exp();
                log_t -= sigma * delta;
                let t_after = log_t.exp();
                let wi = t_before - t_after;
                weights[idx] = wi;
                trans_after[idx] = t_after;
                for k in 0..3 {
                    acc[k] += wi * dv.data[idx * 4 + 1 + k];
                }
                acc[3] += wi * samples.t[idx];
                acc[4] += wi;
            }
            let rest = 1.0 - acc[4];
            let base = bi * 5 * r;
            for k in 0..3 {
                out[base + k * r + ri] = acc[k] + rest * background;
            }
            out[base + 3 * r + ri] = acc[3] + rest * far;
            out[base + 4 * r + ri] = acc[4];
        }
    }
    let t_samples = samples.t.clone();
    let deltas = samples.delta.clone();
    g.custom(
        &[dens_col],
        Tensor::new(vec![b, 5, w, w], out),
        Box::new(move |ctx| {
            let x = &ctx.inputs[0].data;
            let mut d = vec![0.0; b * r * s * 4];
            let mut q = vec![0.0; s];
            for bi in 0..b {
                for ri in 0..r {
                    let ray = bi * r + ri;
                    let base = bi * 5 * r;
                    let gr = [
                        ctx.grad[base + ri],
                        ctx.grad[base + r + ri],
                        ctx.grad[base + 2 * r + ri],
                        ctx.grad[base + 3 * r + ri],
                        ctx.grad[base + 4 * r + ri],
                    ];
                    // q_i: upstream-weighted value of sample i relative to
                    // the fill value of each output.
                    for si in 0..s {
                        let idx = ray * s + si;
                        let mut v = 0.0;
                        for k in 0..3 {
                            v += gr[k] * (x[idx * 4 + 1 + k] - background);
                        }
                        v += gr[3] * (t_samples[idx] - far) + gr[4];
                        q[si] = v;
                    }
                    let delta = deltas[ray];
                    let mut suffix = 0.0;
                    for si in (0..s).rev() {
                        let idx = ray * s + si;
                        d[idx * 4] = delta * (trans_after[idx] * q[si] - suffix);
                        suffix += weights[idx] * q[si];
                        for k in 0..3 {
                            d[idx * 4 + 1 + k] = gr[k] * weights[idx];
                        }
                    }
                }
            }
            vec![Some(d)]
        }),
    )
}

/// Full differentiable render of a batch of fields, one ray set per field.
pub fn render_graph(
    g: &mut Graph,
    fields: &FieldVars,
    layout: &PlaneLayout,
    samples: &RaySamples,
    config: &RenderConfig,
) -> RenderVars {
    let mut h = triplane_gather(g, fields.planes, layout, samples);
    let nl = fields.decoder.len();
    for (li, &(w, b)) in fields.decoder.iter().enumerate() {
        h = g.linear(h, w, b);
        if li + 1 < nl {
            h = g.softplus(h);
        }
    }
    let inside = samples.taps.iter().map(Option::is_some).collect();
    let dc = decoder_head(g, h, inside, fields.density_scale);
    let out = composite(g, dc, samples, config.background, config.far);
    RenderVars {
        rgb: g.slice_channels(out, 0, 3),
        depth: g.slice_channels(out, 3, 1),
        opacity: g.slice_channels(out, 4, 1),
    }
}

/// Graph handles for one concrete field, with every tensor as a constant
/// or (when `trainable`) as a gradient leaf.
pub fn field_vars(g: &mut Graph, field: &TriPlaneField, trainable: bool) -> FieldVars {
    let mut planes = field.planes.clone();
    let mut shape = vec![1];
    shape.extend_from_slice(&planes.shape);
    planes.shape = shape;
    let planes = if trainable {
        g.leaf(planes)
    } else {
        g.constant(planes)
    };
    let decoder = field
        .decoder
        .layers
        .iter()
        .map(|(w, b)| {
            if trainable {
                (g.leaf(w.clone()), g.leaf(b.clone()))
            } else {
                (g.constant(w.clone()), g.constant(b.clone()))
            }
        })
        .collect();
    FieldVars {
        planes,
        decoder,
        density_scale: field.decoder.density_scale,
    }
}

/// Renders one field along one ray set with midpoint samples.
pub fn render(field: &TriPlaneField, rays: &Rays, config: &RenderConfig) -> RenderOutput {
    render_bounded(field, rays, config, None)
}

/// Like [`render`] with an optional per-ray far bound for sampling.
pub fn render_bounded(
    field: &TriPlaneField,
    rays: &Rays,
    config: &RenderConfig,
    ray_far: Option<&[f64]>,
) -> RenderOutput {
    let mut g = Graph::new();
    let fv = field_vars(&mut g, field, false);
    let bounds = ray_far.map(|f| vec![f.to_vec()]);
    let samples = RaySamples::new(&field.layout, &[rays], config, bounds.as_deref(), None);
    let out = render_graph(&mut g, &fv, &field.layout, &samples, config);
    RenderOutput {
        resolution: rays.resolution,
        rgb: g.value(out.rgb).data.clone(),
        depth: g.value(out.depth).data.clone(),
        opacity: g.value(out.opacity).data.clone(),
    }
}

/// Per-sample compositing weights of one ray (test and diagnostics helper).
pub fn ray_weights(sigmas: &[f64], delta: f64) -> (Vec<f64>, f64) {
    let mut log_t: f64 = 0.0;
    let mut w = Vec::with_capacity(sigmas.len());
    for &s in sigmas {
        let before = f64::exp(log_t);
        log_t -= s * delta;
        w.push(before - log_t.exp());
    }
    (w, log_t.exp())
}

/// Random field with small features, for tests and benches.
pub fn random_field(
    layout: PlaneLayout,
    hidden: usize,
    room: RoomBox,
    rng: &mut impl Rng,
) -> TriPlaneField {
    use rand_distr::{Distribution, Normal};
    let n = layout.resolution;
    let nd = Normal::new(0.0, 0.5).unwrap();
    let planes = Tensor::new(
        vec![layout.plane_channels(), n, n],
        (0..layout.plane_channels() * n * n)
            .map(|_| nd.sample(rng))
            .collect(),
    );
    let dims = [layout.channels, hidden, 4];
    let layers = dims
        .windows(2)
        .map(|d| {
            let std = (1.0 / d[0] as f64).sqrt();
            let wd = Normal::new(0.0, std).unwrap();
            (
                Tensor::new(
                    vec![d[0], d[1]],
                    (0..d[0] * d[1]).map(|_| wd.sample(rng)).collect(),
                ),
                Tensor::zeros(&[d[1]]),
            )
        })
        .collect();
    TriPlaneField {
        layout,
        planes,
        decoder: DecoderWeights {
            layers,
            density_scale: 1.0,
        },
        room,
    }
}
