use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::{field_vars, render_graph, RaySamples, RenderConfig, TriPlaneField};
use crate::lpa::{camera_rays, wrap_yaw, GlobalCamera, Rays};
use crate::synthroom::quantize_image;
use crate::tensor::Graph;

/// RGB (channel-major) and depth of one rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
}

fn render_rays(
    field: &TriPlaneField,
    rays: &Rays,
    config: &RenderConfig,
    width: usize,
    height: usize,
) -> RenderedView {
    let mut g = Graph::new();
    let fv = field_vars(&mut g, field, false);
    let samples = RaySamples::new(&field.layout, &[rays], config, None, None);
    let out = render_graph(&mut g, &fv, &field.layout, &samples, config);
    RenderedView {
        width,
        height,
        rgb: g.value(out.rgb).data.clone(),
        depth: g.value(out.depth).data.clone(),
    }
}

/// Equirectangular 360 degree sweep from `position`; width is twice the height.
pub fn panorama(
    field: &TriPlaneField,
    position: Vector3<f64>,
    height: usize,
    config: &RenderConfig,
) -> Result<RenderedView> {
    if height == 0 {
        return Err(Error::invalid("panorama height must be positive"));
    }
    let width = 2 * height;
    // Rendered as two square halves, then stitched.
    let halves: Vec<Rays> = (0..2)
        .map(|half| {
            let mut directions = Vec::with_capacity(height * height);
            for j in 0..height {
                let pitch = std::f64::consts::FRAC_PI_2
                    - std::f64::consts::PI * (j as f64 + 0.5) / height as f64;
                for i in half * height..(half + 1) * height {
                    let yaw = std::f64::consts::TAU * (i as f64 + 0.5) / width as f64;
                    // Yaw 0 looks down -z; positive yaw turns toward -x.
                    directions.push(Vector3::new(
                        -yaw.sin() * pitch.cos(),
                        pitch.sin(),
                        -yaw.cos() * pitch.cos(),
                    ));
                }
            }
            Rays {
                resolution: height,
                origins: vec![position; height * height],
                directions,
            }
        })
        .collect();
    let mut g = Graph::new();
    let fv = field_vars(&mut g, field, false);
    let layout = &field.layout;
    let samples = RaySamples::new(layout, &[&halves[0], &halves[1]], config, None, None);
    // Both halves share one field.
    let planes = g.value(fv.planes).clone();
    let mut both = planes.clone();
    both.shape[0] = 2;
    both.data.extend_from_slice(&planes.data);
    let fv = crate::field::FieldVars {
        planes: g.constant(both),
        ..fv
    };
    let out = render_graph(&mut g, &fv, layout, &samples, config);
    let (rgb, depth) = (g.value(out.rgb), g.value(out.depth));
    let hh = height * height;
    let mut view = RenderedView {
        width,
        height,
        rgb: vec![0.0; 3 * width * height],
        depth: vec![0.0; width * height],
    };
    for half in 0..2 {
        for j in 0..height {
            for i in 0..height {
                let (src, dst) = (j * height + i, j * width + half * height + i);
                view.depth[dst] = depth.data[half * hh + src];
                for c in 0..3 {
                    view.rgb[c * width * height + dst] = rgb.data[(half * 3 + c) * hh + src];
                }
            }
        }
    }
    Ok(view)
}

/// Frames along a piecewise-linear path through `keys`; yaw follows the
/// shorter arc.
pub fn trajectory(
    field: &TriPlaneField,
    keys: &[GlobalCamera],
    frames_per_segment: usize,
    resolution: usize,
    config: &RenderConfig,
) -> Result<Vec<RenderedView>> {
    if keys.len() < 2 || frames_per_segment == 0 {
        return Err(Error::invalid(
            "a trajectory needs two key cameras and at least one frame per segment",
        ));
    }
    let mut out = Vec::new();
    for pair in keys.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let mut dyaw = b.yaw - a.yaw;
        if dyaw > 180.0 {
            dyaw -= 360.0;
        } else if dyaw < -180.0 {
            dyaw += 360.0;
        }
        for f in 0..frames_per_segment {
            let s = f as f64 / frames_per_segment as f64;
            let lerp = |x: f64, y: f64| x + s * (y - x);
            let cam = GlobalCamera {
                position: [0, 1, 2].map(|i| lerp(a.position[i], b.position[i])),
                yaw: wrap_yaw(a.yaw + s * dyaw),
                pitch: lerp(a.pitch, b.pitch),
                roll: lerp(a.roll, b.roll),
                fov: lerp(a.fov, b.fov),
            };
            let rays = camera_rays(&cam, (resolution, resolution))?;
            out.push(render_rays(field, &rays, config, resolution, resolution));
        }
    }
    let last = keys[keys.len() - 1];
    let rays = camera_rays(&last, (resolution, resolution))?;
    out.push(render_rays(field, &rays, config, resolution, resolution));
    Ok(out)
}

impl RenderedView {
    pub fn save_rgb(&self, path: &Path) -> Result<()> {
        let n = self.width * self.height;
        let q = quantize_image(&self.rgb);
        let data: Vec<u8> = (0..n)
            .flat_map(|i| [q[i], q[n + i], q[2 * n + i]])
            .collect();
        write_png(path, self.width, self.height, png::ColorType::Rgb, &data)
    }

    /// Depth scaled by `far` to 8-bit gray.
    pub fn save_depth(&self, path: &Path, far: f64) -> Result<()> {
        let data: Vec<u8> = self
            .depth
            .iter()
            .map(|d| ((d / far).clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        write_png(
            path,
            self.width,
            self.height,
            png::ColorType::Grayscale,
            &data,
        )
    }
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format(path, e.to_string());
    enc.write_header()
        .map_err(fail)?
        .write_image_data(data)
        .map_err(fail)
}
