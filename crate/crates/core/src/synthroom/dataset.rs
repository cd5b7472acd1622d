use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{render_oracle, sample_camera, sample_scene, ScenePriors, SceneSpec};
use crate::error::{Error, Result};
use crate::lpa::{GlobalCamera, LpaPose};
use crate::tensor::Tensor;

/// Ground-truth sidecar; only evaluation code reads it.
pub const GT_POSES_FILE: &str = "poses_gt.csv";

/// Columns of the ground-truth sidecar.
pub const GT_HEADER: [&str; 12] = [
    "id",
    "anchor",
    "x",
    "y",
    "z",
    "yaw",
    "pitch",
    "roll",
    "fov",
    "room_width",
    "room_height",
    "room_depth",
];

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub scene_id: usize,
    pub anchor_label: usize,
    /// `[3, W, W]` in `[0, 1]`, quantized to 8 bits.
    pub image: Tensor,
    /// 1 for object pixels, 0 for wall, floor and ceiling.
    pub mask: Vec<u8>,
    /// Oracle depth; only present on freshly built records.
    pub depth: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub images: usize,
    pub scenes: usize,
    pub per_anchor: [usize; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub resolution: usize,
    pub views_per_scene: usize,
    pub priors: ScenePriors,
    pub counts: Counts,
    /// SHA-256 over ids, labels, image and mask bytes.
    pub content_hash: String,
    /// SHA-256 over the ground-truth poses.
    pub poses_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub records: Vec<DatasetRecord>,
}

/// Everything the pose-blind trainer must not see.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub poses: Vec<LpaPose>,
    pub cameras: Vec<GlobalCamera>,
    pub scenes: Vec<SceneSpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.manifest.resolution
    }

    pub fn images(&self) -> Vec<&Tensor> {
        self.records.iter().map(|r| &r.image).collect()
    }

    pub fn anchor_labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.anchor_label).collect()
    }
}

/// Rounds `[0, 1]` values to the 8-bit grid used on disk.
pub fn quantize_image(rgb: &[f64]) -> Vec<u8> {
    rgb.iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

fn dequantize(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| f64::from(b) / 255.0).collect()
}

/// Builds `n_scenes * views_per_scene` records. Scene `i` draws from its own
/// stream `(seed, i)`, so any subset can be rebuilt independently.
pub fn build_dataset(
    n_scenes: usize,
    views_per_scene: usize,
    resolution: usize,
    priors: &ScenePriors,
    seed: u64,
) -> Result<(Dataset, GroundTruth)> {
    if n_scenes == 0 || views_per_scene == 0 {
        return Err(Error::invalid("a dataset needs at least one image"));
    }
    if resolution == 0 {
        return Err(Error::invalid("resolution must be positive"));
    }
    priors.validate()?;
    let mut records = Vec::with_capacity(n_scenes * views_per_scene);
    let mut gt = GroundTruth {
        poses: Vec::new(),
        cameras: Vec::new(),
        scenes: Vec::new(),
    };
    for s in 0..n_scenes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        let scene = sample_scene(&mut rng, priors)?;
        let system = scene.anchor_system()?;
        for v in 0..views_per_scene {
            let cam = sample_camera(&scene, priors, &mut rng)?;
            let view = render_oracle(&scene, &cam, resolution)?;
            let anchor = system.assign_anchor(&cam);
            let pose = system.to_lpa_with_anchor(&cam, anchor);
            let image = Tensor::new(
                vec![3, resolution, resolution],
                dequantize(&quantize_image(&view.rgb)),
            );
            records.push(DatasetRecord {
                id: format!("{s:06}_{v:02}"),
                scene_id: s,
                anchor_label: anchor,
                image,
                mask: view.foreground.iter().map(|&f| u8::from(f)).collect(),
                depth: Some(view.depth),
            });
            gt.poses.push(pose);
            gt.cameras.push(cam);
        }
        gt.scenes.push(scene);
    }
    let mut per_anchor = [0; 4];
    for r in &records {
        per_anchor[r.anchor_label] += 1;
    }
    let manifest = Manifest {
        seed,
        resolution,
        views_per_scene,
        priors: priors.clone(),
        counts: Counts {
            images: records.len(),
            scenes: n_scenes,
            per_anchor,
        },
        content_hash: content_hash(&records),
        poses_hash: poses_hash(&records, &gt.poses),
    };
    Ok((Dataset { manifest, records }, gt))
}

pub fn content_hash(records: &[DatasetRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.id.as_bytes());
        h.update((r.scene_id as u64).to_le_bytes());
        h.update([r.anchor_label as u8]);
        h.update(quantize_image(&r.image.data));
        h.update(&r.mask);
    }
    hex::encode(h.finalize())
}

fn poses_hash(records: &[DatasetRecord], poses: &[LpaPose]) -> String {
    let mut h = Sha256::new();
    for (r, p) in records.iter().zip(poses) {
        h.update(r.id.as_bytes());
        h.update([p.anchor as u8]);
        for v in p.position.iter().chain(&[p.yaw, p.pitch, p.roll, p.fov]) {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn write_png(path: &Path, width: usize, color: png::ColorType, data: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, width as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let fail = |e: png::EncodingError| Error::format(path, e.to_string());
    enc.write_header()
        .map_err(fail)?
        .write_image_data(data)
        .map_err(fail)
}

fn read_png(path: &Path, width: usize, color: png::ColorType) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let fail = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(fail)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(fail)?;
    if info.width as usize != width
        || info.height as usize != width
        || info.color_type != color
        || info.bit_depth != png::BitDepth::Eight
    {
        return Err(Error::format(
            path,
            format!(
                "expected {width}x{width} 8-bit {color:?}, got {}x{} {:?} {:?}",
                info.width, info.height, info.bit_depth, info.color_type
            ),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok(buf)
}

/// `[3, W, W]` channel-major to interleaved RGB bytes.
fn interleave(image: &Tensor) -> Vec<u8> {
    let n = image.numel() / 3;
    let q = quantize_image(&image.data);
    (0..n)
        .flat_map(|i| [q[i], q[n + i], q[2 * n + i]])
        .collect()
}

fn deinterleave(bytes: &[u8], w: usize) -> Tensor {
    let n = w * w;
    let mut data = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            data[c * n + i] = f64::from(bytes[3 * i + c]) / 255.0;
        }
    }
    Tensor::new(vec![3, w, w], data)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::format(path, e.to_string())
}

/// Writes images, masks, labels, the pose sidecar and the manifest.
pub fn write_dataset(root: &Path, dataset: &Dataset, gt: Option<&GroundTruth>) -> Result<()> {
    let w = dataset.resolution();
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for r in &dataset.records {
        write_png(
            &root.join("images").join(format!("{}.png", r.id)),
            w,
            png::ColorType::Rgb,
            &interleave(&r.image),
        )?;
        let mask: Vec<u8> = r
            .mask
            .iter()
            .map(|&m| if m > 0 { 255 } else { 0 })
            .collect();
        write_png(
            &root.join("masks").join(format!("{}.png", r.id)),
            w,
            png::ColorType::Grayscale,
            &mask,
        )?;
    }

    let path = root.join("labels.csv");
    let mut wtr = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    wtr.write_record(["id", "anchor_label", "scene_id"])
        .map_err(csv_err(&path))?;
    for r in &dataset.records {
        wtr.write_record([
            r.id.clone(),
            r.anchor_label.to_string(),
            r.scene_id.to_string(),
        ])
        .map_err(csv_err(&path))?;
    }
    wtr.flush().map_err(|e| Error::io(&path, e))?;

    if let Some(gt) = gt {
        let path = root.join(GT_POSES_FILE);
        let mut wtr = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
        wtr.write_record(GT_HEADER).map_err(csv_err(&path))?;
        for (r, p) in dataset.records.iter().zip(&gt.poses) {
            let room = gt.scenes[r.scene_id].room;
            // `{:?}` prints the shortest representation that parses back exactly.
            let mut row = vec![r.id.clone(), p.anchor.to_string()];
            row.extend(
                p.position
                    .iter()
                    .chain(&[
                        p.yaw,
                        p.pitch,
                        p.roll,
                        p.fov,
                        room.width,
                        room.height,
                        room.depth,
                    ])
                    .map(|v| format!("{v:?}")),
            );
            wtr.write_record(&row).map_err(csv_err(&path))?;
        }
        wtr.flush().map_err(|e| Error::io(&path, e))?;
    }

    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&dataset.manifest)
        .map_err(|e| Error::format(&path, e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[derive(Deserialize)]
struct LabelRow {
    id: String,
    anchor_label: usize,
    scene_id: usize,
}

/// Loads images, masks and labels, checking the content hash. Never opens
/// the ground-truth pose sidecar.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let w = manifest.resolution;

    let path = root.join("labels.csv");
    let mut rdr = csv::Reader::from_path(&path).map_err(csv_err(&path))?;
    let mut records = Vec::new();
    for row in rdr.deserialize::<LabelRow>() {
        let row = row.map_err(csv_err(&path))?;
        if row.anchor_label > 3 {
            return Err(Error::format(
                &path,
                format!("record {} has anchor label {}", row.id, row.anchor_label),
            ));
        }
        let image = read_png(
            &root.join("images").join(format!("{}.png", row.id)),
            w,
            png::ColorType::Rgb,
        )?;
        let mask = read_png(
            &root.join("masks").join(format!("{}.png", row.id)),
            w,
            png::ColorType::Grayscale,
        )?;
        records.push(DatasetRecord {
            image: deinterleave(&image, w),
            mask: mask.iter().map(|&m| u8::from(m > 127)).collect(),
            id: row.id,
            scene_id: row.scene_id,
            anchor_label: row.anchor_label,
            depth: None,
        });
    }
    if records.len() != manifest.counts.images {
        return Err(Error::format(
            &path,
            format!(
                "manifest lists {} images, labels.csv has {}",
                manifest.counts.images,
                records.len()
            ),
        ));
    }
    let hash = content_hash(&records);
    if hash != manifest.content_hash {
        return Err(Error::format(
            root,
            format!(
                "content hash {hash} does not match manifest {}",
                manifest.content_hash
            ),
        ));
    }
    Ok(Dataset { manifest, records })
}
