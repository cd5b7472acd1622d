use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use lpa3d::eval::{
    abnormality_rate, eval_pose_mae, feature_distribution_distance, field_occupancy,
    oracle_occupancy, panorama, pose_histograms, read_gt_poses, trajectory,
};
use lpa3d::field::{self, RenderConfig, TriPlaneField};
use lpa3d::lpa::{generate_rays, AnchorSystem, LpaPose};
use lpa3d::nets::{load_segmenter, save_classifier, save_segmenter, AnchorClassifier, Segmenter};
use lpa3d::samplers::psr_camera;
use lpa3d::synthroom::{build_dataset, load_dataset, sample_scene, write_dataset, Dataset};
use lpa3d::tensor::Tensor;
use lpa3d::trainer::{
    latest_checkpoint, load_checkpoint, load_models, write_csv, EvalSet, TrainData, TrainedModels,
    Trainer, CONFIG_FILE,
};

use crate::config::CliConfig;
use crate::Common;

fn setup(c: &Common) -> Result<CliConfig> {
    let cfg = CliConfig::load(c.config.as_deref())?;
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(cfg)
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn load_images(root: &Path, image_size: usize) -> Result<Dataset> {
    let ds = load_dataset(root)?;
    if ds.resolution() != image_size {
        bail!(lpa3d::Error::Config(format!(
            "dataset {} has resolution {} but the model expects {image_size}",
            root.display(),
            ds.resolution()
        )));
    }
    Ok(ds)
}

fn images(ds: &Dataset) -> Vec<Tensor> {
    ds.records.iter().map(|r| r.image.clone()).collect()
}

/// A `ckpt_<step>` directory as given, or the latest one under a run directory.
fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(CONFIG_FILE).exists() {
        return Ok(path.to_path_buf());
    }
    match latest_checkpoint(path)? {
        Some(p) => Ok(p),
        None => bail!(lpa3d::Error::InvalidInput(format!(
            "no checkpoint found under {}",
            path.display()
        ))),
    }
}

fn models(cfg: &CliConfig) -> Result<(PathBuf, TrainedModels)> {
    let dir = resolve_checkpoint(&cfg.eval.checkpoint)?;
    let m = load_models(&dir).with_context(|| format!("loading {}", dir.display()))?;
    Ok((dir, m))
}

pub fn genworld(c: &Common) -> Result<Value> {
    let cfg = setup(c)?;
    let w = &cfg.world;
    let seed = c.seed.unwrap_or(0);
    let resolution = w.resolution.unwrap_or(cfg.model.image_size);
    let (ds, gt) = build_dataset(w.scenes, w.views_per_scene, resolution, &w.priors, seed)?;
    write_dataset(&c.out, &ds, Some(&gt))?;
    info!("wrote {} images to {}", ds.len(), c.out.display());
    Ok(json!({
        "root": c.out,
        "counts": ds.manifest.counts,
        "content_hash": ds.manifest.content_hash,
    }))
}

pub fn train_segmenter(c: &Common) -> Result<Value> {
    let cfg = setup(c)?;
    let ds = load_images(&cfg.segmenter.dataset, cfg.model.image_size)?;
    let imgs = images(&ds);
    let masks: Vec<Vec<f64>> = ds
        .records
        .iter()
        .map(|r| r.mask.iter().map(|&m| f64::from(m)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed.unwrap_or(0));
    let mut seg = Segmenter::new(&cfg.model, &mut rng)?;
    let losses = seg.train(&imgs, &masks, &cfg.segmenter.fit, &mut rng)?;
    let accuracy = seg.pixel_accuracy(&imgs, &masks)?;
    let path = c.out.join("segmenter.bin");
    save_segmenter(&path, &seg, &cfg.model)?;
    let summary = json!({ "weights": path, "epoch_losses": losses, "pixel_accuracy": accuracy });
    write_json(&c.out, "segmenter.json", &summary)?;
    Ok(summary)
}

pub fn train_anchor(c: &Common) -> Result<Value> {
    let cfg = setup(c)?;
    let a = &cfg.anchor;
    let ds = load_images(&a.dataset, cfg.model.image_size)?;
    let n = a.labels.unwrap_or(ds.len()).min(ds.len());
    let (train_x, train_y) = (images(&ds)[..n].to_vec(), ds.anchor_labels()[..n].to_vec());
    let (test_x, test_y) = match &a.eval_dataset {
        Some(root) => {
            let e = load_images(root, cfg.model.image_size)?;
            (images(&e), e.anchor_labels())
        }
        None => (images(&ds)[n..].to_vec(), ds.anchor_labels()[n..].to_vec()),
    };
    if test_x.is_empty() {
        bail!(lpa3d::Error::Config(
            "no held-out images: set anchor.eval_dataset or anchor.labels".into()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed.unwrap_or(0));
    let mut clf = AnchorClassifier::new(&cfg.model, &mut rng)?;
    let losses = clf.train(&train_x, &train_y, &a.fit, &mut rng)?;
    let accuracy = clf.accuracy(&test_x, &test_y)?;
    let path = c.out.join("anchor_classifier.bin");
    save_classifier(&path, &clf, &cfg.model)?;
    let summary = json!({
        "weights": path,
        "labels": n,
        "held_out": test_x.len(),
        "epoch_losses": losses,
        "accuracy": accuracy,
    });
    write_json(&c.out, "anchor.json", &summary)?;
    Ok(summary)
}

pub fn train(c: &Common, fresh: bool, steps: Option<u64>) -> Result<Value> {
    let cfg = setup(c)?;
    let t = &cfg.train;
    let mut params = t.params.clone();
    if let Some(seed) = c.seed {
        params.seed = seed;
    }
    if let Some(s) = steps {
        params.steps = s;
    }
    let data = TrainData::from_dataset(&load_images(&t.dataset, params.model.image_size)?);
    let eval = t.eval_dataset.as_deref().map(EvalSet::load).transpose()?;
    let resume_from = if t.resume && !fresh {
        latest_checkpoint(&c.out)?
    } else {
        None
    };
    let mut trainer = match &resume_from {
        Some(dir) => {
            info!("resuming from {}", dir.display());
            load_checkpoint(dir, data, Some(params))?
        }
        None => {
            let seg = load_segmenter(&t.segmenter, &params.model)
                .with_context(|| format!("loading segmenter {}", t.segmenter.display()))?;
            Trainer::new(params, seg, data)?
        }
    };
    trainer.train(eval.as_ref(), Some(&c.out))?;
    write_csv(&c.out.join("metrics.csv"), &trainer.log)?;
    let last_eval = trainer.evals.last().copied();
    Ok(json!({
        "run": c.out,
        "resumed_from": resume_from,
        "step": trainer.step,
        "params_hash": trainer.params_hash(),
        "last_eval": last_eval,
    }))
}

fn predictions_csv(path: &Path, ids: &[String], poses: &[LpaPose]) -> Result<()> {
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        anchor: usize,
        x: f64,
        y: f64,
        z: f64,
        yaw: f64,
        pitch: f64,
        roll: f64,
        fov: f64,
    }
    let rows = ids.iter().zip(poses).map(|(id, p)| Row {
        id,
        anchor: p.anchor,
        x: p.position[0],
        y: p.position[1],
        z: p.position[2],
        yaw: p.yaw,
        pitch: p.pitch,
        roll: p.roll,
        fov: p.fov,
    });
    Ok(write_csv(path, rows)?)
}

pub fn eval_pose(c: &Common) -> Result<Value> {
    let cfg = setup(c)?;
    let (dir, m) = models(&cfg)?;
    let set = EvalSet::load(&cfg.eval.dataset)?;
    let anchor_free = m.meta.config.anchor_free;
    let mae = eval_pose_mae(&m.predictor, &set.images, &set.truth, anchor_free)?;
    let predicted = m.predictor.predict_many(&set.images, 32)?;
    let ids: Vec<String> = set.truth.iter().map(|t| t.id.clone()).collect();
    predictions_csv(&c.out.join("predictions.csv"), &ids, &predicted)?;
    let summary = json!({ "checkpoint": dir, "anchor_free": anchor_free, "pose_mae": mae });
    write_json(&c.out, "pose_mae.json", &summary)?;
    Ok(summary)
}

pub fn histograms(c: &Common) -> Result<Value> {
    let cfg = setup(c)?;
    let (dir, m) = models(&cfg)?;
    let ds = load_images(&cfg.eval.dataset, m.meta.config.model.image_size)?;
    let predicted = m.predictor.predict_many(&images(&ds), 32)?;
    let bins = m.meta.config.model.pose_bins();
    let pred_path = c.out.join("predicted_histograms.csv");
    pose_histograms(&predicted, &bins).write_csv(&pred_path)?;
    let mut outputs = vec![pred_path];
    if cfg
        .eval
        .dataset
        .join(lpa3d::synthroom::GT_POSES_FILE)
        .exists()
    {
        let truth: Vec<LpaPose> = read_gt_poses(&cfg.eval.dataset)?
            .into_iter()
            .map(|t| t.pose)
            .collect();
        let path = c.out.join("ground_truth_histograms.csv");
        pose_histograms(&truth, &bins).write_csv(&path)?;
        outputs.push(path);
    }
    Ok(json!({ "checkpoint": dir, "images": predicted.len(), "outputs": outputs }))
}

/// Generated scenes, one per index, from a fixed seed.
fn fields(m: &TrainedModels, n: usize, seed: u64) -> Result<Vec<TriPlaneField>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let room = m.meta.config.rooms.sample(&mut rng);
            let z = m.generator.sample_latent(&mut rng);
            Ok(m.generator.generate(&z, &room)?)
        })
        .collect()
}

pub fn metrics(c: &Common) -> Result<Value> {
    let cfg = setup(c)?;
    let (dir, m) = models(&cfg)?;
    let tc = &m.meta.config;
    let w = tc.model.image_size;
    let real = images(&load_images(&cfg.eval.dataset, w)?);
    let seed = c.seed.unwrap_or(0);
    let rc = RenderConfig::for_room(&tc.model.max_room()?, tc.model.render_steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut fake = Vec::with_capacity(cfg.metrics.samples);
    for field in fields(&m, cfg.metrics.samples, seed)? {
        let system = AnchorSystem::new(field.room)?;
        let pose = system.to_lpa(&psr_camera(&field, &field.room, &tc.sampler, &mut rng));
        let out = field::render(&field, &generate_rays(&pose, &field.room, (w, w))?, &rc);
        fake.push(Tensor::new(vec![3, w, w], out.rgb));
    }
    let distance = feature_distribution_distance(&m.segmenter.backbone, &fake, &real)?;
    let half = real.len() / 2;
    let reference =
        feature_distribution_distance(&m.segmenter.backbone, &real[..half], &real[half..])?;
    let summary = json!({
        "checkpoint": dir,
        "samples": fake.len(),
        "real": real.len(),
        "feature_distance": distance,
        "real_split_distance": reference,
    });
    write_json(&c.out, "metrics.json", &summary)?;
    Ok(summary)
}

pub fn abnormality(c: &Common) -> Result<Value> {
    let cfg = setup(c)?;
    let (dir, m) = models(&cfg)?;
    let a = &cfg.abnormality;
    let seed = c.seed.unwrap_or(0);
    let maps = fields(&m, a.scenes, seed)?
        .iter()
        .map(|f| field_occupancy(f, &a.occupancy))
        .collect::<lpa3d::Result<Vec<_>>>()?;
    let rate = abnormality_rate(&maps, &a.occupancy)?;
    // The same proxy on procedural scenes, as a floor.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oracle = (0..a.scenes)
        .map(|_| oracle_occupancy(&sample_scene(&mut rng, &cfg.world.priors)?, &a.occupancy))
        .collect::<lpa3d::Result<Vec<_>>>()?;
    let summary = json!({
        "checkpoint": dir,
        "anchor_free": m.meta.config.anchor_free,
        "scenes": a.scenes,
        "abnormality_rate": rate,
        "procedural_rate": abnormality_rate(&oracle, &a.occupancy)?,
    });
    write_json(&c.out, "abnormality.json", &summary)?;
    Ok(summary)
}

pub fn render(c: &Common) -> Result<Value> {
    let cfg = setup(c)?;
    let (dir, m) = models(&cfg)?;
    let r = &cfg.render;
    let tc = &m.meta.config;
    let rc = RenderConfig::for_room(&tc.model.max_room()?, tc.model.render_steps);
    let seed = c.seed.unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ace);
    let mut written = Vec::new();
    for (i, field) in fields(&m, r.scenes, seed)?.iter().enumerate() {
        let eye = Vector3::new(0.0, (1.5f64).min(0.6 * field.room.height), 0.0);
        let pano = panorama(field, eye, r.panorama_height, &rc)?;
        let (rgb, depth) = (
            c.out.join(format!("scene{i:03}_panorama.png")),
            c.out.join(format!("scene{i:03}_panorama_depth.png")),
        );
        pano.save_rgb(&rgb)?;
        pano.save_depth(&depth, rc.far)?;
        written.extend([rgb, depth]);
        let keys: Vec<_> = (0..3)
            .map(|_| psr_camera(field, &field.room, &tc.sampler, &mut rng))
            .collect();
        for (k, frame) in trajectory(field, &keys, r.trajectory_frames, r.resolution, &rc)?
            .iter()
            .enumerate()
        {
            let path = c.out.join(format!("scene{i:03}_traj{k:03}.png"));
            frame.save_rgb(&path)?;
            written.push(path);
        }
    }
    Ok(json!({ "checkpoint": dir, "files": written.len(), "out": c.out }))
}
