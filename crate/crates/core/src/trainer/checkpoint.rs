//! `ckpt_<step>/{params, optimizer, config.json, metrics.csv, pose_mae.csv}`.
//! Parameters and optimizer moments round-trip bit-exactly; the per-step RNG
//! is derived from the seed and step, so nothing else is needed to resume.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stores_hash, EvalRow, StepLog, TrainConfig, TrainData, Trainer};
use crate::error::{Error, Result};
use crate::eval::PoseMae;
use crate::nets::{
    read_stores, replace_store, write_stores, CameraPredictor, Discriminator, Generator, Segmenter,
};
use crate::tensor::{Adam, ParamStore, Tensor};

pub const PARAMS_FILE: &str = "params";
pub const OPTIMIZER_FILE: &str = "optimizer";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const POSE_MAE_FILE: &str = "pose_mae.csv";

const MOMENT_TAG: u32 = 100;
const STEP_TAG: u32 = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fingerprint: String,
    pub step: u64,
    pub gan_steps: u64,
    pub camera_steps: u64,
    pub params_hash: String,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct EvalCsv {
    round: usize,
    step: u64,
    count: usize,
    anchor_accuracy: f64,
    x: f64,
    y: f64,
    z: f64,
    yaw: f64,
    pitch: f64,
    roll: f64,
    fov: f64,
}

impl From<&EvalRow> for EvalCsv {
    fn from(r: &EvalRow) -> Self {
        let m = r.mae;
        EvalCsv {
            round: r.round,
            step: r.step,
            count: m.count,
            anchor_accuracy: m.anchor_accuracy,
            x: m.x,
            y: m.y,
            z: m.z,
            yaw: m.yaw,
            pitch: m.pitch,
            roll: m.roll,
            fov: m.fov,
        }
    }
}

impl From<EvalCsv> for EvalRow {
    fn from(r: EvalCsv) -> Self {
        EvalRow {
            round: r.round,
            step: r.step,
            mae: PoseMae {
                count: r.count,
                anchor_accuracy: r.anchor_accuracy,
                x: r.x,
                y: r.y,
                z: r.z,
                yaw: r.yaw,
                pitch: r.pitch,
                roll: r.roll,
                fov: r.fov,
            },
        }
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let fail = |e: csv::Error| Error::format(path, e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let fail = |e: csv::Error| Error::format(path, e.to_string());
    let mut r = csv::Reader::from_path(path).map_err(fail)?;
    r.deserialize().map(|row| row.map_err(fail)).collect()
}

/// Adam moments as stores shaped like the parameters they track.
fn moment_stores(k: u32, opt: &Adam, params: &ParamStore) -> [ParamStore; 2] {
    [(0, &opt.m), (1, &opt.v)].map(|(which, buf)| ParamStore {
        tag: MOMENT_TAG + 10 * k + which,
        names: params.names.clone(),
        tensors: params
            .tensors
            .iter()
            .zip(buf)
            .map(|(t, b)| Tensor::new(t.shape.clone(), b.clone()))
            .collect(),
    })
}

fn restore_moments(
    opt: &mut Adam,
    m: &ParamStore,
    v: &ParamStore,
    params: &ParamStore,
    path: &Path,
) -> Result<()> {
    for s in [m, v] {
        if s.names != params.names
            || s.tensors
                .iter()
                .zip(&params.tensors)
                .any(|(a, b)| a.shape != b.shape)
        {
            return Err(Error::format(
                path,
                "optimizer state does not match the parameters",
            ));
        }
    }
    opt.m = m.tensors.iter().map(|t| t.data.clone()).collect();
    opt.v = v.tensors.iter().map(|t| t.data.clone()).collect();
    Ok(())
}

/// Writes `out/ckpt_<step>` and returns its path. The directory is staged
/// under a temporary name and renamed into place.
pub fn save_checkpoint(t: &Trainer, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let dir = out.join(format!("ckpt_{}", t.step));
    let tmp = out.join(format!(".ckpt_{}.partial", t.step));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let fp = t.config.fingerprint();

    write_stores(
        &tmp.join(PARAMS_FILE),
        &fp,
        &[
            &t.generator.store,
            &t.discriminator.store,
            &t.predictor.store,
            &t.predictor.backbone.store,
            &t.segmenter.backbone.store,
            &t.segmenter.head_store,
        ],
    )?;

    let mut moments = Vec::new();
    let mut steps = Vec::new();
    let optimizers = [
        (&t.opt_g, &t.generator.store),
        (&t.opt_d, &t.discriminator.store),
        (&t.opt_c, &t.predictor.store),
    ];
    for (k, (opt, params)) in optimizers.into_iter().enumerate() {
        moments.extend(moment_stores(k as u32, opt, params));
        steps.push(opt.step as f64);
    }
    if let Some(opt) = &t.opt_backbone {
        moments.extend(moment_stores(3, opt, &t.predictor.backbone.store));
        steps.push(opt.step as f64);
    }
    let mut step_store = ParamStore::new(STEP_TAG);
    step_store.names.push("adam_steps".into());
    step_store
        .tensors
        .push(Tensor::new(vec![steps.len()], steps));
    let mut refs: Vec<&ParamStore> = moments.iter().collect();
    refs.push(&step_store);
    write_stores(&tmp.join(OPTIMIZER_FILE), &fp, &refs)?;

    let meta = CheckpointMeta {
        fingerprint: fp,
        step: t.step,
        gan_steps: t.gan_steps,
        camera_steps: t.camera_steps,
        params_hash: t.params_hash(),
        config: t.config.clone(),
    };
    let path = tmp.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    write_csv(&tmp.join(METRICS_FILE), &t.log)?;
    write_csv(&tmp.join(POSE_MAE_FILE), t.evals.iter().map(EvalCsv::from))?;

    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

/// Networks of a checkpoint without optimizer state or training data.
#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub meta: CheckpointMeta,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub predictor: CameraPredictor,
    pub segmenter: Segmenter,
}

fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Builds networks for `config` and fills them from `dir/params`.
fn read_params(dir: &Path, meta: &CheckpointMeta, config: &TrainConfig) -> Result<TrainedModels> {
    let m = &config.model;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = TrainedModels {
        meta: meta.clone(),
        generator: Generator::new(m, &mut rng)?,
        discriminator: Discriminator::new(m, true, &mut rng)?,
        predictor: CameraPredictor::new(m, None, &mut rng)?,
        segmenter: Segmenter::new(m, &mut rng)?,
    };
    out.predictor.scratch = config.scratch_predictor;
    let path = dir.join(PARAMS_FILE);
    let (fp, stores) = read_stores(&path)?;
    if fp != meta.fingerprint || stores.len() != 6 {
        return Err(Error::format(
            &path,
            "parameter file does not belong to this checkpoint",
        ));
    }
    let mut it = stores.into_iter();
    let mut next = || it.next().expect("length checked");
    replace_store(&mut out.generator.store, next(), &path)?;
    replace_store(&mut out.discriminator.store, next(), &path)?;
    replace_store(&mut out.predictor.store, next(), &path)?;
    replace_store(&mut out.predictor.backbone.store, next(), &path)?;
    replace_store(&mut out.segmenter.backbone.store, next(), &path)?;
    replace_store(&mut out.segmenter.head_store, next(), &path)?;
    let hash = stores_hash(&[
        &out.generator.store,
        &out.discriminator.store,
        &out.predictor.store,
        &out.predictor.backbone.store,
        &out.segmenter.backbone.store,
        &out.segmenter.head_store,
    ]);
    if hash != meta.params_hash {
        return Err(Error::format(&path, "parameter hash mismatch"));
    }
    Ok(out)
}

/// Loads the networks of a checkpoint directory for evaluation.
pub fn load_models(dir: &Path) -> Result<TrainedModels> {
    let meta = read_meta(dir)?;
    let config = meta.config.clone();
    read_params(dir, &meta, &config)
}

/// Restores a trainer from a checkpoint directory. `config` overrides the
/// stored one (to extend `steps`, say) but must share its fingerprint.
pub fn load_checkpoint(
    dir: &Path,
    data: TrainData,
    config: Option<TrainConfig>,
) -> Result<Trainer> {
    let meta = read_meta(dir)?;
    let config = config.unwrap_or_else(|| meta.config.clone());
    if config.fingerprint() != meta.fingerprint {
        return Err(Error::Config(format!(
            "checkpoint fingerprint {} does not match the configuration {}",
            meta.fingerprint,
            config.fingerprint()
        )));
    }
    let models = read_params(dir, &meta, &config)?;
    let mut t = Trainer::new(config, models.segmenter, data)?;
    t.generator = models.generator;
    t.discriminator = models.discriminator;
    t.predictor = models.predictor;

    let path = dir.join(OPTIMIZER_FILE);
    let (fp, stores) = read_stores(&path)?;
    let expected = if t.opt_backbone.is_some() { 9 } else { 7 };
    if fp != meta.fingerprint || stores.len() != expected {
        return Err(Error::format(
            &path,
            "optimizer file does not belong to this checkpoint",
        ));
    }
    let steps = &stores[expected - 1].tensors[0].data;
    restore_moments(
        &mut t.opt_g,
        &stores[0],
        &stores[1],
        &t.generator.store,
        &path,
    )?;
    restore_moments(
        &mut t.opt_d,
        &stores[2],
        &stores[3],
        &t.discriminator.store,
        &path,
    )?;
    restore_moments(
        &mut t.opt_c,
        &stores[4],
        &stores[5],
        &t.predictor.store,
        &path,
    )?;
    t.opt_g.step = steps[0] as u64;
    t.opt_d.step = steps[1] as u64;
    t.opt_c.step = steps[2] as u64;
    if let Some(opt) = t.opt_backbone.as_mut() {
        restore_moments(
            opt,
            &stores[6],
            &stores[7],
            &t.predictor.backbone.store,
            &path,
        )?;
        opt.step = steps[3] as u64;
    }

    t.step = meta.step;
    t.gan_steps = meta.gan_steps;
    t.camera_steps = meta.camera_steps;
    t.log = read_csv::<StepLog>(&dir.join(METRICS_FILE))?;
    t.evals = read_csv::<EvalCsv>(&dir.join(POSE_MAE_FILE))?
        .into_iter()
        .map(EvalRow::from)
        .collect();
    Ok(t)
}

/// The checkpoint with the highest step under `out`, if any.
pub fn latest_checkpoint(out: &Path) -> Result<Option<PathBuf>> {
    if !out.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(out).map_err(|e| Error::io(out, e))? {
        let entry = entry.map_err(|e| Error::io(out, e))?;
        let name = entry.file_name();
        let Some(step) = name
            .to_str()
            .and_then(|n| n.strip_prefix("ckpt_"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best.map(|(_, p)| p))
}
