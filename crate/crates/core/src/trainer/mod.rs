//! Joint optimization: GAN iterations (generator and discriminator trainable,
//! camera predictor frozen and feeding GSR candidates) alternate with camera
//! predictor iterations on PSR views of frozen-generator scenes.

mod checkpoint;

pub use checkpoint::{
    latest_checkpoint, load_checkpoint, load_models, save_checkpoint, write_csv, CheckpointMeta,
    TrainedModels, CONFIG_FILE, METRICS_FILE, OPTIMIZER_FILE, PARAMS_FILE, POSE_MAE_FILE,
};

use std::path::Path;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{eval_pose_mae, read_gt_poses, GtRecord, PoseMae};
use crate::field::{
    render_graph, DecoderWeights, FieldVars, PlaneLayout, RaySamples, RenderConfig, RenderVars,
    TriPlaneField,
};
use crate::losses::{
    adv_fake_graph, adv_real_graph, boundary_loss_graph, camera_ce_graph_with,
    feature_matching_graph, LossWeights,
};
use crate::lpa::{
    boundary_depths, generate_rays, AnchorSystem, GlobalCamera, LpaPose, Rays, RoomBox,
};
use crate::nets::{CameraPredictor, Discriminator, Generator, ModelConfig, Segmenter};
use crate::samplers::{balance_by_anchor, gsr_select, psr_camera, SamplerConfig};
use crate::synthroom::{load_dataset, Dataset, GroundTruth};
use crate::tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};

/// Uniform room-size prior for generated scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoomPrior {
    pub width: (f64, f64),
    pub height: (f64, f64),
    pub depth: (f64, f64),
}

impl Default for RoomPrior {
    fn default() -> Self {
        RoomPrior {
            width: (3.0, 6.0),
            height: (2.4, 3.2),
            depth: (3.0, 6.0),
        }
    }
}

impl RoomPrior {
    pub fn sample(&self, rng: &mut impl Rng) -> RoomBox {
        let mut draw = |(lo, hi): (f64, f64)| {
            if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            }
        };
        let width = draw(self.width);
        let height = draw(self.height);
        RoomBox {
            width,
            height,
            depth: draw(self.depth),
        }
    }

    pub fn largest(&self) -> RoomBox {
        RoomBox {
            width: self.width.1,
            height: self.height.1,
            depth: self.depth.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub losses: LossWeights,
    pub sampler: SamplerConfig,
    pub rooms: RoomPrior,
    pub seed: u64,
    /// Total iterations, GAN and camera together.
    pub steps: u64,
    pub batch_size: usize,
    pub camera_batch_size: usize,
    pub gan_steps_per_cycle: usize,
    pub camera_steps_per_cycle: usize,
    pub lr_gan: f64,
    pub lr_camera: f64,
    pub gan_betas: (f64, f64),
    pub camera_betas: (f64, f64),
    /// GAN iterations that render from PSR poses before GSR takes over.
    pub warmup_gan_steps: u64,
    /// Rays are sampled up to the room boundary plus this margin.
    pub render_margin: f64,
    /// Tile anchor classes to equal counts.
    pub balance: bool,
    /// Drop anchors: every pose lives in anchor 0's frame and the anchor
    /// cross-entropy term is removed.
    pub anchor_free: bool,
    /// Train the predictor backbone from scratch instead of freezing it.
    pub scratch_predictor: bool,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Zero disables periodic pose evaluation.
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            losses: LossWeights::default(),
            sampler: SamplerConfig::default(),
            rooms: RoomPrior::default(),
            seed: 0,
            steps: 10_000,
            batch_size: 16,
            camera_batch_size: 16,
            gan_steps_per_cycle: 4,
            camera_steps_per_cycle: 1,
            lr_gan: 2e-3,
            lr_camera: 1e-4,
            gan_betas: (0.0, 0.99),
            camera_betas: (0.9, 0.999),
            warmup_gan_steps: 500,
            render_margin: 0.3,
            balance: true,
            anchor_free: false,
            scratch_predictor: false,
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// [`ModelConfig::small`] with matching batch sizes and schedule.
    pub fn small() -> Self {
        TrainConfig {
            model: ModelConfig::small(),
            steps: 500,
            batch_size: 4,
            camera_batch_size: 8,
            warmup_gan_steps: 40,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.camera_batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.gan_steps_per_cycle + self.camera_steps_per_cycle == 0 {
            return Err(Error::Config(
                "an alternation cycle needs at least one step".into(),
            ));
        }
        if !self.rooms.largest().fits_within(&self.model.max_room()?) {
            return Err(Error::Config(format!(
                "room prior up to {:?} exceeds the model's maximum room {:?}",
                self.rooms.largest().size(),
                self.model.max_room
            )));
        }
        for (lo, hi) in [self.rooms.width, self.rooms.height, self.rooms.depth] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(Error::Config(format!("bad room prior range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// Hash of everything that determines the trajectory of a run; the step
    /// budget and output cadence are left out so runs can be extended.
    pub fn fingerprint(&self) -> String {
        let mut c = self.clone();
        c.steps = 0;
        c.checkpoint_every = 0;
        c.eval_every = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }
}

/// Pose-blind training data: images and anchor labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub images: Vec<Tensor>,
    pub anchors: Vec<usize>,
}

impl TrainData {
    pub fn from_dataset(ds: &Dataset) -> Self {
        TrainData {
            images: ds.records.iter().map(|r| r.image.clone()).collect(),
            anchors: ds.anchor_labels(),
        }
    }
}

/// Images with withheld ground truth, used only for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub images: Vec<Tensor>,
    pub truth: Vec<GtRecord>,
}

impl EvalSet {
    /// Loads a dataset together with its ground-truth sidecar; ids must
    /// match row by row.
    pub fn load(root: &Path) -> Result<Self> {
        let ds = load_dataset(root)?;
        let truth = read_gt_poses(root)?;
        if truth.len() != ds.len() || ds.records.iter().zip(&truth).any(|(r, t)| r.id != t.id) {
            return Err(Error::format(
                root,
                "ground-truth ids do not match the dataset records",
            ));
        }
        Ok(EvalSet {
            images: ds.records.into_iter().map(|r| r.image).collect(),
            truth,
        })
    }

    /// From an in-memory dataset and the ground truth it was built with.
    pub fn from_parts(ds: &Dataset, gt: &GroundTruth) -> Self {
        EvalSet {
            images: ds.records.iter().map(|r| r.image.clone()).collect(),
            truth: ds
                .records
                .iter()
                .enumerate()
                .map(|(i, r)| GtRecord {
                    id: r.id.clone(),
                    pose: gt.poses[i],
                    room: gt.scenes[r.scene_id].room,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Gan,
    Camera,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub phase: Phase,
    pub status: String,
    pub sampler: String,
    pub loss_g: Option<f64>,
    pub adv_g: Option<f64>,
    pub boundary: Option<f64>,
    pub camera_g: Option<f64>,
    pub loss_d: Option<f64>,
    pub adv_d: Option<f64>,
    pub r1: Option<f64>,
    pub camera_d: Option<f64>,
    pub distill: Option<f64>,
    pub loss_c: Option<f64>,
    /// Mean `|d_p - d_b|` over background pixels of the rendered batch.
    pub bg_depth_error: Option<f64>,
}

impl StepLog {
    fn new(step: u64, phase: Phase) -> Self {
        StepLog {
            step,
            phase,
            status: "ok".into(),
            sampler: String::new(),
            loss_g: None,
            adv_g: None,
            boundary: None,
            camera_g: None,
            loss_d: None,
            adv_d: None,
            r1: None,
            camera_d: None,
            distill: None,
            loss_c: None,
            bg_depth_error: None,
        }
    }

    pub fn values(&self) -> Vec<f64> {
        [
            self.loss_g,
            self.adv_g,
            self.boundary,
            self.camera_g,
            self.loss_d,
            self.adv_d,
            self.r1,
            self.camera_d,
            self.distill,
            self.loss_c,
            self.bg_depth_error,
        ]
        .into_iter()
        .flatten()
        .collect()
    }
}

/// One row of `pose_mae.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub round: usize,
    pub step: u64,
    pub mae: PoseMae,
}

/// Hash over several stores.
pub fn stores_hash(stores: &[&ParamStore]) -> String {
    let mut h = Sha256::new();
    for s in stores {
        h.update(s.hash().as_bytes());
    }
    hex::encode(h.finalize())
}

/// Rendered batch with its poses.
struct Views {
    poses: Vec<LpaPose>,
    rays: Vec<Rays>,
    far: Vec<Vec<f64>>,
    boundary: Vec<f64>,
    sampler: &'static str,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub predictor: CameraPredictor,
    /// Frozen; supplies foreground masks for the boundary loss.
    pub segmenter: Segmenter,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_c: Adam,
    /// Only for a scratch predictor backbone.
    pub opt_backbone: Option<Adam>,
    pub step: u64,
    pub gan_steps: u64,
    pub camera_steps: u64,
    pub log: Vec<StepLog>,
    pub evals: Vec<EvalRow>,
    data: TrainData,
    pool: Vec<usize>,
}

impl Trainer {
    /// Fresh networks from `config.seed`. The predictor backbone is a copy of
    /// the segmenter's unless `scratch_predictor` is set.
    pub fn new(config: TrainConfig, segmenter: Segmenter, data: TrainData) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let m = &config.model;
        let generator = Generator::new(m, &mut rng)?;
        let discriminator = Discriminator::new(m, true, &mut rng)?;
        let backbone = (!config.scratch_predictor).then_some(&segmenter.backbone);
        let predictor = CameraPredictor::new(m, backbone, &mut rng)?;
        let (b1, b2) = config.gan_betas;
        let (c1, c2) = config.camera_betas;
        let opt_g = Adam::new(AdamConfig::new(config.lr_gan, b1, b2), &generator.store);
        let opt_d = Adam::new(AdamConfig::new(config.lr_gan, b1, b2), &discriminator.store);
        let opt_c = Adam::new(AdamConfig::new(config.lr_camera, c1, c2), &predictor.store);
        let opt_backbone = config.scratch_predictor.then(|| {
            Adam::new(
                AdamConfig::new(config.lr_camera, c1, c2),
                &predictor.backbone.store,
            )
        });
        let pool = Self::build_pool(&config, &data)?;
        Ok(Trainer {
            config,
            generator,
            discriminator,
            predictor,
            segmenter,
            opt_g,
            opt_d,
            opt_c,
            opt_backbone,
            step: 0,
            gan_steps: 0,
            camera_steps: 0,
            log: Vec::new(),
            evals: Vec::new(),
            data,
            pool,
        })
    }

    fn build_pool(config: &TrainConfig, data: &TrainData) -> Result<Vec<usize>> {
        let w = config.model.image_size;
        if data.images.is_empty() || data.images.len() != data.anchors.len() {
            return Err(Error::Config(format!(
                "training data needs matching images and anchors, got {} and {}",
                data.images.len(),
                data.anchors.len()
            )));
        }
        if let Some(bad) = data.images.iter().find(|t| t.shape != [3, w, w]) {
            return Err(Error::Config(format!(
                "dataset image shape {:?} does not match image_size {w}",
                bad.shape
            )));
        }
        let idx: Vec<usize> = (0..data.images.len()).collect();
        if config.balance && !config.anchor_free {
            balance_by_anchor(&idx, |&i| data.anchors[i])
        } else {
            Ok(idx)
        }
    }

    /// Indices real batches are drawn from (after balancing).
    pub fn pool(&self) -> &[usize] {
        &self.pool
    }

    pub fn data(&self) -> &TrainData {
        &self.data
    }

    /// Per-anchor counts of the sampling pool.
    pub fn pool_anchor_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for &i in &self.pool {
            c[self.data.anchors[i]] += 1;
        }
        c
    }

    fn step_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step + 1);
        rng
    }

    fn render_config(&self) -> Result<RenderConfig> {
        Ok(RenderConfig::for_room(
            &self.config.model.max_room()?,
            self.config.model.render_steps,
        ))
    }

    pub fn gan_hash(&self) -> String {
        stores_hash(&[&self.generator.store, &self.discriminator.store])
    }

    pub fn camera_hash(&self) -> String {
        stores_hash(&[&self.predictor.store, &self.predictor.backbone.store])
    }

    fn frozen_hash(&self) -> String {
        stores_hash(&[&self.segmenter.backbone.store, &self.segmenter.head_store])
    }

    /// Hash of every parameter set.
    pub fn params_hash(&self) -> String {
        stores_hash(&[
            &self.generator.store,
            &self.discriminator.store,
            &self.predictor.store,
            &self.predictor.backbone.store,
            &self.segmenter.backbone.store,
            &self.segmenter.head_store,
        ])
    }

    fn is_gan_step(&self) -> bool {
        let k = (self.config.gan_steps_per_cycle + self.config.camera_steps_per_cycle) as u64;
        self.step % k < self.config.gan_steps_per_cycle as u64
    }

    fn express(&self, system: &AnchorSystem, cam: &GlobalCamera) -> LpaPose {
        if self.config.anchor_free {
            system.to_lpa_with_anchor(cam, 0)
        } else {
            system.to_lpa(cam)
        }
    }

    fn psr_pose(&self, field: &TriPlaneField, rng: &mut ChaCha8Rng) -> Result<LpaPose> {
        let system = AnchorSystem::new(field.room)?;
        let cam = psr_camera(field, &field.room, &self.config.sampler, rng);
        Ok(self.express(&system, &cam))
    }

    /// GSR candidates from the frozen predictor on random real images; the
    /// anchor comes from the image label (anchor 0 without anchors).
    fn gsr_candidates(&self, rng: &mut ChaCha8Rng) -> Result<Vec<LpaPose>> {
        let k = self.config.sampler.gsr_candidates.max(1);
        let idx: Vec<usize> = (0..k)
            .map(|_| self.pool[rng.random_range(0..self.pool.len())])
            .collect();
        let images = Tensor::stack(
            &idx.iter()
                .map(|&i| &self.data.images[i])
                .collect::<Vec<_>>(),
        );
        let mut poses = self.predictor.predict_camera(&images)?;
        for (p, &i) in poses.iter_mut().zip(&idx) {
            p.anchor = if self.config.anchor_free {
                0
            } else {
                self.data.anchors[i]
            };
        }
        Ok(poses)
    }

    fn views(
        &self,
        fields: &[TriPlaneField],
        use_gsr: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Views> {
        let w = self.config.model.image_size;
        let far = self.render_config()?.far;
        let candidates = if use_gsr {
            Some(self.gsr_candidates(rng)?)
        } else {
            None
        };
        let mut v = Views {
            poses: Vec::new(),
            rays: Vec::new(),
            far: Vec::new(),
            boundary: Vec::new(),
            sampler: if use_gsr { "gsr" } else { "psr" },
        };
        for field in fields {
            let pose = match &candidates {
                Some(c) => {
                    match gsr_select(field, &field.room, c, self.config.sampler.temperature, rng) {
                        Ok(p) => p,
                        Err(_) => {
                            v.sampler = "gsr+psr";
                            self.psr_pose(field, rng)?
                        }
                    }
                }
                None => self.psr_pose(field, rng)?,
            };
            let rays = generate_rays(&pose, &field.room, (w, w))?;
            let db = boundary_depths(&rays, &field.room);
            v.far.push(
                db.iter()
                    .map(|d| (d + self.config.render_margin).min(far))
                    .collect(),
            );
            v.boundary.extend(db);
            v.rays.push(rays);
            v.poses.push(pose);
        }
        Ok(v)
    }

    fn render(
        &self,
        g: &mut Graph,
        fv: &FieldVars,
        views: &Views,
        rng: &mut ChaCha8Rng,
    ) -> Result<RenderVars> {
        let cfg = self.render_config()?;
        let refs: Vec<&Rays> = views.rays.iter().collect();
        let samples = RaySamples::new(
            &self.generator.layout(),
            &refs,
            &cfg,
            Some(&views.far),
            Some(rng as &mut dyn rand::RngCore),
        );
        Ok(render_graph(
            g,
            fv,
            &self.generator.layout(),
            &samples,
            &cfg,
        ))
    }

    fn sample_inputs(&self, b: usize, rng: &mut ChaCha8Rng) -> (Vec<RoomBox>, Vec<f64>) {
        let rooms: Vec<RoomBox> = (0..b).map(|_| self.config.rooms.sample(rng)).collect();
        let latents = (0..b)
            .flat_map(|_| self.generator.sample_latent(rng))
            .collect();
        (rooms, latents)
    }

    fn anchor_loss_enabled(&self) -> bool {
        !self.config.anchor_free
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step_gan(&mut self) -> Result<StepLog> {
        let mut rng = self.step_rng();
        let mut log = StepLog::new(self.step, Phase::Gan);
        let b = self.config.batch_size;
        let w = self.config.losses;
        let bins = self.config.model.pose_bins();
        let (rooms, latents) = self.sample_inputs(b, &mut rng);
        let real_idx: Vec<usize> = (0..b)
            .map(|_| self.pool[rng.random_range(0..self.pool.len())])
            .collect();
        let frozen_before = (self.camera_hash(), self.frozen_hash());
        let saved = (
            self.generator.store.clone(),
            self.discriminator.store.clone(),
            self.opt_g.clone(),
            self.opt_d.clone(),
        );

        // Generator.
        let mut g = Graph::new();
        let fv = self.generator.forward(&mut g, true, &latents, &rooms)?;
        let fields = concrete_fields(&g, &fv, &self.generator.layout(), &rooms);
        let use_gsr = self.gan_steps >= self.config.warmup_gan_steps;
        let views = self.views(&fields, use_gsr, &mut rng)?;
        log.sampler = views.sampler.into();
        let out = self.render(&mut g, &fv, &views, &mut rng)?;
        let fake = g.value(out.rgb).clone();
        let fg: Vec<bool> = self
            .segmenter
            .segment(&fake)?
            .concat()
            .iter()
            .map(|&m| m == 1)
            .collect();
        let lb = boundary_loss_graph(&mut g, out.depth, &fg, &views.boundary)?;
        let depth = &g.value(out.depth).data;
        let bg: Vec<f64> = (0..depth.len())
            .filter(|&i| !fg[i])
            .map(|i| (depth[i] - views.boundary[i]).abs())
            .collect();
        log.bg_depth_error = Some(if bg.is_empty() {
            0.0
        } else {
            bg.iter().sum::<f64>() / bg.len() as f64
        });
        let fake_anchors: Vec<usize> = views.poses.iter().map(|p| p.anchor).collect();
        let dv =
            self.discriminator
                .forward_anchored(&mut g, false, out.rgb, Some(&fake_anchors))?;
        let adv = adv_real_graph(&mut g, dv.realness);
        let pose_logits = dv
            .pose
            .ok_or_else(|| Error::invalid("discriminator has no pose head"))?;
        let (cam, _) = camera_ce_graph_with(
            &mut g,
            pose_logits,
            &views.poses,
            &bins,
            self.anchor_loss_enabled(),
        )?;
        let t1 = g.scale(lb, w.boundary);
        let t2 = g.scale(cam, w.camera);
        let total = g.add_all(&[adv, t1, t2]);
        log.adv_g = Some(g.value(adv).item());
        log.boundary = Some(g.value(lb).item());
        log.camera_g = Some(g.value(cam).item());
        log.loss_g = Some(g.value(total).item());
        let grads_g = g.backward(total).for_store(&self.generator.store);
        drop(g);

        // Discriminator on real images and the (detached) fakes.
        let real = Tensor::stack(
            &real_idx
                .iter()
                .map(|&i| &self.data.images[i])
                .collect::<Vec<_>>(),
        );
        let real_anchors: Vec<usize> = real_idx
            .iter()
            .map(|&i| {
                if self.config.anchor_free {
                    0
                } else {
                    self.data.anchors[i]
                }
            })
            .collect();
        let (r1_value, r1_dir) = self.r1_direction(&real, &real_anchors)?;
        let mut g = Graph::new();
        let xr = g.constant(real.clone());
        let xf = g.constant(fake);
        let dr = self
            .discriminator
            .forward_anchored(&mut g, true, xr, Some(&real_anchors))?;
        let df = self
            .discriminator
            .forward_anchored(&mut g, true, xf, Some(&fake_anchors))?;
        let a_real = adv_real_graph(&mut g, dr.realness);
        let a_fake = adv_fake_graph(&mut g, df.realness);
        let adv_d = g.add(a_real, a_fake);
        let (cam_d, _) = camera_ce_graph_with(
            &mut g,
            df.pose.expect("pose head"),
            &views.poses,
            &bins,
            self.anchor_loss_enabled(),
        )?;
        let mut terms = vec![adv_d, g.scale(cam_d, w.camera)];
        if w.r1 > 0.0 {
            // d/dtheta of this surrogate equals d/dtheta of 0.5 |grad_x D|^2.
            let (plus, minus, weights) = r1_dir;
            let xp = g.constant(plus);
            let xm = g.constant(minus);
            let dp = self
                .discriminator
                .forward_anchored(&mut g, true, xp, Some(&real_anchors))?;
            let dm = self
                .discriminator
                .forward_anchored(&mut g, true, xm, Some(&real_anchors))?;
            let diff = g.sub(dp.realness, dm.realness);
            let wv = g.constant(weights);
            let weighted = g.mul(diff, wv);
            let s = g.sum(weighted);
            terms.push(g.scale(s, w.r1));
        }
        if w.distill_enabled && w.distill > 0.0 {
            let feats = self.segmenter.backbone.forward(&mut g, false, xr)?;
            let (a, bshape) = (g.shape(dr.mid).to_vec(), g.shape(feats.scales[1]).to_vec());
            if a[2..] != bshape[2..] {
                return Err(Error::invalid(format!(
                    "distillation maps differ: {a:?} vs {bshape:?}"
                )));
            }
            let c = a[1].min(bshape[1]);
            let dm = g.slice_channels(dr.mid, 0, c);
            let bm = g.slice_channels(feats.scales[1], 0, c);
            let k = feature_matching_graph(&mut g, dm, bm);
            log.distill = Some(g.value(k).item());
            terms.push(g.scale(k, w.distill));
        }
        let total_d = g.add_all(&terms);
        log.adv_d = Some(g.value(adv_d).item());
        log.camera_d = Some(g.value(cam_d).item());
        log.r1 = Some(r1_value);
        log.loss_d = Some(
            log.adv_d.unwrap()
                + w.camera * log.camera_d.unwrap()
                + w.r1 * r1_value
                + log.distill.map_or(0.0, |k| w.distill * k),
        );
        let grads_d = g.backward(total_d).for_store(&self.discriminator.store);

        let finite = log.values().iter().all(|v| v.is_finite())
            && grads_g
                .iter()
                .chain(&grads_d)
                .all(|gr| gr.iter().all(|v| v.is_finite()));
        if finite {
            self.opt_g.update(&mut self.generator.store, &grads_g);
            self.opt_d.update(&mut self.discriminator.store, &grads_d);
        }
        if !finite || !self.generator.store.is_finite() || !self.discriminator.store.is_finite() {
            warn!(
                "step {}: non-finite GAN loss or parameters; restoring pre-step state",
                self.step
            );
            (
                self.generator.store,
                self.discriminator.store,
                self.opt_g,
                self.opt_d,
            ) = saved;
            log.status = "skipped_nonfinite".into();
        }
        if (self.camera_hash(), self.frozen_hash()) != frozen_before {
            return Err(Error::invalid("GAN step modified frozen parameters"));
        }
        self.gan_steps += 1;
        self.step += 1;
        Ok(log)
    }

    /// `0.5 * mean |grad_x D(x)|^2` on real images, plus the two perturbed
    /// batches and per-image weights of the finite-difference surrogate.
    fn r1_direction(
        &self,
        real: &Tensor,
        anchors: &[usize],
    ) -> Result<(f64, (Tensor, Tensor, Tensor))> {
        let b = real.shape[0];
        let mut g = Graph::new();
        let x = g.leaf(real.clone());
        let d = self
            .discriminator
            .forward_anchored(&mut g, false, x, Some(anchors))?;
        let s = g.sum(d.realness);
        let grads = g.backward(s);
        let gx = grads
            .wrt(x)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; real.numel()]);
        let per = real.numel() / b;
        let mut plus = real.clone();
        let mut minus = real.clone();
        let mut weights = Vec::with_capacity(b);
        let mut total = 0.0;
        for i in 0..b {
            let gi = &gx[i * per..(i + 1) * per];
            let norm2: f64 = gi.iter().map(|v| v * v).sum();
            total += norm2;
            let eps = 1e-3 / norm2.sqrt().max(1e-12);
            for (k, v) in gi.iter().enumerate() {
                plus.data[i * per + k] += eps * v;
                minus.data[i * per + k] -= eps * v;
            }
            weights.push(1.0 / (2.0 * eps * b as f64));
        }
        Ok((
            0.5 * total / b as f64,
            (plus, minus, Tensor::new(vec![b, 1], weights)),
        ))
    }

    /// One camera-predictor update on PSR views of frozen-generator scenes.
    pub fn train_step_camera(&mut self) -> Result<StepLog> {
        let mut rng = self.step_rng();
        let mut log = StepLog::new(self.step, Phase::Camera);
        log.sampler = "psr".into();
        let b = self.config.camera_batch_size;
        let bins = self.config.model.pose_bins();
        let (rooms, latents) = self.sample_inputs(b, &mut rng);
        let before = (self.gan_hash(), self.frozen_hash());
        let saved = (
            self.predictor.clone(),
            self.opt_c.clone(),
            self.opt_backbone.clone(),
        );

        let mut g = Graph::new();
        let fv = self.generator.forward(&mut g, false, &latents, &rooms)?;
        let fields = concrete_fields(&g, &fv, &self.generator.layout(), &rooms);
        let views = self.views(&fields, false, &mut rng)?;
        let out = self.render(&mut g, &fv, &views, &mut rng)?;
        let images = g.value(out.rgb).clone();
        drop(g);

        let mut g = Graph::new();
        let x = g.constant(images);
        let logits = self.predictor.forward(&mut g, true, x)?;
        let (loss, _) = camera_ce_graph_with(
            &mut g,
            logits,
            &views.poses,
            &bins,
            self.anchor_loss_enabled(),
        )?;
        let value = g.value(loss).item();
        log.loss_c = Some(value);
        let grads = g.backward(loss);
        let gc = grads.for_store(&self.predictor.store);
        let gb = self
            .opt_backbone
            .is_some()
            .then(|| grads.for_store(&self.predictor.backbone.store));
        let finite = value.is_finite()
            && gc
                .iter()
                .chain(gb.iter().flatten())
                .all(|v| v.iter().all(|x| x.is_finite()));
        if finite {
            self.opt_c.update(&mut self.predictor.store, &gc);
            if let (Some(opt), Some(gb)) = (self.opt_backbone.as_mut(), gb) {
                opt.update(&mut self.predictor.backbone.store, &gb);
            }
        }
        if !finite || !self.predictor.store.is_finite() {
            warn!(
                "step {}: non-finite camera loss; restoring pre-step state",
                self.step
            );
            (self.predictor, self.opt_c, self.opt_backbone) = saved;
            log.status = "skipped_nonfinite".into();
        }
        if (self.gan_hash(), self.frozen_hash()) != before {
            return Err(Error::invalid("camera step modified frozen parameters"));
        }
        self.camera_steps += 1;
        self.step += 1;
        Ok(log)
    }

    /// The next iteration of the alternation schedule.
    pub fn step_once(&mut self) -> Result<StepLog> {
        let log = if self.is_gan_step() {
            self.train_step_gan()?
        } else {
            self.train_step_camera()?
        };
        self.log.push(log.clone());
        Ok(log)
    }

    pub fn evaluate(&mut self, eval: &EvalSet) -> Result<EvalRow> {
        let mae = eval_pose_mae(
            &self.predictor,
            &eval.images,
            &eval.truth,
            self.config.anchor_free,
        )?;
        let row = EvalRow {
            round: self.evals.len(),
            step: self.step,
            mae,
        };
        info!(
            "eval round {} at step {}: yaw MAE {:.2}, anchor accuracy {:.3}",
            row.round, row.step, mae.yaw, mae.anchor_accuracy
        );
        self.evals.push(row);
        Ok(row)
    }

    /// Runs until `config.steps` iterations, evaluating and checkpointing at
    /// the configured cadence. Evaluates once before the first step.
    pub fn train(&mut self, eval: Option<&EvalSet>, out: Option<&Path>) -> Result<()> {
        if let Some(e) = eval {
            if self.evals.is_empty() {
                self.evaluate(e)?;
            }
        }
        while self.step < self.config.steps {
            let log = self.step_once()?;
            if self.step % 50 == 0 {
                info!("step {} {:?}: {:?}", log.step, log.phase, log.values());
            }
            if let Some(e) = eval {
                if self.config.eval_every > 0 && self.step % self.config.eval_every == 0 {
                    self.evaluate(e)?;
                }
            }
            if let Some(dir) = out {
                if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0
                {
                    save_checkpoint(self, dir)?;
                }
            }
        }
        if let Some(e) = eval {
            if self.evals.last().is_none_or(|r| r.step != self.step) {
                self.evaluate(e)?;
            }
        }
        if let Some(dir) = out {
            save_checkpoint(self, dir)?;
        }
        Ok(())
    }

    /// Fields from a frozen generator for evaluation and rendering.
    pub fn sample_fields(&self, n: usize, seed: u64) -> Result<Vec<TriPlaneField>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let room = self.config.rooms.sample(&mut rng);
                let z = self.generator.sample_latent(&mut rng);
                self.generator.generate(&z, &room)
            })
            .collect()
    }
}

/// Plain-value fields of a batched generator pass.
fn concrete_fields(
    g: &Graph,
    fv: &FieldVars,
    layout: &PlaneLayout,
    rooms: &[RoomBox],
) -> Vec<TriPlaneField> {
    let planes = g.value(fv.planes);
    let layers: Vec<(Tensor, Tensor)> = fv
        .decoder
        .iter()
        .map(|&(w, b)| (g.value(w).clone(), g.value(b).clone()))
        .collect();
    rooms
        .iter()
        .enumerate()
        .map(|(i, room)| TriPlaneField {
            layout: layout.clone(),
            planes: planes.index_first(i),
            decoder: DecoderWeights {
                layers: layers.clone(),
                density_scale: fv.density_scale,
            },
            room: *room,
        })
        .collect()
}
