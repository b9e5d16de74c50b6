//! Training, evaluation and rendering of rig-bound Gaussian sets.
//!
//! One iteration poses the rig for a single training frame, binds every
//! Gaussian to its posed triangle, rasterizes, and back-propagates the
//! photometric loss through the rasterizer and the binding into the local
//! Gaussian parameters. The rig itself is never optimized.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binding::{
    bind_all, bind_backward, init_gaussians, load_checkpoint, save_checkpoint, triangle_frame, BoundGaussianSet, CheckpointInfo,
};
use crate::container::{fnv1a64, write_atomic};
use crate::dataset::{Dataset, FrameImages, SplitName};
use crate::error::{Error, Result};
use crate::imaging::{save_png, Image};
use crate::loss::{psnr, ssim, total_loss, LossWeights, MetricRegistry};
use crate::math::Vec3;
use crate::optim::{decay_factor, densify_and_prune, AdamConfig, DensifyConfig, DensityStats, GaussianAdam, GroupRates, LogRecord};
use crate::raster::{rasterize, rasterize_backward, Camera, RasterConfig};
use crate::rig::{rig_file_checksum, Pose, Rig, Shape};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub total_iters: usize,
    /// Absolute initial count; when absent, `initial_per_face × faces`.
    pub initial_gaussians: Option<usize>,
    pub initial_per_face: f64,
    pub densify: DensifyConfig,
    pub loss: LossWeights,
    pub lr: GroupRates,
    pub adam: AdamConfig,
    pub raster: RasterConfig,
    pub seed: u64,
    /// Iterations between checkpoints; 0 means ten densify intervals.
    pub checkpoint_every: usize,
    /// Iterations between log lines (density events are always logged).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Desk-scale preset sized for a laptop CPU and meshes of a few
    /// thousand faces.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            total_iters: 2000,
            initial_gaussians: None,
            initial_per_face: 2.0,
            densify: DensifyConfig {
                interval: 100,
                max_gaussians: 16_000,
                ..DensifyConfig::default()
            },
            loss: LossWeights::default(),
            lr: GroupRates::default(),
            adam: AdamConfig::default(),
            raster: RasterConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            log_every: 10,
        }
    }

    /// 50k iterations, 30k initial Gaussians, density events every 500
    /// iterations up to 100k Gaussians.
    pub fn paper_scale() -> Self {
        Self {
            preset: "paper-scale".into(),
            total_iters: 50_000,
            initial_gaussians: Some(30_000),
            densify: DensifyConfig::default(),
            log_every: 100,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-scale" => Ok(Self::paper_scale()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn initial_count(&self, face_count: usize) -> usize {
        self.initial_gaussians
            .unwrap_or_else(|| (self.initial_per_face * face_count as f64).ceil() as usize)
    }

    pub fn checkpoint_interval(&self) -> usize {
        if self.checkpoint_every > 0 {
            self.checkpoint_every
        } else {
            self.densify.interval * 10
        }
    }

    pub fn validate(&self, face_count: usize) -> Result<()> {
        let n = self.initial_count(face_count);
        if n == 0 {
            return Err(Error::Config("initial gaussian count must be positive".into()));
        }
        if !(self.initial_per_face > 0.0) {
            return Err(Error::Config("initial_per_face must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        self.loss.validate()?;
        self.densify.validate(n)?;
        let rates = [self.lr.position, self.lr.rotation, self.lr.log_scale, self.lr.opacity, self.lr.color];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// FNV-1a of the canonical JSON form.
    pub fn hash(&self) -> u64 {
        fnv1a64(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        apply_overrides(self, overrides)
    }
}

/// Applies `key=value` overrides to any serializable config, with dotted
/// keys into nested tables and values parsed as JSON (falling back to a
/// plain string).
pub fn apply_overrides<T: Serialize + serde::de::DeserializeOwned>(config: &T, overrides: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(config)?;
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut slot = &mut value;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = parsed;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

/// Rest-pose frame scale of every face, used to size Gaussians in metres.
pub fn rest_face_scales(rig: &Rig, shape: &Shape) -> Result<Vec<f64>> {
    let verts = rig.shaped_vertices(shape)?;
    rig.faces()
        .iter()
        .enumerate()
        .map(|(f, face)| {
            let [a, b, c] = face.map(|k| verts[k as usize]);
            Ok(triangle_frame(f, &a, &b, &c)?.scale)
        })
        .collect()
}

fn check_set(set: &BoundGaussianSet) -> Result<()> {
    for i in 0..set.len() {
        let g = set.get(i);
        let ok = g.position.iter().chain(&g.rotation).chain(&g.log_scale).chain(&g.color).all(|v| v.is_finite())
            && g.opacity_logit.is_finite();
        if !ok {
            return Err(Error::NonFiniteGaussian { index: i });
        }
    }
    Ok(())
}

/// Epoch-shuffled order of training frames, one frame per iteration.
fn frame_schedule(train: &[usize], total: usize, seed: u64) -> Vec<usize> {
    let mut order = Vec::with_capacity(total);
    let mut epoch = 0u64;
    while order.len() < total {
        let mut e = train.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d_u64.wrapping_mul(epoch + 1));
        e.shuffle(&mut rng);
        order.extend(e);
        epoch += 1;
    }
    order.truncate(total);
    order
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub gaussians: BoundGaussianSet,
    pub log: Vec<LogRecord>,
    pub iterations: usize,
    pub final_loss: f64,
    pub seconds: f64,
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Extra fields recorded in the run manifest (dataset path, pose
    /// override, command line).
    pub inputs: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub rig_checksum: String,
    pub dataset_checksum: String,
    pub inputs: serde_json::Value,
    pub wall_clock_seconds: f64,
    pub final_metrics: serde_json::Value,
}

pub const FINAL_CHECKPOINT: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RUN_MANIFEST: &str = "run_manifest.json";

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

struct FrameCache<'a> {
    dataset: &'a Dataset,
    images: HashMap<usize, (Image, Image)>,
}

impl<'a> FrameCache<'a> {
    /// Masked ground truth and mask for frame `i`.
    fn get(&mut self, i: usize) -> Result<&(Image, Image)> {
        if !self.images.contains_key(&i) {
            let FrameImages { rgb, mask } = self.dataset.load_frame(i)?;
            self.images.insert(i, (rgb.masked(&mask)?, mask));
        }
        Ok(&self.images[&i])
    }
}

/// Trains a freshly initialized Gaussian set on the dataset's training
/// split. Reads only training frames. Deterministic for fixed inputs.
pub fn train(dataset: &Dataset, rig: &Rig, config: &TrainConfig, output: Option<&RunOutput>) -> Result<TrainOutcome> {
    let start = Instant::now();
    config.validate(rig.face_count())?;
    let shape = dataset.shape().clone();
    let train_frames = dataset.split(SplitName::Train).to_vec();
    let total = config.total_iters;
    let mut set = init_gaussians(rig.face_count(), config.initial_count(rig.face_count()), config.seed)?;
    let mut adam = GaussianAdam::new(set.len(), config.adam);
    let mut stats = DensityStats::new(set.len());
    let face_scales = rest_face_scales(rig, &shape)?;
    let mean_face_scale = face_scales.iter().sum::<f64>() / face_scales.len() as f64;
    let extent = dataset.scene_extent();
    // position rates are given in metres; local positions are in face scales
    let position_factor = extent / mean_face_scale;
    let schedule = frame_schedule(&train_frames, total, config.seed);

    let mut posed_cache: HashMap<usize, Vec<Vec3>> = HashMap::new();
    let mut frames = FrameCache {
        dataset,
        images: HashMap::new(),
    };
    if let Some(out) = output {
        std::fs::create_dir_all(out.dir.join("checkpoints"))?;
    }
    let mut log_file = match output {
        Some(out) => Some(std::io::BufWriter::new(std::fs::File::create(out.dir.join(LOG_FILE))?)),
        None => None,
    };
    let mut log = Vec::new();
    let mut final_loss = f64::NAN;

    let mut failed_at = 0;
    let looped: Result<()> = (|| {
        for iter in 0..total {
            failed_at = iter + 1;
            let fi = schedule[iter];
            let frame = &dataset.frames()[fi];
            if !posed_cache.contains_key(&fi) {
                posed_cache.insert(fi, rig.skin_vertices(&frame.pose, &shape)?);
            }
            let posed = &posed_cache[&fi];
            let (gt, mask) = frames.get(fi)?;
            let binding = bind_all(&set, posed, rig.faces())?;
            let out = rasterize(&binding.gaussians, &frame.camera, &config.raster)?;
            let loss = total_loss(&out.rgb, &out.alpha, gt, mask, &config.loss)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteGradient { group: "loss".into() });
            }
            final_loss = loss.total;
            let world = rasterize_backward(&binding.gaussians, &frame.camera, &config.raster, &out, &loss.d_rgb, &loss.d_alpha)?;
            let local = bind_backward(&set, &binding, &world, None)?;
            let decay = decay_factor(iter, total);
            let lrs = GroupRates {
                position: config.lr.position * position_factor * decay,
                rotation: config.lr.rotation * decay,
                log_scale: config.lr.log_scale * decay,
                opacity: config.lr.opacity * decay,
                color: config.lr.color * decay,
            };
            adam.step(&mut set, &local, &lrs)?;
            let visible: Vec<bool> = out.splats.iter().map(|s| s.visible).collect();
            stats.accumulate(&world.mean2d, &visible, frame.camera.width, frame.camera.height);

            let done = iter + 1;
            let mut record = LogRecord {
                iter: done,
                count: set.len(),
                split: 0,
                cloned: 0,
                pruned: 0,
                loss: loss.total,
                lr: config.lr.position * decay,
            };
            let event = config.densify.is_event(done, total);
            if event {
                let seed = config.seed ^ (done as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let report = densify_and_prune(&mut set, &mut adam, &mut stats, &config.densify, &face_scales, extent, seed)?;
                record.split = report.split;
                record.cloned = report.cloned;
                record.pruned = report.pruned;
                record.count = set.len();
                if !set.lengths_consistent() || !adam.lengths_consistent(set.len()) {
                    return Err(Error::Contract(format!("arrays out of sync after density event at {done}")));
                }
            }
            if event || done % config.log_every == 0 || done == total {
                if let Some(f) = log_file.as_mut() {
                    serde_json::to_writer(&mut *f, &record)?;
                    f.write_all(b"\n")?;
                }
                log.push(record);
            }
            if let Some(out) = output {
                if done % config.checkpoint_interval() == 0 && done < total {
                    check_set(&set)?;
                    let path = out.dir.join("checkpoints").join(format!("iter_{done:06}.json"));
                    save_checkpoint(&set, CheckpointInfo { iteration: done, seed: config.seed }, &path)?;
                }
            }
        }
        Ok(())
    })();
    if let Err(e) = looped {
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &serde_json::json!({ "iter": failed_at, "error": e.to_string() }))?;
            f.write_all(b"\n")?;
            f.flush()?;
        }
        return Err(e);
    }
    check_set(&set)?;
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    let seconds = start.elapsed().as_secs_f64();
    if let Some(out) = output {
        save_checkpoint(
            &set,
            CheckpointInfo {
                iteration: total,
                seed: config.seed,
            },
            &out.dir.join(FINAL_CHECKPOINT),
        )?;
        let manifest = RunManifest {
            engine_version: ENGINE_VERSION.into(),
            config: config.clone(),
            config_hash: hex(config.hash()),
            rig_checksum: hex(rig_file_checksum(dataset.rig_path())?),
            dataset_checksum: hex(dataset.checksum()?),
            inputs: out.inputs.clone(),
            wall_clock_seconds: seconds,
            final_metrics: serde_json::json!({
                "final_loss": final_loss,
                "gaussians": set.len(),
                "iterations": total,
            }),
        };
        write_atomic(&out.dir.join(RUN_MANIFEST), &serde_json::to_vec_pretty(&manifest)?)?;
    }
    Ok(TrainOutcome {
        gaussians: set,
        log,
        iterations: total,
        final_loss,
        seconds,
    })
}

pub fn render_frame(set: &BoundGaussianSet, rig: &Rig, pose: &Pose, shape: &Shape, camera: &Camera, raster: &RasterConfig) -> Result<(Image, Image)> {
    let posed = rig.skin_vertices(pose, shape)?;
    let binding = bind_all(set, &posed, rig.faces())?;
    let out = rasterize(&binding.gaussians, camera, raster)?;
    Ok((out.rgb, out.alpha))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Metrics on the mask's bounding box, when requested.
    pub crop_psnr: Option<f64>,
    pub crop_ssim: Option<f64>,
    #[serde(default, skip_serializing_if = "HashMap::is_empty")]
    pub extra: HashMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: SplitName,
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_crop_psnr: Option<f64>,
    pub mean_crop_ssim: Option<f64>,
    #[serde(default, skip_serializing_if = "HashMap::is_empty")]
    pub mean_extra: HashMap<String, f64>,
}

fn mask_bbox(mask: &Image) -> Option<(usize, usize, usize, usize)> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y, 0) > 0.5 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    (x0 != usize::MAX).then(|| (x0, y0, x1 - x0 + 1, y1 - y0 + 1))
}

/// PSNR and SSIM of renders against masked ground truth over one split.
/// Full-frame metrics always; `crop` adds metrics on the mask's bounding
/// box (at least the SSIM window). Registered perceptual metrics are added
/// as extra columns.
pub fn eval(
    dataset: &Dataset,
    split: SplitName,
    rig: &Rig,
    set: &BoundGaussianSet,
    raster: &RasterConfig,
    crop: bool,
    metrics: &MetricRegistry,
) -> Result<EvalReport> {
    let mut frames = Vec::new();
    for &i in dataset.split(split) {
        let frame = &dataset.frames()[i];
        let FrameImages { rgb, mask } = dataset.load_frame(i)?;
        let gt = rgb.masked(&mask)?;
        let (pred, _) = render_frame(set, rig, &frame.pose, dataset.shape(), &frame.camera, raster)?;
        let mut fm = FrameMetrics {
            frame: i,
            psnr: psnr(&pred, &gt)?,
            ssim: ssim(&pred, &gt)?.0,
            crop_psnr: None,
            crop_ssim: None,
            extra: HashMap::new(),
        };
        if crop {
            if let Some((x, y, w, h)) = mask_bbox(&mask) {
                let win = crate::loss::SSIM_WINDOW;
                let (w, h) = (w.max(win).min(gt.width), h.max(win).min(gt.height));
                let (x, y) = (x.min(gt.width - w), y.min(gt.height - h));
                let (pc, gc) = (pred.crop(x, y, w, h), gt.crop(x, y, w, h));
                fm.crop_psnr = Some(psnr(&pc, &gc)?);
                fm.crop_ssim = Some(ssim(&pc, &gc)?.0);
            }
        }
        for name in metrics.names() {
            let m = metrics.get(&name).expect("registered metric");
            fm.extra.insert(name, m.distance(&pred, &gt)?);
        }
        frames.push(fm);
    }
    if frames.is_empty() {
        return Err(Error::dataset("split", "nothing to evaluate"));
    }
    let n = frames.len() as f64;
    let mean = |f: &dyn Fn(&FrameMetrics) -> f64| frames.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&FrameMetrics) -> Option<f64>| {
        let v: Vec<f64> = frames.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let mut mean_extra = HashMap::new();
    for name in metrics.names() {
        mean_extra.insert(name.clone(), mean(&|f| f.extra[&name]));
    }
    Ok(EvalReport {
        split,
        mean_psnr: mean(&|f| f.psnr),
        mean_ssim: mean(&|f| f.ssim),
        mean_crop_psnr: mean_opt(&|f| f.crop_psnr),
        mean_crop_ssim: mean_opt(&|f| f.crop_ssim),
        mean_extra,
        frames,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut extra: Vec<&String> = self.mean_extra.keys().collect();
        extra.sort();
        let mut s = String::from("frame,psnr,ssim,crop_psnr,crop_ssim");
        for e in &extra {
            s.push(',');
            s.push_str(e);
        }
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for f in &self.frames {
            s.push_str(&format!("{},{},{},{},{}", f.frame, f.psnr, f.ssim, opt(f.crop_psnr), opt(f.crop_ssim)));
            for e in &extra {
                s.push_str(&format!(",{}", f.extra[*e]));
            }
            s.push('\n');
        }
        s.push_str(&format!("mean,{},{},{},{}", self.mean_psnr, self.mean_ssim, opt(self.mean_crop_psnr), opt(self.mean_crop_ssim)));
        for e in &extra {
            s.push_str(&format!(",{}", self.mean_extra[*e]));
        }
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_atomic(&dir.join(format!("{stem}.json")), &serde_json::to_vec_pretty(self)?)?;
        write_atomic(&dir.join(format!("{stem}.csv")), self.to_csv().as_bytes())
    }
}

/// Renders `set` for every `(pose, camera)` into `dir/%06d.png`.
pub fn render(rig: &Rig, set: &BoundGaussianSet, shape: &Shape, frames: &[(Pose, Camera)], raster: &RasterConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    frames
        .iter()
        .enumerate()
        .map(|(i, (pose, camera))| {
            let (rgb, _) = render_frame(set, rig, pose, shape, camera, raster)?;
            let path = dir.join(format!("{i:06}.png"));
            save_png(&rgb, &path)?;
            Ok(path)
        })
        .collect()
}

pub fn load_trained(path: &Path) -> Result<BoundGaussianSet> {
    Ok(load_checkpoint(path)?.0)
}
