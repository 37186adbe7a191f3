//! End-to-end runs: data, training, two-stage generation, evaluation and
//! the blending ablation, all persisted under one run directory.
//!
//! A run directory holds `config.json`, `checkpoints/`, `samples/`,
//! `metrics.json` and `logs/`. Per-item seeds are `mix_seed(component,
//! dataset index, crop index)`, so a frame's output does not depend on which
//! other frames are generated with it or in what order.

mod config;
mod plot;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use config::{mix_seed, AblationConfig, ConditioningConfig, GenerateConfig, HandSource, RunConfig, SeedTag};

use crate::conditioning::{
    assemble_canvas, downsize_to_latent, postprocess_mask, render_heatmaps, save_mask, save_rgb, Canvas, HandCrop, Hands, Placement,
    Skeleton, CANVAS_FILL, LEFT, RIGHT,
};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::metrics::{
    self, boundary_artifact_score, boundary_band, bootstrap_mean, EvalFrame, FeatureExtractor, Interval, MetricsReport, RandomProjection,
    StyleCnn, StyleCnnConfig,
};
use crate::morphology::Mask;
use crate::nn::ParamStore;
use crate::outpaint::{outpaint, LatentCodec, Net, OutpaintConfig, OutpaintJob, Strategy};
use crate::rng::{self, Domain};
use crate::schedule::{ddim_sigma, gaussian, sampler_step, step_pairs, NoiseSchedule, SamplerConfig};
use crate::synth::{
    crop_window, generate_bodies, generate_hands, hand_groups, load_bodies, load_hands, rasterize, write_bodies, write_hands, BodyParams,
    CropTransform, Manifest, Record, Split, Style,
};
use crate::tensor::Tensor4;
use crate::trainer::{
    from_model, mask_iou, train_hand_generator, train_outpainter, BodyExample, Checkpoint, CheckpointKind, HandExample,
    LossParts, TrainIo, TrainState,
};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const SAMPLE_FILES: [&str; 4] = ["hand.png", "hand_mask.png", "canvas.png", "image.png"];

/// Paths of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Create the layout and write the resolved config.
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        let dir = RunDir {
            root: cfg.output_dir.clone(),
        };
        for sub in ["checkpoints", "samples", "logs"] {
            fs::create_dir_all(dir.root.join(sub))?;
        }
        let value: serde_json::Value = serde_json::from_str(&cfg.canonical_json()?)?;
        fs::write(dir.root.join(CONFIG_FILE), serde_json::to_string_pretty(&value)? + "\n")?;
        Ok(dir)
    }

    pub fn checkpoint(&self, kind: CheckpointKind) -> PathBuf {
        self.root.join("checkpoints").join(match kind {
            CheckpointKind::Hand => "hand.ckpt",
            CheckpointKind::Outpaint => "outpaint.ckpt",
        })
    }

    pub fn log(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(name)
    }

    pub fn samples(&self) -> PathBuf {
        self.root.join("samples")
    }
}

fn hands_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join("hands")
}

fn bodies_dir(cfg: &RunConfig) -> PathBuf {
    cfg.data_dir.join("bodies")
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

/// Render both synthetic datasets into `data_dir`.
pub fn make_data(cfg: &RunConfig) -> Result<(Manifest, Manifest)> {
    cfg.validate()?;
    let mut hc = cfg.hand_data.clone();
    hc.seed = cfg.seed_for(SeedTag::HandData);
    let mut bc = cfg.body_data.clone();
    bc.seed = cfg.seed_for(SeedTag::BodyData);
    let hands = write_hands(&hands_dir(cfg), &hc, &generate_hands(&hc, cfg.exec)?)?;
    let bodies = write_bodies(&bodies_dir(cfg), &bc, &generate_bodies(&bc, cfg.exec)?)?;
    Ok((hands, bodies))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    /// Step the run started from; non-zero after a resume.
    pub start_step: u64,
    pub step: u64,
    /// Mean total loss over the last (up to) 50 steps of this invocation.
    pub final_loss: Option<f64>,
    /// Held-out mask IoU, for the hand generator only.
    pub val_mask_iou: Option<f64>,
}

fn split_of<'a>(records: &'a [Record], split: Split) -> Vec<&'a Record> {
    records.iter().filter(|r| r.entry.split == split).collect()
}

/// Resume from `path` when it exists, otherwise initialize a fresh network.
fn open_state(
    path: &Path,
    kind: CheckpointKind,
    model_cfg: &crate::denoiser::DenoiserConfig,
    train: &crate::trainer::TrainConfig,
) -> Result<(Denoiser, TrainState)> {
    if path.exists() {
        let (ck, model) = Checkpoint::load(path, &train.optimizer)?;
        if ck.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("holds a {:?} model", ck.kind),
            });
        }
        if &ck.model != model_cfg {
            return Err(Error::Config(format!("{} was trained with a different model config", path.display())));
        }
        if ck.state.step > train.steps {
            return Err(Error::Config(format!("{} is at step {}, past train steps {}", path.display(), ck.state.step, train.steps)));
        }
        log::info!("resuming {} at step {}", path.display(), ck.state.step);
        let mut state = ck.state;
        if train.ema && state.ema.is_none() {
            state.ema = Some(state.params.clone());
        }
        return Ok((model, state));
    }
    let mut store = ParamStore::new();
    let model = Denoiser::new(model_cfg, &mut store, train.seed)?;
    Ok((model, TrainState::new(store, train)))
}

/// Keep the log lines written up to `step`, dropping any written after the
/// checkpoint a run resumes from.
fn open_log(path: &Path, step: u64) -> Result<File> {
    let mut kept = Vec::new();
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            let v: serde_json::Value = serde_json::from_str(&line)?;
            if v.get("step").and_then(|s| s.as_u64()).is_some_and(|s| s <= step) {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
    for l in kept {
        writeln!(f, "{l}")?;
    }
    Ok(f)
}

fn tail_mean(h: &[LossParts]) -> Option<f64> {
    let tail = &h[h.len().saturating_sub(50)..];
    (!tail.is_empty()).then(|| tail.iter().map(|l| l.total).sum::<f64>() / tail.len() as f64)
}

/// Train (or resume) the stage-I hand generator on `data_dir/hands`.
pub fn train_hand(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = RunDir::create(cfg)?;
    let records = load_hands(&hands_dir(cfg))?;
    let sigma = cfg.sigma();
    let train: Vec<HandExample> = split_of(&records, Split::Train).into_iter().map(|r| HandExample::from_record(r, sigma)).collect();
    let val: Vec<HandExample> = split_of(&records, Split::Val).into_iter().map(|r| HandExample::from_record(r, sigma)).collect();
    let mut tc = cfg.train_hand.clone();
    tc.seed = cfg.seed_for(SeedTag::TrainHand);
    let path = dir.checkpoint(CheckpointKind::Hand);
    let (model, mut state) = open_state(&path, CheckpointKind::Hand, &cfg.hand_model, &tc)?;
    let start_step = state.step;
    let schedule = cfg.build_schedule()?;
    let codec = cfg.codec()?;
    let mut log = BufWriter::new(open_log(&dir.log("train_hand.jsonl"), start_step)?);
    let history = {
        let mut io = TrainIo {
            log: Some(&mut log),
            checkpoint: Some(&path),
            kind: CheckpointKind::Hand,
        };
        train_hand_generator(&train, &model, &mut state, &schedule, &codec, &tc, cfg.exec, &mut io)?
    };
    log.flush()?;
    if !path.exists() {
        Checkpoint::capture(CheckpointKind::Hand, model.config(), &state).save(&path)?;
    }
    let val_mask_iou = if val.is_empty() {
        None
    } else {
        Some(mask_iou(&model, state.inference_params(), &val, &schedule, &codec, tc.seed, cfg.exec)?)
    };
    let summary = TrainSummary {
        config_hash: cfg.hash()?,
        start_step,
        step: state.step,
        final_loss: tail_mean(&history),
        val_mask_iou,
    };
    write_json(&dir.log("train_hand_summary.json"), &summary)?;
    Ok(summary)
}

/// Train (or resume) the stage-II outpainter on `data_dir/bodies`.
pub fn train_outpaint(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let dir = RunDir::create(cfg)?;
    let records = load_bodies(&bodies_dir(cfg))?;
    let train: Vec<BodyExample> = split_of(&records, Split::Train)
        .into_iter()
        .map(BodyExample::from_record)
        .collect::<Result<_>>()?;
    let mut tc = cfg.train_outpaint.clone();
    tc.seed = cfg.seed_for(SeedTag::TrainOutpaint);
    let path = dir.checkpoint(CheckpointKind::Outpaint);
    let (model, mut state) = open_state(&path, CheckpointKind::Outpaint, &cfg.outpaint_model, &tc)?;
    let start_step = state.step;
    let schedule = cfg.build_schedule()?;
    let codec = cfg.codec()?;
    let mut log = BufWriter::new(open_log(&dir.log("train_outpaint.jsonl"), start_step)?);
    let history = {
        let mut io = TrainIo {
            log: Some(&mut log),
            checkpoint: Some(&path),
            kind: CheckpointKind::Outpaint,
        };
        train_outpainter(&train, &model, &mut state, &schedule, &codec, &tc, cfg.exec, &mut io)?
    };
    log.flush()?;
    if !path.exists() {
        Checkpoint::capture(CheckpointKind::Outpaint, model.config(), &state).save(&path)?;
    }
    let summary = TrainSummary {
        config_hash: cfg.hash()?,
        start_step,
        step: state.step,
        final_loss: tail_mean(&history),
        val_mask_iou: None,
    };
    write_json(&dir.log("train_outpaint_summary.json"), &summary)?;
    Ok(summary)
}

/// A trained network ready for inference.
pub struct Model {
    pub net: Denoiser,
    pub params: ParamStore,
    pub step: u64,
}

impl Model {
    pub fn load(path: &Path, kind: CheckpointKind, cfg: &RunConfig) -> Result<Self> {
        if !path.exists() {
            let cmd = match kind {
                CheckpointKind::Hand => "train-hand",
                CheckpointKind::Outpaint => "train-outpaint",
            };
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("missing; run {cmd} first"),
            });
        }
        let opt = match kind {
            CheckpointKind::Hand => &cfg.train_hand.optimizer,
            CheckpointKind::Outpaint => &cfg.train_outpaint.optimizer,
        };
        let (ck, net) = Checkpoint::load(path, opt)?;
        if ck.kind != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("holds a {:?} model", ck.kind),
            });
        }
        Ok(Self {
            params: ck.state.inference_params().clone(),
            step: ck.state.step,
            net,
        })
    }

    pub fn as_net(&self, exec: ExecMode) -> Net<'_> {
        Net {
            model: &self.net,
            params: &self.params,
            exec,
        }
    }
}

/// One stage-I request: hand keypoints normalized to the crop.
#[derive(Clone, Debug)]
pub struct HandJob {
    pub hands: Hands,
    pub style: usize,
    pub seed: u64,
}

/// Stage-I sampling with mask-free conditioning. The returned mask is the
/// thresholded mask head of the final denoising step.
pub fn sample_hands(
    model: &Model,
    jobs: &[HandJob],
    size: usize,
    sigma: f64,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    exec: ExecMode,
) -> Result<Vec<HandCrop>> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let f = codec.factor;
    let cond = jobs
        .iter()
        .map(|j| {
            let heat = downsize_to_latent(&render_heatmaps(&j.hands, size, size, sigma).heatmaps, f)?;
            heat.concat_channels(&Tensor4::zeros([1, 1, size / f, size / f]))
        })
        .collect::<Result<Vec<_>>>()?;
    let cond = Tensor4::stack(&cond)?;
    let style: Vec<usize> = jobs.iter().map(|j| j.style).collect();
    let shape = [1, model.net.config().latent_channels, size / f, size / f];
    let noise = |index: u64| -> Result<Tensor4> {
        Tensor4::stack(&jobs.iter().map(|j| gaussian(shape, &mut rng::stream(j.seed, Domain::Sample, index))).collect::<Vec<_>>())
    };
    let mut x = noise(0)?;
    let mut logits = None;
    for (i, (t, t_prev)) in step_pairs(&sampler.timesteps(schedule)?).into_iter().enumerate() {
        let out = model.net.predict(&model.params, &x, &vec![t; jobs.len()], &cond, &style, exec)?;
        let sigma_t = ddim_sigma(schedule, t, t_prev, sampler.sigma_scale)?;
        let n = if sigma_t > 0.0 { Some(noise(1 + i as u64)?) } else { None };
        x = sampler_step(&x, &out.eps_hat, t, t_prev, schedule, sampler, n.as_ref())?;
        logits = out.mask_logits;
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("stage-I sample"));
    }
    let logits = logits.ok_or_else(|| Error::Config("hand model has no mask head".into()))?;
    let images = codec.decode(&from_model(&x)).map(|v| v.clamp(0.0, 1.0));
    Ok(jobs
        .iter()
        .enumerate()
        .map(|(b, j)| HandCrop {
            image: images.select(b),
            mask: Mask::from_tensor(&logits, b, 0.0),
            hands: j.hands.clone(),
        })
        .collect())
}

/// Crop windows for the visible hands of a stick-44 skeleton: one window
/// per hand, or one for both when they overlap. Each carries the keypoints
/// of every visible hand, normalized to the window.
pub fn plan_crops(sk: &Skeleton, width: usize, height: usize, size: usize) -> Result<Vec<(CropTransform, Hands)>> {
    let params = BodyParams::from_skeleton(sk, width, height)?;
    let gt = sk.hands();
    let visible: Vec<usize> = [LEFT, RIGHT].into_iter().filter(|&s| gt.is_visible(s)).collect();
    let groups = match visible.len() {
        0 => return Err(Error::Data("skeleton has no visible hand".into())),
        1 => vec![visible.clone()],
        _ => hand_groups(&params.hands),
    };
    Ok(groups
        .iter()
        .map(|g| {
            let t = crop_window(&params.hands, g, size);
            let mut hands = Hands::default();
            for &s in &visible {
                let h = params.hands[s].transformed(t.scale(), t.offset());
                let (x0, y0, x1, y1) = h.extent();
                let n = size as f64;
                if g.contains(&s) || (x0 <= n && y0 <= n && x1 >= 0.0 && y1 >= 0.0) {
                    hands.0[s] = h.keypoints(size, size);
                }
            }
            (t, hands)
        })
        .collect())
}

/// Silhouette of the figure a stick-44 skeleton describes.
pub fn person_mask(sk: &Skeleton, width: usize, height: usize) -> Result<Mask> {
    let p = BodyParams::from_skeleton(sk, width, height)?;
    Ok(rasterize(p.shapes(Style(0)).into_iter().map(|s| s.prim), width, height))
}

/// Stratified subset of `n` indices that keeps the class proportions of
/// `labels`: largest-remainder quotas, then a uniform draw within each class.
/// Indices come back sorted.
pub fn stratified_subset(labels: &[usize], n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > labels.len() {
        return Err(Error::Data(format!("asked for {n} items from a pool of {}", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let total = labels.len() as f64;
    let exact: Vec<f64> = members.iter().map(|m| n as f64 * m.len() as f64 / total).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let short = n - quota.iter().sum::<usize>();
    for &c in order.iter().take(short) {
        quota[c] += 1;
    }
    let mut out = Vec::with_capacity(n);
    for (c, m) in members.iter_mut().enumerate() {
        let mut r = rng::stream(seed, Domain::Split, 2 + c as u64);
        m.shuffle(&mut r);
        out.extend_from_slice(&m[..quota[c].min(m.len())]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Frames of `split`, reduced to `count` by gesture-stratified sampling
/// (0 keeps all).
pub fn select_frames(records: Vec<Record>, split: Split, count: usize, seed: u64) -> Result<Vec<Record>> {
    let pool: Vec<Record> = records.into_iter().filter(|r| r.entry.split == split).collect();
    if pool.is_empty() {
        return Err(Error::Data(format!("no {split:?} frames in the dataset")));
    }
    if count == 0 || count >= pool.len() {
        return Ok(pool);
    }
    let labels: Vec<usize> = pool.iter().map(|r| r.entry.gesture.index()).collect();
    let keep = stratified_subset(&labels, count, seed)?;
    let mut pool: Vec<Option<Record>> = pool.into_iter().map(Some).collect();
    Ok(keep.into_iter().map(|i| pool[i].take().expect("distinct indices")).collect())
}

fn dataset_index(r: &Record) -> u64 {
    r.entry.id.parse().unwrap_or(0)
}

/// Everything produced for one frame.
#[derive(Clone, Debug)]
pub struct Generated {
    pub crops: Vec<HandCrop>,
    pub canvas: Canvas,
    pub image: Tensor4,
    pub seed: u64,
}

/// Loaded models and settings shared by every frame of a run.
pub struct Generator<'a> {
    pub cfg: &'a RunConfig,
    pub hand: Option<&'a Model>,
    pub outpainter: &'a Model,
    pub schedule: NoiseSchedule,
    pub codec: LatentCodec,
}

impl<'a> Generator<'a> {
    pub fn new(cfg: &'a RunConfig, hand: Option<&'a Model>, outpainter: &'a Model) -> Result<Self> {
        Ok(Self {
            cfg,
            hand,
            outpainter,
            schedule: cfg.build_schedule()?,
            codec: cfg.codec()?,
        })
    }

    /// Stage I for a batch of frames: hand crops with post-processed masks
    /// and the canvases they assemble into.
    pub fn canvases(&self, frames: &[&Record]) -> Result<Vec<(Vec<HandCrop>, Canvas)>> {
        let hand = self
            .hand
            .ok_or_else(|| Error::Config("stage I needs a hand model".into()))?;
        let size = self.cfg.hand_data.hand_size;
        let base = self.cfg.seed_for(SeedTag::HandSampler);
        let mut jobs = Vec::new();
        let mut owner = Vec::new();
        for (fi, r) in frames.iter().enumerate() {
            let (w, h) = (r.image.width(), r.image.height());
            for (ci, (_, hands)) in plan_crops(&r.skeleton, w, h, size)?.into_iter().enumerate() {
                jobs.push(HandJob {
                    hands,
                    style: r.entry.style,
                    seed: mix_seed(base, dataset_index(r), ci as u64),
                });
                owner.push(fi);
            }
        }
        let mut crops = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(self.cfg.generate.batch_size) {
            crops.extend(sample_hands(
                hand,
                chunk,
                size,
                self.cfg.sigma(),
                &self.cfg.hand_sampler,
                &self.schedule,
                &self.codec,
                self.cfg.exec,
            )?);
        }
        let mut per_frame: Vec<Vec<HandCrop>> = vec![Vec::new(); frames.len()];
        for (c, fi) in crops.into_iter().zip(owner) {
            per_frame[fi].push(HandCrop {
                mask: postprocess_mask(&c.mask),
                ..c
            });
        }
        frames
            .iter()
            .zip(per_frame)
            .map(|(r, crops)| {
                let canvas = assemble_canvas(&crops, &r.skeleton, r.image.width(), r.image.height())?;
                Ok((crops, canvas))
            })
            .collect()
    }

    /// Stage II for prepared canvases.
    pub fn outpaint(&self, frames: &[&Record], canvases: &[Canvas], cfg: &OutpaintConfig) -> Result<Vec<Tensor4>> {
        let base = self.cfg.seed_for(SeedTag::OutpaintSampler);
        let jobs: Vec<OutpaintJob> = frames
            .iter()
            .zip(canvases)
            .map(|(r, c)| OutpaintJob {
                canvas: c.clone(),
                skeleton: r.skeleton.clone(),
                style: r.entry.style,
                seed: mix_seed(base, dataset_index(r), 0),
            })
            .collect();
        let net = self.outpainter.as_net(self.cfg.exec);
        let mut out = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(self.cfg.generate.batch_size) {
            out.extend(outpaint(chunk, &net, &self.codec, &self.schedule, cfg, None)?);
        }
        Ok(out)
    }

    /// Both stages for every frame.
    pub fn generate(&self, frames: &[&Record]) -> Result<Vec<Generated>> {
        let staged = self.canvases(frames)?;
        let canvases: Vec<Canvas> = staged.iter().map(|(_, c)| c.clone()).collect();
        let images = self.outpaint(frames, &canvases, &self.cfg.outpaint)?;
        let base = self.cfg.seed_for(SeedTag::OutpaintSampler);
        Ok(staged
            .into_iter()
            .zip(images)
            .zip(frames)
            .map(|(((crops, canvas), image), r)| Generated {
                crops,
                canvas,
                image,
                seed: mix_seed(base, dataset_index(r), 0),
            })
            .collect())
    }
}

/// Crops side by side on one strip.
fn tile(images: &[Tensor4]) -> Result<Tensor4> {
    let h = images.iter().map(|t| t.height()).max().unwrap_or(1);
    let w: usize = images.iter().map(|t| t.width()).sum::<usize>().max(1);
    let mut out = Tensor4::zeros([1, 3, h, w]);
    let mut x0 = 0;
    for t in images {
        for c in 0..3 {
            for y in 0..t.height() {
                for x in 0..t.width() {
                    out.set(0, c, y, x0 + x, t.at(0, c.min(t.channels() - 1), y, x));
                }
            }
        }
        x0 += t.width();
    }
    Ok(out)
}

fn mask_strip(masks: &[&Mask]) -> Mask {
    let h = masks.iter().map(|m| m.height()).max().unwrap_or(1);
    let w = masks.iter().map(|m| m.width()).sum::<usize>().max(1);
    let mut out = Mask::empty(w, h);
    let mut x0 = 0;
    for m in masks {
        for y in 0..m.height() {
            for x in 0..m.width() {
                out.set(x0 + x, y, m.get(x, y));
            }
        }
        x0 += m.width();
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Dataset entry the skeleton and style were taken from.
    pub source: String,
    pub seed: u64,
    pub config_hash: String,
    pub hand_checkpoint_step: u64,
    pub outpaint_checkpoint_step: u64,
}

/// Write one frame's hand crops, their masks, the canvas and the final image.
pub fn save_generated(dir: &Path, g: &Generated) -> Result<()> {
    fs::create_dir_all(dir)?;
    let crops: Vec<Tensor4> = g.crops.iter().map(|c| c.image.clone()).collect();
    save_rgb(&dir.join(SAMPLE_FILES[0]), &tile(&crops)?)?;
    save_mask(&dir.join(SAMPLE_FILES[1]), &mask_strip(&g.crops.iter().map(|c| &c.mask).collect::<Vec<_>>()))?;
    save_rgb(&dir.join(SAMPLE_FILES[2]), &g.canvas.image)?;
    save_rgb(&dir.join(SAMPLE_FILES[3]), &g.image)?;
    Ok(())
}

fn load_models(cfg: &RunConfig, dir: &RunDir) -> Result<(Model, Model)> {
    Ok((
        Model::load(&dir.checkpoint(CheckpointKind::Hand), CheckpointKind::Hand, cfg)?,
        Model::load(&dir.checkpoint(CheckpointKind::Outpaint), CheckpointKind::Outpaint, cfg)?,
    ))
}

/// Up to `count` frames of the generation split, stratified by gesture.
pub fn generation_frames(cfg: &RunConfig, count: usize) -> Result<Vec<Record>> {
    select_frames(load_bodies(&bodies_dir(cfg))?, cfg.generate.split, count, cfg.seed_for(SeedTag::Subset))
}

fn generate_into(cfg: &RunConfig, dir: &RunDir, frames: &[Record]) -> Result<Vec<Generated>> {
    let (hand, outp) = load_models(cfg, dir)?;
    let gen = Generator::new(cfg, Some(&hand), &outp)?;
    let refs: Vec<&Record> = frames.iter().collect();
    let mut all = Vec::with_capacity(frames.len());
    let mut index = Vec::with_capacity(frames.len());
    let hash = cfg.hash()?;
    for chunk in refs.chunks(cfg.generate.batch_size) {
        for (g, r) in gen.generate(chunk)?.into_iter().zip(chunk) {
            let id = format!("{:06}", index.len());
            save_generated(&dir.samples().join(&id), &g)?;
            index.push(SampleRecord {
                id,
                source: r.entry.id.clone(),
                seed: g.seed,
                config_hash: hash.clone(),
                hand_checkpoint_step: hand.step,
                outpaint_checkpoint_step: outp.step,
            });
            all.push(g);
        }
    }
    write_json(&dir.samples().join("index.json"), &index)?;
    Ok(all)
}

/// Generate `generate.count` frames of `generate.split` and persist them.
pub fn generate(cfg: &RunConfig) -> Result<Vec<SampleRecord>> {
    cfg.validate()?;
    let dir = RunDir::create(cfg)?;
    let frames = generation_frames(cfg, cfg.generate.count)?;
    generate_into(cfg, &dir, &frames)?;
    let text = fs::read_to_string(dir.samples().join("index.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// The feature extractor the metrics config asks for.
pub fn build_extractor(cfg: &RunConfig) -> Result<Box<dyn FeatureExtractor>> {
    let seed = cfg.seed_for(SeedTag::Metrics);
    Ok(match cfg.metrics.extractor {
        metrics::ExtractorKind::RandomProjection => Box::new(RandomProjection::new(cfg.metrics.feature_dim, seed)),
        metrics::ExtractorKind::StyleCnn => {
            let mut net = StyleCnn::new(StyleCnnConfig {
                seed,
                ..StyleCnnConfig::default()
            })?;
            let records = load_bodies(&bodies_dir(cfg))?;
            let data: Vec<(Tensor4, Style)> = split_of(&records, Split::Train).into_iter().map(|r| (r.image.clone(), r.style())).collect();
            net.train(&data, cfg.exec)?;
            Box::new(net)
        }
    })
}

/// Keypoint and foreground-feature metrics of `images` against the frames they
/// were generated for.
pub fn score_frames(cfg: &RunConfig, frames: &[Record], images: &[&Tensor4], extractor: &dyn FeatureExtractor) -> Result<MetricsReport> {
    let masks: Vec<Mask> = frames
        .iter()
        .map(|r| person_mask(&r.skeleton, r.image.width(), r.image.height()))
        .collect::<Result<_>>()?;
    let eval: Vec<EvalFrame> = frames
        .iter()
        .zip(images)
        .zip(&masks)
        .map(|((r, img), m)| EvalFrame {
            image: img,
            gt: &r.skeleton,
            mask: m,
            style: r.style(),
        })
        .collect();
    let reference: Vec<EvalFrame> = frames
        .iter()
        .zip(&masks)
        .map(|(r, m)| EvalFrame {
            image: &r.image,
            gt: &r.skeleton,
            mask: m,
            style: r.style(),
        })
        .collect();
    let mut mc = cfg.metrics.clone();
    mc.kid.seed = mix_seed(cfg.seed_for(SeedTag::Metrics), 1, mc.kid.seed);
    metrics::evaluate(&eval, &reference, extractor, &mc, &cfg.hash()?, cfg.exec)
}

/// Generate on the configured split and score the results against its
/// ground truth; writes `metrics.json`.
pub fn evaluate(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let dir = RunDir::create(cfg)?;
    let frames = generation_frames(cfg, cfg.generate.count)?;
    let generated = generate_into(cfg, &dir, &frames)?;
    let extractor = build_extractor(cfg)?;
    let images: Vec<&Tensor4> = generated.iter().map(|g| &g.image).collect();
    let report = score_frames(cfg, &frames, &images, extractor.as_ref())?;
    write_json(&dir.root.join(METRICS_FILE), &report)?;
    Ok(report)
}

/// Score the ground-truth frames of the split against themselves.
pub fn evaluate_ground_truth(cfg: &RunConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let frames = generation_frames(cfg, cfg.generate.count)?;
    let extractor = build_extractor(cfg)?;
    let images: Vec<&Tensor4> = frames.iter().map(|r| &r.image).collect();
    score_frames(cfg, &frames, &images, extractor.as_ref())
}

/// Canvas holding the frame's own hand pixels under its post-processed
/// hand mask.
pub fn reference_canvas(r: &Record) -> Canvas {
    let mask = postprocess_mask(&r.mask);
    let image = Tensor4::from_fn(r.image.shape(), |[b, c, y, x]| if mask.get(x, y) { r.image.at(b, c, y, x) } else { CANVAS_FILL });
    Canvas {
        image,
        mask,
        placements: vec![Placement {
            scale: 1.0,
            tx: 0.0,
            ty: 0.0,
        }],
    }
}

/// Boundary score, or 0 when the mask leaves no band outside it.
pub fn boundary_score_or_zero(image: &Tensor4, mask: &Mask, reference: &Tensor4) -> Result<f64> {
    if mask.is_empty() || boundary_band(mask).is_empty() {
        return Ok(0.0);
    }
    boundary_artifact_score(image, mask, reference)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub strategy: Strategy,
    pub boundary: Interval,
    pub scores: Vec<f64>,
    pub metrics: Option<MetricsReport>,
}

/// Paired comparison `a − b` of per-image boundary scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedDifference {
    pub a: Strategy,
    pub b: Strategy,
    pub difference: Interval,
    /// True when the whole interval lies at or below zero.
    pub a_not_worse: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub n_images: usize,
    pub hand_source: HandSource,
    pub confidence: f64,
    pub strategies: Vec<StrategyResult>,
    pub comparisons: Vec<PairedDifference>,
    /// Strategies by mean boundary score, best first, e.g.
    /// `sequential < naive < bbox`.
    pub observed_ordering: String,
    /// Sequential ≤ naive ≤ bbox, each pair at the configured confidence.
    pub expected_ordering_holds: bool,
}

/// Outpaint the same canvases with every blending strategy and compare
/// boundary scores against the ground-truth frames.
pub fn compare_strategies(
    cfg: &RunConfig,
    gen: &Generator,
    frames: &[&Record],
    canvases: &[Canvas],
) -> Result<(Vec<StrategyResult>, Vec<Vec<Tensor4>>)> {
    let mut results = Vec::new();
    let mut outputs = Vec::new();
    for (k, s) in Strategy::ALL.into_iter().enumerate() {
        let oc = OutpaintConfig {
            strategy: s,
            ..cfg.outpaint.clone()
        };
        let images = gen.outpaint(frames, canvases, &oc)?;
        let scores = images
            .iter()
            .zip(canvases)
            .zip(frames)
            .map(|((img, c), r)| boundary_score_or_zero(img, &c.mask, &r.image))
            .collect::<Result<Vec<f64>>>()?;
        let seed = mix_seed(cfg.seed_for(SeedTag::Ablation), k as u64, 0);
        results.push(StrategyResult {
            strategy: s,
            boundary: bootstrap_mean(&scores, cfg.ablation.bootstrap, cfg.ablation.confidence, seed)?,
            scores,
            metrics: None,
        });
        outputs.push(images);
    }
    Ok((results, outputs))
}

fn paired(cfg: &RunConfig, a: &StrategyResult, b: &StrategyResult, k: u64) -> Result<PairedDifference> {
    let d: Vec<f64> = a.scores.iter().zip(&b.scores).map(|(x, y)| x - y).collect();
    let seed = mix_seed(cfg.seed_for(SeedTag::Ablation), 100 + k, 0);
    let difference = bootstrap_mean(&d, cfg.ablation.bootstrap, cfg.ablation.confidence, seed)?;
    Ok(PairedDifference {
        a: a.strategy,
        b: b.strategy,
        a_not_worse: difference.hi <= 0.0,
        difference,
    })
}

/// Blending ablation on `ablation.count` test frames. Writes
/// `ablation/ablation.json`, `ablation/table.md`, `ablation/boundary.png`
/// and `ablation/examples.png`.
pub fn ablate_blending(cfg: &RunConfig) -> Result<AblationReport> {
    cfg.validate()?;
    let dir = RunDir::create(cfg)?;
    let hand = match cfg.ablation.hand_source {
        HandSource::Generated => Some(Model::load(&dir.checkpoint(CheckpointKind::Hand), CheckpointKind::Hand, cfg)?),
        HandSource::Reference => None,
    };
    let outp = Model::load(&dir.checkpoint(CheckpointKind::Outpaint), CheckpointKind::Outpaint, cfg)?;
    let gen = Generator::new(cfg, hand.as_ref(), &outp)?;
    let frames = generation_frames(cfg, cfg.ablation.count)?;
    let refs: Vec<&Record> = frames.iter().collect();
    let canvases: Vec<Canvas> = match cfg.ablation.hand_source {
        HandSource::Generated => {
            let mut cs = Vec::with_capacity(refs.len());
            for chunk in refs.chunks(cfg.generate.batch_size) {
                cs.extend(gen.canvases(chunk)?.into_iter().map(|(_, c)| c));
            }
            cs
        }
        HandSource::Reference => frames.iter().map(reference_canvas).collect(),
    };
    let (mut results, outputs) = compare_strategies(cfg, &gen, &refs, &canvases)?;
    let extractor = build_extractor(cfg)?;
    for (res, images) in results.iter_mut().zip(&outputs) {
        let imgs: Vec<&Tensor4> = images.iter().collect();
        res.metrics = Some(score_frames(cfg, &frames, &imgs, extractor.as_ref())?);
    }
    let report = summarize(cfg, frames.len(), results)?;
    let out = dir.root.join("ablation");
    fs::create_dir_all(&out)?;
    write_json(&out.join("ablation.json"), &report)?;
    fs::write(out.join("table.md"), ablation_table(&report))?;
    plot::boundary_chart(&report).save(out.join("boundary.png"))?;
    let examples: Vec<Vec<&Tensor4>> = (0..frames.len().min(6))
        .map(|i| {
            let mut row = vec![&frames[i].image, &canvases[i].image];
            row.extend(outputs.iter().map(|o| &o[i]));
            row
        })
        .collect();
    plot::image_grid(&examples).save(out.join("examples.png"))?;
    Ok(report)
}

/// Order the strategies and bootstrap the paired differences.
pub fn summarize(cfg: &RunConfig, n_images: usize, strategies: Vec<StrategyResult>) -> Result<AblationReport> {
    let by = |s: Strategy| strategies.iter().find(|r| r.strategy == s).expect("all strategies run");
    let comparisons = vec![
        paired(cfg, by(Strategy::Sequential), by(Strategy::Naive), 0)?,
        paired(cfg, by(Strategy::Naive), by(Strategy::Bbox), 1)?,
    ];
    let mut order: Vec<&StrategyResult> = strategies.iter().collect();
    order.sort_by(|a, b| a.boundary.mean.total_cmp(&b.boundary.mean));
    let observed_ordering = order
        .windows(2)
        .map(|w| {
            let rel = if w[0].boundary.mean == w[1].boundary.mean { "=" } else { "<" };
            format!("{} {rel} ", w[0].strategy.id())
        })
        .collect::<String>()
        + order.last().map_or("", |r| r.strategy.id());
    Ok(AblationReport {
        config_hash: cfg.hash()?,
        n_images,
        hand_source: cfg.ablation.hand_source,
        confidence: cfg.ablation.confidence,
        expected_ordering_holds: comparisons.iter().all(|c| c.a_not_worse),
        comparisons,
        observed_ordering,
        strategies,
    })
}

/// Markdown table of an ablation report.
pub fn ablation_table(r: &AblationReport) -> String {
    let pct = (r.confidence * 100.0).round();
    let mut s = format!(
        "| strategy | boundary score | {pct}% CI | DAP | MPJPE | FID fg |\n|---|---|---|---|---|---|\n"
    );
    for st in &r.strategies {
        let (dap, mp, fid) = st
            .metrics
            .as_ref()
            .map_or(("-".into(), "-".into(), "-".into()), |m| (format!("{:.3}", m.dap), format!("{:.4}", m.mpjpe), format!("{:.3}", m.fid_fg)));
        s += &format!(
            "| {} | {:.5} | [{:.5}, {:.5}] | {dap} | {mp} | {fid} |\n",
            st.strategy.id(),
            st.boundary.mean,
            st.boundary.lo,
            st.boundary.hi
        );
    }
    s += "\n| paired difference | mean | CI | holds |\n|---|---|---|---|\n";
    for c in &r.comparisons {
        s += &format!(
            "| {} - {} | {:.5} | [{:.5}, {:.5}] | {} |\n",
            c.a.id(),
            c.b.id(),
            c.difference.mean,
            c.difference.lo,
            c.difference.hi,
            if c.a_not_worse { "yes" } else { "no" }
        );
    }
    s += &format!("\nobserved ordering: {} ({} images, hands: {:?})\n", r.observed_ordering, r.n_images, r.hand_source);
    s
}
