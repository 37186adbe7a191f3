//! Stage-I multi-task training and stage-II masked reconstruction training.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::conditioning::{downsize_to_latent, postprocess_mask, render_heatmaps, render_skeleton, Skeleton};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::morphology::Mask;
use crate::nn::{Adam, AdamConfig, Grads, ParamStore, Tape};
use crate::outpaint::{binarize, LatentCodec};
use crate::rng::{self, Domain, Rng};
use crate::schedule::{forward_noise, gaussian, NoiseSchedule};
use crate::synth::{HandSample, Record};
use crate::tensor::{Real, Tensor4};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rgb_shift: bool,
    pub rgb_shift_max: f64,
    pub brightness_contrast: bool,
    pub brightness_max: f64,
    pub contrast_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rgb_shift: true,
            rgb_shift_max: 0.05,
            brightness_contrast: true,
            brightness_max: 0.1,
            contrast_max: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_mask: f64,
    pub mask_dropout_p: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub augment: AugmentConfig,
    pub ema: bool,
    pub ema_decay: f64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_mask: 0.5,
            mask_dropout_p: 0.5,
            batch_size: 8,
            steps: 5000,
            seed: 0,
            optimizer: AdamConfig::default(),
            augment: AugmentConfig::default(),
            ema: false,
            ema_decay: 0.999,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lambda_mask >= 0.0 && self.lambda_mask.is_finite()) {
            return bad("lambda_mask must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.mask_dropout_p) {
            return bad("mask_dropout_p must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Loss value with its components; `total = noise + λ·mask`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub noise: f64,
    pub mask: f64,
}

fn mse_with_grad<T: Real>(target: &Tensor4<T>, pred: &Tensor4<T>, weight: f64) -> Result<(f64, Tensor4<T>)> {
    target.same_shape(pred)?;
    let n = target.len().max(1) as f64;
    let mut sum = 0.0;
    let mut grad = Tensor4::zeros(pred.shape());
    for ((g, &a), &b) in grad.data_mut().iter_mut().zip(target.data()).zip(pred.data()) {
        let (a, b) = (a.as_f64(), b.as_f64());
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::NonFinite("loss input"));
        }
        sum += (b - a) * (b - a);
        *g = T::from_f64_lossy(weight * 2.0 * (b - a) / n);
    }
    Ok((sum / n, grad))
}

/// `‖ε − ε̂‖²` mean plus `λ` times the mean squared mask error, where
/// `mask_pred` is already squashed into [0, 1].
pub fn combined_loss<T: Real>(
    eps: &Tensor4<T>,
    eps_hat: &Tensor4<T>,
    mask_gt: &Tensor4<T>,
    mask_pred: &Tensor4<T>,
    lambda_mask: f64,
) -> Result<LossParts> {
    Ok(combined_loss_grad(eps, eps_hat, mask_gt, mask_pred, lambda_mask)?.0)
}

/// [`combined_loss`] with its gradients with respect to `eps_hat` and
/// `mask_pred`.
pub fn combined_loss_grad<T: Real>(
    eps: &Tensor4<T>,
    eps_hat: &Tensor4<T>,
    mask_gt: &Tensor4<T>,
    mask_pred: &Tensor4<T>,
    lambda_mask: f64,
) -> Result<(LossParts, Tensor4<T>, Tensor4<T>)> {
    let (noise, g_eps) = mse_with_grad(eps, eps_hat, 1.0)?;
    let (mask, g_mask) = mse_with_grad(mask_gt, mask_pred, lambda_mask)?;
    Ok((
        LossParts {
            total: noise + lambda_mask * mask,
            noise,
            mask,
        },
        g_eps,
        g_mask,
    ))
}

/// Mean squared error over positions where `known` is zero, broadcast over
/// channels. Returns 0 when every position is known.
pub fn masked_loss<T: Real>(eps: &Tensor4<T>, eps_hat: &Tensor4<T>, known: &Tensor4<T>) -> Result<(f64, Tensor4<T>)> {
    eps.same_shape(eps_hat)?;
    let [b, c, h, w] = eps.shape();
    known.ensure_shape([b, 1, h, w])?;
    let plane = h * w;
    let count: usize = known.data().iter().filter(|&&m| m.as_f64() < 0.5).count() * c;
    let mut grad = Tensor4::zeros(eps.shape());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let n = count as f64;
    let mut sum = 0.0;
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..plane {
                if known.data()[bi * plane + p].as_f64() >= 0.5 {
                    continue;
                }
                let i = (bi * c + ci) * plane + p;
                let (a, e) = (eps.data()[i].as_f64(), eps_hat.data()[i].as_f64());
                if !(a.is_finite() && e.is_finite()) {
                    return Err(Error::NonFinite("loss input"));
                }
                sum += (e - a) * (e - a);
                grad.data_mut()[i] = T::from_f64_lossy(2.0 * (e - a) / n);
            }
        }
    }
    Ok((sum / n, grad))
}

/// Zero the mask channel (last of the condition channels) of every batch
/// item independently with probability `p`. Returns which items were
/// zeroed.
pub fn apply_mask_dropout<T: Real>(cond: &mut Tensor4<T>, p: f64, rng: &mut Rng) -> Vec<bool> {
    let [b, c, h, w] = cond.shape();
    let plane = h * w;
    (0..b)
        .map(|bi| {
            let drop = p > 0.0 && (p >= 1.0 || rng.random_bool(p));
            if drop {
                let start = (bi * c + c - 1) * plane;
                cond.data_mut()[start..start + plane].fill(T::zero());
            }
            drop
        })
        .collect()
}

/// One random photometric transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    pub shift: [f32; 3],
    pub brightness: f32,
    pub contrast: f32,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        shift: [0.0; 3],
        brightness: 0.0,
        contrast: 1.0,
    };

    pub fn sample(cfg: &AugmentConfig, rng: &mut Rng) -> Self {
        let mut d = Self::IDENTITY;
        if cfg.rgb_shift && cfg.rgb_shift_max > 0.0 {
            let m = cfg.rgb_shift_max as f32;
            d.shift = [rng.random_range(-m..m), rng.random_range(-m..m), rng.random_range(-m..m)];
        }
        if cfg.brightness_contrast {
            if cfg.brightness_max > 0.0 {
                let m = cfg.brightness_max as f32;
                d.brightness = rng.random_range(-m..m);
            }
            if cfg.contrast_max > 0.0 {
                let m = cfg.contrast_max as f32;
                d.contrast = 1.0 + rng.random_range(-m..m);
            }
        }
        d
    }

    /// `clamp((x − ½)·contrast + ½ + brightness + shift_c)` per channel.
    pub fn apply(&self, img: &Tensor4) -> Tensor4 {
        if *self == Self::IDENTITY {
            return img.clone();
        }
        let [_, c, _, _] = img.shape();
        Tensor4::from_fn(img.shape(), |[b, ch, y, x]| {
            let v = img.at(b, ch, y, x);
            let s = if c == 3 { self.shift[ch] } else { 0.0 };
            ((v - 0.5) * self.contrast + 0.5 + self.brightness + s).clamp(0.0, 1.0)
        })
    }
}

/// Photometric augmentation; keypoints and mask pass through unchanged.
pub fn augment(sample: &HandSample, cfg: &AugmentConfig, rng: &mut Rng) -> HandSample {
    let d = AugmentDraw::sample(cfg, rng);
    HandSample {
        image: d.apply(&sample.image),
        ..sample.clone()
    }
}

/// Map pixel values in [0, 1] to the model's [−1, 1] range.
pub fn to_model<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let two = T::from_f64_lossy(2.0);
    x.map(|v| v * two - T::one())
}

pub fn from_model<T: Real>(x: &Tensor4<T>) -> Tensor4<T> {
    let half = T::from_f64_lossy(0.5);
    x.map(|v| (v + T::one()) * half)
}

/// Training item for the hand generator.
#[derive(Clone, Debug)]
pub struct HandExample {
    /// (1, 3, H, W) pixels.
    pub image: Tensor4,
    /// (1, 10, H, W) per-finger heatmaps.
    pub heatmaps: Tensor4,
    /// (1, 1, H, W) hand mask.
    pub mask: Tensor4,
    pub style: usize,
}

impl HandExample {
    pub fn from_sample(s: &HandSample, sigma: f64) -> Self {
        let (w, h) = (s.image.width(), s.image.height());
        Self {
            image: s.image.clone(),
            heatmaps: render_heatmaps(&s.hands, w, h, sigma).heatmaps,
            mask: s.mask.to_tensor(),
            style: s.style.0,
        }
    }

    pub fn from_record(r: &Record, sigma: f64) -> Self {
        let (w, h) = (r.image.width(), r.image.height());
        Self {
            image: r.image.clone(),
            heatmaps: render_heatmaps(&r.skeleton.hands(), w, h, sigma).heatmaps,
            mask: r.mask.to_tensor(),
            style: r.entry.style,
        }
    }
}

/// Training item for the outpainter.
#[derive(Clone, Debug)]
pub struct BodyExample {
    pub image: Tensor4,
    /// (1, 3, H, W) skeleton render.
    pub skeleton: Tensor4,
    /// Post-processed hand mask, as the canvas would carry it.
    pub mask: Mask,
    pub style: usize,
}

impl BodyExample {
    pub fn new(image: Tensor4, skeleton: &Skeleton, hand_mask: &Mask, style: usize) -> Result<Self> {
        let (w, h) = (image.width(), image.height());
        Ok(Self {
            skeleton: render_skeleton(skeleton, w, h)?,
            mask: postprocess_mask(hand_mask),
            image,
            style,
        })
    }

    pub fn from_record(r: &Record) -> Result<Self> {
        Self::new(r.image.clone(), &r.skeleton, &r.mask, r.entry.style)
    }
}

/// Stage-II condition: skeleton render and mask, downsized to the latent.
pub fn outpaint_condition(skeleton: &Tensor4, mask: &Mask, codec: &LatentCodec) -> Result<Tensor4> {
    let f = codec.factor;
    let sk = downsize_to_latent(skeleton, f)?;
    let m = downsize_to_latent(&mask.to_tensor::<f32>(), f)?;
    sk.concat_channels(&m)
}

/// Mutable training state, everything a checkpoint captures.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: Adam,
    pub ema: Option<ParamStore>,
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            adam: Adam::new(cfg.optimizer.clone(), &params),
            ema: cfg.ema.then(|| params.clone()),
            params,
            step: 0,
        }
    }

    /// Parameters to use for inference.
    pub fn inference_params(&self) -> &ParamStore {
        self.ema.as_ref().unwrap_or(&self.params)
    }

    fn update(&mut self, grads: &Grads, cfg: &TrainConfig) {
        self.adam.step(&mut self.params, grads);
        if let Some(ema) = &mut self.ema {
            let d = cfg.ema_decay as f32;
            for id in self.params.ids() {
                let p = self.params.get(id);
                for (e, &v) in ema.get_mut(id).data_mut().iter_mut().zip(p.data()) {
                    *e = d * *e + (1.0 - d) * v;
                }
            }
        }
        self.step += 1;
    }
}

/// Aborts when the loss stays above `factor`× its first value for
/// `patience` consecutive steps.
#[derive(Clone, Debug)]
pub struct DivergenceDetector {
    pub factor: f64,
    pub patience: usize,
    initial: Option<f64>,
    run: usize,
}

impl Default for DivergenceDetector {
    fn default() -> Self {
        Self {
            factor: 10.0,
            patience: 100,
            initial: None,
            run: 0,
        }
    }
}

impl DivergenceDetector {
    pub fn observe(&mut self, step: u64, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                loss,
                initial: self.initial.unwrap_or(f64::NAN),
            });
        }
        let initial = *self.initial.get_or_insert(loss);
        if loss > self.factor * initial {
            self.run += 1;
            if self.run >= self.patience {
                return Err(Error::Diverged {
                    step: step as usize,
                    loss,
                    initial,
                });
            }
        } else {
            self.run = 0;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct LogLine {
    step: u64,
    loss_total: f64,
    loss_noise: f64,
    loss_mask: f64,
}

/// Hooks around the training loop.
#[derive(Default)]
pub struct TrainIo<'a> {
    /// Line-delimited JSON loss log.
    pub log: Option<&'a mut dyn Write>,
    /// Where to write checkpoints.
    pub checkpoint: Option<&'a Path>,
    pub kind: CheckpointKind,
}

fn log_step(io: &mut TrainIo, step: u64, l: &LossParts) -> Result<()> {
    if let Some(w) = io.log.as_mut() {
        let line = LogLine {
            step,
            loss_total: l.total,
            loss_noise: l.noise,
            loss_mask: l.mask,
        };
        serde_json::to_writer(&mut **w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Stacked stage-I batch.
#[derive(Clone, Debug)]
pub struct HandBatch<T: Real = f32> {
    pub x0: Tensor4<T>,
    pub cond: Tensor4<T>,
    pub mask: Tensor4<T>,
    pub style: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Tensor4<T>,
}

/// Draw the random parts of one stage-I step for items `idx`.
pub fn make_hand_batch(
    data: &[HandExample],
    idx: &[usize],
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<HandBatch> {
    let mut x0 = Vec::with_capacity(idx.len());
    let mut cond = Vec::with_capacity(idx.len());
    for &i in idx {
        let ex = &data[i];
        let img = AugmentDraw::sample(&cfg.augment, rng).apply(&ex.image);
        x0.push(to_model(&codec.encode(&img)?));
        let heat = downsize_to_latent(&ex.heatmaps, codec.factor)?;
        let m = downsize_to_latent(&ex.mask, codec.factor)?;
        cond.push(heat.concat_channels(&m)?);
    }
    let x0 = Tensor4::stack(&x0)?;
    let mut cond = Tensor4::stack(&cond)?;
    apply_mask_dropout(&mut cond, cfg.mask_dropout_p, rng);
    let t: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=schedule.num_steps())).collect();
    let eps = gaussian(x0.shape(), rng);
    let mask = Tensor4::stack(&idx.iter().map(|&i| data[i].mask.clone()).collect::<Vec<_>>())?;
    Ok(HandBatch {
        x0,
        cond,
        mask,
        style: idx.iter().map(|&i| data[i].style).collect(),
        t,
        eps,
    })
}

fn noised<T: Real>(x0: &Tensor4<T>, t: &[usize], eps: &Tensor4<T>, schedule: &NoiseSchedule) -> Result<Tensor4<T>> {
    let items: Result<Vec<_>> = t
        .iter()
        .enumerate()
        .map(|(b, &tb)| forward_noise(&x0.select(b), tb, &eps.select(b), schedule))
        .collect();
    Tensor4::stack(&items?)
}

/// Combined loss of one batch and its parameter gradients.
pub fn hand_loss_and_grads<T: Real>(
    model: &Denoiser,
    params: &ParamStore<T>,
    batch: &HandBatch<T>,
    schedule: &NoiseSchedule,
    lambda_mask: f64,
    exec: ExecMode,
) -> Result<(LossParts, Grads<T>)> {
    let xt = noised(&batch.x0, &batch.t, &batch.eps, schedule)?;
    let mut tape = Tape::new(params, exec);
    let x = tape.leaf(xt);
    let c = tape.leaf(batch.cond.clone());
    let vars = model.forward(&mut tape, x, &batch.t, c, &batch.style)?;
    let logits = vars
        .mask_logits
        .ok_or_else(|| Error::Config("the hand generator needs a mask head".into()))?;
    let probs = tape.sigmoid(logits);
    let (parts, g_eps, g_mask) = combined_loss_grad(&batch.eps, tape.value(vars.eps), &batch.mask, tape.value(probs), lambda_mask)?;
    let back = tape.backward(&[(vars.eps, &g_eps), (probs, &g_mask)])?;
    Ok((parts, back.params))
}

fn batch_indices(n: usize, batch: usize, rng: &mut Rng) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Train the hand generator until `state.step == cfg.steps`. Every step's
/// randomness comes from its own stream, so a resumed run matches an
/// uninterrupted one.
pub fn train_hand_generator(
    data: &[HandExample],
    model: &Denoiser,
    state: &mut TrainState,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    cfg: &TrainConfig,
    exec: ExecMode,
    io: &mut TrainIo,
) -> Result<Vec<LossParts>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut det = DivergenceDetector::default();
    let mut history = Vec::new();
    while state.step < cfg.steps {
        let mut r = rng::stream(cfg.seed, Domain::Train, state.step);
        let idx = batch_indices(data.len(), cfg.batch_size, &mut r);
        let batch = make_hand_batch(data, &idx, codec, schedule, cfg, &mut r)?;
        let (loss, grads) = hand_loss_and_grads(model, &state.params, &batch, schedule, cfg.lambda_mask, exec)?;
        det.observe(state.step + 1, loss.total)?;
        state.update(&grads, cfg);
        log_step(io, state.step, &loss)?;
        history.push(loss);
        maybe_checkpoint(io, state, model.config(), cfg)?;
    }
    Ok(history)
}

#[derive(Clone, Debug)]
pub struct BodyBatch<T: Real = f32> {
    pub x0: Tensor4<T>,
    pub cond: Tensor4<T>,
    /// (B, 1, h, w) binarized latent mask; 1 marks known hand pixels.
    pub known: Tensor4<T>,
    pub style: Vec<usize>,
    pub t: Vec<usize>,
    pub eps: Tensor4<T>,
}

pub fn make_body_batch(
    data: &[BodyExample],
    idx: &[usize],
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<BodyBatch> {
    let mut x0 = Vec::new();
    let mut cond = Vec::new();
    let mut known = Vec::new();
    for &i in idx {
        let ex = &data[i];
        let img = AugmentDraw::sample(&cfg.augment, rng).apply(&ex.image);
        x0.push(to_model(&codec.encode(&img)?));
        cond.push(outpaint_condition(&ex.skeleton, &ex.mask, codec)?);
        known.push(binarize(&codec.downsize_mask(&ex.mask)?).to_tensor());
    }
    let x0 = Tensor4::stack(&x0)?;
    let t: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=schedule.num_steps())).collect();
    let eps = gaussian(x0.shape(), rng);
    Ok(BodyBatch {
        x0,
        cond: Tensor4::stack(&cond)?,
        known: Tensor4::stack(&known)?,
        style: idx.iter().map(|&i| data[i].style).collect(),
        t,
        eps,
    })
}

/// Masked reconstruction loss of one batch and its parameter gradients.
pub fn body_loss_and_grads<T: Real>(
    model: &Denoiser,
    params: &ParamStore<T>,
    batch: &BodyBatch<T>,
    schedule: &NoiseSchedule,
    exec: ExecMode,
) -> Result<(LossParts, Grads<T>)> {
    let xt = noised(&batch.x0, &batch.t, &batch.eps, schedule)?;
    let mut tape = Tape::new(params, exec);
    let x = tape.leaf(xt);
    let c = tape.leaf(batch.cond.clone());
    let vars = model.forward(&mut tape, x, &batch.t, c, &batch.style)?;
    let (loss, g) = masked_loss(&batch.eps, tape.value(vars.eps), &batch.known)?;
    let back = tape.backward(&[(vars.eps, &g)])?;
    let parts = LossParts {
        total: loss,
        noise: loss,
        mask: 0.0,
    };
    Ok((parts, back.params))
}

/// Train the stage-II outpainter with the loss restricted to unknown
/// (non-hand) latent pixels.
pub fn train_outpainter(
    data: &[BodyExample],
    model: &Denoiser,
    state: &mut TrainState,
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    cfg: &TrainConfig,
    exec: ExecMode,
    io: &mut TrainIo,
) -> Result<Vec<LossParts>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut det = DivergenceDetector::default();
    let mut history = Vec::new();
    while state.step < cfg.steps {
        let mut r = rng::stream(cfg.seed, Domain::Train, state.step);
        let idx = batch_indices(data.len(), cfg.batch_size, &mut r);
        let batch = make_body_batch(data, &idx, codec, schedule, cfg, &mut r)?;
        let (loss, grads) = body_loss_and_grads(model, &state.params, &batch, schedule, exec)?;
        det.observe(state.step + 1, loss.total)?;
        state.update(&grads, cfg);
        log_step(io, state.step, &loss)?;
        history.push(loss);
        maybe_checkpoint(io, state, model.config(), cfg)?;
    }
    Ok(history)
}

fn maybe_checkpoint(io: &TrainIo, state: &TrainState, model: &DenoiserConfig, cfg: &TrainConfig) -> Result<()> {
    let Some(path) = io.checkpoint else { return Ok(()) };
    let periodic = cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0;
    if periodic || state.step == cfg.steps {
        Checkpoint::capture(io.kind, model, state).save(path)?;
    }
    Ok(())
}

/// Mean per-sample IoU of the thresholded mask head against ground truth,
/// at one random timestep per sample and with the mask channel zeroed.
pub fn mask_iou(
    model: &Denoiser,
    params: &ParamStore,
    data: &[HandExample],
    schedule: &NoiseSchedule,
    codec: &LatentCodec,
    seed: u64,
    exec: ExecMode,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let cfg = TrainConfig {
        mask_dropout_p: 1.0,
        augment: AugmentConfig {
            rgb_shift: false,
            brightness_contrast: false,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    let mut total = 0.0;
    for chunk in (0..data.len()).collect::<Vec<_>>().chunks(16) {
        let mut r = rng::stream(seed, Domain::Eval, chunk[0] as u64);
        let batch = make_hand_batch(data, chunk, codec, schedule, &cfg, &mut r)?;
        let xt = noised(&batch.x0, &batch.t, &batch.eps, schedule)?;
        let out = model.predict(params, &xt, &batch.t, &batch.cond, &batch.style, exec)?;
        let logits = out
            .mask_logits
            .ok_or_else(|| Error::Config("model has no mask head".into()))?;
        for (b, &i) in chunk.iter().enumerate() {
            let pred = Mask::from_tensor(&logits, b, 0.0);
            let gt = Mask::from_tensor(&data[i].mask, 0, 0.5);
            total += pred.iou(&gt)?;
        }
    }
    Ok(total / data.len() as f64)
}

const MAGIC: &[u8; 4] = b"HFCK";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    #[default]
    Hand,
    Outpaint,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: CheckpointKind,
    step: u64,
    model: DenoiserConfig,
    adam_step: u64,
    has_ema: bool,
    tensors: Vec<(String, [usize; 4])>,
}

/// Serialized training state: `HFCK`, a version word, a length-prefixed
/// JSON header, then little-endian f32 blocks for parameters, Adam moments
/// and optionally the EMA copy.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: DenoiserConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn capture(kind: CheckpointKind, model: &DenoiserConfig, state: &TrainState) -> Self {
        Self {
            kind,
            model: model.clone(),
            state: state.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.state.params;
        let header = Header {
            kind: self.kind,
            step: self.state.step,
            model: self.model.clone(),
            adam_step: self.state.adam.step,
            has_ema: self.state.ema.is_some(),
            tensors: p.ids().map(|id| (p.name(id).to_string(), p.get(id).shape())).collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(json.len() as u64).to_le_bytes())?;
            w.write_all(&json)?;
            let mut put = |t: &Tensor4| -> Result<()> {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
                Ok(())
            };
            for id in p.ids() {
                put(p.get(id))?;
            }
            for t in self.state.adam.m.iter().chain(&self.state.adam.v) {
                put(t)?;
            }
            if let Some(e) = &self.state.ema {
                for id in e.ids() {
                    put(e.get(id))?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Read a checkpoint and rebuild the network it was taken from.
    pub fn load(path: &Path, optimizer: &AdamConfig) -> Result<(Self, Denoiser)> {
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = BufReader::new(File::open(path).map_err(|e| bad(e.to_string()))?);
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|e| bad(e.to_string()))?;
        if &word != MAGIC {
            return Err(bad("not a checkpoint".into()));
        }
        r.read_exact(&mut word)?;
        if u32::from_le_bytes(word) != VERSION {
            return Err(bad(format!("unsupported version {}", u32::from_le_bytes(word))));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(|e| bad(e.to_string()))?;
        let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
        let mut take = |shape: [usize; 4]| -> Result<Vec<f32>> {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf).map_err(|e| bad(format!("truncated data: {e}")))?;
            Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
        };
        let block = |take: &mut dyn FnMut([usize; 4]) -> Result<Vec<f32>>| -> Result<Vec<(String, [usize; 4], Vec<f32>)>> {
            header.tensors.iter().map(|(n, s)| Ok((n.clone(), *s, take(*s)?))).collect()
        };
        let weights = block(&mut take)?;
        let m = block(&mut take)?;
        let v = block(&mut take)?;
        let ema = if header.has_ema { Some(block(&mut take)?) } else { None };

        let mut params = ParamStore::new();
        let model = Denoiser::new(&header.model, &mut params, 0)?;
        params.load(weights)?;
        let mut adam = Adam::new(optimizer.clone(), &params);
        adam.step = header.adam_step;
        for (slot, (_, s, d)) in adam.m.iter_mut().zip(m) {
            *slot = Tensor4::from_vec(s, d)?;
        }
        for (slot, (_, s, d)) in adam.v.iter_mut().zip(v) {
            *slot = Tensor4::from_vec(s, d)?;
        }
        let ema = match ema {
            Some(e) => {
                let mut store = params.clone();
                store.load(e)?;
                Some(store)
            }
            None => None,
        };
        let state = TrainState {
            params,
            adam,
            ema,
            step: header.step,
        };
        Ok((
            Self {
                kind: header.kind,
                model: header.model,
                state,
            },
            model,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;

    fn t(v: &[f32], shape: [usize; 4]) -> Tensor4 {
        Tensor4::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn combined_loss_examples() {
        let s = [1, 1, 2, 2];
        let eps = t(&[0.3, -0.2, 1.0, 0.0], s);
        let m = t(&[1.0, 0.0, 1.0, 0.0], s);
        let zero = combined_loss(&eps, &eps, &m, &m, 0.5).unwrap();
        assert_eq!(zero.total, 0.0);

        let eps_hat = eps.map(|v| v + 0.1);
        let m_hat = m.map(|v| v - 0.2);
        let l = combined_loss(&eps, &eps_hat, &m, &m_hat, 0.5).unwrap();
        assert!((l.total - 0.03).abs() < 1e-7, "{l:?}");
        assert_eq!(l.total, l.noise + 0.5 * l.mask);

        let l0 = combined_loss(&eps, &eps_hat, &m, &m_hat, 0.0).unwrap();
        assert_eq!(l0.total, l0.noise);

        let nan = eps.map(|_| f32::NAN);
        assert!(matches!(combined_loss(&eps, &nan, &m, &m, 0.5), Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_loss_examples() {
        let s = [1, 1, 2, 2];
        let eps = Tensor4::zeros(s);
        let known = t(&[1.0, 1.0, 0.0, 0.0], s);
        let inside = t(&[0.5, -0.3, 0.0, 0.0], s);
        assert_eq!(masked_loss(&eps, &inside, &known).unwrap().0, 0.0);
        let half = t(&[0.0, 0.0, 0.1, 0.0], s);
        assert!((masked_loss(&eps, &half, &known).unwrap().0 - 0.005).abs() < 1e-9);
        let all = Tensor4::full(s, 1.0);
        assert_eq!(masked_loss(&eps, &half, &all).unwrap().0, 0.0);
    }

    #[test]
    fn mask_dropout() {
        let mut r = rng::stream(0, Domain::Train, 0);
        let base = Tensor4::<f32>::from_fn([4, 11, 3, 3], |[b, c, y, x]| (b + c + y + x) as f32 + 1.0);
        let mut c = base.clone();
        apply_mask_dropout(&mut c, 0.0, &mut r);
        assert_eq!(c, base);
        apply_mask_dropout(&mut c, 1.0, &mut r);
        assert_eq!(c.channel_range(10, 1).unwrap().sum(), 0.0);
        assert_eq!(c.channel_range(0, 10).unwrap(), base.channel_range(0, 10).unwrap());

        let mut zeroed = 0;
        for _ in 0..2500 {
            let mut c = base.clone();
            zeroed += apply_mask_dropout(&mut c, 0.5, &mut r).iter().filter(|&&d| d).count();
            assert_eq!(c.channel_range(0, 10).unwrap(), base.channel_range(0, 10).unwrap());
        }
        let freq = zeroed as f64 / 10_000.0;
        assert!((freq - 0.5).abs() <= 0.02, "{freq}");
    }

    #[test]
    fn augment_contract() {
        let img = Tensor4::from_fn([1, 3, 4, 4], |[_, c, y, x]| 0.2 + 0.05 * (c + y + x) as f32);
        assert_eq!(AugmentDraw::IDENTITY.apply(&img), img);
        let up = AugmentDraw {
            brightness: 0.1,
            ..AugmentDraw::IDENTITY
        };
        assert!((up.apply(&img).mean() - img.mean() - 0.1).abs() < 1e-6);
        let mut r = rng::stream(1, Domain::Train, 0);
        let wild = AugmentConfig {
            rgb_shift_max: 2.0,
            brightness_max: 2.0,
            contrast_max: 2.0,
            ..AugmentConfig::default()
        };
        for _ in 0..50 {
            let out = AugmentDraw::sample(&wild, &mut r).apply(&img);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn augment_keeps_labels() {
        let mut r = rng::stream(2, Domain::Data, 0);
        let s = crate::synth::sample_hand(&mut r, 32, crate::synth::Style(1), crate::synth::Gesture::Open);
        let a = augment(&s, &AugmentConfig::default(), &mut r);
        assert_eq!(a.mask, s.mask);
        assert_eq!(a.hands, s.hands);
    }

    #[test]
    fn divergence_detector() {
        let mut d = DivergenceDetector::default();
        d.observe(1, 1.0).unwrap();
        for s in 0..99 {
            d.observe(s + 2, 11.0).unwrap();
        }
        d.observe(101, 1.0).unwrap();
        for s in 0..99 {
            d.observe(s + 102, 11.0).unwrap();
        }
        assert!(matches!(d.observe(201, 11.0), Err(Error::Diverged { .. })));
        assert!(DivergenceDetector::default().observe(1, f64::NAN).is_err());
    }

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 4,
            channel_mults: vec![1, 2],
            attention_levels: vec![1],
            emb_dim: 8,
            num_styles: 16,
            mask_hidden: 4,
            mask_layers: 2,
            ..DenoiserConfig::default()
        }
    }

    fn hand_data(n: usize) -> Vec<HandExample> {
        let cfg = crate::synth::DataConfig {
            n,
            hand_size: 8,
            ..Default::default()
        };
        crate::synth::generate_hands(&cfg, ExecMode::Sequential)
            .unwrap()
            .iter()
            .map(|s| HandExample::from_sample(s, 1.0))
            .collect()
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let data = hand_data(4);
        let schedule = ScheduleConfig::default().build().unwrap();
        let codec = LatentCodec::identity();
        let cfg = TrainConfig {
            steps: 6,
            batch_size: 2,
            ema: true,
            ..TrainConfig::default()
        };
        let mut store = ParamStore::new();
        let model = Denoiser::new(&tiny(), &mut store, 3).unwrap();
        let mut full = TrainState::new(store.clone(), &cfg);
        let mut log = Vec::new();
        let hist = train_hand_generator(
            &data,
            &model,
            &mut full,
            &schedule,
            &codec,
            &cfg,
            ExecMode::Sequential,
            &mut TrainIo {
                log: Some(&mut log),
                ..TrainIo::default()
            },
        )
        .unwrap();
        let lines: Vec<serde_json::Value> = std::str::from_utf8(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[5]["step"], 6);
        assert!(lines[0]["loss_mask"].as_f64().unwrap() >= 0.0);

        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("hand.ckpt");
        let mut half = TrainState::new(store, &cfg);
        let first = TrainConfig { steps: 3, ..cfg.clone() };
        let mut io = TrainIo {
            checkpoint: Some(&ck),
            ..TrainIo::default()
        };
        train_hand_generator(&data, &model, &mut half, &schedule, &codec, &first, ExecMode::Sequential, &mut io).unwrap();
        let (loaded, model2) = Checkpoint::load(&ck, &cfg.optimizer).unwrap();
        assert_eq!(loaded.state.step, 3);
        let mut resumed = loaded.state;
        let rest = train_hand_generator(&data, &model2, &mut resumed, &schedule, &codec, &cfg, ExecMode::Sequential, &mut TrainIo::default()).unwrap();
        assert_eq!(rest.len(), 3);
        assert_eq!(rest, hist[3..].to_vec());
        for id in full.params.ids() {
            assert_eq!(full.params.get(id), resumed.params.get(id));
            assert_eq!(full.ema.as_ref().unwrap().get(id), resumed.ema.as_ref().unwrap().get(id));
        }
    }

    #[test]
    fn bad_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        std::fs::write(&p, b"nope").unwrap();
        assert!(matches!(Checkpoint::load(&p, &AdamConfig::default()), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let schedule = ScheduleConfig::default().build().unwrap();
        let mut store = ParamStore::new();
        let model = Denoiser::new(&tiny(), &mut store, 0).unwrap();
        let cfg = TrainConfig::default();
        let mut st = TrainState::new(store, &cfg);
        let r = train_hand_generator(&[], &model, &mut st, &schedule, &LatentCodec::identity(), &cfg, ExecMode::Sequential, &mut TrainIo::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }
}
