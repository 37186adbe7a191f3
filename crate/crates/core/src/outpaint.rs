//! Stage-II outpainting with latent blending.
//!
//! After every DDIM step the known hand region of the latent is overwritten
//! with the canvas noised to the same level. The blending region depends on
//! the strategy: the tight box around the mask, the mask itself, or a
//! sequence of dilations shrinking back to the mask. The last steps run
//! unblended and the hand pixels are pasted back at the end.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::{downsize_to_latent, render_skeleton, save_mask, save_rgb, Canvas, Skeleton};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::morphology::{Mask, StructuringElement};
use crate::nn::ParamStore;
use crate::rng::{self, Domain};
use crate::schedule::{ddim_sigma, forward_noise, gaussian, sampler_step, step_pairs, NoiseSchedule, SamplerConfig};
use crate::tensor::{Real, Tensor4};
use crate::trainer::{from_model, outpaint_condition, to_model};

/// Encoder/decoder pair between pixels and latents. Factor 1 is the exact
/// identity; larger factors average-pool on encode and repeat on decode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentCodec {
    pub factor: usize,
}

impl LatentCodec {
    pub fn identity() -> Self {
        Self { factor: 1 }
    }

    pub fn new(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::Config("codec factor must be positive".into()));
        }
        Ok(Self { factor })
    }

    fn check<T: Real>(&self, x: &Tensor4<T>) -> Result<()> {
        let f = self.factor;
        if x.height() % f != 0 || x.width() % f != 0 {
            return Err(Error::Config(format!("{}x{} is not divisible by codec factor {f}", x.height(), x.width())));
        }
        Ok(())
    }

    pub fn encode<T: Real>(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        if self.factor == 1 {
            return Ok(x.clone());
        }
        self.check(x)?;
        let f = self.factor;
        let [b, c, h, w] = x.shape();
        let inv = T::from_f64_lossy(1.0 / (f * f) as f64);
        Ok(Tensor4::from_fn([b, c, h / f, w / f], |[bi, ci, y, xx]| {
            let mut s = T::zero();
            for dy in 0..f {
                for dx in 0..f {
                    s += x.at(bi, ci, y * f + dy, xx * f + dx);
                }
            }
            s * inv
        }))
    }

    pub fn decode<T: Real>(&self, z: &Tensor4<T>) -> Tensor4<T> {
        if self.factor == 1 {
            return z.clone();
        }
        let f = self.factor;
        let [b, c, h, w] = z.shape();
        Tensor4::from_fn([b, c, h * f, w * f], |[bi, ci, y, x]| z.at(bi, ci, y / f, x / f))
    }

    /// Bilinear downsizing of a binary mask to latent resolution.
    pub fn downsize_mask(&self, m: &Mask) -> Result<Tensor4> {
        downsize_to_latent(&m.to_tensor::<f32>(), self.factor)
    }
}

/// Binary mask of item 0 at threshold 0.5.
pub fn binarize(t: &Tensor4) -> Mask {
    Mask::from_tensor(t, 0, 0.5)
}

/// `m ⊙ x_c + (1 − m) ⊙ x_t`, with a one-channel `m` broadcast over
/// channels.
pub fn blend_latents<T: Real>(xc: &Tensor4<T>, xt: &Tensor4<T>, m: &Tensor4<T>) -> Result<Tensor4<T>> {
    xc.same_shape(xt)?;
    let [b, _, h, w] = xt.shape();
    m.ensure_shape([b, 1, h, w])?;
    Ok(Tensor4::from_fn(xt.shape(), |[bi, ci, y, x]| {
        let mv = m.at(bi, 0, y, x);
        mv * xc.at(bi, ci, y, x) + (T::one() - mv) * xt.at(bi, ci, y, x)
    }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Bbox,
    Naive,
    #[default]
    Sequential,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Bbox, Strategy::Naive, Strategy::Sequential];

    pub fn id(self) -> &'static str {
        match self {
            Strategy::Bbox => "bbox",
            Strategy::Naive => "naive",
            Strategy::Sequential => "sequential",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.id() == s)
            .ok_or_else(|| Error::Config(format!("unknown blending strategy {s:?} (bbox, naive, sequential)")))
    }
}

/// Per-step blending masks at latent resolution, then `unmasked_tail`
/// unblended steps and a pixel-space paste with `final_mask`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendPlan {
    pub masks: Vec<Mask>,
    pub unmasked_tail: usize,
    pub final_mask: Mask,
}

impl BlendPlan {
    pub fn is_nested(&self) -> bool {
        self.masks.windows(2).all(|w| w[1].is_subset_of(&w[0]))
    }
}

/// `steps` masks from the widest to `mask` itself: entry `i` is `mask`
/// dilated `min(steps − 1 − i, cap)` times.
pub fn expansion_schedule(mask: &Mask, steps: usize, kernel: &StructuringElement, cap: Option<usize>) -> Result<BlendPlan> {
    if steps == 0 {
        return Err(Error::Config("expansion schedule needs at least one step".into()));
    }
    let mut masks = vec![mask.clone()];
    let widest = cap.map_or(steps - 1, |c| c.min(steps - 1));
    for _ in 0..widest {
        let next = masks.last().unwrap().dilate(kernel);
        masks.push(next);
    }
    while masks.len() < steps {
        masks.push(masks.last().unwrap().clone());
    }
    masks.reverse();
    Ok(BlendPlan {
        masks,
        unmasked_tail: 0,
        final_mask: mask.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutpaintConfig {
    pub strategy: Strategy,
    pub unmasked_tail: usize,
    /// Side of the square dilation kernel.
    pub kernel: usize,
    /// Upper bound on the number of dilations; 0 means one per blended step.
    pub max_dilations: usize,
    pub sampler: SamplerConfig,
}

impl Default for OutpaintConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Sequential,
            unmasked_tail: 2,
            kernel: 3,
            max_dilations: 0,
            sampler: SamplerConfig {
                clip_x0: Some(1.0),
                ..SamplerConfig::default()
            },
        }
    }
}

impl OutpaintConfig {
    /// Blending plan for a latent mask under this configuration.
    pub fn plan(&self, latent_mask: &Mask, pixel_mask: &Mask) -> Result<BlendPlan> {
        let n = self.sampler.num_inference_steps;
        let blended = n.saturating_sub(self.unmasked_tail);
        let masks = match self.strategy {
            Strategy::Bbox => vec![latent_mask.bbox_hull(); blended],
            Strategy::Naive => vec![latent_mask.clone(); blended],
            Strategy::Sequential if blended == 0 => Vec::new(),
            Strategy::Sequential => {
                let cap = (self.max_dilations > 0).then_some(self.max_dilations);
                expansion_schedule(latent_mask, blended, &StructuringElement::square(self.kernel), cap)?.masks
            }
        };
        Ok(BlendPlan {
            masks,
            unmasked_tail: n - blended,
            final_mask: pixel_mask.clone(),
        })
    }
}

/// Anything that predicts noise from a noisy latent, a timestep shared by
/// the batch, condition channels and style ids.
pub trait ConditionalPredictor {
    fn predict_eps(&self, xt: &Tensor4, t: usize, cond: &Tensor4, style: &[usize]) -> Result<Tensor4>;
}

impl<F> ConditionalPredictor for F
where
    F: Fn(&Tensor4, usize, &Tensor4, &[usize]) -> Result<Tensor4>,
{
    fn predict_eps(&self, xt: &Tensor4, t: usize, cond: &Tensor4, style: &[usize]) -> Result<Tensor4> {
        self(xt, t, cond, style)
    }
}

/// A trained network as a predictor.
pub struct Net<'a> {
    pub model: &'a Denoiser,
    pub params: &'a ParamStore,
    pub exec: ExecMode,
}

impl ConditionalPredictor for Net<'_> {
    fn predict_eps(&self, xt: &Tensor4, t: usize, cond: &Tensor4, style: &[usize]) -> Result<Tensor4> {
        let ts = vec![t; xt.batch()];
        Ok(self.model.predict(self.params, xt, &ts, cond, style, self.exec)?.eps_hat)
    }
}

/// One image to outpaint.
#[derive(Clone, Debug)]
pub struct OutpaintJob {
    pub canvas: Canvas,
    pub skeleton: Skeleton,
    pub style: usize,
    pub seed: u64,
}

fn stack_masks(masks: &[&Mask]) -> Result<Tensor4> {
    Tensor4::stack(&masks.iter().map(|m| m.to_tensor()).collect::<Vec<_>>())
}

fn per_item_noise(shape: [usize; 4], seeds: &[u64], index: u64) -> Result<Tensor4> {
    let [_, c, h, w] = shape;
    let items: Vec<Tensor4> = seeds
        .iter()
        .map(|&s| gaussian([1, c, h, w], &mut rng::stream(s, Domain::Sample, index)))
        .collect();
    Tensor4::stack(&items)
}

/// Noise-stream indices: 0 for x_T, `1 + i` for the DDIM noise of step
/// `i`, and `CANVAS_STREAM + i` for the canvas noise of step `i`.
const CANVAS_STREAM: u64 = 1 << 20;

/// Outpaint a batch of canvases. Every item draws from its own seed, so an
/// item's result does not depend on the rest of the batch.
pub fn outpaint(
    jobs: &[OutpaintJob],
    predictor: &impl ConditionalPredictor,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    cfg: &OutpaintConfig,
    debug: Option<&Path>,
) -> Result<Vec<Tensor4>> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let (w, h) = (jobs[0].canvas.image.width(), jobs[0].canvas.image.height());
    let mut xc = Vec::new();
    let mut conds = Vec::new();
    let mut plans = Vec::new();
    for job in jobs {
        let c = &job.canvas;
        if c.image.width() != w || c.image.height() != h {
            return Err(Error::shape(&[h, w], &[c.image.height(), c.image.width()]));
        }
        if c.mask.is_empty() {
            log::warn!("empty canvas mask: outpainting degrades to unconditional generation");
        }
        xc.push(to_model(&codec.encode(&c.image)?));
        let sk = render_skeleton(&job.skeleton, w, h)?;
        conds.push(outpaint_condition(&sk, &c.mask, codec)?);
        let latent_mask = binarize(&codec.downsize_mask(&c.mask)?);
        plans.push(cfg.plan(&latent_mask, &c.mask)?);
    }
    let xc = Tensor4::stack(&xc)?;
    let cond = Tensor4::stack(&conds)?;
    let style: Vec<usize> = jobs.iter().map(|j| j.style).collect();
    let seeds: Vec<u64> = jobs.iter().map(|j| j.seed).collect();

    let steps = cfg.sampler.timesteps(schedule)?;
    let mut x = per_item_noise(xc.shape(), &seeds, 0)?;
    for (i, (t, t_prev)) in step_pairs(&steps).into_iter().enumerate() {
        let eps = predictor.predict_eps(&x, t, &cond, &style)?;
        let sigma = ddim_sigma(schedule, t, t_prev, cfg.sampler.sigma_scale)?;
        let noise = if sigma > 0.0 { Some(per_item_noise(x.shape(), &seeds, 1 + i as u64)?) } else { None };
        x = sampler_step(&x, &eps, t, t_prev, schedule, &cfg.sampler, noise.as_ref())?;
        if i < plans[0].masks.len() {
            let known = if t_prev == 0 {
                xc.clone()
            } else {
                let n = per_item_noise(xc.shape(), &seeds, CANVAS_STREAM + i as u64)?;
                forward_noise(&xc, t_prev, &n, schedule)?
            };
            let m = stack_masks(&plans.iter().map(|p| &p.masks[i]).collect::<Vec<_>>())?;
            x = blend_latents(&known, &x, &m)?;
            if let Some(dir) = debug {
                dump_step(dir, i, &plans[0].masks[i], &x, codec)?;
            }
        } else if let Some(dir) = debug {
            dump_step(dir, i, &Mask::empty(x.width(), x.height()), &x, codec)?;
        }
    }

    let decoded = codec.decode(&from_model(&x)).map(|v| v.clamp(0.0, 1.0));
    Ok(jobs
        .iter()
        .zip(&plans)
        .enumerate()
        .map(|(b, (job, plan))| paste(&decoded.select(b), &job.canvas.image, &plan.final_mask))
        .collect())
}

/// Pixels of `canvas` under `mask`, `image` elsewhere.
pub fn paste(image: &Tensor4, canvas: &Tensor4, mask: &Mask) -> Tensor4 {
    Tensor4::from_fn(image.shape(), |[b, c, y, x]| if mask.get(x, y) { canvas.at(b, c, y, x) } else { image.at(b, c, y, x) })
}

fn dump_step(dir: &Path, i: usize, mask: &Mask, x: &Tensor4, codec: &LatentCodec) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_mask(&dir.join(format!("step_{i:03}_mask.png")), mask)?;
    let img = codec.decode(&from_model(&x.select(0)));
    save_rgb(&dir.join(format!("step_{i:03}_latent.png")), &img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{Layout, CANVAS_FILL};
    use crate::schedule::ScheduleConfig;

    #[test]
    fn blend_examples() {
        let s = [1, 2, 2, 2];
        let xc = Tensor4::<f32>::full(s, 1.0);
        let xt = Tensor4::zeros(s);
        let ones = Tensor4::full([1, 1, 2, 2], 1.0);
        let zeros = Tensor4::zeros([1, 1, 2, 2]);
        let half = Tensor4::full([1, 1, 2, 2], 0.5);
        assert_eq!(blend_latents(&xc, &xt, &ones).unwrap(), xc);
        assert_eq!(blend_latents(&xc, &xt, &zeros).unwrap(), xt);
        assert!(blend_latents(&xc, &xt, &half).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(blend_latents(&xc, &xt, &Tensor4::zeros([1, 1, 3, 2])).is_err());
    }

    #[test]
    fn expansion_examples() {
        let se = StructuringElement::square(3);
        let mut dot = Mask::empty(9, 9);
        dot.set(4, 4, true);
        let one = expansion_schedule(&dot, 1, &se, None).unwrap();
        assert_eq!(one.masks, vec![dot.clone()]);
        let three = expansion_schedule(&dot, 3, &se, None).unwrap();
        assert_eq!(three.masks.iter().map(Mask::area).collect::<Vec<_>>(), vec![25, 9, 1]);
        assert!(three.is_nested());
        let full = Mask::full(5, 5);
        assert!(expansion_schedule(&full, 4, &se, None).unwrap().masks.iter().all(|m| *m == full));
        let capped = expansion_schedule(&dot, 5, &se, Some(1)).unwrap();
        assert_eq!(capped.masks.iter().map(Mask::area).collect::<Vec<_>>(), vec![9, 9, 9, 9, 1]);
        let empty = Mask::empty(4, 4);
        assert!(expansion_schedule(&empty, 3, &se, None).unwrap().masks.iter().all(Mask::is_empty));
    }

    #[test]
    fn sequential_plan_on_centered_square() {
        let sq = Mask::from_fn(16, 16, |x, y| (6..10).contains(&x) && (6..10).contains(&y));
        let cfg = OutpaintConfig {
            sampler: SamplerConfig {
                num_inference_steps: 6,
                ..SamplerConfig::default()
            },
            ..OutpaintConfig::default()
        };
        let plan = cfg.plan(&sq, &sq).unwrap();
        assert_eq!(plan.masks.len(), 4);
        assert_eq!(plan.unmasked_tail, 2);
        assert_eq!(plan.masks[3], sq);
        assert!(sq.is_subset_of(&plan.masks[0]) && plan.masks[0] != sq);
    }

    #[test]
    fn codec_round_trip() {
        let x = Tensor4::<f32>::from_fn([1, 3, 16, 8], |[_, c, y, x]| (c * 7 + y * 3 + x) as f32 / 50.0);
        let id = LatentCodec::identity();
        assert_eq!(id.decode(&id.encode(&x).unwrap()), x);
        let pool = LatentCodec::new(8).unwrap();
        let z = pool.encode(&x).unwrap();
        assert_eq!(z.shape(), [1, 3, 2, 1]);
        let flat = Tensor4::<f32>::full([1, 3, 16, 8], 0.25);
        assert_eq!(pool.decode(&pool.encode(&flat).unwrap()), flat);
        assert!(pool.encode(&Tensor4::<f32>::zeros([1, 3, 12, 8])).is_err());
    }

    fn job(mask: Mask, seed: u64) -> OutpaintJob {
        let (w, h) = (mask.width(), mask.height());
        let image = Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| {
            if mask.get(x, y) {
                0.2 + 0.1 * c as f32 + 0.01 * (x + y) as f32
            } else {
                CANVAS_FILL
            }
        });
        OutpaintJob {
            canvas: Canvas {
                image,
                mask,
                placements: Vec::new(),
            },
            skeleton: Skeleton::new(Layout::Stick44, vec![[0.5, 0.5, 1.0]; 44]).unwrap(),
            style: 0,
            seed,
        }
    }

    fn cfg(strategy: Strategy, steps: usize) -> OutpaintConfig {
        OutpaintConfig {
            strategy,
            sampler: SamplerConfig {
                num_inference_steps: steps,
                ..SamplerConfig::default()
            },
            ..OutpaintConfig::default()
        }
    }

    #[test]
    fn oracle_model_returns_canvas() {
        let schedule = ScheduleConfig::default().build().unwrap();
        let mask = Mask::from_fn(16, 24, |x, y| (4..9).contains(&x) && (8..14).contains(&y));
        let j = job(mask, 5);
        let xc = to_model(&j.canvas.image);
        let oracle = |xt: &Tensor4, t: usize, _: &Tensor4, _: &[usize]| -> Result<Tensor4> {
            let ab = schedule.alpha_bar(t)?;
            let (a, b) = (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32);
            xt.zip_map(&xc, |x, c| (x - a * c) / b)
        };
        for s in Strategy::ALL {
            let out = outpaint(std::slice::from_ref(&j), &oracle, &LatentCodec::identity(), &schedule, &cfg(s, 10), None).unwrap();
            assert!(out[0].max_abs_diff(&j.canvas.image).unwrap() < 1e-5, "{s:?}");
        }
    }

    #[test]
    fn hand_pixels_are_preserved_and_full_mask_is_degenerate() {
        let schedule = ScheduleConfig::default().build().unwrap();
        let wild = |xt: &Tensor4, t: usize, _: &Tensor4, _: &[usize]| -> Result<Tensor4> { Ok(xt.map(|v| (v * 3.0 + t as f32).sin())) };
        let mask = Mask::from_fn(16, 16, |x, y| (x + y) % 5 == 0);
        let j = job(mask.clone(), 1);
        let out = outpaint(std::slice::from_ref(&j), &wild, &LatentCodec::identity(), &schedule, &cfg(Strategy::Naive, 8), None).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                if mask.get(x, y) {
                    for c in 0..3 {
                        assert_eq!(out[0].at(0, c, y, x).to_bits(), j.canvas.image.at(0, c, y, x).to_bits());
                    }
                }
            }
        }
        let full = job(Mask::full(16, 16), 2);
        let outs: Vec<Tensor4> = Strategy::ALL
            .iter()
            .map(|&s| outpaint(std::slice::from_ref(&full), &wild, &LatentCodec::identity(), &schedule, &cfg(s, 8), None).unwrap().remove(0))
            .collect();
        assert_eq!(outs[0], full.canvas.image);
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
    }

    #[test]
    fn batch_items_are_independent_and_deterministic() {
        let schedule = ScheduleConfig::default().build().unwrap();
        let wild = |xt: &Tensor4, t: usize, _: &Tensor4, _: &[usize]| -> Result<Tensor4> { Ok(xt.map(|v| 0.5 * v + 0.001 * t as f32)) };
        let a = job(Mask::from_fn(8, 8, |x, _| x < 2), 11);
        let b = job(Mask::from_fn(8, 8, |_, y| y < 3), 12);
        let c = cfg(Strategy::Sequential, 6);
        let id = LatentCodec::identity();
        let both = outpaint(&[a.clone(), b.clone()], &wild, &id, &schedule, &c, None).unwrap();
        let alone = outpaint(&[b], &wild, &id, &schedule, &c, None).unwrap();
        assert_eq!(both[1], alone[0]);
        let again = outpaint(&[a], &wild, &id, &schedule, &c, None).unwrap();
        assert_eq!(both[0], again[0]);
    }

    #[test]
    fn debug_dumps_every_step() {
        let schedule = ScheduleConfig::default().build().unwrap();
        let zero = |xt: &Tensor4, _: usize, _: &Tensor4, _: &[usize]| -> Result<Tensor4> { Ok(Tensor4::zeros(xt.shape())) };
        let dir = tempfile::tempdir().unwrap();
        let j = job(Mask::from_fn(8, 8, |x, y| x == y), 0);
        outpaint(&[j], &zero, &LatentCodec::identity(), &schedule, &cfg(Strategy::Bbox, 5), Some(dir.path())).unwrap();
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 10);
    }

    #[test]
    fn strategy_ids() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.id()).unwrap(), s);
        }
        assert!(Strategy::parse("poisson").is_err());
    }
}
