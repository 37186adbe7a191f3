//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a hard criterion fails. Criterion 8 is soft: its result is
//! reported but never fails the run.
//!
//! `HANDFIRST_ACCEPTANCE=quick` skips the criteria that train the full toy
//! models (4b, 5, 8, 9) and reports them as SKIP.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use handfirst::conditioning::{Canvas, Skeleton, CANVAS_FILL};
use handfirst::denoiser::{Denoiser, DenoiserConfig};
use handfirst::metrics::{dap, dap_thresholds, fid, uniform_k, Detection, GtInstance};
use handfirst::morphology::{Mask, StructuringElement};
use handfirst::nn::ParamStore;
use handfirst::outpaint::{expansion_schedule, outpaint, OutpaintJob};
use handfirst::pipeline::{self, mix_seed, Generator, Model, RunConfig, RunDir, SeedTag};
use handfirst::rng::{self, Domain};
use handfirst::schedule::{forward_noise, gaussian, predict_x0, ddim_step, sample, NoiseSchedule, SamplerConfig};
use handfirst::synth::{generate_hands, DataConfig};
use handfirst::trainer::{
    hand_loss_and_grads, make_hand_batch, train_hand_generator, AugmentConfig, CheckpointKind, HandBatch, HandExample, TrainConfig,
    TrainIo, TrainState,
};
use handfirst::{ExecMode, Result, Tensor4};
use rand::Rng as _;
use statrs::distribution::{ContinuousCDF, Normal};

/// Held-out mask IoU target of the full toy run, frozen after calibration.
const MASK_IOU_TARGET: f64 = 0.80;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn rel_err(a: &Tensor4<f64>, b: &Tensor4<f64>) -> f64 {
    let scale = b.data().iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.max_abs_diff(b).unwrap() / scale
}

// ---------------------------------------------------------------- 1

/// Law of the DDIM output when data are N(mu, s²) and the predictor is the
/// exact posterior mean of ε. Every update is affine in x, so starting from
/// N(0, 1) the output stays Gaussian; returns its mean and variance.
fn ddim_law(steps: usize, beta: (f64, f64), n: usize, eta: f64, mu: f64, s: f64) -> (f64, f64) {
    let mut alpha_bar = vec![1.0];
    for i in 0..steps {
        let b = beta.0 + (beta.1 - beta.0) * i as f64 / (steps - 1).max(1) as f64;
        alpha_bar.push(alpha_bar[i] * (1.0 - b));
    }
    let ts: Vec<usize> = (1..=n).rev().map(|i| (i * steps + n / 2) / n).chain([0]).collect();
    let (mut m, mut v) = (0.0, 1.0);
    for w in ts.windows(2) {
        let (ab, ab_prev) = (alpha_bar[w[0]], alpha_bar[w[1]]);
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).sqrt();
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (a2, b2) = (ab_prev.sqrt(), (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt());
        let gain = (a2 * a * s * s + b2 * b) / (a * a * s * s + b * b);
        m = a2 * mu + gain * (m - a * mu);
        v = gain * gain * v + sigma * sigma;
    }
    (m, v)
}

fn sampler_matches_gaussian_target() -> Result<Verdict> {
    let (steps, beta) = (1000, (1e-4, 0.02));
    let schedule = NoiseSchedule::linear(steps, beta.0, beta.1)?;
    let (mu, s) = (0.3, 0.5);
    let n = 4096;
    let oracle = |x: &Tensor4<f64>, t: usize| -> Result<Tensor4<f64>> {
        let ab = schedule.alpha_bar(t)?;
        let var = ab * s * s + 1.0 - ab;
        Ok(x.map(|v| (1.0 - ab).sqrt() * (v - ab.sqrt() * mu) / var))
    };
    let mut pass = true;
    let mut lines = Vec::new();
    for (inference, eta) in [(50, 0.0), (50, 1.0), (steps, 0.0)] {
        let cfg = SamplerConfig {
            num_inference_steps: inference,
            sigma_scale: eta,
            seed: 11,
            clip_x0: None,
        };
        let x = sample(&oracle, &cfg, &schedule, [n, 1, 1, 1])?;
        let mean = x.data().iter().sum::<f64>() / n as f64;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let (m_law, v_law) = ddim_law(steps, beta, inference, eta, mu, s);
        let z = (mean - m_law).abs() / (v_law / n as f64).sqrt();
        let dv = (var / v_law - 1.0).abs();
        pass &= z <= 3.0 && dv <= 0.05;
        if inference == steps {
            // with every step the chain is close enough to the data law itself
            pass &= (mean / mu - 1.0).abs() <= 0.05 && (var / (s * s) - 1.0).abs() <= 0.05;
        }
        lines.push(format!(
            "{inference} steps eta {eta}: mean {mean:.4} ({z:.2} SE), variance {var:.4} vs {v_law:.4} ({:.1}%; data variance {})",
            dv * 100.0,
            s * s
        ));
    }
    verdict(pass, lines.join("; "))
}

// ---------------------------------------------------------------- 2

fn round_trip_algebra() -> Result<Verdict> {
    let mut r = rng::stream(2, Domain::Eval, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let steps = r.random_range(2..=1000);
        let b0 = r.random_range(1e-5..1e-2);
        let b1 = r.random_range(b0..0.05);
        let schedule = NoiseSchedule::linear(steps, b0, b1)?;
        let t = r.random_range(1..=steps);
        let t_prev = r.random_range(0..t);
        let shape = [r.random_range(1..3), r.random_range(1..4), r.random_range(1..5), r.random_range(1..5)];
        let x0: Tensor4<f64> = Tensor4::from_fn(shape, |_| r.random_range(-1.0..1.0));
        let eps = gaussian(shape, &mut r);
        let xt = forward_noise(&x0, t, &eps, &schedule)?;
        worst = worst.max(rel_err(&predict_x0(&xt, &eps, t, &schedule)?, &x0));
        let stepped = ddim_step(&xt, &eps, t, t_prev, &schedule, 0.0, None)?;
        worst = worst.max(rel_err(&stepped, &forward_noise(&x0, t_prev, &eps, &schedule)?));
    }
    verdict(worst <= 1e-5, format!("1000 cases, worst relative error {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn loss_gradients_match_finite_differences() -> Result<Verdict> {
    let cfg = DenoiserConfig {
        latent_channels: 3,
        cond_channels: 11,
        base_channels: 4,
        channel_mults: vec![1, 2],
        num_res_blocks: 1,
        attention_levels: vec![1],
        emb_dim: 8,
        mask_head: true,
        mask_upsample: 1,
        mask_layers: 2,
        mask_hidden: 4,
        ..DenoiserConfig::default()
    };
    let mut params = ParamStore::<f64>::new();
    let model = Denoiser::new(&cfg, &mut params, 3)?;
    let mut r = rng::stream(3, Domain::Eval, 0);
    let shape = [2, 3, 8, 8];
    let batch = HandBatch {
        x0: Tensor4::from_fn(shape, |_| r.random_range(-1.0..1.0)),
        cond: Tensor4::from_fn([2, 11, 8, 8], |_| r.random_range(0.0..1.0)),
        mask: Tensor4::from_fn([2, 1, 8, 8], |_| if r.random_bool(0.4) { 1.0 } else { 0.0 }),
        style: vec![1, 6],
        t: vec![40, 170],
        eps: gaussian(shape, &mut r),
    };
    let schedule = NoiseSchedule::linear(200, 1e-4, 0.1)?;
    let lambda = 0.5;
    let loss = |p: &ParamStore<f64>| hand_loss_and_grads(&model, p, &batch, &schedule, lambda, ExecMode::Sequential).map(|x| x.0.total);
    let (_, grads) = hand_loss_and_grads(&model, &params, &batch, &schedule, lambda, ExecMode::Sequential)?;
    let h = 1e-5;
    let (mut checked, mut failed, mut worst) = (0usize, 0usize, 0.0f64);
    for id in params.ids() {
        for i in 0..params.get(id).len() {
            let mut p = params.clone();
            p.get_mut(id).data_mut()[i] += h;
            let up = loss(&p)?;
            p.get_mut(id).data_mut()[i] -= 2.0 * h;
            let down = loss(&p)?;
            let num = (up - down) / (2.0 * h);
            let ana = grads.get(id).data()[i];
            let err = (num - ana).abs();
            let scale = num.abs().max(ana.abs());
            if scale > 1e-6 {
                worst = worst.max(err / scale);
            }
            failed += (err > 1e-4 * scale + 1e-9) as usize;
            checked += 1;
        }
    }
    verdict(
        failed == 0,
        format!("{checked} parameters of a {}-tensor network, {failed} off, worst relative error {worst:.2e}", params.len()),
    )
}

// ---------------------------------------------------------------- 4

fn overfit_one_sample() -> Result<Verdict> {
    let data_cfg = DataConfig {
        n: 1,
        hand_size: 32,
        ..DataConfig::default()
    };
    let sample = &generate_hands(&data_cfg, ExecMode::Sequential)?[0];
    let data = vec![HandExample::from_sample(sample, RunConfig::default().sigma())];
    let run = RunConfig::default();
    let schedule = run.build_schedule()?;
    let codec = run.codec()?;
    let mut params = ParamStore::new();
    let model = Denoiser::new(&run.hand_model, &mut params, 4)?;
    let cfg = TrainConfig {
        steps: 200,
        batch_size: 4,
        mask_dropout_p: 0.0,
        augment: AugmentConfig {
            rgb_shift: false,
            brightness_contrast: false,
            ..AugmentConfig::default()
        },
        ..TrainConfig::default()
    };
    let eval = make_hand_batch(&data, &[0; 32], &codec, &schedule, &cfg, &mut rng::stream(4, Domain::Eval, 0))?;
    let eval_loss = |p: &ParamStore| -> Result<f64> {
        Ok(hand_loss_and_grads(&model, p, &eval, &schedule, cfg.lambda_mask, run.exec)?.0.total)
    };
    let before = eval_loss(&params)?;
    let mut state = TrainState::new(params, &cfg);
    train_hand_generator(&data, &model, &mut state, &schedule, &codec, &cfg, run.exec, &mut TrainIo::default())?;
    let after = eval_loss(&state.params)?;
    let drop = 1.0 - after / before;
    verdict(
        drop >= 0.5,
        format!("combined loss on a fixed batch {before:.4} -> {after:.4} ({:.1}% lower)", drop * 100.0),
    )
}

/// Shared toy run: 2k hand samples, 1k cluttered body frames.
fn toy_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default()
        .merged(&serde_json::json!({
            "body_data": {"backgrounds": [3], "splits": [0.75, 0.05, 0.2]},
            "train_hand": {"batch_size": 4},
            "train_outpaint": {"batch_size": 4, "steps": 3000},
            "hand_sampler.num_inference_steps": 25,
            "outpaint.sampler.num_inference_steps": 25,
        }))
        .expect("valid overrides");
    cfg.data_dir = root.join("data");
    cfg.output_dir = root.join("run");
    cfg
}

fn full_toy_training(cfg: &RunConfig) -> Result<Verdict> {
    let t = Instant::now();
    pipeline::make_data(cfg)?;
    let data_s = t.elapsed().as_secs_f64();
    let t = Instant::now();
    let summary = pipeline::train_hand(cfg)?;
    let train_s = t.elapsed().as_secs_f64();
    let iou = summary.val_mask_iou.unwrap_or(0.0);
    verdict(
        iou >= MASK_IOU_TARGET && train_s < 1200.0 && summary.step == 5000,
        format!(
            "{} steps on {} samples: held-out mask IoU {iou:.3} (target {MASK_IOU_TARGET}), training {train_s:.0} s, data {data_s:.0} s",
            summary.step, cfg.hand_data.n
        ),
    )
}

// ---------------------------------------------------------------- 5

fn load_models(cfg: &RunConfig) -> Result<(Model, Model)> {
    let dir = RunDir::create(cfg)?;
    Ok((
        Model::load(&dir.checkpoint(CheckpointKind::Hand), CheckpointKind::Hand, cfg)?,
        Model::load(&dir.checkpoint(CheckpointKind::Outpaint), CheckpointKind::Outpaint, cfg)?,
    ))
}

fn hands_are_preserved(cfg: &RunConfig) -> Result<Verdict> {
    let t = Instant::now();
    pipeline::train_outpaint(cfg)?;
    let train_s = t.elapsed().as_secs_f64();
    let (hand, outp) = load_models(cfg)?;
    let gen = Generator::new(cfg, Some(&hand), &outp)?;
    let frames = pipeline::generation_frames(cfg, 100)?;
    let refs: Vec<_> = frames.iter().collect();
    let mut generated = Vec::new();
    for chunk in refs.chunks(cfg.generate.batch_size) {
        generated.extend(gen.generate(chunk)?);
    }
    let mut intact = 0;
    for g in &generated {
        let m = &g.canvas.mask;
        let same = !m.is_empty()
            && (0..m.height()).all(|y| {
                (0..m.width()).all(|x| {
                    !m.get(x, y) || (0..3).all(|c| g.image.at(0, c, y, x).to_bits() == g.canvas.image.at(0, c, y, x).to_bits())
                })
            });
        intact += same as usize;
    }
    verdict(
        cfg.conditioning.codec_factor == 1 && intact == 100 && generated.len() == 100,
        format!("{intact}/{} images keep every hand pixel (outpainter trained in {train_s:.0} s)", generated.len()),
    )
}

// ---------------------------------------------------------------- 6

/// Chebyshev distance from each pixel to the nearest set pixel.
fn chebyshev_distance(m: &Mask) -> Vec<usize> {
    let on: Vec<(usize, usize)> = (0..m.height())
        .flat_map(|y| (0..m.width()).map(move |x| (x, y)))
        .filter(|&(x, y)| m.get(x, y))
        .collect();
    (0..m.height())
        .flat_map(|y| (0..m.width()).map(move |x| (x, y)))
        .map(|(x, y)| {
            on.iter()
                .map(|&(a, b)| a.abs_diff(x).max(b.abs_diff(y)))
                .min()
                .unwrap_or(usize::MAX)
        })
        .collect()
}

fn expansion_invariants() -> Result<Verdict> {
    let mut single = Mask::empty(9, 9);
    single.set(4, 4, true);
    let plan = expansion_schedule(&single, 3, &StructuringElement::square(3), None)?;
    let areas: Vec<usize> = plan.masks.iter().map(Mask::area).collect();

    let mut r = rng::stream(6, Domain::Eval, 0);
    let (mut nested, mut exact) = (0, 0);
    for _ in 0..10_000 {
        let (w, h) = (r.random_range(1..20), r.random_range(1..20));
        let p = r.random_range(0.0..0.3);
        let m = Mask::from_fn(w, h, |_, _| r.random_bool(p));
        let steps = r.random_range(1..8);
        let cap = r.random_bool(0.3).then(|| r.random_range(0..5));
        let plan = expansion_schedule(&m, steps, &StructuringElement::square(3), cap)?;
        nested += (plan.masks.len() == steps && plan.is_nested()) as usize;
        let dist = chebyshev_distance(&m);
        let widest = cap.map_or(steps - 1, |c| c.min(steps - 1));
        let oracle_ok = plan.masks.iter().enumerate().all(|(i, mi)| {
            let radius = (steps - 1 - i).min(widest);
            mi.data().iter().zip(&dist).all(|(&on, &d)| on == (d <= radius))
        });
        exact += oracle_ok as usize;
    }
    verdict(
        areas == [25, 9, 1] && nested == 10_000 && exact == 10_000,
        format!("single pixel areas {areas:?}; {nested}/10000 nested, {exact}/10000 equal to the distance oracle"),
    )
}

// ---------------------------------------------------------------- 7

fn oracle_oks(g: &GtInstance, d: &Detection, k: f64) -> f64 {
    let vis: Vec<usize> = (0..g.keypoints.len()).filter(|&j| g.keypoints[j][2] > 0.0).collect();
    let s: f64 = vis
        .iter()
        .filter(|&&j| d.keypoints[j][2] > 0.0)
        .map(|&j| {
            let dx = g.keypoints[j][0] - d.keypoints[j][0];
            let dy = g.keypoints[j][1] - d.keypoints[j][1];
            (-(dx * dx + dy * dy) / (2.0 * g.scale * g.scale * k * k)).exp()
        })
        .sum();
    s / vis.len() as f64
}

/// AP by enumerating every subset of detections as the true-positive set:
/// valid sets give each image at most one detection above threshold, and the
/// winner is the lexicographically largest in score order (higher-scoring
/// detections claim their image first).
fn exhaustive_dap(gts: &[GtInstance], dets: &[Detection], k: f64, thresholds: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let oks: Vec<f64> = dets.iter().map(|d| oracle_oks(&gts[d.image], d, k)).collect();
    let n = dets.len();
    thresholds
        .iter()
        .map(|&thr| {
            let mut best: Option<Vec<bool>> = None;
            for set in 0u32..(1 << n) {
                let tp: Vec<bool> = order.iter().map(|&i| set >> i & 1 == 1).collect();
                let mut used = vec![false; gts.len()];
                let valid = order.iter().zip(&tp).all(|(&i, &hit)| {
                    if !hit {
                        return true;
                    }
                    let ok = oks[i] >= thr && !used[dets[i].image];
                    used[dets[i].image] = true;
                    ok
                });
                if valid && best.as_ref().is_none_or(|b| tp > *b) {
                    best = Some(tp);
                }
            }
            let tp = best.unwrap_or_default();
            let mut points = Vec::new();
            let mut hits = 0.0;
            for (i, &t) in tp.iter().enumerate() {
                hits += t as u8 as f64;
                points.push((hits / gts.len() as f64, hits / (i + 1) as f64));
            }
            (0..=100)
                .map(|r| {
                    let r = r as f64 / 100.0;
                    points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 101.0
        })
        .sum::<f64>()
        / thresholds.len() as f64
}

fn metric_oracles() -> Result<Verdict> {
    let mut r = rng::stream(7, Domain::Eval, 0);
    let thresholds = dap_thresholds();
    let nk = 6;
    let k = uniform_k(nk);
    let mut agree = 0;
    for _ in 0..500 {
        let images = r.random_range(1..4);
        let gts: Vec<GtInstance> = (0..images)
            .map(|_| {
                let mut kp: Vec<[f64; 3]> = (0..nk)
                    .map(|_| [r.random_range(0.0..1.0), r.random_range(0.0..1.0), r.random_bool(0.8) as u8 as f64])
                    .collect();
                kp[0][2] = 1.0;
                GtInstance {
                    keypoints: kp,
                    scale: r.random_range(0.2..1.0),
                }
            })
            .collect();
        let dets: Vec<Detection> = (0..r.random_range(0..=5))
            .map(|_| {
                let image = r.random_range(0..images);
                let spread = r.random_range(0.0..2.5) * gts[image].scale * k[0];
                Detection {
                    image,
                    score: (r.random_range(0.0..1.0f64) * 4.0).round() / 4.0,
                    keypoints: gts[image]
                        .keypoints
                        .iter()
                        .map(|g| {
                            let vis = r.random_bool(0.9) as u8 as f64;
                            [g[0] + spread * r.random_range(-1.0..1.0), g[1] + spread * r.random_range(-1.0..1.0), vis]
                        })
                        .collect(),
                }
            })
            .collect();
        let got = dap(&gts, &dets, &k, &thresholds)?;
        let want = exhaustive_dap(&gts, &dets, k[0], &thresholds);
        agree += ((got - want).abs() <= 1e-12) as usize;
    }

    let n = 10_000;
    let draws = |mu: f64, sd: f64| -> Vec<Vec<f64>> {
        let d = Normal::new(mu, sd).unwrap();
        (0..n).map(|i| vec![d.inverse_cdf((i as f64 + 0.5) / n as f64)]).collect()
    };
    let mut fid_worst: f64 = 0.0;
    for (ma, sa, mb, sb) in [(0.0, 1.0, 1.0, 2.0), (0.5, 1.5, -0.5, 0.5), (0.0, 1.0, 3.0, 1.0)] {
        let closed = (ma - mb) * (ma - mb) + (sa - sb) * (sa - sb);
        let got = fid(&draws(ma, sa), &draws(mb, sb))?;
        fid_worst = fid_worst.max((got / closed - 1.0).abs());
    }
    verdict(
        agree == 500 && fid_worst <= 0.02,
        format!("DAP equals the exhaustive matcher on {agree}/500 cases; 1-D FID worst relative error {:.3}%", fid_worst * 100.0),
    )
}

// ---------------------------------------------------------------- 8

fn blending_ablation(cfg: &RunConfig) -> Result<Verdict> {
    let report = pipeline::ablate_blending(cfg)?;
    let means: Vec<String> = report
        .strategies
        .iter()
        .map(|s| format!("{} {:.4} [{:.4}, {:.4}]", s.strategy.id(), s.boundary.mean, s.boundary.lo, s.boundary.hi))
        .collect();
    verdict(
        report.n_images >= 200 && report.expected_ordering_holds,
        format!(
            "{} images, observed ordering {}; boundary score {}",
            report.n_images,
            report.observed_ordering,
            means.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 9

/// The outpainter with nothing to go on: no skeleton, no hands.
fn unconditioned_baseline(cfg: &RunConfig) -> Result<Verdict> {
    let (_, outp) = load_models(cfg)?;
    let frames = pipeline::generation_frames(cfg, 50)?;
    let (w, h) = (frames[0].image.width(), frames[0].image.height());
    let base = cfg.seed_for(SeedTag::OutpaintSampler);
    let jobs: Vec<OutpaintJob> = frames
        .iter()
        .enumerate()
        .map(|(i, r)| OutpaintJob {
            canvas: Canvas {
                image: Tensor4::full([1, 3, h, w], CANVAS_FILL),
                mask: Mask::empty(w, h),
                placements: Vec::new(),
            },
            skeleton: Skeleton {
                layout: r.skeleton.layout,
                keypoints: vec![[0.0; 3]; r.skeleton.keypoints.len()],
            },
            style: r.entry.style,
            seed: mix_seed(base, i as u64, 1),
        })
        .collect();
    let net = outp.as_net(cfg.exec);
    let schedule = cfg.build_schedule()?;
    let codec = cfg.codec()?;
    let mut images = Vec::new();
    for chunk in jobs.chunks(cfg.generate.batch_size) {
        images.extend(outpaint(chunk, &net, &codec, &schedule, &cfg.outpaint, None)?);
    }
    let extractor = pipeline::build_extractor(cfg)?;
    let refs: Vec<&Tensor4> = images.iter().collect();
    let report = pipeline::score_frames(cfg, &frames, &refs, extractor.as_ref())?;
    verdict(
        report.dap == 0.0,
        format!("DAP {:.4} over {} unconditioned samples (MPJPE {:.3})", report.dap, report.n_samples, report.mpjpe),
    )
}

// ---------------------------------------------------------------- 10

fn tiny_config(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default()
        .merged(&serde_json::json!({
            "hand_data.n": 24,
            "body_data": {"n": 16, "splits": [0.5, 0.25, 0.25]},
            "hand_model": {"base_channels": 8, "channel_mults": [1, 2], "attention_levels": [], "emb_dim": 16, "mask_hidden": 8, "mask_layers": 2},
            "outpaint_model": {"base_channels": 8, "channel_mults": [1, 2], "attention_levels": [], "emb_dim": 16},
            "train_hand": {"steps": 4, "batch_size": 2},
            "train_outpaint": {"steps": 4, "batch_size": 2},
            "hand_sampler.num_inference_steps": 3,
            "outpaint.sampler.num_inference_steps": 3,
            "outpaint.unmasked_tail": 1,
            "ablation": {"count": 3, "bootstrap": 50},
            "metrics.kid": {"block_size": 2, "blocks": 2},
            "exec": "sequential",
        }))
        .expect("valid overrides");
    cfg.data_dir = root.join("data");
    cfg.output_dir = root.join("run");
    cfg
}

fn run_everything(cfg: &RunConfig) -> Result<()> {
    pipeline::make_data(cfg)?;
    pipeline::train_hand(cfg)?;
    pipeline::train_outpaint(cfg)?;
    pipeline::generate(cfg)?;
    pipeline::evaluate(cfg)?;
    pipeline::ablate_blending(cfg)?;
    Ok(())
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn determinism() -> Result<Verdict> {
    let tmp = tempfile::tempdir()?;
    let cfg = tiny_config(tmp.path());
    run_everything(&cfg)?;
    let first = tree(tmp.path());
    fs::remove_dir_all(&cfg.data_dir)?;
    fs::remove_dir_all(&cfg.output_dir)?;
    run_everything(&cfg)?;
    let second = tree(tmp.path());
    let differing: Vec<_> = first
        .keys()
        .chain(second.keys())
        .filter(|k| first.get(*k) != second.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    verdict(
        differing.is_empty() && first.len() > 20,
        format!("{} files compared across two runs, {} differ {:?}", first.len(), differing.len(), differing),
    )
}

// ----------------------------------------------------------------

fn main() {
    let quick = std::env::var("HANDFIRST_ACCEPTANCE").is_ok_and(|v| v == "quick");
    let tmp = tempfile::tempdir().expect("temp dir");
    let toy = toy_config(tmp.path());

    type Check<'a> = Box<dyn Fn() -> Result<Verdict> + 'a>;
    let checks: Vec<(&str, &str, bool, bool, Check)> = vec![
        ("1", "sampler correctness", false, false, Box::new(sampler_matches_gaussian_target)),
        ("2", "round-trip algebra", false, false, Box::new(round_trip_algebra)),
        ("3", "gradient fidelity", false, false, Box::new(loss_gradients_match_finite_differences)),
        ("4a", "overfit one sample", false, false, Box::new(overfit_one_sample)),
        ("6", "expansion schedule", false, false, Box::new(expansion_invariants)),
        ("7", "metric oracles", false, false, Box::new(metric_oracles)),
        ("10", "determinism", false, false, Box::new(determinism)),
        ("4b", "full toy training", false, true, Box::new(|| full_toy_training(&toy))),
        ("5", "hand preservation", false, true, Box::new(|| hands_are_preserved(&toy))),
        ("8", "directional blending ablation", true, true, Box::new(|| blending_ablation(&toy))),
        ("9", "unconditioned baseline", false, true, Box::new(|| unconditioned_baseline(&toy))),
    ];

    let mut hard_failures = Vec::new();
    for (id, name, soft, slow, check) in &checks {
        if *slow && quick {
            println!("criterion {id:>3} {name}: SKIP (quick mode)");
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check()));
        let secs = t.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(Ok(v)) => (v.pass, v.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        let status = match (pass, soft) {
            (true, _) => "PASS",
            (false, true) => "SOFT-FAIL",
            (false, false) => "FAIL",
        };
        println!("criterion {id:>3} {name}: {status} ({secs:.1} s) {detail}");
        if !pass && !soft {
            hard_failures.push(*id);
        }
    }
    if !hard_failures.is_empty() {
        println!("failed criteria: {}", hard_failures.join(", "));
        std::process::exit(1);
    }
}
