//! Keypoint recovery for generated images by fitting the parametric hand and
//! body models to a color segmentation.
//!
//! The fit starts from the ground-truth pose and searches locally, so it
//! measures how well an image realizes the requested pose rather than
//! detecting people from scratch. A part whose best silhouette overlap stays
//! below `min_iou` is reported undetected.

use serde::{Deserialize, Serialize};

use crate::conditioning::{Hands, Keypoint, Layout, Skeleton, LEFT, RIGHT};
use crate::error::{Error, Result};
use crate::morphology::Mask;
use crate::synth::{fit_pose, rasterize, transform_prim, BodyParams, HandParams, Prim, Style, BACKGROUNDS, CLUTTER_PALETTE};
use crate::tensor::Tensor4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Coordinate-descent sweeps; step sizes halve after each.
    pub rounds: usize,
    pub min_iou: f64,
    /// Search window padding relative to the initial silhouette extent.
    pub window: f64,
    /// Largest RGB distance at which a pixel still takes a prototype's class.
    pub color_tolerance: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            min_iou: 0.3,
            window: 0.5,
            color_tolerance: 0.25,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.min_iou) || !(self.window >= 0.0) || !(self.color_tolerance > 0.0) {
            return Err(Error::Config(
                "fit needs min_iou in [0, 1], window >= 0 and color_tolerance > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Class {
    Skin,
    Clothing,
    Other,
}

/// Nearest-prototype color classifier for one style's palette.
#[derive(Clone, Debug)]
pub struct Segmenter {
    protos: Vec<([f32; 3], Class)>,
    tolerance: f64,
}

impl Segmenter {
    pub fn for_style(style: Style, tolerance: f64) -> Self {
        let mut protos = vec![(style.skin(), Class::Skin), (style.finger(), Class::Skin), (style.clothing(), Class::Clothing)];
        protos.push((style.legs(), Class::Other));
        protos.extend(BACKGROUNDS.iter().chain(&CLUTTER_PALETTE).map(|&c| (c, Class::Other)));
        Self { protos, tolerance }
    }

    fn classify(&self, image: &Tensor4, class: Class) -> Mask {
        let tol2 = self.tolerance * self.tolerance;
        Mask::from_fn(image.width(), image.height(), |x, y| {
            let px = [0, 1, 2].map(|c| image.at(0, c, y, x) as f64);
            let mut best = (f64::INFINITY, Class::Other);
            for (p, cl) in &self.protos {
                let d: f64 = (0..3).map(|c| (px[c] - p[c] as f64).powi(2)).sum();
                if d < best.0 {
                    best = (d, *cl);
                }
            }
            best.0 <= tol2 && best.1 == class
        })
    }

    pub fn skin(&self, image: &Tensor4) -> Mask {
        self.classify(image, Class::Skin)
    }

    pub fn clothing(&self, image: &Tensor4) -> Mask {
        self.classify(image, Class::Clothing)
    }
}

/// Recovered keypoints in the ground truth's layout, normalized to [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Estimate {
    pub keypoints: Vec<Keypoint>,
    /// Mean silhouette IoU of the detected parts, 0 when none was found.
    pub score: f64,
}

impl Estimate {
    pub fn detected(&self) -> bool {
        self.keypoints.iter().any(|k| k[2] > 0.0)
    }
}

struct Window {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
}

impl Window {
    fn around(extent: (f64, f64, f64, f64), pad: f64, width: usize, height: usize) -> Option<Self> {
        let p = pad * (extent.2 - extent.0).max(extent.3 - extent.1);
        let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
        let (x0, y0) = (clip((extent.0 - p).floor(), width), clip((extent.1 - p).floor(), height));
        let (x1, y1) = (clip((extent.2 + p).ceil(), width), clip((extent.3 + p).ceil(), height));
        (x1 > x0 && y1 > y0).then(|| Window { x0, y0, w: x1 - x0, h: y1 - y0 })
    }

    fn crop(&self, m: &Mask) -> Mask {
        Mask::from_fn(self.w, self.h, |x, y| m.get(self.x0 + x, self.y0 + y))
    }

    fn offset(&self) -> (f64, f64) {
        (-(self.x0 as f64), -(self.y0 as f64))
    }
}

/// Greedy coordinate ascent with step halving after every sweep.
fn coordinate_ascent<P: Clone>(
    mut p: P,
    steps: &mut [f64],
    rounds: usize,
    perturb: impl Fn(&P, usize, f64) -> P,
    score: impl Fn(&P) -> f64,
) -> (P, f64) {
    let mut best = score(&p);
    for _ in 0..rounds {
        for i in 0..steps.len() {
            for sign in [1.0, -1.0] {
                let q = perturb(&p, i, sign * steps[i]);
                let v = score(&q);
                if v > best + 1e-12 {
                    p = q;
                    best = v;
                    break;
                }
            }
        }
        for s in steps.iter_mut() {
            *s *= 0.5;
        }
    }
    (p, best)
}

fn perturb_hand(p: &HandParams, i: usize, delta: f64) -> HandParams {
    let mut q = p.clone();
    match i {
        0 => q.wrist.0 += delta,
        1 => q.wrist.1 += delta,
        2 => q.rotation += delta,
        3 => q.scale = (q.scale + delta).max(1.0),
        4..=7 => q.spread[i - 3] += delta,
        _ => {
            let k = i - 8;
            q.flex[k / 3][k % 3] += delta;
        }
    }
    q.canonicalize();
    q
}

fn union_extent(e: impl IntoIterator<Item = (f64, f64, f64, f64)>) -> (f64, f64, f64, f64) {
    e.into_iter().fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |b, x| {
        (b.0.min(x.0), b.1.min(x.1), b.2.max(x.2), b.3.max(x.3))
    })
}

/// Fit hands to a skin segmentation, starting from `inits`. Each hand is
/// refined with the others held fixed, scoring the union silhouette, and
/// reported with its IoU against the skin the other hands leave unexplained.
/// `fixed` are known skin-colored shapes that are not hands.
pub fn fit_hands(skin: &Mask, inits: &[HandParams], fixed: &[Prim], cfg: &FitConfig) -> Vec<(HandParams, f64)> {
    if inits.is_empty() {
        return Vec::new();
    }
    let extent = union_extent(inits.iter().map(|p| p.extent()));
    let Some(win) = Window::around(extent, cfg.window, skin.width(), skin.height()) else {
        return inits.iter().map(|p| (p.clone(), 0.0)).collect();
    };
    let target = win.crop(skin);
    let o = win.offset();
    let render = |p: &HandParams| p.transformed(1.0, o).mask(win.w, win.h);
    let fixed_mask = rasterize(fixed.iter().map(|p| transform_prim(p, 1.0, o)), win.w, win.h);
    let others = |ps: &[HandParams], skip: usize| {
        ps.iter()
            .enumerate()
            .filter(|&(j, _)| j != skip)
            .fold(fixed_mask.clone(), |m, (_, p)| m.union(&render(p)).expect("window masks"))
    };
    let mut params = inits.to_vec();
    for h in 0..params.len() {
        let rest = others(&params, h);
        let score = |p: &HandParams| render(p).union(&rest).and_then(|m| m.iou(&target)).unwrap_or(0.0);
        let s = params[h].scale;
        let mut steps = vec![0.1 * s, 0.1 * s, 0.1, 0.05 * s];
        steps.extend([0.05; 4]);
        steps.extend([0.2; 15]);
        params[h] = coordinate_ascent(params[h].clone(), &mut steps, cfg.rounds, perturb_hand, score).0;
    }
    (0..params.len())
        .map(|h| {
            let rest = others(&params, h);
            let own = target.difference(&rest).and_then(|t| render(&params[h]).difference(&rest)?.iou(&t)).unwrap_or(0.0);
            (params[h].clone(), own)
        })
        .collect()
}

fn clothing_prims(p: &BodyParams, style: Style) -> Vec<Prim> {
    let c = style.clothing();
    p.body_shapes(style).into_iter().filter(|s| s.color == c).map(|s| s.prim).collect()
}

fn prims_extent(prims: &[Prim]) -> (f64, f64, f64, f64) {
    prims.iter().fold((f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY), |b, p| {
        let (lx, ly, hx, hy) = match *p {
            Prim::Capsule { a, b, r } => (a.0.min(b.0) - r, a.1.min(b.1) - r, a.0.max(b.0) + r, a.1.max(b.1) + r),
            Prim::Ellipse { c, ra, rb, .. } => (c.0 - ra.max(rb), c.1 - ra.max(rb), c.0 + ra.max(rb), c.1 + ra.max(rb)),
            Prim::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
        };
        (b.0.min(lx), b.1.min(ly), b.2.max(hx), b.3.max(hy))
    })
}

/// Fit neck and pelvis to the clothing segmentation with the hands fixed.
fn fit_torso(clothing: &Mask, init: &BodyParams, style: Style, cfg: &FitConfig) -> (BodyParams, f64) {
    let Some(win) = Window::around(prims_extent(&clothing_prims(init, style)), cfg.window * 0.5, clothing.width(), clothing.height())
    else {
        return (init.clone(), 0.0);
    };
    let target = win.crop(clothing);
    let o = win.offset();
    let score = |p: &BodyParams| {
        let moved = p.transformed(1.0, o);
        rasterize(clothing_prims(&moved, style), win.w, win.h).iou(&target).unwrap_or(0.0)
    };
    let l = init.torso_length();
    let perturb = |p: &BodyParams, i: usize, d: f64| {
        let mut q = p.clone();
        match i {
            0 => q.neck.0 += d,
            1 => q.neck.1 += d,
            2 => q.pelvis.0 += d,
            _ => q.pelvis.1 += d,
        }
        q
    };
    coordinate_ascent(init.clone(), &mut [0.1 * l; 4], cfg.rounds, perturb, score)
}

fn px(k: Keypoint, w: usize, h: usize) -> (f64, f64) {
    (k[0] * w as f64, k[1] * h as f64)
}

/// Fit each ground-truth hand present in a hand crop.
pub fn estimate_hands(image: &Tensor4, style: Style, gt: &Hands, cfg: &FitConfig) -> Result<Estimate> {
    let (w, h) = (image.width(), image.height());
    let skin = Segmenter::for_style(style, cfg.color_tolerance).skin(image);
    let mut out = Hands::default();
    let sides: Vec<usize> = [LEFT, RIGHT].into_iter().filter(|&s| gt.0[s].iter().any(|k| k[2] > 0.0)).collect();
    let inits = sides.iter().map(|&s| fit_pose(&gt.0[s].map(|k| px(k, w, h)), s)).collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::new();
    for (p, iou) in fit_hands(&skin, &inits, &[], cfg) {
        scores.push(iou);
        if iou >= cfg.min_iou {
            out.0[p.side] = p.keypoints(w, h);
        }
    }
    Ok(finish(out.flat(), &scores, cfg))
}

/// Fit hands, then neck and pelvis, of a stick-figure frame.
pub fn estimate_body(image: &Tensor4, style: Style, gt: &Skeleton, cfg: &FitConfig) -> Result<Estimate> {
    let (w, h) = (image.width(), image.height());
    let seg = Segmenter::for_style(style, cfg.color_tolerance);
    let skin = seg.skin(image);
    let mut body = BodyParams::from_skeleton(gt, w, h)?;
    let gt_hands = gt.hands();
    let mut scores = Vec::new();
    let mut found = [false; 2];
    let sides: Vec<usize> = [LEFT, RIGHT].into_iter().filter(|&s| gt_hands.0[s].iter().any(|k| k[2] > 0.0)).collect();
    let inits: Vec<HandParams> = sides.iter().map(|&s| body.hands[s].clone()).collect();
    let skin_c = style.skin();
    let head: Vec<Prim> = body.body_shapes(style).into_iter().filter(|s| s.color == skin_c).map(|s| s.prim).collect();
    for (p, iou) in fit_hands(&skin, &inits, &head, cfg) {
        scores.push(iou);
        if iou >= cfg.min_iou {
            let side = p.side;
            found[side] = true;
            body.hands[side] = p;
        }
    }
    let (body, torso_iou) = fit_torso(&seg.clothing(image), &body, style, cfg);
    scores.push(torso_iou);
    let mut sk = body.skeleton(w, h);
    if torso_iou < cfg.min_iou {
        sk.keypoints[0][2] = 0.0;
        sk.keypoints[1][2] = 0.0;
    }
    for side in [LEFT, RIGHT] {
        if !found[side] {
            let o = Layout::Stick44.hand_offset(side);
            sk.keypoints[o..o + 21].iter_mut().for_each(|k| *k = [0.0; 3]);
        }
    }
    Ok(finish(sk.keypoints, &scores, cfg))
}

fn finish(keypoints: Vec<Keypoint>, scores: &[f64], cfg: &FitConfig) -> Estimate {
    let hits: Vec<f64> = scores.iter().copied().filter(|&s| s >= cfg.min_iou).collect();
    let score = if hits.is_empty() { 0.0 } else { hits.iter().sum::<f64>() / hits.len() as f64 };
    Estimate { keypoints, score }
}

/// Dispatch on the ground truth's layout.
pub fn estimate(image: &Tensor4, style: Style, gt: &Skeleton, cfg: &FitConfig) -> Result<Estimate> {
    match gt.layout {
        Layout::Hands42 => estimate_hands(image, style, &gt.hands(), cfg),
        Layout::Stick44 => estimate_body(image, style, gt, cfg),
        Layout::Full133 => Err(Error::Data("no parametric model for the full-133 layout".into())),
    }
}
