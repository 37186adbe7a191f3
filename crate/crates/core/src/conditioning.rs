//! Conditioning inputs: finger heatmaps, mask resizing, skeleton rasters and
//! canvas assembly, plus the on-disk keypoint and image formats.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::{Mask, StructuringElement};
use crate::tensor::{Real, Tensor4};

/// `(x, y, visibility)` with coordinates normalized to [0, 1].
pub type Keypoint = [f64; 3];

/// 21 keypoints per hand: wrist, then thumb, index, middle, ring and pinky
/// with four points each from base to tip.
pub type HandKeypoints = [Keypoint; 21];

pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;
pub const WRIST: usize = 0;
pub const MIDDLE_BASE: usize = 9;
pub const FINGER_CHANNELS: usize = 10;

/// Keypoint indices of finger `f` (0 = thumb … 4 = pinky).
pub fn finger_keypoints(f: usize) -> std::ops::RangeInclusive<usize> {
    1 + 4 * f..=4 + 4 * f
}

/// Heatmap channel of finger `f` on hand `side`: left thumb … left pinky,
/// then right thumb … right pinky.
pub fn finger_channel(side: usize, f: usize) -> usize {
    5 * side + f
}

/// Left and right hand keypoints; an absent hand has all visibilities zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hands(pub [HandKeypoints; 2]);

impl Default for Hands {
    fn default() -> Self {
        Hands([[[0.0; 3]; 21]; 2])
    }
}

impl Hands {
    pub fn is_visible(&self, side: usize) -> bool {
        self.0[side][WRIST][2] > 0.0
    }

    pub fn flat(&self) -> Vec<Keypoint> {
        self.0.iter().flatten().copied().collect()
    }

    pub fn from_flat(kps: &[Keypoint]) -> Result<Self> {
        if kps.len() != 42 {
            return Err(Error::Data(format!("expected 42 hand keypoints, got {}", kps.len())));
        }
        let mut h = Hands::default();
        for (i, k) in kps.iter().enumerate() {
            h.0[i / 21][i % 21] = *k;
        }
        Ok(h)
    }

    /// Apply `f` to the pixel positions of every keypoint, keeping visibility.
    pub fn map_points(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> Hands {
        let mut out = *self;
        for k in out.0.iter_mut().flatten() {
            let (x, y) = f(k[0], k[1]);
            k[0] = x;
            k[1] = y;
        }
        out
    }

    /// Swap the two hands, mirroring the channel layout.
    pub fn swapped(&self) -> Hands {
        Hands([self.0[1], self.0[0]])
    }
}

/// Ten finger heatmap channels and the hand-mask channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseCondition {
    /// (1, 10, H, W) with values in [0, 1].
    pub heatmaps: Tensor4,
    /// (1, 1, H, W), binary.
    pub mask: Tensor4,
    /// Set when some visible keypoint had to be clamped into the frame.
    pub clamped: bool,
}

impl PoseCondition {
    pub fn new(heatmaps: Tensor4, mask: Tensor4) -> Result<Self> {
        let [_, _, h, w] = heatmaps.shape();
        heatmaps.ensure_shape([1, FINGER_CHANNELS, h, w])?;
        mask.ensure_shape([1, 1, h, w])?;
        Ok(Self {
            heatmaps,
            mask,
            clamped: false,
        })
    }

    pub fn with_mask(mut self, mask: &Mask) -> Result<Self> {
        let m: Tensor4 = mask.to_tensor();
        m.ensure_shape(self.mask.shape())?;
        self.mask = m;
        Ok(self)
    }

    /// Concatenated (1, 11, H, W) condition tensor.
    pub fn to_tensor(&self) -> Tensor4 {
        self.heatmaps.concat_channels(&self.mask).expect("matching condition planes")
    }

    /// Both parts resized to latent resolution.
    pub fn downsized(&self, f: usize) -> Result<Self> {
        Ok(Self {
            heatmaps: downsize_to_latent(&self.heatmaps, f)?,
            mask: downsize_to_latent(&self.mask, f)?,
            clamped: self.clamped,
        })
    }
}

/// Default heatmap width: 2 px at 64 px, linear in the crop size.
pub fn heatmap_sigma(size: usize) -> f64 {
    2.0 * size as f64 / 64.0
}

/// Per-finger Gaussian heatmaps with peak 1 and standard deviation `sigma`
/// pixels, max-composited within each channel. Wrists feed no channel.
pub fn render_heatmaps(hands: &Hands, width: usize, height: usize, sigma: f64) -> PoseCondition {
    let mut heat = Tensor4::zeros([1, FINGER_CHANNELS, height, width]);
    let mut clamped = false;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let reach = (sigma * 4.0).ceil() as isize;
    for side in [LEFT, RIGHT] {
        if !hands.is_visible(side) {
            continue;
        }
        for f in 0..5 {
            let ch = finger_channel(side, f);
            for k in finger_keypoints(f) {
                let [x, y, v] = hands.0[side][k];
                if v <= 0.0 {
                    continue;
                }
                let (cx, cy) = (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0));
                clamped |= cx != x || cy != y;
                let (px, py) = (cx * width as f64, cy * height as f64);
                let (ix, iy) = (px.floor() as isize, py.floor() as isize);
                for yy in (iy - reach).max(0)..=(iy + reach).min(height as isize - 1) {
                    for xx in (ix - reach).max(0)..=(ix + reach).min(width as isize - 1) {
                        let dx = xx as f64 + 0.5 - px;
                        let dy = yy as f64 + 0.5 - py;
                        let g = (-(dx * dx + dy * dy) * inv).exp() as f32;
                        let (yy, xx) = (yy as usize, xx as usize);
                        if g > heat.at(0, ch, yy, xx) {
                            heat.set(0, ch, yy, xx, g);
                        }
                    }
                }
            }
        }
    }
    PoseCondition {
        heatmaps: heat,
        mask: Tensor4::zeros([1, 1, height, width]),
        clamped,
    }
}

/// Bilinear downsampling by an integer factor. Output pixel `j` samples input
/// coordinate `(j + ½)·f − ½`, so constant and affine images are reproduced
/// exactly and repeated downsizing composes.
pub fn downsize_to_latent<T: Real>(x: &Tensor4<T>, f: usize) -> Result<Tensor4<T>> {
    let [b, c, h, w] = x.shape();
    if f == 0 || h % f != 0 || w % f != 0 {
        return Err(Error::Config(format!("size {h}x{w} is not divisible by factor {f}")));
    }
    if f == 1 {
        return Ok(x.clone());
    }
    let tap = |j: usize, n: usize| -> (usize, usize, T) {
        let s = (j as f64 + 0.5) * f as f64 - 0.5;
        let i0 = (s.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, T::from_f64_lossy(s - i0 as f64))
    };
    Ok(Tensor4::from_fn([b, c, h / f, w / f], |[bi, ci, y, xx]| {
        let (y0, y1, fy) = tap(y, h);
        let (x0, x1, fx) = tap(xx, w);
        let one = T::one();
        let top = x.at(bi, ci, y0, x0) * (one - fx) + x.at(bi, ci, y0, x1) * fx;
        let bot = x.at(bi, ci, y1, x0) * (one - fx) + x.at(bi, ci, y1, x1) * fx;
        top * (one - fy) + bot * fy
    }))
}

/// One dilation with a 5×5 square.
pub fn postprocess_mask(mask: &Mask) -> Mask {
    mask.dilate(&StructuringElement::square(5))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    /// Both hands only.
    #[serde(rename = "hands-42")]
    Hands42,
    /// Neck, pelvis, left hand, right hand.
    #[serde(rename = "stick-44")]
    Stick44,
    /// Whole-body layout: 17 body, 6 feet, 68 face, left hand, right hand.
    #[serde(rename = "full-133")]
    Full133,
}

impl Layout {
    pub fn id(self) -> &'static str {
        match self {
            Layout::Hands42 => "hands-42",
            Layout::Stick44 => "stick-44",
            Layout::Full133 => "full-133",
        }
    }

    pub fn parse(id: &str) -> Result<Self> {
        match id {
            "hands-42" => Ok(Layout::Hands42),
            "stick-44" => Ok(Layout::Stick44),
            "full-133" => Ok(Layout::Full133),
            other => Err(Error::Data(format!("unknown skeleton layout {other:?}"))),
        }
    }

    pub fn len(self) -> usize {
        match self {
            Layout::Hands42 => 42,
            Layout::Stick44 => 44,
            Layout::Full133 => 133,
        }
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// Index of the first keypoint of the given hand.
    pub fn hand_offset(self, side: usize) -> usize {
        let left = match self {
            Layout::Hands42 => 0,
            Layout::Stick44 => 2,
            Layout::Full133 => 91,
        };
        left + 21 * side
    }

    pub fn hand_indices(self) -> std::ops::Range<usize> {
        self.hand_offset(LEFT)..self.hand_offset(RIGHT) + 21
    }

    /// Limbs as `(a, b, color)` in drawing order.
    pub fn limbs(self) -> Vec<(usize, usize, [f32; 3])> {
        let mut limbs = Vec::new();
        match self {
            Layout::Hands42 => {}
            Layout::Stick44 => {
                limbs.push((0, 1, TORSO_COLOR));
                limbs.push((0, self.hand_offset(LEFT), LEFT_ARM_COLOR));
                limbs.push((0, self.hand_offset(RIGHT), RIGHT_ARM_COLOR));
            }
            Layout::Full133 => {
                for &(a, b, c) in COCO_BODY_LIMBS {
                    limbs.push((a, b, c));
                }
                limbs.push((9, self.hand_offset(LEFT), LEFT_ARM_COLOR));
                limbs.push((10, self.hand_offset(RIGHT), RIGHT_ARM_COLOR));
                for (ankle, toes) in [(15, [17, 18, 19]), (16, [20, 21, 22])] {
                    for t in toes {
                        limbs.push((ankle, t, FOOT_COLOR));
                    }
                }
            }
        }
        for side in [LEFT, RIGHT] {
            let o = self.hand_offset(side);
            for f in 0..5 {
                let mut prev = o + WRIST;
                for k in finger_keypoints(f) {
                    limbs.push((prev, o + k, FINGER_COLORS[f]));
                    prev = o + k;
                }
            }
        }
        limbs
    }
}

pub const TORSO_COLOR: [f32; 3] = [1.0, 1.0, 0.0];
pub const LEFT_ARM_COLOR: [f32; 3] = [0.0, 1.0, 0.0];
pub const RIGHT_ARM_COLOR: [f32; 3] = [0.0, 0.5, 1.0];
pub const FOOT_COLOR: [f32; 3] = [0.6, 0.3, 0.0];
pub const FINGER_COLORS: [[f32; 3]; 5] = [
    [1.0, 0.0, 0.0],
    [1.0, 0.5, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [0.5, 0.0, 1.0],
];
pub const JOINT_COLOR: [f32; 3] = [1.0, 1.0, 1.0];

const COCO_BODY_LIMBS: &[(usize, usize, [f32; 3])] = &[
    (5, 6, TORSO_COLOR),
    (11, 12, TORSO_COLOR),
    (5, 11, TORSO_COLOR),
    (6, 12, TORSO_COLOR),
    (5, 7, LEFT_ARM_COLOR),
    (7, 9, LEFT_ARM_COLOR),
    (6, 8, RIGHT_ARM_COLOR),
    (8, 10, RIGHT_ARM_COLOR),
    (11, 13, [0.0, 0.8, 0.4]),
    (13, 15, [0.0, 0.8, 0.4]),
    (12, 14, [0.2, 0.4, 1.0]),
    (14, 16, [0.2, 0.4, 1.0]),
    (0, 1, [0.8, 0.8, 0.8]),
    (0, 2, [0.8, 0.8, 0.8]),
    (1, 3, [0.8, 0.8, 0.8]),
    (2, 4, [0.8, 0.8, 0.8]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    pub layout: Layout,
    pub keypoints: Vec<Keypoint>,
}

impl Skeleton {
    pub fn new(layout: Layout, keypoints: Vec<Keypoint>) -> Result<Self> {
        if keypoints.len() != layout.len() {
            return Err(Error::Data(format!(
                "layout {} needs {} keypoints, got {}",
                layout.id(),
                layout.len(),
                keypoints.len()
            )));
        }
        Ok(Self { layout, keypoints })
    }

    pub fn hands(&self) -> Hands {
        let o = self.layout.hand_offset(LEFT);
        Hands::from_flat(&self.keypoints[o..o + 42]).expect("42 hand keypoints")
    }

    pub fn set_hands(&mut self, hands: &Hands) {
        let o = self.layout.hand_offset(LEFT);
        self.keypoints[o..o + 42].copy_from_slice(&hands.flat());
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&KeypointFile {
            layout: self.layout.id().to_string(),
            keypoints: self.keypoints.clone(),
        })?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: KeypointFile = serde_json::from_str(s)?;
        Skeleton::new(Layout::parse(&f.layout)?, f.keypoints)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Skeleton::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KeypointFile {
    layout: String,
    keypoints: Vec<Keypoint>,
}

/// Anti-aliased segment coverage of pixel centers, alpha-composited.
fn draw_segment(img: &mut Tensor4, a: (f64, f64), b: (f64, f64), radius: f64, color: [f32; 3]) {
    let [_, _, h, w] = img.shape();
    let x0 = (a.0.min(b.0) - radius - 1.0).floor().max(0.0) as usize;
    let x1 = ((a.0.max(b.0) + radius + 1.0).ceil().max(0.0) as usize).min(w);
    let y0 = (a.1.min(b.1) - radius - 1.0).floor().max(0.0) as usize;
    let y1 = ((a.1.max(b.1) + radius + 1.0).ceil().max(0.0) as usize).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            let d = segment_distance((x as f64 + 0.5, y as f64 + 0.5), a, b);
            let cov = (radius + 0.5 - d).clamp(0.0, 1.0) as f32;
            if cov > 0.0 {
                for (c, &col) in color.iter().enumerate() {
                    let v = img.at(0, c, y, x);
                    img.set(0, c, y, x, v * (1.0 - cov) + col * cov);
                }
            }
        }
    }
}

/// Euclidean distance from `p` to the segment `ab`.
pub fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Black (1, 3, H, W) image with every limb whose endpoints are visible
/// drawn in its layout color, then small joint dots.
pub fn render_skeleton(sk: &Skeleton, width: usize, height: usize) -> Result<Tensor4> {
    if sk.keypoints.len() != sk.layout.len() {
        return Err(Error::Data(format!("layout {} keypoint count mismatch", sk.layout.id())));
    }
    let mut img = Tensor4::zeros([1, 3, height, width]);
    let radius = (0.01 * width.min(height) as f64).max(0.6);
    let px = |k: &Keypoint| (k[0] * width as f64, k[1] * height as f64);
    for (a, b, color) in sk.layout.limbs() {
        let (ka, kb) = (&sk.keypoints[a], &sk.keypoints[b]);
        if ka[2] > 0.0 && kb[2] > 0.0 {
            draw_segment(&mut img, px(ka), px(kb), radius, color);
        }
    }
    for k in &sk.keypoints {
        if k[2] > 0.0 {
            draw_segment(&mut img, px(k), px(k), radius * 0.5, JOINT_COLOR);
        }
    }
    Ok(img)
}

/// Stage-I output handed to canvas assembly.
#[derive(Clone, Debug)]
pub struct HandCrop {
    /// (1, 3, h, w) in [0, 1].
    pub image: Tensor4,
    pub mask: Mask,
    /// Keypoints normalized to the crop.
    pub hands: Hands,
}

/// Similarity map from crop pixel coordinates `q` to canvas coordinates
/// `p = scale·q + (tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Placement {
    pub fn apply(&self, q: (f64, f64)) -> (f64, f64) {
        (self.scale * q.0 + self.tx, self.scale * q.1 + self.ty)
    }
    pub fn invert(&self, p: (f64, f64)) -> (f64, f64) {
        ((p.0 - self.tx) / self.scale, (p.1 - self.ty) / self.scale)
    }
}

pub const CANVAS_FILL: f32 = 0.5;

#[derive(Clone, Debug)]
pub struct Canvas {
    /// (1, 3, H, W).
    pub image: Tensor4,
    pub mask: Mask,
    pub placements: Vec<Placement>,
}

impl Canvas {
    /// Canvas mask pulled back into the pixel grid of crop `i`.
    pub fn unplace_mask(&self, i: usize, crop_width: usize, crop_height: usize) -> Mask {
        let pl = self.placements[i];
        Mask::from_fn(crop_width, crop_height, |x, y| {
            let (px, py) = pl.apply((x as f64 + 0.5, y as f64 + 0.5));
            self.mask.get_signed(px.floor() as isize, py.floor() as isize)
        })
    }
}

/// Placement that maps each visible hand's wrist onto the skeleton wrist and
/// its wrist-to-middle-base distance onto the skeleton's.
pub fn hand_placement(crop: &HandCrop, sk: &Skeleton, width: usize, height: usize) -> Result<Placement> {
    let (cw, ch) = (crop.image.width() as f64, crop.image.height() as f64);
    let target = sk.hands();
    let mut pairs = Vec::new();
    for side in [LEFT, RIGHT] {
        if !crop.hands.is_visible(side) {
            continue;
        }
        let tw = target.0[side][WRIST];
        let tm = target.0[side][MIDDLE_BASE];
        if tw[2] <= 0.0 {
            return Err(Error::MissingWrist(if side == LEFT { "left" } else { "right" }));
        }
        let to_px = |k: Keypoint, w: f64, h: f64| (k[0] * w, k[1] * h);
        let (qw, qm) = (to_px(crop.hands.0[side][WRIST], cw, ch), to_px(crop.hands.0[side][MIDDLE_BASE], cw, ch));
        let (pw, pm) = (to_px(tw, width as f64, height as f64), to_px(tm, width as f64, height as f64));
        let dq = ((qm.0 - qw.0).powi(2) + (qm.1 - qw.1).powi(2)).sqrt();
        let dp = ((pm.0 - pw.0).powi(2) + (pm.1 - pw.1).powi(2)).sqrt();
        let scale = if dq > 1e-9 && tm[2] > 0.0 && dp > 1e-9 { dp / dq } else { f64::NAN };
        pairs.push((qw, pw, scale));
    }
    if pairs.is_empty() {
        return Err(Error::Data("hand crop has no visible hand".into()));
    }
    let scales: Vec<f64> = pairs.iter().map(|p| p.2).filter(|s| s.is_finite()).collect();
    let scale = if scales.is_empty() { 1.0 } else { scales.iter().sum::<f64>() / scales.len() as f64 };
    let n = pairs.len() as f64;
    let tx = pairs.iter().map(|(q, p, _)| p.0 - scale * q.0).sum::<f64>() / n;
    let ty = pairs.iter().map(|(q, p, _)| p.1 - scale * q.1).sum::<f64>() / n;
    Ok(Placement { scale, tx, ty })
}

/// Paste masked hand pixels at explicit placements onto a neutral canvas.
pub fn compose_canvas(crops: &[HandCrop], placements: &[Placement], width: usize, height: usize) -> Result<Canvas> {
    let mut image = Tensor4::full([1, 3, height, width], CANVAS_FILL);
    let mut mask = Mask::empty(width, height);
    for (crop, pl) in crops.iter().zip(placements) {
        let (cw, ch) = (crop.image.width(), crop.image.height());
        if crop.mask.width() != cw || crop.mask.height() != ch {
            return Err(Error::shape(&[ch, cw], &[crop.mask.height(), crop.mask.width()]));
        }
        for y in 0..height {
            for x in 0..width {
                let (qx, qy) = pl.invert((x as f64 + 0.5, y as f64 + 0.5));
                let (qx, qy) = (qx.floor(), qy.floor());
                if qx < 0.0 || qy < 0.0 || qx >= cw as f64 || qy >= ch as f64 {
                    continue;
                }
                let (qx, qy) = (qx as usize, qy as usize);
                if crop.mask.get(qx, qy) {
                    mask.set(x, y, true);
                    for c in 0..3 {
                        image.set(0, c, y, x, crop.image.at(0, c, qy, qx));
                    }
                }
            }
        }
    }
    Ok(Canvas {
        image,
        mask,
        placements: placements.to_vec(),
    })
}

/// Align every crop to the skeleton's wrists and composite them.
pub fn assemble_canvas(crops: &[HandCrop], sk: &Skeleton, width: usize, height: usize) -> Result<Canvas> {
    let placements = crops
        .iter()
        .map(|c| hand_placement(c, sk, width, height))
        .collect::<Result<Vec<_>>>()?;
    compose_canvas(crops, &placements, width, height)
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write item 0 of a (B, 3, H, W) tensor as 8-bit RGB.
pub fn save_rgb(path: &Path, img: &Tensor4) -> Result<()> {
    let [_, c, h, w] = img.shape();
    if c != 3 {
        return Err(Error::shape(&[1, 3, h, w], &img.shape()));
    }
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([to_u8(img.at(0, 0, y, x)), to_u8(img.at(0, 1, y, x)), to_u8(img.at(0, 2, y, x))])
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_rgb(path: &Path) -> Result<Tensor4> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor4::from_fn([1, 3, h, w], |[_, c, y, x]| img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0))
}

/// Single-channel PNG with 0/255 values.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let buf = image::GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    buf.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = image::open(path)?.to_luma8();
    Ok(Mask::from_fn(img.width() as usize, img.height() as usize, |x, y| {
        img.get_pixel(x as u32, y as u32)[0] >= 128
    }))
}
