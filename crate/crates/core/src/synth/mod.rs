//! Procedural hands and stick-figure bodies with exact ground truth.

mod body;
mod dataset;
mod hand;

pub use body::{
    body_geometry, crop_hands, crop_window, hand_groups, hands_in_crop, render_body, sample_body, sample_body_params, BodyParams,
    BodySample, CropTransform, HAND_TO_TORSO,
};
pub(crate) use body::transform_prim;
pub use dataset::{
    generate_bodies, generate_hands, load_bodies, load_hands, write_bodies, write_hands, DataConfig, DatasetKind, Manifest,
    ManifestEntry, Record, Split, MANIFEST,
};
pub use hand::{canonical_template, fit_pose, frame_square, render_hands, sample_hand, HandParams, HandSample, SCENE_SIZE};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor4;

pub const NUM_SKIN_TONES: usize = 4;
pub const NUM_BACKGROUNDS: usize = 4;
pub const NUM_STYLES: usize = NUM_SKIN_TONES * NUM_BACKGROUNDS;

pub const SKIN_TONES: [[f32; 3]; NUM_SKIN_TONES] = [
    [0.96, 0.80, 0.69],
    [0.87, 0.67, 0.50],
    [0.68, 0.49, 0.34],
    [0.45, 0.31, 0.22],
];

/// Flat background colors; the last class is cluttered.
pub const BACKGROUNDS: [[f32; 3]; NUM_BACKGROUNDS] = [
    [0.30, 0.45, 0.75],
    [0.35, 0.60, 0.35],
    [0.75, 0.78, 0.82],
    [0.50, 0.50, 0.56],
];

pub const CLUTTER_PALETTE: [[f32; 3]; 6] = [
    [0.10, 0.60, 0.60],
    [0.60, 0.85, 0.20],
    [0.95, 0.30, 0.65],
    [1.00, 1.00, 1.00],
    [0.05, 0.30, 0.10],
    [0.40, 0.70, 0.95],
];

pub const CLOTHING: [[f32; 3]; 4] = [
    [0.80, 0.20, 0.20],
    [0.95, 0.85, 0.20],
    [0.55, 0.20, 0.60],
    [0.10, 0.10, 0.10],
];

/// Darkening applied to fingers so they stand out against the palm.
pub const FINGER_SHADE: f32 = 0.93;
/// Darkening applied to legs relative to the upper garment.
pub const LEG_SHADE: f32 = 0.6;

/// Skin tone × background label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Style(pub usize);

impl Style {
    pub fn new(id: usize) -> Result<Self> {
        if id >= NUM_STYLES {
            return Err(Error::Data(format!("style {id} outside catalog 0..{NUM_STYLES}")));
        }
        Ok(Style(id))
    }
    pub fn skin_index(self) -> usize {
        self.0 / NUM_BACKGROUNDS
    }
    pub fn background_index(self) -> usize {
        self.0 % NUM_BACKGROUNDS
    }
    pub fn skin(self) -> [f32; 3] {
        SKIN_TONES[self.skin_index()]
    }
    pub fn finger(self) -> [f32; 3] {
        self.skin().map(|v| v * FINGER_SHADE)
    }
    pub fn clothing(self) -> [f32; 3] {
        CLOTHING[(self.0 * 3 + 1) % CLOTHING.len()]
    }
    pub fn legs(self) -> [f32; 3] {
        self.clothing().map(|v| v * LEG_SHADE)
    }
    pub fn cluttered(self) -> bool {
        self.background_index() == NUM_BACKGROUNDS - 1
    }
    pub fn all() -> impl Iterator<Item = Style> {
        (0..NUM_STYLES).map(Style)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gesture {
    Open,
    Fist,
    Point,
    Peace,
    ThumbsUp,
}

impl Gesture {
    pub const ALL: [Gesture; 5] = [Gesture::Open, Gesture::Fist, Gesture::Point, Gesture::Peace, Gesture::ThumbsUp];

    pub fn index(self) -> usize {
        Gesture::ALL.iter().position(|&g| g == self).expect("listed")
    }

    /// Which fingers (thumb … pinky) are extended.
    pub fn extended(self) -> [bool; 5] {
        match self {
            Gesture::Open => [true; 5],
            Gesture::Fist => [false; 5],
            Gesture::Point => [false, true, false, false, false],
            Gesture::Peace => [false, true, true, false, false],
            Gesture::ThumbsUp => [true, false, false, false, false],
        }
    }
}

/// Exact class counts for `n` items by largest remainder, in random order.
pub fn stratified_labels(n: usize, weights: &[f64], rng: &mut Rng) -> Result<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || weights.iter().any(|&w| w < 0.0 || !w.is_finite()) || total <= 0.0 {
        return Err(Error::Config("class weights must be non-negative with a positive sum".into()));
    }
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let missing = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        counts[i] += 1;
    }
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect();
    labels.shuffle(rng);
    Ok(labels)
}

/// Filled shapes in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Prim {
    Capsule { a: (f64, f64), b: (f64, f64), r: f64 },
    Ellipse { c: (f64, f64), axis: (f64, f64), ra: f64, rb: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
}

impl Prim {
    pub fn contains(&self, p: (f64, f64)) -> bool {
        match *self {
            Prim::Capsule { a, b, r } => crate::conditioning::segment_distance(p, a, b) <= r,
            Prim::Ellipse { c, axis, ra, rb } => {
                let (dx, dy) = (p.0 - c.0, p.1 - c.1);
                let u = dx * axis.0 + dy * axis.1;
                let v = -dx * axis.1 + dy * axis.0;
                (u / ra).powi(2) + (v / rb).powi(2) <= 1.0
            }
            Prim::Rect { x0, y0, x1, y1 } => p.0 >= x0 && p.0 < x1 && p.1 >= y0 && p.1 < y1,
        }
    }

    /// Conservative pixel bounding box `(x0, y0, x1, y1)`, exclusive end.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let (lx, ly, hx, hy) = match *self {
            Prim::Capsule { a, b, r } => (a.0.min(b.0) - r, a.1.min(b.1) - r, a.0.max(b.0) + r, a.1.max(b.1) + r),
            Prim::Ellipse { c, ra, rb, .. } => {
                let r = ra.max(rb);
                (c.0 - r, c.1 - r, c.0 + r, c.1 + r)
            }
            Prim::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
        };
        let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
        (
            clip(lx.floor() - 1.0, width),
            clip(ly.floor() - 1.0, height),
            clip(hx.ceil() + 1.0, width),
            clip(hy.ceil() + 1.0, height),
        )
    }
}

/// A primitive with its fill color.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Shape {
    pub prim: Prim,
    pub color: [f32; 3],
}

/// Paint shapes in order into a (1, 3, H, W) image, testing pixel centers.
pub fn paint(img: &mut Tensor4, shapes: &[Shape]) {
    let [_, _, h, w] = img.shape();
    for s in shapes {
        let (x0, y0, x1, y1) = s.prim.pixel_bounds(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                if s.prim.contains((x as f64 + 0.5, y as f64 + 0.5)) {
                    for c in 0..3 {
                        img.set(0, c, y, x, s.color[c]);
                    }
                }
            }
        }
    }
}

/// Pixels whose centers fall inside any of the primitives.
pub fn rasterize(prims: impl IntoIterator<Item = Prim>, width: usize, height: usize) -> crate::morphology::Mask {
    let mut m = crate::morphology::Mask::empty(width, height);
    for p in prims {
        let (x0, y0, x1, y1) = p.pixel_bounds(width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                if !m.get(x, y) && p.contains((x as f64 + 0.5, y as f64 + 0.5)) {
                    m.set(x, y, true);
                }
            }
        }
    }
    m
}

/// Random rectangles and disks from a palette disjoint from skin and
/// clothing; empty unless the style is cluttered.
pub fn clutter_shapes(style: Style, width: usize, height: usize, rng: &mut Rng) -> Vec<Shape> {
    if !style.cluttered() {
        return Vec::new();
    }
    let (w, h) = (width as f64, height as f64);
    let n = rng.random_range(6..12);
    (0..n)
        .map(|_| {
            let color = CLUTTER_PALETTE[rng.random_range(0..CLUTTER_PALETTE.len())];
            let (cx, cy) = (rng.random_range(0.0..w), rng.random_range(0.0..h));
            let s = rng.random_range(0.05..0.2) * w.min(h);
            let prim = if rng.random_bool(0.5) {
                Prim::Rect {
                    x0: cx - s,
                    y0: cy - s * rng.random_range(0.3..1.5),
                    x1: cx + s,
                    y1: cy + s,
                }
            } else {
                Prim::Ellipse {
                    c: (cx, cy),
                    axis: (1.0, 0.0),
                    ra: s,
                    rb: s,
                }
            };
            Shape { prim, color }
        })
        .collect()
}

/// Background for `style`: a flat color, or the clutter base with clutter.
pub fn background(style: Style, width: usize, height: usize, rng: &mut Rng) -> Tensor4 {
    let base = BACKGROUNDS[style.background_index()];
    let mut img = Tensor4::from_fn([1, 3, height, width], |[_, c, _, _]| base[c]);
    paint(&mut img, &clutter_shapes(style, width, height, rng));
    img
}
