use std::f64::consts::PI;

use rand::Rng as _;

use super::hand::{frame_square, HandParams, HandSample};
use super::{clutter_shapes, paint, rasterize, Gesture, Prim, Shape, Style, BACKGROUNDS};
use crate::conditioning::{Hands, Layout, Skeleton, LEFT, RIGHT};
use crate::error::{Error, Result};
use crate::morphology::Mask;
use crate::rng::Rng;
use crate::tensor::Tensor4;

/// Hand size relative to torso length; exaggerated so hands stay legible at
/// desk resolutions.
pub const HAND_TO_TORSO: f64 = 0.42;
const CROP_MARGIN: f64 = 0.1;

/// Stick figure whose geometry is fully determined by neck, pelvis and the
/// two hands.
#[derive(Clone, Debug, PartialEq)]
pub struct BodyParams {
    pub neck: (f64, f64),
    pub pelvis: (f64, f64),
    pub hands: [HandParams; 2],
}

impl BodyParams {
    fn frame(&self) -> (f64, (f64, f64), (f64, f64)) {
        let (dx, dy) = (self.pelvis.0 - self.neck.0, self.pelvis.1 - self.neck.1);
        let len = dx.hypot(dy).max(1e-9);
        let d = (dx / len, dy / len);
        // toward the figure's right side, which is image left when facing us
        let n = (-d.1, d.0);
        let n = if n.0 > 0.0 { (-n.0, -n.1) } else { n };
        (len, d, n)
    }

    pub fn torso_length(&self) -> f64 {
        self.frame().0
    }

    pub fn shoulder(&self, side: usize) -> (f64, f64) {
        let (l, d, n) = self.frame();
        let s = if side == RIGHT { 1.0 } else { -1.0 };
        (self.neck.0 + d.0 * 0.12 * l + s * n.0 * 0.16 * l, self.neck.1 + d.1 * 0.12 * l + s * n.1 * 0.16 * l)
    }

    /// Clothing (torso, arms, legs) and head primitives, drawing order.
    pub fn body_shapes(&self, style: Style) -> Vec<Shape> {
        let (l, d, n) = self.frame();
        let at = |p: (f64, f64), a: f64, b: f64| (p.0 + d.0 * a * l + n.0 * b * l, p.1 + d.1 * a * l + n.1 * b * l);
        let mut out = Vec::new();
        for s in [-1.0, 1.0] {
            out.push(Shape {
                prim: Prim::Capsule {
                    a: at(self.pelvis, 0.0, 0.1 * s),
                    b: at(self.pelvis, 0.95, 0.25 * s),
                    r: 0.1 * l,
                },
                color: style.legs(),
            });
        }
        out.push(Shape {
            prim: Prim::Capsule {
                a: at(self.neck, 0.1, 0.0),
                b: self.pelvis,
                r: 0.2 * l,
            },
            color: style.clothing(),
        });
        for side in [LEFT, RIGHT] {
            out.push(Shape {
                prim: Prim::Capsule {
                    a: self.shoulder(side),
                    b: self.hands[side].wrist,
                    r: 0.08 * l,
                },
                color: style.clothing(),
            });
        }
        out.push(Shape {
            prim: Prim::Ellipse {
                c: at(self.neck, -0.42, 0.0),
                axis: (1.0, 0.0),
                ra: 0.28 * l,
                rb: 0.28 * l,
            },
            color: style.skin(),
        });
        out
    }

    pub fn shapes(&self, style: Style) -> Vec<Shape> {
        let mut s = self.body_shapes(style);
        for h in &self.hands {
            s.extend(h.shapes(style));
        }
        s
    }

    pub fn skeleton(&self, width: usize, height: usize) -> Skeleton {
        let (w, h) = (width as f64, height as f64);
        let norm = |p: (f64, f64)| {
            let vis = (0.0..w).contains(&p.0) && (0.0..h).contains(&p.1);
            [p.0 / w, p.1 / h, if vis { 1.0 } else { 0.0 }]
        };
        let mut kps = vec![norm(self.neck), norm(self.pelvis)];
        for side in [LEFT, RIGHT] {
            kps.extend(self.hands[side].keypoints(width, height));
        }
        Skeleton::new(Layout::Stick44, kps).expect("44 keypoints")
    }

    /// Inverse of [`BodyParams::skeleton`].
    pub fn from_skeleton(sk: &Skeleton, width: usize, height: usize) -> Result<Self> {
        if sk.layout != Layout::Stick44 {
            return Err(Error::Data(format!("body model needs stick-44, got {}", sk.layout.id())));
        }
        let (w, h) = (width as f64, height as f64);
        let px = |k: [f64; 3]| (k[0] * w, k[1] * h);
        let hands = sk.hands();
        let fit = |side: usize| super::hand::fit_pose(&hands.0[side].map(px), side);
        Ok(Self {
            neck: px(sk.keypoints[0]),
            pelvis: px(sk.keypoints[1]),
            hands: [fit(LEFT)?, fit(RIGHT)?],
        })
    }

    /// Scale every length by `k` and translate by `o`.
    pub fn transformed(&self, k: f64, o: (f64, f64)) -> Self {
        let t = |p: (f64, f64)| (k * p.0 + o.0, k * p.1 + o.1);
        Self {
            neck: t(self.neck),
            pelvis: t(self.pelvis),
            hands: [self.hands[0].transformed(k, o), self.hands[1].transformed(k, o)],
        }
    }
}

/// All shapes of a body frame, background first.
pub fn body_geometry(params: &BodyParams, style: Style, clutter: &[Shape]) -> Vec<Shape> {
    let big = 1e6;
    let mut s = vec![Shape {
        prim: Prim::Rect {
            x0: -big,
            y0: -big,
            x1: big,
            y1: big,
        },
        color: BACKGROUNDS[style.background_index()],
    }];
    s.extend_from_slice(clutter);
    s.extend(params.shapes(style));
    s
}

#[derive(Clone, Debug)]
pub struct BodySample {
    /// (1, 3, H, W) in [0, 1].
    pub image: Tensor4,
    pub skeleton: Skeleton,
    pub hand_masks: [Mask; 2],
    pub person_mask: Mask,
    pub style: Style,
    pub gesture: Gesture,
    pub params: BodyParams,
    /// Clutter shapes in frame pixels, empty for flat backgrounds.
    pub clutter: Vec<Shape>,
}

impl BodySample {
    pub fn width(&self) -> usize {
        self.image.width()
    }
    pub fn height(&self) -> usize {
        self.image.height()
    }
    pub fn hands_mask(&self) -> Mask {
        self.hand_masks[0].union(&self.hand_masks[1]).expect("same frame")
    }
}

/// Random body pose with both hands inside the frame.
pub fn sample_body_params(rng: &mut Rng, width: usize, height: usize, gesture: Gesture) -> BodyParams {
    let (w, h) = (width as f64, height as f64);
    let l = rng.random_range(0.26..0.32) * h;
    let neck = (w * rng.random_range(0.42..0.58), h * rng.random_range(0.2..0.28));
    let tilt: f64 = rng.random_range(-0.12..0.12);
    let pelvis = (neck.0 + l * tilt.sin(), neck.1 + l * tilt.cos());
    let mut body = BodyParams {
        neck,
        pelvis,
        hands: [
            HandParams::zero(LEFT, neck, 0.0, HAND_TO_TORSO * l),
            HandParams::zero(RIGHT, neck, 0.0, HAND_TO_TORSO * l),
        ],
    };
    // hands brought together in front of the torso, so crops hold both
    let together = rng.random_bool(0.3);
    let (l_, d, n) = body.frame();
    let meet = l_ * rng.random_range(0.35..0.8);
    for side in [LEFT, RIGHT] {
        let mut best = None;
        for _ in 0..50 {
            let sh = body.shoulder(side);
            let wrist = if together {
                let s = if side == RIGHT { 1.0 } else { -1.0 };
                let off = s * l_ * rng.random_range(0.05..0.3);
                (neck.0 + d.0 * meet + n.0 * off, neck.1 + d.1 * meet + n.1 * off)
            } else {
                let alpha = rng.random_range(-1.2..1.3);
                let phi: f64 = if side == LEFT { alpha } else { PI - alpha };
                let reach = l * rng.random_range(0.55..0.85);
                (sh.0 + reach * phi.cos(), sh.1 + reach * phi.sin())
            };
            let phi = (wrist.1 - sh.1).atan2(wrist.0 - sh.0);
            let mut hand = HandParams::sample(side, gesture, phi + rng.random_range(-0.5..0.5), HAND_TO_TORSO * l, rng);
            hand.wrist = wrist;
            let (x0, y0, x1, y1) = hand.extent();
            let fits = x0 >= 1.0 && y0 >= 1.0 && x1 <= w - 1.0 && y1 <= h - 1.0;
            best = Some(hand);
            if fits {
                break;
            }
        }
        body.hands[side] = best.expect("at least one attempt");
    }
    body
}

/// Stick figure with parametric hands over the style background.
pub fn sample_body(rng: &mut Rng, width: usize, height: usize, style: Style, gesture: Gesture) -> BodySample {
    let params = sample_body_params(rng, width, height, gesture);
    let clutter = clutter_shapes(style, width, height, rng);
    render_body(params, clutter, width, height, style, gesture)
}

pub fn render_body(params: BodyParams, clutter: Vec<Shape>, width: usize, height: usize, style: Style, gesture: Gesture) -> BodySample {
    let mut image = Tensor4::zeros([1, 3, height, width]);
    paint(&mut image, &body_geometry(&params, style, &clutter));
    let hand_masks = [params.hands[0].mask(width, height), params.hands[1].mask(width, height)];
    let person = rasterize(params.shapes(style).into_iter().map(|s| s.prim), width, height);
    BodySample {
        image,
        skeleton: params.skeleton(width, height),
        hand_masks,
        person_mask: person,
        style,
        gesture,
        params,
        clutter,
    }
}

/// Square window of a frame resampled to `size`×`size`: frame pixel `p`
/// maps to crop pixel `(p − origin)·size/side`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropTransform {
    pub origin: (f64, f64),
    pub side: f64,
    pub size: usize,
}

impl CropTransform {
    pub fn scale(&self) -> f64 {
        self.size as f64 / self.side
    }
    pub fn forward(&self, p: (f64, f64)) -> (f64, f64) {
        let k = self.scale();
        ((p.0 - self.origin.0) * k, (p.1 - self.origin.1) * k)
    }
    pub fn inverse(&self, q: (f64, f64)) -> (f64, f64) {
        let k = self.scale();
        (q.0 / k + self.origin.0, q.1 / k + self.origin.1)
    }
    /// Offset `o` such that `forward(p) = k·p + o`.
    pub fn offset(&self) -> (f64, f64) {
        let k = self.scale();
        (-k * self.origin.0, -k * self.origin.1)
    }
}

fn boxes_intersect(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> bool {
    a.0 <= b.2 && b.0 <= a.2 && a.1 <= b.3 && b.1 <= a.3
}

fn union_box(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> (f64, f64, f64, f64) {
    (a.0.min(b.0), a.1.min(b.1), a.2.max(b.2), a.3.max(b.3))
}

/// Hand groups to crop: both hands together when their boxes intersect,
/// otherwise one group per hand.
pub fn hand_groups(hands: &[HandParams; 2]) -> Vec<Vec<usize>> {
    if boxes_intersect(hands[LEFT].extent(), hands[RIGHT].extent()) {
        vec![vec![LEFT, RIGHT]]
    } else {
        vec![vec![LEFT], vec![RIGHT]]
    }
}

/// Square crop window around a group of hands.
pub fn crop_window(hands: &[HandParams; 2], group: &[usize], size: usize) -> CropTransform {
    let bbox = group.iter().map(|&s| hands[s].extent()).reduce(union_box).expect("non-empty group");
    let (x0, y0, side) = frame_square(bbox, CROP_MARGIN);
    CropTransform {
        origin: (x0, y0),
        side,
        size,
    }
}

/// Hands of `params` that reach into the crop window, mapped into it.
pub fn hands_in_crop(hands: &[HandParams; 2], t: &CropTransform) -> Vec<HandParams> {
    let (k, o) = (t.scale(), t.offset());
    let n = t.size as f64;
    hands
        .iter()
        .map(|h| h.transformed(k, o))
        .filter(|h| boxes_intersect(h.extent(), (0.0, 0.0, n, n)))
        .collect()
}

/// Crop a square hand region per the dataset policy and re-render it at
/// `size`×`size` from the frame's geometry.
pub fn crop_hands(body: &BodySample, size: usize, rng: &mut Rng) -> Result<(HandSample, CropTransform)> {
    let (w, h) = (body.width() as f64, body.height() as f64);
    let in_frame = |p: &HandParams| {
        let e = p.extent();
        boxes_intersect(e, (0.0, 0.0, w, h))
    };
    let visible: Vec<usize> = [LEFT, RIGHT].into_iter().filter(|&s| in_frame(&body.params.hands[s])).collect();
    let group = match visible.len() {
        0 => return Err(Error::Data("no visible hands to crop".into())),
        1 => visible,
        _ => {
            let groups = hand_groups(&body.params.hands);
            if groups.len() == 1 {
                groups.into_iter().next().unwrap()
            } else {
                groups[rng.random_range(0..2)].clone()
            }
        }
    };
    let t = crop_window(&body.params.hands, &group, size);
    let (k, o) = (t.scale(), t.offset());
    let scene = body_geometry(&body.params, body.style, &body.clutter);
    let moved: Vec<Shape> = scene
        .iter()
        .map(|s| Shape {
            prim: transform_prim(&s.prim, k, o),
            color: s.color,
        })
        .collect();
    let mut image = Tensor4::zeros([1, 3, size, size]);
    paint(&mut image, &moved);
    let params = hands_in_crop(&body.params.hands, &t);
    let mut hands = Hands::default();
    for p in &params {
        hands.0[p.side] = p.keypoints(size, size);
    }
    let mask = rasterize(params.iter().flat_map(|p| p.primitives()), size, size);
    Ok((
        HandSample {
            image,
            hands,
            mask,
            style: body.style,
            gesture: body.gesture,
            params,
        },
        t,
    ))
}

pub(crate) fn transform_prim(p: &Prim, k: f64, o: (f64, f64)) -> Prim {
    let t = |q: (f64, f64)| (k * q.0 + o.0, k * q.1 + o.1);
    match *p {
        Prim::Capsule { a, b, r } => Prim::Capsule { a: t(a), b: t(b), r: k * r },
        Prim::Ellipse { c, axis, ra, rb } => Prim::Ellipse {
            c: t(c),
            axis,
            ra: k * ra,
            rb: k * rb,
        },
        Prim::Rect { x0, y0, x1, y1 } => {
            let (a, b) = (t((x0, y0)), t((x1, y1)));
            Prim::Rect {
                x0: a.0,
                y0: a.1,
                x1: b.0,
                y1: b.1,
            }
        }
    }
}
