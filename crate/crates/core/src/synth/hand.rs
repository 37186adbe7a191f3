//! Parametric 2.5D hand: palm ellipse plus one capsule chain per finger.
//!
//! Geometry is expressed in a hand frame whose unit is the wrist to middle
//! finger base distance. The long fingers flex out of the image plane, so a
//! segment at cumulative flex Φ projects to `len·cos Φ` along the finger
//! direction; the thumb flexes within the plane toward the palm.

use std::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{background, paint, rasterize, Gesture, Prim, Shape, Style};
use crate::conditioning::{HandKeypoints, Hands, MIDDLE_BASE, RIGHT, WRIST};
use crate::error::{Error, Result};
use crate::morphology::Mask;
use crate::rng::Rng;
use crate::tensor::Tensor4;

const BASE_U: [f64; 5] = [0.22, 0.95, 1.0, 0.95, 0.86];
const BASE_V: [f64; 5] = [0.30, 0.24, 0.0, -0.22, -0.42];
const BASE_DIR: [f64; 5] = [0.75, 0.10, 0.0, -0.10, -0.22];
const SEGMENTS: [[f64; 3]; 5] = [
    [0.32, 0.28, 0.24],
    [0.42, 0.26, 0.20],
    [0.46, 0.28, 0.22],
    [0.42, 0.26, 0.20],
    [0.34, 0.20, 0.17],
];
const RADIUS: [f64; 5] = [0.10, 0.085, 0.09, 0.085, 0.075];
const MIN_RADIUS_PX: f64 = 0.75;
const PALM_CENTER: (f64, f64) = (0.48, -0.05);
const PALM_AXES: (f64, f64) = (0.58, 0.40);

pub const MAX_SPREAD: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandParams {
    pub side: usize,
    /// Wrist position in pixels.
    pub wrist: (f64, f64),
    /// Direction of the hand axis (wrist to middle base) in radians.
    pub rotation: f64,
    /// Wrist to middle base distance in pixels.
    pub scale: f64,
    pub spread: [f64; 5],
    /// Per-joint flexion, thumb … pinky, base to tip.
    pub flex: [[f64; 3]; 5],
}

/// Keypoints of the zero pose in hand-frame units `(u, v)` for a right hand.
pub fn canonical_template() -> [(f64, f64); 21] {
    let mut out = [(0.0, 0.0); 21];
    for f in 0..5 {
        let (mut u, mut v) = (BASE_U[f], BASE_V[f]);
        out[1 + 4 * f] = (u, v);
        for j in 0..3 {
            u += SEGMENTS[f][j] * BASE_DIR[f].cos();
            v += SEGMENTS[f][j] * BASE_DIR[f].sin();
            out[2 + 4 * f + j] = (u, v);
        }
    }
    out
}

impl HandParams {
    pub fn zero(side: usize, wrist: (f64, f64), rotation: f64, scale: f64) -> Self {
        Self {
            side,
            wrist,
            rotation,
            scale,
            spread: [0.0; 5],
            flex: [[0.0; 3]; 5],
        }
    }

    /// Clamp flexion so every cumulative angle stays in [0, π], which keeps
    /// the projection invertible.
    pub fn canonicalize(&mut self) {
        for f in 0..5 {
            let mut acc = 0.0;
            for j in 0..3 {
                let v = self.flex[f][j].clamp(0.0, PI - acc);
                self.flex[f][j] = v;
                acc += v;
            }
            self.spread[f] = self.spread[f].clamp(-MAX_SPREAD, MAX_SPREAD);
        }
        // thumb spread is indistinguishable from its first flexion
        self.spread[0] = 0.0;
    }

    /// Hand-frame point to pixels.
    fn to_px(&self, u: f64, v: f64) -> (f64, f64) {
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        let m = if self.side == RIGHT { 1.0 } else { -1.0 };
        let v = v * m;
        (
            self.wrist.0 + self.scale * (u * c - v * s),
            self.wrist.1 + self.scale * (u * s + v * c),
        )
    }

    /// The 21 keypoints in pixel coordinates.
    pub fn keypoints_px(&self) -> [(f64, f64); 21] {
        let mut out = [(0.0, 0.0); 21];
        out[WRIST] = self.wrist;
        for f in 0..5 {
            let (mut u, mut v) = (BASE_U[f], BASE_V[f]);
            out[1 + 4 * f] = self.to_px(u, v);
            let theta = BASE_DIR[f] + self.spread[f];
            let mut acc = 0.0;
            for j in 0..3 {
                acc += self.flex[f][j];
                let len = SEGMENTS[f][j];
                if f == 0 {
                    let psi = theta - acc;
                    u += len * psi.cos();
                    v += len * psi.sin();
                } else {
                    u += len * acc.cos() * theta.cos();
                    v += len * acc.cos() * theta.sin();
                }
                out[2 + 4 * f + j] = self.to_px(u, v);
            }
        }
        out
    }

    /// Keypoints normalized by the image size; points outside the frame are
    /// marked invisible.
    pub fn keypoints(&self, width: usize, height: usize) -> HandKeypoints {
        let (w, h) = (width as f64, height as f64);
        self.keypoints_px().map(|(x, y)| {
            let vis = (0.0..w).contains(&x) && (0.0..h).contains(&y);
            [x / w, y / h, if vis { 1.0 } else { 0.0 }]
        })
    }

    fn finger_radius(&self, f: usize) -> f64 {
        (RADIUS[f] * self.scale).max(MIN_RADIUS_PX)
    }

    pub fn palm(&self) -> Prim {
        let c = self.to_px(PALM_CENTER.0, PALM_CENTER.1);
        Prim::Ellipse {
            c,
            axis: (self.rotation.cos(), self.rotation.sin()),
            ra: PALM_AXES.0 * self.scale,
            rb: PALM_AXES.1 * self.scale,
        }
    }

    pub fn finger_capsules(&self) -> Vec<Prim> {
        let kp = self.keypoints_px();
        let mut out = Vec::with_capacity(15);
        for f in 0..5 {
            for j in 0..3 {
                out.push(Prim::Capsule {
                    a: kp[1 + 4 * f + j],
                    b: kp[2 + 4 * f + j],
                    r: self.finger_radius(f),
                });
            }
        }
        out
    }

    pub fn primitives(&self) -> Vec<Prim> {
        let mut p = vec![self.palm()];
        p.extend(self.finger_capsules());
        p
    }

    pub fn shapes(&self, style: Style) -> Vec<Shape> {
        let mut s = vec![Shape {
            prim: self.palm(),
            color: style.skin(),
        }];
        s.extend(self.finger_capsules().into_iter().map(|prim| Shape {
            prim,
            color: style.finger(),
        }));
        s
    }

    pub fn mask(&self, width: usize, height: usize) -> Mask {
        rasterize(self.primitives(), width, height)
    }

    /// Axis-aligned extent `(x0, y0, x1, y1)` of the silhouette in pixels.
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in self.primitives() {
            let (lx, ly, hx, hy) = match p {
                Prim::Capsule { a, b, r } => (a.0.min(b.0) - r, a.1.min(b.1) - r, a.0.max(b.0) + r, a.1.max(b.1) + r),
                Prim::Ellipse { c, axis, ra, rb } => {
                    let ex = ((ra * axis.0).powi(2) + (rb * axis.1).powi(2)).sqrt();
                    let ey = ((ra * axis.1).powi(2) + (rb * axis.0).powi(2)).sqrt();
                    (c.0 - ex, c.1 - ey, c.0 + ex, c.1 + ey)
                }
                Prim::Rect { x0, y0, x1, y1 } => (x0, y0, x1, y1),
            };
            b = (b.0.min(lx), b.1.min(ly), b.2.max(hx), b.3.max(hy));
        }
        b
    }

    /// Map pixel positions by `p ↦ k·p + o`.
    pub fn transformed(&self, k: f64, o: (f64, f64)) -> Self {
        Self {
            wrist: (k * self.wrist.0 + o.0, k * self.wrist.1 + o.1),
            scale: k * self.scale,
            ..self.clone()
        }
    }

    /// Random pose of the given gesture with the hand frame at the origin.
    pub fn sample(side: usize, gesture: Gesture, rotation: f64, scale: f64, rng: &mut Rng) -> Self {
        let mut p = HandParams::zero(side, (0.0, 0.0), rotation, scale);
        let ext = gesture.extended();
        for f in 0..5 {
            if f > 0 {
                p.spread[f] = rng.random_range(-0.15..0.15);
            }
            for j in 0..3 {
                p.flex[f][j] = if ext[f] {
                    rng.random_range(0.0..0.2)
                } else if f == 0 {
                    [0.5, 0.5, 0.4][j] + rng.random_range(-0.1..0.1)
                } else {
                    [1.25, 1.3, 0.5][j] + rng.random_range(-0.15..0.15)
                };
            }
        }
        p.canonicalize();
        p
    }
}

/// Square `(x0, y0, side)` around a box with a relative margin on each side.
pub fn frame_square(bbox: (f64, f64, f64, f64), margin: f64) -> (f64, f64, f64) {
    let (x0, y0, x1, y1) = bbox;
    let side = (x1 - x0).max(y1 - y0) * (1.0 + 2.0 * margin);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    (cx - side / 2.0, cy - side / 2.0, side)
}

#[derive(Clone, Debug)]
pub struct HandSample {
    /// (1, 3, H, W) in [0, 1].
    pub image: Tensor4,
    /// Normalized to the image.
    pub hands: Hands,
    pub mask: Mask,
    pub style: Style,
    pub gesture: Gesture,
    /// Generative parameters in pixels, one per rendered hand.
    pub params: Vec<HandParams>,
}

/// Virtual body frame that training crops are cut from.
pub const SCENE_SIZE: (usize, usize) = (64, 96);

/// Crop one hand, or both when they overlap, out of a random body scene
/// and render it at `size`×`size`.
pub fn sample_hand(rng: &mut Rng, size: usize, style: Style, gesture: Gesture) -> HandSample {
    let (w, h) = SCENE_SIZE;
    let body = super::body::sample_body(rng, w, h, style, gesture);
    super::body::crop_hands(&body, size, rng).expect("sampled bodies keep a hand in frame").0
}

/// Render posed hands over the style background.
pub fn render_hands(params: Vec<HandParams>, width: usize, height: usize, style: Style, gesture: Gesture, rng: &mut Rng) -> HandSample {
    let mut image = background(style, width, height, rng);
    let mut shapes = Vec::new();
    let mut hands = Hands::default();
    for p in &params {
        shapes.extend(p.shapes(style));
        hands.0[p.side] = p.keypoints(width, height);
    }
    paint(&mut image, &shapes);
    let mask = rasterize(params.iter().flat_map(|p| p.primitives()), width, height);
    HandSample {
        image,
        hands,
        mask,
        style,
        gesture,
        params,
    }
}

/// Recover pose parameters from pixel-space keypoints by inverting the
/// projection analytically.
pub fn fit_pose(kps: &[(f64, f64); 21], side: usize) -> Result<HandParams> {
    let w = kps[WRIST];
    let m = kps[MIDDLE_BASE];
    let scale = ((m.0 - w.0).powi(2) + (m.1 - w.1).powi(2)).sqrt();
    if !(scale > 1e-9) {
        return Err(Error::Data("degenerate hand: wrist and middle base coincide".into()));
    }
    let rotation = (m.1 - w.1).atan2(m.0 - w.0);
    let mut p = HandParams::zero(side, w, rotation, scale);
    // pixel to hand frame
    let (c, s) = (rotation.cos(), rotation.sin());
    let mirror = if side == RIGHT { 1.0 } else { -1.0 };
    let local = |q: (f64, f64)| {
        let (dx, dy) = ((q.0 - w.0) / scale, (q.1 - w.1) / scale);
        (dx * c + dy * s, mirror * (-dx * s + dy * c))
    };
    for f in 0..5 {
        let pts: Vec<(f64, f64)> = (0..4).map(|j| local(kps[1 + 4 * f + j])).collect();
        let seg = SEGMENTS[f];
        if f == 0 {
            // in-plane thumb: ψ_j = θ0 − Φ_j
            let mut prev = 0.0;
            for j in 0..3 {
                let (du, dv) = (pts[j + 1].0 - pts[j].0, pts[j + 1].1 - pts[j].1);
                let phi = wrap(BASE_DIR[0] - dv.atan2(du)).max(0.0);
                p.flex[0][j] = (phi - prev).max(0.0);
                prev += p.flex[0][j];
            }
            continue;
        }
        // long fingers: all points lie on one line through the base
        let far = (1..4)
            .map(|j| (pts[j].0 - pts[0].0, pts[j].1 - pts[0].1))
            .max_by(|a, b| (a.0.hypot(a.1)).partial_cmp(&b.0.hypot(b.1)).unwrap())
            .unwrap();
        let theta = if far.0.hypot(far.1) < 1e-9 {
            BASE_DIR[f]
        } else {
            let t = far.1.atan2(far.0);
            // pick the direction (t or t+π) closest to the resting direction
            if wrap(t - BASE_DIR[f]).abs() <= PI / 2.0 {
                BASE_DIR[f] + wrap(t - BASE_DIR[f])
            } else {
                BASE_DIR[f] + wrap(t + PI - BASE_DIR[f])
            }
        };
        p.spread[f] = theta - BASE_DIR[f];
        let d = (theta.cos(), theta.sin());
        let mut acc = 0.0;
        for j in 0..3 {
            let s0 = (pts[j].0 - pts[0].0) * d.0 + (pts[j].1 - pts[0].1) * d.1;
            let s1 = (pts[j + 1].0 - pts[0].0) * d.0 + (pts[j + 1].1 - pts[0].1) * d.1;
            let phi = ((s1 - s0) / seg[j]).clamp(-1.0, 1.0).acos();
            p.flex[f][j] = (phi - acc).max(0.0);
            acc += p.flex[f][j];
        }
    }
    Ok(p)
}

fn wrap(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a > PI {
        a -= 2.0 * PI;
    } else if a < -PI {
        a += 2.0 * PI;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::postprocess_mask;
    use crate::rng::{self, Domain};

    const TEMPLATE: [(f64, f64); 21] = [
        (0.0, 0.0),
        (0.22, 0.3),
        (0.45414043804, 0.518124403207),
        (0.659013321324, 0.708983256014),
        (0.834618649854, 0.87257655842),
        (0.95, 0.24),
        (1.367901749417, 0.281930034992),
        (1.626602832389, 0.30788672332),
        (1.825603665445, 0.327853406649),
        (1.0, 0.0),
        (1.46, 0.0),
        (1.74, 0.0),
        (1.96, 0.0),
        (0.95, -0.22),
        (1.367901749417, -0.261930034992),
        (1.626602832389, -0.28788672332),
        (1.825603665445, -0.307853406649),
        (0.86, -0.42),
        (1.191805132772, -0.494198071847),
        (1.386984622639, -0.537843996464),
        (1.552887189025, -0.574943032387),
    ];

    #[test]
    fn zero_pose_is_canonical_template() {
        let t = canonical_template();
        let p = HandParams::zero(RIGHT, (0.0, 0.0), 0.0, 1.0).keypoints_px();
        for ((a, b), c) in t.iter().zip(p).zip(TEMPLATE) {
            assert_eq!(*a, b);
            assert!((a.0 - c.0).abs() < 1e-9 && (a.1 - c.1).abs() < 1e-9);
        }
    }

    fn canonical_64() -> HandParams {
        let p = HandParams::zero(RIGHT, (0.0, 0.0), -PI / 2.0, 1.0);
        let (x0, y0, side) = frame_square(p.extent(), 0.1);
        let k = 64.0 / side;
        p.transformed(k, (-k * x0, -k * y0))
    }

    #[test]
    fn canonical_mask_area_golden() {
        assert_eq!(canonical_64().mask(64, 64).area(), 414);
    }

    #[test]
    fn fully_flexed_fingertips_inside_palm_box() {
        let mut p = HandParams::zero(RIGHT, (0.0, 0.0), 0.0, 1.0);
        p.flex[0] = [0.9, 0.9, 0.9];
        for f in 1..5 {
            p.flex[f] = [PI / 2.0, PI / 2.0, 0.0];
        }
        p.canonicalize();
        let kp = p.keypoints_px();
        let (u0, u1) = (PALM_CENTER.0 - PALM_AXES.0, PALM_CENTER.0 + PALM_AXES.0);
        let (v0, v1) = (PALM_CENTER.1 - PALM_AXES.1, PALM_CENTER.1 + PALM_AXES.1);
        for tip in [4, 8, 12, 16, 20] {
            let (u, v) = kp[tip];
            assert!(u >= u0 && u <= u1 && v >= v0 && v <= v1, "tip {tip}: {u},{v}");
        }
    }

    #[test]
    fn mask_is_exact_rasterization() {
        let mut r = rng::stream(9, Domain::Data, 0);
        for i in 0..20 {
            let s = sample_hand(&mut r, 32, Style(i % 16), Gesture::ALL[i % 5]);
            let m = rasterize(s.params.iter().flat_map(|p| p.primitives()), 32, 32);
            assert_eq!(m, s.mask);
        }
    }

    #[test]
    fn containment_fuzz() {
        for i in 0..10_000u64 {
            let mut r = rng::stream(10, Domain::Data, i);
            let style = Style(i as usize % 16);
            let s = sample_hand(&mut r, 64, style, Gesture::ALL[i as usize % 5]);
            let dil = postprocess_mask(&s.mask);
            for k in s.hands.0.iter().flatten().filter(|k| k[2] > 0.0) {
                assert!(dil.get((k[0] * 64.0) as usize, (k[1] * 64.0) as usize), "draw {i}");
            }
        }
    }

    #[test]
    fn fit_recovers_joint_angles() {
        let mut r = rng::stream(11, Domain::Data, 0);
        let mut err = 0.0;
        let mut count = 0;
        for i in 0..500 {
            let side = i % 2;
            let mut p = HandParams::sample(side, Gesture::ALL[i % 5], r.random_range(-PI..PI), r.random_range(3.0..20.0), &mut r);
            p.wrist = (r.random_range(0.0..64.0), r.random_range(0.0..64.0));
            let q = fit_pose(&p.keypoints_px(), side).unwrap();
            assert!((q.scale - p.scale).abs() < 1e-9);
            assert!(wrap(q.rotation - p.rotation).abs() < 1e-9);
            for f in 0..5 {
                err += (q.spread[f] - p.spread[f]).abs();
                count += 1;
                for j in 0..3 {
                    err += (q.flex[f][j] - p.flex[f][j]).abs();
                    count += 1;
                }
            }
        }
        let mean_deg = (err / count as f64).to_degrees();
        assert!(mean_deg < 1.0, "{mean_deg}");
    }
}
