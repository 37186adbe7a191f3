//! Binary masks and morphological dilation/erosion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Row-major binary mask.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, area {})", self.width, self.height, self.area())
    }
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(&[height, width], &[data.len()]));
        }
        Ok(Self { width, height, data })
    }

    /// Pixels of channel 0 of item `b` with value ≥ `threshold`.
    pub fn from_tensor<T: Real>(t: &Tensor4<T>, b: usize, threshold: T) -> Self {
        let plane = &t.item(b)[..t.plane_len()];
        Self {
            width: t.width(),
            height: t.height(),
            data: plane.iter().map(|&v| v >= threshold).collect(),
        }
    }

    /// (1, 1, H, W) tensor of 0/1 values.
    pub fn to_tensor<T: Real>(&self) -> Tensor4<T> {
        Tensor4::from_vec(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect(),
        )
        .expect("mask dims")
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Out-of-bounds coordinates read as unset.
    pub fn get_signed(&self, x: isize, y: isize) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height && self.get(x as usize, y as usize)
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &Mask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::shape(&[self.height, self.width], &[other.height, other.width]));
        }
        Ok(())
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_dims(other)?;
        Ok(self.zip(other, |a, b| a || b))
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        self.check_dims(other)?;
        Ok(self.zip(other, |a, b| a && b))
    }

    pub fn difference(&self, other: &Mask) -> Result<Mask> {
        self.check_dims(other)?;
        Ok(self.zip(other, |a, b| a && !b))
    }

    fn zip(&self, other: &Mask, f: impl Fn(bool, bool) -> bool) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn invert(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// Every set pixel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Mask) -> Result<f64> {
        self.check_dims(other)?;
        let (mut inter, mut uni) = (0usize, 0usize);
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            uni += (a || b) as usize;
        }
        Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut b: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    b = Some(match b {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        b
    }

    /// Filled axis-aligned bounding box of the set pixels.
    pub fn bbox_hull(&self) -> Mask {
        match self.bbox() {
            None => Mask::empty(self.width, self.height),
            Some((x0, y0, x1, y1)) => Mask::from_fn(self.width, self.height, |x, y| (x0..=x1).contains(&x) && (y0..=y1).contains(&y)),
        }
    }

    pub fn dilate(&self, se: &StructuringElement) -> Mask {
        let offsets = se.offsets();
        Mask::from_fn(self.width, self.height, |x, y| {
            offsets
                .iter()
                .any(|&(dx, dy)| self.get_signed(x as isize - dx, y as isize - dy))
        })
    }

    /// Erosion; pixels outside the frame count as set, so a full mask is a
    /// fixed point.
    pub fn erode(&self, se: &StructuringElement) -> Mask {
        let offsets = se.offsets();
        Mask::from_fn(self.width, self.height, |x, y| {
            offsets.iter().all(|&(dx, dy)| {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                let inside = sx >= 0 && sy >= 0 && (sx as usize) < self.width && (sy as usize) < self.height;
                !inside || self.get(sx as usize, sy as usize)
            })
        })
    }

    pub fn dilate_n(&self, se: &StructuringElement, n: usize) -> Mask {
        (0..n).fold(self.clone(), |m, _| m.dilate(se))
    }
}

/// Structuring element as a set of offsets around the origin.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "shape", deny_unknown_fields)]
pub enum StructuringElement {
    /// Odd-sided square.
    Square { size: usize },
    /// Plus-shaped cross with the given radius.
    Cross { radius: usize },
}

impl StructuringElement {
    pub fn square(size: usize) -> Self {
        assert!(size % 2 == 1, "square structuring element needs an odd size");
        StructuringElement::Square { size }
    }

    pub fn offsets(&self) -> Vec<(isize, isize)> {
        match *self {
            StructuringElement::Square { size } => {
                let r = (size / 2) as isize;
                (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect()
            }
            StructuringElement::Cross { radius } => {
                let r = radius as isize;
                (-r..=r)
                    .flat_map(|d| [(d, 0), (0, d)])
                    .filter(|&(dx, dy)| !(dx == 0 && dy == 0))
                    .chain(std::iter::once((0, 0)))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Dilation computed by the definition: a pixel is set if any set pixel lies
    /// within Chebyshev distance r.
    fn chebyshev_dilate(m: &Mask, r: isize) -> Mask {
        Mask::from_fn(m.width(), m.height(), |x, y| {
            (0..m.height()).any(|sy| {
                (0..m.width()).any(|sx| {
                    m.get(sx, sy) && (sx as isize - x as isize).abs() <= r && (sy as isize - y as isize).abs() <= r
                })
            })
        })
    }

    #[test]
    fn single_pixel_5x5_dilation() {
        let mut m = Mask::empty(9, 9);
        m.set(4, 4, true);
        let d = m.dilate(&StructuringElement::square(5));
        assert_eq!(d.area(), 25);
        assert_eq!(d, chebyshev_dilate(&m, 2));
    }

    #[test]
    fn border_and_fixed_points() {
        let full = Mask::full(5, 4);
        assert_eq!(full.dilate(&StructuringElement::square(3)), full);
        assert_eq!(full.erode(&StructuringElement::square(3)), full);
        let empty = Mask::empty(5, 4);
        assert_eq!(empty.dilate(&StructuringElement::square(5)), empty);
        let mut corner = Mask::empty(5, 5);
        corner.set(0, 0, true);
        assert_eq!(corner.dilate(&StructuringElement::square(3)).area(), 4);
    }

    #[test]
    fn cross_element() {
        let mut m = Mask::empty(7, 7);
        m.set(3, 3, true);
        assert_eq!(m.dilate(&StructuringElement::Cross { radius: 1 }).area(), 5);
    }

    #[test]
    fn iou_and_hull() {
        let a = Mask::from_fn(4, 4, |x, _| x < 2);
        let b = Mask::from_fn(4, 4, |x, _| x >= 1 && x < 3);
        assert!((a.iou(&b).unwrap() - 4.0 / 12.0).abs() < 1e-12);
        let mut m = Mask::empty(6, 6);
        m.set(1, 2, true);
        m.set(3, 4, true);
        assert_eq!(m.bbox_hull().area(), 9);
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1usize..12, 1usize..12).prop_flat_map(|(w, h)| {
            proptest::collection::vec(proptest::bool::weighted(0.15), w * h)
                .prop_map(move |d| Mask::from_vec(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn square_dilation_matches_definition(m in arb_mask(), r in 0usize..3) {
            prop_assert_eq!(m.dilate(&StructuringElement::square(2 * r + 1)), chebyshev_dilate(&m, r as isize));
        }

        #[test]
        fn dilation_is_extensive_and_erosion_anti_extensive(m in arb_mask()) {
            let se = StructuringElement::square(3);
            prop_assert!(m.is_subset_of(&m.dilate(&se)));
            prop_assert!(m.erode(&se).is_subset_of(&m));
        }
    }
}
