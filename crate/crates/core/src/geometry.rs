//! Boxes, masks and keypoints.
//!
//! Boxes live in normalized image coordinates so that one box can be
//! rasterized at any working resolution. Rasterization uses pixel-center
//! inclusion with half-open bounds: pixel `(row, col)` is inside the box when
//! `x0 <= (col + 0.5) / width < x1` and likewise for rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Threshold used whenever a soft mask is turned into a binary one.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

/// An axis-aligned box in normalized `[0, 1]` coordinates.
///
/// Serialized as a `[x0, y0, x1, y1]` array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && x0 < x1
            && y0 < y1;
        if !ok {
            return Err(Error::Validation(format!(
                "invalid box [{x0}, {y0}, {x1}, {y1}]: need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// The box covering the whole image.
    pub fn full() -> Self {
        Self {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x0, self.y0, self.x1, self.y1]
    }

    /// Area of the overlap with `other`, zero when disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x1.min(other.x1) - self.x0.max(other.x0)).max(0.0);
        let h = (self.y1.min(other.y1) - self.y0.max(other.y0)).max(0.0);
        w * h
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn contains_box(&self, other: &BBox) -> bool {
        other.x0 >= self.x0 && other.x1 <= self.x1 && other.y0 >= self.y0 && other.y1 <= self.y1
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// A dense per-pixel mask with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    values: Vec<f64>,
    binary: bool,
}

impl Mask {
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!("mask size {height}x{width}")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("mask value {v} outside [0, 1]")));
        }
        let binary = values.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(Self {
            height,
            width,
            values,
            binary,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::from_values(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    pub fn ones(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 1.0)
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::from_values(height, width, values)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn count_nonzero(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0.0).count()
    }

    /// Threshold at [`BINARIZE_THRESHOLD`]; values `>= 0.5` become 1.
    pub fn binarize(&self) -> Mask {
        Mask {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v >= BINARIZE_THRESHOLD { 1.0 } else { 0.0 })
                .collect(),
            binary: true,
        }
    }

    /// Pixels set in both masks.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a.min(b))
    }

    /// Pixels set in either mask.
    pub fn or(&self, other: &Mask) -> Result<Mask> {
        self.zip(other, |a, b| a.max(b))
    }

    fn zip(&self, other: &Mask, f: impl Fn(f64, f64) -> f64) -> Result<Mask> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Mask::from_values(self.height, self.width, values)
    }

    /// 8-bit grayscale bytes, 0 or 255 for binary masks.
    pub fn to_u8(&self) -> Vec<u8> {
        self.values.iter().map(|v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_values(height, width, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }
}

/// Binary mask with 1 wherever the pixel center falls inside `bbox`.
pub fn rasterize_box(bbox: &BBox, height: usize, width: usize) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(Error::Dimension(format!("cannot rasterize at {height}x{width}")));
    }
    Mask::from_fn(height, width, |r, c| {
        let cx = (c as f64 + 0.5) / width as f64;
        let cy = (r as f64 + 0.5) / height as f64;
        let inside = cx >= bbox.x0 && cx < bbox.x1 && cy >= bbox.y0 && cy < bbox.y1;
        if inside {
            1.0
        } else {
            0.0
        }
    })
}

/// Tightest box (in pixel-edge coordinates) around every nonzero pixel.
pub fn bbox_of_mask(mask: &Mask) -> Result<BBox> {
    if !mask.is_binary() {
        return Err(Error::Validation("bbox_of_mask needs a binary mask".into()));
    }
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) != 0.0 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::EmptyRegion);
    }
    let (h, w) = (mask.height as f64, mask.width as f64);
    BBox::new(
        c0 as f64 / w,
        r0 as f64 / h,
        (c1 + 1) as f64 / w,
        (r1 + 1) as f64 / h,
    )
}

/// `1 - mask` for binary masks.
pub fn invert_mask(mask: &Mask) -> Result<Mask> {
    if !mask.is_binary() {
        return Err(Error::Validation("cannot invert a non-binary mask".into()));
    }
    Ok(Mask {
        height: mask.height,
        width: mask.width,
        values: mask.values.iter().map(|v| 1.0 - v).collect(),
        binary: true,
    })
}

/// One detected body keypoint in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Ordered keypoints following a named skeleton convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub skeleton: String,
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(skeleton: impl Into<String>, points: Vec<Keypoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            let in_unit = |v: f64| (0.0..=1.0).contains(&v);
            if !(in_unit(p.x) && in_unit(p.y) && in_unit(p.confidence)) {
                return Err(Error::Validation(format!("keypoint {i} out of range: {p:?}")));
            }
        }
        Ok(Self {
            skeleton: skeleton.into(),
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ones_at(mask: &Mask) -> Vec<(usize, usize)> {
        let mut out = vec![];
        for r in 0..mask.height() {
            for c in 0..mask.width() {
                if mask.get(r, c) == 1.0 {
                    out.push((r, c));
                }
            }
        }
        out
    }

    #[test]
    fn full_box_rasterizes_to_all_ones() {
        let m = rasterize_box(&BBox::full(), 4, 4).unwrap();
        assert_eq!(m.count_nonzero(), 16);
    }

    #[test]
    fn quarter_box_hits_bottom_right_block() {
        let m = rasterize_box(&BBox::new(0.5, 0.5, 1.0, 1.0).unwrap(), 4, 4).unwrap();
        assert_eq!(ones_at(&m), vec![(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(bbox_of_mask(&m).unwrap(), BBox::new(0.5, 0.5, 1.0, 1.0).unwrap());
    }

    #[test]
    fn off_grid_box_counts_by_pixel_centers() {
        let m = rasterize_box(&BBox::new(0.2, 0.3, 0.6, 0.9).unwrap(), 10, 10).unwrap();
        let on = ones_at(&m);
        let rows: std::collections::BTreeSet<_> = on.iter().map(|p| p.0).collect();
        let cols: std::collections::BTreeSet<_> = on.iter().map(|p| p.1).collect();
        assert_eq!(on.len(), 24);
        assert_eq!(rows.len(), 6);
        assert_eq!(cols.len(), 4);
    }

    #[test]
    fn zero_size_raster_is_a_dimension_error() {
        assert!(matches!(
            rasterize_box(&BBox::full(), 0, 4),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn bbox_of_single_pixel() {
        let m = Mask::from_fn(4, 4, |r, c| if (r, c) == (2, 3) { 1.0 } else { 0.0 }).unwrap();
        assert_eq!(bbox_of_mask(&m).unwrap(), BBox::new(0.75, 0.5, 1.0, 0.75).unwrap());
        assert_eq!(
            bbox_of_mask(&Mask::ones(3, 5).unwrap()).unwrap(),
            BBox::full()
        );
    }

    #[test]
    fn bbox_of_empty_mask_fails() {
        assert!(matches!(
            bbox_of_mask(&Mask::zeros(4, 4).unwrap()),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn invert_rejects_soft_masks() {
        let soft = Mask::filled(2, 2, 0.3).unwrap();
        assert!(matches!(invert_mask(&soft), Err(Error::Validation(_))));
        let inv = invert_mask(&Mask::zeros(3, 3).unwrap()).unwrap();
        assert_eq!(inv, Mask::ones(3, 3).unwrap());
    }

    #[test]
    fn box_serializes_as_array() {
        let b = BBox::new(0.1, 0.2, 0.3, 0.4).unwrap();
        assert_eq!(serde_json::to_string(&b).unwrap(), "[0.1,0.2,0.3,0.4]");
        let back: BBox = serde_json::from_str("[0.1,0.2,0.3,0.4]").unwrap();
        assert_eq!(back, b);
        assert!(serde_json::from_str::<BBox>("[0.5,0.2,0.3,0.4]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..0.95f64, 0.0..0.95f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x0, y0, fw, fh)| {
            let x1 = x0 + (1.0 - x0) * fw;
            let y1 = y0 + (1.0 - y0) * fh;
            BBox::new(x0, y0, x1.max(x0 + 1e-6), y1.max(y0 + 1e-6)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn rasterize_then_bbox_is_within_one_pixel(b in arb_box(), h in 2usize..40, w in 2usize..40) {
            let m = rasterize_box(&b, h, w).unwrap();
            // Boxes thinner than a pixel may miss every pixel center.
            if m.count_nonzero() > 0 {
                let back = bbox_of_mask(&m).unwrap();
                let (pw, ph) = (1.0 / w as f64, 1.0 / h as f64);
                prop_assert!((back.x0 - b.x0).abs() <= pw + 1e-12);
                prop_assert!((back.x1 - b.x1).abs() <= pw + 1e-12);
                prop_assert!((back.y0 - b.y0).abs() <= ph + 1e-12);
                prop_assert!((back.y1 - b.y1).abs() <= ph + 1e-12);
            } else {
                prop_assert!(b.width() < 1.0 / w as f64 || b.height() < 1.0 / h as f64);
            }
        }

        #[test]
        fn invert_is_an_involution(bits in proptest::collection::vec(any::<bool>(), 1..64)) {
            let n = bits.len();
            let m = Mask::from_values(1, n, bits.iter().map(|&b| b as u8 as f64).collect()).unwrap();
            prop_assert_eq!(invert_mask(&invert_mask(&m).unwrap()).unwrap(), m);
        }
    }
}
