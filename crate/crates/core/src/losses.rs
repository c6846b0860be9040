//! Training losses: keypoint pose loss, masked background loss, multi-view
//! appearance loss, denoising MSE and their weighted total.
//!
//! Each loss has a plain version over images and a tape version over a
//! differentiable image variable. On the tape an RGB image of size `H x W`
//! is a `(H * W, 3)` tensor with one pixel per row.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseMap, Tape, Var};
use crate::conditioning::NEUTRAL_GRAY;
use crate::error::{Error, Result};
use crate::geometry::{BBox, Keypoint, KeypointSet, Mask};
use crate::image::Image;
use crate::tensor::Tensor;

/// Pixels as rows: `(H * W, C)`.
pub fn image_tensor(img: &Image) -> Tensor {
    Tensor::new(vec![img.height() * img.width(), img.channels()], img.data().to_vec())
        .expect("image buffer matches its shape")
}

pub fn tensor_image(t: &Tensor, height: usize, width: usize) -> Result<Image> {
    Image::new(height, width, t.cols(), t.data().to_vec())
}

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::Shape(format!(
            "images {}x{}x{} and {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- pose

/// Locates body keypoints in an image.
pub trait PoseEstimator: Send + Sync {
    fn skeleton(&self) -> &str;
    fn estimate(&self, image: &Image) -> Result<KeypointSet>;
    /// Keypoint coordinates `(K, 2)` as a differentiable function of `image`.
    fn estimate_on_tape(&self, tape: &mut Tape, image: Var, height: usize, width: usize) -> Result<Var>;
}

/// Joint order of the stick-figure skeleton.
pub const STICK_JOINTS: [&str; 9] = [
    "head", "neck", "pelvis", "left_elbow", "right_elbow", "left_hand", "right_hand", "left_foot",
    "right_foot",
];

/// Skeleton name of [`STICK_JOINTS`].
pub const STICK_SKELETON: &str = "stick9";

/// Marker color painted on each stick-figure joint.
pub const MARKER_COLORS: [[f64; 3]; 9] = [
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [0.0, 0.5, 0.0],
];

/// Soft-argmax over per-joint color-match heatmaps.
///
/// The heatmap of joint `j` at pixel `p` is `softmax_p(-|x_p - c_j|^2 / tau)`
/// and the keypoint is its expected pixel-center position. Confidence is
/// `exp(-min_p |x_p - c_j|^2 / 0.05)`.
#[derive(Debug, Clone)]
pub struct MarkerPoseEstimator {
    pub colors: Vec<[f64; 3]>,
    pub tau: f64,
}

impl Default for MarkerPoseEstimator {
    fn default() -> Self {
        Self {
            colors: MARKER_COLORS.to_vec(),
            tau: 0.01,
        }
    }
}

fn pixel_centers(height: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(height * width * 2);
    for r in 0..height {
        for c in 0..width {
            data.push((c as f64 + 0.5) / width as f64);
            data.push((r as f64 + 0.5) / height as f64);
        }
    }
    Tensor::new(vec![height * width, 2], data).expect("pixel grid")
}

impl PoseEstimator for MarkerPoseEstimator {
    fn skeleton(&self) -> &str {
        STICK_SKELETON
    }

    fn estimate(&self, image: &Image) -> Result<KeypointSet> {
        let mut tape = Tape::new();
        let x = tape.constant(image_tensor(image));
        let coords = self.estimate_on_tape(&mut tape, x, image.height(), image.width())?;
        let coords = tape.value(coords);
        let mut points = Vec::with_capacity(self.colors.len());
        for (j, col) in self.colors.iter().enumerate() {
            let best = image
                .data()
                .chunks_exact(3)
                .map(|p| (0..3).map(|k| (p[k] - col[k]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            points.push(Keypoint {
                x: coords.get(j, 0),
                y: coords.get(j, 1),
                confidence: (-best / 0.05).exp(),
            });
        }
        KeypointSet::new(self.skeleton(), points)
    }

    fn estimate_on_tape(&self, tape: &mut Tape, image: Var, height: usize, width: usize) -> Result<Var> {
        let shape = tape.shape(image).to_vec();
        if shape != [height * width, 3] {
            return Err(Error::Estimation(format!(
                "expected a ({}, 3) pixel tensor, got {shape:?}",
                height * width
            )));
        }
        let k = self.colors.len();
        let colors = Tensor::new(vec![k, 3], self.colors.concat())?;
        // -|x - c|^2 = 2 x.c - |x|^2 - |c|^2; the last term is constant per row.
        let c = tape.constant(colors);
        let cross = tape.matmul_t(c, image);
        let cross = tape.scale(cross, 2.0 / self.tau);
        let sq = tape.square(image);
        let ones = tape.constant(Tensor::full(&[1, 3], 1.0));
        let norms = tape.matmul_t(ones, sq);
        let norms = tape.scale(norms, -1.0 / self.tau);
        let logits = tape.add_row(cross, norms);
        let weights = tape.softmax_rows(logits);
        let grid = tape.constant(pixel_centers(height, width));
        let coords = tape.matmul(weights, grid);
        if !tape.value(coords).all_finite() {
            return Err(Error::Estimation("non-finite keypoint estimate".into()));
        }
        Ok(coords)
    }
}

/// Pose loss value with the number of keypoints that entered it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseLoss {
    pub value: f64,
    pub keypoints: usize,
}

/// Indices of ground-truth keypoints inside `region`.
pub fn keypoints_in_region(gt: &KeypointSet, region: &BBox) -> Vec<usize> {
    gt.points
        .iter()
        .enumerate()
        .filter(|(_, p)| region.contains_point(p.x, p.y))
        .map(|(i, _)| i)
        .collect()
}

/// Mean squared distance between matching keypoints whose ground-truth
/// position lies in `region`; zero when none does.
pub fn pose_loss_keypoints(gt: &KeypointSet, pred: &KeypointSet, region: &BBox) -> Result<PoseLoss> {
    if gt.skeleton != pred.skeleton || gt.len() != pred.len() {
        return Err(Error::Estimation(format!(
            "keypoint sets differ: {} x{} vs {} x{}",
            gt.skeleton,
            gt.len(),
            pred.skeleton,
            pred.len()
        )));
    }
    let idx = keypoints_in_region(gt, region);
    if idx.is_empty() {
        return Ok(PoseLoss {
            value: 0.0,
            keypoints: 0,
        });
    }
    let total: f64 = idx
        .iter()
        .map(|&i| {
            let (g, p) = (gt.points[i], pred.points[i]);
            (g.x - p.x).powi(2) + (g.y - p.y).powi(2)
        })
        .sum();
    Ok(PoseLoss {
        value: total / idx.len() as f64,
        keypoints: idx.len(),
    })
}

pub fn pose_loss(
    gt_image: &Image,
    pred_image: &Image,
    region: &BBox,
    estimator: &dyn PoseEstimator,
) -> Result<PoseLoss> {
    check_same(gt_image, pred_image)?;
    let gt = estimator.estimate(gt_image)?;
    let pred = estimator.estimate(pred_image)?;
    pose_loss_keypoints(&gt, &pred, region)
}

/// Pose loss of a differentiable prediction against fixed ground-truth keypoints.
pub fn pose_loss_tape(
    tape: &mut Tape,
    gt: &KeypointSet,
    pred_image: Var,
    height: usize,
    width: usize,
    region: &BBox,
    estimator: &dyn PoseEstimator,
) -> Result<(Var, usize)> {
    let idx = keypoints_in_region(gt, region);
    if idx.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0)), 0));
    }
    let coords = estimator.estimate_on_tape(tape, pred_image, height, width)?;
    if tape.shape(coords) != [gt.len(), 2] {
        return Err(Error::Estimation("estimator returned a different skeleton size".into()));
    }
    let mut target = Tensor::zeros(&[gt.len(), 2]);
    let mut keep = Tensor::zeros(&[gt.len(), 2]);
    for &i in &idx {
        target.set(i, 0, gt.points[i].x);
        target.set(i, 1, gt.points[i].y);
        keep.set(i, 0, 1.0);
        keep.set(i, 1, 1.0);
    }
    let target = tape.constant(target);
    let keep = tape.constant(keep);
    let diff = tape.sub(coords, target);
    let diff = tape.mul(diff, keep);
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    Ok((tape.scale(total, 1.0 / idx.len() as f64), idx.len()))
}

// ---------------------------------------------------------------- background

fn mask_weights(mask: &Mask, channels: usize, normalize: bool) -> Result<Tensor> {
    if !mask.is_binary() {
        return Err(Error::Validation("background mask must be binary".into()));
    }
    let scale = if normalize {
        let area = mask.sum();
        if area == 0.0 {
            0.0
        } else {
            1.0 / area
        }
    } else {
        1.0
    };
    let data = mask
        .values()
        .iter()
        .flat_map(|&m| std::iter::repeat(m * scale).take(channels))
        .collect();
    Tensor::new(vec![mask.height() * mask.width(), channels], data)
}

fn check_mask(img: &Image, mask: &Mask) -> Result<()> {
    if mask.height() != img.height() || mask.width() != img.width() {
        return Err(Error::Shape(format!(
            "mask {}x{} vs image {}x{}",
            mask.height(),
            mask.width(),
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// `sum_p mask[p] * |gt[p] - pred[p]|^2`, channels summed inside the norm.
/// With `normalize` the sum is divided by the mask area.
pub fn background_loss(gt: &Image, pred: &Image, mask: &Mask, normalize: bool) -> Result<f64> {
    check_same(gt, pred)?;
    check_mask(gt, mask)?;
    let w = mask_weights(mask, gt.channels(), normalize)?;
    Ok(gt
        .data()
        .iter()
        .zip(pred.data())
        .zip(w.data())
        .map(|((a, b), m)| m * (a - b) * (a - b))
        .sum())
}

pub fn background_loss_tape(
    tape: &mut Tape,
    gt: &Image,
    pred: Var,
    mask: &Mask,
    normalize: bool,
) -> Result<Var> {
    check_mask(gt, mask)?;
    let gt_t = image_tensor(gt);
    if tape.shape(pred) != gt_t.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            tape.shape(pred),
            gt_t.shape()
        )));
    }
    let w = tape.constant(mask_weights(mask, gt.channels(), normalize)?);
    let g = tape.constant(gt_t);
    let d = tape.sub(pred, g);
    let sq = tape.square(d);
    let weighted = tape.mul(sq, w);
    Ok(tape.sum(weighted))
}

// ---------------------------------------------------------------- denoising

pub fn denoising_loss(output: &Tensor, target: &Tensor) -> Result<f64> {
    if output.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "output {:?} vs target {:?}",
            output.shape(),
            target.shape()
        )));
    }
    let n = output.len().max(1) as f64;
    Ok(output
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

pub fn denoising_loss_tape(tape: &mut Tape, output: Var, target: &Tensor) -> Result<Var> {
    if tape.shape(output) != target.shape() {
        return Err(Error::Shape(format!(
            "output {:?} vs target {:?}",
            tape.shape(output),
            target.shape()
        )));
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(output, t);
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

// ---------------------------------------------------------------- appearance

/// Synthesizes `k` views of an object image.
pub trait MultiViewGenerator: Send + Sync {
    fn generate(&self, image: &Image, k: usize) -> Result<Vec<Image>>;
    /// The same views as differentiable functions of `image`.
    fn generate_on_tape(
        &self,
        tape: &mut Tape,
        image: Var,
        height: usize,
        width: usize,
        k: usize,
    ) -> Result<Vec<(Var, usize, usize)>>;
}

/// Maps an image to a fixed-length semantic feature vector.
pub trait SemanticFeatureExtractor: Send + Sync {
    fn dim(&self) -> usize;
    fn extract(&self, image: &Image) -> Result<Vec<f64>>;
    /// Features `(1, dim)` as a differentiable function of `image`.
    fn extract_on_tape(&self, tape: &mut Tape, image: Var, height: usize, width: usize) -> Result<Var>;
}

/// Bilinear sampling map from an `h x w x 3` image to `out x out x 3`:
/// output pixel `(r, c)` reads the source at `inverse((c + 0.5) / out, (r + 0.5) / out)`
/// in normalized coordinates, with edge clamping.
fn warp_map(h: usize, w: usize, out: usize, inverse: impl Fn(f64, f64) -> (f64, f64)) -> SparseMap {
    let mut rows = Vec::with_capacity(out * out * 3);
    for r in 0..out {
        for c in 0..out {
            let (u, v) = inverse((c as f64 + 0.5) / out as f64, (r as f64 + 0.5) / out as f64);
            let x = (u * w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let y = (v * h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let taps = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for k in 0..3 {
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(4);
                for &(yy, xx, wt) in &taps {
                    if wt == 0.0 {
                        continue;
                    }
                    let j = (yy * w + xx) * 3 + k;
                    match row.iter_mut().find(|(i, _)| *i == j) {
                        Some(e) => e.1 += wt,
                        None => row.push((j, wt)),
                    }
                }
                rows.push(row);
            }
        }
    }
    SparseMap {
        out_shape: vec![out * out, 3],
        in_len: h * w * 3,
        rows,
    }
}

/// One seeded view: a similarity warp followed by a per-channel gain and offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    pub angle: f64,
    pub scale: f64,
    pub shift: (f64, f64),
    pub gain: [f64; 3],
    pub offset: [f64; 3],
}

impl ViewParams {
    pub fn identity() -> Self {
        Self {
            angle: 0.0,
            scale: 1.0,
            shift: (0.0, 0.0),
            gain: [1.0; 3],
            offset: [0.0; 3],
        }
    }

    fn map(&self, h: usize, w: usize, out: usize) -> SparseMap {
        let (s, a, (tx, ty)) = (self.scale, self.angle, self.shift);
        warp_map(h, w, out, |u, v| {
            let (x, y) = (u - 0.5 - tx, v - 0.5 - ty);
            let (cs, sn) = (a.cos(), a.sin());
            ((cs * x + sn * y) / s + 0.5, (-sn * x + cs * y) / s + 0.5)
        })
    }
}

/// Deterministic affine and color-jitter views. View 0 is the plain resize.
#[derive(Debug, Clone)]
pub struct AffineViewGenerator {
    pub out_size: usize,
    pub seed: u64,
}

impl AffineViewGenerator {
    pub fn new(out_size: usize, seed: u64) -> Self {
        Self { out_size, seed }
    }

    pub fn params(&self, k: usize) -> Vec<ViewParams> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..k)
            .map(|i| {
                if i == 0 {
                    return ViewParams::identity();
                }
                let mut jitter = || rng.gen_range(-1.0..1.0);
                ViewParams {
                    angle: 0.6 * jitter(),
                    scale: 1.0 + 0.2 * jitter(),
                    shift: (0.08 * jitter(), 0.08 * jitter()),
                    gain: [1.0 + 0.15 * jitter(), 1.0 + 0.15 * jitter(), 1.0 + 0.15 * jitter()],
                    offset: [0.05 * jitter(), 0.05 * jitter(), 0.05 * jitter()],
                }
            })
            .collect()
    }
}

impl MultiViewGenerator for AffineViewGenerator {
    fn generate(&self, image: &Image, k: usize) -> Result<Vec<Image>> {
        if k == 0 {
            return Err(Error::Parameter("view count must be at least 1".into()));
        }
        if image.channels() != 3 {
            return Err(Error::Shape("view generator expects RGB".into()));
        }
        let (h, w, s) = (image.height(), image.width(), self.out_size);
        self.params(k)
            .iter()
            .map(|p| {
                let mut data = p.map(h, w, s).apply(image.data());
                for px in data.chunks_exact_mut(3) {
                    for c in 0..3 {
                        px[c] = px[c] * p.gain[c] + p.offset[c];
                    }
                }
                Image::new(s, s, 3, data)
            })
            .collect()
    }

    fn generate_on_tape(
        &self,
        tape: &mut Tape,
        image: Var,
        height: usize,
        width: usize,
        k: usize,
    ) -> Result<Vec<(Var, usize, usize)>> {
        if k == 0 {
            return Err(Error::Parameter("view count must be at least 1".into()));
        }
        let s = self.out_size;
        let mut out = Vec::with_capacity(k);
        for p in self.params(k) {
            let warped = tape.sparse(image, Rc::new(p.map(height, width, s)));
            let gain = tape.constant(Tensor::new(vec![3], p.gain.to_vec())?);
            let offset = tape.constant(Tensor::new(vec![3], p.offset.to_vec())?);
            let g = tape.mul_row(warped, gain);
            out.push((tape.add_row(g, offset), s, s));
        }
        Ok(out)
    }
}

/// Average-pools to a `grid x grid` RGB thumbnail, centers it on neutral
/// gray and applies a fixed random projection.
#[derive(Debug, Clone)]
pub struct PooledProjectionExtractor {
    pub grid: usize,
    projection: Tensor,
}

impl PooledProjectionExtractor {
    pub fn new(grid: usize, dim: usize, seed: u64) -> Self {
        let fan_in = grid * grid * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_fea7);
        Self {
            grid,
            projection: Tensor::randn(&[fan_in, dim], 1.0 / (fan_in as f64).sqrt(), &mut rng),
        }
    }

    fn pool_map(&self, h: usize, w: usize) -> SparseMap {
        let g = self.grid;
        let mut rows = vec![Vec::new(); g * g * 3];
        for r in 0..h {
            for c in 0..w {
                let cell = (r * g / h) * g + c * g / w;
                for k in 0..3 {
                    rows[cell * 3 + k].push(((r * w + c) * 3 + k, 1.0));
                }
            }
        }
        for row in &mut rows {
            let n = row.len().max(1) as f64;
            row.iter_mut().for_each(|e| e.1 /= n);
        }
        SparseMap {
            out_shape: vec![1, g * g * 3],
            in_len: h * w * 3,
            rows,
        }
    }
}

impl SemanticFeatureExtractor for PooledProjectionExtractor {
    fn dim(&self) -> usize {
        self.projection.cols()
    }

    fn extract(&self, image: &Image) -> Result<Vec<f64>> {
        if image.channels() != 3 {
            return Err(Error::Shape("feature extractor expects RGB".into()));
        }
        let pooled: Vec<f64> = self
            .pool_map(image.height(), image.width())
            .apply(image.data())
            .into_iter()
            .map(|v| v - NEUTRAL_GRAY)
            .collect();
        let row = Tensor::new(vec![1, pooled.len()], pooled)?;
        Ok(row.matmul(&self.projection)?.into_data())
    }

    fn extract_on_tape(&self, tape: &mut Tape, image: Var, height: usize, width: usize) -> Result<Var> {
        let pooled = tape.sparse(image, Rc::new(self.pool_map(height, width)));
        let centered = tape.add_scalar(pooled, -NEUTRAL_GRAY);
        let p = tape.constant(self.projection.clone());
        Ok(tape.matmul(centered, p))
    }
}

const MIN_FEATURE_NORM: f64 = 1e-9;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `(1 / k) * sum_i (1 - cos(pred_i, gt_i))` over paired feature vectors.
pub fn appearance_from_features(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(Error::Parameter(format!(
            "need matching non-empty view sets, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut total = 0.0;
    for (view, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Shape(format!("feature lengths {} and {}", p.len(), g.len())));
        }
        let (np, ng) = (norm(p), norm(g));
        if np < MIN_FEATURE_NORM || ng < MIN_FEATURE_NORM {
            return Err(Error::DegenerateFeature { view });
        }
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        total += 1.0 - (dot / (np * ng)).clamp(-1.0, 1.0);
    }
    Ok(total / pred.len() as f64)
}

/// Cuts the object out of a composite with its mask, mattes it onto neutral
/// gray and translates it so the mask centroid lands on the image center.
///
/// This is an affine function of the composite: `crop = map(x) + offset`.
#[derive(Debug, Clone)]
pub struct ObjectCrop {
    pub map: Rc<SparseMap>,
    pub offset: Tensor,
    pub height: usize,
    pub width: usize,
}

impl ObjectCrop {
    pub fn new(object_mask: &Mask) -> Result<Self> {
        let (h, w) = (object_mask.height(), object_mask.width());
        let mut n = 0.0;
        let (mut cy, mut cx) = (0.0, 0.0);
        for r in 0..h {
            for c in 0..w {
                let m = object_mask.get(r, c);
                n += m;
                cy += m * (r as f64 + 0.5);
                cx += m * (c as f64 + 0.5);
            }
        }
        if n == 0.0 {
            return Err(Error::EmptyObject);
        }
        let dy = (h as f64 / 2.0 - cy / n).round() as i64;
        let dx = (w as f64 / 2.0 - cx / n).round() as i64;
        let mut rows = vec![Vec::new(); h * w * 3];
        let mut offset = vec![NEUTRAL_GRAY; h * w * 3];
        for r in 0..h {
            for c in 0..w {
                let m = object_mask.get(r, c);
                let (tr, tc) = (r as i64 + dy, c as i64 + dx);
                if m == 0.0 || tr < 0 || tc < 0 || tr >= h as i64 || tc >= w as i64 {
                    continue;
                }
                let dst = (tr as usize * w + tc as usize) * 3;
                for k in 0..3 {
                    rows[dst + k].push(((r * w + c) * 3 + k, m));
                    offset[dst + k] = (1.0 - m) * NEUTRAL_GRAY;
                }
            }
        }
        Ok(Self {
            map: Rc::new(SparseMap {
                out_shape: vec![h * w, 3],
                in_len: h * w * 3,
                rows,
            }),
            offset: Tensor::new(vec![h * w, 3], offset)?,
            height: h,
            width: w,
        })
    }

    pub fn apply(&self, composite: &Image) -> Result<Image> {
        if composite.height() != self.height || composite.width() != self.width || composite.channels() != 3 {
            return Err(Error::Shape("composite does not match the object mask".into()));
        }
        let data = self
            .map
            .apply(composite.data())
            .into_iter()
            .zip(self.offset.data())
            .map(|(a, b)| a + b)
            .collect();
        Image::new(self.height, self.width, 3, data)
    }

    pub fn apply_on_tape(&self, tape: &mut Tape, composite: Var) -> Var {
        let cut = tape.sparse(composite, self.map.clone());
        let off = tape.constant(self.offset.clone());
        tape.add(cut, off)
    }
}

/// Backends and settings of the appearance loss.
pub struct AppearanceBackends<'a> {
    pub generator: &'a dyn MultiViewGenerator,
    pub extractor: &'a dyn SemanticFeatureExtractor,
    pub views: usize,
}

pub fn appearance_loss(
    pred_composite: &Image,
    foreground: &Image,
    crop: &ObjectCrop,
    backends: &AppearanceBackends<'_>,
) -> Result<f64> {
    let segment = crop.apply(pred_composite)?;
    let feats = |img: &Image| -> Result<Vec<Vec<f64>>> {
        backends
            .generator
            .generate(img, backends.views)?
            .iter()
            .map(|v| backends.extractor.extract(v))
            .collect()
    };
    appearance_from_features(&feats(&segment)?, &feats(foreground)?)
}

/// Reference features of the input foreground, one per view.
pub fn reference_features(foreground: &Image, backends: &AppearanceBackends<'_>) -> Result<Vec<Vec<f64>>> {
    backends
        .generator
        .generate(foreground, backends.views)?
        .iter()
        .map(|v| backends.extractor.extract(v))
        .collect()
}

pub fn appearance_loss_tape(
    tape: &mut Tape,
    pred_composite: Var,
    reference: &[Vec<f64>],
    crop: &ObjectCrop,
    backends: &AppearanceBackends<'_>,
) -> Result<Var> {
    if reference.len() != backends.views {
        return Err(Error::Parameter("reference features do not match the view count".into()));
    }
    let segment = crop.apply_on_tape(tape, pred_composite);
    let views = backends
        .generator
        .generate_on_tape(tape, segment, crop.height, crop.width, backends.views)?;
    let mut terms = Vec::with_capacity(views.len());
    for (i, ((view, h, w), g)) in views.into_iter().zip(reference).enumerate() {
        let f = backends.extractor.extract_on_tape(tape, view, h, w)?;
        let np = norm(tape.value(f).data());
        let ng = norm(g);
        if np < MIN_FEATURE_NORM || ng < MIN_FEATURE_NORM {
            return Err(Error::DegenerateFeature { view: i });
        }
        let gv = tape.constant(Tensor::new(vec![1, g.len()], g.iter().map(|x| x / ng).collect())?);
        let prod = tape.mul(f, gv);
        let dot = tape.sum(prod);
        let sq = tape.square(f);
        let ss = tape.sum(sq);
        let len = tape.sqrt(ss);
        terms.push(tape.div(dot, len));
    }
    let mut cos_sum = terms[0];
    for &t in &terms[1..] {
        cos_sum = tape.add(cos_sum, t);
    }
    let k = terms.len() as f64;
    let mean_cos = tape.scale(cos_sum, 1.0 / k);
    let neg = tape.scale(mean_cos, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

// ---------------------------------------------------------------- total

/// Loss weights and modulation strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossCoefficients {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub alpha: f64,
}

impl Default for LossCoefficients {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 0.5,
            alpha3: 0.8,
            alpha: 1.0,
        }
    }
}

impl LossCoefficients {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("alpha", self.alpha),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Parameter(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub denoising: f64,
    pub pose: f64,
    pub background: f64,
    pub appearance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<usize>,
    pub terms: LossTerms,
    /// Keypoints that entered the pose term.
    pub pose_keypoints: usize,
    pub total: f64,
    pub coefficients: LossCoefficients,
}

/// `denoising + alpha1 * pose + alpha2 * background + alpha3 * appearance`.
pub fn total_loss(terms: LossTerms, coeffs: LossCoefficients) -> Result<LossReport> {
    coeffs.validate()?;
    for (term, v) in [
        ("denoising", terms.denoising),
        ("pose", terms.pose),
        ("background", terms.background),
        ("appearance", terms.appearance),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric { term: term.into() });
        }
    }
    let total = terms.denoising
        + coeffs.alpha1 * terms.pose
        + coeffs.alpha2 * terms.background
        + coeffs.alpha3 * terms.appearance;
    Ok(LossReport {
        step: None,
        terms,
        pose_keypoints: 0,
        total,
        coefficients: coeffs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(points: &[(f64, f64)]) -> KeypointSet {
        KeypointSet::new(
            "t",
            points
                .iter()
                .map(|&(x, y)| Keypoint {
                    x,
                    y,
                    confidence: 1.0,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pose_loss_examples() {
        let region = BBox::full();
        let gt = kp(&[(0.0, 0.0), (1.0, 1.0)]);
        let pred = kp(&[(0.0, 1.0), (1.0, 0.0)]);
        let l = pose_loss_keypoints(&gt, &pred, &region).unwrap();
        assert_eq!(l.keypoints, 2);
        assert_eq!(l.value, 1.0);
        assert_eq!(pose_loss_keypoints(&gt, &gt, &region).unwrap().value, 0.0);
        let far = BBox::new(0.4, 0.4, 0.6, 0.6).unwrap();
        assert_eq!(
            pose_loss_keypoints(&gt, &pred, &far).unwrap(),
            PoseLoss {
                value: 0.0,
                keypoints: 0
            }
        );
    }

    #[test]
    fn background_examples() {
        let gt = Image::new(2, 2, 1, vec![0.5, 0.0, 0.0, 0.0]).unwrap();
        let pred = Image::new(2, 2, 1, vec![1.0, 0.3, 0.2, 0.9]).unwrap();
        let mask = Mask::from_values(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(background_loss(&gt, &pred, &mask, false).unwrap(), 0.25);
        let zeros = Mask::zeros(2, 2).unwrap();
        assert_eq!(background_loss(&gt, &pred, &zeros, false).unwrap(), 0.0);
        assert_eq!(background_loss(&gt, &gt, &Mask::ones(2, 2).unwrap(), false).unwrap(), 0.0);
        let small = Image::filled(1, 2, &[0.0]).unwrap();
        assert!(background_loss(&gt, &small, &mask, false).is_err());
    }

    #[test]
    fn denoising_examples() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(denoising_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.3);
        assert!((denoising_loss(&a, &b).unwrap() - 0.09).abs() < 1e-15);
        assert!(denoising_loss(&a, &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn appearance_from_feature_examples() {
        let e = |v: &[f64]| v.to_vec();
        let same = vec![e(&[1.0, 2.0]), e(&[0.3, -1.0])];
        assert!(appearance_from_features(&same, &same).unwrap().abs() < 1e-15);
        let half = appearance_from_features(&[e(&[1.0, 0.0]), e(&[1.0, 0.0])], &[e(&[2.0, 0.0]), e(&[0.0, 3.0])]).unwrap();
        assert!((half - 0.5).abs() < 1e-15);
        let anti = appearance_from_features(&[e(&[1.0, 1.0])], &[e(&[-2.0, -2.0])]).unwrap();
        assert!((anti - 2.0).abs() < 1e-15);
        assert!(matches!(
            appearance_from_features(&[e(&[0.0, 0.0])], &[e(&[1.0, 0.0])]),
            Err(Error::DegenerateFeature { view: 0 })
        ));
    }

    #[test]
    fn total_loss_examples() {
        let ones = LossTerms {
            denoising: 1.0,
            pose: 1.0,
            background: 1.0,
            appearance: 1.0,
        };
        let r = total_loss(ones, LossCoefficients::default()).unwrap();
        assert!((r.total - 3.3).abs() < 1e-12);
        assert_eq!(total_loss(LossTerms::default(), LossCoefficients::default()).unwrap().total, 0.0);
        let zero = LossCoefficients {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            alpha: 1.0,
        };
        let t = LossTerms {
            denoising: 0.7,
            pose: 5.0,
            background: 9.0,
            appearance: 1.5,
        };
        assert_eq!(total_loss(t, zero).unwrap().total, 0.7);
        let bad = LossTerms {
            background: f64::NAN,
            ..t
        };
        match total_loss(bad, zero) {
            Err(Error::Numeric { term }) => assert_eq!(term, "background"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn marker_estimator_finds_painted_joints() {
        let mut img = Image::filled(32, 32, &[0.8, 0.8, 0.8]).unwrap();
        let at = [(4, 6), (10, 6), (20, 8), (12, 2), (12, 12), (16, 1), (16, 14), (28, 4), (28, 10)];
        for (j, &(r, c)) in at.iter().enumerate() {
            for dr in 0..2 {
                for dc in 0..2 {
                    img.pixel_mut(r + dr, c + dc).copy_from_slice(&MARKER_COLORS[j]);
                }
            }
        }
        let kps = MarkerPoseEstimator::default().estimate(&img).unwrap();
        for (j, &(r, c)) in at.iter().enumerate() {
            let p = kps.points[j];
            assert!((p.x - (c as f64 + 1.0) / 32.0).abs() < 1e-6, "joint {j} x {}", p.x);
            assert!((p.y - (r as f64 + 1.0) / 32.0).abs() < 1e-6, "joint {j} y {}", p.y);
            assert!((p.confidence - 1.0).abs() < 1e-12);
        }
        assert_eq!(pose_loss(&img, &img, &BBox::full(), &MarkerPoseEstimator::default()).unwrap().value, 0.0);
    }

    #[test]
    fn object_crop_centers_and_mattes() {
        let mask = Mask::from_fn(8, 8, |r, c| (r < 2 && c < 2) as u8 as f64).unwrap();
        let crop = ObjectCrop::new(&mask).unwrap();
        let img = Image::filled(8, 8, &[0.1, 0.2, 0.3]).unwrap();
        let out = crop.apply(&img).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let want = if (3..5).contains(&r) && (3..5).contains(&c) {
                    [0.1, 0.2, 0.3]
                } else {
                    [NEUTRAL_GRAY; 3]
                };
                assert_eq!(out.pixel(r, c), &want);
            }
        }
        assert!(matches!(ObjectCrop::new(&Mask::zeros(4, 4).unwrap()), Err(Error::EmptyObject)));
    }

    #[test]
    fn identity_view_of_same_size_is_exact() {
        let data: Vec<f64> = (0..8 * 8 * 3).map(|i| (i % 17) as f64 / 16.0).collect();
        let img = Image::new(8, 8, 3, data).unwrap();
        let views = AffineViewGenerator::new(8, 3).generate(&img, 3).unwrap();
        assert_eq!(views.len(), 3);
        assert!(views[0].data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert_ne!(views[1], views[0]);
    }
}
