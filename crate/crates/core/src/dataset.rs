//! Synthetic stick-figure interaction scenes, manifest building and splits.
//!
//! A scene is a textured backdrop with an articulated stick figure whose
//! joints carry colored markers. The post-interaction image moves the arms
//! and adds an object glyph; every pixel inside the bounding box of the
//! change is altered (pixels the arms and object miss receive a faint contact
//! shadow), so the unchanged mask is exactly the complement of a rectangle.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bbox_of_mask, invert_mask, Keypoint, KeypointSet, Mask};
use crate::image::Image;
use crate::losses::{MARKER_COLORS, STICK_SKELETON};
use crate::record::{
    load_record, save_record, validate_record, write_manifest, Annotations, InteractionRecord, ManifestEntry,
};

/// Per-channel tolerance for "unchanged" pixels.
pub const DEFAULT_UNCHANGED_TOLERANCE: f64 = 2.0 / 255.0;

/// Brightness shift of the contact shadow, in 8-bit steps.
const SHADOW_STEPS: f64 = 6.0;

const FIGURE_INK: [f64; 3] = [0.12, 0.12, 0.14];

/// Named object colors; none is close to a joint marker or the backdrop.
pub const OBJECT_PALETTE: [(&str, [f64; 3]); 5] = [
    ("brown", [0.55, 0.33, 0.18]),
    ("pink", [0.95, 0.6, 0.7]),
    ("navy", [0.14, 0.2, 0.47]),
    ("olive", [0.5, 0.55, 0.18]),
    ("teal", [0.1, 0.5, 0.5]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionType {
    Hold,
    Lift,
    Wear,
}

impl InteractionType {
    pub const ALL: [InteractionType; 3] = [InteractionType::Hold, InteractionType::Lift, InteractionType::Wear];

    pub fn name(self) -> &'static str {
        match self {
            InteractionType::Hold => "hold",
            InteractionType::Lift => "lift",
            InteractionType::Wear => "wear",
        }
    }

    fn verb(self) -> &'static str {
        match self {
            InteractionType::Hold => "holding",
            InteractionType::Lift => "lifting",
            InteractionType::Wear => "wearing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Glyph {
    Square,
    Disk,
    Triangle,
    Diamond,
}

impl Glyph {
    pub const ALL: [Glyph; 4] = [Glyph::Square, Glyph::Disk, Glyph::Triangle, Glyph::Diamond];

    pub fn name(self) -> &'static str {
        match self {
            Glyph::Square => "box",
            Glyph::Disk => "ball",
            Glyph::Triangle => "cone",
            Glyph::Diamond => "kite",
        }
    }

    /// Whether offset `(dx, dy)` from the center lies in a glyph of side `s`.
    fn contains(self, dx: f64, dy: f64, s: f64) -> bool {
        let h = s / 2.0;
        match self {
            Glyph::Square => dx.abs() <= h && dy.abs() <= h,
            Glyph::Disk => dx * dx + dy * dy <= h * h,
            Glyph::Triangle => dy.abs() <= h && dx.abs() <= (dy + h) / 2.0,
            Glyph::Diamond => dx.abs() + dy.abs() <= h,
        }
    }
}

/// Arm angles in degrees. Shoulder 0 points down and 180 straight up, measured
/// away from the body; the elbow bends the forearm relative to the upper arm,
/// negative values toward the body.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArmPose {
    pub left_shoulder: f64,
    pub left_elbow: f64,
    pub right_shoulder: f64,
    pub right_elbow: f64,
}

pub const SHOULDER_LIMITS: (f64, f64) = (0.0, 180.0);
pub const ELBOW_LIMITS: (f64, f64) = (-150.0, 150.0);

impl ArmPose {
    pub const RELAXED: ArmPose = ArmPose {
        left_shoulder: 15.0,
        left_elbow: 5.0,
        right_shoulder: 15.0,
        right_elbow: 5.0,
    };

    fn within_limits(&self) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v.is_finite() && (lo..=hi).contains(&v);
        inside(self.left_shoulder, SHOULDER_LIMITS)
            && inside(self.right_shoulder, SHOULDER_LIMITS)
            && inside(self.left_elbow, ELBOW_LIMITS)
            && inside(self.right_elbow, ELBOW_LIMITS)
    }

    /// Coarse pose label from the mean shoulder angle.
    pub fn category(&self) -> &'static str {
        let m = (self.left_shoulder + self.right_shoulder) / 2.0;
        if m < 60.0 {
            "arms_low"
        } else if m < 120.0 {
            "arms_level"
        } else {
            "arms_raised"
        }
    }
}

/// Everything that determines a synthetic scene apart from the texture seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    /// Square canvas side in pixels.
    pub canvas: usize,
    /// Horizontal center of the figure, normalized.
    pub figure_x: f64,
    /// Head-to-feet height of the figure, normalized.
    pub figure_height: f64,
    pub pre_pose: ArmPose,
    pub post_pose: ArmPose,
    pub glyph: Glyph,
    /// Object side as a fraction of the canvas side.
    pub object_scale: f64,
    /// Index into [`OBJECT_PALETTE`].
    pub object_color: usize,
    pub interaction: InteractionType,
}

const FEET_Y: f64 = 0.94;

struct Skeleton {
    /// Normalized `(x, y)` per entry of `STICK_JOINTS`.
    joints: [(f64, f64); 9],
    shoulder: (f64, f64),
    head_radius: f64,
}

fn skeleton(figure_x: f64, u: f64, pose: &ArmPose) -> Skeleton {
    let pelvis = (figure_x, FEET_Y - 0.45 * u);
    let neck = (figure_x, FEET_Y - 0.8 * u);
    let head_radius = 0.09 * u;
    let head = (figure_x, neck.1 - head_radius);
    let shoulder = (figure_x, neck.1 + 0.04 * u);
    let arm = |side: f64, sh: f64, el: f64| {
        let (a, b) = (sh.to_radians(), (sh + el).to_radians());
        let elbow = (shoulder.0 + side * 0.22 * u * a.sin(), shoulder.1 + 0.22 * u * a.cos());
        let hand = (elbow.0 + side * 0.2 * u * b.sin(), elbow.1 + 0.2 * u * b.cos());
        (elbow, hand)
    };
    let (le, lh) = arm(-1.0, pose.left_shoulder, pose.left_elbow);
    let (re, rh) = arm(1.0, pose.right_shoulder, pose.right_elbow);
    Skeleton {
        joints: [
            head,
            neck,
            pelvis,
            le,
            re,
            lh,
            rh,
            (figure_x - 0.15 * u, FEET_Y),
            (figure_x + 0.15 * u, FEET_Y),
        ],
        shoulder,
        head_radius,
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Generation(m));
        if self.canvas < 16 {
            return bad(format!("canvas {} is smaller than 16 px", self.canvas));
        }
        if !self.pre_pose.within_limits() || !self.post_pose.within_limits() {
            return bad("joint angles outside articulation limits".into());
        }
        if !(self.object_scale > 0.0) {
            return bad(format!("object scale {} must be positive", self.object_scale));
        }
        if self.object_color >= OBJECT_PALETTE.len() {
            return bad(format!("object color {} not in the palette", self.object_color));
        }
        if !(0.1..=0.8).contains(&self.figure_height) || !(0.0..=1.0).contains(&self.figure_x) {
            return bad("figure placement outside the canvas".into());
        }
        let b = self.object_bounds();
        if b[0] < 0.0 || b[1] < 0.0 || b[2] > 1.0 || b[3] > 1.0 {
            return bad(format!("object {b:?} leaves the canvas"));
        }
        Ok(())
    }

    /// Normalized object center implied by the post pose and interaction type.
    pub fn object_center(&self) -> (f64, f64) {
        let sk = skeleton(self.figure_x, self.figure_height, &self.post_pose);
        let (lh, rh) = (sk.joints[5], sk.joints[6]);
        let mid = ((lh.0 + rh.0) / 2.0, (lh.1 + rh.1) / 2.0);
        let s = self.object_scale;
        match self.interaction {
            InteractionType::Hold => mid,
            InteractionType::Lift => (mid.0, mid.1.min(sk.shoulder.1) - s / 2.0 - 0.02),
            InteractionType::Wear => {
                let head = sk.joints[0];
                (head.0, head.1 - sk.head_radius - s / 2.0 + 0.03)
            }
        }
    }

    fn object_bounds(&self) -> [f64; 4] {
        let (cx, cy) = self.object_center();
        let h = self.object_scale / 2.0;
        [cx - h, cy - h, cx + h, cy + h]
    }

    /// A random scene of the given type whose object fits on the canvas.
    pub fn sample(interaction: InteractionType, canvas: usize, rng: &mut impl Rng) -> Result<Self> {
        for _ in 0..1000 {
            let post = match interaction {
                InteractionType::Hold => {
                    let sh = rng.gen_range(30.0..55.0);
                    let el = -rng.gen_range(60.0..95.0);
                    ArmPose {
                        left_shoulder: sh,
                        left_elbow: el,
                        right_shoulder: sh + rng.gen_range(-5.0..5.0),
                        right_elbow: el + rng.gen_range(-5.0..5.0),
                    }
                }
                InteractionType::Lift => ArmPose {
                    left_shoulder: rng.gen_range(145.0..170.0),
                    left_elbow: -rng.gen_range(5.0..30.0),
                    right_shoulder: rng.gen_range(145.0..170.0),
                    right_elbow: -rng.gen_range(5.0..30.0),
                },
                InteractionType::Wear => ArmPose {
                    left_shoulder: rng.gen_range(115.0..145.0),
                    left_elbow: -rng.gen_range(70.0..100.0),
                    right_shoulder: rng.gen_range(115.0..145.0),
                    right_elbow: -rng.gen_range(70.0..100.0),
                },
            };
            let scale = match interaction {
                InteractionType::Hold => rng.gen_range(0.15..0.6),
                InteractionType::Lift => rng.gen_range(0.15..0.4),
                InteractionType::Wear => rng.gen_range(0.12..0.3),
            };
            let spec = SyntheticSceneSpec {
                canvas,
                figure_x: rng.gen_range(0.35..0.65),
                figure_height: rng.gen_range(0.5..0.62),
                pre_pose: ArmPose {
                    left_shoulder: rng.gen_range(8.0..25.0),
                    left_elbow: rng.gen_range(0.0..12.0),
                    right_shoulder: rng.gen_range(8.0..25.0),
                    right_elbow: rng.gen_range(0.0..12.0),
                },
                post_pose: post,
                glyph: *Glyph::ALL.choose(rng).expect("glyphs"),
                object_scale: scale,
                object_color: rng.gen_range(0..OBJECT_PALETTE.len()),
                interaction,
            };
            if spec.validate().is_ok() {
                return Ok(spec);
            }
        }
        Err(Error::Generation(format!("no valid {} scene on a {canvas} px canvas", interaction.name())))
    }

    /// Prompt text and the byte span naming the object.
    pub fn prompt(&self) -> (String, (usize, usize)) {
        let object = format!("{} {}", OBJECT_PALETTE[self.object_color].0, self.glyph.name());
        let head = format!("a person {} a ", self.interaction.verb());
        let span = (head.len(), head.len() + object.len());
        (format!("{head}{object}."), span)
    }
}

fn backdrop(size: usize, rng: &mut ChaCha8Rng) -> Image {
    let base: [f64; 3] = [rng.gen_range(0.62..0.78), rng.gen_range(0.6..0.74), rng.gen_range(0.52..0.68)];
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(1.0..4.0),
                rng.gen_range(1.0..4.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.03..0.06),
            )
        })
        .collect();
    let floor = FEET_Y + 0.02;
    let mut data = Vec::with_capacity(size * size * 3);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = ((c as f64 + 0.5) / size as f64, (r as f64 + 0.5) / size as f64);
            let t: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin())
                .sum();
            let shade = if y > floor { -0.12 } else { 0.0 };
            for (ch, b) in base.iter().enumerate() {
                data.push((b + t * (1.0 - 0.3 * ch as f64) + shade).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(size, size, 3, data).expect("backdrop size")
}

fn paint(img: &mut Image, color: &[f64; 3], inside: impl Fn(f64, f64) -> bool) -> Mask {
    let n = img.height();
    let mut painted = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let (x, y) = ((c as f64 + 0.5) / n as f64, (r as f64 + 0.5) / n as f64);
            if inside(x, y) {
                img.pixel_mut(r, c).copy_from_slice(color);
                painted[r * n + c] = 1.0;
            }
        }
    }
    Mask::from_values(n, n, painted).expect("paint mask")
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn draw_figure(img: &mut Image, sk: &Skeleton) {
    let n = img.height() as f64;
    let half = (1.3 / n).max(0.012);
    let j = &sk.joints;
    let bones = [
        (j[1], j[2]),
        (j[2], j[7]),
        (j[2], j[8]),
        (sk.shoulder, j[3]),
        (j[3], j[5]),
        (sk.shoulder, j[4]),
        (j[4], j[6]),
    ];
    paint(img, &FIGURE_INK, |x, y| bones.iter().any(|&(a, b)| segment_distance((x, y), a, b) <= half));
    let (hx, hy, hr) = (j[0].0, j[0].1, sk.head_radius);
    paint(img, &FIGURE_INK, |x, y| (x - hx).powi(2) + (y - hy).powi(2) <= hr * hr);
}

/// Paints a 2x2 marker per joint and returns the marker centers, normalized.
fn draw_markers(img: &mut Image, sk: &Skeleton) -> Vec<Keypoint> {
    let n = img.height();
    sk.joints
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            let cx = ((x * n as f64).round() as usize).clamp(1, n - 1);
            let cy = ((y * n as f64).round() as usize).clamp(1, n - 1);
            for r in cy - 1..=cy {
                for c in cx - 1..=cx {
                    img.pixel_mut(r, c).copy_from_slice(&MARKER_COLORS[i]);
                }
            }
            Keypoint {
                x: cx as f64 / n as f64,
                y: cy as f64 / n as f64,
                confidence: 1.0,
            }
        })
        .collect()
}

fn scene(spec: &SyntheticSceneSpec, bg: &Image, pose: &ArmPose) -> (Image, Vec<Keypoint>) {
    let mut img = bg.clone();
    let sk = skeleton(spec.figure_x, spec.figure_height, pose);
    draw_figure(&mut img, &sk);
    let kps = draw_markers(&mut img, &sk);
    (img, kps)
}

/// 1 where the largest per-channel absolute difference is at most `tolerance`.
pub fn derive_unchanged_mask(pre: &Image, post: &Image, tolerance: f64) -> Result<Mask> {
    if !pre.same_size(post) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            pre.height(),
            pre.width(),
            pre.channels(),
            post.height(),
            post.width(),
            post.channels()
        )));
    }
    let ch = pre.channels();
    let values = pre
        .data()
        .chunks_exact(ch)
        .zip(post.data().chunks_exact(ch))
        .map(|(a, b)| {
            let d = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            if d <= tolerance + 1e-12 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Mask::from_values(pre.height(), pre.width(), values)
}

/// Renders one record; equal seeds give identical pixels.
pub fn generate_synthetic_record(spec: &SyntheticSceneSpec, seed: u64) -> Result<InteractionRecord> {
    spec.validate()?;
    let n = spec.canvas;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = backdrop(n, &mut rng);
    let (pre, _) = scene(spec, &bg, &spec.pre_pose);
    let pre = pre.quantize_u8();

    let color = OBJECT_PALETTE[spec.object_color].1;
    let (cx, cy) = spec.object_center();
    let s = spec.object_scale;
    let glyph = spec.glyph;
    let mut post = bg.clone();
    let sk = skeleton(spec.figure_x, spec.figure_height, &spec.post_pose);
    draw_figure(&mut post, &sk);
    let object = paint(&mut post, &color, |x, y| glyph.contains(x - cx, y - cy, s));
    let joints = draw_markers(&mut post, &sk);
    let mut post = post.quantize_u8();

    let changed = invert_mask(&derive_unchanged_mask(&pre, &post, DEFAULT_UNCHANGED_TOLERANCE)?)?;
    let region = bbox_of_mask(&changed)?;
    let (r0, r1) = ((region.y0 * n as f64).round() as usize, (region.y1 * n as f64).round() as usize);
    let (c0, c1) = ((region.x0 * n as f64).round() as usize, (region.x1 * n as f64).round() as usize);
    let step = SHADOW_STEPS / 255.0;
    for r in r0..r1 {
        for c in c0..c1 {
            if changed.get(r, c) == 0.0 {
                let p = pre.pixel(r, c).to_vec();
                let dark = p.iter().all(|&v| v >= step);
                for (o, v) in post.pixel_mut(r, c).iter_mut().zip(p) {
                    *o = if dark { v - step } else { v + step };
                }
            }
        }
    }
    let post = post.quantize_u8();
    let unchanged = derive_unchanged_mask(&pre, &post, DEFAULT_UNCHANGED_TOLERANCE)?;
    let interaction_region = bbox_of_mask(&invert_mask(&unchanged)?)?;

    let marker_free = Mask::from_fn(n, n, |r, c| {
        let p = post.pixel(r, c);
        let is_marker = MARKER_COLORS.iter().any(|m| m.iter().zip(p).all(|(a, b)| (a - b).abs() < 1e-9));
        if object.get(r, c) == 1.0 && !is_marker {
            1.0
        } else {
            0.0
        }
    })?;
    let object_box = bbox_of_mask(&marker_free).map_err(|_| Error::EmptyObject)?;

    let mut cutout = Image::filled(n, n, &[crate::conditioning::NEUTRAL_GRAY; 3])?;
    paint(&mut cutout, &color, |x, y| glyph.contains(x - 0.5, y - 0.5, s));
    let (prompt, span) = spec.prompt();
    Ok(InteractionRecord {
        id: format!("synthetic-{seed}"),
        background: pre,
        foreground: cutout.quantize_u8(),
        composite: post,
        prompt,
        foreground_span: span,
        interaction_region,
        object_box,
        unchanged_mask: unchanged,
        annotations: Some(Annotations {
            interaction_type: spec.interaction.name().to_string(),
            pose_category: spec.post_pose.category().to_string(),
            object_mask: marker_free,
            joints: KeypointSet::new(STICK_SKELETON, joints)?,
        }),
    })
}

fn record_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// `count` records with interaction types in rotation, generated in parallel.
/// Record `i` is named `{i:05}` and depends only on `(seed, i)`.
pub fn generate_dataset(count: usize, seed: u64, canvas: usize) -> Result<Vec<InteractionRecord>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let rs = record_seed(seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(rs);
            let spec = SyntheticSceneSpec::sample(InteractionType::ALL[i % 3], canvas, &mut rng)?;
            let mut rec = generate_synthetic_record(&spec, rs)?;
            rec.id = format!("{i:05}");
            Ok(rec)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaBucket {
    Small,
    Medium,
    Large,
}

impl AreaBucket {
    pub fn of_ratio(ratio: f64) -> Self {
        if ratio < 0.10 {
            AreaBucket::Small
        } else if ratio <= 0.30 {
            AreaBucket::Medium
        } else {
            AreaBucket::Large
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AreaBucket::Small => "small",
            AreaBucket::Medium => "medium",
            AreaBucket::Large => "large",
        }
    }
}

/// Object area over canvas area, from the object mask when present.
pub fn object_area_ratio(record: &InteractionRecord) -> f64 {
    match &record.annotations {
        Some(a) => a.object_mask.count_nonzero() as f64 / a.object_mask.values().len() as f64,
        None => record.object_box.area(),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub records: usize,
    pub interaction_types: BTreeMap<String, usize>,
    pub area_buckets: BTreeMap<String, usize>,
    pub pose_categories: BTreeMap<String, usize>,
}

impl DatasetStats {
    pub fn add(&mut self, record: &InteractionRecord) {
        let unknown = || "unknown".to_string();
        let ann = record.annotations.as_ref();
        self.records += 1;
        *self
            .interaction_types
            .entry(ann.map_or_else(unknown, |a| a.interaction_type.clone()))
            .or_default() += 1;
        *self
            .area_buckets
            .entry(AreaBucket::of_ratio(object_area_ratio(record)).name().to_string())
            .or_default() += 1;
        *self
            .pose_categories
            .entry(ann.map_or_else(unknown, |a| a.pose_category.clone()))
            .or_default() += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub source: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestReport {
    pub entries: Vec<ManifestEntry>,
    pub rejects: Vec<Reject>,
    pub stats: DatasetStats,
}

pub const RECORDS_DIR: &str = "records";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const REJECTS_FILE: &str = "rejects.jsonl";
pub const STATS_FILE: &str = "stats.json";

/// Saves a record's images under `root` and its description as `records/{id}.json`.
pub fn write_record(record: &InteractionRecord, root: &Path) -> Result<ManifestEntry> {
    let entry = save_record(record, root)?;
    let dir = root.join(RECORDS_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{}.json", record.id));
    fs::write(&path, serde_json::to_vec(&entry)?).map_err(|e| Error::io(&path, e))?;
    Ok(entry)
}

fn check_entry(path: &Path, root: &Path) -> Result<(ManifestEntry, InteractionRecord)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let entry: ManifestEntry = serde_json::from_slice(&bytes)?;
    let record = load_record(&entry, root)?;
    let violations = validate_record(&record);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(Error::Validation(list.join(", ")));
    }
    Ok((entry, record))
}

/// Scans `root/records/*.json`, validates each record and writes
/// `manifest.jsonl`, `rejects.jsonl` and `stats.json` under `root`.
pub fn build_manifest(root: &Path) -> Result<ManifestReport> {
    let dir = root.join(RECORDS_DIR);
    let mut files = Vec::new();
    if dir.is_dir() {
        for item in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = item.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|x| x == "json") {
                files.push(path);
            }
        }
    }
    files.sort();
    let checked: Vec<_> = files.par_iter().map(|p| (p, check_entry(p, root))).collect();
    let mut report = ManifestReport {
        entries: Vec::new(),
        rejects: Vec::new(),
        stats: DatasetStats::default(),
    };
    for (path, outcome) in checked {
        match outcome {
            Ok((entry, record)) => {
                report.stats.add(&record);
                report.entries.push(entry);
            }
            Err(e) => report.rejects.push(Reject {
                source: path.strip_prefix(root).unwrap_or(path).to_path_buf(),
                reason: e.to_string(),
            }),
        }
    }
    write_manifest(&root.join(MANIFEST_FILE), &report.entries)?;
    let mut rejects = Vec::new();
    for r in &report.rejects {
        serde_json::to_writer(&mut rejects, r)?;
        rejects.push(b'\n');
    }
    let rp = root.join(REJECTS_FILE);
    fs::write(&rp, rejects).map_err(|e| Error::io(&rp, e))?;
    let sp = root.join(STATS_FILE);
    fs::write(&sp, serde_json::to_vec_pretty(&report.stats)?).map_err(|e| Error::io(&sp, e))?;
    Ok(report)
}

/// Generates `count` records into `root` and builds the manifest.
pub fn write_synthetic_dataset(root: &Path, count: usize, seed: u64, canvas: usize) -> Result<ManifestReport> {
    let records = generate_dataset(count, seed, canvas)?;
    for r in &records {
        write_record(r, root)?;
    }
    build_manifest(root)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<ManifestEntry>,
    pub val: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

/// Largest-remainder allocation of `n` items to `ratios`.
fn allocate(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = exact[i].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Seeded train/val/test split, stratified by interaction type.
pub fn split_dataset(entries: &[ManifestEntry], ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut groups: BTreeMap<String, Vec<&ManifestEntry>> = BTreeMap::new();
    for e in entries {
        groups
            .entry(e.interaction_type.clone().unwrap_or_else(|| "unknown".into()))
            .or_default()
            .push(e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit::default();
    for group in groups.values_mut() {
        group.shuffle(&mut rng);
        let [a, b, _] = allocate(group.len(), ratios);
        split.train.extend(group[..a].iter().map(|e| (*e).clone()));
        split.val.extend(group[a..a + b].iter().map(|e| (*e).clone()));
        split.test.extend(group[a + b..].iter().map(|e| (*e).clone()));
    }
    Ok(split)
}

/// Writes `train.jsonl`, `val.jsonl` and `test.jsonl` into `dir`.
pub fn write_split(dir: &Path, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_manifest(&dir.join("train.jsonl"), &split.train)?;
    write_manifest(&dir.join("val.jsonl"), &split.val)?;
    write_manifest(&dir.join("test.jsonl"), &split.test)
}

/// A source of candidate records from outside the synthetic generator.
///
/// `candidates` yields records in a deterministic order. The predicate hooks
/// encode exclusion rules (several people, an occluded object) for backends
/// that can judge them; the defaults accept everything.
pub trait Importer {
    fn name(&self) -> &str;
    fn candidates(&self) -> Result<Vec<InteractionRecord>>;
    fn single_person(&self, _record: &InteractionRecord) -> bool {
        true
    }
    fn object_unoccluded(&self, _record: &InteractionRecord) -> bool {
        true
    }
}

#[derive(Debug, Clone, Default)]
pub struct ImportReport {
    pub accepted: Vec<InteractionRecord>,
    /// `(record id, reason)`.
    pub excluded: Vec<(String, String)>,
}

/// Applies the importer's predicates and record validation to its candidates.
pub fn run_importer(importer: &dyn Importer) -> Result<ImportReport> {
    let mut report = ImportReport::default();
    for rec in importer.candidates()? {
        let reason = if !importer.single_person(&rec) {
            Some("more than one person".to_string())
        } else if !importer.object_unoccluded(&rec) {
            Some("object occluded".to_string())
        } else {
            let v = validate_record(&rec);
            (!v.is_empty()).then(|| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "))
        };
        match reason {
            Some(r) => report.excluded.push((rec.id.clone(), r)),
            None => report.accepted.push(rec),
        }
    }
    Ok(report)
}

/// The bundled importer backend: the synthetic generator.
pub struct SyntheticImporter {
    pub count: usize,
    pub seed: u64,
    pub canvas: usize,
}

impl Importer for SyntheticImporter {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn candidates(&self) -> Result<Vec<InteractionRecord>> {
        generate_dataset(self.count, self.seed, self.canvas)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rasterize_box;

    fn hold_spec() -> SyntheticSceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        SyntheticSceneSpec::sample(InteractionType::Hold, 64, &mut rng).unwrap()
    }

    #[test]
    fn hold_record_is_valid() {
        let rec = generate_synthetic_record(&hold_spec(), 11).unwrap();
        assert!(validate_record(&rec).is_empty(), "{:?}", validate_record(&rec));
        let ann = rec.annotations.as_ref().unwrap();
        assert_eq!(ann.interaction_type, "hold");
        assert_eq!(ann.joints.len(), 9);
        let (s, e) = rec.foreground_span;
        assert!(rec.prompt[s..e].ends_with(spec_glyph(&hold_spec())));
    }

    fn spec_glyph(s: &SyntheticSceneSpec) -> &'static str {
        s.glyph.name()
    }

    #[test]
    fn region_is_the_exact_complement_of_the_unchanged_mask() {
        for (i, t) in InteractionType::ALL.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
            let spec = SyntheticSceneSpec::sample(*t, 64, &mut rng).unwrap();
            let rec = generate_synthetic_record(&spec, i as u64).unwrap();
            let region = rasterize_box(&rec.interaction_region, 64, 64).unwrap();
            let inside = region.and(&rec.unchanged_mask).unwrap().count_nonzero();
            let covered = region.or(&rec.unchanged_mask).unwrap().count_nonzero();
            assert_eq!(inside, 0);
            assert_eq!(covered, 64 * 64);
        }
    }

    #[test]
    fn identical_images_have_no_region() {
        let rec = generate_synthetic_record(&hold_spec(), 1).unwrap();
        let m = derive_unchanged_mask(&rec.background, &rec.background, DEFAULT_UNCHANGED_TOLERANCE).unwrap();
        assert_eq!(m.count_nonzero(), 64 * 64);
        assert!(matches!(bbox_of_mask(&invert_mask(&m).unwrap()), Err(Error::EmptyRegion)));
    }

    #[test]
    fn unchanged_mask_examples() {
        let a = Image::filled(4, 5, &[0.2, 0.4, 0.6]).unwrap();
        let mut b = a.clone();
        b.pixel_mut(2, 3)[1] = 0.9;
        let m = derive_unchanged_mask(&a, &b, DEFAULT_UNCHANGED_TOLERANCE).unwrap();
        assert_eq!(m.count_nonzero(), 19);
        assert_eq!(m.get(2, 3), 0.0);
        let all = derive_unchanged_mask(&a, &b, 1.0).unwrap();
        assert_eq!(all.count_nonzero(), 20);
        let small = Image::filled(4, 4, &[0.0; 3]).unwrap();
        assert!(matches!(derive_unchanged_mask(&a, &small, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_record(&hold_spec(), 5).unwrap();
        let b = generate_synthetic_record(&hold_spec(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.composite.to_rgb8().unwrap().as_raw(), b.composite.to_rgb8().unwrap().as_raw());
    }

    #[test]
    fn invalid_specs_fail() {
        let mut s = hold_spec();
        s.object_scale = 0.0;
        assert!(matches!(generate_synthetic_record(&s, 0), Err(Error::Generation(_))));
        let mut s = hold_spec();
        s.figure_x = 0.02;
        s.object_scale = 0.6;
        assert!(matches!(generate_synthetic_record(&s, 0), Err(Error::Generation(_))));
        let mut s = hold_spec();
        s.post_pose.left_shoulder = 200.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn markers_are_found_by_the_estimator() {
        use crate::losses::{MarkerPoseEstimator, PoseEstimator};
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = SyntheticSceneSpec::sample(InteractionType::Lift, 64, &mut rng).unwrap();
        let rec = generate_synthetic_record(&spec, 9).unwrap();
        let est = MarkerPoseEstimator::default().estimate(&rec.composite).unwrap();
        for (p, q) in est.points.iter().zip(&rec.annotations.unwrap().joints.points) {
            assert!((p.x - q.x).abs() < 0.02 && (p.y - q.y).abs() < 0.02, "{p:?} vs {q:?}");
        }
    }

    #[test]
    fn area_buckets() {
        assert_eq!(AreaBucket::of_ratio(0.05), AreaBucket::Small);
        assert_eq!(AreaBucket::of_ratio(0.2), AreaBucket::Medium);
        assert_eq!(AreaBucket::of_ratio(0.1), AreaBucket::Medium);
        assert_eq!(AreaBucket::of_ratio(0.3), AreaBucket::Medium);
        assert_eq!(AreaBucket::of_ratio(0.31), AreaBucket::Large);
    }

    #[test]
    fn allocation_sums_and_tracks_ratios() {
        for n in 0..40 {
            let c = allocate(n, [0.7, 0.2, 0.1]);
            assert_eq!(c.iter().sum::<usize>(), n);
            for (k, r) in c.iter().zip([0.7, 0.2, 0.1]) {
                assert!((*k as f64 - r * n as f64).abs() <= 1.0);
            }
        }
        assert_eq!(allocate(7, [1.0, 0.0, 0.0]), [7, 0, 0]);
    }
}
