//! Background SSIM, region and object IoU, pluggable external scorers, the
//! benchmark runner and ablation grids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::ModulationVariant;
use crate::conditioning::{build_bundle, BundleInputs, NEUTRAL_GRAY};
use crate::denoiser::{
    prepare_example, sample, train, Denoiser, DenoiserConfig, SampleOptions, TrainBackends, TrainOptions, TrainState,
};
use crate::error::{Error, Result};
use crate::geometry::{rasterize_box, BBox, Mask};
use crate::image::Image;
use crate::losses::LossCoefficients;
use crate::record::{load_record, read_manifest, InteractionRecord};
use crate::region_query::{run_region_query, InteractionSpec, PromptTemplates, VisionLanguageClient};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// IoU thresholds at which region accuracy is reported.
pub const REGION_IOU_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// RGB distance within which a pixel counts as object-colored.
pub const OBJECT_COLOR_TOLERANCE: f64 = 0.2;

/// Reference scores at full scale, quoted in report footers.
pub const REFERENCE_FOOTER: &str = "SSIM(BG) 96.57, HOI 87.39, not reproduced at desk scale";

fn ssim_weights() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Mean Gaussian-window SSIM over every window that contains no excluded
/// pixel, averaged over channels. `data_range` is `L`.
pub fn masked_ssim(a: &Image, b: &Image, excluded: &Mask, data_range: f64) -> Result<f64> {
    if !a.same_size(b) {
        return Err(Error::Shape("SSIM needs images of equal size".into()));
    }
    let (h, w, ch) = (a.height(), a.width(), a.channels());
    if excluded.height() != h || excluded.width() != w {
        return Err(Error::Shape("exclusion mask does not match the images".into()));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!("{h}x{w} is smaller than the {SSIM_WINDOW}px window")));
    }
    if excluded.count_nonzero() == h * w {
        return Err(Error::EmptyComplement);
    }
    let mut integral = vec![0usize; (h + 1) * (w + 1)];
    for r in 0..h {
        for c in 0..w {
            let v = usize::from(excluded.get(r, c) != 0.0);
            integral[(r + 1) * (w + 1) + c + 1] =
                v + integral[r * (w + 1) + c + 1] + integral[(r + 1) * (w + 1) + c] - integral[r * (w + 1) + c];
        }
    }
    let touched = |r: usize, c: usize| {
        let (r1, c1) = (r + SSIM_WINDOW, c + SSIM_WINDOW);
        integral[r1 * (w + 1) + c1] + integral[r * (w + 1) + c] - integral[r * (w + 1) + c1] - integral[r1 * (w + 1) + c]
            > 0
    };
    let k = ssim_weights();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let (da, db) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..=h - SSIM_WINDOW {
        for c in 0..=w - SSIM_WINDOW {
            if touched(r, c) {
                continue;
            }
            for z in 0..ch {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (i, ki) in k.iter().enumerate() {
                    for (j, kj) in k.iter().enumerate() {
                        let wt = ki * kj;
                        let idx = ((r + i) * w + c + j) * ch + z;
                        let (x, y) = (da[idx], db[idx]);
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * (x * x);
                        syy += wt * (y * y);
                        sxy += wt * (x * y);
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += ((2.0 * (mx * my) + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyComplement);
    }
    Ok(total / count as f64)
}

/// SSIM between two images outside `region` (data range 1). Windows that
/// touch the rasterized region are excluded.
pub fn ssim_bg(generated: &Image, reference: &Image, region: &BBox) -> Result<f64> {
    let excluded = rasterize_box(region, generated.height(), generated.width())?;
    masked_ssim(generated, reference, &excluded, 1.0)
}

pub fn region_iou(predicted: &BBox, ground_truth: &BBox) -> f64 {
    let inter = predicted.intersection_area(ground_truth);
    let union = predicted.area() + ground_truth.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Fraction of IoU values at or above each threshold.
pub fn region_accuracy(ious: &[f64], thresholds: &[f64]) -> Vec<(f64, f64)> {
    thresholds
        .iter()
        .map(|&t| {
            let hit = ious.iter().filter(|&&v| v >= t).count();
            (t, if ious.is_empty() { 0.0 } else { hit as f64 / ious.len() as f64 })
        })
        .collect()
}

/// Mean color of a foreground cutout's pixels that differ from the neutral backdrop.
pub fn foreground_color(foreground: &Image) -> Result<[f64; 3]> {
    if foreground.channels() != 3 {
        return Err(Error::Shape("foreground must be RGB".into()));
    }
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for p in foreground.data().chunks_exact(3) {
        if p.iter().any(|v| (v - NEUTRAL_GRAY).abs() > 0.05) {
            for (s, v) in sum.iter_mut().zip(p) {
                *s += v;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyObject);
    }
    Ok(sum.map(|s| s / n as f64))
}

/// 1 where the pixel lies within `tolerance` (Euclidean RGB) of `color`.
pub fn color_mask(img: &Image, color: &[f64; 3], tolerance: f64) -> Result<Mask> {
    if img.channels() != 3 {
        return Err(Error::Shape("color segmentation needs RGB".into()));
    }
    let values = img
        .data()
        .chunks_exact(3)
        .map(|p| {
            let d2: f64 = p.iter().zip(color).map(|(a, b)| (a - b).powi(2)).sum();
            if d2 <= tolerance * tolerance {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    Mask::from_values(img.height(), img.width(), values)
}

/// IoU of two binary masks; two empty masks give 1.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape("masks differ in size".into()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.values().iter().zip(b.values()) {
        let (x, y) = (*x >= 0.5, *y >= 0.5);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// IoU between the ground-truth object mask and the pixels of `generated`
/// that match the foreground's color.
pub fn object_mask_iou(generated: &Image, foreground: &Image, truth: &Mask, tolerance: f64) -> Result<f64> {
    let color = foreground_color(foreground)?;
    mask_iou(&color_mask(generated, &color, tolerance)?, truth)
}

/// One generated image with its inputs, as seen by external scorers.
pub struct ScoreInput<'a> {
    pub id: &'a str,
    pub generated: &'a Image,
    pub background: &'a Image,
    pub foreground: &'a Image,
    pub prompt: &'a str,
}

/// A learned metric (image quality, text alignment, interaction detection,
/// identity similarity) supplied from outside.
pub trait ExternalScorer: Send + Sync {
    /// Metric name used as the report column.
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    /// Whether `score` may run on several threads at once.
    fn reentrant(&self) -> bool {
        true
    }
    /// Per-instance scorers are called with one input at a time and averaged;
    /// set-level scorers see every successful instance in one call.
    fn per_instance(&self) -> bool {
        true
    }
    /// `None` means the scorer abstains.
    fn score(&self, inputs: &[ScoreInput<'_>]) -> Result<Option<f64>>;
}

/// Abstains on everything.
pub struct NullScorer {
    pub metric: String,
}

impl ExternalScorer for NullScorer {
    fn name(&self) -> &str {
        &self.metric
    }

    fn version(&self) -> &str {
        "null"
    }

    fn score(&self, _inputs: &[ScoreInput<'_>]) -> Result<Option<f64>> {
        Ok(None)
    }
}

/// Replays recorded per-instance values keyed by instance id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureScorer {
    pub metric: String,
    pub version: String,
    pub values: BTreeMap<String, f64>,
}

impl FixtureScorer {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

impl ExternalScorer for FixtureScorer {
    fn name(&self) -> &str {
        &self.metric
    }

    fn version(&self) -> &str {
        &self.version
    }

    fn score(&self, inputs: &[ScoreInput<'_>]) -> Result<Option<f64>> {
        if inputs.is_empty() {
            return Ok(None);
        }
        let mut sum = 0.0;
        for i in inputs {
            sum += self
                .values
                .get(i.id)
                .ok_or_else(|| Error::Backend(format!("{} fixture has no value for {}", self.metric, i.id)))?;
        }
        Ok(Some(sum / inputs.len() as f64))
    }
}

/// How a scorer is named in configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    /// Registry key, e.g. `null` or `fixture`.
    pub kind: String,
    /// Report column, e.g. `HOI`.
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

type ScorerFactory = Box<dyn Fn(&ScorerConfig) -> Result<Box<dyn ExternalScorer>> + Send + Sync>;

/// Scorer constructors by kind.
pub struct ScorerRegistry {
    factories: BTreeMap<String, ScorerFactory>,
}

impl ScorerRegistry {
    pub fn empty() -> Self {
        Self {
            factories: BTreeMap::new(),
        }
    }

    /// `null` and `fixture` (reads `path`; the fixture's metric is overridden by the config's).
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("null", |c| Ok(Box::new(NullScorer { metric: c.metric.clone() })));
        r.register("fixture", |c| {
            let path = c
                .path
                .as_ref()
                .ok_or_else(|| Error::Config(format!("fixture scorer {} needs a path", c.metric)))?;
            let mut s = FixtureScorer::load(path)?;
            s.metric = c.metric.clone();
            Ok(Box::new(s))
        });
        r
    }

    pub fn register(
        &mut self,
        kind: &str,
        factory: impl Fn(&ScorerConfig) -> Result<Box<dyn ExternalScorer>> + Send + Sync + 'static,
    ) {
        self.factories.insert(kind.to_string(), Box::new(factory));
    }

    pub fn kinds(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }

    pub fn create(&self, config: &ScorerConfig) -> Result<Box<dyn ExternalScorer>> {
        let f = self
            .factories
            .get(&config.kind)
            .ok_or_else(|| Error::Config(format!("unknown scorer kind {:?}; known: {:?}", config.kind, self.kinds())))?;
        f(config)
    }
}

/// One benchmark input pair.
#[derive(Debug, Clone)]
pub struct BenchInstance {
    pub id: String,
    pub background: Image,
    /// Object cutout on the neutral backdrop.
    pub foreground: Image,
    /// Ground-truth guidance; used directly when no query client is given.
    pub expected: Option<InteractionSpec>,
    /// Ground-truth object pixels of the expected composite.
    pub object_mask: Option<Mask>,
}

impl BenchInstance {
    pub fn from_record(r: &InteractionRecord) -> Self {
        Self {
            id: r.id.clone(),
            background: r.background.clone(),
            foreground: r.foreground.clone(),
            expected: Some(InteractionSpec {
                prompt: r.prompt.clone(),
                object_box: r.object_box,
                interaction_region: r.interaction_region,
                foreground_span: r.foreground_span,
            }),
            object_mask: r.annotations.as_ref().map(|a| a.object_mask.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSet {
    pub ssim_bg: bool,
    pub region_iou: bool,
    pub object_iou: bool,
}

impl Default for MetricSet {
    fn default() -> Self {
        Self {
            ssim_bg: true,
            region_iou: true,
            object_iou: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub instances: Vec<BenchInstance>,
    pub metrics: MetricSet,
    pub seeds: Vec<u64>,
}

impl BenchSpec {
    pub fn from_records(records: &[InteractionRecord], seeds: Vec<u64>) -> Self {
        Self {
            instances: records.iter().map(BenchInstance::from_record).collect(),
            metrics: MetricSet::default(),
            seeds,
        }
    }

    /// Loads every record of a manifest; unreadable images are an error.
    pub fn from_manifest(manifest: &Path, seeds: Vec<u64>) -> Result<Self> {
        let root = manifest.parent().unwrap_or(Path::new("."));
        let records = read_manifest(manifest)?
            .iter()
            .map(|e| load_record(e, root))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_records(&records, seeds))
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("a benchmark needs at least one instance and one seed".into()));
        }
        for i in &self.instances {
            if i.background.channels() != 3 || i.foreground.channels() != 3 {
                return Err(Error::Shape(format!("instance {} images must be RGB", i.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchOptions {
    pub guidance_scale: f64,
    pub sample_steps: usize,
    /// Concurrent instances.
    pub workers: usize,
    /// Query attempts per protocol stage.
    pub attempts: usize,
    pub templates: PromptTemplates,
    pub object_tolerance: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            guidance_scale: 3.5,
            sample_steps: 20,
            workers: 4,
            attempts: 2,
            templates: PromptTemplates::default(),
            object_tolerance: OBJECT_COLOR_TOLERANCE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub id: String,
    pub seed: u64,
    /// Relative to the report directory.
    pub image: Option<PathBuf>,
    pub prompt: Option<String>,
    pub ssim_bg: Option<f64>,
    pub region_iou: Option<f64>,
    pub object_iou: Option<f64>,
    pub scores: BTreeMap<String, f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerId {
    pub name: String,
    pub version: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub instances: usize,
    pub failed: usize,
    pub ssim_bg: Option<f64>,
    pub region_iou: Option<f64>,
    /// `(threshold, accuracy)` pairs.
    pub region_accuracy: Vec<(f64, f64)>,
    pub object_iou: Option<f64>,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub results: Vec<InstanceResult>,
    pub aggregate: Aggregate,
    pub scorers: Vec<ScorerId>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

/// Plain means of the per-instance values; set-level scores come from `set_scores`.
pub fn aggregate(results: &[InstanceResult], set_scores: &BTreeMap<String, f64>) -> Aggregate {
    let ious: Vec<f64> = results.iter().filter_map(|r| r.region_iou).collect();
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    let names: Vec<&String> = {
        let mut n: Vec<&String> = results.iter().flat_map(|r| r.scores.keys()).collect();
        n.sort();
        n.dedup();
        n
    };
    for name in names {
        if let Some(m) = mean(results.iter().filter_map(|r| r.scores.get(name).copied())) {
            scores.insert(name.clone(), m);
        }
    }
    scores.extend(set_scores.iter().map(|(k, v)| (k.clone(), *v)));
    Aggregate {
        instances: results.len(),
        failed: results.iter().filter(|r| r.error.is_some()).count(),
        ssim_bg: mean(results.iter().filter_map(|r| r.ssim_bg)),
        region_iou: mean(ious.iter().copied()),
        region_accuracy: if ious.is_empty() {
            vec![]
        } else {
            region_accuracy(&ious, &REGION_IOU_THRESHOLDS)
        },
        object_iou: mean(results.iter().filter_map(|r| r.object_iou)),
        scores,
    }
}

struct Generated {
    result: InstanceResult,
    image: Option<Image>,
}

/// Query outcome of one instance, shared by its seeds; errors are kept as text.
type Guidance = std::result::Result<(InteractionSpec, Option<f64>), String>;

fn guidance_for(
    inst: &BenchInstance,
    client: Option<&dyn VisionLanguageClient>,
    metrics: MetricSet,
    opts: &BenchOptions,
) -> Guidance {
    let spec = match client {
        Some(c) => run_region_query(c, &inst.foreground, &inst.background, &opts.templates, opts.attempts)
            .map(|(s, _)| s)
            .map_err(|e| e.to_string())?,
        None => inst
            .expected
            .clone()
            .ok_or_else(|| format!("instance {} has no guidance and no query client", inst.id))?,
    };
    let iou = match (client, metrics.region_iou, &inst.expected) {
        (Some(_), true, Some(gt)) => Some(region_iou(&spec.interaction_region, &gt.interaction_region)),
        _ => None,
    };
    Ok((spec, iou))
}

fn run_instance(
    inst: &BenchInstance,
    guidance: &Guidance,
    seed: u64,
    model: &Denoiser,
    metrics: MetricSet,
    opts: &BenchOptions,
    out_dir: Option<&Path>,
) -> Generated {
    let mut result = InstanceResult {
        id: inst.id.clone(),
        seed,
        image: None,
        prompt: None,
        ssim_bg: None,
        region_iou: None,
        object_iou: None,
        scores: BTreeMap::new(),
        error: None,
    };
    let (spec, iou) = match guidance {
        Ok(g) => g,
        Err(e) => {
            log::warn!("bench instance {} seed {seed} failed: {e}", inst.id);
            result.error = Some(e.clone());
            return Generated { result, image: None };
        }
    };
    result.region_iou = *iou;
    let outcome = (|| -> Result<Image> {
        result.prompt = Some(spec.prompt.clone());
        let encoders = model.config.encoders()?;
        let inputs = BundleInputs {
            prompt: &spec.prompt,
            foreground_span: spec.foreground_span,
            interaction_region: spec.interaction_region,
            foreground: &inst.foreground,
            background: &inst.background,
            object_mask: None,
        };
        let bundle = build_bundle(&inputs, &encoders, model.config.codec(), model.config.detail_sigma)?;
        let out = sample(model, &bundle, &SampleOptions::new(opts.guidance_scale, opts.sample_steps, seed))?;
        if metrics.ssim_bg {
            result.ssim_bg = Some(ssim_bg(&out.image, &inst.background, &spec.interaction_region)?);
        }
        if let (true, Some(mask)) = (metrics.object_iou, &inst.object_mask) {
            result.object_iou = Some(object_mask_iou(&out.image, &inst.foreground, mask, opts.object_tolerance)?);
        }
        if let Some(dir) = out_dir {
            let rel = PathBuf::from("images").join(format!("{}-seed{seed}.png", inst.id));
            out.image.save_png(dir.join(&rel))?;
            result.image = Some(rel);
        }
        Ok(out.image)
    })();
    match outcome {
        Ok(img) => Generated {
            result,
            image: Some(img),
        },
        Err(e) => {
            log::warn!("bench instance {} seed {seed} failed: {e}", inst.id);
            result.error = Some(e.to_string());
            Generated { result, image: None }
        }
    }
}

/// Generates every (instance, seed) pair and scores it. Failures are recorded
/// per instance and never abort the run. With `out_dir`, images, a contact
/// sheet, `bench.jsonl` and `summary.md` are written there.
pub fn run_bench(
    spec: &BenchSpec,
    model: &Denoiser,
    client: Option<&dyn VisionLanguageClient>,
    scorers: &[Box<dyn ExternalScorer>],
    opts: &BenchOptions,
    out_dir: Option<&Path>,
) -> Result<BenchReport> {
    spec.validate()?;
    if let Some(dir) = out_dir {
        let images = dir.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    }
    let jobs: Vec<(usize, u64)> = (0..spec.instances.len())
        .flat_map(|i| spec.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    // Queries run in instance order so scripted clients see a fixed sequence.
    let guidance: Vec<Guidance> = spec
        .instances
        .iter()
        .map(|inst| guidance_for(inst, client, spec.metrics, opts))
        .collect();
    let mut generated: Vec<Generated> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, s)| run_instance(&spec.instances[i], &guidance[i], s, model, spec.metrics, opts, out_dir))
            .collect()
    });

    let mut set_scores = BTreeMap::new();
    for scorer in scorers {
        let name = scorer.name().to_string();
        if scorer.per_instance() {
            for (g, &(i, _)) in generated.iter_mut().zip(&jobs) {
                let (Some(img), None) = (&g.image, &g.result.error) else {
                    continue;
                };
                let inst = &spec.instances[i];
                let input = ScoreInput {
                    id: &inst.id,
                    generated: img,
                    background: &inst.background,
                    foreground: &inst.foreground,
                    prompt: g.result.prompt.as_deref().unwrap_or(""),
                };
                match scorer.score(&[input]) {
                    Ok(Some(v)) => {
                        g.result.scores.insert(name.clone(), v);
                    }
                    Ok(None) => {}
                    Err(e) => g.result.error = Some(format!("scorer {name}: {e}")),
                }
            }
        } else {
            let inputs: Vec<ScoreInput<'_>> = generated
                .iter()
                .zip(&jobs)
                .filter_map(|(g, &(i, _))| {
                    let img = g.image.as_ref()?;
                    let inst = &spec.instances[i];
                    Some(ScoreInput {
                        id: &inst.id,
                        generated: img,
                        background: &inst.background,
                        foreground: &inst.foreground,
                        prompt: g.result.prompt.as_deref().unwrap_or(""),
                    })
                })
                .collect();
            if let Ok(Some(v)) = scorer.score(&inputs) {
                set_scores.insert(name, v);
            }
        }
    }

    let results: Vec<InstanceResult> = generated.iter().map(|g| g.result.clone()).collect();
    let report = BenchReport {
        aggregate: aggregate(&results, &set_scores),
        results,
        scorers: scorers
            .iter()
            .map(|s| ScorerId {
                name: s.name().into(),
                version: s.version().into(),
            })
            .collect(),
    };
    if let Some(dir) = out_dir {
        write_bench_report(&report, dir)?;
        let first = spec.seeds[0];
        let rows: Vec<[Option<&Image>; 3]> = generated
            .iter()
            .zip(&jobs)
            .filter(|(_, &(_, s))| s == first)
            .map(|(g, &(i, _))| {
                let inst = &spec.instances[i];
                [Some(&inst.background), Some(&inst.foreground), g.image.as_ref()]
            })
            .collect();
        contact_sheet(&rows)?.save_png(dir.join("contact_sheet.png"))?;
    }
    Ok(report)
}

/// Tiles rows of equally sized images; missing cells are mid-gray.
pub fn contact_sheet(rows: &[[Option<&Image>; 3]]) -> Result<Image> {
    let Some(first) = rows.iter().flatten().flatten().next() else {
        return Image::filled(1, 1, &[NEUTRAL_GRAY; 3]);
    };
    let (h, w) = (first.height(), first.width());
    let mut sheet = Image::filled(h * rows.len().max(1), w * 3, &[NEUTRAL_GRAY; 3])?;
    for (ri, row) in rows.iter().enumerate() {
        for (ci, cell) in row.iter().enumerate() {
            let Some(img) = cell else { continue };
            if img.height() != h || img.width() != w || img.channels() != 3 {
                continue;
            }
            for r in 0..h {
                for c in 0..w {
                    sheet.pixel_mut(ri * h + r, ci * w + c).copy_from_slice(img.pixel(r, c));
                }
            }
        }
    }
    Ok(sheet)
}

const SCORE_COLUMNS: [(&str, &str); 4] = [("FID", "FID ↓"), ("CLIP", "CLIP ↑"), ("HOI", "HOI ↑"), ("DINO", "DINO ↑")];

fn cell(v: Option<f64>, scale: f64) -> String {
    v.map_or("–".into(), |v| format!("{:.2}", v * scale))
}

fn table_header(first: &str) -> String {
    let mut s = format!("| {first} |");
    for (_, h) in SCORE_COLUMNS {
        s.push_str(&format!(" {h} |"));
    }
    s.push_str(" SSIM(BG) ↑ | Object IoU ↑ |\n|---|---|---|---|---|---|---|\n");
    s
}

fn table_row(label: &str, a: Option<&Aggregate>) -> String {
    let mut s = format!("| {label} |");
    for (k, _) in SCORE_COLUMNS {
        s.push_str(&format!(" {} |", cell(a.and_then(|a| a.scores.get(k).copied()), 1.0)));
    }
    s.push_str(&format!(
        " {} | {} |\n",
        cell(a.and_then(|a| a.ssim_bg), 100.0),
        cell(a.and_then(|a| a.object_iou), 100.0)
    ));
    s
}

impl BenchReport {
    pub fn markdown(&self) -> String {
        let a = &self.aggregate;
        let mut s = String::from("# Benchmark\n\n");
        s.push_str(&table_header("Method"));
        s.push_str(&table_row("toy denoiser", Some(a)));
        s.push_str(&format!("\nReference: {REFERENCE_FOOTER}.\n\n"));
        s.push_str(&format!("Instances: {} ({} failed)\n", a.instances, a.failed));
        if let Some(iou) = a.region_iou {
            s.push_str(&format!("\nMean region IoU: {iou:.4}\n\n| IoU threshold | Region accuracy |\n|---|---|\n"));
            for (t, acc) in &a.region_accuracy {
                s.push_str(&format!("| {t:.1} | {:.2} |\n", acc * 100.0));
            }
        }
        let extra: Vec<&String> = a.scores.keys().filter(|k| !SCORE_COLUMNS.iter().any(|(c, _)| c == k)).collect();
        for k in extra {
            s.push_str(&format!("\n{k}: {:.4}\n", a.scores[k]));
        }
        if !self.scorers.is_empty() {
            s.push_str("\nScorers: ");
            let ids: Vec<String> = self.scorers.iter().map(|x| format!("{} ({})", x.name, x.version)).collect();
            s.push_str(&ids.join(", "));
            s.push('\n');
        }
        let failures: Vec<&InstanceResult> = self.results.iter().filter(|r| r.error.is_some()).collect();
        if !failures.is_empty() {
            s.push_str("\n## Failures\n\n");
            for f in failures {
                s.push_str(&format!("- {} (seed {}): {}\n", f.id, f.seed, f.error.as_deref().unwrap_or("")));
            }
        }
        s
    }
}

pub fn write_bench_report(report: &BenchReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = Vec::new();
    for r in &report.results {
        serde_json::to_writer(&mut lines, r)?;
        lines.push(b'\n');
    }
    let p = dir.join("bench.jsonl");
    fs::write(&p, lines).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("summary.md");
    fs::write(&p, report.markdown()).map_err(|e| Error::io(&p, e))
}

/// One ablated knob and the values it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Coefficients(Vec<LossCoefficients>),
    ModulationVariant(Vec<ModulationVariant>),
    Modulation(Vec<bool>),
    Views(Vec<usize>),
    GuidanceScale(Vec<f64>),
}

impl AblationAxis {
    fn len(&self) -> usize {
        match self {
            AblationAxis::Coefficients(v) => v.len(),
            AblationAxis::ModulationVariant(v) => v.len(),
            AblationAxis::Modulation(v) => v.len(),
            AblationAxis::Views(v) => v.len(),
            AblationAxis::GuidanceScale(v) => v.len(),
        }
    }

    pub fn header(&self) -> &'static str {
        match self {
            AblationAxis::Coefficients(_) => "Coefficients (α1, α2, α3, α)",
            AblationAxis::ModulationVariant(_) => "Modulation Strategy",
            AblationAxis::Modulation(_) => "Attention Modulation",
            AblationAxis::Views(_) => "# Views",
            AblationAxis::GuidanceScale(_) => "Guidance Scale",
        }
    }

    fn label(&self, i: usize) -> String {
        match self {
            AblationAxis::Coefficients(v) => {
                let c = v[i];
                format!("α1={}, α2={}, α3={}, α={}", c.alpha1, c.alpha2, c.alpha3, c.alpha)
            }
            AblationAxis::ModulationVariant(v) => v[i].label().to_string(),
            AblationAxis::Modulation(v) => if v[i] { "on" } else { "off" }.to_string(),
            AblationAxis::Views(v) => v[i].to_string(),
            AblationAxis::GuidanceScale(v) => format!("gs = {}", v[i]),
        }
    }
}

/// Settings shared by every cell of an ablation grid.
pub struct AblationBase<'a> {
    pub config: DenoiserConfig,
    pub train: TrainOptions,
    pub views: usize,
    pub train_records: &'a [InteractionRecord],
    pub bench: &'a BenchSpec,
    pub bench_options: BenchOptions,
    pub client: Option<&'a dyn VisionLanguageClient>,
    /// Starting parameters shared by every cell; fresh initialization when unset.
    pub pretrained: Option<&'a Denoiser>,
    /// Cell `i` writes to `out_dir/cell-{i}` when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub label: String,
    pub aggregate: Option<Aggregate>,
    /// Total loss at the last training step.
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub header: String,
    pub rows: Vec<GridRow>,
}

impl GridReport {
    pub fn markdown(&self) -> String {
        let mut s = table_header(&self.header);
        for r in &self.rows {
            s.push_str(&table_row(&r.label, r.aggregate.as_ref()));
        }
        for r in self.rows.iter().filter(|r| r.error.is_some()) {
            s.push_str(&format!("\n{}: {}\n", r.label, r.error.as_deref().unwrap_or("")));
        }
        s
    }
}

fn train_cell(
    config: DenoiserConfig,
    pretrained: Option<&Denoiser>,
    opts: &TrainOptions,
    views: usize,
    records: &[InteractionRecord],
) -> Result<(Denoiser, Option<f64>)> {
    let mut model = Denoiser::new(config)?;
    if let Some(p) = pretrained {
        model.load_params(p.params.values.clone())?;
    }
    let backends = TrainBackends::toy(&model, views)?;
    let examples = records
        .iter()
        .map(|r| prepare_example(r, &model, &backends))
        .collect::<Result<Vec<_>>>()?;
    let seed = opts.seed;
    let out = train(TrainState::new(model, seed), &examples, &backends, opts)?;
    let last = out.curve.last().map(|r| r.total);
    Ok((out.state.model, last))
}

/// Trains and benchmarks one cell per axis value with shared seeds. A failed
/// cell is recorded and the grid continues. Guidance-scale cells share one
/// trained model.
pub fn run_ablation_grid(
    axis: &AblationAxis,
    base: &AblationBase<'_>,
    scorers: &[Box<dyn ExternalScorer>],
) -> Result<GridReport> {
    if axis.len() == 0 {
        return Err(Error::Parameter("ablation axis has no values".into()));
    }
    match axis {
        AblationAxis::Coefficients(v) => v.iter().try_for_each(LossCoefficients::validate)?,
        AblationAxis::Views(v) if v.iter().any(|&n| n == 0) => {
            return Err(Error::Parameter("view count must be at least 1".into()))
        }
        AblationAxis::GuidanceScale(v) if v.iter().any(|g| !(*g >= 0.0)) => {
            return Err(Error::Parameter("guidance scale must be >= 0".into()))
        }
        _ => {}
    }
    let shared = match axis {
        AblationAxis::GuidanceScale(_) => Some(train_cell(base.config.clone(), base.pretrained, &base.train, base.views, base.train_records)),
        _ => None,
    };
    let mut rows = Vec::with_capacity(axis.len());
    for i in 0..axis.len() {
        let mut config = base.config.clone();
        let mut opts = base.train.clone();
        let mut views = base.views;
        let mut bench_opts = base.bench_options.clone();
        match axis {
            AblationAxis::Coefficients(v) => opts.coefficients = v[i],
            AblationAxis::ModulationVariant(v) => {
                config.modulation.enabled = true;
                config.modulation.variant = v[i];
            }
            AblationAxis::Modulation(v) => config.modulation.enabled = v[i],
            AblationAxis::Views(v) => views = v[i],
            AblationAxis::GuidanceScale(v) => bench_opts.guidance_scale = v[i],
        }
        opts.run_dir = None;
        let cell_dir = base.out_dir.as_ref().map(|d| d.join(format!("cell-{i}")));
        let trained = match &shared {
            Some(Ok((m, l))) => Ok((m.clone(), *l)),
            Some(Err(e)) => Err(Error::Config(format!("shared training failed: {e}"))),
            None => train_cell(config, base.pretrained, &opts, views, base.train_records),
        };
        let row = trained.and_then(|(model, last)| {
            let report = run_bench(base.bench, &model, base.client, scorers, &bench_opts, cell_dir.as_deref())?;
            Ok((report.aggregate, last))
        });
        rows.push(match row {
            Ok((a, last)) => GridRow {
                label: axis.label(i),
                aggregate: Some(a),
                final_loss: last,
                error: None,
            },
            Err(e) => GridRow {
                label: axis.label(i),
                aggregate: None,
                final_loss: None,
                error: Some(e.to_string()),
            },
        });
    }
    let report = GridReport {
        header: axis.header().into(),
        rows,
    };
    if let Some(dir) = &base.out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("grid.md");
        fs::write(&p, report.markdown()).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("grid.json");
        fs::write(&p, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}
