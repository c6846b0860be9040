use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SparseMap, Tape};
use crate::conditioning::{build_bundle, BundleInputs, ConditioningBundle, Encoders, PatchCodec};
use crate::error::{Error, Result};
use crate::geometry::{BBox, KeypointSet, Mask};
use crate::image::Image;
use crate::losses::{
    appearance_loss_tape, background_loss_tape, denoising_loss_tape, pose_loss_tape, reference_features,
    total_loss, AffineViewGenerator, AppearanceBackends, LossCoefficients, LossReport, LossTerms,
    MarkerPoseEstimator, MultiViewGenerator, ObjectCrop, PooledProjectionExtractor, PoseEstimator,
    SemanticFeatureExtractor,
};
use crate::record::InteractionRecord;
use crate::tensor::Tensor;

use super::checkpoint::save_checkpoint;
use super::forward::{forward, Denoiser, ForwardInputs, Modulation};
use super::params::{Bound, ParamKind};

/// Multi-view generator, feature extractor and view count of the appearance loss.
pub struct AppearanceSetup {
    pub generator: Box<dyn MultiViewGenerator>,
    pub extractor: Box<dyn SemanticFeatureExtractor>,
    pub views: usize,
}

impl AppearanceSetup {
    pub fn backends(&self) -> AppearanceBackends<'_> {
        AppearanceBackends {
            generator: self.generator.as_ref(),
            extractor: self.extractor.as_ref(),
            views: self.views,
        }
    }
}

/// Everything training needs besides the network.
pub struct TrainBackends {
    pub encoders: Encoders,
    pub estimator: Box<dyn PoseEstimator>,
    pub appearance: AppearanceSetup,
}

impl TrainBackends {
    /// Deterministic toy backends; `views` is the appearance-loss view count.
    pub fn toy(model: &Denoiser, views: usize) -> Result<Self> {
        let seed = model.config.seed;
        Ok(Self {
            encoders: model.config.encoders()?,
            estimator: Box::new(MarkerPoseEstimator::default()),
            appearance: AppearanceSetup {
                generator: Box::new(AffineViewGenerator::new(32, seed)),
                extractor: Box::new(PooledProjectionExtractor::new(4, 32, seed)),
                views,
            },
        })
    }
}

/// A record turned into fixed training inputs.
pub struct PreparedExample {
    pub id: String,
    pub bundle: ConditioningBundle,
    /// Latent of the ground-truth composite.
    pub x0: Tensor,
    pub composite: Image,
    pub unchanged_mask: Mask,
    pub region: BBox,
    pub keypoints: KeypointSet,
    pub crop: ObjectCrop,
    pub reference: Vec<Vec<f64>>,
}

pub fn prepare_example(
    record: &InteractionRecord,
    model: &Denoiser,
    backends: &TrainBackends,
) -> Result<PreparedExample> {
    let ann = record
        .annotations
        .as_ref()
        .ok_or_else(|| Error::Config(format!("record {} has no object mask", record.id)))?;
    let size = model.config.image_size;
    if record.composite.height() != size || record.composite.width() != size {
        return Err(Error::Shape(format!(
            "record {} is {}x{}, the model expects {size}x{size}",
            record.id,
            record.composite.height(),
            record.composite.width()
        )));
    }
    let inputs = BundleInputs {
        prompt: &record.prompt,
        foreground_span: record.foreground_span,
        interaction_region: record.interaction_region,
        foreground: &record.foreground,
        background: &record.background,
        object_mask: Some(&ann.object_mask),
    };
    let codec = model.config.codec();
    let bundle = build_bundle(&inputs, &backends.encoders, codec, model.config.detail_sigma)?;
    Ok(PreparedExample {
        id: record.id.clone(),
        x0: codec.encode(&record.composite)?,
        bundle,
        composite: record.composite.clone(),
        unchanged_mask: record.unchanged_mask.clone(),
        region: record.interaction_region,
        keypoints: backends.estimator.estimate(&record.composite)?,
        crop: ObjectCrop::new(&ann.object_mask)?,
        reference: reference_features(&record.foreground, &backends.appearance.backends())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub coefficients: LossCoefficients,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Divide the background loss by the unchanged area.
    pub normalize_background: bool,
    pub checkpoint_interval: Option<usize>,
    /// Receives `losses.jsonl` and checkpoints when set.
    #[serde(skip)]
    pub run_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 2,
            coefficients: LossCoefficients::default(),
            learning_rate: 1e-3,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            seed: 0,
            normalize_background: false,
            checkpoint_interval: None,
            run_dir: None,
        }
    }
}

/// Network plus optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Denoiser,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Denoiser, seed: u64) -> Self {
        let zeros: Vec<Tensor> = model.params.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        Self {
            model,
            second_moment: zeros.clone(),
            first_moment: zeros,
            step: 0,
            seed,
        }
    }

    fn trainable(&self, kind: ParamKind) -> bool {
        !self.model.config.freeze_base || kind == ParamKind::Adapter
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub curve: Vec<LossReport>,
}

/// Maps a `(tokens, patch * patch * 3)` latent to `(H * W, 3)` pixels in `[0, 1]` units
/// (before the `+0.5` shift).
pub(crate) fn decode_map(codec: PatchCodec, height: usize, width: usize) -> Result<SparseMap> {
    let layout = codec.layout(height, width)?;
    let mut rows = vec![Vec::new(); layout.len()];
    for (i, &j) in layout.iter().enumerate() {
        rows[j].push((i, 0.5));
    }
    Ok(SparseMap {
        out_shape: vec![height * width, 3],
        in_len: layout.len(),
        rows,
    })
}

struct SampleLoss {
    terms: LossTerms,
    keypoints: usize,
}

fn example_step(
    state: &TrainState,
    ex: &PreparedExample,
    backends: &TrainBackends,
    opts: &TrainOptions,
    decode: &Rc<SparseMap>,
    rng: &mut ChaCha8Rng,
    grads: &mut [Tensor],
) -> Result<SampleLoss> {
    let model = &state.model;
    let cfg = &model.config;
    let sched = &model.schedule;
    let t = rng.gen_range(1..=sched.steps());
    let eps = Tensor::randn(ex.x0.shape(), 1.0, rng);
    let conditional = rng.gen::<f64>() >= cfg.cond_dropout;
    let z = sched.add_noise(&ex.x0, &eps, t);
    let target = sched.target(cfg.target, &ex.x0, &eps, t);
    let coeffs = opts.coefficients;

    let mut tape = Tape::new();
    let bound = Bound::new(&mut tape, &model.params, &model.layout, |k| state.trainable(k));
    let modulation = (cfg.modulation.enabled && conditional).then_some(Modulation {
        variant: cfg.modulation.variant,
        alpha: coeffs.alpha,
    });
    let inputs = ForwardInputs {
        z_t: &z,
        t,
        bundle: &ex.bundle,
        conditional,
        modulation,
    };
    let pred = forward(&mut tape, &bound, cfg, sched, &inputs, None)?;
    let dn = denoising_loss_tape(&mut tape, pred, &target)?;
    let mut terms = LossTerms {
        denoising: tape.value(dn).item(),
        ..LossTerms::default()
    };
    let mut keypoints = 0;
    let mut total = dn;
    let auxiliary = coeffs.alpha1 > 0.0 || coeffs.alpha2 > 0.0 || coeffs.alpha3 > 0.0;
    if conditional && auxiliary {
        let (cz, cp) = sched.x0_coefficients(cfg.target, t);
        let zc = tape.constant(z.map(|v| v * cz));
        let scaled = tape.scale(pred, cp);
        let x0_hat = tape.add(scaled, zc);
        let x0_hat = tape.clamp(x0_hat, -1.0, 1.0);
        let img = tape.sparse(x0_hat, decode.clone());
        let img = tape.add_scalar(img, 0.5);
        let (h, w) = (ex.composite.height(), ex.composite.width());

        let (pose, n) = pose_loss_tape(&mut tape, &ex.keypoints, img, h, w, &ex.region, backends.estimator.as_ref())?;
        let bg = background_loss_tape(&mut tape, &ex.composite, img, &ex.unchanged_mask, opts.normalize_background)?;
        let app = appearance_loss_tape(&mut tape, img, &ex.reference, &ex.crop, &backends.appearance.backends())?;
        terms.pose = tape.value(pose).item();
        terms.background = tape.value(bg).item();
        terms.appearance = tape.value(app).item();
        keypoints = n;
        for (v, c) in [(pose, coeffs.alpha1), (bg, coeffs.alpha2), (app, coeffs.alpha3)] {
            if c > 0.0 {
                let s = tape.scale(v, c);
                total = tape.add(total, s);
            }
        }
    }
    let value = tape.value(total).item();
    if !value.is_finite() {
        let term = [
            ("denoising", terms.denoising),
            ("pose", terms.pose),
            ("background", terms.background),
            ("appearance", terms.appearance),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map_or("total", |(n, _)| n);
        return Err(Error::Numeric { term: term.into() });
    }
    let mut g = tape.backward(total);
    let scale = 1.0 / opts.batch_size as f64;
    for (i, acc) in grads.iter_mut().enumerate() {
        if let Some(gi) = g.take(bound.var(i)) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += scale * b;
            }
        }
    }
    Ok(SampleLoss { terms, keypoints })
}

fn adamw(state: &mut TrainState, grads: &[Tensor], opts: &TrainOptions) {
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let clip = match opts.grad_clip {
        Some(limit) => {
            let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
            if norm > limit {
                limit / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for i in 0..grads.len() {
        if !state.trainable(state.model.params.kinds[i]) {
            continue;
        }
        let p = state.model.params.values[i].data_mut();
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, &g) in grads[i].data().iter().enumerate() {
            let g = g * clip;
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            p[j] -= opts.learning_rate * (update + opts.weight_decay * p[j]);
        }
    }
}

/// Runs `opts.steps` optimizer steps and returns the final state with one
/// report per step. A non-finite loss aborts the run; checkpoints already on
/// disk are left untouched.
pub fn train(
    state: TrainState,
    examples: &[PreparedExample],
    backends: &TrainBackends,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let mut state = state;
    if opts.steps == 0 {
        return Ok(TrainOutcome { state, curve: vec![] });
    }
    if examples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if opts.batch_size == 0 || !(opts.learning_rate > 0.0) {
        return Err(Error::Parameter("batch size and learning rate must be positive".into()));
    }
    opts.coefficients.validate()?;
    let cfg = state.model.config.clone();
    let decode = Rc::new(decode_map(cfg.codec(), cfg.image_size, cfg.image_size)?);
    let mut log = match &opts.run_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("losses.jsonl");
            Some((
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?,
                path,
            ))
        }
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let mut grads: Vec<Tensor> = state.model.params.values.iter().map(|v| Tensor::zeros(v.shape())).collect();
        let mut sum = LossTerms::default();
        let mut keypoints = 0;
        for _ in 0..opts.batch_size {
            if order.is_empty() {
                order = (0..examples.len()).collect();
                order.shuffle(&mut rng);
            }
            let ex = &examples[order.pop().expect("refilled")];
            let s = match example_step(&state, ex, backends, opts, &decode, &mut rng, &mut grads) {
                Ok(s) => s,
                Err(e) => {
                    if let (Error::Numeric { .. }, Some(dir)) = (&e, &opts.run_dir) {
                        save_checkpoint(&dir.join("checkpoint"), &state, &opts.coefficients)?;
                    }
                    return Err(e);
                }
            };
            sum.denoising += s.terms.denoising;
            sum.pose += s.terms.pose;
            sum.background += s.terms.background;
            sum.appearance += s.terms.appearance;
            keypoints += s.keypoints;
        }
        let b = opts.batch_size as f64;
        let mean = LossTerms {
            denoising: sum.denoising / b,
            pose: sum.pose / b,
            background: sum.background / b,
            appearance: sum.appearance / b,
        };
        adamw(&mut state, &grads, opts);
        let mut report = total_loss(mean, opts.coefficients)?;
        report.step = Some(state.step);
        report.pose_keypoints = keypoints;
        if let Some((f, path)) = log.as_mut() {
            let line = serde_json::to_string(&report)?;
            writeln!(f, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        curve.push(report);
        if let (Some(k), Some(dir)) = (opts.checkpoint_interval, &opts.run_dir) {
            if k > 0 && state.step % k == 0 {
                save_checkpoint(&dir.join(format!("checkpoint-{:06}", state.step)), &state, &opts.coefficients)?;
            }
        }
    }
    if let Some(dir) = &opts.run_dir {
        save_checkpoint(&dir.join("checkpoint"), &state, &opts.coefficients)?;
    }
    Ok(TrainOutcome { state, curve })
}

/// Denoising-only, unmodulated training of every parameter, standing in for
/// a pretrained base model. The returned model keeps the input configuration.
pub fn pretrain(
    model: Denoiser,
    examples: &[PreparedExample],
    backends: &TrainBackends,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<Denoiser> {
    let config = model.config.clone();
    let mut base = model;
    base.config.modulation.enabled = false;
    base.config.freeze_base = false;
    let opts = TrainOptions {
        steps,
        learning_rate,
        seed,
        coefficients: LossCoefficients {
            alpha1: 0.0,
            alpha2: 0.0,
            alpha3: 0.0,
            alpha: 0.0,
        },
        ..TrainOptions::default()
    };
    let mut out = train(TrainState::new(base, seed), examples, backends, &opts)?.state.model;
    out.config = config;
    Ok(out)
}
