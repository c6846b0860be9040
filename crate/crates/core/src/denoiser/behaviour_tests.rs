use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::conditioning::{build_bundle, BundleInputs, ConditioningBundle};
use crate::dataset::generate_dataset;
use crate::error::Error;
use crate::geometry::{BBox, Mask};
use crate::image::Image;
use crate::tensor::Tensor;

fn small() -> DenoiserConfig {
    DenoiserConfig {
        image_size: 32,
        d_model: 16,
        heads: 2,
        blocks: 1,
        adapter_rank: 4,
        schedule_steps: 20,
        ..Default::default()
    }
}

fn noisy_image(h: usize, w: usize, seed: u64) -> Image {
    let t = Tensor::randn(&[h * w * 3], 0.2, &mut ChaCha8Rng::seed_from_u64(seed));
    Image::new(h, w, 3, t.data().iter().map(|v| (v + 0.5).clamp(0.0, 1.0)).collect()).unwrap()
}

fn bundle(cfg: &DenoiserConfig, with_shape: bool) -> ConditioningBundle {
    let s = cfg.image_size;
    let fg = noisy_image(s, s, 1);
    let bg = noisy_image(s, s, 2);
    let mask = Mask::from_fn(s, s, |r, c| if r < s / 2 && c < s / 3 { 1.0 } else { 0.0 }).unwrap();
    let inputs = BundleInputs {
        prompt: "a person holds a red ball.",
        foreground_span: (17, 25),
        interaction_region: BBox::new(0.1, 0.1, 0.6, 0.8).unwrap(),
        foreground: &fg,
        background: &bg,
        object_mask: with_shape.then_some(&mask),
    };
    build_bundle(&inputs, &cfg.encoders().unwrap(), cfg.codec(), cfg.detail_sigma).unwrap()
}

fn randomized(cfg: DenoiserConfig) -> Denoiser {
    let mut m = Denoiser::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let values = m.params.values.iter().map(|v| Tensor::randn(v.shape(), 0.3, &mut rng)).collect();
    m.load_params(values).unwrap();
    m
}

fn latent(cfg: &DenoiserConfig, seed: u64) -> Tensor {
    let (r, c) = cfg.grid();
    Tensor::randn(&[r * c, cfg.latent_dim()], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn zero_initialized_output_predicts_zero() {
    let cfg = small();
    let m = Denoiser::new(cfg.clone()).unwrap();
    let out = denoise_step(&m, &latent(&cfg, 0), 7, &bundle(&cfg, false), None).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_strength_modulation_is_bitwise_identity() {
    let cfg = small();
    let m = randomized(cfg.clone());
    let b = bundle(&cfg, true);
    let z = latent(&cfg, 3);
    let off = denoise_step(&m, &z, 5, &b, None).unwrap();
    for variant in [ModulationVariant::Residual, ModulationVariant::NonResidual] {
        let zero = denoise_step(&m, &z, 5, &b, Some(Modulation { variant, alpha: 0.0 })).unwrap();
        assert_eq!(off.data(), zero.data(), "{variant:?}");
    }
    let on = denoise_step(&m, &z, 5, &b, Some(Modulation { variant: ModulationVariant::Residual, alpha: 1.0 })).unwrap();
    assert_ne!(off.data(), on.data());
}

#[test]
fn modulation_without_shape_mask_is_a_config_error() {
    let cfg = small();
    let m = randomized(cfg.clone());
    let r = denoise_step(&m, &latent(&cfg, 0), 5, &bundle(&cfg, false), Some(Modulation { variant: ModulationVariant::Residual, alpha: 1.0 }));
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn identity_token_order_does_not_matter() {
    let cfg = small();
    assert!(!cfg.id_positions);
    let m = randomized(cfg.clone());
    let b = bundle(&cfg, false);
    let z = latent(&cfg, 4);
    let n = b.id_tokens.rows();
    let mut order: Vec<usize> = (0..n).rev().collect();
    order.rotate_left(n / 3);
    let mut permuted = b.clone();
    let rows: Vec<f64> = order.iter().flat_map(|&i| b.id_tokens.row(i).to_vec()).collect();
    permuted.id_tokens = Tensor::new(b.id_tokens.shape().to_vec(), rows).unwrap();
    let a = denoise_step(&m, &z, 9, &b, None).unwrap();
    let p = denoise_step(&m, &z, 9, &permuted, None).unwrap();
    for (x, y) in a.data().iter().zip(p.data()) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn sampling_is_reproducible_and_checks_guidance() {
    let cfg = small();
    let m = randomized(cfg.clone());
    let b = bundle(&cfg, false);
    let a = sample(&m, &b, &SampleOptions::new(3.5, 5, 11)).unwrap();
    let again = sample(&m, &b, &SampleOptions::new(3.5, 5, 11)).unwrap();
    assert_eq!(a.image.data(), again.image.data());
    let other = sample(&m, &b, &SampleOptions::new(3.5, 5, 12)).unwrap();
    assert_ne!(a.image.data(), other.image.data());
    assert!(matches!(sample(&m, &b, &SampleOptions::new(-0.5, 5, 11)), Err(Error::Parameter(_))));
}

#[test]
fn unit_guidance_is_the_conditional_sampler() {
    let cfg = small();
    let m = randomized(cfg.clone());
    let b = bundle(&cfg, false);
    let steps = 4;
    let got = sample(&m, &b, &SampleOptions::new(1.0, steps, 21)).unwrap();

    let sched = &m.schedule;
    let ts = sched.sampling_timesteps(steps).unwrap();
    let (r, c) = cfg.grid();
    let mut z = Tensor::randn(&[r * c, cfg.latent_dim()], 1.0, &mut ChaCha8Rng::seed_from_u64(21));
    for w in ts.windows(2) {
        let pred = denoise_step(&m, &z, w[0], &b, None).unwrap();
        let (xz, xp) = sched.x0_coefficients(cfg.target, w[0]);
        let (ez, ep) = sched.eps_coefficients(cfg.target, w[0]);
        let (a, s) = sched.coefficients(w[1]);
        let data = z
            .data()
            .iter()
            .zip(pred.data())
            .map(|(zv, pv)| a * (xz * zv + xp * pv).clamp(-1.0, 1.0) + s * (ez * zv + ep * pv))
            .collect();
        z = Tensor::new(z.shape().to_vec(), data).unwrap();
    }
    assert_eq!(got.latent.data(), z.data());
}

fn examples(cfg: &DenoiserConfig, m: &Denoiser) -> (Vec<PreparedExample>, TrainBackends) {
    let recs = generate_dataset(4, 3, cfg.image_size).unwrap();
    let backends = TrainBackends::toy(m, 2).unwrap();
    let ex = recs.iter().map(|r| prepare_example(r, m, &backends).unwrap()).collect();
    (ex, backends)
}

#[test]
fn zero_steps_returns_the_initial_state() {
    let cfg = small();
    let m = Denoiser::new(cfg.clone()).unwrap();
    let (ex, backends) = examples(&cfg, &m);
    let out = train(TrainState::new(m.clone(), 0), &ex, &backends, &TrainOptions { steps: 0, ..Default::default() }).unwrap();
    assert!(out.curve.is_empty());
    assert_eq!(out.state.model.params, m.params);
    assert_eq!(out.state.step, 0);
}

#[test]
fn frozen_base_only_moves_adapters() {
    let cfg = DenoiserConfig { freeze_base: true, ..small() };
    let m = randomized(cfg.clone());
    let (ex, backends) = examples(&cfg, &m);
    let out = train(TrainState::new(m.clone(), 1), &ex, &backends, &TrainOptions { steps: 3, ..Default::default() }).unwrap();
    let after = &out.state.model.params;
    let mut adapters_moved = false;
    for i in 0..after.len() {
        match after.kinds[i] {
            ParamKind::Base => assert_eq!(after.values[i], m.params.values[i], "{}", after.names[i]),
            ParamKind::Adapter => adapters_moved |= after.values[i] != m.params.values[i],
        }
    }
    assert!(adapters_moved);
    assert!(out.curve.iter().all(|r| r.total.is_finite()));
}

#[test]
fn training_is_deterministic() {
    let cfg = small();
    let m = Denoiser::new(cfg.clone()).unwrap();
    let (ex, backends) = examples(&cfg, &m);
    let opts = TrainOptions { steps: 3, seed: 4, ..Default::default() };
    let a = train(TrainState::new(m.clone(), 4), &ex, &backends, &opts).unwrap();
    let b = train(TrainState::new(m, 4), &ex, &backends, &opts).unwrap();
    assert_eq!(a.state.model.params, b.state.model.params);
    assert_eq!(a.curve, b.curve);
}

#[test]
fn pretraining_keeps_the_configuration() {
    let cfg = small();
    let m = Denoiser::new(cfg.clone()).unwrap();
    let (ex, backends) = examples(&cfg, &m);
    let p = pretrain(m.clone(), &ex, &backends, 2, 1e-3, 0).unwrap();
    assert_eq!(p.config, cfg);
    assert_ne!(p.params, m.params);
}

#[test]
fn checkpoints_round_trip() {
    let cfg = small();
    let m = randomized(cfg.clone());
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(m, 5);
    state.step = 17;
    let coeffs = crate::losses::LossCoefficients::default();
    save_checkpoint(dir.path(), &state, &coeffs).unwrap();
    let (loaded, meta) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.model.params, state.model.params);
    assert_eq!(loaded.model.config, cfg);
    assert_eq!((meta.step, meta.seed, meta.coefficients), (17, 5, coeffs));
}
