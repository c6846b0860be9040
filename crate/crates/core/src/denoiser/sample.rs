use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

use super::forward::{predict, AttentionCapture, Denoiser};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOptions {
    pub guidance_scale: f64,
    pub steps: usize,
    pub seed: u64,
    /// Clamp each clean-latent estimate to `[-1, 1]`.
    pub clip_estimate: bool,
    /// Record attention of the last conditional evaluation.
    pub capture_attention: bool,
}

impl SampleOptions {
    pub fn new(guidance_scale: f64, steps: usize, seed: u64) -> Self {
        Self {
            guidance_scale,
            steps,
            seed,
            clip_estimate: true,
            capture_attention: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub image: Image,
    pub latent: Tensor,
    pub attention: Option<AttentionCapture>,
}

/// Deterministic DDIM sampling with classifier-free guidance. The
/// unconditional branch drops text, identity and detail tokens; the
/// background and region inputs stay. Sampling never modulates attention.
pub fn sample(model: &Denoiser, bundle: &ConditioningBundle, opts: &SampleOptions) -> Result<SampleOutput> {
    if !(opts.guidance_scale >= 0.0) {
        return Err(Error::Parameter(format!("guidance scale {} < 0", opts.guidance_scale)));
    }
    let cfg = &model.config;
    let sched = &model.schedule;
    let ts = sched.sampling_timesteps(opts.steps)?;
    let n = bundle.image_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut z = Tensor::randn(&[n, cfg.latent_dim()], 1.0, &mut rng);
    let g = opts.guidance_scale;
    let mut capture = None;
    for (i, pair) in ts.windows(2).enumerate() {
        let (t, next) = (pair[0], pair[1]);
        let last = i + 2 == ts.len();
        let mut cap = (opts.capture_attention && last).then(AttentionCapture::default);
        let pred = if g == 1.0 {
            predict(model, &z, t, bundle, true, None, cap.as_mut())?
        } else if g == 0.0 {
            predict(model, &z, t, bundle, false, None, None)?
        } else {
            let c = predict(model, &z, t, bundle, true, None, cap.as_mut())?;
            let u = predict(model, &z, t, bundle, false, None, None)?;
            let data = u.data().iter().zip(c.data()).map(|(u, c)| u + g * (c - u)).collect();
            Tensor::new(c.shape().to_vec(), data)?
        };
        if cap.is_some() {
            capture = cap;
        }
        let (xz, xp) = sched.x0_coefficients(cfg.target, t);
        let (ez, ep) = sched.eps_coefficients(cfg.target, t);
        let mut x0 = Vec::with_capacity(z.len());
        let mut eps = Vec::with_capacity(z.len());
        for (zv, pv) in z.data().iter().zip(pred.data()) {
            let mut x = xz * zv + xp * pv;
            if opts.clip_estimate {
                x = x.clamp(-1.0, 1.0);
            }
            x0.push(x);
            eps.push(ez * zv + ep * pv);
        }
        let (a, s) = sched.coefficients(next);
        let data = x0.iter().zip(&eps).map(|(x, e)| a * x + s * e).collect();
        z = Tensor::new(vec![n, cfg.latent_dim()], data)?;
    }
    let clamped = z.map(|v| v.clamp(-1.0, 1.0));
    let image = cfg.codec().decode(&clamped, cfg.image_size, cfg.image_size)?;
    Ok(SampleOutput {
        image,
        latent: z,
        attention: capture,
    })
}
