use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::Target;

/// Cosine cumulative-signal schedule over timesteps `1..=T`; `t = 0` is clean.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Parameter(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let s = 0.008;
        let f = |t: f64| (((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let mut alpha_bar = vec![1.0];
        let mut prev = 1.0;
        for t in 1..=steps {
            let beta = (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(0.0, 0.999);
            prev *= 1.0 - beta;
            alpha_bar.push(prev);
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// `sqrt(abar) x0 + sqrt(1 - abar) eps`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Tensor {
        let (a, s) = self.coefficients(t);
        let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * x + s * e).collect();
        Tensor::new(x0.shape().to_vec(), data).expect("same shape")
    }

    /// `(sqrt(abar_t), sqrt(1 - abar_t))`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Regression target for a training pair.
    pub fn target(&self, target: Target, x0: &Tensor, eps: &Tensor, t: usize) -> Tensor {
        let (a, s) = self.coefficients(t);
        match target {
            Target::Epsilon => eps.clone(),
            Target::Sample => x0.clone(),
            Target::Velocity => {
                let data = x0.data().iter().zip(eps.data()).map(|(x, e)| a * e - s * x).collect();
                Tensor::new(x0.shape().to_vec(), data).expect("same shape")
            }
        }
    }

    /// Linear coefficients `(cz, cp)` with `x0_hat = cz * z_t + cp * prediction`.
    pub fn x0_coefficients(&self, target: Target, t: usize) -> (f64, f64) {
        let (a, s) = self.coefficients(t);
        match target {
            Target::Epsilon => (1.0 / a, -s / a),
            Target::Velocity => (a, -s),
            Target::Sample => (0.0, 1.0),
        }
    }

    /// Linear coefficients `(cz, cp)` with `eps_hat = cz * z_t + cp * prediction`.
    pub fn eps_coefficients(&self, target: Target, t: usize) -> (f64, f64) {
        let (a, s) = self.coefficients(t);
        match target {
            Target::Epsilon => (0.0, 1.0),
            Target::Velocity => (s, a),
            Target::Sample => (1.0 / s, -a / s),
        }
    }

    /// Evenly spaced descending timesteps for an `n`-step sampler, ending at 0.
    pub fn sampling_timesteps(&self, n: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if n == 0 || n > t {
            return Err(Error::Parameter(format!("sampling steps {n} outside 1..={t}")));
        }
        let mut ts: Vec<usize> = (0..=n).map(|i| ((t * (n - i)) as f64 / n as f64).round() as usize).collect();
        ts.dedup();
        Ok(ts)
    }
}
