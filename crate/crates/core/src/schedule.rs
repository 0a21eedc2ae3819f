//! Noise schedule and the forward (noising) process.
//!
//! All schedule arithmetic is f64: cumulative products must reconstruct from
//! the betas to 1e-12 relative error, and the deterministic sampler leans on
//! that precision for its involution property.

use crate::error::{Error, Result};
use crate::Latent;

/// Per-step noise rates and their cumulative products.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas_cum(&self) -> &[f64] {
        &self.alphas_cum
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.betas
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("step {t} out of range 0..{}", self.total_steps())))
    }

    /// Cumulative product at step `t`; `t = -1` is the clean-image boundary
    /// where the product is exactly 1.
    pub fn alpha_cum(&self, t: i64) -> Result<f64> {
        if t < 0 {
            return Ok(1.0);
        }
        self.alphas_cum
            .get(t as usize)
            .copied()
            .ok_or_else(|| Error::invalid(format!("step {t} out of range 0..{}", self.total_steps())))
    }
}

/// Conventional training-schedule defaults.
pub const DEFAULT_TRAIN_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear beta schedule over `total_steps` steps with a running cumulative
/// product of `1 - beta`.
pub fn make_noise_schedule(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if total_steps == 0 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let mut betas = Vec::with_capacity(total_steps);
    if total_steps == 1 {
        betas.push(beta_start);
    } else {
        let step = (beta_end - beta_start) / (total_steps - 1) as f64;
        for i in 0..total_steps {
            betas.push(beta_start + step * i as f64);
        }
    }
    let mut alphas_cum = Vec::with_capacity(total_steps);
    let mut prod = 1.0f64;
    for b in &betas {
        prod *= 1.0 - b;
        alphas_cum.push(prod);
    }
    Ok(NoiseSchedule { betas, alphas_cum })
}

pub fn default_schedule() -> NoiseSchedule {
    make_noise_schedule(DEFAULT_TRAIN_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
        .expect("default schedule parameters are valid")
}

/// One step of the forward Markov chain:
/// `sqrt(1 - beta_t) * z_prev + sqrt(beta_t) * noise`.
pub fn markov_step(z_prev: &Latent, beta_t: f64, noise: &Latent) -> Result<Latent> {
    if z_prev.dim() != noise.dim() {
        return Err(Error::invalid("markov_step: noise shape mismatch"));
    }
    if !(0.0..=1.0).contains(&beta_t) {
        return Err(Error::invalid(format!("markov_step: beta {beta_t} outside [0, 1]")));
    }
    let a = (1.0 - beta_t).sqrt();
    let b = beta_t.sqrt();
    Ok(z_prev * a + noise * b)
}

/// Jump directly from `z0` to step `t`:
/// `sqrt(alpha_t) * z0 + sqrt(1 - alpha_t) * noise`.
pub fn q_sample(z0: &Latent, t: usize, noise: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    if z0.dim() != noise.dim() {
        return Err(Error::invalid("q_sample: noise shape mismatch"));
    }
    let alpha = sched.alpha_cum(t as i64)?;
    Ok(z0 * alpha.sqrt() + noise * (1.0 - alpha).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn scalar(v: f64) -> Latent {
        Array4::from_elem((1, 1, 1, 1), v)
    }

    #[test]
    fn hand_checked_small_schedule() {
        let s = make_noise_schedule(3, 0.1, 0.3).unwrap();
        let expect_betas = [0.1, 0.2, 0.3];
        let expect_alphas = [0.9, 0.72, 0.504];
        for i in 0..3 {
            assert!((s.betas()[i] - expect_betas[i]).abs() < 1e-12);
            assert!((s.alphas_cum()[i] - expect_alphas[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = make_noise_schedule(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alphas_cum(), &[0.5]);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(make_noise_schedule(2, 0.0, 0.1).is_err());
        assert!(make_noise_schedule(0, 0.1, 0.2).is_err());
        assert!(make_noise_schedule(2, 0.3, 0.2).is_err());
        assert!(make_noise_schedule(2, 0.5, 1.0).is_err());
    }

    #[test]
    fn alphas_reconstruct_from_betas() {
        let s = default_schedule();
        let mut prod = 1.0f64;
        for (t, b) in s.betas().iter().enumerate() {
            prod *= 1.0 - b;
            let stored = s.alphas_cum()[t];
            assert!((stored - prod).abs() / prod.abs() <= 1e-12);
        }
        // strictly decreasing, first entry 1 - beta_0
        assert!((s.alphas_cum()[0] - (1.0 - s.betas()[0])).abs() < 1e-15);
        for w in s.alphas_cum().windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    #[test]
    fn markov_step_limits_and_hand_value() {
        let z = scalar(1.0);
        let n = scalar(2.0);
        let same = markov_step(&z, 0.0, &n).unwrap();
        assert_eq!(same[[0, 0, 0, 0]], 1.0);
        let pure = markov_step(&z, 1.0, &n).unwrap();
        assert_eq!(pure[[0, 0, 0, 0]], 2.0);
        let mid = markov_step(&z, 0.19, &n).unwrap();
        assert!((mid[[0, 0, 0, 0]] - (0.9 + 0.19f64.sqrt() * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn q_sample_limits_and_hand_value() {
        // schedule engineered so alpha_0 = 0.25
        let s = make_noise_schedule(1, 0.75, 0.75).unwrap();
        let z0 = scalar(1.0);
        let n = scalar(2.0);
        let out = q_sample(&z0, 0, &n, &s).unwrap();
        assert!((out[[0, 0, 0, 0]] - (0.5 + 0.75f64.sqrt() * 2.0)).abs() < 1e-12);

        // alpha -> 1 limit: tiny beta
        let s = make_noise_schedule(1, 1e-12, 1e-12).unwrap();
        let out = q_sample(&z0, 0, &n, &s).unwrap();
        assert!((out[[0, 0, 0, 0]] - 1.0).abs() < 1e-5);

        // out-of-range step
        assert!(q_sample(&z0, 3, &n, &s).is_err());
    }

    #[test]
    fn q_sample_shape_mismatch_rejected() {
        let s = make_noise_schedule(1, 0.5, 0.5).unwrap();
        let z0 = scalar(1.0);
        let n = Array4::zeros((1, 1, 2, 1));
        assert!(q_sample(&z0, 0, &n, &s).is_err());
    }
}
