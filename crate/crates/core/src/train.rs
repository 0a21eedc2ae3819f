//! Denoiser training: noise-prediction MSE with Adam, null-token
//! conditioning dropout for classifier-free guidance, and a recorded loss
//! curve. Fully deterministic for a fixed seed.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::model::vocab::TokenId;
use crate::model::{samples_to_latent, ModelConfig, PaddedPrompt, ToyDenoiser};
use crate::sampler::Denoiser;
use crate::schedule::{q_sample, NoiseSchedule};
use crate::Latent;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    /// Probability of dropping the caption to the null token during training.
    pub p_uncond: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f32,
    pub model: ModelConfig,
    /// Print progress to stderr every this many steps; 0 is silent.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 4,
            learning_rate: 2e-3,
            seed: 0,
            p_uncond: 0.1,
            grad_clip: 1.0,
            model: ModelConfig::default(),
            log_every: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<f32>,
}

impl TrainReport {
    /// Mean of the first `window` raw losses.
    pub fn smoothed_initial(&self, window: usize) -> f32 {
        let w = window.min(self.losses.len()).max(1);
        self.losses[..w].iter().sum::<f32>() / w as f32
    }

    /// Mean of the last `window` raw losses.
    pub fn smoothed_final(&self, window: usize) -> f32 {
        let n = self.losses.len();
        let w = window.min(n).max(1);
        self.losses[n - w..].iter().sum::<f32>() / w as f32
    }

    pub fn to_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// Noise-prediction MSE: mean over every element of
/// `|noise - eps(q_sample(z0, t, noise), t, tokens)|^2`.
pub fn training_loss(
    denoiser: &ToyDenoiser,
    z0: &Latent,
    t: usize,
    noise: &Latent,
    tokens: Option<&[TokenId]>,
    sched: &NoiseSchedule,
) -> Result<f64> {
    if z0.dim() != noise.dim() {
        return Err(Error::invalid("training_loss: noise shape mismatch"));
    }
    let z_t = q_sample(z0, t, noise, sched)?;
    let eps = denoiser.predict(&z_t, t, tokens)?;
    let n = noise.len() as f64;
    Ok(noise.iter().zip(eps.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: usize,
}

impl Adam {
    fn new(n: usize) -> Adam {
        Adam { m: vec![0.0; n], v: vec![0.0; n], beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0 }
    }

    fn update(&mut self, weights: &mut [f32], grads: &[f32], lr: f32) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..weights.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            weights[i] -= lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

fn sample_noise(rng: &mut ChaCha8Rng, dims: (usize, usize, usize)) -> Array3<f32> {
    Array3::from_shape_simple_fn(dims, || rng.sample::<f32, _>(StandardNormal))
}

/// Trains a fresh denoiser on (image, caption) pairs. Same seed, same
/// dataset, same config: identical final weights.
pub fn train_toy_denoiser(
    dataset: &[(RgbImage, Vec<TokenId>)],
    config: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<(ToyDenoiser, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut model = ToyDenoiser::new(config.model, config.seed)?;

    // pre-scale images to [-1, 1] f32 once
    let latents: Vec<Array3<f32>> =
        dataset.iter().map(|(img, _)| img.mapv(|v| v * 2.0 - 1.0)).collect();
    let prompts: Vec<Vec<TokenId>> = dataset.iter().map(|(_, c)| c.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7261696e));
    let mut adam = Adam::new(model.param_count());
    let mut grads = vec![0f32; model.param_count()];
    let mut losses = Vec::with_capacity(config.steps);
    let t_total = sched.total_steps();
    let dims = {
        let c = model.config();
        (c.channels, c.image_size, c.image_size)
    };

    for step in 0..config.steps {
        let mut xs = Vec::with_capacity(config.batch_size);
        let mut ts = Vec::with_capacity(config.batch_size);
        let mut padded: Vec<PaddedPrompt> = Vec::with_capacity(config.batch_size);
        let mut noises = Vec::with_capacity(config.batch_size);

        for _ in 0..config.batch_size {
            let idx = rng.random_range(0..dataset.len());
            let t = rng.random_range(0..t_total);
            let noise = sample_noise(&mut rng, dims);
            let alpha = sched.alpha_cum(t as i64)? as f32;
            let (sa, sn) = (alpha.sqrt(), (1.0 - alpha).sqrt());
            let z_t = &latents[idx] * sa + &noise * sn;
            let drop_cond = rng.random_bool(config.p_uncond);
            let prompt = if drop_cond {
                model.pad_prompt(None)?
            } else {
                model.pad_prompt(Some(&prompts[idx]))?
            };
            xs.push(z_t);
            ts.push(t);
            padded.push(prompt);
            noises.push(noise);
        }

        let arts = model.forward_raw(&xs, &ts, &padded, Default::default())?;

        // loss and its gradient
        let n_total = (config.batch_size * dims.0 * dims.1 * dims.2) as f32;
        let mut loss = 0f64;
        let mut d_eps = Vec::with_capacity(config.batch_size);
        for (eps, noise) in arts.eps.iter().zip(&noises) {
            let mut d = eps.clone();
            ndarray::Zip::from(&mut d).and(noise).for_each(|dv, &nv| {
                let diff = *dv - nv;
                loss += (diff * diff) as f64;
                *dv = 2.0 * diff / n_total;
            });
            d_eps.push(d);
        }
        let loss = (loss / n_total as f64) as f32;
        losses.push(loss);

        grads.iter_mut().for_each(|g| *g = 0.0);
        model.backward_raw(&arts.cache, &d_eps, &mut grads)?;

        if config.grad_clip > 0.0 {
            let norm = grads.iter().map(|g| g * g).sum::<f32>().sqrt();
            if norm > config.grad_clip {
                let scale = config.grad_clip / norm;
                grads.iter_mut().for_each(|g| *g *= scale);
            }
        }

        adam.update(model.weights_mut(), &grads, config.learning_rate);

        if config.log_every > 0 && (step + 1) % config.log_every == 0 {
            let w = 50.min(losses.len());
            let recent = losses[losses.len() - w..].iter().sum::<f32>() / w as f32;
            eprintln!("step {:>5}/{} loss {recent:.4}", step + 1, config.steps);
        }
    }

    Ok((model, TrainReport { losses }))
}

/// Convenience wrapper used by tests: latent-space MSE against a fresh batch.
pub fn validation_loss(
    model: &ToyDenoiser,
    dataset: &[(RgbImage, Vec<TokenId>)],
    sched: &NoiseSchedule,
    seed: u64,
    samples: usize,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = {
        let c = model.config();
        (c.channels, c.image_size, c.image_size)
    };
    let mut total = 0f64;
    for _ in 0..samples {
        let idx = rng.random_range(0..dataset.len());
        let t = rng.random_range(0..sched.total_steps());
        let noise = sample_noise(&mut rng, dims);
        let img = &dataset[idx].0;
        let z0: Latent = samples_to_latent(&[img.mapv(|v| v * 2.0 - 1.0)]);
        let noise_l: Latent = samples_to_latent(std::slice::from_ref(&noise));
        total += training_loss(model, &z0, t, &noise_l, Some(&dataset[idx].1), sched)?;
    }
    Ok(total / samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_noise_schedule;
    use ndarray::Array4;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            steps: 0,
            batch_size: 2,
            model: ModelConfig {
                image_size: 8,
                c0: 4,
                c1: 6,
                c2: 8,
                heads: 2,
                head_dim: 4,
                time_dim: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset(n: usize) -> Vec<(RgbImage, Vec<TokenId>)> {
        (0..n)
            .map(|i| {
                let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
                    ((c + y + x + i) % 7) as f32 / 7.0
                });
                (img, vec![2, 8, 1, 16])
            })
            .collect()
    }

    #[test]
    fn zero_steps_leaves_initialization_untouched() {
        let cfg = tiny_cfg();
        let sched = make_noise_schedule(20, 1e-4, 0.02).unwrap();
        let (model, report) = train_toy_denoiser(&tiny_dataset(4), &cfg, &sched).unwrap();
        let fresh = ToyDenoiser::new(cfg.model, cfg.seed).unwrap();
        assert_eq!(model.weights(), fresh.weights());
        assert!(report.losses.is_empty());
    }

    #[test]
    fn same_seed_reproduces_weights_exactly() {
        let mut cfg = tiny_cfg();
        cfg.steps = 5;
        let sched = make_noise_schedule(20, 1e-4, 0.02).unwrap();
        let data = tiny_dataset(4);
        let (m1, r1) = train_toy_denoiser(&data, &cfg, &sched).unwrap();
        let (m2, r2) = train_toy_denoiser(&data, &cfg, &sched).unwrap();
        assert_eq!(m1.weights(), m2.weights());
        assert_eq!(r1.losses, r2.losses);
    }

    #[test]
    fn empty_dataset_rejected() {
        let cfg = tiny_cfg();
        let sched = make_noise_schedule(20, 1e-4, 0.02).unwrap();
        assert!(train_toy_denoiser(&[], &cfg, &sched).is_err());
    }

    #[test]
    fn perfect_predictor_loss_is_zero_and_zero_predictor_near_one() {
        // the freshly initialized model has a zeroed head, so it predicts 0;
        // with unit-variance noise the expected loss is 1 per element
        let cfg = tiny_cfg();
        let sched = make_noise_schedule(20, 1e-4, 0.02).unwrap();
        let model = ToyDenoiser::new(cfg.model, 1).unwrap();
        let z0 = Array4::zeros((1, 3, 8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let noise =
            Array4::from_shape_simple_fn((1, 3, 8, 8), || rng.sample::<f64, _>(StandardNormal));
        let loss = training_loss(&model, &z0, 3, &noise, None, &sched).unwrap();
        let empirical = noise.iter().map(|v| v * v).sum::<f64>() / noise.len() as f64;
        assert!((loss - empirical).abs() < 1e-9, "zero predictor loss must equal E[eps^2]");
        assert!((loss - 1.0).abs() < 0.3, "unit variance noise: loss near 1, got {loss}");
    }

    #[test]
    fn training_loss_validates_inputs() {
        let cfg = tiny_cfg();
        let sched = make_noise_schedule(20, 1e-4, 0.02).unwrap();
        let model = ToyDenoiser::new(cfg.model, 1).unwrap();
        let z0 = Array4::zeros((1, 3, 8, 8));
        let bad_noise = Array4::zeros((1, 3, 4, 4));
        assert!(training_loss(&model, &z0, 3, &bad_noise, None, &sched).is_err());
        let noise = Array4::zeros((1, 3, 8, 8));
        assert!(training_loss(&model, &z0, 99, &noise, None, &sched).is_err());
        assert!(training_loss(&model, &z0, 3, &noise, Some(&[999]), &sched).is_err());
    }

    #[test]
    fn short_training_run_reduces_loss() {
        let mut cfg = tiny_cfg();
        cfg.steps = 60;
        cfg.batch_size = 4;
        cfg.learning_rate = 3e-3;
        let sched = make_noise_schedule(50, 1e-4, 0.02).unwrap();
        let data = tiny_dataset(8);
        let (_, report) = train_toy_denoiser(&data, &cfg, &sched).unwrap();
        let initial = report.smoothed_initial(10);
        let fin = report.smoothed_final(10);
        assert!(
            fin < initial,
            "loss should decrease: initial {initial}, final {fin}"
        );
    }
}
