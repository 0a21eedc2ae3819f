//! Deterministic DDIM sampling and inversion with classifier-free guidance.
//!
//! The sampler talks to any [`Denoiser`]; test oracles implement the trait
//! with closed-form predictions. Step arithmetic runs in f64 on top of the
//! schedule so that a step followed by its reverse restores the state to
//! near machine precision.

use crate::error::{Error, Result};
use crate::model::vocab::TokenId;
use crate::model::{OverrideFn, TapRecord};
use crate::schedule::NoiseSchedule;
use crate::{ensure_finite, Latent};

/// Sampling settings. `steps` may be below the schedule's training step
/// count; the grid is then uniformly spaced (floor mapping).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    pub inversion_guidance: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, guidance_scale: 7.5, inversion_guidance: 1.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.steps > sched.total_steps() {
            return Err(Error::invalid(format!(
                "sampler steps {} exceed schedule steps {}",
                self.steps,
                sched.total_steps()
            )));
        }
        if self.guidance_scale < 0.0 || self.inversion_guidance < 0.0 {
            return Err(Error::invalid("guidance scales must be nonnegative"));
        }
        Ok(())
    }
}

/// Uniformly spaced sub-sampled timestep grid, ascending:
/// `grid[i] = floor(i * T / N)`.
pub fn timestep_grid(total_steps: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| i * total_steps / n).collect()
}

/// Options for a single prediction call.
#[derive(Default)]
pub struct PredictOptions<'a, 'b> {
    pub override_fn: Option<&'a mut OverrideFn<'b>>,
    pub record_taps: bool,
    pub branch_tags: Option<Vec<crate::attention::BranchTag>>,
}

pub struct Prediction {
    pub eps: Latent,
    pub taps: Option<TapRecord>,
}

/// A noise predictor. Conditioning is per batch element; `None` means the
/// unconditional (null-token) branch.
pub trait Denoiser {
    /// (channels, height, width) of a single latent.
    fn latent_dims(&self) -> (usize, usize, usize);

    fn predict_full(
        &self,
        z: &Latent,
        t: usize,
        cond: &[Option<&[TokenId]>],
        opts: PredictOptions<'_, '_>,
    ) -> Result<Prediction>;

    /// Convenience: uniform conditioning across the batch, no taps.
    fn predict(&self, z: &Latent, t: usize, tokens: Option<&[TokenId]>) -> Result<Latent> {
        let cond = vec![tokens; z.shape()[0]];
        Ok(self.predict_full(z, t, &cond, PredictOptions::default())?.eps)
    }

    /// Attention resolutions exposed to hooks; empty for oracle predictors.
    fn attention_resolutions(&self) -> Vec<(usize, usize)> {
        Vec::new()
    }
}

impl Denoiser for crate::model::ToyDenoiser {
    fn latent_dims(&self) -> (usize, usize, usize) {
        let c = self.config();
        (c.channels, c.image_size, c.image_size)
    }

    fn predict_full(
        &self,
        z: &Latent,
        t: usize,
        cond: &[Option<&[TokenId]>],
        opts: PredictOptions<'_, '_>,
    ) -> Result<Prediction> {
        let xs = crate::model::latent_to_samples(z);
        let prompts: Vec<crate::model::PaddedPrompt> =
            cond.iter().map(|c| self.pad_prompt(*c)).collect::<Result<_>>()?;
        let arts = self.forward_raw(
            &xs,
            &vec![t; xs.len()],
            &prompts,
            crate::model::net::ForwardOptions {
                record_taps: opts.record_taps,
                override_fn: opts.override_fn,
                branch_tags: opts.branch_tags,
            },
        )?;
        Ok(Prediction { eps: crate::model::samples_to_latent(&arts.eps), taps: arts.taps })
    }

    fn attention_resolutions(&self) -> Vec<(usize, usize)> {
        self.attention_resolutions()
    }
}

/// Affine guidance combination `eps_u + s * (eps_c - eps_u)`.
pub fn combine_guidance(eps_u: &Latent, eps_c: &Latent, s: f64) -> Latent {
    eps_u + &((eps_c - eps_u) * s)
}

/// Classifier-free guidance prediction. `s = 1` short-circuits to the
/// conditional pass and `s = 0` to the unconditional one.
pub fn cfg_predict<D: Denoiser + ?Sized>(
    denoiser: &D,
    z: &Latent,
    t: usize,
    tokens: Option<&[TokenId]>,
    s: f64,
) -> Result<Latent> {
    if s == 1.0 || tokens.is_none() {
        return denoiser.predict(z, t, tokens);
    }
    if s == 0.0 {
        return denoiser.predict(z, t, None);
    }
    let eps_c = denoiser.predict(z, t, tokens)?;
    let eps_u = denoiser.predict(z, t, None)?;
    Ok(combine_guidance(&eps_u, &eps_c, s))
}

/// One deterministic DDIM update between arbitrary schedule positions.
///
/// `t` and `t_prev` are schedule indices; `-1` denotes the clean-image
/// boundary where the cumulative alpha is exactly 1. Works in both the
/// denoising (`t_prev < t`) and inversion (`t_prev > t`) directions.
pub fn ddim_step(
    z_t: &Latent,
    eps: &Latent,
    t: i64,
    t_prev: i64,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    if z_t.dim() != eps.dim() {
        return Err(Error::invalid("ddim_step: prediction shape mismatch"));
    }
    if t_prev == t {
        return Ok(z_t.clone());
    }
    let alpha_t = sched.alpha_cum(t)?;
    if alpha_t <= 0.0 {
        return Err(Error::SingularSchedule(t.max(0) as usize));
    }
    let alpha_prev = sched.alpha_cum(t_prev)?;
    let pred_z0 = (z_t - &(eps * (1.0 - alpha_t).sqrt())) / alpha_t.sqrt();
    Ok(&pred_z0 * alpha_prev.sqrt() + eps * (1.0 - alpha_prev).sqrt())
}

/// Runs `config.steps` DDIM steps from noise to image, returning every
/// intermediate state (`trajectory[0]` is the input). The hook, when given,
/// fires at every self-attention layer of every forward pass.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    z_terminal: &Latent,
    tokens: Option<&[TokenId]>,
    config: &SamplerConfig,
    sched: &NoiseSchedule,
    mut hook: Option<&mut OverrideFn<'_>>,
) -> Result<Vec<Latent>> {
    config.validate(sched)?;
    let grid = timestep_grid(sched.total_steps(), config.steps);
    let mut traj = Vec::with_capacity(config.steps + 1);
    let mut z = z_terminal.clone();
    ensure_finite(&z, "sampler input")?;
    traj.push(z.clone());
    for i in (0..config.steps).rev() {
        let t = grid[i];
        let eps = predict_guided(denoiser, &z, t, tokens, config.guidance_scale, &mut hook)?;
        let t_prev = if i > 0 { grid[i - 1] as i64 } else { -1 };
        z = ddim_step(&z, &eps, t as i64, t_prev, sched)?;
        ensure_finite(&z, "sampler state")?;
        traj.push(z.clone());
    }
    Ok(traj)
}

/// DDIM inversion: runs the step grid in the increasing-noise direction,
/// returning the full trajectory (`trajectory[0]` is the clean image,
/// the last entry the terminal noise).
pub fn ddim_invert<D: Denoiser + ?Sized>(
    denoiser: &D,
    z0: &Latent,
    tokens: Option<&[TokenId]>,
    config: &SamplerConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    config.validate(sched)?;
    let grid = timestep_grid(sched.total_steps(), config.steps);
    let mut traj = Vec::with_capacity(config.steps + 1);
    let mut z = z0.clone();
    ensure_finite(&z, "inversion input")?;
    traj.push(z.clone());
    for i in 0..config.steps {
        let t = grid[i];
        let eps = cfg_predict(denoiser, &z, t, tokens, config.inversion_guidance)?;
        let t_from = if i == 0 { -1 } else { grid[i - 1] as i64 };
        z = ddim_step(&z, &eps, t_from, t as i64, sched)?;
        ensure_finite(&z, "inversion state")?;
        traj.push(z.clone());
    }
    Ok(traj)
}

fn predict_guided<D: Denoiser + ?Sized>(
    denoiser: &D,
    z: &Latent,
    t: usize,
    tokens: Option<&[TokenId]>,
    s: f64,
    hook: &mut Option<&mut OverrideFn<'_>>,
) -> Result<Latent> {
    let b = z.shape()[0];
    let run = |cond: Option<&[TokenId]>, hook: &mut Option<&mut OverrideFn<'_>>| -> Result<Latent> {
        let cond_vec = vec![cond; b];
        let opts = PredictOptions {
            override_fn: hook.as_deref_mut(),
            record_taps: false,
            branch_tags: None,
        };
        Ok(denoiser.predict_full(z, t, &cond_vec, opts)?.eps)
    };
    if s == 1.0 || tokens.is_none() {
        return run(tokens, hook);
    }
    if s == 0.0 {
        return run(None, hook);
    }
    let eps_c = run(tokens, hook)?;
    let eps_u = run(None, hook)?;
    Ok(combine_guidance(&eps_u, &eps_c, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_noise_schedule;
    use ndarray::Array4;

    /// Oracle that always predicts the same noise tensor.
    struct FixedEps(Latent);

    impl Denoiser for FixedEps {
        fn latent_dims(&self) -> (usize, usize, usize) {
            let (_, c, h, w) = self.0.dim();
            (c, h, w)
        }

        fn predict_full(
            &self,
            _z: &Latent,
            _t: usize,
            _cond: &[Option<&[TokenId]>],
            _opts: PredictOptions<'_, '_>,
        ) -> Result<Prediction> {
            Ok(Prediction { eps: self.0.clone(), taps: None })
        }
    }

    /// Oracle with distinct conditional/unconditional outputs.
    struct SplitEps {
        cond: f64,
        uncond: f64,
    }

    impl Denoiser for SplitEps {
        fn latent_dims(&self) -> (usize, usize, usize) {
            (1, 1, 1)
        }

        fn predict_full(
            &self,
            z: &Latent,
            _t: usize,
            cond: &[Option<&[TokenId]>],
            _opts: PredictOptions<'_, '_>,
        ) -> Result<Prediction> {
            let mut eps = Array4::zeros(z.dim());
            for (i, c) in cond.iter().enumerate() {
                let v = if c.is_some() { self.cond } else { self.uncond };
                eps.index_axis_mut(ndarray::Axis(0), i).fill(v);
            }
            Ok(Prediction { eps, taps: None })
        }
    }

    fn scalar(v: f64) -> Latent {
        Array4::from_elem((1, 1, 1, 1), v)
    }

    #[test]
    fn ddim_step_identity_and_hand_value() {
        // betas [0.19, 25/81 complement] give alphas_cum [0.81, 0.25]
        let beta_end = 1.0 - 0.25 / 0.81;
        let sched = make_noise_schedule(2, 0.19, beta_end).unwrap();
        assert!((sched.alpha_cum(0).unwrap() - 0.81).abs() < 1e-12);
        assert!((sched.alpha_cum(1).unwrap() - 0.25).abs() < 1e-12);

        let eps = scalar(2.0);

        // t_prev == t is the identity
        let z = scalar(2.2321);
        assert_eq!(ddim_step(&z, &eps, 0, 0, &sched).unwrap()[[0, 0, 0, 0]], 2.2321);

        // alpha_t = 0.25, alpha_prev = 0.81, pred_z0 = 1:
        // z_t = 0.5 + sqrt(0.75) * 2, output = 0.9 + sqrt(0.19) * 2
        let z = scalar(0.5 + 0.75f64.sqrt() * 2.0);
        let out = ddim_step(&z, &eps, 1, 0, &sched).unwrap();
        let expect = 0.9 + 0.19f64.sqrt() * 2.0;
        assert!((out[[0, 0, 0, 0]] - expect).abs() < 1e-9);
        assert!((expect - 1.7718).abs() < 1e-4);
    }

    #[test]
    fn ddim_step_recovers_z0_at_boundary() {
        // eps equal to the exact noise used in q_sample, stepping to alpha=1
        let sched = make_noise_schedule(1, 0.75, 0.75).unwrap();
        let z0 = scalar(1.0);
        let eps = scalar(2.0);
        let z_t = crate::schedule::q_sample(&z0, 0, &eps, &sched).unwrap();
        let back = ddim_step(&z_t, &eps, 0, -1, &sched).unwrap();
        assert!((back[[0, 0, 0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ddim_involution_with_fixed_eps_oracle() {
        let sched = make_noise_schedule(100, 1e-4, 0.02).unwrap();
        let eps = scalar(0.7);
        let z = scalar(1.3);
        for (t, t_prev) in [(90i64, 40i64), (40, 90), (5, -1), (-1, 99)] {
            let fwd = ddim_step(&z, &eps, t, t_prev, &sched).unwrap();
            let back = ddim_step(&fwd, &eps, t_prev, t, &sched).unwrap();
            assert!(
                (back[[0, 0, 0, 0]] - 1.3).abs() <= 1e-9,
                "involution failed at ({t}, {t_prev}): {}",
                back[[0, 0, 0, 0]]
            );
        }
    }

    #[test]
    fn cfg_affine_identity() {
        let d = SplitEps { cond: 0.6, uncond: 0.2 };
        let z = scalar(0.0);
        let toks: &[usize] = &[1, 2];
        let eps = cfg_predict(&d, &z, 0, Some(toks), 7.5).unwrap();
        assert!((eps[[0, 0, 0, 0]] - 3.2).abs() < 1e-12);
        let e1 = cfg_predict(&d, &z, 0, Some(toks), 1.0).unwrap();
        assert_eq!(e1[[0, 0, 0, 0]], 0.6);
        let e0 = cfg_predict(&d, &z, 0, Some(toks), 0.0).unwrap();
        assert_eq!(e0[[0, 0, 0, 0]], 0.2);

        // affine in s against direct two-pass computation
        for s in [0.3, 2.0, 7.5, 11.0] {
            let eps = cfg_predict(&d, &z, 0, Some(toks), s).unwrap();
            let direct = 0.2 + s * (0.6 - 0.2);
            assert!((eps[[0, 0, 0, 0]] - direct).abs() <= 1e-7);
        }
    }

    #[test]
    fn zero_step_trajectories_are_singletons() {
        let sched = make_noise_schedule(10, 1e-4, 0.02).unwrap();
        let d = FixedEps(scalar(0.1));
        let cfg = SamplerConfig { steps: 0, ..Default::default() };
        let z = scalar(0.5);
        let s = ddim_sample(&d, &z, None, &cfg, &sched, None).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0][[0, 0, 0, 0]], 0.5);
        let inv = ddim_invert(&d, &z, None, &cfg, &sched).unwrap();
        assert_eq!(inv.len(), 1);
    }

    #[test]
    fn invert_then_sample_is_exact_for_fixed_eps_oracle() {
        // with a state-independent eps, inversion and sampling are exact
        // mutual inverses on the same grid
        let sched = make_noise_schedule(50, 1e-4, 0.02).unwrap();
        let d = FixedEps(scalar(0.37));
        let cfg = SamplerConfig {
            steps: 10,
            guidance_scale: 1.0,
            inversion_guidance: 1.0,
            seed: 0,
        };
        let z0 = scalar(0.9);
        let traj = ddim_invert(&d, &z0, None, &cfg, &sched).unwrap();
        assert_eq!(traj.len(), 11);
        let back = ddim_sample(&d, traj.last().unwrap(), None, &cfg, &sched, None).unwrap();
        assert!((back.last().unwrap()[[0, 0, 0, 0]] - 0.9).abs() < 1e-9);
        // determinism: same call twice gives identical trajectories
        let traj2 = ddim_invert(&d, &z0, None, &cfg, &sched).unwrap();
        for (a, b) in traj.iter().zip(&traj2) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn timestep_grid_floor_mapping() {
        assert_eq!(timestep_grid(1000, 4), vec![0, 250, 500, 750]);
        assert_eq!(timestep_grid(10, 3), vec![0, 3, 6]);
        assert_eq!(timestep_grid(10, 10), (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn sampler_rejects_too_many_steps() {
        let sched = make_noise_schedule(10, 1e-4, 0.02).unwrap();
        let cfg = SamplerConfig { steps: 11, ..Default::default() };
        assert!(cfg.validate(&sched).is_err());
    }
}
