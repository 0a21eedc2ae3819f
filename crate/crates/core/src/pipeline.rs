//! The three-branch customization pipeline.
//!
//! Subject, condition, and target trajectories denoise in lockstep as one
//! batched forward pass of width 3 (batch order: subject, condition,
//! target). At every self-attention layer the dispatcher picks what happens
//! to the target's attention output: global injection replaces it with the
//! masked fusion of the source branches' own self-attention, local query
//! re-routes the target's queries onto source keys/values, and otherwise the
//! layer runs untouched. Subject and condition branches always run their
//! plain reconstruction attention; their taps are read-only.
//!
//! A coordinated sequential reference (three width-1 forwards per pass,
//! exchanging recorded triplets) exists to pin down the batched packing.

use ndarray::Array4;

use crate::attention::{AttentionTriplet, BranchTag, FeatureMap};
use crate::control::{
    edit_dispatch, global_inject_fuse, local_query_fuse, validate_schedule, ControlSchedule,
    EditDecision, FusionOrder,
};
use crate::error::{Error, Result};
use crate::mask::{build_pyramid, extract_cross_attention_mask, BinaryMask, MaskPyramid};
use crate::model::vocab::TokenId;
use crate::model::{AttnSite, TapRecord};
use crate::sampler::{combine_guidance, ddim_step, timestep_grid, Denoiser, PredictOptions, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::{ensure_finite, Latent};

/// The three coordinated trajectories and their conditioning.
#[derive(Debug, Clone)]
pub struct BranchBundle {
    /// Inversion trajectory of the subject image (clean image first).
    pub subject_trajectory: Vec<Latent>,
    /// Inversion trajectory of the condition image, or the sampled Gaussian
    /// start as a single element in text mode.
    pub condition_trajectory: Vec<Latent>,
    pub subject_tokens: Option<Vec<TokenId>>,
    pub condition_tokens: Option<Vec<TokenId>>,
    pub target_tokens: Option<Vec<TokenId>>,
}

impl BranchBundle {
    /// Image-condition bundle. The target shares the condition's terminal
    /// noise; its tokens default to the condition's.
    pub fn from_inversions(
        subject_trajectory: Vec<Latent>,
        condition_trajectory: Vec<Latent>,
        subject_tokens: Option<Vec<TokenId>>,
        condition_tokens: Option<Vec<TokenId>>,
        target_tokens: Option<Vec<TokenId>>,
    ) -> Result<BranchBundle> {
        if subject_trajectory.is_empty() || condition_trajectory.is_empty() {
            return Err(Error::invalid("bundle trajectories must be nonempty"));
        }
        let b = BranchBundle {
            subject_trajectory,
            condition_trajectory,
            subject_tokens,
            target_tokens: target_tokens.or_else(|| condition_tokens.clone()),
            condition_tokens,
        };
        b.validate()?;
        Ok(b)
    }

    /// Text-condition bundle: the condition branch starts from Gaussian
    /// noise and both condition and target use the text prompt.
    pub fn text_mode(
        subject_trajectory: Vec<Latent>,
        gaussian_start: Latent,
        subject_tokens: Option<Vec<TokenId>>,
        prompt: Vec<TokenId>,
    ) -> Result<BranchBundle> {
        let b = BranchBundle {
            subject_trajectory,
            condition_trajectory: vec![gaussian_start],
            subject_tokens,
            condition_tokens: Some(prompt.clone()),
            target_tokens: Some(prompt),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn subject_terminal(&self) -> &Latent {
        self.subject_trajectory.last().expect("nonempty trajectory")
    }

    pub fn condition_terminal(&self) -> &Latent {
        self.condition_trajectory.last().expect("nonempty trajectory")
    }

    /// The target's initial state: the condition branch's terminal noise.
    pub fn target_initial(&self) -> &Latent {
        self.condition_terminal()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.subject_terminal().dim();
        let c = self.condition_terminal().dim();
        if s != c {
            return Err(Error::invalid(format!(
                "branch shapes differ: subject {s:?}, condition {c:?}"
            )));
        }
        if s.0 != 1 {
            return Err(Error::invalid("branch latents must have batch width 1"));
        }
        Ok(())
    }
}

/// Masks driving the fusion operations.
#[derive(Debug, Clone)]
pub enum MaskSource {
    /// Fixed subject and editable-region pyramids (image-condition tasks).
    Static { m_s: MaskPyramid, m_c: MaskPyramid },
    /// Text mode: the editable mask is re-extracted each step from the
    /// condition branch's cross-attention at `token_index`, starting from
    /// `init_m_c` (at base resolution) on the first step.
    Dynamic { m_s: MaskPyramid, token_index: usize, threshold: f32, init_m_c: BinaryMask },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Execution {
    /// One forward of width 3 per pass.
    Batched,
    /// Reference path: three coordinated width-1 forwards per pass.
    Sequential,
}

#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub schedule: ControlSchedule,
    pub sampler: SamplerConfig,
    pub fusion_order: FusionOrder,
    pub execution: Execution,
    /// Accept schedules in the reversed (query before injection) layout.
    pub allow_reverse: bool,
}

pub struct PipelineOutput {
    pub subject_final: Latent,
    pub condition_final: Latent,
    pub target_final: Latent,
    pub subject_trajectory: Vec<Latent>,
    pub condition_trajectory: Vec<Latent>,
    pub target_trajectory: Vec<Latent>,
    /// Per-step editable masks in text mode (base resolution).
    pub dynamic_masks: Vec<BinaryMask>,
}

fn stack3(a: &Latent, b: &Latent, c: &Latent) -> Latent {
    let (_, ch, h, w) = a.dim();
    let mut out = Array4::zeros((3, ch, h, w));
    for (i, src) in [a, b, c].iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&src.index_axis(ndarray::Axis(0), 0));
    }
    out
}

fn row(z: &Latent, i: usize) -> Latent {
    let (_, ch, h, w) = z.dim();
    let mut out = Array4::zeros((1, ch, h, w));
    out.index_axis_mut(ndarray::Axis(0), 0)
        .assign(&z.index_axis(ndarray::Axis(0), i));
    out
}

struct StepMasks<'m> {
    m_s: &'m MaskPyramid,
    m_c: &'m MaskPyramid,
}

fn fuse_for_site(
    site: &AttnSite,
    step: usize,
    schedule: &ControlSchedule,
    masks: &StepMasks<'_>,
    order: FusionOrder,
    subject: &AttentionTriplet,
    condition: &AttentionTriplet,
    target: &AttentionTriplet,
) -> Result<Option<FeatureMap>> {
    let decision = edit_dispatch(step, site.dispatch_index, schedule);
    if decision == EditDecision::Standard {
        return Ok(None);
    }
    let (h, w) = site.resolution;
    let missing = |name: &str| {
        Error::config(format!("{name} mask pyramid is missing resolution {h}x{w}"))
    };
    let m_s = masks.m_s.level(h, w).ok_or_else(|| missing("subject"))?;
    let m_c = masks.m_c.level(h, w).ok_or_else(|| missing("editable"))?;
    let fused = match decision {
        EditDecision::GlobalInject => {
            global_inject_fuse(subject, condition, m_s.bits(), m_c.bits(), order)?
        }
        EditDecision::LocalQuery => {
            local_query_fuse(target, subject, condition, m_s.bits(), m_c.bits(), order)?
        }
        EditDecision::Standard => unreachable!(),
    };
    Ok(Some(fused))
}

/// Checks that both pyramids cover every attention resolution of the model.
fn check_pyramids<D: Denoiser + ?Sized>(
    denoiser: &D,
    m_s: &MaskPyramid,
    m_c: &MaskPyramid,
) -> Result<()> {
    for (h, w) in denoiser.attention_resolutions() {
        if m_s.level(h, w).is_none() {
            return Err(Error::config(format!("subject mask pyramid missing {h}x{w}")));
        }
        if m_c.level(h, w).is_none() {
            return Err(Error::config(format!("editable mask pyramid missing {h}x{w}")));
        }
    }
    Ok(())
}

/// Rebuilds the editable mask from the condition branch's recorded
/// cross-attention: decoder layers at the finest attention resolution.
fn refresh_dynamic_mask<D: Denoiser + ?Sized>(
    denoiser: &D,
    taps: &TapRecord,
    condition_batch_index: usize,
    token_index: usize,
    threshold: f32,
    base_size: (usize, usize),
) -> Result<Option<BinaryMask>> {
    let finest = *denoiser
        .attention_resolutions()
        .last()
        .ok_or_else(|| Error::config("denoiser exposes no attention resolutions"))?;
    let maps = taps.cross_maps_for(condition_batch_index, Some(finest), true);
    if maps.is_empty() {
        return Ok(None);
    }
    let coarse = extract_cross_attention_mask(&maps, token_index, threshold)?;
    let factor = base_size.0 / coarse.height();
    Ok(Some(coarse.upsample(factor)?))
}

/// Runs the three branches in lockstep and returns all final states.
pub fn run_pipeline<D: Denoiser + ?Sized>(
    denoiser: &D,
    bundle: &BranchBundle,
    masks: &MaskSource,
    opts: &PipelineOptions,
    sched: &NoiseSchedule,
) -> Result<PipelineOutput> {
    bundle.validate()?;
    opts.sampler.validate(sched)?;
    let violations = validate_schedule(&opts.schedule);
    if !violations.is_empty() {
        let reversed_ok =
            opts.allow_reverse && crate::control::validate_schedule_reversed(&opts.schedule).is_empty();
        if !reversed_ok {
            let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::config(format!("invalid control schedule: {}", msgs.join("; "))));
        }
    }
    if opts.schedule.total_steps != opts.sampler.steps {
        return Err(Error::config(format!(
            "schedule is defined over {} steps but the sampler runs {}",
            opts.schedule.total_steps, opts.sampler.steps
        )));
    }

    // static masks must cover every attention resolution up front
    let (mut m_c_dynamic, m_s_static, threshold, token_index) = match masks {
        MaskSource::Static { m_s, m_c } => {
            check_pyramids(denoiser, m_s, m_c)?;
            (None, m_s.clone(), 0.0, 0)
        }
        MaskSource::Dynamic { m_s, token_index, threshold, init_m_c } => {
            let pyramid = build_pyramid(init_m_c, &denoiser.attention_resolutions())?;
            check_pyramids(denoiser, m_s, &pyramid)?;
            (Some(pyramid), m_s.clone(), *threshold, *token_index)
        }
    };
    let dynamic = m_c_dynamic.is_some();

    let (_, _, hh, _) = bundle.subject_terminal().dim();
    let n = opts.sampler.steps;
    let grid = timestep_grid(sched.total_steps(), n);
    let guidance = opts.sampler.guidance_scale;

    let mut z_sub = bundle.subject_terminal().clone();
    let mut z_con = bundle.condition_terminal().clone();
    let mut z_tgt = bundle.target_initial().clone();

    let mut sub_traj = vec![z_sub.clone()];
    let mut con_traj = vec![z_con.clone()];
    let mut tgt_traj = vec![z_tgt.clone()];
    let mut dynamic_masks = Vec::new();

    let cond_tokens: [Option<&[TokenId]>; 3] = [
        bundle.subject_tokens.as_deref(),
        bundle.condition_tokens.as_deref(),
        bundle.target_tokens.as_deref(),
    ];
    let null_tokens: [Option<&[TokenId]>; 3] = [None, None, None];

    for step in 0..n {
        let i = n - 1 - step;
        let t = grid[i];

        let m_c_pyr: &MaskPyramid = match (&m_c_dynamic, masks) {
            (Some(p), _) => p,
            (None, MaskSource::Static { m_c, .. }) => m_c,
            _ => unreachable!(),
        };
        let step_masks = StepMasks { m_s: &m_s_static, m_c: m_c_pyr };
        if dynamic {
            dynamic_masks.push(m_c_pyr.base().clone());
        }

        let (eps3, cond_taps) = match opts.execution {
            Execution::Batched => batched_pass(
                denoiser,
                &stack3(&z_sub, &z_con, &z_tgt),
                t,
                step,
                &cond_tokens,
                &null_tokens,
                guidance,
                &opts.schedule,
                &step_masks,
                opts.fusion_order,
                dynamic,
            )?,
            Execution::Sequential => sequential_pass(
                denoiser,
                [&z_sub, &z_con, &z_tgt],
                t,
                step,
                &cond_tokens,
                guidance,
                &opts.schedule,
                &step_masks,
                opts.fusion_order,
                dynamic,
            )?,
        };

        let t_prev = if i > 0 { grid[i - 1] as i64 } else { -1 };
        let znext = ddim_step(&stack3(&z_sub, &z_con, &z_tgt), &eps3, t as i64, t_prev, sched)?;
        ensure_finite(&znext, "pipeline state")?;
        z_sub = row(&znext, 0);
        z_con = row(&znext, 1);
        z_tgt = row(&znext, 2);
        sub_traj.push(z_sub.clone());
        con_traj.push(z_con.clone());
        tgt_traj.push(z_tgt.clone());

        if dynamic {
            if let Some(taps) = &cond_taps {
                let cond_idx = match opts.execution {
                    Execution::Batched => 1,
                    Execution::Sequential => 0,
                };
                if let Some(next) =
                    refresh_dynamic_mask(denoiser, taps, cond_idx, token_index, threshold, (hh, hh))?
                {
                    m_c_dynamic =
                        Some(build_pyramid(&next, &denoiser.attention_resolutions())?);
                }
            }
        }
    }

    Ok(PipelineOutput {
        subject_final: z_sub,
        condition_final: z_con,
        target_final: z_tgt,
        subject_trajectory: sub_traj,
        condition_trajectory: con_traj,
        target_trajectory: tgt_traj,
        dynamic_masks,
    })
}

/// One denoising step's prediction via a single width-3 forward per
/// guidance pass. Returns the guided eps batch and (when requested) the
/// conditional pass's taps for dynamic mask refresh.
#[allow(clippy::too_many_arguments)]
fn batched_pass<D: Denoiser + ?Sized>(
    denoiser: &D,
    z3: &Latent,
    t: usize,
    step: usize,
    cond_tokens: &[Option<&[TokenId]>; 3],
    null_tokens: &[Option<&[TokenId]>; 3],
    guidance: f64,
    schedule: &ControlSchedule,
    masks: &StepMasks<'_>,
    order: FusionOrder,
    record_taps: bool,
) -> Result<(Latent, Option<TapRecord>)> {
    let run = |tokens: &[Option<&[TokenId]>; 3], taps: bool| -> Result<(Latent, Option<TapRecord>)> {
        let mut ov = |site: &AttnSite,
                      triplets: &[AttentionTriplet],
                      defaults: &[FeatureMap]|
         -> Result<Option<Vec<FeatureMap>>> {
            if triplets.len() != 3 {
                return Err(Error::ContractViolation(format!(
                    "pipeline override expects width 3, got {}",
                    triplets.len()
                )));
            }
            match fuse_for_site(
                site, step, schedule, masks, order, &triplets[0], &triplets[1], &triplets[2],
            )? {
                None => Ok(None),
                Some(fused) => {
                    let mut out = defaults.to_vec();
                    out[2] = fused;
                    Ok(Some(out))
                }
            }
        };
        let pred = denoiser.predict_full(
            z3,
            t,
            tokens,
            PredictOptions {
                override_fn: Some(&mut ov),
                record_taps: taps,
                branch_tags: Some(vec![BranchTag::Subject, BranchTag::Condition, BranchTag::Target]),
            },
        )?;
        Ok((pred.eps, pred.taps))
    };

    let (eps_c, taps) = run(cond_tokens, record_taps)?;
    if guidance == 1.0 {
        return Ok((eps_c, taps));
    }
    let (eps_u, _) = run(null_tokens, false)?;
    Ok((combine_guidance(&eps_u, &eps_c, guidance), taps))
}

/// Reference implementation: subject and condition run as width-1 forwards
/// with recorded taps; the target runs afterwards with an override that
/// consumes those recordings. Numerically this must match the batched pass.
#[allow(clippy::too_many_arguments)]
fn sequential_pass<D: Denoiser + ?Sized>(
    denoiser: &D,
    zs: [&Latent; 3],
    t: usize,
    step: usize,
    cond_tokens: &[Option<&[TokenId]>; 3],
    guidance: f64,
    schedule: &ControlSchedule,
    masks: &StepMasks<'_>,
    order: FusionOrder,
    want_cond_taps: bool,
) -> Result<(Latent, Option<TapRecord>)> {
    let run = |tokens: [Option<&[TokenId]>; 3],
               keep_taps: bool|
     -> Result<(Latent, Option<TapRecord>)> {
        let sub = denoiser.predict_full(
            zs[0],
            t,
            &tokens[0..1],
            PredictOptions {
                record_taps: true,
                branch_tags: Some(vec![BranchTag::Subject]),
                ..Default::default()
            },
        )?;
        let con = denoiser.predict_full(
            zs[1],
            t,
            &tokens[1..2],
            PredictOptions {
                record_taps: true,
                branch_tags: Some(vec![BranchTag::Condition]),
                ..Default::default()
            },
        )?;
        let sub_taps = sub.taps.as_ref().expect("taps recorded");
        let con_taps = con.taps.as_ref().expect("taps recorded");

        let mut ov = |site: &AttnSite,
                      triplets: &[AttentionTriplet],
                      defaults: &[FeatureMap]|
         -> Result<Option<Vec<FeatureMap>>> {
            let sub_trip = &sub_taps.self_attention[site.layer][0];
            let con_trip = &con_taps.self_attention[site.layer][0];
            match fuse_for_site(
                site, step, schedule, masks, order, sub_trip, con_trip, &triplets[0],
            )? {
                None => Ok(None),
                Some(fused) => {
                    let mut out = defaults.to_vec();
                    out[0] = fused;
                    Ok(Some(out))
                }
            }
        };
        let tgt = denoiser.predict_full(
            zs[2],
            t,
            &tokens[2..3],
            PredictOptions {
                override_fn: Some(&mut ov),
                record_taps: false,
                branch_tags: Some(vec![BranchTag::Target]),
            },
        )?;

        let (_, c, h, w) = zs[0].dim();
        let mut eps3 = Array4::zeros((3, c, h, w));
        for (i, e) in [&sub.eps, &con.eps, &tgt.eps].iter().enumerate() {
            eps3.index_axis_mut(ndarray::Axis(0), i)
                .assign(&e.index_axis(ndarray::Axis(0), 0));
        }
        Ok((eps3, if keep_taps { con.taps } else { None }))
    };

    let (eps_c, taps) = run(*cond_tokens, want_cond_taps)?;
    if guidance == 1.0 {
        return Ok((eps_c, taps));
    }
    let (eps_u, _) = run([None, None, None], false)?;
    Ok((combine_guidance(&eps_u, &eps_c, guidance), taps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::BinaryMask;
    use crate::model::{ModelConfig, ToyDenoiser};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_model() -> ToyDenoiser {
        let cfg = ModelConfig {
            image_size: 8,
            c0: 4,
            c1: 6,
            c2: 8,
            heads: 2,
            head_dim: 4,
            time_dim: 8,
            ..ModelConfig::default()
        };
        let mut model = ToyDenoiser::new(cfg, 3).unwrap();
        // give the zero-initialized projections life so branches interact
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut segs: Vec<crate::model::params::Seg> =
            (0..crate::model::ATTN_LAYERS).map(|i| model.handles().attn[i].wo.w).collect();
        segs.push(model.handles().head.w);
        for seg in segs {
            for v in seg.slice_mut(model.weights_mut()) {
                *v = rng.random_range(-0.2f32..0.2);
            }
        }
        model
    }

    fn rand_latent(rng: &mut ChaCha8Rng) -> Latent {
        Array4::from_shape_simple_fn((1, 3, 8, 8), || rng.random_range(-1.0f64..1.0))
    }

    fn masks_for(model: &ToyDenoiser, m_s: BinaryMask, m_c: BinaryMask) -> MaskSource {
        let res = model.attention_resolutions();
        MaskSource::Static {
            m_s: build_pyramid(&m_s, &res).unwrap(),
            m_c: build_pyramid(&m_c, &res).unwrap(),
        }
    }

    fn base_opts(schedule: ControlSchedule) -> PipelineOptions {
        PipelineOptions {
            schedule,
            sampler: SamplerConfig {
                steps: 6,
                guidance_scale: 2.0,
                inversion_guidance: 1.0,
                seed: 0,
            },
            fusion_order: FusionOrder::default(),
            execution: Execution::Batched,
            allow_reverse: false,
        }
    }

    fn bundle(rng: &mut ChaCha8Rng) -> BranchBundle {
        BranchBundle::from_inversions(
            vec![rand_latent(rng)],
            vec![rand_latent(rng)],
            Some(vec![2, 8]),
            Some(vec![3, 9]),
            None,
        )
        .unwrap()
    }

    #[test]
    fn disabled_schedule_makes_target_equal_condition() {
        let model = small_model();
        let sched = crate::schedule::make_noise_schedule(60, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = bundle(&mut rng);
        let masks = masks_for(
            &model,
            BinaryMask::filled(8, 8, true).unwrap(),
            BinaryMask::from_fn(8, 8, |x, _| x < 4).unwrap(),
        );
        let opts = base_opts(ControlSchedule::disabled(6));
        let out = run_pipeline(&model, &b, &masks, &opts, &sched).unwrap();
        let max_diff = out
            .target_final
            .iter()
            .zip(out.condition_final.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn batched_and_sequential_agree() {
        let model = small_model();
        let sched = crate::schedule::make_noise_schedule(60, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = bundle(&mut rng);
        let masks = masks_for(
            &model,
            BinaryMask::from_fn(8, 8, |x, y| x + y < 10).unwrap(),
            BinaryMask::from_fn(8, 8, |x, y| (x / 2 + y / 2) % 2 == 0).unwrap(),
        );
        // schedule exercising both operations
        let schedule = ControlSchedule {
            s_gi: 0,
            e_gi: 3,
            s_lq: 3,
            e_lq: 6,
            layer_gi: 0,
            layer_lq: 8,
            total_steps: 6,
        };
        let mut opts = base_opts(schedule);
        let batched = run_pipeline(&model, &b, &masks, &opts, &sched).unwrap();
        opts.execution = Execution::Sequential;
        let sequential = run_pipeline(&model, &b, &masks, &opts, &sched).unwrap();
        let max_diff = batched
            .target_final
            .iter()
            .zip(sequential.target_final.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-5, "packing mismatch {max_diff}");
    }

    #[test]
    fn missing_pyramid_level_is_config_error() {
        let model = small_model();
        let sched = crate::schedule::make_noise_schedule(60, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = bundle(&mut rng);
        // pyramid only has the coarse level
        let m = BinaryMask::filled(8, 8, true).unwrap();
        let masks = MaskSource::Static {
            m_s: build_pyramid(&m, &[(2, 2)]).unwrap(),
            m_c: build_pyramid(&m, &[(2, 2)]).unwrap(),
        };
        let opts = base_opts(ControlSchedule::disabled(6));
        let err = run_pipeline(&model, &b, &masks, &opts, &sched);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn invalid_schedule_rejected_and_reverse_opt_in() {
        let model = small_model();
        let sched = crate::schedule::make_noise_schedule(60, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = bundle(&mut rng);
        let masks = masks_for(
            &model,
            BinaryMask::filled(8, 8, true).unwrap(),
            BinaryMask::filled(8, 8, false).unwrap(),
        );
        let reversed = ControlSchedule {
            s_gi: 3,
            e_gi: 6,
            s_lq: 0,
            e_lq: 3,
            layer_gi: 0,
            layer_lq: 0,
            total_steps: 6,
        };
        let mut opts = base_opts(reversed);
        assert!(matches!(
            run_pipeline(&model, &b, &masks, &opts, &sched),
            Err(Error::Config(_))
        ));
        opts.allow_reverse = true;
        run_pipeline(&model, &b, &masks, &opts, &sched).unwrap();
    }

    #[test]
    fn full_background_injection_reproduces_condition() {
        let model = small_model();
        let sched = crate::schedule::make_noise_schedule(60, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let b = bundle(&mut rng);
        // M_C all zeros, injection at every step and layer
        let masks = masks_for(
            &model,
            BinaryMask::filled(8, 8, true).unwrap(),
            BinaryMask::filled(8, 8, false).unwrap(),
        );
        let schedule = ControlSchedule {
            s_gi: 0,
            e_gi: 6,
            s_lq: 6,
            e_lq: 6,
            layer_gi: 0,
            layer_lq: 0,
            total_steps: 6,
        };
        let out = run_pipeline(&model, &b, &masks, &base_opts(schedule), &sched).unwrap();
        let max_diff = out
            .target_final
            .iter()
            .zip(out.condition_final.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-5, "max diff {max_diff}");
    }
}
