//! Task requests, plain-text task configs, and end-to-end execution of the
//! three customization tasks (generation, swapping, addition).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::control::{ControlSchedule, FusionOrder};
use crate::dataset::{ManifestEntry, TaskKind};
use crate::error::{Error, Result};
use crate::imageio::{image_to_latent, latent_to_image, load_png_rgb, save_png_rgb, RgbImage};
use crate::mask::{
    build_pyramid, dilate, load_region_file, save_mask_png, BinaryMask, DilationKernel,
    MaskPyramid,
};
use crate::metrics::{bg_mse, fg_hist_dist, EvalRow};
use crate::model::vocab::{TokenId, Vocab};
use crate::model::ToyDenoiser;
use crate::pipeline::{
    run_pipeline, BranchBundle, Execution, MaskSource, PipelineOptions, PipelineOutput,
};
use crate::sampler::{ddim_invert, Denoiser, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::segment::{segment_synthetic, ObjectQuery};
use crate::Latent;

/// Everything needed to run one customization task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRequest {
    pub task: TaskKind,
    pub id: String,
    pub subject_image: PathBuf,
    pub subject_query: String,
    pub subject_caption: Option<String>,
    pub condition_image: Option<PathBuf>,
    pub edit_query: Option<String>,
    pub condition_caption: Option<String>,
    pub region_file: Option<PathBuf>,
    pub prompt: Option<String>,
    pub schedule_preset: Option<String>,
    pub schedule: Option<ControlSchedule>,
    pub sampler: SamplerConfig,
    pub weights: PathBuf,
    pub out_dir: PathBuf,
    /// Compatibility switch for the printed-equation fusion term order.
    pub printed_fusion_order: bool,
}

impl TaskRequest {
    pub fn validate(&self) -> Result<()> {
        match self.task {
            TaskKind::Swapping => {
                if self.condition_image.is_none() || self.edit_query.is_none() {
                    return Err(Error::config(
                        "swapping requires a condition image and an edit query",
                    ));
                }
            }
            TaskKind::Addition => {
                if self.condition_image.is_none() || self.region_file.is_none() {
                    return Err(Error::config(
                        "addition requires a condition image and a region file",
                    ));
                }
            }
            TaskKind::Generation => {
                if self.prompt.is_none() {
                    return Err(Error::config("generation requires a text prompt"));
                }
            }
        }
        if self.schedule_preset.is_some() && self.schedule.is_some() {
            return Err(Error::config("preset and explicit schedule both given"));
        }
        Ok(())
    }

    /// Preset name or explicit fields; defaults to the task-appropriate
    /// preset when neither is given.
    pub fn resolve_schedule(&self) -> Result<ControlSchedule> {
        self.validate()?;
        if let Some(s) = self.schedule {
            return Ok(ControlSchedule { total_steps: self.sampler.steps, ..s });
        }
        let name = match &self.schedule_preset {
            Some(n) => n.clone(),
            None => match self.task {
                TaskKind::Generation => "gen-uniform".to_string(),
                _ => "swap-uniform".to_string(),
            },
        };
        ControlSchedule::preset(&name, self.sampler.steps)
            .ok_or_else(|| Error::config(format!("unknown schedule preset {name:?}")))
    }

    pub fn fusion_order(&self) -> FusionOrder {
        if self.printed_fusion_order {
            FusionOrder::ConditionInEditable
        } else {
            FusionOrder::SubjectInEditable
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "task",
    "id",
    "subject_image",
    "subject_query",
    "subject_caption",
    "condition_image",
    "edit_query",
    "condition_caption",
    "region_file",
    "prompt",
    "schedule_preset",
    "s_gi",
    "e_gi",
    "s_lq",
    "e_lq",
    "layer_gi",
    "layer_lq",
    "steps",
    "guidance",
    "inversion_guidance",
    "seed",
    "weights",
    "out_dir",
    "fusion_order",
];

/// Parses a plain-text `key=value` task config. Unknown keys are rejected;
/// a schedule preset conflicts with explicit schedule fields.
pub fn parse_task_config(text: &str) -> Result<TaskRequest> {
    let mut kv: BTreeMap<String, String> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("config line {line:?} is not key=value")))?;
        let k = k.trim().to_string();
        if !CONFIG_KEYS.contains(&k.as_str()) {
            return Err(Error::config(format!("unknown config key {k:?}")));
        }
        kv.insert(k, v.trim().to_string());
    }
    let req = |k: &str| {
        kv.get(k).cloned().ok_or_else(|| Error::config(format!("config missing required key {k}")))
    };
    let opt = |k: &str| kv.get(k).cloned();
    let parse_num = |k: &str, v: &str| -> Result<usize> {
        v.parse().map_err(|_| Error::config(format!("bad integer for {k}: {v:?}")))
    };
    let parse_f = |k: &str, v: &str| -> Result<f64> {
        v.parse().map_err(|_| Error::config(format!("bad number for {k}: {v:?}")))
    };

    let mut sampler = SamplerConfig::default();
    if let Some(v) = opt("steps") {
        sampler.steps = parse_num("steps", &v)?;
    }
    if let Some(v) = opt("guidance") {
        sampler.guidance_scale = parse_f("guidance", &v)?;
    }
    if let Some(v) = opt("inversion_guidance") {
        sampler.inversion_guidance = parse_f("inversion_guidance", &v)?;
    }
    if let Some(v) = opt("seed") {
        sampler.seed = v.parse().map_err(|_| Error::config(format!("bad seed {v:?}")))?;
    }

    let explicit_keys = ["s_gi", "e_gi", "s_lq", "e_lq", "layer_gi", "layer_lq"];
    let any_explicit = explicit_keys.iter().any(|k| kv.contains_key(*k));
    if any_explicit && kv.contains_key("schedule_preset") {
        return Err(Error::config("preset and explicit schedule both given"));
    }
    let schedule = if any_explicit {
        let get = |k: &str| -> Result<usize> {
            match kv.get(k) {
                Some(v) => parse_num(k, v),
                None => Err(Error::config(format!("explicit schedule missing {k}"))),
            }
        };
        let e_gi = get("e_gi")?;
        let s_lq = match kv.get("s_lq") {
            Some(v) => parse_num("s_lq", v)?,
            None => e_gi, // no-gap default
        };
        Some(ControlSchedule {
            s_gi: get("s_gi")?,
            e_gi,
            s_lq,
            e_lq: get("e_lq")?,
            layer_gi: match kv.get("layer_gi") {
                Some(v) => parse_num("layer_gi", v)?,
                None => 0,
            },
            layer_lq: get("layer_lq")?,
            total_steps: sampler.steps,
        })
    } else {
        None
    };

    let printed_fusion_order = match opt("fusion_order").as_deref() {
        None | Some("prose") => false,
        Some("printed") => true,
        Some(other) => {
            return Err(Error::config(format!(
                "fusion_order must be `prose` or `printed`, got {other:?}"
            )))
        }
    };

    let request = TaskRequest {
        task: TaskKind::parse(&req("task")?)?,
        id: opt("id").unwrap_or_else(|| "run".to_string()),
        subject_image: PathBuf::from(req("subject_image")?),
        subject_query: req("subject_query")?,
        subject_caption: opt("subject_caption"),
        condition_image: opt("condition_image").map(PathBuf::from),
        edit_query: opt("edit_query"),
        condition_caption: opt("condition_caption"),
        region_file: opt("region_file").map(PathBuf::from),
        prompt: opt("prompt"),
        schedule_preset: opt("schedule_preset"),
        schedule,
        sampler,
        weights: PathBuf::from(req("weights")?),
        out_dir: PathBuf::from(req("out_dir")?),
        printed_fusion_order,
    };
    request.validate()?;
    Ok(request)
}

/// Stable textual form: load(format(r)) == r.
pub fn format_task_config(r: &TaskRequest) -> String {
    let mut out = String::new();
    let mut push = |k: &str, v: String| out.push_str(&format!("{k}={v}\n"));
    push("task", r.task.name().to_string());
    push("id", r.id.clone());
    push("subject_image", r.subject_image.display().to_string());
    push("subject_query", r.subject_query.clone());
    if let Some(v) = &r.subject_caption {
        push("subject_caption", v.clone());
    }
    if let Some(v) = &r.condition_image {
        push("condition_image", v.display().to_string());
    }
    if let Some(v) = &r.edit_query {
        push("edit_query", v.clone());
    }
    if let Some(v) = &r.condition_caption {
        push("condition_caption", v.clone());
    }
    if let Some(v) = &r.region_file {
        push("region_file", v.display().to_string());
    }
    if let Some(v) = &r.prompt {
        push("prompt", v.clone());
    }
    if let Some(v) = &r.schedule_preset {
        push("schedule_preset", v.clone());
    }
    if let Some(s) = &r.schedule {
        push("s_gi", s.s_gi.to_string());
        push("e_gi", s.e_gi.to_string());
        push("s_lq", s.s_lq.to_string());
        push("e_lq", s.e_lq.to_string());
        push("layer_gi", s.layer_gi.to_string());
        push("layer_lq", s.layer_lq.to_string());
    }
    push("steps", r.sampler.steps.to_string());
    push("guidance", r.sampler.guidance_scale.to_string());
    push("inversion_guidance", r.sampler.inversion_guidance.to_string());
    push("seed", r.sampler.seed.to_string());
    push("weights", r.weights.display().to_string());
    push("out_dir", r.out_dir.display().to_string());
    if r.printed_fusion_order {
        push("fusion_order", "printed".to_string());
    }
    out
}

pub fn load_task_config(path: &Path) -> Result<TaskRequest> {
    parse_task_config(&std::fs::read_to_string(path)?)
}

pub fn save_task_config(r: &TaskRequest, path: &Path) -> Result<()> {
    std::fs::write(path, format_task_config(r))?;
    Ok(())
}

/// Inputs of an edit resolved to tensors and masks, independent of the
/// control schedule (so sweeps can reuse the expensive inversions).
pub struct PreparedEdit {
    pub id: String,
    pub subject_image: RgbImage,
    pub condition_image: RgbImage,
    pub subject_mask: BinaryMask,
    /// Pre-dilation editable mask (the localized object for swaps, the
    /// supplied region for additions).
    pub editable_core: BinaryMask,
    /// Dilated editable mask actually used by the fusion operations.
    pub editable_mask: BinaryMask,
    pub m_s: MaskPyramid,
    pub m_c: MaskPyramid,
    pub bundle: BranchBundle,
}

fn tokens_for(vocab: &Vocab, caption: &str) -> Result<Vec<TokenId>> {
    vocab.encode_phrase(caption)
}

fn default_subject_caption(query: &str) -> String {
    format!("{query} on white")
}

/// Loads, localizes, and inverts a swap/addition case.
#[allow(clippy::too_many_arguments)]
pub fn prepare_edit(
    denoiser: &ToyDenoiser,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    id: &str,
    subject_image_path: &Path,
    subject_query: &str,
    subject_caption: Option<&str>,
    condition_image_path: &Path,
    condition_caption: Option<&str>,
    edit: EditRegion<'_>,
) -> Result<PreparedEdit> {
    let vocab = Vocab;
    let subject_image = load_png_rgb(subject_image_path)?;
    let condition_image = load_png_rgb(condition_image_path)?;

    let squery = ObjectQuery::parse(subject_query)?;
    let subject_mask = segment_synthetic(&subject_image, &squery)?;

    let (editable_core, dilate_it) = match edit {
        EditRegion::Localize(query) => {
            let q = ObjectQuery::parse(query)?;
            (segment_synthetic(&condition_image, &q)?, true)
        }
        EditRegion::Region(path) => {
            let (_, h, w) = condition_image.dim();
            (load_region_file(path, w, h)?, false)
        }
        EditRegion::Mask(m) => (m.clone(), false),
    };
    // the paper's blending margin applies to localized objects; explicit
    // regions already delimit the editable area
    let editable_mask = if dilate_it {
        dilate(&editable_core, DilationKernel::default())
    } else {
        editable_core.clone()
    };

    let resolutions = denoiser.attention_resolutions();
    let m_s = build_pyramid(&subject_mask, &resolutions)?;
    let m_c = build_pyramid(&editable_mask, &resolutions)?;

    let sub_caption = subject_caption
        .map(|s| s.to_string())
        .unwrap_or_else(|| default_subject_caption(subject_query));
    let sub_tokens = tokens_for(&vocab, &sub_caption)?;
    let con_tokens = match condition_caption {
        Some(c) => Some(tokens_for(&vocab, c)?),
        None => None,
    };

    let sub_traj =
        ddim_invert(denoiser, &image_to_latent(&subject_image), Some(&sub_tokens), sampler, sched)?;
    let con_traj = ddim_invert(
        denoiser,
        &image_to_latent(&condition_image),
        con_tokens.as_deref(),
        sampler,
        sched,
    )?;

    let bundle = BranchBundle::from_inversions(
        sub_traj,
        con_traj,
        Some(sub_tokens),
        con_tokens,
        None,
    )?;

    Ok(PreparedEdit {
        id: id.to_string(),
        subject_image,
        condition_image,
        subject_mask,
        editable_core,
        editable_mask,
        m_s,
        m_c,
        bundle,
    })
}

pub enum EditRegion<'a> {
    /// Localize an object in the condition image by query.
    Localize(&'a str),
    /// Use a region file (inclusive pixel box).
    Region(&'a Path),
    /// Use a mask directly.
    Mask(&'a BinaryMask),
}

pub struct EditOutput {
    pub output: RgbImage,
    pub subject_recon: RgbImage,
    pub condition_recon: RgbImage,
    pub pipeline: PipelineOutput,
}

/// Runs a prepared edit under a given schedule. `editable_override`
/// substitutes the editable-mask pyramid (the full-regeneration baseline
/// passes an all-ones mask).
pub fn execute_edit(
    denoiser: &ToyDenoiser,
    sched: &NoiseSchedule,
    prepared: &PreparedEdit,
    schedule: &ControlSchedule,
    sampler: &SamplerConfig,
    fusion_order: FusionOrder,
    execution: Execution,
    allow_reverse: bool,
    editable_override: Option<&MaskPyramid>,
) -> Result<EditOutput> {
    let m_c = editable_override.unwrap_or(&prepared.m_c).clone();
    let masks = MaskSource::Static { m_s: prepared.m_s.clone(), m_c };
    let opts = PipelineOptions {
        schedule: *schedule,
        sampler: *sampler,
        fusion_order,
        execution,
        allow_reverse,
    };
    let out = run_pipeline(denoiser, &prepared.bundle, &masks, &opts, sched)?;
    Ok(EditOutput {
        output: latent_to_image(&out.target_final, 0),
        subject_recon: latent_to_image(&out.subject_final, 0),
        condition_recon: latent_to_image(&out.condition_final, 0),
        pipeline: out,
    })
}

pub struct GenerationOutput {
    pub output: RgbImage,
    pub subject_recon: RgbImage,
    pub condition_sample: RgbImage,
    pub final_mask: Option<BinaryMask>,
    pub pipeline: PipelineOutput,
}

/// Text-conditioned generation: the condition branch starts from seeded
/// Gaussian noise, the editable mask is re-extracted from cross-attention on
/// the prompt's shape token each step.
#[allow(clippy::too_many_arguments)]
pub fn execute_generation(
    denoiser: &ToyDenoiser,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    subject_image: &RgbImage,
    subject_mask: &BinaryMask,
    subject_caption: &str,
    prompt: &str,
    schedule: &ControlSchedule,
    fusion_order: FusionOrder,
) -> Result<GenerationOutput> {
    let vocab = Vocab;
    let sub_tokens = vocab.encode_phrase(subject_caption)?;
    let prompt_tokens = vocab.encode_phrase(prompt)?;

    // the designated token: the shape word of the prompt
    let token_index = prompt
        .split_whitespace()
        .position(|w| crate::scene::Shape::from_name(&w.to_lowercase()).is_some())
        .ok_or_else(|| Error::config(format!("prompt {prompt:?} names no shape")))?;

    let sub_traj = ddim_invert(
        denoiser,
        &image_to_latent(subject_image),
        Some(&sub_tokens),
        sampler,
        sched,
    )?;

    let dims = denoiser.latent_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
    let gaussian: Latent = ndarray::Array4::from_shape_simple_fn(
        (1, dims.0, dims.1, dims.2),
        || rand::Rng::sample::<f64, _>(&mut rng, StandardNormal),
    );

    let bundle =
        BranchBundle::text_mode(sub_traj, gaussian, Some(sub_tokens), prompt_tokens)?;

    let resolutions = denoiser.attention_resolutions();
    let m_s = build_pyramid(subject_mask, &resolutions)?;
    let (_, h, w) = subject_image.dim();
    let masks = MaskSource::Dynamic {
        m_s,
        token_index,
        threshold: 0.5,
        init_m_c: BinaryMask::filled(w, h, true)?,
    };
    let opts = PipelineOptions {
        schedule: *schedule,
        sampler: *sampler,
        fusion_order,
        execution: Execution::Batched,
        allow_reverse: false,
    };
    let out = run_pipeline(denoiser, &bundle, &masks, &opts, sched)?;
    Ok(GenerationOutput {
        output: latent_to_image(&out.target_final, 0),
        subject_recon: latent_to_image(&out.subject_final, 0),
        condition_sample: latent_to_image(&out.condition_final, 0),
        final_mask: out.dynamic_masks.last().cloned(),
        pipeline: out,
    })
}

pub struct TaskOutcome {
    pub output_path: PathBuf,
    pub row: EvalRow,
}

/// End-to-end task execution: localization, inversion, the controlled
/// pipeline, output files, and a self-contained metrics row (computed from
/// the masks the run itself derived).
pub fn run_task(
    request: &TaskRequest,
    denoiser: &ToyDenoiser,
    sched: &NoiseSchedule,
) -> Result<TaskOutcome> {
    request.validate()?;
    std::fs::create_dir_all(&request.out_dir)?;
    let schedule = request.resolve_schedule()?;
    let id = request.id.clone();
    let out_png = request.out_dir.join(format!("{id}_output.png"));

    let mut row = EvalRow {
        id: id.clone(),
        task: request.task.name().to_string(),
        variant: "clean".to_string(),
        bg_mse: None,
        fg_hist_subject: None,
        fg_hist_original: None,
        status: "ok".to_string(),
    };

    match request.task {
        TaskKind::Swapping | TaskKind::Addition => {
            let edit = match request.task {
                TaskKind::Swapping => EditRegion::Localize(request.edit_query.as_ref().unwrap()),
                _ => EditRegion::Region(request.region_file.as_ref().unwrap()),
            };
            let prepared = prepare_edit(
                denoiser,
                sched,
                &request.sampler,
                &id,
                &request.subject_image,
                &request.subject_query,
                request.subject_caption.as_deref(),
                request.condition_image.as_ref().unwrap(),
                request.condition_caption.as_deref(),
                edit,
            )?;
            let result = execute_edit(
                denoiser,
                sched,
                &prepared,
                &schedule,
                &request.sampler,
                request.fusion_order(),
                Execution::Batched,
                false,
                None,
            )?;
            save_png_rgb(&result.output, &out_png)?;
            save_png_rgb(
                &result.subject_recon,
                &request.out_dir.join(format!("{id}_subject_recon.png")),
            )?;
            save_png_rgb(
                &result.condition_recon,
                &request.out_dir.join(format!("{id}_condition_recon.png")),
            )?;
            save_mask_png(
                &prepared.editable_mask,
                &request.out_dir.join(format!("{id}_mc.png")),
            )?;

            let dilated = dilate(&prepared.editable_mask, DilationKernel::default());
            row.bg_mse = Some(bg_mse(&result.output, &prepared.condition_image, &dilated)?);
            row.fg_hist_subject = Some(fg_hist_dist(
                &result.output,
                &prepared.editable_core,
                &prepared.subject_image,
                &prepared.subject_mask,
            )?);
            if request.task == TaskKind::Swapping {
                row.fg_hist_original = Some(fg_hist_dist(
                    &result.output,
                    &prepared.editable_core,
                    &prepared.condition_image,
                    &prepared.editable_core,
                )?);
            }
        }
        TaskKind::Generation => {
            let subject_image = load_png_rgb(&request.subject_image)?;
            let squery = ObjectQuery::parse(&request.subject_query)?;
            let subject_mask = segment_synthetic(&subject_image, &squery)?;
            let caption = request
                .subject_caption
                .clone()
                .unwrap_or_else(|| default_subject_caption(&request.subject_query));
            let result = execute_generation(
                denoiser,
                sched,
                &request.sampler,
                &subject_image,
                &subject_mask,
                &caption,
                request.prompt.as_ref().unwrap(),
                &schedule,
                request.fusion_order(),
            )?;
            save_png_rgb(&result.output, &out_png)?;
            save_png_rgb(
                &result.subject_recon,
                &request.out_dir.join(format!("{id}_subject_recon.png")),
            )?;
            save_png_rgb(
                &result.condition_sample,
                &request.out_dir.join(format!("{id}_condition_recon.png")),
            )?;
            if let Some(m) = &result.final_mask {
                save_mask_png(&m.clone(), &request.out_dir.join(format!("{id}_mc.png")))?;
                if !m.is_empty() {
                    row.fg_hist_subject = Some(fg_hist_dist(
                        &result.output,
                        m,
                        &subject_image,
                        &subject_mask,
                    )?);
                }
            }
        }
    }

    Ok(TaskOutcome { output_path: out_png, row })
}

/// Converts a benchmark manifest entry into a runnable request.
pub fn request_from_manifest(
    entry: &ManifestEntry,
    weights: &Path,
    out_dir: &Path,
    sampler: SamplerConfig,
    preset: Option<String>,
) -> TaskRequest {
    TaskRequest {
        task: entry.task,
        id: entry.id.clone(),
        subject_image: entry.subject_image.clone(),
        subject_query: entry.subject_query.clone(),
        subject_caption: Some(entry.subject_caption.clone()),
        condition_image: entry.condition_image.clone(),
        edit_query: entry.edit_query.clone(),
        condition_caption: entry.condition_caption.clone(),
        region_file: entry.region_file.clone(),
        prompt: entry.prompt.clone(),
        schedule_preset: if entry.schedule_override.is_some() { None } else { preset },
        schedule: entry.schedule_override,
        sampler,
        weights: weights.to_path_buf(),
        out_dir: out_dir.to_path_buf(),
        printed_fusion_order: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_swap_config() -> String {
        [
            "task=swapping",
            "subject_image=subject.png",
            "subject_query=red circle",
            "condition_image=cond.png",
            "edit_query=blue square",
            "weights=w.bin",
            "out_dir=out",
        ]
        .join("\n")
    }

    #[test]
    fn minimal_swap_config_round_trips() {
        let req = parse_task_config(&minimal_swap_config()).unwrap();
        assert_eq!(req.task, TaskKind::Swapping);
        assert_eq!(req.sampler.steps, 50);
        assert_eq!(req.sampler.guidance_scale, 7.5);
        let text = format_task_config(&req);
        let again = parse_task_config(&text).unwrap();
        assert_eq!(req, again);
        // formatting is stable
        assert_eq!(format_task_config(&again), text);
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let cfg = format!("{}\nfoo=1", minimal_swap_config());
        let err = parse_task_config(&cfg).unwrap_err();
        assert!(err.to_string().contains("foo"), "{err}");
    }

    #[test]
    fn preset_conflicts_with_explicit_schedule() {
        let cfg = format!("{}\nschedule_preset=swap-uniform\ns_gi=0", minimal_swap_config());
        let err = parse_task_config(&cfg).unwrap_err();
        assert!(err.to_string().contains("preset and explicit schedule"), "{err}");
    }

    #[test]
    fn task_field_requirements() {
        let cfg = "task=generation\nsubject_image=s.png\nsubject_query=red circle\nweights=w\nout_dir=o";
        assert!(parse_task_config(cfg).is_err(), "generation without prompt");

        let cfg = "task=swapping\nsubject_image=s.png\nsubject_query=red circle\nweights=w\nout_dir=o";
        assert!(parse_task_config(cfg).is_err(), "swap without condition");
    }

    #[test]
    fn explicit_schedule_infers_no_gap() {
        let cfg = format!(
            "{}\ns_gi=0\ne_gi=10\ne_lq=20\nlayer_lq=8",
            minimal_swap_config()
        );
        let req = parse_task_config(&cfg).unwrap();
        let s = req.schedule.unwrap();
        assert_eq!(s.s_lq, 10);
    }

    #[test]
    fn default_presets_per_task() {
        let req = parse_task_config(&minimal_swap_config()).unwrap();
        let s = req.resolve_schedule().unwrap();
        assert_eq!((s.s_gi, s.e_gi, s.s_lq, s.e_lq), (0, 20, 20, 48));
        assert_eq!(s.layer_lq, 8);
    }
}
