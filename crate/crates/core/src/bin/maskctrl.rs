//! Command-line surface for the customization engine.
//!
//! Exit codes: 0 success, 2 configuration error, 3 subject localization
//! failure, 4 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use maskctrl::control::{validate_schedule, ControlSchedule};
use maskctrl::dataset::{
    make_benchmark, make_training_dataset, read_manifest, write_benchmark, BenchmarkConfig,
    TaskKind,
};
use maskctrl::error::{Error, Result};
use maskctrl::imageio::{load_png_rgb, save_png_rgb};
use maskctrl::metrics::eval_benchmark;
use maskctrl::model::vocab::Vocab;
use maskctrl::model::ToyDenoiser;
use maskctrl::sampler::{ddim_invert, SamplerConfig};
use maskctrl::schedule::{make_noise_schedule, NoiseSchedule};
use maskctrl::sweep::{prepare_swap_cases, run_sweep, SweepGrid};
use maskctrl::task::{load_task_config, request_from_manifest, run_task, TaskRequest};
use maskctrl::train::{train_toy_denoiser, TrainConfig};

#[derive(Parser)]
#[command(name = "maskctrl", version, about = "Subject customization on a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SamplerArgs {
    /// Denoising step count.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    /// Classifier-free guidance scale.
    #[arg(long, default_value_t = 7.5)]
    guidance: f64,
    /// Guidance used during inversion.
    #[arg(long, default_value_t = 1.0)]
    inversion_guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            guidance_scale: self.guidance,
            inversion_guidance: self.inversion_guidance,
            seed: self.seed,
        }
    }
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    /// Named schedule preset: swap-uniform or gen-uniform.
    #[arg(long)]
    schedule_preset: Option<String>,
    #[arg(long)]
    s_gi: Option<usize>,
    #[arg(long)]
    e_gi: Option<usize>,
    #[arg(long)]
    s_lq: Option<usize>,
    #[arg(long)]
    e_lq: Option<usize>,
    #[arg(long)]
    layer_gi: Option<usize>,
    #[arg(long)]
    layer_lq: Option<usize>,
}

impl ScheduleArgs {
    fn explicit(&self, total_steps: usize) -> Result<Option<ControlSchedule>> {
        let any = self.s_gi.is_some()
            || self.e_gi.is_some()
            || self.s_lq.is_some()
            || self.e_lq.is_some()
            || self.layer_gi.is_some()
            || self.layer_lq.is_some();
        if !any {
            return Ok(None);
        }
        if self.schedule_preset.is_some() {
            return Err(Error::config("preset and explicit schedule both given"));
        }
        let e_gi = self.e_gi.ok_or_else(|| Error::config("explicit schedule missing --e-gi"))?;
        Ok(Some(ControlSchedule {
            s_gi: self.s_gi.unwrap_or(0),
            e_gi,
            s_lq: self.s_lq.unwrap_or(e_gi),
            e_lq: self.e_lq.ok_or_else(|| Error::config("explicit schedule missing --e-lq"))?,
            layer_gi: self.layer_gi.unwrap_or(0),
            layer_lq: self
                .layer_lq
                .ok_or_else(|| Error::config("explicit schedule missing --layer-lq"))?,
            total_steps,
        }))
    }
}

#[derive(Args, Clone)]
struct TaskArgs {
    /// Task config file (key=value); other flags are ignored when given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    subject: Option<PathBuf>,
    /// Object to take appearance from, e.g. "magenta square".
    #[arg(long)]
    subject_query: Option<String>,
    /// Caption for the subject branch (defaults to "<query> on white").
    #[arg(long)]
    subject_caption: Option<String>,
    #[arg(long)]
    condition: Option<PathBuf>,
    /// Object to replace (swap), e.g. "blue circle".
    #[arg(long)]
    edit_query: Option<String>,
    #[arg(long)]
    condition_caption: Option<String>,
    /// Region file "x0 y0 x1 y1" for addition.
    #[arg(long)]
    region: Option<PathBuf>,
    /// Text prompt for generation.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run identifier used in output file names.
    #[arg(long, default_value = "run")]
    id: String,
    /// Use the printed-equation fusion term order instead of the default.
    #[arg(long)]
    printed_fusion_order: bool,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    sampler: SamplerArgs,
}

impl TaskArgs {
    fn request(&self, task: TaskKind) -> Result<TaskRequest> {
        if let Some(cfg) = &self.config {
            return load_task_config(cfg);
        }
        let need = |opt: &Option<PathBuf>, what: &str| {
            opt.clone().ok_or_else(|| Error::config(format!("missing --{what}")))
        };
        let sampler = self.sampler.config();
        let req = TaskRequest {
            task,
            id: self.id.clone(),
            subject_image: need(&self.subject, "subject")?,
            subject_query: self
                .subject_query
                .clone()
                .ok_or_else(|| Error::config("missing --subject-query"))?,
            subject_caption: self.subject_caption.clone(),
            condition_image: self.condition.clone(),
            edit_query: self.edit_query.clone(),
            condition_caption: self.condition_caption.clone(),
            region_file: self.region.clone(),
            prompt: self.prompt.clone(),
            schedule_preset: self.schedule.schedule_preset.clone(),
            schedule: self.schedule.explicit(sampler.steps)?,
            sampler,
            weights: need(&self.weights, "weights")?,
            out_dir: need(&self.out, "out")?,
            printed_fusion_order: self.printed_fusion_order,
        };
        req.validate()?;
        Ok(req)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets and the benchmark.
    Synth {
        #[command(subcommand)]
        what: SynthCommand,
    },
    /// Train the toy denoiser on a synthesized dataset.
    Train {
        /// Dataset directory produced by `synth train-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 2e-3)]
        lr: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output weights file.
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV destination for the loss curve.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        train_timesteps: usize,
        #[arg(long, default_value_t = 1e-4)]
        beta_start: f64,
        #[arg(long, default_value_t = 0.02)]
        beta_end: f64,
    },
    /// Deterministically invert an image to its terminal noise.
    Invert {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Caption guiding the inversion, e.g. "red circle on white".
        #[arg(long)]
        caption: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Text-conditioned subject generation.
    Generate(TaskArgs),
    /// Replace an object in the condition image with the subject.
    Swap(TaskArgs),
    /// Add the subject into a region of the condition image.
    Add(TaskArgs),
    /// Run every case of a benchmark manifest.
    Bench {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to one task kind (swapping, addition, generation).
        #[arg(long)]
        task: Option<String>,
        /// Restrict to the first N matching cases.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        schedule_preset: Option<String>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Score run outputs against a benchmark manifest.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid sweep over schedule parameters, emitting CSV metrics.
    Sweep {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated grids.
        #[arg(long, default_value = "0")]
        s_gi: String,
        #[arg(long, default_value = "0,5,10,15,20,25,30,35")]
        e_gi: String,
        #[arg(long, default_value = "8")]
        layer_lq: String,
        #[arg(long, default_value = "48")]
        e_lq: String,
        #[arg(long, default_value_t = 0)]
        layer_gi: usize,
        /// Use only the first N swap cases.
        #[arg(long)]
        cases: Option<usize>,
        /// Accept reversed-order (query before injection) schedules.
        #[arg(long)]
        allow_reverse: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Validate a schedule given by preset name or explicit flags.
    ValidateSchedule {
        #[arg(long, default_value_t = 50)]
        total_steps: usize,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// (image, caption) pairs for training.
    TrainData {
        #[arg(long, default_value_t = 512)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// The task benchmark with ground-truth masks and a manifest.
    Benchmark {
        #[arg(long, default_value_t = 2)]
        subjects: usize,
        #[arg(long, default_value_t = 10)]
        conditions: usize,
        #[arg(long, default_value_t = 5)]
        prompts: usize,
        /// Complex-scene cases per category per subject.
        #[arg(long, default_value_t = 1)]
        complex: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_noise_schedule() -> NoiseSchedule {
    maskctrl::schedule::default_schedule()
}

fn parse_grid(name: &str, s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad {name} grid value {v:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { what } => match what {
            SynthCommand::TrainData { n, seed, out } => {
                std::fs::create_dir_all(&out)?;
                let data = make_training_dataset(n, seed)?;
                let vocab = Vocab;
                let mut captions = String::new();
                for (i, (img, toks)) in data.iter().enumerate() {
                    let name = format!("img_{i:05}.png");
                    save_png_rgb(img, &out.join(&name))?;
                    captions.push_str(&format!("{name}\t{}\n", vocab.decode_phrase(toks)?));
                }
                std::fs::write(out.join("captions.tsv"), captions)?;
                println!("wrote {n} training pairs to {}", out.display());
            }
            SynthCommand::Benchmark { subjects, conditions, prompts, complex, seed, out } => {
                let cfg = BenchmarkConfig {
                    subjects,
                    conditions_per_subject: conditions,
                    prompts_per_subject: prompts,
                    complex_per_category: complex,
                    seed,
                };
                let cases = make_benchmark(&cfg)?;
                let manifest = write_benchmark(&cases, &out)?;
                println!("wrote {} cases, manifest {}", cases.len(), manifest.display());
            }
        },
        Command::Train {
            data,
            steps,
            batch,
            lr,
            seed,
            out,
            loss_csv,
            train_timesteps,
            beta_start,
            beta_end,
        } => {
            let dataset = load_training_dir(&data)?;
            let sched = make_noise_schedule(train_timesteps, beta_start, beta_end)?;
            let cfg = TrainConfig {
                steps,
                batch_size: batch,
                learning_rate: lr,
                seed,
                log_every: 100,
                ..TrainConfig::default()
            };
            let (model, report) = train_toy_denoiser(&dataset, &cfg, &sched)?;
            model.save(&out)?;
            if let Some(p) = loss_csv {
                report.to_csv(&p)?;
            }
            if !report.losses.is_empty() {
                println!(
                    "trained {} steps: smoothed loss {:.4} -> {:.4}, weights {}",
                    steps,
                    report.smoothed_initial(50),
                    report.smoothed_final(50),
                    out.display()
                );
            }
        }
        Command::Invert { weights, image, caption, out, sampler } => {
            let model = ToyDenoiser::load(&weights)?;
            let sched = default_noise_schedule();
            let img = load_png_rgb(&image)?;
            let tokens = match &caption {
                Some(c) => Some(Vocab.encode_phrase(c)?),
                None => None,
            };
            let cfg = sampler.config();
            let traj = ddim_invert(
                &model,
                &maskctrl::imageio::image_to_latent(&img),
                tokens.as_deref(),
                &cfg,
                &sched,
            )?;
            std::fs::create_dir_all(&out)?;
            let stem = image.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let (_, c, h, w) = traj[0].dim();
            let mut stacked = Vec::with_capacity(traj.len() * c * h * w);
            for z in &traj {
                stacked.extend(z.iter().map(|v| *v as f32));
            }
            maskctrl::tensorfile::write_tensor(
                &out.join(format!("{stem}_traj.mct")),
                &[traj.len(), c, h, w],
                &stacked,
            )?;
            maskctrl::tensorfile::write_latent(
                &out.join(format!("{stem}_zT.mct")),
                traj.last().expect("nonempty trajectory"),
            )?;
            println!("inverted {} in {} steps -> {}", image.display(), cfg.steps, out.display());
        }
        Command::Generate(args) => run_single_task(args, TaskKind::Generation)?,
        Command::Swap(args) => run_single_task(args, TaskKind::Swapping)?,
        Command::Add(args) => run_single_task(args, TaskKind::Addition)?,
        Command::Bench { weights, manifest, out, task, limit, schedule_preset, sampler } => {
            let model = ToyDenoiser::load(&weights)?;
            let sched = default_noise_schedule();
            let entries = read_manifest(&manifest)?;
            let filter = match task.as_deref() {
                Some(t) => Some(TaskKind::parse(t)?),
                None => None,
            };
            let mut selected: Vec<_> = entries
                .iter()
                .filter(|e| filter.map_or(true, |t| e.task == t))
                .collect();
            if let Some(n) = limit {
                selected.truncate(n);
            }
            for e in &selected {
                let req = request_from_manifest(
                    e,
                    &weights,
                    &out,
                    sampler.config(),
                    schedule_preset.clone(),
                );
                match run_task(&req, &model, &sched) {
                    Ok(outcome) => println!("{}: ok ({})", e.id, outcome.output_path.display()),
                    Err(err) => println!("{}: failed ({err})", e.id),
                }
            }
        }
        Command::Eval { results, manifest, out } => {
            let report = eval_benchmark(&results, &manifest)?;
            report.write_csv(&out)?;
            let missing = report.rows.iter().filter(|r| r.status == "missing").count();
            println!(
                "evaluated {} cases ({missing} missing) -> {}",
                report.rows.len(),
                out.display()
            );
        }
        Command::Sweep {
            weights,
            manifest,
            s_gi,
            e_gi,
            layer_lq,
            e_lq,
            layer_gi,
            cases,
            allow_reverse,
            out,
            sampler,
        } => {
            let model = ToyDenoiser::load(&weights)?;
            let sched = default_noise_schedule();
            let entries = read_manifest(&manifest)?;
            let cfg = sampler.config();
            let mut prepared = prepare_swap_cases(&model, &sched, &cfg, &entries)?;
            if let Some(n) = cases {
                prepared.truncate(n);
            }
            let grid = SweepGrid {
                s_gi: parse_grid("s_gi", &s_gi)?,
                e_gi: parse_grid("e_gi", &e_gi)?,
                layer_lq: parse_grid("layer_lq", &layer_lq)?,
                e_lq: parse_grid("e_lq", &e_lq)?,
                layer_gi,
                allow_reverse,
            };
            let outcome = run_sweep(&model, &sched, &cfg, &prepared, &grid)?;
            std::fs::write(&out, outcome.to_csv())?;
            for (point, violations) in &outcome.skipped {
                let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                eprintln!(
                    "skipped invalid point s_gi={} e_gi={} layer_lq={} e_lq={}: {}",
                    point.s_gi,
                    point.e_gi,
                    point.layer_lq,
                    point.e_lq,
                    msgs.join("; ")
                );
            }
            println!(
                "swept {} rows ({} invalid points skipped) -> {}",
                outcome.rows.len(),
                outcome.skipped.len(),
                out.display()
            );
        }
        Command::ValidateSchedule { total_steps, schedule } => {
            let s = match schedule.explicit(total_steps)? {
                Some(s) => s,
                None => {
                    let name = schedule
                        .schedule_preset
                        .as_deref()
                        .ok_or_else(|| Error::config("give a preset or explicit flags"))?;
                    ControlSchedule::preset(name, total_steps)
                        .ok_or_else(|| Error::config(format!("unknown preset {name:?}")))?
                }
            };
            let violations = validate_schedule(&s);
            if violations.is_empty() {
                println!("ok: {}", s.to_text().trim_end().replace('\n', " "));
            } else {
                for v in &violations {
                    println!("violation: {v}");
                }
                return Err(Error::config("schedule invalid"));
            }
        }
    }
    Ok(())
}

fn run_single_task(args: TaskArgs, task: TaskKind) -> Result<()> {
    let req = args.request(task)?;
    let model = ToyDenoiser::load(&req.weights)?;
    let sched = default_noise_schedule();
    let outcome = run_task(&req, &model, &sched)?;
    let r = &outcome.row;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
    println!(
        "id={} task={} output={} bg_mse={} fg_hist_subject={} fg_hist_original={}",
        r.id,
        r.task,
        outcome.output_path.display(),
        opt(r.bg_mse),
        opt(r.fg_hist_subject),
        opt(r.fg_hist_original)
    );
    Ok(())
}

fn load_training_dir(dir: &Path) -> Result<Vec<(maskctrl::imageio::RgbImage, Vec<usize>)>> {
    let captions = std::fs::read_to_string(dir.join("captions.tsv")).map_err(|e| {
        Error::config(format!("cannot read captions.tsv in {}: {e}", dir.display()))
    })?;
    let vocab = Vocab;
    let mut out = Vec::new();
    for line in captions.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (file, caption) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("bad captions line {line:?}")))?;
        let img = load_png_rgb(&dir.join(file))?;
        out.push((img, vocab.encode_phrase(caption)?));
    }
    if out.is_empty() {
        return Err(Error::config("training directory contains no examples"));
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error code={} message={:?}", e.exit_code(), e.to_string());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
