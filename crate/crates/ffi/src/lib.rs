//! C ABI for the customization engine.
//!
//! Conventions: opaque handles own their Rust objects and must be released
//! with the matching `_free` function; every fallible call returns an
//! [`McStatus`] and leaves a thread-local message retrievable via
//! [`mc_last_error_message`]. Strings are NUL-terminated UTF-8. Metric
//! fields that do not apply to a task are set to NaN.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};

use maskctrl::control::{validate_schedule, ControlSchedule};
use maskctrl::dataset::{make_benchmark, write_benchmark, BenchmarkConfig, TaskKind};
use maskctrl::error::Error;
use maskctrl::mask::{dilate, load_mask_png, save_mask_png, DilationKernel};
use maskctrl::model::ToyDenoiser;
use maskctrl::sampler::SamplerConfig;
use maskctrl::schedule::{default_schedule, NoiseSchedule};
use maskctrl::task::{load_task_config, run_task, TaskRequest};

/// Status codes, aligned with the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McStatus {
    Ok = 0,
    /// Invalid arguments or configuration.
    Config = 2,
    /// Subject localization failed.
    Localization = 3,
    /// Any other runtime failure.
    Runtime = 4,
    /// A required pointer argument was null.
    NullArgument = 5,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> McStatus {
    match err.exit_code() {
        2 => McStatus::Config,
        3 => McStatus::Localization,
        _ => McStatus::Runtime,
    }
}

fn fail(err: Error) -> McStatus {
    set_error(&err.to_string());
    status_of(&err)
}

/// Message describing the most recent error on this thread. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mc_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

unsafe fn cstr<'a>(p: *const c_char) -> Result<&'a str, McStatus> {
    if p.is_null() {
        set_error("null string argument");
        return Err(McStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        McStatus::InvalidUtf8
    })
}

/// Opaque engine: a loaded denoiser plus its noise schedule.
pub struct McEngine {
    model: ToyDenoiser,
    sched: NoiseSchedule,
}

/// Loads trained weights and prepares the default noise schedule.
/// On success writes a handle to `out`; release it with [`mc_engine_free`].
///
/// # Safety
/// `weights_path` must be a valid NUL-terminated string and `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_engine_load(
    weights_path: *const c_char,
    out: *mut *mut McEngine,
) -> McStatus {
    if out.is_null() {
        set_error("null output handle");
        return McStatus::NullArgument;
    }
    let path = match cstr(weights_path) {
        Ok(s) => s,
        Err(st) => return st,
    };
    match ToyDenoiser::load(Path::new(path)) {
        Ok(model) => {
            let engine = Box::new(McEngine { model, sched: default_schedule() });
            *out = Box::into_raw(engine);
            McStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Releases an engine handle. Null is ignored.
///
/// # Safety
/// `engine` must be a pointer returned by [`mc_engine_load`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mc_engine_free(engine: *mut McEngine) {
    if !engine.is_null() {
        drop(Box::from_raw(engine));
    }
}

/// Number of trainable parameters of the loaded model.
///
/// # Safety
/// `engine` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn mc_engine_param_count(engine: *const McEngine) -> u64 {
    if engine.is_null() {
        return 0;
    }
    (*engine).model.param_count() as u64
}

/// Plain-data control schedule (step windows and layer thresholds).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct McSchedule {
    pub s_gi: u32,
    pub e_gi: u32,
    pub s_lq: u32,
    pub e_lq: u32,
    pub layer_gi: u32,
    pub layer_lq: u32,
    pub total_steps: u32,
}

impl From<McSchedule> for ControlSchedule {
    fn from(s: McSchedule) -> ControlSchedule {
        ControlSchedule {
            s_gi: s.s_gi as usize,
            e_gi: s.e_gi as usize,
            s_lq: s.s_lq as usize,
            e_lq: s.e_lq as usize,
            layer_gi: s.layer_gi as usize,
            layer_lq: s.layer_lq as usize,
            total_steps: s.total_steps as usize,
        }
    }
}

/// Fills `out` with a named preset ("swap-uniform" or "gen-uniform") scaled
/// to `total_steps`.
///
/// # Safety
/// `name` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_schedule_preset(
    name: *const c_char,
    total_steps: u32,
    out: *mut McSchedule,
) -> McStatus {
    if out.is_null() {
        set_error("null schedule output");
        return McStatus::NullArgument;
    }
    let name = match cstr(name) {
        Ok(s) => s,
        Err(st) => return st,
    };
    match ControlSchedule::preset(name, total_steps as usize) {
        Some(s) => {
            *out = McSchedule {
                s_gi: s.s_gi as u32,
                e_gi: s.e_gi as u32,
                s_lq: s.s_lq as u32,
                e_lq: s.e_lq as u32,
                layer_gi: s.layer_gi as u32,
                layer_lq: s.layer_lq as u32,
                total_steps: s.total_steps as u32,
            };
            McStatus::Ok
        }
        None => {
            set_error(&format!("unknown schedule preset {name:?}"));
            McStatus::Config
        }
    }
}

/// Validates the default schedule layout. On violation returns `Config` and
/// stores every violated clause in the error message.
///
/// # Safety
/// `schedule` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mc_schedule_validate(schedule: *const McSchedule) -> McStatus {
    if schedule.is_null() {
        set_error("null schedule");
        return McStatus::NullArgument;
    }
    let s: ControlSchedule = (*schedule).into();
    let violations = validate_schedule(&s);
    if violations.is_empty() {
        McStatus::Ok
    } else {
        let msgs: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        set_error(&msgs.join("; "));
        McStatus::Config
    }
}

/// Sampler settings for task runs.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct McSampler {
    pub steps: u32,
    pub guidance: f64,
    pub inversion_guidance: f64,
    pub seed: u64,
}

impl From<McSampler> for SamplerConfig {
    fn from(s: McSampler) -> SamplerConfig {
        SamplerConfig {
            steps: s.steps as usize,
            guidance_scale: s.guidance,
            inversion_guidance: s.inversion_guidance,
            seed: s.seed,
        }
    }
}

/// Per-run metrics; fields that do not apply are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct McMetrics {
    pub bg_mse: f64,
    pub fg_hist_subject: f64,
    pub fg_hist_original: f64,
}

fn metrics_of(row: &maskctrl::metrics::EvalRow) -> McMetrics {
    McMetrics {
        bg_mse: row.bg_mse.unwrap_or(f64::NAN),
        fg_hist_subject: row.fg_hist_subject.unwrap_or(f64::NAN),
        fg_hist_original: row.fg_hist_original.unwrap_or(f64::NAN),
    }
}

unsafe fn run_request(
    engine: *const McEngine,
    request: TaskRequest,
    metrics_out: *mut McMetrics,
) -> McStatus {
    if engine.is_null() {
        set_error("null engine");
        return McStatus::NullArgument;
    }
    let engine = &*engine;
    match run_task(&request, &engine.model, &engine.sched) {
        Ok(outcome) => {
            if !metrics_out.is_null() {
                *metrics_out = metrics_of(&outcome.row);
            }
            McStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Runs a task described by a plain-text `key=value` config file (the same
/// format the CLI accepts). The engine's loaded model is used regardless of
/// the weights named in the file.
///
/// # Safety
/// Pointer arguments must be valid; `metrics_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn mc_run_task_file(
    engine: *const McEngine,
    config_path: *const c_char,
    metrics_out: *mut McMetrics,
) -> McStatus {
    let path = match cstr(config_path) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let request = match load_task_config(Path::new(path)) {
        Ok(r) => r,
        Err(e) => return fail(e),
    };
    run_request(engine, request, metrics_out)
}

struct TaskStrings<'a> {
    subject: &'a str,
    subject_query: &'a str,
    out_dir: &'a str,
    id: &'a str,
}

unsafe fn common_strings<'a>(
    subject_png: *const c_char,
    subject_query: *const c_char,
    out_dir: *const c_char,
    id: *const c_char,
) -> Result<TaskStrings<'a>, McStatus> {
    Ok(TaskStrings {
        subject: cstr(subject_png)?,
        subject_query: cstr(subject_query)?,
        out_dir: cstr(out_dir)?,
        id: cstr(id)?,
    })
}

fn base_request(task: TaskKind, s: &TaskStrings<'_>, sampler: McSampler) -> TaskRequest {
    TaskRequest {
        task,
        id: s.id.to_string(),
        subject_image: PathBuf::from(s.subject),
        subject_query: s.subject_query.to_string(),
        subject_caption: None,
        condition_image: None,
        edit_query: None,
        condition_caption: None,
        region_file: None,
        prompt: None,
        schedule_preset: None,
        schedule: None,
        sampler: sampler.into(),
        weights: PathBuf::new(),
        out_dir: PathBuf::from(s.out_dir),
        printed_fusion_order: false,
    }
}

fn apply_schedule(request: &mut TaskRequest, schedule: *const McSchedule, default_preset: &str) {
    if schedule.is_null() {
        request.schedule_preset = Some(default_preset.to_string());
    } else {
        request.schedule = Some(unsafe { *schedule }.into());
    }
}

/// Replaces the object matching `edit_query` in the condition image with the
/// subject. `schedule` may be null for the swap preset. Output files are
/// written under `out_dir` with the `id` prefix.
///
/// # Safety
/// Pointer arguments must be valid; `schedule` and `metrics_out` may be null.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mc_run_swap(
    engine: *const McEngine,
    subject_png: *const c_char,
    subject_query: *const c_char,
    condition_png: *const c_char,
    edit_query: *const c_char,
    out_dir: *const c_char,
    id: *const c_char,
    schedule: *const McSchedule,
    sampler: McSampler,
    metrics_out: *mut McMetrics,
) -> McStatus {
    let strings = match common_strings(subject_png, subject_query, out_dir, id) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let (cond, equery) = match (cstr(condition_png), cstr(edit_query)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(st), _) | (_, Err(st)) => return st,
    };
    let mut request = base_request(TaskKind::Swapping, &strings, sampler);
    request.condition_image = Some(PathBuf::from(cond));
    request.edit_query = Some(equery.to_string());
    apply_schedule(&mut request, schedule, "swap-uniform");
    run_request(engine, request, metrics_out)
}

/// Generates the subject under a text prompt.
///
/// # Safety
/// Pointer arguments must be valid; `schedule` and `metrics_out` may be null.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mc_run_generate(
    engine: *const McEngine,
    subject_png: *const c_char,
    subject_query: *const c_char,
    prompt: *const c_char,
    out_dir: *const c_char,
    id: *const c_char,
    schedule: *const McSchedule,
    sampler: McSampler,
    metrics_out: *mut McMetrics,
) -> McStatus {
    let strings = match common_strings(subject_png, subject_query, out_dir, id) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let prompt = match cstr(prompt) {
        Ok(p) => p,
        Err(st) => return st,
    };
    let mut request = base_request(TaskKind::Generation, &strings, sampler);
    request.prompt = Some(prompt.to_string());
    apply_schedule(&mut request, schedule, "gen-uniform");
    run_request(engine, request, metrics_out)
}

/// Adds the subject into the region (file with an inclusive `x0 y0 x1 y1`
/// box) of the condition image.
///
/// # Safety
/// Pointer arguments must be valid; `schedule` and `metrics_out` may be null.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn mc_run_add(
    engine: *const McEngine,
    subject_png: *const c_char,
    subject_query: *const c_char,
    condition_png: *const c_char,
    region_file: *const c_char,
    out_dir: *const c_char,
    id: *const c_char,
    schedule: *const McSchedule,
    sampler: McSampler,
    metrics_out: *mut McMetrics,
) -> McStatus {
    let strings = match common_strings(subject_png, subject_query, out_dir, id) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let (cond, region) = match (cstr(condition_png), cstr(region_file)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(st), _) | (_, Err(st)) => return st,
    };
    let mut request = base_request(TaskKind::Addition, &strings, sampler);
    request.condition_image = Some(PathBuf::from(cond));
    request.region_file = Some(PathBuf::from(region));
    apply_schedule(&mut request, schedule, "swap-uniform");
    run_request(engine, request, metrics_out)
}

/// Morphologically dilates a binary mask PNG with the 3x3 kernel.
///
/// # Safety
/// Path arguments must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mc_mask_dilate_png(
    input_png: *const c_char,
    output_png: *const c_char,
    iterations: u32,
) -> McStatus {
    let (input, output) = match (cstr(input_png), cstr(output_png)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(st), _) | (_, Err(st)) => return st,
    };
    let mask = match load_mask_png(Path::new(input)) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let dilated = dilate(&mask, DilationKernel { iterations: iterations as usize });
    match save_mask_png(&dilated, Path::new(output)) {
        Ok(()) => McStatus::Ok,
        Err(e) => fail(e),
    }
}

/// Writes a synthetic benchmark (images, ground-truth masks, manifest) to
/// `out_dir`.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mc_synth_benchmark(
    out_dir: *const c_char,
    subjects: u32,
    conditions_per_subject: u32,
    prompts_per_subject: u32,
    complex_per_category: u32,
    seed: u64,
) -> McStatus {
    let out = match cstr(out_dir) {
        Ok(s) => s,
        Err(st) => return st,
    };
    let cfg = BenchmarkConfig {
        subjects: subjects as usize,
        conditions_per_subject: conditions_per_subject as usize,
        prompts_per_subject: prompts_per_subject as usize,
        complex_per_category: complex_per_category as usize,
        seed,
    };
    let cases = match make_benchmark(&cfg) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match write_benchmark(&cases, Path::new(out)) {
        Ok(_) => McStatus::Ok,
        Err(e) => fail(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskctrl::model::ModelConfig;
    use std::ffi::CString;
    use std::ptr;

    fn temp_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("maskctrl_ffi_{name}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn c(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn version_and_error_message_are_readable() {
        let v = unsafe { CStr::from_ptr(mc_version()) };
        assert!(!v.to_str().unwrap().is_empty());
        let m = unsafe { CStr::from_ptr(mc_last_error_message()) };
        assert!(m.to_str().is_ok());
    }

    #[test]
    fn engine_load_roundtrip_and_errors() {
        let dir = temp_dir("engine");
        let weights = dir.join("w.bin");
        let model = ToyDenoiser::new(ModelConfig::default(), 5).unwrap();
        model.save(&weights).unwrap();

        let mut handle: *mut McEngine = ptr::null_mut();
        let path = c(weights.to_str().unwrap());
        let st = unsafe { mc_engine_load(path.as_ptr(), &mut handle) };
        assert_eq!(st, McStatus::Ok);
        assert!(!handle.is_null());
        assert_eq!(unsafe { mc_engine_param_count(handle) }, model.param_count() as u64);
        unsafe { mc_engine_free(handle) };

        // missing file
        let mut handle: *mut McEngine = ptr::null_mut();
        let bad = c("/nonexistent/weights.bin");
        let st = unsafe { mc_engine_load(bad.as_ptr(), &mut handle) };
        assert_eq!(st, McStatus::Runtime);
        let msg = unsafe { CStr::from_ptr(mc_last_error_message()) };
        assert!(!msg.to_bytes().is_empty());

        // null argument
        let st = unsafe { mc_engine_load(ptr::null(), &mut handle) };
        assert_eq!(st, McStatus::NullArgument);
    }

    #[test]
    fn schedule_preset_and_validation() {
        let mut s = McSchedule {
            s_gi: 0,
            e_gi: 0,
            s_lq: 0,
            e_lq: 0,
            layer_gi: 0,
            layer_lq: 0,
            total_steps: 0,
        };
        let name = c("swap-uniform");
        let st = unsafe { mc_schedule_preset(name.as_ptr(), 50, &mut s) };
        assert_eq!(st, McStatus::Ok);
        assert_eq!((s.s_gi, s.e_gi, s.s_lq, s.e_lq, s.layer_lq), (0, 20, 20, 48, 8));
        assert_eq!(unsafe { mc_schedule_validate(&s) }, McStatus::Ok);

        s.s_gi = 30; // now s_gi > e_gi
        assert_eq!(unsafe { mc_schedule_validate(&s) }, McStatus::Config);
        let msg = unsafe { CStr::from_ptr(mc_last_error_message()) }.to_str().unwrap();
        assert!(msg.contains("s_gi"), "{msg}");

        let unknown = c("no-such-preset");
        assert_eq!(
            unsafe { mc_schedule_preset(unknown.as_ptr(), 50, &mut s) },
            McStatus::Config
        );
    }

    #[test]
    fn synth_benchmark_and_mask_dilate() {
        let dir = temp_dir("synth");
        let out = c(dir.to_str().unwrap());
        let st = unsafe { mc_synth_benchmark(out.as_ptr(), 1, 2, 1, 0, 9) };
        assert_eq!(st, McStatus::Ok);
        assert!(dir.join("manifest.tsv").exists());

        let mask_in = dir.join("s0-swap00_editable.png");
        let mask_out = dir.join("dilated.png");
        let a = c(mask_in.to_str().unwrap());
        let b = c(mask_out.to_str().unwrap());
        let st = unsafe { mc_mask_dilate_png(a.as_ptr(), b.as_ptr(), 1) };
        assert_eq!(st, McStatus::Ok);
        let before = load_mask_png(&mask_in).unwrap();
        let after = load_mask_png(&mask_out).unwrap();
        assert!(after.is_superset_of(&before));
        assert!(after.count_ones() > before.count_ones());
    }

    #[test]
    fn swap_through_the_c_surface() {
        let dir = temp_dir("swap");
        let model = ToyDenoiser::new(ModelConfig::default(), 1).unwrap();
        let weights = dir.join("w.bin");
        model.save(&weights).unwrap();

        let bench = dir.join("bench");
        let out_arg = c(bench.to_str().unwrap());
        assert_eq!(unsafe { mc_synth_benchmark(out_arg.as_ptr(), 1, 1, 1, 0, 4) }, McStatus::Ok);

        let mut engine: *mut McEngine = ptr::null_mut();
        let wpath = c(weights.to_str().unwrap());
        assert_eq!(unsafe { mc_engine_load(wpath.as_ptr(), &mut engine) }, McStatus::Ok);

        let subject = c(bench.join("s0-swap00_subject.png").to_str().unwrap());
        let condition = c(bench.join("s0-swap00_condition.png").to_str().unwrap());
        let manifest = std::fs::read_to_string(bench.join("manifest.tsv")).unwrap();
        let fields: Vec<&str> = manifest.lines().next().unwrap().split('\t').collect();
        let squery = c(fields[6]);
        let equery = c(fields[10]);
        let outdir = c(dir.join("results").to_str().unwrap());
        let id = c("ffi-swap");
        // few steps keep this quick; quality is irrelevant here
        let sampler = McSampler { steps: 4, guidance: 1.0, inversion_guidance: 1.0, seed: 0 };
        let mut metrics = McMetrics { bg_mse: 0.0, fg_hist_subject: 0.0, fg_hist_original: 0.0 };
        let st = unsafe {
            mc_run_swap(
                engine,
                subject.as_ptr(),
                squery.as_ptr(),
                condition.as_ptr(),
                equery.as_ptr(),
                outdir.as_ptr(),
                id.as_ptr(),
                ptr::null(),
                sampler,
                &mut metrics,
            )
        };
        assert_eq!(st, McStatus::Ok);
        assert!(dir.join("results/ffi-swap_output.png").exists());
        assert!(metrics.bg_mse.is_finite());

        // localization failure surfaces as its own status
        let missing = c("green triangle");
        let st = unsafe {
            mc_run_swap(
                engine,
                subject.as_ptr(),
                missing.as_ptr(),
                condition.as_ptr(),
                equery.as_ptr(),
                outdir.as_ptr(),
                id.as_ptr(),
                ptr::null(),
                sampler,
                ptr::null_mut(),
            )
        };
        assert_eq!(st, McStatus::Localization);

        unsafe { mc_engine_free(engine) };
    }
}
