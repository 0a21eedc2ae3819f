//! Full-scale dry run used to freeze the derived acceptance thresholds:
//! trains the reference model, measures DDIM round-trip error, swap-quality
//! margins against the full-regeneration baseline, and the injection-window
//! sweep trend. Prints one summary line per quantity.

use std::time::Instant;

use maskctrl::control::ControlSchedule;
use maskctrl::dataset::{make_benchmark, make_training_dataset, BenchmarkConfig, TaskKind};
use maskctrl::imageio::{image_to_latent, mean_abs_pixel_error};
use maskctrl::mask::{build_pyramid, BinaryMask};
use maskctrl::pipeline::Execution;
use maskctrl::sampler::{ddim_invert, ddim_sample, SamplerConfig};
use maskctrl::scene::render_scene;
use maskctrl::schedule::default_schedule;
use maskctrl::sweep::{run_sweep, SweepGrid};
use maskctrl::task::{execute_edit, prepare_edit, EditRegion};
use maskctrl::train::{train_toy_denoiser, TrainConfig};

fn main() {
    let sched = default_schedule();

    let t0 = Instant::now();
    let data = make_training_dataset(512, 7).unwrap();
    let cfg = TrainConfig { steps: 2000, batch_size: 4, seed: 0, log_every: 200, ..Default::default() };
    let (model, report) = train_toy_denoiser(&data, &cfg, &sched).unwrap();
    println!(
        "TRAIN: {:.1}s, smoothed {:.4} -> {:.4} (ratio {:.3})",
        t0.elapsed().as_secs_f64(),
        report.smoothed_initial(50),
        report.smoothed_final(50),
        report.smoothed_final(50) / report.smoothed_initial(50)
    );
    model.save(std::path::Path::new("/tmp/oracle_weights.bin")).unwrap();

    // DDIM round trip at guidance 1.0, 50 steps
    let t0 = Instant::now();
    let sampler = SamplerConfig { steps: 50, guidance_scale: 1.0, inversion_guidance: 1.0, seed: 0 };
    let bench_cfg = BenchmarkConfig {
        subjects: 2,
        conditions_per_subject: 10,
        prompts_per_subject: 2,
        complex_per_category: 0,
        seed: 11,
    };
    let cases = make_benchmark(&bench_cfg).unwrap();
    let mut worst: f64 = 0.0;
    let mut errs = Vec::new();
    for case in cases.iter().filter(|c| c.task == TaskKind::Swapping).take(3) {
        let scene = render_scene(case.condition_spec.as_ref().unwrap(), 32).unwrap();
        let z0 = image_to_latent(&scene.image);
        let toks = case.condition_caption.clone().unwrap();
        let traj = ddim_invert(&model, &z0, Some(&toks), &sampler, &sched).unwrap();
        let back = ddim_sample(&model, traj.last().unwrap(), Some(&toks), &sampler, &sched, None)
            .unwrap();
        let err = mean_abs_pixel_error(back.last().unwrap(), &z0);
        errs.push(err);
        worst = worst.max(err);
    }
    println!("ROUNDTRIP: {:.1}s, errors {:?}, worst {:.4}", t0.elapsed().as_secs_f64(), errs, worst);

    // swap smoke: 20 clean cases, preset vs full-regeneration baseline
    let t0 = Instant::now();
    let run_sampler = SamplerConfig { steps: 50, guidance_scale: 7.5, inversion_guidance: 1.0, seed: 0 };
    let schedule = ControlSchedule::preset("swap-uniform", 50).unwrap();
    let mut bg_wins = 0usize;
    let mut fg_wins = 0usize;
    let mut n = 0usize;
    let swaps: Vec<_> = cases.iter().filter(|c| c.task == TaskKind::Swapping).collect();
    let mut per_case = Vec::new();
    for case in &swaps {
        let scene = render_scene(case.condition_spec.as_ref().unwrap(), 32).unwrap();
        let subject = render_scene(&case.subject_spec, 32).unwrap();
        let dir = std::path::Path::new("/tmp/oracle_cases");
        std::fs::create_dir_all(dir).unwrap();
        let spath = dir.join(format!("{}_s.png", case.id));
        let cpath = dir.join(format!("{}_c.png", case.id));
        maskctrl::imageio::save_png_rgb(&subject.image, &spath).unwrap();
        maskctrl::imageio::save_png_rgb(&scene.image, &cpath).unwrap();
        let vocab = maskctrl::model::vocab::Vocab;
        let prepared = prepare_edit(
            &model,
            &sched,
            &run_sampler,
            &case.id,
            &spath,
            &case.subject_query.phrase(),
            Some(&vocab.decode_phrase(&case.subject_caption).unwrap()),
            &cpath,
            Some(&vocab.decode_phrase(case.condition_caption.as_ref().unwrap()).unwrap()),
            EditRegion::Localize(&case.edit_query.as_ref().unwrap().phrase()),
        )
        .unwrap();
        let edited = execute_edit(
            &model, &sched, &prepared, &schedule, &run_sampler,
            Default::default(), Execution::Batched, false, None,
        )
        .unwrap();
        let all_ones = build_pyramid(
            &BinaryMask::filled(32, 32, true).unwrap(),
            &model.attention_resolutions(),
        )
        .unwrap();
        let baseline = execute_edit(
            &model, &sched, &prepared, &schedule, &run_sampler,
            Default::default(), Execution::Batched, false, Some(&all_ones),
        )
        .unwrap();

        let dilated = maskctrl::mask::dilate(&prepared.editable_mask, Default::default());
        let bg_edit =
            maskctrl::metrics::bg_mse(&edited.output, &prepared.condition_image, &dilated).unwrap();
        let bg_base =
            maskctrl::metrics::bg_mse(&baseline.output, &prepared.condition_image, &dilated)
                .unwrap();
        let fg_subject = maskctrl::metrics::fg_hist_dist(
            &edited.output,
            &prepared.editable_core,
            &prepared.subject_image,
            &prepared.subject_mask,
        )
        .unwrap();
        let fg_original = maskctrl::metrics::fg_hist_dist(
            &edited.output,
            &prepared.editable_core,
            &prepared.condition_image,
            &prepared.editable_core,
        )
        .unwrap();
        if bg_edit < bg_base {
            bg_wins += 1;
        }
        if fg_subject < fg_original {
            fg_wins += 1;
        }
        n += 1;
        per_case.push(format!(
            "{}: bg {bg_edit:.4} vs base {bg_base:.4}, fg_sub {fg_subject:.3} vs fg_orig {fg_original:.3}",
            case.id
        ));
        maskctrl::imageio::save_png_rgb(&edited.output, &dir.join(format!("{}_out.png", case.id)))
            .unwrap();
    }
    for line in &per_case {
        println!("  {line}");
    }
    println!(
        "SWAP SMOKE: {:.1}s, bg wins {bg_wins}/{n}, fg wins {fg_wins}/{n}",
        t0.elapsed().as_secs_f64()
    );

    // sweep trend: E_GI in {0, 20} over 10 cases
    let t0 = Instant::now();
    let prepared: Vec<_> = swaps
        .iter()
        .take(10)
        .map(|case| {
            let dir = std::path::Path::new("/tmp/oracle_cases");
            let spath = dir.join(format!("{}_s.png", case.id));
            let cpath = dir.join(format!("{}_c.png", case.id));
            let vocab = maskctrl::model::vocab::Vocab;
            prepare_edit(
                &model,
                &sched,
                &run_sampler,
                &case.id,
                &spath,
                &case.subject_query.phrase(),
                Some(&vocab.decode_phrase(&case.subject_caption).unwrap()),
                &cpath,
                Some(&vocab.decode_phrase(case.condition_caption.as_ref().unwrap()).unwrap()),
                EditRegion::Localize(&case.edit_query.as_ref().unwrap().phrase()),
            )
            .unwrap()
        })
        .collect();
    let grid = SweepGrid {
        s_gi: vec![0],
        e_gi: vec![0, 20],
        layer_lq: vec![8],
        e_lq: vec![48],
        layer_gi: 0,
        allow_reverse: false,
    };
    let outcome = run_sweep(&model, &sched, &run_sampler, &prepared, &grid).unwrap();
    let mut dominated = 0usize;
    let mut total = 0usize;
    for case in prepared.iter().map(|p| p.id.clone()) {
        let find = |e_gi: usize| {
            outcome
                .rows
                .iter()
                .find(|r| r.case_id == case && r.schedule.e_gi == e_gi)
                .and_then(|r| r.fg_hist_subject)
        };
        if let (Some(f0), Some(f20)) = (find(0), find(20)) {
            total += 1;
            if f20 <= f0 {
                dominated += 1;
            }
            println!("  {case}: fg@0 {f0:.3} fg@20 {f20:.3}");
        }
    }
    println!(
        "SWEEP TREND: {:.1}s, E_GI=20 at least as good on {dominated}/{total}",
        t0.elapsed().as_secs_f64()
    );
}
