//! Parameter grid sweeps over the control schedule, emitting CSV metrics.
//!
//! Grid points are embarrassingly parallel; the expensive per-case
//! inversions are computed once and shared read-only across the grid. Output
//! ordering is deterministic regardless of worker completion order.

use rayon::prelude::*;

use crate::control::{validate_schedule, validate_schedule_reversed, ControlSchedule, FusionOrder, ScheduleViolation};
use crate::dataset::{ManifestEntry, TaskKind};
use crate::error::{Error, Result};
use crate::mask::{dilate, DilationKernel};
use crate::metrics::{bg_mse, fg_hist_dist};
use crate::model::ToyDenoiser;
use crate::pipeline::Execution;
use crate::sampler::SamplerConfig;
use crate::schedule::NoiseSchedule;
use crate::task::{execute_edit, prepare_edit, EditRegion, PreparedEdit};

#[derive(Debug, Clone)]
pub struct SweepGrid {
    pub s_gi: Vec<usize>,
    pub e_gi: Vec<usize>,
    pub layer_lq: Vec<usize>,
    pub e_lq: Vec<usize>,
    pub layer_gi: usize,
    /// Accept reversed-layout (query before injection) grid points instead
    /// of skipping them.
    pub allow_reverse: bool,
}

impl SweepGrid {
    /// Every combination, sorted by (s_gi, e_gi, layer_lq, e_lq).
    pub fn points(&self, total_steps: usize) -> Vec<ControlSchedule> {
        let mut out = Vec::new();
        let mut sorted = self.clone();
        sorted.s_gi.sort_unstable();
        sorted.e_gi.sort_unstable();
        sorted.layer_lq.sort_unstable();
        sorted.e_lq.sort_unstable();
        for &s_gi in &sorted.s_gi {
            for &e_gi in &sorted.e_gi {
                for &layer_lq in &sorted.layer_lq {
                    for &e_lq in &sorted.e_lq {
                        out.push(ControlSchedule {
                            s_gi,
                            e_gi,
                            s_lq: e_gi, // no gap
                            e_lq,
                            layer_gi: self.layer_gi,
                            layer_lq,
                            total_steps,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub schedule: ControlSchedule,
    pub case_id: String,
    pub bg_mse: Option<f64>,
    pub fg_hist_subject: Option<f64>,
    pub fg_hist_original: Option<f64>,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Grid points rejected by schedule validation, with the violated clauses.
    pub skipped: Vec<(ControlSchedule, Vec<ScheduleViolation>)>,
}

impl SweepOutcome {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "s_gi,e_gi,layer_lq,e_lq,case_id,bg_mse,fg_hist_subject,fg_hist_original,status\n",
        );
        for r in &self.rows {
            let opt = |v: &Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.schedule.s_gi,
                r.schedule.e_gi,
                r.schedule.layer_lq,
                r.schedule.e_lq,
                r.case_id,
                opt(&r.bg_mse),
                opt(&r.fg_hist_subject),
                opt(&r.fg_hist_original),
                r.status
            ));
        }
        out
    }
}

/// Prepares the swap cases of a manifest once (localization + inversions).
pub fn prepare_swap_cases(
    denoiser: &ToyDenoiser,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    entries: &[ManifestEntry],
) -> Result<Vec<PreparedEdit>> {
    let mut swaps: Vec<&ManifestEntry> =
        entries.iter().filter(|e| e.task == TaskKind::Swapping).collect();
    swaps.sort_by(|a, b| a.id.cmp(&b.id));
    if swaps.is_empty() {
        return Err(Error::invalid("sweep needs at least one swapping case"));
    }
    swaps
        .iter()
        .map(|e| {
            prepare_edit(
                denoiser,
                sched,
                sampler,
                &e.id,
                &e.subject_image,
                &e.subject_query,
                Some(&e.subject_caption),
                e.condition_image.as_ref().ok_or_else(|| {
                    Error::format(format!("case {} lacks a condition image", e.id))
                })?,
                e.condition_caption.as_deref(),
                EditRegion::Localize(e.edit_query.as_deref().ok_or_else(|| {
                    Error::format(format!("case {} lacks an edit query", e.id))
                })?),
            )
        })
        .collect()
}

/// One pipeline run per valid grid point per case, fixed seed. Failures are
/// recorded in their row; invalid grid points are skipped with a note.
pub fn run_sweep(
    denoiser: &ToyDenoiser,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    cases: &[PreparedEdit],
    grid: &SweepGrid,
) -> Result<SweepOutcome> {
    let mut valid = Vec::new();
    let mut skipped = Vec::new();
    for point in grid.points(sampler.steps) {
        let violations = validate_schedule(&point);
        if violations.is_empty() {
            valid.push(point);
        } else if grid.allow_reverse && validate_schedule_reversed(&point).is_empty() {
            valid.push(point);
        } else {
            skipped.push((point, violations));
        }
    }

    let rows: Vec<Vec<SweepRow>> = valid
        .par_iter()
        .map(|point| {
            cases
                .iter()
                .map(|case| run_point(denoiser, sched, sampler, case, point, grid.allow_reverse))
                .collect()
        })
        .collect();

    Ok(SweepOutcome { rows: rows.into_iter().flatten().collect(), skipped })
}

fn run_point(
    denoiser: &ToyDenoiser,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    case: &PreparedEdit,
    point: &ControlSchedule,
    allow_reverse: bool,
) -> SweepRow {
    let mut row = SweepRow {
        schedule: *point,
        case_id: case.id.clone(),
        bg_mse: None,
        fg_hist_subject: None,
        fg_hist_original: None,
        status: "ok".to_string(),
    };
    let result = execute_edit(
        denoiser,
        sched,
        case,
        point,
        sampler,
        FusionOrder::default(),
        Execution::Batched,
        allow_reverse,
        None,
    );
    match result {
        Ok(out) => {
            let dilated = dilate(&case.editable_mask, DilationKernel::default());
            row.bg_mse = bg_mse(&out.output, &case.condition_image, &dilated).ok();
            row.fg_hist_subject = fg_hist_dist(
                &out.output,
                &case.editable_core,
                &case.subject_image,
                &case.subject_mask,
            )
            .ok();
            row.fg_hist_original = fg_hist_dist(
                &out.output,
                &case.editable_core,
                &case.condition_image,
                &case.editable_core,
            )
            .ok();
        }
        Err(e) => {
            row.status = format!("error: {e}");
        }
    }
    row
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_enumerates_sorted_cartesian_product() {
        let grid = SweepGrid {
            s_gi: vec![0],
            e_gi: vec![20, 0, 10],
            layer_lq: vec![8],
            e_lq: vec![48],
            layer_gi: 0,
            allow_reverse: false,
        };
        let points = grid.points(50);
        assert_eq!(points.len(), 3);
        assert_eq!(points[0].e_gi, 0);
        assert_eq!(points[1].e_gi, 10);
        assert_eq!(points[2].e_gi, 20);
        assert!(points.iter().all(|p| p.s_lq == p.e_gi));
    }

    #[test]
    fn invalid_points_are_skipped_with_violations() {
        let grid = SweepGrid {
            s_gi: vec![30],
            e_gi: vec![10],
            layer_lq: vec![0],
            e_lq: vec![48],
            layer_gi: 0,
            allow_reverse: false,
        };
        let points = grid.points(50);
        assert_eq!(points.len(), 1);
        assert!(!validate_schedule(&points[0]).is_empty());
    }
}
