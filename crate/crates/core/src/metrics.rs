//! Toy consistency metrics and the benchmark evaluation report.
//!
//! Two measurements, echoing the subject/background split of image-to-image
//! scoring: background MSE outside the dilated editable region against the
//! condition image, and the L1 distance between normalized color histograms
//! of the edited region and the subject's masked region.

use std::path::Path;

use crate::dataset::{read_manifest, ManifestEntry, TaskKind};
use crate::error::{Error, Result};
use crate::imageio::{load_png_rgb, RgbImage};
use crate::mask::{dilate, load_mask_png, BinaryMask, DilationKernel};

/// Mean squared error over pixels outside `excluded` (all channels).
pub fn bg_mse(output: &RgbImage, reference: &RgbImage, excluded: &BinaryMask) -> Result<f64> {
    let (c, h, w) = output.dim();
    if reference.dim() != (c, h, w) {
        return Err(Error::invalid("bg_mse: image dimension mismatch"));
    }
    if excluded.width() != w || excluded.height() != h {
        return Err(Error::invalid("bg_mse: mask dimension mismatch"));
    }
    let mut sum = 0f64;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if excluded.get(x, y) {
                continue;
            }
            for ch in 0..c {
                let d = (output[[ch, y, x]] - reference[[ch, y, x]]) as f64;
                sum += d * d;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::invalid("bg_mse: excluded mask covers the whole image"));
    }
    Ok(sum / n as f64)
}

const HIST_BINS: usize = 4; // per channel -> 64 joint bins

/// Joint RGB histogram (4 bins per channel) over masked pixels, normalized
/// to sum 1.
pub fn color_histogram(img: &RgbImage, mask: &BinaryMask) -> Result<Vec<f64>> {
    let (_, h, w) = img.dim();
    if mask.width() != w || mask.height() != h {
        return Err(Error::invalid("histogram: mask dimension mismatch"));
    }
    let mut hist = vec![0f64; HIST_BINS * HIST_BINS * HIST_BINS];
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let bin = |v: f32| {
                (((v.clamp(0.0, 1.0)) * HIST_BINS as f32) as usize).min(HIST_BINS - 1)
            };
            let r = bin(img[[0, y, x]]);
            let g = bin(img[[1, y, x]]);
            let b = bin(img[[2, y, x]]);
            hist[(r * HIST_BINS + g) * HIST_BINS + b] += 1.0;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("histogram: empty mask"));
    }
    let inv = 1.0 / n as f64;
    hist.iter_mut().for_each(|v| *v *= inv);
    Ok(hist)
}

/// L1 distance between normalized color histograms of two masked regions,
/// in [0, 2].
pub fn fg_hist_dist(
    a_img: &RgbImage,
    a_mask: &BinaryMask,
    b_img: &RgbImage,
    b_mask: &BinaryMask,
) -> Result<f64> {
    let ha = color_histogram(a_img, a_mask)?;
    let hb = color_histogram(b_img, b_mask)?;
    Ok(ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum())
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: String,
    pub task: String,
    pub variant: String,
    pub bg_mse: Option<f64>,
    pub fg_hist_subject: Option<f64>,
    pub fg_hist_original: Option<f64>,
    pub status: String,
}

impl EvalRow {
    fn csv_line(&self) -> String {
        let opt = |v: &Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}\n",
            self.id,
            self.task,
            self.variant,
            opt(&self.bg_mse),
            opt(&self.fg_hist_subject),
            opt(&self.fg_hist_original),
            self.status
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var =
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

impl EvalReport {
    /// CSV with one row per case (sorted by id) plus mean/std aggregate rows.
    pub fn to_csv(&self) -> String {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let mut out =
            String::from("case_id,task,variant,bg_mse,fg_hist_subject,fg_hist_original,status\n");
        for r in &rows {
            out.push_str(&r.csv_line());
        }
        let collect = |f: fn(&EvalRow) -> Option<f64>| -> Vec<f64> {
            rows.iter().filter(|r| r.status == "ok").filter_map(f).collect()
        };
        let bg = collect(|r| r.bg_mse);
        let fs = collect(|r| r.fg_hist_subject);
        let fo = collect(|r| r.fg_hist_original);
        for (name, vals) in [("mean", true), ("std", false)] {
            let pick = |v: &[f64]| {
                if v.is_empty() {
                    String::new()
                } else {
                    let (m, s) = mean_std(v);
                    format!("{:.6}", if vals { m } else { s })
                }
            };
            out.push_str(&format!(
                "aggregate-{name},,,{},{},{},\n",
                pick(&bg),
                pick(&fs),
                pick(&fo)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Evaluates run outputs in `results_dir` against the benchmark manifest's
/// ground truth. Outputs are expected at `{results_dir}/{case_id}_output.png`;
/// missing results are listed with a `missing` status rather than failing.
pub fn eval_benchmark(results_dir: &Path, manifest_path: &Path) -> Result<EvalReport> {
    let entries = read_manifest(manifest_path)?;
    let mut rows = Vec::with_capacity(entries.len());
    for e in &entries {
        rows.push(eval_entry(results_dir, e)?);
    }
    Ok(EvalReport { rows })
}

fn eval_entry(results_dir: &Path, e: &ManifestEntry) -> Result<EvalRow> {
    let mut row = EvalRow {
        id: e.id.clone(),
        task: e.task.name().to_string(),
        variant: e.variant.name().to_string(),
        bg_mse: None,
        fg_hist_subject: None,
        fg_hist_original: None,
        status: "ok".to_string(),
    };
    let output_path = results_dir.join(format!("{}_output.png", e.id));
    if !output_path.exists() {
        row.status = "missing".to_string();
        return Ok(row);
    }
    let output = load_png_rgb(&output_path)?;
    let subject = load_png_rgb(&e.subject_image)?;
    let subject_mask = load_mask_png(&e.subject_mask)?;

    match e.task {
        TaskKind::Swapping | TaskKind::Addition => {
            let cond = load_png_rgb(e.condition_image.as_ref().ok_or_else(|| {
                Error::format(format!("case {} lacks a condition image", e.id))
            })?)?;
            let editable = load_mask_png(e.editable_mask.as_ref().ok_or_else(|| {
                Error::format(format!("case {} lacks an editable mask", e.id))
            })?)?;
            let dilated = dilate(&editable, DilationKernel::default());
            row.bg_mse = Some(bg_mse(&output, &cond, &dilated)?);
            row.fg_hist_subject =
                Some(fg_hist_dist(&output, &editable, &subject, &subject_mask)?);
            if e.task == TaskKind::Swapping {
                row.fg_hist_original =
                    Some(fg_hist_dist(&output, &editable, &cond, &editable)?);
            }
        }
        TaskKind::Generation => {
            // region produced by the run itself, written next to the output
            let mask_path = results_dir.join(format!("{}_mc.png", e.id));
            if mask_path.exists() {
                let mc = load_mask_png(&mask_path)?;
                if !mc.is_empty() {
                    row.fg_hist_subject =
                        Some(fg_hist_dist(&output, &mc, &subject, &subject_mask)?);
                }
            } else {
                row.status = "no-region".to_string();
            }
        }
    }
    Ok(row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn flat(color: [f32; 3]) -> RgbImage {
        Array3::from_shape_fn((3, 8, 8), |(c, _, _)| color[c])
    }

    #[test]
    fn bg_mse_identity_is_zero() {
        let img = flat([0.3, 0.5, 0.7]);
        let mask = BinaryMask::from_fn(8, 8, |x, _| x < 4).unwrap();
        assert_eq!(bg_mse(&img, &img, &mask).unwrap(), 0.0);
    }

    #[test]
    fn bg_mse_counts_only_outside() {
        let a = flat([0.0, 0.0, 0.0]);
        let mut b = flat([0.0, 0.0, 0.0]);
        // corrupt a pixel inside the excluded zone: no effect
        for c in 0..3 {
            b[[c, 0, 0]] = 1.0;
        }
        let excluded = BinaryMask::from_fn(8, 8, |x, y| x == 0 && y == 0).unwrap();
        assert_eq!(bg_mse(&a, &b, &excluded).unwrap(), 0.0);
        // corrupt one outside: (1/63)/1 per channel
        for c in 0..3 {
            b[[c, 5, 5]] = 1.0;
        }
        let v = bg_mse(&a, &b, &excluded).unwrap();
        assert!((v - 3.0 / (63.0 * 3.0)).abs() < 1e-12);
    }

    #[test]
    fn hist_dist_zero_for_same_distribution_max_for_disjoint() {
        let red = flat([0.9, 0.1, 0.1]);
        let blue = flat([0.1, 0.1, 0.9]);
        let m = BinaryMask::filled(8, 8, true).unwrap();
        assert_eq!(fg_hist_dist(&red, &m, &red, &m).unwrap(), 0.0);
        assert_eq!(fg_hist_dist(&red, &m, &blue, &m).unwrap(), 2.0);
    }

    #[test]
    fn copy_paste_oracle_scores_zero() {
        // output = condition with the subject's masked pixels pasted into an
        // identically shaped editable region
        let cond = flat([0.2, 0.8, 0.2]);
        let subject = flat([0.9, 0.1, 0.1]);
        let mask = BinaryMask::from_fn(8, 8, |x, y| (2..6).contains(&x) && (2..6).contains(&y))
            .unwrap();
        let mut output = cond.clone();
        for y in 0..8 {
            for x in 0..8 {
                if mask.get(x, y) {
                    for c in 0..3 {
                        output[[c, y, x]] = subject[[c, y, x]];
                    }
                }
            }
        }
        let dilated = dilate(&mask, DilationKernel::default());
        // background untouched outside the dilated mask
        assert_eq!(bg_mse(&output, &cond, &dilated).unwrap(), 0.0);
        // pasted region matches the subject's distribution exactly
        assert_eq!(fg_hist_dist(&output, &mask, &subject, &mask).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_is_invalid() {
        let img = flat([0.5; 3]);
        let empty = BinaryMask::new(8, 8).unwrap();
        assert!(color_histogram(&img, &empty).is_err());
        let full = BinaryMask::filled(8, 8, true).unwrap();
        assert!(bg_mse(&img, &img, &full).is_err());
    }

    #[test]
    fn report_csv_row_count_and_aggregates() {
        let rows = (0..20)
            .map(|i| EvalRow {
                id: format!("case{i:02}"),
                task: "swapping".into(),
                variant: "clean".into(),
                bg_mse: Some(0.01 * i as f64),
                fg_hist_subject: Some(0.5),
                fg_hist_original: Some(1.0),
                status: "ok".into(),
            })
            .collect();
        let report = EvalReport { rows };
        let csv = report.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        // header + 20 cases + 2 aggregates
        assert_eq!(lines.len(), 23);
        assert!(lines[21].starts_with("aggregate-mean"));
        assert!(lines[22].starts_with("aggregate-std"));
    }
}
