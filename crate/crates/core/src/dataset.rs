//! Training datasets and the benchmark: deterministic sampling of scene
//! specs, benchmark case construction (swapping, addition, generation, plus
//! complex-scene variants), and the on-disk manifest format.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::control::ControlSchedule;
use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::mask::{save_mask_png, BinaryMask};
use crate::model::vocab::{TokenId, Vocab};
use crate::scene::{
    render_scene, Background, BgColor, ObjectSpec, PaletteColor, SceneSpec, Shape, Texture,
    PALETTE_LEN,
};
use crate::segment::ObjectQuery;

pub const SCENE_SIZE: usize = 32;

const SHAPES: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
const TEXTURES: [Texture; 3] = [Texture::Plain, Texture::Striped, Texture::Dotted];

fn random_bg_color(rng: &mut ChaCha8Rng, avoid: &[PaletteColor]) -> BgColor {
    loop {
        let c = match rng.random_range(0..4u8) {
            0 => BgColor::White,
            1 => BgColor::Gray,
            _ => BgColor::Palette(PaletteColor(rng.random_range(0..PALETTE_LEN as u8))),
        };
        if let BgColor::Palette(p) = c {
            if avoid.contains(&p) {
                continue;
            }
        }
        return c;
    }
}

fn pick_color(rng: &mut ChaCha8Rng, avoid: &[PaletteColor]) -> PaletteColor {
    loop {
        let c = PaletteColor(rng.random_range(0..PALETTE_LEN as u8));
        if !avoid.contains(&c) {
            return c;
        }
    }
}

/// Snap to the half-pixel lattice; the localization oracle's exact shape
/// verification searches hypotheses on this lattice.
fn snap(v: f64) -> f64 {
    (v * 2.0).round() / 2.0
}

fn random_object(rng: &mut ChaCha8Rng, avoid_colors: &[PaletteColor], canvas: usize) -> ObjectSpec {
    let color = pick_color(rng, avoid_colors);
    let scale = snap(rng.random_range(5.0..9.0f64));
    let lo = scale + 0.5;
    let hi = canvas as f64 - scale - 0.5;
    ObjectSpec {
        shape: SHAPES[rng.random_range(0..3)],
        color,
        texture: TEXTURES[[0, 0, 0, 1, 2][rng.random_range(0..5)]],
        center: (
            snap(rng.random_range(lo..hi)).clamp(lo, hi),
            snap(rng.random_range(lo..hi)).clamp(lo, hi),
        ),
        scale,
    }
}

/// Single-object training scene with a caption. Backgrounds cover solids,
/// gradients, and checkers; object colors never collide with background
/// palette colors.
fn random_training_spec(rng: &mut ChaCha8Rng, seed: u64) -> SceneSpec {
    let obj = random_object(rng, &[], SCENE_SIZE);
    let background = match rng.random_range(0..5u8) {
        0 | 1 => Background::Solid(random_bg_color(rng, &[obj.color])),
        2 => Background::Solid(BgColor::White),
        3 => Background::Gradient(
            random_bg_color(rng, &[obj.color]),
            random_bg_color(rng, &[obj.color]),
        ),
        _ => Background::Checker(
            random_bg_color(rng, &[obj.color]),
            random_bg_color(rng, &[obj.color]),
        ),
    };
    SceneSpec { background, objects: vec![obj], seed }
}

/// Deterministic (image, caption) pairs for denoiser training.
pub fn make_training_dataset(n: usize, seed: u64) -> Result<Vec<(RgbImage, Vec<TokenId>)>> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let spec = random_training_spec(&mut rng, seed.wrapping_add(i as u64));
        let rendered = render_scene(&spec, SCENE_SIZE)?;
        out.push((rendered.image, spec.caption()?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Generation,
    Swapping,
    Addition,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Generation => "generation",
            TaskKind::Swapping => "swapping",
            TaskKind::Addition => "addition",
        }
    }

    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "generation" => Ok(TaskKind::Generation),
            "swapping" => Ok(TaskKind::Swapping),
            "addition" => Ok(TaskKind::Addition),
            _ => Err(Error::format(format!("unknown task {s:?}"))),
        }
    }
}

/// Complex-scene categories: the situations where subject localization is
/// easiest to confuse.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneVariant {
    Clean,
    MultipleObjects,
    SimilarColors,
    Occlusion,
    Touching,
}

impl SceneVariant {
    pub fn name(self) -> &'static str {
        match self {
            SceneVariant::Clean => "clean",
            SceneVariant::MultipleObjects => "multiple-objects",
            SceneVariant::SimilarColors => "similar-colors",
            SceneVariant::Occlusion => "occlusion",
            SceneVariant::Touching => "touching",
        }
    }

    pub fn parse(s: &str) -> Result<SceneVariant> {
        Ok(match s {
            "clean" => SceneVariant::Clean,
            "multiple-objects" => SceneVariant::MultipleObjects,
            "similar-colors" => SceneVariant::SimilarColors,
            "occlusion" => SceneVariant::Occlusion,
            "touching" => SceneVariant::Touching,
            _ => return Err(Error::format(format!("unknown variant {s:?}"))),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkCase {
    pub id: String,
    pub task: TaskKind,
    pub variant: SceneVariant,
    pub subject_spec: SceneSpec,
    pub subject_query: ObjectQuery,
    pub subject_caption: Vec<TokenId>,
    /// Present for swapping and addition.
    pub condition_spec: Option<SceneSpec>,
    pub condition_caption: Option<Vec<TokenId>>,
    /// Swapping: the object to replace.
    pub edit_query: Option<ObjectQuery>,
    /// Addition: inclusive editable box `(x0, y0, x1, y1)`.
    pub region: Option<(usize, usize, usize, usize)>,
    /// Generation: the text prompt.
    pub prompt: Option<Vec<TokenId>>,
    /// Optional per-case schedule override.
    pub schedule_override: Option<ControlSchedule>,
}

#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub subjects: usize,
    /// Condition images per subject per editing task.
    pub conditions_per_subject: usize,
    /// Generation prompts per subject.
    pub prompts_per_subject: usize,
    /// Swap conditions per subject using each complex-scene category
    /// (0 = clean-only benchmark).
    pub complex_per_category: usize,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            subjects: 2,
            conditions_per_subject: 10,
            prompts_per_subject: 5,
            complex_per_category: 1,
            seed: 1,
        }
    }
}

fn subject_spec_for(index: usize, seed: u64) -> SceneSpec {
    // distinct (shape, color, texture) combination per subject
    let shape = SHAPES[index % 3];
    let color = PaletteColor(((index * 3 + 5) % PALETTE_LEN) as u8);
    let texture = TEXTURES[(index / 3) % 3];
    SceneSpec {
        background: Background::Solid(BgColor::White),
        objects: vec![ObjectSpec { shape, color, texture, center: (16.0, 16.0), scale: 9.0 }],
        seed,
    }
}

/// Picks a palette color adjacent to `to` on the hue wheel, excluding `avoid`.
fn adjacent_color(rng: &mut ChaCha8Rng, to: PaletteColor, avoid: &[PaletteColor]) -> PaletteColor {
    let options = [
        PaletteColor((to.0 + 1) % PALETTE_LEN as u8),
        PaletteColor((to.0 + PALETTE_LEN as u8 - 1) % PALETTE_LEN as u8),
    ];
    let start = rng.random_range(0..2);
    for k in 0..2 {
        let c = options[(start + k) % 2];
        if !avoid.contains(&c) {
            return c;
        }
    }
    options[0]
}

fn place_distractor(
    rng: &mut ChaCha8Rng,
    edit_obj: &ObjectSpec,
    existing: &[ObjectSpec],
    avoid_colors: &[PaletteColor],
) -> ObjectSpec {
    'outer: for _ in 0..200 {
        let d = random_object(rng, avoid_colors, SCENE_SIZE);
        for o in existing.iter().chain(std::iter::once(edit_obj)) {
            let dx = (d.center.0 - o.center.0).abs();
            let dy = (d.center.1 - o.center.1).abs();
            if dx < d.scale + o.scale + 1.0 && dy < d.scale + o.scale + 1.0 {
                continue 'outer;
            }
        }
        return d;
    }
    ObjectSpec {
        shape: Shape::Circle,
        color: pick_color(rng, avoid_colors),
        texture: Texture::Plain,
        center: (5.0, 5.0),
        scale: 4.0,
    }
}

/// Condition scene for a swap case. The editable object is always drawn last
/// (frontmost) so the localization oracle sees it unoccluded; object colors
/// are unique within the scene and distinct from the subject's.
fn swap_condition(
    rng: &mut ChaCha8Rng,
    variant: SceneVariant,
    subject_color: PaletteColor,
    seed: u64,
) -> (SceneSpec, ObjectQuery) {
    let mut edit_obj = random_object(rng, &[subject_color], SCENE_SIZE);
    let mut distractors: Vec<ObjectSpec> = Vec::new();
    let mut background = Background::Solid(random_bg_color(rng, &[edit_obj.color, subject_color]));
    let mut avoid = vec![edit_obj.color, subject_color];

    match variant {
        SceneVariant::Clean => {}
        SceneVariant::MultipleObjects => {
            for _ in 0..2 {
                let d = place_distractor(rng, &edit_obj, &distractors, &avoid);
                avoid.push(d.color);
                distractors.push(d);
            }
        }
        SceneVariant::SimilarColors => {
            let bg = adjacent_color(rng, edit_obj.color, &avoid);
            background = Background::Solid(BgColor::Palette(bg));
        }
        SceneVariant::Occlusion => {
            edit_obj.center = (
                edit_obj.center.0.clamp(edit_obj.scale + 0.5, 20.0),
                edit_obj.center.1.clamp(edit_obj.scale + 0.5, SCENE_SIZE as f64 - edit_obj.scale - 0.5),
            );
            // partially hidden behind the editable object
            let d = ObjectSpec {
                shape: SHAPES[rng.random_range(0..3)],
                color: pick_color(rng, &avoid),
                texture: Texture::Plain,
                center: (
                    (edit_obj.center.0 + edit_obj.scale).min(SCENE_SIZE as f64 - 5.5),
                    edit_obj.center.1,
                ),
                scale: 5.0,
            };
            distractors.push(d);
        }
        SceneVariant::Touching => {
            edit_obj.center = (12.0, 16.0);
            edit_obj.scale = 6.0;
            let d = ObjectSpec {
                shape: SHAPES[rng.random_range(0..3)],
                color: pick_color(rng, &avoid),
                texture: Texture::Plain,
                center: (12.0 + 6.0 + 5.0, 16.0),
                scale: 5.0,
            };
            distractors.push(d);
        }
    }

    let mut objects = distractors;
    objects.push(edit_obj); // painter order: frontmost last
    let query = ObjectQuery { shape: edit_obj.shape, color: edit_obj.color };
    (SceneSpec { background, objects, seed }, query)
}

fn addition_condition(
    rng: &mut ChaCha8Rng,
    subject_color: PaletteColor,
    seed: u64,
) -> (SceneSpec, (usize, usize, usize, usize)) {
    // one distractor in the top half, empty editable box in the bottom half
    let left = rng.random_bool(0.5);
    let dx = if left { 8.0 } else { 24.0 };
    let distractor = ObjectSpec {
        shape: SHAPES[rng.random_range(0..3)],
        color: pick_color(rng, &[subject_color]),
        texture: TEXTURES[rng.random_range(0..3)],
        center: (dx, rng.random_range(7.0..11.0)),
        scale: 5.5,
    };
    let bg = Background::Solid(random_bg_color(rng, &[distractor.color, subject_color]));
    let spec = SceneSpec { background: bg, objects: vec![distractor], seed };
    let bx = if left { 17 } else { 3 };
    (spec, (bx, 18, bx + 11, 29))
}

/// Generation prompt backgrounds, cycled per prompt index.
fn prompt_background(i: usize, subject_color: PaletteColor) -> Background {
    match i % 5 {
        0 => Background::Solid(BgColor::White),
        1 => Background::Solid(BgColor::Gray),
        2 => Background::Checker(BgColor::White, BgColor::Gray),
        3 => Background::Gradient(BgColor::White, BgColor::Gray),
        _ => Background::Solid(BgColor::Palette(PaletteColor(
            (subject_color.0 + 4) % PALETTE_LEN as u8,
        ))),
    }
}

/// Caption describing the queried object in a scene (not necessarily the
/// first in paint order).
fn caption_for_object(spec: &SceneSpec, query: &ObjectQuery) -> Result<Vec<TokenId>> {
    let obj = spec
        .objects
        .iter()
        .find(|o| o.shape == query.shape && o.color == query.color)
        .ok_or_else(|| Error::invalid("queried object not in scene"))?;
    let v = Vocab;
    let mut words: Vec<&str> = Vec::new();
    if obj.texture != Texture::Plain {
        words.push(obj.texture.name());
    }
    words.push(obj.color.name());
    words.push(obj.shape.name());
    words.push("on");
    words.push(spec.background.token_word());
    words.iter().map(|w| v.encode(w)).collect()
}

/// Builds the benchmark: per subject, `conditions_per_subject` swap cases and
/// as many addition cases, plus `prompts_per_subject` generation prompts.
/// Complex-scene variants fill the tail of each subject's swap list.
pub fn make_benchmark(config: &BenchmarkConfig) -> Result<Vec<BenchmarkCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cases = Vec::new();
    let complex: Vec<SceneVariant> = [
        SceneVariant::MultipleObjects,
        SceneVariant::SimilarColors,
        SceneVariant::Occlusion,
        SceneVariant::Touching,
    ]
    .iter()
    .flat_map(|v| std::iter::repeat(*v).take(config.complex_per_category))
    .collect();
    if complex.len() > config.conditions_per_subject {
        return Err(Error::config("complex_per_category * 4 exceeds conditions_per_subject"));
    }

    for si in 0..config.subjects {
        let subject_spec = subject_spec_for(si, config.seed.wrapping_add(si as u64));
        let sobj = subject_spec.objects[0];
        let subject_query = ObjectQuery { shape: sobj.shape, color: sobj.color };
        let subject_caption = subject_spec.caption()?;

        for k in 0..config.conditions_per_subject {
            let clean_count = config.conditions_per_subject - complex.len();
            let variant =
                if k < clean_count { SceneVariant::Clean } else { complex[k - clean_count] };
            let case_seed = config.seed.wrapping_add((si * 1000 + k) as u64);

            let (cond_spec, edit_query) = swap_condition(&mut rng, variant, sobj.color, case_seed);
            let condition_caption = caption_for_object(&cond_spec, &edit_query)?;
            cases.push(BenchmarkCase {
                id: format!("s{si}-swap{k:02}"),
                task: TaskKind::Swapping,
                variant,
                subject_spec: subject_spec.clone(),
                subject_query,
                subject_caption: subject_caption.clone(),
                condition_spec: Some(cond_spec),
                condition_caption: Some(condition_caption),
                edit_query: Some(edit_query),
                region: None,
                prompt: None,
                schedule_override: None,
            });

            let (add_spec, region) = addition_condition(&mut rng, sobj.color, case_seed);
            let add_caption = add_spec.caption()?;
            cases.push(BenchmarkCase {
                id: format!("s{si}-add{k:02}"),
                task: TaskKind::Addition,
                variant: SceneVariant::Clean,
                subject_spec: subject_spec.clone(),
                subject_query,
                subject_caption: subject_caption.clone(),
                condition_spec: Some(add_spec),
                condition_caption: Some(add_caption),
                edit_query: None,
                region: Some(region),
                prompt: None,
                schedule_override: None,
            });
        }

        for p in 0..config.prompts_per_subject {
            let prompt_spec = SceneSpec {
                background: prompt_background(p, sobj.color),
                objects: vec![ObjectSpec { center: (16.0, 16.0), scale: 8.0, ..sobj }],
                seed: 0,
            };
            cases.push(BenchmarkCase {
                id: format!("s{si}-gen{p:02}"),
                task: TaskKind::Generation,
                variant: SceneVariant::Clean,
                subject_spec: subject_spec.clone(),
                subject_query,
                subject_caption: subject_caption.clone(),
                condition_spec: None,
                condition_caption: None,
                edit_query: None,
                region: None,
                prompt: Some(prompt_spec.caption()?),
                schedule_override: None,
            });
        }
    }
    Ok(cases)
}

/// One parsed manifest line.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub task: TaskKind,
    pub variant: SceneVariant,
    pub subject_image: PathBuf,
    pub subject_mask: PathBuf,
    pub subject_caption: String,
    pub subject_query: String,
    pub condition_image: Option<PathBuf>,
    pub editable_mask: Option<PathBuf>,
    pub condition_caption: Option<String>,
    pub edit_query: Option<String>,
    pub region_file: Option<PathBuf>,
    pub prompt: Option<String>,
    pub schedule_override: Option<ControlSchedule>,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.id, self.task.name())
    }
}

/// Renders and writes a benchmark to `dir`: per-case PNGs, ground-truth mask
/// PNGs, region files, and a tab-separated manifest, one line per case.
pub fn write_benchmark(cases: &[BenchmarkCase], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let vocab = Vocab;
    let mut manifest = String::new();
    for case in cases {
        let subject = render_scene(&case.subject_spec, SCENE_SIZE)?;
        let subject_image = dir.join(format!("{}_subject.png", case.id));
        crate::imageio::save_png_rgb(&subject.image, &subject_image)?;
        let subject_mask_path = dir.join(format!("{}_subject_mask.png", case.id));
        save_mask_png(&subject.object_masks[0], &subject_mask_path)?;

        let mut cond_field = "-".to_string();
        let mut edit_field = "-".to_string();
        let mut editable_mask_field = "-".to_string();
        let mut region_field = "-".to_string();
        let mut cond_caption_field = "-".to_string();
        if let Some(cspec) = &case.condition_spec {
            let cond = render_scene(cspec, SCENE_SIZE)?;
            let cond_path = dir.join(format!("{}_condition.png", case.id));
            crate::imageio::save_png_rgb(&cond.image, &cond_path)?;
            cond_field = cond_path.file_name().unwrap().to_string_lossy().into_owned();

            let editable_gt: BinaryMask = match case.task {
                TaskKind::Swapping => {
                    let q = case.edit_query.as_ref().expect("swap case has edit query");
                    let idx = cspec
                        .objects
                        .iter()
                        .position(|o| o.shape == q.shape && o.color == q.color)
                        .expect("editable object present");
                    cond.object_masks[idx].clone()
                }
                TaskKind::Addition => {
                    let (x0, y0, x1, y1) = case.region.expect("addition case has region");
                    BinaryMask::from_fn(SCENE_SIZE, SCENE_SIZE, |x, y| {
                        x >= x0 && x <= x1 && y >= y0 && y <= y1
                    })?
                }
                TaskKind::Generation => unreachable!("generation has no condition"),
            };
            let em_path = dir.join(format!("{}_editable.png", case.id));
            save_mask_png(&editable_gt, &em_path)?;
            editable_mask_field = em_path.file_name().unwrap().to_string_lossy().into_owned();

            if let Some(q) = &case.edit_query {
                edit_field = q.phrase();
            }
            if let Some((x0, y0, x1, y1)) = case.region {
                let region_path = dir.join(format!("{}_region.txt", case.id));
                std::fs::write(&region_path, format!("{x0} {y0} {x1} {y1}\n"))?;
                region_field = region_path.file_name().unwrap().to_string_lossy().into_owned();
            }
            if let Some(cc) = &case.condition_caption {
                cond_caption_field = vocab.decode_phrase(cc)?;
            }
        }

        let prompt_field = match &case.prompt {
            Some(p) => vocab.decode_phrase(p)?,
            None => "-".to_string(),
        };
        let sched_field = match &case.schedule_override {
            Some(s) => s.to_text().trim_end().replace('\n', ";"),
            None => "-".to_string(),
        };

        manifest.push_str(&format!(
            "{id}\t{task}\t{variant}\t{subj}\t{subj_mask}\t{subj_cap}\t{subj_q}\t{cond}\t{editable}\t{cond_cap}\t{edit_q}\t{region}\t{prompt}\t{sched}\n",
            id = case.id,
            task = case.task.name(),
            variant = case.variant.name(),
            subj = subject_image.file_name().unwrap().to_string_lossy(),
            subj_mask = subject_mask_path.file_name().unwrap().to_string_lossy(),
            subj_cap = vocab.decode_phrase(&case.subject_caption)?,
            subj_q = case.subject_query.phrase(),
            cond = cond_field,
            editable = editable_mask_field,
            cond_cap = cond_caption_field,
            edit_q = edit_field,
            region = region_field,
            prompt = prompt_field,
            sched = sched_field,
        ));
    }
    let manifest_path = dir.join("manifest.tsv");
    std::fs::write(&manifest_path, manifest)?;
    Ok(manifest_path)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 14 {
            return Err(Error::format(format!(
                "manifest line {} has {} fields, expected 14",
                ln + 1,
                fields.len()
            )));
        }
        let opt = |s: &str| if s == "-" { None } else { Some(s.to_string()) };
        let opt_path = |s: &str| opt(s).map(|p| dir.join(p));
        out.push(ManifestEntry {
            id: fields[0].to_string(),
            task: TaskKind::parse(fields[1])?,
            variant: SceneVariant::parse(fields[2])?,
            subject_image: dir.join(fields[3]),
            subject_mask: dir.join(fields[4]),
            subject_caption: fields[5].to_string(),
            subject_query: fields[6].to_string(),
            condition_image: opt_path(fields[7]),
            editable_mask: opt_path(fields[8]),
            condition_caption: opt(fields[9]),
            edit_query: opt(fields[10]),
            region_file: opt_path(fields[11]),
            prompt: opt(fields[12]),
            schedule_override: match opt(fields[13]) {
                Some(s) => Some(ControlSchedule::from_text(&s.replace(';', "\n"))?),
                None => None,
            },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_dataset_is_deterministic_and_captions_round_trip() {
        let a = make_training_dataset(8, 3).unwrap();
        let b = make_training_dataset(8, 3).unwrap();
        assert_eq!(a.len(), 8);
        for ((img_a, cap_a), (img_b, cap_b)) in a.iter().zip(&b) {
            assert_eq!(img_a, img_b);
            assert_eq!(cap_a, cap_b);
            let phrase = Vocab.decode_phrase(cap_a).unwrap();
            assert_eq!(Vocab.encode_phrase(&phrase).unwrap(), *cap_a);
        }
    }

    #[test]
    fn single_pair_reproducible_and_zero_rejected() {
        let a = make_training_dataset(1, 9).unwrap();
        let b = make_training_dataset(1, 9).unwrap();
        assert_eq!(a[0].0, b[0].0);
        assert!(make_training_dataset(0, 9).is_err());
    }

    #[test]
    fn benchmark_counts_match_config() {
        let cfg = BenchmarkConfig {
            subjects: 2,
            conditions_per_subject: 10,
            prompts_per_subject: 5,
            complex_per_category: 1,
            seed: 7,
        };
        let cases = make_benchmark(&cfg).unwrap();
        let swaps = cases.iter().filter(|c| c.task == TaskKind::Swapping).count();
        let adds = cases.iter().filter(|c| c.task == TaskKind::Addition).count();
        let gens = cases.iter().filter(|c| c.task == TaskKind::Generation).count();
        assert_eq!(swaps, 20);
        assert_eq!(adds, 20);
        assert_eq!(gens, 10);
        for v in ["multiple-objects", "similar-colors", "occlusion", "touching"] {
            let n = cases
                .iter()
                .filter(|c| c.task == TaskKind::Swapping && c.variant.name() == v)
                .count();
            assert_eq!(n, 2, "variant {v}");
        }
    }

    #[test]
    fn swap_cases_localize_exactly_to_ground_truth() {
        let cfg = BenchmarkConfig { subjects: 2, conditions_per_subject: 6, ..Default::default() };
        let cases = make_benchmark(&cfg).unwrap();
        for case in cases.iter().filter(|c| c.task == TaskKind::Swapping) {
            let spec = case.condition_spec.as_ref().unwrap();
            let q = case.edit_query.as_ref().unwrap();
            let rendered = render_scene(spec, SCENE_SIZE).unwrap();
            let idx = spec
                .objects
                .iter()
                .position(|o| o.shape == q.shape && o.color == q.color)
                .expect("editable object exists");
            assert!(!rendered.object_masks[idx].is_empty());
            let m = crate::segment::segment_synthetic(&rendered.image, q).unwrap();
            assert_eq!(m, rendered.object_masks[idx], "case {} ({})", case.id, case.variant.name());
        }
    }

    #[test]
    fn occlusion_variant_masks_are_disjoint() {
        let cfg = BenchmarkConfig {
            subjects: 1,
            conditions_per_subject: 5,
            complex_per_category: 1,
            ..Default::default()
        };
        let cases = make_benchmark(&cfg).unwrap();
        let occ = cases
            .iter()
            .find(|c| c.variant == SceneVariant::Occlusion)
            .expect("occlusion case present");
        let rendered = render_scene(occ.condition_spec.as_ref().unwrap(), SCENE_SIZE).unwrap();
        assert!(rendered.object_masks.len() >= 2);
        for i in 0..rendered.object_masks.len() {
            for j in i + 1..rendered.object_masks.len() {
                let overlap = rendered.object_masks[i]
                    .bits()
                    .iter()
                    .zip(rendered.object_masks[j].bits())
                    .any(|(a, b)| *a && *b);
                assert!(!overlap);
            }
        }
    }

    #[test]
    fn similar_colors_variant_is_palette_adjacent() {
        let cfg = BenchmarkConfig {
            subjects: 1,
            conditions_per_subject: 5,
            complex_per_category: 1,
            ..Default::default()
        };
        let cases = make_benchmark(&cfg).unwrap();
        let sim = cases
            .iter()
            .find(|c| c.variant == SceneVariant::SimilarColors)
            .expect("similar-colors case present");
        let spec = sim.condition_spec.as_ref().unwrap();
        let q = sim.edit_query.as_ref().unwrap();
        match spec.background {
            Background::Solid(BgColor::Palette(bg)) => assert_eq!(q.color.distance(bg), 1),
            _ => panic!("similar-colors background must be a palette solid"),
        }
    }

    #[test]
    fn addition_regions_are_object_free() {
        let cfg = BenchmarkConfig { subjects: 2, conditions_per_subject: 4, ..Default::default() };
        let cases = make_benchmark(&cfg).unwrap();
        for case in cases.iter().filter(|c| c.task == TaskKind::Addition) {
            let spec = case.condition_spec.as_ref().unwrap();
            let rendered = render_scene(spec, SCENE_SIZE).unwrap();
            let (x0, y0, x1, y1) = case.region.unwrap();
            for m in &rendered.object_masks {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        assert!(!m.get(x, y), "object intrudes into the editable box");
                    }
                }
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = BenchmarkConfig {
            subjects: 1,
            conditions_per_subject: 2,
            prompts_per_subject: 2,
            complex_per_category: 0,
            seed: 5,
        };
        let cases = make_benchmark(&cfg).unwrap();
        let dir = std::env::temp_dir().join("maskctrl_manifest_test");
        let _ = std::fs::remove_dir_all(&dir);
        let manifest = write_benchmark(&cases, &dir).unwrap();
        let entries = read_manifest(&manifest).unwrap();
        assert_eq!(entries.len(), cases.len());
        for (e, c) in entries.iter().zip(&cases) {
            assert_eq!(e.id, c.id);
            assert_eq!(e.task, c.task);
            assert!(e.subject_image.exists());
            assert!(e.subject_mask.exists());
            if c.task == TaskKind::Swapping {
                assert!(e.condition_image.as_ref().unwrap().exists());
                assert!(e.editable_mask.as_ref().unwrap().exists());
            }
            if c.task == TaskKind::Generation {
                assert!(e.prompt.is_some());
            }
        }
    }
}
