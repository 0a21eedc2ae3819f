//! Binary masks, morphological dilation, resolution pyramids, and mask I/O.
//!
//! Masks come from three sources: the synthetic-scene segmenter (see
//! [`crate::segment`]), explicit user region files, and cross-attention map
//! extraction in text-conditioned runs. All of them funnel into [`BinaryMask`]
//! and are downsampled per attention resolution through [`MaskPyramid`].

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major binary mask. `true` = foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("mask dimensions must be positive"));
        }
        Ok(BinaryMask { width, height, bits: vec![false; width * height] })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut m = BinaryMask::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                m.bits[y * width + x] = f(x, y);
            }
        }
        Ok(m)
    }

    pub fn filled(width: usize, height: usize, value: bool) -> Result<Self> {
        let mut m = BinaryMask::new(width, height)?;
        if value {
            m.bits.iter_mut().for_each(|b| *b = true);
        }
        Ok(m)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    /// Flattened row-major view, length `width * height`.
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count_ones() == 0
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::invalid("mask union: dimension mismatch"));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        Ok(BinaryMask { width: self.width, height: self.height, bits })
    }

    pub fn complement(&self) -> BinaryMask {
        let bits = self.bits.iter().map(|b| !*b).collect();
        BinaryMask { width: self.width, height: self.height, bits }
    }

    pub fn is_superset_of(&self, other: &BinaryMask) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.bits.iter().zip(&other.bits).all(|(a, b)| *a || !*b)
    }

    /// Nearest-neighbor upsample by an integer factor.
    pub fn upsample(&self, factor: usize) -> Result<BinaryMask> {
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        BinaryMask::from_fn(self.width * factor, self.height * factor, |x, y| {
            self.get(x / factor, y / factor)
        })
    }
}

/// 3x3 square structuring element applied `iterations` times.
///
/// The kernel size is fixed; only the iteration count varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DilationKernel {
    pub iterations: usize,
}

impl Default for DilationKernel {
    fn default() -> Self {
        DilationKernel { iterations: 1 }
    }
}

/// Binary morphological dilation, clipped at borders.
pub fn dilate(mask: &BinaryMask, kernel: DilationKernel) -> BinaryMask {
    let mut cur = mask.clone();
    for _ in 0..kernel.iterations {
        let mut next = cur.clone();
        for y in 0..cur.height {
            for x in 0..cur.width {
                if cur.get(x, y) {
                    continue;
                }
                let y0 = y.saturating_sub(1);
                let y1 = (y + 1).min(cur.height - 1);
                let x0 = x.saturating_sub(1);
                let x1 = (x + 1).min(cur.width - 1);
                'scan: for ny in y0..=y1 {
                    for nx in x0..=x1 {
                        if cur.get(nx, ny) {
                            next.set(x, y, true);
                            break 'scan;
                        }
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Per-attention-resolution downsamples of a base mask.
///
/// Every attention resolution registered by the denoiser must have an entry;
/// the pipeline refuses to run otherwise.
#[derive(Debug, Clone)]
pub struct MaskPyramid {
    base: BinaryMask,
    levels: BTreeMap<(usize, usize), BinaryMask>,
}

impl MaskPyramid {
    pub fn base(&self) -> &BinaryMask {
        &self.base
    }

    /// Mask at attention resolution `(h, w)`, if registered.
    pub fn level(&self, h: usize, w: usize) -> Option<&BinaryMask> {
        self.levels.get(&(h, w))
    }

    pub fn resolutions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.levels.keys().copied()
    }
}

/// Max-pooling downsample: a cell is set iff any covered base pixel is set.
///
/// Non-divisible resolutions pool over fractional windows
/// `[floor(i*H/h), floor((i+1)*H/h))`.
pub fn build_pyramid(mask: &BinaryMask, resolutions: &[(usize, usize)]) -> Result<MaskPyramid> {
    let mut levels = BTreeMap::new();
    for &(h, w) in resolutions {
        if h == 0 || w == 0 {
            return Err(Error::invalid("pyramid resolution must be positive"));
        }
        if h > mask.height || w > mask.width {
            return Err(Error::invalid(format!(
                "pyramid resolution {h}x{w} exceeds base {}x{}",
                mask.height, mask.width
            )));
        }
        let mut level = BinaryMask::new(w, h)?;
        for i in 0..h {
            let y0 = i * mask.height / h;
            let y1 = ((i + 1) * mask.height / h).max(y0 + 1);
            for j in 0..w {
                let x0 = j * mask.width / w;
                let x1 = ((j + 1) * mask.width / w).max(x0 + 1);
                let mut any = false;
                'cell: for y in y0..y1 {
                    for x in x0..x1 {
                        if mask.get(x, y) {
                            any = true;
                            break 'cell;
                        }
                    }
                }
                level.set(j, i, any);
            }
        }
        levels.insert((h, w), level);
    }
    Ok(MaskPyramid { base: mask.clone(), levels })
}

/// Loads a strictly binary grayscale PNG (0 = background, 255 = foreground).
pub fn load_mask_png(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    let mut mask = BinaryMask::new(w as usize, h as usize)?;
    for (x, y, p) in img.enumerate_pixels() {
        match p.0[0] {
            0 => {}
            255 => mask.set(x as usize, y as usize, true),
            v => {
                return Err(Error::format(format!(
                    "mask {} has non-binary pixel value {v} at ({x}, {y})",
                    path.display()
                )))
            }
        }
    }
    Ok(mask)
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    let mut img = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        p.0[0] = if mask.get(x as usize, y as usize) { 255 } else { 0 };
    }
    img.save(path)?;
    Ok(())
}

/// Parses a region file: one line `x0 y0 x1 y1`, an inclusive pixel box,
/// converted to a filled-rectangle mask on a `width` x `height` canvas.
pub fn load_region_file(path: &Path, width: usize, height: usize) -> Result<BinaryMask> {
    let text = std::fs::read_to_string(path)?;
    parse_region(&text, width, height)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

fn parse_region(text: &str, width: usize, height: usize) -> std::result::Result<BinaryMask, String> {
    let nums: Vec<usize> = text
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| format!("bad region coordinate {t:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if nums.len() != 4 {
        return Err(format!("region file needs 4 coordinates, got {}", nums.len()));
    }
    let (x0, y0, x1, y1) = (nums[0], nums[1], nums[2], nums[3]);
    if x0 > x1 || y0 > y1 {
        return Err("region corners out of order".into());
    }
    if x1 >= width || y1 >= height {
        return Err(format!("region exceeds canvas {width}x{height}"));
    }
    BinaryMask::from_fn(width, height, |x, y| x >= x0 && x <= x1 && y >= y0 && y <= y1)
        .map_err(|e| e.to_string())
}

/// Extracts a binary mask from recorded cross-attention probabilities.
///
/// Averages the designated token's attention over heads and over all supplied
/// maps (the caller picks layers; the default is every decoder layer at the
/// finest attention resolution), min-max normalizes to [0, 1], and thresholds.
/// A perfectly uniform map (max == min) yields the empty mask.
pub fn extract_cross_attention_mask(
    maps: &[&crate::model::CrossAttnMap],
    token_index: usize,
    threshold: f32,
) -> Result<BinaryMask> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("no cross-attention maps supplied"))?;
    let (h, w) = first.resolution;
    let tokens = h * w;
    let mut acc = vec![0f64; tokens];
    let mut n = 0usize;
    for m in maps {
        if m.resolution != (h, w) {
            return Err(Error::invalid("cross-attention maps differ in resolution"));
        }
        if token_index >= m.prompt_len {
            return Err(Error::invalid(format!(
                "token index {token_index} outside prompt of length {}",
                m.prompt_len
            )));
        }
        let heads = m.probs.shape()[0];
        for head in 0..heads {
            for q in 0..tokens {
                acc[q] += m.probs[[head, q, token_index]] as f64;
            }
            n += 1;
        }
    }
    let scale = 1.0 / n as f64;
    acc.iter_mut().for_each(|v| *v *= scale);

    let min = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut mask = BinaryMask::new(w, h)?;
    if max > min {
        let range = max - min;
        for q in 0..tokens {
            let norm = (acc[q] - min) / range;
            if norm > threshold as f64 {
                mask.set(q % w, q / w, true);
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pixel(w: usize, h: usize, x: usize, y: usize) -> BinaryMask {
        let mut m = BinaryMask::new(w, h).unwrap();
        m.set(x, y, true);
        m
    }

    /// Brute-force dilation oracle: direct definition with border clipping.
    fn dilate_oracle(mask: &BinaryMask, iterations: usize) -> BinaryMask {
        let mut cur = mask.clone();
        for _ in 0..iterations {
            let mut next = BinaryMask::new(cur.width(), cur.height()).unwrap();
            for y in 0..cur.height() {
                for x in 0..cur.width() {
                    let mut any = false;
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let nx = x as i64 + dx;
                            let ny = y as i64 + dy;
                            if nx >= 0
                                && ny >= 0
                                && (nx as usize) < cur.width()
                                && (ny as usize) < cur.height()
                                && cur.get(nx as usize, ny as usize)
                            {
                                any = true;
                            }
                        }
                    }
                    next.set(x, y, any);
                }
            }
            cur = next;
        }
        cur
    }

    #[test]
    fn dilate_empty_stays_empty() {
        let m = BinaryMask::new(8, 8).unwrap();
        assert!(dilate(&m, DilationKernel::default()).is_empty());
    }

    #[test]
    fn dilate_single_pixel_becomes_3x3_block() {
        let m = single_pixel(16, 16, 5, 5);
        let d = dilate(&m, DilationKernel::default());
        assert_eq!(d.count_ones(), 9);
        for y in 4..=6 {
            for x in 4..=6 {
                assert!(d.get(x, y));
            }
        }
    }

    #[test]
    fn dilate_corner_pixel_clips_to_2x2() {
        let m = single_pixel(8, 8, 0, 0);
        let d = dilate(&m, DilationKernel::default());
        assert_eq!(d.count_ones(), 4);
        assert_eq!(d, dilate_oracle(&m, 1));
    }

    #[test]
    fn dilate_matches_oracle_on_random_masks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let m = BinaryMask::from_fn(13, 9, |_, _| rng.random_bool(0.2)).unwrap();
            let iters = rng.random_range(0..3);
            assert_eq!(dilate(&m, DilationKernel { iterations: iters }), dilate_oracle(&m, iters));
        }
    }

    #[test]
    fn pyramid_all_ones_and_empty() {
        let ones = BinaryMask::filled(32, 32, true).unwrap();
        let p = build_pyramid(&ones, &[(16, 16), (8, 8)]).unwrap();
        assert_eq!(p.level(16, 16).unwrap().count_ones(), 256);
        assert_eq!(p.level(8, 8).unwrap().count_ones(), 64);

        let empty = BinaryMask::new(32, 32).unwrap();
        let p = build_pyramid(&empty, &[(16, 16), (8, 8)]).unwrap();
        assert!(p.level(16, 16).unwrap().is_empty());
        assert!(p.level(8, 8).unwrap().is_empty());
    }

    #[test]
    fn pyramid_single_pixel_sets_exactly_one_cell_per_level() {
        let m = single_pixel(32, 32, 17, 9);
        let p = build_pyramid(&m, &[(8, 8)]).unwrap();
        let level = p.level(8, 8).unwrap();
        assert_eq!(level.count_ones(), 1);
        // pixel (17, 9) falls in cell (17/4, 9/4) = (4, 2)
        assert!(level.get(4, 2));
    }

    #[test]
    fn pyramid_rejects_upscale() {
        let m = BinaryMask::new(8, 8).unwrap();
        assert!(build_pyramid(&m, &[(16, 16)]).is_err());
    }

    #[test]
    fn region_file_parses_inclusive_box() {
        let m = parse_region("2 3 4 5", 8, 8).unwrap();
        assert_eq!(m.count_ones(), 9);
        assert!(m.get(2, 3) && m.get(4, 5));
        assert!(!m.get(1, 3) && !m.get(5, 5));
        assert!(parse_region("2 3", 8, 8).is_err());
        assert!(parse_region("0 0 8 8", 8, 8).is_err());
    }

    #[test]
    fn mask_png_round_trip_and_nonbinary_rejection() {
        let dir = std::env::temp_dir().join("maskctrl_mask_io_test");
        std::fs::create_dir_all(&dir).unwrap();

        let m = BinaryMask::from_fn(9, 7, |x, y| (x + y) % 3 == 0).unwrap();
        let path = dir.join("m.png");
        save_mask_png(&m, &path).unwrap();
        assert_eq!(load_mask_png(&path).unwrap(), m);

        // 1x1 white PNG -> [[1]]
        let white = dir.join("white.png");
        image::GrayImage::from_pixel(1, 1, image::Luma([255])).save(&white).unwrap();
        let loaded = load_mask_png(&white).unwrap();
        assert_eq!((loaded.width(), loaded.height()), (1, 1));
        assert!(loaded.get(0, 0));

        // gray pixel -> format error
        let gray = dir.join("gray.png");
        image::GrayImage::from_pixel(2, 2, image::Luma([128])).save(&gray).unwrap();
        assert!(matches!(load_mask_png(&gray), Err(Error::Format(_))));
    }
}
