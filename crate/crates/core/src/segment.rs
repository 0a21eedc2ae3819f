//! Synthetic-scene subject localization.
//!
//! Stands in for an open-vocabulary detector+segmenter stack: on scenes from
//! the toy generator it is exact, because the query's color variants are
//! separable from every other palette color and the shape verifier re-derives
//! the rasterization that produced the component. A query that matches
//! nothing is reported as a localization failure rather than guessed at.

use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::mask::BinaryMask;
use crate::scene::{dot_light, stripe_dark, ObjectSpec, PaletteColor, Shape, Texture};

/// What to look for: "blue square", "striped red circle" (texture words are
/// accepted and ignored; matching is texture-agnostic).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ObjectQuery {
    pub shape: Shape,
    pub color: PaletteColor,
}

impl ObjectQuery {
    /// Parses a query phrase of color and shape words in any order.
    pub fn parse(phrase: &str) -> Result<ObjectQuery> {
        let mut shape = None;
        let mut color = None;
        for word in phrase.split_whitespace() {
            let w = word.to_lowercase();
            if let Some(s) = Shape::from_name(&w) {
                shape = Some(s);
            } else if let Some(c) = PaletteColor::from_name(&w) {
                color = Some(c);
            } else if !matches!(w.as_str(), "plain" | "striped" | "dotted") {
                return Err(Error::invalid(format!("unknown query word {w:?}")));
            }
        }
        match (shape, color) {
            (Some(shape), Some(color)) => Ok(ObjectQuery { shape, color }),
            _ => Err(Error::invalid(format!(
                "query {phrase:?} must name a color and a shape"
            ))),
        }
    }

    pub fn phrase(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

/// Per-pixel color match tolerance (L-inf, in [0,1] units). Palette colors
/// and their texture variants stay separated by more than 3x this value.
const COLOR_TOL: f32 = 0.1;

/// Components smaller than this are treated as noise.
const MIN_COMPONENT: usize = 6;

fn color_variants(c: PaletteColor) -> [[f32; 3]; 3] {
    let base = c.rgb();
    [base, stripe_dark(base), dot_light(base)]
}

fn matches_color(px: [f32; 3], variants: &[[f32; 3]; 3]) -> bool {
    variants.iter().any(|v| {
        (px[0] - v[0]).abs().max((px[1] - v[1]).abs()).max((px[2] - v[2]).abs()) <= COLOR_TOL
    })
}

/// Locates the queried object and returns its exact pixel mask.
///
/// Matching pixels (any texture variant of the query color) are grouped into
/// 8-connected components; a component is accepted when some shape hypothesis
/// of the queried kind rasterizes to exactly that pixel set. The union of
/// accepted components is returned. No match is a `NotFound` error.
pub fn segment_synthetic(scene: &RgbImage, query: &ObjectQuery) -> Result<BinaryMask> {
    let (_, h, w) = scene.dim();
    let variants = color_variants(query.color);

    let mut matched = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let px = [scene[[0, y, x]], scene[[1, y, x]], scene[[2, y, x]]];
            matched[y * w + x] = matches_color(px, &variants);
        }
    }

    let components = connected_components(&matched, w, h);
    let mut out = BinaryMask::new(w, h)?;
    let mut found = false;
    for comp in &components {
        if comp.len() < MIN_COMPONENT {
            continue;
        }
        if verify_shape(comp, w, h, query.shape) {
            found = true;
            for &(x, y) in comp {
                out.set(x, y, true);
            }
        }
    }
    if !found {
        return Err(Error::NotFound(format!("no {} in scene", query.phrase())));
    }
    Ok(out)
}

fn connected_components(matched: &[bool], w: usize, h: usize) -> Vec<Vec<(usize, usize)>> {
    let mut seen = vec![false; w * h];
    let mut comps = Vec::new();
    for start in 0..w * h {
        if !matched[start] || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(idx) = stack.pop() {
            let (x, y) = (idx % w, idx / w);
            comp.push((x, y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if matched[nidx] && !seen[nidx] {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Checks that the component is exactly the rasterization of some instance
/// of `shape`. Hypotheses are searched on the half-pixel lattice around the
/// component's bounding box.
fn verify_shape(comp: &[(usize, usize)], w: usize, h: usize, shape: Shape) -> bool {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for &(x, y) in comp {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let bw = (x1 - x0 + 1) as f64;
    let bh = (y1 - y0 + 1) as f64;
    let cx0 = x0 as f64 + bw / 2.0;
    let cy0 = y0 as f64 + bh / 2.0;

    let mut comp_set = vec![false; w * h];
    for &(x, y) in comp {
        comp_set[y * w + x] = true;
    }

    let offsets = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let mut scales = Vec::new();
    let base_scales = [bw / 2.0, bh / 2.0];
    for b in base_scales {
        for d in [-1.0, -0.5, 0.0, 0.5, 1.0] {
            let s = b + d;
            if s > 0.5 {
                scales.push(s);
            }
        }
    }

    for &ox in &offsets {
        for &oy in &offsets {
            for &s in &scales {
                let hypothesis = ObjectSpec {
                    shape,
                    color: PaletteColor(0), // irrelevant for geometry
                    texture: Texture::Plain,
                    center: (cx0 + ox, cy0 + oy),
                    scale: s,
                };
                if raster_equals(&hypothesis, &comp_set, w, h) {
                    return true;
                }
            }
        }
    }
    false
}

fn raster_equals(obj: &ObjectSpec, comp_set: &[bool], w: usize, h: usize) -> bool {
    for y in 0..h {
        let py = y as f64 + 0.5;
        for x in 0..w {
            let px = x as f64 + 0.5;
            let inside = {
                let (cx, cy) = obj.center;
                let s = obj.scale;
                match obj.shape {
                    Shape::Circle => {
                        let dx = px - cx;
                        let dy = py - cy;
                        dx * dx + dy * dy < s * s
                    }
                    Shape::Square => (px - cx).abs() < s && (py - cy).abs() < s,
                    Shape::Triangle => {
                        let dy = py - cy;
                        dy > -s && dy < s && (px - cx).abs() < (dy + s) / 2.0
                    }
                }
            };
            if inside != comp_set[y * w + x] {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render_scene, Background, BgColor, SceneSpec};

    fn two_object_scene() -> SceneSpec {
        SceneSpec {
            background: Background::Solid(BgColor::White),
            objects: vec![
                ObjectSpec {
                    shape: Shape::Circle,
                    color: PaletteColor::from_name("red").unwrap(),
                    texture: Texture::Plain,
                    center: (9.0, 10.0),
                    scale: 5.0,
                },
                ObjectSpec {
                    shape: Shape::Square,
                    color: PaletteColor::from_name("blue").unwrap(),
                    texture: Texture::Striped,
                    center: (22.0, 21.0),
                    scale: 6.0,
                },
            ],
            seed: 3,
        }
    }

    #[test]
    fn finds_single_object_exactly() {
        let spec = SceneSpec {
            background: Background::Solid(BgColor::White),
            objects: vec![ObjectSpec {
                shape: Shape::Circle,
                color: PaletteColor::from_name("red").unwrap(),
                texture: Texture::Plain,
                center: (16.0, 16.0),
                scale: 8.0,
            }],
            seed: 0,
        };
        let r = render_scene(&spec, 32).unwrap();
        let q = ObjectQuery::parse("red circle").unwrap();
        let m = segment_synthetic(&r.image, &q).unwrap();
        assert_eq!(m, r.object_masks[0]);
    }

    #[test]
    fn distinguishes_objects_in_multi_object_scene() {
        let r = render_scene(&two_object_scene(), 32).unwrap();
        let q = ObjectQuery::parse("blue square").unwrap();
        let m = segment_synthetic(&r.image, &q).unwrap();
        assert_eq!(m, r.object_masks[1]);
    }

    #[test]
    fn missing_object_is_not_found() {
        let r = render_scene(&two_object_scene(), 32).unwrap();
        let q = ObjectQuery::parse("green triangle").unwrap();
        assert!(matches!(segment_synthetic(&r.image, &q), Err(Error::NotFound(_))));
    }

    #[test]
    fn textured_objects_still_match() {
        let spec = SceneSpec {
            background: Background::Solid(BgColor::Gray),
            objects: vec![ObjectSpec {
                shape: Shape::Triangle,
                color: PaletteColor::from_name("magenta").unwrap(),
                texture: Texture::Dotted,
                center: (15.5, 17.0),
                scale: 9.0,
            }],
            seed: 0,
        };
        let r = render_scene(&spec, 32).unwrap();
        let q = ObjectQuery::parse("dotted magenta triangle").unwrap();
        let m = segment_synthetic(&r.image, &q).unwrap();
        assert_eq!(m, r.object_masks[0]);
    }

    #[test]
    fn wrong_shape_same_color_is_not_found() {
        let r = render_scene(&two_object_scene(), 32).unwrap();
        let q = ObjectQuery::parse("red square").unwrap();
        assert!(segment_synthetic(&r.image, &q).is_err());
    }

    #[test]
    fn query_parse_validates_words() {
        assert!(ObjectQuery::parse("red circle").is_ok());
        assert!(ObjectQuery::parse("circle red").is_ok());
        assert!(ObjectQuery::parse("red").is_err());
        assert!(ObjectQuery::parse("red zeppelin").is_err());
    }
}
