//! Deterministic procedural toy scenes with exact ground-truth masks.
//!
//! Scenes are flat-shaded shapes over simple backgrounds, rasterized without
//! anti-aliasing by a pixel-center inside test, so the generator's masks are
//! exact pixel sets and the same spec always renders to identical bytes.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::imageio::RgbImage;
use crate::mask::BinaryMask;
use crate::model::vocab::{TokenId, Vocab};

pub const PALETTE_LEN: usize = 8;

/// Object palette, ordered as a hue wheel so that adjacent indices are
/// visually similar (used by the "similar colors" benchmark variant).
const PALETTE_NAMES: [&str; PALETTE_LEN] =
    ["red", "orange", "yellow", "green", "cyan", "blue", "purple", "magenta"];

const PALETTE_RGB: [[f32; 3]; PALETTE_LEN] = [
    [0.90, 0.10, 0.10], // red
    [0.95, 0.55, 0.10], // orange
    [0.95, 0.90, 0.10], // yellow
    [0.10, 0.75, 0.20], // green
    [0.10, 0.80, 0.85], // cyan
    [0.15, 0.25, 0.90], // blue
    [0.55, 0.15, 0.85], // purple
    [0.90, 0.15, 0.70], // magenta
];

const WHITE_RGB: [f32; 3] = [0.95, 0.95, 0.95];
const GRAY_RGB: [f32; 3] = [0.55, 0.55, 0.55];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PaletteColor(pub u8);

impl PaletteColor {
    pub fn name(self) -> &'static str {
        PALETTE_NAMES[self.0 as usize]
    }

    pub fn rgb(self) -> [f32; 3] {
        PALETTE_RGB[self.0 as usize]
    }

    pub fn from_name(name: &str) -> Option<PaletteColor> {
        PALETTE_NAMES.iter().position(|n| *n == name).map(|i| PaletteColor(i as u8))
    }

    /// Circular distance on the hue wheel.
    pub fn distance(self, other: PaletteColor) -> u8 {
        let d = (self.0 as i16 - other.0 as i16).unsigned_abs() as u8;
        d.min(PALETTE_LEN as u8 - d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        match name {
            "circle" => Some(Shape::Circle),
            "square" => Some(Shape::Square),
            "triangle" => Some(Shape::Triangle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Texture {
    Plain,
    Striped,
    Dotted,
}

impl Texture {
    pub fn name(self) -> &'static str {
        match self {
            Texture::Plain => "plain",
            Texture::Striped => "striped",
            Texture::Dotted => "dotted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BgColor {
    White,
    Gray,
    Palette(PaletteColor),
}

impl BgColor {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            BgColor::White => WHITE_RGB,
            BgColor::Gray => GRAY_RGB,
            BgColor::Palette(c) => c.rgb(),
        }
    }

    pub fn token_word(self) -> &'static str {
        match self {
            BgColor::White => "white",
            BgColor::Gray => "gray",
            BgColor::Palette(c) => c.name(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    Solid(BgColor),
    /// Vertical two-tone gradient, top to bottom.
    Gradient(BgColor, BgColor),
    /// Checkerboard with 4-pixel cells.
    Checker(BgColor, BgColor),
}

impl Background {
    pub fn token_word(self) -> &'static str {
        match self {
            Background::Solid(c) => c.token_word(),
            Background::Gradient(..) => "gradient",
            Background::Checker(..) => "checker",
        }
    }
}

/// One shape instance. `center` and `scale` are in pixel coordinates: a
/// circle covers pixels whose centers lie within `scale` of `center`, a
/// square spans `center +- scale` on both axes, a triangle is the upward
/// isoceles triangle inscribed in that box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: PaletteColor,
    pub texture: Texture,
    pub center: (f64, f64),
    pub scale: f64,
}

impl ObjectSpec {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center;
        let s = self.scale;
        match self.shape {
            Shape::Circle => {
                let dx = px - cx;
                let dy = py - cy;
                dx * dx + dy * dy < s * s
            }
            Shape::Square => (px - cx).abs() < s && (py - cy).abs() < s,
            Shape::Triangle => {
                // apex at (cx, cy - s), base at y = cy + s
                let dy = py - cy;
                if dy <= -s || dy >= s {
                    return false;
                }
                (px - cx).abs() < (dy + s) / 2.0
            }
        }
    }

    /// Fill color at a pixel, after texture patterning.
    fn color_at(&self, x: usize, y: usize) -> [f32; 3] {
        let base = self.color.rgb();
        match self.texture {
            Texture::Plain => base,
            Texture::Striped => {
                if (y / 2) % 2 == 0 {
                    base
                } else {
                    stripe_dark(base)
                }
            }
            Texture::Dotted => {
                if x % 3 == 1 && y % 3 == 1 {
                    dot_light(base)
                } else {
                    base
                }
            }
        }
    }
}

pub fn stripe_dark(base: [f32; 3]) -> [f32; 3] {
    [base[0] * 0.6, base[1] * 0.6, base[2] * 0.6]
}

pub fn dot_light(base: [f32; 3]) -> [f32; 3] {
    [
        base[0] + (1.0 - base[0]) * 0.5,
        base[1] + (1.0 - base[1]) * 0.5,
        base[2] + (1.0 - base[2]) * 0.5,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub background: Background,
    pub objects: Vec<ObjectSpec>,
    pub seed: u64,
}

impl SceneSpec {
    /// Caption tokens describing the primary (first) object, e.g.
    /// "striped red circle on white". Plain texture is left implicit.
    pub fn caption(&self) -> Result<Vec<TokenId>> {
        let v = Vocab;
        let mut words: Vec<&str> = Vec::new();
        if let Some(obj) = self.objects.first() {
            if obj.texture != Texture::Plain {
                words.push(obj.texture.name());
            }
            words.push(obj.color.name());
            words.push(obj.shape.name());
        }
        words.push("on");
        words.push(self.background.token_word());
        words.iter().map(|w| v.encode(w)).collect()
    }
}

pub struct RenderedScene {
    pub image: RgbImage,
    /// One mask per object, in spec order. Masks are disjoint: where objects
    /// overlap, the later-drawn (front) object owns the pixel.
    pub object_masks: Vec<BinaryMask>,
}

/// Deterministic rasterization. Same `(spec, size)` always produces
/// identical bytes.
pub fn render_scene(spec: &SceneSpec, size: usize) -> Result<RenderedScene> {
    if spec.objects.len() > 3 {
        return Err(Error::invalid("at most 3 objects per scene"));
    }
    for obj in &spec.objects {
        let (cx, cy) = obj.center;
        let s = obj.scale;
        if s <= 0.0 || cx - s < 0.0 || cx + s > size as f64 || cy - s < 0.0 || cy + s > size as f64
        {
            return Err(Error::invalid(format!(
                "object at ({cx}, {cy}) scale {s} out of {size}x{size} canvas"
            )));
        }
    }

    let mut image: RgbImage = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let rgb = background_at(&spec.background, x, y, size);
            for c in 0..3 {
                image[[c, y, x]] = rgb[c];
            }
        }
    }

    let mut owner: Vec<Option<usize>> = vec![None; size * size];
    for (i, obj) in spec.objects.iter().enumerate() {
        for y in 0..size {
            let py = y as f64 + 0.5;
            for x in 0..size {
                let px = x as f64 + 0.5;
                if obj.contains(px, py) {
                    owner[y * size + x] = Some(i);
                    let rgb = obj.color_at(x, y);
                    for c in 0..3 {
                        image[[c, y, x]] = rgb[c];
                    }
                }
            }
        }
    }

    let mut object_masks = Vec::with_capacity(spec.objects.len());
    for i in 0..spec.objects.len() {
        let m = BinaryMask::from_fn(size, size, |x, y| owner[y * size + x] == Some(i))?;
        object_masks.push(m);
    }
    Ok(RenderedScene { image, object_masks })
}

fn background_at(bg: &Background, x: usize, y: usize, size: usize) -> [f32; 3] {
    match bg {
        Background::Solid(c) => c.rgb(),
        Background::Gradient(top, bottom) => {
            let t = if size > 1 { y as f32 / (size - 1) as f32 } else { 0.0 };
            let a = top.rgb();
            let b = bottom.rgb();
            [
                a[0] + (b[0] - a[0]) * t,
                a[1] + (b[1] - a[1]) * t,
                a[2] + (b[2] - a[2]) * t,
            ]
        }
        Background::Checker(a, b) => {
            if (x / 4 + y / 4) % 2 == 0 {
                a.rgb()
            } else {
                b.rgb()
            }
        }
    }
}
