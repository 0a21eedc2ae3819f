//! RGB image I/O and conversions between pixel space and latent space.
//!
//! Images are `[3, H, W]` f32 arrays in [0, 1]. The diffusion process runs in
//! pixel space (the latent encoder is the identity up to an affine rescale to
//! [-1, 1]), so these conversions are the only "encoding" in the system.

use std::path::Path;

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};
use crate::Latent;

/// RGB image, channel-major `[3, H, W]`, values in [0, 1].
pub type RgbImage = Array3<f32>;

pub fn load_png_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_png_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::invalid("expected 3 channels"));
    }
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (x, y, p) in out.enumerate_pixels_mut() {
        for ch in 0..3 {
            let v = img[[ch, y as usize, x as usize]].clamp(0.0, 1.0);
            p.0[ch] = (v * 255.0).round() as u8;
        }
    }
    out.save(path)?;
    Ok(())
}

/// Pixel image in [0, 1] to a width-1 latent batch in [-1, 1].
pub fn image_to_latent(img: &RgbImage) -> Latent {
    let (c, h, w) = img.dim();
    let mut out = Array4::zeros((1, c, h, w));
    for ((ch, y, x), v) in img.indexed_iter() {
        out[[0, ch, y, x]] = (*v as f64) * 2.0 - 1.0;
    }
    out
}

/// Latent batch element `b` back to a clamped [0, 1] pixel image.
pub fn latent_to_image(z: &Latent, b: usize) -> RgbImage {
    let (_, c, h, w) = z.dim();
    let mut out = Array3::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ch, y, x]] = (((z[[b, ch, y, x]] + 1.0) / 2.0).clamp(0.0, 1.0)) as f32;
            }
        }
    }
    out
}

/// Mean absolute difference in [0, 1] pixel units between two latents.
pub fn mean_abs_pixel_error(a: &Latent, b: &Latent) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_preserves_quantized_values() {
        let dir = std::env::temp_dir().join("maskctrl_imageio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let img = Array3::from_shape_fn((3, 5, 4), |(c, y, x)| {
            ((c * 37 + y * 11 + x * 5) % 256) as f32 / 255.0
        });
        let path = dir.join("t.png");
        save_png_rgb(&img, &path).unwrap();
        let back = load_png_rgb(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1.0 / 255.0 / 2.0 + 1e-6);
        }
    }

    #[test]
    fn latent_round_trip_is_identity_on_quantized_pixels() {
        let img = Array3::from_shape_fn((3, 4, 4), |(c, y, x)| {
            ((c + y * 4 + x) % 256) as f32 / 255.0
        });
        let z = image_to_latent(&img);
        let back = latent_to_image(&z, 0);
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
