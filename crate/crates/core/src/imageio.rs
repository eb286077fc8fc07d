//! 8-bit PNG / binary PPM input and output.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::raster::Image;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads an 8-bit PNG or PPM/PGM; intensities are divided by 255. Grayscale stays
/// single-channel, everything else becomes RGB.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image<f64>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(from_dynamic(img))
}

pub fn from_dynamic(img: DynamicImage) -> Image<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(g) => {
            let data = g.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Image::from_parts(w, h, 1, data, vec![true; w * h])
        }
        other => {
            let rgb = other.to_rgb8();
            let data = rgb.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Image::from_parts(w, h, 3, data, vec![true; w * h])
        }
    }
}

/// Writes an 8-bit image; the format follows the extension (`.png`, `.ppm`, `.pgm`).
/// Invalid pixels are written black.
pub fn save_image(path: impl AsRef<Path>, img: &Image<f64>) -> Result<()> {
    let path = path.as_ref();
    let (w, h) = img.size();
    let c = img.channels();
    let mut bytes = Vec::with_capacity(w * h * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(if img.is_valid(x, y) { to_u8(img.get(x, y, ch)) } else { 0 });
            }
        }
    }
    let format = match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(e) if e == "png" => ImageFormat::Png,
        Some(e) if e == "ppm" || e == "pgm" || e == "pnm" => ImageFormat::Pnm,
        _ => return Err(Error::Io(format!("{}: unsupported image extension", path.display()))),
    };
    let dynimg = if c == 1 {
        DynamicImage::ImageLuma8(GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size"))
    } else {
        DynamicImage::ImageRgb8(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer size"))
    };
    dynimg
        .save_with_format(path, format)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Rounds intensities to the 8-bit lattice, matching a save/load round trip.
pub fn quantize(img: &Image<f64>) -> Image<f64> {
    img.map(|v| to_u8(v) as f64 / 255.0)
}
