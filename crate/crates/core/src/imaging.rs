//! Frame I/O and resampling of square crops into normalized model inputs.

use std::io::Write;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, RgbImage};
use jn_autodiff::Tensor;

use crate::error::{Error, Result};
use crate::geometry::CropTransform;

pub const PIXEL_MEAN: f64 = 0.5;
pub const PIXEL_STD: f64 = 0.25;

pub fn load_ppm(path: &Path) -> Result<RgbImage> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    Ok(img.to_rgb8())
}

/// Writes binary P6.
pub fn save_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut w)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-channel mean colour in [0, 255].
pub fn mean_color(img: &RgbImage) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for p in img.pixels() {
        for c in 0..3 {
            acc[c] += p.0[c] as f64;
        }
    }
    let n = (img.width() as f64 * img.height() as f64).max(1.0);
    acc.map(|v| v / n)
}

/// Photometric settings applied while rendering a crop.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Photometric {
    pub brightness: f64,
    pub flip: bool,
}

impl Default for Photometric {
    fn default() -> Self {
        Self {
            brightness: 1.0,
            flip: false,
        }
    }
}

/// Bilinear crop to a `[3, R, R]` tensor of raw intensities in [0, 1].
/// Pixels outside the frame take the colour `pad` (0-255 scale).
pub fn crop_raw(img: &RgbImage, t: &CropTransform, pad: [f64; 3], flip: bool) -> Tensor {
    let r = t.out_res;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let raw = img.as_raw();
    let fetch = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= w || y >= h {
            pad[c]
        } else {
            raw[((y * w + x) * 3) as usize + c] as f64
        }
    };
    let mut out = vec![0.0; 3 * r * r];
    for v in 0..r {
        for u in 0..r {
            let (fx, fy) = t.invert_point(u as f64 + 0.5, v as f64 + 0.5);
            let (px, py) = (fx - 0.5, fy - 0.5);
            let (x0, y0) = (px.floor(), py.floor());
            let (ax, ay) = (px - x0, py - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let col = if flip { r - 1 - u } else { u };
            for c in 0..3 {
                let top = fetch(x0, y0, c) * (1.0 - ax) + fetch(x0 + 1, y0, c) * ax;
                let bottom = fetch(x0, y0 + 1, c) * (1.0 - ax) + fetch(x0 + 1, y0 + 1, c) * ax;
                out[(c * r + v) * r + col] = (top * (1.0 - ay) + bottom * ay) / 255.0;
            }
        }
    }
    Tensor::new(vec![3, r, r], out).expect("crop buffer matches shape")
}

/// Crop, apply brightness and flip, and normalize for the encoder.
pub fn render_crop(img: &RgbImage, t: &CropTransform, pad: [f64; 3], photo: Photometric) -> Tensor {
    let raw = crop_raw(img, t, pad, photo.flip);
    raw.map(|v| ((v * photo.brightness).min(1.0) - PIXEL_MEAN) / PIXEL_STD)
}

/// Inverse of the encoder normalization, back to 8-bit intensities.
pub fn tensor_to_rgb(t: &Tensor) -> RgbImage {
    let (r, c) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    RgbImage::from_fn(c as u32, r as u32, |x, y| {
        let px = |ch: usize| {
            let v = d[(ch * r + y as usize) * c + x as usize] * PIXEL_STD + PIXEL_MEAN;
            (v * 255.0).round().clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}
