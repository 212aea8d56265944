//! 8-bit RGB PNG to latent and back. Latents are `3 × size × size` in
//! `[-1, 1]`; loading resizes bilinearly.

use std::io::Cursor;
use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::hamt::write_atomic;
use crate::tensor::Tensor;

fn image_err(path: &Path, detail: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

/// Converts an RGB image to a `3 × size × size` latent.
pub fn rgb_to_latent(img: &RgbImage, size: usize) -> Result<Tensor> {
    let resized = if img.width() as usize == size && img.height() as usize == size {
        img.clone()
    } else {
        imageops::resize(img, size as u32, size as u32, FilterType::Triangle)
    };
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for (x, y, px) in resized.enumerate_pixels() {
        let i = y as usize * size + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(vec![3, size, size], data)
}

/// Clamps to `[-1, 1]` and quantizes to 8-bit RGB.
pub fn latent_to_rgb(z: &Tensor) -> Result<RgbImage> {
    let [c, h, w] = z.shape() else {
        return Err(Error::Shape(format!("expected a 3 × h × w latent, got {:?}", z.shape())));
    };
    if *c != 3 {
        return Err(Error::Shape(format!("PNG output needs 3 channels, latent has {c}")));
    }
    let plane = h * w;
    let data = z.data();
    Ok(RgbImage::from_fn(*w as u32, *h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|ch| {
            let v = data[ch * plane + i].clamp(-1.0, 1.0);
            ((v + 1.0) * 127.5).round() as u8
        }))
    }))
}

pub fn load_png(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    rgb_to_latent(&img.to_rgb8(), size)
}

/// Encodes `z` as PNG and writes it atomically.
pub fn save_png(path: &Path, z: &Tensor) -> Result<()> {
    let mut bytes = Vec::new();
    latent_to_rgb(z)?
        .write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png)
        .map_err(|e| image_err(path, e))?;
    write_atomic(path, &bytes)
}
