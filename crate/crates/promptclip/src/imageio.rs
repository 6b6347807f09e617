//! PNG decoding, resizing to the model input and grayscale export.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, ImageFormat, Luma, RgbImage};
use promptclip_core::encoders::ImageSample;
use promptclip_core::Matrix;

use crate::error::{io_at, Error, Result};

/// Decode PNG bytes to 8-bit RGB.
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(img.to_rgb8())
}

pub fn load_png(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(io_at(path))?;
    decode_png(&bytes).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Bilinear resize to `size x size` (if needed) and normalize.
pub fn to_model_input(img: &RgbImage, size: usize) -> Result<ImageSample> {
    let sized;
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        sized = imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        &sized
    };
    Ok(ImageSample::from_rgb8(size, size, img.as_raw())?.into_normalized()?)
}

pub fn gray_to_png_bytes(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    let img = GrayImage::from_raw(width as u32, height as u32, gray.to_vec())
        .ok_or_else(|| Error::Image(format!("{} bytes for a {width}x{height} image", gray.len())))?;
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).map_err(|e| Error::Image(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn save_gray_png(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    std::fs::write(path, gray_to_png_bytes(width, height, gray)?).map_err(io_at(path))
}

/// Bilinear upsampling of a `[0, 1]` grid to an 8-bit `size x size` image.
pub fn heatmap_image(map: &Matrix, size: usize) -> GrayImage {
    let grid: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_fn(map.cols() as u32, map.rows() as u32, |x, y| Luma([map.get(y as usize, x as usize) as f32]));
    let up = imageops::resize(&grid, size as u32, size as u32, FilterType::Triangle);
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        Luma([(up.get_pixel(x, y).0[0].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}
