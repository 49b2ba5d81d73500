//! 8-bit PNG images as `(height, width, channels)` tensors in `[0, 1]`.

use std::io::Cursor;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat};

use super::{read_file, write_file, IoError};
use crate::tensor::Tensor;

/// Decodes an 8-bit grayscale (1 channel) or RGB (3 channels) PNG.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor, IoError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| IoError::Image(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = match img {
        DynamicImage::ImageLuma8(buf) => (1, buf.into_raw()),
        DynamicImage::ImageRgb8(buf) => (3, buf.into_raw()),
        other => {
            return Err(IoError::Image(format!(
                "unsupported pixel format {:?} (expected 8-bit grayscale or RGB)",
                other.color()
            )))
        }
    };
    let data = raw.into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(Tensor::new(vec![h, w, channels], data)?)
}

/// Encodes an `(H, W, 1)` or `(H, W, 3)` tensor, clamping to `[0, 1]` and
/// quantizing with `round(v * 255)`.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>, IoError> {
    let (h, w, c) = match *image.shape() {
        [h, w, c] => (h, w, c),
        ref s => return Err(IoError::Image(format!("expected (H, W, C), got {s:?}"))),
    };
    let color = match c {
        1 => ColorType::L8,
        3 => ColorType::Rgb8,
        _ => return Err(IoError::Image(format!("cannot store {c} channels as PNG"))),
    };
    let (Ok(wu), Ok(hu)) = (u32::try_from(w), u32::try_from(h)) else {
        return Err(IoError::Image(format!("{h}x{w} image is too large")));
    };
    let pixels: Vec<u8> = image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut out = Vec::new();
    PngEncoder::new(Cursor::new(&mut out))
        .write_image(&pixels, wu, hu, ExtendedColorType::from(color))
        .map_err(|e| IoError::Image(e.to_string()))?;
    Ok(out)
}

pub fn load_image(path: &Path) -> Result<Tensor, IoError> {
    decode_png(&read_file(path)?).map_err(|e| IoError::Image(format!("{}: {e}", path.display())))
}

pub fn save_image(image: &Tensor, path: &Path) -> Result<(), IoError> {
    write_file(path, &encode_png(image)?)
}
