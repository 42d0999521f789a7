//! Image preparation: bounded downscaling, JPEG re-encoding and base64.

use std::io::Cursor;
use std::path::Path;

use base64::Engine;
use image::codecs::jpeg::JpegEncoder;
use image::imageops::FilterType;
use image::{GenericImageView, ImageFormat};

use crate::domain::sha256_hex;
use crate::error::{Error, Result};
use crate::gateway::EncodedImage;

pub const DEFAULT_MAX_SIDE: u32 = 1024;
pub const DEFAULT_JPEG_QUALITY: u8 = 90;

/// Target size after bounding the longest side by `max_side`. Never upscales.
pub fn fit_within(width: u32, height: u32, max_side: u32) -> (u32, u32) {
    let longest = width.max(height);
    if longest <= max_side {
        return (width, height);
    }
    let scale = max_side as f64 / longest as f64;
    let w = ((width as f64 * scale).round() as u32).max(1);
    let h = ((height as f64 * scale).round() as u32).max(1);
    (w, h)
}

pub fn prepare_image(path: &Path, max_side: u32, jpeg_quality: u8) -> Result<EncodedImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    prepare_image_bytes(&bytes, path, max_side, jpeg_quality)
}

pub fn prepare_image_bytes(
    bytes: &[u8],
    path: &Path,
    max_side: u32,
    jpeg_quality: u8,
) -> Result<EncodedImage> {
    let format = image::guess_format(bytes).map_err(|_| Error::UnsupportedFormat(path.into()))?;
    if !matches!(
        format,
        ImageFormat::Png | ImageFormat::Jpeg | ImageFormat::Tiff
    ) {
        return Err(Error::UnsupportedFormat(path.into()));
    }
    let img =
        image::load_from_memory_with_format(bytes, format).map_err(|e| Error::DecodeError {
            path: path.into(),
            reason: e.to_string(),
        })?;
    let (w, h) = img.dimensions();
    let (tw, th) = fit_within(w, h, max_side);
    let img = if (tw, th) != (w, h) {
        img.resize_exact(tw, th, FilterType::Triangle)
    } else {
        img
    };
    let rgb = img.to_rgb8();
    let mut out = Cursor::new(Vec::new());
    JpegEncoder::new_with_quality(&mut out, jpeg_quality)
        .encode_image(&rgb)
        .map_err(|e| Error::DecodeError {
            path: path.into(),
            reason: format!("jpeg encode: {e}"),
        })?;
    Ok(EncodedImage {
        media_type: "image/jpeg".into(),
        bytes_b64: base64::engine::general_purpose::STANDARD.encode(out.into_inner()),
        source_hash: sha256_hex(bytes),
        width: tw,
        height: th,
    })
}
