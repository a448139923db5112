//! PNG/JPEG decoding with bilinear resizing, and PNG encoding.

use std::path::Path;

use image::imageops::FilterType;
use nutricast_core::encoders::RgbImage;

use crate::error::{Error, Result};

/// Decode an image and resize it to `resolution × resolution` (bilinear)
/// when it has a different size.
pub fn load_image(path: &Path, resolution: usize) -> Result<RgbImage> {
    let decoded = image::open(path).map_err(|e| Error::format(path, e))?.to_rgb8();
    let r = resolution as u32;
    let sized = if decoded.width() == r && decoded.height() == r {
        decoded
    } else {
        image::imageops::resize(&decoded, r, r, FilterType::Triangle)
    };
    RgbImage::new(resolution, resolution, sized.into_raw()).map_err(Error::from)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.pixels.clone())
        .ok_or_else(|| Error::Usage("pixel buffer does not match image size".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Usage(format!("PNG encoding failed: {e}")))?;
    Ok(out.into_inner())
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    crate::error::write(path, encode_png(img)?)
}
