use std::path::Path;

use super::atomic_write;
use super::dataset::quantize;
use crate::env::Frame;
use crate::error::{Error, Result};

/// 8-bit RGB PNG with every channel value stored as `round(255·v)`.
pub fn encode_png(frame: &Frame) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, frame.width as u32, frame.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        let bytes: Vec<u8> = frame.pixels.iter().map(|&v| quantize(v)).collect();
        w.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn save_png(path: &Path, frame: &Frame) -> Result<()> {
    atomic_write(path, &encode_png(frame)?)
}
