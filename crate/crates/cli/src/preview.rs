//! 8-bit log-scaled PNG previews of detector frames.

use anyhow::{ensure, Result};

/// `255 · ln(1 + x) / ln(1 + max)` per valid pixel; masked and non-positive
/// pixels are black.
pub fn log_scale(image: &[f32], mask: &[bool]) -> Vec<u8> {
    let max = image.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).fold(0.0f32, f32::max);
    let denom = f64::from(max).ln_1p();
    image
        .iter()
        .zip(mask)
        .map(|(&v, &m)| {
            if !m || v <= 0.0 || denom <= 0.0 {
                0
            } else {
                (255.0 * f64::from(v).ln_1p() / denom).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

pub fn preview_png(image: &[f32], mask: &[bool], side: usize) -> Result<Vec<u8>> {
    ensure!(image.len() == side * side && mask.len() == image.len(), "frame is not {side}x{side}");
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, side as u32, side as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header()?;
        w.write_image_data(&log_scale(image, mask))?;
    }
    Ok(buf)
}
