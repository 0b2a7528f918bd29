//! 8-bit RGB conversion and PNG encoding of `[H, W, 3]` images.

use std::io::Cursor;

use crate::error::{shape_err, Error, Result};
use crate::numerics::Tensor;

/// Fill value for bands that have not been generated yet.
pub const GRAY: u8 = 128;

/// Pixels in `[-1, 1]` to bytes, clamping outside values.
pub fn to_rgb8(img: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    if img.rank() != 3 || img.dim(2) != 3 {
        return Err(shape_err("to_rgb8", format!("expected [H, W, 3], got {:?}", img.shape())));
    }
    let bytes = img.data().iter().map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8).collect();
    Ok((img.dim(0), img.dim(1), bytes))
}

/// PNG bytes for row-major RGB8 pixels. The encoder settings are fixed, so
/// equal pixels give equal bytes.
pub fn encode_png(height: usize, width: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != height * width * 3 {
        return Err(shape_err("encode_png", format!("{} bytes for {height}×{width}", rgb.len())));
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Integrity(e.to_string()))?;
        w.write_image_data(rgb).map_err(|e| Error::Integrity(e.to_string()))?;
    }
    Ok(out)
}

pub fn image_png(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, rgb) = to_rgb8(img)?;
    encode_png(h, w, &rgb)
}

/// `(height, width, rgb)` of an 8-bit RGB PNG.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |e: png::DecodingError| Error::Integrity(format!("png: {e}"));
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Integrity(format!("png: expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, buf))
}
