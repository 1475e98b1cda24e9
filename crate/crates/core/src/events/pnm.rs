//! Binary PGM (P5) and PPM (P6) with maxval 255.
//!
//! The writer emits the canonical header `P5\n<w> <h>\n255\n` (or `P6`)
//! followed by the raw payload; the reader accepts exactly that shape with
//! arbitrary whitespace between header tokens. Comments are not supported,
//! which keeps `save(load(f))` byte-identical for every file this module
//! writes.

use super::ImagePlane;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("bad magic: expected P5 or P6")]
    BadMagic,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("unsupported maxval {0} (must be 255)")]
    BadMaxval(u32),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("trailing bytes after payload")]
    TrailingBytes,
}

/// Decodes binary PGM/PPM into an image with values in `[0, 1]`.
pub fn load_image_pnm(bytes: &[u8]) -> Result<ImagePlane, PnmError> {
    let channels = match bytes.get(0..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(PnmError::BadMagic),
    };
    let mut pos = 2;
    let width = read_header_int(bytes, &mut pos)? as usize;
    let height = read_header_int(bytes, &mut pos)? as usize;
    let maxval = read_header_int(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(PnmError::BadMaxval(maxval));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PnmError::BadHeader("missing payload separator".into())),
    }
    let expected = height * width * channels;
    let payload = &bytes[pos.min(bytes.len())..];
    if payload.len() < expected {
        return Err(PnmError::Truncated {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(PnmError::TrailingBytes);
    }
    let data: Vec<f64> = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(ImagePlane::new(height, width, channels, data).expect("scaled bytes are in range"))
}

fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<u32, PnmError> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err(PnmError::BadHeader("expected integer".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| PnmError::BadHeader("integer out of range".into()))
}

/// Encodes an image as binary PGM (1 channel) or PPM (3 channels).
///
/// Values are clamped to `[0, 1]` and quantized with `round(v * 255)`,
/// rounding halves away from zero.
pub fn save_image_pnm(img: &ImagePlane) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data().iter().map(|&v| quantize(v)));
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
