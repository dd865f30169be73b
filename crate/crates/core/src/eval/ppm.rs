//! Binary PPM (P6, maxval 255) images.

use std::path::Path;

use thiserror::Error;

use crate::sim::Frame;

#[derive(Debug, Error)]
pub enum PpmError {
    #[error("not a P6 image")]
    BadMagic,
    #[error("malformed header: {0}")]
    Header(&'static str),
    #[error("unsupported maxval {0}")]
    MaxVal(u32),
    #[error("pixel data has {have} bytes, expected {needed}")]
    Length { needed: usize, have: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// RGB bytes, row-major.
    pub data: Vec<u8>,
}

/// `round(clamp(x, 0, 1) · 255)`.
pub fn quantize(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.data.iter().map(|&v| quantize(v)));
    out
}

const MAX_SIDE: usize = 1 << 14;

pub fn decode_ppm(bytes: &[u8]) -> Result<PpmImage, PpmError> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(PpmError::BadMagic);
    }
    let mut pos = 2;
    let mut fields = [0u32; 3];
    for f in fields.iter_mut() {
        // Whitespace and comments before each field.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(PpmError::Header("truncated")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PpmError::Header("expected a number"));
        }
        let s =
            std::str::from_utf8(&bytes[start..pos]).map_err(|_| PpmError::Header("non-ascii"))?;
        *f = s
            .parse()
            .map_err(|_| PpmError::Header("number out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(PpmError::Header("missing separator before pixel data")),
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(PpmError::MaxVal(maxval));
    }
    let (w, h) = (w as usize, h as usize);
    if w == 0 || h == 0 || w > MAX_SIDE || h > MAX_SIDE {
        return Err(PpmError::Header("dimensions out of range"));
    }
    let needed = w * h * 3;
    let have = bytes.len() - pos;
    if have != needed {
        return Err(PpmError::Length { needed, have });
    }
    Ok(PpmImage {
        width: w,
        height: h,
        data: bytes[pos..].to_vec(),
    })
}

pub fn write_ppm(frame: &Frame, path: &Path) -> Result<(), PpmError> {
    std::fs::write(path, encode_ppm(frame))?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<PpmImage, PpmError> {
    decode_ppm(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::FrameKind;

    #[test]
    fn round_trip_quantized() {
        let mut f = Frame::blank(3, 2, FrameKind::Tpv);
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = i as f32 / 17.0;
        }
        let img = decode_ppm(&encode_ppm(&f)).unwrap();
        assert_eq!((img.width, img.height), (2, 3));
        let q: Vec<u8> = f.data.iter().map(|&v| quantize(v)).collect();
        assert_eq!(img.data, q);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n255\n\0"),
            Err(PpmError::BadMagic)
        ));
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\0\0\0"),
            Err(PpmError::MaxVal(65535))
        ));
        assert!(matches!(
            decode_ppm(b"P6\n2 1\n255\n\0\0\0"),
            Err(PpmError::Length { .. })
        ));
        assert!(decode_ppm(b"P6 # c\n1 1 255\n\x01\x02\x03").is_ok());
    }
}
