//! Binary PGM (P5) and PPM (P6) with 8-bit samples.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{GrayImage, ImagingError};

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },
    #[error(transparent)]
    Image(#[from] ImagingError),
}

fn format_err(kind: &'static str, reason: impl Into<String>) -> PnmError {
    PnmError::Format {
        kind,
        reason: reason.into(),
    }
}

/// Interleaved 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

struct Header {
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], kind: &'static str) -> Result<Header, PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(format_err(kind, "bad magic number"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format_err(kind, "truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(kind, "expected a decimal header field"))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(kind, "missing separator after maxval"));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(kind, format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        data_offset: pos + 1,
    })
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage, PnmError> {
    let header = parse_header(bytes, b"P5", "PGM")?;
    let len = header.width * header.height;
    let raster = bytes
        .get(header.data_offset..header.data_offset + len)
        .ok_or_else(|| format_err("PGM", "truncated raster"))?;
    Ok(GrayImage::dequantize(header.width, header.height, raster)?)
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.quantize());
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage, PnmError> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<(), PnmError> {
    fs::write(path, encode_pgm(img))?;
    Ok(())
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage, PnmError> {
    let header = parse_header(bytes, b"P6", "PPM")?;
    let len = 3 * header.width * header.height;
    let data = bytes
        .get(header.data_offset..header.data_offset + len)
        .ok_or_else(|| format_err("PPM", "truncated raster"))?
        .to_vec();
    Ok(RgbImage {
        width: header.width,
        height: header.height,
        data,
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<(), PnmError> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}
