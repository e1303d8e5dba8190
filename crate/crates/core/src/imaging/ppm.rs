//! Binary PPM (`P6`, maxval 255).

use std::fs;
use std::path::Path;

use super::{quantize_clamp, Image};
use crate::error::{Error, Result};

pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    if image.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "PPM requires 3 channels, got {}",
            image.channels()
        )));
    }
    let q = quantize_clamp(image);
    let mut out = format!("P6\n{} {}\n255\n", q.width(), q.height()).into_bytes();
    out.extend(q.to_bytes().expect("quantized"));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let corrupt = |m: &str| Error::Corrupt(format!("ppm: {m}"));
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // whitespace and comments between header tokens
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| corrupt("header"))?);
    }
    if fields[0] != "P6" {
        return Err(corrupt("magic is not P6"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| corrupt("bad header number"));
    let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if maxval != 255 {
        return Err(corrupt("only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| corrupt("raster size overflows"))?;
    if bytes.len().saturating_sub(pos) < len {
        return Err(corrupt("truncated raster"));
    }
    Image::from_bytes(height, width, 3, &bytes[pos..pos + len])
}

pub fn write_ppm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes)
}
