//! Binary PGM (P5) reading and writing.
//!
//! Images use maxval 65535 with the two bytes of each pixel most-significant
//! first; masks use maxval 255 with pixel values restricted to {0, 255}.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const IMAGE_MAXVAL: u32 = 65535;
const MASK_MAXVAL: u32 = 255;

/// Writes a grayscale image with values in [0, 1] as 16-bit PGM.
pub fn write_image(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    debug_assert_eq!(values.len(), width * height);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n{IMAGE_MAXVAL}\n").map_err(|e| Error::io(path, e))?;
    for &v in values {
        let q = (v.clamp(0.0, 1.0) * IMAGE_MAXVAL as f64).round() as u16;
        w.write_all(&q.to_be_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a 16-bit PGM written by [`write_image`]; values come back in [0, 1].
pub fn read_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (width, height, maxval, data) = read_p5(path)?;
    if maxval != IMAGE_MAXVAL {
        return Err(Error::format(
            path,
            format!("image PGM must use maxval {IMAGE_MAXVAL}, found {maxval}"),
        ));
    }
    let expected = width * height * 2;
    if data.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} pixel bytes, found {}", data.len()),
        ));
    }
    let values = data
        .chunks_exact(2)
        .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / IMAGE_MAXVAL as f64)
        .collect();
    Ok((width, height, values))
}

/// Writes a binary mask as 8-bit PGM with values {0, 255}.
pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    debug_assert_eq!(mask.len(), width * height);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n{MASK_MAXVAL}\n").map_err(|e| Error::io(path, e))?;
    let bytes: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit PGM mask; any pixel value other than 0 or 255 is rejected.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let (width, height, maxval, data) = read_p5(path)?;
    if maxval != MASK_MAXVAL {
        return Err(Error::format(
            path,
            format!("mask PGM must use maxval {MASK_MAXVAL}, found {maxval}"),
        ));
    }
    if data.len() != width * height {
        return Err(Error::format(
            path,
            format!("expected {} pixel bytes, found {}", width * height, data.len()),
        ));
    }
    let mut mask = Vec::with_capacity(data.len());
    for b in data {
        match b {
            0 => mask.push(false),
            255 => mask.push(true),
            other => {
                return Err(Error::format(
                    path,
                    format!("mask pixel must be 0 or 255, found {other}"),
                ))
            }
        }
    }
    Ok((width, height, mask))
}

/// Parses the P5 header (magic, width, height, maxval with `#` comments
/// allowed) and returns the raw pixel bytes.
fn read_p5(path: &Path) -> Result<(usize, usize, u32, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let mut pos = 0;
    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(Error::format(path, "not a binary PGM (missing P5 magic)"));
    }
    pos += 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        pos = skip_separators(&bytes, pos, path)?;
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(path, "malformed PGM header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ASCII");
        *field = text
            .parse()
            .map_err(|_| Error::format(path, format!("bad header number {text}")))?;
    }
    // exactly one whitespace byte separates the header from pixel data
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::format(path, "missing separator before pixel data"));
    }
    pos += 1;
    let (width, height, maxval) = (fields[0], fields[1], fields[2] as u32);
    if width == 0 || height == 0 {
        return Err(Error::format(path, "zero-sized PGM"));
    }
    Ok((width, height, maxval, bytes[pos..].to_vec()))
}

fn skip_separators(bytes: &[u8], mut pos: usize, path: &Path) -> Result<usize> {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else {
            break;
        }
    }
    if pos >= bytes.len() {
        return Err(Error::format(path, "truncated PGM header"));
    }
    Ok(pos)
}
