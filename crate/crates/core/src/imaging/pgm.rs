//! Minimal binary PGM (P5) codec.
//!
//! Samples are 1 byte when `maxval < 256` and 2 bytes big-endian otherwise.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmData {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub samples: Vec<u32>,
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::MalformedHeader("unexpected end of PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let tok = header_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<u32>().ok())
        .ok_or_else(|| Error::MalformedHeader(format!("bad {what} field in PGM header")))
}

pub fn decode(bytes: &[u8]) -> Result<PgmData> {
    let mut pos = 0;
    let magic = header_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::MalformedHeader(format!(
            "expected P5 magic, found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = header_number(bytes, &mut pos, "width")? as usize;
    let height = header_number(bytes, &mut pos, "height")? as usize;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::MalformedHeader(format!("maxval {maxval} outside 1..=65535")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedHeader("missing whitespace after maxval".into()));
    }
    pos += 1;

    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let raster = &bytes[pos..];
    let expected = width * height * bytes_per_sample;
    if raster.len() != expected {
        return Err(Error::mismatch(
            format!("{expected} raster bytes for {width}x{height}"),
            format!("{} bytes", raster.len()),
        ));
    }
    let samples: Vec<u32> = if bytes_per_sample == 1 {
        raster.iter().map(|&b| b as u32).collect()
    } else {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32).collect()
    };
    if let Some(&v) = samples.iter().find(|&&v| v > maxval) {
        return Err(Error::MalformedHeader(format!("sample {v} exceeds maxval {maxval}")));
    }
    Ok(PgmData { width, height, maxval, samples })
}

pub fn encode(data: &PgmData) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", data.width, data.height, data.maxval).into_bytes();
    if data.maxval < 256 {
        out.extend(data.samples.iter().map(|&v| v as u8));
    } else {
        for &v in &data.samples {
            out.extend_from_slice(&(v as u16).to_be_bytes());
        }
    }
    out
}
