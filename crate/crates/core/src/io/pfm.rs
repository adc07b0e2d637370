//! Portable float map (PFM) reading and writing for 3-channel normal maps.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// Row-major, top-down 3-channel float image.
#[derive(Debug, Clone, PartialEq)]
pub struct PfmImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f32; 3]>,
}

/// Writes a little-endian color PFM (scanlines stored bottom-up).
pub fn write_pfm<W: Write>(mut w: W, img: &PfmImage) -> std::io::Result<()> {
    write!(w, "PF\n{} {}\n-1.0\n", img.width, img.height)?;
    let width = img.width as usize;
    let mut row = Vec::with_capacity(width * 12);
    for y in (0..img.height as usize).rev() {
        row.clear();
        for px in &img.data[y * width..(y + 1) * width] {
            for c in px {
                row.extend_from_slice(&c.to_le_bytes());
            }
        }
        w.write_all(&row)?;
    }
    Ok(())
}

struct Header {
    width: u32,
    height: u32,
    little_endian: bool,
    data_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut tokens = Vec::with_capacity(4);
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse("truncated PFM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() {
        return Err(Error::Parse("truncated PFM header".into()));
    }
    pos += 1;
    if tokens[0] != "PF" {
        return Err(Error::Parse(format!(
            "unsupported PFM type `{}` (need 3-channel `PF`)",
            tokens[0]
        )));
    }
    let parse_dim = |s: &str| {
        s.parse::<u32>()
            .map_err(|_| Error::Parse(format!("bad PFM dimension `{s}`")))
    };
    let width = parse_dim(&tokens[1])?;
    let height = parse_dim(&tokens[2])?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::Parse(format!("bad PFM scale `{}`", tokens[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Parse("PFM scale must be non-zero".into()));
    }
    Ok(Header {
        width,
        height,
        little_endian: scale < 0.0,
        data_offset: pos,
    })
}

/// Reads only the dimensions of a PFM stream.
pub fn read_pfm_dimensions<R: Read>(mut r: R) -> Result<(u32, u32)> {
    let mut buf = [0u8; 128];
    let mut n = 0;
    while n < buf.len() {
        let got = r.read(&mut buf[n..]).map_err(|e| Error::Parse(e.to_string()))?;
        if got == 0 {
            break;
        }
        n += got;
    }
    let h = parse_header(&buf[..n])?;
    Ok((h.width, h.height))
}

pub fn read_pfm<R: Read>(mut r: R) -> Result<PfmImage> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::Parse(e.to_string()))?;
    let h = parse_header(&bytes)?;
    let (width, height) = (h.width as usize, h.height as usize);
    let need = width * height * 12;
    let raster = &bytes[h.data_offset..];
    if raster.len() < need {
        return Err(Error::Parse(format!(
            "PFM raster truncated: {} of {} bytes",
            raster.len(),
            need
        )));
    }
    let mut data = vec![[0f32; 3]; width * height];
    for (i, chunk) in raster[..need].chunks_exact(12).enumerate() {
        let file_row = i / width;
        let x = i % width;
        let y = height - 1 - file_row;
        let mut px = [0f32; 3];
        for c in 0..3 {
            let b: [u8; 4] = chunk[c * 4..c * 4 + 4].try_into().expect("chunk of 4");
            px[c] = if h.little_endian {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            };
        }
        data[y * width + x] = px;
    }
    Ok(PfmImage {
        width: h.width,
        height: h.height,
        data,
    })
}
