//! Binary PPM (P6) reader/writer, the on-disk image format.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, rgb: Vec<u8>) -> Result<Self> {
        if rgb.len() != width * height * 3 {
            return Err(Error::ImageFormat(format!(
                "pixel buffer holds {} bytes, expected {} for {width}x{height}",
                rgb.len(),
                width * height * 3
            )));
        }
        Ok(RawImage { width, height, rgb })
    }
}

fn read_header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // Skip whitespace and `#` comments.
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::ImageFormat("truncated PPM header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn read_ppm(path: &Path) -> Result<RawImage> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_ppm(&bytes)
}

pub fn parse_ppm(bytes: &[u8]) -> Result<RawImage> {
    let mut pos = 0;
    let magic = read_header_token(bytes, &mut pos)?;
    if magic != "P6" {
        return Err(Error::ImageFormat(format!("expected P6 magic, got {magic:?}")));
    }
    let width: usize = read_header_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::ImageFormat("bad width".into()))?;
    let height: usize = read_header_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::ImageFormat("bad height".into()))?;
    let maxval: usize = read_header_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::ImageFormat("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("only maxval 255 supported, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::ImageFormat(format!("zero-dimension image {width}x{height}")));
    }
    // Exactly one whitespace byte separates the header from pixel data.
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::ImageFormat(format!(
            "pixel data truncated: have {} bytes, need {need}",
            bytes.len().saturating_sub(pos)
        )));
    }
    RawImage::new(width, height, bytes[pos..pos + need].to_vec())
}

pub fn write_ppm(path: &Path, image: &RawImage) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", image.width, image.height)?;
    out.write_all(&image.rgb)?;
    out.flush()?;
    Ok(())
}
