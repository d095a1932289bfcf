//! Minimal netpbm raster IO: P6 (binary RGB) and P5 (binary gray, 8- or
//! 16-bit). 16-bit samples are big-endian per the format definition.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Samples widened to u16 regardless of source depth.
    pub samples: Vec<u16>,
    pub max_value: u16,
}

pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Data(format!(
            "ppm payload {} bytes for {width}x{height}",
            rgb.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    w.write_all(rgb).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let (magic, width, height, maxval) = read_header(&mut r, path)?;
    if magic != "P6" || maxval != 255 {
        return Err(Error::Data(format!(
            "{}: expected 8-bit P6, got {magic} maxval {maxval}",
            path.display()
        )));
    }
    let mut rgb = vec![0u8; width * height * 3];
    r.read_exact(&mut rgb).map_err(|e| Error::io(path, e))?;
    Ok((width, height, rgb))
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::Data(format!(
            "pgm payload {} bytes for {width}x{height}",
            gray.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n").map_err(|e| Error::io(path, e))?;
    w.write_all(gray).map_err(|e| Error::io(path, e))
}

pub fn write_pgm16(path: &Path, width: usize, height: usize, gray: &[u16]) -> Result<()> {
    if gray.len() != width * height {
        return Err(Error::Data(format!(
            "pgm payload {} samples for {width}x{height}",
            gray.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n65535\n").map_err(|e| Error::io(path, e))?;
    for s in gray {
        w.write_all(&s.to_be_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let (magic, width, height, maxval) = read_header(&mut r, path)?;
    if magic != "P5" {
        return Err(Error::Data(format!("{}: not a P5 file", path.display())));
    }
    let count = width * height;
    let samples = if maxval > 255 {
        let mut bytes = vec![0u8; count * 2];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        bytes
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        let mut bytes = vec![0u8; count];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        bytes.iter().map(|&b| u16::from(b)).collect()
    };
    Ok(GrayImage {
        width,
        height,
        samples,
        max_value: maxval as u16,
    })
}

/// Parse `magic`, width, height, maxval, tolerating comments and arbitrary
/// whitespace in the header.
fn read_header(r: &mut impl Read, path: &Path) -> Result<(String, usize, usize, u32)> {
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    let magic = String::from_utf8_lossy(&magic).to_string();
    let mut fields = [0u64; 3];
    for f in &mut fields {
        *f = read_header_int(r, path)?;
    }
    Ok((magic, fields[0] as usize, fields[1] as usize, fields[2] as u32))
}

fn read_header_int(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut byte = [0u8; 1];
    let mut value: Option<u64> = None;
    loop {
        if r.read(&mut byte).map_err(|e| Error::io(path, e))? == 0 {
            break;
        }
        match byte[0] {
            b'#' => {
                // Skip to end of line.
                while r.read(&mut byte).map_err(|e| Error::io(path, e))? == 1 {
                    if byte[0] == b'\n' {
                        break;
                    }
                }
            }
            b'0'..=b'9' => {
                value = Some(value.unwrap_or(0) * 10 + u64::from(byte[0] - b'0'));
            }
            _ if byte[0].is_ascii_whitespace() => {
                if value.is_some() {
                    break;
                }
            }
            other => {
                return Err(Error::Data(format!(
                    "{}: unexpected byte {other:#x} in netpbm header",
                    path.display()
                )))
            }
        }
    }
    value.ok_or_else(|| Error::Data(format!("{}: truncated netpbm header", path.display())))
}
