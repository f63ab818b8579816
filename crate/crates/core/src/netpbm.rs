//! Minimal binary Netpbm codec: P4 (bitmap), P5 (graymap) and P6 (pixmap).
//!
//! Samples wider than 8 bits are big-endian as the format requires.

use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::image::{Frame, Grid, ImageError};

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("unsupported magic number {0:?}")]
    UnsupportedMagic(String),
    #[error("malformed header: {0}")]
    Header(&'static str),
    #[error("maxval {0} outside 1..=65535")]
    MaxVal(u32),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Decoded P5/P6 raster. `channels` is 1 for gray and 3 for RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub channels: usize,
    pub samples: Vec<u16>,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_ws_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let c = self.bytes[self.pos];
            if c == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a str, PnmError> {
        self.skip_ws_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PnmError::Header("unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| PnmError::Header("non-ascii token"))
    }

    fn number(&mut self) -> Result<u32, PnmError> {
        self.token()?.parse().map_err(|_| PnmError::Header("expected a decimal number"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Raster, PnmError> {
    let mut hdr = HeaderReader { bytes, pos: 0 };
    let magic = hdr.token()?;
    let channels = match magic {
        "P5" => 1,
        "P6" => 3,
        other => return Err(PnmError::UnsupportedMagic(other.to_string())),
    };
    let width = hdr.number()? as usize;
    let height = hdr.number()? as usize;
    let maxval = hdr.number()?;
    if maxval == 0 || maxval > 65535 {
        return Err(PnmError::MaxVal(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    let data_start = hdr.pos + 1;
    let bytes_per_sample = if maxval < 256 { 1 } else { 2 };
    let n = width * height * channels;
    let expected = n * bytes_per_sample;
    let found = bytes.len().saturating_sub(data_start);
    if found < expected {
        return Err(PnmError::Truncated { expected, found });
    }
    let raw = &bytes[data_start..data_start + expected];
    let samples = if bytes_per_sample == 1 {
        raw.iter().map(|&b| b as u16).collect()
    } else {
        raw.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    };
    Ok(Raster { width, height, maxval: maxval as u16, channels, samples })
}

pub fn read(path: &Path) -> Result<Raster, PnmError> {
    decode(&std::fs::read(path)?)
}

impl Raster {
    /// Normalized intensities; RGB is converted with Rec. 601 luma weights.
    pub fn to_grid(&self) -> Grid {
        let scale = self.maxval as f64;
        let data = if self.channels == 1 {
            self.samples.iter().map(|&s| s as f64 / scale).collect()
        } else {
            self.samples
                .chunks_exact(3)
                .map(|c| (0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / scale)
                .collect()
        };
        Grid::new(self.width, self.height, data).expect("raster dims are consistent")
    }

    pub fn to_frame(&self) -> Result<Frame, PnmError> {
        let grid = self.to_grid();
        let data = grid.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Frame::new(self.width, self.height, data)?)
    }
}

pub fn read_frame(path: &Path) -> Result<Frame, PnmError> {
    read(path)?.to_frame()
}

pub fn encode_pgm(width: usize, height: usize, maxval: u16, samples: &[u16]) -> Vec<u8> {
    assert_eq!(samples.len(), width * height, "sample count must match dimensions");
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    if maxval < 256 {
        out.extend(samples.iter().map(|&s| s.min(maxval) as u8));
    } else {
        for &s in samples {
            out.extend_from_slice(&s.min(maxval).to_be_bytes());
        }
    }
    out
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer must match dimensions");
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// P4 bitmap: `true` is written as a black (1) bit, rows padded to bytes.
pub fn encode_pbm(width: usize, height: usize, bits: &[bool]) -> Vec<u8> {
    assert_eq!(bits.len(), width * height, "bit count must match dimensions");
    let mut out = format!("P4\n{width} {height}\n").into_bytes();
    let row_bytes = width.div_ceil(8);
    for y in 0..height {
        let mut row = vec![0u8; row_bytes];
        for x in 0..width {
            if bits[y * width + x] {
                row[x / 8] |= 0x80 >> (x % 8);
            }
        }
        out.extend_from_slice(&row);
    }
    out
}

/// `<path>.txt`, the companion file holding the value range of a 16-bit raster.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".txt");
    s.into()
}

pub fn write_frame(path: &Path, frame: &Frame) -> io::Result<()> {
    let bytes = encode_pgm(frame.width(), frame.height(), 255, &frame.to_u8());
    write_bytes(path, &bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_16bit_roundtrip() {
        let samples: Vec<u16> = (0..12).map(|i| i * 5000).collect();
        let bytes = encode_pgm(4, 3, 65535, &samples);
        let r = decode(&bytes).unwrap();
        assert_eq!((r.width, r.height, r.maxval, r.channels), (4, 3, 65535, 1));
        assert_eq!(r.samples, samples);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P5\n# made by hand\n2 2\n# another\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 255]);
        let r = decode(&bytes).unwrap();
        assert_eq!(r.samples, vec![0, 64, 128, 255]);
    }

    #[test]
    fn truncated_and_bad_magic() {
        assert!(matches!(decode(b"P5\n2 2\n255\n\x00"), Err(PnmError::Truncated { .. })));
        assert!(matches!(decode(b"P2\n1 1\n255\n0"), Err(PnmError::UnsupportedMagic(_))));
    }

    #[test]
    fn ppm_luma_conversion() {
        let bytes = encode_ppm(1, 1, &[255, 0, 0]);
        let g = decode(&bytes).unwrap().to_grid();
        assert!((g.get(0, 0) - 0.299).abs() < 1e-12);
    }

    #[test]
    fn pbm_rows_are_padded() {
        let bits = vec![true, false, false, false, false, false, false, false, true, false];
        let bytes = encode_pbm(10, 1, &bits);
        let header_len = b"P4\n10 1\n".len();
        assert_eq!(&bytes[header_len..], &[0x80, 0x80]);
    }
}
