//! 8-bit single-channel raster with binary PGM (P5) storage.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("invalid image dimensions {width}x{height}")]
    InvalidDimensions { width: usize, height: usize },
    #[error("pixel buffer of {got} bytes does not match {width}x{height}")]
    BufferMismatch {
        width: usize,
        height: usize,
        got: usize,
    },
    #[error("{path}: not a binary PGM (P5) file: {reason}")]
    BadPgm { path: String, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidDimensions { width, height });
        }
        Ok(Self {
            width,
            height,
            pixels: vec![fill; width * height],
        })
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::InvalidDimensions { width, height });
        }
        if pixels.len() != width * height {
            return Err(ImageError::BufferMismatch {
                width,
                height,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn row(&self, y: usize) -> &[u8] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    /// Mirror left-right (flip about the vertical axis).
    pub fn flip_horizontal(&self) -> GrayImage {
        let mut out = self.clone();
        for y in 0..self.height {
            let row = &mut out.pixels[y * self.width..(y + 1) * self.width];
            row.reverse();
        }
        out
    }

    /// Write as binary PGM (P5), maxval 255.
    pub fn save_pgm(&self, path: &Path) -> Result<(), ImageError> {
        let io_err = |source| ImageError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = fs::File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        write!(w, "P5\n{} {}\n255\n", self.width, self.height).map_err(io_err)?;
        w.write_all(&self.pixels).map_err(io_err)?;
        w.flush().map_err(io_err)
    }

    pub fn load_pgm(path: &Path) -> Result<Self, ImageError> {
        let data = fs::read(path).map_err(|source| ImageError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let bad = |reason: &str| ImageError::BadPgm {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut pos = 0usize;
        let mut token = |data: &[u8]| -> Option<(usize, usize)> {
            let mut start = pos;
            loop {
                while start < data.len() && data[start].is_ascii_whitespace() {
                    start += 1;
                }
                if start < data.len() && data[start] == b'#' {
                    while start < data.len() && data[start] != b'\n' {
                        start += 1;
                    }
                    continue;
                }
                break;
            }
            let mut end = start;
            while end < data.len() && !data[end].is_ascii_whitespace() {
                end += 1;
            }
            if start == end {
                return None;
            }
            pos = end;
            Some((start, end))
        };
        let magic = token(&data).ok_or_else(|| bad("missing magic"))?;
        if &data[magic.0..magic.1] != b"P5" {
            return Err(bad("magic is not P5"));
        }
        let mut fields = [0usize; 3];
        for f in fields.iter_mut() {
            let (s, e) = token(&data).ok_or_else(|| bad("truncated header"))?;
            *f = std::str::from_utf8(&data[s..e])
                .ok()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad("non-numeric header field"))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(bad("maxval must be 255"));
        }
        // Exactly one whitespace byte separates the header from the raster.
        let start = pos + 1;
        let expected = width
            .checked_mul(height)
            .ok_or_else(|| bad("dimension overflow"))?;
        if data.len() < start + expected {
            return Err(bad("truncated pixel data"));
        }
        GrayImage::from_pixels(width, height, data[start..start + expected].to_vec()).map_err(
            |_| ImageError::BadPgm {
                path: path.display().to_string(),
                reason: "zero dimension".to_string(),
            },
        )
    }
}
