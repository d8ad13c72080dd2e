//! ASCII portable graymap (`P2`) reading and writing.
//!
//! Masks are written with maxval 1, grayscale rasters and heatmaps with
//! maxval 255. Output is one image row per line so files diff cleanly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SagError};
use crate::grid::{BinaryMask, GrayImage};

/// A decoded `P2` image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

impl Pgm {
    pub fn encode(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 4 + 32);
        let _ = writeln!(out, "P2\n{} {}\n{}", self.width, self.height, self.maxval);
        for row in self.data.chunks(self.width) {
            let line: Vec<String> = row.iter().map(u16::to_string).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn decode(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or(""))
            .flat_map(str::split_whitespace);
        let magic = tokens.next().ok_or_else(|| SagError::Parse("empty PGM".into()))?;
        if magic != "P2" {
            return Err(SagError::Parse(format!("expected PGM magic P2, found {magic:?}")));
        }
        let mut header = [0usize; 3];
        for slot in header.iter_mut() {
            let tok = tokens
                .next()
                .ok_or_else(|| SagError::Parse("truncated PGM header".into()))?;
            *slot = tok
                .parse()
                .map_err(|_| SagError::Parse(format!("bad PGM header field {tok:?}")))?;
        }
        let [width, height, maxval] = header;
        if width == 0 || height == 0 || maxval == 0 || maxval > u16::MAX as usize {
            return Err(SagError::Parse(format!("bad PGM header {width} {height} {maxval}")));
        }
        let data = tokens
            .map(|t| {
                t.parse::<u16>()
                    .ok()
                    .filter(|&v| v as usize <= maxval)
                    .ok_or_else(|| SagError::Parse(format!("bad PGM sample {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if data.len() != width * height {
            return Err(SagError::Parse(format!(
                "PGM has {} samples, header says {}",
                data.len(),
                width * height
            )));
        }
        Ok(Self { width, height, maxval: maxval as u16, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.encode().as_bytes())
    }
}

impl From<&BinaryMask> for Pgm {
    fn from(mask: &BinaryMask) -> Self {
        Pgm {
            width: mask.width(),
            height: mask.height(),
            maxval: 1,
            data: mask.data().iter().map(|&v| v as u16).collect(),
        }
    }
}

impl From<&GrayImage> for Pgm {
    fn from(img: &GrayImage) -> Self {
        Pgm {
            width: img.width(),
            height: img.height(),
            maxval: 255,
            data: img.data().iter().map(|&v| v as u16).collect(),
        }
    }
}

impl TryFrom<Pgm> for BinaryMask {
    type Error = SagError;

    fn try_from(pgm: Pgm) -> Result<Self> {
        if pgm.maxval != 1 {
            return Err(SagError::Parse(format!("mask PGM must have maxval 1, got {}", pgm.maxval)));
        }
        BinaryMask::from_vec(pgm.height, pgm.width, pgm.data.iter().map(|&v| v as u8).collect())
    }
}

impl TryFrom<Pgm> for GrayImage {
    type Error = SagError;

    fn try_from(pgm: Pgm) -> Result<Self> {
        if pgm.maxval > 255 {
            return Err(SagError::Parse(format!("gray PGM maxval {} exceeds 255", pgm.maxval)));
        }
        GrayImage::new(pgm.height, pgm.width, pgm.data.iter().map(|&v| v as u8).collect())
    }
}
