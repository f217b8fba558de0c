//! Binary tile and mask formats.
//!
//! Tile: `"GCTL" | u8 version=1 | u8 channels | u16 reserved=0 | u32 height |
//! u32 width | f32 data (channel-major)`, all little-endian.
//!
//! Mask: `"GCMK" | u8 version=1 | u8 reserved | u16 reserved | u32 height |
//! u32 width | u8 data (row-major)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const TILE_MAGIC: &[u8; 4] = b"GCTL";
pub const MASK_MAGIC: &[u8; 4] = b"GCMK";
pub const FORMAT_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 16;
/// Mask value excluded from losses and metrics.
pub const IGNORE: u8 = 255;

/// Multi-channel image with values in `[0, 1]`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTile {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTile {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if !(3..=4).contains(&channels) {
            return Err(Error::InvalidArgument(format!("tile channel count {channels} not in {{3, 4}}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidShape {
                op: "image_tile",
                shape: vec![channels, height, width],
                reason: format!("{} values supplied", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !(v.is_finite() && (0.0..=1.0).contains(v))) {
            return Err(Error::InvalidArgument(format!("tile value {} at index {i} outside [0, 1]", data[i])));
        }
        Ok(ImageTile {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(TILE_MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.channels as u8);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (version, channels, h, w) = parse_header(bytes, TILE_MAGIC, path)?;
        let _ = version;
        if !(3..=4).contains(&channels) {
            return Err(parse_err(path, 5, format!("channel count {channels} not in {{3, 4}}")));
        }
        let n = channels as usize * h * w;
        let body = &bytes[HEADER_LEN..];
        if body.len() < 4 * n {
            return Err(parse_err(path, bytes.len() as u64, format!("truncated: expected {} data bytes", 4 * n)));
        }
        if body.len() > 4 * n {
            return Err(parse_err(path, (HEADER_LEN + 4 * n) as u64, "trailing bytes".into()));
        }
        let mut data = Vec::with_capacity(n);
        for (i, c) in body.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            if !(v.is_finite() && (0.0..=1.0).contains(&v)) {
                return Err(parse_err(path, (HEADER_LEN + 4 * i) as u64, format!("value {v} outside [0, 1]")));
            }
            data.push(v);
        }
        Ok(ImageTile {
            channels: channels as usize,
            height: h,
            width: w,
            data,
        })
    }
}

/// Per-pixel class indices; [`IGNORE`] marks excluded pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskTile {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskTile {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidShape {
                op: "mask_tile",
                shape: vec![height, width],
                reason: format!("{} values supplied", data.len()),
            });
        }
        Ok(MaskTile { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// Fails if any pixel is neither a class below `n_classes` nor [`IGNORE`].
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE && v as usize >= n_classes) {
            Some(v) => Err(Error::InvalidArgument(format!("mask value {v} is not a class below {n_classes} or {IGNORE}"))),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len());
        out.extend_from_slice(MASK_MAGIC);
        out.push(FORMAT_VERSION);
        out.push(0);
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&self.data);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (_, _, h, w) = parse_header(bytes, MASK_MAGIC, path)?;
        let body = &bytes[HEADER_LEN..];
        if body.len() < h * w {
            return Err(parse_err(path, bytes.len() as u64, format!("truncated: expected {} data bytes", h * w)));
        }
        if body.len() > h * w {
            return Err(parse_err(path, (HEADER_LEN + h * w) as u64, "trailing bytes".into()));
        }
        Ok(MaskTile {
            height: h,
            width: w,
            data: body.to_vec(),
        })
    }
}

fn parse_err(path: &Path, offset: u64, reason: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        reason,
    }
}

fn parse_header(bytes: &[u8], magic: &[u8; 4], path: &Path) -> Result<(u8, u8, usize, usize)> {
    if bytes.len() < 4 || &bytes[..4] != magic {
        return Err(parse_err(path, 0, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    if bytes.len() < HEADER_LEN {
        return Err(parse_err(path, bytes.len() as u64, "truncated header".into()));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(parse_err(path, 4, format!("unsupported version {}", bytes[4])));
    }
    let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    Ok((bytes[4], bytes[5], h, w))
}

pub fn write_tile(tile: &ImageTile, path: &Path) -> Result<()> {
    fs::write(path, tile.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_tile(path: &Path) -> Result<ImageTile> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    ImageTile::from_bytes(&bytes, path)
}

pub fn write_mask(mask: &MaskTile, path: &Path) -> Result<()> {
    fs::write(path, mask.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_mask(path: &Path) -> Result<MaskTile> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    MaskTile::from_bytes(&bytes, path)
}
