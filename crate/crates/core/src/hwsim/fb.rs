//! Framebuffer with a shadow/visible split.
//!
//! CPU writes land in `shadow`; the display scans out `visible`, which only
//! changes on [`FbHw::flush`]. Pixels are RGBA8888, row-major.

use std::fs;
use std::path::Path;

use super::HwError;

pub const BYTES_PER_PIXEL: usize = 4;
/// Physical address of the framebuffer aperture.
pub const FB_PHYS_BASE: u64 = 0x3C10_0000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub width: u32,
    pub height: u32,
    pub stride: u32,
    /// Fourcc-style tag; always "RGBA".
    pub format: u32,
}

pub const FORMAT_RGBA8888: u32 = u32::from_le_bytes(*b"RGBA");

#[derive(Clone)]
pub struct FbHw {
    width: u32,
    height: u32,
    shadow: Vec<u8>,
    visible: Vec<u8>,
    flushes: u64,
}

impl std::fmt::Debug for FbHw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "FbHw({}x{}, flushes={})", self.width, self.height, self.flushes)
    }
}

impl FbHw {
    pub fn new(width: u32, height: u32) -> Self {
        let len = width as usize * height as usize * BYTES_PER_PIXEL;
        Self { width, height, shadow: vec![0; len], visible: vec![0; len], flushes: 0 }
    }

    pub fn geometry(&self) -> Geometry {
        Geometry {
            width: self.width,
            height: self.height,
            stride: self.width * BYTES_PER_PIXEL as u32,
            format: FORMAT_RGBA8888,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn size_bytes(&self) -> usize {
        self.shadow.len()
    }

    pub fn flushes(&self) -> u64 {
        self.flushes
    }

    pub fn write_shadow(&mut self, off: usize, bytes: &[u8]) -> Result<usize, HwError> {
        let end = off.checked_add(bytes.len()).ok_or(HwError::FbRange { off, len: bytes.len() })?;
        if end > self.shadow.len() {
            return Err(HwError::FbRange { off, len: bytes.len() });
        }
        self.shadow[off..end].copy_from_slice(bytes);
        Ok(bytes.len())
    }

    pub fn read_shadow(&self, off: usize, len: usize) -> Result<&[u8], HwError> {
        let end = off.checked_add(len).ok_or(HwError::FbRange { off, len })?;
        self.shadow.get(off..end).ok_or(HwError::FbRange { off, len })
    }

    pub fn shadow(&self) -> &[u8] {
        &self.shadow
    }

    pub fn shadow_mut(&mut self) -> &mut [u8] {
        &mut self.shadow
    }

    pub fn visible(&self) -> &[u8] {
        &self.visible
    }

    pub fn flush(&mut self) {
        self.visible.copy_from_slice(&self.shadow);
        self.flushes += 1;
    }

    /// Binary PPM (P6) of the visible buffer; alpha is dropped.
    pub fn ppm_bytes(&self) -> Vec<u8> {
        let header = format!("P6 {} {} 255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.visible.len() / 4 * 3);
        out.extend_from_slice(header.as_bytes());
        for px in self.visible.chunks_exact(BYTES_PER_PIXEL) {
            out.extend_from_slice(&px[..3]);
        }
        out
    }

    pub fn fb_dump(&self, target: &Path) -> Result<(), HwError> {
        fs::write(target, self.ppm_bytes()).map_err(|e| HwError::Io(format!("{}: {e}", target.display())))
    }
}
