//! PIMG program images.
//!
//! ```text
//! header   "PIMG" | version u16 | nsegs u16 | entry_args u16 | key_len u16 | key | pad to 8
//! segment  va u64 | file_off u32 | file_len u32 | mem_len u32 | perms u8 | pad [3]   (24 bytes each)
//! payload  segment bytes at their file offsets
//! ```
//!
//! All integers little-endian. `perms` uses the R=1, W=2, X=4 bits.

use crate::mem::{Perms, PAGE_SIZE, STACK_LO};
use crate::vfs::FsError;

pub const PIMG_MAGIC: &[u8; 4] = b"PIMG";
pub const PIMG_VERSION: u16 = 1;
pub const SEGMENT_ENTRY_LEN: usize = 24;
pub const MAX_SEGMENTS: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub va: u64,
    pub data: Vec<u8>,
    pub mem_len: u64,
    pub perms: Perms,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProgramImage {
    pub key: String,
    pub entry_args: u16,
    pub segments: Vec<Segment>,
}

fn bad(msg: &str) -> FsError {
    FsError::BadImage(msg.to_string())
}

fn header_len(key_len: usize) -> usize {
    (12 + key_len).div_ceil(8) * 8
}

impl ProgramImage {
    /// Lowest executable address, where the program counter starts.
    pub fn entry(&self) -> u64 {
        self.segments.iter().filter(|s| s.perms.0 & Perms::X.0 != 0).map(|s| s.va).min().unwrap_or(0)
    }

    /// End of the highest segment, rounded up to a page.
    pub fn top(&self) -> u64 {
        self.segments.iter().map(|s| (s.va + s.mem_len).div_ceil(PAGE_SIZE) * PAGE_SIZE).max().unwrap_or(0)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let key = self.key.as_bytes();
        let hlen = header_len(key.len());
        let table = hlen + self.segments.len() * SEGMENT_ENTRY_LEN;
        let mut out = Vec::with_capacity(table + self.segments.iter().map(|s| s.data.len()).sum::<usize>());
        out.extend_from_slice(PIMG_MAGIC);
        out.extend_from_slice(&PIMG_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.segments.len() as u16).to_le_bytes());
        out.extend_from_slice(&self.entry_args.to_le_bytes());
        out.extend_from_slice(&(key.len() as u16).to_le_bytes());
        out.extend_from_slice(key);
        out.resize(hlen, 0);
        let mut off = table;
        for s in &self.segments {
            out.extend_from_slice(&s.va.to_le_bytes());
            out.extend_from_slice(&(off as u32).to_le_bytes());
            out.extend_from_slice(&(s.data.len() as u32).to_le_bytes());
            out.extend_from_slice(&(s.mem_len as u32).to_le_bytes());
            out.push(s.perms.0);
            out.extend_from_slice(&[0; 3]);
            off += s.data.len();
        }
        for s in &self.segments {
            out.extend_from_slice(&s.data);
        }
        out
    }

    /// Parses and validates an image. The registry key is checked by the
    /// loader, which knows which behaviors exist.
    pub fn parse(b: &[u8]) -> Result<ProgramImage, FsError> {
        if b.len() < 12 || &b[0..4] != PIMG_MAGIC {
            return Err(bad("missing PIMG magic"));
        }
        let h = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        if h(4) != PIMG_VERSION {
            return Err(bad("unsupported version"));
        }
        let nsegs = h(6) as usize;
        let entry_args = h(8);
        let key_len = h(10) as usize;
        if nsegs == 0 || nsegs > MAX_SEGMENTS {
            return Err(bad("bad segment count"));
        }
        let hlen = header_len(key_len);
        let table_end = hlen + nsegs * SEGMENT_ENTRY_LEN;
        if b.len() < table_end {
            return Err(bad("truncated header"));
        }
        let key = std::str::from_utf8(&b[12..12 + key_len]).map_err(|_| bad("key is not UTF-8"))?.to_string();
        let mut segments = Vec::with_capacity(nsegs);
        for i in 0..nsegs {
            let e = &b[hlen + i * SEGMENT_ENTRY_LEN..hlen + (i + 1) * SEGMENT_ENTRY_LEN];
            let w = |o: usize| u32::from_le_bytes(e[o..o + 4].try_into().unwrap()) as u64;
            let va = u64::from_le_bytes(e[0..8].try_into().unwrap());
            let (file_off, file_len, mem_len) = (w(8), w(12), w(16));
            let perms = Perms(e[20] & 7);
            if va % PAGE_SIZE != 0 {
                return Err(bad("segment not page aligned"));
            }
            if mem_len == 0 || mem_len < file_len {
                return Err(bad("segment memory smaller than file data"));
            }
            if file_off + file_len > b.len() as u64 || (file_len > 0 && file_off < table_end as u64) {
                return Err(bad("segment data outside image"));
            }
            if va == 0 || va.checked_add(mem_len).is_none_or(|end| end > STACK_LO) {
                return Err(bad("segment outside user range"));
            }
            segments.push(Segment { va, data: b[file_off as usize..(file_off + file_len) as usize].to_vec(), mem_len, perms });
        }
        let mut spans: Vec<(u64, u64)> =
            segments.iter().map(|s| (s.va, (s.va + s.mem_len).div_ceil(PAGE_SIZE) * PAGE_SIZE)).collect();
        spans.sort();
        if spans.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(bad("overlapping segments"));
        }
        if !segments.iter().any(|s| s.perms.0 & Perms::X.0 != 0) {
            return Err(bad("no executable segment"));
        }
        Ok(ProgramImage { key, entry_args, segments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ProgramImage {
        ProgramImage {
            key: "donut".into(),
            entry_args: 1,
            segments: vec![
                Segment { va: 0x1000, data: vec![0xC0; 16], mem_len: 0x1000, perms: Perms::RX },
                Segment { va: 0x10000, data: b"hello".to_vec(), mem_len: 0x3000, perms: Perms::RW },
            ],
        }
    }

    #[test]
    fn roundtrip() {
        let img = sample();
        let bytes = img.to_bytes();
        assert_eq!(&bytes[0..4], b"PIMG");
        assert_eq!(ProgramImage::parse(&bytes).unwrap(), img);
        assert_eq!(img.entry(), 0x1000);
        assert_eq!(img.top(), 0x13000);
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = sample().to_bytes();
        // 12 header bytes + "donut" = 17, padded to 24; table starts there.
        assert_eq!(u64::from_le_bytes(bytes[24..32].try_into().unwrap()), 0x1000);
        assert_eq!(u32::from_le_bytes(bytes[32..36].try_into().unwrap()), 24 + 48);
        assert_eq!(bytes[44], 5);
    }

    #[test]
    fn overlapping_segments_rejected() {
        let mut img = sample();
        img.segments[1].va = 0x1000;
        assert!(matches!(ProgramImage::parse(&img.to_bytes()), Err(FsError::BadImage(_))));
    }

    #[test]
    fn misaligned_and_nonexec_rejected() {
        let mut img = sample();
        img.segments[1].va = 0x10010;
        assert!(ProgramImage::parse(&img.to_bytes()).is_err());
        let mut img = sample();
        img.segments[0].perms = Perms::R;
        assert!(ProgramImage::parse(&img.to_bytes()).is_err());
        let mut img = sample();
        img.segments[0].va = STACK_LO;
        assert!(ProgramImage::parse(&img.to_bytes()).is_err());
    }

    #[test]
    fn truncated_rejected() {
        let bytes = sample().to_bytes();
        assert!(ProgramImage::parse(&bytes[..bytes.len() - 1]).is_err());
        assert!(ProgramImage::parse(b"ELF\x7f").is_err());
    }
}
