//! Device-file state: key event queues, the kernel audio ring, the console
//! line discipline and text grid, and the `/dev/surface` message framing.
//!
//! Event records use the 8-byte layout of [`KeyEvent::to_bytes`]: scancode
//! u16, action u8, mods u8, tick u32 (truncated), little-endian.

use std::collections::VecDeque;

use font8x8::UnicodeFonts;

use crate::hwsim::kbd::scancode;
use crate::hwsim::kbd::KEY_RECORD_LEN;
use crate::hwsim::{KeyAction, KeyEvent, Mods};
use crate::vfs::FsError;

pub const EVENTQ_CAPACITY: usize = 256;
pub const AUDIO_RING_CAPACITY: usize = 8192;

/// Bounded FIFO of key events. A push into a full queue drops the new event.
#[derive(Clone, Debug, Default)]
pub struct EventQueue {
    q: VecDeque<KeyEvent>,
    injected: u64,
    delivered: u64,
    overflow: u64,
}

impl EventQueue {
    pub fn push(&mut self, ev: KeyEvent) -> bool {
        self.injected += 1;
        if self.q.len() >= EVENTQ_CAPACITY {
            self.overflow += 1;
            return false;
        }
        self.q.push_back(ev);
        true
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn overflow_count(&self) -> u64 {
        self.overflow
    }

    pub fn injected(&self) -> u64 {
        self.injected
    }

    pub fn delivered(&self) -> u64 {
        self.delivered
    }

    /// Serializes whole records for a read of `n` bytes. A request shorter
    /// than one record is `BadLength`; an empty queue is `WouldBlock`.
    pub fn read(&mut self, n: usize) -> Result<Vec<u8>, FsError> {
        if n < KEY_RECORD_LEN {
            return Err(FsError::BadLength);
        }
        if self.q.is_empty() {
            return Err(FsError::WouldBlock);
        }
        let k = (n / KEY_RECORD_LEN).min(self.q.len());
        let mut out = Vec::with_capacity(k * KEY_RECORD_LEN);
        for ev in self.q.drain(..k) {
            out.extend_from_slice(&ev.to_bytes());
        }
        self.delivered += k as u64;
        Ok(out)
    }
}

/// Kernel-side sample ring between `/dev/sb` writers and the hardware FIFO.
#[derive(Clone, Debug, Default)]
pub struct AudioRing {
    buf: VecDeque<i16>,
    produced: u64,
    consumed: u64,
}

impl AudioRing {
    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn space(&self) -> usize {
        AUDIO_RING_CAPACITY - self.buf.len()
    }

    pub fn produced(&self) -> u64 {
        self.produced
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn write(&mut self, samples: &[i16]) -> usize {
        let n = samples.len().min(self.space());
        self.buf.extend(&samples[..n]);
        self.produced += n as u64;
        n
    }

    /// Removes up to `n` samples from the consumer side.
    pub fn take(&mut self, n: usize) -> Vec<i16> {
        let k = n.min(self.buf.len());
        self.consumed += k as u64;
        self.buf.drain(..k).collect()
    }

    /// Puts samples that the hardware refused back at the front.
    pub fn unget(&mut self, samples: &[i16]) {
        for &s in samples.iter().rev() {
            self.buf.push_front(s);
        }
        self.consumed -= samples.len() as u64;
    }

    /// True when a drain moved the fill level from above half to half or less.
    pub fn crossed_half(before: usize, after: usize) -> bool {
        before > AUDIO_RING_CAPACITY / 2 && after <= AUDIO_RING_CAPACITY / 2
    }
}

/// Canonical-mode console input: keys are echoed and collected into lines;
/// a read returns bytes only once a newline has been typed.
#[derive(Clone, Debug, Default)]
pub struct LineDiscipline {
    editing: Vec<u8>,
    ready: VecDeque<u8>,
    shift: bool,
    ctrl: bool,
}

impl LineDiscipline {
    /// Feeds one key event. Returns bytes to echo.
    pub fn key(&mut self, ev: &KeyEvent) -> Vec<u8> {
        let down = ev.action == KeyAction::Press;
        match ev.scancode {
            scancode::LEFTSHIFT | 54 => {
                self.shift = down;
                return Vec::new();
            }
            scancode::LEFTCTRL => {
                self.ctrl = down;
                return Vec::new();
            }
            _ => {}
        }
        if !down || ev.mods.contains(Mods::CTRL) || self.ctrl {
            return Vec::new();
        }
        let shift = self.shift || ev.mods.contains(Mods::SHIFT);
        match scancode::to_ascii(ev.scancode, shift) {
            Some(8) => {
                if self.editing.pop().is_some() {
                    b"\x08 \x08".to_vec()
                } else {
                    Vec::new()
                }
            }
            Some(b'\n') => {
                self.editing.push(b'\n');
                self.ready.extend(self.editing.drain(..));
                b"\n".to_vec()
            }
            Some(c) => {
                self.editing.push(c);
                vec![c]
            }
            None => Vec::new(),
        }
    }

    pub fn has_line(&self) -> bool {
        !self.ready.is_empty()
    }

    /// Up to `n` bytes of completed input, never crossing a line end.
    pub fn read(&mut self, n: usize) -> Option<Vec<u8>> {
        if self.ready.is_empty() {
            return None;
        }
        let mut out = Vec::new();
        while out.len() < n {
            match self.ready.pop_front() {
                Some(c) => {
                    out.push(c);
                    if c == b'\n' {
                        break;
                    }
                }
                None => break,
            }
        }
        Some(out)
    }
}

pub const SURFACE_CONFIG_MAGIC: u16 = 0x5343;
pub const SURFACE_RECT_MAGIC: u16 = 0x5352;
pub const SURFACE_FLOAT: u16 = 1;
pub const SURFACE_ALPHA: u16 = 2;
pub const CONFIG_LEN: usize = 8;
pub const RECT_HEADER_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SurfaceMsg {
    Config { w: u16, h: u16, flags: u16 },
    Rect { x: u16, y: u16, w: u16, h: u16, pixels: Vec<u8> },
}

fn u16_at(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

impl SurfaceMsg {
    /// Splits a write into messages. Every byte must belong to a whole
    /// message.
    pub fn parse_all(mut b: &[u8]) -> Result<Vec<SurfaceMsg>, FsError> {
        let bad = |m: &str| FsError::ProtocolError(m.to_string());
        let mut out = Vec::new();
        while !b.is_empty() {
            if b.len() < 2 {
                return Err(bad("truncated message"));
            }
            match u16_at(b, 0) {
                SURFACE_CONFIG_MAGIC => {
                    if b.len() < CONFIG_LEN {
                        return Err(bad("truncated CONFIG"));
                    }
                    out.push(SurfaceMsg::Config { w: u16_at(b, 2), h: u16_at(b, 4), flags: u16_at(b, 6) });
                    b = &b[CONFIG_LEN..];
                }
                SURFACE_RECT_MAGIC => {
                    if b.len() < RECT_HEADER_LEN {
                        return Err(bad("truncated RECT"));
                    }
                    let (x, y, w, h) = (u16_at(b, 2), u16_at(b, 4), u16_at(b, 6), u16_at(b, 8));
                    let n = w as usize * h as usize * 4;
                    if b.len() < RECT_HEADER_LEN + n {
                        return Err(bad("truncated RECT pixels"));
                    }
                    out.push(SurfaceMsg::Rect { x, y, w, h, pixels: b[RECT_HEADER_LEN..RECT_HEADER_LEN + n].to_vec() });
                    b = &b[RECT_HEADER_LEN + n..];
                }
                m => return Err(FsError::ProtocolError(format!("bad magic {m:#06x}"))),
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            SurfaceMsg::Config { w, h, flags } => {
                for v in [SURFACE_CONFIG_MAGIC, *w, *h, *flags] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            SurfaceMsg::Rect { x, y, w, h, pixels } => {
                for v in [SURFACE_RECT_MAGIC, *x, *y, *w, *h] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(pixels);
            }
        }
        out
    }
}

pub const GLYPH: usize = 8;
pub const CONSOLE_FG: [u8; 4] = [0xC0, 0xC0, 0xC0, 0xFF];
pub const CONSOLE_BG: [u8; 4] = [0x00, 0x00, 0x20, 0xFF];

/// Fixed-size character grid with scrolling, rendered with an 8x8 font.
#[derive(Clone, Debug)]
pub struct TextGrid {
    cols: usize,
    rows: usize,
    cells: Vec<u8>,
    cx: usize,
    cy: usize,
    dirty: Vec<bool>,
}

impl TextGrid {
    pub fn new(cols: usize, rows: usize) -> Self {
        Self { cols, rows, cells: vec![b' '; cols * rows], cx: 0, cy: 0, dirty: vec![true; rows] }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row_text(&self, r: usize) -> String {
        String::from_utf8_lossy(&self.cells[r * self.cols..(r + 1) * self.cols]).trim_end().to_string()
    }

    pub fn text(&self) -> String {
        (0..self.rows).map(|r| self.row_text(r) + "\n").collect()
    }

    fn newline(&mut self) {
        self.cx = 0;
        if self.cy + 1 < self.rows {
            self.cy += 1;
        } else {
            self.cells.copy_within(self.cols.., 0);
            let last = (self.rows - 1) * self.cols;
            self.cells[last..].fill(b' ');
            self.dirty.fill(true);
        }
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &c in bytes {
            match c {
                b'\n' => self.newline(),
                b'\r' => self.cx = 0,
                8 => self.cx = self.cx.saturating_sub(1),
                c => {
                    if self.cx >= self.cols {
                        self.newline();
                    }
                    let c = if (0x20..0x7F).contains(&c) { c } else { b'?' };
                    self.cells[self.cy * self.cols + self.cx] = c;
                    self.dirty[self.cy] = true;
                    self.cx += 1;
                }
            }
        }
    }

    /// Rows redrawn since the last call.
    pub fn take_dirty(&mut self) -> Vec<usize> {
        let rows: Vec<usize> = (0..self.rows).filter(|&r| self.dirty[r]).collect();
        self.dirty.fill(false);
        rows
    }

    /// Draws row `r` into an RGBA buffer of width `stride_px` at pixel
    /// origin (0, r*8).
    pub fn render_row(&self, r: usize, buf: &mut [u8], stride_px: usize) {
        for col in 0..self.cols {
            let ch = self.cells[r * self.cols + col] as char;
            let glyph = font8x8::BASIC_FONTS.get(ch).unwrap_or([0; 8]);
            for (gy, bits) in glyph.iter().enumerate() {
                let y = r * GLYPH + gy;
                for gx in 0..GLYPH {
                    let x = col * GLYPH + gx;
                    if x >= stride_px {
                        continue;
                    }
                    let px = if bits & (1 << gx) != 0 { CONSOLE_FG } else { CONSOLE_BG };
                    let o = (y * stride_px + x) * 4;
                    if o + 4 <= buf.len() {
                        buf[o..o + 4].copy_from_slice(&px);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(code: u16, action: KeyAction) -> KeyEvent {
        KeyEvent { scancode: code, action, mods: Mods::NONE, tick: 0 }
    }

    #[test]
    fn event_queue_framing() {
        let mut q = EventQueue::default();
        assert_eq!(q.read(8), Err(FsError::WouldBlock));
        q.push(key(30, KeyAction::Press));
        assert_eq!(q.read(4), Err(FsError::BadLength));
        let b = q.read(8).unwrap();
        assert_eq!(KeyEvent::from_bytes(&b).unwrap().scancode, 30);
        assert!(q.is_empty());
    }

    #[test]
    fn event_queue_overflow_drops_newest() {
        let mut q = EventQueue::default();
        for i in 0..300u16 {
            q.push(key(i, KeyAction::Press));
        }
        assert_eq!(q.len(), 256);
        assert_eq!(q.overflow_count(), 44);
        let b = q.read(8 * 256).unwrap();
        assert_eq!(KeyEvent::from_bytes(&b[255 * 8..]).unwrap().scancode, 255);
        assert_eq!(q.injected(), q.delivered() + q.len() as u64 + q.overflow_count());
    }

    #[test]
    fn audio_ring_capacity() {
        let mut r = AudioRing::default();
        assert_eq!(r.write(&[1; 8192]), 8192);
        assert_eq!(r.write(&[1; 10]), 0);
        let t = r.take(100);
        r.unget(&t[50..]);
        assert_eq!(r.len(), 8192 - 50);
        assert_eq!(r.produced(), r.consumed() + r.len() as u64);
        assert!(AudioRing::crossed_half(5000, 4096));
        assert!(!AudioRing::crossed_half(4096, 100));
    }

    #[test]
    fn line_discipline_echo_and_backspace() {
        let mut ld = LineDiscipline::default();
        for c in b"lsx" {
            let (code, _) = scancode::from_ascii(*c).unwrap();
            assert_eq!(ld.key(&key(code, KeyAction::Press)), vec![*c]);
        }
        assert_eq!(ld.key(&key(scancode::BACKSPACE, KeyAction::Press)), b"\x08 \x08");
        assert!(ld.read(10).is_none());
        ld.key(&key(scancode::ENTER, KeyAction::Press));
        assert_eq!(ld.read(10).unwrap(), b"ls\n");
    }

    #[test]
    fn line_discipline_shift() {
        let mut ld = LineDiscipline::default();
        ld.key(&key(scancode::LEFTSHIFT, KeyAction::Press));
        assert_eq!(ld.key(&key(30, KeyAction::Press)), b"A");
        ld.key(&key(scancode::LEFTSHIFT, KeyAction::Release));
        assert_eq!(ld.key(&key(30, KeyAction::Press)), b"a");
    }

    #[test]
    fn surface_messages_roundtrip() {
        let msgs = vec![
            SurfaceMsg::Config { w: 2, h: 1, flags: SURFACE_FLOAT | SURFACE_ALPHA },
            SurfaceMsg::Rect { x: 0, y: 0, w: 2, h: 1, pixels: vec![9; 8] },
        ];
        let bytes: Vec<u8> = msgs.iter().flat_map(|m| m.to_bytes()).collect();
        assert_eq!(SurfaceMsg::parse_all(&bytes).unwrap(), msgs);
        assert!(matches!(SurfaceMsg::parse_all(&bytes[..bytes.len() - 1]), Err(FsError::ProtocolError(_))));
        assert!(matches!(SurfaceMsg::parse_all(&[0, 0]), Err(FsError::ProtocolError(_))));
    }

    #[test]
    fn text_grid_scrolls() {
        let mut g = TextGrid::new(4, 2);
        g.write(b"ab\ncd\nef");
        assert_eq!(g.text(), "cd\nef\n");
        g.write(b"ghij");
        assert_eq!(g.text(), "efgh\nij\n");
    }
}
