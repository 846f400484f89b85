//! Simulated keyboard source.
//!
//! Injected events are stamped with the current tick and held until the
//! next clock advance raises the KEYBOARD line.

use std::collections::VecDeque;
use std::fmt;

use super::clock::Tick;
use super::HwError;

pub const KBD_QUEUE_CAPACITY: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KeyAction {
    Press,
    Release,
}

impl KeyAction {
    pub fn to_u8(self) -> u8 {
        match self {
            KeyAction::Press => 1,
            KeyAction::Release => 0,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(KeyAction::Press),
            0 => Some(KeyAction::Release),
            _ => None,
        }
    }
}

/// Modifier set packed as bits: ctrl = 1, shift = 2, alt = 4.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Mods(pub u8);

impl Mods {
    pub const NONE: Mods = Mods(0);
    pub const CTRL: Mods = Mods(1);
    pub const SHIFT: Mods = Mods(2);
    pub const ALT: Mods = Mods(4);

    pub fn contains(self, other: Mods) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn union(self, other: Mods) -> Mods {
        Mods(self.0 | other.0)
    }

    pub fn without(self, other: Mods) -> Mods {
        Mods(self.0 & !other.0)
    }

    /// Parses "-", "ctrl", "ctrl+shift", ...
    pub fn parse(s: &str) -> Option<Mods> {
        if s == "-" || s.is_empty() {
            return Some(Mods::NONE);
        }
        let mut m = Mods::NONE;
        for part in s.split('+') {
            m = m.union(match part {
                "ctrl" => Mods::CTRL,
                "shift" => Mods::SHIFT,
                "alt" => Mods::ALT,
                _ => return None,
            });
        }
        Some(m)
    }
}

impl fmt::Display for Mods {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(Mods::CTRL, "ctrl"), (Mods::SHIFT, "shift"), (Mods::ALT, "alt")]
            .iter()
            .filter(|(m, _)| self.contains(*m))
            .map(|(_, n)| *n)
            .collect();
        if names.is_empty() {
            f.write_str("-")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct KeyEvent {
    pub scancode: u16,
    pub action: KeyAction,
    pub mods: Mods,
    pub tick: Tick,
}

pub const KEY_RECORD_LEN: usize = 8;

impl KeyEvent {
    /// Wire layout: scancode u16, action u8, mods u8, tick u32 (LE).
    pub fn to_bytes(&self) -> [u8; KEY_RECORD_LEN] {
        let mut out = [0u8; KEY_RECORD_LEN];
        out[0..2].copy_from_slice(&self.scancode.to_le_bytes());
        out[2] = self.action.to_u8();
        out[3] = self.mods.0;
        out[4..8].copy_from_slice(&(self.tick as u32).to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<KeyEvent> {
        if b.len() < KEY_RECORD_LEN {
            return None;
        }
        Some(KeyEvent {
            scancode: u16::from_le_bytes([b[0], b[1]]),
            action: KeyAction::from_u8(b[2])?,
            mods: Mods(b[3]),
            tick: u32::from_le_bytes([b[4], b[5], b[6], b[7]]) as Tick,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct KeyboardHw {
    queue: VecDeque<KeyEvent>,
    injected: u64,
}

impl KeyboardHw {
    pub fn inject(&mut self, ev: KeyEvent) -> Result<(), HwError> {
        if self.queue.len() >= KBD_QUEUE_CAPACITY {
            return Err(HwError::QueueFull);
        }
        self.queue.push_back(ev);
        self.injected += 1;
        Ok(())
    }

    pub fn has_pending(&self) -> bool {
        !self.queue.is_empty()
    }

    pub fn drain(&mut self) -> Vec<KeyEvent> {
        self.queue.drain(..).collect()
    }

    pub fn injected(&self) -> u64 {
        self.injected
    }
}

/// US-layout scancodes (evdev numbering) for the keys the shell and demos use.
pub mod scancode {
    pub const ESC: u16 = 1;
    pub const BACKSPACE: u16 = 14;
    pub const TAB: u16 = 15;
    pub const ENTER: u16 = 28;
    pub const LEFTCTRL: u16 = 29;
    pub const LEFTSHIFT: u16 = 42;
    pub const LEFTALT: u16 = 56;
    pub const SPACE: u16 = 57;
    pub const UP: u16 = 103;
    pub const LEFT: u16 = 105;
    pub const RIGHT: u16 = 106;
    pub const DOWN: u16 = 108;

    const ROW1: &[u8] = b"1234567890-=";
    const ROW2: &[u8] = b"qwertyuiop[]";
    const ROW3: &[u8] = b"asdfghjkl;'";
    const ROW4: &[u8] = b"zxcvbnm,./";

    const SHIFTED_FROM: &[u8] = b"1234567890-=[];',./`\\";
    const SHIFTED_TO: &[u8] = b"!@#$%^&*()_+{}:\"<>?~|";

    /// Maps an ASCII character to (scancode, needs_shift).
    pub fn from_ascii(c: u8) -> Option<(u16, bool)> {
        if c.is_ascii_uppercase() {
            return from_ascii(c.to_ascii_lowercase()).map(|(s, _)| (s, true));
        }
        if let Some(i) = SHIFTED_TO.iter().position(|&x| x == c) {
            return from_ascii(SHIFTED_FROM[i]).map(|(s, _)| (s, true));
        }
        let pos = |row: &[u8], base: u16| row.iter().position(|&x| x == c).map(|i| (base + i as u16, false));
        match c {
            b'\n' => Some((ENTER, false)),
            b' ' => Some((SPACE, false)),
            b'\t' => Some((TAB, false)),
            8 => Some((BACKSPACE, false)),
            b'`' => Some((41, false)),
            b'\\' => Some((43, false)),
            _ => pos(ROW1, 2).or_else(|| pos(ROW2, 16)).or_else(|| pos(ROW3, 30)).or_else(|| pos(ROW4, 44)),
        }
    }

    /// Inverse of [`from_ascii`] for printable keys.
    pub fn to_ascii(code: u16, shift: bool) -> Option<u8> {
        let plain = match code {
            ENTER => b'\n',
            SPACE => b' ',
            TAB => b'\t',
            BACKSPACE => 8,
            41 => b'`',
            43 => b'\\',
            2..=13 => ROW1[(code - 2) as usize],
            16..=27 => ROW2[(code - 16) as usize],
            30..=40 => ROW3[(code - 30) as usize],
            44..=53 => ROW4[(code - 44) as usize],
            _ => return None,
        };
        if !shift {
            return Some(plain);
        }
        if plain.is_ascii_lowercase() {
            return Some(plain.to_ascii_uppercase());
        }
        match SHIFTED_FROM.iter().position(|&x| x == plain) {
            Some(i) => Some(SHIFTED_TO[i]),
            None => Some(plain),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_roundtrip_and_layout() {
        let ev = KeyEvent { scancode: 0x1E, action: KeyAction::Press, mods: Mods::CTRL, tick: 0x0102_0304 };
        let b = ev.to_bytes();
        assert_eq!(b, [0x1E, 0, 1, 1, 4, 3, 2, 1]);
        assert_eq!(KeyEvent::from_bytes(&b), Some(ev));
    }

    #[test]
    fn capacity() {
        let mut k = KeyboardHw::default();
        let ev = KeyEvent { scancode: 30, action: KeyAction::Press, mods: Mods::NONE, tick: 0 };
        for _ in 0..KBD_QUEUE_CAPACITY {
            k.inject(ev).unwrap();
        }
        assert_eq!(k.inject(ev), Err(HwError::QueueFull));
    }

    #[test]
    fn ascii_map_roundtrip() {
        for c in b"abcxyz0129 -=/.,;'[]\nABC!?:\"".iter().copied() {
            let (code, shift) = scancode::from_ascii(c).unwrap();
            assert_eq!(scancode::to_ascii(code, shift), Some(c), "char {}", c as char);
        }
        assert_eq!(scancode::from_ascii(b'a'), Some((30, false)));
    }

    #[test]
    fn mods_parse_display() {
        assert_eq!(Mods::parse("ctrl+shift"), Some(Mods(3)));
        assert_eq!(Mods::parse("-"), Some(Mods::NONE));
        assert_eq!(Mods(5).to_string(), "ctrl+alt");
        assert!(Mods::parse("meta").is_none());
    }
}
