//! Bounded byte pipe. Writes of up to [`PIPE_ATOMIC`] bytes are never split.

use std::collections::VecDeque;

use super::FsError;

pub const PIPE_SIZE: usize = 512;
pub const PIPE_ATOMIC: usize = 64;

#[derive(Clone, Debug)]
pub struct Pipe {
    buf: VecDeque<u8>,
    pub readers: u32,
    pub writers: u32,
    written: u64,
    read: u64,
}

impl Default for Pipe {
    fn default() -> Self {
        Self::new()
    }
}

impl Pipe {
    pub fn new() -> Self {
        Self { buf: VecDeque::with_capacity(PIPE_SIZE), readers: 1, writers: 1, written: 0, read: 0 }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn space(&self) -> usize {
        PIPE_SIZE - self.buf.len()
    }

    pub fn total_written(&self) -> u64 {
        self.written
    }

    pub fn total_read(&self) -> u64 {
        self.read
    }

    /// Accepts as much of `data` as possible. `WouldBlock` means nothing was
    /// taken: the pipe is full, or a small write would not fit whole.
    pub fn write(&mut self, data: &[u8]) -> Result<usize, FsError> {
        if self.readers == 0 {
            return Err(FsError::BrokenPipe);
        }
        if data.is_empty() {
            return Ok(0);
        }
        let space = self.space();
        if space == 0 || (data.len() <= PIPE_ATOMIC && space < data.len()) {
            return Err(FsError::WouldBlock);
        }
        let n = data.len().min(space);
        self.buf.extend(&data[..n]);
        self.written += n as u64;
        Ok(n)
    }

    /// Up to `n` bytes. Empty with no writers is end of file.
    pub fn read(&mut self, n: usize) -> Result<Vec<u8>, FsError> {
        if n == 0 {
            return Ok(Vec::new());
        }
        if self.buf.is_empty() {
            return if self.writers == 0 { Ok(Vec::new()) } else { Err(FsError::WouldBlock) };
        }
        let k = n.min(self.buf.len());
        self.read += k as u64;
        Ok(self.buf.drain(..k).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_roundtrip() {
        let mut p = Pipe::new();
        assert_eq!(p.write(b"AB"), Ok(2));
        assert_eq!(p.read(2).unwrap(), b"AB");
    }

    #[test]
    fn eof_and_broken() {
        let mut p = Pipe::new();
        assert_eq!(p.read(1), Err(FsError::WouldBlock));
        p.writers = 0;
        assert_eq!(p.read(1), Ok(vec![]));
        p.readers = 0;
        assert_eq!(p.write(b"x"), Err(FsError::BrokenPipe));
    }

    #[test]
    fn small_write_is_all_or_nothing() {
        let mut p = Pipe::new();
        p.write(&[0; PIPE_SIZE - 10]).unwrap();
        assert_eq!(p.write(&[1; 16]), Err(FsError::WouldBlock));
        assert_eq!(p.write(&[1; 100]), Ok(10));
    }

    proptest::proptest! {
        // Two writers with 8-byte records and one reader, in random order.
        #[test]
        fn records_never_tear(sched in proptest::collection::vec((0u8..3, 1usize..200), 1..3000)) {
            let mut p = Pipe::new();
            let mut next = [0u32; 2];
            let mut out = Vec::new();
            for (who, n) in sched {
                if who < 2 {
                    let w = who as usize;
                    if next[w] < 1000 {
                        let mut rec = [0u8; 8];
                        rec[..4].copy_from_slice(&(w as u32).to_le_bytes());
                        rec[4..].copy_from_slice(&next[w].to_le_bytes());
                        if p.write(&rec).is_ok() {
                            next[w] += 1;
                        }
                    }
                } else if let Ok(b) = p.read(n) {
                    out.extend(b);
                }
            }
            while let Ok(b) = p.read(PIPE_SIZE) {
                if b.is_empty() { break; }
                out.extend(b);
            }
            proptest::prop_assert_eq!(out.len() % 8, 0);
            let mut seen = [0u32; 2];
            for rec in out.chunks(8) {
                let w = u32::from_le_bytes(rec[..4].try_into().unwrap()) as usize;
                let seq = u32::from_le_bytes(rec[4..].try_into().unwrap());
                proptest::prop_assert!(w < 2);
                proptest::prop_assert_eq!(seq, seen[w]);
                seen[w] += 1;
            }
            proptest::prop_assert_eq!(seen, next);
            proptest::prop_assert_eq!(p.total_written(), p.total_read() + p.len() as u64);
        }
    }
}
