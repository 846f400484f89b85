//! ftrace-style event ring shared by all cores.
//!
//! Records are fixed-size and the ring is allocated once at construction;
//! `emit` is a single slot store. When full, the oldest record is overwritten.

use std::fmt;

use crate::hwsim::Tick;

pub const TRACE_CAPACITY: usize = 65_536;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TraceKind {
    SchedSwitch,
    SyscallEnter,
    SyscallExit,
    Irq,
    Fault,
    WmComposite,
    UserMark,
}

impl TraceKind {
    pub fn name(self) -> &'static str {
        match self {
            TraceKind::SchedSwitch => "SCHED_SWITCH",
            TraceKind::SyscallEnter => "SYSCALL_ENTER",
            TraceKind::SyscallExit => "SYSCALL_EXIT",
            TraceKind::Irq => "IRQ",
            TraceKind::Fault => "FAULT",
            TraceKind::WmComposite => "WM_COMPOSITE",
            TraceKind::UserMark => "USER_MARK",
        }
    }

    pub fn parse(s: &str) -> Option<TraceKind> {
        Some(match s {
            "SCHED_SWITCH" => TraceKind::SchedSwitch,
            "SYSCALL_ENTER" => TraceKind::SyscallEnter,
            "SYSCALL_EXIT" => TraceKind::SyscallExit,
            "IRQ" => TraceKind::Irq,
            "FAULT" => TraceKind::Fault,
            "WM_COMPOSITE" => TraceKind::WmComposite,
            "USER_MARK" => TraceKind::UserMark,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub tick: Tick,
    pub core: u8,
    pub kind: TraceKind,
    pub payload: [u64; 2],
}

impl fmt::Display for TraceEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {}", self.tick, self.core, self.kind.name(), self.payload[0], self.payload[1])
    }
}

impl TraceEvent {
    pub fn parse_line(line: &str) -> Option<TraceEvent> {
        let mut it = line.split_whitespace();
        let tick = it.next()?.parse().ok()?;
        let core = it.next()?.parse().ok()?;
        let kind = TraceKind::parse(it.next()?)?;
        let p0 = it.next()?.parse().ok()?;
        let p1 = it.next()?.parse().ok()?;
        Some(TraceEvent { tick, core, kind, payload: [p0, p1] })
    }
}

const EMPTY: TraceEvent = TraceEvent { tick: 0, core: 0, kind: TraceKind::UserMark, payload: [0, 0] };

#[derive(Clone)]
pub struct TraceRing {
    slots: Box<[TraceEvent]>,
    cursor: usize,
    len: usize,
    wrapped: bool,
    total: u64,
}

impl fmt::Debug for TraceRing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TraceRing(len={}, total={}, wrapped={})", self.len, self.total, self.wrapped)
    }
}

impl Default for TraceRing {
    fn default() -> Self {
        Self::with_capacity(TRACE_CAPACITY)
    }
}

impl TraceRing {
    pub fn with_capacity(cap: usize) -> Self {
        assert!(cap > 0);
        Self { slots: vec![EMPTY; cap].into_boxed_slice(), cursor: 0, len: 0, wrapped: false, total: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn wrapped(&self) -> bool {
        self.wrapped
    }

    /// Count of records ever emitted, including overwritten ones.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn emit(&mut self, tick: Tick, core: usize, kind: TraceKind, payload: [u64; 2]) {
        self.slots[self.cursor] = TraceEvent { tick, core: core as u8, kind, payload };
        self.cursor += 1;
        if self.cursor == self.slots.len() {
            self.cursor = 0;
        }
        if self.len == self.slots.len() {
            self.wrapped = true;
        } else {
            self.len += 1;
        }
        self.total += 1;
    }

    /// Newest `n` records, oldest first.
    pub fn dump(&self, n: usize) -> Vec<TraceEvent> {
        let n = n.min(self.len);
        let cap = self.slots.len();
        let start = (self.cursor + cap - n) % cap;
        (0..n).map(|i| self.slots[(start + i) % cap]).collect()
    }

    pub fn dump_text(&self, n: usize) -> String {
        let mut s = String::new();
        for ev in self.dump(n) {
            s.push_str(&ev.to_string());
            s.push('\n');
        }
        s
    }

    pub fn iter(&self) -> impl Iterator<Item = TraceEvent> + '_ {
        self.dump(self.len).into_iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_in_order() {
        let mut r = TraceRing::default();
        for i in 0..3 {
            r.emit(i, 0, TraceKind::UserMark, [i, 0]);
        }
        let d = r.dump(10);
        assert_eq!(d.len(), 3);
        assert_eq!(d.iter().map(|e| e.tick).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert!(r.dump(0).is_empty());
    }

    #[test]
    fn wraps_at_capacity() {
        let mut r = TraceRing::default();
        for i in 0..(TRACE_CAPACITY as u64 + 1) {
            r.emit(i, 0, TraceKind::Irq, [i, 0]);
        }
        assert!(r.wrapped());
        assert_eq!(r.len(), TRACE_CAPACITY);
        let all = r.dump(TRACE_CAPACITY);
        assert_eq!(all[0].tick, 1);
        assert_eq!(all.last().unwrap().tick, TRACE_CAPACITY as u64);
    }

    #[test]
    fn text_format_roundtrip() {
        let mut r = TraceRing::with_capacity(4);
        r.emit(1234, 2, TraceKind::SchedSwitch, [7, 9]);
        let text = r.dump_text(1);
        assert_eq!(text, "1234 2 SCHED_SWITCH 7 9\n");
        assert_eq!(TraceEvent::parse_line(text.trim()), Some(r.dump(1)[0]));
    }

    proptest::proptest! {
        #[test]
        fn dump_is_newest_suffix_and_idempotent(n_emit in 0usize..40, n in 0usize..50) {
            let mut r = TraceRing::with_capacity(16);
            for i in 0..n_emit {
                r.emit(i as u64, i % 3, TraceKind::UserMark, [0, 0]);
            }
            let a = r.dump(n);
            proptest::prop_assert_eq!(&a, &r.dump(n));
            let expect: Vec<u64> = (0..n_emit as u64).rev().take(n.min(16)).collect::<Vec<_>>().into_iter().rev().collect();
            proptest::prop_assert_eq!(a.iter().map(|e| e.tick).collect::<Vec<_>>(), expect);
        }
    }
}
