//! Interrupt lines and per-core routing.

use std::collections::VecDeque;
use std::fmt;

use super::clock::{Tick, TimerId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IrqLine {
    Timer(usize),
    Block,
    Keyboard,
    AudioDma,
    FiqPanic,
}

impl IrqLine {
    /// Stable numeric line id; timers occupy `0..64` by core index.
    pub fn id(self) -> u32 {
        match self {
            IrqLine::Timer(c) => c as u32,
            IrqLine::Block => 64,
            IrqLine::Keyboard => 65,
            IrqLine::AudioDma => 66,
            IrqLine::FiqPanic => 67,
        }
    }

    pub fn is_fiq(self) -> bool {
        matches!(self, IrqLine::FiqPanic)
    }
}

impl fmt::Display for IrqLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IrqLine::Timer(c) => write!(f, "TIMER({c})"),
            IrqLine::Block => f.write_str("BLOCK"),
            IrqLine::Keyboard => f.write_str("KEYBOARD"),
            IrqLine::AudioDma => f.write_str("AUDIO_DMA"),
            IrqLine::FiqPanic => f.write_str("FIQ_PANIC"),
        }
    }
}

/// A raised interrupt. `timer` names the virtual timer for `Timer` lines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Irq {
    pub line: IrqLine,
    pub target_core: usize,
    pub tick: Tick,
    pub timer: Option<TimerId>,
}

impl Irq {
    pub fn sort_key(&self) -> (Tick, u32, u64) {
        (self.tick, self.line.id(), self.timer.map_or(0, |t| t.0))
    }
}

/// Routes lines to cores and parks IRQs for cores with interrupts masked.
///
/// Timer lines go to their own core, IO lines to core 0, and each FIQ goes
/// to the next core in round-robin order.
#[derive(Debug, Clone)]
pub struct IrqController {
    ncores: usize,
    fiq_next: usize,
    deferred: Vec<VecDeque<Irq>>,
}

impl IrqController {
    pub fn new(ncores: usize) -> Self {
        assert!(ncores >= 1);
        Self {
            ncores,
            fiq_next: 0,
            deferred: vec![VecDeque::new(); ncores],
        }
    }

    pub fn ncores(&self) -> usize {
        self.ncores
    }

    pub fn route(&mut self, line: IrqLine) -> usize {
        match line {
            IrqLine::Timer(c) => c % self.ncores,
            IrqLine::Block | IrqLine::Keyboard | IrqLine::AudioDma => 0,
            IrqLine::FiqPanic => {
                let core = self.fiq_next;
                self.fiq_next = (self.fiq_next + 1) % self.ncores;
                core
            }
        }
    }

    pub fn defer(&mut self, irq: Irq) {
        self.deferred[irq.target_core].push_back(irq);
    }

    pub fn take_deferred(&mut self, core: usize) -> Vec<Irq> {
        self.deferred[core].drain(..).collect()
    }

    pub fn deferred_len(&self, core: usize) -> usize {
        self.deferred[core].len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_rules() {
        let mut ic = IrqController::new(4);
        assert_eq!(ic.route(IrqLine::Timer(3)), 3);
        assert_eq!(ic.route(IrqLine::Keyboard), 0);
        assert_eq!(ic.route(IrqLine::AudioDma), 0);
        assert_eq!(ic.route(IrqLine::Block), 0);
        let fiq: Vec<_> = (0..5).map(|_| ic.route(IrqLine::FiqPanic)).collect();
        assert_eq!(fiq, vec![0, 1, 2, 3, 0]);
    }

    #[test]
    fn deferred_queue_preserves_order() {
        let mut ic = IrqController::new(2);
        for t in 0..3 {
            ic.defer(Irq { line: IrqLine::Keyboard, target_core: 0, tick: t, timer: None });
        }
        let ticks: Vec<_> = ic.take_deferred(0).iter().map(|i| i.tick).collect();
        assert_eq!(ticks, vec![0, 1, 2]);
        assert_eq!(ic.deferred_len(0), 0);
    }
}
