//! PWM audio sink: a bounded hardware FIFO drained at the sample rate.
//!
//! Playback starts with the first sample pushed. Drains are computed from the
//! cumulative elapsed time since start, so the total consumed after `t` ticks
//! of playback is exactly `floor(rate * t / 1e6)` (less any shortfall).

use std::collections::VecDeque;

use super::clock::{Tick, TICKS_PER_SEC};

pub const HW_FIFO_CAPACITY: usize = 1024;
pub const DEFAULT_SAMPLE_RATE: u64 = 22_050;

#[derive(Debug, Clone)]
pub struct AudioHw {
    sample_rate: u64,
    fifo: VecDeque<i16>,
    active: bool,
    draining: bool,
    start: Tick,
    attempted: u64,
    consumed: u64,
    pushed: u64,
    underruns: u64,
    missed: u64,
    checksum: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DrainResult {
    pub consumed: u64,
    pub underrun: bool,
    /// FIFO is at or below half capacity after draining.
    pub low_water: bool,
}

impl Default for AudioHw {
    fn default() -> Self {
        Self::new(DEFAULT_SAMPLE_RATE)
    }
}

impl AudioHw {
    pub fn new(sample_rate: u64) -> Self {
        Self {
            sample_rate,
            fifo: VecDeque::with_capacity(HW_FIFO_CAPACITY),
            active: false,
            draining: false,
            start: 0,
            attempted: 0,
            consumed: 0,
            pushed: 0,
            underruns: 0,
            missed: 0,
            checksum: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn sample_rate(&self) -> u64 {
        self.sample_rate
    }

    pub fn is_active(&self) -> bool {
        self.active
    }

    pub fn fifo_len(&self) -> usize {
        self.fifo.len()
    }

    pub fn space(&self) -> usize {
        HW_FIFO_CAPACITY - self.fifo.len()
    }

    pub fn consumed(&self) -> u64 {
        self.consumed
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn underruns(&self) -> u64 {
        self.underruns
    }

    /// Samples that were due while the FIFO was empty.
    pub fn missed(&self) -> u64 {
        self.missed
    }

    /// FNV-1a over every consumed sample, in order.
    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    /// Pushes as many samples as fit; returns the count accepted.
    pub fn push(&mut self, now: Tick, samples: &[i16]) -> usize {
        let n = samples.len().min(self.space());
        if n == 0 {
            return 0;
        }
        if !self.active {
            self.active = true;
            self.start = now;
            self.attempted = 0;
        }
        self.draining = false;
        self.fifo.extend(&samples[..n]);
        self.pushed += n as u64;
        n
    }

    /// Requests a stop once the FIFO runs dry; an empty FIFO then ends
    /// playback instead of counting an underrun.
    pub fn stop_when_empty(&mut self) {
        if self.active {
            self.draining = true;
            if self.fifo.is_empty() {
                self.active = false;
            }
        }
    }

    pub fn drain_to(&mut self, now: Tick) -> DrainResult {
        if !self.active || now < self.start {
            return DrainResult::default();
        }
        let elapsed = (now - self.start) as u128;
        let due_total = (elapsed * self.sample_rate as u128 / TICKS_PER_SEC as u128) as u64;
        let due = due_total - self.attempted;
        self.attempted = due_total;
        if due == 0 {
            return DrainResult { consumed: 0, underrun: false, low_water: self.fifo.len() <= HW_FIFO_CAPACITY / 2 };
        }
        let take = (due as usize).min(self.fifo.len());
        for s in self.fifo.drain(..take) {
            for b in s.to_le_bytes() {
                self.checksum ^= b as u64;
                self.checksum = self.checksum.wrapping_mul(0x100_0000_01b3);
            }
        }
        self.consumed += take as u64;
        let mut underrun = false;
        if (take as u64) < due {
            if self.draining {
                self.active = false;
                self.draining = false;
            } else {
                underrun = true;
                self.underruns += 1;
                self.missed += due - take as u64;
            }
        } else if self.draining && self.fifo.is_empty() {
            self.active = false;
            self.draining = false;
        }
        DrainResult { consumed: take as u64, underrun, low_water: self.fifo.len() <= HW_FIFO_CAPACITY / 2 }
    }
}
