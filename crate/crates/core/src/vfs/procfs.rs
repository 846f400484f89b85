//! Read-only kernel status files.
//!
//! `cpuinfo` reports per-core utilization over the last 100 ms as
//! `core<i> util <percent>` lines; `meminfo` is `pages free <n> total <m>`.

use std::collections::BTreeMap;

use crate::hwsim::{Tick, TICKS_PER_MS};

pub const UTIL_WINDOW_MS: u64 = 100;

pub const FILES: &[&str] = &["cpuinfo", "meminfo", "audio"];

/// Busy time per core in 1 ms buckets.
#[derive(Clone, Debug)]
pub struct CpuAccounting {
    buckets: Vec<BTreeMap<u64, Tick>>,
}

impl CpuAccounting {
    pub fn new(ncores: usize) -> Self {
        Self { buckets: vec![BTreeMap::new(); ncores] }
    }

    pub fn ncores(&self) -> usize {
        self.buckets.len()
    }

    /// Records `[start, start+ticks)` as busy on `core`.
    pub fn charge(&mut self, core: usize, start: Tick, ticks: Tick) {
        let b = &mut self.buckets[core];
        let mut t = start;
        let end = start + ticks;
        while t < end {
            let ms = t / TICKS_PER_MS;
            let bucket_end = (ms + 1) * TICKS_PER_MS;
            let part = end.min(bucket_end) - t;
            *b.entry(ms).or_insert(0) += part;
            t += part;
        }
        let keep_from = (end / TICKS_PER_MS).saturating_sub(4 * UTIL_WINDOW_MS);
        while let Some((&first, _)) = b.first_key_value() {
            if first >= keep_from {
                break;
            }
            b.pop_first();
        }
    }

    /// Percent busy over the last complete 100 ms before `now`.
    pub fn utilization(&self, core: usize, now: Tick) -> u32 {
        let hi = now / TICKS_PER_MS;
        let lo = hi.saturating_sub(UTIL_WINDOW_MS);
        let span = (hi - lo) * TICKS_PER_MS;
        if span == 0 {
            return 0;
        }
        let busy: Tick = self.buckets[core].range(lo..hi).map(|(_, &t)| t).sum();
        ((busy.min(span) * 100) / span) as u32
    }
}

pub fn cpuinfo(acct: &CpuAccounting, now: Tick) -> String {
    (0..acct.ncores()).map(|c| format!("core{c} util {}\n", acct.utilization(c, now))).collect()
}

pub fn meminfo(free: u32, total: u32) -> String {
    format!("pages free {free} total {total}\n")
}

pub fn audio(consumed: u64, underruns: u64, buffered: usize) -> String {
    format!("audio consumed {consumed} underruns {underruns} buffered {buffered}\n")
}

/// Parses `cpuinfo` text back into per-core percentages.
pub fn parse_cpuinfo(text: &str) -> Vec<u32> {
    text.lines().filter_map(|l| l.split_whitespace().nth(2)?.parse().ok()).collect()
}

/// Parses `meminfo` text into (free, total).
pub fn parse_meminfo(text: &str) -> Option<(u32, u32)> {
    let w: Vec<&str> = text.split_whitespace().collect();
    match w.as_slice() {
        ["pages", "free", f, "total", t] => Some((f.parse().ok()?, t.parse().ok()?)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idle_is_zero_and_busy_is_hundred() {
        let mut a = CpuAccounting::new(2);
        a.charge(0, 0, 200_000);
        assert_eq!(a.utilization(0, 200_000), 100);
        assert_eq!(a.utilization(1, 200_000), 0);
        assert_eq!(parse_cpuinfo(&cpuinfo(&a, 200_000)), vec![100, 0]);
    }

    #[test]
    fn charge_splits_across_buckets() {
        let mut a = CpuAccounting::new(1);
        a.charge(0, 900, 300);
        assert_eq!(a.buckets[0][&0], 100);
        assert_eq!(a.buckets[0][&1], 200);
    }

    #[test]
    fn half_busy() {
        let mut a = CpuAccounting::new(1);
        for ms in 0..100 {
            a.charge(0, ms * 1000, 500);
        }
        assert_eq!(a.utilization(0, 100_000), 50);
    }

    #[test]
    fn meminfo_format() {
        assert_eq!(meminfo(3, 9), "pages free 3 total 9\n");
        assert_eq!(parse_meminfo("pages free 3 total 9\n"), Some((3, 9)));
    }
}
