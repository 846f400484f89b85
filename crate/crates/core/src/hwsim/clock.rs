//! Global simulated clock with a set of one-shot virtual timers.
//!
//! One tick is one simulated microsecond. Timers are keyed by an opaque
//! [`TimerId`]; expiry order is `(deadline, id)`, so two timers that fire on
//! the same tick are always reported in ascending id order.

use std::collections::{BTreeMap, BTreeSet};

pub type Tick = u64;

pub const TICKS_PER_MS: Tick = 1_000;
pub const TICKS_PER_SEC: Tick = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimerId(pub u64);

#[derive(Debug, Default, Clone)]
pub struct SimClock {
    now: Tick,
    pending: BTreeSet<(Tick, TimerId)>,
    armed: BTreeMap<TimerId, Tick>,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Tick {
        self.now
    }

    /// Arms (or re-arms) `id`. Deadlines in the past are clamped to `now`.
    pub fn arm(&mut self, id: TimerId, deadline: Tick) {
        self.cancel(id);
        let deadline = deadline.max(self.now);
        self.pending.insert((deadline, id));
        self.armed.insert(id, deadline);
    }

    pub fn cancel(&mut self, id: TimerId) -> bool {
        match self.armed.remove(&id) {
            Some(deadline) => {
                self.pending.remove(&(deadline, id));
                true
            }
            None => false,
        }
    }

    pub fn deadline(&self, id: TimerId) -> Option<Tick> {
        self.armed.get(&id).copied()
    }

    pub fn next_deadline(&self) -> Option<Tick> {
        self.pending.iter().next().map(|&(t, _)| t)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Advances by `dt` ticks and returns the expired timers in firing order.
    pub fn advance(&mut self, dt: Tick) -> Vec<(Tick, TimerId)> {
        let target = self.now.saturating_add(dt);
        self.advance_to(target)
    }

    /// Moves the clock to `target` (never backwards) and pops every timer
    /// whose deadline is `<= target`.
    pub fn advance_to(&mut self, target: Tick) -> Vec<(Tick, TimerId)> {
        let target = target.max(self.now);
        let mut fired = Vec::new();
        while let Some(&(deadline, id)) = self.pending.iter().next() {
            if deadline > target {
                break;
            }
            self.pending.remove(&(deadline, id));
            self.armed.remove(&id);
            fired.push((deadline, id));
        }
        self.now = target;
        fired
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_deadline_fires() {
        let mut c = SimClock::new();
        c.arm(TimerId(0), 100);
        assert!(c.advance(99).is_empty());
        assert_eq!(c.advance(1), vec![(100, TimerId(0))]);
        assert_eq!(c.now(), 100);
    }

    #[test]
    fn nothing_pending() {
        let mut c = SimClock::new();
        assert!(c.advance(50).is_empty());
        assert_eq!(c.now(), 50);
    }

    #[test]
    fn tie_break_by_id() {
        let mut c = SimClock::new();
        c.arm(TimerId(2), 10);
        c.arm(TimerId(1), 10);
        let ids: Vec<_> = c.advance(10).into_iter().map(|(_, id)| id.0).collect();
        assert_eq!(ids, vec![1, 2]);
    }

    #[test]
    fn rearm_replaces_and_past_deadline_clamps() {
        let mut c = SimClock::new();
        c.advance(500);
        c.arm(TimerId(7), 10);
        assert_eq!(c.deadline(TimerId(7)), Some(500));
        c.arm(TimerId(7), 900);
        assert_eq!(c.pending_len(), 1);
        assert!(c.cancel(TimerId(7)));
        assert!(c.next_deadline().is_none());
    }

    proptest::proptest! {
        #[test]
        fn monotone_and_nothing_overdue(steps in proptest::collection::vec((0u64..2000, 0u64..50), 1..60)) {
            let mut c = SimClock::new();
            let mut last = 0;
            for (i, (dt, off)) in steps.into_iter().enumerate() {
                c.arm(TimerId(i as u64 % 7), c.now() + off);
                c.advance(dt);
                proptest::prop_assert!(c.now() >= last);
                last = c.now();
                if let Some(d) = c.next_deadline() {
                    proptest::prop_assert!(d > c.now());
                }
            }
        }
    }
}
