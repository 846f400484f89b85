//! Tasks, per-core weighted round-robin runqueues, sleep/wakeup channels and
//! reference-counted interrupt masking.
//!
//! Each core owns a runqueue. New tasks are placed on the least-loaded core
//! (lowest id on ties) and stay there: a woken task always returns to its
//! home core. A task's priority is the number of consecutive quanta it runs
//! before rotating to the runqueue tail.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

pub type Tid = u32;

pub const MAX_TASKS: usize = 256;
/// One scheduler quantum in ticks (1 ms).
pub const QUANTUM_TICKS: u64 = 1_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedError {
    #[error("task table full ({MAX_TASKS} tasks)")]
    ResourceExhausted,
    #[error("pop_off at interrupt depth 0")]
    UnderflowPanic,
    #[error("no such task {0}")]
    NoSuchTask(Tid),
    #[error("priority must be at least 1")]
    BadPriority,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskState {
    Embryo,
    Runnable,
    Running,
    Sleeping,
    Blocked,
    Zombie,
}

impl TaskState {
    pub fn name(self) -> &'static str {
        match self {
            TaskState::Embryo => "EMBRYO",
            TaskState::Runnable => "RUNNABLE",
            TaskState::Running => "RUNNING",
            TaskState::Sleeping => "SLEEPING",
            TaskState::Blocked => "BLOCKED",
            TaskState::Zombie => "ZOMBIE",
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    KernelThread,
    User,
}

/// Last faulting address and how many consecutive faults hit it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FaultRecord {
    pub last_va: Option<u64>,
    pub count: u32,
}

#[derive(Clone, Debug)]
pub struct Task {
    pub tid: Tid,
    pub parent: Tid,
    pub name: String,
    pub state: TaskState,
    pub kind: TaskKind,
    pub priority: u32,
    pub home_core: usize,
    pub exit_code: i32,
    pub fault: FaultRecord,
    pub wchan: Option<u64>,
    pub killed: bool,
    pub exit_tick: u64,
}

#[derive(Clone, Debug)]
pub struct Core {
    pub id: usize,
    pub runqueue: VecDeque<Tid>,
    pub current: Option<Tid>,
    pub irq_depth: u32,
    pub quanta_left: u32,
}

impl Core {
    fn load(&self) -> usize {
        self.runqueue.len() + usize::from(self.current.is_some())
    }
}

/// A context switch performed on `core`: `from` was descheduled (if any),
/// `to` now runs (or the core went idle).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Switch {
    pub core: usize,
    pub from: Option<Tid>,
    pub to: Option<Tid>,
}

/// Simulated spinlock. Recursive acquisition by the same holder is a bug
/// and panics, as the kernel's assert would.
#[derive(Clone, Debug, Default)]
pub struct SpinLock {
    name: &'static str,
    holder: Option<Tid>,
}

impl SpinLock {
    pub const fn new(name: &'static str) -> Self {
        Self { name, holder: None }
    }

    pub fn holder(&self) -> Option<Tid> {
        self.holder
    }

    pub fn try_acquire(&mut self, who: Tid) -> bool {
        match self.holder {
            Some(h) if h == who => panic!("spinlock {}: recursive acquire by {who}", self.name),
            Some(_) => false,
            None => {
                self.holder = Some(who);
                true
            }
        }
    }

    pub fn release(&mut self, who: Tid) {
        assert_eq!(self.holder, Some(who), "spinlock {}: release by non-holder", self.name);
        self.holder = None;
    }
}

#[derive(Clone, Debug)]
pub struct Scheduler {
    tasks: BTreeMap<Tid, Task>,
    cores: Vec<Core>,
    channels: BTreeMap<u64, Vec<Tid>>,
    next_tid: Tid,
}

impl Scheduler {
    pub fn new(ncores: usize) -> Self {
        assert!(ncores >= 1);
        let cores = (0..ncores)
            .map(|id| Core { id, runqueue: VecDeque::new(), current: None, irq_depth: 0, quanta_left: 0 })
            .collect();
        Self { tasks: BTreeMap::new(), cores, channels: BTreeMap::new(), next_tid: 1 }
    }

    pub fn ncores(&self) -> usize {
        self.cores.len()
    }

    pub fn core(&self, c: usize) -> &Core {
        &self.cores[c]
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn task(&self, tid: Tid) -> Option<&Task> {
        self.tasks.get(&tid)
    }

    pub fn task_mut(&mut self, tid: Tid) -> Option<&mut Task> {
        self.tasks.get_mut(&tid)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn live_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn current(&self, core: usize) -> Option<Tid> {
        self.cores[core].current
    }

    pub fn has_work(&self, core: usize) -> bool {
        self.cores[core].current.is_some() || !self.cores[core].runqueue.is_empty()
    }

    fn least_loaded(&self) -> usize {
        self.cores.iter().min_by_key(|c| (c.load(), c.id)).map(|c| c.id).unwrap_or(0)
    }

    /// Creates a task in EMBRYO state without queueing it anywhere.
    pub fn alloc_task(&mut self, kind: TaskKind, name: &str, priority: u32, parent: Tid) -> Result<Tid, SchedError> {
        if priority == 0 {
            return Err(SchedError::BadPriority);
        }
        if self.tasks.len() >= MAX_TASKS {
            return Err(SchedError::ResourceExhausted);
        }
        let tid = self.next_tid;
        self.next_tid += 1;
        let home_core = self.least_loaded();
        self.tasks.insert(
            tid,
            Task {
                tid,
                parent,
                name: name.to_string(),
                state: TaskState::Embryo,
                kind,
                priority,
                home_core,
                exit_code: 0,
                fault: FaultRecord::default(),
                wchan: None,
                killed: false,
                exit_tick: 0,
            },
        );
        Ok(tid)
    }

    /// EMBRYO -> RUNNABLE, appended to the home core's runqueue.
    pub fn activate(&mut self, tid: Tid) -> Result<(), SchedError> {
        let task = self.tasks.get_mut(&tid).ok_or(SchedError::NoSuchTask(tid))?;
        debug_assert_eq!(task.state, TaskState::Embryo);
        task.state = TaskState::Runnable;
        let home = task.home_core;
        self.cores[home].runqueue.push_back(tid);
        Ok(())
    }

    pub fn create_task(&mut self, kind: TaskKind, name: &str, priority: u32, parent: Tid) -> Result<Tid, SchedError> {
        let tid = self.alloc_task(kind, name, priority, parent)?;
        self.activate(tid)?;
        Ok(tid)
    }

    /// Picks the runqueue head if the core is idle.
    pub fn dispatch(&mut self, core: usize) -> Option<Switch> {
        if self.cores[core].current.is_some() {
            return None;
        }
        let next = self.cores[core].runqueue.pop_front()?;
        let prio = {
            let t = self.tasks.get_mut(&next).expect("queued task exists");
            t.state = TaskState::Running;
            t.priority
        };
        let c = &mut self.cores[core];
        c.current = Some(next);
        c.quanta_left = prio;
        Some(Switch { core, from: None, to: Some(next) })
    }

    /// Quantum accounting on a TIMER(core) interrupt.
    pub fn timer_tick(&mut self, core: usize) -> Option<Switch> {
        let cur = self.cores[core].current?;
        let c = &mut self.cores[core];
        c.quanta_left = c.quanta_left.saturating_sub(1);
        if c.quanta_left > 0 {
            return None;
        }
        if c.runqueue.is_empty() {
            c.quanta_left = self.tasks[&cur].priority;
            return None;
        }
        self.preempt(core)
    }

    /// Moves the running task to the runqueue tail and dispatches the head.
    pub fn preempt(&mut self, core: usize) -> Option<Switch> {
        let cur = self.cores[core].current.take()?;
        if let Some(t) = self.tasks.get_mut(&cur) {
            t.state = TaskState::Runnable;
        }
        self.cores[core].runqueue.push_back(cur);
        let next = self.dispatch(core).and_then(|s| s.to);
        Some(Switch { core, from: Some(cur), to: next })
    }

    /// Parks the running task of `core` on channel `chan`.
    pub fn block_current(&mut self, core: usize, chan: u64, state: TaskState) -> Option<Tid> {
        debug_assert!(matches!(state, TaskState::Sleeping | TaskState::Blocked));
        let cur = self.cores[core].current.take()?;
        let t = self.tasks.get_mut(&cur).expect("running task exists");
        t.state = state;
        t.wchan = Some(chan);
        self.channels.entry(chan).or_default().push(cur);
        Some(cur)
    }

    /// Releases `guard` and parks the caller on `chan` in one step.
    pub fn sleep_on(&mut self, core: usize, chan: u64, guard: &mut SpinLock) -> Option<Tid> {
        let cur = self.cores[core].current?;
        guard.release(cur);
        self.block_current(core, chan, TaskState::Sleeping)
    }

    /// Wakes every waiter on `chan`; returns them in wait order.
    pub fn wakeup(&mut self, chan: u64) -> Vec<Tid> {
        let waiters = self.channels.remove(&chan).unwrap_or_default();
        for &tid in &waiters {
            self.make_runnable(tid);
        }
        waiters
    }

    pub fn waiters(&self, chan: u64) -> &[Tid] {
        self.channels.get(&chan).map(Vec::as_slice).unwrap_or(&[])
    }

    /// SLEEPING/BLOCKED -> RUNNABLE on the home core. No-op otherwise.
    pub fn make_runnable(&mut self, tid: Tid) -> bool {
        let Some(t) = self.tasks.get_mut(&tid) else { return false };
        if !matches!(t.state, TaskState::Sleeping | TaskState::Blocked) {
            return false;
        }
        if let Some(ch) = t.wchan.take() {
            if let Some(w) = self.channels.get_mut(&ch) {
                w.retain(|&x| x != tid);
                if w.is_empty() {
                    self.channels.remove(&ch);
                }
            }
        }
        t.state = TaskState::Runnable;
        let home = t.home_core;
        self.cores[home].runqueue.push_back(tid);
        true
    }

    /// Marks `tid` ZOMBIE, removing it from any core or channel.
    pub fn make_zombie(&mut self, tid: Tid, code: i32, tick: u64) {
        for c in &mut self.cores {
            if c.current == Some(tid) {
                c.current = None;
            }
            c.runqueue.retain(|&x| x != tid);
        }
        if let Some(t) = self.tasks.get_mut(&tid) {
            if let Some(ch) = t.wchan.take() {
                if let Some(w) = self.channels.get_mut(&ch) {
                    w.retain(|&x| x != tid);
                    if w.is_empty() {
                        self.channels.remove(&ch);
                    }
                }
            }
            t.state = TaskState::Zombie;
            t.exit_code = code;
            t.exit_tick = tick;
        }
    }

    /// Frees a zombie's slot.
    pub fn reap(&mut self, tid: Tid) -> Option<Task> {
        match self.tasks.get(&tid) {
            Some(t) if t.state == TaskState::Zombie => self.tasks.remove(&tid),
            _ => None,
        }
    }

    pub fn children(&self, parent: Tid) -> impl Iterator<Item = &Task> {
        self.tasks.values().filter(move |t| t.parent == parent)
    }

    pub fn push_off(&mut self, core: usize) -> u32 {
        self.cores[core].irq_depth += 1;
        self.cores[core].irq_depth
    }

    pub fn pop_off(&mut self, core: usize) -> Result<u32, SchedError> {
        let c = &mut self.cores[core];
        if c.irq_depth == 0 {
            return Err(SchedError::UnderflowPanic);
        }
        c.irq_depth -= 1;
        Ok(c.irq_depth)
    }

    pub fn irqs_masked(&self, core: usize) -> bool {
        self.cores[core].irq_depth > 0
    }

    /// Structural invariants; used by tests after every step.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut seen = std::collections::BTreeSet::new();
        let mut running = 0;
        for c in &self.cores {
            if let Some(cur) = c.current {
                running += 1;
                if self.tasks.get(&cur).map(|t| t.state) != Some(TaskState::Running) {
                    return Err(format!("core {} current {cur} not RUNNING", c.id));
                }
                if !seen.insert(cur) {
                    return Err(format!("task {cur} current on two cores"));
                }
            }
            for &t in &c.runqueue {
                if !seen.insert(t) {
                    return Err(format!("task {t} queued twice"));
                }
                if self.tasks.get(&t).map(|t| t.state) != Some(TaskState::Runnable) {
                    return Err(format!("queued task {t} not RUNNABLE"));
                }
            }
        }
        if running > self.cores.len() {
            return Err("more RUNNING tasks than cores".into());
        }
        for (ch, ws) in &self.channels {
            for w in ws {
                match self.tasks.get(w) {
                    Some(t) if matches!(t.state, TaskState::Sleeping | TaskState::Blocked) && t.wchan == Some(*ch) => {}
                    _ => return Err(format!("waiter {w} on channel {ch:#x} not parked")),
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched_with(n: usize, prios: &[u32]) -> (Scheduler, Vec<Tid>) {
        let mut s = Scheduler::new(n);
        let tids = prios.iter().map(|&p| s.create_task(TaskKind::User, "t", p, 0).unwrap()).collect();
        (s, tids)
    }

    /// Runs `quanta` timer ticks on core 0 and records who held each quantum.
    fn run_quanta(s: &mut Scheduler, quanta: usize) -> Vec<Tid> {
        s.dispatch(0);
        let mut out = Vec::new();
        for _ in 0..quanta {
            out.push(s.current(0).unwrap());
            s.timer_tick(0);
            s.check_invariants().unwrap();
        }
        out
    }

    #[test]
    fn first_task_is_tid1_on_core0() {
        let (s, tids) = sched_with(4, &[1]);
        assert_eq!(tids, vec![1]);
        assert_eq!(s.task(1).unwrap().home_core, 0);
    }

    #[test]
    fn one_task_per_idle_core() {
        let (s, tids) = sched_with(4, &[1, 1, 1, 1]);
        let homes: Vec<_> = tids.iter().map(|t| s.task(*t).unwrap().home_core).collect();
        assert_eq!(homes, vec![0, 1, 2, 3]);
    }

    #[test]
    fn capacity_is_256() {
        let mut s = Scheduler::new(1);
        for _ in 0..MAX_TASKS {
            s.create_task(TaskKind::User, "t", 1, 0).unwrap();
        }
        assert_eq!(s.create_task(TaskKind::User, "t", 1, 0), Err(SchedError::ResourceExhausted));
    }

    #[test]
    fn plain_round_robin() {
        let (mut s, t) = sched_with(1, &[1, 1, 1]);
        assert_eq!(run_quanta(&mut s, 6), vec![t[0], t[1], t[2], t[0], t[1], t[2]]);
    }

    #[test]
    fn weighted_round_robin() {
        let (mut s, t) = sched_with(1, &[2, 1]);
        assert_eq!(run_quanta(&mut s, 6), vec![t[0], t[0], t[1], t[0], t[0], t[1]]);
    }

    #[test]
    fn sleep_wakeup_once() {
        let (mut s, t) = sched_with(1, &[1]);
        s.dispatch(0);
        let mut lock = SpinLock::new("l");
        assert!(lock.try_acquire(t[0]));
        s.sleep_on(0, 42, &mut lock);
        assert_eq!(lock.holder(), None);
        assert_eq!(s.task(t[0]).unwrap().state, TaskState::Sleeping);
        assert_eq!(s.wakeup(42), vec![t[0]]);
        assert_eq!(s.task(t[0]).unwrap().state, TaskState::Runnable);
        assert!(s.wakeup(42).is_empty());
        assert_eq!(s.core(0).runqueue.iter().filter(|&&x| x == t[0]).count(), 1);
    }

    #[test]
    fn wakeup_is_broadcast() {
        let (mut s, t) = sched_with(1, &[1, 1]);
        s.dispatch(0);
        s.block_current(0, 7, TaskState::Sleeping);
        s.dispatch(0);
        s.block_current(0, 7, TaskState::Sleeping);
        assert_eq!(s.wakeup(7), vec![t[0], t[1]]);
        assert!(t.iter().all(|x| s.task(*x).unwrap().state == TaskState::Runnable));
        s.check_invariants().unwrap();
    }

    #[test]
    fn irq_depth() {
        let mut s = Scheduler::new(1);
        s.push_off(0);
        s.push_off(0);
        assert_eq!(s.pop_off(0), Ok(1));
        assert!(s.irqs_masked(0));
        assert_eq!(s.pop_off(0), Ok(0));
        assert!(!s.irqs_masked(0));
        assert_eq!(s.pop_off(0), Err(SchedError::UnderflowPanic));
    }

    #[test]
    #[should_panic(expected = "recursive acquire")]
    fn recursive_spinlock_asserts() {
        let mut l = SpinLock::new("x");
        l.try_acquire(1);
        l.try_acquire(1);
    }

    #[test]
    fn zombie_and_reap() {
        let (mut s, t) = sched_with(1, &[1, 1]);
        s.dispatch(0);
        s.make_zombie(t[0], 7, 10);
        assert_eq!(s.current(0), None);
        assert_eq!(s.reap(t[0]).unwrap().exit_code, 7);
        assert!(s.reap(t[1]).is_none());
        let t3 = s.create_task(TaskKind::User, "x", 1, 0).unwrap();
        assert!(t3 > t[1], "tids never recycle");
    }

    proptest::proptest! {
        #[test]
        fn fairness_is_exact(prios in proptest::collection::vec(1u32..5, 1..6), windows in 1usize..4) {
            let mut s = Scheduler::new(1);
            let tids: Vec<Tid> = prios.iter().map(|&p| s.create_task(TaskKind::User, "t", p, 0).unwrap()).collect();
            let sum: u32 = prios.iter().sum();
            let got = run_quanta(&mut s, windows * sum as usize);
            for (tid, p) in tids.iter().zip(&prios) {
                let n = got.iter().filter(|&&x| x == *tid).count();
                proptest::prop_assert_eq!(n, windows * *p as usize);
            }
        }

        /// Waker and sleeper interleave arbitrarily; the condition is always
        /// checked and the sleep entered under the same lock, so the sleeper
        /// never stays parked once the flag is set.
        #[test]
        fn no_lost_wakeups(order in proptest::collection::vec(proptest::prelude::any::<bool>(), 1..30)) {
            let mut s = Scheduler::new(1);
            let sleeper = s.create_task(TaskKind::User, "s", 1, 0).unwrap();
            let waker = s.create_task(TaskKind::User, "w", 1, 0).unwrap();
            let mut lock = SpinLock::new("cond");
            let mut flag = false;
            let mut sleeper_done = false;
            let mut waker_done = false;
            for pick_waker in order.into_iter().chain(std::iter::repeat_n(true, 4)).chain(std::iter::repeat_n(false, 4)) {
                let who = if pick_waker { waker } else { sleeper };
                if !matches!(s.task(who).unwrap().state, TaskState::Runnable | TaskState::Running) {
                    continue;
                }
                while s.current(0) != Some(who) {
                    if s.current(0).is_some() {
                        s.preempt(0);
                    } else {
                        s.dispatch(0);
                    }
                }
                if who == waker && !waker_done {
                    if lock.try_acquire(waker) {
                        flag = true;
                        s.wakeup(1);
                        lock.release(waker);
                        waker_done = true;
                    }
                } else if who == sleeper && !sleeper_done && lock.try_acquire(sleeper) {
                    if flag {
                        lock.release(sleeper);
                        sleeper_done = true;
                    } else {
                        s.sleep_on(0, 1, &mut lock);
                    }
                }
                s.check_invariants().unwrap();
            }
            proptest::prop_assert!(waker_done);
            proptest::prop_assert!(sleeper_done);
        }
    }
}
