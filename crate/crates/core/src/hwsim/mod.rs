//! Deterministic simulated hardware.
//!
//! [`Machine`] owns the global clock, the interrupt controller and every
//! device model. It never runs guest code; the kernel event loop asks it for
//! the next event time and advances it there, collecting the raised IRQs in
//! `(tick, line id, timer id)` order.

pub mod audio;
pub mod block;
pub mod clock;
pub mod fb;
pub mod irq;
pub mod kbd;

use std::collections::BTreeMap;

use thiserror::Error;

pub use audio::{AudioHw, DrainResult};
pub use block::{BlockDev, BlockOp, BlockStats, CostModel, SECTOR_SIZE};
pub use clock::{SimClock, Tick, TimerId, TICKS_PER_MS, TICKS_PER_SEC};
pub use fb::{FbHw, Geometry};
pub use irq::{Irq, IrqController, IrqLine};
pub use kbd::{KeyAction, KeyEvent, KeyboardHw, Mods};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HwError {
    #[error("block range out of bounds: lba {lba} count {count} (device has {size} sectors)")]
    OutOfRange { lba: u64, count: u64, size: u64 },
    #[error("transfer length {0} is not a whole number of sectors")]
    BadLength(usize),
    #[error("keyboard queue full")]
    QueueFull,
    #[error("framebuffer access out of range: off {off} len {len}")]
    FbRange { off: usize, len: usize },
    #[error("io error: {0}")]
    Io(String),
}

pub const AUDIO_DRAIN_PERIOD: Tick = 1_000;

pub const DEFAULT_FB_WIDTH: u32 = 640;
pub const DEFAULT_FB_HEIGHT: u32 = 480;

#[derive(Debug, Clone)]
pub struct Machine {
    clock: SimClock,
    irq: IrqController,
    timer_core: BTreeMap<TimerId, usize>,
    pub fb: FbHw,
    pub kbd: KeyboardHw,
    pub audio: AudioHw,
    audio_next: Option<Tick>,
    kbd_raise: bool,
}

impl Machine {
    pub fn new(ncores: usize) -> Self {
        Self {
            clock: SimClock::new(),
            irq: IrqController::new(ncores),
            timer_core: BTreeMap::new(),
            fb: FbHw::new(DEFAULT_FB_WIDTH, DEFAULT_FB_HEIGHT),
            kbd: KeyboardHw::default(),
            audio: AudioHw::default(),
            audio_next: None,
            kbd_raise: false,
        }
    }

    pub fn ncores(&self) -> usize {
        self.irq.ncores()
    }

    pub fn now(&self) -> Tick {
        self.clock.now()
    }

    pub fn irq_controller(&mut self) -> &mut IrqController {
        &mut self.irq
    }

    /// Arms a virtual timer that raises `TIMER(core)` at `deadline`.
    pub fn arm_timer(&mut self, id: TimerId, deadline: Tick, core: usize) {
        self.clock.arm(id, deadline);
        self.timer_core.insert(id, core);
    }

    pub fn cancel_timer(&mut self, id: TimerId) -> bool {
        self.timer_core.remove(&id);
        self.clock.cancel(id)
    }

    pub fn timer_deadline(&self, id: TimerId) -> Option<Tick> {
        self.clock.deadline(id)
    }

    pub fn inject_key(&mut self, scancode: u16, action: KeyAction, mods: Mods) -> Result<(), HwError> {
        let ev = KeyEvent { scancode, action, mods, tick: self.clock.now() };
        self.kbd.inject(ev)?;
        self.kbd_raise = true;
        Ok(())
    }

    pub fn take_key_events(&mut self) -> Vec<KeyEvent> {
        self.kbd.drain()
    }

    /// Hands samples to the audio FIFO, starting the drain schedule if idle.
    pub fn audio_push(&mut self, samples: &[i16], now: Tick) -> usize {
        let was_active = self.audio.is_active();
        let n = self.audio.push(now, samples);
        if !was_active && self.audio.is_active() {
            self.audio_next = Some(now + AUDIO_DRAIN_PERIOD);
        }
        n
    }

    /// Time of the next hardware event, if any.
    pub fn next_event(&self) -> Option<Tick> {
        let kbd = self.kbd_raise.then_some(self.clock.now());
        [self.clock.next_deadline(), self.audio_next, kbd].into_iter().flatten().min()
    }

    /// Raises the panic-button FIQ on the next core in rotation.
    pub fn raise_fiq(&mut self) -> Irq {
        let core = self.irq.route(IrqLine::FiqPanic);
        Irq { line: IrqLine::FiqPanic, target_core: core, tick: self.clock.now(), timer: None }
    }

    /// Advances by `dt` ticks, stepping through every internal event point.
    pub fn advance(&mut self, dt: Tick) -> Vec<Irq> {
        let target = self.clock.now().saturating_add(dt);
        let mut out = Vec::new();
        loop {
            let next = self.next_event().filter(|&t| t <= target).unwrap_or(target);
            out.extend(self.advance_to(next));
            if next >= target && self.next_event().is_none_or(|t| t > target) {
                break;
            }
        }
        out
    }

    /// Moves the clock to `t` and raises everything due at or before it.
    pub fn advance_to(&mut self, t: Tick) -> Vec<Irq> {
        let start = self.clock.now();
        let mut out = Vec::new();
        if self.kbd_raise {
            self.kbd_raise = false;
            let core = self.irq.route(IrqLine::Keyboard);
            out.push(Irq { line: IrqLine::Keyboard, target_core: core, tick: start, timer: None });
        }
        for (deadline, id) in self.clock.advance_to(t) {
            let core = self.timer_core.remove(&id).unwrap_or(0);
            out.push(Irq { line: IrqLine::Timer(core), target_core: core, tick: deadline, timer: Some(id) });
        }
        while let Some(at) = self.audio_next.filter(|&at| at <= t) {
            let r = self.audio.drain_to(at);
            self.audio_next = self.audio.is_active().then_some(at + AUDIO_DRAIN_PERIOD);
            if r.low_water && (r.consumed > 0 || r.underrun) {
                let core = self.irq.route(IrqLine::AudioDma);
                out.push(Irq { line: IrqLine::AudioDma, target_core: core, tick: at, timer: None });
            }
        }
        out.sort_by_key(|i| i.sort_key());
        out
    }
}
