//! Kernel threads: the p2 donut renderers and the window manager.

use crate::hwsim::{FbHw, KeyEvent, Tick};
use crate::sched::Tid;
use crate::trace::TraceKind;
use crate::userland::donut::{self, tile_origin, TILE};
use crate::wm::{Routed, COMPOSITE_PERIOD};

use super::{chan, Kernel, FRAME_COST, FRAME_PERIOD};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KNext {
    Continue,
    Sleep(Tick),
    Block(u64),
    Exit(i32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KStep {
    pub cost: Tick,
    pub next: KNext,
}

/// A thread that runs kernel code. `step` must be short and atomic.
pub trait KThread {
    fn name(&self) -> &str;
    fn step(&mut self, k: &mut Kernel, core: usize, tid: Tid) -> KStep;
}

pub(crate) fn blit_tile(fb: &mut FbHw, id: u32, px: &[u8]) {
    let (x0, y0) = tile_origin(id);
    let stride = fb.width() as usize * 4;
    for row in 0..TILE {
        let off = (y0 + row) * stride + x0 * 4;
        let _ = fb.write_shadow(off, &px[row * TILE * 4..(row + 1) * TILE * 4]);
    }
}

pub struct DonutThread {
    id: u32,
    name: String,
    iter: u64,
}

impl DonutThread {
    pub fn new(id: u32, prio: u32) -> Self {
        Self { id, name: format!("kdonut{id}.{prio}"), iter: 0 }
    }
}

impl KThread for DonutThread {
    fn name(&self) -> &str {
        &self.name
    }

    fn step(&mut self, k: &mut Kernel, _core: usize, _tid: Tid) -> KStep {
        let px = donut::render(self.iter + self.id as u64 * 7);
        blit_tile(&mut k.machine.fb, self.id, &px);
        k.machine.fb.flush();
        self.iter += 1;
        k.frames += 1;
        KStep { cost: FRAME_COST, next: KNext::Sleep(FRAME_PERIOD) }
    }
}

/// Routes queued input to surfaces, then composites damage every 16 ms.
pub struct WmThread;

pub const WM_BASE_COST: Tick = 50;

impl KThread for WmThread {
    fn name(&self) -> &str {
        "wm"
    }

    fn step(&mut self, k: &mut Kernel, core: usize, _tid: Tid) -> KStep {
        let input: Vec<KeyEvent> = k.wm_input.drain(..).collect();
        let console = k.console.surface();
        let mut touched = Vec::new();
        let mut to_console = Vec::new();
        if let Some(wm) = k.wm.as_mut() {
            for ev in input {
                if let Routed::Delivered(sid) = wm.dispatch_input(ev) {
                    if Some(sid) == console {
                        let s = wm.surface_mut(sid).expect("console surface");
                        while let Ok(b) = s.events.read(8) {
                            to_console.extend(KeyEvent::from_bytes(&b));
                        }
                    } else if !touched.contains(&sid) {
                        touched.push(sid);
                    }
                }
            }
        }
        for ev in to_console {
            k.console_key(ev);
        }
        for sid in touched {
            k.wake(chan::make(chan::EVENT1, sid as u64));
        }
        let mut cost = WM_BASE_COST;
        let Some(wm) = k.wm.as_mut() else {
            return KStep { cost, next: KNext::Exit(0) };
        };
        if wm.has_damage() {
            let st = wm.composite(k.machine.fb.shadow_mut());
            k.machine.fb.flush();
            cost += st.pixels / 16;
            k.emit(core, TraceKind::WmComposite, [st.rects, st.pixels]);
        }
        KStep { cost, next: KNext::Sleep(COMPOSITE_PERIOD) }
    }
}

impl Kernel {
    /// Feeds a key to the console line discipline and echoes it.
    pub(crate) fn console_key(&mut self, ev: KeyEvent) {
        let echo = self.console.ld.key(&ev);
        if !echo.is_empty() {
            self.console.write(&echo, &mut self.machine.fb, self.wm.as_mut());
        }
        if self.console.ld.has_line() {
            self.wake(chan::make(chan::CONSOLE, 0));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiles_do_not_overlap_console() {
        let (x0, y0) = tile_origin(0);
        let (x1, _) = tile_origin(1);
        assert!(y0 >= 320 && y0 + TILE <= 480);
        assert!(x1 >= x0 + TILE);
        assert_eq!(FRAME_PERIOD, 33 * crate::hwsim::TICKS_PER_MS);
    }
}
