//! Window manager state: surfaces, z-order, focus, hotkeys and the
//! dirty-region compositor.
//!
//! Damage is the union of each surface's dirty rectangles (in screen
//! coordinates) and the regions exposed by create, destroy, move and raise.
//! Every damaged rectangle is recomputed from scratch: background first,
//! then each surface back to front. The kernel's WM thread calls
//! [`Wm::composite`] once per period and flushes the framebuffer when
//! anything changed.

use std::collections::BTreeMap;

use crate::devio::{EventQueue, SURFACE_ALPHA, SURFACE_FLOAT};
use crate::hwsim::kbd::scancode;
use crate::hwsim::{KeyAction, KeyEvent, Mods, Tick};
use crate::vfs::FsError;

pub const COMPOSITE_PERIOD: Tick = 16_000;
pub const MOVE_STEP: i32 = 10;
pub const BACKGROUND: [u8; 4] = [0x30, 0x30, 0x30, 0xFF];

pub type SurfaceId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl Rect {
    pub fn new(x: i32, y: i32, w: i32, h: i32) -> Rect {
        Rect { x, y, w: w.max(0), h: h.max(0) }
    }

    pub fn is_empty(&self) -> bool {
        self.w <= 0 || self.h <= 0
    }

    pub fn area(&self) -> u64 {
        if self.is_empty() {
            0
        } else {
            self.w as u64 * self.h as u64
        }
    }

    pub fn intersect(&self, o: &Rect) -> Rect {
        let x0 = self.x.max(o.x);
        let y0 = self.y.max(o.y);
        let x1 = (self.x + self.w).min(o.x + o.w);
        let y1 = (self.y + self.h).min(o.y + o.h);
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn offset(&self, dx: i32, dy: i32) -> Rect {
        Rect { x: self.x + dx, y: self.y + dy, ..*self }
    }
}

#[derive(Clone, Debug)]
pub struct Surface {
    pub id: SurfaceId,
    pub owner: u32,
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
    pub flags: u16,
    pub pixels: Vec<u8>,
    pub dirty: Vec<Rect>,
    pub events: EventQueue,
}

impl Surface {
    pub fn screen_rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.w, self.h)
    }

    pub fn is_float(&self) -> bool {
        self.flags & SURFACE_FLOAT != 0
    }

    pub fn is_alpha(&self) -> bool {
        self.flags & SURFACE_ALPHA != 0
    }

    fn pixel(&self, sx: i32, sy: i32) -> [u8; 4] {
        let o = ((sy * self.w + sx) * 4) as usize;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2], self.pixels[o + 3]]
    }
}

/// Where a key event went.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routed {
    Hotkey,
    Delivered(SurfaceId),
    Dropped,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CompositeStats {
    pub rects: u64,
    pub pixels: u64,
}

#[derive(Clone, Debug)]
pub struct Wm {
    width: i32,
    height: i32,
    order: Vec<SurfaceId>,
    surfaces: BTreeMap<SurfaceId, Surface>,
    damage: Vec<Rect>,
    focus: Option<SurfaceId>,
    next_id: SurfaceId,
    dropped: u64,
    composites: u64,
}

/// Blends `src` over `dst` for one pixel.
fn blend(dst: &mut [u8], src: [u8; 4], alpha: bool) {
    if alpha {
        for c in 0..3 {
            dst[c] = ((src[c] as u16 + dst[c] as u16) >> 1) as u8;
        }
    } else {
        dst[..3].copy_from_slice(&src[..3]);
    }
    dst[3] = 0xFF;
}

impl Wm {
    pub fn new(width: u32, height: u32) -> Self {
        let mut wm = Self {
            width: width as i32,
            height: height as i32,
            order: Vec::new(),
            surfaces: BTreeMap::new(),
            damage: Vec::new(),
            focus: None,
            next_id: 1,
            dropped: 0,
            composites: 0,
        };
        wm.damage.push(wm.screen());
        wm
    }

    pub fn screen(&self) -> Rect {
        Rect::new(0, 0, self.width, self.height)
    }

    pub fn order(&self) -> &[SurfaceId] {
        &self.order
    }

    pub fn surface(&self, id: SurfaceId) -> Option<&Surface> {
        self.surfaces.get(&id)
    }

    pub fn surface_mut(&mut self, id: SurfaceId) -> Option<&mut Surface> {
        self.surfaces.get_mut(&id)
    }

    pub fn surfaces(&self) -> impl Iterator<Item = &Surface> {
        self.order.iter().map(|id| &self.surfaces[id])
    }

    pub fn focus(&self) -> Option<SurfaceId> {
        self.focus
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn composites(&self) -> u64 {
        self.composites
    }

    pub fn owned_by(&self, owner: u32) -> Option<SurfaceId> {
        self.order.iter().copied().find(|id| self.surfaces[id].owner == owner)
    }

    fn clamp_pos(&self, x: i32, y: i32, w: i32, h: i32) -> (i32, i32) {
        (x.clamp(0, (self.width - w).max(0)), y.clamp(0, (self.height - h).max(0)))
    }

    /// Registers a new surface at (x, y). FLOAT surfaces stack above all
    /// others in creation order; non-FLOAT ones go below the first FLOAT
    /// and take focus.
    pub fn create(&mut self, owner: u32, x: i32, y: i32, w: u16, h: u16, flags: u16) -> SurfaceId {
        let (w, h) = (w as i32, h as i32);
        let (x, y) = self.clamp_pos(x, y, w, h);
        let id = self.next_id;
        self.next_id += 1;
        let s = Surface {
            id,
            owner,
            x,
            y,
            w,
            h,
            flags,
            pixels: vec![0; (w * h * 4) as usize],
            dirty: Vec::new(),
            events: EventQueue::default(),
        };
        let float = s.is_float();
        self.damage.push(s.screen_rect());
        self.surfaces.insert(id, s);
        if float {
            self.order.push(id);
        } else {
            let at = self.first_float();
            self.order.insert(at, id);
            self.focus = Some(id);
        }
        id
    }

    fn first_float(&self) -> usize {
        self.order.iter().position(|id| self.surfaces[id].is_float()).unwrap_or(self.order.len())
    }

    /// Default placement for the n-th application surface.
    pub fn cascade(&self, w: u16, h: u16) -> (i32, i32) {
        let k = self.order.len() as i32;
        self.clamp_pos(24 * k + 8, 24 * k + 8, w as i32, h as i32)
    }

    pub fn destroy(&mut self, id: SurfaceId) -> Option<Surface> {
        let pos = self.order.iter().position(|&x| x == id)?;
        self.order.remove(pos);
        let s = self.surfaces.remove(&id)?;
        self.damage.push(s.screen_rect());
        if self.focus == Some(id) {
            self.focus = if self.order.is_empty() { None } else { Some(self.order[pos % self.order.len()]) };
        }
        Some(s)
    }

    pub fn move_to(&mut self, id: SurfaceId, x: i32, y: i32) {
        let Some(s) = self.surfaces.get(&id) else { return };
        let (w, h) = (s.w, s.h);
        let old = s.screen_rect();
        let (x, y) = self.clamp_pos(x, y, w, h);
        let s = self.surfaces.get_mut(&id).expect("checked");
        s.x = x;
        s.y = y;
        let new = s.screen_rect();
        self.damage.push(old);
        self.damage.push(new);
    }

    pub fn move_by(&mut self, id: SurfaceId, dx: i32, dy: i32) {
        if let Some(s) = self.surfaces.get(&id) {
            let (x, y) = (s.x + dx, s.y + dy);
            self.move_to(id, x, y);
        }
    }

    /// Brings a surface to the top of its stacking class.
    pub fn raise(&mut self, id: SurfaceId) {
        let Some(pos) = self.order.iter().position(|&x| x == id) else { return };
        self.order.remove(pos);
        let float = self.surfaces[&id].is_float();
        let at = if float { self.order.len() } else { self.first_float() };
        self.order.insert(at, id);
        self.damage.push(self.surfaces[&id].screen_rect());
    }

    pub fn set_focus(&mut self, id: SurfaceId) {
        if self.surfaces.contains_key(&id) {
            self.focus = Some(id);
        }
    }

    /// Copies a pixel rectangle into a surface and marks it dirty.
    pub fn update(&mut self, id: SurfaceId, r: Rect, pixels: &[u8]) -> Result<(), FsError> {
        let s = self.surfaces.get_mut(&id).ok_or(FsError::BadFd)?;
        if r.x < 0 || r.y < 0 || r.x + r.w > s.w || r.y + r.h > s.h {
            return Err(FsError::ProtocolError(format!("rect {r:?} outside {}x{} surface", s.w, s.h)));
        }
        if pixels.len() != r.area() as usize * 4 {
            return Err(FsError::ProtocolError("pixel count mismatch".into()));
        }
        let row = (r.w * 4) as usize;
        for j in 0..r.h {
            let dst = (((r.y + j) * s.w + r.x) * 4) as usize;
            let src = j as usize * row;
            s.pixels[dst..dst + row].copy_from_slice(&pixels[src..src + row]);
        }
        if !r.is_empty() {
            s.dirty.push(r);
        }
        Ok(())
    }

    /// Marks a surface-local rectangle dirty after direct pixel edits.
    pub fn mark_dirty(&mut self, id: SurfaceId, r: Rect) {
        if let Some(s) = self.surfaces.get_mut(&id) {
            let r = r.intersect(&Rect::new(0, 0, s.w, s.h));
            if !r.is_empty() {
                s.dirty.push(r);
            }
        }
    }

    /// Routes one key event: hotkeys are consumed here, anything else is
    /// queued on the focused surface.
    pub fn dispatch_input(&mut self, ev: KeyEvent) -> Routed {
        if ev.mods.contains(Mods::CTRL) {
            let is_hotkey = matches!(
                ev.scancode,
                scancode::TAB | scancode::LEFT | scancode::RIGHT | scancode::UP | scancode::DOWN
            );
            if is_hotkey {
                if ev.action == KeyAction::Press {
                    self.hotkey(ev.scancode);
                }
                return Routed::Hotkey;
            }
        }
        match self.focus.and_then(|f| self.surfaces.get_mut(&f)) {
            Some(s) => {
                s.events.push(ev);
                Routed::Delivered(s.id)
            }
            None => {
                self.dropped += 1;
                Routed::Dropped
            }
        }
    }

    fn hotkey(&mut self, code: u16) {
        let Some(f) = self.focus else {
            if code == scancode::TAB {
                self.focus = self.order.first().copied();
            }
            return;
        };
        match code {
            scancode::TAB => {
                let pos = self.order.iter().position(|&x| x == f).unwrap_or(0);
                self.focus = Some(self.order[(pos + 1) % self.order.len()]);
            }
            scancode::LEFT => self.move_by(f, -MOVE_STEP, 0),
            scancode::RIGHT => self.move_by(f, MOVE_STEP, 0),
            scancode::UP => self.move_by(f, 0, -MOVE_STEP),
            scancode::DOWN => self.move_by(f, 0, MOVE_STEP),
            _ => {}
        }
    }

    pub fn has_damage(&self) -> bool {
        !self.damage.is_empty() || self.surfaces.values().any(|s| !s.dirty.is_empty())
    }

    fn draw_rect(&self, r: Rect, fb: &mut [u8]) {
        let stride = self.width as usize * 4;
        for y in r.y..r.y + r.h {
            let row = y as usize * stride;
            for x in r.x..r.x + r.w {
                let o = row + x as usize * 4;
                fb[o..o + 4].copy_from_slice(&BACKGROUND);
            }
        }
        for id in &self.order {
            let s = &self.surfaces[id];
            let part = r.intersect(&s.screen_rect());
            if part.is_empty() {
                continue;
            }
            let alpha = s.is_alpha();
            for y in part.y..part.y + part.h {
                let row = y as usize * stride;
                for x in part.x..part.x + part.w {
                    let o = row + x as usize * 4;
                    blend(&mut fb[o..o + 4], s.pixel(x - s.x, y - s.y), alpha);
                }
            }
        }
    }

    /// Redraws every damaged rectangle into `fb` (the shadow buffer) and
    /// clears all damage.
    pub fn composite(&mut self, fb: &mut [u8]) -> CompositeStats {
        let screen = self.screen();
        let mut rects: Vec<Rect> = std::mem::take(&mut self.damage);
        for id in &self.order {
            let s = self.surfaces.get_mut(id).expect("ordered");
            for d in s.dirty.drain(..) {
                rects.push(d.offset(s.x, s.y));
            }
        }
        let mut stats = CompositeStats::default();
        for r in rects {
            let r = r.intersect(&screen);
            if r.is_empty() {
                continue;
            }
            self.draw_rect(r, fb);
            stats.rects += 1;
            stats.pixels += r.area();
        }
        self.composites += 1;
        stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: each pixel is resolved on its own by walking the
    /// surfaces from bottom to top with their current geometry.
    fn oracle(wm: &Wm) -> Vec<u8> {
        let (w, h) = (wm.width, wm.height);
        let mut out = vec![0u8; (w * h * 4) as usize];
        for y in 0..h {
            for x in 0..w {
                let mut px = BACKGROUND;
                for s in wm.surfaces() {
                    if x >= s.x && x < s.x + s.w && y >= s.y && y < s.y + s.h {
                        let o = (((y - s.y) * s.w + (x - s.x)) * 4) as usize;
                        let src = &s.pixels[o..o + 4];
                        if s.flags & SURFACE_ALPHA != 0 {
                            for c in 0..3 {
                                px[c] = ((src[c] as u32 + px[c] as u32) / 2) as u8;
                            }
                        } else {
                            px = [src[0], src[1], src[2], 0xFF];
                        }
                    }
                }
                let o = ((y * w + x) * 4) as usize;
                out[o..o + 4].copy_from_slice(&px);
            }
        }
        out
    }

    fn fill(w: i32, h: i32, c: [u8; 4]) -> Vec<u8> {
        c.iter().copied().cycle().take((w * h * 4) as usize).collect()
    }

    #[test]
    fn single_dirty_rect_only() {
        let mut wm = Wm::new(64, 48);
        let mut fb = vec![0u8; 64 * 48 * 4];
        let s = wm.create(1, 0, 0, 64, 48, 0);
        wm.composite(&mut fb);
        wm.update(s, Rect::new(4, 4, 8, 2), &fill(8, 2, [255, 0, 0, 255])).unwrap();
        let st = wm.composite(&mut fb);
        assert_eq!(st, CompositeStats { rects: 1, pixels: 16 });
        assert_eq!(fb, oracle(&wm));
    }

    #[test]
    fn higher_z_wins_overlap() {
        let mut wm = Wm::new(32, 32);
        let mut fb = vec![0u8; 32 * 32 * 4];
        let a = wm.create(1, 0, 0, 20, 20, 0);
        let b = wm.create(2, 10, 10, 20, 20, 0);
        wm.update(a, Rect::new(0, 0, 20, 20), &fill(20, 20, [1, 1, 1, 255])).unwrap();
        wm.update(b, Rect::new(0, 0, 20, 20), &fill(20, 20, [2, 2, 2, 255])).unwrap();
        wm.composite(&mut fb);
        let o = (15 * 32 + 15) * 4;
        assert_eq!(&fb[o..o + 4], &[2, 2, 2, 255]);
    }

    #[test]
    fn float_alpha_on_top_blended() {
        let mut wm = Wm::new(16, 16);
        let mut fb = vec![0u8; 16 * 16 * 4];
        let f = wm.create(1, 0, 0, 8, 8, SURFACE_FLOAT | SURFACE_ALPHA);
        let a = wm.create(2, 0, 0, 16, 16, 0);
        assert_eq!(wm.order(), &[a, f]);
        assert_eq!(wm.focus(), Some(a));
        wm.update(a, Rect::new(0, 0, 16, 16), &fill(16, 16, [100, 100, 100, 255])).unwrap();
        wm.update(f, Rect::new(0, 0, 8, 8), &fill(8, 8, [200, 0, 50, 255])).unwrap();
        wm.raise(a);
        wm.composite(&mut fb);
        assert_eq!(&fb[0..4], &[150, 50, 75, 255]);
    }

    #[test]
    fn hotkeys_and_routing() {
        let mut wm = Wm::new(100, 100);
        let ev = |code, mods| KeyEvent { scancode: code, action: KeyAction::Press, mods, tick: 0 };
        assert_eq!(wm.dispatch_input(ev(30, Mods::NONE)), Routed::Dropped);
        assert_eq!(wm.dropped(), 1);
        let s1 = wm.create(1, 0, 0, 10, 10, 0);
        let s2 = wm.create(2, 0, 0, 10, 10, 0);
        assert_eq!(wm.dispatch_input(ev(30, Mods::NONE)), Routed::Delivered(s2));
        assert_eq!(wm.dispatch_input(ev(scancode::TAB, Mods::CTRL)), Routed::Hotkey);
        assert_eq!(wm.focus(), Some(s1));
        assert_eq!(wm.surface(s1).unwrap().events.len(), 0);
        wm.dispatch_input(ev(scancode::RIGHT, Mods::CTRL));
        assert_eq!(wm.surface(s1).unwrap().x, 10);
        for _ in 0..20 {
            wm.dispatch_input(ev(scancode::RIGHT, Mods::CTRL));
        }
        assert_eq!(wm.surface(s1).unwrap().x, 90);
        wm.destroy(s1);
        assert_eq!(wm.focus(), Some(s2));
        wm.destroy(s2);
        assert_eq!(wm.focus(), None);
    }

    #[test]
    fn update_bounds_checked() {
        let mut wm = Wm::new(10, 10);
        let s = wm.create(1, 0, 0, 4, 4, 0);
        assert!(matches!(wm.update(s, Rect::new(2, 2, 3, 3), &[0; 36]), Err(FsError::ProtocolError(_))));
    }

    #[test]
    fn randomized_scenario_matches_full_recompose() {
        let (w, h) = (96, 72);
        let mut wm = Wm::new(w, h);
        let mut fb = vec![0u8; (w * h * 4) as usize];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let ids: Vec<SurfaceId> = wm.order().to_vec();
            let pick = |rng: &mut ChaCha8Rng| ids[rng.gen_range(0..ids.len())];
            match rng.gen_range(0..10) {
                0 | 1 if ids.len() < 6 => {
                    let flags = [0, 0, SURFACE_ALPHA, SURFACE_FLOAT, SURFACE_FLOAT | SURFACE_ALPHA][rng.gen_range(0..5)];
                    wm.create(rng.gen(), rng.gen_range(-10..90), rng.gen_range(-10..70), rng.gen_range(1..50), rng.gen_range(1..40), flags);
                }
                2 if !ids.is_empty() => {
                    wm.destroy(pick(&mut rng));
                }
                3 | 4 if !ids.is_empty() => {
                    let id = pick(&mut rng);
                    wm.move_by(id, rng.gen_range(-15..16), rng.gen_range(-15..16));
                }
                5 if !ids.is_empty() => wm.raise(pick(&mut rng)),
                6..=8 if !ids.is_empty() => {
                    let id = pick(&mut rng);
                    let s = wm.surface(id).unwrap();
                    let rw = rng.gen_range(1..=s.w);
                    let rh = rng.gen_range(1..=s.h);
                    let r = Rect::new(rng.gen_range(0..=s.w - rw), rng.gen_range(0..=s.h - rh), rw, rh);
                    let px: Vec<u8> = (0..r.area() * 4).map(|_| rng.gen()).collect();
                    wm.update(id, r, &px).unwrap();
                }
                _ => {
                    let code = [scancode::TAB, scancode::LEFT, scancode::DOWN][rng.gen_range(0..3)];
                    wm.dispatch_input(KeyEvent { scancode: code, action: KeyAction::Press, mods: Mods::CTRL, tick: 0 });
                }
            }
            wm.composite(&mut fb);
            assert_eq!(fb, oracle(&wm));
        }
    }
}
