//! The console: an append-only log plus, from p4 on, a text grid drawn
//! either straight into the framebuffer (fbcon) or into a WM surface.

use crate::devio::{LineDiscipline, TextGrid, GLYPH};
use crate::hwsim::FbHw;
use crate::profile::Profile;
use crate::wm::{Rect, SurfaceId, Wm};

/// fbcon grid: the top 320 pixel rows of the screen; apps own the rest.
pub const CONSOLE_COLS: usize = 80;
pub const CONSOLE_ROWS: usize = 40;

/// Console surface used when the WM is running.
pub const SURFACE_COLS: usize = 60;
pub const SURFACE_ROWS: usize = 45;
pub const SURFACE_X: i32 = 8;
pub const SURFACE_Y: i32 = 8;

pub(crate) fn create_console_surface(wm: &mut Wm) -> SurfaceId {
    let w = (SURFACE_COLS * GLYPH) as u16;
    let h = (SURFACE_ROWS * GLYPH) as u16;
    wm.create(0, SURFACE_X, SURFACE_Y, w, h, 0)
}

#[derive(Clone, Debug)]
pub struct Console {
    pub log: Vec<u8>,
    pub ld: LineDiscipline,
    grid: Option<TextGrid>,
    surface: Option<SurfaceId>,
    canvas: Vec<u8>,
}

impl Console {
    pub fn new(profile: Profile) -> Self {
        let grid = profile.has_vfs().then(|| TextGrid::new(CONSOLE_COLS, CONSOLE_ROWS));
        Self { log: Vec::new(), ld: LineDiscipline::default(), grid, surface: None, canvas: Vec::new() }
    }

    pub fn attach_surface(&mut self, sid: SurfaceId) {
        self.surface = Some(sid);
        self.grid = Some(TextGrid::new(SURFACE_COLS, SURFACE_ROWS));
    }

    pub fn surface(&self) -> Option<SurfaceId> {
        self.surface
    }

    pub fn grid(&self) -> Option<&TextGrid> {
        self.grid.as_ref()
    }

    pub fn write(&mut self, bytes: &[u8], fb: &mut FbHw, wm: Option<&mut Wm>) {
        self.log.extend_from_slice(bytes);
        if let Some(g) = self.grid.as_mut() {
            g.write(bytes);
            self.redraw(fb, wm);
        }
    }

    /// Pushes dirty grid rows to their destination.
    pub fn redraw(&mut self, fb: &mut FbHw, wm: Option<&mut Wm>) {
        let Some(g) = self.grid.as_mut() else { return };
        let rows = g.take_dirty();
        if rows.is_empty() {
            return;
        }
        match (self.surface, wm) {
            (Some(sid), Some(wm)) => {
                let w = g.cols() * GLYPH;
                let band = w * GLYPH * 4;
                self.canvas.resize(band * g.rows(), 0);
                for r in rows {
                    g.render_row(r, &mut self.canvas, w);
                    let rect = Rect::new(0, (r * GLYPH) as i32, w as i32, GLYPH as i32);
                    wm.update(sid, rect, &self.canvas[r * band..(r + 1) * band]).expect("console rect inside surface");
                }
            }
            _ => {
                let stride = fb.width() as usize;
                for r in rows {
                    g.render_row(r, fb.shadow_mut(), stride);
                }
                fb.flush();
            }
        }
    }
}
