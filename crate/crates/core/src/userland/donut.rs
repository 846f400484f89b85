//! The spinning donut: a shaded torus rendered into a 96x96 tile.
//!
//! On p3 the program gets the framebuffer mapped into its address space and
//! draws straight into it, then cleans the cache over the tile. On p4 it
//! writes rows to `/dev/fb`; with a window manager it draws into a surface.

use crate::devio::SurfaceMsg;
use crate::hwsim::DEFAULT_FB_WIDTH;
use crate::kernel::{Cpu, Step};
use crate::proc::*;

use super::rt::{self, R, V0};

pub const TILE: usize = 96;
pub const FRAME_MS: u64 = 33;
/// Ticks charged for rendering one frame.
pub const RENDER_COST: u64 = 2_000;

/// Screen position of donut tile `id`, below the console area.
pub fn tile_origin(id: u32) -> (usize, usize) {
    (8 + id as usize * (TILE + 8), 376)
}

/// RGBA pixels of frame `frame`.
pub fn render(frame: u64) -> Vec<u8> {
    let a = frame as f64 * 0.07;
    let b = frame as f64 * 0.03;
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let mut z = vec![0f64; TILE * TILE];
    let mut px = vec![0u8; TILE * TILE * 4];
    for p in px.chunks_exact_mut(4) {
        p.copy_from_slice(&[0x10, 0x10, 0x18, 0xFF]);
    }
    let k2 = 5.0;
    let k1 = TILE as f64 * k2 * 3.0 / (8.0 * 3.0);
    let mut theta = 0.0f64;
    while theta < std::f64::consts::TAU {
        let (st, ct) = theta.sin_cos();
        let mut phi = 0.0f64;
        while phi < std::f64::consts::TAU {
            let (sp, cp) = phi.sin_cos();
            let cx = 2.0 + ct;
            let x = cx * (cb * cp + sa * sb * sp) - st * ca * sb;
            let y = cx * (sb * cp - sa * cb * sp) + st * ca * cb;
            let zz = k2 + ca * cx * sp + st * sa;
            let ooz = 1.0 / zz;
            let xp = (TILE as f64 / 2.0 + k1 * ooz * x) as isize;
            let yp = (TILE as f64 / 2.0 - k1 * ooz * y) as isize;
            let lum = cp * ct * sb - ca * ct * sp - sa * st + cb * (ca * st - ct * sa * sp);
            if (0..TILE as isize).contains(&xp) && (0..TILE as isize).contains(&yp) {
                let i = yp as usize * TILE + xp as usize;
                if ooz > z[i] {
                    z[i] = ooz;
                    let l = (lum.max(0.0) * 180.0) as u8;
                    px[i * 4..i * 4 + 4].copy_from_slice(&[0x40 + l / 2, 0x20 + l / 3, 0x60 + l / 2, 0xFF]);
                }
            }
            phi += 0.04;
        }
        theta += 0.1;
    }
    px
}

// Globals.
const ID: usize = V0;
const FRAME: usize = V0 + 1;
const FRAMES: usize = V0 + 2;
const FB: usize = V0 + 3;
const STRIDE: usize = V0 + 4;
const FD: usize = V0 + 5;
const ROW: usize = V0 + 6;

const PIX: u64 = rt::HEAP;

/// `donut [id] [frames]`: frames = 0 runs forever.
pub fn run(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            let (fb, stride) = (cpu.r(2), cpu.r(5));
            rt::save_args(cpu)?;
            let id = rt::arg_u64(cpu, 1, 0)?;
            let frames = rt::arg_u64(cpu, 2, 0)?;
            rt::set(cpu, ID, id)?;
            rt::set(cpu, FRAMES, frames)?;
            rt::set(cpu, FB, fb)?;
            rt::set(cpu, STRIDE, stride)?;
            if fb != 0 {
                return rt::jump(cpu, 10);
            }
            cpu.goto(1);
            rt::open(cpu, "/dev/surface", O_WRONLY)
        }
        1 => {
            let fd = cpu.ret();
            if fd >= 0 {
                rt::set(cpu, FD, fd as u64)?;
                let cfg = SurfaceMsg::Config { w: TILE as u16, h: TILE as u16, flags: 0 }.to_bytes();
                cpu.st(rt::OUT, &cfg)?;
                cpu.goto(20);
                return Ok(cpu.sys(SYS_WRITE, &[fd as u64, rt::OUT, cfg.len() as u64]));
            }
            cpu.goto(2);
            rt::open(cpu, "/dev/fb", O_WRONLY)
        }
        2 => {
            let fd = cpu.ret();
            if fd < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, FD, fd as u64)?;
            rt::jump(cpu, 30)
        }
        // Direct framebuffer mode (p3).
        10 => {
            if done(cpu)? {
                return rt::exit(cpu, 0);
            }
            let id = rt::var(cpu, ID)? as u32;
            let (fb, stride) = (rt::var(cpu, FB)?, rt::var(cpu, STRIDE)?);
            let px = render(rt::var(cpu, FRAME)? + id as u64 * 7);
            let (x0, y0) = tile_origin(id);
            for row in 0..TILE {
                let va = fb + (y0 + row) as u64 * stride + x0 as u64 * 4;
                cpu.st(va, &px[row * TILE * 4..(row + 1) * TILE * 4])?;
            }
            cpu.goto(11);
            Ok(Step::Compute(RENDER_COST))
        }
        11 => {
            let id = rt::var(cpu, ID)? as u32;
            let (fb, stride) = (rt::var(cpu, FB)?, rt::var(cpu, STRIDE)?);
            let (_, y0) = tile_origin(id);
            cpu.goto(12);
            Ok(Step::CacheFlush { va: fb + y0 as u64 * stride, len: TILE as u64 * stride })
        }
        12 => {
            next_frame(cpu)?;
            cpu.goto(10);
            rt::sleep_ms(cpu, FRAME_MS)
        }
        // Surface mode (p5 with a window manager).
        20 => {
            if cpu.ret() < 0 {
                return rt::exit(cpu, 1);
            }
            rt::jump(cpu, 21)
        }
        21 => {
            if done(cpu)? {
                return rt::exit(cpu, 0);
            }
            let id = rt::var(cpu, ID)?;
            let px = render(rt::var(cpu, FRAME)? + id * 7);
            let msg = SurfaceMsg::Rect { x: 0, y: 0, w: TILE as u16, h: TILE as u16, pixels: px }.to_bytes();
            cpu.st(PIX, &msg)?;
            cpu.goto(22);
            let fd = rt::var(cpu, FD)?;
            Ok(cpu.sys(SYS_WRITE, &[fd, PIX, msg.len() as u64]))
        }
        22 => {
            next_frame(cpu)?;
            cpu.goto(21);
            rt::sleep_ms(cpu, FRAME_MS)
        }
        // /dev/fb mode (p4): one lseek + write per row, then a flush.
        30 => {
            if done(cpu)? {
                return rt::exit(cpu, 0);
            }
            let id = rt::var(cpu, ID)?;
            let px = render(rt::var(cpu, FRAME)? + id * 7);
            cpu.st(PIX, &px)?;
            rt::set(cpu, ROW, 0)?;
            cpu.goto(31);
            Ok(Step::Compute(RENDER_COST))
        }
        31 => {
            let row = rt::var(cpu, ROW)?;
            if row == TILE as u64 {
                cpu.goto(33);
                return Ok(cpu.sys(SYS_FBCTL, &[FBCTL_FLUSH]));
            }
            let (x0, y0) = tile_origin(rt::var(cpu, ID)? as u32);
            let off = ((y0 as u64 + row) * DEFAULT_FB_WIDTH as u64 + x0 as u64) * 4;
            cpu.goto(32);
            Ok(cpu.sys(SYS_LSEEK, &[rt::var(cpu, FD)?, off, SEEK_SET]))
        }
        32 => {
            let row = rt::var(cpu, ROW)?;
            rt::set(cpu, ROW, row + 1)?;
            cpu.goto(31);
            let len = (TILE * 4) as u64;
            Ok(cpu.sys(SYS_WRITE, &[rt::var(cpu, FD)?, PIX + row * len, len]))
        }
        33 => {
            next_frame(cpu)?;
            cpu.goto(30);
            rt::sleep_ms(cpu, FRAME_MS)
        }
        _ => rt::exit(cpu, 99),
    }
}

fn done(cpu: &Cpu) -> Result<bool, crate::mem::Fault> {
    let frames = rt::var(cpu, FRAMES)?;
    Ok(frames != 0 && rt::var(cpu, FRAME)? >= frames)
}

fn next_frame(cpu: &mut Cpu) -> Result<(), crate::mem::Fault> {
    let f = rt::var(cpu, FRAME)?;
    rt::set(cpu, FRAME, f + 1)
}
