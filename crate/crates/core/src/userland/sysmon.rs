//! `sysmon`: a floating, translucent panel with one bar per core and a
//! memory bar, refreshed every 100 ms from `/proc/cpuinfo` and
//! `/proc/meminfo`.

use crate::devio::{SurfaceMsg, SURFACE_ALPHA, SURFACE_FLOAT};
use crate::kernel::Cpu;
use crate::proc::*;
use crate::vfs::procfs::{parse_cpuinfo, parse_meminfo};

use super::rt::{self, R, V0};

pub const PANEL_W: usize = 160;
pub const PANEL_H: usize = 100;
pub const REFRESH_MS: u64 = 100;

const SURF: usize = V0;
const FD: usize = V0 + 1;
const CPU_LEN: usize = V0 + 2;
const MEM_LEN: usize = V0 + 3;

const CPUBUF: u64 = rt::HEAP;
const MEMBUF: u64 = rt::HEAP + 0x400;
const PIX: u64 = rt::HEAP + 0x800;

const PANEL_BG: [u8; 4] = [0x10, 0x10, 0x10, 0xA0];
const CPU_BAR: [u8; 4] = [0x40, 0xD0, 0x40, 0xFF];
const MEM_BAR: [u8; 4] = [0x40, 0x80, 0xE0, 0xFF];
const TRACK: [u8; 4] = [0x30, 0x30, 0x30, 0xC0];

/// Draws the panel: core bars fill from the left by utilization, the last
/// bar shows used memory.
pub fn draw(util: &[u32], mem: Option<(u32, u32)>) -> Vec<u8> {
    let mut px = PANEL_BG.repeat(PANEL_W * PANEL_H);
    let bars = util.len() + 1;
    let pitch = (PANEL_H - 8) / bars.max(1);
    let bar_h = pitch.saturating_sub(3).max(2);
    let track_w = PANEL_W - 16;
    let mut fill = |row: usize, frac: f64, color: [u8; 4]| {
        let y0 = 4 + row * pitch;
        let len = (frac.clamp(0.0, 1.0) * track_w as f64).round() as usize;
        for y in y0..(y0 + bar_h).min(PANEL_H) {
            for x in 0..track_w {
                let c = if x < len { color } else { TRACK };
                let i = (y * PANEL_W + 8 + x) * 4;
                px[i..i + 4].copy_from_slice(&c);
            }
        }
    };
    for (i, &u) in util.iter().enumerate() {
        fill(i, u as f64 / 100.0, CPU_BAR);
    }
    let used = mem.map_or(0.0, |(free, total)| if total == 0 { 0.0 } else { 1.0 - free as f64 / total as f64 });
    fill(util.len(), used, MEM_BAR);
    px
}

pub fn run(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            cpu.goto(1);
            rt::open(cpu, "/dev/surface", O_WRONLY)
        }
        1 => {
            let fd = cpu.ret();
            if fd < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, SURF, fd as u64)?;
            let cfg = SurfaceMsg::Config { w: PANEL_W as u16, h: PANEL_H as u16, flags: SURFACE_FLOAT | SURFACE_ALPHA }
                .to_bytes();
            cpu.st(rt::OUT, &cfg)?;
            cpu.goto(2);
            Ok(cpu.sys(SYS_WRITE, &[fd as u64, rt::OUT, cfg.len() as u64]))
        }
        2 => {
            if cpu.ret() < 0 {
                return rt::exit(cpu, 1);
            }
            rt::jump(cpu, 10)
        }
        10 => {
            cpu.goto(11);
            rt::open(cpu, "/proc/cpuinfo", O_RDONLY)
        }
        11 => {
            let fd = cpu.ret();
            if fd < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, FD, fd as u64)?;
            cpu.goto(12);
            Ok(cpu.sys(SYS_READ, &[fd as u64, CPUBUF, 0x400]))
        }
        12 => {
            rt::set(cpu, CPU_LEN, cpu.ret().max(0) as u64)?;
            cpu.goto(13);
            Ok(cpu.sys(SYS_CLOSE, &[rt::var(cpu, FD)?]))
        }
        13 => {
            cpu.goto(14);
            rt::open(cpu, "/proc/meminfo", O_RDONLY)
        }
        14 => {
            let fd = cpu.ret();
            if fd < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, FD, fd as u64)?;
            cpu.goto(15);
            Ok(cpu.sys(SYS_READ, &[fd as u64, MEMBUF, 0x400]))
        }
        15 => {
            rt::set(cpu, MEM_LEN, cpu.ret().max(0) as u64)?;
            cpu.goto(16);
            Ok(cpu.sys(SYS_CLOSE, &[rt::var(cpu, FD)?]))
        }
        16 => {
            let c = cpu.ld(CPUBUF, rt::var(cpu, CPU_LEN)? as usize)?;
            let m = cpu.ld(MEMBUF, rt::var(cpu, MEM_LEN)? as usize)?;
            let util = parse_cpuinfo(&String::from_utf8_lossy(&c));
            let mem = parse_meminfo(&String::from_utf8_lossy(&m));
            let pixels = draw(&util, mem);
            let msg = SurfaceMsg::Rect { x: 0, y: 0, w: PANEL_W as u16, h: PANEL_H as u16, pixels }.to_bytes();
            cpu.st(PIX, &msg)?;
            cpu.goto(17);
            Ok(cpu.sys(SYS_WRITE, &[rt::var(cpu, SURF)?, PIX, msg.len() as u64]))
        }
        17 => {
            if cpu.ret() < 0 {
                return rt::exit(cpu, 1);
            }
            cpu.goto(10);
            rt::sleep_ms(cpu, REFRESH_MS)
        }
        _ => rt::exit(cpu, 99),
    }
}
