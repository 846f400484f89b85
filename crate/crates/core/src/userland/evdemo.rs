//! `evdemo`: an event loop fed by two producers over one pipe.
//!
//! A reader task pulls key events from the input device, and a ticker task
//! emits a record every 10 ms. Both write fixed-size records into a pipe;
//! the main task reads it, counts keys, hashes their order and tracks
//! delivery latency. An Escape press ends the run with the line
//! `evdemo keys <k> events <e> lost <l> hash <h> maxlat <m> totlat <t>`.
//!
//! Without a window manager the reader uses `/dev/events` and the tasks are
//! forked. With one, main creates a surface (which takes focus) and the
//! reader and ticker are threads reading the surface's `/dev/event1`.
//!
//! Record layout (16 bytes): kind u32, seq u32, then for key records an
//! 8-byte key event whose tick field the reader has replaced with the
//! latency in ticks at the time it read the event.

use crate::devio::SurfaceMsg;
use crate::hwsim::kbd::scancode::ESC;
use crate::hwsim::kbd::KEY_RECORD_LEN;
use crate::hwsim::{KeyAction, KeyEvent};
use crate::kernel::Cpu;
use crate::proc::*;

use super::miner::fnv1a64;
use super::rt::{self, R, V0};

pub const EVDEMO_RECORD: usize = 16;
pub const EVDEMO_KIND_KEY: u32 = 1;
pub const EVDEMO_KIND_TICK: u32 = 2;
pub const TICK_MS: u64 = 10;
const READ_EVENTS: usize = 4;
const THREAD_STACK: u64 = 4096;
const WIN_W: u16 = 200;
const WIN_H: u16 = 80;

const EVFD: usize = V0;
const PIPE_R: usize = V0 + 1;
const PIPE_W: usize = V0 + 2;
const READER: usize = V0 + 3;
const TICKER: usize = V0 + 4;
const THREADS: usize = V0 + 5;
const PEND: usize = V0 + 6;
const KEYS: usize = V0 + 7;
const EVENTS: usize = V0 + 8;
const LOST: usize = V0 + 9;
const HASH: usize = V0 + 10;
const MAXLAT: usize = V0 + 11;
const TOTLAT: usize = V0 + 12;
const NEXTSEQ: usize = V0 + 13;
const STACKS: usize = V0 + 14;
const REAPED: usize = V0 + 15;
// Reader and ticker state.
const R_SEQ: usize = V0 + 20;
const R_LEN: usize = V0 + 21;
const R_OFF: usize = V0 + 22;
const T_SEQ: usize = V0 + 23;

const PIPEFDS: u64 = rt::HEAP;
const INBUF: u64 = rt::HEAP + 0x100;
const INCAP: u64 = 64 * EVDEMO_RECORD as u64;
const EVBUF: u64 = rt::HEAP + 0x800;
const RECBUF: u64 = rt::HEAP + 0x900;
const TICKBUF: u64 = rt::HEAP + 0xA00;
const WINBUF: u64 = rt::HEAP + 0x1000;

pub fn record(kind: u32, seq: u32, key: Option<&KeyEvent>) -> [u8; EVDEMO_RECORD] {
    let mut b = [0u8; EVDEMO_RECORD];
    b[0..4].copy_from_slice(&kind.to_le_bytes());
    b[4..8].copy_from_slice(&seq.to_le_bytes());
    if let Some(k) = key {
        b[8..16].copy_from_slice(&k.to_bytes());
    }
    b
}

/// Running order hash: FNV-1a over (scancode, action) of each key event.
pub fn order_hash(events: impl IntoIterator<Item = (u16, KeyAction)>) -> u64 {
    let mut bytes = Vec::new();
    for (code, action) in events {
        bytes.extend_from_slice(&code.to_le_bytes());
        bytes.push(action.to_u8());
    }
    fnv1a64(&bytes)
}

fn hash_extend(h: u64, ev: &KeyEvent) -> u64 {
    let mut h = h;
    let b = ev.scancode.to_le_bytes();
    for c in [b[0], b[1], ev.action.to_u8()] {
        h ^= c as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn run(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            rt::set(cpu, HASH, fnv1a64(&[]))?;
            cpu.goto(1);
            rt::open(cpu, "/dev/surface", O_WRONLY)
        }
        1 => {
            let fd = cpu.ret();
            if fd < 0 {
                cpu.goto(3);
                return rt::open(cpu, "/dev/events", O_RDONLY);
            }
            rt::set(cpu, THREADS, 1)?;
            let cfg = SurfaceMsg::Config { w: WIN_W, h: WIN_H, flags: 0 }.to_bytes();
            let px = [0x20, 0x40, 0x20, 0xFF].repeat(WIN_W as usize * WIN_H as usize);
            let mut msg = cfg;
            msg.extend(SurfaceMsg::Rect { x: 0, y: 0, w: WIN_W, h: WIN_H, pixels: px }.to_bytes());
            cpu.st(WINBUF, &msg)?;
            cpu.goto(2);
            Ok(cpu.sys(SYS_WRITE, &[fd as u64, WINBUF, msg.len() as u64]))
        }
        2 => {
            if cpu.ret() < 0 {
                return rt::exit(cpu, 1);
            }
            cpu.goto(3);
            rt::open(cpu, "/dev/event1", O_RDONLY)
        }
        3 => {
            let fd = cpu.ret();
            if fd < 0 {
                cpu.goto(90);
                return rt::print(cpu, 2, &format!("evdemo: no input device: {}\n", rt::errno_name(fd)));
            }
            rt::set(cpu, EVFD, fd as u64)?;
            cpu.goto(4);
            Ok(cpu.sys(SYS_PIPE, &[PIPEFDS]))
        }
        4 => {
            if cpu.ret() < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, PIPE_R, cpu.ld32(PIPEFDS)? as u64)?;
            rt::set(cpu, PIPE_W, cpu.ld32(PIPEFDS + 4)? as u64)?;
            if rt::var(cpu, THREADS)? == 0 {
                cpu.goto(5);
                return Ok(cpu.sys(SYS_FORK, &[]));
            }
            cpu.goto(8);
            Ok(cpu.sys(SYS_SBRK, &[2 * THREAD_STACK]))
        }
        // Forked producers.
        5 => {
            let r = cpu.ret();
            if r == 0 {
                return rt::jump(cpu, 40);
            }
            if r < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, READER, r as u64)?;
            cpu.goto(6);
            Ok(cpu.sys(SYS_FORK, &[]))
        }
        6 => {
            let r = cpu.ret();
            if r == 0 {
                return rt::jump(cpu, 50);
            }
            if r < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, TICKER, r as u64)?;
            rt::jump(cpu, 20)
        }
        // Cloned producers.
        8 => {
            let base = cpu.ret();
            if base < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, STACKS, base as u64)?;
            cpu.goto(9);
            Ok(cpu.sys(SYS_CLONE, &[CLONE_VM, base as u64 + THREAD_STACK]))
        }
        9 => {
            let r = cpu.ret();
            if r == 0 {
                return rt::jump(cpu, 40);
            }
            if r < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, READER, r as u64)?;
            cpu.goto(10);
            Ok(cpu.sys(SYS_CLONE, &[CLONE_VM, rt::var(cpu, STACKS)? + 2 * THREAD_STACK]))
        }
        10 => {
            let r = cpu.ret();
            if r == 0 {
                return rt::jump(cpu, 50);
            }
            if r < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, TICKER, r as u64)?;
            rt::jump(cpu, 20)
        }
        // Main loop: read records from the pipe.
        20 => {
            let pend = rt::var(cpu, PEND)?;
            cpu.goto(21);
            Ok(cpu.sys(SYS_READ, &[rt::var(cpu, PIPE_R)?, INBUF + pend, INCAP - pend]))
        }
        21 => {
            let n = cpu.ret();
            if n <= 0 {
                return rt::exit(cpu, 1);
            }
            let total = rt::var(cpu, PEND)? + n as u64;
            let buf = cpu.ld(INBUF, total as usize)?;
            let whole = buf.len() / EVDEMO_RECORD * EVDEMO_RECORD;
            let (mut keys, mut events, mut lost) = (rt::var(cpu, KEYS)?, rt::var(cpu, EVENTS)?, rt::var(cpu, LOST)?);
            let (mut hash, mut maxlat, mut totlat) = (rt::var(cpu, HASH)?, rt::var(cpu, MAXLAT)?, rt::var(cpu, TOTLAT)?);
            let mut next = rt::var(cpu, NEXTSEQ)?;
            let mut quit = false;
            for rec in buf[..whole].chunks_exact(EVDEMO_RECORD) {
                let kind = u32::from_le_bytes(rec[0..4].try_into().unwrap());
                if kind != EVDEMO_KIND_KEY {
                    continue;
                }
                let seq = u32::from_le_bytes(rec[4..8].try_into().unwrap()) as u64;
                lost += seq.saturating_sub(next);
                next = seq + 1;
                let Some(ev) = KeyEvent::from_bytes(&rec[8..8 + KEY_RECORD_LEN]) else { continue };
                if ev.scancode == ESC {
                    quit |= ev.action == KeyAction::Press;
                    continue;
                }
                events += 1;
                hash = hash_extend(hash, &ev);
                if ev.action == KeyAction::Press {
                    keys += 1;
                    maxlat = maxlat.max(ev.tick);
                    totlat += ev.tick;
                }
            }
            cpu.st(INBUF, &buf[whole..])?;
            rt::set(cpu, PEND, (buf.len() - whole) as u64)?;
            for (i, v) in [(KEYS, keys), (EVENTS, events), (LOST, lost), (HASH, hash), (MAXLAT, maxlat), (TOTLAT, totlat), (NEXTSEQ, next)] {
                rt::set(cpu, i, v)?;
            }
            if !quit {
                return rt::jump(cpu, 20);
            }
            cpu.goto(22);
            rt::print(
                cpu,
                1,
                &format!("evdemo keys {keys} events {events} lost {lost} hash {hash:016x} maxlat {maxlat} totlat {totlat}\n"),
            )
        }
        22 => {
            cpu.goto(23);
            Ok(cpu.sys(SYS_KILL, &[rt::var(cpu, READER)?]))
        }
        23 => {
            cpu.goto(24);
            Ok(cpu.sys(SYS_KILL, &[rt::var(cpu, TICKER)?]))
        }
        24 => {
            if rt::var(cpu, REAPED)? >= 2 {
                return rt::exit(cpu, 0);
            }
            cpu.goto(25);
            Ok(cpu.sys(SYS_WAIT, &[0]))
        }
        25 => {
            if cpu.ret() < 0 {
                return rt::exit(cpu, 0);
            }
            rt::set(cpu, REAPED, rt::var(cpu, REAPED)? + 1)?;
            rt::jump(cpu, 24)
        }
        // Reader: a batch of events becomes a batch of records.
        40 => {
            cpu.goto(41);
            Ok(cpu.sys(SYS_READ, &[rt::var(cpu, EVFD)?, EVBUF, (READ_EVENTS * KEY_RECORD_LEN) as u64]))
        }
        41 => {
            let n = cpu.ret();
            if n <= 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, R_LEN, n as u64)?;
            cpu.goto(42);
            Ok(cpu.sys(SYS_UPTIME, &[]))
        }
        42 => {
            let now = cpu.ret() as u64;
            let raw = cpu.ld(EVBUF, rt::var(cpu, R_LEN)? as usize)?;
            let mut seq = rt::var(cpu, R_SEQ)?;
            let mut out = Vec::new();
            for chunk in raw.chunks_exact(KEY_RECORD_LEN) {
                let Some(mut ev) = KeyEvent::from_bytes(chunk) else { continue };
                ev.tick = now.saturating_sub(ev.tick) & u32::MAX as u64;
                out.extend(record(EVDEMO_KIND_KEY, seq as u32, Some(&ev)));
                seq += 1;
            }
            rt::set(cpu, R_SEQ, seq)?;
            cpu.st(RECBUF, &out)?;
            rt::set(cpu, R_LEN, out.len() as u64)?;
            rt::set(cpu, R_OFF, 0)?;
            rt::jump(cpu, 43)
        }
        43 => {
            let (len, off) = (rt::var(cpu, R_LEN)?, rt::var(cpu, R_OFF)?);
            if off >= len {
                return rt::jump(cpu, 40);
            }
            cpu.goto(44);
            Ok(cpu.sys(SYS_WRITE, &[rt::var(cpu, PIPE_W)?, RECBUF + off, len - off]))
        }
        44 => {
            let n = cpu.ret();
            if n < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, R_OFF, rt::var(cpu, R_OFF)? + n as u64)?;
            rt::jump(cpu, 43)
        }
        // Ticker.
        50 => {
            cpu.goto(51);
            rt::sleep_ms(cpu, TICK_MS)
        }
        51 => {
            let seq = rt::var(cpu, T_SEQ)?;
            rt::set(cpu, T_SEQ, seq + 1)?;
            cpu.st(TICKBUF, &record(EVDEMO_KIND_TICK, seq as u32, None))?;
            cpu.goto(52);
            Ok(cpu.sys(SYS_WRITE, &[rt::var(cpu, PIPE_W)?, TICKBUF, EVDEMO_RECORD as u64]))
        }
        52 => {
            if cpu.ret() < 0 {
                return rt::exit(cpu, 1);
            }
            rt::jump(cpu, 50)
        }
        90 => rt::exit(cpu, 1),
        _ => rt::exit(cpu, 99),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwsim::Mods;

    #[test]
    fn incremental_hash_matches_batch() {
        let evs = [(30u16, KeyAction::Press), (30, KeyAction::Release), (48, KeyAction::Press)];
        let mut h = fnv1a64(&[]);
        for &(c, a) in &evs {
            h = hash_extend(h, &KeyEvent { scancode: c, action: a, mods: Mods::NONE, tick: 0 });
        }
        assert_eq!(h, order_hash(evs));
    }

    #[test]
    fn record_roundtrip() {
        let ev = KeyEvent { scancode: 30, action: KeyAction::Press, mods: Mods::SHIFT, tick: 77 };
        let r = record(EVDEMO_KIND_KEY, 5, Some(&ev));
        assert_eq!(u32::from_le_bytes(r[4..8].try_into().unwrap()), 5);
        assert_eq!(KeyEvent::from_bytes(&r[8..]), Some(ev));
    }
}
