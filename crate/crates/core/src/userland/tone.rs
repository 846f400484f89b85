//! `tone freq secs [div] [nothread]`: plays a sine for `secs` seconds.
//!
//! Samples are produced at `22050 / div` per second of uptime, keeping a
//! fixed lead over playback. By default a producer fills a shared ring and
//! a cloned worker drains it into `/dev/sb`, with a mutex semaphore and a
//! counting semaphore between them. `nothread` writes straight from the
//! producer. At the end the program waits for the hardware to drain and
//! prints `tone consumed <n> underruns <u>`, exiting 1 if any underrun
//! occurred.

use crate::hwsim::audio::DEFAULT_SAMPLE_RATE;
use crate::kernel::Cpu;
use crate::mem::Fault;
use crate::proc::*;

use super::rt::{self, R, V0};

/// Samples queued ahead of the playback clock.
pub const LEAD: u64 = 2048;
pub const AMPLITUDE: f64 = 8000.0;
const BATCH: u64 = 512;
const RING_CAP: u64 = 4096;
const WORKER_STACK: u64 = 4096;

// Producer globals.
const FREQ: usize = V0;
const RATE: usize = V0 + 1;
const TOTAL: usize = V0 + 2;
const START: usize = V0 + 3;
const FD: usize = V0 + 4;
const THREADED: usize = V0 + 5;
const WORKER: usize = V0 + 6;
const BATCH_N: usize = V0 + 7;
// Shared between producer and worker.
const PROD: usize = V0 + 10;
const CONS: usize = V0 + 11;
const DONE: usize = V0 + 12;
const MUTEX: usize = V0 + 13;
const ITEMS: usize = V0 + 14;
// Worker globals.
const W_LEN: usize = V0 + 20;
const W_OFF: usize = V0 + 21;
const W_EXIT: usize = V0 + 22;

const RING: u64 = rt::HEAP;
const STAGE: u64 = rt::HEAP + 2 * RING_CAP;
const BUF: u64 = rt::HEAP + 4 * RING_CAP;
const PROCBUF: u64 = rt::HEAP + 6 * RING_CAP;

/// Sample `i` of a sine at `freq` Hz played at `rate` samples per second.
pub fn sample(i: u64, freq: u64, rate: u64) -> i16 {
    let t = i as f64 / rate as f64;
    (AMPLITUDE * (std::f64::consts::TAU * freq as f64 * t).sin()) as i16
}

/// How many samples should exist `elapsed` ticks after the start.
pub fn due(total: u64, rate: u64, elapsed: u64) -> u64 {
    total.min(LEAD + rate * elapsed / crate::hwsim::TICKS_PER_SEC)
}

fn batch(cpu: &mut Cpu, from: u64, n: u64, to: u64) -> Result<(), Fault> {
    let (freq, rate) = (rt::var(cpu, FREQ)?, rt::var(cpu, RATE)?);
    let b: Vec<u8> = (from..from + n).flat_map(|i| sample(i, freq, rate).to_le_bytes()).collect();
    cpu.st(to, &b)
}

/// Splits sample indices `[lo, hi)` into runs that are contiguous in the ring.
fn ring_spans(lo: u64, hi: u64) -> Vec<(u64, u64)> {
    let mut out = Vec::new();
    let mut i = lo;
    while i < hi {
        let end = hi.min((i / RING_CAP + 1) * RING_CAP);
        out.push((i, end));
        i = end;
    }
    out
}

pub fn run(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            let freq = rt::arg_u64(cpu, 1, 440)?;
            let secs = rt::arg_u64(cpu, 2, 1)?;
            let div = rt::arg_u64(cpu, 3, 1)?.max(1);
            let threaded = rt::arg(cpu, 4)?.as_deref() != Some("nothread");
            let rate = DEFAULT_SAMPLE_RATE / div;
            rt::set(cpu, FREQ, freq)?;
            rt::set(cpu, RATE, rate)?;
            rt::set(cpu, TOTAL, rate * secs)?;
            rt::set(cpu, THREADED, threaded as u64)?;
            cpu.goto(1);
            rt::open(cpu, "/dev/sb", O_WRONLY)
        }
        1 => {
            let fd = cpu.ret();
            if fd < 0 {
                cpu.goto(90);
                return rt::print(cpu, 2, &format!("tone: /dev/sb: {}\n", rt::errno_name(fd)));
            }
            rt::set(cpu, FD, fd as u64)?;
            if rt::var(cpu, THREADED)? == 0 {
                cpu.goto(9);
                return Ok(cpu.sys(SYS_UPTIME, &[]));
            }
            cpu.goto(2);
            Ok(cpu.sys(SYS_SEMCREATE, &[1]))
        }
        2 => {
            rt::set(cpu, MUTEX, cpu.ret() as u64)?;
            cpu.goto(3);
            Ok(cpu.sys(SYS_SEMCREATE, &[0]))
        }
        3 => {
            rt::set(cpu, ITEMS, cpu.ret() as u64)?;
            cpu.goto(4);
            Ok(cpu.sys(SYS_SBRK, &[WORKER_STACK]))
        }
        4 => {
            let base = cpu.ret();
            if base < 0 {
                return rt::exit(cpu, 1);
            }
            cpu.goto(5);
            Ok(cpu.sys(SYS_CLONE, &[CLONE_VM, base as u64 + WORKER_STACK]))
        }
        5 => {
            let r = cpu.ret();
            if r == 0 {
                return rt::jump(cpu, 40);
            }
            if r < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, WORKER, r as u64)?;
            cpu.goto(9);
            Ok(cpu.sys(SYS_UPTIME, &[]))
        }
        9 => {
            rt::set(cpu, START, cpu.ret() as u64)?;
            rt::jump(cpu, 10)
        }
        // Producer loop: find out how far behind we are.
        10 => {
            cpu.goto(11);
            Ok(cpu.sys(SYS_UPTIME, &[]))
        }
        11 => {
            let elapsed = (cpu.ret() as u64).saturating_sub(rt::var(cpu, START)?);
            let (total, rate) = (rt::var(cpu, TOTAL)?, rt::var(cpu, RATE)?);
            let prod = rt::var(cpu, PROD)?;
            if prod >= total {
                return rt::jump(cpu, 30);
            }
            let want = due(total, rate, elapsed).saturating_sub(prod).min(BATCH);
            if want == 0 {
                cpu.goto(10);
                return rt::sleep_ms(cpu, 1);
            }
            rt::set(cpu, BATCH_N, want)?;
            if rt::var(cpu, THREADED)? == 0 {
                batch(cpu, prod, want, BUF)?;
                cpu.goto(12);
                return Ok(cpu.sys(SYS_WRITE, &[rt::var(cpu, FD)?, BUF, want * 2]));
            }
            cpu.goto(20);
            Ok(cpu.sys(SYS_SEMWAIT, &[rt::var(cpu, MUTEX)?]))
        }
        // Direct write; a short write leaves the rest for the next round.
        12 => {
            let n = cpu.ret();
            if n < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, PROD, rt::var(cpu, PROD)? + n as u64 / 2)?;
            rt::jump(cpu, 10)
        }
        // Holding the mutex: append to the ring if there is room.
        20 => {
            let (prod, cons) = (rt::var(cpu, PROD)?, rt::var(cpu, CONS)?);
            let n = rt::var(cpu, BATCH_N)?.min(RING_CAP - (prod - cons));
            if n > 0 {
                for (lo, hi) in ring_spans(prod, prod + n) {
                    batch(cpu, lo, hi - lo, RING + 2 * (lo % RING_CAP))?;
                }
                rt::set(cpu, PROD, prod + n)?;
            }
            rt::set(cpu, BATCH_N, n)?;
            cpu.goto(21);
            Ok(cpu.sys(SYS_SEMPOST, &[rt::var(cpu, MUTEX)?]))
        }
        21 => {
            if rt::var(cpu, BATCH_N)? == 0 {
                cpu.goto(10);
                return rt::sleep_ms(cpu, 1);
            }
            cpu.goto(10);
            Ok(cpu.sys(SYS_SEMPOST, &[rt::var(cpu, ITEMS)?]))
        }
        // All samples produced.
        30 => {
            if rt::var(cpu, THREADED)? == 0 {
                return rt::jump(cpu, 34);
            }
            cpu.goto(31);
            Ok(cpu.sys(SYS_SEMWAIT, &[rt::var(cpu, MUTEX)?]))
        }
        31 => {
            rt::set(cpu, DONE, 1)?;
            cpu.goto(32);
            Ok(cpu.sys(SYS_SEMPOST, &[rt::var(cpu, MUTEX)?]))
        }
        32 => {
            cpu.goto(33);
            Ok(cpu.sys(SYS_SEMPOST, &[rt::var(cpu, ITEMS)?]))
        }
        33 => {
            cpu.goto(35);
            Ok(cpu.sys(SYS_WAIT, &[0]))
        }
        35 => {
            let r = cpu.ret();
            if r < 0 || r as u64 == rt::var(cpu, WORKER)? {
                return rt::jump(cpu, 34);
            }
            cpu.goto(35);
            Ok(cpu.sys(SYS_WAIT, &[0]))
        }
        34 => {
            cpu.goto(36);
            Ok(cpu.sys(SYS_CLOSE, &[rt::var(cpu, FD)?]))
        }
        // Poll until the hardware has played everything.
        36 => {
            cpu.goto(37);
            rt::open(cpu, "/proc/audio", O_RDONLY)
        }
        37 => {
            let fd = cpu.ret();
            if fd < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, FD, fd as u64)?;
            cpu.goto(38);
            Ok(cpu.sys(SYS_READ, &[fd as u64, PROCBUF, 128]))
        }
        38 => {
            let n = cpu.ret().max(0) as usize;
            let text = String::from_utf8_lossy(&cpu.ld(PROCBUF, n)?).into_owned();
            let w: Vec<u64> = text.split_whitespace().filter_map(|s| s.parse().ok()).collect();
            let (consumed, underruns, buffered) = match w.as_slice() {
                [c, u, b] => (*c, *u, *b),
                _ => (0, 0, 0),
            };
            rt::set(cpu, BATCH_N, buffered)?;
            rt::set(cpu, W_LEN, consumed)?;
            rt::set(cpu, W_OFF, underruns)?;
            cpu.goto(39);
            Ok(cpu.sys(SYS_CLOSE, &[rt::var(cpu, FD)?]))
        }
        39 => {
            if rt::var(cpu, BATCH_N)? > 0 {
                cpu.goto(36);
                return rt::sleep_ms(cpu, 10);
            }
            let (c, u) = (rt::var(cpu, W_LEN)?, rt::var(cpu, W_OFF)?);
            cpu.goto(if u > 0 { 90 } else { 91 });
            rt::print(cpu, 1, &format!("tone consumed {c} underruns {u}\n"))
        }
        // Worker: wait for items, copy them out under the mutex, write.
        40 => {
            cpu.goto(41);
            Ok(cpu.sys(SYS_SEMWAIT, &[rt::var(cpu, ITEMS)?]))
        }
        41 => {
            cpu.goto(42);
            Ok(cpu.sys(SYS_SEMWAIT, &[rt::var(cpu, MUTEX)?]))
        }
        42 => {
            let (prod, cons) = (rt::var(cpu, PROD)?, rt::var(cpu, CONS)?);
            let n = prod - cons;
            let mut b = Vec::with_capacity(2 * n as usize);
            for (lo, hi) in ring_spans(cons, prod) {
                b.extend(cpu.ld(RING + 2 * (lo % RING_CAP), 2 * (hi - lo) as usize)?);
            }
            cpu.st(STAGE, &b)?;
            rt::set(cpu, CONS, prod)?;
            rt::set(cpu, W_LEN, 2 * n)?;
            rt::set(cpu, W_OFF, 0)?;
            rt::set(cpu, W_EXIT, rt::var(cpu, DONE)?)?;
            cpu.goto(43);
            Ok(cpu.sys(SYS_SEMPOST, &[rt::var(cpu, MUTEX)?]))
        }
        43 => {
            let (len, off) = (rt::var(cpu, W_LEN)?, rt::var(cpu, W_OFF)?);
            if off >= len {
                if rt::var(cpu, W_EXIT)? != 0 {
                    return rt::exit(cpu, 0);
                }
                return rt::jump(cpu, 40);
            }
            cpu.goto(44);
            Ok(cpu.sys(SYS_WRITE, &[rt::var(cpu, FD)?, STAGE + off, len - off]))
        }
        44 => {
            let n = cpu.ret();
            if n < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, W_OFF, rt::var(cpu, W_OFF)? + n as u64)?;
            rt::jump(cpu, 43)
        }
        90 => rt::exit(cpu, 1),
        91 => rt::exit(cpu, 0),
        _ => rt::exit(cpu, 99),
    }
}
