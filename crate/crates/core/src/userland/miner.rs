//! `miner nthreads difficulty [limit]`: a proof-of-work search.
//!
//! Finds the smallest nonce whose FNV-1a 64 hash of its little-endian bytes
//! has at least `difficulty` leading zero bits. Thread `i` of `n` tries
//! nonces `i, i+n, i+2n, ...`; the best nonce found so far is published
//! under a semaphore mutex and each thread stops once its next nonce is
//! past it, or after `limit` attempts. The main thread is worker 0 and
//! prints `miner nonce <n|none> hashes <h> ticks <t>` when all are done.

use crate::kernel::{Cpu, Step};
use crate::proc::*;

use super::rt::{self, R, V0};

pub const HASHES_PER_STEP: u64 = 256;
/// Ticks charged per step of `HASHES_PER_STEP` hashes.
pub const STEP_COST: u64 = 512;
pub const MAX_THREADS: u64 = 16;
const THREAD_STACK: u64 = 4096;

const NTHREADS: usize = V0;
const DIFF: usize = V0 + 1;
const LIMIT: usize = V0 + 2;
const BEST: usize = V0 + 3;
const MUTEX: usize = V0 + 4;
const START: usize = V0 + 5;
const STACKS: usize = V0 + 6;
const SPAWNED: usize = V0 + 7;
const REAPED: usize = V0 + 8;
/// Per-thread hash counts, `MAX_THREADS` slots.
const COUNTS: usize = V0 + 16;

/// Per-thread registers: r7 is the thread index, r6 the attempt counter
/// and r5 a nonce that met the difficulty.
const R_IDX: usize = 7;
const R_K: usize = 6;
const R_FOUND: usize = 5;

pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in data {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn miner_hash(nonce: u64) -> u64 {
    fnv1a64(&nonce.to_le_bytes())
}

pub fn leading_zero_bits(h: u64) -> u32 {
    h.leading_zeros()
}

pub fn run(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            let n = rt::arg_u64(cpu, 1, 1)?.clamp(1, MAX_THREADS);
            rt::set(cpu, NTHREADS, n)?;
            rt::set(cpu, DIFF, rt::arg_u64(cpu, 2, 16)?.min(64))?;
            rt::set(cpu, LIMIT, rt::arg_u64(cpu, 3, u64::MAX)?)?;
            rt::set(cpu, BEST, u64::MAX)?;
            cpu.goto(1);
            Ok(cpu.sys(SYS_SEMCREATE, &[1]))
        }
        1 => {
            rt::set(cpu, MUTEX, cpu.ret() as u64)?;
            cpu.goto(2);
            Ok(cpu.sys(SYS_UPTIME, &[]))
        }
        2 => {
            rt::set(cpu, START, cpu.ret() as u64)?;
            let extra = rt::var(cpu, NTHREADS)? - 1;
            if extra == 0 {
                return rt::jump(cpu, 5);
            }
            cpu.goto(3);
            Ok(cpu.sys(SYS_SBRK, &[extra * THREAD_STACK]))
        }
        3 => {
            let base = cpu.ret();
            if base < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, STACKS, base as u64)?;
            rt::set(cpu, SPAWNED, 1)?;
            rt::jump(cpu, 4)
        }
        // Spawn workers 1..n; each inherits its index in r7.
        4 => {
            let i = rt::var(cpu, SPAWNED)?;
            if i == rt::var(cpu, NTHREADS)? {
                return rt::jump(cpu, 5);
            }
            rt::set(cpu, SPAWNED, i + 1)?;
            cpu.set_r(R_IDX, i);
            cpu.goto(6);
            let top = rt::var(cpu, STACKS)? + i * THREAD_STACK;
            Ok(cpu.sys(SYS_CLONE, &[CLONE_VM, top]))
        }
        6 => {
            let r = cpu.ret();
            if r == 0 {
                cpu.set_r(R_K, 0);
                return rt::jump(cpu, 10);
            }
            if r < 0 {
                return rt::exit(cpu, 1);
            }
            rt::jump(cpu, 4)
        }
        5 => {
            cpu.set_r(R_IDX, 0);
            cpu.set_r(R_K, 0);
            rt::jump(cpu, 10)
        }
        // Search.
        10 => {
            let (idx, k) = (cpu.r(R_IDX), cpu.r(R_K));
            let n = rt::var(cpu, NTHREADS)?;
            let (diff, limit, best) = (rt::var(cpu, DIFF)? as u32, rt::var(cpu, LIMIT)?, rt::var(cpu, BEST)?);
            let mut done = 0;
            let mut found = None;
            let mut stop = false;
            while done < HASHES_PER_STEP {
                let kk = k + done;
                let nonce = idx + kk * n;
                if kk >= limit || nonce > best {
                    stop = true;
                    break;
                }
                done += 1;
                if leading_zero_bits(miner_hash(nonce)) >= diff {
                    found = Some(nonce);
                    break;
                }
            }
            cpu.set_r(R_K, k + done);
            if let Some(nonce) = found {
                cpu.set_r(R_FOUND, nonce);
                cpu.goto(11);
            } else if stop {
                cpu.goto(20);
            }
            Ok(Step::Compute(STEP_COST * done.max(1) / HASHES_PER_STEP))
        }
        11 => {
            cpu.goto(12);
            Ok(cpu.sys(SYS_SEMWAIT, &[rt::var(cpu, MUTEX)?]))
        }
        12 => {
            let nonce = cpu.r(R_FOUND);
            if nonce < rt::var(cpu, BEST)? {
                rt::set(cpu, BEST, nonce)?;
            }
            cpu.goto(20);
            Ok(cpu.sys(SYS_SEMPOST, &[rt::var(cpu, MUTEX)?]))
        }
        // Finished: record the count; workers exit, main reaps them.
        20 => {
            let idx = cpu.r(R_IDX);
            rt::set(cpu, COUNTS + idx as usize, cpu.r(R_K))?;
            if idx != 0 {
                return rt::exit(cpu, 0);
            }
            rt::jump(cpu, 21)
        }
        21 => {
            if rt::var(cpu, REAPED)? + 1 >= rt::var(cpu, NTHREADS)? {
                cpu.goto(23);
                return Ok(cpu.sys(SYS_UPTIME, &[]));
            }
            cpu.goto(22);
            Ok(cpu.sys(SYS_WAIT, &[0]))
        }
        22 => {
            if cpu.ret() < 0 {
                cpu.goto(23);
                return Ok(cpu.sys(SYS_UPTIME, &[]));
            }
            rt::set(cpu, REAPED, rt::var(cpu, REAPED)? + 1)?;
            rt::jump(cpu, 21)
        }
        23 => {
            let ticks = (cpu.ret() as u64).saturating_sub(rt::var(cpu, START)?);
            let n = rt::var(cpu, NTHREADS)?;
            let mut hashes = 0;
            for i in 0..n {
                hashes += rt::var(cpu, COUNTS + i as usize)?;
            }
            let best = rt::var(cpu, BEST)?;
            let nonce = if best == u64::MAX { "none".to_string() } else { best.to_string() };
            cpu.goto(24);
            rt::print(cpu, 1, &format!("miner nonce {nonce} hashes {hashes} ticks {ticks}\n"))
        }
        24 => rt::exit(cpu, 0),
        _ => rt::exit(cpu, 99),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn leading_zeros() {
        assert_eq!(leading_zero_bits(u64::MAX), 0);
        assert_eq!(leading_zero_bits(1), 63);
        assert_eq!(leading_zero_bits(0), 64);
    }
}
