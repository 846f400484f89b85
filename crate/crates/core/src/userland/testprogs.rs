//! Small programs that exercise one kernel mechanism each.

use crate::kernel::{Cpu, Step};
use crate::mem::{PAGE_SIZE, STACK_LO, USER_TOP};
use crate::proc::*;
use crate::vfs::errno::ENOSYS;

use super::rt::{self, R, V0};

/// Syscall numbers probed by `sysprobe`; anything past the table must
/// come back as ENOSYS.
pub const PROBE_LIMIT: u64 = 32;

const A: usize = V0;
const B: usize = V0 + 1;
const I: usize = V0 + 2;
const PRESENT: usize = V0 + 3;
const STACKS: usize = V0 + 4;
const PEER: usize = V0 + 5;

/// `stackwalk`: stores once into every stack page below the initial one,
/// top down, so each store takes exactly one fault. Prints the page count.
pub fn stackwalk(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            rt::set(cpu, I, USER_TOP - 2 * PAGE_SIZE)?;
            rt::jump(cpu, 1)
        }
        1 => {
            let va = rt::var(cpu, I)?;
            if va < STACK_LO {
                let pages = (USER_TOP - STACK_LO) / PAGE_SIZE - 1;
                cpu.goto(2);
                return rt::print(cpu, 1, &format!("stackwalk pages {pages}\n"));
            }
            cpu.st64(va, va)?;
            rt::set(cpu, I, va - PAGE_SIZE)?;
            Ok(Step::Compute(1))
        }
        _ => rt::exit(cpu, 0),
    }
}

/// `jumpstack`: jumps into an unmapped stack page. The fetch fault maps
/// the page without execute permission, so the retry faults again and the
/// task is killed.
pub fn jumpstack(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            cpu.jump(STACK_LO + PAGE_SIZE);
            Ok(Step::Compute(1))
        }
        _ => rt::exit(cpu, 0),
    }
}

/// `deadlock`: two threads take two semaphores in opposite order.
pub fn deadlock(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            cpu.goto(1);
            Ok(cpu.sys(SYS_SEMCREATE, &[1]))
        }
        1 => {
            rt::set(cpu, A, cpu.ret() as u64)?;
            cpu.goto(2);
            Ok(cpu.sys(SYS_SEMCREATE, &[1]))
        }
        2 => {
            rt::set(cpu, B, cpu.ret() as u64)?;
            cpu.goto(3);
            Ok(cpu.sys(SYS_SBRK, &[2 * PAGE_SIZE]))
        }
        3 => {
            let base = cpu.ret();
            if base < 0 {
                return rt::exit(cpu, 1);
            }
            rt::set(cpu, STACKS, base as u64)?;
            cpu.goto(4);
            Ok(cpu.sys(SYS_CLONE, &[CLONE_VM, base as u64 + PAGE_SIZE]))
        }
        4 => match cpu.ret() {
            0 => {
                cpu.set_r(7, 0);
                rt::jump(cpu, 10)
            }
            r if r < 0 => rt::exit(cpu, 1),
            _ => {
                cpu.goto(5);
                Ok(cpu.sys(SYS_CLONE, &[CLONE_VM, rt::var(cpu, STACKS)? + 2 * PAGE_SIZE]))
            }
        },
        5 => match cpu.ret() {
            0 => {
                cpu.set_r(7, 1);
                rt::jump(cpu, 10)
            }
            r if r < 0 => rt::exit(cpu, 1),
            _ => {
                cpu.goto(6);
                Ok(cpu.sys(SYS_WAIT, &[0]))
            }
        },
        6 => {
            if cpu.ret() < 0 {
                return rt::exit(cpu, 0);
            }
            cpu.goto(6);
            Ok(cpu.sys(SYS_WAIT, &[0]))
        }
        // Thread r7 takes (first, second) then sleeps and takes the other.
        10 => {
            let first = if cpu.r(7) == 0 { A } else { B };
            cpu.goto(11);
            Ok(cpu.sys(SYS_SEMWAIT, &[rt::var(cpu, first)?]))
        }
        11 => {
            cpu.goto(12);
            rt::sleep_ms(cpu, 10)
        }
        12 => {
            let second = if cpu.r(7) == 0 { B } else { A };
            cpu.goto(13);
            Ok(cpu.sys(SYS_SEMWAIT, &[rt::var(cpu, second)?]))
        }
        _ => rt::exit(cpu, 0),
    }
}

pub const PINGPONG_ROUNDS: u64 = 1000;

/// `pingpong`: two threads hand a token back and forth through two
/// semaphores.
pub fn pingpong(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            cpu.goto(1);
            Ok(cpu.sys(SYS_SEMCREATE, &[0]))
        }
        1 => {
            rt::set(cpu, A, cpu.ret() as u64)?;
            cpu.goto(2);
            Ok(cpu.sys(SYS_SEMCREATE, &[0]))
        }
        2 => {
            rt::set(cpu, B, cpu.ret() as u64)?;
            cpu.goto(3);
            Ok(cpu.sys(SYS_SBRK, &[PAGE_SIZE]))
        }
        3 => {
            let base = cpu.ret();
            if base < 0 {
                return rt::exit(cpu, 1);
            }
            cpu.goto(4);
            Ok(cpu.sys(SYS_CLONE, &[CLONE_VM, base as u64 + PAGE_SIZE]))
        }
        4 => match cpu.ret() {
            0 => {
                cpu.set_r(6, 0);
                rt::jump(cpu, 20)
            }
            r if r < 0 => rt::exit(cpu, 1),
            r => {
                rt::set(cpu, PEER, r as u64)?;
                rt::jump(cpu, 10)
            }
        },
        // Main: ping, then wait for the pong.
        10 => {
            if rt::var(cpu, I)? == PINGPONG_ROUNDS {
                cpu.goto(12);
                return rt::print(cpu, 1, &format!("pingpong rounds {PINGPONG_ROUNDS}\n"));
            }
            cpu.goto(11);
            Ok(cpu.sys(SYS_SEMPOST, &[rt::var(cpu, A)?]))
        }
        11 => {
            rt::set(cpu, I, rt::var(cpu, I)? + 1)?;
            cpu.goto(10);
            Ok(cpu.sys(SYS_SEMWAIT, &[rt::var(cpu, B)?]))
        }
        12 => {
            cpu.goto(13);
            Ok(cpu.sys(SYS_WAIT, &[0]))
        }
        13 => rt::exit(cpu, 0),
        // Peer: r6 counts rounds.
        20 => {
            if cpu.r(6) == PINGPONG_ROUNDS {
                return rt::exit(cpu, 0);
            }
            cpu.goto(21);
            Ok(cpu.sys(SYS_SEMWAIT, &[rt::var(cpu, A)?]))
        }
        21 => {
            cpu.set_r(6, cpu.r(6) + 1);
            cpu.goto(20);
            Ok(cpu.sys(SYS_SEMPOST, &[rt::var(cpu, B)?]))
        }
        _ => rt::exit(cpu, 99),
    }
}

/// Harmless arguments for each syscall `sysprobe` tries.
fn probe_args(nr: u64) -> [u64; 3] {
    match nr {
        SYS_SBRK | SYS_SLEEP | SYS_KILL | SYS_WAIT => [0, 0, 0],
        SYS_CLONE => [0, 0, 0],
        SYS_FBCTL => [99, 0, 0],
        SYS_SEMWAIT | SYS_SEMPOST | SYS_SEMFREE => [9999, 0, 0],
        SYS_SEMCREATE => [0, 0, 0],
        SYS_CLOSE | SYS_READ | SYS_WRITE | SYS_LSEEK | SYS_DUP | SYS_FSTAT => [99, 0, 0],
        _ => [0, 0, 0],
    }
}

/// `sysprobe`: issues every syscall number below `PROBE_LIMIT` (exit last)
/// and prints `sys <nr> <name> <ret>` for each, then
/// `sysprobe present <n>` counting the ones that did not return ENOSYS.
pub fn sysprobe(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            rt::set(cpu, I, 0)?;
            rt::jump(cpu, 1)
        }
        1 => {
            let nr = rt::var(cpu, I)?;
            if nr == SYS_EXIT {
                rt::set(cpu, I, nr + 1)?;
                return rt::jump(cpu, 1);
            }
            if nr == PROBE_LIMIT {
                // exit is present by construction.
                let n = rt::var(cpu, PRESENT)? + 1;
                cpu.goto(4);
                return rt::print(cpu, 1, &format!("sysprobe present {n}\n"));
            }
            cpu.goto(2);
            Ok(cpu.sys(nr, &probe_args(nr)))
        }
        2 => {
            let r = cpu.ret();
            let nr = rt::var(cpu, I)?;
            if nr == SYS_FORK && r == 0 {
                return rt::exit(cpu, 0);
            }
            if r != -ENOSYS {
                rt::set(cpu, PRESENT, rt::var(cpu, PRESENT)? + 1)?;
            }
            rt::set(cpu, I, nr + 1)?;
            let name = syscall_name(nr).unwrap_or("none");
            cpu.goto(1);
            rt::print(cpu, 1, &format!("sys {nr} {name} {r}\n"))
        }
        _ => rt::exit(cpu, 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_has_sixteen_pages() {
        assert_eq!((USER_TOP - STACK_LO) / PAGE_SIZE, 16);
    }
}
