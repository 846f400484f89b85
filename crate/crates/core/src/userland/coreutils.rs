//! ls, cat, echo, mkdir, rm.

use crate::kernel::Cpu;
use crate::proc::*;
use crate::vfs::{DirRecord, Kind, DIRENT_LEN, STAT_LEN};

use super::rt::{self, R, V0};

const FD: usize = V0;
const IDX: usize = V0 + 1;
const STATUS: usize = V0 + 2;

const STATBUF: u64 = rt::HEAP;
const BUF: u64 = rt::HEAP + 0x100;
const BUFLEN: u64 = 0x2000;

fn kind_name(k: Kind) -> &'static str {
    match k {
        Kind::File => "file",
        Kind::Dir => "dir",
        Kind::Device => "dev",
    }
}

/// `ls [path]`: prints `name kind size` per entry.
pub fn ls(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            let path = rt::arg(cpu, 1)?.unwrap_or_else(|| ".".into());
            cpu.goto(1);
            rt::open(cpu, &path, O_RDONLY)
        }
        1 => {
            let fd = cpu.ret();
            if fd < 0 {
                cpu.goto(9);
                return rt::print(cpu, 2, &format!("ls: {}\n", rt::errno_name(fd)));
            }
            rt::set(cpu, FD, fd as u64)?;
            cpu.goto(2);
            Ok(cpu.sys(SYS_FSTAT, &[fd as u64, STATBUF]))
        }
        2 => {
            let st = cpu.ld(STATBUF, STAT_LEN)?;
            if st[0] != Kind::Dir.code() {
                let name = rt::arg(cpu, 1)?.unwrap_or_default();
                let size = u32::from_le_bytes(st[4..8].try_into().unwrap());
                let kind = if st[0] == Kind::Device.code() { "dev" } else { "file" };
                cpu.goto(8);
                return rt::print(cpu, 1, &format!("{name} {kind} {size}\n"));
            }
            rt::jump(cpu, 3)
        }
        3 => {
            cpu.goto(4);
            Ok(cpu.sys(SYS_READ, &[rt::var(cpu, FD)?, BUF, (DIRENT_LEN * 32) as u64]))
        }
        4 => {
            let n = cpu.ret();
            if n <= 0 {
                return rt::jump(cpu, 8);
            }
            let b = cpu.ld(BUF, n as usize)?;
            let text: String = b
                .chunks(DIRENT_LEN)
                .filter_map(DirRecord::from_bytes)
                .map(|r| format!("{} {} {}\n", r.name, kind_name(r.kind), r.size))
                .collect();
            cpu.goto(3);
            rt::print(cpu, 1, &text)
        }
        8 => rt::exit(cpu, 0),
        9 => rt::exit(cpu, 1),
        _ => rt::exit(cpu, 99),
    }
}

/// `cat [file...]`: with no files, copies stdin.
pub fn cat(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            if rt::argc(cpu)? < 2 {
                rt::set(cpu, FD, 0)?;
                rt::set(cpu, IDX, u64::MAX)?;
                return rt::jump(cpu, 3);
            }
            rt::set(cpu, IDX, 1)?;
            rt::jump(cpu, 1)
        }
        1 => {
            let i = rt::var(cpu, IDX)?;
            match rt::arg(cpu, i)? {
                None => rt::exit(cpu, rt::var(cpu, STATUS)? as i64),
                Some(path) => {
                    cpu.goto(2);
                    rt::open(cpu, &path, O_RDONLY)
                }
            }
        }
        2 => {
            let fd = cpu.ret();
            if fd < 0 {
                rt::set(cpu, STATUS, 1)?;
                rt::set(cpu, IDX, rt::var(cpu, IDX)? + 1)?;
                cpu.goto(1);
                return rt::print(cpu, 2, &format!("cat: {}\n", rt::errno_name(fd)));
            }
            rt::set(cpu, FD, fd as u64)?;
            rt::jump(cpu, 3)
        }
        3 => {
            cpu.goto(4);
            Ok(cpu.sys(SYS_READ, &[rt::var(cpu, FD)?, BUF, BUFLEN]))
        }
        4 => {
            let n = cpu.ret();
            if n < 0 {
                rt::set(cpu, STATUS, 1)?;
            }
            if n <= 0 {
                if rt::var(cpu, IDX)? == u64::MAX {
                    return rt::exit(cpu, rt::var(cpu, STATUS)? as i64);
                }
                cpu.goto(5);
                return Ok(cpu.sys(SYS_CLOSE, &[rt::var(cpu, FD)?]));
            }
            cpu.goto(3);
            Ok(cpu.sys(SYS_WRITE, &[1, BUF, n as u64]))
        }
        5 => {
            rt::set(cpu, IDX, rt::var(cpu, IDX)? + 1)?;
            rt::jump(cpu, 1)
        }
        _ => rt::exit(cpu, 99),
    }
}

pub fn echo(cpu: &mut Cpu) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            let mut words = Vec::new();
            for i in 1..rt::argc(cpu)? {
                words.extend(rt::arg(cpu, i)?);
            }
            cpu.goto(1);
            rt::print(cpu, 1, &(words.join(" ") + "\n"))
        }
        _ => rt::exit(cpu, 0),
    }
}

/// One path syscall per argument; any failure makes the exit status 1.
fn per_path(cpu: &mut Cpu, nr: u64, tool: &str) -> R {
    match cpu.state() {
        0 => {
            rt::save_args(cpu)?;
            rt::set(cpu, IDX, 1)?;
            rt::jump(cpu, 1)
        }
        1 => {
            let i = rt::var(cpu, IDX)?;
            match rt::arg(cpu, i)? {
                None => rt::exit(cpu, rt::var(cpu, STATUS)? as i64),
                Some(p) => {
                    cpu.goto(2);
                    rt::path_call(cpu, nr, &p, &[])
                }
            }
        }
        2 => {
            let r = cpu.ret();
            let i = rt::var(cpu, IDX)?;
            rt::set(cpu, IDX, i + 1)?;
            if r < 0 {
                rt::set(cpu, STATUS, 1)?;
                let p = rt::arg(cpu, i)?.unwrap_or_default();
                cpu.goto(1);
                return rt::print(cpu, 2, &format!("{tool}: {p}: {}\n", rt::errno_name(r)));
            }
            rt::jump(cpu, 1)
        }
        _ => rt::exit(cpu, 99),
    }
}

pub fn mkdir(cpu: &mut Cpu) -> R {
    per_path(cpu, SYS_MKDIR, "mkdir")
}

pub fn rm(cpu: &mut Cpu) -> R {
    per_path(cpu, SYS_UNLINK, "rm")
}
