//! Small runtime shared by the bundled programs: globals in the data
//! segment, argv access and syscall wrappers that stage their arguments.
//!
//! Data segment layout:
//!
//! ```text
//! DATA_BASE + 0x000  64 u64 globals
//! DATA_BASE + 0x200  path scratch (256 B)
//! DATA_BASE + 0x300  exec argv pointers (17 x 8 B)
//! DATA_BASE + 0x400  exec argv strings (1 KB)
//! DATA_BASE + 0x800  output scratch (2 KB)
//! DATA_BASE + 0x1000 free for the program
//! ```

use crate::kernel::{Cpu, Step, DATA_BASE};
use crate::mem::Fault;
use crate::proc::*;

pub const VARS: u64 = DATA_BASE;
pub const PATH: u64 = DATA_BASE + 0x200;
pub const XARGV: u64 = DATA_BASE + 0x300;
pub const XSTRS: u64 = DATA_BASE + 0x400;
pub const OUT: u64 = DATA_BASE + 0x800;
pub const OUT_LEN: usize = 0x800;
pub const HEAP: u64 = DATA_BASE + 0x1000;

pub const ARGC: usize = 0;
pub const ARGV: usize = 1;
/// First global free for program use.
pub const V0: usize = 2;

pub type R = Result<Step, Fault>;

pub fn var(cpu: &Cpu, i: usize) -> Result<u64, Fault> {
    cpu.ld64(VARS + 8 * i as u64)
}

pub fn set(cpu: &mut Cpu, i: usize, v: u64) -> Result<(), Fault> {
    cpu.st64(VARS + 8 * i as u64, v)
}

/// Stashes argc/argv from the entry registers. Call in state 0.
pub fn save_args(cpu: &mut Cpu) -> Result<(), Fault> {
    let (argc, argv) = (cpu.r(0), cpu.r(1));
    set(cpu, ARGC, argc)?;
    set(cpu, ARGV, argv)
}

pub fn argc(cpu: &Cpu) -> Result<u64, Fault> {
    var(cpu, ARGC)
}

pub fn arg(cpu: &Cpu, i: u64) -> Result<Option<String>, Fault> {
    if i >= argc(cpu)? {
        return Ok(None);
    }
    let p = cpu.ld64(var(cpu, ARGV)? + 8 * i)?;
    Ok(Some(cpu.ld_str(p, 128)?))
}

pub fn arg_u64(cpu: &Cpu, i: u64, default: u64) -> Result<u64, Fault> {
    Ok(arg(cpu, i)?.and_then(|s| s.parse().ok()).unwrap_or(default))
}

pub fn put_str(cpu: &mut Cpu, va: u64, s: &str) -> Result<(), Fault> {
    let mut b = s.as_bytes().to_vec();
    b.push(0);
    cpu.st(va, &b)
}

pub fn exit(cpu: &Cpu, code: i64) -> R {
    Ok(cpu.sys(SYS_EXIT, &[code as u64]))
}

/// write(fd, s) through the output scratch; long text is cut.
pub fn print(cpu: &mut Cpu, fd: u64, s: &str) -> R {
    let b = &s.as_bytes()[..s.len().min(OUT_LEN)];
    cpu.st(OUT, b)?;
    Ok(cpu.sys(SYS_WRITE, &[fd, OUT, b.len() as u64]))
}

pub fn open(cpu: &mut Cpu, path: &str, flags: u64) -> R {
    put_str(cpu, PATH, path)?;
    Ok(cpu.sys(SYS_OPEN, &[PATH, flags]))
}

/// A syscall taking one path argument.
pub fn path_call(cpu: &mut Cpu, nr: u64, path: &str, extra: &[u64]) -> R {
    put_str(cpu, PATH, path)?;
    let mut a = vec![PATH];
    a.extend_from_slice(extra);
    Ok(cpu.sys(nr, &a))
}

pub fn exec(cpu: &mut Cpu, path: &str, args: &[String]) -> R {
    put_str(cpu, PATH, path)?;
    let mut p = XSTRS;
    for (i, a) in args.iter().take(16).enumerate() {
        put_str(cpu, p, a)?;
        cpu.st64(XARGV + 8 * i as u64, p)?;
        p += a.len() as u64 + 1;
    }
    cpu.st64(XARGV + 8 * args.len().min(16) as u64, 0)?;
    Ok(cpu.sys(SYS_EXEC, &[PATH, XARGV]))
}

pub fn sleep_ms(cpu: &Cpu, ms: u64) -> R {
    Ok(cpu.sys(SYS_SLEEP, &[ms]))
}

/// Moves to `state` and burns one tick, for transitions with no syscall.
pub fn jump(cpu: &mut Cpu, state: u64) -> R {
    cpu.goto(state);
    Ok(Step::Compute(1))
}

pub fn errno_name(e: i64) -> &'static str {
    use crate::vfs::errno::*;
    match -e {
        ENOENT => "no such file or directory",
        ENOTDIR => "not a directory",
        EISDIR => "is a directory",
        EEXIST => "file exists",
        ENOTEMPTY => "directory not empty",
        EFBIG => "file too large",
        ENOSPC => "no space left",
        EROFS => "read-only file system",
        EACCES | EPERM => "permission denied",
        EINVAL => "invalid argument",
        ENOSYS => "not implemented",
        _ => "error",
    }
}
