//! The guest execution model.
//!
//! A user program is a registry-backed step function. Each call runs on a
//! [`Cpu`] holding a working copy of the task's registers and a write
//! buffer: loads and stores are translated through the task's address
//! space, stores are permission-checked immediately but only committed
//! when the step returns `Ok`. A faulting step therefore has no effect
//! and simply re-executes once the kernel has handled the fault.
//!
//! The program counter encodes the behavior's state: `pc = CODE_BASE +
//! 4 * state`. The kernel checks execute permission at `pc` before every
//! step, so jumping into a non-executable page faults like a real fetch.

use crate::hwsim::Tick;
use crate::mem::{Access, AsId, DeviceBus, Fault, Memory};

pub const CODE_BASE: u64 = 0x1000;
pub const DATA_BASE: u64 = 0x10000;
pub const NREGS: usize = 8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ctx {
    pub pc: u64,
    pub sp: u64,
    pub r: [u64; NREGS],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Step {
    /// Pure computation costing this many ticks.
    Compute(Tick),
    /// Trap into the kernel. The result lands in r0.
    Syscall { nr: u64, args: [u64; 6] },
    /// User-mode data cache clean over `[va, va+len)`. Covering the mapped
    /// framebuffer makes the written pixels visible.
    CacheFlush { va: u64, len: u64 },
}

pub type GuestFn = fn(&mut Cpu) -> Result<Step, Fault>;

pub struct Cpu<'a> {
    pub ctx: Ctx,
    mem: &'a Memory,
    asid: AsId,
    bus: &'a dyn DeviceBus,
    writes: Vec<(u64, Vec<u8>)>,
}

impl<'a> Cpu<'a> {
    pub fn new(ctx: Ctx, mem: &'a Memory, asid: AsId, bus: &'a dyn DeviceBus) -> Self {
        Self { ctx, mem, asid, bus, writes: Vec::new() }
    }

    pub fn state(&self) -> u64 {
        self.ctx.pc.wrapping_sub(CODE_BASE) / 4
    }

    pub fn goto(&mut self, state: u64) {
        self.ctx.pc = CODE_BASE + 4 * state;
    }

    /// Sets the program counter to an arbitrary address.
    pub fn jump(&mut self, va: u64) {
        self.ctx.pc = va;
    }

    pub fn r(&self, i: usize) -> u64 {
        self.ctx.r[i]
    }

    pub fn set_r(&mut self, i: usize, v: u64) {
        self.ctx.r[i] = v;
    }

    /// The last syscall's return value.
    pub fn ret(&self) -> i64 {
        self.ctx.r[0] as i64
    }

    pub fn ld(&self, va: u64, n: usize) -> Result<Vec<u8>, Fault> {
        let mut buf = vec![0u8; n];
        self.mem.read_user(self.asid, va, &mut buf, self.bus)?;
        let end = va + n as u64;
        for (wva, data) in &self.writes {
            let wend = wva + data.len() as u64;
            if *wva < end && wend > va {
                let lo = va.max(*wva);
                let hi = end.min(wend);
                buf[(lo - va) as usize..(hi - va) as usize]
                    .copy_from_slice(&data[(lo - wva) as usize..(hi - wva) as usize]);
            }
        }
        Ok(buf)
    }

    pub fn ld64(&self, va: u64) -> Result<u64, Fault> {
        Ok(u64::from_le_bytes(self.ld(va, 8)?.try_into().unwrap()))
    }

    pub fn ld32(&self, va: u64) -> Result<u32, Fault> {
        Ok(u32::from_le_bytes(self.ld(va, 4)?.try_into().unwrap()))
    }

    /// NUL-terminated string of at most `max` bytes.
    pub fn ld_str(&self, va: u64, max: usize) -> Result<String, Fault> {
        let mut out = Vec::new();
        let mut p = va;
        while out.len() < max {
            // Never read past the page holding `p`: strings can end flush
            // against the top of the address space.
            let to_page_end = (crate::mem::PAGE_SIZE - (p % crate::mem::PAGE_SIZE)) as usize;
            let chunk = 32.min(max - out.len()).min(to_page_end);
            let b = self.ld(p, chunk)?;
            if let Some(i) = b.iter().position(|&c| c == 0) {
                out.extend_from_slice(&b[..i]);
                return Ok(String::from_utf8_lossy(&out).into_owned());
            }
            out.extend_from_slice(&b);
            p += chunk as u64;
        }
        Ok(String::from_utf8_lossy(&out).into_owned())
    }

    pub fn st(&mut self, va: u64, data: &[u8]) -> Result<(), Fault> {
        self.mem.probe(self.asid, va, data.len() as u64, Access::W)?;
        self.writes.push((va, data.to_vec()));
        Ok(())
    }

    pub fn st64(&mut self, va: u64, v: u64) -> Result<(), Fault> {
        self.st(va, &v.to_le_bytes())
    }

    pub fn st32(&mut self, va: u64, v: u32) -> Result<(), Fault> {
        self.st(va, &v.to_le_bytes())
    }

    /// Pushes `data` on the stack (8-byte aligned) and returns its address.
    pub fn push(&mut self, data: &[u8]) -> Result<u64, Fault> {
        let sp = (self.ctx.sp - data.len() as u64) & !7;
        self.st(sp, data)?;
        self.ctx.sp = sp;
        Ok(sp)
    }

    pub fn sys(&self, nr: u64, args: &[u64]) -> Step {
        let mut a = [0u64; 6];
        a[..args.len()].copy_from_slice(args);
        Step::Syscall { nr, args: a }
    }

    pub fn into_parts(self) -> (Ctx, Vec<(u64, Vec<u8>)>) {
        (self.ctx, self.writes)
    }
}
