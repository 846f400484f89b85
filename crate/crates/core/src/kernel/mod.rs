//! The kernel: boot, the multicore event loop, interrupts and task
//! lifecycle.
//!
//! Every core keeps its own clock. The loop always runs the busy core whose
//! clock is furthest behind, one atomic step at a time, and only lets the
//! hardware clock move to its next event once no busy core is still behind
//! that event. A step never sees a hardware event from its own future; an
//! interrupt that lands mid-step is handled right after it.

mod console;
mod file;
mod kthread;
mod sys;

pub mod guest;

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::devio::{AudioRing, EventQueue};
use crate::fatfs::{mkfat::mkfat_with, FatFs};
use crate::hwsim::fb::FB_PHYS_BASE;
use crate::hwsim::{BlockDev, CostModel, Irq, IrqLine, KeyAction, KeyEvent, Machine, Mods, Tick, TimerId};
use crate::mem::{Access, AsId, Fault, FaultOutcome, Memory, Perms, DEFAULT_TOTAL_PAGES, PAGE_SHIFT, PAGE_SIZE, USER_TOP};
use crate::proc::{ProgramImage, SemTable, EXIT_KILLED};
use crate::profile::Profile;
use crate::sched::{Scheduler, TaskKind, TaskState, Tid, QUANTUM_TICKS};
use crate::trace::{TraceKind, TraceRing, TRACE_CAPACITY};
use crate::userland::{self, AppSpec};
use crate::vfs::procfs::CpuAccounting;
use crate::vfs::{errno, FsError, Pipe, Storage};
use crate::wm::Wm;
use crate::xv6fs::{self, Xv6Fs};

pub use console::{Console, CONSOLE_COLS, CONSOLE_ROWS};
pub use file::{Dev, FdTable, FileId, FileObj, OpenFile};
pub use guest::{Cpu, Ctx, GuestFn, Step, CODE_BASE, DATA_BASE};
pub use kthread::{DonutThread, KNext, KStep, KThread, WmThread};

/// Timer id namespaces (high 32 bits of a [`TimerId`]).
pub const TIMER_QUANTUM: u64 = 1;
pub const TIMER_SLEEP: u64 = 2;
pub const TIMER_FRAME: u64 = 3;

pub fn timer_id(kind: u64, n: u64) -> TimerId {
    TimerId(kind << 32 | n)
}

/// p1 renders one frame per FRAME timer interrupt.
pub const FRAME_PERIOD: Tick = 33_000;
/// Cost charged for rendering one donut frame.
pub const FRAME_COST: Tick = 2_000;
/// Base cost of a syscall, before device time.
pub const SYSCALL_COST: Tick = 2;
/// Cost of taking and handling a page fault.
pub const FAULT_COST: Tick = 2;

/// Wait channels: `kind << 48 | id`.
pub mod chan {
    pub const WAIT: u64 = 1;
    pub const PIPE_R: u64 = 2;
    pub const PIPE_W: u64 = 3;
    pub const SLEEP: u64 = 4;
    pub const EVENTS: u64 = 5;
    pub const EVENT1: u64 = 6;
    pub const CONSOLE: u64 = 7;
    pub const AUDIO: u64 = 8;
    pub const SEM: u64 = 9;

    const NAMES: [&str; 10] = ["?", "wait", "pipe_r", "pipe_w", "sleep", "events", "event1", "console", "audio", "sem"];

    pub fn make(kind: u64, id: u64) -> u64 {
        kind << 48 | id
    }

    pub fn describe(ch: u64) -> String {
        let kind = (ch >> 48) as usize;
        let id = ch & ((1 << 48) - 1);
        format!("{}:{id}", NAMES.get(kind).copied().unwrap_or("?"))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BootError {
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("bad config: {0}")]
    BadConfig(String),
}

impl From<FsError> for BootError {
    fn from(e: FsError) -> Self {
        BootError::BadImage(e.to_string())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SpawnError {
    #[error("no such program: {0}")]
    NotFound(String),
    #[error("{0} is not available in profile {1}")]
    Unavailable(String, Profile),
    #[error("profile {0} has no user tasks")]
    NoUserTasks(Profile),
    #[error("exec failed: errno {0}")]
    Exec(i64),
}

#[derive(Clone, Debug)]
pub struct BootConfig {
    pub profile: Profile,
    pub seed: u64,
    /// Core count; only p5 may run more than one.
    pub cores: Option<usize>,
    /// xv6fs ramdisk image; defaults to the built-in app manifest.
    pub ramdisk: Option<Vec<u8>>,
    /// FAT32 volume image; defaults to an empty 64 MB volume.
    pub fat: Option<Vec<u8>>,
    pub fat_bypass: bool,
    pub wm: bool,
    pub sysmon: bool,
    /// Command line of the first user task (p4/p5). Defaults to `sh`.
    pub init: Option<Vec<String>>,
    pub total_pages: u32,
}

impl BootConfig {
    pub fn new(profile: Profile) -> Self {
        Self {
            profile,
            seed: 0,
            cores: None,
            ramdisk: None,
            fat: None,
            fat_bypass: true,
            wm: true,
            sysmon: true,
            init: None,
            total_pages: DEFAULT_TOTAL_PAGES,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn cores(mut self, n: usize) -> Self {
        self.cores = Some(n);
        self
    }

    pub fn init(mut self, argv: &[&str]) -> Self {
        self.init = Some(argv.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn no_wm(mut self) -> Self {
        self.wm = false;
        self.sysmon = false;
        self
    }

    pub fn no_sysmon(mut self) -> Self {
        self.sysmon = false;
        self
    }
}

pub const DEFAULT_FAT_BYTES: u64 = 64 << 20;

/// A syscall parked on a channel, re-executed when the task runs again.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Pending {
    pub nr: u64,
    pub args: [u64; 6],
    pub progress: u64,
    pub started: bool,
}

pub(crate) enum Body {
    User { prog: GuestFn, key: String },
    Kernel(Option<Box<dyn KThread>>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ProcStats {
    pub steps: u64,
    pub syscalls: u64,
    pub faults: u64,
    pub ticks: Tick,
}

pub(crate) struct Proc {
    /// Thread-group leader; surfaces and getpid belong to it.
    pub tgid: Tid,
    pub asid: Option<AsId>,
    pub fdt: Option<u32>,
    pub cwd: String,
    pub ctx: Ctx,
    pub body: Body,
    pub pending: Option<Pending>,
    pub ready_at: Tick,
    pub kstack: Option<u32>,
    pub stats: ProcStats,
}

/// Outcome of one syscall invocation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum SysOut {
    Ret(i64),
    Block(u64),
    Sleep(Tick),
    Yield(i64),
    Exit,
}

pub struct Kernel {
    pub cfg: BootConfig,
    pub profile: Profile,
    pub machine: Machine,
    pub mem: Memory,
    pub sched: Scheduler,
    pub trace: TraceRing,
    pub storage: Storage,
    pub xv6: Option<Xv6Fs>,
    pub fat: Option<FatFs>,
    pub acct: CpuAccounting,
    pub wm: Option<Wm>,
    pub console: Console,
    pub events: EventQueue,
    pub audio_ring: AudioRing,
    pub sems: SemTable,
    pub(crate) procs: BTreeMap<Tid, Proc>,
    pub(crate) files: BTreeMap<FileId, OpenFile>,
    pub(crate) fdts: BTreeMap<u32, FdTable>,
    pub(crate) pipes: BTreeMap<u32, Pipe>,
    pub(crate) events_open: u32,
    pub(crate) sb_open: u32,
    pub(crate) audio_closing: bool,
    pub(crate) wm_input: VecDeque<KeyEvent>,
    next_file: FileId,
    next_fdt: u32,
    next_pipe: u32,
    core_t: Vec<Tick>,
    trace_mark: Vec<Tick>,
    /// Time of the step or interrupt being executed.
    pub(crate) t: Tick,
    exits: BTreeMap<Tid, i32>,
    frames: u64,
    fiq_presses: u64,
    pub panics: Vec<String>,
    dropped_keys: u64,
}

pub fn default_ramdisk() -> Vec<u8> {
    xv6fs::mkfs(&userland::manifest(), xv6fs::DEFAULT_BLOCKS, xv6fs::DEFAULT_INODES).expect("built-in manifest fits")
}

pub fn default_fat() -> Vec<u8> {
    mkfat_with(DEFAULT_FAT_BYTES, &userland::fat_manifest()).expect("64 MB volume")
}

fn pages_for(len: u64) -> u64 {
    len.div_ceil(PAGE_SIZE)
}

impl Kernel {
    pub fn boot(cfg: BootConfig) -> Result<Kernel, BootError> {
        let profile = cfg.profile;
        let ncores = cfg.cores.unwrap_or(profile.default_cores());
        if ncores == 0 || ncores > 8 {
            return Err(BootError::BadConfig(format!("{ncores} cores")));
        }
        if ncores > 1 && profile != Profile::P5 {
            return Err(BootError::BadConfig(format!("{profile} is single-core")));
        }
        let machine = Machine::new(ncores);
        let (w, h) = (machine.fb.width(), machine.fb.height());
        let mut k = Kernel {
            profile,
            machine,
            mem: Memory::new(cfg.total_pages, cfg.seed),
            sched: Scheduler::new(ncores),
            trace: TraceRing::with_capacity(TRACE_CAPACITY),
            storage: Storage::new(),
            xv6: None,
            fat: None,
            acct: CpuAccounting::new(ncores),
            wm: None,
            console: Console::new(profile),
            events: EventQueue::default(),
            audio_ring: AudioRing::default(),
            sems: SemTable::default(),
            procs: BTreeMap::new(),
            files: BTreeMap::new(),
            fdts: BTreeMap::new(),
            pipes: BTreeMap::new(),
            events_open: 0,
            sb_open: 0,
            audio_closing: false,
            wm_input: VecDeque::new(),
            next_file: 1,
            next_fdt: 1,
            next_pipe: 1,
            core_t: vec![0; ncores],
            trace_mark: vec![0; ncores],
            t: 0,
            exits: BTreeMap::new(),
            frames: 0,
            fiq_presses: 0,
            panics: Vec::new(),
            dropped_keys: 0,
            cfg,
        };
        if profile.has_vfs() {
            let img = k.cfg.ramdisk.clone().unwrap_or_else(default_ramdisk);
            let dev = k.storage.attach(BlockDev::from_bytes("ramdisk", img, CostModel::RAMDISK));
            k.xv6 = Some(Xv6Fs::mount(&mut k.storage, dev)?);
        }
        if profile.has_fat() {
            let img = k.cfg.fat.clone().unwrap_or_else(default_fat);
            let dev = k.storage.attach(BlockDev::from_bytes("sd", img, CostModel::SD_CARD));
            let mut fat = FatFs::mount(&mut k.storage, dev)?;
            fat.set_bypass(k.cfg.fat_bypass);
            k.fat = Some(fat);
        }
        k.storage.take_io_ticks();
        if profile.has_wm() && k.cfg.wm {
            let mut wm = Wm::new(w, h);
            let sid = console::create_console_surface(&mut wm);
            k.console.attach_surface(sid);
            k.wm = Some(wm);
        }
        k.console.redraw(&mut k.machine.fb, k.wm.as_mut());
        match profile {
            Profile::P1 => k.machine.arm_timer(timer_id(TIMER_FRAME, 0), FRAME_PERIOD, 0),
            Profile::P2 => {
                for (id, prio) in [(0u32, 1u32), (1, 2)] {
                    k.spawn_kthread(Box::new(DonutThread::new(id, prio)), prio);
                }
            }
            Profile::P3 => {
                for (id, prio) in [("0", 1u32), ("1", 2)] {
                    k.spawn_prio(&["donut", id], prio).map_err(|e| BootError::BadImage(e.to_string()))?;
                }
            }
            Profile::P4 | Profile::P5 => {
                if k.wm.is_some() {
                    k.spawn_kthread(Box::new(WmThread), 1);
                }
                let init = k.cfg.init.clone().unwrap_or_else(|| vec!["sh".to_string()]);
                let argv: Vec<&str> = init.iter().map(String::as_str).collect();
                k.spawn(&argv).map_err(|e| BootError::BadImage(e.to_string()))?;
                if k.wm.is_some() && k.cfg.sysmon {
                    k.spawn(&["sysmon"]).map_err(|e| BootError::BadImage(e.to_string()))?;
                }
            }
        }
        Ok(k)
    }

    pub fn ncores(&self) -> usize {
        self.sched.ncores()
    }

    pub fn now(&self) -> Tick {
        self.machine.now()
    }

    pub fn core_time(&self, c: usize) -> Tick {
        self.core_t[c]
    }

    /// Exit code of a finished task, if it has exited.
    pub fn exit_code(&self, tid: Tid) -> Option<i32> {
        self.exits.get(&tid).copied()
    }

    pub fn is_live(&self, tid: Tid) -> bool {
        self.procs.contains_key(&tid)
    }

    pub fn frames_rendered(&self) -> u64 {
        self.frames
    }

    pub fn dropped_keys(&self) -> u64 {
        self.dropped_keys
    }

    pub fn proc_stats(&self, tid: Tid) -> Option<ProcStats> {
        self.procs.get(&tid).map(|p| p.stats)
    }

    pub fn asid_of(&self, tid: Tid) -> Option<AsId> {
        self.procs.get(&tid).and_then(|p| p.asid)
    }

    pub fn program_of(&self, tid: Tid) -> Option<&str> {
        match &self.procs.get(&tid)?.body {
            Body::User { key, .. } => Some(key),
            Body::Kernel(_) => None,
        }
    }

    /// Emits a trace record on `core` at the current execution time.
    pub(crate) fn emit(&mut self, core: usize, kind: TraceKind, payload: [u64; 2]) {
        let t = self.t.max(self.trace_mark[core]);
        self.trace_mark[core] = t;
        self.trace.emit(t, core, kind, payload);
    }

    // ---- task creation -------------------------------------------------

    pub(crate) fn alloc_proc(&mut self, kind: TaskKind, name: &str, prio: u32, parent: Tid) -> Result<Tid, i64> {
        let tid = self.sched.alloc_task(kind, name, prio, parent).map_err(|_| errno::EAGAIN)?;
        let kstack = match self.mem.alloc_kernel_page() {
            Ok(p) => p,
            Err(_) => {
                self.sched.make_zombie(tid, 0, self.t);
                self.sched.reap(tid);
                return Err(errno::ENOMEM);
            }
        };
        self.procs.insert(
            tid,
            Proc {
                tgid: tid,
                asid: None,
                fdt: None,
                cwd: "/".into(),
                ctx: Ctx::default(),
                body: Body::Kernel(None),
                pending: None,
                ready_at: self.t,
                kstack: Some(kstack),
                stats: ProcStats::default(),
            },
        );
        Ok(tid)
    }

    pub fn spawn_kthread(&mut self, kt: Box<dyn KThread>, prio: u32) -> Tid {
        let name = kt.name().to_string();
        let tid = self.alloc_proc(TaskKind::KernelThread, &name, prio, 0).expect("boot-time kthread");
        self.procs.get_mut(&tid).unwrap().body = Body::Kernel(Some(kt));
        self.sched.activate(tid).expect("embryo");
        tid
    }

    /// Starts a user program with the console on fds 0..2 and no parent.
    pub fn spawn(&mut self, argv: &[&str]) -> Result<Tid, SpawnError> {
        self.spawn_prio(argv, 1)
    }

    pub fn spawn_prio(&mut self, argv: &[&str], prio: u32) -> Result<Tid, SpawnError> {
        if !self.profile.has_user_tasks() {
            return Err(SpawnError::NoUserTasks(self.profile));
        }
        let name = *argv.first().ok_or_else(|| SpawnError::NotFound(String::new()))?;
        let base = name.rsplit('/').next().unwrap_or(name);
        let args: Vec<String> = argv.iter().map(|s| s.to_string()).collect();
        let loaded = if self.profile.has_vfs() {
            let path = if name.starts_with('/') { name.to_string() } else { format!("/{name}") };
            match self.read_image("/", &path) {
                Ok(img) => self.load(&img, &args),
                Err(e) if e == errno::ENOENT => return Err(SpawnError::NotFound(name.into())),
                Err(e) => Err(e),
            }
        } else {
            // File-less exec of an image bundled with the kernel.
            let spec = userland::lookup(base).ok_or_else(|| SpawnError::NotFound(name.into()))?;
            if spec.min_profile > self.profile {
                return Err(SpawnError::Unavailable(name.into(), self.profile));
            }
            let img = userland::image(spec);
            self.load(&img, &args)
        };
        let (asid, ctx, spec) = loaded.map_err(SpawnError::Exec)?;
        if spec.min_profile > self.profile {
            self.mem.as_release(asid);
            return Err(SpawnError::Unavailable(name.into(), self.profile));
        }
        let tid = match self.alloc_proc(TaskKind::User, base, prio, 0) {
            Ok(t) => t,
            Err(e) => {
                self.mem.as_release(asid);
                return Err(SpawnError::Exec(e));
            }
        };
        let fdt = self.new_fdt();
        if self.profile.has_vfs() {
            for _ in 0..3 {
                let fid = self.open_dev_file(Dev::Console, true, true).expect("console");
                self.fd_install(fdt, fid).expect("fresh table");
            }
        }
        let p = self.procs.get_mut(&tid).unwrap();
        p.asid = Some(asid);
        p.fdt = Some(fdt);
        p.ctx = ctx;
        p.body = Body::User { prog: spec.run, key: spec.name.to_string() };
        p.ready_at = self.machine.now().max(self.t);
        self.sched.activate(tid).expect("embryo");
        Ok(tid)
    }

    /// Reads a program image file through the VFS.
    pub(crate) fn read_image(&mut self, cwd: &str, path: &str) -> Result<ProgramImage, i64> {
        let fid = self.open_path(cwd, path, crate::proc::O_RDONLY).map_err(|e| e.errno())?;
        let mut bytes = Vec::new();
        let res = loop {
            match self.file_read(fid, 64 * 1024, 0) {
                Ok(b) if b.is_empty() => break Ok(()),
                Ok(b) => bytes.extend_from_slice(&b),
                Err(file::IoErr::Fs(e)) => break Err(e.errno()),
                Err(file::IoErr::Block(_)) => break Err(errno::EINVAL),
            }
            if bytes.len() > 16 << 20 {
                break Err(errno::E2BIG);
            }
        };
        self.file_close(fid);
        res?;
        ProgramImage::parse(&bytes).map_err(|_| errno::ENOEXEC)
    }

    /// Builds a fresh address space for `img` with `argv` on the stack.
    /// Nothing of the caller is touched; on error the new space is freed.
    pub(crate) fn load(&mut self, img: &ProgramImage, argv: &[String]) -> Result<(AsId, Ctx, &'static AppSpec), i64> {
        let spec = userland::lookup(&img.key).ok_or(errno::ENOEXEC)?;
        if argv.len() < img.entry_args as usize {
            return Err(errno::EINVAL);
        }
        if argv.len() > 16 || argv.iter().map(|a| a.len() + 1).sum::<usize>() > 2048 {
            return Err(errno::E2BIG);
        }
        let asid = self.mem.new_space();
        match self.populate(asid, img, argv) {
            Ok(ctx) => Ok((asid, ctx, spec)),
            Err(e) => {
                self.mem.as_release(asid);
                Err(e)
            }
        }
    }

    fn populate(&mut self, asid: AsId, img: &ProgramImage, argv: &[String]) -> Result<Ctx, i64> {
        let oom = |_| errno::ENOMEM;
        for seg in &img.segments {
            let lo = seg.va >> PAGE_SHIFT;
            for vpn in lo..lo + pages_for(seg.mem_len) {
                self.mem.map_new(asid, vpn, Perms::RW, true).map_err(oom)?;
            }
            self.mem.write_user(asid, seg.va, &seg.data, &mut self.machine.fb).map_err(|_| errno::EFAULT)?;
            for vpn in lo..lo + pages_for(seg.mem_len) {
                self.mem.set_perms(asid, vpn, seg.perms);
            }
        }
        let top = img.top();
        if let Some(space) = self.mem.space_mut(asid) {
            space.regions.code_lo = img.segments.iter().map(|s| s.va).min().unwrap_or(0);
            space.regions.code_hi = top;
            space.regions.brk = top;
        }
        // One stack page, left holding whatever the allocator gave it.
        let stack_vpn = (USER_TOP >> PAGE_SHIFT) - 1;
        self.mem.map_new(asid, stack_vpn, Perms::RW, false).map_err(oom)?;
        let mut sp = USER_TOP;
        let mut ptrs = Vec::with_capacity(argv.len() + 1);
        for a in argv {
            let mut b = a.as_bytes().to_vec();
            b.push(0);
            sp -= b.len() as u64;
            self.mem.write_user(asid, sp, &b, &mut self.machine.fb).map_err(|_| errno::EFAULT)?;
            ptrs.push(sp);
        }
        ptrs.push(0);
        sp &= !15;
        let table: Vec<u8> = ptrs.iter().flat_map(|p| p.to_le_bytes()).collect();
        sp -= table.len() as u64;
        sp &= !15;
        self.mem.write_user(asid, sp, &table, &mut self.machine.fb).map_err(|_| errno::EFAULT)?;
        let mut ctx = Ctx { pc: img.entry(), sp, r: [0; 8] };
        ctx.r[0] = argv.len() as u64;
        ctx.r[1] = sp;
        if !self.profile.has_vfs() {
            // The file-less exec hands over the framebuffer directly.
            let g = self.machine.fb.geometry();
            let len = self.machine.fb.size_bytes() as u64;
            self.mem.map_device(asid, FB_PHYS_BASE, len, Perms::RW).map_err(oom)?;
            ctx.r[2] = FB_PHYS_BASE;
            ctx.r[3] = g.width as u64;
            ctx.r[4] = g.height as u64;
            ctx.r[5] = g.stride as u64;
        }
        Ok(ctx)
    }

    // ---- exit ------------------------------------------------------------

    /// Terminates `tid`: closes its files, drops its address space and
    /// wakes a waiting parent. Orphans are reaped at once.
    pub(crate) fn do_exit(&mut self, tid: Tid, code: i32) {
        let Some(p) = self.procs.remove(&tid) else { return };
        if let Some(f) = p.fdt {
            self.fdt_release(f);
        }
        if let Some(a) = p.asid {
            self.mem.as_release(a);
        }
        if let Some(ks) = p.kstack {
            self.mem.free_kernel_page(ks);
        }
        self.machine.cancel_timer(timer_id(TIMER_SLEEP, tid as u64));
        let parent = self.sched.task(tid).map(|t| t.parent).unwrap_or(0);
        self.sched.make_zombie(tid, code, self.t);
        self.exits.insert(tid, code);
        let kids: Vec<Tid> = self.sched.children(tid).map(|t| t.tid).collect();
        for kid in kids {
            if let Some(t) = self.sched.task_mut(kid) {
                t.parent = 0;
            }
            self.sched.reap(kid);
        }
        if parent == 0 || !self.procs.contains_key(&parent) {
            self.sched.reap(tid);
        } else {
            self.wake(chan::make(chan::WAIT, parent as u64));
        }
    }

    /// Kills a task from outside (ctl or `kill`).
    pub fn kill(&mut self, tid: Tid) -> bool {
        if !self.procs.contains_key(&tid) {
            return false;
        }
        if let Some(t) = self.sched.task_mut(tid) {
            t.killed = true;
        }
        self.do_exit(tid, EXIT_KILLED);
        true
    }

    pub(crate) fn wake(&mut self, ch: u64) {
        let t = self.t;
        for tid in self.sched.wakeup(ch) {
            if let Some(p) = self.procs.get_mut(&tid) {
                p.ready_at = p.ready_at.max(t);
            }
        }
    }

    // ---- event loop ------------------------------------------------------

    /// Advances the simulation by exactly `dt` ticks.
    pub fn run(&mut self, dt: Tick) {
        let target = self.machine.now() + dt;
        self.run_until(target);
    }

    pub fn run_until(&mut self, target: Tick) {
        loop {
            self.dispatch_idle();
            let next_hw = self.machine.next_event();
            let cand = (0..self.ncores()).filter(|&c| self.sched.current(c).is_some()).min_by_key(|&c| (self.core_t[c], c));
            if let Some(c) = cand {
                let t = self.core_t[c];
                if t < target && next_hw.is_none_or(|h| t < h) {
                    self.step_core(c);
                    continue;
                }
            }
            match next_hw {
                Some(h) if h <= target => {
                    let irqs = self.machine.advance_to(h.max(self.machine.now()));
                    self.handle_irqs(irqs);
                }
                _ => {
                    let irqs = self.machine.advance_to(target);
                    self.handle_irqs(irqs);
                    if self.machine.next_event().is_none_or(|h| h > target) {
                        self.dispatch_idle();
                        let behind = (0..self.ncores()).any(|c| self.sched.current(c).is_some() && self.core_t[c] < target);
                        if !behind {
                            break;
                        }
                    }
                }
            }
        }
    }

    /// Runs until `pred` holds or `limit` ticks pass, checking every `chunk`.
    pub fn run_while(&mut self, limit: Tick, chunk: Tick, mut pred: impl FnMut(&Kernel) -> bool) -> bool {
        let end = self.now() + limit;
        while self.now() < end {
            if !pred(self) {
                return true;
            }
            self.run(chunk.min(end - self.now()));
        }
        !pred(self)
    }

    fn dispatch_idle(&mut self) {
        for c in 0..self.ncores() {
            if self.sched.current(c).is_none() {
                if let Some(sw) = self.sched.dispatch(c) {
                    self.on_switch(sw.core, sw.from, sw.to);
                }
            }
        }
    }

    fn on_switch(&mut self, c: usize, from: Option<Tid>, to: Option<Tid>) {
        let now = self.machine.now();
        if let Some(to) = to {
            let ready = self.procs.get(&to).map_or(0, |p| p.ready_at);
            self.core_t[c] = self.core_t[c].max(now).max(ready);
            let qt = timer_id(TIMER_QUANTUM, c as u64);
            if self.machine.timer_deadline(qt).is_none() {
                self.machine.arm_timer(qt, self.core_t[c] + QUANTUM_TICKS, c);
            }
        }
        let saved = self.t;
        self.t = self.core_t[c].max(now);
        self.emit(c, TraceKind::SchedSwitch, [from.unwrap_or(0) as u64, to.unwrap_or(0) as u64]);
        self.t = saved;
    }

    fn step_core(&mut self, c: usize) {
        let Some(tid) = self.sched.current(c) else { return };
        let t0 = self.core_t[c];
        self.t = t0;
        self.storage.take_io_ticks();
        let is_kernel = matches!(self.procs.get(&tid).map(|p| &p.body), Some(Body::Kernel(_)));
        let cost = if is_kernel {
            self.kthread_step(c, tid)
        } else if self.procs.get(&tid).is_some_and(|p| p.pending.is_some()) {
            let pend = self.procs.get_mut(&tid).unwrap().pending.take().unwrap();
            self.run_syscall(c, tid, pend)
        } else {
            self.user_step(c, tid)
        }
        .max(1);
        if let Some(p) = self.procs.get_mut(&tid) {
            p.stats.steps += 1;
            p.stats.ticks += cost;
        }
        self.core_t[c] = t0 + cost;
        self.acct.charge(c, t0, cost);
    }

    fn kthread_step(&mut self, c: usize, tid: Tid) -> Tick {
        let mut kt = match self.procs.get_mut(&tid).map(|p| &mut p.body) {
            Some(Body::Kernel(kt)) => kt.take().expect("kthread present"),
            _ => return 1,
        };
        let st = kt.step(self, c, tid);
        if let Some(Body::Kernel(slot)) = self.procs.get_mut(&tid).map(|p| &mut p.body) {
            *slot = Some(kt);
        }
        let t0 = self.t;
        match st.next {
            KNext::Continue => {}
            KNext::Sleep(ticks) => self.sleep_current(c, tid, t0 + ticks.max(1)),
            KNext::Block(ch) => {
                self.sched.block_current(c, ch, TaskState::Blocked);
            }
            KNext::Exit(code) => self.do_exit(tid, code),
        }
        st.cost
    }

    fn sleep_current(&mut self, c: usize, tid: Tid, deadline: Tick) {
        let home = self.sched.task(tid).map_or(c, |t| t.home_core);
        self.machine.arm_timer(timer_id(TIMER_SLEEP, tid as u64), deadline, home);
        self.sched.block_current(c, chan::make(chan::SLEEP, tid as u64), TaskState::Sleeping);
    }

    fn user_step(&mut self, c: usize, tid: Tid) -> Tick {
        let p = &self.procs[&tid];
        let Some(asid) = p.asid else { return 1 };
        let Body::User { prog, .. } = p.body else { return 1 };
        let ctx = p.ctx;
        if let Err(f) = self.mem.translate(asid, ctx.pc, Access::X) {
            return self.user_fault(c, tid, asid, f);
        }
        let (res, ctx2, writes) = {
            let mut cpu = Cpu::new(ctx, &self.mem, asid, &self.machine.fb);
            let r = prog(&mut cpu);
            let (c2, w) = cpu.into_parts();
            (r, c2, w)
        };
        let step = match res {
            Ok(s) => s,
            Err(f) => return self.user_fault(c, tid, asid, f),
        };
        for (va, data) in writes {
            if let Err(f) = self.mem.write_user(asid, va, &data, &mut self.machine.fb) {
                return self.user_fault(c, tid, asid, f);
            }
        }
        self.procs.get_mut(&tid).unwrap().ctx = ctx2;
        if let Some(t) = self.sched.task_mut(tid) {
            t.fault = Default::default();
        }
        match step {
            Step::Compute(n) => n,
            Step::CacheFlush { va, len } => {
                let fb = self.mem.space(asid).and_then(|s| s.regions.fb);
                if let Some((lo, hi)) = fb {
                    if va < hi && va.saturating_add(len) > lo {
                        self.machine.fb.flush();
                    }
                }
                1 + len / PAGE_SIZE
            }
            Step::Syscall { nr, args } => self.run_syscall(c, tid, Pending { nr, args, progress: 0, started: false }),
        }
    }

    fn user_fault(&mut self, c: usize, tid: Tid, asid: AsId, f: Fault) -> Tick {
        let acc = match f.access {
            Access::R => 0,
            Access::W => 1,
            Access::X => 2,
        };
        self.emit(c, TraceKind::Fault, [f.va, acc]);
        if let Some(p) = self.procs.get_mut(&tid) {
            p.stats.faults += 1;
        }
        let mut rec = self.sched.task(tid).map(|t| t.fault).unwrap_or_default();
        let out = self.mem.handle_fault(asid, &mut rec, f.va);
        if let Some(t) = self.sched.task_mut(tid) {
            t.fault = rec;
        }
        if let FaultOutcome::Killed(code) = out {
            self.do_exit(tid, code);
        }
        FAULT_COST
    }

    fn run_syscall(&mut self, c: usize, tid: Tid, mut pend: Pending) -> Tick {
        if !pend.started {
            pend.started = true;
            self.emit(c, TraceKind::SyscallEnter, [pend.nr, pend.args[0]]);
        }
        if let Some(p) = self.procs.get_mut(&tid) {
            p.stats.syscalls += 1;
        }
        self.sched.push_off(c);
        let out = self.syscall(c, tid, &mut pend);
        self.pop_off(c);
        let cost = SYSCALL_COST + self.storage.take_io_ticks();
        match out {
            SysOut::Ret(v) | SysOut::Yield(v) => {
                if let Some(p) = self.procs.get_mut(&tid) {
                    p.ctx.r[0] = v as u64;
                    p.pending = None;
                }
                self.emit(c, TraceKind::SyscallExit, [pend.nr, v as u64]);
                if matches!(out, SysOut::Yield(_)) && self.sched.current(c) == Some(tid) {
                    if let Some(sw) = self.sched.preempt(c) {
                        if sw.to != Some(tid) {
                            self.on_switch(c, sw.from, sw.to);
                        }
                    }
                }
            }
            SysOut::Block(ch) => {
                if let Some(p) = self.procs.get_mut(&tid) {
                    p.pending = Some(pend);
                }
                self.sched.block_current(c, ch, TaskState::Blocked);
            }
            SysOut::Sleep(deadline) => {
                if let Some(p) = self.procs.get_mut(&tid) {
                    p.ctx.r[0] = 0;
                    p.pending = None;
                }
                self.emit(c, TraceKind::SyscallExit, [pend.nr, 0]);
                self.sleep_current(c, tid, deadline);
            }
            SysOut::Exit => {}
        }
        cost
    }

    // ---- interrupts ------------------------------------------------------

    pub fn push_off(&mut self, core: usize) -> u32 {
        self.sched.push_off(core)
    }

    /// Drops one level of masking; at depth 0 deferred interrupts run.
    pub fn pop_off(&mut self, core: usize) -> u32 {
        let depth = self.sched.pop_off(core).expect("pop_off at depth 0");
        if depth == 0 {
            let deferred = self.machine.irq_controller().take_deferred(core);
            for irq in deferred {
                self.handle_irq(irq);
            }
        }
        depth
    }

    fn handle_irqs(&mut self, irqs: Vec<Irq>) {
        for irq in irqs {
            if !irq.line.is_fiq() && self.sched.irqs_masked(irq.target_core) {
                self.machine.irq_controller().defer(irq);
            } else {
                self.handle_irq(irq);
            }
        }
    }

    fn handle_irq(&mut self, irq: Irq) {
        let c = irq.target_core;
        let saved = self.t;
        self.t = irq.tick.max(self.machine.now());
        self.emit(c, TraceKind::Irq, [irq.line.id() as u64, irq.timer.map_or(0, |t| t.0)]);
        match irq.line {
            IrqLine::Timer(_) => {
                let id = irq.timer.map_or(0, |t| t.0);
                match id >> 32 {
                    TIMER_QUANTUM => self.quantum_irq(c),
                    TIMER_SLEEP => {
                        let tid = (id & 0xFFFF_FFFF) as Tid;
                        self.wake(chan::make(chan::SLEEP, tid as u64));
                    }
                    TIMER_FRAME => self.frame_irq(c),
                    _ => {}
                }
            }
            IrqLine::Keyboard => {
                for ev in self.machine.take_key_events() {
                    self.route_key(ev);
                }
            }
            IrqLine::AudioDma => {
                self.audio_top_up();
                self.wake(chan::make(chan::AUDIO, 0));
            }
            IrqLine::Block | IrqLine::FiqPanic => {}
        }
        self.t = saved;
    }

    fn quantum_irq(&mut self, c: usize) {
        let t = self.t;
        if let Some(sw) = self.sched.timer_tick(c) {
            self.on_switch(c, sw.from, sw.to);
        }
        if self.sched.has_work(c) {
            self.machine.arm_timer(timer_id(TIMER_QUANTUM, c as u64), t + QUANTUM_TICKS, c);
        }
    }

    /// p1: the frame is drawn inside the timer interrupt handler.
    fn frame_irq(&mut self, c: usize) {
        let px = userland::donut::render(self.frames);
        kthread::blit_tile(&mut self.machine.fb, 0, &px);
        self.machine.fb.flush();
        self.frames += 1;
        self.acct.charge(c, self.t, FRAME_COST);
        self.machine.arm_timer(timer_id(TIMER_FRAME, 0), self.t + FRAME_PERIOD, c);
    }

    fn route_key(&mut self, ev: KeyEvent) {
        if !self.profile.has_vfs() {
            self.dropped_keys += 1;
            return;
        }
        if self.wm.is_some() {
            if self.events_open > 0 {
                self.events.push(ev);
                self.wake(chan::make(chan::EVENTS, 0));
            }
            self.wm_input.push_back(ev);
            return;
        }
        if self.events_open > 0 {
            self.events.push(ev);
            self.wake(chan::make(chan::EVENTS, 0));
        } else {
            self.console_key(ev);
        }
    }

    pub(crate) fn audio_top_up(&mut self) {
        let space = self.machine.audio.space();
        if space > 0 && !self.audio_ring.is_empty() {
            let samples = self.audio_ring.take(space);
            let n = self.machine.audio_push(&samples, self.t);
            if n < samples.len() {
                self.audio_ring.unget(&samples[n..]);
            }
        }
        if self.audio_closing && self.audio_ring.is_empty() {
            self.machine.audio.stop_when_empty();
            self.audio_closing = false;
        }
    }

    // ---- outside stimuli -------------------------------------------------

    pub fn inject_key(&mut self, code: u16, action: KeyAction, mods: Mods) -> Result<(), crate::hwsim::HwError> {
        self.machine.inject_key(code, action, mods)
    }

    /// Types ASCII text as press/release pairs, with shift where needed.
    pub fn type_text(&mut self, text: &str) -> Result<usize, crate::hwsim::HwError> {
        use crate::hwsim::kbd::scancode::{from_ascii, LEFTSHIFT};
        let mut n = 0;
        for b in text.bytes() {
            let Some((code, shift)) = from_ascii(b) else { continue };
            let mods = if shift { Mods::SHIFT } else { Mods::NONE };
            if shift {
                self.machine.inject_key(LEFTSHIFT, KeyAction::Press, Mods::SHIFT)?;
            }
            self.machine.inject_key(code, KeyAction::Press, mods)?;
            self.machine.inject_key(code, KeyAction::Release, mods)?;
            if shift {
                self.machine.inject_key(LEFTSHIFT, KeyAction::Release, Mods::NONE)?;
            }
            n += 1;
        }
        Ok(n)
    }

    /// The panic button: an FIQ that is never masked. Returns the dump.
    pub fn panic_button(&mut self) -> String {
        let irq = self.machine.raise_fiq();
        let c = irq.target_core;
        self.fiq_presses += 1;
        let saved = self.t;
        self.t = self.machine.now().max(self.core_t[c]);
        self.emit(c, TraceKind::Irq, [irq.line.id() as u64, self.fiq_presses]);
        self.t = saved;
        let mut out = format!("panic: fiq {} on core {c} at tick {}\n", self.fiq_presses, self.machine.now());
        for core in 0..self.ncores() {
            match self.sched.current(core) {
                Some(tid) => {
                    let name = self.sched.task(tid).map_or("?", |t| t.name.as_str());
                    out += &format!("core {core} running {tid} {name} depth {}\n", self.sched.core(core).irq_depth);
                }
                None => out += &format!("core {core} idle depth {}\n", self.sched.core(core).irq_depth),
            }
        }
        for t in self.sched.tasks() {
            let w = t.wchan.map_or("-".to_string(), chan::describe);
            out += &format!("task {} {} core {} wchan {w} {}\n", t.tid, t.state.name(), t.home_core, t.name);
        }
        out += "trace:\n";
        out += &self.trace.dump_text(32);
        self.panics.push(out.clone());
        out
    }

    // ---- introspection ---------------------------------------------------

    /// One line per task: `tid state core name`.
    pub fn ps(&self) -> Vec<String> {
        self.sched
            .tasks()
            .map(|t| {
                let core = (0..self.ncores()).find(|&c| self.sched.current(c) == Some(t.tid)).unwrap_or(t.home_core);
                format!("{} {} {} {}", t.tid, t.state.name(), core, t.name)
            })
            .collect()
    }

    pub fn status(&self) -> String {
        format!(
            "profile {} cores {} now {} tasks {} free {} total {}",
            self.profile,
            self.ncores(),
            self.now(),
            self.sched.live_count(),
            self.mem.free_pages(),
            self.mem.total_pages()
        )
    }

    pub fn screenshot(&self) -> Vec<u8> {
        self.machine.fb.ppm_bytes()
    }

    pub fn console_text(&self) -> String {
        String::from_utf8_lossy(&self.console.log).into_owned()
    }

    /// Saves the images back out (FAT metadata flushed first).
    pub fn flush_disks(&mut self) -> Result<(), FsError> {
        if let Some(fat) = self.fat.as_mut() {
            fat.flush(&mut self.storage)?;
        }
        self.storage.sync()?;
        Ok(())
    }

    pub fn disk_image(&mut self, dev: usize) -> Result<Vec<u8>, FsError> {
        self.flush_disks()?;
        Ok(self.storage.image(dev)?.to_vec())
    }

    /// Checks cross-module invariants. Used by tests after each run.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.sched.check_invariants()?;
        self.mem.audit()?;
        for (tid, p) in &self.procs {
            let t = self.sched.task(*tid).ok_or(format!("proc {tid} has no task"))?;
            if t.state == TaskState::Zombie {
                return Err(format!("zombie {tid} still holds a proc"));
            }
            if p.pending.is_some() && t.state != TaskState::Blocked && t.state != TaskState::Runnable {
                return Err(format!("task {tid} has a pending syscall in state {:?}", t.state));
            }
        }
        for t in self.sched.tasks() {
            if t.state == TaskState::Zombie && self.procs.contains_key(&t.tid) {
                return Err(format!("zombie {} holds an address space", t.tid));
            }
        }
        Ok(())
    }
}
