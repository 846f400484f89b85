//! Syscall dispatch.
//!
//! Arguments arrive in `Pending::args`. A call that must wait returns
//! `SysOut::Block` and is re-executed from the top once the channel fires;
//! `Pending::progress` carries how much of a partial write already happened.

use crate::fatfs::FatFs;
use crate::mem::{Access, AsId, Fault};
use crate::proc::*;
use crate::sched::{TaskKind, TaskState, Tid};
use crate::vfs::{errno, normalize, route, to_path, FsError, Kind, Route};
use crate::xv6fs::{T_DEV, T_DIR};

use super::file::IoErr;
use super::{chan, Body, Kernel, Pending, SysOut};

/// Per-call cap on a read; bigger requests return short.
pub const MAX_IO: usize = 1 << 20;
pub const MAX_ARGV: usize = 16;
pub const MAX_ARG_LEN: usize = 128;

fn err(e: i64) -> SysOut {
    SysOut::Ret(-e)
}

fn fs(e: FsError) -> SysOut {
    SysOut::Ret(-e.errno())
}

impl Kernel {
    fn copy_in(&self, asid: AsId, va: u64, len: usize) -> Result<Vec<u8>, i64> {
        let mut buf = vec![0u8; len];
        self.mem.read_user(asid, va, &mut buf, &self.machine.fb).map_err(|_: Fault| errno::EFAULT)?;
        Ok(buf)
    }

    fn copy_out(&mut self, asid: AsId, va: u64, data: &[u8]) -> Result<(), i64> {
        self.mem.write_user(asid, va, data, &mut self.machine.fb).map_err(|_: Fault| errno::EFAULT)
    }

    fn copy_str(&self, asid: AsId, va: u64, max: usize) -> Result<String, i64> {
        let mut out = Vec::new();
        let mut p = va;
        while out.len() < max {
            let mut b = [0u8; 1];
            self.mem.read_user(asid, p, &mut b, &self.machine.fb).map_err(|_| errno::EFAULT)?;
            if b[0] == 0 {
                return String::from_utf8(out).map_err(|_| errno::EINVAL);
            }
            out.push(b[0]);
            p += 1;
        }
        Err(errno::ENAMETOOLONG)
    }

    fn copy_argv(&self, asid: AsId, va: u64) -> Result<Vec<String>, i64> {
        let mut out = Vec::new();
        if va == 0 {
            return Ok(out);
        }
        loop {
            let p = u64::from_le_bytes(self.copy_in(asid, va + 8 * out.len() as u64, 8)?.try_into().unwrap());
            if p == 0 {
                return Ok(out);
            }
            if out.len() == MAX_ARGV {
                return Err(errno::E2BIG);
            }
            out.push(self.copy_str(asid, p, MAX_ARG_LEN).map_err(|e| if e == errno::ENAMETOOLONG { errno::E2BIG } else { e })?);
        }
    }

    pub(crate) fn syscall(&mut self, c: usize, tid: Tid, pend: &mut Pending) -> SysOut {
        let nr = pend.nr;
        if !self.profile.allows(nr) {
            return err(errno::ENOSYS);
        }
        let a = pend.args;
        let p = &self.procs[&tid];
        let (asid, fdt, tgid, cwd) = (p.asid.expect("user task"), p.fdt, p.tgid, p.cwd.clone());
        let fdt = fdt.unwrap_or(0);
        match nr {
            SYS_FORK => self.sys_fork(tid),
            SYS_EXIT => {
                self.do_exit(tid, a[0] as i32);
                SysOut::Exit
            }
            SYS_WAIT => self.sys_wait(tid, asid, a[0]),
            SYS_KILL => {
                let target = a[0] as Tid;
                if target == 0 || !self.procs.contains_key(&target) {
                    return err(errno::ESRCH);
                }
                self.kill(target);
                if target == tid {
                    SysOut::Exit
                } else {
                    SysOut::Ret(0)
                }
            }
            SYS_GETPID => SysOut::Ret(tid as i64),
            SYS_SLEEP => {
                if a[0] == 0 {
                    SysOut::Yield(0)
                } else {
                    SysOut::Sleep(self.t + a[0].saturating_mul(crate::hwsim::TICKS_PER_MS))
                }
            }
            SYS_UPTIME => SysOut::Ret(self.t as i64),
            SYS_SBRK => match self.mem.sbrk(asid, a[0] as i64) {
                Ok(old) => SysOut::Ret(old as i64),
                Err(_) => err(errno::ENOMEM),
            },
            SYS_EXEC => self.sys_exec(tid, asid, &cwd, a[0], a[1]),
            SYS_OPEN => {
                let path = match self.copy_str(asid, a[0], crate::vfs::MAX_PATH) {
                    Ok(s) => s,
                    Err(e) => return err(e),
                };
                match self.open_path(&cwd, &path, a[1]) {
                    Ok(fid) => match self.fd_install(fdt, fid) {
                        Ok(fd) => SysOut::Ret(fd as i64),
                        Err(e) => {
                            self.file_close(fid);
                            fs(e)
                        }
                    },
                    Err(e) => fs(e),
                }
            }
            SYS_CLOSE => match self.fd_remove(fdt, a[0]) {
                Ok(fid) => {
                    self.file_close(fid);
                    SysOut::Ret(0)
                }
                Err(e) => fs(e),
            },
            SYS_READ => self.sys_read(asid, fdt, tgid, a[0], a[1], a[2]),
            SYS_WRITE => self.sys_write(asid, fdt, tgid, pend),
            SYS_LSEEK => match self.fd_lookup(fdt, a[0]).and_then(|f| self.file_lseek(f, a[1] as i64, a[2])) {
                Ok(o) => SysOut::Ret(o as i64),
                Err(e) => fs(e),
            },
            SYS_DUP => match self.fd_lookup(fdt, a[0]) {
                Ok(fid) => {
                    self.file_retain(fid);
                    match self.fd_install(fdt, fid) {
                        Ok(fd) => SysOut::Ret(fd as i64),
                        Err(e) => {
                            self.file_close(fid);
                            fs(e)
                        }
                    }
                }
                Err(e) => fs(e),
            },
            SYS_FSTAT => match self.fd_lookup(fdt, a[0]).and_then(|f| self.file_stat(f)) {
                Ok(st) => match self.copy_out(asid, a[1], &st.to_bytes()) {
                    Ok(()) => SysOut::Ret(0),
                    Err(e) => err(e),
                },
                Err(e) => fs(e),
            },
            SYS_MKDIR | SYS_CHDIR | SYS_UNLINK | SYS_MKNOD => {
                let path = match self.copy_str(asid, a[0], crate::vfs::MAX_PATH) {
                    Ok(s) => s,
                    Err(e) => return err(e),
                };
                let r = match nr {
                    SYS_MKDIR => self.do_mkdir(&cwd, &path),
                    SYS_CHDIR => self.do_chdir(tid, &cwd, &path),
                    SYS_UNLINK => self.do_unlink(&cwd, &path),
                    _ => self.do_mknod(&cwd, &path, a[1] as u16, a[2] as u16),
                };
                match r {
                    Ok(()) => SysOut::Ret(0),
                    Err(e) => fs(e),
                }
            }
            SYS_LINK => {
                let (old, new) = match (self.copy_str(asid, a[0], 256), self.copy_str(asid, a[1], 256)) {
                    (Ok(o), Ok(n)) => (o, n),
                    (Err(e), _) | (_, Err(e)) => return err(e),
                };
                match self.do_link(&cwd, &old, &new) {
                    Ok(()) => SysOut::Ret(0),
                    Err(e) => fs(e),
                }
            }
            SYS_PIPE => {
                if self.probe_w(asid, a[0], 8).is_err() {
                    return err(errno::EFAULT);
                }
                let (r, w) = self.new_pipe();
                let fr = match self.fd_install(fdt, r) {
                    Ok(fd) => fd,
                    Err(e) => {
                        self.file_close(r);
                        self.file_close(w);
                        return fs(e);
                    }
                };
                let fw = match self.fd_install(fdt, w) {
                    Ok(fd) => fd,
                    Err(e) => {
                        let _ = self.fd_remove(fdt, fr as u64);
                        self.file_close(r);
                        self.file_close(w);
                        return fs(e);
                    }
                };
                let mut b = (fr as u32).to_le_bytes().to_vec();
                b.extend_from_slice(&(fw as u32).to_le_bytes());
                self.copy_out(asid, a[0], &b).expect("probed");
                SysOut::Ret(0)
            }
            SYS_CLONE => self.sys_clone(tid, a[0], a[1]),
            SYS_SEMCREATE => SysOut::Ret(self.sems.create(a[0]) as i64),
            SYS_SEMWAIT => match self.sems.try_wait(a[0] as u32) {
                Ok(true) => SysOut::Ret(0),
                Ok(false) => SysOut::Block(chan::make(chan::SEM, a[0])),
                Err(_) => err(errno::EINVAL),
            },
            SYS_SEMPOST => match self.sems.post(a[0] as u32) {
                Ok(()) => {
                    self.wake(chan::make(chan::SEM, a[0]));
                    SysOut::Ret(0)
                }
                Err(_) => err(errno::EINVAL),
            },
            SYS_SEMFREE => {
                let busy = !self.sched.waiters(chan::make(chan::SEM, a[0])).is_empty();
                match self.sems.free(a[0] as u32, busy) {
                    Ok(()) => SysOut::Ret(0),
                    Err(SemError::Busy) => err(errno::EBUSY),
                    Err(SemError::BadSid) => err(errno::EINVAL),
                }
            }
            SYS_FBCTL => match a[0] {
                FBCTL_FLUSH => {
                    self.machine.fb.flush();
                    SysOut::Ret(0)
                }
                FBCTL_GET_GEOMETRY => {
                    let g = self.machine.fb.geometry();
                    let mut b = Vec::with_capacity(GEOMETRY_LEN);
                    for v in [g.width, g.height, g.stride, g.format] {
                        b.extend_from_slice(&v.to_le_bytes());
                    }
                    match self.copy_out(asid, a[1], &b) {
                        Ok(()) => SysOut::Ret(0),
                        Err(e) => err(e),
                    }
                }
                _ => err(errno::EINVAL),
            },
            _ => {
                let _ = c;
                err(errno::ENOSYS)
            }
        }
    }

    fn probe_w(&self, asid: AsId, va: u64, len: u64) -> Result<(), Fault> {
        self.mem.probe(asid, va, len, Access::W)
    }

    fn sys_fork(&mut self, tid: Tid) -> SysOut {
        let p = &self.procs[&tid];
        let (asid, fdt, ctx, cwd) = (p.asid.unwrap(), p.fdt, p.ctx, p.cwd.clone());
        let Body::User { prog, ref key } = p.body else { return err(errno::EINVAL) };
        let key = key.clone();
        let (name, prio) = self.sched.task(tid).map(|t| (t.name.clone(), t.priority)).unwrap();
        let child_as = match self.mem.as_fork(asid) {
            Ok(a) => a,
            Err(_) => return err(errno::ENOMEM),
        };
        let child = match self.alloc_user(&name, prio, tid) {
            Ok(c) => c,
            Err(e) => {
                self.mem.as_release(child_as);
                return err(e);
            }
        };
        let child_fdt = fdt.map(|f| self.fdt_dup(f));
        let cp = self.procs.get_mut(&child).unwrap();
        cp.asid = Some(child_as);
        cp.fdt = child_fdt;
        cp.cwd = cwd;
        cp.ctx = ctx;
        cp.ctx.r[0] = 0;
        cp.body = Body::User { prog, key };
        self.sched.activate(child).expect("embryo");
        SysOut::Ret(child as i64)
    }

    fn alloc_user(&mut self, name: &str, prio: u32, parent: Tid) -> Result<Tid, i64> {
        self.alloc_proc(TaskKind::User, name, prio, parent)
    }

    fn sys_clone(&mut self, tid: Tid, flags: u64, stack_top: u64) -> SysOut {
        if flags != CLONE_VM || stack_top == 0 || !stack_top.is_multiple_of(8) {
            return err(errno::EINVAL);
        }
        let p = &self.procs[&tid];
        let (asid, fdt, ctx, cwd, tgid) = (p.asid.unwrap(), p.fdt, p.ctx, p.cwd.clone(), p.tgid);
        let Body::User { prog, ref key } = p.body else { return err(errno::EINVAL) };
        let key = key.clone();
        let (name, prio) = self.sched.task(tid).map(|t| (t.name.clone(), t.priority)).unwrap();
        let shared = match self.mem.as_share(asid) {
            Ok(a) => a,
            Err(_) => return err(errno::ENOMEM),
        };
        let child = match self.alloc_user(&name, prio, tid) {
            Ok(c) => c,
            Err(e) => {
                self.mem.as_release(shared);
                return err(e);
            }
        };
        if let Some(f) = fdt {
            self.fdt_share(f);
        }
        let cp = self.procs.get_mut(&child).unwrap();
        cp.tgid = tgid;
        cp.asid = Some(shared);
        cp.fdt = fdt;
        cp.cwd = cwd;
        cp.ctx = ctx;
        cp.ctx.r[0] = 0;
        cp.ctx.sp = stack_top;
        cp.body = Body::User { prog, key };
        self.sched.activate(child).expect("embryo");
        SysOut::Ret(child as i64)
    }

    fn sys_wait(&mut self, tid: Tid, asid: AsId, status: u64) -> SysOut {
        let mut any = false;
        let mut best: Option<(u64, Tid, i32)> = None;
        for t in self.sched.children(tid) {
            any = true;
            if t.state == TaskState::Zombie {
                let k = (t.exit_tick, t.tid, t.exit_code);
                if best.is_none_or(|b| (k.0, k.1) < (b.0, b.1)) {
                    best = Some(k);
                }
            }
        }
        match best {
            Some((_, kid, code)) => {
                if status != 0 && self.copy_out(asid, status, &code.to_le_bytes()).is_err() {
                    return err(errno::EFAULT);
                }
                self.sched.reap(kid);
                SysOut::Ret(kid as i64)
            }
            None if any => SysOut::Block(chan::make(chan::WAIT, tid as u64)),
            None => err(errno::ECHILD),
        }
    }

    fn sys_exec(&mut self, tid: Tid, asid: AsId, cwd: &str, path_va: u64, argv_va: u64) -> SysOut {
        let path = match self.copy_str(asid, path_va, crate::vfs::MAX_PATH) {
            Ok(s) => s,
            Err(e) => return err(e),
        };
        let argv = match self.copy_argv(asid, argv_va) {
            Ok(v) => v,
            Err(e) => return err(e),
        };
        let img = match self.read_image(cwd, &path) {
            Ok(i) => i,
            Err(e) => return err(e),
        };
        let (new_as, ctx, spec) = match self.load(&img, &argv) {
            Ok(x) => x,
            Err(e) => return err(e),
        };
        if spec.min_profile > self.profile {
            self.mem.as_release(new_as);
            return err(errno::ENOEXEC);
        }
        self.mem.as_release(asid);
        let argc = ctx.r[0] as i64;
        let p = self.procs.get_mut(&tid).unwrap();
        p.asid = Some(new_as);
        p.ctx = ctx;
        p.body = Body::User { prog: spec.run, key: spec.name.to_string() };
        let base = path.rsplit('/').next().unwrap_or(&path).to_string();
        if let Some(t) = self.sched.task_mut(tid) {
            t.name = base;
        }
        SysOut::Ret(argc)
    }

    fn sys_read(&mut self, asid: AsId, fdt: u32, tgid: Tid, fd: u64, buf: u64, n: u64) -> SysOut {
        let fid = match self.fd_lookup(fdt, fd) {
            Ok(f) => f,
            Err(e) => return fs(e),
        };
        let n = (n as usize).min(MAX_IO);
        if n == 0 {
            return SysOut::Ret(0);
        }
        if self.probe_w(asid, buf, n as u64).is_err() {
            return err(errno::EFAULT);
        }
        match self.file_read(fid, n, tgid) {
            Ok(d) => {
                self.copy_out(asid, buf, &d).expect("probed");
                SysOut::Ret(d.len() as i64)
            }
            Err(IoErr::Block(ch)) => SysOut::Block(ch),
            Err(IoErr::Fs(e)) => fs(e),
        }
    }

    fn sys_write(&mut self, asid: AsId, fdt: u32, tgid: Tid, pend: &mut Pending) -> SysOut {
        let [fd, buf, n, ..] = pend.args;
        if !self.profile.has_vfs() {
            // p3: fds 1 and 2 are the console log.
            if fd != 1 && fd != 2 {
                return err(errno::EBADF);
            }
            return match self.copy_in(asid, buf, (n as usize).min(MAX_IO)) {
                Ok(d) => {
                    self.console.write(&d, &mut self.machine.fb, None);
                    SysOut::Ret(d.len() as i64)
                }
                Err(e) => err(e),
            };
        }
        let fid = match self.fd_lookup(fdt, fd) {
            Ok(f) => f,
            Err(e) => return fs(e),
        };
        while pend.progress < n {
            let len = ((n - pend.progress) as usize).min(16 * MAX_IO);
            let data = match self.copy_in(asid, buf + pend.progress, len) {
                Ok(d) => d,
                Err(e) => return if pend.progress > 0 { SysOut::Ret(pend.progress as i64) } else { err(e) },
            };
            match self.file_write(fid, &data, tgid) {
                Ok(0) => break,
                Ok(k) => pend.progress += k as u64,
                Err(IoErr::Block(ch)) => return SysOut::Block(ch),
                Err(IoErr::Fs(e)) => {
                    return if pend.progress > 0 { SysOut::Ret(pend.progress as i64) } else { fs(e) };
                }
            }
        }
        SysOut::Ret(pend.progress as i64)
    }

    // ---- path operations -----------------------------------------------

    fn do_mkdir(&mut self, cwd: &str, path: &str) -> Result<(), FsError> {
        match route(&normalize(cwd, path)?) {
            Route::Xv6(parts) => {
                let xv6 = self.xv6.as_ref().ok_or(FsError::NotFound)?;
                xv6.create(&mut self.storage, &parts, T_DIR, 0, 0).map(|_| ())
            }
            Route::Fat(parts) => self.fat.as_mut().ok_or(FsError::NotFound)?.mkdir(&mut self.storage, &parts),
            Route::DevDir | Route::ProcDir => Err(FsError::Exists),
            _ => Err(FsError::ReadOnlyFs),
        }
    }

    fn do_chdir(&mut self, tid: Tid, cwd: &str, path: &str) -> Result<(), FsError> {
        let parts = normalize(cwd, path)?;
        let ok = match route(&parts) {
            Route::Xv6(p) => {
                let xv6 = self.xv6.as_ref().ok_or(FsError::NotFound)?;
                let i = xv6.namei(&mut self.storage, &p)?;
                xv6.iget(&mut self.storage, i)?.kind == T_DIR
            }
            Route::Fat(p) => fat_is_dir(self.fat.as_ref().ok_or(FsError::NotFound)?, &mut self.storage, &p)?,
            Route::DevDir | Route::ProcDir => true,
            Route::Dev(_) | Route::Proc(_) => false,
        };
        if !ok {
            return Err(FsError::NotADirectory);
        }
        self.procs.get_mut(&tid).unwrap().cwd = to_path(&parts);
        Ok(())
    }

    fn do_unlink(&mut self, cwd: &str, path: &str) -> Result<(), FsError> {
        match route(&normalize(cwd, path)?) {
            Route::Xv6(parts) => {
                let xv6 = self.xv6.as_ref().ok_or(FsError::NotFound)?;
                let (inum, nlink) = xv6.unlink(&mut self.storage, &parts)?;
                let open = self.files.values().any(|f| f.obj == super::FileObj::Xv6(inum));
                if nlink == 0 && !open {
                    xv6.ifree(&mut self.storage, inum)?;
                }
                Ok(())
            }
            Route::Fat(parts) => self.fat.as_mut().ok_or(FsError::NotFound)?.unlink(&mut self.storage, &parts),
            _ => Err(FsError::PermissionDenied),
        }
    }

    fn do_mknod(&mut self, cwd: &str, path: &str, major: u16, minor: u16) -> Result<(), FsError> {
        match route(&normalize(cwd, path)?) {
            Route::Xv6(parts) => {
                let xv6 = self.xv6.as_ref().ok_or(FsError::NotFound)?;
                xv6.create(&mut self.storage, &parts, T_DEV, major, minor).map(|_| ())
            }
            _ => Err(FsError::PermissionDenied),
        }
    }

    fn do_link(&mut self, cwd: &str, old: &str, new: &str) -> Result<(), FsError> {
        match (route(&normalize(cwd, old)?), route(&normalize(cwd, new)?)) {
            (Route::Xv6(o), Route::Xv6(n)) => {
                let xv6 = self.xv6.as_ref().ok_or(FsError::NotFound)?;
                xv6.link(&mut self.storage, &o, &n)
            }
            _ => Err(FsError::PermissionDenied),
        }
    }
}

fn fat_is_dir(fat: &FatFs, st: &mut crate::vfs::Storage, parts: &[String]) -> Result<bool, FsError> {
    if parts.is_empty() {
        return Ok(true);
    }
    match fat.lookup(st, parts)? {
        Some(e) => Ok(e.kind() == Kind::Dir),
        None => Err(FsError::NotFound),
    }
}
