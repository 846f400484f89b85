//! Open files, descriptor tables and the per-object read/write paths.

use crate::devio::{SurfaceMsg, SURFACE_FLOAT};
use crate::fatfs::PiId;
use crate::proc::{
    MAJOR_CONSOLE, MAJOR_EVENT1, MAJOR_EVENTS, MAJOR_FB, MAJOR_SB, MAJOR_SURFACE, O_CREATE, O_NONBLOCK, O_RDONLY,
    O_TRUNC, O_WRONLY, SEEK_CUR, SEEK_END, SEEK_SET,
};
use crate::vfs::{procfs, route, DirRecord, FsError, Kind, Pipe, Route, Stat, DIRENT_LEN, NOFILE};
use crate::wm::{Rect, SurfaceId};
use crate::xv6fs::{T_DEV, T_DIR, T_FILE};

use super::{chan, Kernel};

pub type FileId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dev {
    Console,
    Events,
    Fb,
    Sb,
    Surface,
    Event1,
}

impl Dev {
    pub const ALL: [Dev; 6] = [Dev::Console, Dev::Events, Dev::Fb, Dev::Sb, Dev::Surface, Dev::Event1];

    pub fn name(self) -> &'static str {
        match self {
            Dev::Console => "console",
            Dev::Events => "events",
            Dev::Fb => "fb",
            Dev::Sb => "sb",
            Dev::Surface => "surface",
            Dev::Event1 => "event1",
        }
    }

    pub fn from_name(s: &str) -> Option<Dev> {
        Dev::ALL.into_iter().find(|d| d.name() == s)
    }

    pub fn from_major(m: u16) -> Option<Dev> {
        Some(match m {
            MAJOR_CONSOLE => Dev::Console,
            MAJOR_EVENTS => Dev::Events,
            MAJOR_FB => Dev::Fb,
            MAJOR_SB => Dev::Sb,
            MAJOR_SURFACE => Dev::Surface,
            MAJOR_EVENT1 => Dev::Event1,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FileObj {
    Xv6(u32),
    Fat(PiId),
    Dev(Dev),
    Proc(String),
    DevDir,
    ProcDir,
    PipeR(u32),
    PipeW(u32),
    /// A `/dev/surface` handle and the surface its CONFIG created.
    Surface(Option<SurfaceId>),
}

#[derive(Clone, Debug)]
pub struct OpenFile {
    pub obj: FileObj,
    pub readable: bool,
    pub writable: bool,
    pub nonblock: bool,
    pub off: u64,
    pub refs: u32,
    /// procfs content, generated once at open.
    pub snapshot: Vec<u8>,
}

#[derive(Clone, Debug, Default)]
pub struct FdTable {
    pub fds: [Option<FileId>; NOFILE],
    pub refs: u32,
}

/// Why a read or write did not complete.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) enum IoErr {
    Fs(FsError),
    Block(u64),
}

impl From<FsError> for IoErr {
    fn from(e: FsError) -> Self {
        IoErr::Fs(e)
    }
}

fn records_at(recs: &[DirRecord], off: u64, n: usize) -> Result<(Vec<u8>, u64), FsError> {
    if n < DIRENT_LEN {
        return Err(FsError::BadLength);
    }
    let start = (off as usize) / DIRENT_LEN;
    let count = n / DIRENT_LEN;
    let out: Vec<u8> = recs.iter().skip(start).take(count).flat_map(|r| r.to_bytes()).collect();
    let adv = out.len() as u64;
    Ok((out, adv))
}

fn visible(recs: Vec<DirRecord>) -> Vec<DirRecord> {
    recs.into_iter().filter(|r| r.name != "." && r.name != "..").collect()
}

impl Kernel {
    // ---- descriptor tables -------------------------------------------

    pub(crate) fn new_fdt(&mut self) -> u32 {
        let id = self.next_fdt;
        self.next_fdt += 1;
        self.fdts.insert(id, FdTable { refs: 1, ..Default::default() });
        id
    }

    pub(crate) fn fd_install(&mut self, fdt: u32, fid: FileId) -> Result<usize, FsError> {
        let t = self.fdts.get_mut(&fdt).ok_or(FsError::BadFd)?;
        let slot = t.fds.iter().position(Option::is_none).ok_or(FsError::TooManyFiles)?;
        t.fds[slot] = Some(fid);
        Ok(slot)
    }

    pub(crate) fn fd_lookup(&self, fdt: u32, fd: u64) -> Result<FileId, FsError> {
        self.fdts.get(&fdt).and_then(|t| t.fds.get(fd as usize).copied().flatten()).ok_or(FsError::BadFd)
    }

    pub(crate) fn fd_remove(&mut self, fdt: u32, fd: u64) -> Result<FileId, FsError> {
        let t = self.fdts.get_mut(&fdt).ok_or(FsError::BadFd)?;
        t.fds.get_mut(fd as usize).and_then(Option::take).ok_or(FsError::BadFd)
    }

    /// A copy of `fdt` sharing every open file (as fork does).
    pub(crate) fn fdt_dup(&mut self, fdt: u32) -> u32 {
        let fds = self.fdts.get(&fdt).map(|t| t.fds).unwrap_or_default();
        for fid in fds.iter().flatten() {
            self.file_retain(*fid);
        }
        let id = self.new_fdt();
        self.fdts.get_mut(&id).unwrap().fds = fds;
        id
    }

    pub(crate) fn fdt_share(&mut self, fdt: u32) {
        if let Some(t) = self.fdts.get_mut(&fdt) {
            t.refs += 1;
        }
    }

    pub(crate) fn fdt_release(&mut self, fdt: u32) {
        let Some(t) = self.fdts.get_mut(&fdt) else { return };
        t.refs -= 1;
        if t.refs > 0 {
            return;
        }
        let t = self.fdts.remove(&fdt).unwrap();
        for fid in t.fds.into_iter().flatten() {
            self.file_close(fid);
        }
    }

    // ---- open files ----------------------------------------------------

    fn insert_file(&mut self, obj: FileObj, readable: bool, writable: bool) -> FileId {
        let id = self.next_file;
        self.next_file += 1;
        self.files.insert(id, OpenFile { obj, readable, writable, nonblock: false, off: 0, refs: 1, snapshot: Vec::new() });
        id
    }

    pub(crate) fn file_retain(&mut self, fid: FileId) {
        if let Some(f) = self.files.get_mut(&fid) {
            f.refs += 1;
        }
    }

    pub(crate) fn dev_available(&self, dev: Dev) -> bool {
        match dev {
            Dev::Console | Dev::Events | Dev::Fb | Dev::Sb => self.profile.has_vfs(),
            Dev::Surface | Dev::Event1 => self.wm.is_some(),
        }
    }

    pub(crate) fn open_dev_file(&mut self, dev: Dev, readable: bool, writable: bool) -> Result<FileId, FsError> {
        if !self.dev_available(dev) {
            return Err(FsError::NotFound);
        }
        match dev {
            Dev::Events => self.events_open += 1,
            Dev::Sb => {
                self.sb_open += 1;
                self.audio_closing = false;
            }
            _ => {}
        }
        let obj = if dev == Dev::Surface { FileObj::Surface(None) } else { FileObj::Dev(dev) };
        Ok(self.insert_file(obj, readable, writable))
    }

    pub(crate) fn open_path(&mut self, cwd: &str, path: &str, flags: u64) -> Result<FileId, FsError> {
        let acc = flags & 3;
        if acc == 3 {
            return Err(FsError::InvalidArgument);
        }
        let nonblock = flags & O_NONBLOCK != 0;
        if nonblock && !self.profile.allows_nonblock() {
            return Err(FsError::InvalidArgument);
        }
        let readable = acc != O_WRONLY;
        let writable = acc != O_RDONLY;
        let parts = crate::vfs::normalize(cwd, path)?;
        let fid = match route(&parts) {
            Route::Xv6(parts) => {
                let xv6 = self.xv6.as_ref().ok_or(FsError::NotFound)?;
                let inum = match xv6.namei(&mut self.storage, &parts) {
                    Ok(i) => i,
                    Err(FsError::NotFound) if flags & O_CREATE != 0 => {
                        xv6.create(&mut self.storage, &parts, T_FILE, 0, 0)?
                    }
                    Err(e) => return Err(e),
                };
                let ino = xv6.iget(&mut self.storage, inum)?;
                match ino.kind {
                    T_DIR if writable => return Err(FsError::IsADirectory),
                    T_DEV => {
                        let dev = Dev::from_major(ino.major).ok_or(FsError::NotFound)?;
                        return self.open_dev_file(dev, readable, writable).map(|f| self.set_nonblock(f, nonblock));
                    }
                    T_FILE if writable && flags & O_TRUNC != 0 => xv6.itrunc(&mut self.storage, inum)?,
                    _ => {}
                }
                self.insert_file(FileObj::Xv6(inum), readable, writable)
            }
            Route::Fat(parts) => {
                let fat = self.fat.as_mut().ok_or(FsError::NotFound)?;
                let pi = fat.open(&mut self.storage, &parts, flags & O_CREATE != 0)?;
                let is_dir = fat.kind(pi)? == Kind::Dir;
                if is_dir && writable {
                    fat.close(&mut self.storage, pi)?;
                    return Err(FsError::IsADirectory);
                }
                if !is_dir && writable && flags & O_TRUNC != 0 {
                    fat.truncate(&mut self.storage, pi)?;
                }
                self.insert_file(FileObj::Fat(pi), readable, writable)
            }
            Route::Dev(name) => {
                let dev = Dev::from_name(&name).ok_or(FsError::NotFound)?;
                self.open_dev_file(dev, readable, writable)?
            }
            Route::DevDir | Route::ProcDir if writable => return Err(FsError::IsADirectory),
            Route::DevDir => self.insert_file(FileObj::DevDir, true, false),
            Route::ProcDir => self.insert_file(FileObj::ProcDir, true, false),
            Route::Proc(name) => {
                if !procfs::FILES.contains(&name.as_str()) {
                    return Err(FsError::NotFound);
                }
                if writable {
                    return Err(FsError::ReadOnlyFs);
                }
                let text = self.proc_text(&name);
                let fid = self.insert_file(FileObj::Proc(name), true, false);
                self.files.get_mut(&fid).unwrap().snapshot = text.into_bytes();
                fid
            }
        };
        Ok(self.set_nonblock(fid, nonblock))
    }

    fn set_nonblock(&mut self, fid: FileId, on: bool) -> FileId {
        if let Some(f) = self.files.get_mut(&fid) {
            f.nonblock = on;
        }
        fid
    }

    pub(crate) fn proc_text(&self, name: &str) -> String {
        let now = self.t.max(self.machine.now());
        match name {
            "cpuinfo" => procfs::cpuinfo(&self.acct, now),
            "meminfo" => procfs::meminfo(self.mem.free_pages(), self.mem.total_pages()),
            "audio" => procfs::audio(
                self.machine.audio.consumed(),
                self.machine.audio.underruns(),
                self.audio_ring.len() + self.machine.audio.fifo_len(),
            ),
            _ => String::new(),
        }
    }

    pub(crate) fn new_pipe(&mut self) -> (FileId, FileId) {
        let id = self.next_pipe;
        self.next_pipe += 1;
        self.pipes.insert(id, Pipe::new());
        let r = self.insert_file(FileObj::PipeR(id), true, false);
        let w = self.insert_file(FileObj::PipeW(id), false, true);
        (r, w)
    }

    /// Drops one reference; the last one releases the object.
    pub(crate) fn file_close(&mut self, fid: FileId) {
        let Some(f) = self.files.get_mut(&fid) else { return };
        f.refs -= 1;
        if f.refs > 0 {
            return;
        }
        let f = self.files.remove(&fid).unwrap();
        match f.obj {
            FileObj::Xv6(inum) => {
                let still_open = self.files.values().any(|o| o.obj == FileObj::Xv6(inum));
                if let (false, Some(xv6)) = (still_open, self.xv6.as_ref()) {
                    if xv6.iget(&mut self.storage, inum).is_ok_and(|d| d.nlink == 0 && d.kind != 0) {
                        let _ = xv6.ifree(&mut self.storage, inum);
                    }
                }
            }
            FileObj::Fat(pi) => {
                if let Some(fat) = self.fat.as_mut() {
                    let _ = fat.close(&mut self.storage, pi);
                }
            }
            FileObj::Dev(Dev::Events) => self.events_open -= 1,
            FileObj::Dev(Dev::Sb) => {
                self.sb_open -= 1;
                if self.sb_open == 0 {
                    self.audio_closing = true;
                    self.audio_top_up();
                }
            }
            FileObj::PipeR(id) | FileObj::PipeW(id) => {
                let reader = matches!(f.obj, FileObj::PipeR(_));
                if let Some(p) = self.pipes.get_mut(&id) {
                    if reader {
                        p.readers -= 1;
                    } else {
                        p.writers -= 1;
                    }
                    if p.readers == 0 && p.writers == 0 {
                        self.pipes.remove(&id);
                    }
                }
                self.wake(chan::make(if reader { chan::PIPE_W } else { chan::PIPE_R }, id as u64));
            }
            FileObj::Surface(Some(sid)) => {
                if let Some(wm) = self.wm.as_mut() {
                    wm.destroy(sid);
                }
                self.wake(chan::make(chan::EVENT1, sid as u64));
            }
            _ => {}
        }
    }

    fn dev_records(&self) -> Vec<DirRecord> {
        Dev::ALL
            .into_iter()
            .filter(|&d| self.dev_available(d))
            .map(|d| DirRecord { name: d.name().into(), kind: Kind::Device, size: 0 })
            .collect()
    }

    fn proc_records(&self) -> Vec<DirRecord> {
        procfs::FILES
            .iter()
            .map(|n| DirRecord { name: n.to_string(), kind: Kind::File, size: self.proc_text(n).len() as u64 })
            .collect()
    }

    fn xv6_records(&mut self, inum: u32) -> Result<Vec<DirRecord>, FsError> {
        let xv6 = self.xv6.as_ref().ok_or(FsError::BadFd)?;
        let mut out = Vec::new();
        for (name, i) in xv6.entries(&mut self.storage, inum)? {
            let st = xv6.stat(&mut self.storage, i)?;
            out.push(DirRecord { name, kind: st.kind, size: st.size });
        }
        Ok(out)
    }

    /// Reads up to `n` bytes for task group `tgid`.
    pub(crate) fn file_read(&mut self, fid: FileId, n: usize, tgid: u32) -> Result<Vec<u8>, IoErr> {
        let f = self.files.get(&fid).ok_or(FsError::BadFd)?;
        if !f.readable {
            return Err(FsError::BadFd.into());
        }
        let (obj, off, nonblock) = (f.obj.clone(), f.off, f.nonblock);
        let block = |ch: u64| if nonblock { IoErr::Fs(FsError::WouldBlock) } else { IoErr::Block(ch) };
        let (data, adv) = match obj {
            FileObj::Xv6(inum) => {
                let xv6 = self.xv6.as_ref().ok_or(FsError::BadFd)?;
                if xv6.iget(&mut self.storage, inum)?.kind == T_DIR {
                    let recs = visible(self.xv6_records(inum)?);
                    records_at(&recs, off, n)?
                } else {
                    let d = xv6.readi(&mut self.storage, inum, off, n)?;
                    let l = d.len() as u64;
                    (d, l)
                }
            }
            FileObj::Fat(pi) => {
                let fat = self.fat.as_ref().ok_or(FsError::BadFd)?;
                if fat.kind(pi)? == Kind::Dir {
                    let recs = visible(fat.readdir(&mut self.storage, pi)?);
                    records_at(&recs, off, n)?
                } else {
                    let d = fat.read(&mut self.storage, pi, off, n)?;
                    let l = d.len() as u64;
                    (d, l)
                }
            }
            FileObj::DevDir => records_at(&self.dev_records(), off, n)?,
            FileObj::ProcDir => records_at(&self.proc_records(), off, n)?,
            FileObj::Proc(_) => {
                let s = &self.files[&fid].snapshot;
                let lo = (off as usize).min(s.len());
                let hi = (lo + n).min(s.len());
                (s[lo..hi].to_vec(), (hi - lo) as u64)
            }
            FileObj::Dev(Dev::Console) => match self.console.ld.read(n) {
                Some(d) => (d, 0),
                None => return Err(block(chan::make(chan::CONSOLE, 0))),
            },
            FileObj::Dev(Dev::Events) => match self.events.read(n) {
                Ok(d) => (d, 0),
                Err(FsError::WouldBlock) => return Err(block(chan::make(chan::EVENTS, 0))),
                Err(e) => return Err(e.into()),
            },
            FileObj::Dev(Dev::Event1) => {
                let wm = self.wm.as_mut().ok_or(FsError::NotFound)?;
                let sid = wm.owned_by(tgid).ok_or(FsError::InvalidArgument)?;
                let s = wm.surface_mut(sid).expect("owned surface exists");
                match s.events.read(n) {
                    Ok(d) => (d, 0),
                    Err(FsError::WouldBlock) => return Err(block(chan::make(chan::EVENT1, sid as u64))),
                    Err(e) => return Err(e.into()),
                }
            }
            FileObj::Dev(Dev::Fb) => {
                let size = self.machine.fb.size_bytes();
                let lo = (off as usize).min(size);
                let hi = (lo + n).min(size);
                let d = self.machine.fb.read_shadow(lo, hi - lo).map_err(FsError::from)?.to_vec();
                let l = d.len() as u64;
                (d, l)
            }
            FileObj::PipeR(id) => {
                let p = self.pipes.get_mut(&id).ok_or(FsError::BadFd)?;
                match p.read(n) {
                    Ok(d) => {
                        if !d.is_empty() {
                            self.wake(chan::make(chan::PIPE_W, id as u64));
                        }
                        (d, 0)
                    }
                    Err(FsError::WouldBlock) => return Err(block(chan::make(chan::PIPE_R, id as u64))),
                    Err(e) => return Err(e.into()),
                }
            }
            FileObj::Dev(Dev::Sb) | FileObj::Dev(Dev::Surface) | FileObj::Surface(_) | FileObj::PipeW(_) => {
                return Err(FsError::InvalidArgument.into())
            }
        };
        if let Some(f) = self.files.get_mut(&fid) {
            f.off += adv;
        }
        Ok(data)
    }

    /// Writes `data` on behalf of task group `tgid`; returns bytes taken.
    pub(crate) fn file_write(&mut self, fid: FileId, data: &[u8], tgid: u32) -> Result<usize, IoErr> {
        let f = self.files.get(&fid).ok_or(FsError::BadFd)?;
        if !f.writable {
            return Err(FsError::BadFd.into());
        }
        let (obj, off, nonblock) = (f.obj.clone(), f.off, f.nonblock);
        let (n, adv) = match obj {
            FileObj::Xv6(inum) => {
                let xv6 = self.xv6.as_ref().ok_or(FsError::BadFd)?;
                let n = xv6.writei(&mut self.storage, inum, off, data)?;
                (n, n as u64)
            }
            FileObj::Fat(pi) => {
                let fat = self.fat.as_mut().ok_or(FsError::BadFd)?;
                let n = fat.write(&mut self.storage, pi, off, data)?;
                (n, n as u64)
            }
            FileObj::Dev(Dev::Console) => {
                self.console.write(data, &mut self.machine.fb, self.wm.as_mut());
                (data.len(), 0)
            }
            FileObj::Dev(Dev::Fb) => {
                let size = self.machine.fb.size_bytes();
                let lo = (off as usize).min(size);
                let n = data.len().min(size - lo);
                if n == 0 && !data.is_empty() {
                    return Err(FsError::DiskFull.into());
                }
                self.machine.fb.write_shadow(lo, &data[..n]).map_err(FsError::from)?;
                (n, n as u64)
            }
            FileObj::Dev(Dev::Sb) => {
                if !data.len().is_multiple_of(2) {
                    return Err(FsError::BadLength.into());
                }
                let samples: Vec<i16> = data.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
                let n = self.audio_ring.write(&samples);
                self.audio_top_up();
                if n == 0 && !samples.is_empty() {
                    return Err(if nonblock {
                        IoErr::Fs(FsError::WouldBlock)
                    } else {
                        IoErr::Block(chan::make(chan::AUDIO, 0))
                    });
                }
                (n * 2, 0)
            }
            FileObj::Surface(sid) => {
                self.surface_write(fid, sid, data, tgid)?;
                (data.len(), 0)
            }
            FileObj::PipeW(id) => {
                let p = self.pipes.get_mut(&id).ok_or(FsError::BadFd)?;
                match p.write(data) {
                    Ok(n) => {
                        if n > 0 {
                            self.wake(chan::make(chan::PIPE_R, id as u64));
                        }
                        (n, 0)
                    }
                    Err(FsError::WouldBlock) if nonblock => return Err(FsError::WouldBlock.into()),
                    Err(FsError::WouldBlock) => return Err(IoErr::Block(chan::make(chan::PIPE_W, id as u64))),
                    Err(e) => return Err(e.into()),
                }
            }
            FileObj::DevDir | FileObj::ProcDir => return Err(FsError::IsADirectory.into()),
            FileObj::Proc(_) => return Err(FsError::ReadOnlyFs.into()),
            FileObj::Dev(_) | FileObj::PipeR(_) => return Err(FsError::InvalidArgument.into()),
        };
        if let Some(f) = self.files.get_mut(&fid) {
            f.off += adv;
        }
        Ok(n)
    }

    fn surface_write(&mut self, fid: FileId, mut sid: Option<SurfaceId>, data: &[u8], tgid: u32) -> Result<(), FsError> {
        let msgs = SurfaceMsg::parse_all(data)?;
        let wm = self.wm.as_mut().ok_or(FsError::NotFound)?;
        for m in msgs {
            match m {
                SurfaceMsg::Config { w, h, flags } => {
                    if sid.is_some() {
                        return Err(FsError::ProtocolError("surface already configured".into()));
                    }
                    if w == 0 || h == 0 || w as u32 > wm.screen().w as u32 || h as u32 > wm.screen().h as u32 {
                        return Err(FsError::ProtocolError("bad surface size".into()));
                    }
                    let (x, y) = if flags & SURFACE_FLOAT != 0 {
                        (wm.screen().w - w as i32 - 8, 8)
                    } else {
                        wm.cascade(w, h)
                    };
                    let id = wm.create(tgid, x, y, w, h, flags);
                    sid = Some(id);
                    if let Some(f) = self.files.get_mut(&fid) {
                        f.obj = FileObj::Surface(sid);
                    }
                }
                SurfaceMsg::Rect { x, y, w, h, pixels } => {
                    let id = sid.ok_or_else(|| FsError::ProtocolError("rect before config".into()))?;
                    wm.update(id, Rect::new(x as i32, y as i32, w as i32, h as i32), &pixels)?;
                }
            }
        }
        Ok(())
    }

    pub(crate) fn file_lseek(&mut self, fid: FileId, off: i64, whence: u64) -> Result<u64, FsError> {
        let f = self.files.get(&fid).ok_or(FsError::BadFd)?;
        let size = match &f.obj {
            FileObj::Xv6(inum) => {
                let xv6 = self.xv6.as_ref().ok_or(FsError::BadFd)?;
                let ino = xv6.iget(&mut self.storage, *inum)?;
                if ino.kind != T_FILE {
                    return Err(FsError::IllegalSeek);
                }
                ino.size as u64
            }
            FileObj::Fat(pi) => {
                let fat = self.fat.as_ref().ok_or(FsError::BadFd)?;
                if fat.kind(*pi)? == Kind::Dir {
                    return Err(FsError::IllegalSeek);
                }
                fat.size(*pi)?
            }
            FileObj::Dev(Dev::Fb) => self.machine.fb.size_bytes() as u64,
            _ => return Err(FsError::IllegalSeek),
        };
        let base = match whence {
            SEEK_SET => 0,
            SEEK_CUR => f.off as i64,
            SEEK_END => size as i64,
            _ => return Err(FsError::InvalidArgument),
        };
        let new = base.checked_add(off).ok_or(FsError::InvalidArgument)?;
        if new < 0 || new as u64 > size {
            return Err(FsError::InvalidArgument);
        }
        self.files.get_mut(&fid).unwrap().off = new as u64;
        Ok(new as u64)
    }

    pub(crate) fn file_stat(&mut self, fid: FileId) -> Result<Stat, FsError> {
        let f = self.files.get(&fid).ok_or(FsError::BadFd)?;
        let dev = Stat { kind: Kind::Device, size: 0, ino: 0, nlink: 1 };
        Ok(match &f.obj {
            FileObj::Xv6(inum) => self.xv6.as_ref().ok_or(FsError::BadFd)?.stat(&mut self.storage, *inum)?,
            FileObj::Fat(pi) => self.fat.as_ref().ok_or(FsError::BadFd)?.stat(*pi)?,
            FileObj::Proc(_) => Stat { kind: Kind::File, size: f.snapshot.len() as u64, ino: 0, nlink: 1 },
            FileObj::DevDir | FileObj::ProcDir => Stat { kind: Kind::Dir, size: 0, ino: 0, nlink: 1 },
            FileObj::Dev(Dev::Fb) => Stat { size: self.machine.fb.size_bytes() as u64, ..dev },
            FileObj::PipeR(id) | FileObj::PipeW(id) => {
                Stat { kind: Kind::File, size: self.pipes.get(id).map_or(0, |p| p.len() as u64), ino: 0, nlink: 1 }
            }
            _ => dev,
        })
    }

    // ---- host-side file access -----------------------------------------

    /// Reads a whole file from the host side, as a kernel-internal open.
    pub fn read_file(&mut self, path: &str) -> Result<Vec<u8>, FsError> {
        let fid = self.open_path("/", path, O_RDONLY)?;
        let mut out = Vec::new();
        let res = loop {
            match self.file_read(fid, 1 << 20, 0) {
                Ok(d) if d.is_empty() => break Ok(()),
                Ok(d) => out.extend_from_slice(&d),
                Err(IoErr::Fs(e)) => break Err(e),
                Err(IoErr::Block(_)) => break Err(FsError::WouldBlock),
            }
            if matches!(self.files.get(&fid).map(|f| &f.obj), Some(FileObj::Dev(_))) {
                break Ok(());
            }
        };
        self.file_close(fid);
        self.storage.take_io_ticks();
        res.map(|_| out)
    }

    /// Creates or replaces a file from the host side.
    pub fn write_file(&mut self, path: &str, data: &[u8]) -> Result<(), FsError> {
        let fid = self.open_path("/", path, O_WRONLY | O_CREATE | O_TRUNC)?;
        let res = match self.file_write(fid, data, 0) {
            Ok(n) if n == data.len() => Ok(()),
            Ok(_) => Err(FsError::DiskFull),
            Err(IoErr::Fs(e)) => Err(e),
            Err(IoErr::Block(_)) => Err(FsError::WouldBlock),
        };
        self.file_close(fid);
        self.storage.take_io_ticks();
        res
    }

    /// Directory listing from the host side.
    pub fn list_dir(&mut self, path: &str) -> Result<Vec<DirRecord>, FsError> {
        let fid = self.open_path("/", path, O_RDONLY)?;
        let mut out = Vec::new();
        let res = loop {
            match self.file_read(fid, DIRENT_LEN * 16, 0) {
                Ok(d) if d.is_empty() => break Ok(()),
                Ok(d) => out.extend(d.chunks(DIRENT_LEN).filter_map(DirRecord::from_bytes)),
                Err(IoErr::Fs(FsError::BadLength)) => break Err(FsError::NotADirectory),
                Err(IoErr::Fs(e)) => break Err(e),
                Err(IoErr::Block(_)) => break Err(FsError::WouldBlock),
            }
        };
        let is_dir = match self.files.get(&fid).map(|f| f.obj.clone()) {
            Some(FileObj::Xv6(i)) => self.xv6.as_ref().unwrap().iget(&mut self.storage, i)?.kind == T_DIR,
            Some(FileObj::Fat(pi)) => self.fat.as_ref().unwrap().kind(pi)? == Kind::Dir,
            Some(FileObj::DevDir) | Some(FileObj::ProcDir) => true,
            _ => false,
        };
        self.file_close(fid);
        self.storage.take_io_ticks();
        if !is_dir {
            return Err(FsError::NotADirectory);
        }
        res.map(|_| out)
    }
}
