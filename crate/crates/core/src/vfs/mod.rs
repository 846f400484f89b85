//! Virtual file system: path resolution with mount dispatch, open files,
//! per-task descriptor tables, pipes and the buffer cache.
//!
//! Paths are normalized to absolute form first, then routed by prefix:
//! `/d/...` goes to the FAT32 volume, `/dev/...` to the device registry,
//! `/proc/...` to procfs and everything else to the xv6fs root.

pub mod bcache;
pub mod pipe;
pub mod procfs;

use thiserror::Error;

use crate::hwsim::HwError;

pub use bcache::{CacheStats, DevNo, Storage, NBUF};
pub use pipe::{Pipe, PIPE_ATOMIC, PIPE_SIZE};

/// Descriptors per task.
pub const NOFILE: usize = 16;
pub const MAX_PATH: usize = 256;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FsError {
    #[error("no such file or directory")]
    NotFound,
    #[error("not a directory")]
    NotADirectory,
    #[error("is a directory")]
    IsADirectory,
    #[error("file exists")]
    Exists,
    #[error("name too long")]
    NameTooLong,
    #[error("file too large")]
    FileTooLarge,
    #[error("no space left on device")]
    DiskFull,
    #[error("out of inodes")]
    NoInodes,
    #[error("directory not empty")]
    NotEmpty,
    #[error("bad file descriptor")]
    BadFd,
    #[error("too many open files")]
    TooManyFiles,
    #[error("read-only file system")]
    ReadOnlyFs,
    #[error("illegal seek")]
    IllegalSeek,
    #[error("operation would block")]
    WouldBlock,
    #[error("broken pipe")]
    BrokenPipe,
    #[error("bad transfer length")]
    BadLength,
    #[error("invalid argument")]
    InvalidArgument,
    #[error("permission denied")]
    PermissionDenied,
    #[error("resource busy")]
    Busy,
    #[error("bad boot signature")]
    BadSignature,
    #[error("volume is not FAT32")]
    NotFat32,
    #[error("corrupt cluster chain")]
    CorruptChain,
    #[error("bad image: {0}")]
    BadImage(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("device: {0}")]
    Device(#[from] HwError),
}

pub mod errno {
    pub const EPERM: i64 = 1;
    pub const ENOENT: i64 = 2;
    pub const ESRCH: i64 = 3;
    pub const EIO: i64 = 5;
    pub const E2BIG: i64 = 7;
    pub const ENOEXEC: i64 = 8;
    pub const EBADF: i64 = 9;
    pub const ECHILD: i64 = 10;
    pub const EAGAIN: i64 = 11;
    pub const ENOMEM: i64 = 12;
    pub const EACCES: i64 = 13;
    pub const EFAULT: i64 = 14;
    pub const EBUSY: i64 = 16;
    pub const EEXIST: i64 = 17;
    pub const ENOTDIR: i64 = 20;
    pub const EISDIR: i64 = 21;
    pub const EINVAL: i64 = 22;
    pub const EMFILE: i64 = 24;
    pub const EFBIG: i64 = 27;
    pub const ENOSPC: i64 = 28;
    pub const ESPIPE: i64 = 29;
    pub const EROFS: i64 = 30;
    pub const EPIPE: i64 = 32;
    pub const ENAMETOOLONG: i64 = 36;
    pub const ENOSYS: i64 = 38;
    pub const ENOTEMPTY: i64 = 39;
    pub const EPROTO: i64 = 71;
}

impl FsError {
    pub fn errno(&self) -> i64 {
        use errno::*;
        match self {
            FsError::NotFound => ENOENT,
            FsError::NotADirectory => ENOTDIR,
            FsError::IsADirectory => EISDIR,
            FsError::Exists => EEXIST,
            FsError::NameTooLong => ENAMETOOLONG,
            FsError::FileTooLarge => EFBIG,
            FsError::DiskFull | FsError::NoInodes => ENOSPC,
            FsError::NotEmpty => ENOTEMPTY,
            FsError::BadFd => EBADF,
            FsError::TooManyFiles => EMFILE,
            FsError::ReadOnlyFs => EROFS,
            FsError::IllegalSeek => ESPIPE,
            FsError::WouldBlock => EAGAIN,
            FsError::BrokenPipe => EPIPE,
            FsError::BadLength | FsError::InvalidArgument => EINVAL,
            FsError::PermissionDenied => EACCES,
            FsError::Busy => EBUSY,
            FsError::ProtocolError(_) => EPROTO,
            FsError::BadSignature | FsError::NotFat32 | FsError::CorruptChain | FsError::BadImage(_) => EIO,
            FsError::Device(HwError::OutOfRange { .. }) => EINVAL,
            FsError::Device(_) => EIO,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    File,
    Dir,
    Device,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::File => 1,
            Kind::Dir => 2,
            Kind::Device => 3,
        }
    }
}

/// Result of `fstat`, serialized as 16 bytes: kind u8, pad u8[3], size u32,
/// ino u32, nlink u32.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stat {
    pub kind: Kind,
    pub size: u64,
    pub ino: u32,
    pub nlink: u32,
}

pub const STAT_LEN: usize = 16;

impl Stat {
    pub fn to_bytes(&self) -> [u8; STAT_LEN] {
        let mut b = [0u8; STAT_LEN];
        b[0] = self.kind.code();
        b[4..8].copy_from_slice(&(self.size.min(u32::MAX as u64) as u32).to_le_bytes());
        b[8..12].copy_from_slice(&self.ino.to_le_bytes());
        b[12..16].copy_from_slice(&self.nlink.to_le_bytes());
        b
    }
}

/// Directory listing record returned by `read` on a directory: kind u8,
/// pad u8[3], size u32, name[24] NUL-padded.
pub const DIRENT_LEN: usize = 32;
pub const DIRENT_NAME: usize = 24;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirRecord {
    pub name: String,
    pub kind: Kind,
    pub size: u64,
}

impl DirRecord {
    pub fn to_bytes(&self) -> [u8; DIRENT_LEN] {
        let mut b = [0u8; DIRENT_LEN];
        b[0] = self.kind.code();
        b[4..8].copy_from_slice(&(self.size.min(u32::MAX as u64) as u32).to_le_bytes());
        let n = self.name.len().min(DIRENT_NAME - 1);
        b[8..8 + n].copy_from_slice(&self.name.as_bytes()[..n]);
        b
    }

    pub fn from_bytes(b: &[u8]) -> Option<DirRecord> {
        if b.len() < DIRENT_LEN {
            return None;
        }
        let kind = match b[0] {
            1 => Kind::File,
            2 => Kind::Dir,
            3 => Kind::Device,
            _ => return None,
        };
        let size = u32::from_le_bytes(b[4..8].try_into().ok()?) as u64;
        let raw = &b[8..8 + DIRENT_NAME];
        let end = raw.iter().position(|&c| c == 0).unwrap_or(DIRENT_NAME);
        Some(DirRecord { name: String::from_utf8_lossy(&raw[..end]).into_owned(), kind, size })
    }
}

/// Where a normalized absolute path lands.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Route {
    Xv6(Vec<String>),
    Fat(Vec<String>),
    Dev(String),
    DevDir,
    Proc(String),
    ProcDir,
}

/// Joins `path` onto `cwd` and removes `.`, `..` and empty components.
pub fn normalize(cwd: &str, path: &str) -> Result<Vec<String>, FsError> {
    if path.is_empty() {
        return Err(FsError::NotFound);
    }
    if path.len() > MAX_PATH {
        return Err(FsError::NameTooLong);
    }
    let mut parts: Vec<String> = Vec::new();
    let joined = if path.starts_with('/') { path.to_string() } else { format!("{cwd}/{path}") };
    for comp in joined.split('/') {
        match comp {
            "" | "." => {}
            ".." => {
                parts.pop();
            }
            c => parts.push(c.to_string()),
        }
    }
    Ok(parts)
}

pub fn to_path(parts: &[String]) -> String {
    if parts.is_empty() {
        "/".to_string()
    } else {
        parts.iter().map(|p| format!("/{p}")).collect()
    }
}

/// Mount dispatch on normalized components.
pub fn route(parts: &[String]) -> Route {
    match parts.first().map(String::as_str) {
        Some("d") => Route::Fat(parts[1..].to_vec()),
        Some("dev") if parts.len() == 1 => Route::DevDir,
        Some("dev") => Route::Dev(parts[1..].join("/")),
        Some("proc") if parts.len() == 1 => Route::ProcDir,
        Some("proc") => Route::Proc(parts[1..].join("/")),
        _ => Route::Xv6(parts.to_vec()),
    }
}

pub fn resolve(cwd: &str, path: &str) -> Result<Route, FsError> {
    Ok(route(&normalize(cwd, path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(p: &str) -> Route {
        resolve("/", p).unwrap()
    }

    #[test]
    fn mount_dispatch() {
        assert_eq!(r("/d/boot/movie.dat"), Route::Fat(vec!["boot".into(), "movie.dat".into()]));
        assert_eq!(r("/dev/fb"), Route::Dev("fb".into()));
        assert_eq!(r("/cat"), Route::Xv6(vec!["cat".into()]));
        assert_eq!(r("/proc/meminfo"), Route::Proc("meminfo".into()));
        assert_eq!(r("/d"), Route::Fat(vec![]));
        assert_eq!(r("/"), Route::Xv6(vec![]));
    }

    #[test]
    fn relative_and_dotdot() {
        assert_eq!(resolve("/d/sub", "../x").unwrap(), Route::Fat(vec!["x".into()]));
        assert_eq!(resolve("/a", "./b/../c").unwrap(), Route::Xv6(vec!["a".into(), "c".into()]));
        assert_eq!(resolve("/", "/../..").unwrap(), Route::Xv6(vec![]));
        assert_eq!(to_path(&normalize("/x", "y").unwrap()), "/x/y");
    }

    #[test]
    fn dir_record_roundtrip() {
        let d = DirRecord { name: "HELLO.TXT".into(), kind: Kind::File, size: 77 };
        assert_eq!(DirRecord::from_bytes(&d.to_bytes()), Some(d));
    }
}
