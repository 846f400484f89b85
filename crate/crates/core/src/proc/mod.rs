//! Syscall numbering, program images and semaphores.
//!
//! The dispatch table has exactly [`NSYSCALLS`] entries, numbered in the
//! order of [`SYSCALL_NAMES`]. Profiles expose subsets of it; a number
//! outside the caller's profile returns `-ENOSYS`.

pub mod pimg;
pub mod sem;

pub use pimg::{ProgramImage, Segment, PIMG_MAGIC, PIMG_VERSION};
pub use sem::{SemError, SemTable};

pub const NSYSCALLS: usize = 28;

pub const SYS_FORK: u64 = 0;
pub const SYS_EXIT: u64 = 1;
pub const SYS_WAIT: u64 = 2;
pub const SYS_KILL: u64 = 3;
pub const SYS_GETPID: u64 = 4;
pub const SYS_SLEEP: u64 = 5;
pub const SYS_UPTIME: u64 = 6;
pub const SYS_SBRK: u64 = 7;
pub const SYS_EXEC: u64 = 8;
pub const SYS_OPEN: u64 = 9;
pub const SYS_CLOSE: u64 = 10;
pub const SYS_READ: u64 = 11;
pub const SYS_WRITE: u64 = 12;
pub const SYS_LSEEK: u64 = 13;
pub const SYS_DUP: u64 = 14;
pub const SYS_FSTAT: u64 = 15;
pub const SYS_MKDIR: u64 = 16;
pub const SYS_CHDIR: u64 = 17;
pub const SYS_UNLINK: u64 = 18;
pub const SYS_LINK: u64 = 19;
pub const SYS_MKNOD: u64 = 20;
pub const SYS_PIPE: u64 = 21;
pub const SYS_CLONE: u64 = 22;
pub const SYS_SEMCREATE: u64 = 23;
pub const SYS_SEMWAIT: u64 = 24;
pub const SYS_SEMPOST: u64 = 25;
pub const SYS_SEMFREE: u64 = 26;
pub const SYS_FBCTL: u64 = 27;

pub const SYSCALL_NAMES: [&str; NSYSCALLS] = [
    "fork", "exit", "wait", "kill", "getpid", "sleep", "uptime", "sbrk", "exec", "open", "close", "read", "write",
    "lseek", "dup", "fstat", "mkdir", "chdir", "unlink", "link", "mknod", "pipe", "clone", "semcreate", "semwait",
    "sempost", "semfree", "fbctl",
];

/// Coarse grouping used in docs and `sysprobe` output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Category {
    Task,
    File,
    Sync,
}

pub fn category(nr: u64) -> Option<Category> {
    Some(match nr {
        0..=8 => Category::Task,
        9..=21 | 27 => Category::File,
        22..=26 => Category::Sync,
        _ => return None,
    })
}

pub fn syscall_name(nr: u64) -> Option<&'static str> {
    SYSCALL_NAMES.get(nr as usize).copied()
}

pub fn syscall_number(name: &str) -> Option<u64> {
    SYSCALL_NAMES.iter().position(|&n| n == name).map(|i| i as u64)
}

/// open() flags.
pub const O_RDONLY: u64 = 0;
pub const O_WRONLY: u64 = 1;
pub const O_RDWR: u64 = 2;
pub const O_CREATE: u64 = 0x200;
pub const O_TRUNC: u64 = 0x400;
pub const O_NONBLOCK: u64 = 0x800;

pub const CLONE_VM: u64 = 0x100;

pub const SEEK_SET: u64 = 0;
pub const SEEK_CUR: u64 = 1;
pub const SEEK_END: u64 = 2;

pub const FBCTL_FLUSH: u64 = 0;
pub const FBCTL_GET_GEOMETRY: u64 = 1;
pub const GEOMETRY_LEN: usize = 16;

/// Device majors for mknod.
pub const MAJOR_CONSOLE: u16 = 1;
pub const MAJOR_EVENTS: u16 = 2;
pub const MAJOR_FB: u16 = 3;
pub const MAJOR_SB: u16 = 4;
pub const MAJOR_SURFACE: u16 = 5;
pub const MAJOR_EVENT1: u16 = 6;

/// Exit code recorded for a task ended by kill().
pub const EXIT_KILLED: i32 = -9;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_has_28_unique_names() {
        let mut names = SYSCALL_NAMES.to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), NSYSCALLS);
        for (i, n) in SYSCALL_NAMES.iter().enumerate() {
            assert_eq!(syscall_number(n), Some(i as u64));
            assert!(category(i as u64).is_some());
        }
        assert_eq!(syscall_name(28), None);
    }

    #[test]
    fn numbering_is_stable() {
        assert_eq!((SYS_FORK, SYS_EXEC, SYS_PIPE, SYS_CLONE, SYS_FBCTL), (0, 8, 21, 22, 27));
        assert_eq!(syscall_name(SYS_SEMFREE), Some("semfree"));
    }
}
