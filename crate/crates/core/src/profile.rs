//! Boot profiles p1..p5: staged feature sets, each containing the previous.

use std::fmt;
use std::str::FromStr;

use crate::proc::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Profile {
    /// Bare metal: framebuffer, console log and timers. Frames are drawn in
    /// the timer interrupt handler.
    P1,
    /// Adds the scheduler and sleep; kernel-thread donuts.
    P2,
    /// Adds virtual memory and user tasks. No files: five syscalls, and the
    /// bundled images are started by a file-less exec that maps the
    /// framebuffer.
    P3,
    /// Adds the VFS, ramdisk filesystem, device files and pipes.
    P4,
    /// Adds FAT32, threads, semaphores, four cores, the window manager and
    /// nonblocking IO.
    P5,
}

pub const P3_SYSCALLS: [u64; 5] = [SYS_FORK, SYS_EXIT, SYS_SBRK, SYS_SLEEP, SYS_WRITE];

impl Profile {
    pub const ALL: [Profile; 5] = [Profile::P1, Profile::P2, Profile::P3, Profile::P4, Profile::P5];

    pub fn level(self) -> u8 {
        self as u8 + 1
    }

    pub fn name(self) -> &'static str {
        ["p1", "p2", "p3", "p4", "p5"][self as usize]
    }

    pub fn default_cores(self) -> usize {
        if self == Profile::P5 {
            4
        } else {
            1
        }
    }

    pub fn has_scheduler(self) -> bool {
        self >= Profile::P2
    }

    pub fn has_user_tasks(self) -> bool {
        self >= Profile::P3
    }

    pub fn has_vfs(self) -> bool {
        self >= Profile::P4
    }

    pub fn has_fat(self) -> bool {
        self >= Profile::P5
    }

    pub fn has_wm(self) -> bool {
        self >= Profile::P5
    }

    pub fn allows_nonblock(self) -> bool {
        self >= Profile::P5
    }

    /// Whether syscall `nr` is wired into this profile's dispatch table.
    pub fn allows(self, nr: u64) -> bool {
        if nr as usize >= NSYSCALLS {
            return false;
        }
        match self {
            Profile::P1 | Profile::P2 => false,
            Profile::P3 => P3_SYSCALLS.contains(&nr),
            Profile::P4 => !matches!(nr, SYS_CLONE | SYS_SEMCREATE..=SYS_SEMFREE),
            Profile::P5 => true,
        }
    }

    pub fn syscall_count(self) -> usize {
        (0..NSYSCALLS as u64).filter(|&nr| self.allows(nr)).count()
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown profile {0:?} (expected p1..p5)")]
pub struct BadProfile(pub String);

impl FromStr for Profile {
    type Err = BadProfile;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Profile::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| BadProfile(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_syscall_sets() {
        let counts: Vec<usize> = Profile::ALL.iter().map(|p| p.syscall_count()).collect();
        assert_eq!(counts, vec![0, 0, 5, 23, 28]);
        for w in Profile::ALL.windows(2) {
            for nr in 0..NSYSCALLS as u64 {
                assert!(!w[0].allows(nr) || w[1].allows(nr));
            }
        }
    }

    #[test]
    fn p3_lacks_pipe_and_open() {
        assert!(!Profile::P3.allows(SYS_PIPE));
        assert!(!Profile::P3.allows(SYS_OPEN));
        assert!(Profile::P3.allows(SYS_WRITE));
        assert!(!Profile::P5.allows(28));
    }

    #[test]
    fn parse_names() {
        assert_eq!("p4".parse::<Profile>(), Ok(Profile::P4));
        assert!("p6".parse::<Profile>().is_err());
        assert_eq!(Profile::P5.level(), 5);
    }
}
