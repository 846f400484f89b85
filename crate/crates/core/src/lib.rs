//! Deterministic simulator of a small teaching operating system.

pub mod ctl;
pub mod devio;
pub mod fatfs;
pub mod hwsim;
pub mod kernel;
pub mod mem;
pub mod proc;
pub mod profile;
pub mod sched;
pub mod trace;
pub mod userland;
pub mod vfs;
pub mod wm;
pub mod xv6fs;
