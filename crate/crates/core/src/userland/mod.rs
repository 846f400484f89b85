//! The bundled user programs and the registry that maps image keys to them.
//!
//! A program image on disk carries a registry key; exec looks it up here to
//! find the step function. Each program is a state machine over [`Cpu`]:
//! the program counter names the state, r0 receives syscall results and
//! everything else lives in registers r1..r7 or in the data segment.

pub mod donut;
pub mod rt;

mod coreutils;
mod evdemo;
mod miner;
mod sh;
mod sysmon;
mod testprogs;
mod tone;

use crate::kernel::{GuestFn, CODE_BASE, DATA_BASE};
use crate::mem::Perms;
use crate::proc::{ProgramImage, Segment};
use crate::profile::Profile;

pub use evdemo::{order_hash, EVDEMO_KIND_KEY, EVDEMO_KIND_TICK, EVDEMO_RECORD};
pub use miner::{fnv1a64, leading_zero_bits, miner_hash};

#[derive(Clone, Copy)]
pub struct AppSpec {
    pub name: &'static str,
    pub run: GuestFn,
    /// Lowest profile the program can run on.
    pub min_profile: Profile,
    /// Minimum argc, including the program name.
    pub entry_args: u16,
    pub data_len: u64,
}

impl std::fmt::Debug for AppSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AppSpec").field("name", &self.name).field("min_profile", &self.min_profile).finish()
    }
}

/// Code pages give room for 4096 states.
pub const CODE_LEN: u64 = 0x4000;

const fn app(name: &'static str, run: GuestFn, min_profile: Profile, entry_args: u16, data_len: u64) -> AppSpec {
    AppSpec { name, run, min_profile, entry_args, data_len }
}

static APPS: &[AppSpec] = &[
    app("sh", sh::run, Profile::P4, 1, 0x4000),
    app("ls", coreutils::ls, Profile::P4, 1, 0x4000),
    app("cat", coreutils::cat, Profile::P4, 1, 0x4000),
    app("echo", coreutils::echo, Profile::P4, 1, 0x4000),
    app("mkdir", coreutils::mkdir, Profile::P4, 2, 0x4000),
    app("rm", coreutils::rm, Profile::P4, 2, 0x4000),
    app("donut", donut::run, Profile::P3, 1, 0x10000),
    app("sysmon", sysmon::run, Profile::P5, 1, 0x20000),
    app("tone", tone::run, Profile::P5, 3, 0x20000),
    app("miner", miner::run, Profile::P5, 3, 0x4000),
    app("evdemo", evdemo::run, Profile::P4, 1, 0x14000),
    app("stackwalk", testprogs::stackwalk, Profile::P3, 1, 0x4000),
    app("jumpstack", testprogs::jumpstack, Profile::P3, 1, 0x4000),
    app("deadlock", testprogs::deadlock, Profile::P5, 1, 0x4000),
    app("pingpong", testprogs::pingpong, Profile::P5, 1, 0x4000),
    app("sysprobe", testprogs::sysprobe, Profile::P3, 1, 0x4000),
];

pub fn apps() -> &'static [AppSpec] {
    APPS
}

pub fn lookup(key: &str) -> Option<&'static AppSpec> {
    APPS.iter().find(|a| a.name == key)
}

/// The PIMG image for a registered program.
pub fn image(spec: &AppSpec) -> ProgramImage {
    let mut code = b"PROTO\0".to_vec();
    code.extend_from_slice(spec.name.as_bytes());
    ProgramImage {
        key: spec.name.to_string(),
        entry_args: spec.entry_args,
        segments: vec![
            Segment { va: CODE_BASE, data: code, mem_len: CODE_LEN, perms: Perms::RX },
            Segment { va: DATA_BASE, data: Vec::new(), mem_len: spec.data_len, perms: Perms::RW },
        ],
    }
}

pub const MOTD: &str = "welcome to proto\n";

/// Files placed on the default ramdisk.
pub fn manifest() -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = APPS.iter().map(|a| (format!("/{}", a.name), image(a).to_bytes())).collect();
    out.push(("/motd".into(), MOTD.as_bytes().to_vec()));
    out.push(("/etc/demo.sh".into(), b"# demo script\necho hello\nls /\n".to_vec()));
    out
}

/// Files placed on the default FAT volume.
pub fn fat_manifest() -> Vec<(String, Vec<u8>)> {
    vec![("/readme.txt".into(), b"proto sd card\n".to_vec())]
}
