//! Line-oriented control protocol.
//!
//! Every request is one line, `verb arg...`. Every reply begins with one
//! line, either `ok ...` or `err <code> <message>`. Replies that carry text
//! take the form `ok lines <n>` and are followed by exactly `n` more lines.
//! Commands run strictly in arrival order against one [`Session`].

pub mod images;
pub mod server;

use std::fmt;
use std::path::Path;

use base64::Engine;
use thiserror::Error;

use crate::hwsim::{KeyAction, Mods, TICKS_PER_SEC};
use crate::kernel::{BootConfig, Kernel};
use crate::profile::Profile;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CtlError {
    #[error("notbooted no kernel is running")]
    NotBooted,
    #[error("badargs {0}")]
    BadArgs(String),
    #[error("badprofile {0}")]
    BadProfile(String),
    #[error("badimage {0}")]
    BadImage(String),
    #[error("badconfig {0}")]
    BadConfig(String),
    #[error("spawn {0}")]
    Spawn(String),
    #[error("io {0}")]
    Io(String),
    #[error("unknown verb {0}")]
    Unknown(String),
}

impl CtlError {
    /// The short code that follows `err`.
    pub fn code(&self) -> &'static str {
        match self {
            CtlError::NotBooted => "notbooted",
            CtlError::BadArgs(_) => "badargs",
            CtlError::BadProfile(_) => "badprofile",
            CtlError::BadImage(_) => "badimage",
            CtlError::BadConfig(_) => "badconfig",
            CtlError::Spawn(_) => "spawn",
            CtlError::Io(_) => "io",
            CtlError::Unknown(_) => "unknown",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reply {
    Ok(String),
    Lines(Vec<String>),
    Err(CtlError),
}

impl Reply {
    pub fn is_ok(&self) -> bool {
        !matches!(self, Reply::Err(_))
    }

    fn text(s: &str) -> Reply {
        Reply::Lines(s.lines().map(str::to_string).collect())
    }
}

impl fmt::Display for Reply {
    /// Renders the reply with a trailing newline on every line.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reply::Ok(s) if s.is_empty() => writeln!(f, "ok"),
            Reply::Ok(s) => writeln!(f, "ok {s}"),
            Reply::Lines(lines) => {
                writeln!(f, "ok lines {}", lines.len())?;
                for l in lines {
                    writeln!(f, "{l}")?;
                }
                Ok(())
            }
            Reply::Err(e) => writeln!(f, "err {e}"),
        }
    }
}

/// Images and settings applied by `boot` when a command leaves them out.
#[derive(Clone, Debug, Default)]
pub struct BootDefaults {
    pub profile: Option<Profile>,
    pub seed: u64,
    pub ramdisk: Option<Vec<u8>>,
    pub fat: Option<Vec<u8>>,
}

pub struct Session {
    pub defaults: BootDefaults,
    kernel: Option<Kernel>,
    done: bool,
}

/// FNV-1a 64, used to summarize screenshots in replies.
fn fnv64(data: &[u8]) -> u64 {
    data.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, CtlError> {
    s.parse().map_err(|_| CtlError::BadArgs(format!("{what}: {s:?}")))
}

/// Expands `\n`, `\t`, `\s` (space) and `\\` in `type` arguments.
fn unescape(s: &str) -> String {
    let mut out = String::new();
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('s') => out.push(' '),
            Some(o) => out.push(o),
            None => out.push('\\'),
        }
    }
    out
}

impl Session {
    pub fn new(defaults: BootDefaults) -> Self {
        Session { defaults, kernel: None, done: false }
    }

    pub fn kernel(&self) -> Option<&Kernel> {
        self.kernel.as_ref()
    }

    pub fn kernel_mut(&mut self) -> Option<&mut Kernel> {
        self.kernel.as_mut()
    }

    /// True once `shutdown` has been processed.
    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Boots with the defaults alone, as the CLI does before reading commands.
    pub fn boot_default(&mut self) -> Reply {
        self.reply(|s| s.boot(&[]))
    }

    /// Handles one request line. Blank lines and `#` comments yield `None`.
    pub fn handle(&mut self, line: &str) -> Option<Reply> {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            return None;
        }
        let (verb, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        let rest = rest.trim_start();
        let args: Vec<&str> = rest.split_whitespace().collect();
        Some(self.reply(|s| s.dispatch(verb, rest, &args)))
    }

    fn reply(&mut self, f: impl FnOnce(&mut Self) -> Result<Reply, CtlError>) -> Reply {
        f(self).unwrap_or_else(Reply::Err)
    }

    fn dispatch(&mut self, verb: &str, rest: &str, args: &[&str]) -> Result<Reply, CtlError> {
        match verb {
            "boot" => self.boot(args),
            "shutdown" => {
                if let Some(k) = self.kernel.as_mut() {
                    k.flush_disks().map_err(|e| CtlError::Io(e.to_string()))?;
                }
                self.kernel = None;
                self.done = true;
                Ok(Reply::Ok("bye".into()))
            }
            "step" => {
                let [n] = args else { return Err(CtlError::BadArgs("step <ticks>".into())) };
                let n: u64 = num(n, "ticks")?;
                let k = self.booted()?;
                k.run(n);
                Ok(Reply::Ok(format!("now {}", k.now())))
            }
            "key" => {
                let [code, action, mods] = args else {
                    return Err(CtlError::BadArgs("key <code> <press|release> <mods|->".into()));
                };
                let code: u16 = num(code, "code")?;
                let action = match *action {
                    "press" => KeyAction::Press,
                    "release" => KeyAction::Release,
                    a => return Err(CtlError::BadArgs(format!("action: {a:?}"))),
                };
                let mods = Mods::parse(mods).ok_or_else(|| CtlError::BadArgs(format!("mods: {mods:?}")))?;
                let k = self.booted()?;
                k.inject_key(code, action, mods).map_err(|e| CtlError::Io(e.to_string()))?;
                Ok(Reply::Ok(String::new()))
            }
            "type" => {
                let text = unescape(rest);
                let k = self.booted()?;
                let n = k.type_text(&text).map_err(|e| CtlError::Io(e.to_string()))?;
                Ok(Reply::Ok(format!("keys {n}")))
            }
            "screenshot" => {
                let [dest] = args else { return Err(CtlError::BadArgs("screenshot <path|->".into())) };
                let ppm = self.booted()?.screenshot();
                if *dest == "-" {
                    return Ok(Reply::Ok(format!("ppm {}", base64::engine::general_purpose::STANDARD.encode(&ppm))));
                }
                std::fs::write(Path::new(dest), &ppm).map_err(|e| CtlError::Io(format!("{dest}: {e}")))?;
                Ok(Reply::Ok(format!("bytes {} fnv {:016x}", ppm.len(), fnv64(&ppm))))
            }
            "tracedump" => {
                let n = match args {
                    [] => usize::MAX,
                    [n] => num(n, "count")?,
                    _ => return Err(CtlError::BadArgs("tracedump [n]".into())),
                };
                Ok(Reply::text(&self.booted()?.trace.dump_text(n)))
            }
            "ps" => Ok(Reply::Lines(self.booted()?.ps())),
            "panic" => Ok(Reply::text(&self.booted()?.panic_button())),
            "status" => Ok(Reply::Ok(self.booted()?.status())),
            "console" => Ok(Reply::text(&self.booted()?.console_text())),
            "spawn" => {
                if args.is_empty() {
                    return Err(CtlError::BadArgs("spawn <prog> [args...]".into()));
                }
                let tid = self.booted()?.spawn(args).map_err(|e| CtlError::Spawn(e.to_string()))?;
                Ok(Reply::Ok(format!("tid {tid}")))
            }
            "exitcode" => {
                let [tid] = args else { return Err(CtlError::BadArgs("exitcode <tid>".into())) };
                let tid = num(tid, "tid")?;
                let k = self.booted()?;
                Ok(Reply::Ok(match k.exit_code(tid) {
                    Some(c) => format!("exit {c}"),
                    None if k.is_live(tid) => "running".into(),
                    None => "unknown".into(),
                }))
            }
            v => Err(CtlError::Unknown(v.into())),
        }
    }

    fn booted(&mut self) -> Result<&mut Kernel, CtlError> {
        self.kernel.as_mut().ok_or(CtlError::NotBooted)
    }

    /// `boot [profile] [seed=N] [cores=N] [nowm] [nosysmon]`
    fn boot(&mut self, args: &[&str]) -> Result<Reply, CtlError> {
        let mut profile = self.defaults.profile;
        let mut seed = self.defaults.seed;
        let mut cores = None;
        let (mut wm, mut sysmon) = (true, true);
        for a in args {
            match a.split_once('=') {
                Some(("seed", v)) => seed = num(v, "seed")?,
                Some(("cores", v)) => cores = Some(num(v, "cores")?),
                Some((k, _)) => return Err(CtlError::BadArgs(format!("option {k:?}"))),
                None => match *a {
                    "nowm" => wm = false,
                    "nosysmon" => sysmon = false,
                    p => profile = Some(p.parse().map_err(|_| CtlError::BadProfile(p.into()))?),
                },
            }
        }
        let profile = profile.ok_or_else(|| CtlError::BadArgs("boot <profile>".into()))?;
        let mut cfg = BootConfig::new(profile).seed(seed);
        cfg.cores = cores;
        cfg.ramdisk = self.defaults.ramdisk.clone();
        cfg.fat = self.defaults.fat.clone();
        cfg.wm = wm;
        cfg.sysmon = sysmon;
        let k = Kernel::boot(cfg).map_err(|e| match e {
            crate::kernel::BootError::BadImage(m) => CtlError::BadImage(m),
            crate::kernel::BootError::BadConfig(m) => CtlError::BadConfig(m),
        })?;
        let reply = format!("profile {} cores {} seed {seed}", k.profile, k.ncores());
        self.kernel = Some(k);
        Ok(Reply::Ok(reply))
    }
}

/// Converts a wall-clock interval into simulated ticks at `ratio`
/// simulated seconds per host second.
pub fn realtime_ticks(elapsed: std::time::Duration, ratio: f64) -> u64 {
    (elapsed.as_secs_f64() * ratio * TICKS_PER_SEC as f64).round() as u64
}
