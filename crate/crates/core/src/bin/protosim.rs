//! `protosim boot --profile p5 [--ramdisk fs.img] [--fat sd.img] [--seed N]
//! [--listen PORT] [--script FILE] [--realtime R]`
//!
//! Boots the simulator and then serves control commands: from the script
//! file if one is given, otherwise from stdin, plus any socket clients.

use std::fs;
use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::mpsc;

use clap::{Parser, Subcommand};
use protosim::ctl::server;
use protosim::ctl::{BootDefaults, Session};
use protosim::profile::Profile;

#[derive(Parser)]
#[command(name = "protosim", about = "Deterministic simulator of the Proto teaching OS")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Boot a profile and serve control commands.
    Boot {
        #[arg(long, default_value = "p5")]
        profile: Profile,
        /// xv6fs image for "/"; defaults to the built-in app manifest.
        #[arg(long)]
        ramdisk: Option<PathBuf>,
        /// FAT32 image for "/d"; defaults to an empty 64 MB volume.
        #[arg(long)]
        fat: Option<PathBuf>,
        /// Boot seed; falls back to PROTOSIM_SEED, then 0.
        #[arg(long, env = "PROTOSIM_SEED", default_value_t = 0)]
        seed: u64,
        /// Also accept commands on 127.0.0.1:PORT.
        #[arg(long)]
        listen: Option<u16>,
        /// Run commands from FILE instead of stdin.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Advance simulated time at R simulated seconds per host second.
        #[arg(long)]
        realtime: Option<f64>,
    },
}

fn read_image(path: &Option<PathBuf>) -> Result<Option<Vec<u8>>, String> {
    path.as_ref().map(|p| fs::read(p).map_err(|e| format!("{}: {e}", p.display()))).transpose()
}

fn main() -> ExitCode {
    let Cmd::Boot { profile, ramdisk, fat, seed, listen, script, realtime } = Cli::parse().cmd;
    let images = read_image(&ramdisk).and_then(|r| Ok((r, read_image(&fat)?)));
    let (ramdisk, fat) = match images {
        Ok(v) => v,
        Err(e) => {
            eprintln!("protosim: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut session = Session::new(BootDefaults { profile: Some(profile), seed, ramdisk, fat });
    let booted = session.boot_default();
    print!("{booted}");
    if !booted.is_ok() {
        return ExitCode::FAILURE;
    }

    if let Some(path) = &script {
        let file = match fs::File::open(path) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("protosim: {}: {e}", path.display());
                return ExitCode::FAILURE;
            }
        };
        if let Err(e) = server::run_stream(&mut session, BufReader::new(file), &mut io::stdout()) {
            eprintln!("protosim: {e}");
            return ExitCode::FAILURE;
        }
        if listen.is_none() || session.is_done() {
            return ExitCode::SUCCESS;
        }
    }

    if listen.is_none() && realtime.is_none() {
        return match server::run_stream(&mut session, io::stdin().lock(), &mut io::stdout()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("protosim: {e}");
                ExitCode::FAILURE
            }
        };
    }

    let (tx, rx) = mpsc::channel();
    if let Some(port) = listen {
        match server::listen(port, tx.clone()) {
            Ok(bound) => eprintln!("protosim: listening on 127.0.0.1:{bound}"),
            Err(e) => {
                eprintln!("protosim: listen {port}: {e}");
                return ExitCode::FAILURE;
            }
        }
    }
    if script.is_none() {
        server::stdin_client(tx.clone());
    }
    drop(tx);
    server::run_queue(&mut session, rx, realtime);
    ExitCode::SUCCESS
}
