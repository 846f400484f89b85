//! `mkfs [--dir MANIFEST] [--no-apps] [--blocks N] [--inodes N] -o fs.img`
//!
//! Builds an xv6fs ramdisk image. The bundled programs are included unless
//! `--no-apps`; files under `--dir` are added on top.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use protosim::ctl::images::{merge, read_manifest_dir};
use protosim::userland;
use protosim::xv6fs::{self, DEFAULT_BLOCKS, DEFAULT_INODES};

#[derive(Parser)]
#[command(name = "mkfs", about = "Build an xv6fs ramdisk image")]
struct Args {
    /// Directory whose files are copied into the image.
    #[arg(long)]
    dir: Option<PathBuf>,
    /// Leave out the bundled programs.
    #[arg(long)]
    no_apps: bool,
    #[arg(long, default_value_t = DEFAULT_BLOCKS)]
    blocks: u32,
    #[arg(long, default_value_t = DEFAULT_INODES)]
    inodes: u32,
    #[arg(short, long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let base = if args.no_apps { Vec::new() } else { userland::manifest() };
    let extra = match &args.dir {
        Some(d) => match read_manifest_dir(d) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("mkfs: {}: {e}", d.display());
                return ExitCode::FAILURE;
            }
        },
        None => Vec::new(),
    };
    let manifest = merge(base, extra);
    let img = match xv6fs::mkfs(&manifest, args.blocks, args.inodes) {
        Ok(img) => img,
        Err(e) => {
            eprintln!("mkfs: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = std::fs::write(&args.output, &img) {
        eprintln!("mkfs: {}: {e}", args.output.display());
        return ExitCode::FAILURE;
    }
    println!("mkfs: {} files, {} bytes", manifest.len(), img.len());
    ExitCode::SUCCESS
}
