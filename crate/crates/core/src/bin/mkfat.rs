//! `mkfat SIZE [--dir DIR] -o sd.img`
//!
//! Formats a FAT32 volume of SIZE bytes (`64M`, `1G`, ...), optionally
//! filled with the files under DIR.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use protosim::ctl::images::{parse_size, read_manifest_dir};
use protosim::fatfs::mkfat::mkfat_with;

#[derive(Parser)]
#[command(name = "mkfat", about = "Format a FAT32 volume image")]
struct Args {
    /// Volume size, with an optional K, M or G suffix.
    size: String,
    #[arg(long)]
    dir: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let Some(bytes) = parse_size(&args.size) else {
        eprintln!("mkfat: bad size {:?}", args.size);
        return ExitCode::FAILURE;
    };
    let files = match &args.dir {
        Some(d) => match read_manifest_dir(d) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("mkfat: {}: {e}", d.display());
                return ExitCode::FAILURE;
            }
        },
        None => Vec::new(),
    };
    let img = match mkfat_with(bytes, &files) {
        Ok(img) => img,
        Err(e) => {
            eprintln!("mkfat: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = std::fs::write(&args.output, &img) {
        eprintln!("mkfat: {}: {e}", args.output.display());
        return ExitCode::FAILURE;
    }
    println!("mkfat: {} bytes, {} files", img.len(), files.len());
    ExitCode::SUCCESS
}
