//! The shipped executables, driven as a user would.

use std::io::{Cursor, Read, Write};
use std::process::{Command, Output, Stdio};

use fatfs::{FatType, FileSystem, FsOptions};

fn run(bin: &str, args: &[&str], stdin: &str, env: &[(&str, &str)]) -> Output {
    let mut child = Command::new(bin)
        .args(args)
        .env_remove("PROTOSIM_SEED")
        .envs(env.iter().copied())
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn");
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

const PROTOSIM: &str = env!("CARGO_BIN_EXE_protosim");
const MKFS: &str = env!("CARGO_BIN_EXE_mkfs");
const MKFAT: &str = env!("CARGO_BIN_EXE_mkfat");

#[test]
fn mkfs_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m");
    std::fs::create_dir_all(manifest.join("etc")).unwrap();
    std::fs::write(manifest.join("etc/greeting"), b"hi\n").unwrap();
    let a = dir.path().join("a.img");
    let b = dir.path().join("b.img");
    for out in [&a, &b] {
        stdout(&run(MKFS, &["--dir", manifest.to_str().unwrap(), "-o", out.to_str().unwrap()], "", &[]));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn mkfat_volume_mounts_on_the_host() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("sd.img");
    stdout(&run(MKFAT, &["64M", "-o", img.to_str().unwrap()], "", &[]));
    let bytes = std::fs::read(&img).unwrap();
    assert_eq!(bytes.len(), 64 << 20);
    let mut cur = Cursor::new(bytes);
    let fs = FileSystem::new(&mut cur, FsOptions::new()).unwrap();
    assert_eq!(fs.fat_type(), FatType::Fat32);
    assert_eq!(fs.root_dir().iter().count(), 0);
}

#[test]
fn mkfat_rejects_bad_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("sd.img");
    let o = run(MKFAT, &["lots", "-o", img.to_str().unwrap()], "", &[]);
    assert!(!o.status.success());
    let o = run(MKFAT, &["1M", "-o", img.to_str().unwrap()], "", &[]);
    assert!(!o.status.success(), "1 MB is too small for FAT32");
}

#[test]
fn boot_with_both_images_lists_the_sd_card() {
    let dir = tempfile::tempdir().unwrap();
    let files = dir.path().join("files");
    std::fs::create_dir_all(&files).unwrap();
    std::fs::write(files.join("notes.txt"), b"from the host\n").unwrap();
    let fs_img = dir.path().join("fs.img");
    let sd_img = dir.path().join("sd.img");
    stdout(&run(MKFS, &["-o", fs_img.to_str().unwrap()], "", &[]));
    stdout(&run(MKFAT, &["64M", "--dir", files.to_str().unwrap(), "-o", sd_img.to_str().unwrap()], "", &[]));
    let script = "step 300000\ntype ls /d\\n\nstep 200000\ntype cat /d/notes.txt\\n\nstep 200000\nconsole\nshutdown\n";
    let out = stdout(&run(
        PROTOSIM,
        &["boot", "--profile", "p5", "--ramdisk", fs_img.to_str().unwrap(), "--fat", sd_img.to_str().unwrap(), "--seed", "42"],
        script,
        &[],
    ));
    assert!(out.starts_with("ok profile p5 cores 4 seed 42\n"), "{out}");
    assert!(out.contains("NOTES.TXT"), "{out}");
    assert!(out.contains("from the host"), "{out}");
    assert!(out.ends_with("ok bye\n"));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let out = stdout(&run(PROTOSIM, &["boot", "--profile", "p2"], "shutdown\n", &[("PROTOSIM_SEED", "77")]));
    assert!(out.starts_with("ok profile p2 cores 1 seed 77\n"), "{out}");
    let out = stdout(&run(PROTOSIM, &["boot", "--profile", "p2", "--seed", "5"], "shutdown\n", &[("PROTOSIM_SEED", "77")]));
    assert!(out.starts_with("ok profile p2 cores 1 seed 5\n"), "{out}");
}

#[test]
fn script_replay_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("demo.txt");
    std::fs::write(&script, "step 200000\nkey 30 press -\nstep 5000\npanic\nps\nscreenshot -\ntracedump 100\n").unwrap();
    let once = || stdout(&run(PROTOSIM, &["boot", "--profile", "p5", "--script", script.to_str().unwrap()], "", &[]));
    let a = once();
    assert_eq!(a, once());
    assert!(a.contains("ok ppm "));
}

#[test]
fn p3_refuses_evdemo() {
    let out = stdout(&run(PROTOSIM, &["boot", "--profile", "p3"], "spawn evdemo\nshutdown\n", &[]));
    let second = out.lines().nth(1).unwrap();
    assert!(second.starts_with("err spawn "), "{out}");
}

#[test]
fn bad_ramdisk_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.img");
    std::fs::write(&junk, vec![0xAB; 4096]).unwrap();
    let o = run(PROTOSIM, &["boot", "--profile", "p4", "--ramdisk", junk.to_str().unwrap()], "", &[]);
    assert!(!o.status.success());
    let mut out = String::new();
    Cursor::new(o.stdout).read_to_string(&mut out).unwrap();
    assert!(out.starts_with("err badimage "), "{out}");
}
