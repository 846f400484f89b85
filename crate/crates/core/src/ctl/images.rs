//! Helpers shared by the `mkfs` and `mkfat` tools.

use std::fs;
use std::io;
use std::path::Path;

use crate::xv6fs::ManifestEntry;

/// Every regular file under `root`, keyed by its path relative to `root`
/// with a leading `/`, sorted by path so the output is deterministic.
pub fn read_manifest_dir(root: &Path) -> io::Result<Vec<ManifestEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<ManifestEntry>) -> io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.is_file() {
                let rel = path.strip_prefix(root).expect("under root");
                let name = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.push((format!("/{name}"), fs::read(&path)?));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Adds `extra` to `base`, replacing entries with the same path.
pub fn merge(base: Vec<ManifestEntry>, extra: Vec<ManifestEntry>) -> Vec<ManifestEntry> {
    let mut out: Vec<ManifestEntry> = base.into_iter().filter(|(p, _)| !extra.iter().any(|(q, _)| q == p)).collect();
    out.extend(extra);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Parses `4096`, `512K`, `64M` or `1G` into bytes.
pub fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let (digits, mult) = match s.char_indices().last()? {
        (i, 'k' | 'K') => (&s[..i], 1 << 10),
        (i, 'm' | 'M') => (&s[..i], 1 << 20),
        (i, 'g' | 'G') => (&s[..i], 1 << 30),
        _ => (s, 1),
    };
    digits.parse::<u64>().ok()?.checked_mul(mult)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_size("64M"), Some(64 << 20));
        assert_eq!(parse_size("512k"), Some(512 << 10));
        assert_eq!(parse_size("1G"), Some(1 << 30));
        assert_eq!(parse_size("4096"), Some(4096));
        assert_eq!(parse_size("M"), None);
        assert_eq!(parse_size("12X"), None);
        assert_eq!(parse_size(""), None);
    }

    #[test]
    fn walks_sorted_and_merges() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("etc")).unwrap();
        fs::write(dir.path().join("motd"), b"mine").unwrap();
        fs::write(dir.path().join("etc/a"), b"a").unwrap();
        let m = read_manifest_dir(dir.path()).unwrap();
        let names: Vec<&str> = m.iter().map(|(p, _)| p.as_str()).collect();
        assert_eq!(names, ["/etc/a", "/motd"]);
        let merged = merge(vec![("/motd".into(), b"old".to_vec()), ("/sh".into(), vec![1])], m);
        assert_eq!(merged.len(), 3);
        assert_eq!(merged.iter().find(|(p, _)| p == "/motd").unwrap().1, b"mine");
    }
}
