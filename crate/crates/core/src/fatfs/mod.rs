//! FAT32 driver for a bare volume image (no partition table).
//!
//! Metadata (FAT sectors, directory entries) goes through the buffer
//! cache. File content is moved with ranged device requests: each run of
//! consecutive clusters becomes one `read_range_bypass` call. Setting
//! [`FatFs::set_bypass`] to false routes content through the cache one
//! sector at a time instead, which is what the bypass is measured against.
//!
//! Open files and directories are represented by pseudo-inodes that hold
//! the cluster chain and the location of their directory entry. Size and
//! first-cluster changes are written back to that entry on close and at
//! unmount.

pub mod mkfat;

use std::collections::BTreeMap;

use crate::hwsim::SECTOR_SIZE;
use crate::vfs::{DevNo, DirRecord, FsError, Kind, Stat, Storage};

pub const FAT32_MIN_CLUSTERS: u32 = 65_525;
pub const EOC: u32 = 0x0FFF_FFFF;
pub const EOC_MIN: u32 = 0x0FFF_FFF8;
pub const BAD_CLUSTER: u32 = 0x0FFF_FFF7;
pub const ENTRY_MASK: u32 = 0x0FFF_FFFF;
pub const DIRENT_SIZE: usize = 32;

pub const ATTR_READ_ONLY: u8 = 0x01;
pub const ATTR_HIDDEN: u8 = 0x02;
pub const ATTR_SYSTEM: u8 = 0x04;
pub const ATTR_VOLUME_ID: u8 = 0x08;
pub const ATTR_DIRECTORY: u8 = 0x10;
pub const ATTR_ARCHIVE: u8 = 0x20;
pub const ATTR_LFN: u8 = 0x0F;

/// Fixed timestamp written into new entries: 2020-01-01 00:00.
pub const EPOCH_DATE: u16 = (40 << 9) | (1 << 5) | 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Volume {
    pub bytes_per_sector: u32,
    pub sectors_per_cluster: u32,
    pub reserved_sectors: u32,
    pub nfats: u32,
    pub fat_size: u32,
    pub fat_start: u64,
    pub data_start: u64,
    pub root_cluster: u32,
    pub total_clusters: u32,
    pub total_sectors: u64,
}

impl Volume {
    pub fn parse(boot: &[u8]) -> Result<Volume, FsError> {
        if boot.len() < SECTOR_SIZE || boot[510] != 0x55 || boot[511] != 0xAA {
            return Err(FsError::BadSignature);
        }
        let u16_at = |o: usize| u16::from_le_bytes([boot[o], boot[o + 1]]) as u32;
        let u32_at = |o: usize| u32::from_le_bytes(boot[o..o + 4].try_into().unwrap());
        let bps = u16_at(0x0B);
        let spc = boot[0x0D] as u32;
        let reserved = u16_at(0x0E);
        let nfats = boot[0x10] as u32;
        let root_entries = u16_at(0x11);
        let total16 = u16_at(0x13);
        let fat16 = u16_at(0x16);
        let total32 = u32_at(0x20);
        if bps != SECTOR_SIZE as u32 || spc == 0 || !spc.is_power_of_two() || nfats == 0 || reserved == 0 {
            return Err(FsError::BadImage("unsupported BPB geometry".into()));
        }
        if fat16 != 0 || root_entries != 0 {
            return Err(FsError::NotFat32);
        }
        let fat_size = u32_at(0x24);
        let total = if total16 != 0 { total16 } else { total32 } as u64;
        let fat_start = reserved as u64;
        let data_start = fat_start + nfats as u64 * fat_size as u64;
        if data_start >= total {
            return Err(FsError::BadImage("FAT region exceeds volume".into()));
        }
        let total_clusters = ((total - data_start) / spc as u64) as u32;
        if total_clusters < FAT32_MIN_CLUSTERS {
            return Err(FsError::NotFat32);
        }
        if (fat_size as u64 * SECTOR_SIZE as u64 / 4) < total_clusters as u64 + 2 {
            return Err(FsError::BadImage("FAT too small for cluster count".into()));
        }
        Ok(Volume {
            bytes_per_sector: bps,
            sectors_per_cluster: spc,
            reserved_sectors: reserved,
            nfats,
            fat_size,
            fat_start,
            data_start,
            root_cluster: u32_at(0x2C),
            total_clusters,
            total_sectors: total,
        })
    }

    pub fn cluster_bytes(&self) -> u64 {
        self.sectors_per_cluster as u64 * SECTOR_SIZE as u64
    }

    pub fn cluster_lba(&self, c: u32) -> u64 {
        self.data_start + (c as u64 - 2) * self.sectors_per_cluster as u64
    }

    pub fn valid_cluster(&self, c: u32) -> bool {
        c >= 2 && c < self.total_clusters + 2
    }
}

/// Converts a name to the on-disk 11-byte 8.3 form.
pub fn to_short_name(name: &str) -> Result<[u8; 11], FsError> {
    if name == "." || name == ".." {
        let mut out = [b' '; 11];
        out[..name.len()].copy_from_slice(name.as_bytes());
        return Ok(out);
    }
    let (base, ext) = match name.rfind('.') {
        Some(i) => (&name[..i], &name[i + 1..]),
        None => (name, ""),
    };
    if base.is_empty() || base.len() > 8 || ext.len() > 3 || ext.contains('.') {
        return Err(FsError::NameTooLong);
    }
    let ok = |c: u8| c.is_ascii_alphanumeric() || b"!#$%&'()-@^_`{}~".contains(&c);
    let mut out = [b' '; 11];
    for (i, c) in base.bytes().enumerate() {
        if !ok(c) {
            return Err(FsError::InvalidArgument);
        }
        out[i] = c.to_ascii_uppercase();
    }
    for (i, c) in ext.bytes().enumerate() {
        if !ok(c) {
            return Err(FsError::InvalidArgument);
        }
        out[8 + i] = c.to_ascii_uppercase();
    }
    Ok(out)
}

pub fn from_short_name(raw: &[u8]) -> String {
    let mut first = raw[0];
    if first == 0x05 {
        first = 0xE5;
    }
    let mut base: Vec<u8> = std::iter::once(first).chain(raw[1..8].iter().copied()).collect();
    while base.last() == Some(&b' ') {
        base.pop();
    }
    let mut ext: Vec<u8> = raw[8..11].to_vec();
    while ext.last() == Some(&b' ') {
        ext.pop();
    }
    let mut s = String::from_utf8_lossy(&base).into_owned();
    if !ext.is_empty() {
        s.push('.');
        s.push_str(&String::from_utf8_lossy(&ext));
    }
    s
}

/// A parsed 32-byte directory entry and where it lives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FatDirEntry {
    pub name: String,
    pub attr: u8,
    pub first_cluster: u32,
    pub size: u32,
    /// (cluster of the directory, byte offset within that cluster).
    pub loc: (u32, u32),
}

impl FatDirEntry {
    pub fn is_dir(&self) -> bool {
        self.attr & ATTR_DIRECTORY != 0
    }

    pub fn kind(&self) -> Kind {
        if self.is_dir() {
            Kind::Dir
        } else {
            Kind::File
        }
    }
}

fn encode_entry(name: &[u8; 11], attr: u8, first_cluster: u32, size: u32) -> [u8; DIRENT_SIZE] {
    let mut e = [0u8; DIRENT_SIZE];
    e[..11].copy_from_slice(name);
    e[11] = attr;
    e[16..18].copy_from_slice(&EPOCH_DATE.to_le_bytes());
    e[18..20].copy_from_slice(&EPOCH_DATE.to_le_bytes());
    e[20..22].copy_from_slice(&((first_cluster >> 16) as u16).to_le_bytes());
    e[24..26].copy_from_slice(&EPOCH_DATE.to_le_bytes());
    e[26..28].copy_from_slice(&(first_cluster as u16).to_le_bytes());
    e[28..32].copy_from_slice(&size.to_le_bytes());
    e
}

pub type PiId = u32;

#[derive(Clone, Debug)]
pub struct PseudoInode {
    pub first_cluster: u32,
    pub size: u32,
    pub kind: Kind,
    /// None for the root directory.
    pub dirent: Option<(u32, u32)>,
    pub chain: Vec<u32>,
    refs: u32,
    dirty: bool,
}

/// A mounted FAT32 volume.
#[derive(Clone, Debug)]
pub struct FatFs {
    dev: DevNo,
    vol: Volume,
    free_hint: u32,
    bypass: bool,
    pis: BTreeMap<PiId, PseudoInode>,
    by_loc: BTreeMap<Option<(u32, u32)>, PiId>,
    next_pi: PiId,
}

impl FatFs {
    pub fn mount(st: &mut Storage, dev: DevNo) -> Result<FatFs, FsError> {
        if st.dev(dev).size_sectors() == 0 {
            return Err(FsError::BadSignature);
        }
        let boot = st.bread(dev, 0)?;
        let vol = Volume::parse(&boot)?;
        if vol.total_sectors > st.dev(dev).size_sectors() {
            return Err(FsError::BadImage("BPB larger than device".into()));
        }
        if !vol.valid_cluster(vol.root_cluster) {
            return Err(FsError::BadImage("bad root cluster".into()));
        }
        let fs = FatFs { dev, vol, free_hint: 2, bypass: true, pis: BTreeMap::new(), by_loc: BTreeMap::new(), next_pi: 1 };
        fs.list_dir(st, vol.root_cluster)?;
        Ok(fs)
    }

    pub fn volume(&self) -> &Volume {
        &self.vol
    }

    pub fn dev(&self) -> DevNo {
        self.dev
    }

    pub fn set_bypass(&mut self, on: bool) {
        self.bypass = on;
    }

    pub fn bypass(&self) -> bool {
        self.bypass
    }

    pub fn open_count(&self) -> usize {
        self.pis.len()
    }

    pub fn pi(&self, id: PiId) -> Option<&PseudoInode> {
        self.pis.get(&id)
    }

    fn fat_loc(&self, c: u32, copy: u32) -> (u64, usize) {
        let byte = c as u64 * 4;
        (self.vol.fat_start + copy as u64 * self.vol.fat_size as u64 + byte / SECTOR_SIZE as u64, (byte % SECTOR_SIZE as u64) as usize)
    }

    pub fn fat_get(&self, st: &mut Storage, c: u32) -> Result<u32, FsError> {
        let (lba, off) = self.fat_loc(c, 0);
        let s = st.bread(self.dev, lba)?;
        Ok(u32::from_le_bytes(s[off..off + 4].try_into().unwrap()) & ENTRY_MASK)
    }

    /// Updates an entry in every FAT copy, keeping the reserved high bits.
    fn fat_set(&self, st: &mut Storage, c: u32, v: u32) -> Result<(), FsError> {
        for copy in 0..self.vol.nfats {
            let (lba, off) = self.fat_loc(c, copy);
            let s = st.bread(self.dev, lba)?;
            let old = u32::from_le_bytes(s[off..off + 4].try_into().unwrap());
            let new = (old & !ENTRY_MASK) | (v & ENTRY_MASK);
            st.bpatch(self.dev, lba, off, &new.to_le_bytes())?;
        }
        Ok(())
    }

    /// Follows a chain from `first`, rejecting cycles and bad links.
    pub fn chain(&self, st: &mut Storage, first: u32) -> Result<Vec<u32>, FsError> {
        let mut out = Vec::new();
        if first == 0 {
            return Ok(out);
        }
        let mut c = first;
        loop {
            if !self.vol.valid_cluster(c) || out.len() > self.vol.total_clusters as usize {
                return Err(FsError::CorruptChain);
            }
            out.push(c);
            let next = self.fat_get(st, c)?;
            if next >= EOC_MIN {
                return Ok(out);
            }
            if next == 0 || next == BAD_CLUSTER {
                return Err(FsError::CorruptChain);
            }
            c = next;
        }
    }

    /// Finds `n` free clusters first-fit from the hint, without claiming them.
    fn find_free(&self, st: &mut Storage, n: usize) -> Result<Vec<u32>, FsError> {
        let mut found = Vec::with_capacity(n);
        let total = self.vol.total_clusters;
        let start = self.free_hint.clamp(2, total + 1);
        let mut c = start;
        for _ in 0..total {
            if found.len() == n {
                break;
            }
            if self.fat_get(st, c)? == 0 {
                found.push(c);
            }
            c = if c + 1 >= total + 2 { 2 } else { c + 1 };
        }
        Ok(found)
    }

    /// Links `n` new clusters after `last` (0 for a new chain).
    fn extend_chain(&mut self, st: &mut Storage, last: u32, n: usize) -> Result<Vec<u32>, FsError> {
        let free = self.find_free(st, n)?;
        if free.len() < n {
            return Err(FsError::DiskFull);
        }
        for (i, &c) in free.iter().enumerate() {
            let next = free.get(i + 1).copied().unwrap_or(EOC);
            self.fat_set(st, c, next)?;
        }
        if last != 0 {
            self.fat_set(st, last, free[0])?;
        }
        self.free_hint = free.last().map_or(self.free_hint, |&c| c + 1);
        Ok(free)
    }

    fn free_chain(&mut self, st: &mut Storage, first: u32) -> Result<(), FsError> {
        let chain = self.chain(st, first)?;
        for &c in &chain {
            self.fat_set(st, c, 0)?;
        }
        if let Some(&lo) = chain.iter().min() {
            self.free_hint = self.free_hint.min(lo);
        }
        Ok(())
    }

    fn zero_cluster(&self, st: &mut Storage, c: u32) -> Result<(), FsError> {
        let lba = self.vol.cluster_lba(c);
        for i in 0..self.vol.sectors_per_cluster as u64 {
            st.bwrite(self.dev, lba + i, &[0u8; SECTOR_SIZE])?;
        }
        Ok(())
    }

    fn entry_lba(&self, loc: (u32, u32)) -> (u64, usize) {
        (self.vol.cluster_lba(loc.0) + (loc.1 as u64 / SECTOR_SIZE as u64), loc.1 as usize % SECTOR_SIZE)
    }

    /// Raw 32-byte slots of a directory with their locations.
    fn dir_slots(&self, st: &mut Storage, first: u32) -> Result<Vec<([u8; DIRENT_SIZE], (u32, u32))>, FsError> {
        let mut out = Vec::new();
        for c in self.chain(st, first)? {
            let lba = self.vol.cluster_lba(c);
            for s in 0..self.vol.sectors_per_cluster as u64 {
                let sec = st.bread(self.dev, lba + s)?;
                for (i, e) in sec.chunks(DIRENT_SIZE).enumerate() {
                    let off = (s as usize * SECTOR_SIZE + i * DIRENT_SIZE) as u32;
                    out.push((e.try_into().unwrap(), (c, off)));
                    if e[0] == 0 {
                        return Ok(out);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Live entries in on-disk order, skipping deleted, long-name and
    /// volume-label slots. Dot entries are included.
    pub fn list_dir(&self, st: &mut Storage, first: u32) -> Result<Vec<FatDirEntry>, FsError> {
        let mut out = Vec::new();
        for (e, loc) in self.dir_slots(st, first)? {
            if e[0] == 0 {
                break;
            }
            let attr = e[11];
            if e[0] == 0xE5 || attr & ATTR_LFN == ATTR_LFN || attr & ATTR_VOLUME_ID != 0 {
                continue;
            }
            let hi = u16::from_le_bytes([e[20], e[21]]) as u32;
            let lo = u16::from_le_bytes([e[26], e[27]]) as u32;
            out.push(FatDirEntry {
                name: from_short_name(&e[..11]),
                attr,
                first_cluster: (hi << 16) | lo,
                size: u32::from_le_bytes(e[28..32].try_into().unwrap()),
                loc,
            });
        }
        Ok(out)
    }

    /// Directory contents as listing records, without `.` and `..`.
    pub fn readdir(&self, st: &mut Storage, pi: PiId) -> Result<Vec<DirRecord>, FsError> {
        let p = self.pis.get(&pi).ok_or(FsError::BadFd)?;
        if p.kind != Kind::Dir {
            return Err(FsError::NotADirectory);
        }
        let first = p.first_cluster;
        let mut out = Vec::new();
        for e in self.list_dir(st, first)? {
            if e.name == "." || e.name == ".." {
                continue;
            }
            // An open file's size may be ahead of its entry.
            let size = self.by_loc.get(&Some(e.loc)).and_then(|id| self.pis.get(id)).map_or(e.size, |p| p.size);
            out.push(DirRecord { name: e.name.clone(), kind: e.kind(), size: size as u64 });
        }
        Ok(out)
    }

    fn find_in(&self, st: &mut Storage, dir_first: u32, name: &str) -> Result<FatDirEntry, FsError> {
        let want = name.to_ascii_uppercase();
        self.list_dir(st, dir_first)?.into_iter().find(|e| e.name == want).ok_or(FsError::NotFound)
    }

    fn dir_cluster(&self, e: &FatDirEntry) -> u32 {
        if e.first_cluster == 0 {
            self.vol.root_cluster
        } else {
            e.first_cluster
        }
    }

    /// Walks `parts` from the root. `None` for the root itself.
    pub fn lookup(&self, st: &mut Storage, parts: &[String]) -> Result<Option<FatDirEntry>, FsError> {
        let mut dir = self.vol.root_cluster;
        let mut cur = None;
        for (i, p) in parts.iter().enumerate() {
            let e = self.find_in(st, dir, p)?;
            if i + 1 < parts.len() {
                if !e.is_dir() {
                    return Err(FsError::NotADirectory);
                }
                dir = self.dir_cluster(&e);
            }
            cur = Some(e);
        }
        Ok(cur)
    }

    fn parent_dir(&self, st: &mut Storage, parts: &[String]) -> Result<u32, FsError> {
        match self.lookup(st, &parts[..parts.len() - 1])? {
            None => Ok(self.vol.root_cluster),
            Some(e) if e.is_dir() => Ok(self.dir_cluster(&e)),
            Some(_) => Err(FsError::NotADirectory),
        }
    }

    /// Writes a new entry into the first free slot, growing the directory.
    fn add_entry(&mut self, st: &mut Storage, dir: u32, entry: &[u8; DIRENT_SIZE]) -> Result<(u32, u32), FsError> {
        let slots = self.dir_slots(st, dir)?;
        let free = slots.iter().find(|(e, _)| e[0] == 0 || e[0] == 0xE5).map(|(_, l)| *l);
        let loc = match free {
            Some(l) => l,
            None => {
                let last = *self.chain(st, dir)?.last().ok_or(FsError::CorruptChain)?;
                let c = self.extend_chain(st, last, 1)?[0];
                self.zero_cluster(st, c)?;
                (c, 0)
            }
        };
        let (lba, off) = self.entry_lba(loc);
        st.bpatch(self.dev, lba, off, entry)?;
        Ok(loc)
    }

    fn make_pi(&mut self, st: &mut Storage, e: Option<&FatDirEntry>) -> Result<PiId, FsError> {
        let loc = e.map(|e| e.loc);
        if let Some(&id) = self.by_loc.get(&loc) {
            self.pis.get_mut(&id).expect("indexed").refs += 1;
            return Ok(id);
        }
        let (first, size, kind) = match e {
            None => (self.vol.root_cluster, 0, Kind::Dir),
            Some(e) if e.is_dir() => (self.dir_cluster(e), 0, Kind::Dir),
            Some(e) => (e.first_cluster, e.size, Kind::File),
        };
        let chain = self.chain(st, first)?;
        if kind == Kind::File && (chain.len() as u64) * self.vol.cluster_bytes() < size as u64 {
            return Err(FsError::CorruptChain);
        }
        let id = self.next_pi;
        self.next_pi += 1;
        self.pis.insert(id, PseudoInode { first_cluster: first, size, kind, dirent: loc, chain, refs: 1, dirty: false });
        self.by_loc.insert(loc, id);
        Ok(id)
    }

    /// Opens (and with `create`, makes) a file or directory.
    pub fn open(&mut self, st: &mut Storage, parts: &[String], create: bool) -> Result<PiId, FsError> {
        match self.lookup(st, parts) {
            Ok(e) => self.make_pi(st, e.as_ref()),
            Err(FsError::NotFound) if create && !parts.is_empty() => {
                let dir = self.parent_dir(st, parts)?;
                let name = to_short_name(parts.last().unwrap())?;
                let raw = encode_entry(&name, ATTR_ARCHIVE, 0, 0);
                self.add_entry(st, dir, &raw)?;
                let e = self.find_in(st, dir, parts.last().unwrap())?;
                self.make_pi(st, Some(&e))
            }
            Err(e) => Err(e),
        }
    }

    pub fn mkdir(&mut self, st: &mut Storage, parts: &[String]) -> Result<(), FsError> {
        if parts.is_empty() {
            return Err(FsError::Exists);
        }
        let dir = self.parent_dir(st, parts)?;
        if self.find_in(st, dir, parts.last().unwrap()).is_ok() {
            return Err(FsError::Exists);
        }
        let name = to_short_name(parts.last().unwrap())?;
        let c = self.extend_chain(st, 0, 1)?[0];
        self.zero_cluster(st, c)?;
        let parent_ref = if dir == self.vol.root_cluster { 0 } else { dir };
        let lba = self.vol.cluster_lba(c);
        st.bpatch(self.dev, lba, 0, &encode_entry(&to_short_name(".")?, ATTR_DIRECTORY, c, 0))?;
        st.bpatch(self.dev, lba, DIRENT_SIZE, &encode_entry(&to_short_name("..")?, ATTR_DIRECTORY, parent_ref, 0))?;
        if let Err(e) = self.add_entry(st, dir, &encode_entry(&name, ATTR_DIRECTORY, c, 0)) {
            self.free_chain(st, c)?;
            return Err(e);
        }
        Ok(())
    }

    pub fn unlink(&mut self, st: &mut Storage, parts: &[String]) -> Result<(), FsError> {
        let e = self.lookup(st, parts)?.ok_or(FsError::Busy)?;
        if self.by_loc.contains_key(&Some(e.loc)) {
            return Err(FsError::Busy);
        }
        if e.is_dir() && self.list_dir(st, self.dir_cluster(&e))?.iter().any(|x| x.name != "." && x.name != "..") {
            return Err(FsError::NotEmpty);
        }
        if e.first_cluster != 0 {
            self.free_chain(st, e.first_cluster)?;
        }
        let (lba, off) = self.entry_lba(e.loc);
        st.bpatch(self.dev, lba, off, &[0xE5])?;
        Ok(())
    }

    pub fn stat(&self, pi: PiId) -> Result<Stat, FsError> {
        let p = self.pis.get(&pi).ok_or(FsError::BadFd)?;
        Ok(Stat { kind: p.kind, size: p.size as u64, ino: p.first_cluster, nlink: 1 })
    }

    pub fn size(&self, pi: PiId) -> Result<u64, FsError> {
        Ok(self.pis.get(&pi).ok_or(FsError::BadFd)?.size as u64)
    }

    pub fn kind(&self, pi: PiId) -> Result<Kind, FsError> {
        Ok(self.pis.get(&pi).ok_or(FsError::BadFd)?.kind)
    }

    /// Contiguous cluster runs covering chain indices `[i0, i1]`.
    fn runs(chain: &[u32], i0: usize, i1: usize) -> Vec<(u32, usize)> {
        let mut out: Vec<(u32, usize)> = Vec::new();
        for &c in &chain[i0..=i1] {
            match out.last_mut() {
                Some((start, len)) if *start + *len as u32 == c => *len += 1,
                _ => out.push((c, 1)),
            }
        }
        out
    }

    /// Reads `[lba, lba+count)` by the configured content path.
    fn content_read(&self, st: &mut Storage, lba: u64, count: u64) -> Result<Vec<u8>, FsError> {
        if self.bypass {
            return Ok(st.read_range_bypass(self.dev, lba, count)?);
        }
        let mut out = Vec::with_capacity(count as usize * SECTOR_SIZE);
        for s in lba..lba + count {
            out.extend_from_slice(&st.bread(self.dev, s)?);
        }
        Ok(out)
    }

    fn content_write(&self, st: &mut Storage, lba: u64, data: &[u8]) -> Result<(), FsError> {
        if self.bypass {
            return Ok(st.write_range_bypass(self.dev, lba, data)?);
        }
        for (i, s) in data.chunks(SECTOR_SIZE).enumerate() {
            st.bwrite(self.dev, lba + i as u64, s)?;
        }
        Ok(())
    }

    pub fn read(&self, st: &mut Storage, pi: PiId, off: u64, len: usize) -> Result<Vec<u8>, FsError> {
        let p = self.pis.get(&pi).ok_or(FsError::BadFd)?;
        if p.kind == Kind::Dir {
            return Err(FsError::IsADirectory);
        }
        let size = p.size as u64;
        if off >= size || len == 0 {
            return Ok(Vec::new());
        }
        let end = (off + len as u64).min(size);
        let cb = self.vol.cluster_bytes();
        let i0 = (off / cb) as usize;
        let i1 = ((end - 1) / cb) as usize;
        if i1 >= p.chain.len() {
            return Err(FsError::CorruptChain);
        }
        let mut out = Vec::with_capacity((end - off) as usize);
        let mut pos = i0 as u64 * cb;
        for (start, n) in Self::runs(&p.chain, i0, i1) {
            let run_lo = pos;
            let run_hi = pos + n as u64 * cb;
            let lo = off.max(run_lo);
            let hi = end.min(run_hi);
            let s0 = (lo - run_lo) / SECTOR_SIZE as u64;
            let s1 = (hi - run_lo).div_ceil(SECTOR_SIZE as u64);
            let bytes = self.content_read(st, self.vol.cluster_lba(start) + s0, s1 - s0)?;
            let skip = (lo - run_lo - s0 * SECTOR_SIZE as u64) as usize;
            out.extend_from_slice(&bytes[skip..skip + (hi - lo) as usize]);
            pos = run_hi;
        }
        Ok(out)
    }

    /// Writes at `off` (at most the current size), growing the chain as
    /// needed. A volume that fills part-way yields a short count.
    pub fn write(&mut self, st: &mut Storage, pi: PiId, off: u64, data: &[u8]) -> Result<usize, FsError> {
        let p = self.pis.get(&pi).ok_or(FsError::BadFd)?;
        if p.kind == Kind::Dir {
            return Err(FsError::IsADirectory);
        }
        if off > p.size as u64 {
            return Err(FsError::InvalidArgument);
        }
        if data.is_empty() {
            return Ok(0);
        }
        let cb = self.vol.cluster_bytes();
        let mut len = data.len() as u64;
        if off + len > u32::MAX as u64 {
            return Err(FsError::FileTooLarge);
        }
        let have = p.chain.len() as u64;
        let need = (off + len).div_ceil(cb);
        if need > have {
            let last = p.chain.last().copied().unwrap_or(0);
            let want = (need - have) as usize;
            let free = self.find_free(st, want)?;
            if free.len() < want {
                let fit = (have + free.len() as u64) * cb;
                if fit <= off {
                    return Err(FsError::DiskFull);
                }
                len = fit - off;
            }
            let got = self.extend_chain(st, last, free.len().min(want))?;
            let p = self.pis.get_mut(&pi).expect("checked");
            if p.chain.is_empty() {
                p.first_cluster = got.first().copied().unwrap_or(0);
            }
            p.chain.extend(got);
            p.dirty = true;
        }
        let p = self.pis.get(&pi).expect("checked");
        let end = off + len;
        let i0 = (off / cb) as usize;
        let i1 = ((end - 1) / cb) as usize;
        let mut pos = i0 as u64 * cb;
        let mut src = 0usize;
        for (start, n) in Self::runs(&p.chain, i0, i1) {
            let run_lo = pos;
            let run_hi = pos + n as u64 * cb;
            let lo = off.max(run_lo);
            let hi = end.min(run_hi);
            let s0 = (lo - run_lo) / SECTOR_SIZE as u64;
            let s1 = (hi - run_lo).div_ceil(SECTOR_SIZE as u64);
            let lba = self.vol.cluster_lba(start) + s0;
            let head = (lo - run_lo - s0 * SECTOR_SIZE as u64) as usize;
            let span = (s1 - s0) as usize * SECTOR_SIZE;
            let mut buf = vec![0u8; span];
            let take = (hi - lo) as usize;
            if head != 0 {
                buf[..SECTOR_SIZE].copy_from_slice(&self.content_read(st, lba, 1)?);
            }
            if !(head + take).is_multiple_of(SECTOR_SIZE) && !(head != 0 && span == SECTOR_SIZE) {
                let last = s1 - s0 - 1;
                buf[last as usize * SECTOR_SIZE..].copy_from_slice(&self.content_read(st, lba + last, 1)?);
            }
            buf[head..head + take].copy_from_slice(&data[src..src + take]);
            self.content_write(st, lba, &buf)?;
            src += take;
            pos = run_hi;
        }
        let p = self.pis.get_mut(&pi).expect("checked");
        if end > p.size as u64 {
            p.size = end as u32;
            p.dirty = true;
        }
        Ok(len as usize)
    }

    /// Drops all content of a file.
    pub fn truncate(&mut self, st: &mut Storage, pi: PiId) -> Result<(), FsError> {
        let p = self.pis.get(&pi).ok_or(FsError::BadFd)?;
        if p.kind == Kind::Dir {
            return Err(FsError::IsADirectory);
        }
        let first = p.first_cluster;
        if first != 0 {
            self.free_chain(st, first)?;
        }
        let p = self.pis.get_mut(&pi).expect("checked");
        p.first_cluster = 0;
        p.chain.clear();
        p.size = 0;
        p.dirty = true;
        Ok(())
    }

    fn writeback(&mut self, st: &mut Storage, pi: PiId) -> Result<(), FsError> {
        let p = self.pis.get_mut(&pi).ok_or(FsError::BadFd)?;
        if !p.dirty {
            return Ok(());
        }
        p.dirty = false;
        let (Some(loc), first, size) = (p.dirent, p.first_cluster, p.size) else { return Ok(()) };
        let (lba, off) = self.entry_lba(loc);
        st.bpatch(self.dev, lba, off + 20, &((first >> 16) as u16).to_le_bytes())?;
        st.bpatch(self.dev, lba, off + 26, &(first as u16).to_le_bytes())?;
        st.bpatch(self.dev, lba, off + 28, &size.to_le_bytes())?;
        Ok(())
    }

    /// Adds a reference to an open pseudo-inode (descriptor duplication).
    pub fn retain(&mut self, pi: PiId) {
        if let Some(p) = self.pis.get_mut(&pi) {
            p.refs += 1;
        }
    }

    pub fn close(&mut self, st: &mut Storage, pi: PiId) -> Result<(), FsError> {
        let p = self.pis.get_mut(&pi).ok_or(FsError::BadFd)?;
        p.refs -= 1;
        if p.refs > 0 {
            return Ok(());
        }
        self.writeback(st, pi)?;
        let p = self.pis.remove(&pi).expect("present");
        self.by_loc.remove(&p.dirent);
        Ok(())
    }

    /// Writes back every open pseudo-inode's entry and flushes the cache.
    pub fn flush(&mut self, st: &mut Storage) -> Result<(), FsError> {
        let ids: Vec<PiId> = self.pis.keys().copied().collect();
        for id in ids {
            self.writeback(st, id)?;
        }
        st.sync()?;
        Ok(())
    }

    pub fn unmount(mut self, st: &mut Storage) -> Result<(), FsError> {
        self.flush(st)
    }

    /// True when every FAT copy holds the same bytes.
    pub fn mirrors_equal(&self, st: &mut Storage) -> Result<bool, FsError> {
        for s in 0..self.vol.fat_size as u64 {
            let a = st.bread(self.dev, self.vol.fat_start + s)?;
            for copy in 1..self.vol.nfats as u64 {
                if st.bread(self.dev, self.vol.fat_start + copy * self.vol.fat_size as u64 + s)? != a {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// No cluster in two chains; every chain covers its file size.
    pub fn check_chains(&self, st: &mut Storage) -> Result<(), String> {
        let e = |x: FsError| x.to_string();
        let mut seen = std::collections::BTreeSet::new();
        let mut stack = vec![self.vol.root_cluster];
        let mut visited_dirs = std::collections::BTreeSet::new();
        for &c in &self.chain(st, self.vol.root_cluster).map_err(e)? {
            seen.insert(c);
        }
        while let Some(dir) = stack.pop() {
            if !visited_dirs.insert(dir) {
                continue;
            }
            for ent in self.list_dir(st, dir).map_err(e)? {
                if ent.name == "." || ent.name == ".." {
                    continue;
                }
                let chain = self.chain(st, ent.first_cluster).map_err(e)?;
                let size = self.by_loc.get(&Some(ent.loc)).and_then(|i| self.pis.get(i)).map_or(ent.size, |p| p.size);
                if !ent.is_dir() && (chain.len() as u64) * self.vol.cluster_bytes() < size as u64 {
                    return Err(format!("{} chain shorter than size", ent.name));
                }
                for c in &chain {
                    if !seen.insert(*c) {
                        return Err(format!("cluster {c} in two chains"));
                    }
                    if self.fat_get(st, *c).map_err(e)? == 0 {
                        return Err(format!("cluster {c} is marked free"));
                    }
                }
                if ent.is_dir() {
                    stack.push(ent.first_cluster);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwsim::{BlockDev, CostModel};

    fn p(s: &str) -> Vec<String> {
        crate::vfs::normalize("/", s).unwrap()
    }

    fn fresh(mb: u64) -> (Storage, FatFs) {
        let img = mkfat::mkfat(mb << 20).unwrap();
        let mut st = Storage::new();
        let dev = st.attach(BlockDev::from_bytes("sd", img, CostModel::default()));
        let fs = FatFs::mount(&mut st, dev).unwrap();
        (st, fs)
    }

    #[test]
    fn short_names() {
        assert_eq!(&to_short_name("hello.txt").unwrap(), b"HELLO   TXT");
        assert_eq!(&to_short_name("A").unwrap(), b"A          ");
        assert_eq!(from_short_name(b"HELLO   TXT"), "HELLO.TXT");
        assert_eq!(to_short_name("toolongname.txt"), Err(FsError::NameTooLong));
        assert_eq!(to_short_name("a b"), Err(FsError::InvalidArgument));
    }

    #[test]
    fn zeroed_image_bad_signature() {
        let mut st = Storage::new();
        st.attach(BlockDev::from_bytes("z", vec![0; 1 << 20], CostModel::default()));
        assert_eq!(FatFs::mount(&mut st, 0).unwrap_err(), FsError::BadSignature);
    }

    #[test]
    fn fat16_sized_volume_rejected() {
        let mut img = mkfat::mkfat(64 << 20).unwrap();
        // Shrink the advertised size below the FAT32 cluster threshold.
        img[0x20..0x24].copy_from_slice(&40_000u32.to_le_bytes());
        let mut st = Storage::new();
        st.attach(BlockDev::from_bytes("s", img, CostModel::default()));
        assert_eq!(FatFs::mount(&mut st, 0).unwrap_err(), FsError::NotFat32);
    }

    #[test]
    fn create_write_read_close() {
        let (mut st, mut fs) = fresh(64);
        let pi = fs.open(&mut st, &p("/out.bin"), true).unwrap();
        let data: Vec<u8> = (0..5000u32).map(|i| (i * 7) as u8).collect();
        assert_eq!(fs.write(&mut st, pi, 0, &data).unwrap(), 5000);
        assert_eq!(fs.read(&mut st, pi, 0, 6000).unwrap(), data);
        assert_eq!(fs.read(&mut st, pi, 5000, 10).unwrap(), Vec::<u8>::new());
        fs.close(&mut st, pi).unwrap();
        let e = fs.lookup(&mut st, &p("/OUT.BIN")).unwrap().unwrap();
        assert_eq!(e.size, 5000);
        assert!(fs.mirrors_equal(&mut st).unwrap());
        fs.check_chains(&mut st).unwrap();
    }

    #[test]
    fn growth_chains_new_clusters() {
        let (mut st, mut fs) = fresh(64);
        let pi = fs.open(&mut st, &p("/g"), true).unwrap();
        fs.write(&mut st, pi, 0, &[1; 512]).unwrap();
        fs.write(&mut st, pi, 512, &[2; 3 * 512]).unwrap();
        let chain = fs.pi(pi).unwrap().chain.clone();
        assert_eq!(chain.len(), 4);
        let last = *chain.last().unwrap();
        assert!(fs.fat_get(&mut st, last).unwrap() >= EOC_MIN);
        for w in chain.windows(2) {
            assert_eq!(fs.fat_get(&mut st, w[0]).unwrap(), w[1]);
        }
    }

    #[test]
    fn runs_are_coalesced() {
        assert_eq!(FatFs::runs(&[3, 4, 5, 9], 0, 3), vec![(3, 3), (9, 1)]);
    }

    #[test]
    fn fragmented_read_uses_one_op_per_run() {
        let (mut st, mut fs) = fresh(64);
        // Lay out a file on clusters 3,4,5,9 by hand.
        let root = fs.open(&mut st, &[], false).unwrap();
        let first = fs.pi(root).unwrap().chain[0];
        assert_eq!(first, 2);
        for (c, v) in [(3, 4), (4, 5), (5, 9), (9, EOC)] {
            fs.fat_set(&mut st, c, v).unwrap();
        }
        let name = to_short_name("frag.bin").unwrap();
        fs.add_entry(&mut st, 2, &encode_entry(&name, ATTR_ARCHIVE, 3, 4 * 512)).unwrap();
        let pi = fs.open(&mut st, &p("/frag.bin"), false).unwrap();
        st.sync().unwrap();
        let ops = st.dev(0).stats().ops;
        fs.read(&mut st, pi, 0, 2048).unwrap();
        assert_eq!(st.dev(0).stats().ops - ops, 2);
    }

    #[test]
    fn unaligned_writes_preserve_neighbours() {
        let (mut st, mut fs) = fresh(64);
        let pi = fs.open(&mut st, &p("/u"), true).unwrap();
        let mut shadow = vec![0xAAu8; 3000];
        fs.write(&mut st, pi, 0, &shadow).unwrap();
        fs.write(&mut st, pi, 100, &[1; 10]).unwrap();
        shadow[100..110].fill(1);
        fs.write(&mut st, pi, 500, &[2; 600]).unwrap();
        shadow[500..1100].fill(2);
        assert_eq!(fs.read(&mut st, pi, 0, 3000).unwrap(), shadow);
    }

    #[test]
    fn readdir_skips_deleted_and_dots() {
        let (mut st, mut fs) = fresh(64);
        fs.mkdir(&mut st, &p("/sub")).unwrap();
        let d = fs.open(&mut st, &p("/sub"), false).unwrap();
        assert!(fs.readdir(&mut st, d).unwrap().is_empty());
        for n in ["A.TXT", "B.BIN", "C"] {
            let f = fs.open(&mut st, &p(&format!("/sub/{n}")), true).unwrap();
            fs.write(&mut st, f, 0, n.as_bytes()).unwrap();
            fs.close(&mut st, f).unwrap();
        }
        fs.unlink(&mut st, &p("/sub/b.bin")).unwrap();
        let names: Vec<_> = fs.readdir(&mut st, d).unwrap().into_iter().map(|r| (r.name, r.size)).collect();
        assert_eq!(names, vec![("A.TXT".to_string(), 5), ("C".to_string(), 1)]);
        assert_eq!(fs.unlink(&mut st, &p("/sub")), Err(FsError::Busy));
        fs.close(&mut st, d).unwrap();
        assert_eq!(fs.unlink(&mut st, &p("/sub")), Err(FsError::NotEmpty));
    }

    #[test]
    fn fill_volume_disk_full_mirrors_equal() {
        let (mut st, mut fs) = fresh(34);
        let pi = fs.open(&mut st, &p("/fill"), true).unwrap();
        let chunk = vec![0x11u8; 1 << 20];
        let mut off = 0u64;
        loop {
            match fs.write(&mut st, pi, off, &chunk) {
                Ok(n) => off += n as u64,
                Err(e) => {
                    assert_eq!(e, FsError::DiskFull);
                    break;
                }
            }
        }
        assert!(off > 30 << 20);
        fs.close(&mut st, pi).unwrap();
        assert!(fs.mirrors_equal(&mut st).unwrap());
        fs.check_chains(&mut st).unwrap();
    }

    #[test]
    fn cycle_is_corrupt_chain() {
        let (mut st, fs) = fresh(64);
        fs.fat_set(&mut st, 10, 11).unwrap();
        fs.fat_set(&mut st, 11, 10).unwrap();
        assert_eq!(fs.chain(&mut st, 10), Err(FsError::CorruptChain));
        fs.fat_set(&mut st, 12, 0).unwrap();
        fs.fat_set(&mut st, 13, 12).unwrap();
        assert_eq!(fs.chain(&mut st, 13), Err(FsError::CorruptChain));
    }

    #[test]
    fn truncate_frees_clusters() {
        let (mut st, mut fs) = fresh(64);
        let pi = fs.open(&mut st, &p("/t"), true).unwrap();
        fs.write(&mut st, pi, 0, &[5; 4096]).unwrap();
        let c = fs.pi(pi).unwrap().chain[0];
        fs.truncate(&mut st, pi).unwrap();
        assert_eq!(fs.fat_get(&mut st, c).unwrap(), 0);
        assert_eq!(fs.size(pi).unwrap(), 0);
    }

    #[test]
    fn cached_and_bypass_paths_agree() {
        let (mut st, mut fs) = fresh(64);
        let pi = fs.open(&mut st, &p("/x"), true).unwrap();
        let data: Vec<u8> = (0..20_000u32).map(|i| (i % 253) as u8).collect();
        fs.write(&mut st, pi, 0, &data).unwrap();
        fs.set_bypass(false);
        assert_eq!(fs.read(&mut st, pi, 0, data.len()).unwrap(), data);
        fs.write(&mut st, pi, 1000, &[9; 700]).unwrap();
        fs.set_bypass(true);
        let mut want = data.clone();
        want[1000..1700].fill(9);
        assert_eq!(fs.read(&mut st, pi, 0, data.len()).unwrap(), want);
    }
}
