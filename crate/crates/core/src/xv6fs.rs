//! xv6-style root filesystem on the ramdisk.
//!
//! On-disk layout (1024-byte blocks, little-endian):
//!
//! ```text
//! block 0            unused (boot)
//! block 1            superblock
//! inode_start..      64-byte inodes, 16 per block
//! bitmap_start..     one bit per block, 1 = in use
//! data_start..       file and directory data
//! ```
//!
//! An inode addresses 12 direct blocks and one indirect block of 256
//! entries, so no file exceeds 274432 bytes.

use crate::vfs::{DevNo, FsError, Kind, Stat, Storage};
use crate::hwsim::SECTOR_SIZE;

pub const BSIZE: usize = 1024;
const SPB: u64 = (BSIZE / SECTOR_SIZE) as u64;
pub const NDIRECT: usize = 12;
pub const NINDIRECT: usize = BSIZE / 4;
pub const MAXFILE: u64 = ((NDIRECT + NINDIRECT) * BSIZE) as u64;
pub const FS_MAGIC: u32 = 0x1020_3040;
pub const INODE_SIZE: usize = 64;
pub const IPB: u32 = (BSIZE / INODE_SIZE) as u32;
pub const DIRSIZ: usize = 14;
pub const DIRENT_SIZE: usize = 16;
pub const ROOT_INUM: u32 = 1;
pub const DEFAULT_BLOCKS: u32 = 8192;
pub const DEFAULT_INODES: u32 = 256;

pub const T_FREE: u16 = 0;
pub const T_DIR: u16 = 1;
pub const T_FILE: u16 = 2;
pub const T_DEV: u16 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Superblock {
    pub magic: u32,
    pub size_blocks: u32,
    pub ninodes: u32,
    pub inode_start: u32,
    pub bitmap_start: u32,
    pub data_start: u32,
}

impl Superblock {
    pub fn layout(size_blocks: u32, ninodes: u32) -> Superblock {
        let inode_start = 2;
        let ninode_blocks = ninodes.div_ceil(IPB);
        let bitmap_start = inode_start + ninode_blocks;
        let nbitmap = size_blocks.div_ceil(BSIZE as u32 * 8);
        Superblock { magic: FS_MAGIC, size_blocks, ninodes, inode_start, bitmap_start, data_start: bitmap_start + nbitmap }
    }

    fn to_bytes(self) -> [u8; 24] {
        let mut b = [0u8; 24];
        for (i, v) in [self.magic, self.size_blocks, self.ninodes, self.inode_start, self.bitmap_start, self.data_start]
            .into_iter()
            .enumerate()
        {
            b[i * 4..i * 4 + 4].copy_from_slice(&v.to_le_bytes());
        }
        b
    }

    fn from_bytes(b: &[u8]) -> Superblock {
        let w = |i: usize| u32::from_le_bytes(b[i * 4..i * 4 + 4].try_into().unwrap());
        Superblock { magic: w(0), size_blocks: w(1), ninodes: w(2), inode_start: w(3), bitmap_start: w(4), data_start: w(5) }
    }

    fn valid(&self) -> bool {
        self.magic == FS_MAGIC
            && self.inode_start >= 2
            && self.inode_start + self.ninodes.div_ceil(IPB) <= self.bitmap_start
            && self.bitmap_start + self.size_blocks.div_ceil(BSIZE as u32 * 8) <= self.data_start
            && self.data_start < self.size_blocks
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DiskInode {
    pub kind: u16,
    pub major: u16,
    pub minor: u16,
    pub nlink: u16,
    pub size: u32,
    pub addrs: [u32; NDIRECT + 1],
}

impl DiskInode {
    fn to_bytes(self) -> [u8; INODE_SIZE] {
        let mut b = [0u8; INODE_SIZE];
        b[0..2].copy_from_slice(&self.kind.to_le_bytes());
        b[2..4].copy_from_slice(&self.major.to_le_bytes());
        b[4..6].copy_from_slice(&self.minor.to_le_bytes());
        b[6..8].copy_from_slice(&self.nlink.to_le_bytes());
        b[8..12].copy_from_slice(&self.size.to_le_bytes());
        for (i, a) in self.addrs.iter().enumerate() {
            b[12 + i * 4..16 + i * 4].copy_from_slice(&a.to_le_bytes());
        }
        b
    }

    fn from_bytes(b: &[u8]) -> DiskInode {
        let h = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        let w = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap());
        let mut addrs = [0u32; NDIRECT + 1];
        for (i, a) in addrs.iter_mut().enumerate() {
            *a = w(12 + i * 4);
        }
        DiskInode { kind: h(0), major: h(2), minor: h(4), nlink: h(6), size: w(8), addrs }
    }
}

fn check_name(name: &str) -> Result<(), FsError> {
    if name.is_empty() || name.contains('/') {
        return Err(FsError::NotFound);
    }
    if name.len() > DIRSIZ {
        return Err(FsError::NameTooLong);
    }
    Ok(())
}

fn dirent_bytes(inum: u32, name: &str) -> [u8; DIRENT_SIZE] {
    let mut b = [0u8; DIRENT_SIZE];
    b[0..2].copy_from_slice(&(inum as u16).to_le_bytes());
    b[2..2 + name.len()].copy_from_slice(name.as_bytes());
    b
}

fn parse_dirent(b: &[u8]) -> (u32, String) {
    let inum = u16::from_le_bytes([b[0], b[1]]) as u32;
    let raw = &b[2..DIRENT_SIZE];
    let end = raw.iter().position(|&c| c == 0).unwrap_or(DIRSIZ);
    (inum, String::from_utf8_lossy(&raw[..end]).into_owned())
}

/// A mounted xv6fs volume. All state lives on the device, behind the cache.
#[derive(Clone, Debug)]
pub struct Xv6Fs {
    dev: DevNo,
    sb: Superblock,
}

impl Xv6Fs {
    pub fn mount(st: &mut Storage, dev: DevNo) -> Result<Xv6Fs, FsError> {
        if st.dev(dev).size_sectors() < 2 * SPB {
            return Err(FsError::BadImage("device too small".into()));
        }
        let blk = read_block(st, dev, 1)?;
        let sb = Superblock::from_bytes(&blk);
        if !sb.valid() || (sb.size_blocks as u64) * SPB > st.dev(dev).size_sectors() {
            return Err(FsError::BadImage("bad xv6fs superblock".into()));
        }
        Ok(Xv6Fs { dev, sb })
    }

    /// Formats an empty filesystem (root directory only) onto `dev`.
    pub fn format(st: &mut Storage, dev: DevNo, size_blocks: u32, ninodes: u32) -> Result<Xv6Fs, FsError> {
        let sb = Superblock::layout(size_blocks, ninodes);
        if !sb.valid() || (size_blocks as u64) * SPB > st.dev(dev).size_sectors() {
            return Err(FsError::BadImage("geometry does not fit device".into()));
        }
        let zero = [0u8; BSIZE];
        for b in 0..sb.data_start {
            write_block(st, dev, b, &zero)?;
        }
        let mut blk = [0u8; BSIZE];
        blk[..24].copy_from_slice(&sb.to_bytes());
        write_block(st, dev, 1, &blk)?;
        let fs = Xv6Fs { dev, sb };
        for b in 0..sb.data_start {
            fs.set_bit(st, b, true)?;
        }
        let root = fs.ialloc(st, T_DIR)?;
        debug_assert_eq!(root, ROOT_INUM);
        fs.dirlink(st, ROOT_INUM, ".", ROOT_INUM)?;
        fs.dirlink(st, ROOT_INUM, "..", ROOT_INUM)?;
        Ok(fs)
    }

    pub fn superblock(&self) -> Superblock {
        self.sb
    }

    pub fn dev(&self) -> DevNo {
        self.dev
    }

    fn bit_loc(&self, b: u32) -> (u32, usize, u8) {
        let per = (BSIZE * 8) as u32;
        (self.sb.bitmap_start + b / per, ((b % per) / 8) as usize, 1 << (b % 8))
    }

    fn get_bit(&self, st: &mut Storage, b: u32) -> Result<bool, FsError> {
        let (blk, byte, mask) = self.bit_loc(b);
        Ok(read_block(st, self.dev, blk)?[byte] & mask != 0)
    }

    fn set_bit(&self, st: &mut Storage, b: u32, on: bool) -> Result<(), FsError> {
        let (blk, byte, mask) = self.bit_loc(b);
        let sector = blk as u64 * SPB + (byte / SECTOR_SIZE) as u64;
        let mut s = st.bread(self.dev, sector)?;
        let off = byte % SECTOR_SIZE;
        if on {
            s[off] |= mask;
        } else {
            s[off] &= !mask;
        }
        st.bwrite(self.dev, sector, &s)?;
        Ok(())
    }

    /// First free data block, zeroed.
    fn balloc(&self, st: &mut Storage) -> Result<u32, FsError> {
        let per = BSIZE * 8;
        let nbitmap = self.sb.size_blocks.div_ceil(per as u32);
        for bb in 0..nbitmap {
            let map = read_block(st, self.dev, self.sb.bitmap_start + bb)?;
            for (i, &byte) in map.iter().enumerate() {
                if byte == 0xFF {
                    continue;
                }
                for bit in 0..8 {
                    let b = bb * per as u32 + (i * 8 + bit) as u32;
                    if b >= self.sb.size_blocks {
                        return Err(FsError::DiskFull);
                    }
                    if byte & (1 << bit) == 0 {
                        self.set_bit(st, b, true)?;
                        write_block(st, self.dev, b, &[0u8; BSIZE])?;
                        return Ok(b);
                    }
                }
            }
        }
        Err(FsError::DiskFull)
    }

    fn bfree(&self, st: &mut Storage, b: u32) -> Result<(), FsError> {
        debug_assert!(b >= self.sb.data_start);
        self.set_bit(st, b, false)
    }

    fn inode_loc(&self, inum: u32) -> (u64, usize) {
        let blk = self.sb.inode_start + inum / IPB;
        let byte = (inum % IPB) as usize * INODE_SIZE;
        (blk as u64 * SPB + (byte / SECTOR_SIZE) as u64, byte % SECTOR_SIZE)
    }

    pub fn iget(&self, st: &mut Storage, inum: u32) -> Result<DiskInode, FsError> {
        if inum == 0 || inum >= self.sb.ninodes {
            return Err(FsError::NotFound);
        }
        let (sector, off) = self.inode_loc(inum);
        let s = st.bread(self.dev, sector)?;
        Ok(DiskInode::from_bytes(&s[off..off + INODE_SIZE]))
    }

    fn iupdate(&self, st: &mut Storage, inum: u32, ino: &DiskInode) -> Result<(), FsError> {
        let (sector, off) = self.inode_loc(inum);
        st.bpatch(self.dev, sector, off, &ino.to_bytes())?;
        Ok(())
    }

    pub fn ialloc(&self, st: &mut Storage, kind: u16) -> Result<u32, FsError> {
        for inum in 1..self.sb.ninodes {
            if self.iget(st, inum)?.kind == T_FREE {
                let ino = DiskInode { kind, nlink: 1, ..Default::default() };
                self.iupdate(st, inum, &ino)?;
                return Ok(inum);
            }
        }
        Err(FsError::NoInodes)
    }

    /// Block number holding file block `bn`, allocating when `alloc`.
    fn bmap(&self, st: &mut Storage, ino: &mut DiskInode, bn: usize, alloc: bool) -> Result<Option<u32>, FsError> {
        if bn < NDIRECT {
            if ino.addrs[bn] == 0 {
                if !alloc {
                    return Ok(None);
                }
                ino.addrs[bn] = self.balloc(st)?;
            }
            return Ok(Some(ino.addrs[bn]));
        }
        let idx = bn - NDIRECT;
        if idx >= NINDIRECT {
            return Err(FsError::FileTooLarge);
        }
        if ino.addrs[NDIRECT] == 0 {
            if !alloc {
                return Ok(None);
            }
            ino.addrs[NDIRECT] = self.balloc(st)?;
        }
        let ind = ino.addrs[NDIRECT];
        let sector = ind as u64 * SPB + (idx * 4 / SECTOR_SIZE) as u64;
        let off = idx * 4 % SECTOR_SIZE;
        let s = st.bread(self.dev, sector)?;
        let mut a = u32::from_le_bytes(s[off..off + 4].try_into().unwrap());
        if a == 0 {
            if !alloc {
                return Ok(None);
            }
            a = self.balloc(st)?;
            st.bpatch(self.dev, sector, off, &a.to_le_bytes())?;
        }
        Ok(Some(a))
    }

    pub fn readi(&self, st: &mut Storage, inum: u32, off: u64, len: usize) -> Result<Vec<u8>, FsError> {
        let mut ino = self.iget(st, inum)?;
        let size = ino.size as u64;
        if off >= size {
            return Ok(Vec::new());
        }
        let end = (off + len as u64).min(size);
        let mut out = Vec::with_capacity((end - off) as usize);
        let mut pos = off;
        while pos < end {
            let bn = (pos / BSIZE as u64) as usize;
            let boff = (pos % BSIZE as u64) as usize;
            let n = ((BSIZE - boff) as u64).min(end - pos) as usize;
            match self.bmap(st, &mut ino, bn, false)? {
                Some(b) => {
                    let blk = read_block(st, self.dev, b)?;
                    out.extend_from_slice(&blk[boff..boff + n]);
                }
                None => out.extend(std::iter::repeat_n(0, n)),
            }
            pos += n as u64;
        }
        Ok(out)
    }

    /// Writes `data` at `off`. Partial progress is returned when the disk
    /// fills part-way; nothing written at all is reported as `DiskFull`.
    pub fn writei(&self, st: &mut Storage, inum: u32, off: u64, data: &[u8]) -> Result<usize, FsError> {
        let mut ino = self.iget(st, inum)?;
        if off > ino.size as u64 {
            return Err(FsError::InvalidArgument);
        }
        if off + data.len() as u64 > MAXFILE {
            return Err(FsError::FileTooLarge);
        }
        let mut done = 0usize;
        let mut failure = None;
        while done < data.len() {
            let pos = off + done as u64;
            let bn = (pos / BSIZE as u64) as usize;
            let boff = (pos % BSIZE as u64) as usize;
            let n = (BSIZE - boff).min(data.len() - done);
            let b = match self.bmap(st, &mut ino, bn, true) {
                Ok(Some(b)) => b,
                Ok(None) => unreachable!("alloc=true always maps"),
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            };
            if n == BSIZE {
                write_block(st, self.dev, b, data[done..done + n].try_into().unwrap())?;
            } else {
                let mut blk = read_block(st, self.dev, b)?;
                blk[boff..boff + n].copy_from_slice(&data[done..done + n]);
                write_block(st, self.dev, b, &blk)?;
            }
            done += n;
        }
        let end = off + done as u64;
        if end > ino.size as u64 {
            ino.size = end as u32;
        }
        self.iupdate(st, inum, &ino)?;
        match failure {
            Some(e) if done == 0 => Err(e),
            _ => Ok(done),
        }
    }

    /// Frees every data block of `inum` and sets its size to zero.
    pub fn itrunc(&self, st: &mut Storage, inum: u32) -> Result<(), FsError> {
        let mut ino = self.iget(st, inum)?;
        for i in 0..NDIRECT {
            if ino.addrs[i] != 0 {
                self.bfree(st, ino.addrs[i])?;
                ino.addrs[i] = 0;
            }
        }
        if ino.addrs[NDIRECT] != 0 {
            let ind = read_block(st, self.dev, ino.addrs[NDIRECT])?;
            for c in ind.chunks(4) {
                let a = u32::from_le_bytes(c.try_into().unwrap());
                if a != 0 {
                    self.bfree(st, a)?;
                }
            }
            self.bfree(st, ino.addrs[NDIRECT])?;
            ino.addrs[NDIRECT] = 0;
        }
        ino.size = 0;
        self.iupdate(st, inum, &ino)
    }

    /// Releases an inode whose link count reached zero.
    pub fn ifree(&self, st: &mut Storage, inum: u32) -> Result<(), FsError> {
        self.itrunc(st, inum)?;
        self.iupdate(st, inum, &DiskInode::default())
    }

    pub fn stat(&self, st: &mut Storage, inum: u32) -> Result<Stat, FsError> {
        let ino = self.iget(st, inum)?;
        let kind = match ino.kind {
            T_DIR => Kind::Dir,
            T_DEV => Kind::Device,
            T_FILE => Kind::File,
            _ => return Err(FsError::NotFound),
        };
        Ok(Stat { kind, size: ino.size as u64, ino: inum, nlink: ino.nlink as u32 })
    }

    /// Raw entries of a directory, empty slots excluded.
    pub fn entries(&self, st: &mut Storage, dir: u32) -> Result<Vec<(String, u32)>, FsError> {
        let ino = self.iget(st, dir)?;
        if ino.kind != T_DIR {
            return Err(FsError::NotADirectory);
        }
        let raw = self.readi(st, dir, 0, ino.size as usize)?;
        Ok(raw
            .chunks(DIRENT_SIZE)
            .map(parse_dirent)
            .filter(|(inum, _)| *inum != 0)
            .map(|(i, n)| (n, i))
            .collect())
    }

    pub fn dirlookup(&self, st: &mut Storage, dir: u32, name: &str) -> Result<(u32, u64), FsError> {
        let ino = self.iget(st, dir)?;
        if ino.kind != T_DIR {
            return Err(FsError::NotADirectory);
        }
        let raw = self.readi(st, dir, 0, ino.size as usize)?;
        for (i, e) in raw.chunks(DIRENT_SIZE).enumerate() {
            let (inum, n) = parse_dirent(e);
            if inum != 0 && n == name {
                return Ok((inum, (i * DIRENT_SIZE) as u64));
            }
        }
        Err(FsError::NotFound)
    }

    pub fn dirlink(&self, st: &mut Storage, dir: u32, name: &str, inum: u32) -> Result<(), FsError> {
        check_name(name)?;
        if self.dirlookup(st, dir, name).is_ok() {
            return Err(FsError::Exists);
        }
        let ino = self.iget(st, dir)?;
        let raw = self.readi(st, dir, 0, ino.size as usize)?;
        let slot = raw
            .chunks(DIRENT_SIZE)
            .position(|e| parse_dirent(e).0 == 0)
            .map(|i| (i * DIRENT_SIZE) as u64)
            .unwrap_or(ino.size as u64);
        self.writei(st, dir, slot, &dirent_bytes(inum, name))?;
        Ok(())
    }

    /// Inode number for path components below the root.
    pub fn namei(&self, st: &mut Storage, parts: &[String]) -> Result<u32, FsError> {
        let mut cur = ROOT_INUM;
        for p in parts {
            if p.len() > DIRSIZ {
                return Err(FsError::NameTooLong);
            }
            cur = self.dirlookup(st, cur, p)?.0;
        }
        Ok(cur)
    }

    fn parent_of<'a>(&self, st: &mut Storage, parts: &'a [String]) -> Result<(u32, &'a str), FsError> {
        let (last, dir) = parts.split_last().ok_or(FsError::Exists)?;
        let parent = self.namei(st, dir)?;
        if self.iget(st, parent)?.kind != T_DIR {
            return Err(FsError::NotADirectory);
        }
        check_name(last)?;
        Ok((parent, last))
    }

    /// Creates a file, directory or device node. An existing file is
    /// returned as-is when creating a plain file.
    pub fn create(&self, st: &mut Storage, parts: &[String], kind: u16, major: u16, minor: u16) -> Result<u32, FsError> {
        let (parent, name) = self.parent_of(st, parts)?;
        if let Ok((inum, _)) = self.dirlookup(st, parent, name) {
            let ino = self.iget(st, inum)?;
            if kind == T_FILE && ino.kind == T_FILE {
                return Ok(inum);
            }
            return Err(FsError::Exists);
        }
        let inum = self.ialloc(st, kind)?;
        let mut ino = self.iget(st, inum)?;
        ino.major = major;
        ino.minor = minor;
        self.iupdate(st, inum, &ino)?;
        if kind == T_DIR {
            self.dirlink(st, inum, ".", inum)?;
            self.dirlink(st, inum, "..", parent)?;
        }
        if let Err(e) = self.dirlink(st, parent, name, inum) {
            self.ifree(st, inum)?;
            return Err(e);
        }
        Ok(inum)
    }

    /// Adds a second name for an existing file.
    pub fn link(&self, st: &mut Storage, old: &[String], new: &[String]) -> Result<(), FsError> {
        let inum = self.namei(st, old)?;
        let mut ino = self.iget(st, inum)?;
        if ino.kind == T_DIR {
            return Err(FsError::IsADirectory);
        }
        let (parent, name) = self.parent_of(st, new)?;
        self.dirlink(st, parent, name, inum)?;
        ino.nlink += 1;
        self.iupdate(st, inum, &ino)
    }

    /// Removes a name. Returns the inode and its remaining link count; the
    /// caller frees it with [`Xv6Fs::ifree`] once nothing holds it open.
    pub fn unlink(&self, st: &mut Storage, parts: &[String]) -> Result<(u32, u16), FsError> {
        let (parent, name) = self.parent_of(st, parts)?;
        if name == "." || name == ".." {
            return Err(FsError::InvalidArgument);
        }
        let (inum, off) = self.dirlookup(st, parent, name)?;
        let mut ino = self.iget(st, inum)?;
        if ino.kind == T_DIR && self.entries(st, inum)?.iter().any(|(n, _)| n != "." && n != "..") {
            return Err(FsError::NotEmpty);
        }
        self.writei(st, parent, off, &[0u8; DIRENT_SIZE])?;
        ino.nlink = ino.nlink.saturating_sub(1);
        self.iupdate(st, inum, &ino)?;
        Ok((inum, ino.nlink))
    }

    pub fn free_blocks(&self, st: &mut Storage) -> Result<u32, FsError> {
        let mut n = 0;
        for b in self.sb.data_start..self.sb.size_blocks {
            if !self.get_bit(st, b)? {
                n += 1;
            }
        }
        Ok(n)
    }

    /// Every allocated inode's blocks are referenced once and match the bitmap.
    pub fn fsck(&self, st: &mut Storage) -> Result<(), String> {
        let e = |x: FsError| x.to_string();
        let mut owner = std::collections::BTreeMap::new();
        for inum in 1..self.sb.ninodes {
            let mut ino = self.iget(st, inum).map_err(e)?;
            if ino.kind == T_FREE {
                continue;
            }
            let mut blocks = Vec::new();
            for &a in &ino.addrs[..NDIRECT] {
                if a != 0 {
                    blocks.push(a);
                }
            }
            if ino.addrs[NDIRECT] != 0 {
                blocks.push(ino.addrs[NDIRECT]);
                for bn in NDIRECT..NDIRECT + NINDIRECT {
                    if let Some(a) = self.bmap(st, &mut ino, bn, false).map_err(e)? {
                        blocks.push(a);
                    }
                }
            }
            if ino.size as u64 > MAXFILE {
                return Err(format!("inode {inum} size {} over ceiling", ino.size));
            }
            for b in blocks {
                if b < self.sb.data_start || b >= self.sb.size_blocks {
                    return Err(format!("inode {inum} references block {b} outside data region"));
                }
                if let Some(prev) = owner.insert(b, inum) {
                    return Err(format!("block {b} referenced by inodes {prev} and {inum}"));
                }
            }
        }
        for b in self.sb.data_start..self.sb.size_blocks {
            let used = self.get_bit(st, b).map_err(e)?;
            if used != owner.contains_key(&b) {
                return Err(format!("bitmap bit for block {b} is {used} but reachability says {}", !used));
            }
        }
        Ok(())
    }
}

fn read_block(st: &mut Storage, dev: DevNo, b: u32) -> Result<[u8; BSIZE], FsError> {
    let mut out = [0u8; BSIZE];
    for i in 0..SPB {
        let s = st.bread(dev, b as u64 * SPB + i)?;
        out[i as usize * SECTOR_SIZE..(i as usize + 1) * SECTOR_SIZE].copy_from_slice(&s);
    }
    Ok(out)
}

fn write_block(st: &mut Storage, dev: DevNo, b: u32, data: &[u8; BSIZE]) -> Result<(), FsError> {
    for i in 0..SPB as usize {
        st.bwrite(dev, b as u64 * SPB + i as u64, &data[i * SECTOR_SIZE..(i + 1) * SECTOR_SIZE])?;
    }
    Ok(())
}

/// One manifest entry: a path under the root and its content.
pub type ManifestEntry = (String, Vec<u8>);

/// Builds an image from a manifest. Parent directories are created as
/// needed and entries are added in the given order, so equal manifests
/// give identical bytes.
pub fn mkfs(manifest: &[ManifestEntry], size_blocks: u32, ninodes: u32) -> Result<Vec<u8>, FsError> {
    use crate::hwsim::{BlockDev, CostModel};
    let mut st = Storage::new();
    let dev = st.attach(BlockDev::from_bytes("mkfs", vec![0; size_blocks as usize * BSIZE], CostModel::RAMDISK));
    let fs = Xv6Fs::format(&mut st, dev, size_blocks, ninodes).map_err(|e| match e {
        FsError::BadImage(_) => FsError::DiskFull,
        e => e,
    })?;
    for (path, data) in manifest {
        let parts = crate::vfs::normalize("/", path)?;
        for depth in 1..parts.len() {
            match fs.create(&mut st, &parts[..depth], T_DIR, 0, 0) {
                Ok(_) | Err(FsError::Exists) => {}
                Err(e) => return Err(e),
            }
        }
        let inum = fs.create(&mut st, &parts, T_FILE, 0, 0)?;
        if fs.writei(&mut st, inum, 0, data)? != data.len() {
            return Err(FsError::DiskFull);
        }
    }
    let devs = st.detach_all()?;
    Ok(devs.into_iter().next().expect("one device").into_image())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwsim::{BlockDev, CostModel};

    fn fresh() -> (Storage, Xv6Fs) {
        let img = mkfs(&[], 2048, 64).unwrap();
        let mut st = Storage::new();
        let dev = st.attach(BlockDev::from_bytes("rd", img, CostModel::RAMDISK));
        let fs = Xv6Fs::mount(&mut st, dev).unwrap();
        (st, fs)
    }

    fn p(s: &str) -> Vec<String> {
        crate::vfs::normalize("/", s).unwrap()
    }

    #[test]
    fn empty_manifest_has_dot_entries_only() {
        let (mut st, fs) = fresh();
        let names: Vec<String> = fs.entries(&mut st, ROOT_INUM).unwrap().into_iter().map(|e| e.0).collect();
        assert_eq!(names, vec![".", ".."]);
        fs.fsck(&mut st).unwrap();
    }

    #[test]
    fn three_byte_file_uses_one_block() {
        let img = mkfs(&[("f".into(), b"abc".to_vec())], 2048, 64).unwrap();
        let mut st = Storage::new();
        st.attach(BlockDev::from_bytes("rd", img, CostModel::RAMDISK));
        let fs = Xv6Fs::mount(&mut st, 0).unwrap();
        let inum = fs.namei(&mut st, &p("/f")).unwrap();
        let ino = fs.iget(&mut st, inum).unwrap();
        assert_eq!(ino.size, 3);
        assert_eq!(ino.addrs.iter().filter(|&&a| a != 0).count(), 1);
    }

    #[test]
    fn mkfs_is_deterministic() {
        let m = vec![("a/b".to_string(), vec![7u8; 5000]), ("c".to_string(), b"hello".to_vec())];
        assert_eq!(mkfs(&m, 1024, 32).unwrap(), mkfs(&m, 1024, 32).unwrap());
    }

    #[test]
    fn mkfs_reports_full_image() {
        let m = vec![("big".to_string(), vec![1u8; 200_000])];
        assert_eq!(mkfs(&m, 64, 16), Err(FsError::DiskFull));
    }

    #[test]
    fn size_ceiling_is_exact() {
        let (mut st, fs) = fresh();
        let inum = fs.create(&mut st, &p("/big"), T_FILE, 0, 0).unwrap();
        let data: Vec<u8> = (0..MAXFILE).map(|i| (i % 251) as u8).collect();
        assert_eq!(fs.writei(&mut st, inum, 0, &data), Ok(274_432));
        assert_eq!(fs.iget(&mut st, inum).unwrap().size, 274_432);
        assert_eq!(fs.writei(&mut st, inum, MAXFILE, &[1]), Err(FsError::FileTooLarge));
        assert_eq!(fs.readi(&mut st, inum, 0, MAXFILE as usize + 10).unwrap(), data);
        fs.fsck(&mut st).unwrap();
    }

    #[test]
    fn crossing_direct_region_allocates_indirect() {
        let (mut st, fs) = fresh();
        let inum = fs.create(&mut st, &p("/x"), T_FILE, 0, 0).unwrap();
        fs.writei(&mut st, inum, 0, &vec![3u8; 13 * BSIZE]).unwrap();
        assert_ne!(fs.iget(&mut st, inum).unwrap().addrs[NDIRECT], 0);
    }

    #[test]
    fn dirlink_rules() {
        let (mut st, fs) = fresh();
        fs.dirlink(&mut st, ROOT_INUM, "a", 2).unwrap();
        assert_eq!(fs.dirlookup(&mut st, ROOT_INUM, "a").unwrap().0, 2);
        assert_eq!(fs.dirlink(&mut st, ROOT_INUM, "a", 3), Err(FsError::Exists));
        assert_eq!(fs.dirlink(&mut st, ROOT_INUM, "fifteen-chars!!", 3), Err(FsError::NameTooLong));
    }

    #[test]
    fn unlink_frees_blocks() {
        let (mut st, fs) = fresh();
        let before = fs.free_blocks(&mut st).unwrap();
        let inum = fs.create(&mut st, &p("/t"), T_FILE, 0, 0).unwrap();
        fs.writei(&mut st, inum, 0, &[1; 5000]).unwrap();
        let (i, n) = fs.unlink(&mut st, &p("/t")).unwrap();
        assert_eq!((i, n), (inum, 0));
        fs.ifree(&mut st, inum).unwrap();
        assert_eq!(fs.free_blocks(&mut st).unwrap(), before);
        assert_eq!(fs.namei(&mut st, &p("/t")), Err(FsError::NotFound));
        fs.fsck(&mut st).unwrap();
    }

    #[test]
    fn nested_dirs_and_not_empty() {
        let (mut st, fs) = fresh();
        fs.create(&mut st, &p("/d1"), T_DIR, 0, 0).unwrap();
        fs.create(&mut st, &p("/d1/f"), T_FILE, 0, 0).unwrap();
        assert_eq!(fs.unlink(&mut st, &p("/d1")), Err(FsError::NotEmpty));
        assert_eq!(fs.namei(&mut st, &p("/d1/f/g")), Err(FsError::NotADirectory));
        assert!(fs.create(&mut st, &p("/d1/f/g"), T_FILE, 0, 0).is_err());
    }

    #[test]
    fn link_adds_name() {
        let (mut st, fs) = fresh();
        let a = fs.create(&mut st, &p("/a"), T_FILE, 0, 0).unwrap();
        fs.link(&mut st, &p("/a"), &p("/b")).unwrap();
        assert_eq!(fs.namei(&mut st, &p("/b")).unwrap(), a);
        assert_eq!(fs.iget(&mut st, a).unwrap().nlink, 2);
    }

    #[test]
    fn bad_superblock_rejected() {
        let mut st = Storage::new();
        st.attach(BlockDev::from_bytes("z", vec![0; 4096], CostModel::RAMDISK));
        assert!(matches!(Xv6Fs::mount(&mut st, 0), Err(FsError::BadImage(_))));
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn read_your_writes(writes in proptest::collection::vec((0u64..20_000, 1usize..3000, proptest::num::u8::ANY), 1..12)) {
            let (mut st, fs) = fresh();
            let inum = fs.create(&mut st, &p("/r"), T_FILE, 0, 0).unwrap();
            let mut shadow: Vec<u8> = Vec::new();
            for (off, len, v) in writes {
                let off = off.min(shadow.len() as u64);
                let data = vec![v; len];
                fs.writei(&mut st, inum, off, &data).unwrap();
                let end = off as usize + len;
                if shadow.len() < end { shadow.resize(end, 0); }
                shadow[off as usize..end].copy_from_slice(&data);
                proptest::prop_assert_eq!(fs.readi(&mut st, inum, off, len).unwrap(), data);
            }
            proptest::prop_assert_eq!(fs.readi(&mut st, inum, 0, shadow.len()).unwrap(), shadow);
            proptest::prop_assert!(fs.fsck(&mut st).is_ok());
        }

        #[test]
        fn fsck_after_random_ops(ops in proptest::collection::vec((0u8..4, 0u8..6, 0usize..4000), 1..40)) {
            let (mut st, fs) = fresh();
            for (op, name, len) in ops {
                let path = p(&format!("/f{name}"));
                match op {
                    0 => { if let Ok(i) = fs.create(&mut st, &path, T_FILE, 0, 0) { let sz = fs.iget(&mut st, i).unwrap().size as u64; let _ = fs.writei(&mut st, i, sz, &vec![1; len]); } }
                    1 => { if let Ok((i, 0)) = fs.unlink(&mut st, &path) { fs.ifree(&mut st, i).unwrap(); } }
                    2 => { if let Ok(i) = fs.namei(&mut st, &path) { if fs.iget(&mut st, i).unwrap().kind == T_FILE { fs.itrunc(&mut st, i).unwrap(); } } }
                    _ => { let _ = fs.create(&mut st, &p(&format!("/dir{name}")), T_DIR, 0, 0); }
                }
                proptest::prop_assert!(fs.fsck(&mut st).is_ok(), "{:?}", fs.fsck(&mut st));
            }
        }
    }
}
