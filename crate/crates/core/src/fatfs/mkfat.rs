//! FAT32 volume formatter.

use super::{FatFs, FsError, EOC};
use crate::hwsim::{BlockDev, CostModel, SECTOR_SIZE};
use crate::vfs::{normalize, Storage};

pub const RESERVED_SECTORS: u32 = 32;
pub const NUM_FATS: u32 = 2;
pub const ROOT_CLUSTER: u32 = 2;
pub const FSINFO_SECTOR: u16 = 1;
pub const BACKUP_BOOT_SECTOR: u16 = 6;
pub const VOLUME_SERIAL: u32 = 0x5052_4F54;

/// Cluster size by volume size, following the usual FAT32 table.
pub fn sectors_per_cluster(bytes: u64) -> u32 {
    const MB: u64 = 1 << 20;
    match bytes {
        b if b <= 260 * MB => 1,
        b if b <= 8192 * MB => 8,
        b if b <= 16384 * MB => 16,
        b if b <= 32768 * MB => 32,
        _ => 64,
    }
}

/// FAT length in sectors for a volume of `total` sectors.
pub fn fat_sectors(total: u32, spc: u32) -> u32 {
    let tmp1 = total - RESERVED_SECTORS;
    let tmp2 = (256 * spc + NUM_FATS) / 2;
    tmp1.div_ceil(tmp2)
}

/// Formats a blank volume of `bytes` (rounded down to whole sectors).
pub fn mkfat(bytes: u64) -> Result<Vec<u8>, FsError> {
    let total = bytes / SECTOR_SIZE as u64;
    if total > u32::MAX as u64 {
        return Err(FsError::BadImage("volume too large".into()));
    }
    let total = total as u32;
    let spc = sectors_per_cluster(bytes);
    if total <= RESERVED_SECTORS + 2 {
        return Err(FsError::NotFat32);
    }
    let fat = fat_sectors(total, spc);
    let data = RESERVED_SECTORS + NUM_FATS * fat;
    if data >= total || (total - data) / spc < super::FAT32_MIN_CLUSTERS {
        return Err(FsError::NotFat32);
    }
    let mut img = vec![0u8; total as usize * SECTOR_SIZE];

    let mut b = [0u8; SECTOR_SIZE];
    b[0..3].copy_from_slice(&[0xEB, 0x58, 0x90]);
    b[3..11].copy_from_slice(b"PROTOSIM");
    b[0x0B..0x0D].copy_from_slice(&(SECTOR_SIZE as u16).to_le_bytes());
    b[0x0D] = spc as u8;
    b[0x0E..0x10].copy_from_slice(&(RESERVED_SECTORS as u16).to_le_bytes());
    b[0x10] = NUM_FATS as u8;
    b[0x15] = 0xF8;
    b[0x18..0x1A].copy_from_slice(&63u16.to_le_bytes());
    b[0x1A..0x1C].copy_from_slice(&255u16.to_le_bytes());
    b[0x20..0x24].copy_from_slice(&total.to_le_bytes());
    b[0x24..0x28].copy_from_slice(&fat.to_le_bytes());
    b[0x2C..0x30].copy_from_slice(&ROOT_CLUSTER.to_le_bytes());
    b[0x30..0x32].copy_from_slice(&FSINFO_SECTOR.to_le_bytes());
    b[0x32..0x34].copy_from_slice(&BACKUP_BOOT_SECTOR.to_le_bytes());
    b[0x40] = 0x80;
    b[0x42] = 0x29;
    b[0x43..0x47].copy_from_slice(&VOLUME_SERIAL.to_le_bytes());
    b[0x47..0x52].copy_from_slice(b"PROTOSIM   ");
    b[0x52..0x5A].copy_from_slice(b"FAT32   ");
    b[510] = 0x55;
    b[511] = 0xAA;

    let mut fsinfo = [0u8; SECTOR_SIZE];
    fsinfo[0..4].copy_from_slice(&0x4161_5252u32.to_le_bytes());
    fsinfo[484..488].copy_from_slice(&0x6141_7272u32.to_le_bytes());
    fsinfo[488..492].copy_from_slice(&u32::MAX.to_le_bytes());
    fsinfo[492..496].copy_from_slice(&u32::MAX.to_le_bytes());
    fsinfo[508..512].copy_from_slice(&0xAA55_0000u32.to_le_bytes());

    let put = |img: &mut Vec<u8>, sector: u32, data: &[u8]| {
        let o = sector as usize * SECTOR_SIZE;
        img[o..o + data.len()].copy_from_slice(data);
    };
    put(&mut img, 0, &b);
    put(&mut img, FSINFO_SECTOR as u32, &fsinfo);
    put(&mut img, BACKUP_BOOT_SECTOR as u32, &b);
    put(&mut img, BACKUP_BOOT_SECTOR as u32 + 1, &fsinfo);

    let mut head = Vec::with_capacity(12);
    head.extend_from_slice(&0x0FFF_FFF8u32.to_le_bytes());
    head.extend_from_slice(&0x0FFF_FFFFu32.to_le_bytes());
    head.extend_from_slice(&EOC.to_le_bytes());
    for copy in 0..NUM_FATS {
        put(&mut img, RESERVED_SECTORS + copy * fat, &head);
    }
    Ok(img)
}

/// Formats a volume and writes `files` (absolute paths) into it, creating
/// parent directories.
pub fn mkfat_with(bytes: u64, files: &[(String, Vec<u8>)]) -> Result<Vec<u8>, FsError> {
    let img = mkfat(bytes)?;
    let mut st = Storage::new();
    let dev = st.attach(BlockDev::from_bytes("fat", img, CostModel::RAMDISK));
    let mut fs = FatFs::mount(&mut st, dev)?;
    for (path, data) in files {
        let parts = normalize("/", path)?;
        for i in 1..parts.len() {
            match fs.mkdir(&mut st, &parts[..i]) {
                Ok(()) | Err(FsError::Exists) => {}
                Err(e) => return Err(e),
            }
        }
        let pi = fs.open(&mut st, &parts, true)?;
        fs.truncate(&mut st, pi)?;
        let mut off = 0;
        while off < data.len() {
            off += fs.write(&mut st, pi, off as u64, &data[off..])?;
        }
        fs.close(&mut st, pi)?;
    }
    fs.unmount(&mut st)?;
    let mut devs = st.detach_all()?;
    Ok(devs.remove(0).into_image())
}
