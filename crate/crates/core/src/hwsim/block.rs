//! Sector-addressed block devices backed by an in-memory copy of an image.
//!
//! Transfers are synchronous: the caller is charged
//! `per_op + count * per_sector` ticks per request, which is what makes
//! ranged requests cheaper than the equivalent run of single-sector ones.

use std::fs;
use std::path::Path;

use super::clock::Tick;
use super::HwError;

pub const SECTOR_SIZE: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostModel {
    pub per_op: Tick,
    pub per_sector: Tick,
}

impl CostModel {
    /// SD-class card: about 21 MB/s streaming with a command overhead of
    /// one and a half sector times.
    pub const SD_CARD: CostModel = CostModel { per_op: 36, per_sector: 24 };
    /// In-memory ramdisk; transfers are memcpy-bound.
    pub const RAMDISK: CostModel = CostModel { per_op: 1, per_sector: 1 };

    pub fn cost(&self, count: u64) -> Tick {
        self.per_op + count * self.per_sector
    }
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel::SD_CARD
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockStats {
    pub ops: u64,
    pub sectors: u64,
    pub ticks: Tick,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockOp {
    Read,
    Write,
}

#[derive(Clone)]
pub struct BlockDev {
    name: String,
    image: Vec<u8>,
    cost: CostModel,
    stats: BlockStats,
}

impl std::fmt::Debug for BlockDev {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlockDev")
            .field("name", &self.name)
            .field("size_sectors", &self.size_sectors())
            .field("cost", &self.cost)
            .field("stats", &self.stats)
            .finish()
    }
}

impl BlockDev {
    /// Wraps `image`, padding it up to a whole number of sectors.
    pub fn from_bytes(name: impl Into<String>, mut image: Vec<u8>, cost: CostModel) -> Self {
        let rem = image.len() % SECTOR_SIZE;
        if rem != 0 {
            image.resize(image.len() + SECTOR_SIZE - rem, 0);
        }
        Self { name: name.into(), image, cost, stats: BlockStats::default() }
    }

    pub fn open(path: &Path, cost: CostModel) -> Result<Self, HwError> {
        let bytes = fs::read(path).map_err(|e| HwError::Io(format!("{}: {e}", path.display())))?;
        Ok(Self::from_bytes(path.display().to_string(), bytes, cost))
    }

    pub fn save(&self, path: &Path) -> Result<(), HwError> {
        fs::write(path, &self.image).map_err(|e| HwError::Io(format!("{}: {e}", path.display())))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn size_sectors(&self) -> u64 {
        (self.image.len() / SECTOR_SIZE) as u64
    }

    pub fn cost_model(&self) -> CostModel {
        self.cost
    }

    pub fn set_cost_model(&mut self, cost: CostModel) {
        self.cost = cost;
    }

    pub fn stats(&self) -> BlockStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = BlockStats::default();
    }

    pub fn image(&self) -> &[u8] {
        &self.image
    }

    pub fn into_image(self) -> Vec<u8> {
        self.image
    }

    fn check(&self, lba: u64, count: u64) -> Result<(), HwError> {
        if count == 0 || lba.checked_add(count).is_none_or(|end| end > self.size_sectors()) {
            return Err(HwError::OutOfRange { lba, count, size: self.size_sectors() });
        }
        Ok(())
    }

    fn charge(&mut self, count: u64) -> Tick {
        let cost = self.cost.cost(count);
        self.stats.ops += 1;
        self.stats.sectors += count;
        self.stats.ticks += cost;
        cost
    }

    /// Reads `count` sectors starting at `lba`. Returns the bytes and the
    /// ticks the caller must be charged.
    pub fn read(&mut self, lba: u64, count: u64) -> Result<(Vec<u8>, Tick), HwError> {
        self.check(lba, count)?;
        let start = lba as usize * SECTOR_SIZE;
        let end = start + count as usize * SECTOR_SIZE;
        let data = self.image[start..end].to_vec();
        Ok((data, self.charge(count)))
    }

    /// Writes whole sectors; `data.len()` must be a positive multiple of 512.
    pub fn write(&mut self, lba: u64, data: &[u8]) -> Result<Tick, HwError> {
        if data.is_empty() || !data.len().is_multiple_of(SECTOR_SIZE) {
            return Err(HwError::BadLength(data.len()));
        }
        let count = (data.len() / SECTOR_SIZE) as u64;
        self.check(lba, count)?;
        let start = lba as usize * SECTOR_SIZE;
        self.image[start..start + data.len()].copy_from_slice(data);
        Ok(self.charge(count))
    }

    /// Combined entry point mirroring the driver interface.
    pub fn block_io(
        &mut self,
        op: BlockOp,
        lba: u64,
        count: u64,
        data: Option<&[u8]>,
    ) -> Result<(Option<Vec<u8>>, Tick), HwError> {
        match op {
            BlockOp::Read => self.read(lba, count).map(|(d, t)| (Some(d), t)),
            BlockOp::Write => {
                let data = data.ok_or(HwError::BadLength(0))?;
                if data.len() != count as usize * SECTOR_SIZE {
                    return Err(HwError::BadLength(data.len()));
                }
                self.write(lba, data).map(|t| (None, t))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev(sectors: usize) -> BlockDev {
        BlockDev::from_bytes("t", vec![0; sectors * SECTOR_SIZE], CostModel { per_op: 400, per_sector: 3 })
    }

    #[test]
    fn write_then_read_roundtrip() {
        let mut d = dev(8);
        d.write(0, &[0xAA; 512]).unwrap();
        let (data, _) = d.read(0, 1).unwrap();
        assert_eq!(data, vec![0xAA; 512]);
    }

    #[test]
    fn range_cost_vs_singles() {
        let mut d = dev(4096);
        let (_, range) = d.read(0, 2048).unwrap();
        assert_eq!(range, 400 + 2048 * 3);
        let singles: Tick = (0..2048).map(|lba| d.read(lba, 1).unwrap().1).sum();
        assert_eq!(singles, 2048 * (400 + 3));
        assert_eq!(d.stats().ops, 2049);
    }

    #[test]
    fn out_of_range() {
        let mut d = dev(8);
        assert!(matches!(d.read(8, 1), Err(HwError::OutOfRange { .. })));
        assert!(matches!(d.read(7, 2), Err(HwError::OutOfRange { .. })));
        assert!(matches!(d.read(0, 0), Err(HwError::OutOfRange { .. })));
        assert!(d.read(7, 1).is_ok());
    }

    #[test]
    fn pads_partial_image() {
        let d = BlockDev::from_bytes("t", vec![1; 700], CostModel::RAMDISK);
        assert_eq!(d.size_sectors(), 2);
    }

    proptest::proptest! {
        #[test]
        fn pure_byte_store(writes in proptest::collection::vec((0u64..16, 1u64..4, proptest::prelude::any::<u8>()), 1..40)) {
            let mut d = dev(20);
            let mut shadow = vec![0u8; 20 * SECTOR_SIZE];
            for (lba, n, b) in writes {
                let data = vec![b; n as usize * SECTOR_SIZE];
                d.write(lba, &data).unwrap();
                let s = lba as usize * SECTOR_SIZE;
                shadow[s..s + data.len()].copy_from_slice(&data);
            }
            let (all, _) = d.read(0, 20).unwrap();
            proptest::prop_assert_eq!(all, shadow);
        }
    }
}
