//! Single-sector buffer cache over the block devices, plus the ranged bypass
//! path used for FAT32 file content.
//!
//! The cache is write-back: `bwrite` dirties a slot and the device sees the
//! bytes on eviction or `sync`. Bypass reads flush overlapping dirty slots
//! first and drop overlapping clean ones, so both paths always agree.

use std::collections::{BTreeMap, VecDeque};

use crate::hwsim::{BlockDev, HwError, Tick, SECTOR_SIZE};

pub const NBUF: usize = 64;

pub type DevNo = usize;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub writebacks: u64,
    pub evictions: u64,
}

#[derive(Clone)]
struct Slot {
    key: (DevNo, u64),
    data: Box<[u8; SECTOR_SIZE]>,
    dirty: bool,
}

/// Block devices behind one 64-slot LRU cache.
#[derive(Clone)]
pub struct Storage {
    devs: Vec<BlockDev>,
    slots: Vec<Slot>,
    index: BTreeMap<(DevNo, u64), usize>,
    /// Slot indices, most recently used at the front.
    lru: VecDeque<usize>,
    io_ticks: Tick,
    stats: CacheStats,
}

impl std::fmt::Debug for Storage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Storage").field("devs", &self.devs).field("cached", &self.slots.len()).finish()
    }
}

impl Default for Storage {
    fn default() -> Self {
        Self::new()
    }
}

impl Storage {
    pub fn new() -> Self {
        Self {
            devs: Vec::new(),
            slots: Vec::with_capacity(NBUF),
            index: BTreeMap::new(),
            lru: VecDeque::with_capacity(NBUF),
            io_ticks: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn attach(&mut self, dev: BlockDev) -> DevNo {
        self.devs.push(dev);
        self.devs.len() - 1
    }

    pub fn dev(&self, d: DevNo) -> &BlockDev {
        &self.devs[d]
    }

    pub fn dev_mut(&mut self, d: DevNo) -> &mut BlockDev {
        &mut self.devs[d]
    }

    pub fn ndevs(&self) -> usize {
        self.devs.len()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// Device time consumed since the last call.
    pub fn take_io_ticks(&mut self) -> Tick {
        std::mem::take(&mut self.io_ticks)
    }

    pub fn io_ticks(&self) -> Tick {
        self.io_ticks
    }

    pub fn is_cached(&self, dev: DevNo, blockno: u64) -> bool {
        self.index.contains_key(&(dev, blockno))
    }

    pub fn is_dirty(&self, dev: DevNo, blockno: u64) -> bool {
        self.index.get(&(dev, blockno)).is_some_and(|&i| self.slots[i].dirty)
    }

    pub fn cached_blocks(&self) -> Vec<(DevNo, u64)> {
        self.lru.iter().map(|&i| self.slots[i].key).collect()
    }

    fn check(&self, dev: DevNo, lba: u64, count: u64) -> Result<(), HwError> {
        let size = self.devs.get(dev).map_or(0, |d| d.size_sectors());
        if count == 0 || lba.checked_add(count).is_none_or(|e| e > size) {
            return Err(HwError::OutOfRange { lba, count, size });
        }
        Ok(())
    }

    fn touch(&mut self, slot: usize) {
        if let Some(pos) = self.lru.iter().position(|&s| s == slot) {
            self.lru.remove(pos);
        }
        self.lru.push_front(slot);
    }

    fn writeback(&mut self, slot: usize) -> Result<(), HwError> {
        if self.slots[slot].dirty {
            let (dev, blk) = self.slots[slot].key;
            let data = *self.slots[slot].data;
            self.io_ticks += self.devs[dev].write(blk, &data)?;
            self.slots[slot].dirty = false;
            self.stats.writebacks += 1;
        }
        Ok(())
    }

    /// Finds or fills the slot for a block, evicting the LRU entry if full.
    fn get(&mut self, dev: DevNo, blockno: u64, fetch: bool) -> Result<usize, HwError> {
        self.check(dev, blockno, 1)?;
        if let Some(&slot) = self.index.get(&(dev, blockno)) {
            self.stats.hits += 1;
            self.touch(slot);
            return Ok(slot);
        }
        self.stats.misses += 1;
        let slot = if self.slots.len() < NBUF {
            self.slots.push(Slot { key: (dev, blockno), data: Box::new([0; SECTOR_SIZE]), dirty: false });
            self.slots.len() - 1
        } else {
            let victim = *self.lru.back().expect("full cache has entries");
            self.writeback(victim)?;
            self.index.remove(&self.slots[victim].key);
            self.stats.evictions += 1;
            victim
        };
        if fetch {
            let (bytes, t) = self.devs[dev].read(blockno, 1)?;
            self.io_ticks += t;
            self.slots[slot].data.copy_from_slice(&bytes);
        }
        self.slots[slot].key = (dev, blockno);
        self.slots[slot].dirty = false;
        self.index.insert((dev, blockno), slot);
        self.touch(slot);
        Ok(slot)
    }

    pub fn bread(&mut self, dev: DevNo, blockno: u64) -> Result<[u8; SECTOR_SIZE], HwError> {
        let slot = self.get(dev, blockno, true)?;
        Ok(*self.slots[slot].data)
    }

    /// Replaces a whole cached sector and marks it dirty.
    pub fn bwrite(&mut self, dev: DevNo, blockno: u64, data: &[u8]) -> Result<(), HwError> {
        if data.len() != SECTOR_SIZE {
            return Err(HwError::BadLength(data.len()));
        }
        let slot = self.get(dev, blockno, false)?;
        self.slots[slot].data.copy_from_slice(data);
        self.slots[slot].dirty = true;
        Ok(())
    }

    /// Read-modify-write of part of a sector through the cache.
    pub fn bpatch(&mut self, dev: DevNo, blockno: u64, off: usize, data: &[u8]) -> Result<(), HwError> {
        if off + data.len() > SECTOR_SIZE {
            return Err(HwError::BadLength(off + data.len()));
        }
        let slot = self.get(dev, blockno, true)?;
        self.slots[slot].data[off..off + data.len()].copy_from_slice(data);
        self.slots[slot].dirty = true;
        Ok(())
    }

    /// Writes every dirty slot back to its device.
    pub fn sync(&mut self) -> Result<(), HwError> {
        let mut dirty: Vec<usize> = (0..self.slots.len()).filter(|&i| self.slots[i].dirty).collect();
        dirty.sort_by_key(|&i| self.slots[i].key);
        for i in dirty {
            self.writeback(i)?;
        }
        Ok(())
    }

    fn cached_in(&self, dev: DevNo, lba: u64, count: u64) -> Vec<usize> {
        self.index.range((dev, lba)..(dev, lba + count)).map(|(_, &s)| s).collect()
    }

    fn drop_slot(&mut self, slot: usize) {
        self.index.remove(&self.slots[slot].key);
        if let Some(pos) = self.lru.iter().position(|&s| s == slot) {
            self.lru.remove(pos);
        }
        // Park the slot on the LRU tail so it is reused first.
        self.slots[slot].key = (usize::MAX, slot as u64);
        self.slots[slot].dirty = false;
        self.index.insert(self.slots[slot].key, slot);
        self.lru.push_back(slot);
    }

    /// One ranged device read that skips the cache.
    pub fn read_range_bypass(&mut self, dev: DevNo, lba: u64, count: u64) -> Result<Vec<u8>, HwError> {
        self.check(dev, lba, count)?;
        for slot in self.cached_in(dev, lba, count) {
            self.writeback(slot)?;
            self.drop_slot(slot);
        }
        let (bytes, t) = self.devs[dev].read(lba, count)?;
        self.io_ticks += t;
        Ok(bytes)
    }

    /// One ranged device write that skips the cache; stale slots are dropped.
    pub fn write_range_bypass(&mut self, dev: DevNo, lba: u64, data: &[u8]) -> Result<(), HwError> {
        if data.is_empty() || !data.len().is_multiple_of(SECTOR_SIZE) {
            return Err(HwError::BadLength(data.len()));
        }
        let count = (data.len() / SECTOR_SIZE) as u64;
        self.check(dev, lba, count)?;
        for slot in self.cached_in(dev, lba, count) {
            self.drop_slot(slot);
        }
        self.io_ticks += self.devs[dev].write(lba, data)?;
        Ok(())
    }

    /// Device bytes after writing back everything dirty.
    pub fn image(&mut self, dev: DevNo) -> Result<&[u8], HwError> {
        self.sync()?;
        Ok(self.devs[dev].image())
    }

    pub fn detach_all(mut self) -> Result<Vec<BlockDev>, HwError> {
        self.sync()?;
        Ok(self.devs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwsim::CostModel;

    fn storage(sectors: usize) -> Storage {
        let mut s = Storage::new();
        let img: Vec<u8> = (0..sectors * SECTOR_SIZE).map(|i| (i / SECTOR_SIZE) as u8).collect();
        s.attach(BlockDev::from_bytes("t", img, CostModel::default()));
        s
    }

    #[test]
    fn repeated_read_is_one_device_op() {
        let mut s = storage(8);
        s.bread(0, 3).unwrap();
        s.bread(0, 3).unwrap();
        assert_eq!(s.dev(0).stats().ops, 1);
        assert_eq!(s.stats().hits, 1);
    }

    #[test]
    fn lru_evicts_oldest_on_65th() {
        let mut s = storage(100);
        for b in 0..65 {
            s.bread(0, b).unwrap();
        }
        assert!(!s.is_cached(0, 0));
        assert!(s.is_cached(0, 1));
        assert!(s.is_cached(0, 64));
    }

    #[test]
    fn lru_respects_recent_use() {
        let mut s = storage(100);
        for b in 0..64 {
            s.bread(0, b).unwrap();
        }
        s.bread(0, 0).unwrap();
        s.bread(0, 64).unwrap();
        assert!(s.is_cached(0, 0));
        assert!(!s.is_cached(0, 1));
    }

    #[test]
    fn dirty_eviction_reaches_device() {
        let mut s = storage(100);
        s.bwrite(0, 5, &[0xAB; SECTOR_SIZE]).unwrap();
        assert_eq!(s.dev(0).image()[5 * SECTOR_SIZE], 5);
        for b in 10..74 {
            s.bread(0, b).unwrap();
        }
        assert_eq!(s.dev(0).image()[5 * SECTOR_SIZE], 0xAB);
    }

    #[test]
    fn bypass_is_one_ranged_op() {
        let mut s = storage(4096);
        let out = s.read_range_bypass(0, 0, 2048).unwrap();
        assert_eq!(out.len(), 2048 * SECTOR_SIZE);
        assert_eq!(s.dev(0).stats().ops, 1);
        assert_eq!(s.dev(0).stats().sectors, 2048);
    }

    #[test]
    fn bypass_flushes_dirty_overlap() {
        let mut s = storage(16);
        s.bwrite(0, 3, &[0x5A; SECTOR_SIZE]).unwrap();
        let out = s.read_range_bypass(0, 2, 3).unwrap();
        assert!(out[SECTOR_SIZE..2 * SECTOR_SIZE].iter().all(|&b| b == 0x5A));
        assert!(!s.is_cached(0, 3));
    }

    #[test]
    fn bypass_write_invalidates_clean_copy() {
        let mut s = storage(16);
        s.bread(0, 4).unwrap();
        s.write_range_bypass(0, 4, &[9; SECTOR_SIZE]).unwrap();
        assert_eq!(s.bread(0, 4).unwrap()[0], 9);
    }

    #[test]
    fn out_of_range() {
        let mut s = storage(4);
        assert!(matches!(s.bread(0, 4), Err(HwError::OutOfRange { .. })));
        assert!(s.read_range_bypass(0, 3, 2).is_err());
    }

    proptest::proptest! {
        #[test]
        fn coherent_with_shadow_model(ops in proptest::collection::vec((0u8..4, 0u64..120, 1u64..6, proptest::num::u8::ANY), 1..200)) {
            let n = 128u64;
            let mut s = storage(n as usize);
            let mut shadow = s.dev(0).image().to_vec();
            for (op, lba, cnt, val) in ops {
                let cnt = cnt.min(n - lba);
                match op {
                    0 => {
                        s.bwrite(0, lba, &[val; SECTOR_SIZE]).unwrap();
                        shadow[lba as usize * SECTOR_SIZE..(lba as usize + 1) * SECTOR_SIZE].fill(val);
                    }
                    1 => {
                        let got = s.bread(0, lba).unwrap();
                        proptest::prop_assert_eq!(&got[..], &shadow[lba as usize * SECTOR_SIZE..(lba as usize + 1) * SECTOR_SIZE]);
                    }
                    2 => {
                        let got = s.read_range_bypass(0, lba, cnt).unwrap();
                        proptest::prop_assert_eq!(&got[..], &shadow[lba as usize * SECTOR_SIZE..(lba + cnt) as usize * SECTOR_SIZE]);
                    }
                    _ => {
                        let data = vec![val; cnt as usize * SECTOR_SIZE];
                        s.write_range_bypass(0, lba, &data).unwrap();
                        shadow[lba as usize * SECTOR_SIZE..(lba + cnt) as usize * SECTOR_SIZE].copy_from_slice(&data);
                    }
                }
            }
            proptest::prop_assert_eq!(s.image(0).unwrap(), &shadow[..]);
        }
    }
}
