//! Physical pages, address spaces and translation.
//!
//! Guest code never touches host memory directly: every load, store and
//! fetch is translated through the task's [`AddressSpace`] and lands either
//! in a simulated DRAM page or, for the framebuffer aperture, in the device
//! via [`DeviceBus`].
//!
//! User layout (all below `USER_TOP = 2^39`):
//!
//! ```text
//!   0x0000_1000 ..          code/data segments from the program image
//!   code_hi .. brk          heap, grown eagerly by sbrk
//!   fb aperture             identity-mapped framebuffer (when mapped)
//!   USER_TOP-64K .. TOP     stack, demand paged, one page pre-mapped
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sched::FaultRecord;

pub const PAGE_SIZE: u64 = 4096;
pub const PAGE_SHIFT: u32 = 12;
pub const USER_TOP: u64 = 1 << 39;
pub const STACK_MAX: u64 = 64 * 1024;
pub const STACK_LO: u64 = USER_TOP - STACK_MAX;
pub const KERNEL_BASE: u64 = 0xffff_0000_0000_0000;
pub const BLOCK_SIZE_1M: u64 = 1 << 20;
pub const DEFAULT_TOTAL_PAGES: u32 = 262_144;
/// Pages below this are the kernel image and boot structures.
pub const KERNEL_IMAGE_PAGES: u32 = 1024;
/// GPU and peripheral memory at the top of DRAM: not handed to the allocator.
pub const GPU_MEM_BASE: u64 = 0x3C00_0000;
pub const PERIPH_BASE: u64 = 0x3F00_0000;
pub const DRAM_END: u64 = 0x4000_0000;

/// Exit code of a task killed by an unrecoverable fault.
pub const EXIT_SEGV: i32 = -11;
/// Exit code of a task killed because no page was available.
pub const EXIT_OOM: i32 = -12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MemError {
    #[error("out of physical memory")]
    OutOfMemory,
    #[error("address out of range")]
    OutOfRange,
    #[error("no such address space")]
    NoSuchSpace,
    #[error("page already mapped at {0:#x}")]
    AlreadyMapped(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Perms(pub u8);

impl Perms {
    pub const R: Perms = Perms(1);
    pub const W: Perms = Perms(2);
    pub const X: Perms = Perms(4);
    pub const RW: Perms = Perms(3);
    pub const RX: Perms = Perms(5);

    pub fn allows(self, access: Access) -> bool {
        let bit = match access {
            Access::R => 1,
            Access::W => 2,
            Access::X => 4,
        };
        self.0 & bit != 0
    }

    pub fn union(self, o: Perms) -> Perms {
        Perms(self.0 | o.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Access {
    R,
    W,
    X,
}

/// A translation failure; a value handed to the fault handler, not a crash.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fault {
    pub va: u64,
    pub access: Access,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultOutcome {
    Mapped,
    Killed(i32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pte {
    pub ppn: u64,
    pub perms: Perms,
    /// False for device apertures, which are never returned to the allocator.
    pub owned: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Regions {
    pub code_lo: u64,
    pub code_hi: u64,
    pub brk: u64,
    pub stack_lo: u64,
    pub stack_hi: u64,
    pub fb: Option<(u64, u64)>,
}

impl Default for Regions {
    fn default() -> Self {
        Self { code_lo: 0, code_hi: 0, brk: 0, stack_lo: STACK_LO, stack_hi: USER_TOP, fb: None }
    }
}

#[derive(Clone, Debug)]
pub struct AddressSpace {
    pages: BTreeMap<u64, Pte>,
    pub regions: Regions,
    share_count: u32,
}

impl AddressSpace {
    fn new() -> Self {
        Self { pages: BTreeMap::new(), regions: Regions::default(), share_count: 1 }
    }

    pub fn share_count(&self) -> u32 {
        self.share_count
    }

    pub fn pte(&self, vpn: u64) -> Option<&Pte> {
        self.pages.get(&vpn)
    }

    pub fn mapped_pages(&self) -> usize {
        self.pages.len()
    }

    pub fn owned_pages(&self) -> usize {
        self.pages.values().filter(|p| p.owned).count()
    }

    pub fn vpns(&self) -> impl Iterator<Item = u64> + '_ {
        self.pages.keys().copied()
    }

    pub fn in_stack(&self, va: u64) -> bool {
        va >= self.regions.stack_lo && va < self.regions.stack_hi
    }

    /// Lowest address the heap may not grow into.
    fn heap_limit(&self) -> u64 {
        match self.regions.fb {
            Some((lo, _)) if lo >= self.regions.code_hi => lo.min(self.regions.stack_lo),
            _ => self.regions.stack_lo,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AsId(pub u32);

/// Free-page set with lowest-first allocation.
#[derive(Clone, Debug)]
pub struct PhysAllocator {
    total: u32,
    free: BTreeSet<u32>,
}

impl PhysAllocator {
    pub fn new(total: u32) -> Self {
        Self { total, free: (0..total).collect() }
    }

    pub fn total(&self) -> u32 {
        self.total
    }

    pub fn free_count(&self) -> u32 {
        self.free.len() as u32
    }

    pub fn alloc(&mut self) -> Option<u32> {
        self.free.pop_first()
    }

    /// Removes a specific page from the free set (boot reservations).
    pub fn reserve(&mut self, ppn: u32) -> bool {
        self.free.remove(&ppn)
    }

    pub fn free(&mut self, ppn: u32) {
        assert!(ppn < self.total, "free of page {ppn} beyond total");
        let fresh = self.free.insert(ppn);
        assert!(fresh, "double free of page {ppn}");
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockAttr {
    Normal,
    Device,
}

/// Kernel linear map in 1 MB blocks: `va = KERNEL_BASE + pa`.
#[derive(Clone, Debug)]
pub struct KernelMap {
    blocks: BTreeMap<u64, BlockAttr>,
}

impl KernelMap {
    pub fn boot() -> Self {
        let mut blocks = BTreeMap::new();
        let mut pa = 0;
        while pa < DRAM_END {
            let attr = if pa >= PERIPH_BASE { BlockAttr::Device } else { BlockAttr::Normal };
            blocks.insert(pa, attr);
            pa += BLOCK_SIZE_1M;
        }
        // ARM local peripherals.
        blocks.insert(DRAM_END, BlockAttr::Device);
        Self { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn translate(&self, va: u64) -> Option<(u64, BlockAttr)> {
        let pa = va.checked_sub(KERNEL_BASE)?;
        let base = pa & !(BLOCK_SIZE_1M - 1);
        self.blocks.get(&base).map(|&a| (pa, a))
    }

    pub fn blocks(&self) -> impl Iterator<Item = (u64, BlockAttr)> + '_ {
        self.blocks.iter().map(|(&p, &a)| (p, a))
    }
}

/// Memory-mapped devices reachable through user mappings.
pub trait DeviceBus {
    fn dev_read(&self, pa: u64, buf: &mut [u8]) -> bool;
    fn dev_write(&mut self, pa: u64, data: &[u8]) -> bool;
}

pub struct NoDevices;

impl DeviceBus for NoDevices {
    fn dev_read(&self, _pa: u64, _buf: &mut [u8]) -> bool {
        false
    }
    fn dev_write(&mut self, _pa: u64, _data: &[u8]) -> bool {
        false
    }
}

impl DeviceBus for crate::hwsim::FbHw {
    fn dev_read(&self, pa: u64, buf: &mut [u8]) -> bool {
        let Some(off) = pa.checked_sub(crate::hwsim::fb::FB_PHYS_BASE) else { return false };
        match self.read_shadow(off as usize, buf.len()) {
            Ok(src) => {
                buf.copy_from_slice(src);
                true
            }
            Err(_) => false,
        }
    }

    fn dev_write(&mut self, pa: u64, data: &[u8]) -> bool {
        let Some(off) = pa.checked_sub(crate::hwsim::fb::FB_PHYS_BASE) else { return false };
        self.write_shadow(off as usize, data).is_ok()
    }
}

type Page = Box<[u8; PAGE_SIZE as usize]>;

/// The memory subsystem: allocator, DRAM contents and all address spaces.
#[derive(Clone)]
pub struct Memory {
    alloc: PhysAllocator,
    dram: HashMap<u32, Page>,
    spaces: BTreeMap<AsId, AddressSpace>,
    next_as: u32,
    kernel_map: KernelMap,
    kernel_held: BTreeSet<u32>,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for Memory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Memory")
            .field("free", &self.alloc.free_count())
            .field("total", &self.alloc.total())
            .field("spaces", &self.spaces.len())
            .finish()
    }
}

impl Memory {
    /// Boots with the kernel image and GPU/peripheral range reserved.
    pub fn new(total_pages: u32, seed: u64) -> Self {
        let mut m = Self::bare(total_pages, seed);
        for ppn in 0..KERNEL_IMAGE_PAGES.min(total_pages) {
            m.alloc.reserve(ppn);
            m.kernel_held.insert(ppn);
        }
        let gpu = (GPU_MEM_BASE >> PAGE_SHIFT) as u32;
        let end = (DRAM_END >> PAGE_SHIFT) as u32;
        for ppn in gpu..end.min(total_pages) {
            m.alloc.reserve(ppn);
            m.kernel_held.insert(ppn);
        }
        m
    }

    /// No reservations; every page is free. Used by unit tests.
    pub fn bare(total_pages: u32, seed: u64) -> Self {
        Self {
            alloc: PhysAllocator::new(total_pages),
            dram: HashMap::new(),
            spaces: BTreeMap::new(),
            next_as: 1,
            kernel_map: KernelMap::boot(),
            kernel_held: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn total_pages(&self) -> u32 {
        self.alloc.total()
    }

    pub fn free_pages(&self) -> u32 {
        self.alloc.free_count()
    }

    pub fn kernel_held(&self) -> u32 {
        self.kernel_held.len() as u32
    }

    pub fn kernel_map(&self) -> &KernelMap {
        &self.kernel_map
    }

    pub fn space(&self, id: AsId) -> Option<&AddressSpace> {
        self.spaces.get(&id)
    }

    pub fn space_mut(&mut self, id: AsId) -> Option<&mut AddressSpace> {
        self.spaces.get_mut(&id)
    }

    pub fn spaces(&self) -> impl Iterator<Item = (AsId, &AddressSpace)> {
        self.spaces.iter().map(|(&k, v)| (k, v))
    }

    /// Allocates a page whose contents are leftover garbage.
    fn alloc_page(&mut self) -> Option<u32> {
        let ppn = self.alloc.alloc()?;
        let mut page: Page = Box::new([0; PAGE_SIZE as usize]);
        self.rng.fill_bytes(&mut page[..]);
        self.dram.insert(ppn, page);
        Some(ppn)
    }

    fn free_page(&mut self, ppn: u32) {
        self.dram.remove(&ppn);
        self.alloc.free(ppn);
    }

    /// A page held by the kernel itself (task kernel stacks and the like).
    pub fn alloc_kernel_page(&mut self) -> Result<u32, MemError> {
        let ppn = self.alloc_page().ok_or(MemError::OutOfMemory)?;
        self.kernel_held.insert(ppn);
        Ok(ppn)
    }

    pub fn free_kernel_page(&mut self, ppn: u32) {
        if self.kernel_held.remove(&ppn) {
            self.free_page(ppn);
        }
    }

    pub fn new_space(&mut self) -> AsId {
        let id = AsId(self.next_as);
        self.next_as += 1;
        self.spaces.insert(id, AddressSpace::new());
        id
    }

    /// Maps a fresh page at `vpn`. `zero` clears the allocator's garbage.
    pub fn map_new(&mut self, id: AsId, vpn: u64, perms: Perms, zero: bool) -> Result<u32, MemError> {
        if vpn >= USER_TOP >> PAGE_SHIFT {
            return Err(MemError::OutOfRange);
        }
        let space = self.spaces.get(&id).ok_or(MemError::NoSuchSpace)?;
        if space.pages.contains_key(&vpn) {
            return Err(MemError::AlreadyMapped(vpn << PAGE_SHIFT));
        }
        let ppn = self.alloc_page().ok_or(MemError::OutOfMemory)?;
        if zero {
            self.dram.get_mut(&ppn).expect("fresh page").fill(0);
        }
        self.spaces
            .get_mut(&id)
            .expect("checked")
            .pages
            .insert(vpn, Pte { ppn: ppn as u64, perms, owned: true });
        Ok(ppn)
    }

    /// Maps an unowned device range (e.g. the framebuffer) at identity.
    pub fn map_device(&mut self, id: AsId, pa: u64, len: u64, perms: Perms) -> Result<(), MemError> {
        let space = self.spaces.get_mut(&id).ok_or(MemError::NoSuchSpace)?;
        let lo = pa & !(PAGE_SIZE - 1);
        let hi = (pa + len + PAGE_SIZE - 1) & !(PAGE_SIZE - 1);
        if hi > USER_TOP {
            return Err(MemError::OutOfRange);
        }
        for vpn in (lo >> PAGE_SHIFT)..(hi >> PAGE_SHIFT) {
            space.pages.insert(vpn, Pte { ppn: vpn, perms, owned: false });
        }
        space.regions.fb = Some((lo, hi));
        Ok(())
    }

    pub fn unmap(&mut self, id: AsId, vpn: u64) -> bool {
        let Some(space) = self.spaces.get_mut(&id) else { return false };
        match space.pages.remove(&vpn) {
            Some(pte) => {
                if pte.owned {
                    self.free_page(pte.ppn as u32);
                }
                true
            }
            None => false,
        }
    }

    pub fn set_perms(&mut self, id: AsId, vpn: u64, perms: Perms) -> bool {
        match self.spaces.get_mut(&id).and_then(|s| s.pages.get_mut(&vpn)) {
            Some(pte) => {
                pte.perms = perms;
                true
            }
            None => false,
        }
    }

    /// Pure translation. Mapped and permitted yields the physical address.
    pub fn translate(&self, id: AsId, va: u64, access: Access) -> Result<u64, Fault> {
        let fault = Fault { va, access };
        if va >= USER_TOP {
            return Err(fault);
        }
        let space = self.spaces.get(&id).ok_or(fault)?;
        let pte = space.pages.get(&(va >> PAGE_SHIFT)).ok_or(fault)?;
        if !pte.perms.allows(access) {
            return Err(fault);
        }
        Ok((pte.ppn << PAGE_SHIFT) | (va & (PAGE_SIZE - 1)))
    }

    /// Demand-paging fault handler for user tasks.
    ///
    /// An unmapped stack page is mapped RW (zeroed). A second consecutive
    /// fault at the same address, or any fault outside the stack, kills.
    pub fn handle_fault(&mut self, id: AsId, rec: &mut FaultRecord, va: u64) -> FaultOutcome {
        if rec.last_va == Some(va) {
            rec.count += 1;
            return FaultOutcome::Killed(EXIT_SEGV);
        }
        rec.last_va = Some(va);
        rec.count = 1;
        let Some(space) = self.spaces.get(&id) else { return FaultOutcome::Killed(EXIT_SEGV) };
        let vpn = va >> PAGE_SHIFT;
        if !space.in_stack(va) || space.pages.contains_key(&vpn) {
            return FaultOutcome::Killed(EXIT_SEGV);
        }
        match self.map_new(id, vpn, Perms::RW, true) {
            Ok(_) => FaultOutcome::Mapped,
            Err(MemError::OutOfMemory) => FaultOutcome::Killed(EXIT_OOM),
            Err(_) => FaultOutcome::Killed(EXIT_SEGV),
        }
    }

    /// Moves the program break by `delta` bytes and returns the old break.
    pub fn sbrk(&mut self, id: AsId, delta: i64) -> Result<u64, MemError> {
        let space = self.spaces.get(&id).ok_or(MemError::NoSuchSpace)?;
        let old = space.regions.brk;
        if delta == 0 {
            return Ok(old);
        }
        let new = if delta > 0 {
            old.checked_add(delta as u64).ok_or(MemError::OutOfRange)?
        } else {
            old.checked_sub(delta.unsigned_abs()).ok_or(MemError::OutOfRange)?
        };
        if new < space.regions.code_hi || new > space.heap_limit() {
            return Err(MemError::OutOfRange);
        }
        let old_top = page_ceil(old) >> PAGE_SHIFT;
        let new_top = page_ceil(new) >> PAGE_SHIFT;
        if new_top > old_top {
            let mut mapped = Vec::new();
            for vpn in old_top..new_top {
                match self.map_new(id, vpn, Perms::RW, true) {
                    Ok(_) => mapped.push(vpn),
                    Err(e) => {
                        for v in mapped {
                            self.unmap(id, v);
                        }
                        return Err(e);
                    }
                }
            }
        } else {
            for vpn in new_top..old_top {
                self.unmap(id, vpn);
            }
        }
        self.spaces.get_mut(&id).expect("checked").regions.brk = new;
        Ok(old)
    }

    /// Eager deep copy. Fails without side effects when memory is short.
    pub fn as_fork(&mut self, src: AsId) -> Result<AsId, MemError> {
        let space = self.spaces.get(&src).ok_or(MemError::NoSuchSpace)?.clone();
        let need = space.owned_pages() as u32;
        if self.alloc.free_count() < need {
            return Err(MemError::OutOfMemory);
        }
        let id = self.new_space();
        let mut copy = AddressSpace::new();
        copy.regions = space.regions;
        for (&vpn, pte) in &space.pages {
            if pte.owned {
                let ppn = self.alloc.alloc().expect("counted above");
                let data = self.dram.get(&(pte.ppn as u32)).expect("owned page has storage").clone();
                self.dram.insert(ppn, data);
                copy.pages.insert(vpn, Pte { ppn: ppn as u64, perms: pte.perms, owned: true });
            } else {
                copy.pages.insert(vpn, *pte);
            }
        }
        self.spaces.insert(id, copy);
        Ok(id)
    }

    /// Shares the same mapping object with another task.
    pub fn as_share(&mut self, src: AsId) -> Result<AsId, MemError> {
        let space = self.spaces.get_mut(&src).ok_or(MemError::NoSuchSpace)?;
        space.share_count += 1;
        Ok(src)
    }

    /// Drops one reference; frees every owned page when the last one goes.
    pub fn as_release(&mut self, id: AsId) -> bool {
        let Some(space) = self.spaces.get_mut(&id) else { return false };
        space.share_count -= 1;
        if space.share_count > 0 {
            return false;
        }
        let space = self.spaces.remove(&id).expect("present");
        for pte in space.pages.values().filter(|p| p.owned) {
            self.free_page(pte.ppn as u32);
        }
        true
    }

    fn phys_read(&self, pa: u64, buf: &mut [u8], dev: &dyn DeviceBus) -> bool {
        let ppn = (pa >> PAGE_SHIFT) as u32;
        match self.dram.get(&ppn) {
            Some(page) => {
                let off = (pa & (PAGE_SIZE - 1)) as usize;
                buf.copy_from_slice(&page[off..off + buf.len()]);
                true
            }
            None => dev.dev_read(pa, buf),
        }
    }

    fn phys_write(&mut self, pa: u64, data: &[u8], dev: &mut dyn DeviceBus) -> bool {
        let ppn = (pa >> PAGE_SHIFT) as u32;
        match self.dram.get_mut(&ppn) {
            Some(page) => {
                let off = (pa & (PAGE_SIZE - 1)) as usize;
                page[off..off + data.len()].copy_from_slice(data);
                true
            }
            None => dev.dev_write(pa, data),
        }
    }

    /// Translated read of `buf.len()` bytes at `va`.
    pub fn read_user(&self, id: AsId, va: u64, buf: &mut [u8], dev: &dyn DeviceBus) -> Result<(), Fault> {
        let mut done = 0usize;
        while done < buf.len() {
            let cur = va + done as u64;
            let chunk = ((PAGE_SIZE - (cur & (PAGE_SIZE - 1))) as usize).min(buf.len() - done);
            let pa = self.translate(id, cur, Access::R)?;
            if !self.phys_read(pa, &mut buf[done..done + chunk], dev) {
                return Err(Fault { va: cur, access: Access::R });
            }
            done += chunk;
        }
        Ok(())
    }

    /// Translated write. Bytes before a faulting page are already stored.
    pub fn write_user(&mut self, id: AsId, va: u64, data: &[u8], dev: &mut dyn DeviceBus) -> Result<(), Fault> {
        let mut done = 0usize;
        while done < data.len() {
            let cur = va + done as u64;
            let chunk = ((PAGE_SIZE - (cur & (PAGE_SIZE - 1))) as usize).min(data.len() - done);
            let pa = self.translate(id, cur, Access::W)?;
            if !self.phys_write(pa, &data[done..done + chunk], dev) {
                return Err(Fault { va: cur, access: Access::W });
            }
            done += chunk;
        }
        Ok(())
    }

    /// Checks every page of the range for `access` without touching data.
    pub fn probe(&self, id: AsId, va: u64, len: u64, access: Access) -> Result<(), Fault> {
        if len == 0 {
            return Ok(());
        }
        let mut page = va & !(PAGE_SIZE - 1);
        let end = va.checked_add(len).ok_or(Fault { va, access })?;
        while page < end {
            self.translate(id, page.max(va), access)?;
            page += PAGE_SIZE;
        }
        Ok(())
    }

    /// Page conservation: free + pages owned by spaces + kernel-held = total.
    pub fn audit(&self) -> Result<(), String> {
        let mut owned = BTreeSet::new();
        for space in self.spaces.values() {
            for pte in space.pages.values().filter(|p| p.owned) {
                if !owned.insert(pte.ppn as u32) {
                    return Err(format!("page {} mapped by two spaces", pte.ppn));
                }
                if self.alloc.free.contains(&(pte.ppn as u32)) {
                    return Err(format!("mapped page {} is on the free list", pte.ppn));
                }
            }
        }
        let sum = self.alloc.free_count() as u64 + owned.len() as u64 + self.kernel_held.len() as u64;
        if sum != self.alloc.total() as u64 {
            return Err(format!(
                "free {} + mapped {} + kernel {} != total {}",
                self.alloc.free_count(),
                owned.len(),
                self.kernel_held.len(),
                self.alloc.total()
            ));
        }
        Ok(())
    }
}

pub fn page_ceil(v: u64) -> u64 {
    (v + PAGE_SIZE - 1) & !(PAGE_SIZE - 1)
}

pub fn page_floor(v: u64) -> u64 {
    v & !(PAGE_SIZE - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mem() -> Memory {
        Memory::bare(64, 1)
    }

    fn heap_space(m: &mut Memory, brk: u64) -> AsId {
        let id = m.new_space();
        let s = m.space_mut(id).unwrap();
        s.regions.code_lo = 0x1000;
        s.regions.code_hi = brk;
        s.regions.brk = brk;
        id
    }

    #[test]
    fn empty_space_faults() {
        let mut m = mem();
        let id = m.new_space();
        assert_eq!(m.translate(id, 0, Access::R), Err(Fault { va: 0, access: Access::R }));
    }

    #[test]
    fn translate_arithmetic_and_perms() {
        let mut m = mem();
        let id = m.new_space();
        m.space_mut(id).unwrap().pages.insert(2, Pte { ppn: 7, perms: Perms::R, owned: false });
        assert_eq!(m.translate(id, 0x2010, Access::R), Ok(0x7010));
        assert!(m.translate(id, 0x2010, Access::W).is_err());
        assert!(m.translate(id, KERNEL_BASE + 0x2010, Access::R).is_err());
    }

    #[test]
    fn stack_demand_paging_then_double_fault_kills() {
        let mut m = mem();
        let id = m.new_space();
        let mut rec = FaultRecord::default();
        let va = USER_TOP - 2 * PAGE_SIZE + 8;
        assert_eq!(m.handle_fault(id, &mut rec, va), FaultOutcome::Mapped);
        assert!(m.translate(id, va, Access::W).is_ok());
        assert_eq!(m.handle_fault(id, &mut rec, va), FaultOutcome::Killed(EXIT_SEGV));
    }

    #[test]
    fn fault_outside_regions_kills() {
        let mut m = mem();
        let id = m.new_space();
        let mut rec = FaultRecord::default();
        assert_eq!(m.handle_fault(id, &mut rec, 0xdead_beef), FaultOutcome::Killed(EXIT_SEGV));
    }

    #[test]
    fn stack_fault_oom_has_distinct_code() {
        let mut m = Memory::bare(1, 0);
        let id = m.new_space();
        m.map_new(id, 0x10, Perms::RW, true).unwrap();
        let mut rec = FaultRecord::default();
        assert_eq!(m.handle_fault(id, &mut rec, USER_TOP - 8), FaultOutcome::Killed(EXIT_OOM));
    }

    #[test]
    fn sbrk_grow_shrink() {
        let mut m = mem();
        let id = heap_space(&mut m, 0x5000);
        assert_eq!(m.sbrk(id, 8192), Ok(0x5000));
        assert!(m.space(id).unwrap().pte(5).is_some());
        assert!(m.space(id).unwrap().pte(6).is_some());
        assert_eq!(m.sbrk(id, 0), Ok(0x7000));
        let free = m.free_pages();
        assert_eq!(m.sbrk(id, -4096), Ok(0x7000));
        assert_eq!(m.free_pages(), free + 1);
        assert!(m.space(id).unwrap().pte(6).is_none());
    }

    #[test]
    fn sbrk_zero_fills_and_rejects_stack_overlap() {
        let mut m = mem();
        let id = heap_space(&mut m, 0x5000);
        m.sbrk(id, 100).unwrap();
        let mut buf = [0xffu8; 100];
        m.read_user(id, 0x5000, &mut buf, &NoDevices).unwrap();
        assert!(buf.iter().all(|&b| b == 0));
        assert_eq!(m.sbrk(id, (STACK_LO - 0x5000) as i64), Err(MemError::OutOfRange));
    }

    #[test]
    fn sbrk_oom_leaves_brk() {
        let mut m = Memory::bare(2, 0);
        let id = heap_space(&mut m, 0x5000);
        assert_eq!(m.sbrk(id, 3 * 4096), Err(MemError::OutOfMemory));
        assert_eq!(m.sbrk(id, 0), Ok(0x5000));
        assert_eq!(m.free_pages(), 2);
    }

    #[test]
    fn fork_isolation_and_accounting() {
        let mut m = mem();
        let id = heap_space(&mut m, 0x5000);
        m.sbrk(id, 3 * 4096).unwrap();
        m.write_user(id, 0x5000, b"parent", &mut NoDevices).unwrap();
        let before = m.free_pages();
        let child = m.as_fork(id).unwrap();
        assert_eq!(m.free_pages(), before - 3);
        assert_eq!(m.space(child).unwrap().share_count(), 1);
        m.write_user(child, 0x5000, b"child!", &mut NoDevices).unwrap();
        let mut buf = [0; 6];
        m.read_user(id, 0x5000, &mut buf, &NoDevices).unwrap();
        assert_eq!(&buf, b"parent");
        m.audit().unwrap();
    }

    #[test]
    fn fork_oom_changes_nothing() {
        let mut m = Memory::bare(5, 0);
        let id = heap_space(&mut m, 0x5000);
        m.sbrk(id, 3 * 4096).unwrap();
        let spaces = m.spaces().count();
        assert_eq!(m.as_fork(id), Err(MemError::OutOfMemory));
        assert_eq!(m.free_pages(), 2);
        assert_eq!(m.spaces().count(), spaces);
    }

    #[test]
    fn share_then_release() {
        let mut m = mem();
        let id = heap_space(&mut m, 0x5000);
        m.sbrk(id, 4096).unwrap();
        let same = m.as_share(id).unwrap();
        m.write_user(id, 0x5000, &[42], &mut NoDevices).unwrap();
        let mut b = [0];
        m.read_user(same, 0x5000, &mut b, &NoDevices).unwrap();
        assert_eq!(b[0], 42);
        assert!(!m.as_release(id));
        assert!(m.translate(same, 0x5000, Access::R).is_ok());
        assert!(m.as_release(same));
        assert_eq!(m.free_pages(), 64);
        m.audit().unwrap();
    }

    #[test]
    fn kernel_map_covers_dram_and_io() {
        let km = KernelMap::boot();
        assert_eq!(km.len(), 1025);
        assert_eq!(km.translate(KERNEL_BASE + 0x1234), Some((0x1234, BlockAttr::Normal)));
        assert_eq!(km.translate(KERNEL_BASE + PERIPH_BASE + 4).map(|x| x.1), Some(BlockAttr::Device));
        assert!(km.translate(0x1000).is_none());
    }

    #[test]
    fn boot_reservations_are_kernel_held() {
        let m = Memory::new(DEFAULT_TOTAL_PAGES, 0);
        m.audit().unwrap();
        assert_eq!(m.kernel_held(), KERNEL_IMAGE_PAGES + 16_384);
    }

    #[test]
    fn uninitialized_pages_are_seeded_garbage() {
        let read_fresh = |seed| {
            let mut m = Memory::bare(4, seed);
            let id = m.new_space();
            m.map_new(id, 1, Perms::RW, false).unwrap();
            let mut b = [0u8; 16];
            m.read_user(id, 0x1000, &mut b, &NoDevices).unwrap();
            b
        };
        assert_eq!(read_fresh(9), read_fresh(9));
        assert_ne!(read_fresh(9), [0u8; 16]);
    }

    proptest::proptest! {
        #[test]
        fn translation_is_pure(vas in proptest::collection::vec(0u64..0x20000, 1..30)) {
            let mut m = mem();
            let id = heap_space(&mut m, 0x4000);
            m.sbrk(id, 0x8000).unwrap();
            for va in vas {
                let a = m.translate(id, va, Access::R);
                let b = m.translate(id, va, Access::R);
                proptest::prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn conservation_under_random_ops(ops in proptest::collection::vec((0u8..5, 1i64..5), 1..40)) {
            let mut m = mem();
            let mut spaces = vec![heap_space(&mut m, 0x4000)];
            for (op, n) in ops {
                let id = spaces[(n as usize) % spaces.len()];
                match op {
                    0 => { let _ = m.sbrk(id, n * 4096); }
                    1 => { let _ = m.sbrk(id, -n * 4096); }
                    2 => { if let Ok(c) = m.as_fork(id) { spaces.push(c); } }
                    3 => { let _ = m.as_share(id); spaces.push(id); }
                    _ => { if spaces.len() > 1 { let id = spaces.remove(n as usize % spaces.len()); m.as_release(id); } }
                }
                proptest::prop_assert!(m.audit().is_ok());
            }
        }
    }
}
