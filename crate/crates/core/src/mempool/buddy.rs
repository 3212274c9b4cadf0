//! Buddy allocator for the small-tensor pool.
//!
//! Offsets and sizes are tracked in units of the minimum order (2 KiB by
//! default). Splits always hand out the lowest-address block of the smallest
//! sufficient order, and frees merge eagerly, so after every operation no two
//! free buddies of the same order coexist.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use crate::{Error, Result, KIB};

pub const DEFAULT_MIN_ORDER_BYTES: u64 = 2 * KIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SmallAlloc {
    pub handle: u64,
    /// Byte offset inside the pool.
    pub offset: u64,
    pub granted_bytes: u64,
    pub requested_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct SmallPool {
    capacity_bytes: u64,
    min_order_bytes: u64,
    /// `free[k]` holds unit offsets of free blocks of `2^k` units.
    free: Vec<BTreeSet<u64>>,
    live: BTreeMap<u64, (u64, u32, u64)>,
    next_handle: u64,
    granted_live: u64,
    requested_live: u64,
    peak_internal_frag: u64,
}

impl SmallPool {
    pub fn new(capacity_bytes: u64, min_order_bytes: u64) -> Result<Self> {
        if min_order_bytes == 0 || !min_order_bytes.is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "min order {min_order_bytes} must be a power of two"
            )));
        }
        if capacity_bytes % min_order_bytes != 0 {
            return Err(Error::InvalidInput(format!(
                "small pool capacity {capacity_bytes} is not a multiple of {min_order_bytes}"
            )));
        }
        let units = capacity_bytes / min_order_bytes;
        let orders = if units == 0 {
            1
        } else {
            (64 - units.leading_zeros()) as usize
        };
        let mut free = alloc::vec![BTreeSet::new(); orders];
        let mut offset = 0u64;
        while offset < units {
            let mut order = (units - offset).ilog2();
            if offset != 0 {
                order = order.min(offset.trailing_zeros());
            }
            free[order as usize].insert(offset);
            offset += 1 << order;
        }
        Ok(Self {
            capacity_bytes,
            min_order_bytes,
            free,
            live: BTreeMap::new(),
            next_handle: 1,
            granted_live: 0,
            requested_live: 0,
            peak_internal_frag: 0,
        })
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn min_order_bytes(&self) -> u64 {
        self.min_order_bytes
    }

    /// Size actually handed out for a request.
    pub fn granted_size(&self, bytes: u64) -> u64 {
        bytes.max(self.min_order_bytes).next_power_of_two()
    }

    pub fn alloc(&mut self, bytes: u64) -> Result<SmallAlloc> {
        if bytes == 0 || bytes > self.capacity_bytes {
            return Err(Error::InvalidArgument(format!(
                "small alloc of {bytes} bytes outside 1..={}",
                self.capacity_bytes
            )));
        }
        let granted = self.granted_size(bytes);
        let order = (granted / self.min_order_bytes).ilog2() as usize;
        let Some(found) = (order..self.free.len()).find(|&k| !self.free[k].is_empty()) else {
            return Err(Error::OutOfMemory(format!(
                "small pool has no free block of {granted} bytes"
            )));
        };
        let offset = self.free[found].pop_first().expect("non-empty free list");
        let mut k = found;
        while k > order {
            k -= 1;
            self.free[k].insert(offset + (1 << k));
        }
        let handle = self.next_handle;
        self.next_handle += 1;
        self.live.insert(handle, (offset, order as u32, bytes));
        self.granted_live += granted;
        self.requested_live += bytes;
        self.peak_internal_frag = self.peak_internal_frag.max(self.internal_fragmentation());
        Ok(SmallAlloc {
            handle,
            offset: offset * self.min_order_bytes,
            granted_bytes: granted,
            requested_bytes: bytes,
        })
    }

    pub fn free(&mut self, handle: u64) -> Result<()> {
        let (mut offset, order, requested) =
            self.live.remove(&handle).ok_or(Error::InvalidHandle(handle))?;
        let mut k = order as usize;
        self.granted_live -= (1u64 << k) * self.min_order_bytes;
        self.requested_live -= requested;
        while k + 1 < self.free.len() {
            let buddy = offset ^ (1 << k);
            if !self.free[k].remove(&buddy) {
                break;
            }
            offset = offset.min(buddy);
            k += 1;
        }
        self.free[k].insert(offset);
        Ok(())
    }

    pub fn live_count(&self) -> usize {
        self.live.len()
    }

    pub fn used_bytes(&self) -> u64 {
        self.granted_live
    }

    pub fn free_bytes(&self) -> u64 {
        self.capacity_bytes - self.granted_live
    }

    /// Granted minus requested bytes over live allocations.
    pub fn internal_fragmentation(&self) -> u64 {
        self.granted_live - self.requested_live
    }

    pub fn peak_internal_fragmentation(&self) -> u64 {
        self.peak_internal_frag
    }

    /// Free blocks as `(byte offset, byte size)` in address order.
    pub fn free_blocks(&self) -> Vec<(u64, u64)> {
        let mut out: Vec<_> = self
            .free
            .iter()
            .enumerate()
            .flat_map(|(k, set)| {
                set.iter()
                    .map(move |&o| (o, 1u64 << k))
            })
            .map(|(o, u)| (o * self.min_order_bytes, u * self.min_order_bytes))
            .collect();
        out.sort_unstable();
        out
    }

    /// Live allocations as `(byte offset, granted bytes)` in address order.
    pub fn live_blocks(&self) -> Vec<(u64, u64)> {
        let mut out: Vec<_> = self
            .live
            .values()
            .map(|&(o, k, _)| (o * self.min_order_bytes, (1u64 << k) * self.min_order_bytes))
            .collect();
        out.sort_unstable();
        out
    }

    /// Verify conservation, non-overlap and the merged-buddy invariant.
    pub fn check_invariants(&self) -> Result<()> {
        let mut blocks = self.free_blocks();
        blocks.extend(self.live_blocks());
        blocks.sort_unstable();
        let mut cursor = 0;
        for &(off, len) in &blocks {
            if off != cursor {
                return Err(Error::InvalidInput(format!(
                    "small pool gap or overlap at {off} (expected {cursor})"
                )));
            }
            cursor = off + len;
        }
        if cursor != self.capacity_bytes {
            return Err(Error::InvalidInput(format!(
                "small pool covers {cursor} of {} bytes",
                self.capacity_bytes
            )));
        }
        for (k, set) in self.free.iter().enumerate() {
            for &o in set {
                if set.contains(&(o ^ (1 << k))) && k + 1 < self.free.len() {
                    return Err(Error::InvalidInput(format!(
                        "unmerged free buddies at order {k}, offset {o}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::MIB;

    #[test]
    fn rounds_to_power_of_two_with_2k_floor() {
        let mut pool = SmallPool::new(64 * MIB, DEFAULT_MIN_ORDER_BYTES).unwrap();
        assert_eq!(pool.alloc(3 * KIB).unwrap().granted_bytes, 4 * KIB);
        assert_eq!(pool.alloc(2 * KIB).unwrap().granted_bytes, 2 * KIB);
        assert_eq!(pool.alloc(1).unwrap().granted_bytes, 2 * KIB);
        pool.check_invariants().unwrap();
    }

    #[test]
    fn frees_merge_back_to_one_block() {
        let mut pool = SmallPool::new(MIB, DEFAULT_MIN_ORDER_BYTES).unwrap();
        let hs: Vec<_> = (0..10).map(|i| pool.alloc((i + 1) * KIB).unwrap().handle).collect();
        for h in hs.into_iter().rev() {
            pool.free(h).unwrap();
            pool.check_invariants().unwrap();
        }
        assert_eq!(pool.free_blocks(), alloc::vec![(0, MIB)]);
    }

    #[test]
    fn exhaustion_and_double_free() {
        let mut pool = SmallPool::new(8 * KIB, DEFAULT_MIN_ORDER_BYTES).unwrap();
        let a = pool.alloc(8 * KIB).unwrap();
        assert!(matches!(pool.alloc(1), Err(Error::OutOfMemory(_))));
        pool.free(a.handle).unwrap();
        assert_eq!(pool.free(a.handle), Err(Error::InvalidHandle(a.handle)));
        assert!(pool.alloc(0).is_err());
        assert!(pool.alloc(9 * KIB).is_err());
    }

    #[test]
    fn non_power_of_two_capacity_is_fully_usable() {
        let mut pool = SmallPool::new(6 * KIB, DEFAULT_MIN_ORDER_BYTES).unwrap();
        assert_eq!(pool.free_blocks(), alloc::vec![(0, 4 * KIB), (4 * KIB, 2 * KIB)]);
        let a = pool.alloc(4 * KIB).unwrap();
        let b = pool.alloc(2 * KIB).unwrap();
        assert_eq!(pool.free_bytes(), 0);
        pool.free(a.handle).unwrap();
        pool.free(b.handle).unwrap();
        pool.check_invariants().unwrap();
        assert_eq!(pool.free_bytes(), 6 * KIB);
    }

    #[test]
    fn fragmentation_tracks_padding() {
        let mut pool = SmallPool::new(MIB, DEFAULT_MIN_ORDER_BYTES).unwrap();
        let a = pool.alloc(5 * KIB).unwrap();
        assert_eq!(pool.internal_fragmentation(), 3 * KIB);
        pool.free(a.handle).unwrap();
        assert_eq!(pool.internal_fragmentation(), 0);
        assert_eq!(pool.peak_internal_fragmentation(), 3 * KIB);
    }
}
