//! Test oracles shared by the integration and acceptance suites.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap, HashSet};

use coloc_core::domain::{GpuSpec, ModelSpec};
use coloc_core::mempool::{BlockState, ChunkLimits, ChunkOwner, KvSlot, MemoryPool, TensorAlloc};
use coloc_core::{KIB, MIB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Textbook buddy allocator over one flat list of free `(offset, order)`
/// blocks, in minimum-order units. Picks the smallest sufficient order,
/// lowest offset first, keeps the lower half on every split and merges
/// eagerly on free.
pub struct RefBuddy {
    unit: u64,
    free: Vec<(u64, u32)>,
    live: HashMap<u64, (u64, u32)>,
}

impl RefBuddy {
    pub fn new(capacity: u64, unit: u64) -> Self {
        let units = capacity / unit;
        let mut free = Vec::new();
        let mut off = 0u64;
        // largest aligned power-of-two blocks from the left
        while off < units {
            let mut k = 63 - (units - off).leading_zeros();
            while off % (1 << k) != 0 {
                k -= 1;
            }
            free.push((off, k));
            off += 1 << k;
        }
        Self {
            unit,
            free,
            live: HashMap::new(),
        }
    }

    fn order_for(&self, bytes: u64) -> u32 {
        let mut k = 0;
        while (self.unit << k) < bytes {
            k += 1;
        }
        k
    }

    /// Byte offset of the new block, or `None` when nothing fits.
    pub fn alloc(&mut self, id: u64, bytes: u64) -> Option<u64> {
        let need = self.order_for(bytes);
        let (i, &(off, mut k)) = self
            .free
            .iter()
            .enumerate()
            .filter(|(_, b)| b.1 >= need)
            .min_by_key(|(_, b)| (b.1, b.0))?;
        self.free.swap_remove(i);
        while k > need {
            k -= 1;
            self.free.push((off + (1 << k), k));
        }
        self.live.insert(id, (off, need));
        Some(off * self.unit)
    }

    pub fn free(&mut self, id: u64) {
        let (mut off, mut k) = self.live.remove(&id).expect("live id");
        while let Some(i) = self.free.iter().position(|&b| b == (off ^ (1 << k), k)) {
            self.free.swap_remove(i);
            off = off.min(off ^ (1 << k));
            k += 1;
        }
        self.free.push((off, k));
    }

    pub fn free_bytes(&self) -> u64 {
        self.free.iter().map(|&(_, k)| self.unit << k).sum()
    }
}

/// What one randomized pool trace exercised.
#[derive(Debug, Default, Clone)]
pub struct TraceStats {
    pub ops: usize,
    pub tensor_allocs: usize,
    pub tensor_ooms: usize,
    pub kv_slots_allocated: usize,
    pub small_allocs: usize,
    pub small_ooms: usize,
    pub recycles: usize,
    pub peak_kv_chunks: usize,
    pub peak_tensor_chunks: usize,
}

/// Drives a [`MemoryPool`] with random KV, tensor and small-tensor traffic
/// and checks every operation against its own bookkeeping.
pub struct PoolDriver {
    pub pool: MemoryPool,
    rng: ChaCha8Rng,
    tensors: BTreeMap<u64, TensorAlloc>,
    tensor_blocks: HashSet<usize>,
    slots: Vec<KvSlot>,
    slot_set: HashSet<KvSlot>,
    small: Vec<(u64, u64)>,
    reference: RefBuddy,
    next_small: u64,
    pub stats: TraceStats,
}

pub const TRACE_CHUNKS: u64 = 24;
pub const TRACE_SMALL_POOL: u64 = 64 * MIB;

impl PoolDriver {
    pub fn new(seed: u64) -> Self {
        let model = ModelSpec::llama3_8b();
        let chunk = 2 * model.layer_count as u64 * 2 * MIB;
        let gpu = GpuSpec {
            mem_bytes: TRACE_SMALL_POOL + TRACE_CHUNKS * chunk,
            ..GpuSpec::ada6000()
        };
        let pool = MemoryPool::new(&gpu, &model, TRACE_SMALL_POOL, 0).expect("pool");
        let unit = pool.small_pool().min_order_bytes();
        Self {
            pool,
            rng: ChaCha8Rng::seed_from_u64(seed),
            tensors: BTreeMap::new(),
            tensor_blocks: HashSet::new(),
            slots: Vec::new(),
            slot_set: HashSet::new(),
            small: Vec::new(),
            reference: RefBuddy::new(TRACE_SMALL_POOL, unit),
            next_small: 0,
            stats: TraceStats::default(),
        }
    }

    pub fn run(&mut self, ops: usize) -> Result<(), String> {
        for _ in 0..ops {
            self.step()?;
            self.check()?;
            self.stats.ops += 1;
        }
        Ok(())
    }

    fn step(&mut self) -> Result<(), String> {
        let roll = self.rng.random_range(0..1000u32);
        match roll {
            0..=159 => self.kv_grow(),
            160..=309 => self.kv_shrink(),
            310..=459 => self.tensor_alloc(false),
            460..=509 => self.tensor_alloc(true),
            510..=659 => self.tensor_free(),
            660..=809 => self.small_alloc(),
            810..=959 => self.small_free(),
            960..=979 => {
                let chunks = self.rng.random_range(0..4u32) as f64;
                self.pool.set_reserve_bytes(chunks * self.pool.chunk_bytes() as f64);
                Ok(())
            }
            980..=989 => {
                let limits = if self.rng.random_bool(0.5) {
                    ChunkLimits::default()
                } else {
                    let n = self.pool.total_chunks();
                    ChunkLimits {
                        kv: Some(self.rng.random_range(1..=n)),
                        tensor: Some(self.rng.random_range(1..=n)),
                    }
                };
                self.pool.set_limits(limits);
                Ok(())
            }
            _ => self.recycle(),
        }
    }

    fn kv_grow(&mut self) -> Result<(), String> {
        let n = self.rng.random_range(1..=1500);
        for _ in 0..n {
            let Ok(slot) = self.pool.kv_alloc_slot() else {
                break;
            };
            if !self.slot_set.insert(slot) {
                return Err(format!("slot {slot:?} handed out twice"));
            }
            let chunk = self.pool.kv_slot_chunk(slot);
            if self.pool.chunk_owner(chunk) != Some(ChunkOwner::KvCache) {
                return Err(format!("slot {slot:?} in non-KV chunk {chunk}"));
            }
            self.slots.push(slot);
            self.stats.kv_slots_allocated += 1;
        }
        self.stats.peak_kv_chunks = self.stats.peak_kv_chunks.max(self.pool.kv_chunks());
        Ok(())
    }

    fn kv_shrink(&mut self) -> Result<(), String> {
        let n = self.rng.random_range(1..=1500).min(self.slots.len());
        for _ in 0..n {
            let i = self.rng.random_range(0..self.slots.len());
            let slot = self.slots.swap_remove(i);
            self.slot_set.remove(&slot);
            self.pool.kv_free_slot(slot).map_err(|e| e.to_string())?;
        }
        self.pool.kv_release_empty();
        Ok(())
    }

    fn tensor_alloc(&mut self, scattered: bool) -> Result<(), String> {
        let bpc = self.pool.blocks_per_chunk() as u64;
        let max_blocks = if scattered { 3 * bpc } else { bpc };
        let bytes = self.rng.random_range(1..=max_blocks * 2 * MIB);
        let before_unassigned = self.pool.unassigned_chunks();
        let reserve = self.pool.reserve_chunks();
        let res = if scattered {
            self.pool.tensor_alloc_scattered(bytes, 1)
        } else {
            self.pool.tensor_alloc(bytes, 1).map(|t| vec![t])
        };
        match res {
            Ok(pieces) => {
                let span: usize = pieces.iter().map(|t| t.block_span).sum();
                if span as u64 != bytes.div_ceil(2 * MIB) {
                    return Err(format!("{bytes} bytes got {span} blocks"));
                }
                if self.pool.unassigned_chunks() < before_unassigned && self.pool.unassigned_chunks() < reserve {
                    return Err("tensor arena claimed a reserved chunk".into());
                }
                for t in pieces {
                    for b in t.first_block..t.first_block + t.block_span {
                        if !self.tensor_blocks.insert(b) {
                            return Err(format!("block {b} allocated twice"));
                        }
                    }
                    self.tensors.insert(t.handle, t);
                }
                self.stats.tensor_allocs += 1;
                self.stats.peak_tensor_chunks = self.stats.peak_tensor_chunks.max(self.pool.tensor_chunks());
            }
            Err(_) => {
                if self.pool.unassigned_chunks() != before_unassigned {
                    return Err("failed tensor alloc changed chunk ownership".into());
                }
                self.stats.tensor_ooms += 1;
            }
        }
        Ok(())
    }

    fn tensor_free(&mut self) -> Result<(), String> {
        if self.tensors.is_empty() {
            return Ok(());
        }
        let i = self.rng.random_range(0..self.tensors.len());
        let handle = *self.tensors.keys().nth(i).expect("index in range");
        let t = self.tensors.remove(&handle).expect("present");
        for b in t.first_block..t.first_block + t.block_span {
            self.tensor_blocks.remove(&b);
        }
        self.pool.tensor_free(handle).map_err(|e| e.to_string())
    }

    fn small_alloc(&mut self) -> Result<(), String> {
        // log-uniform between 1 KiB and 2 MiB
        let ln = self.rng.random_range((KIB as f64).ln()..((2 * MIB) as f64).ln());
        let bytes = ln.exp() as u64;
        let id = self.next_small;
        self.next_small += 1;
        let want = self.reference.alloc(id, bytes);
        match (self.pool.small_alloc(bytes), want) {
            (Ok(a), Some(off)) if a.offset == off => {
                self.small.push((a.handle, id));
                self.stats.small_allocs += 1;
                Ok(())
            }
            (Err(_), None) => {
                self.stats.small_ooms += 1;
                Ok(())
            }
            (got, want) => Err(format!("small alloc of {bytes}: pool {got:?}, reference {want:?}")),
        }
    }

    fn small_free(&mut self) -> Result<(), String> {
        if self.small.is_empty() {
            return Ok(());
        }
        let i = self.rng.random_range(0..self.small.len());
        let (handle, id) = self.small.swap_remove(i);
        self.reference.free(id);
        self.pool.small_free(handle).map_err(|e| e.to_string())
    }

    /// Free every tensor and every slot; all chunks must come back.
    fn recycle(&mut self) -> Result<(), String> {
        for (h, _) in std::mem::take(&mut self.tensors) {
            self.pool.tensor_free(h).map_err(|e| e.to_string())?;
        }
        self.tensor_blocks.clear();
        if self.pool.tensor_chunks() != 0 {
            return Err(format!("{} tensor chunks left after freeing all", self.pool.tensor_chunks()));
        }
        for s in std::mem::take(&mut self.slots) {
            self.pool.kv_free_slot(s).map_err(|e| e.to_string())?;
        }
        self.slot_set.clear();
        self.pool.kv_release_empty();
        if self.pool.unassigned_chunks() != self.pool.total_chunks() {
            return Err("chunks not all unassigned after recycling".into());
        }
        self.stats.recycles += 1;
        Ok(())
    }

    fn check(&self) -> Result<(), String> {
        self.pool.check_invariants().map_err(|e| e.to_string())?;
        let acc = self.pool.block_accounting();
        if acc.free + acc.kv + acc.tensor + acc.reserved != acc.total {
            return Err(format!("conservation: {acc:?}"));
        }
        if acc.tensor != self.tensor_blocks.len() {
            return Err(format!("{} tensor blocks, driver holds {}", acc.tensor, self.tensor_blocks.len()));
        }
        if acc.kv != self.pool.kv_chunks() * self.pool.blocks_per_chunk() {
            return Err("KV blocks are not whole chunks".into());
        }
        if self.pool.kv_live_slots() != self.slots.len() {
            return Err("live slot count drifted".into());
        }
        let counted = self.pool.kv_chunks() + self.pool.tensor_chunks() + self.pool.unassigned_chunks();
        if counted != self.pool.total_chunks() {
            return Err("chunk owners do not partition the pool".into());
        }
        let small = self.pool.small_pool();
        if small.free_bytes() != self.reference.free_bytes() {
            return Err("small pool free bytes differ from reference".into());
        }
        Ok(())
    }

    /// Spot-check block states against the driver's view.
    pub fn check_block_states(&self) -> Result<(), String> {
        for &b in &self.tensor_blocks {
            if self.pool.block_state(b) != Some(BlockState::Tensor) {
                return Err(format!("block {b} should be a tensor block"));
            }
        }
        Ok(())
    }
}
