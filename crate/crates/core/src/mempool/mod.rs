//! Unified two-level memory pool shared by the KV cache and finetune
//! tensors.
//!
//! Device memory left after static reservations is cut into 2 MiB blocks
//! grouped into chunks of `2 * layer_count` blocks. A chunk is owned either
//! by the KV cache (one chunk serves thousands of token slots across all
//! layers) or by the tensor arena (each tensor occupies a contiguous run of
//! whole blocks). A chunk whose last tensor is freed returns to the pool.
//! Sub-2 MiB tensors go to a separate buddy-managed small pool.
//!
//! The pool never lends its last `reserve_chunks` unassigned chunks to the
//! tensor arena, so KV growth during a swap-out is always served at once.

pub mod buddy;
pub mod swap;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::domain::{GpuSpec, ModelSpec, QosTarget};
use crate::math;
use crate::{Error, Result, MIB};

pub use buddy::{SmallAlloc, SmallPool, DEFAULT_MIN_ORDER_BYTES};
pub use swap::{walk_step, Pass, SwapWindow, TransferCmd, TransferDirection};

pub const BLOCK_BYTES: u64 = 2 * MIB;

/// Tag for tensors that must stay resident (trainable weights, activations).
pub const PERSISTENT_TAG: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockState {
    Free,
    Kv,
    Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkOwner {
    Unassigned,
    KvCache,
    TensorArena,
}

#[derive(Debug, Clone)]
struct Chunk {
    owner: ChunkOwner,
    blocks_in_use: usize,
    /// Tensor block occupancy, one bit per block.
    bitmap: Vec<u64>,
    /// KV: free slot indices, popped from the back (lowest first).
    free_slots: Vec<u32>,
    live_slots: Vec<u64>,
    live_slot_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorAlloc {
    pub handle: u64,
    pub chunk_id: usize,
    /// Global block id of the first block.
    pub first_block: usize,
    pub block_span: usize,
    pub requested_bytes: u64,
    pub tag: u32,
}

/// A token slot in the KV cache. Slot `s` lives in chunk
/// `s / slots_per_chunk`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KvSlot(pub u64);

/// Per-owner block counts; always sums to `total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockAccounting {
    pub free: usize,
    pub kv: usize,
    pub tensor: usize,
    pub reserved: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReclaimPlan {
    /// Chunks available right away (unassigned, reserve included).
    pub immediate: usize,
    /// Tensor-arena chunks to vacate, with the time each becomes free.
    pub deferred: Vec<(usize, f64)>,
}

impl ReclaimPlan {
    pub fn ready_at(&self, now_ms: f64) -> f64 {
        self.deferred.iter().map(|&(_, t)| t).fold(now_ms, f64::max)
    }
}

/// Optional caps used by the static-split baseline.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChunkLimits {
    pub kv: Option<usize>,
    pub tensor: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct MemoryPool {
    layer_count: u32,
    blocks_per_chunk: usize,
    chunk_bytes: u64,
    kv_bytes_per_token: u64,
    kv_bytes_per_token_layer: u64,
    slots_per_chunk: u32,
    chunks: Vec<Chunk>,
    unassigned: BTreeSet<usize>,
    kv_with_free: BTreeSet<usize>,
    kv_chunks: usize,
    tensor_chunks: usize,
    reserve_chunks: usize,
    limits: ChunkLimits,
    tensors: BTreeMap<u64, TensorAlloc>,
    next_handle: u64,
    small: SmallPool,
    window: Option<SwapWindow>,
    frozen_bytes_per_layer: u64,
}

/// Bytes of one chunk for a model: `2 * layer_count` blocks of 2 MiB.
pub fn chunk_bytes(model: &ModelSpec) -> u64 {
    2 * model.layer_count as u64 * BLOCK_BYTES
}

impl MemoryPool {
    /// Pre-allocate everything left after `small_pool_bytes` and
    /// `outside_bytes` (weights and other static reservations).
    pub fn new(gpu: &GpuSpec, model: &ModelSpec, small_pool_bytes: u64, outside_bytes: u64) -> Result<Self> {
        model.validate()?;
        if model.kv_bytes_per_token_layer > BLOCK_BYTES {
            return Err(Error::InvalidInput("KV entry larger than a block".into()));
        }
        if small_pool_bytes >= gpu.mem_bytes {
            return Err(Error::InvalidInput(format!(
                "small pool {small_pool_bytes} does not fit in {} bytes",
                gpu.mem_bytes
            )));
        }
        let chunk = chunk_bytes(model);
        let usable = gpu.mem_bytes.saturating_sub(small_pool_bytes + outside_bytes);
        let n = (usable / chunk) as usize;
        if n == 0 {
            return Err(Error::InvalidInput(format!(
                "{usable} usable bytes cannot hold one {chunk}-byte chunk"
            )));
        }
        let blocks_per_chunk = 2 * model.layer_count as usize;
        let slots_per_chunk = (chunk / model.kv_bytes_per_token()) as u32;
        let words = blocks_per_chunk.div_ceil(64);
        let chunks = (0..n)
            .map(|_| Chunk {
                owner: ChunkOwner::Unassigned,
                blocks_in_use: 0,
                bitmap: alloc::vec![0; words],
                free_slots: Vec::new(),
                live_slots: Vec::new(),
                live_slot_count: 0,
            })
            .collect();
        Ok(Self {
            layer_count: model.layer_count,
            blocks_per_chunk,
            chunk_bytes: chunk,
            kv_bytes_per_token: model.kv_bytes_per_token(),
            kv_bytes_per_token_layer: model.kv_bytes_per_token_layer,
            slots_per_chunk,
            chunks,
            unassigned: (0..n).collect(),
            kv_with_free: BTreeSet::new(),
            kv_chunks: 0,
            tensor_chunks: 0,
            reserve_chunks: 0,
            limits: ChunkLimits::default(),
            tensors: BTreeMap::new(),
            next_handle: 1,
            small: SmallPool::new(small_pool_bytes - small_pool_bytes % DEFAULT_MIN_ORDER_BYTES, DEFAULT_MIN_ORDER_BYTES)?,
            window: None,
            frozen_bytes_per_layer: model.frozen_bytes_per_layer,
        })
    }

    pub fn chunk_bytes(&self) -> u64 {
        self.chunk_bytes
    }

    pub fn blocks_per_chunk(&self) -> usize {
        self.blocks_per_chunk
    }

    pub fn total_chunks(&self) -> usize {
        self.chunks.len()
    }

    pub fn unassigned_chunks(&self) -> usize {
        self.unassigned.len()
    }

    pub fn kv_chunks(&self) -> usize {
        self.kv_chunks
    }

    pub fn tensor_chunks(&self) -> usize {
        self.tensor_chunks
    }

    pub fn reserve_chunks(&self) -> usize {
        self.reserve_chunks
    }

    pub fn slots_per_chunk(&self) -> u32 {
        self.slots_per_chunk
    }

    pub fn chunk_owner(&self, chunk: usize) -> Option<ChunkOwner> {
        self.chunks.get(chunk).map(|c| c.owner)
    }

    pub fn chunk_blocks_in_use(&self, chunk: usize) -> Option<usize> {
        self.chunks.get(chunk).map(|c| c.blocks_in_use)
    }

    pub fn set_limits(&mut self, limits: ChunkLimits) {
        self.limits = limits;
    }

    pub fn limits(&self) -> ChunkLimits {
        self.limits
    }

    /// Hold back `ceil(reserved_bytes / chunk_bytes)` chunks from the tensor
    /// arena.
    pub fn set_reserve_bytes(&mut self, reserved_bytes: f64) {
        self.reserve_chunks = math::ceil(reserved_bytes / self.chunk_bytes as f64) as usize;
    }

    pub fn block_state(&self, block: usize) -> Option<BlockState> {
        let chunk = self.chunks.get(block / self.blocks_per_chunk)?;
        let idx = block % self.blocks_per_chunk;
        Some(match chunk.owner {
            ChunkOwner::Unassigned => BlockState::Free,
            ChunkOwner::KvCache => BlockState::Kv,
            ChunkOwner::TensorArena if bit(&chunk.bitmap, idx) => BlockState::Tensor,
            ChunkOwner::TensorArena => BlockState::Free,
        })
    }

    // ---- KV client -------------------------------------------------------

    fn kv_may_claim(&self) -> bool {
        !self.unassigned.is_empty() && self.limits.kv.is_none_or(|cap| self.kv_chunks < cap)
    }

    /// Claim the lowest-id unassigned chunk for the KV cache.
    pub fn kv_acquire_chunk(&mut self) -> Result<usize> {
        if !self.kv_may_claim() {
            return Err(Error::CapacityExhausted {
                needed: 1,
                obtainable: self.reclaimable_tensor_chunks().len(),
            });
        }
        let id = self.unassigned.pop_first().expect("checked non-empty");
        let spc = self.slots_per_chunk;
        let bpc = self.blocks_per_chunk;
        let c = &mut self.chunks[id];
        c.owner = ChunkOwner::KvCache;
        c.blocks_in_use = bpc;
        c.free_slots = (0..spc).rev().collect();
        c.live_slots = alloc::vec![0; (spc as usize).div_ceil(64)];
        c.live_slot_count = 0;
        self.kv_chunks += 1;
        self.kv_with_free.insert(id);
        Ok(id)
    }

    pub fn kv_release_chunk(&mut self, chunk: usize) -> Result<()> {
        let c = self
            .chunks
            .get_mut(chunk)
            .ok_or_else(|| Error::InvalidArgument(format!("no chunk {chunk}")))?;
        if c.owner != ChunkOwner::KvCache {
            return Err(Error::InvalidArgument(format!("chunk {chunk} is not a KV chunk")));
        }
        if c.live_slot_count > 0 {
            return Err(Error::InvalidRelease {
                chunk,
                live: c.live_slot_count,
            });
        }
        c.owner = ChunkOwner::Unassigned;
        c.blocks_in_use = 0;
        c.free_slots = Vec::new();
        c.live_slots = Vec::new();
        self.kv_chunks -= 1;
        self.kv_with_free.remove(&chunk);
        self.unassigned.insert(chunk);
        Ok(())
    }

    /// Release every KV chunk with no live slots; returns how many.
    pub fn kv_release_empty(&mut self) -> usize {
        let empty: Vec<usize> = self
            .kv_with_free
            .iter()
            .copied()
            .filter(|&id| self.chunks[id].live_slot_count == 0)
            .collect();
        for &id in &empty {
            self.kv_release_chunk(id).expect("empty KV chunk releases");
        }
        empty.len()
    }

    pub fn kv_free_slots(&self) -> usize {
        self.kv_with_free
            .iter()
            .map(|&id| self.chunks[id].free_slots.len())
            .sum()
    }

    pub fn kv_live_slots(&self) -> usize {
        self.kv_chunks * self.slots_per_chunk as usize - self.kv_free_slots()
    }

    pub fn kv_slot_capacity(&self) -> usize {
        self.kv_chunks * self.slots_per_chunk as usize
    }

    /// Take a slot from the lowest-id KV chunk with room, claiming a new
    /// chunk if needed.
    pub fn kv_alloc_slot(&mut self) -> Result<KvSlot> {
        let id = match self.kv_with_free.first() {
            Some(&id) => id,
            None => self.kv_acquire_chunk()?,
        };
        let spc = self.slots_per_chunk as u64;
        let c = &mut self.chunks[id];
        let idx = c.free_slots.pop().expect("chunk listed with free slots");
        set_bit(&mut c.live_slots, idx as usize, true);
        c.live_slot_count += 1;
        if c.free_slots.is_empty() {
            self.kv_with_free.remove(&id);
        }
        Ok(KvSlot(id as u64 * spc + idx as u64))
    }

    pub fn kv_free_slot(&mut self, slot: KvSlot) -> Result<()> {
        let spc = self.slots_per_chunk as u64;
        let id = (slot.0 / spc) as usize;
        let idx = (slot.0 % spc) as usize;
        let c = self
            .chunks
            .get_mut(id)
            .filter(|c| c.owner == ChunkOwner::KvCache)
            .ok_or(Error::InvalidHandle(slot.0))?;
        if !bit(&c.live_slots, idx) {
            return Err(Error::InvalidHandle(slot.0));
        }
        set_bit(&mut c.live_slots, idx, false);
        c.live_slot_count -= 1;
        c.free_slots.push(idx as u32);
        self.kv_with_free.insert(id);
        Ok(())
    }

    pub fn kv_slot_chunk(&self, slot: KvSlot) -> usize {
        (slot.0 / self.slots_per_chunk as u64) as usize
    }

    /// Block id and byte offset of `slot`'s entry for `layer`. Each layer
    /// owns two consecutive blocks of the chunk; the slot index selects the
    /// block and the offset inside it.
    pub fn kv_slot_location(&self, slot: KvSlot, layer: u32) -> Result<(usize, u64)> {
        if layer >= self.layer_count {
            return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
        }
        let chunk = self.kv_slot_chunk(slot);
        let idx = slot.0 % self.slots_per_chunk as u64;
        let per_block = BLOCK_BYTES / self.kv_bytes_per_token_layer;
        let block = chunk * self.blocks_per_chunk + 2 * layer as usize + (idx / per_block) as usize;
        Ok((block, (idx % per_block) * self.kv_bytes_per_token_layer))
    }

    /// Token slots a freshly claimed chunk adds.
    pub fn slots_per_new_chunk(&self) -> u64 {
        self.chunk_bytes / self.kv_bytes_per_token
    }

    // ---- tensor client ---------------------------------------------------

    fn tensor_may_claim(&self) -> bool {
        self.unassigned.len() > self.reserve_chunks
            && self.limits.tensor.is_none_or(|cap| self.tensor_chunks < cap)
    }

    /// Allocate `ceil(bytes / 2 MiB)` contiguous blocks, first-fit in the
    /// lowest-id tensor chunk with room, else in a freshly claimed chunk.
    pub fn tensor_alloc(&mut self, bytes: u64, tag: u32) -> Result<TensorAlloc> {
        if bytes == 0 {
            return Err(Error::InvalidArgument("zero-byte tensor".into()));
        }
        let span = bytes.div_ceil(BLOCK_BYTES) as usize;
        if span > self.blocks_per_chunk {
            return Err(Error::OutOfMemory(format!(
                "tensor of {span} blocks exceeds a {}-block chunk",
                self.blocks_per_chunk
            )));
        }
        let mut target = None;
        for (id, c) in self.chunks.iter().enumerate() {
            if c.owner == ChunkOwner::TensorArena && self.blocks_per_chunk - c.blocks_in_use >= span {
                if let Some(start) = first_fit(&c.bitmap, self.blocks_per_chunk, span) {
                    target = Some((id, start));
                    break;
                }
            }
        }
        let (id, start) = match target {
            Some(t) => t,
            None => {
                if !self.tensor_may_claim() {
                    return Err(Error::OutOfMemory(format!(
                        "no room for a {span}-block tensor"
                    )));
                }
                let id = self.unassigned.pop_first().expect("checked non-empty");
                self.chunks[id].owner = ChunkOwner::TensorArena;
                self.tensor_chunks += 1;
                (id, 0)
            }
        };
        Ok(self.place(id, start, span, bytes, tag))
    }

    /// Allocate `bytes` as several block runs, filling holes in existing
    /// tensor chunks before claiming new ones. All or nothing: on OOM no
    /// block is taken. Models one virtual range mapped over scattered
    /// physical blocks.
    pub fn tensor_alloc_scattered(&mut self, bytes: u64, tag: u32) -> Result<Vec<TensorAlloc>> {
        if bytes == 0 {
            return Err(Error::InvalidArgument("zero-byte tensor".into()));
        }
        let mut left = bytes.div_ceil(BLOCK_BYTES) as usize;
        if left > self.tensor_free_blocks() {
            return Err(Error::OutOfMemory(format!("no room for {left} scattered blocks")));
        }
        let mut runs = Vec::new();
        for (id, c) in self.chunks.iter().enumerate() {
            if left == 0 {
                break;
            }
            if c.owner != ChunkOwner::TensorArena || c.blocks_in_use == self.blocks_per_chunk {
                continue;
            }
            let mut i = 0;
            while i < self.blocks_per_chunk && left > 0 {
                if bit(&c.bitmap, i) {
                    i += 1;
                    continue;
                }
                let start = i;
                while i < self.blocks_per_chunk && !bit(&c.bitmap, i) && i - start < left {
                    i += 1;
                }
                runs.push((id, start, i - start));
                left -= i - start;
            }
        }
        let mut out = Vec::with_capacity(runs.len() + left.div_ceil(self.blocks_per_chunk));
        let mut bytes_left = bytes;
        let mut take = |pool: &mut Self, id: usize, start: usize, span: usize| {
            let b = bytes_left.min(span as u64 * BLOCK_BYTES);
            bytes_left -= b;
            out.push(pool.place(id, start, span, b, tag));
        };
        for (id, start, span) in runs {
            take(self, id, start, span);
        }
        while left > 0 {
            let id = self.unassigned.pop_first().expect("free blocks checked");
            self.chunks[id].owner = ChunkOwner::TensorArena;
            self.tensor_chunks += 1;
            let span = left.min(self.blocks_per_chunk);
            take(self, id, 0, span);
            left -= span;
        }
        Ok(out)
    }

    fn place(&mut self, id: usize, start: usize, span: usize, bytes: u64, tag: u32) -> TensorAlloc {
        let c = &mut self.chunks[id];
        for b in start..start + span {
            set_bit(&mut c.bitmap, b, true);
        }
        c.blocks_in_use += span;
        let handle = self.next_handle;
        self.next_handle += 1;
        let a = TensorAlloc {
            handle,
            chunk_id: id,
            first_block: id * self.blocks_per_chunk + start,
            block_span: span,
            requested_bytes: bytes,
            tag,
        };
        self.tensors.insert(handle, a);
        a
    }

    pub fn tensor_free(&mut self, handle: u64) -> Result<()> {
        let a = self.tensors.remove(&handle).ok_or(Error::InvalidHandle(handle))?;
        let start = a.first_block - a.chunk_id * self.blocks_per_chunk;
        let c = &mut self.chunks[a.chunk_id];
        for b in start..start + a.block_span {
            set_bit(&mut c.bitmap, b, false);
        }
        c.blocks_in_use -= a.block_span;
        if c.blocks_in_use == 0 {
            c.owner = ChunkOwner::Unassigned;
            self.tensor_chunks -= 1;
            self.unassigned.insert(a.chunk_id);
        }
        Ok(())
    }

    pub fn tensor(&self, handle: u64) -> Option<&TensorAlloc> {
        self.tensors.get(&handle)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &TensorAlloc> {
        self.tensors.values()
    }

    /// Blocks a new 2 MiB tensor could land in right now.
    pub fn tensor_free_blocks(&self) -> usize {
        let in_arena: usize = self
            .chunks
            .iter()
            .filter(|c| c.owner == ChunkOwner::TensorArena)
            .map(|c| self.blocks_per_chunk - c.blocks_in_use)
            .sum();
        let mut claimable = self.unassigned.len().saturating_sub(self.reserve_chunks);
        if let Some(cap) = self.limits.tensor {
            claimable = claimable.min(cap.saturating_sub(self.tensor_chunks));
        }
        in_arena + claimable * self.blocks_per_chunk
    }

    // ---- small tensors ---------------------------------------------------

    pub fn small_alloc(&mut self, bytes: u64) -> Result<SmallAlloc> {
        self.small.alloc(bytes)
    }

    pub fn small_free(&mut self, handle: u64) -> Result<()> {
        self.small.free(handle)
    }

    pub fn small_pool(&self) -> &SmallPool {
        &self.small
    }

    // ---- coordination ----------------------------------------------------

    /// Tensor chunks holding only swappable (non-persistent) tensors,
    /// ordered by the highest layer tag they hold, descending.
    fn reclaimable_tensor_chunks(&self) -> Vec<usize> {
        let mut tags: BTreeMap<usize, (u32, bool)> = BTreeMap::new();
        for t in self.tensors.values() {
            let e = tags.entry(t.chunk_id).or_insert((0, false));
            if t.tag == PERSISTENT_TAG {
                e.1 = true;
            } else {
                e.0 = e.0.max(t.tag);
            }
        }
        let mut out: Vec<(u32, usize)> = tags
            .into_iter()
            .filter(|(_, (_, pinned))| !pinned)
            .map(|(id, (tag, _))| (tag, id))
            .collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out.into_iter().map(|(_, id)| id).collect()
    }

    /// Plan how `chunks_needed` KV chunks are obtained: unassigned chunks
    /// (reserve included) immediately, the rest by vacating tensor chunks,
    /// each ready one swap-out latency from now.
    pub fn coordinate_reclaim(&self, chunks_needed: usize, now_ms: f64, swap_out_ms: f64) -> Result<ReclaimPlan> {
        let kv_room = self
            .limits
            .kv
            .map_or(usize::MAX, |cap| cap.saturating_sub(self.kv_chunks));
        let reclaimable = self.reclaimable_tensor_chunks();
        let immediate = chunks_needed.min(self.unassigned.len());
        let rest = chunks_needed - immediate;
        if chunks_needed > self.total_chunks() || chunks_needed > kv_room || rest > reclaimable.len() {
            return Err(Error::CapacityExhausted {
                needed: chunks_needed,
                obtainable: (self.unassigned.len() + reclaimable.len()).min(kv_room),
            });
        }
        let deferred = reclaimable
            .into_iter()
            .take(rest)
            .map(|id| (id, now_ms + swap_out_ms))
            .collect();
        Ok(ReclaimPlan { immediate, deferred })
    }

    // ---- swap window -------------------------------------------------------

    pub fn configure_window(&mut self, window: SwapWindow) {
        self.window = Some(window);
    }

    pub fn window(&self) -> Option<&SwapWindow> {
        self.window.as_ref()
    }

    pub fn window_mut(&mut self) -> Option<&mut SwapWindow> {
        self.window.as_mut()
    }

    /// Window size that `available_chunks` of tensor memory supports:
    /// `max(1, floor(bytes / frozen_bytes_per_layer))`, capped at the layer
    /// count.
    pub fn window_for(&self, available_chunks: usize) -> u32 {
        window_layers_for(
            available_chunks as u64 * self.chunk_bytes,
            self.frozen_bytes_per_layer,
            self.layer_count,
        )
    }

    /// Resize the configured window for `available_chunks`; returns the new
    /// size and the transfers it queued.
    pub fn window_resize(&mut self, available_chunks: usize) -> Result<(u32, Vec<TransferCmd>)> {
        let w = self.window_for(available_chunks);
        let win = self
            .window
            .as_mut()
            .ok_or_else(|| Error::InvalidInput("no finetune window configured".into()))?;
        let cmds = if w != win.window_layers() {
            win.resize(w)
        } else {
            Vec::new()
        };
        Ok((w, cmds))
    }

    pub fn on_layer_complete(&mut self, layer: u32) -> Result<Vec<TransferCmd>> {
        let win = self
            .window
            .as_mut()
            .ok_or_else(|| Error::InvalidInput("no finetune window configured".into()))?;
        if !win.is_resident(layer) {
            return Err(Error::InvalidArgument(format!("layer {layer} is not resident")));
        }
        Ok(win.on_layer_complete(layer))
    }

    // ---- accounting ----------------------------------------------------------

    pub fn block_accounting(&self) -> BlockAccounting {
        let bpc = self.blocks_per_chunk;
        let mut acc = BlockAccounting {
            free: 0,
            kv: self.kv_chunks * bpc,
            tensor: 0,
            reserved: self.reserve_chunks.min(self.unassigned.len()) * bpc,
            total: self.chunks.len() * bpc,
        };
        for c in &self.chunks {
            if c.owner == ChunkOwner::TensorArena {
                acc.tensor += c.blocks_in_use;
                acc.free += bpc - c.blocks_in_use;
            }
        }
        acc.free += self.unassigned.len().saturating_sub(self.reserve_chunks) * bpc;
        acc
    }

    /// Full consistency check, used by tests and the simulator's debug mode.
    pub fn check_invariants(&self) -> Result<()> {
        let acc = self.block_accounting();
        if acc.free + acc.kv + acc.tensor + acc.reserved != acc.total {
            return Err(Error::InvalidInput(format!("block conservation broken: {acc:?}")));
        }
        let mut per_chunk: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for t in self.tensors.values() {
            per_chunk
                .entry(t.chunk_id)
                .or_default()
                .push((t.first_block, t.first_block + t.block_span));
        }
        for (id, c) in self.chunks.iter().enumerate() {
            let ranges = per_chunk.remove(&id).unwrap_or_default();
            let used: usize = ranges.iter().map(|(a, b)| b - a).sum();
            match c.owner {
                ChunkOwner::Unassigned => {
                    if c.blocks_in_use != 0 || !ranges.is_empty() || !self.unassigned.contains(&id) {
                        return Err(Error::InvalidInput(format!("unassigned chunk {id} in use")));
                    }
                }
                ChunkOwner::KvCache => {
                    if !ranges.is_empty() || c.blocks_in_use != self.blocks_per_chunk {
                        return Err(Error::InvalidInput(format!("KV chunk {id} holds tensors")));
                    }
                }
                ChunkOwner::TensorArena => {
                    if used != c.blocks_in_use || used == 0 {
                        return Err(Error::InvalidInput(format!("tensor chunk {id} count mismatch")));
                    }
                    let mut sorted = ranges.clone();
                    sorted.sort_unstable();
                    for w in sorted.windows(2) {
                        if w[0].1 > w[1].0 {
                            return Err(Error::InvalidInput(format!("overlap in chunk {id}")));
                        }
                    }
                }
            }
        }
        if self.tensor_chunks > self.chunks.len() - self.kv_chunks - self.unassigned.len() {
            return Err(Error::InvalidInput("tensor chunk count drifted".into()));
        }
        self.small.check_invariants()
    }

    /// Line-oriented dump of chunk map, reserve, small pool and window.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "pool chunks={} chunk_bytes={} blocks_per_chunk={} reserve={}",
            self.chunks.len(),
            self.chunk_bytes,
            self.blocks_per_chunk,
            self.reserve_chunks
        );
        let describe = |c: &Chunk| -> String {
            match c.owner {
                ChunkOwner::Unassigned => "free".into(),
                ChunkOwner::KvCache => format!("kv live={}", c.live_slot_count),
                ChunkOwner::TensorArena => format!("tensor blocks={}/{}", c.blocks_in_use, self.blocks_per_chunk),
            }
        };
        let mut i = 0;
        while i < self.chunks.len() {
            let d = describe(&self.chunks[i]);
            let mut j = i;
            while j + 1 < self.chunks.len() && describe(&self.chunks[j + 1]) == d {
                j += 1;
            }
            if i == j {
                let _ = writeln!(s, "chunk {i} {d}");
            } else {
                let _ = writeln!(s, "chunk {i}-{j} {d}");
            }
            i = j + 1;
        }
        let _ = writeln!(
            s,
            "small capacity={} used={} live={}",
            self.small.capacity_bytes(),
            self.small.used_bytes(),
            self.small.live_count()
        );
        match &self.window {
            Some(w) => {
                let resident: Vec<String> = w.resident().iter().map(|l| format!("{l}")).collect();
                let inflight = match w.in_flight() {
                    Some((c, t)) => format!("{}:{:?}@{t:.3}", c.layer, c.direction),
                    None => "-".into(),
                };
                let _ = writeln!(
                    s,
                    "window layers={} resident={} inflight={inflight}",
                    w.window_layers(),
                    if resident.is_empty() { "-".into() } else { resident.join(",") }
                );
            }
            None => {
                let _ = writeln!(s, "window none");
            }
        }
        s
    }
}

/// `max(1, floor(available_bytes / frozen_bytes_per_layer))`, capped at
/// `layer_count`.
pub fn window_layers_for(available_bytes: u64, frozen_bytes_per_layer: u64, layer_count: u32) -> u32 {
    let fit = (available_bytes / frozen_bytes_per_layer.max(1)).min(layer_count as u64) as u32;
    fit.max(1)
}

/// KV bytes to keep in reserve so decode growth during one layer swap-out
/// is served without waiting: `(swap_out_ms / tpot_ms) * max_bs * kv bytes
/// per token`.
pub fn reserved_bytes(swap_out_ms: f64, qos: &QosTarget, max_bs: u32, model: &ModelSpec) -> f64 {
    swap_out_ms / qos.tpot_ms * max_bs as f64 * model.kv_bytes_per_token() as f64
}

fn bit(words: &[u64], i: usize) -> bool {
    words[i / 64] >> (i % 64) & 1 == 1
}

fn set_bit(words: &mut [u64], i: usize, on: bool) {
    if on {
        words[i / 64] |= 1 << (i % 64);
    } else {
        words[i / 64] &= !(1 << (i % 64));
    }
}

fn first_fit(words: &[u64], len: usize, span: usize) -> Option<usize> {
    let mut run = 0;
    for i in 0..len {
        if bit(words, i) {
            run = 0;
        } else {
            run += 1;
            if run == span {
                return Some(i + 1 - span);
            }
        }
    }
    None
}
