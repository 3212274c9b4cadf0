//! Window-based swapping of frozen finetune weights.
//!
//! A finetune iteration walks layers `0..L` forward and then `L-1..=0`
//! backward. The window keeps the frozen weights of the next
//! `window_layers` distinct layers of that walk resident. Transfers share a
//! single host-link queue, separate from compute, and run one at a time.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum TransferDirection {
    /// Device to host; frees device memory when it completes.
    Evict,
    /// Host to device; device memory is claimed when it starts.
    Prefetch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferCmd {
    pub layer: u32,
    pub direction: TransferDirection,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    Forward,
    Backward,
}

/// Layer and pass at `position` of the cyclic forward-then-backward walk.
pub fn walk_step(layer_count: u32, position: usize) -> (u32, Pass) {
    let l = layer_count as usize;
    let p = position % (2 * l);
    if p < l {
        (p as u32, Pass::Forward)
    } else {
        ((2 * l - 1 - p) as u32, Pass::Backward)
    }
}

#[derive(Debug, Clone)]
pub struct SwapWindow {
    layer_count: u32,
    window_layers: u32,
    transfer_ms: f64,
    resident: BTreeSet<u32>,
    /// Queued or in-flight prefetches.
    loading: BTreeSet<u32>,
    /// Queued or in-flight evictions.
    evicting: BTreeSet<u32>,
    queue: VecDeque<TransferCmd>,
    in_flight: Option<(TransferCmd, f64)>,
    cursor: usize,
    computing: Option<u32>,
}

impl SwapWindow {
    /// A window whose first `window_layers` layers of the walk are already
    /// resident.
    pub fn new(layer_count: u32, window_layers: u32, frozen_bytes_per_layer: u64, h2d_bandwidth: f64) -> Self {
        let window_layers = window_layers.min(layer_count);
        let mut w = Self {
            layer_count,
            window_layers,
            transfer_ms: frozen_bytes_per_layer as f64 / h2d_bandwidth * 1e3,
            resident: BTreeSet::new(),
            loading: BTreeSet::new(),
            evicting: BTreeSet::new(),
            queue: VecDeque::new(),
            in_flight: None,
            cursor: 0,
            computing: None,
        };
        w.resident = w.desired().into_iter().collect();
        w
    }

    /// Like [`SwapWindow::new`] but nothing is resident yet.
    pub fn empty(layer_count: u32, frozen_bytes_per_layer: u64, h2d_bandwidth: f64) -> Self {
        let mut w = Self::new(layer_count, 0, frozen_bytes_per_layer, h2d_bandwidth);
        w.resident.clear();
        w
    }

    pub fn layer_count(&self) -> u32 {
        self.layer_count
    }

    pub fn window_layers(&self) -> u32 {
        self.window_layers
    }

    pub fn transfer_ms(&self) -> f64 {
        self.transfer_ms
    }

    pub fn resident(&self) -> &BTreeSet<u32> {
        &self.resident
    }

    pub fn is_resident(&self, layer: u32) -> bool {
        self.resident.contains(&layer)
    }

    pub fn in_flight(&self) -> Option<(TransferCmd, f64)> {
        self.in_flight
    }

    pub fn queued(&self) -> impl Iterator<Item = &TransferCmd> {
        self.queue.iter()
    }

    pub fn link_idle(&self) -> bool {
        self.in_flight.is_none()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Layer and pass of the next unit of the walk.
    pub fn next_step(&self) -> (u32, Pass) {
        walk_step(self.layer_count, self.cursor)
    }

    /// Layers holding (or about to hold) device memory.
    pub fn footprint_layers(&self) -> usize {
        self.resident.len() + self.loading.len()
    }

    pub fn set_computing(&mut self, layer: Option<u32>) {
        self.computing = layer;
    }

    /// The next `window_layers` distinct layers of the walk from the cursor.
    pub fn desired(&self) -> Vec<u32> {
        let mut out = Vec::new();
        let w = self.window_layers as usize;
        let mut p = self.cursor;
        while out.len() < w {
            let (layer, _) = walk_step(self.layer_count, p);
            if !out.contains(&layer) {
                out.push(layer);
            }
            p += 1;
        }
        out
    }

    /// Called when the unit at the cursor finishes. Returns the transfers
    /// newly queued: evictions of layers that left the window, then
    /// prefetches of layers that entered it.
    pub fn on_layer_complete(&mut self, layer: u32) -> Vec<TransferCmd> {
        debug_assert_eq!(walk_step(self.layer_count, self.cursor).0, layer);
        self.cursor = (self.cursor + 1) % (2 * self.layer_count as usize);
        if self.computing == Some(layer) {
            self.computing = None;
        }
        self.rebalance()
    }

    /// Change the window size. Shrinking first drops queued prefetches that
    /// have not started, then evicts the highest-indexed resident layers
    /// that are not computing.
    pub fn resize(&mut self, window_layers: u32) -> Vec<TransferCmd> {
        let window_layers = window_layers.min(self.layer_count);
        self.window_layers = window_layers;
        let mut cmds = Vec::new();
        let target = window_layers as usize;
        while self.footprint_layers() > target {
            if let Some(pos) = self
                .queue
                .iter()
                .rposition(|c| c.direction == TransferDirection::Prefetch)
            {
                let cmd = self.queue.remove(pos).expect("position in range");
                self.loading.remove(&cmd.layer);
                continue;
            }
            let victim = self
                .resident
                .iter()
                .rev()
                .copied()
                .find(|&l| Some(l) != self.computing);
            match victim {
                Some(layer) => cmds.push(self.queue_evict(layer)),
                None => break,
            }
        }
        cmds.extend(self.rebalance());
        cmds
    }

    fn rebalance(&mut self) -> Vec<TransferCmd> {
        let desired = self.desired();
        let mut cmds = Vec::new();
        let stale: Vec<u32> = self
            .resident
            .iter()
            .copied()
            .filter(|l| !desired.contains(l) && Some(*l) != self.computing)
            .collect();
        for layer in stale {
            cmds.push(self.queue_evict(layer));
        }
        for layer in desired {
            if self.footprint_layers() >= self.window_layers as usize {
                break;
            }
            if !self.resident.contains(&layer) && !self.loading.contains(&layer) {
                let cmd = TransferCmd {
                    layer,
                    direction: TransferDirection::Prefetch,
                    duration_ms: self.transfer_ms,
                };
                self.loading.insert(layer);
                self.queue.push_back(cmd);
                cmds.push(cmd);
            }
        }
        cmds
    }

    fn queue_evict(&mut self, layer: u32) -> TransferCmd {
        self.resident.remove(&layer);
        self.evicting.insert(layer);
        let cmd = TransferCmd {
            layer,
            direction: TransferDirection::Evict,
            duration_ms: self.transfer_ms,
        };
        self.queue.push_back(cmd);
        cmd
    }

    /// Pop the next queued transfer onto the link if it is idle.
    pub fn start_next(&mut self, now_ms: f64) -> Option<(TransferCmd, f64)> {
        if self.in_flight.is_some() {
            return None;
        }
        let cmd = self.queue.pop_front()?;
        let done = now_ms + cmd.duration_ms;
        self.in_flight = Some((cmd, done));
        Some((cmd, done))
    }

    /// Abandon the in-flight prefetch (its memory could not be claimed) and
    /// shrink the window by one.
    pub fn abort_prefetch(&mut self) -> Option<TransferCmd> {
        match self.in_flight {
            Some((cmd, _)) if cmd.direction == TransferDirection::Prefetch => {
                self.in_flight = None;
                self.loading.remove(&cmd.layer);
                self.window_layers = self.window_layers.saturating_sub(1);
                Some(cmd)
            }
            _ => None,
        }
    }

    /// Finish the in-flight transfer.
    pub fn complete(&mut self) -> Option<TransferCmd> {
        let (cmd, _) = self.in_flight.take()?;
        match cmd.direction {
            TransferDirection::Evict => {
                self.evicting.remove(&cmd.layer);
            }
            TransferDirection::Prefetch => {
                self.loading.remove(&cmd.layer);
                self.resident.insert(cmd.layer);
            }
        }
        Some(cmd)
    }
}
