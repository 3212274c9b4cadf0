//! Hardware and model constants, SM partitions and the decode utilization
//! helpers.

use alloc::format;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, Result, GIB, KIB, MIB};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Host link rate at which a 430 MiB layer moves in 17.2 ms (25 MiB/ms).
pub const H2D_25G: f64 = 25.0 * MIB as f64 * 1e3;

/// Static description of one GPU.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GpuSpec {
    pub sm_count: u32,
    pub warps_per_sm: u32,
    pub mem_bytes: u64,
    /// HBM bandwidth in bytes/second; the capacity `B` of the contention model.
    pub hbm_bandwidth: f64,
    /// Host <-> device transfer rate in bytes/second.
    pub h2d_bandwidth: f64,
}

impl GpuSpec {
    /// RTX 6000 Ada-class card: 142 SMs, 48 GiB.
    pub fn ada6000() -> Self {
        Self {
            sm_count: 142,
            warps_per_sm: 32,
            mem_bytes: 48 * GIB,
            hbm_bandwidth: 960e9,
            h2d_bandwidth: H2D_25G,
        }
    }

    /// A100-40GB-class card: 108 SMs.
    pub fn a100_40g() -> Self {
        Self {
            sm_count: 108,
            warps_per_sm: 32,
            mem_bytes: 40 * GIB,
            hbm_bandwidth: 1555e9,
            h2d_bandwidth: H2D_25G,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sm_count < 10 {
            return Err(Error::InvalidInput(format!(
                "sm_count {} < 10 cannot host a 10% partition grid",
                self.sm_count
            )));
        }
        if self.warps_per_sm == 0
            || self.mem_bytes == 0
            || !(self.hbm_bandwidth > 0.0)
            || !(self.h2d_bandwidth > 0.0)
        {
            return Err(Error::InvalidInput("gpu fields must be positive".into()));
        }
        Ok(())
    }
}

/// Transformer model constants relevant to memory and traffic.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ModelSpec {
    pub layer_count: u32,
    pub hidden_dim: u32,
    pub kv_bytes_per_token_layer: u64,
    pub frozen_bytes_per_layer: u64,
    pub trainable_bytes_per_layer: u64,
    pub activation_bytes_per_sample_layer: u64,
}

impl ModelSpec {
    /// Llama3-8B-like: 32 layers, 2 KiB of KV per token and layer.
    pub fn llama3_8b() -> Self {
        Self {
            layer_count: 32,
            hidden_dim: 4096,
            kv_bytes_per_token_layer: 2 * KIB,
            frozen_bytes_per_layer: 430 * MIB,
            trainable_bytes_per_layer: MIB,
            activation_bytes_per_sample_layer: 128 * MIB,
        }
    }

    /// KV bytes for one token across all layers.
    pub fn kv_bytes_per_token(&self) -> u64 {
        self.kv_bytes_per_token_layer * self.layer_count as u64
    }

    pub fn frozen_bytes(&self) -> u64 {
        self.frozen_bytes_per_layer * self.layer_count as u64
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 {
            return Err(Error::InvalidInput("layer_count must be >= 1".into()));
        }
        if self.kv_bytes_per_token_layer == 0 {
            return Err(Error::InvalidInput(
                "kv_bytes_per_token_layer must be > 0".into(),
            ));
        }
        if self.trainable_bytes_per_layer >= self.frozen_bytes_per_layer {
            return Err(Error::InvalidInput(
                "trainable bytes must be far below frozen bytes for PEFT".into(),
            ));
        }
        Ok(())
    }
}

/// Decode-phase latency target (time per output token).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct QosTarget {
    pub tpot_ms: f64,
}

impl QosTarget {
    pub fn new(tpot_ms: f64) -> Result<Self> {
        if !(tpot_ms > 0.0) {
            return Err(Error::InvalidInput(format!("tpot_ms {tpot_ms} must be > 0")));
        }
        Ok(Self { tpot_ms })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            tpot_ms: self.tpot_ms * factor,
        }
    }
}

/// SM shares for inference and finetune, discretized on a grid of
/// `1/steps`.
///
/// Shares are kept as integer step counts so grid membership and equality
/// are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SmPartition {
    infer: u16,
    ft: u16,
    steps: u16,
}

/// The default 10% grid.
pub const DEFAULT_GRID_STEPS: u16 = 10;

impl SmPartition {
    pub fn new(infer: u16, ft: u16, steps: u16) -> Result<Self> {
        if steps == 0 || infer == 0 || infer as u32 + ft as u32 > steps as u32 {
            return Err(Error::InvalidArgument(format!(
                "invalid partition {infer}+{ft} of {steps}"
            )));
        }
        Ok(Self { infer, ft, steps })
    }

    /// Snap fractional shares onto the grid; off-grid values are rejected.
    pub fn from_fracs(infer_frac: f64, ft_frac: f64, steps: u16) -> Result<Self> {
        let infer = grid_index(infer_frac, steps)?;
        let ft = grid_index(ft_frac, steps)?;
        Self::new(infer, ft, steps)
    }

    pub fn full_inference(steps: u16) -> Self {
        Self {
            infer: steps,
            ft: 0,
            steps,
        }
    }

    pub fn infer_steps(&self) -> u16 {
        self.infer
    }

    pub fn ft_steps(&self) -> u16 {
        self.ft
    }

    pub fn grid_steps(&self) -> u16 {
        self.steps
    }

    pub fn infer_frac(&self) -> f64 {
        self.infer as f64 / self.steps as f64
    }

    pub fn ft_frac(&self) -> f64 {
        self.ft as f64 / self.steps as f64
    }

    /// Every valid partition on the grid, including `ft == 0` and
    /// under-committed ones, in (infer, ft) ascending order.
    pub fn enumerate(steps: u16) -> Vec<SmPartition> {
        let mut out = Vec::new();
        for infer in 1..=steps {
            for ft in 0..=(steps - infer) {
                out.push(SmPartition { infer, ft, steps });
            }
        }
        out
    }

    /// The partitions where both tasks hold SMs (45 on a 10% grid).
    pub fn colocated(steps: u16) -> Vec<SmPartition> {
        Self::enumerate(steps).into_iter().filter(|p| p.ft > 0).collect()
    }
}

/// Map a fraction onto a grid index, rejecting values more than 1e-6 off.
pub fn grid_index(frac: f64, steps: u16) -> Result<u16> {
    let scaled = frac * steps as f64;
    let idx = math::round(scaled);
    if !(frac >= 0.0) || frac > 1.0 + 1e-9 || math::abs(scaled - idx) > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "fraction {frac} is not on the 1/{steps} grid"
        )));
    }
    Ok(idx as u16)
}

/// Per-kernel profiler sample.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct KernelSample {
    pub sm_util: f64,
    pub dram_util: f64,
    pub duration_ms: f64,
}

/// Duration-weighted SM and DRAM utilization of a kernel mix.
pub fn aggregate_utilization(kernels: &[KernelSample]) -> Result<(f64, f64)> {
    if kernels.is_empty() {
        return Err(Error::InvalidInput("no kernel samples".into()));
    }
    let mut total = 0.0;
    for k in kernels {
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        if !in_range(k.sm_util) || !in_range(k.dram_util) || !(k.duration_ms >= 0.0) {
            return Err(Error::InvalidInput(format!("bad kernel sample {k:?}")));
        }
        total += k.duration_ms;
    }
    if !(total > 0.0) {
        return Err(Error::InvalidInput("total kernel duration is zero".into()));
    }
    let (mut sm, mut dram) = (0.0, 0.0);
    for k in kernels {
        let weight = k.duration_ms / total;
        sm += k.sm_util * weight;
        dram += k.dram_util * weight;
    }
    Ok((sm.clamp(0.0, 1.0), dram.clamp(0.0, 1.0)))
}

/// Warps needed for an `m x n` GEMM output tiled 16x16, one warp per tile.
/// Partial tiles are padded, so both dimensions round up.
pub fn estimate_warp_demand(m: u64, n: u64) -> u64 {
    m.div_ceil(16) * n.div_ceil(16)
}

pub fn warp_capacity(sm_count: u32, warps_per_sm: u32) -> u64 {
    sm_count as u64 * warps_per_sm as u64
}

impl GpuSpec {
    pub fn warp_capacity(&self) -> u64 {
        warp_capacity(self.sm_count, self.warps_per_sm)
    }
}
