//! Discrete-event simulation of decode serving co-located with finetuning.
//!
//! Each device runs its own single-threaded event loop; multi-device runs
//! simulate devices one after another and merge their logs by time, so a
//! run is a pure function of its configuration, trace and seed.

mod device;
pub mod oracle;
mod profiles;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::domain::{GpuSpec, ModelSpec, QosTarget, SmPartition, DEFAULT_GRID_STEPS};
use crate::predictor::{ColoModel, SoloModel};
use crate::scheduler::DEFAULT_UNIT_TARGET_MS;
use crate::workload::Request;
use crate::{Error, Result, GIB};

pub use oracle::{oracle_decode_ms, DecodeTiming, Oracle, OracleParams, SpeedupCurve};
pub use profiles::{generate_profiles, ProfileGrid};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Mode {
    /// Unified memory pool, window swapping and QoS-guarded SM planning.
    Adaptive,
    /// Inference and finetuning each on a dedicated device.
    #[cfg_attr(feature = "serde", serde(rename = "separate"))]
    SeparateMode,
    /// Fixed SM and memory split on every device.
    #[cfg_attr(feature = "serde", serde(rename = "static"))]
    StaticMode,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Adaptive => "adaptive",
            Mode::SeparateMode => "separate",
            Mode::StaticMode => "static",
        }
    }

    pub const ALL: [Mode; 3] = [Mode::Adaptive, Mode::StaticMode, Mode::SeparateMode];
}

/// Finetune job shape and its ground-truth cost.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct FinetuneSpec {
    pub enabled: bool,
    pub mini_bs: u32,
    /// Per-sample, per-layer compute at full SM.
    pub sample_layer_ms: f64,
    /// Fixed cost of one layer unit at full SM.
    pub unit_overhead_ms: f64,
    /// Per-sample estimate the splitter plans with.
    pub split_estimate_ms: f64,
    pub unit_target_ms: f64,
    /// Share of a unit's time that stretches under bandwidth contention.
    pub memory_bound_frac: f64,
    pub max_iterations: Option<u64>,
}

impl Default for FinetuneSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            mini_bs: 16,
            sample_layer_ms: 4.5,
            unit_overhead_ms: 0.5,
            split_estimate_ms: 5.0,
            unit_target_ms: DEFAULT_UNIT_TARGET_MS,
            memory_bound_frac: 0.25,
            max_iterations: None,
        }
    }
}

impl FinetuneSpec {
    pub fn unit_ms_full(&self, micro_bs: u32) -> f64 {
        self.unit_overhead_ms + micro_bs as f64 * self.sample_layer_ms
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct StaticSplit {
    pub infer_frac: f64,
    pub ft_frac: f64,
    /// Share of pool chunks the KV cache may hold; the rest is the tensor
    /// arena's.
    pub kv_mem_frac: f64,
}

impl Default for StaticSplit {
    fn default() -> Self {
        Self {
            infer_frac: 0.6,
            ft_frac: 0.4,
            kv_mem_frac: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SimConfig {
    pub gpu: GpuSpec,
    pub model_infer: ModelSpec,
    pub model_ft: ModelSpec,
    pub qos: QosTarget,
    pub mode: Mode,
    pub noise_sigma: f64,
    pub seed: u64,
    pub partition_grid_steps: u16,
    pub oracle: OracleParams,
    pub finetune: FinetuneSpec,
    /// GPUs in the comparison. Co-located modes split the trace round-robin
    /// over all of them; the separate mode serves the whole trace on one and
    /// trains on the other(s).
    pub devices: u32,
    pub small_pool_bytes: u64,
    pub max_batch: u32,
    pub headroom: f64,
    pub replan_interval_ms: f64,
    /// Context length assumed for a request that may arrive while idle.
    pub standby_seqlen: u32,
    pub static_split: StaticSplit,
    /// Run the allocator consistency check after every event (slow).
    pub check_invariants: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            gpu: GpuSpec::ada6000(),
            model_infer: ModelSpec::llama3_8b(),
            model_ft: ModelSpec::llama3_8b(),
            qos: QosTarget { tpot_ms: 40.0 },
            mode: Mode::Adaptive,
            noise_sigma: 0.0,
            seed: 42,
            partition_grid_steps: DEFAULT_GRID_STEPS,
            oracle: OracleParams::default(),
            finetune: FinetuneSpec::default(),
            devices: 2,
            small_pool_bytes: 4 * GIB,
            max_batch: 64,
            headroom: 0.9,
            replan_interval_ms: 100.0,
            standby_seqlen: 2048,
            static_split: StaticSplit::default(),
            check_invariants: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.gpu.validate()?;
        self.model_infer.validate()?;
        self.model_ft.validate()?;
        self.oracle.validate()?;
        QosTarget::new(self.qos.tpot_ms)?;
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("noise_sigma must be >= 0".into()));
        }
        if self.devices == 0 || (self.mode == Mode::SeparateMode && self.devices < 2) {
            return Err(Error::InvalidInput(format!(
                "{} device(s) is too few for mode {}",
                self.devices,
                self.mode.as_str()
            )));
        }
        if self.partition_grid_steps == 0 || self.gpu.sm_count < self.partition_grid_steps as u32 {
            return Err(Error::InvalidInput("partition grid finer than the SM count".into()));
        }
        if self.max_batch == 0 || self.finetune.mini_bs == 0 {
            return Err(Error::InvalidInput("max_batch and mini_bs must be >= 1".into()));
        }
        let s = &self.static_split;
        SmPartition::from_fracs(s.infer_frac, s.ft_frac, self.partition_grid_steps)?;
        if !(s.kv_mem_frac > 0.0 && s.kv_mem_frac < 1.0) {
            return Err(Error::InvalidInput("static kv_mem_frac must be in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SmSample {
    pub t_ms: f64,
    pub device: u32,
    pub infer_frac: f64,
    pub ft_frac: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct MemSample {
    pub t_ms: f64,
    pub device: u32,
    pub kv_chunks: usize,
    pub tensor_chunks: usize,
    pub window_layers: u32,
}

/// A window resize and the KV chunk demand that caused it.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct WindowEvent {
    pub t_ms: f64,
    pub device: u32,
    pub window_layers: u32,
    pub kv_chunks: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Metrics {
    /// Last arrival time; finetune work is counted up to here.
    pub horizon_ms: f64,
    /// One sample per decoded token.
    pub tpot_samples: Vec<f64>,
    pub qos_violations: u64,
    pub decode_steps: u64,
    pub finetune_units_done: u64,
    /// Completed samples, `micro_bs * units / (2 * layers)` summed over
    /// devices.
    pub finetune_samples: f64,
    /// Samples per second over the horizon.
    pub finetune_throughput: f64,
    pub sm_timeline: Vec<SmSample>,
    pub mem_timeline: Vec<MemSample>,
    pub window_events: Vec<WindowEvent>,
    pub swap_count: u64,
    pub swap_bytes: u64,
    pub admitted: u64,
    pub completed: u64,
    pub dropped: u64,
    pub stall_ms: f64,
    pub kv_wait_ms: f64,
    pub small_pool_peak_fragmentation: u64,
}

impl Metrics {
    pub fn qos_violation_rate(&self) -> f64 {
        if self.tpot_samples.is_empty() {
            0.0
        } else {
            self.qos_violations as f64 / self.tpot_samples.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub t_ms: f64,
    pub device: u32,
    pub kind: &'static str,
    pub detail: String,
}

impl LogEntry {
    /// `t_ms,kind,detail`
    pub fn csv_line(&self) -> String {
        format!("{:.3},{},dev={} {}", self.t_ms, self.kind, self.device, self.detail)
    }
}

pub const EVENT_CSV_HEADER: &str = "t_ms,kind,detail";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventLog {
    pub entries: Vec<LogEntry>,
    /// Scheduler decisions as `(t_ms, device, csv line)`.
    pub decisions: Vec<(f64, u32, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub mode: Mode,
    pub metrics: Metrics,
    pub log: EventLog,
}

/// Fitted models for the adaptive mode.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub solo: &'a SoloModel,
    pub colo: &'a ColoModel,
}

/// Simulate `trace` under `config.mode`.
pub fn run(config: &SimConfig, trace: &[Request], models: Option<Models<'_>>) -> Result<SimOutput> {
    config.validate()?;
    if trace.is_empty() {
        return Err(Error::InvalidInput("trace is empty".into()));
    }
    if trace.windows(2).any(|w| w[1].arrival_ms < w[0].arrival_ms) {
        return Err(Error::InvalidInput("trace is not sorted by arrival".into()));
    }
    if config.mode == Mode::Adaptive && models.is_none() {
        return Err(Error::InvalidInput("adaptive mode needs fitted models".into()));
    }
    let horizon = trace[trace.len() - 1].arrival_ms;
    let n = config.devices as usize;
    let mut roles = Vec::with_capacity(n);
    match config.mode {
        Mode::Adaptive | Mode::StaticMode => {
            for d in 0..n {
                let share: Vec<Request> = trace.iter().skip(d).step_by(n).copied().collect();
                let role = if config.mode == Mode::Adaptive {
                    device::Role::Adaptive
                } else {
                    device::Role::Static
                };
                roles.push((role, share));
            }
        }
        Mode::SeparateMode => {
            roles.push((device::Role::InferenceOnly, trace.to_vec()));
            for _ in 1..n {
                roles.push((device::Role::FinetuneOnly, Vec::new()));
            }
        }
    }

    let mut metrics = Metrics {
        horizon_ms: horizon,
        ..Metrics::default()
    };
    let mut log = EventLog::default();
    for (d, (role, share)) in roles.into_iter().enumerate() {
        let dev = device::Device::new(d as u32, config, role, share, horizon, models)?;
        let (m, l) = dev.run()?;
        merge(&mut metrics, m);
        log.entries.extend(l.entries);
        log.decisions.extend(l.decisions);
    }
    log.entries.sort_by(|a, b| a.t_ms.total_cmp(&b.t_ms).then(a.device.cmp(&b.device)));
    log.decisions.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    metrics.sm_timeline.sort_by(|a, b| a.t_ms.total_cmp(&b.t_ms).then(a.device.cmp(&b.device)));
    metrics.mem_timeline.sort_by(|a, b| a.t_ms.total_cmp(&b.t_ms).then(a.device.cmp(&b.device)));
    metrics.window_events.sort_by(|a, b| a.t_ms.total_cmp(&b.t_ms).then(a.device.cmp(&b.device)));
    metrics.finetune_throughput = if horizon > 0.0 {
        metrics.finetune_samples / (horizon * 1e-3)
    } else {
        0.0
    };
    Ok(SimOutput {
        mode: config.mode,
        metrics,
        log,
    })
}

fn merge(into: &mut Metrics, m: Metrics) {
    into.tpot_samples.extend(m.tpot_samples);
    into.qos_violations += m.qos_violations;
    into.decode_steps += m.decode_steps;
    into.finetune_units_done += m.finetune_units_done;
    into.finetune_samples += m.finetune_samples;
    into.sm_timeline.extend(m.sm_timeline);
    into.mem_timeline.extend(m.mem_timeline);
    into.window_events.extend(m.window_events);
    into.swap_count += m.swap_count;
    into.swap_bytes += m.swap_bytes;
    into.admitted += m.admitted;
    into.completed += m.completed;
    into.dropped += m.dropped;
    into.stall_ms += m.stall_ms;
    into.kv_wait_ms += m.kv_wait_ms;
    into.small_pool_peak_fragmentation = into.small_pool_peak_fragmentation.max(m.small_pool_peak_fragmentation);
}

/// Nearest-rank percentile of `samples` (`q` in `[0, 1]`).
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let rank = crate::math::ceil(q.clamp(0.0, 1.0) * v.len() as f64) as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Empirical CDF at up to `points` evenly spaced ranks: `(latency, frac)`.
pub fn tpot_cdf(samples: &[f64], points: usize) -> Vec<(f64, f64)> {
    if samples.is_empty() || points == 0 {
        return Vec::new();
    }
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    let mut out: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for i in 1..=points.min(n) {
        let rank = (i * n).div_ceil(points.min(n));
        out.insert(rank, (v[rank - 1], rank as f64 / n as f64));
    }
    out.into_values().collect()
}
