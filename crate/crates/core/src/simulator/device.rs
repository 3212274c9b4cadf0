//! One device's event loop.
//!
//! Decode runs as back-to-back steps over a continuously batched set of
//! requests; admission happens at step boundaries. Finetuning runs as
//! non-preemptible layer units next to the steps, and frozen-weight
//! transfers run one at a time on the host link. All three only ever start
//! from `kick`, which is called after every event.

use alloc::collections::{BTreeMap, BinaryHeap, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::oracle::Oracle;
use super::{EventLog, LogEntry, MemSample, Metrics, Models, SimConfig, SmSample, WindowEvent};
use crate::domain::SmPartition;
use crate::math;
use crate::mempool::{
    reserved_bytes, window_layers_for, ChunkLimits, KvSlot, MemoryPool, SwapWindow, TransferDirection, PERSISTENT_TAG,
};
use crate::scheduler::{split_minibatch, FinetuneQueue, SchedEvent, Scheduler, SchedulerConfig};
use crate::workload::Request;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Role {
    Adaptive,
    Static,
    InferenceOnly,
    FinetuneOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    Arrival(usize),
    StepEnd,
    UnitEnd,
    TransferEnd,
}

/// Min-heap entry: earliest time first, then creation order.
#[derive(Debug, Clone, Copy)]
struct Scheduled {
    t: f64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then(other.seq.cmp(&self.seq))
    }
}

struct Live {
    req: Request,
    /// Holds `prompt + generated + 1` slots while a step runs.
    slots: Vec<KvSlot>,
    generated: u32,
}

impl Live {
    fn context(&self) -> u64 {
        (self.req.prompt_tokens + self.generated) as u64
    }
}

#[derive(Debug, Clone, Copy)]
struct Step {
    start: f64,
    infer_steps: u16,
}

#[derive(Debug, Clone, Copy)]
struct Unit {
    layer: u32,
    share: u16,
}

struct Finetune {
    queue: FinetuneQueue,
    running: Option<Unit>,
    /// Pool handles of each resident or loading layer's frozen weights.
    layer_handles: BTreeMap<u32, Vec<u64>>,
    stalled_since: Option<f64>,
    resume_pending: bool,
    /// Units that finished by the horizon.
    counted_units: u64,
}

pub(super) struct Device<'a> {
    id: u32,
    cfg: &'a SimConfig,
    role: Role,
    oracle: Oracle,
    rng: ChaCha8Rng,
    steps: u16,
    pool: Option<MemoryPool>,
    sched: Option<Scheduler>,
    /// Decode partition outside the adaptive mode.
    fixed: SmPartition,
    horizon: f64,
    trace: Vec<Request>,
    waiting: VecDeque<usize>,
    batch: Vec<Live>,
    /// Final token count of every admitted, unfinished request.
    projected_tokens: u64,
    kv_token_cap: u64,
    /// Chunks the KV cache wants beyond what it holds.
    extra_kv_chunks: usize,
    kv_wait_since: Option<f64>,
    persistent_chunks: usize,
    step: Option<Step>,
    ft: Option<Finetune>,
    idle_planned: bool,
    events: BinaryHeap<Scheduled>,
    seq: u64,
    now: f64,
    metrics: Metrics,
    log: EventLog,
    last_decision: Option<String>,
    last_sm: Option<(f64, f64)>,
    last_mem: Option<(usize, usize, u32)>,
}

impl<'a> Device<'a> {
    pub(super) fn new(
        id: u32,
        cfg: &'a SimConfig,
        role: Role,
        trace: Vec<Request>,
        horizon: f64,
        models: Option<Models<'_>>,
    ) -> Result<Self> {
        let steps = cfg.partition_grid_steps;
        let oracle = Oracle::new(cfg.oracle.clone(), cfg.gpu, &cfg.model_infer, cfg.noise_sigma)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let fixed = match role {
            Role::Static => SmPartition::from_fracs(cfg.static_split.infer_frac, cfg.static_split.ft_frac, steps)?,
            Role::Adaptive | Role::InferenceOnly | Role::FinetuneOnly => SmPartition::full_inference(steps),
        };
        let with_ft = cfg.finetune.enabled && role != Role::InferenceOnly;
        let sched = match role {
            Role::Adaptive => {
                let m = models.ok_or_else(|| Error::InvalidInput("adaptive mode needs fitted models".into()))?;
                let sc = SchedulerConfig {
                    qos: cfg.qos,
                    headroom: cfg.headroom,
                    replan_interval_ms: cfg.replan_interval_ms,
                };
                let mut s = Scheduler::new(m.solo.clone(), m.colo.clone(), sc)?;
                if m.solo.grid_steps != steps {
                    return Err(Error::InvalidInput(format!(
                        "models are fitted on a 1/{} grid, config uses 1/{steps}",
                        m.solo.grid_steps
                    )));
                }
                s.set_finetune_present(with_ft);
                Some(s)
            }
            _ => None,
        };
        let mut dev = Self {
            id,
            cfg,
            role,
            oracle,
            rng,
            steps,
            pool: None,
            sched,
            fixed,
            horizon,
            trace,
            waiting: VecDeque::new(),
            batch: Vec::new(),
            projected_tokens: 0,
            kv_token_cap: 0,
            extra_kv_chunks: 0,
            kv_wait_since: None,
            persistent_chunks: 0,
            step: None,
            ft: None,
            idle_planned: false,
            events: BinaryHeap::new(),
            seq: 0,
            now: 0.0,
            metrics: Metrics::default(),
            log: EventLog::default(),
            last_decision: None,
            last_sm: None,
            last_mem: None,
        };
        if role != Role::FinetuneOnly {
            dev.setup_pool()?;
        }
        if with_ft {
            dev.setup_finetune()?;
        }
        for i in 0..dev.trace.len() {
            let t = dev.trace[i].arrival_ms;
            dev.push(t, Ev::Arrival(i));
        }
        Ok(dev)
    }

    fn setup_pool(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let outside = cfg.oracle.weight_bytes_read_per_step as u64;
        let mut pool = MemoryPool::new(&cfg.gpu, &cfg.model_infer, cfg.small_pool_bytes, outside)?;
        let n = pool.total_chunks();
        match self.role {
            Role::Static => {
                let kv = math::floor(cfg.static_split.kv_mem_frac * n as f64) as usize;
                pool.set_limits(ChunkLimits {
                    kv: Some(kv),
                    tensor: Some(n - kv),
                });
            }
            Role::Adaptive if cfg.finetune.enabled => {
                let swap_ms = cfg.model_ft.frozen_bytes_per_layer as f64 / cfg.gpu.h2d_bandwidth * 1e3;
                pool.set_reserve_bytes(reserved_bytes(swap_ms, &cfg.qos, cfg.max_batch, &cfg.model_infer));
            }
            _ => {}
        }
        self.pool = Some(pool);
        Ok(())
    }

    fn setup_finetune(&mut self) -> Result<()> {
        let cfg = self.cfg;
        let spec = &cfg.finetune;
        let model = &cfg.model_ft;
        let micro_bs = if self.role == Role::FinetuneOnly {
            spec.mini_bs
        } else {
            split_minibatch(spec.mini_bs, spec.split_estimate_ms, spec.unit_target_ms)
        };
        let mut queue = FinetuneQueue::new(model.layer_count, spec.mini_bs, micro_bs, spec.unit_ms_full(micro_bs))?;
        if let Some(n) = spec.max_iterations {
            queue = queue.with_max_iterations(n);
        }
        let mut ft = Finetune {
            queue,
            running: None,
            layer_handles: BTreeMap::new(),
            stalled_since: None,
            resume_pending: false,
            counted_units: 0,
        };
        let Some(pool) = self.pool.as_mut() else {
            self.ft = Some(ft);
            return Ok(());
        };
        let oom = |e: Error| Error::InvalidInput(format!("finetune state does not fit on the device: {e}"));
        for _ in 0..model.layer_count {
            pool.tensor_alloc_scattered(model.activation_bytes_per_sample_layer * micro_bs as u64, PERSISTENT_TAG)
                .map_err(oom)?;
            // adapter weights, gradients and two optimizer moments
            for _ in 0..4 {
                pool.small_alloc(model.trainable_bytes_per_layer).map_err(oom)?;
            }
        }
        let n = pool.total_chunks();
        let per_layer = model.frozen_bytes_per_layer.div_ceil(pool.chunk_bytes()) as usize;
        self.persistent_chunks = pool.tensor_chunks();
        let (tensor_room, kv_room) = match self.role {
            Role::Static => {
                let l = pool.limits();
                (l.tensor.unwrap_or(n), l.kv.unwrap_or(n))
            }
            _ => {
                let room = n - pool.reserve_chunks();
                (room, room.saturating_sub(self.persistent_chunks + per_layer))
            }
        };
        if tensor_room < self.persistent_chunks + per_layer {
            return Err(Error::InvalidInput(format!(
                "{tensor_room} chunk(s) left for finetuning cannot hold activations ({}) and one layer ({per_layer})",
                self.persistent_chunks
            )));
        }
        self.kv_token_cap = kv_room as u64 * pool.slots_per_new_chunk();
        let w = self.window_target(0);
        let pool = self.pool.as_mut().expect("pooled");
        pool.configure_window(SwapWindow::new(
            model.layer_count,
            w,
            model.frozen_bytes_per_layer,
            cfg.gpu.h2d_bandwidth,
        ));
        let resident: Vec<u32> = pool.window().expect("configured").resident().iter().copied().collect();
        for layer in resident {
            let pieces = pool.tensor_alloc_scattered(model.frozen_bytes_per_layer, layer)?;
            ft.layer_handles.insert(layer, pieces.iter().map(|t| t.handle).collect());
        }
        self.ft = Some(ft);
        Ok(())
    }

    fn push(&mut self, t: f64, ev: Ev) {
        debug_assert!(t >= self.now);
        self.events.push(Scheduled { t, seq: self.seq, ev });
        self.seq += 1;
    }

    fn note(&mut self, kind: &'static str, detail: String) {
        self.log.entries.push(LogEntry {
            t_ms: self.now,
            device: self.id,
            kind,
            detail,
        });
    }

    pub(super) fn run(mut self) -> Result<(Metrics, EventLog)> {
        if self.kv_token_cap == 0 {
            if let Some(pool) = &self.pool {
                self.kv_token_cap = match pool.limits().kv {
                    Some(kv) => kv as u64 * pool.slots_per_new_chunk(),
                    None => pool.total_chunks() as u64 * pool.slots_per_new_chunk(),
                };
            }
        }
        self.record_sm();
        self.record_mem();
        self.kick()?;
        while let Some(Scheduled { t, ev, .. }) = self.events.pop() {
            if t < self.now {
                return Err(Error::InvalidInput(format!("event at {t} scheduled before {}", self.now)));
            }
            self.now = t;
            match ev {
                Ev::Arrival(i) => {
                    self.waiting.push_back(i);
                    let r = self.trace[i];
                    self.note(
                        "arrival",
                        format!("prompt={} output={}", r.prompt_tokens, r.output_tokens),
                    );
                }
                Ev::StepEnd => self.end_step()?,
                Ev::UnitEnd => self.end_unit()?,
                Ev::TransferEnd => self.end_transfer()?,
            }
            self.kick()?;
            if self.cfg.check_invariants {
                if let Some(pool) = &self.pool {
                    pool.check_invariants()?;
                }
            }
        }
        if !self.waiting.is_empty() || !self.batch.is_empty() {
            return Err(Error::InvalidInput(format!(
                "device {} stopped with {} waiting and {} running request(s)",
                self.id,
                self.waiting.len(),
                self.batch.len()
            )));
        }
        if let Some(ft) = &mut self.ft {
            if let Some(since) = ft.stalled_since.take() {
                self.metrics.stall_ms += self.horizon.max(since) - since;
            }
            self.metrics.finetune_units_done = ft.counted_units;
            self.metrics.finetune_samples = ft.queue.micro_bs() as f64 * ft.counted_units as f64
                / (2.0 * self.cfg.model_ft.layer_count as f64);
        }
        if let Some(pool) = &self.pool {
            self.metrics.small_pool_peak_fragmentation = pool.small_pool().peak_internal_fragmentation();
        }
        Ok((self.metrics, self.log))
    }

    fn kick(&mut self) -> Result<()> {
        self.try_start_step()?;
        self.try_start_unit()?;
        self.try_start_transfer()?;
        self.record_mem();
        Ok(())
    }

    // ---- memory ---------------------------------------------------------

    /// Window size for the current KV demand plus `extra` chunks.
    fn window_target(&self, extra: usize) -> u32 {
        let pool = self.pool.as_ref().expect("pooled device");
        let model = &self.cfg.model_ft;
        let budget = match self.role {
            Role::Static => pool
                .limits()
                .tensor
                .unwrap_or(pool.total_chunks())
                .saturating_sub(self.persistent_chunks),
            _ => pool
                .total_chunks()
                .saturating_sub(pool.kv_chunks() + extra + pool.reserve_chunks() + self.persistent_chunks),
        };
        window_layers_for(budget as u64 * pool.chunk_bytes(), model.frozen_bytes_per_layer, model.layer_count)
    }

    fn rebalance_window(&mut self) {
        if self.ft.is_none() || self.pool.is_none() {
            return;
        }
        let target = self.window_target(self.extra_kv_chunks);
        let pool = self.pool.as_mut().expect("pooled");
        let win = pool.window_mut().expect("configured");
        if target == win.window_layers() {
            return;
        }
        win.resize(target);
        let demand = pool.kv_chunks() + self.extra_kv_chunks;
        self.metrics.window_events.push(WindowEvent {
            t_ms: self.now,
            device: self.id,
            window_layers: target,
            kv_chunks: demand,
        });
        self.note("window", format!("layers={target} kv_demand={demand}"));
    }

    /// Token slots the KV cache can take now without touching the reserve.
    fn kv_slots_available(&self) -> u64 {
        let pool = self.pool.as_ref().expect("pooled device");
        let mut claimable = pool.unassigned_chunks().saturating_sub(pool.reserve_chunks());
        if let Some(cap) = pool.limits().kv {
            claimable = claimable.min(cap.saturating_sub(pool.kv_chunks()));
        }
        pool.kv_free_slots() as u64 + claimable as u64 * pool.slots_per_new_chunk()
    }

    fn chunks_for_slots(&self, slots: u64) -> usize {
        let per = self.pool.as_ref().expect("pooled device").slots_per_new_chunk();
        slots.div_ceil(per) as usize
    }

    fn alloc_slots(&mut self, n: u64) -> Result<Vec<KvSlot>> {
        let pool = self.pool.as_mut().expect("pooled device");
        let mut out = Vec::with_capacity(n as usize);
        for _ in 0..n {
            match pool.kv_alloc_slot() {
                Ok(s) => out.push(s),
                Err(e) => {
                    for s in out {
                        pool.kv_free_slot(s)?;
                    }
                    return Err(e);
                }
            }
        }
        Ok(out)
    }

    fn free_slots(&mut self, slots: Vec<KvSlot>) -> Result<()> {
        let pool = self.pool.as_mut().expect("pooled device");
        for s in slots {
            pool.kv_free_slot(s)?;
        }
        Ok(())
    }

    /// True when waiting can still free memory: a transfer is queued or
    /// running on the link.
    fn memory_in_motion(&self) -> bool {
        self.pool
            .as_ref()
            .and_then(|p| p.window())
            .is_some_and(|w| !w.link_idle() || w.queued().next().is_some())
    }

    // ---- decode ----------------------------------------------------------

    fn admit(&mut self) -> Result<usize> {
        let mut admitted = 0;
        while let Some(&i) = self.waiting.front() {
            if self.batch.len() >= self.cfg.max_batch as usize {
                break;
            }
            let req = self.trace[i];
            let total = req.total_tokens() as u64;
            if total > self.kv_token_cap {
                self.waiting.pop_front();
                self.metrics.dropped += 1;
                self.note("drop", format!("tokens={total} cap={}", self.kv_token_cap));
                continue;
            }
            if self.projected_tokens + total > self.kv_token_cap {
                break;
            }
            let need = req.prompt_tokens as u64 + 1;
            let avail = self.kv_slots_available();
            if need > avail {
                self.extra_kv_chunks = self.extra_kv_chunks.max(self.chunks_for_slots(need - avail));
                self.begin_kv_wait("admit");
                break;
            }
            let slots = self.alloc_slots(need)?;
            self.waiting.pop_front();
            self.projected_tokens += total;
            self.metrics.admitted += 1;
            admitted += 1;
            self.note("admit", format!("prompt={} output={}", req.prompt_tokens, req.output_tokens));
            self.batch.push(Live {
                req,
                slots,
                generated: 0,
            });
        }
        Ok(admitted)
    }

    fn begin_kv_wait(&mut self, why: &str) {
        if self.kv_wait_since.is_none() {
            self.kv_wait_since = Some(self.now);
            let extra = self.extra_kv_chunks;
            self.note("kv_wait", format!("{why} extra_chunks={extra}"));
        }
    }

    fn end_kv_wait(&mut self) {
        if let Some(since) = self.kv_wait_since.take() {
            self.metrics.kv_wait_ms += self.now - since;
        }
    }

    /// Give every running request its slot for the coming token.
    fn grow(&mut self) -> Result<bool> {
        let need: u64 = self
            .batch
            .iter()
            .filter(|l| l.slots.len() as u64 <= l.context())
            .count() as u64;
        if need == 0 {
            return Ok(true);
        }
        let pool = self.pool.as_ref().expect("pooled device");
        let mut claimable = pool.unassigned_chunks();
        if let Some(cap) = pool.limits().kv {
            claimable = claimable.min(cap.saturating_sub(pool.kv_chunks()));
        }
        let avail = pool.kv_free_slots() as u64 + claimable as u64 * pool.slots_per_new_chunk();
        if need <= avail {
            for i in 0..self.batch.len() {
                if self.batch[i].slots.len() as u64 <= self.batch[i].context() {
                    let s = self.alloc_slots(1)?;
                    self.batch[i].slots.extend(s);
                }
            }
            return Ok(true);
        }
        self.extra_kv_chunks = self.extra_kv_chunks.max(self.chunks_for_slots(need - avail));
        self.begin_kv_wait("grow");
        Ok(false)
    }

    fn try_start_step(&mut self) -> Result<()> {
        if self.step.is_some() || self.role == Role::FinetuneOnly {
            return Ok(());
        }
        self.extra_kv_chunks = 0;
        let admitted = self.admit()?;
        let mut grown = self.grow()?;
        self.rebalance_window();
        while !grown && !self.memory_in_motion() {
            // nothing will free memory: give up on the newest request
            let Some(victim) = self.batch.pop() else { break };
            self.projected_tokens -= victim.req.total_tokens() as u64;
            self.metrics.dropped += 1;
            self.note("drop", format!("kv_exhausted generated={}", victim.generated));
            self.free_slots(victim.slots)?;
            self.extra_kv_chunks = 0;
            grown = self.grow()?;
            self.rebalance_window();
        }
        if !grown {
            return Ok(());
        }
        if self.extra_kv_chunks == 0 {
            self.end_kv_wait();
        }
        if self.batch.is_empty() {
            self.plan_idle();
            return Ok(());
        }
        self.idle_planned = false;
        let bs = self.batch.len() as u32;
        let seqlen = self.mean_context();
        if let Some(s) = self.sched.as_mut() {
            let resume = self.ft.as_mut().is_some_and(|f| core::mem::take(&mut f.resume_pending));
            let ev = if resume {
                SchedEvent::FinetuneStallEnd { bs, seqlen }
            } else if admitted > 0 {
                SchedEvent::NewArrival { bs, seqlen }
            } else {
                SchedEvent::DecodeStepStart { bs, seqlen }
            };
            let d = s.on_event(self.now, ev);
            self.log_decision(&d.csv_line(self.now));
            if resume {
                self.note("ft_resume", format!("infer={:.2} ft={:.2}", d.partition.infer_frac(), d.partition.ft_frac()));
            }
        }
        self.record_sm();
        self.try_start_unit()?;
        let planned = self.partition();
        let held = self.ft.as_ref().and_then(|f| f.running).map_or(0, |u| u.share);
        let infer = planned.infer_steps().min(self.steps - held);
        let ft_share = if held > 0 { held } else { self.ft_share_now() };
        let ft_share = ft_share.min(self.steps - infer);
        let realized = SmPartition::new(infer, ft_share, self.steps)?;
        let ft_active = held > 0 || (ft_share > 0 && self.ft_can_run());
        let timing = self.oracle.decode(bs, seqlen, realized, ft_active, &mut self.rng);
        let end = self.now + timing.total_ms;
        self.step = Some(Step {
            start: self.now,
            infer_steps: infer,
        });
        self.push(end, Ev::StepEnd);
        self.note(
            "step",
            format!(
                "bs={bs} seqlen={seqlen} infer={:.2} ft={:.2} ms={:.3}",
                realized.infer_frac(),
                if ft_active { realized.ft_frac() } else { 0.0 },
                timing.total_ms
            ),
        );
        Ok(())
    }

    fn plan_idle(&mut self) {
        if self.idle_planned {
            return;
        }
        self.idle_planned = true;
        let standby = self.cfg.standby_seqlen;
        if let Some(s) = self.sched.as_mut() {
            let d = if s.is_stalled() {
                *s.current()
            } else {
                s.on_event(self.now, SchedEvent::DecodeStepStart { bs: 0, seqlen: standby })
            };
            self.log_decision(&d.csv_line(self.now));
            self.record_sm();
        }
    }

    fn mean_context(&self) -> u32 {
        let sum: u64 = self.batch.iter().map(|l| l.context()).sum();
        math::round(sum as f64 / self.batch.len() as f64) as u32
    }

    fn end_step(&mut self) -> Result<()> {
        let step = self.step.take().expect("a step was running");
        let dur = self.now - step.start;
        let qos = self.cfg.qos.tpot_ms;
        self.metrics.decode_steps += 1;
        let mut done = Vec::new();
        for (i, l) in self.batch.iter_mut().enumerate() {
            l.generated += 1;
            self.metrics.tpot_samples.push(dur);
            if dur > qos {
                self.metrics.qos_violations += 1;
            }
            if l.generated == l.req.output_tokens {
                done.push(i);
            }
        }
        for i in done.into_iter().rev() {
            let l = self.batch.remove(i);
            self.projected_tokens -= l.req.total_tokens() as u64;
            self.metrics.completed += 1;
            self.free_slots(l.slots)?;
            self.note("finish", format!("output={}", l.req.output_tokens));
        }
        if let Some(pool) = self.pool.as_mut() {
            pool.kv_release_empty();
        }
        self.rebalance_window();
        Ok(())
    }

    // ---- finetune --------------------------------------------------------

    /// Partition in force for decode right now.
    fn partition(&self) -> SmPartition {
        match &self.sched {
            Some(s) => s.current().partition,
            None => self.fixed,
        }
    }

    /// Finetune share the current decision grants.
    fn ft_share_now(&self) -> u16 {
        match &self.sched {
            Some(s) if s.current().finetune_runnable => s.current().partition.ft_steps(),
            Some(_) => 0,
            None if self.role == Role::FinetuneOnly => self.steps,
            None => self.fixed.ft_steps(),
        }
    }

    /// The finetune job has work it may start before the horizon.
    fn ft_can_run(&self) -> bool {
        self.ft
            .as_ref()
            .is_some_and(|f| f.stalled_since.is_none() && !f.queue.finished() && self.now < self.horizon)
    }

    fn is_resident(&self, layer: u32) -> bool {
        match self.pool.as_ref().and_then(|p| p.window()) {
            Some(w) => w.is_resident(layer),
            None => true,
        }
    }

    fn try_start_unit(&mut self) -> Result<()> {
        let Some(ft) = self.ft.as_ref() else { return Ok(()) };
        if ft.running.is_some() {
            return Ok(());
        }
        if self.now >= self.horizon || ft.queue.finished() {
            if let Some(s) = self.sched.as_mut() {
                s.set_finetune_present(false);
            }
            return Ok(());
        }
        let Some(head) = ft.queue.peek() else { return Ok(()) };
        if !self.is_resident(head.layer_id) {
            if ft.stalled_since.is_none() {
                self.ft.as_mut().expect("checked").stalled_since = Some(self.now);
                self.note("ft_stall", format!("layer={}", head.layer_id));
                if let Some(s) = self.sched.as_mut() {
                    let d = s.on_event(self.now, SchedEvent::FinetuneStallStart);
                    self.log_decision(&d.csv_line(self.now));
                    self.record_sm();
                }
            }
            return Ok(());
        }
        if ft.stalled_since.is_some() {
            return Ok(());
        }
        let step_infer = self.step.map_or(0, |s| s.infer_steps);
        let share = self.ft_share_now().min(self.steps - step_infer);
        if share == 0 {
            return Ok(());
        }
        let spec = &self.cfg.finetune;
        let frac = share as f64 / self.steps as f64;
        let contention = match self.step {
            Some(s) => {
                let bs = self.batch.len() as u32;
                let seqlen = self.mean_context();
                self.oracle
                    .slowdown(s.infer_steps as f64 / self.steps as f64, frac, bs, seqlen)
            }
            None => 1.0,
        };
        let dur = spec.unit_ms_full(head.micro_batch) / self.oracle.speedup(frac)
            * (1.0 + spec.memory_bound_frac * (contention - 1.0));
        if let Some(w) = self.pool.as_mut().and_then(|p| p.window_mut()) {
            w.set_computing(Some(head.layer_id));
        }
        self.ft.as_mut().expect("checked").running = Some(Unit {
            layer: head.layer_id,
            share,
        });
        self.push(self.now + dur, Ev::UnitEnd);
        self.note(
            "unit",
            format!("layer={} dir={:?} share={frac:.2} ms={dur:.3}", head.layer_id, head.direction),
        );
        Ok(())
    }

    fn end_unit(&mut self) -> Result<()> {
        let now = self.now;
        let horizon = self.horizon;
        let ft = self.ft.as_mut().expect("a unit was running");
        let unit = ft.running.take().expect("a unit was running");
        ft.queue.complete_unit();
        if now <= horizon {
            ft.counted_units += 1;
        }
        if let Some(pool) = self.pool.as_mut() {
            pool.on_layer_complete(unit.layer)?;
        }
        Ok(())
    }

    // ---- transfers -------------------------------------------------------

    fn try_start_transfer(&mut self) -> Result<()> {
        let frozen = self.cfg.model_ft.frozen_bytes_per_layer;
        loop {
            let Some(pool) = self.pool.as_mut() else { return Ok(()) };
            let Some(win) = pool.window_mut() else { return Ok(()) };
            let Some((cmd, done)) = win.start_next(self.now) else { return Ok(()) };
            if cmd.direction == TransferDirection::Prefetch {
                match pool.tensor_alloc_scattered(frozen, cmd.layer) {
                    Ok(pieces) => {
                        let handles = pieces.iter().map(|t| t.handle).collect();
                        self.ft.as_mut().expect("window implies finetune").layer_handles.insert(cmd.layer, handles);
                    }
                    Err(Error::OutOfMemory(_)) => {
                        pool.window_mut().expect("configured").abort_prefetch();
                        self.note("prefetch_oom", format!("layer={}", cmd.layer));
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
            self.metrics.swap_count += 1;
            self.metrics.swap_bytes += frozen;
            self.push(done, Ev::TransferEnd);
            self.note("transfer", format!("layer={} dir={:?}", cmd.layer, cmd.direction));
            return Ok(());
        }
    }

    fn end_transfer(&mut self) -> Result<()> {
        let pool = self.pool.as_mut().expect("transfers need a pool");
        let cmd = pool
            .window_mut()
            .and_then(|w| w.complete())
            .ok_or_else(|| Error::InvalidInput("transfer end without a transfer".into()))?;
        let ft = self.ft.as_mut().expect("window implies finetune");
        if cmd.direction == TransferDirection::Evict {
            for h in ft.layer_handles.remove(&cmd.layer).unwrap_or_default() {
                pool.tensor_free(h)?;
            }
        }
        let head = ft.queue.peek().map(|u| u.layer_id);
        let resumed = ft.stalled_since.is_some() && head.is_some_and(|l| pool.window().is_some_and(|w| w.is_resident(l)));
        if resumed {
            let since = ft.stalled_since.take().expect("stalled");
            self.metrics.stall_ms += self.now - since;
            if self.sched.is_some() {
                if self.step.is_some() {
                    ft.resume_pending = true;
                } else {
                    let standby = self.cfg.standby_seqlen;
                    let s = self.sched.as_mut().expect("checked");
                    let d = s.on_event(self.now, SchedEvent::FinetuneStallEnd { bs: 0, seqlen: standby });
                    self.log_decision(&d.csv_line(self.now));
                    self.note("ft_resume", format!("infer={:.2} ft={:.2}", d.partition.infer_frac(), d.partition.ft_frac()));
                    self.record_sm();
                }
            }
        }
        self.rebalance_window();
        Ok(())
    }

    // ---- records ---------------------------------------------------------

    fn log_decision(&mut self, line: &str) {
        // drop the timestamp so repeated decisions collapse
        let key = line.split_once(',').map_or(line, |(_, rest)| rest);
        if self.last_decision.as_deref() == Some(key) {
            return;
        }
        self.last_decision = Some(key.into());
        self.log.decisions.push((self.now, self.id, line.into()));
    }

    fn record_sm(&mut self) {
        let pair = match &self.sched {
            Some(s) => (s.current().partition.infer_frac(), s.current().partition.ft_frac()),
            None if self.role == Role::FinetuneOnly => (0.0, 1.0),
            None => (self.fixed.infer_frac(), self.fixed.ft_frac()),
        };
        if self.last_sm == Some(pair) {
            return;
        }
        self.last_sm = Some(pair);
        self.metrics.sm_timeline.push(SmSample {
            t_ms: self.now,
            device: self.id,
            infer_frac: pair.0,
            ft_frac: pair.1,
        });
    }

    fn record_mem(&mut self) {
        let Some(pool) = &self.pool else { return };
        let w = pool.window().map_or(0, |w| w.window_layers());
        let key = (pool.kv_chunks(), pool.tensor_chunks(), w);
        if self.last_mem == Some(key) {
            return;
        }
        self.last_mem = Some(key);
        self.metrics.mem_timeline.push(MemSample {
            t_ms: self.now,
            device: self.id,
            kv_chunks: key.0,
            tensor_chunks: key.1,
            window_layers: key.2,
        });
    }
}
