//! QoS-guarded SM partitioning and the layer-granular finetune work queue.
//!
//! Every decode step gets a partition from [`Scheduler::on_event`]. The
//! chosen partition maximizes the finetune share among those whose predicted
//! decode latency stays within the target, preferring the one whose latency
//! sits closest to the target. Finetuning runs as non-preemptible layer units
//! of roughly 10 ms at full SM, so a partition change waits at most one unit.

use alloc::format;
use alloc::string::String;

use crate::domain::{QosTarget, SmPartition};
use crate::mempool::Pass;
use crate::predictor::{predict_colo, ColoModel, SoloModel};
use crate::{Error, Result};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Target duration of one finetune unit at full SM.
pub const DEFAULT_UNIT_TARGET_MS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct FinetuneUnit {
    pub layer_id: u32,
    pub direction: UnitDirection,
    pub micro_batch: u32,
    pub est_ms_full_sm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum UnitDirection {
    Forward,
    Backward,
}

impl From<Pass> for UnitDirection {
    fn from(p: Pass) -> Self {
        match p {
            Pass::Forward => UnitDirection::Forward,
            Pass::Backward => UnitDirection::Backward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub enum Reason {
    Steady,
    NewArrival,
    QosRisk,
    FinetuneStall,
    FinetuneResume,
}

impl Reason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Reason::Steady => "steady",
            Reason::NewArrival => "new_arrival",
            Reason::QosRisk => "qos_risk",
            Reason::FinetuneStall => "finetune_stall",
            Reason::FinetuneResume => "finetune_resume",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ScheduleDecision {
    pub partition: SmPartition,
    pub predicted_decode_ms: f64,
    pub finetune_runnable: bool,
    pub reason: Reason,
}

impl ScheduleDecision {
    /// `t_ms,reason,infer_frac,ft_frac,predicted_ms`
    pub fn csv_line(&self, t_ms: f64) -> String {
        format!(
            "{t_ms:.3},{},{:.2},{:.2},{:.3}",
            self.reason.as_str(),
            self.partition.infer_frac(),
            self.partition.ft_frac(),
            self.predicted_decode_ms
        )
    }
}

pub const DECISION_CSV_HEADER: &str = "t_ms,reason,infer_frac,ft_frac,predicted_ms";

/// Largest divisor of `mini_bs` whose unit time `micro_bs * per_sample_ms`
/// fits in `unit_target_ms`; at least 1.
pub fn split_minibatch(mini_bs: u32, per_sample_ms: f64, unit_target_ms: f64) -> u32 {
    (1..=mini_bs.max(1))
        .rev()
        .find(|&m| mini_bs % m == 0 && m as f64 * per_sample_ms <= unit_target_ms)
        .unwrap_or(1)
}

/// Pick the partition for one decode step of `bs` requests at `seqlen`.
///
/// Among grid partitions predicted to meet `qos`, take the largest finetune
/// share, then the latency closest to `qos`, then the smaller inference
/// share. With no feasible co-located partition the answer is all SMs to
/// inference with finetune paused.
pub fn plan_partition(solo: &SoloModel, colo: &ColoModel, bs: u32, seqlen: u32, qos: &QosTarget) -> ScheduleDecision {
    let steps = solo.grid_steps;
    let mut best: Option<(SmPartition, f64)> = None;
    for infer in 1..=steps {
        for ft in 1..=(steps - infer) {
            let p = SmPartition::new(infer, ft, steps).expect("grid partition");
            let Ok(t) = predict_colo(colo, solo, p, bs, seqlen) else {
                continue;
            };
            if t > qos.tpot_ms {
                continue;
            }
            let better = match best {
                None => true,
                Some((b, bt)) => ft > b.ft_steps() || (ft == b.ft_steps() && t > bt),
            };
            if better {
                best = Some((p, t));
            }
        }
    }
    match best {
        Some((partition, t)) => ScheduleDecision {
            partition,
            predicted_decode_ms: t,
            finetune_runnable: true,
            reason: Reason::Steady,
        },
        None => paused(solo, bs, seqlen, Reason::QosRisk),
    }
}

fn paused(solo: &SoloModel, bs: u32, seqlen: u32, reason: Reason) -> ScheduleDecision {
    let partition = SmPartition::full_inference(solo.grid_steps);
    ScheduleDecision {
        partition,
        predicted_decode_ms: solo
            .predict_steps(solo.grid_steps, bs, seqlen)
            .unwrap_or(f64::INFINITY),
        finetune_runnable: false,
        reason,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SchedulerConfig {
    pub qos: QosTarget,
    /// Plans target `qos * headroom` to absorb prediction error.
    pub headroom: f64,
    /// A feasible partition is kept at least this long before the scheduler
    /// moves to one with a larger finetune share.
    pub replan_interval_ms: f64,
}

impl SchedulerConfig {
    pub fn new(qos: QosTarget) -> Self {
        Self {
            qos,
            headroom: 0.9,
            replan_interval_ms: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.headroom > 0.0 && self.headroom <= 1.0) {
            return Err(Error::InvalidInput(format!("headroom {} outside (0, 1]", self.headroom)));
        }
        if !(self.replan_interval_ms >= 0.0) {
            return Err(Error::InvalidInput("replan interval must be >= 0".into()));
        }
        Ok(())
    }

    pub fn effective_qos(&self) -> QosTarget {
        self.qos.scaled(self.headroom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchedEvent {
    DecodeStepStart { bs: u32, seqlen: u32 },
    NewArrival { bs: u32, seqlen: u32 },
    FinetuneStallStart,
    FinetuneStallEnd { bs: u32, seqlen: u32 },
}

/// Event-driven partition state machine.
#[derive(Debug, Clone)]
pub struct Scheduler {
    solo: SoloModel,
    colo: ColoModel,
    cfg: SchedulerConfig,
    current: ScheduleDecision,
    stalled: bool,
    finetune_present: bool,
    last_change_ms: f64,
}

impl Scheduler {
    pub fn new(solo: SoloModel, colo: ColoModel, cfg: SchedulerConfig) -> Result<Self> {
        cfg.validate()?;
        let current = paused(&solo, 0, 0, Reason::Steady);
        Ok(Self {
            solo,
            colo,
            cfg,
            current,
            stalled: false,
            finetune_present: true,
            last_change_ms: f64::NEG_INFINITY,
        })
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    pub fn current(&self) -> &ScheduleDecision {
        &self.current
    }

    pub fn solo(&self) -> &SoloModel {
        &self.solo
    }

    pub fn colo(&self) -> &ColoModel {
        &self.colo
    }

    pub fn is_stalled(&self) -> bool {
        self.stalled
    }

    /// With no finetune job the partition stays at all-inference.
    pub fn set_finetune_present(&mut self, present: bool) {
        self.finetune_present = present;
    }

    pub fn on_event(&mut self, now_ms: f64, event: SchedEvent) -> ScheduleDecision {
        let decision = match event {
            SchedEvent::FinetuneStallStart => {
                self.stalled = true;
                let (bs, seqlen) = (0, 0);
                let mut d = paused(&self.solo, bs, seqlen, Reason::FinetuneStall);
                d.predicted_decode_ms = self.current.predicted_decode_ms.min(d.predicted_decode_ms);
                d
            }
            SchedEvent::FinetuneStallEnd { bs, seqlen } => {
                self.stalled = false;
                let mut d = self.plan(bs, seqlen);
                if d.finetune_runnable {
                    d.reason = Reason::FinetuneResume;
                }
                d
            }
            SchedEvent::DecodeStepStart { bs, seqlen } => self.step(now_ms, bs, seqlen, Reason::Steady),
            SchedEvent::NewArrival { bs, seqlen } => self.step(now_ms, bs, seqlen, Reason::NewArrival),
        };
        if decision.partition != self.current.partition {
            self.last_change_ms = now_ms;
        }
        self.current = decision;
        decision
    }

    fn plan(&self, bs: u32, seqlen: u32) -> ScheduleDecision {
        if !self.finetune_present {
            return paused(&self.solo, bs, seqlen, Reason::Steady);
        }
        plan_partition(&self.solo, &self.colo, bs, seqlen, &self.cfg.effective_qos())
    }

    fn step(&mut self, now_ms: f64, bs: u32, seqlen: u32, reason: Reason) -> ScheduleDecision {
        if self.stalled || !self.finetune_present {
            let r = if self.stalled { Reason::FinetuneStall } else { Reason::Steady };
            return paused(&self.solo, bs, seqlen, r);
        }
        let planned = self.plan(bs, seqlen);
        let cur = self.current.partition;
        if cur.ft_steps() > 0 {
            if let Ok(t) = predict_colo(&self.colo, &self.solo, cur, bs, seqlen) {
                let feasible = t <= self.cfg.effective_qos().tpot_ms;
                let settled = now_ms - self.last_change_ms < self.cfg.replan_interval_ms;
                if feasible && (planned.partition.ft_steps() <= cur.ft_steps() || settled) {
                    return ScheduleDecision {
                        partition: cur,
                        predicted_decode_ms: t,
                        finetune_runnable: true,
                        reason,
                    };
                }
            }
        }
        if planned.finetune_runnable {
            ScheduleDecision { reason, ..planned }
        } else {
            planned
        }
    }
}

/// Forward-then-backward walk over layers, one unit per layer per pass,
/// repeated for every micro-batch of a mini-batch.
#[derive(Debug, Clone)]
pub struct FinetuneQueue {
    layer_count: u32,
    micro_bs: u32,
    micro_batches: u32,
    est_ms_full_sm: f64,
    position: usize,
    micro_idx: u32,
    max_iterations: Option<u64>,
    iterations_done: u64,
    units_done: u64,
}

impl FinetuneQueue {
    pub fn new(layer_count: u32, mini_bs: u32, micro_bs: u32, est_ms_full_sm: f64) -> Result<Self> {
        if layer_count == 0 || micro_bs == 0 || mini_bs % micro_bs != 0 {
            return Err(Error::InvalidInput(format!(
                "micro batch {micro_bs} must divide mini batch {mini_bs}"
            )));
        }
        Ok(Self {
            layer_count,
            micro_bs,
            micro_batches: mini_bs / micro_bs,
            est_ms_full_sm,
            position: 0,
            micro_idx: 0,
            max_iterations: None,
            iterations_done: 0,
            units_done: 0,
        })
    }

    pub fn with_max_iterations(mut self, n: u64) -> Self {
        self.max_iterations = Some(n);
        self
    }

    pub fn micro_bs(&self) -> u32 {
        self.micro_bs
    }

    pub fn units_done(&self) -> u64 {
        self.units_done
    }

    pub fn iterations_done(&self) -> u64 {
        self.iterations_done
    }

    pub fn finished(&self) -> bool {
        self.max_iterations.is_some_and(|n| self.iterations_done >= n)
    }

    /// The unit at the head of the queue, regardless of residency.
    pub fn peek(&self) -> Option<FinetuneUnit> {
        if self.finished() {
            return None;
        }
        let (layer, pass) = crate::mempool::walk_step(self.layer_count, self.position);
        Some(FinetuneUnit {
            layer_id: layer,
            direction: pass.into(),
            micro_batch: self.micro_bs,
            est_ms_full_sm: self.est_ms_full_sm,
        })
    }

    /// The next unit if its layer's frozen weights are resident. `None`
    /// means a stall (or a finished job, see [`FinetuneQueue::finished`]).
    pub fn next_unit(&self, is_resident: impl Fn(u32) -> bool) -> Option<FinetuneUnit> {
        self.peek().filter(|u| is_resident(u.layer_id))
    }

    /// Advance past the head unit.
    pub fn complete_unit(&mut self) {
        self.units_done += 1;
        self.position += 1;
        if self.position == 2 * self.layer_count as usize {
            self.position = 0;
            self.micro_idx += 1;
            if self.micro_idx == self.micro_batches {
                self.micro_idx = 0;
                self.iterations_done += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::SoloCoeffs;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    /// Solo latency falls as 1/share; co-location factor grows with both.
    fn models(c0: f64, b1: f64, k1: f64) -> (SoloModel, ColoModel) {
        let coeffs = (1..=10)
            .map(|s| {
                let f = s as f64 / 10.0;
                SoloCoeffs {
                    sm_frac: f,
                    b0: 0.2 / f,
                    c0: c0 / f.sqrt(),
                    k0: 2e-5 / f,
                }
            })
            .collect();
        (
            SoloModel {
                grid_steps: 10,
                pad_bs: 4,
                coeffs,
            },
            ColoModel { b1, k1 },
        )
    }

    /// Independent brute force: sort all feasible candidates by the stated
    /// preference and take the first.
    fn brute(solo: &SoloModel, colo: &ColoModel, bs: u32, seqlen: u32, qos: f64) -> (u16, u16) {
        let mut cands: Vec<(u16, u16, f64)> = SmPartition::colocated(10)
            .into_iter()
            .map(|p| {
                let base = solo.coeffs[p.infer_steps() as usize - 1].eval(bs.max(4) as f64, seqlen as f64);
                let f = (p.infer_frac() * colo.b1 + p.ft_frac() * colo.k1).max(1.0);
                (p.infer_steps(), p.ft_steps(), f * base)
            })
            .filter(|c| c.2 <= qos)
            .collect();
        cands.sort_by(|a, b| b.1.cmp(&a.1).then(b.2.total_cmp(&a.2)).then(a.0.cmp(&b.0)));
        cands.first().map_or((10, 0), |c| (c.0, c.1))
    }

    #[test]
    fn split_examples() {
        assert_eq!(split_minibatch(16, 5.0, 10.0), 2);
        assert_eq!(split_minibatch(16, 11.0, 10.0), 1);
        assert_eq!(split_minibatch(16, 0.5, 10.0), 16);
        assert_eq!(split_minibatch(12, 2.0, 10.0), 4);
    }

    #[test]
    fn light_load_takes_the_largest_feasible_ft_share() {
        // solo 5/share ms, factor 7.6*ft: (0.5, 0.5) -> 38 ms, (0.4, 0.6) -> 57 ms
        let mut solo = models(1.0, 0.0, 0.0).0;
        for c in solo.coeffs.iter_mut() {
            *c = SoloCoeffs { b0: 0.0, k0: 0.0, c0: 5.0 / c.sm_frac, ..*c };
        }
        let colo = ColoModel { b1: 0.0, k1: 7.6 };
        let d = plan_partition(&solo, &colo, 8, 0, &QosTarget::new(40.0).unwrap());
        assert_eq!((d.partition.infer_steps(), d.partition.ft_steps()), (5, 5));
        assert!((d.predicted_decode_ms - 38.0).abs() < 1e-9);
        assert!(d.finetune_runnable);
    }

    #[test]
    fn tie_on_ft_picks_latency_nearest_qos() {
        // base falls with share; factor 1: at ft=0.1 the candidates differ
        // only in infer share, and the slowest feasible one wins
        let mut solo = models(1.0, 0.0, 0.0).0;
        for (i, c) in solo.coeffs.iter_mut().enumerate() {
            *c = SoloCoeffs { b0: 0.0, k0: 0.0, c0: 30.0 + (8.0 - i as f64) * 4.5, ..*c };
        }
        // infer 0.9 -> 30.0 ms, infer 0.8 -> 34.5, 0.7 -> 39, 0.6 -> 43.5
        let colo = ColoModel { b1: 0.0, k1: 0.0 };
        let d = plan_partition(&solo, &colo, 4, 0, &QosTarget::new(40.0).unwrap());
        // ft=0.3 allows infer <= 0.7, and 0.7 is the only feasible one there
        assert_eq!((d.partition.infer_steps(), d.partition.ft_steps()), (7, 3));
        assert!((d.predicted_decode_ms - 39.0).abs() < 1e-9);
    }

    #[test]
    fn overload_pauses_finetune() {
        let (solo, colo) = models(20.0, 1.0, 0.5);
        let d = plan_partition(&solo, &colo, 64, 2048, &QosTarget::new(5.0).unwrap());
        assert!(!d.finetune_runnable);
        assert_eq!(d.reason, Reason::QosRisk);
        assert_eq!(d.partition, SmPartition::full_inference(10));
    }

    #[test]
    fn stall_reclaims_everything_then_resumes() {
        let (solo, colo) = models(3.0, 1.0, 0.5);
        let mut s = Scheduler::new(solo, colo, SchedulerConfig::new(QosTarget::new(40.0).unwrap())).unwrap();
        let d = s.on_event(0.0, SchedEvent::DecodeStepStart { bs: 8, seqlen: 256 });
        assert!(d.finetune_runnable && d.partition.ft_steps() > 0);
        let d = s.on_event(1.0, SchedEvent::FinetuneStallStart);
        assert_eq!(d.partition, SmPartition::full_inference(10));
        assert_eq!(d.reason, Reason::FinetuneStall);
        let d = s.on_event(2.0, SchedEvent::DecodeStepStart { bs: 8, seqlen: 256 });
        assert_eq!(d.partition, SmPartition::full_inference(10));
        let d = s.on_event(3.0, SchedEvent::FinetuneStallEnd { bs: 8, seqlen: 256 });
        assert_eq!(d.reason, Reason::FinetuneResume);
        assert!(d.partition.ft_steps() > 0);
    }

    #[test]
    fn arrival_that_breaks_qos_moves_to_more_inference() {
        let (solo, colo) = models(3.0, 1.0, 0.5);
        let mut s = Scheduler::new(solo.clone(), colo, SchedulerConfig::new(QosTarget::new(40.0).unwrap())).unwrap();
        let light = s.on_event(0.0, SchedEvent::DecodeStepStart { bs: 4, seqlen: 256 });
        let heavy = s.on_event(1.0, SchedEvent::NewArrival { bs: 64, seqlen: 1500 });
        let q = s.config().effective_qos().tpot_ms;
        assert!(predict_colo(&colo, &solo, light.partition, 64, 1500).unwrap() > q);
        assert!(heavy.predicted_decode_ms <= q || !heavy.finetune_runnable);
        assert!(heavy.partition.infer_steps() > light.partition.infer_steps());
        assert_eq!(heavy.reason, Reason::NewArrival);
    }

    #[test]
    fn unchanged_state_is_idempotent() {
        let (solo, colo) = models(3.0, 1.0, 0.5);
        let mut s = Scheduler::new(solo, colo, SchedulerConfig::new(QosTarget::new(40.0).unwrap())).unwrap();
        let a = s.on_event(0.0, SchedEvent::DecodeStepStart { bs: 16, seqlen: 512 });
        for t in 1..500 {
            let b = s.on_event(t as f64, SchedEvent::DecodeStepStart { bs: 16, seqlen: 512 });
            assert_eq!(a.partition, b.partition);
        }
    }

    #[test]
    fn no_finetune_pins_full_inference() {
        let (solo, colo) = models(3.0, 1.0, 0.5);
        let mut s = Scheduler::new(solo, colo, SchedulerConfig::new(QosTarget::new(40.0).unwrap())).unwrap();
        s.set_finetune_present(false);
        for bs in [1, 8, 64] {
            let d = s.on_event(0.0, SchedEvent::DecodeStepStart { bs, seqlen: 100 });
            assert_eq!(d.partition, SmPartition::full_inference(10));
            assert!(!d.finetune_runnable);
        }
    }

    #[test]
    fn decision_line_format() {
        let d = ScheduleDecision {
            partition: SmPartition::new(6, 4, 10).unwrap(),
            predicted_decode_ms: 31.25,
            finetune_runnable: true,
            reason: Reason::NewArrival,
        };
        assert_eq!(d.csv_line(12.5), "12.500,new_arrival,0.60,0.40,31.250");
    }

    #[test]
    fn queue_walks_forward_then_backward() {
        let mut q = FinetuneQueue::new(4, 4, 2, 9.0).unwrap().with_max_iterations(1);
        let mut seen = Vec::new();
        while let Some(u) = q.next_unit(|_| true) {
            seen.push((u.layer_id, u.direction));
            q.complete_unit();
        }
        use UnitDirection::*;
        let one = [
            (0, Forward),
            (1, Forward),
            (2, Forward),
            (3, Forward),
            (3, Backward),
            (2, Backward),
            (1, Backward),
            (0, Backward),
        ];
        assert_eq!(seen.len(), 16);
        assert_eq!(&seen[..8], &one);
        assert_eq!(&seen[8..], &one);
        assert!(q.finished());
    }

    #[test]
    fn non_resident_layer_stalls() {
        let mut q = FinetuneQueue::new(32, 16, 2, 9.0).unwrap();
        assert_eq!(q.next_unit(|l| l == 0).unwrap().layer_id, 0);
        q.complete_unit();
        q.complete_unit();
        assert!(q.next_unit(|l| l != 2).is_none());
        assert_eq!(q.peek().unwrap().layer_id, 2);
    }

    proptest! {
        #[test]
        fn plan_matches_brute_force(
            bs in 1u32..96, seqlen in 0u32..4096,
            c0 in 0.5f64..8.0, b1 in 0.3f64..1.5, k1 in 0.0f64..1.5, qos in 5.0f64..80.0,
        ) {
            let (solo, colo) = models(c0, b1, k1);
            let d = plan_partition(&solo, &colo, bs, seqlen, &QosTarget::new(qos).unwrap());
            let (i, f) = brute(&solo, &colo, bs, seqlen, qos);
            prop_assert_eq!((d.partition.infer_steps(), d.partition.ft_steps()), (i, f));
            if d.finetune_runnable {
                prop_assert!(d.predicted_decode_ms <= qos);
            }
        }
    }
}
