//! Request traces and seeded synthetic generators.

use alloc::format;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::{Error, Result};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// One decode request. Prefill happens upstream; the request needs
/// `prompt_tokens` of KV on arrival and grows by one token per step.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Request {
    pub arrival_ms: f64,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

impl Request {
    pub fn total_tokens(&self) -> u32 {
        self.prompt_tokens + self.output_tokens
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum LengthDist {
    Fixed { value: u32 },
    /// Inclusive on both ends.
    Uniform { min: u32, max: u32 },
    Discrete { values: Vec<u32>, weights: Vec<f64> },
}

impl LengthDist {
    fn validate(&self, what: &str) -> Result<()> {
        let bad = match self {
            LengthDist::Fixed { value } => *value == 0,
            LengthDist::Uniform { min, max } => *min == 0 || min > max,
            LengthDist::Discrete { values, weights } => {
                values.is_empty()
                    || values.len() != weights.len()
                    || values.contains(&0)
                    || WeightedIndex::new(weights).is_err()
            }
        };
        if bad {
            return Err(Error::InvalidInput(format!("bad {what} length distribution {self:?}")));
        }
        Ok(())
    }

    fn sampler(&self) -> Sampler<'_> {
        match self {
            LengthDist::Fixed { value } => Sampler::Fixed(*value),
            LengthDist::Uniform { min, max } => Sampler::Uniform(*min, *max),
            LengthDist::Discrete { values, weights } => {
                Sampler::Discrete(values, WeightedIndex::new(weights).expect("validated"))
            }
        }
    }
}

enum Sampler<'a> {
    Fixed(u32),
    Uniform(u32, u32),
    Discrete(&'a [u32], WeightedIndex<f64>),
}

impl Sampler<'_> {
    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        match self {
            Sampler::Fixed(v) => *v,
            Sampler::Uniform(lo, hi) => rng.random_range(*lo..=*hi),
            Sampler::Discrete(values, idx) => values[idx.sample(rng)],
        }
    }
}

/// A stretch of constant arrival rate.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Phase {
    pub duration_s: f64,
    pub rate_rps: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SyntheticSpec {
    pub phases: Vec<Phase>,
    pub prompt: LengthDist,
    pub output: LengthDist,
    /// Requests with prompt + output above this are resampled.
    pub max_total_tokens: u32,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Single-phase Poisson spec with the default length mix.
    pub fn poisson(rate_rps: f64, duration_s: f64, seed: u64) -> Self {
        Self {
            phases: alloc::vec![Phase { duration_s, rate_rps }],
            prompt: LengthDist::Uniform { min: 64, max: 1024 },
            output: LengthDist::Uniform { min: 32, max: 320 },
            max_total_tokens: 2048,
            seed,
        }
    }

    /// The bundled trace: about 1,900 requests over six minutes.
    pub fn bundled() -> Self {
        Self::poisson(5.3, 360.0, 2024)
    }

    /// Light, then heavy, then medium load, one minute each.
    pub fn three_phase(seed: u64) -> Self {
        Self {
            phases: alloc::vec![
                Phase { duration_s: 60.0, rate_rps: 1.2 },
                Phase { duration_s: 60.0, rate_rps: 6.5 },
                Phase { duration_s: 60.0, rate_rps: 3.6 },
            ],
            ..Self::poisson(1.0, 1.0, seed)
        }
    }

    pub fn duration_ms(&self) -> f64 {
        self.phases.iter().map(|p| p.duration_s).sum::<f64>() * 1e3
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::InvalidInput("synthetic trace needs at least one phase".into()));
        }
        for p in &self.phases {
            if !(p.rate_rps > 0.0 && p.duration_s > 0.0) {
                return Err(Error::InvalidInput(format!("phase {p:?} needs rate > 0 and duration > 0")));
            }
        }
        self.prompt.validate("prompt")?;
        self.output.validate("output")?;
        let min_total = min_len(&self.prompt) + min_len(&self.output);
        if min_total > self.max_total_tokens {
            return Err(Error::InvalidInput(format!(
                "shortest request ({min_total} tokens) exceeds max_total_tokens {}",
                self.max_total_tokens
            )));
        }
        Ok(())
    }
}

fn min_len(d: &LengthDist) -> u32 {
    match d {
        LengthDist::Fixed { value } => *value,
        LengthDist::Uniform { min, .. } => *min,
        LengthDist::Discrete { values, .. } => values.iter().copied().min().unwrap_or(0),
    }
}

/// Where a trace comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceSpec<P> {
    File(P),
    Synthetic(SyntheticSpec),
}

/// Poisson arrivals phase by phase; each phase restarts its clock at the
/// phase boundary, which is exact for a memoryless process.
pub fn synth_trace(spec: &SyntheticSpec) -> Result<Vec<Request>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prompt = spec.prompt.sampler();
    let output = spec.output.sampler();
    let mut out = Vec::new();
    let mut phase_start = 0.0;
    for phase in &spec.phases {
        let gap = Exp::new(phase.rate_rps / 1e3).expect("positive rate");
        let end = phase_start + phase.duration_s * 1e3;
        let mut t = phase_start;
        loop {
            t += gap.sample(&mut rng);
            if t >= end {
                break;
            }
            let (p, o) = loop {
                let p = prompt.sample(&mut rng);
                let o = output.sample(&mut rng);
                if p + o <= spec.max_total_tokens {
                    break (p, o);
                }
            };
            out.push(Request {
                arrival_ms: t,
                prompt_tokens: p,
                output_tokens: o,
            });
        }
        phase_start = end;
    }
    Ok(out)
}

/// Check field invariants and sort by arrival (stable).
pub fn normalize_trace(mut reqs: Vec<Request>) -> Result<Vec<Request>> {
    for (i, r) in reqs.iter().enumerate() {
        if r.output_tokens == 0 {
            return Err(Error::InvalidInput(format!("request {i}: output_tokens must be >= 1")));
        }
        if !(r.arrival_ms >= 0.0) || !r.arrival_ms.is_finite() {
            return Err(Error::InvalidInput(format!("request {i}: bad arrival {}", r.arrival_ms)));
        }
    }
    reqs.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms));
    Ok(reqs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TraceStats {
    pub count: usize,
    pub span_ms: f64,
    pub mean_prompt: f64,
    pub mean_output: f64,
}

pub fn trace_stats(reqs: &[Request]) -> TraceStats {
    let n = reqs.len().max(1) as f64;
    TraceStats {
        count: reqs.len(),
        span_ms: reqs.last().map_or(0.0, |r| r.arrival_ms),
        mean_prompt: reqs.iter().map(|r| r.prompt_tokens as f64).sum::<f64>() / n,
        mean_output: reqs.iter().map(|r| r.output_tokens as f64).sum::<f64>() / n,
    }
}

/// One step of a small-tensor allocation replay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmallOp {
    Alloc { id: u32, bytes: u64 },
    Free { id: u32 },
}

/// Mixed small-tensor traffic: adapter weights and gradients (tens of KiB),
/// optimizer states and norms (a few KiB) and activation slices (hundreds
/// of KiB up to 2 MiB), with log-uniform sizes and at most `max_live`
/// tensors alive.
pub fn small_tensor_replay(ops: usize, max_live: usize, seed: u64) -> Vec<SmallOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut live: Vec<u32> = Vec::new();
    let mut next = 0u32;
    let mut out = Vec::with_capacity(ops);
    let classes: [(f64, f64); 3] = [(1e3, 8e3), (16e3, 128e3), (256e3, 2.0 * 1024.0 * 1024.0)];
    let pick = WeightedIndex::new([3.0, 5.0, 2.0]).expect("constant weights");
    while out.len() < ops {
        let grow = live.is_empty() || (live.len() < max_live && rng.random_bool(0.55));
        if grow {
            let (lo, hi) = classes[pick.sample(&mut rng)];
            let ln = rng.random_range(libm::log(lo)..libm::log(hi));
            let bytes = (libm::exp(ln) as u64).max(1);
            out.push(SmallOp::Alloc { id: next, bytes });
            live.push(next);
            next += 1;
        } else {
            let i = rng.random_range(0..live.len());
            out.push(SmallOp::Free { id: live.swap_remove(i) });
        }
    }
    out
}
