//! Ground-truth latency model standing in for real hardware.
//!
//! A decode step is the slower of its compute time, scaled by the
//! sublinear SM speedup curve, and its HBM traffic time at the bandwidth an
//! SM share can attain. A co-running finetune unit adds traffic in
//! proportion to its SM share; when the combined demand exceeds the HBM
//! capacity both tasks are served proportionally and decode slows by
//! `(f_infer + f_ft) / B`.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};

use crate::domain::{GpuSpec, ModelSpec, SmPartition};
use crate::predictor::{contention_slowdown, ContentionParams};
use crate::{Error, Result};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Relative speed of a task granted a fraction of the SMs; 1 at full SM.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum SpeedupCurve {
    /// `s / (s + gamma * (1 - s))`.
    Hyperbolic { gamma: f64 },
    /// Piecewise linear through `(sm_frac, speedup)` points sorted by share.
    Table { points: Vec<(f64, f64)> },
}

impl SpeedupCurve {
    pub fn eval(&self, s: f64) -> f64 {
        match self {
            SpeedupCurve::Hyperbolic { gamma } => s / (s + gamma * (1.0 - s)),
            SpeedupCurve::Table { points } => {
                let (first, last) = (points[0], points[points.len() - 1]);
                if s <= first.0 {
                    return first.1 * s / first.0;
                }
                if s >= last.0 {
                    return last.1;
                }
                let i = points.partition_point(|p| p.0 <= s);
                let (a, b) = (points[i - 1], points[i]);
                a.1 + (b.1 - a.1) * (s - a.0) / (b.0 - a.0)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SpeedupCurve::Hyperbolic { gamma } if *gamma > 0.0 => Ok(()),
            SpeedupCurve::Table { points } if points.len() >= 2 => {
                let sorted = points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1);
                let last = points[points.len() - 1];
                if sorted && points[0].0 > 0.0 && points[0].1 > 0.0 && (last.0 - 1.0).abs() < 1e-9 && (last.1 - 1.0).abs() < 1e-9 {
                    Ok(())
                } else {
                    Err(Error::InvalidInput(
                        "speedup table must rise through positive points and end at (1, 1)".into(),
                    ))
                }
            }
            _ => Err(Error::InvalidInput("bad speedup curve".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct OracleParams {
    /// Weight bytes every decode step streams from HBM.
    pub weight_bytes_read_per_step: f64,
    pub compute_scale: SpeedupCurve,
    /// Fraction of HBM bandwidth a decode step attains at full SM.
    pub dram_efficiency: f64,
    pub compute_fixed_ms: f64,
    pub compute_per_request_ms: f64,
    pub compute_per_token_ms: f64,
    /// Batches below this size cost the same as this size.
    pub pad_bs: u32,
    /// HBM bytes one finetune unit moves.
    pub ft_bytes_per_unit: f64,
    /// Duration of that unit at full SM.
    pub ft_flops_time_full_sm: f64,
}

impl Default for OracleParams {
    fn default() -> Self {
        Self {
            weight_bytes_read_per_step: 16e9,
            compute_scale: SpeedupCurve::Hyperbolic { gamma: 0.15 },
            dram_efficiency: 0.85,
            compute_fixed_ms: 4.0,
            compute_per_request_ms: 0.05,
            compute_per_token_ms: 3e-5,
            pad_bs: 4,
            ft_bytes_per_unit: 7.3e9,
            ft_flops_time_full_sm: 9.5,
        }
    }
}

impl OracleParams {
    pub fn validate(&self) -> Result<()> {
        self.compute_scale.validate()?;
        let positive = [
            self.weight_bytes_read_per_step,
            self.dram_efficiency,
            self.ft_bytes_per_unit,
            self.ft_flops_time_full_sm,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.dram_efficiency > 1.0 {
            return Err(Error::InvalidInput("oracle byte counts, times and efficiency must be > 0".into()));
        }
        if [self.compute_fixed_ms, self.compute_per_request_ms, self.compute_per_token_ms]
            .iter()
            .any(|v| !(*v >= 0.0))
        {
            return Err(Error::InvalidInput("oracle compute coefficients must be >= 0".into()));
        }
        Ok(())
    }

    /// Finetune HBM demand at full SM, in bytes per second.
    pub fn ft_rate_full(&self) -> f64 {
        self.ft_bytes_per_unit / (self.ft_flops_time_full_sm * 1e-3)
    }
}

/// The oracle bound to one device and inference model.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub params: OracleParams,
    pub gpu: GpuSpec,
    kv_bytes_per_token: f64,
    noise: Option<LogNormal<f64>>,
}

/// One evaluation broken into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeTiming {
    pub solo_ms: f64,
    pub slowdown: f64,
    pub noise: f64,
    pub total_ms: f64,
}

impl Oracle {
    pub fn new(params: OracleParams, gpu: GpuSpec, model: &ModelSpec, noise_sigma: f64) -> Result<Self> {
        params.validate()?;
        gpu.validate()?;
        if !(noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("noise_sigma must be >= 0".into()));
        }
        let noise = if noise_sigma > 0.0 {
            Some(LogNormal::new(0.0, noise_sigma).map_err(|_| Error::InvalidInput("bad noise sigma".into()))?)
        } else {
            None
        };
        Ok(Self {
            params,
            gpu,
            kv_bytes_per_token: model.kv_bytes_per_token() as f64,
            noise,
        })
    }

    pub fn speedup(&self, s: f64) -> f64 {
        self.params.compute_scale.eval(s)
    }

    fn step_bytes(&self, bs_eff: f64, seqlen: f64) -> f64 {
        self.params.weight_bytes_read_per_step + bs_eff * seqlen * self.kv_bytes_per_token
    }

    /// Solo step time at SM share `infer_frac`, noise free.
    pub fn solo_ms(&self, infer_frac: f64, bs: u32, seqlen: u32) -> f64 {
        let p = &self.params;
        let b = bs.max(p.pad_bs) as f64;
        let sl = seqlen as f64;
        let sp = self.speedup(infer_frac);
        let compute = (p.compute_fixed_ms + p.compute_per_request_ms * b + p.compute_per_token_ms * b * sl) / sp;
        let memory = self.step_bytes(b, sl) / (p.dram_efficiency * self.gpu.hbm_bandwidth * sp) * 1e3;
        compute.max(memory)
    }

    /// Contention factor on a step when a finetune unit holds `ft_frac`.
    pub fn slowdown(&self, infer_frac: f64, ft_frac: f64, bs: u32, seqlen: u32) -> f64 {
        if ft_frac <= 0.0 {
            return 1.0;
        }
        let solo = self.solo_ms(infer_frac, bs, seqlen);
        let b = bs.max(self.params.pad_bs) as f64;
        let f_infer = self.step_bytes(b, seqlen as f64) / (solo * 1e-3);
        let f_ft = ft_frac * self.params.ft_rate_full();
        let cap = self.gpu.hbm_bandwidth;
        contention_slowdown(&ContentionParams {
            f_infer: f_infer.min(cap),
            f_ft: f_ft.min(cap),
            capacity: cap,
        })
        .expect("positive capacity")
    }

    pub fn decode<R: Rng + ?Sized>(
        &self,
        bs: u32,
        seqlen: u32,
        partition: SmPartition,
        ft_active: bool,
        rng: &mut R,
    ) -> DecodeTiming {
        let infer = partition.infer_frac();
        let solo_ms = self.solo_ms(infer, bs, seqlen);
        let slowdown = if ft_active {
            self.slowdown(infer, partition.ft_frac(), bs, seqlen)
        } else {
            1.0
        };
        let noise = self.noise.as_ref().map_or(1.0, |d| d.sample(rng));
        DecodeTiming {
            solo_ms,
            slowdown,
            noise,
            total_ms: solo_ms * slowdown * noise,
        }
    }
}

/// Decode step time in ms; see [`Oracle`].
pub fn oracle_decode_ms<R: Rng + ?Sized>(
    oracle: &Oracle,
    bs: u32,
    seqlen: u32,
    partition: SmPartition,
    ft_active: bool,
    rng: &mut R,
) -> f64 {
    oracle.decode(bs, seqlen, partition, ft_active, rng).total_ms
}
