//! Co-location of LLM decode serving and PEFT finetuning on a single GPU.
//!
//! The crate is `no_std` (with `alloc`) and contains everything that is pure
//! computation:
//!
//! - [`domain`]: hardware/model constants and the utilization and warp
//!   occupancy helpers used to argue that decode leaves SMs idle.
//! - [`mempool`]: the two-level block/chunk pool shared by the KV cache and
//!   finetune tensors, the buddy small-tensor pool and the swap window.
//! - [`predictor`]: per-SM-share solo decode latency regression, the
//!   co-location slowdown regression and the bandwidth contention formulas.
//! - [`scheduler`]: SM partition planning under a TPOT target and the
//!   layer-granular finetune work queue.
//! - [`simulator`]: the discrete-event engine and its ground-truth latency
//!   oracle.
//! - [`workload`]: request traces and synthetic generators.
//!
//! File formats, configuration and the command-line driver live in the
//! companion `coloc` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod domain;
mod error;
pub(crate) mod math;
pub mod mempool;
pub mod predictor;
pub mod scheduler;
pub mod simulator;
pub mod workload;

pub use error::{Error, Result};

/// One mebibyte.
pub const MIB: u64 = 1 << 20;
/// One gibibyte.
pub const GIB: u64 = 1 << 30;
/// One kibibyte.
pub const KIB: u64 = 1 << 10;
