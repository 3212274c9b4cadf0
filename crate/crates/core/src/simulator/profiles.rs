//! Oracle-generated training profiles for the predictor.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::oracle::Oracle;
use super::SimConfig;
use crate::domain::SmPartition;
use crate::predictor::ProfilePoint;
use crate::{Error, Result};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Which batch sizes and context lengths to profile.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct ProfileGrid {
    pub bs_list: Vec<u32>,
    pub seqlen_max: u32,
    /// Context-length stride of the solo rows.
    pub solo_seqlen_step: u32,
    /// Context-length stride of the co-run rows.
    pub colo_seqlen_step: u32,
}

impl Default for ProfileGrid {
    fn default() -> Self {
        Self {
            bs_list: alloc::vec![4, 16, 64],
            seqlen_max: 2048,
            solo_seqlen_step: 16,
            colo_seqlen_step: 32,
        }
    }
}

impl ProfileGrid {
    pub fn validate(&self) -> Result<()> {
        if self.bs_list.is_empty() || self.bs_list.contains(&0) {
            return Err(Error::InvalidInput("bs_list needs positive batch sizes".into()));
        }
        if self.solo_seqlen_step == 0 || self.colo_seqlen_step == 0 || self.seqlen_max < self.solo_seqlen_step {
            return Err(Error::InvalidInput("seqlen strides must be in 1..=seqlen_max".into()));
        }
        Ok(())
    }

    fn seqlens(&self, step: u32) -> impl Iterator<Item = u32> + '_ {
        (1..=self.seqlen_max / step).map(move |i| i * step)
    }
}

/// Solo rows at every grid share, then co-run rows at every co-located
/// pair, each over `bs_list x seqlens`. Rows come in a fixed order and the
/// noise stream is seeded from `config.seed`.
pub fn generate_profiles(config: &SimConfig, grid: &ProfileGrid) -> Result<Vec<ProfilePoint>> {
    grid.validate()?;
    let oracle = Oracle::new(config.oracle.clone(), config.gpu, &config.model_infer, config.noise_sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let steps = config.partition_grid_steps;
    let mut out = Vec::new();
    let mut emit = |p: SmPartition, ft_active: bool, seq_step: u32, rng: &mut ChaCha8Rng| {
        for &bs in &grid.bs_list {
            for seqlen in grid.seqlens(seq_step) {
                let t = oracle.decode(bs, seqlen, p, ft_active, rng);
                out.push(ProfilePoint {
                    sm_frac: p.infer_frac(),
                    ft_frac: if ft_active { p.ft_frac() } else { 0.0 },
                    bs,
                    seqlen,
                    latency_ms: t.total_ms,
                });
            }
        }
    };
    for infer in 1..=steps {
        emit(SmPartition::new(infer, 0, steps)?, false, grid.solo_seqlen_step, &mut rng);
    }
    for p in SmPartition::colocated(steps) {
        emit(p, true, grid.colo_seqlen_step, &mut rng);
    }
    Ok(out)
}
