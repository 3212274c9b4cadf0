//! Run configuration: one TOML file, then command-line overrides.
//!
//! Every key is optional. Nested tables (`oracle`, `finetune`,
//! `static_split`, `profiles`) fill missing keys from their defaults;
//! `gpu` is either a preset name or a full table.

use std::path::Path;

use coloc_core::domain::{GpuSpec, ModelSpec, QosTarget};
use coloc_core::predictor::DEFAULT_PAD_BS;
use coloc_core::simulator::{FinetuneSpec, Mode, OracleParams, ProfileGrid, SimConfig, StaticSplit};
use coloc_core::workload::SyntheticSpec;
use serde::Deserialize;

use crate::error::{CliError, Result};

pub const DEFAULT_CDF_POINTS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum GpuPreset {
    Ada6000,
    A100,
}

impl GpuPreset {
    pub fn spec(self) -> GpuSpec {
        match self {
            GpuPreset::Ada6000 => GpuSpec::ada6000(),
            GpuPreset::A100 => GpuSpec::a100_40g(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum GpuChoice {
    Preset(GpuPreset),
    Spec(GpuSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TracePreset {
    /// About 1,900 requests over six minutes.
    Bundled,
    /// Light, heavy and medium load, one minute each.
    ThreePhase,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum TraceChoice {
    Preset(TracePreset),
    Spec(SyntheticSpec),
}

/// Seed of the three-phase preset.
pub const THREE_PHASE_SEED: u64 = 7;

impl TraceChoice {
    pub fn spec(&self) -> SyntheticSpec {
        match self {
            TraceChoice::Preset(TracePreset::Bundled) => SyntheticSpec::bundled(),
            TraceChoice::Preset(TracePreset::ThreePhase) => SyntheticSpec::three_phase(THREE_PHASE_SEED),
            TraceChoice::Spec(s) => s.clone(),
        }
    }
}

/// The file as written; absent keys keep the defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub gpu: Option<GpuChoice>,
    pub model_infer: Option<ModelSpec>,
    pub model_ft: Option<ModelSpec>,
    pub tpot_ms: Option<f64>,
    pub mode: Option<Mode>,
    pub noise_sigma: Option<f64>,
    pub seed: Option<u64>,
    pub grid_steps: Option<u16>,
    pub pad_bs: Option<u32>,
    pub devices: Option<u32>,
    pub small_pool_bytes: Option<u64>,
    pub max_batch: Option<u32>,
    pub headroom: Option<f64>,
    pub replan_interval_ms: Option<f64>,
    pub standby_seqlen: Option<u32>,
    pub check_invariants: Option<bool>,
    pub cdf_points: Option<usize>,
    pub oracle: Option<OracleParams>,
    pub finetune: Option<FinetuneSpec>,
    pub static_split: Option<StaticSplit>,
    pub profiles: Option<ProfileGrid>,
    pub trace: Option<TraceChoice>,
}

/// Command-line values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub gpu: Option<GpuPreset>,
    pub mode: Option<Mode>,
    pub seed: Option<u64>,
    pub noise_sigma: Option<f64>,
    pub devices: Option<u32>,
    pub tpot_ms: Option<f64>,
}

/// Everything a command needs, resolved and validated.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub pad_bs: u32,
    pub profiles: ProfileGrid,
    pub trace: TraceChoice,
    pub cdf_points: usize,
}

impl FileConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Format {
            path: path.to_path_buf(),
            msg: e.to_string().trim_end().replace('\n', " "),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(path, &text)
    }

    pub fn resolve(self, o: &Overrides) -> Result<RunConfig> {
        let mut sim = SimConfig::default();
        let gpu = o.gpu.map(GpuChoice::Preset).or(self.gpu);
        if let Some(g) = gpu {
            sim.gpu = match g {
                GpuChoice::Preset(p) => p.spec(),
                GpuChoice::Spec(s) => s,
            };
        }
        macro_rules! set {
            ($($field:ident => $dst:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $dst = v; })*
            };
        }
        set! {
            model_infer => sim.model_infer,
            model_ft => sim.model_ft,
            mode => sim.mode,
            noise_sigma => sim.noise_sigma,
            seed => sim.seed,
            grid_steps => sim.partition_grid_steps,
            devices => sim.devices,
            small_pool_bytes => sim.small_pool_bytes,
            max_batch => sim.max_batch,
            headroom => sim.headroom,
            replan_interval_ms => sim.replan_interval_ms,
            standby_seqlen => sim.standby_seqlen,
            check_invariants => sim.check_invariants,
            oracle => sim.oracle,
            finetune => sim.finetune,
            static_split => sim.static_split,
        }
        let mut tpot = self.tpot_ms.unwrap_or(sim.qos.tpot_ms);
        if let Some(v) = o.mode {
            sim.mode = v;
        }
        if let Some(v) = o.seed {
            sim.seed = v;
        }
        if let Some(v) = o.noise_sigma {
            sim.noise_sigma = v;
        }
        if let Some(v) = o.devices {
            sim.devices = v;
        }
        if let Some(v) = o.tpot_ms {
            tpot = v;
        }
        sim.qos = QosTarget::new(tpot)?;
        sim.validate()?;
        let profiles = self.profiles.unwrap_or_default();
        profiles.validate()?;
        let cdf_points = self.cdf_points.unwrap_or(DEFAULT_CDF_POINTS);
        if cdf_points == 0 {
            return Err(CliError::Config("cdf_points must be >= 1".into()));
        }
        let pad_bs = self.pad_bs.unwrap_or(DEFAULT_PAD_BS);
        if pad_bs == 0 {
            return Err(CliError::Config("pad_bs must be >= 1".into()));
        }
        Ok(RunConfig {
            sim,
            pad_bs,
            profiles,
            trace: self.trace.unwrap_or(TraceChoice::Preset(TracePreset::Bundled)),
            cdf_points,
        })
    }
}
