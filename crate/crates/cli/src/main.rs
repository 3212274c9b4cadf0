use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coloc::commands;
use coloc::config::{FileConfig, GpuPreset, Overrides, RunConfig, TraceChoice, TracePreset};
use coloc::formats::{load_profiles, load_trace, write_file, ModelFile};
use coloc::report::Artifacts;
use coloc::{CliError, Result};
use coloc_core::simulator::Mode;
use coloc_core::workload::{trace_stats, Request};

#[derive(Parser)]
#[command(name = "coloc", version, about = "Co-located decode serving and PEFT finetuning simulator")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    gpu: Option<GpuPreset>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Multiplicative Gaussian noise on oracle latencies (sigma).
    #[arg(long, global = true)]
    noise: Option<f64>,
    #[arg(long, global = true)]
    devices: Option<u32>,
    #[arg(long, global = true)]
    tpot_ms: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Adaptive,
    Static,
    Separate,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Adaptive => Mode::Adaptive,
            ModeArg::Static => Mode::StaticMode,
            ModeArg::Separate => Mode::SeparateMode,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic request trace.
    GenTrace {
        /// Defaults to the config's `trace`, else the bundled preset.
        #[arg(long, value_enum)]
        preset: Option<TracePreset>,
        /// Override the trace generator seed.
        #[arg(long)]
        trace_seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write oracle-generated decode latency profiles.
    GenProfiles {
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the latency predictor on a profile table.
    Fit {
        #[arg(long)]
        profiles: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one mode and write its report and timelines.
    Simulate {
        #[command(flatten)]
        inputs: RunInputs,
        /// Also run this mode and report the gain over it.
        #[arg(long, value_enum)]
        baseline: Option<ModeArg>,
    },
    /// Run all three modes on the same trace and seed.
    Compare {
        #[command(flatten)]
        inputs: RunInputs,
    },
}

#[derive(Args)]
struct RunInputs {
    /// Request trace CSV; defaults to the config's synthetic trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Fitted model file; defaults to fitting on oracle profiles.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn resolve(g: &GlobalArgs) -> Result<RunConfig> {
    let file = match &g.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    file.resolve(&Overrides {
        gpu: g.gpu,
        mode: g.mode.map(Mode::from),
        seed: g.seed,
        noise_sigma: g.noise,
        devices: g.devices,
        tpot_ms: g.tpot_ms,
    })
}

fn load_inputs(rc: &RunConfig, inputs: &RunInputs) -> Result<(Vec<Request>, ModelFile)> {
    let trace = match &inputs.trace {
        Some(p) => load_trace(p)?,
        None => commands::gen_trace(&rc.trace, None)?.0,
    };
    let s = trace_stats(&trace);
    log::info!(
        "trace: {} requests over {:.1} s, mean prompt {:.1}, mean output {:.1}",
        s.count,
        s.span_ms / 1e3,
        s.mean_prompt,
        s.mean_output
    );
    let models = match &inputs.models {
        Some(p) => ModelFile::load(p)?,
        None => {
            log::info!("no model file given; fitting on oracle profiles");
            commands::fit_from_oracle(rc)?
        }
    };
    Ok((trace, models))
}

fn write_all(dir: &Path, files: &Artifacts) -> Result<()> {
    for (name, bytes) in files {
        write_file(&dir.join(name), bytes)?;
    }
    Ok(())
}

fn print(bytes: &[u8]) -> Result<()> {
    std::io::stdout()
        .write_all(bytes)
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn execute(cli: Cli) -> Result<()> {
    let rc = resolve(&cli.global)?;
    match cli.cmd {
        Cmd::GenTrace { preset, trace_seed, out } => {
            let choice = preset.map(TraceChoice::Preset).unwrap_or(rc.trace);
            let (reqs, bytes) = commands::gen_trace(&choice, trace_seed)?;
            write_file(&out, &bytes)?;
            log::info!("wrote {} requests to {}", reqs.len(), out.display());
        }
        Cmd::GenProfiles { out } => {
            let (rows, bytes) = commands::gen_profiles(&rc)?;
            write_file(&out, &bytes)?;
            log::info!("wrote {} profile rows to {}", rows.len(), out.display());
        }
        Cmd::Fit { profiles, out } => {
            let points = load_profiles(&profiles)?;
            let (model, warnings) = commands::fit(&rc, &points)?;
            for w in &warnings {
                log::warn!("{w}");
            }
            write_file(&out, model.to_toml().as_bytes())?;
            let mut summary = serde_json::to_vec_pretty(&model.residuals).expect("residuals serialize");
            summary.push(b'\n');
            print(&summary)?;
        }
        Cmd::Simulate { inputs, baseline } => {
            let (trace, models) = load_inputs(&rc, &inputs)?;
            let out = commands::simulate(&rc, &trace, &models, baseline.map(Mode::from))?;
            write_all(&inputs.out_dir, &out.artifacts)?;
            print(&out.report.to_json())?;
        }
        Cmd::Compare { inputs } => {
            let (trace, models) = load_inputs(&rc, &inputs)?;
            let out = commands::compare(&rc, &trace, &models)?;
            write_all(&inputs.out_dir, &out.artifacts)?;
            print(out.table.as_bytes())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("bad arguments").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": { "kind": "usage", "message": first } }));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::FAILURE
        }
    }
}

