//! Subcommand bodies. They return bytes and reports; writing files and
//! printing is the caller's job, which keeps them testable in memory.

use coloc_core::predictor::{colo_residuals, fit_colo, fit_solo_with, solo_residuals, ProfilePoint};
use coloc_core::simulator::{generate_profiles, run, Mode, Models, SimOutput};
use coloc_core::workload::{synth_trace, Request};

use crate::config::{RunConfig, TraceChoice};
use crate::error::{CliError, Result};
use crate::formats::{profiles_csv, trace_csv, ModelFile, Residuals};
use crate::report::{comparison_table, run_artifacts, Artifacts, RunReport};

pub fn gen_trace(trace: &TraceChoice, seed: Option<u64>) -> Result<(Vec<Request>, Vec<u8>)> {
    let mut spec = trace.spec();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let reqs = synth_trace(&spec)?;
    let bytes = trace_csv(&reqs);
    Ok((reqs, bytes))
}

pub fn gen_profiles(rc: &RunConfig) -> Result<(Vec<ProfilePoint>, Vec<u8>)> {
    let rows = generate_profiles(&rc.sim, &rc.profiles)?;
    let bytes = profiles_csv(&rows);
    Ok((rows, bytes))
}

/// Fit both stages. Without co-run rows the co-run model is left out and
/// a warning is returned.
pub fn fit(rc: &RunConfig, points: &[ProfilePoint]) -> Result<(ModelFile, Vec<String>)> {
    let solo = fit_solo_with(points, rc.sim.partition_grid_steps, rc.pad_bs)?;
    let solo_res = solo_residuals(&solo, points)?;
    let mut warnings = Vec::new();
    let has_colo = points.iter().any(|p| p.ft_frac > 0.0);
    let (colo, colo_res) = if has_colo {
        let c = fit_colo(points, &solo)?;
        let r = colo_residuals(&c, &solo, points)?;
        (Some(c), Some(r))
    } else {
        warnings.push("profiles have no co-run rows; the co-run model is omitted".to_string());
        (None, None)
    };
    let model = ModelFile {
        solo,
        colo,
        residuals: Residuals {
            solo: solo_res,
            colo: colo_res,
        },
    };
    Ok((model, warnings))
}

/// Fit on profiles generated from the configured oracle.
pub fn fit_from_oracle(rc: &RunConfig) -> Result<ModelFile> {
    let (rows, _) = gen_profiles(rc)?;
    Ok(fit(rc, &rows)?.0)
}

fn models_of(m: &ModelFile) -> Option<Models<'_>> {
    m.colo.as_ref().map(|colo| Models { solo: &m.solo, colo })
}

fn run_mode(rc: &RunConfig, mode: Mode, trace: &[Request], models: &ModelFile) -> Result<(RunReport, SimOutput)> {
    let mut cfg = rc.sim.clone();
    cfg.mode = mode;
    let m = models_of(models);
    if mode == Mode::Adaptive && m.is_none() {
        return Err(CliError::Config(
            "adaptive mode needs a co-run model and the model file has none".into(),
        ));
    }
    let out = run(&cfg, trace, m)?;
    Ok((RunReport::new(&cfg, &out), out))
}

pub struct SimulateOutput {
    pub report: RunReport,
    pub output: SimOutput,
    pub artifacts: Artifacts,
}

/// Run the configured mode, and the baseline mode too when one is named.
pub fn simulate(rc: &RunConfig, trace: &[Request], models: &ModelFile, baseline: Option<Mode>) -> Result<SimulateOutput> {
    let (mut report, output) = run_mode(rc, rc.sim.mode, trace, models)?;
    if let Some(b) = baseline {
        let (base, _) = run_mode(rc, b, trace, models)?;
        report.set_baseline(&base);
    }
    let artifacts = run_artifacts(&report, &output, rc.cdf_points);
    Ok(SimulateOutput {
        report,
        output,
        artifacts,
    })
}

pub struct CompareOutput {
    /// Adaptive, static, separate.
    pub reports: Vec<RunReport>,
    pub table: String,
    pub artifacts: Artifacts,
}

/// All three modes on the same trace and seed, each in its own thread.
/// The adaptive report's baseline is the stronger of the other two.
pub fn compare(rc: &RunConfig, trace: &[Request], models: &ModelFile) -> Result<CompareOutput> {
    let runs: Vec<Result<(RunReport, SimOutput)>> = std::thread::scope(|s| {
        let handles: Vec<_> = Mode::ALL
            .iter()
            .map(|&mode| s.spawn(move || run_mode(rc, mode, trace, models)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread")).collect()
    });
    let mut runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let best_base = runs[1..]
        .iter()
        .map(|(r, _)| r.clone())
        .max_by(|a, b| a.finetune_throughput.total_cmp(&b.finetune_throughput))
        .expect("two baselines");
    runs[0].0.set_baseline(&best_base);
    let reports: Vec<RunReport> = runs.iter().map(|(r, _)| r.clone()).collect();
    let (table, table_csv) = comparison_table(&reports);
    let mut artifacts: Artifacts = vec![
        ("compare.csv".into(), table_csv),
        ("compare.json".into(), {
            let mut v = serde_json::to_vec_pretty(&reports).expect("reports serialize");
            v.push(b'\n');
            v
        }),
    ];
    for (report, out) in &runs {
        for (name, bytes) in run_artifacts(report, out, rc.cdf_points) {
            artifacts.push((format!("{}/{name}", report.mode.as_str()), bytes));
        }
    }
    Ok(CompareOutput {
        reports,
        table,
        artifacts,
    })
}
