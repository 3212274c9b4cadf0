//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so every line reaches the output; the
//! process exits nonzero if any criterion fails. Tolerances are the
//! constants below.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::{BTreeMap, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use coloc::commands;
use coloc::config::{FileConfig, Overrides, RunConfig};
use coloc::formats::{parse_trace, ModelFile};
use coloc::BUNDLED_TRACE;
use coloc_core::domain::{GpuSpec, QosTarget, SmPartition};
use coloc_core::mempool::buddy::SmallPool;
use coloc_core::predictor::{
    colo_residuals, contention_slowdown, fit_colo, fit_solo, solo_residuals, ColoModel,
    ContentionParams, ProfilePoint, SoloCoeffs, SoloModel,
};
use coloc_core::scheduler::plan_partition;
use coloc_core::simulator::{generate_profiles, run, Mode, Models, ProfileGrid, SimConfig};
use coloc_core::workload::{small_tensor_replay, synth_trace, Request, SmallOp, SyntheticSpec};
use coloc_core::{GIB, KIB};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROFILE_NOISE: f64 = 0.01;
const SOLO_MAPE_MAX: f64 = 0.03;
const SOLO_MAX_APE_MAX: f64 = 0.06;
const COLO_MAPE_MAX: f64 = 0.05;
const CONTENTION_SLICES: usize = 10_000;
const CONTENTION_TRIPLES: usize = 100;
const CONTENTION_REL_TOL: f64 = 0.01;
const PLAN_STATES: usize = 1000;
const NOISY_VIOLATION_RATE_MAX: f64 = 0.001;
const ALLOC_OPS: usize = 100_000;
const SMALL_FRAG_MAX_BYTES: u64 = 100_000_000;
const SMALL_REPLAY_LIVE: usize = 1024;

type Outcome = Result<String, String>;

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Outcome); 8] = [
        (1, "predictor accuracy", Duration::from_secs(30), predictor_accuracy),
        (2, "contention oracle equivalence", Duration::from_secs(5), contention_equivalence),
        (3, "scheduler optimality", Duration::from_secs(5), scheduler_optimality),
        (4, "QoS safety", Duration::from_secs(120), qos_safety),
        (5, "directional throughput", Duration::from_secs(300), directional_throughput),
        (6, "allocator suite", Duration::from_secs(30), allocator_suite),
        (7, "window under load phases", Duration::from_secs(60), window_scenario),
        (8, "determinism", Duration::from_secs(300), determinism),
    ];
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let took = start.elapsed();
        let res = match res {
            Ok(d) if took > limit => Err(format!("{d}; took {took:.1?} > {limit:?}")),
            r => r,
        };
        match res {
            Ok(d) => println!("[PASS] criterion {n} {name}: {d} ({:.1}s)", took.as_secs_f64()),
            Err(d) => {
                failed += 1;
                println!("[FAIL] criterion {n} {name}: {d} ({:.1}s)", took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bundled() -> Vec<Request> {
    parse_trace(Path::new("bundled_trace.csv"), BUNDLED_TRACE).expect("bundled trace parses")
}

fn fitted(cfg: &SimConfig) -> (SoloModel, ColoModel) {
    let rows = generate_profiles(cfg, &ProfileGrid::default()).unwrap();
    let solo = fit_solo(&rows).unwrap();
    let colo = fit_colo(&rows, &solo).unwrap();
    (solo, colo)
}

// ---- 1 -------------------------------------------------------------------

/// Fit on three rows in four, score on the fourth, on both presets.
fn predictor_accuracy() -> Outcome {
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for gpu in [GpuSpec::ada6000(), GpuSpec::a100_40g()] {
        let cfg = SimConfig {
            gpu,
            noise_sigma: PROFILE_NOISE,
            ..SimConfig::default()
        };
        let rows = generate_profiles(&cfg, &ProfileGrid::default()).unwrap();
        let (train, test): (Vec<(usize, ProfilePoint)>, Vec<(usize, ProfilePoint)>) =
            rows.into_iter().enumerate().partition(|(i, _)| i % 4 != 3);
        let train: Vec<ProfilePoint> = train.into_iter().map(|(_, p)| p).collect();
        let test: Vec<ProfilePoint> = test.into_iter().map(|(_, p)| p).collect();
        let solo = fit_solo(&train).map_err(|e| e.to_string())?;
        let colo = fit_colo(&train, &solo).map_err(|e| e.to_string())?;
        let s = solo_residuals(&solo, &test).unwrap();
        let c = colo_residuals(&colo, &solo, &test).unwrap();
        if s.points == 0 || c.points == 0 {
            return Err("empty held-out set".into());
        }
        worst = (worst.0.max(s.mape), worst.1.max(s.max_ape), worst.2.max(c.mape));
    }
    check(
        worst.0 <= SOLO_MAPE_MAX && worst.1 <= SOLO_MAX_APE_MAX && worst.2 <= COLO_MAPE_MAX,
        format!(
            "held-out solo MAPE {:.2}% (<= {:.0}%), solo max {:.2}% (<= {:.0}%), co-run MAPE {:.2}% (<= {:.0}%)",
            worst.0 * 100.0,
            SOLO_MAPE_MAX * 100.0,
            worst.1 * 100.0,
            SOLO_MAX_APE_MAX * 100.0,
            worst.2 * 100.0,
            COLO_MAPE_MAX * 100.0
        ),
    )
}

// ---- 2 -------------------------------------------------------------------

/// Time for inference to move the bytes it would move in one unit of time
/// alone, while finetuning streams without end. Each slice splits the
/// slice capacity in proportion to the two demand rates; the finish is
/// interpolated inside the last slice.
fn sliced_slowdown(f_infer: f64, f_ft: f64, cap: f64) -> f64 {
    let horizon = 1.0 + (f_infer + f_ft) / cap;
    let dt = horizon / CONTENTION_SLICES as f64;
    let mut left = f_infer;
    for k in 0..CONTENTION_SLICES {
        let want_i = f_infer * dt;
        let want_f = f_ft * dt;
        let c = cap * dt;
        let got_i = if want_i + want_f <= c {
            want_i
        } else {
            c * want_i / (want_i + want_f)
        };
        if got_i >= left {
            return (k as f64 + left / got_i) * dt;
        }
        left -= got_i;
    }
    f64::INFINITY
}

fn contention_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut contended = 0;
    for _ in 0..CONTENTION_TRIPLES {
        let cap = rng.random_range(500e9..2000e9);
        let p = ContentionParams {
            f_infer: rng.random_range(1e9..1.5 * cap),
            f_ft: rng.random_range(0.0..1.5 * cap),
            capacity: cap,
        };
        let model = contention_slowdown(&p).map_err(|e| e.to_string())?;
        let sim = sliced_slowdown(p.f_infer, p.f_ft, cap);
        worst = worst.max((model - sim).abs() / sim);
        contended += (model > 1.0) as usize;
    }
    check(
        worst <= CONTENTION_REL_TOL && contended > 0,
        format!(
            "{CONTENTION_TRIPLES} triples ({contended} contended), worst relative gap {:.2e} vs {CONTENTION_SLICES}-slice simulation (<= {CONTENTION_REL_TOL})",
            worst
        ),
    )
}

// ---- 3 -------------------------------------------------------------------

fn random_models(rng: &mut ChaCha8Rng) -> (SoloModel, ColoModel) {
    let gamma = rng.random_range(0.05..1.0);
    let (b0, c0, k0) = (
        rng.random_range(0.0..0.2),
        rng.random_range(2.0..20.0),
        rng.random_range(0.0..4e-4),
    );
    let coeffs = (1..=10)
        .map(|s| {
            let f = s as f64 / 10.0;
            let slow = (f + gamma * (1.0 - f)) / f;
            SoloCoeffs {
                sm_frac: f,
                b0: b0 * slow * rng.random_range(0.95..1.05),
                c0: c0 * slow * rng.random_range(0.95..1.05),
                k0: k0 * slow * rng.random_range(0.95..1.05),
            }
        })
        .collect();
    let solo = SoloModel {
        grid_steps: 10,
        pad_bs: 4,
        coeffs,
    };
    let colo = ColoModel {
        b1: rng.random_range(0.5..1.5),
        k1: rng.random_range(0.0..1.5),
    };
    (solo, colo)
}

/// Every co-located grid point scored from the raw coefficients; the most
/// finetune SMs, then the latency nearest the target, then the fewest
/// inference SMs.
fn brute_force(solo: &SoloModel, colo: &ColoModel, bs: u32, seqlen: u32, qos: f64) -> Option<(u16, u16)> {
    let bs_eff = bs.max(solo.pad_bs) as f64;
    let mut feasible = Vec::new();
    for i in 1..=10u16 {
        for f in 1..=(10 - i) {
            let c = &solo.coeffs[i as usize - 1];
            let base = bs_eff * c.b0 + c.c0 + bs_eff * c.k0 * seqlen as f64;
            let factor = (i as f64 / 10.0 * colo.b1 + f as f64 / 10.0 * colo.k1).max(1.0);
            let t = factor * base;
            if t <= qos {
                feasible.push((f, t, i));
            }
        }
    }
    feasible.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    feasible.first().map(|&(f, _, i)| (i, f))
}

fn scheduler_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut mismatches, mut paused) = (0, 0);
    for _ in 0..PLAN_STATES {
        let (solo, colo) = random_models(&mut rng);
        let bs = rng.random_range(1..=128);
        let seqlen = rng.random_range(1..=4096);
        let qos = rng.random_range(10.0..120.0);
        let got = plan_partition(&solo, &colo, bs, seqlen, &QosTarget::new(qos).unwrap());
        let want = brute_force(&solo, &colo, bs, seqlen, qos);
        let ok = match want {
            Some((i, f)) => {
                got.finetune_runnable && got.partition == SmPartition::new(i, f, 10).unwrap()
            }
            None => {
                paused += 1;
                !got.finetune_runnable && got.partition == SmPartition::full_inference(10)
            }
        };
        mismatches += (!ok) as usize;
    }
    check(
        mismatches == 0 && paused > 0 && paused < PLAN_STATES,
        format!("{mismatches} mismatches over {PLAN_STATES} random states ({paused} with finetuning paused)"),
    )
}

// ---- 4 -------------------------------------------------------------------

fn qos_safety() -> Outcome {
    let trace = bundled();
    let mut parts = Vec::new();
    let mut ok = true;
    for (sigma, limit) in [(0.0, 0.0), (PROFILE_NOISE, NOISY_VIOLATION_RATE_MAX)] {
        let cfg = SimConfig {
            noise_sigma: sigma,
            ..SimConfig::default()
        };
        let (solo, colo) = fitted(&cfg);
        let out = run(&cfg, &trace, Some(Models { solo: &solo, colo: &colo })).map_err(|e| e.to_string())?;
        let m = &out.metrics;
        let rate = m.qos_violation_rate();
        ok &= rate <= limit && m.completed as usize == trace.len();
        parts.push(format!(
            "sigma {sigma}: {} violations in {} steps (rate {rate:.5}, limit {limit})",
            m.qos_violations,
            m.tpot_samples.len()
        ));
    }
    check(ok, format!("{} requests; {}", trace.len(), parts.join("; ")))
}

// ---- 5 -------------------------------------------------------------------

fn run_config(text: &str) -> RunConfig {
    FileConfig::parse(Path::new("inline.toml"), text)
        .unwrap()
        .resolve(&Overrides::default())
        .unwrap()
}

fn directional_throughput() -> Outcome {
    let trace = bundled();
    let mut parts = Vec::new();
    let mut ok = true;
    for gpu in ["ada6000", "a100"] {
        let rc = run_config(&format!("gpu = \"{gpu}\""));
        let models = commands::fit_from_oracle(&rc).map_err(|e| e.to_string())?;
        let out = commands::compare(&rc, &trace, &models).map_err(|e| e.to_string())?;
        let by: BTreeMap<Mode, f64> = out.reports.iter().map(|r| (r.mode, r.finetune_throughput)).collect();
        let a = by[&Mode::Adaptive];
        let (s, p) = (by[&Mode::StaticMode], by[&Mode::SeparateMode]);
        ok &= a > s && a > p;
        parts.push(format!(
            "{gpu}: adaptive {a:.3} samples/s, {:+.1}% vs separate {p:.3}, {:+.1}% vs static {s:.3}",
            (a / p - 1.0) * 100.0,
            (a / s - 1.0) * 100.0
        ));
    }
    check(ok, parts.join("; "))
}

// ---- 6 -------------------------------------------------------------------

fn allocator_suite() -> Outcome {
    let mut d = support::PoolDriver::new(6);
    d.run(ALLOC_OPS)?;
    d.check_block_states()?;
    let s = d.stats.clone();

    let cap = SimConfig::default().small_pool_bytes;
    let mut pool = SmallPool::new(cap, 2 * KIB).map_err(|e| e.to_string())?;
    let mut reference = support::RefBuddy::new(cap, 2 * KIB);
    let mut handles = HashMap::new();
    let replay = small_tensor_replay(ALLOC_OPS, SMALL_REPLAY_LIVE, 6);
    for op in &replay {
        match *op {
            SmallOp::Alloc { id, bytes } => {
                let a = pool.alloc(bytes).map_err(|e| e.to_string())?;
                if Some(a.offset) != reference.alloc(id as u64, bytes) {
                    return Err(format!("replay alloc {id} diverged from reference"));
                }
                handles.insert(id, a.handle);
            }
            SmallOp::Free { id } => {
                pool.free(handles.remove(&id).expect("live id")).map_err(|e| e.to_string())?;
                reference.free(id as u64);
            }
        }
    }
    pool.check_invariants().map_err(|e| e.to_string())?;
    let frag = pool.peak_internal_fragmentation();
    check(
        frag < SMALL_FRAG_MAX_BYTES && s.recycles > 0 && s.tensor_ooms > 0,
        format!(
            "{} pool ops ({} tensor allocs, {} OOMs, {} recycles, {} small allocs) hold every invariant; buddy matches reference on {} replay ops; peak small-pool fragmentation {:.1} MB in {} GiB (< {} MB)",
            s.ops,
            s.tensor_allocs,
            s.tensor_ooms,
            s.recycles,
            s.small_allocs,
            replay.len(),
            frag as f64 / 1e6,
            cap / GIB,
            SMALL_FRAG_MAX_BYTES / 1_000_000
        ),
    )
}

// ---- 7 -------------------------------------------------------------------

fn window_scenario() -> Outcome {
    let cfg = SimConfig {
        gpu: GpuSpec::a100_40g(),
        devices: 1,
        ..SimConfig::default()
    };
    let trace = synth_trace(&SyntheticSpec::three_phase(coloc::config::THREE_PHASE_SEED)).unwrap();
    let (solo, colo) = fitted(&cfg);
    let out = run(&cfg, &trace, Some(Models { solo: &solo, colo: &colo })).map_err(|e| e.to_string())?;
    let ev = &out.metrics.window_events;
    if ev.len() < 3 {
        return Err(format!("only {} window adjustments", ev.len()));
    }
    let phase = |t: f64| ((t / 60_000.0) as usize).min(2);
    let max_in = |p: usize| ev.iter().filter(|e| phase(e.t_ms) == p).map(|e| e.window_layers).max();
    let min_in = |p: usize| ev.iter().filter(|e| phase(e.t_ms) == p).map(|e| e.window_layers).min();
    let (light, heavy_min, last) = (max_in(0), min_in(1), ev.last().unwrap().window_layers);
    let shrinks = matches!((light, heavy_min), (Some(l), Some(h)) if h < l);
    let regrows = heavy_min.is_some_and(|h| last > h);
    let mut monotone = true;
    for a in ev {
        for b in ev {
            if a.kv_chunks < b.kv_chunks && a.window_layers < b.window_layers {
                monotone = false;
            }
        }
    }
    check(
        shrinks && regrows && monotone && out.metrics.qos_violations == 0,
        format!(
            "{} adjustments; window light max {:?}, heavy min {:?}, final {last}; monotone in KV demand: {monotone}; {} violations",
            ev.len(),
            light,
            heavy_min,
            out.metrics.qos_violations
        ),
    )
}

// ---- 8 -------------------------------------------------------------------

fn coloc(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_coloc"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(out.stdout)
}

/// Every file under `dir`, by relative path.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let script: [&[&str]; 6] = [
        &["gen-trace", "--preset", "bundled", "--out", "trace.csv"],
        &["--noise", "0.01", "gen-profiles", "--out", "profiles.csv"],
        &["--noise", "0.01", "fit", "--profiles", "profiles.csv", "--out", "model.toml"],
        &["--noise", "0.01", "simulate", "--trace", "trace.csv", "--models", "model.toml", "--baseline", "static", "--out-dir", "sim"],
        &["compare", "--trace", "trace.csv", "--out-dir", "cmp"],
        &["--gpu", "a100", "--devices", "1", "gen-trace", "--preset", "three-phase", "--out", "phases.csv"],
    ];
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut stdouts: [Vec<Vec<u8>>; 2] = [Vec::new(), Vec::new()];
    for (d, outs) in dirs.iter().zip(stdouts.iter_mut()) {
        for args in script {
            outs.push(coloc(d.path(), args)?);
        }
    }
    let (a, b) = (snapshot(dirs[0].path()), snapshot(dirs[1].path()));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let same_files = a == b && stdouts[0] == stdouts[1];
    let bytes: usize = a.iter().map(|(_, v)| v.len()).sum();

    // in-process repeat of a noisy run, compared field by field
    let cfg = SimConfig {
        noise_sigma: PROFILE_NOISE,
        ..SimConfig::default()
    };
    let (solo, colo) = fitted(&cfg);
    let trace = bundled();
    let m = Some(Models { solo: &solo, colo: &colo });
    let same_run = run(&cfg, &trace, m).unwrap() == run(&cfg, &trace, m).unwrap();

    // the shipped trace is exactly what the generator produces
    let shipped = a.iter().find(|(n, _)| n == "trace.csv").map(|(_, v)| v.as_slice());
    let same_bundle = shipped == Some(BUNDLED_TRACE.as_bytes());
    let model_loads = a
        .iter()
        .find(|(n, _)| n == "model.toml")
        .is_some_and(|(_, v)| ModelFile::parse(Path::new("model.toml"), &String::from_utf8_lossy(v)).is_ok());
    check(
        same_files && same_run && same_bundle && model_loads,
        format!(
            "{} commands run twice: {} files ({} bytes) and stdout byte-identical: {same_files}; repeated noisy simulation identical: {same_run}; shipped trace matches generator: {same_bundle}; model file reloads: {model_loads}",
            script.len(),
            names.len(),
            bytes
        ),
    )
}
