//! Run reports and the CSV artifacts written next to them.

use coloc_core::scheduler::DECISION_CSV_HEADER;
use coloc_core::simulator::{percentile, tpot_cdf, Mode, SimConfig, SimOutput, EVENT_CSV_HEADER};
use serde::Serialize;

/// Headline numbers of one run. Percentiles are nearest-rank over every
/// TPOT sample of every device.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: Mode,
    /// Finetune samples per second over the trace horizon, all devices.
    pub finetune_throughput: f64,
    pub tpot_p50: f64,
    pub tpot_p99: f64,
    /// In `[0, 1]`.
    pub qos_violation_rate: f64,
    /// `throughput / baseline_throughput - 1`; absent without a baseline.
    pub improvement_vs_baseline: Option<f64>,
    pub baseline: Option<Mode>,
    pub qos_target_ms: f64,
    pub devices: u32,
    pub seed: u64,
    pub noise_sigma: f64,
    pub tpot_samples: usize,
    pub qos_violations: u64,
    pub finetune_samples: f64,
    pub horizon_ms: f64,
    pub admitted: u64,
    pub completed: u64,
    pub dropped: u64,
    pub swap_count: u64,
    pub swap_bytes: u64,
    pub finetune_stall_ms: f64,
    pub kv_wait_ms: f64,
    pub small_pool_peak_fragmentation_bytes: u64,
}

impl RunReport {
    pub fn new(cfg: &SimConfig, out: &SimOutput) -> Self {
        let m = &out.metrics;
        RunReport {
            mode: out.mode,
            finetune_throughput: m.finetune_throughput,
            tpot_p50: percentile(&m.tpot_samples, 0.5),
            tpot_p99: percentile(&m.tpot_samples, 0.99),
            qos_violation_rate: m.qos_violation_rate(),
            improvement_vs_baseline: None,
            baseline: None,
            qos_target_ms: cfg.qos.tpot_ms,
            devices: cfg.devices,
            seed: cfg.seed,
            noise_sigma: cfg.noise_sigma,
            tpot_samples: m.tpot_samples.len(),
            qos_violations: m.qos_violations,
            finetune_samples: m.finetune_samples,
            horizon_ms: m.horizon_ms,
            admitted: m.admitted,
            completed: m.completed,
            dropped: m.dropped,
            swap_count: m.swap_count,
            swap_bytes: m.swap_bytes,
            finetune_stall_ms: m.stall_ms,
            kv_wait_ms: m.kv_wait_ms,
            small_pool_peak_fragmentation_bytes: m.small_pool_peak_fragmentation,
        }
    }

    pub fn set_baseline(&mut self, baseline: &RunReport) {
        self.baseline = Some(baseline.mode);
        self.improvement_vs_baseline = Some(gain(self.finetune_throughput, baseline.finetune_throughput));
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("report serializes");
        v.push(b'\n');
        v
    }
}

/// Relative gain of `x` over `base`; infinite when the base did no work.
pub fn gain(x: f64, base: f64) -> f64 {
    if base > 0.0 {
        x / base - 1.0
    } else if x > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// Named files of one run, in write order.
pub type Artifacts = Vec<(String, Vec<u8>)>;

fn rows_csv<T: Serialize>(header: &[&str], rows: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

fn lines(header: &str, body: impl IntoIterator<Item = String>) -> Vec<u8> {
    let mut s = String::from(header);
    s.push('\n');
    for l in body {
        s.push_str(&l);
        s.push('\n');
    }
    s.into_bytes()
}

/// Report JSON, TPOT CDF, SM and memory timelines, window events, the event
/// log and the scheduler decisions.
pub fn run_artifacts(report: &RunReport, out: &SimOutput, cdf_points: usize) -> Artifacts {
    let m = &out.metrics;
    vec![
        ("report.json".into(), report.to_json()),
        (
            "tpot_cdf.csv".into(),
            rows_csv(&["tpot_ms", "cdf"], tpot_cdf(&m.tpot_samples, cdf_points)),
        ),
        (
            "sm_timeline.csv".into(),
            rows_csv(&["t_ms", "device", "infer_frac", "ft_frac"], &m.sm_timeline),
        ),
        (
            "mem_timeline.csv".into(),
            rows_csv(
                &["t_ms", "device", "kv_chunks", "tensor_chunks", "window_layers"],
                &m.mem_timeline,
            ),
        ),
        (
            "window_events.csv".into(),
            rows_csv(&["t_ms", "device", "window_layers", "kv_chunks"], &m.window_events),
        ),
        (
            "events.csv".into(),
            lines(EVENT_CSV_HEADER, out.log.entries.iter().map(|e| e.csv_line())),
        ),
        (
            "decisions.csv".into(),
            lines(
                &format!("device,{DECISION_CSV_HEADER}"),
                out.log.decisions.iter().map(|(_, d, l)| format!("{d},{l}")),
            ),
        ),
    ]
}

/// One row per mode; `adaptive_gain` is the adaptive run's throughput gain
/// over that row.
pub fn comparison_table(reports: &[RunReport]) -> (String, Vec<u8>) {
    let adaptive = reports.iter().find(|r| r.mode == Mode::Adaptive).map(|r| r.finetune_throughput);
    let header = [
        "mode",
        "finetune_throughput",
        "tpot_p50_ms",
        "tpot_p99_ms",
        "qos_violation_rate",
        "swap_count",
        "adaptive_gain",
    ];
    let mut text = format!(
        "{:<10} {:>12} {:>10} {:>10} {:>10} {:>8} {:>10}\n",
        "mode", "ft_samp/s", "p50_ms", "p99_ms", "viol", "swaps", "adapt_gain"
    );
    let mut rows = Vec::new();
    for r in reports {
        let g = match adaptive {
            Some(a) if r.mode != Mode::Adaptive => Some(gain(a, r.finetune_throughput)),
            _ => None,
        };
        let g_text = g.map_or_else(|| "-".to_string(), |g| format!("{:+.1}%", g * 100.0));
        text.push_str(&format!(
            "{:<10} {:>12.3} {:>10.2} {:>10.2} {:>10.5} {:>8} {:>10}\n",
            r.mode.as_str(),
            r.finetune_throughput,
            r.tpot_p50,
            r.tpot_p99,
            r.qos_violation_rate,
            r.swap_count,
            g_text
        ));
        rows.push((
            r.mode.as_str(),
            r.finetune_throughput,
            r.tpot_p50,
            r.tpot_p99,
            r.qos_violation_rate,
            r.swap_count,
            g.map(|g| g.to_string()).unwrap_or_default(),
        ));
    }
    (text, rows_csv(&header, rows))
}
