//! On-disk formats: request traces, profile tables and fitted models.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write followed by a read reproduces every value bit for bit.

use std::fs;
use std::io::Write;
use std::path::Path;

use coloc_core::predictor::{ColoModel, FitResiduals, ProfilePoint, SoloModel};
use coloc_core::workload::{normalize_trace, Request};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const TRACE_HEADER: [&str; 3] = ["arrival_ms", "prompt_tokens", "output_tokens"];
pub const PROFILE_HEADER: [&str; 5] = ["sm_frac", "ft_frac", "bs", "seqlen", "latency_ms"];

/// Parse a headered CSV into rows, checking the header exactly and tagging
/// every row error with its line number.
fn read_rows<T: DeserializeOwned>(path: &Path, text: &str, header: &[&str]) -> Result<Vec<(u64, T)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let at = |line: u64, msg: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let found = rdr.headers().map_err(|e| at(1, e.to_string()))?.clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(at(
            1,
            format!("header must be `{}`, found `{}`", header.join(","), found.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| at(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec.deserialize(Some(&found)).map_err(|e| at(line, e.to_string()))?;
        out.push((line, row));
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| CliError::io(path, e))
}

fn to_csv<T: Serialize>(rows: &[T], header: &[&str]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.serialize(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// Parse a trace; rows are validated with their line numbers and the
/// result is sorted by arrival (stable).
pub fn parse_trace(path: &Path, text: &str) -> Result<Vec<Request>> {
    let rows = read_rows::<Request>(path, text, &TRACE_HEADER)?;
    for (line, r) in &rows {
        let bad = if r.output_tokens == 0 {
            Some("output_tokens must be >= 1".to_string())
        } else if !(r.arrival_ms.is_finite() && r.arrival_ms >= 0.0) {
            Some(format!("arrival_ms {} must be finite and >= 0", r.arrival_ms))
        } else {
            None
        };
        if let Some(msg) = bad {
            return Err(CliError::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg,
            });
        }
    }
    if rows.is_empty() {
        return Err(CliError::Format {
            path: path.to_path_buf(),
            msg: "trace has no requests".into(),
        });
    }
    Ok(normalize_trace(rows.into_iter().map(|(_, r)| r).collect())?)
}

pub fn load_trace(path: &Path) -> Result<Vec<Request>> {
    parse_trace(path, &read_text(path)?)
}

pub fn trace_csv(reqs: &[Request]) -> Vec<u8> {
    to_csv(reqs, &TRACE_HEADER)
}

pub fn parse_profiles(path: &Path, text: &str) -> Result<Vec<ProfilePoint>> {
    let rows = read_rows::<ProfilePoint>(path, text, &PROFILE_HEADER)?;
    for (line, p) in &rows {
        let ok = p.sm_frac > 0.0 && p.sm_frac <= 1.0 && p.ft_frac >= 0.0 && p.sm_frac + p.ft_frac <= 1.0 + 1e-9;
        if !ok || !(p.latency_ms > 0.0 && p.latency_ms.is_finite()) || p.bs == 0 {
            return Err(CliError::Parse {
                path: path.to_path_buf(),
                line: *line,
                msg: "need 0 < sm_frac, ft_frac >= 0, sm_frac + ft_frac <= 1, bs >= 1, latency_ms > 0".into(),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, p)| p).collect())
}

pub fn load_profiles(path: &Path) -> Result<Vec<ProfilePoint>> {
    parse_profiles(path, &read_text(path)?)
}

pub fn profiles_csv(points: &[ProfilePoint]) -> Vec<u8> {
    to_csv(points, &PROFILE_HEADER)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub solo: FitResiduals,
    pub colo: Option<FitResiduals>,
}

/// Fitted predictor as stored on disk. The co-run model is absent when the
/// profiles held no co-run rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub solo: SoloModel,
    pub colo: Option<ColoModel>,
    pub residuals: Residuals,
}

impl ModelFile {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model serializes")
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let m: ModelFile = toml::from_str(text).map_err(|e| CliError::Format {
            path: path.to_path_buf(),
            msg: e.to_string().trim_end().replace('\n', " "),
        })?;
        let steps = m.solo.grid_steps as usize;
        if steps == 0 || m.solo.coeffs.len() != steps {
            return Err(CliError::Format {
                path: path.to_path_buf(),
                msg: format!("solo model lists {} grid points for grid_steps {steps}", m.solo.coeffs.len()),
            });
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(path, &read_text(path)?)
    }
}
