//! On-disk artifacts: metric CSVs, model files and key-value reports.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::trainer::MetricsRecord;

pub const METRICS_HEADER: &str =
    "run_id,seed,round,F_value,Fmask_value,grad_norm_sq_F,grad_norm_sq_Fmask,dist_to_wstar_mask";

pub const MODEL_MAGIC: &[u8; 4] = b"MFLM";
pub const MODEL_VERSION: u32 = 1;

/// Formats with 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// One labelled metric series.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRun<'a> {
    pub run_id: &'a str,
    pub seed: u64,
    pub records: &'a [MetricsRecord],
}

/// CSV text for `runs`, sorted by `(run_id, round)`.
pub fn metrics_csv(runs: &[MetricsRun<'_>]) -> String {
    let mut rows: Vec<(&str, u64, &MetricsRecord)> = runs
        .iter()
        .flat_map(|r| r.records.iter().map(move |m| (r.run_id, r.seed, m)))
        .collect();
    rows.sort_by(|a, b| a.0.cmp(b.0).then(a.2.round.cmp(&b.2.round)));
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for (id, seed, m) in rows {
        let _ = writeln!(
            s,
            "{id},{seed},{},{},{},{},{},{}",
            m.round,
            fmt_f64(m.f_value),
            fmt_f64(m.fmask_value),
            fmt_f64(m.grad_norm_sq_f),
            fmt_f64(m.grad_norm_sq_fmask),
            fmt_f64(m.dist_to_wstar_mask)
        );
    }
    s
}

/// Parses CSV text produced by [`metrics_csv`] into `(run_id, seed, record)` rows.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<(String, u64, MetricsRecord)>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics CSV header does not match".into()));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let bad = |what: &str| Error::Format(format!("metrics CSV line {}: {what}", k + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad("expected 8 fields"));
            }
            let num = |x: &str| x.parse::<f64>().map_err(|_| bad("bad number"));
            Ok((
                f[0].to_string(),
                f[1].parse().map_err(|_| bad("bad seed"))?,
                MetricsRecord {
                    round: f[2].parse().map_err(|_| bad("bad round"))?,
                    f_value: num(f[3])?,
                    fmask_value: num(f[4])?,
                    grad_norm_sq_f: num(f[5])?,
                    grad_norm_sq_fmask: num(f[6])?,
                    dist_to_wstar_mask: num(f[7])?,
                },
            ))
        })
        .collect()
}

/// Model file: magic, version, dimension, values, SHA-256 of all preceding
/// bytes.
pub fn encode_model(w: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * w.dim() + 32);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.dim() as u64).to_le_bytes());
    for x in w.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ParamVector> {
    if bytes.len() < 48 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Format("not a model file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("model file failed its integrity check".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let d = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if body.len() != 16 + 8 * d {
        return Err(Error::Format("model length does not match its dimension".into()));
    }
    let values = body[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    ParamVector::new(values).map_err(|e| Error::Format(format!("model file: {e}")))
}

pub fn write_model(path: &Path, w: &ParamVector) -> Result<()> {
    fs::write(path, encode_model(w))?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ParamVector> {
    decode_model(&read_artifact(path)?)
}

pub(crate) fn read_artifact(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {}: expected key=value", k + 1)))?;
        if out.insert(key.trim().to_string(), value.trim().to_string()).is_some() {
            return Err(Error::Format(format!("line {}: duplicate key `{}`", k + 1, key.trim())));
        }
    }
    Ok(out)
}
