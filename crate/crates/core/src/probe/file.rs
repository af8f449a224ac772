//! Probe-result persistence: line-delimited JSON keyed by sample id.

use std::path::Path;

use crate::error::{Error, Result};

use super::ProbeResult;

pub fn write_probe_results(results: &[ProbeResult], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in results {
        out.push_str(
            &serde_json::to_string(r)
                .map_err(|e| Error::Format(format!("probe result encode: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn parse_probe_results(text: &str) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ProbeResult = serde_json::from_str(line)
            .map_err(|e| Error::Format(format!("probe result line {}: {e}", i + 1)))?;
        if r.vectors.is_empty() {
            return Err(Error::Format(format!(
                "probe result line {}: no layer vectors",
                i + 1
            )));
        }
        let d = r.vectors.values().next().map(|v| v.len()).unwrap_or(0);
        if d == 0 || r.vectors.values().any(|v| v.len() != d) {
            return Err(Error::Format(format!(
                "probe result line {}: inconsistent vector lengths",
                i + 1
            )));
        }
        out.push(r);
    }
    if out.is_empty() {
        return Err(Error::Format("probe result file holds no records".into()));
    }
    Ok(out)
}

pub fn read_probe_results(path: &Path) -> Result<Vec<ProbeResult>> {
    parse_probe_results(&std::fs::read_to_string(path)?)
}
