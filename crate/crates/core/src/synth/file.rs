//! Corpus and manifest persistence.
//!
//! The corpus is line-delimited JSON, one sample per line; the manifest is
//! a single JSON document. Readers validate every record structurally so
//! malformed input is rejected instead of propagating.

use std::path::Path;

use crate::error::{Error, Result};

use super::{CorpusManifest, PairedSample};

pub fn write_corpus(samples: &[PairedSample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        out.push_str(
            &serde_json::to_string(s).map_err(|e| Error::Format(format!("corpus encode: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse and validate one corpus line.
pub fn validate_corpus_line(line: &str) -> Result<PairedSample> {
    let sample: PairedSample = serde_json::from_str(line)
        .map_err(|e| Error::Format(format!("corpus line decode: {e}")))?;
    sample.validate()?;
    Ok(sample)
}

pub fn read_corpus(path: &Path) -> Result<Vec<PairedSample>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let sample = validate_corpus_line(line)
            .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(sample);
    }
    if out.is_empty() {
        return Err(Error::Format("corpus file holds no samples".into()));
    }
    Ok(out)
}

pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<CorpusManifest> {
    parse_manifest(&std::fs::read(path)?)
}

pub fn parse_manifest(bytes: &[u8]) -> Result<CorpusManifest> {
    let manifest: CorpusManifest = serde_json::from_slice(bytes)
        .map_err(|e| Error::Format(format!("manifest decode: {e}")))?;
    manifest.validate()?;
    Ok(manifest)
}
