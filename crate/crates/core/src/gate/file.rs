//! Gate persistence: JSON with the frequency vector, derived mask, and
//! the digest of the probe results it came from.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::NeuralGate;

pub const GATE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateFile {
    pub schema_version: u32,
    pub layer: usize,
    pub threshold: f64,
    pub sample_count: u32,
    pub negative_counts: Vec<u32>,
    /// Redundant with counts/sample_count; stored for plotting and
    /// cross-checked on load.
    pub m: Vec<f64>,
    pub mask: Vec<f64>,
    /// Digest of the probe-result file this gate was aggregated from.
    pub probe_digest: String,
}

impl GateFile {
    pub fn from_gate(gate: &NeuralGate, probe_digest: String) -> Self {
        GateFile {
            schema_version: GATE_SCHEMA_VERSION,
            layer: gate.layer,
            threshold: gate.threshold,
            sample_count: gate.sample_count,
            negative_counts: gate.negative_counts.clone(),
            m: gate.fractions(),
            mask: gate.binary_mask(),
            probe_digest,
        }
    }

    pub fn into_gate(self) -> Result<NeuralGate> {
        let gate = NeuralGate {
            layer: self.layer,
            negative_counts: self.negative_counts,
            sample_count: self.sample_count,
            threshold: self.threshold,
        };
        gate.validate()?;
        if self.m != gate.fractions() {
            return Err(Error::Format(
                "stored frequency vector disagrees with counts".into(),
            ));
        }
        if self.mask != gate.binary_mask() {
            return Err(Error::Format("stored mask disagrees with threshold".into()));
        }
        Ok(gate)
    }
}

pub fn write_gate_file(gate: &NeuralGate, probe_digest: String, path: &Path) -> Result<()> {
    let file = GateFile::from_gate(gate, probe_digest);
    let text = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::Format(format!("gate encode: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn parse_gate_file(bytes: &[u8]) -> Result<(NeuralGate, String)> {
    let file: GateFile =
        serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("gate decode: {e}")))?;
    if file.schema_version != GATE_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported gate schema {}",
            file.schema_version
        )));
    }
    let digest = file.probe_digest.clone();
    Ok((file.into_gate()?, digest))
}

pub fn read_gate_file(path: &Path) -> Result<(NeuralGate, String)> {
    parse_gate_file(&std::fs::read(path)?)
}
