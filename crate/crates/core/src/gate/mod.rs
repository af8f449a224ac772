//! Cross-sample gate aggregation and layer localization.
//!
//! Per-sample probe vectors become a per-layer gate: for each hidden
//! dimension, the fraction of samples whose probe entry went strictly
//! negative. Dimensions split into inactive (never negative), weakly
//! active (at most the threshold) and strongly active (above it, strict);
//! only the strong ones pass the binary mask. The layer with the highest
//! strong proportion seeds a radius-limited search for the edit layer.

mod file;
pub mod stats;

pub use file::{parse_gate_file, read_gate_file, write_gate_file, GateFile};

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::ProbeResult;

pub const DEFAULT_GATE_THRESHOLD: f64 = 0.3;

/// Layer-wise neural gate: negativity counts over N samples plus the
/// threshold that derives the binary mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralGate {
    pub layer: usize,
    /// Per-dimension count of samples with a strictly negative probe entry.
    pub negative_counts: Vec<u32>,
    pub sample_count: u32,
    pub threshold: f64,
}

impl NeuralGate {
    /// Negativity frequency per dimension, each an exact count over N.
    pub fn fractions(&self) -> Vec<f64> {
        self.negative_counts
            .iter()
            .map(|&c| c as f64 / self.sample_count as f64)
            .collect()
    }

    /// 0/1 mask selecting strongly active dimensions (strictly above the
    /// threshold).
    pub fn binary_mask(&self) -> Vec<f64> {
        self.fractions()
            .iter()
            .map(|&m| if m > self.threshold { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.negative_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::Data("gate over zero samples".into()));
        }
        if self.negative_counts.is_empty() {
            return Err(Error::Data("gate with zero dimensions".into()));
        }
        if let Some(bad) = self
            .negative_counts
            .iter()
            .find(|&&c| c > self.sample_count)
        {
            return Err(Error::Data(format!(
                "negative count {bad} exceeds sample count {}",
                self.sample_count
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Data(format!("threshold {}", self.threshold)));
        }
        Ok(())
    }

    /// A gate that passes every dimension, for identity-gate checks.
    pub fn all_ones(layer: usize, dim: usize) -> Self {
        NeuralGate {
            layer,
            negative_counts: vec![1; dim],
            sample_count: 1,
            threshold: 0.0,
        }
    }

    /// A gate that blocks every dimension.
    pub fn all_zeros(layer: usize, dim: usize) -> Self {
        NeuralGate {
            layer,
            negative_counts: vec![0; dim],
            sample_count: 1,
            threshold: DEFAULT_GATE_THRESHOLD,
        }
    }
}

/// Count strictly negative probe entries per dimension across samples.
/// Zero counts as non-negative.
pub fn aggregate(results: &[ProbeResult], layer: usize, threshold: f64) -> Result<NeuralGate> {
    if results.is_empty() {
        return Err(Error::Data("no probe results to aggregate".into()));
    }
    let mut dim: Option<usize> = None;
    for r in results {
        let v = r.vectors.get(&layer).ok_or_else(|| {
            Error::Data(format!("probe result {} lacks layer {layer}", r.sample_id))
        })?;
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d == v.len() => {}
            Some(d) => {
                return Err(Error::Data(format!(
                    "probe result {} has {} dims, expected {d}",
                    r.sample_id,
                    v.len()
                )))
            }
        }
    }
    let d = dim.unwrap();
    let mut counts = vec![0u32; d];
    for r in results {
        for (j, &x) in r.vectors[&layer].iter().enumerate() {
            if x < 0.0 {
                counts[j] += 1;
            }
        }
    }
    let gate = NeuralGate {
        layer,
        negative_counts: counts,
        sample_count: results.len() as u32,
        threshold,
    };
    gate.validate()?;
    Ok(gate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronClass {
    Inactive,
    Weak,
    Strong,
}

/// Index sets partitioning the hidden dimensions of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronTaxonomy {
    pub layer: usize,
    pub inactive: Vec<usize>,
    pub weak: Vec<usize>,
    pub strong: Vec<usize>,
}

impl NeuronTaxonomy {
    pub fn dim(&self) -> usize {
        self.inactive.len() + self.weak.len() + self.strong.len()
    }

    pub fn strong_fraction(&self) -> f64 {
        self.strong.len() as f64 / self.dim() as f64
    }

    pub fn class_of(&self, j: usize) -> Option<NeuronClass> {
        if self.inactive.contains(&j) {
            Some(NeuronClass::Inactive)
        } else if self.weak.contains(&j) {
            Some(NeuronClass::Weak)
        } else if self.strong.contains(&j) {
            Some(NeuronClass::Strong)
        } else {
            None
        }
    }
}

/// Partition dimensions: inactive at exactly zero frequency, weak up to
/// and including the threshold, strong strictly above it.
pub fn classify(gate: &NeuralGate) -> NeuronTaxonomy {
    let mut tax = NeuronTaxonomy {
        layer: gate.layer,
        inactive: Vec::new(),
        weak: Vec::new(),
        strong: Vec::new(),
    };
    for (j, &m) in gate.fractions().iter().enumerate() {
        if m == 0.0 {
            tax.inactive.push(j);
        } else if m > gate.threshold {
            tax.strong.push(j);
        } else {
            tax.weak.push(j);
        }
    }
    tax
}

/// Default layer band searched for the edit layer: the early-to-middle
/// stretch of the backbone, scaled proportionally from a 32-layer model's
/// layers 3 through 19.
pub fn layer_search_range(n_layers: usize) -> Range<usize> {
    let lo = ((3.0 * n_layers as f64 / 32.0).round() as usize).min(n_layers - 1);
    let hi = ((19.0 * n_layers as f64 / 32.0).round() as usize).min(n_layers - 1);
    lo..hi + 1
}

/// Layer with the highest strongly-active proportion; ties go to the
/// lowest index.
pub fn locate_center(
    taxonomies: &BTreeMap<usize, NeuronTaxonomy>,
    layer_range: Range<usize>,
) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for layer in layer_range.clone() {
        let tax = taxonomies
            .get(&layer)
            .ok_or_else(|| Error::Data(format!("no taxonomy for layer {layer} in search range")))?;
        let frac = tax.strong_fraction();
        let better = match best {
            None => true,
            Some((_, bf)) => frac > bf,
        };
        if better {
            best = Some((layer, frac));
        }
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::Data(format!("empty layer range {layer_range:?}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusStat {
    pub radius: usize,
    pub max_eta: f64,
    pub mean_eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSearchResult {
    pub center: usize,
    /// Successful evaluations, one per layer visited.
    pub evaluations: BTreeMap<usize, f64>,
    /// Layers whose evaluation failed, with the failure text.
    pub failures: BTreeMap<usize, String>,
    pub per_radius: Vec<RadiusStat>,
    pub chosen: usize,
}

/// Expand a radius around the center, evaluating each new layer exactly
/// once. The chosen layer maximizes the metric; ties prefer the layer
/// closest to the center, then the lowest index. Failed evaluations are
/// recorded and excluded.
pub fn radius_search(
    mut edit_and_eval: impl FnMut(usize) -> Result<f64>,
    center: usize,
    max_radius: usize,
    n_layers: usize,
) -> Result<LayerSearchResult> {
    if center >= n_layers {
        return Err(Error::Config(format!(
            "center {center} outside 0..{n_layers}"
        )));
    }
    let mut evaluations = BTreeMap::new();
    let mut failures = BTreeMap::new();
    let mut per_radius = Vec::new();
    for r in 0..=max_radius {
        let mut candidates = vec![];
        if r == 0 {
            candidates.push(center);
        } else {
            if center >= r {
                candidates.push(center - r);
            }
            if center + r < n_layers {
                candidates.push(center + r);
            }
        }
        for layer in candidates {
            debug_assert!(!evaluations.contains_key(&layer) && !failures.contains_key(&layer));
            match edit_and_eval(layer) {
                Ok(eta) => {
                    evaluations.insert(layer, eta);
                }
                Err(e) => {
                    failures.insert(layer, e.to_string());
                }
            }
        }
        let window: Vec<f64> = evaluations
            .iter()
            .filter(|(l, _)| center.abs_diff(**l) <= r)
            .map(|(_, &e)| e)
            .collect();
        if !window.is_empty() {
            per_radius.push(RadiusStat {
                radius: r,
                max_eta: window.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                mean_eta: window.iter().sum::<f64>() / window.len() as f64,
            });
        }
    }
    let chosen = evaluations
        .iter()
        .map(|(&l, &e)| (l, e))
        .max_by(|(la, ea), (lb, eb)| {
            ea.partial_cmp(eb)
                .unwrap()
                // ties: prefer closer to center, then lower index
                .then(center.abs_diff(*lb).cmp(&center.abs_diff(*la)))
                .then(lb.cmp(la))
        })
        .map(|(l, _)| l)
        .ok_or_else(|| Error::Numeric("every layer evaluation failed".into()))?;
    Ok(LayerSearchResult {
        center,
        evaluations,
        failures,
        per_radius,
        chosen,
    })
}

#[cfg(test)]
mod tests;
