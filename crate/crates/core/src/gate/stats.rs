//! Probe-statistics emitters: frequency histograms per layer and
//! layer-wise strong-neuron proportions, as plain CSV for plotting.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::probe::ProbeResult;

use super::{aggregate, classify};

pub const HISTOGRAM_BINS: usize = 10;

/// Per-layer histogram of negativity frequencies over [0,1] in 0.1 steps;
/// each row sums to the number of hidden dimensions.
pub fn frequency_histogram(
    results: &[ProbeResult],
    threshold: f64,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    if results.is_empty() {
        return Err(Error::Data("no probe results".into()));
    }
    let mut layers: Vec<usize> = results
        .iter()
        .flat_map(|r| r.vectors.keys().copied())
        .collect();
    layers.sort_unstable();
    layers.dedup();
    let mut out = BTreeMap::new();
    for layer in layers {
        let with_layer: Vec<ProbeResult> = results
            .iter()
            .filter(|r| r.vectors.contains_key(&layer))
            .cloned()
            .collect();
        let gate = aggregate(&with_layer, layer, threshold)?;
        let mut bins = vec![0usize; HISTOGRAM_BINS];
        for m in gate.fractions() {
            let idx = ((m * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1);
            bins[idx] += 1;
        }
        out.insert(layer, bins);
    }
    Ok(out)
}

/// Strong-neuron proportion per layer.
pub fn strong_proportions(results: &[ProbeResult], threshold: f64) -> Result<BTreeMap<usize, f64>> {
    let hist_layers = frequency_histogram(results, threshold)?;
    let mut out = BTreeMap::new();
    for &layer in hist_layers.keys() {
        let with_layer: Vec<ProbeResult> = results
            .iter()
            .filter(|r| r.vectors.contains_key(&layer))
            .cloned()
            .collect();
        let tax = classify(&aggregate(&with_layer, layer, threshold)?);
        out.insert(layer, tax.strong_fraction());
    }
    Ok(out)
}

pub fn write_histogram_csv(histogram: &BTreeMap<usize, Vec<usize>>, path: &Path) -> Result<()> {
    let mut csv = String::from("layer");
    for b in 0..HISTOGRAM_BINS {
        csv.push_str(&format!(
            ",bin_{:.1}_{:.1}",
            b as f64 / HISTOGRAM_BINS as f64,
            (b + 1) as f64 / HISTOGRAM_BINS as f64
        ));
    }
    csv.push('\n');
    for (layer, bins) in histogram {
        csv.push_str(&layer.to_string());
        for b in bins {
            csv.push_str(&format!(",{b}"));
        }
        csv.push('\n');
    }
    std::fs::write(path, csv)?;
    Ok(())
}

pub fn write_proportions_csv(props: &BTreeMap<usize, f64>, path: &Path) -> Result<()> {
    let mut csv = String::from("layer,strong_fraction\n");
    for (layer, frac) in props {
        csv.push_str(&format!("{layer},{frac}\n"));
    }
    std::fs::write(path, csv)?;
    Ok(())
}
