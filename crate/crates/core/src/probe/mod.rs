//! Per-sample probe optimization.
//!
//! With the model frozen, a learnable scaling vector per probed layer is
//! fitted so that the sensitive query moves toward its refusal target and
//! the benign query stays on its original answer, under an L1 pull toward
//! identity scaling. The projection back into the clamp box runs after
//! every optimizer step, and bounds are re-checked each step rather than
//! trusted.

mod file;

pub use file::{parse_probe_results, read_probe_results, write_probe_results};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{visual_prefix, GradParams, GraphHook, SubjectSpan, ToyModel};
use crate::optim::{Adam, AdamConfig};
use crate::synth::PairedSample;
use crate::train::sample_loss_nodes;

/// How a subject span maps onto scaled rows: every position, or the last
/// token only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SpanMode {
    #[default]
    Full,
    LastToken,
}

impl SpanMode {
    pub fn apply(&self, span: SubjectSpan) -> SubjectSpan {
        match self {
            SpanMode::Full => span,
            SpanMode::LastToken => SubjectSpan::new(span.end - 1, span.end),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Balance between the safety loss and the consistency loss.
    pub alpha: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Weight of the L1 pull toward identity scaling; 1.0 reproduces the
    /// unweighted objective.
    pub l1_weight: f64,
    /// Layers probed jointly; a single entry is the single-layer probe.
    pub layers: Vec<usize>,
    pub clamp_lo: f64,
    pub clamp_hi: f64,
    #[serde(default)]
    pub span_mode: SpanMode,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            alpha: 1.25,
            steps: 50,
            learning_rate: 0.05,
            l1_weight: 1.0,
            layers: vec![0],
            clamp_lo: -1.0,
            clamp_hi: 1.0,
            span_mode: SpanMode::Full,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} negative", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::Config("probe needs at least one step".into()));
        }
        if !(self.clamp_lo < self.clamp_hi) {
            return Err(Error::Config(format!(
                "clamp bounds [{}, {}]",
                self.clamp_lo, self.clamp_hi
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("no probe layers".into()));
        }
        if let Some(bad) = self.layers.iter().find(|&&l| l >= n_layers) {
            return Err(Error::Config(format!(
                "probe layer {bad} outside 0..{n_layers}"
            )));
        }
        let mut sorted = self.layers.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.layers.len() {
            return Err(Error::Config("duplicate probe layers".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub sample_id: String,
    /// Optimized scaling vector per probed layer.
    pub vectors: BTreeMap<usize, Vec<f64>>,
    pub loss_sen: f64,
    pub loss_benign: f64,
    pub loss_l1: f64,
    pub steps_run: usize,
    /// True iff the in-bounds check passed after every step.
    pub in_bounds_every_step: bool,
}

/// Element-wise projection into [lo, hi].
pub fn project_clamp(m: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    m.iter().map(|&x| x.min(hi).max(lo)).collect()
}

fn project_clamp_inplace(m: &mut [f64], lo: f64, hi: f64) {
    for x in m.iter_mut() {
        *x = x.min(hi).max(lo);
    }
}

struct ProbeLosses {
    sen: f64,
    benign: f64,
    l1: f64,
}

/// Build the probe objective into a fresh graph. Both forwards share the
/// frozen parameter binding and the same scaling leaves.
fn probe_objective(
    g: &mut Graph,
    model: &ToyModel,
    sample: &PairedSample,
    cfg: &ProbeConfig,
    m: &BTreeMap<usize, Vec<f64>>,
) -> Result<(
    crate::autodiff::NodeId,
    BTreeMap<usize, crate::autodiff::NodeId>,
    ProbeLosses,
)> {
    let bound = model.bind_params(g, GradParams::None);
    let mut leaves = BTreeMap::new();
    for (&layer, vec) in m {
        leaves.insert(layer, g.leaf(Tensor::from_vec(vec.clone()), true));
    }
    let hooks_for = |span: SubjectSpan, leaves: &BTreeMap<usize, crate::autodiff::NodeId>| {
        leaves
            .iter()
            .map(|(&layer, &node)| GraphHook {
                layer,
                span: cfg.span_mode.apply(span),
                node,
            })
            .collect::<Vec<_>>()
    };
    let vis = visual_prefix(&model.config, sample.subject_id, sample.image_id);
    let (loss_sen, _) = sample_loss_nodes(
        g,
        model,
        &bound,
        &vis,
        &sample.sensitive_query,
        &sample.refusal_target,
        &hooks_for(sample.sensitive_span, &leaves),
    )?;
    let (loss_ben, _) = sample_loss_nodes(
        g,
        model,
        &bound,
        &vis,
        &sample.benign_query,
        &sample.original_target,
        &hooks_for(sample.benign_span, &leaves),
    )?;

    let mut l1_terms = Vec::new();
    for &leaf in leaves.values() {
        let dev = g.sub_const(leaf, 1.0)?;
        let a = g.abs(dev)?;
        l1_terms.push(g.sum(a)?);
    }
    let mut l1 = l1_terms[0];
    for t in &l1_terms[1..] {
        l1 = g.add(l1, *t)?;
    }

    let ben_scaled = g.scale(loss_ben, cfg.alpha)?;
    let l1_scaled = g.scale(l1, cfg.l1_weight)?;
    let partial = g.add(loss_sen, ben_scaled)?;
    let total = g.add(partial, l1_scaled)?;
    let losses = ProbeLosses {
        sen: g.value(loss_sen).item(),
        benign: g.value(loss_ben).item(),
        l1: g.value(l1).item(),
    };
    Ok((total, leaves, losses))
}

/// Probe one sample, invoking `observer` with the vectors after every
/// projected step.
pub fn optimize_probe_observed(
    model: &ToyModel,
    sample: &PairedSample,
    cfg: &ProbeConfig,
    mut observer: impl FnMut(usize, &BTreeMap<usize, Vec<f64>>),
) -> Result<ProbeResult> {
    cfg.validate(model.config.n_layers)?;
    if sample.refusal_target.is_empty() || sample.original_target.is_empty() {
        return Err(Error::Data(format!(
            "{}: zero-length targets",
            sample.sample_id
        )));
    }
    sample
        .sensitive_span
        .validate(sample.sensitive_query.len())?;
    sample.benign_span.validate(sample.benign_query.len())?;

    let d = model.config.d_model;
    let mut m: BTreeMap<usize, Vec<f64>> = cfg.layers.iter().map(|&l| (l, vec![1.0; d])).collect();
    let mut opt: Adam<usize> = Adam::new(AdamConfig::with_lr(cfg.learning_rate));

    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let (total, leaves, _) = probe_objective(&mut g, model, sample, cfg, &m)?;
        let total_val = g.value(total).item();
        if !total_val.is_finite() {
            return Err(Error::Numeric(format!(
                "{}: non-finite probe loss at step {step}",
                sample.sample_id
            )));
        }
        let grads = g.backward(total)?;
        opt.begin_step();
        for (&layer, vec) in m.iter_mut() {
            let grad = grads
                .grad(leaves[&layer])
                .expect("probe leaves require grad");
            opt.update(&layer, vec, grad.data())?;
            project_clamp_inplace(vec, cfg.clamp_lo, cfg.clamp_hi);
            // re-check instead of trusting the projection
            if vec
                .iter()
                .any(|&x| x < cfg.clamp_lo || x > cfg.clamp_hi || !x.is_finite())
            {
                return Err(Error::Numeric(format!(
                    "{}: scaling vector escaped bounds at step {step}",
                    sample.sample_id
                )));
            }
        }
        observer(step, &m);
    }

    // report loss components at the returned vectors; reaching this point
    // means the per-step bounds check never tripped
    let mut g = Graph::new();
    let (_, _, losses) = probe_objective(&mut g, model, sample, cfg, &m)?;
    Ok(ProbeResult {
        sample_id: sample.sample_id.clone(),
        vectors: m,
        loss_sen: losses.sen,
        loss_benign: losses.benign,
        loss_l1: losses.l1,
        steps_run: cfg.steps,
        in_bounds_every_step: true,
    })
}

pub fn optimize_probe(
    model: &ToyModel,
    sample: &PairedSample,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    optimize_probe_observed(model, sample, cfg, |_, _| {})
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeFailure {
    pub sample_id: String,
    pub message: String,
}

/// Outcome of probing a corpus: per-sample results in input order, plus
/// isolated failures.
#[derive(Debug, Clone)]
pub struct ProbeBatch {
    pub results: Vec<ProbeResult>,
    pub failures: Vec<ProbeFailure>,
}

/// Probe every sample independently. Results do not depend on the degree
/// of parallelism: each sample's optimization is self-contained and the
/// outputs are merged back in input order.
pub fn probe_corpus(
    model: &ToyModel,
    samples: &[PairedSample],
    cfg: &ProbeConfig,
    parallelism: usize,
) -> Result<ProbeBatch> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to probe".into()));
    }
    let workers = parallelism.max(1).min(samples.len());
    let mut slots: Vec<Option<Result<ProbeResult>>> = Vec::new();
    slots.resize_with(samples.len(), || None);

    if workers == 1 {
        for (i, s) in samples.iter().enumerate() {
            slots[i] = Some(optimize_probe(model, s, cfg));
        }
    } else {
        let chunk = samples.len().div_ceil(workers);
        let outputs: Vec<Vec<(usize, Result<ProbeResult>)>> = std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for (w, chunk_samples) in samples.chunks(chunk).enumerate() {
                let start = w * chunk;
                handles.push(scope.spawn(move || {
                    chunk_samples
                        .iter()
                        .enumerate()
                        .map(|(k, s)| (start + k, optimize_probe(model, s, cfg)))
                        .collect::<Vec<_>>()
                }));
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("probe worker"))
                .collect()
        });
        for chunk_out in outputs {
            for (i, r) in chunk_out {
                slots[i] = Some(r);
            }
        }
    }

    let mut batch = ProbeBatch {
        results: Vec::new(),
        failures: Vec::new(),
    };
    for (i, slot) in slots.into_iter().enumerate() {
        match slot.expect("every slot filled") {
            Ok(r) => batch.results.push(r),
            Err(e) => batch.failures.push(ProbeFailure {
                sample_id: samples[i].sample_id.clone(),
                message: e.to_string(),
            }),
        }
    }
    Ok(batch)
}
