//! Gate-truncated FFN editing.
//!
//! The edit loss couples each pair's sensitive query (toward its refusal
//! target) with its benign query (toward the original answer, weighted by
//! alpha). For every edited layer, the parameter gradient splits into the
//! part contributed by subject-token rows and the rest; the binary gate
//! multiplies only the subject part, along the d_model axis of each FFN
//! matrix (up-projection rows, down-projection columns, output bias).
//! Non-subject gradients always pass untouched.
//!
//! The decomposition runs in one backward pass per sample using recording
//! taps on the FFN output and pre-activation nodes; the two-pass
//! "zero the subject rows by hand" variant survives in the tests as the
//! oracle. Baselines: `FullGradient` skips the mask (same gradients,
//! no truncation); `GradientAscent` pushes the sensitive query away from
//! its original answer instead of toward refusal, unmasked.

use std::collections::BTreeMap;
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Graph, TapSpec, Tensor};
use crate::error::{Error, Result};
use crate::gate::NeuralGate;
use crate::model::{abs_rows, visual_prefix, GradParams, ParamKey, ToyModel};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::synth::{PairedSample, SplitTag};
use crate::train::sample_loss_nodes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    #[default]
    Gated,
    FullGradient,
    GradientAscent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    /// Layers to edit, each with its gate.
    pub layers: BTreeMap<usize, NeuralGate>,
    pub alpha: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub batch_seed: u64,
    pub mode: BaselineMode,
}

impl EditPlan {
    pub fn new(layers: BTreeMap<usize, NeuralGate>) -> Self {
        EditPlan {
            layers,
            alpha: 1.25,
            learning_rate: 1e-5,
            epochs: 10,
            batch_size: 4,
            batch_seed: 0,
            mode: BaselineMode::Gated,
        }
    }

    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("edit plan without layers".into()));
        }
        for (&layer, gate) in &self.layers {
            if layer >= model.config.n_layers {
                return Err(Error::Config(format!(
                    "edit layer {layer} outside 0..{}",
                    model.config.n_layers
                )));
            }
            gate.validate()?;
            if gate.layer != layer {
                return Err(Error::Config(format!(
                    "gate for layer {} filed under layer {layer}",
                    gate.layer
                )));
            }
            if gate.dim() != model.config.d_model {
                return Err(Error::Config(format!(
                    "gate of {} dims for d_model {}",
                    gate.dim(),
                    model.config.d_model
                )));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// Gradients (or gradient parts) for one layer's four FFN parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnGrads {
    pub w_up: Vec<f64>,
    pub b_up: Vec<f64>,
    pub w_down: Vec<f64>,
    pub b_down: Vec<f64>,
}

impl FfnGrads {
    pub fn zeros(d_model: usize, d_ffn: usize) -> Self {
        FfnGrads {
            w_up: vec![0.0; d_model * d_ffn],
            b_up: vec![0.0; d_ffn],
            w_down: vec![0.0; d_ffn * d_model],
            b_down: vec![0.0; d_model],
        }
    }

    pub fn add_assign(&mut self, other: &FfnGrads) {
        for (a, b) in self.w_up.iter_mut().zip(&other.w_up) {
            *a += b;
        }
        for (a, b) in self.b_up.iter_mut().zip(&other.b_up) {
            *a += b;
        }
        for (a, b) in self.w_down.iter_mut().zip(&other.w_down) {
            *a += b;
        }
        for (a, b) in self.b_down.iter_mut().zip(&other.b_down) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self
            .w_up
            .iter_mut()
            .chain(&mut self.b_up)
            .chain(&mut self.w_down)
            .chain(&mut self.b_down)
        {
            *v *= c;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.w_up
            .iter()
            .chain(&self.b_up)
            .chain(&self.w_down)
            .chain(&self.b_down)
            .map(|v| v * v)
            .sum()
    }

    pub fn max_abs_diff(&self, other: &FfnGrads) -> f64 {
        let d = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        };
        d(&self.w_up, &other.w_up)
            .max(d(&self.b_up, &other.b_up))
            .max(d(&self.w_down, &other.w_down))
            .max(d(&self.b_down, &other.b_down))
    }
}

/// Subject/non-subject gradient split for one layer.
#[derive(Debug, Clone)]
pub struct SubjectGradients {
    pub subject: FfnGrads,
    pub rest: FfnGrads,
    /// Set when the sample's span was empty, making the subject part a
    /// zero tensor by construction.
    pub empty_span: bool,
}

/// Per-forward recorded state needed to assemble FFN parameter gradients.
struct ForwardTapes {
    x: Tensor,
    h: Tensor,
    pre: Tensor,
    dy: Tensor,
    dpre: Tensor,
    span: Range<usize>,
}

struct SampleGrads {
    per_layer: BTreeMap<usize, LayerGradParts>,
    loss_sen: f64,
    loss_benign: f64,
}

struct LayerGradParts {
    subject: FfnGrads,
    masked_subject: Option<FfnGrads>,
    rest: FfnGrads,
}

/// Accumulate the four parameter gradients from one forward's tapes,
/// splitting rows into span and non-span parts. When `mask` is given, a
/// third accumulator receives the gate-truncated subject part.
fn accumulate_forward(
    tapes: &ForwardTapes,
    w_down_vals: &Tensor,
    d_model: usize,
    d_ffn: usize,
    subject: &mut FfnGrads,
    rest: &mut FfnGrads,
    masked: Option<(&mut FfnGrads, &[f64])>,
) {
    let rows = tapes.dy.rows();
    let span = tapes.span.clone();
    let row_ranges = |in_span: bool| -> Vec<Range<usize>> {
        if in_span {
            vec![span.clone()]
        } else {
            let mut v = Vec::new();
            if span.start > 0 {
                v.push(0..span.start);
            }
            if span.end < rows {
                v.push(span.end..rows);
            }
            v
        }
    };

    let add_part = |dst: &mut FfnGrads, ranges: &[Range<usize>]| {
        for r in ranges {
            if r.is_empty() {
                continue;
            }
            let n = r.len();
            let x_rows = &tapes.x.data()[r.start * d_model..r.end * d_model];
            let h_rows = &tapes.h.data()[r.start * d_ffn..r.end * d_ffn];
            let dy_rows = &tapes.dy.data()[r.start * d_model..r.end * d_model];
            let dpre_rows = &tapes.dpre.data()[r.start * d_ffn..r.end * d_ffn];
            let wu = kernels::matmul_tn(x_rows, dpre_rows, n, d_model, d_ffn);
            for (a, b) in dst.w_up.iter_mut().zip(&wu) {
                *a += b;
            }
            let wd = kernels::matmul_tn(h_rows, dy_rows, n, d_ffn, d_model);
            for (a, b) in dst.w_down.iter_mut().zip(&wd) {
                *a += b;
            }
            for t in 0..n {
                for j in 0..d_ffn {
                    dst.b_up[j] += dpre_rows[t * d_ffn + j];
                }
                for j in 0..d_model {
                    dst.b_down[j] += dy_rows[t * d_model + j];
                }
            }
        }
    };

    add_part(subject, &row_ranges(true));
    add_part(rest, &row_ranges(false));

    if let Some((masked_dst, mask)) = masked {
        // axis-mapped truncation of the subject part: up-projection rows,
        // down-projection columns, output bias
        let mut masked_span = FfnGrads::zeros(d_model, d_ffn);
        add_part(&mut masked_span, &row_ranges(true));
        for i in 0..d_model {
            for j in 0..d_ffn {
                masked_span.w_up[i * d_ffn + j] *= mask[i];
            }
        }
        for p in 0..d_ffn {
            for j in 0..d_model {
                masked_span.w_down[p * d_model + j] *= mask[j];
            }
        }
        for j in 0..d_model {
            masked_span.b_down[j] *= mask[j];
        }
        // the hidden bias has no d_model axis; its truncated subject part
        // is rebuilt from the masked output gradient through the same
        // kernels the backward pass used
        for v in masked_span.b_up.iter_mut() {
            *v = 0.0;
        }
        for t in tapes.span.clone() {
            let dy_row = &tapes.dy.data()[t * d_model..(t + 1) * d_model];
            let masked_dy: Vec<f64> = dy_row.iter().zip(mask).map(|(g, m)| g * m).collect();
            let dh_row = kernels::matmul_nt(&masked_dy, w_down_vals.data(), 1, d_model, d_ffn);
            let pre_row = &tapes.pre.data()[t * d_ffn..(t + 1) * d_ffn];
            for j in 0..d_ffn {
                masked_span.b_up[j] += dh_row[j] * kernels::gelu_grad(pre_row[j]);
            }
        }
        masked_dst.add_assign(&masked_span);
    }
}

fn edit_targets(sample: &PairedSample, mode: BaselineMode) -> (&[u32], f64) {
    match mode {
        BaselineMode::Gated | BaselineMode::FullGradient => (&sample.refusal_target, 1.0),
        // unlearning-style baseline: ascend away from the original answer
        BaselineMode::GradientAscent => (&sample.sensitive_original_target, -1.0),
    }
}

/// One backward pass worth of gradient parts for every requested layer.
fn sample_edit_grads(
    model: &ToyModel,
    sample: &PairedSample,
    layers: &[usize],
    alpha: f64,
    mode: BaselineMode,
    masks: Option<&BTreeMap<usize, Vec<f64>>>,
) -> Result<SampleGrads> {
    let cfg = &model.config;
    let n_vis = cfg.n_visual_tokens;
    let vis = visual_prefix(cfg, sample.subject_id, sample.image_id);
    let (sen_target, sen_sign) = edit_targets(sample, mode);

    let mut g = Graph::new();
    let bound = model.bind_params(&mut g, GradParams::FfnLayers(layers));
    let (loss_sen_raw, sen_nodes) = sample_loss_nodes(
        &mut g,
        model,
        &bound,
        &vis,
        &sample.sensitive_query,
        sen_target,
        &[],
    )?;
    let (loss_ben, ben_nodes) = sample_loss_nodes(
        &mut g,
        model,
        &bound,
        &vis,
        &sample.benign_query,
        &sample.original_target,
        &[],
    )?;
    let sen_term = if sen_sign == 1.0 {
        loss_sen_raw
    } else {
        g.scale(loss_sen_raw, sen_sign)?
    };
    let ben_term = g.scale(loss_ben, alpha)?;
    let total = g.add(sen_term, ben_term)?;
    let loss_sen_val = g.value(loss_sen_raw).item();
    let loss_ben_val = g.value(loss_ben).item();
    if !loss_sen_val.is_finite() || !loss_ben_val.is_finite() {
        return Err(Error::Numeric(format!(
            "{}: non-finite edit loss",
            sample.sample_id
        )));
    }

    let record = TapSpec {
        mask: None,
        rows: None,
        record: true,
    };
    for &layer in layers {
        for nodes in [&sen_nodes, &ben_nodes] {
            g.attach_tap(nodes.layers[layer].ffn_out, record.clone())?;
            g.attach_tap(nodes.layers[layer].ffn_pre, record.clone())?;
        }
    }
    let grads = g.backward(total)?;

    let mut per_layer = BTreeMap::new();
    for &layer in layers {
        let w_down_key = ParamKey::layered(layer as u32, "ffn.w_down");
        let w_down_vals = model.param(&w_down_key);
        let mut subject = FfnGrads::zeros(cfg.d_model, cfg.d_ffn);
        let mut rest = FfnGrads::zeros(cfg.d_model, cfg.d_ffn);
        let mut masked_subject = masks.map(|_| FfnGrads::zeros(cfg.d_model, cfg.d_ffn));
        for (nodes, span) in [
            (&sen_nodes, sample.sensitive_span),
            (&ben_nodes, sample.benign_span),
        ] {
            let ln = &nodes.layers[layer];
            let tapes = ForwardTapes {
                x: g.value(ln.ffn_input).clone(),
                h: g.value(ln.ffn_hidden).clone(),
                pre: g.value(ln.ffn_pre).clone(),
                dy: grads
                    .tap_grad(ln.ffn_out)
                    .ok_or_else(|| Error::Graph("missing output tap gradient".into()))?
                    .clone(),
                dpre: grads
                    .tap_grad(ln.ffn_pre)
                    .ok_or_else(|| Error::Graph("missing pre-activation tap gradient".into()))?
                    .clone(),
                span: abs_rows(n_vis, span),
            };
            let masked_arg = masked_subject
                .as_mut()
                .map(|dst| (dst, masks.unwrap()[&layer].as_slice()));
            accumulate_forward(
                &tapes,
                w_down_vals,
                cfg.d_model,
                cfg.d_ffn,
                &mut subject,
                &mut rest,
                masked_arg,
            );
        }
        per_layer.insert(
            layer,
            LayerGradParts {
                subject,
                masked_subject,
                rest,
            },
        );
    }
    Ok(SampleGrads {
        per_layer,
        loss_sen: loss_sen_val,
        loss_benign: loss_ben_val,
    })
}

/// Split one layer's FFN gradient of the combined pair loss into the part
/// carried by subject-token rows and everything else. The two parts sum
/// to the whole gradient.
pub fn decompose_subject_gradient(
    model: &ToyModel,
    sample: &PairedSample,
    layer: usize,
    alpha: f64,
) -> Result<SubjectGradients> {
    if layer >= model.config.n_layers {
        return Err(Error::Config(format!(
            "layer {layer} outside 0..{}",
            model.config.n_layers
        )));
    }
    let empty = sample.sensitive_span.is_empty() && sample.benign_span.is_empty();
    if empty {
        // flagged degenerate case: everything lands in the rest part
        let full = sample_edit_grads(model, sample, &[layer], alpha, BaselineMode::Gated, None)?;
        let parts = &full.per_layer[&layer];
        let mut rest = parts.rest.clone();
        rest.add_assign(&parts.subject);
        return Ok(SubjectGradients {
            subject: FfnGrads::zeros(model.config.d_model, model.config.d_ffn),
            rest,
            empty_span: true,
        });
    }
    let grads = sample_edit_grads(model, sample, &[layer], alpha, BaselineMode::Gated, None)?;
    let parts = grads.per_layer.into_iter().next().unwrap().1;
    Ok(SubjectGradients {
        subject: parts.subject,
        rest: parts.rest,
        empty_span: false,
    })
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StepStats {
    pub loss_sen: f64,
    pub loss_benign: f64,
    /// Squared norm of the subject gradient before and after masking,
    /// summed over layers; their ratio is the truncated energy share.
    pub subject_energy: f64,
    pub masked_energy: f64,
}

/// One batch update. Gradients are averaged per sample in batch order,
/// the gate is applied to the subject part, and every plan layer's FFN
/// parameters take one optimizer step. Validation happens before any
/// mutation, so a failing step leaves the model untouched.
pub fn gated_step(
    model: &mut ToyModel,
    batch: &[PairedSample],
    plan: &EditPlan,
    opt: &mut Adam<ParamKey>,
) -> Result<StepStats> {
    plan.validate(model)?;
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let layers: Vec<usize> = plan.layers.keys().copied().collect();
    let masks: Option<BTreeMap<usize, Vec<f64>>> = match plan.mode {
        BaselineMode::Gated => Some(
            plan.layers
                .iter()
                .map(|(&l, gate)| (l, gate.binary_mask()))
                .collect(),
        ),
        BaselineMode::FullGradient | BaselineMode::GradientAscent => None,
    };

    let cfg = model.config.clone();
    let mut stats = StepStats::default();
    let mut acc: BTreeMap<usize, (FfnGrads, FfnGrads)> = layers
        .iter()
        .map(|&l| {
            (
                l,
                (
                    FfnGrads::zeros(cfg.d_model, cfg.d_ffn),
                    FfnGrads::zeros(cfg.d_model, cfg.d_ffn),
                ),
            )
        })
        .collect();

    for sample in batch {
        let grads = sample_edit_grads(
            model,
            sample,
            &layers,
            plan.alpha,
            plan.mode,
            masks.as_ref(),
        )?;
        stats.loss_sen += grads.loss_sen;
        stats.loss_benign += grads.loss_benign;
        for (layer, parts) in grads.per_layer {
            stats.subject_energy += parts.subject.sq_norm();
            let effective_subject = match &parts.masked_subject {
                Some(m) => {
                    stats.masked_energy += m.sq_norm();
                    m
                }
                None => {
                    stats.masked_energy += parts.subject.sq_norm();
                    &parts.subject
                }
            };
            let slot = acc.get_mut(&layer).unwrap();
            slot.0.add_assign(effective_subject);
            slot.1.add_assign(&parts.rest);
        }
    }
    stats.loss_sen /= batch.len() as f64;
    stats.loss_benign /= batch.len() as f64;

    let scale = 1.0 / batch.len() as f64;
    opt.begin_step();
    for (&layer, (subject, rest)) in acc.iter_mut() {
        subject.scale(scale);
        rest.scale(scale);
        let mut update = subject.clone();
        update.add_assign(rest);
        let keys = model.ffn_params(layer)?;
        opt.update(
            &keys.w_up,
            model.param_mut(&keys.w_up).data_mut(),
            &update.w_up,
        )?;
        opt.update(
            &keys.b_up,
            model.param_mut(&keys.b_up).data_mut(),
            &update.b_up,
        )?;
        opt.update(
            &keys.w_down,
            model.param_mut(&keys.w_down).data_mut(),
            &update.w_down,
        )?;
        opt.update(
            &keys.b_down,
            model.param_mut(&keys.b_down).data_mut(),
            &update.b_down,
        )?;
    }
    Ok(stats)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EditReport {
    pub mode: BaselineMode,
    pub epochs: usize,
    pub steps: usize,
    /// Mean (sensitive, benign) loss per epoch.
    pub epoch_losses: Vec<(f64, f64)>,
    /// L2 norm of each edited layer's parameter movement.
    pub delta_norms: BTreeMap<usize, f64>,
    /// Share of subject-gradient energy removed by the gate, over the run.
    pub masked_out_energy_fraction: f64,
    /// Not serialized: wall time is observational, never part of the
    /// deterministic record.
    #[serde(skip)]
    pub wall_time_secs: f64,
}

/// Run the full edit: seeded batch order, `epochs` passes of gated steps,
/// returning the edited model and a report. The input model is untouched.
pub fn run_edit(
    model: &ToyModel,
    train: &[PairedSample],
    plan: &EditPlan,
) -> Result<(ToyModel, EditReport)> {
    plan.validate(model)?;
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    if let Some(bad) = train
        .iter()
        .find(|s| matches!(s.split, SplitTag::Test | SplitTag::Generalization))
    {
        return Err(Error::Data(format!(
            "evaluation sample {} leaked into the edit set",
            bad.sample_id
        )));
    }
    let started = Instant::now();
    let mut edited = model.clone();
    let pre: BTreeMap<usize, Vec<Tensor>> = plan
        .layers
        .keys()
        .map(|&l| {
            let keys = model.ffn_params(l).unwrap();
            (
                l,
                keys.iter()
                    .into_iter()
                    .map(|k| model.param(&k).clone())
                    .collect(),
            )
        })
        .collect();

    let mut opt: Adam<ParamKey> = Adam::new(AdamConfig::with_lr(plan.learning_rate));
    let mut report = EditReport {
        mode: plan.mode,
        epochs: plan.epochs,
        steps: 0,
        epoch_losses: Vec::new(),
        delta_norms: BTreeMap::new(),
        masked_out_energy_fraction: 0.0,
        wall_time_secs: 0.0,
    };
    let mut subject_energy = 0.0;
    let mut masked_energy = 0.0;

    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        Rng::keyed(plan.batch_seed, &[0x65646974, epoch as u64]).shuffle(&mut order);
        let mut epoch_sen = 0.0;
        let mut epoch_ben = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<PairedSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let stats = gated_step(&mut edited, &batch, plan, &mut opt)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} batch {batches}: {e}")))?;
            epoch_sen += stats.loss_sen;
            epoch_ben += stats.loss_benign;
            subject_energy += stats.subject_energy;
            masked_energy += stats.masked_energy;
            batches += 1;
            report.steps += 1;
        }
        report
            .epoch_losses
            .push((epoch_sen / batches as f64, epoch_ben / batches as f64));
    }

    for (&layer, tensors) in &pre {
        let keys = edited.ffn_params(layer)?;
        let mut sq = 0.0;
        for (key, before) in keys.iter().into_iter().zip(tensors) {
            let after = edited.param(&key);
            sq += after
                .data()
                .iter()
                .zip(before.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        report.delta_norms.insert(layer, sq.sqrt());
    }
    report.masked_out_energy_fraction = if subject_energy > 0.0 {
        1.0 - masked_energy / subject_energy
    } else {
        0.0
    };
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((edited, report))
}

#[cfg(test)]
mod tests;
