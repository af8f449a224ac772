//! Supervised pre-training of the base model on benign QA.
//!
//! The pre-edit model must answer benign questions (so there is utility to
//! preserve) and must not refuse anything (so refusal gains are
//! attributable to editing). Training therefore sees only benign queries
//! with answer-grammar targets.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::model::{visual_prefix, GradParams, ParamKey, ToyModel};
use crate::optim::{Adam, AdamConfig};
use crate::rng::Rng;
use crate::synth::PairedSample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Also teach the answers to sensitive queries, the way a deployed
    /// model knows the private values it should not reveal.
    #[serde(default = "default_true")]
    pub include_sensitive_qa: bool,
    /// Fraction of training draws whose target is replaced by the refusal
    /// response, uncorrelated with the query: the model acquires a small
    /// unconditional refusal mass, standing in for prior safety tuning.
    #[serde(default = "default_refusal_fraction")]
    pub refusal_fraction: f64,
    /// Decoupled weight decay; keeps residual magnitudes in a range where
    /// later feature-space interventions stay well conditioned.
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_true() -> bool {
    true
}

fn default_refusal_fraction() -> f64 {
    0.05
}

fn default_weight_decay() -> f64 {
    0.02
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1200,
            batch_size: 4,
            learning_rate: 5e-3,
            seed: 0,
            include_sensitive_qa: true,
            refusal_fraction: 0.05,
            weight_decay: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    /// Mean batch loss every few steps, for inspection.
    pub loss_trace: Vec<f64>,
}

/// Next-token supervision for `query ++ target` behind `n_vis` prefix rows.
///
/// Returns the text fed to the model (everything but the last token), the
/// per-row target ids, and per-row weights selecting exactly the rows that
/// predict target tokens.
pub fn lm_rows(n_vis: usize, query_len: usize, full: &[u32]) -> (Vec<u32>, Vec<u32>, Vec<f64>) {
    debug_assert!(query_len >= 1 && query_len < full.len());
    let input: Vec<u32> = full[..full.len() - 1].to_vec();
    let rows = n_vis + input.len();
    let mut targets = vec![0u32; rows];
    let mut weights = vec![0.0; rows];
    for p in 0..input.len() {
        let next = full[p + 1];
        targets[n_vis + p] = next;
        if p + 1 >= query_len {
            weights[n_vis + p] = 1.0;
        }
    }
    (input, targets, weights)
}

/// One sample's loss graph contribution: cross-entropy of the model's
/// continuation of `query` toward `target`, with optional scaling hooks.
/// Returns the loss node and the per-layer forward handles.
pub fn sample_loss_nodes(
    g: &mut Graph,
    model: &ToyModel,
    bound: &crate::model::BoundParams,
    vis: &Tensor,
    query: &[u32],
    target: &[u32],
    hooks: &[crate::model::GraphHook],
) -> Result<(crate::autodiff::NodeId, crate::model::ForwardNodes)> {
    if target.is_empty() {
        return Err(Error::Data("zero-length target".into()));
    }
    let mut full = query.to_vec();
    full.extend_from_slice(target);
    let (input, targets, weights) = lm_rows(model.config.n_visual_tokens, query.len(), &full);
    let nodes = model.forward_graph(g, bound, vis, &input, hooks)?;
    let loss = g.cross_entropy(nodes.logits, &targets, Some(&weights))?;
    Ok((loss, nodes))
}

pub fn sample_loss(
    g: &mut Graph,
    model: &ToyModel,
    bound: &crate::model::BoundParams,
    vis: &Tensor,
    query: &[u32],
    target: &[u32],
) -> Result<crate::autodiff::NodeId> {
    sample_loss_nodes(g, model, bound, vis, query, target, &[]).map(|(l, _)| l)
}

pub fn train_base(
    model: &mut ToyModel,
    train: &[PairedSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("steps and batch_size must be nonzero".into()));
    }
    if !(0.0..=1.0).contains(&cfg.refusal_fraction) {
        return Err(Error::Config(format!(
            "refusal_fraction {} outside [0, 1]",
            cfg.refusal_fraction
        )));
    }
    let mut opt: Adam<ParamKey> =
        Adam::new(AdamConfig::with_decay(cfg.learning_rate, cfg.weight_decay));
    let mut report = TrainReport {
        steps: cfg.steps,
        first_loss: 0.0,
        final_loss: 0.0,
        loss_trace: Vec::new(),
    };

    for step in 0..cfg.steps {
        let mut rng = Rng::keyed(cfg.seed, &[0x747261696e, step as u64]);
        let mut grad_acc: std::collections::BTreeMap<ParamKey, Vec<f64>> =
            std::collections::BTreeMap::new();
        let mut batch_loss = 0.0;
        for _ in 0..cfg.batch_size {
            let s = &train[rng.below(train.len())];
            let vis = visual_prefix(&model.config, s.subject_id, s.image_id);
            let sensitive_side = cfg.include_sensitive_qa && rng.chance(0.5);
            let (query, mut target) = if sensitive_side {
                (&s.sensitive_query, s.sensitive_original_target.as_slice())
            } else {
                (&s.benign_query, s.original_target.as_slice())
            };
            if rng.chance(cfg.refusal_fraction) {
                target = s.refusal_target.as_slice();
            }
            let mut g = Graph::new();
            let bound = model.bind_params(&mut g, GradParams::All);
            let loss = sample_loss(&mut g, model, &bound, &vis, query, target)?;
            let loss_val = g.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite base-training loss at step {step}"
                )));
            }
            batch_loss += loss_val;
            let grads = g.backward(loss)?;
            for (key, node) in bound.iter() {
                let gt = grads.grad(*node).expect("all params require grad");
                let acc = grad_acc
                    .entry(*key)
                    .or_insert_with(|| vec![0.0; gt.numel()]);
                for (a, v) in acc.iter_mut().zip(gt.data()) {
                    *a += v;
                }
            }
        }
        batch_loss /= cfg.batch_size as f64;
        if step == 0 {
            report.first_loss = batch_loss;
        }
        if step % 10 == 0 || step + 1 == cfg.steps {
            report.loss_trace.push(batch_loss);
        }
        report.final_loss = batch_loss;

        opt.begin_step();
        let scale = 1.0 / cfg.batch_size as f64;
        for (key, mut grad) in grad_acc {
            for v in grad.iter_mut() {
                *v *= scale;
            }
            opt.update(&key, model.param_mut(&key).data_mut(), &grad)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, SpecialTokens};
    use crate::synth::{build_corpus, default_subjects, tokens};

    #[test]
    fn lm_rows_alignment() {
        // query [10, 11], target [20, 21]; no visual prefix
        let (input, targets, weights) = lm_rows(0, 2, &[10, 11, 20, 21]);
        assert_eq!(input, vec![10, 11, 20]);
        assert_eq!(targets, vec![11, 20, 21]);
        assert_eq!(weights, vec![0.0, 1.0, 1.0]);
        // with a prefix the supervised rows shift right
        let (input2, targets2, weights2) = lm_rows(2, 2, &[10, 11, 20, 21]);
        assert_eq!(input2, vec![10, 11, 20]);
        assert_eq!(targets2, vec![0, 0, 11, 20, 21]);
        assert_eq!(weights2, vec![0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn loss_decreases_on_tiny_corpus() {
        let cfg = ModelConfig {
            vocab_size: 256,
            d_model: 16,
            n_layers: 6,
            n_heads: 2,
            d_ffn: 32,
            max_seq: 48,
            n_visual_tokens: 2,
            seed: 1,
            ..ModelConfig::default()
        };
        let mut model = ToyModel::init(cfg, tokens::default_special_tokens());
        let (samples, _) = build_corpus(&default_subjects(1), 2, &[], 0).unwrap();
        let report = train_base(
            &mut model,
            &samples,
            &TrainConfig {
                steps: 30,
                batch_size: 2,
                learning_rate: 3e-3,
                seed: 0,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        assert!(
            report.final_loss < report.first_loss,
            "first {} final {}",
            report.first_loss,
            report.final_loss
        );
    }

    #[test]
    fn training_deterministic() {
        let cfg = ModelConfig {
            vocab_size: 256,
            d_model: 16,
            n_layers: 6,
            n_heads: 2,
            d_ffn: 32,
            max_seq: 48,
            n_visual_tokens: 2,
            seed: 1,
            ..ModelConfig::default()
        };
        let specials = SpecialTokens {
            bos: tokens::BOS,
            eos: tokens::EOS,
            refuse: tokens::REFUSE,
        };
        let (samples, _) = build_corpus(&default_subjects(1), 2, &[], 0).unwrap();
        let tc = TrainConfig {
            steps: 10,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = ToyModel::init(cfg.clone(), specials);
            train_base(&mut m, &samples, &tc).unwrap();
            crate::model::encode_checkpoint(&m).unwrap()
        };
        assert_eq!(run(), run());
    }
}
