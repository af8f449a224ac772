//! Decoder-only toy transformer with a synthetic visual prefix.
//!
//! Stands in for a vision-language backbone: a pseudo-random prefix keyed
//! by (subject, image) replaces the image encoder, and per-layer FFN
//! parameters are addressable for editing without touching attention.
//! Forward passes are pure functions of (parameters, inputs); all decoding
//! is greedy with lowest-id tie-breaking.

mod checkpoint;
mod config;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use config::{ModelConfig, ScalePoint};

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-5;

/// Half-open token span inside the text segment of a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectSpan {
    pub start: usize,
    pub end: usize,
}

impl SubjectSpan {
    pub fn new(start: usize, end: usize) -> Self {
        SubjectSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn validate(&self, text_len: usize) -> Result<()> {
        if self.start >= self.end || self.end > text_len {
            return Err(Error::Data(format!(
                "span {}..{} outside text of {text_len} tokens",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

/// Special token ids attached to a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub bos: u32,
    pub eos: u32,
    pub refuse: u32,
}

/// Identifies one parameter tensor: layer-local (`layer: Some(_)`) or
/// global (embeddings, final norm, head).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub layer: Option<u32>,
    pub name: &'static str,
}

impl ParamKey {
    pub fn global(name: &'static str) -> Self {
        ParamKey { layer: None, name }
    }

    pub fn layered(layer: u32, name: &'static str) -> Self {
        ParamKey {
            layer: Some(layer),
            name,
        }
    }
}

impl fmt::Display for ParamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(l) => write!(f, "l{l}.{}", self.name),
            None => write!(f, "g.{}", self.name),
        }
    }
}

pub const GLOBAL_PARAM_NAMES: [&str; 5] =
    ["emb.tok", "emb.pos", "ln_f.gain", "ln_f.bias", "head.w"];
pub const LAYER_PARAM_NAMES: [&str; 12] = [
    "ln1.gain",
    "ln1.bias",
    "attn.w_q",
    "attn.w_k",
    "attn.w_v",
    "attn.w_o",
    "ln2.gain",
    "ln2.bias",
    "ffn.w_up",
    "ffn.b_up",
    "ffn.w_down",
    "ffn.b_down",
];

/// Parse the canonical string form back into a key. Returns `None` for
/// unknown names so file loaders can reject rather than panic.
pub fn parse_param_key(s: &str) -> Option<ParamKey> {
    let intern = |name: &str, set: &[&'static str]| set.iter().find(|n| **n == name).copied();
    if let Some(rest) = s.strip_prefix("g.") {
        return intern(rest, &GLOBAL_PARAM_NAMES).map(ParamKey::global);
    }
    let rest = s.strip_prefix('l')?;
    let dot = rest.find('.')?;
    let layer: u32 = rest[..dot].parse().ok()?;
    intern(&rest[dot + 1..], &LAYER_PARAM_NAMES).map(|n| ParamKey::layered(layer, n))
}

/// Shapes of every parameter implied by a config, in key order.
pub fn expected_param_shapes(cfg: &ModelConfig) -> BTreeMap<ParamKey, Vec<usize>> {
    let d = cfg.d_model;
    let mut out = BTreeMap::new();
    out.insert(ParamKey::global("emb.tok"), vec![cfg.vocab_size, d]);
    out.insert(ParamKey::global("emb.pos"), vec![cfg.max_seq, d]);
    out.insert(ParamKey::global("ln_f.gain"), vec![d]);
    out.insert(ParamKey::global("ln_f.bias"), vec![d]);
    out.insert(ParamKey::global("head.w"), vec![d, cfg.vocab_size]);
    for l in 0..cfg.n_layers as u32 {
        out.insert(ParamKey::layered(l, "ln1.gain"), vec![d]);
        out.insert(ParamKey::layered(l, "ln1.bias"), vec![d]);
        out.insert(ParamKey::layered(l, "attn.w_q"), vec![d, d]);
        out.insert(ParamKey::layered(l, "attn.w_k"), vec![d, d]);
        out.insert(ParamKey::layered(l, "attn.w_v"), vec![d, d]);
        out.insert(ParamKey::layered(l, "attn.w_o"), vec![d, d]);
        out.insert(ParamKey::layered(l, "ln2.gain"), vec![d]);
        out.insert(ParamKey::layered(l, "ln2.bias"), vec![d]);
        out.insert(ParamKey::layered(l, "ffn.w_up"), vec![d, cfg.d_ffn]);
        out.insert(ParamKey::layered(l, "ffn.b_up"), vec![cfg.d_ffn]);
        out.insert(ParamKey::layered(l, "ffn.w_down"), vec![cfg.d_ffn, d]);
        out.insert(ParamKey::layered(l, "ffn.b_down"), vec![d]);
    }
    out
}

/// The four FFN parameter handles of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FfnParamKeys {
    pub w_up: ParamKey,
    pub b_up: ParamKey,
    pub w_down: ParamKey,
    pub b_down: ParamKey,
}

impl FfnParamKeys {
    pub fn iter(&self) -> [ParamKey; 4] {
        [self.w_up, self.b_up, self.w_down, self.b_down]
    }
}

/// A feature-scaling hook: multiply the hidden state at `span` of `layer`
/// element-wise by `vector` before the next layer sees it.
#[derive(Debug, Clone)]
pub struct ScaleHook {
    pub layer: usize,
    pub span: SubjectSpan,
    pub vector: Vec<f64>,
}

/// Which parameters participate in the gradient when building a graph.
#[derive(Debug, Clone)]
pub enum GradParams<'a> {
    None,
    All,
    FfnLayers(&'a [usize]),
}

/// Parameter leaves bound into one graph, shared across the forwards that
/// graph contains.
pub struct BoundParams {
    map: BTreeMap<ParamKey, NodeId>,
}

impl BoundParams {
    pub fn node(&self, key: &ParamKey) -> NodeId {
        self.map[key]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &NodeId)> {
        self.map.iter()
    }
}

/// Hook carried into a graph build: the scaling vector is already a leaf
/// (so it can require gradients for probing).
#[derive(Debug, Clone)]
pub struct GraphHook {
    pub layer: usize,
    pub span: SubjectSpan,
    pub node: NodeId,
}

/// Node handles for one layer's FFN path, used by gradient decomposition.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    /// post-ln2 FFN input (X)
    pub ffn_input: NodeId,
    /// pre-GELU activations (X @ w_up + b_up)
    pub ffn_pre: NodeId,
    /// post-GELU activations (H)
    pub ffn_hidden: NodeId,
    /// FFN output before the residual add (Y)
    pub ffn_out: NodeId,
    /// residual stream leaving the block
    pub block_out: NodeId,
}

pub struct ForwardNodes {
    pub logits: NodeId,
    pub layers: Vec<LayerNodes>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub special: SpecialTokens,
    params: BTreeMap<ParamKey, Tensor>,
}

impl ToyModel {
    /// Fresh model with seeded pseudo-random initialization.
    pub fn init(config: ModelConfig, special: SpecialTokens) -> Self {
        let shapes = expected_param_shapes(&config);
        let mut rng = Rng::keyed(config.seed, &[0x6d6f64656c]);
        let mut params = BTreeMap::new();
        for (key, shape) in shapes {
            let t = match key.name {
                "ln1.gain" | "ln2.gain" | "ln_f.gain" => Tensor::ones(&shape),
                "ln1.bias" | "ln2.bias" | "ln_f.bias" | "ffn.b_up" | "ffn.b_down" => {
                    Tensor::zeros(&shape)
                }
                _ => Tensor::from_fn(&shape, |_| 0.02 * rng.normal()),
            };
            params.insert(key, t);
        }
        ToyModel {
            config,
            special,
            params,
        }
    }

    /// Rebuild from explicit parts (checkpoint loading, test rigs).
    pub fn from_parts(
        config: ModelConfig,
        special: SpecialTokens,
        params: BTreeMap<ParamKey, Tensor>,
    ) -> Result<Self> {
        let expected = expected_param_shapes(&config);
        if params.len() != expected.len() {
            return Err(Error::Format(format!(
                "{} parameters, expected {}",
                params.len(),
                expected.len()
            )));
        }
        for (key, shape) in &expected {
            match params.get(key) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter {key} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {key}"))),
            }
        }
        Ok(ToyModel {
            config,
            special,
            params,
        })
    }

    pub fn param(&self, key: &ParamKey) -> &Tensor {
        &self.params[key]
    }

    pub fn param_mut(&mut self, key: &ParamKey) -> &mut Tensor {
        self.params.get_mut(key).expect("unknown parameter key")
    }

    pub fn params(&self) -> &BTreeMap<ParamKey, Tensor> {
        &self.params
    }

    /// Handles covering exactly the FFN parameters of one layer.
    pub fn ffn_params(&self, layer: usize) -> Result<FfnParamKeys> {
        if layer >= self.config.n_layers {
            return Err(Error::Config(format!(
                "layer {layer} outside 0..{}",
                self.config.n_layers
            )));
        }
        let l = layer as u32;
        Ok(FfnParamKeys {
            w_up: ParamKey::layered(l, "ffn.w_up"),
            b_up: ParamKey::layered(l, "ffn.b_up"),
            w_down: ParamKey::layered(l, "ffn.w_down"),
            b_down: ParamKey::layered(l, "ffn.b_down"),
        })
    }

    /// Bind every parameter into `g` as a leaf; `mode` selects which of
    /// them require gradients.
    pub fn bind_params(&self, g: &mut Graph, mode: GradParams) -> BoundParams {
        let mut map = BTreeMap::new();
        for (key, tensor) in &self.params {
            let rg = match &mode {
                GradParams::None => false,
                GradParams::All => true,
                GradParams::FfnLayers(layers) => {
                    key.name.starts_with("ffn.")
                        && key
                            .layer
                            .map(|l| layers.contains(&(l as usize)))
                            .unwrap_or(false)
                }
            };
            map.insert(*key, g.leaf(tensor.clone(), rg));
        }
        BoundParams { map }
    }

    fn validate_inputs(
        &self,
        vis: &Tensor,
        text: &[u32],
        spans: &[(usize, SubjectSpan)],
    ) -> Result<()> {
        let cfg = &self.config;
        if vis.shape() != [cfg.n_visual_tokens, cfg.d_model] {
            return Err(Error::Shape(format!(
                "visual prefix of {:?}, expected [{}, {}]",
                vis.shape(),
                cfg.n_visual_tokens,
                cfg.d_model
            )));
        }
        if text.is_empty() {
            return Err(Error::Data("empty text segment".into()));
        }
        let total = cfg.n_visual_tokens + text.len();
        if total > cfg.max_seq {
            return Err(Error::Data(format!(
                "sequence of {total} tokens exceeds max_seq {}",
                cfg.max_seq
            )));
        }
        for (layer, span) in spans {
            if *layer >= cfg.n_layers {
                return Err(Error::Config(format!(
                    "hook layer {layer} outside 0..{}",
                    cfg.n_layers
                )));
            }
            span.validate(text.len())?;
        }
        Ok(())
    }

    /// Build the full forward computation into `g`, returning per-layer
    /// node handles. Hooks scale the configured tap point at the span's
    /// absolute rows. Several forwards may share one graph (and one
    /// parameter binding) so their losses can be combined.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        vis: &Tensor,
        text: &[u32],
        hooks: &[GraphHook],
    ) -> Result<ForwardNodes> {
        let spans: Vec<(usize, SubjectSpan)> = hooks.iter().map(|h| (h.layer, h.span)).collect();
        self.validate_inputs(vis, text, &spans)?;
        {
            let mut layers: Vec<usize> = hooks.iter().map(|h| h.layer).collect();
            layers.sort_unstable();
            layers.dedup();
            if layers.len() != hooks.len() {
                return Err(Error::Config("two hooks on one layer".into()));
            }
        }
        let cfg = &self.config;
        let n_vis = cfg.n_visual_tokens;
        let total = n_vis + text.len();
        let p = |name: &'static str| bound.node(&ParamKey::global(name));
        let pl = |l: usize, name: &'static str| bound.node(&ParamKey::layered(l as u32, name));

        let x_text = g.embed(p("emb.tok"), text)?;
        let mut x = if n_vis > 0 {
            let vis_leaf = g.leaf(vis.clone(), false);
            g.concat_rows(&[vis_leaf, x_text])?
        } else {
            x_text
        };
        let pos = g.slice_rows(p("emb.pos"), 0, total)?;
        x = g.add(x, pos)?;

        let mut layer_nodes = Vec::with_capacity(cfg.n_layers);
        let dh = cfg.head_dim();
        for l in 0..cfg.n_layers {
            let ln1 = g.layer_norm(x, pl(l, "ln1.gain"), pl(l, "ln1.bias"), LN_EPS)?;
            let q = g.matmul(ln1, pl(l, "attn.w_q"))?;
            let k = g.matmul(ln1, pl(l, "attn.w_k"))?;
            let v = g.matmul(ln1, pl(l, "attn.w_v"))?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let (s, e) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(q, s, e)?;
                let kh = g.slice_cols(k, s, e)?;
                let vh = g.slice_cols(v, s, e)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let probs = g.causal_softmax(scaled)?;
                heads.push(g.matmul(probs, vh)?);
            }
            let ctx = g.concat_cols(&heads)?;
            let attn_out = g.matmul(ctx, pl(l, "attn.w_o"))?;
            x = g.add(x, attn_out)?;

            let ffn_input = g.layer_norm(x, pl(l, "ln2.gain"), pl(l, "ln2.bias"), LN_EPS)?;
            let up = g.matmul(ffn_input, pl(l, "ffn.w_up"))?;
            let ffn_pre = g.add_bias(up, pl(l, "ffn.b_up"))?;
            let ffn_hidden = g.gelu(ffn_pre)?;
            let down = g.matmul(ffn_hidden, pl(l, "ffn.w_down"))?;
            let mut ffn_out = g.add_bias(down, pl(l, "ffn.b_down"))?;

            let hook = hooks.iter().find(|h| h.layer == l);
            if let (Some(h), ScalePoint::FfnOut) = (hook, cfg.scale_point) {
                let rows = abs_rows(n_vis, h.span);
                ffn_out = g.scale_rows(ffn_out, h.node, rows)?;
            }
            x = g.add(x, ffn_out)?;
            if let (Some(h), ScalePoint::ResidualOut) = (hook, cfg.scale_point) {
                let rows = abs_rows(n_vis, h.span);
                x = g.scale_rows(x, h.node, rows)?;
            }
            layer_nodes.push(LayerNodes {
                ffn_input,
                ffn_pre,
                ffn_hidden,
                ffn_out,
                block_out: x,
            });
        }

        let ln_f = g.layer_norm(x, p("ln_f.gain"), p("ln_f.bias"), LN_EPS)?;
        let logits = g.matmul(ln_f, p("head.w"))?;
        Ok(ForwardNodes {
            logits,
            layers: layer_nodes,
        })
    }

    /// Logits over the vocabulary at every position.
    pub fn forward(&self, vis: &Tensor, text: &[u32], hooks: &[ScaleHook]) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind_params(&mut g, GradParams::None);
        let graph_hooks: Vec<GraphHook> = hooks
            .iter()
            .map(|h| -> Result<GraphHook> {
                if h.vector.len() != self.config.d_model {
                    return Err(Error::Shape(format!(
                        "hook vector of {} values for d_model {}",
                        h.vector.len(),
                        self.config.d_model
                    )));
                }
                Ok(GraphHook {
                    layer: h.layer,
                    span: h.span,
                    node: g.leaf(Tensor::from_vec(h.vector.clone()), false),
                })
            })
            .collect::<Result<_>>()?;
        let nodes = self.forward_graph(&mut g, &bound, vis, text, &graph_hooks)?;
        Ok(g.value(nodes.logits).clone())
    }

    /// Greedy continuation: argmax at each step, ties broken by lowest
    /// token id, stopping after EOS or `max_new` tokens (or when the
    /// context window fills). Returns only the generated tokens.
    pub fn generate(&self, vis: &Tensor, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(Error::Config("max_new must be at least 1".into()));
        }
        if self.config.n_visual_tokens + prompt.len() > self.config.max_seq {
            return Err(Error::Data(format!(
                "prompt of {} tokens exceeds max_seq {}",
                prompt.len(),
                self.config.max_seq
            )));
        }
        let mut text = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_new {
            if self.config.n_visual_tokens + text.len() >= self.config.max_seq {
                break;
            }
            let logits = self.forward(vis, &text, &[])?;
            let last = logits.row(logits.rows() - 1);
            let mut best = 0usize;
            for (j, &v) in last.iter().enumerate() {
                if v > last[best] {
                    best = j;
                }
            }
            let tok = best as u32;
            text.push(tok);
            out.push(tok);
            if tok == self.special.eos {
                break;
            }
        }
        Ok(out)
    }
}

pub fn abs_rows(n_vis: usize, span: SubjectSpan) -> Range<usize> {
    n_vis + span.start..n_vis + span.end
}

/// Deterministic stand-in for an image encoder: a pseudo-random prefix
/// keyed by (subject, image) alone, so the same pair always feeds the
/// model the same "image".
pub fn visual_prefix(cfg: &ModelConfig, subject_id: u32, image_id: u32) -> Tensor {
    let mut rng = Rng::keyed(0x76697375616c, &[subject_id as u64, image_id as u64]);
    Tensor::from_fn(&[cfg.n_visual_tokens, cfg.d_model], |_| 0.1 * rng.normal())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 24,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 16,
            max_seq: 16,
            n_visual_tokens: 2,
            seed: 7,
            scale_point: ScalePoint::ResidualOut,
        }
    }

    fn specials() -> SpecialTokens {
        SpecialTokens {
            bos: 1,
            eos: 2,
            refuse: 3,
        }
    }

    fn model() -> ToyModel {
        ToyModel::init(tiny_config(), specials())
    }

    fn vis(m: &ToyModel) -> Tensor {
        visual_prefix(&m.config, 0, 0)
    }

    #[test]
    fn forward_shapes() {
        let m = model();
        let logits = m.forward(&vis(&m), &[1, 4, 5], &[]).unwrap();
        assert_eq!(logits.shape(), &[5, 24]); // 2 visual + 3 text rows
    }

    #[test]
    fn identity_hook_is_noop() {
        let m = model();
        let text = [1u32, 4, 5, 6];
        let plain = m.forward(&vis(&m), &text, &[]).unwrap();
        let hooked = m
            .forward(
                &vis(&m),
                &text,
                &[ScaleHook {
                    layer: 1,
                    span: SubjectSpan::new(1, 3),
                    vector: vec![1.0; 8],
                }],
            )
            .unwrap();
        assert!(plain.bit_eq(&hooked));
    }

    #[test]
    fn zero_hook_respects_causality() {
        let m = model();
        let text = [1u32, 4, 5, 6];
        let plain = m.forward(&vis(&m), &text, &[]).unwrap();
        let hooked = m
            .forward(
                &vis(&m),
                &text,
                &[ScaleHook {
                    layer: 0,
                    span: SubjectSpan::new(2, 3),
                    vector: vec![0.0; 8],
                }],
            )
            .unwrap();
        // span starts at text position 2 = absolute row 4; rows before it
        // cannot see the change
        for row in 0..4 {
            for j in 0..24 {
                assert_eq!(
                    plain.at(row, j).to_bits(),
                    hooked.at(row, j).to_bits(),
                    "row {row}"
                );
            }
        }
        // the scaled row itself must differ somewhere downstream
        assert!((0..24).any(|j| plain.at(4, j) != hooked.at(4, j)));
    }

    #[test]
    fn disjoint_hooks_compose_order_free() {
        let m = model();
        let text = [1u32, 4, 5, 6];
        let h0 = ScaleHook {
            layer: 0,
            span: SubjectSpan::new(1, 2),
            vector: (0..8).map(|i| if i % 2 == 0 { 0.5 } else { 1.0 }).collect(),
        };
        let h1 = ScaleHook {
            layer: 1,
            span: SubjectSpan::new(1, 2),
            vector: (0..8)
                .map(|i| if i % 3 == 0 { -1.0 } else { 1.0 })
                .collect(),
        };
        let a = m
            .forward(&vis(&m), &text, &[h0.clone(), h1.clone()])
            .unwrap();
        let b = m.forward(&vis(&m), &text, &[h1, h0]).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn hook_errors() {
        let m = model();
        let text = [1u32, 4];
        let out_of_layer = m.forward(
            &vis(&m),
            &text,
            &[ScaleHook {
                layer: 9,
                span: SubjectSpan::new(0, 1),
                vector: vec![1.0; 8],
            }],
        );
        assert!(out_of_layer.is_err());
        let bad_span = m.forward(
            &vis(&m),
            &text,
            &[ScaleHook {
                layer: 0,
                span: SubjectSpan::new(1, 5),
                vector: vec![1.0; 8],
            }],
        );
        assert!(bad_span.is_err());
    }

    #[test]
    fn ffn_handles_disjoint_and_counted() {
        let m = model();
        let h0 = m.ffn_params(0).unwrap();
        let h1 = m.ffn_params(1).unwrap();
        let set0: std::collections::BTreeSet<_> = h0.iter().into_iter().collect();
        assert!(h1.iter().into_iter().all(|k| !set0.contains(&k)));
        let total: usize = h0.iter().into_iter().map(|k| m.param(&k).numel()).sum();
        let cfg = &m.config;
        assert_eq!(total, 2 * cfg.d_model * cfg.d_ffn + cfg.d_ffn + cfg.d_model);
        assert!(m.ffn_params(2).is_err());
    }

    #[test]
    fn mutating_ffn_handle_changes_forward() {
        let mut m = model();
        let text = [1u32, 4, 5];
        let before = m.forward(&vis(&m), &text, &[]).unwrap();
        let keys = m.ffn_params(0).unwrap();
        m.param_mut(&keys.w_up).data_mut()[0] += 0.5;
        let after = m.forward(&vis(&m), &text, &[]).unwrap();
        assert!(!before.bit_eq(&after));
    }

    #[test]
    fn generate_one_token_contract() {
        let m = model();
        let out = m.generate(&vis(&m), &[1, 4], 1).unwrap();
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn generate_deterministic() {
        let m = model();
        let a = m.generate(&vis(&m), &[1, 4, 5], 6).unwrap();
        let b = m.generate(&vis(&m), &[1, 4, 5], 6).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generate_stops_at_forced_eos() {
        // rig: zero every weight, bias the head toward EOS via ln_f.bias
        let mut m = model();
        let keys: Vec<ParamKey> = m.params().keys().copied().collect();
        for k in keys {
            let t = m.param_mut(&k);
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        // ln_f.gain zeroed too: logits = bias @ head.w
        let eos = m.special.eos as usize;
        {
            let t = m.param_mut(&ParamKey::global("ln_f.bias"));
            t.data_mut()[0] = 1.0;
        }
        {
            let t = m.param_mut(&ParamKey::global("head.w"));
            t.data_mut()[eos] = 5.0;
        }
        let out = m.generate(&vis(&m), &[1, 4], 8).unwrap();
        assert_eq!(out, vec![m.special.eos]);
    }

    #[test]
    fn prompt_overflow_rejected() {
        let m = model();
        let long: Vec<u32> = vec![4; 20];
        assert!(m.generate(&vis(&m), &long, 1).is_err());
    }

    #[test]
    fn ffn_update_leaves_attention_bitwise_alone() {
        // pre-FFN activations are a pure function of non-FFN parameters;
        // check by comparing ln2 output (FFN input) node values
        let m = model();
        let mut edited = m.clone();
        let keys = edited.ffn_params(1).unwrap();
        for val in edited.param_mut(&keys.w_down).data_mut() {
            *val += 0.3;
        }
        let text = [1u32, 4, 5];
        let probe = |mm: &ToyModel| -> Vec<u64> {
            let mut g = Graph::new();
            let bound = mm.bind_params(&mut g, GradParams::None);
            let nodes = mm
                .forward_graph(&mut g, &bound, &vis(mm), &text, &[])
                .unwrap();
            g.value(nodes.layers[1].ffn_input)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(probe(&m), probe(&edited));
    }

    #[test]
    fn visual_prefix_keyed_and_stable() {
        let cfg = tiny_config();
        let a = visual_prefix(&cfg, 3, 1);
        let b = visual_prefix(&cfg, 3, 1);
        let c = visual_prefix(&cfg, 3, 2);
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }
}
