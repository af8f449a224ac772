//! Reverse-mode differentiation over a linear tape.
//!
//! Operations record themselves in creation order; `backward` replays the
//! tape in reverse, accumulating vector-Jacobian products. The op set is
//! exactly what the toy transformer needs — nothing speculative.
//!
//! Gradient taps can be attached to any node. A tap optionally records the
//! gradient arriving at that node (pre-mask) and optionally multiplies it
//! element-wise by a 0/1 feature mask, restricted to a row range, before
//! the gradient continues upstream. Taps are how subject-position gradient
//! truncation is realized without touching the op implementations.

use std::collections::BTreeMap;
use std::ops::Range;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// [m,k] @ [k,n]
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// [m,k] @ [n,k]^T
    MatMulNt {
        a: NodeId,
        b: NodeId,
    },
    /// same-shape element-wise sum
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// [r,c] + [c] broadcast over rows
    AddBias {
        a: NodeId,
        bias: NodeId,
    },
    /// same-shape element-wise product
    Mul {
        a: NodeId,
        b: NodeId,
    },
    /// constant * a
    Scale {
        a: NodeId,
        c: f64,
    },
    /// a - constant
    SubConst {
        a: NodeId,
    },
    Abs {
        a: NodeId,
    },
    Clamp {
        a: NodeId,
        lo: f64,
        hi: f64,
    },
    Gelu {
        a: NodeId,
    },
    /// rows in `rows` multiplied element-wise by vector `v` ([c])
    ScaleRows {
        a: NodeId,
        v: NodeId,
        rows: Range<usize>,
    },
    /// row-wise softmax; `causal` masks columns j > i (requires square input)
    Softmax {
        a: NodeId,
        causal: bool,
    },
    /// row-wise layer normalization with learned gain and bias
    LayerNorm {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    },
    /// rows of `table` gathered by token id
    Embed {
        table: NodeId,
        ids: Vec<u32>,
    },
    Mean {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    /// weighted mean of -log softmax(logits)[target] over supervised rows
    CrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        weights: Vec<f64>,
    },
    SliceRows {
        a: NodeId,
        start: usize,
        end: usize,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        end: usize,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Tap configuration attached to a node before `backward`.
#[derive(Debug, Clone, Default)]
pub struct TapSpec {
    /// 0/1 multiplier per trailing-dimension feature. `None` records only.
    pub mask: Option<Vec<f64>>,
    /// Row range the mask applies to; `None` means every row.
    pub rows: Option<Range<usize>>,
    /// Keep a copy of the pre-mask gradient, retrievable after backward.
    pub record: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    taps: BTreeMap<usize, TapSpec>,
    consumed: bool,
}

/// Gradients produced by one backward pass.
pub struct BackwardResult {
    grads: Vec<Option<Tensor>>,
    tap_grads: BTreeMap<usize, Tensor>,
}

impl BackwardResult {
    /// Gradient accumulated at a node, if any reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Pre-mask gradient recorded by a tap with `record: true`.
    pub fn tap_grad(&self, id: NodeId) -> Option<&Tensor> {
        self.tap_grads.get(&id.0)
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            taps: BTreeMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "graph already consumed by backward; rebuild to run again".into(),
            ));
        }
        Ok(())
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMul { a, b }, Tensor::new(vec![m, n], data)?, rg))
    }

    /// a @ b^T with b stored row-major as [n, k].
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Shape(format!("matmul_nt of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let data = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatMulNt { a, b }, Tensor::new(vec![m, n], data)?, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("add of {sa:?} and {sb:?}")));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = sa.to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add { a, b }, Tensor::new(shape, data)?, rg))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sb) = (self.value(a).shape(), self.value(bias).shape());
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("add_bias of {sa:?} and {sb:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let mut data = self.value(a).data().to_vec();
        let bv = self.value(bias).data();
        for row in 0..r {
            for j in 0..c {
                data[row * c + j] += bv[j];
            }
        }
        let rg = self.any_grad(&[a, bias]);
        Ok(self.push(Op::AddBias { a, bias }, Tensor::new(vec![r, c], data)?, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!(
                "element-wise mul of {sa:?} and {sb:?}"
            )));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = sa.to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(shape, data)?, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_live()?;
        let data: Vec<f64> = self.value(a).data().iter().map(|x| c * x).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Scale { a, c }, Tensor::new(shape, data)?, rg))
    }

    pub fn sub_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_live()?;
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x - c).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::SubConst { a }, Tensor::new(shape, data)?, rg))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x.abs()).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Abs { a }, Tensor::new(shape, data)?, rg))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.check_live()?;
        if !(lo < hi) {
            return Err(Error::Config(format!("clamp bounds lo={lo} hi={hi}")));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|x| x.min(hi).max(lo))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Clamp { a, lo, hi }, Tensor::new(shape, data)?, rg))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| kernels::gelu(x))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Gelu { a }, Tensor::new(shape, data)?, rg))
    }

    /// Rows in `rows` are multiplied element-wise by `v`; other rows pass
    /// through unchanged. Realizes the per-span feature scaling hook.
    pub fn scale_rows(&mut self, a: NodeId, v: NodeId, rows: Range<usize>) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sv) = (self.value(a).shape(), self.value(v).shape());
        if sa.len() != 2 || sv.len() != 1 || sv[0] != sa[1] {
            return Err(Error::Shape(format!("scale_rows of {sa:?} by {sv:?}")));
        }
        if rows.start >= rows.end || rows.end > sa[0] {
            return Err(Error::Shape(format!(
                "scale_rows range {rows:?} outside {} rows",
                sa[0]
            )));
        }
        let (r, c) = (sa[0], sa[1]);
        let mut data = self.value(a).data().to_vec();
        let vv = self.value(v).data();
        for row in rows.clone() {
            for j in 0..c {
                data[row * c + j] *= vv[j];
            }
        }
        let rg = self.any_grad(&[a, v]);
        Ok(self.push(
            Op::ScaleRows { a, v, rows },
            Tensor::new(vec![r, c], data)?,
            rg,
        ))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.softmax_inner(a, false)
    }

    /// Softmax with lower-triangular visibility; input must be square.
    pub fn causal_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.softmax_inner(a, true)
    }

    fn softmax_inner(&mut self, a: NodeId, causal: bool) -> Result<NodeId> {
        self.check_live()?;
        let sa = self.value(a).shape();
        let (r, c) = match sa.len() {
            1 => (1, sa[0]),
            2 => (sa[0], sa[1]),
            _ => return Err(Error::Shape(format!("softmax of {sa:?}"))),
        };
        if causal && r != c {
            return Err(Error::Shape(format!("causal softmax of {sa:?}")));
        }
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let visible = if causal { i + 1 } else { c };
            kernels::softmax_into(
                &src[i * c..(i + 1) * c],
                &mut data[i * c..(i + 1) * c],
                visible,
            );
        }
        let shape = sa.to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Softmax { a, causal }, Tensor::new(shape, data)?, rg))
    }

    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sg, sb) = (
            self.value(a).shape(),
            self.value(gain).shape(),
            self.value(bias).shape(),
        );
        if sa.len() != 2 || sg.len() != 1 || sb.len() != 1 || sg[0] != sa[1] || sb[0] != sa[1] {
            return Err(Error::Shape(format!(
                "layer_norm of {sa:?} with gain {sg:?} bias {sb:?}"
            )));
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                data[i * c + j] = gv[j] * xh + bv[j];
            }
        }
        let rg = self.any_grad(&[a, gain, bias]);
        Ok(self.push(
            Op::LayerNorm { a, gain, bias, eps },
            Tensor::new(vec![r, c], data)?,
            rg,
        ))
    }

    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        self.check_live()?;
        let st = self.value(table).shape();
        if st.len() != 2 {
            return Err(Error::Shape(format!("embedding table of {st:?}")));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= v) {
            return Err(Error::Data(format!(
                "token id {bad} outside vocabulary of {v}"
            )));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id as usize * d..(id as usize + 1) * d]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), d], data)?,
            rg,
        ))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Mean { a }, Tensor::scalar(m), rg))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Op::Sum { a }, Tensor::scalar(s), rg))
    }

    /// Mean over weighted rows of -log softmax(logits[row])[target[row]].
    /// `weights` of `None` supervises every row equally.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        weights: Option<&[f64]>,
    ) -> Result<NodeId> {
        self.check_live()?;
        let sl = self.value(logits).shape();
        if sl.len() != 2 {
            return Err(Error::Shape(format!("cross_entropy logits of {sl:?}")));
        }
        let (t, v) = (sl[0], sl[1]);
        if targets.len() != t {
            return Err(Error::Shape(format!(
                "{} targets for {t} logit rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&id| id as usize >= v) {
            return Err(Error::Data(format!(
                "target id {bad} outside vocabulary of {v}"
            )));
        }
        let weights: Vec<f64> = match weights {
            Some(w) => {
                if w.len() != t {
                    return Err(Error::Shape(format!("{} weights for {t} rows", w.len())));
                }
                if w.iter().any(|&x| x < 0.0) {
                    return Err(Error::Data("negative position weight".into()));
                }
                w.to_vec()
            }
            None => vec![1.0; t],
        };
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(Error::Data("no supervised positions".into()));
        }
        let src = self.value(logits).data();
        let mut loss = 0.0;
        for i in 0..t {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &src[i * v..(i + 1) * v];
            let lse = kernels::log_sum_exp(row);
            loss += weights[i] * (lse - row[targets[i] as usize]);
        }
        loss /= wsum;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check_live()?;
        let sa = self.value(a).shape();
        if sa.len() != 2 || start >= end || end > sa[0] {
            return Err(Error::Shape(format!("slice_rows {start}..{end} of {sa:?}")));
        }
        let c = sa[1];
        let data = self.value(a).data()[start * c..end * c].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Op::SliceRows { a, start, end },
            Tensor::new(vec![end - start, c], data)?,
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check_live()?;
        let sa = self.value(a).shape();
        if sa.len() != 2 || start >= end || end > sa[1] {
            return Err(Error::Shape(format!("slice_cols {start}..{end} of {sa:?}")));
        }
        let (r, c) = (sa[0], sa[1]);
        let w = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Op::SliceCols { a, start, end },
            Tensor::new(vec![r, w], data)?,
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check_live()?;
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of zero parts".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            let sp = self.value(p).shape();
            if sp.len() != 2 || sp[1] != c {
                return Err(Error::Shape(format!(
                    "concat_rows part of {sp:?}, expected [_, {c}]"
                )));
            }
            rows += sp[0];
        }
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![rows, c], data)?,
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.check_live()?;
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of zero parts".into()));
        }
        let r = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let sp = self.value(p).shape();
            if sp.len() != 2 || sp[0] != r {
                return Err(Error::Shape(format!(
                    "concat_cols part of {sp:?}, expected [{r}, _]"
                )));
            }
            cols += sp[1];
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.value(p).cols();
                data.extend_from_slice(&self.value(p).data()[i * pc..(i + 1) * pc]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            Tensor::new(vec![r, cols], data)?,
            rg,
        ))
    }

    /// Attach a gradient tap. The mask, when present, must have one entry
    /// per trailing-dimension feature of the node.
    pub fn attach_tap(&mut self, id: NodeId, spec: TapSpec) -> Result<()> {
        self.check_live()?;
        if id.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("tap on unknown node {}", id.0)));
        }
        let t = self.value(id);
        if let Some(mask) = &spec.mask {
            if mask.len() != t.cols() {
                return Err(Error::Shape(format!(
                    "tap mask of length {} on node with trailing dimension {}",
                    mask.len(),
                    t.cols()
                )));
            }
            if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(Error::Data("tap mask entries must be 0 or 1".into()));
            }
        }
        if let Some(rows) = &spec.rows {
            if rows.start >= rows.end || rows.end > t.rows() {
                return Err(Error::Shape(format!(
                    "tap row range {rows:?} outside {} rows",
                    t.rows()
                )));
            }
        }
        self.taps.insert(id.0, spec);
        Ok(())
    }

    /// Reverse pass from a scalar loss. Consumes the graph: a second call
    /// is an error. Returns gradients for every `requires_grad` leaf (zeros
    /// when the loss does not depend on it) and recorded tap gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<BackwardResult> {
        self.check_live()?;
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!("unknown loss node {}", loss.0)));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;

        // A node's gradient is needed when it is a grad leaf, carries a tap,
        // or feeds (transitively) something that does.
        let n = self.nodes.len();
        let mut active = vec![false; n];
        for i in 0..n {
            if self.taps.contains_key(&i)
                || (matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad)
            {
                active[i] = true;
                continue;
            }
            let mut inputs: Vec<usize> = Vec::with_capacity(3);
            collect_inputs(&self.nodes[i].op, &mut inputs);
            active[i] = inputs.iter().any(|&p| active[p]);
        }

        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut tap_grads: BTreeMap<usize, Tensor> = BTreeMap::new();
        if active[loss.0] {
            grads[loss.0] = Some(Tensor::scalar(1.0));
        }

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if let Some(tap) = self.taps.get(&i) {
                if tap.record {
                    tap_grads.insert(i, g.clone());
                }
                if let Some(mask) = &tap.mask {
                    let c = g.cols();
                    let rows = tap.rows.clone().unwrap_or(0..g.rows());
                    let gd = g.data_mut();
                    for r in rows {
                        for j in 0..c {
                            gd[r * c + j] *= mask[j];
                        }
                    }
                }
            }
            self.propagate(i, &g, &mut grads, &active)?;
            grads[i] = Some(g);
        }

        // Leaves the loss never reached still get explicit zero gradients.
        for i in 0..n {
            if matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(self.nodes[i].value.shape()));
                }
            } else if !matches!(self.nodes[i].op, Op::Leaf) && !self.taps.contains_key(&i) {
                // Interior gradients are only retained at tapped nodes;
                // everything else is dropped to keep the result lean.
                grads[i] = None;
            }
        }

        Ok(BackwardResult { grads, tap_grads })
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        active: &[bool],
    ) -> Result<()> {
        let wants = |id: NodeId| active[id.0];
        let add_into = |grads: &mut [Option<Tensor>],
                        id: NodeId,
                        shape: &[usize],
                        f: &mut dyn FnMut(&mut [f64])| {
            let slot = &mut grads[id.0];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(shape));
            }
            f(slot.as_mut().unwrap().data_mut());
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if wants(*a) {
                    let da = kernels::matmul_nt(g.data(), bv.data(), m, n, k);
                    add_into(grads, *a, av.shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(&da) {
                            *d += s;
                        }
                    });
                }
                if wants(*b) {
                    let db = kernels::matmul_tn(av.data(), g.data(), m, k, n);
                    add_into(grads, *b, bv.shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(&db) {
                            *d += s;
                        }
                    });
                }
            }
            Op::MatMulNt { a, b } => {
                // out = a @ b^T, a: [m,k], b: [n,k], g: [m,n]
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if wants(*a) {
                    // da = g @ b
                    let da = kernels::matmul(g.data(), bv.data(), m, n, k);
                    add_into(grads, *a, av.shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(&da) {
                            *d += s;
                        }
                    });
                }
                if wants(*b) {
                    // db = g^T @ a
                    let db = kernels::matmul_tn(g.data(), av.data(), m, n, k);
                    add_into(grads, *b, bv.shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(&db) {
                            *d += s;
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    if wants(*id) {
                        add_into(grads, *id, self.value(*id).shape(), &mut |dst| {
                            for (d, s) in dst.iter_mut().zip(g.data()) {
                                *d += s;
                            }
                        });
                    }
                }
            }
            Op::AddBias { a, bias } => {
                let (r, c) = (g.rows(), g.cols());
                if wants(*a) {
                    add_into(grads, *a, self.value(*a).shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    });
                }
                if wants(*bias) {
                    add_into(grads, *bias, self.value(*bias).shape(), &mut |dst| {
                        for row in 0..r {
                            for j in 0..c {
                                dst[j] += g.data()[row * c + j];
                            }
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if wants(*a) {
                    let bv = self.value(*b);
                    add_into(grads, *a, self.value(*a).shape(), &mut |dst| {
                        for ((d, s), x) in dst.iter_mut().zip(g.data()).zip(bv.data()) {
                            *d += s * x;
                        }
                    });
                }
                if wants(*b) {
                    let av = self.value(*a);
                    add_into(grads, *b, self.value(*b).shape(), &mut |dst| {
                        for ((d, s), x) in dst.iter_mut().zip(g.data()).zip(av.data()) {
                            *d += s * x;
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                if wants(*a) {
                    add_into(grads, *a, self.value(*a).shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(g.data()) {
                            *d += c * s;
                        }
                    });
                }
            }
            Op::SubConst { a } => {
                if wants(*a) {
                    add_into(grads, *a, self.value(*a).shape(), &mut |dst| {
                        for (d, s) in dst.iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    });
                }
            }
            Op::Abs { a } => {
                if wants(*a) {
                    let av = self.value(*a);
                    add_into(grads, *a, av.shape(), &mut |dst| {
                        for ((d, s), x) in dst.iter_mut().zip(g.data()).zip(av.data()) {
                            // subgradient 0 at x == 0
                            let sign = if *x > 0.0 {
                                1.0
                            } else if *x < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                            *d += s * sign;
                        }
                    });
                }
            }
            Op::Clamp { a, lo, hi } => {
                if wants(*a) {
                    let av = self.value(*a);
                    add_into(grads, *a, av.shape(), &mut |dst| {
                        for ((d, s), x) in dst.iter_mut().zip(g.data()).zip(av.data()) {
                            if *x > *lo && *x < *hi {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::Gelu { a } => {
                if wants(*a) {
                    let av = self.value(*a);
                    add_into(grads, *a, av.shape(), &mut |dst| {
                        for ((d, s), x) in dst.iter_mut().zip(g.data()).zip(av.data()) {
                            *d += s * kernels::gelu_grad(*x);
                        }
                    });
                }
            }
            Op::ScaleRows { a, v, rows } => {
                let c = g.cols();
                if wants(*a) {
                    let vv = self.value(*v);
                    let rows = rows.clone();
                    add_into(grads, *a, self.value(*a).shape(), &mut |dst| {
                        for (idx, (d, s)) in dst.iter_mut().zip(g.data()).enumerate() {
                            let row = idx / c;
                            if rows.contains(&row) {
                                *d += s * vv.data()[idx % c];
                            } else {
                                *d += s;
                            }
                        }
                    });
                }
                if wants(*v) {
                    let av = self.value(*a);
                    let rows = rows.clone();
                    add_into(grads, *v, self.value(*v).shape(), &mut |dst| {
                        for row in rows.clone() {
                            for j in 0..c {
                                dst[j] += g.data()[row * c + j] * av.data()[row * c + j];
                            }
                        }
                    });
                }
            }
            Op::Softmax { a, causal } => {
                if wants(*a) {
                    let out = &self.nodes[i].value;
                    let (r, c) = (out.rows(), out.cols());
                    add_into(grads, *a, self.value(*a).shape(), &mut |dst| {
                        for row in 0..r {
                            let visible = if *causal { row + 1 } else { c };
                            let p = &out.data()[row * c..row * c + visible];
                            let go = &g.data()[row * c..row * c + visible];
                            let dot: f64 = go.iter().zip(p).map(|(x, y)| x * y).sum();
                            for j in 0..visible {
                                dst[row * c + j] += p[j] * (go[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { a, gain, bias, eps } => {
                let av = self.value(*a);
                let gv = self.value(*gain);
                let (r, c) = (av.rows(), av.cols());
                // recompute row stats; cheaper than caching for desk sizes
                let mut xhat = vec![0.0; r * c];
                let mut inv_sigma = vec![0.0; r];
                for row in 0..r {
                    let x = &av.data()[row * c..(row + 1) * c];
                    let mean = x.iter().sum::<f64>() / c as f64;
                    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_sigma[row] = inv;
                    for j in 0..c {
                        xhat[row * c + j] = (x[j] - mean) * inv;
                    }
                }
                if wants(*gain) {
                    add_into(grads, *gain, gv.shape(), &mut |dst| {
                        for row in 0..r {
                            for j in 0..c {
                                dst[j] += g.data()[row * c + j] * xhat[row * c + j];
                            }
                        }
                    });
                }
                if wants(*bias) {
                    add_into(grads, *bias, self.value(*bias).shape(), &mut |dst| {
                        for row in 0..r {
                            for j in 0..c {
                                dst[j] += g.data()[row * c + j];
                            }
                        }
                    });
                }
                if wants(*a) {
                    add_into(grads, *a, av.shape(), &mut |dst| {
                        for row in 0..r {
                            let go = &g.data()[row * c..(row + 1) * c];
                            let xh = &xhat[row * c..(row + 1) * c];
                            let mut mean_dxh = 0.0;
                            let mut mean_dxh_xh = 0.0;
                            let mut dxh = vec![0.0; c];
                            for j in 0..c {
                                dxh[j] = go[j] * gv.data()[j];
                                mean_dxh += dxh[j];
                                mean_dxh_xh += dxh[j] * xh[j];
                            }
                            mean_dxh /= c as f64;
                            mean_dxh_xh /= c as f64;
                            for j in 0..c {
                                dst[row * c + j] +=
                                    inv_sigma[row] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                            }
                        }
                    });
                }
            }
            Op::Embed { table, ids } => {
                if wants(*table) {
                    let d = self.value(*table).cols();
                    add_into(grads, *table, self.value(*table).shape(), &mut |dst| {
                        for (row, &id) in ids.iter().enumerate() {
                            let base = id as usize * d;
                            for j in 0..d {
                                dst[base + j] += g.data()[row * d + j];
                            }
                        }
                    });
                }
            }
            Op::Mean { a } => {
                if wants(*a) {
                    let av = self.value(*a);
                    let gv = g.item() / av.numel() as f64;
                    add_into(grads, *a, av.shape(), &mut |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
            }
            Op::Sum { a } => {
                if wants(*a) {
                    let gv = g.item();
                    add_into(grads, *a, self.value(*a).shape(), &mut |dst| {
                        for d in dst.iter_mut() {
                            *d += gv;
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
            } => {
                if wants(*logits) {
                    let lv = self.value(*logits);
                    let (t, v) = (lv.rows(), lv.cols());
                    let wsum: f64 = weights.iter().sum();
                    let gv = g.item();
                    add_into(grads, *logits, lv.shape(), &mut |dst| {
                        let mut p = vec![0.0; v];
                        for row in 0..t {
                            if weights[row] == 0.0 {
                                continue;
                            }
                            kernels::softmax_into(&lv.data()[row * v..(row + 1) * v], &mut p, v);
                            let scale = gv * weights[row] / wsum;
                            for j in 0..v {
                                let onehot = if j == targets[row] as usize { 1.0 } else { 0.0 };
                                dst[row * v + j] += scale * (p[j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::SliceRows { a, start, end } => {
                if wants(*a) {
                    let c = g.cols();
                    debug_assert_eq!(g.rows(), end - start);
                    let start = *start;
                    add_into(grads, *a, self.value(*a).shape(), &mut |dst| {
                        for (idx, s) in g.data().iter().enumerate() {
                            dst[(start + idx / c) * c + idx % c] += s;
                        }
                    });
                }
            }
            Op::SliceCols { a, start, end } => {
                if wants(*a) {
                    let full_c = self.value(*a).cols();
                    let w = g.cols();
                    debug_assert_eq!(w, end - start);
                    let start = *start;
                    add_into(grads, *a, self.value(*a).shape(), &mut |dst| {
                        for (idx, s) in g.data().iter().enumerate() {
                            let (row, j) = (idx / w, idx % w);
                            dst[row * full_c + start + j] += s;
                        }
                    });
                }
            }
            Op::ConcatRows { parts } => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if wants(p) {
                        let base = offset * c;
                        add_into(grads, p, self.value(p).shape(), &mut |dst| {
                            for (idx, d) in dst.iter_mut().enumerate() {
                                *d += g.data()[base + idx];
                            }
                        });
                    }
                    offset += pr;
                }
            }
            Op::ConcatCols { parts } => {
                let total_c = g.cols();
                let r = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if wants(p) {
                        let off = offset;
                        add_into(grads, p, self.value(p).shape(), &mut |dst| {
                            for row in 0..r {
                                for j in 0..pc {
                                    dst[row * pc + j] += g.data()[row * total_c + off + j];
                                }
                            }
                        });
                    }
                    offset += pc;
                }
            }
        }
        Ok(())
    }
}

fn collect_inputs(op: &Op, out: &mut Vec<usize>) {
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } | Op::MatMulNt { a, b } | Op::Add { a, b } | Op::Mul { a, b } => {
            out.extend([a.0, b.0])
        }
        Op::AddBias { a, bias } => out.extend([a.0, bias.0]),
        Op::Scale { a, .. }
        | Op::SubConst { a }
        | Op::Abs { a }
        | Op::Clamp { a, .. }
        | Op::Gelu { a }
        | Op::Softmax { a, .. }
        | Op::Mean { a }
        | Op::Sum { a }
        | Op::SliceRows { a, .. }
        | Op::SliceCols { a, .. } => out.push(a.0),
        Op::ScaleRows { a, v, .. } => out.extend([a.0, v.0]),
        Op::LayerNorm { a, gain, bias, .. } => out.extend([a.0, gain.0, bias.0]),
        Op::Embed { table, .. } => out.push(table.0),
        Op::CrossEntropy { logits, .. } => out.push(logits.0),
        Op::ConcatRows { parts } | Op::ConcatCols { parts } => {
            out.extend(parts.iter().map(|p| p.0))
        }
    }
}
