//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in insertion order, which is also a
//! topological order: an operation can only consume nodes that already
//! exist. [`Graph::backward`] walks the tape once in reverse and returns the
//! gradient of a scalar loss with respect to every registered parameter.
//!
//! ```
//! use lntune::autodiff::Graph;
//! use lntune::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let w = g.param("w", Tensor::vector(&[3.0]));
//! let t = g.constant(Tensor::vector(&[1.0]));
//! let loss = g.mse(w, t).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get("w").unwrap().data(), &[4.0]);
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive bias applied to attention scores of masked key positions.
pub const MASKED_SCORE: f64 = -1e9;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(NodeId, NodeId),
    SplitHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: NodeId,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    MaskKeys(NodeId),
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    Sum(NodeId),
    Reshape(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar loss keyed by parameter identifier.
///
/// A parameter that was registered but does not influence the loss maps to
/// an all-zero tensor; an identifier that was never registered is absent,
/// which callers treat as a zero gradient.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn get(&self, param: &str) -> Option<&Tensor> {
        self.grads.get(param)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn into_inner(self) -> BTreeMap<String, Tensor> {
        self.grads
    }
}

/// Operation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{op} produced a non-finite value")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// A leaf whose gradient is reported under `name`. Registering the same
    /// name twice sums the two gradients.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(Op::Param(name.into()), value)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Affine map `x W^T + b` over the last axis, with `W` stored `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.last_dim() != wv.shape()[1] {
            return Err(Error::shape(
                "linear",
                format!("input {:?} with weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let (rows, inp, outp) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
        if let Some(b) = b {
            if self.value(b).shape() != [outp] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {outp} outputs", self.value(b).shape()),
                ));
            }
        }
        let mut out = vec![0.0; rows * outp];
        gemm_nt(xv.data(), wv.data(), &mut out, rows, inp, outp);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(outp) {
                for (o, bb) in row.iter_mut().zip(bias) {
                    *o += bb;
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = outp;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(Op::Linear { x, w, b }, value))
    }

    /// Elementwise sum. `b` may also have a shape equal to a suffix of `a`'s
    /// shape, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.shape().ends_with(bv.shape()) || bv.numel() == 0 {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let bn = bv.numel();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_exact_mut(bn) {
            for (o, y) in chunk.iter_mut().zip(bv.data()) {
                *o += y;
            }
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "elementwise_mul",
                format!("{:?} * {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        self.push(Op::Scale(a, factor), value)
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x * std_normal_cdf(x)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        self.push(Op::Gelu(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x.tanh()).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        self.push(Op::Tanh(a), value)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        if av.numel() == 0 {
            return Err(Error::shape("softmax_lastaxis", "empty input"));
        }
        let cols = av.last_dim();
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(av.shape().to_vec(), out);
        Ok(self.push(Op::Softmax(a), value))
    }

    /// Row-wise layer normalization over the last axis followed by the
    /// elementwise affine map `weight * xhat + bias`. Variance divides by
    /// the row length.
    pub fn layer_norm(&mut self, x: NodeId, w: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "layer_norm eps must be positive, got {eps}"
            )));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let h = xv.last_dim();
        if h == 0 || wv.shape() != [h] || bv.shape() != [h] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, weight {:?}, bias {:?}",
                    xv.shape(),
                    wv.shape(),
                    bv.shape()
                ),
            ));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        let (wd, bd) = (wv.data(), bv.data());
        for r in 0..rows {
            let row = &xv.data()[r * h..(r + 1) * h];
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for j in 0..h {
                let xh = (row[j] - mean) * istd;
                xhat[r * h + j] = xh;
                out[r * h + j] = wd[j] * xh + bd[j];
            }
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        check_finite("layer_norm", &value)?;
        Ok(self.push(
            Op::LayerNorm {
                x,
                w,
                b,
                xhat,
                inv_std,
            },
            value,
        ))
    }

    /// Gathers rows of a `[vocab, hidden]` table: output `[ids.len(), hidden]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("embedding_lookup", "table must be 2-D"));
        }
        let (vocab, h) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    bound: vocab,
                });
            }
            out.extend_from_slice(&tv.data()[id * h..(id + 1) * h]);
        }
        let value = Tensor::from_parts(vec![ids.len(), h], out);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`. `logits` is `[C]` or
    /// `[B, C]`; one label per row.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        let rows = lv.rows();
        if rows != labels.len() || rows == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} logit rows for {} labels", labels.len()),
            ));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(Error::OutOfRange {
                    what: "cross_entropy classes",
                    index: label,
                    bound: c,
                });
            }
            let row = &lv.data()[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        let value = Tensor::scalar(loss / rows as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
        ))
    }

    /// Mean squared error `mean((a - b)^2)`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.numel() != bv.numel() || av.numel() == 0 {
            return Err(Error::shape(
                "mse",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let n = av.numel() as f64;
        let loss = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(loss)))
    }

    /// `[batch * seq, heads * d] -> [batch * heads, seq, d]`.
    pub fn split_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let h = xv.last_dim();
        if xv.rows() != batch * seq || heads == 0 || h % heads != 0 {
            return Err(Error::shape(
                "split_heads",
                format!("{:?} into {batch}x{seq} with {heads} heads", xv.shape()),
            ));
        }
        let d = h / heads;
        let mut out = vec![0.0; xv.numel()];
        head_permute(xv.data(), &mut out, batch, seq, heads, d, true);
        let value = Tensor::from_parts(vec![batch * heads, seq, d], out);
        Ok(self.push(
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
            value,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, batch: usize, seq: usize, heads: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape().len() != 3 || xv.shape()[0] != batch * heads || xv.shape()[1] != seq {
            return Err(Error::shape(
                "merge_heads",
                format!("{:?} from {batch}x{seq} with {heads} heads", xv.shape()),
            ));
        }
        let d = xv.shape()[2];
        let mut out = vec![0.0; xv.numel()];
        head_permute(xv.data(), &mut out, batch, seq, heads, d, false);
        let value = Tensor::from_parts(vec![batch * seq, heads * d], out);
        Ok(self.push(
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
            value,
        ))
    }

    /// Batched matmul over a leading group axis: `[g, m, k] x [g, k, n]`, or
    /// `[g, m, k] x [g, n, k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let ok = av.shape().len() == 3 && bv.shape().len() == 3 && av.shape()[0] == bv.shape()[0];
        let (g, m, k) = if ok {
            (av.shape()[0], av.shape()[1], av.shape()[2])
        } else {
            (0, 0, 0)
        };
        let (bk, n) = if !ok {
            (usize::MAX, 0)
        } else if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if !ok || bk != k {
            return Err(Error::shape(
                "batch_matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ad = &av.data()[gi * m * k..(gi + 1) * m * k];
            let bd = &bv.data()[gi * k * n..(gi + 1) * k * n];
            let od = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                gemm_nt(ad, bd, od, m, k, n);
            } else {
                gemm_nn(ad, bd, od, m, k, n);
            }
        }
        let value = Tensor::from_parts(vec![g, m, n], out);
        Ok(self.push(Op::BatchMatMul { a, b, trans_b }, value))
    }

    /// Adds [`MASKED_SCORE`] to attention scores `[batch * heads, seq, seq]`
    /// at every key position whose flag in `keep` (`[batch * seq]`) is false.
    pub fn mask_keys(&mut self, scores: NodeId, keep: &[bool], heads: usize) -> Result<NodeId> {
        let sv = self.value(scores);
        let s = sv.last_dim();
        if sv.shape().len() != 3 || sv.shape()[1] != s || heads == 0 || sv.shape()[0] % heads != 0 {
            return Err(Error::shape("mask_keys", format!("scores {:?}", sv.shape())));
        }
        let batch = sv.shape()[0] / heads;
        if keep.len() != batch * s {
            return Err(Error::shape(
                "mask_keys",
                format!("mask of {} for {batch}x{s}", keep.len()),
            ));
        }
        let mut out = sv.data().to_vec();
        for g in 0..batch * heads {
            let flags = &keep[(g / heads) * s..(g / heads + 1) * s];
            for row in out[g * s * s..(g + 1) * s * s].chunks_exact_mut(s) {
                for (v, &k) in row.iter_mut().zip(flags) {
                    if !k {
                        *v += MASKED_SCORE;
                    }
                }
            }
        }
        let value = Tensor::from_parts(sv.shape().to_vec(), out);
        Ok(self.push(Op::MaskKeys(scores), value))
    }

    /// Selects rows of a tensor viewed as `[rows, last_dim]`.
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let h = xv.last_dim();
        let mut out = Vec::with_capacity(rows.len() * h);
        for &r in rows {
            if r >= xv.rows() {
                return Err(Error::OutOfRange {
                    what: "gather_rows",
                    index: r,
                    bound: xv.rows(),
                });
            }
            out.extend_from_slice(&xv.data()[r * h..(r + 1) * h]);
        }
        let value = Tensor::from_parts(vec![rows.len(), h], out);
        Ok(self.push(
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            value,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).sum();
        self.push(Op::Sum(a), Tensor::scalar(total))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = GradientMap::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                if let Op::Param(name) = &self.nodes[i].op {
                    let shape = self.nodes[i].value.shape();
                    out.grads
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(shape));
                }
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    let shape = node.value.shape().to_vec();
                    match out.grads.get_mut(name) {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                                *a += v;
                            }
                        }
                        None => {
                            out.grads.insert(name.clone(), Tensor::from_parts(shape, g));
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    // dA = dY B^T, dB = A^T dY
                    gemm_nt(&g, bv.data(), acc(&mut grads, *a, m * k), m, n, k);
                    gemm_tn(av.data(), &g, acc(&mut grads, *b, k * n), m, k, n);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, inp, outp) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
                    gemm_nn(&g, wv.data(), acc(&mut grads, *x, rows * inp), rows, outp, inp);
                    gemm_tn(&g, xv.data(), acc(&mut grads, *w, outp * inp), rows, outp, inp);
                    if let Some(b) = b {
                        let gb = acc(&mut grads, *b, outp);
                        for row in g.chunks_exact(outp) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (ga, v) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *ga += v;
                    }
                    let bn = self.value(*b).numel();
                    let gb = acc(&mut grads, *b, bn);
                    for chunk in g.chunks_exact(bn) {
                        for (x, v) in gb.iter_mut().zip(chunk) {
                            *x += v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = acc(&mut grads, *a, g.len());
                    for ((x, gv), y) in ga.iter_mut().zip(&g).zip(bv) {
                        *x += gv * y;
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for ((x, gv), y) in gb.iter_mut().zip(&g).zip(av) {
                        *x += gv * y;
                    }
                }
                Op::Scale(a, factor) => {
                    for (x, v) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += v * factor;
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a).data();
                    for ((x, v), &xi) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(av) {
                        *x += v * (std_normal_cdf(xi) + xi * std_normal_pdf(xi));
                    }
                }
                Op::Tanh(a) => {
                    let yv = node.value.data();
                    for ((x, v), y) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(yv) {
                        *x += v * (1.0 - y * y);
                    }
                }
                Op::Softmax(a) => {
                    let yv = node.value.data();
                    let cols = node.value.last_dim();
                    let ga = acc(&mut grads, *a, g.len());
                    for ((gx, gy), y) in ga
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(yv.chunks_exact(cols))
                    {
                        let dot: f64 = gy.iter().zip(y).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    w,
                    b,
                    xhat,
                    inv_std,
                } => {
                    let wd = self.value(*w).data();
                    let h = wd.len();
                    let rows = inv_std.len();
                    {
                        let gw = acc(&mut grads, *w, h);
                        for r in 0..rows {
                            for j in 0..h {
                                gw[j] += g[r * h + j] * xhat[r * h + j];
                            }
                        }
                    }
                    {
                        let gb = acc(&mut grads, *b, h);
                        for row in g.chunks_exact(h) {
                            for (a, v) in gb.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                    let gx = acc(&mut grads, *x, rows * h);
                    let mut dxhat = vec![0.0; h];
                    for r in 0..rows {
                        let xh = &xhat[r * h..(r + 1) * h];
                        for j in 0..h {
                            dxhat[j] = g[r * h + j] * wd[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / h as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(d, x)| d * x).sum::<f64>() / h as f64;
                        for j in 0..h {
                            gx[r * h + j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let h = tv.shape()[1];
                    let gt = acc(&mut grads, *table, tv.numel());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..h {
                            gt[id * h + j] += g[r * h + j];
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = self.value(*logits).last_dim();
                    let scale = g[0] / labels.len() as f64;
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
                Op::Mse(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let n = av.len();
                    let scale = 2.0 * g[0] / n as f64;
                    let diff: Vec<f64> = av.iter().zip(bv).map(|(x, y)| scale * (x - y)).collect();
                    for (x, d) in acc(&mut grads, *a, n).iter_mut().zip(&diff) {
                        *x += d;
                    }
                    for (x, d) in acc(&mut grads, *b, n).iter_mut().zip(&diff) {
                        *x -= d;
                    }
                }
                Op::SplitHeads {
                    x,
                    batch,
                    seq,
                    heads,
                } => {
                    let d = node.value.last_dim();
                    let mut tmp = vec![0.0; g.len()];
                    head_permute(&g, &mut tmp, *batch, *seq, *heads, d, false);
                    for (a, v) in acc(&mut grads, *x, g.len()).iter_mut().zip(&tmp) {
                        *a += v;
                    }
                }
                Op::MergeHeads {
                    x,
                    batch,
                    seq,
                    heads,
                } => {
                    let d = self.value(*x).last_dim();
                    let mut tmp = vec![0.0; g.len()];
                    head_permute(&g, &mut tmp, *batch, *seq, *heads, d, true);
                    for (a, v) in acc(&mut grads, *x, g.len()).iter_mut().zip(&tmp) {
                        *a += v;
                    }
                }
                Op::BatchMatMul { a, b, trans_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (groups, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = node.value.last_dim();
                    {
                        let ga = acc(&mut grads, *a, groups * m * k);
                        for gi in 0..groups {
                            let gy = &g[gi * m * n..(gi + 1) * m * n];
                            let bd = &bv.data()[gi * k * n..(gi + 1) * k * n];
                            let out = &mut ga[gi * m * k..(gi + 1) * m * k];
                            if *trans_b {
                                // B is [n, k]: dA = dY B
                                gemm_nn(gy, bd, out, m, n, k);
                            } else {
                                gemm_nt(gy, bd, out, m, n, k);
                            }
                        }
                    }
                    let gb = acc(&mut grads, *b, groups * k * n);
                    for gi in 0..groups {
                        let gy = &g[gi * m * n..(gi + 1) * m * n];
                        let ad = &av.data()[gi * m * k..(gi + 1) * m * k];
                        let out = &mut gb[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // dB = dY^T A, shape [n, k]
                            gemm_tn(gy, ad, out, m, n, k);
                        } else {
                            gemm_tn(ad, gy, out, m, k, n);
                        }
                    }
                }
                Op::MaskKeys(a) | Op::Reshape(a) => {
                    for (x, v) in acc(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *x += v;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let xv = self.value(*x);
                    let h = xv.last_dim();
                    let gx = acc(&mut grads, *x, xv.numel());
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..h {
                            gx[r * h + j] += g[i * h + j];
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    for x in acc(&mut grads, *a, n).iter_mut() {
                        *x += g[0];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Gradient buffer of `id`, zero-initialized on first use.
fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut [f64] {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn head_permute(src: &[f64], dst: &mut [f64], batch: usize, seq: usize, heads: usize, d: usize, split: bool) {
    let h = heads * d;
    for b in 0..batch {
        for s in 0..seq {
            for hd in 0..heads {
                let merged = (b * seq + s) * h + hd * d;
                let split_at = ((b * heads + hd) * seq + s) * d;
                let (from, to) = if split { (merged, split_at) } else { (split_at, merged) };
                dst[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
}

pub(crate) fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `out[m, n] += a[m, k] * b[k, n]`.
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        let mut p = 0;
        // four rows of b per pass over the output row
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                orow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        for p in p..k {
            let av = arow[p];
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m, n] += a[m, k] * b[n, k]^T`.
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    // transposing b lets the inner loop run over contiguous output rows
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn(a, &bt, out, m, k, n);
}

/// `out[k, n] += a[m, k]^T * b[m, n]`.
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn layer_norm_hand_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let w = g.constant(Tensor::ones(&[3]));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, w, b, 1e-12).unwrap();
        assert!(close(g.value(y).data(), &[-1.224745, 0.0, 1.224745], 1e-5));
    }

    #[test]
    fn layer_norm_constant_row_returns_bias() {
        for eps in [1e-12, 1e-5, 1.0] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(&[5.0, 5.0, 5.0]));
            let w = g.constant(Tensor::ones(&[3]));
            let b = g.constant(Tensor::full(&[3], 0.3));
            let y = g.layer_norm(x, w, b, eps).unwrap();
            assert_eq!(g.value(y).data(), &[0.3, 0.3, 0.3]);
        }
    }

    #[test]
    fn layer_norm_zero_weight_annihilates() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[-7.5, 13.25]));
        let w = g.constant(Tensor::zeros(&[2]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.layer_norm(x, w, b, 1e-12).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_rejects_bad_inputs() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
        let w = g.constant(Tensor::ones(&[2]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(matches!(g.layer_norm(x, w, b, 1e-12), Err(Error::Shape { .. })));
        let w = g.constant(Tensor::ones(&[3]));
        assert!(matches!(g.layer_norm(x, w, b, 0.0), Err(Error::InvalidArgument(_))));
        assert!(g.layer_norm(x, w, b, -1.0).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let i = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
        let y = g.matmul(a, i).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(y).shape(), &[2, 2]);
    }

    #[test]
    fn matmul_rejects_incompatible_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
        assert!(g.add(a, b).is_ok());
        let c = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn softmax_symmetric() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0]));
        let l = g.cross_entropy(x, &[0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((g.value(l).data()[0] - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(&[0.0, 0.0]));
        assert!(matches!(g.cross_entropy(x, &[2]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn mse_gradient_hand_value() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::vector(&[3.0]));
        let t = g.constant(Tensor::vector(&[1.0]));
        let loss = g.mse(w, t).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[4.0]);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::vector(&[1.0, 2.0]));
        let w = g.param("w", Tensor::vector(&[3.0]));
        let _ = p;
        let t = g.constant(Tensor::vector(&[1.0]));
        let loss = g.mse(w, t).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn shared_param_gradients_add() {
        // loss = sum(p * a) + sum(p * b) with p shared between branches
        let p0 = Tensor::vector(&[0.5, -1.0]);
        let (a, b) = ([2.0, 3.0], [-1.0, 4.0]);
        let mut g = Graph::new();
        let p = g.param("p", p0.clone());
        let an = g.constant(Tensor::vector(&a));
        let bn = g.constant(Tensor::vector(&b));
        let l1 = g.mul(p, an).unwrap();
        let l1 = g.sum(l1);
        let l2 = g.mul(p, bn).unwrap();
        let l2 = g.sum(l2);
        let loss = g.add(l1, l2).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("p").unwrap().data(), &[1.0, 7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let p = g.param("p", Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(g.backward(p), Err(Error::Shape { .. })));
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let build = || {
            let mut g = Graph::new();
            let x = g.constant(Tensor::matrix(&[&[0.3, -1.2, 2.5], &[1.0, 0.0, -0.7]]).unwrap());
            let w = g.param("w", Tensor::matrix(&[&[0.1, 0.2, 0.3], &[-0.4, 0.5, 0.6]]).unwrap());
            let h = g.linear(x, w, None).unwrap();
            let h = g.gelu(h);
            let s = g.softmax(h).unwrap();
            let l = g.cross_entropy(s, &[1, 0]).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).data()[0].to_bits(), grads)
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![6, 4], data.clone()).unwrap());
        let s = g.split_heads(x, 2, 3, 2).unwrap();
        assert_eq!(g.value(s).shape(), &[4, 3, 2]);
        // batch 0, head 1, position 2 -> row 2, columns 2..4
        let at = ((0 * 2 + 1) * 3 + 2) * 2;
        assert_eq!(&g.value(s).data()[at..at + 2], &[10.0, 11.0]);
        let m = g.merge_heads(s, 2, 3, 2).unwrap();
        assert_eq!(g.value(m).data(), &data[..]);
    }

    #[test]
    fn mask_keys_adds_large_negative() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[1, 2, 2]));
        let m = g.mask_keys(s, &[true, false], 1).unwrap();
        let p = g.softmax(m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 0.0, 1.0, 0.0]);
    }
}
