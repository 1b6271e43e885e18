use std::borrow::Cow;
use std::ops::Range;

use super::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::{rng, Error, Result};

/// Probability floor applied inside the negative log-likelihood.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    SliceRows(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Softmax(NodeId),
    Dropout(NodeId, Vec<f64>),
    Cosine {
        h: NodeId,
        e: NodeId,
        start: usize,
        h_norm: Vec<f64>,
        e_norm: Vec<f64>,
    },
    WeightedSum(Vec<(NodeId, f64)>),
    MaskedNll {
        probs: NodeId,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    Sum(NodeId),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// index order is a topological order.
///
/// Leaves may borrow their values (parameters, frozen matrices) for the
/// lifetime `'a` of the graph.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of every leaf that requires them, after [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    // -inf is the masking sentinel of cosine scores; anything else non-finite
    // is a numerical failure.
    if t.values().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Numeric(format!("{what} produced a non-finite value")));
    }
    Ok(())
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[NodeId]) -> NodeId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, value: &'a Tensor) -> NodeId {
        self.leaf(Cow::Borrowed(value), true)
    }

    pub fn param_owned(&mut self, value: Tensor) -> NodeId {
        self.leaf(Cow::Owned(value), true)
    }

    pub fn constant(&mut self, value: &'a Tensor) -> NodeId {
        self.leaf(Cow::Borrowed(value), false)
    }

    pub fn constant_owned(&mut self, value: Tensor) -> NodeId {
        self.leaf(Cow::Owned(value), false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).require_matrix("matmul")?;
        let (k2, n) = self.value(b).require_matrix("matmul")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).values(), self.value(b).values(), m, k, n, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        check_finite(&t, "matmul")?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.value(a).require_matrix("matmul_bt")?;
        let (n, k2) = self.value(b).require_matrix("matmul_bt")?;
        if k != k2 {
            return Err(Error::Shape(format!("matmul_bt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).values(), self.value(b).values(), m, k, n, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        check_finite(&t, "matmul_bt")?;
        Ok(self.push(t, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape(format!("add {:?} and {:?}", va.shape(), vb.shape())));
        }
        let values = va.values().iter().zip(vb.values()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), values)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape().to_vec(),
            values: va.values().iter().map(|x| x * c).collect(),
        };
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Rows `range` of a matrix.
    pub fn slice_rows(&mut self, a: NodeId, range: Range<usize>) -> Result<NodeId> {
        let (m, n) = self.value(a).require_matrix("slice_rows")?;
        if range.start > range.end || range.end > m {
            return Err(Error::Shape(format!("row slice {range:?} of {m} rows")));
        }
        let vals = self.value(a).values()[range.start * n..range.end * n].to_vec();
        let t = Tensor::matrix(range.len(), n, vals)?;
        Ok(self.push(t, Op::SliceRows(a, range.start), &[a]))
    }

    /// Stacks rows `rows` of `table` into a new matrix.
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (m, n) = self.value(table).require_matrix("gather")?;
        let mut vals = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Invalid(format!("row {r} out of range for {m}-row table")));
            }
            vals.extend_from_slice(self.value(table).row(r));
        }
        let t = Tensor::matrix(rows.len(), n, vals)?;
        Ok(self.push(t, Op::Gather(table, rows.to_vec()), &[table]))
    }

    /// Row softmax. Entries with `mask = true` (and `-inf` entries) get
    /// probability zero. Rows are stabilized by their unmasked maximum.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (m, n) = self.value(x).require_matrix("softmax_rows")?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::Shape(format!("mask of {} for {m}x{n}", mask.len())));
            }
        }
        let xv = self.value(x).values();
        let masked = |i: usize| mask.is_some_and(|mk| mk[i]) || xv[i] == f64::NEG_INFINITY;
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let span = r * n..(r + 1) * n;
            let max = span
                .clone()
                .filter(|&i| !masked(i))
                .map(|i| xv[i])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Invalid(format!("softmax row {r} is fully masked")));
            }
            let mut sum = 0.0;
            for i in span.clone() {
                if !masked(i) {
                    let e = (xv[i] - max).exp();
                    out[i] = e;
                    sum += e;
                }
            }
            for v in &mut out[span] {
                *v /= sum;
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        check_finite(&t, "softmax_rows")?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Inverted dropout with a mask derived from `key`. Element `i` is kept
    /// when `unit(key, i) >= rate`.
    pub fn dropout(&mut self, x: NodeId, rate: f64, key: u64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mult: Vec<f64> = (0..self.value(x).len())
            .map(|i| if rng::unit(key, i as u64) >= rate { keep_scale } else { 0.0 })
            .collect();
        let vx = self.value(x);
        let t = Tensor {
            shape: vx.shape().to_vec(),
            values: vx.values().iter().zip(&mult).map(|(v, k)| v * k).collect(),
        };
        Ok(self.push(t, Op::Dropout(x, mult), &[x]))
    }

    /// Cosine similarity of every row of `h` with rows `rows` of `e`.
    /// All-zero rows of `e` score `-inf` so a following softmax masks them.
    pub fn cosine_sim_rows(&mut self, h: NodeId, e: NodeId, rows: Range<usize>) -> Result<NodeId> {
        let (m, d) = self.value(h).require_matrix("cosine_sim_rows")?;
        let (er, d2) = self.value(e).require_matrix("cosine_sim_rows")?;
        if d != d2 {
            return Err(Error::Shape(format!("cosine of dim {d} against dim {d2}")));
        }
        if rows.start > rows.end || rows.end > er {
            return Err(Error::Shape(format!("cosine rows {rows:?} of {er}")));
        }
        let hv = self.value(h).values();
        let ev = &self.value(e).values()[rows.start * d..rows.end * d];
        let n = rows.len();
        let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let h_norm: Vec<f64> = hv.chunks(d).map(norm).collect();
        if let Some(r) = h_norm.iter().position(|&x| x == 0.0) {
            return Err(Error::Invalid(format!("cosine query row {r} has zero norm")));
        }
        let e_norm: Vec<f64> = ev.chunks(d).map(norm).collect();
        let mut out = vec![0.0; m * n];
        matmul_bt_into(hv, ev, m, d, n, &mut out);
        for i in 0..m {
            for j in 0..n {
                let o = &mut out[i * n + j];
                *o = if e_norm[j] == 0.0 {
                    f64::NEG_INFINITY
                } else {
                    (*o / (h_norm[i] * e_norm[j])).clamp(-1.0, 1.0)
                };
            }
        }
        let t = Tensor::matrix(m, n, out)?;
        check_finite(&t, "cosine_sim_rows")?;
        Ok(self.push(
            t,
            Op::Cosine {
                h,
                e,
                start: rows.start,
                h_norm,
                e_norm,
            },
            &[h, e],
        ))
    }

    /// `Σ wᵢ · xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let first = terms
            .first()
            .ok_or_else(|| Error::Invalid("weighted_sum of nothing".into()))?;
        let shape = self.value(first.0).shape().to_vec();
        let mut vals = vec![0.0; self.value(first.0).len()];
        for &(id, w) in terms {
            let v = self.value(id);
            if v.shape() != shape.as_slice() {
                return Err(Error::Shape(format!("weighted_sum {:?} vs {shape:?}", v.shape())));
            }
            for (o, x) in vals.iter_mut().zip(v.values()) {
                *o += w * x;
            }
        }
        let parents: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let t = Tensor::new(shape, vals)?;
        Ok(self.push(t, Op::WeightedSum(terms.to_vec()), &parents))
    }

    /// Mean of `-ln max(p[t, target_t], PROB_FLOOR)` over positions with a target.
    pub fn masked_nll(&mut self, probs: NodeId, targets: &[Option<usize>]) -> Result<NodeId> {
        let (m, n) = self.value(probs).require_matrix("masked_nll")?;
        if targets.len() != m {
            return Err(Error::Shape(format!("{} targets for {m} rows", targets.len())));
        }
        let pv = self.value(probs);
        let mut total = 0.0;
        let mut count = 0;
        for (t, target) in targets.iter().enumerate() {
            if let Some(c) = *target {
                if c >= n {
                    return Err(Error::Invalid(format!("target {c} outside {n} candidates")));
                }
                total -= pv.values()[t * n + c].max(PROB_FLOOR).ln();
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Invalid("masked_nll with every position masked".into()));
        }
        let t = Tensor::scalar(total / count as f64);
        Ok(self.push(
            t,
            Op::MaskedNll {
                probs,
                targets: targets.to_vec(),
                count,
            },
            &[probs],
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse-mode accumulation from a scalar `loss`. Every leaf that
    /// requires a gradient gets one of its own shape (zeros if unreached).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: self.value(loss).shape().to_vec(),
            values: vec![1.0],
        });

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor>], id: NodeId) -> Option<&'g mut Tensor> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.shape())))
    }

    fn propagate(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gv = g.values();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ
                    matmul_bt_into(gv, self.value(*b).values(), m, n, k, ga.values_mut());
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · dC
                    matmul_at_into(self.value(*a).values(), gv, m, k, n, gb.values_mut());
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · B
                    matmul_into(gv, self.value(*b).values(), m, n, k, ga.values_mut());
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = dCᵀ · A
                    matmul_at_into(gv, self.value(*a).values(), m, n, k, gb.values_mut());
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.values_mut().iter_mut().zip(gv).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.values_mut().iter_mut().zip(gv).for_each(|(o, x)| *o += c * x);
                }
            }
            Op::SliceRows(a, start) => {
                let n = g.cols();
                if let Some(ga) = self.acc(grads, *a) {
                    let dst = &mut ga.values_mut()[start * n..start * n + gv.len()];
                    dst.iter_mut().zip(gv).for_each(|(o, x)| *o += x);
                }
            }
            Op::Gather(table, rows) => {
                let n = g.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (i, &r) in rows.iter().enumerate() {
                        let src = &gv[i * n..(i + 1) * n];
                        gt.row_mut(r).iter_mut().zip(src).for_each(|(o, x)| *o += x);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.values();
                let n = g.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    let gxv = gx.values_mut();
                    for r in 0..g.rows() {
                        let span = r * n..(r + 1) * n;
                        let dot: f64 = span.clone().map(|i| gv[i] * y[i]).sum();
                        for i in span {
                            gxv[i] += y[i] * (gv[i] - dot);
                        }
                    }
                }
            }
            Op::Dropout(x, mult) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, d), k) in gx.values_mut().iter_mut().zip(gv).zip(mult) {
                        *o += d * k;
                    }
                }
            }
            Op::Cosine {
                h,
                e,
                start,
                h_norm,
                e_norm,
            } => self.cosine_backward(node, g, *h, *e, *start, h_norm, e_norm, grads),
            Op::WeightedSum(terms) => {
                for &(id, w) in terms {
                    if let Some(gp) = self.acc(grads, id) {
                        gp.values_mut().iter_mut().zip(gv).for_each(|(o, x)| *o += w * x);
                    }
                }
            }
            Op::MaskedNll {
                probs,
                targets,
                count,
            } => {
                let n = self.value(*probs).cols();
                let scale = gv[0] / *count as f64;
                let pv = self.value(*probs).values();
                if let Some(gp) = self.acc(grads, *probs) {
                    let gpv = gp.values_mut();
                    for (t, target) in targets.iter().enumerate() {
                        if let Some(c) = *target {
                            let p = pv[t * n + c];
                            if p > PROB_FLOOR {
                                gpv[t * n + c] -= scale / p;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.values_mut().iter_mut().for_each(|o| *o += gv[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn cosine_backward(
        &self,
        node: &Node<'a>,
        g: &Tensor,
        h: NodeId,
        e: NodeId,
        start: usize,
        h_norm: &[f64],
        e_norm: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        // out_ij = u_i · v_j with u = h/|h|, v = e/|e|:
        //   dh_i = Σ_j g_ij (v_j - out_ij u_i) / |h_i|
        //   de_j = Σ_i g_ij (u_i - out_ij v_j) / |e_j|
        let out = node.value.values();
        let (m, n) = (g.rows(), g.cols());
        let d = self.value(h).cols();
        let hv = self.value(h).values();
        let ev = &self.value(e).values()[start * d..(start + n) * d];
        let gv: Vec<f64> = g
            .values()
            .iter()
            .zip(out)
            .map(|(&gi, &o)| if o == f64::NEG_INFINITY { 0.0 } else { gi })
            .collect();

        if self.nodes[h.0].requires_grad {
            let mut acc = vec![0.0; m * d];
            for i in 0..m {
                let arow = &mut acc[i * d..(i + 1) * d];
                let mut go = 0.0;
                for j in 0..n {
                    let gij = gv[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    go += gij * out[i * n + j];
                    let s = gij / e_norm[j];
                    for (a, x) in arow.iter_mut().zip(&ev[j * d..(j + 1) * d]) {
                        *a += s * x;
                    }
                }
                let hrow = &hv[i * d..(i + 1) * d];
                for (a, x) in arow.iter_mut().zip(hrow) {
                    *a = (*a - go * x / h_norm[i]) / h_norm[i];
                }
            }
            let gh = self.acc(grads, h).expect("requires grad");
            gh.values_mut().iter_mut().zip(&acc).for_each(|(o, x)| *o += x);
        }

        if self.nodes[e.0].requires_grad {
            let mut acc = vec![0.0; n * d];
            let mut go = vec![0.0; n];
            for i in 0..m {
                let hrow = &hv[i * d..(i + 1) * d];
                for j in 0..n {
                    let gij = gv[i * n + j];
                    if gij == 0.0 {
                        continue;
                    }
                    go[j] += gij * out[i * n + j];
                    let s = gij / h_norm[i];
                    for (a, x) in acc[j * d..(j + 1) * d].iter_mut().zip(hrow) {
                        *a += s * x;
                    }
                }
            }
            let ge = self.acc(grads, e).expect("requires grad");
            for j in 0..n {
                if e_norm[j] == 0.0 {
                    continue;
                }
                let erow = &ev[j * d..(j + 1) * d];
                let dst = ge.row_mut(start + j);
                for ((o, a), x) in dst.iter_mut().zip(&acc[j * d..(j + 1) * d]).zip(erow) {
                    *o += (a - go[j] * x / e_norm[j]) / e_norm[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_values() {
        let mut g = Graph::new();
        let a = g.constant_owned(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant_owned(mat(2, 1, &[1.0, 1.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).values(), &[3.0, 7.0]);

        let i = g.constant_owned(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let ai = g.matmul(a, i).unwrap();
        assert_eq!(g.value(ai), g.value(a));
        assert!(g.matmul(b, b).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant_owned(mat(3, 3, &[0.0, 0.0, f64::NEG_INFINITY, 2f64.ln(), 0.0, f64::NEG_INFINITY, 5.0, 5.0, 5.0]));
        let mask = [false, false, false, false, false, false, false, false, true];
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        let v = g.value(y).values();
        assert!((v[0] - 0.5).abs() < 1e-15 && (v[1] - 0.5).abs() < 1e-15 && v[2] == 0.0);
        assert!((v[3] - 2.0 / 3.0).abs() < 1e-15 && (v[4] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(&v[6..], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let mut g = Graph::new();
        let x = g.constant_owned(mat(1, 2, &[1.0, 2.0]));
        assert!(g.softmax_rows(x, Some(&[true, true])).is_err());
    }

    #[test]
    fn cosine_examples() {
        let mut g = Graph::new();
        let e = g.constant_owned(mat(3, 2, &[1.0, 0.0, 0.0, 1.0, -1.0, -1.0]));
        let h = g.constant_owned(mat(1, 2, &[1.0, 0.0]));
        let c = g.cosine_sim_rows(h, e, 0..2).unwrap();
        assert_eq!(g.value(c).values(), &[1.0, 0.0]);

        let h2 = g.constant_owned(mat(1, 2, &[2.0, 0.0]));
        let c2 = g.cosine_sim_rows(h2, e, 0..2).unwrap();
        assert_eq!(g.value(c2).values(), g.value(c).values());

        let h3 = g.constant_owned(mat(1, 2, &[1.0, 1.0]));
        let c3 = g.cosine_sim_rows(h3, e, 2..3).unwrap();
        assert!((g.value(c3).values()[0] + 1.0).abs() < 1e-15);

        let z = g.constant_owned(mat(1, 2, &[0.0, 0.0]));
        assert!(g.cosine_sim_rows(z, e, 0..3).is_err());
    }

    #[test]
    fn cosine_zero_rows_are_sentinel() {
        let mut g = Graph::new();
        let e = g.constant_owned(mat(2, 2, &[0.0, 0.0, 0.0, 1.0]));
        let h = g.constant_owned(mat(1, 2, &[1.0, 1.0]));
        let c = g.cosine_sim_rows(h, e, 0..2).unwrap();
        assert_eq!(g.value(c).values()[0], f64::NEG_INFINITY);
        let p = g.softmax_rows(c, None).unwrap();
        assert_eq!(g.value(p).values(), &[0.0, 1.0]);
    }

    #[test]
    fn nll_examples() {
        let mut g = Graph::new();
        let p = g.constant_owned(mat(1, 4, &[0.25, 0.25, 0.25, 0.25]));
        let l = g.masked_nll(p, &[Some(2)]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let p1 = g.constant_owned(mat(1, 2, &[1.0, 0.0]));
        let l1 = g.masked_nll(p1, &[Some(0)]).unwrap();
        assert_eq!(g.value(l1).item(), 0.0);

        let p2 = g.constant_owned(mat(3, 2, &[0.5, 0.5, 0.25, 0.75, 0.1, 0.9]));
        let l2 = g.masked_nll(p2, &[Some(0), Some(0), None]).unwrap();
        assert!((g.value(l2).item() - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((g.value(l2).item() - 1.0397).abs() < 1e-4);

        assert!(g.masked_nll(p2, &[None, None, None]).is_err());
        let zero = g.constant_owned(mat(1, 2, &[0.0, 1.0]));
        let lz = g.masked_nll(zero, &[Some(0)]).unwrap();
        assert!((g.value(lz).item() + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn backward_of_sum_and_zero() {
        let mut g = Graph::new();
        let x = g.param_owned(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.param_owned(Tensor::new(vec![3], vec![1.0, -2.0, 5.0]).unwrap());
        let z = g.scale(x, 0.0);
        let s = g.sum(z);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().values(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param_owned(mat(1, 2, &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param_owned(mat(1, 2, &[1.0, 2.0]));
        let unused = g.param_owned(mat(2, 2, &[1.0; 4]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn dropout_rate_validation_and_eval_identity() {
        let mut g = Graph::new();
        let x = g.constant_owned(mat(2, 2, &[1.0; 4]));
        assert!(g.dropout(x, 1.0, 0).is_err());
        assert!(g.dropout(x, -0.1, 0).is_err());
        assert_eq!(g.dropout(x, 0.0, 0).unwrap(), x);
        let y = g.dropout(x, 0.5, 9).unwrap();
        assert!(g.value(y).values().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
