use rand::Rng;

use super::{Graph, NodeId, Tensor};
use crate::{rng, Error, Result};

/// Single-head self-attention weights with a learned positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// `max_len × d`
    pub pos: Tensor,
}

impl AttentionParams {
    /// Projections uniform in `±1/√d`; positional rows in `±0.1/√d`.
    pub fn init(d: usize, max_len: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = |n: usize, b: f64| -> Vec<f64> { (0..n).map(|_| r.random_range(-b..=b)).collect() };
        AttentionParams {
            w_q: Tensor::matrix(d, d, draw(d * d, bound)).unwrap(),
            w_k: Tensor::matrix(d, d, draw(d * d, bound)).unwrap(),
            w_v: Tensor::matrix(d, d, draw(d * d, bound)).unwrap(),
            pos: Tensor::matrix(max_len, d, draw(max_len * d, 0.1 * bound)).unwrap(),
        }
    }

    pub fn d(&self) -> usize {
        self.w_q.cols()
    }

    pub fn max_len(&self) -> usize {
        self.pos.rows()
    }

    pub fn register<'a>(&'a self, g: &mut Graph<'a>) -> AttentionNodes {
        AttentionNodes {
            w_q: g.param(&self.w_q),
            w_k: g.param(&self.w_k),
            w_v: g.param(&self.w_v),
            pos: g.param(&self.pos),
        }
    }
}

/// Graph handles of one attention block's parameters.
#[derive(Clone, Copy, Debug)]
pub struct AttentionNodes {
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub pos: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOptions {
    pub causal: bool,
    pub dropout_rate: f64,
    pub train_mode: bool,
    pub residual: bool,
    /// Seeds the dropout mask; only read when dropout is active.
    pub dropout_key: u64,
}

impl Default for AttentionOptions {
    fn default() -> Self {
        AttentionOptions {
            causal: true,
            dropout_rate: 0.0,
            train_mode: false,
            residual: true,
            dropout_key: 0,
        }
    }
}

/// `mask[t][s] = true` for `s > t`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|i| i % len > i / len).collect()
}

/// `F' = F + pos[..L]`, `A = softmax(F'W_q (F'W_k)ᵀ / √d)` under the causal
/// mask, dropout on `A` in training mode, output `A · F'W_v` plus `F'` when
/// residual.
pub fn attention_block(
    g: &mut Graph<'_>,
    f: NodeId,
    p: &AttentionNodes,
    opts: &AttentionOptions,
) -> Result<NodeId> {
    let (len, d) = (g.value(f).rows(), g.value(f).cols());
    if g.value(p.w_q).shape() != [d, d] {
        return Err(Error::Shape(format!(
            "attention input dim {d} vs projection {:?}",
            g.value(p.w_q).shape()
        )));
    }
    if len > g.value(p.pos).rows() {
        return Err(Error::Shape(format!(
            "sequence of {len} exceeds positional table of {}",
            g.value(p.pos).rows()
        )));
    }
    if !(0.0..1.0).contains(&opts.dropout_rate) {
        return Err(Error::Config(format!("dropout rate {} outside [0, 1)", opts.dropout_rate)));
    }
    let pos = g.slice_rows(p.pos, 0..len)?;
    let fp = g.add(f, pos)?;
    let q = g.matmul(fp, p.w_q)?;
    let k = g.matmul(fp, p.w_k)?;
    let v = g.matmul(fp, p.w_v)?;
    let scores = g.matmul_bt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let mask = opts.causal.then(|| causal_mask(len));
    let mut weights = g.softmax_rows(scores, mask.as_deref())?;
    if opts.train_mode && opts.dropout_rate > 0.0 {
        weights = g.dropout(weights, opts.dropout_rate, opts.dropout_key)?;
    }
    let out = g.matmul(weights, v)?;
    if opts.residual {
        g.add(out, fp)
    } else {
        Ok(out)
    }
}
