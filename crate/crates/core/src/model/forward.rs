use std::ops::Range;

use super::{Model, StreamKind};
use crate::corpus::{row_of, Batch, Domain, SeqItem, Stream};
use crate::embedstore::Modality;
use crate::tensor::{attention_block, AttentionNodes, AttentionOptions, Graph, NodeId, Tensor};
use crate::{rng, Error, Result};

/// Row sums further than this from one count as violations.
const PROB_SUM_TOLERANCE: f64 = 1e-6;

/// A distribution over the items of `scope` (catalog indices).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector {
    pub scope: Range<usize>,
    pub values: Vec<f64>,
}

impl ProbVector {
    /// Probability of a catalog item; zero outside the scope.
    pub fn get(&self, item: usize) -> f64 {
        if self.scope.contains(&item) {
            self.values[item - self.scope.start]
        } else {
            0.0
        }
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `Σ wᵢ · pᵢ` over distributions sharing one scope.
pub fn fuse_probs(parts: &[(&ProbVector, f64)]) -> Result<ProbVector> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("fuse_probs of nothing".into()))?;
    let scope = first.0.scope.clone();
    let mut values = vec![0.0; scope.len()];
    for (p, w) in parts {
        if p.scope != scope || p.values.len() != scope.len() {
            return Err(Error::Shape(format!(
                "cannot fuse distributions over {:?} and {:?}",
                scope, p.scope
            )));
        }
        for (o, v) in values.iter_mut().zip(&p.values) {
            *o += w * v;
        }
    }
    Ok(ProbVector { scope, values })
}

/// Indices sorted by descending score; equal scores keep the lower index first.
pub fn rank_scores(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Identifies a training step for dropout masks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepKey {
    pub seed: u64,
    pub epoch: u64,
    pub batch: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train(StepKey),
}

/// Row-sum check over every distribution produced while computing a loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbAudit {
    pub rows: usize,
    pub max_deviation: f64,
    pub violations: usize,
}

impl ProbAudit {
    pub fn merge(&mut self, other: &ProbAudit) {
        self.rows += other.rows;
        self.max_deviation = self.max_deviation.max(other.max_deviation);
        self.violations += other.violations;
    }

    fn record(&mut self, t: &Tensor) {
        for r in 0..t.rows() {
            let dev = (t.row(r).iter().sum::<f64>() - 1.0).abs();
            self.rows += 1;
            self.max_deviation = self.max_deviation.max(dev);
            if dev > PROB_SUM_TOLERANCE {
                self.violations += 1;
            }
        }
    }
}

/// Batch loss `L_X + λ1·L_Y + λ2·L_XY`, each term a mean over the batch's
/// target positions of that stream.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub l_x: f64,
    pub l_y: f64,
    pub l_xy: f64,
    pub audit: ProbAudit,
}

/// Graph handles for one model.
struct Net<'m> {
    model: &'m Model,
    params: Vec<NodeId>,
    tables: [NodeId; 3],
}

impl<'m> Net<'m> {
    fn register(g: &mut Graph<'m>, model: &'m Model, snapshot: &'m [Tensor], trainable: bool) -> Self {
        let params = snapshot
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        Self::with_params(g, model, params)
    }

    fn with_params(g: &mut Graph<'m>, model: &'m Model, params: Vec<NodeId>) -> Self {
        let img = g.constant(model.frozen_tensor(Modality::Image).unwrap());
        let tex = g.constant(model.frozen_tensor(Modality::Text).unwrap());
        let tables = [params[0], img, tex];
        Net { model, params, tables }
    }

    fn encode(
        &self,
        g: &mut Graph<'m>,
        stream: StreamKind,
        modality: Modality,
        ids: &[usize],
        key: Option<u64>,
    ) -> Result<NodeId> {
        let cfg = &self.model.config;
        if ids.is_empty() {
            return Err(Error::Invalid(format!("empty {} stream", stream.name())));
        }
        if ids.len() > cfg.max_len {
            return Err(Error::Shape(format!(
                "stream of {} exceeds max_len {}",
                ids.len(),
                cfg.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.model.n_items()) {
            return Err(Error::Invalid(format!("item index {bad} outside catalog")));
        }
        let rows: Vec<usize> = ids.iter().map(|&i| row_of(i)).collect();
        let mut f = g.gather(self.tables[modality.index()], &rows)?;
        for layer in 0..cfg.depth {
            let b = self.model.encoder_base(stream, modality, layer);
            let nodes = AttentionNodes {
                w_q: self.params[b],
                w_k: self.params[b + 1],
                w_v: self.params[b + 2],
                pos: self.params[b + 3],
            };
            let opts = AttentionOptions {
                causal: true,
                dropout_rate: cfg.dropout,
                train_mode: key.is_some(),
                residual: true,
                dropout_key: key.map_or(0, |k| rng::mix(k, layer as u64)),
            };
            f = attention_block(g, f, &nodes, &opts)?;
        }
        Ok(f)
    }

    /// Softmax over `sim_scale · cos(h, E[scope])`.
    fn probs(&self, g: &mut Graph<'m>, h: NodeId, modality: Modality, scope: &Range<usize>) -> Result<NodeId> {
        let rows = row_of(scope.start)..row_of(scope.end);
        let c = g.cosine_sim_rows(h, self.tables[modality.index()], rows)?;
        let s = g.scale(c, self.model.config.sim_scale);
        g.softmax_rows(s, None)
    }

    /// Fused distribution for positions `positions` of a stream, plus the
    /// per-modality distributions that entered it.
    fn fused(
        &self,
        g: &mut Graph<'m>,
        stream: StreamKind,
        ids: &[usize],
        positions: Range<usize>,
        key: Option<u64>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let weights = self.model.config.fusion_weights();
        let scope = self.model.scope(stream);
        let mut terms = Vec::with_capacity(3);
        for m in Modality::ALL {
            let w = weights[m.index()];
            if w == 0.0 {
                continue;
            }
            let k = key.map(|k| rng::mix(k, m.index() as u64));
            let h = self.encode(g, stream, m, ids, k)?;
            let h = if positions == (0..ids.len()) {
                h
            } else {
                g.slice_rows(h, positions.clone())?
            };
            terms.push((self.probs(g, h, m, &scope)?, w));
        }
        let fused = g.weighted_sum(&terms)?;
        Ok((fused, terms.into_iter().map(|t| t.0).collect()))
    }
}

fn stream_of(streams: &crate::corpus::Streams, kind: StreamKind) -> &Stream {
    match kind {
        StreamKind::X => &streams.x,
        StreamKind::Y => &streams.y,
        StreamKind::Merged => &streams.merged,
    }
}

impl Model {
    fn stream_weights(&self) -> [f64; 3] {
        [1.0, self.config.lambda1, self.config.lambda2]
    }

    /// Loss of a batch without gradients.
    pub fn compute_loss(&self, batch: &Batch, mode: Mode) -> Result<LossReport> {
        Ok(self.batch_loss(batch, mode, false)?.0)
    }

    /// Loss of a batch and its gradient for every parameter, in
    /// [`Model::params`] order. Streams whose weight is zero are skipped and
    /// report a component of zero.
    pub fn loss_and_grads(&self, batch: &Batch, mode: Mode) -> Result<(LossReport, Vec<Vec<f64>>)> {
        let (report, grads) = self.batch_loss(batch, mode, true)?;
        Ok((report, grads.unwrap()))
    }

    fn batch_loss(&self, batch: &Batch, mode: Mode, with_grads: bool) -> Result<(LossReport, Option<Vec<Vec<f64>>>)> {
        let snapshot = self.snapshot();
        let max_len = self.config.max_len;
        let rows: Vec<_> = (0..batch.size())
            .map(|r| {
                let s = batch.streams(r);
                crate::corpus::Streams {
                    x: s.x.truncated(max_len),
                    y: s.y.truncated(max_len),
                    merged: s.merged.truncated(max_len),
                }
            })
            .collect();
        let mut counts = [0usize; 3];
        for s in &rows {
            for kind in StreamKind::ALL {
                counts[kind.index()] += stream_of(s, kind).n_targets();
            }
        }
        let weights = self.stream_weights();
        let mut grads: Option<Vec<Vec<f64>>> =
            with_grads.then(|| self.params.iter().map(|p| vec![0.0; p.data.len()]).collect());
        let mut report = LossReport::default();
        let mut components = [0.0f64; 3];

        for (r, streams) in rows.iter().enumerate() {
            let mut g = Graph::new();
            let net = Net::register(&mut g, self, &snapshot, with_grads);
            let mut terms = Vec::with_capacity(3);
            for kind in StreamKind::ALL {
                let s = stream_of(streams, kind);
                let n_t = s.n_targets();
                if n_t == 0 || (with_grads && weights[kind.index()] == 0.0) {
                    continue;
                }
                let scope = self.scope(kind);
                let len = s.len();
                let mut local = Vec::with_capacity(len - 1);
                for t in &s.targets[..len - 1] {
                    local.push(match *t {
                        Some(item) if scope.contains(&item) => Some(item - scope.start),
                        Some(item) => {
                            return Err(Error::Invalid(format!(
                                "target {item} outside the {} stream's candidates",
                                kind.name()
                            )))
                        }
                        None => None,
                    });
                }
                let key = match mode {
                    Mode::Eval => None,
                    Mode::Train(k) => Some(
                        [k.epoch, k.batch, r as u64, kind.index() as u64]
                            .into_iter()
                            .fold(k.seed, rng::mix),
                    ),
                };
                let (fused, parts) = net.fused(&mut g, kind, &s.ids, 0..len - 1, key)?;
                for p in parts {
                    report.audit.record(g.value(p));
                }
                report.audit.record(g.value(fused));
                let nll = g.masked_nll(fused, &local)?;
                let frac = n_t as f64 / counts[kind.index()] as f64;
                components[kind.index()] += g.value(nll).item() * frac;
                terms.push((nll, weights[kind.index()] * frac));
            }
            if terms.is_empty() {
                continue;
            }
            let total = g.weighted_sum(&terms)?;
            report.total += g.value(total).item();
            if let Some(acc) = grads.as_mut() {
                let gr = g.backward(total)?;
                for (a, &id) in acc.iter_mut().zip(&net.params) {
                    let t = gr.get(id).expect("param gradient");
                    a.iter_mut().zip(t.values()).for_each(|(o, v)| *o += v);
                }
            }
        }
        [report.l_x, report.l_y, report.l_xy] = components;
        if !report.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite batch loss {}", report.total)));
        }
        Ok((report, grads))
    }

    /// Builds the loss of a batch on an external graph with caller-supplied
    /// parameter leaves (in [`Model::params`] order). Used for gradient checks.
    pub fn loss_graph<'m>(&'m self, g: &mut Graph<'m>, params: &[NodeId], batch: &Batch) -> Result<NodeId> {
        let net = Net::with_params(g, self, params.to_vec());
        let weights = self.stream_weights();
        let max_len = self.config.max_len;
        let rows: Vec<_> = (0..batch.size()).map(|r| batch.streams(r)).collect();
        let mut counts = [0usize; 3];
        for s in &rows {
            for kind in StreamKind::ALL {
                counts[kind.index()] += stream_of(s, kind).truncated(max_len).n_targets();
            }
        }
        let mut terms = Vec::new();
        for streams in &rows {
            for kind in StreamKind::ALL {
                let s = stream_of(streams, kind).truncated(max_len);
                let n_t = s.n_targets();
                if n_t == 0 {
                    continue;
                }
                let scope = self.scope(kind);
                let len = s.len();
                let local: Vec<Option<usize>> = s.targets[..len - 1]
                    .iter()
                    .map(|t| t.map(|i| i - scope.start))
                    .collect();
                let (fused, _) = net.fused(g, kind, &s.ids, 0..len - 1, None)?;
                let nll = g.masked_nll(fused, &local)?;
                terms.push((nll, weights[kind.index()] * n_t as f64 / counts[kind.index()] as f64));
            }
        }
        g.weighted_sum(&terms)
    }

    /// Encoder output (`len × d`) of one stream/modality in evaluation mode.
    pub fn encode(&self, stream: StreamKind, modality: Modality, ids: &[usize]) -> Result<Tensor> {
        let snapshot = self.snapshot();
        let mut g = Graph::new();
        let net = Net::register(&mut g, self, &snapshot, false);
        let h = net.encode(&mut g, stream, modality, ids, None)?;
        Ok(g.value(h).clone())
    }

    /// Per-position distributions of one modality over the stream's scope.
    pub fn stream_probs(&self, stream: StreamKind, modality: Modality, ids: &[usize]) -> Result<Vec<ProbVector>> {
        let snapshot = self.snapshot();
        let mut g = Graph::new();
        let net = Net::register(&mut g, self, &snapshot, false);
        let scope = self.scope(stream);
        let h = net.encode(&mut g, stream, modality, ids, None)?;
        let p = net.probs(&mut g, h, modality, &scope)?;
        Ok(split_rows(g.value(p), &scope))
    }

    /// Per-position fused distributions of a stream.
    pub fn fused_probs(&self, stream: StreamKind, ids: &[usize]) -> Result<Vec<ProbVector>> {
        let snapshot = self.snapshot();
        let mut g = Graph::new();
        let net = Net::register(&mut g, self, &snapshot, false);
        let (p, _) = net.fused(&mut g, stream, ids, 0..ids.len(), None)?;
        Ok(split_rows(g.value(p), &self.scope(stream)))
    }

    pub fn scorer(&self) -> Scorer<'_> {
        Scorer {
            model: self,
            snapshot: self.snapshot(),
        }
    }

    /// Top `k` target-domain items for a history, as `(catalog index, score)`.
    pub fn recommend(&self, context: &[SeqItem], target: Domain, k: usize) -> Result<Vec<(usize, f64)>> {
        let scores = self.scorer().score(context, target)?;
        let start = self.domain_range(target).start;
        Ok(rank_scores(&scores)
            .into_iter()
            .take(k)
            .map(|i| (start + i, scores[i]))
            .collect())
    }
}

fn split_rows(t: &Tensor, scope: &Range<usize>) -> Vec<ProbVector> {
    (0..t.rows())
        .map(|r| ProbVector {
            scope: scope.clone(),
            values: t.row(r).to_vec(),
        })
        .collect()
}

/// Scores target-domain candidates from a parameter snapshot taken once.
pub struct Scorer<'m> {
    model: &'m Model,
    snapshot: Vec<Tensor>,
}

impl Scorer<'_> {
    /// `P^T + λ1·P^O + λ2·P^{XY}` at the last position of each stream, over
    /// the items of `target`. Distributions are zero outside their scope;
    /// an empty source or merged stream contributes nothing.
    pub fn score(&self, context: &[SeqItem], target: Domain) -> Result<Vec<f64>> {
        let model = self.model;
        let max_len = model.config.max_len;
        let tail = |ids: Vec<usize>| -> Vec<usize> {
            let start = ids.len().saturating_sub(max_len);
            ids[start..].to_vec()
        };
        let of_domain = |d: Domain| tail(context.iter().filter(|s| s.domain == d).map(|s| s.item).collect());
        let streams = [
            (StreamKind::of(target), of_domain(target), 1.0),
            (StreamKind::of(target.other()), of_domain(target.other()), model.config.lambda1),
            (StreamKind::Merged, tail(context.iter().map(|s| s.item).collect()), model.config.lambda2),
        ];
        if streams[0].1.is_empty() {
            return Err(Error::Invalid(format!("history has no {target} items")));
        }
        let range = model.domain_range(target);
        let mut out = vec![0.0; range.len()];
        let mut g = Graph::new();
        let net = Net::register(&mut g, model, &self.snapshot, false);
        for (kind, ids, w) in streams {
            if ids.is_empty() || w == 0.0 {
                continue;
            }
            let scope = model.scope(kind);
            let (p, _) = net.fused(&mut g, kind, &ids, ids.len() - 1..ids.len(), None)?;
            let pv = g.value(p).values();
            let lo = range.start.max(scope.start);
            let hi = range.end.min(scope.end);
            for i in lo..hi.max(lo) {
                out[i - range.start] += w * pv[i - scope.start];
            }
        }
        Ok(out)
    }
}
