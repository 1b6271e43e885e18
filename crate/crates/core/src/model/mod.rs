//! The nine-stream multimodal recommender.
//!
//! Each behavioral stream (X-only, Y-only, merged) is encoded once per
//! modality (ID, image, text) by its own causal attention stack. A position's
//! representation is scored against the modality's item matrix by cosine
//! similarity, turned into a distribution over the stream's candidate scope,
//! and the three modality distributions are fused with weights
//! `(α, β, 1 - α - β)`.

mod checkpoint;
mod forward;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{fuse_probs, rank_scores, LossReport, Mode, ProbAudit, ProbVector, Scorer, StepKey};

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Domain, ItemCatalog};
use crate::embedstore::{EmbeddingMatrix, Modality};
use crate::tensor::Tensor;
use crate::{rng, Error, Result};

/// Which items a per-domain stream is scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateScope {
    /// X stream over X items, Y stream over Y items, merged over all.
    #[default]
    PerDomain,
    /// Every stream over the full catalog.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// ID embedding dimension.
    pub q: usize,
    /// Image/text embedding dimension.
    pub e: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub depth: usize,
    pub max_len: usize,
    /// Softmax temperature applied to cosine scores.
    pub sim_scale: f64,
    pub share_params_per_modality: bool,
    /// Dropout on attention weights during training.
    pub dropout: f64,
    pub candidate_scope: CandidateScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            q: 256,
            e: 512,
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            lambda1: 0.3,
            lambda2: 0.1,
            depth: 1,
            max_len: 50,
            sim_scale: 10.0,
            share_params_per_modality: false,
            dropout: 0.3,
            candidate_scope: CandidateScope::PerDomain,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta <= 1.0 + 1e-12) {
            return bad(format!(
                "fusion weights need alpha, beta >= 0 and alpha + beta <= 1 (got {}, {})",
                self.alpha, self.beta
            ));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("lambda1 and lambda2 must be nonnegative".into());
        }
        if !(self.sim_scale > 0.0 && self.sim_scale.is_finite()) {
            return bad(format!("sim_scale must be positive, got {}", self.sim_scale));
        }
        if self.q == 0 || self.e == 0 || self.depth == 0 {
            return bad("q, e and depth must be positive".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// `[α, β, 1 - α - β]`, indexed by [`Modality::index`].
    pub fn fusion_weights(&self) -> [f64; 3] {
        [self.alpha, self.beta, (1.0 - self.alpha - self.beta).max(0.0)]
    }

    pub fn dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Id => self.q,
            Modality::Image | Modality::Text => self.e,
        }
    }
}

/// One of the three behavioral streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamKind {
    X,
    Y,
    Merged,
}

impl StreamKind {
    pub const ALL: [StreamKind; 3] = [StreamKind::X, StreamKind::Y, StreamKind::Merged];

    pub fn of(domain: Domain) -> Self {
        match domain {
            Domain::X => StreamKind::X,
            Domain::Y => StreamKind::Y,
        }
    }

    pub fn index(self) -> usize {
        match self {
            StreamKind::X => 0,
            StreamKind::Y => 1,
            StreamKind::Merged => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::X => "x",
            StreamKind::Y => "y",
            StreamKind::Merged => "xy",
        }
    }
}

/// A learnable tensor in `f32` storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Param {
    fn zeros(name: String, rows: usize, cols: usize) -> Self {
        Param {
            name,
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(self.rows, self.cols, &self.data).expect("param shape")
    }
}

const PARAMS_PER_LAYER: usize = 4;
const LAYER_PARAM_NAMES: [&str; PARAMS_PER_LAYER] = ["w_q", "w_k", "w_v", "pos"];

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    n_x: usize,
    n_y: usize,
    params: Vec<Param>,
    e_img: Arc<EmbeddingMatrix>,
    e_tex: Arc<EmbeddingMatrix>,
    /// `f64` views of the frozen matrices, shared between clones.
    frozen: Arc<[Tensor; 2]>,
}

impl Model {
    /// Validates the config and frozen matrices and allocates zeroed
    /// parameters with the right shapes.
    fn shell(
        config: ModelConfig,
        catalog: &ItemCatalog,
        e_img: Arc<EmbeddingMatrix>,
        e_tex: Arc<EmbeddingMatrix>,
    ) -> Result<Self> {
        config.validate()?;
        let rows = catalog.len() + 1;
        for (m, want) in [(&e_img, Modality::Image), (&e_tex, Modality::Text)] {
            if m.modality() != want {
                return Err(Error::Shape(format!(
                    "expected a {} matrix, got {}",
                    want.name(),
                    m.modality().name()
                )));
            }
            if m.rows() != rows {
                return Err(Error::Shape(format!(
                    "{} matrix has {} rows, catalog needs {rows}",
                    want.name(),
                    m.rows()
                )));
            }
            if m.dim() != config.e {
                return Err(Error::Shape(format!(
                    "{} matrix dim {} does not match e = {}",
                    want.name(),
                    m.dim(),
                    config.e
                )));
            }
        }
        let widen = |m: &EmbeddingMatrix| Tensor::from_f32(m.rows(), m.dim(), m.data()).unwrap();
        let frozen = Arc::new([widen(&e_img), widen(&e_tex)]);

        let mut params = vec![Param::zeros("e_id".into(), rows, config.q)];
        let slots: Vec<String> = if config.share_params_per_modality {
            Modality::ALL.iter().map(|m| format!("shared.{}", m.name())).collect()
        } else {
            StreamKind::ALL
                .iter()
                .flat_map(|s| Modality::ALL.iter().map(move |m| format!("{}.{}", s.name(), m.name())))
                .collect()
        };
        let slot_dims: Vec<usize> = if config.share_params_per_modality {
            Modality::ALL.iter().map(|&m| config.dim(m)).collect()
        } else {
            StreamKind::ALL
                .iter()
                .flat_map(|_| Modality::ALL.iter().map(|&m| config.dim(m)))
                .collect()
        };
        for (slot, &d) in slots.iter().zip(&slot_dims) {
            for layer in 0..config.depth {
                for name in LAYER_PARAM_NAMES {
                    let rows = if name == "pos" { config.max_len } else { d };
                    params.push(Param::zeros(format!("enc.{slot}.{layer}.{name}"), rows, d));
                }
            }
        }
        Ok(Model {
            config,
            n_x: catalog.n_x(),
            n_y: catalog.n_y(),
            params,
            e_img,
            e_tex,
            frozen,
        })
    }

    /// Builds a model with parameters drawn deterministically from `seed`:
    /// ID rows and projections uniform in `±1/√d`, positional rows in
    /// `±0.1/√d`, pad row zero.
    pub fn init(
        config: ModelConfig,
        catalog: &ItemCatalog,
        e_img: Arc<EmbeddingMatrix>,
        e_tex: Arc<EmbeddingMatrix>,
        seed: u64,
    ) -> Result<Self> {
        let mut model = Self::shell(config, catalog, e_img, e_tex)?;
        let mut r = rng::seeded(seed);
        for (i, p) in model.params.iter_mut().enumerate() {
            let bound = 1.0 / (p.cols as f32).sqrt();
            let bound = if p.name.ends_with(".pos") { 0.1 * bound } else { bound };
            let skip = if i == 0 { p.cols } else { 0 };
            for v in &mut p.data[skip..] {
                *v = r.random_range(-bound..=bound);
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the fusion and domain weights; they do not affect parameter shapes.
    pub fn set_weights(&mut self, alpha: f64, beta: f64, lambda1: f64, lambda2: f64) -> Result<()> {
        let mut c = self.config.clone();
        c.alpha = alpha;
        c.beta = beta;
        c.lambda1 = lambda1;
        c.lambda2 = lambda2;
        c.validate()?;
        self.config = c;
        Ok(())
    }

    pub fn set_candidate_scope(&mut self, scope: CandidateScope) {
        self.config.candidate_scope = scope;
    }

    pub fn n_items(&self) -> usize {
        self.n_x + self.n_y
    }

    pub fn domain_range(&self, domain: Domain) -> Range<usize> {
        match domain {
            Domain::X => 0..self.n_x,
            Domain::Y => self.n_x..self.n_x + self.n_y,
        }
    }

    /// Candidate items (catalog indices) a stream is scored against.
    pub fn scope(&self, stream: StreamKind) -> Range<usize> {
        match (self.config.candidate_scope, stream) {
            (CandidateScope::All, _) | (_, StreamKind::Merged) => 0..self.n_items(),
            (CandidateScope::PerDomain, StreamKind::X) => self.domain_range(Domain::X),
            (CandidateScope::PerDomain, StreamKind::Y) => self.domain_range(Domain::Y),
        }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn e_img(&self) -> &Arc<EmbeddingMatrix> {
        &self.e_img
    }

    pub fn e_tex(&self) -> &Arc<EmbeddingMatrix> {
        &self.e_tex
    }

    /// The learnable ID matrix as an embedding matrix.
    pub fn id_matrix(&self) -> EmbeddingMatrix {
        let p = &self.params[0];
        EmbeddingMatrix::from_data(Modality::Id, p.rows, p.cols, p.data.clone())
            .expect("ID matrix keeps a zero pad row")
    }

    /// Widened copies of every parameter, in [`Model::params`] order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(Param::to_tensor).collect()
    }

    fn frozen_tensor(&self, modality: Modality) -> Option<&Tensor> {
        match modality {
            Modality::Id => None,
            Modality::Image => Some(&self.frozen[0]),
            Modality::Text => Some(&self.frozen[1]),
        }
    }

    /// Index into [`Model::params`] of the first tensor of an encoder layer.
    fn encoder_base(&self, stream: StreamKind, modality: Modality, layer: usize) -> usize {
        let slot = if self.config.share_params_per_modality {
            modality.index()
        } else {
            stream.index() * 3 + modality.index()
        };
        1 + (slot * self.config.depth + layer) * PARAMS_PER_LAYER
    }

    /// Number of encoder stacks (9, or 3 when shared per modality).
    pub fn n_encoder_slots(&self) -> usize {
        (self.params.len() - 1) / (PARAMS_PER_LAYER * self.config.depth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CatalogItem;

    fn catalog(nx: usize, ny: usize) -> ItemCatalog {
        let mut items = Vec::new();
        for i in 0..nx {
            items.push(CatalogItem { item_id: format!("x{i}"), domain: Domain::X, title: String::new() });
        }
        for i in 0..ny {
            items.push(CatalogItem { item_id: format!("y{i}"), domain: Domain::Y, title: String::new() });
        }
        ItemCatalog::new(items).unwrap()
    }

    fn frozen(m: Modality, rows: usize, dim: usize) -> Arc<EmbeddingMatrix> {
        let mut data = vec![0.0f32; rows * dim];
        for r in 1..rows {
            data[r * dim + r % dim] = 1.0;
        }
        Arc::new(EmbeddingMatrix::from_data(m, rows, dim, data).unwrap())
    }

    fn small_config() -> ModelConfig {
        ModelConfig { q: 4, e: 3, max_len: 5, ..Default::default() }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cat = catalog(3, 2);
        let (img, tex) = (frozen(Modality::Image, 6, 3), frozen(Modality::Text, 6, 3));
        let a = Model::init(small_config(), &cat, img.clone(), tex.clone(), 11).unwrap();
        let b = Model::init(small_config(), &cat, img.clone(), tex.clone(), 11).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.n_encoder_slots(), 9);
        assert_eq!(a.params().len(), 1 + 9 * 4);
        assert!(a.params()[0].data[..4].iter().all(|&v| v == 0.0));
        let c = Model::init(small_config(), &cat, img, tex, 12).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn shared_params_collapse_to_three_slots() {
        let cat = catalog(3, 2);
        let cfg = ModelConfig { share_params_per_modality: true, depth: 2, ..small_config() };
        let m = Model::init(cfg, &cat, frozen(Modality::Image, 6, 3), frozen(Modality::Text, 6, 3), 0).unwrap();
        assert_eq!(m.n_encoder_slots(), 3);
        assert_eq!(
            m.encoder_base(StreamKind::X, Modality::Text, 1),
            m.encoder_base(StreamKind::Merged, Modality::Text, 1)
        );
    }

    #[test]
    fn init_rejects_mismatched_inputs() {
        let cat = catalog(3, 2);
        let err = Model::init(small_config(), &cat, frozen(Modality::Image, 5, 3), frozen(Modality::Text, 6, 3), 0);
        assert!(matches!(err, Err(Error::Shape(_))));
        let cfg = ModelConfig { alpha: 0.6, beta: 0.6, ..small_config() };
        let err = Model::init(cfg, &cat, frozen(Modality::Image, 6, 3), frozen(Modality::Text, 6, 3), 0);
        assert!(matches!(err, Err(Error::Config(_))));
        let err = Model::init(small_config(), &cat, frozen(Modality::Text, 6, 3), frozen(Modality::Text, 6, 3), 0);
        assert!(err.is_err());
    }

    #[test]
    fn scopes() {
        let cat = catalog(3, 2);
        let mut m = Model::init(small_config(), &cat, frozen(Modality::Image, 6, 3), frozen(Modality::Text, 6, 3), 0).unwrap();
        assert_eq!(m.scope(StreamKind::X), 0..3);
        assert_eq!(m.scope(StreamKind::Y), 3..5);
        assert_eq!(m.scope(StreamKind::Merged), 0..5);
        m.set_candidate_scope(CandidateScope::All);
        assert_eq!(m.scope(StreamKind::Y), 0..5);
    }
}
