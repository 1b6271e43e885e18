//! Item embedding matrices and their on-disk format.
//!
//! Binary layout (little-endian): magic `EMB1`, `u32` version (1), `u8`
//! modality code (0 = id, 1 = image, 2 = text), `u64` rows, `u64` dim, then
//! `rows × dim` `f32` values row-major. A TSV sidecar maps
//! `item_id<TAB>row_index` with row indices starting at 1; row 0 is padding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{row_of, CatalogItem, Domain, Interaction, ItemCatalog, SeqItem, UserSequence};
use crate::{rng, Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 8 + 8;

/// Norm deviation below which a row counts as already normalized.
const NORM_TOLERANCE: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Id,
    Image,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Id, Modality::Image, Modality::Text];

    pub fn code(self) -> u8 {
        match self {
            Modality::Id => 0,
            Modality::Image => 1,
            Modality::Text => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Modality::Id),
            1 => Some(Modality::Image),
            2 => Some(Modality::Text),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self.code() as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Id => "id",
            Modality::Image => "img",
            Modality::Text => "tex",
        }
    }
}

/// Dense `f32` matrix over the joint catalog plus the pad row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    modality: Modality,
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    frozen: bool,
}

impl EmbeddingMatrix {
    /// Wraps raw row-major data. Row 0 must be zero and every entry finite.
    pub fn from_data(modality: Modality, rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || data.len() != rows * dim {
            return Err(Error::Shape(format!(
                "{rows}x{dim} matrix needs {} values, got {}",
                rows * dim,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite entry in row {}", pos / dim.max(1))));
        }
        if data[..dim].iter().any(|&v| v != 0.0) {
            return Err(Error::Invalid("pad row 0 must be zero".into()));
        }
        Ok(EmbeddingMatrix {
            modality,
            rows,
            dim,
            data,
            frozen: modality != Modality::Id,
        })
    }

    pub fn zeros(modality: Modality, rows: usize, dim: usize) -> Self {
        EmbeddingMatrix {
            modality,
            rows,
            dim,
            data: vec![0.0; rows * dim],
            frozen: modality != Modality::Id,
        }
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.dim..(r + 1) * self.dim]
    }

    /// Scales every nonzero row to unit L2 norm. Rows already within
    /// tolerance are left bit-for-bit untouched.
    pub fn normalize_rows(&mut self) {
        for r in 1..self.rows {
            let row = self.row_mut(r);
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 0.0 && (norm - 1.0).abs() > NORM_TOLERANCE {
                for v in row.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.modality.code());
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the raw file rows without reordering.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format("embedding file shorter than its header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, expected EMB1".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported embedding version {version}")));
        }
        let modality = Modality::from_code(bytes[8])
            .ok_or_else(|| Error::Format(format!("unknown modality code {}", bytes[8])))?;
        let rows = u64::from_le_bytes(bytes[9..17].try_into().unwrap()) as usize;
        let dim = u64::from_le_bytes(bytes[17..25].try_into().unwrap()) as usize;
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite entry in row {}",
                pos / dim.max(1)
            )));
        }
        Ok(EmbeddingMatrix {
            modality,
            rows,
            dim,
            data,
            frozen: modality != Modality::Id,
        })
    }
}

/// Writes the matrix and its index sidecar. Row `r ≥ 1` belongs to catalog
/// item `r - 1`.
pub fn write_matrix(
    m: &EmbeddingMatrix,
    catalog: &ItemCatalog,
    data_path: &Path,
    index_path: &Path,
) -> Result<()> {
    if m.rows != catalog.len() + 1 {
        return Err(Error::Shape(format!(
            "matrix has {} rows, catalog needs {}",
            m.rows,
            catalog.len() + 1
        )));
    }
    fs::write(data_path, m.to_bytes()).map_err(|e| Error::io(data_path, e))?;
    let mut index = String::new();
    for (i, it) in catalog.items().iter().enumerate() {
        index.push_str(&format!("{}\t{}\n", it.item_id, row_of(i)));
    }
    fs::write(index_path, index).map_err(|e| Error::io(index_path, e))
}

/// Sidecar path used by the CLI: `<data_path>.idx`.
pub fn index_path_for(data_path: &Path) -> std::path::PathBuf {
    let mut s = data_path.as_os_str().to_owned();
    s.push(".idx");
    s.into()
}

/// Loads a matrix and permutes it into catalog order. Image and text rows are
/// L2-normalized; the pad row is zeroed. `expected_dim`, when given, must
/// match the file.
pub fn load_matrix(
    data_path: &Path,
    index_path: &Path,
    catalog: &ItemCatalog,
    expected_dim: Option<usize>,
) -> Result<EmbeddingMatrix> {
    let bytes = fs::read(data_path).map_err(|e| Error::io(data_path, e))?;
    let raw = EmbeddingMatrix::from_bytes(&bytes)?;
    if let Some(d) = expected_dim {
        if raw.dim != d {
            return Err(Error::Shape(format!(
                "{} embedding dim {} does not match configured {d}",
                raw.modality.name(),
                raw.dim
            )));
        }
    }
    let index_text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let mut rows_by_id: HashMap<&str, usize> = HashMap::new();
    for (i, line) in index_text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (id, row) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: i + 1,
            msg: "expected item_id<TAB>row_index".into(),
        })?;
        let row: usize = row.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad row index {row:?}"),
        })?;
        if row == 0 || row >= raw.rows {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("row index {row} outside 1..{}", raw.rows),
            });
        }
        if rows_by_id.insert(id, row).is_some() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("duplicate item {id}"),
            });
        }
    }

    let mut out = EmbeddingMatrix::zeros(raw.modality, catalog.len() + 1, raw.dim);
    for (i, it) in catalog.items().iter().enumerate() {
        let src = *rows_by_id.get(it.item_id.as_str()).ok_or_else(|| {
            Error::Invalid(format!("item {} missing from embedding index", it.item_id))
        })?;
        out.row_mut(row_of(i)).copy_from_slice(raw.row(src));
    }
    if out.modality != Modality::Id {
        out.normalize_rows();
    }
    Ok(out)
}

/// Parameters of a planted-structure world for tests and experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorldSpec {
    pub n_clusters: usize,
    pub items_per_domain: usize,
    /// Row-stochastic `n_clusters × n_clusters` matrix.
    pub cluster_transition: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub seed: u64,
    pub n_users: usize,
    /// Inclusive range of merged sequence lengths.
    pub min_len: usize,
    pub max_len: usize,
    /// Dimension of the image and text embeddings.
    pub dim: usize,
}

impl SyntheticWorldSpec {
    pub fn identity_transitions(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect()
    }

    /// Stay in the current cluster with probability `stay`, otherwise move to
    /// the next cluster (cyclically).
    pub fn sticky_transitions(n: usize, stay: f64) -> Vec<Vec<f64>> {
        if n == 1 {
            return vec![vec![1.0]];
        }
        (0..n)
            .map(|i| {
                let mut row = vec![0.0; n];
                row[i] = stay;
                row[(i + 1) % n] += 1.0 - stay;
                row
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.n_clusters;
        if c == 0 {
            return Err(Error::Config("n_clusters must be positive".into()));
        }
        if c > self.dim {
            return Err(Error::Config(format!(
                "{c} clusters cannot have orthogonal centroids in dim {}",
                self.dim
            )));
        }
        if self.items_per_domain < c {
            return Err(Error::Config("every cluster needs at least one item per domain".into()));
        }
        if self.cluster_transition.len() != c || self.cluster_transition.iter().any(|r| r.len() != c) {
            return Err(Error::Config(format!("cluster_transition must be {c}x{c}")));
        }
        for (i, row) in self.cluster_transition.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&p| p.is_nan() || p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("cluster_transition row {i} is not a distribution")));
            }
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be nonnegative".into()));
        }
        if self.min_len < 6 || self.max_len < self.min_len {
            return Err(Error::Config(
                "sequence lengths need 6 <= min_len <= max_len (3 items per domain)".into(),
            ));
        }
        Ok(())
    }
}

pub struct SyntheticWorld {
    pub catalog: ItemCatalog,
    pub e_img: EmbeddingMatrix,
    pub e_tex: EmbeddingMatrix,
    pub sequences: Vec<UserSequence>,
    /// Cluster of every catalog item.
    pub cluster_of: Vec<usize>,
}

impl SyntheticWorld {
    pub fn interactions(&self) -> Vec<Interaction> {
        crate::corpus::to_interactions(&self.sequences, &self.catalog)
    }
}

/// Orthonormal vectors from Gram-Schmidt over Gaussian draws.
fn orthonormal_centroids(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(b).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    basis
}

fn cluster_embeddings(
    modality: Modality,
    cluster_of: &[usize],
    centroids: &[Vec<f64>],
    sigma: f64,
    rng: &mut impl Rng,
) -> EmbeddingMatrix {
    let dim = centroids[0].len();
    let mut m = EmbeddingMatrix::zeros(modality, cluster_of.len() + 1, dim);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for (i, &c) in cluster_of.iter().enumerate() {
        let v: Vec<f64> = centroids[c]
            .iter()
            .map(|&x| x + sigma * normal.sample(rng))
            .collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for (dst, x) in m.row_mut(row_of(i)).iter_mut().zip(&v) {
            *dst = (x / norm) as f32;
        }
    }
    m
}

fn sample_index(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Generates a catalog with clustered frozen embeddings and users walking a
/// cluster-level Markov chain. Item `k` of each domain belongs to cluster
/// `k mod n_clusters`. Each step moves the walk through `cluster_transition`,
/// picks a domain uniformly, and emits a uniform item of the current cluster
/// in that domain. Sequences with fewer than 3 items in a domain are redrawn.
pub fn gen_synthetic(spec: &SyntheticWorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let c = spec.n_clusters;
    let m = spec.items_per_domain;

    let mut items = Vec::with_capacity(2 * m);
    let mut cluster_of = Vec::with_capacity(2 * m);
    for (domain, prefix) in [(Domain::X, "x"), (Domain::Y, "y")] {
        for k in 0..m {
            items.push(CatalogItem {
                item_id: format!("{prefix}{k:05}"),
                domain,
                title: format!("{domain} item {k} of cluster {}", k % c),
            });
            cluster_of.push(k % c);
        }
    }
    let catalog = ItemCatalog::new(items)?;

    let img_centroids = orthonormal_centroids(c, spec.dim, &mut rng);
    let tex_centroids = orthonormal_centroids(c, spec.dim, &mut rng);
    let e_img = cluster_embeddings(Modality::Image, &cluster_of, &img_centroids, spec.noise_sigma, &mut rng);
    let e_tex = cluster_embeddings(Modality::Text, &cluster_of, &tex_centroids, spec.noise_sigma, &mut rng);

    // members[domain][cluster] -> catalog indices
    let mut members = vec![vec![Vec::new(); c]; 2];
    for (i, &cl) in cluster_of.iter().enumerate() {
        members[catalog.domain_of(i) as usize][cl].push(i);
    }

    let width = spec.n_users.max(1).to_string().len();
    let mut sequences = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let start_cluster = rng.random_range(0..c);
        let mut t: u64 = rng.random_range(0..1_000_000);
        let domains = loop {
            let d: Vec<Domain> = (0..len)
                .map(|_| if rng.random_bool(0.5) { Domain::X } else { Domain::Y })
                .collect();
            let nx = d.iter().filter(|&&d| d == Domain::X).count();
            if nx >= 3 && len - nx >= 3 {
                break d;
            }
        };
        let mut cluster = start_cluster;
        let mut merged = Vec::with_capacity(len);
        for (step, &domain) in domains.iter().enumerate() {
            if step > 0 {
                cluster = sample_index(&spec.cluster_transition[cluster], &mut rng);
                t += rng.random_range(1..=100);
            }
            let pool = &members[domain as usize][cluster];
            let item = pool[rng.random_range(0..pool.len())];
            merged.push(SeqItem {
                item,
                domain,
                timestamp: t,
            });
        }
        sequences.push(UserSequence::from_merged(format!("u{u:0width$}"), merged));
    }

    Ok(SyntheticWorld {
        catalog,
        e_img,
        e_tex,
        sequences,
        cluster_of,
    })
}
