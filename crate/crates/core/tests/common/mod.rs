#![allow(dead_code)]

use std::sync::Arc;

use emfrec::corpus::{CatalogItem, Domain, ItemCatalog, SeqItem, UserSequence};
use emfrec::embedstore::{EmbeddingMatrix, Modality};
use emfrec::model::{Model, ModelConfig};
use emfrec::rng;
use rand::Rng;

pub fn catalog(nx: usize, ny: usize) -> ItemCatalog {
    let mut items = Vec::new();
    for (d, n) in [(Domain::X, nx), (Domain::Y, ny)] {
        for i in 0..n {
            items.push(CatalogItem {
                item_id: format!("{}{i:03}", d.as_str().to_lowercase()),
                domain: d,
                title: format!("item {i}"),
            });
        }
    }
    ItemCatalog::new(items).unwrap()
}

/// Random unit rows with a zero pad row.
pub fn frozen(m: Modality, catalog: &ItemCatalog, dim: usize, seed: u64) -> Arc<EmbeddingMatrix> {
    let rows = catalog.len() + 1;
    let mut r = rng::seeded(seed);
    let mut data = vec![0.0f32; rows * dim];
    for v in &mut data[dim..] {
        *v = r.random_range(-1.0f32..1.0);
    }
    let mut e = EmbeddingMatrix::from_data(m, rows, dim, data).unwrap();
    e.normalize_rows();
    Arc::new(e)
}

pub fn model(config: ModelConfig, catalog: &ItemCatalog, seed: u64) -> Model {
    let e = config.e;
    Model::init(
        config,
        catalog,
        frozen(Modality::Image, catalog, e, seed + 100),
        frozen(Modality::Text, catalog, e, seed + 200),
        seed,
    )
    .unwrap()
}

/// A sequence from `(catalog index, domain)` pairs with increasing timestamps.
pub fn sequence(user: &str, items: &[(usize, Domain)]) -> UserSequence {
    let merged = items
        .iter()
        .enumerate()
        .map(|(t, &(item, domain))| SeqItem {
            item,
            domain,
            timestamp: 1000 + t as u64,
        })
        .collect();
    UserSequence::from_merged(user, merged)
}

/// Random sequences that alternate domains often enough to fill every stream.
pub fn random_sequences(catalog: &ItemCatalog, n: usize, len: usize, seed: u64) -> Vec<UserSequence> {
    let mut r = rng::seeded(seed);
    (0..n)
        .map(|u| {
            let items: Vec<(usize, Domain)> = (0..len)
                .map(|t| {
                    let d = if t % 3 == 2 { Domain::Y } else { Domain::X };
                    let range = catalog.domain_range(d);
                    (r.random_range(range), d)
                })
                .collect();
            sequence(&format!("u{u}"), &items)
        })
        .collect()
}
