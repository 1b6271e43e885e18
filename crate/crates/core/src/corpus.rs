//! Interaction logs, filtering, temporal splits and padded batches.
//!
//! Item indices are 0-based positions in the [`ItemCatalog`]. Embedding
//! matrices reserve row 0 for padding, so the matrix row of item `i` is
//! `i + 1` (see [`row_of`]); [`Batch`] matrices hold matrix rows, with
//! [`PAD`] marking padding and masked targets.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{rng, Error, Result};

/// Reserved matrix row for padding.
pub const PAD: u32 = 0;

/// Matrix row holding the embedding of catalog item `index`.
#[inline]
pub fn row_of(index: usize) -> usize {
    index + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn other(self) -> Domain {
        match self {
            Domain::X => Domain::Y,
            Domain::Y => Domain::X,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::X => "X",
            Domain::Y => "Y",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "X" => Ok(Domain::X),
            "Y" => Ok(Domain::Y),
            other => Err(Error::Invalid(format!("unknown domain {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub domain: Domain,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub item_id: String,
    pub domain: Domain,
    pub title: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CatalogItem {
    pub item_id: String,
    pub domain: Domain,
    pub title: String,
}

/// Joint item catalog. All domain-X items precede all domain-Y items, so a
/// domain is a contiguous index range.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ItemCatalog {
    items: Vec<CatalogItem>,
    index_of: HashMap<String, usize>,
    n_x: usize,
}

impl ItemCatalog {
    /// Builds a catalog from items already in row order.
    pub fn new(items: Vec<CatalogItem>) -> Result<Self> {
        let n_x = items.iter().take_while(|it| it.domain == Domain::X).count();
        if items[n_x..].iter().any(|it| it.domain == Domain::X) {
            return Err(Error::Invalid(
                "catalog must list every domain-X item before any domain-Y item".into(),
            ));
        }
        let mut index_of = HashMap::with_capacity(items.len());
        for (i, it) in items.iter().enumerate() {
            if index_of.insert(it.item_id.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate catalog item {}", it.item_id)));
            }
        }
        Ok(ItemCatalog {
            items,
            index_of,
            n_x,
        })
    }

    /// Orders items by domain then by item id.
    pub fn from_unordered(mut items: Vec<CatalogItem>) -> Result<Self> {
        items.sort_by(|a, b| (a.domain, &a.item_id).cmp(&(b.domain, &b.item_id)));
        Self::new(items)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[CatalogItem] {
        &self.items
    }

    pub fn item(&self, index: usize) -> Option<&CatalogItem> {
        self.items.get(index)
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index_of.get(item_id).copied()
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_y(&self) -> usize {
        self.items.len() - self.n_x
    }

    pub fn domain_range(&self, domain: Domain) -> Range<usize> {
        match domain {
            Domain::X => 0..self.n_x,
            Domain::Y => self.n_x..self.items.len(),
        }
    }

    pub fn domain_of(&self, index: usize) -> Domain {
        if index < self.n_x {
            Domain::X
        } else {
            Domain::Y
        }
    }

    /// Fills titles from metadata rows; items without metadata keep theirs.
    pub fn attach_titles(&mut self, meta: &[ItemMeta]) {
        for m in meta {
            if let Some(&i) = self.index_of.get(&m.item_id) {
                self.items[i].title = m.title.clone();
            }
        }
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for it in &self.items {
            out.push_str(&format!("{}\t{}\t{}\n", it.item_id, it.domain, it.title));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a catalog written by [`ItemCatalog::write_tsv`], keeping row order.
    pub fn read_tsv(path: &Path) -> Result<Self> {
        let meta = load_metadata(path)?;
        Self::new(
            meta.into_iter()
                .map(|m| CatalogItem {
                    item_id: m.item_id,
                    domain: m.domain,
                    title: m.title,
                })
                .collect(),
        )
    }
}

/// One element of a merged sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqItem {
    pub item: usize,
    pub domain: Domain,
    pub timestamp: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user_id: String,
    pub merged: Vec<SeqItem>,
    pub sub_x: Vec<usize>,
    pub sub_y: Vec<usize>,
}

impl UserSequence {
    /// Builds the domain projections from a chronologically ordered merged list.
    pub fn from_merged(user_id: impl Into<String>, merged: Vec<SeqItem>) -> Self {
        let sub_x = merged
            .iter()
            .filter(|s| s.domain == Domain::X)
            .map(|s| s.item)
            .collect();
        let sub_y = merged
            .iter()
            .filter(|s| s.domain == Domain::Y)
            .map(|s| s.item)
            .collect();
        UserSequence {
            user_id: user_id.into(),
            merged,
            sub_x,
            sub_y,
        }
    }

    pub fn sub(&self, domain: Domain) -> &[usize] {
        match domain {
            Domain::X => &self.sub_x,
            Domain::Y => &self.sub_y,
        }
    }

    pub fn last_timestamp(&self) -> u64 {
        self.merged.last().map_or(0, |s| s.timestamp)
    }

    pub fn len(&self) -> usize {
        self.merged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.merged.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<UserSequence>,
    pub valid: Vec<UserSequence>,
    pub test: Vec<UserSequence>,
    pub catalog: ItemCatalog,
}

fn read_lines(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn split_fields(line: &str, lineno: usize, n: usize) -> Result<Vec<&str>> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != n {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected {n} tab-separated fields, found {}", fields.len()),
        });
    }
    Ok(fields)
}

fn parse_domain(tok: &str, lineno: usize) -> Result<Domain> {
    tok.parse().map_err(|_| Error::Schema {
        line: lineno,
        msg: format!("unknown domain token {tok:?}"),
    })
}

/// Reads `user_id<TAB>domain<TAB>item_id<TAB>timestamp` rows in file order.
pub fn load_interactions(path: &Path) -> Result<Vec<Interaction>> {
    parse_interactions(&read_lines(path)?)
}

pub fn parse_interactions(text: &str) -> Result<Vec<Interaction>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f = split_fields(line, lineno, 4)?;
        if f[0].is_empty() || f[2].is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "empty user or item id".into(),
            });
        }
        let domain = parse_domain(f[1], lineno)?;
        let timestamp = f[3].parse::<u64>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad timestamp {:?}", f[3]),
        })?;
        out.push(Interaction {
            user_id: f[0].to_string(),
            item_id: f[2].to_string(),
            domain,
            timestamp,
        });
    }
    Ok(out)
}

pub fn write_interactions(path: &Path, log: &[Interaction]) -> Result<()> {
    let mut out = String::new();
    for it in log {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            it.user_id, it.domain, it.item_id, it.timestamp
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads `item_id<TAB>domain<TAB>title` rows.
pub fn load_metadata(path: &Path) -> Result<Vec<ItemMeta>> {
    let text = read_lines(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let f = split_fields(line, lineno, 3)?;
        out.push(ItemMeta {
            item_id: f[0].to_string(),
            domain: parse_domain(f[1], lineno)?,
            title: f[2].to_string(),
        });
    }
    Ok(out)
}

pub fn write_metadata(path: &Path, meta: &[ItemMeta]) -> Result<()> {
    let mut out = String::new();
    for m in meta {
        out.push_str(&format!("{}\t{}\t{}\n", m.item_id, m.domain, m.title));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Applies the interaction-count filters until a fixed point and groups the
/// surviving interactions into chronological per-user sequences.
///
/// Each round drops interactions of users or items with fewer than
/// `min_interactions` rows, and of users with fewer than `min_per_domain`
/// rows in either domain. An item id seen under two domains keeps the domain
/// of its first occurrence; rows contradicting it are ignored.
pub fn filter_corpus(
    log: &[Interaction],
    min_interactions: usize,
    min_per_domain: usize,
) -> (Vec<UserSequence>, ItemCatalog) {
    let mut item_domain: HashMap<&str, Domain> = HashMap::new();
    for it in log {
        item_domain.entry(&it.item_id).or_insert(it.domain);
    }
    let mut alive: Vec<bool> = log
        .iter()
        .map(|it| item_domain[it.item_id.as_str()] == it.domain)
        .collect();

    loop {
        let mut user_count: HashMap<&str, [usize; 2]> = HashMap::new();
        let mut item_count: HashMap<&str, usize> = HashMap::new();
        for (it, _) in log.iter().zip(&alive).filter(|(_, &a)| a) {
            let c = user_count.entry(&it.user_id).or_default();
            c[it.domain as usize] += 1;
            *item_count.entry(&it.item_id).or_default() += 1;
        }
        let mut changed = false;
        for (it, a) in log.iter().zip(alive.iter_mut()) {
            if !*a {
                continue;
            }
            let uc = user_count[it.user_id.as_str()];
            let keep = uc[0] + uc[1] >= min_interactions
                && uc[0] >= min_per_domain
                && uc[1] >= min_per_domain
                && item_count[it.item_id.as_str()] >= min_interactions;
            if !keep {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut catalog_items: BTreeMap<(Domain, &str), ()> = BTreeMap::new();
    for (it, _) in log.iter().zip(&alive).filter(|(_, &a)| a) {
        catalog_items.insert((it.domain, &it.item_id), ());
    }
    let catalog = ItemCatalog::new(
        catalog_items
            .into_keys()
            .map(|(domain, id)| CatalogItem {
                item_id: id.to_string(),
                domain,
                title: String::new(),
            })
            .collect(),
    )
    .expect("catalog built from sorted unique keys");

    let kept: Vec<&Interaction> = log
        .iter()
        .zip(&alive)
        .filter(|(_, &a)| a)
        .map(|(it, _)| it)
        .collect();
    let sequences = group_sequences(&kept, &catalog);
    (sequences, catalog)
}

/// Groups interactions per user (users in id order), sorting each user's
/// rows by timestamp with ties kept in input order. Rows whose item is not
/// in `catalog` are skipped.
pub fn group_sequences(log: &[&Interaction], catalog: &ItemCatalog) -> Vec<UserSequence> {
    let mut per_user: BTreeMap<&str, Vec<SeqItem>> = BTreeMap::new();
    for it in log {
        if let Some(idx) = catalog.index_of(&it.item_id) {
            per_user.entry(&it.user_id).or_default().push(SeqItem {
                item: idx,
                domain: catalog.domain_of(idx),
                timestamp: it.timestamp,
            });
        }
    }
    per_user
        .into_iter()
        .map(|(user, mut merged)| {
            merged.sort_by_key(|s| s.timestamp);
            UserSequence::from_merged(user, merged)
        })
        .collect()
}

/// Flattens sequences back into interaction rows.
pub fn to_interactions(sequences: &[UserSequence], catalog: &ItemCatalog) -> Vec<Interaction> {
    sequences
        .iter()
        .flat_map(|s| {
            s.merged.iter().map(move |it| Interaction {
                user_id: s.user_id.clone(),
                item_id: catalog.items()[it.item].item_id.clone(),
                domain: it.domain,
                timestamp: it.timestamp,
            })
        })
        .collect()
}

/// Holds out the most recent sequences: the latest `test_frac` go to test,
/// the next `valid_frac` to valid, the rest to train. Recency is the
/// timestamp of a sequence's last interaction, ties broken by user id.
pub fn split_temporal(
    sequences: &[UserSequence],
    catalog: &ItemCatalog,
    valid_frac: f64,
    test_frac: f64,
) -> Result<DataSplit> {
    if !(valid_frac >= 0.0 && test_frac >= 0.0 && valid_frac + test_frac < 1.0) {
        return Err(Error::Split(format!(
            "fractions must be nonnegative with sum < 1 (valid {valid_frac}, test {test_frac})"
        )));
    }
    let n = sequences.len();
    if (valid_frac > 0.0 || test_frac > 0.0) && n < 3 {
        return Err(Error::Split(format!(
            "need at least 3 sequences to hold out data, have {n}"
        )));
    }
    let count = |frac: f64| -> usize {
        if frac <= 0.0 {
            0
        } else {
            ((n as f64 * frac).round() as usize).max(1)
        }
    };
    let (n_valid, n_test) = (count(valid_frac), count(test_frac));
    if n_valid + n_test >= n && n > 0 {
        return Err(Error::Split(format!(
            "{n_valid} valid + {n_test} test leaves no training sequences out of {n}"
        )));
    }

    let mut ordered: Vec<&UserSequence> = sequences.iter().collect();
    ordered.sort_by(|a, b| {
        (a.last_timestamp(), &a.user_id).cmp(&(b.last_timestamp(), &b.user_id))
    });
    let n_train = n - n_valid - n_test;
    let take = |r: Range<usize>| ordered[r].iter().map(|s| (*s).clone()).collect::<Vec<_>>();
    Ok(DataSplit {
        train: take(0..n_train),
        valid: take(n_train..n_train + n_valid),
        test: take(n_train + n_valid..n),
        catalog: catalog.clone(),
    })
}

pub fn write_manifest(path: &Path, sequences: &[UserSequence]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for s in sequences {
        writeln!(f, "{}", s.user_id).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    Ok(read_lines(path)?
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// One behavioral stream with next-item targets. `targets[t]` is
/// `ids[t + 1]`; the final position has no target.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Stream {
    pub ids: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

impl Stream {
    pub fn new(ids: Vec<usize>) -> Self {
        let targets = (0..ids.len()).map(|t| ids.get(t + 1).copied()).collect();
        Stream { ids, targets }
    }

    /// Keeps the most recent `max_len` positions.
    pub fn truncated(&self, max_len: usize) -> Stream {
        let start = self.ids.len().saturating_sub(max_len);
        Stream {
            ids: self.ids[start..].to_vec(),
            targets: self.targets[start..].to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Streams {
    pub x: Stream,
    pub y: Stream,
    pub merged: Stream,
}

/// Splits a sequence into its X-only, Y-only and merged streams.
pub fn extract_streams(seq: &UserSequence) -> Streams {
    Streams {
        x: Stream::new(seq.sub_x.clone()),
        y: Stream::new(seq.sub_y.clone()),
        merged: Stream::new(seq.merged.iter().map(|s| s.item).collect()),
    }
}

/// A left-padded `size × len` block for one stream. `ids` and `targets` hold
/// matrix rows ([`row_of`]); [`PAD`] marks padding and masked targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamBatch {
    pub len: usize,
    pub ids: Vec<u32>,
    pub targets: Vec<u32>,
    pub pad_mask: Vec<bool>,
}

impl StreamBatch {
    fn build(streams: &[Stream], len: usize) -> Self {
        let n = streams.len() * len;
        let mut b = StreamBatch {
            len,
            ids: vec![PAD; n],
            targets: vec![PAD; n],
            pad_mask: vec![true; n],
        };
        for (r, s) in streams.iter().enumerate() {
            let s = s.truncated(len);
            let offset = r * len + (len - s.len());
            for (t, (&id, tgt)) in s.ids.iter().zip(&s.targets).enumerate() {
                b.ids[offset + t] = row_of(id) as u32;
                b.targets[offset + t] = tgt.map_or(PAD, |x| row_of(x) as u32);
                b.pad_mask[offset + t] = false;
            }
        }
        b
    }

    /// Unpadded stream of row `r`, in item indices.
    pub fn row(&self, r: usize) -> Stream {
        let span = r * self.len..(r + 1) * self.len;
        let mut s = Stream::default();
        for i in span {
            if !self.pad_mask[i] {
                s.ids.push(self.ids[i] as usize - 1);
                s.targets.push(match self.targets[i] {
                    PAD => None,
                    t => Some(t as usize - 1),
                });
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the batch rows in the sequence list passed to [`batchify`].
    pub members: Vec<usize>,
    pub merged: StreamBatch,
    pub x: StreamBatch,
    pub y: StreamBatch,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn streams(&self, r: usize) -> Streams {
        Streams {
            x: self.x.row(r),
            y: self.y.row(r),
            merged: self.merged.row(r),
        }
    }
}

/// Shuffles sequences deterministically from `seed` and cuts them into
/// left-padded batches of width `max_len`.
pub fn batchify(
    sequences: &[UserSequence],
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if max_len < 2 {
        return Err(Error::Config(format!("max_len must be at least 2, got {max_len}")));
    }
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    Ok(order
        .chunks(batch_size)
        .map(|members| {
            let streams: Vec<Streams> = members
                .iter()
                .map(|&i| extract_streams(&sequences[i]))
                .collect();
            let pick = |f: fn(&Streams) -> &Stream| -> Vec<Stream> {
                streams.iter().map(|s| f(s).clone()).collect()
            };
            Batch {
                members: members.to_vec(),
                merged: StreamBatch::build(&pick(|s| &s.merged), max_len),
                x: StreamBatch::build(&pick(|s| &s.x), max_len),
                y: StreamBatch::build(&pick(|s| &s.y), max_len),
            }
        })
        .collect())
}

/// Average lengths, reported both for merged and per-domain sequences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_sequences: usize,
    pub n_items_x: usize,
    pub n_items_y: usize,
    pub n_interactions: usize,
    pub avg_len_merged: f64,
    pub avg_len_x: f64,
    pub avg_len_y: f64,
}

impl CorpusStats {
    pub fn compute(sequences: &[UserSequence], catalog: &ItemCatalog) -> Self {
        let n = sequences.len();
        let total: usize = sequences.iter().map(|s| s.len()).sum();
        let avg = |f: &dyn Fn(&UserSequence) -> usize| {
            if n == 0 {
                0.0
            } else {
                sequences.iter().map(f).sum::<usize>() as f64 / n as f64
            }
        };
        CorpusStats {
            n_sequences: n,
            n_items_x: catalog.n_x(),
            n_items_y: catalog.n_y(),
            n_interactions: total,
            avg_len_merged: avg(&|s| s.len()),
            avg_len_x: avg(&|s| s.sub_x.len()),
            avg_len_y: avg(&|s| s.sub_y.len()),
        }
    }
}
