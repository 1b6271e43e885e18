//! Ranking metrics over target-domain candidates.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::{Domain, UserSequence};
use crate::model::Model;
use crate::{Error, Result};

/// 1-based rank of `truth` under descending score; an equal score ranks
/// ahead only when its index is lower.
pub fn rank_of(scores: &[f64], truth: usize) -> Result<usize> {
    let t = *scores
        .get(truth)
        .ok_or_else(|| Error::Invalid(format!("truth {truth} outside {} candidates", scores.len())))?;
    Ok(1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < truth))
        .count())
}

pub fn reciprocal_rank(scores: &[f64], truth: usize) -> Result<f64> {
    Ok(1.0 / rank_of(scores, truth)? as f64)
}

pub fn ndcg_from_rank(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / (1.0 + rank as f64).log2()
    } else {
        0.0
    }
}

pub fn ndcg_at_k(scores: &[f64], truth: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Invalid("ndcg cutoff must be at least 1".into()));
    }
    Ok(ndcg_from_rank(rank_of(scores, truth)?, k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub target: Domain,
    pub mrr: f64,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_sequences: usize,
    pub per_sequence: Vec<(String, usize)>,
}

impl MetricReport {
    /// Aggregates per-sequence ranks into mean RR and mean NDCG at each cutoff.
    pub fn from_ranks(target: Domain, per_sequence: Vec<(String, usize)>, cutoffs: &[usize]) -> Result<Self> {
        if cutoffs.contains(&0) {
            return Err(Error::Invalid("ndcg cutoff must be at least 1".into()));
        }
        let n = per_sequence.len();
        let mean = |f: &dyn Fn(usize) -> f64| -> f64 {
            if n == 0 {
                0.0
            } else {
                per_sequence.iter().map(|(_, r)| f(*r)).sum::<f64>() / n as f64
            }
        };
        let mrr = mean(&|r| 1.0 / r as f64);
        let ndcg = cutoffs.iter().map(|&k| (k, mean(&|r| ndcg_from_rank(r, k)))).collect();
        Ok(MetricReport {
            target,
            mrr,
            ndcg,
            n_sequences: n,
            per_sequence,
        })
    }

    /// Header row plus one value row: `target n mrr ndcg@K...`.
    pub fn to_tsv(&self) -> String {
        let mut head = String::from("target\tn_sequences\tmrr");
        let mut row = format!("{}\t{}\t{:.6}", self.target, self.n_sequences, self.mrr);
        for (k, v) in &self.ndcg {
            let _ = write!(head, "\tndcg@{k}");
            let _ = write!(row, "\t{v:.6}");
        }
        format!("{head}\n{row}\n")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `user_id<TAB>rank` per evaluated sequence.
    pub fn ranks_tsv(&self) -> String {
        let mut s = String::from("user_id\trank\n");
        for (u, r) in &self.per_sequence {
            let _ = writeln!(s, "{u}\t{r}");
        }
        s
    }
}

/// Holds out each sequence's last `target` item, ranks it among all target
/// items given everything before it, and aggregates.
pub fn evaluate(model: &Model, sequences: &[UserSequence], target: Domain, cutoffs: &[usize]) -> Result<MetricReport> {
    let scorer = model.scorer();
    let start = model.domain_range(target).start;
    let mut ranks = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let pos = seq
            .merged
            .iter()
            .rposition(|s| s.domain == target)
            .ok_or_else(|| Error::Invalid(format!("user {} has no {target} items", seq.user_id)))?;
        let context = &seq.merged[..pos];
        if !context.iter().any(|s| s.domain == target) {
            return Err(Error::Invalid(format!(
                "user {} has no {target} item before the held-out one",
                seq.user_id
            )));
        }
        let scores = scorer.score(context, target)?;
        ranks.push((seq.user_id.clone(), rank_of(&scores, seq.merged[pos].item - start)?));
    }
    MetricReport::from_ranks(target, ranks, cutoffs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_definitions() {
        assert_eq!(reciprocal_rank(&[0.9, 0.1, 0.5], 0).unwrap(), 1.0);
        assert_eq!(reciprocal_rank(&[0.1, 0.9, 0.8, 0.7, 0.0], 0).unwrap(), 0.25);
        // tie: truth at lower index wins
        assert_eq!(rank_of(&[0.5, 0.5], 0).unwrap(), 1);
        assert_eq!(rank_of(&[0.5, 0.5], 1).unwrap(), 2);
        assert!(rank_of(&[0.5], 1).is_err());
    }

    #[test]
    fn ndcg_values() {
        assert_eq!(ndcg_from_rank(1, 5), 1.0);
        assert!((ndcg_from_rank(3, 5) - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_from_rank(6, 5), 0.0);
        assert!(ndcg_at_k(&[1.0], 0, 0).is_err());
    }

    #[test]
    fn report_aggregates() {
        let r = MetricReport::from_ranks(
            Domain::X,
            vec![("a".into(), 1), ("b".into(), 3)],
            &[5, 10],
        )
        .unwrap();
        assert!((r.mrr - (1.0 + 1.0 / 3.0) / 2.0).abs() < 1e-15);
        assert!((r.ndcg[&5] - 0.75).abs() < 1e-15);
        assert_eq!(r.n_sequences, 2);
        assert!(r.to_tsv().starts_with("target\tn_sequences\tmrr\tndcg@5\tndcg@10\n"));
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
