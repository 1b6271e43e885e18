//! The engine checked against a direct re-implementation of the forward pass.

mod common;

use emfrec::corpus::{batchify, Domain, SeqItem, UserSequence};
use emfrec::embedstore::Modality;
use emfrec::model::{CandidateScope, Mode, Model, ModelConfig, StreamKind};

type Mat = Vec<Vec<f64>>;

fn param(model: &Model, name: &str) -> Mat {
    let p = model
        .params()
        .iter()
        .find(|p| p.name == name)
        .unwrap_or_else(|| panic!("no parameter {name}"));
    p.data.chunks(p.cols).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn table(model: &Model, m: Modality) -> Mat {
    let e = match m {
        Modality::Id => return param(model, "e_id"),
        Modality::Image => model.e_img(),
        Modality::Text => model.e_tex(),
    };
    (0..e.rows()).map(|r| e.row(r).iter().map(|&v| v as f64).collect()).collect()
}

fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn encode(model: &Model, stream: StreamKind, m: Modality, ids: &[usize]) -> Mat {
    let t = table(model, m);
    let mut f: Mat = ids.iter().map(|&i| t[i + 1].clone()).collect();
    let slot = format!("enc.{}.{}", stream.name(), m.name());
    for layer in 0..model.config().depth {
        let get = |n: &str| param(model, &format!("{slot}.{layer}.{n}"));
        let pos = get("pos");
        let fp: Mat = f
            .iter()
            .enumerate()
            .map(|(t, r)| r.iter().zip(&pos[t]).map(|(a, b)| a + b).collect())
            .collect();
        let (q, k, v) = (matmul(&fp, &get("w_q")), matmul(&fp, &get("w_k")), matmul(&fp, &get("w_v")));
        let d = fp[0].len() as f64;
        f = (0..fp.len())
            .map(|t| {
                let scores: Vec<f64> = (0..=t).map(|s| dot(&q[t], &k[s]) / d.sqrt()).collect();
                let a = softmax(&scores);
                (0..fp[0].len())
                    .map(|j| fp[t][j] + (0..=t).map(|s| a[s] * v[s][j]).sum::<f64>())
                    .collect()
            })
            .collect();
    }
    f
}

/// Fused distributions at every position, indexed by catalog item.
fn fused(model: &Model, stream: StreamKind, ids: &[usize]) -> Vec<Vec<(usize, f64)>> {
    let cfg = model.config();
    let weights = [cfg.alpha, cfg.beta, 1.0 - cfg.alpha - cfg.beta];
    let scope = model.scope(stream);
    let mut out = vec![vec![0.0; scope.len()]; ids.len()];
    for m in [Modality::Id, Modality::Image, Modality::Text] {
        let w = weights[m.index()];
        let t = table(model, m);
        let h = encode(model, stream, m, ids);
        for (pos, hrow) in h.iter().enumerate() {
            let logits: Vec<f64> = scope
                .clone()
                .map(|i| {
                    let e = &t[i + 1];
                    cfg.sim_scale * dot(hrow, e) / (dot(hrow, hrow).sqrt() * dot(e, e).sqrt())
                })
                .collect();
            for (o, p) in out[pos].iter_mut().zip(softmax(&logits)) {
                *o += w * p;
            }
        }
    }
    out.into_iter().map(|row| scope.clone().zip(row).collect()).collect()
}

fn stream_ids(seq: &UserSequence, kind: StreamKind) -> Vec<usize> {
    match kind {
        StreamKind::X => seq.sub_x.clone(),
        StreamKind::Y => seq.sub_y.clone(),
        StreamKind::Merged => seq.merged.iter().map(|s| s.item).collect(),
    }
}

/// `[L_X, L_Y, L_XY]`, each the mean negative log-likelihood over the
/// targets of that stream across all sequences.
fn reference_losses(model: &Model, seqs: &[UserSequence]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for kind in StreamKind::ALL {
        let (mut sum, mut n) = (0.0, 0usize);
        for seq in seqs {
            let ids = stream_ids(seq, kind);
            if ids.len() < 2 {
                continue;
            }
            let p = fused(model, kind, &ids);
            for t in 0..ids.len() - 1 {
                let (_, prob) = p[t].iter().find(|(i, _)| *i == ids[t + 1]).unwrap();
                sum -= prob.ln();
                n += 1;
            }
        }
        out[kind.index()] = if n == 0 { 0.0 } else { sum / n as f64 };
    }
    out
}

fn reference_scores(model: &Model, context: &[SeqItem], target: Domain) -> Vec<f64> {
    let cfg = model.config();
    let range = model.domain_range(target);
    let mut score = vec![0.0; range.len()];
    let of = |d: Domain| -> Vec<usize> { context.iter().filter(|s| s.domain == d).map(|s| s.item).collect() };
    let parts = [
        (StreamKind::of(target), of(target), 1.0),
        (StreamKind::of(target.other()), of(target.other()), cfg.lambda1),
        (StreamKind::Merged, context.iter().map(|s| s.item).collect(), cfg.lambda2),
    ];
    for (kind, ids, w) in parts {
        if ids.is_empty() {
            continue;
        }
        for (item, p) in fused(model, kind, &ids).pop().unwrap() {
            if range.contains(&item) {
                score[item - range.start] += w * p;
            }
        }
    }
    score
}

fn config(depth: usize) -> ModelConfig {
    ModelConfig {
        q: 4,
        e: 3,
        alpha: 0.5,
        beta: 0.2,
        lambda1: 0.3,
        lambda2: 0.15,
        depth,
        max_len: 8,
        sim_scale: 4.0,
        dropout: 0.0,
        ..Default::default()
    }
}

fn toy() -> (emfrec::corpus::ItemCatalog, Vec<UserSequence>) {
    let cat = common::catalog(4, 5);
    let (x, y) = (Domain::X, Domain::Y);
    let seqs = vec![
        common::sequence("a", &[(0, x), (5, y), (2, x), (3, x), (8, y), (1, x)]),
        common::sequence("b", &[(6, y), (3, x), (7, y), (4, y), (0, x)]),
    ];
    (cat, seqs)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-5 * (1.0 + b.abs())
}

#[test]
fn loss_matches_reference_for_one_and_two_layers() {
    let (cat, seqs) = toy();
    for depth in [1, 2] {
        let model = common::model(config(depth), &cat, 7);
        let want = reference_losses(&model, &seqs);
        let batch = batchify(&seqs, 8, 8, 0).unwrap().remove(0);
        let got = model.compute_loss(&batch, Mode::Eval).unwrap();
        let cfg = model.config();
        let total = want[0] + cfg.lambda1 * want[1] + cfg.lambda2 * want[2];
        assert!(close(got.l_x, want[0]), "L_X {} vs {}", got.l_x, want[0]);
        assert!(close(got.l_y, want[1]), "L_Y {} vs {}", got.l_y, want[1]);
        assert!(close(got.l_xy, want[2]), "L_XY {} vs {}", got.l_xy, want[2]);
        assert!(close(got.total, total), "total {} vs {total}", got.total);
    }
}

#[test]
fn loss_is_independent_of_batch_split_only_through_weighting() {
    let (cat, seqs) = toy();
    let model = common::model(config(1), &cat, 3);
    let whole = batchify(&seqs, 8, 8, 0).unwrap().remove(0);
    let a = model.compute_loss(&whole, Mode::Eval).unwrap();
    let b = model.compute_loss(&batchify(&seqs, 8, 8, 99).unwrap().remove(0), Mode::Eval).unwrap();
    assert!(close(a.total, b.total));
}

#[test]
fn fused_probabilities_match_reference() {
    let (cat, seqs) = toy();
    let mut model = common::model(config(2), &cat, 11);
    for scope in [CandidateScope::PerDomain, CandidateScope::All] {
        model.set_candidate_scope(scope);
        for seq in &seqs {
            for kind in StreamKind::ALL {
                let ids = stream_ids(seq, kind);
                let got = model.fused_probs(kind, &ids).unwrap();
                let want = fused(&model, kind, &ids);
                for (g, w) in got.iter().zip(&want) {
                    for &(item, p) in w {
                        assert!(close(g.get(item), p), "{kind:?} item {item}");
                    }
                }
            }
        }
    }
}

#[test]
fn scores_and_recommendations_match_reference() {
    let (cat, seqs) = toy();
    let model = common::model(config(1), &cat, 5);
    for seq in &seqs {
        for target in [Domain::X, Domain::Y] {
            let context = &seq.merged[..seq.merged.len() - 1];
            if !context.iter().any(|s| s.domain == target) {
                assert!(model.scorer().score(context, target).is_err());
                continue;
            }
            let got = model.scorer().score(context, target).unwrap();
            let want = reference_scores(&model, context, target);
            for (g, w) in got.iter().zip(&want) {
                assert!(close(*g, *w));
            }
            let mut order: Vec<usize> = (0..want.len()).collect();
            order.sort_by(|&a, &b| want[b].partial_cmp(&want[a]).unwrap().then(a.cmp(&b)));
            let start = model.domain_range(target).start;
            let rec: Vec<usize> = model.recommend(context, target, 3).unwrap().iter().map(|r| r.0).collect();
            let expect: Vec<usize> = order.iter().take(3).map(|i| start + i).collect();
            assert_eq!(rec, expect);
        }
    }
}

#[test]
fn zero_weight_modalities_drop_out_of_the_fusion() {
    let (cat, seqs) = toy();
    let mut model = common::model(config(1), &cat, 2);
    model.set_weights(0.0, 1.0, 0.3, 0.1).unwrap();
    let ids = stream_ids(&seqs[0], StreamKind::Merged);
    let fused = model.fused_probs(StreamKind::Merged, &ids).unwrap();
    let img = model.stream_probs(StreamKind::Merged, Modality::Image, &ids).unwrap();
    assert_eq!(fused, img);
}
