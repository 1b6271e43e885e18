use std::path::Path;
use std::process::{Command, Output};

fn emfrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emfrec")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = emfrec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path) {
    ok(&[
        "gen-synthetic", "--out", p(dir), "--users", "60", "--items-per-domain", "20", "--clusters", "4",
        "--dim", "8", "--min-len", "8", "--max-len", "12", "--seed", "5",
    ]);
}

fn prepare(raw: &Path, data: &Path) {
    ok(&[
        "prepare",
        "--interactions", p(&raw.join("interactions.tsv")),
        "--metadata", p(&raw.join("metadata.tsv")),
        "--min-interactions", "5",
        "--valid-frac", "0.2",
        "--test-frac", "0.2",
        "--out", p(data),
    ]);
}

fn train(raw: &Path, data: &Path, out: &Path) {
    ok(&[
        "train", "--data", p(data),
        "--emb-img", p(&raw.join("emb_img.bin")),
        "--emb-tex", p(&raw.join("emb_tex.bin")),
        "--out", p(out), "--seed", "3", "--epochs", "2", "--batch-size", "16", "--q", "8",
        "--max-len", "12", "--lr", "0.01", "--quiet",
    ]);
}

#[test]
fn synthetic_generation_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a);
    gen(&b);
    for f in ["interactions.tsv", "metadata.tsv", "emb_img.bin", "emb_img.bin.idx", "emb_tex.bin", "emb_tex.bin.idx"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn full_pipeline_and_repeatable_training() {
    let t = tempfile::tempdir().unwrap();
    let (raw, data) = (t.path().join("raw"), t.path().join("data"));
    gen(&raw);
    prepare(&raw, &data);
    for f in ["catalog.tsv", "interactions.tsv", "train.txt", "valid.txt", "test.txt", "stats.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let cache = t.path().join("prompts.jsonl");
    ok(&["prompts", "--metadata", p(&raw.join("metadata.tsv")), "--out", p(&cache)]);
    let first = std::fs::read(&cache).unwrap();
    ok(&["prompts", "--metadata", p(&raw.join("metadata.tsv")), "--out", p(&cache)]);
    assert_eq!(std::fs::read(&cache).unwrap(), first);
    assert_eq!(String::from_utf8(first).unwrap().lines().count(), 40);

    let (r1, r2) = (t.path().join("run1"), t.path().join("run2"));
    train(&raw, &data, &r1);
    train(&raw, &data, &r2);
    for f in ["model.emfc", "history.tsv"] {
        assert_eq!(std::fs::read(r1.join(f)).unwrap(), std::fs::read(r2.join(f)).unwrap(), "{f}");
    }
    let history = std::fs::read_to_string(r1.join("history.tsv")).unwrap();
    assert!(history.starts_with("epoch\tloss_total\tloss_x\tloss_y\tloss_xy\tvalid_mrr\n"));
    assert_eq!(history.lines().count(), 3);

    let report = t.path().join("report.json");
    let ranks = t.path().join("ranks.tsv");
    let stdout = ok(&[
        "eval", "--ckpt", p(&r1.join("model.emfc")), "--data", p(&data), "--target", "X",
        "--report", p(&report), "--ranks", p(&ranks),
    ]);
    assert!(stdout.starts_with("target\tn_sequences\tmrr\tndcg@5\tndcg@10\n"), "{stdout}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let mrr = json["mrr"].as_f64().unwrap();
    assert!(mrr > 0.0 && mrr <= 1.0);
    assert!(std::fs::read_to_string(&ranks).unwrap().starts_with("user_id\trank\n"));
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let out = emfrec(&["eval", "--data", "nowhere", "--target", "X"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_one_with_a_kind() {
    let out = emfrec(&["eval", "--ckpt", "/nonexistent/model.emfc", "--data", "/nonexistent", "--target", "X"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error: kind="), "{err}");
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--seed", "1"]);
    assert!(stdout.starts_with("max_rel_error="), "{stdout}");
}
