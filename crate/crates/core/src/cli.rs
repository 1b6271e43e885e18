//! The `emfrec` command line.

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    self, filter_corpus, group_sequences, load_interactions, load_metadata, split_temporal, write_interactions,
    write_manifest, write_metadata, CatalogItem, CorpusStats, DataSplit, Domain, ItemCatalog, ItemMeta, SeqItem,
    UserSequence,
};
use crate::embedstore::{
    gen_synthetic, index_path_for, load_matrix, write_matrix, EmbeddingMatrix, Modality, SyntheticWorldSpec,
};
use crate::evaluator::evaluate;
use crate::model::{CandidateScope, Model, ModelConfig};
use crate::promptkit::{build_prompt, compact, read_cache, write_cache, PromptRecord};
use crate::tensor::{grad_check, Tensor};
use crate::trainer::{train_with, StopMetric, TrainConfig, L2_GRID, LR_GRID};
use crate::{rng, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "emfrec", version, about = "Cross-domain sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic two-domain corpus with clustered embeddings.
    GenSynthetic(GenArgs),
    /// Filter interactions and split users into train/valid/test.
    Prepare(PrepareArgs),
    /// Write enrichment prompts for every item to a JSON-lines cache.
    Prompts(PromptArgs),
    /// Train a model on a prepared data directory.
    Train(Box<TrainArgs>),
    /// Evaluate a checkpoint on a prepared data directory.
    Eval(EvalArgs),
    /// Compare analytic and numeric gradients on a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    items_per_domain: usize,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image/text embedding dimension.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    min_len: usize,
    #[arg(long, default_value_t = 30)]
    max_len: usize,
    /// Probability of staying in the current cluster; 1 means identity transitions.
    #[arg(long, default_value_t = 1.0)]
    stay: f64,
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    interactions: PathBuf,
    #[arg(long)]
    metadata: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    min_interactions: usize,
    #[arg(long, default_value_t = 3)]
    min_per_domain: usize,
    #[arg(long, default_value_t = 0.1)]
    valid_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PromptArgs {
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "none")]
    provider: String,
    /// Unix seconds stamped on new records.
    #[arg(long, default_value_t = 0)]
    created_at: u64,
    #[arg(long, default_value = "X")]
    domain_label_x: String,
    #[arg(long, default_value = "Y")]
    domain_label_y: String,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    emb_img: Option<PathBuf>,
    #[arg(long)]
    emb_tex: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    target: Option<Domain>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    l2: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    stop_metric: Option<String>,
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    e: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    sim_scale: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    share_params: bool,
    /// `per_domain` or `all`.
    #[arg(long)]
    candidate_scope: Option<String>,
    /// Search the learning-rate × L2 grid and keep the best validation run.
    #[arg(long)]
    grid: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    target: Domain,
    #[arg(long, default_value = "mrr,ndcg@5,ndcg@10")]
    metrics: String,
    /// Defaults to the path recorded in the run.json next to the checkpoint.
    #[arg(long)]
    emb_img: Option<PathBuf>,
    #[arg(long)]
    emb_tex: Option<PathBuf>,
    /// `test`, `valid` or `train`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Writes the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Writes per-sequence ranks as TSV.
    #[arg(long)]
    ranks: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

/// Everything needed to reproduce a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub emb_img: Option<PathBuf>,
    pub emb_tex: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub target: Domain,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: None,
            emb_img: None,
            emb_tex: None,
            out: None,
            target: Domain::X,
            seed: 0,
        }
    }
}

/// Parses arguments (including the program name) and runs the command.
/// Returns the process exit code; failures print one `error:` line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenSynthetic(a) => cmd_gen(a),
        Command::Prepare(a) => cmd_prepare(a),
        Command::Prompts(a) => cmd_prompts(a),
        Command::Train(a) => cmd_train(*a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            1
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen(a: GenArgs) -> Result<i32> {
    let transitions = if a.stay >= 1.0 {
        SyntheticWorldSpec::identity_transitions(a.clusters)
    } else {
        SyntheticWorldSpec::sticky_transitions(a.clusters, a.stay)
    };
    let spec = SyntheticWorldSpec {
        n_clusters: a.clusters,
        items_per_domain: a.items_per_domain,
        cluster_transition: transitions,
        noise_sigma: a.noise,
        seed: a.seed,
        n_users: a.users,
        min_len: a.min_len,
        max_len: a.max_len,
        dim: a.dim,
    };
    let world = gen_synthetic(&spec)?;
    create_dir(&a.out)?;
    write_interactions(&a.out.join("interactions.tsv"), &world.interactions())?;
    let meta: Vec<ItemMeta> = world
        .catalog
        .items()
        .iter()
        .enumerate()
        .map(|(i, it)| ItemMeta {
            item_id: it.item_id.clone(),
            domain: it.domain,
            title: format!("{} item {} of theme {}", it.domain, it.item_id, world.cluster_of[i]),
        })
        .collect();
    write_metadata(&a.out.join("metadata.tsv"), &meta)?;
    for (m, name) in [(&world.e_img, "emb_img.bin"), (&world.e_tex, "emb_tex.bin")] {
        let p = a.out.join(name);
        write_matrix(m, &world.catalog, &p, &index_path_for(&p))?;
    }
    write_json(
        &a.out.join("run.json"),
        &serde_json::json!({ "command": "gen-synthetic", "spec": spec }),
    )?;
    println!(
        "wrote {} users, {} items to {}",
        world.sequences.len(),
        world.catalog.len(),
        a.out.display()
    );
    Ok(0)
}

fn cmd_prepare(a: PrepareArgs) -> Result<i32> {
    let log = load_interactions(&a.interactions)?;
    let (sequences, mut catalog) = filter_corpus(&log, a.min_interactions, a.min_per_domain);
    if sequences.is_empty() {
        return Err(Error::Invalid("no users survive filtering".into()));
    }
    if let Some(m) = &a.metadata {
        catalog.attach_titles(&load_metadata(m)?);
    }
    let split = split_temporal(&sequences, &catalog, a.valid_frac, a.test_frac)?;
    create_dir(&a.out)?;
    catalog.write_tsv(&a.out.join("catalog.tsv"))?;
    write_interactions(&a.out.join("interactions.tsv"), &corpus::to_interactions(&sequences, &catalog))?;
    write_manifest(&a.out.join("train.txt"), &split.train)?;
    write_manifest(&a.out.join("valid.txt"), &split.valid)?;
    write_manifest(&a.out.join("test.txt"), &split.test)?;
    let stats = CorpusStats::compute(&sequences, &catalog);
    write_json(&a.out.join("stats.json"), &stats)?;
    write_json(
        &a.out.join("run.json"),
        &serde_json::json!({
            "command": "prepare",
            "interactions": a.interactions,
            "metadata": a.metadata,
            "min_interactions": a.min_interactions,
            "min_per_domain": a.min_per_domain,
            "valid_frac": a.valid_frac,
            "test_frac": a.test_frac,
        }),
    )?;
    println!(
        "{} users ({} train, {} valid, {} test), {} X items, {} Y items",
        sequences.len(),
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        catalog.n_x(),
        catalog.n_y()
    );
    Ok(0)
}

fn cmd_prompts(a: PromptArgs) -> Result<i32> {
    let meta = load_metadata(&a.metadata)?;
    let mut records = read_cache(&a.out)?;
    let have: std::collections::HashSet<(String, String, String)> = records
        .iter()
        .map(|r| (r.item_id.clone(), r.template_hash.clone(), r.provider.clone()))
        .collect();
    let hash = crate::promptkit::template_hash();
    let mut added = 0;
    for m in &meta {
        if have.contains(&(m.item_id.clone(), hash.clone(), a.provider.clone())) {
            continue;
        }
        let label = match m.domain {
            Domain::X => &a.domain_label_x,
            Domain::Y => &a.domain_label_y,
        };
        let command = build_prompt(&m.item_id, label, &m.title)?;
        records.push(PromptRecord::pending(&m.item_id, command, &a.provider, a.created_at));
        added += 1;
    }
    write_cache(&a.out, &compact(&records))?;
    println!("{added} new prompts, {} total", compact(&records).len());
    Ok(0)
}

/// Reads a directory written by `prepare`.
pub fn load_prepared(dir: &Path) -> Result<DataSplit> {
    let catalog = ItemCatalog::read_tsv(&dir.join("catalog.tsv"))?;
    let log = load_interactions(&dir.join("interactions.tsv"))?;
    let refs: Vec<_> = log.iter().collect();
    let sequences = group_sequences(&refs, &catalog);
    let mut by_user: HashMap<String, UserSequence> =
        sequences.into_iter().map(|s| (s.user_id.clone(), s)).collect();
    let mut pick = |name: &str| -> Result<Vec<UserSequence>> {
        let path = dir.join(name);
        corpus::read_manifest(&path)?
            .into_iter()
            .map(|u| {
                by_user
                    .remove(&u)
                    .ok_or_else(|| Error::Split(format!("{}: user {u} missing or repeated", path.display())))
            })
            .collect()
    };
    Ok(DataSplit {
        train: pick("train.txt")?,
        valid: pick("valid.txt")?,
        test: pick("test.txt")?,
        catalog,
    })
}

/// Merges the config file (if any) and flags over the defaults. Returns the
/// config and whether `model.e` was set explicitly.
fn resolve_run_config(a: &TrainArgs) -> Result<(RunConfig, bool)> {
    let (mut rc, mut e_set) = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let e_set = value.pointer("/model/e").is_some();
            let rc: RunConfig =
                serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            (rc, e_set)
        }
        None => (RunConfig::default(), false),
    };
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(a.data.clone().map(Some), rc.data);
    set!(a.emb_img.clone().map(Some), rc.emb_img);
    set!(a.emb_tex.clone().map(Some), rc.emb_tex);
    set!(a.out.clone().map(Some), rc.out);
    set!(a.seed, rc.seed);
    set!(a.target, rc.target);
    set!(a.lr, rc.train.learning_rate);
    set!(a.l2, rc.train.l2);
    set!(a.batch_size, rc.train.batch_size);
    set!(a.epochs, rc.train.epochs);
    set!(a.patience, rc.train.patience);
    set!(a.q, rc.model.q);
    set!(a.alpha, rc.model.alpha);
    set!(a.beta, rc.model.beta);
    set!(a.lambda1, rc.model.lambda1);
    set!(a.lambda2, rc.model.lambda2);
    set!(a.depth, rc.model.depth);
    set!(a.max_len, rc.model.max_len);
    set!(a.sim_scale, rc.model.sim_scale);
    set!(a.dropout, rc.model.dropout);
    if let Some(e) = a.e {
        rc.model.e = e;
        e_set = true;
    }
    if a.share_params {
        rc.model.share_params_per_modality = true;
    }
    if let Some(s) = &a.candidate_scope {
        rc.model.candidate_scope = match s.as_str() {
            "per_domain" => CandidateScope::PerDomain,
            "all" => CandidateScope::All,
            other => return Err(Error::Config(format!("unknown candidate scope {other:?}"))),
        };
    }
    if let Some(s) = &a.stop_metric {
        rc.train.stop_metric = match s.as_str() {
            "mrr" => StopMetric::Mrr,
            "loss" => StopMetric::Loss,
            other => return Err(Error::Config(format!("unknown stop metric {other:?}"))),
        };
    }
    rc.train.seed = rc.seed;
    rc.train.target = rc.target;
    Ok((rc, e_set))
}

fn required<'p>(p: &'p Option<PathBuf>, name: &str) -> Result<&'p PathBuf> {
    p.as_ref()
        .ok_or_else(|| Error::Config(format!("{name} must be given by flag or config file")))
}

fn load_frozen(path: &Path, catalog: &ItemCatalog, modality: Modality) -> Result<EmbeddingMatrix> {
    let m = load_matrix(path, &index_path_for(path), catalog, None)?;
    if m.modality() != modality {
        return Err(Error::Format(format!(
            "{} holds {} embeddings, expected {}",
            path.display(),
            m.modality().name(),
            modality.name()
        )));
    }
    Ok(m)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let (mut rc, e_set) = resolve_run_config(&a)?;
    let data = required(&rc.data, "data")?.clone();
    let out = required(&rc.out, "out")?.clone();
    let split = load_prepared(&data)?;
    let e_img = load_frozen(required(&rc.emb_img, "emb_img")?, &split.catalog, Modality::Image)?;
    let e_tex = load_frozen(required(&rc.emb_tex, "emb_tex")?, &split.catalog, Modality::Text)?;
    if !e_set {
        rc.model.e = e_img.dim();
    }
    let (e_img, e_tex) = (Arc::new(e_img), Arc::new(e_tex));
    create_dir(&out)?;

    let quiet = a.quiet;
    let run_one = |rc: &RunConfig| -> Result<crate::trainer::TrainOutcome> {
        let model = Model::init(rc.model.clone(), &split.catalog, e_img.clone(), e_tex.clone(), rc.seed)?;
        train_with(model, &split, &rc.train, |r| {
            if !quiet {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  (x {:.5} y {:.5} xy {:.5})  valid_mrr {:.5}  {:.1}s",
                    r.epoch, r.loss_total, r.loss_x, r.loss_y, r.loss_xy, r.valid_mrr, r.wall_seconds
                );
            }
        })
    };

    let outcome = if a.grid {
        let mut table = String::from("learning_rate\tl2\tbest_epoch\tbest_valid_mrr\n");
        let mut best: Option<(f64, RunConfig, crate::trainer::TrainOutcome)> = None;
        for lr in LR_GRID {
            for l2 in L2_GRID {
                let mut trial = rc.clone();
                trial.train.learning_rate = lr;
                trial.train.l2 = l2;
                let o = run_one(&trial)?;
                let score = o
                    .history
                    .best_epoch
                    .map_or(f64::NEG_INFINITY, |e| o.history.records[e].valid_mrr);
                let _ = writeln!(table, "{lr}\t{l2}\t{:?}\t{score}", o.history.best_epoch);
                if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                    best = Some((score, trial, o));
                }
            }
        }
        write_text(&out.join("grid.tsv"), &table)?;
        let (_, trial, o) = best.expect("grid is nonempty");
        rc = trial;
        o
    } else {
        run_one(&rc)?
    };

    outcome.model.save(&out.join("model.emfc"))?;
    write_text(&out.join("history.tsv"), &outcome.history.to_tsv())?;
    write_json(&out.join("run.json"), &rc)?;
    println!(
        "best epoch {:?} of {}; checkpoint {}",
        outcome.history.best_epoch,
        outcome.history.records.len(),
        out.join("model.emfc").display()
    );
    Ok(0)
}

fn parse_metrics(spec: &str) -> Result<Vec<usize>> {
    let mut cutoffs = Vec::new();
    for m in spec.split(',').map(str::trim).filter(|m| !m.is_empty()) {
        if m == "mrr" {
            continue;
        }
        let k = m
            .strip_prefix("ndcg@")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k > 0)
            .ok_or_else(|| Error::Config(format!("unknown metric {m:?}")))?;
        cutoffs.push(k);
    }
    Ok(cutoffs)
}

fn cmd_eval(a: EvalArgs) -> Result<i32> {
    let cutoffs = parse_metrics(&a.metrics)?;
    let split = load_prepared(&a.data)?;
    let sibling = a.ckpt.parent().unwrap_or(Path::new(".")).join("run.json");
    let recorded: Option<RunConfig> = match fs::read_to_string(&sibling) {
        Ok(text) => Some(serde_json::from_str(&text)?),
        Err(_) => None,
    };
    let pick = |flag: &Option<PathBuf>, from_run: fn(&RunConfig) -> &Option<PathBuf>, name: &str| -> Result<PathBuf> {
        flag.clone()
            .or_else(|| recorded.as_ref().and_then(|r| from_run(r).clone()))
            .ok_or_else(|| Error::Config(format!("--{name} not given and no run.json next to the checkpoint")))
    };
    let img_path = pick(&a.emb_img, |r| &r.emb_img, "emb-img")?;
    let tex_path = pick(&a.emb_tex, |r| &r.emb_tex, "emb-tex")?;
    let e_img = Arc::new(load_frozen(&img_path, &split.catalog, Modality::Image)?);
    let e_tex = Arc::new(load_frozen(&tex_path, &split.catalog, Modality::Text)?);
    let model = Model::load(&a.ckpt, &split.catalog, e_img, e_tex)?;
    let sequences = match a.split.as_str() {
        "test" => &split.test,
        "valid" => &split.valid,
        "train" => &split.train,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let report = evaluate(&model, sequences, a.target, &cutoffs)?;
    print!("{}", report.to_tsv());
    if let Some(p) = &a.report {
        write_text(p, &report.to_json())?;
    }
    if let Some(p) = &a.ranks {
        write_text(p, &report.ranks_tsv())?;
    }
    Ok(0)
}

/// Finite-difference step used by `gradcheck`.
pub const GRADCHECK_STEP: f64 = 3e-3;

/// Small model, corpus and batch used by `gradcheck`.
pub fn gradcheck_fixture(seed: u64) -> Result<(Model, corpus::Batch)> {
    let (n_per_domain, dim) = (20, 8);
    let mut items = Vec::new();
    for d in [Domain::X, Domain::Y] {
        for i in 0..n_per_domain {
            items.push(CatalogItem {
                item_id: format!("{}{i:02}", d.as_str().to_lowercase()),
                domain: d,
                title: String::new(),
            });
        }
    }
    let catalog = ItemCatalog::new(items)?;
    let mut r = rng::seeded(seed);
    let mut frozen = |m: Modality| -> Result<EmbeddingMatrix> {
        let rows = catalog.len() + 1;
        let mut data = vec![0.0f32; rows * dim];
        for v in &mut data[dim..] {
            *v = r.random_range(-1.0f32..1.0);
        }
        let mut e = EmbeddingMatrix::from_data(m, rows, dim, data)?;
        e.normalize_rows();
        Ok(e)
    };
    let e_img = Arc::new(frozen(Modality::Image)?);
    let e_tex = Arc::new(frozen(Modality::Text)?);
    let config = ModelConfig {
        q: dim,
        e: dim,
        depth: 1,
        max_len: 6,
        dropout: 0.0,
        sim_scale: 5.0,
        ..ModelConfig::default()
    };
    let model = Model::init(config, &catalog, e_img, e_tex, rng::mix(seed, 1))?;
    let mut sequences = Vec::new();
    for u in 0..3 {
        let len = 6;
        let merged: Vec<SeqItem> = (0..len)
            .map(|t| {
                let domain = if (t + u) % 2 == 0 { Domain::X } else { Domain::Y };
                let item = catalog.domain_range(domain).start + r.random_range(0..n_per_domain);
                SeqItem { item, domain, timestamp: t as u64 }
            })
            .collect();
        sequences.push(UserSequence::from_merged(format!("u{u}"), merged));
    }
    let batch = corpus::batchify(&sequences, sequences.len(), 6, seed)?.remove(0);
    Ok((model, batch))
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<i32> {
    let (model, batch) = gradcheck_fixture(a.seed)?;
    let snapshot: Vec<Tensor> = model.snapshot();
    let report = grad_check(|g, ids| model.loss_graph(g, ids, &batch), &snapshot, GRADCHECK_STEP)?;
    let worst = report
        .worst
        .map(|(t, c)| format!("{}[{c}]", model.params()[t].name))
        .unwrap_or_default();
    println!(
        "max_rel_error={:.3e} coords={} worst={worst}",
        report.max_rel_error, report.coords_checked
    );
    Ok(if report.max_rel_error < a.tolerance { 0 } else { 1 })
}
