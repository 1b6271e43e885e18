//! Adam training with early stopping.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::corpus::{batchify, DataSplit, Domain, UserSequence};
use crate::evaluator::evaluate;
use crate::model::{Mode, Model, Param, ProbAudit, StepKey};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    /// Validation MRR on the target domain, higher is better.
    #[default]
    Mrr,
    /// Validation loss, lower is better.
    Loss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub stop_metric: StopMetric,
    pub target: Domain,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            l2: 1e-4,
            batch_size: 256,
            epochs: 100,
            patience: 10,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 5.0,
            stop_metric: StopMetric::Mrr,
            target: Domain::X,
        }
    }
}

/// Learning rates searched by the CLI grid.
pub const LR_GRID: [f64; 5] = [0.0001, 0.0005, 0.001, 0.005, 0.01];
/// L2 strengths searched by the CLI grid.
pub const L2_GRID: [f64; 5] = [0.00001, 0.00005, 0.0001, 0.0005, 0.001];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return bad("l2 must be nonnegative");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !((0.0..1.0).contains(&self.adam_beta1) && (0.0..1.0).contains(&self.adam_beta2)) {
            return bad("adam betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be positive");
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return bad("grad_clip must be nonnegative");
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with `l2 · w` added to each gradient.
pub fn adam_step(params: &mut [Param], grads: &[Vec<f64>], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} gradients and {} moment sets for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if g.len() != p.data.len() || state.m[i].len() != p.data.len() {
            return Err(Error::Shape(format!("gradient for {} has {} entries", p.name, g.len())));
        }
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let w = p.data[j] as f64;
            let gj = g[j] + cfg.l2 * w;
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let step = cfg.learning_rate * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.adam_eps);
            p.data[j] = (w - step) as f32;
        }
    }
    Ok(())
}

/// Scales gradients so their global norm is at most `max_norm`. Returns the
/// norm before scaling.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_x: f64,
    pub loss_y: f64,
    pub loss_xy: f64,
    /// NaN when there is no validation split.
    pub valid_mrr: f64,
    pub valid_loss: Option<f64>,
    pub wall_seconds: f64,
    /// Row sums of every distribution computed during the epoch's training steps.
    #[serde(skip)]
    pub audit: ProbAudit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    /// `epoch loss_total loss_x loss_y loss_xy valid_mrr`, tab-separated.
    /// Wall time is left out so identical runs give identical files.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss_total\tloss_x\tloss_y\tloss_xy\tvalid_mrr\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch, r.loss_total, r.loss_x, r.loss_y, r.loss_xy, r.valid_mrr
            );
        }
        s
    }
}

/// Mean loss over sequences, batched in a fixed order.
pub fn mean_loss(model: &Model, sequences: &[UserSequence], batch_size: usize) -> Result<f64> {
    let batches = batchify(sequences, batch_size, model.config().max_len, 0)?;
    let mut total = 0.0;
    for b in &batches {
        total += model.compute_loss(b, Mode::Eval)?.total * b.size() as f64;
    }
    Ok(total / sequences.len().max(1) as f64)
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: TrainHistory,
}

pub fn train(model: Model, split: &DataSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, split, cfg, |_| {})
}

/// Trains on `split.train`, scoring each epoch on `split.valid`, and returns
/// the parameters of the best-scoring epoch. Without a validation split the
/// epoch's training loss is the stopping signal.
pub fn train_with(
    mut model: Model,
    split: &DataSplit,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::Split("training split is empty".into()));
    }
    let mut history = TrainHistory::default();
    let mut state = AdamState::new(model.params());
    let mut best: Option<(f64, Vec<Param>)> = None;
    let mut since_best = 0;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let batches = batchify(
            &split.train,
            cfg.batch_size,
            model.config().max_len,
            rng::mix(cfg.seed, epoch as u64),
        )?;
        let mut sums = [0.0f64; 4];
        let mut audit = ProbAudit::default();
        for (b, batch) in batches.iter().enumerate() {
            let key = StepKey {
                seed: cfg.seed,
                epoch: epoch as u64,
                batch: b as u64,
            };
            let (report, mut grads) = model.loss_and_grads(batch, Mode::Train(key)).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch} batch {b}: {m}")),
                other => other,
            })?;
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("epoch {epoch} batch {b}: non-finite gradient")));
            }
            clip_global_norm(&mut grads, cfg.grad_clip);
            adam_step(model.params_mut(), &grads, &mut state, cfg)?;
            audit.merge(&report.audit);
            let w = batch.size() as f64;
            sums[0] += report.total * w;
            sums[1] += report.l_x * w;
            sums[2] += report.l_y * w;
            sums[3] += report.l_xy * w;
        }
        let n = split.train.len() as f64;
        let mut record = EpochRecord {
            epoch,
            loss_total: sums[0] / n,
            loss_x: sums[1] / n,
            loss_y: sums[2] / n,
            loss_xy: sums[3] / n,
            valid_mrr: f64::NAN,
            valid_loss: None,
            wall_seconds: 0.0,
            audit,
        };
        let score = if split.valid.is_empty() {
            -record.loss_total
        } else {
            record.valid_mrr = evaluate(&model, &split.valid, cfg.target, &[])?.mrr;
            match cfg.stop_metric {
                StopMetric::Mrr => record.valid_mrr,
                StopMetric::Loss => {
                    let l = mean_loss(&model, &split.valid, cfg.batch_size)?;
                    record.valid_loss = Some(l);
                    -l
                }
            }
        };
        record.wall_seconds = started.elapsed().as_secs_f64();
        on_epoch(&record);
        history.records.push(record);

        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((score, model.params().to_vec()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        model.params_mut().clone_from_slice(&params);
    }
    Ok(TrainOutcome { model, history })
}
