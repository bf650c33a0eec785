//! Training orchestration: the alternating two-step optimization.
//!
//! Each batch runs two phases. Phase A computes the loss and score
//! gradients for every example against the thresholds as they were at the
//! start of the batch, backpropagates through the cosine scoring into the
//! touched embedding rows, and applies one Adam step. Phase B then walks the
//! same examples in order and updates each user's threshold against the
//! post-update scores, reusing the negatives sampled in phase A.
//!
//! Determinism: example RNG streams derive from (seed, epoch, example
//! index), gradient accumulation runs in example order, and per-user
//! evaluation reduces in user order, so thread count never changes results.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{InteractionDataset, SplitMode};
use crate::losses::{self, LossError, LossExample, LossSpec};
use crate::metrics::{self, CutoffMetrics, MetricReport, RankedEval, RunMeta};
use crate::model::{self, AdamState, FactorModel, ModelError, SparseGrads};
use crate::quantile::{NegativeSample, PinballWeights, QuantileError, ThresholdTable};
use crate::rng;

/// Examples evaluated in parallel between serial accumulation points.
/// Affects memory and parallel grouping only, never results.
const PARALLEL_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("requested {requested} negatives but only {available} items are non-positive for user {user}")]
    SampleCount {
        user: u32,
        requested: usize,
        available: usize,
    },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quantile(#[from] QuantileError),
}

/// Which split to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub threshold_learning_rate: f64,
    pub eval_cutoffs: Vec<u32>,
    pub patience: usize,
    pub seed: u64,
    pub llpauc_alpha: f64,
    pub llpauc_beta: f64,
    /// Per-epoch progress lines on standard error.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossSpec::default(),
            epochs: 1000,
            batch_size: 1024,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            threshold_learning_rate: crate::quantile::DEFAULT_THRESHOLD_LR,
            eval_cutoffs: vec![20],
            patience: 25,
            seed: 0,
            llpauc_alpha: 0.3,
            llpauc_beta: 0.1,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.loss.validate().map_err(TrainError::Loss)?;
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(TrainError::Config("patience must be >= 1".into()));
        }
        if self.eval_cutoffs.is_empty() {
            return Err(TrainError::Config("eval_cutoffs must be nonempty".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-epoch training record. Gradient norms are in score space, matching
/// the quantity the convergence guarantee bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_grad_norm: f64,
    pub mean_sq_grad_norm: f64,
    pub mean_positive_score: f64,
    pub beta_mean: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub tracked_metric: f64,
    pub validation: MetricReport,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Thresholds update once per batch, after the model step.
    pub threshold_update_granularity: String,
    pub tracked_metric_name: String,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn write_jsonl<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut *w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn summary_json(&self) -> String {
        let summary = serde_json::json!({
            "epochs_run": self.epochs.len(),
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "threshold_update_granularity": self.threshold_update_granularity,
            "tracked_metric": self.tracked_metric_name,
            "best_tracked_value": self.best_epoch
                .and_then(|b| self.epochs.iter().find(|e| e.epoch == b))
                .map(|e| e.tracked_metric),
        });
        summary.to_string()
    }

    /// (mean squared score-gradient norm over the first 10% of epochs,
    /// over the last 10%). The convergence monitor compares the two.
    pub fn grad_norm_decay(&self) -> Option<(f64, f64)> {
        let n = self.epochs.len();
        if n < 2 {
            return None;
        }
        let window = (n / 10).max(1);
        let head: f64 = self.epochs[..window]
            .iter()
            .map(|e| e.mean_sq_grad_norm)
            .sum::<f64>()
            / window as f64;
        let tail: f64 = self.epochs[n - window..]
            .iter()
            .map(|e| e.mean_sq_grad_norm)
            .sum::<f64>()
            / window as f64;
        Some((head, tail))
    }

    /// True if any epoch had both the mean positive score and the mean
    /// threshold above the given level at once (score inflation).
    pub fn joint_inflation_above(&self, level: f64) -> bool {
        self.epochs
            .iter()
            .any(|e| e.mean_positive_score > level && e.beta_mean > level)
    }

    pub fn mean_epoch_seconds(&self) -> Option<f64> {
        if self.epochs.is_empty() {
            return None;
        }
        Some(self.epochs.iter().map(|e| e.wall_time_s).sum::<f64>() / self.epochs.len() as f64)
    }
}

/// Final state of a training run: best-metric checkpoint plus the log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FactorModel,
    pub adam: AdamState,
    pub thresholds: ThresholdTable,
    pub log: TrainLog,
}

/// Uniform negatives without replacement from the user's non-train-positive
/// items, with the importance weight `(|I| - |P_u|) / |G_u|`.
pub fn sample_negatives(
    dataset: &InteractionDataset,
    user: u32,
    count: usize,
    r: &mut impl rand::Rng,
) -> Result<NegativeSample, TrainError> {
    let num_items = dataset.num_items() as u32;
    let positives = dataset.train_positives(user);
    let available = num_items as usize - positives.len();
    if count == 0 || count > available {
        return Err(TrainError::SampleCount {
            user,
            requested: count,
            available,
        });
    }

    // Complement of the sorted positive list.
    let mut pool = Vec::with_capacity(available);
    let mut pos_iter = positives.iter().peekable();
    for item in 0..num_items {
        if pos_iter.peek() == Some(&&item) {
            pos_iter.next();
        } else {
            pool.push(item);
        }
    }
    // Partial Fisher-Yates: the first `count` entries are a uniform draw.
    for j in 0..count {
        let swap = r.random_range(j..pool.len());
        pool.swap(j, swap);
    }
    pool.truncate(count);

    Ok(NegativeSample {
        user,
        items: pool,
        weight: available as f64 / count as f64,
    })
}

struct ExampleOutput {
    user: u32,
    positive_item: u32,
    negative_items: Vec<u32>,
    weight: f64,
    loss: f64,
    sq_grad_norm: f64,
    positive_score: f64,
    user_grad: Vec<f64>,
    item_grads: Vec<(u32, Vec<f64>)>,
}

pub(crate) struct BatchStats {
    pub sum_loss: f64,
    pub sum_sq_grad_norm: f64,
    pub sum_positive_score: f64,
    pub examples: usize,
}

/// One batch of the alternating optimization. Phase A reads the thresholds
/// as constants; phase B updates them against post-step scores, serialized
/// in example order so duplicate users within a batch stay well-defined.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_batch(
    model: &mut FactorModel,
    adam: &mut AdamState,
    thresholds: &mut ThresholdTable,
    dataset: &InteractionDataset,
    config: &TrainConfig,
    pinball: Option<&PinballWeights>,
    epoch: usize,
    batch_index: usize,
    batch: &[(u32, u32)],
    base_example_index: u64,
) -> Result<BatchStats, TrainError> {
    let uses_threshold = config.loss.family.uses_threshold();
    let mut stats = BatchStats {
        sum_loss: 0.0,
        sum_sq_grad_norm: 0.0,
        sum_positive_score: 0.0,
        examples: 0,
    };

    let mut grads = SparseGrads::default();
    let mut outputs: Vec<ExampleOutput> = Vec::with_capacity(batch.len());

    for (chunk_idx, chunk) in batch.chunks(PARALLEL_CHUNK).enumerate() {
        let base = base_example_index + (chunk_idx * PARALLEL_CHUNK) as u64;
        let chunk_out: Result<Vec<ExampleOutput>, TrainError> = chunk
            .par_iter()
            .enumerate()
            .map(|(local, &(user, item))| {
                compute_example(
                    model,
                    thresholds,
                    dataset,
                    config,
                    epoch,
                    batch_index,
                    base + local as u64,
                    user,
                    item,
                )
            })
            .collect();
        // Accumulate in example order; the parallel map preserves it.
        for mut out in chunk_out? {
            stats.sum_loss += out.loss;
            stats.sum_sq_grad_norm += out.sq_grad_norm;
            stats.sum_positive_score += out.positive_score;
            stats.examples += 1;
            grads.add_user(out.user, &out.user_grad);
            for (row, g) in &out.item_grads {
                grads.add_item(*row, g);
            }
            out.user_grad = Vec::new();
            out.item_grads = Vec::new();
            outputs.push(out);
        }
    }

    model::apply_gradients(model, adam, &grads)?;

    if uses_threshold {
        let pinball = pinball.expect("pinball weights prepared for threshold losses");
        for out in &outputs {
            let positive_count = dataset.train_positives(out.user).len();
            let pos_score = model.score(out.user, out.positive_item);
            let neg_scores = model.score_block(out.user, &out.negative_items);
            thresholds.update_threshold(
                out.user,
                pos_score,
                positive_count,
                &neg_scores,
                out.weight,
                pinball,
            );
        }
    }

    Ok(stats)
}

#[allow(clippy::too_many_arguments)]
fn compute_example(
    model: &FactorModel,
    thresholds: &ThresholdTable,
    dataset: &InteractionDataset,
    config: &TrainConfig,
    epoch: usize,
    batch_index: usize,
    example_index: u64,
    user: u32,
    item: u32,
) -> Result<ExampleOutput, TrainError> {
    let spec = &config.loss;
    let mut r = rng::stream(
        config.seed,
        &[rng::label::EXAMPLE, epoch as u64, example_index],
    );
    let positives = dataset.train_positives(user);
    let available = dataset.num_items() - positives.len();
    let requested = if spec.family == losses::LossFamily::Bpr {
        1
    } else {
        spec.num_negatives.min(available)
    };
    let negative = sample_negatives(dataset, user, requested, &mut r)?;

    let positive_score = model.score(user, item);
    let negative_scores = model.score_block(user, &negative.items);
    let example = LossExample {
        user,
        positive_item: item,
        positive_score,
        negative_scores: &negative_scores,
        beta: thresholds.get(user),
        positive_count: positives.len(),
    };
    let grad = losses::evaluate(spec, &example).map_err(|e| match e {
        LossError::NonFinite { .. } => TrainError::NanLoss {
            epoch,
            batch: batch_index,
        },
        other => TrainError::Loss(other),
    })?;

    // Chain rule through the cosine into the touched rows.
    let user_row = model.user_row(user);
    let mut user_grad = vec![0.0; model.dim()];
    let mut item_grads = Vec::with_capacity(1 + negative.items.len());
    let (du, di) = model::cosine_grad(user_row, model.item_row(item), grad.d_positive);
    add_assign(&mut user_grad, &du);
    item_grads.push((item, di));
    for (j, &neg_item) in negative.items.iter().enumerate() {
        let upstream = grad.d_negatives[j];
        let (du, di) = model::cosine_grad(user_row, model.item_row(neg_item), upstream);
        add_assign(&mut user_grad, &du);
        item_grads.push((neg_item, di));
    }

    let sq_grad_norm =
        grad.d_positive * grad.d_positive + grad.d_negatives.iter().map(|g| g * g).sum::<f64>();

    Ok(ExampleOutput {
        user,
        positive_item: item,
        negative_items: negative.items,
        weight: negative.weight,
        loss: grad.loss,
        sq_grad_norm,
        positive_score,
        user_grad,
        item_grads,
    })
}

fn add_assign(acc: &mut [f64], g: &[f64]) {
    for (a, x) in acc.iter_mut().zip(g) {
        *a += x;
    }
}

/// Run the full training loop and return the best-validation checkpoint.
pub fn train(
    dataset: &InteractionDataset,
    model: FactorModel,
    thresholds: ThresholdTable,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut model = model;
    let mut thresholds = thresholds.with_learning_rate(config.threshold_learning_rate);
    let mut adam = AdamState::new(&model, config.learning_rate, config.weight_decay);

    let pinball = if config.loss.family.uses_threshold() {
        Some(PinballWeights::new(
            config.loss.k,
            dataset.num_items() as u32,
        )?)
    } else {
        None
    };

    let mut pairs: Vec<(u32, u32)> = Vec::new();
    for user in 0..dataset.num_users() as u32 {
        for &item in dataset.train_positives(user) {
            pairs.push((user, item));
        }
    }
    if pairs.is_empty() {
        return Err(TrainError::Config("no training interactions".into()));
    }

    let tracked_k = config.eval_cutoffs[0];
    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: None,
        stopped_early: false,
        threshold_update_granularity: "per_batch".to_string(),
        tracked_metric_name: format!("precision@{tracked_k}/validation"),
    };
    let mut best: Option<(f64, FactorModel, AdamState, ThresholdTable)> = None;
    let mut epochs_since_best = 0usize;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        use rand::seq::SliceRandom;
        let mut order = pairs.clone();
        let mut shuffle_rng = rng::stream(config.seed, &[rng::label::EPOCH_SHUFFLE, epoch as u64]);
        order.shuffle(&mut shuffle_rng);

        let mut sum_loss = 0.0;
        let mut sum_sq_grad = 0.0;
        let mut sum_pos_score = 0.0;
        let mut examples = 0usize;
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let stats = run_batch(
                &mut model,
                &mut adam,
                &mut thresholds,
                dataset,
                config,
                pinball.as_ref(),
                epoch,
                batch_index,
                batch,
                (batch_index * config.batch_size) as u64,
            )?;
            sum_loss += stats.sum_loss;
            sum_sq_grad += stats.sum_sq_grad_norm;
            sum_pos_score += stats.sum_positive_score;
            examples += stats.examples;
        }

        let validation = evaluate(
            &model,
            dataset,
            Split::Validation,
            &config.eval_cutoffs,
            config.llpauc_alpha,
            config.llpauc_beta,
            Some(RunMeta {
                loss_family: config.loss.family.to_string(),
                tau: config.loss.tau,
                seed: config.seed,
                epoch: Some(epoch),
                split: "validation".to_string(),
            }),
        );
        let tracked = validation.precision_at(tracked_k).unwrap_or(0.0);

        let (beta_mean, beta_min, beta_max) = thresholds.stats();
        let n = examples as f64;
        let entry = EpochLog {
            epoch,
            mean_loss: sum_loss / n,
            mean_grad_norm: (sum_sq_grad / n).sqrt(),
            mean_sq_grad_norm: sum_sq_grad / n,
            mean_positive_score: sum_pos_score / n,
            beta_mean,
            beta_min,
            beta_max,
            tracked_metric: tracked,
            validation,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if config.verbose {
            eprintln!(
                "epoch {epoch}: loss {:.5}, precision@{tracked_k} {:.5}, beta mean {:.4}, {:.2}s",
                entry.mean_loss, tracked, beta_mean, entry.wall_time_s
            );
        }
        log.epochs.push(entry);

        let improved = match &best {
            None => true,
            Some((best_metric, ..)) => tracked > *best_metric,
        };
        if improved {
            best = Some((tracked, model.clone(), adam.clone(), thresholds.clone()));
            log.best_epoch = Some(epoch);
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best >= config.patience {
                log.stopped_early = true;
                break;
            }
        }
    }

    let (_, best_model, best_adam, best_thresholds) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model: best_model,
        adam: best_adam,
        thresholds: best_thresholds,
        log,
    })
}

/// Anything that can produce a full item-score vector for a user.
pub trait ItemScorer: Sync {
    fn num_items(&self) -> usize;
    fn scores_into(&self, user: u32, out: &mut Vec<f64>);
}

impl ItemScorer for FactorModel {
    fn num_items(&self) -> usize {
        FactorModel::num_items(self)
    }

    fn scores_into(&self, user: u32, out: &mut Vec<f64>) {
        self.score_all(user, out);
    }
}

/// Evaluate a model on a split. Training positives are masked out of the
/// candidate set; under a temporal split, test evaluation also masks
/// validation positives. Users without positives in the split, or without
/// any training positives (cold start), are skipped.
pub fn evaluate(
    model: &FactorModel,
    dataset: &InteractionDataset,
    split: Split,
    cutoffs: &[u32],
    llpauc_alpha: f64,
    llpauc_beta: f64,
    meta: Option<RunMeta>,
) -> MetricReport {
    evaluate_scored(model, dataset, split, cutoffs, llpauc_alpha, llpauc_beta, meta)
}

struct UserMetrics {
    per_cutoff: Vec<CutoffMetrics>,
    auc: Option<f64>,
    llpauc: Option<f64>,
}

pub fn evaluate_scored<S: ItemScorer>(
    scorer: &S,
    dataset: &InteractionDataset,
    split: Split,
    cutoffs: &[u32],
    llpauc_alpha: f64,
    llpauc_beta: f64,
    meta: Option<RunMeta>,
) -> MetricReport {
    let mask_validation = split == Split::Test && dataset.mode() == Some(SplitMode::Temporal);

    let per_user: Vec<Option<UserMetrics>> = (0..dataset.num_users() as u32)
        .into_par_iter()
        .map(|user| {
            let eval_positives = match split {
                Split::Validation => dataset.validation_positives(user),
                Split::Test => dataset.test_positives(user),
            };
            if eval_positives.is_empty() || dataset.train_positives(user).is_empty() {
                return None;
            }
            let mut scores = Vec::new();
            scorer.scores_into(user, &mut scores);
            let mut masked: Vec<u32> = dataset.train_positives(user).to_vec();
            if mask_validation {
                masked.extend_from_slice(dataset.validation_positives(user));
            }
            let eval = RankedEval::new(&scores, &masked, eval_positives);
            let per_cutoff = cutoffs
                .iter()
                .map(|&k| {
                    let (precision, recall) =
                        metrics::precision_recall_at_k(&eval, k as usize).expect("has positives");
                    CutoffMetrics {
                        precision,
                        recall,
                        ndcg: metrics::ndcg_at_k(&eval, k as usize).expect("has positives"),
                        mrr: metrics::mrr_at_k(&eval, k as usize).expect("has positives"),
                    }
                })
                .collect();
            Some(UserMetrics {
                per_cutoff,
                auc: metrics::auc(&eval),
                llpauc: metrics::llpauc(&eval, llpauc_alpha, llpauc_beta),
            })
        })
        .collect();

    // Deterministic reduction in user order.
    let mut users_evaluated = 0usize;
    let mut users_skipped = 0usize;
    let mut cutoff_sums = vec![
        CutoffMetrics {
            precision: 0.0,
            recall: 0.0,
            ndcg: 0.0,
            mrr: 0.0
        };
        cutoffs.len()
    ];
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    let mut llpauc_sum = 0.0;
    let mut llpauc_count = 0usize;
    for entry in per_user {
        let Some(m) = entry else {
            users_skipped += 1;
            continue;
        };
        users_evaluated += 1;
        for (acc, x) in cutoff_sums.iter_mut().zip(&m.per_cutoff) {
            acc.precision += x.precision;
            acc.recall += x.recall;
            acc.ndcg += x.ndcg;
            acc.mrr += x.mrr;
        }
        if let Some(a) = m.auc {
            auc_sum += a;
            auc_count += 1;
        }
        if let Some(l) = m.llpauc {
            llpauc_sum += l;
            llpauc_count += 1;
        }
    }

    let denom = users_evaluated.max(1) as f64;
    let mut report = MetricReport {
        cutoffs: Default::default(),
        auc: if auc_count == 0 {
            0.0
        } else {
            auc_sum / auc_count as f64
        },
        llpauc: if llpauc_count == 0 {
            0.0
        } else {
            llpauc_sum / llpauc_count as f64
        },
        llpauc_alpha,
        llpauc_beta,
        users_evaluated,
        users_skipped,
        meta,
    };
    for (i, &k) in cutoffs.iter().enumerate() {
        report.cutoffs.insert(
            k,
            CutoffMetrics {
                precision: cutoff_sums[i].precision / denom,
                recall: cutoff_sums[i].recall / denom,
                ndcg: cutoff_sums[i].ndcg / denom,
                mrr: cutoff_sums[i].mrr / denom,
            },
        );
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossFamily;
    use crate::synthetic;

    fn toy_config(family: LossFamily, epochs: usize) -> TrainConfig {
        TrainConfig {
            loss: LossSpec {
                family,
                tau: 0.1,
                k: 3,
                num_negatives: 8,
                epsilon_log: 1e-6,
            },
            epochs,
            batch_size: 16,
            learning_rate: 0.05,
            weight_decay: 0.0,
            eval_cutoffs: vec![3],
            patience: 10_000,
            seed: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sample_negatives_full_complement_has_unit_weight() {
        let ds = synthetic::planted_toy();
        let mut r = rng::stream(0, &[99]);
        let available = ds.num_items() - ds.train_positives(0).len();
        let neg = sample_negatives(&ds, 0, available, &mut r).unwrap();
        assert_eq!(neg.items.len(), available);
        assert_eq!(neg.weight, 1.0);
        let mut sorted = neg.items.clone();
        sorted.sort_unstable();
        let expected: Vec<u32> = (0..ds.num_items() as u32)
            .filter(|i| !ds.train_positives(0).contains(i))
            .collect();
        assert_eq!(sorted, expected);
    }

    #[test]
    fn sample_negatives_never_returns_train_positives() {
        let ds = synthetic::planted_toy();
        for trial in 0..1000u64 {
            let mut r = rng::stream(trial, &[7]);
            let neg = sample_negatives(&ds, 2, 5, &mut r).unwrap();
            assert_eq!(neg.items.len(), 5);
            for &i in &neg.items {
                assert!(!ds.is_train_positive(2, i));
            }
        }
    }

    #[test]
    fn sample_negatives_inclusion_frequency_is_binomial() {
        // Any fixed negative appears with probability count/|N_u|.
        let ds = synthetic::planted_toy();
        let user = 0u32;
        let count = 5usize;
        let available = ds.num_items() - ds.train_positives(user).len();
        let p = count as f64 / available as f64;
        let trials = 10_000usize;
        let probe = 10u32;
        assert!(!ds.is_train_positive(user, probe));
        let mut hits = 0usize;
        for t in 0..trials {
            let mut r = rng::stream(t as u64, &[13]);
            let neg = sample_negatives(&ds, user, count, &mut r).unwrap();
            if neg.items.contains(&probe) {
                hits += 1;
            }
        }
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (hits as f64 - mean).abs() <= 3.0 * sd,
            "hits {hits}, expected {mean} +- {sd}"
        );
    }

    #[test]
    fn sample_negatives_rejects_oversized_requests() {
        let ds = synthetic::planted_toy();
        let mut r = rng::stream(0, &[1]);
        let available = ds.num_items() - ds.train_positives(0).len();
        assert!(matches!(
            sample_negatives(&ds, 0, available + 1, &mut r),
            Err(TrainError::SampleCount { .. })
        ));
    }

    #[test]
    fn patience_one_with_frozen_model_runs_exactly_two_epochs() {
        let ds = synthetic::planted_toy();
        let mut config = toy_config(LossFamily::Talos, 50);
        config.patience = 1;
        // An absurdly small learning rate freezes the metric after epoch 1.
        config.learning_rate = 1e-300;
        config.threshold_learning_rate = 0.0;
        let model = FactorModel::init(ds.num_users(), ds.num_items(), 8, 3);
        let thresholds = ThresholdTable::new(ds.num_users(), 3);
        let out = train(&ds, model, thresholds, &config).unwrap();
        assert_eq!(out.log.epochs.len(), 2);
        assert!(out.log.stopped_early);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synthetic::planted_toy();
        let config = toy_config(LossFamily::Talos, 5);
        let run = || {
            let model = FactorModel::init(ds.num_users(), ds.num_items(), 8, 3);
            let thresholds = ThresholdTable::new(ds.num_users(), 3);
            train(&ds, model, thresholds, &config).unwrap()
        };
        let a = run();
        let b = run();
        let losses_a: Vec<f64> = a.log.epochs.iter().map(|e| e.mean_loss).collect();
        let losses_b: Vec<f64> = b.log.epochs.iter().map(|e| e.mean_loss).collect();
        assert_eq!(losses_a, losses_b);
        assert_eq!(a.model, b.model);
        assert_eq!(a.thresholds, b.thresholds);
    }

    #[test]
    fn toy_planted_structure_is_recovered() {
        let ds = synthetic::planted_toy();
        let config = toy_config(LossFamily::Talos, 200);
        let model = FactorModel::init(ds.num_users(), ds.num_items(), 8, 3);
        let thresholds = ThresholdTable::new(ds.num_users(), 3);
        let out = train(&ds, model, thresholds, &config).unwrap();
        // Rank over raw scores; every user's top-3 must contain at least two
        // planted items.
        for user in 0..ds.num_users() as u32 {
            let mut scores = Vec::new();
            out.model.score_all(user, &mut scores);
            let mut order: Vec<u32> = (0..scores.len() as u32).collect();
            order.sort_unstable_by(|&a, &b| scores[b as usize].total_cmp(&scores[a as usize]));
            let planted = synthetic::toy_planted_items(user);
            let hits = order[..3].iter().filter(|i| planted.contains(i)).count();
            assert!(
                hits >= 2,
                "user {user}: top-3 {:?} planted {planted:?}",
                &order[..3]
            );
        }
    }

    #[test]
    fn loss_phase_sees_pre_batch_thresholds() {
        // Duplicate user in one batch: both examples must be scored against
        // the threshold as it was before the batch, and the threshold update
        // must run against post-step scores.
        let ds = synthetic::planted_toy();
        let config = toy_config(LossFamily::Talos, 1);
        let mut model = FactorModel::init(ds.num_users(), ds.num_items(), 8, 3);
        let model_before = model.clone();
        let mut adam = AdamState::new(&model, config.learning_rate, 0.0);
        let mut thresholds = ThresholdTable::new(ds.num_users(), 3)
            .with_learning_rate(config.threshold_learning_rate);
        let beta_before = 0.25;
        thresholds.set(0, beta_before);
        let pinball = PinballWeights::new(3, ds.num_items() as u32).unwrap();

        let batch = [(0u32, 0u32), (0u32, 1u32)];
        let epoch = 1;
        let stats = run_batch(
            &mut model,
            &mut adam,
            &mut thresholds,
            &ds,
            &config,
            Some(&pinball),
            epoch,
            0,
            &batch,
            0,
        )
        .unwrap();

        // Replay phase A against the captured pre-batch state.
        let mut expected_loss = 0.0;
        for (idx, &(user, item)) in batch.iter().enumerate() {
            let mut r = rng::stream(config.seed, &[rng::label::EXAMPLE, epoch as u64, idx as u64]);
            let neg = sample_negatives(&ds, user, 8, &mut r).unwrap();
            let neg_scores = model_before.score_block(user, &neg.items);
            let g = losses::evaluate(
                &config.loss,
                &LossExample {
                    user,
                    positive_item: item,
                    positive_score: model_before.score(user, item),
                    negative_scores: &neg_scores,
                    beta: beta_before,
                    positive_count: ds.train_positives(user).len(),
                },
            )
            .unwrap();
            expected_loss += g.loss;
        }
        assert!(
            (stats.sum_loss - expected_loss).abs() < 1e-12,
            "loss phase must use pre-batch thresholds"
        );

        // Replay phase B: updates run in example order against the post-step
        // model.
        let mut replay = ThresholdTable::new(ds.num_users(), 3)
            .with_learning_rate(config.threshold_learning_rate);
        replay.set(0, beta_before);
        for (idx, &(user, item)) in batch.iter().enumerate() {
            let mut r = rng::stream(config.seed, &[rng::label::EXAMPLE, epoch as u64, idx as u64]);
            let neg = sample_negatives(&ds, user, 8, &mut r).unwrap();
            let neg_scores = model.score_block(user, &neg.items);
            replay.update_threshold(
                user,
                model.score(user, item),
                ds.train_positives(user).len(),
                &neg_scores,
                neg.weight,
                &pinball,
            );
        }
        assert_eq!(thresholds.get(0), replay.get(0));
        assert_ne!(thresholds.get(0), beta_before);
    }

    #[test]
    fn nan_from_runaway_weight_decay_aborts_with_coordinates() {
        let ds = synthetic::planted_toy();
        let mut config = toy_config(LossFamily::Talos, 300);
        config.learning_rate = 1e6;
        config.weight_decay = 1e-2;
        let model = FactorModel::init(ds.num_users(), ds.num_items(), 8, 3);
        let thresholds = ThresholdTable::new(ds.num_users(), 3);
        match train(&ds, model, thresholds, &config) {
            Err(TrainError::NanLoss { epoch, .. }) => assert!(epoch >= 1),
            other => panic!("expected NanLoss, got {other:?}"),
        }
    }

    struct OracleScorer {
        ds: InteractionDataset,
    }

    impl ItemScorer for OracleScorer {
        fn num_items(&self) -> usize {
            self.ds.num_items()
        }

        fn scores_into(&self, user: u32, out: &mut Vec<f64>) {
            out.clear();
            out.resize(self.ds.num_items(), 0.0);
            for &i in self.ds.test_positives(user) {
                out[i as usize] = 1.0;
            }
        }
    }

    #[test]
    fn perfect_oracle_scores_give_full_recall() {
        let ds = synthetic::planted_toy();
        let oracle = OracleScorer { ds: ds.clone() };
        let report = evaluate_scored(&oracle, &ds, Split::Test, &[3], 0.3, 0.1, None);
        // Each toy user has one test positive, so recall@3 is 1.
        assert_eq!(report.recall_at(3), Some(1.0));
        assert_eq!(report.users_evaluated, synthetic::TOY_USERS);
    }

    #[test]
    fn report_keys_cover_requested_cutoffs() {
        let ds = synthetic::planted_toy();
        let model = FactorModel::init(ds.num_users(), ds.num_items(), 8, 3);
        let report = evaluate(&model, &ds, Split::Validation, &[1, 3, 5], 0.3, 0.1, None);
        let keys: Vec<u32> = report.cutoffs.keys().copied().collect();
        assert_eq!(keys, vec![1, 3, 5]);
    }

    #[test]
    fn untrained_model_scores_near_random_baseline() {
        // Precision@20 of a random model stays near (mean |P_test|) / |I|.
        let cfg = synthetic::BenchmarkConfig {
            num_users: 150,
            num_items: 800,
            target_interactions: 12_000,
            ..synthetic::BenchmarkConfig::default()
        };
        let text = synthetic::benchmark_lines(&cfg);
        let split_cfg = crate::dataset::SplitConfig::default();
        let ds = InteractionDataset::load_reader(std::io::Cursor::new(text), &split_cfg)
            .unwrap()
            .split_iid(&split_cfg)
            .unwrap();
        let model = FactorModel::init(ds.num_users(), ds.num_items(), 16, 5);
        let report = evaluate(&model, &ds, Split::Test, &[20], 0.3, 0.1, None);
        let p20 = report.precision_at(20).unwrap();
        assert!(p20 < 0.05, "random model precision@20 = {p20}");
    }
}
