//! Triplet training with descriptor-space positive selection and
//! hardest-negative mining against geometric ground truth.
//!
//! Each epoch refreshes a cache of database and query descriptors under
//! the current parameters, then walks the training queries in a shuffled
//! order. For a query, the positive is the geometrically valid database
//! item closest in descriptor space; the negatives are the
//! descriptor-closest geometric non-positives. Batches sum the hinge
//! triplet losses of their members, one Adam step per batch. Validation
//! Recall@5 drives early stopping with the best checkpoint retained.
//!
//! The loop is single-threaded and fully deterministic under its seed.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Precision};
use crate::dataset::{positives_for, GroundTruth, SampleData, SequenceSample, SyntheticDataset};
use crate::error::{Error, Result};
use crate::evaluation::{recall_at_k, RetrievalIndex};
use crate::model::Model;
use crate::params::ParameterRegistry;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TripletConfig {
    pub margin: f64,
    pub n_negatives: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Single precision is the training default; oracles use f64.
    pub use_f64: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        // margin/negatives/batch/patience follow the reference recipe;
        // the desk-scale learning rate is larger than the full-scale 1e-5
        // so synthetic runs converge in minutes.
        TripletConfig {
            margin: 0.1,
            n_negatives: 5,
            batch_size: 4,
            lr: 1e-3,
            patience: 5,
            max_epochs: 30,
            use_f64: false,
        }
    }
}

impl TripletConfig {
    pub fn precision(&self) -> Precision {
        if self.use_f64 {
            Precision::F64
        } else {
            Precision::F32
        }
    }
}

/// Hinge triplet loss: sum_j max(0, |q-p|^2 - |q-n_j|^2 + margin).
pub fn triplet_loss(
    graph: &mut Graph,
    dq: NodeId,
    dp: NodeId,
    dns: &[NodeId],
    margin: f64,
) -> Result<NodeId> {
    if dns.is_empty() {
        return Err(Error::Input("triplet loss needs at least one negative".into()));
    }
    let pos = graph.squared_distance(dq, dp)?;
    let mut total: Option<NodeId> = None;
    for &dn in dns {
        let neg = graph.squared_distance(dq, dn)?;
        let diff = graph.sub(pos, neg)?;
        let shifted = graph.add_scalar(diff, margin);
        let hinge = graph.relu(shifted);
        total = Some(match total {
            None => hinge,
            Some(t) => graph.add(t, hinge)?,
        });
    }
    Ok(total.expect("nonempty negatives"))
}

// ── Adam ─────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update over every path present in `grads`.
pub fn adam_step(
    registry: &mut ParameterRegistry,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (path, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter {path}"
            )));
        }
    }
    state.t += 1;
    let t = state.t;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (path, g) in grads {
        let param = registry.get_mut(path)?;
        let n = param.numel();
        if g.len() != n {
            return Err(Error::shape(
                "adam_step",
                format!("grad for {path} has {} elements, param has {n}", g.len()),
            ));
        }
        let m = state.m.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
        let data = param.data_mut();
        for i in 0..n {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

// ── Mining ───────────────────────────────────────────────────────────

/// Descriptor snapshot refreshed once per epoch.
pub struct MiningCache {
    pub db: Vec<Tensor>,
    pub queries: Vec<Tensor>,
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Positive: the geometric positive closest in descriptor space
/// (excluding `exclude`, for the self-match case). Negatives: the
/// `n_negatives` descriptor-closest geometric non-positives. Ties break
/// by lower index. Returns None when no geometric positive exists.
pub fn mine_triplet(
    cache: &MiningCache,
    query_idx: usize,
    geo_positives: &BTreeSet<usize>,
    n_negatives: usize,
    exclude: Option<usize>,
) -> Option<(usize, Vec<usize>)> {
    let q = &cache.queries[query_idx];
    let positive = geo_positives
        .iter()
        .filter(|&&i| Some(i) != exclude)
        .map(|&i| (sq_dist(q, &cache.db[i]), i))
        .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)))?
        .1;
    let mut negatives: Vec<(f64, usize)> = (0..cache.db.len())
        .filter(|i| !geo_positives.contains(i) && Some(*i) != exclude)
        .map(|i| (sq_dist(q, &cache.db[i]), i))
        .collect();
    negatives.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let negatives: Vec<usize> = negatives
        .into_iter()
        .take(n_negatives)
        .map(|(_, i)| i)
        .collect();
    if negatives.is_empty() {
        return None;
    }
    Some((positive, negatives))
}

// ── Early stopping ───────────────────────────────────────────────────

/// Best-so-far tracker: stop once `patience` epochs pass the best epoch
/// without strict improvement.
pub struct EarlyStopper {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }

    /// Record this epoch's metric; true means training should stop now.
    pub fn update(&mut self, epoch: usize, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.best_epoch = epoch;
        }
        epoch >= self.best_epoch + self.patience
    }
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_recall_at_5: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainOutcome {
    Completed,
    EarlyStopped { at_epoch: usize },
    Diverged { at_epoch: usize },
}

#[derive(Serialize, Deserialize)]
pub struct TrainResult {
    pub outcome: TrainOutcome,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_recall_at_5: f64,
    /// Queries skipped because they had no geometric positive.
    pub skipped_queries: usize,
}

fn sample_features(sample: &SequenceSample) -> Result<&Vec<crate::encoder::TokenFeatureMap>> {
    match &sample.data {
        SampleData::Features(maps) => Ok(maps),
        SampleData::Frames(_) => Err(Error::Config(
            "training currently consumes precomputed token features".into(),
        )),
    }
}

fn descriptors_of(
    model: &Model,
    samples: &[SequenceSample],
    precision: Precision,
) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| model.descriptor(sample_features(s)?, precision))
        .collect()
}

fn val_recall(
    model: &Model,
    data: &SyntheticDataset,
    positives_val: &[BTreeSet<usize>],
    precision: Precision,
) -> Result<f64> {
    let db = descriptors_of(model, &data.database, precision)?;
    let queries = descriptors_of(model, &data.queries_val, precision)?;
    let index = RetrievalIndex::build(db)?;
    Ok(recall_at_k(&queries, positives_val, &index, 5, false)?.value)
}

/// Train `model` in place; on return its parameters are the best
/// checkpoint by validation Recall@5.
pub fn train(
    model: &mut Model,
    data: &SyntheticDataset,
    gt: &GroundTruth,
    cfg: &TripletConfig,
    seed: u64,
) -> Result<TrainResult> {
    let precision = cfg.precision();

    // geometry is static: positive sets are computed once
    let positives_train: Vec<BTreeSet<usize>> = data
        .queries_train
        .iter()
        .map(|q| positives_for(q, &data.database, gt))
        .collect::<Result<_>>()?;
    let positives_val: Vec<BTreeSet<usize>> = data
        .queries_val
        .iter()
        .map(|q| positives_for(q, &data.database, gt))
        .collect::<Result<_>>()?;

    // k-means VLAD initialization on pooled tokens of a database sample
    let kmeans_rows = 16.min(data.database.len());
    let mut rows = Vec::new();
    for s in &data.database[..kmeans_rows] {
        let pooled = model.pooled_tokens(sample_features(s)?, precision)?;
        rows.extend_from_slice(pooled.data());
    }
    let sample = Tensor::new(
        vec![kmeans_rows * model.cfg.token_count(), model.cfg.dim],
        rows,
    )?;
    model.fit_vlad_centers(&sample, seed)?;

    let mut shuffle_rng = StreamRng::new(seed, "train_shuffle");
    let mut dropout_master = StreamRng::new(seed, "dropout");
    let adam_cfg = AdamConfig::with_lr(cfg.lr);
    let mut adam = AdamState::new();
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut log = Vec::new();
    let mut skipped_total = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let cache = MiningCache {
            db: descriptors_of(model, &data.database, precision)?,
            queries: descriptors_of(model, &data.queries_train, precision)?,
        };

        let mut order: Vec<usize> = (0..data.queries_train.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mined: Vec<(usize, usize, Vec<usize>)> = batch
                .iter()
                .filter_map(|&qi| {
                    match mine_triplet(&cache, qi, &positives_train[qi], cfg.n_negatives, None) {
                        Some((p, ns)) => Some((qi, p, ns)),
                        None => {
                            skipped_total += 1;
                            None
                        }
                    }
                })
                .collect();
            if mined.is_empty() {
                continue;
            }

            let dropout_seed = (dropout_master.gen_f64() * u32::MAX as f64) as u64;
            let mut graph =
                Graph::for_training(precision, StreamRng::new(dropout_seed, "dropout"));
            let mut batch_loss: Option<NodeId> = None;
            for (qi, p, ns) in &mined {
                let dq = model
                    .forward_features(&mut graph, sample_features(&data.queries_train[*qi])?)?
                    .flat;
                let dp = model
                    .forward_features(&mut graph, sample_features(&data.database[*p])?)?
                    .flat;
                let dns: Vec<NodeId> = ns
                    .iter()
                    .map(|&ni| {
                        model
                            .forward_features(&mut graph, sample_features(&data.database[ni])?)
                            .map(|d| d.flat)
                    })
                    .collect::<Result<_>>()?;
                let loss = triplet_loss(&mut graph, dq, dp, &dns, cfg.margin)?;
                batch_loss = Some(match batch_loss {
                    None => loss,
                    Some(acc) => graph.add(acc, loss)?,
                });
            }
            let total = batch_loss.expect("nonempty batch");
            let mean = graph.scale(total, 1.0 / mined.len() as f64);
            let loss_value = graph.value(mean).data()[0];
            if !loss_value.is_finite() {
                model.params = best_params;
                return Ok(TrainResult {
                    outcome: TrainOutcome::Diverged { at_epoch: epoch },
                    log,
                    best_epoch: stopper.best_epoch,
                    best_recall_at_5: stopper.best.max(0.0),
                    skipped_queries: skipped_total,
                });
            }
            loss_sum += loss_value;
            loss_count += 1;
            graph.backward(mean)?;
            adam_step(&mut model.params, &graph.param_grads(), &mut adam, &adam_cfg)?;
        }

        let val_r5 = val_recall(model, data, &positives_val, precision)?;
        let improved = val_r5 > stopper.best;
        let stop = stopper.update(epoch, val_r5);
        if improved {
            best_params = model.params.clone();
        }
        log.push(EpochLog {
            epoch,
            mean_loss: if loss_count > 0 {
                loss_sum / loss_count as f64
            } else {
                0.0
            },
            val_recall_at_5: val_r5,
            wall_ms: t0.elapsed().as_millis() as u64,
        });
        if stop {
            model.params = best_params;
            return Ok(TrainResult {
                outcome: TrainOutcome::EarlyStopped { at_epoch: epoch },
                log,
                best_epoch: stopper.best_epoch,
                best_recall_at_5: stopper.best,
                skipped_queries: skipped_total,
            });
        }
    }
    model.params = best_params;
    Ok(TrainResult {
        outcome: TrainOutcome::Completed,
        log,
        best_epoch: stopper.best_epoch,
        best_recall_at_5: stopper.best,
        skipped_queries: skipped_total,
    })
}
