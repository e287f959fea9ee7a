//! Retrieval metrics, the latency-constrained streaming simulator, and
//! analytic resource accounting.
//!
//! Retrieval is exact brute force over unit-norm descriptors with ties
//! broken by lower index. The streaming model is per-query and
//! independent: query i is on time iff its latency fits within one
//! inter-query period (1/fps); a queued single-server mode exists as an
//! optional alternative semantics, off by default. Latencies are injected
//! from deterministic models so every number reproduces bit-for-bit;
//! wall-clock measurement is available but excluded from acceptance runs.
//!
//! FLOP accounting counts a multiply-add as 2 flops everywhere, and
//! parameter counts come from a freshly initialized registry rather than
//! a separate formula.

use std::collections::BTreeSet;

use crate::attention::{flops_dense_attn, flops_deform_attn};
use crate::error::{Error, Result};
use crate::model::{InputMode, Model, ModelConfig};
use crate::recurrent::Variant;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

// ── Retrieval ────────────────────────────────────────────────────────

pub struct RetrievalIndex {
    descriptors: Vec<Tensor>,
}

impl RetrievalIndex {
    /// Build from unit-norm descriptors (checked to 1e-6).
    pub fn build(descriptors: Vec<Tensor>) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(Error::Input("empty retrieval index".into()));
        }
        let dim = descriptors[0].numel();
        for (i, d) in descriptors.iter().enumerate() {
            if d.numel() != dim {
                return Err(Error::shape(
                    "RetrievalIndex::build",
                    format!("descriptor {i} has {} elements, expected {dim}", d.numel()),
                ));
            }
            if (d.l2_norm() - 1.0).abs() > 1e-6 {
                return Err(Error::Input(format!(
                    "descriptor {i} is not unit norm ({})",
                    d.l2_norm()
                )));
            }
        }
        Ok(RetrievalIndex { descriptors })
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors[0].numel()
    }

    /// Exact k nearest by Euclidean distance, ties broken by lower index.
    /// `exclude` drops one index (self-match exclusion when the query set
    /// is the database itself).
    pub fn top_k(&self, query: &Tensor, k: usize, exclude: Option<usize>) -> Vec<usize> {
        let mut scored: Vec<(f64, usize)> = self
            .descriptors
            .iter()
            .enumerate()
            .filter(|(i, _)| Some(*i) != exclude)
            .map(|(i, d)| {
                let dist: f64 = d
                    .data()
                    .iter()
                    .zip(query.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                (dist, i)
            })
            .collect();
        scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|(_, i)| i).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecallResult {
    pub value: f64,
    /// Queries with at least one geometric positive (the denominator).
    pub counted: usize,
    /// Queries skipped for lack of any geometric positive.
    pub skipped: usize,
}

/// Recall@K: the fraction of counted queries whose top-K contains at
/// least one positive index. Queries without positives are excluded from
/// the denominator and reported in `skipped`.
pub fn recall_at_k(
    queries: &[Tensor],
    positives: &[BTreeSet<usize>],
    index: &RetrievalIndex,
    k: usize,
    exclude_self: bool,
) -> Result<RecallResult> {
    if k == 0 {
        return Err(Error::Config("recall needs K >= 1".into()));
    }
    if queries.len() != positives.len() {
        return Err(Error::Input(format!(
            "{} queries but {} positive sets",
            queries.len(),
            positives.len()
        )));
    }
    let mut hits = 0usize;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (i, (q, pos)) in queries.iter().zip(positives).enumerate() {
        if pos.is_empty() {
            skipped += 1;
            continue;
        }
        counted += 1;
        let exclude = exclude_self.then_some(i);
        if index.top_k(q, k, exclude).iter().any(|r| pos.contains(r)) {
            hits += 1;
        }
    }
    if counted == 0 {
        return Err(Error::Input("no query has any geometric positive".into()));
    }
    Ok(RecallResult {
        value: hits as f64 / counted as f64,
        counted,
        skipped,
    })
}

// ── Streaming simulator ──────────────────────────────────────────────

/// One streamed query: its processing latency plus the retrieval outcome
/// computed offline (hit = top-K contains a positive; counted = the query
/// has at least one positive).
#[derive(Clone, Copy, Debug)]
pub struct StreamEvent {
    pub latency: f64,
    pub hit: bool,
    pub counted: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamOutcome {
    /// Percentage of queries processed within their deadline.
    pub ot_pct: f64,
    /// Recall counting a query correct only if on time and hitting.
    pub on_time_recall: f64,
    /// Deadline-free recall over the same events.
    pub plain_recall: f64,
}

/// Per-query independent deadline model: query i is on time iff its
/// latency is at most 1/fps. `fps = None` means an infinite deadline, in
/// which case the outcome equals plain recall exactly.
pub fn stream_eval(events: &[StreamEvent], fps: Option<f64>) -> Result<StreamOutcome> {
    if let Some(f) = fps {
        if f <= 0.0 {
            return Err(Error::Config(format!("fps must be positive, got {f}")));
        }
    }
    if events.is_empty() {
        return Err(Error::Input("no stream events".into()));
    }
    if events.iter().any(|e| e.latency < 0.0) {
        return Err(Error::Input("negative latency".into()));
    }
    let deadline = fps.map(|f| 1.0 / f);
    let on_time = |e: &StreamEvent| deadline.is_none_or(|d| e.latency <= d);

    let total = events.len() as f64;
    let ot = events.iter().filter(|e| on_time(e)).count() as f64;
    let counted = events.iter().filter(|e| e.counted).count();
    if counted == 0 {
        return Err(Error::Input("no counted query in stream".into()));
    }
    let plain_hits = events.iter().filter(|e| e.counted && e.hit).count();
    let ot_hits = events
        .iter()
        .filter(|e| e.counted && e.hit && on_time(e))
        .count();
    Ok(StreamOutcome {
        ot_pct: 100.0 * ot / total,
        on_time_recall: ot_hits as f64 / counted as f64,
        plain_recall: plain_hits as f64 / counted as f64,
    })
}

/// Optional queued single-server semantics: queries arrive at i/fps,
/// process FIFO (start = max(arrival, previous finish)), and are on time
/// iff they finish before the next query arrives (arrival + 1/fps).
pub fn stream_eval_queued(events: &[StreamEvent], fps: f64) -> Result<StreamOutcome> {
    if fps <= 0.0 {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    if events.is_empty() {
        return Err(Error::Input("no stream events".into()));
    }
    let period = 1.0 / fps;
    let mut finish_prev = 0.0f64;
    let mut on_time = vec![false; events.len()];
    for (i, e) in events.iter().enumerate() {
        let arrival = i as f64 * period;
        let start = arrival.max(finish_prev);
        let finish = start + e.latency;
        on_time[i] = finish <= arrival + period;
        finish_prev = finish;
    }
    let counted = events.iter().filter(|e| e.counted).count();
    if counted == 0 {
        return Err(Error::Input("no counted query in stream".into()));
    }
    let ot = on_time.iter().filter(|&&b| b).count() as f64;
    let plain_hits = events.iter().filter(|e| e.counted && e.hit).count();
    let ot_hits = events
        .iter()
        .zip(&on_time)
        .filter(|(e, &ot)| e.counted && e.hit && ot)
        .count();
    Ok(StreamOutcome {
        ot_pct: 100.0 * ot / events.len() as f64,
        on_time_recall: ot_hits as f64 / counted as f64,
        plain_recall: plain_hits as f64 / counted as f64,
    })
}

/// Sweep integer FPS values, returning (fps, OT%, on-time recall) rows.
pub fn fps_sweep(
    events: &[StreamEvent],
    fps_lo: u32,
    fps_hi: u32,
) -> Result<Vec<(u32, f64, f64)>> {
    if fps_lo == 0 || fps_hi < fps_lo {
        return Err(Error::Config(format!(
            "bad fps range {fps_lo}..{fps_hi}"
        )));
    }
    (fps_lo..=fps_hi)
        .map(|f| {
            let out = stream_eval(events, Some(f64::from(f)))?;
            Ok((f, out.ot_pct, out.on_time_recall))
        })
        .collect()
}

// ── Injected latency models ──────────────────────────────────────────

/// Deterministic latency sources for the simulator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LatencyModel {
    /// Every query takes the same time.
    Constant { ms: f64 },
    /// Cyclic two-point mixture: per 10-query cycle the first
    /// `round(10 * weight_a)` queries take `ms_a`, the rest `ms_b`.
    TwoPoint { ms_a: f64, ms_b: f64, weight_a: f64 },
    /// Latency proportional to the model's analytic FLOPs per sequence.
    FlopsBased { gflops_per_sec: f64 },
    /// Seeded uniform draw in [ms_lo, ms_hi].
    UniformRandom { ms_lo: f64, ms_hi: f64 },
}

pub fn latencies(model: &LatencyModel, n: usize, seed: u64, flops_per_query: u64) -> Vec<f64> {
    match *model {
        LatencyModel::Constant { ms } => vec![ms / 1e3; n],
        LatencyModel::TwoPoint { ms_a, ms_b, weight_a } => {
            let a_per_cycle = (10.0 * weight_a).round() as usize;
            (0..n)
                .map(|i| {
                    if i % 10 < a_per_cycle {
                        ms_a / 1e3
                    } else {
                        ms_b / 1e3
                    }
                })
                .collect()
        }
        LatencyModel::FlopsBased { gflops_per_sec } => {
            let secs = flops_per_query as f64 / (gflops_per_sec * 1e9);
            vec![secs; n]
        }
        LatencyModel::UniformRandom { ms_lo, ms_hi } => {
            let mut rng = StreamRng::new(seed, "stream_latency");
            (0..n).map(|_| rng.uniform(ms_lo, ms_hi) / 1e3).collect()
        }
    }
}

// ── Analytic resource accounting ─────────────────────────────────────

/// Flops charged per transcendental in the analytic model.
const GELU_FLOPS: u64 = 10;
const POW_FLOPS: u64 = 2;
const SOFTMAX_FLOPS_PER_ELEM: u64 = 5;

#[derive(Clone, Debug)]
pub struct StageCost {
    pub name: &'static str,
    pub flops: u64,
}

#[derive(Clone, Debug)]
pub struct ResourceReport {
    pub variant: Variant,
    pub seq_len: usize,
    pub stages: Vec<StageCost>,
    pub total_flops: u64,
    pub parameters: usize,
    pub peak_activation_elements: usize,
}

impl ResourceReport {
    pub fn stage(&self, name: &str) -> u64 {
        self.stages
            .iter()
            .find(|s| s.name == name)
            .map_or(0, |s| s.flops)
    }

    pub fn gflops(&self) -> f64 {
        self.total_flops as f64 / 1e9
    }
}

/// FFN + two layer norms + residuals of one post-norm block at t tokens.
fn block_overhead_flops(t: u64, d: u64) -> u64 {
    let hidden = 4 * d;
    2 * t * d * hidden // first linear
        + t * hidden * GELU_FLOPS
        + 2 * t * hidden * d // second linear
        + 2 * 8 * t * d // two layer norms
        + 2 * t * d // two residual adds
}

fn dte_layer_flops(n: usize, cfg: &ModelConfig) -> Result<u64> {
    let attn = flops_deform_attn(n, &cfg.attn_config()?);
    Ok(attn + block_overhead_flops(n as u64, cfg.dim as u64))
}

fn dense_layer_flops(t: usize, cfg: &ModelConfig) -> u64 {
    flops_dense_attn(t, cfg.dim, cfg.heads) + block_overhead_flops(t as u64, cfg.dim as u64)
}

fn encoder_flops(cfg: &ModelConfig, l: u64) -> u64 {
    match cfg.input {
        InputMode::Features => 0,
        InputMode::Frames { .. } => {
            let n = cfg.token_count() as u64;
            let p = cfg.patch_size as u64;
            let d = cfg.dim as u64;
            // patch mean-pool, 3-channel projection, positional add
            l * (n * (3 * p * p + 3) + 2 * n * 3 * d + n * d)
        }
    }
}

fn aggregation_flops(cfg: &ModelConfig, l: u64) -> u64 {
    let n = cfg.token_count() as u64;
    let d = cfg.dim as u64;
    let c = cfg.clusters as u64;
    // GeM per (token, channel): L clamps+powers+adds, then mean and root
    let gem = n * d * (l * (1 + POW_FLOPS + 1) + 1 + POW_FLOPS);
    // VLAD: assignment logits, softmax, residual aggregation, norms
    let vlad = 2 * n * d * c // logits
        + SOFTMAX_FLOPS_PER_ELEM * n * c
        + 2 * n * d * c // soft-assigned token sums
        + n * c // assignment mass
        + 3 * c * d // center shift and subtraction
        + 4 * c * d // intra-normalization
        + 3 * c * d; // global normalization
    gem + vlad
}

/// Analytic per-stage FLOPs, registry-derived parameter count, and the
/// peak activation footprint for one L-frame sequence.
pub fn resource_report(cfg: &ModelConfig, l: usize) -> Result<ResourceReport> {
    if l == 0 {
        return Err(Error::Config("seq_len must be >= 1".into()));
    }
    let n = cfg.token_count();
    let d = cfg.dim;
    let lu = l as u64;
    let spatial_attn = match cfg.variant {
        Variant::RecurrentTe => flops_dense_attn(n, d, cfg.heads),
        _ => flops_deform_attn(n, &cfg.attn_config()?),
    };
    let spatio_temporal = match cfg.variant {
        Variant::RecurrentDte => lu * dte_layer_flops(n, cfg)? + (n * d) as u64,
        Variant::DteOnly => lu * dte_layer_flops(n, cfg)?,
        Variant::RecurrentTe => lu * dense_layer_flops(n, cfg) + (n * d) as u64,
        Variant::DtePlusTt => lu * dte_layer_flops(n, cfg)? + dense_layer_flops(l * n, cfg),
    };
    let encoder = encoder_flops(cfg, lu);
    let aggregation = aggregation_flops(cfg, lu);
    let total = encoder + spatio_temporal + aggregation;

    let probe = Model::init(*cfg, 0)?;
    let parameters = probe.params.total_elements();

    // Streaming recurrent variants retain hidden + frame (2 n D) with the
    // FFN hidden buffer as the largest per-step transient; the two-stage
    // variant must materialize all L n tokens for its temporal layer.
    let peak_activation_elements = match cfg.variant {
        Variant::DtePlusTt => 2 * l * n * d + 4 * l * n * d,
        _ => 2 * n * d + 4 * n * d,
    };

    Ok(ResourceReport {
        variant: cfg.variant,
        seq_len: l,
        stages: vec![
            StageCost { name: "encoder", flops: encoder },
            StageCost { name: "spatial_attn", flops: spatial_attn },
            StageCost { name: "spatio_temporal", flops: spatio_temporal },
            StageCost { name: "aggregation", flops: aggregation },
        ],
        total_flops: total,
        parameters,
        peak_activation_elements,
    })
}
