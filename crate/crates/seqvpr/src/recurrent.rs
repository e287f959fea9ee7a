//! The deformable transformer encoder layer and its recurrence across
//! frames, plus the ablation variants behind one switch.
//!
//! One shared post-norm layer (deformable attention, add & norm, FFN,
//! add & norm) is applied once per frame. In the recurrent variants the
//! previous iteration's output is the query and the current frame supplies
//! keys and values; iteration 1 queries with the first frame plus a
//! learnable per-token offset. Because each step consumes only the previous
//! output and one frame, the module runs at any sequence length with a
//! fixed parameter set, and streaming inference retains just two n x D
//! maps no matter how long the sequence grows.

use crate::attention::{self, DeformAttnConfig};
use crate::autodiff::{Graph, NodeId, Precision};
use crate::error::{Error, Result};
use crate::params::ParameterRegistry;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

pub const PARAM_DELTA: &str = "model.delta";

/// Spatio-temporal wiring of the encoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Shared deformable layer, recurrent across frames.
    RecurrentDte,
    /// Shared deformable layer, each frame processed independently.
    DteOnly,
    /// Same recurrence with standard dense attention instead.
    RecurrentTe,
    /// Independent deformable layers plus one dense temporal layer over
    /// the joint L*n token set.
    DtePlusTt,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "recurrent_dte" => Ok(Variant::RecurrentDte),
            "dte_only" => Ok(Variant::DteOnly),
            "recurrent_te" => Ok(Variant::RecurrentTe),
            "dte_plus_tt" => Ok(Variant::DtePlusTt),
            other => Err(Error::Config(format!(
                "unknown model.variant {other:?} (expected recurrent_dte, dte_only, recurrent_te, dte_plus_tt)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::RecurrentDte => "recurrent_dte",
            Variant::DteOnly => "dte_only",
            Variant::RecurrentTe => "recurrent_te",
            Variant::DtePlusTt => "dte_plus_tt",
        }
    }

    pub fn all() -> [Variant; 4] {
        [
            Variant::RecurrentDte,
            Variant::DteOnly,
            Variant::RecurrentTe,
            Variant::DtePlusTt,
        ]
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self, Variant::RecurrentDte | Variant::RecurrentTe)
    }

    pub fn uses_deformable(&self) -> bool {
        !matches!(self, Variant::RecurrentTe)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RecurrentConfig {
    pub variant: Variant,
    pub attn: DeformAttnConfig,
    /// Dropout on the FFN output; the attention block carries its own.
    pub dropout: f64,
}

impl RecurrentConfig {
    pub fn new(variant: Variant, attn: DeformAttnConfig, dropout: f64) -> Self {
        RecurrentConfig {
            variant,
            attn,
            dropout,
        }
    }

    pub fn dim(&self) -> usize {
        self.attn.dim
    }
}

fn ffn_paths(prefix: &str) -> [String; 8] {
    [
        format!("{prefix}.ffn.w1"),
        format!("{prefix}.ffn.b1"),
        format!("{prefix}.ffn.w2"),
        format!("{prefix}.ffn.b2"),
        format!("{prefix}.norm1.gamma"),
        format!("{prefix}.norm1.beta"),
        format!("{prefix}.norm2.gamma"),
        format!("{prefix}.norm2.beta"),
    ]
}

fn init_ffn_and_norms(
    registry: &mut ParameterRegistry,
    prefix: &str,
    d: usize,
    rng: &mut StreamRng,
) -> Result<()> {
    let hidden = 4 * d;
    let bound1 = (6.0 / (d + hidden) as f64).sqrt();
    let mut w1 = Tensor::zeros(&[d, hidden]);
    rng.fill_uniform(w1.data_mut(), -bound1, bound1);
    let mut w2 = Tensor::zeros(&[hidden, d]);
    rng.fill_uniform(w2.data_mut(), -bound1, bound1);
    let [p_w1, p_b1, p_w2, p_b2, p_g1, p_be1, p_g2, p_be2] = ffn_paths(prefix);
    registry.insert(&p_w1, w1)?;
    registry.insert(&p_b1, Tensor::zeros(&[hidden]))?;
    registry.insert(&p_w2, w2)?;
    registry.insert(&p_b2, Tensor::zeros(&[d]))?;
    registry.insert(&p_g1, Tensor::full(&[d], 1.0))?;
    registry.insert(&p_be1, Tensor::zeros(&[d]))?;
    registry.insert(&p_g2, Tensor::full(&[d], 1.0))?;
    registry.insert(&p_be2, Tensor::zeros(&[d]))?;
    Ok(())
}

fn init_dense_attn(
    registry: &mut ParameterRegistry,
    prefix: &str,
    d: usize,
    rng: &mut StreamRng,
) -> Result<()> {
    let bound = (6.0 / (2 * d) as f64).sqrt();
    for leaf in ["q", "k", "v", "out"] {
        let mut w = Tensor::zeros(&[d, d]);
        rng.fill_uniform(w.data_mut(), -bound, bound);
        registry.insert(&format!("{prefix}.{leaf}.w"), w)?;
        registry.insert(&format!("{prefix}.{leaf}.b"), Tensor::zeros(&[d]))?;
    }
    Ok(())
}

/// Register all parameters the configured variant needs for an n-token grid.
pub fn init_params(
    registry: &mut ParameterRegistry,
    cfg: &RecurrentConfig,
    n: usize,
    rng: &mut StreamRng,
) -> Result<()> {
    let d = cfg.dim();
    match cfg.variant {
        Variant::RecurrentDte | Variant::DteOnly => {
            attention::init_params(registry, "dte.attn", &cfg.attn, rng)?;
            init_ffn_and_norms(registry, "dte", d, rng)?;
        }
        Variant::RecurrentTe => {
            init_dense_attn(registry, "te.attn", d, rng)?;
            init_ffn_and_norms(registry, "te", d, rng)?;
        }
        Variant::DtePlusTt => {
            attention::init_params(registry, "dte.attn", &cfg.attn, rng)?;
            init_ffn_and_norms(registry, "dte", d, rng)?;
            init_dense_attn(registry, "tt.attn", d, rng)?;
            init_ffn_and_norms(registry, "tt", d, rng)?;
        }
    }
    if cfg.variant.is_recurrent() {
        // zero init keeps the first query equal to the first frame at start
        registry.insert(PARAM_DELTA, Tensor::zeros(&[n, d]))?;
    }
    Ok(())
}

fn post_norm_block(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    prefix: &str,
    dropout: f64,
    query: NodeId,
    attn_out: NodeId,
) -> Result<NodeId> {
    let [p_w1, p_b1, p_w2, p_b2, p_g1, p_be1, p_g2, p_be2] = ffn_paths(prefix);
    let g1 = graph.param(registry, &p_g1)?;
    let be1 = graph.param(registry, &p_be1)?;
    let res1 = graph.add(query, attn_out)?;
    let x1 = graph.layer_norm(res1, g1, be1, LN_EPS)?;

    let w1 = graph.param(registry, &p_w1)?;
    let b1 = graph.param(registry, &p_b1)?;
    let w2 = graph.param(registry, &p_w2)?;
    let b2 = graph.param(registry, &p_b2)?;
    let h = graph.linear(x1, w1, b1)?;
    let h = graph.gelu(h);
    let f = graph.linear(h, w2, b2)?;
    let f = graph.dropout(f, dropout);

    let g2 = graph.param(registry, &p_g2)?;
    let be2 = graph.param(registry, &p_be2)?;
    let res2 = graph.add(x1, f)?;
    graph.layer_norm(res2, g2, be2, LN_EPS)
}

/// One deformable transformer encoder layer (post-norm).
pub fn dte_layer(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    cfg: &RecurrentConfig,
    query: NodeId,
    kv: NodeId,
    grid: (usize, usize),
) -> Result<NodeId> {
    let attn = attention::deform_attn(graph, registry, "dte.attn", &cfg.attn, query, kv, grid)?;
    post_norm_block(graph, registry, "dte", cfg.dropout, query, attn)
}

/// Standard dense multi-head attention (queries may differ from keys).
fn dense_attn(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    prefix: &str,
    heads: usize,
    dropout: f64,
    query: NodeId,
    kv: NodeId,
) -> Result<NodeId> {
    let d = graph.value(query).shape()[1];
    let dh = d / heads;
    let get = |graph: &mut Graph, leaf: &str| -> Result<NodeId> {
        graph.param(registry, &format!("{prefix}.{leaf}"))
    };
    let qw = get(graph, "q.w")?;
    let qb = get(graph, "q.b")?;
    let kw = get(graph, "k.w")?;
    let kb = get(graph, "k.b")?;
    let vw = get(graph, "v.w")?;
    let vb = get(graph, "v.b")?;
    let ow = get(graph, "out.w")?;
    let ob = get(graph, "out.b")?;

    let q = graph.linear(query, qw, qb)?;
    let k = graph.linear(kv, kw, kb)?;
    let v = graph.linear(kv, vw, vb)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for m in 0..heads {
        let qm = graph.slice_cols(q, m * dh, dh)?;
        let km = graph.slice_cols(k, m * dh, dh)?;
        let vm = graph.slice_cols(v, m * dh, dh)?;
        let kt = graph.transpose(km)?;
        let scores = graph.matmul(qm, kt)?;
        let scores = graph.scale(scores, scale);
        let attn = graph.softmax(scores, 1)?;
        let ctx = graph.matmul(attn, vm)?;
        outs.push(ctx);
    }
    let concat = graph.concat_cols(&outs)?;
    let out = graph.linear(concat, ow, ob)?;
    Ok(graph.dropout(out, dropout))
}

/// Post-norm transformer layer with dense attention; used by the
/// non-deformable recurrence and the temporal layer of the two-stage
/// ablation.
fn dense_layer(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    prefix: &str,
    cfg: &RecurrentConfig,
    query: NodeId,
    kv: NodeId,
) -> Result<NodeId> {
    let attn = dense_attn(
        graph,
        registry,
        &format!("{prefix}.attn"),
        cfg.attn.heads,
        cfg.attn.dropout,
        query,
        kv,
    )?;
    post_norm_block(graph, registry, prefix, cfg.dropout, query, attn)
}

/// Recurrence over per-frame token maps: the first query is frame 1 plus
/// the learnable init, afterwards each output queries the next frame.
/// Returns all L per-iteration outputs.
pub fn recurrent_dte_forward(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    cfg: &RecurrentConfig,
    features: &[NodeId],
    grid: (usize, usize),
) -> Result<Vec<NodeId>> {
    variant_forward(graph, registry, cfg, features, grid)
}

/// Forward for whichever variant is configured. `features` holds one
/// [n, D] node per frame, earliest first.
pub fn variant_forward(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    cfg: &RecurrentConfig,
    features: &[NodeId],
    grid: (usize, usize),
) -> Result<Vec<NodeId>> {
    if features.is_empty() {
        return Err(Error::Input("empty frame sequence".into()));
    }
    let n = grid.0 * grid.1;
    let d = cfg.dim();
    for &f in features {
        if graph.value(f).shape() != [n, d] {
            return Err(Error::shape(
                "variant_forward",
                format!("frame features {:?} vs [{n}, {d}]", graph.value(f).shape()),
            ));
        }
    }
    match cfg.variant {
        Variant::RecurrentDte => {
            let delta = graph.param(registry, PARAM_DELTA)?;
            let mut outs = Vec::with_capacity(features.len());
            let q1 = graph.add(features[0], delta)?;
            let mut hidden = dte_layer(graph, registry, cfg, q1, features[0], grid)?;
            outs.push(hidden);
            for &f in &features[1..] {
                hidden = dte_layer(graph, registry, cfg, hidden, f, grid)?;
                outs.push(hidden);
            }
            Ok(outs)
        }
        Variant::DteOnly => features
            .iter()
            .map(|&f| dte_layer(graph, registry, cfg, f, f, grid))
            .collect(),
        Variant::RecurrentTe => {
            let delta = graph.param(registry, PARAM_DELTA)?;
            let mut outs = Vec::with_capacity(features.len());
            let q1 = graph.add(features[0], delta)?;
            let mut hidden = dense_layer(graph, registry, "te", cfg, q1, features[0])?;
            outs.push(hidden);
            for &f in &features[1..] {
                hidden = dense_layer(graph, registry, "te", cfg, hidden, f)?;
                outs.push(hidden);
            }
            Ok(outs)
        }
        Variant::DtePlusTt => {
            let per_frame: Vec<NodeId> = features
                .iter()
                .map(|&f| dte_layer(graph, registry, cfg, f, f, grid))
                .collect::<Result<_>>()?;
            let l = per_frame.len();
            let stacked = graph.stack_rows(&per_frame)?;
            let joint = graph.reshape(stacked, &[l * n, d])?;
            let tt = dense_layer(graph, registry, "tt", cfg, joint, joint)?;
            (0..l).map(|t| graph.slice_rows(tt, t * n, n)).collect()
        }
    }
}

// ── Streaming inference ──────────────────────────────────────────────

/// Carry-over state between streaming steps: the previous iteration's
/// output and the 1-based iteration index.
#[derive(Clone, Debug)]
pub struct RecurrentState {
    pub hidden: Tensor,
    pub t: usize,
}

/// Frame-at-a-time inference for the recurrent deformable variant.
/// Holds one hidden map between steps; over a full sequence the outputs
/// are bit-identical to the batch forward.
pub struct StreamingSession<'a> {
    registry: &'a ParameterRegistry,
    cfg: RecurrentConfig,
    grid: (usize, usize),
    precision: Precision,
    state: Option<RecurrentState>,
    peak_retained: usize,
}

impl<'a> StreamingSession<'a> {
    pub fn new(
        registry: &'a ParameterRegistry,
        cfg: RecurrentConfig,
        grid: (usize, usize),
        precision: Precision,
    ) -> Result<Self> {
        if cfg.variant != Variant::RecurrentDte {
            return Err(Error::Config(format!(
                "streaming inference requires the recurrent deformable variant, got {}",
                cfg.variant.name()
            )));
        }
        Ok(StreamingSession {
            registry,
            cfg,
            grid,
            precision,
            state: None,
            peak_retained: 0,
        })
    }

    /// One recurrence step on the next frame's token features.
    pub fn step(&mut self, frame: &Tensor) -> Result<Tensor> {
        let n = self.grid.0 * self.grid.1;
        let d = self.cfg.dim();
        if frame.shape() != [n, d] {
            return Err(Error::shape(
                "streaming step",
                format!("frame {:?} vs [{n}, {d}]", frame.shape()),
            ));
        }
        if let Some(state) = &self.state {
            if state.hidden.shape() != frame.shape() {
                return Err(Error::shape(
                    "streaming step",
                    format!(
                        "state {:?} vs frame {:?}",
                        state.hidden.shape(),
                        frame.shape()
                    ),
                ));
            }
        }
        // retained activations: the incoming frame plus the hidden state
        let retained =
            frame.numel() + self.state.as_ref().map_or(0, |s| s.hidden.numel());
        self.peak_retained = self.peak_retained.max(retained);

        let mut graph = Graph::new(self.precision);
        let f = graph.constant(frame.clone());
        let out = match &self.state {
            None => {
                let delta = graph.param(self.registry, PARAM_DELTA)?;
                let q1 = graph.add(f, delta)?;
                dte_layer(&mut graph, self.registry, &self.cfg, q1, f, self.grid)?
            }
            Some(state) => {
                let q = graph.constant(state.hidden.clone());
                dte_layer(&mut graph, self.registry, &self.cfg, q, f, self.grid)?
            }
        };
        let hidden = graph.value(out).clone();
        let t = self.state.as_ref().map_or(1, |s| s.t + 1);
        self.state = Some(RecurrentState {
            hidden: hidden.clone(),
            t,
        });
        Ok(hidden)
    }

    pub fn state(&self) -> Option<&RecurrentState> {
        self.state.as_ref()
    }

    /// Max elements retained across steps (frame + hidden); 2 n D once the
    /// recurrence is running, independent of sequence length.
    pub fn peak_retained_elements(&self) -> usize {
        self.peak_retained
    }
}
