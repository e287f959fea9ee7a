//! Multi-head deformable attention over a single feature level.
//!
//! Every query token owns a reference point on the uniform token-grid
//! lattice. A linear head predicts, per head and sampling point, a 2D
//! offset in cell units; features are bilinearly sampled at reference +
//! offset and mixed with softmax weights predicted by a second linear
//! head. Out-of-bounds samples read zero. The cost is linear in the token
//! count, unlike dense attention's quadratic growth.
//!
//! Conventions fixed here (and mirrored by the scalar oracles in
//! [`crate::oracles`]): offsets are scaled by the cell size before use,
//! the weight softmax runs jointly over all sampled points of a head, and
//! the sampling grid treats token (i, j) as living at normalized
//! ((j+0.5)/w, (i+0.5)/h).

use std::fs;
use std::path::Path;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParameterRegistry;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeformAttnConfig {
    /// Attention heads M; must divide `dim`.
    pub heads: usize,
    /// Sampling points K per head and level.
    pub points: usize,
    /// Configured level count. With a single input feature map only one
    /// level is ever sampled, so the effective K_total is `points`.
    pub levels: usize,
    /// Embedding width D.
    pub dim: usize,
    /// Dropout on the attention output in training mode.
    pub dropout: f64,
}

impl DeformAttnConfig {
    pub fn new(heads: usize, points: usize, levels: usize, dim: usize, dropout: f64) -> Result<Self> {
        if heads == 0 || points == 0 || levels == 0 || dim == 0 {
            return Err(Error::Config("attention dims must be positive".into()));
        }
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "dim {dim} not divisible by heads {heads}"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(DeformAttnConfig {
            heads,
            points,
            levels,
            dim,
            dropout,
        })
    }

    /// Total sampled points per (query, head) given the number of input
    /// feature levels actually present.
    pub fn k_total(&self, input_levels: usize) -> usize {
        self.points * input_levels.min(self.levels)
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// The uniform lattice of normalized reference points for an h x w token
/// grid, row-major: point (i, j) = ((j+0.5)/w, (i+0.5)/h).
#[derive(Clone, Debug)]
pub struct ReferenceGrid {
    pub points: Tensor,
    pub grid: (usize, usize),
}

impl ReferenceGrid {
    pub fn uniform(grid: (usize, usize)) -> Self {
        let (h, w) = grid;
        let mut data = Vec::with_capacity(h * w * 2);
        for i in 0..h {
            for j in 0..w {
                data.push((j as f64 + 0.5) / w as f64);
                data.push((i as f64 + 0.5) / h as f64);
            }
        }
        ReferenceGrid {
            points: Tensor::new(vec![h * w, 2], data).unwrap(),
            grid,
        }
    }

    pub fn token_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

/// Sampled locations and normalized weights of one forward pass,
/// per head: locations[m] is [n*K_total, 2], weights[m] is [n, K_total].
#[derive(Clone, Debug)]
pub struct SamplingProbe {
    pub locations: Vec<Tensor>,
    pub weights: Vec<Tensor>,
}

fn key(prefix: &str, leaf: &str) -> String {
    format!("{prefix}.{leaf}")
}

/// Register the four linear maps of one deformable attention block.
///
/// Offset head: zero weights, biases placing the initial samples on a ring
/// of radius one cell around the reference point at distinct angles, so the
/// samples start spread out instead of collapsed onto one location. Weight
/// head: zeros, i.e. uniform attention after softmax.
pub fn init_params(
    registry: &mut ParameterRegistry,
    prefix: &str,
    cfg: &DeformAttnConfig,
    rng: &mut StreamRng,
) -> Result<()> {
    let d = cfg.dim;
    let kt = cfg.k_total(1);
    let bound = (6.0 / (2 * d) as f64).sqrt();

    let mut value_w = Tensor::zeros(&[d, d]);
    rng.fill_uniform(value_w.data_mut(), -bound, bound);
    registry.insert(&key(prefix, "value.w"), value_w)?;
    registry.insert(&key(prefix, "value.b"), Tensor::zeros(&[d]))?;

    registry.insert(&key(prefix, "offset.w"), Tensor::zeros(&[d, cfg.heads * kt * 2]))?;
    let mut offset_b = Tensor::zeros(&[cfg.heads * kt * 2]);
    let total = (cfg.heads * kt) as f64;
    for m in 0..cfg.heads {
        for k in 0..kt {
            let angle = 2.0 * std::f64::consts::PI * (m * kt + k) as f64 / total;
            offset_b.data_mut()[(m * kt + k) * 2] = angle.cos();
            offset_b.data_mut()[(m * kt + k) * 2 + 1] = angle.sin();
        }
    }
    registry.insert(&key(prefix, "offset.b"), offset_b)?;

    registry.insert(&key(prefix, "weight.w"), Tensor::zeros(&[d, cfg.heads * kt]))?;
    registry.insert(&key(prefix, "weight.b"), Tensor::zeros(&[cfg.heads * kt]))?;

    let mut out_w = Tensor::zeros(&[d, d]);
    rng.fill_uniform(out_w.data_mut(), -bound, bound);
    registry.insert(&key(prefix, "out.w"), out_w)?;
    registry.insert(&key(prefix, "out.b"), Tensor::zeros(&[d]))?;
    Ok(())
}

pub fn param_paths(prefix: &str) -> Vec<String> {
    ["value.w", "value.b", "offset.w", "offset.b", "weight.w", "weight.b", "out.w", "out.b"]
        .iter()
        .map(|leaf| key(prefix, leaf))
        .collect()
}

/// Deformable attention forward. `query` and `kv` are [n, D] nodes over the
/// same grid; returns the [n, D] output node.
pub fn deform_attn(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    prefix: &str,
    cfg: &DeformAttnConfig,
    query: NodeId,
    kv: NodeId,
    grid: (usize, usize),
) -> Result<NodeId> {
    deform_attn_inner(graph, registry, prefix, cfg, query, kv, grid, false).map(|(o, _)| o)
}

/// Same forward pass, additionally materializing sampled locations and
/// attention weights for inspection dumps.
pub fn deform_attn_probed(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    prefix: &str,
    cfg: &DeformAttnConfig,
    query: NodeId,
    kv: NodeId,
    grid: (usize, usize),
) -> Result<(NodeId, SamplingProbe)> {
    let (out, probe) = deform_attn_inner(graph, registry, prefix, cfg, query, kv, grid, true)?;
    Ok((out, probe.expect("probe requested")))
}

#[allow(clippy::too_many_arguments)]
fn deform_attn_inner(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    prefix: &str,
    cfg: &DeformAttnConfig,
    query: NodeId,
    kv: NodeId,
    grid: (usize, usize),
    probed: bool,
) -> Result<(NodeId, Option<SamplingProbe>)> {
    let (h, w) = grid;
    let n = h * w;
    let d = cfg.dim;
    let qs = graph.value(query).shape().to_vec();
    let ks = graph.value(kv).shape().to_vec();
    if qs != [n, d] {
        return Err(Error::shape(
            "deform_attn",
            format!("query {qs:?} vs grid {grid:?} dim {d}"),
        ));
    }
    if ks != [n, d] {
        return Err(Error::shape(
            "deform_attn",
            format!("kv {ks:?} vs grid {grid:?} dim {d}"),
        ));
    }
    let kt = cfg.k_total(1);
    let dh = cfg.head_dim();

    let value_w = graph.param(registry, &key(prefix, "value.w"))?;
    let value_b = graph.param(registry, &key(prefix, "value.b"))?;
    let offset_w = graph.param(registry, &key(prefix, "offset.w"))?;
    let offset_b = graph.param(registry, &key(prefix, "offset.b"))?;
    let weight_w = graph.param(registry, &key(prefix, "weight.w"))?;
    let weight_b = graph.param(registry, &key(prefix, "weight.b"))?;
    let out_w = graph.param(registry, &key(prefix, "out.w"))?;
    let out_b = graph.param(registry, &key(prefix, "out.b"))?;

    let value = graph.linear(kv, value_w, value_b)?;
    let offsets = graph.linear(query, offset_w, offset_b)?; // [n, M*Kt*2], cell units
    let logits = graph.linear(query, weight_w, weight_b)?; // [n, M*Kt]

    // Reference point of query q repeated for each of its Kt samples.
    let refs = ReferenceGrid::uniform(grid);
    let mut ref_rep = Vec::with_capacity(n * kt * 2);
    for q in 0..n {
        for _ in 0..kt {
            ref_rep.push(refs.points.at2(q, 0));
            ref_rep.push(refs.points.at2(q, 1));
        }
    }
    let ref_rep = graph.constant(Tensor::new(vec![n * kt, 2], ref_rep)?);
    let cell = graph.constant(Tensor::new(
        vec![1, 2],
        vec![1.0 / w as f64, 1.0 / h as f64],
    )?);
    let cell_rep = graph.broadcast(cell, &[n * kt, 2])?;

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut probe = probed.then(|| SamplingProbe {
        locations: Vec::new(),
        weights: Vec::new(),
    });
    for m in 0..cfg.heads {
        let off_m = graph.slice_cols(offsets, m * kt * 2, kt * 2)?;
        let off_m = graph.reshape(off_m, &[n * kt, 2])?;
        let off_scaled = graph.mul(off_m, cell_rep)?;
        let locs = graph.add(ref_rep, off_scaled)?;

        let logits_m = graph.slice_cols(logits, m * kt, kt)?;
        let weights = graph.softmax(logits_m, 1)?; // [n, Kt]

        let value_m = graph.slice_cols(value, m * dh, dh)?;
        let sampled = graph.bilinear_gather(value_m, locs, h, w)?; // [n*Kt, dh]
        let sampled = graph.reshape(sampled, &[n, kt, dh])?;
        let w3 = graph.reshape(weights, &[n, kt, 1])?;
        let w3 = graph.broadcast(w3, &[n, kt, dh])?;
        let mixed = graph.mul(sampled, w3)?;
        let head = graph.sum_axis(mixed, 1)?; // [n, dh]
        let head = graph.reshape(head, &[n, dh])?;
        heads.push(head);

        if let Some(p) = probe.as_mut() {
            p.locations.push(graph.value(locs).clone());
            p.weights.push(graph.value(weights).clone());
        }
    }

    let concat = graph.concat_cols(&heads)?;
    let out = graph.linear(concat, out_w, out_b)?;
    let out = graph.dropout(out, cfg.dropout);
    Ok((out, probe))
}

/// Write sampled locations and weights as CSV:
/// `query,head,point,x,y,weight` rows, one per sampled location.
pub fn dump_sampling_csv(probe: &SamplingProbe, path: &Path) -> Result<()> {
    let mut out = String::from("query,head,point,x,y,weight\n");
    for (m, (locs, weights)) in probe.locations.iter().zip(&probe.weights).enumerate() {
        let n = weights.shape()[0];
        let kt = weights.shape()[1];
        for q in 0..n {
            for k in 0..kt {
                let x = locs.at2(q * kt + k, 0);
                let y = locs.at2(q * kt + k, 1);
                out.push_str(&format!(
                    "{q},{m},{k},{x:.9},{y:.9},{:.9}\n",
                    weights.at2(q, k)
                ));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

// ── Analytic cost model ──────────────────────────────────────────────

/// FLOPs of one deformable attention forward over n tokens, counting a
/// multiply-add as 2 flops:
///
/// ```text
///   value projection   2 n D^2
///   output projection  2 n D^2
///   offset+weight head n * 2 D (M Kt 3)     (two linears, D -> M*Kt*3 total)
///   sampling+mixing    n M Kt (4*(D/M)*2 + 2*(D/M))
/// ```
pub fn flops_deform_attn(n: usize, cfg: &DeformAttnConfig) -> u64 {
    let (n, d) = (n as u64, cfg.dim as u64);
    let m = cfg.heads as u64;
    let kt = cfg.k_total(1) as u64;
    let dh = d / m;
    4 * n * d * d + n * 2 * d * (m * kt * 3) + n * m * kt * (4 * dh * 2 + 2 * dh)
}

/// FLOPs of standard dense multi-head self-attention over n tokens:
/// QKV + output projections 8nD^2, score and value application 4n^2 D,
/// softmax counted as 5 flops per score element.
pub fn flops_dense_attn(n: usize, d: usize, heads: usize) -> u64 {
    let (n, d, m) = (n as u64, d as u64, heads as u64);
    8 * n * d * d + 4 * n * n * d + 5 * m * n * n
}

/// Smallest token count at which dense attention costs strictly more than
/// deformable attention for this config.
pub fn dense_crossover(cfg: &DeformAttnConfig, max_n: usize) -> Option<usize> {
    (1..=max_n).find(|&n| flops_dense_attn(n, cfg.dim, cfg.heads) > flops_deform_attn(n, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Precision};
    use crate::oracles;

    fn cfg(heads: usize, points: usize, dim: usize) -> DeformAttnConfig {
        DeformAttnConfig::new(heads, points, 2, dim, 0.1).unwrap()
    }

    fn init(prefix: &str, c: &DeformAttnConfig, seed: u64) -> ParameterRegistry {
        let mut reg = ParameterRegistry::new();
        let mut rng = StreamRng::new(seed, "params");
        init_params(&mut reg, prefix, c, &mut rng).unwrap();
        reg
    }

    fn randomize(reg: &mut ParameterRegistry, seed: u64, scale: f64) {
        let mut rng = StreamRng::new(seed, "randomize");
        for path in reg.paths() {
            let t = reg.get_mut(&path).unwrap();
            let mut buf = vec![0.0; t.numel()];
            rng.fill_normal(&mut buf, scale);
            t.data_mut().copy_from_slice(&buf);
        }
    }

    fn randomize_linear(reg: &mut ParameterRegistry, prefix: &str, seed: u64) {
        let mut rng = StreamRng::new(seed, "randomize");
        for leaf in ["w", "b"] {
            let t = reg.get_mut(&format!("{prefix}.{leaf}")).unwrap();
            let mut buf = vec![0.0; t.numel()];
            rng.fill_normal(&mut buf, 0.5);
            t.data_mut().copy_from_slice(&buf);
        }
    }

    #[test]
    fn config_validates_divisibility_and_dropout() {
        assert!(DeformAttnConfig::new(3, 4, 2, 32, 0.1).is_err());
        assert!(DeformAttnConfig::new(4, 4, 2, 32, 1.0).is_err());
        assert!(DeformAttnConfig::new(8, 8, 2, 64, 0.1).is_ok());
    }

    #[test]
    fn reference_grid_is_uniform_lattice() {
        let g = ReferenceGrid::uniform((2, 3));
        assert_eq!(g.points.shape(), &[6, 2]);
        // token (i=1, j=2) is row 5: x=(2+0.5)/3, y=(1+0.5)/2
        assert!((g.points.at2(5, 0) - 2.5 / 3.0).abs() < 1e-15);
        assert!((g.points.at2(5, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn paper_shape_config_samples_64_locations_per_query() {
        let c = DeformAttnConfig::new(8, 8, 2, 64, 0.1).unwrap();
        // one input feature level, so 8 heads x 8 points = 64
        assert_eq!(c.heads * c.k_total(1), 64);
    }

    #[test]
    fn degenerate_single_point_attention_is_identity_gather() {
        let c = cfg(1, 1, 3);
        let prefix = "attn";
        let mut reg = init(prefix, &c, 3);
        // zero the offset head entirely (weights already zero; clear ring bias)
        for v in reg.get_mut("attn.offset.b").unwrap().data_mut() {
            *v = 0.0;
        }
        *reg.get_mut("attn.value.w").unwrap() = Tensor::eye(3);
        *reg.get_mut("attn.out.w").unwrap() = Tensor::eye(3);

        let mut rng = StreamRng::new(8, "dataset");
        let mut kv = Tensor::zeros(&[4, 3]);
        rng.fill_normal(kv.data_mut(), 1.0);
        let mut g = Graph::new(Precision::F64);
        let kvn = g.constant(kv.clone());
        let qn = g.constant(Tensor::zeros(&[4, 3]));
        let out = deform_attn(&mut g, &reg, prefix, &c, qn, kvn, (2, 2)).unwrap();
        assert!(g.value(out).max_abs_diff(&kv) < 1e-12);
    }

    #[test]
    fn uniform_weights_over_same_location_match_projected_token() {
        // K=2 points, both sampling the query's own reference point with the
        // weight head zeroed: output = out_w ( value_w kv + value_b ) + out_b.
        let c = cfg(1, 2, 2);
        let prefix = "attn";
        let mut reg = init(prefix, &c, 5);
        for v in reg.get_mut("attn.offset.b").unwrap().data_mut() {
            *v = 0.0;
        }
        randomize_linear(&mut reg, "attn.value", 11);
        randomize_linear(&mut reg, "attn.out", 12);

        let mut rng = StreamRng::new(9, "dataset");
        let mut kv = Tensor::zeros(&[4, 2]);
        rng.fill_normal(kv.data_mut(), 1.0);

        let mut g = Graph::new(Precision::F64);
        let kvn = g.constant(kv);
        let qn = g.constant(Tensor::zeros(&[4, 2]));
        let out = deform_attn(&mut g, &reg, prefix, &c, qn, kvn, (2, 2)).unwrap();

        let vw = g.param(&reg, "attn.value.w").unwrap();
        let vb = g.param(&reg, "attn.value.b").unwrap();
        let ow = g.param(&reg, "attn.out.w").unwrap();
        let ob = g.param(&reg, "attn.out.b").unwrap();
        let v = g.linear(kvn, vw, vb).unwrap();
        let expect = g.linear(v, ow, ob).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(expect)) < 1e-12);
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let c = cfg(1, 2, 2);
        let prefix = "attn";
        let mut reg = init(prefix, &c, 21);
        randomize(&mut reg, 77, 0.4);

        let mut rng = StreamRng::new(13, "dataset");
        let mut q = Tensor::zeros(&[4, 2]);
        let mut kv = Tensor::zeros(&[4, 2]);
        rng.fill_normal(q.data_mut(), 0.8);
        rng.fill_normal(kv.data_mut(), 0.8);

        let mut g = Graph::new(Precision::F64);
        let qn = g.constant(q.clone());
        let kvn = g.constant(kv.clone());
        let out = deform_attn(&mut g, &reg, prefix, &c, qn, kvn, (2, 2)).unwrap();

        let oracle = oracles::deform_attn_oracle(&reg, prefix, &c, &q, &kv, (2, 2));
        assert!(g.value(out).max_abs_diff(&oracle) < 1e-10);
    }

    #[test]
    fn attention_weights_sum_to_one_per_query_and_head() {
        let c = cfg(2, 3, 4);
        let prefix = "attn";
        let mut reg = init(prefix, &c, 31);
        randomize(&mut reg, 32, 0.6);
        let mut rng = StreamRng::new(33, "dataset");
        let mut q = Tensor::zeros(&[9, 4]);
        let mut kv = Tensor::zeros(&[9, 4]);
        rng.fill_normal(q.data_mut(), 1.0);
        rng.fill_normal(kv.data_mut(), 1.0);
        let mut g = Graph::new(Precision::F64);
        let qn = g.constant(q);
        let kvn = g.constant(kv);
        let (_, probe) = deform_attn_probed(&mut g, &reg, prefix, &c, qn, kvn, (3, 3)).unwrap();
        for wm in &probe.weights {
            for q in 0..wm.shape()[0] {
                let s: f64 = (0..wm.shape()[1]).map(|k| wm.at2(q, k)).sum();
                assert!((s - 1.0).abs() < 1e-6);
                for k in 0..wm.shape()[1] {
                    assert!(wm.at2(q, k) >= 0.0);
                }
            }
        }
    }

    #[test]
    fn gradient_flows_through_sampling_locations() {
        let c = cfg(1, 2, 2);
        let prefix = "attn";
        let mut reg = init(prefix, &c, 41);
        randomize(&mut reg, 42, 0.3);
        // pin offset biases mid-cell so finite differences stay away from
        // bilinear cell boundaries
        {
            let b = reg.get_mut("attn.offset.b").unwrap();
            b.data_mut().copy_from_slice(&[0.31, 0.22, -0.27, -0.18]);
        }
        let mut rng = StreamRng::new(43, "dataset");
        let mut q = Tensor::zeros(&[4, 2]);
        let mut kv = Tensor::zeros(&[4, 2]);
        rng.fill_normal(q.data_mut(), 0.3);
        rng.fill_normal(kv.data_mut(), 0.8);

        let rel = grad_check(&mut reg, 1e-5, move |g, reg| {
            let qn = g.constant(q.clone());
            let kvn = g.constant(kv.clone());
            let out = deform_attn(g, reg, "attn", &cfg(1, 2, 2), qn, kvn, (2, 2))?;
            let sq = g.mul(out, out)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(rel < 1e-4, "deform_attn grad check rel err {rel:.3e}");
    }

    #[test]
    fn flops_unit_case_and_linearity() {
        let c = DeformAttnConfig::new(1, 1, 1, 1, 0.0).unwrap();
        // 4nD^2 + 2nD(M Kt 3) + n M Kt (8 Dh + 2 Dh) = 4 + 6 + 10
        assert_eq!(flops_deform_attn(1, &c), 20);
        let c2 = cfg(2, 2, 32);
        assert_eq!(flops_deform_attn(64, &c2), 2 * flops_deform_attn(32, &c2));
    }

    #[test]
    fn dense_crossover_constants_are_stable() {
        // Regression constants computed by sweeping both formulas.
        let small = cfg(2, 2, 32);
        assert_eq!(dense_crossover(&small, 4096), Some(1));
        let paper_shape = DeformAttnConfig::new(8, 8, 2, 32, 0.1).unwrap();
        assert_eq!(dense_crossover(&paper_shape, 4096), Some(65));
        // deformable stays cheaper for every n above the crossover
        for n in [65, 256, 1024, 4096] {
            assert!(flops_deform_attn(n, &paper_shape) < flops_dense_attn(n, 32, 8));
        }
    }
}
