//! Sequence descriptor construction: temporal generalized-mean pooling,
//! VLAD aggregation, and PCA reduction.
//!
//! Per-iteration encoder outputs are stacked to [L, n, D] and collapsed
//! over the temporal axis by GeM pooling with a learnable exponent
//! (positivity kept by storing log p). Inputs are clamped to a small
//! epsilon before the power, the standard resolution for signed inputs.
//! The pooled n x D tokens are soft-assigned to C cluster centers;
//! per-cluster residual sums are intra-normalized row by row, flattened,
//! and globally L2-normalized. Both stages ignore the sequence length L.
//!
//! PCA is fit on database descriptors only, mirroring deployment where
//! queries are unseen.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParameterRegistry;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Clamp floor applied before the GeM power.
pub const GEM_CLAMP_EPS: f64 = 1e-6;
/// Epsilon under the square roots of all descriptor normalizations; keeps
/// the all-zero residual case finite (it stays exactly zero).
pub const NORM_GUARD: f64 = 1e-12;
/// NetVLAD-style assignment sharpness used when initializing from centers.
pub const VLAD_INIT_ALPHA: f64 = 1.0;

pub const PARAM_GEM_LOG_P: &str = "gem.log_p";
pub const PARAM_VLAD_CENTERS: &str = "vlad.centers";
pub const PARAM_VLAD_ASSIGN_W: &str = "vlad.assign.w";
pub const PARAM_VLAD_ASSIGN_B: &str = "vlad.assign.b";

pub fn init_gem(registry: &mut ParameterRegistry, p_init: f64) -> Result<()> {
    if p_init <= 0.0 {
        return Err(Error::Config(format!("gem.p_init must be > 0, got {p_init}")));
    }
    registry.insert(PARAM_GEM_LOG_P, Tensor::scalar(p_init.ln()))
}

/// Register VLAD parameters from given centers: assignment weights
/// 2*alpha*centers, biases -alpha*|center|^2, so assignment strength
/// follows distance to each center.
pub fn init_vlad_from_centers(
    registry: &mut ParameterRegistry,
    centers: Tensor,
    alpha: f64,
) -> Result<()> {
    let (c, d) = (centers.shape()[0], centers.shape()[1]);
    let mut w = Tensor::zeros(&[c, d]);
    let mut b = Tensor::zeros(&[c]);
    for ci in 0..c {
        let mut sq = 0.0;
        for e in 0..d {
            let v = centers.at2(ci, e);
            w.set2(ci, e, 2.0 * alpha * v);
            sq += v * v;
        }
        b.data_mut()[ci] = -alpha * sq;
    }
    registry.insert(PARAM_VLAD_CENTERS, centers)?;
    registry.insert(PARAM_VLAD_ASSIGN_W, w)?;
    registry.insert(PARAM_VLAD_ASSIGN_B, b)?;
    Ok(())
}

/// Random mild VLAD parameters (tests and gradient checks).
pub fn init_vlad_random(
    registry: &mut ParameterRegistry,
    clusters: usize,
    dim: usize,
    rng: &mut StreamRng,
) -> Result<()> {
    let mut centers = Tensor::zeros(&[clusters, dim]);
    rng.fill_normal(centers.data_mut(), 0.5);
    let mut w = Tensor::zeros(&[clusters, dim]);
    rng.fill_normal(w.data_mut(), 0.5);
    let mut b = Tensor::zeros(&[clusters]);
    rng.fill_normal(b.data_mut(), 0.1);
    registry.insert(PARAM_VLAD_CENTERS, centers)?;
    registry.insert(PARAM_VLAD_ASSIGN_W, w)?;
    registry.insert(PARAM_VLAD_ASSIGN_B, b)?;
    Ok(())
}

/// Lloyd's k-means with deterministic seeding; used to place VLAD centers
/// on a sample of training tokens.
pub fn kmeans(points: &Tensor, clusters: usize, iters: usize, rng: &mut StreamRng) -> Tensor {
    let (n, d) = (points.shape()[0], points.shape()[1]);
    let mut centers = Tensor::zeros(&[clusters, d]);
    for c in 0..clusters {
        let pick = rng.gen_range_usize(n);
        for e in 0..d {
            centers.set2(c, e, points.at2(pick, e));
        }
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut best = (f64::INFINITY, 0usize);
            for c in 0..clusters {
                let mut dist = 0.0;
                for e in 0..d {
                    let diff = points.at2(i, e) - centers.at2(c, e);
                    dist += diff * diff;
                }
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            *a = best.1;
        }
        for c in 0..clusters {
            let members: Vec<usize> = (0..n).filter(|&i| assign[i] == c).collect();
            if members.is_empty() {
                let pick = rng.gen_range_usize(n);
                for e in 0..d {
                    centers.set2(c, e, points.at2(pick, e));
                }
                continue;
            }
            for e in 0..d {
                let mean =
                    members.iter().map(|&i| points.at2(i, e)).sum::<f64>() / members.len() as f64;
                centers.set2(c, e, mean);
            }
        }
    }
    centers
}

/// GeM pooling over the leading (temporal) axis: [L, n, D] -> [n, D] with
/// out = ((1/L) sum_t clamp(x_t, eps)^p)^(1/p), p = exp(log_p).
pub fn seq_gem(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    stack: NodeId,
) -> Result<NodeId> {
    let s = graph.value(stack).shape().to_vec();
    if s.len() != 3 {
        return Err(Error::shape("seq_gem", format!("want [L, n, D], got {s:?}")));
    }
    let l = s[0];
    let log_p = graph.param(registry, PARAM_GEM_LOG_P)?;
    let p = graph.exp(log_p);
    let clamped = graph.clamp_min(stack, GEM_CLAMP_EPS);
    let powered = graph.pow_pair(clamped, p)?;
    let summed = graph.sum_axis(powered, 0)?;
    let mean = graph.scale(summed, 1.0 / l as f64);
    let one = graph.constant(Tensor::scalar(1.0));
    let inv_p = graph.div(one, p)?;
    graph.pow_pair(mean, inv_p)
}

/// Descriptor nodes produced by VLAD aggregation.
pub struct DescriptorNodes {
    /// Intra-normalized residual matrix, [C, D].
    pub matrix: NodeId,
    /// Flattened, globally L2-normalized descriptor, [C*D].
    pub flat: NodeId,
}

/// Soft-assignment residual aggregation of [n, D] tokens into a [C, D]
/// matrix, then intra-normalization and global L2 normalization.
pub fn seq_vlad(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    tokens: NodeId,
) -> Result<DescriptorNodes> {
    let s = graph.value(tokens).shape().to_vec();
    if s.len() != 2 {
        return Err(Error::shape("seq_vlad", format!("want [n, D], got {s:?}")));
    }
    let d = s[1];
    let centers = graph.param(registry, PARAM_VLAD_CENTERS)?;
    let assign_w = graph.param(registry, PARAM_VLAD_ASSIGN_W)?;
    let assign_b = graph.param(registry, PARAM_VLAD_ASSIGN_B)?;
    let c = graph.value(centers).shape()[0];

    let wt = graph.transpose(assign_w)?;
    let logits = graph.matmul(tokens, wt)?;
    let b1 = graph.reshape(assign_b, &[1, c])?;
    let bb = graph.broadcast(b1, &[s[0], c])?;
    let logits = graph.add(logits, bb)?;
    let assign = graph.softmax(logits, 1)?; // [n, C]

    let at = graph.transpose(assign)?; // [C, n]
    let weighted = graph.matmul(at, tokens)?; // [C, D]
    let mass = graph.sum_axis(assign, 0)?; // [C]
    let mass1 = graph.reshape(mass, &[c, 1])?;
    let massb = graph.broadcast(mass1, &[c, d])?;
    let shift = graph.mul(massb, centers)?;
    let residual = graph.sub(weighted, shift)?;

    let intra = graph.l2_normalize_rows(residual, NORM_GUARD)?;
    let flat = graph.reshape(intra, &[c * d])?;
    let flat = graph.l2_normalize_all(flat, NORM_GUARD)?;
    Ok(DescriptorNodes {
        matrix: intra,
        flat,
    })
}

/// Stack per-iteration outputs, pool over time, aggregate into the final
/// descriptor. Shape-stable for every L >= 1.
pub fn aggregate(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    features: &[NodeId],
) -> Result<DescriptorNodes> {
    if features.is_empty() {
        return Err(Error::Input("aggregate over empty feature list".into()));
    }
    let stack = graph.stack_rows(features)?;
    let pooled = seq_gem(graph, registry, stack)?;
    seq_vlad(graph, registry, pooled)
}

// ── PCA ──────────────────────────────────────────────────────────────

/// Mean-centered principal subspace with orthonormal rows.
#[derive(Clone, Debug)]
pub struct PcaProjection {
    pub mean: Tensor,
    pub basis: Tensor,
}

impl PcaProjection {
    pub fn reduced_dim(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.basis.shape()[1]
    }

    /// The isometric map basis * (x - mean), no renormalization.
    pub fn project(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.input_dim();
        if x.shape() != [d] {
            return Err(Error::shape("pca project", format!("{:?} vs [{d}]", x.shape())));
        }
        let k = self.reduced_dim();
        let mut out = vec![0.0; k];
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for e in 0..d {
                s += self.basis.at2(r, e) * (x.data()[e] - self.mean.data()[e]);
            }
            *o = s;
        }
        Tensor::new(vec![k], out)
    }

    /// Projection followed by L2 renormalization of the reduced descriptor.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut z = self.project(x)?;
        let norm = (z.squared_l2() + NORM_GUARD).sqrt();
        for v in z.data_mut() {
            *v /= norm;
        }
        Ok(z)
    }
}

/// Fit the top-k principal subspace of row-major samples X [N, d].
pub fn pca_fit(x: &Tensor, k: usize) -> Result<PcaProjection> {
    let s = x.shape();
    if s.len() != 2 {
        return Err(Error::shape("pca_fit", format!("want [N, d], got {s:?}")));
    }
    let (n, d) = (s[0], s[1]);
    if k >= n.min(d) + 1 || k == 0 || k > d || n <= k {
        return Err(Error::Config(format!(
            "pca dim k={k} invalid for {n} samples of dim {d} (need 0 < k <= d and N > k)"
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for e in 0..d {
            mean[e] += x.at2(i, e) / n as f64;
        }
    }
    // covariance of centered data, (N-1) normalization
    let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
    for i in 0..n {
        for a in 0..d {
            let xa = x.at2(i, a) - mean[a];
            for b in a..d {
                let xb = x.at2(i, b) - mean[b];
                cov[(a, b)] += xa * xb / (n - 1) as f64;
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .partial_cmp(&eig.eigenvalues[i])
            .unwrap()
            .then(i.cmp(&j))
    });
    let mut basis = Tensor::zeros(&[k, d]);
    for (r, &col) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(col);
        // deterministic sign: largest-magnitude component positive
        let mut lead = 0;
        for e in 1..d {
            if v[e].abs() > v[lead].abs() {
                lead = e;
            }
        }
        let sign = if v[lead] < 0.0 { -1.0 } else { 1.0 };
        for e in 0..d {
            basis.set2(r, e, sign * v[e]);
        }
    }
    Ok(PcaProjection {
        mean: Tensor::new(vec![d], mean)?,
        basis,
    })
}

/// Fraction of total variance captured by the fitted subspace on data X.
pub fn captured_variance(x: &Tensor, proj: &PcaProjection) -> f64 {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut total = 0.0;
    for i in 0..n {
        for e in 0..d {
            let c = x.at2(i, e) - proj.mean.data()[e];
            total += c * c;
        }
    }
    let mut kept = 0.0;
    for i in 0..n {
        let row = Tensor::new(
            vec![d],
            (0..d).map(|e| x.at2(i, e)).collect::<Vec<f64>>(),
        )
        .unwrap();
        kept += proj.project(&row).unwrap().squared_l2();
    }
    kept / total
}
