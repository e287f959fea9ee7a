//! Brute-force scalar reference implementations.
//!
//! Everything here is written as explicit loops with no shared code with
//! the graph ops, so the test suites can check the real implementations
//! against an independent route. Nothing in this module is used by any
//! production path.

use crate::attention::{DeformAttnConfig, ReferenceGrid};
use crate::params::ParameterRegistry;
use crate::tensor::Tensor;

/// Scalar bilinear interpolation of all channels at one normalized
/// location; token (i, j) of an h x w grid sits at ((j+0.5)/w, (i+0.5)/h),
/// out-of-bounds neighbors contribute zero.
pub fn bilinear_sample_oracle(
    feat: &Tensor,
    grid: (usize, usize),
    x: f64,
    y: f64,
) -> Vec<f64> {
    let (h, w) = grid;
    let d = feat.shape()[1];
    let gx = x * w as f64 - 0.5;
    let gy = y * h as f64 - 0.5;
    let x0 = gx.floor() as i64;
    let y0 = gy.floor() as i64;
    let ax = gx - gx.floor();
    let ay = gy - gy.floor();
    let mut out = vec![0.0; d];
    for (yy, xx, wgt) in [
        (y0, x0, (1.0 - ay) * (1.0 - ax)),
        (y0, x0 + 1, (1.0 - ay) * ax),
        (y0 + 1, x0, ay * (1.0 - ax)),
        (y0 + 1, x0 + 1, ay * ax),
    ] {
        if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
            let row = (yy as usize * w + xx as usize) * d;
            for c in 0..d {
                out[c] += wgt * feat.data()[row + c];
            }
        }
    }
    out
}

/// Fully scalar deformable attention: explicit loops over queries, heads,
/// points, and bilinear neighbors. Dropout-free (eval semantics).
pub fn deform_attn_oracle(
    registry: &ParameterRegistry,
    prefix: &str,
    cfg: &DeformAttnConfig,
    query: &Tensor,
    kv: &Tensor,
    grid: (usize, usize),
) -> Tensor {
    let (h, w) = grid;
    let n = h * w;
    let d = cfg.dim;
    let m_heads = cfg.heads;
    let kt = cfg.k_total(1);
    let dh = d / m_heads;
    let get = |leaf: &str| registry.get(&format!("{prefix}.{leaf}")).unwrap();
    let (vw, vb) = (get("value.w"), get("value.b"));
    let (ow, ob) = (get("offset.w"), get("offset.b"));
    let (ww, wb) = (get("weight.w"), get("weight.b"));
    let (uw, ub) = (get("out.w"), get("out.b"));
    let refs = ReferenceGrid::uniform(grid);

    // value projection of kv
    let mut value = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..d {
            let mut s = vb.data()[j];
            for e in 0..d {
                s += kv.at2(i, e) * vw.at2(e, j);
            }
            value.set2(i, j, s);
        }
    }

    let mut concat = Tensor::zeros(&[n, d]);
    for q in 0..n {
        for m in 0..m_heads {
            // softmax weights over the head's Kt points
            let mut logits = vec![0.0; kt];
            for (k, l) in logits.iter_mut().enumerate() {
                let col = m * kt + k;
                let mut s = wb.data()[col];
                for e in 0..d {
                    s += query.at2(q, e) * ww.at2(e, col);
                }
                *l = s;
            }
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let attn: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();

            for (k, a) in attn.iter().enumerate() {
                let col = (m * kt + k) * 2;
                let mut dx = ob.data()[col];
                let mut dy = ob.data()[col + 1];
                for e in 0..d {
                    dx += query.at2(q, e) * ow.at2(e, col);
                    dy += query.at2(q, e) * ow.at2(e, col + 1);
                }
                let x = refs.points.at2(q, 0) + dx / w as f64;
                let y = refs.points.at2(q, 1) + dy / h as f64;
                let sampled = bilinear_sample_oracle(&value, grid, x, y);
                for c in 0..dh {
                    let v = concat.at2(q, m * dh + c) + a * sampled[m * dh + c];
                    concat.set2(q, m * dh + c, v);
                }
            }
        }
    }

    let mut out = Tensor::zeros(&[n, d]);
    for q in 0..n {
        for j in 0..d {
            let mut s = ub.data()[j];
            for e in 0..d {
                s += concat.at2(q, e) * uw.at2(e, j);
            }
            out.set2(q, j, s);
        }
    }
    out
}

/// Scalar layer norm over the last axis of a 2D tensor.
pub fn layer_norm_oracle(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let (rows, d) = (x.shape()[0], x.shape()[1]);
    let mut out = Tensor::zeros(&[rows, d]);
    for r in 0..rows {
        let row: Vec<f64> = (0..d).map(|j| x.at2(r, j)).collect();
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for j in 0..d {
            out.set2(r, j, (row[j] - mu) * inv * gamma[j] + beta[j]);
        }
    }
    out
}

pub fn gelu_oracle(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

/// Scalar composition of the already-verified sub-oracles into one
/// post-norm deformable encoder layer (attention, add & norm, FFN,
/// add & norm), using the `dte.*` parameter paths.
pub fn dte_layer_oracle(
    registry: &ParameterRegistry,
    attn_cfg: &DeformAttnConfig,
    query: &Tensor,
    kv: &Tensor,
    grid: (usize, usize),
) -> Tensor {
    let eps = crate::recurrent::LN_EPS;
    let (n, d) = (query.shape()[0], query.shape()[1]);
    let attn = deform_attn_oracle(registry, "dte.attn", attn_cfg, query, kv, grid);
    let mut res1 = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for j in 0..d {
            res1.set2(i, j, query.at2(i, j) + attn.at2(i, j));
        }
    }
    let get = |p: &str| registry.get(p).unwrap();
    let x1 = layer_norm_oracle(
        &res1,
        get("dte.norm1.gamma").data(),
        get("dte.norm1.beta").data(),
        eps,
    );
    let (w1, b1) = (get("dte.ffn.w1"), get("dte.ffn.b1"));
    let (w2, b2) = (get("dte.ffn.w2"), get("dte.ffn.b2"));
    let hidden = w1.shape()[1];
    let mut res2 = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let mut h = vec![0.0; hidden];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut s = b1.data()[j];
            for e in 0..d {
                s += x1.at2(i, e) * w1.at2(e, j);
            }
            *hj = gelu_oracle(s);
        }
        for j in 0..d {
            let mut s = b2.data()[j];
            for (e, he) in h.iter().enumerate() {
                s += he * w2.at2(e, j);
            }
            res2.set2(i, j, x1.at2(i, j) + s);
        }
    }
    layer_norm_oracle(
        &res2,
        get("dte.norm2.gamma").data(),
        get("dte.norm2.beta").data(),
        eps,
    )
}

/// Generalized-mean pooling over the leading (temporal) axis of [L, n, D]:
/// out[i, d] = ((1/L) sum_t clamp(x[t,i,d], eps)^p)^(1/p).
pub fn seq_gem_oracle(stack: &Tensor, p: f64, eps: f64) -> Tensor {
    let (l, n, d) = (stack.shape()[0], stack.shape()[1], stack.shape()[2]);
    let mut out = Tensor::zeros(&[n, d]);
    for i in 0..n {
        for c in 0..d {
            let mut acc = 0.0;
            for t in 0..l {
                let v = stack.data()[(t * n + i) * d + c].max(eps);
                acc += v.powf(p);
            }
            out.set2(i, c, (acc / l as f64).powf(1.0 / p));
        }
    }
    out
}

/// VLAD with softmax soft-assignment and residual aggregation, then
/// row-wise intra-normalization and global L2 normalization. Returns the
/// normalized C x D matrix and the flattened unit descriptor. `guard` is
/// the epsilon added under the square roots.
pub fn seq_vlad_oracle(
    tokens: &Tensor,
    centers: &Tensor,
    assign_w: &Tensor,
    assign_b: &[f64],
    guard: f64,
) -> (Tensor, Vec<f64>) {
    let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
    let c_num = centers.shape()[0];
    let mut v = Tensor::zeros(&[c_num, d]);
    for i in 0..n {
        let mut logits = vec![0.0; c_num];
        for (c, l) in logits.iter_mut().enumerate() {
            let mut s = assign_b[c];
            for e in 0..d {
                s += assign_w.at2(c, e) * tokens.at2(i, e);
            }
            *l = s;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        for c in 0..c_num {
            let a = (logits[c] - mx).exp() / z;
            for e in 0..d {
                let val = v.at2(c, e) + a * (tokens.at2(i, e) - centers.at2(c, e));
                v.set2(c, e, val);
            }
        }
    }
    // intra-normalization per row, with guard
    for c in 0..c_num {
        let norm: f64 = (0..d).map(|e| v.at2(c, e) * v.at2(c, e)).sum::<f64>();
        let inv = 1.0 / (norm + guard).sqrt();
        for e in 0..d {
            let val = v.at2(c, e) * inv;
            v.set2(c, e, val);
        }
    }
    // global normalization of the flattened descriptor
    let flat: Vec<f64> = v.data().to_vec();
    let norm: f64 = flat.iter().map(|x| x * x).sum::<f64>();
    let inv = 1.0 / (norm + guard).sqrt();
    let flat = flat.into_iter().map(|x| x * inv).collect();
    (v, flat)
}

/// Hinge triplet loss over one positive and a list of negatives:
/// sum_j max(0, |q-p|^2 - |q-n_j|^2 + margin).
pub fn triplet_loss_oracle(dq: &[f64], dp: &[f64], dns: &[Vec<f64>], margin: f64) -> f64 {
    let dist2 = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };
    let pos = dist2(dq, dp);
    dns.iter()
        .map(|dn| (pos - dist2(dq, dn) + margin).max(0.0))
        .sum()
}

/// Independent scalar Adam: replays a fixed gradient trace on one scalar
/// parameter and returns the parameter value after each step.
pub fn adam_trace_oracle(
    theta0: f64,
    grads: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Vec<f64> {
    let mut theta = theta0;
    let mut m = 0.0;
    let mut v = 0.0;
    let mut out = Vec::with_capacity(grads.len());
    for (t, g) in grads.iter().enumerate() {
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let mhat = m / (1.0 - beta1.powi(t as i32 + 1));
        let vhat = v / (1.0 - beta2.powi(t as i32 + 1));
        theta -= lr * mhat / (vhat.sqrt() + eps);
        out.push(theta);
    }
    out
}

/// Cyclic-Jacobi eigendecomposition of a symmetric matrix, returning
/// eigenvalues in descending order with matching eigenvectors as rows.
pub fn symmetric_eigen_oracle(mat: &Tensor) -> (Vec<f64>, Tensor) {
    let n = mat.shape()[0];
    assert_eq!(mat.shape(), &[n, n]);
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| mat.at2(i, j)).collect())
        .collect();
    let mut vecs: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[i][j] * a[i][j];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = vecs[k][p];
                    let vkq = vecs[k][q];
                    vecs[k][p] = c * vkp - s * vkq;
                    vecs[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| a[i][i]).collect();
    let mut rows = Tensor::zeros(&[n, n]);
    for (r, &i) in order.iter().enumerate() {
        for k in 0..n {
            rows.set2(r, k, vecs[k][i]);
        }
    }
    (vals, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn jacobi_recovers_known_spectrum() {
        // diag(5, 2, 1) rotated is still {5, 2, 1}
        let m = Tensor::new(
            vec![3, 3],
            vec![3.5, 1.5, 0.0, 1.5, 3.5, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let (vals, _) = symmetric_eigen_oracle(&m);
        assert!((vals[0] - 5.0).abs() < 1e-10);
        assert!((vals[1] - 2.0).abs() < 1e-10);
        assert!((vals[2] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn jacobi_eigenvectors_diagonalize() {
        let mut rng = StreamRng::new(4, "oracle");
        let d = 5;
        let mut m = Tensor::zeros(&[d, d]);
        for i in 0..d {
            for j in i..d {
                let v = rng.normal();
                m.set2(i, j, v);
                m.set2(j, i, v);
            }
        }
        let (vals, vecs) = symmetric_eigen_oracle(&m);
        // check M r_i = lambda_i r_i for each eigenpair
        for i in 0..d {
            for k in 0..d {
                let mut s = 0.0;
                for e in 0..d {
                    s += m.at2(k, e) * vecs.at2(i, e);
                }
                assert!((s - vals[i] * vecs.at2(i, k)).abs() < 1e-9);
            }
        }
    }
}
