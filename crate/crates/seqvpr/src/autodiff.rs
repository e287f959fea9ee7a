//! Dynamic-tape reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass as a node holding
//! the op, its input ids, and the computed value. `backward` replays the tape
//! in reverse, accumulating adjoints. First-order only; no gradients of
//! gradients.
//!
//! Contracts relied on throughout the crate:
//! - broadcasting is explicit (`broadcast`), never implicit;
//! - node values are immutable once created, only grad buffers mutate;
//! - a graph lives on one logical thread;
//! - `Precision::F32` rounds every op output through f32 (gradient arithmetic
//!   still runs in f64 on the rounded forwards), `Precision::F64` is exact
//!   double precision for oracles and gradient checks;
//! - repeated `backward` calls accumulate: two calls double every grad.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParameterRegistry;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    AddScalar { x: NodeId },
    Broadcast { x: NodeId },
    Reshape { x: NodeId },
    SumAxis { x: NodeId, axis: usize },
    SumAll { x: NodeId },
    Softmax { x: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    PowPair { base: NodeId, expo: NodeId },
    ClampMin { x: NodeId, min: f64 },
    Gelu { x: NodeId },
    Relu { x: NodeId },
    Exp { x: NodeId },
    Sqrt { x: NodeId },
    Dropout { x: NodeId, mask: Vec<f64> },
    BilinearGather { feat: NodeId, locs: NodeId, grid_h: usize, grid_w: usize },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize, len: usize },
    StackRows { parts: Vec<NodeId> },
    SliceRows { x: NodeId, start: usize, len: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    training: bool,
    dropout_rng: Option<StreamRng>,
    param_nodes: Vec<(String, NodeId)>,
    param_cache: BTreeMap<String, NodeId>,
}

impl Graph {
    /// Evaluation-mode graph: dropout is a no-op.
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            training: false,
            dropout_rng: None,
            param_nodes: Vec::new(),
            param_cache: BTreeMap::new(),
        }
    }

    /// Training-mode graph; `rng` drives dropout masks.
    pub fn for_training(precision: Precision, rng: StreamRng) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            training: true,
            dropout_rng: Some(rng),
            param_nodes: Vec::new(),
            param_cache: BTreeMap::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    fn round(&self, mut t: Tensor) -> Tensor {
        if self.precision == Precision::F32 {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        t
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let value = self.round(value);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Data leaf; participates in the graph but never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable leaf without a registry path (tests, probes).
    pub fn variable(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a registry parameter path. Repeated requests for the
    /// same path return the same node, so weight sharing accumulates
    /// naturally in backward.
    pub fn param(&mut self, registry: &ParameterRegistry, path: &str) -> Result<NodeId> {
        if let Some(&id) = self.param_cache.get(path) {
            return Ok(id);
        }
        let t = registry.get(path)?.clone();
        let id = self.push(t, Op::Leaf, true);
        self.param_nodes.push((path.to_string(), id));
        self.param_cache.insert(path.to_string(), id);
        Ok(id)
    }

    /// Accumulated gradients per parameter path after `backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (path, id) in &self.param_nodes {
            if let Some(g) = &self.nodes[*id].grad {
                let entry = out
                    .entry(path.clone())
                    .or_insert_with(|| vec![0.0; g.len()]);
                for (o, v) in entry.iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        out
    }

    // ── Ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for r in 0..k {
                let av = da[i * k + r];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[r * p..(r + 1) * p];
                let orow = &mut out[i * p..(i + 1) * p];
                for j in 0..p {
                    orow[j] += av * brow[j];
                }
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(vec![m, p], out)?, Op::Matmul { a, b }, req))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", format!("{s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose { x }, req))
    }

    fn zip_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let shape = self.value(a).shape().to_vec();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, out)?, op, req))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_elementwise(a, b, "div", |x, y| x / y, Op::Div { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x).clone();
        let out: Vec<f64> = t.data().iter().map(|v| v * c).collect();
        let req = self.requires(x);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Scale { x, c }, req)
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x).clone();
        let out: Vec<f64> = t.data().iter().map(|v| v + c).collect();
        let req = self.requires(x);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::AddScalar { x }, req)
    }

    /// Expand `x` to `target`, aligning trailing dimensions; each source dim
    /// must equal the target dim or be 1.
    pub fn broadcast(&mut self, x: NodeId, target: &[usize]) -> Result<NodeId> {
        let src = self.value(x).shape().to_vec();
        if src.len() > target.len() {
            return Err(Error::shape("broadcast", format!("{src:?} -> {target:?}")));
        }
        let offset = target.len() - src.len();
        for (i, &d) in src.iter().enumerate() {
            if d != 1 && d != target[offset + i] {
                return Err(Error::shape("broadcast", format!("{src:?} -> {target:?}")));
            }
        }
        let numel: usize = target.iter().product();
        let mut out = vec![0.0; numel];
        let data = self.value(x).data();
        for (flat, o) in out.iter_mut().enumerate() {
            *o = data[broadcast_src_index(flat, target, &src, offset)];
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::new(target.to_vec(), out)?, Op::Broadcast { x }, req))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let req = self.requires(x);
        Ok(self.push(t, Op::Reshape { x }, req))
    }

    /// Sum out one axis; the axis disappears from the shape.
    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {s:?}")));
        }
        let (outer, alen, inner) = lanes(&s, axis);
        let mut out_shape: Vec<usize> = s.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..alen {
                for k in 0..inner {
                    out[o * inner + k] += data[(o * alen + i) * inner + k];
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }, req))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let req = self.requires(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, req)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if axis >= s.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {s:?}")));
        }
        let (outer, alen, inner) = lanes(&s, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for k in 0..inner {
                let idx = |i: usize| (o * alen + i) * inner + k;
                let mut mx = f64::NEG_INFINITY;
                for i in 0..alen {
                    mx = mx.max(data[idx(i)]);
                }
                let mut z = 0.0;
                for i in 0..alen {
                    let e = (data[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    z += e;
                }
                for i in 0..alen {
                    out[idx(i)] /= z;
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(Tensor::new(s, out)?, Op::Softmax { x, axis }, req))
    }

    /// Layer normalization over the last axis with affine gamma/beta.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", "rank 0"))?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gamma/beta must be [{d}]"),
            ));
        }
        let rows = self.value(x).numel() / d;
        let data = self.value(x).data();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let mut out = vec![0.0; data.len()];
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mu) * inv * g[j] + b[j];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor::new(s, out)?,
            Op::LayerNorm { x, gamma, beta, eps },
            req,
        ))
    }

    /// Elementwise `base^e` where `expo` is a single-element node and
    /// `base` is strictly positive.
    pub fn pow_pair(&mut self, base: NodeId, expo: NodeId) -> Result<NodeId> {
        if self.value(expo).numel() != 1 {
            return Err(Error::shape("pow_pair", "exponent must be scalar"));
        }
        let e = self.value(expo).data()[0];
        if self.value(base).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Numeric(
                "pow_pair requires strictly positive base".into(),
            ));
        }
        let shape = self.value(base).shape().to_vec();
        let out: Vec<f64> = self.value(base).data().iter().map(|v| v.powf(e)).collect();
        let req = self.requires(base) || self.requires(expo);
        Ok(self.push(Tensor::new(shape, out)?, Op::PowPair { base, expo }, req))
    }

    pub fn clamp_min(&mut self, x: NodeId, min: f64) -> NodeId {
        let t = self.value(x).clone();
        let out: Vec<f64> = t.data().iter().map(|v| v.max(min)).collect();
        let req = self.requires(x);
        let shape = t.shape().to_vec();
        self.push(
            Tensor::new(shape, out).unwrap(),
            Op::ClampMin { x, min },
            req,
        )
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).clone();
        let out: Vec<f64> = t.data().iter().map(|&v| gelu_fwd(v)).collect();
        let req = self.requires(x);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Gelu { x }, req)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).clone();
        let out: Vec<f64> = t.data().iter().map(|v| v.max(0.0)).collect();
        let req = self.requires(x);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Relu { x }, req)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x).clone();
        let out: Vec<f64> = t.data().iter().map(|v| v.exp()).collect();
        let req = self.requires(x);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Exp { x }, req)
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numeric("sqrt of negative value".into()));
        }
        let t = self.value(x).clone();
        let out: Vec<f64> = t.data().iter().map(|v| v.sqrt()).collect();
        let req = self.requires(x);
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out).unwrap(), Op::Sqrt { x }, req))
    }

    /// Inverted dropout with keep-scaling; identity in eval mode or at p=0.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let n = self.value(x).numel();
        let rng = self
            .dropout_rng
            .as_mut()
            .expect("training graph always carries a dropout rng");
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen_f64() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let t = self.value(x).clone();
        let out: Vec<f64> = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let req = self.requires(x);
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, out).unwrap(), Op::Dropout { x, mask }, req)
    }

    /// Bilinear interpolation of grid tokens at normalized locations.
    ///
    /// `feat` is [h*w, D] row-major over a (grid_h, grid_w) lattice whose
    /// token (i, j) sits at normalized center ((j+0.5)/w, (i+0.5)/h).
    /// `locs` is [Q, 2] rows of (x, y). Out-of-bounds neighbors contribute
    /// zero. Output [Q, D]. Differentiable in both features and locations.
    pub fn bilinear_gather(
        &mut self,
        feat: NodeId,
        locs: NodeId,
        grid_h: usize,
        grid_w: usize,
    ) -> Result<NodeId> {
        let fs = self.value(feat).shape().to_vec();
        let ls = self.value(locs).shape().to_vec();
        if fs.len() != 2 || fs[0] != grid_h * grid_w {
            return Err(Error::shape(
                "bilinear_gather",
                format!("features {fs:?} vs grid {grid_h}x{grid_w}"),
            ));
        }
        if ls.len() != 2 || ls[1] != 2 {
            return Err(Error::shape("bilinear_gather", format!("locs {ls:?}")));
        }
        let (q, d) = (ls[0], fs[1]);
        let fdata = self.value(feat).data();
        let ldata = self.value(locs).data();
        let mut out = vec![0.0; q * d];
        for qi in 0..q {
            let corners = bilinear_corners(ldata[qi * 2], ldata[qi * 2 + 1], grid_h, grid_w);
            for (tok, w) in corners.iter().flatten() {
                let frow = &fdata[tok * d..(tok + 1) * d];
                let orow = &mut out[qi * d..(qi + 1) * d];
                for c in 0..d {
                    orow[c] += w * frow[c];
                }
            }
        }
        let req = self.requires(feat) || self.requires(locs);
        Ok(self.push(
            Tensor::new(vec![q, d], out)?,
            Op::BilinearGather {
                feat,
                locs,
                grid_h,
                grid_w,
            },
            req,
        ))
    }

    /// Concatenate 2D tensors with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).shape()[0];
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", format!("{s:?}")));
            }
            total += s[1];
        }
        let mut out = vec![0.0; rows * total];
        let mut col = 0;
        for &p in parts {
            let s = self.value(p).shape().to_vec();
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + col..r * total + col + s[1]]
                    .copy_from_slice(&d[r * s[1]..(r + 1) * s[1]]);
            }
            col += s[1];
        }
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{} of {s:?}", start + len),
            ));
        }
        let d = self.value(x).data();
        let mut out = vec![0.0; s[0] * len];
        for r in 0..s[0] {
            out[r * len..(r + 1) * len].copy_from_slice(&d[r * s[1] + start..r * s[1] + start + len]);
        }
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(vec![s[0], len], out)?,
            Op::SliceCols { x, start, len },
            req,
        ))
    }

    /// Stack k same-shape tensors into a new leading axis.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Input("stack_rows of nothing".into()));
        }
        let inner = self.value(parts[0]).shape().to_vec();
        let mut out = Vec::with_capacity(parts.len() * self.value(parts[0]).numel());
        for &p in parts {
            if self.value(p).shape() != inner.as_slice() {
                return Err(Error::shape(
                    "stack_rows",
                    format!("{:?} vs {:?}", self.value(p).shape(), inner),
                ));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&inner);
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::StackRows {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    /// Contiguous block along the first axis; remaining dims are kept.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of {s:?}", start + len),
            ));
        }
        let stride: usize = s[1..].iter().product();
        let d = self.value(x).data();
        let out = d[start * stride..(start + len) * stride].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&s[1..]);
        let req = self.requires(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SliceRows { x, start, len },
            req,
        ))
    }

    // ── Compositions used across the model ───────────────────────────

    /// x[n,in] * w[in,out] + b[out]
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matmul(x, w)?;
        let out_dim = self.value(y).shape()[1];
        let rows = self.value(y).shape()[0];
        let b1 = self.reshape(b, &[1, out_dim])?;
        let bb = self.broadcast(b1, &[rows, out_dim])?;
        self.add(y, bb)
    }

    /// Rows of a 2D tensor scaled to unit L2 norm, guarded by
    /// `sqrt(sum + eps)` so all-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape("l2_normalize_rows", format!("{s:?}")));
        }
        let sq = self.mul(x, x)?;
        let ss = self.sum_axis(sq, 1)?;
        let ss_eps = self.add_scalar(ss, eps);
        let norm = self.sqrt(ss_eps)?;
        let n1 = self.reshape(norm, &[s[0], 1])?;
        let nb = self.broadcast(n1, &s)?;
        self.div(x, nb)
    }

    /// Whole tensor scaled to unit L2 norm with the same eps guard.
    pub fn l2_normalize_all(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let s = self.value(x).shape().to_vec();
        let sq = self.mul(x, x)?;
        let ss = self.sum_all(sq);
        let ss_eps = self.add_scalar(ss, eps);
        let norm = self.sqrt(ss_eps)?;
        let nb = self.broadcast(norm, &s)?;
        self.div(x, nb)
    }

    /// Squared Euclidean distance between two same-shape nodes, as a scalar.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let d2 = self.mul(d, d)?;
        Ok(self.sum_all(d2))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Adjoints of this pass are added
    /// into per-node grad accumulators, so repeated calls accumulate.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be scalar"));
        }
        self.value(loss).check_finite("loss")?;
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        adj[loss] = Some(vec![1.0]);

        for id in (0..n).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj)?;
            let node = &mut self.nodes[id];
            let acc = node
                .grad
                .get_or_insert_with(|| vec![0.0; node.value.numel()]);
            for (a, v) in acc.iter_mut().zip(&g) {
                *a += v;
            }
        }
        Ok(())
    }

    fn propagate(&self, id: NodeId, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let add_to = |adj: &mut [Option<Vec<f64>>], tgt: NodeId, n: usize, f: &dyn Fn(&mut [f64])| {
            let buf = adj[tgt].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        let numel = |t: NodeId| self.nodes[t].value.numel();
        let req = |t: NodeId| self.nodes[t].requires_grad;

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = {
                    let s = self.nodes[*a].value.shape();
                    (s[0], s[1])
                };
                let p = self.nodes[*b].value.shape()[1];
                if req(*a) {
                    let bd = self.nodes[*b].value.data();
                    add_to(adj, *a, m * k, &|buf| {
                        for i in 0..m {
                            for r in 0..k {
                                let mut s = 0.0;
                                for j in 0..p {
                                    s += g[i * p + j] * bd[r * p + j];
                                }
                                buf[i * k + r] += s;
                            }
                        }
                    });
                }
                if req(*b) {
                    let ad = self.nodes[*a].value.data();
                    add_to(adj, *b, k * p, &|buf| {
                        for r in 0..k {
                            for i in 0..m {
                                let av = ad[i * k + r];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..p {
                                    buf[r * p + j] += av * g[i * p + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose { x } => {
                if req(*x) {
                    let s = self.nodes[*x].value.shape();
                    let (r, c) = (s[0], s[1]);
                    add_to(adj, *x, r * c, &|buf| {
                        for i in 0..r {
                            for j in 0..c {
                                buf[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for t in [*a, *b] {
                    if req(t) {
                        add_to(adj, t, numel(t), &|buf| {
                            for (o, v) in buf.iter_mut().zip(g) {
                                *o += v;
                            }
                        });
                    }
                }
            }
            Op::Sub { a, b } => {
                if req(*a) {
                    add_to(adj, *a, numel(*a), &|buf| {
                        for (o, v) in buf.iter_mut().zip(g) {
                            *o += v;
                        }
                    });
                }
                if req(*b) {
                    add_to(adj, *b, numel(*b), &|buf| {
                        for (o, v) in buf.iter_mut().zip(g) {
                            *o -= v;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if req(*a) {
                    let bd = self.nodes[*b].value.data();
                    add_to(adj, *a, numel(*a), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * bd[i];
                        }
                    });
                }
                if req(*b) {
                    let ad = self.nodes[*a].value.data();
                    add_to(adj, *b, numel(*b), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * ad[i];
                        }
                    });
                }
            }
            Op::Div { a, b } => {
                let bd = self.nodes[*b].value.data();
                if req(*a) {
                    add_to(adj, *a, numel(*a), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] / bd[i];
                        }
                    });
                }
                if req(*b) {
                    let ad = self.nodes[*a].value.data();
                    add_to(adj, *b, numel(*b), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] -= g[i] * ad[i] / (bd[i] * bd[i]);
                        }
                    });
                }
            }
            Op::Scale { x, c } => {
                if req(*x) {
                    let c = *c;
                    add_to(adj, *x, numel(*x), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * c;
                        }
                    });
                }
            }
            Op::AddScalar { x } => {
                if req(*x) {
                    add_to(adj, *x, numel(*x), &|buf| {
                        for (o, v) in buf.iter_mut().zip(g) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Broadcast { x } => {
                if req(*x) {
                    let target = self.nodes[id].value.shape().to_vec();
                    let src = self.nodes[*x].value.shape().to_vec();
                    let offset = target.len() - src.len();
                    add_to(adj, *x, numel(*x), &|buf| {
                        for (flat, v) in g.iter().enumerate() {
                            buf[broadcast_src_index(flat, &target, &src, offset)] += v;
                        }
                    });
                }
            }
            Op::Reshape { x } => {
                if req(*x) {
                    add_to(adj, *x, numel(*x), &|buf| {
                        for (o, v) in buf.iter_mut().zip(g) {
                            *o += v;
                        }
                    });
                }
            }
            Op::SumAxis { x, axis } => {
                if req(*x) {
                    let s = self.nodes[*x].value.shape().to_vec();
                    let (outer, alen, inner) = lanes(&s, *axis);
                    add_to(adj, *x, numel(*x), &|buf| {
                        for o in 0..outer {
                            for i in 0..alen {
                                for k in 0..inner {
                                    buf[(o * alen + i) * inner + k] += g[o * inner + k];
                                }
                            }
                        }
                    });
                }
            }
            Op::SumAll { x } => {
                if req(*x) {
                    add_to(adj, *x, numel(*x), &|buf| {
                        for o in buf.iter_mut() {
                            *o += g[0];
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                if req(*x) {
                    let y = self.nodes[id].value.data();
                    let s = self.nodes[*x].value.shape().to_vec();
                    let (outer, alen, inner) = lanes(&s, *axis);
                    add_to(adj, *x, numel(*x), &|buf| {
                        for o in 0..outer {
                            for k in 0..inner {
                                let idx = |i: usize| (o * alen + i) * inner + k;
                                let mut dot = 0.0;
                                for i in 0..alen {
                                    dot += g[idx(i)] * y[idx(i)];
                                }
                                for i in 0..alen {
                                    buf[idx(i)] += y[idx(i)] * (g[idx(i)] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.nodes[*x].value.shape().last().unwrap();
                let rows = numel(*x) / d;
                let xd = self.nodes[*x].value.data();
                let gd = self.nodes[*gamma].value.data();
                let eps = *eps;
                // Per-row statistics are recomputed from the stored input.
                let mut mus = vec![0.0; rows];
                let mut invs = vec![0.0; rows];
                for r in 0..rows {
                    let row = &xd[r * d..(r + 1) * d];
                    let mu = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
                    mus[r] = mu;
                    invs[r] = 1.0 / (var + eps).sqrt();
                }
                if req(*gamma) {
                    add_to(adj, *gamma, d, &|buf| {
                        for r in 0..rows {
                            for j in 0..d {
                                let xhat = (xd[r * d + j] - mus[r]) * invs[r];
                                buf[j] += g[r * d + j] * xhat;
                            }
                        }
                    });
                }
                if req(*beta) {
                    add_to(adj, *beta, d, &|buf| {
                        for r in 0..rows {
                            for j in 0..d {
                                buf[j] += g[r * d + j];
                            }
                        }
                    });
                }
                if req(*x) {
                    add_to(adj, *x, rows * d, &|buf| {
                        for r in 0..rows {
                            let mut mean_gy = 0.0;
                            let mut mean_gy_xhat = 0.0;
                            for j in 0..d {
                                let gy = g[r * d + j] * gd[j];
                                let xhat = (xd[r * d + j] - mus[r]) * invs[r];
                                mean_gy += gy;
                                mean_gy_xhat += gy * xhat;
                            }
                            mean_gy /= d as f64;
                            mean_gy_xhat /= d as f64;
                            for j in 0..d {
                                let gy = g[r * d + j] * gd[j];
                                let xhat = (xd[r * d + j] - mus[r]) * invs[r];
                                buf[r * d + j] +=
                                    invs[r] * (gy - mean_gy - xhat * mean_gy_xhat);
                            }
                        }
                    });
                }
            }
            Op::PowPair { base, expo } => {
                let bd = self.nodes[*base].value.data();
                let e = self.nodes[*expo].value.data()[0];
                let y = self.nodes[id].value.data();
                if req(*base) {
                    add_to(adj, *base, numel(*base), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * e * bd[i].powf(e - 1.0);
                        }
                    });
                }
                if req(*expo) {
                    add_to(adj, *expo, 1, &|buf| {
                        let mut s = 0.0;
                        for i in 0..bd.len() {
                            s += g[i] * y[i] * bd[i].ln();
                        }
                        buf[0] += s;
                    });
                }
            }
            Op::ClampMin { x, min } => {
                if req(*x) {
                    let xd = self.nodes[*x].value.data();
                    let min = *min;
                    add_to(adj, *x, numel(*x), &|buf| {
                        for i in 0..buf.len() {
                            if xd[i] > min {
                                buf[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Gelu { x } => {
                if req(*x) {
                    let xd = self.nodes[*x].value.data();
                    add_to(adj, *x, numel(*x), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * gelu_grad(xd[i]);
                        }
                    });
                }
            }
            Op::Relu { x } => {
                if req(*x) {
                    let xd = self.nodes[*x].value.data();
                    add_to(adj, *x, numel(*x), &|buf| {
                        for i in 0..buf.len() {
                            if xd[i] > 0.0 {
                                buf[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::Exp { x } => {
                if req(*x) {
                    let y = self.nodes[id].value.data();
                    add_to(adj, *x, numel(*x), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * y[i];
                        }
                    });
                }
            }
            Op::Sqrt { x } => {
                if req(*x) {
                    let y = self.nodes[id].value.data();
                    add_to(adj, *x, numel(*x), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * 0.5 / y[i];
                        }
                    });
                }
            }
            Op::Dropout { x, mask } => {
                if req(*x) {
                    add_to(adj, *x, numel(*x), &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * mask[i];
                        }
                    });
                }
            }
            Op::BilinearGather {
                feat,
                locs,
                grid_h,
                grid_w,
            } => {
                let fd = self.nodes[*feat].value.data();
                let ld = self.nodes[*locs].value.data();
                let d = self.nodes[*feat].value.shape()[1];
                let q = self.nodes[*locs].value.shape()[0];
                let (h, w) = (*grid_h, *grid_w);
                if req(*feat) {
                    add_to(adj, *feat, numel(*feat), &|buf| {
                        for qi in 0..q {
                            let corners = bilinear_corners(ld[qi * 2], ld[qi * 2 + 1], h, w);
                            for (tok, wgt) in corners.iter().flatten() {
                                for c in 0..d {
                                    buf[tok * d + c] += g[qi * d + c] * wgt;
                                }
                            }
                        }
                    });
                }
                if req(*locs) {
                    add_to(adj, *locs, numel(*locs), &|buf| {
                        for qi in 0..q {
                            let (dgx, dgy) = bilinear_loc_grad(
                                ld[qi * 2],
                                ld[qi * 2 + 1],
                                h,
                                w,
                                fd,
                                d,
                                &g[qi * d..(qi + 1) * d],
                            );
                            // Chain rule through gx = x*w - 0.5, gy = y*h - 0.5.
                            buf[qi * 2] += dgx * w as f64;
                            buf[qi * 2 + 1] += dgy * h as f64;
                        }
                    });
                }
            }
            Op::ConcatCols { parts } => {
                let total = self.nodes[id].value.shape()[1];
                let rows = self.nodes[id].value.shape()[0];
                let mut col = 0;
                for &p in parts {
                    let width = self.nodes[p].value.shape()[1];
                    if req(p) {
                        let start = col;
                        add_to(adj, p, numel(p), &|buf| {
                            for r in 0..rows {
                                for j in 0..width {
                                    buf[r * width + j] += g[r * total + start + j];
                                }
                            }
                        });
                    }
                    col += width;
                }
            }
            Op::SliceCols { x, start, len } => {
                if req(*x) {
                    let s = self.nodes[*x].value.shape().to_vec();
                    let (start, len) = (*start, *len);
                    add_to(adj, *x, numel(*x), &|buf| {
                        for r in 0..s[0] {
                            for j in 0..len {
                                buf[r * s[1] + start + j] += g[r * len + j];
                            }
                        }
                    });
                }
            }
            Op::StackRows { parts } => {
                let chunk = self.nodes[parts[0]].value.numel();
                for (i, &p) in parts.iter().enumerate() {
                    if req(p) {
                        add_to(adj, p, chunk, &|buf| {
                            for (o, v) in buf.iter_mut().zip(&g[i * chunk..(i + 1) * chunk]) {
                                *o += v;
                            }
                        });
                    }
                }
            }
            Op::SliceRows { x, start, len } => {
                if req(*x) {
                    let s = self.nodes[*x].value.shape().to_vec();
                    let stride: usize = s[1..].iter().product();
                    let (start, len) = (*start, *len);
                    add_to(adj, *x, numel(*x), &|buf| {
                        for (o, v) in buf[start * stride..(start + len) * stride]
                            .iter_mut()
                            .zip(g)
                        {
                            *o += v;
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// (outer, axis length, inner) strides decomposition for axis ops.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_src_index(flat: usize, target: &[usize], src: &[usize], offset: usize) -> usize {
    let mut src_idx = 0;
    let mut src_stride = 1;
    let mut target_stride = 1;
    // Walk target dims from last to first, building the source flat index.
    for d in (0..target.len()).rev() {
        let idx = (flat / target_stride) % target[d];
        target_stride *= target[d];
        if d >= offset {
            let sd = src[d - offset];
            let si = if sd == 1 { 0 } else { idx };
            src_idx += si * src_stride;
            src_stride *= sd;
        }
    }
    src_idx
}

/// The four bilinear corners of a normalized location, with weights.
/// Returns token index and weight for each in-bounds neighbor.
fn bilinear_corners(x: f64, y: f64, h: usize, w: usize) -> [Option<(usize, f64)>; 4] {
    let gx = x * w as f64 - 0.5;
    let gy = y * h as f64 - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let ax = gx - x0;
    let ay = gy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut out = [None; 4];
    let cand = [
        (y0, x0, (1.0 - ay) * (1.0 - ax)),
        (y0, x0 + 1, (1.0 - ay) * ax),
        (y0 + 1, x0, ay * (1.0 - ax)),
        (y0 + 1, x0 + 1, ay * ax),
    ];
    for (slot, (yy, xx, wgt)) in out.iter_mut().zip(cand) {
        if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
            *slot = Some((yy as usize * w + xx as usize, wgt));
        }
    }
    out
}

/// d(output)/d(gx), d(output)/d(gy) contracted with the upstream gradient.
fn bilinear_loc_grad(
    x: f64,
    y: f64,
    h: usize,
    w: usize,
    feat: &[f64],
    d: usize,
    g: &[f64],
) -> (f64, f64) {
    let gx = x * w as f64 - 0.5;
    let gy = y * h as f64 - 0.5;
    let x0 = gx.floor();
    let y0 = gy.floor();
    let ax = gx - x0;
    let ay = gy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let fetch = |yy: i64, xx: i64, c: usize| -> f64 {
        if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
            feat[(yy as usize * w + xx as usize) * d + c]
        } else {
            0.0
        }
    };
    let mut dgx = 0.0;
    let mut dgy = 0.0;
    for c in 0..d {
        let f00 = fetch(y0, x0, c);
        let f01 = fetch(y0, x0 + 1, c);
        let f10 = fetch(y0 + 1, x0, c);
        let f11 = fetch(y0 + 1, x0 + 1, c);
        dgx += g[c] * ((1.0 - ay) * (f01 - f00) + ay * (f11 - f10));
        dgy += g[c] * ((1.0 - ax) * (f10 - f00) + ax * (f11 - f01));
    }
    (dgx, dgy)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

// ── Gradient checking ────────────────────────────────────────────────

/// Central-difference verification of reverse-mode gradients.
///
/// `build` must construct a deterministic scalar loss from the registry
/// (dropout off, f64). For every parameter element the finite difference
/// `(f(p+eps) - f(p-eps)) / (2 eps)` is compared against the tape gradient;
/// the max of `|g_ad - g_fd| / max(1, |g_fd|)` over all elements is returned.
pub fn grad_check<F>(registry: &mut ParameterRegistry, eps: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterRegistry) -> Result<NodeId>,
{
    let mut graph = Graph::new(Precision::F64);
    let loss = build(&mut graph, registry)?;
    if graph.value(loss).numel() != 1 {
        return Err(Error::shape("grad_check", "loss must be scalar"));
    }
    graph.value(loss).check_finite("grad_check loss")?;
    graph.backward(loss)?;
    let ad_grads = graph.param_grads();

    let paths: Vec<String> = registry.paths();
    let mut max_rel: f64 = 0.0;
    for path in paths {
        let n = registry.get(&path)?.numel();
        let ad = ad_grads.get(&path).cloned().unwrap_or_else(|| vec![0.0; n]);
        for i in 0..n {
            let orig = registry.get(&path)?.data()[i];
            registry.get_mut(&path)?.data_mut()[i] = orig + eps;
            let fp = eval_scalar(registry, &build)?;
            registry.get_mut(&path)?.data_mut()[i] = orig - eps;
            let fm = eval_scalar(registry, &build)?;
            registry.get_mut(&path)?.data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let rel = (ad[i] - fd).abs() / fd.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn eval_scalar<F>(registry: &ParameterRegistry, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParameterRegistry) -> Result<NodeId>,
{
    let mut graph = Graph::new(Precision::F64);
    let loss = build(&mut graph, registry)?;
    let v = graph.value(loss).data()[0];
    if !v.is_finite() {
        return Err(Error::Numeric("non-finite loss in grad_check".into()));
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterRegistry;

    fn rng(name: &str) -> StreamRng {
        StreamRng::new(42, name)
    }

    fn random_tensor(shape: &[usize], r: &mut StreamRng) -> Tensor {
        let mut t = Tensor::zeros(shape);
        r.fill_normal(t.data_mut(), 1.0);
        t
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut g = Graph::new(Precision::F64);
        let eye = g.constant(Tensor::eye(3));
        let x = g.constant(random_tensor(&[3, 4], &mut rng("t")));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new(Precision::F64);
        let a = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng("matmul");
        let a = random_tensor(&[5, 4], &mut r);
        let b = random_tensor(&[4, 3], &mut r);
        let mut expect = vec![0.0; 5 * 3];
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 3 + j];
                }
                expect[i * 3 + j] = s;
            }
        }
        let mut g = Graph::new(Precision::F64);
        let an = g.constant(a);
        let bn = g.constant(b);
        let c = g.matmul(an, bn).unwrap();
        for (got, want) in g.value(c).data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut g = Graph::new(Precision::F64);
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let yb = g.softmax(big, 0).unwrap();
        assert!((g.value(yb).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(yb).data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_exp_normalize_oracle() {
        let mut r = rng("softmax");
        let x = random_tensor(&[7], &mut r);
        // Oracle without max subtraction, safe for O(1) inputs.
        let exps: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut g = Graph::new(Precision::F64);
        let xn = g.constant(x);
        let y = g.softmax(xn, 0).unwrap();
        for (got, e) in g.value(y).data().iter().zip(&exps) {
            assert!((got - e / z).abs() < 1e-14);
        }
    }

    #[test]
    fn bilinear_on_grid_center_returns_token() {
        let mut g = Graph::new(Precision::F64);
        // 2x2 grid, 1 channel, token values 0..4
        let feat = g.constant(Tensor::new(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
        // center of token (i=1, j=0): x=(0+0.5)/2, y=(1+0.5)/2
        let locs = g.constant(Tensor::new(vec![1, 2], vec![0.25, 0.75]).unwrap());
        let y = g.bilinear_gather(feat, locs, 2, 2).unwrap();
        assert!((g.value(y).data()[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_midpoint_of_two_tokens() {
        let mut g = Graph::new(Precision::F64);
        // 1 row, 2 cols grid with values [0, 1]; midpoint of centers is x=0.5.
        let feat = g.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap());
        let locs = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let y = g.bilinear_gather(feat, locs, 1, 2).unwrap();
        assert!((g.value(y).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bilinear_matches_scalar_four_neighbor_oracle() {
        let mut r = rng("bilinear");
        let feat = random_tensor(&[16, 3], &mut r);
        let (h, w) = (4usize, 4usize);
        for case in 0..50 {
            let x = r.uniform(-0.2, 1.2);
            let y = r.uniform(-0.2, 1.2);
            let mut g = Graph::new(Precision::F64);
            let f = g.constant(feat.clone());
            let l = g.constant(Tensor::new(vec![1, 2], vec![x, y]).unwrap());
            let out = g.bilinear_gather(f, l, h, w).unwrap();
            // independent scalar oracle
            let gx = x * w as f64 - 0.5;
            let gy = y * h as f64 - 0.5;
            let (x0, y0) = (gx.floor() as i64, gy.floor() as i64);
            let (ax, ay) = (gx - gx.floor(), gy - gy.floor());
            for c in 0..3 {
                let mut acc = 0.0;
                for (yy, xx, wgt) in [
                    (y0, x0, (1.0 - ay) * (1.0 - ax)),
                    (y0, x0 + 1, (1.0 - ay) * ax),
                    (y0 + 1, x0, ay * (1.0 - ax)),
                    (y0 + 1, x0 + 1, ay * ax),
                ] {
                    if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                        acc += wgt * feat.data()[(yy as usize * w + xx as usize) * 3 + c];
                    }
                }
                assert!(
                    (g.value(out).data()[c] - acc).abs() < 1e-12,
                    "case {case} channel {c}"
                );
            }
        }
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut reg = ParameterRegistry::new();
        reg.insert("w", Tensor::new(vec![2], vec![3.0, -1.0]).unwrap())
            .unwrap();
        let mut g = Graph::new(Precision::F64);
        let w = g.param(&reg, "w").unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        g.backward(loss).unwrap();
        let g1 = g.param_grads()["w"].clone();
        g.backward(loss).unwrap();
        let g2 = g.param_grads()["w"].clone();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn f32_precision_rounds_forward_values() {
        let mut g = Graph::new(Precision::F32);
        let x = g.constant(Tensor::scalar(0.1));
        let y = g.add_scalar(x, 0.2);
        let v = g.value(y).data()[0];
        assert_eq!(v, (0.1f32 as f64 + 0.2) as f32 as f64);
    }

    /// Every primitive's reverse-mode gradient vs central differences.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let eps = 1e-5;
        let tol = 1e-7;
        let mut r = rng("prim");

        // Each case: (name, builder over a registry holding "a" (and maybe "b")).
        type Builder = Box<dyn Fn(&mut Graph, &ParameterRegistry) -> Result<NodeId>>;
        let mut probe = random_tensor(&[3, 4], &mut r);
        // keep clamp inputs away from the kink at 0.5
        for v in probe.data_mut() {
            if (*v - 0.5).abs() < 0.05 {
                *v += 0.1;
            }
        }
        let weight = random_tensor(&[3, 4], &mut r);
        let cases: Vec<(&str, Vec<(&str, Tensor)>, Builder)> = vec![
            (
                "matmul",
                vec![
                    ("a", random_tensor(&[3, 4], &mut r)),
                    ("b", random_tensor(&[4, 2], &mut r)),
                ],
                Box::new(|g, reg| {
                    let a = g.param(reg, "a")?;
                    let b = g.param(reg, "b")?;
                    let y = g.matmul(a, b)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum_all(sq))
                }),
            ),
            (
                "add_mul_sub_div",
                vec![
                    ("a", random_tensor(&[2, 3], &mut r)),
                    ("b", {
                        let mut t = random_tensor(&[2, 3], &mut r);
                        for v in t.data_mut() {
                            *v = v.abs() + 0.5;
                        }
                        t
                    }),
                ],
                Box::new(|g, reg| {
                    let a = g.param(reg, "a")?;
                    let b = g.param(reg, "b")?;
                    let s = g.add(a, b)?;
                    let m = g.mul(s, a)?;
                    let d = g.div(m, b)?;
                    let t = g.sub(d, a)?;
                    let sq = g.mul(t, t)?;
                    Ok(g.sum_all(sq))
                }),
            ),
            (
                "softmax",
                vec![("a", random_tensor(&[3, 5], &mut r))],
                Box::new(|g, reg| {
                    let a = g.param(reg, "a")?;
                    let y = g.softmax(a, 1)?;
                    let c =
                        g.constant(Tensor::new(vec![3, 5], (0..15).map(|i| i as f64 * 0.3).collect()).unwrap());
                    let w = g.mul(y, c)?;
                    Ok(g.sum_all(w))
                }),
            ),
            (
                "layer_norm",
                vec![
                    ("a", random_tensor(&[4, 6], &mut r)),
                    ("gamma", random_tensor(&[6], &mut r)),
                    ("beta", random_tensor(&[6], &mut r)),
                ],
                Box::new(|g, reg| {
                    let a = g.param(reg, "a")?;
                    let ga = g.param(reg, "gamma")?;
                    let be = g.param(reg, "beta")?;
                    let y = g.layer_norm(a, ga, be, 1e-5)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum_all(sq))
                }),
            ),
            (
                "pow_pair",
                vec![
                    ("a", {
                        let mut t = random_tensor(&[5], &mut r);
                        for v in t.data_mut() {
                            *v = v.abs() + 0.3;
                        }
                        t
                    }),
                    ("p", Tensor::scalar(2.7)),
                ],
                Box::new(|g, reg| {
                    let a = g.param(reg, "a")?;
                    let p = g.param(reg, "p")?;
                    let y = g.pow_pair(a, p)?;
                    Ok(g.sum_all(y))
                }),
            ),
            (
                "clamp_power_sqrt_exp",
                vec![("a", probe)],
                Box::new(|g, reg| {
                    let a = g.param(reg, "a")?;
                    let c = g.clamp_min(a, 0.5);
                    let s = g.sqrt(c)?;
                    let e = g.exp(s);
                    Ok(g.sum_all(e))
                }),
            ),
            (
                "gelu_relu",
                vec![("a", {
                    let mut t = random_tensor(&[8], &mut r);
                    for v in t.data_mut() {
                        if v.abs() < 0.05 {
                            *v += 0.2;
                        }
                    }
                    t
                })],
                Box::new(|g, reg| {
                    let a = g.param(reg, "a")?;
                    let ge = g.gelu(a);
                    let re = g.relu(a);
                    let s = g.add(ge, re)?;
                    Ok(g.sum_all(s))
                }),
            ),
            (
                "bilinear_sample",
                vec![
                    ("feat", random_tensor(&[9, 2], &mut r)),
                    (
                        "locs",
                        // away from cell boundaries
                        Tensor::new(vec![3, 2], vec![0.21, 0.44, 0.62, 0.23, 0.87, 0.71]).unwrap(),
                    ),
                ],
                Box::new(|g, reg| {
                    let f = g.param(reg, "feat")?;
                    let l = g.param(reg, "locs")?;
                    let y = g.bilinear_gather(f, l, 3, 3)?;
                    let sq = g.mul(y, y)?;
                    Ok(g.sum_all(sq))
                }),
            ),
            (
                "broadcast_sum_stack_slice",
                vec![
                    ("a", random_tensor(&[2, 3], &mut r)),
                    ("b", random_tensor(&[1, 3], &mut r)),
                ],
                Box::new(move |g, reg| {
                    let a = g.param(reg, "a")?;
                    let b = g.param(reg, "b")?;
                    let bb = g.broadcast(b, &[2, 3])?;
                    let s = g.add(a, bb)?;
                    let st = g.stack_rows(&[s, a])?;
                    let sl = g.slice_rows(st, 1, 1)?;
                    let rs = g.reshape(sl, &[2, 3])?;
                    let cc = g.concat_cols(&[rs, s])?;
                    let c1 = g.slice_cols(cc, 2, 3)?;
                    let t = g.transpose(c1)?;
                    let sm = g.sum_axis(t, 0)?;
                    let sq = g.mul(sm, sm)?;
                    Ok(g.sum_all(sq))
                }),
            ),
        ];
        let _ = weight;

        for (name, params, build) in cases {
            let mut reg = ParameterRegistry::new();
            for (p, t) in params {
                reg.insert(p, t).unwrap();
            }
            let rel = grad_check(&mut reg, eps, build).unwrap();
            assert!(rel < tol, "{name}: max rel error {rel:.3e} >= {tol:.0e}");
        }
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        let mut reg = ParameterRegistry::new();
        let mut r = rng("quad");
        reg.insert("theta", random_tensor(&[6], &mut r)).unwrap();
        let rel = grad_check(&mut reg, 1e-5, |g, reg| {
            let t = g.param(reg, "theta")?;
            let sq = g.mul(t, t)?;
            Ok(g.sum_all(sq))
        })
        .unwrap();
        assert!(rel < 1e-10, "quadratic rel err {rel:.3e}");
    }

    #[test]
    fn grad_check_linear_layer_mse() {
        let mut reg = ParameterRegistry::new();
        let mut r = rng("lin");
        reg.insert("w", random_tensor(&[4, 3], &mut r)).unwrap();
        reg.insert("b", random_tensor(&[3], &mut r)).unwrap();
        let x = random_tensor(&[5, 4], &mut r);
        let y = random_tensor(&[5, 3], &mut r);
        let rel = grad_check(&mut reg, 1e-5, move |g, reg| {
            let w = g.param(reg, "w")?;
            let b = g.param(reg, "b")?;
            let xn = g.constant(x.clone());
            let yn = g.constant(y.clone());
            let pred = g.linear(xn, w, b)?;
            let d = g.sub(pred, yn)?;
            let sq = g.mul(d, d)?;
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(rel < 1e-7, "linear+mse rel err {rel:.3e}");
    }

    #[test]
    fn dropout_disabled_in_eval_mode_and_masks_in_training() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(Tensor::full(&[100], 1.0));
        let y = g.dropout(x, 0.5);
        assert_eq!(x, y, "eval-mode dropout must be the identity");

        let mut gt = Graph::for_training(Precision::F64, rng("dropout"));
        let xt = gt.constant(Tensor::full(&[1000], 1.0));
        let yt = gt.dropout(xt, 0.5);
        let kept = gt.value(yt).data().iter().filter(|v| **v > 0.0).count();
        assert!(kept > 400 && kept < 600, "kept {kept} of 1000 at p=0.5");
        for v in gt.value(yt).data() {
            assert!(*v == 0.0 || (*v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_guards_zero_rows() {
        let mut g = Graph::new(Precision::F64);
        let x = g.constant(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
        let y = g.l2_normalize_rows(x, 1e-12).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-9 && (d[1] - 0.8).abs() < 1e-9);
        assert_eq!(&d[2..], &[0.0, 0.0]);
    }
}
