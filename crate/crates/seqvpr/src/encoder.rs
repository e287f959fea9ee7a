//! Frame tokenizer: a stand-in for a heavy convolutional-transformer
//! backbone with the same output contract.
//!
//! Each frame is split into PxP patches, every patch is mean-pooled per
//! channel, projected to the embedding width D, and a learned positional
//! embedding (shared across frames) is added. Token count n and width D are
//! fixed per model instance whatever the sequence length, which the
//! recurrence downstream depends on. Precomputed token features in TSR
//! format can be fed instead of frames, bypassing this module entirely.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::ParameterRegistry;
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// An image sequence [L, H, W, 3] with pixel values in [0, 1].
#[derive(Clone, Debug)]
pub struct FrameSequence {
    frames: Tensor,
}

impl FrameSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape(
                "FrameSequence::new",
                format!("want [L, H, W, 3], got {s:?}"),
            ));
        }
        if frames.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(FrameSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }
}

/// Per-frame token grid features plus the grid geometry deformable
/// attention needs to place reference points.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatureMap {
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

impl TokenFeatureMap {
    pub fn new(tokens: Tensor, grid: (usize, usize)) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 2 || s[0] != grid.0 * grid.1 {
            return Err(Error::shape(
                "TokenFeatureMap::new",
                format!("tokens {s:?} vs grid {grid:?}"),
            ));
        }
        Ok(TokenFeatureMap { tokens, grid })
    }

    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // 32x32 frames with P=8 give a 4x4 token grid in minutes-scale runs.
        EncoderConfig {
            patch_size: 8,
            dim: 32,
        }
    }
}

pub const PARAM_PROJ_W: &str = "encoder.proj.w";
pub const PARAM_PROJ_B: &str = "encoder.proj.b";
pub const PARAM_POS: &str = "encoder.pos";

/// Register encoder parameters for a frame geometry.
pub fn init_params(
    registry: &mut ParameterRegistry,
    cfg: EncoderConfig,
    height: usize,
    width: usize,
    rng: &mut StreamRng,
) -> Result<()> {
    let (h_g, w_g) = grid_for(cfg, height, width)?;
    let n = h_g * w_g;
    let mut w = Tensor::zeros(&[3, cfg.dim]);
    let bound = (6.0 / (3 + cfg.dim) as f64).sqrt();
    rng.fill_uniform(w.data_mut(), -bound, bound);
    registry.insert(PARAM_PROJ_W, w)?;
    registry.insert(PARAM_PROJ_B, Tensor::zeros(&[cfg.dim]))?;
    let mut pos = Tensor::zeros(&[n, cfg.dim]);
    rng.fill_normal(pos.data_mut(), 0.02);
    registry.insert(PARAM_POS, pos)?;
    Ok(())
}

/// Token grid geometry for a frame size, or a dimension error when the
/// frame does not tile into whole patches.
pub fn grid_for(cfg: EncoderConfig, height: usize, width: usize) -> Result<(usize, usize)> {
    if height % cfg.patch_size != 0 || width % cfg.patch_size != 0 {
        return Err(Error::shape(
            "encoder",
            format!(
                "frame {height}x{width} not divisible by patch size {}",
                cfg.patch_size
            ),
        ));
    }
    Ok((height / cfg.patch_size, width / cfg.patch_size))
}

/// Mean pixel value per patch and channel; pure data preparation, so it
/// runs outside the graph. Output [n, 3], patches in row-major grid order.
pub fn patch_means(frame: &[f64], height: usize, width: usize, patch: usize) -> Vec<f64> {
    let (h_g, w_g) = (height / patch, width / patch);
    let mut out = vec![0.0; h_g * w_g * 3];
    let norm = 1.0 / (patch * patch) as f64;
    for gi in 0..h_g {
        for gj in 0..w_g {
            for pi in 0..patch {
                for pj in 0..patch {
                    let y = gi * patch + pi;
                    let x = gj * patch + pj;
                    let base = (y * width + x) * 3;
                    let obase = (gi * w_g + gj) * 3;
                    for c in 0..3 {
                        out[obase + c] += frame[base + c] * norm;
                    }
                }
            }
        }
    }
    out
}

/// Encode every frame of a sequence into token feature maps (graph nodes),
/// one [n, D] map per frame. Frames are independent; no cross-frame flow.
pub fn encode_sequence(
    graph: &mut Graph,
    registry: &ParameterRegistry,
    cfg: EncoderConfig,
    seq: &FrameSequence,
) -> Result<Vec<(NodeId, (usize, usize))>> {
    let (h, w) = (seq.height(), seq.width());
    let (h_g, w_g) = grid_for(cfg, h, w)?;
    let n = h_g * w_g;
    let proj_w = graph.param(registry, PARAM_PROJ_W)?;
    let proj_b = graph.param(registry, PARAM_PROJ_B)?;
    let pos = graph.param(registry, PARAM_POS)?;
    let frame_len = h * w * 3;
    let mut out = Vec::with_capacity(seq.len());
    for t in 0..seq.len() {
        let frame = &seq.frames().data()[t * frame_len..(t + 1) * frame_len];
        let means = Tensor::new(vec![n, 3], patch_means(frame, h, w, cfg.patch_size))?;
        let mnode = graph.constant(means);
        let projected = graph.linear(mnode, proj_w, proj_b)?;
        let tokens = graph.add(projected, pos)?;
        out.push((tokens, (h_g, w_g)));
    }
    Ok(out)
}

/// Plain-tensor encoding for data preparation paths (no gradients).
pub fn encode_sequence_plain(
    registry: &ParameterRegistry,
    cfg: EncoderConfig,
    seq: &FrameSequence,
) -> Result<Vec<TokenFeatureMap>> {
    let mut graph = Graph::new(crate::autodiff::Precision::F64);
    let nodes = encode_sequence(&mut graph, registry, cfg, seq)?;
    nodes
        .into_iter()
        .map(|(id, grid)| TokenFeatureMap::new(graph.value(id).clone(), grid))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Precision;

    fn setup(h: usize, w: usize, cfg: EncoderConfig) -> ParameterRegistry {
        let mut reg = ParameterRegistry::new();
        let mut rng = StreamRng::new(11, "params");
        init_params(&mut reg, cfg, h, w, &mut rng).unwrap();
        reg
    }

    #[test]
    fn zero_frame_with_zero_bias_yields_positional_embedding() {
        let cfg = EncoderConfig { patch_size: 4, dim: 2 };
        let mut reg = setup(8, 8, cfg);
        for v in reg.get_mut(PARAM_PROJ_B).unwrap().data_mut() {
            *v = 0.0;
        }
        let frames = Tensor::zeros(&[1, 8, 8, 3]);
        let seq = FrameSequence::new(frames).unwrap();
        let mut g = Graph::new(Precision::F64);
        let maps = encode_sequence(&mut g, &reg, cfg, &seq).unwrap();
        assert_eq!(maps.len(), 1);
        let (id, grid) = maps[0];
        assert_eq!(grid, (2, 2));
        assert_eq!(g.value(id), reg.get(PARAM_POS).unwrap());
    }

    #[test]
    fn shape_arithmetic_8x8_p4_gives_4_tokens() {
        let cfg = EncoderConfig { patch_size: 4, dim: 2 };
        let reg = setup(8, 8, cfg);
        let mut rng = StreamRng::new(5, "dataset");
        let mut px = Tensor::zeros(&[1, 8, 8, 3]);
        rng.fill_uniform(px.data_mut(), 0.0, 1.0);
        let seq = FrameSequence::new(px).unwrap();
        let maps = encode_sequence_plain(&reg, cfg, &seq).unwrap();
        assert_eq!(maps[0].tokens.shape(), &[4, 2]);
        assert_eq!(maps[0].grid, (2, 2));
    }

    #[test]
    fn random_frame_matches_scalar_patch_mean_oracle() {
        let cfg = EncoderConfig { patch_size: 4, dim: 3 };
        let reg = setup(8, 8, cfg);
        let mut rng = StreamRng::new(9, "dataset");
        let mut px = Tensor::zeros(&[1, 8, 8, 3]);
        rng.fill_uniform(px.data_mut(), 0.0, 1.0);
        let seq = FrameSequence::new(px.clone()).unwrap();
        let maps = encode_sequence_plain(&reg, cfg, &seq).unwrap();

        // scalar oracle: explicit mean + matrix multiply + bias + positional
        let w = reg.get(PARAM_PROJ_W).unwrap();
        let b = reg.get(PARAM_PROJ_B).unwrap();
        let pos = reg.get(PARAM_POS).unwrap();
        for gi in 0..2 {
            for gj in 0..2 {
                let mut mean = [0.0f64; 3];
                for pi in 0..4 {
                    for pj in 0..4 {
                        let y = gi * 4 + pi;
                        let x = gj * 4 + pj;
                        for c in 0..3 {
                            mean[c] += px.data()[(y * 8 + x) * 3 + c] / 16.0;
                        }
                    }
                }
                let tok = gi * 2 + gj;
                for d in 0..3 {
                    let mut v = b.data()[d] + pos.at2(tok, d);
                    for c in 0..3 {
                        v += mean[c] * w.at2(c, d);
                    }
                    assert!(
                        (maps[0].tokens.at2(tok, d) - v).abs() < 1e-12,
                        "token {tok} dim {d}"
                    );
                }
            }
        }
    }

    #[test]
    fn non_divisible_dims_rejected() {
        let cfg = EncoderConfig { patch_size: 5, dim: 2 };
        assert!(grid_for(cfg, 8, 10).is_err());
        assert!(grid_for(cfg, 10, 10).is_ok());
    }

    #[test]
    fn frames_encode_independently_so_permutation_commutes() {
        let cfg = EncoderConfig { patch_size: 4, dim: 2 };
        let reg = setup(8, 8, cfg);
        let mut rng = StreamRng::new(17, "dataset");
        let mut px = Tensor::zeros(&[3, 8, 8, 3]);
        rng.fill_uniform(px.data_mut(), 0.0, 1.0);
        let seq = FrameSequence::new(px.clone()).unwrap();
        let maps = encode_sequence_plain(&reg, cfg, &seq).unwrap();

        // reverse frame order
        let fl = 8 * 8 * 3;
        let mut rev = Vec::with_capacity(px.numel());
        for t in (0..3).rev() {
            rev.extend_from_slice(&px.data()[t * fl..(t + 1) * fl]);
        }
        let rseq = FrameSequence::new(Tensor::new(vec![3, 8, 8, 3], rev).unwrap()).unwrap();
        let rmaps = encode_sequence_plain(&reg, cfg, &rseq).unwrap();
        for t in 0..3 {
            assert_eq!(maps[t], rmaps[2 - t]);
        }
    }

    #[test]
    fn pixel_range_validated() {
        let mut px = Tensor::zeros(&[1, 8, 8, 3]);
        px.data_mut()[0] = 1.5;
        assert!(FrameSequence::new(px).is_err());
    }
}
