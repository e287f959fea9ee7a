//! The full sequence-to-descriptor pipeline: tokenizer (optional),
//! spatio-temporal encoder variant, and VLAD aggregation behind one
//! parameter registry.
//!
//! Inputs are either raw frame sequences (the patch encoder runs first) or
//! precomputed token feature maps, which is the default for the synthetic
//! benchmark and the supported path for plugging in an external backbone.

use crate::aggregation::{self, DescriptorNodes};
use crate::attention::DeformAttnConfig;
use crate::autodiff::{Graph, NodeId, Precision};
use crate::encoder::{self, EncoderConfig, FrameSequence, TokenFeatureMap};
use crate::error::{Error, Result};
use crate::params::ParameterRegistry;
use crate::recurrent::{self, RecurrentConfig, Variant};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

/// Where token features come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    /// Precomputed [n, D] token maps are fed directly.
    Features,
    /// Frames of this size are tokenized by the patch encoder.
    Frames { height: usize, width: usize },
}

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub variant: Variant,
    pub dim: usize,
    pub grid: (usize, usize),
    pub heads: usize,
    pub points: usize,
    pub levels: usize,
    pub dropout: f64,
    pub clusters: usize,
    pub gem_p_init: f64,
    pub patch_size: usize,
    pub input: InputMode,
}

impl ModelConfig {
    /// Desk-scale default: 4x4 grid of 32-wide tokens, 2 heads, 2 points,
    /// 8 clusters.
    pub fn desk_default() -> Self {
        ModelConfig {
            variant: Variant::RecurrentDte,
            dim: 32,
            grid: (4, 4),
            heads: 2,
            points: 2,
            levels: 2,
            dropout: 0.1,
            clusters: 8,
            gem_p_init: 3.0,
            patch_size: 8,
            input: InputMode::Features,
        }
    }

    pub fn token_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn descriptor_dim(&self) -> usize {
        self.clusters * self.dim
    }

    pub fn attn_config(&self) -> Result<DeformAttnConfig> {
        DeformAttnConfig::new(self.heads, self.points, self.levels, self.dim, self.dropout)
    }

    pub fn recurrent_config(&self) -> Result<RecurrentConfig> {
        Ok(RecurrentConfig::new(
            self.variant,
            self.attn_config()?,
            self.dropout,
        ))
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            patch_size: self.patch_size,
            dim: self.dim,
        }
    }

    fn validate(&self) -> Result<()> {
        self.attn_config()?;
        if self.clusters == 0 {
            return Err(Error::Config("vlad.clusters must be positive".into()));
        }
        if let InputMode::Frames { height, width } = self.input {
            let (h_g, w_g) = encoder::grid_for(self.encoder_config(), height, width)?;
            if (h_g, w_g) != self.grid {
                return Err(Error::Config(format!(
                    "frame {height}x{width} with patch {} gives grid {h_g}x{w_g}, config says {:?}",
                    self.patch_size, self.grid
                )));
            }
        }
        Ok(())
    }
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParameterRegistry,
}

impl Model {
    /// Fresh parameters from the `params` stream of `seed`. VLAD starts
    /// from mild random values; call [`Model::fit_vlad_centers`] with a
    /// token sample to switch to the k-means initialization before
    /// training.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut params = ParameterRegistry::new();
        let mut rng = StreamRng::new(seed, "params");
        if let InputMode::Frames { height, width } = cfg.input {
            encoder::init_params(&mut params, cfg.encoder_config(), height, width, &mut rng)?;
        }
        recurrent::init_params(
            &mut params,
            &cfg.recurrent_config()?,
            cfg.token_count(),
            &mut rng,
        )?;
        aggregation::init_gem(&mut params, cfg.gem_p_init)?;
        aggregation::init_vlad_random(&mut params, cfg.clusters, cfg.dim, &mut rng)?;
        Ok(Model { cfg, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParameterRegistry) -> Result<Model> {
        cfg.validate()?;
        Ok(Model { cfg, params })
    }

    /// Replace the random VLAD initialization with k-means centers fitted
    /// on a sample of pooled training tokens [N, D].
    pub fn fit_vlad_centers(&mut self, token_sample: &Tensor, seed: u64) -> Result<()> {
        if token_sample.shape().len() != 2 || token_sample.shape()[1] != self.cfg.dim {
            return Err(Error::shape(
                "fit_vlad_centers",
                format!("want [N, {}], got {:?}", self.cfg.dim, token_sample.shape()),
            ));
        }
        let mut rng = StreamRng::new(seed, "vlad_init");
        let centers = aggregation::kmeans(token_sample, self.cfg.clusters, 10, &mut rng);
        for path in [
            aggregation::PARAM_VLAD_CENTERS,
            aggregation::PARAM_VLAD_ASSIGN_W,
            aggregation::PARAM_VLAD_ASSIGN_B,
        ] {
            self.params.remove(path)?;
        }
        aggregation::init_vlad_from_centers(
            &mut self.params,
            centers,
            aggregation::VLAD_INIT_ALPHA,
        )
    }

    fn check_feature(&self, map: &TokenFeatureMap) -> Result<()> {
        if map.grid != self.cfg.grid || map.dim() != self.cfg.dim {
            return Err(Error::shape(
                "model forward",
                format!(
                    "features {:?} on grid {:?} vs model [{}, {}] on {:?}",
                    map.tokens.shape(),
                    map.grid,
                    self.cfg.token_count(),
                    self.cfg.dim,
                    self.cfg.grid
                ),
            ));
        }
        Ok(())
    }

    /// Forward from precomputed token maps to descriptor nodes.
    pub fn forward_features(
        &self,
        graph: &mut Graph,
        features: &[TokenFeatureMap],
    ) -> Result<DescriptorNodes> {
        if features.is_empty() {
            return Err(Error::Input("empty frame sequence".into()));
        }
        for f in features {
            self.check_feature(f)?;
        }
        let ids: Vec<NodeId> = features
            .iter()
            .map(|f| graph.constant(f.tokens.clone()))
            .collect();
        self.forward_feature_nodes(graph, &ids)
    }

    /// Forward from already-inserted [n, D] feature nodes (training paths
    /// that share one graph across several sequences).
    pub fn forward_feature_nodes(
        &self,
        graph: &mut Graph,
        feature_nodes: &[NodeId],
    ) -> Result<DescriptorNodes> {
        let refined = recurrent::variant_forward(
            graph,
            &self.params,
            &self.cfg.recurrent_config()?,
            feature_nodes,
            self.cfg.grid,
        )?;
        aggregation::aggregate(graph, &self.params, &refined)
    }

    /// Forward from raw frames through the patch encoder.
    pub fn forward_frames(
        &self,
        graph: &mut Graph,
        seq: &FrameSequence,
    ) -> Result<DescriptorNodes> {
        if !matches!(self.cfg.input, InputMode::Frames { .. }) {
            return Err(Error::Config(
                "model was configured for precomputed features, not frames".into(),
            ));
        }
        let encoded =
            encoder::encode_sequence(graph, &self.params, self.cfg.encoder_config(), seq)?;
        let ids: Vec<NodeId> = encoded.iter().map(|(id, _)| *id).collect();
        self.forward_feature_nodes(graph, &ids)
    }

    /// Evaluation-mode descriptor of one sequence of token maps.
    pub fn descriptor(&self, features: &[TokenFeatureMap], precision: Precision) -> Result<Tensor> {
        let mut graph = Graph::new(precision);
        let desc = self.forward_features(&mut graph, features)?;
        Ok(graph.value(desc.flat).clone())
    }

    /// GeM-pooled [n, D] token map of one sequence (evaluation mode);
    /// these are the rows VLAD sees, used to seed k-means.
    pub fn pooled_tokens(
        &self,
        features: &[TokenFeatureMap],
        precision: Precision,
    ) -> Result<Tensor> {
        let mut graph = Graph::new(precision);
        for f in features {
            self.check_feature(f)?;
        }
        let ids: Vec<NodeId> = features
            .iter()
            .map(|f| graph.constant(f.tokens.clone()))
            .collect();
        let refined = recurrent::variant_forward(
            &mut graph,
            &self.params,
            &self.cfg.recurrent_config()?,
            &ids,
            self.cfg.grid,
        )?;
        let stack = graph.stack_rows(&refined)?;
        let pooled = aggregation::seq_gem(&mut graph, &self.params, stack)?;
        Ok(graph.value(pooled).clone())
    }

    /// Per-iteration refined token maps (evaluation mode), for inspecting
    /// the recurrence or pooling tokens for k-means.
    pub fn refined_tokens(
        &self,
        features: &[TokenFeatureMap],
        precision: Precision,
    ) -> Result<Vec<Tensor>> {
        let mut graph = Graph::new(precision);
        for f in features {
            self.check_feature(f)?;
        }
        let ids: Vec<NodeId> = features
            .iter()
            .map(|f| graph.constant(f.tokens.clone()))
            .collect();
        let refined = recurrent::variant_forward(
            &mut graph,
            &self.params,
            &self.cfg.recurrent_config()?,
            &ids,
            self.cfg.grid,
        )?;
        Ok(refined.iter().map(|&r| graph.value(r).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            variant: Variant::RecurrentDte,
            dim: 8,
            grid: (2, 2),
            heads: 2,
            points: 2,
            levels: 2,
            dropout: 0.1,
            clusters: 2,
            gem_p_init: 3.0,
            patch_size: 4,
            input: InputMode::Features,
        }
    }

    fn random_maps(l: usize, cfg: &ModelConfig, seed: u64) -> Vec<TokenFeatureMap> {
        let mut rng = StreamRng::new(seed, "dataset");
        (0..l)
            .map(|_| {
                let mut t = Tensor::zeros(&[cfg.token_count(), cfg.dim]);
                rng.fill_normal(t.data_mut(), 1.0);
                TokenFeatureMap::new(t, cfg.grid).unwrap()
            })
            .collect()
    }

    #[test]
    fn descriptor_shape_is_length_independent_and_unit_norm() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg, 7).unwrap();
        for l in [1usize, 3, 5] {
            let maps = random_maps(l, &cfg, 100 + l as u64);
            let d = model.descriptor(&maps, Precision::F64).unwrap();
            assert_eq!(d.shape(), &[cfg.descriptor_dim()]);
            assert!((d.l2_norm() - 1.0).abs() < 1e-6, "L={l}");
        }
    }

    #[test]
    fn init_is_deterministic_under_seed() {
        let cfg = tiny_cfg();
        let a = Model::init(cfg, 3).unwrap();
        let b = Model::init(cfg, 3).unwrap();
        assert_eq!(a.params.paths(), b.params.paths());
        for p in a.params.paths() {
            assert_eq!(a.params.get(&p).unwrap(), b.params.get(&p).unwrap());
        }
    }

    #[test]
    fn frames_mode_runs_the_patch_encoder() {
        let mut cfg = tiny_cfg();
        cfg.input = InputMode::Frames {
            height: 8,
            width: 8,
        };
        let model = Model::init(cfg, 9).unwrap();
        let mut rng = StreamRng::new(10, "dataset");
        let mut px = Tensor::zeros(&[3, 8, 8, 3]);
        rng.fill_uniform(px.data_mut(), 0.0, 1.0);
        let seq = FrameSequence::new(px).unwrap();
        let mut g = Graph::new(Precision::F64);
        let desc = model.forward_frames(&mut g, &seq).unwrap();
        assert_eq!(g.value(desc.flat).shape(), &[cfg.descriptor_dim()]);
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let cfg = tiny_cfg();
        let model = Model::init(cfg, 11).unwrap();
        let bad = TokenFeatureMap::new(Tensor::zeros(&[9, 8]), (3, 3)).unwrap();
        assert!(model.descriptor(&[bad], Precision::F64).is_err());
    }

    #[test]
    fn kmeans_vlad_init_replaces_random_centers() {
        let cfg = tiny_cfg();
        let mut model = Model::init(cfg, 13).unwrap();
        let before = model
            .params
            .get(aggregation::PARAM_VLAD_CENTERS)
            .unwrap()
            .clone();
        let mut rng = StreamRng::new(14, "dataset");
        let mut sample = Tensor::zeros(&[32, cfg.dim]);
        rng.fill_normal(sample.data_mut(), 1.0);
        model.fit_vlad_centers(&sample, 13).unwrap();
        let after = model.params.get(aggregation::PARAM_VLAD_CENTERS).unwrap();
        assert_ne!(&before, after);
        // assignment weights follow the NetVLAD relation w = 2 alpha c
        let w = model.params.get(aggregation::PARAM_VLAD_ASSIGN_W).unwrap();
        for i in 0..cfg.clusters {
            for e in 0..cfg.dim {
                assert!(
                    (w.at2(i, e) - 2.0 * aggregation::VLAD_INIT_ALPHA * after.at2(i, e)).abs()
                        < 1e-9
                );
            }
        }
    }
}
