//! The full Siamese network: shared pillar net and backbone for both
//! branches, the multi-scale encoder and the set-prediction decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::GridFrame;
use crate::backbone::{Backbone, BackboneConfig, BackboneError};
use crate::decoder::{Decoder, DecoderConfig, DecoderError, DecoderOutput, PredictionSet};
use crate::mae::{BranchFeatures, Encoder, EncoderConfig, EncoderError};
use crate::nn::ParamStore;
use crate::pillars::{pillarize, PillarConfig, PillarError, PillarFeatureNet, PillarTensor, PointCloud};
use crate::tensor::{FeatureMap, Graph};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Pillar(#[from] PillarError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error("pillar channels {pillar} do not match the backbone input {backbone}")]
    Channels { pillar: usize, backbone: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Search-branch pillar grid.
    pub search: PillarConfig,
    /// Template area as a fraction of the search area, per axis.
    pub template_scale: f64,
    pub pillar_channels: usize,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn paper() -> Self {
        Self {
            search: PillarConfig::car(),
            template_scale: 0.5,
            pillar_channels: 64,
            backbone: BackboneConfig::paper(),
            encoder: EncoderConfig::paper(),
            decoder: DecoderConfig::paper(),
        }
    }

    /// Small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            pillar_channels: 16,
            backbone: BackboneConfig::desk(),
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig::desk(),
            ..Self::paper()
        }
    }

    pub fn template(&self) -> PillarConfig {
        self.search.scaled(self.template_scale)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.search.validate()?;
        self.template().validate()?;
        self.backbone.validate()?;
        for pc in [&self.search, &self.template()] {
            let (h, w) = pc.grid();
            if h % 32 != 0 || w % 32 != 0 {
                return Err(BackboneError::Indivisible { height: h, width: w }.into());
            }
        }
        Ok(())
    }
}

/// Where a pillar grid sits in meters.
pub fn grid_frame(cfg: &PillarConfig) -> GridFrame {
    GridFrame {
        origin: [cfg.area.min[0], cfg.area.min[1]],
        cell: [cfg.pillar_size[0], cfg.pillar_size[1]],
    }
}

/// Pillarized inputs of one (search, template) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairInput {
    pub search: PillarTensor,
    pub template: PillarTensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SmatModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pillar_net: PillarFeatureNet,
    backbone: Backbone,
    encoder: Encoder,
    decoder: Decoder,
}

impl SmatModel {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let pillar_net = PillarFeatureNet::new(&mut ps, &mut rng, "pillar", cfg.pillar_channels);
        let backbone = Backbone::new(&mut ps, &mut rng, "backbone", cfg.pillar_channels, &cfg.backbone)?;
        let encoder = Encoder::new(&mut ps, &mut rng, "encoder", cfg.backbone.channels(), &cfg.encoder)?;
        let decoder = Decoder::new(&mut ps, &mut rng, "decoder", cfg.encoder.width, &cfg.decoder)?;
        Ok(Self {
            cfg: cfg.clone(),
            params: ps,
            pillar_net,
            backbone,
            encoder,
            decoder,
        })
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Pillarizes a pair of crops (search in the crop frame, template in
    /// the target's box frame).
    pub fn prepare(&self, search: &PointCloud, template: &PointCloud, seed: u64) -> PairInput {
        PairInput {
            search: pillarize(search, &self.cfg.search, seed),
            template: pillarize(template, &self.cfg.template(), seed ^ 0x9e37_79b9_7f4a_7c15),
        }
    }

    fn branch(&self, g: &mut Graph, pt: &PillarTensor, cfg: &PillarConfig) -> Result<BranchFeatures, ModelError> {
        let bev = self.pillar_net.forward(g, &self.params, pt);
        let feats = self.backbone.extract(g, &self.params, bev)?;
        Ok(BranchFeatures {
            feats,
            frame: grid_frame(cfg),
        })
    }

    /// Fused stride-4 search map and its metric frame.
    pub fn encode(&self, g: &mut Graph, input: &PairInput) -> Result<(FeatureMap, GridFrame), ModelError> {
        let s = self.branch(g, &input.search, &self.cfg.search)?;
        let t = self.branch(g, &input.template, &self.cfg.template())?;
        let u = self.encoder.forward(g, &self.params, &s, &t)?;
        Ok((u, s.frame.coarsened(4)))
    }

    pub fn forward(&self, g: &mut Graph, input: &PairInput, fixed_selection: Option<&[usize]>) -> Result<DecoderOutput, ModelError> {
        let (u, frame) = self.encode(g, input)?;
        Ok(self.decoder.forward(g, &self.params, u, &frame, fixed_selection)?)
    }

    /// Inference: the final prediction set in the search-crop frame.
    pub fn predict(&self, input: &PairInput) -> Result<PredictionSet, ModelError> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, input, None)?;
        Ok(PredictionSet::from_graph(&g, &out.predictions))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_model_predicts_k_boxes() {
        let m = SmatModel::new(&ModelConfig::desk(), 0).unwrap();
        let pc = PointCloud::new(vec![[0.1, 0.2, -0.5, 0.0], [0.3, -0.2, 0.0, 0.0]]).unwrap();
        let input = m.prepare(&pc, &pc, 1);
        let p = m.predict(&input).unwrap();
        assert_eq!(p.len(), 64);
        assert!(p.boxes.is_finite());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = SmatModel::new(&ModelConfig::desk(), 3).unwrap();
        let b = SmatModel::new(&ModelConfig::desk(), 3).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn template_grid() {
        assert_eq!(ModelConfig::desk().template().grid(), (32, 32));
    }
}
