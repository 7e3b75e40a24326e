//! The full network: backbone, recurrent attention, texture encoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AffineParams, AttentionConfig, AttentionNet, Unrolled};
use crate::autograd::{Graph, Tensor, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::formats::load_checkpoint;
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    /// Texture codewords `K`.
    pub codewords: usize,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            attention: AttentionConfig::default(),
            codewords: 32,
            classes: 59,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.attention.validate()?;
        if self.codewords == 0 || self.classes == 0 {
            return Err(Error::Config("codewords and classes must be positive".into()));
        }
        Ok(())
    }

    /// Dimension of one part feature, `K·D`.
    pub fn feature_dim(&self) -> usize {
        self.codewords * self.backbone.descriptor_dim()
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub feature_map: Var,
    pub unrolled: Unrolled,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub cls: Var,
    pub loc: Var,
    pub div: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            cls: g.scalar(self.cls),
            loc: g.scalar(self.loc),
            div: g.scalar(self.div),
            total: g.scalar(self.total),
        }
    }
}

/// One attention step evaluated without gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub params: AffineParams,
    pub mask: Vec<f64>,
    pub degenerate: bool,
    pub scores: Vec<f64>,
    pub part_feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub steps: Vec<StepResult>,
    pub pooled: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub attention: AttentionNet,
}

impl Model {
    /// Freshly initialized parameters from a seeded generator.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(config.backbone, &mut store, &mut rng)?;
        let attention = AttentionNet::new(
            config.attention,
            config.backbone.descriptor_dim(),
            config.codewords,
            config.classes,
            &mut store,
            &mut rng,
        )?;
        Ok(Model {
            config,
            store,
            backbone,
            attention,
        })
    }

    /// Builds the model for `config` and loads checkpointed values, which
    /// must match its parameter names and shapes.
    pub fn from_checkpoint(config: ModelConfig, path: &Path) -> Result<Self> {
        let mut m = Model::new(config, 0)?;
        let named = load_checkpoint(path)?;
        m.store.load_values(named).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: format!("checkpoint does not match the configured model: {e}"),
        })?;
        Ok(m)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Forward> {
        let feature_map = self.backbone.forward(g, p, image)?;
        let unrolled = self.attention.unroll(g, p, feature_map)?;
        Ok(Forward { feature_map, unrolled })
    }

    pub fn loss(&self, g: &mut Graph, fwd: &Forward, target: Var, weights: &LossWeights) -> Result<LossVars> {
        let steps = &fwd.unrolled.steps;
        let cls = losses::classification_loss(g, fwd.unrolled.pooled, target)?;
        let params: Vec<Var> = steps.iter().map(|s| s.params).collect();
        let loc = losses::localization_loss(g, &params)?;
        let masks: Vec<Var> = steps.iter().map(|s| s.mask).collect();
        let div = losses::divergence_loss(g, &masks)?;
        let total = losses::weighted_total(g, cls, loc, div, weights)?;
        Ok(LossVars { cls, loc, div, total })
    }

    pub fn infer(&self, image: &Tensor) -> Result<Inference> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(image.shape(), image.data().to_vec())?;
        let fwd = self.forward(&mut g, &p, x)?;
        let steps = fwd
            .unrolled
            .steps
            .iter()
            .map(|s| StepResult {
                params: AffineParams::from_slice(g.value(s.params)),
                mask: g.value(s.mask).to_vec(),
                degenerate: s.degenerate,
                scores: g.value(s.scores).to_vec(),
                part_feature: g.value(s.part_feature).to_vec(),
            })
            .collect();
        Ok(Inference {
            steps,
            pooled: g.value(fwd.unrolled.pooled).to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                input_height: 16,
                input_width: 16,
                channels: [2, 3, 4],
            },
            attention: AttentionConfig {
                steps: 2,
                hidden: 3,
                region_height: 2,
                region_width: 2,
            },
            codewords: 2,
            classes: 3,
        }
    }

    #[test]
    fn inference_shapes() {
        let m = Model::new(tiny_config(), 5).unwrap();
        let img = Tensor::full(&[16, 16, 3], 0.5);
        let out = m.infer(&img).unwrap();
        assert_eq!(out.steps.len(), 2);
        assert_eq!(out.pooled.len(), 3);
        for s in &out.steps {
            assert_eq!(s.part_feature.len(), 8);
            assert_eq!(s.mask.len(), 4);
            assert!(s.params.is_valid());
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(tiny_config(), 11).unwrap();
        let b = Model::new(tiny_config(), 11).unwrap();
        assert_eq!(a.store, b.store);
    }
}
