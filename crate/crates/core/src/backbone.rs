//! Six-layer convolutional feature extractor.
//!
//! Three blocks of `[conv3x3 -> relu -> conv3x3 -> relu -> maxpool2]`, so the
//! feature map is 1/8 of the input in each spatial direction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_tensor, Bound, ParamId, ParamStore};

pub const POOL_FACTOR: usize = 8;
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Output channels of the three blocks; the last is the descriptor dim.
    pub channels: [usize; 3],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_height: 96,
            input_width: 64,
            channels: [32, 64, 64],
        }
    }
}

impl BackboneConfig {
    pub fn descriptor_dim(&self) -> usize {
        self.channels[2]
    }

    pub fn feature_height(&self) -> usize {
        self.input_height / POOL_FACTOR
    }

    pub fn feature_width(&self) -> usize {
        self.input_width / POOL_FACTOR
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_height == 0
            || self.input_width == 0
            || !self.input_height.is_multiple_of(POOL_FACTOR)
            || !self.input_width.is_multiple_of(POOL_FACTOR)
        {
            return Err(Error::Config(format!(
                "input size {}x{} must be a positive multiple of {POOL_FACTOR}",
                self.input_height, self.input_width
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("backbone channels must be positive".into()));
        }
        Ok(())
    }
}

/// Backbone output: an `height × width` grid of `dim`-dimensional descriptors,
/// row-major and channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * dim || height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidShape {
                op: "feature_map",
                shape: vec![height, width, dim],
                reason: format!("{} values supplied", values.len()),
            });
        }
        Ok(FeatureMap {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        &self.values[(y * self.width + x) * self.dim..][..self.dim]
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.height, self.width, self.dim]
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    layers: Vec<ConvLayer>,
}

impl Backbone {
    pub fn new(config: BackboneConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut layers = Vec::with_capacity(6);
        let mut cin = IMAGE_CHANNELS;
        for (b, &cout) in config.channels.iter().enumerate() {
            for c in 0..2 {
                let fan_in = cin * 9;
                let kernel = store.insert(
                    format!("backbone.block{b}.conv{c}.weight"),
                    kaiming_tensor(&[cout, cin, 3, 3], fan_in, rng),
                );
                let bias = store.insert(format!("backbone.block{b}.conv{c}.bias"), Tensor::zeros(&[cout]));
                layers.push(ConvLayer { kernel, bias });
                cin = cout;
            }
        }
        Ok(Backbone { config, layers })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `[H, W, 3]` image -> `[H/8, W/8, D]` feature map.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let expected = [self.config.input_height, self.config.input_width, IMAGE_CHANNELS];
        if g.shape(image) != expected {
            return Err(Error::ShapeMismatch {
                op: "extract_features",
                lhs: expected.to_vec(),
                rhs: g.shape(image).to_vec(),
            });
        }
        let mut x = image;
        for pair in self.layers.chunks(2) {
            for layer in pair {
                let y = g.conv2d(x, p[layer.kernel], 1, 1)?;
                let y = g.add(y, p[layer.bias])?;
                x = g.relu(y);
            }
            x = g.maxpool2d(x, 2)?;
        }
        Ok(x)
    }
}

/// Runs the backbone without recording gradients.
pub fn extract_features(backbone: &Backbone, store: &ParamStore, image: &Tensor) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(image.shape(), image.data().to_vec())?;
    let fm = backbone.forward(&mut g, &p, x)?;
    let s = g.shape(fm).to_vec();
    FeatureMap::new(s[0], s[1], s[2], g.value(fm).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Backbone, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = BackboneConfig {
            input_height: 96,
            input_width: 64,
            channels: [4, 4, 6],
        };
        let b = Backbone::new(cfg, &mut store, &mut rng).unwrap();
        (b, store)
    }

    #[test]
    fn output_is_one_eighth() {
        let (b, store) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::new(&[96, 64, 3], (0..96 * 64 * 3).map(|_| rng.random::<f64>()).collect()).unwrap();
        let fm = extract_features(&b, &store, &img).unwrap();
        assert_eq!(fm.shape(), [12, 8, 6]);
        let again = extract_features(&b, &store, &img).unwrap();
        assert_eq!(fm, again);
    }

    #[test]
    fn zero_image_gives_zero_map() {
        let (b, store) = small();
        let fm = extract_features(&b, &store, &Tensor::zeros(&[96, 64, 3])).unwrap();
        assert!(fm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let (b, store) = small();
        let err = extract_features(&b, &store, &Tensor::zeros(&[64, 96, 3])).unwrap_err();
        assert!(err.to_string().contains("extract_features"));
    }

    #[test]
    fn config_requires_multiple_of_eight() {
        let cfg = BackboneConfig {
            input_height: 100,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        assert_eq!(BackboneConfig::default().descriptor_dim(), 64);
    }
}
