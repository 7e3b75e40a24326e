//! Orderless texture encoder: soft assignment of region descriptors to
//! learned codewords, residual aggregation and a sigmoid classifier.

use rand::Rng;

use crate::autograd::{kernels, softplus, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, Bound, ParamId, ParamStore};

pub const NORM_EPS: f64 = 1e-12;
pub const CODEWORD_INIT_STD: f64 = 0.5;

/// `K` codewords of dimension `D` plus unconstrained smoothing parameters
/// (`s_k = softplus(raw_k)`).
#[derive(Clone, Copy, Debug)]
pub struct Codebook {
    pub codewords: ParamId,
    pub smoothing_raw: ParamId,
    pub size: usize,
    pub dim: usize,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if size == 0 || dim == 0 {
            return Err(Error::Config("codebook needs at least one codeword".into()));
        }
        let codewords = store.insert(
            "texture.codewords",
            normal_tensor(&[size, dim], CODEWORD_INIT_STD, rng),
        );
        let smoothing_raw = store.insert("texture.smoothing_raw", Tensor::zeros(&[size]));
        Ok(Codebook {
            codewords,
            smoothing_raw,
            size,
            dim,
        })
    }

    pub fn encoded_dim(&self) -> usize {
        self.size * self.dim
    }

    /// `[n, D]` descriptors -> L2-normalized `[1, K·D]` vector.
    pub fn encode(&self, g: &mut Graph, p: &Bound, descriptors: Var) -> Result<Var> {
        let s = g.shape(descriptors);
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![self.size, self.dim],
                rhs: s.to_vec(),
            });
        }
        let smoothing = g.softplus(p[self.smoothing_raw]);
        let agg = g.texture_encode(descriptors, p[self.codewords], smoothing)?;
        let flat = g.reshape(agg, &[1, self.encoded_dim()])?;
        Ok(g.l2_normalize(flat, NORM_EPS))
    }
}

/// Linear map to per-class scores followed by a sigmoid.
#[derive(Clone, Copy, Debug)]
pub struct Classifier {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub classes: usize,
}

impl Classifier {
    pub fn new(inputs: usize, classes: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let weight = store.insert(
            "texture.classifier.weight",
            normal_tensor(&[inputs, classes], (1.0 / inputs as f64).sqrt(), rng),
        );
        let bias = store.insert("texture.classifier.bias", Tensor::zeros(&[classes]));
        Classifier {
            weight,
            bias,
            inputs,
            classes,
        }
    }

    pub fn classify(&self, g: &mut Graph, p: &Bound, encoded: Var) -> Result<Var> {
        let z = g.matmul(encoded, p[self.weight])?;
        let z = g.add(z, p[self.bias])?;
        Ok(g.sigmoid(z))
    }
}

/// Positive smoothing factors from their raw parameters.
pub fn smoothing_factors(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&r| softplus(r)).collect()
}

/// Plain evaluation of the encoding; returns the normalized vector and the
/// `[n, K]` assignment matrix.
pub fn encode_values(
    descriptors: &[f64],
    dim: usize,
    codewords: &[f64],
    smoothing: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim == 0 || descriptors.is_empty() || !descriptors.len().is_multiple_of(dim) || codewords.len() != smoothing.len() * dim {
        return Err(Error::ShapeMismatch {
            op: "encode",
            lhs: vec![smoothing.len(), dim],
            rhs: vec![descriptors.len()],
        });
    }
    let (agg, assign) = kernels::texture_encode_forward(descriptors, codewords, smoothing, dim);
    let norm = agg.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((agg.iter().map(|v| v / (norm + NORM_EPS)).collect(), assign))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_codeword_gets_full_weight() {
        let x = [0.5, -1.0, 2.0, 0.0, 1.0, 1.0];
        let (v, a) = encode_values(&x, 2, &[0.1, 0.2], &[0.7]).unwrap();
        assert!(a.iter().all(|&w| w == 1.0));
        let raw: [f64; 2] = [0.5 + 2.0 + 1.0 - 0.3, -1.0 + 0.0 + 1.0 - 0.6];
        let n = (raw[0] * raw[0] + raw[1] * raw[1]).sqrt();
        assert!((v[0] - raw[0] / n).abs() < 1e-12);
        assert!((v[1] - raw[1] / n).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_gives_zero_vector() {
        let c = [0.3, -0.2];
        let x = [0.3, -0.2, 0.3, -0.2];
        let (v, _) = encode_values(&x, 2, &c, &[1.0]).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn dim_mismatch_rejected() {
        assert!(encode_values(&[1.0, 2.0, 3.0], 2, &[0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_classifier_scores_half() {
        let mut store = ParamStore::new();
        let mut rng = rand::rng();
        let clf = Classifier::new(3, 4, &mut store, &mut rng);
        store.get_mut(clf.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(&[1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let s = clf.classify(&mut g, &p, x).unwrap();
        assert_eq!(g.value(s), &[0.5; 4]);
    }
}
