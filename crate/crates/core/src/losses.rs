//! Training objectives: classification, localization and divergence.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};

/// Scale above which part glimpses are penalized.
pub const SCALE_MARGIN: f64 = 0.5;
const MASK_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub loc: f64,
    pub div: f64,
}

impl Default for LossWeights {
    /// Reference factors: 1 for classification and localization, 0.01 for
    /// divergence.
    fn default() -> Self {
        LossWeights {
            cls: 1.0,
            loc: 1.0,
            div: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.cls, self.loc, self.div].iter().any(|w| w.is_nan() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cls: f64,
    pub loc: f64,
    pub div: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.cls, self.loc, self.div, self.total].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for b in items {
            out.cls += b.cls;
            out.loc += b.loc;
            out.div += b.div;
            out.total += b.total;
        }
        out.cls /= n;
        out.loc /= n;
        out.div /= n;
        out.total /= n;
        out
    }
}

pub fn total_loss(cls: f64, loc: f64, div: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        cls,
        loc,
        div,
        total: weights.cls * cls + weights.loc * loc + weights.div * div,
    }
}

/// Mean squared distance between pooled scores and the multi-hot target.
pub fn classification_loss(g: &mut Graph, pooled: Var, target: Var) -> Result<Var> {
    if g.shape(pooled) != g.shape(target) {
        return Err(Error::ShapeMismatch {
            op: "classification_loss",
            lhs: g.shape(pooled).to_vec(),
            rhs: g.shape(target).to_vec(),
        });
    }
    let diff = g.sub(pooled, target)?;
    let sq = g.square(diff);
    g.mean(sq, None)
}

/// Mean cosine similarity of consecutive attention masks.
pub fn divergence_loss(g: &mut Graph, masks: &[Var]) -> Result<Var> {
    if masks.len() < 2 {
        return Err(Error::Invalid("divergence loss needs at least two masks".into()));
    }
    let normed: Vec<Var> = masks.iter().map(|&m| g.l2_normalize(m, MASK_NORM_EPS)).collect();
    let mut terms = Vec::with_capacity(masks.len() - 1);
    for pair in normed.windows(2) {
        let prod = g.mul(pair[0], pair[1])?;
        let dot = g.sum(prod, None)?;
        terms.push(g.reshape(dot, &[1])?);
    }
    let all = g.concat(&terms, 0)?;
    g.mean(all, None)
}

/// Hinge on glimpse scales above [`SCALE_MARGIN`], averaged over steps 2..T.
/// `params` holds one `[4]` transform per step; the first is exempt.
pub fn localization_loss(g: &mut Graph, params: &[Var]) -> Result<Var> {
    if params.len() < 2 {
        return Err(Error::Invalid("localization loss needs at least two steps".into()));
    }
    let mut terms = Vec::with_capacity(params.len() - 1);
    for &p in &params[1..] {
        let scales = g.narrow(p, 0, 0, 2)?;
        let excess = g.add_scalar(scales, -SCALE_MARGIN);
        let hinge = g.relu(excess);
        let sq = g.square(hinge);
        terms.push(g.sum(sq, Some(0))?);
    }
    let terms: Vec<Var> = terms
        .into_iter()
        .map(|t| g.reshape(t, &[1]))
        .collect::<Result<_>>()?;
    let all = g.concat(&terms, 0)?;
    g.mean(all, None)
}

/// `w_cls·cls + w_loc·loc + w_div·div` as a graph scalar.
pub fn weighted_total(g: &mut Graph, cls: Var, loc: Var, div: Var, w: &LossWeights) -> Result<Var> {
    let a = g.mul_scalar(cls, w.cls);
    let b = g.mul_scalar(loc, w.loc);
    let c = g.mul_scalar(div, w.div);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_weights() {
        let b = total_loss(0.5, 0.0, 1.0, &LossWeights::default());
        assert!((b.total - 0.51).abs() < 1e-15);
        assert_eq!(total_loss(0.0, 0.0, 0.0, &LossWeights::default()).total, 0.0);
    }

    #[test]
    fn classification_of_exact_scores_is_zero() {
        let mut g = Graph::new();
        let s = g.constant(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        let t = g.constant(&[3], vec![1.0, 0.0, 1.0]).unwrap();
        let l = classification_loss(&mut g, s, t).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn classification_dim_mismatch() {
        let mut g = Graph::new();
        let s = g.constant(&[3], vec![0.0; 3]).unwrap();
        let t = g.constant(&[4], vec![0.0; 4]).unwrap();
        assert!(classification_loss(&mut g, s, t).is_err());
    }

    #[test]
    fn divergence_identical_and_disjoint() {
        let mut g = Graph::new();
        let m = g.constant(&[2, 2], vec![0.25; 4]).unwrap();
        let l = divergence_loss(&mut g, &[m, m, m]).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-10);
        let a = g.constant(&[2, 2], vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        let b = g.constant(&[2, 2], vec![0.0, 0.0, 0.5, 0.5]).unwrap();
        let l = divergence_loss(&mut g, &[a, b]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn localization_hinge() {
        let mut g = Graph::new();
        let first = g.constant(&[4], vec![0.9, 0.9, 0.0, 0.0]).unwrap();
        let small = g.constant(&[4], vec![0.5, 0.3, 0.2, -0.1]).unwrap();
        let l = localization_loss(&mut g, &[first, small, small]).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let wide = g.constant(&[4], vec![1.0, 0.4, 0.0, 0.0]).unwrap();
        let l = localization_loss(&mut g, &[first, wide, small]).unwrap();
        assert!((g.scalar(l) - 0.25 / 2.0).abs() < 1e-15);
    }
}
