//! Multi-label evaluation: average precision, top-6 assignment and the
//! attention localization diagnostic.
//!
//! Rankings sort scores descending and keep the original order among equal
//! scores; AP depends on this rule when scores tie.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, PartBox};
use crate::error::{Error, Result};
use crate::model::Model;

/// Number of labels assigned per image by the top-k protocol.
pub const TOP_LABELS: usize = 6;

/// `(1/R)·Σ precision@r` over the ranks `r` of relevant items; `None` when
/// nothing is relevant.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Indices sorted by descending score, stable among ties.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// AP of a score list against binary relevance.
pub fn ranked_ap(scores: &[f64], relevant: &[bool]) -> Option<f64> {
    let order = rank_descending(scores);
    let rel: Vec<bool> = order.iter().map(|&i| relevant[i]).collect();
    average_precision(&rel)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopLabels {
    pub indices: Vec<usize>,
    /// Fewer than the requested number of classes exist.
    pub flagged: bool,
}

/// The `n` highest-scoring classes, ties going to the lower index.
pub fn predict_top_n(scores: &[f64], n: usize) -> TopLabels {
    let mut order = rank_descending(scores);
    let flagged = scores.len() < n;
    order.truncate(n);
    TopLabels {
        indices: order,
        flagged,
    }
}

pub fn predict_top6(scores: &[f64]) -> TopLabels {
    predict_top_n(scores, TOP_LABELS)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultilabelReport {
    pub images: usize,
    pub classes: usize,
    pub ap_all: f64,
    pub map: f64,
    /// Classes with at least one positive, i.e. those averaged into `map`.
    pub map_classes: usize,
    pub top6_precision: f64,
    pub top6_recall: f64,
    pub top6_flagged: bool,
    /// Fraction of images whose top-|labels| prediction equals the label set.
    pub exact_set_match: f64,
}

/// Metrics from per-image class scores and multi-hot targets.
pub fn evaluate_scores(scores: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<MultilabelReport> {
    if scores.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty set".into()));
    }
    let c = scores[0].len();
    if targets.len() != scores.len() || scores.iter().chain(targets).any(|v| v.len() != c) {
        return Err(Error::Invalid("score and target dims differ".into()));
    }
    let flat_s: Vec<f64> = scores.iter().flatten().copied().collect();
    let flat_t: Vec<bool> = targets.iter().flatten().map(|&t| t > 0.5).collect();
    let ap_all = ranked_ap(&flat_s, &flat_t).unwrap_or(0.0);
    let per_class: Vec<f64> = (0..c)
        .filter_map(|j| {
            let s: Vec<f64> = scores.iter().map(|v| v[j]).collect();
            let t: Vec<bool> = targets.iter().map(|v| v[j] > 0.5).collect();
            ranked_ap(&s, &t)
        })
        .collect();
    let map = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    let (mut tp, mut predicted, mut positives, mut exact) = (0usize, 0usize, 0usize, 0usize);
    let mut flagged = false;
    for (s, t) in scores.iter().zip(targets) {
        let truth: Vec<usize> = (0..c).filter(|&j| t[j] > 0.5).collect();
        let top = predict_top6(s);
        flagged |= top.flagged;
        predicted += top.indices.len();
        positives += truth.len();
        tp += top.indices.iter().filter(|i| truth.contains(i)).count();
        let mut k = predict_top_n(s, truth.len()).indices;
        k.sort_unstable();
        if k == truth {
            exact += 1;
        }
    }
    let n = scores.len();
    Ok(MultilabelReport {
        images: n,
        classes: c,
        ap_all,
        map,
        map_classes: per_class.len(),
        top6_precision: tp as f64 / predicted.max(1) as f64,
        top6_recall: tp as f64 / positives.max(1) as f64,
        top6_flagged: flagged,
        exact_set_match: exact as f64 / n as f64,
    })
}

/// Fraction of each feature cell covered by the union of the boxes, with
/// boxes in image pixels.
pub fn box_coverage(boxes: &[PartBox], img_h: usize, img_w: usize, hf: usize, wf: usize) -> Vec<f64> {
    let (ch, cw) = (img_h / hf, img_w / wf);
    let mut out = Vec::with_capacity(hf * wf);
    for i in 0..hf {
        for j in 0..wf {
            let mut inside = 0usize;
            for y in i * ch..(i + 1) * ch {
                for x in j * cw..(j + 1) * cw {
                    if boxes.iter().any(|b| b.contains(x, y)) {
                        inside += 1;
                    }
                }
            }
            out.push(inside as f64 / (ch * cw) as f64);
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    /// Mean mask mass on part boxes over images and scored steps.
    pub mass: f64,
    /// Mean box area fraction, the mass of a uniform mask.
    pub baseline: f64,
    pub ratio: f64,
    pub masks: usize,
}

/// Mask mass inside part boxes for steps `first_step..` (0-based), against
/// the area-proportional baseline.
pub fn localization_mass(
    masks: &[(Vec<Vec<f64>>, Vec<PartBox>)],
    img_h: usize,
    img_w: usize,
    hf: usize,
    wf: usize,
    first_step: usize,
) -> LocalizationReport {
    let (mut mass, mut base, mut n) = (0.0, 0.0, 0usize);
    for (steps, boxes) in masks {
        let cov = box_coverage(boxes, img_h, img_w, hf, wf);
        let b = cov.iter().sum::<f64>() / cov.len() as f64;
        for m in steps.iter().skip(first_step) {
            mass += m.iter().zip(&cov).map(|(a, c)| a * c).sum::<f64>();
            base += b;
            n += 1;
        }
    }
    let d = n.max(1) as f64;
    LocalizationReport {
        mass: mass / d,
        baseline: base / d,
        ratio: if base > 0.0 { mass / base } else { 0.0 },
        masks: n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MultilabelReport,
    /// Present when the manifest records part boxes.
    pub localization: Option<LocalizationReport>,
}

/// Runs the model over a manifest and scores its pooled predictions.
pub fn evaluate_multilabel(model: &Model, manifest: &DatasetManifest) -> Result<Evaluation> {
    if manifest.is_empty() {
        return Err(Error::Invalid("evaluation manifest is empty".into()));
    }
    if manifest.num_classes() != model.config.classes {
        return Err(Error::Config(format!(
            "model has {} classes but the manifest vocabulary has {}",
            model.config.classes,
            manifest.num_classes()
        )));
    }
    let bc = model.config.backbone;
    let (h, w) = (bc.input_height, bc.input_width);
    let mut scores = Vec::with_capacity(manifest.len());
    let mut targets = Vec::with_capacity(manifest.len());
    let mut masks = Vec::new();
    for r in &manifest.records {
        let out = model.infer(&manifest.load_tensor(r, h, w)?)?;
        scores.push(out.pooled);
        targets.push(manifest.target(r));
        if !r.parts.is_empty() {
            let m = out.steps.into_iter().map(|s| s.mask).collect();
            masks.push((m, r.parts.iter().map(|p| p.bbox).collect()));
        }
    }
    let localization = (!masks.is_empty())
        .then(|| localization_mass(&masks, h, w, bc.feature_height(), bc.feature_width(), 1));
    Ok(Evaluation {
        report: evaluate_scores(&scores, &targets)?,
        localization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_rank_two() {
        assert_eq!(average_precision(&[true, true, false]), Some(1.0));
        assert_eq!(average_precision(&[false, true]), Some(0.5));
        assert_eq!(average_precision(&[false, false]), None);
    }

    #[test]
    fn top6_ties_and_flag() {
        let s: Vec<f64> = (0..10).map(|i| -(i as f64)).collect();
        assert_eq!(predict_top6(&s).indices, vec![0, 1, 2, 3, 4, 5]);
        let mut t = vec![0.0; 10];
        t[5] = 0.5;
        t[7] = 0.5;
        for v in t.iter_mut().take(5) {
            *v = 1.0;
        }
        assert_eq!(predict_top6(&t).indices, vec![0, 1, 2, 3, 4, 5]);
        let small = predict_top6(&[0.1, 0.9]);
        assert!(small.flagged);
        assert_eq!(small.indices, vec![1, 0]);
    }

    #[test]
    fn perfect_scorer() {
        let t = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
        let r = evaluate_scores(&t, &t).unwrap();
        assert_eq!((r.ap_all, r.map, r.exact_set_match), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_set_rejected() {
        assert!(evaluate_scores(&[], &[]).is_err());
    }

    #[test]
    fn coverage_of_full_and_half_boxes() {
        let full = [PartBox { x0: 0, y0: 0, x1: 16, y1: 16 }];
        assert!(box_coverage(&full, 16, 16, 2, 2).iter().all(|&c| c == 1.0));
        let left = [PartBox { x0: 0, y0: 0, x1: 4, y1: 16 }];
        assert_eq!(box_coverage(&left, 16, 16, 2, 2), vec![0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn uniform_mask_hits_baseline() {
        let boxes = vec![PartBox { x0: 0, y0: 0, x1: 8, y1: 8 }];
        let m = vec![vec![0.25; 4]; 3];
        let r = localization_mass(&[(m, boxes)], 16, 16, 2, 2, 1);
        assert!((r.ratio - 1.0).abs() < 1e-12);
        assert_eq!(r.masks, 2);
    }
}
