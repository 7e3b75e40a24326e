//! Per-part texture features, exact Euclidean k-NN and part-grouped
//! recommendation.
//!
//! Neighbor lists are sorted by ascending distance with ties broken by
//! lexicographic image id. Distances are computed from scratch for every
//! query; the index is a flat table, so results equal a linear scan.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::model::Model;

/// Default score threshold for a step to open a recommendation group.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartFeature {
    pub image_id: String,
    /// 1-based attention step.
    pub step: usize,
    pub feature: Vec<f64>,
    pub scores: Vec<f64>,
    pub top_label: usize,
    pub top_score: f64,
}

impl PartFeature {
    pub fn new(image_id: impl Into<String>, step: usize, feature: Vec<f64>, scores: Vec<f64>) -> Self {
        let (top_label, top_score) = argmax(&scores);
        PartFeature {
            image_id: image_id.into(),
            step,
            feature,
            scores,
            top_label,
            top_score,
        }
    }
}

/// First index of the largest value.
fn argmax(v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &x) in v.iter().enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFeatures {
    pub image_id: String,
    pub parts: Vec<PartFeature>,
    /// Normalized concatenation of the per-step features.
    pub whole: Vec<f64>,
}

pub fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / (n + 1e-12)).collect()
}

/// Runs the model on one image. Values are rounded to 32-bit floats, the
/// precision of the feature file, so stored and in-memory features agree.
pub fn extract_part_features(model: &Model, image_id: &str, image: &Tensor) -> Result<ImageFeatures> {
    let inf = model.infer(image)?;
    let round = |v: &[f64]| -> Vec<f64> { v.iter().map(|&x| x as f32 as f64).collect() };
    let parts: Vec<PartFeature> = inf
        .steps
        .iter()
        .enumerate()
        .map(|(t, s)| PartFeature::new(image_id, t + 1, round(&s.part_feature), round(&s.scores)))
        .collect();
    let concat: Vec<f64> = parts.iter().flat_map(|p| p.feature.iter().copied()).collect();
    Ok(ImageFeatures {
        image_id: image_id.to_string(),
        whole: round(&l2_normalized(&concat)),
        parts,
    })
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub image_id: String,
    pub distance: f64,
}

fn neighbor_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    a.distance
        .total_cmp(&b.distance)
        .then_with(|| a.image_id.cmp(&b.image_id))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbors {
    pub hits: Vec<Neighbor>,
    /// Set when fewer than `k` candidates were available.
    pub truncated: bool,
}

/// Keeps the `k` best of `candidates` under the distance/id order.
pub fn top_k(mut candidates: Vec<Neighbor>, k: usize) -> Result<Neighbors> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    candidates.sort_by(neighbor_order);
    let truncated = candidates.len() < k;
    candidates.truncate(k);
    Ok(Neighbors {
        hits: candidates,
        truncated,
    })
}

/// How a gallery image is compared with a query.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RetrievalMode {
    /// Distance between whole-image features.
    Whole,
    /// Smallest distance between any query step and any gallery step.
    Parts,
}

#[derive(Clone, Debug)]
pub struct GalleryIndex {
    images: Vec<ImageFeatures>,
    item_ids: HashMap<String, String>,
    labels: HashMap<String, Vec<usize>>,
}

impl GalleryIndex {
    /// `item_ids` maps image ids to ground-truth items; missing entries
    /// default to the image id. `labels` holds ground-truth class indices
    /// used by the recommendation metric.
    pub fn build(
        images: Vec<ImageFeatures>,
        item_ids: HashMap<String, String>,
        labels: HashMap<String, Vec<usize>>,
    ) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Invalid("gallery is empty".into()));
        }
        let mut seen = HashSet::new();
        let dim = images[0].whole.len();
        for im in &images {
            if !seen.insert(im.image_id.as_str()) {
                return Err(Error::DuplicateImageId(im.image_id.clone()));
            }
            if im.whole.len() != dim {
                return Err(Error::Invalid(format!(
                    "gallery image {:?} has feature dim {}, expected {dim}",
                    im.image_id,
                    im.whole.len()
                )));
            }
        }
        Ok(GalleryIndex {
            images,
            item_ids,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn images(&self) -> &[ImageFeatures] {
        &self.images
    }

    pub fn item_of<'a>(&'a self, image_id: &'a str) -> &'a str {
        self.item_ids.get(image_id).map(String::as_str).unwrap_or(image_id)
    }

    pub fn labels_of(&self, image_id: &str) -> &[usize] {
        self.labels.get(image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    fn candidates(&self, exclude: Option<&str>, dist: impl Fn(&ImageFeatures) -> f64) -> Vec<Neighbor> {
        self.images
            .iter()
            .filter(|im| Some(im.image_id.as_str()) != exclude)
            .map(|im| Neighbor {
                image_id: im.image_id.clone(),
                distance: dist(im),
            })
            .collect()
    }

    /// Nearest gallery images to a whole-image feature.
    pub fn knn_euclidean(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Result<Neighbors> {
        top_k(self.candidates(exclude, |im| euclidean(query, &im.whole)), k)
    }

    /// Nearest gallery images to one part feature; a gallery image's
    /// distance is that of its closest step.
    pub fn knn_part(&self, query: &[f64], k: usize, exclude: Option<&str>) -> Result<Neighbors> {
        top_k(
            self.candidates(exclude, |im| {
                im.parts
                    .iter()
                    .map(|p| euclidean(query, &p.feature))
                    .fold(f64::INFINITY, f64::min)
            }),
            k,
        )
    }

    pub fn query(&self, q: &ImageFeatures, mode: RetrievalMode, k: usize, exclude_self: bool) -> Result<Neighbors> {
        let exclude = exclude_self.then_some(q.image_id.as_str());
        match mode {
            RetrievalMode::Whole => self.knn_euclidean(&q.whole, k, exclude),
            RetrievalMode::Parts => top_k(
                self.candidates(exclude, |im| {
                    let mut best = f64::INFINITY;
                    for a in &q.parts {
                        for b in &im.parts {
                            best = best.min(euclidean(&a.feature, &b.feature));
                        }
                    }
                    best
                }),
                k,
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopkReport {
    pub ks: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub evaluated: usize,
    /// Queries whose item has no image in the gallery.
    pub uncovered: usize,
}

/// Fraction of queries with a same-item gallery image among the top `k`.
/// Each query is `(features, item_id)`.
pub fn topk_accuracy(
    index: &GalleryIndex,
    queries: &[(ImageFeatures, String)],
    ks: &[usize],
    mode: RetrievalMode,
    exclude_self: bool,
) -> Result<TopkReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Invalid("ks must be nonempty and positive".into()));
    }
    let kmax = *ks.iter().max().unwrap();
    let mut hits = vec![0usize; ks.len()];
    let (mut evaluated, mut uncovered) = (0, 0);
    for (q, item) in queries {
        let covered = index.images.iter().any(|im| {
            index.item_of(&im.image_id) == item && !(exclude_self && im.image_id == q.image_id)
        });
        if !covered {
            uncovered += 1;
            continue;
        }
        evaluated += 1;
        let nn = index.query(q, mode, kmax, exclude_self)?;
        let first = nn.hits.iter().position(|n| index.item_of(&n.image_id) == item);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first.is_some_and(|r| r < k) {
                *h += 1;
            }
        }
    }
    let denom = evaluated.max(1) as f64;
    Ok(TopkReport {
        ks: ks.to_vec(),
        accuracy: hits.iter().map(|&h| h as f64 / denom).collect(),
        evaluated,
        uncovered,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationGroup {
    pub part_label: usize,
    pub part_name: String,
    pub part_score: f64,
    pub step: usize,
    pub neighbors: Vec<Neighbor>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub query_id: String,
    pub groups: Vec<RecommendationGroup>,
    /// No step reached the threshold; the single group uses the whole-image
    /// feature.
    pub fallback: bool,
}

/// Groups steps whose top score reaches `tau` by their top label, keeping
/// the higher-scoring step per label, and retrieves `k_per_group` gallery
/// images for each group.
pub fn recommend_by_parts(
    index: &GalleryIndex,
    query: &ImageFeatures,
    vocabulary: &[String],
    k_per_group: usize,
    tau: f64,
    exclude_self: bool,
) -> Result<Recommendation> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Invalid(format!("tau must lie in [0, 1], got {tau}")));
    }
    let exclude = exclude_self.then_some(query.image_id.as_str());
    let name = |l: usize| vocabulary.get(l).cloned().unwrap_or_else(|| l.to_string());
    let mut best: Vec<&PartFeature> = Vec::new();
    for p in query.parts.iter().filter(|p| p.top_score >= tau) {
        match best.iter_mut().find(|b| b.top_label == p.top_label) {
            Some(b) if p.top_score > b.top_score => *b = p,
            Some(_) => {}
            None => best.push(p),
        }
    }
    if best.is_empty() {
        let (label, score) = query
            .parts
            .iter()
            .map(|p| (p.top_label, p.top_score))
            .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        let nn = index.knn_euclidean(&query.whole, k_per_group, exclude)?;
        return Ok(Recommendation {
            query_id: query.image_id.clone(),
            groups: vec![RecommendationGroup {
                part_label: label,
                part_name: name(label),
                part_score: score,
                step: 0,
                neighbors: nn.hits,
            }],
            fallback: true,
        });
    }
    best.sort_by(|a, b| b.top_score.total_cmp(&a.top_score).then(a.step.cmp(&b.step)));
    let groups = best
        .into_iter()
        .map(|p| {
            Ok(RecommendationGroup {
                part_label: p.top_label,
                part_name: name(p.top_label),
                part_score: p.top_score,
                step: p.step,
                neighbors: index.knn_part(&p.feature, k_per_group, exclude)?.hits,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Recommendation {
        query_id: query.image_id.clone(),
        groups,
        fallback: false,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecommendationScore {
    pub groups: usize,
    pub neighbors: usize,
    pub hits: usize,
    pub precision: f64,
}

/// A neighbor is a hit when its image carries the group's part label and
/// that label is also a true label of the query.
pub fn recommendation_precision(
    index: &GalleryIndex,
    recs: &[(Recommendation, Vec<usize>)],
) -> RecommendationScore {
    let mut s = RecommendationScore::default();
    for (rec, truth) in recs {
        for g in &rec.groups {
            s.groups += 1;
            for n in &g.neighbors {
                s.neighbors += 1;
                if truth.contains(&g.part_label) && index.labels_of(&n.image_id).contains(&g.part_label) {
                    s.hits += 1;
                }
            }
        }
    }
    s.precision = s.hits as f64 / s.neighbors.max(1) as f64;
    s
}
