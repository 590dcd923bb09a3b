//! Retrieval protocol and metrics: gallery ranking, CMC rank-k, mAP, and a
//! linear domain probe used as an alignment diagnostic.

use crate::backbone::{FeatureExtractor, VideoFeature};
use crate::datamodel::{load_clip, sample_frame_indices, DomainLabel, FrameSampling, ReIDDataset, SplitPolicy};
use crate::error::{Error, Result};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceKind {
    Euclidean,
    Cosine,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub distance: DistanceKind,
    /// Remove gallery items sharing both person and camera with the query
    /// before ranking (standard cross-camera protocol).
    pub cross_camera_filter: bool,
    /// CMC ranks to report; strictly increasing, all >= 1.
    pub ranks: Vec<usize>,
    /// How the combined test set splits into query and gallery.
    pub split: SplitPolicy,
    /// Frame cap for evaluation features (ALL sampling).
    pub max_frames: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            distance: DistanceKind::Euclidean,
            cross_camera_filter: true,
            ranks: vec![1, 5, 10],
            split: SplitPolicy::QueryCamera { camera: 0 },
            max_frames: 32,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.ranks.is_empty() || self.ranks[0] < 1 {
            return Err(Error::Config("eval ranks must be >= 1".into()));
        }
        if !self.ranks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!("eval ranks must be strictly increasing: {:?}", self.ranks)));
        }
        if self.max_frames == 0 {
            return Err(Error::Config("eval max_frames must be >= 1".into()));
        }
        Ok(())
    }
}

/// One gallery entry presented to the ranker.
#[derive(Clone, Debug)]
pub struct GalleryItem {
    pub feature: VideoFeature,
    pub person_id: u32,
    pub camera_id: u32,
}

/// One query presented to the ranker.
#[derive(Clone, Debug)]
pub struct QueryItem {
    pub feature: VideoFeature,
    pub person_id: u32,
    pub camera_id: u32,
}

/// Ranked gallery for one query: retained original gallery indices in
/// ascending-distance order (ties to the lower index) plus a relevance flag
/// per position.
#[derive(Clone, Debug)]
pub struct RetrievalResult {
    pub ordered: Vec<usize>,
    pub relevant: Vec<bool>,
}

pub fn feature_distance(a: &VideoFeature, b: &VideoFeature, kind: DistanceKind) -> f64 {
    match kind {
        DistanceKind::Euclidean => a
            .0
            .iter()
            .zip(b.0.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
        DistanceKind::Cosine => {
            let dot = a.0.dot(&b.0);
            let na = a.0.dot(&a.0).sqrt();
            let nb = b.0.dot(&b.0).sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - dot / (na * nb)
            }
        }
    }
}

/// Ranks the gallery for one query. Returns `None` (query skipped) when the
/// filtered gallery is empty or holds no relevant item.
pub fn rank_gallery(
    query: &QueryItem,
    gallery: &[GalleryItem],
    protocol: &EvalProtocol,
) -> Option<RetrievalResult> {
    let retained: Vec<usize> = gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| {
            !(protocol.cross_camera_filter
                && g.person_id == query.person_id
                && g.camera_id == query.camera_id)
        })
        .map(|(i, _)| i)
        .collect();
    if retained.is_empty() {
        log::warn!("query of identity {} skipped: gallery empty after filtering", query.person_id);
        return None;
    }
    let mut order = retained.clone();
    let dist: Vec<f64> = gallery
        .iter()
        .map(|g| feature_distance(&query.feature, &g.feature, protocol.distance))
        .collect();
    order.sort_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap().then(a.cmp(&b)));
    let relevant: Vec<bool> = order.iter().map(|&i| gallery[i].person_id == query.person_id).collect();
    if !relevant.iter().any(|&r| r) {
        log::warn!("query of identity {} skipped: no relevant gallery item", query.person_id);
        return None;
    }
    Some(RetrievalResult { ordered: order, relevant })
}

/// CMC: accuracy at k = fraction of queries whose first relevant item sits at
/// a 1-based position <= k.
pub fn compute_cmc(results: &[RetrievalResult], ranks: &[usize]) -> BTreeMap<usize, f64> {
    let mut out = BTreeMap::new();
    for &k in ranks {
        let hits = results
            .iter()
            .filter(|r| {
                r.relevant
                    .iter()
                    .position(|&rel| rel)
                    .map(|pos| pos + 1 <= k)
                    .unwrap_or(false)
            })
            .count();
        out.insert(k, hits as f64 / results.len() as f64);
    }
    out
}

/// mAP: AP per query is the mean over relevant positions r (1-based) of
/// (number of relevant items at positions <= r) / r.
pub fn compute_map(results: &[RetrievalResult]) -> f64 {
    let mut total = 0.0;
    for r in results {
        let mut seen = 0usize;
        let mut ap = 0.0;
        for (pos, &rel) in r.relevant.iter().enumerate() {
            if rel {
                seen += 1;
                ap += seen as f64 / (pos + 1) as f64;
            }
        }
        total += ap / seen as f64;
    }
    total / results.len() as f64
}

/// Metric bundle emitted by evaluation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub rank_accuracy: BTreeMap<usize, f64>,
    pub map: f64,
    pub num_queries_evaluated: usize,
    pub num_queries_skipped: usize,
}

impl MetricReport {
    /// Flat key=value text form (`rank1=...`, `map=...`, `queries=...`).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.rank_accuracy {
            s.push_str(&format!("rank{k}={v:.6}\n"));
        }
        s.push_str(&format!("map={:.6}\n", self.map));
        s.push_str(&format!("queries={}\n", self.num_queries_evaluated));
        s.push_str(&format!("skipped={}\n", self.num_queries_skipped));
        s
    }

    pub fn rank(&self, k: usize) -> Option<f64> {
        self.rank_accuracy.get(&k).copied()
    }
}

/// Video features for every tracklet of a dataset (ALL sampling capped at
/// `max_frames`).
pub fn extract_video_features<F: FeatureExtractor>(
    extractor: &F,
    dataset: &ReIDDataset,
    max_frames: usize,
) -> Result<Vec<VideoFeature>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // ALL sampling draws nothing
    let mut out = Vec::with_capacity(dataset.len());
    for t in &dataset.tracklets {
        let idx = sample_frame_indices(t.len(), max_frames, FrameSampling::All, &mut rng)?;
        let clip = load_clip(t, &idx, extractor.image_size())?;
        out.push(extractor.video_feature(&clip)?);
    }
    Ok(out)
}

/// Full retrieval evaluation of `extractor` on a query/gallery pair.
pub fn evaluate<F: FeatureExtractor>(
    extractor: &F,
    query: &ReIDDataset,
    gallery: &ReIDDataset,
    protocol: &EvalProtocol,
) -> Result<MetricReport> {
    protocol.validate()?;
    if query.tracklets.iter().any(|t| t.person_id.is_none())
        || gallery.tracklets.iter().any(|t| t.person_id.is_none())
    {
        return Err(Error::Config("evaluation requires labeled query and gallery sets".into()));
    }
    let query_feats = extract_video_features(extractor, query, protocol.max_frames)?;
    let gallery_feats = extract_video_features(extractor, gallery, protocol.max_frames)?;
    let gallery_items: Vec<GalleryItem> = gallery
        .tracklets
        .iter()
        .zip(gallery_feats)
        .map(|(t, feature)| GalleryItem {
            feature,
            person_id: t.person_id.unwrap(),
            camera_id: t.camera_id,
        })
        .collect();

    let mut results = Vec::new();
    let mut skipped = 0usize;
    for (t, feature) in query.tracklets.iter().zip(query_feats) {
        let q = QueryItem { feature, person_id: t.person_id.unwrap(), camera_id: t.camera_id };
        match rank_gallery(&q, &gallery_items, protocol) {
            Some(r) => results.push(r),
            None => skipped += 1,
        }
    }
    if results.is_empty() {
        return Err(Error::State("every query was skipped; nothing to evaluate".into()));
    }
    Ok(MetricReport {
        rank_accuracy: compute_cmc(&results, &protocol.ranks),
        map: compute_map(&results),
        num_queries_evaluated: results.len(),
        num_queries_skipped: skipped,
    })
}

/// Trains a fresh logistic-regression domain probe on frozen features and
/// returns its accuracy. Accuracy near 0.5 means the features carry little
/// domain information.
pub fn train_domain_probe(features: &Array2<f64>, labels: &[DomainLabel], iters: usize, lr: f64) -> f64 {
    let n = features.nrows();
    let d = features.ncols();
    assert_eq!(n, labels.len());
    let y: Vec<f64> = labels.iter().map(|l| l.as_index() as f64).collect();
    // standardize columns so the probe is scale-free
    let mut mean = Array1::<f64>::zeros(d);
    let mut std = Array1::<f64>::zeros(d);
    for j in 0..d {
        let col = features.column(j);
        let m = col.sum() / n as f64;
        let v = col.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n as f64;
        mean[j] = m;
        std[j] = v.sqrt().max(1e-9);
    }
    let mut w = Array1::<f64>::zeros(d);
    let mut b = 0.0f64;
    for _ in 0..iters {
        let mut gw = Array1::<f64>::zeros(d);
        let mut gb = 0.0;
        for i in 0..n {
            let mut z = b;
            for j in 0..d {
                z += w[j] * (features[[i, j]] - mean[j]) / std[j];
            }
            let p = 1.0 / (1.0 + (-z).exp());
            let err = p - y[i];
            for j in 0..d {
                gw[j] += err * (features[[i, j]] - mean[j]) / std[j];
            }
            gb += err;
        }
        let scale = lr / n as f64;
        for j in 0..d {
            w[j] -= scale * (gw[j] + 1e-4 * w[j]);
        }
        b -= scale * gb;
    }
    let mut correct = 0usize;
    for i in 0..n {
        let mut z = b;
        for j in 0..d {
            z += w[j] * (features[[i, j]] - mean[j]) / std[j];
        }
        let pred = if z > 0.0 { 1.0 } else { 0.0 };
        if pred == y[i] {
            correct += 1;
        }
    }
    correct as f64 / n as f64
}
