//! Supervised identification losses on the labeled source domain:
//! cross-entropy over ID predictions and the batch-hard triplet loss.

use crate::backbone::{IdPrediction, VideoFeature};
use crate::error::{Error, Result};
use ndarray::ArrayView2;

/// Floor applied to probabilities before the log, preventing -inf on
/// degenerate predictions.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Mining {
    BatchHard,
    AllValid,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Distance {
    Euclidean,
}

#[derive(Clone, Debug)]
pub struct TripletConfig {
    pub margin: f64,
    pub distance: Distance,
    pub mining: Mining,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { margin: 0.3, distance: Distance::Euclidean, mining: Mining::BatchHard }
    }
}

/// A one-hot target over the C source identities.
#[derive(Clone, Debug)]
pub struct OneHotLabel {
    pub class: usize,
    pub len: usize,
}

impl OneHotLabel {
    pub fn new(class: usize, len: usize) -> Result<Self> {
        if class >= len {
            return Err(Error::Shape(format!("one-hot class {class} out of range for length {len}")));
        }
        Ok(OneHotLabel { class, len })
    }
}

/// -log p(correct class), with p clamped below [`LOG_CLAMP`].
pub fn cross_entropy_id(p: &IdPrediction, y: &OneHotLabel) -> Result<f64> {
    if p.0.len() != y.len {
        return Err(Error::Shape(format!(
            "prediction length {} != label length {}",
            p.0.len(),
            y.len
        )));
    }
    Ok(-p.0[y.class].max(LOG_CLAMP).ln())
}

pub fn euclidean(a: &VideoFeature, b: &VideoFeature) -> f64 {
    a.0.iter()
        .zip(b.0.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Single-triplet hinge: max(0, D(a,p) - D(a,n) + m).
pub fn triplet_hinge(
    f_a: &VideoFeature,
    f_p: &VideoFeature,
    f_n: &VideoFeature,
    cfg: &TripletConfig,
) -> Result<f64> {
    if f_a.0.len() != f_p.0.len() || f_a.0.len() != f_n.0.len() {
        return Err(Error::Shape("triplet features have unequal dimensions".into()));
    }
    let Distance::Euclidean = cfg.distance;
    Ok((euclidean(f_a, f_p) - euclidean(f_a, f_n) + cfg.margin).max(0.0))
}

fn row_dist(features: &ArrayView2<f64>, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    for d in 0..features.ncols() {
        let t = features[[i, d]] - features[[j, d]];
        s += t * t;
    }
    s.sqrt()
}

/// Batch-hard mining: for each anchor, the farthest same-id sample (self
/// excluded) and the nearest different-id sample. Ties break to the lowest
/// index. Requires >= 2 distinct ids and >= 2 samples per id.
pub fn mine_batch_hard(features: &ArrayView2<f64>, ids: &[u32]) -> Result<Vec<(usize, usize, usize)>> {
    let n = features.nrows();
    if n != ids.len() {
        return Err(Error::Shape(format!("{} feature rows but {} ids", n, ids.len())));
    }
    let mut distinct: Vec<u32> = ids.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Config("batch-hard mining needs >= 2 distinct ids".into()));
    }
    for &id in &distinct {
        let count = ids.iter().filter(|&&v| v == id).count();
        if count < 2 {
            return Err(Error::Config(format!("identity {id} has a single sample in the batch")));
        }
    }
    let mut triplets = Vec::with_capacity(n);
    for a in 0..n {
        let mut hardest_pos: Option<(usize, f64)> = None;
        let mut hardest_neg: Option<(usize, f64)> = None;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = row_dist(features, a, j);
            if ids[j] == ids[a] {
                let better = match hardest_pos {
                    None => true,
                    Some((_, best)) => d > best,
                };
                if better {
                    hardest_pos = Some((j, d));
                }
            } else {
                let better = match hardest_neg {
                    None => true,
                    Some((_, best)) => d < best,
                };
                if better {
                    hardest_neg = Some((j, d));
                }
            }
        }
        triplets.push((a, hardest_pos.unwrap().0, hardest_neg.unwrap().0));
    }
    Ok(triplets)
}

/// All (anchor, positive, negative) index triples with matching/differing ids.
pub fn mine_all_valid(ids: &[u32]) -> Vec<(usize, usize, usize)> {
    let n = ids.len();
    let mut out = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if p == a || ids[p] != ids[a] {
                continue;
            }
            for neg in 0..n {
                if ids[neg] != ids[a] {
                    out.push((a, p, neg));
                }
            }
        }
    }
    out
}

/// Mean over anchors of the mined triplet hinge.
pub fn batch_hard_triplet(
    features: &ArrayView2<f64>,
    ids: &[u32],
    cfg: &TripletConfig,
) -> Result<f64> {
    let triplets = match cfg.mining {
        Mining::BatchHard => mine_batch_hard(features, ids)?,
        Mining::AllValid => {
            mine_batch_hard(features, ids)?; // same preconditions
            mine_all_valid(ids)
        }
    };
    let mut total = 0.0;
    for &(a, p, n) in &triplets {
        total += (row_dist(features, a, p) - row_dist(features, a, n) + cfg.margin).max(0.0);
    }
    Ok(total / triplets.len() as f64)
}
