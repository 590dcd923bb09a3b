//! Mean-teacher scheme on unlabeled target data: EMA parameter shadowing,
//! paired student/teacher feature extraction, K-means pseudo-ID clustering,
//! and the two ID-consistency losses.
//!
//! The hard cluster-disagreement count has zero gradient everywhere, so it is
//! reported as a monitoring metric; the trainable path is a soft-assignment
//! cross-entropy between student and teacher distributions over the frozen
//! centroids.

use crate::autodiff::{Tape, TensorId};
use crate::backbone::{BackboneParams, FeatureExtractor, VideoFeature};
use crate::clustering::{kmeans, nearest_centroid, KMeansConfig};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use ndarray::{Array2, Array4};
use rand_chacha::ChaCha8Rng;

/// EMA-shadowed copy of the student backbone.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub params: BackboneParams,
    pub alpha: f64,
    pub step: u64,
}

impl TeacherState {
    /// The teacher starts as an exact copy of the student.
    pub fn from_student(student: &BackboneParams, alpha: f64) -> Self {
        TeacherState { params: student.clone(), alpha, step: 0 }
    }
}

/// One EMA blend: every teacher leaf <- alpha * teacher + (1 - alpha) * student.
pub fn ema_update(teacher: &mut TeacherState, student: &ParamSet, alpha: f64) -> Result<()> {
    teacher.params.leaves.check_tree_matches(student)?;
    for ((_, t), (_, s)) in teacher.params.leaves.iter_mut().zip(student.iter()) {
        t.zip_mut_with(s, |tv, sv| *tv = alpha * *tv + (1.0 - alpha) * *sv);
    }
    teacher.step += 1;
    Ok(())
}

/// Student/teacher video features per target tracklet, both produced from
/// the identical sampled clip.
#[derive(Clone, Debug)]
pub struct PairedFeatures {
    pub student: Vec<VideoFeature>,
    pub teacher: Vec<VideoFeature>,
}

impl PairedFeatures {
    pub fn len(&self) -> usize {
        self.student.len()
    }

    pub fn is_empty(&self) -> bool {
        self.student.is_empty()
    }
}

/// Extracts both views of every clip in inference mode.
pub fn extract_pair_features(
    student: &BackboneParams,
    teacher: &TeacherState,
    clips: &[Array4<f64>],
) -> Result<PairedFeatures> {
    let mut out = PairedFeatures { student: Vec::with_capacity(clips.len()), teacher: Vec::with_capacity(clips.len()) };
    for clip in clips {
        out.student.push(student.video_feature(clip)?);
        out.teacher.push(teacher.params.video_feature(clip)?);
    }
    Ok(out)
}

/// Pseudo-ID cluster snapshot: converged centroids plus the assignment of
/// every pooled student/teacher feature at clustering time.
#[derive(Clone, Debug)]
pub struct ClusterModel {
    pub centroids: Array2<f64>,
    pub student_assign: Vec<usize>,
    pub teacher_assign: Vec<usize>,
}

impl ClusterModel {
    pub fn m(&self) -> usize {
        self.centroids.nrows()
    }

    /// Cluster index of a feature: its nearest centroid. Coincides with the
    /// stored assignments for the features seen at clustering time.
    pub fn assign(&self, f: &VideoFeature) -> usize {
        nearest_centroid(f.0.as_slice().unwrap(), &self.centroids)
    }
}

/// Pools all student and teacher features and groups them into M clusters.
pub fn cluster_features(
    pairs: &PairedFeatures,
    cfg: &KMeansConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ClusterModel> {
    if pairs.is_empty() {
        return Err(Error::State("cannot cluster zero paired features".into()));
    }
    let n = pairs.len();
    let d = pairs.student[0].0.len();
    let mut pooled = Array2::<f64>::zeros((2 * n, d));
    for (i, f) in pairs.student.iter().enumerate() {
        pooled.row_mut(i).assign(&f.0);
    }
    for (i, f) in pairs.teacher.iter().enumerate() {
        pooled.row_mut(n + i).assign(&f.0);
    }
    let res = kmeans(&pooled.view(), cfg, rng)?;
    Ok(ClusterModel {
        centroids: res.centroids,
        student_assign: res.assignments[..n].to_vec(),
        teacher_assign: res.assignments[n..].to_vec(),
    })
}

/// Soft assignment distribution softmax(-||f - c_m||^2 / tau) per row.
pub fn soft_assignment_probs(features: &[VideoFeature], centroids: &Array2<f64>, tau: f64) -> Array2<f64> {
    let n = features.len();
    let m = centroids.nrows();
    let mut out = Array2::<f64>::zeros((n, m));
    for (i, f) in features.iter().enumerate() {
        let mut logits = vec![0.0; m];
        for (c, l) in logits.iter_mut().enumerate() {
            let mut s = 0.0;
            for d in 0..f.0.len() {
                let t = f.0[d] - centroids[[c, d]];
                s += t * t;
            }
            *l = -s / tau;
        }
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - mx).exp();
            z += *l;
        }
        for (c, l) in logits.iter().enumerate() {
            out[[i, c]] = l / z;
        }
    }
    out
}

fn check_cluster_state(pairs: &PairedFeatures, clusters: &ClusterModel) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::State("no paired features to score".into()));
    }
    if clusters.m() == 0 {
        return Err(Error::State("cluster model has no centroids".into()));
    }
    if pairs.student[0].0.len() != clusters.centroids.ncols() {
        return Err(Error::State(format!(
            "feature dim {} does not match centroid dim {}; missing assignment state",
            pairs.student[0].0.len(),
            clusters.centroids.ncols()
        )));
    }
    Ok(())
}

/// ID-consistency between the two networks.
///
/// Returns `(hard_count, soft_loss)`: the fraction of pairs whose student and
/// teacher cluster indices disagree, and the mean cross-entropy between the
/// teacher's (gradient-frozen) and student's soft assignment distributions.
pub fn id_consistency_loss(
    pairs: &PairedFeatures,
    clusters: &ClusterModel,
    tau: f64,
) -> Result<(f64, f64)> {
    check_cluster_state(pairs, clusters)?;
    let n = pairs.len();
    let mut differ = 0usize;
    for j in 0..n {
        if clusters.assign(&pairs.student[j]) != clusters.assign(&pairs.teacher[j]) {
            differ += 1;
        }
    }
    let hard = differ as f64 / n as f64;

    let teacher_probs = soft_assignment_probs(&pairs.teacher, &clusters.centroids, tau);
    let mut tape = Tape::new();
    let student_id = feature_rows_leaf(&mut tape, &pairs.student);
    let soft_id = soft_consistency_on_tape(&mut tape, student_id, &clusters.centroids, &teacher_probs, tau);
    Ok((hard, tape.scalar_value(soft_id)))
}

/// Trainable soft consistency term on a tape: student rows -> soft assignment
/// logits against frozen centroids -> cross-entropy against frozen teacher
/// distributions.
pub fn soft_consistency_on_tape(
    tape: &mut Tape,
    student_rows: TensorId,
    centroids: &Array2<f64>,
    teacher_probs: &Array2<f64>,
    tau: f64,
) -> TensorId {
    let logits = tape.neg_sqdist(student_rows, centroids.clone(), 1.0 / tau);
    tape.soft_ce_mean(logits, teacher_probs.clone())
}

fn feature_rows_leaf(tape: &mut Tape, features: &[VideoFeature]) -> TensorId {
    let n = features.len();
    let d = features[0].0.len();
    let mut rows = Array2::<f64>::zeros((n, d));
    for (i, f) in features.iter().enumerate() {
        rows.row_mut(i).assign(&f.0);
    }
    tape.leaf(rows.into_dyn())
}

/// Mean distance of every clustered feature (both networks) to its own
/// cluster's centroid. Centroids are gradient-frozen.
pub fn centroid_similarity_loss(pairs: &PairedFeatures, clusters: &ClusterModel) -> Result<f64> {
    check_cluster_state(pairs, clusters)?;
    let n = pairs.len();
    let mut total = 0.0;
    for f in pairs.student.iter().chain(pairs.teacher.iter()) {
        let c = clusters.assign(f);
        let mut s = 0.0;
        for d in 0..f.0.len() {
            let t = f.0[d] - clusters.centroids[[c, d]];
            s += t * t;
        }
        total += s.sqrt();
    }
    Ok(total / (2 * n) as f64)
}

/// L^C: trainable consistency surrogate plus the centroid-similarity term.
pub fn total_consistency_loss(soft_consistency: f64, centroid_similarity: f64) -> f64 {
    soft_consistency + centroid_similarity
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{reference_backbone, BackboneConfig};
    use ndarray::{arr1, arr2, Array};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_backbone(seed: u64) -> BackboneParams {
        reference_backbone(&BackboneConfig {
            image_size: 8,
            conv_channels: vec![2, 3],
            embed_dim: 4,
            num_classes: 2,
            init_seed: seed,
        })
        .unwrap()
    }

    fn vf(v: &[f64]) -> VideoFeature {
        VideoFeature(arr1(v))
    }

    #[test]
    fn ema_alpha_zero_copies_student() {
        let student = tiny_backbone(1);
        let mut teacher = TeacherState::from_student(&tiny_backbone(2), 0.0);
        ema_update(&mut teacher, &student.leaves, 0.0).unwrap();
        assert_eq!(teacher.params.leaves.content_hash(), student.leaves.content_hash());
        assert_eq!(teacher.step, 1);
    }

    #[test]
    fn ema_alpha_one_leaves_teacher_unchanged() {
        let student = tiny_backbone(1);
        let mut teacher = TeacherState::from_student(&tiny_backbone(2), 1.0);
        let before = teacher.params.leaves.content_hash();
        ema_update(&mut teacher, &student.leaves, 1.0).unwrap();
        assert_eq!(teacher.params.leaves.content_hash(), before);
    }

    // Constant student: theta_T(n) = theta_S + alpha^n (theta_T(0) - theta_S).
    #[test]
    fn ema_closed_form_after_five_updates() {
        let student = tiny_backbone(3);
        let initial = tiny_backbone(4);
        let mut teacher = TeacherState::from_student(&initial, 0.9);
        for _ in 0..5 {
            ema_update(&mut teacher, &student.leaves, 0.9).unwrap();
        }
        let decay = 0.9f64.powi(5);
        for ((name, t), ((_, s), (_, t0))) in teacher
            .params
            .leaves
            .iter()
            .zip(student.leaves.iter().zip(initial.leaves.iter()))
        {
            for ((tv, sv), t0v) in t.iter().zip(s.iter()).zip(t0.iter()) {
                let expect = sv + decay * (t0v - sv);
                assert!((tv - expect).abs() < 1e-6, "leaf {name}: {tv} vs {expect}");
            }
        }
        assert_eq!(teacher.step, 5);
    }

    #[test]
    fn ema_tree_mismatch_is_shape_error_naming_leaf() {
        let student = tiny_backbone(1);
        let mut teacher = TeacherState::from_student(&student, 0.9);
        let mut other = ParamSet::new();
        other.insert("conv1.w", ndarray::ArrayD::zeros(ndarray::IxDyn(&[1])));
        let err = ema_update(&mut teacher, &other, 0.9).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }

    #[test]
    fn pair_features_equal_when_teacher_is_a_copy() {
        let student = tiny_backbone(5);
        let teacher = TeacherState::from_student(&student, 0.0);
        let mut r = rng(6);
        let clips: Vec<Array4<f64>> = (0..3)
            .map(|_| Array::from_shape_fn((2, 3, 8, 8), |_| r.random_range(0.0..1.0)))
            .collect();
        let pairs = extract_pair_features(&student, &teacher, &clips).unwrap();
        assert_eq!(pairs.len(), 3);
        for j in 0..3 {
            assert_eq!(pairs.student[j].0, pairs.teacher[j].0);
        }
        // determinism
        let again = extract_pair_features(&student, &teacher, &clips).unwrap();
        for j in 0..3 {
            assert_eq!(pairs.student[j].0, again.student[j].0);
        }
    }

    fn toy_cluster_model() -> ClusterModel {
        ClusterModel {
            centroids: arr2(&[[0.0], [10.0]]),
            student_assign: vec![],
            teacher_assign: vec![],
        }
    }

    #[test]
    fn identical_pairs_have_zero_hard_count_and_entropy_floor() {
        let feats = vec![vf(&[0.1]), vf(&[9.8]), vf(&[0.4])];
        let pairs = PairedFeatures { student: feats.clone(), teacher: feats };
        let clusters = toy_cluster_model();
        let (hard, soft) = id_consistency_loss(&pairs, &clusters, 0.5).unwrap();
        assert_eq!(hard, 0.0);
        // identical distributions: cross-entropy equals the teacher entropy
        let q = soft_assignment_probs(&pairs.teacher, &clusters.centroids, 0.5);
        let entropy = -q
            .rows()
            .into_iter()
            .map(|row| row.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>())
            .sum::<f64>()
            / q.nrows() as f64;
        assert!((soft - entropy).abs() < 1e-9, "{soft} vs {entropy}");
    }

    #[test]
    fn one_disagreeing_pair_of_two_gives_half() {
        let pairs = PairedFeatures {
            student: vec![vf(&[0.1]), vf(&[0.3])],
            teacher: vec![vf(&[0.2]), vf(&[9.9])],
        };
        let (hard, _) = id_consistency_loss(&pairs, &toy_cluster_model(), 0.5).unwrap();
        assert_eq!(hard, 0.5);
    }

    // Direct recount oracle over raw nearest-centroid assignments.
    #[test]
    fn hard_count_matches_direct_recount() {
        let mut r = rng(8);
        for _ in 0..30 {
            let n = r.random_range(2..12usize);
            let d = 3;
            let mk = |r: &mut ChaCha8Rng| -> Vec<VideoFeature> {
                (0..n).map(|_| VideoFeature(arr1(&(0..d).map(|_| r.random_range(-4.0..4.0)).collect::<Vec<_>>()))).collect()
            };
            let pairs = PairedFeatures { student: mk(&mut r), teacher: mk(&mut r) };
            let centroids = Array::from_shape_fn((4, d), |_| r.random_range(-4.0..4.0));
            let clusters = ClusterModel { centroids, student_assign: vec![], teacher_assign: vec![] };
            let (hard, soft) = id_consistency_loss(&pairs, &clusters, 0.2).unwrap();
            let mut differ = 0;
            for j in 0..n {
                let a = nearest_centroid(pairs.student[j].0.as_slice().unwrap(), &clusters.centroids);
                let b = nearest_centroid(pairs.teacher[j].0.as_slice().unwrap(), &clusters.centroids);
                if a != b {
                    differ += 1;
                }
            }
            assert_eq!(hard, differ as f64 / n as f64);
            assert!((0.0..=1.0).contains(&hard));
            // Gibbs: cross-entropy >= teacher entropy
            let q = soft_assignment_probs(&pairs.teacher, &clusters.centroids, 0.2);
            let entropy = -q
                .rows()
                .into_iter()
                .map(|row| row.iter().map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 }).sum::<f64>())
                .sum::<f64>()
                / q.nrows() as f64;
            assert!(soft >= entropy - 1e-9, "{soft} < {entropy}");
        }
    }

    #[test]
    fn centroid_similarity_hand_cases() {
        // every feature exactly at its centroid
        let pairs = PairedFeatures {
            student: vec![vf(&[0.0]), vf(&[10.0])],
            teacher: vec![vf(&[0.0]), vf(&[10.0])],
        };
        assert_eq!(centroid_similarity_loss(&pairs, &toy_cluster_model()).unwrap(), 0.0);
        // one cluster, two points at distance 2 symmetric about the mean
        let clusters = ClusterModel {
            centroids: arr2(&[[0.0]]),
            student_assign: vec![],
            teacher_assign: vec![],
        };
        let pairs = PairedFeatures { student: vec![vf(&[-1.0])], teacher: vec![vf(&[1.0])] };
        assert_eq!(centroid_similarity_loss(&pairs, &clusters).unwrap(), 1.0);
    }

    // Scalar double-loop oracle over clusters and members.
    #[test]
    fn centroid_similarity_matches_double_loop() {
        let mut r = rng(14);
        let d = 4;
        let n = 9;
        let mk = |r: &mut ChaCha8Rng| -> Vec<VideoFeature> {
            (0..n).map(|_| VideoFeature(arr1(&(0..d).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>()))).collect()
        };
        let pairs = PairedFeatures { student: mk(&mut r), teacher: mk(&mut r) };
        let centroids = Array::from_shape_fn((3, d), |_| r.random_range(-2.0..2.0));
        let clusters = ClusterModel { centroids: centroids.clone(), student_assign: vec![], teacher_assign: vec![] };
        let ours = centroid_similarity_loss(&pairs, &clusters).unwrap();

        let mut total = 0.0;
        for c in 0..3 {
            for f in pairs.student.iter().chain(pairs.teacher.iter()) {
                if nearest_centroid(f.0.as_slice().unwrap(), &centroids) == c {
                    let mut s = 0.0;
                    for k in 0..d {
                        let t = f.0[k] - centroids[[c, k]];
                        s += t * t;
                    }
                    total += s.sqrt();
                }
            }
        }
        let oracle = total / (2 * n) as f64;
        assert!((ours - oracle).abs() < 1e-12);
    }

    // Joint rigid rotation of features and centroids leaves the loss fixed.
    #[test]
    fn centroid_similarity_is_rotation_invariant() {
        let mut r = rng(15);
        let d = 5;
        let n = 6;
        let mk = |r: &mut ChaCha8Rng| -> Vec<VideoFeature> {
            (0..n).map(|_| VideoFeature(arr1(&(0..d).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>()))).collect()
        };
        let pairs = PairedFeatures { student: mk(&mut r), teacher: mk(&mut r) };
        let centroids = Array::from_shape_fn((3, d), |_| r.random_range(-2.0..2.0));
        let clusters = ClusterModel { centroids: centroids.clone(), student_assign: vec![], teacher_assign: vec![] };
        let before = centroid_similarity_loss(&pairs, &clusters).unwrap();

        // Householder reflection as the rotation
        let v = arr1(&(0..d).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let vv = v.dot(&v);
        let reflect = |x: &ndarray::Array1<f64>| x - &(&v * (2.0 * x.dot(&v) / vv));
        let rot_pairs = PairedFeatures {
            student: pairs.student.iter().map(|f| VideoFeature(reflect(&f.0))).collect(),
            teacher: pairs.teacher.iter().map(|f| VideoFeature(reflect(&f.0))).collect(),
        };
        let mut rot_centroids = Array2::<f64>::zeros((3, d));
        for c in 0..3 {
            rot_centroids.row_mut(c).assign(&reflect(&centroids.row(c).to_owned()));
        }
        let rot_clusters = ClusterModel { centroids: rot_centroids, student_assign: vec![], teacher_assign: vec![] };
        let after = centroid_similarity_loss(&rot_pairs, &rot_clusters).unwrap();
        assert!((before - after).abs() < 1e-5, "{before} vs {after}");
    }

    #[test]
    fn total_consistency_is_the_sum() {
        assert_eq!(total_consistency_loss(0.0, 0.0), 0.0);
        assert_eq!(total_consistency_loss(0.4, 0.6), 1.0);
        let (a, b) = (0.137, 2.25);
        assert_eq!(total_consistency_loss(a, b), a + b);
    }

    #[test]
    fn clustering_pools_both_networks() {
        let mut r = rng(16);
        let n = 12;
        let around = |c: f64, r: &mut ChaCha8Rng| vf(&[c + r.random_range(-0.2..0.2), c + r.random_range(-0.2..0.2)]);
        let pairs = PairedFeatures {
            student: (0..n).map(|i| around(if i % 2 == 0 { 0.0 } else { 8.0 }, &mut r)).collect(),
            teacher: (0..n).map(|i| around(if i % 2 == 0 { 0.0 } else { 8.0 }, &mut r)).collect(),
        };
        let cfg = KMeansConfig { clusters: 2, ..Default::default() };
        let model = cluster_features(&pairs, &cfg, &mut r).unwrap();
        assert_eq!(model.student_assign.len(), n);
        assert_eq!(model.teacher_assign.len(), n);
        // stored assignments match nearest-centroid lookups
        for (j, f) in pairs.student.iter().enumerate() {
            assert_eq!(model.student_assign[j], model.assign(f));
        }
        for (j, f) in pairs.teacher.iter().enumerate() {
            assert_eq!(model.teacher_assign[j], model.assign(f));
        }
    }
}
