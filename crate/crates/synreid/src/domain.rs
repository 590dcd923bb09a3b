//! Multi-level self-supervised domain discrimination with adversarial
//! gradient reversal: per-frame and per-video binary domain classification
//! plus domain-distribution regression on stitched sequences.

use crate::autodiff::{Tape, TensorId};
use crate::backbone::VideoFeature;
use crate::datamodel::DomainLabel;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use ndarray::{Array1, Array2, ArrayD, ArrayView2, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pad value for unused slots of a domain-distribution target; the
/// maximal-entropy point between the two domain codes.
pub const TARGET_PAD: f64 = 0.5;

/// Gradient reversal coefficient schedule.
#[derive(Copy, Clone, Debug, PartialEq)]
pub enum LambdaSchedule {
    /// 2 / (1 + exp(-10 p)) - 1 over training progress p in [0,1].
    DannRamp,
    Constant(f64),
}

impl LambdaSchedule {
    pub fn lambda(&self, progress: f64) -> f64 {
        match self {
            LambdaSchedule::DannRamp => {
                let p = progress.clamp(0.0, 1.0);
                2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
            }
            LambdaSchedule::Constant(l) => *l,
        }
    }
}

/// Identity forward; during backprop the tape multiplies incoming gradients
/// by -lambda (see [`Tape::grl`]).
pub fn grl_apply(tape: &mut Tape, x: TensorId, lambda: f64) -> TensorId {
    tape.grl(x, lambda)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum HeadLevel {
    Frame,
    Video,
}

/// Binary domain classifier: FC -> ReLU -> dropout -> FC to 2 logits.
/// Frame- and video-level heads share this architecture with independent
/// parameters.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub level: HeadLevel,
    pub in_dim: usize,
    pub hidden: usize,
    pub leaves: ParamSet,
}

impl ClassifierHead {
    pub fn new(level: HeadLevel, in_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut leaves = ParamSet::new();
        init_linear(&mut leaves, "fc1", in_dim, hidden, &mut rng);
        init_linear(&mut leaves, "fc2", hidden, 2, &mut rng);
        ClassifierHead { level, in_dim, hidden, leaves }
    }

    /// Forward on a tape. `dropout_mask`, when given, multiplies the hidden
    /// activation (training mode); `None` runs inference.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: TensorId,
        dropout_mask: Option<ArrayD<f64>>,
    ) -> TensorId {
        let h = tape.linear(x, bound.id(&self.leaves, "fc1.w"), bound.id(&self.leaves, "fc1.b"));
        let mut h = tape.relu(h);
        if let Some(mask) = dropout_mask {
            h = tape.dropout(h, mask);
        }
        tape.linear(h, bound.id(&self.leaves, "fc2.w"), bound.id(&self.leaves, "fc2.b"))
    }
}

/// Single-FC regressor from a combined feature to a length-V_max domain
/// distribution vector. The output passes through a sigmoid so predictions
/// live in the target range (0,1); an unbounded linear output makes the
/// reversed MSE objective divergent.
#[derive(Clone, Debug)]
pub struct RegressorHead {
    pub in_dim: usize,
    pub v_max: usize,
    pub leaves: ParamSet,
}

impl RegressorHead {
    pub fn new(in_dim: usize, v_max: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut leaves = ParamSet::new();
        init_linear(&mut leaves, "fc", in_dim, v_max, &mut rng);
        RegressorHead { in_dim, v_max, leaves }
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, bound: &BoundParams, x: TensorId) -> TensorId {
        let z = tape.linear(x, bound.id(&self.leaves, "fc.w"), bound.id(&self.leaves, "fc.b"));
        tape.sigmoid(z)
    }
}

fn init_linear(leaves: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) {
    let b = (1.0 / fan_in as f64).sqrt();
    leaves.insert(
        format!("{name}.w"),
        ndarray::Array::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| rng.random_range(-b..b)),
    );
    leaves.insert(format!("{name}.b"), ArrayD::zeros(IxDyn(&[fan_out])));
}

/// Domain CE loss on a tape: features -> GRL -> head -> mean cross-entropy
/// against the 0/1 domain codes. Shared by the frame- and video-level losses.
pub fn domain_ce_loss_on_tape(
    tape: &mut Tape,
    features: TensorId,
    labels: &[DomainLabel],
    head: &ClassifierHead,
    head_bound: &BoundParams,
    lambda: f64,
    dropout_mask: Option<ArrayD<f64>>,
) -> TensorId {
    let reversed = grl_apply(tape, features, lambda);
    let logits = head.forward_on_tape(tape, head_bound, reversed, dropout_mask);
    let classes: Vec<usize> = labels.iter().map(|d| d.as_index()).collect();
    tape.ce_mean(logits, classes)
}

fn domain_ce_loss(
    features: &ArrayView2<f64>,
    labels: &[DomainLabel],
    head: &ClassifierHead,
    lambda: f64,
    expected_level: HeadLevel,
) -> Result<f64> {
    if head.level != expected_level {
        return Err(Error::Config(format!(
            "domain loss expects a {expected_level:?}-level head, got {:?}",
            head.level
        )));
    }
    if features.nrows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} feature rows but {} domain labels",
            features.nrows(),
            labels.len()
        )));
    }
    if features.ncols() != head.in_dim {
        return Err(Error::Shape(format!(
            "feature dim {} != head input dim {}",
            features.ncols(),
            head.in_dim
        )));
    }
    let mut tape = Tape::new();
    let bound = head.leaves.bind(&mut tape);
    let x = tape.leaf(features.to_owned().into_dyn());
    let loss = domain_ce_loss_on_tape(&mut tape, x, labels, head, &bound, lambda, None);
    Ok(tape.scalar_value(loss))
}

/// Mean CE of per-frame binary domain predictions (inference-mode head).
pub fn frame_domain_loss(
    frame_features: &ArrayView2<f64>,
    labels: &[DomainLabel],
    head: &ClassifierHead,
    lambda: f64,
) -> Result<f64> {
    domain_ce_loss(frame_features, labels, head, lambda, HeadLevel::Frame)
}

/// Mean CE of per-video binary domain predictions (inference-mode head).
pub fn video_domain_loss(
    video_features: &ArrayView2<f64>,
    labels: &[DomainLabel],
    head: &ClassifierHead,
    lambda: f64,
) -> Result<f64> {
    domain_ce_loss(video_features, labels, head, lambda, HeadLevel::Video)
}

/// How many sequences to stitch and in what order.
#[derive(Clone, Debug)]
pub struct StitchSpec {
    pub v: usize,
    pub v_max: usize,
    /// Ordering of the V chosen sequences; drawn uniformly from `rng` when
    /// absent.
    pub permutation: Option<Vec<usize>>,
}

/// Fixed-length regression target: the 0/1 domain codes of the stitched
/// sequences in permutation order, padded with 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDistributionTarget(pub Array1<f64>);

impl DomainDistributionTarget {
    /// Entries are always in {0, 1, 0.5}; padding fills the trailing
    /// V_max - V slots.
    pub fn is_valid(&self, v: usize) -> bool {
        self.0.iter().enumerate().all(|(i, &e)| {
            if i < v {
                e == 0.0 || e == 1.0
            } else {
                e == TARGET_PAD
            }
        })
    }
}

/// Combines V sequence features into one by mean pooling under a random
/// permutation and encodes the permuted domain labels as the regression
/// target.
pub fn stitch_sequences(
    features: &[VideoFeature],
    domains: &[DomainLabel],
    spec: &StitchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(VideoFeature, DomainDistributionTarget)> {
    if spec.v < 2 {
        return Err(Error::Config(format!("stitch size V={} must be >= 2", spec.v)));
    }
    if spec.v > spec.v_max {
        return Err(Error::Config(format!(
            "stitch size V={} exceeds V_max={}",
            spec.v, spec.v_max
        )));
    }
    if features.len() != spec.v || domains.len() != spec.v {
        return Err(Error::Shape(format!(
            "stitch expects {} features and domains, got {} and {}",
            spec.v,
            features.len(),
            domains.len()
        )));
    }
    let perm: Vec<usize> = match &spec.permutation {
        Some(p) => {
            let mut sorted = p.clone();
            sorted.sort_unstable();
            if sorted != (0..spec.v).collect::<Vec<_>>() {
                return Err(Error::Config(format!("invalid permutation {p:?} for V={}", spec.v)));
            }
            p.clone()
        }
        None => {
            let mut p: Vec<usize> = (0..spec.v).collect();
            p.shuffle(rng);
            p
        }
    };
    let d = features[0].0.len();
    let mut combined = Array1::<f64>::zeros(d);
    for &i in &perm {
        if features[i].0.len() != d {
            return Err(Error::Shape("stitched features have unequal dimensions".into()));
        }
        combined += &features[i].0;
    }
    combined /= spec.v as f64;

    let mut target = Array1::<f64>::from_elem(spec.v_max, TARGET_PAD);
    for (slot, &i) in perm.iter().enumerate() {
        target[slot] = domains[i].as_index() as f64;
    }
    Ok((VideoFeature(combined), DomainDistributionTarget(target)))
}

/// Regression loss on a tape: combined features -> GRL -> regressor -> MSE
/// against the stacked targets.
pub fn combined_regression_loss_on_tape(
    tape: &mut Tape,
    combined: TensorId,
    targets: Array2<f64>,
    regressor: &RegressorHead,
    bound: &BoundParams,
    lambda: f64,
) -> TensorId {
    let reversed = grl_apply(tape, combined, lambda);
    let pred = regressor.forward_on_tape(tape, bound, reversed);
    tape.mse_mean(pred, targets.into_dyn())
}

/// Mean squared error between predicted and encoded domain distributions.
pub fn combined_domain_regression_loss(
    combined: &ArrayView2<f64>,
    targets: &[DomainDistributionTarget],
    regressor: &RegressorHead,
    lambda: f64,
) -> Result<f64> {
    if combined.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} combined features but {} targets",
            combined.nrows(),
            targets.len()
        )));
    }
    if combined.ncols() != regressor.in_dim {
        return Err(Error::Shape(format!(
            "combined feature dim {} != regressor input dim {}",
            combined.ncols(),
            regressor.in_dim
        )));
    }
    let mut t_mat = Array2::<f64>::zeros((targets.len(), regressor.v_max));
    for (i, t) in targets.iter().enumerate() {
        if t.0.len() != regressor.v_max {
            return Err(Error::Shape(format!(
                "target length {} != regressor output length {}",
                t.0.len(),
                regressor.v_max
            )));
        }
        t_mat.row_mut(i).assign(&t.0);
    }
    let mut tape = Tape::new();
    let bound = regressor.leaves.bind(&mut tape);
    let x = tape.leaf(combined.to_owned().into_dyn());
    let loss = combined_regression_loss_on_tape(&mut tape, x, t_mat, regressor, &bound, lambda);
    Ok(tape.scalar_value(loss))
}

/// Unweighted sum of the frame, video, and stitched-sequence losses.
pub fn total_domain_loss(frame: f64, video: f64, combined: f64) -> f64 {
    frame + video + combined
}
