//! Feature extraction contract and the small reference backbone.
//!
//! The contract is three operations: per-frame embedding, temporal mean
//! aggregation, and identity classification. Anything satisfying
//! [`FeatureExtractor`] can drive evaluation; training drives the reference
//! backbone through the shared tape ops in [`forward_frames_on_tape`].

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamSet};
use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Per-frame embeddings of one clip: shape (T, d).
#[derive(Clone, Debug)]
pub struct FrameFeatures(pub Array2<f64>);

/// A single video-level embedding of length d.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeature(pub Array1<f64>);

/// A probability vector over the C source identities.
#[derive(Clone, Debug)]
pub struct IdPrediction(pub Array1<f64>);

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    /// Input frames are image_size x image_size RGB.
    pub image_size: usize,
    /// Output channels of each 3x3 conv block; a 2x2 average pool follows each.
    pub conv_channels: Vec<usize>,
    /// Embedding dimension d.
    pub embed_dim: usize,
    /// Classifier width C (source identity count).
    pub num_classes: usize,
    /// Seed for deterministic weight initialization.
    pub init_seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_size: 32,
            conv_channels: vec![8, 16, 32],
            embed_dim: 64,
            num_classes: 2,
            init_seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() {
            return Err(Error::Config("backbone needs at least one conv block".into()));
        }
        let div = 1usize << self.conv_channels.len();
        if self.image_size == 0 || self.image_size % div != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by {div} (one 2x2 pool per conv block)",
                self.image_size
            )));
        }
        if self.embed_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("embed_dim and num_classes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Named parameter leaves of the backbone plus ID classifier.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub leaves: ParamSet,
}

/// Builds the reference backbone: a stack of 3x3 conv + ReLU + 2x2 average
/// pool blocks, global average pooling, and a linear projection to d, with a
/// linear softmax classifier d -> C on top.
pub fn reference_backbone(config: &BackboneConfig) -> Result<BackboneParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    let mut leaves = ParamSet::new();
    let mut cin = 3usize;
    for (bi, &cout) in config.conv_channels.iter().enumerate() {
        let bound = (1.0 / (cin * 9) as f64).sqrt();
        leaves.insert(
            format!("conv{}.w", bi + 1),
            ndarray::Array::from_shape_fn(ndarray::IxDyn(&[cout, cin, 3, 3]), |_| {
                rng.random_range(-bound..bound)
            }),
        );
        leaves.insert(format!("conv{}.b", bi + 1), ndarray::ArrayD::zeros(ndarray::IxDyn(&[cout])));
        cin = cout;
    }
    let bound = (1.0 / cin as f64).sqrt();
    leaves.insert(
        "fc.w",
        ndarray::Array::from_shape_fn(ndarray::IxDyn(&[cin, config.embed_dim]), |_| {
            rng.random_range(-bound..bound)
        }),
    );
    leaves.insert("fc.b", ndarray::ArrayD::zeros(ndarray::IxDyn(&[config.embed_dim])));
    let bound = (1.0 / config.embed_dim as f64).sqrt();
    leaves.insert(
        "cls.w",
        ndarray::Array::from_shape_fn(ndarray::IxDyn(&[config.embed_dim, config.num_classes]), |_| {
            rng.random_range(-bound..bound)
        }),
    );
    leaves.insert("cls.b", ndarray::ArrayD::zeros(ndarray::IxDyn(&[config.num_classes])));
    Ok(BackboneParams { config: config.clone(), leaves })
}

/// Frame encoder forward pass on a tape: (N,3,S,S) frames -> (N,d) features.
pub fn forward_frames_on_tape(
    tape: &mut Tape,
    params: &BackboneParams,
    bound: &BoundParams,
    frames: TensorId,
) -> TensorId {
    let mut x = frames;
    for bi in 1..=params.config.conv_channels.len() {
        let w = bound.id(&params.leaves, &format!("conv{bi}.w"));
        let b = bound.id(&params.leaves, &format!("conv{bi}.b"));
        x = tape.conv2d(x, w, b, 1);
        x = tape.relu(x);
        x = tape.avg_pool2(x);
    }
    let pooled = tape.global_avg_pool(x);
    tape.linear(pooled, bound.id(&params.leaves, "fc.w"), bound.id(&params.leaves, "fc.b"))
}

/// Classifier forward on a tape: (N,d) features -> (N,C) logits.
pub fn classify_on_tape(
    tape: &mut Tape,
    params: &BackboneParams,
    bound: &BoundParams,
    features: TensorId,
) -> TensorId {
    tape.linear(features, bound.id(&params.leaves, "cls.w"), bound.id(&params.leaves, "cls.b"))
}

impl BackboneParams {
    /// Inference-mode frame feature extraction for one clip of shape
    /// (T, 3, S, S). Deterministic for fixed parameters and input.
    pub fn extract_frame_features(&self, clip: &Array4<f64>) -> Result<FrameFeatures> {
        let (t, c, h, w) = clip.dim();
        if t == 0 {
            return Err(Error::Shape("clip has no frames".into()));
        }
        if c != 3 || h != self.config.image_size || w != self.config.image_size {
            return Err(Error::Shape(format!(
                "clip frames are ({c},{h},{w}), config declares (3,{s},{s})",
                s = self.config.image_size
            )));
        }
        let mut tape = Tape::new();
        let bound = self.leaves.bind(&mut tape);
        let frames = tape.leaf(clip.clone().into_dyn());
        let feats = forward_frames_on_tape(&mut tape, self, &bound, frames);
        let out = tape
            .value(feats)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        Ok(FrameFeatures(out))
    }

    /// Inference-mode classification of a video feature into a probability
    /// vector over the C identities.
    pub fn classify_id(&self, feature: &VideoFeature) -> Result<IdPrediction> {
        if feature.0.len() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "feature length {} != embed_dim {}",
                feature.0.len(),
                self.config.embed_dim
            )));
        }
        let mut tape = Tape::new();
        let bound = self.leaves.bind(&mut tape);
        let f = tape.leaf(
            feature
                .0
                .clone()
                .into_shape_with_order((1, feature.0.len()))
                .unwrap()
                .into_dyn(),
        );
        let logits = classify_on_tape(&mut tape, self, &bound, f);
        let row = tape.value(logits).view().into_dimensionality::<ndarray::Ix2>().unwrap().row(0).to_owned();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps = row.mapv(|v| (v - m).exp());
        let sum = exps.sum();
        Ok(IdPrediction(exps / sum))
    }
}

/// Arithmetic mean over the time axis.
pub fn aggregate(frames: &FrameFeatures) -> VideoFeature {
    let t = frames.0.nrows();
    assert!(t >= 1, "aggregate needs at least one frame");
    VideoFeature(frames.0.mean_axis(ndarray::Axis(0)).unwrap())
}

/// Anything that can embed clips; evaluation is generic over this.
pub trait FeatureExtractor {
    fn image_size(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn extract_frame_features(&self, clip: &Array4<f64>) -> Result<FrameFeatures>;

    /// Video-level embedding: extract then mean over time.
    fn video_feature(&self, clip: &Array4<f64>) -> Result<VideoFeature> {
        Ok(aggregate(&self.extract_frame_features(clip)?))
    }
}

impl FeatureExtractor for BackboneParams {
    fn image_size(&self) -> usize {
        self.config.image_size
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn extract_frame_features(&self, clip: &Array4<f64>) -> Result<FrameFeatures> {
        BackboneParams::extract_frame_features(self, clip)
    }
}
