//! Experiment configuration: TOML schema, validation, and the config hash
//! that ties checkpoints to the architecture they were trained with.

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::eval::EvalProtocol;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataConfig {
    /// Directory the manifests' frames_dir paths are relative to.
    pub root: PathBuf,
    pub source_train: PathBuf,
    pub target_train: PathBuf,
    /// Combined labeled test manifest, split by the eval protocol.
    pub test: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Identities per source batch.
    pub p: usize,
    /// Tracklets per identity.
    pub k: usize,
    /// Frames per clip.
    pub t: usize,
    /// Unlabeled target clips per step.
    pub target_clips: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { p: 2, k: 2, t: 4, target_clips: 4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub method: String,
    pub learning_rate: f64,
    pub steps: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { method: "adam".into(), learning_rate: 3e-4, steps: 400 }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Fixed,
    Learnable,
}

/// Weights of the four total-loss terms. In `Learnable` mode each weight is
/// exp(-s) for a trained free scalar s, with an additive -log(w) regularizer
/// keeping weights away from zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    pub mode: WeightMode,
    pub w_cse: f64,
    pub w_tri: f64,
    pub w_s: f64,
    pub w_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { mode: WeightMode::Fixed, w_cse: 1.0, w_tri: 1.0, w_s: 1.0, w_c: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TripletSection {
    pub margin: f64,
    pub mining: String,
}

impl Default for TripletSection {
    fn default() -> Self {
        TripletSection { margin: 0.3, mining: "batch_hard".into() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrlConfig {
    /// "dann_ramp" or "constant".
    pub lambda_schedule: String,
    pub lambda_const: f64,
}

impl Default for GrlConfig {
    fn default() -> Self {
        GrlConfig { lambda_schedule: "dann_ramp".into(), lambda_const: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StitchConfig {
    pub v_choices: Vec<usize>,
    pub v_max: usize,
}

impl Default for StitchConfig {
    fn default() -> Self {
        StitchConfig { v_choices: vec![2, 4], v_max: 4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadsConfig {
    pub dropout: f64,
    pub hidden: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        HeadsConfig { dropout: 0.5, hidden: 32 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub alpha: f64,
    /// Phase-1 length in steps; defaults to 25% of total steps.
    pub warmup_steps: Option<usize>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { alpha: 0.999, warmup_steps: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub m: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig { m: 16, max_iters: 100, tol: 1e-6 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub temperature: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig { temperature: 0.1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BackboneSection {
    pub image_size: usize,
    pub conv_channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for BackboneSection {
    fn default() -> Self {
        BackboneSection { image_size: 32, conv_channels: vec![8, 16, 32], embed_dim: 64 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Master seed; mandatory.
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub backbone: BackboneSection,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub triplet: TripletSection,
    #[serde(default)]
    pub grl: GrlConfig,
    #[serde(default)]
    pub stitch: StitchConfig,
    #[serde(default)]
    pub heads: HeadsConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub consistency: ConsistencyConfig,
    #[serde(default)]
    pub eval: EvalProtocol,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses a TOML config; relative paths resolve against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.root = resolve(base, &cfg.data.root);
        cfg.data.source_train = resolve(base, &cfg.data.source_train);
        cfg.data.target_train = resolve(base, &cfg.data.target_train);
        cfg.data.test = resolve(base, &cfg.data.test);
        cfg.output_dir = resolve(base, &cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.data.root, &self.data.source_train, &self.data.target_train, &self.data.test] {
            if !p.exists() {
                return Err(Error::Config(format!("referenced path does not exist: {}", p.display())));
            }
        }
        if self.optimizer.method != "adam" {
            return Err(Error::Config(format!("unknown optimizer method {:?}", self.optimizer.method)));
        }
        if self.optimizer.steps == 0 {
            return Err(Error::Config("optimizer.steps must be >= 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("optimizer.learning_rate must be > 0".into()));
        }
        for (name, w) in [
            ("w_cse", self.weights.w_cse),
            ("w_tri", self.weights.w_tri),
            ("w_s", self.weights.w_s),
            ("w_c", self.weights.w_c),
        ] {
            if w < 0.0 || (self.weights.mode == WeightMode::Learnable && w <= 0.0) {
                return Err(Error::Config(format!("loss weight {name} must be positive, got {w}")));
            }
        }
        if self.triplet.margin < 0.0 {
            return Err(Error::Config("triplet.margin must be >= 0".into()));
        }
        match self.triplet.mining.as_str() {
            "batch_hard" | "all_valid" => {}
            other => return Err(Error::Config(format!("unknown mining strategy {other:?}"))),
        }
        match self.grl.lambda_schedule.as_str() {
            "dann_ramp" | "constant" => {}
            other => return Err(Error::Config(format!("unknown lambda schedule {other:?}"))),
        }
        if self.grl.lambda_const < 0.0 {
            return Err(Error::Config("grl.lambda_const must be >= 0".into()));
        }
        if self.stitch.v_choices.is_empty() || self.stitch.v_choices.iter().any(|&v| v < 2) {
            return Err(Error::Config("stitch.v_choices must all be >= 2".into()));
        }
        if self.stitch.v_choices.iter().any(|&v| v > self.stitch.v_max) {
            return Err(Error::Config("stitch.v_choices must not exceed stitch.v_max".into()));
        }
        if !(0.0..1.0).contains(&self.heads.dropout) {
            return Err(Error::Config("heads.dropout must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher.alpha) {
            return Err(Error::Config("teacher.alpha must be in [0, 1]".into()));
        }
        if let Some(w) = self.teacher.warmup_steps {
            if w > self.optimizer.steps {
                return Err(Error::Config("teacher.warmup_steps exceeds optimizer.steps".into()));
            }
        }
        if self.cluster.m == 0 {
            return Err(Error::Config("cluster.m must be >= 1".into()));
        }
        if !(self.consistency.temperature > 0.0) {
            return Err(Error::Config("consistency.temperature must be > 0".into()));
        }
        self.eval.validate()?;
        if self.sampler.p == 0 || self.sampler.k == 0 || self.sampler.t == 0 || self.sampler.target_clips == 0 {
            return Err(Error::Config("sampler fields must all be >= 1".into()));
        }
        Ok(())
    }

    /// Phase-1 length in steps.
    pub fn warmup_steps(&self) -> usize {
        self.teacher.warmup_steps.unwrap_or(self.optimizer.steps / 4)
    }

    /// Concrete backbone config once the source identity count is known.
    pub fn backbone_config(&self, num_classes: usize) -> BackboneConfig {
        BackboneConfig {
            image_size: self.backbone.image_size,
            conv_channels: self.backbone.conv_channels.clone(),
            embed_dim: self.backbone.embed_dim,
            num_classes,
            init_seed: self.seed,
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Hash of the architecture-defining fields; checked when a checkpoint is
/// evaluated under a possibly different config.
pub fn config_hash(backbone: &BackboneConfig) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(backbone).expect("backbone config serializes"));
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn minimal_toml(dir: &Path) -> PathBuf {
        let root = dir.join("data");
        fs::create_dir_all(&root).unwrap();
        for f in ["source_train.csv", "target_train.csv", "target_test.csv"] {
            fs::write(root.join(f), "tracklet_id,person_id,camera_id,domain,frames_dir\n").unwrap();
        }
        let cfg = format!(
            r#"
seed = 7
output_dir = "out"

[data]
root = "data"
source_train = "data/source_train.csv"
target_train = "data/target_train.csv"
test = "data/target_test.csv"
"#
        );
        let p = dir.join("exp.toml");
        fs::write(&p, cfg).unwrap();
        p
    }

    #[test]
    fn loads_minimal_config_with_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = minimal_toml(dir.path());
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.sampler.t, 4);
        assert_eq!(cfg.cluster.m, 16);
        assert_eq!(cfg.weights.mode, WeightMode::Fixed);
        assert_eq!(cfg.warmup_steps(), 100);
        assert!(cfg.data.root.is_absolute() || cfg.data.root.starts_with(dir.path()));
    }

    #[test]
    fn missing_seed_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = minimal_toml(dir.path());
        let text = fs::read_to_string(&path).unwrap().replace("seed = 7", "");
        fs::write(&path, text).unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn missing_data_path_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = minimal_toml(dir.path());
        fs::remove_file(dir.path().join("data/target_test.csv")).unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn config_hash_tracks_architecture() {
        let a = BackboneConfig::default();
        let mut b = a.clone();
        b.embed_dim += 1;
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
    }
}
