//! Two-phase training loop.
//!
//! Phase 1 trains the student on the supervised losses plus the adversarial
//! domain losses over mixed-domain batches. Phase 2 initializes the teacher
//! from the student, re-clusters pooled student/teacher target features at
//! epoch boundaries, adds the consistency losses, and EMA-blends the teacher
//! after every optimizer step. Only the student is ever evaluated.

use crate::autodiff::{Tape, TensorId};
use crate::backbone::{reference_backbone, BackboneParams, FeatureExtractor};
use crate::checkpoint::{self, Checkpoint, ClusterSnapshot};
use crate::clustering::KMeansConfig;
use crate::config::{config_hash, ExperimentConfig, WeightMode};
use crate::datamodel::{
    load_clip, load_dataset, sample_frame_indices, sample_pk_batch, split_query_gallery,
    DatasetRole, DomainLabel, FrameSampling, ReIDDataset,
};
use crate::domain::{
    combined_regression_loss_on_tape, domain_ce_loss_on_tape, ClassifierHead, HeadLevel,
    LambdaSchedule, RegressorHead, TARGET_PAD,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, extract_video_features, train_domain_probe, MetricReport};
use crate::losses::mine_batch_hard;
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::teacher::{
    cluster_features, ema_update, soft_assignment_probs, soft_consistency_on_tape, ClusterModel,
    PairedFeatures, TeacherState,
};
use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-step loss record."hard" consistency is the literal cluster-index
/// disagreement metric; "soft" is the trainable surrogate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lambda: f64,
    pub l_cse: f64,
    pub l_tri: f64,
    pub l_s1: f64,
    pub l_s2: f64,
    pub l_s3: f64,
    pub l_c1_soft: f64,
    /// Literal cluster-index disagreement fraction; absent before phase 2.
    pub l_c1_hard: Option<f64>,
    pub l_c2: f64,
    pub total: f64,
    /// Video-level domain-head accuracy on this batch; absent when the
    /// domain losses are disabled.
    pub domain_head_acc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub steps: Vec<StepRecord>,
    pub phase2_start_step: usize,
    pub probe_accuracy: Option<f64>,
    pub final_step: usize,
}

pub struct Trainer {
    pub cfg: ExperimentConfig,
    pub source: ReIDDataset,
    pub target: ReIDDataset,
    pub student: BackboneParams,
    pub frame_head: ClassifierHead,
    pub video_head: ClassifierHead,
    pub regressor: RegressorHead,
    /// Free log-weight scalars in learnable mode; empty otherwise.
    pub aux: ParamSet,
    pub teacher: Option<TeacherState>,
    pub cluster: Option<ClusterModel>,
    opt: Adam,
    rng: ChaCha8Rng,
    pub step: usize,
    epoch_steps: usize,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig) -> Result<Trainer> {
        cfg.validate()?;
        let source = load_dataset(&cfg.data.root, &cfg.data.source_train, DatasetRole::SourceTrain)?;
        let target = load_dataset(&cfg.data.root, &cfg.data.target_train, DatasetRole::TargetTrain)?;
        if target.is_empty() {
            return Err(Error::Config("target-train dataset is empty".into()));
        }
        let num_classes = source.num_identities.unwrap() as usize;
        if num_classes < cfg.sampler.p {
            return Err(Error::Config(format!(
                "sampler.p={} exceeds the {} source identities",
                cfg.sampler.p, num_classes
            )));
        }
        let student = reference_backbone(&cfg.backbone_config(num_classes))?;
        let d = cfg.backbone.embed_dim;
        let frame_head = ClassifierHead::new(HeadLevel::Frame, d, cfg.heads.hidden, cfg.seed ^ 0x5eed_0001);
        let video_head = ClassifierHead::new(HeadLevel::Video, d, cfg.heads.hidden, cfg.seed ^ 0x5eed_0002);
        let regressor = RegressorHead::new(d, cfg.stitch.v_max, cfg.seed ^ 0x5eed_0003);
        let mut aux = ParamSet::new();
        if cfg.weights.mode == WeightMode::Learnable {
            for name in ["s_cse", "s_tri", "s_s", "s_c"] {
                aux.insert(name, ArrayD::zeros(IxDyn(&[])));
            }
        }
        let epoch_steps = target.len().div_ceil(cfg.sampler.target_clips).max(1);
        let opt = Adam::new(cfg.optimizer.learning_rate);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            cfg,
            source,
            target,
            student,
            frame_head,
            video_head,
            regressor,
            aux,
            teacher: None,
            cluster: None,
            opt,
            rng,
            step: 0,
            epoch_steps,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.optimizer.steps
    }

    fn lambda(&self) -> f64 {
        let schedule = match self.cfg.grl.lambda_schedule.as_str() {
            "constant" => LambdaSchedule::Constant(self.cfg.grl.lambda_const),
            _ => LambdaSchedule::DannRamp,
        };
        let progress = self.step as f64 / self.cfg.optimizer.steps.max(1) as f64;
        schedule.lambda(progress)
    }

    fn uses_domain_losses(&self) -> bool {
        self.cfg.weights.mode == WeightMode::Learnable || self.cfg.weights.w_s > 0.0
    }

    fn uses_consistency(&self) -> bool {
        self.cfg.weights.mode == WeightMode::Learnable || self.cfg.weights.w_c > 0.0
    }

    fn dropout_mask(&mut self, rows: usize) -> Option<ArrayD<f64>> {
        let p = self.cfg.heads.dropout;
        if p <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        let mut mask = ArrayD::zeros(IxDyn(&[rows, self.cfg.heads.hidden]));
        for v in mask.iter_mut() {
            if self.rng.random_range(0.0..1.0) >= p {
                *v = keep;
            }
        }
        Some(mask)
    }

    /// Clip features of the full target set under deterministic UNIFORM
    /// sampling, through both networks.
    fn target_pair_features(&self) -> Result<PairedFeatures> {
        let teacher = self.teacher.as_ref().expect("phase 2 teacher");
        let mut throwaway = ChaCha8Rng::seed_from_u64(0); // UNIFORM draws nothing
        let mut clips = Vec::with_capacity(self.target.len());
        for t in &self.target.tracklets {
            let idx = sample_frame_indices(t.len(), self.cfg.sampler.t, FrameSampling::Uniform, &mut throwaway)?;
            clips.push(load_clip(t, &idx, self.cfg.backbone.image_size)?);
        }
        crate::teacher::extract_pair_features(&self.student, teacher, &clips)
    }

    fn recluster(&mut self) -> Result<()> {
        let pairs = self.target_pair_features()?;
        let kcfg = KMeansConfig {
            clusters: self.cfg.cluster.m.min(2 * self.target.len()),
            max_iters: self.cfg.cluster.max_iters,
            tol: self.cfg.cluster.tol,
        };
        let mut crng = ChaCha8Rng::seed_from_u64(self.rng.random());
        self.cluster = Some(cluster_features(&pairs, &kcfg, &mut crng)?);
        Ok(())
    }

    /// Runs one optimization step and returns its loss record.
    pub fn run_step(&mut self) -> Result<StepRecord> {
        let warmup = self.cfg.warmup_steps();
        let phase2 = self.step >= warmup;
        if phase2 && self.uses_consistency() {
            if self.teacher.is_none() {
                self.teacher = Some(TeacherState::from_student(&self.student, self.cfg.teacher.alpha));
            }
            if (self.step - warmup) % self.epoch_steps == 0 || self.cluster.is_none() {
                self.recluster()?;
            }
        }
        let lambda = self.lambda();
        let t_frames = self.cfg.sampler.t;

        // ---- sample batches ----
        let batch = sample_pk_batch(&self.source, self.cfg.sampler.p, self.cfg.sampler.k, t_frames, &mut self.rng)?;
        // (from_source, tracklet index, frame indices)
        let mut clip_specs: Vec<(bool, usize, Vec<usize>)> = Vec::new();
        for (ti, idx) in &batch.clips {
            clip_specs.push((true, *ti, idx.clone()));
        }
        let n_source = clip_specs.len();
        for _ in 0..self.cfg.sampler.target_clips {
            let ti = self.rng.random_range(0..self.target.len());
            let idx = sample_frame_indices(
                self.target.tracklets[ti].len(),
                t_frames,
                FrameSampling::ChunkedRandom,
                &mut self.rng,
            )?;
            clip_specs.push((false, ti, idx));
        }
        let n_clips = clip_specs.len();

        // ---- load pixels ----
        let s = self.cfg.backbone.image_size;
        let mut frames = Array4::<f64>::zeros((n_clips * t_frames, 3, s, s));
        let mut clip_domains = Vec::with_capacity(n_clips);
        let mut source_classes = Vec::with_capacity(n_source);
        for (ci, (from_source, ti, idx)) in clip_specs.iter().enumerate() {
            let tr = if *from_source { &self.source.tracklets[*ti] } else { &self.target.tracklets[*ti] };
            let clip = load_clip(tr, idx, s)?;
            for (fi, frame) in clip.axis_iter(Axis(0)).enumerate() {
                frames.index_axis_mut(Axis(0), ci * t_frames + fi).assign(&frame);
            }
            clip_domains.push(tr.domain);
            if ci < n_source {
                source_classes.push(tr.person_id.unwrap() as usize - 1);
            }
        }
        let target_clip_rows: Vec<usize> = (n_source..n_clips).collect();

        // ---- forward ----
        let mut tape = Tape::new();
        let student_bound = self.student.leaves.bind(&mut tape);
        let frames_id = tape.leaf(frames.into_dyn());
        let frame_feats = crate::backbone::forward_frames_on_tape(&mut tape, &self.student, &student_bound, frames_id);
        let clip_groups: Vec<Vec<usize>> = (0..n_clips)
            .map(|c| (c * t_frames..(c + 1) * t_frames).collect())
            .collect();
        let video_feats = tape.group_mean(frame_feats, clip_groups);

        // supervised: cross-entropy + batch-hard triplet on source clips
        let source_rows: Vec<usize> = (0..n_source).collect();
        let source_videos = tape.gather_rows(video_feats, source_rows);
        let logits = crate::backbone::classify_on_tape(&mut tape, &self.student, &student_bound, source_videos);
        let l_cse = tape.ce_mean(logits, source_classes.clone());
        let source_vals = tape
            .value(source_videos)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let source_ids: Vec<u32> = batch
            .clips
            .iter()
            .map(|(ti, _)| self.source.tracklets[*ti].person_id.unwrap())
            .collect();
        let triplets = mine_batch_hard(&source_vals.view(), &source_ids)?;
        let l_tri = tape.triplet_hinge_mean(source_videos, triplets, self.cfg.triplet.margin);

        // adversarial domain losses on the mixed batch
        let frame_bound = self.frame_head.leaves.bind(&mut tape);
        let video_bound = self.video_head.leaves.bind(&mut tape);
        let reg_bound = self.regressor.leaves.bind(&mut tape);
        let mut l_s1 = None;
        let mut l_s2 = None;
        let mut l_s3 = None;
        let mut domain_head_acc = None;
        if self.uses_domain_losses() {
            let frame_labels: Vec<DomainLabel> = clip_domains
                .iter()
                .flat_map(|&d| std::iter::repeat_n(d, t_frames))
                .collect();
            let fmask = self.dropout_mask(frame_labels.len());
            l_s1 = Some(domain_ce_loss_on_tape(
                &mut tape, frame_feats, &frame_labels, &self.frame_head, &frame_bound, lambda, fmask,
            ));
            let vmask = self.dropout_mask(n_clips);
            l_s2 = Some(domain_ce_loss_on_tape(
                &mut tape, video_feats, &clip_domains, &self.video_head, &video_bound, lambda, vmask,
            ));
            domain_head_acc = Some(self.video_head_accuracy(&tape, video_feats, &clip_domains));

            // stitched sequences: one V per step, floor(n/V) groups
            let v = *self.cfg.stitch.v_choices[..].choose(&mut self.rng).unwrap();
            let n_groups = n_clips / v;
            if n_groups > 0 {
                let mut order: Vec<usize> = (0..n_clips).collect();
                order.shuffle(&mut self.rng);
                let mut groups = Vec::with_capacity(n_groups);
                let mut targets = Array2::<f64>::from_elem((n_groups, self.cfg.stitch.v_max), TARGET_PAD);
                for g in 0..n_groups {
                    let mut members: Vec<usize> = order[g * v..(g + 1) * v].to_vec();
                    members.shuffle(&mut self.rng); // permutation order
                    for (slot, &ci) in members.iter().enumerate() {
                        targets[[g, slot]] = clip_domains[ci].as_index() as f64;
                    }
                    groups.push(members);
                }
                let combined = tape.group_mean(video_feats, groups);
                l_s3 = Some(combined_regression_loss_on_tape(
                    &mut tape, combined, targets, &self.regressor, &reg_bound, lambda,
                ));
            }
        }

        // consistency losses on target clips (phase 2)
        let mut l_c1 = None;
        let mut l_c1_hard = None;
        let mut l_c2 = None;
        if phase2 && self.uses_consistency() && !target_clip_rows.is_empty() {
            let teacher = self.teacher.as_ref().unwrap();
            let cluster = self.cluster.as_ref().unwrap();
            let tau = self.cfg.consistency.temperature;
            // teacher features of the same clips, gradient-free
            let n_t = target_clip_rows.len();
            let mut teacher_rows = Array2::<f64>::zeros((n_t, self.cfg.backbone.embed_dim));
            for (k, &row) in target_clip_rows.iter().enumerate() {
                let (from_source, ti, idx) = &clip_specs[row];
                debug_assert!(!from_source);
                let clip = load_clip(&self.target.tracklets[*ti], idx, s)?;
                let vf = teacher.params.video_feature(&clip)?;
                teacher_rows.row_mut(k).assign(&vf.0);
            }
            let student_rows_id = tape.gather_rows(video_feats, target_clip_rows.clone());
            let student_rows = tape
                .value(student_rows_id)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned();
            let teacher_feats: Vec<crate::backbone::VideoFeature> = teacher_rows
                .rows()
                .into_iter()
                .map(|r| crate::backbone::VideoFeature(r.to_owned()))
                .collect();
            let teacher_probs = soft_assignment_probs(&teacher_feats, &cluster.centroids, tau);
            l_c1 = Some(soft_consistency_on_tape(&mut tape, student_rows_id, &cluster.centroids, &teacher_probs, tau));

            // hard disagreement metric (Eq.-literal indicator, zero-gradient)
            let mut differ = 0usize;
            let mut student_assign = Vec::with_capacity(n_t);
            for k in 0..n_t {
                let sa = crate::clustering::nearest_centroid(student_rows.row(k).as_slice().unwrap(), &cluster.centroids);
                let ta = crate::clustering::nearest_centroid(teacher_rows.row(k).as_slice().unwrap(), &cluster.centroids);
                student_assign.push(sa);
                if sa != ta {
                    differ += 1;
                }
            }
            l_c1_hard = Some(differ as f64 / n_t as f64);

            // centroid-similarity: student term carries gradient, teacher term
            // is a constant offset; mean over both networks' features
            let student_dist_sum = tape.dist_to_assigned_sum(student_rows_id, cluster.centroids.clone(), student_assign);
            let mut teacher_sum = 0.0;
            for k in 0..n_t {
                let ta = crate::clustering::nearest_centroid(teacher_rows.row(k).as_slice().unwrap(), &cluster.centroids);
                let mut acc = 0.0;
                for d in 0..teacher_rows.ncols() {
                    let t = teacher_rows[[k, d]] - cluster.centroids[[ta, d]];
                    acc += t * t;
                }
                teacher_sum += acc.sqrt();
            }
            let inv = 1.0 / (2 * n_t) as f64;
            let c2 = tape.affine_scalars(vec![(student_dist_sum, inv)], teacher_sum * inv);
            l_c2 = Some(c2);
        }

        // ---- weighted total ----
        let zero = tape.leaf_scalar(0.0);
        let ls_sum = {
            let mut terms = Vec::new();
            for t in [l_s1, l_s2, l_s3].into_iter().flatten() {
                terms.push((t, 1.0));
            }
            if terms.is_empty() {
                zero
            } else {
                tape.affine_scalars(terms, 0.0)
            }
        };
        let lc_sum = {
            let mut terms = Vec::new();
            for t in [l_c1, l_c2].into_iter().flatten() {
                terms.push((t, 1.0));
            }
            if terms.is_empty() {
                zero
            } else {
                tape.affine_scalars(terms, 0.0)
            }
        };
        let aux_bound = self.aux.bind(&mut tape);
        let total = match self.cfg.weights.mode {
            WeightMode::Fixed => {
                let w = &self.cfg.weights;
                tape.affine_scalars(
                    vec![(l_cse, w.w_cse), (l_tri, w.w_tri), (ls_sum, w.w_s), (lc_sum, w.w_c)],
                    0.0,
                )
            }
            WeightMode::Learnable => {
                // total = sum_i exp(-s_i) * L_i + s_i
                let mut terms = Vec::new();
                for (name, loss_id) in [("s_cse", l_cse), ("s_tri", l_tri), ("s_s", ls_sum), ("s_c", lc_sum)] {
                    let s_id = aux_bound.id(&self.aux, name);
                    let neg = tape.affine_scalars(vec![(s_id, -1.0)], 0.0);
                    let w = tape.exp(neg);
                    let weighted = tape.mul(w, loss_id);
                    terms.push((weighted, 1.0));
                    terms.push((s_id, 1.0));
                }
                tape.affine_scalars(terms, 0.0)
            }
        };

        // ---- NaN guard ----
        let record = StepRecord {
            step: self.step,
            lambda,
            l_cse: tape.scalar_value(l_cse),
            l_tri: tape.scalar_value(l_tri),
            l_s1: l_s1.map(|id| tape.scalar_value(id)).unwrap_or(0.0),
            l_s2: l_s2.map(|id| tape.scalar_value(id)).unwrap_or(0.0),
            l_s3: l_s3.map(|id| tape.scalar_value(id)).unwrap_or(0.0),
            l_c1_soft: l_c1.map(|id| tape.scalar_value(id)).unwrap_or(0.0),
            l_c1_hard,
            l_c2: l_c2.map(|id| tape.scalar_value(id)).unwrap_or(0.0),
            total: tape.scalar_value(total),
            domain_head_acc,
        };
        for (name, v) in [
            ("l_cse", record.l_cse),
            ("l_tri", record.l_tri),
            ("l_s1", record.l_s1),
            ("l_s2", record.l_s2),
            ("l_s3", record.l_s3),
            ("l_c1", record.l_c1_soft),
            ("l_c2", record.l_c2),
            ("total", record.total),
        ] {
            if !v.is_finite() {
                return Err(Error::Diverged { term: name.into(), step: self.step });
            }
        }

        // ---- backward + update ----
        let grads = tape.backward(total);
        let mut pairs: Vec<(&mut ArrayD<f64>, &ArrayD<f64>)> = Vec::new();
        let mut ids = Vec::new();
        ids.extend_from_slice(student_bound.ids());
        ids.extend_from_slice(frame_bound.ids());
        ids.extend_from_slice(video_bound.ids());
        ids.extend_from_slice(reg_bound.ids());
        ids.extend_from_slice(aux_bound.ids());
        let grad_arrays: Vec<&ArrayD<f64>> = ids.iter().map(|&id| grads.get(id)).collect();
        let leaves_iter = self
            .student
            .leaves
            .iter_mut()
            .chain(self.frame_head.leaves.iter_mut())
            .chain(self.video_head.leaves.iter_mut())
            .chain(self.regressor.leaves.iter_mut())
            .chain(self.aux.iter_mut());
        for ((_, leaf), grad) in leaves_iter.zip(grad_arrays) {
            pairs.push((leaf, grad));
        }
        self.opt.step(&mut pairs);

        if let Some(teacher) = self.teacher.as_mut() {
            ema_update(teacher, &self.student.leaves, self.cfg.teacher.alpha)?;
        }
        self.step += 1;
        Ok(record)
    }

    fn video_head_accuracy(&self, tape: &Tape, video_feats: TensorId, domains: &[DomainLabel]) -> f64 {
        // inference-mode head prediction on the current batch
        let feats = tape
            .value(video_feats)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned();
        let mut probe = Tape::new();
        let bound = self.video_head.leaves.bind(&mut probe);
        let x = probe.leaf(feats.into_dyn());
        let logits_id = self.video_head.forward_on_tape(&mut probe, &bound, x, None);
        let logits = probe.value(logits_id).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        let mut correct = 0usize;
        for (i, d) in domains.iter().enumerate() {
            let pred = if logits[[i, 1]] > logits[[i, 0]] { 1 } else { 0 };
            if pred == d.as_index() {
                correct += 1;
            }
        }
        correct as f64 / domains.len() as f64
    }

    /// Snapshot of everything needed for bitwise resume.
    pub fn checkpoint(&self) -> Checkpoint {
        let teacher_leaves = self
            .teacher
            .as_ref()
            .map(|t| t.params.leaves.clone())
            .unwrap_or_else(|| self.student.leaves.clone());
        let (t, m, v) = self.opt.state();
        Checkpoint {
            step: self.step as u64,
            config_hash: config_hash(&self.student.config),
            backbone_config: self.student.config.clone(),
            student: self.student.leaves.clone(),
            teacher: teacher_leaves,
            teacher_step: self.teacher.as_ref().map(|t| t.step).unwrap_or(0),
            frame_head: self.frame_head.leaves.clone(),
            video_head: self.video_head.leaves.clone(),
            regressor: self.regressor.leaves.clone(),
            aux: self.aux.clone(),
            adam_t: t,
            adam_m: m.to_vec(),
            adam_v: v.to_vec(),
            rng_seed: self.rng.get_seed(),
            rng_word_pos: self.rng.get_word_pos(),
            cluster: self.cluster.as_ref().map(|c| ClusterSnapshot {
                centroids: c.centroids.clone(),
                student_assign: c.student_assign.clone(),
                teacher_assign: c.teacher_assign.clone(),
            }),
        }
    }

    /// Rebuilds a trainer mid-run; subsequent steps replay bitwise.
    pub fn from_checkpoint(cfg: ExperimentConfig, ckpt: &Checkpoint) -> Result<Trainer> {
        let mut trainer = Trainer::new(cfg)?;
        let expect = config_hash(&trainer.student.config);
        if ckpt.config_hash != expect {
            return Err(Error::HashMismatch(format!(
                "checkpoint hash {} vs config hash {expect}",
                ckpt.config_hash
            )));
        }
        trainer.student.leaves = ckpt.student.clone();
        trainer.frame_head.leaves = ckpt.frame_head.clone();
        trainer.video_head.leaves = ckpt.video_head.clone();
        trainer.regressor.leaves = ckpt.regressor.clone();
        trainer.aux = ckpt.aux.clone();
        trainer.step = ckpt.step as usize;
        trainer.opt.restore(ckpt.adam_t, ckpt.adam_m.clone(), ckpt.adam_v.clone());
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
        rng.set_word_pos(ckpt.rng_word_pos);
        trainer.rng = rng;
        if trainer.step >= trainer.cfg.warmup_steps() && trainer.uses_consistency() {
            let mut teacher = TeacherState::from_student(&trainer.student, trainer.cfg.teacher.alpha);
            teacher.params.leaves = ckpt.teacher.clone();
            teacher.step = ckpt.teacher_step;
            trainer.teacher = Some(teacher);
        }
        trainer.cluster = ckpt.cluster.as_ref().map(|c| ClusterModel {
            centroids: c.centroids.clone(),
            student_assign: c.student_assign.clone(),
            teacher_assign: c.teacher_assign.clone(),
        });
        Ok(trainer)
    }
}

/// Trains per the config, writes `checkpoint.bin` and `run_report.json` into
/// the output directory, and returns both artifacts.
pub fn run_train(cfg: &ExperimentConfig) -> Result<(Checkpoint, RunReport)> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut steps = Vec::with_capacity(trainer.total_steps());
    while trainer.step < trainer.total_steps() {
        let rec = trainer.run_step()?;
        if rec.step % 50 == 0 {
            log::info!(
                "step {:4}  total {:.4}  cse {:.4}  tri {:.4}  S {:.4}  C {:.4}",
                rec.step,
                rec.total,
                rec.l_cse,
                rec.l_tri,
                rec.l_s1 + rec.l_s2 + rec.l_s3,
                rec.l_c1_soft + rec.l_c2
            );
        }
        steps.push(rec);
    }
    // the teacher exists at exit even when phase 2 never ran
    if trainer.teacher.is_none() {
        trainer.teacher = Some(TeacherState::from_student(&trainer.student, cfg.teacher.alpha));
    }

    // domain probe on frozen final video features of both training sets
    let probe_accuracy = {
        let max_frames = cfg.eval.max_frames;
        let src_feats = extract_video_features(&trainer.student, &trainer.source, max_frames)?;
        let tgt_feats = extract_video_features(&trainer.student, &trainer.target, max_frames)?;
        let d = cfg.backbone.embed_dim;
        let n = src_feats.len() + tgt_feats.len();
        let mut feats = Array2::<f64>::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        for (i, f) in src_feats.iter().chain(tgt_feats.iter()).enumerate() {
            feats.row_mut(i).assign(&f.0);
        }
        labels.extend(std::iter::repeat_n(DomainLabel::Source, src_feats.len()));
        labels.extend(std::iter::repeat_n(DomainLabel::Target, tgt_feats.len()));
        Some(train_domain_probe(&feats, &labels, 300, 0.5))
    };

    let report = RunReport {
        steps,
        phase2_start_step: cfg.warmup_steps(),
        probe_accuracy,
        final_step: trainer.step,
    };
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let ckpt = trainer.checkpoint();
    checkpoint::save(&cfg.output_dir.join("checkpoint.bin"), &ckpt)?;
    let report_path = cfg.output_dir.join("run_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).expect("report serializes"))
        .map_err(|e| Error::io(&report_path, e))?;
    Ok((ckpt, report))
}

/// Evaluates a checkpoint's student on the configured test split and writes
/// `metrics.txt` / `metrics.json` into the output directory.
pub fn run_eval(cfg: &ExperimentConfig, checkpoint_path: &Path, allow_hash_mismatch: bool) -> Result<MetricReport> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let expect = config_hash(&cfg.backbone_config(ckpt.backbone_config.num_classes));
    if ckpt.config_hash != expect && !allow_hash_mismatch {
        return Err(Error::HashMismatch(format!(
            "checkpoint was trained under a different backbone config ({} vs {expect}); \
             pass the override flag to evaluate anyway",
            ckpt.config_hash
        )));
    }
    let student = BackboneParams { config: ckpt.backbone_config.clone(), leaves: ckpt.student.clone() };
    let test = load_dataset(&cfg.data.root, &cfg.data.test, DatasetRole::TestGallery)?;
    let (query, gallery) = split_query_gallery(&test, cfg.eval.split)?;
    let report = evaluate(&student, &query, &gallery, &cfg.eval)?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| Error::io(&cfg.output_dir, e))?;
    let txt = cfg.output_dir.join("metrics.txt");
    std::fs::write(&txt, report.to_text()).map_err(|e| Error::io(&txt, e))?;
    let json = cfg.output_dir.join("metrics.json");
    std::fs::write(&json, serde_json::to_string_pretty(&report).expect("metrics serialize"))
        .map_err(|e| Error::io(&json, e))?;
    Ok(report)
}
