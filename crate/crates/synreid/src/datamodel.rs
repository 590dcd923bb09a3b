//! Tracklets, datasets, domain labels, and the samplers feeding training
//! and evaluation.
//!
//! On-disk manifest contract: UTF-8 CSV with header
//! `tracklet_id,person_id,camera_id,domain,frames_dir`, one row per tracklet;
//! `domain` is `source` or `target`; `person_id` `-1` means unlabeled; frame
//! files under `frames_dir` sorted lexicographically define temporal order.

use crate::error::{Error, Result};
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Which side of the domain gap a tracklet comes from.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainLabel {
    /// Synthetic data (labeled).
    Source = 0,
    /// Real data (unlabeled at train time).
    Target = 1,
}

impl DomainLabel {
    pub fn as_index(self) -> usize {
        self as usize
    }

    pub fn parse(s: &str) -> Option<DomainLabel> {
        match s {
            "source" => Some(DomainLabel::Source),
            "target" => Some(DomainLabel::Target),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DomainLabel::Source => "source",
            DomainLabel::Target => "target",
        }
    }
}

/// One person video sequence from a single camera.
#[derive(Clone, Debug)]
pub struct Tracklet {
    pub tracklet_id: String,
    /// Identity label; `None` for unlabeled target-train tracklets.
    /// On SOURCE_TRAIN datasets the ids are remapped to the contiguous
    /// range 1..=C by first appearance.
    pub person_id: Option<u32>,
    pub camera_id: u32,
    pub domain: DomainLabel,
    /// Frame image paths in temporal order.
    pub frames: Vec<PathBuf>,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DatasetRole {
    SourceTrain,
    TargetTrain,
    TestQuery,
    TestGallery,
}

impl DatasetRole {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetRole::SourceTrain => "source_train",
            DatasetRole::TargetTrain => "target_train",
            DatasetRole::TestQuery => "test_query",
            DatasetRole::TestGallery => "test_gallery",
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReIDDataset {
    pub name: String,
    pub role: DatasetRole,
    pub tracklets: Vec<Tracklet>,
    /// Count of distinct person ids; `None` for unlabeled sets.
    pub num_identities: Option<u32>,
}

impl ReIDDataset {
    pub fn len(&self) -> usize {
        self.tracklets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracklets.is_empty()
    }

    /// Distinct labeled identities, ascending.
    pub fn identity_list(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.tracklets.iter().filter_map(|t| t.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// How frame indices are drawn from a tracklet.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum FrameSampling {
    /// Partition the tracklet into T equal contiguous chunks, one random
    /// index per chunk.
    ChunkedRandom,
    /// Evenly spaced indices.
    Uniform,
    /// Every frame, uniformly subsampled down to T when longer than T.
    All,
}

/// A P-identities x K-tracklets batch of sampled clips.
#[derive(Clone, Debug)]
pub struct PKBatch {
    /// (tracklet index into the dataset, sampled frame indices).
    pub clips: Vec<(usize, Vec<usize>)>,
    pub p: usize,
    pub k: usize,
    pub t: usize,
}

const MANIFEST_HEADER: [&str; 5] = ["tracklet_id", "person_id", "camera_id", "domain", "frames_dir"];

/// Loads and validates a dataset manifest.
///
/// SOURCE_TRAIN identities are remapped to 1..=C by first appearance; row
/// order is preserved.
pub fn load_dataset(root: &Path, manifest: &Path, role: DatasetRole) -> Result<ReIDDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(manifest)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(manifest, std::io::Error::other(e.to_string())),
            _ => Error::schema(manifest, e.to_string()),
        })?;
    {
        let headers = reader
            .headers()
            .map_err(|e| Error::schema(manifest, e.to_string()))?;
        let got: Vec<&str> = headers.iter().collect();
        if got != MANIFEST_HEADER {
            return Err(Error::schema(
                manifest,
                format!("bad header {:?}, expected {:?}", got, MANIFEST_HEADER),
            ));
        }
    }

    let mut tracklets = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::schema(manifest, e.to_string()))?;
        if record.len() != 5 {
            return Err(Error::schema(
                manifest,
                format!("row {}: expected 5 fields, got {}", row_idx + 1, record.len()),
            ));
        }
        let tracklet_id = record[0].to_string();
        let person_raw: i64 = record[1]
            .parse()
            .map_err(|_| Error::schema(manifest, format!("row {}: bad person_id {:?}", row_idx + 1, &record[1])))?;
        let person_id = if person_raw < 0 {
            None
        } else {
            Some(person_raw as u32)
        };
        let camera_id: u32 = record[2]
            .parse()
            .map_err(|_| Error::schema(manifest, format!("row {}: bad camera_id {:?}", row_idx + 1, &record[2])))?;
        let domain = DomainLabel::parse(&record[3]).ok_or_else(|| {
            Error::schema(manifest, format!("row {}: bad domain {:?}", row_idx + 1, &record[3]))
        })?;
        let frames_dir = root.join(&record[4]);
        let frames = list_frames(&frames_dir)?;
        if frames.is_empty() {
            return Err(Error::schema(
                manifest,
                format!("row {}: tracklet {tracklet_id} has no frames in {}", row_idx + 1, frames_dir.display()),
            ));
        }

        match role {
            DatasetRole::SourceTrain if person_id.is_none() => {
                return Err(Error::schema(
                    manifest,
                    format!("row {}: unlabeled tracklet {tracklet_id} in SOURCE_TRAIN", row_idx + 1),
                ));
            }
            DatasetRole::TargetTrain if person_id.is_some() => {
                return Err(Error::schema(
                    manifest,
                    format!("row {}: labeled tracklet {tracklet_id} in TARGET_TRAIN", row_idx + 1),
                ));
            }
            DatasetRole::TestQuery | DatasetRole::TestGallery if person_id.is_none() => {
                return Err(Error::schema(
                    manifest,
                    format!("row {}: unlabeled tracklet {tracklet_id} in test split", row_idx + 1),
                ));
            }
            _ => {}
        }

        tracklets.push(Tracklet { tracklet_id, person_id, camera_id, domain, frames });
    }

    let num_identities = match role {
        DatasetRole::SourceTrain => {
            // Remap ids to 1..=C by first appearance.
            let mut seen: Vec<u32> = Vec::new();
            for t in tracklets.iter_mut() {
                let raw = t.person_id.unwrap();
                let mapped = match seen.iter().position(|&s| s == raw) {
                    Some(pos) => pos as u32 + 1,
                    None => {
                        seen.push(raw);
                        seen.len() as u32
                    }
                };
                t.person_id = Some(mapped);
            }
            Some(seen.len() as u32)
        }
        DatasetRole::TargetTrain => None,
        DatasetRole::TestQuery | DatasetRole::TestGallery => {
            let mut ids: Vec<u32> = tracklets.iter().filter_map(|t| t.person_id).collect();
            ids.sort_unstable();
            ids.dedup();
            Some(ids.len() as u32)
        }
    };

    let name = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    Ok(ReIDDataset { name, role, tracklets, num_identities })
}

fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut frames: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    frames.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(frames)
}

/// Core frame-index sampler. See [`FrameSampling`] for strategies.
///
/// Returns T indices (strictly increasing when `length >= T`); tracklets
/// shorter than T cyclically pad, relaxing monotonicity to non-decreasing.
/// `All` is the exception: it returns every index when `length <= T` (T acts
/// as a cap) and an even T-subsample otherwise.
pub fn sample_frame_indices(
    length: usize,
    t: usize,
    strategy: FrameSampling,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if t == 0 {
        return Err(Error::Config("frame sample count T must be >= 1".into()));
    }
    if length == 0 {
        return Err(Error::Config("cannot sample from an empty tracklet".into()));
    }
    if strategy == FrameSampling::All && length <= t {
        return Ok((0..length).collect());
    }
    if length < t {
        // Cyclic padding; sorted so the output stays non-decreasing.
        let mut idx: Vec<usize> = (0..t).map(|i| i % length).collect();
        idx.sort_unstable();
        return Ok(idx);
    }
    match strategy {
        FrameSampling::ChunkedRandom => {
            let mut idx = Vec::with_capacity(t);
            for i in 0..t {
                let lo = i * length / t;
                let hi = (i + 1) * length / t;
                idx.push(rng.random_range(lo..hi));
            }
            Ok(idx)
        }
        FrameSampling::Uniform | FrameSampling::All => {
            Ok((0..t).map(|i| i * length / t).collect())
        }
    }
}

pub fn sample_frames(
    tracklet: &Tracklet,
    t: usize,
    strategy: FrameSampling,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    sample_frame_indices(tracklet.len(), t, strategy, rng)
}

/// Draws a P x K batch from a SOURCE_TRAIN dataset: P identities without
/// replacement, K tracklets per identity (with replacement when an identity
/// has fewer than K), T frames per clip via `ChunkedRandom`.
pub fn sample_pk_batch(
    dataset: &ReIDDataset,
    p: usize,
    k: usize,
    t: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PKBatch> {
    if dataset.role != DatasetRole::SourceTrain {
        return Err(Error::Config(format!(
            "sample_pk_batch requires a SOURCE_TRAIN dataset, got {}",
            dataset.role.as_str()
        )));
    }
    if p == 0 || k == 0 {
        return Err(Error::Config("P and K must be >= 1".into()));
    }
    let ids = dataset.identity_list();
    if ids.len() < p {
        return Err(Error::Config(format!(
            "batch needs {p} identities but the dataset has {}",
            ids.len()
        )));
    }
    let mut pool = ids;
    pool.shuffle(rng);
    pool.truncate(p);

    let mut clips = Vec::with_capacity(p * k);
    for &id in &pool {
        let members: Vec<usize> = dataset
            .tracklets
            .iter()
            .enumerate()
            .filter(|(_, tr)| tr.person_id == Some(id))
            .map(|(i, _)| i)
            .collect();
        let chosen: Vec<usize> = if members.len() >= k {
            let mut m = members.clone();
            m.shuffle(rng);
            m.truncate(k);
            m
        } else {
            (0..k).map(|_| members[rng.random_range(0..members.len())]).collect()
        };
        for ti in chosen {
            let idx = sample_frames(&dataset.tracklets[ti], t, FrameSampling::ChunkedRandom, rng)?;
            clips.push((ti, idx));
        }
    }
    Ok(PKBatch { clips, p, k, t })
}

/// Rule that splits a labeled test set into query and gallery.
#[derive(Copy, Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitPolicy {
    /// Tracklets from this camera become queries; all others form the gallery.
    QueryCamera { camera: u32 },
}

/// Splits a labeled dataset into (query, gallery) per `policy`.
///
/// The rule is keyed on ids and camera ids only, so the split is independent
/// of manifest row order; outputs are sorted by tracklet_id. Queries whose
/// identity never appears in the gallery are dropped with a logged warning.
pub fn split_query_gallery(
    dataset: &ReIDDataset,
    policy: SplitPolicy,
) -> Result<(ReIDDataset, ReIDDataset)> {
    if dataset.tracklets.iter().any(|t| t.person_id.is_none()) {
        return Err(Error::Config(
            "split_query_gallery requires every tracklet to be labeled".into(),
        ));
    }
    let SplitPolicy::QueryCamera { camera } = policy;
    if !dataset.tracklets.iter().any(|t| t.camera_id == camera) {
        return Err(Error::Config(format!(
            "split policy references camera {camera}, absent from dataset {}",
            dataset.name
        )));
    }

    let mut gallery: Vec<Tracklet> = dataset
        .tracklets
        .iter()
        .filter(|t| t.camera_id != camera)
        .cloned()
        .collect();
    gallery.sort_by(|a, b| a.tracklet_id.cmp(&b.tracklet_id));

    let mut query: Vec<Tracklet> = Vec::new();
    let mut candidates: Vec<Tracklet> = dataset
        .tracklets
        .iter()
        .filter(|t| t.camera_id == camera)
        .cloned()
        .collect();
    candidates.sort_by(|a, b| a.tracklet_id.cmp(&b.tracklet_id));
    for t in candidates {
        let id = t.person_id.unwrap();
        let has_match = gallery
            .iter()
            .any(|g| g.person_id == Some(id) && g.camera_id != t.camera_id);
        if has_match {
            query.push(t);
        } else {
            log::warn!(
                "dropping query tracklet {}: identity {id} has no cross-camera gallery entry",
                t.tracklet_id
            );
        }
    }

    let mk = |tracklets: Vec<Tracklet>, role: DatasetRole, suffix: &str| {
        let mut ids: Vec<u32> = tracklets.iter().filter_map(|t| t.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ReIDDataset {
            name: format!("{}_{suffix}", dataset.name),
            role,
            num_identities: Some(ids.len() as u32),
            tracklets,
        }
    };
    Ok((
        mk(query, DatasetRole::TestQuery, "query"),
        mk(gallery, DatasetRole::TestGallery, "gallery"),
    ))
}

/// Writes a manifest CSV. Used by the toy generator and tests.
pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    w.write_record(MANIFEST_HEADER).map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    for r in rows {
        let pid = r.person_id.map(|v| v.to_string()).unwrap_or_else(|| "-1".to_string());
        w.write_record([
            r.tracklet_id.as_str(),
            pid.as_str(),
            &r.camera_id.to_string(),
            r.domain.as_str(),
            r.frames_dir.as_str(),
        ])
        .map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ManifestRow {
    pub tracklet_id: String,
    pub person_id: Option<u32>,
    pub camera_id: u32,
    pub domain: DomainLabel,
    /// Relative to the dataset root.
    pub frames_dir: String,
}

/// Decodes the selected frames of a tracklet into a (T, 3, S, S) clip with
/// values in [0, 1].
///
/// Frames decode in parallel across up to `SYNREID_NUM_THREADS` threads
/// (default 1); each frame writes its own slot, so the result does not
/// depend on thread scheduling.
pub fn load_clip(tracklet: &Tracklet, indices: &[usize], image_size: usize) -> Result<Array4<f64>> {
    let paths: Vec<&PathBuf> = indices.iter().map(|&i| &tracklet.frames[i]).collect();
    let threads = data_threads().min(paths.len().max(1));
    let mut slots: Vec<Option<Result<Vec<f64>>>> = (0..paths.len()).map(|_| None).collect();
    if threads <= 1 {
        for (slot, path) in slots.iter_mut().zip(paths.iter()) {
            *slot = Some(decode_frame(path, image_size));
        }
    } else {
        let chunk = paths.len().div_ceil(threads);
        std::thread::scope(|scope| {
            for (slot_chunk, path_chunk) in slots.chunks_mut(chunk).zip(paths.chunks(chunk)) {
                scope.spawn(move || {
                    for (slot, path) in slot_chunk.iter_mut().zip(path_chunk.iter()) {
                        *slot = Some(decode_frame(path, image_size));
                    }
                });
            }
        });
    }
    let mut clip = Array4::<f64>::zeros((indices.len(), 3, image_size, image_size));
    for (ti, slot) in slots.into_iter().enumerate() {
        let pixels = slot.expect("frame slot filled")?;
        let mut frame = clip.index_axis_mut(ndarray::Axis(0), ti);
        for c in 0..3 {
            for i in 0..image_size {
                for j in 0..image_size {
                    frame[[c, i, j]] = pixels[(i * image_size + j) * 3 + c];
                }
            }
        }
    }
    Ok(clip)
}

fn decode_frame(path: &Path, image_size: usize) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    let rgb = img.to_rgb8();
    if rgb.width() as usize != image_size || rgb.height() as usize != image_size {
        return Err(Error::Shape(format!(
            "frame {} is {}x{}, config declares {image_size}x{image_size}",
            path.display(),
            rgb.width(),
            rgb.height()
        )));
    }
    Ok(rgb.pixels().flat_map(|p| p.0.iter().map(|&v| v as f64 / 255.0)).collect())
}

fn data_threads() -> usize {
    std::env::var("SYNREID_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}
