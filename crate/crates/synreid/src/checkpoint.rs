//! Single-file binary checkpoint container.
//!
//! f64 values are stored as raw little-endian bit patterns, so a save/load
//! round trip is bitwise exact — required for the resume-reproducibility
//! contract.

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayD, IxDyn};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"SYNREIDC";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct ClusterSnapshot {
    pub centroids: Array2<f64>,
    pub student_assign: Vec<usize>,
    pub teacher_assign: Vec<usize>,
}

/// Everything needed to resume training bitwise or to evaluate.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: String,
    pub backbone_config: BackboneConfig,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub teacher_step: u64,
    pub frame_head: ParamSet,
    pub video_head: ParamSet,
    pub regressor: ParamSet,
    /// Learnable loss-weight scalars; empty in fixed-weight mode.
    pub aux: ParamSet,
    pub adam_t: u64,
    pub adam_m: Vec<ArrayD<f64>>,
    pub adam_v: Vec<ArrayD<f64>>,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub cluster: Option<ClusterSnapshot>,
}

fn w_string<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn r_string<R: Read>(r: &mut R) -> std::io::Result<String> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

fn w_array<W: Write>(w: &mut W, a: &ArrayD<f64>) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(a.ndim() as u32)?;
    for &d in a.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in a.iter() {
        w.write_u64::<LittleEndian>(v.to_bits())?;
    }
    Ok(())
}

fn r_array<R: Read>(r: &mut R) -> std::io::Result<ArrayD<f64>> {
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let len: usize = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(f64::from_bits(r.read_u64::<LittleEndian>()?));
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&shape), data).expect("checkpoint array shape"))
}

fn w_paramset<W: Write>(w: &mut W, set: &ParamSet) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(set.len() as u64)?;
    for (name, arr) in set.iter() {
        w_string(w, name)?;
        w_array(w, arr)?;
    }
    Ok(())
}

fn r_paramset<R: Read>(r: &mut R) -> std::io::Result<ParamSet> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut set = ParamSet::new();
    for _ in 0..n {
        let name = r_string(r)?;
        let arr = r_array(r)?;
        set.insert(name, arr);
    }
    Ok(set)
}

fn w_arrays<W: Write>(w: &mut W, arrays: &[ArrayD<f64>]) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(arrays.len() as u64)?;
    for a in arrays {
        w_array(w, a)?;
    }
    Ok(())
}

fn r_arrays<R: Read>(r: &mut R) -> std::io::Result<Vec<ArrayD<f64>>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    (0..n).map(|_| r_array(r)).collect()
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(ckpt.step).map_err(io)?;
    w_string(&mut w, &ckpt.config_hash).map_err(io)?;
    let cfg_json = serde_json::to_string(&ckpt.backbone_config).expect("config serializes");
    w_string(&mut w, &cfg_json).map_err(io)?;
    w_paramset(&mut w, &ckpt.student).map_err(io)?;
    w_paramset(&mut w, &ckpt.teacher).map_err(io)?;
    w.write_u64::<LittleEndian>(ckpt.teacher_step).map_err(io)?;
    w_paramset(&mut w, &ckpt.frame_head).map_err(io)?;
    w_paramset(&mut w, &ckpt.video_head).map_err(io)?;
    w_paramset(&mut w, &ckpt.regressor).map_err(io)?;
    w_paramset(&mut w, &ckpt.aux).map_err(io)?;
    w.write_u64::<LittleEndian>(ckpt.adam_t).map_err(io)?;
    w_arrays(&mut w, &ckpt.adam_m).map_err(io)?;
    w_arrays(&mut w, &ckpt.adam_v).map_err(io)?;
    w.write_all(&ckpt.rng_seed).map_err(io)?;
    w.write_u128::<LittleEndian>(ckpt.rng_word_pos).map_err(io)?;
    match &ckpt.cluster {
        None => w.write_u8(0).map_err(io)?,
        Some(c) => {
            w.write_u8(1).map_err(io)?;
            w_array(&mut w, &c.centroids.clone().into_dyn()).map_err(io)?;
            w.write_u64::<LittleEndian>(c.student_assign.len() as u64).map_err(io)?;
            for &a in &c.student_assign {
                w.write_u64::<LittleEndian>(a as u64).map_err(io)?;
            }
            w.write_u64::<LittleEndian>(c.teacher_assign.len() as u64).map_err(io)?;
            for &a in &c.teacher_assign {
                w.write_u64::<LittleEndian>(a as u64).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(Error::State(format!("{} is not a synreid checkpoint", path.display())));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(Error::State(format!("unsupported checkpoint version {version}")));
    }
    let step = r.read_u64::<LittleEndian>().map_err(io)?;
    let config_hash = r_string(&mut r).map_err(io)?;
    let cfg_json = r_string(&mut r).map_err(io)?;
    let backbone_config: BackboneConfig =
        serde_json::from_str(&cfg_json).map_err(|e| Error::State(format!("bad checkpoint config: {e}")))?;
    let student = r_paramset(&mut r).map_err(io)?;
    let teacher = r_paramset(&mut r).map_err(io)?;
    let teacher_step = r.read_u64::<LittleEndian>().map_err(io)?;
    let frame_head = r_paramset(&mut r).map_err(io)?;
    let video_head = r_paramset(&mut r).map_err(io)?;
    let regressor = r_paramset(&mut r).map_err(io)?;
    let aux = r_paramset(&mut r).map_err(io)?;
    let adam_t = r.read_u64::<LittleEndian>().map_err(io)?;
    let adam_m = r_arrays(&mut r).map_err(io)?;
    let adam_v = r_arrays(&mut r).map_err(io)?;
    let mut rng_seed = [0u8; 32];
    r.read_exact(&mut rng_seed).map_err(io)?;
    let rng_word_pos = r.read_u128::<LittleEndian>().map_err(io)?;
    let cluster = match r.read_u8().map_err(io)? {
        0 => None,
        _ => {
            let centroids = r_array(&mut r)
                .map_err(io)?
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::State(format!("bad centroid shape: {e}")))?;
            let ns = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let mut student_assign = Vec::with_capacity(ns);
            for _ in 0..ns {
                student_assign.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
            }
            let nt = r.read_u64::<LittleEndian>().map_err(io)? as usize;
            let mut teacher_assign = Vec::with_capacity(nt);
            for _ in 0..nt {
                teacher_assign.push(r.read_u64::<LittleEndian>().map_err(io)? as usize);
            }
            Some(ClusterSnapshot { centroids, student_assign, teacher_assign })
        }
    };
    Ok(Checkpoint {
        step,
        config_hash,
        backbone_config,
        student,
        teacher,
        teacher_step,
        frame_head,
        video_head,
        regressor,
        aux,
        adam_t,
        adam_m,
        adam_v,
        rng_seed,
        rng_word_pos,
        cluster,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::reference_backbone;

    #[test]
    fn save_load_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let cfg = BackboneConfig { num_classes: 5, ..Default::default() };
        let bb = reference_backbone(&cfg).unwrap();
        let mut aux = ParamSet::new();
        aux.insert("w.s_cse", ArrayD::from_elem(IxDyn(&[]), -0.137));
        let ckpt = Checkpoint {
            step: 42,
            config_hash: "abc123".into(),
            backbone_config: cfg,
            student: bb.leaves.clone(),
            teacher: bb.leaves.clone(),
            teacher_step: 17,
            frame_head: bb.leaves.clone(),
            video_head: bb.leaves.clone(),
            regressor: bb.leaves.clone(),
            aux,
            adam_t: 9,
            adam_m: vec![ArrayD::from_elem(IxDyn(&[2, 3]), 0.1)],
            adam_v: vec![ArrayD::from_elem(IxDyn(&[2, 3]), 1e-17)],
            rng_seed: [7u8; 32],
            rng_word_pos: 123_456_789_012,
            cluster: Some(ClusterSnapshot {
                centroids: ndarray::arr2(&[[0.1, 0.2], [0.3, f64::MIN_POSITIVE]]),
                student_assign: vec![0, 1, 1],
                teacher_assign: vec![1, 0, 0],
            }),
        };
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.config_hash, "abc123");
        assert_eq!(loaded.student.content_hash(), ckpt.student.content_hash());
        assert_eq!(loaded.aux.content_hash(), ckpt.aux.content_hash());
        assert_eq!(loaded.adam_t, 9);
        assert_eq!(loaded.adam_m[0], ckpt.adam_m[0]);
        assert_eq!(loaded.adam_v[0], ckpt.adam_v[0]);
        assert_eq!(loaded.rng_seed, ckpt.rng_seed);
        assert_eq!(loaded.rng_word_pos, ckpt.rng_word_pos);
        let c = loaded.cluster.unwrap();
        assert_eq!(c.centroids, ckpt.cluster.as_ref().unwrap().centroids);
        assert_eq!(c.student_assign, vec![0, 1, 1]);
    }

    #[test]
    fn rejects_non_checkpoint_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(load(&path), Err(Error::State(_))));
    }
}
