// Scratch calibration harness (deleted before release): measures wall time
// and the full-method vs source-only gap on the acceptance-scale toy corpus.

use std::path::Path;
use std::time::Instant;
use synreid::config::*;
use synreid::datamodel::SplitPolicy;
use synreid::eval::{DistanceKind, EvalProtocol};
use synreid::toygen::{generate_toy_dataset, ToyWorldSpec};
use synreid::train::{run_eval, run_train};

fn acceptance_spec() -> ToyWorldSpec {
    let mut spec = ToyWorldSpec { test_tracklets_per_camera: 2, ..Default::default() };
    spec.target_style.brightness = std::env::var("CALIB_BRIGHT").ok().and_then(|v| v.parse().ok()).unwrap_or(0.38);
    spec.target_style.channel_mix = std::env::var("CALIB_MIX").ok().and_then(|v| v.parse().ok()).unwrap_or(0.18);
    spec.target_style.noise = 0.03;
    spec.target_style.camera_tint = 0.05;
    spec
}

fn acceptance_config(data: &Path, out: &Path, seed: u64, steps: usize) -> ExperimentConfig {
    ExperimentConfig {
        seed,
        data: DataConfig {
            root: data.to_path_buf(),
            source_train: data.join("source_train.csv"),
            target_train: data.join("target_train.csv"),
            test: data.join("target_test.csv"),
        },
        backbone: BackboneSection::default(),
        sampler: SamplerConfig::default(),
        optimizer: OptimizerConfig { method: "adam".into(), learning_rate: 3e-4, steps },
        weights: LossWeights::default(),
        triplet: TripletSection::default(),
        grl: GrlConfig::default(),
        stitch: StitchConfig::default(),
        heads: HeadsConfig { dropout: 0.2, hidden: 32 },
        teacher: TeacherConfig { alpha: 0.99, warmup_steps: None },
        cluster: ClusterConfig::default(),
        consistency: ConsistencyConfig { temperature: 0.01 },
        eval: EvalProtocol {
            distance: DistanceKind::Euclidean,
            cross_camera_filter: true,
            ranks: vec![1, 5, 10],
            split: SplitPolicy::QueryCamera { camera: 0 },
            max_frames: 8,
        },
        output_dir: out.to_path_buf(),
    }
}

#[test]
fn calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let t0 = Instant::now();
    generate_toy_dataset(&acceptance_spec(), 1234, &data, false).unwrap();
    println!("toygen: {:.1}s", t0.elapsed().as_secs_f64());

    let steps = std::env::var("CALIB_STEPS").ok().and_then(|s| s.parse().ok()).unwrap_or(200usize);
    let seeds: Vec<u64> = std::env::var("CALIB_SEEDS").map(|v| v.split(',').map(|x| x.parse().unwrap()).collect()).unwrap_or_else(|_| vec![101, 202, 303]);
    let mut gaps = Vec::new();
    let mut probe_gaps = Vec::new();
    for &seed in &seeds {
        // full method (or ablation via CALIB_WS / CALIB_WC)
        let out_full = dir.path().join(format!("full_{seed}"));
        let mut cfg_full = acceptance_config(&data, &out_full, seed, steps);
        if let Some(ws) = std::env::var("CALIB_WS").ok().and_then(|v| v.parse().ok()) { cfg_full.weights.w_s = ws; }
        if let Some(wc) = std::env::var("CALIB_WC").ok().and_then(|v| v.parse().ok()) { cfg_full.weights.w_c = wc; }
        if let Ok(l) = std::env::var("CALIB_LAMBDA") { cfg_full.grl.lambda_schedule = "constant".into(); cfg_full.grl.lambda_const = l.parse().unwrap(); }
        let t = Instant::now();
        let (_, rep_full) = run_train(&cfg_full).unwrap();
        let train_time = t.elapsed().as_secs_f64();
        let m_full = run_eval(&cfg_full, &out_full.join("checkpoint.bin"), false).unwrap();

        // source-only baseline
        let out_base = dir.path().join(format!("base_{seed}"));
        let mut cfg_base = acceptance_config(&data, &out_base, seed, steps);
        cfg_base.weights.w_s = 0.0;
        cfg_base.weights.w_c = 0.0;
        cfg_base.output_dir = out_base.clone();
        let t = Instant::now();
        let (_, rep_base) = run_train(&cfg_base).unwrap();
        let base_time = t.elapsed().as_secs_f64();
        let m_base = run_eval(&cfg_base, &out_base.join("checkpoint.bin"), false).unwrap();

        let first = rep_base.steps.first().unwrap();
        let last = rep_base.steps.last().unwrap();
        println!(
            "  base loss: cse {:.3}->{:.3} tri {:.3}->{:.3}",
            first.l_cse, last.l_cse, first.l_tri, last.l_tri
        );
        let ff = rep_full.steps.first().unwrap();
        let fl = rep_full.steps.last().unwrap();
        println!(
            "  full loss: cse {:.3}->{:.3} tri {:.3}->{:.3} s {:.3}->{:.3} c {:.3}->{:.3} head_acc {:.2}->{:.2}",
            ff.l_cse, fl.l_cse, ff.l_tri, fl.l_tri,
            ff.l_s1 + ff.l_s2 + ff.l_s3, fl.l_s1 + fl.l_s2 + fl.l_s3,
            ff.l_c1_soft + ff.l_c2, fl.l_c1_soft + fl.l_c2,
            ff.domain_head_acc.unwrap_or(-1.0), fl.domain_head_acc.unwrap_or(-1.0)
        );
        // in-domain sanity: source-set leave-one-out nearest-neighbor rank-1
        for (tag, ckpt_dir) in [("base", &out_base), ("full", &out_full)] {
            let ck = synreid::checkpoint::load(&ckpt_dir.join("checkpoint.bin")).unwrap();
            let bb = synreid::backbone::BackboneParams { config: ck.backbone_config.clone(), leaves: ck.student };
            let src = synreid::datamodel::load_dataset(&data, &data.join("source_train.csv"), synreid::datamodel::DatasetRole::SourceTrain).unwrap();
            let feats = synreid::eval::extract_video_features(&bb, &src, 8).unwrap();
            let mut hits = 0;
            for i in 0..feats.len() {
                let mut best = (f64::INFINITY, 0usize);
                for j in 0..feats.len() {
                    if i == j { continue; }
                    let d: f64 = feats[i].0.iter().zip(feats[j].0.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 { best = (d, j); }
                }
                if src.tracklets[best.1].person_id == src.tracklets[i].person_id { hits += 1; }
            }
            let tgt = synreid::datamodel::load_dataset(&data, &data.join("target_train.csv"), synreid::datamodel::DatasetRole::TargetTrain).unwrap();
            let tfeats = synreid::eval::extract_video_features(&bb, &tgt, 8).unwrap();
            let centroid = |fs: &[synreid::backbone::VideoFeature]| {
                let d = fs[0].0.len();
                let mut c = ndarray::Array1::<f64>::zeros(d);
                for f in fs { c += &f.0; }
                c / fs.len() as f64
            };
            let spread = |fs: &[synreid::backbone::VideoFeature], c: &ndarray::Array1<f64>| {
                fs.iter().map(|f| (&f.0 - c).mapv(|v| v * v).sum().sqrt()).sum::<f64>() / fs.len() as f64
            };
            let cs = centroid(&feats);
            let ct = centroid(&tfeats);
            let gap = (&cs - &ct).mapv(|v| v * v).sum().sqrt();
            println!(
                "  {tag} source LOO rank1: {:.3} | domain gap {:.4} vs spreads {:.4}/{:.4}",
                hits as f64 / feats.len() as f64, gap, spread(&feats, &cs), spread(&tfeats, &ct)
            );
        }
        let r1_full = m_full.rank(1).unwrap();
        let r1_base = m_base.rank(1).unwrap();
        let p_full = rep_full.probe_accuracy.unwrap();
        let p_base = rep_base.probe_accuracy.unwrap();
        println!(
            "seed {seed}: rank1 full {r1_full:.3} (map {:.3}) vs base {r1_base:.3} (map {:.3}) | probe full {p_full:.3} vs base {p_base:.3} | {train_time:.0}s/{base_time:.0}s",
            m_full.map, m_base.map
        );
        gaps.push(r1_full - r1_base);
        probe_gaps.push((p_base - 0.5).abs() - (p_full - 0.5).abs());
    }
    let avg_gap: f64 = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let avg_probe: f64 = probe_gaps.iter().sum::<f64>() / probe_gaps.len() as f64;
    println!("avg rank1 gap {avg_gap:+.3}  avg probe-closeness gap {avg_probe:+.3}");
    println!("total wall {:.0}s", t0.elapsed().as_secs_f64());
}
