//! Procedural two-domain toy corpus generator.
//!
//! Each identity is a moving sprite whose shape, color, size, vertical band,
//! and speed are drawn once and shared across both domains; the domains
//! differ only in rendering style (background texture, palette transform,
//! lighting, noise). Cameras differ by viewpoint (camera 1 mirrors the scene)
//! plus a per-camera tint in the target domain, so cross-camera retrieval
//! requires style-invariant features.

use crate::datamodel::{write_manifest, DomainLabel, ManifestRow};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityGenSpec {
    pub shapes: Vec<String>,
    pub size_range: [f64; 2],
    pub speed_range: [f64; 2],
}

impl Default for IdentityGenSpec {
    fn default() -> Self {
        IdentityGenSpec {
            shapes: vec!["circle".into(), "square".into(), "triangle".into(), "diamond".into()],
            size_range: [4.5, 7.5],
            speed_range: [0.8, 2.6],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainStyle {
    /// "gradient", "stripes", or "checker".
    pub background: String,
    pub brightness: f64,
    pub noise: f64,
    pub tint: [f64; 3],
    /// Cyclic channel-mix strength in [0, 1]; 0 keeps the palette.
    pub channel_mix: f64,
    /// Extra tint applied on camera 1 only.
    pub camera_tint: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyWorldSpec {
    pub num_identities: usize,
    pub tracklets_per_identity: usize,
    pub frames_per_tracklet: usize,
    pub image_size: usize,
    /// Test tracklets per identity per camera.
    pub test_tracklets_per_camera: usize,
    pub cameras: u32,
    #[serde(default)]
    pub identity: IdentityGenSpec,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
}

impl Default for ToyWorldSpec {
    fn default() -> Self {
        ToyWorldSpec {
            num_identities: 10,
            tracklets_per_identity: 4,
            frames_per_tracklet: 8,
            image_size: 32,
            test_tracklets_per_camera: 1,
            cameras: 2,
            identity: IdentityGenSpec::default(),
            source_style: DomainStyle {
                background: "gradient".into(),
                brightness: 0.16,
                noise: 0.015,
                tint: [0.0, 0.0, 0.0],
                channel_mix: 0.0,
                camera_tint: 0.0,
            },
            target_style: DomainStyle {
                background: "stripes".into(),
                brightness: 0.62,
                noise: 0.05,
                tint: [0.06, 0.02, -0.04],
                channel_mix: 0.35,
                camera_tint: 0.08,
            },
        }
    }
}

impl ToyWorldSpec {
    pub fn load(path: &Path) -> Result<ToyWorldSpec> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ToyWorldSpec =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.tracklets_per_identity == 0 || self.frames_per_tracklet == 0 {
            return Err(Error::Config("toy spec counts must all be >= 1".into()));
        }
        if self.cameras < 2 {
            return Err(Error::Config("toy spec needs >= 2 cameras".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("toy image_size must be >= 16".into()));
        }
        if self.identity.shapes.is_empty() {
            return Err(Error::Config("toy spec needs at least one sprite shape".into()));
        }
        for style in [&self.source_style, &self.target_style] {
            match style.background.as_str() {
                "gradient" | "stripes" | "checker" => {}
                other => return Err(Error::Config(format!("unknown background texture {other:?}"))),
            }
        }
        Ok(())
    }
}

/// Domain-invariant appearance parameters of one identity. Serialized to the
/// sidecar so the invariance contract is checkable.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IdentityParams {
    pub id: u32,
    pub shape: String,
    pub color: [f64; 3],
    pub size: f64,
    pub speed: f64,
    pub y_frac: f64,
}

#[derive(Clone, Debug)]
pub struct ToySummary {
    pub out_dir: PathBuf,
    pub source_rows: usize,
    pub target_rows: usize,
    pub test_rows: usize,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn draw_identities(spec: &ToyWorldSpec, rng: &mut ChaCha8Rng) -> Vec<IdentityParams> {
    let n = spec.num_identities;
    (0..n)
        .map(|i| {
            let hue = 360.0 * i as f64 / n as f64 + rng.random_range(-8.0..8.0);
            let color = hsv_to_rgb(hue.rem_euclid(360.0), 0.85, 0.95);
            IdentityParams {
                id: i as u32 + 1,
                shape: spec.identity.shapes[i % spec.identity.shapes.len()].clone(),
                color,
                size: rng.random_range(spec.identity.size_range[0]..spec.identity.size_range[1]),
                speed: rng.random_range(spec.identity.speed_range[0]..spec.identity.speed_range[1]),
                y_frac: rng.random_range(0.30..0.70),
            }
        })
        .collect()
}

struct TrackletPlan {
    tracklet_id: String,
    identity: usize,
    camera: u32,
    domain: DomainLabel,
    labeled: bool,
    x0: f64,
    bg_phase: f64,
    light: f64,
    noise_seed: u64,
}

fn sprite_mask(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= r * 0.88 && dy.abs() <= r * 0.88,
        "triangle" => dy <= r * 0.9 && dy >= -r * 0.9 && dx.abs() <= (dy + r * 0.9) * 0.55,
        "diamond" => dx.abs() + dy.abs() <= r * 1.15,
        _ => dx * dx + dy * dy <= r * r,
    }
}

fn background_value(texture: &str, brightness: f64, i: usize, j: usize, phase: f64, s: usize) -> [f64; 3] {
    let fi = i as f64;
    let fj = j as f64;
    match texture {
        "gradient" => {
            let g = brightness * (0.6 + 0.8 * fi / s as f64);
            [g * 0.8, g * 0.9, g * 1.2]
        }
        "stripes" => {
            let w = ((fi + fj + phase) * std::f64::consts::PI / 5.0).sin();
            let g = brightness * (0.75 + 0.45 * w);
            [g * 1.1, g, g * 0.85]
        }
        "checker" => {
            let block = ((i / 4) + (j / 4)) % 2 == 0;
            let g = brightness * if block { 1.15 } else { 0.7 };
            [g, g, g]
        }
        _ => [brightness, brightness, brightness],
    }
}

#[allow(clippy::too_many_arguments)]
fn render_frame(
    spec: &ToyWorldSpec,
    ident: &IdentityParams,
    style: &DomainStyle,
    camera: u32,
    x0: f64,
    bg_phase: f64,
    light: f64,
    t: usize,
    noise_rng: &mut ChaCha8Rng,
) -> image::RgbImage {
    let s = spec.image_size;
    let sf = s as f64;
    let cx = (x0 + ident.speed * 2.0 * t as f64).rem_euclid(sf);
    let cy = ident.y_frac * sf + 1.5 * (0.7 * t as f64 + bg_phase).sin();
    let mut img = image::RgbImage::new(s as u32, s as u32);
    for i in 0..s {
        for j in 0..s {
            // camera 1 mirrors the scene horizontally
            let scene_j = if camera % 2 == 1 { s - 1 - j } else { j };
            let bg = background_value(&style.background, style.brightness, i, scene_j, bg_phase, s);
            // wrap-aware horizontal distance to the sprite center
            let mut dx = scene_j as f64 - cx;
            if dx > sf / 2.0 {
                dx -= sf;
            } else if dx < -sf / 2.0 {
                dx += sf;
            }
            let dy = i as f64 - cy;
            let mut rgb = if sprite_mask(&ident.shape, dx, dy, ident.size) {
                ident.color
            } else {
                bg
            };
            // domain style: lighting, cyclic channel mix, tint, camera tint
            for v in rgb.iter_mut() {
                *v *= light;
            }
            let g = style.channel_mix;
            rgb = [
                (1.0 - g) * rgb[0] + g * rgb[1],
                (1.0 - g) * rgb[1] + g * rgb[2],
                (1.0 - g) * rgb[2] + g * rgb[0],
            ];
            for (c, v) in rgb.iter_mut().enumerate() {
                *v += style.tint[c];
            }
            if camera % 2 == 1 {
                rgb[0] += style.camera_tint;
                rgb[1] -= 0.5 * style.camera_tint;
                rgb[2] += 0.5 * style.camera_tint;
            }
            // Box-Muller gaussian pixel noise
            if style.noise > 0.0 {
                let u1: f64 = noise_rng.random_range(1e-12..1.0);
                let u2: f64 = noise_rng.random_range(0.0..1.0);
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                let n = style.noise * z;
                for v in rgb.iter_mut() {
                    *v += n;
                }
            }
            let px = image::Rgb([
                (rgb[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                (rgb[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                (rgb[2].clamp(0.0, 1.0) * 255.0).round() as u8,
            ]);
            img.put_pixel(j as u32, i as u32, px);
        }
    }
    img
}

/// Renders the corpus: source-train (labeled), target-train (labels
/// withheld), and a combined labeled target-test manifest with both cameras,
/// plus the identity-parameter sidecar.
pub fn generate_toy_dataset(spec: &ToyWorldSpec, seed: u64, out: &Path, force: bool) -> Result<ToySummary> {
    spec.validate()?;
    if out.exists() {
        let non_empty = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty; pass force to overwrite",
                out.display()
            )));
        }
        if non_empty {
            std::fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identities = draw_identities(spec, &mut rng);
    std::fs::write(
        out.join("identity_params.json"),
        serde_json::to_string_pretty(&identities).expect("identity params serialize"),
    )
    .map_err(|e| Error::io(out.join("identity_params.json"), e))?;

    let mut plans: Vec<TrackletPlan> = Vec::new();
    let plan = |prefix: &str,
                    identity: usize,
                    k: usize,
                    camera: u32,
                    domain: DomainLabel,
                    labeled: bool,
                    rng: &mut ChaCha8Rng| {
        TrackletPlan {
            tracklet_id: format!("{prefix}_{:02}_{k:02}_c{camera}", identity + 1),
            identity,
            camera,
            domain,
            labeled,
            x0: rng.random_range(0.0..spec.image_size as f64),
            bg_phase: rng.random_range(0.0..10.0),
            light: rng.random_range(0.92..1.08),
            noise_seed: rng.random(),
        }
    };

    for id in 0..spec.num_identities {
        for k in 0..spec.tracklets_per_identity {
            let cam = (k as u32) % spec.cameras;
            plans.push(plan("src", id, k, cam, DomainLabel::Source, true, &mut rng));
        }
    }
    let source_end = plans.len();
    for id in 0..spec.num_identities {
        for k in 0..spec.tracklets_per_identity {
            let cam = (k as u32) % spec.cameras;
            plans.push(plan("tgt", id, k, cam, DomainLabel::Target, false, &mut rng));
        }
    }
    let target_end = plans.len();
    for id in 0..spec.num_identities {
        for cam in 0..spec.cameras {
            for k in 0..spec.test_tracklets_per_camera {
                plans.push(plan("tst", id, k, cam, DomainLabel::Target, true, &mut rng));
            }
        }
    }

    let frames_root = out.join("frames");
    std::fs::create_dir_all(&frames_root).map_err(|e| Error::io(&frames_root, e))?;
    let mut rows: Vec<ManifestRow> = Vec::with_capacity(plans.len());
    for p in &plans {
        let ident = &identities[p.identity];
        let style = match p.domain {
            DomainLabel::Source => &spec.source_style,
            DomainLabel::Target => &spec.target_style,
        };
        let dir = frames_root.join(&p.tracklet_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(p.noise_seed);
        for t in 0..spec.frames_per_tracklet {
            let img = render_frame(spec, ident, style, p.camera, p.x0, p.bg_phase, p.light, t, &mut noise_rng);
            let path = dir.join(format!("f{t:03}.png"));
            img.save(&path).map_err(|e| {
                Error::io(&path, std::io::Error::other(e.to_string()))
            })?;
        }
        rows.push(ManifestRow {
            tracklet_id: p.tracklet_id.clone(),
            person_id: p.labeled.then_some(ident.id),
            camera_id: p.camera,
            domain: p.domain,
            frames_dir: format!("frames/{}", p.tracklet_id),
        });
    }

    write_manifest(&out.join("source_train.csv"), &rows[..source_end])?;
    write_manifest(&out.join("target_train.csv"), &rows[source_end..target_end])?;
    write_manifest(&out.join("target_test.csv"), &rows[target_end..])?;
    Ok(ToySummary {
        out_dir: out.to_path_buf(),
        source_rows: source_end,
        target_rows: target_end - source_end,
        test_rows: rows.len() - target_end,
    })
}
