//! Procedural multi-style image corpus: a controllable "style" (palette,
//! background texture, stroke, boundary distortion) crossed with a
//! "subject" (shape class), rendered deterministically at 32x32.

use crate::conditioning::SUBJECTS;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

pub const IMAGE_SIZE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    Solid,
    /// Horizontal stripes of the given pixel period.
    Stripes { period: usize },
    /// Per-pixel grain of the given amplitude added to the base color.
    Noise { amplitude: f64 },
}

/// Everything that defines a rendering style. The silhouette of a rendered
/// image depends only on (subject, distortion, render seed); all coloring
/// comes from the palette/background/stroke fields. For `Noise` backgrounds
/// the grain realization is drawn per render, but its distribution is fixed
/// by the style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleSpec {
    pub id: String,
    /// [background, fill, stroke] RGB anchors, each channel in [-1, 1].
    pub palette: [[f64; 3]; 3],
    pub background: Background,
    /// Outline half-width in pixels, in [0.5, 4].
    pub stroke_width: f64,
    /// Boundary warp amplitude in [0, 0.35] (normalized units).
    pub distortion: f64,
    pub seed: u64,
}

impl StyleSpec {
    pub fn validate(&self) -> Result<()> {
        for anchor in &self.palette {
            for &c in anchor {
                if !(-1.0..=1.0).contains(&c) {
                    return Err(Error::Parameter(format!(
                        "style {}: palette channel {c} outside [-1, 1]",
                        self.id
                    )));
                }
            }
        }
        if !(0.5..=4.0).contains(&self.stroke_width) {
            return Err(Error::Parameter(format!(
                "style {}: stroke width {} outside [0.5, 4]",
                self.id, self.stroke_width
            )));
        }
        if !(0.0..=0.35).contains(&self.distortion) {
            return Err(Error::Parameter(format!(
                "style {}: distortion {} outside [0, 0.35]",
                self.id, self.distortion
            )));
        }
        if let Background::Stripes { period } = self.background {
            if !(2..=16).contains(&period) {
                return Err(Error::Parameter(format!(
                    "style {}: stripe period {period} outside [2, 16]",
                    self.id
                )));
            }
        }
        if let Background::Noise { amplitude } = self.background {
            if !(0.0..=0.5).contains(&amplitude) {
                return Err(Error::Parameter(format!(
                    "style {}: noise amplitude {amplitude} outside [0, 0.5]",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Signed distance to the canonical (undistorted, centered) subject shape,
/// in normalized coordinates where the image spans [-1, 1].
pub fn shape_sdf(subject: &str, x: f64, y: f64) -> Result<f64> {
    let d = match subject {
        "circle" => (x * x + y * y).sqrt() - 0.58,
        "square" => x.abs().max(y.abs()) - 0.5,
        "triangle" => {
            // upward equilateral triangle
            let k = 3f64.sqrt();
            let (px, py) = (x.abs(), -y + 0.35);
            (px * k * 0.5 + py * 0.5).max(py - 0.85).max(-py - 0.05)
        }
        "cross" => {
            let bar_h = (x.abs() - 0.6).max(y.abs() - 0.2);
            let bar_v = (x.abs() - 0.2).max(y.abs() - 0.6);
            bar_h.min(bar_v)
        }
        "ring" => ((x * x + y * y).sqrt() - 0.45).abs() - 0.17,
        "diamond" => (x.abs() + y.abs()) * 0.7071 - 0.45,
        _ => {
            return Err(Error::Vocabulary {
                token: subject.to_string(),
                known: SUBJECTS.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    Ok(d)
}

fn mix_seed(seed: u64, salt: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(salt.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Per-render geometric parameters: small center/scale jitter plus the
/// boundary-warp phases. Depends only on (subject, seed).
struct Geometry {
    cx: f64,
    cy: f64,
    scale: f64,
    phase1: f64,
    phase2: f64,
}

impl Geometry {
    fn new(subject: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, subject));
        Geometry {
            cx: rng.gen_range(-0.08..0.08),
            cy: rng.gen_range(-0.08..0.08),
            scale: rng.gen_range(0.85..1.1),
            phase1: rng.gen_range(0.0..std::f64::consts::TAU),
            phase2: rng.gen_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Warped signed distance at pixel-space normalized coordinates.
    fn sdf(&self, subject: &str, distortion: f64, x: f64, y: f64) -> Result<f64> {
        let (px, py) = ((x - self.cx) / self.scale, (y - self.cy) / self.scale);
        let base = shape_sdf(subject, px, py)?;
        let theta = py.atan2(px);
        let warp = distortion
            * 0.5
            * ((3.0 * theta + self.phase1).sin() + (5.0 * theta + self.phase2).sin());
        Ok(base + warp)
    }
}

fn pixel_coord(i: usize) -> f64 {
    (i as f64 + 0.5) / IMAGE_SIZE as f64 * 2.0 - 1.0
}

/// The ground-truth silhouette: true where the (warped) subject covers the
/// pixel. Independent of every coloring field of the style.
pub fn render_mask(subject: &str, distortion: f64, seed: u64) -> Result<Vec<bool>> {
    let geom = Geometry::new(subject, seed);
    let mut mask = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for yi in 0..IMAGE_SIZE {
        for xi in 0..IMAGE_SIZE {
            let d = geom.sdf(subject, distortion, pixel_coord(xi), pixel_coord(yi))?;
            mask.push(d < 0.0);
        }
    }
    Ok(mask)
}

/// Deterministic 32x32 RGB render in [-1, 1], CHW layout.
pub fn render_sample<S: Scalar>(style: &StyleSpec, subject: &str, seed: u64) -> Result<Tensor<S>> {
    style.validate()?;
    let geom = Geometry::new(subject, seed);
    let stroke = style.stroke_width / IMAGE_SIZE as f64 * 2.0;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(mix_seed(style.seed ^ seed, "grain"));
    let mut data = vec![S::zero(); 3 * IMAGE_SIZE * IMAGE_SIZE];
    for yi in 0..IMAGE_SIZE {
        for xi in 0..IMAGE_SIZE {
            let d = geom.sdf(subject, style.distortion, pixel_coord(xi), pixel_coord(yi))?;
            let mut color = if d < -stroke {
                style.palette[1]
            } else if d < stroke {
                style.palette[2]
            } else {
                let mut bg = style.palette[0];
                match style.background {
                    Background::Solid => {}
                    Background::Stripes { period } => {
                        if (yi / period) % 2 == 1 {
                            for (b, s) in bg.iter_mut().zip(style.palette[2]) {
                                *b = (*b + s) * 0.5;
                            }
                        }
                    }
                    Background::Noise { .. } => {}
                }
                bg
            };
            if let Background::Noise { amplitude } = style.background {
                // grain covers the whole canvas; draw per pixel so the
                // stream is position-stable
                let g: f64 = noise_rng.gen_range(-1.0..1.0) * amplitude;
                if d >= stroke {
                    for c in color.iter_mut() {
                        *c = (*c + g).clamp(-1.0, 1.0);
                    }
                }
            }
            for (ch, &v) in color.iter().enumerate() {
                data[ch * IMAGE_SIZE * IMAGE_SIZE + yi * IMAGE_SIZE + xi] = S::from_f64(v);
            }
        }
    }
    Tensor::new(&[3, IMAGE_SIZE, IMAGE_SIZE], data)
}

/// Eight visually distinct pretraining styles.
pub fn default_pretrain_styles() -> Vec<StyleSpec> {
    let p = |id: &str,
             palette: [[f64; 3]; 3],
             background: Background,
             stroke_width: f64,
             distortion: f64,
             seed: u64| StyleSpec {
        id: id.to_string(),
        palette,
        background,
        stroke_width,
        distortion,
        seed,
    };
    vec![
        p(
            "crimson-flat",
            [[0.9, 0.85, 0.8], [0.8, -0.7, -0.7], [-0.9, -0.9, -0.9]],
            Background::Solid,
            1.0,
            0.0,
            11,
        ),
        p(
            "ocean-stripe",
            [[-0.2, 0.1, 0.7], [0.9, 0.9, 0.3], [-0.8, -0.4, 0.9]],
            Background::Stripes { period: 4 },
            1.5,
            0.05,
            12,
        ),
        p(
            "forest-grain",
            [[-0.6, 0.3, -0.5], [0.9, 0.6, -0.2], [-0.9, -0.2, -0.9]],
            Background::Noise { amplitude: 0.25 },
            1.0,
            0.0,
            13,
        ),
        p(
            "mono-ink",
            [[0.95, 0.95, 0.95], [-0.85, -0.85, -0.85], [-0.95, -0.95, -0.95]],
            Background::Solid,
            2.5,
            0.1,
            14,
        ),
        p(
            "violet-stripe",
            [[0.4, -0.4, 0.8], [-0.9, 0.8, 0.2], [0.9, 0.9, 0.9]],
            Background::Stripes { period: 8 },
            1.0,
            0.0,
            15,
        ),
        p(
            "ember-grain",
            [[-0.9, -0.8, -0.7], [0.95, 0.4, -0.6], [0.9, 0.8, -0.2]],
            Background::Noise { amplitude: 0.35 },
            1.5,
            0.15,
            16,
        ),
        p(
            "teal-flat",
            [[-0.3, 0.8, 0.7], [0.9, -0.2, 0.5], [-0.9, -0.9, 0.4]],
            Background::Solid,
            1.0,
            0.2,
            17,
        ),
        p(
            "slate-stripe",
            [[-0.1, -0.1, -0.2], [0.7, 0.7, 0.8], [0.2, 0.9, -0.7]],
            Background::Stripes { period: 2 },
            1.0,
            0.0,
            18,
        ),
    ]
}

/// Two held-out styles for few-shot evaluation, both with nonzero
/// distortion so zero-shot transfer has something to miss.
pub fn default_heldout_styles() -> Vec<StyleSpec> {
    vec![
        StyleSpec {
            id: "held-amber-grain".to_string(),
            palette: [[0.9, 0.6, -0.3], [-0.8, -0.9, 0.1], [0.95, 0.95, 0.9]],
            background: Background::Noise { amplitude: 0.3 },
            stroke_width: 2.0,
            distortion: 0.25,
            seed: 21,
        },
        StyleSpec {
            id: "held-mint-stripe".to_string(),
            palette: [[-0.7, 0.9, 0.2], [0.9, -0.6, 0.8], [-0.95, -0.95, -0.95]],
            background: Background::Stripes { period: 3 },
            stroke_width: 0.5,
            distortion: 0.3,
            seed: 22,
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    HeldoutStyle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub subject: String,
    pub style_id: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub styles: Vec<StyleSpec>,
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn sha256_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("manifest serializes");
        let d = Sha256::digest(json.as_bytes());
        d.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn entries_for(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn style(&self, id: &str) -> Result<&StyleSpec> {
        self.styles
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::State(format!("style {id} not in manifest")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Write via a temp file in the same directory, then rename, so readers
/// never observe partial content.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        path.file_name().and_then(|n| n.to_str()).unwrap_or("file")
    ));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Binary PPM (P6), 8 bits per channel. Values map linearly from [-1, 1]
/// to 0..=255.
pub fn write_ppm<S: Scalar>(path: &Path, image: &Tensor<S>) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::dimension("write_ppm", &[3, 0, 0], shape));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = image.data()[c * h * w + y * w + x].as_f64();
                let q = ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8;
                bytes.push(q);
            }
        }
    }
    write_atomic(path, &bytes)
}

pub fn read_ppm<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let fmt = |offset: usize, message: &str| Error::Format {
        offset: offset as u64,
        message: message.to_string(),
    };
    let mut pos = 0usize;
    let token = |pos: &mut usize| -> Result<String> {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fmt(start, "unexpected end of PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P6" {
        return Err(fmt(0, "not a P6 PPM"));
    }
    let w: usize = token(&mut pos)?
        .parse()
        .map_err(|_| fmt(pos, "bad width"))?;
    let h: usize = token(&mut pos)?
        .parse()
        .map_err(|_| fmt(pos, "bad height"))?;
    let maxv: usize = token(&mut pos)?
        .parse()
        .map_err(|_| fmt(pos, "bad max value"))?;
    if maxv != 255 {
        return Err(fmt(pos, "only 8-bit PPM supported"));
    }
    pos += 1; // single whitespace after header
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(fmt(bytes.len(), "truncated PPM payload"));
    }
    let mut data = vec![S::zero(); need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let q = bytes[pos + (y * w + x) * 3 + c] as f64;
                data[c * h * w + y * w + x] = S::from_f64(q / 255.0 * 2.0 - 1.0);
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Render and write the full corpus. Pretrain cells get `per_cell` images
/// each; every held-out style gets exactly 5 images across 5 distinct
/// subjects (the few-shot reference budget).
pub fn generate_corpus(
    root: &Path,
    pretrain: &[StyleSpec],
    heldout: &[StyleSpec],
    subjects: &[&str],
    per_cell: usize,
    seed: u64,
) -> Result<CorpusManifest> {
    for s in pretrain.iter().chain(heldout) {
        s.validate()?;
    }
    let pre_ids: std::collections::BTreeSet<_> = pretrain.iter().map(|s| &s.id).collect();
    for h in heldout {
        if pre_ids.contains(&h.id) {
            return Err(Error::Parameter(format!(
                "style {} appears in both splits",
                h.id
            )));
        }
    }
    if subjects.len() < 5 {
        return Err(Error::Parameter(
            "need at least 5 subjects for held-out references".into(),
        ));
    }
    let mut entries = Vec::new();
    let mut render_jobs: Vec<(PathBuf, StyleSpec, String, u64)> = Vec::new();
    for style in pretrain {
        for subject in subjects {
            for k in 0..per_cell {
                let rseed = mix_seed(seed, &format!("pre/{}/{subject}/{k}", style.id));
                let rel = format!("images/pretrain/{}/{subject}_{k}.ppm", style.id);
                entries.push(ManifestEntry {
                    path: rel.clone(),
                    subject: subject.to_string(),
                    style_id: style.id.clone(),
                    seed: rseed,
                    split: Split::Pretrain,
                });
                render_jobs.push((root.join(&rel), style.clone(), subject.to_string(), rseed));
            }
        }
    }
    for style in heldout {
        for (k, subject) in subjects.iter().take(5).enumerate() {
            let rseed = mix_seed(seed, &format!("held/{}/{subject}/{k}", style.id));
            let rel = format!("images/heldout/{}/{subject}_{k}.ppm", style.id);
            entries.push(ManifestEntry {
                path: rel.clone(),
                subject: subject.to_string(),
                style_id: style.id.clone(),
                seed: rseed,
                split: Split::HeldoutStyle,
            });
            render_jobs.push((root.join(&rel), style.clone(), subject.to_string(), rseed));
        }
    }
    render_parallel(&render_jobs)?;
    let manifest = CorpusManifest {
        styles: pretrain.iter().chain(heldout).cloned().collect(),
        entries,
    };
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}

/// Worker count: `STYLELAB_THREADS` if set, else available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("STYLELAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

fn render_parallel(jobs: &[(PathBuf, StyleSpec, String, u64)]) -> Result<()> {
    let workers = worker_threads().min(jobs.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let errors = std::sync::Mutex::new(Vec::<Error>::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let (path, style, subject, rseed) = &jobs[i];
                let res = render_sample::<f32>(style, subject, *rseed)
                    .and_then(|img| write_ppm(path, &img));
                if let Err(e) = res {
                    errors.lock().unwrap().push(e);
                    break;
                }
            });
        }
    });
    match errors.into_inner().unwrap().into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
