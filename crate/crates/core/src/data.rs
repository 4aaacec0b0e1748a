//! Frame sampling, cropping, pair datasets, and synthetic tracking sequences.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{derive_seed, AttackConfig, PairMeta};
use crate::error::{Error, Result};
use crate::evalkit::BBox;
use crate::features::FeatureExtractor;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";

/// A tracking sequence held in memory.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub boxes: Vec<BBox>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.boxes.len() {
            return Err(Error::Data(format!(
                "sequence {}: {} frames but {} boxes",
                self.name,
                self.frames.len(),
                self.boxes.len()
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !(b.w > 0.0 && b.h > 0.0) {
                return Err(Error::Data(format!(
                    "sequence {}: degenerate box at frame {i}",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// A sequence on disk: frame files plus one box per frame.
#[derive(Debug, Clone)]
pub struct SequenceAnnotation {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub boxes: Vec<BBox>,
}

impl SequenceAnnotation {
    /// Reads `<dir>/groundtruth.txt` (`x,y,w,h` per line) and the sorted
    /// `*.png` / `*.jpg` frames beside it.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let gt_path = dir.join(GROUNDTRUTH_FILE);
        if !gt_path.exists() {
            return Err(Error::MissingFile(gt_path));
        }
        let text = fs::read_to_string(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
        let mut boxes = Vec::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let v: Vec<f64> = line
                .split([',', ' ', '\t'])
                .filter(|s| !s.is_empty())
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("{}:{}: {e}", gt_path.display(), n + 1)))?;
            if v.len() != 4 {
                return Err(Error::Data(format!(
                    "{}:{}: expected 4 values",
                    gt_path.display(),
                    n + 1
                )));
            }
            boxes.push(BBox::new(v[0], v[1], v[2], v[3]));
        }
        let frames = list_images(dir)?;
        let name = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "sequence".into());
        if frames.len() != boxes.len() {
            return Err(Error::Data(format!(
                "{name}: {} frames but {} annotations",
                frames.len(),
                boxes.len()
            )));
        }
        Ok(Self {
            name,
            frames,
            boxes,
        })
    }

    pub fn load(&self) -> Result<Sequence> {
        let frames = self
            .frames
            .iter()
            .map(|p| Ok(image::open(p)?.to_rgb8()))
            .collect::<Result<Vec<_>>>()?;
        let seq = Sequence {
            name: self.name.clone(),
            frames,
            boxes: self.boxes.clone(),
        };
        seq.validate()?;
        Ok(seq)
    }
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.to_ascii_lowercase())
                    .as_deref(),
                Some("png" | "jpg" | "jpeg")
            )
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Writes frames as `00000.png …` plus `groundtruth.txt` under `dir`.
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in seq.frames.iter().enumerate() {
        f.save(dir.join(format!("{i:05}.png")))?;
    }
    let gt: String = seq
        .boxes
        .iter()
        .map(|b| format!("{},{},{},{}\n", b.x, b.y, b.w, b.h))
        .collect();
    let p = dir.join(GROUNDTRUTH_FILE);
    fs::write(&p, gt).map_err(|e| Error::io(&p, e))
}

/// Loads every sequence directory (one containing `groundtruth.txt`) under `root`.
pub fn load_sequences(root: &Path) -> Result<Vec<Sequence>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(GROUNDTRUTH_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Data(format!(
            "no annotated sequences under {}",
            root.display()
        )));
    }
    dirs.iter()
        .map(|d| SequenceAnnotation::from_dir(d)?.load())
        .collect()
}

/// Indices `0, stride, 2·stride, …` below `n_frames`.
pub fn sample_frames(n_frames: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(Error::InvalidArgument("frame stride must be >= 1".into()));
    }
    Ok((0..n_frames).step_by(stride).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropKind {
    Template,
    Search,
}

impl CropKind {
    pub fn name(self) -> &'static str {
        match self {
            CropKind::Template => "template",
            CropKind::Search => "search",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropSpec {
    pub kind: CropKind,
    pub context_factor: f64,
    pub output_size: usize,
}

impl CropSpec {
    pub fn template(output_size: usize) -> Self {
        Self {
            kind: CropKind::Template,
            context_factor: 1.0,
            output_size,
        }
    }

    pub fn search(output_size: usize) -> Self {
        Self {
            kind: CropKind::Search,
            context_factor: 2.0,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.context_factor > 0.0) || self.output_size == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid crop spec {self:?}"
            )));
        }
        Ok(())
    }

    /// Side length in frame pixels of the square crop around `b`:
    /// `context_factor · √((w + p)(h + p))` with `p = (w + h)/2`.
    pub fn side(&self, b: &BBox) -> f64 {
        let p = 0.5 * (b.w + b.h);
        self.context_factor * ((b.w + p) * (b.h + p)).sqrt()
    }
}

/// Bilinear sampling of the rectangle `[x0, x0+sw) × [y0, y0+sh)` onto an
/// `out_w × out_h` grid (pixel-center aligned, replicated border). Returns
/// channel-major values in `[0, 255]`.
pub fn resample(
    img: &RgbImage,
    x0: f64,
    y0: f64,
    sw: f64,
    sh: f64,
    out_w: usize,
    out_h: usize,
) -> Vec<f64> {
    let (w, h) = img.dimensions();
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    let mut out = vec![0.0; 3 * out_w * out_h];
    let plane = out_w * out_h;
    for i in 0..out_h {
        let sy = (y0 + (i as f64 + 0.5) * sh / out_h as f64 - 0.5).clamp(0.0, hm);
        let (ya, fy) = (sy.floor(), sy - sy.floor());
        let yb = (ya + 1.0).min(hm);
        for j in 0..out_w {
            let sx = (x0 + (j as f64 + 0.5) * sw / out_w as f64 - 0.5).clamp(0.0, wm);
            let (xa, fx) = (sx.floor(), sx - sx.floor());
            let xb = (xa + 1.0).min(wm);
            let p = |x: f64, y: f64| img.get_pixel(x as u32, y as u32).0;
            let (a, b, c, d) = (p(xa, ya), p(xb, ya), p(xa, yb), p(xb, yb));
            for ch in 0..3 {
                let top = a[ch] as f64 * (1.0 - fx) + b[ch] as f64 * fx;
                let bot = c[ch] as f64 * (1.0 - fx) + d[ch] as f64 * fx;
                out[ch * plane + i * out_w + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn to_model_range(values: Vec<f64>, size: (usize, usize)) -> Result<Tensor> {
    let v: Vec<f32> = values
        .into_iter()
        .map(|x| (x / 127.5 - 1.0) as f32)
        .collect();
    Ok(Tensor::from_vec(v, (3, size.1, size.0), &Device::Cpu)?)
}

/// Square crop around `b` resized to `spec.output_size`, in `[-1, 1]` (f32).
pub fn crop_region(frame: &RgbImage, b: &BBox, spec: &CropSpec) -> Result<Tensor> {
    spec.validate()?;
    if !(b.w > 0.0 && b.h > 0.0) {
        return Err(Error::InvalidArgument(format!("degenerate box {b:?}")));
    }
    let side = spec.side(b);
    let (cx, cy) = b.center();
    let n = spec.output_size;
    to_model_range(
        resample(frame, cx - side / 2.0, cy - side / 2.0, side, side, n, n),
        (n, n),
    )
}

/// Whole-image bilinear resize to `size × size`, mapped `[0,255] → [-1,1]`.
pub fn preprocess(img: &RgbImage, size: usize) -> Result<Tensor> {
    let (w, h) = img.dimensions();
    to_model_range(
        resample(img, 0.0, 0.0, w as f64, h as f64, size, size),
        (size, size),
    )
}

/// Inverse of the value map: `[-1,1]` CHW tensor to an 8-bit image (rounded).
pub fn depreprocess(t: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            lhs: t.dims().to_vec(),
            rhs: vec![3, h, w],
        });
    }
    let v = crate::tensor::to_vec_f64(t)?;
    let plane = h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let k = y as usize * w + x as usize;
        let q = |ch: usize| {
            ((v[ch * plane + k] + 1.0) * 127.5)
                .round()
                .clamp(0.0, 255.0) as u8
        };
        Rgb([q(0), q(1), q(2)])
    }))
}

/// Rounds a model-range tensor onto the 8-bit grid (values stay in `[-1,1]`).
pub fn quantize(t: &Tensor) -> Result<Tensor> {
    let img = depreprocess(t)?;
    let (w, h) = img.dimensions();
    let v: Vec<f64> = (0..3)
        .flat_map(|ch| {
            img.pixels()
                .map(move |p| p.0[ch] as f64)
                .collect::<Vec<_>>()
        })
        .collect();
    to_model_range(v, (w as usize, h as usize))
}

/// Stores `clean + δ` on the 8-bit grid with every `|δ|` truncated toward
/// zero, so the stored perturbation never exceeds the generated one.
fn quantize_adversarial(clean_q: &Tensor, adv: &Tensor) -> Result<RgbImage> {
    let c = crate::tensor::to_vec_f64(clean_q)?;
    let a = crate::tensor::to_vec_f64(adv)?;
    let (_, h, w) = clean_q.dims3()?;
    let plane = h * w;
    let codes: Vec<u8> = c
        .iter()
        .zip(&a)
        .map(|(&c, &a)| {
            let base = ((c + 1.0) * 127.5).round();
            let step = ((a - c) * 127.5 + 1e-9 * (a - c).signum()).trunc();
            (base + step).clamp(0.0, 255.0) as u8
        })
        .collect();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let k = y as usize * w + x as usize;
        Rgb([codes[k], codes[plane + k], codes[2 * plane + k]])
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub clean_path: String,
    pub adv_path: String,
    pub crop_kind: CropKind,
    pub source_sequence: String,
    pub frame_index: usize,
    pub generator_meta: PairMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub schema_version: u32,
    pub image_size: usize,
    pub entries: Vec<PairEntry>,
}

impl PairManifest {
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let p = root.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let p = root.join(MANIFEST_FILE);
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let m: PairManifest = serde_json::from_str(&text)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::FormatVersion {
                found: m.schema_version,
                expected: MANIFEST_SCHEMA_VERSION,
            });
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub stride: usize,
    pub template: CropSpec,
    pub search: CropSpec,
    pub seed: u64,
}

impl DatasetConfig {
    pub fn new(image_size: usize, stride: usize, seed: u64) -> Self {
        Self {
            stride,
            template: CropSpec::template(image_size),
            search: CropSpec::search(image_size),
            seed,
        }
    }
}

fn ensure_dirs(out_dir: &Path) -> Result<()> {
    for sub in ["clean", "adv"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    Ok(())
}

/// Crops every sampled frame twice, attacks each crop, and writes the
/// clean/adversarial PNG pairs plus `manifest.json` under `out_dir`.
///
/// Template crops are centered on the frame's own box; search crops on the
/// previous frame's box, so the target sits off-center by its motion.
pub fn build_manifest(
    sequences: &[Sequence],
    cfg: &DatasetConfig,
    attack: &AttackConfig,
    extractor: &FeatureExtractor,
    out_dir: &Path,
) -> Result<PairManifest> {
    if cfg.template.output_size != cfg.search.output_size {
        return Err(Error::InvalidArgument(
            "template and search crops must share one output size".into(),
        ));
    }
    ensure_dirs(out_dir)?;
    let mut entries = Vec::new();
    for (si, seq) in sequences.iter().enumerate() {
        seq.validate()?;
        for f in sample_frames(seq.len(), cfg.stride)? {
            for spec in [cfg.template, cfg.search] {
                let anchor = match spec.kind {
                    CropKind::Template => seq.boxes[f],
                    CropKind::Search => seq.boxes[f.saturating_sub(1)],
                };
                let clean = quantize(&crop_region(&seq.frames[f], &anchor, &spec)?)?;
                let seed = derive_seed(cfg.seed, &[si as u64, f as u64, spec.kind as u64]);
                let x = clean.to_dtype(extractor.dtype())?;
                let pair = attack.generate(&x, spec.kind == CropKind::Search, extractor, seed)?;
                let stem = format!("{}_{f:05}_{}.png", seq.name, spec.kind.name());
                let clean_rel = format!("clean/{stem}");
                let adv_rel = format!("adv/{stem}");
                depreprocess(&clean)?.save(out_dir.join(&clean_rel))?;
                quantize_adversarial(&pair.clean, &pair.adversarial)?
                    .save(out_dir.join(&adv_rel))?;
                entries.push(PairEntry {
                    clean_path: clean_rel,
                    adv_path: adv_rel,
                    crop_kind: spec.kind,
                    source_sequence: seq.name.clone(),
                    frame_index: f,
                    generator_meta: pair.meta,
                });
            }
        }
    }
    let manifest = PairManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        image_size: cfg.search.output_size,
        entries,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Builds a manifest from externally generated pairs: every image in
/// `clean_dir` must have a same-named counterpart in `adv_dir` and vice versa.
pub fn ingest_external(clean_dir: &Path, adv_dir: &Path, out_dir: &Path) -> Result<PairManifest> {
    let clean = list_images(clean_dir)?;
    let adv = list_images(adv_dir)?;
    let name = |p: &PathBuf| p.file_name().unwrap_or_default().to_owned();
    for c in &clean {
        if !adv_dir.join(name(c)).exists() {
            return Err(Error::MissingFile(adv_dir.join(name(c))));
        }
    }
    for a in &adv {
        if !clean_dir.join(name(a)).exists() {
            return Err(Error::MissingFile(clean_dir.join(name(a))));
        }
    }
    ensure_dirs(out_dir)?;
    let mut entries = Vec::new();
    let mut size = None;
    for (i, c) in clean.iter().enumerate() {
        let file = name(c);
        let stem = Path::new(&file).with_extension("png");
        let stem = stem.to_string_lossy();
        let ci = image::open(c)?.to_rgb8();
        let ai = image::open(adv_dir.join(&file))?.to_rgb8();
        if ci.dimensions() != ai.dimensions() || ci.width() != ci.height() {
            return Err(Error::Data(format!(
                "{}: clean/adversarial sizes differ or are not square",
                stem
            )));
        }
        if *size.get_or_insert(ci.width()) != ci.width() {
            return Err(Error::Data(format!(
                "{stem}: image size differs from the rest of the set"
            )));
        }
        ci.save(out_dir.join("clean").join(stem.as_ref()))?;
        ai.save(out_dir.join("adv").join(stem.as_ref()))?;
        entries.push(PairEntry {
            clean_path: format!("clean/{stem}"),
            adv_path: format!("adv/{stem}"),
            crop_kind: if stem.contains("template") {
                CropKind::Template
            } else {
                CropKind::Search
            },
            source_sequence: "external".into(),
            frame_index: i,
            generator_meta: PairMeta {
                generator: "external".into(),
                norm: None,
                epsilon: 0.0,
                seed: 0,
                period: None,
            },
        });
    }
    let manifest = PairManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        image_size: size.unwrap_or(0) as usize,
        entries,
    };
    manifest.write(out_dir)?;
    Ok(manifest)
}

/// Clean and adversarial images stacked as `N×3×S×S` tensors.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub clean: Tensor,
    pub adversarial: Tensor,
    pub manifest: PairManifest,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    /// Validates every referenced file and shape before loading anything.
    pub fn load(root: &Path, dtype: DType) -> Result<Self> {
        let manifest = PairManifest::read(root)?;
        for e in &manifest.entries {
            for rel in [&e.clean_path, &e.adv_path] {
                let p = root.join(rel);
                if !p.exists() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        let s = manifest.image_size as u32;
        let mut clean = Vec::with_capacity(manifest.entries.len());
        let mut adv = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            for (rel, dst) in [(&e.clean_path, &mut clean), (&e.adv_path, &mut adv)] {
                let img = image::open(root.join(rel))?.to_rgb8();
                if img.dimensions() != (s, s) {
                    return Err(Error::Data(format!(
                        "{rel}: expected {s}x{s}, found {}x{}",
                        img.width(),
                        img.height()
                    )));
                }
                dst.push(preprocess(&img, s as usize)?);
            }
        }
        if clean.is_empty() {
            return Err(Error::Data(format!(
                "{}: manifest has no entries",
                root.display()
            )));
        }
        Ok(Self {
            clean: Tensor::stack(&clean, 0)?.to_dtype(dtype)?,
            adversarial: Tensor::stack(&adv, 0)?.to_dtype(dtype)?,
            manifest,
        })
    }

    /// Entries whose crop kind matches `kind`.
    pub fn indices_of(&self, kind: CropKind) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.manifest.entries[i].crop_kind == kind)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub sequences: usize,
    pub frames: usize,
    pub canvas: usize,
    pub object_min: usize,
    pub object_max: usize,
    /// Upper bound on the per-frame displacement of the object center (pixels).
    pub max_velocity: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sequences: 8,
            frames: 40,
            canvas: 112,
            object_min: 16,
            object_max: 26,
            max_velocity: 3.0,
            seed: 0,
        }
    }
}

fn smooth_background(canvas: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(70.0..180.0));
    let waves: Vec<(usize, f64, f64, f64, f64)> = (0..9)
        .map(|k| {
            (
                k % 3,
                rng.random_range(0.02..0.12),
                rng.random_range(0.02..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(10.0..28.0),
            )
        })
        .collect();
    let mut px = vec![[0.0; 3]; canvas * canvas];
    for y in 0..canvas {
        for x in 0..canvas {
            let mut v = base;
            for &(ch, fx, fy, ph, amp) in &waves {
                v[ch] += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
            }
            for c in v.iter_mut() {
                *c += rng.random_range(-6.0..6.0);
            }
            px[y * canvas + x] = v;
        }
    }
    px
}

/// Moving two-tone objects on smooth textured backgrounds, with exact boxes.
pub fn make_synthetic_sequences(cfg: &SyntheticConfig) -> Result<Vec<Sequence>> {
    if cfg.object_min == 0
        || cfg.object_min > cfg.object_max
        || cfg.object_max * 2 > cfg.canvas
        || cfg.frames == 0
    {
        return Err(Error::InvalidArgument(format!(
            "invalid synthetic config {cfg:?}"
        )));
    }
    (0..cfg.sequences)
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[s as u64]));
            let canvas = cfg.canvas;
            let bg = smooth_background(canvas, &mut rng);
            let w = rng.random_range(cfg.object_min..=cfg.object_max) as f64;
            let h = rng.random_range(cfg.object_min..=cfg.object_max) as f64;
            let color_a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..255.0));
            let color_b: [f64; 3] = color_a.map(|c| 255.0 - c);
            let ellipse = rng.random::<bool>();
            let (lo_x, hi_x) = (w / 2.0, canvas as f64 - w / 2.0);
            let (lo_y, hi_y) = (h / 2.0, canvas as f64 - h / 2.0);
            let mut cx = rng.random_range(lo_x + 4.0..hi_x - 4.0);
            let mut cy = rng.random_range(lo_y + 4.0..hi_y - 4.0);
            let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
            let speed = rng.random_range(0.4..1.0) * cfg.max_velocity;
            let mut frames = Vec::with_capacity(cfg.frames);
            let mut boxes = Vec::with_capacity(cfg.frames);
            for _ in 0..cfg.frames {
                let b = BBox::new(cx - w / 2.0, cy - h / 2.0, w, h);
                let img = RgbImage::from_fn(canvas as u32, canvas as u32, |x, y| {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let (u, v) = ((px - cx) / (w / 2.0), (py - cy) / (h / 2.0));
                    let inside = if ellipse {
                        u * u + v * v <= 1.0
                    } else {
                        u.abs() <= 1.0 && v.abs() <= 1.0
                    };
                    let c = if inside {
                        if u + 0.5 * v > 0.0 {
                            color_a
                        } else {
                            color_b
                        }
                    } else {
                        bg[y as usize * canvas + x as usize]
                    };
                    Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
                });
                frames.push(img);
                boxes.push(b);
                heading += rng.random_range(-0.3..0.3);
                let (mut nx, mut ny) = (cx + speed * heading.cos(), cy + speed * heading.sin());
                if nx < lo_x || nx > hi_x {
                    heading = std::f64::consts::PI - heading;
                    nx = cx + speed * heading.cos();
                }
                if ny < lo_y || ny > hi_y {
                    heading = -heading;
                    ny = cy + speed * heading.sin();
                }
                cx = nx.clamp(lo_x, hi_x);
                cy = ny.clamp(lo_y, hi_y);
            }
            Ok(Sequence {
                name: format!("seq{s:03}"),
                frames,
                boxes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::{PerturbationBudget, StructuredKind, Surrogate};
    use crate::tensor::{max_abs_diff, to_vec_f64};

    fn gradient_img(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            Rgb([
                (x * 7 % 256) as u8,
                (y * 5 % 256) as u8,
                ((x + y) * 3 % 256) as u8,
            ])
        })
    }

    #[test]
    fn frame_sampling() {
        assert_eq!(sample_frames(25, 10).unwrap(), vec![0, 10, 20]);
        assert_eq!(sample_frames(4, 1).unwrap(), vec![0, 1, 2, 3]);
        assert!(sample_frames(4, 0).is_err());
    }

    #[test]
    fn preprocess_range_and_roundtrip() {
        let black = RgbImage::new(8, 8);
        let v = to_vec_f64(&preprocess(&black, 4).unwrap()).unwrap();
        assert!(v.iter().all(|&x| x == -1.0));
        let white = RgbImage::from_pixel(8, 8, Rgb([255; 3]));
        let v = to_vec_f64(&preprocess(&white, 4).unwrap()).unwrap();
        assert!(v.iter().all(|&x| x == 1.0));
        let img = gradient_img(16, 16);
        let back = depreprocess(&preprocess(&img, 16).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn crop_equal_to_box_is_a_resize() {
        let img = gradient_img(64, 64);
        // A square box with context 0 needs factor 1/2: side = 2·w·factor.
        let spec = CropSpec {
            kind: CropKind::Template,
            context_factor: 0.5,
            output_size: 16,
        };
        let b = BBox::new(24.0, 24.0, 16.0, 16.0);
        let crop = depreprocess(&crop_region(&img, &b, &spec).unwrap()).unwrap();
        let direct = image::imageops::crop_imm(&img, 24, 24, 16, 16).to_image();
        assert_eq!(crop, direct);
    }

    #[test]
    fn corner_crop_replicates_border() {
        let img = gradient_img(40, 30);
        let b = BBox::new(0.0, 0.0, 6.0, 6.0);
        let t = crop_region(&img, &b, &CropSpec::search(32)).unwrap();
        assert_eq!(t.dims(), &[3, 32, 32]);
        let out = depreprocess(&t).unwrap();
        // The top-left region lies outside the frame and takes the corner pixel.
        assert_eq!(out.get_pixel(0, 0), img.get_pixel(0, 0));
        assert_eq!(out.get_pixel(3, 2), img.get_pixel(0, 0));
    }

    #[test]
    fn degenerate_box_rejected() {
        let img = gradient_img(8, 8);
        assert!(crop_region(&img, &BBox::new(1.0, 1.0, 0.0, 3.0), &CropSpec::search(8)).is_err());
    }

    #[test]
    fn quantized_adversarial_stays_in_budget() {
        let clean = quantize(
            &crop_region(
                &gradient_img(32, 32),
                &BBox::new(8.0, 8.0, 10.0, 10.0),
                &CropSpec::search(16),
            )
            .unwrap(),
        )
        .unwrap();
        let eps = 0.05;
        let adv = crate::attacks::structured_perturbation(&clean, StructuredKind::Gaussian, eps, 3)
            .unwrap();
        let stored =
            preprocess(&quantize_adversarial(&clean, &adv.adversarial).unwrap(), 16).unwrap();
        let d = max_abs_diff(&stored, &clean).unwrap();
        assert!(d <= eps + 1e-6 && d > 0.0, "{d}");
    }

    #[test]
    fn synthetic_sequences_contract() {
        let cfg = SyntheticConfig {
            sequences: 3,
            frames: 30,
            ..Default::default()
        };
        let a = make_synthetic_sequences(&cfg).unwrap();
        let b = make_synthetic_sequences(&cfg).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.frames, sb.frames);
            sa.validate().unwrap();
            for (i, bx) in sa.boxes.iter().enumerate() {
                assert!(bx.x >= 0.0 && bx.y >= 0.0);
                assert!(
                    bx.x + bx.w <= cfg.canvas as f64 + 1e-9
                        && bx.y + bx.h <= cfg.canvas as f64 + 1e-9
                );
                if i > 0 {
                    let (x0, y0) = sa.boxes[i - 1].center();
                    let (x1, y1) = bx.center();
                    assert!(
                        ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt() <= cfg.max_velocity + 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn manifest_counts_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let seqs = make_synthetic_sequences(&SyntheticConfig {
            sequences: 1,
            frames: 25,
            ..Default::default()
        })
        .unwrap();
        let fe = FeatureExtractor::stub(0, DType::F32, &Device::Cpu).unwrap();
        let attack = AttackConfig::Gradient {
            surrogate: Surrogate::Auto,
            budget: PerturbationBudget::linf(0.1, 2),
            decoy_offset: 6,
        };
        let m = build_manifest(
            &seqs,
            &DatasetConfig::new(16, 10, 1),
            &attack,
            &fe,
            dir.path(),
        )
        .unwrap();
        assert_eq!(m.entries.len(), 6);
        assert_eq!(PairManifest::read(dir.path()).unwrap(), m);
        let ds = PairDataset::load(dir.path(), DType::F32).unwrap();
        assert_eq!(ds.clean.dims(), &[6, 3, 16, 16]);
        let d = max_abs_diff(&ds.clean, &ds.adversarial).unwrap();
        assert!(d <= 0.1 + 1e-6 && d > 0.0);
        std::fs::remove_file(dir.path().join(&m.entries[2].adv_path)).unwrap();
        assert!(matches!(
            PairDataset::load(dir.path(), DType::F32),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn external_ingest_names_missing_counterpart() {
        let dir = tempfile::tempdir().unwrap();
        let (c, a) = (dir.path().join("c"), dir.path().join("a"));
        fs::create_dir_all(&c).unwrap();
        fs::create_dir_all(&a).unwrap();
        for n in ["x1.png", "x2.png", "x3.png"] {
            gradient_img(8, 8).save(c.join(n)).unwrap();
        }
        for n in ["x1.png", "x3.png"] {
            gradient_img(8, 8).save(a.join(n)).unwrap();
        }
        match ingest_external(&c, &a, &dir.path().join("out")) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("x2.png") && p.starts_with(&a)),
            other => panic!("unexpected {other:?}"),
        }
        gradient_img(8, 8).save(a.join("x2.png")).unwrap();
        let m = ingest_external(&c, &a, &dir.path().join("out")).unwrap();
        assert_eq!(m.entries.len(), 3);
    }
}
