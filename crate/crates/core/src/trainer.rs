//! Training loop: per-item random steps, forward noising of the adversarial
//! input, noise prediction, the weighted multi-term loss, and Adam updates,
//! plus versioned checkpoints and exact resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PairDataset;
use crate::denoiser::{DenoiserModel, UNetConfig};
use crate::diffusion::{predict_x0_from_eps, q_sample};
use crate::error::{Error, Result};
use crate::features::{ExtractorDescriptor, FeatureConfig, FeatureExtractor};
use crate::losses::{
    loss_pixel, loss_semantic, loss_simple, loss_ssim, LossBundle, LossTerms, LossWeights,
    SsimConfig,
};
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::{gaussian, scalar_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weights: LossWeights,
    pub schedule: ScheduleConfig,
    pub seed: u64,
    pub image_size: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    #[serde(default)]
    pub grad_clip: Option<f64>,
    /// Clamp `x̂₀` to `[-1, 1]` before the semantic and SSIM terms.
    #[serde(default = "yes")]
    pub clip_x0: bool,
    pub unet: UNetConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub ssim: SsimConfig,
    #[serde(default)]
    pub precision: Precision,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// 256×256 inputs, 64-channel U-Net, T = 1000.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            lr: 1e-4,
            lr_decay_factor: 10.0,
            lr_decay_every: 5,
            weights: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            seed: 0,
            image_size: 256,
            checkpoint_every: 1000,
            grad_clip: None,
            clip_x0: true,
            unet: UNetConfig::paper_scale(),
            features: FeatureConfig::default(),
            ssim: SsimConfig::default(),
            precision: Precision::F32,
        }
    }

    /// 32×32 inputs, 16-channel U-Net, T = 100.
    pub fn test_scale() -> Self {
        Self {
            epochs: 5,
            image_size: 32,
            checkpoint_every: 0,
            schedule: ScheduleConfig::scaled_linear(100),
            unet: UNetConfig::test_scale(),
            ..Self::paper_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.lr_decay_factor > 0.0) || self.lr_decay_every == 0 {
            return Err(Error::InvalidArgument(
                "learning-rate settings must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument("grad_clip must be positive".into()));
            }
        }
        self.weights.validate()?;
        self.ssim.validate()?;
        self.unet.validate()?;
        self.unet.bottleneck_size(self.image_size)?;
        self.schedule.build()?;
        Ok(())
    }

    /// `lr₀ / factor^⌊epoch / every⌋` (epochs are 0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.lr
            / self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every) as i32)
    }
}

/// First-order adaptive-moment optimizer (β = 0.9 / 0.999, no weight decay).
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Applies one update to every named parameter that has a gradient.
    pub fn update(
        &mut self,
        params: &[(String, candle_core::Var)],
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in params {
            let Some(g) = grads.get(name) else { continue };
            let g = &g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m.affine(self.beta1, 0.0))? + g.affine(1.0 - self.beta1, 0.0)?)?,
                None => g.affine(1.0 - self.beta1, 0.0)?,
            };
            let v = match self.v.get(name) {
                Some(v) => {
                    ((v.affine(self.beta2, 0.0))? + g.sqr()?.affine(1.0 - self.beta2, 0.0)?)?
                }
                None => g.sqr()?.affine(1.0 - self.beta2, 0.0)?,
            };
            let denom = (v.affine(1.0 / c2, 0.0)?.sqrt()? + self.eps)?;
            let delta = (m.affine(lr / c1, 0.0)? / denom)?;
            var.set(&(var.as_tensor().detach() - delta)?.detach())?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }
}

/// Loss terms for one batch given the sampled steps and noise.
#[allow(clippy::too_many_arguments)]
pub fn compute_losses(
    model: &DenoiserModel,
    s: &NoiseSchedule,
    extractor: &FeatureExtractor,
    weights: &LossWeights,
    ssim_cfg: &SsimConfig,
    clip_x0: bool,
    clean: &Tensor,
    adversarial: &Tensor,
    t: &[usize],
    eps: &Tensor,
) -> Result<LossTerms> {
    let x_t = q_sample(adversarial, t, eps, s)?;
    let eps_hat = model.predict(&x_t, t)?;
    let simple = loss_simple(eps, &eps_hat)?;
    let pixel = loss_pixel(eps, &eps_hat)?;
    let needs_x0 = weights.lambda_semantic != 0.0 || weights.lambda_ssim != 0.0;
    let (semantic, ssim_loss) = if needs_x0 {
        let mut x0 = predict_x0_from_eps(&x_t, t, &eps_hat, s)?;
        if clip_x0 {
            x0 = x0.clamp(-1.0, 1.0)?;
        }
        let semantic = if weights.lambda_semantic != 0.0 {
            Some(loss_semantic(extractor, &x0, &clean.to_dtype(x0.dtype())?)?)
        } else {
            None
        };
        let ssim_loss = if weights.lambda_ssim != 0.0 {
            Some(loss_ssim(&x0, clean, ssim_cfg)?)
        } else {
            None
        };
        (semantic, ssim_loss)
    } else {
        (None, None)
    };
    Ok(LossTerms {
        simple,
        pixel,
        semantic,
        ssim_loss,
    })
}

/// Model, optimizer, and frozen extractor for one training run.
pub struct Trainer {
    config: TrainConfig,
    schedule: NoiseSchedule,
    model: DenoiserModel,
    extractor: FeatureExtractor,
    adam: Adam,
    step: usize,
    history: Vec<LossBundle>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule.build()?;
        let dtype = config.precision.dtype();
        let model = DenoiserModel::build(
            &config.unet,
            config.seed,
            schedule.fingerprint(),
            dtype,
            &Device::Cpu,
        )?;
        let extractor = FeatureExtractor::from_config(&config.features, dtype, &Device::Cpu)?;
        Ok(Self {
            config,
            schedule,
            model,
            extractor,
            adam: Adam::default(),
            step: 0,
            history: Vec::new(),
        })
    }

    /// Restores model weights, optimizer moments, and the step counter.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut tr = Self::new(ckpt.manifest.train.clone())?;
        if tr.schedule.fingerprint() != ckpt.manifest.schedule_fingerprint {
            return Err(Error::FingerprintMismatch {
                model: ckpt.manifest.schedule_fingerprint.clone(),
                schedule: tr.schedule.fingerprint(),
            });
        }
        tr.model.params().load(&ckpt.section(MODEL_PREFIX))?;
        tr.adam.step = ckpt.manifest.optimizer_step;
        tr.adam.m = ckpt.section(ADAM_M_PREFIX);
        tr.adam.v = ckpt.section(ADAM_V_PREFIX);
        tr.step = ckpt.manifest.step;
        tr.history = ckpt.manifest.loss_tail.clone();
        Ok(tr)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &DenoiserModel {
        &self.model
    }

    pub fn into_model(self) -> DenoiserModel {
        self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.config.batch_size)
    }

    /// One optimizer update on a batch of clean/adversarial pairs.
    pub fn train_step(
        &mut self,
        clean: &Tensor,
        adversarial: &Tensor,
        rng: &mut ChaCha8Rng,
        lr: f64,
    ) -> Result<LossBundle> {
        let n = clean.dim(0)?;
        if n == 0 {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let dtype = self.model.dtype();
        let (clean, adversarial) = (clean.to_dtype(dtype)?, adversarial.to_dtype(dtype)?);
        let t: Vec<usize> = (0..n)
            .map(|_| rng.random_range(1..=self.schedule.steps()))
            .collect();
        let eps = gaussian(adversarial.shape(), dtype, adversarial.device(), rng)?;
        let terms = compute_losses(
            &self.model,
            &self.schedule,
            &self.extractor,
            &self.config.weights,
            &self.config.ssim,
            self.config.clip_x0,
            &clean,
            &adversarial,
            &t,
            &eps,
        )?;
        let (total, bundle) = terms.combine(&self.config.weights)?;
        if !bundle.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at step {} (t = {t:?}): {bundle:?}",
                self.step + 1
            )));
        }
        let grads = total.backward()?;
        let params = self.model.params().named_vars();
        let mut named = BTreeMap::new();
        for (name, var) in &params {
            if let Some(g) = grads.get(var.as_tensor()) {
                named.insert(name.clone(), g.clone());
            }
        }
        if let Some(max_norm) = self.config.grad_clip {
            let sq: f64 = named
                .values()
                .map(|g| {
                    g.sqr()
                        .and_then(|s| s.sum_all())
                        .map_err(Error::from)
                        .and_then(|s| scalar_f64(&s))
                })
                .sum::<Result<f64>>()?;
            let norm = sq.sqrt();
            if norm > max_norm {
                for g in named.values_mut() {
                    *g = g.affine(max_norm / norm, 0.0)?;
                }
            }
        }
        self.adam.update(&params, &named, lr)?;
        self.step += 1;
        self.history.push(bundle);
        if self.history.len() > LOSS_TAIL {
            self.history.remove(0);
        }
        Ok(bundle)
    }

    /// Snapshot of the current state.
    pub fn checkpoint(&self, epoch: usize) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        for (k, v) in self.model.params().snapshot()? {
            tensors.insert(format!("{MODEL_PREFIX}{k}"), v);
        }
        for (k, v) in &self.adam.m {
            tensors.insert(format!("{ADAM_M_PREFIX}{k}"), v.clone());
        }
        for (k, v) in &self.adam.v {
            tensors.insert(format!("{ADAM_V_PREFIX}{k}"), v.clone());
        }
        Ok(Checkpoint {
            manifest: CheckpointManifest {
                format_version: CHECKPOINT_FORMAT_VERSION,
                schedule: self.config.schedule,
                schedule_fingerprint: self.schedule.fingerprint(),
                unet: self.config.unet.clone(),
                weights: self.config.weights,
                extractor: self.extractor.descriptor().clone(),
                seed: self.config.seed,
                step: self.step,
                epoch,
                optimizer_step: self.adam.step,
                loss_tail: self.history.clone(),
                train: self.config.clone(),
            },
            tensors,
        })
    }
}

const LOSS_TAIL: usize = 20;
const MODEL_PREFIX: &str = "model/";
const ADAM_M_PREFIX: &str = "adam_m/";
const ADAM_V_PREFIX: &str = "adam_v/";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"DIFFDFCK";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_CSV: &str = "loss.csv";
const LOSS_HEADER: &str = "step,simple,pixel,semantic,ssim,total";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub schedule: ScheduleConfig,
    pub schedule_fingerprint: String,
    pub unet: UNetConfig,
    pub weights: LossWeights,
    pub extractor: ExtractorDescriptor,
    pub seed: u64,
    /// Optimizer steps completed.
    pub step: usize,
    /// Epochs completed.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub loss_tail: Vec<LossBundle>,
    pub train: TrainConfig,
}

/// Named tensors (model weights and optimizer moments) plus the manifest.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    fn section(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
            .collect()
    }

    /// Rebuilds the denoiser with the stored weights.
    pub fn model(&self) -> Result<DenoiserModel> {
        let m = &self.manifest;
        let model = DenoiserModel::build(
            &m.unet,
            m.seed,
            m.schedule_fingerprint.clone(),
            m.train.precision.dtype(),
            &Device::Cpu,
        )?;
        model.params().load(&self.section(MODEL_PREFIX))?;
        Ok(model)
    }
}

/// Path of the JSON manifest written beside a checkpoint file.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Binary layout (little endian): magic `DIFFDFCK`, format version `u32`,
/// tensor count `u32`, then per tensor in name order: name length `u32`,
/// UTF-8 name, rank `u32`, dims `u64` each, dtype code `u8` (0 = f32,
/// 1 = f64), raw element data. The manifest goes to a `.json` sidecar.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in &ckpt.tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let flat = t.flatten_all()?;
        match t.dtype() {
            DType::F32 => {
                buf.push(0);
                for v in flat.to_vec1::<f32>()? {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::F64 => {
                buf.push(1);
                for v in flat.to_vec1::<f64>()? {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            other => return Err(Error::Data(format!("{name}: unsupported dtype {other:?}"))),
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let mut json = serde_json::to_string_pretty(&ckpt.manifest)?;
    json.push('\n');
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "{}: truncated checkpoint",
                self.path.display()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(8)? != MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let t = match r.take(1)?[0] {
            0 => {
                let v: Vec<f32> = r
                    .take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4")))
                    .collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            1 => {
                let v: Vec<f64> = r
                    .take(8 * n)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
                    .collect();
                Tensor::from_vec(v, dims, &Device::Cpu)?
            }
            code => return Err(Error::Data(format!("{name}: unknown dtype code {code}"))),
        };
        tensors.insert(name, t);
    }
    let side = sidecar_path(path);
    if !side.exists() {
        return Err(Error::MissingFile(side));
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: manifest.format_version,
            expected: CHECKPOINT_FORMAT_VERSION,
        });
    }
    Ok(Checkpoint { manifest, tensors })
}

fn loss_row(step: usize, b: &LossBundle) -> String {
    format!(
        "{step},{:.8},{:.8},{:.8},{:.8},{:.8}\n",
        b.simple, b.pixel, b.semantic, b.ssim_loss, b.total
    )
}

/// Keeps the header and the first `steps` rows of an existing loss CSV.
fn truncate_loss_csv(path: &Path, steps: usize) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for line in text.lines().take(steps + 1) {
        out.push_str(line);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Per-step generator: independent of batching history, so resumed runs
/// draw exactly what an uninterrupted run would.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((1u64 << 32) + step as u64);
    rng
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains for `config.epochs` epochs, writing `loss.csv` and
/// `checkpoint.bin` (+ `.json`) under `out_dir`.
///
/// With `resume`, training continues from `out_dir/checkpoint.bin` when it
/// exists and was produced by the same configuration (epochs may differ);
/// the loss CSV is cut back to the checkpoint's step first.
pub fn train(
    config: &TrainConfig,
    dataset: &PairDataset,
    out_dir: &Path,
    resume: bool,
) -> Result<Checkpoint> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if dataset.manifest.image_size != config.image_size {
        return Err(Error::Data(format!(
            "dataset images are {0}x{0}, config expects {1}x{1}",
            dataset.manifest.image_size, config.image_size
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let csv_path = out_dir.join(LOSS_CSV);
    let mut trainer = if resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        let stored = TrainConfig {
            epochs: config.epochs,
            checkpoint_every: config.checkpoint_every,
            ..ckpt.manifest.train.clone()
        };
        if &stored != config {
            return Err(Error::InvalidArgument(format!(
                "{} was written with a different configuration",
                ckpt_path.display()
            )));
        }
        let mut tr = Trainer::from_checkpoint(&ckpt)?;
        tr.config = config.clone();
        truncate_loss_csv(&csv_path, tr.step)?;
        log::info!("resuming from step {}", tr.step);
        tr
    } else {
        fs::write(&csv_path, format!("{LOSS_HEADER}\n")).map_err(|e| Error::io(&csv_path, e))?;
        Trainer::new(config.clone())?
    };
    let n = dataset.len();
    let per_epoch = trainer.steps_per_epoch(n);
    let mut csv = fs::OpenOptions::new()
        .append(true)
        .open(&csv_path)
        .map_err(|e| Error::io(&csv_path, e))?;
    let start_epoch = trainer.step / per_epoch;
    for epoch in start_epoch..config.epochs {
        let lr = config.lr_at_epoch(epoch);
        let order = epoch_order(config.seed, epoch, n);
        let started = std::time::Instant::now();
        let mut sum = 0.0;
        let first = trainer.step - epoch * per_epoch;
        for b in first..per_epoch {
            let idx: Vec<u32> = order[b * config.batch_size..((b + 1) * config.batch_size).min(n)]
                .iter()
                .map(|&i| i as u32)
                .collect();
            let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
            let clean = dataset.clean.index_select(&idx, 0)?;
            let adv = dataset.adversarial.index_select(&idx, 0)?;
            let mut rng = step_rng(config.seed, trainer.step);
            let bundle = trainer.train_step(&clean, &adv, &mut rng, lr)?;
            sum += bundle.total;
            csv.write_all(loss_row(trainer.step, &bundle).as_bytes())
                .map_err(|e| Error::io(&csv_path, e))?;
            if config.checkpoint_every > 0 && trainer.step % config.checkpoint_every == 0 {
                csv.flush().map_err(|e| Error::io(&csv_path, e))?;
                save_checkpoint(&trainer.checkpoint(trainer.step / per_epoch)?, &ckpt_path)?;
            }
        }
        log::info!(
            "epoch {} lr {:.1e} mean loss {:.5} ({:.1?})",
            epoch + 1,
            lr,
            sum / (per_epoch - first).max(1) as f64,
            started.elapsed()
        );
    }
    csv.flush().map_err(|e| Error::io(&csv_path, e))?;
    let ckpt = trainer.checkpoint(trainer.step / per_epoch)?;
    save_checkpoint(&ckpt, &ckpt_path)?;
    Ok(ckpt)
}

/// Reads the per-step loss CSV written by [`train`].
pub fn read_loss_csv(path: &Path) -> Result<Vec<(usize, LossBundle)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let v: Vec<f64> = l
                .split(',')
                .map(|x| x.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            if v.len() != 6 {
                return Err(Error::Data(format!(
                    "{}: malformed row {l}",
                    path.display()
                )));
            }
            Ok((
                v[0] as usize,
                LossBundle {
                    simple: v[1],
                    pixel: v[2],
                    semantic: v[3],
                    ssim_loss: v[4],
                    total: v[5],
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_steps_down_every_five_epochs() {
        let c = TrainConfig::test_scale();
        for e in 0..15 {
            let expect = [1e-4, 1e-5, 1e-6][e / 5];
            assert!(
                (c.lr_at_epoch(e) - expect).abs() <= expect * 1e-12,
                "epoch {e}"
            );
        }
    }

    #[test]
    fn epoch_order_is_a_permutation() {
        let mut o = epoch_order(3, 2, 50);
        assert_ne!(o, (0..50).collect::<Vec<_>>());
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
        assert_eq!(epoch_order(3, 2, 50), epoch_order(3, 2, 50));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let var = candle_core::Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let params = vec![("p".to_string(), var.clone())];
        let mut grads = BTreeMap::new();
        grads.insert(
            "p".to_string(),
            Tensor::new(&[0.5f64, -3.0], &Device::Cpu).unwrap(),
        );
        let mut adam = Adam::default();
        adam.update(&params, &grads, 0.1).unwrap();
        // Bias-corrected first step is lr·g/|g| (up to ε).
        let v = var.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6);
    }
}
