//! The noise-prediction network: a symmetric U-Net with skip connections and
//! sinusoidal time-step conditioning.
//!
//! Encoder stage `k` runs two `conv3×3 → GroupNorm → SiLU` blocks at
//! `base · mult[k]` channels with the projected time embedding added between
//! them, then halves the resolution with a stride-2 convolution. The decoder
//! mirrors this with stride-2 transposed convolutions and channel-wise skip
//! concatenation.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{
    conv2d, conv_transpose2d, linear, Conv2dConfig, ConvTranspose2dConfig, Linear, VarBuilder,
};
use serde::{Deserialize, Serialize};

use crate::conv::{Conv, UpConv};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::norm::GroupNormSiluLayer;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub norm_groups: usize,
    /// Width of the raw sinusoidal encoding.
    pub time_sinusoid_dim: usize,
    /// Width after the two fully connected layers.
    pub time_embed_dim: usize,
    /// Also add the time embedding inside decoder stages.
    #[serde(default)]
    pub time_in_decoder: bool,
}

impl UNetConfig {
    /// 64 → 128 → 256 → 512 channels, GroupNorm(32).
    pub fn paper_scale() -> Self {
        Self {
            in_channels: 3,
            base_channels: 64,
            channel_multipliers: vec![1, 2, 4, 8],
            norm_groups: 32,
            time_sinusoid_dim: 128,
            time_embed_dim: 256,
            time_in_decoder: false,
        }
    }

    /// 16 → 32 → 64 → 128 channels, GroupNorm(8); sized for CPU runs on
    /// 32×32 crops.
    pub fn test_scale() -> Self {
        Self {
            in_channels: 3,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4, 8],
            norm_groups: 8,
            time_sinusoid_dim: 128,
            time_embed_dim: 64,
            time_in_decoder: false,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.channel_multipliers
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.channel_multipliers.is_empty() {
            return Err(Error::InvalidArgument(
                "U-Net needs positive channel counts and at least one stage".into(),
            ));
        }
        if self.norm_groups == 0 {
            return Err(Error::InvalidArgument(
                "norm_groups must be positive".into(),
            ));
        }
        for c in self.stage_channels() {
            if c % self.norm_groups != 0 {
                return Err(Error::InvalidArgument(format!(
                    "{c} channels not divisible by {} norm groups",
                    self.norm_groups
                )));
            }
        }
        if self.time_sinusoid_dim < 2 || self.time_sinusoid_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "time sinusoid dimension must be even and >= 2, got {}",
                self.time_sinusoid_dim
            )));
        }
        if self.time_embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "time_embed_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Spatial size at the bottleneck for a square `input` image.
    pub fn bottleneck_size(&self, input: usize) -> Result<usize> {
        let factor = 1usize << self.num_stages();
        if input == 0 || input % factor != 0 {
            return Err(Error::InvalidArgument(format!(
                "spatial size {input} not divisible by {factor}"
            )));
        }
        Ok(input / factor)
    }
}

/// Sinusoidal encoding of a (possibly fractional) step.
///
/// The first half holds `sin(t / ω_k)`, the second `cos(t / ω_k)`, with
/// `ω_k = 10000^(k / (dim/2))`.
pub fn time_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "time embedding dimension must be even and >= 2, got {dim}"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| 10000f64.powf(-(k as f64) / half as f64))
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|w| (t * w).sin()).collect();
    out.extend(freqs.iter().map(|w| (t * w).cos()));
    Ok(out)
}

fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::silu(x)
}

#[derive(Debug)]
struct ConvBlock {
    conv: Conv,
    norm: GroupNormSiluLayer,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv: Conv::from_candle(&conv2d(cin, cout, 3, cfg, vb.pp("conv"))?),
            norm: GroupNormSiluLayer::build(groups, cout, 1e-5, vb.pp("norm"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.norm.forward(&self.conv.forward(x)?)
    }
}

/// Two conv blocks with the time embedding projected and added between them.
#[derive(Debug)]
struct TimedBlock {
    first: ConvBlock,
    time_proj: Option<Linear>,
    second: ConvBlock,
}

impl TimedBlock {
    fn new(cin: usize, cout: usize, cfg: &UNetConfig, timed: bool, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            first: ConvBlock::new(cin, cout, cfg.norm_groups, vb.pp("block1"))?,
            time_proj: if timed {
                Some(linear(cfg.time_embed_dim, cout, vb.pp("time_proj"))?)
            } else {
                None
            },
            second: ConvBlock::new(cout, cout, cfg.norm_groups, vb.pp("block2"))?,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.first.forward(x)?;
        if let Some(proj) = &self.time_proj {
            let t = proj
                .forward(temb)?
                .unsqueeze(D::Minus1)?
                .unsqueeze(D::Minus1)?;
            h = h.broadcast_add(&t)?;
        }
        self.second.forward(&h)
    }
}

#[derive(Debug)]
struct EncoderStage {
    block: TimedBlock,
    down: Conv,
}

#[derive(Debug)]
struct DecoderStage {
    up: UpConv,
    block: TimedBlock,
}

#[derive(Debug)]
struct UNet {
    config: UNetConfig,
    time_fc1: Linear,
    time_fc2: Linear,
    encoder: Vec<EncoderStage>,
    bottleneck: TimedBlock,
    decoder: Vec<DecoderStage>,
    head: Conv,
}

impl UNet {
    fn new(config: &UNetConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let chans = config.stage_channels();
        let time_fc1 = linear(
            config.time_sinusoid_dim,
            config.time_embed_dim,
            vb.pp("time.fc1"),
        )?;
        let time_fc2 = linear(
            config.time_embed_dim,
            config.time_embed_dim,
            vb.pp("time.fc2"),
        )?;
        let down_cfg = Conv2dConfig {
            padding: 1,
            stride: 2,
            ..Default::default()
        };
        let mut encoder = Vec::with_capacity(chans.len());
        let mut cin = config.in_channels;
        for (k, &c) in chans.iter().enumerate() {
            let vbk = vb.pp(format!("enc.{k}"));
            encoder.push(EncoderStage {
                block: TimedBlock::new(cin, c, config, true, vbk.clone())?,
                down: Conv::from_candle(&conv2d(c, c, 3, down_cfg, vbk.pp("down"))?),
            });
            cin = c;
        }
        let deepest = *chans.last().unwrap_or(&config.base_channels);
        let bottleneck = TimedBlock::new(deepest, deepest, config, true, vb.pp("mid"))?;
        let up_cfg = ConvTranspose2dConfig {
            stride: 2,
            ..Default::default()
        };
        let mut decoder = Vec::with_capacity(chans.len());
        let mut cin = deepest;
        for k in (0..chans.len()).rev() {
            let c = chans[k];
            let vbk = vb.pp(format!("dec.{k}"));
            decoder.push(DecoderStage {
                up: UpConv::from_candle(&conv_transpose2d(cin, c, 2, up_cfg, vbk.pp("up"))?),
                block: TimedBlock::new(2 * c, c, config, config.time_in_decoder, vbk)?,
            });
            cin = c;
        }
        let head = Conv::from_candle(&conv2d(
            chans[0],
            config.in_channels,
            3,
            Conv2dConfig {
                padding: 1,
                ..Default::default()
            },
            vb.pp("head"),
        )?);
        Ok(Self {
            config: config.clone(),
            time_fc1,
            time_fc2,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    fn embed_steps(
        &self,
        t: &[usize],
        batch: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Tensor> {
        let dim = self.config.time_sinusoid_dim;
        let mut data = Vec::with_capacity(batch * dim);
        for i in 0..batch {
            let step = if t.len() == 1 { t[0] } else { t[i] };
            data.extend(time_embedding(step as f64, dim)?);
        }
        let raw = Tensor::from_vec(data, (batch, dim), device)?.to_dtype(dtype)?;
        let h = silu(&self.time_fc1.forward(&raw)?)?;
        // The activated embedding feeds every per-stage projection.
        Ok(silu(&self.time_fc2.forward(&h)?)?)
    }

    fn forward(&self, x: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (batch, channels, h, w) = x.dims4()?;
        if channels != self.config.in_channels {
            return Err(Error::InvalidArgument(format!(
                "expected {} input channels, got {channels}",
                self.config.in_channels
            )));
        }
        if h != w {
            return Err(Error::InvalidArgument(format!(
                "expected square input, got {h}×{w}"
            )));
        }
        self.config.bottleneck_size(h)?;
        if t.len() != 1 && t.len() != batch {
            return Err(Error::InvalidArgument(format!(
                "{} steps given for a batch of {batch}",
                t.len()
            )));
        }
        if t.iter().any(|&s| s == 0) {
            return Err(Error::StepOutOfRange {
                t: 0,
                max: usize::MAX,
            });
        }
        let temb = self.embed_steps(t, batch, x.dtype(), x.device())?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut hcur = x.clone();
        for stage in &self.encoder {
            let feat = stage.block.forward(&hcur, &temb)?;
            hcur = stage.down.forward(&feat)?;
            skips.push(feat);
        }
        hcur = self.bottleneck.forward(&hcur, &temb)?;
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip per encoder stage");
            let up = stage.up.forward(&hcur)?;
            hcur = stage
                .block
                .forward(&Tensor::cat(&[&up, &skip], 1)?, &temb)?;
        }
        Ok(self.head.forward(&hcur)?)
    }
}

/// Channel layout of one resolution level, for reporting and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageInfo {
    pub stage: usize,
    pub channels: usize,
    pub spatial: usize,
    pub decoder_input_channels: usize,
}

/// `ε_θ`: U-Net weights bound to the schedule they were trained with.
pub struct DenoiserModel {
    config: UNetConfig,
    store: ParamStore,
    net: UNet,
    dtype: DType,
    device: Device,
    schedule_fingerprint: String,
}

impl std::fmt::Debug for DenoiserModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenoiserModel")
            .field("config", &self.config)
            .field("dtype", &self.dtype)
            .field("schedule_fingerprint", &self.schedule_fingerprint)
            .finish()
    }
}

impl DenoiserModel {
    pub fn build(
        config: &UNetConfig,
        seed: u64,
        schedule_fingerprint: impl Into<String>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let store = ParamStore::new(seed);
        let net = UNet::new(config, store.var_builder(dtype, device))?;
        Ok(Self {
            config: config.clone(),
            store,
            net,
            dtype,
            device: device.clone(),
            schedule_fingerprint: schedule_fingerprint.into(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn schedule_fingerprint(&self) -> &str {
        &self.schedule_fingerprint
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    pub fn stage_layout(&self, input: usize) -> Result<Vec<StageInfo>> {
        self.config.bottleneck_size(input)?;
        Ok(self
            .config
            .stage_channels()
            .into_iter()
            .enumerate()
            .map(|(k, c)| StageInfo {
                stage: k,
                channels: c,
                spatial: input >> k,
                decoder_input_channels: 2 * c,
            })
            .collect())
    }

    /// `ε_θ(x_t, t)` for a `N×C×H×W` batch.
    pub fn predict(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let x = x_t.to_dtype(self.dtype)?;
        self.net.forward(&x, t)
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.predict(x_t, t)
    }
}
