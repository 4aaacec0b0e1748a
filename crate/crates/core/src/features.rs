//! Frozen feature extractors used by the semantic-consistency loss.
//!
//! Two implementations sit behind [`FeatureExtractor`]:
//!
//! * a residual backbone truncated after its fourth stage (1024 channels,
//!   1/16 resolution), loaded from a local safetensors file, and
//! * a fixed-seed three-layer strided conv stack (32 channels, 1/4
//!   resolution) used in tests and desk-scale runs.
//!
//! Weights are plain tensors rather than variables, so no optimizer or
//! backward pass can ever update them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{
    batch_norm, BatchNorm, BatchNormConfig, Conv2d, Conv2dConfig, ModuleT, VarBuilder,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::Conv;
use crate::error::{Error, Result};

pub const STUB_CHANNELS: usize = 32;
pub const STUB_REDUCTION: usize = 4;
pub const BACKBONE_CHANNELS: usize = 1024;
pub const BACKBONE_REDUCTION: usize = 16;

/// ImageNet statistics the backbone expects after mapping `[-1,1] → [0,1]`.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    PretrainedBackboneStage4,
    DeterministicStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    #[serde(default)]
    pub backbone_path: Option<PathBuf>,
    #[serde(default)]
    pub stub_seed: u64,
    #[serde(default = "default_mean")]
    pub mean: [f64; 3],
    #[serde(default = "default_std")]
    pub std: [f64; 3],
}

fn default_mean() -> [f64; 3] {
    IMAGENET_MEAN
}

fn default_std() -> [f64; 3] {
    IMAGENET_STD
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            backbone_path: None,
            stub_seed: 0,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

/// What a checkpoint records about the extractor used in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorDescriptor {
    pub kind: ExtractorKind,
    pub channels: usize,
    pub reduction: usize,
    pub stub_seed: Option<u64>,
    pub backbone_path: Option<PathBuf>,
    pub mean: Option<[f64; 3]>,
    pub std: Option<[f64; 3]>,
}

struct StubNet {
    layers: Vec<(Conv, bool)>,
}

impl StubNet {
    fn new(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = [
            (3usize, 16usize, 2usize),
            (16, STUB_CHANNELS, 2),
            (STUB_CHANNELS, STUB_CHANNELS, 1),
        ];
        let mut layers = Vec::with_capacity(specs.len());
        for (i, &(cin, cout, stride)) in specs.iter().enumerate() {
            let fan_in = (cin * 9) as f64;
            let w = crate::tensor::gaussian((cout, cin, 3, 3), DType::F64, device, &mut rng)?
                .affine(1.0 / fan_in.sqrt(), 0.0)?
                .to_dtype(dtype)?;
            let b = crate::tensor::uniform(cout, -0.1, 0.1, dtype, device, &mut rng)?;
            let cfg = Conv2dConfig {
                padding: 1,
                stride,
                ..Default::default()
            };
            layers.push((
                Conv::from_candle(&Conv2d::new(w, Some(b), cfg)),
                i + 1 < specs.len(),
            ));
        }
        Ok(Self { layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (conv, act) in &self.layers {
            h = conv.forward(&h)?;
            if *act {
                h = h.tanh()?;
            }
        }
        Ok(h)
    }

    fn weights(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|(c, _)| {
                let mut v = vec![c.weight().clone()];
                v.extend(c.bias().cloned());
                v
            })
            .collect()
    }
}

fn conv_bn(
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    vb: &VarBuilder,
    conv: &str,
    bn: &str,
) -> Result<(Conv, BatchNorm)> {
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    let c = candle_nn::conv2d_no_bias(cin, cout, k, cfg, vb.pp(conv))?;
    let n = batch_norm(cout, BatchNormConfig::default(), vb.pp(bn))?;
    Ok((Conv::from_candle(&c), n))
}

struct Bottleneck {
    c1: (Conv, BatchNorm),
    c2: (Conv, BatchNorm),
    c3: (Conv, BatchNorm),
    downsample: Option<(Conv, BatchNorm)>,
}

impl Bottleneck {
    fn new(cin: usize, width: usize, stride: usize, vb: VarBuilder) -> Result<Self> {
        let cout = width * 4;
        let downsample = if stride != 1 || cin != cout {
            Some(conv_bn(
                cin,
                cout,
                1,
                stride,
                0,
                &vb,
                "downsample.0",
                "downsample.1",
            )?)
        } else {
            None
        };
        Ok(Self {
            c1: conv_bn(cin, width, 1, 1, 0, &vb, "conv1", "bn1")?,
            c2: conv_bn(width, width, 3, stride, 1, &vb, "conv2", "bn2")?,
            c3: conv_bn(width, cout, 1, 1, 0, &vb, "conv3", "bn3")?,
            downsample,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let apply = |cb: &(Conv, BatchNorm), x: &Tensor| -> Result<Tensor> {
            Ok(cb.1.forward_t(&cb.0.forward(x)?, false)?)
        };
        let h = apply(&self.c1, x)?.relu()?;
        let h = apply(&self.c2, &h)?.relu()?;
        let h = apply(&self.c3, &h)?;
        let shortcut = match &self.downsample {
            Some(ds) => apply(ds, x)?,
            None => x.clone(),
        };
        Ok((h + shortcut)?.relu()?)
    }
}

/// 3×3 / stride-2 / pad-1 max pooling built from strided views so it stays
/// differentiable. Inputs must be non-negative (post-ReLU), which makes zero
/// padding equivalent to −∞ padding.
fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let padded = x
        .pad_with_zeros(2, 1, 2 * ho + 1 - h)?
        .pad_with_zeros(3, 1, 2 * wo + 1 - w)?;
    let mut out: Option<Tensor> = None;
    for di in 0..3 {
        for dj in 0..3 {
            let (n, c, _, _) = padded.dims4()?;
            let view = padded
                .narrow(2, di, 2 * ho)?
                .narrow(3, dj, 2 * wo)?
                .reshape((n, c, ho, 2, wo, 2))?
                .narrow(3, 0, 1)?
                .narrow(5, 0, 1)?
                .reshape((n, c, ho, wo))?;
            out = Some(match out {
                None => view,
                Some(acc) => acc.maximum(&view)?,
            });
        }
    }
    Ok(out.expect("nine taps"))
}

/// Residual-50 layout up to and including stage four (`layer3`).
struct BackboneStage4 {
    stem: (Conv, BatchNorm),
    blocks: Vec<Bottleneck>,
    mean: Tensor,
    std: Tensor,
}

impl BackboneStage4 {
    fn new(vb: VarBuilder, mean: [f64; 3], std: [f64; 3]) -> Result<Self> {
        let stem = conv_bn(3, 64, 7, 2, 3, &vb, "conv1", "bn1")?;
        let mut blocks = Vec::new();
        let mut cin = 64;
        for (layer, &(width, count, stride)) in
            [(64usize, 3usize, 1usize), (128, 4, 2), (256, 6, 2)]
                .iter()
                .enumerate()
        {
            for i in 0..count {
                let vbi = vb.pp(format!("layer{}.{i}", layer + 1));
                blocks.push(Bottleneck::new(
                    cin,
                    width,
                    if i == 0 { stride } else { 1 },
                    vbi,
                )?);
                cin = width * 4;
            }
        }
        let dev = vb.device();
        let dtype = vb.dtype();
        Ok(Self {
            stem,
            blocks,
            mean: Tensor::new(&mean, dev)?
                .to_dtype(dtype)?
                .reshape((1, 3, 1, 1))?,
            std: Tensor::new(&std, dev)?
                .to_dtype(dtype)?
                .reshape((1, 3, 1, 1))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let unit = x.affine(0.5, 0.5)?;
        let normed = unit.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let h = self
            .stem
            .1
            .forward_t(&self.stem.0.forward(&normed)?, false)?
            .relu()?;
        let mut h = max_pool_3x3_s2(&h)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

enum Inner {
    Stub(StubNet),
    Backbone(Box<BackboneStage4>),
}

/// Frozen `φ(·)` used by the semantic loss.
pub struct FeatureExtractor {
    inner: Inner,
    descriptor: ExtractorDescriptor,
    dtype: DType,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("descriptor", &self.descriptor)
            .finish()
    }
}

impl FeatureExtractor {
    pub fn stub(seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            inner: Inner::Stub(StubNet::new(seed, dtype, device)?),
            dtype,
            descriptor: ExtractorDescriptor {
                kind: ExtractorKind::DeterministicStub,
                channels: STUB_CHANNELS,
                reduction: STUB_REDUCTION,
                stub_seed: Some(seed),
                backbone_path: None,
                mean: None,
                std: None,
            },
        })
    }

    /// Backbone from an already-populated var builder (tests use random
    /// initialization to check geometry).
    pub fn backbone_from_vb(
        vb: VarBuilder,
        mean: [f64; 3],
        std: [f64; 3],
        path: Option<PathBuf>,
    ) -> Result<Self> {
        Ok(Self {
            dtype: vb.dtype(),
            inner: Inner::Backbone(Box::new(BackboneStage4::new(vb, mean, std)?)),
            descriptor: ExtractorDescriptor {
                kind: ExtractorKind::PretrainedBackboneStage4,
                channels: BACKBONE_CHANNELS,
                reduction: BACKBONE_REDUCTION,
                stub_seed: None,
                backbone_path: path,
                mean: Some(mean),
                std: Some(std),
            },
        })
    }

    /// Loads backbone weights (torchvision naming) from a safetensors file.
    pub fn backbone(
        path: &Path,
        mean: [f64; 3],
        std: [f64; 3],
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let tensors: HashMap<String, Tensor> = candle_core::safetensors::load(path, device)?;
        // Constants are materialized as detached copies so they never join
        // an autograd graph.
        let vb = VarBuilder::from_tensors(tensors, dtype, device);
        Self::backbone_from_vb(vb, mean, std, Some(path.to_path_buf()))
    }

    /// Backbone when configured and present, otherwise the stub.
    pub fn from_config(cfg: &FeatureConfig, dtype: DType, device: &Device) -> Result<Self> {
        match &cfg.backbone_path {
            Some(p) if p.exists() => Self::backbone(p, cfg.mean, cfg.std, dtype, device),
            Some(p) => {
                log::warn!(
                    "backbone weights {} not found; using deterministic stub extractor",
                    p.display()
                );
                Self::stub(cfg.stub_seed, dtype, device)
            }
            None => Self::stub(cfg.stub_seed, dtype, device),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn kind(&self) -> ExtractorKind {
        self.descriptor.kind
    }

    pub fn descriptor(&self) -> &ExtractorDescriptor {
        &self.descriptor
    }

    /// Smallest accepted spatial size.
    pub fn min_size(&self) -> usize {
        self.descriptor.reduction
    }

    /// Feature map for a `C×H×W` image or `N×C×H×W` batch.
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        let batched = match x.rank() {
            4 => x.clone(),
            3 => x.unsqueeze(0)?,
            r => {
                return Err(Error::InvalidArgument(format!(
                    "expected rank 3 or 4 image, got {r}"
                )))
            }
        };
        let (_, c, h, w) = batched.dims4()?;
        if c != 3 {
            return Err(Error::InvalidArgument(format!(
                "expected 3 channels, got {c}"
            )));
        }
        if h < self.min_size() || w < self.min_size() {
            return Err(Error::InvalidArgument(format!(
                "input {h}×{w} smaller than extractor minimum {}",
                self.min_size()
            )));
        }
        let out = match &self.inner {
            Inner::Stub(net) => net.forward(&batched)?,
            Inner::Backbone(net) => net.forward(&batched)?,
        };
        if x.rank() == 3 {
            Ok(out.squeeze(0)?)
        } else {
            Ok(out)
        }
    }

    /// Copies of the stub weights, for frozen-parameter checks.
    pub fn stub_weights(&self) -> Option<Vec<Tensor>> {
        match &self.inner {
            Inner::Stub(net) => Some(net.weights()),
            Inner::Backbone(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{gaussian, max_abs_diff, uniform};

    fn image(seed: u64, size: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(
            (3, size, size),
            -1.0,
            1.0,
            DType::F64,
            &Device::Cpu,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn stub_geometry_and_determinism() {
        let fe = FeatureExtractor::stub(0, DType::F64, &Device::Cpu).unwrap();
        let x = image(1, 32);
        let a = fe.extract(&x).unwrap();
        assert_eq!(a.dims(), &[32, 8, 8]);
        let b = fe.extract(&x).unwrap();
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.0);
        assert!(fe.extract(&image(1, 2)).is_err());
    }

    #[test]
    fn stub_seeds() {
        let a = FeatureExtractor::stub(0, DType::F64, &Device::Cpu).unwrap();
        let b = FeatureExtractor::stub(0, DType::F64, &Device::Cpu).unwrap();
        let c = FeatureExtractor::stub(1, DType::F64, &Device::Cpu).unwrap();
        let (wa, wb, wc) = (
            a.stub_weights().unwrap(),
            b.stub_weights().unwrap(),
            c.stub_weights().unwrap(),
        );
        for i in 0..wa.len() {
            assert_eq!(max_abs_diff(&wa[i], &wb[i]).unwrap(), 0.0);
        }
        assert!(max_abs_diff(&wa[0], &wc[0]).unwrap() > 0.0);
    }

    #[test]
    fn stub_is_locally_lipschitz() {
        // Empirical max-norm Lipschitz bound on random probes; the constant
        // is measured from these seeds and fixed here.
        let fe = FeatureExtractor::stub(0, DType::F64, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut worst: f64 = 0.0;
        for i in 0..20 {
            let x = image(100 + i, 16);
            let eta = 1e-3;
            let d = uniform((3, 16, 16), -eta, eta, DType::F64, &Device::Cpu, &mut rng).unwrap();
            let fx = fe.extract(&x).unwrap();
            let fy = fe.extract(&(&x + &d).unwrap()).unwrap();
            worst = worst.max(max_abs_diff(&fx, &fy).unwrap() / eta);
        }
        assert!(worst.is_finite() && worst < 10.0, "K = {worst}");
    }

    #[test]
    fn out_of_range_inputs_stay_finite() {
        let fe = FeatureExtractor::stub(3, DType::F64, &Device::Cpu).unwrap();
        let x = (image(2, 16) * 50.0).unwrap();
        crate::tensor::ensure_finite(&fe.extract(&x).unwrap(), "features").unwrap();
    }

    #[test]
    fn missing_backbone_falls_back_to_stub() {
        let cfg = FeatureConfig {
            backbone_path: Some("/nonexistent/resnet50.safetensors".into()),
            ..Default::default()
        };
        let fe = FeatureExtractor::from_config(&cfg, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(fe.kind(), ExtractorKind::DeterministicStub);
        assert!(FeatureExtractor::backbone(
            Path::new("/nonexistent/x.safetensors"),
            IMAGENET_MEAN,
            IMAGENET_STD,
            DType::F32,
            &Device::Cpu
        )
        .is_err());
    }

    #[test]
    fn max_pool_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gaussian((1, 2, 7, 6), DType::F64, &Device::Cpu, &mut rng)
            .unwrap()
            .relu()
            .unwrap();
        let y = max_pool_3x3_s2(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 3]);
        let xs = x.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        let ys = y.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..3 {
                    let mut m = 0.0f64;
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (r, q) = (2 * i + di, 2 * j + dj);
                            if r >= 1 && q >= 1 && r - 1 < 7 && q - 1 < 6 {
                                m = m.max(xs[c][r - 1][q - 1]);
                            }
                        }
                    }
                    assert_eq!(ys[c][i][j], m);
                }
            }
        }
    }

    #[test]
    fn backbone_stage4_geometry() {
        let store = ParamStore::new(0);
        let fe = FeatureExtractor::backbone_from_vb(
            store.var_builder(DType::F32, &Device::Cpu),
            IMAGENET_MEAN,
            IMAGENET_STD,
            None,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = uniform(
            (1, 3, 256, 256),
            -1.0,
            1.0,
            DType::F32,
            &Device::Cpu,
            &mut rng,
        )
        .unwrap();
        let f = fe.extract(&x).unwrap();
        assert_eq!(f.dims(), &[1, 1024, 16, 16]);
    }
}
