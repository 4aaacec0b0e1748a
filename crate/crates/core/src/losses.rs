//! Training objectives: the simplified noise-prediction loss, pixel-level
//! reconstruction, semantic consistency, structural similarity, and their
//! weighted total.
//!
//! Loss functions return scalar tensors so they can be backpropagated;
//! [`LossBundle`] carries the plain values for logging.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::conv::conv2d;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::schedule::{NoiseSchedule, VarianceMode};
use crate::tensor::{ensure_same_shape, scalar_f64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_pixel: f64,
    pub lambda_semantic: f64,
    pub lambda_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_pixel: 1.0,
            lambda_semantic: 5.0,
            lambda_ssim: 10.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_pixel: f64, lambda_semantic: f64, lambda_ssim: f64) -> Result<Self> {
        let w = Self {
            lambda_pixel,
            lambda_semantic,
            lambda_ssim,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_pixel", self.lambda_pixel),
            ("lambda_semantic", self.lambda_semantic),
            ("lambda_ssim", self.lambda_ssim),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// The four loss components and their weighted total for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub simple: f64,
    pub pixel: f64,
    pub semantic: f64,
    pub ssim_loss: f64,
    pub total: f64,
}

/// `L_total = L_simple + λ1·L_pixel + λ2·L_semantic + λ3·L_ssim`
pub fn loss_total(
    simple: f64,
    pixel: f64,
    semantic: f64,
    ssim_loss: f64,
    w: &LossWeights,
) -> LossBundle {
    LossBundle {
        simple,
        pixel,
        semantic,
        ssim_loss,
        total: simple
            + w.lambda_pixel * pixel
            + w.lambda_semantic * semantic
            + w.lambda_ssim * ssim_loss,
    }
}

/// Differentiable loss terms for one batch. Terms whose weight is zero may
/// be absent.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub simple: Tensor,
    pub pixel: Tensor,
    pub semantic: Option<Tensor>,
    pub ssim_loss: Option<Tensor>,
}

impl LossTerms {
    /// Weighted total as a graph node plus the logged values.
    pub fn combine(&self, w: &LossWeights) -> Result<(Tensor, LossBundle)> {
        let mut total = (&self.simple + self.pixel.affine(w.lambda_pixel, 0.0)?)?;
        if let Some(s) = &self.semantic {
            total = (total + s.affine(w.lambda_semantic, 0.0)?)?;
        }
        if let Some(s) = &self.ssim_loss {
            total = (total + s.affine(w.lambda_ssim, 0.0)?)?;
        }
        let opt = |t: &Option<Tensor>| -> Result<f64> {
            t.as_ref()
                .map(scalar_f64)
                .transpose()
                .map(|v| v.unwrap_or(0.0))
        };
        let bundle = loss_total(
            scalar_f64(&self.simple)?,
            scalar_f64(&self.pixel)?,
            opt(&self.semantic)?,
            opt(&self.ssim_loss)?,
            w,
        );
        Ok((total, bundle))
    }
}

fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure_same_shape(a, b)?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Mean squared noise-prediction error.
pub fn loss_simple(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    mse(eps_hat, eps)
}

/// Pixel-level reconstruction loss: the same noise-prediction MSE as
/// [`loss_simple`], kept separate so the weighted total mirrors its four
/// named components.
pub fn loss_pixel(eps: &Tensor, eps_hat: &Tensor) -> Result<Tensor> {
    mse(eps_hat, eps)
}

/// Feature-space MSE between the denoised estimate and the clean image.
/// Clean features are detached.
pub fn loss_semantic(
    extractor: &FeatureExtractor,
    x_hat0: &Tensor,
    x_clean: &Tensor,
) -> Result<Tensor> {
    let f_hat = extractor.extract(x_hat0)?;
    let f_clean = extractor.extract(&x_clean.detach())?.detach();
    mse(&f_hat, &f_clean)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BorderMode {
    #[default]
    Valid,
    Reflect,
}

/// How `c1` / `c2` enter the SSIM fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SsimConstants {
    /// Use `c1` and `c2` as given.
    #[default]
    Literal,
    /// Use `(c1·L)²` and `(c2·L)²` with `L` the dynamic range of the
    /// compared images.
    DynamicRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimConfig {
    pub window_size: usize,
    pub window_sigma: f64,
    pub c1: f64,
    pub c2: f64,
    #[serde(default)]
    pub border_mode: BorderMode,
    #[serde(default)]
    pub constants: SsimConstants,
    /// Map inputs from `[-1,1]` to `[0,1]` before comparing.
    #[serde(default = "yes")]
    pub map_to_unit: bool,
}

fn yes() -> bool {
    true
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 11,
            window_sigma: 1.5,
            c1: 0.01,
            c2: 0.03,
            border_mode: BorderMode::Valid,
            constants: SsimConstants::Literal,
            map_to_unit: true,
        }
    }
}

impl SsimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size % 2 == 0 {
            return Err(Error::InvalidArgument(format!(
                "SSIM window must be odd, got {}",
                self.window_size
            )));
        }
        if !(self.window_sigma > 0.0) {
            return Err(Error::InvalidArgument("SSIM sigma must be positive".into()));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn window(&self) -> Vec<f64> {
        let half = (self.window_size / 2) as f64;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.window_sigma * self.window_sigma)).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    /// Effective `(c1, c2)` for the fraction.
    pub fn effective_constants(&self) -> (f64, f64) {
        match self.constants {
            SsimConstants::Literal => (self.c1, self.c2),
            SsimConstants::DynamicRange => {
                let range = if self.map_to_unit { 1.0 } else { 2.0 };
                ((self.c1 * range).powi(2), (self.c2 * range).powi(2))
            }
        }
    }
}

fn reflect_indices(n: usize, pad: usize) -> Result<Vec<u32>> {
    if pad >= n {
        return Err(Error::InvalidArgument(format!(
            "reflect padding {pad} needs at least {} pixels, got {n}",
            pad + 1
        )));
    }
    let mut idx = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        idx.push(i as u32);
    }
    idx.extend((0..n).map(|i| i as u32));
    for i in 0..pad {
        idx.push((n - 2 - i) as u32);
    }
    Ok(idx)
}

/// Separable Gaussian filtering of a `M×1×H×W` stack.
fn gaussian_filter(x: &Tensor, taps: &Tensor, k: usize) -> Result<Tensor> {
    let col = taps.reshape((1, 1, k, 1))?;
    let row = taps.reshape((1, 1, 1, k))?;
    Ok(conv2d(&conv2d(x, &col, None, 1, 0)?, &row, None, 1, 0)?)
}

/// Per-window SSIM map, `N·C × 1 × H' × W'`.
pub fn ssim_map(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    cfg.validate()?;
    ensure_same_shape(x, y)?;
    let (x, y) = match x.rank() {
        4 => (x.clone(), y.clone()),
        3 => (x.unsqueeze(0)?, y.unsqueeze(0)?),
        r => {
            return Err(Error::InvalidArgument(format!(
                "expected rank 3 or 4 image, got {r}"
            )))
        }
    };
    let (n, c, h, w) = x.dims4()?;
    let k = cfg.window_size;
    let (mut x, mut y) = (x.reshape((n * c, 1, h, w))?, y.reshape((n * c, 1, h, w))?);
    if cfg.map_to_unit {
        x = x.affine(0.5, 0.5)?;
        y = y.affine(0.5, 0.5)?;
    }
    match cfg.border_mode {
        BorderMode::Valid => {
            if h < k || w < k {
                return Err(Error::InvalidArgument(format!(
                    "image {h}×{w} smaller than the {k}×{k} SSIM window"
                )));
            }
        }
        BorderMode::Reflect => {
            let pad = k / 2;
            let rows = Tensor::new(reflect_indices(h, pad)?, x.device())?;
            let cols = Tensor::new(reflect_indices(w, pad)?, x.device())?;
            x = x.index_select(&rows, 2)?.index_select(&cols, 3)?;
            y = y.index_select(&rows, 2)?.index_select(&cols, 3)?;
        }
    }
    let taps = Tensor::new(cfg.window(), x.device())?.to_dtype(x.dtype())?;
    // All five local moments in one filtering pass.
    let m = n * c;
    let stacked = Tensor::cat(&[&x, &y, &x.sqr()?, &y.sqr()?, &(&x * &y)?], 0)?;
    let moments = gaussian_filter(&stacked, &taps, k)?;
    let part = |i: usize| moments.narrow(0, i * m, m);
    let (mu_x, mu_y) = (part(0)?, part(1)?);
    let xx = (part(2)? - mu_x.sqr()?)?;
    let yy = (part(3)? - mu_y.sqr()?)?;
    let xy = (part(4)? - (&mu_x * &mu_y)?)?;
    let (c1, c2) = cfg.effective_constants();
    let num = ((&mu_x * &mu_y)?.affine(2.0, c1)? * xy.affine(2.0, c2)?)?;
    let den = ((mu_x.sqr()? + mu_y.sqr()?)?.affine(1.0, c1)? * (xx + yy)?.affine(1.0, c2)?)?;
    Ok((num / den)?)
}

/// Mean SSIM index over windows and channels.
pub fn ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    Ok(ssim_map(x, y, cfg)?.mean_all()?)
}

/// `1 − SSIM(x, y)`.
pub fn loss_ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    Ok(ssim(x, y, cfg)?.affine(-1.0, 1.0)?)
}

/// Per-step weight of the noise MSE inside the variational bound:
/// `β_t² / (2 σ_t² α_t (1 − ᾱ_t))`.
pub fn vlb_weight(s: &NoiseSchedule, t: usize, mode: VarianceMode) -> Result<f64> {
    let c = s.coeffs_at(t, mode)?;
    if c.posterior_variance <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "variance is zero at t={t}; weight undefined"
        )));
    }
    let alpha = s.alpha(t)?;
    let alpha_bar = s.alpha_bar(t)?;
    Ok(c.beta_t * c.beta_t / (2.0 * c.posterior_variance * alpha * (1.0 - alpha_bar)))
}

/// Peak signal-to-noise ratio in dB between two `[-1,1]` images, measured
/// on the `[0,1]` scale.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    ensure_same_shape(x, y)?;
    let mse = scalar_f64(
        &((x - y)?
            .affine(0.5, 0.0)?
            .sqr()?
            .to_dtype(DType::F64)?
            .mean_all()?),
    )?;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}
