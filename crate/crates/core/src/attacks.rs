//! Budgeted perturbation generators used to build adversarial/clean pairs.
//!
//! [`gradient_attack`] runs projected gradient ascent on any differentiable
//! surrogate. Two surrogates ship with the crate: feature-space distance
//! under a frozen extractor, and a "decoy" objective that makes a
//! normalized-cross-correlation matcher prefer a displaced window.
//! [`structured_perturbation`] produces non-gradient perturbation families.

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::tensor::{ensure_finite, scalar_f64, to_vec_f64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
    Linf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationBudget {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl PerturbationBudget {
    pub fn linf(epsilon: f64, steps: usize) -> Self {
        Self {
            norm: Norm::Linf,
            epsilon,
            steps,
            step_size: epsilon / 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument(
                "attack needs at least one step".into(),
            ));
        }
        if !(self.step_size > 0.0) && self.epsilon > 0.0 {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructuredKind {
    Lowfreq,
    Checker,
    Patch,
    Gaussian,
}

/// Provenance of one adversarial example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairMeta {
    pub generator: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub norm: Option<Norm>,
    pub epsilon: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub period: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct AdversarialPair {
    pub clean: Tensor,
    pub adversarial: Tensor,
    pub meta: PairMeta,
    /// Surrogate value after each accepted ascent step (gradient attacks).
    pub history: Vec<f64>,
}

impl AdversarialPair {
    pub fn perturbation(&self) -> Result<Tensor> {
        Ok((&self.adversarial - &self.clean)?)
    }
}

fn norm_of(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::L1 => v.iter().map(|x| x.abs()).sum(),
        Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
    }
}

/// p-norm of a perturbation, per image for batched input.
pub fn perturbation_norms(delta: &Tensor, norm: Norm) -> Result<Vec<f64>> {
    let items = if delta.rank() == 4 { delta.dim(0)? } else { 1 };
    let v = to_vec_f64(delta)?;
    let per = v.len() / items.max(1);
    Ok(v.chunks(per.max(1)).map(|c| norm_of(c, norm)).collect())
}

/// Maps a perturbation into the budget ball: elementwise clamp for `linf`,
/// radial rescaling for `l2` and `l1`. Batched input is handled per image.
pub fn project_budget(delta: &Tensor, b: &PerturbationBudget) -> Result<Tensor> {
    let eps = b.epsilon;
    match b.norm {
        Norm::Linf => Ok(delta.clamp(-eps, eps)?),
        Norm::L1 | Norm::L2 => {
            let norms = perturbation_norms(delta, b.norm)?;
            let scales: Vec<f64> = norms
                .iter()
                .map(|&n| if n > eps { eps / n } else { 1.0 })
                .collect();
            let shape: Vec<usize> = if delta.rank() == 4 {
                vec![scales.len(), 1, 1, 1]
            } else {
                vec![1; delta.rank()]
            };
            let s = Tensor::from_vec(scales, shape, delta.device())?.to_dtype(delta.dtype())?;
            Ok(delta.broadcast_mul(&s)?)
        }
    }
}

/// Clamps `x + delta` into `[-1, 1]` and returns the realized perturbation.
fn realize(x: &Tensor, delta: &Tensor) -> Result<Tensor> {
    Ok(((x + delta)?.clamp(-1.0, 1.0)? - x)?)
}

/// Monotone projected gradient ascent on `loss_fn` within the budget ball.
///
/// Starts from a seeded random point in the ball. A step that would lower
/// the surrogate is retried at half the step size (up to four times) and
/// otherwise skipped, so the recorded history never decreases.
pub fn gradient_attack<F>(
    loss_fn: F,
    x: &Tensor,
    b: &PerturbationBudget,
    seed: u64,
) -> Result<AdversarialPair>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    b.validate()?;
    let meta = PairMeta {
        generator: "gradient".into(),
        norm: Some(b.norm),
        epsilon: b.epsilon,
        seed,
        period: None,
    };
    if b.epsilon == 0.0 {
        return Ok(AdversarialPair {
            clean: x.clone(),
            adversarial: x.clone(),
            meta,
            history: Vec::new(),
        });
    }
    let x = x.detach();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = crate::tensor::uniform(x.shape(), -1.0, 1.0, x.dtype(), x.device(), &mut rng)?;
    let n = norm_of(&to_vec_f64(&init)?, b.norm);
    let init = init.affine(if n > 0.0 { 0.5 * b.epsilon / n } else { 0.0 }, 0.0)?;
    let mut delta = realize(&x, &init)?;
    let eval = |d: &Tensor| -> Result<f64> { scalar_f64(&loss_fn(&(&x + d)?)?) };
    let mut current = eval(&delta)?;
    let mut history = vec![current];
    for step in 0..b.steps {
        let var = Var::from_tensor(&delta)?;
        let adv = (&x + var.as_tensor())?;
        let loss = loss_fn(&adv)?;
        let grads = loss.backward()?;
        let g = grads
            .get(var.as_tensor())
            .cloned()
            .unwrap_or(delta.zeros_like()?);
        ensure_finite(&g, &format!("attack gradient at step {step}"))
            .map_err(|_| Error::NonFinite(format!("attack gradient at step {step}")))?;
        let direction = match b.norm {
            Norm::Linf => g.sign()?,
            Norm::L2 | Norm::L1 => {
                let n = norm_of(&to_vec_f64(&g)?, Norm::L2);
                if n == 0.0 {
                    g.zeros_like()?
                } else {
                    g.affine(1.0 / n, 0.0)?
                }
            }
        };
        let mut size = b.step_size;
        for _ in 0..5 {
            let cand = realize(
                &x,
                &project_budget(&(&delta + direction.affine(size, 0.0)?)?, b)?,
            )?;
            let value = eval(&cand)?;
            if value >= current {
                delta = cand;
                current = value;
                break;
            }
            size *= 0.5;
        }
        history.push(current);
    }
    Ok(AdversarialPair {
        clean: x.clone(),
        adversarial: (&x + &delta)?,
        meta,
        history,
    })
}

/// Non-gradient perturbation families; `strength` is the max-norm of `δ`
/// (for `gaussian`, `δ ~ N(0, (strength/3)²)` clipped to `±strength`).
pub fn structured_perturbation(
    x: &Tensor,
    kind: StructuredKind,
    strength: f64,
    seed: u64,
) -> Result<AdversarialPair> {
    if !(strength >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "strength must be >= 0, got {strength}"
        )));
    }
    let (c, h, w) = x.dims3()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut period = None;
    let delta: Vec<f64> = match kind {
        StructuredKind::Gaussian => {
            let sigma = strength / 3.0;
            (0..c * h * w)
                .map(|_| {
                    (sigma * rng.sample::<f64, _>(rand_distr::StandardNormal))
                        .clamp(-strength, strength)
                })
                .collect()
        }
        StructuredKind::Checker => {
            let p = rng.random_range(1..=4usize);
            period = Some(p);
            let signs: Vec<f64> = (0..c)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let mut v = Vec::with_capacity(c * h * w);
            for sign in signs {
                for i in 0..h {
                    for j in 0..w {
                        let parity = if (i / p + j / p) % 2 == 0 { 1.0 } else { -1.0 };
                        v.push(sign * parity * strength);
                    }
                }
            }
            v
        }
        StructuredKind::Lowfreq => {
            let mut v = vec![0.0; c * h * w];
            for ch in 0..c {
                for _ in 0..3 {
                    let fx = rng.random_range(0.5..2.0) / w as f64;
                    let fy = rng.random_range(0.5..2.0) / h as f64;
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    let amp = rng.random_range(-1.0..1.0);
                    for i in 0..h {
                        for j in 0..w {
                            let arg =
                                std::f64::consts::TAU * (fx * j as f64 + fy * i as f64) + phase;
                            v[ch * h * w + i * w + j] += amp * arg.sin();
                        }
                    }
                }
            }
            let peak = norm_of(&v, Norm::Linf);
            if peak > 0.0 {
                v.iter_mut().for_each(|a| *a *= strength / peak);
            }
            v
        }
        StructuredKind::Patch => {
            let side = (h.min(w) / 4).max(1);
            let top = rng.random_range(0..=h - side);
            let left = rng.random_range(0..=w - side);
            let mut v = vec![0.0; c * h * w];
            for ch in 0..c {
                for i in top..top + side {
                    for j in left..left + side {
                        v[ch * h * w + i * w + j] = strength * rng.random_range(-1.0..=1.0);
                    }
                }
            }
            v
        }
    };
    let delta = Tensor::from_vec(delta, (c, h, w), x.device())?.to_dtype(x.dtype())?;
    let adversarial = (x + realize(x, &delta)?)?;
    Ok(AdversarialPair {
        clean: x.clone(),
        adversarial,
        meta: PairMeta {
            generator: format!("structured-{}", kind_name(kind)),
            norm: Some(Norm::Linf),
            epsilon: strength,
            seed,
            period,
        },
        history: Vec::new(),
    })
}

fn kind_name(kind: StructuredKind) -> &'static str {
    match kind {
        StructuredKind::Lowfreq => "lowfreq",
        StructuredKind::Checker => "checker",
        StructuredKind::Patch => "patch",
        StructuredKind::Gaussian => "gaussian",
    }
}

/// `‖φ(x′) − φ(x)‖²` (mean over feature elements) against a fixed clean image.
pub fn feature_surrogate<'a>(
    extractor: &'a FeatureExtractor,
    clean: &Tensor,
) -> Result<impl Fn(&Tensor) -> Result<Tensor> + 'a> {
    let target = extractor.extract(&clean.detach())?.detach();
    Ok(move |x: &Tensor| -> Result<Tensor> {
        Ok((extractor.extract(x)? - &target)?.sqr()?.mean_all()?)
    })
}

/// Zero-mean normalized cross-correlation between `template` (`C×h×w`) and
/// the window of `search` whose top-left corner is `(row, col)`.
pub fn ncc_window(template: &Tensor, search: &Tensor, row: usize, col: usize) -> Result<Tensor> {
    let (_, th, tw) = template.dims3()?;
    let win = search.narrow(1, row, th)?.narrow(2, col, tw)?;
    let t = template.broadcast_sub(&template.mean_all()?)?;
    let s = win.broadcast_sub(&win.mean_all()?)?;
    let num = (&t * &s)?.sum_all()?;
    let den = ((t.sqr()?.sum_all()? * s.sqr()?.sum_all()?)? + 1e-12)?.sqrt()?;
    Ok((num / den)?)
}

/// Rewards NCC at the decoy window and penalizes it at the true window.
pub fn decoy_surrogate(
    template: &Tensor,
    true_pos: (usize, usize),
    decoy_pos: (usize, usize),
) -> impl Fn(&Tensor) -> Result<Tensor> + '_ {
    move |x: &Tensor| -> Result<Tensor> {
        let decoy = ncc_window(template, x, decoy_pos.0, decoy_pos.1)?;
        let truth = ncc_window(template, x, true_pos.0, true_pos.1)?;
        Ok((decoy - truth)?)
    }
}

/// Which surrogate a gradient generator maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Surrogate {
    /// Feature-space distance under the frozen extractor.
    #[default]
    Feature,
    /// Displace the NCC peak of the crop's own central region.
    Decoy,
    /// Decoy for search crops, feature distance for template crops.
    Auto,
}

/// Pair-generation settings recorded in dataset manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttackConfig {
    Gradient {
        #[serde(default)]
        surrogate: Surrogate,
        budget: PerturbationBudget,
        /// Decoy displacement in crop pixels.
        #[serde(default = "default_decoy_offset")]
        decoy_offset: usize,
    },
    Structured {
        kind: StructuredKind,
        strength: f64,
    },
}

fn default_decoy_offset() -> usize {
    8
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig::Gradient {
            surrogate: Surrogate::Feature,
            budget: PerturbationBudget::linf(0.06, 10),
            decoy_offset: default_decoy_offset(),
        }
    }
}

/// Decoy attack on a search crop centered on the target: the template is
/// the crop's own central half and the decoy window sits `offset` pixels
/// away in a seeded direction.
pub fn self_decoy_attack(
    x: &Tensor,
    b: &PerturbationBudget,
    offset: usize,
    seed: u64,
) -> Result<AdversarialPair> {
    let (_, h, w) = x.dims3()?;
    let (th, tw) = (h / 2, w / 2);
    let center = ((h - th) / 2, (w - tw) / 2);
    let template = x.narrow(1, center.0, th)?.narrow(2, center.1, tw)?.detach();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let clampi = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
    let decoy = (
        clampi(center.0 as f64 + offset as f64 * angle.sin(), h - th),
        clampi(center.1 as f64 + offset as f64 * angle.cos(), w - tw),
    );
    let mut pair = gradient_attack(decoy_surrogate(&template, center, decoy), x, b, seed)?;
    pair.meta.generator = "gradient-decoy".into();
    Ok(pair)
}

impl AttackConfig {
    /// Produces the adversarial counterpart of one crop.
    pub fn generate(
        &self,
        x: &Tensor,
        is_search: bool,
        extractor: &FeatureExtractor,
        seed: u64,
    ) -> Result<AdversarialPair> {
        match *self {
            AttackConfig::Structured { kind, strength } => {
                structured_perturbation(x, kind, strength, seed)
            }
            AttackConfig::Gradient {
                surrogate,
                budget,
                decoy_offset,
            } => {
                let decoy = match surrogate {
                    Surrogate::Decoy => true,
                    Surrogate::Feature => false,
                    Surrogate::Auto => is_search,
                };
                if decoy {
                    self_decoy_attack(x, &budget, decoy_offset, seed)
                } else {
                    let f = feature_surrogate(extractor, x)?;
                    let mut pair = gradient_attack(f, x, &budget, seed)?;
                    pair.meta.generator = "gradient-feature".into();
                    Ok(pair)
                }
            }
        }
    }

    pub fn budget(&self) -> Option<PerturbationBudget> {
        match self {
            AttackConfig::Gradient { budget, .. } => Some(*budget),
            AttackConfig::Structured { .. } => None,
        }
    }
}

/// Stable per-item seed derived from a base seed and item coordinates.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0xcbf2_9ce4_8422_2325;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = h.wrapping_mul(0x1000_0000_01b3);
        h ^= h >> 29;
    }
    h
}
