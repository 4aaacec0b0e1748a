//! Closed-form forward noising and the ancestral reverse step.
//!
//! Every function accepts either a single `C×H×W` image or an `N×C×H×W`
//! batch. Steps are 1-based; `t` holds either one step shared by the whole
//! batch or one step per batch item.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, VarianceMode};
use crate::tensor::ensure_same_shape;

/// `ᾱ_t` at or below this is treated as fully degenerate when inverting
/// the forward process.
pub const MIN_ALPHA_BAR: f64 = 1e-12;

/// Anything that predicts the injected noise `ε` from `(x_t, t)`.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;
}

/// Broadcastable per-item coefficient tensor (`[N,1,1,1]` or `[1,1,1]`).
fn per_item(
    x: &Tensor,
    t: &[usize],
    s: &NoiseSchedule,
    f: impl Fn(usize) -> f64,
) -> Result<Tensor> {
    let batch = match x.rank() {
        4 => x.dim(0)?,
        3 => 1,
        r => {
            return Err(Error::InvalidArgument(format!(
                "expected a C×H×W image or N×C×H×W batch, got rank {r}"
            )))
        }
    };
    if t.len() != 1 && t.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} steps given for a batch of {batch}",
            t.len()
        )));
    }
    for &step in t {
        s.check_step(step)?;
    }
    let values: Vec<f64> = if t.len() == 1 {
        vec![f(t[0]); batch]
    } else {
        t.iter().map(|&step| f(step)).collect()
    };
    let shape: Vec<usize> = if x.rank() == 4 {
        vec![batch, 1, 1, 1]
    } else {
        vec![1, 1, 1]
    };
    Ok(Tensor::from_vec(values, shape, x.device())?.to_dtype(x.dtype())?)
}

/// `x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · ε`
pub fn q_sample(x0: &Tensor, t: &[usize], eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    ensure_same_shape(x0, eps)?;
    let a = per_item(x0, t, s, |k| s.alpha_bar_at(k).sqrt())?;
    let b = per_item(x0, t, s, |k| (1.0 - s.alpha_bar_at(k)).sqrt())?;
    Ok((x0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// One forward transition: `x_t = √(1−β_t) · x_{t−1} + √β_t · ε`.
pub fn q_sample_step(
    x_prev: &Tensor,
    t: &[usize],
    eps: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    ensure_same_shape(x_prev, eps)?;
    let a = per_item(x_prev, t, s, |k| s.alpha_at(k).sqrt())?;
    let b = per_item(x_prev, t, s, |k| s.beta_at(k).sqrt())?;
    Ok((x_prev.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// Inverts [`q_sample`] given a noise estimate:
/// `x̂0 = (x_t − √(1−ᾱ_t) · ε̂) / √ᾱ_t`.
pub fn predict_x0_from_eps(
    x_t: &Tensor,
    t: &[usize],
    eps_hat: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    ensure_same_shape(x_t, eps_hat)?;
    for &step in t {
        s.check_step(step)?;
        let alpha_bar = s.alpha_bar_at(step);
        if alpha_bar <= MIN_ALPHA_BAR {
            return Err(Error::Degenerate { t: step, alpha_bar });
        }
    }
    let a = per_item(x_t, t, s, |k| s.alpha_bar_at(k).sqrt().recip())?;
    let b = per_item(x_t, t, s, |k| {
        ((1.0 - s.alpha_bar_at(k)) / s.alpha_bar_at(k)).sqrt()
    })?;
    Ok((x_t.broadcast_mul(&a)? - eps_hat.broadcast_mul(&b)?)?)
}

/// Mean of the true reverse posterior `q(x_{t−1} | x_t, x0)`:
///
/// `μ̃_t = √ᾱ_{t−1} β_t / (1−ᾱ_t) · x0 + √α_t (1−ᾱ_{t−1}) / (1−ᾱ_t) · x_t`
pub fn posterior_mean(x0: &Tensor, x_t: &Tensor, t: &[usize], s: &NoiseSchedule) -> Result<Tensor> {
    ensure_same_shape(x0, x_t)?;
    let c0 = per_item(x0, t, s, |k| {
        s.alpha_bar_prev_at(k).sqrt() * s.beta_at(k) / (1.0 - s.alpha_bar_at(k))
    })?;
    let ct = per_item(x0, t, s, |k| {
        s.alpha_at(k).sqrt() * (1.0 - s.alpha_bar_prev_at(k)) / (1.0 - s.alpha_bar_at(k))
    })?;
    Ok((x0.broadcast_mul(&c0)? + x_t.broadcast_mul(&ct)?)?)
}

/// Reverse-step mean parameterized by a noise estimate:
/// `μ_θ = (x_t − β_t / √(1−ᾱ_t) · ε̂) / √α_t`.
pub fn reverse_mean(
    x_t: &Tensor,
    t: &[usize],
    eps_hat: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    ensure_same_shape(x_t, eps_hat)?;
    let a = per_item(x_t, t, s, |k| s.alpha_at(k).sqrt().recip())?;
    let b = per_item(x_t, t, s, |k| {
        s.beta_at(k) / ((1.0 - s.alpha_bar_at(k)).sqrt() * s.alpha_at(k).sqrt())
    })?;
    Ok((x_t.broadcast_mul(&a)? - eps_hat.broadcast_mul(&b)?)?)
}

/// One ancestral step `x_{t−1} = μ_θ + σ_t · z`.
///
/// `z = None` makes the step deterministic. Items at `t = 1` never receive
/// noise.
pub fn p_sample(
    x_t: &Tensor,
    t: &[usize],
    eps_hat: &Tensor,
    z: Option<&Tensor>,
    s: &NoiseSchedule,
    mode: VarianceMode,
) -> Result<Tensor> {
    let mean = reverse_mean(x_t, t, eps_hat, s)?;
    match z {
        None => Ok(mean),
        Some(z) => {
            ensure_same_shape(x_t, z)?;
            let sigma = per_item(x_t, t, s, |k| {
                if k == 1 {
                    0.0
                } else {
                    s.variance_at(k, mode).sqrt()
                }
            })?;
            Ok((mean + z.broadcast_mul(&sigma)?)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleConfig;
    use crate::tensor::{gaussian, max_abs_diff, to_vec_f64};
    use candle_core::{DType, Device};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_step() -> NoiseSchedule {
        NoiseSchedule::linear(2, 0.1, 0.2).unwrap()
    }

    fn scalar(v: f64) -> Tensor {
        Tensor::full(v, (1, 1, 1), &Device::Cpu).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        to_vec_f64(t).unwrap()[0]
    }

    #[test]
    fn q_sample_hand_arithmetic() {
        let out = q_sample(&scalar(1.0), &[2], &scalar(1.0), &two_step()).unwrap();
        assert!((value(&out) - (0.72f64.sqrt() + 0.28f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn q_sample_degenerate_inputs() {
        let s = two_step();
        let x = Tensor::new(&[[[0.3f64, -0.7]]], &Device::Cpu).unwrap();
        let zero = x.zeros_like().unwrap();
        let a = q_sample(&x, &[1], &zero, &s).unwrap();
        assert!(max_abs_diff(&a, &(&x * 0.9f64.sqrt()).unwrap()).unwrap() < 1e-15);
        let b = q_sample(&zero, &[2], &x, &s).unwrap();
        assert!(max_abs_diff(&b, &(&x * 0.28f64.sqrt()).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn shape_and_step_errors() {
        let s = two_step();
        let a = Tensor::zeros((1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 2, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(
            q_sample(&a, &[1], &b, &s),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            q_sample(&a, &[3], &a, &s),
            Err(Error::StepOutOfRange { .. })
        ));
        assert!(matches!(
            q_sample(&a, &[0], &a, &s),
            Err(Error::StepOutOfRange { .. })
        ));
        let batch = Tensor::zeros((3, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(q_sample(&batch, &[1, 2], &batch, &s).is_err());
        assert!(q_sample(&batch, &[1, 2, 1], &batch, &s).is_ok());
    }

    #[test]
    fn forward_step_limits() {
        let s = two_step();
        let x = scalar(0.8);
        let out = q_sample_step(&x, &[2], &scalar(0.0), &s).unwrap();
        assert!((value(&out) - 0.8 * 0.8f64.sqrt()).abs() < 1e-15);
        let tiny = NoiseSchedule::linear(1, 1e-14, 1e-14).unwrap();
        let out = q_sample_step(&x, &[1], &scalar(1.0), &tiny).unwrap();
        assert!((value(&out) - 0.8).abs() < 1e-6);
    }

    #[test]
    fn composed_forward_steps_match_marginal_variance() {
        let s = NoiseSchedule::linear(10, 0.01, 0.1).unwrap();
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 20_000;
        let t_end = 6;
        let mut x = Tensor::zeros((n, 1, 1, 1), DType::F64, &dev).unwrap();
        for t in 1..=t_end {
            let eps = gaussian((n, 1, 1, 1), DType::F64, &dev, &mut rng).unwrap();
            x = q_sample_step(&x, &[t], &eps, &s).unwrap();
        }
        let v = to_vec_f64(&x).unwrap();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expect = 1.0 - s.alpha_bar(t_end).unwrap();
        // Standard error of a Gaussian sample variance is σ²·√(2/(n−1)).
        let se = expect * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - expect).abs() < 3.0 * se, "var {var} expect {expect}");
    }

    #[test]
    fn x0_inversion() {
        let s = ScheduleConfig::default().build().unwrap();
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = gaussian((2, 3, 4, 4), DType::F64, &dev, &mut rng).unwrap();
        let eps = gaussian((2, 3, 4, 4), DType::F64, &dev, &mut rng).unwrap();
        for t in [1usize, 500, 1000] {
            let xt = q_sample(&x0, &[t], &eps, &s).unwrap();
            let back = predict_x0_from_eps(&xt, &[t], &eps, &s).unwrap();
            assert!(max_abs_diff(&back, &x0).unwrap() < 1e-6);
        }
        let c = Tensor::full(0.25f64, (1, 2, 2), &dev).unwrap();
        let xt = (&c * s.alpha_bar(40).unwrap().sqrt()).unwrap();
        let back = predict_x0_from_eps(&xt, &[40], &c.zeros_like().unwrap(), &s).unwrap();
        assert!(max_abs_diff(&back, &c).unwrap() < 1e-12);
    }

    #[test]
    fn x0_inversion_rejects_degenerate_step() {
        let s = NoiseSchedule::linear(2, 0.999_999_9, 0.999_999_9).unwrap();
        let x = scalar(0.0);
        assert!(matches!(
            predict_x0_from_eps(&x, &[2], &x, &s),
            Err(Error::Degenerate { .. })
        ));
    }

    #[test]
    fn posterior_mean_first_step_is_x0() {
        let s = two_step();
        let out = posterior_mean(&scalar(0.4), &scalar(-3.0), &[1], &s).unwrap();
        assert!((value(&out) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn posterior_mean_hand_arithmetic() {
        // t=2: ᾱ1 = 0.9, ᾱ2 = 0.72, β2 = 0.2, α2 = 0.8.
        let c0 = 0.9f64.sqrt() * 0.2 / 0.28;
        let ct = 0.8f64.sqrt() * 0.1 / 0.28;
        let out = posterior_mean(&scalar(1.0), &scalar(2.0), &[2], &two_step()).unwrap();
        assert!((value(&out) - (c0 + 2.0 * ct)).abs() < 1e-12);
    }

    #[test]
    fn reverse_mean_limits() {
        let s = two_step();
        let out = reverse_mean(&scalar(1.0), &[2], &scalar(0.0), &s).unwrap();
        assert!((value(&out) - 1.0 / 0.8f64.sqrt()).abs() < 1e-15);
        let tiny = NoiseSchedule::linear(2, 1e-12, 1e-12).unwrap();
        let out = reverse_mean(&scalar(0.5), &[2], &scalar(0.7), &tiny).unwrap();
        assert!((value(&out) - 0.5).abs() < 1e-5);
    }

    #[test]
    fn p_sample_noise_handling() {
        let s = two_step();
        let x = scalar(0.3);
        let e = scalar(0.1);
        let z = scalar(1.0);
        let mean = reverse_mean(&x, &[2], &e, &s).unwrap();
        let det = p_sample(&x, &[2], &e, None, &s, VarianceMode::Beta).unwrap();
        assert_eq!(value(&det), value(&mean));
        let noisy = p_sample(&x, &[2], &e, Some(&z), &s, VarianceMode::Beta).unwrap();
        assert!((value(&noisy) - value(&mean) - 0.2f64.sqrt()).abs() < 1e-15);
        let first = p_sample(&x, &[1], &e, Some(&z), &s, VarianceMode::Posterior).unwrap();
        assert_eq!(
            value(&first),
            value(&reverse_mean(&x, &[1], &e, &s).unwrap())
        );
        let bad = Tensor::zeros((1, 1, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(p_sample(&x, &[2], &e, Some(&bad), &s, VarianceMode::Beta).is_err());
    }

    #[test]
    fn q_sample_is_linear() {
        let s = two_step();
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = gaussian((3, 2, 2), DType::F64, &dev, &mut rng).unwrap();
        let eps = gaussian((3, 2, 2), DType::F64, &dev, &mut rng).unwrap();
        let a = 2.5;
        let lhs = q_sample(&(&x0 * a).unwrap(), &[2], &(&eps * a).unwrap(), &s).unwrap();
        let rhs = (q_sample(&x0, &[2], &eps, &s).unwrap() * a).unwrap();
        assert!(max_abs_diff(&lhs, &rhs).unwrap() < 1e-12);
    }
}
