//! Inference-time purification: diffuse the input `t*` steps forward, then
//! run the learned reverse chain back to `t = 0`.

use std::time::{Duration, Instant};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserModel;
use crate::diffusion::{p_sample, q_sample, NoisePredictor};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, VarianceMode};
use crate::tensor::gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PurifyConfig {
    /// Forward-noising depth, `1 ≤ t_star ≤ T`.
    pub t_star: usize,
    pub variance_mode: VarianceMode,
    /// Drop the reverse-step noise (`z = None`); the forward draw stays seeded.
    pub deterministic: bool,
    pub seed: u64,
    /// Images per network call.
    pub batch: usize,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        Self {
            t_star: 100,
            variance_mode: VarianceMode::Beta,
            deterministic: false,
            seed: 0,
            batch: 16,
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self, s: &NoiseSchedule) -> Result<()> {
        s.check_step(self.t_star)?;
        if self.batch == 0 {
            return Err(Error::InvalidArgument(
                "purification batch must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Purifies a `C×H×W` image or `N×C×H×W` batch with any noise predictor.
/// Output has the input's shape and dtype and lies in `[-1, 1]`.
pub fn purify<P: NoisePredictor + ?Sized>(
    predictor: &P,
    s: &NoiseSchedule,
    x: &Tensor,
    cfg: &PurifyConfig,
) -> Result<Tensor> {
    cfg.validate(s)?;
    let single = x.rank() == 3;
    let batch = if single { x.unsqueeze(0)? } else { x.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut outs = Vec::new();
    let n = batch.dim(0)?;
    let mut start = 0;
    while start < n {
        let len = cfg.batch.min(n - start);
        let chunk = batch.narrow(0, start, len)?;
        outs.push(purify_chunk(predictor, s, &chunk, cfg, &mut rng)?);
        start += len;
    }
    let out = Tensor::cat(&outs, 0)?
        .clamp(-1.0, 1.0)?
        .to_dtype(x.dtype())?;
    Ok(if single { out.squeeze(0)? } else { out })
}

fn purify_chunk<P: NoisePredictor + ?Sized>(
    predictor: &P,
    s: &NoiseSchedule,
    x0: &Tensor,
    cfg: &PurifyConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let eps = gaussian(x0.shape(), x0.dtype(), x0.device(), rng)?;
    let mut x = q_sample(&x0.detach(), &[cfg.t_star], &eps, s)?;
    for t in (1..=cfg.t_star).rev() {
        let eps_hat = predictor
            .predict_noise(&x, &[t])?
            .to_dtype(x.dtype())?
            .detach();
        let z = if cfg.deterministic || t == 1 {
            None
        } else {
            Some(gaussian(x.shape(), x.dtype(), x.device(), rng)?)
        };
        x = p_sample(&x, &[t], &eps_hat, z.as_ref(), s, cfg.variance_mode)?.detach();
    }
    Ok(x)
}

/// A trained denoiser paired with the schedule it was trained under.
pub struct Purifier<'a> {
    model: &'a DenoiserModel,
    schedule: &'a NoiseSchedule,
    pub config: PurifyConfig,
}

impl<'a> Purifier<'a> {
    /// Fails when the model was trained under a different schedule.
    pub fn new(
        model: &'a DenoiserModel,
        schedule: &'a NoiseSchedule,
        config: PurifyConfig,
    ) -> Result<Self> {
        if model.schedule_fingerprint() != schedule.fingerprint() {
            return Err(Error::FingerprintMismatch {
                model: model.schedule_fingerprint().to_string(),
                schedule: schedule.fingerprint(),
            });
        }
        config.validate(schedule)?;
        Ok(Self {
            model,
            schedule,
            config,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.schedule
    }

    pub fn purify(&self, x: &Tensor) -> Result<Tensor> {
        purify(self.model, self.schedule, x, &self.config)
    }

    /// Same as [`Purifier::purify`] with the seed replaced.
    pub fn purify_seeded(&self, x: &Tensor, seed: u64) -> Result<Tensor> {
        purify(
            self.model,
            self.schedule,
            x,
            &PurifyConfig {
                seed,
                ..self.config
            },
        )
    }

    /// Lazily purifies frames one at a time, in order. Frame `i` uses seed
    /// `config.seed + i`.
    pub fn purify_sequence<I>(&self, frames: I) -> PurifyStream<'_, 'a, I::IntoIter>
    where
        I: IntoIterator<Item = Tensor>,
    {
        PurifyStream {
            purifier: self,
            frames: frames.into_iter(),
            index: 0,
            elapsed: Duration::ZERO,
        }
    }
}

pub struct PurifyStream<'p, 'a, I> {
    purifier: &'p Purifier<'a>,
    frames: I,
    index: u64,
    elapsed: Duration,
}

impl<I> PurifyStream<'_, '_, I> {
    pub fn frames_done(&self) -> u64 {
        self.index
    }

    pub fn elapsed(&self) -> Duration {
        self.elapsed
    }

    /// Frames per second over everything purified so far.
    pub fn throughput(&self) -> f64 {
        let secs = self.elapsed.as_secs_f64();
        if secs > 0.0 {
            self.index as f64 / secs
        } else {
            0.0
        }
    }
}

impl<I: Iterator<Item = Tensor>> Iterator for PurifyStream<'_, '_, I> {
    type Item = Result<Tensor>;

    fn next(&mut self) -> Option<Self::Item> {
        let frame = self.frames.next()?;
        let started = Instant::now();
        let seed = self.purifier.config.seed.wrapping_add(self.index);
        let out = self.purifier.purify_seeded(&frame, seed);
        self.elapsed += started.elapsed();
        self.index += 1;
        log::debug!("purified frame {} in {:?}", self.index, started.elapsed());
        Some(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::UNetConfig;
    use crate::schedule::ScheduleConfig;
    use crate::tensor::{max_abs_diff, to_vec_f64, uniform};
    use candle_core::{DType, Device};

    /// Predicts the exact noise that separates `x_t` from a known `x0`.
    struct Oracle<'a> {
        x0: Tensor,
        s: &'a NoiseSchedule,
    }

    impl NoisePredictor for Oracle<'_> {
        fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
            let ab = self.s.alpha_bar(t[0])?;
            Ok(((x_t - self.x0.affine(ab.sqrt(), 0.0)?)? / (1.0 - ab).sqrt())?)
        }
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform((2, 3, 8, 8), -0.9, 0.9, DType::F64, &Device::Cpu, &mut rng).unwrap()
    }

    #[test]
    fn oracle_chain_reconstructs() {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let x0 = image(1);
        let oracle = Oracle {
            x0: x0.clone(),
            s: &s,
        };
        let mut last = 0.0;
        for t_star in [1, 10, 100, 1000] {
            let cfg = PurifyConfig {
                t_star,
                deterministic: true,
                ..Default::default()
            };
            let err = max_abs_diff(&purify(&oracle, &s, &x0, &cfg).unwrap(), &x0).unwrap();
            assert!(err < 1e-2, "t*={t_star}: {err}");
            if t_star == 1 {
                assert!(err < 1e-3);
            }
            assert!(err >= last * 0.5 || err < 1e-12);
            last = err;
        }
    }

    #[test]
    fn seeded_and_range_safe() {
        let s = ScheduleConfig::scaled_linear(50).build().unwrap();
        let model = DenoiserModel::build(
            &UNetConfig {
                base_channels: 8,
                channel_multipliers: vec![1, 2],
                norm_groups: 4,
                time_sinusoid_dim: 16,
                time_embed_dim: 16,
                ..UNetConfig::test_scale()
            },
            0,
            s.fingerprint(),
            DType::F32,
            &Device::Cpu,
        )
        .unwrap();
        let p = Purifier::new(
            &model,
            &s,
            PurifyConfig {
                t_star: 20,
                seed: 4,
                ..Default::default()
            },
        )
        .unwrap();
        let x = image(2).to_dtype(DType::F32).unwrap();
        let a = p.purify(&x).unwrap();
        let b = p.purify(&x).unwrap();
        assert_eq!(max_abs_diff(&a, &b).unwrap(), 0.0);
        assert_eq!(a.dims(), x.dims());
        assert!(to_vec_f64(&a)
            .unwrap()
            .iter()
            .all(|v| (-1.0..=1.0).contains(v)));

        let frames: Vec<Tensor> = (0..3).map(|i| x.get(i % 2).unwrap()).collect();
        let mut stream = p.purify_sequence(frames.clone());
        let outs: Vec<Tensor> = stream.by_ref().map(|r| r.unwrap()).collect();
        assert_eq!(outs.len(), 3);
        assert_eq!(stream.frames_done(), 3);
        for (i, o) in outs.iter().enumerate() {
            let direct = p.purify_seeded(&frames[i], 4 + i as u64).unwrap();
            assert_eq!(max_abs_diff(o, &direct).unwrap(), 0.0);
        }
        assert_eq!(p.purify_sequence(Vec::<Tensor>::new()).count(), 0);

        let other = ScheduleConfig::scaled_linear(60).build().unwrap();
        assert!(matches!(
            Purifier::new(&model, &other, PurifyConfig::default()),
            Err(Error::FingerprintMismatch { .. })
        ));
        assert!(Purifier::new(
            &model,
            &s,
            PurifyConfig {
                t_star: 51,
                ..Default::default()
            }
        )
        .is_err());
    }
}
