//! Noise schedules for the forward diffusion chain.
//!
//! All public accessors take 1-based step indices `t ∈ 1..=T`. Storage is
//! 0-based. `alpha_bar_prev(1)` is defined as 1.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Upper clip applied to cosine-schedule betas.
pub const COSINE_MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Which fixed reverse-process variance to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    /// `σ_t² = β_t`
    #[default]
    Beta,
    /// `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`
    Posterior,
}

/// Serializable schedule parameters, as stored in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleConfig {
    Linear {
        steps: usize,
        beta_start: f64,
        beta_end: f64,
    },
    Cosine {
        steps: usize,
        offset: f64,
    },
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig::Linear {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    /// Linear schedule for `steps` steps with the default endpoints rescaled
    /// by `1000 / steps`, so short chains still end near pure noise.
    pub fn scaled_linear(steps: usize) -> Self {
        let scale = 1000.0 / steps.max(1) as f64;
        ScheduleConfig::Linear {
            steps,
            beta_start: 1e-4 * scale,
            beta_end: (0.02 * scale).min(0.999),
        }
    }

    pub fn steps(&self) -> usize {
        match *self {
            ScheduleConfig::Linear { steps, .. } | ScheduleConfig::Cosine { steps, .. } => steps,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        match *self {
            ScheduleConfig::Linear {
                steps,
                beta_start,
                beta_end,
            } => NoiseSchedule::linear(steps, beta_start, beta_end),
            ScheduleConfig::Cosine { steps, offset } => NoiseSchedule::cosine(steps, offset),
        }
    }
}

/// Per-step coefficients derived from a schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffusionCoeffs {
    pub t: usize,
    pub sqrt_alpha_bar: f64,
    pub sqrt_one_minus_alpha_bar: f64,
    pub beta_t: f64,
    pub recip_sqrt_alpha: f64,
    pub posterior_variance: f64,
}

/// Immutable β / α / ᾱ tables for a diffusion chain of length `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linearly spaced from `beta_start` to `beta_end`, inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
            )));
        }
        let beta = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        let config = ScheduleConfig::Linear {
            steps,
            beta_start,
            beta_end,
        };
        Self::from_betas(config, beta)
    }

    /// Squared-cosine ᾱ profile `f(t) = cos²((t/T + s)/(1 + s) · π/2)`.
    ///
    /// Betas are recovered from consecutive ratios of `f`, clipped to
    /// [`COSINE_MAX_BETA`], and ᾱ is then rebuilt as the running product so
    /// the table identities hold exactly.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("T must be at least 1".into()));
        }
        if !(offset > 0.0) {
            return Err(Error::InvalidSchedule(format!(
                "cosine offset must be positive, got {offset}"
            )));
        }
        let f = |t: usize| {
            let x = (t as f64 / steps as f64 + offset) / (1.0 + offset);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let beta = (1..=steps)
            .map(|t| (1.0 - f(t) / f(t - 1)).min(COSINE_MAX_BETA))
            .collect();
        Self::from_betas(ScheduleConfig::Cosine { steps, offset }, beta)
    }

    fn from_betas(config: ScheduleConfig, beta: Vec<f64>) -> Result<Self> {
        if let Some((i, b)) = beta
            .iter()
            .enumerate()
            .find(|(_, &b)| !(b > 0.0 && b < 1.0))
        {
            return Err(Error::InvalidSchedule(format!(
                "beta[{}] = {b} outside (0, 1)",
                i + 1
            )));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self {
            config,
            beta,
            alpha,
            alpha_bar,
        })
    }

    pub fn config(&self) -> &ScheduleConfig {
        &self.config
    }

    pub fn kind(&self) -> ScheduleKind {
        match self.config {
            ScheduleConfig::Linear { .. } => ScheduleKind::Linear,
            ScheduleConfig::Cosine { .. } => ScheduleKind::Cosine,
        }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            })
        } else {
            Ok(())
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    // Unchecked 1-based lookups; callers validate `t` first.
    pub(crate) fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub(crate) fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub(crate) fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    /// `ᾱ_{t−1}` with `ᾱ_0 = 1`.
    pub(crate) fn alpha_bar_prev_at(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.alpha_bar[t - 2]
        }
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.beta_at(t))
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_at(t))
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bar_at(t))
    }

    pub(crate) fn variance_at(&self, t: usize, mode: VarianceMode) -> f64 {
        let beta = self.beta_at(t);
        match mode {
            VarianceMode::Beta => beta,
            VarianceMode::Posterior => {
                (1.0 - self.alpha_bar_prev_at(t)) / (1.0 - self.alpha_bar_at(t)) * beta
            }
        }
    }

    pub fn coeffs_at(&self, t: usize, mode: VarianceMode) -> Result<DiffusionCoeffs> {
        self.check_step(t)?;
        let alpha_bar = self.alpha_bar_at(t);
        Ok(DiffusionCoeffs {
            t,
            sqrt_alpha_bar: alpha_bar.sqrt(),
            sqrt_one_minus_alpha_bar: (1.0 - alpha_bar).sqrt(),
            beta_t: self.beta_at(t),
            recip_sqrt_alpha: self.alpha_at(t).sqrt().recip(),
            posterior_variance: self.variance_at(t, mode),
        })
    }

    /// Short content hash binding a model to the schedule it was trained on.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(match self.kind() {
            ScheduleKind::Linear => b"linear".as_slice(),
            ScheduleKind::Cosine => b"cosine".as_slice(),
        });
        hasher.update((self.steps() as u64).to_le_bytes());
        for b in &self.beta {
            hasher.update(b.to_le_bytes());
        }
        hex::encode(&hasher.finalize()[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn product_oracle(s: &NoiseSchedule, t: usize) -> f64 {
        (1..=t).map(|k| 1.0 - s.betas()[k - 1]).product()
    }

    #[test]
    fn single_step() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn two_step_table() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert_eq!(s.betas(), &[0.1, 0.2]);
        assert!((s.alpha_bar(1).unwrap() - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2).unwrap() - 0.72).abs() < 1e-15);
        let c = s.coeffs_at(2, VarianceMode::Beta).unwrap();
        assert!((c.sqrt_alpha_bar - 0.72f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn default_linear_matches_product_loop() {
        let s = ScheduleConfig::default().build().unwrap();
        assert_eq!(s.steps(), 1000);
        let brute = product_oracle(&s, 1000);
        let rel = (s.alpha_bar(1000).unwrap() - brute).abs() / brute;
        assert!(rel < 1e-10, "rel = {rel}");
        assert!(s.alpha_bar(1000).unwrap() < 1e-4);
    }

    #[test]
    fn constant_beta_is_geometric() {
        let c = 0.03;
        let s = NoiseSchedule::linear(50, c, c).unwrap();
        for t in 1..=50 {
            let expect = (1.0 - c).powi(t as i32);
            let got = s.alpha_bar(t).unwrap();
            assert!((got - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.3, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::cosine(0, 0.008).is_err());
        assert!(NoiseSchedule::cosine(10, 0.0).is_err());
    }

    #[test]
    fn cosine_betas_recoverable_from_alpha_bar() {
        let s = NoiseSchedule::cosine(10, 0.008).unwrap();
        for t in 1..=10 {
            let prev = if t == 1 {
                1.0
            } else {
                s.alpha_bar(t - 1).unwrap()
            };
            let recovered = 1.0 - s.alpha_bar(t).unwrap() / prev;
            assert!((recovered - s.beta(t).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_first_step_near_one() {
        let s = NoiseSchedule::cosine(1000, 0.008).unwrap();
        assert!(s.alpha_bar(1).unwrap() > 0.99);
        assert!(s.betas().iter().all(|&b| b > 0.0 && b <= COSINE_MAX_BETA));
    }

    #[test]
    fn coeffs_boundaries() {
        let s = ScheduleConfig::default().build().unwrap();
        let first = s.coeffs_at(1, VarianceMode::Posterior).unwrap();
        assert_eq!(first.posterior_variance, 0.0);
        let last = s.coeffs_at(1000, VarianceMode::Beta).unwrap();
        assert_eq!(last.posterior_variance, s.beta(1000).unwrap());
        assert!(s.coeffs_at(0, VarianceMode::Beta).is_err());
        assert!(s.coeffs_at(1001, VarianceMode::Beta).is_err());
    }

    #[test]
    fn fingerprint_tracks_tables() {
        let a = ScheduleConfig::default().build().unwrap();
        let b = ScheduleConfig::scaled_linear(100).build().unwrap();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ScheduleConfig::Cosine {
            steps: 100,
            offset: 0.008,
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ScheduleConfig>(&text).unwrap(), cfg);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn any_schedule() -> impl Strategy<Value = NoiseSchedule> {
            prop_oneof![
                (1usize..400, 1e-5f64..0.05, 0.0f64..0.2).prop_map(|(t, lo, span)| {
                    NoiseSchedule::linear(t, lo, (lo + span).min(0.5)).unwrap()
                }),
                (1usize..400, 1e-3f64..0.05)
                    .prop_map(|(t, s)| NoiseSchedule::cosine(t, s).unwrap()),
            ]
        }

        proptest! {
            #[test]
            fn tables_are_consistent(s in any_schedule()) {
                let mut prev = 1.0;
                for t in 1..=s.steps() {
                    let ab = s.alpha_bar(t).unwrap();
                    prop_assert!(ab < prev);
                    prop_assert_eq!(ab, prev * s.alpha(t).unwrap());
                    let brute = product_oracle(&s, t);
                    prop_assert!((ab - brute).abs() <= 1e-10 * brute);
                    let c = s.coeffs_at(t, VarianceMode::Posterior).unwrap();
                    let unit = c.sqrt_alpha_bar.powi(2) + c.sqrt_one_minus_alpha_bar.powi(2);
                    prop_assert!((unit - 1.0).abs() < 1e-12);
                    prop_assert!(c.posterior_variance >= 0.0);
                    prev = ab;
                }
            }
        }
    }
}
