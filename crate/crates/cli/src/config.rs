//! Application configuration: preset, optional TOML file, command-line
//! flags, and environment overrides, merged in that order of precedence
//! (environment wins).

use std::path::{Path, PathBuf};
use std::str::FromStr;

use diffdf_core::attacks::{derive_seed, AttackConfig, Norm, PerturbationBudget, Surrogate};
use diffdf_core::data::SyntheticConfig;
use diffdf_core::evalkit::{Condition, MatrixConfig, TrackingAttack};
use diffdf_core::features::FeatureConfig;
use diffdf_core::purifier::PurifyConfig;
use diffdf_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_SEED: &str = "DIFFDF_SEED";
pub const ENV_CONFIG: &str = "DIFFDF_CONFIG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    PaperScale,
    TestScale,
}

impl FromStr for Preset {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "paper-scale" => Ok(Preset::PaperScale),
            "test-scale" => Ok(Preset::TestScale),
            other => Err(CliError::Config(format!(
                "unknown preset '{other}' (expected paper-scale or test-scale)"
            ))),
        }
    }
}

/// Synthetic sequences plus crop sampling for pair datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: SyntheticConfig,
    /// Every `stride`-th frame of a sequence becomes a training pair.
    pub stride: usize,
}

/// Held-out tracking sequences and the attack/defense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub synthetic: SyntheticConfig,
    pub matrix: MatrixConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    pub preset: Preset,
    /// Master seed; every module seed is derived from it.
    pub seed: u64,
    pub data: DataSection,
    pub attack: AttackConfig,
    pub train: TrainConfig,
    pub purify: PurifyConfig,
    pub eval: EvalSection,
}

/// Test-scale attack strength in `[-1, 1]` units (32/255 of the pixel range).
pub const TEST_EPSILON: f64 = 0.25;
pub const PAPER_EPSILON: f64 = 16.0 / 255.0;

impl AppConfig {
    pub fn preset(preset: Preset) -> Self {
        let (train, eps, t_star, crop, synthetic) = match preset {
            Preset::TestScale => (
                test_scale_training(),
                TEST_EPSILON,
                TEST_T_STAR,
                32,
                SyntheticConfig {
                    sequences: 50,
                    frames: 50,
                    ..SyntheticConfig::default()
                },
            ),
            Preset::PaperScale => (
                TrainConfig::paper_scale(),
                PAPER_EPSILON,
                100,
                256,
                SyntheticConfig {
                    sequences: 50,
                    frames: 50,
                    canvas: 640,
                    object_min: 60,
                    object_max: 140,
                    max_velocity: 12.0,
                    seed: 0,
                },
            ),
        };
        let budget = PerturbationBudget::linf(eps, 10);
        let mut cfg = AppConfig {
            preset,
            seed: 0,
            data: DataSection {
                synthetic,
                stride: 10,
            },
            attack: AttackConfig::Gradient {
                surrogate: Surrogate::Auto,
                budget,
                decoy_offset: crop / 4,
            },
            train,
            purify: PurifyConfig {
                t_star,
                deterministic: true,
                batch: 64,
                ..PurifyConfig::default()
            },
            eval: EvalSection {
                synthetic: SyntheticConfig {
                    sequences: 8,
                    frames: 40,
                    ..synthetic
                },
                matrix: MatrixConfig {
                    conditions: vec![
                        Condition::Original,
                        Condition::Attacked,
                        Condition::Defended,
                    ],
                    search_size: crop,
                    reinit_gap: 5,
                    attack: TrackingAttack {
                        surrogate: Surrogate::Decoy,
                        budget,
                        decoy_offset: crop / 4,
                        features: FeatureConfig::default(),
                        seed: 0,
                    },
                    seed: 0,
                },
            },
        };
        cfg.apply_seed(0);
        cfg
    }

    /// Sets the master seed and re-derives every module seed from it.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.synthetic.seed = derive_seed(seed, &[1]);
        self.train.seed = derive_seed(seed, &[2]);
        self.purify.seed = derive_seed(seed, &[3]);
        self.eval.synthetic.seed = derive_seed(seed, &[4]);
        self.eval.matrix.attack.seed = derive_seed(seed, &[5]);
        self.eval.matrix.seed = derive_seed(seed, &[6]);
    }

    /// Crop side used for datasets and purification.
    pub fn image_size(&self) -> usize {
        self.train.image_size
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate()?;
        self.purify.validate(&self.train.schedule.build()?)?;
        if let Some(b) = self.attack.budget() {
            b.validate()?;
        }
        self.eval.matrix.attack.budget.validate()?;
        if self.data.stride == 0 {
            return Err(CliError::Config("data.stride must be >= 1".into()));
        }
        if self.eval.matrix.search_size != self.train.image_size {
            return Err(CliError::Config(format!(
                "eval.matrix.search_size ({}) must equal train.image_size ({})",
                self.eval.matrix.search_size, self.train.image_size
            )));
        }
        if self.eval.matrix.conditions.is_empty() {
            return Err(CliError::Config("eval.matrix.conditions is empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes to TOML")
    }
}

/// Inference depth for the test-scale preset (of T = 100).
pub const TEST_T_STAR: usize = 5;

/// The test-scale training recipe: the 32×32 model with a learning-rate
/// schedule stretched so the short run keeps learning.
pub fn test_scale_training() -> TrainConfig {
    TrainConfig {
        epochs: 38,
        lr: 2e-3,
        lr_decay_every: 30,
        ..TrainConfig::test_scale()
    }
}

/// Deep-merges `overlay` into `base`; tables merge key by key, everything
/// else is replaced.
fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<Preset>,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// Environment values, captured once so tests can supply their own.
#[derive(Debug, Clone, Default)]
pub struct EnvOverrides {
    pub seed: Option<String>,
    pub config: Option<String>,
}

impl EnvOverrides {
    pub fn from_process() -> Self {
        Self {
            seed: std::env::var(ENV_SEED).ok(),
            config: std::env::var(ENV_CONFIG).ok(),
        }
    }
}

fn read_file(path: &Path) -> Result<toml::Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map(toml::Value::Table)
        .map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
}

/// Resolves the configuration tree. `edit` applies command-specific flags
/// after the file and before environment overrides.
pub fn resolve(
    flags: &Overrides,
    env: &EnvOverrides,
    edit: impl FnOnce(&mut AppConfig) -> Result<(), CliError>,
) -> Result<AppConfig, CliError> {
    let config_path = env
        .config
        .as_ref()
        .map(PathBuf::from)
        .or_else(|| flags.config.clone());
    let file = config_path.as_deref().map(read_file).transpose()?;
    let preset = match (&flags.preset, file.as_ref().and_then(|f| f.get("preset"))) {
        (Some(p), _) => *p,
        (None, Some(v)) => v
            .as_str()
            .ok_or_else(|| CliError::Config("preset must be a string".into()))?
            .parse()?,
        (None, None) => Preset::TestScale,
    };
    let base = AppConfig::preset(preset);
    let mut cfg = match file {
        Some(overlay) => {
            let mut tree = toml::Value::try_from(&base).expect("configuration serializes to TOML");
            merge(&mut tree, overlay);
            let mut cfg: AppConfig = tree.try_into().map_err(|e: toml::de::Error| {
                CliError::Config(format!("config: {}", e.message()))
            })?;
            cfg.preset = preset;
            cfg
        }
        None => base,
    };
    let mut seed = cfg.seed;
    if let Some(s) = flags.seed {
        seed = s;
    }
    edit(&mut cfg)?;
    if let Some(s) = &env.seed {
        seed = s.trim().parse().map_err(|_| {
            CliError::Config(format!("{ENV_SEED} must be an unsigned integer, got '{s}'"))
        })?;
    }
    cfg.apply_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `a,b,c` into loss weights `(λ_pixel, λ_semantic, λ_ssim)`.
pub fn parse_weights(s: &str) -> Result<diffdf_core::losses::LossWeights, CliError> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Config(format!("--weights expects three numbers, got '{s}'")))?;
    match parts[..] {
        [a, b, c] => Ok(diffdf_core::losses::LossWeights::new(a, b, c)?),
        _ => Err(CliError::Config(format!(
            "--weights expects three numbers, got '{s}'"
        ))),
    }
}

pub fn parse_conditions(s: &str) -> Result<Vec<Condition>, CliError> {
    s.split(',')
        .map(|c| {
            c.trim()
                .parse::<Condition>()
                .map_err(|e| CliError::Config(e.to_string()))
        })
        .collect()
}

pub fn parse_norm(s: &str) -> Result<Norm, CliError> {
    match s {
        "l1" => Ok(Norm::L1),
        "l2" => Ok(Norm::L2),
        "linf" => Ok(Norm::Linf),
        other => Err(CliError::Config(format!(
            "unknown norm '{other}' (l1, l2, linf)"
        ))),
    }
}
