use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffdf_cli::commands::{self, DataSource};
use diffdf_cli::config::{self, AppConfig, EnvOverrides, Overrides, Preset};
use diffdf_cli::CliError;
use diffdf_core::attacks::{AttackConfig, PerturbationBudget, StructuredKind, Surrogate};

#[derive(Parser)]
#[command(
    name = "diffdf",
    version,
    about = "Diffusion-based adversarial purification for tracking imagery"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file (overridden by DIFFDF_CONFIG).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// paper-scale or test-scale (default test-scale).
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Master seed (overridden by DIFFDF_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Build a clean/adversarial pair dataset.
    MakeData {
        /// Generate synthetic sequences (the default when no other source is given).
        #[arg(long)]
        synthetic: bool,
        /// Number of synthetic sequences.
        #[arg(long)]
        sequences: Option<usize>,
        /// Frames per synthetic sequence.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Crop sequences found under this directory instead.
        #[arg(long, conflicts_with = "synthetic")]
        from_sequences: Option<PathBuf>,
        /// Ingest externally generated pairs (requires --adv).
        #[arg(long, requires = "adv", conflicts_with_all = ["synthetic", "from_sequences"])]
        clean: Option<PathBuf>,
        #[arg(long, requires = "clean")]
        adv: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate adversarial pairs with an explicit attack.
    Attack {
        /// gradient, lowfreq, checker, patch, or gaussian.
        #[arg(long, default_value = "gradient")]
        kind: String,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        /// l1, l2, or linf.
        #[arg(long)]
        norm: Option<String>,
        /// feature, decoy, or auto.
        #[arg(long)]
        surrogate: Option<String>,
        /// Attack sequences under this directory (default: synthetic).
        #[arg(long)]
        from_sequences: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the denoiser on a pair dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// λ_pixel,λ_semantic,λ_ssim
        #[arg(long)]
        weights: Option<String>,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Purify an image file or a directory of images.
    Purify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        purify: PurifyFlags,
    },
    /// Attack/defense tracking matrix, optionally with held-out image quality.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sequence directories (default: held-out synthetic set).
        #[arg(long)]
        sequences: Option<PathBuf>,
        /// Pair dataset for PSNR/SSIM before and after purification.
        #[arg(long)]
        pairs: Option<PathBuf>,
        /// Comma-separated: original, attacked, defended.
        #[arg(long)]
        conditions: Option<String>,
        #[command(flatten)]
        purify: PurifyFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the four loss combinations.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sequences: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        purify: PurifyFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render success/precision curves or loss curves as PNG.
    Plot {
        /// report.csv, curves.csv, or loss.csv.
        #[arg(long)]
        from: PathBuf,
        /// Output directory (default: next to the input).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct PurifyFlags {
    #[arg(long)]
    t_star: Option<usize>,
    /// Drop reverse-step noise.
    #[arg(long)]
    deterministic: Option<bool>,
}

impl PurifyFlags {
    fn apply(&self, c: &mut AppConfig) {
        if let Some(t) = self.t_star {
            c.purify.t_star = t;
        }
        if let Some(d) = self.deterministic {
            c.purify.deterministic = d;
        }
    }
}

fn parse_surrogate(s: &str) -> Result<Surrogate, CliError> {
    match s {
        "feature" => Ok(Surrogate::Feature),
        "decoy" => Ok(Surrogate::Decoy),
        "auto" => Ok(Surrogate::Auto),
        other => Err(CliError::Config(format!("unknown surrogate '{other}'"))),
    }
}

fn attack_from_flags(
    base: &AttackConfig,
    kind: &str,
    epsilon: Option<f64>,
    steps: Option<usize>,
    norm: Option<&str>,
    surrogate: Option<&str>,
) -> Result<AttackConfig, CliError> {
    if kind == "gradient" {
        let (mut sur, mut budget, offset) = match *base {
            AttackConfig::Gradient {
                surrogate,
                budget,
                decoy_offset,
            } => (surrogate, budget, decoy_offset),
            AttackConfig::Structured { .. } => (
                Surrogate::Auto,
                PerturbationBudget::linf(config::TEST_EPSILON, 10),
                8,
            ),
        };
        if let Some(n) = norm {
            budget.norm = config::parse_norm(n)?;
        }
        if let Some(e) = epsilon {
            budget.epsilon = e;
            budget.step_size = e / 4.0;
        }
        if let Some(s) = steps {
            budget.steps = s;
        }
        if let Some(s) = surrogate {
            sur = parse_surrogate(s)?;
        }
        return Ok(AttackConfig::Gradient {
            surrogate: sur,
            budget,
            decoy_offset: offset,
        });
    }
    let kind = match kind {
        "lowfreq" => StructuredKind::Lowfreq,
        "checker" => StructuredKind::Checker,
        "patch" => StructuredKind::Patch,
        "gaussian" => StructuredKind::Gaussian,
        other => return Err(CliError::Config(format!("unknown attack kind '{other}'"))),
    };
    let strength = epsilon
        .ok_or_else(|| CliError::Config("structured attacks need --epsilon (strength)".into()))?;
    Ok(AttackConfig::Structured { kind, strength })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let flags = Overrides {
        preset: cli
            .common
            .preset
            .as_deref()
            .map(str::parse::<Preset>)
            .transpose()?,
        config: cli.common.config.clone(),
        seed: cli.common.seed,
    };
    let env = EnvOverrides::from_process();
    let resolve = |edit: &dyn Fn(&mut AppConfig) -> Result<(), CliError>| {
        let cfg = config::resolve(&flags, &env, edit)?;
        if cli.common.print_config {
            print!("{}", cfg.to_toml());
            std::process::exit(0);
        }
        Ok::<_, CliError>(cfg)
    };
    match &cli.command {
        Command::MakeData {
            synthetic: _,
            sequences,
            frames,
            stride,
            from_sequences,
            clean,
            adv,
            out,
        } => {
            let cfg = resolve(&|c| {
                if let Some(n) = sequences {
                    c.data.synthetic.sequences = *n;
                }
                if let Some(f) = frames {
                    c.data.synthetic.frames = *f;
                }
                if let Some(s) = stride {
                    c.data.stride = *s;
                }
                Ok(())
            })?;
            let source = match (from_sequences, clean, adv) {
                (Some(d), _, _) => DataSource::Sequences(d.clone()),
                (None, Some(c), Some(a)) => DataSource::External {
                    clean: c.clone(),
                    adversarial: a.clone(),
                },
                _ => DataSource::Synthetic,
            };
            let s = commands::make_data(&cfg, &source, out, "make-data")?;
            println!("pairs {}", s.pairs);
            println!("sequences {}", s.sequences);
            if let (Some(b), Some(m)) = (s.budget, s.max_perturbation) {
                println!(
                    "budget {:?} eps {} steps {} (max stored {:.6})",
                    b.norm, b.epsilon, b.steps, m
                );
            }
        }
        Command::Attack {
            kind,
            epsilon,
            steps,
            norm,
            surrogate,
            from_sequences,
            out,
        } => {
            let cfg = resolve(&|c| {
                c.attack = attack_from_flags(
                    &c.attack,
                    kind,
                    *epsilon,
                    *steps,
                    norm.as_deref(),
                    surrogate.as_deref(),
                )?;
                Ok(())
            })?;
            let source = match from_sequences {
                Some(d) => DataSource::Sequences(d.clone()),
                None => DataSource::Synthetic,
            };
            let s = commands::make_data(&cfg, &source, out, "attack")?;
            println!("pairs {}", s.pairs);
            match (s.budget, s.max_perturbation) {
                (Some(b), Some(m)) => {
                    println!("max {:?} perturbation {:.6} <= {}", b.norm, m, b.epsilon)
                }
                _ => println!("structured perturbation (no norm budget)"),
            }
        }
        Command::Train {
            data,
            out,
            epochs,
            lr,
            batch_size,
            weights,
            resume,
        } => {
            let cfg = resolve(&|c| {
                if let Some(e) = epochs {
                    c.train.epochs = *e;
                }
                if let Some(l) = lr {
                    c.train.lr = *l;
                }
                if let Some(b) = batch_size {
                    c.train.batch_size = *b;
                }
                if let Some(w) = weights {
                    c.train.weights = config::parse_weights(w)?;
                }
                Ok(())
            })?;
            let (_, s) = commands::train_cmd(&cfg, data, out, *resume)?;
            println!("parameters {}", s.parameters);
            println!("steps {} epochs {} ({:.1} s)", s.steps, s.epochs, s.seconds);
            if let Some(l) = s.final_loss {
                println!(
                    "final loss: simple {:.6} pixel {:.6} semantic {:.6} ssim {:.6} total {:.6}",
                    l.simple, l.pixel, l.semantic, l.ssim_loss, l.total
                );
            }
        }
        Command::Purify {
            checkpoint,
            input,
            output,
            purify,
        } => {
            let cfg = resolve(&|c| {
                purify.apply(c);
                Ok(())
            })?;
            let s = commands::purify_cmd(&cfg, checkpoint, input, output)?;
            println!(
                "purified {} image(s) at t*={} ({:.2} frames/s)",
                s.images, s.t_star, s.frames_per_second
            );
        }
        Command::Eval {
            checkpoint,
            sequences,
            pairs,
            conditions,
            purify,
            out,
        } => {
            let cfg = resolve(&|c| {
                purify.apply(c);
                if let Some(list) = conditions {
                    c.eval.matrix.conditions = config::parse_conditions(list)?;
                }
                Ok(())
            })?;
            let (_, s) = commands::eval_cmd(
                &cfg,
                checkpoint.as_deref(),
                sequences.as_deref(),
                pairs.as_deref(),
                out,
            )?;
            println!(
                "{:<10} {:>8} {:>9} {:>8} {:>5} {:>8}",
                "condition", "success", "precision", "accuracy", "lost", "eao_lite"
            );
            for r in &s.aggregates {
                println!(
                    "{:<10} {:>8.4} {:>9.4} {:>8.4} {:>5} {:>8.4}",
                    r.condition.name(),
                    r.success_auc,
                    r.precision,
                    r.accuracy,
                    r.lost_number,
                    r.eao_lite
                );
            }
            if let Some(q) = s.quality {
                println!(
                    "PSNR adversarial {:.2} dB -> purified {:.2} dB; SSIM {:.4} -> {:.4}",
                    q.psnr_adversarial, q.psnr_purified, q.ssim_adversarial, q.ssim_purified
                );
            }
        }
        Command::Ablate {
            data,
            sequences,
            epochs,
            purify,
            out,
        } => {
            let cfg = resolve(&|c| {
                purify.apply(c);
                if let Some(e) = epochs {
                    c.train.epochs = *e;
                }
                Ok(())
            })?;
            let rows = commands::ablate_cmd(&cfg, data, sequences.as_deref(), out)?;
            print!("{}", commands::ablation_csv(&rows));
        }
        Command::Plot { from, out } => {
            let cfg = resolve(&|_| Ok(()))?;
            let dir = out
                .clone()
                .or_else(|| from.parent().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            for p in commands::plot_cmd(&cfg, from, &dir)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
