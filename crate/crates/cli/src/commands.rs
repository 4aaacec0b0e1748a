//! Command implementations. Each takes a resolved [`AppConfig`] and explicit
//! paths, writes its outputs plus `run.json`, and returns a summary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use diffdf_core::attacks::{perturbation_norms, PerturbationBudget};
use diffdf_core::data::{
    build_manifest, depreprocess, ingest_external, load_sequences, make_synthetic_sequences,
    preprocess, save_sequence, DatasetConfig, PairDataset, PairManifest, Sequence,
};
use diffdf_core::denoiser::DenoiserModel;
use diffdf_core::evalkit::{run_matrix, Condition, MatrixReport};
use diffdf_core::features::FeatureExtractor;
use diffdf_core::losses::{psnr, ssim, LossBundle, LossWeights, SsimConfig};
use diffdf_core::purifier::{Purifier, PurifyConfig};
use diffdf_core::schedule::NoiseSchedule;
use diffdf_core::tensor::scalar_f64;
use diffdf_core::trainer::{load_checkpoint, train, Checkpoint, CHECKPOINT_FILE, LOSS_CSV};
use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::error::CliError;
use crate::plot;
use crate::runinfo::RunRecord;

pub const SEQUENCES_DIR: &str = "sequences";

/// Where `make-data` and `attack` take their frames from.
#[derive(Debug, Clone)]
pub enum DataSource {
    /// Generate sequences from `data.synthetic`.
    Synthetic,
    /// Sequence directories (frames plus `groundtruth.txt`) under a root.
    Sequences(PathBuf),
    /// Already-paired images: same-named files in two directories.
    External {
        clean: PathBuf,
        adversarial: PathBuf,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSummary {
    pub pairs: usize,
    pub sequences: usize,
    pub image_size: usize,
    /// Largest stored perturbation per budget norm, when the generator has one.
    pub max_perturbation: Option<f64>,
    pub budget: Option<PerturbationBudget>,
}

fn extractor_for(cfg: &AppConfig) -> Result<FeatureExtractor, CliError> {
    Ok(FeatureExtractor::from_config(
        &cfg.train.features,
        DType::F32,
        &Device::Cpu,
    )?)
}

fn sequences_from(source: &DataSource, cfg: &AppConfig) -> Result<Vec<Sequence>, CliError> {
    match source {
        DataSource::Synthetic => Ok(make_synthetic_sequences(&cfg.data.synthetic)?),
        DataSource::Sequences(root) => {
            let seqs = load_sequences(root)?;
            if seqs.is_empty() {
                return Err(CliError::Data(format!(
                    "no sequences under {}",
                    root.display()
                )));
            }
            Ok(seqs)
        }
        DataSource::External { .. } => {
            Err(CliError::Config("external pairs carry no sequences".into()))
        }
    }
}

/// Largest perturbation norm over all stored pairs.
pub fn max_stored_perturbation(root: &Path, budget: &PerturbationBudget) -> Result<f64, CliError> {
    let ds = PairDataset::load(root, DType::F64)?;
    let delta = (&ds.adversarial - &ds.clean).map_err(diffdf_core::Error::from)?;
    Ok(perturbation_norms(&delta, budget.norm)?
        .into_iter()
        .fold(0.0, f64::max))
}

/// Builds a pair dataset under `out` (`manifest.json`, `clean/`, `adv/`),
/// keeping the source sequences in `out/sequences` for later evaluation.
pub fn make_data(
    cfg: &AppConfig,
    source: &DataSource,
    out: &Path,
    command: &str,
) -> Result<DataSummary, CliError> {
    let mut run = RunRecord::new(command, cfg);
    let (manifest, n_seq): (PairManifest, usize) = match source {
        DataSource::External { clean, adversarial } => {
            run.input(clean)?;
            run.input(adversarial)?;
            (
                run.time("ingest", || ingest_external(clean, adversarial, out))?,
                0,
            )
        }
        _ => {
            if let DataSource::Sequences(root) = source {
                run.input(root)?;
            }
            let seqs = run.time("sequences", || sequences_from(source, cfg))?;
            if matches!(source, DataSource::Synthetic) {
                for s in &seqs {
                    save_sequence(s, &out.join(SEQUENCES_DIR).join(&s.name))?;
                }
            }
            let extractor = extractor_for(cfg)?;
            let dcfg =
                DatasetConfig::new(cfg.image_size(), cfg.data.stride, cfg.data.synthetic.seed);
            let m = run.time("pairs", || {
                build_manifest(&seqs, &dcfg, &cfg.attack, &extractor, out)
            })?;
            (m, seqs.len())
        }
    };
    let budget = match source {
        DataSource::External { .. } => None,
        _ => cfg.attack.budget(),
    };
    let max_perturbation = match &budget {
        Some(b) => Some(max_stored_perturbation(out, b)?),
        None => None,
    };
    if let (Some(b), Some(m)) = (&budget, max_perturbation) {
        if m > b.epsilon + 1e-9 {
            return Err(CliError::Runtime(format!(
                "stored perturbation {m} exceeds the budget {}",
                b.epsilon
            )));
        }
    }
    let summary = DataSummary {
        pairs: manifest.entries.len(),
        sequences: n_seq,
        image_size: manifest.image_size,
        max_perturbation,
        budget,
    };
    run.outputs.push(out.join(diffdf_core::data::MANIFEST_FILE));
    run.summary = serde_json::to_value(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    run.write(out)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub final_loss: Option<LossBundle>,
    pub parameters: usize,
    pub seconds: f64,
}

/// Trains on the pair dataset at `data`, writing `checkpoint.bin` and
/// `loss.csv` into `out`.
pub fn train_cmd(
    cfg: &AppConfig,
    data: &Path,
    out: &Path,
    resume: bool,
) -> Result<(Checkpoint, TrainSummary), CliError> {
    let mut run = RunRecord::new("train", cfg);
    run.input(data)?;
    let ds = run.time("load", || {
        PairDataset::load(data, cfg.train.precision.dtype())
    })?;
    let started = std::time::Instant::now();
    let ckpt = run.time("train", || train(&cfg.train, &ds, out, resume))?;
    let seconds = started.elapsed().as_secs_f64();
    let model = ckpt.model()?;
    let summary = TrainSummary {
        steps: ckpt.manifest.step,
        epochs: ckpt.manifest.epoch,
        final_loss: ckpt.manifest.loss_tail.last().copied(),
        parameters: model.parameter_count(),
        seconds,
    };
    run.outputs
        .extend([out.join(CHECKPOINT_FILE), out.join(LOSS_CSV)]);
    run.summary = serde_json::to_value(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    run.write(out)?;
    Ok((ckpt, summary))
}

/// A trained model with its schedule.
pub struct LoadedModel {
    pub checkpoint: Checkpoint,
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
}

impl LoadedModel {
    pub fn open(path: &Path) -> Result<Self, CliError> {
        let file = if path.is_dir() {
            path.join(CHECKPOINT_FILE)
        } else {
            path.to_path_buf()
        };
        let checkpoint = load_checkpoint(&file)?;
        Self::from_checkpoint(checkpoint)
    }

    pub fn from_checkpoint(checkpoint: Checkpoint) -> Result<Self, CliError> {
        let model = checkpoint.model()?;
        let schedule = checkpoint.manifest.schedule.build()?;
        Ok(Self {
            checkpoint,
            model,
            schedule,
        })
    }

    pub fn image_size(&self) -> usize {
        self.checkpoint.manifest.train.image_size
    }

    pub fn purifier(&self, cfg: PurifyConfig) -> Result<Purifier<'_>, CliError> {
        Ok(Purifier::new(&self.model, &self.schedule, cfg)?)
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PurifySummary {
    pub images: usize,
    pub t_star: usize,
    pub frames_per_second: f64,
}

/// Purifies one image file or every image in a directory. Images are
/// resized to the model's input size; outputs are PNG.
pub fn purify_cmd(
    cfg: &AppConfig,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
) -> Result<PurifySummary, CliError> {
    let mut run = RunRecord::new("purify", cfg);
    run.input(checkpoint)?;
    run.input(input)?;
    let loaded = LoadedModel::open(checkpoint)?;
    let purifier = loaded.purifier(cfg.purify)?;
    let (files, outs, run_dir) = if input.is_dir() {
        std::fs::create_dir_all(output).map_err(|e| CliError::io(output, e))?;
        let files = list_pngs(input)?;
        if files.is_empty() {
            return Err(CliError::Data(format!("no images in {}", input.display())));
        }
        let outs = files
            .iter()
            .map(|f| {
                output.join(Path::new(f.file_name().unwrap_or_default()).with_extension("png"))
            })
            .collect::<Vec<_>>();
        (files, outs, output.to_path_buf())
    } else {
        let parent = output
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        (
            vec![input.to_path_buf()],
            vec![output.to_path_buf()],
            parent.to_path_buf(),
        )
    };
    let size = loaded.image_size();
    let mut frames = Vec::with_capacity(files.len());
    for f in &files {
        let img = image::open(f)
            .map_err(|e| CliError::Data(format!("{}: {e}", f.display())))?
            .to_rgb8();
        frames.push(
            preprocess(&img, size)?
                .to_dtype(loaded.model.dtype())
                .map_err(diffdf_core::Error::from)?,
        );
    }
    let mut stream = purifier.purify_sequence(frames);
    let mut written = 0;
    for (out, y) in outs.iter().zip(stream.by_ref()) {
        depreprocess(&y?)?
            .save(out)
            .map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
        written += 1;
    }
    let summary = PurifySummary {
        images: written,
        t_star: cfg.purify.t_star,
        frames_per_second: stream.throughput(),
    };
    run.outputs.extend(outs);
    run.summary = serde_json::to_value(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    run.write(&run_dir)?;
    Ok(summary)
}

/// Image-quality comparison on held-out pairs.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Quality {
    pub pairs: usize,
    pub psnr_adversarial: f64,
    pub psnr_purified: f64,
    pub ssim_adversarial: f64,
    pub ssim_purified: f64,
    /// Purifying the clean images themselves.
    pub psnr_clean_purified: f64,
}

/// Mean PSNR and SSIM to the clean images, before and after purification.
pub fn quality(purifier: &Purifier<'_>, ds: &PairDataset) -> Result<Quality, CliError> {
    let sc = SsimConfig::default();
    let mean_psnr = |a: &Tensor, b: &Tensor| -> Result<f64, CliError> {
        let n = a.dim(0).map_err(diffdf_core::Error::from)?;
        let mut sum = 0.0;
        for i in 0..n {
            let (x, y) = (
                a.get(i).map_err(diffdf_core::Error::from)?,
                b.get(i).map_err(diffdf_core::Error::from)?,
            );
            sum += psnr(&x, &y)?;
        }
        Ok(sum / n as f64)
    };
    let mean_ssim =
        |a: &Tensor, b: &Tensor| -> Result<f64, CliError> { Ok(scalar_f64(&ssim(a, b, &sc)?)?) };
    let purified = purifier.purify(&ds.adversarial)?;
    let purified_clean = purifier.purify(&ds.clean)?;
    Ok(Quality {
        pairs: ds.len(),
        psnr_adversarial: mean_psnr(&ds.adversarial, &ds.clean)?,
        psnr_purified: mean_psnr(&purified, &ds.clean)?,
        ssim_adversarial: mean_ssim(&ds.adversarial, &ds.clean)?,
        ssim_purified: mean_ssim(&purified, &ds.clean)?,
        psnr_clean_purified: mean_psnr(&purified_clean, &ds.clean)?,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub aggregates: Vec<diffdf_core::evalkit::ReportRow>,
    pub quality: Option<Quality>,
}

/// Tracking sequences for evaluation: a directory of sequences, or the
/// held-out synthetic set from `eval.synthetic`.
pub fn eval_sequences(cfg: &AppConfig, dir: Option<&Path>) -> Result<Vec<Sequence>, CliError> {
    match dir {
        Some(d) => sequences_from(&DataSource::Sequences(d.to_path_buf()), cfg),
        None => Ok(make_synthetic_sequences(&cfg.eval.synthetic)?),
    }
}

/// Runs the attack/defense matrix with an already loaded model.
pub fn evaluate(
    cfg: &AppConfig,
    model: Option<&LoadedModel>,
    seqs: &[Sequence],
) -> Result<MatrixReport, CliError> {
    let needs_model = cfg.eval.matrix.conditions.contains(&Condition::Defended);
    match (model, needs_model) {
        (None, true) => Err(CliError::Config(
            "the defended condition needs --checkpoint".into(),
        )),
        (Some(m), true) => {
            if m.image_size() != cfg.eval.matrix.search_size {
                return Err(CliError::Config(format!(
                    "model input is {0}x{0}, eval.matrix.search_size is {1}",
                    m.image_size(),
                    cfg.eval.matrix.search_size
                )));
            }
            let purifier = m.purifier(cfg.purify)?;
            let dtype = m.model.dtype();
            let defense = |x: &Tensor, seed: u64| -> diffdf_core::Result<Tensor> {
                purifier
                    .purify_seeded(&x.to_dtype(dtype)?, seed)?
                    .to_dtype(x.dtype())
                    .map_err(Into::into)
            };
            Ok(run_matrix(seqs, &cfg.eval.matrix, Some(&defense))?)
        }
        (_, false) => Ok(run_matrix(seqs, &cfg.eval.matrix, None)?),
    }
}

/// `eval`: matrix report (`report.csv`, `curves.csv`, `report.json`) and,
/// with `pairs`, held-out image quality (`quality.json`).
pub fn eval_cmd(
    cfg: &AppConfig,
    checkpoint: Option<&Path>,
    sequences: Option<&Path>,
    pairs: Option<&Path>,
    out: &Path,
) -> Result<(MatrixReport, EvalSummary), CliError> {
    let mut run = RunRecord::new("eval", cfg);
    for p in [checkpoint, sequences, pairs].into_iter().flatten() {
        run.input(p)?;
    }
    let model = checkpoint.map(LoadedModel::open).transpose()?;
    let seqs = eval_sequences(cfg, sequences)?;
    let report = run.time("matrix", || evaluate(cfg, model.as_ref(), &seqs))?;
    run.outputs.extend(report.write(out)?);
    let quality = match (pairs, &model) {
        (Some(p), Some(m)) => {
            let ds = PairDataset::load(p, m.model.dtype())?;
            let q = run.time("quality", || quality(&m.purifier(cfg.purify)?, &ds))?;
            let path = out.join("quality.json");
            write_json(&path, &q)?;
            run.outputs.push(path);
            Some(q)
        }
        (Some(_), None) => return Err(CliError::Config("--pairs needs --checkpoint".into())),
        _ => None,
    };
    let summary = EvalSummary {
        aggregates: cfg
            .eval
            .matrix
            .conditions
            .iter()
            .filter_map(|c| report.aggregate(*c).cloned())
            .collect(),
        quality,
    };
    run.summary = serde_json::to_value(&summary).map_err(|e| CliError::Runtime(e.to_string()))?;
    run.write(out)?;
    Ok((report, summary))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// The four loss combinations of the ablation, as `(name, weights)`.
pub fn ablation_configs(full: &LossWeights) -> Vec<(&'static str, LossWeights)> {
    let w = |s: f64, ss: f64| LossWeights {
        lambda_pixel: full.lambda_pixel,
        lambda_semantic: s,
        lambda_ssim: ss,
    };
    vec![
        ("pixel", w(0.0, 0.0)),
        ("pixel+semantic", w(full.lambda_semantic, 0.0)),
        ("pixel+ssim", w(0.0, full.lambda_ssim)),
        ("all", *full),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub lambda_pixel: f64,
    pub lambda_semantic: f64,
    pub lambda_ssim: f64,
    pub success_auc: f64,
    pub precision: f64,
    pub accuracy: f64,
    pub lost_number: usize,
    pub eao_lite: f64,
}

const ABLATION_HEADER: &str =
    "name,lambda_pixel,lambda_semantic,lambda_ssim,success_auc,precision,accuracy,lost_number,eao_lite";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{},{:.6}\n",
            r.name,
            r.lambda_pixel,
            r.lambda_semantic,
            r.lambda_ssim,
            r.success_auc,
            r.precision,
            r.accuracy,
            r.lost_number,
            r.eao_lite
        ));
    }
    s
}

/// Trains one model per loss combination (into `out/<name>/`, resuming any
/// finished or partial run there) and scores each on the defended
/// condition. Writes `ablation.csv` and `ablation.json`.
pub fn ablate_cmd(
    cfg: &AppConfig,
    data: &Path,
    sequences: Option<&Path>,
    out: &Path,
) -> Result<Vec<AblationRow>, CliError> {
    let mut run = RunRecord::new("ablate", cfg);
    run.input(data)?;
    if let Some(s) = sequences {
        run.input(s)?;
    }
    let ds = PairDataset::load(data, cfg.train.precision.dtype())?;
    let seqs = eval_sequences(cfg, sequences)?;
    let mut eval_cfg = cfg.clone();
    eval_cfg.eval.matrix.conditions = vec![Condition::Defended];
    let mut rows = Vec::new();
    let mut per_config = BTreeMap::new();
    for (name, weights) in ablation_configs(&cfg.train.weights) {
        let mut tc = cfg.train.clone();
        tc.weights = weights;
        let dir = out.join(name);
        let ckpt = run.time(&format!("train:{name}"), || train(&tc, &ds, &dir, true))?;
        let model = LoadedModel::from_checkpoint(ckpt)?;
        let report = run.time(&format!("eval:{name}"), || {
            evaluate(&eval_cfg, Some(&model), &seqs)
        })?;
        report.write(&dir)?;
        let agg = report
            .aggregate(Condition::Defended)
            .ok_or_else(|| CliError::Runtime("matrix produced no defended aggregate".into()))?;
        let row = AblationRow {
            name: name.to_string(),
            lambda_pixel: weights.lambda_pixel,
            lambda_semantic: weights.lambda_semantic,
            lambda_ssim: weights.lambda_ssim,
            success_auc: agg.success_auc,
            precision: agg.precision,
            accuracy: agg.accuracy,
            lost_number: agg.lost_number,
            eao_lite: agg.eao_lite,
        };
        per_config.insert(name, row.clone());
        rows.push(row);
    }
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let csv = out.join("ablation.csv");
    std::fs::write(&csv, ablation_csv(&rows)).map_err(|e| CliError::io(&csv, e))?;
    let json = out.join("ablation.json");
    write_json(&json, &rows)?;
    run.outputs.extend([csv, json]);
    run.summary =
        serde_json::to_value(&per_config).map_err(|e| CliError::Runtime(e.to_string()))?;
    run.write(out)?;
    Ok(rows)
}

/// Renders PNG charts from a report or curves CSV (`success.png`,
/// `precision.png`) or a training `loss.csv` (`loss.png`).
pub fn plot_cmd(cfg: &AppConfig, from: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut run = RunRecord::new("plot", cfg);
    let name = from
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or_default();
    let source = if name == "report.csv" || name == "report.json" {
        from.with_file_name("curves.csv")
    } else {
        from.to_path_buf()
    };
    run.input(&source)?;
    let text = std::fs::read_to_string(&source).map_err(|e| CliError::io(&source, e))?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut written = Vec::new();
    if text.starts_with("step,") {
        let path = out.join("loss.png");
        plot::save_chart(&plot::losses_from_csv(&text)?, &path)?;
        written.push(path);
    } else {
        for (curve, series) in plot::curves_from_csv(&text)? {
            let path = out.join(format!("{curve}.png"));
            plot::save_chart(&series, &path)?;
            written.push(path);
        }
    }
    run.outputs.extend(written.iter().cloned());
    run.summary = serde_json::json!({ "charts": written.len() });
    run.write(out)?;
    Ok(written)
}
