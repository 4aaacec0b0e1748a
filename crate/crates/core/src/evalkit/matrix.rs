use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vot::{Action, Session};
use super::{
    normalized_precision, precision_at, precision_curve, success_auc, success_curve, NccTracker,
    Tracker, PRECISION_THRESHOLD_PX,
};
use crate::attacks::{
    decoy_surrogate, derive_seed, feature_surrogate, gradient_attack, PerturbationBudget, Surrogate,
};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Original,
    Attacked,
    /// Attacked search crops passed through the defense before matching.
    Defended,
}

impl Condition {
    pub fn name(self) -> &'static str {
        match self {
            Condition::Original => "original",
            Condition::Attacked => "attacked",
            Condition::Defended => "defended",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "original" | "clean" => Ok(Condition::Original),
            "attacked" => Ok(Condition::Attacked),
            "defended" | "attacked+purified" => Ok(Condition::Defended),
            other => Err(Error::InvalidArgument(format!(
                "unknown condition {other:?}"
            ))),
        }
    }
}

/// Online attack on every search crop. The decoy surrogate pushes the
/// tracker's NCC peak `decoy_offset` crop pixels away from where the clean
/// crop puts it; the feature surrogate is tracker-agnostic and maximizes the
/// crop's feature distance under the extractor in `features`. `Auto` means
/// decoy here, since every attacked crop is a search crop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackingAttack {
    #[serde(default = "decoy")]
    pub surrogate: Surrogate,
    pub budget: PerturbationBudget,
    pub decoy_offset: usize,
    #[serde(default)]
    pub features: FeatureConfig,
    pub seed: u64,
}

fn decoy() -> Surrogate {
    Surrogate::Decoy
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    pub conditions: Vec<Condition>,
    /// Search crop resolution; the template is half of it.
    pub search_size: usize,
    pub reinit_gap: usize,
    pub attack: TrackingAttack,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: Condition,
    /// Sequence name, or `ALL` for the per-condition aggregate.
    pub sequence: String,
    pub frames: usize,
    pub success_auc: f64,
    pub precision: f64,
    pub norm_precision: f64,
    pub accuracy: f64,
    pub robustness: f64,
    pub lost_number: usize,
    pub eao_lite: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub condition: Condition,
    pub curve: String,
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub rows: Vec<ReportRow>,
    pub curves: Vec<CurvePoint>,
}

pub const AGGREGATE: &str = "ALL";
const REPORT_HEADER: &str =
    "condition,sequence,frames,success_auc,precision,norm_precision,accuracy,robustness,lost_number,eao_lite";

impl MatrixReport {
    pub fn aggregate(&self, c: Condition) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.condition == c && r.sequence == AGGREGATE)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
                r.condition.name(),
                r.sequence,
                r.frames,
                r.success_auc,
                r.precision,
                r.norm_precision,
                r.accuracy,
                r.robustness,
                r.lost_number,
                r.eao_lite
            );
        }
        s
    }

    pub fn curves_csv(&self) -> String {
        let mut s = String::from("condition,curve,threshold,value\n");
        for p in &self.curves {
            let _ = writeln!(
                s,
                "{},{},{:.4},{:.6}",
                p.condition.name(),
                p.curve,
                p.threshold,
                p.value
            );
        }
        s
    }

    /// Parses a report CSV written by [`MatrixReport::to_csv`].
    pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(REPORT_HEADER) {
            return Err(Error::Data("report CSV header not recognized".into()));
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 10 {
                    return Err(Error::Data(format!("malformed report row: {l}")));
                }
                let num = |i: usize| {
                    f[i].parse::<f64>()
                        .map_err(|e| Error::Data(format!("{l}: {e}")))
                };
                Ok(ReportRow {
                    condition: f[0].parse()?,
                    sequence: f[1].to_string(),
                    frames: num(2)? as usize,
                    success_auc: num(3)?,
                    precision: num(4)?,
                    norm_precision: num(5)?,
                    accuracy: num(6)?,
                    robustness: num(7)?,
                    lost_number: num(8)? as usize,
                    eao_lite: num(9)?,
                })
            })
            .collect()
    }

    /// Writes `report.csv`, `curves.csv`, and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        let files = [
            ("report.csv", self.to_csv()),
            ("curves.csv", self.curves_csv()),
            ("report.json", json),
        ];
        files
            .into_iter()
            .map(|(name, body)| {
                let p = dir.join(name);
                std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
                Ok(p)
            })
            .collect()
    }
}

/// Batched defense applied to `N×3×S×S` search crops with a per-call seed.
pub type Defense<'a> = dyn Fn(&Tensor, u64) -> Result<Tensor> + 'a;

fn attack_crop(
    tracker: &NccTracker,
    crop: &Tensor,
    attack: &TrackingAttack,
    extractor: Option<&FeatureExtractor>,
    seed: u64,
) -> Result<Tensor> {
    if let Some(fe) = extractor {
        let x = crop.to_dtype(fe.dtype())?;
        let pair = gradient_attack(feature_surrogate(fe, &x)?, &x, &attack.budget, seed)?;
        return Ok(pair.adversarial.to_dtype(crop.dtype())?);
    }
    let template = tracker
        .template()
        .ok_or_else(|| Error::InvalidArgument("tracker used before init".into()))?;
    let (_, th, tw) = template.dims3()?;
    let (_, sh, sw) = crop.dims3()?;
    let (row, col, _) = super::ncc_argmax(template, crop)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random_range(0.0..std::f64::consts::TAU);
    let off = attack.decoy_offset as f64;
    let place = |v: f64, hi: usize| v.round().clamp(0.0, hi as f64) as usize;
    let decoy = (
        place(row as f64 + off * angle.sin(), sh - th),
        place(col as f64 + off * angle.cos(), sw - tw),
    );
    let pair = gradient_attack(
        decoy_surrogate(template, (row, col), decoy),
        crop,
        &attack.budget,
        seed,
    )?;
    Ok(pair.adversarial)
}

struct Lane<'s> {
    seq: &'s Sequence,
    tracker: NccTracker,
    session: Session,
}

/// Runs one protocol (one-pass when `reinit_gap` is `None`) for all
/// sequences in lockstep so defended crops are purified in batches.
fn run_protocol(
    sequences: &[Sequence],
    cfg: &MatrixConfig,
    condition: Condition,
    reinit_gap: Option<usize>,
    defense: Option<&Defense<'_>>,
    extractor: Option<&FeatureExtractor>,
) -> Result<Vec<Session>> {
    let mut lanes: Vec<Lane> = sequences
        .iter()
        .map(|seq| Lane {
            seq,
            tracker: NccTracker::new(cfg.search_size),
            session: Session::new(seq.len(), reinit_gap),
        })
        .collect();
    let protocol = reinit_gap.map_or(0, |g| g as u64 + 1);
    let longest = sequences.iter().map(Sequence::len).max().unwrap_or(0);
    for f in 0..longest {
        let mut pending = Vec::new();
        let mut crops = Vec::new();
        for (i, lane) in lanes.iter_mut().enumerate() {
            if f >= lane.seq.len() {
                continue;
            }
            match lane.session.action(f) {
                Action::Init => {
                    lane.tracker.init(&lane.seq.frames[f], lane.seq.boxes[f])?;
                    lane.session.on_init();
                }
                Action::Skip => lane.session.on_skip(),
                Action::Predict => {
                    let mut crop = lane.tracker.search_crop(&lane.seq.frames[f])?;
                    if condition != Condition::Original {
                        let seed = derive_seed(cfg.attack.seed, &[i as u64, f as u64, protocol]);
                        crop = attack_crop(&lane.tracker, &crop, &cfg.attack, extractor, seed)?;
                    }
                    pending.push(i);
                    crops.push(crop);
                }
            }
        }
        if pending.is_empty() {
            continue;
        }
        if condition == Condition::Defended {
            let defense = defense.ok_or_else(|| {
                Error::InvalidArgument("defended condition needs a purifier".into())
            })?;
            let batch = Tensor::stack(&crops, 0)?;
            let out = defense(&batch, derive_seed(cfg.seed, &[f as u64, protocol]))?
                .to_dtype(batch.dtype())?;
            crops = (0..pending.len())
                .map(|k| out.get(k))
                .collect::<candle_core::Result<_>>()?;
        }
        for (i, crop) in pending.into_iter().zip(crops) {
            let lane = &mut lanes[i];
            let pred = lane.tracker.locate(&crop)?;
            lane.session.on_predict(f, pred, lane.seq.boxes[f]);
        }
    }
    Ok(lanes.into_iter().map(|l| l.session).collect())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates every condition with both the one-pass and the reset-based
/// protocol. Rows: one per (condition, sequence) plus an `ALL` row per
/// condition averaging the sequences (lost numbers are summed).
pub fn run_matrix(
    sequences: &[Sequence],
    cfg: &MatrixConfig,
    defense: Option<&Defense<'_>>,
) -> Result<MatrixReport> {
    if sequences.is_empty() {
        return Err(Error::Data("no sequences to evaluate".into()));
    }
    for s in sequences {
        s.validate()?;
    }
    if cfg.reinit_gap == 0 || cfg.search_size < 4 || cfg.search_size % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "reinit_gap {} / search_size {} not usable",
            cfg.reinit_gap, cfg.search_size
        )));
    }
    let extractor = match cfg.attack.surrogate {
        Surrogate::Feature => Some(FeatureExtractor::from_config(
            &cfg.attack.features,
            candle_core::DType::F32,
            &candle_core::Device::Cpu,
        )?),
        Surrogate::Decoy | Surrogate::Auto => None,
    };
    let extractor = extractor.as_ref();
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &condition in &cfg.conditions {
        let started = std::time::Instant::now();
        let ope = run_protocol(sequences, cfg, condition, None, defense, extractor)?;
        let vot = run_protocol(
            sequences,
            cfg,
            condition,
            Some(cfg.reinit_gap),
            defense,
            extractor,
        )?;
        let mut per_seq = Vec::new();
        let mut success = vec![0.0; super::SUCCESS_THRESHOLDS];
        let mut precision = vec![0.0; 51];
        for ((seq, o), v) in sequences.iter().zip(ope).zip(vot) {
            let record = o.into_record();
            let vr = v.into_vot();
            for (acc, p) in success.iter_mut().zip(success_curve(&record)) {
                *acc += p.1 / sequences.len() as f64;
            }
            for (acc, p) in precision.iter_mut().zip(precision_curve(&record)) {
                *acc += p.1 / sequences.len() as f64;
            }
            per_seq.push(ReportRow {
                condition,
                sequence: seq.name.clone(),
                frames: record.frames.len(),
                success_auc: success_auc(&record),
                precision: precision_at(&record, PRECISION_THRESHOLD_PX),
                norm_precision: normalized_precision(&record),
                accuracy: vr.accuracy,
                robustness: vr.robustness,
                lost_number: vr.lost_number,
                eao_lite: vr.eao_lite,
            });
        }
        let agg = ReportRow {
            condition,
            sequence: AGGREGATE.into(),
            frames: per_seq.iter().map(|r| r.frames).sum(),
            success_auc: mean(per_seq.iter().map(|r| r.success_auc)),
            precision: mean(per_seq.iter().map(|r| r.precision)),
            norm_precision: mean(per_seq.iter().map(|r| r.norm_precision)),
            accuracy: mean(per_seq.iter().map(|r| r.accuracy)),
            robustness: mean(per_seq.iter().map(|r| r.robustness)),
            lost_number: per_seq.iter().map(|r| r.lost_number).sum(),
            eao_lite: mean(per_seq.iter().map(|r| r.eao_lite)),
        };
        log::info!(
            "{}: success AUC {:.4}, lost {} ({:.1?})",
            condition.name(),
            agg.success_auc,
            agg.lost_number,
            started.elapsed()
        );
        rows.extend(per_seq);
        rows.push(agg);
        let n = super::SUCCESS_THRESHOLDS - 1;
        curves.extend(success.into_iter().enumerate().map(|(i, v)| CurvePoint {
            condition,
            curve: "success".into(),
            threshold: i as f64 / n as f64,
            value: v,
        }));
        curves.extend(precision.into_iter().enumerate().map(|(i, v)| CurvePoint {
            condition,
            curve: "precision".into(),
            threshold: i as f64,
            value: v,
        }));
    }
    Ok(MatrixReport { rows, curves })
}
