use serde::{Deserialize, Serialize};

use super::{iou, BBox, TrackRecord, Tracker};
use crate::data::Sequence;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameStatus {
    /// Tracker (re)initialized from ground truth; not scored.
    Init,
    Tracked,
    /// Overlap dropped to zero.
    Failure,
    /// Waiting out the gap before reinitialization.
    Skipped,
}

/// Result of one reset-based run over a sequence.
///
/// Every summary field is a function of `status` and `overlaps` alone (see
/// [`VotRunResult::from_frames`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotRunResult {
    pub status: Vec<FrameStatus>,
    /// Overlap for scored frames (`Tracked`, `Failure`), `None` otherwise.
    pub overlaps: Vec<Option<f64>>,
    pub failures: Vec<usize>,
    pub reinits: Vec<usize>,
    /// Mean overlap over `Tracked` frames.
    pub accuracy: f64,
    /// Failures per scored frame.
    pub robustness: f64,
    pub lost_number: usize,
    /// Expected overlap averaged over run lengths `1..=N−1` (see `eao_lite`).
    pub eao_lite: f64,
}

impl VotRunResult {
    pub fn from_frames(status: Vec<FrameStatus>, overlaps: Vec<Option<f64>>) -> Self {
        let failures: Vec<usize> = (0..status.len())
            .filter(|&f| status[f] == FrameStatus::Failure)
            .collect();
        let reinits: Vec<usize> = (0..status.len())
            .filter(|&f| status[f] == FrameStatus::Init)
            .collect();
        let tracked: Vec<f64> = (0..status.len())
            .filter(|&f| status[f] == FrameStatus::Tracked)
            .filter_map(|f| overlaps[f])
            .collect();
        let scored = tracked.len() + failures.len();
        let accuracy = if tracked.is_empty() {
            0.0
        } else {
            tracked.iter().sum::<f64>() / tracked.len() as f64
        };
        let robustness = if scored == 0 {
            0.0
        } else {
            failures.len() as f64 / scored as f64
        };
        let eao_lite = eao_lite(&status, &overlaps);
        Self {
            lost_number: failures.len(),
            status,
            overlaps,
            failures,
            reinits,
            accuracy,
            robustness,
            eao_lite,
        }
    }
}

/// Runs start at each `Init` frame. A run ending in failure is padded with
/// zero overlap to length `N−1`; a run cut by the sequence end only counts
/// for lengths it actually reached. `Φ(L)` averages the mean overlap of the
/// first `L` frames over eligible runs; the score is the mean of `Φ(L)` over
/// every `L` with at least one eligible run.
fn eao_lite(status: &[FrameStatus], overlaps: &[Option<f64>]) -> f64 {
    let n = status.len().saturating_sub(1);
    let mut runs: Vec<(Vec<f64>, bool)> = Vec::new();
    for (f, s) in status.iter().enumerate() {
        match s {
            FrameStatus::Init => runs.push((Vec::new(), false)),
            FrameStatus::Tracked | FrameStatus::Failure => {
                if let Some((run, failed)) = runs.last_mut() {
                    if !*failed {
                        run.push(overlaps[f].unwrap_or(0.0));
                        *failed = *s == FrameStatus::Failure;
                    }
                }
            }
            FrameStatus::Skipped => {}
        }
    }
    let mut total = 0.0;
    let mut lengths = 0usize;
    for l in 1..=n {
        let mut sum = 0.0;
        let mut count = 0usize;
        for (run, failed) in &runs {
            if *failed || run.len() >= l {
                sum += run.iter().take(l).sum::<f64>() / l as f64;
                count += 1;
            }
        }
        if count > 0 {
            total += sum / count as f64;
            lengths += 1;
        }
    }
    if lengths == 0 {
        0.0
    } else {
        total / lengths as f64
    }
}

/// What the protocol wants done at a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Action {
    Init,
    Predict,
    Skip,
}

/// Per-sequence protocol state shared by the one-pass and reset-based runs.
#[derive(Debug, Clone)]
pub(crate) struct Session {
    reinit_gap: Option<usize>,
    next_init: usize,
    status: Vec<FrameStatus>,
    overlaps: Vec<Option<f64>>,
    record: TrackRecord,
}

impl Session {
    /// `reinit_gap = None` gives one-pass evaluation (no failure handling).
    pub(crate) fn new(len: usize, reinit_gap: Option<usize>) -> Self {
        Self {
            reinit_gap,
            next_init: 0,
            status: Vec::with_capacity(len),
            overlaps: Vec::with_capacity(len),
            record: TrackRecord::default(),
        }
    }

    pub(crate) fn action(&self, f: usize) -> Action {
        use std::cmp::Ordering::*;
        match f.cmp(&self.next_init) {
            Less => Action::Skip,
            Equal => Action::Init,
            Greater => Action::Predict,
        }
    }

    pub(crate) fn on_init(&mut self) {
        self.status.push(FrameStatus::Init);
        self.overlaps.push(None);
    }

    pub(crate) fn on_skip(&mut self) {
        self.status.push(FrameStatus::Skipped);
        self.overlaps.push(None);
    }

    pub(crate) fn on_predict(&mut self, f: usize, pred: BBox, gt: BBox) {
        let o = iou(&pred, &gt);
        self.record.push(f, pred, gt);
        self.overlaps.push(Some(o));
        match self.reinit_gap {
            Some(gap) if o <= 0.0 => {
                self.status.push(FrameStatus::Failure);
                self.next_init = f + gap.max(1);
            }
            _ => self.status.push(FrameStatus::Tracked),
        }
    }

    pub(crate) fn into_record(self) -> TrackRecord {
        self.record
    }

    pub(crate) fn into_vot(self) -> VotRunResult {
        VotRunResult::from_frames(self.status, self.overlaps)
    }
}

/// Reset-based evaluation: a frame with zero overlap is a failure and the
/// tracker is reinitialized from ground truth `reinit_gap` frames later.
pub fn vot_evaluate(
    tracker: &mut dyn Tracker,
    seq: &Sequence,
    reinit_gap: usize,
) -> Result<VotRunResult> {
    seq.validate()?;
    if reinit_gap == 0 {
        return Err(Error::InvalidArgument("reinit gap must be >= 1".into()));
    }
    let mut s = Session::new(seq.len(), Some(reinit_gap));
    for f in 0..seq.len() {
        match s.action(f) {
            Action::Init => {
                tracker.init(&seq.frames[f], seq.boxes[f])?;
                s.on_init();
            }
            Action::Predict => {
                let p = tracker.track(&seq.frames[f])?;
                s.on_predict(f, p, seq.boxes[f]);
            }
            Action::Skip => s.on_skip(),
        }
    }
    Ok(s.into_vot())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    /// Replays ground truth, or a far-away box on chosen frames.
    struct Scripted {
        boxes: Vec<BBox>,
        fail: Box<dyn Fn(usize) -> bool>,
        frame: usize,
    }

    impl Tracker for Scripted {
        fn init(&mut self, frame: &RgbImage, _b: BBox) -> Result<()> {
            self.frame = frame.get_pixel(0, 0).0[0] as usize;
            Ok(())
        }
        fn track(&mut self, frame: &RgbImage) -> Result<BBox> {
            self.frame = frame.get_pixel(0, 0).0[0] as usize;
            Ok(if (self.fail)(self.frame) {
                BBox::new(1e4, 1e4, 5.0, 5.0)
            } else {
                self.boxes[self.frame]
            })
        }
    }

    fn seq(n: usize) -> Sequence {
        Sequence {
            name: "s".into(),
            frames: (0..n)
                .map(|i| RgbImage::from_pixel(2, 2, image::Rgb([i as u8, 0, 0])))
                .collect(),
            boxes: (0..n)
                .map(|i| BBox::new(i as f64, 0.0, 10.0, 10.0))
                .collect(),
        }
    }

    #[test]
    fn perfect_tracker() {
        let s = seq(20);
        let mut t = Scripted {
            boxes: s.boxes.clone(),
            fail: Box::new(|_| false),
            frame: 0,
        };
        let r = vot_evaluate(&mut t, &s, 5).unwrap();
        assert_eq!(r.lost_number, 0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.eao_lite, 1.0);
        assert_eq!(r.reinits, vec![0]);
    }

    #[test]
    fn always_failing_tracker_hand_count() {
        // Init 0, fail 1, skip 2–5, init 6, fail 7, skip 8–11, init 12, fail 13,
        // skip 14–17, init 18, fail 19, skip 20–23, init 24 → 4 failures.
        let s = seq(25);
        let mut t = Scripted {
            boxes: s.boxes.clone(),
            fail: Box::new(|_| true),
            frame: 0,
        };
        let r = vot_evaluate(&mut t, &s, 5).unwrap();
        assert_eq!(r.failures, vec![1, 7, 13, 19]);
        assert_eq!(r.reinits, vec![0, 6, 12, 18, 24]);
        assert_eq!(r.lost_number, 4);
        assert!((r.lost_number as f64 - 25.0 / 5.0).abs() <= 1.0);
        assert_eq!(r.accuracy, 0.0);
        assert_eq!(r.robustness, 1.0);
        assert_eq!(r.eao_lite, 0.0);
    }

    #[test]
    fn summaries_recompute_from_frames() {
        let s = seq(30);
        let mut t = Scripted {
            boxes: s.boxes.clone(),
            fail: Box::new(|f| f == 4 || f == 17),
            frame: 0,
        };
        let r = vot_evaluate(&mut t, &s, 3).unwrap();
        assert_eq!(r.failures, vec![4, 17]);
        assert_eq!(r.reinits, vec![0, 7, 20]);
        let again = VotRunResult::from_frames(r.status.clone(), r.overlaps.clone());
        assert_eq!(again, r);
        let tracked: Vec<f64> = r
            .status
            .iter()
            .zip(&r.overlaps)
            .filter(|(s, _)| **s == FrameStatus::Tracked)
            .map(|(_, o)| o.unwrap())
            .collect();
        assert_eq!(
            r.accuracy,
            tracked.iter().sum::<f64>() / tracked.len() as f64
        );
        assert!(r.eao_lite > 0.0 && r.eao_lite < 1.0);
    }
}
