//! Tracking evaluation: overlap metrics, a correlation tracker, a
//! VOT-style reset protocol, and the attack × defense comparison runner.

mod matrix;
mod tracker;
mod vot;

pub use matrix::{
    run_matrix, Condition, CurvePoint, MatrixConfig, MatrixReport, ReportRow, TrackingAttack,
};
pub use tracker::{ncc_argmax, ncc_map, toy_tracker_step, NccTracker, Tracker};
pub use vot::{vot_evaluate, FrameStatus, VotRunResult};

use serde::{Deserialize, Serialize};

/// Axis-aligned box with top-left origin, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn diagonal(&self) -> f64 {
        self.w.hypot(self.h)
    }
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = ((a.x + a.w).min(b.x + b.w) - a.x.max(b.x)).max(0.0);
    let ih = ((a.y + a.h).min(b.y + b.h) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub frame: usize,
    pub pred: BBox,
    pub gt: BBox,
    pub overlap: f64,
    pub center_error: f64,
    /// Center error divided by the ground-truth box diagonal.
    pub normalized_center_error: f64,
}

impl FrameResult {
    pub fn new(frame: usize, pred: BBox, gt: BBox) -> Self {
        let (px, py) = pred.center();
        let (gx, gy) = gt.center();
        let center_error = (px - gx).hypot(py - gy);
        let diag = gt.diagonal();
        Self {
            frame,
            pred,
            gt,
            overlap: iou(&pred, &gt),
            center_error,
            normalized_center_error: if diag > 0.0 {
                center_error / diag
            } else {
                f64::INFINITY
            },
        }
    }
}

/// Per-frame one-pass results for one sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frames: Vec<FrameResult>,
}

impl TrackRecord {
    pub fn push(&mut self, frame: usize, pred: BBox, gt: BBox) {
        self.frames.push(FrameResult::new(frame, pred, gt));
    }
}

pub const SUCCESS_THRESHOLDS: usize = 51;
pub const PRECISION_THRESHOLD_PX: f64 = 20.0;
pub const NORMALIZED_PRECISION_THRESHOLD: f64 = 0.2;

fn fraction(frames: &[FrameResult], pass: impl Fn(&FrameResult) -> bool) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    frames.iter().filter(|f| pass(f)).count() as f64 / frames.len() as f64
}

/// Success rate at overlap thresholds `0, 0.02, …, 1` (strictly greater).
pub fn success_curve(r: &TrackRecord) -> Vec<(f64, f64)> {
    (0..SUCCESS_THRESHOLDS)
        .map(|i| {
            let th = i as f64 / (SUCCESS_THRESHOLDS - 1) as f64;
            (th, fraction(&r.frames, |f| f.overlap > th))
        })
        .collect()
}

pub fn success_auc(r: &TrackRecord) -> f64 {
    let c = success_curve(r);
    c.iter().map(|p| p.1).sum::<f64>() / c.len() as f64
}

/// Fraction of frames whose center error is below `threshold_px`.
pub fn precision_at(r: &TrackRecord, threshold_px: f64) -> f64 {
    fraction(&r.frames, |f| f.center_error < threshold_px)
}

/// Precision at `0, 1, …, 50` pixels.
pub fn precision_curve(r: &TrackRecord) -> Vec<(f64, f64)> {
    (0..=50)
        .map(|px| (px as f64, precision_at(r, px as f64)))
        .collect()
}

/// Fraction of frames whose center error, divided by the ground-truth
/// diagonal, is below 0.2.
pub fn normalized_precision(r: &TrackRecord) -> f64 {
    fraction(&r.frames, |f| {
        f.normalized_center_error < NORMALIZED_PRECISION_THRESHOLD
    })
}

/// Mean normalized precision over thresholds `0, 0.01, …, 0.5`.
pub fn normalized_precision_auc(r: &TrackRecord) -> f64 {
    let n = 51;
    (0..n)
        .map(|i| {
            let th = 0.5 * i as f64 / (n - 1) as f64;
            fraction(&r.frames, |f| f.normalized_center_error < th)
        })
        .sum::<f64>()
        / n as f64
}
