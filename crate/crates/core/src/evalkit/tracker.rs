use candle_core::Tensor;
use image::RgbImage;

use super::BBox;
use crate::data::{crop_region, CropSpec};
use crate::error::{Error, Result};
use crate::tensor::to_vec_f64;

/// A single-object tracker driven frame by frame.
pub trait Tracker {
    fn init(&mut self, frame: &RgbImage, b: BBox) -> Result<()>;
    fn track(&mut self, frame: &RgbImage) -> Result<BBox>;
}

/// Zero-mean normalized cross-correlation of `template` (`C×h×w`) at every
/// valid offset of `search` (`C×H×W`), row-major over `(H−h+1)×(W−w+1)`.
/// Windows or templates with zero variance score 0.
pub fn ncc_map(template: &Tensor, search: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, th, tw) = template.dims3()?;
    let (cs, sh, sw) = search.dims3()?;
    if c != cs || th > sh || tw > sw {
        return Err(Error::ShapeMismatch {
            lhs: template.dims().to_vec(),
            rhs: search.dims().to_vec(),
        });
    }
    let t = to_vec_f64(template)?;
    let s = to_vec_f64(search)?;
    let n = (c * th * tw) as f64;
    let t_mean = t.iter().sum::<f64>() / n;
    let tz: Vec<f64> = t.iter().map(|v| v - t_mean).collect();
    let t_norm = tz.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (rows, cols) = (sh - th + 1, sw - tw + 1);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for q in 0..cols {
            let (mut sum, mut sq, mut cross) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                for i in 0..th {
                    let base = ch * sh * sw + (r + i) * sw + q;
                    let tb = ch * th * tw + i * tw;
                    for j in 0..tw {
                        let v = s[base + j];
                        sum += v;
                        sq += v * v;
                        cross += tz[tb + j] * v;
                    }
                }
            }
            let var = (sq - sum * sum / n).max(0.0);
            let den = t_norm * var.sqrt();
            out[r * cols + q] = if den > 1e-12 { cross / den } else { 0.0 };
        }
    }
    Ok((out, rows, cols))
}

/// Best-matching window `(row, col, score)`; ties resolve to the smallest
/// row-major index.
pub fn ncc_argmax(template: &Tensor, search: &Tensor) -> Result<(usize, usize, f64)> {
    let (m, _, cols) = ncc_map(template, search)?;
    let mut best = 0;
    for (k, &v) in m.iter().enumerate() {
        if v > m[best] {
            best = k;
        }
    }
    Ok((best / cols, best % cols, m[best]))
}

/// One correlation-tracker step: the search crop was taken around
/// `prev_box` with `search_spec`; returns the box moved to the NCC peak,
/// keeping its size.
pub fn toy_tracker_step(
    template: &Tensor,
    search: &Tensor,
    prev_box: &BBox,
    search_spec: &CropSpec,
) -> Result<BBox> {
    let (_, th, tw) = template.dims3()?;
    let (_, sh, sw) = search.dims3()?;
    let (row, col, _) = ncc_argmax(template, search)?;
    let scale = search_spec.side(prev_box) / search_spec.output_size as f64;
    let dx = (col as f64 + tw as f64 / 2.0 - sw as f64 / 2.0) * scale;
    let dy = (row as f64 + th as f64 / 2.0 - sh as f64 / 2.0) * scale;
    let (cx, cy) = prev_box.center();
    Ok(BBox::from_center(cx + dx, cy + dy, prev_box.w, prev_box.h))
}

/// Normalized-cross-correlation tracker with a fixed first-frame template.
#[derive(Debug, Clone)]
pub struct NccTracker {
    pub template_spec: CropSpec,
    pub search_spec: CropSpec,
    template: Option<Tensor>,
    bbox: BBox,
}

impl NccTracker {
    /// Template crops at half the search resolution, so both share one
    /// pixel scale (the search context factor is twice the template's).
    pub fn new(search_size: usize) -> Self {
        Self {
            template_spec: CropSpec::template(search_size / 2),
            search_spec: CropSpec::search(search_size),
            template: None,
            bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
        }
    }

    pub fn template(&self) -> Option<&Tensor> {
        self.template.as_ref()
    }

    pub fn current_box(&self) -> BBox {
        self.bbox
    }

    /// Search crop of `frame` around the current box.
    pub fn search_crop(&self, frame: &RgbImage) -> Result<Tensor> {
        crop_region(frame, &self.bbox, &self.search_spec)
    }

    /// Updates the state from a (possibly modified) search crop.
    pub fn locate(&mut self, search: &Tensor) -> Result<BBox> {
        let template = self
            .template
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("tracker used before init".into()))?;
        self.bbox = toy_tracker_step(template, search, &self.bbox, &self.search_spec)?;
        Ok(self.bbox)
    }
}

impl Tracker for NccTracker {
    fn init(&mut self, frame: &RgbImage, b: BBox) -> Result<()> {
        self.template = Some(crop_region(frame, &b, &self.template_spec)?);
        self.bbox = b;
        Ok(())
    }

    fn track(&mut self, frame: &RgbImage) -> Result<BBox> {
        let s = self.search_crop(frame)?;
        self.locate(&s)
    }
}
