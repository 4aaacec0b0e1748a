//! PNG line charts for success/precision curves and training losses.
//!
//! Charts carry axes, a 10×10 grid, and one colored polyline per series.
//! There is no text rendering; series colors follow [`PALETTE`] in the order
//! the series are given, and the legend is a column of swatches in the
//! top-right corner in that same order.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::CliError;

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 480;
const MARGIN: f32 = 48.0;

/// Original, attacked, defended, then extra series.
pub const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [214, 39, 40],
    [44, 160, 44],
    [255, 127, 14],
    [148, 103, 189],
    [127, 127, 127],
];

pub type Series = (String, Vec<(f64, f64)>);

/// Straight segment sampled once per pixel of its longer axis; points off
/// the canvas are skipped.
fn draw_line(img: &mut RgbImage, a: (f32, f32), b: (f32, f32), color: Rgb<u8>) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for i in 0..=steps {
        let f = i as f32 / steps as f32;
        let (x, y) = (
            (a.0 + f * (b.0 - a.0)).round(),
            (a.1 + f * (b.1 - a.1)).round(),
        );
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

fn fill_rect(img: &mut RgbImage, x: u32, y: u32, w: u32, h: u32, color: Rgb<u8>) {
    for yy in y..(y + h).min(img.height()) {
        for xx in x..(x + w).min(img.width()) {
            img.put_pixel(xx, yy, color);
        }
    }
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|(_, p)| p.iter().copied());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let widen = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
    (widen(x0, x1), widen(y0.min(0.0), y1))
}

/// Renders `series` as a line chart; axis ranges cover all finite points
/// (y always includes 0).
pub fn line_chart(series: &[Series]) -> Result<RgbImage, CliError> {
    if series.iter().all(|(_, p)| p.is_empty()) {
        return Err(CliError::Data("nothing to plot".into()));
    }
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let (w, h) = (WIDTH as f32 - 2.0 * MARGIN, HEIGHT as f32 - 2.0 * MARGIN);
    let px = |x: f64| MARGIN + ((x - x0) / (x1 - x0)) as f32 * w;
    let py = |y: f64| HEIGHT as f32 - MARGIN - ((y - y0) / (y1 - y0)) as f32 * h;
    let grid = Rgb([225, 225, 225]);
    for i in 0..=10 {
        let f = i as f32 / 10.0;
        draw_line(
            &mut img,
            (MARGIN + f * w, MARGIN),
            (MARGIN + f * w, MARGIN + h),
            grid,
        );
        draw_line(
            &mut img,
            (MARGIN, MARGIN + f * h),
            (MARGIN + w, MARGIN + f * h),
            grid,
        );
    }
    let axis = Rgb([0, 0, 0]);
    draw_line(
        &mut img,
        (MARGIN, MARGIN + h),
        (MARGIN + w, MARGIN + h),
        axis,
    );
    draw_line(&mut img, (MARGIN, MARGIN), (MARGIN, MARGIN + h), axis);
    for (k, (_, pts)) in series.iter().enumerate() {
        let color = Rgb(PALETTE[k % PALETTE.len()]);
        let finite: Vec<(f32, f32)> = pts
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (px(x), py(y)))
            .collect();
        for seg in finite.windows(2) {
            // Two-pixel-thick strokes.
            draw_line(&mut img, seg[0], seg[1], color);
            draw_line(
                &mut img,
                (seg[0].0, seg[0].1 + 1.0),
                (seg[1].0, seg[1].1 + 1.0),
                color,
            );
        }
        let (sx, sy) = (
            WIDTH - MARGIN as u32 - 20,
            MARGIN as u32 + 8 + 16 * k as u32,
        );
        fill_rect(&mut img, sx, sy, 14, 10, color);
    }
    Ok(img)
}

pub fn save_chart(series: &[Series], path: &Path) -> Result<(), CliError> {
    line_chart(series)?
        .save(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Groups a `condition,curve,threshold,value` CSV into one series list per
/// curve name, conditions in first-seen order.
pub fn curves_from_csv(text: &str) -> Result<BTreeMap<String, Vec<Series>>, CliError> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("condition,curve,threshold,value") {
        return Err(CliError::Data("curves CSV header not recognized".into()));
    }
    let mut out: BTreeMap<String, Vec<Series>> = BTreeMap::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| CliError::Data(format!("{line}: {e}")))
        };
        if f.len() != 4 {
            return Err(CliError::Data(format!("malformed curve row: {line}")));
        }
        let (x, y) = (parse(f[2])?, parse(f[3])?);
        let list = out.entry(f[1].to_string()).or_default();
        match list.iter_mut().find(|(name, _)| name == f[0]) {
            Some((_, pts)) => pts.push((x, y)),
            None => list.push((f[0].to_string(), vec![(x, y)])),
        }
    }
    Ok(out)
}

/// One series per loss column of a training `loss.csv`.
pub fn losses_from_csv(text: &str) -> Result<Vec<Series>, CliError> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| CliError::Data("empty loss CSV".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("step") {
        return Err(CliError::Data("loss CSV header not recognized".into()));
    }
    let mut series: Vec<Series> = header[1..]
        .iter()
        .map(|n| (n.clone(), Vec::new()))
        .collect();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let vals: Vec<f64> = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Data(format!("{line}: {e}")))?;
        if vals.len() != header.len() {
            return Err(CliError::Data(format!("malformed loss row: {line}")));
        }
        for (s, v) in series.iter_mut().zip(&vals[1..]) {
            s.1.push((vals[0], *v));
        }
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_draws_each_series_color() {
        let s = vec![
            ("a".to_string(), vec![(0.0, 0.0), (1.0, 1.0)]),
            ("b".to_string(), vec![(0.0, 1.0), (1.0, 0.0)]),
        ];
        let img = line_chart(&s).unwrap();
        for c in &PALETTE[..2] {
            assert!(img.pixels().any(|p| p.0 == *c));
        }
        assert!(line_chart(&[("x".into(), vec![])]).is_err());
    }

    #[test]
    fn curve_csv_grouping() {
        let text = "condition,curve,threshold,value\noriginal,success,0.0,1.0\noriginal,success,0.5,0.5\nattacked,success,0.0,0.9\noriginal,precision,0,0\n";
        let g = curves_from_csv(text).unwrap();
        assert_eq!(g["success"].len(), 2);
        assert_eq!(g["success"][0].1.len(), 2);
        assert_eq!(g["precision"].len(), 1);
        assert!(curves_from_csv("bad\n").is_err());
    }

    #[test]
    fn loss_csv_series() {
        let s = losses_from_csv("step,simple,total\n1,0.5,0.7\n2,0.4,0.6\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].1, vec![(1.0, 0.7), (2.0, 0.6)]);
    }
}
