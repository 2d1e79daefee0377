use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::plates::PixelBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    /// Use the boxes stored with the sample.
    Oracle,
    /// Column-profile segmentation of the image itself.
    Projection,
}

/// Otsu threshold of values in `[0, 255]`: pixels `<= t` form the dark
/// class. `None` for images without two populated classes.
pub fn otsu_threshold(values: &[f64]) -> Option<usize> {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[v.round().clamp(0.0, 255.0) as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = None;
    let mut best_var = 0.0;
    for (t, &c) in hist.iter().enumerate() {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best = Some(t);
        }
    }
    best
}

/// Splits dark-ink text into per-character boxes from the column profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSegmenter {
    /// Expected glyph cell width and inter-glyph gap, used to split runs
    /// where neighbouring characters have merged.
    pub glyph_width: usize,
    pub gap: usize,
    /// A column holds ink when at least this fraction of its rows are dark.
    pub column_fraction: f64,
}

impl ProjectionSegmenter {
    pub fn new(glyph_width: usize, gap: usize) -> Self {
        ProjectionSegmenter {
            glyph_width,
            gap,
            column_fraction: 0.05,
        }
    }

    pub fn segment(&self, image: &Image) -> Vec<PixelBox> {
        let luma = image.luma();
        let (w, h) = (luma.width(), luma.height());
        let px = luma.data();
        if w == 0 || h == 0 {
            return Vec::new();
        }
        let Some(t) = otsu_threshold(px) else {
            return Vec::new();
        };
        let ink: Vec<bool> = px.iter().map(|&v| v.round() <= t as f64).collect();
        let min_count = ((self.column_fraction * h as f64).ceil() as usize).max(1);
        let cols: Vec<bool> = (0..w)
            .map(|x| (0..h).filter(|&y| ink[y * w + x]).count() >= min_count)
            .collect();

        let mut runs = Vec::new();
        let mut x = 0;
        while x < w {
            if !cols[x] {
                x += 1;
                continue;
            }
            let start = x;
            while x < w && cols[x] {
                x += 1;
            }
            runs.push((start, x));
        }

        let min_width = (self.glyph_width / 4).max(2);
        let pitch = (self.glyph_width + self.gap) as f64;
        let mut boxes = Vec::new();
        for (x0, x1) in runs {
            let rw = x1 - x0;
            if rw < min_width {
                continue;
            }
            let parts = (((rw + self.gap) as f64 / pitch).round() as usize).max(1);
            for k in 0..parts {
                let a = x0 + k * rw / parts;
                let b = x0 + (k + 1) * rw / parts;
                if let Some((y0, y1)) = row_extent(&ink, w, h, a, b) {
                    boxes.push(PixelBox::new(a as u32, y0 as u32, b as u32, y1 as u32));
                }
            }
        }
        boxes
    }
}

/// Rows `[y0, y1)` holding ink within columns `[a, b)`.
fn row_extent(ink: &[bool], w: usize, h: usize, a: usize, b: usize) -> Option<(usize, usize)> {
    let need = ((b - a) / 10).max(1);
    let rows: Vec<usize> = (0..h)
        .filter(|&y| (a..b).filter(|&x| ink[y * w + x]).count() >= need)
        .collect();
    Some((*rows.first()?, rows.last()? + 1))
}
