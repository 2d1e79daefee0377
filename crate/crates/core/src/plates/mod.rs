//! Synthetic plate rendering and dataset manifests.
//!
//! The renderer doubles as the segmentation oracle: every sample carries the
//! exact per-character boxes it was drawn with.

mod dataset;
pub mod font;
mod manifest;
mod render;

pub use dataset::{assign_splits, dataset_sample, generate_dataset, sample_id, DatasetConfig, DatasetSplits, SPLITS};
pub use manifest::{resolve, Manifest, Record};
pub use render::{random_label, render_plate, PixelBox, PlateSample, PlateStyle, Vocabulary};

use crate::image::Image;

/// Bounding boxes of the 8-connected components of pixels that differ from
/// `background` in the first channel, sorted left to right.
pub fn ink_components(image: &Image, background: f64) -> Vec<PixelBox> {
    let (w, h) = (image.width(), image.height());
    let ink: Vec<bool> = image.plane(0).iter().map(|&v| v != background).collect();
    let mut seen = vec![false; w * h];
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !ink[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if ink[q] && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        boxes.push(PixelBox::new(x0 as u32, y0 as u32, x1 as u32, y1 as u32));
    }
    boxes.sort_by_key(|b| (b.x0, b.y0));
    boxes
}
