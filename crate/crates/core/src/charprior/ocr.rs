use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{resize_bilinear, Image};
use crate::plates::{font, Vocabulary};

/// Frozen nearest-template character classifier.
///
/// Templates are the font glyphs cropped to their ink extent and resized to
/// the glyph cell, stored zero-mean and unit-variance with ink as the high
/// value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateRecognizer {
    pub vocabulary: String,
    pub cell_width: usize,
    pub cell_height: usize,
    templates: Vec<Vec<f64>>,
}

fn standardize(v: &mut [f64]) -> bool {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    if var <= 1e-12 {
        return false;
    }
    let sd = var.sqrt();
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
    true
}

impl TemplateRecognizer {
    pub fn new(vocab: &Vocabulary, cell_width: usize, cell_height: usize) -> Result<Self> {
        if cell_width == 0 || cell_height == 0 {
            return Err(Error::invalid("recognizer", "cell size must be positive"));
        }
        let mut templates = Vec::with_capacity(vocab.len());
        for &ch in vocab.chars() {
            let r = font::raster(ch, cell_width, cell_height).ok_or(Error::UnknownChar(ch))?;
            let ink = Image::new(
                cell_width,
                cell_height,
                1,
                r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )?;
            let (mut x0, mut y0, mut x1, mut y1) = (cell_width, cell_height, 0, 0);
            for y in 0..cell_height {
                for x in 0..cell_width {
                    if r[y * cell_width + x] {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            let tight = ink.crop(x0, y0, x1, y1);
            let mut t = resize_bilinear(tight.data(), tight.width(), tight.height(), cell_width, cell_height);
            if !standardize(&mut t) {
                return Err(Error::invalid("recognizer", format!("glyph {ch:?} is blank")));
            }
            templates.push(t);
        }
        Ok(TemplateRecognizer {
            vocabulary: vocab.as_string(),
            cell_width,
            cell_height,
            templates,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.templates.len()
    }

    /// Classifies a dark-on-light crop. Returns `(None, 0.0)` when the crop
    /// has no contrast. Confidence is the best correlation `r` mapped by
    /// `(r + 1) / 2`; ties go to the lowest class id.
    pub fn classify(&self, crop: &Image) -> Result<(Option<usize>, f64)> {
        if crop.width() == 0 || crop.height() == 0 {
            return Err(Error::invalid("ocr_char", "empty crop"));
        }
        let luma = crop.luma();
        let mut v = resize_bilinear(
            luma.data(),
            luma.width(),
            luma.height(),
            self.cell_width,
            self.cell_height,
        );
        v.iter_mut().for_each(|x| *x = 255.0 - *x);
        if !standardize(&mut v) {
            return Ok((None, 0.0));
        }
        let n = v.len() as f64;
        let mut best = (0, f64::NEG_INFINITY);
        for (id, t) in self.templates.iter().enumerate() {
            let r = v.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() / n;
            if r > best.1 {
                best = (id, r);
            }
        }
        Ok((Some(best.0), ((best.1 + 1.0) / 2.0).clamp(0.0, 1.0)))
    }

    /// Canonical serialization of the frozen state.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.vocabulary.as_bytes());
        out.extend_from_slice(&(self.cell_width as u64).to_le_bytes());
        out.extend_from_slice(&(self.cell_height as u64).to_le_bytes());
        for t in &self.templates {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}
