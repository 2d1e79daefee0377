//! Restoration and recognition metrics and the per-run report.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::charprior::PriorExtractor;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::plates::{resolve, Manifest, Record};

/// Reported instead of infinity when the images are identical.
pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(a: &Image, b: &Image, maxval: f64) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::shape(
            "psnr",
            &[a.channels(), a.height(), a.width()],
            &[b.channels(), b.height(), b.width()],
        ));
    }
    if maxval <= 0.0 {
        return Err(Error::invalid("psnr", format!("maxval {maxval} must be positive")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (maxval * maxval / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for y in &g {
        for x in &g {
            w.push(y * x / (s * s));
        }
    }
    w
}

/// Single-scale SSIM on the 0..255 range, averaged over window positions
/// that fit entirely inside the image and then over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    if !a.same_dims(b) {
        return Err(Error::shape(
            "ssim",
            &[a.channels(), a.height(), a.width()],
            &[b.channels(), b.height(), b.width()],
        ));
    }
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("{w}x{h} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let win = ssim_window();
    let mut total = 0.0;
    for c in 0..a.channels() {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let mut sum = 0.0;
        let mut count = 0usize;
        for y0 in 0..=h - SSIM_WINDOW {
            for x0 in 0..=w - SSIM_WINDOW {
                let at = |k: usize| (y0 + k / SSIM_WINDOW) * w + x0 + k % SSIM_WINDOW;
                let (mut ma, mut mb) = (0.0, 0.0);
                for (k, wk) in win.iter().enumerate() {
                    ma += wk * pa[at(k)];
                    mb += wk * pb[at(k)];
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for (k, wk) in win.iter().enumerate() {
                    let (da, db) = (pa[at(k)] - ma, pb[at(k)] - mb);
                    va += wk * da * da;
                    vb += wk * db * db;
                    cov += wk * (da * db);
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total += sum / count as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Unit-cost edit distance over characters.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for i in 1..=a.len() {
        cur[0] = i;
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate of `pred` against a non-empty `gt`.
pub fn cer(pred: &str, gt: &str) -> Result<f64> {
    let n = gt.chars().count();
    if n == 0 {
        return Err(Error::invalid("cer", "ground truth is empty"));
    }
    Ok(levenshtein(pred, gt) as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub label: String,
    pub prediction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
    pub cer: f64,
    pub exact_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleError {
    pub id: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub errors: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ssim: Option<f64>,
    pub mean_cer: Option<f64>,
    pub lpr_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<SampleMetrics>,
    pub errors: Vec<SampleError>,
    pub aggregate: Aggregate,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Line<'a> {
    Sample(&'a SampleMetrics),
    Error(&'a SampleError),
    Aggregate(&'a Aggregate),
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    pub fn from_samples(samples: Vec<SampleMetrics>, errors: Vec<SampleError>) -> Self {
        let opt_mean = |f: fn(&SampleMetrics) -> Option<f64>| {
            if samples.iter().any(|s| f(s).is_some()) {
                mean(samples.iter().filter_map(f))
            } else {
                None
            }
        };
        let aggregate = Aggregate {
            count: samples.len(),
            errors: errors.len(),
            mean_psnr: opt_mean(|s| s.psnr),
            mean_ssim: opt_mean(|s| s.ssim),
            mean_cer: mean(samples.iter().map(|s| s.cer)),
            lpr_accuracy: mean(samples.iter().map(|s| if s.exact_match { 1.0 } else { 0.0 })),
        };
        MetricReport {
            samples,
            errors,
            aggregate,
        }
    }

    /// Sample records, then error records, then the aggregate.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = self
            .samples
            .iter()
            .map(Line::Sample)
            .chain(self.errors.iter().map(Line::Error))
            .chain(std::iter::once(Line::Aggregate(&self.aggregate)));
        for l in lines {
            out.push_str(&serde_json::to_string(&l).expect("report serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// Aligned per-sample table with a closing mean row.
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        let mut out = format!(
            "{:<12} {:<10} {:<10} {:>8} {:>8} {:>7} {:>5}\n",
            "id", "label", "predicted", "psnr", "ssim", "cer", "match"
        );
        for s in &self.samples {
            out.push_str(&format!(
                "{:<12} {:<10} {:<10} {:>8} {:>8} {:>7.4} {:>5}\n",
                s.id,
                s.label,
                s.prediction,
                fmt(s.psnr, 2),
                fmt(s.ssim, 4),
                s.cer,
                if s.exact_match { "yes" } else { "no" }
            ));
        }
        for e in &self.errors {
            out.push_str(&format!("{:<12} error: {}\n", e.id, e.message));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "{:<12} {:<10} {:<10} {:>8} {:>8} {:>7} {:>5}\n",
            "mean",
            format!("n={}", a.count),
            "",
            fmt(a.mean_psnr, 2),
            fmt(a.mean_ssim, 4),
            fmt(a.mean_cer, 4),
            fmt(a.lpr_accuracy, 3)
        ));
        out
    }
}

/// Where the restored image of sample `id` lives.
pub fn restored_path(dir: &Path, id: &str, channels: usize) -> PathBuf {
    dir.join(format!("{id}.{}", if channels == 3 { "ppm" } else { "pgm" }))
}

fn find_restored(dir: &Path, id: &str) -> Option<PathBuf> {
    [1, 3].iter().map(|&c| restored_path(dir, id, c)).find(|p| p.exists())
}

fn evaluate_one(
    manifest_path: &Path,
    record: &Record,
    restored_dir: &Path,
    extractor: &PriorExtractor,
) -> Result<SampleMetrics> {
    let path = find_restored(restored_dir, &record.id).ok_or_else(|| {
        Error::io(
            restored_path(restored_dir, &record.id, 1),
            std::io::ErrorKind::NotFound.into(),
        )
    })?;
    let restored = Image::read(&path)?;
    let prediction = extractor.read_text(&restored)?;
    let (psnr, ssim) = match &record.hq_path {
        Some(rel) => {
            let hq = Image::read(&resolve(manifest_path, rel))?;
            (Some(psnr(&restored, &hq, 255.0)?), Some(ssim(&restored, &hq)?))
        }
        None => (None, None),
    };
    Ok(SampleMetrics {
        id: record.id.clone(),
        label: record.label.clone(),
        cer: cer(&prediction, &record.label)?,
        exact_match: prediction == record.label,
        prediction,
        psnr,
        ssim,
    })
}

/// Scores every manifest record against `restored_dir/<id>.pgm|ppm`.
///
/// Text is read back with the projection segmenter and template recognizer.
/// PSNR and SSIM are reported only for records with a high-quality path.
/// Per-sample failures become error records and the run continues.
pub fn evaluate_run(
    manifest_path: &Path,
    manifest: &Manifest,
    restored_dir: &Path,
    extractor: &PriorExtractor,
) -> MetricReport {
    let results: Vec<Result<SampleMetrics>> = manifest
        .records
        .par_iter()
        .map(|r| evaluate_one(manifest_path, r, restored_dir, extractor))
        .collect();
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    for (r, res) in manifest.records.iter().zip(results) {
        match res {
            Ok(s) => samples.push(s),
            Err(e) => {
                log::warn!("sample {}: {e}", r.id);
                errors.push(SampleError {
                    id: r.id.clone(),
                    message: e.to_string(),
                })
            }
        }
    }
    MetricReport::from_samples(samples, errors)
}
