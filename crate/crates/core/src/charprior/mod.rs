//! Character-level priors: segmentation, frozen template recognition, mask
//! rasterization and the trainable character encoder.

mod encoder;
mod masks;
mod ocr;
mod segment;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{ParamStore, Scalar};
use crate::plates::{PixelBox, PlateStyle};

pub use encoder::{position_table, CharEncoder};
pub use masks::{boxes_to_masks, SpatialMask};
pub use ocr::TemplateRecognizer;
pub use segment::{otsu_threshold, ProjectionSegmenter, SegmentMode};

/// One located and classified character. `class` is `None` when the
/// recognizer could not decide.
#[derive(Debug, Clone, PartialEq)]
pub struct CharDetection {
    pub bbox: PixelBox,
    pub class: Option<usize>,
    pub confidence: f64,
}

/// Frozen segmentation and recognition front end.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorExtractor {
    pub mode: SegmentMode,
    pub segmenter: ProjectionSegmenter,
    pub recognizer: TemplateRecognizer,
}

impl PriorExtractor {
    pub fn new(style: &PlateStyle, mode: SegmentMode) -> Result<Self> {
        Ok(PriorExtractor {
            mode,
            segmenter: ProjectionSegmenter::new(style.glyph_width, style.gap),
            recognizer: TemplateRecognizer::new(&style.vocab()?, style.glyph_width, style.glyph_height)?,
        })
    }

    /// Boxes ordered left to right and clipped to the image.
    pub fn segment(&self, image: &Image, oracle: Option<&[PixelBox]>) -> Result<Vec<PixelBox>> {
        let mut boxes = match self.mode {
            SegmentMode::Oracle => oracle
                .ok_or_else(|| Error::invalid("segment_chars", "oracle mode needs the sample's boxes"))?
                .to_vec(),
            SegmentMode::Projection => self.segmenter.segment(image),
        };
        let (w, h) = (image.width() as u32, image.height() as u32);
        for b in &mut boxes {
            *b = PixelBox::new(b.x0.min(w), b.y0.min(h), b.x1.min(w), b.y1.min(h));
        }
        if self.mode == SegmentMode::Projection {
            boxes.sort_by_key(|b| b.x0);
        }
        Ok(boxes)
    }

    pub fn detect(&self, image: &Image, oracle: Option<&[PixelBox]>) -> Result<Vec<CharDetection>> {
        self.segment(image, oracle)?
            .into_iter()
            .map(|b| {
                if b.is_empty() {
                    return Ok(CharDetection {
                        bbox: b,
                        class: None,
                        confidence: 0.0,
                    });
                }
                let crop = image.crop(b.x0 as usize, b.y0 as usize, b.x1 as usize, b.y1 as usize);
                let (class, confidence) = self.recognizer.classify(&crop)?;
                Ok(CharDetection {
                    bbox: b,
                    class,
                    confidence,
                })
            })
            .collect()
    }

    /// Text read by projection segmentation plus recognition, regardless of
    /// the configured segmentation mode.
    pub fn read_text(&self, image: &Image) -> Result<String> {
        let vocab: Vec<char> = self.recognizer.vocabulary.chars().collect();
        let mut out = String::new();
        for b in self.segmenter.segment(image) {
            let crop = image.crop(b.x0 as usize, b.y0 as usize, b.x1 as usize, b.y1 as usize);
            if let (Some(id), _) = self.recognizer.classify(&crop)? {
                out.push(vocab[id]);
            }
        }
        Ok(out)
    }

    /// Canonical bytes of all frozen state.
    pub fn state_bytes(&self) -> Vec<u8> {
        let mut out = vec![self.mode as u8];
        out.extend_from_slice(&(self.segmenter.glyph_width as u64).to_le_bytes());
        out.extend_from_slice(&(self.segmenter.gap as u64).to_le_bytes());
        out.extend_from_slice(&self.segmenter.column_fraction.to_le_bytes());
        out.extend_from_slice(&self.recognizer.state_bytes());
        out
    }
}

/// Recognized characters of one image in reading order, ready to be turned
/// into priors at any feature resolution.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CharSequence {
    pub ids: Vec<usize>,
    pub boxes: Vec<PixelBox>,
    pub image_size: (usize, usize),
}

impl CharSequence {
    /// Keeps recognized detections; if there are more than `max_chars`, the
    /// most confident ones are kept in reading order.
    pub fn from_detections(dets: &[CharDetection], image_size: (usize, usize), max_chars: usize) -> Self {
        let mut known: Vec<(usize, &CharDetection)> =
            dets.iter().enumerate().filter(|(_, d)| d.class.is_some()).collect();
        if known.len() < dets.len() {
            log::debug!("dropping {} unrecognized detections", dets.len() - known.len());
        }
        if known.len() > max_chars {
            known.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence).then(a.0.cmp(&b.0)));
            known.truncate(max_chars);
            known.sort_by_key(|(i, _)| *i);
        }
        CharSequence {
            ids: known.iter().map(|(_, d)| d.class.unwrap()).collect(),
            boxes: known.iter().map(|(_, d)| d.bbox).collect(),
            image_size,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn masks(&self, feat: (usize, usize)) -> Vec<SpatialMask> {
        boxes_to_masks(&self.boxes, self.image_size, feat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    None,
    String,
    Char,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharPrior<T> {
    pub embedding: Vec<T>,
    pub mask: SpatialMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StringPrior<T> {
    pub embedding: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Priors<T> {
    /// `fallback` is set when text priors were requested but no character
    /// was recognized.
    None {
        fallback: bool,
    },
    Char(Vec<CharPrior<T>>),
    String(StringPrior<T>),
}

/// Detached priors for one image.
#[allow(clippy::too_many_arguments)]
pub fn build_priors<T: Scalar>(
    image: &Image,
    oracle: Option<&[PixelBox]>,
    kind: PriorKind,
    extractor: &PriorExtractor,
    encoder: &CharEncoder,
    store: &ParamStore<T>,
    feat: (usize, usize),
) -> Result<Priors<T>> {
    if kind == PriorKind::None {
        return Ok(Priors::None { fallback: false });
    }
    let dets = extractor.detect(image, oracle)?;
    let seq = CharSequence::from_detections(&dets, (image.width(), image.height()), encoder.max_chars);
    if seq.is_empty() {
        log::warn!("no characters recognized; restoring without text priors");
        return Ok(Priors::None { fallback: true });
    }
    let emb = encoder.embed_values(store, &seq.ids)?;
    Ok(match kind {
        PriorKind::Char => Priors::Char(
            emb.into_iter()
                .zip(seq.masks(feat))
                .map(|(embedding, mask)| CharPrior { embedding, mask })
                .collect(),
        ),
        _ => {
            let n = T::of(emb.len() as f64);
            let embedding = (0..encoder.dim)
                .map(|c| emb.iter().map(|r| r[c]).sum::<T>() / n)
                .collect();
            Priors::String(StringPrior { embedding })
        }
    })
}
