use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Rng;

use super::font::{self, FULL_VOCABULARY};

/// Ordered set of plate symbols; a symbol's position is its class id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
}

impl Vocabulary {
    pub fn new(symbols: &str) -> Result<Self> {
        let mut chars: Vec<char> = Vec::new();
        for ch in symbols.chars() {
            if font::bitmap(ch).is_none() {
                return Err(Error::UnknownChar(ch));
            }
            if chars.contains(&ch) {
                return Err(Error::config("vocabulary", format!("symbol {ch:?} listed twice")));
            }
            chars.push(ch);
        }
        if chars.is_empty() {
            return Err(Error::config("vocabulary", "must not be empty"));
        }
        Ok(Vocabulary { chars })
    }

    pub fn full() -> Self {
        Vocabulary::new(FULL_VOCABULARY).expect("built-in vocabulary")
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, ch: char) -> Option<usize> {
        self.chars.iter().position(|&c| c == ch)
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    pub fn encode(&self, label: &str) -> Result<Vec<usize>> {
        label.chars().map(|c| self.id(c).ok_or(Error::UnknownChar(c))).collect()
    }

    pub fn as_string(&self) -> String {
        self.chars.iter().collect()
    }
}

/// Axis-aligned half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl From<[u32; 4]> for PixelBox {
    fn from(v: [u32; 4]) -> Self {
        PixelBox {
            x0: v[0],
            y0: v[1],
            x1: v[2],
            y1: v[3],
        }
    }
}

impl From<PixelBox> for [u32; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl PixelBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        PixelBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn intersects(&self, other: &PixelBox) -> bool {
        self.x0 < other.x1 && other.x0 < self.x1 && self.y0 < other.y1 && other.y0 < self.y1
    }

    pub fn within(&self, width: usize, height: usize) -> bool {
        !self.is_empty() && self.x1 as usize <= width && self.y1 as usize <= height
    }
}

/// Rendering parameters for synthetic plates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateStyle {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub vocabulary: String,
    pub min_chars: usize,
    pub max_chars: usize,
    pub glyph_width: usize,
    pub glyph_height: usize,
    pub gap: usize,
    pub box_padding: usize,
    /// Background (plate) intensity range.
    pub background: [f64; 2],
    /// Ink intensity range; ink is always darker than the background.
    pub ink: [f64; 2],
    pub min_contrast: f64,
    /// Maximum random offset of the text block from centre, in pixels.
    pub jitter: [usize; 2],
}

impl Default for PlateStyle {
    fn default() -> Self {
        PlateStyle {
            width: 64,
            height: 32,
            channels: 1,
            vocabulary: FULL_VOCABULARY.to_string(),
            min_chars: 5,
            max_chars: 6,
            glyph_width: 8,
            glyph_height: 16,
            gap: 2,
            box_padding: 0,
            background: [170.0, 230.0],
            ink: [10.0, 70.0],
            min_contrast: 100.0,
            jitter: [2, 3],
        }
    }
}

impl PlateStyle {
    /// Desk-scale style for a 96x48 plate.
    pub fn large() -> Self {
        PlateStyle {
            width: 96,
            height: 48,
            glyph_width: 12,
            glyph_height: 24,
            gap: 3,
            jitter: [3, 4],
            ..Default::default()
        }
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Vocabulary::new(&self.vocabulary)
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab()?;
        let check = |ok: bool, key: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("plates.{key}"), msg))
            }
        };
        check(self.channels == 1 || self.channels == 3, "channels", "must be 1 or 3")?;
        check(self.min_chars >= 1, "min_chars", "must be at least 1")?;
        check(self.min_chars <= self.max_chars, "max_chars", "must be >= min_chars")?;
        check(
            self.glyph_width >= 1 && self.glyph_height >= 1,
            "glyph_width",
            "glyph must be non-empty",
        )?;
        check(
            self.gap > 2 * self.box_padding,
            "gap",
            "must exceed twice the box padding so boxes stay disjoint",
        )?;
        check(
            self.glyph_height + 2 * self.box_padding < self.height,
            "glyph_height",
            "glyph does not fit the plate height",
        )?;
        check(
            self.background[0] <= self.background[1],
            "background",
            "range must satisfy min <= max",
        )?;
        check(self.ink[0] <= self.ink[1], "ink", "range must satisfy min <= max")?;
        check(
            self.background[0] >= 0.0 && self.background[1] <= 255.0 && self.ink[0] >= 0.0 && self.ink[1] <= 255.0,
            "background",
            "intensities must lie in [0, 255]",
        )?;
        check(self.min_contrast > 0.0, "min_contrast", "must be positive")?;
        check(
            self.background[1] - self.ink[0] >= self.min_contrast,
            "min_contrast",
            "unreachable with the configured background and ink ranges",
        )?;
        check(
            self.text_width(self.max_chars) + 2 * (self.box_padding + 1) <= self.width,
            "max_chars",
            "label of max_chars symbols does not fit the plate width",
        )?;
        Ok(())
    }

    pub fn text_width(&self, n: usize) -> usize {
        n * self.glyph_width + n.saturating_sub(1) * self.gap
    }
}

/// One rendered plate with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateSample {
    pub id: String,
    pub label: String,
    pub image: Image,
    pub boxes: Vec<PixelBox>,
    pub seed: u64,
}

/// Renders `label` onto a plain plate.
///
/// Deterministic in `(label, style, seed)`. Boxes are the tight extent of
/// each glyph's ink grown by `style.box_padding`.
pub fn render_plate(label: &str, style: &PlateStyle, seed: u64) -> Result<PlateSample> {
    style.validate()?;
    let vocab = style.vocab()?;
    let n = label.chars().count();
    for ch in label.chars() {
        if vocab.id(ch).is_none() {
            return Err(Error::UnknownChar(ch));
        }
    }
    if n == 0 {
        return Err(Error::invalid("render_plate", "label is empty"));
    }
    let margin = style.box_padding + 1;
    let text_w = style.text_width(n);
    if text_w + 2 * margin > style.width {
        return Err(Error::invalid(
            "render_plate",
            format!("label {label:?} needs {text_w} px, plate is {} px wide", style.width),
        ));
    }
    let mut rng = Rng::new(seed);
    let bg = rng.uniform_in(style.background[0], style.background[1]).round();
    let ink_hi = style.ink[1].min(bg - style.min_contrast);
    let ink = rng.uniform_in(style.ink[0], ink_hi.max(style.ink[0])).round();

    let jitter = |rng: &mut Rng, free: usize, max: usize| -> usize {
        let lo = margin as i64;
        let hi = (free.saturating_sub(margin)) as i64;
        let centre = (free / 2) as i64;
        let off = rng.int_in(0, 2 * max) as i64 - max as i64;
        (centre + off).clamp(lo, hi.max(lo)) as usize
    };
    let x_start = jitter(&mut rng, style.width - text_w, style.jitter[0]);
    let y_start = jitter(&mut rng, style.height - style.glyph_height, style.jitter[1]);

    let (w, h) = (style.width, style.height);
    let mut image = Image::filled(w, h, style.channels, bg);
    let mut boxes = Vec::with_capacity(n);
    for (i, ch) in label.chars().enumerate() {
        let gx = x_start + i * (style.glyph_width + style.gap);
        let raster = font::raster(ch, style.glyph_width, style.glyph_height).ok_or(Error::UnknownChar(ch))?;
        let (mut bx0, mut by0, mut bx1, mut by1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..style.glyph_height {
            for x in 0..style.glyph_width {
                if raster[y * style.glyph_width + x] {
                    let (px, py) = (gx + x, y_start + y);
                    for c in 0..style.channels {
                        image.set(c, py, px, ink);
                    }
                    bx0 = bx0.min(px);
                    by0 = by0.min(py);
                    bx1 = bx1.max(px + 1);
                    by1 = by1.max(py + 1);
                }
            }
        }
        let p = style.box_padding;
        boxes.push(PixelBox::new(
            bx0.saturating_sub(p) as u32,
            by0.saturating_sub(p) as u32,
            (bx1 + p).min(w) as u32,
            (by1 + p).min(h) as u32,
        ));
    }
    Ok(PlateSample {
        id: String::new(),
        label: label.to_string(),
        image,
        boxes,
        seed,
    })
}

/// Uniformly random label with a length in `[min_chars, max_chars]`.
pub fn random_label(vocab: &Vocabulary, style: &PlateStyle, rng: &mut Rng) -> String {
    let n = rng.int_in(style.min_chars, style.max_chars);
    (0..n).map(|_| vocab.chars()[rng.below(vocab.len())]).collect()
}
