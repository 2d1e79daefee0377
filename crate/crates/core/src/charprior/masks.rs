use crate::numerics::{Scalar, Tensor};
use crate::plates::PixelBox;

/// Binary feature-grid mask derived from one pixel box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpatialMask {
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
    pub source: PixelBox,
}

impl SpatialMask {
    pub fn ones(width: usize, height: usize, source: PixelBox) -> Self {
        SpatialMask {
            width,
            height,
            cells: vec![true; width * height],
            source,
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.width + x]
    }

    /// Row-major `[height * width]` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.width * self.height], |i| {
            if self.cells[i] {
                T::one()
            } else {
                T::zero()
            }
        })
    }
}

/// Rasterizes boxes on an `image` pixel grid onto a `feat` grid.
///
/// Feature cell `(j, i)` covers the pixel rectangle
/// `[j W / Wf, (j+1) W / Wf) x [i H / Hf, (i+1) H / Hf)` and is set iff that
/// rectangle overlaps the box with positive area. The comparison is done in
/// integers by scaling both sides by the feature size.
pub fn boxes_to_masks(boxes: &[PixelBox], image: (usize, usize), feat: (usize, usize)) -> Vec<SpatialMask> {
    let ((w, h), (fw, fh)) = (image, feat);
    boxes
        .iter()
        .map(|b| {
            let mut cells = vec![false; fw * fh];
            let (x0, x1) = (b.x0 as usize * fw, b.x1 as usize * fw);
            let (y0, y1) = (b.y0 as usize * fh, b.y1 as usize * fh);
            for i in 0..fh {
                let rows = !b.is_empty() && i * h < y1 && (i + 1) * h > y0;
                for j in 0..fw {
                    cells[i * fw + j] = rows && j * w < x1 && (j + 1) * w > x0;
                }
            }
            let m = SpatialMask {
                width: fw,
                height: fh,
                cells,
                source: *b,
            };
            if m.is_empty() {
                log::warn!("box {:?} covers no cell of the {fw}x{fh} grid", b);
            }
            m
        })
        .collect()
}
