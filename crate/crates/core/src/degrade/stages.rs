use nalgebra::{SMatrix, SVector};

use crate::image::{sample_bilinear, Image};

/// Projective map taking each `src[i]` to `dst[i]`, row-major with `h33 = 1`.
/// `None` when the points are degenerate.
pub fn homography(src: [(f64, f64); 4], dst: [(f64, f64); 4]) -> Option<[f64; 9]> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let ((x, y), (u, v)) = (src[i], dst[i]);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    if !h.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
}

fn apply_h(h: &[f64; 9], x: f64, y: f64) -> (f64, f64) {
    let d = h[6] * x + h[7] * y + h[8];
    ((h[0] * x + h[1] * y + h[2]) / d, (h[3] * x + h[4] * y + h[5]) / d)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v[v.len() / 2]
}

/// Warps `img` so that the output rectangle's corners (clockwise from the
/// top-left, in pixel-edge coordinates) sample the source at `corners`.
/// Samples falling outside the source take the plane's median value.
pub fn perspective_warp(img: &Image, corners: [(f64, f64); 4]) -> Image {
    let (w, h) = (img.width(), img.height());
    let rect = [(0.0, 0.0), (w as f64, 0.0), (w as f64, h as f64), (0.0, h as f64)];
    let Some(hm) = homography(rect, corners) else {
        return img.clone();
    };
    let mut out = img.clone();
    for c in 0..img.channels() {
        let plane = img.plane(c);
        let fill = median(plane);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = apply_h(&hm, x as f64 + 0.5, y as f64 + 0.5);
                let (sx, sy) = (sx - 0.5, sy - 0.5);
                let inside = sx.is_finite()
                    && sy.is_finite()
                    && sx >= -0.5
                    && sy >= -0.5
                    && sx <= w as f64 - 0.5
                    && sy <= h as f64 - 0.5;
                dst[y * w + x] = if inside {
                    sample_bilinear(plane, w, h, sx, sy)
                } else {
                    fill
                };
            }
        }
    }
    out
}

#[rustfmt::skip]
const JPEG_LUMA: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61.,
    12., 12., 14., 19., 26., 58., 60., 55.,
    14., 13., 16., 24., 40., 57., 69., 56.,
    14., 17., 22., 29., 51., 87., 80., 62.,
    18., 22., 37., 56., 68., 109., 103., 77.,
    24., 35., 55., 64., 81., 104., 113., 92.,
    49., 64., 78., 87., 103., 121., 120., 101.,
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Standard luminance table scaled for `quality` in `[1, 100]`.
pub fn jpeg_quant_table(quality: f64) -> [f64; 64] {
    let q = quality.clamp(1.0, 100.0);
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    JPEG_LUMA.map(|b| ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0))
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    m
}

/// Quantizes each 8x8 block's orthonormal DCT with `table`. Partial edge
/// blocks are padded by replication; only in-bounds pixels are written.
pub fn block_dct_quantize(plane: &[f64], w: usize, h: usize, table: &[f64; 64]) -> Vec<f64> {
    let m = dct_basis();
    let mut out = plane.to_vec();
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            let mut blk = [[0.0; 8]; 8];
            for (y, row) in blk.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    let (sx, sy) = ((bx + x).min(w - 1), (by + y).min(h - 1));
                    *v = plane[sy * w + sx] - 128.0;
                }
            }
            // coef = M * blk * M^T
            let mut tmp = [[0.0; 8]; 8];
            for u in 0..8 {
                for x in 0..8 {
                    tmp[u][x] = (0..8).map(|y| m[u][y] * blk[y][x]).sum();
                }
            }
            let mut coef = [[0.0; 8]; 8];
            for u in 0..8 {
                for v in 0..8 {
                    let c: f64 = (0..8).map(|x| tmp[u][x] * m[v][x]).sum();
                    let q = table[u * 8 + v];
                    coef[u][v] = (c / q).round() * q;
                }
            }
            // blk = M^T * coef * M
            for y in 0..8 {
                for v in 0..8 {
                    tmp[y][v] = (0..8).map(|u| m[u][y] * coef[u][v]).sum();
                }
            }
            for y in 0..8 {
                for x in 0..8 {
                    let (px, py) = (bx + x, by + y);
                    if px < w && py < h {
                        out[py * w + px] = (0..8).map(|v| tmp[y][v] * m[v][x]).sum::<f64>() + 128.0;
                    }
                }
            }
        }
    }
    out
}
