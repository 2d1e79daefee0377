use crate::error::{Error, Result};

/// Dense 2-D filter with an explicit anchor (the tap aligned with the output
/// pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub width: usize,
    pub height: usize,
    pub anchor: (usize, usize),
    pub data: Vec<f64>,
}

impl Kernel {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Truncated, normalized 1-D Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel_1d(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Uniform kernel along a rasterized line segment.
///
/// The segment has `length` samples spaced one pixel apart, centred on the
/// anchor, at `angle_deg` measured from the +x axis. Each sample is rounded
/// half-up to a pixel; the distinct pixels share equal weight.
pub fn motion_blur_kernel(length: usize, angle_deg: f64) -> Result<Kernel> {
    if length == 0 {
        return Err(Error::invalid("motion_blur_kernel", "length must be at least 1"));
    }
    let theta = angle_deg.to_radians();
    let (dx, dy) = (theta.cos(), theta.sin());
    let snap = |v: f64| {
        // exact zeros from cos(90deg) etc. would otherwise drift by 1 ulp
        let v = if v.abs() < 1e-9 { 0.0 } else { v };
        (v + 0.5 + 1e-12).floor() as i64
    };
    let mut pts: Vec<(i64, i64)> = Vec::with_capacity(length);
    for k in 0..length {
        let t = k as f64 - (length as f64 - 1.0) / 2.0;
        let p = (snap(t * dx), snap(t * dy));
        if !pts.contains(&p) {
            pts.push(p);
        }
    }
    let (minx, maxx) = (
        pts.iter().map(|p| p.0).min().unwrap(),
        pts.iter().map(|p| p.0).max().unwrap(),
    );
    let (miny, maxy) = (
        pts.iter().map(|p| p.1).min().unwrap(),
        pts.iter().map(|p| p.1).max().unwrap(),
    );
    let (w, h) = ((maxx - minx + 1) as usize, (maxy - miny + 1) as usize);
    let mut data = vec![0.0; w * h];
    let weight = 1.0 / pts.len() as f64;
    for &(x, y) in &pts {
        data[(y - miny) as usize * w + (x - minx) as usize] = weight;
    }
    Ok(Kernel {
        width: w,
        height: h,
        anchor: ((-minx) as usize, (-miny) as usize),
        data,
    })
}

/// Correlates one plane with `kernel`, replicating edge pixels.
pub fn filter_plane(plane: &[f64], w: usize, h: usize, kernel: &Kernel) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    let (ax, ay) = (kernel.anchor.0 as i64, kernel.anchor.1 as i64);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for ky in 0..kernel.height as i64 {
                let sy = (y + ky - ay).clamp(0, h as i64 - 1) as usize;
                for kx in 0..kernel.width as i64 {
                    let k = kernel.data[(ky * kernel.width as i64 + kx) as usize];
                    if k == 0.0 {
                        continue;
                    }
                    let sx = (x + kx - ax).clamp(0, w as i64 - 1) as usize;
                    acc += k * plane[sy * w + sx];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

/// Separable filter: `k` along x, then along y, replicating edges.
pub fn separable_filter(plane: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w as i64 {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sx = (x + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * plane[y * w + sx];
            }
            tmp[y * w + x as usize] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h as i64 {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sy = (y + i as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[sy * w + x];
            }
            out[y as usize * w + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn horizontal_three() {
        let k = motion_blur_kernel(3, 0.0).unwrap();
        assert_eq!((k.width, k.height, k.anchor), (3, 1, (1, 0)));
        for &v in &k.data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_length() {
        for angle in [0.0, 33.0, 90.0, 271.0] {
            let k = motion_blur_kernel(1, angle).unwrap();
            assert_eq!(k.data, vec![1.0]);
        }
        assert!(motion_blur_kernel(0, 0.0).is_err());
    }

    #[test]
    fn vertical_five() {
        let k = motion_blur_kernel(5, 90.0).unwrap();
        assert_eq!((k.width, k.height, k.anchor), (1, 5, (0, 2)));
        assert!(k.data.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn kernels_are_normalized_and_contiguous() {
        for len in 1..12 {
            for a in 0..36 {
                let k = motion_blur_kernel(len, a as f64 * 10.0).unwrap();
                assert!((k.sum() - 1.0).abs() < 1e-6);
                assert!(k.data.iter().all(|&v| v >= 0.0));
                assert!(k.at(k.anchor.0, k.anchor.1) > 0.0, "anchor on the line");
            }
        }
        let k = motion_blur_kernel(4, 0.0).unwrap();
        assert_eq!(k.width, 4);
    }

    #[test]
    fn gaussian_kernel_sums_to_one() {
        let k = gaussian_kernel_1d(1.3);
        assert_eq!(k.len(), 2 * 4 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
