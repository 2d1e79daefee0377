//! Planar floating-point images and binary PGM/PPM I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Planar `channels x height x width` image with values nominally in `[0, 255]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::invalid(
                "image",
                format!(
                    "{channels}x{height}x{width} needs {} values, got {}",
                    width * height * channels,
                    data.len()
                ),
            ));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel-averaged luminance as a single-channel image.
    pub fn luma(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let n = self.width * self.height;
        let data = (0..n)
            .map(|i| (0..self.channels).map(|c| self.data[c * n + i]).sum::<f64>() / self.channels as f64)
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn clamp(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 255.0);
        }
    }

    /// Rounded and clamped 8-bit samples in planar order.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect()
    }

    /// Sub-image `[x0, x1) x [y0, y1)`, clipped to the image.
    pub fn crop(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> Image {
        let (x1, y1) = (x1.min(self.width), y1.min(self.height));
        let (x0, y0) = (x0.min(x1), y0.min(y1));
        let (w, h) = (x1 - x0, y1 - y0);
        let mut out = Image::filled(w, h, self.channels, 0.0);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        out
    }

    /// Model-space tensor `[channels, height, width]` with `x / 127.5 - 1`.
    pub fn to_model<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.channels, self.height, self.width], |i| {
            T::of(self.data[i] / 127.5 - 1.0)
        })
    }

    /// Inverse of [`Image::to_model`], clamping to `[-1, 1]` first.
    pub fn from_model<T: Scalar>(t: &Tensor<T>) -> Result<Image> {
        let s = t.shape();
        if s.len() != 3 {
            return Err(Error::invalid("image", format!("expected [c, h, w] tensor, got {s:?}")));
        }
        let data = t
            .data()
            .iter()
            .map(|v| (v.f64().clamp(-1.0, 1.0) + 1.0) * 127.5)
            .collect();
        Image::new(s[2], s[1], s[0], data)
    }

    /// Binary P5 (one channel) or P6 (three channels) with maxval 255.
    pub fn encode_pnm(&self) -> Result<Vec<u8>> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(Error::invalid("pnm", format!("cannot encode {c} channels"))),
        };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        let bytes = self.to_u8();
        let n = self.width * self.height;
        if self.channels == 1 {
            out.extend_from_slice(&bytes);
        } else {
            for i in 0..n {
                for c in 0..3 {
                    out.push(bytes[c * n + i]);
                }
            }
        }
        Ok(out)
    }

    pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let channels = match fields[0] {
            "P5" => 1,
            "P6" => 3,
            m => return Err(format!("unsupported magic {m:?}")),
        };
        let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad header field {s:?}: {e}"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(format!("unsupported maxval {maxval}"));
        }
        let n = w * h;
        let raster = bytes.get(pos..pos + n * channels).ok_or("truncated raster")?;
        let mut data = vec![0.0; n * channels];
        for i in 0..n {
            for c in 0..channels {
                data[c * n + i] = raster[i * channels + c] as f64;
            }
        }
        Ok(Image {
            width: w,
            height: h,
            channels,
            data,
        })
    }

    pub fn read(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Image::decode_pnm(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = self.encode_pnm()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }
}

/// Bilinear sample at continuous pixel-centre coordinates, replicating edges.
pub fn sample_bilinear(plane: &[f64], w: usize, h: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize of one plane with pixel-centre alignment.
pub fn resize_bilinear(plane: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;
    let mut out = Vec::with_capacity(ow * oh);
    for y in 0..oh {
        let fy = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..ow {
            let fx = (x as f64 + 0.5) * sx - 0.5;
            out.push(sample_bilinear(plane, w, h, fx, fy));
        }
    }
    out
}

/// Area-average downscale of one plane to `ow x oh` (each output pixel is the
/// coverage-weighted mean of the input pixels under its footprint).
pub fn resize_area(plane: &[f64], w: usize, h: usize, ow: usize, oh: usize) -> Vec<f64> {
    let sx = w as f64 / ow as f64;
    let sy = h as f64 / oh as f64;
    let weights = |o: usize, s: f64, n: usize| -> Vec<(usize, f64)> {
        let (a, b) = (o as f64 * s, (o + 1) as f64 * s);
        let mut v = Vec::new();
        let mut i = a.floor() as usize;
        while (i as f64) < b && i < n {
            let lo = a.max(i as f64);
            let hi = b.min((i + 1) as f64);
            if hi > lo {
                v.push((i, hi - lo));
            }
            i += 1;
        }
        v
    };
    let wx: Vec<_> = (0..ow).map(|x| weights(x, sx, w)).collect();
    let wy: Vec<_> = (0..oh).map(|y| weights(y, sy, h)).collect();
    let mut out = Vec::with_capacity(ow * oh);
    for row in &wy {
        for col in &wx {
            let mut acc = 0.0;
            let mut tot = 0.0;
            for &(yy, ay) in row {
                for &(xx, ax) in col {
                    acc += plane[yy * w + xx] * ax * ay;
                    tot += ax * ay;
                }
            }
            out.push(acc / tot);
        }
    }
    out
}
