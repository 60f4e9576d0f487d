//! Channel-major float images with values in `[0, 1]`.
//!
//! Pixel `(x, y)` has its centre at coordinate `(u, v) = (x, y)`, the same
//! frame landmarks are expressed in.

use std::fs;
use std::path::Path;

use crate::error::{DdnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(DdnError::shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
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

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at `(u, v)`; zero outside the frame.
    pub fn sample(&self, c: usize, u: f64, v: f64) -> f64 {
        let x0 = u.floor();
        let y0 = v.floor();
        let fx = u - x0;
        let fy = v - y0;
        let mut acc = 0.0;
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                let w = wx * wy;
                if w == 0.0 {
                    continue;
                }
                let (x, y) = (x0 + dx, y0 + dy);
                if x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height {
                    acc += w * self.get(c, y as usize, x as usize);
                }
            }
        }
        acc
    }

    /// Resamples into a `width x height` frame; `source(u, v)` maps an
    /// output pixel centre back into this image.
    pub fn resample(&self, width: usize, height: usize, source: impl Fn(f64, f64) -> (f64, f64)) -> Image {
        let mut out = Image::zeros(width, height, self.channels);
        for y in 0..height {
            for x in 0..width {
                let (u, v) = source(x as f64, y as f64);
                for c in 0..self.channels {
                    out.set(c, y, x, self.sample(c, u, v));
                }
            }
        }
        out
    }

    /// Rounds every value to the nearest of 256 levels in `[0, 1]`.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    /// Writes binary PGM (one channel) or PPM (three channels), 8 bits.
    pub fn write_pnm(&self, path: &Path) -> Result<()> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            c => return Err(DdnError::Format(format!("cannot write a {c}-channel image as PNM"))),
        };
        let mut bytes = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    bytes.push((self.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        fs::write(path, bytes).map_err(|e| DdnError::io(path, e))
    }

    pub fn read_pnm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| DdnError::io(path, e))?;
        let mut pos = 0;
        let mut token = || -> Result<String> {
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
                return Err(DdnError::Format(format!("truncated PNM header in {}", path.display())));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let magic = token()?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => return Err(DdnError::Format(format!("unsupported PNM type {other}"))),
        };
        let parse = |s: String| {
            s.parse::<usize>()
                .map_err(|_| DdnError::Format(format!("bad PNM header field {s:?}")))
        };
        let width = parse(token()?)?;
        let height = parse(token()?)?;
        let maxval = parse(token()?)?;
        if maxval != 255 {
            return Err(DdnError::Format(format!("only 8-bit PNM is supported, maxval {maxval}")));
        }
        let start = pos + 1;
        let need = width * height * channels;
        if bytes.len() < start + need {
            return Err(DdnError::Format(format!("PNM payload too short in {}", path.display())));
        }
        let mut img = Image::zeros(width, height, channels);
        let payload = &bytes[start..start + need];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.set(c, y, x, payload[(y * width + x) * channels + c] as f64 / 255.0);
                }
            }
        }
        Ok(img)
    }
}
