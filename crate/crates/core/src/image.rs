//! Dense per-pixel containers: depth maps (f64, missing = -1) and
//! multi-channel f32 images, plus minimal PGM/PPM I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Sentinel for pixels without depth.
pub const MISSING: f64 = -1.0;

/// Per-pixel scalar map, row-major. Negative values mean "missing".
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn missing(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![MISSING; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn raw(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Value at `(x, y)` when present (non-negative).
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let v = self.raw(x, y);
        (v >= 0.0).then_some(v)
    }

    pub fn is_present(&self, x: usize, y: usize) -> bool {
        self.raw(x, y) >= 0.0
    }

    pub fn count_present(&self) -> usize {
        self.data.iter().filter(|v| **v >= 0.0).count()
    }

    /// Pixel coordinates of present values, row-major order.
    pub fn present_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_present(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Reads a 16-bit PGM of millimeters; 0 becomes missing.
    pub fn load_mm_pgm(path: &Path) -> Result<Self> {
        let pgm = read_pnm(path)?;
        if pgm.channels != 1 {
            return Err(Error::parse(path, "expected a single-channel PGM"));
        }
        Ok(Self {
            width: pgm.width,
            height: pgm.height,
            data: pgm
                .samples
                .iter()
                .map(|&v| if v == 0 { MISSING } else { v as f64 / 1000.0 })
                .collect(),
        })
    }

    /// Writes a 16-bit PGM of millimeters; missing becomes 0.
    pub fn save_mm_pgm(&self, path: &Path) -> Result<()> {
        let samples: Vec<u16> = self
            .data
            .iter()
            .map(|&d| {
                if d > 0.0 {
                    (d * 1000.0).round().clamp(1.0, 65535.0) as u16
                } else {
                    0
                }
            })
            .collect();
        write_pnm(path, self.width, self.height, 1, 65535, &samples)
    }
}

/// Multi-channel f32 image, pixel-interleaved (`[y][x][c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Loads an 8-bit PGM (replicated to 3 channels) or PPM, scaled to [0, 1].
    pub fn load_pnm_rgb(path: &Path) -> Result<Self> {
        let p = read_pnm(path)?;
        let scale = 1.0 / p.maxval as f32;
        let mut img = Image::zeros(p.width, p.height, 3);
        for i in 0..p.width * p.height {
            for c in 0..3 {
                let src = if p.channels == 1 { i } else { i * 3 + c };
                img.data[i * 3 + c] = p.samples[src] as f32 * scale;
            }
        }
        Ok(img)
    }

    /// Writes the channel mean as an 8-bit PGM.
    pub fn save_gray_pgm(&self, path: &Path) -> Result<()> {
        let samples: Vec<u16> = (0..self.width * self.height)
            .map(|i| {
                let px = &self.data[i * self.channels..(i + 1) * self.channels];
                let m = px.iter().sum::<f32>() / self.channels as f32;
                (m.clamp(0.0, 1.0) * 255.0).round() as u16
            })
            .collect();
        write_pnm(path, self.width, self.height, 1, 255, &samples)
    }
}

struct Pnm {
    width: usize,
    height: usize,
    channels: usize,
    maxval: u32,
    samples: Vec<u16>,
}

fn read_pnm(path: &Path) -> Result<Pnm> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    let mut next_token = |bytes: &[u8]| -> Option<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        (pos > start).then(|| String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let bad = |m: &str| Error::parse(path, m.to_string());
    let magic = next_token(&bytes).ok_or_else(|| bad("empty file"))?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(bad("expected binary PGM (P5) or PPM (P6)")),
    };
    let mut num = |what: &str| -> Result<usize> {
        next_token(&bytes)
            .and_then(|t| t.parse::<usize>().ok())
            .ok_or_else(|| bad(&format!("bad {what}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")? as u32;
    if maxval == 0 || maxval > 65535 {
        return Err(bad("maxval out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let n = width * height * channels;
    let wide = maxval > 255;
    let need = if wide { 2 * n } else { n };
    if bytes.len() < start + need {
        return Err(bad("truncated raster"));
    }
    let raster = &bytes[start..start + need];
    let samples = if wide {
        raster
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        raster.iter().map(|&b| b as u16).collect()
    };
    Ok(Pnm {
        width,
        height,
        channels,
        maxval,
        samples,
    })
}

fn write_pnm(
    path: &Path,
    width: usize,
    height: usize,
    channels: usize,
    maxval: u32,
    samples: &[u16],
) -> Result<()> {
    let magic = if channels == 1 { "P5" } else { "P6" };
    let mut out = Vec::with_capacity(samples.len() * 2 + 32);
    write!(out, "{magic}\n{width} {height}\n{maxval}\n")?;
    for &s in samples {
        if maxval > 255 {
            out.extend_from_slice(&s.to_be_bytes());
        } else {
            out.push(s as u8);
        }
    }
    fs::write(path, out)?;
    Ok(())
}
