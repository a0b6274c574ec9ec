//! 2D feature extraction for color images and geometry priors, and lifting
//! of those features onto voxel centers.
//!
//! Feature scales line up with volume levels: level 0 (16 cm voxels) reads
//! stride-4 maps, level 1 stride-2, level 2 full resolution.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::{project, Intrinsics, PixelCoord, Pose};
use crate::image::Image;
use crate::nn::{leaky_relu, Initializer, WeightStore};
use crate::priors::{GeometryPrior, MAX_PRIOR_DEPTH};
use crate::volume::{GridSpec, VoxelKey, NUM_LEVELS};

/// Color feature channels per level, coarse to fine.
pub const COLOR_CHANNELS: [usize; NUM_LEVELS] = [80, 40, 24];
pub const GEO_CHANNELS: usize = 8;
pub const IMAGE_CHANNELS: usize = 3;
pub const PRIOR_CHANNELS: usize = 2;

/// Spatial stride of the feature map read by `level`.
#[inline]
pub const fn level_stride(level: u8) -> usize {
    1 << (NUM_LEVELS - 1 - level as usize)
}

/// Channels of a back-projected view feature at `level`.
#[inline]
pub const fn view_channels(level: u8) -> usize {
    COLOR_CHANNELS[level as usize] + GEO_CHANNELS
}

/// Dense feature map, pixel-interleaved `[y][x][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Volume level this map feeds (0 = coarsest).
    pub scale: u8,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(width: usize, height: usize, channels: usize, scale: u8) -> Self {
        Self {
            width,
            height,
            channels,
            scale,
            data: vec![0.0; width * height * channels],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear sample at continuous coordinates (pixel centers at integers),
    /// clamped to the map. Accumulates into `out`.
    pub fn sample_bilinear(&self, u: f64, v: f64, out: &mut [f32]) {
        debug_assert_eq!(out.len(), self.channels);
        let (x0, x1, fx) = lerp_index(u, self.width);
        let (y0, y1, fy) = lerp_index(v, self.height);
        let taps = [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ];
        for (x, y, w) in taps {
            if w == 0.0 {
                continue;
            }
            let w = w as f32;
            for (o, p) in out.iter_mut().zip(self.pixel(x, y)) {
                *o += w * p;
            }
        }
    }

    fn avg_pool(&self, factor: usize, scale: u8) -> FeatureMap {
        let (w, h, c) = (self.width / factor, self.height / factor, self.channels);
        let mut out = FeatureMap::zeros(w, h, c, scale);
        let norm = 1.0 / (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                let dst = (y * w + x) * c;
                for dy in 0..factor {
                    for dx in 0..factor {
                        let src = self.pixel(x * factor + dx, y * factor + dy);
                        for ch in 0..c {
                            out.data[dst + ch] += src[ch] * norm;
                        }
                    }
                }
            }
        }
        out
    }
}

fn lerp_index(t: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let t = t.clamp(0.0, (n - 1) as f64);
    let i0 = (t.floor() as usize).min(n - 2);
    (i0, i0 + 1, t - i0 as f64)
}

/// 3x3 convolution, zero padding 1, followed by leaky-ReLU.
/// Weights are laid out `[tap][out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvBlock {
    pub fn new(in_ch: usize, out_ch: usize, stride: usize, init: &mut Initializer) -> Self {
        let fan_in = 9 * in_ch;
        Self {
            in_ch,
            out_ch,
            stride,
            weight: init.uniform(9 * in_ch * out_ch, fan_in),
            bias: init.uniform(out_ch, fan_in),
        }
    }

    pub fn forward(&self, input: &FeatureMap, scale: u8) -> FeatureMap {
        assert_eq!(input.channels, self.in_ch, "conv input channels");
        let (ow, oh) = (input.width / self.stride, input.height / self.stride);
        let mut out = FeatureMap::zeros(ow, oh, self.out_ch, scale);
        let (ic, oc) = (self.in_ch, self.out_ch);
        out.data
            .par_chunks_mut(ow * oc)
            .enumerate()
            .for_each(|(oy, row)| {
                for ox in 0..ow {
                    let acc = &mut row[ox * oc..(ox + 1) * oc];
                    acc.copy_from_slice(&self.bias);
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= input.height as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= input.width as isize {
                                continue;
                            }
                            let src = input.pixel(ix as usize, iy as usize);
                            let tap = &self.weight[(ky * 3 + kx) * oc * ic..][..oc * ic];
                            for (o, a) in acc.iter_mut().enumerate() {
                                let w = &tap[o * ic..(o + 1) * ic];
                                *a += w.iter().zip(src).map(|(w, s)| w * s).sum::<f32>();
                            }
                        }
                    }
                    for a in acc.iter_mut() {
                        *a = leaky_relu(*a);
                    }
                }
            });
        out
    }

    fn export(&self, name: &str, store: &mut WeightStore) {
        store.put(
            format!("{name}.weight"),
            vec![9, self.out_ch, self.in_ch],
            self.weight.clone(),
        );
        store.put(format!("{name}.bias"), vec![self.out_ch], self.bias.clone());
    }

    fn import(&mut self, name: &str, store: &WeightStore) -> Result<()> {
        self.weight = store.take(&format!("{name}.weight"), &[9, self.out_ch, self.in_ch])?;
        self.bias = store.take(&format!("{name}.bias"), &[self.out_ch])?;
        Ok(())
    }
}

/// Color backbone: a stride-1 stem followed by two stride-2 blocks, tapping
/// 24 channels at stride 1, 40 at stride 2 and 80 at stride 4.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorEncoder {
    pub blocks: [ConvBlock; 3],
}

/// Geometry CNN: four stride-preserving blocks to 8 channels, average-pooled
/// to the coarser strides.
#[derive(Debug, Clone, PartialEq)]
pub struct GeometryEncoder {
    pub blocks: [ConvBlock; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub color: ColorEncoder,
    pub geometry: GeometryEncoder,
}

impl EncoderWeights {
    pub fn new(init: &mut Initializer) -> Self {
        let color = ColorEncoder {
            blocks: [
                ConvBlock::new(IMAGE_CHANNELS, COLOR_CHANNELS[2], 1, init),
                ConvBlock::new(COLOR_CHANNELS[2], COLOR_CHANNELS[1], 2, init),
                ConvBlock::new(COLOR_CHANNELS[1], COLOR_CHANNELS[0], 2, init),
            ],
        };
        let geometry = GeometryEncoder {
            blocks: [
                ConvBlock::new(PRIOR_CHANNELS, GEO_CHANNELS, 1, init),
                ConvBlock::new(GEO_CHANNELS, GEO_CHANNELS, 1, init),
                ConvBlock::new(GEO_CHANNELS, GEO_CHANNELS, 1, init),
                ConvBlock::new(GEO_CHANNELS, GEO_CHANNELS, 1, init),
            ],
        };
        Self { color, geometry }
    }

    pub fn seeded(seed: u64) -> Self {
        Self::new(&mut Initializer::new(seed))
    }

    pub fn zero_biases(&mut self) {
        for b in self.color.blocks.iter_mut().chain(self.geometry.blocks.iter_mut()) {
            b.bias.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn export(&self, store: &mut WeightStore) {
        for (i, b) in self.color.blocks.iter().enumerate() {
            b.export(&format!("encode.color.{i}"), store);
        }
        for (i, b) in self.geometry.blocks.iter().enumerate() {
            b.export(&format!("encode.geometry.{i}"), store);
        }
    }

    pub fn import(&mut self, store: &WeightStore) -> Result<()> {
        for (i, b) in self.color.blocks.iter_mut().enumerate() {
            b.import(&format!("encode.color.{i}"), store)?;
        }
        for (i, b) in self.geometry.blocks.iter_mut().enumerate() {
            b.import(&format!("encode.geometry.{i}"), store)?;
        }
        Ok(())
    }

    /// Color features at levels 0, 1, 2 (strides 4, 2, 1).
    pub fn encode_image(&self, image: &Image) -> Result<[FeatureMap; NUM_LEVELS]> {
        check_divisible(image.width, image.height)?;
        if image.channels != IMAGE_CHANNELS {
            return Err(Error::ChannelMismatch {
                expected: IMAGE_CHANNELS,
                actual: image.channels,
            });
        }
        let input = FeatureMap {
            width: image.width,
            height: image.height,
            channels: image.channels,
            scale: 2,
            data: image.data.clone(),
        };
        let [b0, b1, b2] = &self.color.blocks;
        let fine = b0.forward(&input, 2);
        let mid = b1.forward(&fine, 1);
        let coarse = b2.forward(&mid, 0);
        Ok([coarse, mid, fine])
    }

    /// Geometry features (8 channels) at levels 0, 1, 2.
    pub fn encode_prior(&self, prior: &GeometryPrior) -> Result<[FeatureMap; NUM_LEVELS]> {
        let (w, h) = (prior.width(), prior.height());
        check_divisible(w, h)?;
        let mut input = FeatureMap::zeros(w, h, PRIOR_CHANNELS, 2);
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) * PRIOR_CHANNELS;
                if let Some(d) = prior.depth.get(x, y) {
                    input.data[i] = (d / MAX_PRIOR_DEPTH) as f32;
                    input.data[i + 1] = prior.confidence.get(x, y) as f32;
                }
            }
        }
        let mut x = input;
        for b in &self.geometry.blocks {
            x = b.forward(&x, 2);
        }
        let mid = x.avg_pool(2, 1);
        let coarse = x.avg_pool(4, 0);
        Ok([coarse, mid, x])
    }
}

fn check_divisible(width: usize, height: usize) -> Result<()> {
    let stride = level_stride(0);
    if width == 0 || height == 0 || !width.is_multiple_of(stride) || !height.is_multiple_of(stride) {
        return Err(Error::NotDivisible {
            width,
            height,
            stride,
        });
    }
    Ok(())
}

/// One view's observation of one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewSample {
    /// Color channels followed by geometry channels; zero when not visible.
    pub feature: Vec<f32>,
    /// Full-resolution pixel of the projected voxel center.
    pub pixel: PixelCoord,
    /// Camera-frame depth of the voxel center (meters).
    pub depth: f64,
    pub visible: bool,
}

/// Samples the color and geometry maps of one view at every key's projected
/// center. `k` is the full-resolution camera; visibility follows
/// [`project`] on it exactly.
pub fn backproject_features(
    color: &FeatureMap,
    geometry: &FeatureMap,
    k: &Intrinsics,
    pose: &Pose,
    keys: &[VoxelKey],
    spec: &GridSpec,
) -> Result<Vec<ViewSample>> {
    if color.scale != geometry.scale {
        return Err(Error::Shape(format!(
            "color scale {} != geometry scale {}",
            color.scale, geometry.scale
        )));
    }
    let level = color.scale;
    if let Some(k) = keys.iter().find(|k| k.level != level) {
        return Err(Error::LevelMismatch {
            expected: level,
            actual: k.level,
        });
    }
    let stride = level_stride(level) as f64;
    let channels = color.channels + geometry.channels;
    Ok(keys
        .par_iter()
        .map(|key| match project(k, pose, &spec.key_center(*key)) {
            Some((px, depth)) => {
                let us = (px.u + 0.5) / stride - 0.5;
                let vs = (px.v + 0.5) / stride - 0.5;
                let mut feature = vec![0.0f32; channels];
                let (c, g) = feature.split_at_mut(color.channels);
                color.sample_bilinear(us, vs, c);
                geometry.sample_bilinear(us, vs, g);
                ViewSample {
                    feature,
                    pixel: px,
                    depth,
                    visible: true,
                }
            }
            None => ViewSample {
                feature: vec![0.0; channels],
                pixel: PixelCoord::new(f64::NAN, f64::NAN),
                depth: 0.0,
                visible: false,
            },
        })
        .collect())
}
