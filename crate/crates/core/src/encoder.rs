//! Fully-convolutional image encoder and pixel-aligned feature lookup.
//!
//! The encoder is a four-stage strided convolution pyramid. Each stage
//! output is bilinearly resampled to half the input resolution and the
//! stages are concatenated channel-wise, giving one feature vector per
//! half-resolution cell. Feature cell `(i, j)` sits at source pixel
//! `(2i, 2j)`; lookups outside the grid repeat the border features.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{BilinearTaps, GraphError, Tape, Tensor, Var};
use crate::geometry::{Intrinsics, Vec3, MIN_DEPTH};
use crate::image::Image;
use crate::nn::Conv;

/// Smallest image side the pyramid accepts (the deepest stage keeps at
/// least one cell).
pub const MIN_IMAGE_SIDE: usize = 8;

/// Images whose shorter side is at most this skip the second downsampling.
pub const LOW_RES_SIDE: usize = 64;

const KERNEL: usize = 3;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("image {0}x{1} is smaller than the {MIN_IMAGE_SIDE}-pixel minimum")]
    ImageTooSmall(usize, usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Output channels of the four pyramid stages.
    pub channels: [usize; 4],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: [16, 16, 32, 64],
        }
    }
}

impl EncoderConfig {
    /// Channel widths of the original ResNet34 feature pyramid.
    pub fn paper_scale() -> Self {
        Self {
            channels: [64, 64, 128, 256],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.channels.iter().sum()
    }
}

/// Per-stage convolution strides for an image of the given size.
pub fn stage_strides(height: usize, width: usize) -> [usize; 4] {
    if height.min(width) <= LOW_RES_SIDE {
        [2, 1, 2, 2]
    } else {
        [2, 2, 2, 2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet<T = Tensor> {
    pub config: EncoderConfig,
    pub stages: Vec<Conv<T>>,
}

pub type EncoderParams = EncoderNet<Tensor>;

impl EncoderNet<Tensor> {
    pub fn init(config: EncoderConfig, rng: &mut impl Rng) -> Self {
        let mut cin = 3;
        let stages = config
            .channels
            .iter()
            .map(|&cout| {
                let conv = Conv::kaiming(cin, cout, KERNEL, rng);
                cin = cout;
                conv
            })
            .collect();
        Self { config, stages }
    }

    pub fn zeros(config: EncoderConfig) -> Self {
        let mut cin = 3;
        let stages = config
            .channels
            .iter()
            .map(|&cout| {
                let conv = Conv::zeros(cin, cout, KERNEL);
                cin = cout;
                conv
            })
            .collect();
        Self { config, stages }
    }
}

impl<T> EncoderNet<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderNet<U> {
        EncoderNet {
            config: self.config,
            stages: self.stages.iter().map(|s| s.map(f)).collect(),
        }
    }

    pub fn params(&self) -> Vec<&T> {
        self.stages.iter().flat_map(|s| s.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut T> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.params_mut())
            .collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        (0..self.stages.len())
            .flat_map(|i| [format!("stage{i}.weight"), format!("stage{i}.bias")])
            .collect()
    }
}

/// Pixel-aligned feature grid: `features` is a `[height·width, channels]`
/// row table over the half-resolution grid.
#[derive(Debug, Clone)]
pub struct FeatureVolume<T = Tensor> {
    pub features: T,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Size `(height, width)` of the encoded source image.
    pub source: (usize, usize),
}

impl<'t> FeatureVolume<Var<'t>> {
    pub fn to_tensor(&self) -> FeatureVolume<Tensor> {
        FeatureVolume {
            features: self.features.to_tensor(),
            height: self.height,
            width: self.width,
            channels: self.channels,
            source: self.source,
        }
    }
}

impl FeatureVolume<Tensor> {
    pub fn bind<'t>(&self, tape: &'t Tape) -> FeatureVolume<Var<'t>> {
        FeatureVolume {
            features: tape.constant(self.features.clone()),
            height: self.height,
            width: self.width,
            channels: self.channels,
            source: self.source,
        }
    }

    /// Feature vector at one source-image pixel.
    pub fn sample(&self, pixel: [f64; 2]) -> Vec<f64> {
        let taps = self.taps(&[pixel]);
        let c = self.channels;
        let data = self.features.data();
        let mut out = vec![0.0; c];
        for (idx, wt) in taps.stencils() {
            for (&i, &w) in idx.iter().zip(wt) {
                let row = &data[i as usize * c..(i as usize + 1) * c];
                for (o, v) in out.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
        out
    }
}

impl<T> FeatureVolume<T> {
    /// Maps source-image pixels to bilinear stencils on the feature grid.
    pub fn taps(&self, pixels: &[[f64; 2]]) -> BilinearTaps {
        lookup_taps((self.height, self.width), self.source, pixels)
    }
}

/// Bilinear stencils on a `grid = (height, width)` feature grid for pixels of
/// a `source = (height, width)` image.
pub fn lookup_taps(
    grid: (usize, usize),
    source: (usize, usize),
    pixels: &[[f64; 2]],
) -> BilinearTaps {
    let sx = source.1 as f64 / grid.1 as f64;
    let sy = source.0 as f64 / grid.0 as f64;
    let mut taps = BilinearTaps::with_capacity(grid.0, grid.1, pixels.len());
    for p in pixels {
        taps.push(p[0] / sx, p[1] / sy);
    }
    taps
}

/// Source-image pixel used for the feature lookup of a view-space point.
///
/// Points at or behind the camera plane are projected as if they sat at
/// the minimum valid depth, which lands them on the image border in the
/// direction of their lateral offset (and then on the repeated border
/// features).
pub fn feature_pixel(intr: &Intrinsics, x_view: &Vec3) -> [f64; 2] {
    let z = x_view.z.max(MIN_DEPTH);
    let u = intr.fx * x_view.x / z + intr.cx;
    let v = intr.fy * x_view.y / z + intr.cy;
    let limit = 1e12;
    [u.clamp(-limit, limit), v.clamp(-limit, limit)]
}

/// Runs the encoder pyramid on `image`; gradients flow into `params` when
/// they are tape leaves.
pub fn encode<'t>(
    tape: &'t Tape,
    params: &EncoderNet<Var<'t>>,
    image: &Image,
) -> Result<FeatureVolume<Var<'t>>, EncoderError> {
    let (h, w) = (image.height(), image.width());
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(EncoderError::ImageTooSmall(w, h));
    }
    let (gh, gw) = (h.div_ceil(2), w.div_ceil(2));
    let strides = stage_strides(h, w);
    let mut x = tape.constant(image.to_chw());
    let mut levels = Vec::with_capacity(params.stages.len());
    for (stage, &stride) in params.stages.iter().zip(&strides) {
        x = x.conv2d(stage.weight, stage.bias, stride)?.relu();
        let shape = x.shape();
        let (c, sh, sw) = (shape[0], shape[1], shape[2]);
        let rows = x.reshape(&[c, sh * sw])?.transpose()?;
        let level = if (sh, sw) == (gh, gw) {
            rows
        } else {
            rows.gather_rows(Rc::new(upsample_taps(sh, sw, gh, gw)))?
        };
        levels.push(level);
    }
    let features = tape.concat(&levels, 1)?;
    Ok(FeatureVolume {
        features,
        height: gh,
        width: gw,
        channels: params.config.feature_dim(),
        source: (h, w),
    })
}

/// Convenience wrapper: encodes with constant weights and returns plain
/// values.
pub fn encode_values(params: &EncoderParams, image: &Image) -> Result<FeatureVolume, EncoderError> {
    let tape = Tape::new();
    let bound = params.map(&mut crate::nn::binder(&tape, false));
    Ok(encode(&tape, &bound, image)?.to_tensor())
}

/// Bilinear resampling of an `sh × sw` stage map onto the `gh × gw` grid,
/// keeping cell centres aligned at the origin.
fn upsample_taps(sh: usize, sw: usize, gh: usize, gw: usize) -> BilinearTaps {
    let (ry, rx) = (sh as f64 / gh as f64, sw as f64 / gw as f64);
    let mut taps = BilinearTaps::with_capacity(sh, sw, gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            taps.push(j as f64 * rx, i as f64 * ry);
        }
    }
    taps
}
