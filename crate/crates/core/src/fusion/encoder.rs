//! Fixed, seeded convolutional encoders: a residual pyramid for reference
//! view features and the zero-initialized keypoint conditioning encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::FusionError;

/// One `[channels, height, width]` map.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleFeatures {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ScaleFeatures {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self, FusionError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(FusionError::ShapeMismatch("feature map dimensions must be non-zero".into()));
        }
        if data.len() != channels * height * width {
            return Err(FusionError::ShapeMismatch(format!(
                "{} values for shape [{channels}, {height}, {width}]",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::InvalidArgument("feature map holds non-finite values".into()));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    /// Uniform random values in `[-1, 1)`.
    pub fn seeded(channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * height * width).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Self { channels, height, width, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }
}

/// Reference-view features at several resolutions, coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeatures {
    scales: Vec<ScaleFeatures>,
}

impl MultiScaleFeatures {
    pub fn new(scales: Vec<ScaleFeatures>) -> Result<Self, FusionError> {
        let Some(finest) = scales.last() else {
            return Err(FusionError::InvalidArgument("at least one scale is required".into()));
        };
        for pair in scales.windows(2) {
            if pair[1].width <= pair[0].width || pair[1].height <= pair[0].height {
                return Err(FusionError::InvalidArgument("scales must strictly increase in resolution".into()));
            }
        }
        if scales.iter().any(|s| finest.width % s.width != 0 || finest.height % s.height != 0) {
            return Err(FusionError::InvalidArgument("every scale must divide the finest one".into()));
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[ScaleFeatures] {
        &self.scales
    }

    /// The scale with exactly this resolution.
    pub fn select(&self, width: usize, height: usize) -> Option<&ScaleFeatures> {
        self.scales.iter().find(|s| s.width == width && s.height == height)
    }
}

/// 3x3 convolution with zero padding 1.
#[derive(Debug, Clone, PartialEq)]
struct Conv3 {
    c_in: usize,
    c_out: usize,
    stride: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

impl Conv3 {
    fn seeded(c_in: usize, c_out: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = 1.0 / ((c_in * 9) as f32).sqrt();
        let weight = (0..c_out * c_in * 9).map(|_| rng.random_range(-a..a)).collect();
        let bias = (0..c_out).map(|_| rng.random_range(-a..a)).collect();
        Self { c_in, c_out, stride, weight, bias }
    }

    fn zeros(c_in: usize, c_out: usize) -> Self {
        Self { c_in, c_out, stride: 1, weight: vec![0.0; c_out * c_in * 9], bias: vec![0.0; c_out] }
    }

    fn forward(&self, x: &ScaleFeatures) -> ScaleFeatures {
        debug_assert_eq!(x.channels, self.c_in);
        let (h, w, s) = (x.height, x.width, self.stride);
        let (ho, wo) = ((h - 1) / s + 1, (w - 1) / s + 1);
        let mut data = vec![0.0f32; self.c_out * ho * wo];
        data.par_chunks_mut(ho * wo).enumerate().for_each(|(co, out)| {
            out.iter_mut().for_each(|v| *v = self.bias[co]);
            for ci in 0..self.c_in {
                let plane = x.plane(ci);
                let k = &self.weight[(co * self.c_in + ci) * 9..(co * self.c_in + ci + 1) * 9];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0f32;
                        for ky in 0..3 {
                            let iy = (oy * s + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * s + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += k[ky * 3 + kx] * plane[iy as usize * w + ix as usize];
                            }
                        }
                        out[oy * wo + ox] += acc;
                    }
                }
            }
        });
        ScaleFeatures { channels: self.c_out, height: ho, width: wo, data }
    }
}

fn silu(mut x: ScaleFeatures) -> ScaleFeatures {
    x.data.iter_mut().for_each(|v| *v /= 1.0 + (-*v).exp());
    x
}

fn avg_pool2(x: &ScaleFeatures) -> ScaleFeatures {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut data = Vec::with_capacity(x.channels * h * w);
    for c in 0..x.channels {
        let p = x.plane(c);
        for y in 0..h {
            for xx in 0..w {
                let i = 2 * y * x.width + 2 * xx;
                data.push(0.25 * (p[i] + p[i + 1] + p[i + x.width] + p[i + x.width + 1]));
            }
        }
    }
    ScaleFeatures { channels: x.channels, height: h, width: w, data }
}

/// Fully convolutional residual encoder with fixed random weights. Produces
/// `levels` maps, each half the resolution of the next.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEncoder {
    stem: Conv3,
    blocks: Vec<(Conv3, Conv3)>,
}

impl ResidualEncoder {
    pub fn seeded(in_channels: usize, channels: usize, levels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv3::seeded(in_channels, channels, 1, &mut rng);
        let blocks = (0..levels.max(1))
            .map(|_| (Conv3::seeded(channels, channels, 1, &mut rng), Conv3::seeded(channels, channels, 1, &mut rng)))
            .collect();
        Self { stem, blocks }
    }

    pub fn levels(&self) -> usize {
        self.blocks.len()
    }

    pub fn encode(&self, image: &ScaleFeatures) -> Result<MultiScaleFeatures, FusionError> {
        if image.channels != self.stem.c_in {
            return Err(FusionError::ShapeMismatch(format!(
                "encoder expects {} input channels, got {}",
                self.stem.c_in, image.channels
            )));
        }
        let step = 1usize << (self.levels() - 1);
        if image.width % step != 0 || image.height % step != 0 {
            return Err(FusionError::InvalidArgument(format!(
                "{}x{} is not divisible by {step}",
                image.width, image.height
            )));
        }
        let mut x = self.stem.forward(image);
        let mut scales = Vec::with_capacity(self.levels());
        for (i, (a, b)) in self.blocks.iter().enumerate() {
            if i > 0 {
                x = avg_pool2(&x);
            }
            let r = b.forward(&silu(a.forward(&x)));
            x.data.iter_mut().zip(&r.data).for_each(|(v, d)| *v += d);
            scales.push(x.clone());
        }
        scales.reverse();
        MultiScaleFeatures::new(scales)
    }
}

/// Keypoint-image encoder: three stride-2 stages and a zero-initialized
/// output convolution, so its output is zero until trained.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointEncoder {
    stages: Vec<(Conv3, Conv3)>,
    out: Conv3,
}

impl KeypointEncoder {
    pub const DOWNSAMPLE: usize = 8;

    pub fn new(hidden: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let stages = (0..3)
            .map(|_| {
                let down = Conv3::seeded(c_in, hidden, 2, &mut rng);
                let same = Conv3::seeded(hidden, hidden, 1, &mut rng);
                c_in = hidden;
                (down, same)
            })
            .collect();
        Self { stages, out: Conv3::zeros(hidden, out_channels) }
    }

    pub fn out_channels(&self) -> usize {
        self.out.c_out
    }

    pub fn output_is_zero_initialized(&self) -> bool {
        self.out.weight.iter().chain(&self.out.bias).all(|v| *v == 0.0)
    }
}

/// Encodes a `[3, H, W]` keypoint image to `[C, H / 8, W / 8]`.
pub fn keypoint_encode(image: &ScaleFeatures, encoder: &KeypointEncoder) -> Result<ScaleFeatures, FusionError> {
    if image.channels != 3 {
        return Err(FusionError::ShapeMismatch(format!("keypoint image has {} channels, expected 3", image.channels)));
    }
    let f = KeypointEncoder::DOWNSAMPLE;
    if image.width % f != 0 || image.height % f != 0 {
        return Err(FusionError::NonDivisibleResolution { width: image.width, height: image.height });
    }
    let mut x = image.clone();
    for (down, same) in &encoder.stages {
        x = silu(same.forward(&silu(down.forward(&x))));
    }
    Ok(encoder.out.forward(&x))
}
