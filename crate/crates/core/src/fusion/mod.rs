//! Attention-based feature fusion across views.
//!
//! All schemes operate on a [`FeatureStack`] of shape `[N, C, H, W]` and add
//! a residual to it. The mesh-guided schemes gather a fixed number of key
//! slots per query (`4` per source view) into dense key/value tensors, with a
//! validity mask marking slots that point outside the image. Queries whose
//! pixel misses the mesh, or whose slots are all invalid, pass through
//! bit-for-bit.
//!
//! Every pass reports [`FusionStats`] with the element counts of the tensors
//! it materialized, so they can be compared with the closed-form counts in
//! [`crate::bench`].

mod attention;
mod dense;
mod encoder;
mod mesh;

pub use attention::{attention, softmax_in_place};
pub use dense::{dense_mv_fuse, dense_mv_fuse_with_stats, per_view_self_attention, per_view_self_attention_with_stats};
pub use encoder::{keypoint_encode, KeypointEncoder, MultiScaleFeatures, ResidualEncoder, ScaleFeatures};
pub use mesh::{
    epipolar_fuse, epipolar_fuse_with_stats, meat_block, meat_block_with_stats, meat_feat, meat_feat_with_stats,
    meat_vae, meat_vae_with_stats, RefContext,
};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::ViewEmbedding;
use crate::tensor_io::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("attention needs at least one key")]
    EmptyKeySet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no reference scale matches {width}x{height}")]
    NoMatchingScale { width: usize, height: usize },
    #[error("{width}x{height} is not divisible by 8")]
    NonDivisibleResolution { width: usize, height: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Multiview feature maps, `[n_views, channels, height, width]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    n_views: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    view_ids: Vec<i64>,
}

impl FeatureStack {
    pub fn new(
        n_views: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f32>,
        view_ids: Vec<i64>,
    ) -> Result<Self, FusionError> {
        if n_views == 0 || channels == 0 || height == 0 || width == 0 {
            return Err(FusionError::ShapeMismatch("feature stack dimensions must be non-zero".into()));
        }
        if data.len() != n_views * channels * height * width {
            return Err(FusionError::ShapeMismatch(format!(
                "{} values for shape [{n_views}, {channels}, {height}, {width}]",
                data.len()
            )));
        }
        if view_ids.len() != n_views {
            return Err(FusionError::ShapeMismatch("view id count differs from view count".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FusionError::InvalidArgument("feature stack holds non-finite values".into()));
        }
        Ok(Self { n_views, channels, height, width, data, view_ids })
    }

    /// Uniform random features in `[-1, 1)`.
    pub fn seeded(n_views: usize, channels: usize, height: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n_views * channels * height * width).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Self::new(n_views, channels, height, width, data, (0..n_views as i64).collect())
            .expect("seeded stack is well formed")
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn view_ids(&self) -> &[i64] {
        &self.view_ids
    }

    /// `[C, H, W]` slice of one view.
    pub fn view(&self, v: usize) -> &[f32] {
        let n = self.channels * self.pixels();
        &self.data[v * n..(v + 1) * n]
    }

    pub fn view_mut(&mut self, v: usize) -> &mut [f32] {
        let n = self.channels * self.pixels();
        &mut self.data[v * n..(v + 1) * n]
    }

    /// Channel vector of one pixel.
    pub fn token(&self, v: usize, pixel: usize) -> Vec<f32> {
        let base = v * self.channels * self.pixels() + pixel;
        (0..self.channels).map(|c| self.data[base + c * self.pixels()]).collect()
    }

    /// Token-major copy `[N * H * W, C]`.
    pub(crate) fn to_tokens(&self) -> Vec<f32> {
        let (c, px) = (self.channels, self.pixels());
        let mut out = vec![0.0f32; self.n_views * px * c];
        for v in 0..self.n_views {
            let view = self.view(v);
            for ch in 0..c {
                for p in 0..px {
                    out[(v * px + p) * c + ch] = view[ch * px + p];
                }
            }
        }
        out
    }

    /// Inverse of [`Self::to_tokens`], keeping this stack's shape and ids.
    pub(crate) fn from_tokens_like(&self, tokens: &[f32]) -> Self {
        let (c, px) = (self.channels, self.pixels());
        let mut data = vec![0.0f32; self.data.len()];
        for v in 0..self.n_views {
            for p in 0..px {
                for ch in 0..c {
                    data[v * c * px + ch * px + p] = tokens[(v * px + p) * c + ch];
                }
            }
        }
        Self { data, ..self.clone_shape() }
    }

    fn clone_shape(&self) -> Self {
        Self {
            n_views: self.n_views,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: Vec::new(),
            view_ids: self.view_ids.clone(),
        }
    }

    /// Views reordered so that new view `i` is old view `order[i]`.
    pub fn permute_views(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &v in order {
            data.extend_from_slice(self.view(v));
        }
        let view_ids = order.iter().map(|&v| self.view_ids[v]).collect();
        Self { data, view_ids, ..self.clone_shape() }
    }

    pub fn to_tensor(&self) -> Result<Tensor, TensorError> {
        Tensor::f32(vec![self.n_views, self.channels, self.height, self.width], self.data.clone())
    }

    pub fn from_tensor(t: Tensor, view_ids: Option<Vec<i64>>) -> Result<Self, FusionError> {
        let d = t.dims().to_vec();
        if d.len() != 4 {
            return Err(FusionError::ShapeMismatch(format!("feature tensor must be rank 4, got {d:?}")));
        }
        let ids = view_ids.unwrap_or_else(|| (0..d[0] as i64).collect());
        Self::new(d[0], d[1], d[2], d[3], t.into_f32()?, ids)
    }

    pub fn save(&self, path: &Path) -> Result<(), FusionError> {
        Ok(self.to_tensor()?.save(path)?)
    }
}

/// Projection weights for one single-head attention layer.
///
/// `w_q`, `w_k`, `w_v` are `[d_head, d_in]` and `w_o` is `[channels, d_head]`,
/// all row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub d_in: usize,
    pub d_head: usize,
    pub channels: usize,
    pub w_q: Vec<f32>,
    pub w_k: Vec<f32>,
    pub w_v: Vec<f32>,
    pub w_o: Vec<f32>,
}

impl AttentionParams {
    pub fn new(
        d_in: usize,
        d_head: usize,
        channels: usize,
        w_q: Vec<f32>,
        w_k: Vec<f32>,
        w_v: Vec<f32>,
        w_o: Vec<f32>,
    ) -> Result<Self, FusionError> {
        let proj = d_head * d_in;
        if w_q.len() != proj || w_k.len() != proj || w_v.len() != proj || w_o.len() != channels * d_head {
            return Err(FusionError::ShapeMismatch("attention weight sizes do not match dimensions".into()));
        }
        if w_q.iter().chain(&w_k).chain(&w_v).chain(&w_o).any(|v| !v.is_finite()) {
            return Err(FusionError::InvalidArgument("non-finite attention weight".into()));
        }
        Ok(Self { d_in, d_head, channels, w_q, w_k, w_v, w_o })
    }

    /// Uniform weights scaled by the fan-in; head size equals `channels`.
    pub fn seeded(d_in: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_head = channels;
        let a = 1.0 / (d_in as f32).sqrt();
        let mut draw = |n: usize, scale: f32| (0..n).map(|_| rng.random_range(-scale..scale)).collect::<Vec<f32>>();
        let w_q = draw(d_head * d_in, a);
        let w_k = draw(d_head * d_in, a);
        let w_v = draw(d_head * d_in, a);
        let w_o = draw(channels * d_head, 1.0 / (d_head as f32).sqrt());
        Self { d_in, d_head, channels, w_q, w_k, w_v, w_o }
    }

    pub fn with_zero_output(mut self) -> Self {
        self.w_o.iter_mut().for_each(|w| *w = 0.0);
        self
    }

    /// Projects `tokens` (`[T, d_in]`) with one of the input matrices.
    pub(crate) fn project(&self, weights: &[f32], tokens: &[f32]) -> Vec<f32> {
        attention::project_rows(weights, self.d_head, self.d_in, tokens)
    }

    fn check(&self, d_in: usize, channels: usize, what: &str) -> Result<(), FusionError> {
        if self.d_in != d_in || self.channels != channels {
            return Err(FusionError::ShapeMismatch(format!(
                "{what} params expect d_in {} / channels {}, got {d_in} / {channels}",
                self.d_in, self.channels
            )));
        }
        Ok(())
    }
}

/// The three parameter sets of one fusion block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub feat: AttentionParams,
    pub vae: AttentionParams,
    pub self_attn: AttentionParams,
}

impl BlockParams {
    /// Each stage draws from its own stream derived from `seed`.
    pub fn seeded(channels: usize, embed_len: usize, seed: u64) -> Self {
        Self {
            feat: AttentionParams::seeded(channels + embed_len, channels, stream_seed(seed, 1)),
            vae: AttentionParams::seeded(channels + embed_len, channels, stream_seed(seed, 2)),
            self_attn: AttentionParams::seeded(channels, channels, stream_seed(seed, 3)),
        }
    }

    pub fn with_zero_outputs(self) -> Self {
        Self {
            feat: self.feat.with_zero_output(),
            vae: self.vae.with_zero_output(),
            self_attn: self.self_attn.with_zero_output(),
        }
    }
}

/// Derives an independent seed for a numbered sub-stream.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Element counts of the tensors a fusion pass materialized, and the worst
/// deviation of any softmax row from summing to one.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct FusionStats {
    pub q_elements: u64,
    pub kv_elements: u64,
    pub attn_map_elements: u64,
    /// Elements of the key-side embedding concatenation (not part of the
    /// closed-form counts).
    pub embed_concat_elements: u64,
    pub queries: u64,
    pub passthrough_queries: u64,
    pub max_row_sum_deviation: f64,
}

impl FusionStats {
    /// Totals of two passes; the row-sum deviation is the worse of the two.
    pub fn merge(self, other: FusionStats) -> FusionStats {
        FusionStats {
            q_elements: self.q_elements + other.q_elements,
            kv_elements: self.kv_elements + other.kv_elements,
            attn_map_elements: self.attn_map_elements + other.attn_map_elements,
            embed_concat_elements: self.embed_concat_elements + other.embed_concat_elements,
            queries: self.queries + other.queries,
            passthrough_queries: self.passthrough_queries + other.passthrough_queries,
            max_row_sum_deviation: self.max_row_sum_deviation.max(other.max_row_sum_deviation),
        }
    }
}

/// Embeddings of all views as `f32`, checking they share one length.
pub(crate) fn embeddings_f32(embeddings: &[ViewEmbedding]) -> Result<(Vec<Vec<f32>>, usize), FusionError> {
    let len = embeddings.first().map(|e| e.len()).unwrap_or(0);
    if embeddings.iter().any(|e| e.len() != len) {
        return Err(FusionError::ShapeMismatch("view embeddings differ in length".into()));
    }
    Ok((embeddings.iter().map(|e| e.to_f32()).collect(), len))
}

/// `[N * P, C + E]` tokens of features concatenated with their view's
/// embedding.
pub(crate) fn concat_tokens(features: &FeatureStack, embeddings: &[Vec<f32>]) -> Vec<f32> {
    let (c, px) = (features.channels(), features.pixels());
    let e = embeddings.first().map(|e| e.len()).unwrap_or(0);
    let d = c + e;
    let mut out = vec![0.0f32; features.n_views() * px * d];
    for v in 0..features.n_views() {
        let view = features.view(v);
        for p in 0..px {
            let row = &mut out[(v * px + p) * d..(v * px + p + 1) * d];
            for ch in 0..c {
                row[ch] = view[ch * px + p];
            }
            row[c..].copy_from_slice(&embeddings[v]);
        }
    }
    out
}
