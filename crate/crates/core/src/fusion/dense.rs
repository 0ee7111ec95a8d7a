use rayon::prelude::*;

use crate::geometry::ViewEmbedding;

use super::attention::{add_output_projection, dot, softmax_in_place};
use super::{concat_tokens, embeddings_f32, AttentionParams, FeatureStack, FusionError, FusionStats};

/// Full attention where every query row attends over one contiguous group of
/// keys. `keys`/`values` hold `groups * group_len` rows of width `d_head` and
/// `group_of(row)` picks the group for a query row.
fn grouped_attention(
    base: &FeatureStack,
    queries: &[f32],
    keys: &[f32],
    values: &[f32],
    group_len: usize,
    group_of: impl Fn(usize) -> usize + Sync,
    params: &AttentionParams,
) -> (FeatureStack, FusionStats) {
    let d = params.d_head;
    let c = params.channels;
    let rows = queries.len() / d;
    let scale = 1.0 / (d as f32).sqrt();
    let all_valid = vec![true; group_len];

    let mut map = vec![0.0f32; rows * group_len];
    let mut attended = vec![0.0f32; rows * d];
    let mut out = base.to_tokens();
    let deviation = out
        .par_chunks_mut(c)
        .zip(map.par_chunks_mut(group_len))
        .zip(attended.par_chunks_mut(d))
        .enumerate()
        .map(|(row, ((y, weights), a))| {
            let q = &queries[row * d..(row + 1) * d];
            let g = group_of(row) * group_len;
            for (j, w) in weights.iter_mut().enumerate() {
                *w = dot(q, &keys[(g + j) * d..(g + j + 1) * d]) * scale;
            }
            let total = softmax_in_place(weights, &all_valid).expect("groups are non-empty");
            for (j, w) in weights.iter().enumerate() {
                for (acc, x) in a.iter_mut().zip(&values[(g + j) * d..(g + j + 1) * d]) {
                    *acc += w * x;
                }
            }
            add_output_projection(&params.w_o, a, y);
            (total - 1.0).abs()
        })
        .reduce(|| 0.0, f64::max);

    let stats = FusionStats {
        q_elements: queries.len() as u64,
        kv_elements: keys.len() as u64,
        attn_map_elements: map.len() as u64,
        embed_concat_elements: 0,
        queries: rows as u64,
        passthrough_queries: 0,
        max_row_sum_deviation: deviation,
    };
    drop((map, attended));
    (base.from_tokens_like(&out), stats)
}

/// Full spatial self-attention inside each view, no cross-view mixing.
pub fn per_view_self_attention(features: &FeatureStack, params: &AttentionParams) -> Result<FeatureStack, FusionError> {
    per_view_self_attention_with_stats(features, params).map(|(f, _)| f)
}

pub fn per_view_self_attention_with_stats(
    features: &FeatureStack,
    params: &AttentionParams,
) -> Result<(FeatureStack, FusionStats), FusionError> {
    params.check(features.channels(), features.channels(), "self attention")?;
    let px = features.pixels();
    let tokens = features.to_tokens();
    let queries = params.project(&params.w_q, &tokens);
    let keys = params.project(&params.w_k, &tokens);
    let values = params.project(&params.w_v, &tokens);
    drop(tokens);
    Ok(grouped_attention(features, &queries, &keys, &values, px, |row| row / px, params))
}

/// Dense multiview attention: every pixel attends over every pixel of every
/// view. Each view gets its own copy of the concatenated key/value bank, as in
/// a batched implementation.
pub fn dense_mv_fuse(
    features: &FeatureStack,
    embeddings: &[ViewEmbedding],
    params: &AttentionParams,
) -> Result<FeatureStack, FusionError> {
    dense_mv_fuse_with_stats(features, embeddings, params).map(|(f, _)| f)
}

pub fn dense_mv_fuse_with_stats(
    features: &FeatureStack,
    embeddings: &[ViewEmbedding],
    params: &AttentionParams,
) -> Result<(FeatureStack, FusionStats), FusionError> {
    if embeddings.len() != features.n_views() {
        return Err(FusionError::ShapeMismatch(format!(
            "{} embeddings for {} views",
            embeddings.len(),
            features.n_views()
        )));
    }
    let (emb, e) = embeddings_f32(embeddings)?;
    let c = features.channels();
    params.check(c + e, c, "dense attention")?;
    let n = features.n_views();
    let px = features.pixels();
    let tokens = concat_tokens(features, &emb);
    let queries = params.project(&params.w_q, &tokens);
    let bank_k = params.project(&params.w_k, &tokens);
    let bank_v = params.project(&params.w_v, &tokens);
    drop(tokens);
    let keys = bank_k.repeat(n);
    let values = bank_v.repeat(n);
    drop((bank_k, bank_v));
    let (out, mut stats) = grouped_attention(features, &queries, &keys, &values, n * px, |row| row / px, params);
    stats.embed_concat_elements = (n * n * px * e) as u64;
    Ok((out, stats))
}
