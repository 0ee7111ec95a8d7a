use crate::correspondence::{CorrespondenceTable, EpipolarCandidates, GRID_SAMPLES};
use crate::geometry::ViewEmbedding;

use super::attention::SparseAttention;
use super::dense::per_view_self_attention_with_stats;
use super::{
    concat_tokens, embeddings_f32, AttentionParams, BlockParams, FeatureStack, FusionError, FusionStats,
    MultiScaleFeatures,
};

fn check_table(features: &FeatureStack, table: &CorrespondenceTable) -> Result<(), FusionError> {
    if table.n_views() != features.n_views() || table.width() != features.width() || table.height() != features.height()
    {
        return Err(FusionError::ShapeMismatch(format!(
            "table is {} views at {}x{}, features are {} views at {}x{}",
            table.n_views(),
            table.width(),
            table.height(),
            features.n_views(),
            features.width(),
            features.height()
        )));
    }
    Ok(())
}

fn check_embeddings(features: &FeatureStack, embeddings: &[ViewEmbedding]) -> Result<(), FusionError> {
    if embeddings.len() != features.n_views() {
        return Err(FusionError::ShapeMismatch(format!(
            "{} embeddings for {} views",
            embeddings.len(),
            features.n_views()
        )));
    }
    Ok(())
}

/// Cross-view mesh attention over U-Net features.
///
/// Each pixel of each view queries with its own feature plus its view's pose
/// embedding; keys and values are the features (plus pose embeddings) at the
/// four integer samples of its intersection point in every view.
pub fn meat_feat(
    features: &FeatureStack,
    table: &CorrespondenceTable,
    embeddings: &[ViewEmbedding],
    params: &AttentionParams,
) -> Result<FeatureStack, FusionError> {
    meat_feat_with_stats(features, table, embeddings, params).map(|(f, _)| f)
}

pub fn meat_feat_with_stats(
    features: &FeatureStack,
    table: &CorrespondenceTable,
    embeddings: &[ViewEmbedding],
    params: &AttentionParams,
) -> Result<(FeatureStack, FusionStats), FusionError> {
    check_table(features, table)?;
    check_embeddings(features, embeddings)?;
    let (emb, e) = embeddings_f32(embeddings)?;
    let c = features.channels();
    params.check(c + e, c, "feature attention")?;

    let n = features.n_views();
    let px = features.pixels();
    let w = features.width();
    let tokens = concat_tokens(features, &emb);
    let queries = params.project(&params.w_q, &tokens);
    let bank_k = params.project(&params.w_k, &tokens);
    let bank_v = params.project(&params.w_v, &tokens);
    drop(tokens);

    let kernel = SparseAttention { queries: &queries, bank_k: &bank_k, bank_v: &bank_v, slots: n * GRID_SAMPLES, params };
    let (out, mut stats) = kernel.run(
        features,
        |row, slots| {
            let entry = table.entry(row / px, row % px);
            for (src, set) in entry.iter().enumerate() {
                for k in 0..GRID_SAMPLES {
                    if set.valid[k] {
                        let [x, y] = set.indices[k];
                        slots[src * GRID_SAMPLES + k] = Some(src * px + y as usize * w + x as usize);
                    }
                }
            }
        },
        |row| table.mask(row / px, row % px),
    );
    stats.embed_concat_elements = (n * px * n * GRID_SAMPLES * e) as u64;
    Ok((out, stats))
}

/// Which view is the reference and its pose embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct RefContext {
    pub ref_view: usize,
    pub embedding: ViewEmbedding,
}

/// Mesh attention against the reference view's encoder features.
///
/// Keys and values come only from the reference view: the four samples of
/// each pixel's intersection point in the reference feature scale whose
/// resolution matches the working map.
pub fn meat_vae(
    features: &FeatureStack,
    ref_features: &MultiScaleFeatures,
    table: &CorrespondenceTable,
    target_embeddings: &[ViewEmbedding],
    reference: &RefContext,
    params: &AttentionParams,
) -> Result<FeatureStack, FusionError> {
    meat_vae_with_stats(features, ref_features, table, target_embeddings, reference, params).map(|(f, _)| f)
}

pub fn meat_vae_with_stats(
    features: &FeatureStack,
    ref_features: &MultiScaleFeatures,
    table: &CorrespondenceTable,
    target_embeddings: &[ViewEmbedding],
    reference: &RefContext,
    params: &AttentionParams,
) -> Result<(FeatureStack, FusionStats), FusionError> {
    check_table(features, table)?;
    check_embeddings(features, target_embeddings)?;
    let (emb, e) = embeddings_f32(target_embeddings)?;
    if reference.embedding.len() != e {
        return Err(FusionError::ShapeMismatch("reference embedding length differs from target embeddings".into()));
    }
    if reference.ref_view >= features.n_views() {
        return Err(FusionError::InvalidArgument(format!("reference view {} out of range", reference.ref_view)));
    }
    let (w, h) = (features.width(), features.height());
    let scale = ref_features.select(w, h).ok_or(FusionError::NoMatchingScale { width: w, height: h })?;
    let c = features.channels();
    if scale.channels != c {
        return Err(FusionError::ShapeMismatch(format!(
            "reference scale has {} channels, features have {c}",
            scale.channels
        )));
    }
    params.check(c + e, c, "reference attention")?;

    let px = features.pixels();
    let tokens = concat_tokens(features, &emb);
    let queries = params.project(&params.w_q, &tokens);
    drop(tokens);
    let ref_stack = FeatureStack::new(1, c, h, w, scale.data.clone(), vec![0])?;
    let ref_tokens = concat_tokens(&ref_stack, &[reference.embedding.to_f32()]);
    let bank_k = params.project(&params.w_k, &ref_tokens);
    let bank_v = params.project(&params.w_v, &ref_tokens);
    drop((ref_stack, ref_tokens));

    let r = reference.ref_view;
    let kernel = SparseAttention { queries: &queries, bank_k: &bank_k, bank_v: &bank_v, slots: GRID_SAMPLES, params };
    let (out, mut stats) = kernel.run(
        features,
        |row, slots| {
            let set = &table.entry(row / px, row % px)[r];
            for k in 0..GRID_SAMPLES {
                if set.valid[k] {
                    let [x, y] = set.indices[k];
                    slots[k] = Some(y as usize * w + x as usize);
                }
            }
        },
        |row| table.mask(row / px, row % px),
    );
    stats.embed_concat_elements = (features.n_views() * px * GRID_SAMPLES * e) as u64;
    Ok((out, stats))
}

/// Feature attention, then reference attention, then per-view
/// self-attention, each with its own residual.
#[allow(clippy::too_many_arguments)]
pub fn meat_block(
    features: &FeatureStack,
    table: &CorrespondenceTable,
    ref_features: &MultiScaleFeatures,
    embeddings: &[ViewEmbedding],
    reference: &RefContext,
    params: &BlockParams,
) -> Result<FeatureStack, FusionError> {
    meat_block_with_stats(features, table, ref_features, embeddings, reference, params).map(|(f, _)| f)
}

/// Like [`meat_block`], returning the stats of each stage in order.
pub fn meat_block_with_stats(
    features: &FeatureStack,
    table: &CorrespondenceTable,
    ref_features: &MultiScaleFeatures,
    embeddings: &[ViewEmbedding],
    reference: &RefContext,
    params: &BlockParams,
) -> Result<(FeatureStack, [FusionStats; 3]), FusionError> {
    let (x, s1) = meat_feat_with_stats(features, table, embeddings, &params.feat)?;
    let (x, s2) = meat_vae_with_stats(&x, ref_features, table, embeddings, reference, &params.vae)?;
    let (x, s3) = per_view_self_attention_with_stats(&x, &params.self_attn)?;
    Ok((x, [s1, s2, s3]))
}

/// Epipolar-attention baseline: every pixel attends over the four samples of
/// each of its `K` depth candidates in every view. `candidates[v]` must
/// target view `v`.
pub fn epipolar_fuse(
    features: &FeatureStack,
    candidates: &[EpipolarCandidates],
    embeddings: &[ViewEmbedding],
    params: &AttentionParams,
) -> Result<FeatureStack, FusionError> {
    epipolar_fuse_with_stats(features, candidates, embeddings, params).map(|(f, _)| f)
}

pub fn epipolar_fuse_with_stats(
    features: &FeatureStack,
    candidates: &[EpipolarCandidates],
    embeddings: &[ViewEmbedding],
    params: &AttentionParams,
) -> Result<(FeatureStack, FusionStats), FusionError> {
    check_embeddings(features, embeddings)?;
    let n = features.n_views();
    let (w, h) = (features.width(), features.height());
    if candidates.len() != n {
        return Err(FusionError::ShapeMismatch(format!("{} candidate sets for {n} views", candidates.len())));
    }
    let k = candidates[0].samples_per_ray();
    for (v, cand) in candidates.iter().enumerate() {
        if cand.target_view() != v || cand.n_views() != n || cand.width() != w || cand.height() != h || cand.samples_per_ray() != k
        {
            return Err(FusionError::ShapeMismatch(format!("epipolar candidates for view {v} do not match the stack")));
        }
    }
    let (emb, e) = embeddings_f32(embeddings)?;
    let c = features.channels();
    params.check(c + e, c, "epipolar attention")?;

    let px = features.pixels();
    let tokens = concat_tokens(features, &emb);
    let queries = params.project(&params.w_q, &tokens);
    let bank_k = params.project(&params.w_k, &tokens);
    let bank_v = params.project(&params.w_v, &tokens);
    drop(tokens);

    let slots = n * k * GRID_SAMPLES;
    let kernel = SparseAttention { queries: &queries, bank_k: &bank_k, bank_v: &bank_v, slots, params };
    let (out, mut stats) = kernel.run(
        features,
        |row, out| {
            let sets = candidates[row / px].pixel(row % px);
            for (i, set) in sets.iter().enumerate() {
                let src = i % n;
                for g in 0..GRID_SAMPLES {
                    if set.valid[g] {
                        let [x, y] = set.indices[g];
                        out[i * GRID_SAMPLES + g] = Some(src * px + y as usize * w + x as usize);
                    }
                }
            }
        },
        |_| true,
    );
    stats.embed_concat_elements = (n * px * slots * e) as u64;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correspondence::SampleIndexSet;
    use crate::fusion::ScaleFeatures;
    use crate::geometry::harmonic_embed;

    fn embeddings(n: usize) -> Vec<ViewEmbedding> {
        (0..n).map(|v| harmonic_embed(&[v as f64 * 0.7, 0.1, 1.0], 1)).collect()
    }

    /// Table where every pixel samples itself and its right neighbour in every view.
    fn simple_table(n: usize, w: usize, h: usize) -> CorrespondenceTable {
        let mut sets = Vec::new();
        for _ in 0..n {
            for p in 0..w * h {
                let (x, y) = ((p % w) as i32, (p / w) as i32);
                let mut set = SampleIndexSet::INVALID;
                for g in 0..GRID_SAMPLES {
                    let xx = x + (g % 2) as i32;
                    set.indices[g] = [xx, y];
                    set.valid[g] = xx < w as i32;
                }
                sets.extend(std::iter::repeat_n(set, n));
            }
        }
        CorrespondenceTable::from_parts(n, w, h, sets, vec![true; n * w * h]).unwrap()
    }

    #[test]
    fn masked_table_passes_through() {
        let f = FeatureStack::seeded(3, 4, 4, 4, 9);
        let t = CorrespondenceTable::all_masked(3, 4, 4);
        let e = embeddings(3);
        let p = AttentionParams::seeded(4 + e[0].len(), 4, 1);
        let (out, stats) = meat_feat_with_stats(&f, &t, &e, &p).unwrap();
        assert_eq!(out.data(), f.data());
        assert_eq!(stats.passthrough_queries, 48);
        assert_eq!(stats.kv_elements, (48 * 12 * 4) as u64);
    }

    #[test]
    fn fused_rows_change_and_shapes_hold() {
        let f = FeatureStack::seeded(2, 4, 3, 3, 2);
        let t = simple_table(2, 3, 3);
        let e = embeddings(2);
        let p = AttentionParams::seeded(4 + e[0].len(), 4, 3);
        let (out, stats) = meat_feat_with_stats(&f, &t, &e, &p).unwrap();
        assert_eq!(stats.passthrough_queries, 0);
        assert!(stats.max_row_sum_deviation < 1e-6);
        assert_ne!(out.data(), f.data());
        let zero = p.clone().with_zero_output();
        assert_eq!(meat_feat(&f, &t, &e, &zero).unwrap().data(), f.data());
    }

    #[test]
    fn shape_errors() {
        let f = FeatureStack::seeded(2, 4, 3, 3, 2);
        let e = embeddings(2);
        let p = AttentionParams::seeded(4 + e[0].len(), 4, 3);
        let wrong = CorrespondenceTable::all_masked(2, 4, 4);
        assert!(matches!(meat_feat(&f, &wrong, &e, &p), Err(FusionError::ShapeMismatch(_))));
        let t = CorrespondenceTable::all_masked(2, 3, 3);
        assert!(matches!(meat_feat(&f, &t, &e[..1], &p), Err(FusionError::ShapeMismatch(_))));
        let bad = AttentionParams::seeded(4, 4, 3);
        assert!(matches!(meat_feat(&f, &t, &e, &bad), Err(FusionError::ShapeMismatch(_))));
    }

    #[test]
    fn vae_uses_reference_samples_only() {
        let f = FeatureStack::seeded(2, 4, 3, 3, 2);
        let t = simple_table(2, 3, 3);
        let e = embeddings(2);
        let reference = RefContext { ref_view: 0, embedding: e[0].clone() };
        let p = AttentionParams::seeded(4 + e[0].len(), 4, 5);
        let scales = MultiScaleFeatures::new(vec![ScaleFeatures::seeded(4, 3, 3, 8)]).unwrap();
        let (out, stats) = meat_vae_with_stats(&f, &scales, &t, &e, &reference, &p).unwrap();
        assert_eq!(stats.kv_elements, (18 * 4 * 4) as u64);
        assert_ne!(out.data(), f.data());
        // changing view 1 features leaves view 0 queries' keys untouched
        let mut g = f.clone();
        g.view_mut(1).iter_mut().for_each(|v| *v = 0.5);
        let out_g = meat_vae(&g, &scales, &t, &e, &reference, &p).unwrap();
        assert_eq!(out_g.view(0), out.view(0));

        let other = MultiScaleFeatures::new(vec![ScaleFeatures::seeded(4, 6, 6, 8)]).unwrap();
        assert!(matches!(
            meat_vae(&f, &other, &t, &e, &reference, &p),
            Err(FusionError::NoMatchingScale { .. })
        ));
    }

    #[test]
    fn out_of_bounds_reference_sample_passes_through() {
        let f = FeatureStack::seeded(1, 2, 1, 1, 2);
        let t = CorrespondenceTable::from_parts(1, 1, 1, vec![SampleIndexSet::INVALID], vec![true]).unwrap();
        assert!(t.mask(0, 0));
        assert_eq!(t.entry(0, 0)[0], SampleIndexSet::INVALID);
        let e = embeddings(1);
        let reference = RefContext { ref_view: 0, embedding: e[0].clone() };
        let p = AttentionParams::seeded(2 + e[0].len(), 2, 5);
        let scales = MultiScaleFeatures::new(vec![ScaleFeatures::seeded(2, 1, 1, 8)]).unwrap();
        assert_eq!(meat_vae(&f, &scales, &t, &e, &reference, &p).unwrap().data(), f.data());
    }
}
