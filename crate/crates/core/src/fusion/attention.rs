use rayon::prelude::*;

use super::{AttentionParams, FeatureStack, FusionError, FusionStats};

/// Row-wise `y = W x` for `tokens` laid out `[T, d_in]`; `W` is `[d_out, d_in]`.
pub(crate) fn project_rows(w: &[f32], d_out: usize, d_in: usize, tokens: &[f32]) -> Vec<f32> {
    let t = tokens.len() / d_in;
    let mut out = vec![0.0f32; t * d_out];
    out.par_chunks_mut(d_out.max(1)).zip(tokens.par_chunks(d_in)).for_each(|(y, x)| matvec(w, x, y));
    out
}

#[inline]
pub(crate) fn matvec(w: &[f32], x: &[f32], y: &mut [f32]) {
    let d_in = x.len();
    for (row, out) in w.chunks_exact(d_in).zip(y.iter_mut()) {
        *out = dot(row, x);
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax over the entries flagged in `valid`; invalid
/// entries get weight zero. Returns the sum of the resulting weights, or
/// `None` when nothing is valid.
pub fn softmax_in_place(logits: &mut [f32], valid: &[bool]) -> Option<f64> {
    let max = logits.iter().zip(valid).filter(|(_, v)| **v).map(|(l, _)| *l).fold(f32::NEG_INFINITY, f32::max);
    if max == f32::NEG_INFINITY {
        logits.iter_mut().for_each(|l| *l = 0.0);
        return None;
    }
    let mut sum = 0.0f32;
    for (l, v) in logits.iter_mut().zip(valid) {
        *l = if *v { (*l - max).exp() } else { 0.0 };
        sum += *l;
    }
    let inv = 1.0 / sum;
    let mut total = 0.0f64;
    for l in logits.iter_mut() {
        *l *= inv;
        total += *l as f64;
    }
    Some(total)
}

/// Single-query scaled dot-product attention,
/// `softmax(q K^T / sqrt(d)) V` with `d = q.len()`.
pub fn attention(q: &[f32], keys: &[Vec<f32>], values: &[Vec<f32>]) -> Result<Vec<f32>, FusionError> {
    if keys.is_empty() {
        return Err(FusionError::EmptyKeySet);
    }
    if keys.len() != values.len() {
        return Err(FusionError::ShapeMismatch(format!("{} keys but {} values", keys.len(), values.len())));
    }
    let d_v = values[0].len();
    if keys.iter().any(|k| k.len() != q.len()) || values.iter().any(|v| v.len() != d_v) {
        return Err(FusionError::ShapeMismatch("inconsistent key or value width".into()));
    }
    let scale = 1.0 / (q.len() as f32).sqrt();
    let mut w: Vec<f32> = keys.iter().map(|k| dot(q, k) * scale).collect();
    softmax_in_place(&mut w, &vec![true; keys.len()]);
    let mut out = vec![0.0f32; d_v];
    for (wi, v) in w.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += wi * x;
        }
    }
    Ok(out)
}

/// Gathered attention with a fixed number of key slots per query.
///
/// `queries` are projected query tokens `[Q, D]`; `bank_k`/`bank_v` are
/// projected key/value tokens `[T, D]`. `fill_slots(q, slots)` writes the bank
/// index for each slot of query `q` (or `None`). Rows for which `active`
/// returns false, or whose slots are all empty, keep `residual_base` exactly.
pub(crate) struct SparseAttention<'a> {
    pub queries: &'a [f32],
    pub bank_k: &'a [f32],
    pub bank_v: &'a [f32],
    pub slots: usize,
    pub params: &'a AttentionParams,
}

impl SparseAttention<'_> {
    pub(crate) fn run(
        &self,
        base: &FeatureStack,
        fill_slots: impl Fn(usize, &mut [Option<usize>]) + Sync,
        active: impl Fn(usize) -> bool + Sync,
    ) -> (FeatureStack, FusionStats) {
        let d = self.params.d_head;
        let c = self.params.channels;
        let rows = self.queries.len() / d;
        let s = self.slots;

        // Fixed-shape gathered key/value tensors and the attention map.
        let mut slot_index = vec![None; rows * s];
        let mut keys = vec![0.0f32; rows * s * d];
        let mut values = vec![0.0f32; rows * s * d];
        let mut valid = vec![false; rows * s];
        let mut map = vec![0.0f32; rows * s];
        let mut attended = vec![0.0f32; rows * d];

        keys.par_chunks_mut(s * d)
            .zip(values.par_chunks_mut(s * d))
            .zip(valid.par_chunks_mut(s))
            .zip(slot_index.par_chunks_mut(s))
            .enumerate()
            .for_each(|(row, (((k, v), ok), idx))| {
                if !active(row) {
                    return;
                }
                fill_slots(row, idx);
                for (slot, bank) in idx.iter().enumerate() {
                    if let Some(b) = bank {
                        k[slot * d..(slot + 1) * d].copy_from_slice(&self.bank_k[b * d..(b + 1) * d]);
                        v[slot * d..(slot + 1) * d].copy_from_slice(&self.bank_v[b * d..(b + 1) * d]);
                        ok[slot] = true;
                    }
                }
            });

        let scale = 1.0 / (d as f32).sqrt();
        let tokens = base.to_tokens();
        let mut out = tokens.clone();
        let results: Vec<(bool, f64)> = out
            .par_chunks_mut(c)
            .zip(map.par_chunks_mut(s))
            .zip(attended.par_chunks_mut(d))
            .enumerate()
            .map(|(row, ((y, weights), a))| {
                let ok = &valid[row * s..(row + 1) * s];
                if !ok.iter().any(|v| *v) {
                    return (false, 0.0);
                }
                let q = &self.queries[row * d..(row + 1) * d];
                let k = &keys[row * s * d..(row + 1) * s * d];
                for (slot, w) in weights.iter_mut().enumerate() {
                    *w = if ok[slot] { dot(q, &k[slot * d..(slot + 1) * d]) * scale } else { 0.0 };
                }
                let total = softmax_in_place(weights, ok).expect("row has a valid slot");
                let v = &values[row * s * d..(row + 1) * s * d];
                for (slot, w) in weights.iter().enumerate() {
                    if ok[slot] {
                        for (acc, x) in a.iter_mut().zip(&v[slot * d..(slot + 1) * d]) {
                            *acc += w * x;
                        }
                    }
                }
                add_output_projection(&self.params.w_o, a, y);
                (true, (total - 1.0).abs())
            })
            .collect();

        let fused = results.iter().filter(|(f, _)| *f).count() as u64;
        let stats = FusionStats {
            q_elements: (rows * d) as u64,
            kv_elements: (rows * s * d) as u64,
            attn_map_elements: (rows * s) as u64,
            embed_concat_elements: 0,
            queries: rows as u64,
            passthrough_queries: rows as u64 - fused,
            max_row_sum_deviation: results.iter().map(|(_, dev)| *dev).fold(0.0, f64::max),
        };
        drop((slot_index, keys, values, valid, map, attended, tokens));
        (base.from_tokens_like(&out), stats)
    }
}

/// `y += W_o a`.
#[inline]
pub(crate) fn add_output_projection(w_o: &[f32], attended: &[f32], y: &mut [f32]) {
    for (out, row) in y.iter_mut().zip(w_o.chunks_exact(attended.len())) {
        *out += dot(row, attended);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_returns_value() {
        let out = attention(&[0.3, -2.0], &[vec![1.0, 1.0]], &[vec![3.0, -1.0]]).unwrap();
        assert_eq!(out, vec![3.0, -1.0]);
    }

    #[test]
    fn equal_logits_average() {
        let out = attention(&[1.0, 0.0], &[vec![0.0, 1.0], vec![0.0, -1.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn empty_keys() {
        assert!(matches!(attention(&[1.0], &[], &[]), Err(FusionError::EmptyKeySet)));
    }

    #[test]
    fn softmax_masks_and_normalizes() {
        let mut l = vec![1.0, 1000.0, 2.0];
        let total = softmax_in_place(&mut l, &[true, false, true]).unwrap();
        assert!((total - 1.0).abs() < 1e-6);
        assert_eq!(l[1], 0.0);
        assert!(l[2] > l[0]);
        let mut none = vec![1.0, 2.0];
        assert_eq!(softmax_in_place(&mut none, &[false, false]), None);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut l = vec![1e4, 1e4 - 1.0];
        softmax_in_place(&mut l, &[true, true]).unwrap();
        assert!(l.iter().all(|w| w.is_finite()));
    }
}
