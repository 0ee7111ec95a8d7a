//! Attention cost accounting: closed-form tensor sizes for each multiview
//! attention scheme and a harness that runs the implemented schemes and
//! measures their transient memory and time.

pub mod alloc;

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::correspondence::GRID_SAMPLES;
use crate::fusion::{
    dense_mv_fuse_with_stats, epipolar_fuse_with_stats, meat_feat_with_stats, per_view_self_attention_with_stats,
    stream_seed, AttentionParams, FusionError, FusionStats,
};
use crate::geometry::DEFAULT_EMBED_BANDS;
use crate::raster::DEFAULT_RASTER_FACTOR;
use crate::synth::{fusion_fixture, SynthError};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("no requested size fits the memory budget of {budget} bytes")]
    BudgetExceeded { budget: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// Attention schemes, in the order they are reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[serde(rename = "self")]
    SelfAttn,
    Dense,
    RowWise,
    Epipolar,
    Mesh,
}

impl Scheme {
    pub const ALL: [Scheme; 5] = [Scheme::SelfAttn, Scheme::Dense, Scheme::RowWise, Scheme::Epipolar, Scheme::Mesh];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::SelfAttn => "self",
            Scheme::Dense => "dense",
            Scheme::RowWise => "row-wise",
            Scheme::Epipolar => "epipolar",
            Scheme::Mesh => "mesh",
        }
    }

    pub fn parse(s: &str) -> Option<Scheme> {
        Scheme::ALL.into_iter().find(|x| x.name() == s)
    }

    /// Row-wise attention assumes orthographic cameras and is only counted.
    pub fn runnable(self) -> bool {
        self != Scheme::RowWise
    }
}

/// Problem size: `n` views of `s x s` features with `c` channels, `k`
/// epipolar depth samples and `d` grid samples per projected point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ComplexityParams {
    pub n: u64,
    pub s: u64,
    pub c: u64,
    pub k: u64,
    pub d: u64,
}

impl ComplexityParams {
    pub fn new(n: u64, s: u64, c: u64, k: u64) -> Result<Self, BenchError> {
        let p = Self { n, s, c, k, d: GRID_SAMPLES as u64 };
        if [n, s, c, k].contains(&0) {
            return Err(BenchError::InvalidArgument("all size parameters must be at least 1".into()));
        }
        Ok(p)
    }
}

/// Element counts of the query, key (or value) and attention-map tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SchemeCounts {
    pub q_elements: u128,
    pub kv_elements: u128,
    pub attn_map_elements: u128,
}

/// Closed-form counts for one scheme. Feature maps are `H = W = S`.
pub fn scheme_counts(scheme: Scheme, p: &ComplexityParams) -> SchemeCounts {
    let (n, s, c, k, d) = (p.n as u128, p.s as u128, p.c as u128, p.k as u128, p.d as u128);
    let (h, w) = (s, s);
    let (q, kv, map) = match scheme {
        Scheme::SelfAttn => (n * c * s * s, n * c * s * s, n * s.pow(4)),
        Scheme::Dense => (n * c * s * s, n * c * (n * s * s), n * n * s.pow(4)),
        Scheme::RowWise => ((n * h) * c * w, (n * h) * c * (n * w), n * n * s.pow(3)),
        Scheme::Epipolar => ((n * s * s) * c, (n * s * s) * c * (n * k * d), n * n * s * s * k * d),
        Scheme::Mesh => ((n * s * s) * c, (n * s * s) * c * (n * d), n * n * s * s * d),
    };
    SchemeCounts { q_elements: q, kv_elements: kv, attn_map_elements: map }
}

/// Elements of the key-side pose-embedding concatenation, which the closed
/// forms leave out.
pub fn concat_overhead(scheme: Scheme, p: &ComplexityParams, embed_len: u64) -> u128 {
    let (n, s, k, d, e) = (p.n as u128, p.s as u128, p.k as u128, p.d as u128, embed_len as u128);
    match scheme {
        Scheme::SelfAttn => 0,
        Scheme::Dense => n * (n * s * s) * e,
        Scheme::RowWise => (n * s) * (n * s) * e,
        Scheme::Epipolar => (n * s * s) * (n * k * d) * e,
        Scheme::Mesh => (n * s * s) * (n * d) * e,
    }
}

/// Analytic counts for every scheme.
pub fn complexity_counts(p: &ComplexityParams) -> Vec<(Scheme, SchemeCounts)> {
    Scheme::ALL.into_iter().map(|s| (s, scheme_counts(s, p))).collect()
}

/// Bytes of the transient buffers one fusion pass holds at its high-water
/// mark, including its output.
pub fn estimate_peak_bytes(scheme: Scheme, p: &ComplexityParams, embed_len: u64) -> u128 {
    let (n, s, c, k, d) = (p.n as u128, p.s as u128, p.c as u128, p.k as u128, p.d as u128);
    let e = embed_len as u128;
    let px = s * s;
    let tokens = n * px;
    let f = 4u128;
    let sparse = |slots: u128| {
        let rows = tokens;
        let projected = 3 * tokens * c * f;
        let concat = tokens * (c + e) * f + projected;
        let run = projected
            + rows * slots * 16
            + 2 * rows * slots * c * f
            + rows * slots
            + rows * slots * f
            + rows * c * f
            + 2 * tokens * c * f
            + rows * 16;
        concat.max(run)
    };
    match scheme {
        Scheme::SelfAttn => {
            let projected = 3 * tokens * c * f;
            (tokens * c * f + projected).max(projected + px + n * px * px * f + 2 * tokens * c * f)
        }
        Scheme::Dense => {
            let projected = 3 * tokens * c * f;
            let repeat = projected + 2 * n * tokens * c * f;
            let run = tokens * c * f + 2 * n * tokens * c * f + tokens + tokens * tokens * f + 2 * tokens * c * f;
            (tokens * (c + e) * f + projected).max(repeat).max(run)
        }
        Scheme::RowWise => {
            let map = n * n * s.pow(3) * f;
            map + 4 * tokens * c * f
        }
        Scheme::Epipolar => sparse(n * k * d),
        Scheme::Mesh => sparse(n * d),
    }
}

/// What happened for one scheme at one size.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    /// Counted only; the scheme has no runnable implementation.
    Analytic,
    /// Not run because it would exceed the memory budget.
    Estimated,
    Measured,
}

/// Measurements of one fusion pass.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measurement {
    pub q_elements: u64,
    pub kv_elements: u64,
    pub attn_map_elements: u64,
    pub embed_concat_elements: u64,
    /// High-water mark of bytes allocated during the pass, `None` when the
    /// tracking allocator is not installed.
    pub peak_bytes: Option<u64>,
    pub seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub scheme: Scheme,
    pub params: ComplexityParams,
    pub analytic: SchemeCounts,
    pub concat_overhead: u128,
    pub estimated_peak_bytes: u128,
    pub status: RunStatus,
    pub measured: Option<Measurement>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub seed: u64,
    pub budget_bytes: u64,
    pub embed_len: u64,
    pub rows: Vec<ReportRow>,
}

/// Benchmark settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub seed: u64,
    /// Runs whose estimated peak exceeds this are reported as estimates.
    pub budget_bytes: u64,
    pub raster_factor: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { seed: 0, budget_bytes: 1 << 30, raster_factor: DEFAULT_RASTER_FACTOR as usize }
    }
}

/// Embedding length used for all benchmark passes.
pub fn bench_embed_len() -> u64 {
    (3 * (2 * DEFAULT_EMBED_BANDS + 1)) as u64
}

fn run_scheme(scheme: Scheme, p: &ComplexityParams, config: &BenchConfig) -> Result<Measurement, BenchError> {
    let (n, s, c) = (p.n as usize, p.s as usize, p.c as usize);
    let fx = fusion_fixture(n, s, c, config.raster_factor, config.seed)?;
    let e = fx.embeddings.first().map(|e| e.len()).unwrap_or(0);
    let cross = AttentionParams::seeded(c + e, c, stream_seed(config.seed, 1));
    let local = AttentionParams::seeded(c, c, stream_seed(config.seed, 3));
    let epipolar = if scheme == Scheme::Epipolar { Some(fx.epipolar(p.k as usize)?) } else { None };
    let pass = || -> Result<FusionStats, FusionError> {
        let (_, stats) = match scheme {
            Scheme::SelfAttn => per_view_self_attention_with_stats(&fx.features, &local)?,
            Scheme::Dense => dense_mv_fuse_with_stats(&fx.features, &fx.embeddings, &cross)?,
            Scheme::Epipolar => {
                epipolar_fuse_with_stats(&fx.features, epipolar.as_deref().unwrap_or(&[]), &fx.embeddings, &cross)?
            }
            Scheme::Mesh => meat_feat_with_stats(&fx.features, &fx.table, &fx.embeddings, &cross)?,
            Scheme::RowWise => unreachable!("row-wise is analytic only"),
        };
        Ok(stats)
    };
    // warm the thread pool and allocator before measuring
    pass()?;
    let start = Instant::now();
    let (stats, peak) = alloc::measure_peak(&pass);
    let seconds = start.elapsed().as_secs_f64();
    let stats = stats?;
    Ok(Measurement {
        q_elements: stats.q_elements,
        kv_elements: stats.kv_elements,
        attn_map_elements: stats.attn_map_elements,
        embed_concat_elements: stats.embed_concat_elements,
        peak_bytes: peak.map(|b| b as u64),
        seconds,
        threads: rayon::current_num_threads(),
    })
}

/// Runs each runnable scheme once per size, serially, and attaches the
/// analytic counts. Schemes over budget are reported as estimates.
pub fn run_benchmark(schemes: &[Scheme], sizes: &[ComplexityParams], config: &BenchConfig) -> Result<ComplexityReport, BenchError> {
    let embed_len = bench_embed_len();
    let mut ordered: Vec<Scheme> = schemes.to_vec();
    ordered.sort();
    ordered.dedup();
    let mut rows = Vec::new();
    let mut ran_any = false;
    for p in sizes {
        for &scheme in &ordered {
            let estimate = estimate_peak_bytes(scheme, p, embed_len);
            let (status, measured) = if !scheme.runnable() {
                (RunStatus::Analytic, None)
            } else if estimate > config.budget_bytes as u128 {
                (RunStatus::Estimated, None)
            } else {
                ran_any = true;
                (RunStatus::Measured, Some(run_scheme(scheme, p, config)?))
            };
            rows.push(ReportRow {
                scheme,
                params: *p,
                analytic: scheme_counts(scheme, p),
                concat_overhead: concat_overhead(scheme, p, embed_len),
                estimated_peak_bytes: estimate,
                status,
                measured,
            });
        }
    }
    if !ran_any && ordered.iter().any(|s| s.runnable()) && !sizes.is_empty() {
        return Err(BenchError::BudgetExceeded { budget: config.budget_bytes });
    }
    Ok(ComplexityReport { seed: config.seed, budget_bytes: config.budget_bytes, embed_len, rows })
}

impl ComplexityReport {
    /// JSON report. Wall times and peaks vary between runs, so either can
    /// be left out to get byte-stable output.
    pub fn to_json(&self, include_timings: bool, include_peaks: bool) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        for row in v["rows"].as_array_mut().into_iter().flatten() {
            if let Some(m) = row.get_mut("measured").and_then(|m| m.as_object_mut()) {
                if !include_timings {
                    m.remove("seconds");
                    m.remove("threads");
                }
                if !include_peaks {
                    m.remove("peak_bytes");
                }
            }
        }
        serde_json::to_string_pretty(&v).expect("report serializes")
    }

    /// Aligned text table, rows in the order self, dense, row-wise,
    /// epipolar, mesh for each size.
    pub fn to_table(&self, include_timings: bool, include_peaks: bool) -> String {
        let mut out = String::new();
        let mut header = format!(
            "{:<9} {:>4} {:>4} {:>4} {:>3} {:>16} {:>20} {:>20} {:>16} {:>9} {:>14}",
            "scheme", "N", "S", "C", "K", "Q", "KV", "map", "concat", "status", "peak_bytes"
        );
        if include_timings {
            header.push_str(&format!(" {:>10}", "seconds"));
        }
        let _ = writeln!(out, "{header}");
        for r in &self.rows {
            let p = r.params;
            let peak = match (&r.status, &r.measured) {
                (RunStatus::Measured, Some(m)) if include_peaks => {
                    m.peak_bytes.map(|b| b.to_string()).unwrap_or_else(|| "n/a".into())
                }
                (RunStatus::Estimated, _) => format!("~{}", r.estimated_peak_bytes),
                _ => "-".into(),
            };
            let status = match r.status {
                RunStatus::Analytic => "analytic",
                RunStatus::Estimated => "estimated",
                RunStatus::Measured => "measured",
            };
            let _ = write!(
                out,
                "{:<9} {:>4} {:>4} {:>4} {:>3} {:>16} {:>20} {:>20} {:>16} {:>9} {:>14}",
                r.scheme.name(),
                p.n,
                p.s,
                p.c,
                p.k,
                r.analytic.q_elements,
                r.analytic.kv_elements,
                r.analytic.attn_map_elements,
                r.concat_overhead,
                status,
                peak
            );
            if include_timings {
                match &r.measured {
                    Some(m) => {
                        let _ = write!(out, " {:>10.4}", m.seconds);
                    }
                    None => {
                        let _ = write!(out, " {:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: u64, s: u64, k: u64) -> ComplexityParams {
        ComplexityParams::new(n, s, 8, k).unwrap()
    }

    #[test]
    fn table_examples() {
        let p = params(16, 32, 8);
        assert_eq!(scheme_counts(Scheme::Mesh, &p).attn_map_elements, 1_048_576);
        assert_eq!(scheme_counts(Scheme::Dense, &p).attn_map_elements, 268_435_456);
        assert_eq!(scheme_counts(Scheme::Epipolar, &p).attn_map_elements, 8_388_608);
        let one = params(1, 20, 1);
        assert_eq!(
            scheme_counts(Scheme::Dense, &one).attn_map_elements,
            scheme_counts(Scheme::SelfAttn, &one).attn_map_elements
        );
    }

    #[test]
    fn doubling_size() {
        let (a, b) = (params(4, 16, 8), params(4, 32, 8));
        let ratio = |s| scheme_counts(s, &b).attn_map_elements / scheme_counts(s, &a).attn_map_elements;
        assert_eq!(ratio(Scheme::Mesh), 4);
        assert_eq!(ratio(Scheme::Dense), 16);
        assert_eq!(ratio(Scheme::RowWise), 8);
    }

    #[test]
    fn over_budget_dense_is_estimated() {
        let p = params(16, 64, 8);
        let cfg = BenchConfig { budget_bytes: 1 << 20, ..BenchConfig::default() };
        let r = run_benchmark(&[Scheme::Dense, Scheme::RowWise], &[p], &cfg);
        assert!(matches!(r, Err(BenchError::BudgetExceeded { .. })));
        let small = params(1, 4, 1);
        let r = run_benchmark(&[Scheme::Dense], &[small, p], &cfg).unwrap();
        assert_eq!(r.rows[0].status, RunStatus::Measured);
        assert_eq!(r.rows[1].status, RunStatus::Estimated);
        assert!(r.to_table(false, false).contains("estimated"));
    }

    #[test]
    fn slope_of_power_law() {
        let xs = [8.0, 16.0, 32.0, 64.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(4)).collect();
        assert!((log_log_slope(&xs, &ys) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in Scheme::ALL {
            assert_eq!(Scheme::parse(s.name()), Some(s));
        }
    }
}
