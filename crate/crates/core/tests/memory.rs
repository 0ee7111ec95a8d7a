//! Peak allocation of each runnable scheme against its closed-form estimate.
//! Runs as one test so no other thread allocates while measuring.

use meatkit::bench::alloc::TrackingAllocator;
use meatkit::bench::{estimate_peak_bytes, run_benchmark, bench_embed_len, BenchConfig, ComplexityParams, RunStatus, Scheme};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[test]
fn measured_peaks_track_estimates() {
    let schemes = [Scheme::SelfAttn, Scheme::Dense, Scheme::Epipolar, Scheme::Mesh];
    let sizes: Vec<_> = [(4, 16, 8, 4), (8, 16, 8, 8), (6, 24, 8, 4)]
        .into_iter()
        .map(|(n, s, c, k)| ComplexityParams::new(n, s, c, k).unwrap())
        .collect();
    let config = BenchConfig { budget_bytes: 64 << 20, ..BenchConfig::default() };
    let report = run_benchmark(&schemes, &sizes, &config).unwrap();
    let mut checked = 0;
    for row in report.rows.iter().filter(|r| r.scheme.runnable()) {
        assert!(matches!(row.status, RunStatus::Measured), "{} not measured", row.scheme.name());
        let m = row.measured.as_ref().unwrap();
        let peak = m.peak_bytes.expect("allocator installed") as f64;
        let est = estimate_peak_bytes(row.scheme, &row.params, bench_embed_len()) as f64;
        assert_eq!(est, row.estimated_peak_bytes as f64);
        let rel = (peak - est).abs() / est;
        assert!(rel <= 0.01, "{} at {:?}: peak {peak} vs estimate {est}", row.scheme.name(), row.params);
        assert_eq!(m.q_elements as u128, row.analytic.q_elements);
        checked += 1;
    }
    assert_eq!(checked, schemes.len() * sizes.len());
}
