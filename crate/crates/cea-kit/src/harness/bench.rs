//! Microbenchmark: two low-rank products vs a materialized dense dynamic
//! projection, plus analytic MAC accounting.
//!
//! Protocol: at least 10 warm-ups, at least 100 timed runs, median wall time
//! reported.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backbone::assembly_cost;
use crate::error::Result;
use crate::tensor::ops::randn;

pub const BENCH_WARMUPS: usize = 10;
pub const BENCH_RUNS: usize = 100;

#[derive(Debug, Clone, Serialize)]
pub struct BenchPoint {
    pub n: usize,
    pub d: usize,
    pub r: usize,
    pub macs_low_rank: u64,
    pub macs_dense: u64,
    pub analytic_ratio: f64,
    pub median_low_rank_us: f64,
    pub median_dense_us: f64,
    pub measured_speedup: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub warmups: usize,
    pub runs: usize,
    pub points: Vec<BenchPoint>,
}

fn median_us(mut samples: Vec<f64>) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

fn time_runs(mut f: impl FnMut(), warmups: usize, runs: usize) -> f64 {
    for _ in 0..warmups {
        f();
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f();
        samples.push(t0.elapsed().as_secs_f64() * 1e6);
    }
    median_us(samples)
}

fn bench_point(n: usize, d: usize, r: usize, warmups: usize, runs: usize) -> BenchPoint {
    let mut rng = ChaCha8Rng::seed_from_u64((n + d + r) as u64);
    let x = randn(&[n, d], &mut rng);
    let a = randn(&[d, r], &mut rng);
    let b = randn(&[r, d], &mut rng);
    // Low-rank route: (X A) B, never materializing a d x d matrix.
    let low = time_runs(
        || {
            let g = x.matmul(&a).unwrap();
            let _ = g.matmul(&b).unwrap();
        },
        warmups,
        runs,
    );
    // Dense route: materialize the per-instance update W = A B, then apply it.
    let dense = time_runs(
        || {
            let w = a.matmul(&b).unwrap();
            let _ = x.matmul(&w).unwrap();
        },
        warmups,
        runs,
    );
    let (macs_low, macs_dense, ratio) = assembly_cost(n, d, d, r);
    BenchPoint {
        n,
        d,
        r,
        macs_low_rank: macs_low,
        macs_dense,
        analytic_ratio: ratio,
        median_low_rank_us: low,
        median_dense_us: dense,
        measured_speedup: dense / low,
    }
}

pub fn cmd_bench(grid: &[(usize, usize, usize)], warmups: usize, runs: usize) -> Result<BenchReport> {
    let warmups = warmups.max(BENCH_WARMUPS);
    let runs = runs.max(BENCH_RUNS);
    let points = grid
        .iter()
        .map(|&(n, d, r)| bench_point(n, d, r, warmups, runs))
        .collect();
    Ok(BenchReport {
        warmups,
        runs,
        points,
    })
}

/// Default grid: a small and a large favorable point, plus an honest
/// break-even row at r = d where the two-product route stops paying.
pub fn default_grid() -> Vec<(usize, usize, usize)> {
    vec![(4096, 64, 8), (4096, 256, 8), (512, 64, 64)]
}

pub fn render_table(report: &BenchReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "microbenchmark: {} warmups, {} runs, median wall time\n",
        report.warmups, report.runs
    ));
    s.push_str("     N     d    r   MACs(low)  MACs(dense)  ratio   low us   dense us  speedup\n");
    for p in &report.points {
        s.push_str(&format!(
            "{:6} {:5} {:4} {:11} {:12} {:6.2} {:8.1} {:10.1} {:8.2}\n",
            p.n,
            p.d,
            p.r,
            p.macs_low_rank,
            p.macs_dense,
            p.analytic_ratio,
            p.median_low_rank_us,
            p.median_dense_us,
            p.measured_speedup
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_ratios_in_report() {
        // Tiny run counts keep the test fast; the analytic columns are exact
        // regardless of timing noise.
        let report = cmd_bench(&[(4096, 64, 8), (16, 8, 8)], 10, 100).unwrap();
        assert_eq!(report.points[0].analytic_ratio, 4.0);
        assert!(report.points[1].analytic_ratio <= 1.0);
        assert_eq!(
            report.points[0].macs_low_rank,
            (4096 * 64 * 8 + 4096 * 8 * 64) as u64
        );
    }

    #[test]
    fn median_of_samples() {
        assert_eq!(median_us(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_us(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
