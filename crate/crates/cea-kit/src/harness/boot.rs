//! Paired-bootstrap comparison of two per-image metric CSVs.

use std::path::Path;

use serde::Serialize;

use crate::error::{CeaError, Result};
use crate::metrics::{paired_bootstrap, read_metrics_csv, BootstrapSummary, MetricRecord};

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapReport {
    pub n_pairs: usize,
    /// Pairs dropped because one side carried the infinite-PSNR sentinel.
    pub psnr_pairs_excluded: usize,
    pub psnr: BootstrapSummary,
    pub ssim: BootstrapSummary,
}

/// Join records on image_id; unmatched ids on either side are an error.
pub fn join_records<'a>(
    a: &'a [MetricRecord],
    b: &'a [MetricRecord],
) -> Result<Vec<(&'a MetricRecord, &'a MetricRecord)>> {
    let mut missing = Vec::new();
    let mut pairs = Vec::with_capacity(a.len());
    for ra in a {
        match b.iter().find(|rb| rb.image_id == ra.image_id) {
            Some(rb) => pairs.push((ra, rb)),
            None => missing.push(format!("{} (only in first)", ra.image_id)),
        }
    }
    for rb in b {
        if !a.iter().any(|ra| ra.image_id == rb.image_id) {
            missing.push(format!("{} (only in second)", rb.image_id));
        }
    }
    if !missing.is_empty() {
        return Err(CeaError::Config(format!(
            "unmatched image ids: {}",
            missing.join(", ")
        )));
    }
    Ok(pairs)
}

pub fn cmd_bootstrap(
    csv_a: &Path,
    csv_b: &Path,
    n_resamples: usize,
    ci: f64,
    seed: u64,
) -> Result<BootstrapReport> {
    let a = read_metrics_csv(csv_a)?;
    let b = read_metrics_csv(csv_b)?;
    let pairs = join_records(&a, &b)?;
    if pairs.is_empty() {
        return Err(CeaError::Config("no matched pairs to compare".into()));
    }
    let psnr_diffs: Vec<f64> = pairs
        .iter()
        .filter(|(x, y)| x.psnr_db.is_finite() && y.psnr_db.is_finite())
        .map(|(x, y)| x.psnr_db - y.psnr_db)
        .collect();
    let excluded = pairs.len() - psnr_diffs.len();
    if psnr_diffs.is_empty() {
        return Err(CeaError::Numeric(
            "all PSNR pairs carry the identical-image sentinel".into(),
        ));
    }
    let ssim_diffs: Vec<f64> = pairs.iter().map(|(x, y)| x.ssim - y.ssim).collect();
    Ok(BootstrapReport {
        n_pairs: pairs.len(),
        psnr_pairs_excluded: excluded,
        psnr: paired_bootstrap(&psnr_diffs, n_resamples, ci, seed)?,
        ssim: paired_bootstrap(&ssim_diffs, n_resamples, ci, seed.wrapping_add(1))?,
    })
}

pub fn render_report(r: &BootstrapReport) -> String {
    format!(
        "paired bootstrap over {} pairs ({} PSNR pairs excluded as identical)\n\
         PSNR diff: mean {:+.4} dB, CI [{:+.4}, {:+.4}], p_boot {}\n\
         SSIM diff: mean {:+.5},    CI [{:+.5}, {:+.5}], p_boot {}\n",
        r.n_pairs,
        r.psnr_pairs_excluded,
        r.psnr.mean,
        r.psnr.ci_lo,
        r.psnr.ci_hi,
        r.psnr.p_boot_report(),
        r.ssim.mean,
        r.ssim.ci_lo,
        r.ssim.ci_hi,
        r.ssim.p_boot_report(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::write_metrics_csv;

    fn records(offset: f64, n: usize) -> Vec<MetricRecord> {
        (0..n)
            .map(|i| MetricRecord {
                image_id: format!("img{i:03}"),
                psnr_db: 25.0 + i as f64 * 0.1 + offset,
                ssim: 0.8 + offset / 100.0,
            })
            .collect()
    }

    #[test]
    fn identical_csvs_give_zero_difference() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_metrics_csv(&p, &records(0.0, 20)).unwrap();
        let r = cmd_bootstrap(&p, &p, 500, 0.95, 1).unwrap();
        assert_eq!(r.psnr.mean, 0.0);
        assert_eq!(r.psnr.ci_lo, 0.0);
        assert_eq!(r.psnr.ci_hi, 0.0);
    }

    #[test]
    fn constant_one_db_advantage() {
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_metrics_csv(&pa, &records(1.0, 30)).unwrap();
        write_metrics_csv(&pb, &records(0.0, 30)).unwrap();
        let r = cmd_bootstrap(&pa, &pb, 1000, 0.95, 2).unwrap();
        assert!((r.psnr.mean - 1.0).abs() < 1e-9);
        assert!((r.psnr.ci_lo - 1.0).abs() < 1e-9 && (r.psnr.ci_hi - 1.0).abs() < 1e-9);
        assert_eq!(r.psnr.p_boot, 0.0);
        assert_eq!(r.psnr.p_boot_report(), "< 1e-3");
    }

    #[test]
    fn unmatched_ids_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_metrics_csv(&pa, &records(0.0, 3)).unwrap();
        let mut other = records(0.0, 2);
        other[1].image_id = "rogue".into();
        write_metrics_csv(&pb, &other).unwrap();
        let err = cmd_bootstrap(&pa, &pb, 100, 0.95, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("img001") && msg.contains("rogue"), "{msg}");
    }

    #[test]
    fn sentinel_pairs_are_excluded_from_psnr() {
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        let mut a = records(1.0, 5);
        a[0].psnr_db = f64::INFINITY;
        write_metrics_csv(&pa, &a).unwrap();
        write_metrics_csv(&pb, &records(0.0, 5)).unwrap();
        let r = cmd_bootstrap(&pa, &pb, 200, 0.95, 3).unwrap();
        assert_eq!(r.psnr_pairs_excluded, 1);
        assert_eq!(r.psnr.n_pairs, 4);
    }

    #[test]
    fn deterministic_under_seed() {
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_metrics_csv(&pa, &records(0.3, 50)).unwrap();
        write_metrics_csv(&pb, &records(0.0, 50)).unwrap();
        let r1 = cmd_bootstrap(&pa, &pb, 2000, 0.95, 7).unwrap();
        let r2 = cmd_bootstrap(&pa, &pb, 2000, 0.95, 7).unwrap();
        assert_eq!(r1.psnr.ci_lo.to_bits(), r2.psnr.ci_lo.to_bits());
        assert_eq!(r1.ssim.ci_hi.to_bits(), r2.ssim.ci_hi.to_bits());
    }
}
